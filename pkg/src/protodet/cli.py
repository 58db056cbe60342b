"""``protodet`` command line: generate, train, eval, export-prototypes, ablate."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import tensor as T
from .backbone import tokenize_pyramid
from .config import RunConfig, load_config
from .episodes import Episode, generate_episode, load_episode, save_episode
from .errors import NonFiniteError, ProtodetError
from .matching import hungarian_match, match_cost
from .model import Detector, episode_context, evaluate_episode
from .prototypes import build_negative_prototypes
from .rng import Rng
from .training import load_checkpoint, run_training, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SWEEPS = {"n_neg": "jitter.n_neg", "alpha": "match.branch_alpha", "level": "model.proto_level"}


class UsageError(Exception):
    pass


def _overrides(pairs: Sequence[str] | None) -> dict[str, Any]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(raw)
    return out


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    extra = _overrides(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        extra["seed"] = args.seed
    return cfg.replace(**extra) if extra else cfg


def _stamp(cfg: RunConfig) -> dict[str, Any]:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed}


def _write_json(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True))


# -- generate ----------------------------------------------------------------
def cmd_generate(args) -> int:
    cfg = _config(args)
    ep_cfg = cfg.episode
    style = args.style or ep_cfg.style
    shots = args.shots or ep_cfg.shots
    ep = generate_episode(
        ep_cfg.n_way, shots, ep_cfg.n_query, style, cfg.seed, ep_cfg.image_size, ep_cfg.max_objects
    )
    ep.meta.update(_stamp(cfg))
    path = save_episode(ep, args.out)
    n_inst = sum(len(r.annotations) for r in ep.supports + ep.queries)
    print(
        f"episode C={ep.n_way} K={ep.shots} style={ep.style} supports={len(ep.supports)} "
        f"queries={len(ep.queries)} instances={n_inst} -> {path}"
    )
    return EXIT_OK


# -- train -------------------------------------------------------------------
def _train_stages(
    cfg: RunConfig, ep: Episode, stages: list[int], out: Path | None, model: Detector | None = None, log_path=None,
    resume_header: dict | None = None, resume_opt=None,
) -> Detector:
    model = model or Detector(cfg.model, cfg.seed)
    stamp = _stamp(cfg)
    fh = open(log_path, "a" if resume_header else "w") if log_path else None
    try:
        for stage in stages:
            start, opt = 0, None
            if resume_header and resume_header["stage"] == stage:
                start, opt = resume_header["step"], resume_opt
                total = cfg.train.stage1_steps if stage == 1 else cfg.train.stage2_steps
                steps = max(total - start, 0)
            else:
                steps = None

            def log(rec, _fh=fh):
                if _fh is not None:
                    _fh.write(json.dumps({**rec, **stamp}, sort_keys=True) + "\n")

            res = run_training(model, ep, cfg, stage, Rng(cfg.seed).child("train"), steps, opt, start, log)
            done = start + len(res.losses)
            if out is not None:
                save_checkpoint(out / f"stage{stage}.ckpt", model, cfg, stage, done, res.optimizer)
    finally:
        if fh is not None:
            fh.close()
    return model


def cmd_train(args) -> int:
    cfg = _config(args)
    ep = load_episode(args.episode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stages = [1, 2] if args.stage == "both" else [int(args.stage)]
    model, header, opt = None, None, None
    if args.resume:
        model, _, header, opt = load_checkpoint(args.resume, cfg)
        if header["stage"] == 2:
            if stages == [1]:
                raise UsageError("cannot resume stage 1 from a stage-2 checkpoint")
            stages = [2]
        elif stages == [2]:
            header, opt = None, None  # stage 2 starts from the stage-1 weights
    _train_stages(cfg, ep, stages, out, model, out / "train_log.jsonl", header, opt)
    print(f"trained stages {stages} ({cfg.config_hash()}) -> {out}")
    return EXIT_OK


# -- eval --------------------------------------------------------------------
def _detections_json(ep: Episode, dets) -> list[dict]:
    rows = []
    for rec, img_dets in zip(ep.queries, dets):
        for d in img_dets:
            x1, y1, x2, y2 = d.box.xyxy()
            s = ep.image_size
            rows.append(
                {
                    "image_id": rec.image_id,
                    "category_id": d.class_id + 1,
                    "bbox": [x1 * s, y1 * s, (x2 - x1) * s, (y2 - y1) * s],
                    "score": d.score,
                    "branch": d.branch,
                }
            )
    return rows


def _load_model(args):
    """Load a checkpoint; an explicit --config/--set must match its config hash."""
    expected = _config(args) if (args.config or args.set) else None
    return load_checkpoint(args.checkpoint, expected)


def cmd_eval(args) -> int:
    model, cfg, header, _ = _load_model(args)
    ep = load_episode(args.episode)
    ev = cfg.eval
    metrics, dets = evaluate_episode(model, ep, args.branch, ev.topk, ev.nms_iou, ev.ensemble, ev.iou_thresholds)
    out = Path(args.out)
    stamp = {**_stamp(cfg), "branch": args.branch, "checkpoint_stage": header["stage"]}
    _write_json(out / f"metrics_{args.branch}.json", {**metrics, **stamp})
    _write_json(out / f"detections_{args.branch}.json", {"detections": _detections_json(ep, dets), **stamp})
    print(f"{args.branch}: mAP={metrics['mAP']:.4f} AP50={metrics['AP50']:.4f}")
    for c, ap in sorted(metrics["per_class"].items()):
        print(f"  class {c} ({ep.class_names[c]}): AP={ap:.4f}")
    if args.export_embeddings:
        export_embeddings(model, cfg, ep, Path(args.export_embeddings))
    return EXIT_OK


def export_embeddings(model: Detector, cfg: RunConfig, ep: Episode, path: Path) -> int:
    """Final-layer visual query states (labelled by matched GT class or ``bg``)
    and hard-negative prototypes (labelled ``neg:<class of source GT>``)."""
    ctx = episode_context(model, ep)
    rows = []
    with T.no_grad():
        for rec in ep.queries:
            pyr = model.backbone(rec.image)
            tokens, index = tokenize_pyramid(pyr)
            guidance = ctx.class_protos
            res, _, _ = model.run_branch("visual", tokens, index.cells, guidance, ctx.class_protos)
            labels = ["bg"] * res.hidden[-1].shape[0]
            if rec.annotations:
                cost = match_cost(res.logits[-1].data, res.boxes[-1].data, rec.gt_classes, rec.gt_boxes, cfg.match)
                for q, g in hungarian_match(cost).pairs:
                    labels[q] = str(int(rec.gt_classes[g]))
            for q, vec in enumerate(res.hidden[-1].data):
                rows.append((rec.image_id, "query", labels[q], vec))
            if rec.annotations:
                negs, parents = build_negative_prototypes(
                    pyr, [b for _, b in rec.annotations], cfg.jitter,
                    Rng(cfg.seed).child(f"export:{rec.image_id}"), cfg.model.neg_level,
                    cfg.model.roi_size, cfg.model.roi_sampling,
                )
                for vec, parent in zip(negs.data, parents):
                    rows.append((rec.image_id, "negative", f"neg:{int(rec.gt_classes[parent])}", vec))
    _write_rows(path, rows, cfg)
    return len(rows)


def _write_rows(path: Path, rows, cfg: RunConfig) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    d = cfg.model.d_model
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.config_hash()} seed={cfg.seed}\n")
        w = csv.writer(fh)
        w.writerow(["image_id", "kind", "label"] + [f"e{i}" for i in range(d)])
        for image_id, kind, label, vec in rows:
            w.writerow([image_id, kind, label] + [repr(float(v)) for v in vec])


# -- export-prototypes -------------------------------------------------------
def cmd_export_prototypes(args) -> int:
    model, cfg, _, _ = _load_model(args)
    ep = load_episode(args.episode)
    ctx = episode_context(model, ep)
    rows = [(-1, "class", str(c), vec) for c, vec in enumerate(ctx.class_protos.data)]
    with T.no_grad():
        for rec in ep.queries:
            if not rec.annotations:
                continue
            negs, parents = build_negative_prototypes(
                model.backbone(rec.image), [b for _, b in rec.annotations], cfg.jitter,
                Rng(cfg.seed).child(f"export:{rec.image_id}"), cfg.model.neg_level,
                cfg.model.roi_size, cfg.model.roi_sampling,
            )
            for vec, parent in zip(negs.data, parents):
                rows.append((rec.image_id, "negative", f"neg:{int(rec.gt_classes[parent])}", vec))
    _write_rows(Path(args.out), rows, cfg)
    print(f"wrote {len(rows)} prototype rows -> {args.out}")
    return EXIT_OK


# -- ablate ------------------------------------------------------------------
def parse_sweep(spec: str) -> tuple[str, list]:
    if "=" not in spec:
        raise UsageError(f"--sweep expects name=v1,v2,..., got {spec!r}")
    name, raw = spec.split("=", 1)
    name = name.strip()
    if name not in SWEEPS:
        raise UsageError(f"sweep must be one of {sorted(SWEEPS)}")
    if ".." in raw:
        lo, hi = raw.split("..")
        values = list(range(int(lo), int(hi) + 1))
    else:
        values = [yaml.safe_load(v) for v in raw.split(",") if v.strip()]
    if not values:
        raise UsageError("empty sweep")
    if name in ("n_neg", "level"):
        values = [int(v) for v in values]
    else:
        values = [float(v) for v in values]
    return name, values


def cmd_ablate(args) -> int:
    cfg = _config(args)
    name, values = parse_sweep(args.sweep)
    if args.episode:
        ep = load_episode(args.episode)
    else:
        e = cfg.episode
        ep = generate_episode(e.n_way, e.shots, e.n_query, e.style, cfg.seed, e.image_size, e.max_objects)
    rows = []
    for v in values:
        point = cfg.replace(**{SWEEPS[name]: v})
        if name == "level":
            point = point.replace(**{"model.neg_level": v})
        model = _train_stages(point, ep, [1, 2], None)
        ev = point.eval
        metrics, _ = evaluate_episode(model, ep, args.branch, ev.topk, ev.nms_iou, ev.ensemble, ev.iou_thresholds)
        rows.append((v, metrics["mAP"], metrics["AP50"], point.config_hash()))
        print(f"{name}={v}: mAP={metrics['mAP']:.4f} AP50={metrics['AP50']:.4f}", flush=True)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([name, "mAP", "AP50", "config_hash", "seed"])
        for v, m, a50, h in rows:
            w.writerow([v, repr(m), repr(a50), h, cfg.seed])
    return EXIT_OK


# -- entry point ---------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="protodet", description="Few-shot detection with text and visual prototypes.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="YAML or JSON run config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")
        if seed:
            sp.add_argument("--seed", type=int)

    g = sub.add_parser("generate", help="render a synthetic episode")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--style", choices=["photo-like", "cartoon-like", "texture-defect", "low-contrast"])
    g.add_argument("--shots", type=int, choices=[1, 5, 10])
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="two-stage fine-tuning on an episode")
    common(t)
    t.add_argument("--episode", required=True)
    t.add_argument("--stage", choices=["1", "2", "both"], default="both")
    t.add_argument("--resume")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on an episode's queries")
    common(e, seed=False)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episode", required=True)
    e.add_argument("--branch", choices=["text", "visual", "ensemble"], default="ensemble")
    e.add_argument("--out", required=True)
    e.add_argument("--export-embeddings", metavar="CSV")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-prototypes", help="write class and hard-negative prototypes as CSV")
    common(x, seed=False)
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--episode", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_prototypes)

    a = sub.add_parser("ablate", help="train and evaluate across a parameter sweep")
    common(a)
    a.add_argument("--sweep", required=True, help="n_neg=0,1,3,5 | alpha=0,0.5,1 | level=0..3")
    a.add_argument("--episode")
    a.add_argument("--branch", choices=["text", "visual", "ensemble"], default="ensemble")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ProtodetError, OSError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
