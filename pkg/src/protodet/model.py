"""Dual-branch detector: shared backbone, text-guided and visual-guided branches."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Backbone, TextProjection, TextPrototypes, embed_text, tokenize_pyramid
from .config import ModelConfig, RunConfig
from .decoder import Branch, BranchOutput, clone_weights, decode_branch
from .enhancer import enhance, init_query_seeds, select_queries
from .episodes import Episode, ImageRecord
from .evaluation import COCO_THRESHOLDS, Detection, ensemble_detections, evaluate_map, nms
from .geometry import Box
from .matching import LossBreakdown, branch_loss
from .nn import Module
from .prototypes import assemble_visual_tokens, build_class_prototypes, build_negative_prototypes
from .rng import Rng
from .tensor import Tensor

BRANCHES = ("text", "visual")


class Detector(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = Rng(seed)
        d = cfg.d_model
        self.backbone = Backbone(d, rng.child("backbone"))
        self.text_proj = TextProjection(cfg.d_text, d, rng.child("text_proj"))
        self.text_branch = Branch(
            d, cfg.n_heads, cfg.ffn_dim, cfg.enc_layers, cfg.dec_layers, rng.child("branch"), cfg.per_layer_heads
        )
        # the visual branch starts as a copy of the text branch
        self.visual_branch = clone_weights(self.text_branch)
        self.cfg = cfg

    def branch(self, name: str) -> Branch:
        return self.text_branch if name == "text" else self.visual_branch

    def param_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        groups: dict[str, list[tuple[str, Tensor]]] = {"backbone": [], "text": [], "visual": []}
        for name, p in self.named_parameters():
            if name.startswith("backbone."):
                groups["backbone"].append((name, p))
            elif name.startswith("visual_branch."):
                groups["visual"].append((name, p))
            else:
                groups["text"].append((name, p))
        return groups

    # -- prototypes -------------------------------------------------------
    def text_prototypes(self, class_names: list[str]) -> TextPrototypes:
        return embed_text(class_names, self.cfg.tau_t, self.text_proj.w_t, self.cfg.text_salt)

    def class_prototypes(self, supports: list[ImageRecord], n_classes: int) -> Tensor:
        feats = [(self.backbone(rec.image), rec.annotations) for rec in supports]
        return build_class_prototypes(feats, n_classes, self.cfg.proto_level, self.cfg.roi_size, self.cfg.roi_sampling)

    # -- branch forward ---------------------------------------------------
    def run_branch(
        self,
        name: str,
        tokens: Tensor,
        cells: np.ndarray,
        guidance: Tensor,
        logit_protos: Tensor,
        selected: np.ndarray | None = None,
    ) -> tuple[BranchOutput, np.ndarray, Tensor]:
        """Enhance, select queries, decode. Returns outputs, selected token indices
        and the adapted guidance."""
        cfg = self.cfg
        br = self.branch(name)
        x_enh, g_enh = enhance(tokens, guidance, br.enhancer, cells)
        if selected is None:
            selected = select_queries(x_enh, g_enh, min(cfg.n_q, tokens.shape[0]))
        seeds = init_query_seeds(selected, x_enh, br.anchor_head, br.content, cells)
        alpha, tau = (cfg.alpha_txt, cfg.tau_txt) if name == "text" else (cfg.alpha_vis, cfg.tau_vis)
        out = decode_branch(seeds, x_enh, g_enh, br.decoder, logit_protos, alpha, tau, cells)
        return out, selected, g_enh


@dataclass
class DiscreteCache:
    """Records query selections and matchings so a forward pass can be replayed
    with every discrete decision held fixed."""

    entries: dict = field(default_factory=dict)
    replay: bool = False


def image_losses(
    model: Detector,
    rec: ImageRecord,
    class_protos: Tensor,
    text_protos: TextPrototypes | None,
    run_cfg: RunConfig,
    rng: Rng,
    branches: tuple[str, ...] = BRANCHES,
    cache: DiscreteCache | None = None,
) -> dict[str, LossBreakdown]:
    """Per-branch losses for one annotated training image."""
    pyr = model.backbone(rec.image)
    tokens, index = tokenize_pyramid(pyr)
    gt_boxes, gt_classes = rec.gt_boxes, rec.gt_classes
    out: dict[str, LossBreakdown] = {}
    for name in branches:
        key = (name, rec.image_id)
        prior = cache.entries.get(key) if cache is not None and cache.replay else None
        if name == "visual":
            negs = None
            if run_cfg.jitter.n_neg > 0 and rec.annotations:
                negs, _ = build_negative_prototypes(
                    pyr,
                    [b for _, b in rec.annotations],
                    run_cfg.jitter,
                    rng.child(f"neg:{rec.image_id}"),
                    model.cfg.neg_level,
                    model.cfg.roi_size,
                    model.cfg.roi_sampling,
                )
            guidance = assemble_visual_tokens(class_protos, negs).V
            protos = class_protos
        else:
            guidance = protos = text_protos.projected
        res, selected, _ = model.run_branch(
            name, tokens, index.cells, guidance, protos, None if prior is None else prior["selected"]
        )
        loss = branch_loss(res, gt_classes, gt_boxes, run_cfg.match, None if prior is None else prior["matches"])
        if cache is not None and not cache.replay:
            cache.entries[key] = {"selected": selected, "matches": loss.matches}
        out[name] = loss
    return out


def detections_from_output(out: BranchOutput, branch: str, topk: int = 100, nms_iou: float | None = 0.5) -> list[Detection]:
    """Final-layer detections: max-class sigmoid score, top-k, optional class-wise NMS."""
    logits = out.logits[-1].data
    boxes = out.boxes[-1].data
    probs = np.exp(-np.logaddexp(0.0, -logits))
    cls = probs.argmax(axis=1)
    score = probs[np.arange(len(cls)), cls]
    order = np.lexsort((np.arange(len(score)), -score))[:topk]
    dets = [Detection(Box(*boxes[i]), int(cls[i]), float(score[i]), branch) for i in order]
    return nms(dets, nms_iou) if nms_iou is not None else dets


@dataclass
class EpisodeContext:
    """Prototypes computed once per episode for inference."""

    class_protos: Tensor
    text_protos: TextPrototypes


def episode_context(model: Detector, episode: Episode) -> EpisodeContext:
    with T.no_grad():
        return EpisodeContext(
            model.class_prototypes(episode.supports, episode.n_way),
            model.text_prototypes(episode.class_names),
        )


def predict_image(
    model: Detector,
    image: np.ndarray,
    ctx: EpisodeContext,
    branches: tuple[str, ...] = BRANCHES,
    topk: int = 100,
    nms_iou: float = 0.5,
) -> dict[str, tuple[list[Detection], BranchOutput]]:
    """Inference on an unannotated image: the visual guidance is the class prototypes alone."""
    with T.no_grad():
        tokens, index = tokenize_pyramid(model.backbone(image))
        out = {}
        for name in branches:
            if name == "visual":
                guidance = protos = ctx.class_protos
            else:
                guidance = protos = ctx.text_protos.projected
            res, _, _ = model.run_branch(name, tokens, index.cells, guidance, protos)
            out[name] = (detections_from_output(res, name, topk, nms_iou), res)
    return out


def evaluate_episode(
    model: Detector,
    episode: Episode,
    branch: str = "ensemble",
    topk: int = 100,
    nms_iou: float = 0.5,
    ensemble_mode: str = "union",
    iou_thresholds=COCO_THRESHOLDS,
) -> tuple[dict, list[list[Detection]]]:
    """Detect on every query image and score against its annotations.

    ``branch`` is ``text``, ``visual`` or ``ensemble`` (both branches merged).
    """
    if branch not in ("text", "visual", "ensemble"):
        raise ValueError(f"unknown branch {branch!r}")
    ctx = episode_context(model, episode)
    needed = BRANCHES if branch == "ensemble" else (branch,)
    all_dets = []
    for rec in episode.queries:
        res = predict_image(model, rec.image, ctx, needed, topk, nms_iou)
        if branch == "ensemble":
            dets = ensemble_detections(res["text"][0], res["visual"][0], nms_iou, ensemble_mode)
        else:
            dets = res[branch][0]
        all_dets.append(dets)
    metrics = evaluate_map(all_dets, [q.annotations for q in episode.queries], iou_thresholds, episode.n_way)
    return metrics, all_dets
