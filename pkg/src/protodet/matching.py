"""Hungarian matching and the set-prediction loss stack."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import NonFiniteError
from .geometry import giou_tensor, pairwise_giou
from .tensor import Tensor


@dataclass(frozen=True)
class MatchConfig:
    cost_cls: float = 1.0
    cost_l1: float = 5.0
    cost_giou: float = 2.0
    loss_cls: float = 2.0
    loss_l1: float = 5.0
    loss_giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    branch_alpha: float = 1.0
    focal_norm: str = "gt"  # "gt" (matched-GT count) or "queries"

    def __post_init__(self):
        weights = (self.cost_cls, self.cost_l1, self.cost_giou, self.loss_cls, self.loss_l1, self.loss_giou)
        if min(weights) < 0 or self.branch_alpha < 0:
            raise ValueError("cost and loss weights must be non-negative")
        if self.focal_norm not in ("gt", "queries"):
            raise ValueError("focal_norm must be 'gt' or 'queries'")


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    cost: float

    @property
    def rows(self) -> np.ndarray:
        return np.array([i for i, _ in self.pairs], dtype=int)

    @property
    def cols(self) -> np.ndarray:
        return np.array([j for _, j in self.pairs], dtype=int)


# -- assignment ------------------------------------------------------------
def _shortest_augmenting_path(c: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Min-cost assignment of every row of an n x m matrix (n <= m).

    Returns ``row_to_col`` plus row and column potentials with
    ``c[i, j] - u[i] - v[j] >= 0`` everywhere, equality on matched pairs and
    ``v <= 0`` (zero on unmatched columns).
    """
    n, m = c.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # p[j]: 1-based row holding column j, 0 if free
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.full(n, -1, dtype=int)
    for j in range(1, m + 1):
        if p[j]:
            row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _solve(c: np.ndarray) -> tuple[dict[int, int], float, np.ndarray]:
    """Optimal max-cardinality assignment of any rectangular matrix.

    Returns the row -> col mapping, its cost and the reduced costs. A pair with
    positive reduced cost belongs to no optimal assignment.
    """
    n, m = c.shape
    if n == 0 or m == 0:
        return {}, 0.0, np.zeros((n, m))
    if n <= m:
        r2c, u, v = _shortest_augmenting_path(c)
        assign = {i: int(r2c[i]) for i in range(n)}
        reduced = c - u[:, None] - v[None, :]
    else:
        r2c, u, v = _shortest_augmenting_path(c.T)
        assign = {int(r2c[j]): j for j in range(m)}
        reduced = (c.T - u[:, None] - v[None, :]).T
    cost = float(sum(c[i, j] for i, j in sorted(assign.items())))
    return assign, cost, reduced


def hungarian_match(cost) -> MatchResult:
    """Minimum-cost one-to-one assignment with ``min(n, m)`` pairs.

    Among equal-cost optima the lexicographically smallest pair list (pairs
    sorted by row) is returned.
    """
    c = np.array(cost.data if isinstance(cost, Tensor) else cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost must be a matrix")
    if not np.isfinite(c).all():
        raise NonFiniteError("cost matrix has NaN or Inf entries")
    n, m = c.shape
    assign, opt, reduced = _solve(c)
    need = min(n, m)
    tol = 1e-9 * max(1.0, float(np.abs(c).max(initial=0.0)) * max(need, 1))

    decided: dict[int, int] = {}
    fixed = 0.0
    cols_left = set(range(m))
    current = dict(assign)
    for i in range(n):
        if len(decided) == need:
            break
        rows_after = list(range(i + 1, n))
        still = need - len(decided)
        for j in sorted(cols_left):
            if reduced[i, j] > tol:
                continue
            if current.get(i) == j:
                decided[i] = j
                fixed += c[i, j]
                cols_left.discard(j)
                break
            cols = sorted(cols_left - {j})
            if min(len(rows_after), len(cols)) != still - 1:
                continue
            sub_assign, sub_cost, _ = _solve(c[np.ix_(rows_after, cols)])
            if fixed + c[i, j] + sub_cost <= opt + tol:
                decided[i] = j
                fixed += c[i, j]
                cols_left.discard(j)
                current = {**decided, **{rows_after[a]: cols[b] for a, b in sub_assign.items()}}
                break
        # no column chosen: the current optimum already leaves row i unmatched
    pairs = sorted(decided.items())
    total = float(sum(c[i, j] for i, j in pairs))
    return MatchResult(pairs, total)


# -- costs and losses ------------------------------------------------------
def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def focal_class_cost(logits: np.ndarray, classes: np.ndarray, alpha: float, gamma: float) -> np.ndarray:
    """Positive-minus-negative focal term for each (query, gt class) pair."""
    z = np.asarray(logits)[:, np.asarray(classes, dtype=int)]
    p = np.exp(_log_sigmoid(z))
    pos = alpha * (1 - p) ** gamma * -_log_sigmoid(z)
    neg = (1 - alpha) * p**gamma * -_log_sigmoid(-z)
    return pos - neg


def match_cost(logits, boxes, gt_classes, gt_boxes, cfg: MatchConfig) -> np.ndarray:
    """n_q x J matching cost: class + L1 (cxcywh) + (1 - GIoU), each weighted."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    b = boxes.data if isinstance(boxes, Tensor) else np.asarray(boxes, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if gt_boxes.shape[0] == 0:
        return np.zeros((z.shape[0], 0))
    cls = focal_class_cost(z, gt_classes, cfg.focal_alpha, cfg.focal_gamma)
    l1 = np.abs(b[:, None, :] - gt_boxes[None, :, :]).sum(axis=-1)
    return cfg.cost_cls * cls + cfg.cost_l1 * l1 + cfg.cost_giou * (1.0 - pairwise_giou(b, gt_boxes))


def focal_loss(logits: Tensor, targets: np.ndarray, alpha: float = 0.25, gamma: float = 2.0, normalizer: float = 1.0) -> Tensor:
    """Sigmoid focal loss summed over all entries, divided by ``normalizer``.

    With binary targets, ``-log p_t`` and ``1 - p_t`` are both functions of
    ``z * (1 - 2t)``, which keeps the evaluation stable for saturated logits.
    """
    t = np.asarray(targets, dtype=np.float64)
    s = logits * Tensor(1.0 - 2.0 * t)
    alpha_t = Tensor(alpha * t + (1.0 - alpha) * (1.0 - t))
    per_entry = alpha_t * T.softplus(s) * T.power(T.sigmoid(s), gamma)
    return T.tsum(per_entry) * (1.0 / normalizer)


def one_hot_targets(n_q: int, n_classes: int, match: MatchResult, gt_classes) -> np.ndarray:
    t = np.zeros((n_q, n_classes))
    gt_classes = np.asarray(gt_classes, dtype=int)
    for q, g in match.pairs:
        t[q, gt_classes[g]] = 1.0
    return t


@dataclass
class LossBreakdown:
    loss: Tensor
    focal: float = 0.0
    l1: float = 0.0
    giou: float = 0.0
    matches: list[MatchResult] = field(default_factory=list)

    def records(self) -> dict[str, float]:
        return {"focal": self.focal, "l1": self.l1, "giou": self.giou, "loss": self.loss.item()}


def layer_loss(
    logits: Tensor,
    boxes: Tensor,
    gt_classes,
    gt_boxes,
    cfg: MatchConfig,
    match: MatchResult | None = None,
) -> tuple[Tensor, Tensor, Tensor, MatchResult]:
    """(focal, l1, giou) terms of one decoder layer at a (given or fresh) matching."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n_gt = gt_boxes.shape[0]
    if match is None:
        match = hungarian_match(match_cost(logits, boxes, gt_classes, gt_boxes, cfg))
    n_q, n_cls = logits.shape
    norm = float(max(n_gt, 1))
    focal_norm = norm if cfg.focal_norm == "gt" else float(n_q)
    targets = one_hot_targets(n_q, n_cls, match, gt_classes)
    focal = focal_loss(logits, targets, cfg.focal_alpha, cfg.focal_gamma, focal_norm)
    if match.pairs:
        pred = boxes[match.rows]
        tgt = gt_boxes[match.cols]
        l1 = T.tsum(T.absolute(pred - Tensor(tgt))) * (1.0 / norm)
        g = T.tsum(1.0 - giou_tensor(pred, tgt)) * (1.0 / norm)
    else:
        l1 = Tensor(0.0)
        g = Tensor(0.0)
    return focal, l1, g, match


def branch_loss(outputs, gt_classes, gt_boxes, cfg: MatchConfig, matches: list[MatchResult] | None = None) -> LossBreakdown:
    """Weighted focal + L1 + GIoU summed over every decoder layer (auxiliary layers weigh 1).

    Matching is recomputed per layer unless ``matches`` pins it; the
    assignment is treated as constant when differentiating.
    """
    total = Tensor(0.0)
    out = LossBreakdown(total)
    for k, (logits, boxes) in enumerate(zip(outputs.logits, outputs.boxes)):
        fixed = None if matches is None else matches[k]
        focal, l1, g, match = layer_loss(logits, boxes, gt_classes, gt_boxes, cfg, fixed)
        total = total + focal * cfg.loss_cls + l1 * cfg.loss_l1 + g * cfg.loss_giou
        out.focal += focal.item()
        out.l1 += l1.item()
        out.giou += g.item()
        out.matches.append(match)
    out.loss = total
    return out


def total_loss(l_text, l_visual, alpha: float = 1.0):
    """Text loss plus ``alpha`` times visual loss."""
    return l_text + l_visual * alpha
