"""Forward values of the detection and ANN-to-SNN distillation losses."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

KL_FLOOR = 1e-12
CIOU_EPS = 1e-7


@dataclass(frozen=True)
class DistillConfig:
    Tp: float = 20.0
    alpha: float = 6.0
    beta: float = 0.5
    gamma: float = 1.5
    theta: float = 1.0
    eta: float = 1.0
    T: int = 7

    def __post_init__(self):
        if self.Tp <= 0:
            raise ValueError("temperature must be positive")
        if min(self.alpha, self.beta, self.gamma, self.theta, self.eta) < 0:
            raise ValueError("loss weights must be non-negative")

    def scheduled(self, iteration: int, total: int) -> "DistillConfig":
        return replace(self, theta=theta_schedule(iteration, total), eta=eta_schedule(iteration, total))


@dataclass
class AssignedBatch:
    """Foreground rows produced by an assigner (the assigner itself is external).

    ``pred_dist`` holds per-side bin logits ``(n, 4, RegMax)`` in l, t, r, b
    order and ``target_ltrb`` the matching continuous targets in bin units.
    """

    weights: np.ndarray
    pred_boxes: np.ndarray | None = None
    target_boxes: np.ndarray | None = None
    pred_dist: np.ndarray | None = None
    target_ltrb: np.ndarray | None = None

    @property
    def normalizer(self) -> float:
        return float(np.sum(self.weights))


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    m = z.max(axis=axis, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=axis, keepdims=True))


def softmax_T(logits, Tp: float = 1.0, axis: int = -1) -> np.ndarray:
    if Tp <= 0:
        raise ValueError("temperature must be positive")
    return np.exp(log_softmax(np.asarray(logits, dtype=np.float64) / Tp, axis))


def kl_div(p_s: np.ndarray, p_t: np.ndarray) -> float:
    """Row-averaged teacher-weighted KL: ``mean_i sum_j p_t log(p_t / p_s)``.

    Both inputs are ``M×K`` probability rows; probabilities are floored at
    ``1e-12`` inside the log and zero teacher mass contributes exactly 0.
    """
    p_s = np.atleast_2d(np.asarray(p_s, dtype=np.float64))
    p_t = np.atleast_2d(np.asarray(p_t, dtype=np.float64))
    if p_s.shape != p_t.shape:
        raise ValueError(f"shape mismatch {p_s.shape} vs {p_t.shape}")
    terms = np.where(p_t > 0, p_t * (np.log(np.maximum(p_t, KL_FLOOR)) - np.log(np.maximum(p_s, KL_FLOOR))), 0.0)
    return float(terms.sum() / p_s.shape[0])


def bce_logits(x, y) -> float:
    """Sum-reduced binary cross-entropy on logits (overflow-safe form)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.sum(np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))))


def ciou(box_p, box_t, eps: float = CIOU_EPS) -> np.ndarray:
    """Complete IoU of ``x1 y1 x2 y2`` boxes (vectorised over leading dims)."""
    p = np.asarray(box_p, dtype=np.float64)
    t = np.asarray(box_t, dtype=np.float64)
    w1, h1 = p[..., 2] - p[..., 0], p[..., 3] - p[..., 1]
    w2, h2 = t[..., 2] - t[..., 0], t[..., 3] - t[..., 1]
    inter = (np.clip(np.minimum(p[..., 2], t[..., 2]) - np.maximum(p[..., 0], t[..., 0]), 0, None)
             * np.clip(np.minimum(p[..., 3], t[..., 3]) - np.maximum(p[..., 1], t[..., 1]), 0, None))
    union = w1 * h1 + w2 * h2 - inter + eps
    iou = inter / union
    cw = np.maximum(p[..., 2], t[..., 2]) - np.minimum(p[..., 0], t[..., 0])
    ch = np.maximum(p[..., 3], t[..., 3]) - np.minimum(p[..., 1], t[..., 1])
    c2 = cw ** 2 + ch ** 2 + eps
    rho2 = ((p[..., 0] + p[..., 2] - t[..., 0] - t[..., 2]) ** 2
            + (p[..., 1] + p[..., 3] - t[..., 1] - t[..., 3]) ** 2) / 4
    v = (4 / math.pi ** 2) * (np.arctan(w2 / (h2 + eps)) - np.arctan(w1 / (h1 + eps))) ** 2
    alpha = v / (v - iou + (1 + eps))
    return iou - (rho2 / c2 + v * alpha)


def _check_weights(w) -> tuple[np.ndarray, float]:
    w = np.asarray(w, dtype=np.float64)
    s = float(w.sum())
    if len(w) == 0 or s <= 0:
        raise ValueError("foreground weight sum must be positive")
    return w, s


def box_loss(batch: AssignedBatch) -> float:
    w, s = _check_weights(batch.weights)
    return float(np.sum(w * (1.0 - ciou(batch.pred_boxes, batch.target_boxes))) / s)


def ldfl(logits, y: float, from_logits: bool = True) -> float:
    """DFL for one coordinate: cross-entropy split between the two bracketing bins."""
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[-1]
    if not 0 <= y <= n - 1:
        raise ValueError(f"target {y} outside bin range [0, {n - 1}]")
    logp = log_softmax(logits) if from_logits else np.log(np.maximum(logits, KL_FLOOR))
    lo = int(math.floor(y))
    hi = min(lo + 1, n - 1)
    w_lo = (lo + 1) - y
    w_hi = 1.0 - w_lo
    loss = -w_lo * logp[lo]
    if w_hi:
        loss -= w_hi * logp[hi]
    return float(loss)


def dfl_loss(batch: AssignedBatch, reg_max: int = 5, from_logits: bool = True) -> float:
    w, s = _check_weights(batch.weights)
    dist = np.asarray(batch.pred_dist, dtype=np.float64)
    tgt = np.asarray(batch.target_ltrb, dtype=np.float64)
    if dist.shape[1:] != (4, reg_max):
        raise ValueError(f"pred_dist must be (n, 4, {reg_max}), got {dist.shape}")
    total = 0.0
    for i in range(len(w)):
        total += w[i] * sum(ldfl(dist[i, k], tgt[i, k], from_logits) for k in range(4))
    return total / s


def feat_distill(f_ann: np.ndarray, f_snn: np.ndarray, projection: np.ndarray) -> float:
    """Mean squared gap between teacher features and time-averaged projected student features.

    ``f_ann`` is ``B×C×H×W``, ``f_snn`` is ``T×B×C'×H×W`` and ``projection``
    the ``C×C'`` weights of a 1×1 convolution.
    """
    f_ann = np.asarray(f_ann, dtype=np.float64)
    proj = np.asarray(projection, dtype=np.float64).reshape(f_ann.shape[1], -1)
    f_snn = np.asarray(f_snn, dtype=np.float64)
    if f_snn.shape[2] != proj.shape[1]:
        raise ValueError("projection input channels do not match student features")
    mean_proj = np.einsum("oc,tbchw->bohw", proj, f_snn) / f_snn.shape[0]
    if mean_proj.shape != f_ann.shape:
        raise ValueError(f"projected student {mean_proj.shape} vs teacher {f_ann.shape}")
    return float(np.sum((f_ann - mean_proj) ** 2) / f_ann.size)


def cls_distill(student: np.ndarray, teacher: np.ndarray, cfg: DistillConfig = DistillConfig(),
                mask: np.ndarray | None = None) -> float:
    """Class-map distillation over ``B×N_cls×H×W`` logits.

    Each sample contributes one KL term whose rows are the spatial cells (all
    cells, or those selected by a ``B×H×W`` boolean ``mask``).
    """
    s = np.asarray(student, dtype=np.float64)
    t = np.asarray(teacher, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError("student and teacher logits differ in shape")
    b, k = s.shape[:2]
    total = 0.0
    for i in range(b):
        rows_s = s[i].reshape(k, -1).T
        rows_t = t[i].reshape(k, -1).T
        if mask is not None:
            m = np.asarray(mask[i]).reshape(-1).astype(bool)
            if not m.any():
                continue
            rows_s, rows_t = rows_s[m], rows_t[m]
        total += kl_div(softmax_T(rows_s, cfg.Tp), softmax_T(rows_t, cfg.Tp))
    return cfg.Tp ** 2 * total / b


def dfl_distill(student: np.ndarray, teacher: np.ndarray, cfg: DistillConfig = DistillConfig()) -> float:
    """Box-regression distillation over ``B×N×(4·RegMax)`` logits, one softmax per box."""
    s = np.asarray(student, dtype=np.float64)
    t = np.asarray(teacher, dtype=np.float64)
    if s.shape != t.shape or s.ndim != 3:
        raise ValueError("expected matching B×N×K logits")
    b, n, _ = s.shape
    total = 0.0
    for i in range(b):
        for j in range(n):
            total += kl_div(softmax_T(s[i, j], cfg.Tp), softmax_T(t[i, j], cfg.Tp))
    return cfg.Tp ** 2 * total / (b * n)


def total_loss(components: dict, cfg: DistillConfig = DistillConfig()) -> float:
    c = {k: 0.0 for k in ("box", "cls", "dfl", "cls_distill", "dfl_distill", "feat_distill")}
    unknown = set(components) - set(c)
    if unknown:
        raise KeyError(f"unknown loss components: {sorted(unknown)}")
    c.update(components)
    return (cfg.alpha * c["box"] + cfg.beta * c["cls"] + cfg.gamma * c["dfl"]
            + cfg.theta * c["cls_distill"] + cfg.theta * c["dfl_distill"] + cfg.eta * c["feat_distill"])


def theta_schedule(iteration: int, total: int) -> float:
    """Cosine decay from 1 to 0."""
    if not 0 <= iteration <= total:
        raise ValueError("iteration outside [0, total]")
    return 0.5 * (1.0 + math.cos(math.pi * iteration / total))


def eta_schedule(iteration: int, total: int) -> float:
    """1 for the first 20 % of iterations, 0.01 afterwards."""
    if not 0 <= iteration <= total:
        raise ValueError("iteration outside [0, total]")
    return 1.0 if iteration < 0.2 * total else 0.01
