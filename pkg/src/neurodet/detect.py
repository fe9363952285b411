"""Anchor-free coupled-head decoding, NMS and COCO-style evaluation."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SIDES = ("l", "t", "r", "b")
COCO_IOUS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
RECALL_POINTS = np.arange(101) / 100.0  # k/100 correctly rounded; linspace overshoots some points


@dataclass(frozen=True)
class HeadConfig:
    n_cls: int
    reg_max: int = 5
    stride: int = 32
    score_threshold: float = 0.6
    nms_iou_threshold: float = 0.5

    @property
    def channels(self) -> int:
        return head_channels(self.n_cls, self.reg_max)


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    cls: int
    score: float
    image_id: str = ""


@dataclass(frozen=True)
class GroundTruth:
    box: tuple[float, float, float, float]
    cls: int


def head_channels(n_cls: int, reg_max: int) -> int:
    if n_cls < 1 or reg_max < 1:
        raise ValueError("class count and RegMax must be >= 1")
    return n_cls + 4 * reg_max


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def dfl_expectation(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    """Expected bin index under a softmax over ``axis``."""
    z = logits - logits.max(axis=axis, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=axis, keepdims=True)
    bins = np.arange(logits.shape[axis], dtype=np.float64)
    shape = [1] * logits.ndim
    shape[axis] = -1
    return (p * bins.reshape(shape)).sum(axis=axis)


def decode(head: np.ndarray, cfg: HeadConfig, image_id: str = "") -> list[Detection]:
    """Turn a ``C_out×Hf×Wf`` membrane map into scored boxes (pre-NMS).

    Channels are ``N_cls`` class logits followed by ``RegMax`` bin logits for
    each side in l, t, r, b order. One detection is emitted per (cell, class)
    whose sigmoid score reaches the threshold.
    """
    head = np.asarray(head, dtype=np.float64)
    if head.ndim != 3 or head.shape[0] != cfg.channels:
        raise ValueError(f"head has shape {head.shape}, expected {cfg.channels}×H×W")
    _, hf, wf = head.shape
    scores = sigmoid(head[: cfg.n_cls])
    reg = head[cfg.n_cls:].reshape(4, cfg.reg_max, hf, wf)
    dist = dfl_expectation(reg, axis=1) * cfg.stride  # 4, Hf, Wf
    cy = (np.arange(hf)[:, None] + 0.5) * cfg.stride
    cx = (np.arange(wf)[None, :] + 0.5) * cfg.stride
    x1, y1 = cx - dist[0], cy - dist[1]
    x2, y2 = cx + dist[2], cy + dist[3]
    out = []
    for c, i, j in zip(*np.nonzero(scores >= cfg.score_threshold)):
        out.append(Detection((float(x1[i, j]), float(y1[i, j]), float(x2[i, j]), float(y2[i, j])),
                             int(c), float(scores[c, i, j]), image_id))
    return out


def iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def nms(dets: list[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy per-class suppression in descending score order."""
    order = sorted(range(len(dets)), key=lambda k: -dets[k].score)
    kept: list[Detection] = []
    for k in order:
        d = dets[k]
        if all(iou(d.box, q.box) < iou_threshold for q in kept if q.cls == d.cls):
            kept.append(d)
    return kept


# -- evaluation ---------------------------------------------------------------

def _match(dets: list[Detection], gts: list[GroundTruth], thr: float) -> list[bool]:
    """Greedy matching of score-sorted detections; returns TP flags in det order."""
    if not dets:
        return []
    if not gts:
        return [False] * len(dets)
    ious = iou_matrix([d.box for d in dets], [g.box for g in gts])
    taken = np.zeros(len(gts), dtype=bool)
    flags = []
    for k in range(len(dets)):
        cand = np.where(taken, -1.0, ious[k])
        g = int(np.argmax(cand))
        if cand[g] >= thr:
            taken[g] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _class_records(dets_by_img, gts_by_img, cls: int, thr: float):
    scores, tps, n_gt = [], [], 0
    for img in sorted(set(dets_by_img) | set(gts_by_img)):
        g = [x for x in gts_by_img.get(img, []) if x.cls == cls]
        d = sorted((x for x in dets_by_img.get(img, []) if x.cls == cls), key=lambda x: -x.score)
        n_gt += len(g)
        scores += [x.score for x in d]
        tps += _match(d, g, thr)
    return np.asarray(scores, dtype=np.float64), np.asarray(tps, dtype=bool), n_gt


def average_precision(scores: np.ndarray, tps: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP."""
    if n_gt == 0:
        return float("nan")
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="mergesort")
    tp = np.cumsum(tps[order])
    fp = np.cumsum(~tps[order])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def _group(items) -> dict:
    out: dict = {}
    for it in items:
        out.setdefault(getattr(it, "image_id", ""), []).append(it)
    return out


def eval_detections(dets_by_img: dict, gts_by_img: dict, score_threshold: float = 0.0,
                    iou_thresholds=COCO_IOUS, iou: float = 0.5) -> dict:
    """mAP at ``iou``, mAP averaged over ``iou_thresholds`` and F1 at ``iou``.

    Classes without ground truth are left out of the AP mean. F1 uses the
    detections at or above ``score_threshold``; ``f1_best`` is the maximum over
    all score cut-offs, with the threshold that reaches it. Key names carry the
    IoU values, so the defaults give ``mAP_0.5``, ``mAP_0.5:0.95`` and
    ``F1_iou@0.5``.
    """
    classes = sorted({g.cls for gs in gts_by_img.values() for g in gs})

    def map_at(t):
        per = [average_precision(*_class_records(dets_by_img, gts_by_img, c, t)) for c in classes]
        return float(np.mean(per)) if per else 0.0

    ap = {round(float(t), 4): map_at(t) for t in iou_thresholds}
    primary = ap.get(round(float(iou), 4))
    if primary is None:
        primary = map_at(iou)

    # F1 counts detections of classes absent from the ground truth as false positives
    det_classes = {d.cls for ds in dets_by_img.values() for d in ds}
    scores, tps, n_gt = [], [], 0
    for c in sorted(set(classes) | det_classes):
        s, tp, n = _class_records(dets_by_img, gts_by_img, c, iou)
        scores.append(s)
        tps.append(tp)
        n_gt += n
    scores = np.concatenate(scores) if scores else np.zeros(0)
    tps = np.concatenate(tps) if tps else np.zeros(0, dtype=bool)
    keep = scores >= score_threshold
    f1 = _f1(int(tps[keep].sum()), int(keep.sum()), n_gt)
    best, best_thr = 0.0, None
    if len(scores):
        order = np.argsort(-scores, kind="mergesort")
        tp = np.cumsum(tps[order])
        for k in range(len(order)):
            # only cut where the next score differs, so ties stay together
            if k + 1 < len(order) and scores[order[k + 1]] == scores[order[k]]:
                continue
            f = _f1(int(tp[k]), k + 1, n_gt)
            if f > best:
                best, best_thr = f, float(scores[order[k]])
    lo, hi = (float(min(iou_thresholds)), float(max(iou_thresholds))) if len(iou_thresholds) else (iou, iou)
    return {
        f"mAP_{iou:g}": primary,
        f"mAP_{lo:g}:{hi:g}": float(np.mean(list(ap.values()))) if ap else 0.0,
        f"F1_iou@{iou:g}": f1,
        "f1_best": best,
        "f1_best_threshold": best_thr,
        "score_threshold": score_threshold,
        "ap_per_iou": {f"{k:g}": v for k, v in ap.items()},
        "classes": classes,
    }


def iou_range(text: str) -> tuple[float, ...]:
    """Parse ``lo:hi:step`` (inclusive of ``hi``) into IoU thresholds."""
    try:
        lo, hi, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise ValueError(f"IoU range must look like lo:hi:step, got {text!r}") from None
    if step <= 0 or hi < lo or not 0 < lo <= hi <= 1:
        raise ValueError(f"bad IoU range {text!r}")
    n = int(round((hi - lo) / step)) + 1
    return tuple(round(lo + k * step, 4) for k in range(n))


def _f1(tp: int, n_det: int, n_gt: int) -> float:
    if tp == 0:
        return 0.0
    p, r = tp / n_det, tp / n_gt
    return 2 * p * r / (p + r)


# -- file formats -------------------------------------------------------------

def read_yolo_labels(path, width: int, height: int) -> list[GroundTruth]:
    """YOLO text labels (``class cx cy w h``, normalised) to pixel boxes."""
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise ValueError(f"{path}:{n}: expected 5 fields, got {len(parts)}")
        c = int(parts[0])
        cx, cy, w, h = (float(v) for v in parts[1:])
        out.append(GroundTruth(((cx - w / 2) * width, (cy - h / 2) * height,
                                (cx + w / 2) * width, (cy + h / 2) * height), c))
    return out


def write_yolo_labels(path, gts: list[GroundTruth], width: int, height: int) -> None:
    lines = []
    for g in gts:
        x1, y1, x2, y2 = g.box
        lines.append(f"{g.cls} {(x1 + x2) / 2 / width:.6f} {(y1 + y2) / 2 / height:.6f} "
                     f"{(x2 - x1) / width:.6f} {(y2 - y1) / height:.6f}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def detection_to_json(d: Detection) -> str:
    x1, y1, x2, y2 = d.box
    return json.dumps({"image_id": d.image_id, "class": d.cls, "score": round(d.score, 6),
                       "x1": round(x1, 4), "y1": round(y1, 4), "x2": round(x2, 4), "y2": round(y2, 4)})


def write_detections(path, dets: list[Detection]) -> None:
    with open(path, "w") as fh:
        for d in dets:
            fh.write(detection_to_json(d) + "\n")


def read_detections(path) -> list[Detection]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            r = json.loads(line)
            out.append(Detection((r["x1"], r["y1"], r["x2"], r["y2"]), int(r["class"]),
                                 float(r["score"]), str(r.get("image_id", ""))))
    return out


def group_by_image(items) -> dict:
    return _group(items)

