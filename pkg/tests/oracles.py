"""Slow, obviously-correct reference implementations.

Everything here is plain Python loops over lists (mpmath where float64 would
lose digits); nothing imports the package under test.
"""
from __future__ import annotations

import math

import mpmath

mpmath.mp.dps = 50


# -- tensors ------------------------------------------------------------------

def conv2d_naive(x, w, stride=1, padding=0):
    """x: C×H×W nested lists / array, w: O×C×k×k. Six nested loops."""
    C, H, W = len(x), len(x[0]), len(x[0][0])
    O, k = len(w), len(w[0][0])
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    out = [[[0.0] * Wo for _ in range(Ho)] for _ in range(O)]
    for o in range(O):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0
                for c in range(C):
                    for di in range(k):
                        for dj in range(k):
                            r, s = i * stride - padding + di, j * stride - padding + dj
                            if 0 <= r < H and 0 <= s < W:
                                acc += float(x[c][r][s]) * float(w[o][c][di][dj])
                out[o][i][j] = acc
    return out


def bn_scalar(v, mean, var, gamma, beta, eps):
    return gamma * (v - mean) / math.sqrt(var + eps) + beta


# -- events -------------------------------------------------------------------

def histogram_loop(events, width, height):
    out = [[[0.0] * width for _ in range(height)] for _ in range(2)]
    for t, x, y, p in events:
        out[0 if p == 1 else 1][y][x] += 1.0
    return out


def voxel_loop(events, t_start, t_end, width, height, bins, signed=False):
    out = [[[0.0] * width for _ in range(height)] for _ in range(bins)]
    for t, x, y, p in events:
        ts = 0.0 if t_end == t_start else (bins - 1) * (t - t_start) / (t_end - t_start)
        sign = (1.0 if p == 1 else -1.0) if signed else 1.0
        for b in range(bins):
            wgt = max(0.0, 1.0 - abs(ts - b))
            if wgt > 0:
                out[b][y][x] += sign * wgt
    return out


# -- losses -------------------------------------------------------------------

def softmax(z, Tp=1.0):
    m = max(z)
    e = [math.exp((v - m) / Tp) for v in z]
    s = math.fsum(e)
    return [v / s for v in e]


def kl(p_s_rows, p_t_rows, floor=1e-12):
    total = 0.0
    for ps, pt in zip(p_s_rows, p_t_rows):
        for a, b in zip(ps, pt):
            if b > 0:
                total += b * (math.log(max(b, floor)) - math.log(max(a, floor)))
    return total / len(p_s_rows)


def bce_mp(x, y):
    """Sum of per-element BCE with logits, evaluated in 50-digit arithmetic."""
    total = mpmath.mpf(0)
    for xi, yi in zip(x, y):
        xi = mpmath.mpf(xi)
        s = 1 / (1 + mpmath.exp(-xi))
        total += -(yi * mpmath.log(s) + (1 - yi) * mpmath.log(1 - s))
    return float(total)


def ciou_terms(bp, bt, eps=1e-7):
    px1, py1, px2, py2 = bp
    tx1, ty1, tx2, ty2 = bt
    w1, h1 = px2 - px1, py2 - py1
    w2, h2 = tx2 - tx1, ty2 - ty1
    iw = max(0.0, min(px2, tx2) - max(px1, tx1))
    ih = max(0.0, min(py2, ty2) - max(py1, ty1))
    inter = iw * ih
    union = w1 * h1 + w2 * h2 - inter + eps
    iou = inter / union
    cw = max(px2, tx2) - min(px1, tx1)
    ch = max(py2, ty2) - min(py1, ty1)
    c2 = cw * cw + ch * ch + eps
    pcx, pcy = (px1 + px2) / 2, (py1 + py2) / 2
    tcx, tcy = (tx1 + tx2) / 2, (ty1 + ty2) / 2
    rho2 = (pcx - tcx) ** 2 + (pcy - tcy) ** 2
    v = 4 / math.pi ** 2 * (math.atan(w2 / (h2 + eps)) - math.atan(w1 / (h1 + eps))) ** 2
    alpha = v / (v - iou + (1 + eps))
    return iou - rho2 / c2 - alpha * v


def box_loss(weights, preds, targets):
    s = math.fsum(weights)
    return math.fsum(w * (1 - ciou_terms(p, t)) for w, p, t in zip(weights, preds, targets)) / s


def ldfl(logits, y):
    p = softmax(logits)
    lo = math.floor(y)
    hi = math.ceil(y)
    if lo == hi:
        return -math.log(p[lo])
    return -((hi - y) * math.log(p[lo]) + (y - lo) * math.log(p[hi]))


def dfl_loss(weights, dists, targets):
    s = math.fsum(weights)
    tot = 0.0
    for w, d, t in zip(weights, dists, targets):
        tot += w * math.fsum(ldfl(d[k], t[k]) for k in range(4))
    return tot / s


def feat_distill(f_ann, f_snn, proj):
    """f_ann B×C×H×W, f_snn T×B×C'×H×W, proj C×C' (lists)."""
    T, B = len(f_snn), len(f_ann)
    C, H, W = len(f_ann[0]), len(f_ann[0][0]), len(f_ann[0][0][0])
    Cp = len(proj[0])
    acc = 0.0
    for b in range(B):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    m = 0.0
                    for t in range(T):
                        m += sum(proj[c][q] * f_snn[t][b][q][i][j] for q in range(Cp))
                    m /= T
                    acc += (f_ann[b][c][i][j] - m) ** 2
    return acc / (B * C * H * W)


def cls_distill(student, teacher, Tp):
    """B×K×H×W; one KL over the H·W cells of each sample, summed, times Tp²/B."""
    B, K, H, W = len(student), len(student[0]), len(student[0][0]), len(student[0][0][0])
    total = 0.0
    for b in range(B):
        ps, pt = [], []
        for i in range(H):
            for j in range(W):
                ps.append(softmax([student[b][k][i][j] for k in range(K)], Tp))
                pt.append(softmax([teacher[b][k][i][j] for k in range(K)], Tp))
        total += kl(ps, pt)
    return Tp * Tp * total / B


def dfl_distill(student, teacher, Tp):
    """B×N×K logits, one K-way distribution per box."""
    B, N = len(student), len(student[0])
    total = 0.0
    for b in range(B):
        for n in range(N):
            total += kl([softmax(student[b][n], Tp)], [softmax(teacher[b][n], Tp)])
    return Tp * Tp * total / (B * N)


def total_loss(c, alpha=6.0, beta=0.5, gamma=1.5, theta=1.0, eta=1.0):
    return (alpha * c.get("box", 0) + beta * c.get("cls", 0) + gamma * c.get("dfl", 0)
            + theta * c.get("cls_distill", 0) + theta * c.get("dfl_distill", 0) + eta * c.get("feat_distill", 0))


# -- detection metrics --------------------------------------------------------

def box_iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def ap_oracle(dets, gts, cls, thr):
    """dets: [(img, cls, score, box)], gts: [(img, cls, box)].

    Builds the PR curve point by point after greedy matching, then takes the
    max precision at recall >= r for each of the 101 recall points.
    """
    g = [x for x in gts if x[1] == cls]
    if not g:
        return None
    d = sorted([x for x in dets if x[1] == cls], key=lambda x: -x[2])
    flags = []
    by_img = {}
    for x in d:
        by_img.setdefault(x[0], []).append(x)
    tp_by_det = {}
    for img, ds in by_img.items():
        gi = [x for x in g if x[0] == img]
        used = [False] * len(gi)
        for x in ds:  # already score-sorted (stable)
            best, bj = -1.0, -1
            for j, gt in enumerate(gi):
                if used[j]:
                    continue
                v = box_iou(x[3], gt[2])
                if v > best:
                    best, bj = v, j
            if bj >= 0 and best >= thr:
                used[bj] = True
                tp_by_det[id(x)] = True
            else:
                tp_by_det[id(x)] = False
    flags = [tp_by_det[id(x)] for x in d]
    points = []
    tp = fp = 0
    for f in flags:
        tp += f
        fp += not f
        points.append((tp / len(g), tp / (tp + fp)))
    total = 0.0
    for k in range(101):
        r = k / 100
        ps = [p for rec, p in points if rec >= r]
        total += max(ps) if ps else 0.0
    return total / 101


def map_oracle(dets, gts, thresholds):
    classes = sorted({x[1] for x in gts})
    per_t = []
    for t in thresholds:
        aps = [ap_oracle(dets, gts, c, t) for c in classes]
        per_t.append(sum(aps) / len(aps) if aps else 0.0)
    return per_t
