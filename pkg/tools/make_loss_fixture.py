"""Regenerate src/neurodet/data/loss_fixture.json from the pure-Python oracles in tests/oracles.py."""
import json
import math
import random
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))
import oracles as O  # noqa: E402

rng = random.Random(20240611)


def r(lo=-3.0, hi=3.0):
    return round(rng.uniform(lo, hi), 6)


def box():
    x1, y1 = r(0, 50), r(0, 50)
    return [x1, y1, round(x1 + rng.uniform(1, 40), 6), round(y1 + rng.uniform(1, 40), 6)]


def nested(*shape, lo=-3.0, hi=3.0):
    if len(shape) == 1:
        return [r(lo, hi) for _ in range(shape[0])]
    return [nested(*shape[1:], lo=lo, hi=hi) for _ in range(shape[0])]


def dist_row(k):
    v = [rng.random() + 0.05 for _ in range(k)]
    s = sum(v)
    return [x / s for x in v]


cases = []


def add(name, op, inputs, expected, tol=1e-6):
    cases.append({"name": name, "op": op, "inputs": inputs, "expected": expected, "tol": tol})


# softmax with temperature
add("softmax_closed_form", "softmax_T", {"logits": [20 * math.log(2), 0.0], "Tp": 20, "index": 0}, 2 / 3)
for n in range(3):
    z = nested(6)
    add(f"softmax_random_{n}", "softmax_T", {"logits": z, "Tp": 20, "index": n}, O.softmax(z, 20)[n])

# KL
add("kl_closed_form", "kl_div", {"p_s": [[0.5, 0.5]], "p_t": [[1.0, 0.0]]}, math.log(2))
for n in range(3):
    ps = [dist_row(5) for _ in range(4)]
    pt = [dist_row(5) for _ in range(4)]
    add(f"kl_random_{n}", "kl_div", {"p_s": ps, "p_t": pt}, O.kl(ps, pt))

# BCE
add("bce_origin", "bce_logits", {"x": [0.0], "y": [1.0]}, math.log(2))
for n in range(3):
    x = nested(8, lo=-30, hi=30)
    y = [float(rng.random() < 0.5) for _ in x]
    add(f"bce_random_{n}", "bce_logits", {"x": x, "y": y}, O.bce_mp(x, y))

# CIoU and box loss
add("ciou_offset_squares", "ciou", {"box_p": [0, 0, 2, 2], "box_t": [3, 0, 5, 2]},
    O.ciou_terms([0, 0, 2, 2], [3, 0, 5, 2]))
for n in range(3):
    bp, bt = box(), box()
    add(f"ciou_random_{n}", "ciou", {"box_p": bp, "box_t": bt}, O.ciou_terms(bp, bt))
for n in range(3):
    k = 5
    w = [round(rng.uniform(0.1, 1), 6) for _ in range(k)]
    P = [box() for _ in range(k)]
    Tb = [box() for _ in range(k)]
    add(f"box_loss_random_{n}", "box_loss", {"weights": w, "pred_boxes": P, "target_boxes": Tb}, O.box_loss(w, P, Tb))

# DFL
add("dfl_uniform_half", "dfl_loss", {"weights": [1.0], "pred_dist": [[[0.0] * 5] * 4],
                                     "target_ltrb": [[1.5] * 4], "reg_max": 5}, 4 * math.log(5))
for n in range(3):
    k = 4
    w = [round(rng.uniform(0.1, 1), 6) for _ in range(k)]
    D = [nested(4, 5) for _ in range(k)]
    Y = [[round(rng.uniform(0, 4), 6) for _ in range(4)] for _ in range(k)]
    add(f"dfl_random_{n}", "dfl_loss", {"weights": w, "pred_dist": D, "target_ltrb": Y, "reg_max": 5},
        O.dfl_loss(w, D, Y))

# distillation
for n in range(2):
    fa = nested(2, 3, 2, 2)
    fs = nested(7, 2, 4, 2, 2)
    pj = nested(3, 4, lo=-1, hi=1)
    add(f"feat_distill_random_{n}", "feat_distill", {"f_ann": fa, "f_snn": fs, "projection": pj},
        O.feat_distill(fa, fs, pj))
for n in range(2):
    s, t = nested(2, 3, 2, 3, lo=-40, hi=40), nested(2, 3, 2, 3, lo=-40, hi=40)
    add(f"cls_distill_random_{n}", "cls_distill", {"student": s, "teacher": t}, O.cls_distill(s, t, 20))
for n in range(2):
    s, t = nested(2, 3, 20, lo=-40, hi=40), nested(2, 3, 20, lo=-40, hi=40)
    add(f"dfl_distill_random_{n}", "dfl_distill", {"student": s, "teacher": t}, O.dfl_distill(s, t, 20))

# total loss and schedules
add("total_all_ones", "total_loss", {"components": {k: 1.0 for k in
    ("box", "cls", "dfl", "cls_distill", "dfl_distill", "feat_distill")}}, 11.0)
comp = {k: round(rng.uniform(0, 3), 6) for k in ("box", "cls", "dfl", "cls_distill", "dfl_distill", "feat_distill")}
add("total_random", "total_loss", {"components": comp, "config": {"theta": 0.3, "eta": 0.01}},
    O.total_loss(comp, theta=0.3, eta=0.01))
add("theta_start", "theta_schedule", {"iter": 0, "total": 1000}, 1.0)
add("theta_mid", "theta_schedule", {"iter": 500, "total": 1000}, 0.5)
add("theta_end", "theta_schedule", {"iter": 1000, "total": 1000}, 0.0)
add("eta_start", "eta_schedule", {"iter": 0, "total": 1000}, 1.0)
add("eta_end", "eta_schedule", {"iter": 1000, "total": 1000}, 0.01)

out = ROOT / "src" / "neurodet" / "data" / "loss_fixture.json"
out.write_text(json.dumps({"generator": "tools/make_loss_fixture.py", "cases": cases}, indent=1) + "\n")
print(f"{len(cases)} cases -> {out}")
