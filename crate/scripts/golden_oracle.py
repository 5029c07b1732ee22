"""Recomputes the worked-example values in 50-digit arithmetic and writes
crates/core/tests/fixtures/golden.json. Uses mpmath only; shares no code
with the Rust crate."""

import json
import random
from pathlib import Path

from mpmath import mp, mpf, log, exp, fsum

mp.dps = 50

OUT = Path(__file__).resolve().parent.parent / "crates/core/tests/fixtures/golden.json"


def f(x):
    return float(x)


def ce(p, q):
    return -fsum(a * log(b) for a, b in zip(p, q) if a != 0)


def renorm(p, t):
    rest = [v for i, v in enumerate(p) if i != t]
    m = fsum(rest)
    return [v / m for v in rest]


def softmax(z):
    m = max(z)
    e = [exp(v - m) for v in z]
    s = fsum(e)
    return [v / s for v in e]


T = [mpf("0.7"), mpf("0.2"), mpf("0.1")]
S = [mpf("0.5"), mpf("0.3"), mpf("0.2")]

kd = ce(T, S)
kd_target = -T[0] * log(S[0])
kd_non = kd - kd_target
nkd_non = ce(renorm(T, 0), renorm(S, 0))
tckd = -(T[0] * log(S[0]) + (1 - T[0]) * log(1 - S[0]))
dkd = tckd + (1 - T[0]) * nkd_non

s_t = [mpf("0.1"), mpf("0.3"), mpf("0.5")]
sq_mean = fsum(v * v for v in s_t) / len(s_t)
soft_targets = [v * v + 1 - sq_mean for v in s_t]

W = [mpf("0.4"), mpf("0.35"), mpf("0.25")]
rank = [W[i] / (1 - W[0]) + S[i] / (1 - S[0]) for i in (1, 2)]

# Zipf [2/3, 1/3] dealt to (class2, class1) against N(S) = [0.6, 0.4]
l_non = -(mpf(1) / 3) * log(mpf("0.6")) - (mpf(2) / 3) * log(mpf("0.4"))
zipf_entropy = -(mpf(2) / 3) * log(mpf(2) / 3) - (mpf(1) / 3) * log(mpf(1) / 3)

components = {"l_ori": "0.693147", "l_target": "0.790188", "l_non": "0.781136", "l_weak": "0.032508"}
c = {k: mpf(v) for k, v in components.items()}
total = c["l_ori"] + 1 * c["l_target"] + mpf("0.1") * c["l_non"] + c["l_weak"]


def zipf(n):
    h = fsum(mpf(1) / k for k in range(1, n + 1))
    return [mpf(1) / k / h for k in range(1, n + 1)]


rng = random.Random(7)
D, C, H, Wd = 8, 5, 3, 3
feature = [round(rng.uniform(-1, 1), 6) for _ in range(D * H * Wd)]
weight = [round(rng.uniform(-1, 1), 6) for _ in range(C * D)]
bias = [round(rng.uniform(-0.5, 0.5), 6) for _ in range(C)]
pooled = [fsum(mpf(v) for v in feature[d * H * Wd:(d + 1) * H * Wd]) / (H * Wd) for d in range(D)]
weak_logits = [mpf(bias[k]) + fsum(mpf(weight[k * D + d]) * pooled[d] for d in range(D)) for k in range(C)]

golden = {
    "teacher": [f(v) for v in T],
    "student": [f(v) for v in S],
    "kd_loss": f(kd),
    "kd_target_term": f(kd_target),
    "kd_nontarget_term": f(kd_non),
    "nkd_nontarget_ce": f(nkd_non),
    "nkd_gamma_1": f(kd_target + nkd_non),
    "nkd_gamma_1_5": f(kd_target + mpf("1.5") * nkd_non),
    "dkd_alpha_1_beta_0_3": f(dkd),
    "soft_target_inputs": [f(v) for v in s_t],
    "soft_targets": [f(v) for v in soft_targets],
    "target_loss_p086_s06": f(-mpf("0.86") * log(mpf("0.6"))),
    "weak_entropy_09_01": f(-mpf("0.9") * log(mpf("0.9")) - mpf("0.1") * log(mpf("0.1"))),
    "weak": [f(v) for v in W],
    "rank_scores": [f(v) for v in rank],
    "l_non": f(l_non),
    "zipf_2_entropy": f(zipf_entropy),
    "components": {k: float(v) for k, v in components.items()},
    "total_alpha_1_beta_0_1": f(total),
    "zipf_9": [f(v) for v in zipf(9)],
    "weak_head_case": {
        "shape": [D, H, Wd],
        "feature": feature,
        "weight": weight,
        "bias": bias,
        "probs": [f(v) for v in softmax(weak_logits)],
    },
}

OUT.parent.mkdir(parents=True, exist_ok=True)
OUT.write_text(json.dumps(golden, indent=2) + "\n")
print(f"wrote {OUT}")
