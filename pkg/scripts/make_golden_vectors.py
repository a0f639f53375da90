"""Regenerate tests/data/golden_losses.json from an arbitrary-precision oracle.

The oracle writes each loss straight from its defining sums in mpmath at 200
digits and differentiates numerically in the same precision. It shares no
code with rince_lab.losses.

    python scripts/make_golden_vectors.py
"""
import json
from pathlib import Path

import mpmath as mp

mp.mp.dps = 200

OUT = Path(__file__).resolve().parents[1] / "tests" / "data" / "golden_losses.json"


def _e(x, tau):
    return mp.exp(x / tau)


def nce_out(pos, neg, tau):
    """Sum over positives of -log(e^p / (e^p + sum e^n))."""
    total = mp.mpf(0)
    for p in pos:
        total -= mp.log(_e(p, tau) / (_e(p, tau) + mp.fsum(_e(n, tau) for n in neg)))
    return total


def nce_in(pos, neg, tau):
    num = mp.fsum(_e(p, tau) for p in pos)
    return -mp.log(num / (num + mp.fsum(_e(n, tau) for n in neg)))


def ranked(variant, ranks, neg, taus):
    total = mp.mpf(0)
    for i, tau in enumerate(taus):
        later = [x for r in ranks[i + 1:] for x in r] + list(neg)
        use_in = variant == "rince_in" or (variant == "rince_out_in" and i > 0)
        total += nce_in(ranks[i], later, tau) if use_in else nce_out(ranks[i], later, tau)
    return total


def evaluate(variant, flat, shape, taus):
    sizes, n_neg = shape
    ranks, k = [], 0
    for s in sizes:
        ranks.append(flat[k:k + s])
        k += s
    neg = flat[k:k + n_neg]
    if variant in ("infonce", "log_out"):
        return nce_out(ranks[0], neg, taus[0])
    if variant == "log_in":
        return nce_in(ranks[0], neg, taus[0])
    return ranked(variant, ranks, neg, taus)


def case(variant, positives_by_rank, negatives, taus):
    flat = [mp.mpf(str(v)) for r in positives_by_rank for v in r] + [mp.mpf(str(v)) for v in negatives]
    shape = ([len(r) for r in positives_by_rank], len(negatives))
    mtaus = [mp.mpf(str(t)) for t in taus]
    value = evaluate(variant, flat, shape, mtaus)
    grads = []
    for k in range(len(flat)):
        def f(x, k=k):
            g = list(flat)
            g[k] = x
            return evaluate(variant, g, shape, mtaus)
        grads.append(mp.diff(f, flat[k]))
    return {
        "variant": variant,
        "positives_by_rank": [list(r) for r in positives_by_rank],
        "negatives": list(negatives),
        "taus": list(taus),
        "value": mp.nstr(value, 25),
        "grads": [mp.nstr(g, 25) for g in grads],
    }


def main():
    cases = [
        case("infonce", [[0.9]], [0.1, -0.2], [0.1]),
        case("log_out", [[0.8, 0.3]], [0.0, -0.5], [0.1]),
        case("log_in", [[0.8, 0.3]], [0.0, -0.5], [0.1]),
    ]
    for v in ("rince_uni", "rince_in", "rince_out", "rince_out_in"):
        cases.append(case(v, [[0.9], [0.5]], [0.1, -0.1], [0.1, 0.2]))
    for v in ("rince_in", "rince_out", "rince_out_in"):
        cases.append(case(v, [[0.9, 0.7], [0.5, 0.4]], [0.1, -0.1, 0.2], [0.1, 0.225]))
        cases.append(case(v, [[0.95, 0.6], [0.55], [0.3, 0.2, -0.05]], [0.0, -0.4, 0.15], [0.1, 0.15, 0.2]))
    lse = mp.log(mp.fsum(mp.exp(mp.mpf(x) / mp.mpf("0.1")) for x in ("0.9", "0.1", "-0.2")))
    payload = {"log_sum_exp_0.9_0.1_-0.2_over_0.1": mp.nstr(lse, 25), "cases": cases}
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
    print(f"wrote {len(cases)} cases to {OUT}")


if __name__ == "__main__":
    main()
