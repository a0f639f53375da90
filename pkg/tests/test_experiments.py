import numpy as np
import pytest

from rince_lab.analysis import NegativeModel
from rince_lab.experiments import (
    equilibrium_checks,
    holdout_comparison,
    mean_of,
    noisy_threshold_sweep,
    summarize_runs,
    temporal_comparison,
)

TINY = {"samples_per_class": 10}


def test_holdout_comparison_pairs_seeds():
    res = holdout_comparison(seeds=(1, 2), epochs=1, data_spec=TINY)
    assert set(res) == {"rince_in", "scl_in"}
    for runs in res.values():
        assert [r.seed for r in runs] == [1, 2]
        assert all(0.0 <= r.report["auroc"] <= 1.0 for r in runs)
    s = summarize_runs(res)
    assert s["rince_in"]["metrics"]["r1_super"]["mean"] == pytest.approx(mean_of(res["rince_in"], "r1_super"))
    assert "pr_fine" not in s["rince_in"]["metrics"]


def test_noisy_sweep_thresholds_are_offsets():
    res = noisy_threshold_sweep(seeds=(3,), epochs=1, offsets=(-0.1, 0.1), data_spec=TINY)
    assert sorted(res) == [-0.1, 0.1]
    assert res[-0.1][0].label == "rince_in_noisy-0.10"


def test_temporal_comparison_methods():
    res = temporal_comparison(seeds=(1,), epochs=1, methods=("rince_uni", "infonce"))
    assert list(res) == ["rince_uni", "infonce"]
    assert {"mean_sim_rank1", "mean_sim_rank3"} <= set(res["rince_uni"][0].final)


def test_equilibrium_checks_few_negatives():
    # with 16 negatives the diagonal condition holds while the slope ratio misses 1/4
    chk = equilibrium_checks(NegativeModel(count=16), step=0.02)
    assert chk["below_diagonal"] and chk["last_violation_h1"] is None
    assert chk["non_decreasing"] and chk["wide_below_base"]
    assert chk["slope_ratio"] > 0.25
    assert np.isclose(chk["slope_ratio"], chk["slope_flipped"] / chk["slope_base"])
