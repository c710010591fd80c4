from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any

import numpy as np
import pytest

from obpuf import tuning
from obpuf.apuf import calibrate_noise
from obpuf.metrics import (
    DegenerateEstimatorError,
    EstimatorInputs,
    UnreachableTargetError,
    capability_discrepancy,
    capability_table,
    eer_search,
    empirical_distances,
    estimator_sweep,
    far,
    fhd,
    frr,
    hd,
    log10_far,
    log10_frr,
    mean_pairwise_fhd,
    min_crps_for_eer,
    p_inter,
    p_inter_analytic,
    p_inter_corrected,
    p_inter_single_draw,
    p_intra_analytic,
    p_min,
    proportion_interval,
)
from obpuf.obfuscation import ObPufDevice


def _load_cases() -> list[dict[str, Any]]:
    fixture = Path(__file__).resolve().parent / "fixtures" / "capability_reference_cases.json"
    return json.loads(fixture.read_text(encoding="utf-8"))


def test_distances():
    assert hd("0110", "0011") == 2
    assert fhd("0110", "0011") == 0.5
    assert hd(np.array([1, 0, 1]), [1, 0, 1]) == 0
    assert mean_pairwise_fhd(["00", "01", "11"]) == pytest.approx((0.5 + 1.0 + 0.5) / 3)
    with pytest.raises(ValueError):
        hd("01", "011")
    with pytest.raises(ValueError):
        fhd("", "")
    with pytest.raises(ValueError):
        hd("0a", "01")
    with pytest.raises(ValueError):
        mean_pairwise_fhd(["01"])


def test_estimator_forms():
    inp = EstimatorInputs(2, 2, 0)
    assert p_inter_analytic(inp) == pytest.approx(0.75**4)
    assert p_inter_corrected(inp) == pytest.approx(p_inter_analytic(inp))
    assert p_inter_single_draw(inp) == pytest.approx(0.75**2)
    assert p_intra_analytic(inp) == pytest.approx(1 - 0.95**2)
    assert p_min(inp) == pytest.approx(0.95**2)

    tolerant = EstimatorInputs(8, 4, 1)
    assert p_inter(tolerant, "printed") == pytest.approx((1 - 2 / 256) ** 16)
    assert p_inter(tolerant, "corrected") == pytest.approx((1 - 9 / 256) ** 16)
    assert p_inter(tolerant, "single_draw") == pytest.approx((1 - 9 / 256) ** 4)
    with pytest.raises(ValueError):
        p_inter(tolerant, "median")


def test_printed_estimator_monotonicity():
    for n_ins in range(1, 12):
        for nm in range(0, min(n_ins, 2) + 1):
            values = [p_inter_analytic(EstimatorInputs(n_ins, p, nm)) for p in range(1, 7)]
            assert all(a > b for a, b in zip(values, values[1:])), f"not decreasing in p at n_ins={n_ins}"
    for p in range(1, 6):
        values = [p_inter_analytic(EstimatorInputs(n_ins, p, 0)) for n_ins in range(1, 16)]
        assert all(a < b for a, b in zip(values, values[1:])), f"not increasing in n_ins at p={p}"


def test_estimator_inputs_validation():
    with pytest.raises(ValueError):
        EstimatorInputs(0, 2)
    with pytest.raises(ValueError):
        EstimatorInputs(2, 2, 3)
    with pytest.raises(ValueError):
        EstimatorInputs(2, 2, 0, 1.5)
    assert EstimatorInputs(4, 4, 0).label == "OB-PUF(4,4,0)"


def test_tails_stay_finite_far_below_double_range():
    assert log10_far(1000, 0, 0.5) == pytest.approx(1000 * math.log10(0.5))
    assert log10_frr(2000, 1999, 0.5) == pytest.approx(2000 * math.log10(0.5))
    assert far(10, 10, 0.3) == pytest.approx(1.0)
    assert frr(10, 10, 0.3) == 0.0
    with pytest.raises(ValueError):
        far(10, 11, 0.3)


def test_eer_at_the_reference_operating_point():
    inp = EstimatorInputs(2, 2, 0)
    res = eer_search(294, p_inter(inp), p_intra_analytic(inp))
    assert res.n_eer == 57
    assert res.log10_far == pytest.approx(-6.06, abs=tuning.REFERENCE_LOG10_ABS_TOL)
    assert res.log10_frr == pytest.approx(-6.06, abs=tuning.REFERENCE_LOG10_ABS_TOL)


def test_eer_search_edges():
    res = eer_search(20, 1.0, 0.0)
    assert res.n_eer == 0
    assert res.eer == 0.0
    with pytest.raises(DegenerateEstimatorError):
        eer_search(20, 0.1, 0.1)
    with pytest.raises(DegenerateEstimatorError):
        min_crps_for_eer(EstimatorInputs(1, 1, 1), 1e-6)


@pytest.mark.parametrize("case", _load_cases(), ids=lambda c: c["id"])
def test_capability_reference_rows(case):
    n_ins, p, nm = case["config"]
    row = min_crps_for_eer(EstimatorInputs(n_ins, p, nm, 0.05), case["target"])
    assert abs(row.n - case["n"]) <= tuning.REFERENCE_N_REL_TOL * case["n"], f"{case['id']}: n={row.n}"
    assert abs(row.n_eer - case["n_eer"]) <= tuning.REFERENCE_N_EER_ABS_TOL, f"{case['id']}: n_eer={row.n_eer}"


@pytest.mark.parametrize("config", tuning.CAPABILITY_CONFIGS)
def test_min_crps_is_minimal(config):
    inp = EstimatorInputs(*config)
    row = min_crps_for_eer(inp, 1e-6)
    assert max(row.log10_far, row.log10_frr) <= -6
    below = eer_search(row.n - 1, p_inter(inp), p_intra_analytic(inp))
    assert below.log10_eer > -6


@pytest.mark.parametrize("config", [(2, 2, 0), (4, 4, 0), (8, 4, 1), (16, 4, 1)])
@pytest.mark.parametrize("target", [0.2, 0.05, 1e-2, 1e-3])
def test_min_crps_matches_exhaustive_scan(config, target):
    inp = EstimatorInputs(*config)
    pi, pa = p_inter(inp), p_intra_analytic(inp)
    exhaustive = next(
        (n for n in range(1, 31) if eer_search(n, pi, pa).log10_eer <= math.log10(target)),
        None,
    )
    row = min_crps_for_eer(inp, target)
    if exhaustive is None:
        assert row.n > 30
    else:
        assert row.n == exhaustive


def test_min_crps_errors():
    inp = EstimatorInputs(2, 2, 0)
    with pytest.raises(ValueError):
        min_crps_for_eer(inp, 0.0)
    with pytest.raises(UnreachableTargetError):
        min_crps_for_eer(inp, 1e-12, max_n=8)


def test_capability_table_and_discrepancy_report():
    rows = capability_table(configs=[(2, 2, 0), (16, 4, 1)], targets=[1e-6])
    assert [r.config.key for r in rows] == ["2,2,0", "16,4,1"]
    report = capability_discrepancy(rows)
    assert len(report) == 2
    strict = {r["config"]: r for r in report}
    assert strict["OB-PUF(2,2,0)"]["strict"] is True
    assert strict["OB-PUF(2,2,0)"]["within_tolerance"] is True
    assert strict["OB-PUF(16,4,1)"]["strict"] is False
    assert strict["OB-PUF(16,4,1)"]["n_published"] == 15
    assert rows[0].as_dict()["config"] == "OB-PUF(2,2,0)"


def test_user_configs_are_not_in_the_discrepancy_report():
    rows = capability_table(configs=[(3, 2, 0)], targets=[1e-6])
    assert capability_discrepancy(rows) == []


def test_estimator_sweep_rows():
    rows = estimator_sweep([1, 2, 4, 8], p=4, n_mismatch_values=(0, 1))
    assert len(rows) == 4 + 4
    for row in rows:
        assert row["p_inter_printed"] >= row["p_inter_corrected"] - 1e-12
        assert 0.0 <= row["p_intra"] <= 1.0


def test_proportion_interval():
    low, high = proportion_interval(30, 100)
    assert low < 0.30 < high
    assert proportion_interval(0, 0) == (0.0, 1.0)
    low, high = proportion_interval(0, 1000)
    assert low == 0.0 and high < 0.01


def _fixed_devices(count: int, noise_sigma: float = 0.0) -> list[ObPufDevice]:
    ss = np.random.SeedSequence(17)
    return [
        ObPufDevice.generate(
            32, 2, 2, 2, xors=0, seed=child, noise_sigma=noise_sigma, reconfigurable=False, trial_budget=6
        )
        for child in ss.spawn(count)
    ]


def test_noiseless_devices_never_mismatch_with_themselves():
    est = empirical_distances(_fixed_devices(6), 4000, 0, np.random.default_rng(0), noisy=False)
    assert est.p_intra_hat == 0.0
    assert sum(est.intra_histogram) == 4000
    assert sum(est.inter_histogram) == 4000
    assert est.p_inter_hat is not None
    assert est.p_inter_ci[0] <= est.p_inter_hat <= est.p_inter_ci[1]


def test_single_draw_estimator_matches_impostor_rate():
    est = empirical_distances(_fixed_devices(10), 20_000, 0, np.random.default_rng(1), noisy=False)
    assert est.p_inter_hat == pytest.approx(p_inter_single_draw(EstimatorInputs(2, 2, 0)), abs=0.05)
    assert est.best_inter_estimator == "single_draw"


@pytest.mark.slow
@pytest.mark.parametrize("n_ins, p, n_mismatch", [(4, 4, 0), (8, 4, 1)])
def test_noisy_intra_rate_matches_binomial_estimator(n_ins, p, n_mismatch):
    sigma = calibrate_noise(64, tuning.P_INTRA_PUF, trials=200_000, seed=2)
    devices = [
        ObPufDevice.generate(
            64, 3, p, n_ins, xors=0, seed=child, noise_sigma=sigma, reconfigurable=False, trial_budget=6
        )
        for child in np.random.SeedSequence(23).spawn(32)
    ]
    est = empirical_distances(devices, 100_000, n_mismatch, np.random.default_rng(2))
    assert est.p_intra_hat == pytest.approx(est.analytic["p_intra"], abs=0.01), (
        f"OB-PUF({n_ins},{p},{n_mismatch}): p_intra_hat={est.p_intra_hat:.4f} "
        f"analytic={est.analytic['p_intra']:.4f}"
    )


def test_single_device_has_no_inter_estimate():
    est = empirical_distances(_fixed_devices(1), 100, 0, np.random.default_rng(3), noisy=False)
    assert est.p_inter_hat is None and est.best_inter_estimator is None
    with pytest.raises(ValueError):
        empirical_distances([], 10, 0, np.random.default_rng(0))
