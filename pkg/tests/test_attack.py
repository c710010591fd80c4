from __future__ import annotations

import math
from typing import Any, List

import numpy as np
import pytest

from obpuf import tuning
from obpuf.apuf import challenge_feature, eval_response, random_challenges, sample_apuf
from obpuf.attack import (
    AttackDataset,
    CampaignConfig,
    EsOptions,
    FixedPatternDataset,
    GenomeLayout,
    attack_apuf_baseline,
    cmaes_minimize,
    eval_p_pred,
    fitness_fixed,
    fitness_reconfigurable,
    genome_from_device,
    layout_for,
    make_test_set,
    prediction_accuracy,
    run_attack_campaign,
)
from obpuf.obfuscation import ObPufDevice, expand_with_values
from obpuf.protocol import AuthParams, InProcessChannel, Prover, enroll, reconfig_pool_size, run_session


def _eavesdrop(dev: ObPufDevice, sessions: int, rounds: int, seed: int) -> List[Any]:
    server = enroll(dev, pool_size=reconfig_pool_size(dev.p, dev.m, sessions), seed=seed)
    prover = Prover(dev, np.random.default_rng(seed + 1), noisy=False)
    rng = np.random.default_rng(seed + 2)
    transcripts = []
    for _ in range(sessions):
        with InProcessChannel(prover) as channel:
            transcripts.append(run_session(server, channel, AuthParams(rounds, rounds), rng))
    return transcripts


@pytest.fixture(scope="module")
def reconfig_target():
    dev = ObPufDevice.generate(64, 3, 4, 4, xors=2, seed=5, trial_budget=6, device_id="target")
    data = AttackDataset.from_transcripts(_eavesdrop(dev, 10, 100, seed=6), dev.base_patterns)
    return dev, data


@pytest.fixture(scope="module")
def fixed_target():
    dev = ObPufDevice.generate(64, 3, 4, 4, xors=0, seed=7, reconfigurable=False, trial_budget=6)
    transcripts = _eavesdrop(dev, 4, 100, seed=8)
    c_obs = np.array([[int(ch) for ch in r.c_ob] for t in transcripts for r in t.rounds], dtype=np.uint8)
    r_obs = np.array([[int(ch) for ch in r.r_ob] for t in transcripts for r in t.rounds], dtype=np.uint8)
    return dev, FixedPatternDataset.build(dev.base_patterns, c_obs, r_obs)


def _sphere(x: np.ndarray) -> float:
    return float(np.sum((x - 1.5) ** 2))


def test_cmaes_converges_on_a_sphere():
    result = cmaes_minimize(_sphere, 5, seed=1, options=EsOptions(generations=150))
    assert result.best_fitness < 1e-6
    assert np.allclose(result.best_genome, 1.5, atol=1e-2)
    assert len(result.trace) == 150
    assert all(a >= b for a, b in zip(result.trace, result.trace[1:])), "best-so-far must not increase"
    assert result.population == tuning.default_population(5)
    assert result.evaluations == 150 * result.population
    assert result.final_state.covariance.shape == (5, 5)


def test_cmaes_is_reproducible_and_worker_independent():
    a = cmaes_minimize(_sphere, 4, seed=3, options=EsOptions(generations=30))
    b = cmaes_minimize(_sphere, 4, seed=3, options=EsOptions(generations=30))
    c = cmaes_minimize(_sphere, 4, seed=3, options=EsOptions(generations=30), workers=3)
    assert a.trace == b.trace == c.trace
    assert np.array_equal(a.best_genome, c.best_genome)


def test_cmaes_guards():
    with pytest.raises(ValueError):
        cmaes_minimize(_sphere, 0, seed=0)
    with pytest.raises(ValueError):
        cmaes_minimize(_sphere, 3, seed=0, options=EsOptions(x0=np.zeros(2)))
    with pytest.raises(ValueError):
        EsOptions(generations=0)
    with pytest.raises(ValueError):
        EsOptions(sigma0=0.0)
    with pytest.raises(ValueError):
        EsOptions(population=1)


def test_non_finite_fitness_counts_as_worst():
    result = cmaes_minimize(lambda x: math.nan, 3, seed=0, options=EsOptions(generations=3))
    assert result.best_fitness == tuning.WORST_FITNESS


def test_time_limit_truncates_the_run():
    calls: List[int] = []
    result = cmaes_minimize(
        _sphere,
        3,
        seed=0,
        options=EsOptions(generations=50, time_limit=0.0),
        callback=lambda gen, x, f: calls.append(gen),
    )
    assert result.truncated
    assert len(result.trace) == 1 and calls == [0]


def test_genome_layout():
    layout = GenomeLayout(n_ins=2, k=8, m=2, xors=3)
    assert layout.dim == 2 * 9 + 3 * 7
    genome = np.arange(layout.dim, dtype=float)
    puf, reconfig = layout.split(genome)
    assert puf.shape == (2, 9) and reconfig.shape == (3, 7)
    assert np.array_equal(layout.join(puf, reconfig), genome)
    with pytest.raises(ValueError):
        layout.split(genome[:-1])
    single = GenomeLayout(n_ins=4, k=8, m=2, bits=(2,))
    assert single.modeled_bits == (2,) and single.puf_dim == 9


def test_features_for_matches_direct_expansion(reconfig_target):
    dev, data = reconfig_target
    rng = np.random.default_rng(0)
    values = rng.integers(0, 2, size=(data.sessions, dev.p, dev.m), dtype=np.uint8)
    features = data.features_for(values)
    for s in (0, data.sessions - 1):
        for j, pv in enumerate(dev.base_patterns.patterns):
            direct = challenge_feature(expand_with_values(data.c_obs[s], pv.insert_positions, values[s, j]))
            assert np.array_equal(features[s, :, j, :], direct)


def test_true_genome_explains_every_crp(reconfig_target, fixed_target):
    dev, data = reconfig_target
    assert fitness_reconfigurable(genome_from_device(dev), data, layout_for(dev)) == 0.0
    fixed_dev, fixed_data = fixed_target
    assert fitness_fixed(genome_from_device(fixed_dev), fixed_data) == 0.0


def test_random_genome_scores_near_the_expected_minimum(reconfig_target):
    dev, data = reconfig_target
    layout = layout_for(dev)
    rng = np.random.default_rng(1)
    scores = [fitness_reconfigurable(rng.standard_normal(layout.dim), data, layout) for _ in range(5)]
    # E[min of 4 Bin(4, 1/2)] / 4
    assert np.mean(scores) == pytest.approx(1.0055 / 4, abs=0.03)


def test_wrong_reconfiguration_block_costs_fitness(reconfig_target):
    dev, data = reconfig_target
    layout = layout_for(dev)
    truth = genome_from_device(dev)
    puf, _ = layout.split(truth)
    wrong = layout.join(puf, np.random.default_rng(2).standard_normal((dev.xors, dev.k - dev.m + 1)))
    assert fitness_reconfigurable(wrong, data, layout) > fitness_reconfigurable(truth, data, layout)


def test_fitness_counters(reconfig_target, fixed_target):
    dev, data = reconfig_target
    before_calls, before_rows = data.counters.calls, data.counters.per_call_rows
    fitness_reconfigurable(genome_from_device(dev), data)
    assert data.counters.calls == before_calls + 1
    assert data.counters.per_call_rows - before_rows == data.total_crps * dev.p
    fixed_dev, fixed_data = fixed_target
    fitness_fixed(genome_from_device(fixed_dev), fixed_data)
    assert fixed_data.counters.per_call_rows == 0
    assert fixed_data.counters.precomputed_rows == fixed_data.size * fixed_dev.p


def test_negating_one_apuf_flips_exactly_its_bit(reconfig_target):
    dev, _ = reconfig_target
    test = make_test_set(dev, 400, np.random.default_rng(3))
    assert not dev.session_open
    truth = genome_from_device(dev)
    perfect = eval_p_pred(truth, dev, test)
    assert perfect.per_bit == 1.0 and perfect.per_response == 1.0
    negated = truth.copy()
    negated[: dev.k + 1] *= -1
    acc = eval_p_pred(negated, dev, test)
    assert acc.per_bit == pytest.approx(1.0 - 1.0 / dev.n_ins)
    assert acc.per_response == 0.0


def test_prediction_accuracy_of_a_single_apuf():
    puf = sample_apuf(16, seed=4)
    c = random_challenges(500, 16, np.random.default_rng(4))
    r = eval_response(puf, c)
    assert prediction_accuracy(puf.omega, c, r) == 1.0
    assert prediction_accuracy(-puf.omega, c, r) == 0.0


@pytest.mark.slow
def test_baseline_attack_learns_a_plain_apuf():
    puf = sample_apuf(16, seed=5)
    c = random_challenges(2000, 16, np.random.default_rng(5))
    result = attack_apuf_baseline(c, eval_response(puf, c), 16, EsOptions(generations=400), seed=6)
    assert result.accuracy > 0.9, f"holdout accuracy {result.accuracy:.3f}"
    assert result.generations == 400


def test_baseline_rejects_mismatched_data():
    with pytest.raises(ValueError):
        attack_apuf_baseline(np.zeros((4, 8)), np.zeros(3), 8, EsOptions(generations=1))


def test_campaign_config_validation():
    with pytest.raises(ValueError):
        CampaignConfig(target="xor")
    with pytest.raises(ValueError):
        CampaignConfig(mode="greedy")
    with pytest.raises(ValueError):
        CampaignConfig(target="reconfigurable", xors=0)
    with pytest.raises(ValueError):
        CampaignConfig(p=5, m=2)


def _small_campaign(**overrides: Any) -> CampaignConfig:
    values = dict(
        k=16, n_ins=2, p=2, m=2, xors=1, sessions=4, rounds=40, generations=4, test_size=100, seed=11, population=8
    )
    values.update(overrides)
    return CampaignConfig(**values)


def _stable(rows: List[dict]) -> List[dict]:
    return [{k: v for k, v in row.items() if k != "wall_time_s"} for row in rows]


@pytest.mark.parametrize("target", ["reconfigurable", "fixed"])
def test_campaign_reports_are_reproducible(target):
    logs: List[str] = []
    first = run_attack_campaign(_small_campaign(target=target), log_callback=logs.append)
    second = run_attack_campaign(_small_campaign(target=target))
    assert _stable(first.rows) == _stable(second.rows)
    assert first.trace == second.trace
    row = first.rows[0]
    assert row["target"] == target
    assert 0.0 <= row["p_pred"] <= 1.0
    assert row["p_min"] == pytest.approx(0.95**2, abs=1e-6)
    assert len(first.trace) == 4 and "p_pred" in first.trace[0]
    assert any(line.startswith("Run 0: P_pred=") for line in logs)


def test_per_bit_campaign_traces_every_bit():
    report = run_attack_campaign(_small_campaign(mode="per-bit", runs=2))
    assert len(report.rows) == 2
    assert {entry["bit"] for entry in report.trace} == {0, 1}
    assert {entry["run"] for entry in report.trace} == {0, 1}


def test_apuf_campaign():
    report = run_attack_campaign(CampaignConfig(target="apuf", k=16, crps=400, generations=5, seed=3))
    assert report.rows[0]["target"] == "apuf"
    assert len(report.trace) == 5


@pytest.mark.slow
def test_baseline_attack_learns_a_64_stage_apuf_with_the_default_budget():
    puf = sample_apuf(64, seed=7)
    c = random_challenges(tuning.BASELINE_CRPS, 64, np.random.default_rng(7))
    result = attack_apuf_baseline(c, eval_response(puf, c), 64, seed=8)
    assert result.generations <= tuning.BASELINE_GENERATIONS
    assert result.accuracy >= 0.95, f"holdout accuracy {result.accuracy:.3f}"


def _campaign_p_preds(**overrides: Any) -> List[float]:
    preds = []
    for seed in (1, 2, 3):
        cfg = CampaignConfig(seed=seed, trace_p_pred=False, **overrides)
        preds.extend(row["p_pred"] for row in run_attack_campaign(cfg).rows)
    return preds


@pytest.mark.slow
def test_obfuscation_hardness_ordering():
    fixed = _campaign_p_preds(target="fixed", n_ins=2, p=2, m=3)
    reconfig = _campaign_p_preds(target="reconfigurable", n_ins=2, p=2, m=3, xors=2)
    reconfig_m8 = _campaign_p_preds(target="reconfigurable", n_ins=2, p=2, m=8, xors=2)
    block4_xor1 = _campaign_p_preds(target="reconfigurable", n_ins=4, p=4, m=3, xors=1)
    block4_xor2 = _campaign_p_preds(target="reconfigurable", n_ins=4, p=4, m=3, xors=2)

    assert np.median(fixed) > np.median(reconfig), (fixed, reconfig)
    assert np.median(reconfig) > np.median(reconfig_m8), (reconfig, reconfig_m8)
    assert np.median(block4_xor1) > np.median(block4_xor2), (block4_xor1, block4_xor2)
    assert max(block4_xor2) < 0.95**4, block4_xor2
