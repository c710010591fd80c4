from __future__ import annotations

import json
from typing import Any, List, Optional

import numpy as np
import pytest

from obpuf import tuning
from obpuf.apuf import InsufficientChallengesError, calibrate_noise, random_challenges, reliability_margin
from obpuf.obfuscation import ObPufDevice, PatternSet, PatternVector, SessionError, has_collision
from obpuf.protocol import (
    AuthParams,
    EnrollmentError,
    InProcessChannel,
    PoolExhaustedError,
    PopulationJob,
    Prover,
    ServerModel,
    SessionTranscript,
    SocketChannel,
    TransportError,
    enroll,
    open_channel,
    reconfig_pool_size,
    recover,
    run_population,
    run_session,
)
from obpuf.wire import Challenge, Message


@pytest.fixture(scope="module")
def sigma() -> float:
    return calibrate_noise(64, tuning.P_INTRA_PUF, trials=40_000, seed=1)


def _device(seed: int, sigma: float = 0.0, patterns=None, device_id: str = "dev-0") -> ObPufDevice:
    return ObPufDevice.generate(
        64, 3, 4, 4, xors=2, seed=seed, noise_sigma=sigma, patterns=patterns, trial_budget=6, device_id=device_id
    )


class RecordingChannel:
    """In-process channel that logs traffic and can fail on a given challenge round."""

    def __init__(self, prover: Prover, fail_round: Optional[int] = None) -> None:
        self.inner = InProcessChannel(prover)
        self.sent: List[Message] = []
        self.fail_round = fail_round

    def exchange(self, msg: Message) -> Optional[Message]:
        self.sent.append(msg)
        if isinstance(msg, Challenge) and msg.round == self.fail_round:
            raise TransportError("link dropped")
        return self.inner.exchange(msg)


def test_auth_params_validation():
    AuthParams(10, 10, 0)
    with pytest.raises(ValueError):
        AuthParams(0, 0)
    with pytest.raises(ValueError):
        AuthParams(10, 11)
    with pytest.raises(ValueError):
        AuthParams(10, 2, -1)
    with pytest.raises(ValueError):
        AuthParams(10, 2, 5).check(4)


def test_ideal_enrollment_copies_models_and_builds_a_reliable_pool(sigma):
    dev = _device(1, sigma)
    server = enroll(dev, seed=2)
    assert np.array_equal(server.puf_block_models, np.stack([a.omega for a in dev.puf_block]))
    assert server.reliable_pool.shape == (dev.p * dev.m * tuning.RELIABLE_POOL_FACTOR, 61)
    margins = reliability_margin(dev.reconfig_block, server.reliable_pool)
    assert np.all(margins >= tuning.RELIABLE_SIGMA_MULTIPLE * sigma)


def test_server_derives_the_device_values_from_the_pool(sigma):
    dev = _device(3, sigma)
    server = enroll(dev, seed=4)
    rng = np.random.default_rng(5)
    for _ in range(5):
        challenges = server.take_reconfig_challenges()
        values = server.derive_session_values(challenges)
        assert not has_collision(values)
        bits = dev.reconfig_bits(challenges, rng, noisy=True)
        assert np.array_equal(bits.reshape(dev.p, dev.m), values)


def test_recover_returns_the_smallest_matching_pattern():
    dev = _device(6)
    server = enroll(dev, seed=7)
    values = server.derive_session_values(server.take_reconfig_challenges())
    rng = np.random.default_rng(8)
    for c_ob in random_challenges(40, 61, rng):
        candidates = server.emulate(c_ob.reshape(1, -1), values)[:, 0, :]
        for j in range(dev.p):
            idx = recover(c_ob, candidates[j], server, 0, values)
            assert idx is not None and idx <= j
            assert np.array_equal(candidates[idx], candidates[j])
        assert recover(c_ob, candidates[-1] ^ 1, server, dev.n_ins, values) == 0


def test_genuine_device_is_accepted_and_impostor_rejected(sigma):
    dev = _device(9, sigma, device_id="genuine")
    impostor = _device(10, sigma, patterns=dev.base_patterns, device_id="impostor")
    server = enroll(dev, seed=11)
    params = AuthParams(100, 40, 0)
    rng = np.random.default_rng(12)
    for _ in range(3):
        with open_channel("inproc", Prover(dev, np.random.default_rng(13))) as channel:
            transcript = run_session(server, channel, params, rng)
        assert transcript.accepted, f"genuine rejected with {transcript.mismatches} mismatches"
        with open_channel("inproc", Prover(impostor, np.random.default_rng(14))) as channel:
            transcript = run_session(server, channel, params, rng)
        assert transcript.decision == "reject"
        assert transcript.mismatches > params.n_th


def test_partial_challenges_are_never_reissued():
    dev = _device(15)
    server = enroll(dev, seed=16)
    params = AuthParams(50, 0, 0)
    rng = np.random.default_rng(17)
    seen = set()
    for _ in range(4):
        with open_channel("inproc", Prover(dev, rng, noisy=False)) as channel:
            transcript = run_session(server, channel, params, rng)
        assert transcript.accepted
        assert all(r.matched for r in transcript.rounds)
        for record in transcript.rounds:
            assert record.c_ob not in seen
            seen.add(record.c_ob)
    assert len(server.used_log) == 200
    assert server.next_session_id == 5


def test_pool_exhaustion_raises_before_anything_is_sent():
    dev = _device(18)
    server = enroll(dev, seed=19)
    server.pool_cursor = server.reliable_pool.shape[0] - 1
    channel = RecordingChannel(Prover(dev, np.random.default_rng(0)))
    with pytest.raises(PoolExhaustedError) as excinfo:
        run_session(server, channel, AuthParams(5, 0), np.random.default_rng(1))
    assert excinfo.value.remaining == 1
    assert channel.sent == []


def test_transport_failure_aborts_the_session():
    dev = _device(20)
    server = enroll(dev, seed=21)
    channel = RecordingChannel(Prover(dev, np.random.default_rng(0), noisy=False), fail_round=3)
    transcript = run_session(server, channel, AuthParams(10, 0), np.random.default_rng(2))
    assert transcript.aborted
    assert "link dropped" in transcript.error
    assert len(transcript.rounds) == 3


def test_fixed_pattern_device_sends_no_reconfiguration_challenges():
    dev = ObPufDevice.generate(32, 2, 2, 2, xors=0, seed=22, reconfigurable=False, trial_budget=6)
    server = enroll(dev, seed=23)
    assert server.reliable_pool.shape[0] == 0
    with open_channel("inproc", Prover(dev, np.random.default_rng(0), noisy=False)) as channel:
        transcript = run_session(server, channel, AuthParams(20, 0), np.random.default_rng(1))
    assert transcript.reconfig_challenges == []
    assert transcript.accepted


def test_transcript_roundtrip_and_threshold_replay():
    dev = _device(24)
    impostor = _device(25, patterns=dev.base_patterns)
    server = enroll(dev, seed=26)
    with open_channel("inproc", Prover(impostor, np.random.default_rng(0), noisy=False)) as channel:
        transcript = run_session(server, channel, AuthParams(30, 30), np.random.default_rng(1))
    restored = SessionTranscript.from_record(json.loads(transcript.to_json_line()))
    assert restored.to_json_line() == transcript.to_json_line()
    assert transcript.accepted
    assert transcript.decide(transcript.mismatches)
    assert not transcript.decide(transcript.mismatches - 1)
    assert transcript.decide(0, n_mismatch=dev.n_ins, server=server)


def test_server_record_roundtrip():
    dev = _device(27)
    server = enroll(dev, seed=28)
    with open_channel("inproc", Prover(dev, np.random.default_rng(0), noisy=False)) as channel:
        run_session(server, channel, AuthParams(8, 0), np.random.default_rng(1))
    restored = ServerModel.from_record(server.to_record())
    assert restored.to_record() == server.to_record()
    assert restored.used_log == server.used_log
    assert restored.pool_cursor == server.pool_cursor


def _tiny_server() -> ServerModel:
    patterns = PatternSet(
        4,
        2,
        1,
        (PatternVector((1, 2), (0, 0), (0,)), PatternVector((1, 2), (1, 1), (1,))),
    )
    return ServerModel(
        device_id="tiny",
        puf_block_models=np.ones((1, 5)),
        reconfig_models=np.zeros((0, 5)),
        base_patterns=patterns,
        reliable_pool=np.zeros((0, 2), dtype=np.uint8),
        reconfigurable=False,
    )


def test_round_challenge_search_gives_up_when_every_challenge_is_used():
    server = _tiny_server()
    rng = np.random.default_rng(0)
    drawn = {tuple(int(b) for b in server.fresh_partial_challenge(rng)) for _ in range(4)}
    assert drawn == {(0, 0), (0, 1), (1, 0), (1, 1)}
    with pytest.raises(InsufficientChallengesError, match="no fresh partial challenge"):
        server.fresh_partial_challenge(rng)


def test_reliable_round_search_gives_up_on_an_unreachable_margin(monkeypatch):
    monkeypatch.setattr(tuning, "ROUND_CANDIDATE_ATTEMPTS", 3)
    monkeypatch.setattr(tuning, "ROUND_CANDIDATE_BATCH", 16)
    dev = ObPufDevice.generate(32, 2, 2, 2, xors=0, seed=30, reconfigurable=False, trial_budget=6)
    server = enroll(dev, seed=31)
    server.round_theta = 1e9
    with pytest.raises(InsufficientChallengesError, match="reliable"):
        server.fresh_partial_challenge(np.random.default_rng(0), reliable=True)
    assert server.used_log == set()


def _jobs(seed: int) -> List[PopulationJob]:
    jobs = []
    for i in range(2):
        dev = _device(seed + i, device_id=f"dev-{i}")
        impostor = _device(seed + 10 + i, patterns=dev.base_patterns, device_id=f"imp-{i}")
        server = enroll(dev, seed=seed + 20 + i)
        jobs.append(PopulationJob(server, [("genuine", dev, 2), ("impostor", impostor, 1)]))
    return jobs


def _lines(results: List[Any]) -> List[str]:
    return [f"{label} {t.to_json_line()}" for label, t in results]


def test_population_results_do_not_depend_on_transport_or_workers():
    params = AuthParams(20, 8, 0)
    baseline = _lines(run_population(_jobs(30), params, seed=99, transport="inproc"))
    assert len(baseline) == 6
    assert _lines(run_population(_jobs(30), params, seed=99, transport="inproc", workers=2)) == baseline
    assert _lines(run_population(_jobs(30), params, seed=99, transport="socket")) == baseline


def test_unknown_transport_and_mode():
    dev = _device(40)
    with pytest.raises(ValueError):
        open_channel("carrier-pigeon", Prover(dev, np.random.default_rng(0)))
    with pytest.raises(ValueError):
        enroll(dev, mode="oracle")


def test_learned_enrollment_enforces_the_accuracy_bar(monkeypatch):
    dev = ObPufDevice.generate(16, 1, 2, 2, xors=1, seed=41, trial_budget=6)
    monkeypatch.setattr(tuning, "LEARNED_ENROLL_ACCURACY", 1.01)
    with pytest.raises(EnrollmentError) as excinfo:
        enroll(dev, mode="learned", seed=42, crps=200, generations=3)
    assert excinfo.value.accuracy <= 1.0


@pytest.mark.slow
def test_learned_enrollment_authenticates_the_device(monkeypatch):
    monkeypatch.setattr(tuning, "LEARNED_ENROLL_ACCURACY", 0.95)
    dev = ObPufDevice.generate(16, 1, 2, 2, xors=1, seed=43, trial_budget=6)
    server = enroll(dev, mode="learned", seed=44, crps=2000, generations=400)
    assert server.mode == "learned"
    with open_channel("inproc", Prover(dev, np.random.default_rng(0), noisy=False)) as channel:
        transcript = run_session(server, channel, AuthParams(50, 15, 0), np.random.default_rng(1))
    assert transcript.accepted, f"{transcript.mismatches} mismatches with learned models"


def test_pool_size_covers_discarded_groups():
    assert reconfig_pool_size(4, 0, 10) == 0
    size = reconfig_pool_size(4, 3, 10)
    assert size % 12 == 0
    # 1680 of 4096 groups of four 3-bit strings are collision-free
    assert size // 12 >= 10 * 4096 / 1680


def test_socket_prover_failure_is_kept_on_the_channel():
    dev = _device(40)
    channel = SocketChannel(Prover(dev, np.random.default_rng(0), noisy=False))
    assert channel.server_error is None
    with channel:
        with pytest.raises(TransportError):
            channel.exchange(Challenge(0, tuple([0] * 61)))
    assert isinstance(channel.server_error, SessionError)


@pytest.mark.slow
def test_operating_point_separates_genuine_and_impostor_sessions(sigma):
    dev = ObPufDevice.generate(64, 3, 4, 8, xors=2, seed=50, noise_sigma=sigma, trial_budget=6, device_id="genuine")
    impostor = ObPufDevice.generate(
        64, 3, 4, 8, xors=2, seed=51, noise_sigma=sigma, patterns=dev.base_patterns, trial_budget=6, device_id="impostor"
    )
    server = enroll(dev, pool_size=reconfig_pool_size(dev.p, dev.m, 2000), seed=52)
    job = PopulationJob(server, [("genuine", dev, 1000), ("impostor", impostor, 1000)])
    results = run_population([job], AuthParams(42, 30, 0), seed=53)
    genuine = [t for label, t in results if label == "genuine"]
    impostors = [t for label, t in results if label == "impostor"]
    assert len(genuine) == len(impostors) == 1000
    rejected = sum(not t.accepted for t in genuine)
    accepted = sum(t.accepted for t in impostors)
    assert rejected == 0, f"FRR {rejected / 1000:.4f}"
    assert accepted == 0, f"FAR {accepted / 1000:.4f}"
