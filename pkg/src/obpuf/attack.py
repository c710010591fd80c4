"""CMA-ES modeling attacks on APUFs and OB-PUFs.

The optimizer is pycma's ask/tell loop.  Fitness functions are
Hamming-distance based: for every observed OB-CRP the genome emulates the
``p`` candidate obfuscated responses and the smallest fractional distance
to the observed response counts.  Against a reconfigurable device the
genome also carries the reconfiguration block; its predicted inserted
values change the challenge features of every CRP in a session, so those
features are rebuilt for every candidate genome.

Challenge features of a full challenge factor into the suffix products of
the partial-challenge bits (fixed per pattern layout, precomputed once) and
the suffix products of the inserted bits (cheap, per session).
"""

from __future__ import annotations

import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import cma
import numpy as np

from . import tuning
from .apuf import challenge_feature, random_challenges
from .metrics import EstimatorInputs, p_min
from .obfuscation import (
    ObPufDevice,
    PatternSet,
    close_session,
    expand_with_values,
    reconfigure_session,
)

Objective = Callable[[np.ndarray], float]


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class EsOptions:
    population: Optional[int] = None
    generations: int = field(default_factory=lambda: tuning.ATTACK_GENERATIONS)
    sigma0: float = field(default_factory=lambda: tuning.CMA_SIGMA0)
    x0: Optional[np.ndarray] = None
    time_limit: Optional[float] = None

    def __post_init__(self) -> None:
        if self.generations < 1:
            raise ValueError(f"generations must be >= 1, got {self.generations}")
        if not self.sigma0 > 0:
            raise ValueError(f"sigma0 must be > 0, got {self.sigma0}")
        if self.population is not None and self.population < 2:
            raise ValueError(f"population must be >= 2, got {self.population}")


@dataclass
class EsState:
    mean: np.ndarray
    step_size: float
    covariance: np.ndarray
    path_c: np.ndarray
    path_sigma: np.ndarray
    generation: int


@dataclass
class EsResult:
    best_genome: np.ndarray
    best_fitness: float
    trace: List[float]
    generation_best: List[float]
    evaluations: int
    population: int
    final_state: EsState
    truncated: bool = False


def _cma_seed(seed: int) -> int:
    # pycma treats 0/None as "seed from the clock"
    return int(seed) % (2**32 - 1) + 1


def _snapshot(es: Any) -> EsState:
    sampler = getattr(es, "sm", None)
    covariance = getattr(sampler, "C", None)
    if covariance is None or np.ndim(covariance) != 2:
        covariance = np.diag(np.asarray(getattr(es, "C", np.ones(len(es.mean))), dtype=float).ravel())
    adapt = getattr(es, "adapt_sigma", None)
    return EsState(
        mean=np.array(es.mean, dtype=float),
        step_size=float(es.sigma),
        covariance=np.array(covariance, dtype=float),
        path_c=np.array(getattr(es, "pc", np.zeros(len(es.mean))), dtype=float),
        path_sigma=np.array(getattr(adapt, "ps", np.zeros(len(es.mean))), dtype=float),
        generation=int(es.countiter),
    )


def cmaes_minimize(
    objective: Objective,
    dim: int,
    seed: int,
    options: Optional[EsOptions] = None,
    workers: int = 1,
    callback: Optional[Callable[[int, np.ndarray, float], None]] = None,
) -> EsResult:
    """Minimize ``objective`` with the (mu/mu_w, lambda) CMA-ES.

    Runs exactly ``options.generations`` generations unless ``time_limit``
    expires first (then ``truncated`` is set).  Non-finite objective values
    count as ``WORST_FITNESS``.  Candidates of one generation may be
    evaluated on ``workers`` threads; the result does not depend on it.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    options = options or EsOptions()
    popsize = int(options.population or tuning.default_population(dim))
    x0 = np.zeros(dim) if options.x0 is None else np.asarray(options.x0, dtype=float)
    if x0.shape != (dim,):
        raise ValueError(f"x0 must have shape ({dim},), got {x0.shape}")
    es = cma.CMAEvolutionStrategy(
        x0,
        options.sigma0,
        {"popsize": popsize, "seed": _cma_seed(seed), "verbose": -9, "maxiter": math.inf, "tolflatfitness": math.inf},
    )

    def _safe(x: np.ndarray) -> float:
        value = float(objective(np.asarray(x)))
        return value if math.isfinite(value) else tuning.WORST_FITNESS

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    best_x = x0.copy()
    best_f = math.inf
    trace: List[float] = []
    generation_best: List[float] = []
    evaluations = 0
    truncated = False
    started = time.perf_counter()
    try:
        for generation in range(options.generations):
            solutions = es.ask()
            fitness = list(pool.map(_safe, solutions)) if pool is not None else [_safe(x) for x in solutions]
            evaluations += len(solutions)
            es.tell(solutions, fitness)
            gen_idx = int(np.argmin(fitness))
            generation_best.append(float(fitness[gen_idx]))
            if fitness[gen_idx] < best_f:
                best_f = float(fitness[gen_idx])
                best_x = np.array(solutions[gen_idx], dtype=float)
            trace.append(best_f)
            if callback is not None:
                callback(generation, best_x, best_f)
            if options.time_limit is not None and time.perf_counter() - started > options.time_limit:
                truncated = generation + 1 < options.generations
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return EsResult(
        best_genome=best_x,
        best_fitness=best_f,
        trace=trace,
        generation_best=generation_best,
        evaluations=evaluations,
        population=popsize,
        final_state=_snapshot(es),
        truncated=truncated,
    )


# ---------------------------------------------------------------------------
# Genomes


@dataclass(frozen=True)
class GenomeLayout:
    """Flat genome: PUF-block delay vectors then reconfiguration delay vectors.

    ``bits`` selects which PUF-block APUFs the genome models (all by default).
    """

    n_ins: int
    k: int
    m: int
    xors: int = 0
    bits: Optional[Tuple[int, ...]] = None

    @property
    def modeled_bits(self) -> Tuple[int, ...]:
        return tuple(range(self.n_ins)) if self.bits is None else tuple(self.bits)

    @property
    def puf_dim(self) -> int:
        return len(self.modeled_bits) * (self.k + 1)

    @property
    def dim(self) -> int:
        return self.puf_dim + self.xors * (self.k - self.m + 1)

    def split(self, genome: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        g = np.asarray(genome, dtype=np.float64)
        if g.shape != (self.dim,):
            raise ValueError(f"genome must have {self.dim} entries, got {g.shape}")
        puf = g[: self.puf_dim].reshape(len(self.modeled_bits), self.k + 1)
        reconfig = g[self.puf_dim :].reshape(self.xors, self.k - self.m + 1)
        return puf, reconfig

    def join(self, puf: np.ndarray, reconfig: Optional[np.ndarray] = None) -> np.ndarray:
        parts = [np.asarray(puf, dtype=np.float64).ravel()]
        if self.xors:
            parts.append(np.asarray(reconfig, dtype=np.float64).ravel())
        return np.concatenate(parts)


def genome_from_device(dev: ObPufDevice, include_reconfig: bool = True) -> np.ndarray:
    puf = np.stack([a.omega for a in dev.puf_block])
    if include_reconfig and dev.reconfig_block:
        return np.concatenate([puf.ravel()] + [a.omega for a in dev.reconfig_block])
    return puf.ravel().copy()


def layout_for(dev: ObPufDevice, include_reconfig: bool = True, bits: Optional[Sequence[int]] = None) -> GenomeLayout:
    return GenomeLayout(
        dev.n_ins,
        dev.k,
        dev.m,
        dev.xors if include_reconfig else 0,
        None if bits is None else tuple(bits),
    )


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class FitnessCounters:
    """Challenge-feature rows built, split by when they were built."""

    precomputed_rows: int = 0
    per_call_rows: int = 0
    calls: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record_call(self, rows: int) -> None:
        with self._lock:
            self.calls += 1
            self.per_call_rows += rows


@dataclass
class FixedPatternDataset:
    """OB-CRPs from a device whose pattern vectors (values included) are known."""

    patterns: PatternSet
    c_obs: np.ndarray
    r_obs: np.ndarray
    features: np.ndarray = field(repr=False)
    counters: FitnessCounters = field(default_factory=FitnessCounters)

    @classmethod
    def build(cls, patterns: PatternSet, c_obs: np.ndarray, r_obs: np.ndarray) -> "FixedPatternDataset":
        c_obs = np.asarray(c_obs, dtype=np.uint8).reshape(-1, patterns.k - patterns.m)
        r_obs = np.asarray(r_obs, dtype=np.uint8).reshape(c_obs.shape[0], patterns.n_ins)
        features = np.stack(
            [
                challenge_feature(expand_with_values(c_obs, pv.insert_positions, pv.insert_values))
                for pv in patterns.patterns
            ]
        ).astype(np.float64)
        counters = FitnessCounters(precomputed_rows=patterns.p * c_obs.shape[0])
        return cls(patterns, c_obs, r_obs, features, counters)

    @property
    def size(self) -> int:
        return int(self.c_obs.shape[0])


def _min_fhd(raw_t: np.ndarray, masks: np.ndarray, r_obs: np.ndarray, pattern_axis: int) -> np.ndarray:
    bits = (raw_t > 0).astype(np.uint8) ^ masks
    dist = np.mean(bits != r_obs, axis=-1)
    return dist.min(axis=pattern_axis)


def fitness_fixed(genome: np.ndarray, dataset: FixedPatternDataset, bits: Optional[Sequence[int]] = None) -> float:
    """Sum over OB-CRPs of the smallest candidate FHD (smaller is fitter)."""
    ps = dataset.patterns
    cols = list(range(ps.n_ins)) if bits is None else list(bits)
    weights = np.asarray(genome, dtype=np.float64)[: len(cols) * (ps.k + 1)].reshape(len(cols), ps.k + 1)
    dataset.counters.record_call(0)
    t = dataset.features @ weights.T
    masks = ps.masks[:, None, cols]
    return float(_min_fhd(t, masks, dataset.r_obs[None, :, cols], pattern_axis=0).sum())


@dataclass
class AttackDataset:
    """Eavesdropped sessions against a reconfigurable device.

    Public: insert positions, masks and every session's reconfiguration
    challenges.  Inserted values are unknown.
    """

    patterns: PatternSet
    reconfig_challenges: np.ndarray  # (S, p*m, k-m)
    c_obs: np.ndarray  # (S, n, k-m)
    r_obs: np.ndarray  # (S, n, n_ins)
    reconfig_features: np.ndarray = field(repr=False)  # (S, p*m, k-m+1)
    partial_suffix: np.ndarray = field(repr=False)  # (S, n, p, k+1)
    insert_index: np.ndarray = field(repr=False)  # (p, k+1)
    counters: FitnessCounters = field(default_factory=FitnessCounters)

    @classmethod
    def build(
        cls,
        patterns: PatternSet,
        reconfig_challenges: np.ndarray,
        c_obs: np.ndarray,
        r_obs: np.ndarray,
    ) -> "AttackDataset":
        k, m, p = patterns.k, patterns.m, patterns.p
        reconfig = np.asarray(reconfig_challenges, dtype=np.uint8)
        sessions = reconfig.shape[0]
        reconfig = reconfig.reshape(sessions, p * m, k - m)
        c_obs = np.asarray(c_obs, dtype=np.uint8).reshape(sessions, -1, k - m)
        r_obs = np.asarray(r_obs, dtype=np.uint8).reshape(sessions, c_obs.shape[1], patterns.n_ins)
        reconfig_features = challenge_feature(reconfig.reshape(-1, k - m)).reshape(sessions, p * m, k - m + 1)
        flat = c_obs.reshape(-1, k - m)
        zeros = np.zeros(m, dtype=np.uint8)
        suffix = np.stack(
            [challenge_feature(expand_with_values(flat, pv.insert_positions, zeros)) for pv in patterns.patterns],
            axis=1,
        ).reshape(sessions, c_obs.shape[1], p, k + 1)
        positions0 = patterns.positions - 1
        index = np.stack([np.searchsorted(positions0[j], np.arange(k + 1), side="left") for j in range(p)])
        counters = FitnessCounters(precomputed_rows=sessions * c_obs.shape[1] * p)
        return cls(
            patterns,
            reconfig,
            c_obs,
            r_obs,
            reconfig_features.astype(np.float64),
            suffix,
            index,
            counters,
        )

    @classmethod
    def from_transcripts(cls, transcripts: Sequence[Any], patterns: PatternSet) -> "AttackDataset":
        def bits(text: str) -> np.ndarray:
            return np.frombuffer(text.encode("ascii"), dtype=np.uint8) - ord("0")

        complete = [t for t in transcripts if t.rounds]
        if not complete:
            raise ValueError("no transcripts with rounds to attack")
        rounds = min(len(t.rounds) for t in complete)
        reconfig = np.stack(
            [
                np.array([bits(c) for c in t.reconfig_challenges], dtype=np.uint8).reshape(
                    patterns.p * patterns.m, patterns.k - patterns.m
                )
                for t in complete
            ]
        )
        c_obs = np.stack([np.stack([bits(r.c_ob) for r in t.rounds[:rounds]]) for t in complete])
        r_obs = np.stack([np.stack([bits(r.r_ob) for r in t.rounds[:rounds]]) for t in complete])
        return cls.build(patterns, reconfig, c_obs, r_obs)

    @property
    def sessions(self) -> int:
        return int(self.c_obs.shape[0])

    @property
    def total_crps(self) -> int:
        return int(self.c_obs.shape[0] * self.c_obs.shape[1])

    def predicted_values(self, reconfig_weights: np.ndarray) -> np.ndarray:
        """``(S, p, m)`` inserted values a reconfiguration model predicts for every session."""
        t = self.reconfig_features @ np.asarray(reconfig_weights, dtype=np.float64).T
        bits = np.bitwise_xor.reduce((t > 0).astype(np.uint8), axis=-1)
        return bits.reshape(self.sessions, self.patterns.p, self.patterns.m)

    def features_for(self, values: np.ndarray) -> np.ndarray:
        """``(S, n, p, k+1)`` challenge features given per-session inserted values."""
        signs = (1 - 2 * values.astype(np.int8)).astype(np.int8)
        suffix = np.ones(values.shape[:2] + (values.shape[2] + 1,), dtype=np.int8)
        if values.shape[2]:
            suffix[..., :-1] = np.cumprod(signs[..., ::-1], axis=-1, dtype=np.int8)[..., ::-1]
        index = np.broadcast_to(self.insert_index, (values.shape[0],) + self.insert_index.shape)
        inserted = np.take_along_axis(suffix, index, axis=-1)
        return self.partial_suffix * inserted[:, None, :, :]


def fitness_reconfigurable(
    genome: np.ndarray,
    dataset: AttackDataset,
    layout: Optional[GenomeLayout] = None,
) -> float:
    """Mean over every eavesdropped OB-CRP of the smallest candidate FHD.

    The genome's reconfiguration block first predicts each session's
    inserted values; the challenge features follow from those.
    """
    ps = dataset.patterns
    layout = layout or GenomeLayout(ps.n_ins, ps.k, ps.m, xors=_infer_xors(genome, ps))
    weights, reconfig = layout.split(genome)
    values = dataset.predicted_values(reconfig)
    features = dataset.features_for(values)
    dataset.counters.record_call(int(features.shape[0] * features.shape[1] * features.shape[2]))
    t = features.astype(np.float64) @ weights.T
    cols = list(layout.modeled_bits)
    masks = ps.masks[None, None, :, cols]
    r_obs = dataset.r_obs[:, :, None, cols]
    return float(_min_fhd(t, masks, r_obs, pattern_axis=2).sum() / dataset.total_crps)


def _infer_xors(genome: np.ndarray, ps: PatternSet) -> int:
    rest = np.asarray(genome).size - ps.n_ins * (ps.k + 1)
    width = ps.k - ps.m + 1
    if rest < 0 or rest % width:
        raise ValueError(f"genome of {np.asarray(genome).size} entries does not fit the pattern set")
    return rest // width


# ---------------------------------------------------------------------------
# Single APUF


@dataclass
class BaselineResult:
    model: np.ndarray
    accuracy: float
    train_accuracy: float
    trace: List[float]
    generations: int


def prediction_accuracy(model: np.ndarray, challenges: np.ndarray, responses: np.ndarray) -> float:
    predicted = (challenge_feature(challenges).astype(np.float64) @ np.asarray(model, dtype=np.float64) > 0)
    return float(np.mean(predicted.astype(np.uint8) == np.asarray(responses, dtype=np.uint8)))


def attack_apuf_baseline(
    challenges: np.ndarray,
    responses: np.ndarray,
    k: int,
    options: Optional[EsOptions] = None,
    seed: int = 0,
    holdout: Optional[float] = None,
    workers: int = 1,
) -> BaselineResult:
    """CMA-ES on one APUF with the summed-FHD fitness; accuracy is measured on held-out CRPs."""
    challenges = np.asarray(challenges, dtype=np.uint8).reshape(-1, k)
    responses = np.asarray(responses, dtype=np.uint8).ravel()
    if challenges.shape[0] != responses.shape[0]:
        raise ValueError("challenge and response counts differ")
    options = options or EsOptions(generations=tuning.BASELINE_GENERATIONS)
    split = challenges.shape[0] - int(round(challenges.shape[0] * (tuning.BASELINE_HOLDOUT if holdout is None else holdout)))
    split = max(1, split)
    phi = challenge_feature(challenges[:split]).astype(np.float64)
    target = responses[:split]

    def objective(w: np.ndarray) -> float:
        return float(np.count_nonzero((phi @ w > 0).astype(np.uint8) != target)) / split

    result = cmaes_minimize(objective, k + 1, seed, options, workers)
    test_c, test_r = (challenges[split:], responses[split:]) if split < challenges.shape[0] else (challenges, responses)
    return BaselineResult(
        model=result.best_genome,
        accuracy=prediction_accuracy(result.best_genome, test_c, test_r),
        train_accuracy=1.0 - result.best_fitness,
        trace=result.trace,
        generations=len(result.trace),
    )


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvaluationSet:
    """Fresh OB-CRPs with the oracle-only ground truth needed to score a model."""

    c_obs: np.ndarray  # (N, k-m)
    values: np.ndarray  # (N, p, m) inserted values of each CRP's session
    pattern_index: np.ndarray  # (N,)
    r_obs: np.ndarray  # (N, n_ins) noiseless


def make_test_set(dev: ObPufDevice, size: int, rng: np.random.Generator, sessions: int = 10) -> EvaluationSet:
    """Noiseless OB-CRPs from ``sessions`` fresh sessions; the device ends with no open session."""
    per = [size // sessions + (1 if i < size % sessions else 0) for i in range(sessions)]
    c_parts, v_parts, i_parts, r_parts = [], [], [], []
    for count in per:
        if count == 0:
            continue
        if dev.reconfigurable:
            reconfigure_session(dev, random_challenges(dev.p * dev.m, dev.k - dev.m, rng), rng, noisy=False)
        values = dev.current_patterns().values
        c_obs = random_challenges(count, dev.k - dev.m, rng)
        r_obs, idx = dev.evaluate(c_obs, rng, noisy=False)
        c_parts.append(c_obs)
        v_parts.append(np.broadcast_to(values, (count,) + values.shape))
        i_parts.append(idx)
        r_parts.append(r_obs)
    if dev.reconfigurable:
        close_session(dev)
    return EvaluationSet(
        np.concatenate(c_parts),
        np.concatenate(v_parts),
        np.concatenate(i_parts),
        np.concatenate(r_parts),
    )


@dataclass
class PredictionAccuracy:
    per_bit: float
    per_response: float
    best_pattern_bit: float


def eval_p_pred(genome: np.ndarray, dev: ObPufDevice, test: EvaluationSet) -> PredictionAccuracy:
    """Accuracy of the genome's PUF block on the test set.

    ``per_bit`` (primary) and ``per_response`` use the true pattern index and
    inserted values; ``best_pattern_bit`` scores the closest of the ``p``
    candidates.
    """
    ps = dev.base_patterns
    weights = np.asarray(genome, dtype=np.float64)[: dev.n_ins * (dev.k + 1)].reshape(dev.n_ins, dev.k + 1)
    candidates = np.empty((ps.p,) + test.r_obs.shape, dtype=np.uint8)
    for j, pv in enumerate(ps.patterns):
        full = expand_with_values(test.c_obs, pv.insert_positions, test.values[:, j, :])
        raw = (challenge_feature(full).astype(np.float64) @ weights.T > 0).astype(np.uint8)
        candidates[j] = raw ^ ps.masks[j]
    rows = np.arange(test.r_obs.shape[0])
    chosen = candidates[test.pattern_index, rows]
    agree = chosen == test.r_obs
    best = np.min(np.count_nonzero(candidates != test.r_obs[None], axis=2), axis=0)
    return PredictionAccuracy(
        per_bit=float(agree.mean()),
        per_response=float(np.all(agree, axis=1).mean()),
        best_pattern_bit=float(1.0 - best.mean() / dev.n_ins),
    )


# ---------------------------------------------------------------------------
# Campaigns


@dataclass
class CampaignConfig:
    target: str = "reconfigurable"  # reconfigurable | fixed | apuf
    k: int = field(default_factory=lambda: tuning.DEFAULT_STAGES)
    n_ins: int = 2
    p: int = 2
    m: int = 3
    xors: int = 2
    sessions: int = field(default_factory=lambda: tuning.ATTACK_SESSIONS)
    rounds: int = field(default_factory=lambda: tuning.ATTACK_ROUNDS)
    generations: int = field(default_factory=lambda: tuning.ATTACK_GENERATIONS)
    population: Optional[int] = None
    sigma0: float = field(default_factory=lambda: tuning.CMA_SIGMA0)
    seed: int = 0
    mode: str = "joint"  # joint | per-bit
    runs: int = 1
    test_size: int = field(default_factory=lambda: tuning.ATTACK_TEST_SIZE)
    crps: int = field(default_factory=lambda: tuning.BASELINE_CRPS)
    workers: int = 1
    time_limit: Optional[float] = None
    trace_p_pred: bool = True

    def __post_init__(self) -> None:
        if self.target not in ("reconfigurable", "fixed", "apuf"):
            raise ValueError(f"unknown attack target {self.target!r}")
        if self.mode not in ("joint", "per-bit"):
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if self.target == "reconfigurable" and self.xors < 1:
            raise ValueError("a reconfigurable target needs xors >= 1")
        if self.p > 2**self.m:
            raise ValueError(f"p={self.p} exceeds the {2**self.m} distinct {self.m}-bit value strings")
        if self.runs < 1 or self.sessions < 1 or self.rounds < 1:
            raise ValueError("runs, sessions and rounds must be >= 1")


@dataclass
class CampaignReport:
    config: Dict[str, Any]
    rows: List[Dict[str, Any]]
    trace: List[Dict[str, Any]]
    wall_time: float

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _collect_transcripts(dev: ObPufDevice, cfg: CampaignConfig, seed: np.random.SeedSequence) -> List[Any]:
    from .protocol import AuthParams, InProcessChannel, Prover, enroll, reconfig_pool_size, run_session

    enroll_seed, server_seed, prover_seed = seed.spawn(3)
    pool = reconfig_pool_size(dev.p, dev.m, cfg.sessions)
    server = enroll(dev, "ideal", pool_size=pool, seed=enroll_seed)
    params = AuthParams(n=cfg.rounds, n_th=cfg.rounds, n_mismatch=0)
    server_rng = np.random.default_rng(server_seed)
    prover = Prover(dev, np.random.default_rng(prover_seed), noisy=False)
    transcripts = []
    for _ in range(cfg.sessions):
        with InProcessChannel(prover) as channel:
            transcripts.append(run_session(server, channel, params, server_rng))
    return transcripts


def _apuf_campaign(cfg: CampaignConfig, ss: np.random.SeedSequence, emit: Callable[[str], None]) -> CampaignReport:
    from .apuf import eval_response, sample_apuf

    dev_seed, data_seed, *run_seeds = ss.spawn(2 + cfg.runs)
    puf = sample_apuf(cfg.k, dev_seed)
    rng = np.random.default_rng(data_seed)
    challenges = random_challenges(cfg.crps, cfg.k, rng)
    responses = np.asarray(eval_response(puf, challenges), dtype=np.uint8)
    rows, trace = [], []
    started = time.perf_counter()
    for run, run_seed in enumerate(run_seeds):
        t0 = time.perf_counter()
        options = EsOptions(cfg.population, cfg.generations, cfg.sigma0, time_limit=cfg.time_limit)
        seed = int(run_seed.generate_state(1)[0])
        result = attack_apuf_baseline(challenges, responses, cfg.k, options, seed, workers=cfg.workers)
        emit(f"Run {run}: holdout accuracy={result.accuracy:.4f}")
        rows.append(
            {
                "target": "apuf",
                "k": cfg.k,
                "crps": cfg.crps,
                "generations": cfg.generations,
                "run": run,
                "p_pred": round(result.accuracy, 6),
                "train_accuracy": round(result.train_accuracy, 6),
                "wall_time_s": round(time.perf_counter() - t0, 3),
                "truncated": result.generations < cfg.generations,
            }
        )
        trace.extend({"run": run, "generation": g, "best_fitness": f} for g, f in enumerate(result.trace))
    return CampaignReport(asdict(cfg), rows, trace, time.perf_counter() - started)


def run_attack_campaign(
    cfg: CampaignConfig,
    log_callback: Optional[Callable[[str], None]] = None,
    progress_callback: Optional[Callable[[Dict[str, Any]], None]] = None,
    log_to_console: bool = False,
) -> CampaignReport:
    """Simulate a device, eavesdrop ``sessions`` transcripts and attack them ``runs`` times."""

    def _emit_log(msg: str) -> None:
        if log_to_console:
            print(msg)
        if log_callback is not None:
            try:
                log_callback(msg)
            except Exception:
                pass

    def _emit_progress(event: str, **payload: Any) -> None:
        if progress_callback is None:
            return
        data: Dict[str, Any] = {"phase": "attack", "event": event}
        data.update({k: v for k, v in payload.items() if v is not None})
        try:
            progress_callback(data)
        except Exception:
            pass

    ss = np.random.SeedSequence(cfg.seed)
    if cfg.target == "apuf":
        return _apuf_campaign(cfg, ss, _emit_log)

    started = time.perf_counter()
    dev_seed, data_seed, test_seed, run_root = ss.spawn(4)
    dev = ObPufDevice.generate(
        cfg.k,
        cfg.m,
        cfg.p,
        cfg.n_ins,
        xors=cfg.xors if cfg.target == "reconfigurable" else 0,
        seed=dev_seed,
        reconfigurable=cfg.target == "reconfigurable",
        device_id="target",
    )
    _emit_log(f"Target {cfg.target} OB-PUF({cfg.n_ins},{cfg.p},0) k={cfg.k} m={cfg.m} xors={dev.xors}")
    transcripts = _collect_transcripts(dev, cfg, data_seed)
    test = make_test_set(dev, cfg.test_size, np.random.default_rng(test_seed))
    _emit_log(f"Eavesdropped sessions={len(transcripts)} rounds={cfg.rounds}")

    patterns = dev.base_patterns
    if cfg.target == "fixed":
        c_obs = np.concatenate([_rows(t, "c_ob") for t in transcripts])
        r_obs = np.concatenate([_rows(t, "r_ob") for t in transcripts])
        fixed_data = FixedPatternDataset.build(patterns, c_obs, r_obs)
        total = fixed_data.size

        def make_objective(layout: GenomeLayout) -> Objective:
            return lambda g: fitness_fixed(g, fixed_data, layout.modeled_bits) / total

    else:
        data = AttackDataset.from_transcripts(transcripts, patterns)

        def make_objective(layout: GenomeLayout) -> Objective:
            return lambda g: fitness_reconfigurable(g, data, layout)

    reference = EstimatorInputs(cfg.n_ins, cfg.p, 0)
    threshold = p_min(reference)
    rows: List[Dict[str, Any]] = []
    trace: List[Dict[str, Any]] = []
    include_reconfig = cfg.target == "reconfigurable"
    for run, run_seed in enumerate(run_root.spawn(cfg.runs)):
        t0 = time.perf_counter()
        _emit_progress("start", run=run, runs=cfg.runs)
        options = EsOptions(cfg.population, cfg.generations, cfg.sigma0, time_limit=cfg.time_limit)
        if cfg.mode == "joint":
            layout = layout_for(dev, include_reconfig)

            def _record(generation: int, genome: np.ndarray, best: float, _run: int = run) -> None:
                entry: Dict[str, Any] = {"run": _run, "bit": "all", "generation": generation, "best_fitness": best}
                if cfg.trace_p_pred:
                    entry["p_pred"] = eval_p_pred(genome, dev, test).per_bit
                trace.append(entry)

            seed = int(run_seed.generate_state(1)[0])
            result = cmaes_minimize(make_objective(layout), layout.dim, seed, options, cfg.workers, _record)
            genome, best_fitness, truncated = result.best_genome, result.best_fitness, result.truncated
        else:
            genome, best_fitness, truncated = _per_bit_attack(dev, include_reconfig, make_objective, options, cfg, run_seed, run, trace)
        acc = eval_p_pred(genome, dev, test)
        elapsed = time.perf_counter() - t0
        _emit_log(f"Run {run}: P_pred={acc.per_bit:.4f} fitness={best_fitness:.4f} time={elapsed:.1f}s")
        _emit_progress("done", run=run, runs=cfg.runs, p_pred=acc.per_bit)
        rows.append(
            {
                "target": cfg.target,
                "k": cfg.k,
                "n_ins": cfg.n_ins,
                "p": cfg.p,
                "m": cfg.m,
                "xors": dev.xors,
                "sessions": cfg.sessions,
                "generations": cfg.generations,
                "n": cfg.rounds,
                "mode": cfg.mode,
                "run": run,
                "p_pred": round(acc.per_bit, 6),
                "p_pred_response": round(acc.per_response, 6),
                "p_pred_best_pattern": round(acc.best_pattern_bit, 6),
                "p_min": round(threshold, 6),
                "broken": acc.per_bit >= threshold,
                "best_fitness": round(best_fitness, 6),
                "wall_time_s": round(elapsed, 3),
                "truncated": truncated,
            }
        )
    return CampaignReport(asdict(cfg), rows, trace, time.perf_counter() - started)


def _rows(transcript: Any, attr: str) -> np.ndarray:
    return np.stack(
        [np.frombuffer(getattr(r, attr).encode("ascii"), dtype=np.uint8) - ord("0") for r in transcript.rounds]
    )


def _per_bit_attack(
    dev: ObPufDevice,
    include_reconfig: bool,
    make_objective: Callable[[GenomeLayout], Objective],
    options: EsOptions,
    cfg: CampaignConfig,
    run_seed: np.random.SeedSequence,
    run: int,
    trace: List[Dict[str, Any]],
) -> Tuple[np.ndarray, float, bool]:
    """One CMA-ES per PUF-block bit; the reconfiguration model of the fittest bit run is kept."""
    puf_rows: List[np.ndarray] = []
    best_reconfig: Optional[np.ndarray] = None
    best_fit = math.inf
    truncated = False
    for bit, bit_seed in enumerate(run_seed.spawn(dev.n_ins)):
        layout = layout_for(dev, include_reconfig, bits=(bit,))

        def _record(generation: int, genome: np.ndarray, best: float, _bit: int = bit) -> None:
            trace.append({"run": run, "bit": _bit, "generation": generation, "best_fitness": best})

        result = cmaes_minimize(
            make_objective(layout), layout.dim, int(bit_seed.generate_state(1)[0]), options, cfg.workers, _record
        )
        puf, reconfig = layout.split(result.best_genome)
        puf_rows.append(puf[0])
        truncated = truncated or result.truncated
        if result.best_fitness < best_fit:
            best_fit, best_reconfig = result.best_fitness, reconfig
    full = layout_for(dev, include_reconfig)
    return full.join(np.stack(puf_rows), best_reconfig), best_fit, truncated


__all__ = [
    "AttackDataset",
    "BaselineResult",
    "CampaignConfig",
    "CampaignReport",
    "EsOptions",
    "EsResult",
    "EsState",
    "FitnessCounters",
    "FixedPatternDataset",
    "GenomeLayout",
    "PredictionAccuracy",
    "EvaluationSet",
    "attack_apuf_baseline",
    "cmaes_minimize",
    "eval_p_pred",
    "fitness_fixed",
    "fitness_reconfigurable",
    "genome_from_device",
    "layout_for",
    "make_test_set",
    "prediction_accuracy",
    "run_attack_campaign",
]
