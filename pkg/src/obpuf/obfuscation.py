"""Challenge/response obfuscation with latent pattern vectors.

A pattern vector inserts ``m`` bits into a ``k - m`` bit partial challenge
(the insert positions and values) and XORs the ``n_ins`` bit PUF-block
response with a mask.  A device holds ``p`` of them and picks one at
random for every OB-CRP.  Insert positions and masks are fixed when the
device is provisioned; the inserted values are regenerated at every
session boundary from a reconfiguration XOR-APUF.

Pattern indices are zero-based.  Insert positions are 1-based, both in
:class:`PatternVector` and in serialized records.
"""

from __future__ import annotations

import itertools
import math
import threading
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tuning
from .apuf import (
    ApufInstance,
    SeedLike,
    _as_bits,
    challenge_feature,
    eval_xor_apuf,
    make_rng,
    random_challenges,
    sample_apufs,
)


class PatternDesignError(RuntimeError):
    """No candidate pattern set reached the challenge-side FHD bar."""

    def __init__(self, message: str, best_fhd: float) -> None:
        super().__init__(message)
        self.best_fhd = best_fhd


class SessionError(RuntimeError):
    """The device has no open session."""


def _bit_string(bits: Sequence[int]) -> str:
    return "".join("1" if int(b) else "0" for b in bits)


def _parse_bit_string(text: str, what: str) -> Tuple[int, ...]:
    if any(ch not in "01" for ch in text):
        raise ValueError(f"{what} must be a string of 0/1, got {text!r}")
    return tuple(int(ch) for ch in text)


@dataclass(frozen=True)
class PatternVector:
    insert_positions: Tuple[int, ...]
    insert_values: Tuple[int, ...]
    response_mask: Tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "insert_positions", tuple(int(x) for x in self.insert_positions))
        object.__setattr__(self, "insert_values", tuple(int(x) for x in self.insert_values))
        object.__setattr__(self, "response_mask", tuple(int(x) for x in self.response_mask))
        if len(self.insert_values) != len(self.insert_positions):
            raise ValueError("insert_values and insert_positions must have the same length")
        if any(b not in (0, 1) for b in self.insert_values + self.response_mask):
            raise ValueError("pattern bits must be 0 or 1")
        pos = self.insert_positions
        if any(pos[i] >= pos[i + 1] for i in range(len(pos) - 1)):
            raise ValueError(f"insert positions must be strictly ascending, got {pos}")
        if pos and pos[0] < 1:
            raise ValueError(f"insert positions are 1-based, got {pos}")

    @property
    def m(self) -> int:
        return len(self.insert_positions)

    @property
    def n_ins(self) -> int:
        return len(self.response_mask)

    def check(self, k: int, n_ins: int) -> None:
        if self.insert_positions and self.insert_positions[-1] > k:
            raise ValueError(f"insert position {self.insert_positions[-1]} exceeds k={k}")
        if self.n_ins != n_ins:
            raise ValueError(f"response mask has {self.n_ins} bits, expected {n_ins}")

    def with_values(self, values: Sequence[int]) -> "PatternVector":
        return PatternVector(self.insert_positions, tuple(values), self.response_mask)

    def to_record(self) -> Dict[str, Any]:
        return {
            "positions": list(self.insert_positions),
            "values": _bit_string(self.insert_values),
            "mask": _bit_string(self.response_mask),
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "PatternVector":
        return cls(
            tuple(record["positions"]),
            _parse_bit_string(record["values"], "values"),
            _parse_bit_string(record["mask"], "mask"),
        )


@dataclass(frozen=True)
class PatternSet:
    k: int
    m: int
    n_ins: int
    patterns: Tuple[PatternVector, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "patterns", tuple(self.patterns))
        if not self.patterns:
            raise ValueError("a pattern set needs at least one pattern")
        if not 0 <= self.m < self.k:
            raise ValueError(f"need 0 <= m < k, got m={self.m} k={self.k}")
        for pv in self.patterns:
            if pv.m != self.m:
                raise ValueError(f"pattern inserts {pv.m} bits, expected m={self.m}")
            pv.check(self.k, self.n_ins)
        values = [pv.insert_values for pv in self.patterns]
        if len(set(values)) != len(values):
            raise ValueError("insert value strings must be pairwise distinct")
        p = self.p
        lo, hi = p // 2, (p + 1) // 2
        ones = self.masks.sum(axis=0)
        if np.any((ones < lo) | (ones > hi)):
            raise ValueError(f"response mask columns must hold {lo} or {hi} ones across {p} patterns")

    @property
    def p(self) -> int:
        return len(self.patterns)

    @cached_property
    def positions(self) -> np.ndarray:
        """``(p, m)`` 1-based insert positions."""
        return np.array([pv.insert_positions for pv in self.patterns], dtype=np.int64).reshape(self.p, self.m)

    @cached_property
    def values(self) -> np.ndarray:
        return np.array([pv.insert_values for pv in self.patterns], dtype=np.uint8).reshape(self.p, self.m)

    @cached_property
    def masks(self) -> np.ndarray:
        return np.array([pv.response_mask for pv in self.patterns], dtype=np.uint8).reshape(self.p, self.n_ins)

    def with_values(self, values: np.ndarray) -> "PatternSet":
        rows = np.asarray(values, dtype=np.uint8).reshape(self.p, self.m)
        return PatternSet(
            self.k,
            self.m,
            self.n_ins,
            tuple(pv.with_values(row) for pv, row in zip(self.patterns, rows)),
        )

    def to_record(self) -> Dict[str, Any]:
        return {
            "k": self.k,
            "m": self.m,
            "n_ins": self.n_ins,
            "patterns": [pv.to_record() for pv in self.patterns],
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "PatternSet":
        return cls(
            int(record["k"]),
            int(record["m"]),
            int(record["n_ins"]),
            tuple(PatternVector.from_record(r) for r in record["patterns"]),
        )


@dataclass(frozen=True, eq=False)
class ObCrp:
    partial_challenge: np.ndarray
    obfuscated_response: np.ndarray


@dataclass(frozen=True)
class SessionHandle:
    session_id: int
    device_id: str
    healed_strings: int = 0


# ---------------------------------------------------------------------------
# Expansion and masking


def insert_layout(positions: Sequence[int], k: int) -> np.ndarray:
    """Boolean mask of length ``k`` that is True at the (1-based) insert positions."""
    layout = np.zeros(k, dtype=bool)
    pos = np.asarray(positions, dtype=np.int64)
    if pos.size:
        if pos.min() < 1 or pos.max() > k:
            raise ValueError(f"insert positions must lie in [1, {k}], got {pos.tolist()}")
        layout[pos - 1] = True
    if int(layout.sum()) != pos.size:
        raise ValueError(f"insert positions must be distinct, got {pos.tolist()}")
    return layout


def expand_with_values(c_ob: Any, positions: Sequence[int], values: Any) -> np.ndarray:
    """Interleave ``values`` at ``positions`` into one or many partial challenges."""
    bits = _as_bits(c_ob)
    k = bits.shape[-1] + len(positions)
    layout = insert_layout(positions, k)
    out = np.empty(bits.shape[:-1] + (k,), dtype=np.uint8)
    out[..., layout] = np.asarray(values, dtype=np.uint8)
    out[..., ~layout] = bits
    return out


def expand_challenge(c_ob: Any, pv: PatternVector, k: Optional[int] = None) -> np.ndarray:
    bits = _as_bits(c_ob)
    if k is not None and bits.shape[-1] != k - pv.m:
        raise ValueError(f"partial challenge must have {k - pv.m} bits, got {bits.shape[-1]}")
    return expand_with_values(bits, pv.insert_positions, pv.insert_values)


def obfuscate_response(r: Any, pv: PatternVector) -> np.ndarray:
    bits = _as_bits(r)
    if bits.shape[-1] != pv.n_ins:
        raise ValueError(f"response must have {pv.n_ins} bits, got {bits.shape[-1]}")
    return bits ^ np.asarray(pv.response_mask, dtype=np.uint8)


def choose_pattern_index(rng: np.random.Generator, p: int, size: Optional[int] = None) -> Any:
    """Uniform draw in ``[0, p)``, fresh for every OB-CRP."""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if size is None:
        return int(rng.integers(0, p))
    return rng.integers(0, p, size=size)


# ---------------------------------------------------------------------------
# Pattern design


def _hamming(a: int, b: int) -> int:
    return bin(a ^ b).count("1")


def _code_score(words: Sequence[int], m: int) -> Tuple[int, int]:
    if len(words) < 2:
        return (m, 0)
    dists = [_hamming(a, b) for a, b in itertools.combinations(words, 2)]
    return (min(dists), sum(dists))


def value_code(m: int, p: int, rng: Optional[np.random.Generator] = None) -> List[Tuple[int, ...]]:
    """``p`` distinct ``m``-bit strings with maximal minimum pairwise distance.

    Small spaces are searched exhaustively in lexicographic order (first best
    wins); larger ones by restarted local search.  ``rng`` only permutes the
    order in which the code words are handed to patterns.
    """
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if p > 2**m:
        raise ValueError(f"p={p} distinct value strings need m >= {math.ceil(math.log2(p))}, got m={m}")
    rng = rng if rng is not None else make_rng(0)
    space = 2**m
    best: Optional[Tuple[int, ...]] = None
    best_score = (-1, -1)
    if math.comb(space, p) <= tuning.VALUE_CODE_EXHAUSTIVE_LIMIT:
        for words in itertools.combinations(range(space), p):
            score = _code_score(words, m)
            if score > best_score:
                best, best_score = words, score
    else:
        for _ in range(tuning.VALUE_CODE_LOCAL_RESTARTS):
            words = [int(w) for w in rng.choice(space, size=p, replace=False)]
            score = _code_score(words, m)
            improved = True
            while improved:
                improved = False
                for slot in range(p):
                    for cand in range(space):
                        if cand in words:
                            continue
                        trial = words[:slot] + [cand] + words[slot + 1 :]
                        trial_score = _code_score(trial, m)
                        if trial_score > score:
                            words, score, improved = trial, trial_score, True
            if score > best_score:
                best, best_score = tuple(sorted(words)), score
    assert best is not None
    order = rng.permutation(p)
    return [tuple((best[i] >> (m - 1 - b)) & 1 for b in range(m)) for i in order]


def balanced_masks(p: int, n_ins: int, rng: np.random.Generator, attempts: int = 64) -> np.ndarray:
    """``(p, n_ins)`` masks with ``floor(p/2)`` or ``ceil(p/2)`` ones per column.

    Retries a few times to also keep the masks pairwise distinct.
    """
    masks = np.zeros((p, n_ins), dtype=np.uint8)
    for _ in range(attempts):
        masks = np.zeros((p, n_ins), dtype=np.uint8)
        for col in range(n_ins):
            ones = p // 2 if (p % 2 == 0 or col % 2 == 0) else (p + 1) // 2
            masks[rng.permutation(p)[:ones], col] = 1
        if len({m.tobytes() for m in masks}) == p:
            break
    return masks


def _split_positions(k: int, m: int, head: int, rng: np.random.Generator, window: int) -> Tuple[int, ...]:
    head_pos = rng.choice(np.arange(1, window + 1), size=head, replace=False) if head else np.empty(0, int)
    tail_pos = (
        rng.choice(np.arange(k - window + 1, k + 1), size=m - head, replace=False) if m - head else np.empty(0, int)
    )
    return tuple(sorted(int(x) for x in np.concatenate([head_pos, tail_pos])))


def _random_positions(k: int, m: int, rng: np.random.Generator) -> Tuple[int, ...]:
    return tuple(sorted(int(x) for x in rng.choice(np.arange(1, k + 1), size=m, replace=False)))


def candidate_positions(k: int, m: int, p: int, family: str, rng: np.random.Generator) -> List[Tuple[int, ...]]:
    """Per-pattern insert positions for one design candidate.

    ``split`` staggers how many bits each pattern inserts at the head versus
    the tail, so the partial-challenge bits in between land at different
    offsets in every pattern.  ``random`` draws each pattern independently,
    ``shared`` uses one draw for all patterns.
    """
    if m == 0:
        return [()] * p
    if family == "shared":
        return [_random_positions(k, m, rng)] * p
    if family == "random":
        return [_random_positions(k, m, rng) for _ in range(p)]
    if family != "split":
        raise ValueError(f"unknown position family: {family}")
    if k < 2 * m:
        return [_random_positions(k, m, rng) for _ in range(p)]
    window = min(int(rng.integers(m, max(m, k // 4) + 1)), k // 2)
    if p <= m + 1:
        heads = np.unique(np.round(np.linspace(0, m, p)).astype(int))
        if heads.size < p:
            heads = np.sort(rng.choice(m + 1, size=p, replace=False))
    else:
        heads = rng.integers(0, m + 1, size=p)
    heads = rng.permutation(heads)
    return [_split_positions(k, m, int(h), rng, window) for h in heads]


def pattern_divergence(
    pattern_set: PatternSet,
    instances: Sequence[ApufInstance],
    c_obs: np.ndarray,
    values: Optional[np.ndarray] = None,
    masked: bool = False,
) -> Tuple[np.ndarray, np.ndarray]:
    """Per partial challenge, mean pairwise FHD of the ``p`` full challenges and responses.

    ``instances`` are ``k``-stage APUFs evaluated noiselessly on every full
    challenge.  With ``masked`` the responses are XORed with the pattern masks
    first (``instances`` must then be the ``n_ins`` PUF-block members).
    """
    ps = pattern_set if values is None else pattern_set.with_values(values)
    c_obs = _as_bits(c_obs).reshape(-1, pattern_set.k - pattern_set.m)
    full = np.stack([expand_challenge(c_obs, pv) for pv in ps.patterns])
    weights = np.stack([a.omega for a in instances])
    responses = (challenge_feature(full.reshape(-1, ps.k)).astype(np.float64) @ weights.T > 0).astype(np.uint8)
    responses = responses.reshape(ps.p, c_obs.shape[0], len(instances))
    if masked:
        responses = responses ^ ps.masks[:, None, :]
    if ps.p < 2:
        zeros = np.zeros(c_obs.shape[0])
        return zeros, zeros
    pairs = list(itertools.combinations(range(ps.p), 2))
    challenge_fhd = np.mean([np.mean(full[a] != full[b], axis=-1) for a, b in pairs], axis=0)
    response_fhd = np.mean([np.mean(responses[a] != responses[b], axis=-1) for a, b in pairs], axis=0)
    return challenge_fhd, response_fhd


def _assemble(k: int, m: int, n_ins: int, positions, values, masks) -> PatternSet:
    return PatternSet(
        k,
        m,
        n_ins,
        tuple(PatternVector(pos, val, tuple(mask)) for pos, val, mask in zip(positions, values, masks)),
    )


def offset_divergence_cap(p: int, m: int) -> float:
    """Mean pairwise FHD ceiling on the bits no pattern inserts at.

    At each such bit a pattern reads the partial challenge at one of ``m + 1``
    offsets; two patterns on the same offset always agree there, others agree
    half the time.
    """
    if p < 2:
        return 0.0
    bins = [p // (m + 1) + (i < p % (m + 1)) for i in range(m + 1)]
    same = sum(math.comb(b, 2) for b in bins)
    return 0.5 * (1.0 - same / math.comb(p, 2))


@dataclass
class DesignResult:
    pattern_set: PatternSet
    challenge_fhd: float
    response_fhd: float
    family: str
    trials: int


def design_pattern_set(
    k: int,
    m: int,
    p: int,
    n_ins: int,
    seed: SeedLike = None,
    trial_budget: Optional[int] = None,
    score_challenges: Optional[int] = None,
    score_instances: Optional[int] = None,
) -> DesignResult:
    """Randomized search for a pattern set with divergent full challenges and responses.

    Candidates are scored by the Monte Carlo mean pairwise FHD of raw responses
    from simulated APUFs; only candidates whose challenge-side FHD clears
    ``FHD_ACCEPTANCE`` can win.
    """
    if p > 2**m:
        raise ValueError(f"p={p} exceeds the {2**m} distinct {m}-bit value strings")
    if not 0 <= m < k:
        raise ValueError(f"need 0 <= m < k, got m={m} k={k}")
    trial_budget = int(trial_budget or tuning.DESIGN_TRIAL_BUDGET)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    design_seed, score_seed = ss.spawn(2)
    rng = np.random.default_rng(design_seed)
    score_rng = np.random.default_rng(score_seed)
    instances = sample_apufs(int(score_instances or tuning.DESIGN_SCORE_INSTANCES), k, score_rng)
    c_obs = random_challenges(int(score_challenges or tuning.DESIGN_SCORE_CHALLENGES), k - m, score_rng)

    values = value_code(m, p, rng)
    families = ("split", "random", "shared")
    best: Optional[DesignResult] = None
    best_challenge_fhd = 0.0
    for trial in range(trial_budget):
        family = families[trial % len(families)]
        positions = candidate_positions(k, m, p, family, rng)
        masks = balanced_masks(p, n_ins, rng)
        candidate = _assemble(k, m, n_ins, positions, values, masks)
        chal, resp = pattern_divergence(candidate, instances, c_obs)
        chal_mean, resp_mean = float(chal.mean()), float(resp.mean())
        best_challenge_fhd = max(best_challenge_fhd, chal_mean)
        if p > 1 and chal_mean < tuning.FHD_ACCEPTANCE:
            continue
        if best is None or resp_mean > best.response_fhd:
            best = DesignResult(candidate, chal_mean, resp_mean, family, trial + 1)
    if best is None:
        message = (
            f"no candidate reached challenge-side FHD {tuning.FHD_ACCEPTANCE} in {trial_budget} trials "
            f"(best {best_challenge_fhd:.4f})"
        )
        cap = offset_divergence_cap(p, m)
        if cap < tuning.FHD_ACCEPTANCE:
            message += f"; {p} patterns over {m + 1} insert offsets cap the non-inserted bits at {cap:.4f}"
        raise PatternDesignError(message, best_fhd=best_challenge_fhd)
    best.trials = trial_budget
    return best


def adversarial_pattern_set(k: int, m: int, p: int, n_ins: int, seed: SeedLike = None) -> PatternSet:
    """Every pattern inserts at positions ``1..m``; the bad case for divergence.

    Values count upward with position 1 as the least significant bit, so
    pairs differ where the fewest feature terms change.
    """
    if p > 2**m:
        raise ValueError(f"p={p} exceeds the {2**m} distinct {m}-bit value strings")
    rng = make_rng(seed)
    first = tuple(range(1, m + 1))
    values = [tuple((index >> bit) & 1 for bit in range(m)) for index in range(p)]
    return _assemble(k, m, n_ins, [first] * p, values, balanced_masks(p, n_ins, rng))


def _flip_probability(flipped_variance: float, k: int) -> float:
    # omega is Gaussian with total variance 2k; a response flips when the
    # sign-inverted part outweighs the rest.
    rest = 2.0 * k - flipped_variance
    if rest <= 0:
        return 1.0
    return float(2.0 / np.pi * np.arctan(np.sqrt(flipped_variance / rest)))


def _flipped_feature_variance(diff_indices: Sequence[int], k: int) -> float:
    # phi_j flips when an odd number of differing bits sit at or after j;
    # Var(omega_0) = Var(omega_k) = 1, the inner weights have variance 2.
    flips = np.zeros(k + 1, dtype=bool)
    for index in diff_indices:
        flips[: index + 1] ^= True
    variance = np.full(k + 1, 2.0)
    variance[0] = variance[k] = 1.0
    return float(variance[flips].sum())


def shared_position_response_fhd(pattern_set: PatternSet) -> float:
    """Expected mean pairwise response FHD over random APUFs for a shared-position set.

    Only defined when every pattern inserts at the same positions: the full
    challenges of a pair then differ on a fixed index set regardless of the
    partial challenge.
    """
    positions = {pv.insert_positions for pv in pattern_set.patterns}
    if len(positions) != 1:
        raise ValueError("all patterns must share their insert positions")
    if pattern_set.p < 2:
        return 0.0
    (shared,) = positions
    k = pattern_set.k
    probs = []
    for a, b in itertools.combinations(pattern_set.patterns, 2):
        diff = [pos - 1 for pos, x, y in zip(shared, a.insert_values, b.insert_values) if x != y]
        probs.append(_flip_probability(_flipped_feature_variance(diff, k), k))
    return float(np.mean(probs))


def shared_position_response_floor(k: int) -> float:
    """Smallest expected response FHD two distinct shared-position patterns can have.

    Reached when the pair differs only at position 1, which flips ``phi_0``
    alone.
    """
    return _flip_probability(1.0, k)


# ---------------------------------------------------------------------------
# Device


def values_from_bits(bits: np.ndarray, p: int, m: int) -> np.ndarray:
    return np.asarray(bits, dtype=np.uint8).reshape(p, m)


def distinct_values_probability(p: int, m: int) -> float:
    """Chance that ``p`` uniform ``m``-bit strings are pairwise distinct."""
    space = 2**m
    return float(np.prod([max(0.0, 1.0 - i / space) for i in range(p)]))


def has_collision(values: np.ndarray) -> bool:
    rows = [row.tobytes() for row in np.asarray(values, dtype=np.uint8)]
    return len(set(rows)) != len(rows)


def heal_collisions(values: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, int]:
    """Replace value strings that repeat an earlier one with fresh random bits."""
    out = np.array(values, dtype=np.uint8, copy=True)
    p, m = out.shape
    if p > 2**m:
        raise ValueError(f"{p} distinct {m}-bit strings do not exist")
    healed = 0
    while has_collision(out):
        seen = set()
        for row in range(p):
            key = out[row].tobytes()
            if key in seen:
                out[row] = rng.integers(0, 2, size=m, dtype=np.uint8)
                healed += 1
            seen.add(out[row].tobytes())
    return out, healed


@dataclass(eq=False)
class ObPufDevice:
    """``n_ins`` PUF-block APUFs, a reconfiguration XOR-APUF and session registers.

    A fixed-pattern device (``reconfigurable=False``) always uses the insert
    values of ``base_patterns`` and needs no session.
    """

    puf_block: List[ApufInstance]
    reconfig_block: List[ApufInstance]
    base_patterns: PatternSet
    reconfigurable: bool = True
    device_id: str = "device-0"
    session_values: Optional[np.ndarray] = field(default=None, repr=False)
    session_count: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self) -> None:
        ps = self.base_patterns
        if len(self.puf_block) != ps.n_ins:
            raise ValueError(f"puf_block has {len(self.puf_block)} APUFs, patterns expect n_ins={ps.n_ins}")
        if any(a.stage_count != ps.k for a in self.puf_block):
            raise ValueError(f"all PUF-block APUFs must have k={ps.k} stages")
        if any(a.stage_count != ps.k - ps.m for a in self.reconfig_block):
            raise ValueError(f"all reconfiguration APUFs must have k-m={ps.k - ps.m} stages")
        if self.reconfigurable and not self.reconfig_block:
            raise ValueError("a reconfigurable device needs at least one reconfiguration APUF")
        self._weights = np.stack([a.omega for a in self.puf_block])
        self._patterns_cache: Optional[Tuple[bytes, PatternSet]] = None
        self._sigmas = np.array([a.noise_sigma for a in self.puf_block])

    @classmethod
    def generate(
        cls,
        k: int,
        m: int,
        p: int,
        n_ins: int,
        xors: int = 1,
        seed: SeedLike = None,
        noise_sigma: float = 0.0,
        patterns: Optional[PatternSet] = None,
        reconfigurable: bool = True,
        device_id: str = "device-0",
        trial_budget: Optional[int] = None,
    ) -> "ObPufDevice":
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        puf_seed, reconfig_seed, design_seed = ss.spawn(3)
        if patterns is None:
            patterns = design_pattern_set(k, m, p, n_ins, design_seed, trial_budget).pattern_set
        elif (patterns.k, patterns.m, patterns.p, patterns.n_ins) != (k, m, p, n_ins):
            raise ValueError("pattern set parameters do not match the device")
        return cls(
            puf_block=sample_apufs(n_ins, k, puf_seed, noise_sigma),
            reconfig_block=sample_apufs(xors, k - m, reconfig_seed, noise_sigma),
            base_patterns=patterns,
            reconfigurable=reconfigurable,
            device_id=device_id,
        )

    @property
    def k(self) -> int:
        return self.base_patterns.k

    @property
    def m(self) -> int:
        return self.base_patterns.m

    @property
    def p(self) -> int:
        return self.base_patterns.p

    @property
    def n_ins(self) -> int:
        return self.base_patterns.n_ins

    @property
    def xors(self) -> int:
        return len(self.reconfig_block)

    @property
    def session_open(self) -> bool:
        return not self.reconfigurable or self.session_values is not None

    def current_patterns(self) -> PatternSet:
        if not self.reconfigurable:
            return self.base_patterns
        if self.session_values is None:
            raise SessionError(f"{self.device_id}: no open session")
        key = self.session_values.tobytes()
        if self._patterns_cache is None or self._patterns_cache[0] != key:
            self._patterns_cache = (key, self.base_patterns.with_values(self.session_values))
        return self._patterns_cache[1]

    def full_challenges(self, c_obs: np.ndarray) -> np.ndarray:
        """``(p, N, k)`` full challenges under the current patterns."""
        ps = self.current_patterns()
        bits = _as_bits(c_obs).reshape(-1, self.k - self.m)
        return np.stack([expand_challenge(bits, pv) for pv in ps.patterns])

    def candidate_responses(self, c_obs: np.ndarray) -> np.ndarray:
        """Noiseless ``(p, N, n_ins)`` obfuscated responses for every pattern."""
        full = self.full_challenges(c_obs)
        phi = challenge_feature(full.reshape(-1, self.k)).astype(np.float64)
        raw = (phi @ self._weights.T > 0).astype(np.uint8).reshape(self.p, -1, self.n_ins)
        return raw ^ self.base_patterns.masks[:, None, :]

    def evaluate(
        self,
        c_obs: np.ndarray,
        rng: np.random.Generator,
        noisy: bool = False,
        pattern_index: Optional[Any] = None,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Obfuscated responses ``(N, n_ins)`` and the secret pattern indices ``(N,)``.

        ``pattern_index`` forces the pattern choice (simulation hook).
        """
        ps = self.current_patterns()
        bits = _as_bits(c_obs).reshape(-1, self.k - self.m)
        count = bits.shape[0]
        if pattern_index is None:
            idx = choose_pattern_index(rng, ps.p, size=count)
        else:
            idx = np.broadcast_to(np.asarray(pattern_index, dtype=np.int64), (count,)).copy()
            if np.any((idx < 0) | (idx >= ps.p)):
                raise ValueError(f"pattern index out of range [0, {ps.p})")
        full = np.empty((count, self.k), dtype=np.uint8)
        for j, pv in enumerate(ps.patterns):
            rows = idx == j
            if np.any(rows):
                full[rows] = expand_challenge(bits[rows], pv)
        t = challenge_feature(full).astype(np.float64) @ self._weights.T
        if noisy and np.any(self._sigmas > 0):
            t = t + rng.standard_normal(t.shape) * self._sigmas
        raw = (t > 0).astype(np.uint8)
        return raw ^ ps.masks[idx], idx

    def reconfig_bits(self, challenges: np.ndarray, rng: Optional[np.random.Generator], noisy: bool) -> np.ndarray:
        return np.asarray(eval_xor_apuf(self.reconfig_block, challenges, noisy, rng), dtype=np.uint8)


def ob_puf_eval(
    dev: ObPufDevice,
    c_ob: Any,
    rng: np.random.Generator,
    noisy: bool = False,
    pattern_index: Optional[int] = None,
) -> ObCrp:
    """One OB-CRP; the chosen pattern index stays inside the device."""
    bits = _as_bits(c_ob)
    if bits.ndim != 1 or bits.shape[0] != dev.k - dev.m:
        raise ValueError(f"partial challenge must have {dev.k - dev.m} bits")
    r_ob, _ = dev.evaluate(bits, rng, noisy, pattern_index)
    return ObCrp(partial_challenge=bits.copy(), obfuscated_response=r_ob[0])


def reconfigure_session(
    dev: ObPufDevice,
    reconfig_challenges: np.ndarray,
    rng: np.random.Generator,
    noisy: bool = False,
) -> SessionHandle:
    """Regenerate the ``p x m`` inserted values from the reconfiguration block."""
    challenges = _as_bits(reconfig_challenges)
    p, m = dev.p, dev.m
    with dev._lock:
        dev.session_count += 1
        if not dev.reconfigurable:
            return SessionHandle(dev.session_count, dev.device_id)
        if challenges.ndim != 2 or challenges.shape != (p * m, dev.k - m):
            raise ValueError(f"expected {p * m} reconfiguration challenges of {dev.k - m} bits, got {challenges.shape}")
        bits = dev.reconfig_bits(challenges, rng, noisy)
        values, healed = heal_collisions(values_from_bits(bits, p, m), rng)
        dev.session_values = values
        return SessionHandle(dev.session_count, dev.device_id, healed)


def close_session(dev: ObPufDevice) -> None:
    with dev._lock:
        dev.session_values = None


def pattern_agnostic_rate(dev: ObPufDevice, trials: int, rng: np.random.Generator) -> float:
    """Fraction of (partial challenge, APUF) pairs whose raw bit is the same under all patterns."""
    c_obs = random_challenges(trials, dev.k - dev.m, rng)
    raw = dev.candidate_responses(c_obs) ^ dev.base_patterns.masks[:, None, :]
    same = np.all(raw == raw[0], axis=0)
    return float(same.mean())
