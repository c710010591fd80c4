"""Arbiter PUF simulation under the linear additive delay model.

An :class:`ApufInstance` holds four Gaussian delays per stage (top/bottom
path x uncrossed/crossed).  They reduce to a ``k + 1`` weight vector
``omega`` so that the arbiter's delay difference is ``omega . phi(c)`` where
``phi`` is the parity transform of the challenge.  The response is ``1``
iff that difference is strictly positive.

All array-returning helpers accept a single challenge (1-D) or a batch
(2-D, one challenge per row).  Bits are ``uint8`` 0/1, parity vectors are
``int8`` +-1.

Example usage::

    from obpuf.apuf import sample_apuf, eval_response

    puf = sample_apuf(64, seed=1, noise_sigma=0.0)
    bits = eval_response(puf, challenges, noisy=False)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from . import tuning

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator, None]
InstanceGroup = Union["ApufInstance", Sequence["ApufInstance"]]

# Columns of ApufInstance.stage_delays.
TOP_UNCROSSED = 0
BOTTOM_UNCROSSED = 1
TOP_CROSSED = 2  # bottom input -> top output
BOTTOM_CROSSED = 3  # top input -> bottom output


class CalibrationError(RuntimeError):
    """Noise calibration did not reach the requested flip rate."""

    def __init__(self, message: str, best_sigma: float, best_rate: float) -> None:
        super().__init__(message)
        self.best_sigma = best_sigma
        self.best_rate = best_rate


class InsufficientChallengesError(RuntimeError):
    """Fewer reliable challenges qualified than were requested."""

    def __init__(self, message: str, found: int) -> None:
        super().__init__(message)
        self.found = found


def omega_from_stage_delays(stage_delays: np.ndarray) -> np.ndarray:
    """Reduce ``(k, 4)`` stage delays to the ``k + 1`` additive weights."""
    d = np.asarray(stage_delays, dtype=np.float64)
    if d.ndim != 2 or d.shape[1] != 4 or d.shape[0] < 1:
        raise ValueError(f"stage_delays must have shape (k, 4) with k >= 1, got {d.shape}")
    sigma0 = d[:, TOP_UNCROSSED] - d[:, BOTTOM_UNCROSSED]
    sigma1 = d[:, TOP_CROSSED] - d[:, BOTTOM_CROSSED]
    k = d.shape[0]
    omega = np.empty(k + 1, dtype=np.float64)
    omega[0] = (sigma0[0] - sigma1[0]) / 2.0
    omega[1:k] = (sigma0[:-1] + sigma1[:-1] + sigma0[1:] - sigma1[1:]) / 2.0
    omega[k] = (sigma0[-1] + sigma1[-1]) / 2.0
    return omega


@dataclass(frozen=True)
class ApufInstance:
    stage_delays: np.ndarray
    noise_sigma: float = 0.0
    omega: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        delays = np.array(self.stage_delays, dtype=np.float64)
        if not np.all(np.isfinite(delays)):
            raise ValueError("stage_delays must be finite")
        if not (self.noise_sigma >= 0.0 and np.isfinite(self.noise_sigma)):
            raise ValueError(f"noise_sigma must be finite and >= 0, got {self.noise_sigma}")
        delays.setflags(write=False)
        omega = omega_from_stage_delays(delays)
        omega.setflags(write=False)
        object.__setattr__(self, "stage_delays", delays)
        object.__setattr__(self, "noise_sigma", float(self.noise_sigma))
        object.__setattr__(self, "omega", omega)

    @property
    def stage_count(self) -> int:
        return int(self.stage_delays.shape[0])

    def with_noise(self, noise_sigma: float) -> "ApufInstance":
        return ApufInstance(self.stage_delays, noise_sigma)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ApufInstance):
            return NotImplemented
        return self.noise_sigma == other.noise_sigma and np.array_equal(self.stage_delays, other.stage_delays)

    def __hash__(self) -> int:
        return hash((self.stage_delays.tobytes(), self.noise_sigma))


def make_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_apuf(k: int, seed: SeedLike = None, noise_sigma: float = 0.0) -> ApufInstance:
    """Draw a ``k``-stage APUF with i.i.d. standard normal stage delays."""
    if int(k) < 1:
        raise ValueError(f"stage count k must be >= 1, got {k}")
    rng = make_rng(seed)
    return ApufInstance(rng.standard_normal((int(k), 4)), noise_sigma)


def sample_apufs(count: int, k: int, seed: SeedLike = None, noise_sigma: float = 0.0) -> List[ApufInstance]:
    """Draw ``count`` independent instances from spawned child seeds."""
    if isinstance(seed, np.random.Generator):
        return [sample_apuf(k, seed, noise_sigma) for _ in range(int(count))]
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [sample_apuf(k, child, noise_sigma) for child in ss.spawn(int(count))]


def _as_bits(c: Any) -> np.ndarray:
    arr = np.asarray(c)
    if arr.dtype.kind in "US":
        arr = np.array([int(ch) for ch in str(arr)], dtype=np.uint8)
    arr = arr.astype(np.uint8, copy=False)
    if arr.size and int(arr.max(initial=0)) > 1:
        raise ValueError("challenge bits must be 0 or 1")
    return arr


def challenge_feature(c: Any) -> np.ndarray:
    """Parity transform: ``phi[j] = prod_{i >= j} (1 - 2 c_i)``, ``phi[k] = 1``.

    Accepts one challenge or a ``(N, k)`` batch.
    """
    bits = _as_bits(c)
    single = bits.ndim == 1
    batch = bits.reshape(1, -1) if single else bits
    signs = 1 - 2 * batch.astype(np.int8)
    out = np.ones((batch.shape[0], batch.shape[1] + 1), dtype=np.int8)
    if batch.shape[1]:
        out[:, :-1] = np.cumprod(signs[:, ::-1], axis=1, dtype=np.int8)[:, ::-1]
    return out[0] if single else out


def random_challenges(count: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 2, size=(int(count), int(k)), dtype=np.uint8)


def _check_length(a: ApufInstance, bits: np.ndarray) -> None:
    if bits.shape[-1] != a.stage_count:
        raise ValueError(f"challenge length {bits.shape[-1]} does not match stage count {a.stage_count}")


def eval_delay(a: ApufInstance, c: Any, noise_draw: Union[float, np.ndarray] = 0.0) -> Union[float, np.ndarray]:
    """Delay difference ``omega . phi(c) + noise_draw``."""
    bits = _as_bits(c)
    _check_length(a, bits)
    t = challenge_feature(bits) @ a.omega + noise_draw
    return float(t) if np.ndim(t) == 0 else t


def _noise(a: ApufInstance, shape: tuple, noisy: bool, rng: Optional[np.random.Generator]) -> Union[float, np.ndarray]:
    if not noisy or a.noise_sigma == 0.0:
        return 0.0
    if rng is None:
        raise ValueError("noisy evaluation requires an rng")
    return rng.normal(0.0, a.noise_sigma, size=shape)


def response_from_delay(t: Union[float, np.ndarray]) -> Union[int, np.ndarray]:
    """``1`` iff ``t > 0``; a tie at zero answers ``0``."""
    bits = (np.asarray(t) > 0).astype(np.uint8)
    return int(bits) if bits.ndim == 0 else bits


def eval_response(
    a: ApufInstance,
    c: Any,
    noisy: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Union[int, np.ndarray]:
    bits = _as_bits(c)
    _check_length(a, bits)
    return response_from_delay(eval_delay(a, bits, _noise(a, bits.shape[:-1], noisy, rng)))


def eval_xor_apuf(
    instances: Sequence[ApufInstance],
    c: Any,
    noisy: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Union[int, np.ndarray]:
    """XOR of member responses on the same challenge(s)."""
    members = list(instances)
    if not members:
        raise ValueError("XOR-APUF needs at least one member")
    bits = _as_bits(c)
    out = np.zeros(bits.shape[:-1], dtype=np.uint8)
    for member in members:
        out ^= np.asarray(eval_response(member, bits, noisy, rng), dtype=np.uint8)
    return int(out) if out.ndim == 0 else out


def path_delay_difference(a: ApufInstance, c: Any) -> float:
    """Race both signals through every stage and return top minus bottom arrival."""
    bits = _as_bits(c)
    _check_length(a, bits)
    top = bottom = 0.0
    for stage, bit in enumerate(bits):
        d = a.stage_delays[stage]
        if bit:
            top, bottom = bottom + d[TOP_CROSSED], top + d[BOTTOM_CROSSED]
        else:
            top, bottom = top + d[TOP_UNCROSSED], bottom + d[BOTTOM_UNCROSSED]
    return float(top - bottom)


def calibrate_noise(
    k: int,
    target_flip_rate: float,
    trials: Optional[int] = None,
    seed: SeedLike = 0,
    max_iter: Optional[int] = None,
) -> float:
    """Find the noise sigma whose pairwise disagreement rate hits the target.

    Each trial draws a fresh instance and challenge and compares two
    independently noised evaluations.  The noise draws are fixed across the
    bisection so the measured rate is monotone in sigma.
    """
    if target_flip_rate == 0:
        return 0.0
    if not 0.0 < target_flip_rate < 0.5:
        raise ValueError(f"target_flip_rate must be in (0, 0.5), got {target_flip_rate}")
    trials = int(trials or tuning.CALIBRATION_TRIALS)
    max_iter = int(max_iter or tuning.CALIBRATION_MAX_ITER)
    rng = make_rng(seed)
    chunks = []
    for start in range(0, trials, 10_000):
        size = min(10_000, trials - start)
        weights = omega_from_stage_delays_batch(rng.standard_normal((size, int(k), 4)))
        phi = challenge_feature(random_challenges(size, k, rng))
        chunks.append(np.einsum("ij,ij->i", weights, phi.astype(np.float64)))
    t = np.concatenate(chunks)
    z1 = rng.standard_normal(trials)
    z2 = rng.standard_normal(trials)

    def rate(sigma: float) -> float:
        return float(np.mean((t + sigma * z1 > 0) != (t + sigma * z2 > 0)))

    lo, hi = 0.0, 1.0
    while rate(hi) < target_flip_rate:
        hi *= 2.0
        if hi > 1e6:
            raise CalibrationError("noise calibration diverged", best_sigma=hi, best_rate=rate(hi))
    best_sigma, best_rate = hi, rate(hi)
    for _ in range(max_iter):
        mid = (lo + hi) / 2.0
        r = rate(mid)
        if abs(r - target_flip_rate) < abs(best_rate - target_flip_rate):
            best_sigma, best_rate = mid, r
        if r < target_flip_rate:
            lo = mid
        else:
            hi = mid
    if abs(best_rate - target_flip_rate) > tuning.CALIBRATION_REL_TOL * target_flip_rate:
        raise CalibrationError(
            f"noise calibration reached rate {best_rate:.4f} for target {target_flip_rate:.4f}",
            best_sigma=best_sigma,
            best_rate=best_rate,
        )
    return best_sigma


def omega_from_stage_delays_batch(stage_delays: np.ndarray) -> np.ndarray:
    """Vectorized :func:`omega_from_stage_delays` over a leading batch axis."""
    d = np.asarray(stage_delays, dtype=np.float64)
    sigma0 = d[..., TOP_UNCROSSED] - d[..., BOTTOM_UNCROSSED]
    sigma1 = d[..., TOP_CROSSED] - d[..., BOTTOM_CROSSED]
    k = d.shape[-2]
    out = np.empty(d.shape[:-2] + (k + 1,), dtype=np.float64)
    out[..., 0] = (sigma0[..., 0] - sigma1[..., 0]) / 2.0
    out[..., 1:k] = (sigma0[..., :-1] + sigma1[..., :-1] + sigma0[..., 1:] - sigma1[..., 1:]) / 2.0
    out[..., k] = (sigma0[..., -1] + sigma1[..., -1]) / 2.0
    return out


def default_theta(group: InstanceGroup) -> float:
    members = [group] if isinstance(group, ApufInstance) else list(group)
    return tuning.RELIABLE_SIGMA_MULTIPLE * max((m.noise_sigma for m in members), default=0.0)


def reliability_margin(group: InstanceGroup, challenges: np.ndarray) -> np.ndarray:
    """Smallest noiseless ``|t_dif|`` across the group's members, per challenge."""
    members = [group] if isinstance(group, ApufInstance) else list(group)
    if not members:
        raise ValueError("reliability needs at least one member")
    phi = challenge_feature(challenges).astype(np.float64)
    weights = np.stack([m.omega for m in members])
    return np.min(np.abs(phi @ weights.T), axis=-1)


def select_reliable_challenges(
    group: InstanceGroup,
    candidate_count: int,
    theta: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
    count: Optional[int] = None,
) -> np.ndarray:
    """Draw candidates and keep those whose noiseless ``|t_dif| >= theta`` for every member.

    ``theta`` defaults to ``RELIABLE_SIGMA_MULTIPLE`` times the largest member
    noise sigma.  With ``count`` set, exactly that many are returned or
    :class:`InsufficientChallengesError` is raised.
    """
    theta = default_theta(group) if theta is None else float(theta)
    if theta < 0:
        raise ValueError(f"theta must be >= 0, got {theta}")
    members = [group] if isinstance(group, ApufInstance) else list(group)
    k = members[0].stage_count
    if any(m.stage_count != k for m in members):
        raise ValueError("all group members must share the stage count")
    rng = rng if rng is not None else make_rng(None)
    candidates = random_challenges(candidate_count, k, rng)
    kept = candidates[reliability_margin(members, candidates) >= theta]
    if count is not None:
        if kept.shape[0] < count:
            raise InsufficientChallengesError(
                f"only {kept.shape[0]} of {candidate_count} candidates are reliable, {count} requested",
                found=int(kept.shape[0]),
            )
        kept = kept[:count]
    return kept


def apuf_to_record(a: ApufInstance) -> Dict[str, Any]:
    """Flat JSON record; floats survive ``json`` at full binary64 precision."""
    return {
        "k": a.stage_count,
        "stage_delays": [float(x) for x in a.stage_delays.ravel()],
        "noise_sigma": a.noise_sigma,
    }


def apuf_from_record(record: Dict[str, Any]) -> ApufInstance:
    k = int(record["k"])
    flat = np.asarray(record["stage_delays"], dtype=np.float64)
    if flat.size != 4 * k:
        raise ValueError(f"stage_delays must hold {4 * k} values for k={k}, got {flat.size}")
    return ApufInstance(flat.reshape(k, 4), float(record.get("noise_sigma", 0.0)))
