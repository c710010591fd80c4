"""Server enrollment, response recovery and authentication sessions.

Session flow (one session per connection)::

    server -> prover   SESSION_INIT(session_id, p*m reconfiguration challenges)
    server -> prover   CHALLENGE(round, C_OB)        } n times
    prover -> server   RESPONSE(round, R_OB)         }
    server -> prover   DECISION(session_id, accepted, mismatches)

A round mismatches when no emulated candidate lies within ``n_mismatch``
of the returned response; the session is accepted iff the mismatch count
is at most ``n_th``.
"""

from __future__ import annotations

import json
import math
import socket
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tuning
from .apuf import (
    InsufficientChallengesError,
    _as_bits,
    challenge_feature,
    eval_response,
    make_rng,
    random_challenges,
    select_reliable_challenges,
)
from .obfuscation import (
    ObPufDevice,
    PatternSet,
    close_session,
    distinct_values_probability,
    expand_challenge,
    has_collision,
    ob_puf_eval,
    reconfigure_session,
    values_from_bits,
)
from .wire import (
    LENGTH_PREFIX,
    MAX_FRAME,
    Challenge,
    Decision,
    FrameError,
    Message,
    Response,
    SessionInit,
    decode_message,
    encode_message,
)


class EnrollmentError(RuntimeError):
    def __init__(self, message: str, accuracy: float) -> None:
        super().__init__(message)
        self.accuracy = accuracy


class PoolExhaustedError(RuntimeError):
    def __init__(self, message: str, remaining: int) -> None:
        super().__init__(message)
        self.remaining = remaining


class TransportError(RuntimeError):
    """The channel to the prover failed or answered out of protocol."""


def _bit_string(bits: Any) -> str:
    return "".join("1" if int(b) else "0" for b in np.asarray(bits).ravel())


def _parse_bits(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("ascii"), dtype=np.uint8) - ord("0")


@dataclass(frozen=True)
class AuthParams:
    n: int
    n_th: int
    n_mismatch: int = 0

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if not 0 <= self.n_th <= self.n:
            raise ValueError(f"need 0 <= n_th <= n, got n_th={self.n_th} n={self.n}")
        if self.n_mismatch < 0:
            raise ValueError(f"n_mismatch must be >= 0, got {self.n_mismatch}")

    def check(self, n_ins: int) -> None:
        if self.n_mismatch > n_ins:
            raise ValueError(f"n_mismatch={self.n_mismatch} exceeds n_ins={n_ins}")


@dataclass
class RoundRecord:
    round: int
    c_ob: str
    r_ob: str
    matched: bool
    pattern_index: Optional[int]


@dataclass
class SessionTranscript:
    session_id: int
    device_id: str
    reconfig_challenges: List[str]
    rounds: List[RoundRecord] = field(default_factory=list)
    decision: Optional[str] = None
    mismatches: int = 0
    error: Optional[str] = None

    @property
    def accepted(self) -> bool:
        return self.decision == "accept"

    @property
    def aborted(self) -> bool:
        return self.decision is None

    def decide(self, n_th: int, n_mismatch: Optional[int] = None, server: Optional["ServerModel"] = None) -> bool:
        """Re-evaluate the decision for another threshold.

        With ``n_mismatch`` and ``server`` the per-round matching is redone as
        well (the server must still hold this session's inserted values).
        """
        mismatches = self.mismatches
        if n_mismatch is not None and server is not None:
            mismatches = sum(
                recover(_parse_bits(r.c_ob), _parse_bits(r.r_ob), server, n_mismatch) is None for r in self.rounds
            )
        return mismatches <= n_th

    def to_record(self) -> Dict[str, Any]:
        return {
            "session_id": self.session_id,
            "device_id": self.device_id,
            "reconfig_challenges": list(self.reconfig_challenges),
            "rounds": [vars(r).copy() for r in self.rounds],
            "decision": self.decision,
            "mismatches": self.mismatches,
            "error": self.error,
        }

    def to_json_line(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "SessionTranscript":
        return cls(
            session_id=int(record["session_id"]),
            device_id=str(record["device_id"]),
            reconfig_challenges=list(record.get("reconfig_challenges") or []),
            rounds=[RoundRecord(**r) for r in record.get("rounds") or []],
            decision=record.get("decision"),
            mismatches=int(record.get("mismatches", 0)),
            error=record.get("error"),
        )


# ---------------------------------------------------------------------------
# Server model


@dataclass(eq=False)
class ServerModel:
    """Per-device enrolled models, pattern templates and consumption state.

    Methods are not individually thread-safe; :func:`run_session` holds
    ``lock`` for the whole session so one device authenticates at a time.
    """

    device_id: str
    puf_block_models: np.ndarray
    reconfig_models: np.ndarray
    base_patterns: PatternSet
    reliable_pool: np.ndarray
    reconfigurable: bool = True
    round_theta: float = 0.0
    mode: str = "ideal"
    used_log: set = field(default_factory=set)
    pool_cursor: int = 0
    next_session_id: int = 1
    session_values: Optional[np.ndarray] = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _patterns_cache: Optional[Tuple[bytes, PatternSet]] = field(default=None, repr=False)

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
    def pool_remaining(self) -> int:
        return int(self.reliable_pool.shape[0]) - self.pool_cursor

    def current_patterns(self, values: Optional[np.ndarray] = None) -> PatternSet:
        if not self.reconfigurable:
            return self.base_patterns
        values = self.session_values if values is None else values
        if values is None:
            raise ValueError(f"{self.device_id}: no session values derived")
        key = np.asarray(values, dtype=np.uint8).tobytes()
        cached = self._patterns_cache
        if cached is None or cached[0] != key:
            cached = (key, self.base_patterns.with_values(values))
            self._patterns_cache = cached
        return cached[1]

    def derive_session_values(self, challenges: np.ndarray) -> np.ndarray:
        """Inserted values the device will compute from these reconfiguration challenges."""
        if not self.reconfigurable:
            return self.base_patterns.values
        t = challenge_feature(challenges).astype(np.float64) @ self.reconfig_models.T
        bits = np.bitwise_xor.reduce((t > 0).astype(np.uint8), axis=1)
        return values_from_bits(bits, self.p, self.m)

    def take_reconfig_challenges(self) -> np.ndarray:
        """Consume the next ``p*m`` pool entries whose derived values do not collide."""
        need = self.p * self.m
        if not self.reconfigurable or need == 0:
            return np.zeros((0, self.k - self.m), dtype=np.uint8)
        while True:
            if self.pool_remaining < need:
                raise PoolExhaustedError(
                    f"{self.device_id}: reliable pool has {self.pool_remaining} entries, {need} needed",
                    remaining=self.pool_remaining,
                )
            group = self.reliable_pool[self.pool_cursor : self.pool_cursor + need]
            self.pool_cursor += need
            if not has_collision(self.derive_session_values(group)):
                return group

    def emulate(self, c_obs: np.ndarray, values: Optional[np.ndarray] = None) -> np.ndarray:
        """Noiseless ``(p, N, n_ins)`` candidate obfuscated responses."""
        ps = self.current_patterns(values)
        bits = _as_bits(c_obs).reshape(-1, self.k - self.m)
        full = np.stack([expand_challenge(bits, pv) for pv in ps.patterns])
        t = challenge_feature(full.reshape(-1, self.k)).astype(np.float64) @ self.puf_block_models.T
        raw = (t > 0).astype(np.uint8).reshape(ps.p, -1, self.n_ins)
        return raw ^ ps.masks[:, None, :]

    def round_margin(self, c_obs: np.ndarray, values: Optional[np.ndarray] = None) -> np.ndarray:
        """Smallest ``|t_dif|`` over every pattern and PUF-block model, per partial challenge."""
        ps = self.current_patterns(values)
        full = np.stack([expand_challenge(c_obs, pv) for pv in ps.patterns])
        t = challenge_feature(full.reshape(-1, self.k)).astype(np.float64) @ self.puf_block_models.T
        return np.abs(t).reshape(ps.p, -1, self.n_ins).min(axis=(0, 2))

    def fresh_partial_challenge(self, rng: np.random.Generator, reliable: bool = False) -> np.ndarray:
        """A partial challenge never issued before; recorded in ``used_log``.

        Raises :class:`InsufficientChallengesError` when ``ROUND_CANDIDATE_ATTEMPTS``
        batches yield nothing usable.
        """
        width = self.k - self.m
        attempts = tuning.ROUND_CANDIDATE_ATTEMPTS
        for _ in range(attempts):
            batch = random_challenges(tuning.ROUND_CANDIDATE_BATCH if reliable else 1, width, rng)
            if reliable:
                batch = batch[self.round_margin(batch) >= self.round_theta]
            for c_ob in batch:
                key = np.packbits(c_ob).tobytes()
                if key not in self.used_log:
                    self.used_log.add(key)
                    return c_ob
        kind = f"reliable (margin >= {self.round_theta:.4g}) " if reliable else ""
        raise InsufficientChallengesError(
            f"{self.device_id}: no fresh {kind}partial challenge found in {attempts} batches", found=0
        )

    def to_record(self) -> Dict[str, Any]:
        return {
            "device_id": self.device_id,
            "mode": self.mode,
            "reconfigurable": self.reconfigurable,
            "patterns": self.base_patterns.to_record(),
            "puf_block_models": [[float(x) for x in row] for row in self.puf_block_models],
            "reconfig_models": [[float(x) for x in row] for row in self.reconfig_models],
            "reliable_pool": [_bit_string(c) for c in self.reliable_pool],
            "pool_cursor": self.pool_cursor,
            "round_theta": self.round_theta,
            "next_session_id": self.next_session_id,
            "used_log": sorted(_bit_string(np.unpackbits(np.frombuffer(key, dtype=np.uint8))[: self.k - self.m])
                               for key in self.used_log),
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "ServerModel":
        patterns = PatternSet.from_record(record["patterns"])
        width = patterns.k - patterns.m
        pool = np.array([_parse_bits(c) for c in record.get("reliable_pool") or []], dtype=np.uint8)
        model = cls(
            device_id=str(record["device_id"]),
            puf_block_models=np.asarray(record["puf_block_models"], dtype=np.float64).reshape(patterns.n_ins, -1),
            reconfig_models=np.asarray(record.get("reconfig_models") or [], dtype=np.float64).reshape(-1, width + 1),
            base_patterns=patterns,
            reliable_pool=pool.reshape(-1, width),
            reconfigurable=bool(record.get("reconfigurable", True)),
            round_theta=float(record.get("round_theta", 0.0)),
            mode=str(record.get("mode", "ideal")),
            pool_cursor=int(record.get("pool_cursor", 0)),
            next_session_id=int(record.get("next_session_id", 1)),
        )
        model.used_log = {np.packbits(_parse_bits(c)).tobytes() for c in record.get("used_log") or []}
        return model


def recover(
    c_ob: Any,
    r_ob: Any,
    model: ServerModel,
    n_mismatch: int,
    values: Optional[np.ndarray] = None,
) -> Optional[int]:
    """Smallest pattern index whose emulated response is within ``n_mismatch`` of ``r_ob``."""
    candidates = model.emulate(_as_bits(c_ob).reshape(1, -1), values)[:, 0, :]
    dist = np.count_nonzero(candidates != _as_bits(r_ob)[None, :], axis=1)
    hits = np.flatnonzero(dist <= n_mismatch)
    return int(hits[0]) if hits.size else None


# ---------------------------------------------------------------------------
# Enrollment


def reconfig_pool_size(p: int, m: int, sessions: int) -> int:
    """Pool entries for ``sessions`` sessions, given that colliding groups are discarded."""
    if p * m == 0:
        return 0
    groups = math.ceil(tuning.POOL_GROUP_MARGIN * sessions / distinct_values_probability(p, m))
    return (groups + tuning.POOL_SPARE_GROUPS) * p * m


def _learned_pool(
    dev: ObPufDevice,
    models: np.ndarray,
    pool_size: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Pool from learned reconfiguration models, confirmed by repeated reads of the device."""
    width = dev.k - dev.m
    kept: List[np.ndarray] = []
    while sum(len(x) for x in kept) < pool_size:
        cand = random_challenges(pool_size * tuning.RELIABLE_CANDIDATE_FACTOR, width, rng)
        t = challenge_feature(cand).astype(np.float64) @ models.T
        z = np.min(np.abs(t) / (t.std(axis=0) + 1e-12), axis=1)
        cand, t = cand[z >= tuning.LEARNED_MARGIN_Z], t[z >= tuning.LEARNED_MARGIN_Z]
        predicted = np.bitwise_xor.reduce((t > 0).astype(np.uint8), axis=1)
        stable = np.ones(cand.shape[0], dtype=bool)
        for _ in range(tuning.LEARNED_STABILITY_REPEATS):
            stable &= dev.reconfig_bits(cand, rng, noisy=True) == predicted
        kept.append(cand[stable])
    return np.concatenate(kept)[:pool_size]


def enroll(
    dev: ObPufDevice,
    mode: str = "ideal",
    pool_size: Optional[int] = None,
    theta: Optional[float] = None,
    seed: Any = None,
    crps: Optional[int] = None,
    generations: Optional[int] = None,
    log_callback: Optional[Callable[[str], None]] = None,
) -> ServerModel:
    """Build the server-side model of ``dev`` during the enrollment phase.

    ``ideal`` copies the true delay vectors.  ``learned`` fits every APUF from
    direct noiseless CRPs with the single-APUF CMA-ES attack and requires
    ``LEARNED_ENROLL_ACCURACY`` on held-out CRPs.
    """
    rng = make_rng(seed)
    pool_size = int(pool_size if pool_size is not None else dev.p * dev.m * tuning.RELIABLE_POOL_FACTOR)

    def _log(msg: str) -> None:
        if log_callback is not None:
            try:
                log_callback(msg)
            except Exception:
                pass

    if mode == "ideal":
        puf_models = np.stack([a.omega for a in dev.puf_block])
        reconfig_models = (
            np.stack([a.omega for a in dev.reconfig_block])
            if dev.reconfig_block
            else np.zeros((0, dev.k - dev.m + 1))
        )
    elif mode == "learned":
        from .attack import EsOptions, attack_apuf_baseline

        count = int(crps or tuning.LEARNED_ENROLL_CRPS)
        options = EsOptions(generations=int(generations or tuning.LEARNED_ENROLL_GENERATIONS))
        learned: List[np.ndarray] = []
        for label, instance in [(f"puf[{i}]", a) for i, a in enumerate(dev.puf_block)] + [
            (f"reconfig[{i}]", a) for i, a in enumerate(dev.reconfig_block)
        ]:
            challenges = random_challenges(count, instance.stage_count, rng)
            responses = np.asarray(eval_response(instance, challenges), dtype=np.uint8)
            result = attack_apuf_baseline(challenges, responses, instance.stage_count, options, int(rng.integers(2**31)))
            _log(f"Enrolled {dev.device_id} {label}: holdout accuracy={result.accuracy:.4f}")
            if result.accuracy < tuning.LEARNED_ENROLL_ACCURACY:
                raise EnrollmentError(
                    f"{dev.device_id} {label}: learned model reached {result.accuracy:.4f} "
                    f"< {tuning.LEARNED_ENROLL_ACCURACY}",
                    accuracy=result.accuracy,
                )
            learned.append(result.model)
        puf_models = np.stack(learned[: dev.n_ins])
        reconfig_models = np.stack(learned[dev.n_ins :]) if dev.reconfig_block else np.zeros((0, dev.k - dev.m + 1))
    else:
        raise ValueError(f"unknown enrollment mode {mode!r}, expected 'ideal' or 'learned'")

    if not dev.reconfigurable or dev.m == 0:
        pool = np.zeros((0, dev.k - dev.m), dtype=np.uint8)
    elif mode == "ideal":
        pool = select_reliable_challenges(
            dev.reconfig_block,
            pool_size * tuning.RELIABLE_CANDIDATE_FACTOR,
            theta,
            rng,
            count=pool_size,
        )
    else:
        pool = _learned_pool(dev, reconfig_models, pool_size, rng)

    if mode == "ideal":
        round_theta = tuning.ROUND_RELIABLE_SIGMA_MULTIPLE * max(a.noise_sigma for a in dev.puf_block)
    else:
        round_theta = 0.0
    _log(f"Enrolled {dev.device_id}: mode={mode} pool={pool.shape[0]} round_theta={round_theta:.4f}")
    return ServerModel(
        device_id=dev.device_id,
        puf_block_models=puf_models,
        reconfig_models=reconfig_models,
        base_patterns=dev.base_patterns,
        reliable_pool=pool,
        reconfigurable=dev.reconfigurable,
        round_theta=round_theta,
        mode=mode,
    )


# ---------------------------------------------------------------------------
# Prover side and channels


@dataclass(eq=False)
class Prover:
    device: ObPufDevice
    rng: np.random.Generator
    noisy: bool = True

    def handle(self, msg: Message) -> Optional[Message]:
        if isinstance(msg, SessionInit):
            reconfigure_session(self.device, msg.as_array(), self.rng, self.noisy)
            return None
        if isinstance(msg, Challenge):
            crp = ob_puf_eval(self.device, np.array(msg.bits, dtype=np.uint8), self.rng, self.noisy)
            return Response(msg.round, tuple(int(b) for b in crp.obfuscated_response))
        if isinstance(msg, Decision):
            close_session(self.device)
            return None
        raise TransportError(f"prover cannot handle {type(msg).__name__}")


def _expects_reply(msg: Message) -> bool:
    return isinstance(msg, Challenge)


class InProcessChannel:
    """Runs the prover in the caller's thread; frames still go through the codec."""

    def __init__(self, prover: Prover) -> None:
        self.prover = prover

    def exchange(self, msg: Message) -> Optional[Message]:
        reply = self.prover.handle(decode_message(encode_message(msg)))
        return None if reply is None else decode_message(encode_message(reply))

    def close(self) -> None:
        pass

    def __enter__(self) -> "InProcessChannel":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


def _recv_exact(sock: socket.socket, count: int) -> bytes:
    chunks = bytearray()
    while len(chunks) < count:
        chunk = sock.recv(count - len(chunks))
        if not chunk:
            raise TransportError(f"connection closed after {len(chunks)} of {count} bytes")
        chunks.extend(chunk)
    return bytes(chunks)


def read_frame(sock: socket.socket) -> bytes:
    prefix = _recv_exact(sock, LENGTH_PREFIX)
    length = int.from_bytes(prefix, "little")
    if length > MAX_FRAME:
        raise FrameError(f"frame length {length} exceeds {MAX_FRAME}", 0)
    return prefix + _recv_exact(sock, length)


class SocketChannel:
    """TCP loopback channel; the prover serves one connection in a background thread."""

    def __init__(self, prover: Prover, host: str = "127.0.0.1", timeout: float = 30.0) -> None:
        self.prover = prover
        self._listener = socket.create_server((host, 0))
        self._listener.settimeout(timeout)
        self.server_error: Optional[BaseException] = None
        self._thread = threading.Thread(target=self._serve, name="obpuf-prover", daemon=True)
        self._thread.start()
        self._sock = socket.create_connection(self._listener.getsockname()[:2], timeout=timeout)

    def _serve(self) -> None:
        try:
            conn, _ = self._listener.accept()
        except OSError as exc:
            self.server_error = exc
            return
        with conn:
            try:
                while True:
                    msg = decode_message(read_frame(conn))
                    reply = self.prover.handle(msg)
                    if reply is not None:
                        conn.sendall(encode_message(reply))
                    if isinstance(msg, Decision):
                        return
            except TransportError:
                return
            except Exception as exc:  # surfaced to the server as a closed connection
                self.server_error = exc

    def exchange(self, msg: Message) -> Optional[Message]:
        try:
            self._sock.sendall(encode_message(msg))
            if not _expects_reply(msg):
                return None
            return decode_message(read_frame(self._sock))
        except OSError as exc:
            raise TransportError(f"socket failure: {exc}") from exc

    def close(self) -> None:
        try:
            self._sock.close()
        finally:
            self._listener.close()
            self._thread.join(timeout=5.0)

    def __enter__(self) -> "SocketChannel":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


def open_channel(transport: str, prover: Prover):
    if transport == "inproc":
        return InProcessChannel(prover)
    if transport == "socket":
        return SocketChannel(prover)
    raise ValueError(f"unknown transport {transport!r}, expected 'inproc' or 'socket'")


# ---------------------------------------------------------------------------
# Sessions


def run_session(
    server: ServerModel,
    channel: Any,
    params: AuthParams,
    rng: np.random.Generator,
    reliable_rounds: bool = False,
) -> SessionTranscript:
    """Authenticate once over ``channel``.

    Transport failures end the session early with ``decision=None`` and the
    error recorded; reliable-pool exhaustion raises before anything is sent.
    Running out of fresh round challenges raises
    :class:`InsufficientChallengesError`.
    """
    params.check(server.n_ins)
    with server.lock:
        challenges = server.take_reconfig_challenges()
        values = server.derive_session_values(challenges)
        server.session_values = values
        session_id = server.next_session_id
        server.next_session_id += 1
        transcript = SessionTranscript(session_id, server.device_id, [_bit_string(c) for c in challenges])
        try:
            channel.exchange(SessionInit(session_id, server.k - server.m, tuple(map(tuple, challenges))))
            mismatches = 0
            for round_no in range(params.n):
                c_ob = server.fresh_partial_challenge(rng, reliable_rounds)
                reply = channel.exchange(Challenge(round_no, tuple(int(b) for b in c_ob)))
                if not isinstance(reply, Response) or reply.round != round_no or len(reply.bits) != server.n_ins:
                    raise TransportError(f"round {round_no}: unexpected reply {reply!r}")
                r_ob = np.array(reply.bits, dtype=np.uint8)
                idx = recover(c_ob, r_ob, server, params.n_mismatch, values)
                mismatches += idx is None
                transcript.rounds.append(RoundRecord(round_no, _bit_string(c_ob), _bit_string(r_ob), idx is not None, idx))
            transcript.mismatches = mismatches
            accepted = mismatches <= params.n_th
            channel.exchange(Decision(session_id, accepted, mismatches))
            transcript.decision = "accept" if accepted else "reject"
        except (TransportError, FrameError, OSError) as exc:
            transcript.mismatches = sum(not r.matched for r in transcript.rounds)
            transcript.error = str(exc)
    return transcript


@dataclass
class PopulationJob:
    """Sessions against one server model; ``attempts`` holds (label, prover device, sessions)."""

    server: ServerModel
    attempts: List[Tuple[str, ObPufDevice, int]]


def run_population(
    jobs: Sequence[PopulationJob],
    params: AuthParams,
    seed: Any,
    transport: str = "inproc",
    noisy: bool = True,
    reliable_rounds: bool = False,
    workers: int = 1,
    progress_callback: Optional[Callable[[Dict[str, Any]], None]] = None,
) -> List[Tuple[str, SessionTranscript]]:
    """Run every job's sessions; jobs run concurrently, each job's sessions in order.

    Every job owns RNG streams spawned from ``seed`` by job index, so the
    transcripts do not depend on ``workers`` or scheduling.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(len(jobs))
    done_lock = threading.Lock()
    done = [0]

    def _run(index: int) -> List[Tuple[str, SessionTranscript]]:
        job = jobs[index]
        server_seed, prover_seed = children[index].spawn(2)
        server_rng = np.random.default_rng(server_seed)
        prover_rng = np.random.default_rng(prover_seed)
        out: List[Tuple[str, SessionTranscript]] = []
        for label, device, sessions in job.attempts:
            prover = Prover(device, prover_rng, noisy)
            for _ in range(sessions):
                with open_channel(transport, prover) as channel:
                    out.append((label, run_session(job.server, channel, params, server_rng, reliable_rounds)))
        if progress_callback is not None:
            with done_lock:
                done[0] += 1
                event = {"phase": "protocol", "event": "progress", "jobs_done": done[0], "jobs_total": len(jobs)}
            try:
                progress_callback(event)
            except Exception:
                pass
        return out

    results: List[List[Tuple[str, SessionTranscript]]]
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run, range(len(jobs))))
    else:
        results = [_run(i) for i in range(len(jobs))]
    return [item for chunk in results for item in chunk]
