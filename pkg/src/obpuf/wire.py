"""Byte-exact framing for the server/prover exchange.

Every frame is ``u32 length`` (little-endian, counts the bytes that follow)
then a one-byte message kind and a kind-specific body.  Bit strings are
packed MSB-first and zero-padded to a byte boundary; non-zero padding is
rejected so the encoding is a bijection.  See ``docs/WIRE_PROTOCOL.md``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Union

import numpy as np

KIND_SESSION_INIT = 0x01
KIND_CHALLENGE = 0x02
KIND_RESPONSE = 0x03
KIND_DECISION = 0x04

LENGTH_PREFIX = 4
MAX_FRAME = 1 << 24


class FrameError(ValueError):
    """Malformed frame; ``offset`` is the byte position of the first violation."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _bits_tuple(bits) -> tuple:
    arr = np.asarray(bits, dtype=np.uint8).ravel()
    if arr.size and int(arr.max()) > 1:
        raise ValueError("bit payload must hold only 0/1")
    return tuple(int(b) for b in arr)


@dataclass(frozen=True)
class SessionInit:
    session_id: int
    bit_length: int
    challenges: tuple  # tuple of bit tuples

    def __post_init__(self) -> None:
        object.__setattr__(self, "challenges", tuple(_bits_tuple(c) for c in self.challenges))
        if any(len(c) != self.bit_length for c in self.challenges):
            raise ValueError(f"every reconfiguration challenge must have {self.bit_length} bits")

    def as_array(self) -> np.ndarray:
        return np.array(self.challenges, dtype=np.uint8).reshape(len(self.challenges), self.bit_length)


@dataclass(frozen=True)
class Challenge:
    round: int
    bits: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "bits", _bits_tuple(self.bits))


@dataclass(frozen=True)
class Response:
    round: int
    bits: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "bits", _bits_tuple(self.bits))


@dataclass(frozen=True)
class Decision:
    session_id: int
    accepted: bool
    mismatches: int


Message = Union[SessionInit, Challenge, Response, Decision]


def pack_bits(bits) -> bytes:
    arr = np.asarray(bits, dtype=np.uint8)
    return np.packbits(arr, bitorder="big").tobytes()


def unpack_bits(data: bytes, bit_length: int, offset: int = 0) -> tuple:
    """Inverse of :func:`pack_bits`; ``offset`` only feeds error positions."""
    nbytes = (bit_length + 7) // 8
    if len(data) < nbytes:
        raise FrameError(f"bit payload needs {nbytes} bytes, got {len(data)}", offset + len(data))
    raw = np.frombuffer(data[:nbytes], dtype=np.uint8)
    bits = np.unpackbits(raw, bitorder="big")
    if np.any(bits[bit_length:]):
        raise FrameError("non-zero padding bits", offset + nbytes - 1)
    return tuple(int(b) for b in bits[:bit_length])


def _check_u(value: int, bits: int, what: str) -> None:
    if not 0 <= int(value) < (1 << bits):
        raise ValueError(f"{what}={value} does not fit in u{bits}")


def encode_message(msg: Message) -> bytes:
    if isinstance(msg, SessionInit):
        _check_u(msg.session_id, 32, "session_id")
        _check_u(len(msg.challenges), 16, "challenge count")
        _check_u(msg.bit_length, 16, "bit_length")
        body = struct.pack("<BIHH", KIND_SESSION_INIT, msg.session_id, len(msg.challenges), msg.bit_length)
        body += b"".join(pack_bits(c) for c in msg.challenges)
    elif isinstance(msg, (Challenge, Response)):
        kind = KIND_CHALLENGE if isinstance(msg, Challenge) else KIND_RESPONSE
        _check_u(msg.round, 32, "round")
        _check_u(len(msg.bits), 16, "bit_length")
        body = struct.pack("<BIH", kind, msg.round, len(msg.bits)) + pack_bits(msg.bits)
    elif isinstance(msg, Decision):
        _check_u(msg.session_id, 32, "session_id")
        _check_u(msg.mismatches, 32, "mismatches")
        body = struct.pack("<BIBI", KIND_DECISION, msg.session_id, 1 if msg.accepted else 0, msg.mismatches)
    else:
        raise TypeError(f"not a protocol message: {type(msg).__name__}")
    return struct.pack("<I", len(body)) + body


def _need(frame: bytes, end: int, what: str) -> None:
    if len(frame) < end:
        raise FrameError(f"truncated {what}", len(frame))


def decode_message(frame: bytes) -> Message:
    """Decode exactly one frame; trailing bytes are an error."""
    _need(frame, LENGTH_PREFIX, "length prefix")
    (length,) = struct.unpack_from("<I", frame, 0)
    if length > MAX_FRAME:
        raise FrameError(f"frame length {length} exceeds {MAX_FRAME}", 0)
    end = LENGTH_PREFIX + length
    if len(frame) < end:
        raise FrameError(f"frame declares {length} body bytes, only {len(frame) - LENGTH_PREFIX} present", len(frame))
    if len(frame) > end:
        raise FrameError("trailing bytes after frame", end)
    if length < 1:
        raise FrameError("empty frame body", LENGTH_PREFIX)
    kind = frame[LENGTH_PREFIX]
    pos = LENGTH_PREFIX + 1
    if kind == KIND_SESSION_INIT:
        _need(frame, pos + 8, "SESSION_INIT header")
        session_id, count, bit_length = struct.unpack_from("<IHH", frame, pos)
        pos += 8
        nbytes = (bit_length + 7) // 8
        challenges = []
        for _ in range(count):
            _need(frame, pos + nbytes, "SESSION_INIT challenge")
            challenges.append(unpack_bits(frame[pos : pos + nbytes], bit_length, pos))
            pos += nbytes
        msg: Message = SessionInit(session_id, bit_length, tuple(challenges))
    elif kind in (KIND_CHALLENGE, KIND_RESPONSE):
        _need(frame, pos + 6, "round header")
        round_no, bit_length = struct.unpack_from("<IH", frame, pos)
        pos += 6
        nbytes = (bit_length + 7) // 8
        _need(frame, pos + nbytes, "bit payload")
        bits = unpack_bits(frame[pos : pos + nbytes], bit_length, pos)
        pos += nbytes
        msg = Challenge(round_no, bits) if kind == KIND_CHALLENGE else Response(round_no, bits)
    elif kind == KIND_DECISION:
        _need(frame, pos + 9, "DECISION body")
        session_id, accepted, mismatches = struct.unpack_from("<IBI", frame, pos)
        if accepted not in (0, 1):
            raise FrameError(f"decision flag must be 0 or 1, got {accepted}", pos + 4)
        pos += 9
        msg = Decision(session_id, bool(accepted), mismatches)
    else:
        raise FrameError(f"unknown message kind 0x{kind:02x}", LENGTH_PREFIX)
    if pos != end:
        raise FrameError(f"{end - pos} unexpected bytes in frame body", pos)
    return msg
