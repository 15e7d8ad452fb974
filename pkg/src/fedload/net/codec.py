"""Binary frame codec for the parameter-server protocol.

Frame layout (all integers little-endian)::

    offset  size  field
    0       4     magic  b"FCW1"
    4       1     msg_type
    5       1     flags (always 0)
    6       4     payload_len (u32)
    10      n     payload
    10+n    4     crc32(payload) (u32)

Payloads by message type::

    1 Join    u32 client_id | u64 layout_hash
    2 Assign  u32 round | u32 cfg_len | cfg_len bytes of canonical JSON
              | u32 d | d x f64
    3 Update  u32 round | u32 client_id | u8 encoding | u32 sample_count
              | u32 dim | body
                dense  (0): u32 count=dim | count x f64
                sparse (1): u32 count | count x u32 index | count x f64
                masked (2): u32 count=dim | count x u64
    4 Ack     u32 round | u8 accepted | u16 reason_len | utf-8 reason
    5 Bye     (empty)
    6 Report  u32 round | u32 client_id | u32 count | count x f64

Only parameter-derived vectors and aggregate error statistics are
serialisable here; there is deliberately no message that carries samples.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from ..errors import BadMagic, CodecError, CrcMismatch, MalformedMessage, Truncated, UnknownType
from ..model import ClientUpdate, ParamVector, layout_from_shapes
from ..privacy import MaskedUpdate, SparseUpdate

MAGIC = b"FCW1"
HEADER = struct.Struct("<4sBBI")
CRC = struct.Struct("<I")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 1 << 30

JOIN, ASSIGN, UPDATE, ACK, BYE, REPORT = 1, 2, 3, 4, 5, 6
ENCODINGS = ("dense", "sparse", "masked")

_U32_MAX = 0xFFFFFFFF
_U64_MAX = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class Join:
    client_id: int
    layout_hash: int


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False).encode("ascii")


@dataclass(frozen=True, eq=False)
class Assign:
    round: int
    config: dict
    params: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, Assign)
            and self.round == other.round
            and canonical_json(self.config) == canonical_json(other.config)
            and np.array_equal(np.asarray(self.params, dtype=np.float64), np.asarray(other.params, dtype=np.float64))
        )


@dataclass(frozen=True, eq=False)
class Update:
    round: int
    client_id: int
    encoding: str
    sample_count: int
    dim: int
    values: np.ndarray
    indices: np.ndarray | None = None

    def __eq__(self, other):
        if not isinstance(other, Update):
            return NotImplemented
        same_idx = (self.indices is None and other.indices is None) or (
            self.indices is not None and other.indices is not None and np.array_equal(self.indices, other.indices)
        )
        return (
            (self.round, self.client_id, self.encoding, self.sample_count, self.dim)
            == (other.round, other.client_id, other.encoding, other.sample_count, other.dim)
            and same_idx
            and self.values.dtype == other.values.dtype
            and np.array_equal(self.values, other.values)
        )

    @classmethod
    def from_payload(cls, round_: int, payload) -> "Update":
        if isinstance(payload, ClientUpdate):
            v = payload.delta.values
            return cls(round_, payload.client_id, "dense", payload.sample_count, v.shape[0], v.astype(np.float64))
        if isinstance(payload, SparseUpdate):
            return cls(round_, payload.client_id, "sparse", payload.sample_count, payload.d, payload.values, payload.indices)
        if isinstance(payload, MaskedUpdate):
            if payload.bits != 64:
                raise ValueError("the wire carries 64-bit mask words only")
            return cls(round_, payload.client_id, "masked", payload.sample_count, payload.d, payload.masked.astype(np.uint64))
        raise TypeError(f"cannot send {type(payload).__name__}")

    def to_payload(self, layout=None, participants=()):
        if self.encoding == "dense":
            layout = layout or layout_from_shapes([("values", (self.dim,))])
            return ClientUpdate(self.client_id, ParamVector(self.values, layout), self.sample_count)
        if self.encoding == "sparse":
            return SparseUpdate(self.dim, self.indices, self.values, self.sample_count, self.client_id)
        return MaskedUpdate(self.client_id, self.values, self.sample_count, 64, tuple(participants))


@dataclass(frozen=True)
class Ack:
    round: int
    accepted: bool
    reason: str = ""


@dataclass(frozen=True)
class Bye:
    pass


@dataclass(frozen=True, eq=False)
class Report:
    round: int
    client_id: int
    stats: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __eq__(self, other):
        return (
            isinstance(other, Report)
            and (self.round, self.client_id) == (other.round, other.client_id)
            and np.array_equal(self.stats, other.stats)
        )


MESSAGE_TYPES = {Join: JOIN, Assign: ASSIGN, Update: UPDATE, Ack: ACK, Bye: BYE, Report: REPORT}


# ---------------------------------------------------------------------------
# encode
# ---------------------------------------------------------------------------


def _u32(v) -> bytes:
    v = int(v)
    if not 0 <= v <= _U32_MAX:
        raise ValueError(f"{v} does not fit in u32")
    return struct.pack("<I", v)


def _f64s(arr) -> bytes:
    a = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("reals on the wire must be finite")
    return a.astype("<f8").tobytes()


def _payload(msg) -> bytes:
    if isinstance(msg, Join):
        if not 0 <= int(msg.layout_hash) <= _U64_MAX:
            raise ValueError("layout_hash does not fit in u64")
        return _u32(msg.client_id) + struct.pack("<Q", int(msg.layout_hash))
    if isinstance(msg, Assign):
        cfg = canonical_json(msg.config)
        p = np.asarray(msg.params, dtype=np.float64).ravel()
        return _u32(msg.round) + _u32(len(cfg)) + cfg + _u32(p.shape[0]) + _f64s(p)
    if isinstance(msg, Update):
        if msg.encoding not in ENCODINGS:
            raise ValueError(f"unknown encoding {msg.encoding!r}")
        if msg.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        head = _u32(msg.round) + _u32(msg.client_id) + bytes([ENCODINGS.index(msg.encoding)]) + _u32(msg.sample_count) + _u32(msg.dim)
        if msg.encoding == "dense":
            if len(msg.values) != msg.dim:
                raise ValueError("dense body length must equal dim")
            return head + _u32(msg.dim) + _f64s(msg.values)
        if msg.encoding == "sparse":
            idx = np.asarray(msg.indices, dtype=np.int64)
            if idx.shape != np.shape(msg.values) or (len(idx) and (idx[0] < 0 or idx[-1] >= msg.dim or np.any(np.diff(idx) <= 0))):
                raise ValueError("sparse indices must be strictly increasing within [0, dim)")
            return head + _u32(len(idx)) + idx.astype("<u4").tobytes() + _f64s(msg.values)
        vals = np.asarray(msg.values)
        if vals.dtype != np.uint64 or len(vals) != msg.dim:
            raise ValueError("masked body must be dim uint64 words")
        return head + _u32(msg.dim) + vals.astype("<u8").tobytes()
    if isinstance(msg, Ack):
        reason = msg.reason.encode("utf-8")
        if len(reason) > 0xFFFF:
            raise ValueError("ack reason too long")
        return _u32(msg.round) + bytes([1 if msg.accepted else 0]) + struct.pack("<H", len(reason)) + reason
    if isinstance(msg, Bye):
        return b""
    if isinstance(msg, Report):
        s = np.asarray(msg.stats, dtype=np.float64).ravel()
        return _u32(msg.round) + _u32(msg.client_id) + _u32(s.shape[0]) + _f64s(s)
    raise TypeError(f"not a protocol message: {type(msg).__name__}")


def encode(msg) -> bytes:
    payload = _payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise ValueError("payload too large")
    return HEADER.pack(MAGIC, MESSAGE_TYPES[type(msg)], 0, len(payload)) + payload + CRC.pack(zlib.crc32(payload))


# ---------------------------------------------------------------------------
# decode
# ---------------------------------------------------------------------------


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise MalformedMessage("payload field runs past the end of the payload")
        out = self.buf[self.pos : self.pos + n].tobytes()
        self.pos += n
        return out

    def u8(self):
        return self.take(1)[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def f64s(self, n):
        a = np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)
        if not np.all(np.isfinite(a)):
            raise MalformedMessage("non-finite real in payload")
        return a

    def done(self):
        if self.pos != len(self.buf):
            raise MalformedMessage(f"{len(self.buf) - self.pos} trailing payload bytes")


def _decode_payload(msg_type: int, payload: bytes):
    r = _Reader(payload)
    if msg_type == JOIN:
        msg = Join(r.u32(), r.u64())
    elif msg_type == ASSIGN:
        rnd = r.u32()
        raw = r.take(r.u32())
        try:
            cfg = json.loads(raw.decode("ascii"))
        except (UnicodeDecodeError, ValueError):
            raise MalformedMessage("config snapshot is not valid JSON") from None
        if not isinstance(cfg, dict):
            raise MalformedMessage("config snapshot must be a JSON object")
        try:
            canon = canonical_json(cfg)
        except ValueError:
            raise MalformedMessage("config snapshot holds non-finite numbers") from None
        if canon != raw:
            raise MalformedMessage("config snapshot is not in canonical form")
        d = r.u32()
        msg = Assign(rnd, cfg, r.f64s(d))
    elif msg_type == UPDATE:
        rnd, cid = r.u32(), r.u32()
        enc = r.u8()
        if enc >= len(ENCODINGS):
            raise MalformedMessage(f"unknown update encoding {enc}")
        count_n, dim = r.u32(), r.u32()
        if count_n < 1:
            raise MalformedMessage("sample_count must be >= 1")
        n = r.u32()
        if enc == 0:
            if n != dim:
                raise MalformedMessage("dense count differs from dim")
            msg = Update(rnd, cid, "dense", count_n, dim, r.f64s(n))
        elif enc == 1:
            if n > dim:
                raise MalformedMessage("more sparse entries than dimensions")
            idx = np.frombuffer(r.take(4 * n), dtype="<u4").astype(np.int64)
            if n and (idx[-1] >= dim or np.any(np.diff(idx) <= 0)):
                raise MalformedMessage("sparse indices must be strictly increasing within [0, dim)")
            msg = Update(rnd, cid, "sparse", count_n, dim, r.f64s(n), idx)
        else:
            if n != dim:
                raise MalformedMessage("masked count differs from dim")
            msg = Update(rnd, cid, "masked", count_n, dim, np.frombuffer(r.take(8 * n), dtype="<u8").astype(np.uint64))
    elif msg_type == ACK:
        rnd = r.u32()
        flag = r.u8()
        if flag > 1:
            raise MalformedMessage("ack flag must be 0 or 1")
        try:
            reason = r.take(r.u16()).decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedMessage("ack reason is not UTF-8") from None
        msg = Ack(rnd, bool(flag), reason)
    elif msg_type == BYE:
        msg = Bye()
    elif msg_type == REPORT:
        rnd, cid = r.u32(), r.u32()
        msg = Report(rnd, cid, r.f64s(r.u32()))
    else:  # pragma: no cover - filtered by the header check
        raise UnknownType(msg_type)
    r.done()
    return msg


def parse_header(header: bytes) -> tuple[int, int]:
    """Validate the 10-byte header; returns ``(msg_type, payload_len)``."""
    if len(header) < len(MAGIC) and header != MAGIC[: len(header)]:
        raise BadMagic(f"bad magic {bytes(header)!r}")
    if len(header) < HEADER_SIZE:
        raise Truncated(f"frame header needs {HEADER_SIZE} bytes, got {len(header)}")
    magic, msg_type, flags, plen = HEADER.unpack(header[:HEADER_SIZE])
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if msg_type not in MESSAGE_TYPES.values():
        raise UnknownType(f"unknown message type {msg_type}")
    if flags != 0:
        raise MalformedMessage(f"reserved flags set: {flags:#x}")
    if plen > MAX_PAYLOAD:
        raise MalformedMessage(f"payload length {plen} exceeds limit")
    return msg_type, plen


def decode_body(msg_type: int, payload: bytes, crc: bytes):
    if CRC.unpack(crc)[0] != zlib.crc32(payload):
        raise CrcMismatch("payload checksum mismatch")
    try:
        return _decode_payload(msg_type, payload)
    except CodecError:
        raise
    except (struct.error, ValueError, TypeError) as exc:
        raise MalformedMessage(str(exc)) from None


def decode(data: bytes):
    """Decode exactly one frame. Every failure raises a :class:`CodecError`."""
    data = bytes(data)
    msg_type, plen = parse_header(data[:HEADER_SIZE])
    end = HEADER_SIZE + plen + CRC.size
    if len(data) < end:
        raise Truncated(f"frame needs {end} bytes, got {len(data)}")
    if len(data) > end:
        raise MalformedMessage(f"{len(data) - end} bytes after the frame")
    return decode_body(msg_type, data[HEADER_SIZE : HEADER_SIZE + plen], data[HEADER_SIZE + plen : end])


def read_exact(stream, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            break
        buf.extend(chunk)
    return bytes(buf)


def read_frame(stream):
    """Read one frame from a binary stream; ``None`` on clean EOF."""
    header = read_exact(stream, HEADER_SIZE)
    if not header:
        return None
    msg_type, plen = parse_header(header)
    rest = read_exact(stream, plen + CRC.size)
    if len(rest) < plen + CRC.size:
        raise Truncated("stream ended inside a frame")
    return decode_body(msg_type, rest[:plen], rest[plen:])
