"""Update transforms applied on the client before upload.

Pipeline order is fixed: clip -> gaussian noise -> (top-k sparsify | secure mask).
Sparsification and secure masking are mutually exclusive: masking a sparse
vector would reveal its support.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _rng
from .errors import MissingPairSeed, ParticipantMissing, PrivacyError
from .model import ClientUpdate, ParamVector, layout_from_shapes

# Every Update frame carries:
#   frame  magic(4) type(1) flags(1) payload_len(4) ... crc32(4)   = 14
#   fields round(4) client_id(4) encoding(1) sample_count(4) dim(4) = 17
#   body   u32 element count                                       = 4
FRAME_OVERHEAD = 14
UPDATE_FIELDS = 17
UPDATE_HEADER_BYTES = FRAME_OVERHEAD + UPDATE_FIELDS + 4
DENSE_ENTRY = 8
SPARSE_ENTRY = 4 + 8

DEFAULT_QUANT_SCALE = float(2**20)


@dataclass(frozen=True)
class PrivacyConfig:
    """Client-side privacy and compression knobs.

    ``noise_multiplier`` z gives a per-coordinate noise std of ``z * clip_norm``.
    """

    clip_norm: float | None = None
    noise_multiplier: float = 0.0
    secure_agg: bool = False
    topk_ratio: float | None = None
    mask_bits: int = 64
    quant_scale: float = DEFAULT_QUANT_SCALE
    pair_secret: int = 0

    def __post_init__(self):
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise PrivacyError("clip_norm must be positive")
        if self.noise_multiplier < 0:
            raise PrivacyError("noise_multiplier must be >= 0")
        if self.noise_multiplier > 0 and self.clip_norm is None:
            raise PrivacyError("noise requires clip_norm (noise std is z * clip_norm)")
        if self.topk_ratio is not None and not 0 < self.topk_ratio <= 1:
            raise PrivacyError("topk_ratio must lie in (0, 1]")
        if self.secure_agg and self.topk_ratio is not None:
            raise PrivacyError("top-k sparsification and secure aggregation are mutually exclusive")
        if self.mask_bits % 8 or not 16 <= self.mask_bits <= 64:
            raise PrivacyError("mask_bits must be a multiple of 8 in [16, 64]")
        if not self.quant_scale > 0:
            raise PrivacyError("quant_scale must be positive")

    @property
    def noise_sigma(self) -> float:
        return self.noise_multiplier * self.clip_norm if self.clip_norm is not None else 0.0

    def to_dict(self):
        return {
            "clip_norm": self.clip_norm,
            "noise_multiplier": self.noise_multiplier,
            "secure_agg": self.secure_agg,
            "topk_ratio": self.topk_ratio,
            "mask_bits": self.mask_bits,
            "quant_scale": self.quant_scale,
        }


# ---------------------------------------------------------------------------
# differential privacy
# ---------------------------------------------------------------------------


def clip_update(delta: ParamVector, clip_norm: float) -> ParamVector:
    """Scale ``delta`` to L2 norm at most ``clip_norm``."""
    if not clip_norm > 0:
        raise PrivacyError("clip_norm must be positive")
    norm = delta.norm()
    if norm <= clip_norm:
        return delta
    out = delta.values * (clip_norm / norm)
    # rounding can leave the norm one ulp above the bound; shrink until it is not
    while np.linalg.norm(out) > clip_norm:
        out = out * (1.0 - 2.0**-52)
    return delta.with_values(out)


def add_gaussian_noise(delta: ParamVector, sigma: float, rng: np.random.Generator) -> ParamVector:
    if sigma < 0:
        raise PrivacyError("sigma must be >= 0")
    if sigma == 0:
        return delta
    return delta.with_values(delta.values + rng.normal(0.0, sigma, size=delta.dim))


def privatize(update: ClientUpdate, cfg: PrivacyConfig, rng: np.random.Generator) -> ClientUpdate:
    """Clip then add noise. Identity when neither is configured."""
    delta = update.delta
    if cfg.clip_norm is not None:
        delta = clip_update(delta, cfg.clip_norm)
    if cfg.noise_sigma > 0:
        delta = add_gaussian_noise(delta, cfg.noise_sigma, rng)
    if delta is update.delta:
        return update
    return ClientUpdate(update.client_id, delta, update.sample_count)


# ---------------------------------------------------------------------------
# top-k sparsification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SparseUpdate:
    d: int
    indices: np.ndarray
    values: np.ndarray
    sample_count: int = 1
    client_id: int = 0

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        if idx.shape != vals.shape or idx.ndim != 1:
            raise ValueError("indices and values must be 1-D and equally long")
        if len(idx) and (idx[0] < 0 or idx[-1] >= self.d or np.any(np.diff(idx) <= 0)):
            raise ValueError("indices must be strictly increasing within [0, d)")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)

    @property
    def k(self):
        return len(self.indices)

    def __eq__(self, other):
        if not isinstance(other, SparseUpdate):
            return NotImplemented
        return (
            self.d == other.d
            and self.sample_count == other.sample_count
            and self.client_id == other.client_id
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )


def topk_count(d: int, ratio: float) -> int:
    # the epsilon absorbs products like 0.1 * 1000 = 100.00000000000001
    return min(d, max(1, math.ceil(ratio * d - 1e-9)))


def sparsify_topk(delta: ParamVector, ratio: float, sample_count: int = 1, client_id: int = 0) -> SparseUpdate:
    """Keep the ``ceil(ratio*d)`` largest-magnitude coordinates.

    Ties in magnitude go to the lower index.
    """
    if not 0 < ratio <= 1:
        raise PrivacyError("ratio must lie in (0, 1]")
    v = delta.values
    k = topk_count(v.shape[0], ratio)
    order = np.lexsort((np.arange(v.shape[0]), -np.abs(v)))
    keep = np.sort(order[:k])
    return SparseUpdate(v.shape[0], keep, v[keep], sample_count, client_id)


def densify(sparse: SparseUpdate, layout=None) -> ParamVector:
    if layout is None:
        layout = layout_from_shapes([("values", (sparse.d,))])
    out = np.zeros(sparse.d)
    out[sparse.indices] = sparse.values
    return ParamVector(out, layout)


# ---------------------------------------------------------------------------
# pairwise-mask secure aggregation (honest-but-curious, no dropouts)
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MaskedUpdate:
    client_id: int
    masked: np.ndarray
    sample_count: int = 1
    bits: int = 64
    participants: tuple[int, ...] = field(default=())

    def __eq__(self, other):
        if not isinstance(other, MaskedUpdate):
            return NotImplemented
        return (
            self.client_id == other.client_id
            and self.sample_count == other.sample_count
            and self.bits == other.bits
            and np.array_equal(self.masked, other.masked)
        )

    @property
    def d(self):
        return self.masked.shape[0]


def pair_seeds_for(participants, secret: int, round_: int) -> dict[tuple[int, int], int]:
    """Derive one shared seed per unordered pair from a secret the server lacks."""
    ids = sorted(participants)
    return {
        (a, b): _rng.derive_seed(secret, round_, a, b, _rng.PAIR)
        for n, a in enumerate(ids)
        for b in ids[n + 1 :]
    }


def _prg(seed: int, d: int) -> np.ndarray:
    return np.random.PCG64(np.random.SeedSequence(int(seed))).random_raw(d).astype(np.uint64)


def quantize(values, q: float) -> np.ndarray:
    return np.rint(np.asarray(values, dtype=np.float64) * q).astype(np.int64)


def _modmask(bits):
    return np.uint64((1 << bits) - 1) if bits < 64 else np.uint64(0xFFFFFFFFFFFFFFFF)


def mask_one(
    client_id: int,
    values,
    participants,
    pair_seeds: dict[tuple[int, int], int],
    q: float = DEFAULT_QUANT_SCALE,
    bits: int = 64,
    sample_count: int = 1,
) -> MaskedUpdate:
    """Client-side half of :func:`secure_mask` for a single participant."""
    if not q > 0:
        raise PrivacyError("q must be positive")
    ids = tuple(sorted(participants))
    if client_id not in ids:
        raise PrivacyError(f"client {client_id} is not a participant")
    vals = values.values if isinstance(values, ParamVector) else np.asarray(values, dtype=np.float64)
    qv = quantize(vals, q)
    if qv.size and np.max(np.abs(qv)) >= 2.0 ** (bits - 1) / len(ids):
        raise PrivacyError(f"client {client_id}: quantised values overflow a {bits}-bit field; lower q")
    acc = qv.astype(np.uint64)
    for j in ids:
        if j == client_id:
            continue
        key = (min(client_id, j), max(client_id, j))
        if key not in pair_seeds:
            raise MissingPairSeed(f"no shared seed for pair {key}")
        m = _prg(pair_seeds[key], acc.shape[0])
        acc = acc + m if j > client_id else acc - m
    return MaskedUpdate(client_id, acc & _modmask(bits), int(sample_count), bits, ids)


def secure_mask(
    updates: dict[int, ParamVector | np.ndarray],
    pair_seeds: dict[tuple[int, int], int],
    q: float = DEFAULT_QUANT_SCALE,
    bits: int = 64,
    sample_counts: dict[int, int] | None = None,
) -> list[MaskedUpdate]:
    """Quantise each vector and add cancelling pairwise masks.

    Client ``i`` adds ``PRG(s_ij)`` for every peer ``j > i`` and subtracts it
    for every ``j < i``, all modulo ``2**bits``.
    """
    ids = sorted(updates)
    return [
        mask_one(i, updates[i], ids, pair_seeds, q, bits, 1 if sample_counts is None else sample_counts[i])
        for i in ids
    ]


def masked_sum(masked: list[MaskedUpdate], participants=None) -> np.ndarray:
    """Modular sum of masked vectors as uint64 (masks cancel here)."""
    if not masked:
        raise ParticipantMissing("no masked updates")
    expected = set(participants if participants is not None else masked[0].participants)
    present = [m.client_id for m in masked]
    if len(set(present)) != len(present):
        raise PrivacyError("duplicate masked update")
    if set(present) != expected:
        missing = sorted(expected - set(present))
        raise ParticipantMissing(f"participants missing from the round: {missing}")
    bits = masked[0].bits
    total = np.zeros(masked[0].d, dtype=np.uint64)
    for m in sorted(masked, key=lambda u: u.client_id):
        if m.bits != bits or m.d != total.shape[0]:
            raise PrivacyError("masked updates differ in field size or dimension")
        total = total + m.masked
    return total & _modmask(bits)


def decode_signed(total: np.ndarray, bits: int) -> np.ndarray:
    if bits == 64:
        return total.view(np.int64)
    half = np.uint64(1 << (bits - 1))
    signed = total.astype(np.int64)
    return np.where(total >= half, signed - (1 << bits), signed)


def secure_unmask_sum(masked: list[MaskedUpdate], q: float = DEFAULT_QUANT_SCALE, participants=None, layout=None) -> ParamVector:
    """Recover the plain sum of all participants' vectors, to within n/(2q)."""
    bits = masked[0].bits if masked else 64
    ints = decode_signed(masked_sum(masked, participants), bits)
    vals = ints.astype(np.float64) / q
    if layout is None:
        layout = layout_from_shapes([("values", (vals.shape[0],))])
    return ParamVector(vals, layout)


# ---------------------------------------------------------------------------
# payload accounting
# ---------------------------------------------------------------------------


def payload_bytes(update) -> int:
    """Size of the update frame on the wire.

    dense  = 8*d + header
    sparse = 12*k + header
    masked = (bits/8)*d + header
    """
    if isinstance(update, SparseUpdate):
        return SPARSE_ENTRY * update.k + UPDATE_HEADER_BYTES
    if isinstance(update, MaskedUpdate):
        return (update.bits // 8) * update.d + UPDATE_HEADER_BYTES
    if isinstance(update, ClientUpdate):
        update = update.delta
    if isinstance(update, ParamVector):
        return DENSE_ENTRY * update.dim + UPDATE_HEADER_BYTES
    raise TypeError(f"cannot size {type(update).__name__}")


def dense_payload_bytes(d: int) -> int:
    return DENSE_ENTRY * d + UPDATE_HEADER_BYTES
