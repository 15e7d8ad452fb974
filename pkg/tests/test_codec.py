import io
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedload.errors import BadMagic, CodecError, CrcMismatch, MalformedMessage, Truncated, UnknownType
from fedload.net.codec import (
    Ack,
    Assign,
    Bye,
    Join,
    Report,
    Update,
    canonical_json,
    decode,
    encode,
    read_frame,
)
from fedload.privacy import MaskedUpdate

u32 = st.integers(0, 2**32 - 1)
f64 = st.floats(allow_nan=False, allow_infinity=False)


@st.composite
def updates(draw):
    enc = draw(st.sampled_from(["dense", "sparse", "masked"]))
    dim = draw(st.integers(1, 40))
    r, cid, n = draw(u32), draw(u32), draw(st.integers(1, 2**32 - 1))
    if enc == "dense":
        vals = draw(arrays(np.float64, dim, elements=f64))
        return Update(r, cid, enc, n, dim, vals)
    if enc == "masked":
        vals = draw(arrays(np.uint64, dim, elements=st.integers(0, 2**64 - 1)))
        return Update(r, cid, enc, n, dim, vals)
    idx = np.array(sorted(draw(st.sets(st.integers(0, dim - 1), min_size=0, max_size=dim))), dtype=np.int64)
    vals = draw(arrays(np.float64, len(idx), elements=f64))
    return Update(r, cid, enc, n, dim, vals, idx)


messages = st.one_of(
    st.builds(Join, u32, st.integers(0, 2**64 - 1)),
    st.builds(
        Assign,
        u32,
        st.dictionaries(st.text(max_size=5), st.one_of(st.integers(-9, 9), st.text(max_size=5), st.none()), max_size=4),
        arrays(np.float64, st.integers(0, 20), elements=f64),
    ),
    updates(),
    st.builds(Ack, u32, st.booleans(), st.text(max_size=30)),
    st.just(Bye()),
    st.builds(Report, u32, u32, arrays(np.float64, st.integers(0, 14), elements=f64)),
)


@given(messages)
@settings(max_examples=400)
def test_round_trip(msg):
    frame = encode(msg)
    assert decode(frame) == msg
    assert read_frame(io.BytesIO(frame)) == msg


def test_dense_frame_layout_by_hand():
    frame = encode(Update(7, 3, "dense", 11, 3, np.array([1.0, -2.0, 0.5])))
    payload = struct.pack("<IIBII", 7, 3, 0, 11, 3) + struct.pack("<I3d", 3, 1.0, -2.0, 0.5)
    want = b"FCW1" + struct.pack("<BBI", 3, 0, len(payload)) + payload + struct.pack("<I", zlib.crc32(payload))
    assert frame == want
    assert len(frame) == 59


def test_sparse_and_masked_sizes():
    s = encode(Update(1, 1, "sparse", 1, 100, np.ones(4), np.arange(4)))
    m = encode(Update(1, 1, "masked", 1, 5, np.arange(5, dtype=np.uint64)))
    assert len(s) == 12 * 4 + 35
    assert len(m) == 8 * 5 + 35


@given(messages, st.data())
@settings(max_examples=200)
def test_any_bit_flip_is_caught(msg, data):
    frame = bytearray(encode(msg))
    pos = data.draw(st.integers(0, len(frame) - 1))
    bit = data.draw(st.integers(0, 7))
    frame[pos] ^= 1 << bit
    with pytest.raises(CodecError):
        decode(bytes(frame))


def test_error_classes():
    good = encode(Ack(1, True, "ok"))
    with pytest.raises(BadMagic):
        decode(b"XXXX" + good[4:])
    with pytest.raises(BadMagic):
        decode(b"FX")
    with pytest.raises(Truncated):
        decode(good[:7])
    with pytest.raises(Truncated):
        decode(good[:-1])
    with pytest.raises(MalformedMessage):
        decode(good + b"\0")
    with pytest.raises(UnknownType):
        decode(good[:4] + bytes([99]) + good[5:])
    with pytest.raises(MalformedMessage):
        decode(good[:5] + bytes([1]) + good[6:])
    body = bytearray(good)
    body[-1] ^= 0xFF
    with pytest.raises(CrcMismatch):
        decode(bytes(body))


def test_payload_semantics_are_checked():
    def frame(t, payload):
        return b"FCW1" + struct.pack("<BBI", t, 0, len(payload)) + payload + struct.pack("<I", zlib.crc32(payload))

    # sparse indices out of range
    bad_sparse = struct.pack("<IIBII", 1, 1, 1, 1, 4) + struct.pack("<II", 1, 9) + struct.pack("<d", 1.0)
    with pytest.raises(MalformedMessage):
        decode(frame(3, bad_sparse))
    # unknown encoding
    with pytest.raises(MalformedMessage):
        decode(frame(3, struct.pack("<IIBII", 1, 1, 7, 1, 0)))
    # Bye with a payload
    with pytest.raises(MalformedMessage):
        decode(frame(5, b"x"))
    # non-canonical config JSON
    cfg = b'{"b": 1, "a": 2}'
    with pytest.raises(MalformedMessage):
        decode(frame(2, struct.pack("<II", 0, len(cfg)) + cfg + struct.pack("<I", 0)))


def test_canonical_json_is_stable():
    assert canonical_json({"b": 1, "a": [1.5, None]}) == b'{"a":[1.5,null],"b":1}'
    with pytest.raises(ValueError):
        canonical_json({"x": float("nan")})


def test_read_frame_stream_behaviour():
    a, b = encode(Bye()), encode(Join(4, 99))
    s = io.BytesIO(a + b)
    assert read_frame(s) == Bye()
    assert read_frame(s) == Join(4, 99)
    assert read_frame(s) is None
    with pytest.raises(Truncated):
        read_frame(io.BytesIO(b[:-2]))


def test_masked_update_requires_64_bit_words():
    with pytest.raises(ValueError):
        Update.from_payload(1, MaskedUpdate(0, np.zeros(3, dtype=np.uint64), 1, 32))
