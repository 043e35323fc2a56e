import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stavc.entropy import pmf_to_freqs
from stavc.errors import CodingError, CorruptStreamError
from stavc.rangecoder import RangeDecoder, RangeEncoder, rc_decode, rc_encode


def ideal_bits(symbols, freqs, index=None):
    freqs = np.atleast_2d(freqs)
    rows = np.zeros(len(symbols), dtype=int) if index is None else np.asarray(index)
    p = freqs[rows, symbols] / freqs.sum(1)[rows]
    return float(-np.log2(p).sum())


def test_uniform_256():
    rng = np.random.default_rng(0)
    sym = rng.integers(0, 256, 1000)
    freqs = np.full(256, 256)
    data = rc_encode(sym, freqs)
    assert 1000 <= len(data) <= 1000 + 16
    assert rc_decode(data, freqs, 1000) == sym.tolist()


def test_single_symbol_alphabet():
    freqs = np.array([1 << 16])
    data = rc_encode([0] * 5000, freqs)
    assert len(data) <= 5
    assert rc_decode(data, freqs, 5000) == [0] * 5000


def test_skewed_source_near_entropy():
    rng = np.random.default_rng(1)
    pmf = np.array([0.6, 0.2, 0.1, 0.05, 0.03, 0.01, 0.005, 0.005])
    freqs = pmf_to_freqs(pmf)[0]
    sym = rng.choice(len(pmf), size=100_000, p=pmf)
    data = rc_encode(sym, freqs)
    ideal = ideal_bits(sym, freqs) / 8
    assert len(data) <= ideal * 1.01 + 16
    assert len(data) >= ideal - 1
    assert rc_decode(data, freqs, len(sym)) == sym.tolist()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(0, 400), size=st.integers(1, 50))
def test_roundtrip_per_symbol_tables(seed, n, size):
    rng = np.random.default_rng(seed)
    tables = pmf_to_freqs(rng.random((7, size)) ** 4 + 1e-9)
    index = rng.integers(0, 7, n)
    sym = [int(rng.integers(0, size)) for _ in range(n)]
    data = rc_encode(sym, tables, table_index=index)
    assert rc_decode(data, tables, n, table_index=index) == sym
    assert len(data) * 8 <= ideal_bits(sym, tables, index) + 16 * 8


def test_extreme_probabilities_carry_path():
    # long runs of the most and least likely symbols exercise the carry cache
    freqs = np.array([65534, 1, 1])
    sym = [0] * 3000 + [2, 1] * 50 + [0] * 3000 + [1] * 20
    data = rc_encode(sym, freqs)
    assert rc_decode(data, freqs, len(sym)) == sym


def test_zero_frequency_symbol_is_an_error():
    with pytest.raises(CodingError):
        rc_encode([1], np.array([65536, 0]))
    with pytest.raises(CodingError):
        rc_encode([3], np.array([32768, 32768]))
    enc = RangeEncoder()
    with pytest.raises(CodingError):
        enc.encode(0, 0)


def test_truncated_stream_is_detected():
    rng = np.random.default_rng(2)
    freqs = np.full(16, 4096)
    sym = rng.integers(0, 16, 2000)
    data = rc_encode(sym, freqs)
    with pytest.raises(CorruptStreamError):
        rc_decode(data[: len(data) // 2], freqs, len(sym))
    with pytest.raises(CorruptStreamError):
        RangeDecoder(b"\x00\x01")


def test_table_count_mismatch():
    with pytest.raises(CodingError):
        rc_encode([0, 1, 0], np.full((2, 2), 32768))
