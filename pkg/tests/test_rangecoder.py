import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qarv.gaussian import (N_MIN, PMF_TOTAL, QuantizedPmf, pmf_for_sigma,
                           pmf_table_for_sigmas)
from qarv.rangecoder import (CODER_OVERHEAD_BYTES, TruncatedStreamError,
                             decode_with_tables, encode_with_tables, rc_decode,
                             rc_encode)


def ideal_bits(symbols, pmfs):
    return sum(-math.log2(p.freq(s) / p.total) for s, p in zip(symbols, pmfs))


def sample_symbols(pmf, rng, count):
    probs = pmf.freqs / pmf.total
    return rng.choice(np.arange(pmf.n_min, pmf.n_max + 1), size=count, p=probs)


class TestRoundTrip:
    def test_empty_sequence(self):
        data = rc_encode([], [])
        assert len(data) <= CODER_OVERHEAD_BYTES
        assert rc_decode(data, []) == []

    def test_ten_thousand_symbols_sigma_one(self):
        pmf = pmf_for_sigma(1.0)
        rng = np.random.default_rng(0)
        symbols = sample_symbols(pmf, rng, 10_000)
        data = rc_encode(symbols, [pmf] * len(symbols))
        assert rc_decode(data, [pmf] * len(symbols)) == symbols.tolist()

    def test_mixed_pmfs_per_symbol(self):
        rng = np.random.default_rng(1)
        sigmas = rng.uniform(0.05, 50.0, 500)
        pmfs = [pmf_for_sigma(float(s)) for s in sigmas]
        symbols = [int(sample_symbols(p, rng, 1)[0]) for p in pmfs]
        data = rc_encode(symbols, pmfs)
        assert rc_decode(data, pmfs) == symbols

    def test_extreme_skew(self):
        # nearly all mass on one symbol stresses renormalization
        pmf = pmf_for_sigma(0.01)
        symbols = [0] * 5000 + [1, -1] + [0] * 5000
        data = rc_encode(symbols, [pmf] * len(symbols))
        assert rc_decode(data, [pmf] * len(symbols)) == symbols

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(
        st.integers(min_value=-32, max_value=32),
        st.floats(min_value=0.05, max_value=80.0, allow_nan=False)),
        min_size=0, max_size=120))
    def test_round_trip_property(self, pairs):
        pmfs = [pmf_for_sigma(s) for _, s in pairs]
        symbols = [n for n, _ in pairs]
        data = rc_encode(symbols, pmfs)
        assert rc_decode(data, pmfs) == symbols


class TestCodelength:
    def test_within_ideal_plus_slack(self):
        rng = np.random.default_rng(2)
        for sigma in (0.3, 1.0, 4.0, 20.0):
            pmf = pmf_for_sigma(sigma)
            symbols = sample_symbols(pmf, rng, 4000)
            data = rc_encode(symbols, [pmf] * len(symbols))
            ideal = ideal_bits(symbols, [pmf] * len(symbols)) / 8.0
            assert len(data) <= ideal * 1.005 + CODER_OVERHEAD_BYTES

    def test_skewed_stream_compresses(self):
        pmf = pmf_for_sigma(0.05)
        symbols = [0] * 10_000
        data = rc_encode(symbols, [pmf] * len(symbols))
        assert len(data) < 60  # ~0.003 bits/symbol plus flush


class TestErrors:
    def test_out_of_alphabet_symbol(self):
        pmf = pmf_for_sigma(1.0)
        with pytest.raises(ValueError):
            rc_encode([40], [pmf])

    def test_truncated_stream(self):
        pmf = pmf_for_sigma(1.0)
        rng = np.random.default_rng(3)
        symbols = sample_symbols(pmf, rng, 300)
        data = rc_encode(symbols, [pmf] * len(symbols))
        with pytest.raises(TruncatedStreamError):
            rc_decode(data[:len(data) // 2], [pmf] * len(symbols))

    def test_symbol_pmf_count_mismatch(self):
        with pytest.raises(ValueError):
            rc_encode([0, 1], [pmf_for_sigma(1.0)])


class TestTableFastPath:
    def test_matches_object_interface(self):
        rng = np.random.default_rng(4)
        sigmas = rng.uniform(0.1, 30.0, 400)
        freqs, cum = pmf_table_for_sigmas(sigmas)
        pmfs = [QuantizedPmf(f) for f in freqs]
        symbols = np.array([int(sample_symbols(p, rng, 1)[0]) for p in pmfs])
        fast = encode_with_tables(symbols, cum, freqs, N_MIN, PMF_TOTAL)
        slow = rc_encode(symbols.tolist(), pmfs)
        assert fast == slow
        back = decode_with_tables(fast, cum, freqs, N_MIN, PMF_TOTAL)
        np.testing.assert_array_equal(back, symbols)
