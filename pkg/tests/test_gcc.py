import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdoakit.errors import ConfigError, DataError, ShapeError
from tdoakit.gcc import (
    CorrelationWindow,
    Weighting,
    estimate_delay,
    gcc,
    max_lag,
)
from tdoakit.signal import Frame, circular_shift

FS = 16000.0


def frame(x):
    return Frame(np.asarray(x, dtype=np.float64), FS)


def time_domain_circular_correlation(x1, x2, tau_max):
    """O(N * tau_max) oracle: R[m] = sum_n x1[n] x2[(n - m) mod N].

    This is the time-domain equivalent of (1/N) sum_k X1 X2* e^{i2pi km/N}
    (the 1/N is absorbed by the inverse transform), the normalization under
    which a circularly shifted pair yields a unit-amplitude pulse.
    """
    lags = np.arange(-tau_max, tau_max + 1)
    out = np.empty(lags.shape)
    for i, m in enumerate(lags):
        out[i] = np.dot(x1, np.roll(x2, m))
    return out


class TestMaxLag:
    def test_paper_geometry(self):
        # 0.5 m spacing at 16 kHz: the 23-sample window used throughout.
        assert max_lag(0.5, 16000, 343.0) == 23

    def test_exact_ratio(self):
        assert max_lag(0.343, 16000, 343.0) == 16

    def test_zero_distance_rejected(self):
        with pytest.raises(ConfigError):
            max_lag(0.0, 16000, 343.0)

    def test_negative_rate_rejected(self):
        with pytest.raises(ConfigError):
            max_lag(0.5, -1.0, 343.0)


class TestGcc:
    def test_phat_recovers_circular_shift_as_unit_pulse(self):
        rng = np.random.default_rng(10)
        x2 = frame(rng.standard_normal(2048))
        x1 = circular_shift(x2, 5)
        corr = gcc(x1, x2, Weighting.phat(), 23)
        expected = np.zeros(47)
        expected[5 + 23] = 1.0
        np.testing.assert_allclose(corr.values, expected, atol=1e-6)

    def test_identical_inputs_peak_at_zero(self):
        rng = np.random.default_rng(11)
        x = frame(rng.standard_normal(1024))
        for w in (Weighting.unweighted(), Weighting.phat(), Weighting.beta_phat(0.5)):
            corr = gcc(x, x, w, 16)
            assert estimate_delay(corr) == 0

    def test_unweighted_matches_time_domain_oracle(self):
        rng = np.random.default_rng(12)
        for _ in range(5):
            x1 = rng.standard_normal(2048)
            x2 = rng.standard_normal(2048)
            corr = gcc(frame(x1), frame(x2), Weighting.unweighted(), 23)
            oracle = time_domain_circular_correlation(x1, x2, 23)
            np.testing.assert_allclose(corr.values, oracle, atol=1e-8)

    def test_mismatched_lengths_raise(self):
        with pytest.raises(ShapeError):
            gcc(frame(np.ones(8)), frame(np.ones(16)), Weighting.phat(), 2)

    def test_mismatched_rates_raise(self):
        a = Frame(np.ones(8), 16000.0)
        b = Frame(np.ones(8), 8000.0)
        with pytest.raises(ShapeError):
            gcc(a, b, Weighting.phat(), 2)

    def test_tau_max_too_large_rejected(self):
        with pytest.raises(ConfigError):
            gcc(frame(np.ones(8)), frame(np.ones(8)), Weighting.phat(), 4)


class TestEstimateDelay:
    def test_pulse_at_negative_lag(self):
        values = np.zeros(47)
        values[-7 + 23] = 1.0
        assert estimate_delay(CorrelationWindow(values, 23)) == -7

    def test_all_equal_breaks_tie_at_zero(self):
        assert estimate_delay(CorrelationWindow(np.ones(47), 23)) == 0

    def test_tie_prefers_negative(self):
        values = np.zeros(47)
        values[23 - 3] = 1.0
        values[23 + 3] = 1.0
        assert estimate_delay(CorrelationWindow(values, 23)) == -3

    def test_nan_rejected(self):
        values = np.zeros(47)
        values[0] = np.nan
        with pytest.raises(DataError):
            estimate_delay(CorrelationWindow(values, 23))

    def test_anechoic_shifted_speech_frame(self):
        # Speech-like harmonic frame delayed by 12 samples: GCC-PHAT must
        # find exactly 12.
        t = np.arange(2048) / FS
        x = np.zeros(2048)
        for h in range(1, 12):
            x += np.sin(2 * np.pi * 130.0 * h * t + 0.71 * h) / h
        x2 = frame(x)
        x1 = circular_shift(x2, 12)
        assert estimate_delay(gcc(x1, x2, Weighting.phat(), 23)) == 12


class TestWeightingProperties:
    def test_beta_validation(self):
        with pytest.raises(ConfigError):
            Weighting.beta_phat(1.5)
        with pytest.raises(ConfigError):
            Weighting.beta_phat(-0.1)

    def test_beta_one_equals_phat(self):
        rng = np.random.default_rng(13)
        x1 = frame(rng.standard_normal(1024))
        x2 = frame(rng.standard_normal(1024))
        a = gcc(x1, x2, Weighting.phat(), 20).values
        b = gcc(x1, x2, Weighting.beta_phat(1.0), 20).values
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_beta_zero_equals_unweighted(self):
        rng = np.random.default_rng(14)
        x1 = frame(rng.standard_normal(1024))
        x2 = frame(rng.standard_normal(1024))
        a = gcc(x1, x2, Weighting.unweighted(), 20).values
        b = gcc(x1, x2, Weighting.beta_phat(0.0), 20).values
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_phat_amplitude_invariance(self):
        rng = np.random.default_rng(15)
        x1 = rng.standard_normal(1024)
        x2 = frame(rng.standard_normal(1024))
        a = gcc(frame(x1), x2, Weighting.phat(), 20).values
        b = gcc(frame(517.3 * x1), x2, Weighting.phat(), 20).values
        np.testing.assert_allclose(a, b, atol=1e-9)

    @given(tau=st.integers(min_value=-23, max_value=23), seed=st.integers(0, 2**16))
    @settings(max_examples=30, deadline=None)
    def test_exact_recovery_for_any_shift(self, tau, seed):
        rng = np.random.default_rng(seed)
        x = frame(rng.standard_normal(512))
        corr = gcc(circular_shift(x, tau), x, Weighting.phat(), 23)
        expected = np.zeros(47)
        expected[tau + 23] = 1.0
        np.testing.assert_allclose(corr.values, expected, atol=1e-6)

    def test_antisymmetry_of_estimates(self):
        rng = np.random.default_rng(16)
        x2 = frame(rng.standard_normal(1024))
        x1 = circular_shift(x2, 9)
        fwd = estimate_delay(gcc(x1, x2, Weighting.phat(), 20))
        rev = estimate_delay(gcc(x2, x1, Weighting.phat(), 20))
        assert fwd == 9 and rev == -9
