"""Generalized cross-correlation with pluggable spectral weightings.

Implements the classic frequency-domain GCC over a bounded lag window,
with unweighted, PHAT and beta-PHAT weightings, plus the argmax delay
estimator with a deterministic tie rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .signal import Frame

#: Relative magnitude below which cross-spectrum bins are dropped from
#: PHAT-style divisions instead of being amplified to full weight. Double
#: precision keeps bin phases valid down to ~1e-22 of the peak; real
#: spectral nulls of filtered signals dip to ~1e-13, so the guard sits well
#: below those while still catching numerically meaningless bins.
PHAT_GUARD_EPS = 1e-20

SPEED_OF_SOUND = 343.0


@dataclass(frozen=True)
class Weighting:
    """Spectral weighting phi[k] applied to the cross-power spectrum.

    The beta family phi[k] = 1/|X1 X2*|^beta interpolates between the
    unweighted correlation (beta=0) and PHAT (beta=1).
    """

    kind: str
    beta: float = 0.0

    def __post_init__(self):
        if self.kind not in ("unweighted", "phat", "beta_phat"):
            raise ConfigError(f"unknown weighting kind: {self.kind!r}")
        if self.kind == "beta_phat" and not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must be in [0, 1], got {self.beta}")

    @classmethod
    def unweighted(cls) -> "Weighting":
        return cls("unweighted", 0.0)

    @classmethod
    def phat(cls) -> "Weighting":
        return cls("phat", 1.0)

    @classmethod
    def beta_phat(cls, beta: float) -> "Weighting":
        return cls("beta_phat", float(beta))

    @property
    def effective_beta(self) -> float:
        if self.kind == "unweighted":
            return 0.0
        if self.kind == "phat":
            return 1.0
        return self.beta


@dataclass(frozen=True)
class CorrelationWindow:
    """GCC values over integer lags m = -tau_max ... +tau_max."""

    values: np.ndarray
    tau_max: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.shape != (2 * self.tau_max + 1,):
            raise ShapeError(
                f"expected {2 * self.tau_max + 1} lags, got shape {values.shape}"
            )

    @property
    def lags(self) -> np.ndarray:
        return np.arange(-self.tau_max, self.tau_max + 1)

    def value_at(self, lag: int) -> float:
        if abs(lag) > self.tau_max:
            raise DataError(f"lag {lag} outside window +-{self.tau_max}")
        return float(self.values[lag + self.tau_max])


def max_lag(mic_distance: float, sample_rate: float, speed_of_sound: float = SPEED_OF_SOUND) -> int:
    """Largest physically possible delay: floor(distance * Fs / c)."""
    if mic_distance <= 0 or sample_rate <= 0 or speed_of_sound <= 0:
        raise ConfigError(
            "mic_distance, sample_rate and speed_of_sound must all be positive"
        )
    return int(math.floor(mic_distance * sample_rate / speed_of_sound))


def weighted_cross_spectrum(
    spec1: np.ndarray, spec2: np.ndarray, weighting: Weighting
) -> np.ndarray:
    """phi[k] * X1[k] * conj(X2[k]) with the division guard applied.

    For beta > 0, bins whose cross-power magnitude falls below
    PHAT_GUARD_EPS times the maximum contribute zero rather than being
    boosted by the near-singular weight. beta = 0 keeps every bin as is, so
    beta_phat(0) is exactly the unweighted correlation.
    """
    cross = spec1 * np.conj(spec2)
    beta = weighting.effective_beta
    if beta == 0.0:
        return cross
    mag = np.abs(cross)
    peak = mag.max()
    if peak == 0.0:
        return np.zeros_like(cross)
    keep = mag >= PHAT_GUARD_EPS * peak
    out = np.zeros_like(cross)
    out[keep] = cross[keep] * mag[keep] ** (-beta)
    return out


def gcc(x1: Frame, x2: Frame, weighting: Weighting, tau_max: int) -> CorrelationWindow:
    """GCC of two frames: R[m] = (1/N) sum_k phi[k] X1[k] X2*[k] e^{i2pi km/N}.

    Positive lags mean x1 is delayed relative to x2. Negative lags are read
    from the wrapped IDFT indices (index N + m).
    """
    if len(x1) != len(x2):
        raise ShapeError(f"frame lengths differ: {len(x1)} vs {len(x2)}")
    if x1.sample_rate != x2.sample_rate:
        raise ShapeError(
            f"sample rates differ: {x1.sample_rate} vs {x2.sample_rate}"
        )
    n = len(x1)
    if not 0 <= tau_max < n // 2:
        raise ConfigError(f"tau_max must be in [0, N/2), got {tau_max} for N={n}")
    spec1 = np.fft.fft(x1.samples)
    spec2 = np.fft.fft(x2.samples)
    weighted = weighted_cross_spectrum(spec1, spec2, weighting)
    # np.fft.ifft carries the 1/N factor of the definition.
    full = np.fft.ifft(weighted).real
    values = np.concatenate([full[n - tau_max:], full[: tau_max + 1]])
    return CorrelationWindow(values, tau_max)


def estimate_delay(corr: CorrelationWindow) -> int:
    """Lag of the maximum; ties break toward smallest |m|, then negative m."""
    values = corr.values
    if values.size == 0:
        raise DataError("empty correlation window")
    if np.any(np.isnan(values)):
        raise DataError("correlation window contains NaN")
    peak = values.max()
    lags = corr.lags[values == peak]
    best = min(lags, key=lambda m: (abs(m), m))
    return int(best)
