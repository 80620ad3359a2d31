"""Fixed-length real signal container, DFT/IDFT, circular shifts and
fractional-delay kernels.

Everything here is double precision and purely functional; all other
modules build on these primitives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConjugateSymmetryError, InvalidLengthError, DataError


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class Frame:
    """A fixed-length window of real audio samples.

    Length must be a power of two so the transform pair stays radix-2
    friendly; samples must be finite.
    """

    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1:
            raise InvalidLengthError(f"frame must be 1-D, got shape {samples.shape}")
        if not _is_power_of_two(samples.shape[0]):
            raise InvalidLengthError(
                f"frame length {samples.shape[0]} is not a power of two"
            )
        if not np.all(np.isfinite(samples)):
            raise DataError("frame contains non-finite samples")
        if self.sample_rate <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class Spectrum:
    """Complex DFT bins of a Frame (full complex transform, length N)."""

    bins: np.ndarray
    sample_rate: float

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.complex128)
        object.__setattr__(self, "bins", bins)
        if bins.ndim != 1:
            raise InvalidLengthError(f"spectrum must be 1-D, got shape {bins.shape}")
        if not _is_power_of_two(bins.shape[0]):
            raise InvalidLengthError(
                f"spectrum length {bins.shape[0]} is not a power of two"
            )

    def __len__(self) -> int:
        return self.bins.shape[0]


def dft(frame: Frame) -> Spectrum:
    """Forward DFT: bins[k] = sum_n x[n] exp(-i 2 pi k n / N)."""
    return Spectrum(np.fft.fft(frame.samples), frame.sample_rate)


# Relative imaginary residue above this is a broken input spectrum,
# not round-off.
_IMAG_RESIDUE_LIMIT = 1e-6


def idft(spectrum: Spectrum) -> Frame:
    """Inverse DFT back to a real frame.

    The input must be (numerically) conjugate-symmetric; an imaginary
    residue above 1e-6 of the output norm raises ConjugateSymmetryError.
    """
    z = np.fft.ifft(spectrum.bins)
    norm = np.linalg.norm(z)
    if norm > 0.0:
        residue = np.linalg.norm(z.imag) / norm
        if residue > _IMAG_RESIDUE_LIMIT:
            raise ConjugateSymmetryError(
                f"imaginary residue {residue:.3e} exceeds {_IMAG_RESIDUE_LIMIT:.0e}; "
                "input spectrum is not conjugate-symmetric"
            )
    return Frame(z.real, spectrum.sample_rate)


def circular_shift(frame: Frame, tau: int) -> Frame:
    """Circularly delay a frame by ``tau`` samples: out[n] = x[(n - tau) mod N]."""
    return Frame(np.roll(frame.samples, int(tau)), frame.sample_rate)


def circular_shift_array(x: np.ndarray, tau: int, axis: int = -1) -> np.ndarray:
    """Array-level circular shift with the same sign convention as circular_shift."""
    return np.roll(x, int(tau), axis=axis)


def fractional_delay_kernel(delay: float, length: int) -> np.ndarray:
    """Hann-windowed sinc taps realizing a delay of ``delay`` samples.

    Tap index j corresponds to time offset j, so an integer delay d within
    [0, length) yields a unit impulse at tap d. The window is centered on
    the integer nearest the delay; fractional delays are rendered accurately
    when the delay sits at least half a kernel away from both ends
    (render_rir always places kernels that way).
    """
    length = int(length)
    if length % 2 == 0:
        raise InvalidLengthError(f"kernel length must be odd, got {length}")
    if length < 9:
        raise InvalidLengthError(f"kernel length must be >= 9, got {length}")
    half = (length - 1) // 2
    center = int(np.floor(delay + 0.5))
    j = np.arange(length, dtype=np.float64)
    u = j - center
    window = np.where(
        np.abs(u) <= half, 0.5 * (1.0 + np.cos(np.pi * u / half)), 0.0
    )
    return np.sinc(j - delay) * window


def parseval_energy(frame: Frame, spectrum: Spectrum) -> tuple[float, float]:
    """Time-domain energy and (1/N)-scaled spectral energy, for invariant checks."""
    e_time = float(np.sum(frame.samples**2))
    e_freq = float(np.sum(np.abs(spectrum.bins) ** 2) / len(spectrum))
    return e_time, e_freq
