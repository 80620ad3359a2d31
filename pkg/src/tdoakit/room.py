"""Image-source simulation of a shoebox room: two-microphone reverberant,
noisy recordings with exact ground-truth delay labels.

Rooms are rectangular with uniform wall absorption derived from the
requested reverberation time via Sabine's relation. Each image source
contributes a windowed-sinc arrival at its fractional propagation delay;
amplitude reflection per bounce is sqrt(1 - alpha) so that rendered energy
decays at the requested rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.signal import fftconvolve

from .errors import (
    ConfigError,
    DataError,
    DegenerateGeometryError,
    InfeasibleT60Error,
)
from .gcc import SPEED_OF_SOUND
from .seeds import substream
from .signal import Frame

#: Kernel lengths for arrival placement: full resolution for the direct
#: path and first-order reflections (timing-critical), shorter for the
#: dense late tail where only energy and approximate timing matter.
EARLY_KERNEL_LENGTH = 81
TAIL_KERNEL_LENGTH = 21

MAX_IMAGE_ORDER_CAP = 40

#: Sampled sources keep this margin (meters) from every wall.
SOURCE_WALL_MARGIN = 0.1


@dataclass(frozen=True)
class RoomSpec:
    """Shoebox room: dimensions in meters, reverberation time, sound speed.

    t60 == 0 means anechoic (direct path only).
    """

    dimensions: tuple[float, float, float]
    t60: float
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        dims = tuple(float(d) for d in self.dimensions)
        object.__setattr__(self, "dimensions", dims)
        if any(d <= 0 for d in dims):
            raise ConfigError(f"room dimensions must be positive, got {dims}")
        if self.t60 < 0:
            raise ConfigError(f"t60 must be >= 0 (0 = anechoic), got {self.t60}")
        if self.speed_of_sound <= 0:
            raise ConfigError("speed of sound must be positive")

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dimensions
        return lx * ly * lz

    @property
    def surface_area(self) -> float:
        lx, ly, lz = self.dimensions
        return 2.0 * (lx * ly + lx * lz + ly * lz)

    @property
    def anechoic(self) -> bool:
        return self.t60 == 0.0

    def contains(self, point, margin: float = 0.0) -> bool:
        return all(
            margin < p < d - margin for p, d in zip(point, self.dimensions)
        )


@dataclass(frozen=True)
class Scene:
    """One labeled two-microphone example: geometry, conditions, seed."""

    room: RoomSpec
    mic1: tuple[float, float, float]
    mic2: tuple[float, float, float]
    source: tuple[float, float, float]
    snr_db: float  # math.inf means noise-free
    seed: int
    sample_rate: float
    true_delay_samples: int

    def __post_init__(self):
        for name in ("mic1", "mic2", "source"):
            point = tuple(float(v) for v in getattr(self, name))
            object.__setattr__(self, name, point)
            if not self.room.contains(point):
                raise ConfigError(f"{name} {point} is not strictly inside the room")
        expected = _geometric_delay(
            self.mic1, self.mic2, self.source, self.sample_rate,
            self.room.speed_of_sound,
        )
        if expected != self.true_delay_samples:
            raise ConfigError(
                f"true_delay_samples={self.true_delay_samples} inconsistent with "
                f"geometry (expected {expected})"
            )


@dataclass(frozen=True)
class Rir:
    """Room impulse response taps at a given sample rate."""

    taps: np.ndarray
    sample_rate: float

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        object.__setattr__(self, "taps", taps)
        if not np.all(np.isfinite(taps)):
            raise DataError("RIR contains non-finite taps")


def sabine_absorption(room: RoomSpec) -> float:
    """Uniform wall absorption for the requested T60: 0.161 V / (S T60).

    Values above 1 are physically impossible; if clamping to 1 would change
    the coefficient by more than 50% the requested T60 is infeasible for
    the room and an error is raised.
    """
    if room.t60 <= 0:
        raise ConfigError("sabine_absorption requires t60 > 0")
    alpha = 0.161 * room.volume / (room.surface_area * room.t60)
    if alpha > 1.0:
        if alpha > 1.5:
            raise InfeasibleT60Error(
                f"T60={room.t60}s needs absorption {alpha:.3f} > 1 in this room"
            )
        alpha = 1.0
    return alpha


def default_max_order(room: RoomSpec) -> int:
    """Smallest reflection order whose images lie beyond the c*T60 radius,
    capped at MAX_IMAGE_ORDER_CAP."""
    if room.anechoic:
        return 0
    min_dim = min(room.dimensions)
    needed = math.ceil(room.speed_of_sound * room.t60 / min_dim)
    return min(max(needed, 1), MAX_IMAGE_ORDER_CAP)


def _axis_images(length: float, coord: float, r_max: int):
    """All 1-D image coordinates 2 r L +- s with their reflection counts."""
    r = np.arange(-r_max, r_max + 1)
    coords = np.concatenate([2 * r * length + coord, 2 * r * length - coord])
    counts = np.concatenate([np.abs(2 * r), np.abs(2 * r - 1)])
    return coords, counts


def _hann_windows(kernel_length: int):
    """The two possible window alignments (center at half or half + 1)."""
    half = (kernel_length - 1) // 2
    q = np.arange(kernel_length) - half
    out = []
    for shift in (0, 1):
        u = np.clip(q - shift, -half, half)
        w = 0.5 * (1.0 + np.cos(np.pi * u / half))
        w[np.abs(q - shift) > half] = 0.0
        out.append(w)
    return out[0], out[1]


_WINDOW_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _place_arrivals(rir: np.ndarray, delays: np.ndarray, amps: np.ndarray,
                    kernel_length: int):
    """Scatter windowed-sinc kernels into the RIR at fractional delays.

    sinc(q - frac) at integer tap offsets q needs only one sin(pi frac) per
    arrival; the Hann window takes one of two precomputed alignments.
    """
    if delays.size == 0:
        return
    half = (kernel_length - 1) // 2
    if kernel_length not in _WINDOW_CACHE:
        _WINDOW_CACHE[kernel_length] = _hann_windows(kernel_length)
    w0, w1 = _WINDOW_CACHE[kernel_length]

    i0 = np.floor(delays).astype(np.int64)
    frac = delays - i0
    q = np.arange(kernel_length) - half
    a = q[None, :] - frac[:, None]
    # sin(pi (q - frac)) = -(-1)^q sin(pi frac)
    signs = np.where(q % 2 == 0, -1.0, 1.0)
    s = np.sin(np.pi * frac)
    near_zero = np.abs(a) < 1e-12
    denom = np.where(near_zero, 1.0, np.pi * a)
    vals = np.where(near_zero, 1.0, signs[None, :] * s[:, None] / denom)
    window = np.where(frac[:, None] < 0.5, w0[None, :], w1[None, :])
    taps = vals * window * amps[:, None]

    # padded scatter keeps every index in range without boolean masking
    pad = kernel_length
    idx = (i0[:, None] - half + pad) + (q[None, :] + half)
    buf = np.bincount(
        idx.ravel(), weights=taps.ravel(), minlength=rir.shape[0] + 2 * pad
    )
    rir += buf[pad:pad + rir.shape[0]]


def render_rir(room: RoomSpec, source, mic, max_order: int | None = None,
               sample_rate: float = 16000.0) -> Rir:
    """Image-source RIR from source to mic.

    max_order bounds the total reflection count; None picks the default for
    the room's T60. max_order = 0 renders the direct path only.
    """
    source = np.asarray(source, dtype=np.float64)
    mic = np.asarray(mic, dtype=np.float64)
    if not room.contains(source) or not room.contains(mic):
        raise ConfigError("source and mic must be strictly inside the room")
    direct = float(np.linalg.norm(source - mic))
    if direct < 1e-2:
        raise DegenerateGeometryError(
            f"source and mic are {direct * 100:.2f} cm apart"
        )
    if max_order is None:
        max_order = default_max_order(room)
    if max_order < 0:
        raise ConfigError("max_order must be >= 0")

    c = room.speed_of_sound
    tail_s = 0.0 if room.anechoic or max_order == 0 else room.t60
    reach = direct + c * tail_s
    n_taps = int(math.ceil(reach / c * sample_rate)) + EARLY_KERNEL_LENGTH + 1
    rir = np.zeros(n_taps)

    if max_order == 0 or room.anechoic:
        delays = np.array([direct * sample_rate / c])
        amps = np.array([1.0 / (4.0 * math.pi * direct)])
        _place_arrivals(rir, delays, amps, EARLY_KERNEL_LENGTH)
        return Rir(rir, sample_rate)

    alpha = sabine_absorption(room)
    reflect_amp = math.sqrt(max(1.0 - alpha, 0.0))

    per_axis = []
    for axis in range(3):
        length = room.dimensions[axis]
        r_max = min((max_order + 1) // 2 + 1, int(reach / (2 * length)) + 1)
        per_axis.append(_axis_images(length, source[axis], r_max))

    cx, nx = per_axis[0]
    cy, ny = per_axis[1]
    cz, nz = per_axis[2]
    gx, gy, gz = np.meshgrid(
        np.arange(cx.size), np.arange(cy.size), np.arange(cz.size), indexing="ij"
    )
    gx, gy, gz = gx.ravel(), gy.ravel(), gz.ravel()
    counts = nx[gx] + ny[gy] + nz[gz]
    keep = counts <= max_order
    gx, gy, gz, counts = gx[keep], gy[keep], gz[keep], counts[keep]

    dx = cx[gx] - mic[0]
    dy = cy[gy] - mic[1]
    dz = cz[gz] - mic[2]
    dist = np.sqrt(dx * dx + dy * dy + dz * dz)
    keep = dist <= reach
    dist, counts = dist[keep], counts[keep]

    amps = reflect_amp**counts / (4.0 * math.pi * dist)
    delays = dist * sample_rate / c
    early = counts <= 1
    _place_arrivals(rir, delays[early], amps[early], EARLY_KERNEL_LENGTH)
    _place_arrivals(rir, delays[~early], amps[~early], TAIL_KERNEL_LENGTH)
    return Rir(rir, sample_rate)


def _geometric_delay(mic1, mic2, source, sample_rate: float, c: float) -> int:
    d1 = np.linalg.norm(np.asarray(mic1) - np.asarray(source))
    d2 = np.linalg.norm(np.asarray(mic2) - np.asarray(source))
    return int(round((d1 - d2) * sample_rate / c))


def true_delay(scene: Scene, sample_rate: float) -> int:
    """Ground-truth delay of mic1 relative to mic2, rounded to samples."""
    return _geometric_delay(
        scene.mic1, scene.mic2, scene.source, sample_rate,
        scene.room.speed_of_sound,
    )


def propagate(scene: Scene, signal: np.ndarray, max_order: int | None = None,
              frame_length: int = 2048, window_offset: int = 0
              ) -> tuple[Frame, Frame]:
    """Render both microphone frames for a scene.

    The source signal is convolved with each mic's RIR; a common
    frame_length window starting at the nearer mic's direct-path arrival
    (plus window_offset into the signal) is cut from both channels, then
    white Gaussian noise is added per mic at the scene's SNR, measured
    against the reverberant in-window power. Deterministic given the scene.
    """
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 1:
        raise DataError(f"signal must be 1-D, got shape {signal.shape}")
    c = scene.room.speed_of_sound
    fs = scene.sample_rate
    d1 = float(np.linalg.norm(np.asarray(scene.mic1) - np.asarray(scene.source)))
    d2 = float(np.linalg.norm(np.asarray(scene.mic2) - np.asarray(scene.source)))
    start = int(math.floor(min(d1, d2) * fs / c)) + int(window_offset)
    if window_offset < 0:
        raise ConfigError("window_offset must be >= 0")
    if start + frame_length > signal.shape[0]:
        raise DataError(
            f"signal too short: window needs {start + frame_length} samples, "
            f"got {signal.shape[0]}"
        )

    frames = []
    for idx, mic in enumerate((scene.mic1, scene.mic2)):
        rir = render_rir(scene.room, scene.source, mic, max_order, fs)
        wet = fftconvolve(signal, rir.taps)[start:start + frame_length]
        power = float(np.mean(wet**2))
        if not math.isinf(scene.snr_db):
            if power == 0.0:
                raise DataError(
                    "cannot realize a finite SNR on an all-zero analysis window"
                )
            noise_std = math.sqrt(power / (10.0 ** (scene.snr_db / 10.0)))
            noise_rng = substream(scene.seed, "noise", idx)
            wet = wet + noise_std * noise_rng.standard_normal(frame_length)
        frames.append(Frame(wet, fs))
    return frames[0], frames[1]


def sample_scene(room: RoomSpec, mic1, mic2, rng: np.random.Generator,
                 sample_rate: float = 16000.0,
                 t60_range: tuple[float, float] = (0.2, 1.0),
                 snr_range_db: tuple[float, float] = (0.0, 30.0)) -> Scene:
    """Draw one random scene: uniform source position (0.1 m off walls),
    uniform T60 and SNR in the configured ranges."""
    mic1 = tuple(float(v) for v in mic1)
    mic2 = tuple(float(v) for v in mic2)
    if not room.contains(mic1) or not room.contains(mic2):
        raise ConfigError("microphones must be strictly inside the room")
    dims = np.asarray(room.dimensions)
    if np.any(dims <= 2 * SOURCE_WALL_MARGIN):
        raise ConfigError("room too small for the source wall margin")
    source = tuple(
        rng.uniform(SOURCE_WALL_MARGIN, d - SOURCE_WALL_MARGIN) for d in dims
    )
    # degenerate ranges (lo == hi, possibly inf for noise-free) pass through
    t60 = float(t60_range[0]) if t60_range[0] == t60_range[1] \
        else float(rng.uniform(*t60_range))
    snr_db = float(snr_range_db[0]) if snr_range_db[0] == snr_range_db[1] \
        else float(rng.uniform(*snr_range_db))
    seed = int(rng.integers(0, 2**63 - 1))
    sampled_room = replace(room, t60=t60)
    label = _geometric_delay(mic1, mic2, source, sample_rate,
                             room.speed_of_sound)
    return Scene(
        room=sampled_room, mic1=mic1, mic2=mic2, source=source,
        snr_db=snr_db, seed=seed, sample_rate=sample_rate,
        true_delay_samples=label,
    )
