"""Metric computation (MAE, RMSE, accuracy at distance thresholds) and the
SNR x T60 evaluation grid, with paired inputs across methods.

Every method in a comparison sees bit-identical frames per grid cell: the
examples for a cell are rendered once from seeds derived from (master
seed, snr, t60, index) and shared.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .errors import ConfigError, DataError
from .gcc import (
    SPEED_OF_SOUND,
    CorrelationWindow,
    Weighting,
    estimate_delay,
    gcc,
    max_lag,
    weighted_cross_spectrum,
)
from .model import TdoaModel, predict_batch
from .room import RoomSpec, render_rir, sample_scene
from .seeds import substream
from .signal import Frame
from .training import SnippetStore, synth_speech

EVAL_ROOM_DIMENSIONS = (6.0, 4.0, 2.5)
EVAL_MIC_POSITIONS = ((3.0, 1.75, 1.25), (3.0, 2.25, 1.25))

SNR_LEVELS_DB = (0.0, 6.0, 12.0, 18.0, 24.0, 30.0)
T60_LEVELS_S = (0.2, 0.4, 0.6, 0.8, 1.0)

DEFAULT_THRESHOLDS_CM = (2.0, 4.0, 6.0, 8.0, 10.0)

#: Reference numbers for the classic GCC-PHAT baseline under the
#: full-scale speech protocol at T60 = 0.2 s, averaged over the SNR grid.
#: Recorded for orientation only; laptop-scale synthetic runs are not
#: expected to reproduce them exactly.
GCC_PHAT_REFERENCE_T60_02 = {"mae_cm": 6.84, "acc_10cm": 0.802}


def delay_error_cm(tau_hat, tau_true, sample_rate: float,
                   speed_of_sound: float = SPEED_OF_SOUND):
    """Delay error converted to distance: |err| * c / Fs in centimeters."""
    err = np.abs(np.asarray(tau_hat, dtype=np.float64) - np.asarray(tau_true))
    return err * speed_of_sound / sample_rate * 100.0


@dataclass(frozen=True)
class MetricsReport:
    mae_cm: float
    rmse_cm: float
    acc_at: dict[float, float]
    n_examples: int
    condition: tuple[float, float] | None = None  # (snr_db, t60_s)

    def __post_init__(self):
        for eta, acc in self.acc_at.items():
            if not 0.0 <= acc <= 1.0:
                raise DataError(f"accuracy at {eta} cm out of [0,1]: {acc}")
        if self.rmse_cm < self.mae_cm - 1e-12:
            raise DataError(
                f"rmse {self.rmse_cm} < mae {self.mae_cm} violates the "
                "power-mean inequality"
            )


def metrics_from_pairs(tau_true, tau_hat, sample_rate: float,
                       thresholds_cm=DEFAULT_THRESHOLDS_CM,
                       condition=None,
                       speed_of_sound: float = SPEED_OF_SOUND) -> MetricsReport:
    """Aggregate a set of (true, estimated) delay pairs into a report.

    Accuracy uses the strict inequality error < eta.
    """
    tau_true = np.asarray(tau_true, dtype=np.float64)
    tau_hat = np.asarray(tau_hat, dtype=np.float64)
    if tau_true.shape != tau_hat.shape or tau_true.size == 0:
        raise DataError("need equal-length, nonempty delay arrays")
    err_cm = delay_error_cm(tau_hat, tau_true, sample_rate, speed_of_sound)
    acc = {
        float(eta): float(np.mean(err_cm < eta)) for eta in thresholds_cm
    }
    return MetricsReport(
        mae_cm=float(np.mean(err_cm)),
        rmse_cm=float(np.sqrt(np.mean(err_cm**2))),
        acc_at=acc,
        n_examples=int(tau_true.size),
        condition=condition,
    )


# ---------------------------------------------------------------------------
# estimators: baselines and models behind one callable signature
# ---------------------------------------------------------------------------


def gcc_estimator(tau_max: int, weighting: Weighting | None = None,
                  sample_rate: float = 16000.0):
    """Classic GCC argmax baseline as a batch estimator."""
    weighting = weighting or Weighting.phat()

    def estimate(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        out = np.empty(x1.shape[0], dtype=np.int64)
        for i in range(x1.shape[0]):
            corr = gcc(Frame(x1[i], sample_rate), Frame(x2[i], sample_rate),
                       weighting, tau_max)
            out[i] = estimate_delay(corr)
        return out

    return estimate


def beta_gcc_estimator(tau_max: int, betas=None, sample_rate: float = 16000.0):
    """Averaged beta-weighted GCC bank, argmax of the mean correlation."""
    betas = betas if betas is not None else [round(0.1 * b, 1) for b in range(11)]

    def estimate(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        out = np.empty(x1.shape[0], dtype=np.int64)
        n = x1.shape[1]
        for i in range(x1.shape[0]):
            spec1 = np.fft.fft(x1[i])
            spec2 = np.fft.fft(x2[i])
            acc = np.zeros(2 * tau_max + 1)
            for beta in betas:
                weighted = weighted_cross_spectrum(
                    spec1, spec2, Weighting.beta_phat(beta)
                )
                full = np.fft.ifft(weighted).real
                win = np.concatenate([full[n - tau_max:], full[:tau_max + 1]])
                norm = np.abs(win).max()
                if norm > 0:
                    acc += win / norm
            out[i] = estimate_delay(CorrelationWindow(acc, tau_max))
        return out

    return estimate


def model_estimator(model: TdoaModel):
    def estimate(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        return predict_batch(x1, x2, model)

    return estimate


# ---------------------------------------------------------------------------
# paired example rendering
# ---------------------------------------------------------------------------


@dataclass
class EvalExamples:
    """Rendered frames shared by every method under comparison."""

    x1: np.ndarray
    x2: np.ndarray
    labels: np.ndarray
    dry_rms: np.ndarray  # per-example dry-window RMS, for the silence filter
    condition: tuple[float, float] | None = None


@dataclass(frozen=True)
class EvalConfig:
    room_dimensions: tuple[float, float, float] = EVAL_ROOM_DIMENSIONS
    mic_positions: tuple = EVAL_MIC_POSITIONS
    sample_rate: float = 16000.0
    frame_length: int = 2048
    scenes_per_cell: int = 200
    windows_per_scene: int = 1
    snr_levels_db: tuple = SNR_LEVELS_DB
    t60_levels_s: tuple = T60_LEVELS_S
    thresholds_cm: tuple = DEFAULT_THRESHOLDS_CM
    seed: int = 0
    snippet_duration_s: float = 1.0
    exclude_silent: bool = False
    silence_rms_fraction: float = 0.05

    @property
    def tau_max(self) -> int:
        d = float(np.linalg.norm(
            np.subtract(self.mic_positions[0], self.mic_positions[1])
        ))
        return max_lag(d, self.sample_rate)


def render_condition(config: EvalConfig, snr_db: float, t60_s: float,
                     store: SnippetStore | None = None) -> EvalExamples:
    """Render all examples for one (SNR, T60) cell.

    Seeds derive from (config.seed, snr, t60, scene index), so any method
    evaluated on this cell sees identical frames, and re-rendering the cell
    reproduces them bit for bit.
    """
    n = config.frame_length
    room = RoomSpec(tuple(config.room_dimensions), t60=0.0)
    count = config.scenes_per_cell * config.windows_per_scene
    x1 = np.empty((count, n))
    x2 = np.empty((count, n))
    labels = np.empty(count, dtype=np.int64)
    dry_rms = np.empty(count)
    cell = f"snr={snr_db:g},t60={t60_s:g}"
    k = 0
    for s in range(config.scenes_per_cell):
        rng = substream(config.seed, "eval-cell", cell, s)
        scene = sample_scene(
            room, config.mic_positions[0], config.mic_positions[1], rng,
            config.sample_rate, t60_range=(t60_s, t60_s),
            snr_range_db=(snr_db, snr_db),
        )
        if store is not None:
            signal = store.sample("test", rng)
        else:
            signal = synth_speech(config.snippet_duration_s, rng,
                                  config.sample_rate)
        sig_rms = float(np.sqrt(np.mean(signal**2)))

        rir1 = render_rir(scene.room, scene.source, scene.mic1,
                          None, config.sample_rate)
        rir2 = render_rir(scene.room, scene.source, scene.mic2,
                          None, config.sample_rate)
        wet1 = fftconvolve(signal, rir1.taps)
        wet2 = fftconvolve(signal, rir2.taps)
        c = scene.room.speed_of_sound
        d_near = min(
            np.linalg.norm(np.subtract(scene.mic1, scene.source)),
            np.linalg.norm(np.subtract(scene.mic2, scene.source)),
        )
        base = int(math.floor(d_near * config.sample_rate / c))
        max_offset = signal.shape[0] - n
        if max_offset < 0:
            raise DataError("snippet shorter than the analysis window")
        for w in range(config.windows_per_scene):
            offset = int(rng.integers(0, max_offset + 1))
            start = base + offset
            a = wet1[start:start + n].copy()
            b = wet2[start:start + n].copy()
            if not math.isinf(snr_db):
                for mic_idx, frame in enumerate((a, b)):
                    power = float(np.mean(frame**2))
                    if power == 0.0:
                        raise DataError("all-zero analysis window under finite SNR")
                    std = math.sqrt(power / (10.0 ** (snr_db / 10.0)))
                    nrng = substream(scene.seed, "noise", mic_idx, w)
                    frame += std * nrng.standard_normal(n)
            x1[k], x2[k] = a, b
            labels[k] = scene.true_delay_samples
            dry_rms[k] = float(
                np.sqrt(np.mean(signal[offset:offset + n] ** 2))
            ) / max(sig_rms, 1e-12)
            k += 1
    return EvalExamples(x1, x2, labels, dry_rms, condition=(snr_db, t60_s))


def evaluate(estimator, examples: EvalExamples,
             thresholds_cm=DEFAULT_THRESHOLDS_CM,
             sample_rate: float = 16000.0,
             exclude_silent: bool = False,
             silence_rms_fraction: float = 0.05) -> MetricsReport:
    """Run one estimator over rendered examples and aggregate metrics."""
    keep = np.ones(len(examples.labels), dtype=bool)
    if exclude_silent:
        keep = examples.dry_rms >= silence_rms_fraction
        if not keep.any():
            raise DataError("silence filter removed every example")
    est = estimator(examples.x1[keep], examples.x2[keep])
    return metrics_from_pairs(
        examples.labels[keep], est, sample_rate, thresholds_cm,
        condition=examples.condition,
    )


# ---------------------------------------------------------------------------
# the grid
# ---------------------------------------------------------------------------


@dataclass
class EvalGrid:
    """Complete SNR x T60 grid of reports, per method."""

    cells: dict[tuple[str, float, float], MetricsReport] = field(default_factory=dict)

    def report(self, method: str, snr_db: float, t60_s: float) -> MetricsReport:
        return self.cells[(method, float(snr_db), float(t60_s))]

    def methods(self) -> list[str]:
        return sorted({key[0] for key in self.cells})

    def assert_complete(self, snr_levels, t60_levels):
        for method in self.methods():
            for snr in snr_levels:
                for t60 in t60_levels:
                    if (method, float(snr), float(t60)) not in self.cells:
                        raise DataError(
                            f"grid missing cell {method}/{snr}dB/{t60}s"
                        )

    def to_rows(self) -> list[dict]:
        rows = []
        for (method, snr, t60), report in sorted(self.cells.items()):
            row = {
                "method": method,
                "snr_db": snr,
                "t60_s": t60,
                "n": report.n_examples,
                "mae_cm": report.mae_cm,
                "rmse_cm": report.rmse_cm,
            }
            for eta, acc in sorted(report.acc_at.items()):
                row[f"acc_{eta:g}cm"] = acc
            rows.append(row)
        return rows


def evaluate_grid(methods: dict[str, callable], config: EvalConfig,
                  store: SnippetStore | None = None,
                  out_csv=None) -> EvalGrid:
    """Evaluate every method over the full SNR x T60 grid with paired
    frames per cell; optionally write the grid CSV."""
    if not methods:
        raise ConfigError("no methods to evaluate")
    grid = EvalGrid()
    for t60 in config.t60_levels_s:
        for snr in config.snr_levels_db:
            examples = render_condition(config, snr, t60, store)
            for name, estimator in methods.items():
                report = evaluate(
                    estimator, examples, config.thresholds_cm,
                    config.sample_rate, config.exclude_silent,
                    config.silence_rms_fraction,
                )
                grid.cells[(name, float(snr), float(t60))] = report
    grid.assert_complete(config.snr_levels_db, config.t60_levels_s)
    if out_csv is not None:
        write_grid_csv(grid, out_csv)
    return grid


def write_grid_csv(grid: EvalGrid, path):
    rows = grid.to_rows()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def scatter_dump(estimator, examples: EvalExamples, path) -> int:
    """Write one (tau_true, tau_hat) row per prediction; returns row count."""
    est = estimator(examples.x1, examples.x2)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau_true", "tau_hat"])
        for t, h in zip(examples.labels, est):
            writer.writerow([int(t), int(h)])
    return int(est.shape[0])


def metrics_from_scatter_csv(path, sample_rate: float = 16000.0,
                             thresholds_cm=DEFAULT_THRESHOLDS_CM) -> MetricsReport:
    """Recompute a report from a scatter CSV (round-trip integrity check)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        true, hat = [], []
        for row in reader:
            true.append(int(row["tau_true"]))
            hat.append(int(row["tau_hat"]))
    return metrics_from_pairs(true, hat, sample_rate, thresholds_cm)


def threshold_sweep(estimator, examples: EvalExamples, thresholds_cm,
                    sample_rate: float = 16000.0) -> list[tuple[float, float]]:
    """Accuracy at each threshold, sorted ascending (Acc is nondecreasing)."""
    est = estimator(examples.x1, examples.x2)
    err = delay_error_cm(est, examples.labels, sample_rate)
    return [
        (float(eta), float(np.mean(err < eta)))
        for eta in sorted(thresholds_cm)
    ]
