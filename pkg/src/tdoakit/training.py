"""Data pipeline and optimization loop: WAV ingestion, a synthetic
speech-like source generator, scene-based example construction, Adam with
a cosine learning-rate schedule, and the training driver.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from . import nn
from .errors import ConfigError, DataError, NumericError
from .gcc import max_lag
from .model import (
    ModelConfig,
    TdoaModel,
    cross_entropy_with_logits,
    normalize_input,
    predict_batch,
    soft_argmax,
    squared_error_loss,
)
from .nn import Tensor, backward
from .room import RoomSpec, propagate, sample_scene
from .seeds import substream

DEFAULT_SAMPLE_RATE = 16000.0

TRAIN_ROOM_DIMENSIONS = (7.0, 5.0, 3.0)
TRAIN_MIC_POSITIONS = ((3.5, 2.25, 1.5), (3.5, 2.75, 1.5))


# ---------------------------------------------------------------------------
# WAV ingestion
# ---------------------------------------------------------------------------


def load_wav(path, expected_rate: float = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Load a mono 16-bit PCM or 32-bit float WAV as samples in [-1, 1].

    Files at any other sample rate are rejected outright (resample offline;
    silent resampling would corrupt delay ground truth).
    """
    try:
        rate, data = wavfile.read(path)
    except (ValueError, FileNotFoundError) as exc:
        raise DataError(f"cannot read WAV {path}: {exc}") from exc
    if rate != expected_rate:
        raise DataError(
            f"{path}: sample rate {rate} Hz, expected {expected_rate:g} Hz; "
            "resample required"
        )
    if data.ndim != 1:
        raise DataError(f"{path}: expected mono, got {data.ndim} channels")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.float32:
        return data.astype(np.float64)
    raise DataError(
        f"{path}: unsupported sample format {data.dtype}; "
        "use 16-bit PCM or 32-bit float"
    )


def save_wav(path, samples: np.ndarray, sample_rate: float = DEFAULT_SAMPLE_RATE):
    """Write a mono float32 WAV (bit-faithful round trip with load_wav)."""
    wavfile.write(path, int(sample_rate), np.asarray(samples, dtype=np.float32))


# ---------------------------------------------------------------------------
# synthetic speech-like source
# ---------------------------------------------------------------------------


def _smooth_track(rng, n, lo, hi, steps_per_s, sample_rate, start=None):
    """Piecewise-linear random walk in [lo, hi], interpolated per sample."""
    n_knots = max(int(n / sample_rate * steps_per_s) + 2, 2)
    knots = np.empty(n_knots)
    knots[0] = rng.uniform(lo, hi) if start is None else start
    span = hi - lo
    for i in range(1, n_knots):
        step = rng.normal(0.0, 0.15 * span)
        knots[i] = np.clip(knots[i - 1] + step, lo, hi)
    x = np.linspace(0, n_knots - 1, n)
    return np.interp(x, np.arange(n_knots), knots)


def synth_speech(duration_s: float, rng: np.random.Generator,
                 sample_rate: float = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Speech-like test signal: drifting-pitch harmonic source with
    time-varying formant emphasis, voiced/unvoiced alternation and
    broadband unvoiced bursts. Never silent over any analysis window.
    """
    n = int(round(duration_s * sample_rate))
    if n < 2048:
        raise ConfigError("duration too short for one analysis window")

    f0 = _smooth_track(rng, n, 80.0, 300.0, steps_per_s=8, sample_rate=sample_rate)
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate

    formants = [
        _smooth_track(rng, n, 250.0, 900.0, 4, sample_rate),
        _smooth_track(rng, n, 900.0, 2400.0, 4, sample_rate),
        _smooth_track(rng, n, 2200.0, 3600.0, 4, sample_rate),
    ]
    bandwidths = (180.0, 260.0, 380.0)

    voiced = np.zeros(n)
    max_harmonics = int(3800.0 / 80.0)
    for h in range(1, max_harmonics + 1):
        f_h = h * f0
        active = f_h < 3800.0
        if not np.any(active):
            break
        env = 0.15 / h
        for track, bw in zip(formants, bandwidths):
            env = env + 1.0 / (h * (1.0 + ((f_h - track) / bw) ** 2))
        voiced += np.where(active, env, 0.0) * np.sin(
            h * phase + rng.uniform(0, 2 * np.pi)
        )

    # unvoiced component: high-band emphasized noise
    white = rng.standard_normal(n)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    emphasis = 1.0 / (1.0 + ((freqs - 3000.0) / 1800.0) ** 2) + 0.05
    unvoiced = np.fft.irfft(spectrum * emphasis, n)
    unvoiced /= np.sqrt(np.mean(unvoiced**2))

    # syllable-rate voicing mix and overall amplitude modulation
    voicing = _smooth_track(rng, n, 0.0, 1.0, steps_per_s=5, sample_rate=sample_rate)
    voicing = np.clip(voicing * 1.4 - 0.2, 0.0, 1.0)
    level = _smooth_track(rng, n, 0.35, 1.0, steps_per_s=3, sample_rate=sample_rate)

    rms_voiced = np.sqrt(np.mean(voiced**2))
    out = level * (
        voicing * voiced / max(rms_voiced, 1e-12)
        + (1.0 - voicing) * 0.35 * unvoiced
    )
    # low-level broadband floor keeps every spectral bin conditioned
    out += 0.02 * rng.standard_normal(n)
    peak = np.abs(out).max()
    return 0.9 * out / peak


# ---------------------------------------------------------------------------
# snippet store with speaker-disjoint splits
# ---------------------------------------------------------------------------


@dataclass
class SnippetStore:
    """Audio snippets keyed by speaker, split train/val/test by speaker."""

    snippets: dict[str, list[np.ndarray]]
    splits: dict[str, list[str]]  # split name -> speaker ids

    def __post_init__(self):
        seen: set[str] = set()
        for split, speakers in self.splits.items():
            overlap = seen & set(speakers)
            if overlap:
                raise DataError(
                    f"speakers {sorted(overlap)} appear in multiple splits"
                )
            seen |= set(speakers)
        for split, speakers in self.splits.items():
            for speaker in speakers:
                if speaker not in self.snippets or not self.snippets[speaker]:
                    raise DataError(f"split {split!r}: no snippets for {speaker!r}")

    def speakers(self, split: str) -> list[str]:
        return list(self.splits[split])

    def sample(self, split: str, rng: np.random.Generator) -> np.ndarray:
        speaker = self.splits[split][rng.integers(len(self.splits[split]))]
        snippets = self.snippets[speaker]
        return snippets[rng.integers(len(snippets))]


def synthetic_store(n_speakers: int = 12, snippets_per_speaker: int = 4,
                    duration_s: float = 2.0, seed: int = 0,
                    sample_rate: float = DEFAULT_SAMPLE_RATE) -> SnippetStore:
    """Synthetic stand-in for a speech corpus, split 80/10/10 by speaker."""
    snippets: dict[str, list[np.ndarray]] = {}
    for i in range(n_speakers):
        speaker = f"synth-{i:03d}"
        rows = []
        for j in range(snippets_per_speaker):
            rng = substream(seed, "synth-speech", i, j)
            rows.append(synth_speech(duration_s, rng, sample_rate))
        snippets[speaker] = rows
    ids = sorted(snippets)
    n_val = max(1, n_speakers // 10)
    n_test = max(1, n_speakers // 10)
    n_train = n_speakers - n_val - n_test
    splits = {
        "train": ids[:n_train],
        "val": ids[n_train:n_train + n_val],
        "test": ids[n_train + n_val:],
    }
    return SnippetStore(snippets, splits)


def load_wav_store(directory, expected_rate: float = DEFAULT_SAMPLE_RATE,
                   val_fraction: float = 0.1, test_fraction: float = 0.1,
                   seed: int = 0) -> SnippetStore:
    """Build a store from <speaker>_<anything>.wav files in a directory."""
    directory = Path(directory)
    snippets: dict[str, list[np.ndarray]] = {}
    for path in sorted(directory.glob("*.wav")):
        speaker = path.stem.split("_")[0]
        snippets.setdefault(speaker, []).append(load_wav(path, expected_rate))
    if not snippets:
        raise DataError(f"no WAV files found in {directory}")
    ids = sorted(snippets)
    rng = substream(seed, "speaker-split")
    rng.shuffle(ids)
    n_val = max(1, int(len(ids) * val_fraction)) if len(ids) >= 3 else 0
    n_test = max(1, int(len(ids) * test_fraction)) if len(ids) >= 3 else 0
    n_train = len(ids) - n_val - n_test
    splits = {
        "train": ids[:n_train],
        "val": ids[n_train:n_train + n_val],
        "test": ids[n_train + n_val:],
    }
    return SnippetStore(snippets, {k: v for k, v in splits.items() if v})


# ---------------------------------------------------------------------------
# example construction
# ---------------------------------------------------------------------------

#: Analysis windows below this RMS (relative to snippet RMS) are considered
#: silent and retried at a new offset.
SILENCE_RMS_FRACTION = 0.05
SILENCE_RETRIES = 10


def make_training_example(store: SnippetStore, config: "TrainConfig",
                          rng: np.random.Generator, split: str = "train",
                          max_order: int | None = None):
    """One labeled pair: sample a scene, a snippet and a window offset.

    Returns (x1, x2, tau) as raw float arrays plus the scene. Silent
    windows are retried up to SILENCE_RETRIES times, then skipped with an
    error.
    """
    room = RoomSpec(tuple(config.room_dimensions), t60=0.0)
    snippet = store.sample(split, rng)
    snippet_rms = float(np.sqrt(np.mean(snippet**2)))
    scene = sample_scene(
        room, config.mic_positions[0], config.mic_positions[1], rng,
        config.sample_rate, tuple(config.t60_range_s), tuple(config.snr_range_db),
    )
    n = config.frame_length
    c = scene.room.speed_of_sound
    d_near = min(
        np.linalg.norm(np.subtract(scene.mic1, scene.source)),
        np.linalg.norm(np.subtract(scene.mic2, scene.source)),
    )
    max_offset = snippet.shape[0] - n - int(d_near * config.sample_rate / c) - 1
    if max_offset < 0:
        raise DataError("snippet too short for the analysis window")
    for _ in range(SILENCE_RETRIES):
        offset = int(rng.integers(0, max_offset + 1))
        window = snippet[offset:offset + n]
        if np.sqrt(np.mean(window**2)) >= SILENCE_RMS_FRACTION * snippet_rms:
            break
    else:
        raise DataError("no non-silent window found in snippet")
    x1, x2 = propagate(scene, snippet, max_order=max_order,
                       frame_length=n, window_offset=offset)
    return x1.samples, x2.samples, scene.true_delay_samples, scene


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment estimates per parameter plus the step count."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: list[Tensor]) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data, dtype=np.float64) for p in params],
            v=[np.zeros_like(p.data, dtype=np.float64) for p in params],
        )


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState,
              lr: float) -> AdamState:
    """Standard bias-corrected Adam update, applied in place."""
    if len(params) != len(grads):
        raise ConfigError("params and grads must align")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(
                f"non-finite gradient for parameter {i} ({p.name or 'unnamed'}) "
                f"at step {state.step}"
            )
        if g.shape != p.data.shape:
            raise ConfigError(f"gradient shape {g.shape} != param {p.data.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        update = p.data.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.data = update.astype(p.data.dtype)
    return state


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine decay from base_lr at step 0 to 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return [None if g is None else g * scale for g in grads]


# ---------------------------------------------------------------------------
# training driver
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 0.001
    epochs: int = 30
    seed: int = 0
    snr_range_db: tuple[float, float] = (0.0, 30.0)
    t60_range_s: tuple[float, float] = (0.2, 1.0)
    room_dimensions: tuple[float, float, float] = TRAIN_ROOM_DIMENSIONS
    mic_positions: tuple = TRAIN_MIC_POSITIONS
    sample_rate: float = DEFAULT_SAMPLE_RATE
    frame_length: int = 2048
    num_scenes: int = 2000
    num_val_scenes: int = 200
    grad_clip_norm: float = 5.0
    swap_augment: bool = True
    shift_augment: bool = True
    deterministic: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batchnorm)")
        for name in ("snr_range_db", "t60_range_s"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ConfigError(f"{name} is empty: ({lo}, {hi})")

    @property
    def tau_max(self) -> int:
        d = float(np.linalg.norm(
            np.subtract(self.mic_positions[0], self.mic_positions[1])
        ))
        return max_lag(d, self.sample_rate)


@dataclass
class Dataset:
    """Pre-rendered example tensors kept in memory for epoch reuse."""

    x1: np.ndarray  # (n, frame_length)
    x2: np.ndarray
    labels: np.ndarray  # (n,) integer delays

    def __len__(self):
        return self.labels.shape[0]


def build_dataset(store: SnippetStore, config: TrainConfig, split: str,
                  count: int, seed_label: str) -> Dataset:
    """Render `count` examples; deterministic per (config.seed, seed_label)."""
    x1 = np.empty((count, config.frame_length))
    x2 = np.empty((count, config.frame_length))
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        rng = substream(config.seed, seed_label, i)
        a, b, tau, _ = make_training_example(store, config, rng, split)
        x1[i], x2[i], labels[i] = a, b, tau
    return Dataset(x1, x2, labels)


def _normalized_batch(x: np.ndarray) -> np.ndarray:
    return np.stack([normalize_input(row) for row in x])[:, None, :]


@dataclass
class TrainResult:
    log_rows: list[dict]
    best_checkpoint: str
    last_checkpoint: str
    best_val_acc: float


def _loss_for_batch(model: TdoaModel, x1, x2, labels, training=True) -> Tensor:
    logits = model.logits_for_pair(
        Tensor(_normalized_batch(x1).astype(model.dtype)),
        Tensor(_normalized_batch(x2).astype(model.dtype)),
        training=training,
    )
    if model.config.classifier.head == "mse_soft_argmax":
        est = soft_argmax(logits, model.config.tau_max)
        return squared_error_loss(est, labels.astype(np.float64))
    return cross_entropy_with_logits(logits, labels + model.config.tau_max)


def validation_accuracy(model: TdoaModel, data: Dataset,
                        threshold_cm: float = 10.0,
                        batch_size: int = 64) -> float:
    """Fraction of validation examples within the distance threshold."""
    c = 343.0
    fs = model.config.sample_rate
    hits = 0
    for lo in range(0, len(data), batch_size):
        hi = min(lo + batch_size, len(data))
        est = predict_batch(data.x1[lo:hi], data.x2[lo:hi], model)
        err_cm = np.abs(est - data.labels[lo:hi]) * c / fs * 100.0
        hits += int(np.sum(err_cm < threshold_cm))
    return hits / len(data)


def train(model: TdoaModel, config: TrainConfig, store: SnippetStore,
          out_dir, train_data: Dataset | None = None,
          val_data: Dataset | None = None,
          resume_from: str | None = None,
          stop_after_epoch: int | None = None) -> TrainResult:
    """Run the optimization loop; saves best/last checkpoints and a CSV log.

    Fully deterministic under config.seed: batch order, augmentation and
    data generation all derive from named substreams, and resuming from the
    epoch-k state file reproduces the remaining epochs bit-for-bit.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if train_data is None:
        train_data = build_dataset(store, config, "train",
                                   config.num_scenes, "train-scene")
    if val_data is None:
        val_data = build_dataset(store, config, "val",
                                 config.num_val_scenes, "val-scene")

    params = model.parameters()
    state = AdamState.init(params)
    start_epoch = 0
    best_val = -1.0
    log_rows: list[dict] = []
    if resume_from is not None:
        start_epoch, best_val, log_rows = _load_train_state(
            resume_from, model, state
        )

    n = len(train_data)
    steps_per_epoch = n // config.batch_size
    if steps_per_epoch == 0:
        raise ConfigError("dataset smaller than one batch")
    total_steps = config.epochs * steps_per_epoch

    best_path = str(out_dir / "best")
    last_path = str(out_dir / "last")
    log_path = out_dir / "train_log.csv"

    # stop_after_epoch pauses a run without changing the cosine schedule,
    # so a later resume reproduces the uninterrupted trajectory exactly
    end_epoch = config.epochs if stop_after_epoch is None \
        else min(stop_after_epoch + 1, config.epochs)

    for epoch in range(start_epoch, end_epoch):
        order = substream(config.seed, "batch-order", epoch).permutation(n)
        epoch_ce = 0.0
        lr = config.learning_rate
        for b in range(steps_per_epoch):
            step = epoch * steps_per_epoch + b
            lr = cosine_lr(step, total_steps, config.learning_rate)
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            x1 = train_data.x1[idx].copy()
            x2 = train_data.x2[idx].copy()
            labels = train_data.labels[idx].copy()
            if config.swap_augment:
                aug = substream(config.seed, "augment", epoch, b)
                swap = aug.random(idx.size) < 0.5
                x1[swap], x2[swap] = x2[swap], x1[swap].copy()
                labels[swap] = -labels[swap]
            if config.shift_augment:
                # rolling one channel by d moves the true delay to
                # label + d exactly (the pipeline is circularly
                # equivariant), so this relabels rather than approximates
                tau_max = config.tau_max
                shift_rng = substream(config.seed, "shift", epoch, b)
                lo = -(tau_max + labels)
                hi = tau_max - labels
                shifts = shift_rng.integers(lo, hi + 1)
                for j, d in enumerate(shifts):
                    if d != 0:
                        x1[j] = np.roll(x1[j], d)
                labels = labels + shifts

            loss = _loss_for_batch(model, x1, x2, labels, training=True)
            if not np.isfinite(loss.data):
                model.save(last_path, extra={"aborted_at_step": step})
                raise NumericError(
                    f"loss became non-finite at epoch {epoch} step {b}; "
                    f"last good checkpoint kept at {last_path}"
                )
            model.zero_grad()
            backward(loss)
            grads = clip_gradients([p.grad for p in params],
                                   config.grad_clip_norm)
            adam_step(params, grads, state, lr)
            epoch_ce += float(loss.data)

        val_acc = validation_accuracy(model, val_data)
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_ce": epoch_ce / steps_per_epoch,
            "val_acc": val_acc,
        }
        log_rows.append(row)
        model.save(last_path)
        _save_train_state(last_path, model, state, epoch + 1, best_val, log_rows)
        if val_acc > best_val:
            best_val = val_acc
            model.save(best_path)

        with open(log_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "lr", "train_ce", "val_acc"])
            writer.writeheader()
            writer.writerows(log_rows)

    return TrainResult(log_rows, best_path, last_path, best_val)


def _save_train_state(path_prefix: str, model: TdoaModel, state: AdamState,
                      next_epoch: int, best_val: float, log_rows: list[dict]):
    """Float64 sidecar with exact optimizer state for bit-exact resume.

    The checkpoint blob itself stays float32 per the exchange format; this
    sidecar exists only so training can continue without quantization.
    """
    prefix = Path(path_prefix)
    params = model.named_parameters()
    arrays = {f"param.{k}": v.data for k, v in params.items()}
    arrays.update({f"m.{i}": m for i, m in enumerate(state.m)})
    arrays.update({f"v.{i}": v for i, v in enumerate(state.v)})
    arrays.update({f"buf.{k}": v for k, v in model.named_buffers().items()})
    np.savez(prefix.with_suffix(".state.npz"), **arrays)
    meta = {
        "next_epoch": next_epoch,
        "adam_step": state.step,
        "best_val": best_val,
        "log_rows": log_rows,
    }
    prefix.with_suffix(".state.json").write_text(json.dumps(meta))


def _load_train_state(path_prefix: str, model: TdoaModel, state: AdamState):
    prefix = Path(path_prefix)
    data = np.load(prefix.with_suffix(".state.npz"))
    params = model.named_parameters()
    for key, value in params.items():
        value.data = data[f"param.{key}"]
    buffers = model.named_buffers()
    for key in buffers:
        buffers[key][...] = data[f"buf.{key}"]
    for i in range(len(state.m)):
        state.m[i] = data[f"m.{i}"]
        state.v[i] = data[f"v.{i}"]
    meta = json.loads(prefix.with_suffix(".state.json").read_text())
    state.step = meta["adam_step"]
    return meta["next_epoch"], meta["best_val"], list(meta["log_rows"])
