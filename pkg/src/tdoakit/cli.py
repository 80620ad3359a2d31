"""Command-line entry points: gcc, simulate, train, eval, predict.

Commands take a JSON config file (with a version field; unknown keys are
rejected) plus a few overriding flags. Exit codes: 0 success, 2 config
error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .dataset import DatasetWriter
from .errors import ConfigError, DataError, NumericError
from .evaluation import (
    DEFAULT_THRESHOLDS_CM,
    EvalConfig,
    SNR_LEVELS_DB,
    T60_LEVELS_S,
    beta_gcc_estimator,
    evaluate_grid,
    gcc_estimator,
    model_estimator,
    render_condition,
    scatter_dump,
)
from .gcc import Weighting, estimate_delay, gcc
from .model import TdoaModel, desk_config, paper_config, predict
from .room import RoomSpec, propagate, sample_scene
from .seeds import substream
from .signal import Frame
from .training import (
    DEFAULT_SAMPLE_RATE,
    TRAIN_MIC_POSITIONS,
    TRAIN_ROOM_DIMENSIONS,
    TrainConfig,
    load_wav,
    load_wav_store,
    synth_speech,
    synthetic_store,
    train,
)

CONFIG_VERSION = 1

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


# ---------------------------------------------------------------------------
# config schemas: key -> (description, default)
# ---------------------------------------------------------------------------

SIMULATE_SCHEMA = {
    "version": ("config format version, must be 1", CONFIG_VERSION),
    "seed": ("master seed for all random substreams", 0),
    "count": ("number of scenes to render", 100),
    "room_dimensions": ("room size in meters [Lx, Ly, Lz]", list(TRAIN_ROOM_DIMENSIONS)),
    "mic1": ("first microphone position in meters", list(TRAIN_MIC_POSITIONS[0])),
    "mic2": ("second microphone position in meters", list(TRAIN_MIC_POSITIONS[1])),
    "t60_range_s": ("reverberation time range [lo, hi] seconds", [0.2, 1.0]),
    "snr_range_db": ("signal-to-noise range [lo, hi] dB", [0.0, 30.0]),
    "frame_length": ("analysis window length in samples", 2048),
    "sample_rate": ("sample rate in Hz", DEFAULT_SAMPLE_RATE),
    "snippet_duration_s": ("synthetic source snippet duration", 1.0),
    "out_prefix": ("output path prefix for .jsonl/.f32", "dataset"),
    "threads": ("worker processes for scene rendering", 1),
}

TRAIN_SCHEMA = {
    "version": ("config format version, must be 1", CONFIG_VERSION),
    "seed": ("master seed for init, batch order and data", 0),
    "preset": ("model size preset: desk or paper", "desk"),
    "head": ("classifier head: ce_softmax or mse_soft_argmax", "ce_softmax"),
    "output_channels": ("number of correlation channels L", None),
    "sinc_enabled": ("use the band-pass first layer (false = plain conv)", True),
    "epochs": ("training epochs", 5),
    "batch_size": ("examples per optimizer step", 32),
    "learning_rate": ("base learning rate (cosine-decayed to 0)", 0.001),
    "num_scenes": ("training examples to render", 2000),
    "num_val_scenes": ("validation examples to render", 200),
    "snr_range_db": ("training SNR range [lo, hi] dB", [0.0, 30.0]),
    "t60_range_s": ("training T60 range [lo, hi] seconds", [0.2, 1.0]),
    "room_dimensions": ("training room size in meters", list(TRAIN_ROOM_DIMENSIONS)),
    "mic1": ("first microphone position", list(TRAIN_MIC_POSITIONS[0])),
    "mic2": ("second microphone position", list(TRAIN_MIC_POSITIONS[1])),
    "data_mode": ("source audio: synthetic or wav_dir", "synthetic"),
    "wav_dir": ("directory of <speaker>_*.wav files when data_mode=wav_dir", None),
    "out_dir": ("directory for checkpoints and the training log", "runs/train"),
    "deterministic": ("bit-reproducible mode", True),
    "precision": ("training arithmetic: single or double", "single"),
    "resume_from": ("checkpoint prefix to resume training state from", None),
}

EVAL_SCHEMA = {
    "version": ("config format version, must be 1", CONFIG_VERSION),
    "seed": ("master seed for paired scene rendering", 0),
    "checkpoint": ("model checkpoint prefix; omit to run baselines only", None),
    "baselines": ("baseline tags: gcc_phat and/or beta_gcc", ["gcc_phat"]),
    "room_dimensions": ("evaluation room size in meters", [6.0, 4.0, 2.5]),
    "mic1": ("first microphone position", [3.0, 1.75, 1.25]),
    "mic2": ("second microphone position", [3.0, 2.25, 1.25]),
    "snr_levels_db": ("SNR grid levels in dB", list(SNR_LEVELS_DB)),
    "t60_levels_s": ("T60 grid levels in seconds", list(T60_LEVELS_S)),
    "scenes_per_cell": ("scenes rendered per grid cell", 200),
    "windows_per_scene": ("analysis windows per scene", 1),
    "thresholds_cm": ("accuracy thresholds in centimeters", list(DEFAULT_THRESHOLDS_CM)),
    "sample_rate": ("sample rate in Hz", DEFAULT_SAMPLE_RATE),
    "frame_length": ("analysis window length in samples", 2048),
    "snippet_duration_s": ("synthetic source snippet duration", 1.0),
    "exclude_silent": ("drop windows whose dry source is near-silent", False),
    "scatter": ("also dump per-prediction scatter CSVs", True),
    "out_dir": ("directory for grid/sweep/scatter CSVs", "runs/eval"),
}


def _schema_epilog(schema: dict) -> str:
    lines = ["config keys:"]
    for key, (desc, default) in schema.items():
        lines.append(f"  {key}: {desc} (default: {default!r})")
    return "\n".join(lines)


def load_config(path, schema: dict) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    unknown = set(raw) - set(schema)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if raw.get("version") != CONFIG_VERSION:
        raise ConfigError(
            f"config version {raw.get('version')!r} unsupported; expected {CONFIG_VERSION}"
        )
    config = {key: default for key, (_, default) in schema.items()}
    config.update(raw)
    return config


# ---------------------------------------------------------------------------
# gcc
# ---------------------------------------------------------------------------


def _parse_weighting(text: str) -> Weighting:
    if text == "phat":
        return Weighting.phat()
    if text == "none":
        return Weighting.unweighted()
    if text.startswith("beta:"):
        return Weighting.beta_phat(float(text.split(":", 1)[1]))
    raise ConfigError(f"unknown weighting {text!r}; use phat, none or beta:<b>")


def _power_of_two_window(samples: np.ndarray) -> np.ndarray:
    n = 1
    while n * 2 <= samples.shape[0]:
        n *= 2
    return samples[:n]


def cmd_gcc(args) -> int:
    weighting = _parse_weighting(args.weighting)
    s1 = load_wav(args.in1, args.sample_rate)
    s2 = load_wav(args.in2, args.sample_rate)
    n = min(s1.shape[0], s2.shape[0])
    x1 = Frame(_power_of_two_window(s1[:n]), args.sample_rate)
    x2 = Frame(_power_of_two_window(s2[:n]), args.sample_rate)
    corr = gcc(x1, x2, weighting, args.max_lag)
    delay = estimate_delay(corr)
    print(f"delay {delay}")
    lines = ["lag,correlation"]
    lines += [f"{m},{float(v)!r}" for m, v in zip(corr.lags, corr.values)]
    csv_text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(csv_text)
    else:
        sys.stdout.write(csv_text)
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _render_scene_by_index(packed):
    config, index = packed
    room = RoomSpec(tuple(config["room_dimensions"]), t60=0.0)
    rng = substream(config["seed"], "scene", index)
    scene = sample_scene(
        room, tuple(config["mic1"]), tuple(config["mic2"]), rng,
        config["sample_rate"], tuple(config["t60_range_s"]),
        tuple(config["snr_range_db"]),
    )
    signal = synth_speech(config["snippet_duration_s"], rng, config["sample_rate"])
    x1, x2 = propagate(scene, signal, frame_length=config["frame_length"])
    return scene, x1.samples, x2.samples


def cmd_simulate(args) -> int:
    config = load_config(args.config, SIMULATE_SCHEMA)
    if args.seed is not None:
        config["seed"] = args.seed
    if args.out is not None:
        config["out_prefix"] = args.out
    count = config["count"]
    jobs = [(config, i) for i in range(count)]
    with DatasetWriter(
        config["out_prefix"], config["frame_length"], config["sample_rate"],
        meta={"seed": config["seed"], "count": count},
    ) as writer:
        if config["threads"] > 1:
            with ProcessPoolExecutor(max_workers=config["threads"]) as pool:
                for scene, x1, x2 in pool.map(_render_scene_by_index, jobs,
                                              chunksize=8):
                    writer.add(scene, x1, x2)
        else:
            for job in jobs:
                scene, x1, x2 = _render_scene_by_index(job)
                writer.add(scene, x1, x2)
    print(f"wrote {count} scenes to {config['out_prefix']}.jsonl/.f32")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _model_config_from(config: dict):
    preset = config["preset"]
    if preset == "desk":
        model_config = desk_config(head=config["head"])
    elif preset == "paper":
        model_config = paper_config(head=config["head"])
    else:
        raise ConfigError(f"unknown preset {preset!r}; use desk or paper")
    from dataclasses import replace

    backbone = model_config.backbone
    if config["output_channels"] is not None:
        backbone = replace(backbone, output_channels=int(config["output_channels"]))
    if not config["sinc_enabled"]:
        backbone = replace(backbone, sinc_enabled=False)
    classifier = replace(model_config.classifier, head=config["head"])
    return replace(model_config, backbone=backbone, classifier=classifier)


def cmd_train(args) -> int:
    config = load_config(args.config, TRAIN_SCHEMA)
    if args.seed is not None:
        config["seed"] = args.seed
    if args.out is not None:
        config["out_dir"] = args.out

    if config["data_mode"] == "synthetic":
        store = synthetic_store(seed=config["seed"])
    elif config["data_mode"] == "wav_dir":
        if not config["wav_dir"]:
            raise ConfigError("data_mode=wav_dir requires wav_dir")
        store = load_wav_store(config["wav_dir"], config.get("sample_rate", 16000.0))
    else:
        raise ConfigError(f"unknown data_mode {config['data_mode']!r}")

    train_config = TrainConfig(
        batch_size=config["batch_size"],
        learning_rate=config["learning_rate"],
        epochs=config["epochs"],
        seed=config["seed"],
        snr_range_db=tuple(config["snr_range_db"]),
        t60_range_s=tuple(config["t60_range_s"]),
        room_dimensions=tuple(config["room_dimensions"]),
        mic_positions=(tuple(config["mic1"]), tuple(config["mic2"])),
        num_scenes=config["num_scenes"],
        num_val_scenes=config["num_val_scenes"],
        deterministic=config["deterministic"],
    )
    if config["precision"] == "single":
        dtype = np.float32
    elif config["precision"] == "double":
        dtype = np.float64
    else:
        raise ConfigError(f"precision must be single or double, got {config['precision']!r}")
    model = TdoaModel(_model_config_from(config), seed=config["seed"], dtype=dtype)
    result = train(model, train_config, store, config["out_dir"],
                   resume_from=config["resume_from"])
    print(f"best val acc {result.best_val_acc:.4f}")
    print(f"checkpoints in {config['out_dir']}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    config = load_config(args.config, EVAL_SCHEMA)
    if args.seed is not None:
        config["seed"] = args.seed
    if args.checkpoint is not None:
        config["checkpoint"] = args.checkpoint
    out_dir = Path(config["out_dir"])

    eval_config = EvalConfig(
        room_dimensions=tuple(config["room_dimensions"]),
        mic_positions=(tuple(config["mic1"]), tuple(config["mic2"])),
        sample_rate=config["sample_rate"],
        frame_length=config["frame_length"],
        scenes_per_cell=config["scenes_per_cell"],
        windows_per_scene=config["windows_per_scene"],
        snr_levels_db=tuple(config["snr_levels_db"]),
        t60_levels_s=tuple(config["t60_levels_s"]),
        thresholds_cm=tuple(config["thresholds_cm"]),
        seed=config["seed"],
        snippet_duration_s=config["snippet_duration_s"],
        exclude_silent=config["exclude_silent"],
    )

    methods: dict = {}
    for tag in config["baselines"]:
        if tag == "gcc_phat":
            methods[tag] = gcc_estimator(eval_config.tau_max,
                                         sample_rate=eval_config.sample_rate)
        elif tag == "beta_gcc":
            methods[tag] = beta_gcc_estimator(eval_config.tau_max,
                                              sample_rate=eval_config.sample_rate)
        else:
            raise ConfigError(f"unknown baseline {tag!r}")
    if config["checkpoint"]:
        model = TdoaModel.load(config["checkpoint"])
        methods["model"] = model_estimator(model)
    if not methods:
        raise ConfigError("nothing to evaluate: no baselines and no checkpoint")

    grid = evaluate_grid(methods, eval_config, out_csv=out_dir / "grid.csv")
    if config["scatter"]:
        snr = max(eval_config.snr_levels_db)
        t60 = min(eval_config.t60_levels_s)
        examples = render_condition(eval_config, snr, t60)
        for name, estimator in methods.items():
            scatter_dump(estimator, examples, out_dir / f"scatter_{name}.csv")
    print(f"grid written to {out_dir / 'grid.csv'}")
    for (name, snr, t60), report in sorted(grid.cells.items()):
        print(
            f"{name} snr={snr:g}dB t60={t60:g}s: mae {report.mae_cm:.2f} cm, "
            f"acc@10cm {report.acc_at.get(10.0, float('nan')):.3f}"
        )
    return 0


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


def cmd_predict(args) -> int:
    model = TdoaModel.load(args.checkpoint)
    s1 = load_wav(args.in1, model.config.sample_rate)
    s2 = load_wav(args.in2, model.config.sample_rate)
    n = model.config.frame_length
    if s1.shape[0] < n or s2.shape[0] < n:
        raise DataError(f"inputs must be at least {n} samples long")
    x1 = Frame(s1[:n], model.config.sample_rate)
    x2 = Frame(s2[:n], model.config.sample_rate)
    delay, posterior = predict(x1, x2, model)
    print(f"delay {delay}")
    lines = ["lag,probability"]
    lines += [
        f"{m},{float(p)!r}"
        for m, p in zip(posterior.lags, posterior.probabilities)
    ]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tdoakit",
        description="Time-delay estimation toolkit: GCC-PHAT, a learned "
                    "shift-equivariant front end, and a room simulator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "gcc", help="estimate the delay between two WAV files",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--in1", required=True, help="first WAV file")
    p.add_argument("--in2", required=True, help="second WAV file")
    p.add_argument("--weighting", default="phat",
                   help="phat, none, or beta:<b> with b in [0,1]")
    p.add_argument("--max-lag", type=int, default=23,
                   help="lag window half-width in samples")
    p.add_argument("--sample-rate", type=float, default=DEFAULT_SAMPLE_RATE,
                   help="required sample rate of the inputs")
    p.add_argument("--out", help="write the correlation CSV here instead of stdout")
    p.set_defaults(func=cmd_gcc)

    p = sub.add_parser(
        "simulate", help="render a labeled scene dataset to disk",
        epilog=_schema_epilog(SIMULATE_SCHEMA),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="override the config out_prefix")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser(
        "train", help="train a model on simulated scenes",
        epilog=_schema_epilog(TRAIN_SCHEMA),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="override the config out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "eval", help="run the SNR x T60 evaluation grid",
        epilog=_schema_epilog(EVAL_SCHEMA),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--checkpoint", help="override the config checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "predict", help="predict the delay between two WAVs with a checkpoint",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--checkpoint", required=True, help="checkpoint path prefix")
    p.add_argument("--in1", required=True, help="first WAV file")
    p.add_argument("--in2", required=True, help="second WAV file")
    p.add_argument("--out", help="write the posterior CSV here instead of stdout")
    p.set_defaults(func=cmd_predict)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
