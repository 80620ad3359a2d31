"""Acceptance suite: one test per exit criterion, each printing a PASS line
with its measured numbers. The desk-scale training fixtures are shared, so
this module trains three small models once and reuses them.

Run with `pytest tests/test_acceptance.py -v -s` to watch the lines appear.
"""

import hashlib
import json
import math
import time

import numpy as np
import pytest

from tdoakit.cli import main as cli_main
from tdoakit.evaluation import (
    EvalConfig,
    evaluate,
    gcc_estimator,
    metrics_from_pairs,
    metrics_from_scatter_csv,
    model_estimator,
    render_condition,
    scatter_dump,
    threshold_sweep,
)
from tdoakit.gcc import Weighting, gcc
from tdoakit.model import (
    TdoaModel,
    cross_entropy_with_logits,
    desk_config,
    phat_correlation,
    soft_argmax,
    squared_error_loss,
)
from tdoakit.model import ModelConfig, BackboneConfig, ClassifierConfig
from tdoakit.nn import (
    BatchNorm1d,
    CircularConv1d,
    SincFilterBank,
    Tensor,
    circular_conv1d,
    leaky_relu,
    softmax,
    sum_all,
    synthesize_sinc_kernels,
)
from tdoakit.room import RoomSpec, render_rir
from tdoakit.seeds import substream
from tdoakit.signal import Frame
from tdoakit.training import (
    TrainConfig,
    build_dataset,
    synth_speech,
    synthetic_store,
    train,
)

from test_nn import assert_grads_close, finite_difference_grads

FS = 16000.0
TAU_MAX = 23


def report(criterion: int, text: str):
    print(f"\n[criterion {criterion}] PASS - {text}")


# ---------------------------------------------------------------------------
# shared desk-scale training fixtures (criteria 6 and 7)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def store():
    return synthetic_store(seed=0)


@pytest.fixture(scope="module")
def desk_train_config():
    return TrainConfig(epochs=5, num_scenes=2000, num_val_scenes=200, seed=0)


@pytest.fixture(scope="module")
def desk_datasets(store, desk_train_config):
    config = desk_train_config
    t0 = time.time()
    train_data = build_dataset(store, config, "train", config.num_scenes,
                               "train-scene")
    val_data = build_dataset(store, config, "val", config.num_val_scenes,
                             "val-scene")
    return train_data, val_data, time.time() - t0


@pytest.fixture(scope="module")
def trained_main(store, desk_train_config, desk_datasets, tmp_path_factory):
    train_data, val_data, data_seconds = desk_datasets
    out = tmp_path_factory.mktemp("train-main")
    model = TdoaModel(desk_config(), seed=desk_train_config.seed,
                      dtype=np.float32)
    t0 = time.time()
    result = train(model, desk_train_config, store, out,
                   train_data=train_data, val_data=val_data)
    train_seconds = time.time() - t0
    best = TdoaModel.load(result.best_checkpoint)
    return best, result, data_seconds + train_seconds


@pytest.fixture(scope="module")
def trained_l1(store, desk_train_config, desk_datasets, tmp_path_factory):
    train_data, val_data, _ = desk_datasets
    out = tmp_path_factory.mktemp("train-l1")
    model = TdoaModel(desk_config(output_channels=1),
                      seed=desk_train_config.seed, dtype=np.float32)
    result = train(model, desk_train_config, store, out,
                   train_data=train_data, val_data=val_data)
    return TdoaModel.load(result.best_checkpoint)


@pytest.fixture(scope="module")
def trained_mse(store, desk_train_config, desk_datasets, tmp_path_factory):
    train_data, val_data, _ = desk_datasets
    out = tmp_path_factory.mktemp("train-mse")
    model = TdoaModel(desk_config(head="mse_soft_argmax"),
                      seed=desk_train_config.seed, dtype=np.float32)
    result = train(model, desk_train_config, store, out,
                   train_data=train_data, val_data=val_data)
    return TdoaModel.load(result.best_checkpoint)


@pytest.fixture(scope="module")
def low_snr_cells():
    """T60 = 0.2 s cells at SNR 0/6/12 dB, rendered once and shared by
    every method (paired comparison)."""
    config = EvalConfig(scenes_per_cell=200, seed=42)
    return config, {
        snr: render_condition(config, snr, 0.2) for snr in (0.0, 6.0, 12.0)
    }


# ---------------------------------------------------------------------------
# criterion 1: exact recovery with random backbones
# ---------------------------------------------------------------------------


def test_criterion_1_exact_recovery():
    taus = np.arange(-TAU_MAX, TAU_MAX + 1)
    n_inits = 100
    worst_tap = 0.0
    hits = 0
    t0 = time.time()
    for i in range(n_inits):
        model = TdoaModel(desk_config(), seed=1000 + i)
        x = synth_speech(2048 / FS, substream(500, "crit1", i))[:2048]
        from tdoakit.model import normalize_input

        xn = normalize_input(x)
        x1 = np.stack([np.roll(xn, t) for t in taus])[:, None, :]
        y1 = model.backbone_forward(Tensor(x1), training=False)
        y2_single = model.backbone_forward(Tensor(xn[None, None, :]),
                                           training=False)
        y2 = Tensor(np.broadcast_to(y2_single.data,
                                    y1.data.shape).copy())
        corr = phat_correlation(y1, y2, TAU_MAX)

        expected = np.zeros_like(corr.data)
        for j, t in enumerate(taus):
            expected[j, t + TAU_MAX, :] = 1.0
        tap_dev = float(np.abs(corr.data - expected).max())
        worst_tap = max(worst_tap, tap_dev)
        assert tap_dev < 1e-6, f"init {i}: per-tap deviation {tap_dev:.3e}"

        from tdoakit.model import transpose_last_two

        logits = model.classifier_forward(transpose_last_two(corr),
                                          training=False)
        predicted = np.argmax(logits.data, axis=1) - TAU_MAX
        hits += int(np.sum(predicted == taus))
    elapsed = time.time() - t0
    total = n_inits * taus.size
    assert hits == total, f"exact recovery {hits}/{total}"
    assert elapsed < 120.0, f"runtime {elapsed:.1f}s exceeds 2 min target"
    report(1, f"exact recovery {hits}/{total} across {n_inits} random inits, "
              f"worst per-tap deviation {worst_tap:.2e}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 2: shift equivariance in single precision
# ---------------------------------------------------------------------------


def test_criterion_2_shift_equivariance():
    worst = 0.0
    for seed in (0, 1, 2):
        model = TdoaModel(desk_config(), seed=seed, dtype=np.float32)
        x = synth_speech(2048 / FS, substream(501, "crit2", seed))[:2048]
        x32 = x.astype(np.float32)[None, None, :]
        base = model.backbone_forward(Tensor(x32), training=False).data
        scale = max(float(np.abs(base).max()), 1.0)
        for tau in (1, 7, 501, 2047):
            shifted = model.backbone_forward(
                Tensor(np.roll(x32, tau, axis=2)), training=False
            ).data
            residual = float(
                np.abs(shifted - np.roll(base, tau, axis=2)).max()
            ) / scale
            worst = max(worst, residual)
            assert residual < 1e-5, f"seed {seed} tau {tau}: {residual:.2e}"
    report(2, f"composed front-end equivariance, worst residual {worst:.2e} "
              f"(single precision, tau in {{1,7,501,2047}})")


# ---------------------------------------------------------------------------
# criterion 3: GCC against the time-domain oracle
# ---------------------------------------------------------------------------


def test_criterion_3_gcc_oracle_equivalence():
    rng = np.random.default_rng(3)
    lags = np.arange(-TAU_MAX, TAU_MAX + 1)
    worst = 0.0
    for _ in range(1000):
        x1 = rng.standard_normal(2048)
        x2 = rng.standard_normal(2048)
        fast = gcc(Frame(x1, FS), Frame(x2, FS), Weighting.unweighted(),
                   TAU_MAX).values
        oracle = np.array([np.dot(x1, np.roll(x2, m)) for m in lags])
        worst = max(worst, float(np.abs(fast - oracle).max()))
        assert worst < 1e-8, f"deviation {worst:.3e}"
    report(3, f"1000 random pairs (N=2048), max |fft - oracle| = {worst:.2e}")


# ---------------------------------------------------------------------------
# criterion 4: gradient correctness everywhere
# ---------------------------------------------------------------------------


def _masked_loss(out, mask):
    return sum_all(Tensor(out.data * mask, parents=(out,),
                          backward_fn=lambda g: (g * mask,)))


def test_criterion_4_gradient_checks():
    checked = 0
    rng_master = np.random.default_rng(4)

    # circular convolutions at several shapes
    for b, i, o, k, n in [(2, 2, 3, 5, 12), (1, 3, 1, 3, 8), (3, 1, 2, 7, 16),
                          (2, 4, 4, 9, 20)]:
        rng = np.random.default_rng(rng_master.integers(2**32))
        x = Tensor(rng.standard_normal((b, i, n)), requires_grad=True)
        w = Tensor(rng.standard_normal((o, i, k)) * 0.4, requires_grad=True)
        bias = Tensor(rng.standard_normal(o) * 0.1, requires_grad=True)
        mask = rng.standard_normal((b, o, n))
        analytic, numeric = finite_difference_grads(
            lambda: _masked_loss(circular_conv1d(x, w, bias), mask),
            [x, w, bias],
        )
        assert_grads_close(analytic, numeric)
        checked += 1

    # sinc kernel synthesis
    for f_count, klen in [(2, 17), (3, 33), (1, 9)]:
        rng = np.random.default_rng(rng_master.integers(2**32))
        low = Tensor(rng.uniform(50, 2000, f_count), requires_grad=True)
        band = Tensor(rng.uniform(50, 800, f_count), requires_grad=True)
        x = Tensor(rng.standard_normal((1, 1, 48)))
        mask = rng.standard_normal((1, f_count, 48))
        analytic, numeric = finite_difference_grads(
            lambda: _masked_loss(
                circular_conv1d(x, synthesize_sinc_kernels(low, band, klen, FS)),
                mask,
            ),
            [low, band], h=1e-4,
        )
        assert_grads_close(analytic, numeric)
        checked += 1

    # batchnorm, train and eval
    for training in (True, True, False, False):
        rng = np.random.default_rng(rng_master.integers(2**32))
        bn = BatchNorm1d(3)
        bn.running_mean[:] = rng.standard_normal(3) * 0.3
        bn.running_var[:] = 0.5 + rng.random(3)
        x = Tensor(rng.standard_normal((3, 3, 7)), requires_grad=True)
        mask = rng.standard_normal((3, 3, 7))
        analytic, numeric = finite_difference_grads(
            lambda: _masked_loss(bn(x, training=training), mask),
            [x, bn.gamma, bn.beta],
        )
        assert_grads_close(analytic, numeric)
        checked += 1

    # leaky relu
    for _ in range(2):
        rng = np.random.default_rng(rng_master.integers(2**32))
        x = Tensor(rng.standard_normal((2, 2, 9)), requires_grad=True)
        mask = rng.standard_normal((2, 2, 9))
        analytic, numeric = finite_difference_grads(
            lambda: _masked_loss(leaky_relu(x, 0.01), mask), [x]
        )
        assert_grads_close(analytic, numeric)
        checked += 1

    # softmax + cross entropy
    for b, m in [(2, 11), (4, 47)]:
        rng = np.random.default_rng(rng_master.integers(2**32))
        logits = Tensor(rng.standard_normal((b, m)), requires_grad=True)
        targets = rng.integers(0, m, b)
        analytic, numeric = finite_difference_grads(
            lambda: cross_entropy_with_logits(logits, targets), [logits]
        )
        assert_grads_close(analytic, numeric)
        checked += 1

    # per-channel PHAT correlation
    for b, l, n, tau in [(1, 2, 16, 3), (2, 1, 32, 5), (1, 3, 24, 4)]:
        rng = np.random.default_rng(rng_master.integers(2**32))
        y1 = Tensor(rng.standard_normal((b, l, n)), requires_grad=True)
        y2 = Tensor(rng.standard_normal((b, l, n)), requires_grad=True)
        mask = rng.standard_normal((b, 2 * tau + 1, l))
        analytic, numeric = finite_difference_grads(
            lambda: _masked_loss(phat_correlation(y1, y2, tau), mask),
            [y1, y2], h=1e-6,
        )
        assert_grads_close(analytic, numeric)
        checked += 1

    # soft-argmax regression head
    for b, m in [(2, 9), (3, 15)]:
        rng = np.random.default_rng(rng_master.integers(2**32))
        logits = Tensor(rng.standard_normal((b, m)), requires_grad=True)
        targets = rng.uniform(-3, 3, b)
        analytic, numeric = finite_difference_grads(
            lambda: squared_error_loss(soft_argmax(logits, (m - 1) // 2), targets),
            [logits],
        )
        assert_grads_close(analytic, numeric)
        checked += 1

    # end-to-end CE objective through the whole pipeline, micro scale
    for seed in (11, 12):
        micro = ModelConfig(
            frame_length=32, sample_rate=FS, tau_max=3,
            backbone=BackboneConfig(
                sinc_filters=3, sinc_kernel_length=9,
                conv_kernel_lengths=(5, 3), hidden_channels=2,
                output_channels=2,
            ),
            classifier=ClassifierConfig(
                conv_kernel_lengths=(3, 3), hidden_channels=3,
                head="ce_softmax",
            ),
        )
        model = TdoaModel(micro, seed=seed)
        # keep |low| and |band| away from their kink at zero, where central
        # differences are blind to the one-sided analytic slope
        sinc_bank = model.front_layers[0]
        sinc_bank.low_hz.data = sinc_bank.low_hz.data + 7.3
        sinc_bank.band_hz.data = sinc_bank.band_hz.data + 3.1
        rng = np.random.default_rng(seed)
        x1 = Tensor(rng.standard_normal((2, 1, 32)), requires_grad=True)
        x2 = Tensor(rng.standard_normal((2, 1, 32)), requires_grad=True)
        targets = rng.integers(0, 7, 2)
        params = [x1, x2] + model.parameters()

        def loss():
            logits = model.logits_for_pair(x1, x2, training=True)
            return cross_entropy_with_logits(logits, targets)

        analytic, numeric = finite_difference_grads(loss, params, h=1e-5)
        assert_grads_close(analytic, numeric)
        checked += 1

    assert checked >= 20
    report(4, f"{checked} finite-difference configurations, all within 1e-4")


# ---------------------------------------------------------------------------
# criterion 5: RIR physicality
# ---------------------------------------------------------------------------


def test_criterion_5_rir_physicality():
    source, mic = (1.5, 1.2, 1.0), (4.2, 2.8, 1.4)
    d = float(np.linalg.norm(np.subtract(source, mic)))
    expected_arrival = d * FS / 343.0
    half = 40  # early kernel half-length

    measured = {}
    for t60 in (0.2, 0.5):
        room = RoomSpec((6.0, 4.0, 2.5), t60=t60)
        rir = render_rir(room, source, mic, None, FS)
        taps = rir.taps

        first = int(np.argmax(np.abs(taps) > 1e-4 * np.abs(taps).max()))
        assert abs(first - expected_arrival) <= half + 1, (
            f"T60={t60}: direct arrival at {first}, expected "
            f"{expected_arrival:.1f} +- {half + 1}"
        )

        # Schroeder backward integration oracle
        energy = np.cumsum(taps[::-1] ** 2)[::-1]
        edc_db = 10.0 * np.log10(np.maximum(energy / energy[0], 1e-300))
        onset = int(np.argmax(np.abs(taps) > 0.5 * np.abs(taps).max()))
        below = np.nonzero(edc_db[onset:] <= -60.0)[0]
        assert below.size > 0, f"T60={t60}: EDC never reaches -60 dB"
        t60_measured = below[0] / FS
        assert abs(t60_measured - t60) <= 0.3 * t60, (
            f"T60={t60}: Schroeder gives {t60_measured:.3f}s"
        )
        measured[t60] = t60_measured
    report(5, "direct arrival within half-kernel tolerance; Schroeder T60 "
              + ", ".join(f"{k}s -> {v:.3f}s" for k, v in measured.items()))


# ---------------------------------------------------------------------------
# criterion 6: the desk-scale learning experiment
# ---------------------------------------------------------------------------


def test_criterion_6_desk_scale_learning(store, desk_train_config,
                                         trained_main, low_snr_cells):
    model, result, wall_seconds = trained_main
    assert wall_seconds < 1800.0, f"desk run took {wall_seconds:.0f}s"

    # training must actually optimize: CE decreases over the first epochs
    ce = [row["train_ce"] for row in result.log_rows]
    assert ce[0] > ce[1] > ce[2], f"train CE not decreasing: {ce[:3]}"

    # (a) held-out anechoic high-SNR scenes: exact-lag accuracy
    anechoic_config = TrainConfig(
        epochs=1, seed=910, num_scenes=0, num_val_scenes=0,
        t60_range_s=(0.0, 0.0), snr_range_db=(24.0, 30.0),
    )
    held_out = build_dataset(store, anechoic_config, "test", 200,
                             "crit6a-scene")
    from tdoakit.model import predict_batch

    est = predict_batch(held_out.x1, held_out.x2, model)
    exact_acc = float(np.mean(est == held_out.labels))
    assert exact_acc > 0.95, f"anechoic exact-lag accuracy {exact_acc:.3f}"

    # (b) paired low-SNR cells at T60 = 0.2 s vs the classic baseline
    eval_config, cells = low_snr_cells
    baseline = gcc_estimator(eval_config.tau_max)
    ours = model_estimator(model)
    base_accs, model_accs = [], []
    for snr, examples in cells.items():
        base_accs.append(evaluate(baseline, examples).acc_at[10.0])
        model_accs.append(evaluate(ours, examples).acc_at[10.0])
    margin = float(np.mean(model_accs) - np.mean(base_accs))
    assert margin >= 0.02, (
        f"model {np.mean(model_accs):.3f} vs baseline {np.mean(base_accs):.3f} "
        f"(margin {margin * 100:.1f}pp < 2pp)"
    )
    report(6, f"run {wall_seconds / 60:.1f} min; anechoic exact acc "
              f"{exact_acc:.3f}; low-SNR acc@10cm model "
              f"{np.mean(model_accs):.3f} vs baseline {np.mean(base_accs):.3f} "
              f"(+{margin * 100:.1f}pp)")


# ---------------------------------------------------------------------------
# criterion 7: ablation direction checks
# ---------------------------------------------------------------------------


def test_criterion_7_ablation_directions(trained_main, trained_l1, trained_mse,
                                         low_snr_cells):
    model_main, _, _ = trained_main
    eval_config, cells = low_snr_cells

    def mean_acc(model):
        accs = [
            evaluate(model_estimator(model), examples).acc_at[10.0]
            for examples in cells.values()
        ]
        return float(np.mean(accs))

    acc_l16 = mean_acc(model_main)
    acc_l1 = mean_acc(trained_l1)
    acc_mse = mean_acc(trained_mse)

    print(f"\n[criterion 7] channels: L=16 {acc_l16:.3f} vs L=1 {acc_l1:.3f} "
          f"(margin {(acc_l16 - acc_l1) * 100:+.1f}pp)")
    print(f"[criterion 7] heads: CE {acc_l16:.3f} vs MSE {acc_mse:.3f} "
          f"(margin {(acc_l16 - acc_mse) * 100:+.1f}pp)")

    assert acc_l16 >= acc_l1, (
        f"more correlation channels should not hurt: L16 {acc_l16:.3f} "
        f"< L1 {acc_l1:.3f}"
    )
    assert acc_l16 >= acc_mse, (
        f"CE head should not trail MSE head: CE {acc_l16:.3f} "
        f"< MSE {acc_mse:.3f}"
    )
    report(7, f"L=16 >= L=1 ({acc_l16:.3f} >= {acc_l1:.3f}); "
              f"CE >= MSE ({acc_l16:.3f} >= {acc_mse:.3f})")


# ---------------------------------------------------------------------------
# criterion 8: metrics integrity
# ---------------------------------------------------------------------------


def test_criterion_8_metrics_integrity(tmp_path):
    config = EvalConfig(scenes_per_cell=20, seed=8, snippet_duration_s=0.5)
    examples = render_condition(config, 12.0, 0.4)
    estimator = gcc_estimator(config.tau_max)

    sweep = threshold_sweep(estimator, examples,
                            thresholds_cm=(1, 2, 3, 5, 8, 10, 15, 20, 40))
    accs = [acc for _, acc in sweep]
    assert all(a <= b + 1e-15 for a, b in zip(accs, accs[1:])), sweep

    rng = np.random.default_rng(8)
    for _ in range(50):
        t = rng.integers(-23, 24, 40)
        h = rng.integers(-23, 24, 40)
        rep = metrics_from_pairs(t, h, FS)
        assert rep.rmse_cm >= rep.mae_cm - 1e-12

    path = tmp_path / "scatter.csv"
    scatter_dump(estimator, examples, path)
    direct = evaluate(estimator, examples)
    redone = metrics_from_scatter_csv(path)
    assert abs(direct.mae_cm - redone.mae_cm) < 1e-9
    assert abs(direct.rmse_cm - redone.rmse_cm) < 1e-9
    for eta in direct.acc_at:
        assert abs(direct.acc_at[eta] - redone.acc_at[eta]) < 1e-9
    report(8, "threshold monotonicity, rmse >= mae, scatter round-trip < 1e-9")


# ---------------------------------------------------------------------------
# criterion 9: bit-reproducibility of the CLI
# ---------------------------------------------------------------------------


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_criterion_9_reproducibility(tmp_path):
    sim_config = tmp_path / "sim.json"
    sim_config.write_text(json.dumps({
        "version": 1, "seed": 21, "count": 6, "snippet_duration_s": 0.5,
    }))
    for run in ("s1", "s2"):
        code = cli_main(["simulate", "--config", str(sim_config),
                         "--out", str(tmp_path / run / "data")])
        assert code == 0
    assert _sha(tmp_path / "s1" / "data.f32") == _sha(tmp_path / "s2" / "data.f32")
    assert _sha(tmp_path / "s1" / "data.jsonl") == _sha(tmp_path / "s2" / "data.jsonl")

    train_config = tmp_path / "train.json"
    train_config.write_text(json.dumps({
        "version": 1, "seed": 22, "epochs": 1, "batch_size": 4,
        "num_scenes": 8, "num_val_scenes": 4, "out_dir": "",
    }))
    hashes = []
    for run in ("t1", "t2"):
        config = json.loads(train_config.read_text())
        config["out_dir"] = str(tmp_path / run)
        run_config = tmp_path / f"train-{run}.json"
        run_config.write_text(json.dumps(config))
        code = cli_main(["train", "--config", str(run_config)])
        assert code == 0
        hashes.append(
            (_sha(tmp_path / run / "best.bin"), _sha(tmp_path / run / "last.bin"))
        )
    assert hashes[0] == hashes[1]
    report(9, "cmd_simulate and cmd_train are hash-identical across runs")
