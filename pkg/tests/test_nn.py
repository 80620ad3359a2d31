import numpy as np
import pytest

from tdoakit.errors import ConfigError, DataError, MissingGraphError, ShapeError
from tdoakit.nn import (
    BatchNorm1d,
    CircularConv1d,
    SincFilterBank,
    Tensor,
    backward,
    circular_conv1d,
    leaky_relu,
    load_param_blob,
    mean_all,
    save_param_blob,
    softmax,
    sum_all,
    synthesize_sinc_kernels,
)

FS = 16000.0


def finite_difference_grads(make_loss, params, h=1e-5):
    """Central finite differences against the analytic reverse-mode sweep.

    make_loss must rebuild the graph from the live parameter tensors on
    every call; returns (analytic, numeric) per parameter.
    """
    for p in params:
        p.zero_grad()
    backward(make_loss())
    analytic = [np.array(p.grad, copy=True) for p in params]

    numeric = []
    for p in params:
        num = np.zeros(p.data.shape, dtype=np.float64)
        flat = p.data.ravel()
        num_flat = num.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(make_loss().data)
            flat[i] = orig - h
            lm = float(make_loss().data)
            flat[i] = orig
            num_flat[i] = (lp - lm) / (2 * h)
        numeric.append(num)
    return analytic, numeric


def assert_grads_close(analytic, numeric, rtol=1e-4):
    # the scale floor keeps near-zero gradients from tripping on central
    # difference round-off (~eps/h ~ 1e-11)
    for a, n in zip(analytic, numeric):
        scale = max(np.abs(n).max(), np.abs(a).max(), 1e-5)
        np.testing.assert_allclose(a, n, atol=rtol * scale)


def rng_for(seed):
    return np.random.default_rng(seed)


class TestEngineBasics:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(1, 2, 3), requires_grad=True)
        backward(sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((1, 2, 3)))

    def test_backward_without_graph_raises(self):
        x = Tensor(np.array(1.0))
        with pytest.raises(MissingGraphError):
            backward(x)

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = leaky_relu(x)
        with pytest.raises(ShapeError):
            backward(y)

    def test_grad_accumulates_over_reuse(self):
        x = Tensor(np.array([[[2.0]]]), requires_grad=True)
        from tdoakit.nn import add

        backward(sum_all(add(x, x)))
        np.testing.assert_allclose(x.grad, [[[2.0]]])


class TestLeakyRelu:
    def test_negative_value(self):
        x = Tensor(np.array([[[-1.0]]]))
        assert leaky_relu(x, 0.01).data[0, 0, 0] == pytest.approx(-0.01)

    def test_gradient(self):
        x = Tensor(rng_for(0).standard_normal((2, 3, 5)), requires_grad=True)
        analytic, numeric = finite_difference_grads(
            lambda: mean_all(leaky_relu(x, 0.01)), [x]
        )
        assert_grads_close(analytic, numeric)


class TestSoftmax:
    def test_uniform_over_47_lags(self):
        p = softmax(Tensor(np.zeros((1, 47))), axis=1)
        np.testing.assert_allclose(p.data, np.full((1, 47), 1 / 47), atol=1e-12)

    def test_sums_to_one(self):
        x = Tensor(rng_for(1).standard_normal((4, 47)) * 5)
        p = softmax(x, axis=1).data
        np.testing.assert_allclose(p.sum(axis=1), np.ones(4), atol=1e-6)
        assert np.all(p >= 0)

    def test_gradient(self):
        x = Tensor(rng_for(2).standard_normal((2, 7)), requires_grad=True)
        w = rng_for(3).standard_normal((2, 7))

        def loss():
            p = softmax(x, axis=1)
            return sum_all(Tensor(p.data * w, parents=(p,), backward_fn=lambda g: (g * w,)))

        analytic, numeric = finite_difference_grads(loss, [x])
        assert_grads_close(analytic, numeric)


class TestCircularConv:
    def test_identity_kernel(self):
        x = Tensor(rng_for(4).standard_normal((2, 3, 16)))
        w = np.zeros((3, 3, 5))
        for c in range(3):
            w[c, c, 2] = 1.0
        out = circular_conv1d(x, Tensor(w))
        np.testing.assert_allclose(out.data, x.data, atol=1e-12)

    def test_box_kernel_on_constant_input(self):
        x = Tensor(np.ones((1, 1, 32)) * 3.0)
        w = Tensor(np.full((1, 1, 3), 1 / 3))
        out = circular_conv1d(x, w)
        np.testing.assert_allclose(out.data, 3.0, atol=1e-12)

    @pytest.mark.parametrize("tau", [1, 17, 101])
    def test_shift_equivariance(self, tau):
        rng = rng_for(5)
        x = rng.standard_normal((1, 2, 256))
        w = Tensor(rng.standard_normal((4, 2, 9)))
        out_plain = circular_conv1d(Tensor(x), w).data
        out_shifted = circular_conv1d(Tensor(np.roll(x, tau, axis=2)), w).data
        np.testing.assert_allclose(
            out_shifted, np.roll(out_plain, tau, axis=2), atol=1e-5
        )

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeError):
            circular_conv1d(Tensor(np.ones((1, 2, 16))), Tensor(np.ones((3, 4, 5))))

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            circular_conv1d(Tensor(np.ones((1, 1, 16))), Tensor(np.ones((1, 1, 4))))

    def test_gradients(self):
        rng = rng_for(6)
        x = Tensor(rng.standard_normal((2, 2, 12)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 5)) * 0.3, requires_grad=True)
        b = Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)
        mask = rng.standard_normal((2, 3, 12))

        def loss():
            out = circular_conv1d(x, w, b)
            return sum_all(
                Tensor(out.data * mask, parents=(out,), backward_fn=lambda g: (g * mask,))
            )

        analytic, numeric = finite_difference_grads(loss, [x, w, b])
        assert_grads_close(analytic, numeric)


class TestSincBank:
    def test_kernels_even_symmetric(self):
        bank = SincFilterBank(8, 65, FS, rng_for(7))
        k = bank.kernels().data[:, 0, :]
        np.testing.assert_array_equal(k, k[:, ::-1])

    @staticmethod
    def _filter_circular(x, kernel):
        # place the zero-phase kernel on the signal ring (center at lag 0)
        n = len(x)
        half = (len(kernel) - 1) // 2
        ring = np.zeros(n)
        ring[: half + 1] = kernel[half:]
        ring[-half:] = kernel[:half]
        return np.fft.irfft(np.fft.rfft(x) * np.fft.rfft(ring), n)

    def test_stopband_rejection(self):
        # [100, 200] Hz filter against a 1 kHz tone: output RMS < 1% of input
        low = Tensor(np.array([100.0 - 30.0]), requires_grad=True)
        band = Tensor(np.array([100.0 - 50.0]), requires_grad=True)
        k = synthesize_sinc_kernels(low, band, 1023, FS).data[0, 0]
        t = np.arange(8192) / FS
        x = np.sin(2 * np.pi * 1000.0 * t)
        y = self._filter_circular(x, k)
        assert np.sqrt(np.mean(y**2)) < 0.01 * np.sqrt(np.mean(x**2))

    def test_passband_transmission(self):
        # band containing the tone: output RMS within 3 dB of input RMS
        low = Tensor(np.array([800.0 - 30.0]))
        band = Tensor(np.array([400.0 - 50.0]))
        k = synthesize_sinc_kernels(low, band, 1023, FS).data[0, 0]
        t = np.arange(8192) / FS
        x = np.sin(2 * np.pi * 1000.0 * t)
        y = self._filter_circular(x, k)
        ratio = np.sqrt(np.mean(y**2)) / np.sqrt(np.mean(x**2))
        assert 10 ** (-3 / 20) < ratio < 10 ** (3 / 20)

    def test_shift_equivariance_large_tau(self):
        bank = SincFilterBank(4, 129, FS, rng_for(8))
        x = rng_for(9).standard_normal((1, 1, 512))
        plain = bank(Tensor(x)).data
        shifted = bank(Tensor(np.roll(x, 101, axis=2))).data
        np.testing.assert_allclose(shifted, np.roll(plain, 101, axis=2), atol=1e-5)

    def test_cutoff_clamped_to_nyquist(self):
        low = Tensor(np.array([7000.0]))
        band = Tensor(np.array([5000.0]))
        k = synthesize_sinc_kernels(low, band, 65, FS).data[0, 0]
        # effective f2 clamped to Fs/2: kernel stays finite and bounded
        assert np.all(np.isfinite(k))

    def test_gradients_through_synthesis(self):
        rng = rng_for(10)
        low = Tensor(np.array([200.0, 900.0]), requires_grad=True)
        band = Tensor(np.array([150.0, 400.0]), requires_grad=True)
        x = Tensor(rng.standard_normal((1, 1, 64)))
        mask = rng.standard_normal((1, 2, 64))

        def loss():
            k = synthesize_sinc_kernels(low, band, 17, FS)
            out = circular_conv1d(x, k)
            return sum_all(
                Tensor(out.data * mask, parents=(out,), backward_fn=lambda g: (g * mask,))
            )

        analytic, numeric = finite_difference_grads(loss, [low, band], h=1e-4)
        assert_grads_close(analytic, numeric, rtol=1e-4)


class TestBatchNorm:
    def test_train_normalizes_and_applies_affine(self):
        rng = rng_for(11)
        bn = BatchNorm1d(3)
        bn.gamma.data[:] = [1.0, 2.0, 0.5]
        bn.beta.data[:] = [0.0, 1.0, -1.0]
        x = Tensor(rng.standard_normal((4, 3, 50)) * 3 + 7)
        out = bn(x, training=True).data
        for c in range(3):
            got = out[:, c, :]
            assert abs(got.mean() - bn.beta.data[c]) < 1e-9
            assert abs(got.std() - bn.gamma.data[c]) < 1e-2

    def test_zero_mean_unit_variance_passthrough(self):
        rng = rng_for(12)
        x = rng.standard_normal((8, 2, 400))
        x = (x - x.mean(axis=(0, 2), keepdims=True)) / x.std(axis=(0, 2), keepdims=True)
        bn = BatchNorm1d(2)
        out = bn(Tensor(x), training=True).data
        # eps=1e-5 inside the normalizer allows ~5e-6 relative deviation
        np.testing.assert_allclose(out, x, atol=1e-4)

    def test_eval_uses_running_stats(self):
        bn = BatchNorm1d(2)
        bn.running_mean[:] = [1.0, -1.0]
        bn.running_var[:] = [4.0, 0.25]
        x = np.ones((1, 2, 4))
        out = bn(Tensor(x), training=False).data
        np.testing.assert_allclose(out[0, 0], (1 - 1) / np.sqrt(4 + 1e-5), atol=1e-9)
        np.testing.assert_allclose(out[0, 1], (1 + 1) / np.sqrt(0.25 + 1e-5), atol=1e-6)

    def test_train_batch_of_one_rejected(self):
        bn = BatchNorm1d(2)
        with pytest.raises(DataError):
            bn(Tensor(np.ones((1, 2, 8))), training=True)

    def test_eval_mode_shift_equivariant(self):
        bn = BatchNorm1d(3)
        bn.running_mean[:] = [0.5, -2.0, 1.0]
        bn.running_var[:] = [1.5, 0.3, 2.0]
        x = rng_for(13).standard_normal((1, 3, 64))
        plain = bn(Tensor(x), training=False).data
        shifted = bn(Tensor(np.roll(x, 7, axis=2)), training=False).data
        np.testing.assert_allclose(shifted, np.roll(plain, 7, axis=2), atol=1e-12)

    def test_train_gradients(self):
        rng = rng_for(14)
        bn = BatchNorm1d(2)
        x = Tensor(rng.standard_normal((3, 2, 6)), requires_grad=True)
        mask = rng.standard_normal((3, 2, 6))

        def loss():
            out = bn(x, training=True)
            return sum_all(
                Tensor(out.data * mask, parents=(out,), backward_fn=lambda g: (g * mask,))
            )

        analytic, numeric = finite_difference_grads(loss, [x, bn.gamma, bn.beta])
        assert_grads_close(analytic, numeric)

    def test_eval_gradients(self):
        rng = rng_for(15)
        bn = BatchNorm1d(2)
        bn.running_mean[:] = rng.standard_normal(2)
        bn.running_var[:] = [0.5, 2.0]
        x = Tensor(rng.standard_normal((2, 2, 5)), requires_grad=True)

        def loss():
            return mean_all(bn(x, training=False))

        analytic, numeric = finite_difference_grads(loss, [x, bn.gamma, bn.beta])
        assert_grads_close(analytic, numeric)


class TestComposedEquivariance:
    @pytest.mark.parametrize("tau", [1, 7, 501, 2047])
    def test_conv_stack_equivariance(self, tau):
        rng = rng_for(16)
        n = 2048
        bank = SincFilterBank(8, 255, FS, rng)
        conv = CircularConv1d(8, 4, 9, rng)
        bn = BatchNorm1d(4)
        bn.running_mean[:] = rng.standard_normal(4) * 0.1
        bn.running_var[:] = 1.0 + 0.2 * rng.random(4)

        def f(x):
            h = bank(Tensor(x))
            h = leaky_relu(conv(h))
            return bn(h, training=False).data

        x = rng.standard_normal((1, 1, n))
        plain = f(x)
        shifted = f(np.roll(x, tau, axis=2))
        scale = np.abs(plain).max()
        np.testing.assert_allclose(
            shifted, np.roll(plain, tau, axis=2), atol=1e-5 * max(scale, 1.0)
        )

    def test_two_layer_network_end_to_end_gradcheck(self):
        rng = rng_for(17)
        conv1 = CircularConv1d(1, 3, 5, rng)
        conv2 = CircularConv1d(3, 2, 3, rng)
        x = Tensor(rng.standard_normal((2, 1, 10)), requires_grad=True)

        def loss():
            h = leaky_relu(conv1(x))
            return mean_all(conv2(h))

        params = [x] + conv1.parameters() + conv2.parameters()
        analytic, numeric = finite_difference_grads(loss, params)
        assert_grads_close(analytic, numeric)


class TestCheckpointBlob:
    def test_round_trip(self, tmp_path):
        rng = rng_for(18)
        params = {
            "a.weight": rng.standard_normal((3, 2, 5)).astype(np.float32),
            "a.bias": rng.standard_normal(3).astype(np.float32),
        }
        prefix = tmp_path / "ckpt"
        save_param_blob(prefix, params, {"model": {"L": 4}})
        loaded, manifest = load_param_blob(prefix)
        assert manifest["model"] == {"L": 4}
        for name in params:
            np.testing.assert_allclose(loaded[name], params[name], atol=1e-7)

    def test_blob_little_endian_float32(self, tmp_path):
        prefix = tmp_path / "ckpt"
        save_param_blob(prefix, {"w": np.array([1.0, 2.0])})
        raw = (tmp_path / "ckpt.bin").read_bytes()
        assert np.frombuffer(raw, dtype="<f4").tolist() == [1.0, 2.0]

    def test_shape_validation(self, tmp_path):
        prefix = tmp_path / "ckpt"
        save_param_blob(prefix, {"w": np.ones((2, 2))})
        # truncate the blob: loading must fail loudly
        (tmp_path / "ckpt.bin").write_bytes(b"\x00" * 8)
        with pytest.raises(DataError):
            load_param_blob(prefix)
