"""Minimal reverse-mode autodiff over numpy arrays, with the layer set
needed for shift-equivariant waveform filtering: circularly padded 1-D
convolution, a learnable band-pass (sinc) filter bank, batch
normalization, leaky rectifier and softmax.

Convolutions are computed in the frequency domain (they are circular by
construction), with FFT work done in float64 regardless of the tensor
dtype so that shift equivariance survives single-precision storage.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, MissingGraphError, ShapeError

CHECKPOINT_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# autodiff engine
# ---------------------------------------------------------------------------


class Tensor:
    """A numpy array plus an optional gradient buffer and backward closure.

    Shapes follow the (batch, channels, length) convention for activations;
    parameters keep whatever shape their layer defines.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, name=""):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = tuple(parents) if self.requires_grad else ()
        self._backward_fn = backward_fn if self.requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, grad={self.requires_grad})"


def _accumulate(tensor: Tensor, grad: np.ndarray):
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=np.float64, copy=True)
    else:
        tensor.grad += grad


def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar loss, filling .grad on every
    parameter and intermediate that requires gradients."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss._backward_fn is None and not loss._parents:
        raise MissingGraphError("backward called without a recorded forward graph")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            topo.append(node)
        else:
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

    loss.grad = np.ones_like(loss.data, dtype=np.float64)
    for node in reversed(topo):
        if node._backward_fn is None or node.grad is None:
            continue
        grads = node._backward_fn(node.grad)
        for parent, grad in zip(node._parents, grads):
            if parent.requires_grad and grad is not None:
                _accumulate(parent, grad)


# ---------------------------------------------------------------------------
# elementary ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor(out_data, parents=(a, b), backward_fn=bwd)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def mul_scalar(a: Tensor, s: float) -> Tensor:
    def bwd(g):
        return (g * s,)

    return Tensor(a.data * s, parents=(a,), backward_fn=bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g):
        return (np.full(a.data.shape, float(g) / n),)

    return Tensor(np.mean(a.data), parents=(a,), backward_fn=bwd)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g):
        return (np.full(a.data.shape, float(g)),)

    return Tensor(np.sum(a.data), parents=(a,), backward_fn=bwd)


def leaky_relu(x: Tensor, negative_slope: float = 0.01) -> Tensor:
    slope = x.data.dtype.type(negative_slope)
    mult = np.where(x.data >= 0, x.data.dtype.type(1.0), slope)
    out_data = x.data * mult

    def bwd(g):
        return (g * mult,)

    return Tensor(out_data, parents=(x,), backward_fn=bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        dot = np.sum(g * p, axis=axis, keepdims=True)
        return (p * (g - dot),)

    return Tensor(p, parents=(x,), backward_fn=bwd)


# ---------------------------------------------------------------------------
# circular convolution
# ---------------------------------------------------------------------------


def _kernel_ring(weight: np.ndarray, n: int) -> np.ndarray:
    """Place taps j=0..K-1 at ring offsets (j - center) mod n."""
    k = weight.shape[-1]
    center = (k - 1) // 2
    ring = np.zeros(weight.shape[:-1] + (n,), dtype=np.float64)
    idx = (np.arange(k) - center) % n
    ring[..., idx] = weight
    return ring


def _compute_dtype(*arrays):
    """float32 inputs stay in single precision end to end; anything else
    runs in double."""
    if all(a.dtype == np.float32 for a in arrays):
        return np.float32
    return np.float64


def _freq_mix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-frequency channel mixing out[p,q,k] = sum_r a[p,r,k] b[q,r,k],
    routed through BLAS as a stack of small matmuls over k."""
    ak = np.ascontiguousarray(a.transpose(2, 0, 1))
    bk = np.ascontiguousarray(b.transpose(2, 1, 0))
    return np.matmul(ak, bk).transpose(1, 2, 0)


def circular_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Circularly padded 1-D convolution.

    out[b,o,n] = sum_{i,j} w[o,i,j] * x[b,i,(n + j - center) mod N] + bias[o]

    Output length equals input length, so composition with circular shifts
    commutes exactly; that property is what the whole front end rests on.
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 3 or wd.ndim != 3:
        raise ShapeError(f"expected (B,C,N) input and (O,I,K) weight, got {xd.shape}, {wd.shape}")
    if xd.shape[1] != wd.shape[1]:
        raise ShapeError(f"channel mismatch: input {xd.shape[1]}, weight {wd.shape[1]}")
    n = xd.shape[2]
    k = wd.shape[2]
    if k % 2 == 0:
        raise ConfigError(f"kernel length must be odd, got {k}")
    if n < k:
        raise ShapeError(f"input length {n} shorter than kernel {k}")
    dtype = xd.dtype
    cdtype = _compute_dtype(xd, wd)

    xf = np.fft.rfft(xd.astype(cdtype, copy=False), axis=2)
    wf = np.fft.rfft(_kernel_ring(wd, n).astype(cdtype, copy=False), axis=2)
    out = np.fft.irfft(_freq_mix(xf, np.conj(wf)), n, axis=2)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = out.astype(dtype, copy=False)

    center = (k - 1) // 2
    tap_idx = (np.arange(k) - center) % n

    def bwd(g):
        gf = np.fft.rfft(g.astype(cdtype, copy=False), axis=2)
        # gx[b,i,k] = sum_o gf[b,o,k] wf[o,i,k]
        gk = np.ascontiguousarray(gf.transpose(2, 0, 1))
        wk = np.ascontiguousarray(wf.transpose(2, 0, 1))
        gx = np.fft.irfft(np.matmul(gk, wk).transpose(1, 2, 0), n, axis=2)
        # gw_ring[o,i,d] = sum_b irfft(X[b,i] * conj(G[b,o]))[d]
        gw_ring = np.fft.irfft(
            _freq_mix(np.conj(gf).swapaxes(0, 1), xf.swapaxes(0, 1)), n, axis=2
        )
        gw = gw_ring[..., tap_idx]
        gb = None if bias is None else g.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor(out, parents=parents, backward_fn=bwd)


# ---------------------------------------------------------------------------
# sinc band-pass kernel synthesis
# ---------------------------------------------------------------------------


def synthesize_sinc_kernels(
    low_hz: Tensor, band_hz: Tensor, kernel_length: int, sample_rate: float,
    min_low_hz: float = 30.0, min_band_hz: float = 50.0,
) -> Tensor:
    """Build zero-phase band-pass kernels from learnable (low, band) pairs.

    Cutoffs are sanitized at synthesis time: f1 = min_low + |low|,
    f2 = clamp(f1 + min_band + |band|, <= Fs/2). Kernels are even-symmetric
    (Hamming-windowed ideal band-pass), so filtering adds no group delay.
    Returns shape (num_filters, 1, kernel_length).
    """
    if kernel_length % 2 == 0:
        raise ConfigError(f"sinc kernel length must be odd, got {kernel_length}")
    half = (kernel_length - 1) // 2
    u = np.arange(kernel_length, dtype=np.float64) - half
    window = 0.54 + 0.46 * np.cos(np.pi * u / half)
    nyquist = sample_rate / 2.0

    abs_low = np.abs(low_hz.data.astype(np.float64))
    abs_band = np.abs(band_hz.data.astype(np.float64))
    f1 = min_low_hz + abs_low
    f1 = np.minimum(f1, nyquist - min_band_hz)
    f2_raw = f1 + min_band_hz + abs_band
    f2 = np.minimum(f2_raw, nyquist)
    clamped_f2 = f2_raw > nyquist
    # clamping silently narrows a filter; it is a sanitization, not an error

    nu1 = f1 / sample_rate  # cycles per sample
    nu2 = f2 / sample_rate
    arg1 = 2.0 * nu1[:, None] * u[None, :]
    arg2 = 2.0 * nu2[:, None] * u[None, :]
    kernels = (
        2.0 * nu2[:, None] * np.sinc(arg2) - 2.0 * nu1[:, None] * np.sinc(arg1)
    ) * window[None, :]
    out = kernels[:, None, :]

    sign_low = np.sign(low_hz.data.astype(np.float64))
    sign_band = np.sign(band_hz.data.astype(np.float64))

    def bwd(g):
        gk = g[:, 0, :].astype(np.float64)
        # d k[u] / d nu = +-2 cos(2 pi nu u) * window (exact, including u=0)
        dk_dnu2 = 2.0 * np.cos(2.0 * np.pi * nu2[:, None] * u[None, :]) * window[None, :]
        dk_dnu1 = -2.0 * np.cos(2.0 * np.pi * nu1[:, None] * u[None, :]) * window[None, :]
        g_nu2 = np.sum(gk * dk_dnu2, axis=1)
        g_nu1 = np.sum(gk * dk_dnu1, axis=1)
        g_f2 = g_nu2 / sample_rate
        g_f1 = g_nu1 / sample_rate
        g_f2 = np.where(clamped_f2, 0.0, g_f2)  # clamp kills upward pressure
        # f2 = f1 + min_band + |band|; f1 = min_low + |low|
        g_low = (g_f1 + g_f2) * sign_low
        g_band = g_f2 * sign_band
        return g_low.astype(np.float64), g_band.astype(np.float64)

    return Tensor(out, parents=(low_hz, band_hz), backward_fn=bwd)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


class BatchNorm1d:
    """Per-channel normalization over (batch, length) with running stats.

    Train mode normalizes with batch statistics and updates the running
    mean/variance; eval mode is a fixed per-channel affine map, which keeps
    the layer exactly shift-equivariant.
    """

    def __init__(self, num_channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float64):
        self.num_channels = num_channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(num_channels, dtype=dtype), requires_grad=True, name="bn.gamma")
        self.beta = Tensor(np.zeros(num_channels, dtype=dtype), requires_grad=True, name="bn.beta")
        self.running_mean = np.zeros(num_channels, dtype=np.float64)
        self.running_var = np.ones(num_channels, dtype=np.float64)

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def load_buffers(self, bufs):
        self.running_mean = np.asarray(bufs["running_mean"], dtype=np.float64).copy()
        self.running_var = np.asarray(bufs["running_var"], dtype=np.float64).copy()

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        xd = x.data
        if xd.ndim != 3:
            raise ShapeError(f"batchnorm expects (B,C,N), got {xd.shape}")
        if xd.shape[1] != self.num_channels:
            raise ShapeError(f"expected {self.num_channels} channels, got {xd.shape[1]}")
        if training:
            if xd.shape[0] < 2:
                raise DataError("train-mode batchnorm needs batch size >= 2")
            return self._forward_train(x)
        return self._forward_eval(x)

    def _forward_train(self, x: Tensor) -> Tensor:
        xd = x.data
        dtype = xd.dtype
        m = xd.shape[0] * xd.shape[2]
        # two-pass variance in the native dtype: no cancellation, no slow
        # mixed-dtype reductions
        mean = xd.mean(axis=(0, 2))
        centered = xd - mean[None, :, None]
        var = np.mean(centered**2, axis=(0, 2))
        inv_std = (1.0 / np.sqrt(var + dtype.type(self.eps))).astype(dtype)
        xhat = centered * inv_std[None, :, None]
        out = self.gamma.data.astype(dtype)[None, :, None] * xhat \
            + self.beta.data.astype(dtype)[None, :, None]

        # running stats keep the unbiased variance, torch-style
        unbiased = var.astype(np.float64) * m / max(m - 1, 1)
        self.running_mean = (1 - self.momentum) * self.running_mean \
            + self.momentum * mean.astype(np.float64)
        self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased

        gamma = self.gamma

        def bwd(g):
            g_beta = g.sum(axis=(0, 2))
            g_gamma = np.sum(g * xhat, axis=(0, 2))
            g_xhat = g * gamma.data.astype(dtype)[None, :, None]
            # standard batchnorm gradient through the batch statistics
            sum_g = g_xhat.sum(axis=(0, 2), keepdims=True)
            sum_gx = np.sum(g_xhat * xhat, axis=(0, 2), keepdims=True)
            gx = (inv_std[None, :, None] / m) \
                * (m * g_xhat - sum_g - xhat * sum_gx)
            return gx, g_gamma, g_beta

        return Tensor(out, parents=(x, self.gamma, self.beta), backward_fn=bwd)

    def _forward_eval(self, x: Tensor) -> Tensor:
        xd = x.data
        dtype = xd.dtype
        scale = (1.0 / np.sqrt(self.running_var + self.eps)).astype(dtype)
        mean = self.running_mean.astype(dtype)
        xhat = (xd - mean[None, :, None]) * scale[None, :, None]
        out = self.gamma.data.astype(dtype)[None, :, None] * xhat \
            + self.beta.data.astype(dtype)[None, :, None]
        gamma = self.gamma

        def bwd(g):
            g_beta = g.sum(axis=(0, 2))
            g_gamma = np.sum(g * xhat, axis=(0, 2))
            gx = g * (gamma.data.astype(dtype) * scale)[None, :, None]
            return gx, g_gamma, g_beta

        return Tensor(out, parents=(x, self.gamma, self.beta), backward_fn=bwd)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class CircularConv1d:
    """Learnable circular convolution layer (odd kernel, same-length output)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_length: int,
                 rng: np.random.Generator, dtype=np.float64):
        if kernel_length % 2 == 0:
            raise ConfigError(f"kernel length must be odd, got {kernel_length}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_length = kernel_length
        fan_in = in_channels * kernel_length
        self.weight = Tensor(
            _fan_in_uniform(rng, (out_channels, in_channels, kernel_length), fan_in, dtype),
            requires_grad=True, name="conv.weight",
        )
        self.bias = Tensor(
            _fan_in_uniform(rng, (out_channels,), fan_in, dtype),
            requires_grad=True, name="conv.bias",
        )

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return circular_conv1d(x, self.weight, self.bias)


class SincFilterBank:
    """First-layer band-pass bank with learnable cutoffs (mel-spaced init)."""

    def __init__(self, num_filters: int, kernel_length: int, sample_rate: float,
                 rng: np.random.Generator | None = None, dtype=np.float64,
                 min_low_hz: float = 30.0, min_band_hz: float = 50.0):
        if kernel_length % 2 == 0:
            raise ConfigError(f"sinc kernel length must be odd, got {kernel_length}")
        self.num_filters = num_filters
        self.kernel_length = kernel_length
        self.sample_rate = sample_rate
        self.min_low_hz = min_low_hz
        self.min_band_hz = min_band_hz

        low, band = _mel_spaced_bands(num_filters, sample_rate, min_low_hz, min_band_hz)
        self.low_hz = Tensor(low.astype(dtype), requires_grad=True, name="sinc.low_hz")
        self.band_hz = Tensor(band.astype(dtype), requires_grad=True, name="sinc.band_hz")

    def parameters(self):
        return [self.low_hz, self.band_hz]

    def kernels(self) -> Tensor:
        return synthesize_sinc_kernels(
            self.low_hz, self.band_hz, self.kernel_length, self.sample_rate,
            self.min_low_hz, self.min_band_hz,
        )

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.shape[1] != 1:
            raise ShapeError(f"sinc bank expects a single input channel, got {x.data.shape[1]}")
        return circular_conv1d(x, self.kernels(), None)


def _mel_spaced_bands(num_filters: int, sample_rate: float,
                      min_low_hz: float, min_band_hz: float):
    """Initial (low, band) parameter values on a mel grid over [30, Fs/2)."""

    def to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    lo, hi = 30.0, sample_rate / 2.0 - (min_low_hz + min_band_hz)
    mel_points = np.linspace(to_mel(lo), to_mel(hi), num_filters + 1)
    freqs = from_mel(mel_points)
    f1 = freqs[:-1]
    f2 = freqs[1:]
    # invert the sanitization so synthesis reproduces (f1, f2)
    low = np.maximum(f1 - min_low_hz, 0.0)
    band = np.maximum(f2 - f1 - min_band_hz, 0.0)
    return low, band


# ---------------------------------------------------------------------------
# checkpoint I/O: JSON manifest + flat little-endian float32 blob
# ---------------------------------------------------------------------------


def save_param_blob(path_prefix: str | Path, named_params: dict[str, np.ndarray],
                    manifest_extra: dict | None = None):
    """Write <prefix>.json (manifest) and <prefix>.bin (float32 blob)."""
    prefix = Path(path_prefix)
    entries = []
    offset = 0
    chunks = []
    for name, array in named_params.items():
        arr = np.asarray(array, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.ravel())
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "dtype": "<f4",
        "total_floats": int(offset),
        "params": entries,
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    prefix.with_suffix(".json").write_text(json.dumps(manifest, indent=1))
    blob.tofile(prefix.with_suffix(".bin"))


def load_param_blob(path_prefix: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a manifest/blob pair, validating shapes against the manifest."""
    prefix = Path(path_prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(
            f"unsupported checkpoint format version {manifest.get('format_version')}"
        )
    blob = np.fromfile(prefix.with_suffix(".bin"), dtype="<f4")
    if blob.size != manifest["total_floats"]:
        raise DataError(
            f"blob has {blob.size} floats, manifest says {manifest['total_floats']}"
        )
    params = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if start + size > blob.size:
            raise DataError(f"param {entry['name']} overruns the blob")
        params[entry["name"]] = blob[start:start + size].reshape(shape).astype(np.float64)
    return params, manifest
