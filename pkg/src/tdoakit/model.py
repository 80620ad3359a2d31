"""The learned TDOA pipeline: a shift-equivariant filter bank front end,
per-channel GCC-PHAT correlation, and a lag classifier with a softmax (or
soft-argmax regression) head.

The front end maps each input frame to L filtered signals of the same
length; because every stage commutes with circular shifts, correlating the
filtered pair with PHAT still yields a unit pulse at the true lag in ideal
conditions, for any weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from .errors import ConfigError, DataError, ShapeError
from .gcc import PHAT_GUARD_EPS, CorrelationWindow, estimate_delay
from .nn import BatchNorm1d, CircularConv1d, SincFilterBank, Tensor
from .signal import Frame


@dataclass(frozen=True)
class BackboneConfig:
    """Front-end filter network: sinc bank (or plain conv) + conv stack."""

    sinc_filters: int = 128
    sinc_kernel_length: int = 1023
    sinc_enabled: bool = True
    conv_kernel_lengths: tuple[int, ...] = (11, 9, 7)
    hidden_channels: int = 128
    output_channels: int = 128  # L, the number of correlation channels

    def __post_init__(self):
        if self.output_channels < 1:
            raise ConfigError("output_channels must be >= 1")
        for k in (self.sinc_kernel_length, *self.conv_kernel_lengths):
            if k % 2 == 0:
                raise ConfigError(f"kernel lengths must be odd, got {k}")


@dataclass(frozen=True)
class ClassifierConfig:
    """Lag classifier: conv stack over the lag axis down to one channel."""

    conv_kernel_lengths: tuple[int, ...] = (11, 9, 7, 5)
    hidden_channels: int = 128
    head: str = "ce_softmax"  # or "mse_soft_argmax"

    def __post_init__(self):
        if self.head not in ("ce_softmax", "mse_soft_argmax"):
            raise ConfigError(f"unknown head: {self.head!r}")
        for k in self.conv_kernel_lengths:
            if k % 2 == 0:
                raise ConfigError(f"kernel lengths must be odd, got {k}")


@dataclass(frozen=True)
class ModelConfig:
    frame_length: int = 2048
    sample_rate: float = 16000.0
    tau_max: int = 23
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)

    @property
    def num_lags(self) -> int:
        return 2 * self.tau_max + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        bb = dict(d["backbone"])
        bb["conv_kernel_lengths"] = tuple(bb["conv_kernel_lengths"])
        cl = dict(d["classifier"])
        cl["conv_kernel_lengths"] = tuple(cl["conv_kernel_lengths"])
        return cls(
            frame_length=d["frame_length"],
            sample_rate=d["sample_rate"],
            tau_max=d["tau_max"],
            backbone=BackboneConfig(**bb),
            classifier=ClassifierConfig(**cl),
        )


def desk_config(head: str = "ce_softmax", output_channels: int = 16) -> ModelConfig:
    """Laptop-scale preset: small sinc bank and narrow conv stacks."""
    return ModelConfig(
        backbone=BackboneConfig(
            sinc_filters=32, sinc_kernel_length=255,
            hidden_channels=16, output_channels=output_channels,
        ),
        classifier=ClassifierConfig(hidden_channels=32, head=head),
    )


def paper_config(head: str = "ce_softmax") -> ModelConfig:
    """Full-scale preset matching the published architecture."""
    return ModelConfig()


@dataclass(frozen=True)
class CorrelationMatrix:
    """PHAT correlations of the L filtered channel pairs, lags by channels."""

    values: np.ndarray
    tau_max: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.ndim != 2 or values.shape[0] != 2 * self.tau_max + 1:
            raise ShapeError(
                f"expected ({2 * self.tau_max + 1}, L) matrix, got {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise DataError("correlation matrix contains non-finite values")


@dataclass(frozen=True)
class DelayPosterior:
    """Probability vector over integer lags -tau_max ... +tau_max."""

    probabilities: np.ndarray
    tau_max: int

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        object.__setattr__(self, "probabilities", p)
        if p.shape != (2 * self.tau_max + 1,):
            raise ShapeError(f"expected {2 * self.tau_max + 1} lags, got {p.shape}")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
            raise DataError("posterior must be nonnegative and sum to 1")

    @property
    def lags(self) -> np.ndarray:
        return np.arange(-self.tau_max, self.tau_max + 1)

    def prob_at(self, lag: int) -> float:
        return float(self.probabilities[lag + self.tau_max])


# ---------------------------------------------------------------------------
# differentiable per-channel GCC-PHAT
# ---------------------------------------------------------------------------


def _lag_basis(n: int, tau_max: int):
    """cos/sin synthesis matrices mapping rfft bins to the lag window."""
    nf = n // 2 + 1
    k = np.arange(nf)[:, None]
    m = np.arange(-tau_max, tau_max + 1)[None, :]
    theta = 2.0 * np.pi * k * m / n
    weights = np.full((nf, 1), 2.0)
    weights[0, 0] = 1.0
    weights[-1, 0] = 1.0  # Nyquist bin (n even throughout this package)
    cos_mat = weights * np.cos(theta)
    sin_mat = weights * np.sin(theta)
    return cos_mat, sin_mat


def _rfft_adjoint(g: np.ndarray, n: int) -> np.ndarray:
    """Adjoint of the real-input FFT as a linear map R^n -> (re, im) bins."""
    w = np.array(g, copy=True)
    w[..., 1:-1] *= 0.5
    w[..., 0] = w[..., 0].real
    w[..., -1] = w[..., -1].real
    return np.fft.irfft(w, n, axis=-1) * n


def phat_correlation(y1: Tensor, y2: Tensor, tau_max: int,
                     guard_eps: float = PHAT_GUARD_EPS) -> Tensor:
    """Per-channel GCC-PHAT of two (B, L, N) tensors over the lag window.

    Returns (B, 2*tau_max+1, L). Cross-spectrum bins below guard_eps of the
    per-channel peak magnitude contribute zero, matching the gcc module's
    division guard, and receive zero gradient.
    """
    if y1.data.shape != y2.data.shape:
        raise ShapeError(f"shape mismatch: {y1.data.shape} vs {y2.data.shape}")
    if y1.data.ndim != 3:
        raise ShapeError(f"expected (B, L, N), got {y1.data.shape}")
    n = y1.data.shape[2]
    if not 0 <= tau_max < n // 2:
        raise ConfigError(f"tau_max must be in [0, N/2), got {tau_max}")

    f1 = np.fft.rfft(y1.data.astype(np.float64, copy=False), axis=2)
    f2 = np.fft.rfft(y2.data.astype(np.float64, copy=False), axis=2)
    cross = f1 * np.conj(f2)
    mag = np.abs(cross)
    peak = mag.max(axis=2, keepdims=True)
    keep = mag >= guard_eps * np.maximum(peak, np.finfo(np.float64).tiny)
    safe_mag = np.where(keep, mag, 1.0)
    unit = np.where(keep, cross / safe_mag, 0.0)

    cos_mat, sin_mat = _lag_basis(n, tau_max)
    out = (
        np.matmul(unit.real, cos_mat) - np.matmul(unit.imag, sin_mat)
    ).swapaxes(1, 2) / n

    def bwd(g):
        g = np.ascontiguousarray(g.swapaxes(1, 2), dtype=np.float64)  # (B, L, M)
        g_re = np.matmul(g, cos_mat.T) / n
        g_im = -np.matmul(g, sin_mat.T) / n
        # phase-only normalization: gradient of C/|C| is orthogonal to C
        a, b = cross.real, cross.imag
        t = np.where(keep, (g_re * b - g_im * a) / safe_mag**3, 0.0)
        g_cross = (b * t) + 1j * (-(a * t))
        g_f1 = g_cross * f2
        g_f2 = np.conj(g_cross) * f1
        return _rfft_adjoint(g_f1, n), _rfft_adjoint(g_f2, n)

    return Tensor(out.astype(y1.data.dtype, copy=False), parents=(y1, y2), backward_fn=bwd)


def roll_lags(x: Tensor, shift: int) -> Tensor:
    """Circularly re-index the lag axis (last axis) by ``shift``."""
    s = int(shift)

    def bwd(g):
        return (np.roll(g, -s, axis=-1),)

    return Tensor(np.roll(x.data, s, axis=-1), parents=(x,), backward_fn=bwd)


def cross_entropy_with_logits(logits: Tensor, target_indices: np.ndarray) -> Tensor:
    """Mean cross-entropy over a batch, computed stably from logits.

    The gradient at the logits is (softmax - onehot) / batch.
    """
    z = logits.data.astype(np.float64)
    if z.ndim != 2:
        raise ShapeError(f"expected (B, M) logits, got {z.shape}")
    idx = np.asarray(target_indices, dtype=np.int64)
    if idx.shape != (z.shape[0],):
        raise ShapeError("one target index per batch row required")
    if np.any(idx < 0) or np.any(idx >= z.shape[1]):
        raise ConfigError("target index outside the lag window")
    zmax = z.max(axis=1, keepdims=True)
    logsumexp = zmax[:, 0] + np.log(np.sum(np.exp(z - zmax), axis=1))
    losses = logsumexp - z[np.arange(z.shape[0]), idx]
    p = np.exp(z - zmax)
    p /= p.sum(axis=1, keepdims=True)

    def bwd(g):
        grad = p.copy()
        grad[np.arange(z.shape[0]), idx] -= 1.0
        return (grad * float(g) / z.shape[0],)

    return Tensor(np.mean(losses), parents=(logits,), backward_fn=bwd)


def soft_argmax(logits: Tensor, tau_max: int) -> Tensor:
    """Differentiable delay expectation: sum_m m * softmax(logits)[m]."""
    p = nn.softmax(logits, axis=1)
    lags = np.arange(-tau_max, tau_max + 1, dtype=np.float64)

    def bwd(g):
        return (g[:, None] * lags[None, :],)

    weighted = Tensor(p.data @ lags, parents=(p,), backward_fn=bwd)
    return weighted


def squared_error_loss(estimates: Tensor, targets: np.ndarray) -> Tensor:
    """Mean squared error between delay estimates and true integer delays."""
    t = np.asarray(targets, dtype=np.float64)
    diff = estimates.data.astype(np.float64) - t

    def bwd(g):
        return (2.0 * diff * float(g) / diff.size,)

    return Tensor(np.mean(diff**2), parents=(estimates,), backward_fn=bwd)


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


class TdoaModel:
    """Filter front end + per-channel PHAT correlation + lag classifier.

    A freshly constructed model is calibrated so that its classifier maps an
    ideal unit-pulse correlation matrix at lag 0 to an argmax at lag 0; the
    classifier stack is circular along the lag axis, so this single offset
    makes delay recovery exact for every lag before any training.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, calibrate: bool = True,
                 dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
        bb, cl = config.backbone, config.classifier

        self.front_layers: list = []
        if bb.sinc_enabled:
            first = SincFilterBank(bb.sinc_filters, bb.sinc_kernel_length,
                                   config.sample_rate, rng, dtype=self.dtype)
        else:
            first = CircularConv1d(1, bb.sinc_filters, bb.sinc_kernel_length,
                                   rng, dtype=self.dtype)
        self.front_layers.append(first)
        self.front_norms = [BatchNorm1d(bb.sinc_filters, dtype=self.dtype)]
        channel_plan = [bb.sinc_filters]
        for i, k in enumerate(bb.conv_kernel_lengths):
            out_ch = bb.output_channels if i == len(bb.conv_kernel_lengths) - 1 \
                else bb.hidden_channels
            self.front_layers.append(
                CircularConv1d(channel_plan[-1], out_ch, k, rng, dtype=self.dtype)
            )
            self.front_norms.append(BatchNorm1d(out_ch, dtype=self.dtype))
            channel_plan.append(out_ch)

        self.cls_layers: list = []
        self.cls_norms: list = []
        in_ch = bb.output_channels
        for i, k in enumerate(cl.conv_kernel_lengths):
            last = i == len(cl.conv_kernel_lengths) - 1
            out_ch = 1 if last else cl.hidden_channels
            self.cls_layers.append(
                CircularConv1d(in_ch, out_ch, k, rng, dtype=self.dtype)
            )
            if not last:
                self.cls_norms.append(BatchNorm1d(out_ch, dtype=self.dtype))
            in_ch = out_ch

        self.lag_offset = 0
        if calibrate:
            self.calibrate_delta_response()

    # -- plumbing ----------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, layer in enumerate(self.front_layers):
            prefix = f"front.{i}"
            if isinstance(layer, SincFilterBank):
                params[f"{prefix}.low_hz"] = layer.low_hz
                params[f"{prefix}.band_hz"] = layer.band_hz
            else:
                params[f"{prefix}.weight"] = layer.weight
                params[f"{prefix}.bias"] = layer.bias
        for i, bn in enumerate(self.front_norms):
            params[f"front_bn.{i}.gamma"] = bn.gamma
            params[f"front_bn.{i}.beta"] = bn.beta
        for i, layer in enumerate(self.cls_layers):
            params[f"cls.{i}.weight"] = layer.weight
            params[f"cls.{i}.bias"] = layer.bias
        for i, bn in enumerate(self.cls_norms):
            params[f"cls_bn.{i}.gamma"] = bn.gamma
            params[f"cls_bn.{i}.beta"] = bn.beta
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def named_buffers(self) -> dict[str, np.ndarray]:
        bufs: dict[str, np.ndarray] = {}
        for i, bn in enumerate(self.front_norms):
            bufs[f"front_bn.{i}.running_mean"] = bn.running_mean
            bufs[f"front_bn.{i}.running_var"] = bn.running_var
        for i, bn in enumerate(self.cls_norms):
            bufs[f"cls_bn.{i}.running_mean"] = bn.running_mean
            bufs[f"cls_bn.{i}.running_var"] = bn.running_var
        return bufs

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # -- forward passes ------------------------------------------------------

    def backbone_forward(self, x: Tensor, training: bool = False) -> Tensor:
        """(B, 1, N) -> (B, L, N) filtered signals."""
        h = x
        for layer, norm in zip(self.front_layers, self.front_norms):
            h = layer(h)
            h = norm(h, training=training)
            h = nn.leaky_relu(h, 0.01)
        return h

    def classifier_forward(self, corr: Tensor, training: bool = False) -> Tensor:
        """(B, L, M) correlation channels -> (B, M) logits over lags."""
        h = corr
        for i, layer in enumerate(self.cls_layers):
            h = layer(h)
            if i < len(self.cls_norms):
                h = self.cls_norms[i](h, training=training)
                h = nn.leaky_relu(h, 0.01)
        h = roll_lags(h, self.lag_offset)
        data = h.data[:, 0, :]

        def bwd(g):
            return (g[:, None, :],)

        return Tensor(data, parents=(h,), backward_fn=bwd)

    def logits_for_pair(self, x1: Tensor, x2: Tensor, training: bool = False) -> Tensor:
        """Full pipeline from a batch of normalized frame pairs to lag logits.

        Both sides share one backbone pass (and, in train mode, one set of
        batch statistics), then correlate channel-by-channel.
        """
        both = concat_batch(x1, x2)
        y = self.backbone_forward(both, training=training)
        y1, y2 = split_batch(y, x1.data.shape[0])
        corr = phat_correlation(y1, y2, self.config.tau_max)
        # classifier convolves along lags: (B, M, L) -> (B, L, M)
        corr_t = transpose_last_two(corr)
        return self.classifier_forward(corr_t, training=training)

    def calibrate_delta_response(self):
        """Point the untrained classifier's unit-pulse response at lag 0."""
        self.lag_offset = 0
        m = self.config.num_lags
        delta = np.zeros((1, self.config.backbone.output_channels, m),
                         dtype=self.dtype)
        delta[:, :, self.config.tau_max] = 1.0
        logits = self.classifier_forward(Tensor(delta), training=False).data[0]
        self.lag_offset = int((self.config.tau_max - np.argmax(logits)) % m)

    # -- checkpoints ---------------------------------------------------------

    def save(self, path_prefix, extra: dict | None = None):
        named = {name: p.data for name, p in self.named_parameters().items()}
        named.update(self.named_buffers())
        manifest_extra = {
            "model_config": self.config.to_dict(),
            "lag_offset": self.lag_offset,
        }
        if extra:
            manifest_extra.update(extra)
        nn.save_param_blob(path_prefix, named, manifest_extra)

    @classmethod
    def load(cls, path_prefix, dtype=np.float64) -> "TdoaModel":
        values, manifest = nn.load_param_blob(path_prefix)
        config = ModelConfig.from_dict(manifest["model_config"])
        model = cls(config, seed=0, calibrate=False, dtype=dtype)
        model.lag_offset = int(manifest["lag_offset"])
        params = model.named_parameters()
        buffers = model.named_buffers()
        for name, arr in values.items():
            if name in params:
                if params[name].data.shape != arr.shape:
                    raise DataError(
                        f"shape mismatch for {name}: checkpoint {arr.shape}, "
                        f"model {params[name].data.shape}"
                    )
                params[name].data = arr.astype(params[name].data.dtype)
            elif name in buffers:
                buffers[name][...] = arr
            else:
                raise DataError(f"unknown parameter {name!r} in checkpoint")
        missing = set(params) - set(values)
        if missing:
            raise DataError(f"checkpoint missing parameters: {sorted(missing)}")
        return model


def transpose_last_two(x: Tensor) -> Tensor:
    def bwd(g):
        return (np.swapaxes(g, -1, -2),)

    return Tensor(np.swapaxes(x.data, -1, -2), parents=(x,), backward_fn=bwd)


def concat_batch(a: Tensor, b: Tensor) -> Tensor:
    na = a.data.shape[0]

    def bwd(g):
        return g[:na], g[na:]

    return Tensor(np.concatenate([a.data, b.data], axis=0),
                  parents=(a, b), backward_fn=bwd)


def split_batch(x: Tensor, n_first: int) -> tuple[Tensor, Tensor]:
    total = x.data.shape[0]

    def bwd_first(g):
        full = np.zeros_like(x.data)
        full[:n_first] = g
        return (full,)

    def bwd_second(g):
        full = np.zeros_like(x.data)
        full[n_first:] = g
        return (full,)

    first = Tensor(x.data[:n_first], parents=(x,), backward_fn=bwd_first)
    second = Tensor(x.data[n_first:], parents=(x,), backward_fn=bwd_second)
    return first, second


# ---------------------------------------------------------------------------
# public single-frame operations
# ---------------------------------------------------------------------------


def normalize_input(samples: np.ndarray) -> np.ndarray:
    """Zero-mean, unit peak-absolute normalization applied before filtering.

    Both statistics are shift-invariant, so this keeps the front end
    exactly equivariant. All-zero input is returned unchanged.
    """
    x = np.asarray(samples, dtype=np.float64)
    x = x - x.mean()
    peak = np.abs(x).max()
    if peak > 0:
        x = x / peak
    return x


def filter_signals(x: Frame, model: TdoaModel) -> np.ndarray:
    """Apply the front end to one frame; returns (N, L) filtered signals."""
    if len(x) != model.config.frame_length:
        raise ShapeError(
            f"frame length {len(x)} does not match model config "
            f"{model.config.frame_length}"
        )
    data = normalize_input(x.samples)[None, None, :].astype(model.dtype)
    out = model.backbone_forward(Tensor(data), training=False)
    return out.data[0].T


def multichannel_gcc_phat(y1: np.ndarray, y2: np.ndarray, tau_max: int) -> CorrelationMatrix:
    """Column-wise GCC-PHAT of two (N, L) signal banks."""
    y1 = np.asarray(y1, dtype=np.float64)
    y2 = np.asarray(y2, dtype=np.float64)
    if y1.shape != y2.shape:
        raise ShapeError(f"shape mismatch: {y1.shape} vs {y2.shape}")
    if y1.ndim == 1:
        y1 = y1[:, None]
        y2 = y2[:, None]
    out = phat_correlation(
        Tensor(y1.T[None]), Tensor(y2.T[None]), tau_max
    )
    return CorrelationMatrix(out.data[0], tau_max)


def classify(corr: CorrelationMatrix, model: TdoaModel) -> DelayPosterior:
    """Map a correlation matrix to a posterior over integer lags."""
    expected_l = model.config.backbone.output_channels
    if corr.values.shape != (model.config.num_lags, expected_l):
        raise ShapeError(
            f"expected ({model.config.num_lags}, {expected_l}) matrix, "
            f"got {corr.values.shape}"
        )
    logits = model.classifier_forward(Tensor(corr.values.T[None]), training=False)
    p = nn.softmax(logits, axis=1).data[0]
    return DelayPosterior(p, model.config.tau_max)


def ce_loss(posterior: DelayPosterior, tau_true: int) -> float:
    """Cross-entropy of the true delay under the posterior: -log p[tau]."""
    if abs(tau_true) > posterior.tau_max:
        raise ConfigError(
            f"true delay {tau_true} outside lag window +-{posterior.tau_max}"
        )
    p = posterior.prob_at(tau_true)
    return float(-np.log(np.maximum(p, np.finfo(np.float64).tiny)))


def mse_head(corr: CorrelationMatrix, model: TdoaModel) -> float:
    """Soft-argmax delay estimate from the regression head."""
    expected_l = model.config.backbone.output_channels
    if corr.values.shape != (model.config.num_lags, expected_l):
        raise ShapeError(
            f"expected ({model.config.num_lags}, {expected_l}) matrix, "
            f"got {corr.values.shape}"
        )
    logits = model.classifier_forward(Tensor(corr.values.T[None]), training=False)
    return float(soft_argmax(logits, model.config.tau_max).data[0])


def mse_loss(tau_hat: float, tau_true: float) -> float:
    return float((tau_hat - tau_true) ** 2)


def predict(x1: Frame, x2: Frame, model: TdoaModel) -> tuple[int, DelayPosterior]:
    """Estimate the integer delay of x1 relative to x2, with its posterior."""
    y1 = filter_signals(x1, model)
    y2 = filter_signals(x2, model)
    corr = multichannel_gcc_phat(y1, y2, model.config.tau_max)
    posterior = classify(corr, model)
    window = CorrelationWindow(posterior.probabilities, posterior.tau_max)
    return estimate_delay(window), posterior


def predict_batch(x1: np.ndarray, x2: np.ndarray, model: TdoaModel) -> np.ndarray:
    """Vectorized integer-delay prediction for (B, N) frame arrays.

    Follows the same pipeline as predict(); ties resolve toward the
    smallest |lag| then negative, identical to estimate_delay.
    """
    b, n = x1.shape
    if n != model.config.frame_length:
        raise ShapeError(f"frame length {n} != config {model.config.frame_length}")
    x1n = np.stack([normalize_input(row) for row in x1])[:, None, :].astype(model.dtype)
    x2n = np.stack([normalize_input(row) for row in x2])[:, None, :].astype(model.dtype)
    logits = model.logits_for_pair(Tensor(x1n), Tensor(x2n), training=False)
    if model.config.classifier.head == "mse_soft_argmax":
        est = soft_argmax(logits, model.config.tau_max).data
        return np.clip(np.round(est), -model.config.tau_max, model.config.tau_max
                       ).astype(np.int64)
    return np.array([
        estimate_delay(CorrelationWindow(
            nn.softmax(Tensor(row[None]), axis=1).data[0], model.config.tau_max))
        for row in logits.data
    ])
