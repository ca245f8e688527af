"""ConvNeXt-style 1D regressor assembled from the kernel set.

Layout: a two-conv strided stem (each conv followed by norm, GELU and
dropout), four residual stages of depthwise-separable blocks, then a global
average pool and a linear head emitting one number per segment.  Between
stages the length is halved by an average pool and the width is raised by
parameter-free channel repetition, so the counted trainable layers are
exactly the convolutions plus the head.

Block: depthwise conv -> instance norm -> pointwise expand (4x) -> GELU ->
pointwise shrink -> residual add, with dropout after each convolution unit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels as K


class SpecError(ValueError):
    pass


class NumericError(RuntimeError):
    """Non-finite values reached the model (NaN loss, bad input)."""


@dataclass(frozen=True)
class StageSpec:
    n_blocks: int
    channels: int
    kernel_size: int
    dilation: int = 1


@dataclass(frozen=True)
class ModelSpec:
    stages: tuple[StageSpec, ...]
    stem_kernel: int = 15
    stem_stride: int = 4
    dropout_p: float = 0.3

    def __post_init__(self):
        if len(self.stages) == 0:
            raise SpecError("spec needs at least one stage")
        prev = self.stages[0].channels
        for st in self.stages[1:]:
            if st.channels % prev != 0:
                raise SpecError(
                    f"stage widths must be integer multiples across transitions "
                    f"({prev} -> {st.channels})"
                )
            prev = st.channels


def desk_spec() -> ModelSpec:
    """Small configuration for tests and CI (trains in minutes on a CPU)."""
    return ModelSpec(
        stages=(
            StageSpec(1, 8, 15, 1),
            StageSpec(1, 16, 15, 1),
            StageSpec(2, 32, 15, 2),
            StageSpec(1, 64, 15, 2),
        )
    )


def paper_spec() -> ModelSpec:
    """Full-scale configuration: 60 trainable layers, ~15M parameters."""
    return ModelSpec(
        stages=(
            StageSpec(2, 70, 15, 1),
            StageSpec(3, 140, 15, 1),
            StageSpec(11, 280, 15, 2),
            StageSpec(3, 560, 15, 2),
        )
    )


def tiny_spec() -> ModelSpec:
    """Minimal configuration for gradient checking."""
    return ModelSpec(
        stages=(StageSpec(1, 4, 7, 1), StageSpec(1, 8, 7, 2)),
        stem_kernel=7,
    )


SPEC_PRESETS = {"desk": desk_spec, "paper": paper_spec, "tiny": tiny_spec}


def count_params(spec: ModelSpec) -> int:
    """Exact trainable scalar count (conv/linear weights+biases, norm affine)."""
    c0 = spec.stages[0].channels
    total = 0
    in_ch = 1
    for _ in range(2):  # stem convs, each with a norm; stride costs nothing
        total += c0 * in_ch * spec.stem_kernel + c0 + 2 * c0
        in_ch = c0
    for st in spec.stages:
        c = st.channels
        per_block = (c * st.kernel_size + c) + 2 * c + (4 * c * c + 4 * c) + (c * 4 * c + c)
        total += st.n_blocks * per_block
    total += spec.stages[-1].channels + 1  # head
    return total


def count_layers(spec: ModelSpec) -> int:
    """Trainable layers = convolutions + the linear head."""
    return 2 + 3 * sum(st.n_blocks for st in spec.stages) + 1


def receptive_field(spec: ModelSpec) -> int:
    """Receptive field of the final pre-pool position, in input samples."""
    rf = 1
    factor = 1
    for _ in range(2):
        rf += (spec.stem_kernel - 1) * factor
        factor *= spec.stem_stride
    for i, st in enumerate(spec.stages):
        if i > 0:
            factor *= 2
        rf += st.n_blocks * (st.kernel_size - 1) * st.dilation * factor
    return rf


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with resampling beyond two standard deviations."""
    out = rng.standard_normal(shape) * std
    for _ in range(16):
        bad = np.abs(out) > 2 * std
        if not bad.any():
            break
        out[bad] = rng.standard_normal(int(bad.sum())) * std
    return np.clip(out, -2 * std, 2 * std)


def _init_weight(rng: np.random.Generator, shape, init: str) -> np.ndarray:
    """Weight draw: trunc_normal std 0.02 (training convention) or fan-in
    scaled normal (keeps activations unit-scale, used for gradient checks)."""
    if init == "trunc_normal":
        return _trunc_normal(rng, shape)
    if init == "fan_in":
        fan = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
        return rng.standard_normal(shape) / np.sqrt(max(1, fan))
    raise SpecError(f"unknown init {init!r}")


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Layer:
    """Base: parameters and their gradients are parallel name->array dicts."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, training, rng):  # pragma: no cover - interface
        raise NotImplementedError

    def backward(self, gout):  # pragma: no cover - interface
        raise NotImplementedError

    def zero_grads(self):
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)


class Conv1d(Layer):
    def __init__(self, in_ch, out_ch, kernel, rng, dtype, init="trunc_normal", stride=1):
        super().__init__()
        self.stride = stride
        self.params["w"] = _init_weight(rng, (out_ch, in_ch, kernel), init).astype(dtype)
        self.params["b"] = np.zeros(out_ch, dtype=dtype)

    def forward(self, x, training, rng):
        self._x = x
        return K.conv1d(x, self.params["w"], self.params["b"], self.stride)

    def backward(self, gout):
        gx, gw, gb = K.conv1d_grad(self._x, self.params["w"], gout, self.stride)
        self.grads["w"] += gw
        self.grads["b"] += gb
        return gx


class DepthwiseConv1d(Layer):
    def __init__(self, channels, kernel, dilation, rng, dtype, init="trunc_normal"):
        super().__init__()
        self.dilation = dilation
        self.params["w"] = _init_weight(rng, (channels, kernel), init).astype(dtype)
        self.params["b"] = np.zeros(channels, dtype=dtype)

    def forward(self, x, training, rng):
        self._x = x
        return K.depthwise_conv1d(x, self.params["w"], self.params["b"], self.dilation)

    def backward(self, gout):
        gx, gw, gb = K.depthwise_conv1d_grad(self._x, self.params["w"], gout, self.dilation)
        self.grads["w"] += gw
        self.grads["b"] += gb
        return gx


class PointwiseConv1d(Layer):
    def __init__(self, in_ch, out_ch, rng, dtype, init="trunc_normal"):
        super().__init__()
        self.params["w"] = _init_weight(rng, (out_ch, in_ch), init).astype(dtype)
        self.params["b"] = np.zeros(out_ch, dtype=dtype)

    def forward(self, x, training, rng):
        self._x = x
        return K.pointwise_conv1d(x, self.params["w"], self.params["b"])

    def backward(self, gout):
        gx, gw, gb = K.pointwise_conv1d_grad(self._x, self.params["w"], gout)
        self.grads["w"] += gw
        self.grads["b"] += gb
        return gx


class InstanceNorm(Layer):
    def __init__(self, channels, dtype, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)

    def forward(self, x, training, rng):
        y, self._cache = K.instance_norm(x, self.params["gamma"], self.params["beta"], self.eps)
        return y

    def backward(self, gout):
        gx, gg, gb = K.instance_norm_grad(self._cache, self.params["gamma"], gout)
        self.grads["gamma"] += gg
        self.grads["beta"] += gb
        return gx


class Gelu(Layer):
    def forward(self, x, training, rng):
        self._x = x
        y, self._cdf = K.gelu(x, return_cdf=True)
        return y

    def backward(self, gout):
        return K.gelu_grad(self._x, gout, self._cdf)


class Dropout(Layer):
    """Always fed a freshly allocated upstream output, so it masks in place."""

    def __init__(self, p):
        super().__init__()
        self.p = p

    def forward(self, x, training, rng):
        y, self._mask = K.dropout(x, self.p, rng, training, inplace=True)
        return y

    def backward(self, gout):
        return K.dropout_grad(self._mask, self.p, gout)


class AvgPool(Layer):
    def __init__(self, kernel=2):
        super().__init__()
        self.kernel = kernel

    def forward(self, x, training, rng):
        self._len = x.shape[2]
        return K.avg_pool_stride(x, self.kernel, self.kernel)

    def backward(self, gout):
        return K.avg_pool_stride_grad(self._len, self.kernel, gout)


class ChannelRepeat(Layer):
    """Parameter-free width increase at stage transitions."""

    def __init__(self, times):
        super().__init__()
        self.times = times

    def forward(self, x, training, rng):
        return np.repeat(x, self.times, axis=1)

    def backward(self, gout):
        b, c, n = gout.shape
        return gout.reshape(b, c // self.times, self.times, n).sum(axis=2)


class GlobalAvgPool(Layer):
    def forward(self, x, training, rng):
        self._len = x.shape[2]
        return K.global_avg_pool(x)

    def backward(self, gout):
        return K.global_avg_pool_grad(self._len, gout)


class LinearHead(Layer):
    def __init__(self, in_ch, rng, dtype, init="trunc_normal"):
        super().__init__()
        self.params["w"] = _init_weight(rng, (in_ch,), init).astype(dtype)
        self.params["b"] = np.zeros((), dtype=dtype)

    def forward(self, x, training, rng):
        self._x = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, gout):
        self.grads["w"] += gout @ self._x
        self.grads["b"] += gout.sum()
        return np.outer(gout, self.params["w"])


class Block(Layer):
    """Residual depthwise-separable unit."""

    def __init__(self, channels, kernel, dilation, dropout_p, rng, dtype, init="trunc_normal"):
        super().__init__()
        self.chain = [
            DepthwiseConv1d(channels, kernel, dilation, rng, dtype, init),
            InstanceNorm(channels, dtype),
            Dropout(dropout_p),
            PointwiseConv1d(channels, 4 * channels, rng, dtype, init),
            Gelu(),
            Dropout(dropout_p),
            PointwiseConv1d(4 * channels, channels, rng, dtype, init),
            Dropout(dropout_p),
        ]

    def forward(self, x, training, rng):
        y = x
        for layer in self.chain:
            y = layer.forward(y, training, rng)
        return x + y

    def backward(self, gout):
        g = gout
        for layer in reversed(self.chain):
            g = layer.backward(g)
        return gout + g

    def named_layers(self):
        names = ["dwconv", "norm", "drop1", "expand", "gelu", "drop2", "shrink", "drop3"]
        return list(zip(names, self.chain))


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


@dataclass
class Model:
    """Built network: an ordered layer list plus bookkeeping.

    The object owns its parameters; training mutates them in place.  A
    trained model is safe for concurrent read-only inference.
    """

    spec: ModelSpec
    seed: int
    dtype: np.dtype
    layers: list[tuple[str, Layer]]
    epoch: int = 0
    metrics: dict = field(default_factory=dict)

    def named_params(self):
        for lname, layer in self.layers:
            if isinstance(layer, Block):
                for sub, sl in layer.named_layers():
                    for pname, p in sl.params.items():
                        yield f"{lname}.{sub}.{pname}", sl, pname, p
            else:
                for pname, p in layer.params.items():
                    yield f"{lname}.{pname}", layer, pname, p

    def param_count(self) -> int:
        return sum(p.size for _, _, _, p in self.named_params())

    def zero_grads(self):
        for _, layer in self.layers:
            if isinstance(layer, Block):
                for _, sl in layer.named_layers():
                    sl.zero_grads()
            else:
                layer.zero_grads()

    def min_length(self) -> int:
        """Shortest input the downsampling schedule can carry to the head."""
        return self.spec.stem_stride**2 * 2 ** max(0, len(self.spec.stages) - 1)

    def forward(self, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        """Segments (B, 1, L) of z-normalized ECG to predictions (B,) in bpm."""
        x = np.ascontiguousarray(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[1] != 1:
            raise ValueError(f"expected (batch, 1, length) input, got {x.shape}")
        if x.shape[2] < self.min_length():
            raise ValueError(
                f"input length {x.shape[2]} below the model minimum {self.min_length()}"
            )
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite values in model input")
        for _, layer in self.layers:
            x = layer.forward(x, training, rng)
        return x

    def backward(self, gout: np.ndarray) -> np.ndarray:
        g = gout.astype(self.dtype)
        for _, layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def check_finite(self):
        for name, _, _, p in self.named_params():
            if not np.all(np.isfinite(p)):
                raise NumericError(f"non-finite parameter {name}")


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32, init: str = "trunc_normal") -> Model:
    """Initialize a model deterministically from (spec, seed).

    Weights are truncated-normal (std 0.02), biases zero, norm gains one.
    ``init='fan_in'`` draws weights at fan-in scale instead; gradient checks
    use it because the 0.02 convention leaves pre-norm activations so small
    that finite differences pick up curvature, not gradient errors.
    """
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    layers: list[tuple[str, Layer]] = []
    c0 = spec.stages[0].channels
    in_ch = 1
    for i in range(2):
        layers.append(
            (
                f"stem{i}.conv",
                Conv1d(in_ch, c0, spec.stem_kernel, rng, dtype, init, stride=spec.stem_stride),
            )
        )
        layers.append((f"stem{i}.norm", InstanceNorm(c0, dtype)))
        layers.append((f"stem{i}.gelu", Gelu()))
        layers.append((f"stem{i}.drop", Dropout(spec.dropout_p)))
        in_ch = c0
    prev = c0
    for si, st in enumerate(spec.stages):
        if si > 0:
            layers.append((f"stage{si}.pool", AvgPool(2)))
            if st.channels != prev:
                layers.append((f"stage{si}.widen", ChannelRepeat(st.channels // prev)))
        for bi in range(st.n_blocks):
            layers.append(
                (
                    f"stage{si}.block{bi}",
                    Block(st.channels, st.kernel_size, st.dilation, spec.dropout_p, rng, dtype, init),
                )
            )
        prev = st.channels
    layers.append(("head.pool", GlobalAvgPool()))
    layers.append(("head.linear", LinearHead(prev, rng, dtype, init)))

    model = Model(spec=spec, seed=seed, dtype=dtype, layers=layers)
    model.zero_grads()
    expected = count_params(spec)
    actual = model.param_count()
    if actual != expected:  # pragma: no cover - internal consistency
        raise SpecError(f"parameter accounting mismatch: {actual} vs {expected}")
    return model


def linear_only_model(seed: int = 0, dtype=np.float64, channels: int = 1) -> Model:
    """Global pool plus linear head only; the loss is exactly quadratic in
    its parameters, which makes it the sharpest gradient-check case."""
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    layers = [
        ("head.pool", GlobalAvgPool()),
        ("head.linear", LinearHead(channels, rng, dtype, "fan_in")),
    ]
    spec = ModelSpec(stages=(StageSpec(0, channels, 1),))
    model = Model(spec=spec, seed=seed, dtype=dtype, layers=layers)
    model.zero_grads()
    return model


def predict(model: Model, segments: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode predictions for (n, L) z-normalized segments."""
    segments = np.asarray(segments)
    if segments.ndim != 2:
        raise ValueError(f"expected (n, length) segments, got {segments.shape}")
    out = np.empty(len(segments), dtype=np.float64)
    for lo in range(0, len(segments), batch_size):
        batch = segments[lo : lo + batch_size, None, :]
        out[lo : lo + batch_size] = model.forward(batch, training=False)
    return out
