"""Minimal feed-forward network engine: fully connected and 2-D convolution
layers, reverse-mode gradients, an Adam optimizer and a binary checkpoint
format.

Tensors are plain float64 numpy arrays.  Networks are described by an
immutable :class:`NetworkSpec`; parameters live in a :class:`LayerWeights`
bundle so the same spec can be evaluated under full-precision or quantized
weights.  In quantized mode the forward pass snaps the input onto the k-bit
grid, quantizes each layer's weights on the fly and routes hidden activations
through the clamped quantized ReLU; the backward pass applies straight-through
rules at every quantizer boundary.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from .quant import (
    QuantConfig,
    quantize_activation,
    quantize_weights,
    quantize_weights_noisy,
    relu_q,
    relu_q_grad,
)

FC = "fc"
CONV2D = "conv2d"

RELU = "relu"
RELU_Q = "relu_q"
IDENTITY = "identity"

_CHECKPOINT_FORMAT = "rivc-checkpoint-v1"


@dataclass(frozen=True)
class LayerSpec:
    """One layer: kind, dimensions and activation.

    ``use_bias`` must stay False for networks destined for spiking-network
    conversion; the conversion removes no biases, it refuses them.
    """

    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    activation: str = RELU
    use_bias: bool = False

    def __post_init__(self) -> None:
        if self.kind not in (FC, CONV2D):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in (RELU, RELU_Q, IDENTITY):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind == CONV2D and (self.kernel < 1 or self.stride < 1):
            raise ValueError("conv2d needs kernel >= 1 and stride >= 1")


def fc(in_features: int, out_features: int, activation: str = RELU, use_bias: bool = False) -> LayerSpec:
    return LayerSpec(FC, in_features=in_features, out_features=out_features,
                     activation=activation, use_bias=use_bias)


def conv2d(in_channels: int, out_channels: int, kernel: int, stride: int = 1,
           activation: str = RELU, use_bias: bool = False) -> LayerSpec:
    return LayerSpec(CONV2D, in_channels=in_channels, out_channels=out_channels,
                     kernel=kernel, stride=stride, activation=activation, use_bias=use_bias)


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layers plus the input shape; adjacent shapes are validated."""

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        self._shape_chain()  # validates

    def _shape_chain(self) -> list[tuple[int, ...]]:
        shapes = [self.input_shape]
        cur = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.kind == FC:
                flat = int(np.prod(cur))
                if flat != layer.in_features:
                    raise ValueError(
                        f"layer {i}: fc expects {layer.in_features} inputs, "
                        f"previous shape {cur} gives {flat}"
                    )
                cur = (layer.out_features,)
            else:
                if len(cur) != 3 or cur[0] != layer.in_channels:
                    raise ValueError(
                        f"layer {i}: conv2d expects (C={layer.in_channels}, H, W), got {cur}"
                    )
                _, h, w = cur
                if h < layer.kernel or w < layer.kernel:
                    raise ValueError(f"layer {i}: kernel {layer.kernel} larger than input {cur}")
                oh = (h - layer.kernel) // layer.stride + 1
                ow = (w - layer.kernel) // layer.stride + 1
                cur = (layer.out_channels, oh, ow)
            shapes.append(cur)
        return shapes

    @property
    def layer_output_shapes(self) -> list[tuple[int, ...]]:
        return self._shape_chain()[1:]

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self._shape_chain()[-1]

    def to_json(self) -> str:
        return json.dumps({
            "input_shape": list(self.input_shape),
            "layers": [vars(l) for l in self.layers],
        })

    @staticmethod
    def from_json(text: str) -> "NetworkSpec":
        raw = json.loads(text)
        layers = tuple(LayerSpec(**d) for d in raw["layers"])
        return NetworkSpec(layers=layers, input_shape=tuple(raw["input_shape"]))


@dataclass
class LayerWeights:
    """Per-layer weight arrays (and optional biases) matching a NetworkSpec."""

    weights: list[np.ndarray]
    biases: list[np.ndarray | None] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.biases:
            self.biases = [None] * len(self.weights)

    def copy(self) -> "LayerWeights":
        return LayerWeights(
            weights=[w.copy() for w in self.weights],
            biases=[None if b is None else b.copy() for b in self.biases],
        )

    def params(self) -> list[np.ndarray]:
        """Flat list of parameter arrays in a fixed order (weights then bias per layer)."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            if b is not None:
                out.append(b)
        return out

    def has_biases(self) -> bool:
        return any(b is not None for b in self.biases)


def _weight_shape(layer: LayerSpec) -> tuple[int, ...]:
    if layer.kind == FC:
        return (layer.out_features, layer.in_features)
    return (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)


def init_weights(spec: NetworkSpec, rng: np.random.Generator) -> LayerWeights:
    """Fan-in-scaled uniform init, deterministic given the generator state.

    Every weight is drawn from U(-sqrt(6/fan_in), sqrt(6/fan_in)); biases, when
    present, start at zero.
    """
    weights: list[np.ndarray] = []
    biases: list[np.ndarray | None] = []
    for layer in spec.layers:
        if layer.kind == FC:
            fan_in = layer.in_features
            out_dim = layer.out_features
        else:
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            out_dim = layer.out_channels
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=_weight_shape(layer)))
        biases.append(np.zeros(out_dim) if layer.use_bias else None)
    return LayerWeights(weights=weights, biases=biases)


def zeros_like_weights(weights: LayerWeights) -> LayerWeights:
    return LayerWeights(
        weights=[np.zeros_like(w) for w in weights.weights],
        biases=[None if b is None else np.zeros_like(b) for b in weights.biases],
    )


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardCache:
    """Per-layer values captured by forward() for the matching backward()."""

    layer_inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    effective_weights: list[np.ndarray]
    quant: QuantConfig | None
    batched: bool


def _conv_windows(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    sw = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    return sw[:, :, ::stride, ::stride]


def _layer_linear(layer: LayerSpec, w: np.ndarray, b: np.ndarray | None,
                  x: np.ndarray) -> np.ndarray:
    if layer.kind == FC:
        if x.ndim > 2:
            x = x.reshape(x.shape[0], -1)
        z = x @ w.T
    else:
        sw = _conv_windows(x, layer.kernel, layer.stride)
        z = np.einsum("bcxykl,ockl->boxy", sw, w, optimize=True)
    if b is not None:
        z = z + (b if layer.kind == FC else b[None, :, None, None])
    return z


def forward(
    spec: NetworkSpec,
    weights: LayerWeights,
    x: np.ndarray,
    quant: QuantConfig | None = None,
    noise_rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate the network; returns the output and a cache for backward().

    Accepts a single input of ``spec.input_shape`` or a batch with a leading
    batch axis.  When ``quant`` is given the input is snapped to the k-bit grid,
    weights are quantized on the fly (with noise when ``noise_rng`` is passed,
    training only) and ReLU activations are evaluated as the quantized ReLU.
    """
    x = np.asarray(x, dtype=float)
    batched = x.shape != spec.input_shape
    if batched:
        if x.shape[1:] != spec.input_shape:
            raise ValueError(f"input shape {x.shape} does not match spec {spec.input_shape}")
    else:
        x = x[None]

    if len(weights.weights) != len(spec.layers):
        raise ValueError("weights do not match spec layer count")

    if quant is not None:
        x = quantize_activation(np.clip(x, 0.0, 1.0), quant.bits)

    layer_inputs: list[np.ndarray] = []
    pre_acts: list[np.ndarray] = []
    eff_weights: list[np.ndarray] = []
    h = x
    last = len(spec.layers) - 1
    for i, layer in enumerate(spec.layers):
        w = weights.weights[i]
        if w.shape != _weight_shape(layer):
            raise ValueError(f"layer {i}: weight shape {w.shape}, expected {_weight_shape(layer)}")
        if quant is not None:
            if noise_rng is not None:
                w_eff = quantize_weights_noisy(w, quant.bits, noise_rng, quant.weight_map)
            else:
                w_eff = quantize_weights(w, quant.bits, quant.weight_map)
        else:
            w_eff = w
        layer_inputs.append(h)
        z = _layer_linear(layer, w_eff, weights.biases[i], h)
        pre_acts.append(z)
        eff_weights.append(w_eff)

        act = layer.activation
        if act == IDENTITY:
            h = z
        elif quant is not None:  # both relu kinds snap to the grid in quantized mode
            h = relu_q(z, quant.bits, quant.sigma)
        elif act == RELU:
            h = np.maximum(z, 0.0)
        else:
            raise ValueError(f"layer {i}: relu_q activation requires a quantization config")
        if i == last and act != IDENTITY:
            raise ValueError("final layer activation must be identity")

    if not np.all(np.isfinite(h)):
        raise FloatingPointError("non-finite values in network output")
    out = h if batched else h[0]
    cache = ForwardCache(layer_inputs, pre_acts, eff_weights, quant, batched)
    return out, cache


def backward(
    spec: NetworkSpec,
    weights: LayerWeights,
    cache: ForwardCache,
    output_grad: np.ndarray,
) -> LayerWeights:
    """Gradient of a scalar loss w.r.t. the full-precision parameters.

    ``output_grad`` is dLoss/dOutput for the forward pass that produced
    ``cache``.  Quantizer boundaries use straight-through rules: the weight
    quantizer passes gradients unchanged, the quantized ReLU passes them scaled
    by sigma inside its active range and blocks them outside.
    """
    if len(cache.pre_activations) != len(spec.layers):
        raise ValueError("cache does not match spec")
    g = np.asarray(output_grad, dtype=float)
    if not cache.batched:
        g = g[None]
    if g.shape != cache.pre_activations[-1].shape:
        raise ValueError(
            f"output_grad shape {g.shape} does not match forward output "
            f"{cache.pre_activations[-1].shape}"
        )

    quant = cache.quant
    grads = zeros_like_weights(weights)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        pre = cache.pre_activations[i]
        x_in = cache.layer_inputs[i]
        w_eff = cache.effective_weights[i]

        if layer.activation == IDENTITY:
            dz = g
        elif quant is not None:
            dz = g * relu_q_grad(pre, quant.sigma)
        else:
            dz = g * (pre > 0.0)

        if layer.kind == FC:
            x2 = x_in.reshape(x_in.shape[0], -1) if x_in.ndim > 2 else x_in
            grads.weights[i][...] = dz.T @ x2
            if grads.biases[i] is not None:
                grads.biases[i][...] = dz.sum(axis=0)
            g = (dz @ w_eff).reshape(x_in.shape)
        else:
            sw = _conv_windows(x_in, layer.kernel, layer.stride)
            grads.weights[i][...] = np.einsum("bcxykl,boxy->ockl", sw, dz, optimize=True)
            if grads.biases[i] is not None:
                grads.biases[i][...] = dz.sum(axis=(0, 2, 3))
            gx = np.zeros_like(x_in)
            s, k = layer.stride, layer.kernel
            oh, ow = dz.shape[2], dz.shape[3]
            for ki in range(k):
                for kj in range(k):
                    gx[:, :, ki:ki + s * oh:s, kj:kj + s * ow:s] += np.einsum(
                        "boxy,oc->bcxy", dz, w_eff[:, :, ki, kj], optimize=True
                    )
            g = gx
    return grads


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Adaptive-moment accumulators aligned with LayerWeights.params() order."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(weights: LayerWeights, lr: float) -> AdamState:
    params = weights.params()
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        step=0,
        lr=lr,
    )


def adam_step(weights: LayerWeights, grads: LayerWeights, state: AdamState) -> None:
    """One bias-corrected Adam update, applied to the weights in place."""
    params = weights.params()
    gparams = grads.params()
    if len(params) != len(state.m):
        raise ValueError("optimizer state does not match weights")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, gp, m, v in zip(params, gparams, state.m, state.v):
        if p.shape != gp.shape:
            raise ValueError("gradient shape does not match parameter shape")
        m *= b1
        m += (1.0 - b1) * gp
        v *= b2
        v += (1.0 - b2) * gp * gp
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# checkpoint I/O


def save_checkpoint(file: str | io.IOBase, spec: NetworkSpec, weights: LayerWeights) -> None:
    """Write spec + parameters; float64 arrays round-trip bit-exactly."""
    arrays: dict[str, np.ndarray] = {
        "format": np.array(_CHECKPOINT_FORMAT),
        "spec": np.array(spec.to_json()),
    }
    for i, w in enumerate(weights.weights):
        arrays[f"w{i}"] = w
        if weights.biases[i] is not None:
            arrays[f"b{i}"] = weights.biases[i]
    np.savez(file, **arrays)


def load_checkpoint(file: str | io.IOBase) -> tuple[NetworkSpec, LayerWeights]:
    with np.load(file) as data:
        fmt = str(data["format"])
        if fmt != _CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {fmt!r}")
        spec = NetworkSpec.from_json(str(data["spec"]))
        weights = [data[f"w{i}"].astype(float) for i in range(len(spec.layers))]
        biases = [
            data[f"b{i}"].astype(float) if f"b{i}" in data else None
            for i in range(len(spec.layers))
        ]
    return spec, LayerWeights(weights=weights, biases=biases)


def checkpoint_bytes(spec: NetworkSpec, weights: LayerWeights) -> bytes:
    buf = io.BytesIO()
    save_checkpoint(buf, spec, weights)
    return buf.getvalue()


def load_checkpoint_bytes(blob: bytes) -> tuple[NetworkSpec, LayerWeights]:
    return load_checkpoint(io.BytesIO(blob))
