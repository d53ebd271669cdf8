"""Rate-coded integrate-and-fire conversion of a trained quantized network,
plus the event-driven simulator that produces action preferences from spike
counts.

Conversion rule: quantized weights (grid over [-1, 1] with step 2/(2^k-1))
are scaled by 2^k - 1, which lands them exactly on odd integers; each hidden
layer gets an integer firing threshold of 2^k - 1 so that one output spike
corresponds to one accumulated grid-full of input, and the simulation window
is 2^k - 1 timesteps so the spike-count range matches the activation grid.

Two deliberate departures from the textbook integrate-and-fire cell keep the
spike counts aligned with the quantized ReLU grid:

* neurons fire at potential >= threshold (a strict > would drop the top grid
  level), and firing subtracts the threshold instead of zeroing the potential,
  so residual charge is never discarded;
* each neuron starts the window holding floor((threshold-1)/2) charge, which
  turns the accumulate-and-fire floor division into round-half-away — the same
  rounding the quantizers use.

The output layer never fires: it accumulates signed weighted spike counts over
the window and is decoded back to the preference scale, so preferences can be
negative.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from .nn import IDENTITY, LayerWeights, NetworkSpec, _layer_linear
from .quant import DOREFA, QuantConfig, quantize_activation, quantize_weights, round_half_away

_SNN_FORMAT = "rivc-snn-v1"


@dataclass
class SpikingLayer:
    """Integer spike-count weights and the layer's firing threshold.

    ``threshold`` is None for the final, non-spiking integrator layer.
    """

    weights: np.ndarray  # int64
    threshold: int | None

    @property
    def initial_charge(self) -> int:
        if self.threshold is None:
            return 0
        return (self.threshold - 1) // 2


@dataclass
class SpikingNetwork:
    """Converted network: integer layers, simulation window and encoder config."""

    spec: NetworkSpec
    layers: list[SpikingLayer]
    bits: int
    sigma: float
    window: int

    @property
    def levels(self) -> int:
        return 2**self.bits - 1


def convert(spec: NetworkSpec, weights: LayerWeights, quant: QuantConfig,
            window_multiplier: int = 1) -> SpikingNetwork:
    """Convert full-precision weights into a rate-coded spiking network.

    The weights are quantized first (no noise), then scaled onto the integer
    spike grid.  Requires a bias-free network whose final layer is identity;
    thresholds are exact for sigma == 1 and rounded otherwise.
    """
    if quant.weight_map != DOREFA:
        raise ValueError("only the symmetric (dorefa) weight map converts to integer spike weights")
    if window_multiplier < 1:
        raise ValueError("window_multiplier must be >= 1")
    if weights.has_biases():
        raise ValueError("spiking conversion requires a bias-free network")
    for i, layer in enumerate(spec.layers):
        is_last = i == len(spec.layers) - 1
        if is_last and layer.activation != IDENTITY:
            raise ValueError("final layer must have identity activation")
        if not is_last and layer.activation == IDENTITY:
            raise ValueError("hidden layers must use a relu-family activation")

    n = quant.levels
    layers: list[SpikingLayer] = []
    for i, w in enumerate(weights.weights):
        wq = quantize_weights(w, quant.bits, quant.weight_map)
        w_int = np.rint(wq * n).astype(np.int64)
        if i == len(spec.layers) - 1:
            threshold = None
        elif i == 0:
            threshold = n
        else:
            threshold = max(1, int(round_half_away(n / quant.sigma)))
        layers.append(SpikingLayer(weights=w_int, threshold=threshold))
    return SpikingNetwork(spec=spec, layers=layers, bits=quant.bits,
                          sigma=quant.sigma, window=n * window_multiplier)


def encode_input(observation: np.ndarray, bits: int, window: int | None = None,
                 poisson_rng: np.random.Generator | None = None) -> np.ndarray:
    """Rate-code an observation in [0, 1] into per-node spike trains.

    A node at grid level q emits exactly q spikes, placed front-aligned and
    evenly over the first 2^bits - 1 steps (spike j at step floor(j*N/q)); the
    early placement leaves later steps free to drain synchronized bursts.
    With ``poisson_rng`` the deterministic schedule is replaced by Bernoulli
    draws at rate q/N per step, giving q spikes only in expectation.
    """
    n = 2**bits - 1
    if window is None:
        window = n
    if window < n:
        raise ValueError("window shorter than the encoding span")
    obs = np.clip(np.asarray(observation, dtype=float), 0.0, 1.0)
    levels = round_half_away(n * obs).astype(np.int64)
    trains = np.zeros((window,) + obs.shape, dtype=np.int64)
    if poisson_rng is not None:
        rate = levels.astype(float) / n
        trains[:n] = (poisson_rng.random((n,) + obs.shape) < rate).astype(np.int64)
        return trains
    for t in range(n):
        # node fires at t iff floor((t+1)*q/n) > floor(t*q/n)
        trains[t] = (((t + 1) * levels) // n) - ((t * levels) // n)
    return trains


def simulate(snn: SpikingNetwork, trains: np.ndarray) -> np.ndarray:
    """Run the spiking network over the given input trains.

    ``trains`` has shape (window, *input_shape) or (window, batch, *input_shape).
    Per timestep every hidden neuron adds its weighted incoming spikes to its
    potential and fires (emitting 1, subtracting the threshold) while at or
    above threshold; hidden spike counts saturate at 2^bits - 1 so a longer
    window cannot push a neuron past the top grid level.  Returns the final
    layer's signed accumulated input, shape (out,) or (batch, out).
    """
    trains = np.asarray(trains)
    if trains.shape[0] != snn.window:
        raise ValueError(f"expected {snn.window} timesteps, got {trains.shape[0]}")
    in_shape = snn.spec.input_shape
    batched = trains.shape[1:] != in_shape
    if batched:
        if trains.shape[2:] != in_shape:
            raise ValueError(f"train shape {trains.shape} does not match input {in_shape}")
        batch = trains.shape[1]
    else:
        batch = 1
        trains = trains[:, None]

    hidden = snn.layers[:-1]
    out_layer = snn.layers[-1]
    shapes = snn.spec.layer_output_shapes
    potentials = [np.full((batch,) + shapes[i], float(l.initial_charge))
                  for i, l in enumerate(hidden)]
    counts = [np.zeros((batch,) + shapes[i]) for i in range(len(hidden))]
    acc = np.zeros((batch,) + shapes[-1])
    cap = float(snn.levels)

    w_float = [l.weights.astype(float) for l in snn.layers]
    for t in range(snn.window):
        s = trains[t].astype(float)
        for i, layer in enumerate(hidden):
            potentials[i] += _layer_linear(snn.spec.layers[i], w_float[i], None, s)
            fire = (potentials[i] >= layer.threshold) & (counts[i] < cap)
            s = fire.astype(float)
            potentials[i] -= layer.threshold * s
            counts[i] += s
        acc += _layer_linear(snn.spec.layers[-1], w_float[-1], None, s)

    del out_layer
    result = np.rint(acc).astype(np.int64)
    return result if batched else result[0]


def decode_output(accumulated: np.ndarray, bits: int, sigma: float) -> np.ndarray:
    """Map the output layer's accumulated integer back to the preference scale."""
    n = 2**bits - 1
    return accumulated.astype(float) * sigma / (n * n)


def infer(snn: SpikingNetwork, observation: np.ndarray,
          poisson_rng: np.random.Generator | None = None) -> np.ndarray:
    """Encode, simulate and decode one observation into a preference vector."""
    trains = encode_input(observation, snn.bits, snn.window, poisson_rng)
    return decode_output(simulate(snn, trains), snn.bits, snn.sigma)


def infer_batch(snn: SpikingNetwork, observations: np.ndarray) -> np.ndarray:
    """Vectorized infer over a leading batch axis (deterministic encoder only)."""
    observations = np.asarray(observations, dtype=float)
    enc = [encode_input(o, snn.bits, snn.window) for o in observations]
    trains = np.stack(enc, axis=1)
    return decode_output(simulate(snn, trains), snn.bits, snn.sigma)


def quantized_input(observation: np.ndarray, bits: int) -> np.ndarray:
    """The [0,1]-clamped, grid-snapped view of an observation the encoder sees."""
    return quantize_activation(np.clip(np.asarray(observation, dtype=float), 0.0, 1.0), bits)


# ---------------------------------------------------------------------------
# export format (mirrors the weight checkpoint: shapes + values, exact round trip)


def save_snn(file: str | io.IOBase, snn: SpikingNetwork) -> None:
    arrays: dict[str, np.ndarray] = {
        "format": np.array(_SNN_FORMAT),
        "spec": np.array(snn.spec.to_json()),
        "meta": np.array(json.dumps({
            "bits": snn.bits, "sigma": snn.sigma, "window": snn.window,
        })),
        "thresholds": np.array(
            [-1 if l.threshold is None else l.threshold for l in snn.layers], dtype=np.int64
        ),
    }
    for i, layer in enumerate(snn.layers):
        arrays[f"w{i}"] = layer.weights
    np.savez(file, **arrays)


def load_snn(file: str | io.IOBase) -> SpikingNetwork:
    with np.load(file) as data:
        fmt = str(data["format"])
        if fmt != _SNN_FORMAT:
            raise ValueError(f"unsupported spiking-network format {fmt!r}")
        spec = NetworkSpec.from_json(str(data["spec"]))
        meta = json.loads(str(data["meta"]))
        thresholds = data["thresholds"]
        layers = [
            SpikingLayer(
                weights=data[f"w{i}"].astype(np.int64),
                threshold=None if thresholds[i] < 0 else int(thresholds[i]),
            )
            for i in range(len(spec.layers))
        ]
    return SpikingNetwork(spec=spec, layers=layers, bits=int(meta["bits"]),
                          sigma=float(meta["sigma"]), window=int(meta["window"]))


def snn_bytes(snn: SpikingNetwork) -> bytes:
    buf = io.BytesIO()
    save_snn(buf, snn)
    return buf.getvalue()


def load_snn_bytes(blob: bytes) -> SpikingNetwork:
    return load_snn(io.BytesIO(blob))
