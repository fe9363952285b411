"""Timestepped LIF execution of a layer chain.

Each inference presents the same input tensor for ``T`` steps, reads the
membranes of the non-spiking output layer after step ``T`` and spends one more
step on the reset, so a period is ``T + 1 = reset_interval`` steps long.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .kernels import apply_bn, apply_mean_only_bn, conv2d
from .network import (
    HIDDEN_THRESHOLD, OUTPUT_THRESHOLD, BatchNorm, Conv2D, LIF, MeanOnlyBN, NetworkSpec,
    RepVGGBlock, SpecError,
)
from .validate import errors, validate_spec


@dataclass(frozen=True)
class RunConfig:
    T: int = 7
    reset_interval: int = 8
    v_th_hidden: float = HIDDEN_THRESHOLD
    v_th_out: float = OUTPUT_THRESHOLD
    # overrides every layer's own leak constant when set
    tau: float | None = None
    readout_offset_enabled: bool = False

    def __post_init__(self):
        ri = self.reset_interval
        if ri < 2 or ri & (ri - 1):
            raise ValueError(f"reset interval must be a power of two >= 2, got {ri}")
        if not 1 <= self.T < ri:
            raise ValueError(f"T must be in [1, reset_interval - 1], got {self.T}")


@dataclass
class NeuronState:
    v: dict[int, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def reset(self):
        for arr in self.v.values():
            arr.fill(0.0)
        self.step = 0


@dataclass
class RawHeadOutput:
    data: np.ndarray
    # global simulation step at which the output is read
    readout_step: int = 0


def lif_step(v: np.ndarray, current: np.ndarray, v_th: float, tau: float, spiking: bool = True):
    """One LIF update; returns ``(spikes, v_new)``.

    Spiking layers leak toward the input, ``v + (x - v) / tau``, then fire and
    hard-reset to zero at ``v >= v_th``. Non-spiking layers are pure
    integrators (``v + x``) and never fire.
    """
    if not spiking:
        return np.zeros(v.shape, dtype=np.int8), v + current
    v_pre = v + (current - v) / tau
    spikes = v_pre >= v_th
    return spikes.astype(np.int8), np.where(spikes, 0.0, v_pre)


def repvgg_forward(x: np.ndarray, block: RepVGGBlock) -> np.ndarray:
    def bn(y, b: BatchNorm):
        return apply_bn(y, b.mean, b.var, b.gamma, b.beta, b.eps)

    out = bn(conv2d(x, block.conv3, block.stride, 1), block.bn3)
    if block.use_1x1:
        out = out + bn(conv2d(x, block.conv1, block.stride, 0), block.bn1)
    if block.use_identity:
        out = out + bn(x, block.bn_id)
    return out


def apply_layer(x: np.ndarray, layer) -> np.ndarray:
    """Stateless part of a layer (everything except LIF)."""
    if isinstance(layer, Conv2D):
        return conv2d(x, layer.weight, layer.stride, layer.padding, layer.scale)
    if isinstance(layer, BatchNorm):
        return apply_bn(x, layer.mean, layer.var, layer.gamma, layer.beta, layer.eps)
    if isinstance(layer, MeanOnlyBN):
        # stored mean acts as a subtractive bias on the LIF input current
        return apply_mean_only_bn(x, layer.mean)
    if isinstance(layer, RepVGGBlock):
        return repvgg_forward(x, layer)
    raise SpecError(f"cannot execute layer kind {layer.kind!r}")


class Simulator:
    """Runs one network; holds no per-inference state between calls."""

    def __init__(self, net: NetworkSpec, cfg: RunConfig = RunConfig(), check: bool = True):
        if check:
            bad = errors(validate_spec(net))
            if bad:
                raise SpecError("invalid network: " + "; ".join(str(v) for v in bad))
        self.net = net
        self.cfg = cfg
        self.lifs = net.lif_indices()
        if not self.lifs or self.lifs[-1] != len(net.layers) - 1:
            raise SpecError("network must end with a LIF population")
        self.shapes = net.shapes()
        # layers before the first LIF see a constant input: evaluate them once
        self._prefix = self.lifs[0]

    def _tau(self, lif: LIF) -> float:
        return self.cfg.tau if self.cfg.tau is not None else lif.tau

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if tuple(x.shape) != tuple(self.net.input_shape):
            raise ValueError(f"input shape {x.shape} does not match compiled {self.net.input_shape}")
        return x

    def new_state(self) -> NeuronState:
        return NeuronState({i: np.zeros(self.shapes[i]) for i in self.lifs})

    def run_period(self, x: np.ndarray, state: NeuronState | None = None, observer=None) -> np.ndarray:
        """Present ``x`` for T steps, return output membranes, then reset.

        ``observer(layer_index, layer_input, spikes)`` is called for every LIF
        layer at every step.
        """
        x = self._check_input(x)
        state = state or self.new_state()
        layers = self.net.layers
        head = x
        for layer in layers[: self._prefix]:
            head = apply_layer(head, layer)
        for _ in range(self.cfg.T):
            cur = head
            src = x
            for i in range(self._prefix, len(layers)):
                layer = layers[i]
                if isinstance(layer, LIF):
                    spikes, state.v[i] = lif_step(state.v[i], cur, layer.v_th, self._tau(layer), layer.spiking)
                    if observer is not None:
                        observer(i, src, spikes)
                    cur = src = spikes
                else:
                    cur = apply_layer(cur, layer)
            state.step += 1
        out = state.v[self.lifs[-1]].copy()
        # housekeeping step: reset only
        state.reset()
        return out

    def infer(self, x: np.ndarray) -> RawHeadOutput:
        return RawHeadOutput(self.run_period(x), readout_step=self.cfg.T)

    def infer_stream(self, inputs: Sequence[np.ndarray]) -> list[RawHeadOutput]:
        """Back-to-back inferences, one reset period per sample.

        With ``readout_offset_enabled`` the readout step models the pipelined
        hardware schedule (``k * reset_interval + N_layer + 2``); values are the
        same as per-sample :meth:`infer`.
        """
        state = self.new_state()
        ri = self.cfg.reset_interval
        out = []
        for k, x in enumerate(inputs):
            data = self.run_period(x, state)
            if self.cfg.readout_offset_enabled:
                step = readout_step(k, self.net.n_layer, ri)
            else:
                step = k * ri + self.cfg.T
            out.append(RawHeadOutput(data, step))
        return out


def readout_step(k: int, n_layer: int, reset_interval: int = 8) -> int:
    return k * reset_interval + n_layer + 2


def infer(net: NetworkSpec, x: np.ndarray, cfg: RunConfig = RunConfig()) -> RawHeadOutput:
    return Simulator(net, cfg).infer(x)


def infer_stream(net: NetworkSpec, inputs, cfg: RunConfig = RunConfig()) -> list[RawHeadOutput]:
    return Simulator(net, cfg).infer_stream(inputs)


# -- spike traces -------------------------------------------------------------

def _fanout_map(in_hw, out_hw, kernel: int, stride: int, padding: int) -> np.ndarray:
    """Number of (output position, kernel tap) pairs reading each input pixel."""
    def axis(n_in, n_out):
        cnt = np.zeros(n_in, dtype=np.int64)
        for o in range(n_out):
            for k in range(kernel):
                i = o * stride - padding + k
                if 0 <= i < n_in:
                    cnt[i] += 1
        return cnt

    return np.outer(axis(in_hw[0], out_hw[0]), axis(in_hw[1], out_hw[1]))


@dataclass
class LayerTrace:
    index: int
    shape: tuple
    spiking: bool
    counts: np.ndarray  # S_i per neuron, summed over steps and samples


@dataclass
class ConvTrace:
    index: int
    # fan-out (synapses) of every source neuron, source-shaped
    fanout: np.ndarray
    # source neurons that were non-zero at least once
    active_sources: np.ndarray

    @property
    def total_synapses(self) -> int:
        return int(self.fanout.sum())

    @property
    def active_synapses(self) -> int:
        return int(self.fanout[self.active_sources].sum())


@dataclass
class SpikeTrace:
    layers: list[LayerTrace]
    convs: list[ConvTrace]
    samples: int
    T: int

    def spiking_layers(self) -> list[LayerTrace]:
        return [l for l in self.layers if l.spiking]

    @property
    def n_spiking_neurons(self) -> int:
        return sum(int(l.counts.size) for l in self.spiking_layers())

    @property
    def total_spikes(self) -> int:
        return sum(int(l.counts.sum()) for l in self.spiking_layers())

    @property
    def active_synapses(self) -> int:
        return sum(c.active_synapses for c in self.convs)

    @property
    def total_synapses(self) -> int:
        return sum(c.total_synapses for c in self.convs)

    def fanout_weighted_spikes(self) -> float:
        """Spikes times the fan-out of the emitting neuron, summed (auxiliary, not the SOP count)."""
        by_source = {}
        for c in self.convs:
            by_source[c.index] = c.fanout
        total = 0
        for l in self.spiking_layers():
            fo = by_source.get(l.index)
            if fo is not None:
                total += int((l.counts * fo).sum())
        return float(total)

    def summary(self) -> dict:
        return {
            "samples": self.samples,
            "T": self.T,
            "layers": [
                {"index": l.index, "shape": list(l.shape), "spiking": l.spiking,
                 "neurons": int(l.counts.size), "spikes": int(l.counts.sum()),
                 "max_per_neuron": int(l.counts.max(initial=0)),
                 "mean_per_neuron_per_sample": float(l.counts.sum() / max(l.counts.size, 1) / self.samples)}
                for l in self.layers
            ],
            "convs": [
                {"index": c.index, "source": c.index, "total_synapses": c.total_synapses,
                 "active_synapses": c.active_synapses}
                for c in self.convs
            ],
            "total_spikes": self.total_spikes,
            "n_spiking_neurons": self.n_spiking_neurons,
            "active_synapses": self.active_synapses,
            "total_synapses": self.total_synapses,
            "fanout_weighted_spikes": self.fanout_weighted_spikes(),
        }

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def record_trace(net: NetworkSpec, inputs: Sequence[np.ndarray], cfg: RunConfig = RunConfig()) -> SpikeTrace:
    """Run every input and count spikes per neuron and active conv synapses.

    A synapse counts as active when its source (an input pixel for the first
    convolution, otherwise a LIF neuron) was non-zero at least once. Convs are
    keyed by the index of the LIF layer that feeds them (``-1`` for the input).
    """
    sim = Simulator(net, cfg)
    layers = net.layers
    shapes = sim.shapes
    counts = {i: np.zeros(shapes[i], dtype=np.int64) for i in sim.lifs}

    # conv layer -> index of its source LIF (or -1) and source shape
    conv_src = {}
    src, src_shape = -1, tuple(net.input_shape)
    for i, layer in enumerate(layers):
        if isinstance(layer, (Conv2D, RepVGGBlock)):
            conv_src[i] = (src, src_shape)
        if isinstance(layer, LIF):
            src, src_shape = i, shapes[i]

    convs = {}
    for i, (s, sshape) in conv_src.items():
        layer = layers[i]
        kernels = [(3, layer.stride, 1)] + ([(1, layer.stride, 0)] if getattr(layer, "use_1x1", False) else []) \
            if isinstance(layer, RepVGGBlock) else [(layer.kernel, layer.stride, layer.padding)]
        fo = sum(_fanout_map(sshape[1:], shapes[i][1:], k, st, p) for k, st, p in kernels)
        fo = np.broadcast_to(fo * shapes[i][0], sshape).copy()
        if isinstance(layer, RepVGGBlock) and layer.use_identity:
            fo += 1
        convs[s] = ConvTrace(s, fo, np.zeros(sshape, dtype=bool))

    def observe(i, layer_input, spikes):
        counts[i] += spikes
        if i in convs:
            convs[i].active_sources |= spikes.astype(bool)

    n = 0
    for x in inputs:
        x = sim._check_input(x)
        if -1 in convs:
            convs[-1].active_sources |= x != 0
        sim.run_period(x, observer=observe)
        n += 1
    traces = [LayerTrace(i, shapes[i], layers[i].spiking, counts[i]) for i in sim.lifs]
    return SpikeTrace(traces, [convs[k] for k in sorted(convs)], n, cfg.T)
