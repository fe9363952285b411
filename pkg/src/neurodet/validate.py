"""Deployment rule checks for SNN network specs."""
from __future__ import annotations

from dataclasses import dataclass

from .network import (
    BRANCH_KINDS, HIDDEN_THRESHOLD, OUTPUT_THRESHOLD, POOLING_KINDS, BatchNorm, Conv2D,
    LIF, MeanOnlyBN, NetworkSpec, RepVGGBlock, SpecError, Unsupported, count_neurons,
)


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    layer: int | None = None
    severity: str = "error"

    def __str__(self):
        where = f"layer {self.layer}: " if self.layer is not None else ""
        return f"[{self.severity}] {self.code}: {where}{self.message}"


def validate_spec(spec: NetworkSpec, input_shape=None, allow_repvgg: bool = True) -> list[Violation]:
    """Return every deployment rule the network breaks; an empty list means deployable.

    ``allow_repvgg=False`` treats un-reparameterised blocks as branching, which is
    what the deployed (post-transform) network must satisfy.
    """
    out: list[Violation] = []
    layers = spec.layers
    if not layers:
        return [Violation("empty", "network has no layers")]

    for i, layer in enumerate(layers):
        if isinstance(layer, Conv2D) and layer.has_bias:
            out.append(Violation("bias", "convolution carries a bias term", i))
        elif isinstance(layer, Unsupported):
            if layer.name in POOLING_KINDS:
                out.append(Violation("pooling", f"{layer.name} layers are not allowed; use strided conv", i))
            elif layer.name in BRANCH_KINDS:
                out.append(Violation("branching", f"{layer.name} introduces a branch", i))
            else:
                out.append(Violation("unknown-layer", f"unsupported layer kind {layer.name!r}", i))
        elif isinstance(layer, RepVGGBlock) and not allow_repvgg:
            out.append(Violation("branching", "RepVGG block must be reparameterised before deployment", i))

    lifs = spec.lif_indices()
    if not lifs or lifs[-1] != len(layers) - 1:
        out.append(Violation("output-layer", "network must end with a LIF population"))
    for n, i in enumerate(lifs):
        lif: LIF = layers[i]
        final = n == len(lifs) - 1
        if lif.reset != "hard":
            out.append(Violation("reset", f"LIF reset must be hard, got {lif.reset!r}", i))
        if final:
            if lif.spiking:
                out.append(Violation("output-spiking", "output LIF must be non-spiking", i))
            if lif.v_th != OUTPUT_THRESHOLD:
                out.append(Violation("output-threshold",
                                     f"output LIF threshold {lif.v_th} != {OUTPUT_THRESHOLD:g}", i))
        else:
            if not lif.spiking:
                out.append(Violation("hidden-non-spiking", "only the final LIF may be non-spiking", i))
            if lif.v_th != HIDDEN_THRESHOLD:
                sev = "warning"
                msg = f"hidden LIF threshold {lif.v_th} != {HIDDEN_THRESHOLD:g}"
                if lif.v_th >= OUTPUT_THRESHOLD:
                    msg += " (output-layer threshold on a spiking layer)"
                out.append(Violation("threshold-mismatch", msg, i, sev))
        prev = i - 1
        while prev >= 0 and isinstance(layers[prev], (BatchNorm, MeanOnlyBN)):
            prev -= 1
        if prev < 0 or not isinstance(layers[prev], (Conv2D, RepVGGBlock)):
            out.append(Violation("structure", "LIF must follow a convolution (optionally normalised)", i))

    try:
        n = count_neurons(spec, input_shape)
    except SpecError as exc:
        out.append(Violation("shape", str(exc)))
    else:
        if n >= spec.neuron_budget:
            out.append(Violation("neuron-budget",
                                 f"neuron budget exceeded: {n:,} >= {spec.neuron_budget:,}"))
    return out


def errors(violations) -> list[Violation]:
    return [v for v in violations if v.severity == "error"]
