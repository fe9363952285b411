"""Deployment transforms: RepVGG fusion, BN absorption, mean clamping, weight quantisation.

Order used by :func:`deploy`: reparameterise, absorb, clamp, quantise.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .network import LIF, BatchNorm, Conv2D, MeanOnlyBN, NetworkSpec, RepVGGBlock, SpecError
from .kernels import conv2d
from .runtime import RunConfig, Simulator, apply_layer

MEAN_CLAMP = (-0.98, 1.1)


@dataclass(frozen=True)
class QuantParams:
    bits: int = 8
    scheme: str = "symmetric-per-tensor"

    def __post_init__(self):
        if not 2 <= self.bits <= 32:
            raise ValueError(f"bit width must be in [2, 32], got {self.bits}")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1


def _fold(kernel: np.ndarray, bn: BatchNorm):
    """Fold BN into a kernel: returns the scaled kernel and the resulting bias."""
    t = np.asarray(bn.gamma, dtype=np.float64) / bn.std()
    return kernel * t[:, None, None, None], np.asarray(bn.beta) - np.asarray(bn.mean) * t


def reparam_repvgg(block: RepVGGBlock) -> tuple[Conv2D, MeanOnlyBN]:
    """Collapse all branches into one bias-free 3×3 conv plus a mean-only BN.

    The summed folding bias ``b`` is carried as mean ``-b``.
    """
    o, i = block.out_ch, block.in_ch
    if block.conv3 is None or block.conv3.shape != (o, i, 3, 3):
        raise SpecError("3×3 branch missing or mis-shaped")
    kernel, bias = _fold(block.conv3, block.bn3)
    if block.use_1x1:
        if block.conv1 is None or block.conv1.shape != (o, i, 1, 1):
            raise SpecError("1×1 branch missing or mis-shaped")
        k1, b1 = _fold(np.pad(block.conv1, ((0, 0), (0, 0), (1, 1), (1, 1))), block.bn1)
        kernel, bias = kernel + k1, bias + b1
    if block.use_identity:
        if o != i or block.stride != 1:
            raise SpecError("identity branch needs matching channels and stride 1")
        dirac = np.zeros((o, i, 3, 3))
        dirac[np.arange(o), np.arange(o), 1, 1] = 1.0
        kd, bd = _fold(dirac, block.bn_id)
        kernel, bias = kernel + kd, bias + bd
    return Conv2D(i, o, 3, block.stride, 1, weight=kernel), MeanOnlyBN(o, -bias)


def absorb_bn(conv: Conv2D, bn: BatchNorm) -> tuple[Conv2D, MeanOnlyBN]:
    """Move the BN scale into the conv weights, keep a per-channel mean."""
    if bn.channels != conv.out_ch:
        raise SpecError(f"BN has {bn.channels} channels, conv outputs {conv.out_ch}")
    if conv.scale is not None:
        raise SpecError("absorb BN before quantising")
    t = np.asarray(bn.gamma, dtype=np.float64) / bn.std()
    w = np.asarray(conv.weight, dtype=np.float64) * t[:, None, None, None]
    mean = np.asarray(bn.mean) * t - np.asarray(bn.beta)
    return replace(conv, weight=w), MeanOnlyBN(bn.channels, mean)


def _merge_mean(layers: list, mean: np.ndarray):
    """Append a mean-only BN, merging with one that is already last."""
    if layers and isinstance(layers[-1], MeanOnlyBN):
        layers[-1] = MeanOnlyBN(layers[-1].channels, layers[-1].mean + mean)
    else:
        layers.append(MeanOnlyBN(len(mean), mean))


def reparameterize(net: NetworkSpec) -> NetworkSpec:
    layers = []
    for layer in net.layers:
        if isinstance(layer, RepVGGBlock):
            conv, mbn = reparam_repvgg(layer)
            layers += [conv, mbn]
        else:
            layers.append(layer)
    return net.with_layers(layers)


def absorb(net: NetworkSpec) -> NetworkSpec:
    """Absorb every BatchNorm into the conv (or mean-only BN chain) before it."""
    layers = []
    for layer in net.layers:
        if not isinstance(layer, BatchNorm):
            layers.append(layer)
            continue
        j = len(layers) - 1
        extra_mean = None
        if j >= 0 and isinstance(layers[j], MeanOnlyBN):
            extra_mean = layers[j].mean
            j -= 1
        if j < 0 or not isinstance(layers[j], Conv2D):
            raise SpecError("BatchNorm must directly follow a convolution to be absorbed")
        conv, mbn = absorb_bn(layers[j], layer)
        t = np.asarray(layer.gamma, dtype=np.float64) / layer.std()
        del layers[j:]
        layers.append(conv)
        mean = mbn.mean if extra_mean is None else mbn.mean + extra_mean * t
        _merge_mean(layers, mean)
    return net.with_layers(layers)


def clamp_means(mean, lo: float = MEAN_CLAMP[0], hi: float = MEAN_CLAMP[1]) -> np.ndarray:
    return np.minimum(np.maximum(np.asarray(mean, dtype=np.float64), lo), hi)


def clamp_bn_means(net: NetworkSpec, lo: float = MEAN_CLAMP[0], hi: float = MEAN_CLAMP[1]) -> NetworkSpec:
    return net.with_layers(
        MeanOnlyBN(l.channels, clamp_means(l.mean, lo, hi)) if isinstance(l, MeanOnlyBN) else l
        for l in net.layers
    )


def quantize_tensor(w: np.ndarray, qp: QuantParams = QuantParams()) -> tuple[np.ndarray, float]:
    """Symmetric per-tensor quantisation; an all-zero tensor gets scale 1."""
    w = np.asarray(w, dtype=np.float64)
    peak = float(np.abs(w).max(initial=0.0))
    scale = peak / qp.qmax if peak > 0 else 1.0
    q = np.clip(np.round(w / scale), -qp.qmax, qp.qmax)
    dtype = np.int8 if qp.bits <= 8 else np.int16 if qp.bits <= 16 else np.int32
    return q.astype(dtype), scale


def dequantize(q: np.ndarray, scale: float) -> np.ndarray:
    return q.astype(np.float64) * scale


def quantize_weights(net: NetworkSpec, qp: QuantParams = QuantParams()) -> NetworkSpec:
    layers = []
    for layer in net.layers:
        if isinstance(layer, Conv2D):
            if layer.scale is not None:
                raise SpecError("network is already quantised")
            q, scale = quantize_tensor(layer.weight, qp)
            layer = replace(layer, weight=q, scale=scale, bits=qp.bits)
        elif isinstance(layer, RepVGGBlock):
            raise SpecError("reparameterise RepVGG blocks before quantising")
        layers.append(layer)
    return net.with_layers(layers)


def deploy(net: NetworkSpec, reparam=True, absorb_norm=True, clamp=True, quant: QuantParams | None = QuantParams()):
    if reparam:
        net = reparameterize(net)
    if absorb_norm:
        net = absorb(net)
    if clamp:
        net = clamp_bn_means(net)
    if quant is not None:
        net = quantize_weights(net, quant)
    return net


# -- equivalence reporting ----------------------------------------------------

def stage_equivalence(before: NetworkSpec, after: NetworkSpec, seed: int = 0) -> list[dict]:
    """Per-stage max |difference| of LIF input currents on random probes.

    Each conv stage is probed independently with a random tensor of its input
    shape so differences do not compound through spike thresholds.
    """
    rng = np.random.default_rng(seed)

    def stages(net):
        out, cur = [], []
        for layer in net.layers:
            if isinstance(layer, LIF):
                out.append(cur)
                cur = []
            else:
                cur.append(layer)
        return out

    sb, sa = stages(before), stages(after)
    if len(sb) != len(sa):
        raise SpecError("networks have different stage counts")
    shapes_in = [tuple(before.input_shape)] + [before.shapes()[i] for i in before.lif_indices()[:-1]]
    report = []
    for k, (lb, la, shp) in enumerate(zip(sb, sa, shapes_in)):
        x = rng.random(shp) if k == 0 else (rng.random(shp) < 0.3).astype(np.float64)
        yb, ya = x, x
        for l in lb:
            yb = apply_layer(yb, l)
        for l in la:
            ya = apply_layer(ya, l)
        err = float(np.abs(yb - ya).max())
        ref = float(np.abs(yb).max()) or 1.0
        report.append({"stage": k, "max_abs_error": err, "max_rel_error": err / ref})
    return report


def _stages(net: NetworkSpec) -> dict[int, list]:
    """LIF index -> the non-LIF layers feeding it since the previous LIF."""
    out, cur = {}, []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, LIF):
            out[i], cur = cur, []
        else:
            cur.append(layer)
    return out


def _quant_bound(x: np.ndarray, layers: list) -> np.ndarray | None:
    """Elementwise bound on the current error of a single quantised conv: conv(|x|, 1)·scale/2."""
    convs = [l for l in layers if isinstance(l, Conv2D)]
    if len(convs) != 1 or convs[0].scale is None or not isinstance(layers[0], Conv2D):
        return None
    c = convs[0]
    return conv2d(np.abs(x), np.ones(c.weight_shape()), c.stride, c.padding) * (c.scale / 2)


def inference_divergence(real: NetworkSpec, quant: NetworkSpec, inputs, cfg=None) -> dict:
    """Compare a real-valued network with its quantised copy on the same inputs.

    Reports the end-to-end output divergence, the fraction of spikes that
    differ, and per-stage current errors measured on the real network's own
    layer inputs, each checked against the worst-case rounding bound.
    """
    cfg = cfg or RunConfig()
    sr, sq = Simulator(real, cfg), Simulator(quant, cfg)
    st_r, st_q = _stages(real), _stages(quant)
    if set(st_r) != set(st_q):
        raise SpecError("networks have different LIF layouts")
    stage_err = {i: 0.0 for i in st_r}
    worst_ratio, bound_ok = 0.0, True
    spikes_r, spikes_q = [], []
    out_abs, out_ref = 0.0, 0.0

    def watch_real(i, src, spikes):
        nonlocal worst_ratio, bound_ok
        spikes_r.append(spikes)
        a, b = src, src
        for l in st_r[i]:
            a = apply_layer(a, l)
        for l in st_q[i]:
            b = apply_layer(b, l)
        diff = np.abs(a - b)
        stage_err[i] = max(stage_err[i], float(diff.max(initial=0.0)))
        bound = _quant_bound(src, st_q[i])
        if bound is not None:
            bound_ok &= bool(np.all(diff <= bound + 1e-9 * (1 + np.abs(a))))
            nz = bound > 0
            if nz.any():
                worst_ratio = max(worst_ratio, float((diff[nz] / bound[nz]).max()))

    for x in inputs:
        a = sr.run_period(x, observer=watch_real)
        b = sq.run_period(x, observer=lambda i, s, k: spikes_q.append(k))
        out_abs = max(out_abs, float(np.abs(a - b).max()))
        out_ref = max(out_ref, float(np.abs(a).max()))
    flips = sum(int(np.count_nonzero(p != q)) for p, q in zip(spikes_r, spikes_q))
    total_r = sum(int(p.sum()) for p in spikes_r)
    return {
        "output_max_abs": out_abs,
        "output_rel": out_abs / out_ref if out_ref else (0.0 if out_abs == 0 else float("inf")),
        "spike_flips": flips,
        "spike_flip_fraction": flips / max(total_r, 1),
        "stage_max_abs": {str(i): e for i, e in stage_err.items()},
        "stage_bound_ok": bound_ok,
        "stage_worst_bound_ratio": worst_ratio,
    }
