"""Layer and network specifications with their JSON and SNNW file formats.

A network is a single chain of layers. Numeric parameters live on the layer
objects; the JSON file holds structure and hyperparameters, the SNNW file holds
every tensor in layer order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Union

import numpy as np

from .kernels import conv_output_size

NEURON_BUDGET = 1_000_000
OUTPUT_THRESHOLD = 2048.0
HIDDEN_THRESHOLD = 1.0
DEFAULT_TAU = 2.0
DEFAULT_EPS = 1e-5


class SpecError(ValueError):
    pass


@dataclass
class Conv2D:
    in_ch: int
    out_ch: int
    kernel: int = 3
    stride: int = 1
    padding: int | None = None
    has_bias: bool = False
    weight: np.ndarray | None = None
    # set when ``weight`` holds integer codes
    scale: float | None = None
    bits: int | None = None

    kind = "conv2d"

    def __post_init__(self):
        if self.padding is None:
            self.padding = self.kernel // 2

    def weight_shape(self):
        return (self.out_ch, self.in_ch, self.kernel, self.kernel)

    def real_weight(self) -> np.ndarray:
        w = np.asarray(self.weight, dtype=np.float64)
        return w * self.scale if self.scale is not None else w


@dataclass
class BatchNorm:
    channels: int
    eps: float = DEFAULT_EPS
    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None

    kind = "batchnorm"

    @classmethod
    def identity(cls, channels: int, eps: float = 0.0) -> "BatchNorm":
        return cls(channels, eps, np.zeros(channels), np.ones(channels),
                   np.ones(channels), np.zeros(channels))

    def std(self) -> np.ndarray:
        d = np.asarray(self.var, dtype=np.float64) + self.eps
        if np.any(d <= 0):
            raise ValueError("batch-norm variance + eps must be positive")
        return np.sqrt(d)


@dataclass
class MeanOnlyBN:
    channels: int
    mean: np.ndarray | None = None

    kind = "meanbn"


@dataclass
class LIF:
    v_th: float = HIDDEN_THRESHOLD
    tau: float = DEFAULT_TAU
    spiking: bool = True
    reset: str = "hard"

    kind = "lif"


@dataclass
class RepVGGBlock:
    """Training-time block: 3×3 conv + optional 1×1 conv + optional identity, each with BN."""

    in_ch: int
    out_ch: int
    stride: int = 1
    conv3: np.ndarray | None = None
    bn3: BatchNorm | None = None
    conv1: np.ndarray | None = None
    bn1: BatchNorm | None = None
    bn_id: BatchNorm | None = None
    use_1x1: bool = True
    use_identity: bool = True

    kind = "repvgg"

    def __post_init__(self):
        if self.use_identity and (self.in_ch != self.out_ch or self.stride != 1):
            raise SpecError("identity branch needs in_ch == out_ch and stride 1")


@dataclass
class Unsupported:
    """Placeholder for layer kinds the target hardware cannot run (pooling, routes...)."""

    name: str
    params: dict = field(default_factory=dict)

    kind = "unsupported"


Layer = Union[Conv2D, BatchNorm, MeanOnlyBN, LIF, RepVGGBlock, Unsupported]

POOLING_KINDS = {"maxpool", "avgpool", "pool"}
BRANCH_KINDS = {"route", "concat", "add", "residual", "upsample", "split", "shortcut"}


@dataclass
class HeadSpec:
    n_cls: int
    reg_max: int = 5

    @property
    def channels(self) -> int:
        return self.n_cls + 4 * self.reg_max


@dataclass
class NetworkSpec:
    input_shape: tuple[int, int, int]
    layers: list[Layer]
    name: str = "network"
    head: HeadSpec | None = None
    neuron_budget: int = NEURON_BUDGET

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)

    def with_layers(self, layers) -> "NetworkSpec":
        return replace(self, layers=list(layers))

    def with_input(self, shape) -> "NetworkSpec":
        return replace(self, input_shape=tuple(shape))

    def lif_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, LIF)]

    @property
    def n_layer(self) -> int:
        """Deployed layer count: one per LIF population."""
        return len(self.lif_indices())

    def shapes(self, input_shape=None) -> list[tuple[int, int, int]]:
        """Output shape of every layer."""
        c, h, w = input_shape or self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2D):
                if layer.in_ch != c:
                    raise SpecError(f"layer {i}: conv expects {layer.in_ch} channels, gets {c}")
                c = layer.out_ch
                h = conv_output_size(h, layer.kernel, layer.stride, layer.padding)
                w = conv_output_size(w, layer.kernel, layer.stride, layer.padding)
            elif isinstance(layer, RepVGGBlock):
                if layer.in_ch != c:
                    raise SpecError(f"layer {i}: block expects {layer.in_ch} channels, gets {c}")
                c = layer.out_ch
                h = conv_output_size(h, 3, layer.stride, 1)
                w = conv_output_size(w, 3, layer.stride, 1)
            elif isinstance(layer, (BatchNorm, MeanOnlyBN)):
                if layer.channels != c:
                    raise SpecError(f"layer {i}: norm has {layer.channels} channels, gets {c}")
            if h < 1 or w < 1:
                raise SpecError(f"layer {i}: spatial size collapsed to {h}×{w}")
            out.append((c, h, w))
        return out

    def output_shape(self, input_shape=None):
        shapes = self.shapes(input_shape)
        return shapes[-1] if shapes else tuple(input_shape or self.input_shape)

    def stride(self) -> int:
        _, h, _ = self.input_shape
        return h // self.output_shape()[1]


def count_neurons(spec: NetworkSpec, input_shape=None) -> int:
    shapes = spec.shapes(input_shape)
    return sum(int(np.prod(shapes[i])) for i in spec.lif_indices())


def _bn_params(bn: BatchNorm | None) -> int:
    return 0 if bn is None else 2 * bn.channels


def count_params(spec: NetworkSpec) -> int:
    """Weight elements plus learnable normalisation parameters."""
    n = 0
    for layer in spec.layers:
        if isinstance(layer, Conv2D):
            n += int(np.prod(layer.weight_shape()))
        elif isinstance(layer, BatchNorm):
            n += _bn_params(layer)
        elif isinstance(layer, MeanOnlyBN):
            n += layer.channels
        elif isinstance(layer, RepVGGBlock):
            n += layer.out_ch * layer.in_ch * 9 + _bn_params(layer.bn3)
            if layer.use_1x1:
                n += layer.out_ch * layer.in_ch + _bn_params(layer.bn1)
            if layer.use_identity:
                n += _bn_params(layer.bn_id)
    return n


# -- initialisation -----------------------------------------------------------

def _kaiming(rng, shape):
    fan_in = shape[1] * shape[2] * shape[3]
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _random_bn(rng, c, eps=DEFAULT_EPS, random_stats=False) -> BatchNorm:
    if not random_stats:
        return BatchNorm(c, eps, np.zeros(c), np.ones(c), np.ones(c), np.zeros(c))
    return BatchNorm(c, eps, rng.normal(0, 0.2, c), rng.uniform(0.5, 2.0, c),
                     rng.uniform(0.5, 1.5, c), rng.normal(0, 0.2, c))


def init_weights(spec: NetworkSpec, seed: int = 0, random_stats: bool = False) -> NetworkSpec:
    """Fill every tensor slot with Kaiming-normal weights and BN parameters."""
    rng = np.random.default_rng(seed)
    layers = []
    for layer in spec.layers:
        if isinstance(layer, Conv2D):
            layer = replace(layer, weight=_kaiming(rng, layer.weight_shape()), scale=None, bits=None)
        elif isinstance(layer, BatchNorm):
            layer = _random_bn(rng, layer.channels, layer.eps, random_stats)
        elif isinstance(layer, MeanOnlyBN):
            layer = replace(layer, mean=rng.normal(0, 0.2, layer.channels) if random_stats
                            else np.zeros(layer.channels))
        elif isinstance(layer, RepVGGBlock):
            o, i = layer.out_ch, layer.in_ch
            layer = replace(
                layer,
                conv3=_kaiming(rng, (o, i, 3, 3)), bn3=_random_bn(rng, o, random_stats=random_stats),
                conv1=_kaiming(rng, (o, i, 1, 1)) if layer.use_1x1 else None,
                bn1=_random_bn(rng, o, random_stats=random_stats) if layer.use_1x1 else None,
                bn_id=_random_bn(rng, o, random_stats=random_stats) if layer.use_identity else None,
            )
        layers.append(layer)
    return spec.with_layers(layers)


# -- JSON ---------------------------------------------------------------------

def _layer_to_dict(layer) -> dict:
    if isinstance(layer, Conv2D):
        d = {"kind": "conv2d", "in_ch": layer.in_ch, "out_ch": layer.out_ch,
             "kernel": layer.kernel, "stride": layer.stride, "padding": layer.padding}
        if layer.has_bias:
            d["bias"] = True
        return d
    if isinstance(layer, BatchNorm):
        return {"kind": "batchnorm", "channels": layer.channels, "eps": layer.eps}
    if isinstance(layer, MeanOnlyBN):
        return {"kind": "meanbn", "channels": layer.channels}
    if isinstance(layer, LIF):
        return {"kind": "lif", "v_th": layer.v_th, "tau": layer.tau,
                "spiking": layer.spiking, "reset": layer.reset}
    if isinstance(layer, RepVGGBlock):
        branches = ["3x3"] + (["1x1"] if layer.use_1x1 else []) + (["identity"] if layer.use_identity else [])
        return {"kind": "repvgg", "in_ch": layer.in_ch, "out_ch": layer.out_ch,
                "stride": layer.stride, "branches": branches}
    return {"kind": layer.name, **layer.params}


def _layer_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind is None:
        raise SpecError(f"layer without 'kind': {d}")
    kind = kind.lower()
    try:
        if kind == "conv2d":
            return Conv2D(d["in_ch"], d["out_ch"], d.get("kernel", 3), d.get("stride", 1),
                          d.get("padding"), bool(d.get("bias", False)))
        if kind == "batchnorm":
            return BatchNorm(d["channels"], d.get("eps", DEFAULT_EPS))
        if kind == "meanbn":
            return MeanOnlyBN(d["channels"])
        if kind == "lif":
            return LIF(float(d.get("v_th", HIDDEN_THRESHOLD)), float(d.get("tau", DEFAULT_TAU)),
                       bool(d.get("spiking", True)), d.get("reset", "hard"))
        if kind == "repvgg":
            br = d.get("branches", ["3x3", "1x1", "identity"])
            return RepVGGBlock(d["in_ch"], d["out_ch"], d.get("stride", 1),
                               use_1x1="1x1" in br, use_identity="identity" in br)
    except KeyError as exc:
        raise SpecError(f"{kind} layer missing field {exc}") from None
    return Unsupported(kind, d)


def spec_to_dict(spec: NetworkSpec) -> dict:
    d = {"name": spec.name, "input_shape": list(spec.input_shape),
         "layers": [_layer_to_dict(l) for l in spec.layers]}
    if spec.head is not None:
        d["head"] = {"n_cls": spec.head.n_cls, "reg_max": spec.head.reg_max}
    if spec.neuron_budget != NEURON_BUDGET:
        d["neuron_budget"] = spec.neuron_budget
    return d


def spec_from_dict(d: dict) -> NetworkSpec:
    try:
        shape = d["input_shape"]
        layers = [_layer_from_dict(l) for l in d["layers"]]
    except KeyError as exc:
        raise SpecError(f"network spec missing field {exc}") from None
    head = d.get("head")
    return NetworkSpec(shape, layers, d.get("name", "network"),
                       HeadSpec(head["n_cls"], head.get("reg_max", 5)) if head else None,
                       d.get("neuron_budget", NEURON_BUDGET))


def load_spec(path) -> NetworkSpec:
    with open(path) as fh:
        return spec_from_dict(json.load(fh))


def save_spec(spec: NetworkSpec, path) -> None:
    Path(path).write_text(json.dumps(spec_to_dict(spec), indent=2) + "\n")


def reference_config(name: str) -> NetworkSpec:
    """Shipped backbone configs: ``model1``, ``model2`` or ``model3``."""
    path = Path(__file__).parent / "configs" / f"{name.replace('-', '')}.json"
    if not path.exists():
        raise SpecError(f"no reference config named {name!r}")
    return load_spec(path)


REFERENCE_MODELS = ("model1", "model2", "model3")


# -- SNNW weight files --------------------------------------------------------

SNNW_MAGIC = b"SNNW"
SNNW_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("i1"), 2: np.dtype("<i2")}
_TAGS = {np.dtype("<f4"): 0, np.dtype("i1"): 1, np.dtype("<i2"): 2}


def _bn_tensors(bn: BatchNorm):
    return [bn.mean, bn.var, bn.gamma, bn.beta]


def layer_tensors(layer) -> list[tuple[np.ndarray, float | None]]:
    """Tensors of one layer in file order, with their scale (None for real32)."""
    if isinstance(layer, Conv2D):
        return [(layer.weight, layer.scale)]
    if isinstance(layer, BatchNorm):
        return [(t, None) for t in _bn_tensors(layer)]
    if isinstance(layer, MeanOnlyBN):
        return [(layer.mean, None)]
    if isinstance(layer, RepVGGBlock):
        ts = [layer.conv3] + _bn_tensors(layer.bn3)
        if layer.use_1x1:
            ts += [layer.conv1] + _bn_tensors(layer.bn1)
        if layer.use_identity:
            ts += _bn_tensors(layer.bn_id)
        return [(t, None) for t in ts]
    return []


def _tensor_dtype(arr: np.ndarray, scale, bits) -> np.dtype:
    if scale is None:
        return np.dtype("<f4")
    return np.dtype("i1") if (bits or 8) <= 8 else np.dtype("<i2")


def save_weights(spec: NetworkSpec, path) -> None:
    chunks = []
    count = 0
    for layer in spec.layers:
        bits = getattr(layer, "bits", None)
        if bits is not None and bits > 16:
            raise SpecError(f"SNNW stores at most 16-bit codes, layer has {bits}")
        for arr, scale in layer_tensors(layer):
            if arr is None:
                raise SpecError(f"{layer.kind} layer has no weights to save")
            arr = np.asarray(arr)
            dt = _tensor_dtype(arr, scale, bits)
            head = struct.pack("<BB", _TAGS[dt], arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
            if scale is not None:
                head += struct.pack("<f", scale)
            chunks.append(head + np.ascontiguousarray(arr, dtype=dt).tobytes())
            count += 1
    if count > 0xFFFF:
        raise SpecError("too many tensors for SNNW")
    data = SNNW_MAGIC + struct.pack("<HH", SNNW_VERSION, count) + b"".join(chunks)
    Path(path).write_bytes(data)


def _read_tensors(data: bytes):
    if data[:4] != SNNW_MAGIC:
        raise SpecError("not an SNNW file (bad magic)")
    version, count = struct.unpack_from("<HH", data, 4)
    if version != SNNW_VERSION:
        raise SpecError(f"unsupported SNNW version {version}")
    pos = 8
    out = []
    for _ in range(count):
        tag, rank = struct.unpack_from("<BB", data, pos)
        pos += 2
        if tag not in _DTYPES:
            raise SpecError(f"unknown tensor dtype tag {tag} at byte {pos - 2}")
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        scale = None
        if tag != 0:
            (scale,) = struct.unpack_from("<f", data, pos)
            scale = float(scale)
            pos += 4
        dt = _DTYPES[tag]
        n = int(np.prod(dims)) if rank else 1
        end = pos + n * dt.itemsize
        if end > len(data):
            raise SpecError("SNNW file truncated")
        arr = np.frombuffer(data[pos:end], dtype=dt).reshape(dims)
        arr = arr.astype(np.float64) if tag == 0 else arr.astype(dt.newbyteorder("="))
        out.append((arr, scale, tag))
        pos = end
    if pos != len(data):
        raise SpecError(f"{len(data) - pos} trailing bytes in SNNW file")
    return out


def load_weights(spec: NetworkSpec, path) -> NetworkSpec:
    """Attach the tensors in an SNNW file to ``spec``."""
    tensors = _read_tensors(Path(path).read_bytes())
    it = iter(tensors)

    def take(shape=None):
        try:
            arr, scale, tag = next(it)
        except StopIteration:
            raise SpecError("SNNW file has fewer tensors than the network spec needs") from None
        if shape is not None and tuple(arr.shape) != tuple(shape):
            raise SpecError(f"tensor shape {arr.shape} does not match expected {shape}")
        return arr, scale, tag

    def take_bn(c, eps):
        return BatchNorm(c, eps, *(take((c,))[0] for _ in range(4)))

    layers = []
    for layer in spec.layers:
        if isinstance(layer, Conv2D):
            arr, scale, tag = take(layer.weight_shape())
            layer = replace(layer, weight=arr, scale=scale, bits={0: None, 1: 8, 2: 16}[tag])
        elif isinstance(layer, BatchNorm):
            layer = take_bn(layer.channels, layer.eps)
        elif isinstance(layer, MeanOnlyBN):
            layer = replace(layer, mean=take((layer.channels,))[0])
        elif isinstance(layer, RepVGGBlock):
            o, i = layer.out_ch, layer.in_ch
            kw = {"conv3": take((o, i, 3, 3))[0], "bn3": take_bn(o, DEFAULT_EPS)}
            if layer.use_1x1:
                kw.update(conv1=take((o, i, 1, 1))[0], bn1=take_bn(o, DEFAULT_EPS))
            if layer.use_identity:
                kw["bn_id"] = take_bn(o, DEFAULT_EPS)
            layer = replace(layer, **kw)
        layers.append(layer)
    if next(it, None) is not None:
        raise SpecError("SNNW file has more tensors than the network spec needs")
    return spec.with_layers(layers)
