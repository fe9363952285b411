import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

from neurodet.events import EventWindow  # noqa: E402
from neurodet.network import LIF, Conv2D, MeanOnlyBN, NetworkSpec, init_weights  # noqa: E402


def random_window(rng, n=None, width=None, height=None, span=None):
    width = width or int(rng.integers(1, 17))
    height = height or int(rng.integers(1, 13))
    n = int(rng.integers(0, 60)) if n is None else n
    t0 = int(rng.integers(0, 10_000))
    span = int(rng.integers(0, 5_000)) if span is None else span
    t = np.sort(rng.integers(t0, t0 + span + 1, n))
    ev = np.zeros(n, dtype=[("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])
    ev["t"], ev["x"], ev["y"] = t, rng.integers(0, width, n), rng.integers(0, height, n)
    ev["p"] = rng.integers(0, 2, n)
    return EventWindow(ev, t0, t0 + span, width, height)


def tiny_net(in_shape=(1, 4, 4), weight=1.0, out_ch=None, tau=1.0, mean=None):
    """conv(k=1) -> [meanbn] -> LIF(non-spiking, 2048): a pure accumulator."""
    c = in_shape[0]
    out_ch = out_ch or c
    w = np.zeros((out_ch, c, 1, 1))
    for i in range(min(c, out_ch)):
        w[i, i] = weight
    layers = [Conv2D(c, out_ch, 1, 1, 0, weight=w)]
    if mean is not None:
        layers.append(MeanOnlyBN(out_ch, np.asarray(mean, dtype=float)))
    layers.append(LIF(2048.0, tau, spiking=False))
    return NetworkSpec(in_shape, layers, "tiny")


def two_layer_net(in_shape=(1, 4, 4), w1=None, hidden=2, out_ch=3, seed=0, tau=2.0):
    rng = np.random.default_rng(seed)
    c = in_shape[0]
    w1 = rng.normal(0, 1, (hidden, c, 3, 3)) if w1 is None else w1
    w2 = rng.normal(0, 1, (out_ch, hidden, 1, 1))
    return NetworkSpec(in_shape, [
        Conv2D(c, hidden, 3, 1, 1, weight=w1), LIF(1.0, tau),
        Conv2D(hidden, out_ch, 1, 1, 0, weight=w2), LIF(2048.0, tau, spiking=False),
    ], "two")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def active_reference_net(name, hw=(64, 64), seed=4, percentile=70.0, headroom=1.5, n_calib=2):
    """Deployable reference net whose convs are rescaled so spikes reach the head.

    Random init goes silent after a few layers; each stage's gain is set so the
    chosen percentile of its positive LIF current sits at ``headroom`` times the
    layer threshold (the leaky membrane only approaches its input asymptotically).
    """
    from dataclasses import replace

    from neurodet.network import reference_config
    from neurodet.runtime import Simulator, apply_layer
    from neurodet.transform import _stages, deploy

    base = reference_config(name)
    c = base.input_shape[0]
    net = deploy(init_weights(base.with_input((c, *hw)), seed=seed), quant=None)
    rng = np.random.default_rng(seed)
    calib = [rng.uniform(0, 2, (c, *hw)) for _ in range(n_calib)]
    for i in net.lif_indices()[:-1]:
        currents = []

        def watch(j, src, spikes, i=i, stages=_stages(net)):
            if j == i:
                cur = src
                for l in stages[i]:
                    cur = apply_layer(cur, l)
                currents.append(cur[cur > 0])

        sim = Simulator(net, check=False)
        for x in calib:
            sim.run_period(x, observer=watch)
        vals = np.concatenate(currents)
        gain = headroom * net.layers[i].v_th / np.percentile(vals, percentile) if vals.size else 1.0
        layers = list(net.layers)
        conv_i = max(k for k in range(i) if isinstance(layers[k], Conv2D))
        layers[conv_i] = replace(layers[conv_i], weight=layers[conv_i].weight * gain)
        # keep the subtractive mean in step with the rescaled current
        if isinstance(layers[conv_i + 1], MeanOnlyBN):
            layers[conv_i + 1] = replace(layers[conv_i + 1], mean=layers[conv_i + 1].mean * gain)
        net = net.with_layers(layers)
    return net, calib


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if not mod or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.line(n))
