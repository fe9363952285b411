"""Report figures rendered to files (Agg backend, no display needed)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {
    "figure.dpi": 110,
    "savefig.bbox": "tight",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
}


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_energy_edp(rows, path):
    """Side-by-side bars of total/dynamic energy (mJ) and EDP (µJ·s) per labelled report."""
    labels = [label for label, _ in rows]
    te = [r.E_total * 1e3 for _, r in rows]
    de = [r.E_dynamic * 1e3 for _, r in rows]
    ed = [r.EDP * 1e6 for _, r in rows]
    x = np.arange(len(rows))
    with plt.rc_context(_RC):
        fig, (a, b) = plt.subplots(1, 2, figsize=(max(6, 1.4 * len(rows) + 3), 3.2))
        a.bar(x - 0.2, te, 0.4, label="total")
        a.bar(x + 0.2, de, 0.4, label="dynamic")
        a.set_ylabel("energy / inference (mJ)")
        a.legend(frameon=False)
        b.bar(x, ed, 0.6, color="tab:green")
        b.set_ylabel("EDP (µJ·s)")
        for ax in (a, b):
            ax.set_xticks(x, labels, rotation=30, ha="right")
        fig.tight_layout()
        return _save(fig, path)


def plot_layer_spikes(summary: dict, path):
    """Mean spikes per neuron per sample for each spiking LIF layer of a trace summary."""
    layers = [l for l in summary["layers"] if l["spiking"]]
    rates = [l["mean_per_neuron_per_sample"] for l in layers]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(layers) + 2), 3))
        ax.bar(range(len(layers)), rates, color="tab:purple")
        ax.set_xticks(range(len(layers)), [str(l["index"]) for l in layers])
        ax.set_xlabel("LIF layer index")
        ax.set_ylabel("spikes / neuron / sample")
        T = summary.get("T")
        if T:
            ax.set_title(f"at most {T} spikes per neuron per sample", fontsize=8, loc="left")
        if not any(rates):
            ax.text(0.5, 0.5, "no spikes recorded", transform=ax.transAxes, ha="center", color="grey")
        fig.tight_layout()
        return _save(fig, path)
