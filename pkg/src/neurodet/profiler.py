"""Per-inference rate, energy, latency, EDP, sparsity and SOP accounting.

Power numbers are inputs (measured elsewhere); this module only does the
arithmetic that turns them into per-inference figures.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .runtime import SpikeTrace

_REFERENCE = Path(__file__).parent / "data" / "loihi2_reference.json"


@dataclass(frozen=True)
class PowerProfile:
    static_w: float
    dynamic_w: float
    platform: str = "loihi2"

    def __post_init__(self):
        if self.static_w < 0 or self.dynamic_w < 0:
            raise ValueError("power must be non-negative")

    @property
    def total_w(self) -> float:
        return self.static_w + self.dynamic_w


@dataclass(frozen=True)
class TimingProfile:
    dt: float
    T: int = 7
    n_layer: int = 1
    # where dt came from: "config" or "rate"
    source: str = "config"

    def __post_init__(self):
        if self.dt <= 0 or self.T < 1 or self.n_layer < 1:
            raise ValueError("need dt > 0, T >= 1 and n_layer >= 1")

    @classmethod
    def from_rate(cls, rate: float, T: int = 7, n_layer: int = 1) -> "TimingProfile":
        return cls(dt_from_rate(rate, T), T, n_layer, "rate")


def inference_rate(tp: TimingProfile) -> float:
    return 1.0 / (tp.dt * tp.T)


def dt_from_rate(rate: float, T: int = 7) -> float:
    if rate <= 0:
        raise ValueError("rate must be positive")
    return 1.0 / (rate * T)


def energy_per_inference(power_w: float, rate: float) -> float:
    if rate <= 0:
        raise ValueError("inference rate must be positive")
    return power_w / rate


def latency(tp: TimingProfile) -> float:
    return tp.dt * tp.n_layer


def edp(latency_s: float, energy_j: float) -> float:
    return latency_s * energy_j


@dataclass(frozen=True)
class TraceStats:
    """The aggregate counts the metrics need; built from a live trace or its JSON dump."""

    n_spiking_neurons: int
    total_spikes: int
    samples: int
    active_synapses: int
    total_synapses: int
    fanout_weighted_spikes: float = 0.0

    @classmethod
    def of(cls, trace) -> "TraceStats":
        if isinstance(trace, TraceStats):
            return trace
        if isinstance(trace, SpikeTrace):
            return cls(trace.n_spiking_neurons, trace.total_spikes, trace.samples,
                       trace.active_synapses, trace.total_synapses, trace.fanout_weighted_spikes())
        if isinstance(trace, dict):
            try:
                return cls(int(trace["n_spiking_neurons"]), int(trace["total_spikes"]), int(trace["samples"]),
                           int(trace["active_synapses"]), int(trace["total_synapses"]),
                           float(trace.get("fanout_weighted_spikes", 0.0)))
            except KeyError as exc:
                raise ValueError(f"trace summary missing {exc}") from None
        raise TypeError(f"cannot read trace statistics from {type(trace).__name__}")


def sparsity_and_sops(trace) -> tuple[float, float]:
    """Mean spikes per spiking neuron per sample, and that times the neuron count."""
    st = TraceStats.of(trace)
    n = st.n_spiking_neurons
    if n == 0 or st.samples == 0:
        raise ValueError("trace has no spiking neurons or no samples")
    s = st.total_spikes / (n * st.samples)
    return s, s * n


def active_synapse_fraction(trace) -> float:
    st = TraceStats.of(trace)
    return st.active_synapses / st.total_synapses if st.total_synapses else 0.0


@dataclass
class ProfileReport:
    R: float
    E_static: float
    E_dynamic: float
    E_total: float
    L: float
    EDP: float
    dt: float
    dt_source: str
    T: int
    n_layer: int
    platform: str = "loihi2"
    sparsity: float | None = None
    SOPs: float | None = None
    active_synapse_fraction: float | None = None
    # spikes weighted by fan-out; auxiliary, not part of the SOP definition
    fanout_weighted_sops: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ProfileReport":
        names = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in names})

    def table_row(self) -> dict:
        """Values in the units of the published comparison table."""
        return {"TE (mJ)": self.E_total * 1e3, "L (ms)": self.L * 1e3, "EDP (uJ*s)": self.EDP * 1e6,
                "DE (mJ)": self.E_dynamic * 1e3, "Rate (Sa/s)": self.R}


def build_report(power: PowerProfile, timing: TimingProfile, trace=None) -> ProfileReport:
    r = inference_rate(timing)
    e_s = energy_per_inference(power.static_w, r)
    e_d = energy_per_inference(power.dynamic_w, r)
    e_t = e_s + e_d
    lat = latency(timing)
    rep = ProfileReport(r, e_s, e_d, e_t, lat, edp(lat, e_t), timing.dt, timing.source,
                        timing.T, timing.n_layer, power.platform)
    if trace is not None:
        st = TraceStats.of(trace)
        rep.sparsity, rep.SOPs = sparsity_and_sops(st)
        rep.active_synapse_fraction = active_synapse_fraction(st)
        rep.fanout_weighted_sops = st.fanout_weighted_spikes / st.samples
    return rep


def format_table(rows: list[tuple[str, ProfileReport]]) -> str:
    """Aligned-column text table: label, TE mJ, L ms, EDP µJ·s, dynamic mJ, rate."""
    head = f"{'run':<28}{'TE (mJ)':>10}{'L (ms)':>10}{'EDP (uJ*s)':>12}{'DE (mJ)':>10}{'Rate (Sa/s)':>13}"
    lines = [head, "-" * len(head)]
    for label, rep in rows:
        t = rep.table_row()
        lines.append(f"{label:<28}{t['TE (mJ)']:>10.2f}{t['L (ms)']:>10.2f}{t['EDP (uJ*s)']:>12.1f}"
                     f"{t['DE (mJ)']:>10.2f}{t['Rate (Sa/s)']:>13.1f}")
    return "\n".join(lines)


def load_power(path) -> PowerProfile:
    with open(path) as fh:
        d = json.load(fh)
    try:
        return PowerProfile(float(d["static_w"]), float(d["dynamic_w"]), d.get("platform", "loihi2"))
    except KeyError as exc:
        raise ValueError(f"power config missing {exc}") from None


def reference_data() -> dict:
    with open(_REFERENCE) as fh:
        return json.load(fh)


def reference_power(model: str, dataset: str) -> PowerProfile:
    d = reference_data()["power_w"][model][dataset]
    return PowerProfile(d["static_w"], d["dynamic_w"], "loihi2")


def format_csv(rows: list[tuple[str, ProfileReport]], sep: str = ",") -> str:
    keys = list(ProfileReport.__dataclass_fields__)
    keys.remove("extra")
    lines = [sep.join(["run"] + keys)]
    for label, rep in rows:
        d = rep.to_dict()
        lines.append(sep.join([label] + ["" if d[k] is None else str(d[k]) for k in keys]))
    return "\n".join(lines) + "\n"


def reproduce_loihi_rows() -> list[dict]:
    """Recompute total energy for every published row whose inference rate is stated.

    EDP is also recomputed from the published energy and latency, which checks
    the table's own arithmetic independently of the rate. Latency uses the
    layer count of the matching shipped config.
    """
    from .network import reference_config

    ref = reference_data()
    T = ref["timesteps"]
    out = []
    for model, rows in ref["loihi2_rows"].items():
        for dataset, row in rows.items():
            item = {"model": model, "dataset": dataset, "TE_published_mJ": row["TE_mJ"],
                    "L_published_ms": row["L_ms"], "EDP_published_uJs": row["EDP_uJs"],
                    "EDP_from_published_uJs": row["TE_mJ"] * row["L_ms"]}
            rate = ref["stated_rates_per_s"].get(model, {}).get(dataset)
            if rate is not None:
                n_layer = reference_config(model).n_layer
                rep = build_report(reference_power(model, dataset), TimingProfile.from_rate(rate, T, n_layer))
                te = rep.E_total * 1e3
                item.update(rate=rate, n_layer=n_layer, TE_computed_mJ=te, L_computed_ms=rep.L * 1e3,
                            TE_rel_error=abs(te - row["TE_mJ"]) / row["TE_mJ"],
                            DE_computed_mJ=rep.E_dynamic * 1e3)
            out.append(item)
    return out
