"""Command line entry point: encode, run, transform, eval, profile, losses-check, report.

Exit codes: 0 success, 1 invalid input or failed check, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import detect, events, losses, network, profiler, runtime, transform
from .validate import errors, validate_spec

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
FIXTURE = Path(__file__).parent / "data" / "loss_fixture.json"
REPORT_BEGIN, REPORT_END = "=== neurodet report ===", "=== end report ==="


class InvalidInput(Exception):
    """Bad user input or a failed check; maps to exit code 1."""


class StageError(Exception):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage
        self.cause = exc


@contextmanager
def stage(name: str):
    try:
        yield
    except (InvalidInput, StageError):
        raise
    except Exception as exc:  # tag with the pipeline stage, keep the original type for exit mapping
        raise StageError(name, exc) from exc


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


# -- encode -------------------------------------------------------------------

def _read_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def cmd_encode(a) -> int:
    out = Path(a.output)
    out.mkdir(parents=True, exist_ok=True)
    for src in a.inputs:
        src = Path(src)
        if a.mode == "frame":
            with stage("encode"):
                img = _read_image(src)
                if a.size:
                    from PIL import Image

                    img = np.asarray(Image.fromarray(img).resize(tuple(a.size), Image.BILINEAR))
                tensor = events.normalize_frame(img).astype(np.float32)
            np.save(out / f"{src.stem}.npy", tensor)
            print(f"file={src.name} mode=frame shape={'x'.join(map(str, tensor.shape))} "
                  f"min={tensor.min():.4f} max={tensor.max():.4f}")
            continue
        with stage("parse"):
            try:
                w = events.read_events(src)
            except events.EventFormatError as exc:
                raise InvalidInput(f"{src}: {exc}") from exc
        windows = events.slice_windows(w, int(round(a.window_ms * 1000)))
        total = 0.0
        for k, win in enumerate(windows):
            with stage("encode"):
                if a.mode == "histogram":
                    t = events.encode_histogram(win)
                else:
                    t = events.encode_voxel(win, a.bins, signed=a.signed)
            mass = float(t.sum()) if not a.signed else float(np.abs(t).sum())
            total += mass
            np.save(out / f"{src.stem}_w{k:04d}.npy", t.astype(np.float32))
        print(f"file={src.name} mode={a.mode} windows={len(windows)} events={len(w)} mass={total:g}")
    return EXIT_OK


# -- run ----------------------------------------------------------------------

def _load_net(a):
    with stage("load"):
        net = network.load_spec(a.spec)
        if a.weights:
            net = network.load_weights(net, a.weights)
        else:
            net = network.init_weights(net, seed=a.seed)
    bad = errors(validate_spec(net))
    if bad:
        raise InvalidInput("invalid network: " + "; ".join(map(str, bad)))
    return net


def _head_config(a, net) -> detect.HeadConfig:
    n_cls = a.n_cls if a.n_cls is not None else (net.head.n_cls if net.head else None)
    reg_max = a.reg_max if a.reg_max is not None else (net.head.reg_max if net.head else 5)
    if n_cls is None:
        raise InvalidInput("class count unknown: pass --n-cls or add a head block to the network spec")
    cfg = detect.HeadConfig(n_cls, reg_max, a.stride or net.stride(), a.score_threshold, a.nms_iou)
    if cfg.channels != net.output_shape()[0]:
        raise InvalidInput(f"head expects {cfg.channels} channels, network outputs {net.output_shape()[0]}")
    return cfg


def _timing(a, n_layer: int) -> profiler.TimingProfile:
    if (a.dt is None) == (a.rate is None):
        raise InvalidInput("give exactly one of --dt or --rate")
    if a.rate is not None:
        return profiler.TimingProfile.from_rate(a.rate, a.T, n_layer)
    return profiler.TimingProfile(a.dt, a.T, n_layer, "config")


def _power(a) -> profiler.PowerProfile:
    if a.power:
        return profiler.load_power(a.power)
    if a.static is None or a.dynamic is None:
        raise InvalidInput("give --power FILE or both --static and --dynamic")
    return profiler.PowerProfile(a.static, a.dynamic, a.platform)


def cmd_run(a) -> int:
    net = _load_net(a)
    cfg = runtime.RunConfig(T=a.T, reset_interval=a.reset_interval, tau=a.tau,
                            readout_offset_enabled=a.readout_offset)
    head = _head_config(a, net)
    out = Path(a.output)
    out.mkdir(parents=True, exist_ok=True)
    with stage("input"):
        inputs = [(Path(p).stem, np.load(p)) for p in a.inputs]
    sim = runtime.Simulator(net, cfg)
    with stage("infer"):
        for _, x in inputs:
            sim._check_input(x)
        if a.threads > 1 and len(inputs) > 1:
            with ThreadPoolExecutor(a.threads) as pool:
                heads = list(pool.map(lambda item: sim.infer(item[1]).data, inputs))
        else:
            heads = [r.data for r in sim.infer_stream([x for _, x in inputs])]
    dets = []
    with stage("decode"):
        for (name, _), h in zip(inputs, heads):
            dets += detect.nms(detect.decode(h, head, name), head.nms_iou_threshold)
    detect.write_detections(out / "detections.jsonl", dets)
    if a.save_heads:
        np.savez(out / "heads.npz", **{name: h for (name, _), h in zip(inputs, heads)})
    summary = {"samples": len(inputs), "detections": len(dets), "score_threshold": head.score_threshold,
               "n_layer": net.n_layer, "readout_steps": [
                   runtime.readout_step(k, net.n_layer, cfg.reset_interval) if cfg.readout_offset_enabled
                   else k * cfg.reset_interval + cfg.T for k in range(len(inputs))]}
    trace = None
    if a.trace or a.profile:
        with stage("trace"):
            trace = runtime.record_trace(net, [x for _, x in inputs], cfg)
        trace.dump(out / "trace.json")
        summary["trace"] = str(out / "trace.json")
    if a.profile:
        with stage("profile"):
            rep = profiler.build_report(_power(a), _timing(a, net.n_layer), trace)
        _dump_json(rep.to_dict(), out / "report.json")
        print(profiler.format_table([(net.name, rep)]))
    print(f"samples={len(inputs)} detections={len(dets)} output={out}")
    _dump_json(summary, out / "run.json")
    return EXIT_OK


# -- transform ----------------------------------------------------------------

def cmd_transform(a) -> int:
    with stage("load"):
        net = network.load_weights(network.load_spec(a.spec), a.weights)
    original = net
    qp = None
    if a.quantize != "none":
        qp = transform.QuantParams(bits={"int8": 8, "int16": 16}[a.quantize])
    with stage("transform"):
        net = transform.deploy(net, a.reparam, a.absorb_bn, a.clamp, qp)
    rows = transform.stage_equivalence(original, net, seed=a.seed)
    violations = validate_spec(net, allow_repvgg=not a.reparam)
    divergence = None
    if qp is not None and a.probes > 0 and not errors(violations):
        with stage("divergence"):
            real = transform.deploy(original, a.reparam, a.absorb_bn, a.clamp, None)
            rng = np.random.default_rng(a.seed)
            probes = [rng.random(net.input_shape) for _ in range(a.probes)]
            divergence = transform.inference_divergence(real, net, probes)
    out_spec, out_w = a.output
    network.save_spec(net, out_spec)
    network.save_weights(net, out_w)
    report = {"steps": {"reparam": a.reparam, "absorb_bn": a.absorb_bn, "clamp": a.clamp, "quantize": a.quantize},
              "stages": rows, "violations": [str(v) for v in violations],
              "max_abs_error": max((r["max_abs_error"] for r in rows), default=0.0),
              "quantization_divergence": divergence}
    print(f"{'stage':>5} {'max |err|':>12} {'max rel err':>12}")
    for r in rows:
        print(f"{r['stage']:>5} {r['max_abs_error']:>12.3e} {r['max_rel_error']:>12.3e}")
    if divergence is not None:
        print(f"quantized vs real: output max |err| {divergence['output_max_abs']:.3e} "
              f"(rel {divergence['output_rel']:.3e}), spike flips {divergence['spike_flips']} "
              f"({100 * divergence['spike_flip_fraction']:.2f}%), per-stage rounding bound "
              f"{'holds' if divergence['stage_bound_ok'] else 'VIOLATED'}")
    for v in violations:
        print(v)
    if a.report:
        _dump_json(report, a.report)
    return EXIT_INVALID if errors(violations) else EXIT_OK


# -- eval ---------------------------------------------------------------------

def cmd_eval(a) -> int:
    with stage("load"):
        dets = detect.group_by_image(detect.read_detections(a.detections))
        gt_dir = Path(a.labels)
        gts = {p.stem: detect.read_yolo_labels(p, a.width, a.height) for p in sorted(gt_dir.glob("*.txt"))}
    try:
        thresholds = detect.iou_range(a.range)
    except ValueError as exc:
        raise InvalidInput(str(exc)) from exc
    with stage("eval"):
        res = detect.eval_detections(dets, gts, a.score_threshold, thresholds, a.iou)
    text = json.dumps(res, indent=2, sort_keys=True, default=_jsonable)
    if a.output:
        Path(a.output).write_text(text + "\n")
    print(text)
    return EXIT_OK


# -- profile ------------------------------------------------------------------

def cmd_profile(a) -> int:
    if a.reference:
        try:
            model, dataset = a.reference.split(":", 1)
            power = profiler.reference_power(model, dataset)
        except (ValueError, KeyError):
            raise InvalidInput(f"unknown reference {a.reference!r}; use MODEL:DATASET, e.g. model1:evCIVIL-ev")
        if a.rate is None and a.dt is None:
            rate = profiler.reference_data()["stated_rates_per_s"].get(model, {}).get(dataset)
            if rate is None:
                raise InvalidInput(f"no stated rate for {a.reference}; pass --rate or --dt")
            a.rate = float(rate)
    else:
        power = _power(a)
    if a.spec:
        n_layer = network.load_spec(a.spec).n_layer
    elif a.n_layer is not None:
        n_layer = a.n_layer
    elif a.reference:
        n_layer = network.reference_config(model).n_layer
    else:
        n_layer = 1
    trace = None
    if a.trace:
        trace = json.loads(Path(a.trace).read_text())
    with stage("profile"):
        rep = profiler.build_report(power, _timing(a, n_layer), trace)
    label = a.label or (a.reference or power.platform)
    rows = [(label, rep)]
    print(profiler.format_table(rows))
    if a.output:
        _dump_json(rep.to_dict() | {"label": label}, a.output)
    if a.csv:
        Path(a.csv).write_text(profiler.format_csv(rows, "\t" if a.csv.endswith(".tsv") else ","))
    return EXIT_OK


# -- losses-check -------------------------------------------------------------

def _arr(v):
    return np.asarray(v, dtype=np.float64)


def _case_value(case: dict) -> float:
    op, x = case["op"], case["inputs"]
    cfg = losses.DistillConfig(**x.get("config", {}))
    if op == "softmax_T":
        return float(losses.softmax_T(_arr(x["logits"]), x["Tp"])[x.get("index", 0)])
    if op == "kl_div":
        return losses.kl_div(_arr(x["p_s"]), _arr(x["p_t"]))
    if op == "bce_logits":
        return losses.bce_logits(_arr(x["x"]), _arr(x["y"]))
    if op == "ciou":
        return float(losses.ciou(_arr(x["box_p"]), _arr(x["box_t"])))
    if op == "box_loss":
        return losses.box_loss(losses.AssignedBatch(_arr(x["weights"]), _arr(x["pred_boxes"]), _arr(x["target_boxes"])))
    if op == "dfl_loss":
        b = losses.AssignedBatch(_arr(x["weights"]), pred_dist=_arr(x["pred_dist"]), target_ltrb=_arr(x["target_ltrb"]))
        return losses.dfl_loss(b, x["reg_max"])
    if op == "feat_distill":
        return losses.feat_distill(_arr(x["f_ann"]), _arr(x["f_snn"]), _arr(x["projection"]))
    if op == "cls_distill":
        return losses.cls_distill(_arr(x["student"]), _arr(x["teacher"]), cfg)
    if op == "dfl_distill":
        return losses.dfl_distill(_arr(x["student"]), _arr(x["teacher"]), cfg)
    if op == "total_loss":
        return losses.total_loss(x["components"], cfg)
    if op == "theta_schedule":
        return losses.theta_schedule(x["iter"], x["total"])
    if op == "eta_schedule":
        return losses.eta_schedule(x["iter"], x["total"])
    raise KeyError(f"unknown op {op!r}")


def run_loss_cases(cases: list[dict]) -> list[dict]:
    rows = []
    for n, case in enumerate(cases):
        for key in ("op", "inputs", "expected"):
            if key not in case:
                raise InvalidInput(f"case {n} ({case.get('name', '?')}): missing field {key!r}")
        tol = float(case.get("tol", 1e-6))
        try:
            got = _case_value(case)
        except KeyError as exc:
            raise InvalidInput(f"case {n} ({case.get('name', '?')}): missing field {exc}") from exc
        err = abs(got - case["expected"])
        ok = err <= tol * max(1.0, abs(case["expected"]))
        rows.append({"name": case.get("name", f"case{n}"), "op": case["op"], "value": got,
                     "expected": case["expected"], "abs_error": err, "tol": tol, "pass": ok})
    return rows


def cmd_losses_check(a) -> int:
    path = Path(a.fixture) if a.fixture else FIXTURE
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"{path}: not valid JSON ({exc})") from exc
    cases = data.get("cases", []) if isinstance(data, dict) else data
    if not cases:
        print("no cases")
        return EXIT_INVALID
    rows = run_loss_cases(cases)
    width = max(len(r["name"]) for r in rows)
    for r in rows:
        print(f"{'PASS' if r['pass'] else 'FAIL'}  {r['name']:<{width}}  {r['op']:<14} "
              f"got={r['value']:.10g} expected={r['expected']:.10g} err={r['abs_error']:.2e}")
    failed = sum(not r["pass"] for r in rows)
    print(f"{len(rows) - failed}/{len(rows)} passed")
    return EXIT_INVALID if failed else EXIT_OK


# -- report -------------------------------------------------------------------

def cmd_report(a) -> int:
    from . import plotting

    out = Path(a.output)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for p in a.reports:
        d = json.loads(Path(p).read_text())
        rows.append((d.get("label") or Path(p).stem, profiler.ProfileReport.from_dict(d)))
    repro = profiler.reproduce_loihi_rows() if a.reference else []
    if a.reference:
        ref = profiler.reference_data()
        for r in repro:
            if "rate" in r:
                p = profiler.reference_power(r["model"], r["dataset"])
                timing = profiler.TimingProfile.from_rate(r["rate"], ref["timesteps"], r["n_layer"])
                rows.append((f"{r['model']}/{r['dataset']}", profiler.build_report(p, timing)))
    if not rows:
        raise InvalidInput("nothing to report: pass report JSON files or --reference")

    print(REPORT_BEGIN)
    print(profiler.format_table(rows))
    if repro:
        print()
        print(f"{'published row':<24}{'TE pub':>9}{'TE calc':>9}{'rel err':>9}{'EDP pub':>9}{'TE*L':>9}")
        for r in repro:
            calc = f"{r['TE_computed_mJ']:>9.2f}{100 * r['TE_rel_error']:>8.2f}%" if "rate" in r else f"{'-':>9}{'-':>9}"
            print(f"{r['model'] + '/' + r['dataset']:<24}{r['TE_published_mJ']:>9.2f}{calc}"
                  f"{r['EDP_published_uJs']:>9.1f}{r['EDP_from_published_uJs']:>9.1f}")
    print(REPORT_END)

    (out / "report.csv").write_text(profiler.format_csv(rows))
    (out / "report.tsv").write_text(profiler.format_csv(rows, "\t"))
    figures = [plotting.plot_energy_edp(rows, out / "energy_edp.png")]
    if a.trace:
        figures.append(plotting.plot_layer_spikes(json.loads(Path(a.trace).read_text()), out / "layer_spikes.png"))
    if repro:
        _dump_json(repro, out / "reproduction.json")
    for f in figures:
        print(f"figure={f}")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------

def _add_run_timing(p):
    p.add_argument("--power", help="power config JSON (platform, static_w, dynamic_w)")
    p.add_argument("--static", type=float, help="static power in W")
    p.add_argument("--dynamic", type=float, help="dynamic power in W")
    p.add_argument("--platform", default="loihi2")
    p.add_argument("--dt", type=float, help="seconds per simulation step")
    p.add_argument("--rate", type=float, help="inference rate (samples/s); dt is derived from it")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="neurodet", description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0, help="seed for every randomised step")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for per-sample stages")
    ap.add_argument("--manifest", help="JSON file of option defaults (flat or keyed by subcommand)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="EVT1 streams or images to tensor files (.npy)")
    p.add_argument("inputs", nargs="+")
    p.add_argument("-o", "--output", default="encoded")
    p.add_argument("--mode", choices=("histogram", "voxel", "frame"), default="histogram")
    p.add_argument("--bins", type=int, default=3, help="voxel bin count")
    p.add_argument("--signed", action="store_true", help="polarity-signed voxel grid")
    p.add_argument("--window-ms", type=float, default=100.0, help="fixed window length for slicing")
    p.add_argument("--size", type=int, nargs=2, metavar=("W", "H"), help="resize frames")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("run", help="infer, decode and NMS; optional trace and profile")
    p.add_argument("inputs", nargs="+", help=".npy input tensors")
    p.add_argument("--spec", required=True)
    p.add_argument("--weights", help="SNNW file; random weights from --seed when omitted")
    p.add_argument("-o", "--output", default="run")
    p.add_argument("--T", type=int, default=7)
    p.add_argument("--reset-interval", type=int, default=8)
    p.add_argument("--tau", type=float, help="override every layer's leak constant")
    p.add_argument("--readout-offset", action="store_true")
    p.add_argument("--n-cls", type=int)
    p.add_argument("--reg-max", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--score-threshold", type=float, default=0.6)
    p.add_argument("--nms-iou", type=float, default=0.5)
    p.add_argument("--trace", action="store_true", help="write trace.json")
    p.add_argument("--profile", action="store_true", help="write report.json (needs power and timing)")
    p.add_argument("--save-heads", action="store_true", help="write raw output membranes to heads.npz")
    _add_run_timing(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("transform", help="deployment transforms with an equivalence report")
    p.add_argument("spec")
    p.add_argument("weights")
    p.add_argument("-o", "--output", nargs=2, required=True, metavar=("OUT_SPEC", "OUT_SNNW"))
    p.add_argument("--reparam", action="store_true")
    p.add_argument("--absorb-bn", action="store_true")
    p.add_argument("--clamp", action="store_true")
    p.add_argument("--quantize", choices=("none", "int8", "int16"), default="none")
    p.add_argument("--report", help="write the transform report as JSON")
    p.add_argument("--probes", type=int, default=1,
                   help="random inputs for the quantized-vs-real end-to-end comparison (0 disables)")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("eval", help="COCO-style metrics from detections and YOLO labels")
    p.add_argument("detections")
    p.add_argument("labels", help="directory of <image_id>.txt YOLO label files")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--range", default="0.5:0.95:0.05")
    p.add_argument("--score-threshold", type=float, default=0.6)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="rate, energy, latency and EDP from power and timing")
    _add_run_timing(p)
    p.add_argument("--reference", help="MODEL:DATASET from the shipped power table")
    p.add_argument("--T", type=int, default=7)
    p.add_argument("--n-layer", type=int,
                   help="deployed layer count (default: from --spec, else the reference config, else 1)")
    p.add_argument("--spec", help="take N_layer from this network spec")
    p.add_argument("--trace", help="trace.json from `run --trace`")
    p.add_argument("--label")
    p.add_argument("-o", "--output")
    p.add_argument("--csv", help="also write CSV (TSV when the name ends in .tsv)")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("losses-check", help="evaluate loss fixtures and print pass/fail per case")
    p.add_argument("fixture", nargs="?")
    p.set_defaults(func=cmd_losses_check)

    p = sub.add_parser("report", help="table, CSV/TSV and figures from profile reports")
    p.add_argument("reports", nargs="*")
    p.add_argument("--reference", action="store_true", help="include the reproducible published rows")
    p.add_argument("--trace", help="trace.json for the per-layer spike figure")
    p.add_argument("-o", "--output", default="report")
    p.set_defaults(func=cmd_report)
    return ap


def _apply_manifest(parser: argparse.ArgumentParser, argv) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--manifest")
    known, rest = pre.parse_known_args(argv)
    if not known.manifest:
        return
    data = json.loads(Path(known.manifest).read_text())
    subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices
    command = next((tok for tok in rest if tok in subs), None)
    globals_ = {k.replace("-", "_"): v for k, v in data.items() if not isinstance(v, dict)}
    parser.set_defaults(**{k: v for k, v in globals_.items() if k in ("seed", "threads")})
    if command:
        section = data.get(command, {})
        merged = {**globals_, **{k.replace("-", "_"): v for k, v in section.items()}}
        subs[command].set_defaults(**merged)
        # a manifest value satisfies a required option
        for act in subs[command]._actions:
            if act.dest in merged and act.option_strings:
                act.required = False


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_manifest(parser, argv)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: manifest: {exc}", file=sys.stderr)
        return EXIT_INVALID
    a = parser.parse_args(argv)
    try:
        return a.func(a)
    except InvalidInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        invalid = isinstance(exc.cause, (ValueError, OSError, KeyError))
        return EXIT_INVALID if invalid else EXIT_RUNTIME
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # anything unexpected is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
