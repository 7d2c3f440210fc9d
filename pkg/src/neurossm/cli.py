"""Command-line entry point: train, ptq, qaft, eval, simulate, bench, fit-cost."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import quant, train
from .data import DataError, load_dataset
from .model import StreamingContext, count_parameters, forward_stream, init_network, load_network, save_network

log = logging.getLogger("neurossm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- reports

def write_report(out: Path, name: str, body: dict, timing: dict | None = None) -> dict:
    """JSON report whose ``content_hash`` covers everything except wall-clock timing."""
    body = dict(body)
    body["content_hash"] = cfgmod.config_hash(body)
    if timing:
        body["timing"] = timing
    (out / f"{name}.json").write_text(json.dumps(body, indent=2, sort_keys=True, default=float) + "\n")
    return body


def read_report(out: Path, name: str) -> dict:
    path = out / f"{name}.json"
    if not path.exists():
        raise UsageError(f"missing prerequisite {path}; run `neurossm {name}` first")
    return json.loads(path.read_text())


def _require(out: Path, stage: str, cfg) -> dict:
    rep = read_report(out, stage)
    want = cfg.stage_hash(stage)
    if rep.get("config_hash") != want:
        raise UsageError(f"{stage} checkpoint in {out} was made with config {rep.get('config_hash')}, "
                         f"current config hashes to {want}; rerun `neurossm {stage}`")
    return rep


def write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _history(rep: train.TrainReport) -> tuple[dict, dict]:
    d = rep.to_dict()
    return {k: v for k, v in d.items() if k != "seconds"}, {"epoch_seconds": d["seconds"]}


# ---------------------------------------------------------------- networks

def _data(cfg):
    return load_dataset(cfg.dataset, cfg.data_dir, cfg.strict_counts)


def _calibration(cfg, data):
    return data.x_train[:cfg.calib_size]


def _quantized(cfg, out: Path, args, data=None):
    """The network for eval/simulate/bench: --random-init, else qaft, else ptq."""
    if getattr(args, "random_init", False):
        net = init_network(cfg.model, cfg.seed)
        if data is not None:
            calib = _calibration(cfg, data)
        else:
            calib = np.random.default_rng(cfg.seed).random((16, cfg.model.input_dim, cfg.model.seq_len))
        return "random", net, quant.ptq(net, cfg.quant, calib)
    stage = getattr(args, "stage", None)
    order = [stage] if stage and stage != "float" else ["qaft", "ptq"]
    for s in order:
        if (out / f"{s}.fq").exists():
            _require(out, s, cfg)
            net = load_network(out / "float.ckpt") if (out / "float.ckpt").exists() else None
            return s, net, quant.load_fake_quant(out / f"{s}.fq")
    raise UsageError(f"no quantized checkpoint in {out}; run `neurossm ptq` (or pass --random-init)")


def _sample_tokens(cfg, data, n):
    if data is not None:
        return data.x_test[:n], data.y_test[:n]
    rng = np.random.default_rng(cfg.seed)
    return rng.random((n, cfg.model.input_dim, cfg.model.seq_len)), None


# ---------------------------------------------------------------- commands

def cmd_train(cfg, out: Path, args) -> dict:
    data = _data(cfg)
    net = init_network(cfg.model, cfg.seed)
    metrics = out / "metrics.jsonl"
    metrics.unlink(missing_ok=True)
    t0 = time.perf_counter()
    best, rep = train.train(net, data, cfg.train, metrics_path=metrics)
    save_network(best, out / "float.ckpt")
    hist, timing = _history(rep)
    timing["total_seconds"] = time.perf_counter() - t0
    if rep.train_loss:
        from .plotting import plot_training
        plot_training(rep.to_dict(), out / "train.png")
    return write_report(out, "train", {
        "stage": "train", "accuracy": rep.best_test_accuracy, "loss": rep.train_loss[-1] if rep.train_loss else None,
        "param_count": count_parameters(cfg.model), "history": hist,
        "config": cfg.to_dict(), "config_hash": cfg.stage_hash("train")}, timing)


def cmd_ptq(cfg, out: Path, args) -> dict:
    _require(out, "train", cfg)
    data = _data(cfg)
    net = load_network(out / "float.ckpt")
    t0 = time.perf_counter()
    fq = quant.ptq(net, cfg.quant, _calibration(cfg, data))
    quant.save_fake_quant(fq, out / "ptq.fq")
    quant.save_integer_network(quant.extract_integers(fq), out / "ptq.int")
    acc = train.evaluate_quantized(fq, data.x_test, data.y_test)
    return write_report(out, "ptq", {
        "stage": "ptq", "accuracy": acc, "float_accuracy": train.evaluate(net, data.x_test, data.y_test),
        "param_count": count_parameters(cfg.model), "activation_bounds": fq.act_bounds,
        "config": cfg.to_dict(), "config_hash": cfg.stage_hash("ptq")}, {"total_seconds": time.perf_counter() - t0})


def cmd_qaft(cfg, out: Path, args) -> dict:
    _require(out, "ptq", cfg)
    data = _data(cfg)
    fq = quant.load_fake_quant(out / "ptq.fq")
    metrics = out / "metrics.jsonl"
    t0 = time.perf_counter()
    fq2, rep = train.qaft(fq, data, cfg.qaft, metrics_path=metrics)
    quant.save_fake_quant(fq2, out / "qaft.fq")
    quant.save_integer_network(quant.extract_integers(fq2), out / "qaft.int")
    acc = rep.test_accuracy[-1] if rep.test_accuracy else train.evaluate_quantized(fq2, data.x_test, data.y_test)
    hist, timing = _history(rep)
    timing["total_seconds"] = time.perf_counter() - t0
    return write_report(out, "qaft", {
        "stage": "qaft", "accuracy": acc, "loss": rep.train_loss[-1] if rep.train_loss else None,
        "param_count": count_parameters(cfg.model), "history": hist,
        "config": cfg.to_dict(), "config_hash": cfg.stage_hash("qaft")}, timing)


def cmd_eval(cfg, out: Path, args) -> dict:
    data = _data(cfg)
    n_stream = min(cfg.eval_stream_samples, len(data.x_test))
    results = {}
    if args.random_init:
        stages = ["float", "random"]
    elif args.stage:
        stages = [args.stage]
    else:
        stages = [s for s, f in (("float", "float.ckpt"), ("ptq", "ptq.fq"), ("qaft", "qaft.fq")) if (out / f).exists()]
        if not stages:
            raise UsageError(f"nothing to evaluate in {out}; run `neurossm train` or pass --random-init")
    for s in stages:
        if s == "float":
            if args.random_init:
                net = init_network(cfg.model, cfg.seed)
            else:
                _require(out, "train", cfg)
                net = load_network(out / "float.ckpt")
            results["float"] = {
                "conv_accuracy": train.evaluate(net, data.x_test, data.y_test),
                "stream_accuracy": train.evaluate(net, data.x_test[:n_stream], data.y_test[:n_stream],
                                                  mode="recurrent"),
                "stream_samples": n_stream, "test_samples": len(data.x_test)}
        else:
            if s == "random":
                fq = quant.ptq(init_network(cfg.model, cfg.seed), cfg.quant, _calibration(cfg, data))
            else:
                _require(out, s, cfg)
                fq = quant.load_fake_quant(out / f"{s}.fq")
            # the integer network only exists in streaming form
            results[s] = {"stream_accuracy": train.evaluate_quantized(fq, data.x_test, data.y_test),
                          "conv_accuracy": None, "test_samples": len(data.x_test)}
    return write_report(out, "eval", {"stage": "eval", "results": results, "config": cfg.to_dict(),
                                      "config_hash": cfgmod.config_hash(cfg.to_dict())})


def cmd_simulate(cfg, out: Path, args) -> dict:
    from . import sim
    from .sim.cost import metrics_row

    data = None if args.synthetic else _data(cfg)
    source, _, fq = _quantized(cfg, out, args, data)
    inet = quant.extract_integers(fq)
    cg = sim.build_core_graph(inet)
    x, y = _sample_tokens(cfg, data, args.samples)
    tq = quant.quantize_tokens(inet, x)
    sched = cfg.schedule_for(cg.depth)
    t0 = time.perf_counter()
    logits, m = sim.run(cg, tq, sched, cfg.cost)
    wall = time.perf_counter() - t0
    ref = quant.integer_forward(inet, tq)
    exact = bool(np.array_equal(logits, ref))
    pooled = logits[..., -1] if cfg.model.readout == "last" else logits.sum(-1)
    body = {"stage": "simulate", "network": source, "schedule": {"kind": sched.kind, "period": sched.period},
            "cores": cg.n_cores, "depth": cg.depth, "stage_cores": cg.stage_core_counts(),
            "bit_exact": exact, "samples": len(tq), "metrics": m.to_dict(), "table": metrics_row(m),
            "accuracy": None if y is None else float(np.mean(pooled.argmax(-1) == y)),
            "config": cfg.to_dict(), "config_hash": cfgmod.config_hash(cfg.to_dict())}
    write_csv(out / "simulate.csv", [{"schedule": sched.kind, "period": sched.period, **metrics_row(m)}])
    rep = write_report(out, "simulate", body, {"simulation_seconds": wall})
    if not exact:
        raise NumericFailure("simulator output differs from the quantized reference")
    return rep


def host_stream_throughput(net, tokens: np.ndarray) -> float:
    """Tokens per second of the float streaming engine on this host (a software metric)."""
    ctx = StreamingContext.reset(net)
    t0 = time.perf_counter()
    for t in range(tokens.shape[-1]):
        ctx, _ = forward_stream(net, ctx, tokens[:, t])
    return tokens.shape[-1] / (time.perf_counter() - t0)


def bench_rows(results: dict) -> list[dict]:
    rows = []
    for kind, m in results.items():
        rows.append({"schedule": kind, "regime": "token", "energy_mJ": m.energy_per_token * 1e3,
                     "latency_ms": m.latency_per_token * 1e3, "throughput_per_s": m.throughput,
                     "edp_uJs": m.edp * 1e6})
        rows.append({"schedule": kind, "regime": "sample", "energy_mJ": m.energy_per_sample * 1e3,
                     "latency_ms": m.latency_per_sample * 1e3, "throughput_per_s": m.throughput_samples,
                     "edp_uJs": m.edp_per_sample * 1e6})
    return rows


def cmd_bench(cfg, out: Path, args) -> dict:
    from . import sim
    from .plotting import plot_regimes

    data = None if args.synthetic else _data(cfg)
    source, net, fq = _quantized(cfg, out, args, data)
    inet = quant.extract_integers(fq)
    cg = sim.build_core_graph(inet)
    x, _ = _sample_tokens(cfg, data, cfg.bench_samples)
    results = sim.benchmark_regimes(cg, quant.quantize_tokens(inet, x), cfg.cost)
    rows = bench_rows(results)
    write_csv(out / "bench.csv", rows)
    plot_regimes(rows, out / "bench.png")
    host = host_stream_throughput(net if net is not None else init_network(cfg.model, cfg.seed),
                                  np.asarray(x[0], dtype=np.float64)[:, :min(256, x.shape[-1])])
    return write_report(out, "bench", {
        "stage": "bench", "network": source, "cores": cg.n_cores, "depth": cg.depth, "rows": rows,
        "metrics": {k: m.to_dict() for k, m in results.items()},
        "config": cfg.to_dict(), "config_hash": cfgmod.config_hash(cfg.to_dict())},
        {"host_stream_tokens_per_s": host})


def cmd_fit_cost(cfg, out: Path, args) -> dict:
    from .plotting import plot_fit
    from .sim import cost

    targets = cost.load_reference_rows(args.targets)
    params = tuple(p.strip() for p in args.params.split(",")) if args.params else cost.DEFAULT_FIT
    workloads = cost.default_workloads(cfg.seed)
    missing = {r["preset"] for r in targets} - set(workloads)
    if missing:
        raise UsageError(f"targets reference unknown presets {sorted(missing)}")
    res = cost.fit_cost(targets, workloads, params=params, tolerance=args.tolerance)
    cost.write_cost_file(out / "cost.ini", res.cost)
    write_csv(out / "fit.csv", res.rows)
    gated = [cost.COLUMNS[f][0] for f in cost.GATED]
    plot_fit(res.rows, gated + [cost.COLUMNS[f][0] for f in cost.ENERGY], out / "fit.png")
    print(f"max relative error: latency/throughput {res.max_gated_error:.3f} "
          f"(tolerance {res.tolerance:.2f}, {'ok' if res.passed else 'FAILED'}), energy {res.max_energy_error:.3f}")
    return write_report(out, "fit", {
        "stage": "fit-cost", "cost": res.cost.to_dict(), "params": list(params), "rows": res.rows,
        "max_gated_error": res.max_gated_error, "max_energy_error": res.max_energy_error,
        "passed": res.passed, "tolerance": res.tolerance})


COMMANDS = {"train": cmd_train, "ptq": cmd_ptq, "qaft": cmd_qaft, "eval": cmd_eval,
            "simulate": cmd_simulate, "bench": cmd_bench, "fit-cost": cmd_fit_cost}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML experiment config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.epochs=2 (repeatable)")
    common.add_argument("-o", "--output-dir", help="where checkpoints and reports go")
    common.add_argument("--data-dir", help="directory holding the dataset files (or set NEUROSSM_DATA)")
    common.add_argument("--seed", type=int)
    common.add_argument("--cost-file", help="INI cost model (section [cost], optional [schedule])")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="neurossm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("train", "ptq", "qaft"):
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    e = sub.add_parser("eval", parents=[common], help="accuracy of available checkpoints")
    e.add_argument("--stage", choices=["float", "ptq", "qaft"])
    e.add_argument("--random-init", action="store_true", help="evaluate an untrained network")
    for name, helptext in (("simulate", "run the neurocore simulator"), ("bench", "compare injection schedules")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--stage", choices=["ptq", "qaft"])
        s.add_argument("--random-init", action="store_true", help="use an untrained quantized network")
        s.add_argument("--synthetic", action="store_true", help="uniform random tokens instead of test samples")
        if name == "simulate":
            s.add_argument("--samples", type=int, default=10)
    f = sub.add_parser("fit-cost", parents=[common], help="calibrate the cost model to measured rows")
    f.add_argument("--targets", help="CSV of measured rows (default: packaged reference rows)")
    f.add_argument("--params", help="comma-separated cost fields to fit")
    f.add_argument("--tolerance", type=float, default=0.30)
    return p


def resolve_config(args):
    overrides = list(args.set)
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    if args.data_dir:
        overrides.append(f"data_dir={args.data_dir}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = cfgmod.load_config(args.config, overrides)
    if args.cost_file:
        from .sim.cost import read_cost_file

        cost, sched = read_cost_file(args.cost_file)
        cfg.cost = cost
        if sched is not None:
            cfg.schedule = sched.kind if sched.kind != "custom" else cfg.schedule
            cfg.period = sched.period if sched.kind == "custom" else None
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        rep = COMMANDS[args.command](cfg, out, args)
    except (UsageError, cfgmod.ConfigError, FileNotFoundError) as e:
        print(f"neurossm {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"neurossm {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, FloatingPointError, quant.GridError) as e:
        print(f"neurossm {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    summary = {k: rep[k] for k in ("accuracy", "bit_exact", "cores", "max_gated_error", "content_hash") if k in rep}
    print(json.dumps({"command": args.command, "output_dir": str(out), **summary}, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
