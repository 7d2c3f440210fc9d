"""Cost-model files and least-squares calibration against measured rows."""

from __future__ import annotations

import configparser
import csv
import logging
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

from .coregraph import CoreGraph
from .simulator import InjectionSchedule, RunMetrics, StepCostModel, metrics_from_profile, schedule_profile

log = logging.getLogger(__name__)

# RunMetrics field -> (CSV column, multiplier from SI units)
COLUMNS = {
    "energy_per_token": ("energy_per_token_mJ", 1e3),
    "latency_per_token": ("latency_per_token_ms", 1e3),
    "throughput": ("throughput_tokens_per_s", 1.0),
    "edp": ("edp_per_token_uJs", 1e6),
    "energy_per_sample": ("energy_per_sample_mJ", 1e3),
    "latency_per_sample": ("latency_per_sample_ms", 1e3),
    "throughput_samples": ("throughput_samples_per_s", 1.0),
    "edp_per_sample": ("edp_per_sample_uJs", 1e6),
}
GATED = ("latency_per_token", "throughput", "latency_per_sample", "throughput_samples")
ENERGY = ("energy_per_token", "energy_per_sample")
DEFAULT_FIT = ("t_step_base", "t_per_active_stage", "e_per_synop", "e_static_per_step")
_UNIT = {"t": 1e-6, "e": 1e-6}  # fit in microseconds / microjoules

# Result of fit_cost on the packaged reference rows (rounded).
CALIBRATED = StepCostModel(t_step_base=4.208e-6, t_per_active_stage=5.683e-7,
                           e_per_synop=1.511e-10, e_static_per_step=6.517e-8)


def metrics_row(m: RunMetrics) -> dict[str, float]:
    return {col: getattr(m, f) * k for f, (col, k) in COLUMNS.items()}


def load_reference_rows(path=None) -> list[dict]:
    """Measured rows; the packaged file holds the six neuromorphic-chip rows."""
    if path is None:
        text = resources.files(__package__).joinpath("reference_measurements.csv").read_text()
    else:
        text = Path(path).read_text()
    rows = []
    for r in csv.DictReader(text.splitlines()):
        row = {k: (v if k in ("dataset", "schedule", "preset") else float(v)) for k, v in r.items()}
        row["seq_len"] = int(row["seq_len"])
        rows.append(row)
    if not rows:
        raise ValueError("no target rows")
    return rows


def read_cost_file(path) -> tuple[StepCostModel, InjectionSchedule | None]:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    known = {f.name for f in fields(StepCostModel)}
    vals = {}
    for k, v in (cp["cost"].items() if cp.has_section("cost") else []):
        if k not in known:
            raise ValueError(f"{path}: unknown cost key {k!r}")
        vals[k] = float(v)
    sched = None
    if cp.has_section("schedule"):
        s = cp["schedule"]
        kind = s.get("kind", "pipelined")
        sched = InjectionSchedule(kind, s.getint("period", 1))
    return StepCostModel(**vals), sched


def write_cost_file(path, cost: StepCostModel, sched: InjectionSchedule | None = None) -> None:
    cp = configparser.ConfigParser()
    cp["cost"] = {k: repr(v) for k, v in cost.to_dict().items()}
    if sched is not None:
        cp["schedule"] = {"kind": sched.kind, "period": str(sched.period)}
    with open(path, "w") as fh:
        cp.write(fh)


@dataclass
class Workload:
    """Everything the cost model needs about one measured configuration."""

    cg: CoreGraph
    seq_len: int
    synops_per_token: float
    _profiles: dict = field(default_factory=dict, repr=False)

    def profile(self, kind: str):
        if kind not in self._profiles:
            sched = InjectionSchedule.for_graph(kind, self.cg)
            self._profiles[kind] = schedule_profile(self.cg, self.seq_len, sched)
        return self._profiles[kind]


def probe_synops(cg: CoreGraph, tokens_q: np.ndarray) -> float:
    """Mean synaptic events per token from a short fall-through simulation."""
    from .simulator import run

    _, m = run(cg, tokens_q, InjectionSchedule.fall_through(cg.depth), StepCostModel())
    return m.synops_per_sample / m.tokens_per_sample


def predict(w: Workload, kind: str, cost: StepCostModel) -> RunMetrics:
    prof = w.profile(kind)
    syn = np.full(prof.steps, w.synops_per_token * w.seq_len / prof.steps)
    return metrics_from_profile(prof, syn, cost)


@dataclass
class FitResult:
    cost: StepCostModel
    rows: list[dict]  # per target: target, predicted and relative error per column
    max_gated_error: float
    max_energy_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_gated_error <= self.tolerance


def fit_cost(targets: list[dict], workloads: dict[str, Workload], params=DEFAULT_FIT,
             base: StepCostModel | None = None, tolerance: float = 0.30) -> FitResult:
    """Least-squares fit of ``params`` to relative errors of time and energy columns.

    ``workloads`` maps a target's ``preset`` to its Workload.  Only the
    latency and throughput columns are gated by ``tolerance``.
    """
    base = base or StepCostModel()
    known = {f.name for f in fields(StepCostModel)}
    if not params or any(p not in known for p in params):
        raise ValueError(f"fit parameters must be a non-empty subset of {sorted(known)}")
    cols = GATED + ENERGY

    def model(theta):
        return replace(base, **{p: float(t) * _UNIT[p[0]] for p, t in zip(params, theta)})

    def residuals(theta):
        c = model(theta)
        res = []
        for r in targets:
            pred = metrics_row(predict(workloads[r["preset"]], r["schedule"], c))
            res += [(pred[COLUMNS[f][0]] - r[COLUMNS[f][0]]) / r[COLUMNS[f][0]] for f in cols]
        return np.asarray(res)

    x0 = np.ones(len(params))
    sol = least_squares(residuals, x0, bounds=(0.0, np.inf))
    cost = model(sol.x)
    rows, gated, energy = [], 0.0, 0.0
    for r in targets:
        pred = metrics_row(predict(workloads[r["preset"]], r["schedule"], cost))
        out = {"dataset": r["dataset"], "schedule": r["schedule"]}
        for f, (col, _) in COLUMNS.items():
            err = abs(pred[col] - r[col]) / abs(r[col])
            out[col] = r[col]
            out[col + "_fit"] = pred[col]
            out[col + "_relerr"] = err
            if f in GATED:
                gated = max(gated, err)
            elif f in ENERGY:
                energy = max(energy, err)
        rows.append(out)
    return FitResult(cost, rows, gated, energy, tolerance)


def default_workloads(seed: int = 0, probe_tokens: int = 8) -> dict[str, Workload]:
    """Random-init quantized networks of the small and large presets."""
    from ..model import LARGE, SMALL, init_network
    from ..quant import extract_integers, ptq, quantize_tokens
    from .coregraph import build_core_graph

    out = {}
    rng = np.random.default_rng(seed)
    for name, cfg in (("small", SMALL), ("large", LARGE)):
        net = init_network(cfg, seed)
        calib = rng.random((16, cfg.input_dim, 64))
        logging.getLogger("neurossm.quant").disabled = True
        try:
            fq = ptq(net, calib=calib)
        finally:
            logging.getLogger("neurossm.quant").disabled = False
        inet = extract_integers(fq)
        cg = build_core_graph(inet)
        tq = quantize_tokens(inet, rng.random((1, cfg.input_dim, probe_tokens)))
        out[name] = Workload(cg, cfg.seq_len, probe_synops(cg, tq))
    return out
