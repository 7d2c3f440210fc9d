"""Lock-step simulation of the core graph on algorithmic time-steps.

A token injected at step ``k`` is processed by stage ``s`` at step ``k + s``
and leaves the decoder at the end of step ``k + D - 1``.  All stages run on
the same integer arithmetic as the quantized reference, so outputs agree
bit for bit; the cost model only turns the per-step activity into time and
energy.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from ..intops import ACC_BITS, apply_factor, count_saturated, int_matmul, sat, ssm_step
from ..quant import ReduceStage, SSMStage
from .coregraph import Core, CoreGraph

log = logging.getLogger(__name__)

PIPELINED = "pipelined"
FALL_THROUGH = "fall_through"


@dataclass(frozen=True)
class InjectionSchedule:
    kind: str
    period: int

    def __post_init__(self):
        if self.period < 1:
            raise ValueError(f"period must be >= 1, got {self.period}")
        if self.kind not in (PIPELINED, FALL_THROUGH, "custom"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    @classmethod
    def pipelined(cls) -> "InjectionSchedule":
        return cls(PIPELINED, 1)

    @classmethod
    def fall_through(cls, depth: int) -> "InjectionSchedule":
        return cls(FALL_THROUGH, depth)

    @classmethod
    def for_graph(cls, kind: str, cg: CoreGraph) -> "InjectionSchedule":
        return cls.pipelined() if kind == PIPELINED else cls.fall_through(cg.depth)


@dataclass(frozen=True)
class StepCostModel:
    """Step duration ``t_step_base + t_per_active_core * cores + t_per_active_stage * stages``;
    step energy ``e_static_per_step + e_per_synop * synops + e_per_neuron_update * updates``."""

    t_step_base: float = 0.0
    t_per_active_core: float = 0.0
    t_per_active_stage: float = 0.0
    e_per_synop: float = 0.0
    e_per_neuron_update: float = 0.0
    e_static_per_step: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be a finite non-negative number, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepProfile:
    """Per-step activity; independent of the data except for synops."""

    active_stages: list[list[int]]
    n_cores: np.ndarray
    n_stages: np.ndarray
    updates: np.ndarray
    inject_steps: np.ndarray
    output_steps: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.active_stages)


def schedule_profile(cg: CoreGraph, n_tokens: int, sched: InjectionSchedule) -> StepProfile:
    if n_tokens < 1:
        raise ValueError("need at least one token")
    D, p = cg.depth, sched.period
    total = (n_tokens - 1) * p + D
    counts = cg.stage_core_counts()
    neurons = [sum(c.n_neurons for c in cg.cores_of(s)) for s in range(D)]
    active, n_cores, n_stages, updates = [], np.zeros(total, int), np.zeros(total, int), np.zeros(total, int)
    for k in range(total):
        act = [s for s in range(D) if k >= s and (k - s) % p == 0 and (k - s) // p < n_tokens]
        active.append(act)
        n_stages[k] = len(act)
        n_cores[k] = sum(counts[s] for s in act) + (1 if 0 in act else 0)
        updates[k] = sum(neurons[s] for s in act) + (cg.input_dim if 0 in act else 0)
    inject = np.arange(n_tokens) * p
    return StepProfile(active, n_cores, n_stages, updates, inject, inject + D - 1)


def step_durations(profile: StepProfile, cost: StepCostModel) -> np.ndarray:
    return cost.t_step_base + cost.t_per_active_core * profile.n_cores + cost.t_per_active_stage * profile.n_stages


@dataclass
class RunMetrics:
    """Token-level and sample-level cost figures (SI units)."""

    energy_per_token: float
    latency_per_token: float
    throughput: float  # tokens / s
    edp: float
    energy_per_sample: float
    latency_per_sample: float
    throughput_samples: float  # samples / s
    edp_per_sample: float
    steps: int
    tokens_per_sample: int
    samples: int
    synops_per_sample: float
    updates_per_sample: float
    saturations: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def compute_edp(energy: float, latency: float) -> float:
    if energy < 0 or latency < 0:
        raise ValueError("energy and latency must be non-negative")
    return energy * latency


def metrics_from_profile(profile: StepProfile, synops: np.ndarray, cost: StepCostModel, samples: int = 1,
                         saturations: int = 0) -> RunMetrics:
    """``synops`` is the per-step synaptic event count of one sample (mean over samples)."""
    dt = step_durations(profile, cost)
    end = np.cumsum(dt)
    start = end - dt
    n = len(profile.inject_steps)
    t_out = end[profile.output_steps]
    token_lat = float(np.mean(t_out - start[profile.inject_steps]))
    if n > 1 and t_out[-1] > t_out[0]:
        throughput = (n - 1) / float(t_out[-1] - t_out[0])
    else:
        throughput = 1.0 / token_lat if token_lat > 0 else float("inf")
    energy = float(np.sum(cost.e_static_per_step + cost.e_per_synop * synops
                          + cost.e_per_neuron_update * profile.updates))
    e_tok = energy / n
    sample_lat = float(t_out[-1])
    return RunMetrics(
        energy_per_token=e_tok, latency_per_token=token_lat, throughput=throughput,
        edp=compute_edp(e_tok, token_lat),
        energy_per_sample=energy, latency_per_sample=sample_lat, throughput_samples=throughput / n,
        edp_per_sample=compute_edp(energy, sample_lat),
        steps=profile.steps, tokens_per_sample=n, samples=samples,
        synops_per_sample=float(np.sum(synops)), updates_per_sample=float(np.sum(profile.updates)),
        saturations=saturations)


# ---------------------------------------------------------------- per-core dynamics

def _narrow(acc, st, relu):
    nsat = count_saturated(acc, ACC_BITS)
    out = apply_factor(sat(acc, ACC_BITS), st.out_factor)
    if relu:
        out = np.maximum(out, 0)
    nsat += count_saturated(out, st.out_bits)
    return sat(out, st.out_bits), nsat


class _CoreState:
    def __init__(self, core: Core, st, batch: int):
        self.core, self.st = core, st
        if isinstance(st, SSMStage):
            shape = (batch, core.hi - core.lo, st.a.shape[1])
            self.xr = np.zeros(shape, np.int64)
            self.xi = np.zeros(shape, np.int64)

    def step(self, v: np.ndarray) -> tuple[np.ndarray, int, int]:
        """Consume the previous stage's spikes; return (spikes, synops summed over batch, saturations)."""
        c, st, P = self.core, self.st, self.core.params
        if isinstance(st, SSMStage):
            u = v[:, c.lo:c.hi]  # (B, h)
            synops = int(np.sum((u != 0) @ P["b_nnz"]))
            self.xr, self.xi, p, nsat = ssm_step(self.xr, self.xi, u[..., None], P["ar"], P["ai"], P["br"], P["bi"],
                                                 P["cr"], P["ci"], st.a_shift, st.bu_factor, st.term_factor,
                                                 st.state_bits, st.out_bits)
            return p, synops, nsat
        if isinstance(st, ReduceStage):
            p = v[:, c.lo:c.hi, :]
            out, nsat = _narrow(p.sum(axis=-1) + P["bias_acc"], st, st.relu)
            return out, int(np.count_nonzero(p)), nsat
        synops = int(np.sum((v != 0) @ P["col_nnz"]))
        out, nsat = _narrow(int_matmul(v, P["w"]) + P["bias_acc"], st, st.relu)
        return out, synops, nsat


def run(cg: CoreGraph, tokens, sched: InjectionSchedule, cost: StepCostModel):
    """Simulate token codes (I, L) or (B, I, L); returns (integer logits (..., C, L), RunMetrics).

    Samples in a batch run as independent copies of the chip in lock-step;
    energy figures are per sample.
    """
    v = np.asarray(tokens)
    if not np.issubdtype(v.dtype, np.integer):
        raise TypeError("tokens must be integer codes on the spike grid (use quant.quantize_tokens)")
    squeeze = v.ndim == 2
    if squeeze:
        v = v[None]
    B, I, L = v.shape
    if I != cg.input_dim:
        raise ValueError(f"expected {cg.input_dim} input channels, got {I}")
    lim = 1 << (cg.inet.input_bits - 1)
    if v.min() < -lim or v.max() >= lim:
        raise ValueError(f"token codes exceed the {cg.inet.input_bits}-bit spike range")
    v = v.astype(np.int64)
    stages = cg.inet.stages
    cores = [[_CoreState(c, stages[s], B) for c in cg.cores_of(s)] for s in range(cg.depth)]
    profile = schedule_profile(cg, L, sched)
    buf: list[np.ndarray | None] = [None] * cg.depth
    synops = np.zeros(profile.steps, np.int64)
    out = np.zeros((B, stages[-1].size, L), np.int64)
    nsat = 0
    for k, act in enumerate(profile.active_stages):
        for s in reversed(act):  # descending, so buf[s - 1] still holds last step's spikes
            j = (k - s) // sched.period
            x = v[:, :, j] if s == 0 else buf[s - 1]
            parts = []
            for cs in cores[s]:
                y, syn, ns = cs.step(x)
                parts.append(y)
                synops[k] += syn
                nsat += ns
            buf[s] = np.concatenate(parts, axis=1)
            if s == cg.depth - 1:
                out[:, :, j] = buf[s]
    if nsat:
        log.warning("%d saturation events during simulation", nsat)
    metrics = metrics_from_profile(profile, synops / B, cost, samples=B, saturations=nsat)
    return (out[0] if squeeze else out), metrics


def benchmark_regimes(cg: CoreGraph, tokens, cost: StepCostModel,
                      kinds=(FALL_THROUGH, PIPELINED)) -> dict[str, RunMetrics]:
    """Run every schedule on the same quantized samples (B, I, L)."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 3 and tokens.shape[0] < 10:
        log.warning("benchmarking on %d samples; at least 10 are recommended", tokens.shape[0])
    return {k: run(cg, tokens, InjectionSchedule.for_graph(k, cg), cost)[1] for k in kinds}
