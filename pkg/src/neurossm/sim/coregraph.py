"""Placement of an integer network onto neurocores."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..quant import DenseStage, IntegerNetwork, ReduceStage, SSMStage

MAX_NEURONS_PER_CORE = 8192
WORK_BUDGET = 2560
# Placement work per neuron update: the complex state neuron does four
# multiplies, the others one.  Every synapse adds one unit.
NEURON_WORK = {"ssm_state": 4, "relu_bias": 1, "accumulator": 1}


class CapacityError(ValueError):
    pass


@dataclass
class Core:
    """A slice ``[lo, hi)`` of one stage's units (channels for ssm_state, neurons otherwise)."""

    core_id: int
    stage: int
    kind: str
    lo: int
    hi: int
    n_neurons: int
    n_synapses: int
    params: dict = field(default_factory=dict, repr=False)

    @property
    def work(self) -> int:
        return NEURON_WORK[self.kind] * self.n_neurons + self.n_synapses


@dataclass
class CoreGraph:
    """Cores in stage order behind one input pseudo-core (id 0)."""

    inet: IntegerNetwork
    cores: list[Core]
    stage_cores: list[list[int]]
    input_dim: int

    @property
    def depth(self) -> int:
        return len(self.stage_cores)

    @property
    def n_cores(self) -> int:
        return len(self.cores) + 1

    def stage_core_counts(self) -> list[int]:
        return [len(c) for c in self.stage_cores]

    def cores_of(self, stage: int) -> list[Core]:
        return [self.cores[i - 1] for i in self.stage_cores[stage]]


def _stage_units(st) -> tuple[int, int, int]:
    """(number of units, neurons per unit, synapses per unit)."""
    if isinstance(st, SSMStage):
        H, N = st.a.shape[:2]
        return H, N, N  # one input synapse per state neuron
    if isinstance(st, ReduceStage):
        return st.size, 1, st.group
    return st.size, 1, st.w.shape[1]


def _core_params(st, lo: int, hi: int) -> dict:
    if isinstance(st, SSMStage):
        a, b, c = (np.ascontiguousarray(x[lo:hi], dtype=np.int64) for x in (st.a, st.b, st.c))
        return {"ar": a[..., 0], "ai": a[..., 1], "br": b[..., 0], "bi": b[..., 1], "cr": c[..., 0], "ci": c[..., 1],
                "b_nnz": np.count_nonzero((b[..., 0] != 0) | (b[..., 1] != 0), axis=1)}
    bias_acc = st.bias_acc()[lo:hi]
    if isinstance(st, ReduceStage):
        return {"bias_acc": bias_acc}
    w = np.ascontiguousarray(st.w[lo:hi], dtype=np.int64)
    return {"w": w, "bias_acc": bias_acc, "col_nnz": np.count_nonzero(w, axis=0)}


def build_core_graph(inet: IntegerNetwork, max_neurons_per_core: int = MAX_NEURONS_PER_CORE,
                     work_budget: int = WORK_BUDGET, max_cores: int | None = None) -> CoreGraph:
    """Split each stage over ``max(ceil(work / budget), ceil(neurons / max))`` neighbouring cores.

    Units within a stage carry equal work, so contiguous near-equal slices are
    the balanced split.
    """
    if max_neurons_per_core < 1 or work_budget < 1:
        raise ValueError("max_neurons_per_core and work_budget must be positive")
    cores: list[Core] = []
    stage_cores = []
    for s, st in enumerate(inet.stages):
        n_units, npu, spu = _stage_units(st)
        if npu > max_neurons_per_core:
            raise CapacityError(f"stage {st.name}: a unit of {npu} neurons exceeds {max_neurons_per_core} per core")
        unit_work = NEURON_WORK[st.kind] * npu + spu
        k = max(math.ceil(n_units * unit_work / work_budget), math.ceil(n_units * npu / max_neurons_per_core))
        k = min(k, n_units)
        ids = []
        for chunk in np.array_split(np.arange(n_units), k):
            lo, hi = int(chunk[0]), int(chunk[-1]) + 1
            cores.append(Core(len(cores) + 1, s, st.kind, lo, hi, (hi - lo) * npu, (hi - lo) * spu,
                              _core_params(st, lo, hi)))
            ids.append(len(cores))
        stage_cores.append(ids)
    if max_cores is not None and len(cores) + 1 > max_cores:
        raise CapacityError(f"network needs {len(cores) + 1} cores, only {max_cores} available")
    return CoreGraph(inet, cores, stage_cores, inet.config.input_dim)
