"""Fixed-point quantization: fake quantization, bound selection, PTQ and
extraction of the pure-integer network.

A b-bit tensor with bound ``x_max`` uses the scale ``s = 2**(b-1) / x_max``
and stores ``n = clamp(floor(x * s))``. The floor is evaluated exactly in
rational arithmetic, and the dequantized value ``n / s`` is rounded toward
+inf so that quantizing it again returns the same ``n``.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import container
from .intops import ACC_BITS, apply_factor, count_saturated, int_matmul, sat, ssm_scan
from .model import Network, NetworkConfig
from .ssm import discretize

log = logging.getLogger(__name__)

INT_MAGIC = b"NSSMINTN"
BOUND_FLOOR = 1e-8
ROLES = ("ssm_a_bar", "ssm_b_bar", "ssm_c", "weight", "bias", "activation")


class GridError(ValueError):
    """A value that should sit on its quantization grid does not."""


@dataclass(frozen=True)
class QuantSpec:
    weight_bits: int = 8
    spike_bits: int = 24
    state_bits: int = 24
    descale_bits: int = 16

    def __post_init__(self):
        for f in dataclasses.fields(self):
            _check_bits(getattr(self, f.name))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _check_bits(b: int) -> None:
    if not 2 <= int(b) <= 32:
        raise ValueError(f"bit width must be in [2, 32], got {b}")


# ---------------------------------------------------------------- exact floor

_SPLIT = 134217729.0  # 2**27 + 1


def _two_prod(a, b):
    """Error-free product: a * b == p + e exactly (Dekker)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    p = a * b

    def split(x):
        t = _SPLIT * x
        hi = t - (t - x)
        return hi, x - hi

    ah, al = split(a)
    bh, bl = split(b)
    e = ((ah * bh - p) + ah * bl + al * bh) + al * bl
    return p, e


def _exact_floor_div(y, d):
    """floor(y / d) for float64 y and positive float64 d, evaluated exactly."""
    y = np.asarray(y, dtype=np.float64)
    f = np.floor(y / d)
    # sign of y - f*d, exactly; y and f*d are close enough for y - p to be exact
    p, e = _two_prod(f, d)
    low = (y - p) - e < 0
    f = np.where(low, f - 1, f)
    p, e = _two_prod(f + 1, d)
    high = (y - p) - e >= 0
    return np.where(high, f + 1, f)


def quantize(x, bits: int, x_max: float) -> np.ndarray:
    """Integer codes clamp(floor(x * 2**(bits-1) / x_max)) as int64."""
    _check_bits(bits)
    if not x_max > 0 or not math.isfinite(x_max):
        raise ValueError(f"x_max must be positive and finite, got {x_max}")
    x = np.asarray(x, dtype=np.float64)
    n = _exact_floor_div(np.ldexp(x, bits - 1), float(x_max))
    lo, hi = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return np.clip(n, lo, hi).astype(np.int64)


def dequantize(n, bits: int, x_max: float) -> np.ndarray:
    """n / s rounded toward +inf, which keeps fake quantization idempotent."""
    p, e = _two_prod(np.asarray(n, dtype=np.float64), float(x_max))
    p = np.where(e > 0, np.nextafter(p, np.inf), p)
    return np.ldexp(p, -(bits - 1))


def fake_quantize(x, bits: int, x_max: float) -> np.ndarray:
    """floor(x * s) / s with s = 2**(bits-1) / x_max, integer clamped to the signed range."""
    return dequantize(quantize(x, bits, x_max), bits, x_max)


def saturation_mask(x, bits: int, x_max: float) -> np.ndarray:
    """True where fake_quantize clamped the integer code."""
    x = np.asarray(x, dtype=np.float64)
    n = _exact_floor_div(np.ldexp(x, bits - 1), float(x_max))
    return (n < -(2 ** (bits - 1))) | (n > 2 ** (bits - 1) - 1)


def ste_gradient(upstream, x, bits: int, x_max: float) -> np.ndarray:
    """Straight-through gradient: identity, zeroed where the forward clamped."""
    return np.where(saturation_mask(x, bits, x_max), 0.0, upstream)


def quantize_factor(d: float, bits: int = 16) -> tuple[int, int]:
    """Quantize a positive factor to ``m * 2**-shift`` with a ``bits``-bit mantissa.

    The bound is the smallest power of two strictly above ``d``, so the
    mantissa lands in [2**(bits-2), 2**(bits-1)) and the scale is a pure shift.
    """
    if d < 0 or not math.isfinite(d):
        raise ValueError(f"descale factor must be finite and non-negative, got {d}")
    if d == 0:
        return 0, 0
    e = math.floor(math.log2(d)) + 1
    if 2.0 ** (e - 1) > d:  # guard log2 rounding
        e -= 1
    elif 2.0 ** e <= d:
        e += 1
    m = int(quantize(d, bits, 2.0 ** e))
    return m, bits - 1 - e


def factor_value(factor: tuple[int, int]) -> float:
    m, shift = factor
    return math.ldexp(m, -shift)


# ---------------------------------------------------------------- bounds

def select_bound(role: str, x) -> float:
    """Quantization bound for a tensor of the given role.

    a_bar has the analytic bound 1 (stable discrete poles); everything else
    uses the max-abs of the tensor (real and imaginary parts pooled), floored
    at 1e-8. For activations, pass the calibration data seen so far.
    """
    if role not in ROLES:
        raise ValueError(f"unknown tensor role {role!r}")
    if role == "ssm_a_bar":
        return 1.0
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("cannot select a bound for an empty tensor")
    m = float(np.max(np.abs(_as_real_pair(x))))
    return max(m, BOUND_FLOOR)


def _as_real_pair(x):
    x = np.asarray(x)
    return np.stack([x.real, x.imag], axis=-1) if np.iscomplexobj(x) else x


# ---------------------------------------------------------------- fake-quantized network

@dataclass
class FakeQuantTensor:
    """Real values that lie on the grid of (bits, x_max). Complex tensors carry a trailing (re, im) axis."""

    values: np.ndarray
    bits: int
    x_max: float
    is_complex: bool = False

    @classmethod
    def from_real(cls, x, bits: int, x_max: float) -> "FakeQuantTensor":
        cplx = np.iscomplexobj(x)
        return cls(fake_quantize(_as_real_pair(x), bits, x_max), bits, float(x_max), cplx)

    @property
    def scale(self) -> float:
        return 2.0 ** (self.bits - 1) / self.x_max

    def complex_values(self) -> np.ndarray:
        return self.values[..., 0] + 1j * self.values[..., 1] if self.is_complex else self.values


@dataclass
class QuantizedTensor:
    """Integer payload plus its scale and the 16-bit quantized descale 1/s."""

    q: np.ndarray
    bits: int
    x_max: float
    descale_bits: int = 16

    @property
    def scale(self) -> float:
        return 2.0 ** (self.bits - 1) / self.x_max

    @property
    def descale_factor(self) -> tuple[int, int]:
        return quantize_factor(1.0 / self.scale, self.descale_bits)

    @property
    def descale(self) -> float:
        return factor_value(self.descale_factor)

    def values(self) -> np.ndarray:
        return dequantize(self.q, self.bits, self.x_max)


def tensor_roles(config: NetworkConfig) -> dict[str, str]:
    roles = {"encoder.w": "weight", "encoder.b": "bias"}
    for i in range(config.num_blocks):
        p = f"blocks.{i}."
        roles.update({p + "a_bar": "ssm_a_bar", p + "b_bar": "ssm_b_bar", p + "c": "ssm_c",
                      p + "ssm_bias": "bias", p + "mix.w": "weight", p + "mix.b": "bias"})
    roles.update({"decoder.w": "weight", "decoder.b": "bias"})
    return roles


def activation_names(config: NetworkConfig) -> list[str]:
    names = ["input", "encoder"]
    for i in range(config.num_blocks):
        names += [f"blocks.{i}.state", f"blocks.{i}.term", f"blocks.{i}.relu", f"blocks.{i}.mix"]
    return names + ["logits"]


@dataclass
class FakeQuantNetwork:
    """Network after PTQ: discretized SSM parameters, all values on their integer grids."""

    config: NetworkConfig
    spec: QuantSpec
    tensors: dict[str, FakeQuantTensor]
    act_bounds: dict[str, float]
    seed: int | None = None

    def bits_for(self, role: str) -> int:
        return self.spec.state_bits if role.startswith("ssm_") else self.spec.weight_bits


def float_tensors(net: Network) -> dict[str, np.ndarray]:
    """Real-valued tensors to quantize, with SSMs already discretized."""
    out = {"encoder.w": net.encoder_w, "encoder.b": net.encoder_b}
    for i, (blk, d) in enumerate(zip(net.blocks, net.discrete)):
        p = f"blocks.{i}."
        out.update({p + "a_bar": d.a_bar, p + "b_bar": d.b_bar, p + "c": d.c_bar,
                    p + "ssm_bias": blk.ssm_bias, p + "mix.w": blk.mix_w, p + "mix.b": blk.mix_b})
    out.update({"decoder.w": net.decoder_w, "decoder.b": net.decoder_b})
    return out


class ActivationCalibrator:
    """Running max-abs per activation; merge() combines shards (max is associative)."""

    def __init__(self, names: Iterable[str]):
        self.maxima = {n: 0.0 for n in names}
        self.samples = 0

    def update(self, name: str, x) -> None:
        x = np.asarray(x)
        if x.size:
            self.maxima[name] = max(self.maxima[name], float(np.max(np.abs(_as_real_pair(x)))))

    def merge(self, other: "ActivationCalibrator") -> "ActivationCalibrator":
        out = ActivationCalibrator(self.maxima)
        out.maxima = {k: max(self.maxima.get(k, 0.0), other.maxima.get(k, 0.0))
                      for k in set(self.maxima) | set(other.maxima)}
        out.samples = self.samples + other.samples
        return out

    def bounds(self) -> dict[str, float]:
        return {k: max(v, BOUND_FLOOR) for k, v in self.maxima.items()}


def calibrate(net: Network, tokens: np.ndarray, chunk: int = 64) -> ActivationCalibrator:
    """Max-abs of every spiking activation of the float network over ``tokens`` (B, I, L)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 3 or len(tokens) == 0:
        raise ValueError("calibration needs a non-empty (B, I, L) token array")
    cal = ActivationCalibrator(activation_names(net.config))
    for start in range(0, len(tokens), chunk):
        u = tokens[start:start + chunk]
        cal.update("input", u)
        h = np.einsum("hi,bil->bhl", net.encoder_w, u) + net.encoder_b[:, None]
        cal.update("encoder", h)
        for i, (blk, d) in enumerate(zip(net.blocks, net.discrete)):
            B, H, L = h.shape
            x = np.zeros((B, H, net.config.state_dim), dtype=np.complex128)
            y = np.empty((B, H, L))
            xmax = tmax = 0.0
            for t in range(L):
                x = d.a_bar * x + d.b_bar * h[:, :, t, None]
                term = 2.0 * np.real(d.c_bar * x)
                y[:, :, t] = term.sum(-1)
                xmax = max(xmax, float(np.max(np.abs(x.real))), float(np.max(np.abs(x.imag))))
                tmax = max(tmax, float(np.max(np.abs(term))))
            cal.maxima[f"blocks.{i}.state"] = max(cal.maxima[f"blocks.{i}.state"], xmax)
            cal.maxima[f"blocks.{i}.term"] = max(cal.maxima[f"blocks.{i}.term"], tmax)
            r = np.maximum(y + blk.ssm_bias[:, None], 0)
            cal.update(f"blocks.{i}.relu", r)
            h = np.maximum(np.einsum("gh,bhl->bgl", blk.mix_w, r) + blk.mix_b[:, None], 0)
            cal.update(f"blocks.{i}.mix", h)
        cal.update("logits", np.einsum("ch,bhl->bcl", net.decoder_w, h) + net.decoder_b[:, None])
        cal.samples += len(u)
    return cal


def ptq(net, spec: QuantSpec | None = None, calib=None, act_bounds: dict | None = None) -> FakeQuantNetwork:
    """Post-training quantization.

    ``net`` is a float Network (weights and biases at weight_bits with max-abs
    bounds, discretized a_bar/b_bar/c at state_bits) or an existing
    FakeQuantNetwork, which is re-quantized on its own grids and therefore
    returned unchanged. Activation bounds come from ``calib`` tokens (B, I, L)
    unless ``act_bounds`` is given.
    """
    if isinstance(net, FakeQuantNetwork):
        tensors = {k: FakeQuantTensor(fake_quantize(t.values, t.bits, t.x_max), t.bits, t.x_max, t.is_complex)
                   for k, t in net.tensors.items()}
        return FakeQuantNetwork(net.config, spec or net.spec, tensors, dict(net.act_bounds), net.seed)
    spec = spec or QuantSpec()
    if act_bounds is None:
        if calib is None or len(calib) == 0:
            raise ValueError("PTQ needs a non-empty calibration set")
        if len(calib) < 256:
            log.warning("calibrating activation bounds on only %d samples", len(calib))
        act_bounds = calibrate(net, calib).bounds()
    roles = tensor_roles(net.config)
    tensors = {}
    for name, x in float_tensors(net).items():
        role = roles[name]
        bits = spec.state_bits if role.startswith("ssm_") else spec.weight_bits
        tensors[name] = FakeQuantTensor.from_real(x, bits, select_bound(role, x))
    return FakeQuantNetwork(net.config, spec, tensors, dict(act_bounds), net.seed)


def grid_violations(t: FakeQuantTensor) -> int:
    """Entries whose value is not exactly dequantize(quantize(value))."""
    return int(np.count_nonzero(fake_quantize(t.values, t.bits, t.x_max) != t.values))


def check_grid(fq: FakeQuantNetwork) -> None:
    for name, t in fq.tensors.items():
        bad = grid_violations(t)
        if bad:
            raise GridError(f"{name}: {bad} values off the {t.bits}-bit grid (was PTQ skipped?)")


# ---------------------------------------------------------------- integer network

@dataclass
class DenseStage:
    """relu_bias or accumulator neurons fed by a dense integer synapse matrix."""

    name: str
    kind: str  # "relu_bias" | "accumulator"
    w: np.ndarray  # (out, in) int
    bias: np.ndarray  # (out,) int, weight_bits
    bias_factor: tuple[int, int]  # bias code -> accumulator units
    out_factor: tuple[int, int]  # accumulator -> output spike units
    relu: bool
    out_bits: int
    out_bound: float

    @property
    def size(self) -> int:
        return self.w.shape[0]

    def bias_acc(self) -> np.ndarray:
        return apply_factor(self.bias, self.bias_factor)


@dataclass
class ReduceStage:
    """relu_bias neurons h summing the N readout terms of channel h (unit synapses)."""

    name: str
    group: int  # N
    bias: np.ndarray  # (H,) int
    bias_factor: tuple[int, int]
    out_factor: tuple[int, int]
    out_bits: int
    out_bound: float
    relu: bool = True
    kind: str = "relu_bias"

    @property
    def size(self) -> int:
        return self.bias.shape[0]

    def bias_acc(self) -> np.ndarray:
        return apply_factor(self.bias, self.bias_factor)


@dataclass
class SSMStage:
    """ssm_state neurons (h, n): complex integer state with in-neuron recurrence."""

    name: str
    a: np.ndarray  # (H, N, 2) int, state_bits, bound 1 -> shift
    b: np.ndarray  # (H, N, 2) int
    c: np.ndarray  # (H, N, 2) int
    a_shift: int
    bu_factor: tuple[int, int]  # b*u product -> state units
    term_factor: tuple[int, int]  # c*x product -> readout term units (includes the factor 2)
    state_bits: int
    out_bits: int
    state_bound: float
    out_bound: float
    kind: str = "ssm_state"

    @property
    def size(self) -> int:
        return self.a.shape[0] * self.a.shape[1]


@dataclass
class IntegerNetwork:
    config: NetworkConfig
    spec: QuantSpec
    input_bound: float
    stages: list = field(default_factory=list)
    seed: int | None = None

    @property
    def depth(self) -> int:
        return len(self.stages)

    @property
    def input_bits(self) -> int:
        return self.spec.spike_bits

    @property
    def logit_bound(self) -> float:
        return self.stages[-1].out_bound


def _spike_scale(bits: int, bound: float) -> float:
    return 2.0 ** (bits - 1) / bound


def extract_integers(fq: FakeQuantNetwork, spec: QuantSpec | None = None) -> IntegerNetwork:
    """Integer payloads q = round(v * s) plus per-stage descale factors.

    Raises GridError when a tensor is off its grid, which means the input
    did not come out of ptq/qaft.
    """
    if not isinstance(fq, FakeQuantNetwork):
        raise GridError("extract_integers needs a fake-quantized network; run ptq first")
    check_grid(fq)
    spec = spec or fq.spec
    cfg, ab = fq.config, fq.act_bounds
    sb, db = spec.spike_bits, spec.descale_bits
    T = fq.tensors

    def codes(name):
        t = T[name]
        return quantize(t.values, t.bits, t.x_max), t.scale

    def q16(x):
        return quantize_factor(x, db)

    def dense(name, prefix, in_scale, out_name, relu, kind="relu_bias"):
        w, sw = codes(prefix + ".w")
        b, sbias = codes(prefix + ".b")
        acc_scale = sw * in_scale
        out_scale = _spike_scale(sb, ab[out_name])
        return DenseStage(name, kind, w, b, q16(acc_scale / sbias), q16(out_scale / acc_scale),
                          relu, sb, ab[out_name]), out_scale

    stages = []
    scale = _spike_scale(sb, ab["input"])
    st, scale = dense("encoder", "encoder", scale, "encoder", relu=False)
    stages.append(st)
    for i in range(cfg.num_blocks):
        p = f"blocks.{i}."
        a, sa = codes(p + "a_bar")
        b, sbb = codes(p + "b_bar")
        c, sc = codes(p + "c")
        a_shift = int(round(math.log2(sa)))
        if 2.0 ** a_shift != sa:
            raise GridError(f"{p}a_bar scale {sa} is not a power of two")
        sx = _spike_scale(spec.state_bits, ab[p + "state"])
        sp = _spike_scale(sb, ab[p + "term"])
        stages.append(SSMStage(p + "ssm", a, b, c, a_shift, q16(sx / (sbb * scale)), q16(2.0 * sp / (sc * sx)),
                                spec.state_bits, sb, ab[p + "state"], ab[p + "term"]))
        bias, sbias = codes(p + "ssm_bias")
        sr = _spike_scale(sb, ab[p + "relu"])
        stages.append(ReduceStage(p + "relu", cfg.state_dim, bias, q16(sp / sbias), q16(sr / sp), sb, ab[p + "relu"]))
        st, scale = dense(p + "mix", p + "mix", sr, p + "mix", relu=True)
        stages.append(st)
    st, _ = dense("decoder", "decoder", scale, "logits", relu=False, kind="accumulator")
    stages.append(st)
    return IntegerNetwork(cfg, spec, ab["input"], stages, fq.seed)



# ---------------------------------------------------------------- integer forward

def quantize_tokens(inet: IntegerNetwork, tokens) -> np.ndarray:
    """Real tokens (..., I, L) to spike_bits integer codes."""
    return quantize(tokens, inet.input_bits, inet.input_bound)


def dense_forward(st: DenseStage, v: np.ndarray) -> tuple[np.ndarray, int]:
    """v: (..., in) int64 -> (..., out) int64 spikes."""
    acc = int_matmul(v, st.w) + st.bias_acc()
    nsat = count_saturated(acc, ACC_BITS)
    out = apply_factor(sat(acc, ACC_BITS), st.out_factor)
    if st.relu:  # rectify first so clipped negatives are not counted as saturation
        out = np.maximum(out, 0)
    nsat += count_saturated(out, st.out_bits)
    return sat(out, st.out_bits), nsat


def reduce_forward(st: ReduceStage, p_sum: np.ndarray) -> tuple[np.ndarray, int]:
    """p_sum: (..., H) int64 sum of readout terms per channel."""
    acc = p_sum + st.bias_acc()
    nsat = count_saturated(acc, ACC_BITS)
    out = apply_factor(sat(acc, ACC_BITS), st.out_factor)
    if st.relu:  # rectify first so clipped negatives are not counted as saturation
        out = np.maximum(out, 0)
    nsat += count_saturated(out, st.out_bits)
    return sat(out, st.out_bits), nsat


def ssm_forward(st: SSMStage, u: np.ndarray, state=None):
    """Integer recurrence over u: (B, H, L) int64; returns (sum_n terms (B, H, L), final state, saturations)."""
    u = np.ascontiguousarray(u, dtype=np.int64)
    B, H, L = u.shape
    N = st.a.shape[1]
    if state is None:
        xr = np.zeros((B, H, N), dtype=np.int64)
        xi = np.zeros((B, H, N), dtype=np.int64)
    else:
        xr, xi = (np.ascontiguousarray(s, dtype=np.int64).copy() for s in state)
    out = np.empty((B, H, L), dtype=np.int64)
    a, b, c = (np.ascontiguousarray(x, dtype=np.int64) for x in (st.a, st.b, st.c))
    nsat = ssm_scan(u, a[..., 0], a[..., 1], b[..., 0], b[..., 1], c[..., 0], c[..., 1], st.a_shift,
                    st.bu_factor[0], st.bu_factor[1], st.term_factor[0], st.term_factor[1],
                    st.state_bits, st.out_bits, out, xr, xi)
    return out, (xr, xi), int(nsat)


def integer_forward(inet: IntegerNetwork, tokens_q: np.ndarray, trace: dict | None = None) -> np.ndarray:
    """Reference integer forward: (B, I, L) token codes -> (B, C, L) integer logits.

    This is the fake-quantized network's forward pass; the simulator must
    reproduce it exactly. ``trace`` collects each stage's (B, size, L) output
    and a ``saturations`` count.
    """
    v = np.asarray(tokens_q, dtype=np.int64)
    squeeze = v.ndim == 2
    if squeeze:
        v = v[None]
    if v.shape[1] != inet.config.input_dim:
        raise ValueError(f"expected (B, {inet.config.input_dim}, L) tokens, got {v.shape}")
    nsat_total = 0
    h = np.moveaxis(v, 1, 2)  # (B, L, I)
    for st in inet.stages:
        if isinstance(st, SSMStage):
            s, _, nsat = ssm_forward(st, np.moveaxis(h, 1, 2))
            h = np.moveaxis(s, 1, 2)  # summed terms feed the reduce stage
            if trace is not None:
                trace[st.name + ".sum"] = s
        elif isinstance(st, ReduceStage):
            h, nsat = reduce_forward(st, h)
        else:
            h, nsat = dense_forward(st, h)
        nsat_total += nsat
        if trace is not None and not isinstance(st, SSMStage):
            trace[st.name] = np.moveaxis(h, 1, 2)
    if trace is not None:
        trace["saturations"] = nsat_total
    out = np.moveaxis(h, 1, 2)
    return out[0] if squeeze else out


def quantized_forward(fq, tokens, chunk: int = 64) -> np.ndarray:
    """Fake-quantized forward in real units: (B, I, L) tokens -> (B, C, L) logits."""
    inet = fq if isinstance(fq, IntegerNetwork) else extract_integers(fq)
    tokens = np.asarray(tokens)
    outs = [integer_forward(inet, quantize_tokens(inet, tokens[i:i + chunk]))
            for i in range(0, len(tokens), chunk)]
    return dequantize(np.concatenate(outs), inet.spec.spike_bits, inet.logit_bound)


def quantized_predict(fq, tokens, chunk: int = 64) -> np.ndarray:
    from .model import pool_logits

    inet = fq if isinstance(fq, IntegerNetwork) else extract_integers(fq)
    preds = []
    for i in range(0, len(tokens), chunk):
        logits = integer_forward(inet, quantize_tokens(inet, np.asarray(tokens[i:i + chunk])))
        pooled = logits[..., -1] if inet.config.readout == "last" else logits.sum(axis=-1)
        preds.append(np.argmax(pooled, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


# ---------------------------------------------------------------- serialization

def _stage_meta(st) -> dict:
    d = {"type": type(st).__name__, "name": st.name, "kind": st.kind, "out_bits": st.out_bits,
         "out_bound": st.out_bound}
    if isinstance(st, DenseStage):
        d.update(relu=st.relu, bias_factor=list(st.bias_factor), out_factor=list(st.out_factor))
    elif isinstance(st, ReduceStage):
        d.update(relu=st.relu, group=st.group, bias_factor=list(st.bias_factor), out_factor=list(st.out_factor))
    else:
        d.update(a_shift=st.a_shift, bu_factor=list(st.bu_factor), term_factor=list(st.term_factor),
                 state_bits=st.state_bits, state_bound=st.state_bound)
    return d


def save_integer_network(inet: IntegerNetwork, path) -> None:
    tensors, bits = {}, {}
    spec = inet.spec
    for st in inet.stages:
        if isinstance(st, SSMStage):
            for k in "abc":
                tensors[f"{st.name}.{k}"] = getattr(st, k)
                bits[f"{st.name}.{k}"] = spec.state_bits
        else:
            if isinstance(st, DenseStage):
                tensors[st.name + ".w"] = st.w
                bits[st.name + ".w"] = spec.weight_bits
            tensors[st.name + ".bias"] = st.bias
            bits[st.name + ".bias"] = spec.weight_bits
    meta = {"spec": spec.to_dict(), "input_bound": inet.input_bound, "seed": inet.seed,
            "stages": [_stage_meta(st) for st in inet.stages]}
    container.write_container(path, INT_MAGIC, tensors, inet.config.to_dict(), meta, bits)


def load_integer_network(path) -> IntegerNetwork:
    _, tensors, config, meta, _ = container.read_container(path, INT_MAGIC)
    spec = QuantSpec(**meta["spec"])
    stages = []
    for d in meta["stages"]:
        t = {k: v.astype(np.int64) for k, v in tensors.items() if k.startswith(d["name"] + ".")}
        if d["type"] == "DenseStage":
            stages.append(DenseStage(d["name"], d["kind"], t[d["name"] + ".w"], t[d["name"] + ".bias"],
                                     tuple(d["bias_factor"]), tuple(d["out_factor"]), d["relu"],
                                     d["out_bits"], d["out_bound"]))
        elif d["type"] == "ReduceStage":
            stages.append(ReduceStage(d["name"], d["group"], t[d["name"] + ".bias"], tuple(d["bias_factor"]),
                                      tuple(d["out_factor"]), d["out_bits"], d["out_bound"], d["relu"]))
        else:
            stages.append(SSMStage(d["name"], t[d["name"] + ".a"], t[d["name"] + ".b"], t[d["name"] + ".c"],
                                   d["a_shift"], tuple(d["bu_factor"]), tuple(d["term_factor"]),
                                   d["state_bits"], d["out_bits"], d["state_bound"], d["out_bound"]))
    return IntegerNetwork(NetworkConfig.from_dict(config), spec, meta["input_bound"], stages, meta.get("seed"))


def save_fake_quant(fq: FakeQuantNetwork, path) -> None:
    """Stores integer codes; values are rebuilt exactly from (code, bits, x_max)."""
    tensors, bits, bounds, cplx = {}, {}, {}, []
    for name, t in fq.tensors.items():
        tensors[name] = quantize(t.values, t.bits, t.x_max)
        bits[name] = t.bits
        bounds[name] = t.x_max
        if t.is_complex:
            cplx.append(name)
    meta = {"kind": "fake_quant", "spec": fq.spec.to_dict(), "x_max": bounds, "complex": cplx,
            "act_bounds": fq.act_bounds, "seed": fq.seed}
    container.write_container(path, INT_MAGIC, tensors, fq.config.to_dict(), meta, bits)


def load_fake_quant(path) -> FakeQuantNetwork:
    _, tensors, config, meta, bits = container.read_container(path, INT_MAGIC)
    if meta.get("kind") != "fake_quant":
        raise container.ContainerError(f"{path}: not a fake-quantized checkpoint")
    fq_tensors = {}
    for name, q in tensors.items():
        b, xm = bits[name], meta["x_max"][name]
        fq_tensors[name] = FakeQuantTensor(dequantize(q.astype(np.int64), b, xm), b, xm, name in meta["complex"])
    return FakeQuantNetwork(NetworkConfig.from_dict(config), QuantSpec(**meta["spec"]), fq_tensors,
                            meta["act_bounds"], meta.get("seed"))
