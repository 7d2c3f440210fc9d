"""Numerics of a single diagonal SSM layer.

Shapes follow the (H, N) convention: H independent channels, each with N
complex diagonal states. All functions are pure and work on float64/complex128
by default; float32 inputs stay in single precision where numpy allows it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ZOH_EPS = 1e-12


@dataclass(frozen=True)
class DiagonalSSMParams:
    """Continuous-time diagonal SSM, one (a, b, c) triple per channel and state."""

    a: np.ndarray  # (H, N) complex, Re < 0
    b: np.ndarray  # (H, N) complex
    c: np.ndarray  # (H, N) complex
    dt: np.ndarray  # (H,) positive

    def __post_init__(self):
        a, b, c = (np.asarray(v) for v in (self.a, self.b, self.c))
        dt = np.asarray(self.dt)
        if a.ndim != 2 or a.shape != b.shape or a.shape != c.shape:
            raise ValueError(f"a, b, c must share an (H, N) shape, got {a.shape}, {b.shape}, {c.shape}")
        if dt.shape != (a.shape[0],):
            raise ValueError(f"dt must have shape ({a.shape[0]},), got {dt.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(np.shape(self.a))

    def validate(self) -> None:
        if np.any(np.real(self.a) >= 0):
            raise ValueError("unstable SSM: every Re(a) must be negative")
        if np.any(np.asarray(self.dt) <= 0):
            raise ValueError("dt must be strictly positive")


@dataclass(frozen=True)
class DiscreteSSMParams:
    a_bar: np.ndarray  # (H, N) complex
    b_bar: np.ndarray  # (H, N) complex
    c_bar: np.ndarray  # (H, N) complex

    def __post_init__(self):
        shapes = {np.shape(self.a_bar), np.shape(self.b_bar), np.shape(self.c_bar)}
        if len(shapes) != 1 or len(np.shape(self.a_bar)) != 2:
            raise ValueError(f"a_bar, b_bar, c_bar must share an (H, N) shape, got {shapes}")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(np.shape(self.a_bar))


@dataclass(frozen=True)
class SSMState:
    x: np.ndarray  # (H, N) complex, or (..., H, N) for batched use

    @classmethod
    def zeros(cls, shape, dtype=np.complex128) -> "SSMState":
        return cls(np.zeros(shape, dtype=dtype))


@dataclass(frozen=True)
class Kernel:
    k: np.ndarray  # (H, L) real

    @property
    def length(self) -> int:
        return np.shape(self.k)[-1]


def discretize(params: DiagonalSSMParams) -> DiscreteSSMParams:
    """Zero-order-hold discretization, entrywise on the diagonal.

    a_bar = exp(dt * a), b_bar = (a_bar - 1) / a * b, c_bar = c.
    """
    dt = np.asarray(params.dt)
    if np.any(dt <= 0):
        raise ValueError("dt must be strictly positive")
    a = np.asarray(params.a)
    if np.any(np.abs(a) < ZOH_EPS):
        raise ValueError(f"|a| < {ZOH_EPS}: zero-order hold is singular at a = 0")
    dta = dt[:, None] * a
    a_bar = np.exp(dta)
    # expm1 keeps b_bar accurate when dt * a is tiny
    b_bar = np.expm1(dta) / a * np.asarray(params.b)
    return DiscreteSSMParams(a_bar=a_bar, b_bar=b_bar, c_bar=np.asarray(params.c))


def readout(c_bar: np.ndarray, x: np.ndarray) -> np.ndarray:
    """y[..., h] = 2 Re(sum_n c[h, n] x[..., h, n])."""
    return 2.0 * np.real(np.sum(c_bar * x, axis=-1))


def recurrent_step(d: DiscreteSSMParams, state: SSMState, u) -> tuple[SSMState, np.ndarray]:
    """One step of x' = a_bar x + b_bar u, y = 2 Re(c_bar x').

    ``u`` has shape (H,) or (..., H) matching any leading batch axes of the state.
    The input state is not modified.
    """
    x = np.asarray(state.x)
    u = np.asarray(u)
    if x.shape[-2:] != d.shape:
        raise ValueError(f"state shape {x.shape} does not match parameters {d.shape}")
    if u.shape[-1] != d.shape[0] or u.shape[:-1] != x.shape[:-2]:
        raise ValueError(f"input shape {u.shape} does not match state {x.shape}")
    x_new = d.a_bar * x + d.b_bar * u[..., None]
    return SSMState(x_new), readout(d.c_bar, x_new)


def run_recurrence(d: DiscreteSSMParams, u: np.ndarray, state: SSMState | None = None):
    """Apply recurrent_step along the last axis of ``u`` with shape (..., H, L).

    Returns (y, final_state) with y of the same shape as u.
    """
    u = np.asarray(u)
    H, L = u.shape[-2:]
    if H != d.shape[0]:
        raise ValueError(f"input has {H} channels, parameters have {d.shape[0]}")
    if state is None:
        dtype = np.result_type(d.a_bar, u, np.complex64)
        state = SSMState.zeros(u.shape[:-2] + d.shape, dtype=dtype)
    y = np.empty(u.shape, dtype=np.result_type(u.dtype, np.real(d.a_bar).dtype))
    for k in range(L):
        state, y[..., k] = recurrent_step(d, state, u[..., k])
    return y, state


def vandermonde(a_bar: np.ndarray, L: int) -> np.ndarray:
    """Powers a_bar**l for l in [0, L), shape (H, N, L), via one broadcast power."""
    return np.power(a_bar[..., None], np.arange(L))


def materialize_kernel(d: DiscreteSSMParams, L: int) -> Kernel:
    """k[h, l] = 2 Re(sum_n c_bar[h,n] a_bar[h,n]**l b_bar[h,n])."""
    if L < 1:
        raise ValueError(f"kernel length must be positive, got {L}")
    weights = d.c_bar * d.b_bar
    k = 2.0 * np.real(np.einsum("hn,hnl->hl", weights, vandermonde(d.a_bar, L)))
    return Kernel(k)


def fft_length(L: int) -> int:
    """Smallest power of two >= 2L, so circular convolution equals linear."""
    return 1 << int(np.ceil(np.log2(2 * L)))


def conv_apply(kernel: Kernel, u: np.ndarray) -> np.ndarray:
    """Causal convolution per channel, y[h,k] = sum_{j<=k} k[h,j] u[h,k-j].

    ``u`` has shape (..., H, L); the kernel must have length L.
    """
    u = np.asarray(u)
    k = np.asarray(kernel.k)
    L = u.shape[-1]
    if k.shape[-1] != L:
        raise ValueError(f"kernel length {k.shape[-1]} does not match sequence length {L}")
    if k.shape[-2] != u.shape[-2]:
        raise ValueError(f"kernel has {k.shape[-2]} channels, input has {u.shape[-2]}")
    n = fft_length(L)
    y = np.fft.irfft(np.fft.rfft(u, n) * np.fft.rfft(k, n), n)[..., :L]
    return y.astype(np.result_type(u.dtype, k.dtype), copy=False)


def direct_conv(kernel: Kernel, u: np.ndarray) -> np.ndarray:
    """O(L^2) causal convolution, kept as an oracle for conv_apply."""
    k = np.asarray(kernel.k)
    u = np.asarray(u)
    L = u.shape[-1]
    y = np.zeros(np.broadcast_shapes(u.shape, k.shape[:-1] + (L,)), dtype=np.result_type(u, k))
    for t in range(L):
        y[..., t] = np.sum(k[..., : t + 1][..., ::-1] * u[..., : t + 1], axis=-1)
    return y


def state_bound(d: DiscreteSSMParams, u_max: float) -> float:
    """Upper bound on |x| for any input with |u| <= u_max (geometric series)."""
    rho = float(np.max(np.abs(d.a_bar)))
    if rho >= 1:
        return float("inf")
    return u_max * float(np.max(np.abs(d.b_bar))) / (1.0 - rho)
