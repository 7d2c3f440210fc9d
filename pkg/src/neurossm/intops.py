"""Integer arithmetic shared by the quantized reference and the simulator.

Every narrowing saturates; nothing wraps. A descale factor is a pair
``(m, shift)`` standing for ``m * 2**-shift`` and is applied as
multiply-then-arithmetic-shift, which floors.
"""

from __future__ import annotations

import numba
import numpy as np

ACC_BITS = 48


def sat(x, bits: int):
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return np.clip(x, lo, hi)


def count_saturated(x, bits: int) -> int:
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return int(np.count_nonzero((x < lo) | (x > hi)))


def apply_factor(acc, factor) -> np.ndarray:
    """floor(acc * m * 2**-shift) on int64 arrays.

    ``acc`` must already fit in ACC_BITS. For a left shift the product is
    clipped first so that any value beyond int64 saturates instead of wrapping;
    such values exceed every spike width anyway.
    """
    m, shift = factor
    prod = np.asarray(acc, dtype=np.int64) * np.int64(m)
    if shift >= 0:
        return prod >> np.int64(shift)
    lim = np.int64((1 << (62 + shift)) - 1) if shift > -62 else np.int64(0)
    return np.clip(prod, -lim, lim) << np.int64(-shift)


@numba.njit(cache=True, inline="always")
def _apply_scalar(v, m, shift):
    p = v * m
    if shift >= 0:
        return p >> shift
    if shift <= -62:
        lim = 0
    else:
        lim = (1 << (62 + shift)) - 1
    if p > lim:
        p = lim
    elif p < -lim:
        p = -lim
    return p << (-shift)


@numba.njit(cache=True, inline="always")
def _sat_scalar(v, lo, hi):
    if v > hi:
        return hi
    if v < lo:
        return lo
    return v


@numba.njit(cache=True)
def ssm_scan(u, ar, ai, br, bi, cr, ci, a_shift, bu_m, bu_shift, t_m, t_shift, state_bits, term_bits, out,
             xr0, xi0):
    """Integer diagonal recurrence fused with the sum over states.

    u: (B, H, L) int64 input spikes; ar..ci: (H, N) int64 parameters;
    out: (B, H, L) int64 receives sum_n term[b, h, n, t];
    xr0, xi0: (B, H, N) int64 initial state, overwritten with the final state.
    Returns the number of saturation events.
    """
    B, H, L = u.shape
    N = ar.shape[1]
    slo, shi = -(1 << (state_bits - 1)), (1 << (state_bits - 1)) - 1
    tlo, thi = -(1 << (term_bits - 1)), (1 << (term_bits - 1)) - 1
    nsat = 0
    for b in range(B):
        for h in range(H):
            for t in range(L):
                out[b, h, t] = 0
            for n in range(N):
                xr = xr0[b, h, n]
                xi = xi0[b, h, n]
                a_r = ar[h, n]
                a_i = ai[h, n]
                b_r = br[h, n]
                b_i = bi[h, n]
                c_r = cr[h, n]
                c_i = ci[h, n]
                for t in range(L):
                    v = u[b, h, t]
                    nr = ((a_r * xr - a_i * xi) >> a_shift) + _apply_scalar(b_r * v, bu_m, bu_shift)
                    ni = ((a_r * xi + a_i * xr) >> a_shift) + _apply_scalar(b_i * v, bu_m, bu_shift)
                    xr = _sat_scalar(nr, slo, shi)
                    xi = _sat_scalar(ni, slo, shi)
                    if xr != nr or xi != ni:
                        nsat += 1
                    tv = _apply_scalar(c_r * xr - c_i * xi, t_m, t_shift)
                    p = _sat_scalar(tv, tlo, thi)
                    if p != tv:
                        nsat += 1
                    out[b, h, t] += p
                xr0[b, h, n] = xr
                xi0[b, h, n] = xi
    return nsat


def ssm_step(x_r, x_i, u, ar, ai, br, bi, cr, ci, a_shift, bu_factor, term_factor, state_bits, term_bits):
    """Vectorized single step of the integer recurrence (used by the simulator).

    x_r, x_i, ar..ci broadcast together; u broadcasts against them.
    Returns (new_r, new_i, term, saturations).
    """
    nr = ((ar * x_r - ai * x_i) >> a_shift) + apply_factor(br * u, bu_factor)
    ni = ((ar * x_i + ai * x_r) >> a_shift) + apply_factor(bi * u, bu_factor)
    xr, xi = sat(nr, state_bits), sat(ni, state_bits)
    tv = apply_factor(cr * xr - ci * xi, term_factor)
    p = sat(tv, term_bits)
    nsat = int(np.count_nonzero(xr != nr) + np.count_nonzero(xi != ni) + np.count_nonzero(p != tv))
    return xr, xi, p, nsat


def int_matmul(v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Exact integer product ``v @ w.T`` through float64 BLAS.

    Exact while every partial sum stays below 2**53, which holds for 24-bit
    spikes, 8-bit weights and fan-in up to 2**20.
    """
    out = np.asarray(v, dtype=np.float64) @ np.asarray(w, dtype=np.float64).T
    return out.astype(np.int64)
