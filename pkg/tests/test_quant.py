import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurossm import quant
from neurossm.intops import apply_factor, sat, ssm_scan, ssm_step
from neurossm.model import forward_conv


# ---------------------------------------------------------------- big-integer oracle

def exact_code(x: float, bits: int, x_max: float) -> int:
    p, q = float(x).as_integer_ratio()
    P, Q = float(x_max).as_integer_ratio()
    n = (p * Q * 2 ** (bits - 1)) // (q * P)  # Python floor division on exact rationals
    return max(-(2 ** (bits - 1)), min(2 ** (bits - 1) - 1, n))


def exact_value_rounded_up(n: int, bits: int, x_max: float) -> float:
    """The smallest float >= n * x_max / 2**(bits-1)."""
    P, Q = float(x_max).as_integer_ratio()
    num, den = n * P, Q * 2 ** (bits - 1)
    v = num / den
    vp, vq = v.as_integer_ratio()
    if vp * den < num * vq:
        v = math.nextafter(v, math.inf)
    return v


@pytest.mark.parametrize("bits,x_max", [(8, 1.0), (8, 0.3), (16, 7.25), (24, 1e-3), (4, 2.0 ** -5)])
def test_codes_match_big_integer_floor(bits, x_max):
    rng = np.random.default_rng(bits)
    grid = np.concatenate([rng.uniform(-1.5 * x_max, 1.5 * x_max, 3000),
                           (np.arange(-130, 130) * x_max / 2 ** (bits - 1))])
    edges = np.concatenate([grid, np.nextafter(grid, np.inf), np.nextafter(grid, -np.inf)])
    got = quant.quantize(edges, bits, x_max)
    want = [exact_code(x, bits, x_max) for x in edges]
    assert got.tolist() == want
    vals = quant.fake_quantize(edges, bits, x_max)
    assert vals.tolist() == [exact_value_rounded_up(n, bits, x_max) for n in want]


def test_fake_quantize_examples():
    assert quant.fake_quantize([0.5, -0.7, 1.0, -1.0, 3.0], 8, 1.0).tolist() == \
        [0.5, -0.703125, 0.9921875, -1.0, 0.9921875]


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e6, 1e6, allow_nan=False), st.integers(2, 32), st.floats(1e-6, 1e6))
def test_fake_quantize_is_idempotent(x, bits, x_max):
    once = quant.fake_quantize(x, bits, x_max)
    assert quant.fake_quantize(once, bits, x_max) == once


@settings(max_examples=200, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.integers(2, 24))
def test_quantize_is_monotone(x, y, bits):
    lo, hi = min(x, y), max(x, y)
    assert quant.quantize(lo, bits, 3.0) <= quant.quantize(hi, bits, 3.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-0.999, 0.999), st.integers(2, 24))
def test_error_is_below_one_step_and_nonpositive(x, bits):
    err = quant.fake_quantize(x, bits, 1.0) - x
    assert -2.0 ** -(bits - 1) <= err <= 0


def test_invalid_arguments():
    with pytest.raises(ValueError):
        quant.quantize(1.0, 1, 1.0)
    with pytest.raises(ValueError):
        quant.quantize(1.0, 8, 0.0)
    with pytest.raises(ValueError):
        quant.QuantSpec(weight_bits=40)


def test_ste_gradient_masks_clamped_entries():
    x = np.array([-2.0, -0.5, 0.2, 0.999, 1.0, 5.0])
    g = quant.ste_gradient(np.ones(6), x, 8, 1.0)
    # 1.0 maps to code 128 which clamps to 127
    assert g.tolist() == [0, 1, 1, 1, 0, 0]


@pytest.mark.parametrize("d,expected", [(1 / 128, (16384, 21)), (3.0, (24576, 13)), (0.75, (24576, 15)),
                                        (1.0, (16384, 14))])
def test_quantize_factor_examples(d, expected):
    assert quant.quantize_factor(d) == expected


@settings(max_examples=300, deadline=None)
@given(st.floats(1e-12, 1e12))
def test_quantize_factor_mantissa_and_error(d):
    m, shift = quant.quantize_factor(d, 16)
    assert 2 ** 14 <= m < 2 ** 15
    v = quant.factor_value((m, shift))
    assert v <= d and (d - v) / d < 2.0 ** -14


def test_select_bound():
    assert quant.select_bound("ssm_a_bar", np.array([0.1])) == 1.0
    assert quant.select_bound("ssm_c", np.array([3 - 4j])) == 4.0
    assert quant.select_bound("weight", np.zeros(3)) == quant.BOUND_FLOOR
    with pytest.raises(ValueError):
        quant.select_bound("weight", np.array([]))
    with pytest.raises(ValueError):
        quant.select_bound("nonsense", np.ones(2))


# ---------------------------------------------------------------- integer helpers

@settings(max_examples=300, deadline=None)
@given(st.integers(-(2 ** 47), 2 ** 47 - 1), st.integers(0, 2 ** 15 - 1), st.integers(-10, 40))
def test_apply_factor_is_floor_of_exact_product(acc, m, shift):
    exact = acc * m
    want = exact >> shift if shift >= 0 else exact << -shift
    got = int(apply_factor(np.array([acc]), (m, shift))[0])
    if shift >= 0 or abs(want) < 2 ** 62:
        assert got == want
    else:
        assert got == sat(np.array([want]).clip(-(2 ** 63 - 1), 2 ** 63 - 1), 64)[0] or abs(got) >= 2 ** 24


def python_scan(u, a, b, c, a_shift, bu, tf, sb, tb):
    """Pure-Python big-integer recurrence for one channel."""
    def fl(v, f):
        m, s = f
        return (v * m) >> s if s >= 0 else (v * m) << -s

    def clamp(v, bits):
        return max(-(2 ** (bits - 1)), min(2 ** (bits - 1) - 1, v))

    N = len(a)
    xr, xi = [0] * N, [0] * N
    out = []
    for v in u:
        tot = 0
        for n in range(N):
            ar, ai = a[n]
            br, bi = b[n]
            cr, ci = c[n]
            nr = ((ar * xr[n] - ai * xi[n]) >> a_shift) + fl(br * v, bu)
            ni = ((ar * xi[n] + ai * xr[n]) >> a_shift) + fl(bi * v, bu)
            xr[n], xi[n] = clamp(nr, sb), clamp(ni, sb)
            tot += clamp(fl(cr * xr[n] - ci * xi[n], tf), tb)
        out.append(tot)
    return out


def test_ssm_scan_matches_python_oracle():
    rng = np.random.default_rng(0)
    H, N, L = 3, 4, 60
    a = rng.integers(-(2 ** 23), 2 ** 23, (H, N, 2))
    b = rng.integers(-(2 ** 23), 2 ** 23, (H, N, 2))
    c = rng.integers(-128, 128, (H, N, 2))
    u = rng.integers(-(2 ** 23), 2 ** 23, (2, H, L))
    bu, tf = (20000, 30), (17000, 20)
    out = np.empty_like(u)
    xr, xi = np.zeros((2, H, N), np.int64), np.zeros((2, H, N), np.int64)
    ssm_scan(u, a[..., 0], a[..., 1], b[..., 0], b[..., 1], c[..., 0], c[..., 1], 23, *bu, *tf, 24, 24, out, xr, xi)
    for bi in range(2):
        for h in range(H):
            want = python_scan(u[bi, h].tolist(), a[h].tolist(), b[h].tolist(), c[h].tolist(), 23, bu, tf, 24, 24)
            assert out[bi, h].tolist() == want
    # the vectorised single step agrees
    sr, si = np.zeros((2, H, N), np.int64), np.zeros((2, H, N), np.int64)
    acc = np.zeros((2, H, L), np.int64)
    for t in range(L):
        sr, si, p, _ = ssm_step(sr, si, u[:, :, t, None], a[..., 0], a[..., 1], b[..., 0], b[..., 1],
                                c[..., 0], c[..., 1], 23, bu, tf, 24, 24)
        acc[:, :, t] = p.sum(-1)
    assert np.array_equal(acc, out) and np.array_equal(sr, xr)


# ---------------------------------------------------------------- networks

@pytest.fixture
def calib():
    return np.random.default_rng(11).uniform(0, 1, (32, 1, 24))


def test_ptq_puts_every_tensor_on_its_grid(tiny_net, calib):
    fq = quant.ptq(tiny_net, calib=calib)
    quant.check_grid(fq)
    assert set(fq.tensors) == set(quant.tensor_roles(tiny_net.config))
    assert set(fq.act_bounds) == set(quant.activation_names(tiny_net.config))
    assert fq.tensors["blocks.0.a_bar"].x_max == 1.0 and fq.tensors["blocks.0.a_bar"].bits == 24
    assert fq.tensors["encoder.w"].bits == 8


def test_ptq_is_idempotent(tiny_net, calib):
    fq = quant.ptq(tiny_net, calib=calib)
    again = quant.ptq(fq)
    for k, t in fq.tensors.items():
        assert np.array_equal(again.tensors[k].values, t.values) and again.tensors[k].x_max == t.x_max


def test_ptq_warns_on_small_calibration(tiny_net, calib, caplog):
    with caplog.at_level(logging.WARNING):
        quant.ptq(tiny_net, calib=calib)
    assert "only 32 samples" in caplog.text
    with pytest.raises(ValueError):
        quant.ptq(tiny_net, calib=np.zeros((0, 1, 24)))


def test_extract_rejects_float_network(tiny_net):
    with pytest.raises(quant.GridError):
        quant.extract_integers(tiny_net)


def test_extract_rejects_off_grid_values(tiny_net, calib):
    fq = quant.ptq(tiny_net, calib=calib)
    fq.tensors["encoder.w"].values = fq.tensors["encoder.w"].values + 1e-9
    with pytest.raises(quant.GridError):
        quant.extract_integers(fq)


def test_integer_network_tracks_float_network(tiny_net, calib):
    fq = quant.ptq(tiny_net, calib=calib)
    inet = quant.extract_integers(fq)
    assert inet.depth == 3 * tiny_net.config.num_blocks + 2
    u = calib[:8]
    lf, lq = forward_conv(tiny_net, u), quant.quantized_forward(fq, u)
    assert np.max(np.abs(lf - lq)) < 0.05 * np.max(np.abs(lf))
    trace = {}
    quant.integer_forward(inet, quant.quantize_tokens(inet, u), trace)
    # only values that touch their calibrated maximum clip, by one step
    assert trace["saturations"] <= 8


def test_integer_forward_single_sample_and_shape_check(tiny_net, calib):
    inet = quant.extract_integers(quant.ptq(tiny_net, calib=calib))
    tq = quant.quantize_tokens(inet, calib[:2])
    both = quant.integer_forward(inet, tq)
    assert np.array_equal(quant.integer_forward(inet, tq[1]), both[1])
    with pytest.raises(ValueError):
        quant.integer_forward(inet, np.zeros((1, 2, 24), np.int64))


def test_quantized_predict_chunking(tiny_net, calib):
    fq = quant.ptq(tiny_net, calib=calib)
    assert np.array_equal(quant.quantized_predict(fq, calib, chunk=5), quant.quantized_predict(fq, calib))


def test_saturation_instead_of_wrap(tiny_net, calib):
    fq = quant.ptq(tiny_net, calib=calib)
    inet = quant.extract_integers(fq)
    huge = quant.quantize_tokens(inet, np.full((1, 1, 24), 1e6))
    trace = {}
    out = quant.integer_forward(inet, huge, trace)
    lim = 2 ** (inet.spec.spike_bits - 1)
    assert trace["saturations"] > 0 and out.min() >= -lim and out.max() < lim


def test_serialisation_roundtrips(tmp_path, tiny_net, calib):
    fq = quant.ptq(tiny_net, calib=calib)
    quant.save_fake_quant(fq, tmp_path / "a.fq")
    back = quant.load_fake_quant(tmp_path / "a.fq")
    assert back.act_bounds == fq.act_bounds
    for k, t in fq.tensors.items():
        assert np.array_equal(back.tensors[k].values, t.values)
    inet = quant.extract_integers(fq)
    quant.save_integer_network(inet, tmp_path / "a.int")
    inet2 = quant.load_integer_network(tmp_path / "a.int")
    tq = quant.quantize_tokens(inet, calib[:3])
    assert np.array_equal(quant.integer_forward(inet, tq), quant.integer_forward(inet2, tq))


def test_container_errors_name_offset(tmp_path, tiny_net, calib):
    from neurossm.container import ContainerError

    p = tmp_path / "bad.int"
    quant.save_integer_network(quant.extract_integers(quant.ptq(tiny_net, calib=calib)), p)
    raw = bytearray(p.read_bytes())
    raw[:8] = b"XXXXXXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(ContainerError, match="offset 0"):
        quant.load_integer_network(p)


def test_calibrator_merge_is_max(tiny_net, calib):
    a = quant.calibrate(tiny_net, calib[:16])
    b = quant.calibrate(tiny_net, calib[16:])
    whole = quant.calibrate(tiny_net, calib)
    merged = a.merge(b)
    for k, v in whole.maxima.items():
        assert merged.maxima[k] == pytest.approx(v, rel=1e-12)
    assert merged.samples == 32
