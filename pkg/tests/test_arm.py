import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import directional_error
from minichic import fixedpoint as fx
from minichic.arm import (MASTER_OFFSETS, ContextTemplate, FixedArm, LaplaceParams, arm_forward, arm_mlp,
                          decode_grid, discrete_laplace_pmf, discrete_laplace_table, encode_grid,
                          gather_context, gather_contexts, laplace_rate, rate_bits)
from minichic.decoder import DecoderParams, get_arch
from minichic.tensor import Parameters, Tensor, precision


def test_templates_are_causal_prefixes():
    for size in (8, 16, 24):
        offs = ContextTemplate(size).offsets
        assert offs == MASTER_OFFSETS[:size] and len(set(offs)) == size
        assert all(dy < 0 or (dy == 0 and dx < 0) for dy, dx in offs)
    with pytest.raises(ValueError):
        ContextTemplate(12)


def test_gather_context_zero_outside():
    grid = np.arange(1, 13).reshape(3, 4)
    tmpl = ContextTemplate(8)
    assert gather_context(grid, (0, 0), tmpl).tolist() == [0] * 8
    # (0,-1) (0,-2) (-1,0) (-1,-1) (-1,1) (-1,-2) (-1,2) (0,-3)
    assert gather_context(grid, (1, 2), tmpl).tolist() == [6, 5, 3, 2, 4, 1, 0, 0]
    with pytest.raises(IndexError):
        gather_context(grid, (3, 0), tmpl)


@pytest.mark.parametrize("size", [8, 16, 24])
def test_context_matrix_matches_pointwise(size, rng):
    grid = rng.integers(-5, 6, (6, 7))
    tmpl = ContextTemplate(size)
    cols = gather_contexts(Tensor(grid), tmpl).data
    for r in range(6):
        for c in range(7):
            np.testing.assert_array_equal(cols[r * 7 + c], gather_context(grid, (r, c), tmpl))


def test_context_gradients(rng):
    with precision(np.float64):
        grid = Tensor(rng.standard_normal((5, 6)), requires_grad=True)
        assert directional_error(lambda: gather_contexts(grid, ContextTemplate(24)), [grid], eps=1e-6) < 1e-6


def test_laplace_params_validation():
    with pytest.raises(ValueError):
        LaplaceParams(0.0, 0.0)
    assert arm_forward(np.zeros(8), DecoderParams.init(300).psi, get_arch(300).arm).b >= 1e-3


@pytest.mark.parametrize("mu,b", [(0.0, 1.0), (0.3, 0.05), (-2.7, 7.0), (10.0, 200.0)])
def test_discrete_laplace_normalised(mu, b):
    lp = LaplaceParams(mu, b)
    tab = discrete_laplace_table(lp, -3000, 3000)
    assert tab.sum() == pytest.approx(1.0) and np.all(tab >= 0)
    for v in (-7, -1, 0, 2, 15):
        assert discrete_laplace_pmf(lp, v) == pytest.approx(max(tab[v + 3000], 2.0 ** -16), rel=1e-9)
    small = discrete_laplace_table(lp, -4, 4)
    assert small.sum() == pytest.approx(1.0) and np.all(small >= 0)


def test_pmf_floor():
    assert discrete_laplace_pmf(LaplaceParams(0.0, 1e-3), 50) == 2.0 ** -16
    # mu = 0, b = 1: P(0) = 1 - exp(-1/2)
    assert discrete_laplace_pmf(LaplaceParams(0.0, 1.0), 0) == pytest.approx(1 - math.exp(-0.5))


def test_laplace_rate_matches_pointwise_bits(rng):
    vals = rng.integers(-4, 5, 30).astype(float)
    raw = np.stack([rng.normal(0, 1, 30), rng.normal(0, 1, 30)], axis=1)
    bits = float(laplace_rate(Tensor(vals), Tensor(raw)).data)
    ref = 0.0
    for v, (m, lb) in zip(vals, raw):
        ref -= math.log2(discrete_laplace_pmf(LaplaceParams(m, math.exp(lb)), v))
    assert bits == pytest.approx(ref, rel=1e-5)


@pytest.mark.parametrize("spread", [0.3, 3.0])
def test_laplace_rate_gradients(spread, rng):
    with precision(np.float64):
        vals = Tensor(rng.normal(0, spread, 40), requires_grad=True)
        raw = Tensor(np.stack([rng.normal(0, spread, 40), rng.normal(0, 0.5, 40)], axis=1), requires_grad=True)
        assert directional_error(lambda: laplace_rate(vals, raw), [vals, raw], eps=1e-6) < 1e-4


def _random_arm(arch_id, seed):
    params = DecoderParams.init(arch_id, seed)
    rng = np.random.default_rng(seed)
    for t in params.psi.values():
        t.data = (t.data + rng.normal(0, 0.3, t.shape)).astype(np.float32)
    return params.psi, get_arch(arch_id).arm


@pytest.mark.parametrize("arch_id", [300, 1079, 2300])
def test_fixed_arm_tracks_float(arch_id, rng):
    psi, arm = _random_arm(arch_id, 3)
    farm = FixedArm.from_float(psi, arm)
    grid = rng.integers(-6, 7, (9, 10))
    fixed = farm.grid_params(grid)
    ctx = gather_contexts(Tensor(grid), ContextTemplate(arm[0].in_feat))
    ref = arm_mlp(ctx, psi, arm).data.reshape(9, 10, 2)
    np.testing.assert_allclose(fx.q16_to_float(fixed), ref, atol=5e-3)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 12), st.integers(1, 12), st.integers(0, 20))
def test_grid_round_trip(seed, h, w, spread):
    rng = np.random.default_rng(seed)
    psi, arm = _random_arm(300, seed % 7)
    farm = FixedArm.from_float(psi, arm)
    grid = rng.integers(-spread, spread + 1, (h, w)).astype(np.int32)
    data, lo, hi = encode_grid(grid, farm)
    np.testing.assert_array_equal(decode_grid(data, (h, w), lo, hi, farm), grid)
    exact = rate_bits([grid], farm, exact=True)
    assert exact <= 8 * len(data) <= exact * 1.001 + 64


def test_float_and_exact_rates_agree_roughly(rng):
    psi, arm = _random_arm(300, 5)
    grids = [rng.integers(-3, 4, (16, 16)) for _ in range(3)]
    f = rate_bits(grids, psi, arm)
    e = rate_bits(grids, FixedArm.from_float(psi, arm), exact=True)
    # the exact coder cost folds tails into the observed alphabet, so it is never much larger
    assert e <= f * 1.02 + 16
    with pytest.raises(TypeError):
        rate_bits(grids, psi, exact=True)


def test_corrupted_grid_stream_detected(rng):
    psi, arm = _random_arm(300, 1)
    farm = FixedArm.from_float(psi, arm)
    grid = rng.integers(-8, 9, (20, 20)).astype(np.int32)
    data, lo, hi = encode_grid(grid, farm)
    bad = bytearray(data)
    bad[len(bad) // 3] ^= 0xFF
    with pytest.raises(Exception) as exc:
        decode_grid(bytes(bad), (20, 20), lo, hi, farm)
    assert "sentinel" in str(exc.value) or "truncated" in str(exc.value) or "trailing" in str(exc.value)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 20), st.integers(1, 20), st.integers(1, 5), st.integers(0, 9))
def test_pyramid_round_trip_shares_one_stream(seed, h, w, L, spread):
    from minichic.arm import decode_pyramid, encode_pyramid
    rng = np.random.default_rng(seed)
    psi, arm = _random_arm(545, seed % 5)
    farm = FixedArm.from_float(psi, arm)
    grids = [rng.integers(-spread, spread + 1, (-(-h // 2 ** l), -(-w // 2 ** l))) for l in range(L)]
    data, bounds = encode_pyramid(grids, farm)
    assert bounds == [(int(g.min()), int(g.max())) for g in grids]
    back = decode_pyramid(data, [g.shape for g in grids], bounds, farm)
    for a, b in zip(grids, back):
        np.testing.assert_array_equal(a, b)
    exact = rate_bits(grids, farm, exact=True)
    # one sentinel and one flush for the whole pyramid
    assert exact <= 8 * len(data) <= exact * 1.001 + 64


def test_corrupted_pyramid_stream_detected(rng):
    from minichic.arm import decode_pyramid, encode_pyramid
    from minichic.rangecoder import RangeCoderError
    psi, arm = _random_arm(300, 2)
    farm = FixedArm.from_float(psi, arm)
    grids = [rng.integers(-5, 6, (12, 12)), rng.integers(-5, 6, (6, 6))]
    data, bounds = encode_pyramid(grids, farm)
    bad = bytearray(data)
    bad[len(bad) // 2] ^= 0x5A
    with pytest.raises(RangeCoderError):
        decode_pyramid(bytes(bad), [(12, 12), (6, 6)], bounds, farm)
