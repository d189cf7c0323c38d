import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from minichic.metrics import (CSV_FIELDS, PSNR_IDENTICAL, RdCurve, as_rgb, bd_rate, curves_from_rows, mse,
                              psnr, read_csv, smooth, write_csv)


def test_psnr_sentinel_for_identical_images(rng):
    img = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    assert psnr(img, img.copy()) == PSNR_IDENTICAL == 99.0


def test_psnr_extreme_is_zero_db():
    assert psnr(np.zeros((4, 4, 3), np.uint8), np.full((4, 4, 3), 255, np.uint8)) == 0.0


def test_psnr_single_level_difference():
    a = np.full((1, 1, 3), 128, np.uint8)
    assert psnr(a, a + 1) == pytest.approx(-10 * math.log10((1 / 255) ** 2))
    assert psnr(a, a + 1) == pytest.approx(48.13, abs=0.005)


def test_psnr_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2, 3), np.uint8), np.zeros((2, 3, 3), np.uint8))
    with pytest.raises(ValueError):
        mse(np.zeros(3), np.zeros(4))


def test_as_rgb_variants():
    g = np.arange(6, dtype=np.uint8).reshape(2, 3)
    assert as_rgb(g).shape == (2, 3, 3) and (as_rgb(g)[..., 2] == g).all()
    assert as_rgb(np.zeros((2, 2, 4), np.uint8)).shape == (2, 2, 3)
    with pytest.raises(TypeError):
        as_rgb(np.zeros((2, 2)))


def test_smooth_trailing_average():
    np.testing.assert_allclose(smooth([1, 2, 3, 4], 2), [1, 1.5, 2.5, 3.5])
    np.testing.assert_allclose(smooth([5.0], 10), [5.0])


def _curve(scale=1.0):
    rate = np.array([0.1, 0.25, 0.5, 1.0, 2.0])
    return RdCurve(rate * scale, 30 + 4 * np.log2(rate / 0.1))


def test_bd_rate_identical_curves():
    assert bd_rate(_curve(), _curve()) == pytest.approx(0.0, abs=1e-9)


def test_bd_rate_doubled_rate():
    assert bd_rate(_curve(2.0), _curve()) == pytest.approx(100.0, abs=1e-6)


def test_bd_rate_halved_rate():
    assert bd_rate(_curve(0.5), _curve()) == pytest.approx(-50.0, abs=1e-6)


def test_bd_rate_requires_overlap():
    a = RdCurve([1, 2, 3, 4], [20, 21, 22, 23])
    b = RdCurve([1, 2, 3, 4], [30, 31, 32, 33])
    with pytest.raises(ValueError):
        bd_rate(a, b)


def test_curve_validation():
    with pytest.raises(ValueError):
        RdCurve([1, 2, 3], [1, 2, 3])
    with pytest.raises(ValueError):
        RdCurve([1, 2, 2, 3], [1, 2, 3, 4])
    with pytest.raises(ValueError):
        RdCurve([0, 1, 2, 3], [1, 2, 3, 4])
    with pytest.raises(ValueError):
        RdCurve([1, 2, 3, 4], [1, 2, np.inf, 4])
    c = RdCurve([3, 1, 4, 2], [33, 31, 34, 32])
    assert c.points == [(1, 31), (2, 32), (3, 33), (4, 34)]


@st.composite
def smooth_curve_pair(draw):
    n = draw(st.integers(4, 7))
    base = np.sort(np.array(draw(st.lists(st.floats(0.05, 3.0), min_size=n, max_size=n, unique=True))))
    if np.min(np.diff(base)) < 1e-3:
        base = np.geomspace(0.05, 3.0, n)
    slope_a = draw(st.floats(3.0, 8.0))
    slope_b = draw(st.floats(3.0, 8.0))
    off = draw(st.floats(-1.0, 1.0))
    a = RdCurve(base, 30 + slope_a * np.log2(base))
    b = RdCurve(base * draw(st.floats(0.5, 2.0)), 30 + off + slope_b * np.log2(base))
    return a, b


@given(smooth_curve_pair())
@settings(max_examples=60, deadline=None)
def test_bd_rate_antisymmetry(pair):
    a, b = pair
    try:
        s_ab = bd_rate(a, b)
    except ValueError:
        return
    s_ba = bd_rate(b, a)
    assert (1 + s_ab / 100) * (1 + s_ba / 100) == pytest.approx(1.0, abs=1e-3)


def test_csv_round_trip_into_curves(tmp_path, rng):
    rows = []
    for img in ("a", "b"):
        for i, lam in enumerate((0.02, 0.005, 0.001, 0.0004)):
            rows.append({"image": img, "lambda": lam, "arch": 300, "n_iters": 100, "kappa_enc": 90000,
                         "bpp": float(rng.uniform(0.1, 2)) + i * 2, "psnr_db": float(rng.uniform(20, 40)),
                         "encode_s": 1.5, "decode_ms": 12.25})
    path = tmp_path / "rd.csv"
    write_csv(path, rows)
    assert path.read_text().splitlines()[0] == ",".join(CSV_FIELDS)
    back = read_csv(path)
    assert len(back) == len(rows)
    direct, parsed = curves_from_rows(rows), curves_from_rows(back)
    for name in ("a", "b"):
        np.testing.assert_array_equal(direct[name].rate, parsed[name].rate)
        np.testing.assert_array_equal(direct[name].psnr, parsed[name].psnr)


def test_read_csv_rejects_other_columns(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_csv(p)
