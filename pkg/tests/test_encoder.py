import math

import numpy as np
import pytest

from minichic import tensor
from minichic.decoder import decode_image
from minichic.encoder import (PRESETS, EncodeError, EncoderConfig, RdCost, TrainState, encode_image, fit,
                              forward_loss, kappa_enc, sweep)
from minichic.latent import QuantMode
from minichic.metrics import psnr, read_csv, smooth

from gradcheck import directional_error


@pytest.mark.parametrize("n,expected", [(0, 0), (598, 538_200), (1594, 1_434_600), (102_607, 92_346_300)])
def test_kappa_enc_products(n, expected):
    assert kappa_enc(n, 300) == expected


def test_kappa_enc_largest_preset_matches_published_point():
    assert kappa_enc(PRESETS["P102600"], 300) == pytest.approx(92_346_150, rel=1e-5)


def test_kappa_enc_rejects_negative():
    with pytest.raises(ValueError):
        kappa_enc(-1, 300)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(lam=0)
    with pytest.raises(ValueError):
        EncoderConfig(preset="P5")
    with pytest.raises(ValueError):
        EncoderConfig(n_iters=0)
    with pytest.raises(ValueError):
        EncoderConfig(phases=(0.5, 0.5, 0.5))
    cfg = EncoderConfig(n_iters=200)
    assert sum(cfg.phase_lengths()) == 200 and cfg.phase_lengths() == (140, 50, 10)
    assert EncoderConfig(preset="P600").iterations() == 598


def test_rd_cost_total():
    c = RdCost(0.01, 2000.0, 1e-3, 1000)
    assert c.total == pytest.approx(0.01 + 1e-3 * 2.0)


def test_images_below_minimum_size_rejected():
    with pytest.raises(ValueError):
        TrainState.create(np.zeros((7, 20, 3), np.uint8), 1e-3, 300)


def test_zero_lambda_ignores_rate_in_gradient(small_64):
    state = TrainState.create(small_64[:16, :16], 0.0, 300, L=3, seed=1)
    for t in state.params.psi.values():
        t.data[:] = np.random.default_rng(0).normal(0, 0.3, t.shape)
    state.opt.zero_grad()
    cost, loss = forward_loss(state, QuantMode("Noise"))
    loss.backward()
    assert cost.rate_bits > 0 and cost.total == pytest.approx(cost.distortion)
    for t in state.params.psi.values():
        assert t.grad is None or not np.any(t.grad)


def _float64_state(img, lam, arch):
    state = TrainState.create(img, lam, arch, L=3, seed=3)
    rng = np.random.default_rng(9)
    for t in state.params.all().values():
        t.data = (t.data + rng.normal(0, 0.05, t.shape)).astype(np.float64)
    for y in state.latents:
        y.data = rng.normal(0, 1.5, y.shape)
    state.target.data = state.target.data.astype(np.float64)
    return state


@pytest.mark.parametrize("arch", [300, 2300])
def test_end_to_end_gradient_matches_finite_difference(small_64, arch):
    with tensor.precision(np.float64):
        state = _float64_state(small_64[:16, :24], 5e-3, arch)
        leaves = [*state.params.all().values(), *state.latents]

        def forward():
            # the same noise draw on every evaluation
            return forward_loss(state, QuantMode("Noise"), np.random.default_rng(77))[1]

        assert directional_error(forward, leaves, eps=1e-6, seed=arch) < 1e-2


@pytest.fixture(scope="module")
def quick_encode(request):
    from minichic.imageio import load_image
    from conftest import DATA
    img = load_image(DATA / "chelsea_64.png")
    cfg = EncoderConfig(lam=2e-3, arch=300, n_iters=150, seed=5)
    return img, cfg, encode_image(img, cfg)


def test_encode_reports_consistent_numbers(quick_encode):
    img, cfg, res = quick_encode
    H, W = img.shape[:2]
    decoded, _ = decode_image(res.bitstream)
    np.testing.assert_array_equal(decoded, res.recon)
    assert psnr(img, decoded) == res.psnr_db
    assert res.bpp == 8 * len(res.bitstream) / (H * W)
    assert res.report.kappa_enc == 3 * 150 * res.report.kappa_dec
    assert len(res.loss_history) == 150 and not res.restarted


def test_encode_is_deterministic(quick_encode):
    img, cfg, res = quick_encode
    assert encode_image(img, cfg).bitstream == res.bitstream


@pytest.fixture(scope="module")
def gray_encode():
    img = np.full((64, 64, 3), 128, np.uint8)
    return encode_image(img, EncoderConfig(lam=1e-3, arch=300, preset="P1600"))


def test_constant_gray_reaches_high_quality(gray_encode):
    assert gray_encode.psnr_db > 45


@pytest.mark.xfail(strict=True, reason=(
    "the stream header for L=7 alone is 63 bytes = 504 bits, i.e. 0.123 bpp on 64x64, above the 0.1 target"))
def test_constant_gray_rate_below_tenth_bit(gray_encode):
    assert gray_encode.bpp < 0.1


@pytest.mark.slow
def test_smoothed_loss_descends(small_64):
    _, hist = fit(small_64, EncoderConfig(lam=1e-3, arch=300, n_iters=2000, seed=0))
    s = smooth(hist, 100)
    assert s[1999] <= s[99]


def test_divergence_restart_then_failure(monkeypatch, small_64):
    import minichic.encoder as enc
    calls = []

    def boom(image, cfg, lr=None):
        calls.append(lr)
        raise tensor.NonFiniteError("nan")

    monkeypatch.setattr(enc, "fit", boom)
    with pytest.raises(EncodeError):
        encode_image(small_64, EncoderConfig(n_iters=10))
    assert calls == [None, pytest.approx(1e-3)]


def test_sweep_rows_and_csv(tmp_path, small_64):
    crop = small_64[:24, :24]
    path = tmp_path / "rd.csv"
    lams = [0.02, 0.005, 0.002, 0.001, 0.0004]
    rows, failures = sweep({"c": crop}, lams, EncoderConfig(n_iters=30, L=3), csv_path=path)
    assert not failures and len(rows) == 5
    back = read_csv(path)
    assert [float(r["lambda"]) for r in back] == lams
    assert [float(r["bpp"]) for r in back] == [r["bpp"] for r in rows]


def test_sweep_empty_list_writes_header_only(tmp_path):
    path = tmp_path / "empty.csv"
    rows, failures = sweep({}, [1e-3], csv_path=path)
    assert rows == [] and failures == []
    assert path.read_text().strip() == "image,lambda,arch,n_iters,kappa_enc,bpp,psnr_db,encode_s,decode_ms"


def test_sweep_records_failures_and_continues(small_64):
    rows, failures = sweep({"tiny": small_64[:4, :4], "ok": small_64[:16, :16]}, [1e-3],
                           EncoderConfig(n_iters=10, L=3))
    assert [r["image"] for r in rows] == ["ok"]
    assert failures[0][0] == "tiny"


@pytest.mark.slow
def test_rate_monotone_in_lambda(small_64):
    lams = [0.02, 0.004, 0.001, 0.0004]
    rows, _ = sweep({"c": small_64}, lams, EncoderConfig(n_iters=400, seed=0))
    bpp = [r["bpp"] for r in rows]
    for hi_lam, lo_lam in zip(bpp, bpp[1:]):
        assert hi_lam <= lo_lam * 1.05
