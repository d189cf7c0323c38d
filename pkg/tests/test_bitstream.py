import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from minichic import bitstream as bs
from minichic.decoder import DecoderParams
from minichic.latent import grid_shape

DATA = Path(__file__).parent / "data"
GOLDEN_HEADER = ("4d4348310100100010000300f9f8fa5b012d00000490009a001800fdff0300fdff0300fdff0300"
                 "d9000000a3000000")


def _header(no_params=False, L=2):
    return bs.Header(40, 24, L, 1, [(-3, 2)] * L, no_params, (-7, -9, -5), ((20, 7), (5, 2), (300, 90)))


def test_serialize_parse_round_trip():
    stream = bs.Bitstream(_header(), b"\x01\x02\x03", b"abc")
    again = bs.parse(stream.to_bytes())
    assert again == stream
    assert again.to_bytes() == stream.to_bytes()


def test_no_params_round_trip():
    stream = bs.Bitstream(_header(no_params=True), None, b"xyz")
    data = stream.to_bytes()
    assert data[5] == bs.FLAG_NO_PARAMS
    parsed = bs.parse(data)
    assert parsed.params is None and parsed.latents == b"xyz"


def test_wrong_magic_and_version_rejected():
    data = bytearray(bs.Bitstream(_header(), b"", b"").to_bytes())
    bad = bytes(b"XCH1" + data[4:])
    with pytest.raises(bs.BitstreamError, match="magic"):
        bs.parse(bad)
    data[4] = 2
    with pytest.raises(bs.BitstreamError, match="version"):
        bs.parse(bytes(data))


def test_truncation_and_trailing_bytes_rejected():
    data = bs.Bitstream(_header(), b"pp", b"aabb").to_bytes()
    for cut in range(len(data)):
        with pytest.raises(bs.BitstreamError):
            bs.parse(data[:cut])
    with pytest.raises(bs.BitstreamError, match="trailing"):
        bs.parse(data + b"\0")


def test_invalid_header_fields_rejected():
    h = _header()
    h.step_exps = (-3, -8, -8)
    with pytest.raises(bs.BitstreamError):
        bs.Bitstream(h, b"", b"").to_bytes()
    h = _header()
    h.arch_code = 9
    with pytest.raises(bs.BitstreamError):
        h.validate()


def test_golden_header_is_frozen():
    data = (DATA / "golden_16x16.mch").read_bytes()
    stream = bs.parse(data)
    hdr_len = len(data) - len(stream.params) - len(stream.latents)
    assert data[:hdr_len].hex() == GOLDEN_HEADER
    h = stream.header
    assert (h.H, h.W, h.L, h.arch.id, h.step_exps) == (16, 16, 3, 300, (-7, -8, -6))


def test_file_size_is_sum_of_sections(rng):
    params = DecoderParams.init(545, 3)
    H, W = 20, 36
    grids = [rng.integers(-3, 4, grid_shape(H, W, l)) for l in range(4)]
    data = bs.build(H, W, grids, 545, qparams=bs.quantize_params(params, (-6, -7, -8)))
    s = bs.parse(data)
    header = 12 + 3 + 3 * 4 + 4 * 4 + 4 + 4
    assert len(data) == header + len(s.params) + len(s.latents)
    no = bs.build(H, W, grids, 545, shared=params)
    assert len(no) == 12 + 4 * 4 + 4 + len(bs.parse(no).latents)


def test_all_zero_params_code_to_a_tiny_payload():
    params = DecoderParams.init(300)
    for name, t in params.all().items():
        t.data[:] = 0
    qp = bs.quantize_params(params, (-5, -10, -12))
    assert qp.step_exps == (bs.DEFAULT_STEP_EXP,) * 3
    payload = bs.encode_params(qp)
    assert len(payload) <= 8
    assert all(m == (1, 0) for m in qp.models())


@given(st.integers(bs.STEP_EXP_MIN, bs.STEP_EXP_MAX), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_quantizer_error_within_half_step(k, seed):
    params = DecoderParams.init(1079, seed)
    qp = bs.quantize_params(params, (k, k, k))
    deq = qp.dequantize()
    step = 2.0 ** k
    for (name, w), (_, v) in zip(params.all().items(), deq.all().items()):
        in_range = np.abs(w.data) < bs.PARAM_INT_MAX * step
        err = np.abs(w.data.astype(np.float64) - v.data.astype(np.float64))
        assert np.all(err[in_range] <= step / 2 * (1 + 1e-5) + 1e-7), name


def test_param_round_trip_through_coder(rng):
    params = DecoderParams.init(2300, 8)
    qp = bs.quantize_params(params, (-9, -4, -11))
    data = bs.build(16, 16, [rng.integers(-1, 2, (16, 16))], 2300, qparams=qp)
    back = bs.decode_params(bs.parse(data))
    assert back.step_exps == qp.step_exps
    for name in qp.ints:
        np.testing.assert_array_equal(back.ints[name], qp.ints[name])


def test_gaussian_weights_at_finest_step_cost_at_most_32_bits(rng):
    params = DecoderParams.init(2300)
    sigma = 0.1
    for _, t in params.all().items():
        t.data[:] = rng.normal(0, sigma, t.shape)
    qp = bs.quantize_params(params, (-12, -12, -12))
    n = params.count()
    coded_bits = 8 * len(bs.encode_params(qp))
    # oracle: differential entropy of N(0, sigma) at resolution 2^-12, plus the Laplace mismatch (< 0.11 bit)
    gaussian_bits = 0.5 * math.log2(2 * math.pi * math.e * sigma**2) + 12
    assert coded_bits / n <= 32
    assert coded_bits / n <= gaussian_bits + 0.25
    assert coded_bits == pytest.approx(bs.param_bits(qp), rel=1e-3, abs=64)


def test_build_validates_inputs(rng):
    params = DecoderParams.init(300)
    qp = bs.quantize_params(params)
    with pytest.raises(ValueError):
        bs.build(16, 16, [np.zeros((15, 16), int)], 300, qparams=qp)
    with pytest.raises(ValueError):
        bs.build(16, 16, [np.zeros((16, 16), int)], 300)
    with pytest.raises(ValueError):
        bs.build(16, 16, [np.zeros((16, 16), int)], 545, qparams=qp)
    with pytest.raises(ValueError):
        bs.quantize_params(params, (-3, -8, -8))
