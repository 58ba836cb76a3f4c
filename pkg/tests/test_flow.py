import numpy as np
import pytest
from scipy import ndimage

from setr_pkd.flow import (
    FlowField,
    Frame,
    TvL1Params,
    build_pyramid,
    flow_to_export,
    tv_l1_flow,
    warp,
)

BORDER = 8


def smooth_texture(rng, size=128, pad=16, sigma=2.0):
    t = ndimage.gaussian_filter(rng.random((size + 2 * pad, size + 2 * pad)), sigma)
    return (t - t.min()) / (t.max() - t.min())


def translated_pair(rng, dx, dy, size=128, pad=16):
    """frame1(x + d) == frame0(x): the true flow is (dx, dy) everywhere."""
    t = smooth_texture(rng, size, pad)
    prev = t[pad : pad + size, pad : pad + size]
    nxt = t[pad - dy : pad - dy + size, pad - dx : pad - dx + size]
    return Frame(prev), Frame(nxt)


def interior(a):
    return a[BORDER:-BORDER, BORDER:-BORDER]


# -- pyramid ---------------------------------------------------------------


def test_pyramid_sizes():
    frame = Frame(np.random.default_rng(0).random((64, 64)))
    sizes = [f.intensities.shape for f in build_pyramid(frame, 3, 0.5)]
    assert sizes == [(64, 64), (32, 32), (16, 16)]


def test_pyramid_single_level_is_input():
    frame = Frame(np.random.default_rng(0).random((20, 30)))
    pyr = build_pyramid(frame, 1, 0.5)
    assert len(pyr) == 1 and pyr[0] is frame


def test_pyramid_constant_frame_stays_constant():
    pyr = build_pyramid(Frame(np.full((64, 48), 0.37)), 4, 0.5)
    for level in pyr:
        assert np.allclose(level.intensities, 0.37, atol=1e-12, rtol=0)


def test_pyramid_clamps_small_levels(caplog):
    pyr = build_pyramid(Frame(np.zeros((32, 32))), 5, 0.5)
    assert [f.intensities.shape for f in pyr] == [(32, 32), (16, 16), (8, 8)]
    assert "clamped" in caplog.text


# -- warp ------------------------------------------------------------------


def test_zero_flow_warp_is_identity():
    frame = Frame(np.random.default_rng(1).random((24, 40)))
    out = warp(frame, FlowField.zeros(24, 40))
    assert np.array_equal(interior(out.intensities), interior(frame.intensities))


def test_constant_flow_on_ramp_shifts_one_column():
    ramp = np.tile(np.linspace(0.0, 1.0, 50), (20, 1))
    out = warp(Frame(ramp), FlowField(np.ones((20, 50)), np.zeros((20, 50))))
    assert np.max(np.abs(out.intensities[:, 1:-2] - ramp[:, 2:-1])) < 1e-6


def test_warp_round_trip_smooth_image():
    rng = np.random.default_rng(2)
    image = Frame(smooth_texture(rng, 96, 0, sigma=4.0))
    yy, xx = np.mgrid[0:96, 0:96] / 96.0
    w = FlowField(1.5 * np.sin(2 * np.pi * yy), 1.2 * np.cos(2 * np.pi * xx))
    back = warp(warp(image, w), FlowField(-w.u, -w.v))
    assert np.mean(np.abs(interior(back.intensities) - interior(image.intensities))) < 0.02


def test_warp_rejects_size_mismatch():
    with pytest.raises(ValueError):
        warp(Frame(np.zeros((10, 10))), FlowField.zeros(10, 11))


# -- TV-L1 -----------------------------------------------------------------


def test_params_reject_unstable_tau():
    with pytest.raises(ValueError):
        TvL1Params(tau=0.25)


def test_identical_frames_give_zero_flow():
    frame = Frame(smooth_texture(np.random.default_rng(3), 64))
    flow = tv_l1_flow(frame, frame)
    assert np.mean(np.abs(flow.u)) < 0.05 and np.mean(np.abs(flow.v)) < 0.05


def test_recovers_unit_horizontal_translation():
    prev, nxt = translated_pair(np.random.default_rng(4), 1, 0)
    flow = tv_l1_flow(prev, nxt)
    epe = np.hypot(interior(flow.u) - 1, interior(flow.v))
    assert epe.mean() < 0.25


def test_recovers_vertical_translation_by_two():
    prev, nxt = translated_pair(np.random.default_rng(5), 0, 2)
    v = interior(tv_l1_flow(prev, nxt).v).mean()
    assert 1.6 <= v <= 2.4


def test_swapped_inputs_negate_flow():
    prev, nxt = translated_pair(np.random.default_rng(6), 2, 1)
    fwd = tv_l1_flow(prev, nxt)
    bwd = tv_l1_flow(nxt, prev)
    err = np.hypot(interior(fwd.u + bwd.u), interior(fwd.v + bwd.v))
    assert err.mean() < 0.3


@pytest.mark.parametrize("seed,shift", [(7, (1, 0)), (8, (0, 2)), (9, (2, 1)), (10, (1, 1))])
def test_energy_non_increasing_across_finest_warps(seed, shift):
    prev, nxt = translated_pair(np.random.default_rng(seed), *shift)
    trace: list[float] = []
    tv_l1_flow(prev, nxt, trace=trace)
    assert len(trace) == TvL1Params().warps
    assert np.all(np.diff(trace) <= 1e-6)


def test_flow_is_deterministic():
    prev, nxt = translated_pair(np.random.default_rng(11), 1, 1)
    a = tv_l1_flow(prev, nxt)
    b = tv_l1_flow(prev, nxt)
    assert np.array_equal(a.u, b.u) and np.array_equal(a.v, b.v)


def test_flow_rejects_mismatch_and_tiny_frames():
    with pytest.raises(ValueError):
        tv_l1_flow(Frame(np.zeros((32, 32))), Frame(np.zeros((32, 30))))
    with pytest.raises(ValueError):
        tv_l1_flow(Frame(np.zeros((12, 32))), Frame(np.zeros((12, 32))))


# -- export ----------------------------------------------------------------


def test_zero_flow_exports_midpoint():
    q = flow_to_export(FlowField.zeros(4, 5), clip=16)
    assert np.all(q.u == 128) and np.all(q.v == 128)


def test_export_endpoints():
    q = flow_to_export(FlowField(np.array([[16.0, -16.0, 40.0]]), np.zeros((1, 3))), clip=16)
    assert q.u.tolist() == [[255, 0, 255]]


def test_quantization_error_bound():
    rng = np.random.default_rng(12)
    flow = FlowField(rng.uniform(-16, 16, (30, 30)), rng.uniform(-16, 16, (30, 30)))
    back = flow_to_export(flow, 16.0).dequantize()
    assert np.max(np.abs(back.u - flow.u)) <= 16.0 / 255 + 1e-12
    assert np.max(np.abs(back.v - flow.v)) <= 16.0 / 255 + 1e-12


def test_export_rejects_non_positive_clip():
    with pytest.raises(ValueError):
        flow_to_export(FlowField.zeros(2, 2), clip=0)


def test_luma_conversion():
    rgb = np.zeros((2, 2, 3))
    rgb[..., 1] = 1.0
    assert np.allclose(Frame.from_rgb(rgb).intensities, 0.587)
