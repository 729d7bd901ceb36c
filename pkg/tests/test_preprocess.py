import numpy as np
import pytest

from fibcap.phantom import GuidewireSpec, LumenSpec, PhantomSpec, SpeckleSpec, generate
from fibcap.preprocess import (
    GuidewireShadow,
    LumenBoundary,
    LumenNotFoundError,
    crop_and_filter,
    detect_guidewire,
    detect_guidewire_pullback,
    gaussian_kernel,
    pixel_shift,
    preprocess_frame,
    preprocess_pullback,
    segment_lumen,
)
from fibcap.pullback import PolarFrame


def _phantom(lumen=LumenSpec(120.0), gw=GuidewireSpec(300.0, 30), snr=5.0, n_frames=1, seed=0):
    spec = PhantomSpec(n_frames=n_frames, lumen=lumen, guidewire=gw, speckle=SpeckleSpec(snr=snr), seed=seed)
    return generate(spec)


def _iou(a, b):
    ma, mb = a.column_mask(), b.column_mask()
    return (ma & mb).sum() / (ma | mb).sum()


# -- guidewire ----------------------------------------------------------------

def test_guidewire_columns_100_to_139():
    pb, truth = _phantom(gw=GuidewireSpec(119.5, 40))
    assert list(truth.shadows[0].columns()[[0, -1]]) == [100, 139]
    s = detect_guidewire(pb.frames[0])
    assert abs(s.theta_start - 100) <= 2 and abs(s.theta_end - 139) <= 2
    assert not s.low_confidence


def test_guidewire_uniform_frame_low_confidence():
    s = detect_guidewire(PolarFrame(np.full((100, 448), 0.5)))
    assert s.width == 30
    assert s.low_confidence


def test_guidewire_wrapping_interval():
    # columns 430..447 and 0..10
    pb, truth = _phantom(gw=GuidewireSpec(444.0, 29))
    cols = truth.shadows[0].columns()
    assert cols[0] == 430 and cols[-1] == 10
    s = detect_guidewire(pb.frames[0])
    assert s.theta_start > s.theta_end  # wrapped
    assert _iou(s, truth.shadows[0]) >= 0.8


def test_guidewire_narrow_frame():
    with pytest.raises(ValueError):
        detect_guidewire(PolarFrame(np.zeros((10, 7))))


def test_guidewire_pullback_tracks_drift():
    pb, truth = _phantom(gw=GuidewireSpec(200.0, 30, drift_amp=6.0, drift_period=8.0), n_frames=8, seed=3)
    for s, t in zip(detect_guidewire_pullback(pb.frames), truth.shadows):
        assert _iou(s, t) >= 0.8


def test_shadow_interval_validation():
    with pytest.raises(ValueError):
        GuidewireShadow(0, 448, 448)
    assert GuidewireShadow(440, 5, 448).width == 14


# -- lumen --------------------------------------------------------------------

def test_lumen_constant_radius():
    pb, truth = _phantom(lumen=LumenSpec(37.0))
    lum = segment_lumen(pb.frames[0], truth.shadows[0])
    assert np.max(np.abs(lum.r_index[lum.valid] - 37)) <= 1
    assert not lum.valid[truth.shadows[0].columns()].any()


def test_lumen_sinusoid():
    pb, truth = _phantom(lumen=LumenSpec(50.0, ((1, 10.0, -np.pi / 2, 0.0),)))
    n = 448
    expected = np.rint(50 + 10 * np.sin(2 * np.pi * np.arange(n) / n))
    lum = segment_lumen(pb.frames[0], truth.shadows[0])
    assert np.max(np.abs(lum.r_index[lum.valid] - expected[lum.valid])) <= 2


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_lumen_error_on_speckled_phantoms(seed):
    lumen = LumenSpec(130.0, ((1, 15.0, 0.3, 0.0), (3, 4.0, 1.0, 0.0)))
    pb, truth = _phantom(lumen=lumen, gw=GuidewireSpec(60.0 + 100 * seed, 30), seed=seed)
    lum = segment_lumen(pb.frames[0], detect_guidewire(pb.frames[0]))
    ok = lum.valid & truth.lumens[0].valid
    assert np.max(np.abs(lum.r_index[ok] - truth.lumens[0].r_index[ok])) <= 2


def test_lumen_all_zero():
    with pytest.raises(LumenNotFoundError, match="no lumen found"):
        segment_lumen(PolarFrame(np.zeros((50, 16))), GuidewireShadow(0, 3, 16))


# -- pixel shift ------------------------------------------------------------------

def _boundary(idx):
    idx = np.asarray(idx)
    return LumenBoundary(idx, np.ones(idx.shape, bool))


def test_pixel_shift_example():
    col = np.array([0, 0, 0, 5, 9, 7, 2, 1.0])
    out = pixel_shift(col[:, None], _boundary([3]))
    np.testing.assert_array_equal(out[:, 0], [5, 9, 7, 2, 1, 0, 0, 0])


def test_pixel_shift_identity_and_last_row():
    data = np.random.default_rng(0).random((6, 4))
    np.testing.assert_array_equal(pixel_shift(data, _boundary([0] * 4)), data)
    out = pixel_shift(data, _boundary([5] * 4))
    np.testing.assert_array_equal(out[0], data[5])
    assert np.all(out[1:] == 0)


def test_pixel_shift_zeroes_shadow_and_conserves_mass():
    rng = np.random.default_rng(1)
    data = np.zeros((20, 8))
    data[5:12] = rng.random((7, 8))
    lum = _boundary(rng.integers(0, 6, 8))
    out = pixel_shift(data, lum, GuidewireShadow(7, 0, 8))
    assert np.all(out[:, [7, 0]] == 0)
    np.testing.assert_allclose(out[:, 1:7].sum(axis=0), data[:, 1:7].sum(axis=0))


# -- crop and filter ------------------------------------------------------------------

def test_kernel_properties():
    k = gaussian_kernel()
    assert abs(k.sum() - 1) < 1e-12
    np.testing.assert_array_equal(k, k[::-1])
    assert k[3] == pytest.approx(1 / 2.5058, abs=1e-4)


def test_crop_shape_and_constant():
    out = crop_and_filter(np.full((968, 448), 0.3))
    assert out.data.shape == (200, 448)
    np.testing.assert_allclose(out.data, 0.3, atol=1e-12)


def test_crop_impulse_response():
    x = np.zeros((968, 448))
    x[100, 200] = 1.0
    out = crop_and_filter(x).data
    assert out[100, 200] == pytest.approx(0.1593, abs=1e-4)
    assert out.sum() == pytest.approx(1.0, abs=1e-12)
    # symmetric under reflection in both axes
    patch = out[97:104, 197:204]
    np.testing.assert_allclose(patch, patch[::-1], atol=1e-15)
    np.testing.assert_allclose(patch, patch[:, ::-1], atol=1e-15)


def test_crop_wraps_theta():
    x = np.zeros((200, 16))
    x[50, 0] = 1.0
    out = crop_and_filter(x).data
    assert out[50, 15] == pytest.approx(out[50, 1])


def test_crop_too_shallow():
    with pytest.raises(ValueError):
        crop_and_filter(np.zeros((199, 8)))


def test_preprocess_deterministic_and_aligned():
    pb, truth = _phantom(n_frames=2, seed=5)
    a = preprocess_pullback(pb)
    b = preprocess_pullback(pb)
    for x, y in zip(a, b):
        assert x.data.tobytes() == y.data.tobytes()
    pf = preprocess_frame(pb.frames[0], truth.shadows[0])
    valid = pf.lumen.valid
    # row 0 after shifting should sit on tissue, not lumen
    assert np.median(pf.data[0, valid]) > 0.1
    assert np.all(pf.data[:, ~valid] == 0)
