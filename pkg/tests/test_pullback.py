import json

import numpy as np
import pytest

from fibcap.pullback import (
    ClassTag,
    Geometry,
    Mask,
    PolarFrame,
    Pullback,
    PullbackFormatError,
    load_mask,
    load_pullback,
    log_display,
    polar_to_cartesian,
    read_pgm,
    save_mask,
    save_pullback,
    write_pgm,
)


def _write_container(tmp_path, n=5, nr=968, nt=448, payload=None, dtype="u16", **meta):
    side = {
        "n_frames": n, "n_r": nr, "n_theta": nt, "dtype": dtype, "max_raw": 65535,
        "radial_spacing_um": 5.0, "frame_spacing_mm": 0.2, "catheter_offset_um": 400.0,
        "pullback_id": "pb1",
    }
    side.update(meta)
    (tmp_path / "pb.json").write_text(json.dumps(side))
    if payload is None:
        payload = np.random.default_rng(0).integers(0, 65536, size=(n, nr, nt), dtype=np.uint16).astype("<u2").tobytes()
    (tmp_path / "pb.ivp").write_bytes(payload)
    return tmp_path / "pb.ivp"


def test_load_full_size_container(tmp_path):
    pb = load_pullback(_write_container(tmp_path))
    assert (pb.n_frames, pb.n_r, pb.n_theta) == (5, 968, 448)
    assert pb.geometry.theta_count == 448
    assert 0.0 <= pb.volume().min() and pb.volume().max() <= 1.0


def test_payload_one_byte_short(tmp_path):
    payload = bytes(5 * 968 * 448 * 2 - 1)
    with pytest.raises(PullbackFormatError, match="payload size mismatch"):
        load_pullback(_write_container(tmp_path, payload=payload))


def test_all_zero_payload(tmp_path):
    pb = load_pullback(_write_container(tmp_path, n=2, nr=10, nt=8, payload=bytes(2 * 10 * 8 * 2)))
    assert np.all(pb.volume() == 0.0)


def test_missing_and_corrupt_sidecar(tmp_path):
    p = _write_container(tmp_path, n=1, nr=4, nt=8, payload=bytes(64))
    (tmp_path / "pb.json").write_text("{not json")
    with pytest.raises(PullbackFormatError, match="corrupt sidecar"):
        load_pullback(p)
    (tmp_path / "pb.json").unlink()
    with pytest.raises(PullbackFormatError, match="missing sidecar"):
        load_pullback(p)


def test_non_finite_f32_payload(tmp_path):
    raw = np.zeros((1, 4, 8), "<f4")
    raw[0, 0, 0] = np.nan
    with pytest.raises(PullbackFormatError, match="non-finite"):
        load_pullback(_write_container(tmp_path, n=1, nr=4, nt=8, payload=raw.tobytes(), dtype="f32", max_raw=1.0))


@pytest.mark.parametrize("dtype,max_raw", [("u16", 65535), ("f32", 3.5)])
def test_round_trip_byte_identical(tmp_path, dtype, max_raw):
    rng = np.random.default_rng(1)
    if dtype == "u16":
        raw = rng.integers(0, 65536, size=(3, 12, 16)).astype("<u2")
    else:
        raw = (rng.random((3, 12, 16)) * max_raw).astype("<f4")
    src = _write_container(tmp_path, n=3, nr=12, nt=16, payload=raw.tobytes(), dtype=dtype, max_raw=max_raw)
    pb = load_pullback(src)
    out = tmp_path / "copy" / "pb2.ivp"
    save_pullback(pb, out)
    assert out.read_bytes() == src.read_bytes()


def test_pullback_invariants():
    with pytest.raises(ValueError):
        Pullback.from_array(np.zeros((2, 4, 8)), Geometry(theta_count=16))
    with pytest.raises(ValueError):
        PolarFrame(np.array([[-1.0]]))
    with pytest.raises(ValueError):
        Geometry(radial_spacing_um=0)


def test_mask_alignment_and_values():
    f = PolarFrame(np.zeros((4, 8)))
    Mask(np.zeros((4, 8), np.uint8)).aligned_to(f)
    with pytest.raises(ValueError):
        Mask(np.zeros((4, 9), np.uint8)).aligned_to(f)
    with pytest.raises(ValueError):
        Mask(np.full((2, 2), 2))


def test_mask_pgm_round_trip(tmp_path):
    m = Mask((np.random.default_rng(0).random((20, 30)) > 0.5).astype(np.uint8), ClassTag.FC)
    save_mask(m, tmp_path / "m.pgm")
    raw = read_pgm(tmp_path / "m.pgm")
    assert set(np.unique(raw)) <= {0, 255}
    np.testing.assert_array_equal(load_mask(tmp_path / "m.pgm").data, m.data)


def test_pgm_16bit(tmp_path):
    img = np.array([[0, 100], [655, 300]], dtype=np.uint16)
    write_pgm(tmp_path / "h.pgm", img, maxval=655)
    np.testing.assert_array_equal(read_pgm(tmp_path / "h.pgm"), img)


# -- display -----------------------------------------------------------------

def test_cartesian_constant_frame_is_annulus():
    geo = Geometry(theta_count=64, catheter_offset_um=400.0, radial_spacing_um=5.0)
    img = polar_to_cartesian(PolarFrame(np.full((100, 64), 0.7)), geo, 201)
    c = (np.arange(201) + 0.5) * (2 * 900.0 / 201) - 900.0
    rho = np.hypot(c[None, :], c[:, None])
    inside = (rho >= 400) & (rho <= 400 + 99 * 5)
    np.testing.assert_allclose(img[inside], 0.7, atol=1e-12)
    assert np.all(img[~inside] == 0)


def test_cartesian_bright_aline_maps_to_plus_x():
    geo = Geometry(theta_count=360, catheter_offset_um=100.0, radial_spacing_um=5.0)
    data = np.zeros((80, 360))
    data[:, 0] = 1.0
    img = polar_to_cartesian(PolarFrame(data), geo, 200)
    mid = 100
    # the ray lies between rows mid-1 and mid (y = 0) to the right of centre
    right = img[mid - 1:mid + 1, mid + 60:mid + 98]  # a 1 degree A-line is under a pixel wide nearer in
    assert right.min() > 0.4
    assert img[mid - 1:mid + 1, :mid - 15].max() == 0
    assert img[:mid - 20, mid - 1:mid + 1].max() == 0


def test_cartesian_rotation_invariance():
    geo = Geometry(theta_count=32)
    rows = np.random.default_rng(0).random(50)[:, None] * np.ones((1, 32))
    a = polar_to_cartesian(PolarFrame(rows), geo, 64)
    b = polar_to_cartesian(PolarFrame(np.roll(rows, 7, axis=1)), geo, 64)
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_cartesian_out_size_precondition():
    with pytest.raises(ValueError):
        polar_to_cartesian(PolarFrame(np.zeros((4, 8))), Geometry(theta_count=8), 1)


def test_log_display():
    assert np.all(log_display(PolarFrame(np.zeros((3, 8)))) == 0)
    out = log_display(PolarFrame(np.array([[0.1, 0.2, 0.9]])))
    assert out[0, 0] < out[0, 1] < out[0, 2]
    assert out.max() == 1.0
