import numpy as np
import pytest

from fibcap.postprocess import binarize, disk, fill_holes, open_disk, postprocess
from fibcap.pullback import ClassTag, Mask
from oracles import DISK3, fill_oracle, open_oracle, random_masks


def test_disk_radius3_matches_definition():
    assert sorted(disk(3)) == sorted(DISK3)
    assert len(disk(3)) == 29


def test_binarize_inclusive():
    assert binarize(np.full((3, 3), 0.5)).min() == 1
    assert binarize(np.full((3, 3), 0.49)).max() == 0
    assert binarize(np.random.default_rng(0).random((4, 4)), threshold=0.0).min() == 1


def test_open_single_pixel_and_empty():
    m = np.zeros((16, 16), np.uint8)
    m[8, 8] = 1
    assert open_disk(m).sum() == 0
    assert open_disk(np.zeros((16, 16))).sum() == 0


def test_open_block_matches_oracle():
    m = np.zeros((32, 40), bool)
    m[6:26, 10:30] = True
    out = open_disk(m).astype(bool)
    np.testing.assert_array_equal(out, open_oracle(m))
    assert out[10:22, 14:26].all()
    assert not out[6, 10]  # corners rounded


def test_open_wraps_theta():
    m = np.zeros((16, 16), bool)
    m[4:12, :4] = True
    m[4:12, 12:] = True  # one 8x8 block split across the seam
    out = open_disk(m).astype(bool)
    assert out[6:10, [0, 15]].all()
    # the seam behaves like any other column
    np.testing.assert_array_equal(np.roll(open_disk(np.roll(m, 4, axis=1)).astype(bool), -4, axis=1), out)


def test_fill_examples():
    ring = np.zeros((9, 9), np.uint8)
    ring[2:7, 2:7] = 1
    ring[4, 4] = 0
    assert fill_holes(ring)[4, 4] == 1
    channel = np.ones((9, 9), np.uint8)
    channel[0:5, 4] = 0  # open to the first row
    np.testing.assert_array_equal(fill_holes(channel), channel)
    full = np.ones((5, 5), np.uint8)
    np.testing.assert_array_equal(fill_holes(full), full)


def test_fill_hole_across_seam():
    m = np.ones((8, 10), np.uint8)
    m[3:5, 0] = 0
    m[3:5, 9] = 0
    assert fill_holes(m).min() == 1
    # without wrap both halves are still enclosed by the seam-free rows
    assert fill_holes(m, wrap=False).min() == 1


def test_fill_band_open_to_seam_only_when_not_wrapping():
    m = np.ones((6, 8), np.uint8)
    m[2:4, :] = 0  # full-width band touching neither r border
    assert fill_holes(m).min() == 1


def test_fill_eight_connectivity_leaks_diagonally():
    m = np.ones((5, 5), np.uint8)
    m[2, 2] = 0
    m[1, 1] = 0
    m[0, 0] = 0
    assert fill_holes(m, connectivity=4)[2, 2] == 1
    assert fill_holes(m, connectivity=8)[2, 2] == 0


@pytest.mark.parametrize("seed", range(4))
def test_pipeline_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    for m in random_masks(rng, 50, (16, 16)):
        opened = open_disk(m).astype(bool)
        np.testing.assert_array_equal(opened, open_oracle(m))
        np.testing.assert_array_equal(fill_holes(opened).astype(bool), fill_oracle(opened))
        assert not (opened & ~m).any()                       # anti-extensive
        np.testing.assert_array_equal(open_disk(opened).astype(bool), opened)  # idempotent


def test_fill_is_extensive_on_random_masks():
    rng = np.random.default_rng(9)
    for m in random_masks(rng, 100, (32, 32)):
        filled = fill_holes(m).astype(bool)
        assert not (m & ~filled).any()
        np.testing.assert_array_equal(filled, fill_oracle(m))


def test_postprocess_pipeline_and_mask_type():
    prob = np.zeros((20, 24))
    prob[3:15, 4:20] = 0.8
    prob[8, 10] = 0.1  # hole
    out = postprocess(prob)
    assert out[8, 10] == 1 and out.sum() > 0
    m = Mask((prob > 0.5).astype(np.uint8), ClassTag.FC)
    assert isinstance(open_disk(m), Mask) and open_disk(m).class_tag is ClassTag.FC
