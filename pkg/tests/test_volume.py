import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxelseg import volume as V
from oracles import components_bfs, metrics_loop, postprocess_bruteforce


def test_crop_to_bounding_box():
    v = np.zeros((6, 7, 8))
    v[2:4, 1:6, 3] = 5.0
    crop, off = V.crop_to_bounding_box(v)
    assert crop.shape == (2, 5, 1) and off == (2, 1, 3)
    with pytest.raises(ValueError):
        V.crop_to_bounding_box(np.zeros((2, 2, 2)))


def test_mask_voxel_range_uses_floor_and_ceil():
    assert V.mask_voxel_range((100, 100, 100)) == ((39, 84), (27, 70), (19, 83))
    assert V.mask_voxel_range((10, 10, 10)) == ((3, 9), (2, 7), (1, 9))
    assert V.mask_voxel_range((4, 4, 4), V.FULL_MASK) == ((0, 4),) * 3


def test_mask_box_validation():
    with pytest.raises(ValueError):
        V.MaskBox((0.5, 0, 0), (0.4, 1, 1))


def test_image_mask_ranges_are_in_volume_coordinates():
    v = np.zeros((30, 30, 30))
    v[10:20, 5:25, 0:10] = 1.0
    assert V.image_mask_ranges(v) == ((13, 19), (10, 19), (1, 9))


def test_connected_components_six_connectivity():
    lab = np.zeros((3, 3, 3), dtype=np.uint8)
    lab[0, 0, 0] = 1
    lab[1, 1, 0] = 1  # diagonal neighbour only: separate blob
    blobs = V.connected_components(lab)
    # x-fastest order: (0,0,0), then the background starting at (1,0,0), then (1,1,0)
    assert [b.label for b in blobs] == [1, 0, 1]
    assert [b.size for b in blobs] == [1, 25, 1]
    np.testing.assert_array_equal(blobs[0].voxels, [[0, 0, 0]])
    np.testing.assert_array_equal(blobs[2].voxels, [[1, 1, 0]])
    np.testing.assert_allclose(blobs[2].centroid, [1, 1, 0])


def _random_labels(rng, max_dim=16, p_pos=None):
    dims = tuple(rng.integers(1, max_dim + 1, 3))
    p = p_pos if p_pos is not None else rng.uniform(0.05, 0.6)
    r = rng.random(dims)
    lab = np.where(r < p / 2, 1, np.where(r < p, 2, 0)).astype(np.uint8)
    return lab


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_label_blobs_matches_flood_fill(seed):
    lab = _random_labels(np.random.default_rng(seed), 8)
    ids, sizes, classes, _ = V.label_blobs(lab)
    rids, rsizes, rclasses = components_bfs(lab)
    np.testing.assert_array_equal(ids, rids)
    np.testing.assert_array_equal(sizes, rsizes)
    np.testing.assert_array_equal(classes, rclasses)


def test_postprocess_removes_small_positive_blob():
    lab = np.zeros((10, 10, 10), dtype=np.uint8)
    lab[1:6, 1:6, 1:6] = 1  # 125 voxels
    lab[8, 8, 8] = 2
    out = V.postprocess(lab, min_blob=10)
    assert out[8, 8, 8] == 0
    assert (out[1:6, 1:6, 1:6] == 1).all()


def test_postprocess_fills_hole_with_nearest_class():
    lab = np.zeros((12, 5, 5), dtype=np.uint8)
    lab[0:5] = 1
    lab[7:12] = 2
    lab[2, 2, 2] = 0  # hole in the left blob
    lab[9, 2, 2] = 0  # hole in the right blob
    out = V.postprocess(lab, min_blob=4)
    assert out[2, 2, 2] == 1 and out[9, 2, 2] == 2


def test_postprocess_tie_goes_left():
    lab = np.array([1, 1, 0, 2, 2], dtype=np.uint8).reshape(5, 1, 1)
    out = V.postprocess(lab, min_blob=2)
    # the isolated negative voxel is equidistant from both centroids
    assert out[2, 0, 0] == 1


def test_postprocess_uses_input_centroids_simultaneously():
    lab = np.zeros((9, 1, 1), dtype=np.uint8)
    lab[0:3] = 1
    lab[3] = 2  # small positive: removed
    lab[5:9] = 2
    out = V.postprocess(lab, min_blob=2)
    # voxel 4 is a 1-voxel negative blob; the removed voxel still counts for RIGHT's centroid
    assert out[3, 0, 0] == 0
    assert out[4, 0, 0] == 2


def test_postprocess_all_negative_is_noop():
    lab = np.zeros((4, 4, 4), dtype=np.uint8)
    np.testing.assert_array_equal(V.postprocess(lab, 500), lab)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12))
def test_postprocess_matches_bruteforce(seed, min_blob):
    lab = _random_labels(np.random.default_rng(seed), 10)
    np.testing.assert_array_equal(V.postprocess(lab, min_blob),
                                  postprocess_bruteforce(lab, min_blob))


def test_segmentation_metrics_counts():
    rng = np.random.default_rng(0)
    a = _random_labels(rng, 10, 0.5)
    b = rng.integers(0, 3, a.shape).astype(np.uint8)
    m = V.segmentation_metrics(a, b)
    assert (m.false_pos, m.false_neg, m.left_right_confusion) == metrics_loop(a, b)
    perfect = V.segmentation_metrics(b, b)
    assert perfect.false_pos == perfect.false_neg == perfect.left_right_confusion == 0
    assert perfect.precision == perfect.recall == 1.0


def test_label_checks():
    with pytest.raises(ValueError):
        V.postprocess(np.full((2, 2, 2), 3, dtype=np.uint8))
    with pytest.raises(ValueError):
        V.segmentation_metrics(np.zeros((2, 2, 2), np.uint8), np.zeros((2, 2, 3), np.uint8))


def test_vvol_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    vol = rng.normal(size=(3, 4, 5)).astype(np.float32).astype(np.float64)
    lab = rng.integers(0, 3, (3, 4, 5)).astype(np.uint8)
    V.write_vvol(tmp_path / "v.vvol", vol)
    V.write_vvol(tmp_path / "l.vvol", lab)
    np.testing.assert_array_equal(V.read_vvol(tmp_path / "v.vvol"), vol)
    got = V.read_vvol(tmp_path / "l.vvol")
    assert got.dtype == np.uint8
    np.testing.assert_array_equal(got, lab)


def test_vvol_payload_is_x_fastest(tmp_path):
    lab = np.zeros((2, 2, 1), dtype=np.uint8)
    lab[1, 0, 0] = 7
    V.write_vvol(tmp_path / "l.vvol", lab)
    payload = (tmp_path / "l.vvol").read_bytes()[18:]
    assert payload == bytes([0, 7, 0, 0])


def test_vvol_rejects_bad_magic(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"XXXXX" + bytes(13))
    with pytest.raises(ValueError):
        V.read_vvol(p)
