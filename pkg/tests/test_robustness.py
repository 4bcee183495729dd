import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transmix import robustness as R
from transmix import vit
from transmix.data import Dataset
from transmix.errors import ConfigError, ContractError
from transmix.mix import CutBox

SMALL = vit.ModelConfig(image_h=16, image_w=16, channels=3, patch_size=4, embed_dim=16, heads=2, depth=1, num_classes=2)


def _img(seed=0, c=3, h=16, w=16):
    return np.random.default_rng(seed).uniform(1.0, 2.0, size=(c, h, w))


def test_drop_ratio_zero_is_identity():
    img = _img()
    out = R.drop_patches(img, None, R.OcclusionSpec(0.0), 4, np.random.default_rng(0))
    np.testing.assert_array_equal(out, img)


def test_drop_ratio_one_fills_everything():
    out = R.drop_patches(_img(), None, R.OcclusionSpec(1.0), 4, np.random.default_rng(0))
    assert not out.any()


def test_drop_count_rounds_half_up():
    assert R.OcclusionSpec(0.51).count(196) == 100  # 99.96 -> 100
    assert R.OcclusionSpec(0.5).count(3) == 2
    assert R.OcclusionSpec(0.1).count(196) == 20


def test_drop_leaves_unselected_patches_untouched():
    img = _img(1)
    out = R.drop_patches(img, None, R.OcclusionSpec(0.5), 4, np.random.default_rng(3))
    dropped = vit.patchify(out, 4)
    orig = vit.patchify(img, 4)
    zero = ~dropped.any(axis=1)
    assert zero.sum() == 8
    np.testing.assert_array_equal(dropped[~zero], orig[~zero])


def test_salient_drops_highest_attention():
    attn = np.zeros(16)
    attn[[3, 7]] = [0.5, 0.4]
    out = R.drop_patches(_img(2), attn, R.OcclusionSpec(2 / 16, "salient"), 4, np.random.default_rng(0))
    zero = np.flatnonzero(~vit.patchify(out, 4).any(axis=1))
    np.testing.assert_array_equal(zero, [3, 7])


def test_nonsalient_drops_lowest_attention():
    attn = np.arange(16, dtype=float)
    out = R.drop_patches(_img(2), attn, R.OcclusionSpec(3 / 16, "nonsalient"), 4, np.random.default_rng(0))
    np.testing.assert_array_equal(np.flatnonzero(~vit.patchify(out, 4).any(axis=1)), [0, 1, 2])


def test_salient_needs_attention():
    with pytest.raises(ContractError):
        R.drop_patches(_img(), None, R.OcclusionSpec(0.5, "salient"), 4, np.random.default_rng(0))


def test_occlusion_spec_validation():
    with pytest.raises(ConfigError):
        R.OcclusionSpec(1.5)
    with pytest.raises(ConfigError):
        R.OcclusionSpec(0.5, "sideways")


def test_shuffle_grid_one_is_identity():
    img = _img()
    np.testing.assert_array_equal(R.shuffle_patches(img, 1, np.random.default_rng(0)), img)


def test_shuffle_preserves_pixel_multiset():
    img = _img(4)
    out = R.shuffle_patches(img, 16, np.random.default_rng(1))
    np.testing.assert_array_equal(np.sort(out, axis=None), np.sort(img, axis=None))


def test_shuffle_two_by_two_follows_permutation():
    img = np.arange(16, dtype=float).reshape(1, 4, 4)
    perm = R.shuffle_permutation(4, np.random.default_rng(7))
    out = R.shuffle_patches(img, 4, np.random.default_rng(7))
    cells = [img[:, 0:2, 0:2], img[:, 0:2, 2:4], img[:, 2:4, 0:2], img[:, 2:4, 2:4]]
    got = [out[:, 0:2, 0:2], out[:, 0:2, 2:4], out[:, 2:4, 0:2], out[:, 2:4, 2:4]]
    for i in range(4):
        np.testing.assert_array_equal(got[i], cells[perm[i]])


def test_shuffle_rejects_bad_grids():
    with pytest.raises(ContractError):
        R.shuffle_patches(_img(), 3, np.random.default_rng(0))
    with pytest.raises(ContractError):
        R.shuffle_patches(_img(h=15, w=15), 4, np.random.default_rng(0))


@pytest.fixture(scope="module")
def small_model():
    params = vit.init_params(SMALL, seed=0)
    rng = np.random.default_rng(0)
    ds = Dataset(rng.standard_normal((12, 3, 16, 16)).astype(np.float32), rng.integers(0, 2, 12), 2)
    return params, ds


def test_occlusion_ratio_zero_is_clean_accuracy(small_model):
    params, ds = small_model
    from transmix.train import evaluate_top1

    curve = R.occlusion_curve(params, SMALL, ds, [0.0], "random")
    assert curve[0][1] == evaluate_top1(params, SMALL, ds)


@pytest.mark.parametrize("order", R.ORDERS)
def test_occlusion_full_drop_constant_prediction(small_model, order):
    params, ds = small_model
    (_, acc), = R.occlusion_curve(params, SMALL, ds, [1.0], order)
    pred = vit.predict(np.zeros_like(ds.images), params, SMALL)
    assert len(set(pred.tolist())) == 1
    assert acc == np.count_nonzero(ds.labels == pred[0]) / len(ds)


def test_occlusion_ratios_must_ascend(small_model):
    params, ds = small_model
    with pytest.raises(ContractError):
        R.occlusion_curve(params, SMALL, ds, [0.5, 0.1])


def test_shuffle_curve_grid_one_matches_clean(small_model):
    params, ds = small_model
    from transmix.train import evaluate_top1

    assert R.shuffle_curve(params, SMALL, ds, [1])[0][1] == evaluate_top1(params, SMALL, ds)


def test_mask_uniform_attention_keeps_ninety_percent():
    assert R.attention_to_mask(np.full(10, 0.1), 0.9).sum() == 9


def test_mask_single_spike():
    a = np.zeros(10)
    a[4] = 1.0
    m = R.attention_to_mask(a, 0.9)
    np.testing.assert_array_equal(np.flatnonzero(m), [4])


def test_mask_threshold_one_keeps_all_mass():
    a = np.array([0.5, 0.0, 0.3, 0.2])
    np.testing.assert_array_equal(R.attention_to_mask(a, 1.0), [1, 0, 1, 1])


def test_mask_value_mode():
    np.testing.assert_array_equal(R.attention_to_mask(np.array([0.1, 0.5, 0.95]), 0.5, "value"), [0, 1, 1])


def test_mask_rejects_bad_threshold():
    with pytest.raises(ContractError):
        R.attention_to_mask(np.ones(4), 0.0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), t1=st.floats(0.05, 1.0), t2=st.floats(0.05, 1.0))
def test_mask_monotone_in_threshold(seed, t1, t2):
    a = np.random.default_rng(seed).dirichlet(np.ones(16))
    lo, hi = sorted((t1, t2))
    m_lo, m_hi = R.attention_to_mask(a, lo), R.attention_to_mask(a, hi)
    assert np.all(m_lo <= m_hi)
    # the kept mass reaches the threshold
    assert a[m_hi == 1].sum() >= hi - 1e-9


def test_jaccard_hand_cases():
    a = np.array([[1, 1], [0, 0]])
    b = np.array([[1, 0], [1, 0]])
    assert R.jaccard(a, b) == pytest.approx(1 / 3)
    assert R.jaccard(a, a) == 1.0
    assert R.jaccard(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    assert R.jaccard(a, 1 - a) == 0.0


def test_jaccard_shape_mismatch():
    with pytest.raises(ContractError):
        R.jaccard(np.zeros(3), np.zeros(4))


def test_tight_bbox():
    m = np.zeros((6, 6))
    m[1, 2] = m[3, 4] = 1
    assert R.mask_to_tight_bbox(m) == CutBox(2, 1, 3, 3)
    assert R.mask_to_tight_bbox(np.zeros((3, 3))) is None


def test_bbox_iou_hand_cases():
    assert R.bbox_iou(CutBox(0, 0, 2, 2), CutBox(1, 0, 2, 2)) == pytest.approx(1 / 3)
    assert R.bbox_iou(CutBox(0, 0, 2, 2), CutBox(0, 0, 2, 2)) == 1.0
    assert R.bbox_iou(CutBox(0, 0, 2, 2), CutBox(5, 5, 1, 1)) == 0.0
    assert R.bbox_iou(None, CutBox(0, 0, 1, 1)) == 0.0


boxes = st.builds(CutBox, st.integers(0, 10), st.integers(0, 10), st.integers(1, 10), st.integers(1, 10))


@settings(max_examples=100, deadline=None)
@given(a=boxes, b=boxes)
def test_bbox_iou_symmetric_and_bounded(a, b):
    v = R.bbox_iou(a, b)
    assert v == R.bbox_iou(b, a)
    assert 0.0 <= v <= 1.0


def test_upsample_patch_mask():
    up = R.upsample_patch_mask(np.array([1, 0, 0, 1]), (2, 2), 2)
    np.testing.assert_array_equal(up, [[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]])


def test_write_results_format(tmp_path):
    path = tmp_path / "r.csv"
    R.write_results(path, [("shuffle", 4, 0.5), ("shuffle", 16, 0.25)])
    assert path.read_bytes() == b"protocol,parameter,metric\nshuffle,4,0.5\nshuffle,16,0.25\n"
