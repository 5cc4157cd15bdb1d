"""Prototype head: pooling oracles, fusion, prediction, label decoding."""

import numpy as np
import pytest

from sipl import autodiff as ad
from sipl.errors import ConfigError, DimensionError
from sipl.ipl import (
    fuse_prototypes,
    instance_proposals,
    label_map,
    pixel_to_prototype_prob,
    predict_masks,
)
from sipl.nn import MLP


def weighted_pool_oracle(f, mask):
    """Explicit voxel loop for sum(m*f)/sum(m)."""
    num = np.zeros(f.shape[3])
    den = 0.0
    for i in range(f.shape[0]):
        for j in range(f.shape[1]):
            for t in range(f.shape[2]):
                num += mask[i, j, t] * f[i, j, t]
                den += mask[i, j, t]
    return num / den


def test_instance_proposals_uniform_mask_equals_gap():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(2, 2, 2, 3))
    m = np.zeros((2, 2, 2, 2))
    m[..., 1] = 0.37  # constant foreground confidence
    out = instance_proposals(ad.Tensor(f), ad.Tensor(m)).data
    assert np.allclose(out[0], f.reshape(-1, 3).mean(axis=0), atol=1e-12)


def test_instance_proposals_one_hot_voxel():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(2, 2, 2, 3))
    m = np.zeros((2, 2, 2, 2))
    m[1, 0, 1, 1] = 1.0
    out = instance_proposals(ad.Tensor(f), ad.Tensor(m)).data
    assert np.allclose(out[0], f[1, 0, 1], atol=1e-12)


def test_instance_proposals_matches_loop_oracle():
    rng = np.random.default_rng(2)
    f = rng.normal(size=(2, 2, 2, 3))
    m = rng.random(size=(2, 2, 2, 3))  # K=2 foreground channels + background
    out = instance_proposals(ad.Tensor(f), ad.Tensor(m)).data
    for k in (1, 2):
        assert np.abs(out[k - 1] - weighted_pool_oracle(f, m[..., k])).max() < 1e-10


def test_instance_proposals_mask_resampled_to_feature_grid():
    rng = np.random.default_rng(3)
    f = rng.normal(size=(2, 2, 2, 4))
    m = np.zeros((4, 4, 4, 2))
    m[..., 1] = 0.5  # constant at finer resolution resamples to constant
    out = instance_proposals(ad.Tensor(f), ad.Tensor(m)).data
    assert np.allclose(out[0], f.reshape(-1, 4).mean(axis=0), atol=1e-12)


def test_instance_proposals_scale_invariance():
    rng = np.random.default_rng(4)
    f = rng.normal(size=(2, 2, 2, 3))
    m = rng.random(size=(2, 2, 2, 2))
    base = instance_proposals(ad.Tensor(f), ad.Tensor(m)).data
    scaled = instance_proposals(ad.Tensor(f), ad.Tensor(m * 7.3)).data
    assert np.allclose(base, scaled, atol=1e-12)


def test_instance_proposals_vanishing_mass_falls_back_to_gap():
    rng = np.random.default_rng(5)
    f = rng.normal(size=(2, 2, 2, 3))
    m = np.zeros((2, 2, 2, 2))
    out = instance_proposals(ad.Tensor(f), ad.Tensor(m)).data
    assert np.allclose(out[0], f.reshape(-1, 3).mean(axis=0), atol=1e-12)


def test_instance_proposals_count_mode_divides_by_voxels():
    rng = np.random.default_rng(6)
    f = rng.normal(size=(2, 2, 2, 3))
    m = rng.random(size=(2, 2, 2, 2))
    out = instance_proposals(ad.Tensor(f), ad.Tensor(m), pooling="count").data
    want = (m[..., 1:2] * f).sum(axis=(0, 1, 2)) / 8.0
    assert np.allclose(out[0], want, atol=1e-12)
    with pytest.raises(ConfigError):
        instance_proposals(ad.Tensor(f), ad.Tensor(m), pooling="nonsense")


def test_instance_proposals_values_inside_feature_range():
    rng = np.random.default_rng(7)
    f = rng.normal(size=(3, 3, 3, 2))
    m = rng.random(size=(3, 3, 3, 3))
    out = instance_proposals(ad.Tensor(f), ad.Tensor(m)).data
    for c in range(2):
        assert out[:, c].min() >= f[..., c].min() - 1e-9
        assert out[:, c].max() <= f[..., c].max() + 1e-9


def test_nearest_resize_alternative():
    from sipl.ipl import resize_mask

    rng = np.random.default_rng(55)
    m = rng.random(size=(4, 4, 4, 2))
    same = resize_mask(ad.Tensor(m), (4, 4, 4), "nearest").data
    assert np.array_equal(same, m)
    up = resize_mask(ad.Tensor(m), (7, 7, 7), "nearest").data
    assert set(np.unique(up)).issubset(set(np.unique(m)))  # pure gathers, no blending
    with pytest.raises(ConfigError):
        resize_mask(ad.Tensor(m), (4, 4, 4), "bicubic")


def test_nearest_resize_gradients():
    rng = np.random.default_rng(56)
    x = ad.Tensor(rng.normal(size=(3, 3, 3, 2)), requires_grad=True)
    w = rng.normal(size=(5, 4, 3, 2))

    def f():
        return ad.tsum(ad.mul(ad.nearest_resize(x, (5, 4, 3)), ad.Tensor(w)))

    assert ad.grad_check(f, [x], rel_tol=1e-4).passed


def test_instance_proposals_nearest_mode_one_hot_voxel():
    rng = np.random.default_rng(57)
    f = rng.normal(size=(2, 2, 2, 3))
    m = np.zeros((2, 2, 2, 2))
    m[1, 0, 1, 1] = 1.0
    out = instance_proposals(ad.Tensor(f), ad.Tensor(m), resize="nearest").data
    assert np.allclose(out[0], f[1, 0, 1], atol=1e-12)


def test_fuse_zero_weights_zero_prototypes():
    rng = np.random.default_rng(8)
    mlp = MLP("fuse", [6, 4, 2], rng)
    for p in mlp.parameters():
        p.tensor.data[...] = 0.0
    out = fuse_prototypes(ad.Tensor(rng.normal(size=(3, 3))), ad.Tensor(rng.normal(size=(3, 3))), mlp)
    assert np.array_equal(out.data, np.zeros((3, 2)))


def test_fuse_identical_rows_fuse_identically():
    rng = np.random.default_rng(9)
    mlp = MLP("fuse", [6, 5, 4], rng)
    inst = np.tile(rng.normal(size=3), (2, 1))
    comm = np.tile(rng.normal(size=3), (2, 1))
    out = fuse_prototypes(ad.Tensor(inst), ad.Tensor(comm), mlp).data
    assert np.array_equal(out[0], out[1])


def test_fuse_no_cross_class_leakage():
    rng = np.random.default_rng(10)
    mlp = MLP("fuse", [6, 5, 4], rng)
    inst = rng.normal(size=(3, 3))
    comm = rng.normal(size=(3, 3))
    base = fuse_prototypes(ad.Tensor(inst), ad.Tensor(comm), mlp).data
    bumped = inst.copy()
    bumped[1] += 10.0
    out = fuse_prototypes(ad.Tensor(bumped), ad.Tensor(comm), mlp).data
    assert np.array_equal(out[0], base[0])
    assert np.array_equal(out[2], base[2])
    assert not np.array_equal(out[1], base[1])


def test_fuse_gradients():
    rng = np.random.default_rng(11)
    mlp = MLP("fuse", [6, 3, 2], rng)
    inst = ad.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    comm = ad.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    w = rng.normal(size=(2, 2))

    def f():
        return ad.tsum(ad.mul(fuse_prototypes(inst, comm, mlp), ad.Tensor(w)))

    assert ad.grad_check(f, [inst, comm] + mlp.parameters(), rel_tol=1e-4).passed


def test_fuse_row_mismatch():
    rng = np.random.default_rng(12)
    mlp = MLP("fuse", [6, 3, 2], rng)
    with pytest.raises(DimensionError):
        fuse_prototypes(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((3, 3))), mlp)


def test_predict_masks_zero_prototype_is_half():
    rng = np.random.default_rng(13)
    f_out = ad.Tensor(rng.normal(size=(2, 2, 2, 4)))
    fused = ad.Tensor(np.zeros((3, 4)))
    out = predict_masks(f_out, fused).data
    assert np.array_equal(out, np.full((2, 2, 2, 3), 0.5))


def test_predict_masks_saturates_along_prototype():
    g = np.array([[1.0, 0.0]])
    f_out = np.zeros((1, 1, 1, 2))
    f_out[0, 0, 0] = [50.0, 0.0]
    out = predict_masks(ad.Tensor(f_out), ad.Tensor(g)).data
    assert abs(out[0, 0, 0, 0] - 1.0) < 1e-12


def test_predict_masks_matches_loop_oracle():
    rng = np.random.default_rng(14)
    f_out = rng.normal(size=(2, 2, 2, 3))
    fused = rng.normal(size=(2, 3))
    got = predict_masks(ad.Tensor(f_out), ad.Tensor(fused)).data
    for i in range(2):
        for j in range(2):
            for t in range(2):
                for k in range(2):
                    logit = float(f_out[i, j, t] @ fused[k])
                    want = 1.0 / (1.0 + np.exp(-logit))
                    assert abs(got[i, j, t, k] - want) < 1e-12


def test_predict_masks_commutes_with_voxel_permutation():
    rng = np.random.default_rng(15)
    f_out = rng.normal(size=(2, 2, 2, 3))
    fused = rng.normal(size=(2, 3))
    base = predict_masks(ad.Tensor(f_out), ad.Tensor(fused)).data
    perm = rng.permutation(8)
    flat = f_out.reshape(8, 3)[perm].reshape(2, 2, 2, 3)
    out = predict_masks(ad.Tensor(flat), ad.Tensor(fused)).data
    assert np.allclose(out.reshape(8, 2), base.reshape(8, 2)[perm], atol=1e-15)


def test_predict_masks_width_mismatch():
    with pytest.raises(DimensionError):
        predict_masks(ad.Tensor(np.zeros((2, 2, 2, 3))), ad.Tensor(np.zeros((2, 4))))


def test_pixel_prob_identical_prototypes_uniform():
    rng = np.random.default_rng(16)
    f = ad.Tensor(rng.normal(size=4))
    proto = ad.Tensor(np.tile(rng.normal(size=4), (3, 1)))
    out = pixel_to_prototype_prob(f, proto).data
    assert np.allclose(out, 1.0 / 3.0, atol=1e-12)


def test_pixel_prob_inverse_similarity_value():
    # cosine similarities {1, -1}: probabilities {e^-1, e^1} / (e^-1 + e^1)
    f = ad.Tensor([1.0, 0.0])
    protos = ad.Tensor([[2.0, 0.0], [-3.0, 0.0]])
    out = pixel_to_prototype_prob(f, protos).data
    want = np.array([np.exp(-1.0), np.exp(1.0)])
    want /= want.sum()
    assert np.abs(out - want).max() < 1e-12
    assert abs(out[0] - 0.1192) < 1e-4 and abs(out[1] - 0.8808) < 1e-4
    flipped = pixel_to_prototype_prob(f, protos, sign=+1.0).data
    assert np.abs(flipped - want[::-1]).max() < 1e-12


def test_pixel_prob_sums_to_one():
    rng = np.random.default_rng(17)
    f = ad.Tensor(rng.normal(size=5))
    protos = ad.Tensor(rng.normal(size=(4, 5)))
    assert abs(pixel_to_prototype_prob(f, protos).data.sum() - 1.0) < 1e-12


def test_label_map_all_below_threshold_is_background():
    y = np.full((2, 2, 2, 3), 0.4)
    assert np.array_equal(label_map(y), np.zeros((2, 2, 2), dtype=np.int64))


def test_label_map_confident_channel_wins():
    y = np.full((2, 2, 2, 3), 0.1)
    y[..., 1] = 0.9
    assert np.array_equal(label_map(y), np.full((2, 2, 2), 2, dtype=np.int64))


def test_label_map_tie_breaks_to_lowest_class():
    y = np.zeros((1, 1, 1, 3))
    y[..., 0] = 0.8  # class 1
    y[..., 1] = 0.8  # class 2
    assert label_map(y)[0, 0, 0] == 1


def test_label_map_range_and_determinism():
    rng = np.random.default_rng(18)
    y = rng.random(size=(3, 3, 3, 4))
    a = label_map(y)
    b = label_map(y)
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 4
