import numpy as np
import pytest

from stvad.autodiff import Tensor
from stvad.spatial_attention import aggregate, attention_weights, motion_magnitude, top_motion_indices
from stvad.training import TrainConfig

from oracles import aggregate_oracle, fd_gradient, motion_oracle


def test_constant_features_have_zero_motion():
    patch = np.ones((5, 3, 2, 4))
    assert np.array_equal(motion_magnitude(patch), np.zeros((5, 3, 2)))


def test_hand_case_single_patch():
    patch = np.array([0.0, 1.0, 0.0]).reshape(3, 1, 1, 1)
    assert np.allclose(motion_magnitude(patch).ravel(), [1.0, 2.0, 1.0])


def test_motion_matches_loop_oracle():
    rng = np.random.default_rng(0)
    patch = rng.standard_normal((4, 2, 2, 3))
    assert np.allclose(motion_magnitude(patch), motion_oracle(patch), atol=1e-6)


def test_single_frame_video_motion_is_zero():
    rng = np.random.default_rng(1)
    patch = rng.standard_normal((1, 2, 3, 4))
    assert np.array_equal(motion_magnitude(patch), np.zeros((1, 2, 3)))


def test_equal_magnitudes_give_uniform_attention_over_first_k():
    rng = np.random.default_rng(2)
    patch = rng.standard_normal((2, 2, 3, 4))
    motion = np.ones((2, 2, 3))
    k = 4
    weights = attention_weights(motion, k)
    assert np.allclose(weights, 1.0 / k)
    assert np.array_equal(top_motion_indices(motion, k), np.tile(np.arange(k), (2, 1)))
    agg = aggregate(patch, motion, k)
    expected = patch.reshape(2, -1, 4)[:, :k].mean(axis=1)
    assert np.allclose(agg, expected, atol=1e-7)


def test_two_patch_softmax_hand_case():
    u = np.array([1.0, 0.0, 0.0])
    v = np.array([0.0, 1.0, 0.0])
    patch = np.stack([u, v]).reshape(1, 1, 2, 3)
    motion = np.array([[[0.0, np.log(2.0)]]])
    agg = aggregate(patch, motion, 2)
    assert np.allclose(agg[0], (u + 2.0 * v) / 3.0, atol=1e-9)
    assert np.allclose(attention_weights(motion, 2)[0], [2.0 / 3.0, 1.0 / 3.0])


def test_aggregate_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        t, h, w, d = (int(rng.integers(1, 5)) for _ in range(4))
        patch = rng.standard_normal((t, h, w, d))
        motion = motion_magnitude(patch)
        k = int(rng.integers(1, h * w + 1))
        assert np.allclose(aggregate(patch, motion, k), aggregate_oracle(patch, motion, k), atol=1e-6)


def test_k_out_of_range_rejected():
    patch = np.zeros((2, 2, 2, 3))
    motion = np.zeros((2, 2, 2))
    with pytest.raises(ValueError, match="out of range"):
        aggregate(patch, motion, 5)
    with pytest.raises(ValueError, match="out of range"):
        aggregate(patch, motion, 0)


def test_default_k_is_twelve():
    assert TrainConfig().top_patches == 12


def test_spatial_permutation_equivariance():
    rng = np.random.default_rng(4)
    patch = rng.standard_normal((3, 4, 4, 5))
    motion = motion_magnitude(patch)
    perm = rng.permutation(16)
    permuted = patch.reshape(3, 16, 5)[:, perm].reshape(3, 4, 4, 5)
    motion_p = motion_magnitude(permuted)
    assert np.allclose(motion_p.reshape(3, 16), motion.reshape(3, 16)[:, perm], atol=1e-9)
    # no ties with continuous random data: the aggregate is permutation invariant
    k = 6
    assert np.allclose(aggregate(patch, motion, k), aggregate(permuted, motion_p, k), atol=1e-9)


def test_attention_rows_positive_and_normalized():
    rng = np.random.default_rng(5)
    patch = rng.standard_normal((6, 3, 3, 4))
    motion = motion_magnitude(patch)
    weights = attention_weights(motion, 5)
    assert (weights > 0).all()
    assert np.allclose(weights.sum(axis=1), 1.0, atol=1e-6)


def test_constant_shift_moves_aggregate_not_motion():
    rng = np.random.default_rng(6)
    patch = rng.standard_normal((4, 3, 3, 5))
    shift = rng.standard_normal(5)
    motion = motion_magnitude(patch)
    motion_shifted = motion_magnitude(patch + shift)
    assert np.allclose(motion, motion_shifted, atol=1e-9)
    agg = aggregate(patch, motion, 4)
    agg_shifted = aggregate(patch + shift, motion_shifted, 4)
    assert np.allclose(agg_shifted, agg + shift, atol=1e-9)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    patch = rng.standard_normal((4, 2, 3, 4))
    probe = rng.standard_normal((4, 4))

    leaf = Tensor(patch.copy(), requires_grad=True)
    motion = motion_magnitude(leaf)
    out = aggregate(leaf, motion, 3)
    loss = (out * probe).data.sum()
    from stvad import autodiff as ad

    scalar = ad.tsum(out * ad.constant(probe))
    scalar.backward()
    analytic = leaf.grad

    def f():
        m = motion_magnitude(leaf.data)
        return float((aggregate(leaf.data, m, 3) * probe).sum())

    numeric = fd_gradient(f, leaf.data)
    denom = np.maximum(np.abs(numeric), 1.0)
    assert np.max(np.abs(analytic - numeric) / denom) <= 1e-4
    assert np.isfinite(loss)
