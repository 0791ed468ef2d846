import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from kdseg.features import (
    FeatureMap,
    LayerPairing,
    affinity_loss,
    align_spatial,
    contrast_of_map,
    importance_loss,
    importance_map,
    mid_loss,
    reduce_channels,
    region_contrast_vector,
)

from helpers import analytic_grad, central_diff_grad, rel_error


def t64(x):
    return torch.tensor(x, dtype=torch.float64)


class TestImportanceMap:
    @pytest.mark.parametrize("c,h,w", [(1, 2, 2), (5, 3, 4), (8, 6, 6)])
    def test_constant_features(self, c, h, w):
        m = importance_map(torch.full((1, c, h, w), 0.7, dtype=torch.float64))
        assert torch.allclose(m, torch.full((1, h, w), 1 / math.sqrt(h * w), dtype=torch.float64), atol=1e-12)

    def test_single_hot(self):
        m = importance_map(t64([[[[1, 0], [0, 0]]]]))
        assert m.tolist() == [[[1.0, 0.0], [0.0, 0.0]]]

    def test_zero_map_stays_zero(self):
        assert importance_map(torch.zeros(2, 3, 4, 4)).abs().max() == 0

    @settings(max_examples=50)
    @given(st.integers(0, 10_000))
    def test_channel_permutation_exact(self, seed):
        g = torch.Generator().manual_seed(seed)
        # small integers keep every partial sum exact
        f = torch.randint(-8, 9, (2, 5, 3, 3), generator=g).to(torch.float64)
        perm = torch.randperm(5, generator=g)
        assert torch.equal(importance_map(f), importance_map(f[:, perm]))

    def test_channel_permutation_random_floats(self):
        f = torch.randn(2, 6, 5, 5, dtype=torch.float64)
        perm = torch.randperm(6)
        assert torch.allclose(importance_map(f), importance_map(f[:, perm]), atol=1e-12)

    @settings(max_examples=30)
    @given(st.integers(0, 10_000))
    def test_unit_norm_and_nonnegative(self, seed):
        g = torch.Generator().manual_seed(seed)
        m = importance_map(torch.randn(3, 4, 5, 6, generator=g, dtype=torch.float64))
        assert (m >= 0).all()
        assert torch.allclose(m.flatten(1).norm(dim=1), torch.ones(3, dtype=torch.float64), atol=1e-6)


class TestAlignSpatial:
    def test_identity_when_sizes_match(self):
        m = importance_map(torch.randn(2, 3, 4, 5))
        out = align_spatial(m, 4, 5)
        assert torch.equal(out, m)

    @pytest.mark.parametrize("size", [(1, 1), (3, 7), (8, 8), (16, 12)])
    def test_uniform_stays_uniform(self, size):
        m = torch.full((1, 4, 4), 0.25, dtype=torch.float64)
        out = align_spatial(m, *size)
        assert torch.allclose(out, torch.full_like(out, 1 / math.sqrt(size[0] * size[1])), atol=1e-12)

    def test_round_trip_residual(self):
        m = t64([[[1, 0], [0, 0]]])
        back = align_spatial(align_spatial(m, 4, 4), 2, 2)
        residual = (back - m).norm().item()
        # exact residual of the pixel-centre bilinear kernel
        assert residual == pytest.approx(0.2, abs=1e-12)

    @pytest.mark.parametrize("size", [(0, 4), (4, -1)])
    def test_rejects_bad_size(self, size):
        with pytest.raises(ValueError):
            align_spatial(torch.ones(1, 2, 2), *size)


class TestImportanceLoss:
    def test_identical(self):
        m = importance_map(torch.randn(2, 3, 4, 4))
        assert importance_loss({"s": m}, {"t": m.clone()}, LayerPairing([("s", "t")])).item() == 0.0

    def test_empty_pairing(self):
        assert importance_loss({}, {}, LayerPairing([])).item() == 0.0

    def test_disjoint_single_hot(self):
        a, b = t64([[[1, 0], [0, 0]]]), t64([[[0, 0], [0, 1]]])
        assert importance_loss({"s": a}, {"t": b}, LayerPairing([("s", "t")])).item() == pytest.approx(2.0)

    def test_mean_over_pairs(self):
        a, b = t64([[[1, 0], [0, 0]]]), t64([[[0, 0], [0, 1]]])
        got = importance_loss({"s1": a, "s2": a}, {"t1": b, "t2": a}, LayerPairing([("s1", "t1"), ("s2", "t2")]))
        assert got.item() == pytest.approx(1.0)

    def test_unknown_layer(self):
        with pytest.raises(KeyError):
            importance_loss({"s": torch.ones(1, 2, 2)}, {}, LayerPairing([("s", "t")]))

    @settings(max_examples=30)
    @given(st.integers(0, 10_000))
    def test_pair_bound(self, seed):
        g = torch.Generator().manual_seed(seed)
        ms = importance_map(torch.randn(1, 3, 6, 6, generator=g, dtype=torch.float64))
        mt = importance_map(torch.randn(1, 5, 6, 6, generator=g, dtype=torch.float64))
        got = importance_loss({"s": ms}, {"t": mt}, LayerPairing([("s", "t")])).item()
        assert got <= ms.abs().sum().item() + mt.abs().sum().item() + 1e-12


class TestRegionContrast:
    def test_constant_features(self):
        f = torch.full((1, 3, 4, 4), 2.0, dtype=torch.float64)
        mask = torch.zeros(1, 4, 4, dtype=torch.long)
        mask[0, :2] = 1
        assert region_contrast_vector(f, mask).item() == 0.0

    def test_hand_example(self):
        f = t64([[[[1, 2], [3, 4]]]])
        mask = torch.tensor([[[1, 1], [0, 0]]])
        assert reduce_channels(f).tolist() == [[[1.0, 4.0], [9.0, 16.0]]]
        assert region_contrast_vector(f, mask).item() == pytest.approx(-10.0)

    def test_all_foreground(self):
        f = t64([[[[1, 2], [3, 4]]]])
        mask = torch.ones(1, 2, 2, dtype=torch.long)
        assert region_contrast_vector(f, mask).item() == pytest.approx(7.5)

    def test_mask_resampled_to_features(self):
        f = t64([[[[1, 2], [3, 4]]]])
        mask = torch.zeros(1, 4, 4, dtype=torch.long)
        mask[0, :2] = 1
        assert region_contrast_vector(f, mask).item() == pytest.approx(-10.0)

    @settings(max_examples=50)
    @given(st.integers(0, 10_000), st.floats(-50, 50))
    def test_shift_invariance(self, seed, c):
        g = torch.Generator().manual_seed(seed)
        reduced = torch.rand(2, 5, 5, generator=g, dtype=torch.float64) * 10
        mask = torch.zeros(2, 5, 5, dtype=torch.long)
        mask[:, 1:3, 1:4] = 1
        a = contrast_of_map(reduced, mask)
        b = contrast_of_map(reduced + c, mask)
        assert torch.allclose(a, b, atol=1e-9)


class TestAffinity:
    def test_equal(self):
        assert affinity_loss(t64([[1.5]]), t64([[1.5]])).item() == 0.0

    def test_scalar(self):
        assert affinity_loss(t64([3.0]), t64([-1.0])).item() == pytest.approx(4.0)

    def test_vector(self):
        assert affinity_loss(t64([1.0, 2.0]), t64([0.0, 0.0])).item() == pytest.approx(math.sqrt(5))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            affinity_loss(t64([1.0, 2.0]), t64([1.0]))


def _feats(prefix, tensors):
    n = len(tensors)
    return [FeatureMap(t, f"{prefix}{i}", (i + 1) / n) for i, t in enumerate(tensors)]


class TestMidLoss:
    def setup_method(self):
        g = torch.Generator().manual_seed(11)
        self.mask = torch.randint(0, 2, (2, 8, 8), generator=g)
        self.x = _feats("s", [torch.randn(2, 3, 8, 8, generator=g, dtype=torch.float64),
                              torch.randn(2, 6, 4, 4, generator=g, dtype=torch.float64)])

    def test_self_distance_zero(self):
        pairing = LayerPairing([("s0", "s0"), ("s1", "s1")])
        assert mid_loss(self.x, self.x, self.mask, pairing).item() == 0.0

    def test_empty_pairing(self):
        assert mid_loss(self.x, self.x, self.mask, LayerPairing([])).item() == 0.0

    def test_constant_features_equal_masks(self):
        s = _feats("s", [torch.full((1, 2, 2, 2), 3.0, dtype=torch.float64)])
        t = _feats("t", [torch.full((1, 4, 2, 2), 1.0, dtype=torch.float64)])
        mask = torch.tensor([[[1, 0], [0, 0]]])
        assert mid_loss(s, t, mask, LayerPairing([("s0", "t0")])).item() == pytest.approx(0.0, abs=1e-12)

    def test_is_sum_of_terms(self):
        g = torch.Generator().manual_seed(2)
        s = _feats("s", [torch.randn(1, 2, 4, 4, generator=g, dtype=torch.float64)])
        t = _feats("t", [torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64)])
        mask = torch.randint(0, 2, (1, 4, 4), generator=g)
        p = LayerPairing([("s0", "t0")])
        imp = importance_loss({"s0": importance_map(s[0])}, {"t0": importance_map(t[0])}, p)
        aff = affinity_loss(region_contrast_vector(s[0], mask), region_contrast_vector(t[0], mask))
        assert mid_loss(s, t, mask, p).item() == pytest.approx((imp + aff).item(), abs=1e-12)

    def test_unresolvable_pairing(self):
        with pytest.raises(KeyError):
            mid_loss(self.x, self.x, self.mask, LayerPairing([("s0", "nope")]))

    @settings(max_examples=30)
    @given(st.integers(0, 10_000))
    def test_nonnegative(self, seed):
        g = torch.Generator().manual_seed(seed)
        s = _feats("s", [torch.randn(1, 2, 6, 6, generator=g, dtype=torch.float64)])
        t = _feats("t", [torch.randn(1, 4, 3, 3, generator=g, dtype=torch.float64)])
        mask = torch.randint(0, 2, (1, 6, 6), generator=g)
        assert mid_loss(s, t, mask, LayerPairing([("s0", "t0")])).item() >= 0

    @pytest.mark.parametrize("teacher_hw", [(4, 4), (2, 2)])
    def test_gradient(self, teacher_hw):
        g = torch.Generator().manual_seed(5)
        student = torch.randn(1, 2, 4, 4, generator=g, dtype=torch.float64)
        teacher = _feats("t", [torch.randn(1, 2, *teacher_hw, generator=g, dtype=torch.float64)])
        mask = torch.randint(0, 2, (1, 4, 4), generator=g)
        pairing = LayerPairing([("s0", "t0")])
        fn = lambda v: mid_loss([FeatureMap(v, "s0", 1.0)], teacher, mask, pairing)
        err = rel_error(analytic_grad(fn, student), central_diff_grad(fn, student, 1e-5))
        assert err < 1e-4, err


class TestLayerPairing:
    def test_duplicate_student_layer(self):
        with pytest.raises(ValueError):
            LayerPairing([("a", "x"), ("a", "y")])

    def test_by_depth(self):
        p = LayerPairing.by_depth([("s_mid", 0.6), ("s_out", 1.0)], [("t_a", 0.3), ("t_b", 0.57), ("t_out", 1.0)])
        assert p.pairs == [("s_mid", "t_b"), ("s_out", "t_out")]

    def test_check(self):
        p = LayerPairing([("a", "x")])
        p.check(["a"], ["x"])
        with pytest.raises(KeyError):
            p.check(["a"], ["y"])
