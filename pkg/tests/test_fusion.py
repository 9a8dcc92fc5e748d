"""Feature-intersection semantics and hybrid model composition."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridcnn.errors import ConfigurationError
from hybridcnn.fusion import FusionConfig, HybridModel, build_hybrid, intersect_features, merge_features
from hybridcnn.graphs import (BranchConfig, build_branch, build_compact_cnn,
                              COMPACT_BRANCH_BLOCKS, COMPACT_BRANCH_WIDTHS)
from hybridcnn.tensor import GradTape, Tensor, backward
from hybridcnn import ops


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def compact_trio(seed=0):
    custom = build_compact_cnn().initialize(seed)
    ns = build_branch(BranchConfig("normal_vs_stone", COMPACT_BRANCH_WIDTHS,
                                   COMPACT_BRANCH_BLOCKS, bn_momentum=0.9),
                      input_shape=(64, 64, 3)).initialize(seed + 1)
    ct = build_branch(BranchConfig("cyst_vs_tumor", COMPACT_BRANCH_WIDTHS,
                                   COMPACT_BRANCH_BLOCKS, bn_momentum=0.9),
                      input_shape=(64, 64, 3)).initialize(seed + 2)
    return custom, ns, ct


class TestIntersect:
    def test_equal_maps_blend_to_identity(self):
        a = np.random.default_rng(0).standard_normal((2, 3, 3, 4))
        out, mask = intersect_features(t64(a), t64(a.copy()), tau=1.0)
        assert np.array_equal(out.data, a)
        assert mask.all()

    def test_opposite_maps_keep_first(self):
        a = np.random.default_rng(1).standard_normal((2, 3, 3, 4)) + 0.1
        out, mask = intersect_features(t64(a), t64(-a), tau=0.5)
        assert np.array_equal(out.data, a)
        assert not mask.any()

    def test_hand_cosine_and_mean(self):
        a = np.array([1.0, 0.0]).reshape(1, 1, 2, 1)
        b = np.array([1.0, 1.0]).reshape(1, 1, 2, 1)
        out, mask = intersect_features(t64(a), t64(b), tau=0.5)
        # cosine 1/sqrt(2) = 0.7071 >= 0.5, blended to the mean
        assert mask.all()
        assert np.allclose(out.data.ravel(), [1.0, 0.5])

    def test_zero_norm_counts_as_zero_similarity(self):
        a = np.zeros((1, 2, 2, 1))
        b = np.ones((1, 2, 2, 1))
        _, mask_pos = intersect_features(t64(a), t64(b), tau=0.5)
        _, mask_zero = intersect_features(t64(a), t64(b), tau=0.0)
        assert not mask_pos.any()
        assert mask_zero.all()  # 0 >= 0

    def test_accept_all_threshold(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((2, 2, 2, 2, 3))
        _, mask = intersect_features(t64(a), t64(b), tau=-1.0)
        assert mask.all()

    def test_accepted_channels_symmetric_rejected_swap(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((3, 4, 4, 6))
        b = rng.standard_normal((3, 4, 4, 6))
        out_ab, mask = intersect_features(t64(a), t64(b), tau=0.0)
        out_ba, mask_swapped = intersect_features(t64(b), t64(a), tau=0.0)
        assert np.array_equal(mask, mask_swapped)
        m4 = mask[:, None, None, :]
        assert np.array_equal(out_ab.data[np.broadcast_to(m4, out_ab.shape)],
                              out_ba.data[np.broadcast_to(m4, out_ba.shape)])
        rej = ~m4
        assert np.array_equal(out_ab.data[np.broadcast_to(rej, out_ab.shape)],
                              a[np.broadcast_to(rej, a.shape)])
        assert np.array_equal(out_ba.data[np.broadcast_to(rej, out_ba.shape)],
                              b[np.broadcast_to(rej, b.shape)])

    @given(st.integers(0, 10_000), st.floats(0.1, 8.0), st.floats(0.1, 8.0))
    @settings(max_examples=25, deadline=None)
    def test_mask_invariant_under_positive_scaling(self, seed, sa, sb):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((2, 3, 3, 4))
        b = rng.standard_normal((2, 3, 3, 4))
        _, mask = intersect_features(t64(a), t64(b), tau=0.3)
        _, mask_scaled = intersect_features(t64(a * sa), t64(b * sb), tau=0.3)
        assert np.array_equal(mask, mask_scaled)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            intersect_features(t64(np.zeros((1, 2, 2, 1))), t64(np.zeros((1, 2, 2, 2))), 0.0)

    def test_tau_out_of_range_rejected(self):
        z = t64(np.zeros((1, 2, 2, 1)))
        with pytest.raises(ConfigurationError):
            intersect_features(z, z, 1.5)

    def test_backward_treats_mask_as_constant(self):
        rng = np.random.default_rng(4)
        a = Tensor(rng.standard_normal((1, 2, 2, 2)))
        b = Tensor(rng.standard_normal((1, 2, 2, 2)))
        with GradTape() as tape:
            out, mask = intersect_features(a, b, tau=0.0)
            loss = ops.tensor_sum(out)
        g = backward(tape, loss)
        m4 = np.broadcast_to(mask[:, None, None, :], a.shape)
        assert np.array_equal(g[a], np.where(m4, 0.5, 1.0))
        assert np.array_equal(g[b], np.where(m4, 0.5, 0.0))


class TestMerge:
    def test_mean(self):
        a, b = t64([[1.0, 2.0]]), t64([[3.0, 4.0]])
        assert merge_features(a, b, "mean").data.tolist() == [[2.0, 3.0]]

    def test_max_routes_gradient(self):
        a = Tensor(np.array([[1.0, 5.0]]))
        b = Tensor(np.array([[2.0, 3.0]]))
        with GradTape() as tape:
            out = merge_features(a, b, "max")
            loss = ops.tensor_sum(out)
        assert out.data.tolist() == [[2.0, 5.0]]
        g = backward(tape, loss)
        assert g[a].tolist() == [[0.0, 1.0]]
        assert g[b].tolist() == [[1.0, 0.0]]


class TestHybrid:
    def test_fusion_identity_bitwise(self):
        custom, ns, ct = compact_trio()
        hybrid = build_hybrid(custom, ns, ct, FusionConfig(tau=-1.0)).initialize_projection(3)
        x = Tensor(np.random.default_rng(5).random((3, 64, 64, 3), dtype=np.float32))
        marker = custom.taps["fusion_point"]
        _, caps = custom.forward_collect(x, (marker,), mode="infer")
        logits_override = hybrid.forward(x, mode="infer", branch_override=caps[marker])
        logits_custom = custom.forward(x, mode="infer")
        assert np.array_equal(logits_override.data, logits_custom.data)

    def test_probability_contract(self):
        custom, ns, ct = compact_trio()
        hybrid = build_hybrid(custom, ns, ct).initialize_projection(3)
        x = Tensor(np.random.default_rng(6).random((4, 64, 64, 3), dtype=np.float32))
        logits = hybrid.forward(x, mode="infer")
        assert logits.shape == (4, 4)
        probs = ops.softmax(logits)
        assert np.abs(probs.data.sum(axis=1) - 1.0).max() <= 1e-6

    def test_parameter_additivity(self):
        custom, ns, ct = compact_trio()
        hybrid = build_hybrid(custom, ns, ct).initialize_projection(3)
        tr, non = hybrid.parameter_totals()
        parts = [g.parameter_totals() for g in (custom, ns, ct)]
        proj = hybrid.proj_kernel.size + hybrid.proj_bias.size
        assert tr == sum(p[0] for p in parts) + proj
        assert non == sum(p[1] for p in parts)
        named = hybrid.named_parameters()
        assert tr + non == sum(v.size for v in named.values())

    def test_frozen_branches_excluded_from_trainables(self):
        custom, ns, ct = compact_trio()
        hybrid = build_hybrid(custom, ns, ct).initialize_projection(3)
        hybrid.freeze_branches = True
        keys = hybrid.trainable_parameters().keys()
        assert all(not k.startswith(("branch_ns/", "branch_ct/")) for k in keys)
        assert "fusion/projection/kernel" in keys
        hybrid.freeze_branches = False
        assert any(k.startswith("branch_ns/") for k in hybrid.trainable_parameters())

    def test_custom_only_path(self):
        custom, ns, ct = compact_trio()
        hybrid = build_hybrid(custom, ns, ct).initialize_projection(3)
        x = Tensor(np.random.default_rng(7).random((2, 64, 64, 3), dtype=np.float32))
        assert np.array_equal(hybrid.forward(x, custom_only=True).data,
                              custom.forward(x).data)

    def test_mismatched_input_shapes_rejected(self):
        custom = build_compact_cnn()
        ns = build_branch(BranchConfig("normal_vs_stone", COMPACT_BRANCH_WIDTHS,
                                       COMPACT_BRANCH_BLOCKS), input_shape=(32, 32, 3))
        ct = build_branch(BranchConfig("cyst_vs_tumor", COMPACT_BRANCH_WIDTHS,
                                       COMPACT_BRANCH_BLOCKS), input_shape=(64, 64, 3))
        with pytest.raises(ConfigurationError, match="input shape"):
            HybridModel(custom, ns, ct, FusionConfig())

    def test_projection_reaches_fusion_geometry(self):
        custom, ns, ct = compact_trio()
        hybrid = build_hybrid(custom, ns, ct).initialize_projection(3)
        x = Tensor(np.random.default_rng(8).random((2, 64, 64, 3), dtype=np.float32))
        proj = hybrid.branch_features(x)
        assert tuple(proj.shape[1:]) == hybrid.target_shape == (10, 10, 32)

    def test_config_round_trip_shapes(self):
        custom, ns, ct = compact_trio()
        hybrid = build_hybrid(custom, ns, ct, FusionConfig(tau=0.25, merge="max"))
        cfg = hybrid.to_config()
        assert cfg["fusion"] == {"tau": 0.25, "merge": "max"}
        assert cfg["custom"]["layers"] == custom.to_config()["layers"]
