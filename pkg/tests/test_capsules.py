"""Squash, vote, routing and embedding behavior, pinned against loop oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsule_retrieval import capsules as C
from capsule_retrieval import tensor as T
from capsule_retrieval.tensor import Tensor

from gradcheck import assert_gradients_match
from oracles import routing_steps, squash_ref, votes_loops


def caps(data):
    return C.CapsuleTensor(Tensor(np.asarray(data, dtype=np.float64)))


class TestSquash:
    def test_zero_is_fixed_point(self):
        out = C.squash(Tensor(np.zeros((2, 3))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_unit_input_halves(self):
        v = np.array([[1.0, 0.0, 0.0]])
        out = C.squash(Tensor(v))
        assert np.linalg.norm(out.data) == pytest.approx(0.5, abs=1e-9)

    def test_3_4_closed_form(self):
        out = C.squash(Tensor(np.array([[3.0, 4.0]])))
        np.testing.assert_allclose(
            out.data, [[(25 / 26) * 0.6, (25 / 26) * 0.8]], atol=1e-9
        )

    def test_matches_reference_formula(self):
        rng = np.random.default_rng(0)
        s = rng.normal(size=(4, 6, 5))
        out = C.squash(Tensor(s))
        np.testing.assert_allclose(out.data, squash_ref(s), atol=1e-9)

    def test_gradient_zero_at_zero(self):
        x = Tensor(np.zeros((1, 4)), requires_grad=True)
        T.backward(T.reduce_sum(C.squash(x)))
        np.testing.assert_array_equal(x.grad, 0.0)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_matches_fd(self, seed):
        rng = np.random.default_rng(seed)
        s = rng.normal(size=(2, 3, 4))

        def build(st_):
            w = Tensor(np.random.default_rng(seed + 50).normal(size=s.shape))
            return T.reduce_sum(T.elementwise_mul(C.squash(st_), w))

        assert_gradients_match(build, [s])

    def test_norm_properties_bulk(self):
        rng = np.random.default_rng(7)
        s = rng.normal(scale=3.0, size=(10_000, 8))
        out = C.squash(Tensor(s)).data
        norms_in = np.linalg.norm(s, axis=1)
        norms_out = np.linalg.norm(out, axis=1)
        assert (norms_out >= 0).all() and (norms_out < 1).all()
        # strictly increasing in the input norm
        order = np.argsort(norms_in)
        assert (np.diff(norms_out[order]) > 0).all()
        # direction preserved
        cos = (s * out).sum(axis=1) / (norms_in * norms_out)
        np.testing.assert_allclose(cos, 1.0, atol=1e-9)


class TestPrimaryCapsules:
    def test_shape_512_channels_1x1(self):
        feats = Tensor(np.random.default_rng(0).normal(size=(1, 512, 1, 1)))
        out = C.primary_capsules(feats, channels=32, dim=16)
        assert out.poses.shape == (1, 32, 16)

    def test_shape_512_channels_2x2(self):
        feats = Tensor(np.random.default_rng(1).normal(size=(1, 512, 2, 2)))
        out = C.primary_capsules(feats, channels=32, dim=16)
        assert out.poses.shape == (1, 128, 16)

    def test_zero_features_give_zero_capsules(self):
        out = C.primary_capsules(Tensor(np.zeros((2, 64, 2, 2))), channels=4, dim=16)
        np.testing.assert_array_equal(out.poses.data, 0.0)

    def test_indivisible_channel_count_rejected(self):
        with pytest.raises(T.ShapeError):
            C.primary_capsules(Tensor(np.zeros((1, 100, 2, 2))), channels=32, dim=16)

    def test_capsules_are_squashed(self):
        feats = Tensor(np.random.default_rng(2).normal(scale=10, size=(3, 48, 2, 2)))
        out = C.primary_capsules(feats, channels=3, dim=16)
        assert (np.linalg.norm(out.poses.data, axis=2) < 1).all()


class TestVotes:
    def test_identity_maps_pass_poses_through(self):
        rng = np.random.default_rng(3)
        poses = rng.normal(size=(2, 3, 4))
        w = np.broadcast_to(np.eye(4), (3, 2, 4, 4)).copy()
        votes = C.compute_votes(caps(poses), C.ClassCapsuleParams(Tensor(w)))
        for j in range(2):
            np.testing.assert_allclose(votes.data[:, :, j], poses, atol=1e-12)

    def test_linearity_in_weights(self):
        rng = np.random.default_rng(4)
        poses = rng.normal(size=(1, 2, 3))
        w = rng.normal(size=(2, 2, 3, 4))
        v1 = C.compute_votes(caps(poses), C.ClassCapsuleParams(Tensor(w)))
        v2 = C.compute_votes(caps(poses), C.ClassCapsuleParams(Tensor(2 * w)))
        np.testing.assert_allclose(v2.data, 2 * v1.data, atol=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(5)
        poses = rng.normal(size=(2, 2, 3))
        w = rng.normal(size=(2, 3, 3, 4))
        votes = C.compute_votes(caps(poses), C.ClassCapsuleParams(Tensor(w)))
        np.testing.assert_allclose(votes.data, votes_loops(poses, w), atol=1e-12)


class TestRouting:
    def test_single_in_single_out_is_squash_of_vote(self):
        rng = np.random.default_rng(6)
        votes = rng.normal(size=(2, 1, 1, 5))
        for iterations in (1, 2, 3, 5):
            out = C.dynamic_routing(Tensor(votes.copy()), iterations)
            np.testing.assert_allclose(
                out.poses.data, squash_ref(votes[:, 0]), atol=1e-9
            )

    def test_first_iteration_couplings_uniform(self):
        rng = np.random.default_rng(7)
        votes = rng.normal(size=(2, 4, 3, 5))
        history = C.routing_couplings(votes, iterations=3)
        np.testing.assert_allclose(history[0], 1.0 / 3.0, atol=1e-12)

    def test_couplings_sum_to_one_every_iteration(self):
        rng = np.random.default_rng(8)
        votes = rng.normal(scale=2.0, size=(3, 6, 4, 5))
        for c in C.routing_couplings(votes, iterations=4):
            np.testing.assert_allclose(c.sum(axis=2), 1.0, atol=1e-6)

    def test_2x2x2_hand_case_matches_transcribed_loop(self):
        votes = np.array(
            [
                [
                    [[1.0, 0.5], [-0.2, 0.3]],
                    [[0.8, 0.6], [0.1, -0.4]],
                ]
            ]
        )
        want, _ = routing_steps(votes, iterations=3)
        got = C.dynamic_routing(Tensor(votes), iterations=3)
        np.testing.assert_allclose(got.poses.data, want, atol=1e-9)

    def test_random_case_matches_transcribed_loop(self):
        rng = np.random.default_rng(9)
        votes = rng.normal(size=(2, 5, 3, 4))
        want, _ = routing_steps(votes, iterations=3)
        got = C.dynamic_routing(Tensor(votes), iterations=3)
        np.testing.assert_allclose(got.poses.data, want, atol=1e-9)

    def test_iterations_below_one_rejected(self):
        with pytest.raises(ValueError):
            C.dynamic_routing(Tensor(np.zeros((1, 2, 2, 3))), iterations=0)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(10)
        poses = rng.normal(size=(2, 5, 3))
        w = rng.normal(size=(5, 4, 3, 6))
        base = C.dynamic_routing(
            C.compute_votes(caps(poses), C.ClassCapsuleParams(Tensor(w))), 3
        ).poses.data
        # permuting input capsules together with W rows leaves outputs unchanged
        perm_in = np.random.default_rng(11).permutation(5)
        permuted = C.dynamic_routing(
            C.compute_votes(
                caps(poses[:, perm_in]), C.ClassCapsuleParams(Tensor(w[perm_in]))
            ),
            3,
        ).poses.data
        np.testing.assert_allclose(permuted, base, atol=1e-12)
        # permuting output slots permutes outputs identically
        perm_out = np.random.default_rng(12).permutation(4)
        permuted_out = C.dynamic_routing(
            C.compute_votes(
                caps(poses), C.ClassCapsuleParams(Tensor(w[:, perm_out]))
            ),
            3,
        ).poses.data
        np.testing.assert_allclose(permuted_out, base[:, perm_out], atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_flows_through_all_iterations(self, seed):
        rng = np.random.default_rng(seed)
        votes = rng.normal(size=(1, 3, 2, 3))

        def build(vt):
            w = Tensor(np.random.default_rng(seed + 60).normal(size=(1, 2, 3)))
            return T.reduce_sum(
                T.elementwise_mul(C.dynamic_routing(vt, 3).poses, w)
            )

        assert_gradients_match(build, [votes])


class TestEmbed:
    def test_normalize_then_mask_by_label(self):
        poses = np.zeros((1, 2, 4))
        poses[0, 0, :2] = [3.0, 4.0]
        poses[0, 1, 0] = 1.0
        out = C.embed(caps(poses), labels=[0])
        want = np.zeros(8)
        want[:2] = [0.6, 0.8]
        np.testing.assert_allclose(out.data[0], want, atol=1e-12)

    def test_single_class_label_mode(self):
        poses = np.array([[[3.0, 4.0]]])
        out = C.embed(caps(poses), labels=[0])
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-12)

    def test_argmax_mode_picks_largest_activation(self):
        poses = np.zeros((1, 2, 3))
        poses[0, 0, 0] = 0.9
        poses[0, 1, 1] = 0.1
        out = C.embed(caps(poses))
        assert out.data[0, 0] == pytest.approx(1.0)
        np.testing.assert_array_equal(out.data[0, 3:], 0.0)

    def test_label_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            C.embed(caps(np.zeros((1, 2, 3))), labels=[2])

    def test_nonzero_block_has_unit_norm(self):
        rng = np.random.default_rng(13)
        poses = rng.normal(size=(5, 4, 16))
        out = C.embed(caps(poses), labels=[0, 1, 2, 3, 0]).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)

    def test_zero_selected_capsule_stays_zero(self):
        poses = np.zeros((1, 2, 3))
        poses[0, 1] = [1.0, 0.0, 0.0]
        out = C.embed(caps(poses), labels=[0])
        np.testing.assert_array_equal(out.data, 0.0)

    def test_label_and_argmax_agree_when_truth_is_largest(self):
        rng = np.random.default_rng(14)
        for _ in range(20):
            poses = rng.normal(size=(1, 3, 4))
            labels = [int(np.linalg.norm(poses[0], axis=1).argmax())]
            by_label = C.embed(caps(poses), labels=labels).data
            by_argmax = C.embed(caps(poses)).data
            np.testing.assert_array_equal(by_label, by_argmax)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_matches_fd(self, seed):
        rng = np.random.default_rng(seed)
        poses = rng.normal(size=(2, 3, 4)) + 0.3

        def build(pt):
            w = Tensor(np.random.default_rng(seed + 70).normal(size=(2, 12)))
            out = C.embed(C.CapsuleTensor(pt), labels=[0, 2])
            return T.reduce_sum(T.elementwise_mul(out, w))

        assert_gradients_match(build, [poses])


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    dim=st.integers(1, 8),
    scale=st.floats(1e-3, 1e3),
)
def test_squash_norm_in_unit_interval(seed, dim, scale):
    s = np.random.default_rng(seed).normal(scale=scale, size=(1, dim))
    out = C.squash(Tensor(s)).data
    norm = np.linalg.norm(out)
    assert 0.0 <= norm < 1.0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), iterations=st.integers(1, 5))
def test_routing_couplings_always_normalized(seed, iterations):
    rng = np.random.default_rng(seed)
    votes = rng.normal(scale=2.0, size=(2, 3, 4, 3))
    for c in C.routing_couplings(votes, iterations):
        np.testing.assert_allclose(c.sum(axis=2), 1.0, atol=1e-6)
