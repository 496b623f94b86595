import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from guidednet import cgmm
from guidednet.cgmm import SIGMA_FLOOR, GmmState, PosteriorMap
from guidednet.tensor import Tape, Tensor, cross_entropy, one_hot, softmax_channel

from oracles import fd_compare, numeric_grad, posterior_direct


def _state(means, stds, seen=None, prior=None):
    means = np.asarray(means, dtype=np.float64)
    K = means.shape[0]
    return GmmState(
        means=Tensor(means),
        stds=Tensor(np.asarray(stds, dtype=np.float64)),
        prior=np.full(K, 1.0 / K) if prior is None else np.asarray(prior, dtype=np.float64),
        seen=np.ones(K, dtype=bool) if seen is None else np.asarray(seen, dtype=bool),
    )


def _vox(values):
    """Feature rows ``[N, C]`` as a ``[1, C, N, 1, 1]`` volume."""
    values = np.asarray(values, dtype=np.float64)
    return values.T[None, :, :, None, None]


def _random_state(r, K, C, seen=None):
    return _state(r.normal(0, 2, (K, C)), r.uniform(0.3, 2.0, (K, C)), seen)


class TestUpdateStatistics:
    def test_single_voxel_is_floored(self):
        s = cgmm.update_statistics(GmmState.fresh(2, 3), _vox([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]),
                                   np.array([1, 0]).reshape(1, 2, 1, 1), np.ones((1, 2, 2, 1, 1)))
        np.testing.assert_array_equal(s.means.data[1], [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(s.stds.data[1], SIGMA_FLOOR)

    def test_two_points_equal_scores(self):
        lab = np.array([1, 1, 0]).reshape(1, 3, 1, 1)
        probs = np.ones((1, 2, 3, 1, 1))
        s = cgmm.update_statistics(GmmState.fresh(2, 1), _vox([[0.0], [2.0], [5.0]]), lab, probs)
        assert s.means.data[1, 0] == 1.0
        assert abs(s.stds.data[1, 0] - 1.0) <= 1e-15

    def test_weighted_spread_unweighted_mean(self):
        lab = np.array([1, 1, 0]).reshape(1, 3, 1, 1)
        probs = np.ones((1, 2, 3, 1, 1))
        probs[0, 1, :, 0, 0] = [1.0, 0.0, 1.0]
        s = cgmm.update_statistics(GmmState.fresh(2, 1), _vox([[0.0], [2.0], [5.0]]), lab, probs)
        assert s.means.data[1, 0] == 1.0
        assert abs(s.stds.data[1, 0] - 1.0) <= 1e-15

    def test_all_background_leaves_state_and_flags(self):
        prev = _state([[0.0], [3.0]], [[1.0], [2.0]])
        s = cgmm.update_statistics(prev, _vox([[1.0], [2.0]]), np.zeros((1, 2, 1, 1), dtype=int),
                                   np.ones((1, 2, 2, 1, 1)))
        assert s.last_update_skipped
        np.testing.assert_array_equal(s.means.data, prev.means.data)
        np.testing.assert_array_equal(s.stds.data, prev.stds.data)

    def test_absent_class_keeps_previous_values(self):
        prev = _state([[0.0], [3.0], [7.0]], [[1.0], [2.0], [0.5]])
        lab = np.array([0, 1]).reshape(1, 2, 1, 1)
        s = cgmm.update_statistics(prev, _vox([[1.0], [2.0]]), lab, np.ones((1, 3, 2, 1, 1)))
        assert s.means.data[2, 0] == 7.0 and s.stds.data[2, 0] == 0.5

    @given(seed=st.integers(0, 2**16), K=st.integers(2, 5), C=st.integers(1, 4))
    def test_floor_and_prior_invariants(self, seed, K, C):
        r = np.random.default_rng(seed)
        feats = r.normal(size=(2, C, 3, 2, 2)) * r.choice([1e-6, 1.0])
        lab = r.integers(0, K, (2, 3, 2, 2))
        probs = softmax_channel(Tensor(r.normal(size=(2, K, 3, 2, 2)))).data
        s = cgmm.update_statistics(GmmState.fresh(K, C), feats, lab, probs)
        if s.last_update_skipped:
            return
        assert np.all(s.stds.data[s.seen] >= SIGMA_FLOOR)
        assert abs(s.prior.sum() - 1.0) <= 1e-9
        np.testing.assert_array_equal(s.seen, [np.any(lab == k) for k in range(K)])

    def test_misaligned_inputs(self):
        with pytest.raises(ValueError, match="misaligned"):
            cgmm.update_statistics(GmmState.fresh(2, 1), _vox([[1.0], [2.0]]), np.zeros((1, 3, 1, 1), dtype=int),
                                   np.ones((1, 2, 2, 1, 1)))


class TestPosterior:
    def test_equidistant_is_even(self):
        post = cgmm.posterior(_state([[0.0], [2.0]], [[1.0], [1.0]]), _vox([[1.0]]))
        np.testing.assert_allclose(post.probs.data.ravel(), [0.5, 0.5], rtol=0, atol=1e-15)

    def test_ten_sigma_separation(self):
        post = cgmm.posterior(_state([[0.0], [10.0]], [[1.0], [1.0]]), _vox([[0.0]]))
        assert post.probs.data.ravel()[0] >= 1 - 1e-9

    def test_requires_two_seen_classes(self):
        with pytest.raises(ValueError, match="posterior undefined"):
            cgmm.posterior(_state([[0.0], [1.0]], [[1.0], [1.0]], seen=[True, False]), _vox([[0.0]]))

    def test_unseen_class_gets_zero_mass(self, rng):
        st_ = _random_state(rng, 3, 2, seen=[True, False, True])
        post = cgmm.posterior(st_, rng.normal(size=(1, 2, 4, 1, 1)))
        assert np.all(post.probs.data[:, 1] == 0.0)
        np.testing.assert_allclose(post.probs.data.sum(axis=1), 1.0, rtol=0, atol=1e-9)

    def test_matches_direct_oracle_100_trials(self):
        """High-precision direct normalisation, C <= 4, K <= 5."""
        r = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(100):
            K, C = int(r.integers(2, 6)), int(r.integers(1, 5))
            seen = np.ones(K, dtype=bool)
            if K > 2:
                seen[r.integers(0, K)] = r.random() < 0.5
            st_ = _random_state(r, K, C, seen)
            st_.prior = r.dirichlet(np.ones(K))
            x = r.normal(0, 2, (3, C))
            got = cgmm.posterior(st_, _vox(x)).probs.data[0, :, :, 0, 0].T
            for n in range(3):
                ref = posterior_direct(st_.means.data, st_.stds.data, st_.prior, st_.seen, x[n])
                worst = max(worst, float(np.abs(got[n] - ref).max()))
        assert worst <= 1e-9

    @given(seed=st.integers(0, 2**16), K=st.integers(2, 5), C=st.integers(1, 4))
    def test_normalised(self, seed, K, C):
        r = np.random.default_rng(seed)
        post = cgmm.posterior(_random_state(r, K, C), r.normal(0, 3, (2, C, 2, 2, 1)))
        np.testing.assert_allclose(post.probs.data.sum(axis=1), 1.0, rtol=0, atol=1e-9)

    @given(seed=st.integers(0, 2**16), K=st.integers(2, 5), sign=st.sampled_from([-1.0, 1.0]))
    def test_common_density_scale_cancels(self, seed, K, sign):
        """Scaling every class term by exp(+-200) leaves the posterior unchanged."""
        r = np.random.default_rng(seed)
        st_ = _random_state(r, K, 2)
        x = r.normal(0, 2, (1, 2, 3, 1, 1))
        base = cgmm.posterior(st_, x).probs.data
        st_.prior = st_.prior * math.exp(sign * 200.0)
        np.testing.assert_allclose(cgmm.posterior(st_, x).probs.data, base, rtol=0, atol=1e-12)

    def test_far_features_stay_finite(self):
        """Densities that underflow in linear space still normalise."""
        st_ = _state([[0.0, 0.0], [1.0, 0.0]], [[1e-3, 1e-3], [1e-3, 1e-3]])
        post = cgmm.posterior(st_, _vox([[50.0, 50.0], [0.4, 0.0]]))
        p = post.probs.data[0, :, :, 0, 0].T
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        np.testing.assert_array_equal(post.hard.ravel(), [1, 0])

    @given(seed=st.integers(0, 2**16), K=st.integers(2, 5))
    def test_hard_map_is_lowest_index_argmax(self, seed, K):
        r = np.random.default_rng(seed)
        post = cgmm.posterior(_random_state(r, K, 2), r.normal(0, 2, (1, 2, 4, 2, 1)))
        p = post.probs.data
        for idx in np.ndindex(post.hard.shape):
            col = p[(idx[0], slice(None)) + idx[1:]]
            assert post.hard[idx] == int(np.flatnonzero(col == col.max())[0])

    def test_exact_tie_breaks_low(self):
        post = cgmm.posterior(_state([[-1.0], [1.0]], [[1.0], [1.0]]), _vox([[0.0]]))
        assert post.hard.ravel()[0] == 0


class TestLabeledLosses:
    def test_gt_loss_for_perfect_posterior(self):
        lab = np.array([[[[0, 1, 2]]]])
        post = PosteriorMap(Tensor(one_hot(lab, 3)), lab)
        assert cgmm.loss_gt(post, lab).item() <= 1e-4

    def test_max_loss_equal_means(self):
        assert abs(cgmm.loss_max(_state([[0.5, 1.0], [0.5, 1.0]], np.ones((2, 2)))).item() - 1.0) <= 1e-9

    def test_max_loss_far_means(self):
        assert cgmm.loss_max(_state([[0.0], [10.0]], np.ones((2, 1)))).item() <= math.exp(-100) * 1.0000001

    @given(seed=st.integers(0, 2**16), K=st.integers(2, 5))
    def test_max_loss_range(self, seed, K):
        r = np.random.default_rng(seed)
        v = cgmm.loss_max(_state(r.normal(0, 0.5, (K, 2)), np.ones((K, 2)))).item()
        assert 0.0 < v <= 1.0

    @given(seed=st.integers(0, 2**16), K=st.integers(2, 5))
    def test_max_loss_is_sum_over_pair_distances(self, seed, K):
        """The loss depends on centres only through a decreasing term per unordered pair."""
        r = np.random.default_rng(seed)
        mu = r.normal(0, 0.5, (K, 3))
        ref = sum(math.exp(-float(((mu[i] - mu[j]) ** 2).sum())) for i in range(K) for j in range(i + 1, K))
        got = cgmm.loss_max(_state(mu, np.ones((K, 3)))).item()
        assert abs(got - ref * 2.0 / (K * (K - 1))) <= 1e-12

    @given(seed=st.integers(0, 2**16), push=st.floats(0.01, 2.0))
    def test_max_loss_drops_when_a_pair_separates(self, seed, push):
        r = np.random.default_rng(seed)
        mu = r.normal(0, 0.3, (2, 2))
        d = mu[0] - mu[1]
        n = np.linalg.norm(d)
        d = d / n if n > 0 else np.array([1.0, 0.0])
        moved = mu.copy()
        moved[0] += push * d
        before = cgmm.loss_max(_state(mu, np.ones((2, 2)))).item()
        after = cgmm.loss_max(_state(moved, np.ones((2, 2)))).item()
        assert after < before

    def test_self_loss_formula(self):
        g = np.array([0.2, 0.8]).reshape(1, 2, 1, 1, 1)
        p = np.array([0.4, 0.6]).reshape(1, 2, 1, 1, 1)
        expected = -np.mean(g * np.log(p) + (1 - g) * np.log(1 - p))
        got = cgmm.loss_self(PosteriorMap(Tensor(g), np.array([[[[1]]]])), Tensor(p)).item()
        assert abs(got - expected) <= 1e-15


class TestUnlabeledLosses:
    def test_identical_posteriors(self, rng):
        p = softmax_channel(Tensor(rng.normal(size=(1, 3, 2, 2, 2))))
        post = PosteriorMap(p, p.data.argmax(axis=1))
        l_cons, _ = cgmm.cgmm_losses_unlabeled(post, post, p, p)
        assert l_cons.item() == 0.0

    def test_rectify_agreement(self):
        hard = np.array([[[[0, 1, 2]]]])
        probs = Tensor(one_hot(hard, 3))
        post = PosteriorMap(probs, hard)
        _, l_rect = cgmm.cgmm_losses_unlabeled(post, post, probs, probs)
        assert l_rect.item() <= 1e-4

    def test_two_voxel_consistency(self):
        a = np.array([[1.0, 1.0], [0.0, 0.0]]).reshape(1, 2, 2, 1, 1)
        b = np.full((1, 2, 2, 1, 1), 0.5)
        pa = PosteriorMap(Tensor(a), np.zeros((1, 2, 1, 1), dtype=int))
        pb = PosteriorMap(Tensor(b), np.zeros((1, 2, 1, 1), dtype=int))
        l_cons, _ = cgmm.cgmm_losses_unlabeled(pa, pb, Tensor(b), Tensor(b))
        assert abs(l_cons.item() - 0.25) <= 1e-15


class TestCompose:
    def test_all_ones(self):
        one = Tensor(1.0)
        l_train, l_cgmm = cgmm.compose_cgmm_loss(one, one, one, one, one, 1.0)
        assert l_train.item() == 4.0 and l_cgmm.item() == 5.0

    def test_zero_consistency_ignores_lambda(self):
        parts = [Tensor(0.3), Tensor(0.2), Tensor(0.1), Tensor(0.0), Tensor(0.5)]
        a = cgmm.compose_cgmm_loss(*parts, lambda_c=1.0)[0].item()
        b = cgmm.compose_cgmm_loss(*parts, lambda_c=7.0)[0].item()
        assert a == b

    def test_zero_lambda(self):
        l_train, _ = cgmm.compose_cgmm_loss(Tensor(0.3), Tensor(0.2), Tensor(0.1), Tensor(9.0), Tensor(0.5), 0.0)
        assert l_train.item() == 0.3 + 0.2 + 0.1

    @pytest.mark.parametrize("slot,name", [(0, "L_self"), (2, "L_max"), (4, "L_rectify")])
    def test_non_finite_term_is_named(self, slot, name):
        parts = [Tensor(1.0)] * 5
        parts[slot] = Tensor(float("nan"))
        with pytest.raises(FloatingPointError, match=name):
            cgmm.compose_cgmm_loss(*parts)


class TestCenterDistance:
    def test_zero_distance(self):
        st_ = _state([[0.0], [2.0]], np.ones((2, 1)))
        d = cgmm.feature_center_distance(st_, _vox([[1.0], [3.0]]), np.array([1, 1]).reshape(1, 2, 1, 1))
        assert d[1] == 0.0 and np.isnan(d[0])

    def test_one_dimensional(self):
        st_ = _state([[0.0], [1.0]], np.ones((2, 1)))
        d = cgmm.feature_center_distance(st_, _vox([[4.0]]), np.array([1]).reshape(1, 1, 1, 1))
        assert d[1] == 3.0

    def test_random_against_norm(self, rng):
        st_ = _random_state(rng, 3, 4)
        feats = rng.normal(size=(2, 4, 3, 2, 2))
        lab = rng.integers(0, 3, (2, 3, 2, 2))
        d = cgmm.feature_center_distance(st_, feats, lab)
        rows = np.moveaxis(feats, 1, -1).reshape(-1, 4)
        flat = lab.reshape(-1)
        for k in range(3):
            ref = math.sqrt(sum((rows[flat == k].mean(axis=0) - st_.means.data[k]) ** 2))
            assert abs(d[k] - ref) <= 1e-12


def _cgmm_total(fl, fu, logits, lab, K, C):
    Fl, Fu = Tensor(fl, requires_grad=True), Tensor(fu, requires_grad=True)
    p = softmax_channel(Tensor(logits))
    pl = p[:2]
    s = cgmm.update_statistics(GmmState.fresh(K, C), Fl, lab, pl.data)
    post = cgmm.posterior(s, Fl)
    gt, se, mx = cgmm.cgmm_losses_labeled(post, lab, pl, s)
    pa, pb = cgmm.posterior(s, Fu[:1]), cgmm.posterior(s, Fu[1:])
    co, _ = cgmm.cgmm_losses_unlabeled(pa, pb, p[2:3], p[3:4])
    l_train, _ = cgmm.compose_cgmm_loss(se, gt, mx, co, Tensor(0.0))
    return l_train, Fl, Fu


class TestGradientFlow:
    def test_train_loss_reaches_features(self):
        """Analytic feature gradients are nonzero and match central differences."""
        r = np.random.default_rng(0)
        K, C = 3, 2
        fl, fu = r.normal(size=(2, C, 2, 2, 3)), r.normal(size=(2, C, 2, 2, 3))
        lab = r.integers(0, K, (2, 2, 2, 3))
        lab[0, 0, 0, :K] = np.arange(K)
        logits = r.normal(size=(4, K, 2, 2, 3))
        tape = Tape()
        with tape:
            total, Fl, Fu = _cgmm_total(fl, fu, logits, lab, K, C)
        tape.backward(total)
        assert np.abs(Fl.grad).max() > 0 and np.abs(Fu.grad).max() > 0
        idx = [tuple(int(v) for v in i) for i in np.ndindex(fl.shape)][:24]
        num_l, num_u = numeric_grad(lambda: float(_cgmm_total(fl, fu, logits, lab, K, C)[0].data),
                                    [fl, fu], [idx, idx])
        for analytic, num in ((Fl.grad, num_l), (Fu.grad, num_u)):
            _, ok = fd_compare(np.array([analytic[i] for i in idx]), num)
            assert ok

    def test_rectify_targets_carry_no_gradient(self, rng):
        """Features reach the rectification loss only through detached hard targets."""
        st_ = _random_state(rng, 3, 2)
        feats = Tensor(rng.normal(size=(1, 2, 3, 2, 2)), requires_grad=True)
        logits = rng.normal(size=(1, 3, 3, 2, 2))
        tape = Tape()
        with tape:
            post = cgmm.posterior(st_, feats)
            probs = softmax_channel(Tensor(logits, requires_grad=True))
            _, l_rect = cgmm.cgmm_losses_unlabeled(post, post, probs, probs)
        tape.backward(l_rect)
        np.testing.assert_array_equal(feats.grad, 0.0)
        # and the prediction gradient equals that against a constant copy of the targets
        lt = Tensor(logits, requires_grad=True)
        tape2 = Tape()
        with tape2:
            q = softmax_channel(lt)
            ref = cross_entropy(q, post.hard.copy()) * 2.0
        tape2.backward(ref)
        assert abs(ref.item() - l_rect.item()) <= 1e-15
