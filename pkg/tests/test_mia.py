"""U-LiRA scoring, the gradient-difference test and memorization ranking."""

import math

import numpy as np
import pytest

from warplab.experiment import blobs_for, ggd_candidates, run_ggd, standard_scenario
from warplab.mia import (GaussianFit, ShadowSuite, fit_null_from_deltas, ggd_attack, ggd_score,
                         grad_diff, grad_diff_matrix, memorization_rank, select_coords, select_top,
                         shadow_seeds, top_slice, ulira_attack, ulira_score, ulira_scores,
                         ulira_shadow_suite)
from warplab.nn import LabeledSet, NetworkSpec, ParamVector, TrainConfig, init_params, softmax
from warplab.unlearn import UnlearnConfig, unlearn_run


class TestULiRAScore:
    def test_symmetric_point(self):
        assert ulira_score(0.0, GaussianFit(1.0, 1.0), GaussianFit(-1.0, 1.0)) == pytest.approx(0.5)

    def test_closed_form(self):
        want = 1.0 / (1.0 + np.exp(-2.0))
        assert ulira_score(1.0, GaussianFit(1.0, 1.0), GaussianFit(-1.0, 1.0)) == pytest.approx(want, rel=1e-12)

    def test_swap_gives_complement(self):
        a, b = GaussianFit(0.3, 0.5), GaussianFit(-0.2, 2.0)
        o = np.linspace(-3, 3, 11)
        np.testing.assert_allclose(ulira_score(o, a, b) + ulira_score(o, b, a), 1.0, atol=1e-12)

    def test_far_tails_stay_finite(self):
        p = ulira_score(1e4, GaussianFit(0.0, 1e-6), GaussianFit(1.0, 1e-6))
        assert 0.0 <= p <= 1.0

    def test_variance_floor(self):
        assert GaussianFit.fit([0.7, 0.7, 0.7]).sigma2 > 0


class TestULiRAAttack:
    def test_separated_shadows_give_high_auc(self):
        rng = np.random.default_rng(0)
        suite = ShadowSuite(rng.normal(0.2, 0.05, (8, 6)), rng.normal(0.9, 0.05, (8, 6)))
        assert ulira_attack(suite).auc > 0.95

    def test_identical_distributions_near_chance(self):
        rng = np.random.default_rng(1)
        suite = ShadowSuite(rng.uniform(size=(40, 50)), rng.uniform(size=(40, 50)))
        rep = ulira_attack(suite)
        n = 40 * 50
        assert abs(rep.auc - 0.5) < 3 / np.sqrt(n)

    def test_needs_observations(self):
        suite = ShadowSuite(np.zeros((2, 3)), np.ones((2, 3)))
        with pytest.raises(ValueError):
            ulira_attack(suite)

    def test_scores_shape(self):
        O, Oh = np.full((4, 3), 0.1), np.full((4, 3), 0.9)
        assert ulira_scores(O, Oh, np.array([0.1, 0.5, 0.9])).shape == (3,)

    def test_identity_unlearning_separates_members(self, blob_scenario):
        """Unlearning that does nothing leaves member confidences; retraining lowers them."""
        spec, data, retain, forget, _ = blob_scenario
        base = retain.subset(np.arange(200))
        suite = ulira_shadow_suite(spec, base, forget, 4, TrainConfig(60, 0.1, 32, 0),
                                   UnlearnConfig(eta=0.0, steps=1), None, seed=1)
        assert ulira_attack(suite).auc > 0.5

    def test_shadow_seeds_distinct(self):
        s = shadow_seeds(3, 50)
        assert len(set(s)) == 50 and s == shadow_seeds(3, 50)


class TestGradDiff:
    def test_linear_model_closed_form(self):
        spec = NetworkSpec((3, 2), seed=0)
        a, b = init_params(spec), init_params(NetworkSpec((3, 2), seed=1))
        x, y = np.array([1.0, -2.0, 0.5]), 1

        def lin_grad(p):
            (W, c), = p.layers()
            r = softmax((W @ x + c)[None])[0] - np.eye(2)[y]
            return np.concatenate([np.outer(r, x).ravel(), r])

        np.testing.assert_allclose(grad_diff(spec, a, b, x, y).values, lin_grad(b) - lin_grad(a),
                                   atol=1e-14)

    def test_manifest_mismatch(self):
        a, b = init_params(NetworkSpec((3, 2))), init_params(NetworkSpec((3, 4, 2)))
        with pytest.raises(ValueError):
            grad_diff_matrix(NetworkSpec((3, 2)), a, b, np.zeros((1, 3)), [0])


class TestSelectCoords:
    def test_planted_high_variance(self):
        rng = np.random.default_rng(0)
        B = rng.normal(0, 0.1, (200, 50))
        B[:, [3, 17, 41]] *= 100
        np.testing.assert_array_equal(select_top(B, 3), [3, 17, 41])

    def test_fraction_rounds_up(self):
        assert select_coords(np.random.default_rng(0).normal(size=(5, 10)), 0.25).size == 3

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            select_coords(np.zeros((3, 3)), 0.0)


class TestGaussianNull:
    def test_moments_within_sampling_error(self):
        rng = np.random.default_rng(1)
        mu, L = np.array([1.0, -2.0, 0.5]), np.array([[1, 0, 0], [0.5, 1, 0], [0.2, -0.3, 0.7]])
        D = mu + rng.normal(size=(20_000, 3)) @ L.T
        null = fit_null_from_deltas(D, 1e-9, np.arange(3))
        np.testing.assert_allclose(null.mu_hat, mu, atol=4 / np.sqrt(20_000) * 1.5)
        np.testing.assert_allclose(null.sigma_hat, L @ L.T, atol=0.05)

    def test_identical_points_give_ridge(self):
        null = fit_null_from_deltas(np.ones((5, 2)), 0.3, np.arange(2))
        np.testing.assert_allclose(null.sigma_hat, 0.0)
        s, lt = ggd_score(np.ones((1, 2)), null)
        assert s[0] == 0.0 and lt[0] == 0.0

    def test_two_samples(self):
        D = np.array([[0.0, 1.0], [2.0, 3.0]])
        null = fit_null_from_deltas(D, 1.0, np.arange(2))
        r = D[0] - D.mean(axis=0)
        np.testing.assert_allclose(null.sigma_hat, 2 * np.outer(r, r))

    def test_non_finite_rows_dropped(self):
        D = np.array([[0.0], [1.0], [np.nan], [2.0]])
        null = fit_null_from_deltas(D, 1e-3, [0])
        assert null.n_used == 3 and null.n_dropped == 1

    def test_score_196(self):
        null = fit_null_from_deltas(np.array([[-1.0], [1.0]]), 1e-300, [0])
        null.sigma_hat[:] = 1.0
        null.ridge = 0.0
        s, lt = ggd_score(np.array([[1.96]]), null)
        assert s[0] == pytest.approx(3.8416, rel=1e-12)
        assert lt[0] == pytest.approx(-math.log(math.erfc(1.96 / math.sqrt(2))), rel=1e-9)

    def test_bad_ridge_and_factorization(self):
        with pytest.raises(ValueError):
            fit_null_from_deltas(np.zeros((3, 1)), 0.0, [0])
        null = fit_null_from_deltas(np.array([[0.0], [1.0]]), 1e-3, [0])
        null.sigma_hat[:] = -1.0
        with pytest.raises(np.linalg.LinAlgError, match="ridge"):
            null.cholesky()


class TestGGDAttack:
    def test_no_update_gives_chance(self, small_scenario):
        spec, data, _, forget, theta = small_scenario
        cands = LabeledSet(data.X[:10], data.y[:10], n_classes=3)
        labels = np.r_[np.ones(5, int), np.zeros(5, int)]
        rep = ggd_attack(spec, theta, theta, cands, labels, lambda t: data, ridge=1e-3)
        assert rep.auc == pytest.approx(0.5)

    def test_T_accumulates(self, small_scenario):
        spec, data, retain, forget, theta = small_scenario
        tu, _ = unlearn_run(spec, theta, forget, retain, UnlearnConfig(eta=0.05, steps=3))
        cands, labels = forget, np.r_[np.ones(3, int), np.zeros(len(forget) - 3, int)]
        one = ggd_attack(spec, theta, tu, cands, labels, lambda t: data, T=1, ridge=1e-3)
        two = ggd_attack(spec, theta, tu, cands, labels, lambda t: data, T=2, ridge=1e-3)
        np.testing.assert_allclose(two.scores, 2 * one.scores)

    @pytest.mark.xfail(strict=False, reason="members sit at a flat memorized point of theta_org, "
                                            "so aggressive NGP makes them look typical: AUC < 0.5")
    def test_aggressive_ngp_separates(self):
        aucs = []
        for seed in range(5):
            sc = standard_scenario(seed)
            ucfg = UnlearnConfig(eta=0.05, lambda_retain=0.05, steps=20, seed=seed)
            tu, _ = unlearn_run(sc.spec, sc.theta_org, sc.forget, sc.retain, ucfg)
            cands, labels = ggd_candidates(sc.forget, sc.test)
            rep = run_ggd(sc.spec, sc.theta_org, tu, cands, labels,
                          lambda t: blobs_for(sc.dataset, 500 + t, 250, "background"), 1, 1e-3, 0.1)
            aucs.append(rep.auc)
        assert np.mean(aucs) > 0.55


class TestMemorization:
    def test_rank_by_confidence(self):
        spec = NetworkSpec((1, 2))
        p = ParamVector(np.array([0.0, 0.0, 0.0, 0.0]), spec.manifest())
        p.values[:2] = [1.0, -1.0]
        forget = LabeledSet(np.array([[-1.1], [1.1], [0.0]]), [0, 0, 0], n_classes=2)
        np.testing.assert_array_equal(memorization_rank(spec, p, forget), [0, 2, 1])

    def test_ties_keep_order(self):
        spec = NetworkSpec((1, 2))
        p = ParamVector(np.zeros(4), spec.manifest())
        forget = LabeledSet(np.zeros((4, 1)), [0, 1, 0, 1], n_classes=2)
        np.testing.assert_array_equal(memorization_rank(spec, p, forget), [0, 1, 2, 3])

    def test_slice_size(self):
        assert top_slice(np.arange(10), 0.25).size == 3
        assert top_slice(np.arange(3), 0.01).size == 1
