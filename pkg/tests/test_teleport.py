"""Null-space teleportation, FastWARP tracking and change-of-basis symmetry."""

import numpy as np
import pytest

from conftest import fd_grad
from warplab.nn import LabeledSet, NetworkSpec, ParamVector, forward, init_params, loss
from warplab.teleport import (COBScales, WarpConfig, build_retain_basis, cob_apply, cob_sample,
                              fastwarp_update, forget_grad_energy, layer_inputs,
                              principal_cosines, project_null, teleport_loss,
                              teleport_loss_grad, teleport_step)


def _eig_basis(R, var_target):
    """Top eigenvectors of R^T R reaching the energy target (dense oracle)."""
    w, V = np.linalg.eigh(R.T @ R)
    w, V = w[::-1], V[:, ::-1]
    k = int(np.searchsorted(np.cumsum(w) / w.sum(), var_target - 1e-12) + 1)
    return V[:, :k]


class TestRetainBasis:
    def test_rank_matches_eigen_oracle(self):
        rng = np.random.default_rng(0)
        R = rng.normal(size=(8, 4)) * np.array([3.0, 1.0, 0.5, 0.1])
        spec = NetworkSpec((4, 3), seed=0)
        p = init_params(spec)
        basis = build_retain_basis(spec, p, LabeledSet(R, np.zeros(8, int), n_classes=3), 0.9)
        oracle = _eig_basis(R, 0.9)
        assert basis.ks == [oracle.shape[1]]
        np.testing.assert_allclose(principal_cosines(basis.bases[0], oracle), 1.0, atol=1e-10)

    def test_projection_annihilates_basis(self):
        rng = np.random.default_rng(1)
        spec = NetworkSpec((6, 5, 3), seed=1)
        p = init_params(spec)
        batch = LabeledSet(rng.normal(size=(20, 6)), rng.integers(0, 3, 20))
        basis = build_retain_basis(spec, p, batch, 0.95)
        G = rng.normal(size=(5, 6))
        P = project_null(G, basis, 0)
        np.testing.assert_allclose(P @ basis.bases[0], 0.0, atol=1e-12)
        np.testing.assert_allclose(project_null(P, basis, 0), P, atol=1e-12)

    def test_fan_in_mismatch_rejected(self):
        spec = NetworkSpec((3, 2), seed=0)
        basis = build_retain_basis(spec, init_params(spec),
                                   LabeledSet(np.eye(3), [0, 1, 0], n_classes=2), 0.9)
        with pytest.raises(ValueError):
            project_null(np.zeros((2, 4)), basis, 0)

    def test_basis_roundtrip(self):
        spec = NetworkSpec((3, 4, 2), seed=0)
        rng = np.random.default_rng(0)
        b = build_retain_basis(spec, init_params(spec),
                               LabeledSet(rng.normal(size=(9, 3)), rng.integers(0, 2, 9)), 0.9, augment=True)
        c = type(b).from_dict(b.to_dict())
        for u, v in zip(b.bases, c.bases):
            np.testing.assert_array_equal(u, v)


class TestTeleportLoss:
    def test_grad_matches_fd(self, small_scenario):
        spec, data, _, forget, theta = small_scenario
        start = theta + ParamVector(0.01 * np.random.default_rng(0).normal(size=len(theta)),
                                    theta.manifest)
        g = teleport_loss_grad(spec, start, theta, forget, 0.3).values
        fd = fd_grad(lambda v: teleport_loss(spec, ParamVector(v, theta.manifest), theta,
                                             forget, 0.3), start.values, h=1e-6)
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-7)

    def test_beta_zero_is_pure_energy(self, small_scenario):
        spec, _, _, forget, theta = small_scenario
        np.testing.assert_allclose(teleport_loss(spec, theta, theta, forget, 0.0),
                                   forget_grad_energy(spec, theta, forget))


class TestTeleportStep:
    def test_retain_drift_small_and_energy_drops(self, blob_scenario):
        spec, _, retain, forget, theta = blob_scenario
        cfg = WarpConfig(enabled=True, eta_tel=1e-3, var_target=0.99)
        basis = build_retain_basis(spec, theta, retain, 0.99, augment=True)
        new = teleport_step(spec, theta, theta, forget, basis, cfg)
        r0, r1 = loss(spec, theta, retain), loss(spec, new, retain)
        assert abs(r1 - r0) / r0 < 1e-3
        assert forget_grad_energy(spec, new, forget) < forget_grad_energy(spec, theta, forget)

    def test_zero_step_is_identity(self, small_scenario):
        spec, _, retain, forget, theta = small_scenario
        basis = build_retain_basis(spec, theta, retain, 0.99, augment=True)
        cfg = WarpConfig(enabled=True, eta_tel=0.0)
        np.testing.assert_array_equal(teleport_step(spec, theta, theta, forget, basis, cfg).values,
                                      theta.values)

    def test_noise_needs_rng(self, small_scenario):
        spec, _, retain, forget, theta = small_scenario
        basis = build_retain_basis(spec, theta, retain, 0.99, augment=True)
        with pytest.raises(ValueError):
            teleport_step(spec, theta, theta, forget, basis, WarpConfig(eta_tel=1e-3, sigma2=1.0))

    def test_projected_noise_leaves_retain_inputs_alone(self, small_scenario):
        """With var_target=1 the noise lies in the exact null space of layer-1 inputs."""
        spec, _, retain, forget, theta = small_scenario
        sub = retain.subset(np.arange(5))
        basis = build_retain_basis(spec, theta, sub, 1.0, augment=True)
        cfg = WarpConfig(enabled=True, eta_tel=1e-12, sigma2=1e6)
        new = teleport_step(spec, theta, theta, forget, basis, cfg, np.random.default_rng(0))
        h0 = layer_inputs(spec, theta, sub.X, augment=True)[0]
        (W0, b0), (W1, b1) = theta.layers()[0], new.layers()[0]
        pre0 = h0 @ np.hstack([W0, b0[:, None]]).T
        pre1 = h0 @ np.hstack([W1, b1[:, None]]).T
        np.testing.assert_allclose(pre1, pre0, atol=1e-6)

    def test_bias_mode_mismatch_rejected(self, small_scenario):
        spec, _, retain, forget, theta = small_scenario
        basis = build_retain_basis(spec, theta, retain, 0.99, augment=False)
        with pytest.raises(ValueError):
            teleport_step(spec, theta, theta, forget, basis, WarpConfig(eta_tel=1e-3))


class TestFastWarp:
    def test_cold_start_spans_svd_basis(self, small_scenario):
        spec, _, retain, _, theta = small_scenario
        exact = build_retain_basis(spec, theta, retain, 0.9)
        fast = fastwarp_update(spec, theta, retain, None, 0.9)
        for a, b in zip(exact.bases, fast.bases):
            assert a.shape == b.shape
            assert np.arccos(principal_cosines(a, b).min()) < 1e-6

    def test_warm_start_tracks_stationary_covariance(self, small_scenario):
        spec, _, retain, _, theta = small_scenario
        exact = build_retain_basis(spec, theta, retain, 0.9)
        rng = np.random.default_rng(0)
        prev = fastwarp_update(spec, theta, retain, None, 0.9)
        noisy = type(prev)([np.linalg.qr(B + 0.05 * rng.normal(size=B.shape))[0] for B in prev.bases],
                           prev.captured, prev.rank_deficient, prev.augmented)
        warm = fastwarp_update(spec, theta, retain, noisy, 0.9, t_track=5)
        for a, b in zip(exact.bases, warm.bases):
            assert principal_cosines(a, b).min() > 0.95


class TestChangeOfBasis:
    def test_function_preserved(self):
        rng = np.random.default_rng(0)
        spec = NetworkSpec((2, 4, 2), seed=0)
        p = init_params(spec)
        tau = COBScales((rng.uniform(0.5, 2.0, 4),))
        X = rng.normal(size=(100, 2))
        diff = forward(spec, cob_apply(spec, p, tau), X)[0] - forward(spec, p, X)[0]
        assert np.abs(diff).max() < 1e-8

    def test_deep_net_preserved(self):
        spec = NetworkSpec((5, 7, 6, 3), seed=4)
        p = init_params(spec)
        tau = cob_sample(spec, 0.8, seed=9)
        X = np.random.default_rng(1).normal(size=(50, 5))
        np.testing.assert_allclose(forward(spec, cob_apply(spec, p, tau), X)[0],
                                   forward(spec, p, X)[0], atol=1e-10)

    def test_composition(self):
        spec = NetworkSpec((3, 4, 2), seed=0)
        p = init_params(spec)
        a, b = cob_sample(spec, 0.5, seed=1), cob_sample(spec, 0.5, seed=2)
        np.testing.assert_allclose(cob_apply(spec, cob_apply(spec, p, a), b).values,
                                   cob_apply(spec, p, a * b).values, rtol=1e-12)

    def test_unclipped_mean_is_one(self):
        spec = NetworkSpec((2, 20000, 2))
        t = cob_sample(spec, 0.1, seed=3).flat()
        assert abs(t.mean() - 1.0) < 3 * 0.1 / np.sqrt(t.size)

    def test_clipping_and_positivity(self):
        spec = NetworkSpec((2, 5000, 2))
        t = cob_sample(spec, 5.0, 0.05, 3.0, seed=0).flat()
        assert t.min() >= 0.05 and t.max() <= 3.0
        with pytest.raises(ValueError):
            COBScales((np.array([1.0, 0.0]),))

    def test_wrong_width_rejected(self):
        spec = NetworkSpec((2, 3, 2))
        with pytest.raises(ValueError):
            cob_apply(spec, init_params(spec), COBScales((np.ones(4),)))


class TestWarpConfig:
    def test_needs_a_trigger(self):
        with pytest.raises(ValueError):
            WarpConfig(interval=None, grad_trigger=None)

    def test_fires(self):
        assert WarpConfig(interval=3).fires(3, 0.0) and not WarpConfig(interval=3).fires(4, 0.0)
        assert WarpConfig(interval=None, grad_trigger=1.0).fires(1, 2.0)
