import pathlib
import tempfile

import numpy as np
import pytest
from unittest import TestCase, mock

import net
import sim
import train
from config import LossMode, TrainConfig
from dynamics import DynamicsModel, SystemKind
from interval import BoxRegion
from tests.networks import norm_squared_certificate, scaled_norm_certificate, zero_policy
from train import Batches, TrainingDivergedError


def small_config(**overrides) -> TrainConfig:
    settings = dict(
        r1=[[-1.0, 1.0], [-1.0, 1.0]],
        alpha=0.5,
        certificate_dims=(2, 6, 1),
        policy_dims=(2, 4, 1),
        trajectories=4,
        batch_size=16,
        iterations=3,
        t_max=2.0,
        dt=0.05,
        log_every=1,
        checkpoint_every=2,
    )
    settings.update(overrides)
    return TrainConfig(**settings)


class TestSampling(TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.region = BoxRegion([-1.0, -2.0], [1.0, 2.0])

    def test_interior_samples_inside(self):
        points = train.sample_interior(self.region, 100, self.rng)
        assert points.shape == (100, 2)
        assert np.all(self.region.contains(points))

    def test_boundary_samples_on_the_surface(self):
        points = train.sample_boundary(self.region, 500, self.rng)
        on_face = np.isclose(points, self.region.lo) | np.isclose(points, self.region.hi)
        assert np.all(on_face.any(axis=1))
        assert np.all(self.region.contains(points))
        # the faces x1 = +-1 are twice as long as x2 = +-2
        on_long_faces = np.isclose(np.abs(points[:, 0]), 1.0).mean()
        assert 0.55 < on_long_faces < 0.8

    def test_non_positive_counts(self):
        with self.assertRaises(ValueError):
            train.sample_boundary(self.region, 0, self.rng)


class TestLosses(TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(1)
        self.config = small_config()
        self.model = DynamicsModel(SystemKind.VAN_DER_POL)
        self.certificate = train.init_certificate(self.config, self.rng)
        self.policy = train.init_policy(self.config, self.model, self.rng)
        self.batches = Batches(
            value_states=train.sample_interior(self.config.r1, 4, self.rng),
            value_targets=self.rng.uniform(0.0, 1.0, size=4),
            pde_states=train.sample_interior(self.config.r1, 16, self.rng),
            boundary_states=train.sample_boundary(self.config.r2, 16, self.rng),
        )

    def gradients(self, terms):
        def loss(theta, gamma):
            return train.total_loss(
                self.model, self.certificate, self.policy, self.batches, self.config, theta, gamma, terms
            )["total"]

        _, (theta_grad, gamma_grad) = net.loss_param_gradients(
            loss, self.certificate.parameters(), self.policy.parameters()
        )
        return theta_grad, gamma_grad

    def test_critic_terms_do_not_move_the_policy(self):
        theta_grad, gamma_grad = self.gradients(frozenset({"L_z", "L_r", "L_p"}))
        assert all(np.all(g == 0) for g in gamma_grad)
        assert any(np.any(g != 0) for g in theta_grad)

    def test_actor_term_does_not_move_the_certificate(self):
        theta_grad, gamma_grad = self.gradients(frozenset({"L_actor"}))
        assert all(np.all(g == 0) for g in theta_grad)
        assert any(np.any(g != 0) for g in gamma_grad)

    def test_barrier_term_only_moves_the_certificate(self):
        theta_grad, gamma_grad = self.gradients(frozenset({"L_b"}))
        assert all(np.all(g == 0) for g in gamma_grad)
        assert any(np.any(g != 0) for g in theta_grad)

    def test_full_policy_gradient_is_the_actor_gradient(self):
        _, full = self.gradients(train.ALL_TERMS)
        _, actor_only = self.gradients(frozenset({"L_actor"}))
        for g_full, g_actor in zip(full, actor_only):
            np.testing.assert_array_equal(g_full, g_actor)

    def test_full_certificate_gradient_ignores_the_actor(self):
        full, _ = self.gradients(train.ALL_TERMS)
        without_actor, _ = self.gradients(train.ALL_TERMS - {"L_actor"})
        for g_full, g_rest in zip(full, without_actor):
            np.testing.assert_array_equal(g_full, g_rest)

    def assert_matches_finite_differences(self, loss, params, step=1e-6):
        _, (grads,) = net.loss_param_gradients(loss, params)
        analytic, numeric = [], []
        for i, p in enumerate(params):
            for index in np.ndindex(p.shape):
                up = [q.copy() for q in params]
                down = [q.copy() for q in params]
                up[i][index] += step
                down[i][index] -= step
                numeric.append((float(loss(up).value) - float(loss(down).value)) / (2 * step))
                analytic.append(grads[i][index])
        analytic, numeric = np.array(analytic), np.array(numeric)
        assert np.linalg.norm(analytic - numeric) <= 1e-5 * np.linalg.norm(numeric)

    def test_zubov_residual_gradient_matches_finite_differences(self):
        certificate = net.Mlp.initialize((2, 6, 1), self.rng)

        def loss(theta):
            return train.critic_loss(self.model, certificate, self.policy, self.batches, 0.5, theta)["L_p"]

        self.assert_matches_finite_differences(loss, certificate.parameters())

    def test_actor_gradient_matches_finite_differences(self):
        def loss(gamma):
            states = self.batches.pde_states
            return train.actor_loss(self.model, self.certificate, self.policy, states, 1e-8, None, gamma)

        self.assert_matches_finite_differences(loss, self.policy.parameters())

    def test_total_is_the_weighted_sum(self):
        parts = train.evaluate_components(self.model, self.certificate, self.policy, self.batches, self.config)
        expected = (
            self.config.lambda_0 * parts["L_z"]
            + parts["L_r"]
            + parts["L_p"]
            + self.config.lambda_c * parts["L_actor"]
            + self.config.lambda_b * parts["L_b"]
        )
        assert np.isclose(parts["total"], expected)

    def test_zubov_residual_vanishes_for_the_closed_form_solution(self):
        # along x' = -x, W = tanh(alpha |x|) gives W' = -alpha |x| (1 - W^2) everywhere, 0 included
        alpha = 0.7
        x = np.append(np.linspace(-1.0, 1.0, 1000), 0.0).reshape(-1, 1)
        model = DynamicsModel.linear([[-1.0]], [[0.0]])
        certificate = scaled_norm_certificate(alpha)
        w, w_dot = net.directional_derivative(certificate, x, -x)
        residual = w_dot + alpha * (1.0 - w) * (1.0 + w) * np.abs(x)
        assert np.max(np.abs(residual)) < 1e-10

        policy = zero_policy(input_dim=1)
        batches = Batches(x, np.tanh(alpha * np.abs(x[:, 0])), x, np.array([[-1.0], [1.0]]))
        critic = train.critic_loss(model, certificate, policy, batches, alpha)
        assert float(critic["L_p"].value) < 1e-20
        assert float(critic["L_r"].value) < 1e-20

    def test_lyapunov_risk_vanishes_for_the_zero_function(self):
        zero = net.Mlp.zeros((2, 4, 1))
        risk = train.lyapunov_risk_loss(self.model, zero, self.policy, self.batches.pde_states)
        assert float(risk.value) == 0.0

    def test_lyapunov_risk_mode(self):
        config = small_config(loss_mode=LossMode.LYAPUNOV_RISK, risk_regularizer=0.1)
        parts = train.evaluate_components(self.model, norm_squared_certificate(), self.policy, self.batches, config)
        assert set(parts) == {"L_risk", "total"}
        assert parts["total"] > 0


def central_differences(loss, params, step=1e-6) -> np.ndarray:
    numeric = []
    for i, p in enumerate(params):
        for index in np.ndindex(p.shape):
            up = [q.copy() for q in params]
            down = [q.copy() for q in params]
            up[i][index] += step
            down[i][index] -= step
            numeric.append((loss(up) - loss(down)) / (2 * step))
    return np.array(numeric)


def assert_relative_error(analytic, numeric, tolerance=1e-5):
    analytic = np.concatenate([g.ravel() for g in analytic])
    assert np.linalg.norm(analytic - numeric) <= tolerance * np.linalg.norm(numeric) + 1e-12


class TestFullLossGradients(TestCase):
    SYSTEMS = [
        SystemKind.DOUBLE_INTEGRATOR,
        SystemKind.VAN_DER_POL,
        SystemKind.INVERTED_PENDULUM,
        SystemKind.BICYCLE_TRACKING,
    ]

    def random_setup(self, seed):
        rng = np.random.default_rng(seed)
        model = DynamicsModel(self.SYSTEMS[seed % len(self.SYSTEMS)])
        config = small_config(
            r1=[[-0.8, 0.8], [-0.8, 0.8]],
            certificate_dims=(2, int(rng.integers(2, 5)), 1),
            policy_dims=(2, int(rng.integers(2, 4)), 1),
            actuation="vertex-softmax" if seed % 2 else "box-squash",
            lambda_0=float(rng.uniform(0.5, 5.0)),
            lambda_c=float(rng.uniform(0.1, 1.0)),
            lambda_b=float(rng.uniform(0.5, 5.0)),
        )
        certificate = train.init_certificate(config, rng)
        policy = train.init_policy(config, model, rng)
        batches = Batches(
            value_states=train.sample_interior(config.r1, 3, rng),
            value_targets=rng.uniform(0.0, 1.0, size=3),
            pde_states=train.sample_interior(config.r1, 5, rng),
            boundary_states=train.sample_boundary(config.r2, 5, rng),
        )
        return model, config, certificate, policy, batches

    def test_autodiff_matches_central_differences_on_random_configurations(self):
        for seed in range(100):
            model, config, certificate, policy, batches = self.random_setup(seed)

            def loss(theta, gamma, terms=train.ALL_TERMS):
                return train.total_loss(model, certificate, policy, batches, config, theta, gamma, terms)["total"]

            _, (theta_grad, gamma_grad) = net.loss_param_gradients(
                loss, certificate.parameters(), policy.parameters()
            )
            # the stop-gradients mean theta only drives the critic and barrier terms, gamma only the actor
            critic_side = train.ALL_TERMS - {"L_actor"}
            theta_numeric = central_differences(
                lambda theta: float(loss(theta, None, critic_side).value), certificate.parameters()
            )
            gamma_numeric = central_differences(
                lambda gamma: float(loss(None, gamma, frozenset({"L_actor"})).value), policy.parameters()
            )
            assert_relative_error(theta_grad, theta_numeric)
            assert_relative_error(gamma_grad, gamma_numeric)


class TestOptimizer(TestCase):
    def test_first_adam_step_moves_by_the_learning_rate(self):
        adam = train.Adam([np.zeros(3)], lr=0.1)
        (updated,) = adam.step([np.zeros(3)], [np.array([2.0, -0.5, 0.0])])
        assert np.allclose(updated, [-0.1, 0.1, 0.0], atol=1e-6)


class TestPolicyInit(TestCase):
    def test_policy_starts_at_the_equilibrium_input(self):
        model = DynamicsModel(SystemKind.BICYCLE_TRACKING)
        for actuation in ("box-squash", "vertex-softmax"):
            policy = train.init_policy(small_config(actuation=actuation), model, np.random.default_rng(0))
            assert np.allclose(net.policy_eval(policy, np.zeros(2)), model.u_star)


class TestTrain(TestCase):
    def test_short_run(self):
        model = DynamicsModel(SystemKind.DOUBLE_INTEGRATOR)
        with tempfile.TemporaryDirectory() as directory:
            result = train.train(small_config(), model, checkpoint_dir=pathlib.Path(directory))
            assert (pathlib.Path(directory) / "iteration-000002" / net.CERTIFICATE_FILENAME).exists()
        assert list(result.history.columns) == train.HISTORY_COLUMNS
        assert result.history["iteration"].tolist() == [1, 2, 3]
        assert np.all(np.isfinite(result.history["total"]))
        assert result.certificate.layer_dims == (2, 6, 1)

    def test_same_seed_same_run(self):
        model = DynamicsModel(SystemKind.DOUBLE_INTEGRATOR)
        first = train.train(small_config(iterations=2), model, checkpoint_dir=None)
        second = train.train(small_config(iterations=2), model, checkpoint_dir=None)
        assert first.history.equals(second.history)

    def test_non_finite_loss_writes_a_snapshot(self):
        model = DynamicsModel(SystemKind.DOUBLE_INTEGRATOR)
        with tempfile.TemporaryDirectory() as directory:
            with mock.patch("train.training_step", return_value=(np.nan, {"total": np.nan}, [], [])):
                with self.assertRaises(TrainingDivergedError) as raised:
                    train.train(small_config(), model, checkpoint_dir=pathlib.Path(directory))
            assert raised.exception.snapshot == pathlib.Path(directory) / "diverged-000001"
            assert (raised.exception.snapshot / "batches.json").exists()

    def test_lyapunov_risk_training_does_not_simulate(self):
        model = DynamicsModel(SystemKind.DOUBLE_INTEGRATOR)
        config = small_config(loss_mode=LossMode.LYAPUNOV_RISK, risk_regularizer=0.1)
        with mock.patch("sim.simulate_many") as simulate_many:
            result = train.train(config, model)
        simulate_many.assert_not_called()
        assert np.all(np.isfinite(result.history["L_risk"]))
        assert np.all(result.history["L_z"] == 0.0)

    def test_zubov_training_simulates_every_iteration(self):
        model = DynamicsModel(SystemKind.DOUBLE_INTEGRATOR)
        with mock.patch("sim.simulate_many", wraps=sim.simulate_many) as simulate_many:
            train.train(small_config(), model)
        assert simulate_many.call_count == 3

    def test_region_must_match_the_system(self):
        model = DynamicsModel.linear([[-1.0]], [[1.0]])
        with self.assertRaises(ValueError):
            train.train(small_config(), model)


class TestScalarConvergence(TestCase):
    def test_scalar_linear_system_converges(self):
        model = DynamicsModel.linear([[-1.0]], [[1.0]])
        config = small_config(
            r1=[[-2.0, 2.0]],
            alpha=0.5,
            certificate_dims=(1, 10, 1),
            policy_dims=(1, 6, 1),
            trajectories=8,
            batch_size=32,
            iterations=500,
            learning_rate=1e-2,
            t_max=15.0,
            dt=0.05,
            log_every=100,
        )
        result = train.train(config, model)
        residual = result.history["L_p"].to_numpy()
        windows = residual.reshape(5, 100).mean(axis=1)
        assert windows[-1] < 0.05
        assert windows[-1] < windows[0]
        assert np.all(np.diff(windows) <= 0.1 * windows[0])

        radii = np.linspace(0.0, 1.8, 10)
        for side in (1.0, -1.0):
            w = net.forward(result.certificate, side * radii[:, None])[:, 0]
            assert np.all(np.diff(w) > -1e-3), w


@pytest.mark.slow
class TestConvergence(TestCase):
    def test_double_integrator_learns_a_certificate(self):
        model = DynamicsModel(SystemKind.DOUBLE_INTEGRATOR)
        config = small_config(
            r1=[[-2.5, 2.5], [-2.5, 2.5]],
            alpha=0.05,
            certificate_dims=(2, 20, 20, 1),
            policy_dims=(2, 10, 10, 1),
            trajectories=8,
            batch_size=64,
            iterations=1500,
            t_max=30.0,
            dt=0.01,
            log_every=100,
            checkpoint_every=500,
        )
        result = train.train(config, model)
        first, last = result.history["total"].iloc[:50].mean(), result.history["total"].iloc[-50:].mean()
        assert last < first
        assert abs(net.forward(result.certificate, np.zeros(2))[0]) < 0.05
