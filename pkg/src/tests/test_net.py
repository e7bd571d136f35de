import pathlib
import tempfile

import numpy as np
from unittest import TestCase, mock

import disk
import net
from autodiff import Tensor
from interval import Interval
from net import Activation, Actuation, Mlp, PolicyNet
from tests.networks import norm_squared_certificate
from util import UsageError


def numeric_input_gradient(certificate, x, step=1e-6):
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (net.forward(certificate, x + e)[0] - net.forward(certificate, x - e)[0]) / (2 * step)
    return g


class TestMlp(TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(11)
        self.certificate = Mlp.initialize((2, 8, 8, 1), self.rng)

    def test_hand_wired_certificate(self):
        x = np.array([[0.5, -1.0], [0.0, 0.0]])
        assert np.allclose(net.forward(norm_squared_certificate(), x)[:, 0], np.tanh([1.25, 0.0]))

    def test_single_state_and_batch(self):
        x = self.rng.normal(size=(5, 2))
        batch = net.forward(self.certificate, x)
        assert batch.shape == (5, 1)
        assert np.allclose(net.forward(self.certificate, x[2]), batch[2])

    def test_initialization_bounds(self):
        for w in self.certificate.weights[1:]:
            assert np.all(np.abs(w) <= 1.0 / np.sqrt(8))

    def test_input_gradient_matches_finite_differences(self):
        for x in self.rng.normal(size=(4, 2)):
            assert np.allclose(net.input_gradient(self.certificate, x), numeric_input_gradient(self.certificate, x))

    def test_directional_derivative(self):
        x = self.rng.normal(size=(3, 2))
        v = self.rng.normal(size=(3, 2))
        w, w_dot = net.directional_derivative(self.certificate, x, v)
        assert np.allclose(w, net.forward(self.certificate, x))
        expected = (net.input_gradient(self.certificate, x) * v).sum(axis=1, keepdims=True)
        assert np.allclose(w_dot, expected)

    def test_interval_forward_encloses_points(self):
        lo, hi = np.array([[-0.5, 0.2]]), np.array([[0.1, 0.6]])
        bounds = net.forward(self.certificate, Interval(lo, hi))
        values = net.forward(self.certificate, self.rng.uniform(lo[0], hi[0], size=(200, 2)))
        assert np.all(bounds.lo <= values) and np.all(values <= bounds.hi)

        _, gradient_bounds = net.value_and_gradient(self.certificate, Interval(lo, hi))
        gradients = net.input_gradient(self.certificate, self.rng.uniform(lo[0], hi[0], size=(200, 2)))
        assert np.all(gradient_bounds.lo <= gradients) and np.all(gradients <= gradient_bounds.hi)

    def test_parameter_gradients_match_finite_differences(self):
        x = self.rng.normal(size=(6, 2))
        params = self.certificate.parameters()

        def loss(group):
            return net.forward(self.certificate, x, group).sum()

        value, (grads,) = net.loss_param_gradients(loss, params)
        assert np.isclose(value, net.forward(self.certificate, x).sum())
        step = 1e-6
        for index in [(0, (3, 1)), (1, (5,)), (4, (0, 2))]:
            which, position = index
            up = [p.copy() for p in params]
            down = [p.copy() for p in params]
            up[which][position] += step
            down[which][position] -= step
            numeric = (net.forward(self.certificate, x, up).sum() - net.forward(self.certificate, x, down).sum()) / (
                2 * step
            )
            assert np.isclose(grads[which][position], numeric, atol=1e-6)

    def test_loss_must_be_a_tensor(self):
        with self.assertRaises(UsageError):
            net.loss_param_gradients(lambda group: 1.0, self.certificate.parameters())

    def test_shape_validation(self):
        with self.assertRaises(UsageError):
            Mlp((2, 3, 1), (np.zeros((3, 2)),), (np.zeros(3),))
        with self.assertRaises(UsageError):
            net.forward(self.certificate, np.zeros(3))


class TestPolicy(TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(5)
        self.core = Mlp.initialize((2, 6, 1), self.rng)

    def test_box_squash_stays_inside_bounds(self):
        policy = PolicyNet(self.core, Actuation.box_squash([-1.0], [1.0]))
        u = net.policy_eval(policy, self.rng.normal(scale=10.0, size=(50, 2)))
        assert np.all(np.abs(u) <= 1.0)

    def test_anchor_pins_equilibrium_input(self):
        actuation = Actuation.box_squash([-1.0], [1.0])
        policy = PolicyNet(self.core, actuation, net.anchor_logits(actuation, np.pi / 4))
        assert np.allclose(net.policy_eval(policy, np.zeros(2)), [np.pi / 4])

    def test_vertex_softmax_anchor(self):
        actuation = Actuation.box_vertices([-1.0], [1.0])
        assert actuation.vertices.tolist() == [[-1.0, 1.0]]
        core = Mlp.initialize((2, 6, 2), self.rng)
        policy = PolicyNet(core, actuation, net.anchor_logits(actuation, [0.3]))
        assert np.allclose(net.policy_eval(policy, np.zeros(2)), [0.3])
        u = net.policy_eval(policy, self.rng.normal(size=(20, 2)))
        assert np.all(np.abs(u) <= 1.0)

    def test_anchor_outside_the_input_set(self):
        with self.assertRaises(UsageError):
            net.anchor_logits(Actuation.box_squash([-1.0], [1.0]), 1.5)
        with self.assertRaises(UsageError):
            net.anchor_logits(Actuation.box_vertices([-1.0], [1.0]), 2.0)

    def test_clamp(self):
        core = Mlp((2, 1), (np.array([[3.0, 0.0]]),), (np.zeros(1),), output_activation=Activation.IDENTITY)
        policy = PolicyNet(core, Actuation.box_clamp([-1.0], [1.0]))
        assert np.allclose(net.policy_eval(policy, np.array([[0.1, 0.0], [1.0, 0.0]]))[:, 0], [0.3, 1.0])

    def test_interval_policy_encloses_points(self):
        actuation = Actuation.box_vertices([-1.0], [1.0])
        policy = PolicyNet(Mlp.initialize((2, 6, 2), self.rng), actuation, net.anchor_logits(actuation, [0.0]))
        lo, hi = np.array([[-0.3, -0.3]]), np.array([[0.2, 0.4]])
        bounds = net.policy_eval(policy, Interval(lo, hi))
        values = net.policy_eval(policy, self.rng.uniform(lo[0], hi[0], size=(200, 2)))
        assert np.all(bounds.lo <= values) and np.all(values <= bounds.hi)

    def test_vertex_softmax_outputs_stay_in_the_hull(self):
        logits = self.rng.normal(scale=30.0, size=(100_000, 4))
        box = Actuation.box_vertices([-1.0, -0.5], [2.0, 0.5])
        u = box.apply(logits)
        assert np.all(u >= np.array([-1.0, -0.5]) - 1e-12) and np.all(u <= np.array([2.0, 0.5]) + 1e-12)

        triangle = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        u = Actuation.vertex_softmax(triangle).apply(logits[:, :3])
        # barycentric coordinates of the triangle (0, 0), (1, 0), (0, 1)
        assert np.all(u >= -1e-12)
        assert np.all(u.sum(axis=1) <= 1.0 + 1e-12)

    def test_interval_policy_encloses_a_dense_grid(self):
        lo, hi = np.array([-0.3, -0.3]), np.array([0.2, 0.4])
        grid = np.stack(np.meshgrid(np.linspace(lo[0], hi[0], 201), np.linspace(lo[1], hi[1], 201)), axis=-1)
        grid = grid.reshape(-1, 2)
        for actuation in (Actuation.box_vertices([-1.0], [1.0]), Actuation.box_squash([-1.0], [1.0])):
            core = Mlp.initialize((2, 6, actuation.core_output_dim), self.rng)
            policy = PolicyNet(core, actuation, net.anchor_logits(actuation, [0.0]))
            bounds = net.policy_eval(policy, Interval(lo[None, :], hi[None, :]))
            values = net.policy_eval(policy, grid)
            assert np.all(bounds.lo <= values) and np.all(values <= bounds.hi), actuation.kind

    def test_box_squash_saturates_without_leaving_the_box(self):
        core = Mlp.initialize((2, 6, 1), self.rng)
        core = Mlp(core.layer_dims, tuple(10.0 * w for w in core.weights), core.biases)
        policy = PolicyNet(core, Actuation.box_squash([-1.0], [1.0]))
        axis = np.linspace(-100.0, 100.0, 201)
        grid = np.stack(np.meshgrid(axis, axis), axis=-1).reshape(-1, 2)
        u = net.policy_eval(policy, grid)
        assert np.max(np.abs(u)) <= 1.0

    def test_tensor_policy(self):
        policy = PolicyNet(self.core, Actuation.box_squash([-1.0], [1.0]))
        u = net.policy_eval(policy, Tensor(np.zeros((3, 2))))
        assert isinstance(u, Tensor)
        assert u.shape == (3, 1)


class TestConversions(TestCase):
    def test_zubov_identity(self):
        v = np.array([0.0, 0.5, 3.0, 20.0])
        assert np.allclose(net.value_from_zubov(net.zubov_from_value(v, 0.1), 0.1), v)

    def test_infinite_value_outside(self):
        assert net.value_from_zubov(np.array([1.0]), 0.5)[0] == np.inf


class TestPersistence(TestCase):
    def test_save_and_load(self):
        rng = np.random.default_rng(2)
        certificate = Mlp.initialize((2, 4, 1), rng)
        actuation = Actuation.box_vertices([-1.0], [1.0])
        policy = PolicyNet(Mlp.initialize((2, 4, 2), rng), actuation, net.anchor_logits(actuation, [0.0]))
        with tempfile.TemporaryDirectory() as directory:
            net.save_networks(directory, certificate, policy)
            loaded_certificate, loaded_policy = net.load_networks(directory)
        x = rng.normal(size=(5, 2))
        assert np.array_equal(net.forward(loaded_certificate, x), net.forward(certificate, x))
        assert np.array_equal(net.policy_eval(loaded_policy, x), net.policy_eval(policy, x))
        assert loaded_policy.actuation.kind == net.ActuationKind.VERTEX_SOFTMAX

    def test_networks_go_through_the_disk_helpers(self):
        rng = np.random.default_rng(3)
        certificate = Mlp.initialize((2, 4, 1), rng)
        policy = PolicyNet(Mlp.initialize((2, 4, 1), rng), Actuation.box_squash([-1.0], [1.0]))
        with tempfile.TemporaryDirectory() as directory:
            with mock.patch("disk.write_json", wraps=disk.write_json) as write_json:
                net.save_networks(pathlib.Path(directory) / "nested", certificate, policy)
            written = [call.args[1].name for call in write_json.call_args_list]
            assert written == [net.CERTIFICATE_FILENAME, net.POLICY_FILENAME]
            with mock.patch("disk.read_json", wraps=disk.read_json) as read_json:
                net.load_networks(pathlib.Path(directory) / "nested")
            assert read_json.call_count == 2
            record = disk.read_json(pathlib.Path(directory) / "nested" / net.POLICY_FILENAME)
            assert record["anchor"] is None
