"""
Actor-critic co-training of the Zubov certificate W_theta and the policy pi_gamma.

Every loss is a scalar Tensor built from network parameters passed in as lists (theta for the
certificate, gamma for the policy). Passing numpy arrays, or Tensors that do not require gradients,
just evaluates the loss.
"""

import pathlib
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
from ddtrace import tracer

import autodiff
import disk
import dynamics
import net
import sim
import util
from autodiff import Tensor
from config import CONFIG, LossMode, TrainConfig
from constants import ACTUATION_BOUND
from dynamics import DynamicsModel
from interval import BoxRegion
from logger import set_up_logging
from timing import measure_time

logger = set_up_logging(__name__)
tracer.enabled = CONFIG["DATADOG_TRACE_ENABLED"]

__all__ = ["train", "total_loss", "Batches", "TrainResult", "TrainingDivergedError"]

HISTORY_COLUMNS = ["iteration", "L_z", "L_r", "L_p", "L_actor", "L_b", "L_risk", "total"]
ALL_TERMS: FrozenSet[str] = frozenset({"L_z", "L_r", "L_p", "L_actor", "L_b"})


class TrainingDivergedError(RuntimeError):
    """The loss became non-finite; a diagnostic snapshot was written to `snapshot`."""

    def __init__(self, message: str, snapshot: Optional[pathlib.Path] = None):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class Batches:
    # M states with their regression targets tanh(alpha * V)
    value_states: np.ndarray
    value_targets: np.ndarray
    # K states where the Zubov residual and the actor term are evaluated
    pde_states: np.ndarray
    # K states on the boundary of R2
    boundary_states: np.ndarray


def sample_interior(region: BoxRegion, count: int, rng: np.random.Generator) -> np.ndarray:
    if count <= 0:
        raise util.UsageError(f"count must be positive, got {count}")
    return rng.uniform(region.lo, region.hi, size=(count, region.dim))


def sample_boundary(region: BoxRegion, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform on the surface: a face is picked with probability proportional to its measure."""
    if count <= 0:
        raise util.UsageError(f"count must be positive, got {count}")
    widths = region.widths()
    measures = np.array([np.prod(np.delete(widths, d)) for d in range(region.dim)])
    if measures.sum() > 0:
        weights = measures / measures.sum()
    else:
        weights = np.full(region.dim, 1.0 / region.dim)
    dims = rng.choice(region.dim, size=count, p=weights)
    upper = rng.integers(0, 2, size=count).astype(bool)
    points = rng.uniform(region.lo, region.hi, size=(count, region.dim))
    rows = np.arange(count)
    points[rows, dims] = np.where(upper, region.hi[dims], region.lo[dims])
    return points


def _values(params: Optional[Sequence]) -> Optional[List[np.ndarray]]:
    if params is None:
        return None
    return [p.value if isinstance(p, Tensor) else np.asarray(p, dtype=float) for p in params]


def _norms(x: np.ndarray) -> np.ndarray:
    return np.linalg.norm(x, axis=1, keepdims=True)


def _mean(t) -> Tensor:
    return autodiff.as_tensor(t).mean()


def _policy_field(model: DynamicsModel, policy: net.PolicyNet, x: np.ndarray, gamma: Optional[Sequence] = None):
    return dynamics.eval_f(model, x, net.policy_eval(policy, x, gamma))


def critic_loss(
    model: DynamicsModel,
    certificate: net.Mlp,
    policy: net.PolicyNet,
    batches: Batches,
    alpha: float,
    theta: Optional[Sequence] = None,
    gamma: Optional[Sequence] = None,
) -> Dict[str, Tensor]:
    """L_z = W(0)^2, L_r = regression onto the simulated values, L_p = Zubov residual with the policy held fixed."""
    origin = np.zeros((1, certificate.input_dim))
    zero = _mean(util.square(net.forward(certificate, origin, theta)))

    w = net.forward(certificate, batches.value_states, theta)
    regression = _mean(util.square(w - batches.value_targets.reshape(-1, 1)))

    x = batches.pde_states
    f = autodiff.stop_gradient(_policy_field(model, policy, x, gamma))
    w, w_dot = net.directional_derivative(certificate, x, f, theta)
    residual = w_dot + alpha * (1.0 - w) * (1.0 + w) * _norms(x)
    return {"L_z": zero, "L_r": regression, "L_p": _mean(util.square(residual))}


def actor_loss(
    model: DynamicsModel,
    certificate: net.Mlp,
    policy: net.PolicyNet,
    states: np.ndarray,
    grad_guard: float,
    theta: Optional[Sequence] = None,
    gamma: Optional[Sequence] = None,
) -> Tensor:
    """Mean of the normalized certificate gradient (a constant) dotted with the closed-loop field."""
    gradient = net.input_gradient(certificate, states, _values(theta))
    direction = gradient / np.maximum(np.linalg.norm(gradient, axis=1, keepdims=True), grad_guard)
    f = _policy_field(model, policy, states, gamma)
    return _mean((autodiff.as_tensor(f) * autodiff.stop_gradient(direction)).sum(axis=1))


def barrier_loss(certificate: net.Mlp, boundary_states: np.ndarray, theta: Optional[Sequence] = None) -> Tensor:
    return _mean(util.absolute(net.forward(certificate, boundary_states, theta) - 1.0))


def lyapunov_risk_loss(
    model: DynamicsModel,
    certificate: net.Mlp,
    policy: net.PolicyNet,
    states: np.ndarray,
    theta: Optional[Sequence] = None,
    gamma: Optional[Sequence] = None,
    alpha: float = 1.0,
    regularizer: float = 0.0,
) -> Tensor:
    """
    Expected violation of the Lyapunov conditions: V(0)^2 + mean (-V)+ + mean (V')+.
    Vanishes identically for V = 0, the shortcut solution this loss cannot rule out on its own.
    The optional regularizer adds mean (||x|| - alpha V(x))^2.
    """
    origin = np.zeros((1, certificate.input_dim))
    at_origin = _mean(util.square(net.forward(certificate, origin, theta)))
    f = _policy_field(model, policy, states, gamma)
    v, v_dot = net.directional_derivative(certificate, states, autodiff.as_tensor(f), theta)
    v = autodiff.as_tensor(v)
    loss = at_origin + _mean(autodiff.relu(-v)) + _mean(autodiff.relu(autodiff.as_tensor(v_dot)))
    if regularizer > 0:
        loss = loss + regularizer * _mean(util.square(_norms(states) - alpha * v))
    return loss


def total_loss(
    model: DynamicsModel,
    certificate: net.Mlp,
    policy: net.PolicyNet,
    batches: Batches,
    config: TrainConfig,
    theta: Optional[Sequence] = None,
    gamma: Optional[Sequence] = None,
    terms: FrozenSet[str] = ALL_TERMS,
) -> Dict[str, Tensor]:
    """
    lambda_0 L_z + L_r + L_p + lambda_c L_actor + lambda_b L_b, returned with its unweighted parts
    under "total". `terms` masks parts out, which is how the stop-gradient separation is tested.
    """
    if config.loss_mode == LossMode.LYAPUNOV_RISK:
        risk = lyapunov_risk_loss(
            model, certificate, policy, batches.pde_states, theta, gamma, config.alpha, config.risk_regularizer
        )
        return {"L_risk": risk, "total": risk}

    parts: Dict[str, Tensor] = {}
    if terms & {"L_z", "L_r", "L_p"}:
        critic = critic_loss(model, certificate, policy, batches, config.alpha, theta, gamma)
        parts.update({name: value for name, value in critic.items() if name in terms})
    if "L_actor" in terms:
        parts["L_actor"] = actor_loss(
            model, certificate, policy, batches.pde_states, config.grad_guard, theta, gamma
        )
    if "L_b" in terms:
        parts["L_b"] = barrier_loss(certificate, batches.boundary_states, theta)

    weights = {"L_z": config.lambda_0, "L_r": 1.0, "L_p": 1.0, "L_actor": config.lambda_c, "L_b": config.lambda_b}
    total = autodiff.as_tensor(0.0)
    for name, value in parts.items():
        total = total + weights[name] * value
    parts["total"] = total
    return parts


def evaluate_components(
    model: DynamicsModel, certificate: net.Mlp, policy: net.PolicyNet, batches: Batches, config: TrainConfig
) -> Dict[str, float]:
    parts = total_loss(model, certificate, policy, batches, config)
    return {name: float(value.value) for name, value in parts.items()}


class Adam:
    """Adam over a list of numpy parameter arrays."""

    def __init__(self, params: Sequence[np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> List[np.ndarray]:
        self.t += 1
        updated = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1**self.t)
            v_hat = self.v[i] / (1 - self.beta2**self.t)
            updated.append(p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return updated


def init_certificate(config: TrainConfig, rng: np.random.Generator) -> net.Mlp:
    return net.Mlp.initialize(config.certificate_dims, rng)


def init_policy(config: TrainConfig, model: DynamicsModel, rng: np.random.Generator) -> net.PolicyNet:
    lower = np.full(model.input_dim, -ACTUATION_BOUND)
    upper = np.full(model.input_dim, ACTUATION_BOUND)
    if config.actuation == "vertex-softmax":
        actuation = net.Actuation.box_vertices(lower, upper)
    else:
        actuation = net.Actuation.box_squash(lower, upper)
    dims = list(config.policy_dims[:-1]) + [actuation.core_output_dim]
    core = net.Mlp.initialize(dims, rng, output_activation=net.Activation.IDENTITY)
    anchor = net.anchor_logits(actuation, model.u_star) if config.anchor_policy else None
    return net.PolicyNet(core, actuation, anchor)


def draw_batches(
    config: TrainConfig, model: DynamicsModel, policy: net.PolicyNet, rng: np.random.Generator
) -> Batches:
    """
    One iteration's samples: simulate M states from R1 for value targets, K PDE states, K boundary states.
    The Lyapunov-risk loss never reads value targets, so in that mode nothing is simulated.
    """
    value_states = sample_interior(config.r1, config.trajectories, rng)
    if config.loss_mode == LossMode.LYAPUNOV_RISK:
        value_targets = np.zeros(len(value_states))
    else:
        field = dynamics.vector_field(model, lambda x: net.policy_eval(policy, x))
        trajectories = sim.simulate_many(
            field, value_states, dt=config.dt, t_max=config.t_max, r_conv=config.r_conv, r_div=config.r_div
        )
        value_targets = sim.value_targets(trajectories, config.alpha)
    return Batches(
        value_states=value_states,
        value_targets=value_targets,
        pde_states=sample_interior(config.r1, config.batch_size, rng),
        boundary_states=sample_boundary(config.r2, config.batch_size, rng),
    )


@measure_time(report_frequency=0.01)
def training_step(
    model: DynamicsModel,
    certificate: net.Mlp,
    policy: net.PolicyNet,
    batches: Batches,
    config: TrainConfig,
):
    """Loss value, its parts, and gradients for theta and gamma in one backward pass."""
    parts = {}

    def loss(theta, gamma):
        parts.update(total_loss(model, certificate, policy, batches, config, theta, gamma))
        return parts["total"]

    value, (theta_grad, gamma_grad) = net.loss_param_gradients(loss, certificate.parameters(), policy.parameters())
    return value, {name: float(t.value) for name, t in parts.items()}, theta_grad, gamma_grad


def _write_snapshot(
    directory: pathlib.Path, iteration: int, certificate: net.Mlp, policy: net.PolicyNet, batches: Batches, parts
) -> pathlib.Path:
    snapshot = directory / f"diverged-{iteration:06d}"
    net.save_networks(snapshot, certificate, policy)
    disk.write_json(
        {
            "iteration": iteration,
            "components": parts,
            "value_states": batches.value_states,
            "value_targets": batches.value_targets,
            "pde_states": batches.pde_states,
            "boundary_states": batches.boundary_states,
        },
        snapshot / "batches.json",
    )
    return snapshot


class TrainResult(NamedTuple):
    certificate: net.Mlp
    policy: net.PolicyNet
    history: pd.DataFrame


@tracer.wrap()
def train(
    config: TrainConfig,
    model: DynamicsModel,
    checkpoint_dir: Optional[pathlib.Path] = None,
) -> TrainResult:
    """Sample, simulate, and take one Adam step on the combined loss, config.iterations times."""
    model.validate_region(config.r1.lo, config.r1.hi)
    if config.r1.dim != model.state_dim:
        raise util.UsageError(f"r1 is {config.r1.dim}-dimensional, {model.kind.value} has {model.state_dim} states")

    rng = np.random.default_rng(config.seed)
    certificate = init_certificate(config, rng)
    policy = init_policy(config, model, rng)
    theta_opt = Adam(certificate.parameters(), config.learning_rate, config.adam_betas, config.adam_epsilon)
    gamma_opt = Adam(policy.parameters(), config.learning_rate, config.adam_betas, config.adam_epsilon)
    snapshot_dir = pathlib.Path(checkpoint_dir) if checkpoint_dir is not None else disk.DATA_DIR / "diagnostics"

    logger.info(
        f"Training {model.kind.value} for {config.iterations} iterations "
        f"(certificate {list(config.certificate_dims)}, policy {list(config.policy_dims)}, alpha={config.alpha})"
    )
    records = []
    for iteration in range(1, config.iterations + 1):
        batches = draw_batches(config, model, policy, rng)
        value, parts, theta_grad, gamma_grad = training_step(model, certificate, policy, batches, config)
        finite_grads = all(np.all(np.isfinite(g)) for g in theta_grad + gamma_grad)
        if not np.isfinite(value) or not finite_grads:
            snapshot = _write_snapshot(snapshot_dir, iteration, certificate, policy, batches, parts)
            logger.error(f"Non-finite loss at iteration {iteration}, snapshot written to {snapshot}")
            raise TrainingDivergedError(f"loss became non-finite at iteration {iteration}", snapshot)

        certificate = certificate.with_parameters(theta_opt.step(certificate.parameters(), theta_grad))
        policy = policy.with_parameters(gamma_opt.step(policy.parameters(), gamma_grad))
        records.append({"iteration": iteration, **parts})

        if iteration % config.log_every == 0 or iteration == 1:
            summary = " ".join(f"{name}={parts[name]:.4g}" for name in HISTORY_COLUMNS[1:] if name in parts)
            logger.info(f"iteration {iteration}: {summary}")
        if checkpoint_dir is not None and iteration % config.checkpoint_every == 0:
            net.save_networks(pathlib.Path(checkpoint_dir) / f"iteration-{iteration:06d}", certificate, policy)

    history = pd.DataFrame(records).reindex(columns=HISTORY_COLUMNS, fill_value=0.0)
    history["iteration"] = history["iteration"].astype(int)
    return TrainResult(certificate, policy, history)
