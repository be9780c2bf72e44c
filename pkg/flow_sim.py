#
# flow_sim.py
# Time-discretised stochastic flows on embedded manifolds: driving noise,
# Cameron-Martin shifts, the flow with its derivative, the perturbation ODE,
# Girsanov weights, antidevelopment increments and the filtered derivative
# flow.
#
# Paths are simulated in batches: arrays carry a leading sample axis B.
# Derivative flows are stored in orthonormal frames B_k of T_{x_k}M that are
# transported along the path, as n x n matrices J_k = B_k^T D_k B_0.

import logging
from dataclasses import dataclass

import numpy as np

from config import TOLERANCES
from errors import DomainError, GridError, PreconditionError, StepSizeError
from geometry_core import VectorField, sample_points, transport_frame
from ljw_connection import (
    connection_shift,
    ljw_derivative,
    nabla_coefficient,
    projection_e,
    ricci_matrix,
)

logger = logging.getLogger(__name__)


def _apply(matrix, vector):
    return np.einsum("...ij,...j->...i", matrix, vector)


def _matmul(a, b):
    return np.einsum("...ij,...jk->...ik", a, b)


def _transpose(a):
    return np.swapaxes(a, -1, -2)


# Driving noise

@dataclass(frozen=True)
class DrivingNoise:
    horizon: float
    increments: np.ndarray  # (B, L, m)
    seed: int
    indices: tuple

    @property
    def steps(self):
        return self.increments.shape[1]

    @property
    def dt(self):
        return self.horizon / self.steps

    @property
    def batch(self):
        return self.increments.shape[0]

    def coarsen(self, factor):
        """Same Brownian path on a grid `factor` times coarser."""
        if self.steps % factor:
            raise GridError(f"{self.steps} steps cannot be coarsened by {factor}")
        b, steps, m = self.increments.shape
        summed = self.increments.reshape(b, steps // factor, factor, m).sum(axis=2)
        return DrivingNoise(self.horizon, summed, self.seed, self.indices)


def noise_stream(seed, index):
    """Counter-based generator fixed by (seed, index) alone."""
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(sequence))


def sample_noise(horizon, steps, seed, index, noise_dim=1):
    return sample_noise_batch(horizon, steps, seed, [index], noise_dim)


def sample_noise_batch(horizon, steps, seed, indices, noise_dim=1):
    if steps < 1 or horizon <= 0:
        raise GridError(f"invalid grid: horizon={horizon}, steps={steps}")
    scale = np.sqrt(horizon / steps)
    increments = np.stack([noise_stream(seed, i).standard_normal((steps, noise_dim)) * scale for i in indices])
    return DrivingNoise(float(horizon), increments, int(seed), tuple(int(i) for i in indices))


# Cameron-Martin paths

@dataclass(frozen=True)
class CameronMartinPath:
    """Piecewise-linear k on the simulation grid, values (L+1, m), k(0) = 0."""

    horizon: float
    values: np.ndarray
    spec: str = ""

    def __post_init__(self):
        if np.any(self.values[0] != 0.0):
            raise PreconditionError("Cameron-Martin path must start at 0")

    @property
    def steps(self):
        return self.values.shape[0] - 1

    @property
    def dt(self):
        return self.horizon / self.steps

    @property
    def increments(self):
        return np.diff(self.values, axis=0)

    @property
    def velocity(self):
        return self.increments / self.dt

    @property
    def energy(self):
        return float(np.sum(self.velocity ** 2) * self.dt)

    def scaled(self, alpha):
        return CameronMartinPath(self.horizon, alpha * self.values, f"{alpha}*{self.spec}")

    @classmethod
    def from_function(cls, fn, horizon, steps, spec=""):
        times = np.linspace(0.0, horizon, steps + 1)
        values = np.array([np.atleast_1d(fn(t)) for t in times], dtype=float)
        values[0] = 0.0
        return cls(float(horizon), values, spec)


def linear_path(direction, horizon, steps):
    direction = np.atleast_1d(np.asarray(direction, dtype=float))
    return CameronMartinPath.from_function(lambda t: t * direction, horizon, steps, "linear")


def zero_path(noise_dim, horizon, steps):
    return CameronMartinPath(float(horizon), np.zeros((steps + 1, noise_dim)), "zero")


def sine_path(direction, horizon, steps):
    direction = np.atleast_1d(np.asarray(direction, dtype=float))
    return CameronMartinPath.from_function(
        lambda t: np.sin(np.pi * t / horizon) * direction * horizon / np.pi, horizon, steps, "sine"
    )


def _check_grid(noise, path):
    if noise.steps != path.steps or not np.isclose(noise.horizon, path.horizon):
        raise GridError(f"grids differ: noise {noise.steps} steps on [0,{noise.horizon}], k {path.steps} steps on [0,{path.horizon}]")


# Flow paths

@dataclass(frozen=True)
class FlowPath:
    points: np.ndarray  # (B, L+1, N)
    frames: np.ndarray  # (B, L+1, N, n)
    jacobian: np.ndarray  # (B, L+1, n, n)
    jacobian_inv: np.ndarray  # (B, L+1, n, n)
    increments: np.ndarray  # (B, L, m) driving increments consumed
    noise: DrivingNoise

    @property
    def steps(self):
        return self.points.shape[1] - 1

    @property
    def dt(self):
        return self.noise.dt

    def derivative(self, k):
        """Ambient matrix of T xi_{t_k}, (B, N, N)."""
        return _matmul(_matmul(self.frames[:, k], self.jacobian[:, k]), _transpose(self.frames[:, 0]))

    def derivative_inverse(self, k):
        return _matmul(_matmul(self.frames[:, 0], self.jacobian_inv[:, k]), _transpose(self.frames[:, k]))


def _batch_points(manifold, x0, batch):
    x0 = np.asarray(x0, dtype=float)
    if not np.all(manifold.contains(x0)):
        raise DomainError(f"initial point off {manifold.name}")
    return np.broadcast_to(x0, (batch, manifold.ambient_dim)).copy()


def _heun_step(system, x, d_b, dt):
    drift = system.drift
    f0 = _apply(system.X(x), d_b) + drift(x) * dt
    x_bar = x + f0
    f1 = _apply(system.X(x_bar), d_b) + drift(x_bar) * dt
    return f0, x_bar, 0.5 * (f0 + f1)


def _step_variation(system, x, x_bar, delta, d_b, dt, w):
    """Derivative of one Heun + retraction step in the direction w."""
    df0 = _apply(system.dX(x, w), d_b) + system.dA(x, w) * dt
    dx_bar = w + df0
    df1 = _apply(system.dX(x_bar, dx_bar), d_b) + system.dA(x_bar, dx_bar) * dt
    return _apply(system.manifold.retraction_jacobian(x, delta), w + 0.5 * (df0 + df1))


def _integrate(system, x0, increments, dt, with_derivative=True):
    manifold = system.manifold
    batch, steps, _ = increments.shape
    n = manifold.intrinsic_dim
    points = np.empty((batch, steps + 1, manifold.ambient_dim))
    points[:, 0] = _batch_points(manifold, x0, batch)
    frames = np.empty((batch, steps + 1, manifold.ambient_dim, n))
    frames[:, 0] = manifold.tangent_frame(points[:, 0])
    jac = np.empty((batch, steps + 1, n, n))
    jac_inv = np.empty((batch, steps + 1, n, n))
    jac[:, 0] = np.eye(n)
    jac_inv[:, 0] = np.eye(n)

    for k in range(steps):
        x = points[:, k]
        d_b = increments[:, k]
        _, x_bar, delta = _heun_step(system, x, d_b, dt)
        step_norm = np.linalg.norm(delta, axis=-1)
        if np.any(step_norm > manifold.max_step):
            raise StepSizeError(f"step {k} of length {step_norm.max():.3g} leaves the retraction domain")
        x_next = manifold.retract(x, delta)
        points[:, k + 1] = x_next
        frames[:, k + 1] = transport_frame(manifold, x_next, frames[:, k])
        if not with_derivative:
            continue
        images = np.stack(
            [_step_variation(system, x, x_bar, delta, d_b, dt, frames[:, k, :, j]) for j in range(n)], axis=-1
        )
        step_matrix = _matmul(_transpose(frames[:, k + 1]), images)
        jac[:, k + 1] = _matmul(step_matrix, jac[:, k])
        jac_inv[:, k + 1] = _matmul(jac_inv[:, k], np.linalg.inv(step_matrix))
    return points, frames, jac, jac_inv


def integrate_flow(system, x0, noise, increments=None):
    """Stratonovich Heun + retraction with the derivative flow alongside."""
    increments = noise.increments if increments is None else increments
    points, frames, jac, jac_inv = _integrate(system, x0, increments, noise.dt)
    return FlowPath(points, frames, jac, jac_inv, increments, noise)


def simulate_points(system, x0, noise, increments=None):
    """Points of the flow only, (B, L+1, N)."""
    increments = noise.increments if increments is None else increments
    return _integrate(system, x0, increments, noise.dt, with_derivative=False)[0]


def shifted_flow(system, x0, noise, path, tau):
    """The flow driven by B + tau k."""
    _check_grid(noise, path)
    return integrate_flow(system, x0, noise, noise.increments + tau * path.increments[None])


def girsanov_weight(noise, path, tau):
    _check_grid(noise, path)
    pairing = np.einsum("lm,blm->b", path.velocity, noise.increments)
    return np.exp(tau * pairing - 0.5 * tau ** 2 * path.energy)


# Perturbation ODE and composition

def _flow_at(system, y, increments, steps, dt):
    """xi_{t_steps}(y) with frames and inverse derivative, for a batch y."""
    if steps == 0:
        frame = system.manifold.tangent_frame(y)
        n = frame.shape[-1]
        eye = np.broadcast_to(np.eye(n), y.shape[:-1] + (n, n))
        return y, frame, frame, eye
    points, frames, _, jac_inv = _integrate(system, y, increments[:, :steps], dt)
    return points[:, -1], frames[:, -1], frames[:, 0], jac_inv[:, -1]


def _perturbation(system, path, k, tau, mode):
    if mode not in ("reference", "fast"):
        raise ValueError(f"unknown perturbation mode '{mode}'")
    _check_grid(path.noise, k)
    manifold = system.manifold
    dt = path.dt
    velocity = k.velocity
    x0 = path.points[:, 0]
    increments = path.increments
    h_points = np.empty_like(path.points)
    h_points[:, 0] = x0
    composed = np.empty_like(path.points)
    composed[:, 0] = x0

    def linearised(j, y):
        # xi_t(y) ~ R(xi_t(x0), D_t (y - x0)) on the frozen base path
        return manifold.retract(path.points[:, j], _apply(path.derivative(j), manifold.displacement(x0, y)))

    def rate(j, y, k_dot):
        if mode == "fast":
            target = path.points[:, j]
            inv = path.derivative_inverse(j)
            vector = _apply(inv, _apply(system.X(target), k_dot))
            return tau * dt * manifold.project(y, vector), linearised(j, y)
        end, frame_end, frame_start, jac_inv = _flow_at(system, y, increments, j, dt)
        coords = _apply(jac_inv, _apply(_transpose(frame_end), _apply(system.X(end), k_dot)))
        return tau * dt * _apply(frame_start, coords), end

    for j in range(path.steps):
        k_dot = np.broadcast_to(velocity[j], (x0.shape[0], velocity.shape[1]))
        h0, composed[:, j] = rate(j, h_points[:, j], k_dot)
        predicted = manifold.retract(h_points[:, j], h0)
        h1, _ = rate(j + 1, predicted, k_dot)
        step = 0.5 * (h0 + h1)
        if np.any(np.linalg.norm(step, axis=-1) > manifold.max_step):
            raise StepSizeError(f"perturbation step {j} unstable for tau={tau}")
        h_points[:, j + 1] = manifold.retract(h_points[:, j], step)
    if mode == "fast":
        composed[:, -1] = linearised(path.steps, h_points[:, -1])
    else:
        composed[:, -1] = _flow_at(system, h_points[:, -1], increments, path.steps, dt)[0]
    return h_points, composed


def perturbation_ode(system, path, k, tau, mode="reference"):
    """H^tau_t(x0) for every grid time, (B, L+1, N).

    reference re-integrates the flow from the perturbed points with the same
    noise; fast freezes the base path and uses its derivative flow.
    """
    return _perturbation(system, path, k, tau, mode)[0]


def compose_check(system, x0, noise, k, tau, mode="reference"):
    """Sup over the grid of dist(xi_t(H_t(x0)), shifted flow), per sample."""
    base = integrate_flow(system, x0, noise)
    _, composed = _perturbation(system, base, k, tau, mode)
    shifted = shifted_flow(system, x0, noise, k, tau)
    return np.max(system.manifold.distance(composed, shifted.points), axis=1)


# Antidevelopment and filtered flow

def antidevelopment_martingale_increments(system, path, rank=None):
    """Ito increments e(x_k) dB_k of the martingale part of the antidevelopment."""
    e = projection_e(system, path.points[:, :-1], rank=rank)
    return _apply(e, path.increments)


@dataclass(frozen=True)
class ObservedPath:
    """The path-measurable part of a FlowPath: no raw noise."""

    points: np.ndarray
    frames: np.ndarray
    increments: np.ndarray  # e(x_k) dB_k
    dt: float

    @property
    def steps(self):
        return self.points.shape[1] - 1


def observe(oracle, path):
    increments = antidevelopment_martingale_increments(oracle.system, path, rank=oracle.rank)
    return ObservedPath(path.points, path.frames, increments, path.dt)


@dataclass(frozen=True)
class FilteredFlow:
    matrices: np.ndarray  # (B, L+1, n, n) in the path frames
    inverses: np.ndarray
    frames: np.ndarray
    variant: str

    def ambient(self, k):
        return _matmul(_matmul(self.frames[:, k], self.matrices[:, k]), _transpose(self.frames[:, 0]))

    def apply(self, k, v0):
        return _apply(self.ambient(k), v0)


def drift_in_subbundle(oracle, count=256, seed=1):
    points = sample_points(oracle.manifold, count, seed=seed, quasi=True)
    a = oracle.system.drift(points)
    residual = a - _apply(oracle.system.X(points), _apply(oracle.Y(points), a))
    return bool(np.max(np.linalg.norm(residual, axis=-1)) <= TOLERANCES.section_residual)


def _coefficient_section(system, a):
    return VectorField(evaluate=lambda y: _apply(system.X(y), a), name="X(.)a")


def _in_frame(frame, vectors):
    # vectors (B, N, n) -> coordinates (B, n, n)
    return _matmul(_transpose(frame), vectors)


def _noise_matrix(oracle, variant, x, frame, a):
    columns = []
    for j in range(frame.shape[-1]):
        v = frame[..., j]
        if variant == "eq8":
            columns.append(nabla_coefficient(oracle.system, x, v, a))
        else:
            columns.append(-connection_shift(oracle, _coefficient_section(oracle.system, a), x, v))
    return _in_frame(frame, np.stack(columns, axis=-1))


def _drift_matrix(oracle, variant, x, frame):
    system = oracle.system
    manifold = oracle.manifold
    ricci = ricci_matrix(oracle, x)
    columns = []
    for j in range(frame.shape[-1]):
        v = frame[..., j]
        damping = -0.5 * _apply(ricci, v)
        if variant == "eq8":
            columns.append(manifold.project(x, system.dA(x, v)) + damping)
        else:
            drift_term = ljw_derivative(oracle, system.drift, x, v) - connection_shift(oracle, system.drift, x, v)
            columns.append(drift_term + damping)
    return _in_frame(frame, np.stack(columns, axis=-1))


def filtered_derivative_flow(oracle, observed, variant="eq8"):
    """W^A along an observed path.

    eq8 integrates the Levi-Civita form driven by e(x) o dB; eq7 integrates
    the adjoint semi-connection form, converted to the path frames. The
    noise term is Heun (corrector increment re-projected by e(x_{k+1})),
    drift and Ricci damping are explicit.
    """
    if variant not in ("eq7", "eq8"):
        raise ValueError(f"unknown filtered-flow variant '{variant}'")
    if variant == "eq7" and not drift_in_subbundle(oracle):
        raise PreconditionError("eq7 requires the drift A(x) to lie in I(X)_x")

    batch, size = observed.points.shape[:2]
    n = observed.frames.shape[-1]
    dt = observed.dt
    mats = np.empty((batch, size, n, n))
    invs = np.empty((batch, size, n, n))
    mats[:, 0] = np.eye(n)
    invs[:, 0] = np.eye(n)

    for k in range(size - 1):
        x, x_next = observed.points[:, k], observed.points[:, k + 1]
        frame, frame_next = observed.frames[:, k], observed.frames[:, k + 1]
        a = observed.increments[:, k]
        a_next = _apply(oracle.e(x_next), a)
        noise_here = _noise_matrix(oracle, variant, x, frame, a)
        drift_here = _drift_matrix(oracle, variant, x, frame) * dt
        current = mats[:, k]
        predicted = current + _matmul(noise_here + drift_here, current)
        noise_next = _noise_matrix(oracle, variant, x_next, frame_next, a_next)
        step = np.eye(n) + 0.5 * noise_here + drift_here
        mats[:, k + 1] = _matmul(step, current) + 0.5 * _matmul(noise_next, predicted)
        invs[:, k + 1] = np.linalg.inv(mats[:, k + 1])
    return FilteredFlow(mats, invs, observed.frames, variant)
