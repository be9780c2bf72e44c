#
# ibp_harness.py
# Monte Carlo estimates of both sides of the integration-by-parts identities,
# the Girsanov reweighting identity, the tau-derivative check and the
# filtering identity. Every check is a paired estimate: both sides are
# computed on the same noise and the z-score comes from per-sample
# differences.

import logging
import math
import multiprocessing
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pandas as pd

from config import DEFAULT_CHUNK, DEFAULT_HORIZON, DEFAULT_STEPS, TOLERANCES
from errors import DomainError, GridError, PreconditionError, UnsupportedScenarioError
from flow_sim import (
    filtered_derivative_flow,
    girsanov_weight,
    integrate_flow,
    observe,
    sample_noise_batch,
    simulate_points,
)
from geometry_core import sample_points

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CylindricalFunctional:
    """F(sigma) = f(sigma(t_1)(x_1), ..., sigma(t_p)(x_q)).

    value and gradient take arrays of shape (B, p, q, N); gradient returns
    ambient gradients of the same shape.
    """

    name: str
    times: tuple
    point_count: int
    value: Callable
    gradient: Callable

    def __call__(self, values):
        return self.value(values)

    def derivative(self, values, tangents):
        return np.einsum("bpqn,bpqn->b", self.gradient(values), tangents)


@dataclass(frozen=True)
class EstimatorResult:
    count: int
    lhs_mean: float
    lhs_stderr: float
    rhs_mean: float
    rhs_stderr: float
    paired_mean: float
    paired_stderr: float
    z: float
    lhs: np.ndarray = field(repr=False)
    rhs: np.ndarray = field(repr=False)
    extras: dict = field(default_factory=dict)

    @classmethod
    def from_samples(cls, lhs, rhs, **extras):
        lhs = np.asarray(lhs, dtype=float)
        rhs = np.asarray(rhs, dtype=float)
        lhs_mean, lhs_stderr = mean_stderr(lhs)
        rhs_mean, rhs_stderr = mean_stderr(rhs)
        paired_mean, paired_stderr = mean_stderr(lhs - rhs)
        return cls(
            count=len(lhs),
            lhs_mean=lhs_mean,
            lhs_stderr=lhs_stderr,
            rhs_mean=rhs_mean,
            rhs_stderr=rhs_stderr,
            paired_mean=paired_mean,
            paired_stderr=paired_stderr,
            z=z_score(paired_mean, paired_stderr),
            lhs=lhs,
            rhs=rhs,
            extras=extras,
        )

    def frame(self):
        """Per-sample values as a DataFrame indexed by sample."""
        df = pd.DataFrame({"lhs": self.lhs, "rhs": self.rhs})
        df["diff"] = df["lhs"] - df["rhs"]
        df.index.name = "sample"
        return df


def mean_stderr(values):
    """Mean and standard error with exactly rounded sums (order independent)."""
    values = np.asarray(values, dtype=float)
    count = len(values)
    mean = math.fsum(values) / count
    if count < 2:
        return mean, 0.0
    variance = math.fsum((values - mean) ** 2) / (count - 1)
    return mean, math.sqrt(variance / count)


def z_score(mean, stderr):
    if stderr > 0.0:
        return abs(mean) / stderr
    return 0.0 if mean == 0.0 else math.inf


# Parallel evaluation

_ACTIVE_KERNEL = None


def _run_chunk(bounds):
    start, stop = bounds
    return _ACTIVE_KERNEL(np.arange(start, stop))


def evaluate_samples(kernel, count, workers=1, chunk_size=DEFAULT_CHUNK):
    """Run kernel(indices) -> dict of per-sample arrays over fixed chunks.

    Chunk boundaries depend only on count and chunk_size, so the result is
    the same for any number of workers.
    """
    global _ACTIVE_KERNEL
    bounds = [(start, min(start + chunk_size, count)) for start in range(0, count, chunk_size)]
    if workers > 1 and len(bounds) > 1:
        _ACTIVE_KERNEL = kernel
        try:
            with multiprocessing.get_context("fork").Pool(workers) as pool:
                parts = pool.map(_run_chunk, bounds)
        finally:
            _ACTIVE_KERNEL = None
    else:
        parts = []
        for start, stop in bounds:
            logger.debug("samples %d..%d", start, stop)
            parts.append(kernel(np.arange(start, stop)))
    return {key: np.concatenate([part[key] for part in parts]) for key in parts[0]}


# Shared pieces

def grid_indices(times, horizon, steps):
    """Grid indices of evaluation times; raises if a time is off grid."""
    dt = horizon / steps
    indices = []
    for t in times:
        position = t / dt
        index = int(round(position))
        if abs(position - index) > 1e-9 * max(1.0, position) or not 0 <= index <= steps:
            raise GridError(f"time {t} is not on the grid of {steps} steps over [0, {horizon}]")
        indices.append(index)
    return indices


def tangent_integral(system, points, frames, matrices, inverses, velocity, dt):
    """int_0^t M_s^{-1} B_s^T X(x_s) k_dot_s ds in frame coordinates, (B, L+1, n).

    M is a derivative flow in path frames; trapezoidal rule on each step
    with k_dot constant across the step.
    """
    coeff = system.X(points)
    pushed = np.einsum("blnm,lm->bln", coeff[:, :-1], velocity), np.einsum("blnm,lm->bln", coeff[:, 1:], velocity)
    left = np.einsum("blij,blj->bli", inverses[:, :-1], np.einsum("blni,bln->bli", frames[:, :-1], pushed[0]))
    right = np.einsum("blij,blj->bli", inverses[:, 1:], np.einsum("blni,bln->bli", frames[:, 1:], pushed[1]))
    out = np.zeros(left.shape[:1] + (left.shape[1] + 1,) + left.shape[2:])
    out[:, 1:] = np.cumsum(0.5 * (left + right) * dt, axis=1)
    return out


def _vectors_at(frames, matrices, integral, indices):
    """Ambient V_{t_i} = B_{t_i} M_{t_i} I_{t_i}, (B, p, N)."""
    coords = np.einsum("bpij,bpj->bpi", matrices[:, indices], integral[:, indices])
    return np.einsum("bpni,bpi->bpn", frames[:, indices], coords)


def _pairing(k, increments):
    return np.einsum("lm,blm->b", k.velocity, increments)


def _check_functional(functional, k, points):
    if functional.point_count != len(points):
        raise PreconditionError(f"{functional.name} takes {functional.point_count} base points, got {len(points)}")
    return grid_indices(functional.times, k.horizon, k.steps)


def coefficient_injective(system, count=16, seed=3):
    """Whether a -> X(.)a is injective as a map into vector fields."""
    points = sample_points(system.manifold, count, seed=seed, quasi=True)
    stacked = system.X(points).reshape(-1, system.noise_dim)
    return int(np.linalg.matrix_rank(stacked)) == system.noise_dim


def _multipoint_kernel(system, points, functional, k, seed):
    indices_t = _check_functional(functional, k, points)

    def kernel(indices):
        noise = sample_noise_batch(k.horizon, k.steps, seed, indices, system.noise_dim)
        values, tangents = [], []
        for x in points:
            path = integrate_flow(system, x, noise)
            integral = tangent_integral(
                system, path.points, path.frames, path.jacobian, path.jacobian_inv, k.velocity, path.dt
            )
            values.append(path.points[:, indices_t])
            tangents.append(_vectors_at(path.frames, path.jacobian, integral, indices_t))
        values = np.stack(values, axis=2)
        tangents = np.stack(tangents, axis=2)
        lhs = functional.derivative(values, tangents)
        rhs = functional(values) * _pairing(k, noise.increments)
        return {"lhs": lhs, "rhs": rhs}

    return kernel


# Estimators

def estimate_eq4(system, x0, functional, k, n, seed, workers=1, chunk_size=DEFAULT_CHUNK):
    """E dF(T xi int T xi_s^{-1} X k_dot ds) against E F(xi) int <k_dot, dB>."""
    kernel = _multipoint_kernel(system, [np.asarray(x0, dtype=float)], functional, k, seed)
    samples = evaluate_samples(kernel, n, workers, chunk_size)
    return EstimatorResult.from_samples(samples["lhs"], samples["rhs"])


def estimate_eq5_multipoint(system, points, functional, k, n, seed, workers=1, chunk_size=DEFAULT_CHUNK):
    """Flow-of-diffeomorphisms identity at q base points sharing one noise path."""
    if not coefficient_injective(system):
        raise UnsupportedScenarioError(f"{system.scenario_id}: a -> X(.)a is not injective")
    points = [np.asarray(p, dtype=float) for p in points]
    kernel = _multipoint_kernel(system, points, functional, k, seed)
    samples = evaluate_samples(kernel, n, workers, chunk_size)
    return EstimatorResult.from_samples(samples["lhs"], samples["rhs"])


def _filtered(oracle, system, x0, noise, variant, increments=None):
    path = integrate_flow(system, x0, noise, increments)
    observed = observe(oracle, path)
    return path, observed, filtered_derivative_flow(oracle, observed, variant)


def estimate_eq9(oracle, x0, functional, k, n, seed, variant="eq8", workers=1, chunk_size=DEFAULT_CHUNK):
    """The filtered identity: W^A replaces T xi and dB is replaced by e(x) dB."""
    system = oracle.system
    indices_t = _check_functional(functional, k, [x0])

    def kernel(indices):
        noise = sample_noise_batch(k.horizon, k.steps, seed, indices, system.noise_dim)
        path, observed, flow = _filtered(oracle, system, x0, noise, variant)
        integral = tangent_integral(system, path.points, path.frames, flow.matrices, flow.inverses, k.velocity, path.dt)
        values = path.points[:, indices_t][:, :, None]
        tangents = _vectors_at(path.frames, flow.matrices, integral, indices_t)[:, :, None]
        lhs = functional.derivative(values, tangents)
        rhs = functional(values) * _pairing(k, observed.increments)
        return {"lhs": lhs, "rhs": rhs}

    samples = evaluate_samples(kernel, n, workers, chunk_size)
    return EstimatorResult.from_samples(samples["lhs"], samples["rhs"], variant=variant)


def filtering_consistency_check(oracle, x0, functional, k, n, seed, variant="eq8", workers=1, chunk_size=DEFAULT_CHUNK):
    """Left side of the unfiltered identity against the left side of the filtered one."""
    system = oracle.system
    indices_t = _check_functional(functional, k, [x0])

    def kernel(indices):
        noise = sample_noise_batch(k.horizon, k.steps, seed, indices, system.noise_dim)
        path, _, flow = _filtered(oracle, system, x0, noise, variant)
        values = path.points[:, indices_t][:, :, None]
        sides = []
        for mats, invs in ((path.jacobian, path.jacobian_inv), (flow.matrices, flow.inverses)):
            integral = tangent_integral(system, path.points, path.frames, mats, invs, k.velocity, path.dt)
            sides.append(functional.derivative(values, _vectors_at(path.frames, mats, integral, indices_t)[:, :, None]))
        return {"lhs": sides[0], "rhs": sides[1]}

    samples = evaluate_samples(kernel, n, workers, chunk_size)
    return EstimatorResult.from_samples(samples["lhs"], samples["rhs"], variant=variant)


def girsanov_reweight_check(system, x0, functional, k, tau, n, seed, workers=1, chunk_size=DEFAULT_CHUNK):
    """E F(xi^tau) against E F(xi) exp(tau int <k_dot, dB> - tau^2 |k|^2 / 2)."""
    if abs(tau) > 1.0:
        raise PreconditionError(f"|tau| must be at most 1, got {tau}")
    indices_t = _check_functional(functional, k, [x0])

    def kernel(indices):
        noise = sample_noise_batch(k.horizon, k.steps, seed, indices, system.noise_dim)
        base = simulate_points(system, x0, noise)
        shifted = simulate_points(system, x0, noise, noise.increments + tau * k.increments[None])
        lhs = functional(shifted[:, indices_t][:, :, None])
        rhs = functional(base[:, indices_t][:, :, None]) * girsanov_weight(noise, k, tau)
        return {"lhs": lhs, "rhs": rhs}

    samples = evaluate_samples(kernel, n, workers, chunk_size)
    return EstimatorResult.from_samples(samples["lhs"], samples["rhs"], tau=tau)


def tau_derivative_check(system, x0, functional, k, tau_step, n, seed, workers=1, chunk_size=DEFAULT_CHUNK):
    """Central difference of E F(xi^tau) at tau = 0 against the derivative-flow side of the eq4 identity.

    Also evaluates the difference at tau/2 and tau/4 on the same noise; the
    ratio of successive changes is the Richardson ratio (about 4 for a
    second-order difference) and gives an estimate of the O(tau^2) bias.
    """
    indices_t = _check_functional(functional, k, [x0])
    eq4_kernel = _multipoint_kernel(system, [np.asarray(x0, dtype=float)], functional, k, seed)

    def central(noise, step):
        sides = []
        for sign in (1.0, -1.0):
            points = simulate_points(system, x0, noise, noise.increments + sign * step * k.increments[None])
            sides.append(functional(points[:, indices_t][:, :, None]))
        return (sides[0] - sides[1]) / (2.0 * step)

    def kernel(indices):
        noise = sample_noise_batch(k.horizon, k.steps, seed, indices, system.noise_dim)
        return {
            "lhs": central(noise, tau_step),
            "rhs": eq4_kernel(indices)["lhs"],
            "half": central(noise, 0.5 * tau_step),
            "quarter": central(noise, 0.25 * tau_step),
        }

    samples = evaluate_samples(kernel, n, workers, chunk_size)
    first = math.fsum(samples["lhs"] - samples["half"]) / n
    second = math.fsum(samples["half"] - samples["quarter"]) / n
    ratio = first / second if second != 0.0 else math.nan
    extras = {"tau": tau_step, "bias_bound": abs(first) * 4.0 / 3.0, "richardson_ratio": ratio}
    return EstimatorResult.from_samples(samples["lhs"], samples["rhs"], **extras)


def conditional_flow_check(
    oracle,
    x0,
    v0,
    g,
    u,
    t,
    n,
    seed,
    variant="eq8",
    horizon=DEFAULT_HORIZON,
    steps=DEFAULT_STEPS,
    workers=1,
    chunk_size=DEFAULT_CHUNK,
):
    """E[g(x_t) <T xi_t v0, u(x_t)>] against E[g(x_t) <W_t v0, u(x_t)>].

    The noise is drawn on the full grid and the flow is run up to t only.
    """
    system = oracle.system
    manifold = system.manifold
    x0 = np.asarray(x0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    if np.linalg.norm(v0 - manifold.project(x0, v0)) > TOLERANCES.tangency * max(1.0, np.linalg.norm(v0)):
        raise DomainError("v0 is not tangent at x0")
    index = grid_indices([t], horizon, steps)[0]

    def kernel(indices):
        noise = sample_noise_batch(horizon, steps, seed, indices, system.noise_dim)
        path, _, flow = _filtered(oracle, system, x0, noise, variant, noise.increments[:, :index])
        xt = path.points[:, index]
        weight = g(xt)
        test = u(xt)
        full = np.einsum("bij,j->bi", path.derivative(index), v0)
        filtered = flow.apply(index, v0)
        return {
            "lhs": weight * np.einsum("bi,bi->b", full, test),
            "rhs": weight * np.einsum("bi,bi->b", filtered, test),
        }

    samples = evaluate_samples(kernel, n, workers, chunk_size)
    return EstimatorResult.from_samples(samples["lhs"], samples["rhs"], variant=variant, t=t)
