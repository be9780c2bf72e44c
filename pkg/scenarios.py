#
# scenarios.py
# Registry of the shipped scenarios, the cylindrical functionals they use and
# the Cameron-Martin path specs accepted on the command line.
#
# A scenario is validated once when it is first loaded: tangency of X,
# constant rank, and every registered closed form against the numerical
# backend.

import difflib
import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np

from config import FD_STEP, TOLERANCES
from errors import PreconditionError, ScenarioNotFoundError, UnsupportedScenarioError, UsageError
from flow_sim import drift_in_subbundle, linear_path, sine_path, zero_path
from geometry_core import (
    VectorField,
    constant_field,
    directional_derivative,
    flat_torus,
    projected_field,
    sample_points,
    sphere,
)
from ibp_harness import CylindricalFunctional
from ljw_connection import ConnectionOracle, DiffusionSystem, numerical_ricci_matrix, projection_e

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Scenario:
    id: str
    description: str
    system: DiffusionSystem
    x0: np.ndarray
    k_direction: tuple
    functional: str
    functionals: tuple
    pair_points: tuple
    pair_functional: str
    v0: np.ndarray
    test_vector: np.ndarray
    conditional_time: float = 1.0
    ricci_eigenvalue: float = 0.0
    ricci_tolerance: float = 1e-6
    references: dict = field(default_factory=dict)
    oracle: Optional[ConnectionOracle] = field(default=None, repr=False, compare=False)

    @property
    def manifold(self):
        return self.system.manifold

    @property
    def eq7_allowed(self):
        return drift_in_subbundle(self.oracle)

    def reference(self, check, horizon, tau):
        """Closed-form value of a check for the default functional and path, if any."""
        fn = self.references.get(check)
        return None if fn is None else float(fn(horizon, tau))

    def test_field(self):
        return projected_field(self.manifold, self.test_vector, name="P(x)a")


def _ones(shape):
    return np.ones(shape)


# Circle with full-rank noise: dx = dB on R / 2 pi Z
def _circle_full():
    manifold = flat_torus(1)
    system = DiffusionSystem(
        scenario_id="circle-full",
        manifold=manifold,
        noise_dim=1,
        coefficient=lambda x: _ones(x.shape[:-1] + (1, 1)),
        drift=constant_field([0.0], name="zero"),
        coefficient_derivative=lambda x, w: np.zeros(np.broadcast_shapes(x.shape, w.shape)[:-1] + (1, 1)),
        projection=lambda x: _ones(x.shape[:-1] + (1, 1)),
        ricci=lambda x: np.zeros(x.shape + (1,)),
    )
    return Scenario(
        id="circle-full",
        description="circle R/2piZ, X = d/dtheta, A = 0 (full rank, closed forms)",
        system=system,
        x0=np.array([0.0]),
        k_direction=(1.0,),
        functional="sin-coord:0",
        functionals=("sin-coord:0", "cos-sin:0", "constant:1"),
        pair_points=(np.array([0.0]), np.array([np.pi])),
        pair_functional="pair-sin-cos:0",
        v0=np.array([1.0]),
        test_vector=np.array([1.0]),
        references={
            "eq4": lambda T, tau: T * math.exp(-0.5 * T),
            "eq9": lambda T, tau: T * math.exp(-0.5 * T),
            "tau-derivative": lambda T, tau: T * math.exp(-0.5 * T),
            "girsanov": lambda T, tau: math.sin(tau * T) * math.exp(-0.5 * T),
            "conditional": lambda T, tau: 1.0,
        },
    )


def _torus_system(scenario_id, drift):
    manifold = flat_torus(2)
    column = np.array([[1.0], [0.0]])
    return DiffusionSystem(
        scenario_id=scenario_id,
        manifold=manifold,
        noise_dim=1,
        coefficient=lambda x: np.broadcast_to(column, x.shape[:-1] + (2, 1)).copy(),
        drift=drift,
        coefficient_derivative=lambda x, w: np.zeros(np.broadcast_shapes(x.shape, w.shape)[:-1] + (2, 1)),
        projection=lambda x: _ones(x.shape[:-1] + (1, 1)),
        ricci=lambda x: np.zeros(x.shape + (2,)),
    )


def _torus2_degenerate():
    return Scenario(
        id="torus2-degenerate",
        description="flat torus T^2, X = d/dx1 (rank 1), A = 0",
        system=_torus_system("torus2-degenerate", constant_field([0.0, 0.0], name="zero")),
        x0=np.array([0.5, 1.0]),
        k_direction=(1.0,),
        functional="sin-coord:0",
        functionals=("sin-coord:0", "sin-coord:1", "cos-sin:0", "sin-sum"),
        pair_points=(np.array([0.5, 1.0]), np.array([0.5 + np.pi, 1.0 + np.pi])),
        pair_functional="pair-sin-cos:0",
        v0=np.array([1.0, 0.0]),
        test_vector=np.array([1.0, 0.5]),
    )


def _torus2_transverse_drift():
    return Scenario(
        id="torus2-transverse-drift",
        description="flat torus T^2, X = d/dx1, A = d/dx2 (A outside I(X), eq8 only)",
        system=_torus_system("torus2-transverse-drift", constant_field([0.0, 1.0], name="d/dx2")),
        x0=np.array([0.5, 1.0]),
        k_direction=(1.0,),
        functional="sin-sum",
        functionals=("sin-coord:0", "sin-coord:1", "sin-sum"),
        pair_points=(np.array([0.5, 1.0]), np.array([0.5 + np.pi, 1.0])),
        pair_functional="pair-sin-cos:0",
        v0=np.array([1.0, 0.0]),
        test_vector=np.array([1.0, 1.0]),
    )


def _sphere_coefficient(x):
    return np.eye(3) - x[..., :, None] * x[..., None, :]


def _sphere_coefficient_derivative(x, w):
    x, w = np.broadcast_arrays(x, w)
    return -(w[..., :, None] * x[..., None, :] + x[..., :, None] * w[..., None, :])


def _sphere_system(scenario_id, drift):
    return DiffusionSystem(
        scenario_id=scenario_id,
        manifold=sphere(2),
        noise_dim=3,
        coefficient=_sphere_coefficient,
        drift=drift,
        coefficient_derivative=_sphere_coefficient_derivative,
        projection=_sphere_coefficient,
        ricci=_sphere_coefficient,
    )


def _sphere_scenario(scenario_id, description, drift):
    north = np.array([0.0, 0.0, 1.0])
    return Scenario(
        id=scenario_id,
        description=description,
        system=_sphere_system(scenario_id, drift),
        x0=north,
        k_direction=(1.0, 0.0, 0.0),
        functional="linear:1,0,0",
        functionals=("linear:1,0,0", "height-exp", "quadratic:1,0,0;0,1,0", "linear:0.3,-0.5,0.8"),
        pair_points=(north, -north),
        pair_functional="pair-inner",
        v0=np.array([1.0, 0.0, 0.0]),
        test_vector=np.array([1.0, 0.0, 0.0]),
        ricci_eigenvalue=1.0,
        ricci_tolerance=TOLERANCES.ricci,
    )


def gradient_drift(c, a):
    """A(x) = c P(x) a with its closed-form derivative."""
    a = np.asarray(a, dtype=float)

    def evaluate(x):
        return c * (a - x * (x @ a)[..., None])

    def derivative(x, w):
        x, w = np.broadcast_arrays(x, w)
        return -c * (w * (x @ a)[..., None] + x * (w @ a)[..., None])

    return VectorField(evaluate=evaluate, derivative=derivative, name=f"{c}*P(x){a.tolist()}")


def _sphere2_gradient():
    return _sphere_scenario(
        "sphere2-gradient",
        "unit sphere S^2, X(x) = I - x x^T (gradient Brownian motion), A = 0",
        constant_field([0.0, 0.0, 0.0], name="zero"),
    )


def _sphere2_drift():
    return _sphere_scenario(
        "sphere2-drift",
        "unit sphere S^2, X(x) = I - x x^T, A(x) = 0.5 P(x)(0,0,1) inside I(X)",
        gradient_drift(0.5, [0.0, 0.0, 1.0]),
    )


_BUILDERS = {
    "circle-full": _circle_full,
    "torus2-degenerate": _torus2_degenerate,
    "sphere2-gradient": _sphere2_gradient,
    "sphere2-drift": _sphere2_drift,
    "torus2-transverse-drift": _torus2_transverse_drift,
}


def scenario_ids():
    return list(_BUILDERS)


def list_scenarios():
    """(id, description) pairs in registry order."""
    return [(scenario_id, builder().description) for scenario_id, builder in _BUILDERS.items()]


def get_scenario(scenario_id):
    if scenario_id not in _BUILDERS:
        raise ScenarioNotFoundError(scenario_id, difflib.get_close_matches(scenario_id, scenario_ids(), n=3, cutoff=0.4))
    return _load(scenario_id)


@lru_cache(maxsize=None)
def _load(scenario_id):
    scenario = _BUILDERS[scenario_id]()
    oracle = ConnectionOracle.build(scenario.system)
    validate_scenario(scenario.system, oracle)
    logger.info("loaded scenario %s (rank %d)", scenario_id, oracle.rank)
    return replace(scenario, oracle=oracle)


def _relative_gap(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric)) / max(1.0, float(np.max(np.abs(numeric)))))


def validate_scenario(system, oracle, count=8, seed=11):
    """Check tangency and every registered closed form against the numerical backend."""
    manifold = system.manifold
    points = sample_points(manifold, count, seed=seed)
    rng = np.random.default_rng(seed)
    directions = manifold.project(points, rng.standard_normal(points.shape))

    if system.tangency_residual(points) > TOLERANCES.tangency:
        raise UnsupportedScenarioError(f"{system.scenario_id}: columns of X are not tangent")

    checks = []
    if system.coefficient_derivative is not None:
        checks.append(("DX", system.dX(points, directions), directional_derivative(system.coefficient, points, directions), TOLERANCES.analytic_override))
    if system.drift.derivative is not None:
        checks.append(("DA", system.dA(points, directions), directional_derivative(system.drift.evaluate, points, directions), TOLERANCES.analytic_override))
    if system.projection is not None:
        checks.append(("e", system.projection(points), projection_e(system, points, rank=oracle.rank, analytic=False), TOLERANCES.analytic_override))
    if system.ricci is not None:
        numeric = np.stack([numerical_ricci_matrix(oracle, p) for p in points[:2]])
        checks.append(("Ric", system.ricci(points[:2]), numeric, TOLERANCES.ricci))

    for name, analytic, numeric, tol in checks:
        gap = _relative_gap(analytic, numeric)
        if gap > tol:
            raise UnsupportedScenarioError(f"{system.scenario_id}: closed form {name} is off by {gap:.3g}")
        logger.debug("%s: closed form %s within %.3g", system.scenario_id, name, gap)


# Cylindrical functionals

def _parse_vector(text, dim):
    try:
        vector = np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise UsageError(f"invalid vector '{text}'")
    if vector.shape != (dim,):
        raise UsageError(f"vector '{text}' must have {dim} components")
    return vector


def _parse_index(text, dim):
    try:
        index = int(text)
    except ValueError:
        raise UsageError(f"invalid coordinate index '{text}'")
    if not 0 <= index < dim:
        raise UsageError(f"coordinate index {index} out of range for dimension {dim}")
    return index


def _unit(dim, index):
    out = np.zeros(dim)
    out[index] = 1.0
    return out


def make_functional(spec, horizon, manifold):
    """Build a registered functional from 'name[:args]'."""
    name, _, args = spec.partition(":")
    dim = manifold.ambient_dim
    end = (horizon,)
    both = (0.5 * horizon, horizon)

    if name == "sin-coord":
        i = _parse_index(args, dim)
        e = _unit(dim, i)
        value = lambda v: np.sin(v[:, 0, 0, i])
        gradient = lambda v: (np.cos(v[:, 0, 0, i])[:, None] * e)[:, None, None]
        return CylindricalFunctional(spec, end, 1, value, gradient)

    if name == "cos-sin":
        i = _parse_index(args, dim)
        e = _unit(dim, i)

        def value(v):
            return np.cos(v[:, 0, 0, i]) * np.sin(v[:, 1, 0, i])

        def gradient(v):
            out = np.zeros_like(v)
            out[:, 0, 0] = (-np.sin(v[:, 0, 0, i]) * np.sin(v[:, 1, 0, i]))[:, None] * e
            out[:, 1, 0] = (np.cos(v[:, 0, 0, i]) * np.cos(v[:, 1, 0, i]))[:, None] * e
            return out

        return CylindricalFunctional(spec, both, 1, value, gradient)

    if name == "sin-sum":
        def value(v):
            return np.sin(v[:, 0, 0].sum(axis=-1))

        def gradient(v):
            return np.cos(v[:, 0, 0].sum(axis=-1))[:, None, None, None] * np.ones_like(v)

        return CylindricalFunctional(spec, end, 1, value, gradient)

    if name == "linear":
        a = _parse_vector(args, dim)
        value = lambda v: v[:, 0, 0] @ a
        gradient = lambda v: np.broadcast_to(a, v.shape).copy()
        return CylindricalFunctional(spec, end, 1, value, gradient)

    if name == "quadratic":
        first, _, second = args.partition(";")
        a = _parse_vector(first, dim)
        b = _parse_vector(second, dim)

        def value(v):
            return (v[:, 0, 0] @ a) * (v[:, 1, 0] @ b)

        def gradient(v):
            out = np.zeros_like(v)
            out[:, 0, 0] = (v[:, 1, 0] @ b)[:, None] * a
            out[:, 1, 0] = (v[:, 0, 0] @ a)[:, None] * b
            return out

        return CylindricalFunctional(spec, both, 1, value, gradient)

    if name == "height-exp":
        e = _unit(dim, dim - 1)
        value = lambda v: np.exp(v[:, 0, 0, -1])
        gradient = lambda v: (np.exp(v[:, 0, 0, -1])[:, None] * e)[:, None, None]
        return CylindricalFunctional(spec, end, 1, value, gradient)

    if name == "pair-inner":
        def value(v):
            return np.einsum("bn,bn->b", v[:, 0, 0], v[:, 0, 1])

        def gradient(v):
            return v[:, :, ::-1].copy()

        return CylindricalFunctional(spec, end, 2, value, gradient)

    if name == "pair-sin-cos":
        i = _parse_index(args, dim)
        e = _unit(dim, i)

        def value(v):
            return np.sin(v[:, 0, 0, i]) * np.cos(v[:, 0, 1, i])

        def gradient(v):
            out = np.zeros_like(v)
            out[:, 0, 0] = (np.cos(v[:, 0, 0, i]) * np.cos(v[:, 0, 1, i]))[:, None] * e
            out[:, 0, 1] = (-np.sin(v[:, 0, 0, i]) * np.sin(v[:, 0, 1, i]))[:, None] * e
            return out

        return CylindricalFunctional(spec, end, 2, value, gradient)

    if name == "constant":
        c = float(args or 1.0)
        value = lambda v: np.full(v.shape[0], c)
        gradient = lambda v: np.zeros_like(v)
        return CylindricalFunctional(spec, end, 1, value, gradient)

    raise UsageError(f"unknown functional '{spec}'")


def validate_functional(functional, manifold, count=4, seed=5):
    """Gradient oracle against central differences along the manifold."""
    p, q = len(functional.times), functional.point_count
    points = sample_points(manifold, count * p * q, seed=seed)
    values = points.reshape(count, p, q, manifold.ambient_dim)
    rng = np.random.default_rng(seed)
    directions = manifold.project(values, rng.standard_normal(values.shape))

    def along(step):
        return functional(manifold.retract(values, step * directions))

    numeric = (along(FD_STEP) - along(-FD_STEP)) / (2.0 * FD_STEP)
    analytic = functional.derivative(values, directions)
    gap = float(np.max(np.abs(numeric - analytic)))
    if gap > TOLERANCES.gradient_oracle * max(1.0, float(np.max(np.abs(analytic)))):
        raise PreconditionError(f"gradient oracle of {functional.name} is off by {gap:.3g}")
    return functional


# Cameron-Martin path specs

def make_path(spec, horizon, steps, default_direction):
    """'linear[:u]', 'zero' or 'sine[:u]' on the simulation grid."""
    name, _, args = spec.partition(":")
    dim = len(default_direction)
    direction = _parse_vector(args, dim) if args else np.asarray(default_direction, dtype=float)
    if name == "linear":
        path = linear_path(direction, horizon, steps)
    elif name == "sine":
        path = sine_path(direction, horizon, steps)
    elif name == "zero":
        path = zero_path(dim, horizon, steps)
    else:
        raise UsageError(f"unknown Cameron-Martin path '{spec}'")
    return replace(path, spec=spec)
