#
# geometry_core.py
# Compact manifolds given by an ambient embedding, and the Riemannian tools
# induced by the ambient metric: tangent projection, retraction, Levi-Civita
# derivative, discrete parallel transport and Lie brackets.
#
# Every function accepts a single point of shape (N,) or a batch (..., N).

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.stats import norm, qmc

from config import FD_STEP, TOLERANCES
from errors import DomainError, StepSizeError, UnsupportedOperationError

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class EmbeddedManifold:
    name: str
    ambient_dim: int
    intrinsic_dim: int
    projector: Callable
    retraction: Callable
    membership: Callable
    displacement: Callable
    retraction_jacobian: Callable
    sampler: Callable
    sample_dim: int
    frame: Optional[Callable] = None
    max_step: float = 1.0
    flat: bool = False

    def project(self, x, v):
        return np.einsum("...ij,...j->...i", self.projector(x), v)

    def retract(self, x, v):
        return self.retraction(np.asarray(x, dtype=float), np.asarray(v, dtype=float))

    def contains(self, x, tol=None):
        tol = TOLERANCES.membership if tol is None else tol
        return self.membership(np.asarray(x, dtype=float), tol)

    def distance(self, x, y):
        return np.linalg.norm(self.displacement(x, y), axis=-1)

    def tangent_frame(self, x):
        """Orthonormal basis of T_xM as an (..., N, n) array."""
        x = np.asarray(x, dtype=float)
        if self.frame is not None:
            return self.frame(x)
        _, vectors = np.linalg.eigh(self.projector(x))
        return vectors[..., :, -self.intrinsic_dim:]


# Sphere S^n in R^(n+1), closest-point retraction
def sphere(dim=2):
    ambient = dim + 1
    eye = np.eye(ambient)

    def projector(x):
        return eye - x[..., :, None] * x[..., None, :]

    def retraction(x, v):
        z = x + v
        z = z / np.linalg.norm(z, axis=-1, keepdims=True)
        unchanged = np.all(v == 0.0, axis=-1, keepdims=True)
        return np.where(unchanged, x, z)

    def membership(x, tol):
        return np.abs(np.linalg.norm(x, axis=-1) - 1.0) <= tol

    def displacement(x, y):
        return y - x

    def retraction_jacobian(x, v):
        z = x + v
        r = np.linalg.norm(z, axis=-1, keepdims=True)
        zh = z / r
        return (eye - zh[..., :, None] * zh[..., None, :]) / r[..., None]

    def sampler(u):
        g = norm.ppf(np.clip(u, 1e-12, 1.0 - 1e-12))
        return g / np.linalg.norm(g, axis=-1, keepdims=True)

    return EmbeddedManifold(
        name=f"sphere{dim}",
        ambient_dim=ambient,
        intrinsic_dim=dim,
        projector=projector,
        retraction=retraction,
        membership=membership,
        displacement=displacement,
        retraction_jacobian=retraction_jacobian,
        sampler=sampler,
        sample_dim=ambient,
        max_step=2.0,
    )


# Flat torus T^d in periodic coordinates, mod-2pi retraction
def flat_torus(dim=2):
    eye = np.eye(dim)

    def projector(x):
        return np.broadcast_to(eye, x.shape[:-1] + (dim, dim))

    def retraction(x, v):
        return np.mod(x + v, TWO_PI)

    def membership(x, tol):
        return np.all(np.isfinite(x), axis=-1)

    def displacement(x, y):
        return np.mod(y - x + np.pi, TWO_PI) - np.pi

    def retraction_jacobian(x, v):
        return np.broadcast_to(eye, x.shape[:-1] + (dim, dim))

    def frame(x):
        return np.broadcast_to(eye, x.shape[:-1] + (dim, dim)).copy()

    return EmbeddedManifold(
        name="circle" if dim == 1 else f"torus{dim}",
        ambient_dim=dim,
        intrinsic_dim=dim,
        projector=projector,
        retraction=retraction,
        membership=membership,
        displacement=displacement,
        retraction_jacobian=retraction_jacobian,
        sampler=lambda u: TWO_PI * u,
        sample_dim=dim,
        frame=frame,
        max_step=np.pi,
        flat=True,
    )


@dataclass(frozen=True)
class VectorField:
    evaluate: Callable
    derivative: Optional[Callable] = None
    differentiable: bool = True
    name: str = ""

    def __call__(self, x):
        return self.evaluate(np.asarray(x, dtype=float))


def constant_field(vector, name="constant"):
    vector = np.asarray(vector, dtype=float)
    return VectorField(
        evaluate=lambda x: np.broadcast_to(vector, x.shape[:-1] + vector.shape).copy(),
        derivative=lambda x, v: np.zeros(np.broadcast_shapes(x.shape, v.shape)[:-1] + vector.shape),
        name=name,
    )


def projected_field(manifold, a, name=None):
    """Z(x) = P(x)a, using the ambient extension of the projector."""
    a = np.asarray(a, dtype=float)
    return VectorField(
        evaluate=lambda x: np.einsum("...ij,j->...i", manifold.projector(x), a),
        name=name or f"P(x){a.tolist()}",
    )


def sample_points(manifold, count, seed=0, quasi=False):
    if quasi:
        u = qmc.Sobol(d=manifold.sample_dim, scramble=True, seed=seed).random(count)
    else:
        u = np.random.default_rng(seed).random((count, manifold.sample_dim))
    return manifold.sampler(u)


def _weight_for(weight, out):
    batch = weight.shape[:-1]
    return weight.reshape(batch + (1,) * (out.ndim - len(batch)))


def _unit_direction(x, v, step):
    v_norm = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(v_norm > 0.0, v_norm, 1.0)
    u = np.where(v_norm > 0.0, v / safe, 0.0)
    if step is None:
        step = FD_STEP * np.maximum(1.0, np.linalg.norm(x, axis=-1, keepdims=True))
    else:
        step = np.full_like(v_norm, float(step))
    return u, v_norm, step


def directional_derivative(fn, x, v, step=None):
    """Central difference of fn at x in the ambient direction v."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    x, v = np.broadcast_arrays(x, v)
    u, v_norm, h = _unit_direction(x, v, step)
    with np.errstate(invalid="ignore", over="ignore"):
        diff = np.asarray(fn(x + h * u)) - np.asarray(fn(x - h * u))
    return diff * _weight_for(v_norm / (2.0 * h), diff)


def curve_derivative(fn, manifold, x, v, step=None):
    """Central difference of fn along the retraction curve s -> R(x, s v)."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    x, v = np.broadcast_arrays(x, v)
    u, v_norm, h = _unit_direction(x, v, step)
    with np.errstate(invalid="ignore", over="ignore"):
        diff = np.asarray(fn(manifold.retract(x, h * u))) - np.asarray(fn(manifold.retract(x, -h * u)))
    return diff * _weight_for(v_norm / (2.0 * h), diff)


def field_derivative(field, x, v):
    """DZ(x)v, analytic when the field registers one."""
    if not field.differentiable:
        raise UnsupportedOperationError(f"field '{field.name}' is not differentiable")
    if field.derivative is not None:
        return field.derivative(np.asarray(x, dtype=float), np.asarray(v, dtype=float))
    return directional_derivative(field.evaluate, x, v)


def _require_on_manifold(manifold, x):
    if not np.all(manifold.contains(x)):
        raise DomainError(f"point off {manifold.name}: {np.asarray(x).tolist()}")


def tangent_project(manifold, x, v):
    _require_on_manifold(manifold, x)
    return manifold.project(np.asarray(x, dtype=float), np.asarray(v, dtype=float))


def levi_civita_derivative(manifold, field, x, v):
    """Induced Levi-Civita derivative P(x) DZ(x) v."""
    return manifold.project(x, field_derivative(field, x, v))


def lie_bracket(manifold, field1, field2, x):
    """[Z1, Z2](x) = DZ2(x) Z1(x) - DZ1(x) Z2(x)."""
    x = np.asarray(x, dtype=float)
    return field_derivative(field2, x, field1(x)) - field_derivative(field1, x, field2(x))


def levi_civita_transport(manifold, path, v0):
    """Project-then-renormalise transport of v0 along a discrete path."""
    path = np.asarray(path, dtype=float)
    v = np.asarray(v0, dtype=float)
    normal = v - manifold.project(path[0], v)
    if np.linalg.norm(normal) > TOLERANCES.tangency * max(1.0, np.linalg.norm(v)):
        raise DomainError("initial vector is not tangent at the path start")

    out = np.empty_like(path)
    out[0] = v
    length = np.linalg.norm(v)
    for k in range(len(path) - 1):
        step = np.linalg.norm(manifold.displacement(path[k], path[k + 1]))
        if step > manifold.max_step:
            raise StepSizeError(f"path step {k} has length {step:.3g} > {manifold.max_step}")
        w = manifold.project(path[k + 1], out[k])
        w_norm = np.linalg.norm(w)
        out[k + 1] = w * (length / w_norm) if w_norm > 0.0 else w
    return out


def inverse_sqrt_spd(s):
    """S^(-1/2) for stacked symmetric positive definite matrices."""
    n = s.shape[-1]
    if n == 1:
        return 1.0 / np.sqrt(s)
    if n == 2:
        det = s[..., 0, 0] * s[..., 1, 1] - s[..., 0, 1] * s[..., 1, 0]
        root = np.sqrt(det)
        t = np.sqrt(s[..., 0, 0] + s[..., 1, 1] + 2.0 * root)
        shifted = s + root[..., None, None] * np.eye(2)
        adj = np.empty_like(shifted)
        adj[..., 0, 0] = shifted[..., 1, 1]
        adj[..., 1, 1] = shifted[..., 0, 0]
        adj[..., 0, 1] = -shifted[..., 0, 1]
        adj[..., 1, 0] = -shifted[..., 1, 0]
        return adj / (root * t)[..., None, None]
    w, vecs = np.linalg.eigh(s)
    return np.einsum("...ij,...j,...kj->...ik", vecs, 1.0 / np.sqrt(w), vecs)


def transport_frame(manifold, x_next, frame):
    """Linear transport of an orthonormal frame to T_{x_next}M.

    Projects the frame and re-orthonormalises it symmetrically, which is the
    closest isometry to the projection; for a single vector this is the
    project-then-renormalise rule of levi_civita_transport.
    """
    q = np.einsum("...ij,...jk->...ik", manifold.projector(x_next), frame)
    if manifold.flat:
        return q
    gram = np.einsum("...ji,...jk->...ik", q, q)
    return np.einsum("...ij,...jk->...ik", q, inverse_sqrt_spd(gram))


def projector_residuals(manifold, points):
    """Max idempotency, symmetry and rank defects of P over sample points."""
    p = manifold.projector(np.asarray(points, dtype=float))
    idempotent = np.max(np.abs(np.einsum("...ij,...jk->...ik", p, p) - p))
    symmetric = np.max(np.abs(p - np.swapaxes(p, -1, -2)))
    ranks = np.linalg.matrix_rank(p)
    return {
        "idempotent": float(idempotent),
        "symmetric": float(symmetric),
        "rank_ok": bool(np.all(ranks == manifold.intrinsic_dim)),
    }
