#
# ljw_connection.py
# Geometry induced by a constant-rank diffusion coefficient X: the image
# subbundle I(X) with its induced metric, the adjoint Y, the LeJan-Watanabe
# connection, its adjoint semi-connection, curvature and Ricci contraction.

import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from config import FD_OUTER_STEP, FD_STEP, TOLERANCES
from errors import DomainError, RankDegeneracyError
from geometry_core import (
    VectorField,
    curve_derivative,
    directional_derivative,
    field_derivative,
    lie_bracket,
    sample_points,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiffusionSystem:
    """The pair (X, A) of dx = X(x) o dB + A(x) dt on an embedded manifold.

    coefficient maps points (..., N) to (..., N, m) arrays whose columns are
    tangent. The optional callables are closed forms registered by a
    scenario; they are checked against finite differences when it loads.
    """

    scenario_id: str
    manifold: object
    noise_dim: int
    coefficient: Callable
    drift: VectorField
    coefficient_derivative: Optional[Callable] = None
    projection: Optional[Callable] = None
    ricci: Optional[Callable] = None

    def X(self, x):
        return self.coefficient(np.asarray(x, dtype=float))

    def dX(self, x, w):
        """Directional derivative DX(x)[w] as an (..., N, m) array."""
        if self.coefficient_derivative is not None:
            return self.coefficient_derivative(np.asarray(x, dtype=float), np.asarray(w, dtype=float))
        return directional_derivative(self.coefficient, x, w)

    def dA(self, x, w):
        return field_derivative(self.drift, x, w)

    def tangency_residual(self, x):
        x = np.asarray(x, dtype=float)
        coeff = self.X(x)
        normal = coeff - np.einsum("...ij,...jk->...ik", self.manifold.projector(x), coeff)
        return float(np.max(np.abs(normal)))


@dataclass(frozen=True)
class SubbundlePoint:
    point: np.ndarray
    rank: int
    basis: np.ndarray  # (N, r), orthonormal for the induced metric
    metric: np.ndarray  # (N, N) Gram matrix Y^T Y of the induced metric
    singular_values: np.ndarray


def _svd(system, x):
    coeff = system.X(x)
    u, s, vt = np.linalg.svd(coeff, full_matrices=False)
    return coeff, u, s, vt


def _numerical_rank(s, tol=TOLERANCES):
    s_max = np.max(s, axis=-1, keepdims=True)
    if np.any(s_max <= 0.0):
        raise RankDegeneracyError("X(x) vanishes at a sampled point")
    rel = s / s_max
    ambiguous = (rel > tol.rank_threshold) & (rel <= tol.rank_gap)
    if np.any(ambiguous):
        raise RankDegeneracyError(f"singular-value gap below threshold: {np.sort(rel[ambiguous])[:3].tolist()}")
    ranks = np.sum(rel > tol.rank_threshold, axis=-1)
    if np.any(ranks != np.ravel(ranks)[0]):
        raise RankDegeneracyError(f"rank of X varies: {sorted(set(np.ravel(ranks).tolist()))}")
    return int(np.ravel(ranks)[0])


def image_subbundle(system, x):
    """Rank and induced-metric orthonormal basis of I(X)_x."""
    x = np.asarray(x, dtype=float)
    _, u, s, vt = _svd(system, x)
    r = _numerical_rank(s)
    basis = u[..., :r] * s[..., None, :r]
    y = _pseudo_inverse(u, s, vt, r)
    metric = np.einsum("...ki,...kj->...ij", y, y)
    return SubbundlePoint(point=x, rank=r, basis=basis, metric=metric, singular_values=s)


def _pseudo_inverse(u, s, vt, r):
    vt_r = vt[..., :r, :]
    return np.einsum("...ki,...k,...jk->...ij", vt_r, 1.0 / s[..., :r], u[..., :, :r])


def adjoint_Y(system, x, rank=None):
    """Metric adjoint Y(x): I(X)_x -> R^m, as an (..., m, N) array."""
    _, u, s, vt = _svd(system, x)
    r = _numerical_rank(s) if rank is None else rank
    return _pseudo_inverse(u, s, vt, r)


def projection_e(system, x, rank=None, analytic=True):
    """e(x) = Y(x)X(x), the orthogonal projection of R^m onto (ker X(x))^perp."""
    if analytic and system.projection is not None:
        return system.projection(np.asarray(x, dtype=float))
    _, u, s, vt = _svd(system, x)
    r = _numerical_rank(s) if rank is None else rank
    vt_r = vt[..., :r, :]
    return np.einsum("...ki,...kj->...ij", vt_r, vt_r)


def induced_inner(system, x, u, w):
    y = adjoint_Y(system, x)
    return np.einsum("...i,...i->...", np.einsum("...ij,...j->...i", y, u), np.einsum("...ij,...j->...i", y, w))


def check_constant_rank(system, count=1000, seed=0):
    """Rank of X over quasi-random points; raises if it is not constant."""
    points = sample_points(system.manifold, count, seed=seed, quasi=True)
    _, _, s, _ = _svd(system, points)
    r = _numerical_rank(s)
    logger.info("%s: constant rank %d over %d points", system.scenario_id, r, count)
    return r


@dataclass(frozen=True)
class ConnectionOracle:
    system: DiffusionSystem
    rank: int
    curvature_method: str = "christoffel"
    use_analytic: bool = True
    cache_size: int = 4096
    _cache: OrderedDict = field(default_factory=OrderedDict, repr=False, compare=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @classmethod
    def build(cls, system, curvature_method="christoffel", use_analytic=True, rank_points=1000):
        if curvature_method not in ("christoffel", "projection"):
            raise ValueError(f"unknown curvature method '{curvature_method}'")
        rank = check_constant_rank(system, count=rank_points)
        return cls(system=system, rank=rank, curvature_method=curvature_method, use_analytic=use_analytic)

    @property
    def manifold(self):
        return self.system.manifold

    def Y(self, x):
        return adjoint_Y(self.system, x, rank=self.rank)

    def e(self, x):
        return projection_e(self.system, x, rank=self.rank, analytic=self.use_analytic)

    def subbundle(self, x):
        x = np.asarray(x, dtype=float)
        key = (x.shape, x.tobytes())
        with self._lock:
            cached = self._cache.get(key)
            if cached is not None:
                self._cache.move_to_end(key)
        if cached is None:
            cached = image_subbundle(self.system, x)
            with self._lock:
                self._cache[key] = cached
                while len(self._cache) > self.cache_size:
                    self._cache.popitem(last=False)
        return cached


def _apply(matrix, vector):
    return np.einsum("...ij,...j->...i", matrix, vector)


def _require_section(oracle, field_, x):
    z = field_(x)
    residual = z - _apply(oracle.system.X(x), _apply(oracle.Y(x), z))
    scale = np.maximum(1.0, np.linalg.norm(z, axis=-1))
    if np.any(np.linalg.norm(residual, axis=-1) > TOLERANCES.section_residual * scale):
        raise DomainError(f"field '{field_.name}' is not a section of I(X)")


def ljw_derivative(oracle, field_, x, v):
    """LeJan-Watanabe derivative X(x) d(Y Z)(v) of a section Z of I(X)."""
    x = np.asarray(x, dtype=float)
    _require_section(oracle, field_, x)

    def y_z(y):
        return _apply(oracle.Y(y), field_(y))

    return _apply(oracle.system.X(x), curve_derivative(y_z, oracle.manifold, x, v))


def adjoint_semi_derivative(oracle, field1, field2, x):
    """Adjoint semi-connection: derivative of Z1 along the section Z2."""
    x = np.asarray(x, dtype=float)
    return ljw_derivative(oracle, field2, x, field1(x)) - lie_bracket(oracle.manifold, field1, field2, x)


def _frozen_vector(v):
    v = np.asarray(v, dtype=float)
    return VectorField(
        evaluate=lambda y: np.broadcast_to(v, np.broadcast_shapes(y.shape, v.shape)).copy(),
        derivative=lambda y, w: np.zeros(np.broadcast_shapes(y.shape, v.shape)),
        name="frozen",
    )


def connection_shift(oracle, section, x, v):
    """(adjoint semi-connection - Levi-Civita) along a section, acting on v.

    Equals the tangent part of the adjoint semi-derivative of the frozen
    vector v along the section, i.e. the LeJan-Watanabe minus Levi-Civita
    derivative of the section in direction v.
    """
    x = np.asarray(x, dtype=float)
    return oracle.manifold.project(x, adjoint_semi_derivative(oracle, _frozen_vector(v), section, x))


def nabla_coefficient(system, x, v, a):
    """Levi-Civita derivative of the field X(.)a in direction v."""
    return system.manifold.project(x, _apply(system.dX(x, v), a))


# Curvature

def _chart(oracle, x):
    manifold = oracle.manifold
    sub = oracle.subbundle(x)
    chart_basis = manifold.tangent_frame(x)
    coeffs = _apply_matrix(oracle.Y(x), sub.basis)
    return sub, chart_basis, coeffs


def _apply_matrix(a, b):
    return np.einsum("...ij,...jk->...ik", a, b)


def _christoffel_tensor(oracle, x):
    sub, chart_basis, coeffs = _chart(oracle, x)
    manifold = oracle.manifold
    n = chart_basis.shape[-1]
    r = sub.rank

    def point(s):
        return manifold.retract(x, chart_basis @ s)

    def frame_rep(s):
        return projection_e(oracle.system, point(s), rank=oracle.rank, analytic=False) @ coeffs

    def gamma(s, i):
        h = FD_STEP
        step = np.zeros(n)
        step[i] = h
        d_frame = (frame_rep(s + step) - frame_rep(s - step)) / (2.0 * h)
        e_here = projection_e(oracle.system, point(s), rank=oracle.rank, analytic=False)
        return np.linalg.pinv(frame_rep(s)) @ (e_here @ d_frame)

    origin = np.zeros(n)
    gamma0 = [gamma(origin, i) for i in range(n)]
    tensor = np.zeros((n, n, r, r))
    h = FD_OUTER_STEP
    for i in range(n):
        for j in range(i + 1, n):
            ei = np.zeros(n)
            ei[i] = h
            ej = np.zeros(n)
            ej[j] = h
            d_i_gamma_j = (gamma(ei, j) - gamma(-ei, j)) / (2.0 * h)
            d_j_gamma_i = (gamma(ej, i) - gamma(-ej, i)) / (2.0 * h)
            value = d_i_gamma_j - d_j_gamma_i + gamma0[i] @ gamma0[j] - gamma0[j] @ gamma0[i]
            tensor[i, j] = value
            tensor[j, i] = -value
    return sub, chart_basis, tensor


def _projection_tensor(oracle, x):
    sub, chart_basis, _ = _chart(oracle, x)
    system = oracle.system
    manifold = oracle.manifold
    n = chart_basis.shape[-1]
    r = sub.rank
    e0 = projection_e(system, x, rank=oracle.rank, analytic=False)
    coeff = system.X(x)
    y = oracle.Y(x)

    def e_of(p):
        return projection_e(system, p, rank=oracle.rank, analytic=False)

    d_e = [curve_derivative(e_of, manifold, x, chart_basis[:, i]) for i in range(n)]
    to_coords = sub.basis.T @ sub.metric
    tensor = np.zeros((n, n, r, r))
    for i in range(n):
        for j in range(i + 1, n):
            in_rm = e0 @ (d_e[i] @ d_e[j] - d_e[j] @ d_e[i]) @ e0
            value = to_coords @ coeff @ in_rm @ y @ sub.basis
            tensor[i, j] = value
            tensor[j, i] = -value
    return sub, chart_basis, tensor


def curvature_tensor(oracle, x):
    """Curvature in chart directions: (n, n, r, r), frame = subbundle basis."""
    x = np.asarray(x, dtype=float)
    if oracle.curvature_method == "projection":
        return _projection_tensor(oracle, x)
    return _christoffel_tensor(oracle, x)


def curvature(oracle, x, u1, u2):
    """Curvature R(u1, u2) as an (N, N) ambient matrix acting on I(X)_x."""
    sub, chart_basis, tensor = curvature_tensor(oracle, x)
    s1 = chart_basis.T @ np.asarray(u1, dtype=float)
    s2 = chart_basis.T @ np.asarray(u2, dtype=float)
    in_frame = np.einsum("i,j,ijab->ab", s1, s2, tensor)
    return sub.basis @ in_frame @ sub.basis.T @ sub.metric


def _ricci_coords(sub, chart_basis, tensor, u):
    # <Ric(u), f_b> = sum_i <R(f_i, u) f_b, f_i>
    frame_dirs = chart_basis.T @ sub.basis
    s_u = chart_basis.T @ np.asarray(u, dtype=float)
    blocks = np.einsum("ki,j,kjab->iab", frame_dirs, s_u, tensor)
    return np.einsum("iib->b", blocks)


def ricci_sharp(oracle, x, u):
    sub, chart_basis, tensor = curvature_tensor(oracle, x)
    return sub.basis @ _ricci_coords(sub, chart_basis, tensor, u)


def numerical_ricci_matrix(oracle, x):
    """Ric# as an (N, N) ambient matrix at a single point."""
    sub, chart_basis, tensor = curvature_tensor(oracle, x)
    columns = [sub.basis @ _ricci_coords(sub, chart_basis, tensor, chart_basis[:, j]) for j in range(chart_basis.shape[1])]
    return np.stack(columns, axis=-1) @ chart_basis.T


def ricci_matrix(oracle, x):
    """Ric# at one point or a batch, closed form when registered."""
    x = np.asarray(x, dtype=float)
    if oracle.use_analytic and oracle.system.ricci is not None:
        return oracle.system.ricci(x)
    if x.ndim == 1:
        return numerical_ricci_matrix(oracle, x)
    flat = x.reshape(-1, x.shape[-1])
    out = np.stack([numerical_ricci_matrix(oracle, p) for p in flat])
    return out.reshape(x.shape + (x.shape[-1],))


def ricci_eigenvalues(oracle, x):
    """Eigenvalues of Ric# restricted to T_xM (chart basis), ascending."""
    chart_basis = oracle.manifold.tangent_frame(x)
    ric = numerical_ricci_matrix(oracle, x)
    restricted = chart_basis.T @ ric @ chart_basis
    return np.sort(np.linalg.eigvals(restricted).real)
