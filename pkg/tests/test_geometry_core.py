import numpy as np
import pytest

from errors import DomainError, UnsupportedOperationError
from geometry_core import (
    VectorField,
    constant_field,
    curve_derivative,
    directional_derivative,
    field_derivative,
    flat_torus,
    inverse_sqrt_spd,
    levi_civita_derivative,
    levi_civita_transport,
    lie_bracket,
    projected_field,
    projector_residuals,
    sample_points,
    sphere,
    tangent_project,
    transport_frame,
)


def test_sphere_projector_is_orthogonal_projection():
    s2 = sphere(2)
    residuals = projector_residuals(s2, sample_points(s2, 200, seed=1))
    assert residuals["idempotent"] < 1e-10
    assert residuals["symmetric"] < 1e-10
    assert residuals["rank_ok"]


def test_torus_projector_is_identity():
    t2 = flat_torus(2)
    x = sample_points(t2, 10, seed=2)
    assert np.array_equal(t2.projector(x), np.broadcast_to(np.eye(2), (10, 2, 2)))


@pytest.mark.parametrize("manifold", [sphere(2), flat_torus(1), flat_torus(2)])
def test_retraction_of_zero_returns_the_point(manifold):
    x = sample_points(manifold, 16, seed=3)
    assert np.array_equal(manifold.retract(x, np.zeros_like(x)), x)


def test_sphere_retraction_stays_on_sphere():
    s2 = sphere(2)
    rng = np.random.default_rng(4)
    x = sample_points(s2, 50, seed=4)
    v = s2.project(x, rng.standard_normal(x.shape))
    assert np.all(s2.contains(s2.retract(x, v)))


def test_tangent_project_rejects_points_off_the_manifold():
    with pytest.raises(DomainError):
        tangent_project(sphere(2), np.array([2.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))


def test_tangent_project_removes_normal_part():
    x = np.array([0.0, 0.0, 1.0])
    assert np.allclose(tangent_project(sphere(2), x, np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 0.0])


def test_directional_derivative_in_zero_direction_is_zero():
    x = np.array([0.3, 0.4, 0.5])
    out = directional_derivative(lambda y: np.sin(y), x, np.zeros(3))
    assert np.array_equal(out, np.zeros(3))


def test_curve_derivative_of_height_along_sphere():
    s2 = sphere(2)
    rng = np.random.default_rng(5)
    x = sample_points(s2, 8, seed=5)
    v = s2.project(x, rng.standard_normal(x.shape))
    out = curve_derivative(lambda y: y[..., 2], s2, x, v)
    assert np.allclose(out, v[:, 2], atol=1e-8)


def test_field_derivative_requires_differentiable_field():
    field = VectorField(evaluate=lambda x: x, differentiable=False, name="rough")
    with pytest.raises(UnsupportedOperationError):
        field_derivative(field, np.zeros(2), np.ones(2))


def test_lie_bracket_of_projected_fields_on_sphere():
    s2 = sphere(2)
    a = np.array([1.0, -0.5, 0.2])
    b = np.array([0.3, 0.8, -1.0])
    x = sample_points(s2, 10, seed=6)
    bracket = lie_bracket(s2, projected_field(s2, a), projected_field(s2, b), x)
    expected = (x @ a)[:, None] * s2.project(x, b) - (x @ b)[:, None] * s2.project(x, a)
    assert np.allclose(bracket, expected, atol=1e-7)


def _great_arc(a, b, count):
    theta = np.linspace(0.0, 0.5 * np.pi, count)
    return np.cos(theta)[:, None] * a + np.sin(theta)[:, None] * b


def test_transport_around_octant_rotates_by_quarter_turn():
    ex, ey, ez = np.eye(3)
    path = np.concatenate([_great_arc(ez, ex, 2001), _great_arc(ex, ey, 2001)[1:], _great_arc(ey, ez, 2001)[1:]])
    v0 = np.array([1.0, 0.0, 0.0])
    transported = levi_civita_transport(sphere(2), path, v0)
    v_end = transported[-1]
    assert np.linalg.norm(v_end) == pytest.approx(1.0, abs=1e-12)
    assert abs(v_end[2]) < 1e-12
    angle = np.arccos(np.clip(v_end @ v0, -1.0, 1.0))
    assert angle == pytest.approx(0.5 * np.pi, abs=1e-2)


def test_transport_rejects_non_tangent_start():
    path = _great_arc(np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]), 10)
    with pytest.raises(DomainError):
        levi_civita_transport(sphere(2), path, np.array([0.0, 0.0, 1.0]))


def test_transport_on_torus_is_identity():
    t2 = flat_torus(2)
    path = np.mod(np.linspace([0.0, 0.0], [7.0, 3.0], 50), 2.0 * np.pi)
    out = levi_civita_transport(t2, path, np.array([0.3, -0.4]))
    assert np.allclose(out, [0.3, -0.4])


def test_transport_frame_is_orthonormal_and_tangent():
    s2 = sphere(2)
    rng = np.random.default_rng(7)
    x = sample_points(s2, 20, seed=7)
    frame = s2.tangent_frame(x)
    x_next = s2.retract(x, 0.1 * s2.project(x, rng.standard_normal(x.shape)))
    moved = transport_frame(s2, x_next, frame)
    gram = np.einsum("bji,bjk->bik", moved, moved)
    assert np.allclose(gram, np.eye(2), atol=1e-12)
    assert np.allclose(np.einsum("bij,bjk->bik", s2.projector(x_next), moved), moved, atol=1e-12)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_inverse_sqrt_spd(n):
    rng = np.random.default_rng(n)
    a = rng.standard_normal((5, n, n))
    s = np.einsum("bij,bkj->bik", a, a) + np.eye(n)
    root = inverse_sqrt_spd(s)
    assert np.allclose(np.einsum("bij,bjk,bkl->bil", root, s, root), np.eye(n), atol=1e-10)


def test_levi_civita_derivative_of_constant_field_on_torus():
    t2 = flat_torus(2)
    x = sample_points(t2, 5, seed=8)
    out = levi_civita_derivative(t2, constant_field([1.0, -2.0]), x, np.ones_like(x))
    assert np.array_equal(out, np.zeros_like(x))


def test_levi_civita_derivative_on_sphere():
    s2 = sphere(2)
    a = np.array([0.2, 0.5, -1.0])
    x = np.array([0.0, 0.6, 0.8])
    v = np.array([1.0, 0.0, 0.0])
    # D(P a)[v] = -(v <x, a> + x <v, a>), whose tangent part is -<x, a> v
    out = levi_civita_derivative(s2, projected_field(s2, a), x, v)
    assert np.allclose(out, -(x @ a) * v, atol=1e-8)


def test_levi_civita_derivative_is_torsion_free_on_sphere():
    s2 = sphere(2)
    z1 = projected_field(s2, [1.0, -0.5, 0.2])
    z2 = projected_field(s2, [0.3, 0.8, -1.0])
    x = sample_points(s2, 10, seed=9)
    torsion = levi_civita_derivative(s2, z2, x, z1(x)) - levi_civita_derivative(s2, z1, x, z2(x))
    assert np.allclose(torsion, lie_bracket(s2, z1, z2, x), atol=1e-7)


def test_levi_civita_derivative_is_metric_on_sphere():
    s2 = sphere(2)
    rng = np.random.default_rng(10)
    z1 = projected_field(s2, [1.0, -0.5, 0.2])
    z2 = projected_field(s2, [0.3, 0.8, -1.0])
    x = sample_points(s2, 10, seed=10)
    w = s2.project(x, rng.standard_normal(x.shape))
    numeric = curve_derivative(lambda y: np.sum(z1(y) * z2(y), axis=-1), s2, x, w)
    analytic = np.sum(levi_civita_derivative(s2, z1, x, w) * z2(x), axis=-1) + np.sum(
        z1(x) * levi_civita_derivative(s2, z2, x, w), axis=-1
    )
    assert np.allclose(numeric, analytic, atol=1e-6)
