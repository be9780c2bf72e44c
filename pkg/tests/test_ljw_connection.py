import numpy as np
import pytest

from errors import DomainError, RankDegeneracyError
from geometry_core import VectorField, constant_field, curve_derivative, flat_torus, projected_field, sample_points
from ljw_connection import (
    ConnectionOracle,
    DiffusionSystem,
    adjoint_Y,
    check_constant_rank,
    curvature,
    image_subbundle,
    induced_inner,
    ljw_derivative,
    projection_e,
    ricci_eigenvalues,
    ricci_matrix,
    ricci_sharp,
)
from scenarios import get_scenario, scenario_ids


def _section(system, c):
    return VectorField(evaluate=lambda y: np.einsum("...ij,j->...i", system.X(y), c), name="X(.)c")


@pytest.mark.parametrize("scenario_id", scenario_ids())
def test_adjoint_reproduces_image_vectors(scenario_id):
    system = get_scenario(scenario_id).system
    rng = np.random.default_rng(0)
    x = sample_points(system.manifold, 100, seed=0)
    v = np.einsum("pij,pj->pi", system.X(x), rng.standard_normal((100, system.noise_dim)))
    y = adjoint_Y(system, x)
    back = np.einsum("pij,pj->pi", system.X(x), np.einsum("pij,pj->pi", y, v))
    assert np.max(np.abs(back - v)) < 1e-9


@pytest.mark.parametrize("scenario_id", scenario_ids())
def test_e_is_an_orthogonal_projection(scenario_id):
    system = get_scenario(scenario_id).system
    x = sample_points(system.manifold, 20, seed=1)
    e = projection_e(system, x, analytic=False)
    assert np.allclose(np.einsum("pij,pjk->pik", e, e), e, atol=1e-10)
    assert np.allclose(e, np.swapaxes(e, -1, -2), atol=1e-12)


@pytest.mark.parametrize(
    "scenario_id, rank",
    [("circle-full", 1), ("torus2-degenerate", 1), ("sphere2-gradient", 2), ("torus2-transverse-drift", 1)],
)
def test_constant_rank(scenario_id, rank):
    scenario = get_scenario(scenario_id)
    assert scenario.oracle.rank == rank
    assert check_constant_rank(scenario.system, count=64) == rank


def test_varying_rank_is_rejected():
    def coefficient(x):
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = np.maximum(0.0, np.sin(x[..., 0]))
        return out

    system = DiffusionSystem(
        scenario_id="switching",
        manifold=flat_torus(2),
        noise_dim=2,
        coefficient=coefficient,
        drift=constant_field([0.0, 0.0]),
    )
    with pytest.raises(RankDegeneracyError):
        check_constant_rank(system, count=256)


def test_subbundle_basis_is_orthonormal_for_induced_metric():
    system = get_scenario("sphere2-gradient").system
    x = sample_points(system.manifold, 5, seed=2)
    sub = image_subbundle(system, x)
    gram = np.einsum("pki,pkl,plj->pij", sub.basis, sub.metric, sub.basis)
    assert np.allclose(gram, np.eye(2), atol=1e-10)


def test_ljw_connection_is_levi_civita_for_gradient_system():
    scenario = get_scenario("sphere2-gradient")
    oracle, manifold = scenario.oracle, scenario.manifold
    rng = np.random.default_rng(3)
    x = sample_points(manifold, 10, seed=3)
    v = manifold.project(x, rng.standard_normal(x.shape))
    field = projected_field(manifold, np.array([0.4, -1.0, 0.7]))
    levi_civita = manifold.project(x, -(v * (x @ [0.4, -1.0, 0.7])[:, None] + x * (v @ [0.4, -1.0, 0.7])[:, None]))
    assert np.allclose(ljw_derivative(oracle, field, x, v), levi_civita, atol=1e-6)


@pytest.mark.parametrize("scenario_id", ["sphere2-gradient", "torus2-degenerate"])
def test_ljw_connection_is_metric(scenario_id):
    scenario = get_scenario(scenario_id)
    oracle, system, manifold = scenario.oracle, scenario.system, scenario.manifold
    rng = np.random.default_rng(4)
    x = sample_points(manifold, 30, seed=4)
    w = manifold.project(x, rng.standard_normal(x.shape))
    z1 = _section(system, rng.standard_normal(system.noise_dim))
    z2 = _section(system, rng.standard_normal(system.noise_dim))
    numeric = curve_derivative(lambda y: induced_inner(system, y, z1(y), z2(y)), manifold, x, w)
    analytic = induced_inner(system, x, ljw_derivative(oracle, z1, x, w), z2(x)) + induced_inner(
        system, x, z1(x), ljw_derivative(oracle, z2, x, w)
    )
    assert np.max(np.abs(numeric - analytic)) < 1e-5


def test_ljw_derivative_rejects_fields_outside_the_image():
    scenario = get_scenario("torus2-degenerate")
    with pytest.raises(DomainError):
        ljw_derivative(scenario.oracle, constant_field([0.0, 1.0]), np.array([0.5, 1.0]), np.array([1.0, 0.0]))


@pytest.mark.parametrize("method", ["christoffel", "projection"])
def test_sphere_ricci_eigenvalues_are_one(method):
    base = get_scenario("sphere2-gradient").oracle
    oracle = ConnectionOracle(system=base.system, rank=base.rank, curvature_method=method)
    for x in sample_points(base.manifold, 4, seed=5):
        assert np.allclose(ricci_eigenvalues(oracle, x), [1.0, 1.0], atol=1e-3)


def test_flat_torus_ricci_vanishes():
    oracle = get_scenario("torus2-degenerate").oracle
    for x in sample_points(oracle.manifold, 4, seed=6):
        assert np.max(np.abs(ricci_eigenvalues(oracle, x))) < 1e-6


def test_curvature_is_antisymmetric():
    oracle = get_scenario("sphere2-gradient").oracle
    x = np.array([0.0, 0.6, 0.8])
    u1 = np.array([1.0, 0.0, 0.0])
    u2 = np.array([0.0, 0.8, -0.6])
    assert np.allclose(curvature(oracle, x, u1, u2), -curvature(oracle, x, u2, u1), atol=1e-12)


def test_sphere_curvature_matches_round_metric():
    oracle = get_scenario("sphere2-gradient").oracle
    x = np.array([0.0, 0.6, 0.8])
    u1 = np.array([1.0, 0.0, 0.0])
    u2 = np.array([0.0, 0.8, -0.6])
    # R(u1, u2) w = <u2, w> u1 - <u1, w> u2
    expected = np.outer(u1, u2) - np.outer(u2, u1)
    assert np.allclose(curvature(oracle, x, u1, u2), expected, atol=1e-4)


def test_analytic_ricci_is_projector_on_sphere():
    oracle = get_scenario("sphere2-gradient").oracle
    x = sample_points(oracle.manifold, 3, seed=7)
    assert np.allclose(ricci_matrix(oracle, x), oracle.manifold.projector(x))


@pytest.mark.parametrize("method", ["christoffel", "projection"])
def test_ricci_sharp_is_identity_on_unit_sphere(method):
    base = get_scenario("sphere2-gradient").oracle
    oracle = ConnectionOracle(system=base.system, rank=base.rank, curvature_method=method)
    x = np.array([0.0, 0.6, 0.8])
    u = np.array([0.3, 0.8, -0.6])
    assert np.allclose(ricci_sharp(oracle, x, u), u, atol=1e-3)


def test_subbundle_cache_is_bounded():
    base = get_scenario("sphere2-gradient").oracle
    oracle = ConnectionOracle(system=base.system, rank=base.rank, cache_size=2)
    points = sample_points(base.manifold, 3, seed=8)
    for x in points:
        oracle.subbundle(x)
    assert len(oracle._cache) == 2
    assert oracle.subbundle(points[2]) is oracle.subbundle(points[2])


def test_subbundle_cache_separates_shapes():
    oracle = get_scenario("sphere2-gradient").oracle
    x = np.array([0.0, 0.6, 0.8])
    single = oracle.subbundle(x)
    batch = oracle.subbundle(x[None])
    assert single.basis.shape != batch.basis.shape
    assert np.allclose(batch.metric[0], single.metric)


def test_adjoint_is_a_generalised_inverse():
    rng = np.random.default_rng(11)
    matrix = rng.standard_normal((3, 2)) @ rng.standard_normal((2, 4))
    system = DiffusionSystem(
        scenario_id="rank-two",
        manifold=flat_torus(3),
        noise_dim=4,
        coefficient=lambda x: np.broadcast_to(matrix, x.shape[:-1] + matrix.shape),
        drift=constant_field([0.0, 0.0, 0.0]),
    )
    x = sample_points(system.manifold, 4, seed=11)
    y = adjoint_Y(system, x, rank=2)
    xs = system.X(x)
    assert np.allclose(xs @ y @ xs, xs, atol=1e-10)
    assert np.allclose(y @ xs @ y, y, atol=1e-10)


def test_ricci_sharp_is_linear():
    oracle = get_scenario("sphere2-drift").oracle
    x = np.array([0.0, 0.6, 0.8])
    u = np.array([1.0, 0.0, 0.0])
    w = np.array([0.0, 0.8, -0.6])
    combined = ricci_sharp(oracle, x, 2.0 * u - 0.5 * w)
    assert np.allclose(combined, 2.0 * ricci_sharp(oracle, x, u) - 0.5 * ricci_sharp(oracle, x, w), atol=1e-10)
