import numpy as np
import pytest

from errors import DomainError, GridError, PreconditionError
from flow_sim import (
    CameronMartinPath,
    antidevelopment_martingale_increments,
    compose_check,
    filtered_derivative_flow,
    girsanov_weight,
    integrate_flow,
    linear_path,
    observe,
    perturbation_ode,
    sample_noise,
    sample_noise_batch,
    shifted_flow,
    simulate_points,
    sine_path,
    zero_path,
)
from scenarios import get_scenario


def test_noise_depends_only_on_seed_and_index():
    batch = sample_noise_batch(1.0, 32, 7, [3, 5], noise_dim=2)
    single = sample_noise(1.0, 32, 7, 5, noise_dim=2)
    assert np.array_equal(batch.increments[1], single.increments[0])
    assert not np.array_equal(batch.increments[0], batch.increments[1])
    assert np.array_equal(sample_noise(1.0, 32, 7, 5, 2).increments, single.increments)


def test_noise_variance_matches_step():
    noise = sample_noise_batch(1.0, 16, 0, range(4000))
    assert np.var(noise.increments) == pytest.approx(1.0 / 16, rel=0.05)


def test_coarsen_keeps_the_brownian_path():
    fine = sample_noise_batch(1.0, 64, 1, range(3), noise_dim=3)
    coarse = fine.coarsen(4)
    assert coarse.steps == 16
    assert np.allclose(coarse.increments.sum(axis=1), fine.increments.sum(axis=1), atol=1e-14)
    with pytest.raises(GridError):
        fine.coarsen(5)


def test_cameron_martin_paths():
    k = linear_path([2.0], 1.0, 8)
    assert np.allclose(k.velocity, 2.0)
    assert k.energy == pytest.approx(4.0)
    s = sine_path([1.0, 0.0], 2.0, 64)
    assert np.array_equal(s.values[0], [0.0, 0.0])
    assert abs(s.values[-1, 0]) < 1e-12
    assert np.array_equal(zero_path(3, 1.0, 4).velocity, np.zeros((4, 3)))
    with pytest.raises(PreconditionError):
        CameronMartinPath(1.0, np.ones((5, 1)))


def test_circle_flow_is_brownian_motion():
    system = get_scenario("circle-full").system
    noise = sample_noise_batch(1.0, 64, 2, range(5))
    path = integrate_flow(system, [0.0], noise)
    expected = np.mod(np.cumsum(noise.increments[:, :, 0], axis=1), 2.0 * np.pi)
    assert np.allclose(system.manifold.displacement(path.points[:, 1:, 0], expected), 0.0, atol=1e-12)
    assert np.array_equal(path.jacobian, np.ones_like(path.jacobian))


def test_sphere_flow_stays_on_sphere():
    system = get_scenario("sphere2-drift").system
    noise = sample_noise_batch(1.0, 128, 3, range(8), noise_dim=3)
    path = integrate_flow(system, [0.0, 0.0, 1.0], noise)
    assert np.allclose(np.linalg.norm(path.points, axis=-1), 1.0, atol=1e-12)


def test_flow_rejects_initial_point_off_manifold():
    system = get_scenario("sphere2-gradient").system
    noise = sample_noise_batch(1.0, 4, 0, range(2), noise_dim=3)
    with pytest.raises(DomainError):
        integrate_flow(system, [0.0, 0.0, 2.0], noise)


def test_derivative_flow_matches_finite_difference():
    system = get_scenario("sphere2-drift").system
    manifold = system.manifold
    noise = sample_noise_batch(1.0, 64, 4, range(4), noise_dim=3)
    x0 = np.array([0.0, 0.6, 0.8])
    v = np.array([1.0, 0.0, 0.0])
    eps = 1e-6
    path = integrate_flow(system, x0, noise)
    plus = simulate_points(system, manifold.retract(x0, eps * v), noise)[:, -1]
    minus = simulate_points(system, manifold.retract(x0, -eps * v), noise)[:, -1]
    numeric = (plus - minus) / (2.0 * eps)
    analytic = np.einsum("bij,j->bi", path.derivative(path.steps), v)
    assert np.allclose(numeric, analytic, atol=1e-5)


def test_derivative_inverse_undoes_derivative():
    system = get_scenario("sphere2-gradient").system
    noise = sample_noise_batch(1.0, 32, 5, range(3), noise_dim=3)
    x0 = np.array([0.0, 0.0, 1.0])
    path = integrate_flow(system, x0, noise)
    product = np.einsum("bij,bjk->bik", path.derivative_inverse(32), path.derivative(32))
    assert np.allclose(product, system.manifold.projector(x0), atol=1e-10)


def test_shift_by_zero_is_the_base_flow():
    system = get_scenario("sphere2-gradient").system
    noise = sample_noise_batch(1.0, 32, 6, range(3), noise_dim=3)
    k = linear_path([1.0, 0.0, -1.0], 1.0, 32)
    base = integrate_flow(system, [0.0, 0.0, 1.0], noise)
    shifted = shifted_flow(system, [0.0, 0.0, 1.0], noise, k, 0.0)
    assert np.array_equal(base.points, shifted.points)


def test_shift_requires_matching_grids():
    system = get_scenario("circle-full").system
    noise = sample_noise_batch(1.0, 32, 0, range(2))
    with pytest.raises(GridError):
        shifted_flow(system, [0.0], noise, linear_path([1.0], 1.0, 16), 0.1)


def test_girsanov_weight():
    noise = sample_noise_batch(1.0, 16, 8, range(20000), noise_dim=3)
    k = linear_path([1.0, -0.5, 0.0], 1.0, 16)
    assert np.array_equal(girsanov_weight(noise, k, 0.0), np.ones(20000))
    weights = girsanov_weight(noise, k, 0.5)
    stderr = weights.std(ddof=1) / np.sqrt(len(weights))
    assert abs(weights.mean() - 1.0) < 4.0 * stderr


@pytest.mark.parametrize("mode", ["reference", "fast"])
def test_perturbation_with_zero_tau_stays_put(mode):
    system = get_scenario("sphere2-gradient").system
    noise = sample_noise_batch(1.0, 8, 9, range(2), noise_dim=3)
    path = integrate_flow(system, [0.0, 0.0, 1.0], noise)
    h = perturbation_ode(system, path, linear_path([1.0, 0.0, 0.0], 1.0, 8), 0.0, mode)
    assert np.array_equal(h, np.broadcast_to([0.0, 0.0, 1.0], h.shape))


@pytest.mark.parametrize("mode", ["reference", "fast"])
def test_compose_with_zero_tau_is_exact(mode):
    system = get_scenario("sphere2-gradient").system
    noise = sample_noise_batch(1.0, 8, 10, range(2), noise_dim=3)
    deviation = compose_check(system, [0.0, 0.0, 1.0], noise, linear_path([1.0, 0.0, 0.0], 1.0, 8), 0.0, mode=mode)
    assert np.array_equal(deviation, np.zeros(2))


@pytest.mark.parametrize("mode", ["reference", "fast"])
def test_compose_on_circle_is_exact(mode):
    system = get_scenario("circle-full").system
    noise = sample_noise_batch(1.0, 16, 11, range(3))
    deviation = compose_check(system, [0.0], noise, linear_path([1.0], 1.0, 16), 0.3, mode=mode)
    assert np.max(deviation) < 1e-12


def test_fast_perturbation_tracks_reference():
    system = get_scenario("sphere2-gradient").system
    noise = sample_noise_batch(1.0, 16, 12, range(2), noise_dim=3)
    path = integrate_flow(system, [0.0, 0.0, 1.0], noise)
    k = linear_path([1.0, 0.0, 0.0], 1.0, 16)
    reference = perturbation_ode(system, path, k, 1e-3, "reference")
    fast = perturbation_ode(system, path, k, 1e-3, "fast")
    assert np.max(np.abs(reference - fast)) < 1e-4


def test_fast_compose_tracks_reference_compose():
    system = get_scenario("sphere2-gradient").system
    noise = sample_noise_batch(1.0, 16, 18, range(3), noise_dim=3)
    k = linear_path([1.0, 0.0, 0.0], 1.0, 16)
    reference = compose_check(system, [0.0, 0.0, 1.0], noise, k, 1e-3, mode="reference")
    fast = compose_check(system, [0.0, 0.0, 1.0], noise, k, 1e-3, mode="fast")
    assert np.max(np.abs(reference - fast)) < 1e-4


@pytest.mark.slow
def test_compose_deviation_shrinks_under_refinement():
    system = get_scenario("sphere2-gradient").system
    fine = sample_noise_batch(1.0, 128, 13, range(16), noise_dim=3)
    coarse = fine.coarsen(4)
    deviations = [
        compose_check(system, [0.0, 0.0, 1.0], noise, linear_path([1.0, 0.0, 0.0], 1.0, noise.steps), 0.1).mean()
        for noise in (coarse, fine)
    ]
    assert deviations[1] < deviations[0]


def test_antidevelopment_on_circle_is_the_noise():
    scenario = get_scenario("circle-full")
    noise = sample_noise_batch(1.0, 16, 14, range(3))
    path = integrate_flow(scenario.system, [0.0], noise)
    assert np.array_equal(antidevelopment_martingale_increments(scenario.system, path), noise.increments)


def _sphere_damping_error(oracle, steps, variant):
    noise = sample_noise_batch(1.0, steps, 15, range(8), noise_dim=3)
    path = integrate_flow(oracle.system, [0.0, 0.0, 1.0], noise)
    flow = filtered_derivative_flow(oracle, observe(oracle, path), variant)
    v0 = np.array([1.0, 0.0, 0.0])
    times = np.linspace(0.0, 1.0, steps + 1)
    lengths = np.stack([np.linalg.norm(flow.apply(k, v0), axis=-1) for k in range(steps + 1)], axis=1)
    return np.max(np.abs(lengths - np.exp(-0.5 * times)), axis=1), flow


def test_filtered_flow_on_sphere_damps_at_rate_one_half():
    oracle = get_scenario("sphere2-gradient").oracle
    coarse, _ = _sphere_damping_error(oracle, 32, "eq8")
    fine, _ = _sphere_damping_error(oracle, 64, "eq8")
    assert np.all(coarse < 0.1 / 32)
    ratio = coarse / fine
    assert np.all((ratio > 1.5) & (ratio < 3.0))


def test_filtered_flow_variants_agree_on_sphere():
    oracle = get_scenario("sphere2-gradient").oracle
    _, eq8 = _sphere_damping_error(oracle, 16, "eq8")
    _, eq7 = _sphere_damping_error(oracle, 16, "eq7")
    assert np.allclose(eq7.matrices, eq8.matrices, atol=1e-6)


def test_filtered_flow_on_circle_is_identity():
    scenario = get_scenario("circle-full")
    noise = sample_noise_batch(1.0, 16, 16, range(3))
    path = integrate_flow(scenario.system, [0.0], noise)
    flow = filtered_derivative_flow(scenario.oracle, observe(scenario.oracle, path), "eq8")
    assert np.array_equal(flow.matrices, path.jacobian)


def test_eq7_requires_drift_in_image():
    scenario = get_scenario("torus2-transverse-drift")
    noise = sample_noise_batch(1.0, 8, 17, range(2))
    path = integrate_flow(scenario.system, scenario.x0, noise)
    observed = observe(scenario.oracle, path)
    with pytest.raises(PreconditionError):
        filtered_derivative_flow(scenario.oracle, observed, "eq7")
    assert filtered_derivative_flow(scenario.oracle, observed, "eq8").matrices.shape == (2, 9, 2, 2)


def test_noise_for_different_indices_is_uncorrelated():
    first = sample_noise(1.0, 10**6, 23, 0).increments.ravel()
    second = sample_noise(1.0, 10**6, 23, 1).increments.ravel()
    assert abs(np.corrcoef(first, second)[0, 1]) < 0.01


def test_derivative_flow_error_is_second_order():
    system = get_scenario("sphere2-drift").system
    manifold = system.manifold
    noise = sample_noise_batch(1.0, 64, 24, range(4), noise_dim=3)
    x0 = np.array([0.0, 0.6, 0.8])
    v = np.array([1.0, 0.0, 0.0])
    path = integrate_flow(system, x0, noise)
    end = path.points[:, -1]
    pushed = np.einsum("bij,j->bi", path.derivative(path.steps), v)
    errors = []
    for eps in (1e-3, 1e-4):
        moved = simulate_points(system, manifold.retract(x0, eps * v), noise)[:, -1]
        errors.append(manifold.distance(moved, manifold.retract(end, eps * pushed)))
    assert np.all(errors[0] / errors[1] > 20.0)


def test_antidevelopment_quadratic_variation_on_sphere():
    system = get_scenario("sphere2-gradient").system
    noise = sample_noise_batch(1.0, 1000, 25, range(100), noise_dim=3)
    path = integrate_flow(system, [0.0, 0.0, 1.0], noise)
    increments = antidevelopment_martingale_increments(system, path)
    variation = np.sum(increments ** 2, axis=(1, 2))
    # e(x) projects onto a rank-2 subspace, so the variation grows like 2 t
    assert variation.mean() == pytest.approx(2.0, rel=0.02)
