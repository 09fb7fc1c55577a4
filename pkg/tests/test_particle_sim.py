import numpy as np
import pytest

from lab.density import cosine_mode_density, uniform_density
from lab.fpe_solver import SolverConfig, TimeField, solve_heat
from lab.grid import FaceField, build_grid
from lab.metrics import l2_distance, w1_distance
from lab.particle_sim import (
    NOISE_BLOCK,
    ParticleEnsemble,
    gaussian_increments,
    histogram_density,
    reflect,
    run_particles,
    sample_from_density,
    step_ode,
    step_sde,
)


def test_reflect_folds_into_unit_box():
    folded = reflect(np.array([-0.2, 1.3, 2.5, 0.4, 1.0, 0.0]))
    assert folded == pytest.approx([0.2, 0.7, 0.5, 0.4, 1.0, 0.0])


def test_gaussian_increments_independent_of_chunking():
    full = gaussian_increments(7, 3, 2 * NOISE_BLOCK + 100, 2)
    assert full.shape == (2 * NOISE_BLOCK + 100, 2)
    assert np.array_equal(full[:NOISE_BLOCK], gaussian_increments(7, 3, NOISE_BLOCK, 2))
    assert np.array_equal(full[:NOISE_BLOCK + 10], gaussian_increments(7, 3, NOISE_BLOCK + 10, 2))
    assert not np.array_equal(full[:10], gaussian_increments(7, 4, 10, 2))
    assert not np.array_equal(full[:10], gaussian_increments(8, 3, 10, 2))
    assert gaussian_increments(7, 3, 0, 2).shape == (0, 2)


def test_ensemble_validation():
    with pytest.raises(ValueError, match="单位盒"):
        ParticleEnsemble(np.array([[0.5], [1.2]]), rng_seed=0)
    with pytest.raises(ValueError):
        ParticleEnsemble(np.array([0.5, 0.2]), rng_seed=0)


def test_sampling_is_deterministic_and_matches_density(bump_density):
    first = sample_from_density(bump_density, 100_000, seed=11)
    second = sample_from_density(bump_density, 100_000, seed=11)
    assert np.array_equal(first.positions, second.positions)
    assert first.positions.min() >= 0.0 and first.positions.max() <= 1.0
    estimate = histogram_density(first, bump_density.grid)
    assert estimate.mass == pytest.approx(1.0, abs=1e-12)
    assert l2_distance(estimate, bump_density) < 0.1


def test_sampling_edge_cases(bump_density):
    assert sample_from_density(bump_density, 0, seed=0).n == 0
    with pytest.raises(ValueError):
        sample_from_density(bump_density, -1, seed=0)
    with pytest.raises(ValueError):
        histogram_density(sample_from_density(bump_density, 0, seed=0), bump_density.grid)
    with pytest.raises(ValueError):
        histogram_density(sample_from_density(bump_density, 10, seed=0), build_grid(2, [4, 4]))


def test_step_ode_with_zero_drift_is_identity(grid_1d):
    ensemble = sample_from_density(uniform_density(grid_1d), 50, seed=1)
    moved = step_ode(ensemble, FaceField.zeros(grid_1d), 0.01)
    assert np.array_equal(moved.positions, ensemble.positions)
    assert moved.t == pytest.approx(0.01)
    assert moved.step_index == 1
    with pytest.raises(ValueError):
        step_ode(ensemble, FaceField.zeros(grid_1d), 0.0)


def test_step_with_callable_drift_reflects():
    ensemble = ParticleEnsemble(np.array([[0.1], [0.95]]), rng_seed=0)
    moved = step_ode(ensemble, lambda x: np.full_like(x, 1.0), 0.1)
    assert moved.positions[:, 0] == pytest.approx([0.2, 0.95])


def test_sde_step_uses_step_counter():
    ensemble = ParticleEnsemble(np.full((4, 1), 0.5), rng_seed=5)

    def zero(x):
        return np.zeros_like(x)

    once = step_sde(ensemble, zero, 1e-4)
    again = step_sde(ensemble, zero, 1e-4)
    assert np.array_equal(once.positions, again.positions)
    later = step_sde(once, zero, 1e-4)
    assert not np.array_equal(later.positions - once.positions, once.positions - ensemble.positions)


def test_run_particles_checks_horizon(grid_1d):
    ensemble = sample_from_density(uniform_density(grid_1d), 10, seed=0)
    with pytest.raises(ValueError):
        run_particles(ensemble, TimeField.zeros(grid_1d, 0.1), 0.2, 0.01)


def test_sde_particles_follow_heat_equation():
    grid = build_grid(1, [64])
    rho0 = cosine_mode_density(grid, 0.6)
    pde = solve_heat(rho0, 0.05, SolverConfig(dt=1e-3)).terminal
    ensemble = sample_from_density(rho0, 20_000, seed=2)
    final = run_particles(ensemble, TimeField.zeros(grid, 0.05), 0.05, 1e-3, diffusion_scale=1.0)
    assert final.step_index == 50
    assert w1_distance(histogram_density(final, grid), pde) < 0.01


def test_ode_particles_hold_uniform_density(grid_1d):
    ensemble = sample_from_density(uniform_density(grid_1d), 5000, seed=4)
    final = run_particles(ensemble, TimeField.zeros(grid_1d, 0.1), 0.1, 0.01, diffusion_scale=0.0)
    assert np.array_equal(final.positions, ensemble.positions)


def test_ensemble_csv(tmp_path):
    ensemble = ParticleEnsemble(np.array([[0.25, 0.5], [0.75, 0.125]]), rng_seed=0)
    path = tmp_path / "particles.csv"
    ensemble.to_csv(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "particle_id,x,y"
    assert lines[2] == "1,0.75,0.125"
