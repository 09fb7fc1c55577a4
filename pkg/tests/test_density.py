import numpy as np
import pytest
from pydantic import ValidationError

from lab.density import (
    BumpComponent,
    DensityField,
    DensitySpec,
    cosine_mode_density,
    grad_sup_norm,
    normalize,
    realize_density,
    uniform_density,
)
from lab.grid import build_grid
from lab.metrics import l2_distance


def test_uniform_density():
    rho = uniform_density(build_grid(1, [8]))
    assert np.all(rho.values == 1.0)
    assert rho.mass == 1.0
    assert rho.floor == 1.0
    assert l2_distance(rho, rho) == 0.0


def test_bump_mixture_floor_and_mass(bump_density, bump_spec):
    assert bump_density.mass == pytest.approx(1.0, abs=1e-12)
    assert bump_density.floor >= bump_spec.floor_fraction - 1e-12
    assert bump_density.peak > 1.0
    assert np.isfinite(grad_sup_norm(bump_density))


def test_bump_mixture_in_2d(grid_2d):
    spec = DensitySpec(components=[BumpComponent(center=[0.5, 0.5], width=0.3)], floor_fraction=0.2)
    rho = realize_density(spec, grid_2d)
    assert rho.mass == pytest.approx(1.0, abs=1e-12)
    assert rho.floor >= 0.2 - 1e-12
    # 关于中心对称
    assert rho.values == pytest.approx(rho.values[::-1, ::-1], abs=1e-12)


def test_tilted_family_is_monotone(grid_1d):
    rho = realize_density(DensitySpec(family="tilted", tilt=[2.0], floor_fraction=0.1), grid_1d)
    assert np.all(np.diff(rho.values) > 0)
    with pytest.raises(ValueError):
        realize_density(DensitySpec(family="tilted", tilt=[1.0, 1.0]), grid_1d)


def test_bump_missing_every_center_is_rejected():
    grid = build_grid(1, [8])
    spec = DensitySpec(components=[BumpComponent(center=[0.5], width=0.01)])
    with pytest.raises(ValueError, match="未覆盖任何格心"):
        realize_density(spec, grid)


def test_spec_validation():
    with pytest.raises(ValidationError):
        DensitySpec(components=[{"center": [0.5], "width": -0.1}])
    with pytest.raises(ValidationError):
        DensitySpec(components=[{"center": [0.5], "width": 0.1, "weight": 0.0}])
    with pytest.raises(ValidationError):
        DensitySpec(family="bump_mixture", widths=[0.1])
    with pytest.raises(ValidationError):
        DensitySpec(components=[{"center": [0.5], "width": 0.1}, {"center": [0.5, 0.5], "width": 0.1}])


def test_zero_floor_fraction_logs_warning(grid_1d, log_messages):
    spec = DensitySpec(components=[BumpComponent(center=[0.5], width=0.2)], floor_fraction=0.0)
    rho = realize_density(spec, grid_1d)
    assert rho.floor == 0.0
    assert any(level == "WARNING" and "floor_fraction=0" in message for level, message in log_messages)


def test_density_field_rejects_negative_and_nan(grid_1d):
    values = np.ones(64)
    values[5] = -0.1
    with pytest.raises(ValueError, match=r"\(5,\)"):
        DensityField(grid_1d, values)
    values[5] = np.nan
    with pytest.raises(ValueError):
        DensityField(grid_1d, values)


def test_normalize_is_idempotent(grid_1d, rng):
    once = normalize(rng.uniform(0.5, 2.0, size=64), grid_1d)
    twice = normalize(once)
    assert once.mass == pytest.approx(1.0, abs=1e-13)
    assert np.array_equal(once.values, twice.values)
    with pytest.raises(ValueError):
        normalize(np.zeros(64), grid_1d)


def test_cosine_mode_density_gradient():
    grid = build_grid(1, [256])
    rho = cosine_mode_density(grid, 0.5)
    assert rho.mass == pytest.approx(1.0, abs=1e-12)
    assert grad_sup_norm(rho) == pytest.approx(0.5 * np.pi, rel=1e-3)
    assert grad_sup_norm(uniform_density(grid)) == 0.0
    with pytest.raises(ValueError):
        cosine_mode_density(grid, 1.0)
