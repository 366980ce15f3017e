import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakbohm.errors import DegenerateStateError, GridMismatchError
from weakbohm.wavefield import (
    Grid,
    WaveFunction,
    gaussian,
    load_binary,
    momentum_density,
    momentum_representation,
    normalize,
    plane_wave,
    position_density,
    position_representation,
    save_binary,
    spectral_derivative,
    superpose,
)


@pytest.mark.parametrize("points", [0, 7, 12, 100])
def test_grid_rejects_bad_point_counts(points):
    with pytest.raises(ValueError):
        Grid(((-1.0, 1.0),), (points,))


def test_grid_rejects_empty_extent_and_3d():
    with pytest.raises(ValueError):
        Grid(((1.0, 1.0),), (16,))
    with pytest.raises(ValueError):
        Grid.regular(-1, 1, 8, dims=3)


def test_grid_geometry():
    g = Grid.regular(-2.0, 2.0, 16)
    assert g.spacing == (0.25,)
    assert g.axes[0][0] == -2.0 and np.isclose(g.axes[0][-1], 1.75)
    assert np.allclose(np.diff(g.cell_edges(0, coarsen=4)), 1.0)
    assert g.contains(np.array([[-2.0], [1.99], [2.0]])).tolist() == [True, True, False]


def test_gaussian_moments(grid1d):
    psi = gaussian(grid1d, 1.5, 0.8, 2.0)
    p = position_density(psi)
    x = grid1d.axes[0]
    assert np.isclose(p.total(), 1.0, atol=1e-12)
    mean = np.sum(p.values * x) * grid1d.spacing[0]
    var = np.sum(p.values * (x - mean) ** 2) * grid1d.spacing[0]
    assert np.isclose(mean, 1.5, atol=1e-12)
    assert np.isclose(np.sqrt(var), 0.8, atol=1e-10)


def test_momentum_density_of_gaussian(grid1d):
    s, k = 0.9, 1.3
    phi = momentum_representation(gaussian(grid1d, 0.0, s, k))
    sp = 1 / (2 * s)
    p = phi.grid.axes[0]
    exact = np.exp(-((p - k) ** 2) / (2 * sp ** 2)) / np.sqrt(2 * np.pi * sp ** 2)
    assert np.allclose(np.abs(phi.amplitudes) ** 2, exact, atol=1e-12)
    assert np.isclose(momentum_density(phi).total(), 1.0, atol=1e-12)


def test_momentum_round_trip(grid1d):
    psi = gaussian(grid1d, -3.0, 1.1, 0.7)
    back = position_representation(momentum_representation(psi))
    assert np.allclose(back.amplitudes, psi.amplitudes, atol=1e-13)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=32, max_size=32), st.lists(st.floats(-1, 1), min_size=32, max_size=32))
def test_momentum_transform_is_unitary(re, im):
    g = Grid.regular(-3.0, 5.0, 32)
    amps = np.array(re) + 1j * np.array(im)
    if np.sum(np.abs(amps) ** 2) < 1e-6:
        return
    psi = normalize(WaveFunction(g, amps))
    phi = momentum_representation(psi)
    assert np.isclose(np.sum(np.abs(phi.amplitudes) ** 2) * phi.grid.spacing[0], 1.0, atol=1e-12)


def test_plane_wave_momentum_is_sharp():
    g = Grid.regular(0.0, 2 * np.pi, 64)
    phi = momentum_representation(plane_wave(g, 5))
    dens = np.abs(phi.amplitudes) ** 2
    assert phi.grid.axes[0][np.argmax(dens)] == pytest.approx(5.0)
    assert dens.max() * phi.grid.spacing[0] == pytest.approx(1.0)


def test_spectral_derivative_exact_for_band_limited():
    g = Grid.regular(0.0, 2 * np.pi, 64)
    x = g.axes[0]
    assert np.allclose(spectral_derivative(np.sin(3 * x), g, 0), 3 * np.cos(3 * x), atol=1e-12)
    assert np.allclose(spectral_derivative(np.sin(3 * x), g, 0, order=2), -9 * np.sin(3 * x), atol=1e-10)


def test_spectral_derivative_2d_axis():
    g = Grid.regular(0.0, 2 * np.pi, 32, dims=2)
    x, y = g.mesh()
    f = np.sin(x) * np.cos(2 * y)
    assert np.allclose(spectral_derivative(f, g, 1), -2 * np.sin(x) * np.sin(2 * y), atol=1e-12)


def test_degenerate_state_rejected(grid1d):
    with pytest.raises(DegenerateStateError):
        normalize(WaveFunction(grid1d, np.zeros(grid1d.shape, complex)))


def test_superpose_requires_shared_grid(grid1d):
    other = Grid.regular(-10, 10, 128)
    with pytest.raises((GridMismatchError, ValueError)):
        superpose([gaussian(grid1d, 0, 1), gaussian(other, 0, 1)])


def test_superposition_is_normalized(grid1d):
    psi = superpose([gaussian(grid1d, -3, 0.5), gaussian(grid1d, 3, 0.5)], [1, 1j])
    assert psi.norm() == pytest.approx(1.0)


def test_binary_round_trip(tmp_path, grid1d):
    psi = gaussian(grid1d, 0.3, 1.0, -0.4).replace(time=1.25)
    path = save_binary(psi, tmp_path / "psi.bwl")
    back = load_binary(path)
    assert back.grid == psi.grid and back.time == 1.25
    assert np.array_equal(back.amplitudes, psi.amplitudes)


def test_density_rejects_negative(grid1d):
    from weakbohm.wavefield import DensityField

    with pytest.raises(ValueError):
        DensityField(grid1d, -np.ones(grid1d.shape))
