import numpy as np
import pytest

from weakbohm.errors import PostSelectionError
from weakbohm.propagation import Hamiltonian, Potential, PropagatorConfig, evolve
from weakbohm.wavefield import Grid, WaveFunction, gaussian, plane_wave, superpose
from weakbohm.weakvalue import (
    VelocityField,
    current,
    momentum_commutator_field,
    momentum_velocity_field,
    velocity_field,
    weak_value,
)


def test_plane_wave_velocity_is_hbar_k_over_m():
    g = Grid.regular(0.0, 2 * np.pi, 64)
    H = Hamiltonian(mass=2.0)
    v = velocity_field(plane_wave(g, 3, mass=2.0), H)
    assert np.allclose(v.components[0], 1.5, atol=1e-12)
    assert not v.mask.any()


def test_free_gaussian_velocity_closed_form(grid1d, free):
    s0, k, x0, t = 1.0, 1.0, -4.0, 2.0
    psi = evolve(gaussian(grid1d, x0, s0, k), free, PropagatorConfig(0.0025), t)[-1]
    v = velocity_field(psi, free)
    x = grid1d.axes[0]
    exact = k + (x - x0 - k * t) * t / (4 * s0 ** 4 + t ** 2)
    ok = ~v.mask
    assert ok.sum() > 40
    assert np.allclose(v.components[0][ok], exact[ok], atol=1e-9)


def test_velocity_equals_current_over_density(grid1d, free):
    psi = superpose([gaussian(grid1d, -3, 0.6, 1.0), gaussian(grid1d, 3, 0.6, -0.5)])
    psi = evolve(psi, free, PropagatorConfig(0.0025), 1.0)[-1]
    v = velocity_field(psi, free)
    j = current(psi).components[0]
    dens = np.abs(psi.amplitudes) ** 2
    ok = ~v.mask
    ratio = j[ok] / dens[ok]
    assert np.all(np.abs(v.components[0][ok] - ratio) <= 1e-9 * np.maximum(1, np.abs(ratio)))


def test_velocity_is_weak_value_of_commutator(harmonic):
    g = Grid.regular(-10.0, 10.0, 128)
    psi = gaussian(g, 1.0, 0.8, 0.5)
    x = g.axes[0]

    def comm(a):
        return 1j * (harmonic.apply(x * a, g) - x * harmonic.apply(a, g)) / harmonic.hbar

    v = velocity_field(psi, harmonic)
    for j in range(40, 90, 7):
        delta = np.zeros(g.shape, complex)
        delta[j] = 1.0
        phi = WaveFunction(g, delta)
        assert weak_value(comm, psi, phi) == pytest.approx(v.components[0][j], abs=1e-8)


def test_weak_value_of_diagonal_operator_at_eigenstate(grid1d):
    psi = gaussian(grid1d, 0.0, 1.0)
    x = grid1d.axes[0]
    delta = np.zeros(grid1d.shape, complex)
    delta[70] = 1.0
    assert weak_value(x, psi, WaveFunction(grid1d, delta)) == pytest.approx(x[70])


def test_weak_value_dense_matrix_and_duration(grid1d, free):
    psi = gaussian(grid1d, 0.0, 1.0, 0.5)
    phi = gaussian(grid1d, 1.0, 1.0, 0.5)
    x = grid1d.axes[0]
    a = weak_value(np.diag(x), psi, phi)
    b = weak_value(x, psi, phi)
    assert a == pytest.approx(b, rel=1e-12)
    # the weak value of x at time tau with post-selection on a later state
    c = weak_value(x, psi, phi, free, 0.5, PropagatorConfig(0.0025))
    assert np.isfinite(c)


def test_post_selection_on_orthogonal_state(grid1d):
    psi = gaussian(grid1d, -10.0, 0.3)
    phi = gaussian(grid1d, 10.0, 0.3)
    with pytest.raises(PostSelectionError, match="post-selection impossible"):
        weak_value(grid1d.axes[0], psi, phi)


def test_duration_needs_hamiltonian(grid1d):
    psi = gaussian(grid1d, 0.0, 1.0)
    with pytest.raises(ValueError):
        weak_value(grid1d.axes[0], psi, psi, tau=0.1)


def test_low_density_points_are_masked(grid1d, free):
    v = velocity_field(gaussian(grid1d, 0.0, 0.5), free)
    x = grid1d.axes[0]
    assert v.mask[np.abs(x) > 5].all()
    assert not v.mask[np.abs(x) < 1].any()
    assert np.all(v.components[0][v.mask] == 0.0)


def test_free_momentum_velocity_vanishes(grid1d, free):
    v = momentum_velocity_field(gaussian(grid1d, 0.0, 1.0, 1.0), free)
    assert np.all(v.components[0] == 0.0)
    assert v.representation == "momentum"


def test_momentum_field_matches_raw_commutator():
    H = Hamiltonian(potential=Potential.quartic(0.05))
    g = Grid.regular(-6.0, 6.0, 64)
    psi = superpose([gaussian(g, -1.5, 0.5), gaussian(g, 1.5, 0.5)])
    psi = evolve(psi, H, PropagatorConfig(5e-4), 0.5)[-1]
    a = momentum_velocity_field(psi, H)
    b = momentum_commutator_field(psi, H)
    ok = ~a.mask
    assert np.allclose(a.components[0][ok], b.components[0][ok], atol=1e-6 * np.abs(a.components[0][ok]).max())


def test_harmonic_momentum_velocity_of_coherent_state(harmonic):
    # for a coherent state with real amplitude the weak value of -x at momentum p is -<x>
    g = Grid.regular(-10.0, 10.0, 128)
    v = momentum_velocity_field(gaussian(g, 2.0, 1 / np.sqrt(2)), harmonic)
    ok = ~v.mask
    assert np.allclose(v.components[0][ok], -2.0, atol=1e-8)


def test_velocity_field_validation(grid1d):
    with pytest.raises(ValueError):
        VelocityField(grid1d, (np.zeros(grid1d.shape), np.zeros(grid1d.shape)), 0.0)
    with pytest.raises(ValueError):
        VelocityField(grid1d, (np.full(grid1d.shape, np.nan),), 0.0)
    with pytest.raises(ValueError):
        VelocityField(grid1d, (np.zeros(grid1d.shape),), 0.0, provenance="guess")


def test_field_binary_round_trip(tmp_path, grid1d, free):
    v = velocity_field(gaussian(grid1d, 0.0, 1.0, 1.0), free)
    v.to_binary(tmp_path / "v.bwl")
    back = VelocityField.from_binary(tmp_path / "v.bwl")
    assert np.array_equal(back.components[0], v.components[0])
    assert np.array_equal(back.mask, v.mask)
