import numpy as np
import pytest

from weakbohm.errors import BinningError
from weakbohm.measurement import (
    MeasurementRecords,
    PointerModel,
    VelocityEstimate,
    WeakMeasurementRecord,
    bin_average_velocity,
    estimate_momentum_velocity,
    estimate_to_field,
    estimate_velocity,
    expected_estimate,
    extrapolate_bias,
    rng_stream,
    simulate_run,
    simulate_runs,
)
from weakbohm.propagation import Hamiltonian, Potential, PropagatorConfig
from weakbohm.wavefield import Grid, gaussian

BINS = np.linspace(-4.0, 6.0, 11)


@pytest.fixture
def state(grid1d):
    return gaussian(grid1d, 0.0, 1.0, 1.0)


def test_rng_streams_are_keyed():
    a = rng_stream(5, 1, 2).random(4)
    assert np.array_equal(a, rng_stream(5, 1, 2).random(4))
    assert not np.array_equal(a, rng_stream(5, 1, 3).random(4))
    assert not np.array_equal(a, rng_stream(6, 1, 2).random(4))


def test_pointer_validation():
    with pytest.raises(ValueError):
        PointerModel(0.0)
    with pytest.raises(ValueError):
        PointerModel(1.0, "spin")


def test_empty_ensemble_rejected(state, free, cfg):
    with pytest.raises(ValueError):
        simulate_runs(state, free, PointerModel(3.0), 0.025, 0, 1, cfg)


def test_records_independent_of_workers(state, free, cfg):
    p = PointerModel(3.0)
    a = simulate_runs(state, free, p, 0.025, 10000, 11, cfg, block_size=1000)
    b = simulate_runs(state, free, p, 0.025, 10000, 11, cfg, block_size=1000, workers=3)
    assert np.array_equal(a.weak, b.weak) and np.array_equal(a.strong, b.strong)
    c = simulate_runs(state, free, p, 0.025, 10000, 12, cfg, block_size=1000)
    assert not np.array_equal(a.weak, c.weak)


def test_single_run_record(state, free, cfg):
    r = simulate_run(state, free, PointerModel(3.0), 0.025, rng_stream(1), cfg, run_index=4)
    assert isinstance(r, WeakMeasurementRecord) and r.run_index == 4 and r.tau == 0.025


def test_tau_must_be_whole_steps(state, free):
    with pytest.raises(ValueError):
        simulate_runs(state, free, PointerModel(3.0), 0.025, 10, 1, PropagatorConfig(0.004))


def test_quadrature_bias_is_first_order_in_tau(state, free, cfg):
    ref = bin_average_velocity(state, free, BINS)
    big = expected_estimate(state, free, PointerModel(30.0), 0.025, BINS, cfg)
    small = expected_estimate(state, free, PointerModel(30.0), 0.0025, BINS, cfg)
    b_big, b_small = np.nanmax(np.abs(big - ref)), np.nanmax(np.abs(small - ref))
    assert b_small < 0.005
    assert b_big / b_small == pytest.approx(10.0, rel=0.1)


def test_estimator_is_unbiased_for_its_expectation(state, free, cfg):
    p = PointerModel(3.0)
    est = estimate_velocity(simulate_runs(state, free, p, 0.025, 200000, 7, cfg), BINS, 500)
    mean = expected_estimate(state, free, p, 0.025, BINS, cfg)
    ok = ~est.mask
    z = (est.v_hat[ok] - mean[ok]) / est.std_error[ok]
    assert ok.sum() >= 5
    assert np.all(np.abs(z) < 4)


def test_sparse_bins_are_masked(state, free, cfg):
    est = estimate_velocity(simulate_runs(state, free, PointerModel(3.0), 0.025, 5000, 1, cfg), BINS, 400)
    assert np.all(np.isnan(est.v_hat[est.mask]))
    assert np.all(est.counts[est.mask] < 400)
    assert np.all(np.isfinite(est.v_hat[~est.mask]))


def test_bins_must_increase(state, free, cfg):
    rec = simulate_runs(state, free, PointerModel(3.0), 0.025, 100, 1, cfg)
    with pytest.raises(BinningError):
        estimate_velocity(rec, np.array([1.0, 0.0]))


def test_estimate_from_record_list():
    recs = [WeakMeasurementRecord(0.0, 0.1 * k, 0.5, k) for k in range(10)]
    est = estimate_velocity(recs, np.array([-1.0, 2.0]), min_count=2)
    assert est.v_hat[0] == pytest.approx(np.mean([0.2 * k for k in range(10)]))


def test_records_csv_round_trip(tmp_path, state, free, cfg):
    rec = simulate_runs(state, free, PointerModel(3.0), 0.025, 50, 2, cfg)
    rec.to_csv(tmp_path / "r.csv")
    back = MeasurementRecords.from_csv(tmp_path / "r.csv")
    assert np.allclose(back.weak, rec.weak, rtol=1e-11) and back.tau == rec.tau


def _synthetic(tau, sigma, v0, a, b):
    edges = np.linspace(0.0, 3.0, 4)
    v = v0 + a * tau + b / sigma ** 2
    return VelocityEstimate(edges, v, np.full(3, 0.1), np.full(3, 1000), tau, sigma, 3000)


def test_extrapolation_recovers_plane():
    v0, a, b = np.array([1.0, -2.0, 0.5]), np.array([3.0, 1.0, -1.0]), np.array([4.0, 0.0, 2.0])
    ests = [_synthetic(t, s, v0, a, b) for t in (0.1, 0.2) for s in (2.0, 4.0)]
    out = extrapolate_bias(ests)
    assert np.allclose(out.v_hat, v0) and np.allclose(out.tau_slope, a) and np.allclose(out.inv_sigma2_slope, b)
    assert np.all(out.std_error > 0)


def test_extrapolation_needs_a_plane():
    v = np.zeros(3)
    with pytest.raises(ValueError):
        extrapolate_bias([_synthetic(0.1, s, v, v, v) for s in (1.0, 2.0, 3.0)])
    with pytest.raises(ValueError):
        extrapolate_bias([_synthetic(0.1, 1.0, v, v, v), _synthetic(0.2, 2.0, v, v, v)])


def test_extrapolation_rejects_mismatched_bins():
    v = np.zeros(3)
    a = _synthetic(0.1, 1.0, v, v, v)
    b = VelocityEstimate(np.linspace(0, 6, 4), v, v + 0.1, np.full(3, 1000), 0.2, 2.0, 3000)
    with pytest.raises(BinningError):
        extrapolate_bias([a, b, a])


def test_estimate_to_field_interpolates_linearly():
    g = Grid.regular(-4.0, 4.0, 64)
    edges = np.linspace(-3.0, 3.0, 7)
    centers = 0.5 * (edges[1:] + edges[:-1])
    counts = np.array([1000, 1000, 1000, 10, 1000, 1000])
    v = 2.0 * centers + 1.0
    se = np.full(6, 0.2)
    est = VelocityEstimate(edges, np.where(counts < 100, np.nan, v), se, counts, 0.1, 1.0, 5010)
    field, err = estimate_to_field(est, g, 0.0)
    x = g.axes[0]
    ok = ~field.mask
    assert field.provenance == "estimated"
    assert np.allclose(field.components[0][ok], 2.0 * x[ok] + 1.0)
    # points bracketed by the masked bin stay masked
    assert field.mask[(x > 0.5) & (x < 1.5)].all()
    assert field.mask[x < -2.5].all() and field.mask[x > 2.5].all()
    mid = np.argmin(np.abs(x - (-2.0)))
    w = (x[mid] - centers[0]) / (centers[1] - centers[0])
    assert err[mid] == pytest.approx(0.2 * np.sqrt((1 - w) ** 2 + w ** 2))


def test_momentum_estimate_for_coherent_state():
    H = Hamiltonian(potential=Potential.harmonic(1.0))
    g = Grid.regular(-10.0, 10.0, 128)
    psi = gaussian(g, 2.0, 1 / np.sqrt(2))
    est = estimate_momentum_velocity(
        psi, H, PointerModel(3.0, "momentum"), 0.02, 40000, seed=3, cfg=PropagatorConfig(1e-3), min_count=1000
    )
    ok = ~est.mask
    assert est.representation == "momentum" and ok.sum() >= 2
    assert np.all(np.abs(est.v_hat[ok] + 2.0) < 4 * est.std_error[ok] + 0.1)
