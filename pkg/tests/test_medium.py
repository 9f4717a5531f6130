from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from fdaclutter import medium
from fdaclutter.constitutive import EPS0, cole_cole, relative
from fdaclutter.harness.scene import default_scene
from fdaclutter.medium import (
    ConditioningError,
    GridSpec,
    MissingCalibrationError,
    PerturbationSpec,
    build_reference,
    calibration_samples,
    correlation_factor,
    draw_sample,
    draw_uncoupled_sample,
    gaussian_field,
    stream,
)

GRID = GridSpec()


def empirical_corr(corr_length, draws=2000, seed=0):
    rng = np.random.default_rng(seed)
    F = np.stack([gaussian_field(GRID, corr_length, rng) for _ in range(draws)])
    return np.corrcoef(F.T)


def test_grid_layout():
    assert GRID.P == 96
    c = GRID.centers
    assert c[1, 0] > c[0, 0] and c[1, 1] == c[0, 1]  # x varies fastest
    assert GRID.patch_area == pytest.approx(2.75 / 12 * 1.75 / 8)
    with pytest.raises(ValueError):
        GridSpec(nx=0)
    with pytest.raises(ValueError):
        GridSpec(x_extent=(1.0, 0.0))


def test_white_field_limit():
    C = empirical_corr(1e-6)
    off = C[~np.eye(GRID.P, dtype=bool)]
    assert np.max(np.abs(off)) < 0.1
    assert np.mean(np.abs(off)) < 0.05


def test_near_constant_field_limit():
    C = empirical_corr(27.5)
    assert C[0, 1] > 0.95 and C[0, GRID.nx] > 0.95


def test_lag_correlation_matches_kernel():
    # patches whose centre distance is closest to 0.4 m
    C = empirical_corr(0.4, seed=3)
    c = GRID.centers
    d = np.linalg.norm(c[:, None] - c[None], axis=-1)
    i, j = np.unravel_index(np.argmin(np.abs(d - 0.4)), d.shape)
    expected = np.exp(-d[i, j] ** 2 / (2 * 0.4**2))
    assert abs(C[i, j] - expected) < 0.1
    assert abs(d[i, j] - 0.4) < 0.05


def test_field_unit_variance():
    rng = np.random.default_rng(1)
    F = np.stack([gaussian_field(GRID, 0.8, rng) for _ in range(4000)])
    np.testing.assert_allclose(F.var(axis=0).mean(), 1.0, rtol=0.05)


def test_conditioning_error(monkeypatch):
    def always_fail(a):
        raise np.linalg.LinAlgError("not PD")

    correlation_factor.cache_clear()
    monkeypatch.setattr(medium.np.linalg, "cholesky", always_fail)
    with pytest.raises(ConditioningError):
        correlation_factor(GRID, 0.123)
    monkeypatch.undo()
    correlation_factor.cache_clear()


def test_invalid_pert_spec():
    with pytest.raises(ValueError):
        PerturbationSpec(corr_length=0.0)
    with pytest.raises(ValueError):
        PerturbationSpec(std={"tau": -1.0})
    with pytest.raises(ValueError):
        PerturbationSpec(active=("bogus",))


def test_reference_states():
    sc = default_scene("S1")
    b = build_reference(sc, "B")
    np.testing.assert_allclose(relative(b.eps_ref), 9.0)
    m = build_reference(sc, "M")
    np.testing.assert_allclose(relative(m.eps_ref), 9.9)
    with pytest.raises(MissingCalibrationError):
        build_reference(sc, "U")
    with pytest.raises(ValueError):
        build_reference(sc, "X")


def test_u_equals_b_within_standard_error():
    sc = default_scene("S1")
    cal = calibration_samples(sc, sc.pert, 5, 256)
    b = build_reference(sc, "B")
    u = build_reference(sc, "U", cal)
    d = np.stack([s.delta_eps for s in cal])
    sem = d.std(axis=0, ddof=1) / np.sqrt(len(cal))
    assert np.all(np.abs(u.eps_ref - b.eps_ref) <= 4 * np.abs(sem) + 1e-30)


def test_scale_zero_gives_zero_contrast():
    sc = default_scene("S3")
    ref = build_reference(sc, "B")
    smp = draw_sample(sc, ref, sc.pert.with_scale(0.0), 0, 1)
    assert not np.any(smp.delta_mu) and not np.any(smp.xi)


def test_draws_are_deterministic_and_order_independent():
    sc = default_scene("S3")
    ref = build_reference(sc, "B")
    a = draw_sample(sc, ref, sc.pert, 7, 42)
    draw_sample(sc, ref, sc.pert, 3, 42)
    b = draw_sample(sc, ref, sc.pert, 7, 42)
    assert np.array_equal(a.delta_mu, b.delta_mu) and np.array_equal(a.xi, b.xi)
    c = draw_sample(sc, ref, sc.pert, 7, 43)
    assert not np.array_equal(a.delta_mu, c.delta_mu)


def test_streams_are_distinct():
    x = stream(1, 0, 5, 0).standard_normal(4)
    y = stream(1, 0, 5, 1).standard_normal(4)
    z = stream(1, 1, 5, 0).standard_normal(4)
    assert not np.allclose(x, y) and not np.allclose(x, z)


@pytest.mark.parametrize("kind", ["B", "M"])
def test_exact_map_consistency(kind):
    sc = default_scene("S3")
    ref = build_reference(sc, kind)
    smp = draw_sample(sc, ref, sc.pert, 2, 9)
    w = sc.geometry.omegas
    expected = cole_cole(w, ref.mu_ref + smp.delta_mu) - cole_cole(w, ref.mu_ref)
    np.testing.assert_allclose(smp.delta_eps, expected, rtol=0, atol=1e-15 * np.abs(ref.eps_ref).max())
    np.testing.assert_array_equal(smp.xi, smp.delta_eps / ref.eps_ref)


def test_u_increment_is_against_updated_reference():
    sc = default_scene("S1")
    cal = calibration_samples(sc, sc.pert, 5, 32)
    u = build_reference(sc, "U", cal)
    smp = draw_sample(sc, u, sc.pert, 1, 9)
    expected = cole_cole(sc.geometry.omegas, smp.mu_true) - u.eps_ref
    np.testing.assert_allclose(smp.delta_eps, expected, rtol=0, atol=1e-26)


def test_s1_contrast_linear_in_scale():
    sc = default_scene("S1")
    ref = build_reference(sc, "B")
    scales = sc.scale_grid
    m = np.array([np.mean(np.abs(draw_sample(sc, ref, sc.pert.with_scale(s), 0, 3).xi)) for s in scales])
    slope = m / np.asarray(scales)
    assert np.max(np.abs(slope / slope[-1] - 1)) < 1e-6


def test_doubling_scale_doubles_delta_mu():
    sc = default_scene("S3")
    ref = build_reference(sc, "B")
    p = sc.pert.with_scale(0.05)
    a = draw_sample(sc, ref, p, 4, 1)
    b = draw_sample(sc, ref, p.with_scale(0.10), 4, 1)
    np.testing.assert_array_equal(2 * a.delta_mu, b.delta_mu)


def test_doubling_scale_doubles_xi_for_linear_channel():
    sc = default_scene("S1")
    ref = build_reference(sc, "B")
    a = draw_sample(sc, ref, sc.pert.with_scale(0.3), 4, 1)
    b = draw_sample(sc, ref, sc.pert.with_scale(0.6), 4, 1)
    # exact up to the cancellation in F(mu + d) - F(mu)
    np.testing.assert_allclose(b.xi, 2 * a.xi, rtol=1e-10, atol=1e-12 * np.abs(b.xi).max())


def test_clamping_is_reported():
    sc = default_scene("S3")
    ref = build_reference(sc, "B")
    smp = draw_sample(sc, ref, sc.pert, 0, 1)
    assert smp.clamped_fraction > 0.01
    assert smp.warnings and "clamped" in smp.warnings[0]
    assert np.all(smp.mu_true[:, 2] >= 0)
    quiet = draw_sample(sc, ref, sc.pert.with_scale(0.01), 0, 1)
    assert quiet.clamped_fraction == 0 and not quiet.warnings


def test_uncoupled_decorrelates_frequencies():
    sc = default_scene("S1")
    ref = build_reference(sc, "B")
    X = np.stack([draw_uncoupled_sample(sc, ref, sc.pert, t, 2).xi[:, 40].real for t in range(2000)])
    C = np.corrcoef(X.T)
    assert np.max(np.abs(C[~np.eye(6, dtype=bool)])) < 0.05


def test_uncoupled_matches_coupled_marginals():
    sc = default_scene("S3")
    sc = sc.with_pert(replace(sc.pert, scale=0.1))
    ref = build_reference(sc, "B")
    u = np.stack([draw_uncoupled_sample(sc, ref, sc.pert, t, 2).xi for t in range(2000)])
    c = np.stack([draw_sample(sc, ref, sc.pert, t, 2).xi for t in range(2000)])
    vu, vc = np.var(u, axis=0).mean(axis=1), np.var(c, axis=0).mean(axis=1)
    np.testing.assert_allclose(vu, vc, rtol=0.10)


def test_absolute_units():
    sc = default_scene("S1")
    ref = build_reference(sc, "B")
    assert np.allclose(ref.eps_ref, 9 * EPS0)
