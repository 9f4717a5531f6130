from __future__ import annotations

import numpy as np
import pytest
from scipy import integrate

from fdaclutter import propagation
from fdaclutter.constitutive import EPS0, MU0
from fdaclutter.medium import GridSpec, MediumSample, draw_sample
from fdaclutter.propagation import (
    ArrayGeometry,
    EstimationError,
    GeometryError,
    SingularityError,
    SolverFailure,
    assemble_kernels,
    born_partial_sums,
    dba_error,
    delta_green,
    exact_channel,
    factor_operator,
    green_scalar,
    ls_solve,
    operator_norm,
    perturb_kernels,
    perturb_kernels_contrast,
    scattering_operator,
    self_term,
    spectral_proxy,
    wavenumber,
)

from conftest import scene_setup

W50 = 2 * np.pi * 50e6
EPS9 = 9.0 * EPS0


def sample_from(delta_eps, kernels, trial_id=0):
    delta_eps = np.asarray(delta_eps, dtype=complex)
    return MediumSample(trial_id=trial_id, delta_mu=np.zeros((kernels.P, 5)), mu_true=np.zeros((kernels.P, 5)),
                        delta_eps=delta_eps, xi=delta_eps / kernels.eps_ref, reference_kind="B")


def disk_average_oracle(area, omega, eps):
    # (1/area) * int_0^a exp(-jkr)/(4 pi r) 2 pi r dr, by quadrature
    a = np.sqrt(area / np.pi)
    k = complex(wavenumber(omega, eps))
    re = integrate.quad(lambda r: (np.exp(-1j * k * r) / 2).real, 0, a)[0]
    im = integrate.quad(lambda r: (np.exp(-1j * k * r) / 2).imag, 0, a)[0]
    return (re + 1j * im) / area


def rect_average_oracle(dx, dz, omega, eps):
    # polar quadrature over the rectangle; the radial integral is closed form
    k = complex(wavenumber(omega, eps))

    def inner(theta, part):
        R = min(dx / 2 / max(abs(np.cos(theta)), 1e-300), dz / 2 / max(abs(np.sin(theta)), 1e-300))
        v = (1 - np.exp(-1j * k * R)) / (4j * np.pi * k)
        return v.real if part == 0 else v.imag

    brk = [np.arctan2(dz, dx) + j * np.pi / 2 for j in range(4)]
    re = integrate.quad(inner, 0, 2 * np.pi, args=(0,), points=brk, limit=200)[0]
    im = integrate.quad(inner, 0, 2 * np.pi, args=(1,), points=brk, limit=200)[0]
    return (re + 1j * im) / (dx * dz)


# ---------------------------------------------------------------- kernels


@pytest.mark.parametrize("eps", [EPS9, (9 - 0.5j) * EPS0, 25 * EPS0])
@pytest.mark.parametrize("omega", [W50, 2 * np.pi * 150e6])
def test_self_term_matches_quadrature(omega, eps):
    area = GridSpec().patch_area
    assert self_term(area, omega, eps) == pytest.approx(disk_average_oracle(area, omega, eps), rel=1e-9)


def test_self_term_small_ka_series():
    area = 1e-12
    assert self_term(area, W50, EPS9) == pytest.approx(disk_average_oracle(area, W50, EPS9), rel=1e-9)


def test_disk_self_term_close_to_rectangle_average():
    g = GridSpec()
    for omega in (W50, 2 * np.pi * 150e6):
        disk = self_term(g.patch_area, omega, EPS9)
        rect = rect_average_oracle(g.dx, g.dz, omega, EPS9)
        assert abs(disk - rect) / abs(rect) < 0.05


def test_self_term_frozen_value():
    # frozen from the quadrature oracle
    v = self_term(GridSpec().patch_area, W50, EPS9)
    assert v == pytest.approx(1.2270704456169557 - 0.24690247315728717j, rel=1e-12)


def test_self_term_rejects_bad_area():
    with pytest.raises(ValueError):
        self_term(0.0, W50, EPS9)


def test_wavenumber_decaying_branch():
    k = wavenumber(W50, (9 - 2j) * EPS0)
    assert k.imag < 0 and k.real > 0
    np.testing.assert_allclose(k**2, W50**2 * MU0 * (9 - 2j) * EPS0)
    assert wavenumber(W50, EPS9).imag == 0


def test_green_scalar_values_and_singularity():
    k = wavenumber(W50, EPS9)
    g = green_scalar([0.0, 0.0], [0.3, 0.4], W50, EPS9)
    assert g == pytest.approx(np.exp(-1j * k * 0.5) / (4 * np.pi * 0.5))
    with pytest.raises(SingularityError):
        green_scalar([0.1, 0.1], [0.1, 0.1], W50, EPS9)


def test_kernel_reciprocity(s1):
    scene, ref, ks = s1
    np.testing.assert_array_equal(ks.G, np.swapaxes(ks.G, 1, 2))
    # swapping source and observation leaves the receive kernel unchanged
    n = 2
    g_swap = green_scalar(scene.grid.centers[None], scene.geometry.rx[:, None], ks.omegas[n], ks.eps_bulk[n])
    np.testing.assert_allclose(ks.gr0[n], g_swap, rtol=1e-14)


def test_kernels_are_read_only(s1):
    with pytest.raises(ValueError):
        s1[2].G[0, 0, 0] = 0


def test_geometry_errors(s1):
    scene, ref, _ = s1
    inside = ArrayGeometry(tx=scene.geometry.tx + [0.0, 0.5], rx=scene.geometry.rx, omegas=scene.geometry.omegas)
    with pytest.raises(GeometryError):
        assemble_kernels(inside, scene.grid, ref)
    with pytest.raises(GeometryError):
        ArrayGeometry(tx=scene.geometry.tx[:3], rx=scene.geometry.rx, omegas=scene.geometry.omegas)
    with pytest.raises(GeometryError):
        ArrayGeometry.colinear([0.1], freqs_hz=(0.0,))


# ---------------------------------------------------------------- perturbations


def test_single_patch_delta_green_brute_force(s1):
    _, _, ks = s1
    p, n = 17, 1
    de = np.zeros((ks.N, ks.P), dtype=complex)
    de[n, p] = 0.2 * EPS0
    smp = sample_from(de, ks)
    G = ks.G[n]
    expected = ks.omegas[n] ** 2 * MU0 * de[n, p] * ks.areas[p] * np.outer(G[:, p], G[p, :])
    np.testing.assert_allclose(delta_green(smp, ks, n), expected, rtol=1e-12, atol=0)


def test_dual_routes_agree(s3):
    scene, ref, ks = s3
    smp = draw_sample(scene, ref, scene.pert, 5, 3)
    a = perturb_kernels(smp, ks)
    b = perturb_kernels_contrast(smp, ks)
    np.testing.assert_allclose(b.delta_gt, a.delta_gt, rtol=1e-10, atol=1e-14 * np.abs(a.delta_gt).max())
    np.testing.assert_allclose(b.delta_gr, a.delta_gr, rtol=1e-10, atol=1e-14 * np.abs(a.delta_gr).max())
    assert a.valid_for == b.valid_for == 5


def test_born_series_converges_to_exact_solve(s1):
    scene, ref, ks = s1
    smp = draw_sample(scene, ref, scene.pert, 0, 1)
    n = 0
    K = scattering_operator(smp, ks, n)
    assert operator_norm(K) < 1
    e = ls_solve(smp, ks, scene.geometry, n)
    sums = born_partial_sums(K, ks.gt0[n], 40)
    errs = np.linalg.norm(sums - e, axis=1) / np.linalg.norm(e)
    assert np.all(np.diff(errs[:5]) < 0) and errs[-1] < 1e-8


def test_weak_contrast_dba_error(s1):
    scene, ref, ks = s1
    smp = draw_sample(scene, ref, scene.pert.with_scale(0.01), 0, 1)
    for n in range(ks.N):
        assert dba_error(smp, ks, scene.geometry, n) < 1e-4
    zero = draw_sample(scene, ref, scene.pert.with_scale(0.0), 0, 1)
    assert dba_error(zero, ks, scene.geometry, 0) == 0.0


def test_born_series_diverges_when_eta_exceeds_one(s3):
    # oracle: a normal operator with spectral radius 1.5 along a known eigvector
    rng = np.random.default_rng(0)
    Q, _ = np.linalg.qr(rng.standard_normal((20, 20)) + 1j * rng.standard_normal((20, 20)))
    K = Q @ np.diag(np.linspace(0.1, 1.5, 20)) @ Q.conj().T
    sums = born_partial_sums(K, Q[:, -1], 30)
    growth = np.linalg.norm(np.diff(sums, axis=0), axis=1)
    np.testing.assert_allclose(growth[1:] / growth[:-1], 1.5, rtol=1e-10)
    # and the physical S3 operator at full scale has eta well above one
    scene, ref, ks = s3
    smp = draw_sample(scene, ref, scene.pert, 0, 1)
    assert np.min(spectral_proxy(smp, ks)) > 1


def test_receiver_source_solve(s1):
    scene, ref, ks = s1
    smp = draw_sample(scene, ref, scene.pert, 0, 1)
    e = ls_solve(smp, ks, scene.geometry, 0, source=("receiver", 2), grid=scene.grid)
    assert e.shape == (ks.P,)
    with pytest.raises(ValueError):
        ls_solve(smp, ks, scene.geometry, 0, source=("receiver", 2))
    with pytest.raises(ValueError):
        ls_solve(smp, ks, scene.geometry, 0, source=("bogus", 0), grid=scene.grid)


# ---------------------------------------------------------------- spectral proxy


@pytest.mark.parametrize("scene_id", ["S1", "S3"])
def test_eta_matches_two_norm(scene_id):
    scene, ref, ks = scene_setup(scene_id)
    smp = draw_sample(scene, ref, scene.pert, 3, 2)
    eta = spectral_proxy(smp, ks)
    exact = [np.linalg.norm(scattering_operator(smp, ks, n), 2) for n in range(ks.N)]
    np.testing.assert_allclose(eta, exact, rtol=1e-3)
    assert spectral_proxy(smp, ks, 2) == pytest.approx(eta[2])


def test_eta_zero_operator():
    assert operator_norm(np.zeros((4, 4))) == 0.0


def test_power_iteration_failure_raises(monkeypatch):
    rng = np.random.default_rng(1)
    K = rng.standard_normal((30, 30))
    monkeypatch.setattr(propagation, "POWER_MAXITER", 2)
    with pytest.raises(EstimationError):
        operator_norm(K)


# ---------------------------------------------------------------- exact solver


@pytest.mark.filterwarnings("ignore::scipy.linalg.LinAlgWarning")
def test_singular_operator_raises():
    with pytest.raises(SolverFailure):
        factor_operator(np.eye(5))
    assert factor_operator(np.zeros((5, 5))).cond == pytest.approx(1.0)


@pytest.mark.parametrize("scene_id", ["S1", "S3"])
def test_transmit_receive_symmetry(scene_id):
    scene, ref, ks = scene_setup(scene_id)
    smp = draw_sample(scene, ref, scene.pert.with_scale(0.3), 1, 4)
    for n in range(ks.N):
        assert exact_channel(smp, ks, scene.geometry, scene.grid, n).delta_tr <= 1e-10


def test_exact_channel_zero_scale_is_exact(s1):
    scene, ref, ks = s1
    smp = draw_sample(scene, ref, scene.pert.with_scale(0.0), 0, 1)
    ch = exact_channel(smp, ks, scene.geometry, scene.grid, 0)
    assert ch.dba_error == 0 and ch.e_t == 0 and ch.e_r == 0 and ch.e_G == 0
    np.testing.assert_array_equal(ch.e_exact, ks.gt0[0])


def test_exact_channel_consistent_with_direct_solves(s3):
    scene, ref, ks = s3
    smp = draw_sample(scene, ref, scene.pert.with_scale(0.1), 2, 4)
    n = 3
    ch = exact_channel(smp, ks, scene.geometry, scene.grid, n)
    e = ls_solve(smp, ks, scene.geometry, n)
    np.testing.assert_allclose(ch.e_exact, e, rtol=1e-12)
    assert ch.dba_error == pytest.approx(dba_error(smp, ks, scene.geometry, n), rel=1e-10)


def _errors_vs_eta(scene_id, scales):
    scene, ref, ks = scene_setup(scene_id)
    rows = []
    for s in scales:
        smp = draw_sample(scene, ref, scene.pert.with_scale(s), 0, 5)
        eta = spectral_proxy(smp, ks)
        for n in range(ks.N):
            ch = exact_channel(smp, ks, scene.geometry, scene.grid, n)
            rows.append((eta[n], ch.dba_error, ch.e_t, ch.e_r, ch.e_G))
    return np.array(rows)


def test_validity_collapse_bounds():
    # eta < 1 regime: DBA error is second order and mapping errors first order
    r = _errors_vs_eta("S3", [0.001, 0.003, 0.01])
    eta = r[:, 0]
    assert eta.max() < 0.5
    C2 = np.max(r[:, 1] / eta**2)
    C1 = np.max(r[:, 2:] / eta[:, None])
    assert C2 < 2.0 and C1 < 2.0
    # the ratios stay bounded (do not grow) as eta shrinks tenfold
    small, large = r[eta < np.median(eta)], r[eta >= np.median(eta)]
    assert np.max(small[:, 1] / small[:, 0] ** 2) <= 1.5 * np.max(large[:, 1] / large[:, 0] ** 2)
