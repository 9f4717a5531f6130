"""Experiment drivers: propagation, structure and consequence suites.

Trials are independent and may be mapped over a thread pool; every
aggregate is a fixed-order reduction over trial index, so the thread count
never changes a reported value.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable

import numpy as np

from ..constitutive import EPS0
from ..covmetrics import (
    STRUCTURES,
    BlockCovariance,
    chi_f,
    chi_f_xi,
    estimate_covariance,
    kappa_prop,
    proxy_gap,
    reference_change_diagnostics,
    simplify,
    skeleton_diagnostics,
    structure_report,
    subspace_capture,
    whitening_error,
)
from ..medium import build_reference, calibration_samples, draw_sample, draw_uncoupled_sample
from ..propagation import (
    EstimationError,
    SolverFailure,
    assemble_kernels,
    dba_error,
    exact_channel,
    perturb_kernels,
    spectral_proxy,
)
from ..snapshot import closure_metrics, leading_response, semi_nonlinear_response
from .config import ExperimentConfig
from .report import ExperimentResult

RANDOM_PSD_SEED = 7


def pmap(fn: Callable, items: Iterable, threads: int = 1) -> list:
    """Ordered map, optionally over a thread pool."""
    items = list(items)
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def nanmean(values) -> tuple[float, int]:
    """Mean over defined values and the number of undefined (NaN) entries."""
    a = np.asarray(list(values), dtype=float)
    ok = np.isfinite(a)
    mean = float(a[ok].mean()) if ok.any() else float("nan")
    return mean, int((~ok).sum())


def reference_for(scene, kind: str, pert, cfg: ExperimentConfig):
    """Reference state for ``kind``; U is calibrated at the same perturbation setting."""
    if kind != "U":
        return build_reference(scene, kind)
    cal = calibration_samples(scene, pert, cfg.master_seed, cfg.calibration_count)
    return build_reference(scene, "U", cal)


def s_valid(scales, errors, threshold: float) -> float:
    ok = [s for s, e in zip(scales, errors) if np.isfinite(e) and e <= threshold]
    return float(max(ok)) if ok else float("nan")


def monotone_fraction(errors) -> float:
    e = np.asarray(errors, dtype=float)
    if len(e) < 2:
        return float("nan")
    return float(np.mean(e[1:] >= e[:-1]))


# ---------------------------------------------------------------- propagation


def _propagation_trial(scene, ref, kernels, pert, seed: int, t: int):
    smp = draw_sample(scene, ref, pert, t, seed)
    try:
        chans = [exact_channel(smp, kernels, scene.geometry, scene.grid, n) for n in range(scene.N)]
    except SolverFailure:
        return None
    cm = closure_metrics(semi_nonlinear_response(smp, kernels, perturb_kernels(smp, kernels)))
    return {
        "dba": float(np.mean([c.dba_error for c in chans])),
        "e_G": float(np.mean([c.e_G for c in chans])),
        "e_t": float(np.mean([c.e_t for c in chans])),
        "e_r": float(np.mean([c.e_r for c in chans])),
        "side": float(max(max(c.e_t, c.e_r) for c in chans)),
        "delta_tr": float(max(c.delta_tr for c in chans)),
        "cond": float(np.mean([c.cond for c in chans])),
        "deps": float(np.linalg.norm(smp.delta_eps / EPS0)),
        "closure": cm,
    }


def propagation_scan_point(cfg: ExperimentConfig, scene_id: str, kind: str, scale: float, threads: int = 1):
    """Per-trial propagation metrics at one (scene, reference, scale) point."""
    scene = cfg.scene(scene_id)
    pert = scene.pert.with_scale(scale)
    ref = reference_for(scene, kind, pert, cfg)
    kernels = assemble_kernels(scene.geometry, scene.grid, ref)
    return pmap(lambda t: _propagation_trial(scene, ref, kernels, pert, cfg.master_seed, t), range(cfg.trials), threads)


def dba_scan(cfg: ExperimentConfig, scene_id: str, kind: str, scales=None, threads: int = 1) -> list[float]:
    """Mean distorted-Born error at each scale (solver failures excluded)."""
    scene = cfg.scene(scene_id)
    out = []
    for s in scales if scales is not None else cfg.scale_grid:
        pert = scene.pert.with_scale(s)
        ref = reference_for(scene, kind, pert, cfg)
        kernels = assemble_kernels(scene.geometry, scene.grid, ref)

        def one(t):
            smp = draw_sample(scene, ref, pert, t, cfg.master_seed)
            try:
                return float(np.mean([dba_error(smp, kernels, scene.geometry, n) for n in range(scene.N)]))
            except SolverFailure:
                return float("nan")

        out.append(nanmean(pmap(one, range(cfg.trials), threads))[0])
    return out


def run_propagation_suite(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    res = ExperimentResult("propagation", cfg.master_seed, cfg.digest)
    thr = cfg.validity_threshold
    for sid in cfg.scenes:
        scene = cfg.scene(sid)
        k_b = assemble_kernels(scene.geometry, scene.grid, build_reference(scene, "B"))
        for kind in cfg.references:
            ref = reference_for(scene, kind, scene.pert, cfg)
            k_x = assemble_kernels(scene.geometry, scene.grid, ref)
            res.add_row("skeleton", scene=sid, reference=kind, **skeleton_diagnostics(k_x, scene.geometry, scene.grid))
            if kind != "B":
                res.add_row("reference_change", scene=sid, reference=kind, **reference_change_diagnostics(k_b, k_x))

        for kind in cfg.references:
            per_scale = []
            for s in (0.0,) + tuple(cfg.scale_grid):
                trials = propagation_scan_point(cfg, sid, kind, s, threads)
                ok = [r for r in trials if r is not None]
                res.count_failure("solver", len(trials) - len(ok))
                agg = {key: nanmean(r[key] for r in ok)[0] for key in ("dba", "e_G", "e_t", "e_r", "cond", "deps")}
                cl = [r["closure"] for r in ok]
                e_main, _ = nanmean(c.e_main for c in cl)
                e_1st, _ = nanmean(c.e_1st for c in cl)
                I_1st, undef = nanmean(c.I_1st for c in cl)
                eta_r, _ = nanmean(c.eta_r for c in cl)
                rho, _ = nanmean(c.rho_cross for c in cl)
                side = max((r["side"] for r in ok), default=float("nan"))
                dtr = max((r["delta_tr"] for r in ok), default=float("nan"))
                if s > 0:
                    res.count_failure("undefined_metric", undef)
                row = dict(scene=sid, reference=kind, scale=float(s), e_dba=agg["dba"], e_G=agg["e_G"], e_t=agg["e_t"],
                           e_r=agg["e_r"], cond=agg["cond"], mean_deps=agg["deps"], e_main=e_main, e_1st=e_1st,
                           I_1st=I_1st, eta_r=eta_r, rho_cross=rho, e_side_max=side, delta_tr=dtr,
                           solver_failures=len(trials) - len(ok), undefined=undef)
                res.add_row("scan", **row)
                if s > 0:
                    per_scale.append(row)

            sc = [r["scale"] for r in per_scale]
            lo, hi = per_scale[0], per_scale[-1]
            res.add_row("dba", scene=sid, reference=kind, e_dba_min=lo["e_dba"], e_dba_max=hi["e_dba"],
                        A_DBA=hi["e_dba"] / lo["e_dba"] if lo["e_dba"] > 0 else float("nan"),
                        s_valid=s_valid(sc, [r["e_dba"] for r in per_scale], thr),
                        M_mono=monotone_fraction([r["e_dba"] for r in per_scale]),
                        A_deps=hi["mean_deps"] / lo["mean_deps"],
                        kappa_max=max(r["cond"] for r in per_scale))
            res.add_row("mapping", scene=sid, reference=kind, e_G_min=lo["e_G"], e_t_min=lo["e_t"], e_G_max=hi["e_G"],
                        e_t_max=hi["e_t"], s_G_valid=s_valid(sc, [r["e_G"] for r in per_scale], thr),
                        s_t_valid=s_valid(sc, [r["e_t"] for r in per_scale], thr), e_side_max=hi["e_side_max"],
                        delta_tr=max(r["delta_tr"] for r in per_scale))
            res.add_row("closure", scene=sid, reference=kind, e_main_min=lo["e_main"], e_1st_min=lo["e_1st"],
                        e_main_max=hi["e_main"], e_1st_max=hi["e_1st"], I_1st_min=lo["I_1st"], I_1st_max=hi["I_1st"],
                        s_1st_valid=s_valid(sc, [r["e_1st"] for r in per_scale], thr),
                        eta_r=nanmean(r["eta_r"] for r in per_scale)[0],
                        eta_t=1.0 - nanmean(r["eta_r"] for r in per_scale)[0],
                        rho_cross_max=hi["rho_cross"])
    return res


# ------------------------------------------------------------------ structure


def leading_snapshots(cfg: ExperimentConfig, scene, ref, kernels, pert, trials: int, threads: int = 1, uncoupled=False):
    draw = draw_uncoupled_sample if uncoupled else draw_sample

    def one(t):
        return leading_response(draw(scene, ref, pert, t, cfg.master_seed), kernels)

    return pmap(one, range(trials), threads)


def uncoupled_chi_track(cfg: ExperimentConfig, scene_id: str, counts=None, threads: int = 1) -> list[float]:
    """chi_f of the zero-coupling construction on the first ``count`` trials."""
    counts = tuple(counts if counts is not None else cfg.convergence_counts)
    scene = cfg.scene(scene_id)
    ref = build_reference(scene, "B")
    kernels = assemble_kernels(scene.geometry, scene.grid, ref)
    snaps = leading_snapshots(cfg, scene, ref, kernels, scene.pert, max(counts), threads, uncoupled=True)
    return [chi_f(estimate_covariance(snaps[:c])) for c in counts]


def scale_scan(cfg: ExperimentConfig, scene_id: str, route: str = "amplitude", base=None, threads: int = 1):
    """Leading covariance over the scale grid as (scale, BlockCovariance) pairs.

    ``amplitude`` scales the default-scale leading snapshots by s (pure energy
    scaling); ``map`` redraws every trial at scale s through the exact
    constitutive map.
    """
    scene = cfg.scene(scene_id)
    ref = build_reference(scene, "B")
    kernels = assemble_kernels(scene.geometry, scene.grid, ref)
    if route == "amplitude" and base is None:
        base = np.stack([c.c for c in leading_snapshots(cfg, scene, ref, kernels, scene.pert, cfg.trials, threads)])
    out = []
    for s in cfg.scale_grid:
        if route == "amplitude":
            R = estimate_covariance(s * base, M=scene.M, N=scene.N)
        elif route == "map":
            R = estimate_covariance(leading_snapshots(cfg, scene, ref, kernels, scene.pert.with_scale(s), cfg.trials, threads))
        else:
            raise ValueError(f"unknown scale-scan route {route!r}")
        out.append((float(s), R))
    return out


def random_psd(rng: np.random.Generator, L: int = 36) -> np.ndarray:
    rank = int(rng.integers(1, L + 1))
    A = rng.standard_normal((L, rank)) + 1j * rng.standard_normal((L, rank))
    return A @ A.conj().T


def identity_residuals(covs: Iterable[BlockCovariance]) -> tuple[float, float]:
    """Largest |err_bd_diag^2 - chi_f| and |err_bd_full^2 - chi_f/(1+chi_f)|."""
    rd, rf = 0.0, 0.0
    for R in covs:
        rep = structure_report(R)
        rd = max(rd, abs(rep.err_bd_diag**2 - rep.chi_f))
        rf = max(rf, abs(rep.err_bd_full**2 - rep.chi_f / (1 + rep.chi_f)))
    return rd, rf


def run_structure_suite(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    res = ExperimentResult("structure", cfg.master_seed, cfg.digest)
    suite_covs: list[BlockCovariance] = []
    for sid in cfg.scenes:
        scene = cfg.scene(sid)
        ref = build_reference(scene, "B")
        kernels = assemble_kernels(scene.geometry, scene.grid, ref)
        T = cfg.trials

        samples = pmap(lambda t: draw_sample(scene, ref, scene.pert, t, cfg.master_seed), range(T), threads)
        R0 = estimate_covariance([leading_response(s, kernels) for s in samples])
        Ru = estimate_covariance(leading_snapshots(cfg, scene, ref, kernels, scene.pert, T, threads, uncoupled=True))
        suite_covs += [R0, Ru]
        cc, cu = chi_f(R0), chi_f(Ru)
        res.add_row("definition", scene=sid, trials=T, chi_coupled=cc, chi_uncoupled=cu, ratio=cc / cu)

        for count, value in zip(cfg.convergence_counts, uncoupled_chi_track(cfg, sid, threads=threads)):
            res.add_row("convergence", scene=sid, samples=int(count), chi_uncoupled=value)

        base = np.stack([leading_response(s, kernels).c for s in samples])
        for route in ("amplitude", "map"):
            for s, R in scale_scan(cfg, sid, route, base=base, threads=threads):
                suite_covs.append(R)
                res.add_row("scale_scan", scene=sid, route=route, scale=float(s), chi_f=chi_f(R), trace=R.trace)

        chis = []
        for ell in cfg.corr_grid:
            pert = scene.pert.with_corr_length(ell)
            R = estimate_covariance(leading_snapshots(cfg, scene, ref, kernels, pert, T, threads))
            suite_covs.append(R)
            chis.append(chi_f(R))
            res.add_row("corr_scan", scene=sid, corr_length=float(ell), chi_f=chis[-1], ratio_to_min=chis[-1] / chis[0])

        for ch in scene.channels:
            pert = scene.pert.only(ch)
            R = estimate_covariance(leading_snapshots(cfg, scene, ref, kernels, pert, T, threads))
            suite_covs.append(R)
            res.add_row("channel_scan", scene=sid, channel=ch, chi_f=chi_f(R))

        for s in cfg.proxy_scales:
            pert = scene.pert.with_scale(s)

            def both(t, pert=pert):
                smp = draw_sample(scene, ref, pert, t, cfg.master_seed)
                d = semi_nonlinear_response(smp, kernels, perturb_kernels(smp, kernels))
                return d.c0, d.c_semi

            pairs = pmap(both, range(T), threads)
            Rm = estimate_covariance([p[0] for p in pairs])
            Rf = estimate_covariance([p[1] for p in pairs])
            suite_covs += [Rm, Rf]
            res.add_row("proxy", scene=sid, scale=float(s), **proxy_gap(Rm, Rf))

        n_xi = max(cfg.convergence_counts)
        xi_samples = pmap(lambda t: draw_sample(scene, ref, scene.pert, t, cfg.master_seed), range(n_xi), threads)
        cx = chi_f_xi(xi_samples)
        res.add_row("saturation", scene=sid, samples=n_xi, chi_xi=cx, chi_R0=cc, kappa_prop=kappa_prop(cc, cx))

    rng = np.random.default_rng(RANDOM_PSD_SEED)
    randoms = [BlockCovariance(random_psd(rng), 6, 6) for _ in range(cfg.random_psd_count)]
    for source, covs in (("random_psd", randoms), ("suite", suite_covs)):
        rd, rf = identity_residuals(covs)
        res.add_row("identity", source=source, count=len(covs), max_resid_diag=rd, max_resid_full=rf)
    return res


# ---------------------------------------------------------------- consequence


def _eta_mean(smp, kernels) -> float:
    try:
        return float(np.mean(spectral_proxy(smp, kernels)))
    except EstimationError:
        return float("nan")


def processing_metrics(snaps, split: int, energy_frac: float = 0.9) -> dict:
    """Whitening error, capture and p_0.9 per structure on a train/eval split."""
    R_train = estimate_covariance(snaps[:split])
    R_eval = estimate_covariance(snaps[split:])
    out = {}
    for st in STRUCTURES:
        model = simplify(R_train, st)
        cap = subspace_capture(model, R_eval, energy_frac)
        out[st] = {"whitening_error": whitening_error(model, R_eval), "capture": cap.capture, "p_09": cap.k}
    return out


def run_consequence_suite(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    res = ExperimentResult("consequence", cfg.master_seed, cfg.digest)
    T = cfg.trials
    for sid in cfg.scenes:
        scene = cfg.scene(sid)
        pert = scene.pert
        baseline = None
        for kind in ("B",) + tuple(k for k in cfg.references if k != "B"):
            ref = reference_for(scene, kind, pert, cfg)
            kernels = assemble_kernels(scene.geometry, scene.grid, ref)

            def one(t, ref=ref, kernels=kernels):
                smp = draw_sample(scene, ref, pert, t, cfg.master_seed)
                d = semi_nonlinear_response(smp, kernels, perturb_kernels(smp, kernels))
                return d.c0, d.c_semi, float(np.linalg.norm(smp.delta_eps / EPS0)), _eta_mean(smp, kernels), smp

            out = pmap(one, range(T), threads)
            c0 = [o[0] for o in out]
            cs = [o[1] for o in out]
            etas = [o[3] for o in out]
            eta_mean, eta_fail = nanmean(etas)
            res.count_failure("eta_estimation", eta_fail)
            Rm, Rr = estimate_covariance(c0), estimate_covariance(cs)
            if kind == "B":
                baseline = (cs, Rr)
            resp_err = float(np.mean([(a - b).norm() / b.norm() for a, b in zip(cs, baseline[0])]))
            cov_err = float(np.linalg.norm(Rr.R - baseline[1].R) / np.linalg.norm(baseline[1].R))
            chi_main, chi_rich = chi_f(Rm), chi_f(Rr)
            finite = [e for e in etas if np.isfinite(e)]
            res.add_row("reference", scene=sid, reference=kind, response_error=resp_err, covariance_error=cov_err,
                        chi_main=chi_main, chi_rich=chi_rich, delta_chi=abs(chi_main - chi_rich),
                        mean_deps=float(np.mean([o[2] for o in out])), mean_eta=eta_mean,
                        p_eta_lt1=float(np.mean([e < 1 for e in finite])) if finite else float("nan"),
                        eta_failures=eta_fail)
            if kind == "B":
                cx = chi_f_xi([o[4] for o in out])
                rep = structure_report(Rm)
                res.add_row("scene_structure", scene=sid, chi_xi=cx, chi_R0=rep.chi_f, err_bd_full=rep.err_bd_full,
                            err_bd_diag=rep.err_bd_diag, kappa_prop=kappa_prop(rep.chi_f, cx), trace=rep.trace,
                            frob_norm=rep.frob_norm)
                for st, m in processing_metrics(c0, cfg.split, cfg.energy_frac).items():
                    res.add_row("processing", scene=sid, structure=st, **m)
    return res


SUITES = {
    "propagation": run_propagation_suite,
    "structure": run_structure_suite,
    "consequence": run_consequence_suite,
}
