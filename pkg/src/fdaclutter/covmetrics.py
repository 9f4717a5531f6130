"""Snapshot covariance estimation and frequency-block structure metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .medium import ConditioningError
from .constitutive import MU0
from .propagation import green_scalar

LOADING = 1e-8
PSD_TOL = 1e-10
STRUCTURES = ("full", "block", "diag")


class UndefinedMetricError(ValueError):
    """Metric denominator is zero."""


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class BlockCovariance:
    R: np.ndarray  # (M*N, M*N)
    M: int
    N: int
    sample_count: int = 0

    def __post_init__(self):
        R = np.asarray(self.R, dtype=complex)
        L = self.M * self.N
        if R.shape != (L, L):
            raise ValueError(f"covariance shape {R.shape} does not match M*N = {L}")
        object.__setattr__(self, "R", R)

    def block(self, n: int, k: int) -> np.ndarray:
        M = self.M
        return self.R[n * M : (n + 1) * M, k * M : (k + 1) * M]

    def scaled(self, s: float) -> "BlockCovariance":
        return BlockCovariance(s * self.R, self.M, self.N, self.sample_count)

    @property
    def trace(self) -> float:
        return float(np.real(np.trace(self.R)))


@dataclass(frozen=True)
class StructureReport:
    chi_f: float
    err_bd_full: float
    err_bd_diag: float
    diag_energy: float
    offdiag_energy: float
    trace: float
    frob_norm: float


@dataclass(frozen=True)
class CaptureResult:
    capture: float
    k: int


def _as_matrix(snapshots) -> np.ndarray:
    if isinstance(snapshots, np.ndarray):
        return np.asarray(snapshots, dtype=complex)
    return np.stack([getattr(s, "c", s) for s in snapshots]).astype(complex)


def estimate_covariance(snapshots, M: int | None = None, N: int | None = None) -> BlockCovariance:
    """Unbiased sample covariance of stacked snapshots (rows are trials).

    ``snapshots`` is a sequence of SnapshotVector or a (T, M*N) array; in the
    array case M and N must be given.
    """
    X = _as_matrix(snapshots)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InsufficientDataError("covariance estimation needs at least 2 snapshots")
    if M is None or N is None:
        first = snapshots[0]
        M, N = first.M, first.N
    Xc = X - X.mean(axis=0)
    R = Xc.T @ Xc.conj() / (X.shape[0] - 1)
    R = 0.5 * (R + R.conj().T)
    return BlockCovariance(R, M, N, X.shape[0])


def _split(R: BlockCovariance) -> tuple[float, float]:
    A = R.R.reshape(R.N, R.M, R.N, R.M)
    e = np.sum(np.abs(A) ** 2, axis=(1, 3))  # (N, N) block energies
    diag = float(np.trace(e))
    return diag, float(e.sum() - diag)


def block_diagonal(R: BlockCovariance) -> BlockCovariance:
    """bd(R): keep only the frequency blocks on the diagonal."""
    mask = np.kron(np.eye(R.N), np.ones((R.M, R.M)))
    return BlockCovariance(R.R * mask, R.M, R.N, R.sample_count)


def chi_f(R: BlockCovariance) -> float:
    """Off-diagonal over diagonal frequency-block Frobenius energy."""
    diag, off = _split(R)
    if diag <= 0:
        raise UndefinedMetricError("zero diagonal block energy")
    return off / diag


def block_diag_errors(R: BlockCovariance) -> dict:
    diag, off = _split(R)
    if diag <= 0:
        raise UndefinedMetricError("zero diagonal block energy")
    return {"err_bd_full": float(np.sqrt(off / (diag + off))), "err_bd_diag": float(np.sqrt(off / diag))}


def block_diag_errors_direct(R: BlockCovariance) -> dict:
    """Same errors evaluated from the explicit matrices rather than block energies."""
    bd = block_diagonal(R).R
    d = np.linalg.norm(R.R - bd)
    nbd = np.linalg.norm(bd)
    if nbd == 0:
        raise UndefinedMetricError("zero diagonal block energy")
    return {"err_bd_full": float(d / np.linalg.norm(R.R)), "err_bd_diag": float(d / nbd)}


def structure_report(R: BlockCovariance) -> StructureReport:
    diag, off = _split(R)
    if diag <= 0:
        raise UndefinedMetricError("zero diagonal block energy")
    direct = block_diag_errors_direct(R)
    return StructureReport(
        chi_f=off / diag,
        err_bd_full=direct["err_bd_full"],
        err_bd_diag=direct["err_bd_diag"],
        diag_energy=diag,
        offdiag_energy=off,
        trace=R.trace,
        frob_norm=float(np.linalg.norm(R.R)),
    )


def chi_f_xi(samples: Sequence) -> float:
    """chi_f of the contrast covariance with one P-sized block per frequency."""
    X = np.stack([np.asarray(getattr(s, "xi", s)).reshape(-1) for s in samples])
    N, P = np.shape(getattr(samples[0], "xi", samples[0]))
    return chi_f(estimate_covariance(X, M=P, N=N))


def kappa_prop(chi_obs: float, chi_xi: float) -> float:
    if not chi_xi > 0:
        raise UndefinedMetricError("chi_f of the contrast is zero")
    return chi_obs / chi_xi


def proxy_gap(R_main: BlockCovariance, R_full: BlockCovariance) -> dict:
    if R_main.R.shape != R_full.R.shape:
        raise ValueError("covariance shapes differ")
    try:
        cf = chi_f(R_full)
        dchi = abs(chi_f(R_main) - cf) / cf if cf > 0 else float("nan")
    except UndefinedMetricError:
        dchi = float("nan")
    nf = np.linalg.norm(R_full.R)
    frob = float(np.linalg.norm(R_main.R - R_full.R) / nf) if nf > 0 else float("nan")
    return {"delta_chi_rel": float(dchi), "frob_proxy_error": frob}


def simplify(R: BlockCovariance, structure: str) -> BlockCovariance:
    """Full (unchanged), Block (cross-frequency blocks zeroed) or Diag (main diagonal only)."""
    if structure == "full":
        return R
    if structure == "block":
        return block_diagonal(R)
    if structure == "diag":
        return BlockCovariance(np.diag(np.diag(R.R)), R.M, R.N, R.sample_count)
    raise ValueError(f"unknown covariance structure {structure!r}")


def sorted_eigh(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs by descending eigenvalue; each eigenvector's first nonzero
    component is made real and positive so results are reproducible."""
    w, V = np.linalg.eigh(A)
    order = np.argsort(-w, kind="stable")
    w, V = w[order], V[:, order]
    for j in range(V.shape[1]):
        nz = np.flatnonzero(np.abs(V[:, j]) > 1e-12 * np.abs(V[:, j]).max())
        if len(nz):
            ph = V[nz[0], j] / abs(V[nz[0], j])
            V[:, j] = V[:, j] / ph
    return w, V


def whitening_error(R_model: BlockCovariance, eval_data) -> float:
    """||W R_eval W^H - I||_F with W = (R_model + loading)^(-1/2).

    ``eval_data`` is either a BlockCovariance or the evaluation snapshots.
    """
    R_eval = eval_data if isinstance(eval_data, BlockCovariance) else estimate_covariance(eval_data)
    A = R_model.R
    L = A.shape[0]
    load = LOADING * float(np.real(np.trace(A))) / L
    w, V = np.linalg.eigh(A + load * np.eye(L))
    if not np.all(w > 0):
        raise ConditioningError("model covariance is indefinite after diagonal loading")
    W = (V / np.sqrt(w)) @ V.conj().T
    return float(np.linalg.norm(W @ R_eval.R @ W.conj().T - np.eye(L)))


def energy_count(R: BlockCovariance, energy_frac: float = 0.9) -> int:
    """Smallest number of leading eigenvalues holding ``energy_frac`` of the trace."""
    w = np.clip(sorted_eigh(R.R)[0], 0.0, None)
    total = w.sum()
    if total <= 0:
        raise UndefinedMetricError("covariance has zero energy")
    cum = np.cumsum(w) / total
    return int(np.searchsorted(cum, energy_frac - 1e-12) + 1)


def subspace_capture(R_model: BlockCovariance, R_eval: BlockCovariance, energy_frac: float = 0.9) -> CaptureResult:
    if R_model.R.shape != R_eval.R.shape:
        raise ValueError("covariance shapes differ")
    k = energy_count(R_eval, energy_frac)
    w_eval = np.clip(sorted_eigh(R_eval.R)[0], 0.0, None)
    U = sorted_eigh(R_model.R)[1][:, :k]
    num = float(np.real(np.trace(U.conj().T @ R_eval.R @ U)))
    den = float(w_eval[:k].sum())
    return CaptureResult(capture=float(np.clip(num / den, 0.0, 1.0)), k=k)


def _transmit_kernels_all(kernels, geom, grid) -> np.ndarray:
    """gt0 for every transmitter at every carrier, shape (N, Mt, P)."""
    out = np.empty((kernels.N, len(geom.tx), kernels.P), dtype=complex)
    for n, w in enumerate(kernels.omegas):
        out[n] = -1j * w * MU0 * green_scalar(geom.tx[:, None, :], grid.centers[None, :, :], w, kernels.eps_bulk[n])
    return out


def _index_sensitivity(A: np.ndarray, axis: int) -> float:
    S = np.moveaxis(A, axis, 0)
    if S.shape[0] < 2:
        raise UndefinedMetricError("index sensitivity needs at least two indices")
    vals = []
    for i in range(S.shape[0] - 1):
        a, b = np.linalg.norm(S[i]), np.linalg.norm(S[i + 1])
        vals.append(np.linalg.norm(S[i + 1] - S[i]) / (0.5 * (a + b)))
    return float(np.mean(vals))


def skeleton_diagnostics(kernels, geom, grid) -> dict:
    """Energy and index sensitivity of the zeroth-order skeleton gr0 * gt0.

    Energies use the frequency-diverse pairing (transmitter n at carrier n);
    index sensitivities use every transmitter at every carrier, so the
    frequency, receive and transmit axes are separable.
    """
    a0 = kernels.a0()
    e = np.abs(a0) ** 2
    gt_all = _transmit_kernels_all(kernels, geom, grid)
    A = kernels.gr0[:, :, None, :] * gt_all[:, None, :, :]  # (N, M, Mt, P)
    return {
        "mean_energy": float(e.mean()),
        "peak_energy": float(e.max()),
        "delta_f": _index_sensitivity(A, 0),
        "delta_r": _index_sensitivity(A, 1),
        "delta_t": _index_sensitivity(A, 2),
    }


def reference_change_diagnostics(kernels_b, kernels_x) -> dict:
    """Per-frequency relative Frobenius change, averaged over frequencies."""
    if kernels_b.gr0.shape != kernels_x.gr0.shape:
        raise ValueError("kernel sets have different geometry")

    def rel(x, b):
        return float(np.mean([np.linalg.norm(x[n] - b[n]) / np.linalg.norm(b[n]) for n in range(len(b))]))

    a_b, a_x = kernels_b.a0(), kernels_x.a0()
    return {
        "gt0_change": rel(kernels_x.gt0, kernels_b.gt0),
        "gr0_change": rel(kernels_x.gr0, kernels_b.gr0),
        "a0_change": rel(a_x, a_b),
        "energy_ratio": float(np.mean(np.abs(a_x) ** 2) / np.mean(np.abs(a_b) ** 2)),
    }
