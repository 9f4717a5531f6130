"""Per-trial channel responses and stacked space-frequency snapshots.

A snapshot stacks the M receive channels of each frequency block, so entry
``n * M + m`` holds receiver ``m`` at frequency ``n``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .propagation import KernelSet, PerturbedKernels, factor_operator, feedback_kernels, scattering_weights


@dataclass(frozen=True)
class SnapshotVector:
    c: np.ndarray  # (M*N,)
    M: int
    N: int

    def __post_init__(self):
        c = np.asarray(self.c, dtype=complex)
        if c.shape != (self.M * self.N,):
            raise ValueError(f"snapshot length {c.shape} does not match M*N = {self.M * self.N}")
        object.__setattr__(self, "c", c)

    @classmethod
    def from_matrix(cls, arr) -> "SnapshotVector":
        """Build from an (N, M) array indexed [frequency, receiver]."""
        arr = np.asarray(arr, dtype=complex)
        N, M = arr.shape
        return cls(arr.reshape(-1), M, N)

    def as_matrix(self) -> np.ndarray:
        return self.c.reshape(self.N, self.M)

    def block(self, n: int) -> np.ndarray:
        return self.c[n * self.M : (n + 1) * self.M]

    def __add__(self, other: "SnapshotVector") -> "SnapshotVector":
        return SnapshotVector(self.c + other.c, self.M, self.N)

    def __sub__(self, other: "SnapshotVector") -> "SnapshotVector":
        return SnapshotVector(self.c - other.c, self.M, self.N)

    def norm(self) -> float:
        return float(np.linalg.norm(self.c))


@dataclass(frozen=True)
class ResponseDecomposition:
    c0: SnapshotVector
    c1r: SnapshotVector
    c1t: SnapshotVector
    c_semi: SnapshotVector
    cross: SnapshotVector

    @property
    def c1(self) -> SnapshotVector:
        return self.c1r + self.c1t


@dataclass(frozen=True)
class ClosureMetrics:
    """NaN marks an undefined ratio; such trials are excluded from means and counted."""

    e_main: float
    e_1st: float
    I_1st: float
    eta_r: float
    eta_t: float
    rho_cross: float


def _weighted_contrast(sample, kernels: KernelSet) -> np.ndarray:
    return np.asarray(sample.xi) * kernels.areas[None, :]


def _contract(gr, w, gt) -> SnapshotVector:
    # gr (N, M, P), w (N, P), gt (N, P) -> sum_p gr * w * gt
    return SnapshotVector.from_matrix(np.einsum("nmp,np->nm", gr, w * gt))


def leading_response(sample, kernels: KernelSet, geom=None) -> SnapshotVector:
    """c0[m, n] = sum_p gr0 * xi * gt0 * A."""
    return _contract(kernels.gr0, _weighted_contrast(sample, kernels), kernels.gt0)


def feedback_response(sample, kernels: KernelSet, perturbed: PerturbedKernels, geom=None):
    """Receive-side and transmit-side first-order feedback (c1r, c1t)."""
    _check_pairing(sample, perturbed)
    w = _weighted_contrast(sample, kernels)
    c1r = _contract(perturbed.delta_gr, w, kernels.gt0)
    c1t = _contract(kernels.gr0, w, perturbed.delta_gt)
    return c1r, c1t


def bilinear_feedback_kernel(kernels: KernelSet, n: int) -> np.ndarray:
    """b[m, x, z] such that c1[m, n] = sum_{x,z} b xi_x A_x xi_z A_z."""
    h_t, h_r = feedback_kernels(kernels, n)
    b_r = h_r * kernels.gt0[n][None, :, None]
    b_t = kernels.gr0[n][:, :, None] * h_t[None, :, :]
    return b_r + b_t


def bilinear_feedback(sample, kernels: KernelSet) -> SnapshotVector:
    """Total first-order feedback c1r + c1t evaluated through the bilinear kernel."""
    w = _weighted_contrast(sample, kernels)
    out = np.empty((kernels.N, kernels.gr0.shape[1]), dtype=complex)
    for n in range(kernels.N):
        out[n] = np.einsum("mxz,x,z->m", bilinear_feedback_kernel(kernels, n), w[n], w[n])
    return SnapshotVector.from_matrix(out)


def semi_nonlinear_response(sample, kernels: KernelSet, perturbed: PerturbedKernels, geom=None) -> ResponseDecomposition:
    """Exact contrast with transmit/receive kernels kept to first order."""
    _check_pairing(sample, perturbed)
    w = _weighted_contrast(sample, kernels)
    c0 = _contract(kernels.gr0, w, kernels.gt0)
    c1r = _contract(perturbed.delta_gr, w, kernels.gt0)
    c1t = _contract(kernels.gr0, w, perturbed.delta_gt)
    cross = _contract(perturbed.delta_gr, w, perturbed.delta_gt)
    c_semi = _contract(kernels.gr0 + perturbed.delta_gr, w, kernels.gt0 + perturbed.delta_gt)
    return ResponseDecomposition(c0=c0, c1r=c1r, c1t=c1t, c_semi=c_semi, cross=cross)


def _check_pairing(sample, perturbed: PerturbedKernels) -> None:
    if perturbed.valid_for != sample.trial_id:
        raise ValueError(
            f"perturbed kernels belong to trial {perturbed.valid_for}, not {sample.trial_id}"
        )


def add_noise(c: SnapshotVector, noise_power: float, rng: np.random.Generator) -> SnapshotVector:
    """Add circular complex Gaussian noise of variance ``noise_power`` per entry."""
    if noise_power < 0:
        raise ValueError("noise power must be >= 0")
    if noise_power == 0:
        return c
    L = len(c.c)
    z = (rng.standard_normal(L) + 1j * rng.standard_normal(L)) * np.sqrt(noise_power / 2.0)
    return SnapshotVector(c.c + z, c.M, c.N)


def _ratio(a: float, b: float) -> float:
    return a / b if b > 0 else float("nan")


def closure_metrics(decomp: ResponseDecomposition) -> ClosureMetrics:
    semi = decomp.c_semi.norm()
    first = decomp.c0 + decomp.c1
    e_main = _ratio((decomp.c_semi - decomp.c0).norm(), semi)
    e_1st = _ratio((decomp.c_semi - first).norm(), semi)
    r2 = decomp.c1r.norm() ** 2
    t2 = decomp.c1t.norm() ** 2
    eta_r = _ratio(r2, r2 + t2)
    return ClosureMetrics(
        e_main=e_main,
        e_1st=e_1st,
        I_1st=_ratio(e_main, e_1st),
        eta_r=eta_r,
        eta_t=1.0 - eta_r,
        rho_cross=_ratio(decomp.cross.norm(), first.norm()),
    )


def ls_bistatic_response(sample, kernels: KernelSet, gr_exact: np.ndarray, gt_exact: np.ndarray) -> SnapshotVector:
    """Factored response with exact kernels (from the dense solver) in place of first-order ones.

    ``gr_exact`` is (N, M, P) and ``gt_exact`` is (N, P).
    """
    return _contract(np.asarray(gr_exact), _weighted_contrast(sample, kernels), np.asarray(gt_exact))


def exact_kernels(sample, kernels: KernelSet) -> tuple[np.ndarray, np.ndarray]:
    """Exact transmit field and receive kernels for all frequencies by dense solves."""
    N, M, P = kernels.gr0.shape
    gt = np.empty((N, P), dtype=complex)
    gr = np.empty((N, M, P), dtype=complex)
    for n in range(N):
        q = scattering_weights(sample.delta_eps[n], kernels, n)
        G = kernels.G[n]
        fac = factor_operator(G * q[None, :])
        gt[n] = fac.solve(kernels.gt0[n])
        # gr_true = gr0 + gr0 diag(q) (I - K)^-1 G
        gr[n] = kernels.gr0[n] + (kernels.gr0[n] * q[None, :]) @ fac.solve(G)
    return gr, gt
