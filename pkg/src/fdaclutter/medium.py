"""Random dispersive media: correlated fields, reference states and Monte Carlo draws."""

from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .constitutive import ALPHA_MAX, PARAM_NAMES, check_params, cole_cole, contrast

DEFAULT_STD = 0.03
M_OFFSET = 1.10
CLAMP_WARN_FRACTION = 0.01

# independent random-stream families, keyed into SeedSequence.spawn_key
STREAM_MEDIUM = 0
STREAM_UNCOUPLED = 1
STREAM_CALIBRATION = 2
STREAM_NOISE = 3

REFERENCE_KINDS = ("B", "M", "U")


class ConditioningError(RuntimeError):
    """Correlation matrix could not be factorized even with maximal jitter."""


class MissingCalibrationError(ValueError):
    pass


class InvalidSampleError(ValueError):
    pass


def stream(master_seed: int, *key: int) -> np.random.Generator:
    """Deterministic generator for (master_seed, key...); order-independent."""
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key)))


@dataclass(frozen=True)
class GridSpec:
    nx: int = 12
    nz: int = 8
    x_extent: tuple[float, float] = (0.0, 2.75)
    z_extent: tuple[float, float] = (0.35, 2.10)

    def __post_init__(self):
        if self.nx <= 0 or self.nz <= 0:
            raise ValueError("grid needs at least one patch along each axis")
        if not (self.x_extent[0] < self.x_extent[1] and self.z_extent[0] < self.z_extent[1]):
            raise ValueError("grid extents must be strictly ordered")

    @property
    def P(self) -> int:
        return self.nx * self.nz

    @property
    def dx(self) -> float:
        return (self.x_extent[1] - self.x_extent[0]) / self.nx

    @property
    def dz(self) -> float:
        return (self.z_extent[1] - self.z_extent[0]) / self.nz

    @property
    def patch_area(self) -> float:
        return self.dx * self.dz

    @property
    def centers(self) -> np.ndarray:
        """Patch midpoints (P, 2) as (x, z); x varies fastest."""
        xs = self.x_extent[0] + (np.arange(self.nx) + 0.5) * self.dx
        zs = self.z_extent[0] + (np.arange(self.nz) + 0.5) * self.dz
        X, Z = np.meshgrid(xs, zs)
        return np.column_stack([X.ravel(), Z.ravel()])

    @property
    def areas(self) -> np.ndarray:
        return np.full(self.P, self.patch_area)

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        return (
            (pts[:, 0] >= self.x_extent[0]) & (pts[:, 0] <= self.x_extent[1])
            & (pts[:, 1] >= self.z_extent[0]) & (pts[:, 1] <= self.z_extent[1])
        )


@dataclass(frozen=True)
class PerturbationSpec:
    active: tuple[str, ...] = ("eps_inf",)
    std: Mapping[str, float] = field(default_factory=dict)
    corr_length: float = 0.4
    scale: float = 1.0

    def __post_init__(self):
        bad = [c for c in self.active if c not in PARAM_NAMES]
        if bad:
            raise ValueError(f"unknown perturbation channel(s): {bad}")
        if any(v < 0 for v in self.std.values()):
            raise ValueError("perturbation std must be >= 0")
        if not self.corr_length > 0:
            raise ValueError("correlation length must be > 0")
        if self.scale < 0:
            raise ValueError("scale must be >= 0")

    def std_of(self, name: str) -> float:
        return float(self.std.get(name, DEFAULT_STD))

    def with_scale(self, scale: float) -> "PerturbationSpec":
        return replace(self, scale=float(scale))

    def with_corr_length(self, corr_length: float) -> "PerturbationSpec":
        return replace(self, corr_length=float(corr_length))

    def only(self, channel: str) -> "PerturbationSpec":
        return replace(self, active=(channel,))


@dataclass
class ReferenceState:
    kind: str
    eps_ref: np.ndarray  # (N, P) absolute
    eps_ref_bulk: np.ndarray  # (N,)
    mu_ref: np.ndarray  # (P, 5) parametric part of the reference


@dataclass
class MediumSample:
    trial_id: int
    delta_mu: np.ndarray  # (P, 5) or (N, P, 5) for the uncoupled construction
    mu_true: np.ndarray
    delta_eps: np.ndarray  # (N, P) absolute, relative to the reference state
    xi: np.ndarray  # (N, P)
    reference_kind: str
    coupled: bool = True
    clamped_fraction: float = 0.0
    warnings: tuple[str, ...] = ()


@functools.lru_cache(maxsize=64)
def correlation_factor(grid: GridSpec, corr_length: float) -> np.ndarray:
    """Lower Cholesky factor of the squared-exponential patch correlation."""
    if not corr_length > 0:
        raise ValueError("correlation length must be > 0")
    c = grid.centers
    d2 = np.sum((c[:, None, :] - c[None, :, :]) ** 2, axis=-1)
    C = np.exp(-d2 / (2.0 * corr_length**2))
    jitter = 1e-10
    while jitter <= 1e-6 * (1 + 1e-9):
        try:
            L = np.linalg.cholesky(C + jitter * np.eye(grid.P))
        except np.linalg.LinAlgError:
            jitter *= 10.0
            continue
        L.setflags(write=False)
        return L
    raise ConditioningError(f"correlation matrix not factorizable (corr_length={corr_length})")


def gaussian_field(grid: GridSpec, corr_length: float, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean unit-variance field with C(d) = exp(-d^2 / (2 l^2))."""
    L = correlation_factor(grid, float(corr_length))
    return L @ rng.standard_normal(grid.P)


def nominal_mu(scene) -> np.ndarray:
    return np.tile(scene.nominal.as_array(), (scene.grid.P, 1))


def build_reference(scene, kind: str, calibration_samples: Sequence[MediumSample] | None = None) -> ReferenceState:
    """Reference state B (nominal), M (eps_inf offset) or U (bias-reabsorbed B)."""
    omegas = scene.geometry.omegas
    mu_nom = nominal_mu(scene)
    if kind == "B":
        mu_ref, eps = mu_nom, cole_cole(omegas, mu_nom)
    elif kind == "M":
        mu_ref = mu_nom.copy()
        mu_ref[:, 0] *= M_OFFSET
        eps = cole_cole(omegas, mu_ref)
    elif kind == "U":
        if not calibration_samples:
            raise MissingCalibrationError("reference U needs calibration samples")
        if any(s.reference_kind != "B" for s in calibration_samples):
            raise ValueError("calibration samples must be drawn against reference B")
        mu_ref = mu_nom
        bias = np.mean([s.delta_eps for s in calibration_samples], axis=0)
        eps = cole_cole(omegas, mu_nom) + bias
    else:
        raise ValueError(f"unknown reference kind {kind!r}")
    if np.any(eps == 0) or not np.all(np.isfinite(eps)):
        raise ValueError("reference permittivity must be finite and nonzero")
    return ReferenceState(kind=kind, eps_ref=eps, eps_ref_bulk=eps.mean(axis=1), mu_ref=mu_ref)


def _perturb(mu_ref: np.ndarray, mu_nom: np.ndarray, pert: PerturbationSpec, rng_for_channel, grid: GridSpec):
    # fluctuations are sized by the nominal channel value and applied around
    # the reference parameters
    delta = np.zeros_like(mu_nom)
    for i, name in enumerate(PARAM_NAMES):
        if name not in pert.active:
            continue
        f = gaussian_field(grid, pert.corr_length, rng_for_channel(i))
        delta[:, i] = pert.scale * (pert.std_of(name) * mu_nom[:, i] * f)
    raw = mu_ref + delta
    mu_true = raw.copy()
    mu_true[:, 0] = np.maximum(mu_true[:, 0], 1.0)
    mu_true[:, 1] = np.maximum(mu_true[:, 1], 0.0)
    mu_true[:, 2] = np.maximum(mu_true[:, 2], 0.0)
    mu_true[:, 3] = np.clip(mu_true[:, 3], 0.0, ALPHA_MAX)
    mu_true[:, 4] = np.maximum(mu_true[:, 4], 0.0)
    clamped = mu_true != raw
    delta = np.where(clamped, mu_true - mu_ref, delta)
    try:
        check_params(mu_true)
    except ValueError as exc:
        raise InvalidSampleError(str(exc)) from exc
    return delta, mu_true, float(np.mean(np.any(clamped, axis=1)))


def _clamp_warnings(frac: float) -> tuple[str, ...]:
    if frac > CLAMP_WARN_FRACTION:
        return (f"clamped {100 * frac:.1f}% of patches",)
    return ()


def draw_sample(scene, ref: ReferenceState, pert: PerturbationSpec, trial_id: int, master_seed: int) -> MediumSample:
    """One Monte Carlo medium draw; a single spatial field per channel drives all frequencies.

    The true parameters are ``ref.mu_ref + delta_mu``; ``delta_eps`` is measured
    against ``ref.eps_ref`` (for U this includes the absorbed bias).
    """
    grid = scene.grid
    mu_nom = nominal_mu(scene)
    delta, mu_true, frac = _perturb(
        ref.mu_ref, mu_nom, pert, lambda i: stream(master_seed, STREAM_MEDIUM, trial_id, i), grid
    )
    eps_true = cole_cole(scene.geometry.omegas, mu_true)
    d_eps = eps_true - ref.eps_ref
    return MediumSample(
        trial_id=trial_id,
        delta_mu=delta,
        mu_true=mu_true,
        delta_eps=d_eps,
        xi=contrast(d_eps, ref.eps_ref),
        reference_kind=ref.kind,
        clamped_fraction=frac,
        warnings=_clamp_warnings(frac),
    )


def draw_uncoupled_sample(scene, ref: ReferenceState, pert: PerturbationSpec, trial_id: int, master_seed: int) -> MediumSample:
    """Zero-coupling construction: an independent field per frequency channel.

    Marginals per frequency match :func:`draw_sample`; cross-frequency
    covariance of the contrast vanishes in expectation.
    """
    grid = scene.grid
    omegas = scene.geometry.omegas
    mu_nom = nominal_mu(scene)
    N = len(omegas)
    deltas, mus = np.zeros((N, grid.P, 5)), np.zeros((N, grid.P, 5))
    d_eps = np.zeros((N, grid.P), dtype=complex)
    fracs = []
    for n in range(N):
        delta, mu_true, frac = _perturb(
            ref.mu_ref, mu_nom, pert, lambda i, n=n: stream(master_seed, STREAM_UNCOUPLED, trial_id, n, i), grid
        )
        deltas[n], mus[n] = delta, mu_true
        d_eps[n] = cole_cole(omegas[n : n + 1], mu_true)[0] - ref.eps_ref[n]
        fracs.append(frac)
    frac = float(max(fracs))
    return MediumSample(
        trial_id=trial_id,
        delta_mu=deltas,
        mu_true=mus,
        delta_eps=d_eps,
        xi=contrast(d_eps, ref.eps_ref),
        reference_kind=ref.kind,
        coupled=False,
        clamped_fraction=frac,
        warnings=_clamp_warnings(frac),
    )


def calibration_samples(scene, pert: PerturbationSpec, master_seed: int, count: int = 256) -> list[MediumSample]:
    """Draws against reference B from a dedicated stream, used to build U."""
    ref_b = build_reference(scene, "B")
    grid = scene.grid
    mu_nom = nominal_mu(scene)
    out = []
    for t in range(count):
        delta, mu_true, frac = _perturb(
            mu_nom, mu_nom, pert, lambda i, t=t: stream(master_seed, STREAM_CALIBRATION, t, i), grid
        )
        d_eps = cole_cole(scene.geometry.omegas, mu_true) - ref_b.eps_ref
        out.append(MediumSample(t, delta, mu_true, d_eps, contrast(d_eps, ref_b.eps_ref), "B",
                                clamped_fraction=frac, warnings=_clamp_warnings(frac)))
    return out
