"""Cole-Cole constitutive mapping, residual increments and normalized contrast.

All permittivities returned here are absolute (F/m); relative values only
appear in configuration and reports. Time convention is +j*omega*t, so loss
shows up with a negative imaginary part.
"""

from __future__ import annotations

from dataclasses import astuple, dataclass, replace

import numpy as np

EPS0 = 8.8541878128e-12
MU0 = 4e-7 * np.pi
ALPHA_MAX = 0.99

PARAM_NAMES = ("eps_inf", "delta_eps", "tau", "alpha", "sigma")


class InvalidParameterError(ValueError):
    """Cole-Cole parameters outside their admissible range."""


class DomainError(ValueError):
    """Argument outside the domain of a constitutive operation."""


@dataclass(frozen=True)
class ColeColeParams:
    eps_inf: float
    delta_eps: float = 0.0
    tau: float = 0.0
    alpha: float = 0.0
    sigma: float = 0.0

    def __post_init__(self):
        check_params(np.asarray(astuple(self), dtype=float))

    @property
    def eps_static(self) -> float:
        return self.eps_inf + self.delta_eps

    def as_array(self) -> np.ndarray:
        return np.asarray(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, values) -> "ColeColeParams":
        return cls(*(float(v) for v in np.asarray(values, dtype=float)))

    def shifted(self, **deltas: float) -> "ColeColeParams":
        """Return a copy with the named parameters incremented."""
        unknown = set(deltas) - set(PARAM_NAMES)
        if unknown:
            raise KeyError(f"unknown Cole-Cole parameter(s): {sorted(unknown)}")
        return replace(self, **{k: getattr(self, k) + v for k, v in deltas.items()})


def check_params(mu: np.ndarray) -> None:
    """Validate a parameter array whose last axis follows PARAM_NAMES."""
    mu = np.asarray(mu, dtype=float)
    if mu.shape[-1] != len(PARAM_NAMES):
        raise InvalidParameterError(f"expected last axis of length 5, got shape {mu.shape}")
    if not np.all(np.isfinite(mu)):
        raise InvalidParameterError("non-finite Cole-Cole parameter")
    eps_inf, d_eps, tau, alpha, sigma = np.moveaxis(mu, -1, 0)
    if np.any(eps_inf < 1.0):
        raise InvalidParameterError("eps_inf must be >= 1")
    if np.any(d_eps < 0.0):
        raise InvalidParameterError("delta_eps must be >= 0")
    if np.any(tau < 0.0):
        raise InvalidParameterError("tau must be >= 0")
    if np.any((alpha < 0.0) | (alpha > ALPHA_MAX)):
        raise InvalidParameterError(f"alpha must lie in [0, {ALPHA_MAX}]")
    if np.any(sigma < 0.0):
        raise InvalidParameterError("sigma must be >= 0")


def _relaxation_power(wt: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    # principal branch: (j*wt)^(1-a) = wt^(1-a) * exp(j*(1-a)*pi/2); the a == 0
    # case is kept as the literal j*wt so it coincides with the Debye form
    expo = 1.0 - alpha
    with np.errstate(divide="ignore", invalid="ignore"):
        general = np.where(wt > 0, wt**expo, 0.0) * np.exp(0.5j * np.pi * expo)
    return np.where(alpha == 0.0, 1j * wt, general)


def cole_cole(omega, mu) -> np.ndarray:
    """Vectorized absolute permittivity.

    ``omega`` has shape (N,), ``mu`` has shape (..., 5). The result has shape
    (N, ...).
    """
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    mu = np.asarray(mu, dtype=float)
    if np.any(~np.isfinite(omega)) or np.any(omega <= 0):
        raise DomainError("angular frequency must be finite and > 0")
    check_params(mu)
    eps_inf, d_eps, tau, alpha, sigma = np.moveaxis(mu, -1, 0)
    w = omega.reshape((-1,) + (1,) * eps_inf.ndim)
    relax = d_eps / (1.0 + _relaxation_power(w * tau, alpha))
    return EPS0 * (eps_inf + relax - 1j * sigma / (w * EPS0))


def cole_cole_eval(params: ColeColeParams, omega: float) -> complex:
    """Absolute complex permittivity of one parameter vector at one frequency."""
    if not np.isfinite(omega) or omega <= 0:
        raise DomainError(f"angular frequency must be finite and > 0, got {omega}")
    return complex(cole_cole([omega], params.as_array())[0])


def residual_increment(mu_ref, delta_mu, omega) -> np.ndarray | complex:
    """Exact increment F(omega; mu_ref + delta_mu) - F(omega; mu_ref).

    Accepts ColeColeParams or arrays with a trailing axis of 5. For scalar
    parameters and scalar omega a complex number is returned.
    """
    scalar = isinstance(mu_ref, ColeColeParams) and np.ndim(omega) == 0
    ref = mu_ref.as_array() if isinstance(mu_ref, ColeColeParams) else np.asarray(mu_ref, float)
    dmu = delta_mu.as_array() if isinstance(delta_mu, ColeColeParams) else np.asarray(delta_mu, float)
    out = cole_cole(omega, ref + dmu) - cole_cole(omega, ref)
    return complex(out.ravel()[0]) if scalar else out


def contrast(delta_eps, eps_ref):
    """Normalized contrast xi = delta_eps / eps_ref."""
    eps_ref = np.asarray(eps_ref)
    if np.any(eps_ref == 0):
        raise DomainError("reference permittivity must be nonzero")
    out = np.asarray(delta_eps) / eps_ref
    return complex(out) if out.ndim == 0 else out


def relative(eps) -> np.ndarray:
    """Absolute permittivity -> relative permittivity."""
    return np.asarray(eps) / EPS0
