"""Radial compactly-supported potentials and their rescalings.

A scatterer is a radial bump V(r) supported in the unit ball; the model
places rescaled copies eps^alpha * V(|y|/eps) at Poisson points.  This module
owns the profile functions, the rescaled potential/force evaluations, the
sup bounds B = sup|V| and B' = sup|F|, and the 2D radial Fourier (Hankel)
transform used by the diffusion-constant formulas.

Fourier convention (fixed here once for the whole package):
    f_hat(k) = integral f(x) exp(-i k.x) d^2x,
so for radial f:  f_hat(k) = 2*pi * int_0^inf f(r) J0(k r) r dr.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import integrate, special

__all__ = [
    "PotentialModel",
    "power_bump",
    "cosine_bump",
    "make_potential",
    "default_potential",
    "rescaled_potential",
    "force",
    "hankel_transform",
    "sup_bounds",
]

# Profile ids understood by the compiled kernels (see _kernels.py).
KERNEL_POWER = 0  # V(r) = (1 - r^2)^p        param = p
KERNEL_COS = 1    # V(r) = cos^2(pi r / 2)    param unused
KERNEL_NONE = -1  # pure-Python profile; kernel-backed operations reject it


@dataclass(frozen=True)
class PotentialModel:
    """Immutable radial potential with support in the unit ball.

    ``profile``/``profile_derivative``/``profile_second_derivative`` take a
    radius array (any shape, r >= 0) and return V, V', V''; they must vanish
    identically for r >= 1.  ``kernel_id``/``kernel_param`` select the same
    profile inside the compiled kernels; models built from a bare callable
    get ``kernel_id = KERNEL_NONE`` and work with every quadrature-based
    operation but not with the trajectory kernels.
    """

    name: str
    profile: Callable[[np.ndarray], np.ndarray]
    profile_derivative: Callable[[np.ndarray], np.ndarray]
    profile_second_derivative: Optional[Callable[[np.ndarray], np.ndarray]]
    sup_V: float
    sup_force: float
    kernel_id: int = KERNEL_NONE
    kernel_param: float = 0.0
    support_radius: float = 1.0
    bound_refinement: int = 1 << 17  # grid points behind sup_V / sup_force

    def __post_init__(self):
        if self.support_radius != 1.0:
            raise ValueError("support radius is fixed to 1 in this model family")


def _grid_sup(f, n: int) -> float:
    # Nested dyadic grids: the sup over k/n, n a power of two, is monotone
    # non-decreasing as n doubles.
    n2 = 1 << max(4, int(np.ceil(np.log2(n))))
    r = np.linspace(0.0, 1.0, n2 + 1)
    return float(np.max(np.abs(f(r))))


def power_bump(p: int = 2) -> PotentialModel:
    """V(r) = (1 - r^2)^p on r < 1 (default p = 2: the package default).

    C^1 at the support edge for p >= 2, with analytic derivatives; the sup
    bounds have closed forms (B = 1, B' = max_r 2 p r (1-r^2)^(p-1) attained
    at r = 1/sqrt(2p - 1)) which the dyadic grid search reproduces.
    """
    if p < 2:
        raise ValueError("need p >= 2 for a C^1 profile")
    p = int(p)

    def V(r):
        r = np.asarray(r, dtype=float)
        u = 1.0 - r * r
        return np.where(r < 1.0, np.maximum(u, 0.0) ** p, 0.0)

    def dV(r):
        r = np.asarray(r, dtype=float)
        u = np.maximum(1.0 - r * r, 0.0)
        return np.where(r < 1.0, -2.0 * p * r * u ** (p - 1), 0.0)

    def d2V(r):
        r = np.asarray(r, dtype=float)
        u = np.maximum(1.0 - r * r, 0.0)
        val = -2.0 * p * u ** (p - 2) * (1.0 - (2 * p - 1) * r * r)
        return np.where(r < 1.0, val, 0.0)

    rstar = 1.0 / np.sqrt(2.0 * p - 1.0)
    b_prime = 2.0 * p * rstar * (1.0 - rstar * rstar) ** (p - 1)
    return PotentialModel(
        name=f"power{p}",
        profile=V,
        profile_derivative=dV,
        profile_second_derivative=d2V,
        sup_V=1.0,
        sup_force=float(b_prime),
        kernel_id=KERNEL_POWER,
        kernel_param=float(p),
    )


def cosine_bump() -> PotentialModel:
    """V(r) = cos^2(pi r / 2) on r < 1: a smooth (C^1 at the edge) alternative."""

    def V(r):
        r = np.asarray(r, dtype=float)
        return np.where(r < 1.0, np.cos(0.5 * np.pi * r) ** 2, 0.0)

    def dV(r):
        r = np.asarray(r, dtype=float)
        return np.where(r < 1.0, -0.5 * np.pi * np.sin(np.pi * r), 0.0)

    def d2V(r):
        r = np.asarray(r, dtype=float)
        return np.where(r < 1.0, -0.5 * np.pi * np.pi * np.cos(np.pi * r), 0.0)

    return PotentialModel(
        name="cos2",
        profile=V,
        profile_derivative=dV,
        profile_second_derivative=d2V,
        sup_V=1.0,
        sup_force=0.5 * np.pi,  # |V'| = (pi/2)|sin(pi r)|, max at r = 1/2
        kernel_id=KERNEL_COS,
    )


_BUILTINS = {
    "power2": lambda: power_bump(2),
    "power3": lambda: power_bump(3),
    "cos2": cosine_bump,
}

_default_cache: list = []


def make_potential(name: str, **params) -> PotentialModel:
    """Look up a built-in profile by name ('power2', 'power3', 'cos2', 'power')."""
    if name == "power":
        return power_bump(int(params.get("p", 2)))
    if name in _BUILTINS:
        if params:
            raise ValueError(f"profile {name!r} takes no parameters")
        return _BUILTINS[name]()
    raise ValueError(f"unknown profile {name!r}; have {sorted(_BUILTINS) + ['power']}")


def default_potential() -> PotentialModel:
    """The package default profile, V(r) = (1 - r^2)^2 (cached instance)."""
    if not _default_cache:
        _default_cache.append(power_bump(2))
    return _default_cache[0]


def _check_eps_alpha(eps: float, alpha: float) -> None:
    if not (np.isfinite(eps) and eps > 0.0):
        raise ValueError(f"eps must be a positive finite real, got {eps}")
    if not (np.isfinite(alpha) and 0.0 < alpha <= 0.5):
        raise ValueError(f"alpha must lie in (0, 1/2], got {alpha}")


def _check_point(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != 2:
        raise ValueError("expected 2D points with trailing axis of length 2")
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite input components")
    return y


def rescaled_potential(m: PotentialModel, eps: float, alpha: float, y) -> np.ndarray:
    """eps^alpha * V(|y|/eps); zero outside the radius-eps support.

    ``y`` may be a single point or an (..., 2) array.  Returns a scalar for a
    single point.
    """
    _check_eps_alpha(eps, alpha)
    y = _check_point(y)
    r = np.linalg.norm(y, axis=-1) / eps
    out = eps**alpha * m.profile(r)
    return float(out) if out.ndim == 0 else out


def force(m: PotentialModel, eps: float, alpha: float, y) -> np.ndarray:
    """-grad of the rescaled potential: -eps^(alpha-1) V'(|y|/eps) y/|y|.

    Zero at the center and outside the support (V' vanishes at both ends, so
    the gradient extends continuously by zero).
    """
    _check_eps_alpha(eps, alpha)
    y = _check_point(y)
    rad = np.linalg.norm(y, axis=-1)
    r = rad / eps
    with np.errstate(invalid="ignore", divide="ignore"):
        mag = np.where(rad > 0.0, -(eps ** (alpha - 1.0)) * m.profile_derivative(r) / np.where(rad > 0.0, rad, 1.0), 0.0)
    out = y * mag[..., None]
    return out


def hankel_transform(m: PotentialModel, k: float) -> float:
    """V_hat(k) = 2*pi * int_0^1 V(r) J0(k r) r dr by adaptive quadrature.

    Relative tolerance 1e-10; a quadrature whose error estimate misses that
    target raises instead of returning a silently degraded value.  ``k`` may
    be a scalar or an array (evaluated pointwise).
    """
    karr = np.atleast_1d(np.asarray(k, dtype=float))
    if not np.all(np.isfinite(karr)) or np.any(karr < 0.0):
        raise ValueError("k must be finite and >= 0")
    out = np.empty_like(karr)
    for i, ki in enumerate(karr):
        val, err = integrate.quad(
            lambda r: m.profile(r) * special.j0(ki * r) * r,
            0.0,
            1.0,
            epsabs=1e-14,
            epsrel=1e-12,
            limit=max(200, int(ki / 2) + 50),
        )
        val *= 2.0 * np.pi
        err *= 2.0 * np.pi
        if err > max(1e-10 * abs(val), 1e-12):
            raise RuntimeError(
                f"Hankel quadrature did not converge at k={ki}: "
                f"estimate {val}, error bound {err}"
            )
        out[i] = val
    return float(out[0]) if np.isscalar(k) or np.ndim(k) == 0 else out


def sup_bounds(m: PotentialModel, refinement: int | None = None) -> tuple[float, float]:
    """(B, B') = grid suprema of |V| and |V'| on a dyadic grid.

    ``refinement`` is rounded up to a power of two so refining the grid can
    only grow the reported bounds.  With no argument, returns the values
    frozen at construction (analytic where available).
    """
    if refinement is None:
        return m.sup_V, m.sup_force
    b = _grid_sup(m.profile, refinement)
    bp = _grid_sup(m.profile_derivative, refinement)
    return b, bp
