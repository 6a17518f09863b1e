"""Reference quantities for the Riesz kernel ``|x - y|**(alpha - dim)``.

Potential of the unit ball, its energy, the spherical eigenvalues of the
associated quadratic form, and the comparison constants used by the
verification and reduction machinery.  Everything here is a closed form or a
one dimensional adaptive quadrature; the heavy set-energy quadratures live in
:mod:`rieszstab.energy`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.interpolate import PchipInterpolator
from scipy.special import betainc, gammaln

from .exceptions import NonConvergenceError, PreconditionError

__all__ = [
    "KernelParams",
    "ReferenceConstants",
    "unit_ball_volume",
    "constants_for",
    "psi",
    "psi_derivative",
    "tau1",
    "tau2",
    "mu",
    "mu_limit",
    "ball_energy",
    "sparse_deficit_bound",
]

#: Half width of the tabulation step for the ball potential (table spans [0, 4]).
PSI_TABLE_STEP = 1.0 / 1024.0
PSI_TABLE_TMAX = 4.0
#: Relative tolerance of the adaptive quadrature behind ``psi``.
PSI_QUAD_RTOL = 1e-8
#: Startup consistency requirement between the eigenvalue identity and the
#: quadrature route to the ball energy.
BALL_ENERGY_XCHECK_RTOL = 5e-3


def unit_ball_volume(dim: int) -> float:
    """Volume of the unit ball in ``dim`` dimensions."""
    return math.pi ** (dim / 2.0) / math.gamma(dim / 2.0 + 1.0)


@dataclass(frozen=True)
class KernelParams:
    """Dimension and kernel exponent, validated on construction.

    The kernel is ``|x - y|**(alpha - dim)`` with ``dim >= 2`` and
    ``alpha`` strictly between 1 and ``dim``.
    """

    dim: int
    alpha: float

    def __post_init__(self):
        if not isinstance(self.dim, (int, np.integer)) or self.dim < 2:
            raise PreconditionError(f"dim must be an integer >= 2, got {self.dim!r}")
        if not (1.0 < self.alpha < float(self.dim)):
            raise PreconditionError(
                f"alpha must lie in (1, dim) = (1, {self.dim}), got {self.alpha!r}"
            )

    @property
    def omega(self) -> float:
        """Unit ball volume for this dimension."""
        return unit_ball_volume(self.dim)

    @property
    def sphere_area(self) -> float:
        """Surface measure of the unit sphere, ``dim * omega``."""
        return self.dim * self.omega


def _cap_profile(p: KernelParams, c):
    """``G(c) = integral_c^1 (1 - x^2)^((dim-3)/2) dx`` for ``c`` in [-1, 1].

    This is the angular measure factor of a spherical cap with cosine ``c``;
    closed form through the regularized incomplete beta function.
    """
    n = p.dim
    c = np.asarray(c, dtype=float)
    total = math.sqrt(math.pi) * math.gamma((n - 1) / 2.0) / math.gamma(n / 2.0)
    # split at c = 0 because the x -> x^2 substitution folds the sign
    inc = betainc(0.5, (n - 1) / 2.0, np.clip(c, -1.0, 1.0) ** 2)
    pos = 0.5 * total * (1.0 - inc)
    neg = 0.5 * total * (1.0 + inc)
    return np.where(c >= 0.0, pos, neg)


def _psi_integrand(p: KernelParams, s, t):
    """Shell density of the ball potential at radius ``s`` from a point at ``t``."""
    n = p.dim
    ring = (n - 1) * unit_ball_volume(n - 1)
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        cosang = (t * t + s * s - 1.0) / (2.0 * t * s)
    cosang = np.where(s > 0.0, cosang, -np.inf)
    cosang = np.clip(cosang, -1.0, 1.0)
    return ring * s ** (p.alpha - 1.0) * _cap_profile(p, cosang)


def psi(p: KernelParams, t):
    """Potential of the unit ball, ``integral_B |y - x|**(alpha-dim) dx`` at ``|x| = t``.

    Exact dimension reduction: Fubini over the spherical shells around the
    evaluation point leaves a single radial integral whose angular factor is
    the closed-form cap profile.  The radial integral is done by adaptive
    Gauss-Kronrod quadrature at relative tolerance 1e-8, with the kink at
    ``s = |1 - t|`` split out.  ``t`` may be a scalar or an array.

    Strictly decreasing in ``t``; ``psi(0) = dim * omega / alpha``.
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr < 0.0):
        raise PreconditionError("psi requires t >= 0")
    out = np.empty_like(t_arr)
    for i, ti in enumerate(t_arr):
        out[i] = _psi_scalar(p, float(ti))
    return out[0] if np.isscalar(t) or np.asarray(t).ndim == 0 else out


def _psi_scalar(p: KernelParams, t: float) -> float:
    if t < 1e-12:
        return p.sphere_area / p.alpha
    lo, hi = max(0.0, t - 1.0), t + 1.0
    kink = abs(1.0 - t)
    pts = [kink] if lo < kink < hi else None
    val, err = integrate.quad(
        lambda s: float(_psi_integrand(p, s, t)),
        lo,
        hi,
        points=pts,
        epsabs=1e-13,
        epsrel=PSI_QUAD_RTOL,
        limit=200,
    )
    if not math.isfinite(val) or (abs(val) > 1e-12 and err > 1e-4 * abs(val)):
        raise NonConvergenceError(
            f"ball potential quadrature did not converge at t={t}", residual=err
        )
    return val


def psi_derivative(p: KernelParams, t, h: float = 1e-5):
    """Central finite difference of :func:`psi`; negative for ``t > 0``."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.empty_like(t_arr)
    for i, ti in enumerate(t_arr):
        if ti < h:
            # psi is even in t, so the derivative vanishes at the origin
            out[i] = (_psi_scalar(p, ti + h) - _psi_scalar(p, abs(ti - h))) / (2.0 * h)
        else:
            out[i] = (_psi_scalar(p, ti + h) - _psi_scalar(p, ti - h)) / (2.0 * h)
    return out[0] if np.isscalar(t) or np.asarray(t).ndim == 0 else out


def _psi_table(p: KernelParams):
    """Tabulate psi on [0, 4] with step 1/1024 and fit a monotone cubic.

    All table entries are integrated at once with ``quad_vec`` on the two
    smooth pieces (below and above the kink radius), mapped to a common
    normalized coordinate.
    """
    tgrid = np.arange(0.0, PSI_TABLE_TMAX + 0.5 * PSI_TABLE_STEP, PSI_TABLE_STEP)
    tpos = tgrid[1:]
    lo = np.maximum(0.0, tpos - 1.0)
    hi = tpos + 1.0
    kink = np.clip(np.abs(1.0 - tpos), lo, hi)

    def piece(a, b):
        span = b - a
        def f(x):
            return _psi_integrand(p, a + span * x, tpos) * span
        val, _ = integrate.quad_vec(f, 0.0, 1.0, epsabs=1e-13, epsrel=PSI_QUAD_RTOL)
        return val

    vals = np.empty_like(tgrid)
    vals[0] = p.sphere_area / p.alpha
    vals[1:] = piece(lo, kink) + piece(kink, hi)
    if np.any(np.diff(vals) >= 0.0):
        raise NonConvergenceError("tabulated ball potential is not strictly decreasing")
    return PchipInterpolator(tgrid, vals, extrapolate=False)


@dataclass(frozen=True)
class ReferenceConstants:
    """Eagerly built reference data for one ``(dim, alpha)`` pair.

    Holds the ball energy, the first eigenvalue, and the tabulated ball
    potential with its monotone cubic interpolant.  Construction
    cross-validates the eigenvalue identity for the ball energy against the
    quadrature route ``dim * omega * integral_0^1 t^(dim-1) psi(t) dt`` and
    refuses to build if they disagree beyond 0.5% relative.
    """

    params: KernelParams
    omega: float
    ball_energy: float
    mu1: float
    psi_interp: PchipInterpolator = field(repr=False)

    def psi(self, t):
        """Interpolated ball potential; falls back to quadrature beyond the table."""
        t_arr = np.asarray(t, dtype=float)
        out = self.psi_interp(np.clip(t_arr, 0.0, PSI_TABLE_TMAX))
        far = t_arr > PSI_TABLE_TMAX
        if np.any(far):
            out = np.where(far, psi(self.params, np.where(far, t_arr, 1.0)), out)
        return out


@lru_cache(maxsize=16)
def _constants_cached(dim: int, alpha: float) -> ReferenceConstants:
    p = KernelParams(dim, alpha)
    interp = _psi_table(p)
    fb = ball_energy(p)
    # independent route: F(B) = integral_B psi(|y|) dy through the table
    x, w = np.polynomial.legendre.leggauss(200)
    tq = 0.5 * (x + 1.0)
    quad_fb = p.sphere_area * 0.5 * np.sum(w * tq ** (p.dim - 1) * interp(tq))
    rel = abs(quad_fb - fb) / fb
    if rel > BALL_ENERGY_XCHECK_RTOL:
        raise NonConvergenceError(
            f"ball energy cross-check failed for dim={dim}, alpha={alpha}: "
            f"identity {fb:.6g} vs quadrature {quad_fb:.6g}",
            residual=rel,
        )
    return ReferenceConstants(
        params=p, omega=p.omega, ball_energy=fb, mu1=float(mu(p, 1)), psi_interp=interp
    )


def constants_for(p: KernelParams) -> ReferenceConstants:
    """Cached :class:`ReferenceConstants` for ``p``."""
    return _constants_cached(p.dim, float(p.alpha))


def tau1(p: KernelParams, m):
    """Sharp bound on a potential by set volume alone.

    ``sup_x integral_H |y-x|**(alpha-dim) dy <= tau1(|H|)`` with equality for
    a centered ball: ``tau1(m) = (dim * omega^(1-alpha/dim) / alpha) * m^(alpha/dim)``.
    """
    m = np.asarray(m, dtype=float)
    if np.any(m < 0.0):
        raise PreconditionError("tau1 requires m >= 0")
    n, a = p.dim, p.alpha
    return (n * p.omega ** (1.0 - a / n) / a) * m ** (a / n)


def tau2(p: KernelParams, m):
    """Lipschitz-type transport constant for potentials of sets of volume ``m``.

    Equivalent closed form of
    ``(dim - alpha + 1) * integral_{B(r)} dx / min(|x|^(dim-alpha+1), |x|^(dim-alpha))``
    with ``r = (m / omega)^(1/dim)``.
    """
    m = np.asarray(m, dtype=float)
    if np.any(m <= 0.0):
        raise PreconditionError("tau2 requires m > 0")
    n, a = p.dim, p.alpha
    r = (m / p.omega) ** (1.0 / n)
    inner = np.minimum(r, 1.0) ** (a - 1.0) / (a - 1.0)
    outer = np.maximum(0.0, r ** a - 1.0) / a
    return (n - a + 1.0) * n * p.omega * (inner + outer)


def mu(p: KernelParams, k):
    """Eigenvalue of the spherical Riesz quadratic form on harmonics of degree ``k``.

    Evaluated through log-gamma differences; ``mu(0) = 0`` exactly, the
    sequence is strictly increasing in ``k`` and bounded by :func:`mu_limit`.
    """
    k_arr = np.asarray(k)
    if np.any(k_arr < 0) or not np.issubdtype(k_arr.dtype, np.integer):
        if np.any(np.asarray(k, dtype=float) != np.floor(np.asarray(k, dtype=float))):
            raise PreconditionError("harmonic degree k must be a nonnegative integer")
    kf = np.asarray(k, dtype=float)
    if np.any(kf < 0):
        raise PreconditionError("harmonic degree k must be a nonnegative integer")
    n, a = p.dim, p.alpha
    pref = 2.0 ** a * math.pi ** ((n - 1) / 2.0) * math.exp(
        gammaln((a - 1.0) / 2.0) - gammaln((n - a) / 2.0)
    )
    base = math.exp(gammaln((n - a) / 2.0) - gammaln((n - 2.0 + a) / 2.0))
    ratio = np.exp(gammaln(kf + (n - a) / 2.0) - gammaln(kf + (n - 2.0 + a) / 2.0))
    out = pref * (base - ratio)
    return out if np.ndim(k) else float(out)


def mu_limit(p: KernelParams) -> float:
    """Supremum of the eigenvalue sequence (its ``k -> infinity`` limit)."""
    n, a = p.dim, p.alpha
    pref = 2.0 ** a * math.pi ** ((n - 1) / 2.0) * math.exp(
        gammaln((a - 1.0) / 2.0) - gammaln((n - a) / 2.0)
    )
    return pref * math.exp(gammaln((n - a) / 2.0) - gammaln((n - 2.0 + a) / 2.0))


def ball_energy(p: KernelParams) -> float:
    """Riesz energy of the unit ball via the first-eigenvalue identity.

    ``mu(1) = alpha * (dim + alpha) * F(B) / (dim * omega)`` inverted for
    ``F(B)``.  The quadrature route through the ball potential is used as an
    independent check when :func:`constants_for` builds the constants.
    """
    n, a = p.dim, p.alpha
    return float(mu(p, 1)) * n * p.omega / (a * (n + a))


def sparse_deficit_bound(p: KernelParams) -> float:
    """Deficit lower bound for very scattered sets of ball volume.

    ``omega^2 / 5^dim * (1 - 2^(alpha - dim))``.
    """
    n, a = p.dim, p.alpha
    return p.omega ** 2 / 5.0 ** n * (1.0 - 2.0 ** (a - n))
