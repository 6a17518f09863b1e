"""Spherical-harmonic analysis on the boundary sphere.

Discrete real harmonic bases on the package grids, the fractional seminorm
computed two independent ways (direct pair sums with a near-field gradient
model, and eigenvalue-weighted coefficient sums), the second-variation
quadratic form predicting the energy deficit of nearly spherical sets, and
the exact deficit identity residual used to cross-check the quadrature
engines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .boxquad import _gl
from .energy import _blend, _chord_model, _deficit_estimate, _grad_sq, _require_model_grid
from .exceptions import PreconditionError
from .kernel import KernelParams, constants_for, mu, unit_ball_volume
from .sets import GraphSet, SphereGrid

__all__ = [
    "HarmonicBasis",
    "Spectrum",
    "build_basis",
    "analyze",
    "synthesize",
    "remove_low_modes",
    "seminorm_direct",
    "seminorm_spectral",
    "second_variation",
    "fuglede_identity_residual",
    "spectrum_payload",
    "eigenvalue_rows",
]

DEFAULT_MAX_DEGREE = 12

ORTHONORMALITY_TOL = 1e-6

# tensor Gauss-Legendre order for the identity-residual boxes
_BOX_NODES = 12

_PAIR_CHUNK = 2048


@dataclass
class HarmonicBasis:
    """Real orthonormal spherical harmonics sampled on a grid.

    ``values[a, j]`` is the a-th basis function at node j; ``degrees[a]`` its
    degree and ``labels[a] = (k, i)`` with i = 1..N(k) inside the degree.
    Grid sufficiency rule: dim 2 needs at least 2K+2 nodes, dim 3 at least
    K+1 polar rows; ``build_basis`` verifies the Gram matrix either way.
    """

    grid: SphereGrid
    max_degree: int
    values: np.ndarray
    degrees: np.ndarray
    labels: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.values)

    def multiplicity(self, k: int) -> int:
        if self.grid.dim == 2:
            return 1 if k == 0 else 2
        return 2 * k + 1


@dataclass
class Spectrum:
    """Harmonic coefficients of a sphere function up to a degree cutoff.

    ``residual_norm`` is the L2 mass above the cutoff (Parseval defect),
    reported rather than dropped.
    """

    coefficients: np.ndarray
    degrees: np.ndarray
    labels: list
    max_degree: int
    residual_norm: float


def _assoc_legendre_normalized(c: np.ndarray, K: int) -> dict:
    """Fully normalized associated Legendre values S_l^m(c), no phase factor.

    S_l^m carries the spherical-harmonic norm: the real harmonics are
    S_l^0 and sqrt(2) S_l^m cos/sin(m phi).  The three-term recurrence in l
    at fixed m is stable for the degrees used here.
    """
    s = np.sqrt(np.clip(1.0 - c * c, 0.0, None))
    S = {}
    S[(0, 0)] = np.full_like(c, math.sqrt(1.0 / (4.0 * math.pi)))
    for m in range(1, K + 1):
        S[(m, m)] = S[(m - 1, m - 1)] * s * math.sqrt((2.0 * m + 1.0) / (2.0 * m))
    for m in range(0, K):
        S[(m + 1, m)] = c * math.sqrt(2.0 * m + 3.0) * S[(m, m)]
    for m in range(0, K + 1):
        for l in range(m + 2, K + 1):
            a = math.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = math.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1.0) ** 2 - 1.0))
            S[(l, m)] = a * (c * S[(l - 1, m)] - b * S[(l - 2, m)])
    return S


def build_basis(grid: SphereGrid, K: int = DEFAULT_MAX_DEGREE) -> HarmonicBasis:
    """Orthonormal real harmonic basis up to degree K on the given grid.

    Raises when the grid does not integrate the basis products accurately,
    naming the worst-offending pair of functions.
    """
    if K < 0:
        raise PreconditionError("max degree must be nonnegative")
    n = len(grid)
    rows, degs, labels = [], [], []
    if grid.dim == 2:
        th = np.arctan2(grid.nodes[:, 1], grid.nodes[:, 0])
        rows.append(np.full(n, 1.0 / math.sqrt(2.0 * math.pi)))
        degs.append(0)
        labels.append((0, 1))
        for k in range(1, K + 1):
            rows.append(np.cos(k * th) / math.sqrt(math.pi))
            degs.append(k)
            labels.append((k, 1))
            rows.append(np.sin(k * th) / math.sqrt(math.pi))
            degs.append(k)
            labels.append((k, 2))
    elif grid.dim == 3:
        c = np.clip(grid.nodes[:, 2], -1.0, 1.0)
        phi = np.arctan2(grid.nodes[:, 1], grid.nodes[:, 0])
        S = _assoc_legendre_normalized(c, K)
        for k in range(K + 1):
            rows.append(S[(k, 0)])
            degs.append(k)
            labels.append((k, 1))
            i = 2
            for m in range(1, k + 1):
                base = math.sqrt(2.0) * S[(k, m)]
                rows.append(base * np.cos(m * phi))
                degs.append(k)
                labels.append((k, i))
                rows.append(base * np.sin(m * phi))
                degs.append(k)
                labels.append((k, i + 1))
                i += 2
    else:
        raise PreconditionError(f"no harmonic basis for dim {grid.dim}")
    V = np.asarray(rows)
    gram = V @ (grid.weights * V).T
    defect = np.abs(gram - np.eye(len(V)))
    worst = float(defect.max())
    if worst > ORTHONORMALITY_TOL:
        a, b = np.unravel_index(int(np.argmax(defect)), defect.shape)
        raise PreconditionError(
            f"grid under-resolves degree {K}: functions y_{labels[a]} and "
            f"y_{labels[b]} have Gram defect {worst:.2e}"
        )
    return HarmonicBasis(grid, K, V, np.asarray(degs, dtype=int), labels)


def analyze(u: np.ndarray, basis: HarmonicBasis) -> Spectrum:
    """Project a node-sampled function onto the basis.

    a_{k,i} = sum_j w_j u_j y_{k,i}(x_j); the Parseval defect above the
    cutoff becomes residual_norm.
    """
    u = np.asarray(u, dtype=float)
    if len(u) != len(basis.grid):
        raise PreconditionError("function values must match the basis grid")
    w = basis.grid.weights
    a = basis.values @ (w * u)
    total = float(np.sum(w * u * u))
    resid2 = max(total - float(np.sum(a * a)), 0.0)
    return Spectrum(a, basis.degrees.copy(), list(basis.labels), basis.max_degree, math.sqrt(resid2))


def synthesize(s: Spectrum, basis: HarmonicBasis) -> np.ndarray:
    """Evaluate the truncated expansion on the basis grid."""
    if len(s.coefficients) != len(basis):
        raise PreconditionError("spectrum does not match the basis size")
    return basis.values.T @ s.coefficients


def remove_low_modes(u: np.ndarray, basis: HarmonicBasis) -> np.ndarray:
    """Subtract the degree-0 and degree-1 components.

    The deficit is translation invariant at second order and the volume
    constraint pins the mean, so the quadratic predictor applies to
    functions with these modes projected out.
    """
    w = basis.grid.weights
    out = np.asarray(u, dtype=float).copy()
    for row, k in zip(basis.values, basis.degrees):
        if k > 1:
            continue
        out -= float(np.sum(w * u * row)) * row
    return out


def seminorm_direct(grid: SphereGrid, u: np.ndarray, p: KernelParams) -> float:
    """Fractional seminorm by the blended pair sum.

    [u]^2 = sum_{i != j} w_i w_j (u_i - u_j)^2 |x_i - x_j|^(alpha - dim)
    with the sub-node-scale mass restored through the local gradient model:
    the difference factor makes the near field integrable, but a plain node
    sum misses the cap contribution entirely.
    """
    if grid.dim != p.dim:
        raise PreconditionError("grid dimension does not match kernel parameters")
    _require_model_grid(grid)
    # only differences enter; centering keeps constants exactly at zero
    u = np.asarray(u, dtype=float)
    u = u - u[0]
    w = grid.weights
    h = grid.mean_spacing
    ex = p.alpha - p.dim
    total = 0.0
    n = len(grid)
    for a in range(0, n, _PAIR_CHUNK):
        b = min(a + _PAIR_CHUNK, n)
        d = grid.nodes[a:b, None, :] - grid.nodes[None, :, :]
        q = np.sqrt(np.sum(d * d, axis=2))
        du = u[a:b, None] - u[None, :]
        ker = np.where(q > 0.0, _blend(q, h) * np.maximum(q, 1e-300) ** ex, 0.0)
        total += float(np.einsum("i,j,ij->", w[a:b], w, du * du * ker))
    _, _, m2 = _chord_model(p.dim, float(p.alpha), float(h))
    total += float(np.sum(w * _grad_sq(grid, u) * m2))
    return total


def seminorm_spectral(s: Spectrum, p: KernelParams) -> float:
    """Fractional seminorm from the eigenvalue sum over coefficients."""
    return float(np.sum(mu(p, s.degrees) * s.coefficients ** 2))


def second_variation(s: Spectrum, p: KernelParams) -> float:
    """Quadratic deficit predictor (1/2) sum_{k>=2} (mu_k - mu_1) a_{k,i}^2.

    Expects the spectrum of a mean- and barycenter-corrected profile; the
    degree-0/1 coefficients are excluded since they are higher order under
    the volume and barycenter constraints.
    """
    mask = s.degrees >= 2
    gaps = mu(p, s.degrees[mask]) - mu(p, 1)
    return 0.5 * float(np.sum(gaps * s.coefficients[mask] ** 2))


def _pair_boxes_gl(p: KernelParams, q, lo, hi):
    """Square boxes integral of f(q, r, rho) over [lo, hi]^2 by tensor GL.

    Independent route from the transformed box engine: raw coordinates, no
    kink split (the integrand is smooth across r = rho for q away from 0 at
    the scale of the box width).
    """
    x, gw = _gl(_BOX_NODES)
    span = hi - lo
    r = lo[:, None] + span[:, None] * x[None, :]
    nexp = (p.dim - p.alpha) / 2.0
    rr = r[:, :, None]
    pp = r[:, None, :]
    f = (rr * pp) ** (p.dim - 1) * ((rr - pp) ** 2 + rr * pp * q[:, None, None] ** 2) ** (-nexp)
    ww = gw[None, :, None] * gw[None, None, :]
    return span ** 2 * np.sum(f * ww, axis=(1, 2))


def fuglede_identity_residual(e: GraphSet, t: float, p: KernelParams) -> float:
    """Relative residual of the exact deficit identity.

    Left side: the deficit through the energy engine.  Right side: the shape
    term as a weighted sum plus the pair term integrated by tensor
    Gauss-Legendre in untransformed radial coordinates; only the
    sub-node-scale gradient model is shared between the two routes.
    """
    if not (0.0 <= t <= 0.2):
        raise PreconditionError("identity residual is only assessed for t <= 0.2")
    if e.grid.dim != p.dim:
        raise PreconditionError("set dimension does not match kernel parameters")
    if e.split:
        raise PreconditionError("identity residual expects one entry per node")
    if t == 0.0 or not np.any(e.u):
        return 0.0
    lhs, _ = _deficit_estimate(e, p)

    ref = constants_for(p)
    n, al = p.dim, p.alpha
    w = e.weights
    u = e.u
    shape = -ref.ball_energy / (n * p.omega) * float(
        np.sum(w * np.expm1((n + al) * np.log1p(u)))
    )
    h = e.grid.mean_spacing
    nodes = e.grid.nodes
    nn = len(u)
    iu, ju = np.triu_indices(nn, k=1)
    pair = 0.0
    for a in range(0, len(iu), _PAIR_CHUNK):
        sl = slice(a, min(a + _PAIR_CHUNK, len(iu)))
        i, j = iu[sl], ju[sl]
        q = np.linalg.norm(nodes[i] - nodes[j], axis=1)
        eta = _blend(q, h)
        live = eta > 0.0
        if not np.any(live):
            continue
        boxes = _pair_boxes_gl(p, q[live], 1.0 + u[j][live], 1.0 + u[i][live])
        pair += float(np.sum((w[i] * w[j] * eta)[live] * boxes))
    _, _, m2 = _chord_model(n, float(al), float(h))
    model = 0.5 * m2 * float(np.sum(w * (1.0 + u) ** (n + al - 2.0) * _grad_sq(e.grid, u)))
    rhs = shape + pair + model
    scale = max(abs(lhs), abs(rhs))
    if scale == 0.0:
        return 0.0
    return abs(lhs - rhs) / scale


def spectrum_payload(s: Spectrum) -> dict:
    """JSON-ready form: coefficients keyed by "k,i" plus cutoff metadata."""
    return {
        "coefficients": {f"{k},{i}": float(a) for (k, i), a in zip(s.labels, s.coefficients)},
        "max_degree": int(s.max_degree),
        "residual_norm": float(s.residual_norm),
    }


def eigenvalue_rows(p: KernelParams, K: int):
    """(k, mu_k) table rows for emission."""
    return [(k, float(mu(p, k))) for k in range(K + 1)]
