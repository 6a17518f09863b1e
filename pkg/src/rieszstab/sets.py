"""Set representations: sphere quadrature grids, radial graph sets, voxel sets.

Three interchangeable descriptions of a bounded measurable set near the unit
ball, with the geometric measures the stability experiments need: volume,
barycenter, symmetric difference to translated balls, and the translation
optimized Fraenkel asymmetry.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import optimize

from .exceptions import OutputError, PreconditionError
from .kernel import unit_ball_volume

__all__ = [
    "SphereGrid",
    "GraphSet",
    "TwoSidedGraphSet",
    "VoxelSet",
    "RadialProfile",
    "AsymmetryResult",
    "sphere_grid",
    "graph_volume",
    "graph_barycenter",
    "volume_normalize",
    "symm_diff_ball",
    "fraenkel_asymmetry",
    "voxel_measures",
    "sd_rearrangement",
    "voxelized_ball",
    "voxelize_star",
    "save_voxel_set",
    "load_voxel_set",
    "save_graph_set",
    "load_graph_set",
]

FORMAT_VERSION = 1


class SphereGrid:
    """Quadrature nodes and weights on the unit sphere.

    dim = 2 uses equispaced angles with uniform weights 2*pi/m; dim = 3 uses a
    Gauss-Legendre (polar cosine) x uniform (azimuth) product rule.  The
    product rule integrates products of spherical harmonics exactly up to
    degree ``n_polar - 1`` in each factor provided ``n_azimuthal >= 2*degree + 1``,
    which is what the spectral analysis relies on.

    Weights sum to the sphere area and the weighted node sum vanishes
    (antipodal balance); both are checked at construction.
    """

    def __init__(self, dim: int, nodes: np.ndarray, weights: np.ndarray, meta: dict):
        self.dim = int(dim)
        self.nodes = np.ascontiguousarray(nodes, dtype=float)
        self.weights = np.ascontiguousarray(weights, dtype=float)
        self.meta = dict(meta)
        area = dim * unit_ball_volume(dim)
        if abs(self.weights.sum() - area) > 1e-9 * area:
            raise PreconditionError("grid weights do not sum to the sphere area")
        if np.max(np.abs(self.weights @ self.nodes)) > 1e-9:
            raise PreconditionError("grid is not antipodally balanced")
        self._chord = None
        self._bases: dict = {}

    def __len__(self):
        return len(self.weights)

    @property
    def mean_spacing(self) -> float:
        """Typical internode distance, sqrt(area / count) for dim 3, arc for dim 2."""
        if self.dim == 2:
            return 2.0 * math.pi / len(self)
        area = self.dim * unit_ball_volume(self.dim)
        return math.sqrt(area / len(self))

    def chord_matrix(self) -> np.ndarray:
        """Pairwise chord distances between nodes (cached)."""
        if self._chord is None:
            g = np.clip(self.nodes @ self.nodes.T, -1.0, 1.0)
            self._chord = np.sqrt(np.maximum(2.0 - 2.0 * g, 0.0))
        return self._chord

    def angles(self):
        """(theta,) for dim 2 or (theta, phi) polar/azimuth arrays for dim 3."""
        if self.dim == 2:
            return (np.arctan2(self.nodes[:, 1], self.nodes[:, 0]),)
        theta = np.arccos(np.clip(self.nodes[:, 2], -1.0, 1.0))
        phi = np.arctan2(self.nodes[:, 1], self.nodes[:, 0])
        return theta, phi


def sphere_grid(dim: int, resolution: int) -> SphereGrid:
    """Build the default grid family member for ``dim``.

    dim 2: ``resolution`` equispaced angles.  dim 3: ``resolution`` polar
    Gauss-Legendre nodes crossed with ``2 * resolution`` azimuths.
    """
    if dim == 2:
        if resolution < 4:
            raise PreconditionError("need at least 4 angular nodes")
        th = 2.0 * math.pi * np.arange(resolution) / resolution
        nodes = np.stack([np.cos(th), np.sin(th)], axis=1)
        w = np.full(resolution, 2.0 * math.pi / resolution)
        return SphereGrid(2, nodes, w, {"type": "circle", "m": resolution})
    if dim == 3:
        if resolution < 4:
            raise PreconditionError("need at least 4 polar nodes")
        n_pol, n_az = resolution, 2 * resolution
        c, v = np.polynomial.legendre.leggauss(n_pol)
        phi = 2.0 * math.pi * np.arange(n_az) / n_az
        s = np.sqrt(1.0 - c ** 2)
        nodes = np.empty((n_pol * n_az, 3))
        nodes[:, 0] = np.repeat(s, n_az) * np.tile(np.cos(phi), n_pol)
        nodes[:, 1] = np.repeat(s, n_az) * np.tile(np.sin(phi), n_pol)
        nodes[:, 2] = np.repeat(c, n_az)
        w = np.repeat(v, n_az) * (2.0 * math.pi / n_az)
        meta = {
            "type": "gl_product",
            "n_polar": n_pol,
            "n_azimuthal": n_az,
            "polar_cos": c,
            "polar_weights": v,
            "azimuth": phi,
        }
        return SphereGrid(3, nodes, w, meta)
    raise PreconditionError(f"no grid family for dim {dim}")


@dataclass
class GraphSet:
    """Star-shaped set given by radial values ``1 + u`` over grid directions.

    Entries default to one per grid node; consolidated sets produced by the
    reduction pipeline carry duplicated directions with split weights, with
    ``node_index`` mapping entries back to grid nodes.  ``u_fn`` optionally
    evaluates the generating profile at arbitrary directions (used by the
    Monte Carlo oracle and by voxelization).
    """

    grid: SphereGrid
    u: np.ndarray
    weights: Optional[np.ndarray] = None
    node_index: Optional[np.ndarray] = None
    u_fn: Optional[Callable] = None

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        if self.node_index is None:
            self.node_index = np.arange(len(self.u))
        else:
            self.node_index = np.asarray(self.node_index, dtype=int)
        if self.weights is None:
            if len(self.u) != len(self.grid):
                raise PreconditionError("u must have one value per grid node")
            self.weights = self.grid.weights.copy()
        else:
            self.weights = np.asarray(self.weights, dtype=float)
        if not (len(self.u) == len(self.weights) == len(self.node_index)):
            raise PreconditionError("inconsistent graph set array lengths")
        if not np.all(np.isfinite(self.u)) or np.any(self.u <= -1.0):
            raise PreconditionError("graph values must be finite with 1 + u > 0")

    @property
    def nodes(self) -> np.ndarray:
        return self.grid.nodes[self.node_index]

    @property
    def split(self) -> bool:
        """True when entries do not map one-to-one onto grid nodes."""
        return len(self.u) != len(self.grid) or np.any(
            self.node_index != np.arange(len(self.grid))
        )

    def radii_at(self, directions: np.ndarray) -> np.ndarray:
        """Outer radius 1 + u in arbitrary directions.

        Uses the generating profile when available, otherwise interpolates
        (periodic linear for dim 2, nearest node for dim 3, O(spacing) there).
        """
        if self.u_fn is not None:
            return 1.0 + np.asarray(self.u_fn(directions), dtype=float)
        if self.split:
            raise PreconditionError(
                "cannot interpolate a split graph set; supply u_fn"
            )
        if self.grid.dim == 2:
            th = np.arctan2(directions[:, 1], directions[:, 0]) % (2.0 * math.pi)
            m = len(self.grid)
            x = th / (2.0 * math.pi) * m
            i0 = np.floor(x).astype(int) % m
            frac = x - np.floor(x)
            return 1.0 + (1.0 - frac) * self.u[i0] + frac * self.u[(i0 + 1) % m]
        idx = np.argmax(directions @ self.grid.nodes.T, axis=1)
        return 1.0 + self.u[idx]

    def contains(self, points: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(points, axis=1)
        dirs = points / np.maximum(r, 1e-300)[:, None]
        return r <= self.radii_at(dirs)

    def bounding_radius(self) -> float:
        return float(1.0 + np.max(self.u))


@dataclass
class TwoSidedGraphSet:
    """Annular rearrangement with outer bump ``u_plus`` and inner gap ``u_minus``.

    The set in direction ``x`` is ``[0, 1 - u_minus] union [1, 1 + u_plus]``
    radially; both arrays are nonnegative and strictly below 1.
    ``ray_segments`` optionally retains the cast-ray occupancy runs of the
    originating set, one list of ``(t_in, t_out)`` pairs per node.
    """

    grid: SphereGrid
    u_plus: np.ndarray
    u_minus: np.ndarray
    ray_segments: Optional[list] = None

    def __post_init__(self):
        self.u_plus = np.asarray(self.u_plus, dtype=float)
        self.u_minus = np.asarray(self.u_minus, dtype=float)
        if len(self.u_plus) != len(self.grid) or len(self.u_minus) != len(self.grid):
            raise PreconditionError("two-sided values must match the grid")
        if np.any(self.u_plus < 0.0) or np.any(self.u_minus < 0.0):
            raise PreconditionError("two-sided values must be nonnegative")
        if np.any(self.u_plus >= 1.0) or np.any(self.u_minus >= 1.0):
            raise PreconditionError("two-sided values must stay below 1")

    def volume(self) -> float:
        n = self.grid.dim
        per = (1.0 - self.u_minus) ** n + (1.0 + self.u_plus) ** n - 1.0
        return float(np.sum(self.grid.weights * per) / n)

    def symm_diff_ball(self) -> float:
        n = self.grid.dim
        per = (1.0 + self.u_plus) ** n - 1.0 + 1.0 - (1.0 - self.u_minus) ** n
        return float(np.sum(self.grid.weights * per) / n)


@dataclass
class VoxelSet:
    """Axis-aligned occupancy grid: ``occ[i, j, ...]`` marks cell occupancy.

    Cell ``(i, j, ...)`` spans ``origin + h * [idx, idx + 1)`` per axis.
    """

    origin: np.ndarray
    spacing: float
    occ: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.occ = np.asarray(self.occ, dtype=bool)
        if self.occ.ndim != len(self.origin):
            raise PreconditionError("occupancy rank must match origin length")
        if self.spacing <= 0.0:
            raise PreconditionError("spacing must be positive")

    @property
    def dim(self) -> int:
        return self.occ.ndim

    def centers(self) -> np.ndarray:
        """Centers of occupied cells, shape (count, dim)."""
        idx = np.argwhere(self.occ)
        return self.origin + self.spacing * (idx + 0.5)

    def volume(self) -> float:
        return float(np.count_nonzero(self.occ)) * self.spacing ** self.dim

    def barycenter(self) -> np.ndarray:
        c = self.centers()
        if len(c) == 0:
            raise PreconditionError("empty voxel set has no barycenter")
        return c.mean(axis=0)

    def contains(self, points: np.ndarray) -> np.ndarray:
        idx = np.floor((points - self.origin) / self.spacing).astype(int)
        ok = np.all((idx >= 0) & (idx < np.array(self.occ.shape)), axis=1)
        out = np.zeros(len(points), dtype=bool)
        if np.any(ok):
            out[ok] = self.occ[tuple(idx[ok].T)]
        return out

    def bounding_radius(self) -> float:
        c = self.centers()
        if len(c) == 0:
            return 0.0
        return float(np.max(np.linalg.norm(c, axis=1)) + 0.5 * self.spacing * math.sqrt(self.dim))

    def translated(self, shift_cells: np.ndarray) -> "VoxelSet":
        """Same occupancy with the origin shifted by whole cells."""
        shift = np.asarray(shift_cells, dtype=int)
        return VoxelSet(self.origin + self.spacing * shift, self.spacing, self.occ.copy())


@dataclass
class RadialProfile:
    """Decreasing radial rearrangement: value ``values[i]`` on the shell
    ``(radii[i-1], radii[i]]`` (with ``radii[-1]`` understood as 0)."""

    radii: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.radii = np.asarray(self.radii, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if len(self.radii) != len(self.values):
            raise PreconditionError("profile arrays must have equal length")
        if np.any(np.diff(self.radii) <= 0.0) or (len(self.radii) and self.radii[0] <= 0.0):
            raise PreconditionError("profile radii must be positive and increasing")
        if np.any(np.diff(self.values) > 1e-12):
            raise PreconditionError("profile values must be nonincreasing")

    def norm_l1(self, dim: int) -> float:
        r = np.concatenate([[0.0], self.radii])
        shells = unit_ball_volume(dim) * (r[1:] ** dim - r[:-1] ** dim)
        return float(np.sum(shells * self.values))

    def value_at(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        idx = np.searchsorted(self.radii, r, side="left")
        out = np.zeros_like(r)
        inside = idx < len(self.values)
        out[inside] = self.values[idx[inside]]
        return out


# ---------------------------------------------------------------------------
# graph set measures


def graph_volume(e: GraphSet) -> float:
    """Volume of a graph set, ``(1/dim) * sum w * (1+u)^dim``."""
    n = e.grid.dim
    return float(np.sum(e.weights * (1.0 + e.u) ** n) / n)


def graph_barycenter(e: GraphSet) -> np.ndarray:
    """Barycenter via the radial moment, ``(1/|E|) (1/(dim+1)) sum w x (1+u)^(dim+1)``."""
    n = e.grid.dim
    mom = (e.weights * (1.0 + e.u) ** (n + 1)) @ e.nodes / (n + 1.0)
    return mom / graph_volume(e)


def volume_normalize(e: GraphSet) -> GraphSet:
    """Rescale radially so the volume equals the unit ball's exactly."""
    lam = (unit_ball_volume(e.grid.dim) / graph_volume(e)) ** (1.0 / e.grid.dim)
    u_fn = None
    if e.u_fn is not None:
        inner = e.u_fn
        u_fn = lambda d: lam * (1.0 + np.asarray(inner(d))) - 1.0
    return GraphSet(
        e.grid,
        lam * (1.0 + e.u) - 1.0,
        weights=e.weights.copy(),
        node_index=e.node_index.copy(),
        u_fn=u_fn,
    )


def symm_diff_ball(e: GraphSet, center=None) -> float:
    """``|E delta B(center)|`` by the per-ray closed form.

    Requires ``|center| < 1`` so the translated ball stays star shaped about
    the origin; then each ray meets it in ``[0, t_+]`` with
    ``t_+ = c.x + sqrt((c.x)^2 + 1 - |c|^2)``.
    """
    n = e.grid.dim
    if center is None:
        tplus = 1.0
    else:
        center = np.asarray(center, dtype=float)
        c2 = center @ center
        if c2 >= 1.0:
            raise PreconditionError("ball center must satisfy |center| < 1")
        proj = e.nodes @ center
        tplus = proj + np.sqrt(proj ** 2 + 1.0 - c2)
    return float(np.sum(e.weights * np.abs((1.0 + e.u) ** n - tplus ** n)) / n)


# ---------------------------------------------------------------------------
# Fraenkel asymmetry


@dataclass
class AsymmetryResult:
    """Translation-minimized symmetric difference to a unit ball."""

    value: float
    center: np.ndarray
    evaluations: int
    converged: bool


def _voxel_sdb(v: VoxelSet, center: np.ndarray, cent: np.ndarray, vol: float) -> float:
    # smoothed partial-cell overlap keeps the objective continuous in center
    d = np.linalg.norm(cent - center, axis=1)
    frac = np.clip(0.5 + (1.0 - d) / v.spacing, 0.0, 1.0)
    inter = float(frac.sum()) * v.spacing ** v.dim
    return vol + unit_ball_volume(v.dim) - 2.0 * inter


def fraenkel_asymmetry(s, restarts: int = 6) -> AsymmetryResult:
    """Minimize ``|E delta B(x)|`` over centers ``x`` by restarted Nelder-Mead.

    Restarts seed from the origin, the barycenter, and fixed coordinate
    offsets; each run uses an initial simplex of diameter 0.2 and terminates
    at 1e-7 absolute on the objective value.
    """
    if isinstance(s, GraphSet):
        dim = s.grid.dim
        bary = graph_barycenter(s)
        big = 2.0 * (graph_volume(s) + unit_ball_volume(dim))

        def objective(c):
            if c @ c >= 0.96:
                return big
            return symm_diff_ball(s, c)

    elif isinstance(s, VoxelSet):
        dim = s.dim
        cent = s.centers()
        vol = s.volume()
        bary = s.barycenter()

        def objective(c):
            return _voxel_sdb(s, np.asarray(c), cent, vol)

    else:
        raise PreconditionError(f"unsupported set type {type(s).__name__}")

    starts = [np.zeros(dim), np.clip(bary, -0.5, 0.5)]
    if isinstance(s, VoxelSet):
        # scattered sets can sit far from the origin; scan a deterministic
        # subsample of occupied centers for the most promising start
        take = cent[:: max(1, len(cent) // 128)]
        if len(take):
            scan = [objective(c) for c in take]
            starts.insert(1, take[int(np.argmin(scan))])
    for i in range(dim):
        e_i = np.zeros(dim)
        e_i[i] = 0.15
        starts.extend([e_i, -e_i])
    starts = starts[:restarts]

    best = None
    nfev = 0
    converged = False
    for x0 in starts:
        simplex = np.vstack([x0] + [x0 + 0.2 * np.eye(dim)[i] for i in range(dim)])
        res = optimize.minimize(
            objective,
            x0,
            method="Nelder-Mead",
            options={
                "initial_simplex": simplex,
                "fatol": 1e-7,
                "xatol": 1e-8,
                "maxiter": 400 * dim,
            },
        )
        nfev += res.nfev
        converged = converged or bool(res.success)
        if best is None or res.fun < best.fun:
            best = res
    return AsymmetryResult(
        value=float(best.fun),
        center=np.asarray(best.x, dtype=float),
        evaluations=nfev,
        converged=converged,
    )


# ---------------------------------------------------------------------------
# voxel measures and rearrangement


def voxel_measures(v: VoxelSet):
    """(volume, barycenter) of a voxel set."""
    return v.volume(), v.barycenter()


def sd_rearrangement(values: np.ndarray, spacing: float, dim: int) -> RadialProfile:
    """Decreasing radial rearrangement of nonnegative cell values.

    Sorts the cells by value and stacks them into concentric shells of equal
    cell volume; the L1 norm is preserved exactly.
    """
    vals = np.asarray(values, dtype=float).ravel()
    if np.any(vals < 0.0) or not np.all(np.isfinite(vals)):
        raise PreconditionError("rearrangement requires finite nonnegative values")
    vals = np.sort(vals)[::-1]
    vals = vals[vals > 0.0]
    if len(vals) == 0:
        return RadialProfile(np.array([1.0]), np.array([0.0]))
    cellvol = spacing ** dim
    cum = cellvol * np.arange(1, len(vals) + 1)
    radii = (cum / unit_ball_volume(dim)) ** (1.0 / dim)
    return RadialProfile(radii, vals)


# ---------------------------------------------------------------------------
# voxelization


def voxelized_ball(dim: int, spacing: float, radius: float = 1.0, calibrate: bool = True) -> VoxelSet:
    """Center-in-ball voxelization of a ball at the origin.

    With ``calibrate`` the radius is adjusted within one cell so the voxel
    volume matches the exact ball volume as closely as possible, suppressing
    the boundary-count fluctuation term in energy errors.
    """
    half = int(math.ceil((radius + 2.0 * spacing) / spacing))
    origin = -half * spacing * np.ones(dim)
    axes = [origin[k] + spacing * (np.arange(2 * half) + 0.5) for k in range(dim)]
    grids = np.meshgrid(*axes, indexing="ij")
    d2 = sum(g ** 2 for g in grids)
    if not calibrate:
        return VoxelSet(origin, spacing, d2 <= radius ** 2)
    target = unit_ball_volume(dim) * radius ** dim / spacing ** dim
    flat = d2.ravel()
    count = int(np.clip(np.round(target), 1, flat.size))
    # exactly `count` nearest cells; stable sort keeps tie-breaking deterministic
    order = np.argsort(flat, kind="stable")
    occ = np.zeros(flat.size, dtype=bool)
    occ[order[:count]] = True
    return VoxelSet(origin, spacing, occ.reshape(d2.shape))


def voxelize_star(u_fn: Callable, dim: int, spacing: float, rmax: float = 1.5) -> VoxelSet:
    """Center-rule voxelization of the star-shaped set ``r <= 1 + u(direction)``."""
    half = int(math.ceil(rmax / spacing)) + 1
    origin = -half * spacing * np.ones(dim)
    axes = [origin[k] + spacing * (np.arange(2 * half) + 0.5) for k in range(dim)]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    r = np.linalg.norm(pts, axis=1)
    dirs = pts / np.maximum(r, 1e-300)[:, None]
    occ = r <= 1.0 + np.asarray(u_fn(dirs), dtype=float)
    return VoxelSet(origin, spacing, occ.reshape(grids[0].shape))


# ---------------------------------------------------------------------------
# serialization (versioned JSON; occupancy as base64-packed bits)


def save_voxel_set(v: VoxelSet, path):
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": "voxel_set",
        "dim": v.dim,
        "origin": list(map(float, v.origin)),
        "spacing": float(v.spacing),
        "dims": list(v.occ.shape),
        "occupancy_b64": base64.b64encode(np.packbits(v.occ.ravel()).tobytes()).decode(),
    }
    _write_json(payload, path)


def load_voxel_set(path) -> VoxelSet:
    d = _read_json(path, "voxel_set")
    bits = np.unpackbits(
        np.frombuffer(base64.b64decode(d["occupancy_b64"]), dtype=np.uint8)
    )
    n = int(np.prod(d["dims"]))
    if len(bits) < n:
        raise OutputError(f"occupancy payload too short in {path}")
    occ = bits[:n].astype(bool).reshape(d["dims"])
    return VoxelSet(np.array(d["origin"], dtype=float), float(d["spacing"]), occ)


def save_graph_set(e: GraphSet, path):
    if e.split:
        raise PreconditionError("only one-value-per-node graph sets serialize")
    g = e.grid
    if g.dim == 2:
        gspec = {"dim": 2, "type": "circle", "m": g.meta["m"]}
    else:
        gspec = {
            "dim": 3,
            "type": "gl_product",
            "n_polar": g.meta["n_polar"],
            "n_azimuthal": g.meta["n_azimuthal"],
        }
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": "graph_set",
        "grid": gspec,
        "u": list(map(float, e.u)),
    }
    _write_json(payload, path)


def load_graph_set(path) -> GraphSet:
    d = _read_json(path, "graph_set")
    g = d["grid"]
    if g["type"] == "circle":
        grid = sphere_grid(2, int(g["m"]))
    elif g["type"] == "gl_product":
        grid = sphere_grid(3, int(g["n_polar"]))
        if grid.meta["n_azimuthal"] != int(g["n_azimuthal"]):
            raise OutputError("unsupported azimuthal count in graph set file")
    else:
        raise OutputError(f"unknown grid type {g['type']!r}")
    return GraphSet(grid, np.array(d["u"], dtype=float))


def _write_json(payload: dict, path):
    try:
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc


def _read_json(path, kind: str) -> dict:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise OutputError(f"cannot read {path}: {exc}") from exc
    if d.get("kind") != kind or d.get("format_version") != FORMAT_VERSION:
        raise OutputError(f"{path} is not a version-{FORMAT_VERSION} {kind} file")
    return d
