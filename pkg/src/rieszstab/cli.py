"""Command line front end: sweeps, batteries, pipeline runs, certificates.

Five subcommands share one configuration schema (flags plus an optional
JSON/TOML config file):

* ``sharpness-sweep``   amplitude sweep for one spherical-harmonic profile
  perturbation, with a log-log fit of asymmetry against deficit;
* ``stability-battery`` seeded random graph and voxel sets, quotient table
  and violation count;
* ``reduce``            run the reduction pipeline on a voxel set file;
* ``spectral-table``    eigenvalue table with direct quadrature cross-checks;
* ``verify``            potential-bound, transport-comparison and
  scattered-set certificates on randomized instances.

Reports are byte-stable for a fixed configuration: no timestamps, sorted
JSON keys, fixed CSV column order with ``%.12g`` floats, and a sha256 hash
of the canonical payload stored under ``content_hash``.  Row data goes to
CSV, summaries to JSON, and each command renders a PNG figure next to its
report unless ``--no-figures`` is passed.  Figures are a reading aid and
are not covered by the byte-stability guarantee.

Exit codes: 0 success, 2 precondition violation, 3 non-convergence,
4 unreadable input or unwritable output, 1 anything else.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import sys
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import (
    NonConvergenceError,
    OutputError,
    PreconditionError,
    RieszstabError,
)
from .kernel import (
    KernelParams,
    ball_energy,
    mu,
    sparse_deficit_bound,
    tau1,
    tau2,
    unit_ball_volume,
)
from .sets import (
    GraphSet,
    VoxelSet,
    fraenkel_asymmetry,
    load_voxel_set,
    sphere_grid,
    volume_normalize,
)
from .energy import deficit, mutual_energy
from .spectral import Spectrum, analyze, build_basis, eigenvalue_rows, seminorm_direct, synthesize
from .reduction import reduce_pipeline

REPORT_VERSION = 1
MAX_TABLE_DEGREE = 64
DIRECT_CHECK_DEGREE = 6

# per-dim defaults used when neither flag nor config file pins a value
_GRID_DEFAULT = {2: 256, 3: 16}
_SPACING_DEFAULT = {2: 1.0 / 64.0, 3: 1.0 / 16.0}


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    """Effective settings for one command invocation.

    Built by layering (defaults, config file, explicit flags) in that
    order.  ``grid``, ``spacing``, ``samples`` and ``xi`` stay ``None``
    until resolved against the dimension and the command at hand.

    Parameters
    ----------
    dim, alpha : kernel parameters; ``dim`` in {2, 3}, ``alpha`` in (1, dim).
    mode : harmonic label ``(k, i)`` for the sweep profile, ``k >= 2``.
    amplitudes : ascending amplitude grid for the sweep.
    xi : overlap threshold for the scattered-set certificate.
    deficit_floor : rows with deficit below this are excluded from fits.
    ratio_tol : negative-deficit tolerance when counting violations.
    """

    dim: int = 3
    alpha: float = 2.0
    grid: Optional[int] = None
    k_max: Optional[int] = None
    seed: int = 2026
    samples: Optional[int] = None
    eps: float = 0.2
    spacing: Optional[float] = None
    mode: Tuple[int, int] = (2, 1)
    amplitudes: Optional[Tuple[float, ...]] = None
    xi: Optional[float] = None
    deficit_floor: float = 1e-12
    ratio_tol: float = 1e-8
    voxel_file: Optional[str] = None
    out: Optional[str] = None
    figures: bool = True

    def validate(self):
        if self.dim not in (2, 3):
            raise PreconditionError(f"dim must be 2 or 3, got {self.dim}")
        if not 1.0 < self.alpha < self.dim:
            raise PreconditionError(
                f"alpha must lie in (1, {self.dim}), got {self.alpha}"
            )
        for name in ("deficit_floor", "ratio_tol", "eps"):
            if getattr(self, name) <= 0:
                raise PreconditionError(f"{name} must be positive")
        if self.grid is not None and self.grid < 2:
            raise PreconditionError("grid resolution must be at least 2")
        if self.spacing is not None and self.spacing <= 0:
            raise PreconditionError("spacing must be positive")
        if self.samples is not None and self.samples < 1:
            raise PreconditionError("samples must be positive")
        if self.xi is not None and self.xi <= 0:
            raise PreconditionError("xi must be positive")
        k, i = self.mode
        if k < 2 or i < 1:
            raise PreconditionError(
                f"harmonic mode must have degree >= 2 and index >= 1, got {self.mode}"
            )
        if self.amplitudes is not None:
            a = np.asarray(self.amplitudes, dtype=float)
            if a.size and (np.any(a < 0) or np.any(np.diff(a) <= 0)):
                raise PreconditionError(
                    "amplitude grid must be nonnegative and strictly ascending"
                )

    def params(self) -> KernelParams:
        return KernelParams(self.dim, self.alpha)

    def grid_resolution(self) -> int:
        return self.grid if self.grid is not None else _GRID_DEFAULT[self.dim]

    def voxel_spacing(self) -> float:
        return (
            self.spacing
            if self.spacing is not None
            else _SPACING_DEFAULT[self.dim]
        )

    def sample_count(self, default: int) -> int:
        return self.samples if self.samples is not None else default

    def xi_value(self) -> float:
        if self.xi is not None:
            return self.xi
        return unit_ball_volume(self.dim) / 8.0 + 0.01

    def amplitude_grid(self) -> np.ndarray:
        if self.amplitudes is not None:
            return np.asarray(self.amplitudes, dtype=float)
        # default grid covers the sharp-regime window and includes the
        # degenerate ball row, which the fit excludes
        return np.concatenate([[0.0], np.geomspace(1e-3, 5e-2, 12)])

    def echo(self, command: str) -> dict:
        d = dataclasses.asdict(self)
        d["mode"] = list(self.mode)
        d["grid"] = self.grid_resolution()
        d["spacing"] = self.voxel_spacing()
        d["xi"] = self.xi_value()
        d["amplitudes"] = [float(s) for s in self.amplitude_grid()]
        d["command"] = command
        return d


_CONFIG_KEYS = {f.name for f in dataclasses.fields(ExperimentConfig)}
_FLAG_KEYS = (
    "dim",
    "alpha",
    "grid",
    "k_max",
    "seed",
    "samples",
    "eps",
    "out",
)


def _load_config_file(path: str) -> dict:
    try:
        if path.endswith(".toml"):
            try:
                import tomllib as toml_mod
            except ImportError:
                import tomli as toml_mod
            with open(path, "rb") as fh:
                raw = toml_mod.load(fh)
        else:
            with open(path) as fh:
                raw = json.load(fh)
    except OSError as exc:
        raise OutputError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        # json.JSONDecodeError and tomli decode errors both land here
        raise OutputError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise OutputError(f"config {path} must hold a table of settings")
    unknown = sorted(set(raw) - _CONFIG_KEYS)
    if unknown:
        raise PreconditionError(f"unknown config keys: {', '.join(unknown)}")
    return raw


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    """Layer defaults, the config file, and explicit flags into one record."""
    merged: dict = {}
    if getattr(args, "config", None):
        merged.update(_load_config_file(args.config))
    for key in _FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    if getattr(args, "no_figures", False):
        merged["figures"] = False
    if "mode" in merged:
        merged["mode"] = tuple(int(v) for v in merged["mode"])
    if "amplitudes" in merged and merged["amplitudes"] is not None:
        merged["amplitudes"] = tuple(float(v) for v in merged["amplitudes"])
    cfg = ExperimentConfig(**merged)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# report plumbing


def _json_safe(obj):
    """Recursively convert payloads to canonical JSON-ready values.

    Non-finite floats become ``None``: canonical hashing rejects NaN
    spellings, and a missing value reads better than a bare token anyway.
    """
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_json_safe(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def content_hash(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def write_report(path: str, payload: dict) -> dict:
    """Serialize ``payload`` with its content hash; returns what was written."""
    body = _json_safe(payload)
    body["content_hash"] = content_hash(body)
    try:
        with open(path, "w") as fh:
            json.dump(body, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc
    return body


def _fmt(x) -> str:
    if x is None:
        return "nan"
    return "%.12g" % float(x)


def write_rows(path: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    try:
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc


def _out_stem(cfg: ExperimentConfig, command: str) -> str:
    stem = cfg.out if cfg.out else command.replace("-", "_")
    for suffix in (".json", ".csv", ".png"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
    return stem


def _render_figure(cfg: ExperimentConfig, path: str, draw) -> Optional[str]:
    if not cfg.figures:
        return None
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    fig = plt.figure(figsize=(6.0, 4.5))
    try:
        draw(fig)
        fig.tight_layout()
        try:
            fig.savefig(path, dpi=140)
        except OSError as exc:
            raise OutputError(f"cannot write {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path


def _rng(seed: int, stream: int) -> np.random.Generator:
    # one Philox key per (seed, stream) so rows are independently seeded
    # and insertion order cannot leak into the draws
    return np.random.Generator(np.random.Philox(key=(int(seed) << 20) + stream))


# ---------------------------------------------------------------------------
# sharpness sweep


@dataclass
class SweepRow:
    """One amplitude sample: deficit, asymmetry, quotient, model value."""

    amplitude: float
    deficit: float
    asymmetry: float
    ratio: float
    predictor: float

    def as_list(self) -> list:
        return [self.amplitude, self.deficit, self.asymmetry, self.ratio, self.predictor]


SWEEP_HEADER = ("amplitude", "deficit", "asymmetry", "ratio", "predictor")


def _mode_profile(grid, mode: Tuple[int, int]):
    k, i = mode
    basis = build_basis(grid, K=max(k, 2))
    for j, label in enumerate(basis.labels):
        if label == (k, i):
            return basis, basis.values[j].copy()
    raise PreconditionError(f"no spherical harmonic with label {mode} on this grid")


def _drop_degree_one(u: np.ndarray, basis) -> np.ndarray:
    # subtract only the resolved degree-1 component; mass above the basis
    # cutoff stays untouched
    s = analyze(u, basis)
    c = np.where(basis.degrees == 1, s.coefficients, 0.0)
    dropped = Spectrum(c, s.degrees, s.labels, s.max_degree, 0.0)
    return u - synthesize(dropped, basis)


def _normalized_profile(grid, basis, y: np.ndarray, s: float) -> GraphSet:
    """Star set for amplitude ``s``: fix the volume, kill the degree-1 part."""
    e = volume_normalize(GraphSet(grid, s * y))
    u = _drop_degree_one(e.u, basis)
    return volume_normalize(GraphSet(grid, u))


def _ols_loglog(ds: np.ndarray, deltas: np.ndarray) -> dict:
    x = np.log(ds)
    y = np.log(deltas)
    n = len(x)
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    resid = y - slope * x - intercept
    # 95% normal-theory band on the slope
    se = math.sqrt(float(np.sum(resid**2)) / max(n - 2, 1) / sxx)
    return {
        "slope": slope,
        "intercept": intercept,
        "stderr": se,
        "ci95": [slope - 1.96 * se, slope + 1.96 * se],
        "n_used": n,
    }


def cmd_sharpness_sweep(cfg: ExperimentConfig) -> dict:
    """Sweep one harmonic mode over the amplitude grid and fit the exponent."""
    p = cfg.params()
    grid = sphere_grid(cfg.dim, cfg.grid_resolution())
    basis, y = _mode_profile(grid, cfg.mode)
    k = cfg.mode[0]
    gap = 0.5 * (mu(p, k) - mu(p, 1))

    amps = cfg.amplitude_grid()
    rows: List[SweepRow] = []
    for s in amps:
        if s == 0.0:
            rows.append(SweepRow(0.0, 0.0, 0.0, float("nan"), 0.0))
            continue
        e = _normalized_profile(grid, basis, y, float(s))
        d = deficit(e, p)
        a = fraenkel_asymmetry(e).value
        ratio = a / math.sqrt(d) if d > 0 else float("nan")
        rows.append(SweepRow(float(s), d, a, ratio, gap * float(s) ** 2))

    # fit over the middle 80% of the amplitude grid; the extremes carry the
    # quadrature floor on one end and higher-order terms on the other
    order = np.argsort(amps)
    n = len(order)
    trim = int(math.floor(0.1 * n))
    window = set(order[trim : n - trim].tolist())
    fit_idx = [
        i
        for i in range(n)
        if i in window
        and rows[i].amplitude > 0
        and rows[i].deficit > cfg.deficit_floor
        and rows[i].asymmetry > 0
    ]
    if len(fit_idx) < 4:
        raise PreconditionError(
            f"slope fit needs at least 4 valid rows, got {len(fit_idx)}"
        )
    fit = _ols_loglog(
        np.array([rows[i].deficit for i in fit_idx]),
        np.array([rows[i].asymmetry for i in fit_idx]),
    )

    stem = _out_stem(cfg, "sharpness-sweep")
    write_rows(stem + ".csv", SWEEP_HEADER, [r.as_list() for r in rows])
    payload = {
        "report_version": REPORT_VERSION,
        "config": cfg.echo("sharpness-sweep"),
        "rows": [r.as_list() for r in rows],
        "columns": list(SWEEP_HEADER),
        "fit": fit,
        "quadratic_gap": gap,
        "fit_indices": fit_idx,
    }
    report = write_report(stem + ".json", payload)

    def draw(fig):
        ax = fig.add_subplot(111)
        d = [rows[i].deficit for i in fit_idx]
        a = [rows[i].asymmetry for i in fit_idx]
        ax.loglog(d, a, "o", label="sweep rows")
        dd = np.geomspace(min(d), max(d), 50)
        ax.loglog(
            dd,
            np.exp(fit["intercept"]) * dd ** fit["slope"],
            "-",
            label=f"fit slope {fit['slope']:.3f}",
        )
        ax.set_xlabel("deficit D")
        ax.set_ylabel("asymmetry delta")
        ax.set_title(f"mode {cfg.mode}, dim {cfg.dim}, alpha {cfg.alpha}")
        ax.legend()
    _render_figure(cfg, stem + ".png", draw)
    return report


# ---------------------------------------------------------------------------
# stability battery


def _legendre_bump(dim: int, degree: int, axis: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    # zonal harmonic about a random axis: Chebyshev on the circle,
    # Legendre on the sphere; any degree-k zonal profile is admissible
    t = np.clip(nodes @ axis, -1.0, 1.0)
    c = np.zeros(degree + 1)
    c[degree] = 1.0
    if dim == 2:
        return np.cos(degree * np.arccos(t))
    return np.polynomial.legendre.legval(t, c)


def _random_graph_set(rng: np.random.Generator, grid) -> GraphSet:
    nodes = np.asarray(grid.nodes)
    u = np.zeros(len(grid))
    for _ in range(4):
        degree = int(rng.integers(2, 7))
        axis = rng.standard_normal(grid.dim)
        axis /= np.linalg.norm(axis)
        u += rng.standard_normal() * degree**-1.5 * _legendre_bump(
            grid.dim, degree, axis, nodes
        )
    amp = float(rng.uniform(0.05, 0.28))
    u *= amp / max(np.max(np.abs(u)), 1e-12)
    return volume_normalize(GraphSet(grid, u))


def _star_score_voxels(u_fn, dim: int, h: float, rmax: float = 1.45) -> VoxelSet:
    """Deterministic count-cut voxelization of a star profile.

    Cells are ranked by signed radial excess ``|c| - (1 + u(c/|c|))`` and the
    nearest ``round(omega / h^dim)`` kept, so the volume is exact to half a
    cell and calibration never drifts with the profile.
    """
    half = int(math.ceil(rmax / h)) + 1
    shape = (2 * half,) * dim
    origin = np.full(dim, -(half + 0.0) * h) - 0.5 * h
    idx = np.indices(shape).reshape(dim, -1).T
    centers = origin + (idx + 0.5) * h
    r = np.linalg.norm(centers, axis=1)
    score = r - 1.0
    far = r > 1e-9
    score[far] = r[far] - 1.0 - u_fn(centers[far] / r[far, None])
    n_target = int(round(unit_ball_volume(dim) / h**dim))
    keep = np.argsort(score, kind="stable")[:n_target]
    occ = np.zeros(shape, dtype=bool).reshape(-1)
    occ[keep] = True
    return VoxelSet(origin, h, occ.reshape(shape))


def _random_voxel_set(rng: np.random.Generator, dim: int, h: float) -> VoxelSet:
    terms = []
    for _ in range(3):
        degree = int(rng.integers(2, 6))
        axis = rng.standard_normal(dim)
        axis /= np.linalg.norm(axis)
        weight = float(rng.standard_normal()) * degree**-1.5
        terms.append((degree, axis, weight))
    amp = float(rng.uniform(0.05, 0.22))
    probe = rng.standard_normal((256, dim))
    probe /= np.linalg.norm(probe, axis=1)[:, None]

    def raw(d):
        out = np.zeros(len(d))
        for degree, axis, weight in terms:
            out += weight * _legendre_bump(dim, degree, axis, d)
        return out

    scale = amp / max(np.max(np.abs(raw(probe))), 1e-12)
    return _star_score_voxels(lambda d: scale * raw(d), dim, h)


BATTERY_HEADER = ("index", "family", "deficit", "asymmetry", "ratio", "degenerate")


def cmd_stability_battery(cfg: ExperimentConfig) -> dict:
    """Randomized quotient table over graph and voxel families."""
    p = cfg.params()
    grid = sphere_grid(cfg.dim, cfg.grid_resolution())
    h = cfg.voxel_spacing()
    n_graph = cfg.sample_count(100)
    n_voxel = max(1, n_graph // 5)

    rows = []
    violations = 0
    max_ratio = 0.0
    max_row = None
    sets: List[Tuple[str, object]] = [("graph", GraphSet(grid, np.zeros(len(grid))))]
    for j in range(1, n_graph):
        sets.append(("graph", _random_graph_set(_rng(cfg.seed, j), grid)))
    for j in range(n_voxel):
        sets.append(("voxel", _random_voxel_set(_rng(cfg.seed, 10_000 + j), cfg.dim, h)))

    for idx, (family, e) in enumerate(sets):
        d = deficit(e, p)
        a = fraenkel_asymmetry(e).value
        degenerate = a < 1e-9 and abs(d) < 1e-9
        if d < -cfg.ratio_tol:
            violations += 1
        ratio = float("nan")
        if not degenerate and d > 0:
            ratio = a / math.sqrt(d)
            if ratio > max_ratio:
                max_ratio, max_row = ratio, idx
        rows.append([idx, 0 if family == "graph" else 1, d, a, ratio, int(degenerate)])

    stem = _out_stem(cfg, "stability-battery")
    write_rows(stem + ".csv", BATTERY_HEADER, rows)
    payload = {
        "report_version": REPORT_VERSION,
        "config": cfg.echo("stability-battery"),
        "columns": list(BATTERY_HEADER),
        "rows": rows,
        "summary": {
            "n_graph": n_graph,
            "n_voxel": n_voxel,
            "violations": violations,
            "max_ratio": max_ratio,
            "max_ratio_row": max_row,
            "degenerate_rows": int(sum(r[5] for r in rows)),
        },
    }
    report = write_report(stem + ".json", payload)

    def draw(fig):
        ax = fig.add_subplot(111)
        for family, code, marker in (("graph", 0, "o"), ("voxel", 1, "s")):
            pts = [(r[2], r[3]) for r in rows if r[1] == code and not r[5] and r[2] > 0]
            if pts:
                d, a = zip(*pts)
                ax.plot(np.sqrt(d), a, marker, ms=4, ls="none", label=family)
        lim = ax.get_xlim()
        xx = np.linspace(0, lim[1], 20)
        ax.plot(xx, max_ratio * xx, "k--", lw=1, label=f"max ratio {max_ratio:.2f}")
        ax.set_xlabel("sqrt(deficit)")
        ax.set_ylabel("asymmetry")
        ax.legend()
    _render_figure(cfg, stem + ".png", draw)
    return report


# ---------------------------------------------------------------------------
# reduce


def cmd_reduce(cfg: ExperimentConfig, input_path: Optional[str]) -> dict:
    """Run the reduction pipeline on a stored voxel set and report stages."""
    path = input_path or cfg.voxel_file
    if not path:
        raise PreconditionError("reduce needs a voxel set file (argument or config)")
    v = load_voxel_set(path)
    if v.dim != cfg.dim and cfg.dim != 3:
        # an explicit --dim that contradicts the file is a usage error;
        # the default dim silently follows the file
        raise PreconditionError(
            f"voxel file is {v.dim}-dimensional, config says {cfg.dim}"
        )
    p = KernelParams(v.dim, cfg.alpha)
    grid = sphere_grid(v.dim, cfg.grid if cfg.grid is not None else _GRID_DEFAULT[v.dim])
    report_obj = reduce_pipeline(v, cfg.eps, p, grid=grid, xi=cfg.xi_value())

    flags = {
        name: {
            "passed": bool(chk.passed),
            "residual": chk.residual,
            "tolerance": chk.tolerance,
        }
        for name, chk in report_obj.flags.items()
    }
    stem = _out_stem(cfg, "reduce")
    payload = {
        "report_version": REPORT_VERSION,
        "config": cfg.echo("reduce"),
        "input": {
            "path": str(path),
            "dim": v.dim,
            "spacing": v.spacing,
            "volume": v.volume(),
        },
        "branch": report_obj.branch,
        "input_deficit": report_obj.input_deficit,
        "input_asymmetry": report_obj.input_asymmetry,
        "flags": flags,
        "center": None if report_obj.center is None else list(report_obj.center),
        "barycenter_residual": report_obj.barycenter_residual,
        "all_passed": bool(report_obj.all_passed()),
    }
    report = write_report(stem + ".json", payload)

    def draw(fig):
        ax = fig.add_subplot(111)
        names = list(flags)
        vals = []
        colors = []
        for name in names:
            chk = flags[name]
            tol = chk["tolerance"] if chk["tolerance"] else 1.0
            res = chk["residual"] if chk["residual"] is not None else 0.0
            vals.append(max(abs(res) / max(tol, 1e-300), 1e-12))
            colors.append("tab:green" if chk["passed"] else "tab:red")
        ax.barh(range(len(names)), vals, color=colors)
        ax.axvline(1.0, color="k", lw=1)
        ax.set_yticks(range(len(names)), names, fontsize=8)
        ax.set_xscale("log")
        ax.set_xlabel("|residual| / tolerance")
        ax.set_title(f"branch: {report_obj.branch}")
    _render_figure(cfg, stem + ".png", draw)
    return report


# ---------------------------------------------------------------------------
# spectral table


SPECTRAL_HEADER = ("degree", "eigenvalue", "direct_estimate", "relative_gap")


def cmd_spectral_table(cfg: ExperimentConfig) -> dict:
    """Closed-form eigenvalues with direct quadrature cross-checks."""
    K = cfg.k_max if cfg.k_max is not None else 16
    if not 0 < K <= MAX_TABLE_DEGREE:
        raise PreconditionError(
            f"k-max must lie in [1, {MAX_TABLE_DEGREE}], got {K}"
        )
    p = cfg.params()
    grid = sphere_grid(cfg.dim, cfg.grid_resolution())
    pairs = eigenvalue_rows(p, K)
    values = [m for _, m in pairs]
    if values[0] != 0.0:
        raise RieszstabError("degree-0 eigenvalue must vanish")
    if np.any(np.diff(values) <= 0):
        raise RieszstabError("eigenvalues must increase strictly with degree")

    check_deg = min(DIRECT_CHECK_DEGREE, K)
    basis = build_basis(grid, K=check_deg)
    direct = {0: 0.0}
    for j, label in enumerate(basis.labels):
        k = label[0]
        # one representative per degree is enough; the estimate is a
        # quadrature check, not a spectral decomposition
        if 1 <= k <= check_deg and k not in direct:
            direct[k] = seminorm_direct(grid, basis.values[j], p)

    rows = []
    for k, m in pairs:
        est = direct.get(k)
        gap = None
        if est is not None and m > 0:
            gap = (est - m) / m
        elif est is not None:
            gap = est
        rows.append([k, m, est, gap])

    stem = _out_stem(cfg, "spectral-table")
    write_rows(stem + ".csv", SPECTRAL_HEADER, rows)
    payload = {
        "report_version": REPORT_VERSION,
        "config": cfg.echo("spectral-table"),
        "columns": list(SPECTRAL_HEADER),
        "rows": rows,
        "summary": {
            "k_max": K,
            "checked_degrees": sorted(direct),
            "max_relative_gap": max(
                (abs(r[3]) for r in rows if r[3] is not None and r[0] > 0),
                default=None,
            ),
        },
    }
    report = write_report(stem + ".json", payload)

    def draw(fig):
        ax = fig.add_subplot(111)
        ks = [r[0] for r in rows]
        ax.plot(ks, [r[1] for r in rows], "o-", ms=4, label="eigenvalue")
        chk = [(r[0], r[2]) for r in rows if r[2] is not None]
        ax.plot(*zip(*chk), "x", ms=8, label="direct quadrature")
        ax.set_xlabel("degree k")
        ax.set_ylabel("mu_k")
        ax.set_title(f"dim {cfg.dim}, alpha {cfg.alpha}")
        ax.legend()
    _render_figure(cfg, stem + ".png", draw)
    return report


# ---------------------------------------------------------------------------
# verify


def _lattice_blob(rng: np.random.Generator, dim: int, h: float,
                  center_cells: np.ndarray) -> VoxelSet:
    """Random ball-plus-box union with centers on the integer lattice.

    Cell centers sit at integer multiples of ``h``, so any two blobs are
    cell-aligned and mutual energies stay on the convolution path.
    """
    radius = float(rng.uniform(0.25, 0.5))
    jitter = rng.uniform(-0.5 * h, 0.5 * h, dim)
    box_off = rng.uniform(-0.6, 0.6, dim)
    box_ext = rng.uniform(0.12, 0.4, dim)
    reach = max(radius, float(np.max(np.abs(box_off) + box_ext))) + 2 * h
    half = int(math.ceil(reach / h)) + 1
    origin_cells = center_cells - half
    origin = (origin_cells - 0.5) * h
    shape = (2 * half,) * dim
    idx = np.indices(shape).reshape(dim, -1).T
    centers = origin + (idx + 0.5) * h
    c0 = center_cells * h
    ball = np.linalg.norm(centers - (c0 + jitter), axis=1) <= radius
    box = np.all(np.abs(centers - (c0 + box_off)) <= box_ext, axis=1)
    return VoxelSet(origin, h, (ball | box).reshape(shape))


def _verify_tau1(cfg: ExperimentConfig, p: KernelParams, h: float, n: int) -> dict:
    margins = []
    for j in range(n):
        rng = _rng(cfg.seed, 20_000 + j)
        g = _lattice_blob(rng, p.dim, h, rng.integers(-8, 9, p.dim))
        hh = _lattice_blob(rng, p.dim, h, rng.integers(-8, 9, p.dim))
        bound = g.volume() * tau1(p, hh.volume())
        est = mutual_energy(g, hh, p)
        margins.append(bound - est.value - est.error_bound)
    return {
        "count": n,
        "min_margin": float(np.min(margins)),
        "all_positive": bool(np.min(margins) > 0),
    }


def _verify_potential(cfg: ExperimentConfig, p: KernelParams, h: float, n: int) -> dict:
    margins = []
    for j in range(n):
        rng = _rng(cfg.seed, 30_000 + j)
        hh = _lattice_blob(rng, p.dim, h, np.zeros(p.dim, dtype=int))
        centers = hh.centers()
        # keep the sample point a full cell away from occupied centers so
        # the midpoint sum cannot blow up inside a cell
        for _ in range(64):
            x = rng.uniform(-1.6, 1.6, p.dim)
            if np.min(np.linalg.norm(centers - x, axis=1)) >= h:
                break
        else:
            raise NonConvergenceError("could not place a potential sample point")
        pot = float(np.sum(np.linalg.norm(centers - x, axis=1) ** (p.alpha - p.dim)))
        pot *= h**p.dim
        margins.append(tau1(p, hh.volume()) - pot)
    return {
        "count": n,
        "min_margin": float(np.min(margins)),
        "all_positive": bool(np.min(margins) > 0),
    }


def _verify_transport(cfg: ExperimentConfig, p: KernelParams, h: float, n: int) -> dict:
    margins = []
    for j in range(n):
        rng = _rng(cfg.seed, 40_000 + j)
        g = _lattice_blob(rng, p.dim, h, rng.integers(-6, 7, p.dim))
        hh = _lattice_blob(rng, p.dim, h, rng.integers(-6, 7, p.dim))
        centers = hh.centers()
        if j % 2 == 0:
            # translation: the displacement is constant, the defect exact
            shift_cells = rng.integers(-24, 25, p.dim)
            while not np.any(shift_cells):
                shift_cells = rng.integers(-24, 25, p.dim)
            kk = VoxelSet(hh.origin + shift_cells * h, h, hh.occ.copy())
            defect = hh.volume() * min(1.0, float(np.linalg.norm(shift_cells * h)))
        else:
            # point reflection about a half-lattice center; flipping the
            # occupancy array realizes the map cell-for-cell
            c = rng.integers(-12, 13, p.dim) * (h / 2.0)
            flipped = hh.occ[tuple(slice(None, None, -1) for _ in range(p.dim))].copy()
            origin = 2.0 * c - hh.origin - np.array(hh.occ.shape) * h
            kk = VoxelSet(origin, h, flipped)
            move = np.minimum(1.0, 2.0 * np.linalg.norm(centers - c, axis=1))
            defect = float(np.sum(move)) * h**p.dim
        e_h = mutual_energy(g, hh, p)
        e_k = mutual_energy(g, kk, p)
        lhs = abs(e_h.value - e_k.value)
        rhs = tau2(p, g.volume()) * defect
        margins.append(rhs - lhs - e_h.error_bound - e_k.error_bound)
    return {
        "count": n,
        "min_margin": float(np.min(margins)),
        "all_positive": bool(np.min(margins) > 0),
    }


def _scattered_instance(dim: int, h: float) -> VoxelSet:
    """Eight far-apart chunks of total unit-ball volume, count-calibrated."""
    omega = unit_ball_volume(dim)
    if dim == 3:
        reach = 2.2
        corners = np.array(
            [[sx * reach, sy * reach, sz * reach]
             for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
        )
    else:
        radius = 4.0
        angles = np.arange(8) * (2 * np.pi / 8)
        corners = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    extent = float(np.max(np.abs(corners))) + 0.6
    half = int(math.ceil(extent / h)) + 2
    shape = (2 * half,) * dim
    origin = np.full(dim, -(half + 0.5) * h)
    idx = np.indices(shape).reshape(dim, -1).T
    centers = origin + (idx + 0.5) * h
    n_per = int(round(omega / h**dim / len(corners)))
    occ = np.zeros(shape, dtype=bool).reshape(-1)
    for c in corners:
        dist = np.linalg.norm(centers - c, axis=1)
        occ[np.argsort(dist, kind="stable")[:n_per]] = True
    return VoxelSet(origin, h, occ.reshape(shape))


def _verify_scattered(cfg: ExperimentConfig, p: KernelParams, h: float) -> dict:
    omega = unit_ball_volume(p.dim)
    xi = cfg.xi_value()
    v = _scattered_instance(p.dim, h)
    d = deficit(v, p)
    a = fraenkel_asymmetry(v).value
    bound = sparse_deficit_bound(p)
    gate = a >= 2.0 * (omega - xi)
    return {
        "deficit": d,
        "asymmetry": a,
        "xi": xi,
        "asymmetry_threshold": 2.0 * (omega - xi),
        "gate_reached": bool(gate),
        "deficit_bound": bound,
        "margin": d - bound,
        "all_positive": bool(gate and d > bound),
    }


def cmd_verify(cfg: ExperimentConfig) -> dict:
    """Certify the potential, transport and scattered-set inequalities."""
    p = cfg.params()
    h = cfg.voxel_spacing()
    n = cfg.sample_count(50)
    checks = {
        "mutual_bound": _verify_tau1(cfg, p, h, n),
        "potential_bound": _verify_potential(cfg, p, h, n),
        "transport_comparison": _verify_transport(cfg, p, h, n),
        "scattered_set": _verify_scattered(cfg, p, h),
    }
    stem = _out_stem(cfg, "verify")
    payload = {
        "report_version": REPORT_VERSION,
        "config": cfg.echo("verify"),
        "checks": checks,
        "all_positive": bool(all(c["all_positive"] for c in checks.values())),
    }
    report = write_report(stem + ".json", payload)

    def draw(fig):
        ax = fig.add_subplot(111)
        names = ["mutual_bound", "potential_bound", "transport_comparison", "scattered_set"]
        vals = [
            checks[n_]["min_margin"] if "min_margin" in checks[n_] else checks[n_]["margin"]
            for n_ in names
        ]
        colors = ["tab:green" if checks[n_]["all_positive"] else "tab:red" for n_ in names]
        ax.bar(range(len(names)), vals, color=colors)
        ax.set_xticks(range(len(names)), [n_.replace("_", "\n") for n_ in names], fontsize=8)
        ax.set_yscale("log")
        ax.set_ylabel("worst margin")
    _render_figure(cfg, stem + ".png", draw)
    return report


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="rieszstab",
        description="Riesz-energy stability experiments: sweeps, batteries, "
        "reduction runs and inequality certificates.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp_):
        sp_.add_argument("--dim", type=int, default=None, help="ambient dimension (2 or 3)")
        sp_.add_argument("--alpha", type=float, default=None, help="kernel exponent in (1, dim)")
        sp_.add_argument("--grid", type=int, default=None, help="sphere grid resolution")
        sp_.add_argument("--k-max", dest="k_max", type=int, default=None,
                         help="largest harmonic degree tabulated")
        sp_.add_argument("--seed", type=int, default=None, help="base RNG seed")
        sp_.add_argument("--samples", type=int, default=None,
                         help="instance count for randomized commands")
        sp_.add_argument("--eps", type=float, default=None,
                         help="annular-regime parameter for the pipeline")
        sp_.add_argument("--out", default=None, help="output path stem")
        sp_.add_argument("--config", default=None, help="JSON or TOML config file")
        sp_.add_argument("--no-figures", action="store_true",
                         help="skip PNG rendering next to the reports")

    names = (
        ("sharpness-sweep", "amplitude sweep with a log-log exponent fit"),
        ("stability-battery", "randomized deficit/asymmetry quotient table"),
        ("reduce", "run the reduction pipeline on a voxel set file"),
        ("spectral-table", "eigenvalue table with quadrature cross-checks"),
        ("verify", "inequality certificates on randomized instances"),
    )
    for name, help_ in names:
        sp_ = sub.add_parser(name, help=help_)
        common(sp_)
        if name == "reduce":
            sp_.add_argument("input", nargs="?", default=None,
                             help="voxel set file (falls back to config voxel_file)")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = build_config(args)
        if args.command == "sharpness-sweep":
            cmd_sharpness_sweep(cfg)
        elif args.command == "stability-battery":
            cmd_stability_battery(cfg)
        elif args.command == "reduce":
            cmd_reduce(cfg, args.input)
        elif args.command == "spectral-table":
            cmd_spectral_table(cfg)
        elif args.command == "verify":
            cmd_verify(cfg)
        else:  # pragma: no cover - argparse enforces the choices
            raise PreconditionError(f"unknown command {args.command!r}")
    except RieszstabError as exc:
        print(f"rieszstab: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"rieszstab: {exc}", file=sys.stderr)
        return OutputError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
