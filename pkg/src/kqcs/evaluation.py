"""Sweep harness, error metrics, ODF peak analysis and ODF glyph export.

A sweep runs every ``(model, spatial transform, k fraction, q fraction, seed)``
cell on one phantom, solves over a lambda grid and keeps the lambda with the
lowest residual against the fully sampled data. Rows go to a CSV as cells
finish; a rerun skips cells whose key is already present, so an interrupted
sweep resumes where it stopped.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .angular import AngularDictionary, build_dictionary, estimate_odf
from .core import DiffusionVolume, GridShape, fft_columns, save_tensor
from .phantom import add_noise, default_phantom_spec, generate_phantom
from .sampling import apply_mask, make_mask
from .solver import SolveReport, SolverConfig, solve
from .spatial import SpatialTransform

__all__ = [
    "CSV_SCHEMA_VERSION",
    "CSV_COLUMNS",
    "residual_error",
    "odf_peaks",
    "crossing_recovery",
    "SweepSpec",
    "SweepRecord",
    "SweepResult",
    "Benchmark",
    "make_benchmark",
    "solve_cell",
    "run_sweep",
    "summarize",
    "export_odf_field",
    "render_odf_svg",
]

logger = logging.getLogger(__name__)

CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = [
    "schema", "config_hash", "model", "spatial", "k_frac", "q_frac", "seed", "mask_seed",
    "n_samples", "status", "best_lambda", "best_lambda2", "residual", "residual_clean",
    "iterations", "converged", "wall_time",
]
TIMING_COLUMNS = ("wall_time",)


def residual_error(recon, truth) -> float:
    """``||recon - truth||_F^2 / ||truth||_F^2``; accepts volumes or arrays."""
    r = recon.data if isinstance(recon, DiffusionVolume) else np.asarray(recon, dtype=float)
    t = truth.data if isinstance(truth, DiffusionVolume) else np.asarray(truth, dtype=float)
    if r.shape != t.shape:
        raise ValueError(f"shape mismatch: {r.shape} vs {t.shape}")
    denom = float(np.sum(t * t))
    if denom == 0:
        raise ValueError("truth has zero norm")
    return float(np.sum((r - t) ** 2)) / denom


# -- ODF peaks ---------------------------------------------------------------


def _neighbours(display, radius_deg):
    cos = np.abs(display @ display.T)
    near = cos >= np.cos(np.deg2rad(radius_deg))
    np.fill_diagonal(near, False)
    return near


def odf_peaks(odf, display, neighbour_deg: float = 12.0, min_rel: float = 0.25, max_peaks: int = 3,
              _near=None) -> np.ndarray:
    """Local maxima of one ODF on antipodally symmetric display directions.

    A direction is a peak when its value is at least that of every direction
    within ``neighbour_deg`` and at least ``min_rel`` times the global maximum.
    Returns up to ``max_peaks`` unit vectors, strongest first.
    """
    odf = np.asarray(odf, dtype=float)
    if odf.max(initial=0.0) <= 0:
        return np.zeros((0, 3))
    near = _neighbours(display, neighbour_deg) if _near is None else _near
    # mask out self-comparisons with -inf, then compare against the neighbourhood maximum
    nb_max = np.where(near, odf[None, :], -np.inf).max(axis=1)
    is_peak = (odf >= nb_max) & (odf >= min_rel * odf.max())
    idx = np.flatnonzero(is_peak)
    idx = idx[np.argsort(-odf[idx], kind="stable")]
    # plateaus can yield adjacent equal maxima; keep the first of each neighbourhood
    kept = []
    for i in idx:
        if not any(near[i, j] for j in kept):
            kept.append(i)
        if len(kept) == max_peaks:
            break
    return display[kept]


def _angle_deg(u, v):
    return float(np.degrees(np.arccos(np.clip(abs(float(np.dot(u, v))), 0.0, 1.0))))


def _match_all(truth, peaks, tol_deg):
    # every true direction needs its own peak within tol (tiny assignment problem, brute force)
    from itertools import permutations

    if len(peaks) < len(truth):
        return False
    for perm in permutations(range(len(peaks)), len(truth)):
        if all(_angle_deg(truth[i], peaks[j]) <= tol_deg for i, j in enumerate(perm)):
            return True
    return False


def crossing_recovery(odf, display, truth_dirs, tol_deg: float = 20.0, n_fibres: int = 2, **peak_kw):
    """Count voxels with ``n_fibres`` true directions whose ODF peaks recover all of them.

    Only the ``n_fibres`` strongest peaks are considered (unless ``max_peaks``
    is passed), so a spurious lobe that outranks a true one counts as a miss.

    Parameters
    ----------
    odf : ndarray, shape (V, P)
    display : ndarray, shape (P, 3)
    truth_dirs : list of (n_v, 3) arrays
        Ground-truth fibre directions per voxel, as returned by
        :func:`kqcs.phantom.generate_phantom`.

    Returns
    -------
    recovered : int
    total : int
    flags : dict
        Voxel index to bool.
    """
    near = _neighbours(display, peak_kw.pop("neighbour_deg", 12.0))
    peak_kw.setdefault("max_peaks", n_fibres)
    flags = {}
    for v, dirs in enumerate(truth_dirs):
        if len(dirs) != n_fibres:
            continue
        peaks = odf_peaks(odf[v], display, _near=near, **peak_kw)
        flags[v] = _match_all(dirs, peaks, tol_deg)
    return sum(flags.values()), len(flags), flags


# -- benchmark and sweep -------------------------------------------------------


@dataclass
class SweepSpec:
    """Everything that determines a sweep's rows.

    ``prior_l1_ratios`` sets the Prior's ``lambda_1 = ratio * lambda_2`` for
    each ``lambda_2`` in ``lambda_grid``; ``prior_lambda_grid`` overrides the
    grid for the Prior if given. ``lambda_grid`` defaults to 10 log-spaced
    values.
    """

    k_fractions: list = field(default_factory=lambda: [0.1, 0.2, 0.4, 1.0])
    q_fractions: list = field(default_factory=lambda: [0.1, 0.2, 0.4, 1.0])
    lambda_grid: list = field(default_factory=lambda: [float(v) for v in np.logspace(-4, -1, 10)])
    prior_lambda_grid: list | None = None
    prior_l1_ratios: list = field(default_factory=lambda: [1.0])
    models: list = field(default_factory=lambda: ["saas", "prior"])
    spatial: list = field(default_factory=lambda: ["gradient"])
    n_seeds: int = 3
    seed: int = 0
    mask_mode: str = "separable"
    k_scheme: str = "radial"
    floor_counts: bool = False
    size: int = 32
    n_dirs: int = 64
    b_value: float = 3000.0
    snr: float = 30.0
    noise_seed: int = 1
    n_atoms: int = 97
    concentrations: list = field(default_factory=lambda: [2.0, 4.0, 8.0])
    solver: dict = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        for name in ("k_fractions", "q_fractions"):
            vals = getattr(self, name)
            if not vals or any(not 0.0 < float(f) <= 1.0 for f in vals):
                raise ValueError(f"{name} must be a non-empty list of values in (0, 1]")
        grids = [self.lambda_grid] + ([self.prior_lambda_grid] if self.prior_lambda_grid is not None else [])
        for grid in grids:
            if not grid or any(float(v) <= 0 for v in grid):
                raise ValueError("lambda grids must be non-empty and positive")
        if any(float(r) < 0 for r in self.prior_l1_ratios) or not self.prior_l1_ratios:
            raise ValueError("prior_l1_ratios must be non-empty and >= 0")
        bad = set(self.models) - {"saas", "prior"}
        if bad or not self.models:
            raise ValueError(f"unknown models {sorted(bad)}; use saas and/or prior")
        for kind in self.spatial:
            SpatialTransform(kind, GridShape(2, 2))
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        unknown = set(self.solver) - set(SolverConfig.__dataclass_fields__) - {"lam", "lam2"}
        if unknown:
            raise ValueError(f"unknown solver settings {sorted(unknown)}")
        SolverConfig(**self.solver)

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown sweep settings {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SweepSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        """Short digest of every setting that affects results (``workers`` excluded)."""
        d = self.to_dict()
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def mask_seed(self, seed_index: int) -> int:
        return self.seed + 1000 * seed_index

    def cells(self):
        """Cell keys in canonical order."""
        for model in self.models:
            for kind in self.spatial:
                for k in self.k_fractions:
                    for q in self.q_fractions:
                        for s in range(self.n_seeds):
                            yield (model, kind, float(k), float(q), s)


@dataclass
class Benchmark:
    """Phantom data and dictionary shared by every cell of a sweep."""

    clean: DiffusionVolume
    noisy: DiffusionVolume
    truth_dirs: list
    dictionary: AngularDictionary
    kspace: np.ndarray

    @property
    def shape(self) -> GridShape:
        return self.clean.shape

    @property
    def scheme(self):
        return self.clean.scheme


def make_benchmark(spec: SweepSpec) -> Benchmark:
    pspec = default_phantom_spec(spec.size, spec.n_dirs, spec.b_value, spec.snr, spec.noise_seed)
    clean, dirs = generate_phantom(pspec)
    noisy = add_noise(clean, spec.snr, seed=spec.noise_seed, s0=pspec.s0)
    dictionary = build_dictionary(pspec.scheme, spec.n_atoms, spec.concentrations)
    return Benchmark(clean, noisy, dirs, dictionary, fft_columns(noisy.data, pspec.shape))


@dataclass(frozen=True)
class SweepRecord:
    model: str
    spatial: str
    k_frac: float
    q_frac: float
    seed: int
    mask_seed: int
    n_samples: int
    status: str
    best_lambda: float
    best_lambda2: float
    residual: float
    residual_clean: float
    iterations: int
    converged: bool
    wall_time: float

    @property
    def key(self):
        return (self.model, self.spatial, self.k_frac, self.q_frac, self.seed)

    def to_row(self, config_hash: str) -> dict:
        row = {"schema": CSV_SCHEMA_VERSION, "config_hash": config_hash}
        for name in CSV_COLUMNS[2:]:
            val = getattr(self, name)
            row[name] = repr(val) if isinstance(val, float) else val
        return row

    @classmethod
    def from_row(cls, row: dict) -> "SweepRecord":
        conv = {
            "k_frac": float, "q_frac": float, "seed": int, "mask_seed": int, "n_samples": int,
            "best_lambda": float, "best_lambda2": float, "residual": float, "residual_clean": float,
            "iterations": int, "converged": lambda s: s == "True", "wall_time": float,
        }
        return cls(**{k: conv.get(k, str)(row[k]) for k in CSV_COLUMNS[2:]})


@dataclass
class SweepResult:
    spec: SweepSpec
    records: list
    reports: dict = field(default_factory=dict, repr=False)

    def select(self, **where) -> list:
        return [r for r in self.records if all(getattr(r, k) == v for k, v in where.items())]

    def mean_residual(self, **where) -> float:
        vals = [r.residual for r in self.select(**where) if r.status == "ok"]
        return float(np.mean(vals)) if vals else float("nan")


def _lambda_pairs(spec: SweepSpec, model: str):
    if model == "saas":
        return [(float(lam), 0.0) for lam in spec.lambda_grid]
    grid = spec.prior_lambda_grid if spec.prior_lambda_grid is not None else spec.lambda_grid
    return [(float(r) * float(lam2), float(lam2)) for lam2 in grid for r in spec.prior_l1_ratios]


def solve_cell(bench: Benchmark, spec: SweepSpec, model: str, kind: str, k_frac: float, q_frac: float,
               seed_index: int):
    """Best-lambda solve of one cell. Returns ``(record, best_report)``."""
    t0 = time.perf_counter()
    mseed = spec.mask_seed(seed_index)
    mask = make_mask(bench.shape, bench.scheme, k_frac, q_frac, mseed, spec.mask_mode, spec.k_scheme,
                     floor=spec.floor_counts)
    y = apply_mask(mask, bench.kspace)
    spatial = SpatialTransform(kind, bench.shape)
    best = None
    status = "ok"
    iters = 0
    for lam, lam2 in _lambda_pairs(spec, model):
        cfg = SolverConfig(**{**spec.solver, "lam": lam, "lam2": lam2})
        try:
            rep = solve(model, y, mask, bench.dictionary, spatial, cfg)
        except FloatingPointError as exc:
            logger.warning("cell %s/%s k=%g q=%g seed=%d lam=%g diverged: %s", model, kind, k_frac, q_frac,
                           seed_index, lam, exc)
            status = "diverged"
            continue
        iters += rep.iterations_run
        recon = rep.A_hat @ bench.dictionary.atoms.T
        err = residual_error(recon, bench.noisy)
        if best is None or err < best[0]:
            best = (err, lam, lam2, rep, recon)
    if best is None:
        rec = SweepRecord(model, kind, k_frac, q_frac, seed_index, mseed, mask.n_samples, "diverged",
                          float("nan"), float("nan"), float("nan"), float("nan"), iters, False,
                          time.perf_counter() - t0)
        return rec, None
    err, lam, lam2, rep, recon = best
    lam_main, lam_second = (lam, 0.0) if model == "saas" else (lam2, lam)
    rec = SweepRecord(model, kind, k_frac, q_frac, seed_index, mseed, mask.n_samples, status,
                      lam_main, lam_second, err, residual_error(recon, bench.clean), rep.iterations_run,
                      rep.converged, time.perf_counter() - t0)
    return rec, rep


def _read_existing(path, config_hash):
    done = {}
    if not path or not os.path.exists(path):
        return done
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row.get("config_hash") != config_hash:
                raise ValueError(f"{path} was written by a different sweep config ({row.get('config_hash')})")
            rec = SweepRecord.from_row(row)
            done[rec.key] = rec
    return done


_WORKER = {}


def _worker_init(spec_dict):
    spec = SweepSpec.from_dict(spec_dict)
    _WORKER["spec"] = spec
    _WORKER["bench"] = make_benchmark(spec)


def _worker_run(key):
    model, kind, k, q, s = key
    rec, _ = solve_cell(_WORKER["bench"], _WORKER["spec"], model, kind, k, q, s)
    return rec


def run_sweep(spec: SweepSpec, csv_path=None, keep_reports: bool = False, progress=None) -> SweepResult:
    """Run (or resume) a sweep.

    Rows are written to ``csv_path`` in canonical cell order, so a sweep run
    in one go and one resumed after an interruption produce identical files
    up to ``wall_time``. With ``keep_reports`` the best-lambda
    :class:`SolveReport` of each cell is kept (serial runs only).
    """
    chash = spec.config_hash()
    done = _read_existing(csv_path, chash)
    keys = list(spec.cells())
    todo = [k for k in keys if k not in done]
    fh = writer = None
    if csv_path:
        fresh = not os.path.exists(csv_path) or os.path.getsize(csv_path) == 0
        fh = open(csv_path, "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        if fresh:
            writer.writeheader()
    reports = {}
    results = dict(done)
    try:
        def emit(rec):
            results[rec.key] = rec
            if writer is not None:
                writer.writerow(rec.to_row(chash))
                fh.flush()
            if progress is not None:
                progress(rec)

        if spec.workers > 1 and len(todo) > 1 and not keep_reports:
            # completed cells are buffered and written in canonical order by this (single) writer
            with ProcessPoolExecutor(spec.workers, initializer=_worker_init,
                                     initargs=(spec.to_dict(),)) as pool:
                pending = {}
                order = iter(todo)
                next_key = next(order, None)
                for rec in pool.map(_worker_run, todo):
                    pending[rec.key] = rec
                    while next_key is not None and next_key in pending:
                        emit(pending.pop(next_key))
                        next_key = next(order, None)
        elif todo:
            bench = make_benchmark(spec)
            for key in todo:
                rec, rep = solve_cell(bench, spec, *key)
                if keep_reports and rep is not None:
                    reports[key] = rep
                emit(rec)
    finally:
        if fh is not None:
            fh.close()
    return SweepResult(spec, [results[k] for k in keys], reports)


def summarize(result: SweepResult) -> list:
    """Mean residual per (model, spatial, k, q) over seeds, as a list of dicts."""
    groups = {}
    for r in result.records:
        groups.setdefault((r.model, r.spatial, r.k_frac, r.q_frac), []).append(r)
    out = []
    for (model, kind, k, q), recs in groups.items():
        ok = [r.residual for r in recs if r.status == "ok"]
        out.append({"model": model, "spatial": kind, "k_frac": k, "q_frac": q, "n": len(ok),
                    "mean_residual": float(np.mean(ok)) if ok else float("nan"),
                    "std_residual": float(np.std(ok)) if ok else float("nan")})
    return out


# -- ODF export -------------------------------------------------------------------


def _in_plane_profile(odf_row, display, n_angles):
    theta = np.linspace(0.0, 2.0 * np.pi, n_angles, endpoint=False)
    dirs = np.column_stack([np.cos(theta), np.sin(theta), np.zeros_like(theta)])
    # nearest display direction, antipodally
    idx = np.argmax(np.abs(dirs @ display.T), axis=1)
    return theta, odf_row[idx]


def render_odf_svg(odf, display, shape: GridShape, cell: float = 20.0, n_angles: int = 72,
                   background=None) -> str:
    """Polar glyph per voxel of a 2D slice, each scaled to its own maximum.

    Glyphs are drawn with x to the right and y up. Voxels whose ODF is all zero
    get no glyph.
    """
    if shape.ndim != 2:
        raise ValueError("ODF glyph rendering is implemented for 2D slices only")
    nx, ny = shape.dims
    width, height = nx * cell, ny * cell
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:g}" height="{height:g}" '
        f'viewBox="0 0 {width:g} {height:g}">',
        f'<rect width="{width:g}" height="{height:g}" fill="{background or "white"}"/>',
    ]
    for v in range(shape.V):
        row = np.asarray(odf[v], dtype=float)
        peak = row.max(initial=0.0)
        if peak <= 0:
            continue
        x, y = v % nx, v // nx
        cx, cy = (x + 0.5) * cell, (ny - y - 0.5) * cell
        theta, prof = _in_plane_profile(row, display, n_angles)
        r = 0.45 * cell * prof / peak
        pts = " ".join(f"{cx + ri * np.cos(t):.2f},{cy - ri * np.sin(t):.2f}" for ri, t in zip(r, theta))
        parts.append(f'<polygon data-voxel="{v}" points="{pts}" fill="#c0392b" stroke="none"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export_odf_field(report, dictionary: AngularDictionary, path, shape: GridShape | None = None) -> tuple:
    """Write per-voxel ODFs as a ``V x P`` tensor at ``path`` and a glyph grid at ``path.svg``.

    ``report`` is a :class:`SolveReport` or a coefficient matrix. For 2D grids
    the SVG is written too; ``shape`` defaults to a square grid. Returns the
    paths written.
    """
    A = report.A_hat if isinstance(report, SolveReport) else np.asarray(report, dtype=float)
    if shape is None:
        n = int(round(np.sqrt(A.shape[0])))
        if n * n != A.shape[0]:
            raise ValueError("cannot infer a square grid; pass shape")
        shape = GridShape(n, n)
    if shape.V != A.shape[0]:
        raise ValueError(f"grid has {shape.V} voxels, coefficients have {A.shape[0]} rows")
    odf = estimate_odf(dictionary, A)
    path = os.fspath(path)
    save_tensor(path, odf)
    written = [path]
    if shape.ndim == 2:
        svg_path = path + ".svg"
        with open(svg_path, "w") as fh:
            fh.write(render_odf_svg(odf, dictionary.display_directions, shape))
        written.append(svg_path)
    return tuple(written)
