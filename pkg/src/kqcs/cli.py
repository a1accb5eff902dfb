"""Command-line entry point: ``kqcs <subcommand>``.

Subcommands: ``phantom``, ``mask``, ``reconstruct``, ``sweep``, ``odf``, ``info``.
Exit codes: 0 success, 2 bad configuration or input, 3 solver divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .angular import DEFAULT_KAPPAS, build_dictionary, load_dictionary
from .core import DiffusionVolume, GradientScheme, GridShape, fft_columns, load_tensor, save_tensor
from .evaluation import SweepSpec, export_odf_field, run_sweep, summarize
from .phantom import add_noise, default_phantom_spec, generate_phantom
from .sampling import KqMask, apply_mask, make_mask
from .solver import SolverConfig, solve
from .spatial import SpatialTransform

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

log = logging.getLogger("kqcs")


class ConfigError(Exception):
    pass


def _add_dictionary_args(p):
    p.add_argument("--angular-dict", help="user dictionary tensor (G x N_Gamma)")
    p.add_argument("--angular-odf", help="ODF tensor (P x N_Gamma) paired with --angular-dict")
    p.add_argument("--angular-atoms", type=int, default=97)
    p.add_argument("--angular-kappas", type=float, nargs="+", default=list(DEFAULT_KAPPAS))


def _dictionary(args, scheme):
    if args.angular_dict:
        return load_dictionary(scheme, args.angular_dict, args.angular_odf)
    return build_dictionary(scheme, args.angular_atoms, args.angular_kappas)


def _scheme(args):
    if getattr(args, "scheme", None):
        return GradientScheme.load_csv(args.scheme)
    return GradientScheme.fibonacci(args.ndirs, args.bval)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# -- subcommands -------------------------------------------------------------


def cmd_phantom(args):
    spec = default_phantom_spec(args.size, args.ndirs, args.bval, args.snr, args.seed)
    clean, dirs = generate_phantom(spec)
    noisy = add_noise(clean, spec.snr, seed=spec.seed, s0=spec.s0)
    prefix = args.out
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    save_tensor(f"{prefix}_clean", clean.data)
    save_tensor(f"{prefix}_noisy", noisy.data)
    spec.scheme.save_csv(f"{prefix}_scheme.csv")
    _write_json(f"{prefix}_truth.json", {
        "dims": list(spec.shape.dims),
        "snr": spec.snr,
        "seed": spec.seed,
        "fibers": [{"start": list(f.start), "end": list(f.end), "radius": f.radius} for f in spec.fibers],
        "directions": [d.tolist() for d in dirs],
    })
    counts = np.bincount([len(d) for d in dirs])
    print(f"wrote {prefix}_{{clean,noisy}}.{{json,bin}}, {prefix}_scheme.csv, {prefix}_truth.json; "
          f"fibres per voxel: {dict(enumerate(counts.tolist()))}")
    return EXIT_OK


def cmd_mask(args):
    if args.action == "load":
        m = KqMask.load(args.path)
        print(json.dumps({
            "mode": m.mode, "dims": list(m.shape.dims), "G": m.G, "Q": m.Q, "seed": m.seed,
            "n_samples": m.n_samples, "fraction": m.n_samples / (m.shape.V * m.G),
        }, indent=1))
        return EXIT_OK
    scheme = _scheme(args)
    shape = GridShape(args.size, args.size)
    m = make_mask(shape, scheme, args.k_frac, args.q_frac, args.seed, args.mask_mode, args.k_scheme,
                  floor=args.floor)
    m.save(args.path)
    print(f"wrote {args.path}: Q={m.Q}, {m.n_samples} samples ({m.n_samples / (shape.V * scheme.G):.2%})")
    return EXIT_OK


def cmd_reconstruct(args):
    mask = KqMask.load(args.mask)
    scheme = GradientScheme.load_csv(args.scheme)
    data = np.asarray(load_tensor(args.volume), dtype=float)
    if data.shape != (mask.shape.V, mask.G) or scheme.G != mask.G:
        raise ConfigError(f"volume {data.shape}, scheme G={scheme.G} and mask "
                          f"({mask.shape.V}, {mask.G}) do not agree")
    vol = DiffusionVolume(mask.shape, scheme, data)
    y = apply_mask(mask, fft_columns(vol.data, mask.shape))
    dictionary = _dictionary(args, scheme)
    spatial = SpatialTransform(args.spatial, mask.shape)
    cfg = SolverConfig(lam=args.lam, lam2=args.lam2, rho_init=args.rho0, rho_factor=args.rho_factor,
                       rho_max=args.rho_max, eps=args.eps, max_iters=args.max_iters, stepsize=args.stepsize)
    report = solve(args.model, y, mask, dictionary, spatial, cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_tensor(f"{args.out}_A", report.A_hat)
    _write_json(f"{args.out}_report.json", report.to_dict())
    recon = report.A_hat @ dictionary.atoms.T
    err = float(np.sum((recon - data) ** 2) / np.sum(data**2))
    print(f"{args.model}: {report.iterations_run} iterations, converged={report.converged}, "
          f"residual vs input {err:.4g}")
    return EXIT_OK


def cmd_sweep(args):
    spec = SweepSpec.load(args.config)
    if args.workers is not None:
        spec.workers = args.workers
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "sweep.csv"
    keep = spec.workers == 1
    cells = out / "cells"
    cells.mkdir(exist_ok=True)

    def progress(rec):
        print(f"{rec.model:5s} {rec.spatial:8s} k={rec.k_frac:<4g} q={rec.q_frac:<4g} seed={rec.seed} "
              f"lambda={rec.best_lambda:.3g} residual={rec.residual:.4g} [{rec.status}]", flush=True)

    result = run_sweep(spec, csv_path, keep_reports=keep, progress=progress)
    for rec in result.records:
        name = f"{rec.model}_{rec.spatial}_k{rec.k_frac:g}_q{rec.q_frac:g}_s{rec.seed}.json"
        body = {"record": {k: getattr(rec, k) for k in rec.__dataclass_fields__}}
        rep = result.reports.get(rec.key)
        if rep is not None:
            body["report"] = rep.to_dict()
        target = cells / name
        if rep is not None or not target.exists():
            _write_json(target, body)
    _write_json(out / "report.json", {"config_hash": spec.config_hash(), "spec": spec.to_dict(),
                                      "summary": summarize(result)})
    print(f"wrote {csv_path} ({len(result.records)} rows)")
    return EXIT_OK


def cmd_odf(args):
    A = np.asarray(load_tensor(args.coeffs), dtype=float)
    scheme = _scheme(args)
    dictionary = _dictionary(args, scheme)
    shape = GridShape.from_dims(args.dims) if args.dims else None
    written = export_odf_field(A, dictionary, args.out, shape)
    print("wrote " + ", ".join(written))
    return EXIT_OK


def cmd_info(args):
    if args.path:
        p = args.path
        if p.endswith(".json") and not os.path.exists(p[:-5] + ".bin"):
            with open(p) as fh:
                d = json.load(fh)
            if "k_masks" in d:
                return cmd_mask(argparse.Namespace(action="load", path=p))
            print(json.dumps(d, indent=1)[:2000])
            return EXIT_OK
        arr = load_tensor(p)
        print(f"tensor {arr.dtype} shape={list(arr.shape)} min={arr.real.min():.4g} max={arr.real.max():.4g}")
        return EXIT_OK
    scheme = GradientScheme.fibonacci(args.ndirs, args.bval)
    d = build_dictionary(scheme)
    shape = GridShape(args.size, args.size)
    print(f"kqcs {__version__}")
    print(f"default grid {shape.dims}, G={scheme.G}, b={scheme.b_value:g}")
    print(f"default dictionary: {d.n_atoms} atoms, lambda_max(Gamma^T Gamma)={d.gram_norm_sq():.4g}")
    for kind in ("haar", "gradient"):
        print(f"{kind}: lambda_max(Psi Psi^T)={SpatialTransform(kind, shape).norm_sq():.4g}")
    print(f"solver defaults: {SolverConfig()}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kqcs", description="Joint (k, q)-space compressed sensing for HARDI.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def grid_args(p, with_scheme=True):
        p.add_argument("--size", type=int, default=32)
        p.add_argument("--ndirs", type=int, default=64)
        p.add_argument("--bval", type=float, default=3000.0)
        if with_scheme:
            p.add_argument("--scheme", help="gradient table CSV (gx,gy,gz,b); overrides --ndirs/--bval")

    p = sub.add_parser("phantom", help="generate the synthetic crossing-fibre phantom")
    grid_args(p, with_scheme=False)
    p.add_argument("--snr", type=float, default=30.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("mask", help="create or inspect a (k, q) sampling mask")
    p.add_argument("action", choices=["save", "load"])
    p.add_argument("path")
    grid_args(p)
    p.add_argument("--k-frac", type=float, default=0.2)
    p.add_argument("--q-frac", type=float, default=0.2)
    p.add_argument("--k-scheme", choices=["radial", "lines"], default="radial")
    p.add_argument("--mask-mode", choices=["sep", "nonsep"], default="sep")
    p.add_argument("--floor", action="store_true", help="round sample counts down")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("reconstruct", help="reconstruct a volume from retrospective (k, q) samples")
    p.add_argument("--volume", required=True, help="fully sampled V x G tensor to subsample")
    p.add_argument("--scheme", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--model", choices=["saas", "prior"], default="saas")
    p.add_argument("--spatial", choices=["haar", "gradient", "tv"], default="gradient")
    p.add_argument("--lambda", dest="lam", type=float, default=3e-3)
    p.add_argument("--lambda2", dest="lam2", type=float, default=0.0)
    p.add_argument("--rho0", type=float, default=1.0)
    p.add_argument("--rho-factor", type=float, default=2.0)
    p.add_argument("--rho-max", type=float, default=16.0)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--max-iters", type=int, default=2000)
    p.add_argument("--stepsize", type=float, default=None, help="override the Lipschitz bound L")
    p.add_argument("--out", required=True, help="output prefix")
    _add_dictionary_args(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("sweep", help="run a residual-vs-sampling sweep from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("odf", help="export ODFs (tensor + SVG glyphs) from a coefficient tensor")
    p.add_argument("--coeffs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dims", type=int, nargs="+", help="grid dimensions (default: square)")
    grid_args(p)
    _add_dictionary_args(p)
    p.set_defaults(func=cmd_odf)

    p = sub.add_parser("info", help="show defaults, or describe a tensor/mask file")
    p.add_argument("path", nargs="?")
    grid_args(p, with_scheme=False)
    p.set_defaults(func=cmd_info)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FloatingPointError as exc:
        print(f"error: solver diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ValueError, KeyError, TypeError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
