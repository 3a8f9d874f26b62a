"""Command-line driver: ``simulate``, ``reconstruct`` and ``compare``.

Exit codes: 0 success / converged, 2 reconstruction stopped at
``max_iters``, 1 usage or IO error.

Any long option may also come from a ``--config`` file of ``key = value``
lines (keys use the option names, with ``-`` or ``_``); flags given on the
command line win.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data
from .geometry import detector_size_for, get_projector, make_geometry
from .problem import TVProblem, default_tau
from .regularizer import TVConfig
from .solvers import SOLVERS, SolverError, SolverOptions, solve

log = logging.getLogger("tvct")

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _ints(text) -> list:
    parts = [p for p in str(text).replace("x", ",").replace(" ", ",").split(",") if p]
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid sizes {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"sizes must be positive, got {text!r}")
    return vals


def _dims(text) -> tuple:
    vals = _ints(text)
    if len(vals) == 1:
        vals = vals * 3
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"need one or three sizes, got {text!r}")
    return tuple(vals)


def _pair(text) -> tuple:
    vals = _ints(text)
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"need one or two sizes, got {text!r}")
    return tuple(vals)


def _positive_float(text) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}")
    return v


def read_config(path) -> dict:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            key, sep, value = line.partition(":")
        if not sep:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="tvct", description="TV-regularized parallel-beam CT: simulate, reconstruct, compare.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("simulate", help="phantom, clean and noisy sinograms")
    sim.add_argument("--config")
    sim.add_argument("--dims", type=_dims, default=(16, 16, 16), help="N or NX,NY,NZ")
    sim.add_argument("--views", type=int, default=19)
    sim.add_argument("--detector", type=_pair, default=None, help="ROWSxCOLS or N; default ~1.42 x volume width")
    sim.add_argument("--pixel-size", type=_positive_float, default=1.0)
    sim.add_argument("--noise", type=float, default=0.01, help="relative noise norm")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--phantom-out", required=False)
    sim.add_argument("--clean-out", required=False)
    sim.add_argument("--noisy-out", required=False)

    rec = sub.add_parser("reconstruct", help="run one solver on a sinogram file")
    rec.add_argument("--config")
    rec.add_argument("--sinogram")
    rec.add_argument("--dims", type=_dims, default=None, help="volume grid; default from the sinogram header")
    rec.add_argument("--solver", default="upn")
    rec.add_argument("--alpha", type=_positive_float, default=0.01)
    rec.add_argument("--tau", type=_positive_float, default=None, help="default: 1e-4 x estimated dynamic range")
    rec.add_argument("--eps", type=_positive_float, default=1e-8)
    rec.add_argument("--max-iters", type=int, default=10000)
    rec.add_argument("--K", type=int, default=2)
    rec.add_argument("--sigma", type=float, default=0.1)
    rec.add_argument("--rho-L", type=float, default=1.3)
    rec.add_argument("--mu-init", type=_positive_float, default=None)
    rec.add_argument("--L-init", type=_positive_float, default=1.0)
    rec.add_argument("--out")
    rec.add_argument("--history")

    cmp_ = sub.add_parser("compare", help="summarize two or more convergence histories")
    cmp_.add_argument("histories", nargs="*")
    cmp_.add_argument("--eps", type=_positive_float, default=None, help="tolerance; default from history metadata")
    cmp_.add_argument("--reference", default=None, help="history of a tighter run whose final objective serves as optimum")
    cmp_.add_argument("--merged", default=None, help="write all histories into one CSV")
    return ap


def _parse(argv):
    ap = build_parser()
    args = ap.parse_args(argv)
    if getattr(args, "config", None):
        cfg = read_config(args.config)
        sub = ap._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**cfg)
        args = ap.parse_args(argv)
    return args


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _echo(args) -> str:
    cfg = {k: v for k, v in vars(args).items() if k not in ("verbose",)}
    return json.dumps(cfg, sort_keys=True, default=str)


def cmd_simulate(args) -> int:
    _require(args, "phantom_out", "clean_out", "noisy_out")
    if args.views < 1:
        raise UsageError("--views must be positive")
    if args.noise < 0:
        raise UsageError("--noise must be nonnegative")
    dims = args.dims
    rows, cols = args.detector if args.detector else (detector_size_for(dims[2]), detector_size_for(max(dims[0], dims[1])))
    g = make_geometry(args.views, rows, cols, args.pixel_size)
    phantom = data.generate_phantom(dims)
    clean = data.Sinogram(get_projector(g, dims).forward(phantom.flat), g)
    noise = data.NoiseSpec(args.noise, args.seed)
    noisy = data.add_noise(clean, noise)
    ratio = float(np.linalg.norm(noisy.flat - clean.flat) / np.linalg.norm(clean.flat)) if args.noise else 0.0
    extra = {"config": _echo(args)}
    data.write_volume(phantom, args.phantom_out, extra)
    data.write_sinogram(clean, args.clean_out, dims, phantom.spacing, extra)
    data.write_sinogram(noisy, args.noisy_out, dims, phantom.spacing,
                        {**extra, "rng": f"{data.RNG_ID} seed={args.seed}", "noise_level": repr(args.noise)})
    print(f"noise ratio {ratio:.12g}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    _require(args, "sinogram", "out", "history")
    if args.solver not in SOLVERS:
        raise UsageError(f"unknown solver {args.solver!r}; choose from {', '.join(sorted(SOLVERS))}")
    sino, header = data.read_sinogram(args.sinogram)
    dims = args.dims
    if dims is None:
        if "volume_dims" not in header:
            raise UsageError("sinogram header has no volume_dims; pass --dims")
        dims = _dims(header["volume_dims"])
    spacing = tuple(float(t) for t in header.get("spacing", "1 1 1").split())
    proj = get_projector(sino.geometry, dims, spacing)
    tau = args.tau if args.tau is not None else default_tau(proj, sino)
    p = TVProblem(sino.geometry, sino, dims, args.alpha, TVConfig(tau), spacing, projector=proj)
    try:
        opts = SolverOptions(eps=args.eps, max_iters=args.max_iters, K=args.K, sigma=args.sigma, rho_L=args.rho_L,
                             mu_init=args.mu_init, L_init=args.L_init)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    res = solve(args.solver, p, np.zeros(p.size), opts)
    extra = {"config": _echo(args), "tau": repr(tau), "solver": args.solver,
             "converged": str(res.converged).lower(), "iterations": str(res.iterations)}
    data.write_volume(p.to_volume(res.x), args.out, extra)
    data.write_history(res.history, args.history)
    meta = {"solver": args.solver, "eps": args.eps, "alpha": args.alpha, "tau": tau,
            "converged": res.converged, "iterations": res.iterations, "config": json.loads(_echo(args))}
    Path(str(args.history) + ".meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    last = res.history[-1]
    print(f"{args.solver}: {'converged' if res.converged else 'not converged'} after {res.iterations} iterations, "
          f"objective {last.objective:.12g}, |G|/N {last.gradmap_norm_scaled:.3e}")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def _meta(path) -> dict:
    mp = Path(str(path) + ".meta.json")
    if mp.exists():
        try:
            return json.loads(mp.read_text())
        except (OSError, ValueError):
            log.warning("ignoring unreadable metadata %s", mp)
    return {}


def summarize(records, eps):
    """``(iterations to tolerance or None, final objective, total line-search trials)``."""
    reached = next((r.iter for r in records if r.gradmap_norm_scaled <= eps), None) if eps else None
    return reached, records[-1].objective, sum(r.line_search_count for r in records)


def cmd_compare(args) -> int:
    if len(args.histories) < 2:
        raise UsageError("compare needs at least two history files")
    runs = []
    for path in args.histories:
        runs.append((path, data.read_history(path), _meta(path)))
    eps_values = {m.get("eps") for _, _, m in runs if m.get("eps") is not None}
    eps = args.eps
    if eps is None:
        if len(eps_values) > 1:
            print(f"warning: histories were run with different tolerances {sorted(eps_values)}", file=sys.stderr)
        eps = min(eps_values) if eps_values else None
    elif eps_values and eps_values != {eps}:
        print(f"warning: --eps {eps} differs from recorded tolerances {sorted(eps_values)}", file=sys.stderr)
    f_star = data.read_history(args.reference)[-1].objective if args.reference else None

    header = ["history", "solver", "iters_to_tol", "final_objective", "line_search_trials"]
    if f_star is not None:
        header.append("rel_gap")
    rows = []
    for path, recs, meta in runs:
        reached, f_final, trials = summarize(recs, eps)
        row = [str(path), meta.get("solver", Path(path).stem),
               str(reached) if reached is not None else f">{recs[-1].iter}", repr(f_final), str(trials)]
        if f_star is not None:
            row.append(f"{(f_final - f_star) / abs(f_star):.3e}" if f_star else "nan")
        rows.append(row)
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    print(f"tolerance: {eps if eps is not None else 'unknown'}")
    for row in [header] + rows:
        print("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())

    if args.merged:
        with open(args.merged, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("history", "solver") + data.HISTORY_COLUMNS)
            for (path, recs, meta), row in zip(runs, rows):
                for r in recs:
                    w.writerow([path, row[1]] + [data._fmt(getattr(r, c)) for c in data.HISTORY_COLUMNS])
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "reconstruct": cmd_reconstruct, "compare": cmd_compare}


def main(argv=None) -> int:
    try:
        args = _parse(argv)
    except UsageError as exc:
        print(f"tvct: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"tvct {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError, SolverError) as exc:
        print(f"tvct {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
