"""``lab``: run experiments from a TOML config and write CSV tables plus a manifest.

Every CSV has the columns ``T, replicate, statistic, value``.  Per-replica
values carry their replica index; aggregate rows (means, fitted slopes,
bounds) use ``replicate = -1``.  Floats are written with ``repr`` so
repeated runs produce byte-identical files.
"""

import argparse
import csv
import hashlib
import importlib.metadata as md
import json
import math
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

import numpy as np

from . import experiments as ex
from .errors import ConfigError, DomainError, InputError, NumericalError, ResourceError
from .sde import dump_trajectory, resolve_threads, run_replicas, simulate, stationarity_report

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_USAGE = 0, 2, 3, 64

COMMANDS = ("simulate", "rates", "limit", "bernstein", "psi-moments", "mixture",
            "spectrum", "ot-selftest")
NEEDS_CONFIG = {"simulate", "rates", "limit", "bernstein", "psi-moments", "mixture"}

SECTIONS = {
    "space": ("kind", "d", "potential", "a", "drift"),
    "sde": ("h", "stride", "refine", "init", "x0", "r"),
    "spectral": ("N", "zeta", "modes", "moments"),
    "wasserstein": ("p", "q", "grid", "solver", "sinkhorn_reg"),
    "experiments": ("T", "replicas", "seed", "bootstrap", "shift", "levels", "alpha",
                    "limit_draws", "nu", "nu_center", "nu_width", "thetas"),
}


# -- config ----------------------------------------------------------------------------


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ("inf" if v > 0 else "-inf")
    return str(v)


def config_to_toml(cfg):
    d = cfg.to_dict()
    out = []
    for section, keys in SECTIONS.items():
        out.append(f"[{section}]")
        out.extend(f"{k} = {_toml_value(d[k])}" for k in keys)
        out.append("")
    return "\n".join(out)


def config_hash(command, cfg):
    blob = json.dumps({"command": command, **cfg.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def load_config(args):
    mapping = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"--config: no such file {str(path)!r}")
        try:
            mapping = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"--config: {path}: {exc}") from exc
    elif args.command in NEEDS_CONFIG and not args.print_config:
        raise ConfigError(f"--config is required for '{args.command}'")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.reps is not None:
        overrides["replicas"] = args.reps
    if args.T is not None:
        try:
            overrides["T"] = tuple(float(t) for t in args.T.split(","))
        except ValueError as exc:
            raise ConfigError(f"--T: expected comma-separated numbers, got {args.T!r}") from exc
    try:
        cfg = ex.ExperimentConfig.from_mapping(mapping)
        return cfg.replace(**overrides) if overrides else cfg
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# -- output -------------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_rows(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("T", "replicate", "statistic", "value"))
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _versions():
    out = {"python": platform.python_version()}
    for name in ("ergowass", "numpy", "scipy", "numba", "pot"):
        try:
            out[name] = md.version(name)
        except md.PackageNotFoundError:
            out[name] = None
    return out


def code_hash():
    h = hashlib.sha256()
    for src in sorted(Path(__file__).parent.glob("*.py")):
        h.update(src.name.encode())
        h.update(src.read_bytes())
    return h.hexdigest()


# -- commands -------------------------------------------------------------------------------------


def _t_last(cfg):
    return cfg.T[-1]


def cmd_simulate(cfg, out, threads):
    space = cfg.space()
    T = _t_last(cfg)

    def one(rep):
        tr = simulate(space, cfg.h, T, cfg.initial_law(), cfg.seed, rep,
                      stride=cfg.stride, refine=cfg.refine)
        path = out / f"trajectory_{rep:04d}.bin"
        dump_trajectory(tr, path)
        return tr, path

    res = run_replicas(one, range(cfg.replicas), threads)
    files = [p for _, p in res]
    rows = []
    if cfg.init == "stationary":
        basis = cfg.basis().truncated(min(8, cfg.N or 8))
        for r in stationarity_report([t for t, _ in res], basis, basis.N):
            rows.append((T, -1, f"mean_phi_{r['mode']}", r["mean"]))
            rows.append((T, -1, f"stderr_phi_{r['mode']}", r["stderr"]))
    files.append(write_rows(out / "simulate.csv", rows))
    print(f"wrote {cfg.replicas} trajectories to {out}")
    return files


def cmd_rates(cfg, out, threads):
    res = ex.run_rate_experiment(cfg, threads)
    rows = list(res.rows)
    for t, e, lo, hi in zip(res.T, res.estimates, res.ci_low, res.ci_high):
        rows += [(t, -1, "moment_root", e), (t, -1, "ci_low", lo), (t, -1, "ci_high", hi),
                 (t, -1, "gamma", ex.gamma_rate(res.d, t))]
    if res.fit is not None:
        rows += [(math.nan, -1, "slope", res.fit.slope), (math.nan, -1, "slope_ci_low", res.fit.ci[0]),
                 (math.nan, -1, "slope_ci_high", res.fit.ci[1]),
                 (math.nan, -1, "reference_slope", res.reference)]
        print(f"slope {res.fit.slope:.4f}  95% CI [{res.fit.ci[0]:.4f}, {res.fit.ci[1]:.4f}]"
              f"  reference {res.reference:.4f}")
    for k, v in res.extras.items():
        rows.append((math.nan, -1, k, float(v)))
    return [write_rows(out / "rates.csv", rows)]


def cmd_limit(cfg, out, threads):
    rep = ex.run_limit_experiment(cfg, threads)
    rows = list(rep.rows)
    gap = rep.gap_moment(1.0)
    for j, t in enumerate(rep.T):
        rows += [(t, -1, "mean_TW2sq", rep.mean_scaled(j)[0]), (t, -1, "mean_abs_gap", gap[j])]
    rows += [(rep.T[-1], -1, "ks_vs_limit", rep.ks),
             (math.nan, -1, "limit_mean", rep.target_mean),
             (math.nan, -1, "limit_second_moment", rep.target_second),
             (rep.T[-1], -1, "moment_ratio_1", rep.moment_ratio(1)),
             (rep.T[-1], -1, "moment_ratio_2", rep.moment_ratio(2))]
    m, se = rep.mean_scaled()
    print(f"E[T W2^2] = {m:.6g} ± {se:.2g}  limit mean {rep.target_mean:.6g}  KS {rep.ks:.4f}")
    return [write_rows(out / "limit.csv", rows)]


def cmd_bernstein(cfg, out, threads):
    rep = ex.run_bernstein_experiment(cfg, threads)
    rows = list(rep.rows)
    T = _t_last(cfg)
    for k, (x, f, s, b) in enumerate(zip(rep.levels, rep.frequencies, rep.stderr, rep.bound)):
        rows += [(T, -1, f"level_{k}", x), (T, -1, f"frequency_{k}", f),
                 (T, -1, f"stderr_{k}", s), (T, -1, f"bound_{k}", b)]
    rows += [(T, -1, "alpha_hat", rep.alpha_hat), (T, -1, "sigma_sq", rep.params.sigma_sq),
             (T, -1, "scale", float(rep.params.scale))]
    print(f"minimal alpha {rep.alpha_hat:.4g}; bound at alpha={cfg.alpha:g} dominates: {rep.dominated}")
    return [write_rows(out / "bernstein.csv", rows)]


def cmd_psi_moments(cfg, out, threads):
    rep = ex.run_psi_moment_experiment(cfg, threads)
    rows = list(rep.rows)
    mean, se = rep.second_moment()
    for a, m in enumerate(rep.modes):
        for j, t in enumerate(rep.T):
            rows += [(t, -1, f"mean_sq_{m}", mean[a, j]), (t, -1, f"stderr_sq_{m}", se[a, j]),
                     (t, -1, f"target_sq_{m}", rep.target[a]),
                     (t, -1, f"scheme_sq_{m}", rep.scheme_mean[a, j]),
                     (t, -1, f"scheme_limit_sq_{m}", rep.scheme_limit[a])]
    T = rep.T[-1]
    for m, q, emp, s, tgt in rep.gaussian:
        rows += [(T, -1, f"abs_moment_{m}_q{q:g}", emp), (T, -1, f"abs_moment_se_{m}_q{q:g}", s),
                 (T, -1, f"gaussian_moment_{m}_q{q:g}", tgt)]
    return [write_rows(out / "psi_moments.csv", rows)]


def cmd_mixture(cfg, out, threads):
    rep = ex.run_mixture_scaling_experiment(cfg)
    rows = list(rep.rows)
    for name, r in rep.residuals.items():
        rows += [(math.nan, -1, f"residual_{name}", r), (math.nan, -1, f"constant_{name}", rep.constants[name])]
    rows.append((math.nan, -1, "loglog_slope", rep.fit.slope))
    print(f"predicted {rep.predicted}; best fitting model {rep.best_model}; "
          f"log-log slope {rep.fit.slope:.4f}")
    return [write_rows(out / "mixture.csv", rows)]


def cmd_spectrum(cfg, out, threads):
    basis = cfg.basis()
    path = out / "spectrum.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("i", "eigenvalue", "mode"))
        for i, lam in enumerate(basis.eigenvalues, start=1):
            w.writerow((i, repr(float(lam)), basis.descriptor(i)))
    return [path]


def cmd_ot_selftest(cfg, out, threads):
    from .selftest import run_selftest

    rows = run_selftest(cfg.seed)
    width = max(len(r[0]) for r in rows)
    print(f"{'check':<{width}}  {'value':>22}  {'expected':>22}  {'tol':>8}  result")
    for name, got, want, tol, ok in rows:
        print(f"{name:<{width}}  {got:>22.15g}  {want:>22.15g}  {tol:>8.0e}  {'PASS' if ok else 'FAIL'}")
    path = out / "ot_selftest.csv"
    write_rows(path, [(math.nan, -1, name, got) for name, got, *_ in rows])
    if not all(r[-1] for r in rows):
        raise NumericalError("transport oracle suite failed")
    return [path]


HANDLERS = {
    "simulate": cmd_simulate, "rates": cmd_rates, "limit": cmd_limit, "bernstein": cmd_bernstein,
    "psi-moments": cmd_psi_moments, "mixture": cmd_mixture, "spectrum": cmd_spectrum,
    "ot-selftest": cmd_ot_selftest,
}


# -- entry point ------------------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="lab", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="TOML experiment config")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory (default runs/<command>)")
    parser.add_argument("--threads", type=int, help="worker threads (default: LAB_THREADS or all cores)")
    parser.add_argument("--T", help="comma-separated horizons")
    parser.add_argument("--reps", type=int, help="number of replicas")
    parser.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv or argv[0] not in COMMANDS:
        if argv and argv[0] in ("-h", "--help"):
            parser.print_help()
            return EXIT_OK
        parser.print_usage(sys.stderr)
        print(f"lab: unknown subcommand {argv[0] if argv else ''!r}; choose from {', '.join(COMMANDS)}",
              file=sys.stderr)
        return EXIT_USAGE
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args)
        if args.print_config:
            print(config_to_toml(cfg), end="")
            return EXIT_OK
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be positive")
        threads = resolve_threads(args.threads)
        out = Path(args.out or Path("runs") / args.command)
        out.mkdir(parents=True, exist_ok=True)
        start = datetime.now(timezone.utc)
        t0 = time.perf_counter()
        files = HANDLERS[args.command](cfg, out, threads)
        wall = time.perf_counter() - t0
        manifest = {
            "command": args.command,
            "config_hash": config_hash(args.command, cfg),
            "config": cfg.to_dict(),
            "seed": cfg.seed,
            "threads": threads,
            "code_hash": code_hash(),
            "versions": _versions(),
            "start": start.isoformat(),
            "end": datetime.now(timezone.utc).isoformat(),
            "wall_seconds": wall,
            "files": [Path(f).name for f in files],
        }
        for f in files:
            if not Path(f).is_file() or Path(f).stat().st_size == 0:
                raise NumericalError(f"output file {f} is missing or empty")
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        return EXIT_OK
    except (ConfigError, InputError, DomainError) as exc:
        print(f"lab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, ResourceError) as exc:
        print(f"lab: numerical failure: {exc}", file=sys.stderr)
        diag = getattr(exc, "diagnostics", None)
        if diag:
            print(f"lab: diagnostics: {diag}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
