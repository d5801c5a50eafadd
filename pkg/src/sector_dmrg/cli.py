"""Command-line front end: solve, kernel/sweep benchmarks, fits, self-check.

Configuration comes from flags or a ``key = value`` text file (``#`` starts
a comment); flags override the file.  The worker count falls back to the
``SECTOR_DMRG_WORKERS`` environment variable when neither source sets it.

Exit codes: 0 success, 2 configuration error, 3 numerical non-convergence.
"""

import argparse
import os
import sys
from dataclasses import dataclass, fields

from .bench import (
    bench_kernel, bench_sweep, fit_power_law, read_csv, run_checks,
    write_csv,
)
from .driver import SweepRecord, SweepSchedule, solve
from .model import ModelError, ModelSpec, build_model

MODEL_KINDS = {"heisenberg": "heisenberg-chain",
               "hubbard": "hubbard-chain",
               "file": "integral-file"}


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    model: str = "heisenberg"
    n: int = 8
    j: float = 1.0
    t: float = 1.0
    u: float = 0.0
    integrals: str = None
    d: str = "64"
    sweeps: int = 3
    workers: int = None
    arena_bytes: int = None
    seed: int = 42
    out: str = None
    checkpoint: str = None
    resume: bool = False
    target: str = None
    lanczos_tol: float = 1e-12
    lanczos_max_iter: int = 300

    def resolved_workers(self):
        if self.workers is not None:
            return self.workers
        env = os.environ.get("SECTOR_DMRG_WORKERS")
        if env:
            try:
                return max(1, int(env))
            except ValueError as exc:
                raise ConfigError(
                    f"SECTOR_DMRG_WORKERS={env!r} is not an integer") from exc
        return 1

    def model_spec(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of "
                              f"{sorted(MODEL_KINDS)}")
        kind = MODEL_KINDS[self.model]
        if kind == "integral-file":
            if not self.integrals:
                raise ConfigError("--integrals is required for --model file")
            return ModelSpec(kind, path=self.integrals)
        return ModelSpec(kind, n=self.n, j=self.j, t=self.t, u=self.u)

    def d_list(self):
        try:
            values = [int(x) for x in str(self.d).split(",") if x.strip()]
        except ValueError as exc:
            raise ConfigError(f"--d expects integers, got {self.d!r}") from exc
        if not values or any(v < 1 for v in values):
            raise ConfigError(f"--d expects positive integers, got {self.d!r}")
        return values

    def target_qn(self):
        if self.target is None:
            return None
        try:
            return tuple(int(x) for x in str(self.target).split(",") if x.strip())
        except ValueError as exc:
            raise ConfigError(f"--target expects integers, got "
                              f"{self.target!r}") from exc


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_BOOL_FIELDS = {"resume"}
_INT_FIELDS = {"n", "sweeps", "workers", "arena_bytes", "seed",
               "lanczos_max_iter"}
_FLOAT_FIELDS = {"j", "t", "u", "lanczos_tol"}


def load_config_file(path):
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, value = (part.strip() for part in line.split("=", 1))
                key = key.replace("-", "_")
                if key not in _FIELD_TYPES:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                try:
                    if key in _BOOL_FIELDS:
                        values[key] = value.lower() in ("1", "true", "yes", "on")
                    elif key in _INT_FIELDS:
                        values[key] = int(value)
                    elif key in _FLOAT_FIELDS:
                        values[key] = float(value)
                    else:
                        values[key] = value
                except ValueError as exc:
                    raise ConfigError(f"{path}:{lineno}: bad value for "
                                      f"{key!r}: {value!r}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return values


def _add_run_flags(parser):
    parser.add_argument("--config", metavar="PATH",
                        help="key = value configuration file; flags override")
    parser.add_argument("--model", choices=sorted(MODEL_KINDS))
    parser.add_argument("--n", type=int)
    parser.add_argument("--j", type=float)
    parser.add_argument("--t", type=float)
    parser.add_argument("--u", type=float)
    parser.add_argument("--integrals", metavar="PATH")
    parser.add_argument("--d", help="bond dimension (comma list for bench-sweep)")
    parser.add_argument("--sweeps", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--arena-bytes", dest="arena_bytes", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", metavar="PATH")
    parser.add_argument("--checkpoint", metavar="PATH")
    parser.add_argument("--resume", action="store_true", default=None)
    parser.add_argument("--target", help="target quantum number, comma list")
    parser.add_argument("--tol", dest="lanczos_tol", type=float)


def build_config(args):
    values = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    return RunConfig(**values)


def _write_sweep_csv(records, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(SweepRecord.CSV_HEADER + "\n")
        for r in records:
            fh.write(r.csv_line() + "\n")


def cmd_solve(args):
    config = build_config(args)
    model = build_model(config.model_spec())
    schedule = SweepSchedule(n_sweeps=config.sweeps, d=config.d_list()[0]
                             if len(config.d_list()) == 1 else config.d_list(),
                             lanczos_tol=config.lanczos_tol,
                             lanczos_max_iter=config.lanczos_max_iter)
    result = solve(model, schedule, target=config.target_qn(),
                   workers=config.resolved_workers(), seed=config.seed,
                   arena_bytes=config.arena_bytes,
                   checkpoint_path=config.checkpoint, resume=config.resume)
    if config.out:
        _write_sweep_csv(result.records, config.out)
    print(f"final_energy {result.energy:.17g}")
    troubled = [r for r in result.records if not r.converged]
    if troubled:
        print(f"warning: {len(troubled)} iteration(s) did not reach the "
              f"Lanczos tolerance", file=sys.stderr)
        return 3
    return 0


def cmd_bench_kernel(args):
    config = build_config(args)
    dims = config.d_list() if args.d else (8, 16, 32, 64)
    records = bench_kernel(dims=dims, seed=config.seed)
    if config.out:
        write_csv(records, config.out)
    for r in records:
        print(f"{r.label} size={r.size:g} seconds={r.seconds:.6g} "
              f"gflops={r.gflops:.4g}")
    return 0


def cmd_bench_sweep(args):
    config = build_config(args)
    model = build_model(config.model_spec())
    records = bench_sweep(model, config.d_list(), sweeps=config.sweeps,
                          workers=config.resolved_workers(), seed=config.seed,
                          tol=config.lanczos_tol)
    if config.out:
        write_csv(records, config.out)
    for r in records:
        print(f"{r.label} D={r.size:g} seconds={r.seconds:.6g} "
              f"gflops={r.gflops:.4g}")
    return 0


def cmd_fit(args):
    records = read_csv(args.csv)
    if args.label:
        records = [r for r in records if r.label == args.label]
    if len(records) < 3:
        print(f"error: need at least 3 data points, found {len(records)}",
              file=sys.stderr)
        return 2
    fit = fit_power_law([(r.size, r.seconds) for r in records])
    print(f"exponent {fit.exponent:.6f}")
    print(f"prefactor {fit.prefactor:.6g}")
    print(f"r_squared {fit.r_squared:.6f}")
    return 0


def cmd_check(args):
    config = build_config(args)
    results = run_checks(seed=config.seed)
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed += 0 if ok else 1
    return 0 if failed == 0 else 1


def make_parser():
    parser = argparse.ArgumentParser(
        prog="sector-dmrg",
        description="Sector-sparse two-site DMRG solver and benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="run a DMRG ground-state solve")
    _add_run_flags(p_solve)
    p_solve.set_defaults(fn=cmd_solve)

    p_bk = sub.add_parser("bench-kernel",
                          help="time the fused accumulation kernel")
    _add_run_flags(p_bk)
    p_bk.set_defaults(fn=cmd_bench_kernel)

    p_bs = sub.add_parser("bench-sweep",
                          help="time sweeps over a list of bond dimensions")
    _add_run_flags(p_bs)
    p_bs.set_defaults(fn=cmd_bench_sweep)

    p_fit = sub.add_parser("fit", help="power-law fit of a benchmark CSV")
    p_fit.add_argument("csv", help="CSV produced by a bench subcommand")
    p_fit.add_argument("--label", help="restrict the fit to one record label")
    p_fit.set_defaults(fn=cmd_fit)

    p_check = sub.add_parser("check", help="run the oracle self-check suite")
    _add_run_flags(p_check)
    p_check.set_defaults(fn=cmd_check)
    return parser


def cli_run(argv=None):
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return args.fn(args)
    except (ConfigError, ModelError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main(argv=None):
    return cli_run(argv)


if __name__ == "__main__":
    sys.exit(main())
