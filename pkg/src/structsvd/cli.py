"""``structsvd`` command line: simulate, fit, summarize, compare, study.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
Every output directory is assembled under a temporary name and renamed on
success, so an aborted command leaves nothing behind.  Wall-clock timings go
to stderr (and to ``runtime.json`` only when ``--timing`` is given) so that
re-running a command with the same inputs reproduces its files byte for byte.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .csvd import classical_svd, cosine_similarity
from .diagnostics import align_to_truth, column_coverage, column_rmse, summarize
from .errors import InputError, NumericalError
from .io import (
    atomic_directory,
    read_chain,
    read_config,
    read_matrix,
    read_truth,
    write_chain,
    write_config,
    write_json,
    write_matrix,
    write_summary,
    write_truth,
)
from .kernels import CoordinateSet
from .sampler import run_mcmc
from .simulation import simulate
from .studies import STUDY_NAMES, SCALES, run_study, worker_count, write_table

log = logging.getLogger("structsvd")


def _manifest(command: str, **extra) -> dict:
    return {
        "command": command,
        "structsvd": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        **extra,
    }


def _report_time(args, out_tmp: Path, seconds: float) -> None:
    print(f"{args.command}: {seconds:.2f} s", file=sys.stderr)
    if getattr(args, "timing", False):
        write_json(out_tmp / "runtime.json", {"seconds": seconds})


# ---------------------------------------------------------------------------


def cmd_simulate(args) -> None:
    _, spec = read_config(args.config)
    if spec is None:
        raise InputError(f"{args.config} has no 'simulation' section")
    if args.seed is not None:
        spec = type(spec).from_dict({**spec.to_dict(), "seed": args.seed})
    truth = simulate(spec)
    with atomic_directory(args.out, args.force) as tmp:
        write_truth(truth, tmp, spec)
        write_json(tmp / "manifest.json", _manifest("simulate", simulation=spec.to_dict()))


def cmd_fit(args) -> None:
    model, _ = read_config(args.config)
    if model is None:
        raise InputError(f"{args.config} has no 'model' section")
    if args.seed is not None:
        model = model.replace(seed=args.seed)
    z = read_matrix(args.data)
    n, m = z.shape
    model.check_dims(n, m)
    cu = CoordinateSet(read_matrix(args.coords_u))
    cv = CoordinateSet(read_matrix(args.coords_v))
    if len(cu) != n or len(cv) != m:
        raise InputError(f"coordinates ({len(cu)}, {len(cv)}) do not match data shape ({n}, {m})")
    x = read_matrix(args.covariates) if args.covariates else None
    center = None
    if args.center:
        center = z.mean(axis=1)
        z = z - center[:, None]
    start = time.perf_counter()
    chain = run_mcmc(z, cu, cv, model, x_design=x)
    elapsed = time.perf_counter() - start
    with atomic_directory(args.out, args.force) as tmp:
        write_chain(chain, tmp / "chain")
        write_json(tmp / "acceptance.json", {k: float(v) for k, v in sorted(chain.acceptance.items())})
        write_config(tmp / "config.json", model)
        if center is not None:
            write_matrix(tmp / "center.csv", center)
        write_json(tmp / "manifest.json", _manifest("fit", seed=model.seed, centered=bool(args.center),
                                                     data=str(args.data), n=n, m=m))
        _report_time(args, tmp, elapsed)


def _chain_dir(path) -> Path:
    p = Path(path)
    return p / "chain" if (p / "chain" / "manifest.json").is_file() else p


def cmd_summarize(args) -> None:
    chain = read_chain(_chain_dir(args.chain))
    summ = summarize(chain, args.level)
    with atomic_directory(args.out, args.force) as tmp:
        write_summary(summ, tmp)
        if args.truth:
            truth = read_truth(args.truth)
            aligned = align_to_truth(summ, truth, match=args.match)
            rows = []
            for target in ("U", "V", "Y"):
                cov = column_coverage(aligned, truth, target)
                err = column_rmse(aligned, truth, target)
                for j, (c, e) in enumerate(zip(cov, err)):
                    rows.append([target, "all" if target == "Y" else j + 1, float(c), float(e)])
            write_table(tmp / "metrics_by_column.csv", ["target", "column", "coverage", "rmse"], rows)
            agg = [[t, float(np.mean([r[2] for r in rows if r[0] == t])),
                    float(np.mean([r[3] for r in rows if r[0] == t]))] for t in ("U", "V", "Y")]
            write_table(tmp / "metrics.csv", ["target", "coverage", "rmse"], agg)
        write_json(tmp / "manifest.json", _manifest("summarize", level=args.level, n_draws=len(chain),
                                                     truth=bool(args.truth)))


def cmd_compare(args) -> None:
    chain = read_chain(_chain_dir(args.chain))
    z = read_matrix(args.data)
    if z.shape != (chain.U.shape[1], chain.V.shape[1]):
        raise InputError(f"data shape {z.shape} does not match the chain")
    base = classical_svd(z, chain.k)
    summ = summarize(chain, args.level)
    # put the baseline on the posterior's sign convention before masking
    signs = np.where(np.sum(summ["U"].mean * base.U, axis=0) < 0, -1.0, 1.0)
    bu, bv = base.U * signs, base.V * signs
    with atomic_directory(args.out, args.force) as tmp:
        write_matrix(tmp / "csvd_U.csv", bu)
        write_matrix(tmp / "csvd_V.csv", bv)
        write_matrix(tmp / "csvd_d.csv", base.d)
        cu = cosine_similarity(summ["U"].mean, bu)
        cv = cosine_similarity(summ["V"].mean, bv)
        write_table(tmp / "cosine.csv", ["side", "column", "cosine"],
                    [[s, j + 1, float(c)] for s, cs in (("U", cu), ("V", cv)) for j, c in enumerate(cs)])
        for name, ref in (("U", bu), ("V", bv)):
            mask = (~summ[name].covers(ref)).astype(float)
            write_matrix(tmp / f"mask_{name}.csv", mask)
        write_json(tmp / "manifest.json", _manifest("compare", level=args.level, data=str(args.data)))


def cmd_study(args) -> None:
    workers = worker_count() if args.workers is None else args.workers
    start = time.perf_counter()
    with atomic_directory(args.out, args.force) as tmp:
        info = run_study(args.name, args.scale, tmp, base_seed=args.seed, workers=workers)
        write_json(tmp / "manifest.json", _manifest("study", **info))
        _report_time(args, tmp, time.perf_counter() - start)


# ---------------------------------------------------------------------------


def _level(text: str) -> float:
    val = float(text)
    if not 0.0 < val < 1.0:
        raise argparse.ArgumentTypeError("level must be in (0, 1)")
    return val


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="structsvd", description="Bayesian SVD with structured orthonormal priors.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", required=True, type=Path, help="output directory (must not exist)")
        sp.add_argument("--force", action="store_true", help="replace an existing output directory")

    sp = sub.add_parser("simulate", help="draw a synthetic dataset")
    sp.add_argument("--config", required=True, type=Path)
    sp.add_argument("--seed", type=int)
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="run the sampler")
    sp.add_argument("--data", required=True, type=Path)
    sp.add_argument("--coords-u", required=True, type=Path)
    sp.add_argument("--coords-v", required=True, type=Path)
    sp.add_argument("--config", required=True, type=Path)
    sp.add_argument("--covariates", type=Path, help="nm x p design, rows in column-major vec order")
    sp.add_argument("--center", action="store_true", help="subtract each row's mean before fitting")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--timing", action="store_true", help="also write runtime.json")
    common(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("summarize", help="posterior summaries and, with --truth, coverage/RMSE")
    sp.add_argument("--chain", required=True, type=Path)
    sp.add_argument("--level", type=_level, default=0.95)
    sp.add_argument("--truth", type=Path, help="simulate output directory")
    sp.add_argument("--match", choices=("index", "greedy"), default="index")
    common(sp)
    sp.set_defaults(func=cmd_summarize)

    sp = sub.add_parser("compare", help="compare posterior bases with the classical SVD")
    sp.add_argument("--chain", required=True, type=Path)
    sp.add_argument("--data", required=True, type=Path)
    sp.add_argument("--level", type=_level, default=0.95)
    common(sp)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("study", help="run a replicated synthetic study")
    sp.add_argument("--name", required=True, choices=STUDY_NAMES)
    sp.add_argument("--scale", choices=sorted(SCALES), default="desk")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--workers", type=int, help="process count (default from STRUCTSVD_WORKERS, else 1)")
    sp.add_argument("--timing", action="store_true", help="also write runtime.json")
    common(sp)
    sp.set_defaults(func=cmd_study)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except InputError as exc:
        print(f"structsvd {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"structsvd {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
