"""Replicated synthetic studies: variable-vs-grouped length-scales, model rank, covariates.

Each study is a list of independent tasks (one simulated dataset plus its
fits).  Seeds come from ``SeedSequence((base_seed, study_id, *task_index))``
so results do not depend on worker count or scheduling order.  Tasks run in
a process pool whose size is taken from ``STRUCTSVD_WORKERS`` (default 1).
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .csvd import classical_svd
from .diagnostics import align_to_truth, column_rmse, coverage_rate, rmse, summarize, summary_from_point
from .errors import InputError
from .kernels import KernelSpec
from .model import SvdModelConfig
from .sampler import run_mcmc
from .simulation import (
    BETA_DEFAULT,
    CovariateMode,
    covariate_study_spec,
    rank_study_spec,
    simulate,
    variable_length_spec,
)

__all__ = [
    "StudyScale",
    "SCALES",
    "STUDY_NAMES",
    "worker_count",
    "derive_seed",
    "rank_study",
    "variable_length_study",
    "covariate_study",
    "run_study",
    "write_table",
]

log = logging.getLogger(__name__)

WORKERS_ENV = "STRUCTSVD_WORKERS"
STUDY_NAMES = ("variable-length", "rank", "covariates")
_STUDY_IDS = {name: i for i, name in enumerate(STUDY_NAMES)}


@dataclass(frozen=True)
class StudyScale:
    n: int
    m: int
    replicates: int
    n_iterations: int
    n_burnin: int
    snrs: tuple[float, ...]
    rank_d_true: tuple[float, ...]
    rank_k_fit: tuple[int, ...]


SCALES = {
    "desk": StudyScale(50, 50, 20, 4000, 2000, (2.0,), (40.0, 30.0, 20.0), (2, 3, 4)),
    "paper": StudyScale(
        100, 100, 100, 10000, 5000, (10.0, 5.0, 2.0, 1.0, 0.5, 0.1), (40.0, 30.0, 20.0, 10.0, 5.0), (3, 4, 5, 6, 7)
    ),
}


def worker_count(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or raw == "":
        return default
    try:
        val = int(raw)
    except ValueError:
        raise InputError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}") from None
    if val < 1:
        raise InputError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}")
    return val


def derive_seed(base_seed: int, *index: int) -> int:
    return int(np.random.SeedSequence((int(base_seed), *map(int, index))).generate_state(1)[0])


def _map(fn: Callable, tasks: Sequence, workers: int) -> list:
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


def _fit_config(k: int, scale: StudyScale, seed: int, nu: float = 3.5, rho: float | None = None,
                **kw) -> SvdModelConfig:
    # rho=None estimates the length-scales; a number holds them fixed
    kern = KernelSpec.matern(1.0 if rho is None else rho, nu)
    return SvdModelConfig(
        k=k, u_kernel=kern, v_kernel=kern, estimate_rho=rho is None, n_iterations=scale.n_iterations,
        n_burnin=scale.n_burnin, seed=seed, **kw,
    )


def _fit_summary(truth, cfg: SvdModelConfig):
    chain = run_mcmc(truth.Z, truth.coords_u, truth.coords_v, cfg, x_design=truth.X)
    return chain, align_to_truth(summarize(chain), truth)


# ---------------------------------------------------------------------------
# rank


# the rank study fits the generating kernel (Matern 3.5, length-scale 3) with the length-scale held fixed
RANK_FIT_RHO = 3.0


@dataclass(frozen=True)
class _RankTask:
    scale: StudyScale
    snr: float
    replicate: int
    base_seed: int
    snr_index: int


def _rank_task(task: _RankTask) -> list[dict[str, Any]]:
    sc = task.scale
    sid = _STUDY_IDS["rank"]
    spec = rank_study_spec(sc.n, sc.m, task.snr, derive_seed(task.base_seed, sid, task.snr_index, task.replicate, 0),
                           d_true=sc.rank_d_true)
    truth = simulate(spec)
    rows = []
    for k in sc.rank_k_fit:
        cfg = _fit_config(k, sc, derive_seed(task.base_seed, sid, task.snr_index, task.replicate, k), rho=RANK_FIT_RHO)
        _, summ = _fit_summary(truth, cfg)
        base = align_to_truth(summary_from_point(classical_svd(truth.Z, k)), truth)
        row = {"snr": task.snr, "k_fit": k, "replicate": task.replicate}
        for target in ("U", "V", "Y"):
            row[f"cr_{target}"] = coverage_rate(summ, truth, target)
        for target in ("U", "V", "Y"):
            row[f"rmse_{target}"] = rmse(summ, truth, target)
        for target in ("U", "V", "Y"):
            row[f"csvd_rmse_{target}"] = rmse(base, truth, target)
        rows.append(row)
    return rows


def rank_study(scale: StudyScale, base_seed: int = 0, workers: int = 1) -> list[dict[str, Any]]:
    """One row per (snr, fitted k, replicate) with coverage and RMSE for U, V, Y and the C-SVD RMSE."""
    tasks = [
        _RankTask(scale, snr, r, base_seed, i)
        for i, snr in enumerate(scale.snrs)
        for r in range(scale.replicates)
    ]
    return [row for rows in _map(_rank_task, tasks, workers) for row in rows]


# ---------------------------------------------------------------------------
# variable vs grouped


@dataclass(frozen=True)
class _VarTask:
    scale: StudyScale
    snr: float
    replicate: int
    base_seed: int
    snr_index: int


def _variable_task(task: _VarTask) -> list[dict[str, Any]]:
    sc = task.scale
    sid = _STUDY_IDS["variable-length"]
    spec = variable_length_spec(sc.n, sc.m, task.snr, derive_seed(task.base_seed, sid, task.snr_index, task.replicate, 0))
    truth = simulate(spec)
    fit_seed = derive_seed(task.base_seed, sid, task.snr_index, task.replicate, 1)
    k = truth.k
    _, var_summ = _fit_summary(truth, _fit_config(k, sc, fit_seed, grouped_rho=False))
    _, grp_summ = _fit_summary(truth, _fit_config(k, sc, fit_seed, grouped_rho=True))
    rows = []
    for side in ("U", "V"):
        rv = column_rmse(var_summ, truth, side)
        rg = column_rmse(grp_summ, truth, side)
        for i in range(k):
            rows.append({
                "snr": task.snr, "replicate": task.replicate, "side": side, "column": i + 1,
                "rmse_variable": float(rv[i]), "rmse_grouped": float(rg[i]), "ratio": float(rv[i] / rg[i]),
            })
    return rows


def variable_length_study(scale: StudyScale, base_seed: int = 0, workers: int = 1) -> list[dict[str, Any]]:
    """One row per (snr, replicate, side, column) with variable and grouped RMSE and their ratio."""
    tasks = [
        _VarTask(scale, snr, r, base_seed, i)
        for i, snr in enumerate(scale.snrs)
        for r in range(scale.replicates)
    ]
    return [row for rows in _map(_variable_task, tasks, workers) for row in rows]


# ---------------------------------------------------------------------------
# covariates


@dataclass(frozen=True)
class _CovTask:
    scale: StudyScale
    mode: str
    base_seed: int
    snr: float


def _covariate_task(task: _CovTask) -> dict[str, Any]:
    sc = task.scale
    sid = _STUDY_IDS["covariates"]
    mode_idx = [m.value for m in CovariateMode].index(task.mode)
    spec = covariate_study_spec(task.mode, sc.n, sc.m, task.snr, derive_seed(task.base_seed, sid, mode_idx, 0))
    truth = simulate(spec)
    cfg = _fit_config(5, sc, derive_seed(task.base_seed, sid, mode_idx, 1), nu=3.0)
    chain, summ = _fit_summary(truth, cfg)
    b = summ["beta"]
    return {
        "mode": task.mode,
        "true": truth.beta.tolist(),
        "mean": b.mean.tolist(),
        "lower": b.lower.tolist(),
        "upper": b.upper.tolist(),
        "beta_covered": int(np.sum(b.covers(truth.beta))),
        "cr_Y": coverage_rate(summ, truth, "Y"),
    }


def covariate_study(scale: StudyScale, base_seed: int = 0, workers: int = 1, snr: float = 2.0,
                    modes: Sequence[str] = ("M1", "M2", "M3")) -> list[dict[str, Any]]:
    """One fit per covariate design; the fitted model uses ``k = 5`` and Matérn ``nu = 3``."""
    tasks = [_CovTask(scale, CovariateMode(mo).value, base_seed, snr) for mo in modes]
    return _map(_covariate_task, tasks, workers)


# ---------------------------------------------------------------------------
# tables


def write_table(path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    def fmt(x):
        if isinstance(x, (float, np.floating)):
            return repr(float(x))
        return str(x)

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(x) for x in row])


def _records_table(path, records: list[dict[str, Any]]) -> None:
    header = list(records[0])
    write_table(path, header, [[r[h] for h in header] for r in records])


def _median_table(records, keys: Sequence[str], values: Sequence[str]) -> tuple[list[str], list[list]]:
    groups: dict[tuple, list] = {}
    for r in records:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    header = [*keys]
    for v in values:
        header += [f"{v}_median", f"{v}_q025", f"{v}_q975"]
    rows = []
    for key, grp in groups.items():
        row = list(key)
        for v in values:
            x = np.array([g[v] for g in grp], dtype=float)
            row += [float(np.median(x)), float(np.quantile(x, 0.025)), float(np.quantile(x, 0.975))]
        rows.append(row)
    return header, rows


def run_study(name: str, scale_name: str, out_dir, base_seed: int = 0, workers: int | None = None) -> dict[str, Any]:
    """Run a named study and write its tables into ``out_dir`` (which must exist)."""
    if name not in STUDY_NAMES:
        raise InputError(f"unknown study {name!r}; choose from {STUDY_NAMES}")
    if scale_name not in SCALES:
        raise InputError(f"unknown scale {scale_name!r}; choose from {sorted(SCALES)}")
    scale = SCALES[scale_name]
    workers = worker_count() if workers is None else workers
    out = Path(out_dir)
    files = []
    if name == "rank":
        recs = rank_study(scale, base_seed, workers)
        _records_table(out / "rank_replicates.csv", recs)
        metrics = [f"{p}_{t}" for p in ("cr", "rmse", "csvd_rmse") for t in ("U", "V", "Y")]
        header, rows = _median_table(recs, ("snr", "k_fit"), metrics)
        write_table(out / "rank_summary.csv", header, rows)
        files = ["rank_replicates.csv", "rank_summary.csv"]
    elif name == "variable-length":
        recs = variable_length_study(scale, base_seed, workers)
        _records_table(out / "variable_length_replicates.csv", recs)
        header, rows = _median_table(recs, ("snr", "side", "column"), ("ratio",))
        write_table(out / "variable_length_summary.csv", header, rows)
        files = ["variable_length_replicates.csv", "variable_length_summary.csv"]
    else:
        recs = covariate_study(scale, base_seed, workers)
        rows = []
        for r in recs:
            for stat in ("true", "mean", "lower", "upper"):
                rows.append([r["mode"], stat, *r[stat]])
        write_table(out / "beta_table.csv", ["model", "row", "beta1", "beta2", "beta3", "beta4"], rows)
        write_table(out / "coverage_Y.csv", ["model", "cr_Y", "beta_covered"],
                    [[r["mode"], r["cr_Y"], r["beta_covered"]] for r in recs])
        files = ["beta_table.csv", "coverage_Y.csv"]
    return {"study": name, "scale": asdict(scale), "scale_name": scale_name, "base_seed": base_seed, "files": files,
            "beta_default": list(BETA_DEFAULT) if name == "covariates" else None}
