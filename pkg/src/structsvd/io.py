"""Text file formats: CSV matrices, JSON configs, chain and summary directories.

Floats are written with ``repr`` (shortest string that round-trips), so
``read_matrix(write_matrix(x))`` reproduces ``x`` bit for bit.

A chain directory holds one CSV per parameter (``iter`` column followed by
the flattened draw in C order) plus ``manifest.json``.  Directories are
built under a temporary name and renamed into place, so a reader never sees
a chain without its manifest.
"""

from __future__ import annotations

import csv
import json
import os
import shutil
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from .errors import InputError, ParseError
from .kernels import CoordinateSet
from .model import SvdModelConfig
from .simulation import SyntheticSpec, SyntheticTruth

__all__ = [
    "FORMAT_VERSION",
    "write_matrix",
    "read_matrix",
    "read_config",
    "write_config",
    "write_json",
    "read_json",
    "write_chain",
    "read_chain",
    "write_summary",
    "write_truth",
    "read_truth",
    "atomic_directory",
]

FORMAT_VERSION = 1
CHAIN_PARAMS = ("U", "V", "d", "sigma2", "sigma2_u", "sigma2_v", "rho_u", "rho_v", "beta")


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# matrices


def write_matrix(path, matrix, header: list[str] | None = None) -> None:
    """Write a 1-D or 2-D array as CSV (1-D becomes one column)."""
    a = np.asarray(matrix, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise InputError(f"can only write 1-D or 2-D arrays, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InputError(f"refusing to write non-finite values to {path}")
    if header is not None and len(header) != a.shape[1]:
        raise InputError(f"header has {len(header)} labels for {a.shape[1]} columns")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header is not None:
            w.writerow(header)
        for row in a:
            w.writerow([_fmt(x) for x in row])


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def read_matrix(path, header: bool | None = None) -> np.ndarray:
    """Read a numeric CSV into a 2-D array.

    ``header=None`` skips the first row when none of its cells parse as
    numbers.  Blank lines are ignored.  Ragged rows, non-numeric or
    non-finite cells raise :class:`ParseError` naming the line.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such file: {path}")
    rows: list[list[float]] = []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and (header or (header is None and not any(_is_number(c) for c in row))):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(f"{path}:{lineno}: expected {width} fields, found {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError:
                bad = next(c for c in row if not _is_number(c))
                raise ParseError(f"{path}:{lineno}: non-numeric cell {bad!r}") from None
            if not all(np.isfinite(vals)):
                raise ParseError(f"{path}:{lineno}: non-finite value")
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return np.array(rows, dtype=float)


def read_coordinates(path) -> CoordinateSet:
    return CoordinateSet(read_matrix(path))


# ---------------------------------------------------------------------------
# JSON


def write_json(path, data: Any) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> Any:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such file: {path}")
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}: {exc.msg}") from None


_CONFIG_KEYS = {"version", "model", "simulation"}


def _check_version(data: dict, path) -> None:
    version = data.get("version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise InputError(f"{path}: format version {version!r} is not supported (expected {FORMAT_VERSION})")


def read_config(path) -> tuple[SvdModelConfig | None, SyntheticSpec | None]:
    """Parse ``{"version": 1, "model": {...}, "simulation": {...}}``; either section may be absent."""
    data = read_json(path)
    if not isinstance(data, dict):
        raise ParseError(f"{path}: top level must be an object")
    unknown = set(data) - _CONFIG_KEYS
    if unknown:
        raise InputError(f"{path}: unknown keys {sorted(unknown)}; valid keys: {sorted(_CONFIG_KEYS)}")
    _check_version(data, path)
    model = SvdModelConfig.from_dict(data["model"]) if "model" in data else None
    sim = SyntheticSpec.from_dict(data["simulation"]) if "simulation" in data else None
    return model, sim


def write_config(path, model: SvdModelConfig | None = None, simulation: SyntheticSpec | None = None) -> None:
    out: dict[str, Any] = {"version": FORMAT_VERSION}
    if model is not None:
        out["model"] = model.to_dict()
    if simulation is not None:
        out["simulation"] = simulation.to_dict()
    write_json(path, out)


# ---------------------------------------------------------------------------
# directories


@contextmanager
def atomic_directory(target, overwrite: bool = False) -> Iterator[Path]:
    """Yield a scratch directory that is renamed to ``target`` on success and removed on error."""
    target = Path(target)
    if target.exists() and not overwrite:
        raise InputError(f"output directory already exists: {target}")
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target)
    os.replace(tmp, target)


def _labels(name: str, shape: tuple[int, ...]) -> list[str]:
    if not shape:
        return [name]
    return [f"{name}[{','.join(map(str, idx))}]" for idx in np.ndindex(*shape)]


def write_chain(chain, directory, overwrite: bool = False) -> Path:
    """Persist a :class:`~structsvd.sampler.PosteriorChain`; runtime is deliberately not stored."""
    t = len(chain)
    with atomic_directory(directory, overwrite) as tmp:
        shapes = {}
        for name in CHAIN_PARAMS:
            arr = getattr(chain, name)
            if arr is None:
                continue
            shapes[name] = list(arr.shape[1:])
            flat = arr.reshape(t, -1)
            data = np.column_stack([np.arange(t, dtype=float), flat])
            write_matrix(tmp / f"{name}.csv", data, ["iter", *_labels(name, arr.shape[1:])])
        if chain.reference_U is not None:
            write_matrix(tmp / "reference_U.csv", chain.reference_U)
        manifest = {
            "version": FORMAT_VERSION,
            "kind": "chain",
            "n_draws": t,
            "shapes": shapes,
            "seed": chain.seed,
            "acceptance": {k: float(v) for k, v in sorted(chain.acceptance.items())},
            "config": None if chain.config is None else chain.config.to_dict(),
        }
        write_json(tmp / "manifest.json", manifest)
    return Path(directory)


def read_chain(directory):
    from .sampler import PosteriorChain

    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.is_file():
        raise InputError(f"{directory} is not a chain directory (no manifest.json)")
    manifest = read_json(mpath)
    _check_version(manifest, mpath)
    if manifest.get("kind") != "chain":
        raise InputError(f"{mpath} does not describe a chain")
    t = int(manifest["n_draws"])
    arrays = {}
    for name, shape in manifest["shapes"].items():
        if name not in CHAIN_PARAMS:
            raise InputError(f"{mpath}: unknown parameter {name!r}")
        data = read_matrix(directory / f"{name}.csv", header=True)
        if data.shape[0] != t or not np.array_equal(data[:, 0], np.arange(t)):
            raise ParseError(f"{directory / (name + '.csv')}: iteration index does not match {t} draws")
        arrays[name] = data[:, 1:].reshape((t, *shape))
    missing = set(CHAIN_PARAMS) - {"beta"} - set(arrays)
    if missing:
        raise InputError(f"{directory}: missing parameter files {sorted(missing)}")
    ref = directory / "reference_U.csv"
    cfg = manifest.get("config")
    return PosteriorChain(
        **arrays,
        acceptance=dict(manifest.get("acceptance", {})),
        config=None if cfg is None else SvdModelConfig.from_dict(cfg),
        seed=manifest.get("seed"),
        reference_U=read_matrix(ref) if ref.is_file() else None,
    )


def write_summary(summary, directory) -> None:
    """One long-format CSV per parameter: index columns then ``mean,sd,lower,upper``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, cell in sorted(summary.cells.items()):
        mean = np.asarray(cell.mean, dtype=float)
        idx = np.array(list(np.ndindex(*mean.shape)), dtype=float).reshape(mean.size, mean.ndim)
        cols = [cell.mean, cell.sd, cell.lower, cell.upper]
        data = np.column_stack([idx, *(np.asarray(c, dtype=float).reshape(-1) for c in cols)])
        index_names = ["row", "col"][: mean.ndim] if mean.ndim <= 2 else [f"i{j}" for j in range(mean.ndim)]
        write_matrix(directory / f"summary_{name}.csv", data, [*index_names, "mean", "sd", "lower", "upper"])


# ---------------------------------------------------------------------------
# synthetic truth


def write_truth(truth: SyntheticTruth, directory, spec: SyntheticSpec | None = None) -> None:
    """``Z.csv``, coordinate files and a ``truth/`` sidecar with every generating quantity."""
    directory = Path(directory)
    side = directory / "truth"
    side.mkdir(parents=True, exist_ok=True)
    write_matrix(directory / "Z.csv", truth.Z)
    write_matrix(directory / "coords_u.csv", truth.coords_u.points)
    write_matrix(directory / "coords_v.csv", truth.coords_v.points)
    if truth.X is not None:
        write_matrix(directory / "X.csv", truth.X)
    for name in ("U", "V", "d", "M", "eta"):
        write_matrix(side / f"{name}.csv", getattr(truth, name))
    if truth.beta is not None:
        write_matrix(side / "beta.csv", truth.beta)
    meta = {"version": FORMAT_VERSION, "kind": "truth", "sigma": float(truth.sigma)}
    if spec is not None:
        meta["simulation"] = spec.to_dict()
    write_json(side / "truth.json", meta)


def read_truth(directory) -> SyntheticTruth:
    """Accepts either the simulate output directory or its ``truth/`` subdirectory."""
    directory = Path(directory)
    if (directory / "truth").is_dir():
        directory = directory / "truth"
    meta = read_json(directory / "truth.json")
    _check_version(meta, directory / "truth.json")
    base = directory.parent

    def opt(path):
        return read_matrix(path) if path.is_file() else None

    beta = opt(directory / "beta.csv")
    return SyntheticTruth(
        Z=read_matrix(base / "Z.csv"),
        U=read_matrix(directory / "U.csv"),
        V=read_matrix(directory / "V.csv"),
        d=read_matrix(directory / "d.csv")[:, 0],
        M=read_matrix(directory / "M.csv"),
        sigma=float(meta["sigma"]),
        eta=read_matrix(directory / "eta.csv"),
        beta=None if beta is None else beta[:, 0],
        X=opt(base / "X.csv"),
        coords_u=read_coordinates(base / "coords_u.csv"),
        coords_v=read_coordinates(base / "coords_v.csv"),
    )
