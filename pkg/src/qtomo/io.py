"""File formats: CSV (comma, header row, LF endings) and JSON (UTF-8, stable keys)."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .estimator import EstimationResult
from .moments import MomentSet
from .simulator import ObservationLog


def write_json(path, doc) -> Path:
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    return rows[0], rows[1:]


def fmt(x) -> str:
    # shortest repr that round-trips a double
    return repr(float(x))


# --------------------------------------------------------------------------
# observation logs


def sidecar_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".json")


def write_log(log: ObservationLog, path) -> tuple[Path, Path]:
    """Counts CSV (``epoch_index,station_1..station_n``) plus a JSON sidecar."""
    header = ["epoch_index"] + [f"station_{i + 1}" for i in range(log.n)]
    rows = ([k] + row for k, row in enumerate(log.counts.tolist()))
    csv_path = write_csv(path, header, rows)
    meta = log.metadata()
    if log.true_counts is not None:
        true_path = Path(path).with_name(Path(path).stem + "_true.csv")
        write_csv(true_path, header, ([k] + row for k, row in enumerate(log.true_counts.tolist())))
        meta["true_counts_file"] = true_path.name
    return csv_path, write_json(sidecar_path(path), meta)


def _read_counts(path) -> np.ndarray:
    header, rows = read_csv(path)
    if not header or header[0] != "epoch_index":
        raise ValueError(f"{path}: first column must be epoch_index")
    data = np.array(rows, dtype=np.int64).reshape(len(rows), len(header))
    if not np.array_equal(data[:, 0], np.arange(len(rows))):
        raise ValueError(f"{path}: epoch_index must run 0..m-1")
    return data[:, 1:]


def read_log(path) -> ObservationLog:
    path = Path(path)
    counts = _read_counts(path)
    meta = read_json(sidecar_path(path)) if sidecar_path(path).exists() else {}
    if "beta" not in meta:
        raise ValueError(f"{path}: sidecar with the sampling rate beta is missing")
    if "n" in meta and meta["n"] != counts.shape[1]:
        raise ValueError(f"{path}: sidecar says n={meta['n']}, file has {counts.shape[1]} stations")
    true = None
    if meta.get("true_counts_file"):
        true = _read_counts(path.with_name(meta["true_counts_file"]))
    return ObservationLog(
        beta=float(meta["beta"]),
        counts=counts,
        seed=meta.get("seed"),
        params_fingerprint=meta.get("params_fingerprint", ""),
        true_counts=true,
        run_index=meta.get("run_index"),
        start=meta.get("start", "stationary"),
        burnin=float(meta.get("burnin", 0.0)),
    )


# --------------------------------------------------------------------------
# moment sets


def write_moments(moments: MomentSet, out_dir, prefix: str = "") -> list[Path]:
    """``alpha0.csv``, ``alpha1.csv`` (and ``alpha2.csv``) plus ``moments.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = moments.n
    header = [str(i + 1) for i in range(n)]
    paths = [write_csv(out / f"{prefix}alpha0.csv", header, [[fmt(v) for v in moments.alpha0]])]
    mats = [("alpha1", moments.alpha1), ("alpha2", moments.alpha2)]
    for name, mat in mats:
        if mat is not None:
            paths.append(write_csv(out / f"{prefix}{name}.csv", header, [[fmt(v) for v in row] for row in mat]))
    paths.append(write_json(out / f"{prefix}moments.json", moments.to_dict()))
    return paths


def _read_matrix(path) -> np.ndarray:
    _, rows = read_csv(path)
    return np.array(rows, dtype=float)


def read_moments(out_dir, prefix: str = "") -> MomentSet:
    out = Path(out_dir)
    js = out / f"{prefix}moments.json"
    if js.exists():
        return MomentSet.from_dict(read_json(js))
    a2 = out / f"{prefix}alpha2.csv"
    return MomentSet(
        alpha0=_read_matrix(out / f"{prefix}alpha0.csv").ravel(),
        alpha1=_read_matrix(out / f"{prefix}alpha1.csv"),
        alpha2=_read_matrix(a2) if a2.exists() else None,
        source="analytic",
    )


# --------------------------------------------------------------------------
# estimation results


def write_result(result: EstimationResult, path) -> tuple[Path, Path]:
    """JSON document plus a flat ``name,value`` CSV next to it."""
    path = Path(path)
    js = write_json(path, result.to_dict())
    flat = [[name, fmt(v)] for name, v in result.named_parameters()]
    flat += [["residual_norm", fmt(result.residual_norm)], ["converged", int(result.converged)]]
    return js, write_csv(path.with_suffix(".csv"), ["name", "value"], flat)
