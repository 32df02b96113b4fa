"""CSV + JSON sidecar persistence for environments, plus small output helpers.

Floats are written with ``repr`` so a round trip is exact and two runs with
the same seed produce byte-identical files.
"""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import CouplingSpec, EnvDataset

__all__ = [
    "save_envs",
    "load_envs",
    "write_csv",
    "write_json",
    "content_hash",
    "to_jsonable",
]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    return obj


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(to_jsonable(obj), indent=1, sort_keys=True) + "\n")


def write_csv(rows: Sequence[dict], path, columns: Sequence[str] | None = None) -> None:
    """Write dict rows; columns default to first-seen key order across rows."""
    if columns is None:
        columns = []
        for r in rows:
            columns.extend(k for k in r if k not in columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else _fmt(r.get(c)) for c in columns])


def content_hash(*paths_or_bytes) -> str:
    """sha1 over the given files (sorted by name) or byte strings."""
    h = hashlib.sha1()
    for p in paths_or_bytes:
        if isinstance(p, (bytes, bytearray)):
            h.update(p)
            continue
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for f in files:
            h.update(f.name.encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def save_envs(envs: Sequence[EnvDataset], out_dir, stem: str = "env",
              spec: CouplingSpec | None = None, extra: dict | None = None) -> list[Path]:
    """One CSV per environment (header env_id, x_0.., y) and ``{stem}.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for D in envs:
        p = out / f"{stem}_{D.env_id}.csv"
        cols = ["env_id"] + [f"x_{j}" for j in range(D.d)] + ["y"]
        integer_y = np.issubdtype(D.y.dtype, np.integer)
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for x, y in zip(D.X, D.y):
                w.writerow([str(D.env_id)] + [repr(float(v)) for v in x]
                           + [str(int(y)) if integer_y else repr(float(y))])
        paths.append(p)
    sidecar = {
        "envs": [{"env_id": D.env_id, "file": f"{stem}_{D.env_id}.csv", "n": D.n,
                  "layout": list(D.layout), "integer_labels": bool(np.issubdtype(D.y.dtype, np.integer))}
                 for D in envs],
        "spec": spec.to_dict() if spec is not None else None,
    }
    if extra:
        sidecar.update(extra)
    write_json(sidecar, out / f"{stem}.json")
    return paths


def load_envs(out_dir, stem: str = "env") -> tuple[list[EnvDataset], CouplingSpec | None]:
    out = Path(out_dir)
    side = json.loads((out / f"{stem}.json").read_text())
    envs = []
    for e in side["envs"]:
        data = np.loadtxt(out / e["file"], delimiter=",", skiprows=1, ndmin=2)
        y = data[:, -1].astype(np.int64) if e["integer_labels"] else data[:, -1]
        envs.append(EnvDataset(int(e["env_id"]), data[:, 1:-1], y, tuple(e["layout"])))
    spec = CouplingSpec.from_dict(side["spec"]) if side.get("spec") else None
    return envs, spec
