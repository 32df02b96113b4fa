"""``wri-lab`` command line: dataset generation, named experiments, sweeps.

Parameters resolve as flag > config file > default. Config files are JSON
objects whose keys must be known parameters of the chosen generator or
experiment. Every output directory holds the resolved config and a content
hash of it (``manifest.json``), so reruns with the same inputs can be
compared byte for byte.
"""
from __future__ import annotations

import argparse
import itertools
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import datagen as G
from . import experiments as E
from .io import content_hash, save_envs, write_csv, write_json
from .models import save_checkpoint

GENERATORS = {
    "toy2d": {"seed": 0, "n": 10000},
    "regression": {"seed": 0, "n": 10000, "preset": "random", "d_inv": 2, "d_spu": 2, "k": 3,
                   "sigma_y": 0.5},
    "simsweep": {"seed": 0, "n": 1000, "sigma_inv": 0.5, "delta_inv": 0.0, "sigma_y": 0.5, "sigma_spu": 1.0,
                 "k": 4, "c": 3, "d_inv": 5, "d_spu": 5, "theta_parity": None},
    "hcmnist_ideal": {"seed": 0, "n": 30000, "shift": False},
}


class CliError(Exception):
    pass


# ----------------------------------------------------------------------------
# parameter resolution


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_config(path: str | None, known: dict, what: str) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {path} is not valid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(cfg, dict):
        raise CliError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(cfg) - set(known))
    if unknown:
        raise CliError(f"unknown config field(s) for {what}: {', '.join(unknown)}")
    return cfg


def _resolve(defaults: dict, args, what: str) -> dict:
    params = dict(defaults)
    params.update(_load_config(args.config, defaults, what))
    flags = {}
    for item in args.set or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        flags[key.strip()] = _parse_value(val)
    for name in ("seed", "n", "init", "method", "n_steps"):
        v = getattr(args, name, None)
        if v is not None:
            flags[name] = v
    if getattr(args, "shift", False):
        flags["shift"] = True
    unknown = sorted(set(flags) - set(defaults))
    if unknown:
        raise CliError(f"unknown parameter(s) for {what}: {', '.join(unknown)}")
    params.update(flags)
    return params


def _input_hash(kind: str, name: str, params: dict) -> str:
    blob = json.dumps({"kind": kind, "name": name, "params": params, "version": __version__},
                      sort_keys=True).encode()
    return content_hash(blob)


def _manifest(out: Path, kind: str, name: str, params: dict) -> None:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    write_json({"kind": kind, "name": name, "version": __version__,
                "input_hash": _input_hash(kind, name, params),
                "output_hash": content_hash(*files) if files else None,
                "files": [str(p.relative_to(out)) for p in files]}, out / "manifest.json")


def _out_dir(args, kind: str, name: str, params: dict) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path("runs") / f"{kind}-{name}-{_input_hash(kind, name, params)[:10]}"
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------------------------
# gen


def generate(name: str, p: dict):
    rng = np.random.default_rng(int(p["seed"]))
    n = int(p["n"])
    if name == "toy2d":
        return G.gen_toy2d(n, rng), None
    if name == "regression":
        if p["preset"] == "two_weight":
            from .trainer import two_weight_coupling
            spec = two_weight_coupling()
        elif p["preset"] == "random":
            spec = G.sample_regression_spec(int(p["d_inv"]), int(p["d_spu"]), int(p["k"]), rng,
                                            sigma_y=float(p["sigma_y"]))
        else:
            raise CliError(f"unknown regression preset {p['preset']!r} (expected random or two_weight)")
        return G.gen_regression_envs(spec, n, rng), spec
    if name == "simsweep":
        envs, spec = G.gen_classification_sim(p["sigma_inv"], p["delta_inv"], p["sigma_y"], p["sigma_spu"],
                                              int(p["k"]), int(p["c"]), int(p["d_inv"]), int(p["d_spu"]), n,
                                              rng, theta_parity=p["theta_parity"])
        return envs, spec
    if name == "hcmnist_ideal":
        return G.gen_hcmnist_ideal(bool(p["shift"]), n, rng), None
    raise CliError(f"unknown generator {name!r}")


def cmd_gen(args) -> int:
    params = _resolve(GENERATORS[args.name], args, f"generator {args.name}")
    envs, spec = generate(args.name, params)
    out = _out_dir(args, "gen", args.name, params)
    write_json(params, out / "config.json")
    save_envs(envs, out, spec=spec)
    _manifest(out, "gen", args.name, params)
    print(f"{args.name}: {len(envs)} environments -> {out}")
    for D in envs:
        means = " ".join(f"{m:+.3f}" for m in D.X.mean(axis=0))
        extra = ""
        if args.name == "hcmnist_ideal":
            easy = np.isin(D.X[:, 0], G.EASY_DIGITS)
            extra = f" easy_share={easy.mean():.3f} color_match={np.mean(D.X[:, 1] == D.y):.3f}"
        print(f"  env {D.env_id}: n={D.n} x_mean=[{means}] y_mean={np.mean(D.y):+.3f}{extra}")
    return 0


# ----------------------------------------------------------------------------
# experiment


def write_result(res: E.ExperimentResult, params: dict, out: Path) -> None:
    write_json(params, out / "config.json")
    for name, rows in res.tables.items():
        write_csv(rows, out / f"{name}.csv")
    write_json(res.report, out / "report.json")
    (out / "report.txt").write_text(res.text + "\n")
    for name, trace in res.traces.items():
        trace.to_csv(out / f"trace_{name}.csv")
    for name, model in res.models.items():
        save_checkpoint(model, out / f"model_{name}.json")
    _manifest(out, "experiment", res.name, params)


def cmd_experiment(args) -> int:
    exp = E.EXPERIMENTS[args.name]
    params = _resolve(exp.defaults, args, f"experiment {args.name}")
    res = E.run(args.name, params)
    out = _out_dir(args, "experiment", args.name, params)
    write_result(res, params, out)
    print(res.text)
    print(f"-> {out}")
    return 0


# ----------------------------------------------------------------------------
# sweep

SWEEP_KEYS = {"experiment", "seeds", "grid", "params", "table", "select", "metric", "group"}


def _workers(requested: int | None) -> int:
    env = os.environ.get("WRI_LAB_THREADS")
    cap = os.cpu_count() or 1
    if env is not None:
        try:
            cap = int(env)
        except ValueError:
            raise CliError(f"WRI_LAB_THREADS must be a positive integer, got {env!r}") from None
        if cap < 1:
            raise CliError(f"WRI_LAB_THREADS must be a positive integer, got {env!r}")
    return max(1, min(cap, requested or cap))


def _run_cell(job) -> tuple[str, int, str | None]:
    cell_id, seed, name, params, out = job
    try:
        res = E.run(name, params)
        write_result(res, params, Path(out))
        return cell_id, seed, None
    except Exception as exc:  # a failed cell must not stop the sweep
        return cell_id, seed, f"{type(exc).__name__}: {exc}"


def _mean_se(vals: list[float]) -> tuple[float, float]:
    a = np.asarray(vals, dtype=np.float64)
    se = float(a.std(ddof=1) / math.sqrt(len(a))) if len(a) > 1 else 0.0
    return float(a.mean()), se


def aggregate(cell_rows: dict[str, dict[int, list[dict]]], group: list[str], select: str, metric: str
              ) -> tuple[list[dict], list[dict]]:
    """Per cell: mean/SE over seeds for each (group, method). Then per
    (group, method) pick the cell with the best mean ``select`` value."""
    per_cell = []
    for cell_id in sorted(cell_rows):
        buckets: dict[tuple, dict[str, list]] = {}
        for seed in sorted(cell_rows[cell_id]):
            for r in cell_rows[cell_id][seed]:
                key = tuple(r[g] for g in group) + (r.get("method", ""),)
                b = buckets.setdefault(key, {"sel": [], "met": []})
                b["sel"].append(float(r[select]))
                b["met"].append(float(r[metric]))
        for key, b in buckets.items():
            sm, _ = _mean_se(b["sel"])
            mm, ms = _mean_se(b["met"])
            per_cell.append({**dict(zip(group + ["method"], key)), "cell": cell_id, f"{select}_mean": sm,
                             f"{metric}_mean": mm, f"{metric}_se": ms, "n_seeds": len(b["met"])})
    best: dict[tuple, dict] = {}
    for r in per_cell:
        key = tuple(r[g] for g in group + ["method"])
        if key not in best or r[f"{select}_mean"] > best[key][f"{select}_mean"]:
            best[key] = r
    return per_cell, [best[k] for k in sorted(best, key=lambda k: tuple(str(x) for x in k))]


def cmd_sweep(args) -> int:
    try:
        spec = json.loads(Path(args.config).read_text())
    except FileNotFoundError:
        raise CliError(f"sweep config not found: {args.config}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"sweep config is not valid JSON ({exc.msg} at line {exc.lineno})") from None
    unknown = sorted(set(spec) - SWEEP_KEYS)
    if unknown:
        raise CliError(f"unknown sweep field(s): {', '.join(unknown)}")
    name = spec.get("experiment")
    if name not in E.EXPERIMENTS:
        raise CliError(f"sweep experiment must be one of: {', '.join(E.EXPERIMENTS)}")
    defaults = E.EXPERIMENTS[name].defaults
    seeds = [int(s) for s in spec.get("seeds", [0, 1, 2, 3, 4])]
    grid = spec.get("grid", {})
    fixed = spec.get("params", {})
    bad = sorted((set(grid) | set(fixed)) - set(defaults))
    if bad:
        raise CliError(f"unknown parameter(s) for experiment {name}: {', '.join(bad)}")
    keys = sorted(grid)
    cells = [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))] or [{}]
    resolved = {"experiment": name, "seeds": seeds, "grid": grid, "params": fixed,
                "table": spec.get("table"), "select": spec.get("select", "val_acc"),
                "metric": spec.get("metric", "test_acc"), "group": spec.get("group", [])}
    out = Path(args.out) if args.out else Path("runs") / f"sweep-{name}-{_input_hash('sweep', name, resolved)[:10]}"
    out.mkdir(parents=True, exist_ok=True)
    write_json(resolved, out / "config.json")
    jobs = []
    for ci, cell in enumerate(cells):
        cell_id = f"c{ci:03d}"
        for s in seeds:
            params = {**defaults, **fixed, **cell, "seed": s}
            jobs.append((cell_id, s, name, params, str(out / "cells" / cell_id / f"seed{s}")))
    for j in jobs:
        Path(j[4]).mkdir(parents=True, exist_ok=True)
    workers = _workers(args.workers)
    if workers == 1:
        results = [_run_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    failed = sorted((c, s, err) for c, s, err in results if err)
    write_csv([{"cell": c, **cells[int(c[1:])]} for c in sorted({j[0] for j in jobs})], out / "cells.csv")
    table = resolved["table"]
    cell_rows: dict[str, dict[int, list[dict]]] = {}
    for cell_id, s, err in sorted(results, key=lambda t: (t[0], t[1])):
        if err:
            continue
        tables = sorted(Path(out / "cells" / cell_id / f"seed{s}").glob("*.csv"))
        tab = table or next((p.stem for p in tables if not p.stem.startswith("trace_")), None)
        path = out / "cells" / cell_id / f"seed{s}" / f"{tab}.csv"
        rows = _read_rows(path)
        cell_rows.setdefault(cell_id, {})[s] = rows
    summary_rows, best_rows = [], []
    if cell_rows:
        sample = next(iter(next(iter(cell_rows.values())).values()))
        sel = resolved["select"] if sample and resolved["select"] in sample[0] else None
        met = resolved["metric"] if sample and resolved["metric"] in sample[0] else None
        if sel is None or met is None:
            cols = [k for k, v in sample[0].items() if isinstance(v, float)] if sample else []
            if not cols:
                raise CliError("sweep: result table has no numeric columns to aggregate")
            sel = sel or cols[0]
            met = met or cols[0]
        summary_rows, best_rows = aggregate(cell_rows, list(resolved["group"]), sel, met)
        write_csv(summary_rows, out / "all_cells.csv")
        write_csv(best_rows, out / "aggregated.csv")
        cols = list(best_rows[0]) if best_rows else []
        print(_table(best_rows, cols))
    write_csv([{"cell": c, "seed": s, "error": e} for c, s, e in failed], out / "failed.csv",
              columns=["cell", "seed", "error"])
    _manifest(out, "sweep", name, resolved)
    print(f"-> {out}")
    if failed:
        c, s, e = failed[0]
        raise CliError(f"{len(failed)} of {len(jobs)} sweep run(s) failed (first: cell {c} seed {s}: {e})")
    return 0


def _read_rows(path: Path) -> list[dict]:
    import csv
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        conv = {}
        for k, v in r.items():
            try:
                conv[k] = float(v) if v not in ("", None) else None
            except ValueError:
                conv[k] = v
        out.append(conv)
    return out


def _table(rows: list[dict], cols: list[str]) -> str:
    from .analysis import format_table
    f = lambda v: f"{v:.4g}" if isinstance(v, float) else str(v)  # noqa: E731
    return format_table(cols, [[f(r[c]) for c in cols] for r in rows])


# ----------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wri-lab", description="Weighted risk invariance laboratory")
    ap.add_argument("--version", action="version", version=f"wri-lab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file of parameters")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one parameter (value parsed as JSON)")
        p.add_argument("--seed", type=int)
        p.add_argument("--n", type=int, help="samples (per environment where applicable)")
        p.add_argument("--out", help="output directory")

    g = sub.add_parser("gen", help="generate a dataset")
    g.add_argument("name", choices=sorted(GENERATORS))
    g.add_argument("--shift", action="store_true", help="hcmnist_ideal: covariate shift variant")
    common(g)
    g.set_defaults(func=cmd_gen)

    e = sub.add_parser("experiment", help="run a named experiment")
    e.add_argument("name", choices=list(E.EXPERIMENTS))
    e.add_argument("--init", help="appxC: equal_weights or spurious_only")
    e.add_argument("--method", help="appxC: wri or erm")
    e.add_argument("--n-steps", dest="n_steps", type=int)
    common(e)
    e.set_defaults(func=cmd_experiment)

    s = sub.add_parser("sweep", help="run an experiment over a parameter grid and seeds")
    s.add_argument("--config", required=True, help="JSON sweep description")
    s.add_argument("--out", help="output directory")
    s.add_argument("--workers", type=int, help="parallel workers (capped by WRI_LAB_THREADS)")
    s.set_defaults(func=cmd_sweep)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("wri-lab: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"wri-lab: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
