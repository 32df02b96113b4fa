"""Named desk-scale experiments.

Each experiment is a function of a flat parameter dict (defaults in
``EXPERIMENTS[name].defaults``) returning an :class:`ExperimentResult`:
tidy tables for CSV, a JSON report, per-run training traces and final
models. Everything is a deterministic function of the parameters, seed
included.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import analysis as A
from . import datagen as G
from . import diffcore as dc
from .datagen import CouplingSpec, EnvDataset
from .models import BoundedMlpDensity, GaussianDensity, LinearPredictor, TwoParamPredictor
from .objectives import irmv1_penalty, per_sample_loss, wri_penalty
from .trainer import (
    FeatureDensityWeights,
    TrainConfig,
    TrainTrace,
    two_weight_coupling,
    invariant_density_weights,
    ols_closed_form,
    run_two_param_experiment,
    train_baseline,
    train_wri_alternating,
)

__all__ = [
    "ExperimentResult",
    "Experiment",
    "EXPERIMENTS",
    "FIG3_PARAMS",
    "FIG1_WEIGHTS",
    "run",
    "train_method",
    "spurious_ratio",
    "fig1",
    "fig3",
    "fig4",
    "table1",
    "appxC",
    "appxD",
    "simsweep",
    "ood",
    "density_quality",
    "identifiability_run",
    "IDENTIFIABILITY_SPEC_KW",
    "fit_logistic",
]

METHODS = ("erm", "irm", "vrex", "wri")
FIG1_WEIGHTS = {"erm": 0.0, "irm": 1e5, "vrex": 1.0, "wri": 1500.0}
# Large invariant covariate shift between the two training environments, with
# spurious means that move between them (same row layout as TOY2D_PARAMS).
FIG3_PARAMS = (
    (3.0, 1.5, -1.5, 1.0),
    (0.3, 0.5, -0.5, 1.0),
    (3.0, -1.0, 1.0, 1.0),
)


@dataclass
class ExperimentResult:
    name: str
    tables: dict[str, list[dict]] = field(default_factory=dict)
    report: dict = field(default_factory=dict)
    traces: dict[str, TrainTrace] = field(default_factory=dict)
    models: dict[str, object] = field(default_factory=dict)
    text: str = ""


@dataclass(frozen=True)
class Experiment:
    fn: Callable[[dict], ExperimentResult]
    defaults: dict
    help: str = ""


# ----------------------------------------------------------------------------
# shared helpers


def spurious_ratio(model: LinearPredictor, d_inv: int = 1) -> float:
    w = model.weights
    return float(np.linalg.norm(w[d_inv:]) / np.linalg.norm(w[:d_inv]))


def _toy_weights(params, k: int = 2):
    """Exact invariant densities N(mean, std^2) of the first ``k`` toy environments."""
    out = []
    for row in params[:k]:
        mu = row[4] if len(row) > 4 else 0.0
        out.append(invariant_density_weights(GaussianDensity([mu], [[row[0] ** 2]]), 1))
    return out


def train_method(method: str, cfg: TrainConfig, envs, predictor, densities=None):
    """Train one of erm/irm/vrex/wri; returns ``(model, trace)``."""
    if method == "wri":
        model, _, trace = train_wri_alternating(cfg, envs, predictor, densities)
        return model, trace
    return train_baseline(method, cfg, envs, predictor)


def _toy_compare(envs, params, p: dict, seed: int) -> tuple[list[dict], dict, dict]:
    train, test = envs[:2], envs[2]
    base = TrainConfig(n_steps=p["n_steps"], batch_size=None, lr=p["lr"], loss="logistic", seed=seed)
    weights = p["weights"]
    rows, traces, models = [], {}, {}
    for m in p["methods"]:
        init = LinearPredictor(2, rng=np.random.default_rng([seed, 9]))
        cfg = base.replace(lam=float(weights[m]))
        dens = _toy_weights(params) if m == "wri" else None
        model, trace = train_method(m, cfg, train, init, dens)
        w = model.weights
        rows.append({"method": m.upper() if m != "vrex" else "VREx", "w_inv": float(w[0]),
                     "w_spu": float(w[1]), "bias": float(model.params["b"][0]),
                     "ratio": abs(float(w[1] / w[0])), "train_acc": float(np.mean([A.accuracy(model, D) for D in train])),
                     "test_acc": A.accuracy(model, test)})
        traces[m] = trace
        models[m] = model
    return rows, traces, models


def _fmt_rows(rows: list[dict], cols: list[str]) -> str:
    def f(v):
        return f"{v:.4g}" if isinstance(v, float) else str(v)
    return A.format_table(cols, [[f(r[c]) for c in cols] for r in rows])


# ----------------------------------------------------------------------------
# fig1 / fig3


def fig1(p: dict) -> ExperimentResult:
    seed = int(p["seed"])
    envs = G.gen_toy2d(int(p["n"]), np.random.default_rng(seed))
    rows, traces, models = _toy_compare(envs, G.TOY2D_PARAMS, p, seed)
    best = min(rows, key=lambda r: r["ratio"])["method"]
    cols = ["method", "w_inv", "w_spu", "ratio", "test_acc"]
    return ExperimentResult("fig1", {"weights": rows}, {"seed": seed, "smallest_ratio": best, "rows": rows},
                            traces, models, _fmt_rows(rows, cols))


def fig3(p: dict) -> ExperimentResult:
    seed = int(p["seed"])
    params = tuple(tuple(r) for r in p["params"])
    rows, traces = [], {}
    for n in p["ns"]:
        envs = G.gen_toy2d(int(n), np.random.default_rng([int(n), seed]), params=params)
        sub, tr, _ = _toy_compare(envs, params, p, seed)
        for r in sub:
            rows.append({"n": int(n), **r})
        traces.update({f"{m}_n{n}": t for m, t in tr.items()})
    cols = ["n", "method", "ratio", "test_acc"]
    return ExperimentResult("fig3", {"ratios": rows}, {"seed": seed, "rows": rows}, traces, {},
                            _fmt_rows(rows, cols))


# ----------------------------------------------------------------------------
# fig4: penalty landscape over near-optimal spurious classifiers


def fit_logistic(X: np.ndarray, y: np.ndarray, n_iter: int = 50, ridge: float = 1e-8) -> np.ndarray:
    """Newton's method for logistic regression with an intercept (last entry)."""
    Z = np.hstack([X, np.ones((len(X), 1))])
    w = np.zeros(Z.shape[1])
    for _ in range(n_iter):
        q = 1.0 / (1.0 + np.exp(-(Z @ w)))
        g = Z.T @ (q - y) / len(Z)
        H = (Z * (q * (1 - q))[:, None]).T @ Z / len(Z) + ridge * np.eye(Z.shape[1])
        step = np.linalg.solve(H, g)
        w -= step
        if np.max(np.abs(step)) < 1e-12:
            break
    return w


def _logistic_erm(w: np.ndarray, envs) -> float:
    out = []
    for D in envs:
        z = D.X @ w[:-1] + w[-1]
        out.append(np.mean(np.logaddexp(0.0, z) - D.y * z))
    return float(np.mean(out))


def _penalties_at(w: np.ndarray, envs, dens) -> tuple[float, float]:
    tape = dc.Tape()
    outs = [tape.constant(D.X @ w[:-1] + w[-1]) for D in envs]
    losses = [per_sample_loss(o, D.y, "logistic") for o, D in zip(outs, envs)]
    k = len(envs)
    weights = [[dens[j][i] if i != j else None for j in range(k)] for i in range(k)]
    irm = float(irmv1_penalty(outs, [D.y for D in envs], "logistic").data)
    return irm, float(wri_penalty(losses, weights).data)


def fig4(p: dict) -> ExperimentResult:
    seed = int(p["seed"])
    g = np.linspace(-1.0, 1.0, int(p["grid"]))
    rows, land = [], []
    for sep in p["separations"]:
        params = ((1.0, 1.0, -1.0, 1.0, 0.0), (1.0, 0.5, -0.5, 1.0, float(sep)))
        envs = G.gen_toy2d(int(p["n"]), np.random.default_rng([seed, int(round(1000 * sep))]), params=params)
        X = np.vstack([D.X for D in envs])
        y = np.concatenate([D.y for D in envs]).astype(np.float64)
        w_opt = fit_logistic(X, y)
        l_opt = _logistic_erm(w_opt, envs)
        # dens[j][i]: exact invariant density of env j at env i's samples
        gd = [GaussianDensity([r[4]], [[r[0] ** 2]]) for r in params]
        dens = [[gd[j].pdf(D.X[:, :1]) for D in envs] for j in range(len(envs))]
        kept = []
        scale = max(abs(w_opt[0]), 1e-3)
        for d_spu in g * p["spu_range"] * scale:
            for d_inv in g * p["inv_range"] * scale:
                for d_b in g * p["bias_range"]:
                    w = w_opt + np.array([d_inv, d_spu, d_b])
                    if abs(w[1]) < p["min_ratio"] * abs(w[0]):
                        continue
                    erm = _logistic_erm(w, envs)
                    if erm > (1.0 + p["tolerance"]) * l_opt:
                        continue
                    irm, wri = _penalties_at(w, envs, dens)
                    kept.append((irm, wri, w, erm))
        if not kept:
            rows.append({"separation": float(sep), "n_candidates": 0, "min_irm": float("nan"),
                         "min_wri": float("nan"), "erm_opt": l_opt})
            continue
        irm_min = min(kept, key=lambda t: t[0])
        wri_min = min(kept, key=lambda t: t[1])
        rows.append({"separation": float(sep), "n_candidates": len(kept), "erm_opt": l_opt,
                     "min_irm": irm_min[0], "min_wri": wri_min[1],
                     "w_spu_opt": float(w_opt[1]), "w_inv_opt": float(w_opt[0])})
        for irm, wri, w, erm in kept:
            land.append({"separation": float(sep), "w_inv": float(w[0]), "w_spu": float(w[1]),
                         "bias": float(w[2]), "erm": erm, "irm": irm, "wri": wri})
    cols = ["separation", "n_candidates", "min_irm", "min_wri"]
    return ExperimentResult("fig4", {"minima": rows, "landscape": land}, {"seed": seed, "rows": rows},
                            text=_fmt_rows(rows, cols))


# ----------------------------------------------------------------------------
# table1


def table1(p: dict) -> ExperimentResult:
    seed = int(p["seed"])
    rng = np.random.default_rng(seed)
    n = int(p["n"])
    data = {"HCMNIST": G.gen_hcmnist_ideal(False, n, rng), "HCMNIST-CS": G.gen_hcmnist_ideal(True, n, rng)}
    tab = A.evaluate_ideal_penalties(data)
    return ExperimentResult("table1", {"penalties": tab.rows}, {"seed": seed, **tab.to_dict()},
                            text=tab.to_text())


# ----------------------------------------------------------------------------
# appxC


def appxC(p: dict) -> ExperimentResult:
    seed = int(p["seed"])
    inits = [p["init"]] if isinstance(p["init"], str) else list(p["init"])
    methods = [p["method"]] if isinstance(p["method"], str) else list(p["method"])
    cfg = TrainConfig(n_steps=int(p["n_steps"]), batch_size=None, lr=p["lr"], lam=p["lam"],
                      weight_decay=p["weight_decay"], seed=seed)
    rows, traces = [], {}
    for init in inits:
        for m in methods:
            cfg_m = cfg if m == "wri" else cfg.replace(lam=0.0)
            tr = run_two_param_experiment(init, m, cfg_m, n=int(p["n"]))
            last = tr[-1]
            rows.append({"init": init, "method": m.upper(), "inv_weight": last["inv_weight"],
                         "spu_weight": last["spu_weight"], "erm": last["erm"]})
            traces[f"{m}_{init}"] = tr
    return ExperimentResult("appxC", {"final_weights": rows}, {"seed": seed, "rows": rows}, traces,
                            text=_fmt_rows(rows, ["init", "method", "inv_weight", "spu_weight"]))


# ----------------------------------------------------------------------------
# appxD: density quality under alternating minimisation


def _feature_gaussians(spec: CouplingSpec, u: np.ndarray) -> list[tuple[float, float]]:
    """Mean and variance of the scalar feature u . x in each environment."""
    from .datagen import regression_moments
    out = []
    for e in range(spec.k):
        m, C = regression_moments(spec, e)
        out.append((float(u @ m), float(u @ C @ u)))
    return out


def _normal_pdf(z, mu, var):
    return np.exp(-((z - mu) ** 2) / (2 * var)) / np.sqrt(2 * np.pi * var)


def density_quality(model: TwoParamPredictor, dens, spec: CouplingSpec, Xs) -> float:
    """Mean over environments of the proportional density error of ``d^e``,
    measured on the other environments' samples (where the penalty uses it)."""
    u = np.array([model.inv_weight, model.spu_weight])
    fg = _feature_gaussians(spec, u)
    scores = []
    for e, (mu, var) in enumerate(fg):
        z = np.vstack([X for i, X in enumerate(Xs) if i != e]) @ u
        scores.append(A.proportional_density_mse(dens[e](z[:, None]), _normal_pdf(z, mu, var)))
    return float(np.mean(scores))


def _sub_spec(spec: CouplingSpec, idx) -> CouplingSpec:
    pick = lambda xs: [xs[i] for i in idx]  # noqa: E731
    return CouplingSpec("regression", spec.w_inv_star, spec.sigma_y, pick(spec.inv_means),
                        pick(spec.inv_covs), pick(spec.spu_scale), pick(spec.spu_cov))


def appxD(p: dict) -> ExperimentResult:
    seed = int(p["seed"])
    spec = _sub_spec(two_weight_coupling(), p["envs"])
    envs = G.gen_regression_envs(spec, int(p["n"]), np.random.default_rng(seed))
    Xs = [D.X for D in envs]
    cfg = TrainConfig(n_steps=int(p["n_steps"]), lam=p["lam"], lr=p["lr"], density_lam=p["density_lam"],
                      beta=p["beta"], density_lr=p["density_lr"], normalize_by_nll=True, seed=seed)
    pred = TwoParamPredictor(1, a=1.0, b=1.0)
    dens0 = [BoundedMlpDensity(1, hidden=int(p["hidden"]), d_min=cfg.d_min, d_max=cfg.d_max,
                               rng=np.random.default_rng([seed, e])) for e in range(spec.k)]
    monitor = lambda m, d: {"density_quality": density_quality(m, d, spec, Xs)}  # noqa: E731
    model, dens, trace = train_wri_alternating(cfg, envs, pred, dens0, monitor=monitor,
                                               monitor_every=int(p["monitor_every"]))
    dq = trace.column("density_quality")
    dq = dq[np.isfinite(dq)]
    # learned vs exact (proportional) densities on a grid, for each environment
    u = np.array([model.inv_weight, model.spu_weight])
    zg = np.linspace(-5.0, 5.0, int(p["grid"]))
    comp = []
    for e, (mu, var) in enumerate(_feature_gaussians(spec, u)):
        est, ex = dens[e](zg[:, None]), _normal_pdf(zg, mu, var)
        zo = np.vstack([X for i, X in enumerate(Xs) if i != e]) @ u
        c = float(np.dot(dens[e](zo[:, None]), _normal_pdf(zo, mu, var))
                  / np.dot(dens[e](zo[:, None]), dens[e](zo[:, None])))
        other = np.sum([_normal_pdf(zg, *g) for i, g in enumerate(_feature_gaussians(spec, u)) if i != e], axis=0)
        for z, a, b, o in zip(zg, est, ex, other):
            comp.append({"env": e, "z": float(z), "learned": float(a), "proportional": c * float(a),
                         "exact": float(b), "other_env_density": float(o)})
    rows = [{"step": 0, "density_quality": density_quality(pred, dens0, spec, Xs)}]
    rows += [{"step": int(r["step"]), "density_quality": r["density_quality"]}
             for r in trace.records if "density_quality" in r]
    report = {"seed": seed, "initial_quality": rows[0]["density_quality"], "final_quality": float(dq[-1]),
              "inv_weight": model.inv_weight, "spu_weight": model.spu_weight}
    steps = np.array([r["step"] for r in rows], dtype=np.float64)
    report["quality_slope"] = float(np.polyfit(steps, [r["density_quality"] for r in rows], 1)[0])
    show = sorted(set(np.linspace(0, len(rows) - 1, 11).round().astype(int)))
    text = A.format_table(["step", "density_quality"],
                          [[rows[i]["step"], f"{rows[i]['density_quality']:.4f}"] for i in show])
    return ExperimentResult("appxD", {"quality": rows, "overlap": comp}, report, {"wri": trace},
                            {"predictor": model, **{f"density_{e}": d for e, d in enumerate(dens)}}, text)


# ----------------------------------------------------------------------------
# simsweep


def _sim_setting(p: dict, sweep: str, value: float) -> dict:
    kw = {"sigma_inv": p["sigma_inv"], "delta_inv": p["delta_inv"], "theta_parity": None}
    if sweep == "theta_parity":
        kw.update(sigma_inv=0.15, delta_inv=0.5, theta_parity=float(value))
    else:
        kw[sweep] = float(value)
    return kw


def simsweep(p: dict) -> ExperimentResult:
    seed = int(p["seed"])
    sweeps = [p["sweep"]] if isinstance(p["sweep"], str) else list(p["sweep"])
    rows = []
    for sweep in sweeps:
        for vi, value in enumerate(p["values"][sweep]):
            kw = _sim_setting(p, sweep, value)
            rng = np.random.default_rng([seed, len(rows), vi])
            envs, _ = G.gen_classification_sim(kw["sigma_inv"], kw["delta_inv"], p["sigma_y"], p["sigma_spu"],
                                               int(p["k"]), int(p["c"]), int(p["d_inv"]), int(p["d_spu"]),
                                               int(p["n"]), rng, theta_parity=kw["theta_parity"])
            train, test = envs[:-1], envs[-1]
            half = test.n // 2
            val_env, test_env = test.subset(np.arange(half)), test.subset(np.arange(half, test.n))
            cfg = TrainConfig(n_steps=int(p["n_steps"]), batch_size=None, lr=p["lr"], loss="cross_entropy",
                              seed=seed, anneal_steps=int(p["anneal_steps"]), beta=p["beta"])
            for m in p["methods"]:
                lam = float(p["lam"][m])
                init = LinearPredictor(train[0].d, int(p["c"]), rng=np.random.default_rng([seed, 9]))
                dens = None
                if m == "wri":
                    dens = [BoundedMlpDensity(train[0].d, rng=np.random.default_rng([seed, 20 + e]))
                            for e in range(len(train))]
                model, _ = train_method(m, cfg.replace(lam=lam), train, init, dens)
                rows.append({"sweep": sweep, "value": float(value), "method": m.upper() if m != "vrex" else "VREx",
                             "train_acc": float(np.mean([A.accuracy(model, D) for D in train])),
                             "val_acc": A.accuracy(model, val_env), "test_acc": A.accuracy(model, test_env)})
    cols = ["sweep", "value", "method", "val_acc", "test_acc"]
    return ExperimentResult("simsweep", {"accuracy": rows}, {"seed": seed, "rows": rows},
                            text=_fmt_rows(rows, cols))


# ----------------------------------------------------------------------------
# ood


def _one_hot_env(D: EnvDataset) -> EnvDataset:
    return EnvDataset(D.env_id, G.one_hot_digits(D.X), D.y, (18, 1), D.meta)


def ood(p: dict) -> ExperimentResult:
    """Learned WRI densities vs. baseline max-confidence as OOD scores on ideal digits."""
    seed = int(p["seed"])
    rng = np.random.default_rng(seed)
    envs = [_one_hot_env(D) for D in G.gen_hcmnist_ideal(bool(p["shift"]), int(p["n"]), rng)]
    train = envs[:2]
    test = _one_hot_env(G.make_ood_digits(rng, int(p["n_ood"])))
    flags = test.meta["in_dist"]
    cfg = TrainConfig(n_steps=int(p["n_steps"]), loss="logistic", lr=p["lr"], seed=seed, normalize_by_nll=True,
                      beta=p["beta"], density_lam=p["density_lam"])
    rows, models = [], {}
    for m in p["methods"]:
        init = LinearPredictor(train[0].d, rng=np.random.default_rng([seed, 9]))
        if m == "wri":
            dens0 = [BoundedMlpDensity(train[0].d, hidden=int(p["hidden"]), rng=np.random.default_rng([seed, e]))
                     for e in range(len(train))]
            model, dens, _ = train_wri_alternating(cfg.replace(lam=float(p["lam"][m])), train, init, dens0)
            score = np.mean([d(test.X) for d in dens], axis=0)
            models.update({f"density_{e}": d for e, d in enumerate(dens)})
        else:
            model, _ = train_baseline(m, cfg.replace(lam=float(p["lam"][m])), train, init)
            q = 1.0 / (1.0 + np.exp(-model(test.X)))
            score = np.maximum(q, 1.0 - q)
        models[m] = model
        roc = A.roc_auroc(score, flags)
        rows.append({"method": m.upper() if m != "vrex" else "VREx",
                     "score": "density" if m == "wri" else "max_confidence", "auroc": roc.auroc,
                     **{f"tpr@{int(round(100 * f))}": t for f, t in roc.tpr_at_fpr.items()}})
    cols = ["method", "score", "auroc", "tpr@20", "tpr@40", "tpr@60", "tpr@80"]
    return ExperimentResult("ood", {"auroc": rows}, {"seed": seed, "rows": rows}, models=models,
                            text=_fmt_rows(rows, cols))


# ----------------------------------------------------------------------------
# regression identifiability run (three environments, two spurious columns)

IDENTIFIABILITY_SPEC_KW = dict(sigma_y=1.0, spu_scale_mean=1.0, spu_scale_std=0.5, spu_noise=(0.3, 0.8), inv_shift=0.5)


def identifiability_run(seed: int, n: int = 10000, lam: float = 1e4, n_steps: int = 1000, lr: float = 0.01,
                 d_inv: int = 2, d_spu: int = 2, k: int = 3) -> dict:
    """WRI with exact invariant densities vs. pooled OLS on a random regression coupling."""
    rng = np.random.default_rng(seed)
    spec = G.sample_regression_spec(d_inv, d_spu, k, rng, **IDENTIFIABILITY_SPEC_KW)
    envs = G.gen_regression_envs(spec, n, rng)
    dens = [invariant_density_weights(GaussianDensity(spec.inv_means[j], spec.inv_covs[j]), d_inv)
            for j in range(k)]
    cfg = TrainConfig(n_steps=n_steps, batch_size=None, lam=lam, lr=lr, seed=seed)
    model, _, trace = train_wri_alternating(cfg, envs, LinearPredictor(d_inv + d_spu, rng=rng, bias=False), dens)
    X = np.vstack([D.X for D in envs])
    y = np.concatenate([D.y for D in envs])
    w_ols = ols_closed_form(np.hstack([X, np.ones((len(X), 1))]), y)[:-1]
    weighting = [[(lambda Xi, j=j: GaussianDensity(spec.inv_means[j], spec.inv_covs[j]).pdf(Xi[:, :d_inv]))
                  if i != j else None for j in range(k)] for i in range(k)]
    return {"seed": seed, "spec": spec, "envs": envs, "weighting": weighting,
            "ratio_wri": spurious_ratio(model, d_inv),
            "ratio_ols": float(np.linalg.norm(w_ols[d_inv:]) / np.linalg.norm(w_ols[:d_inv])),
            "model": model, "trace": trace}


# ----------------------------------------------------------------------------
# registry

_TOY = {"n_steps": 500, "lr": 0.05, "weights": FIG1_WEIGHTS, "methods": list(METHODS)}

EXPERIMENTS: dict[str, Experiment] = {
    "fig1": Experiment(fig1, {"seed": 0, "n": 10000, **_TOY}, "toy 2-D decision boundaries"),
    "fig3": Experiment(fig3, {"seed": 0, "ns": [100, 1000, 10000], "params": [list(r) for r in FIG3_PARAMS], **_TOY},
                       "sample-size sweep of the spurious weight ratio"),
    "fig4": Experiment(fig4, {"seed": 0, "n": 4000, "separations": [0.0, 0.5, 1.0, 1.5, 2.0], "grid": 11,
                              "spu_range": 0.5, "inv_range": 0.5, "bias_range": 0.5, "tolerance": 0.05,
                              "min_ratio": 0.1},
                       "IRM vs WRI penalties of near-optimal spurious classifiers"),
    "table1": Experiment(table1, {"seed": 0, "n": 20000}, "penalties of digit-only vs colour-only predictors"),
    "appxC": Experiment(appxC, {"seed": 0, "n": 10000, "init": ["equal_weights", "spurious_only"],
                                "method": ["wri", "erm"], "n_steps": 500, "lr": 0.1, "lam": 100.0,
                                "weight_decay": 0.05},
                        "two-weight featurizer trajectories"),
    "appxD": Experiment(appxD, {"seed": 0, "n": 5000, "envs": [0, 1], "n_steps": 3000, "lam": 1.0, "lr": 0.01,
                                "density_lam": 5.0, "beta": 0.02, "density_lr": 0.02, "hidden": 64,
                                "monitor_every": 25, "grid": 81},
                        "learned density quality under alternating minimisation"),
    "simsweep": Experiment(simsweep, {"seed": 0, "sweep": ["sigma_inv", "delta_inv", "theta_parity"],
                                      "values": {"sigma_inv": [0.0, 0.5, 1.0], "delta_inv": [0.0, 0.5, 0.9],
                                                 "theta_parity": [90.0, 45.0, 15.0]},
                                      "sigma_inv": 0.5, "delta_inv": 0.0, "sigma_y": 0.5, "sigma_spu": 1.0,
                                      "k": 4, "c": 3, "d_inv": 5, "d_spu": 5, "n": 1000, "n_steps": 300,
                                      "lr": 0.01, "anneal_steps": 50, "beta": 0.02,
                                      "lam": {"erm": 0.0, "irm": 100.0, "vrex": 100.0, "wri": 10.0},
                                      "methods": list(METHODS)},
                           "simulated classification sweeps"),
    "ood": Experiment(ood, {"seed": 0, "n": 6000, "n_ood": 2000, "shift": False, "n_steps": 300, "lr": 0.01,
                            "beta": 0.5, "density_lam": 5.0, "hidden": 16,
                            "lam": {"erm": 0.0, "irm": 100.0, "vrex": 10.0, "wri": 1.0},
                            "methods": list(METHODS)},
                      "density vs confidence OOD scores"),
}


def run(name: str, params: dict | None = None) -> ExperimentResult:
    """Run a named experiment with ``params`` merged over its defaults."""
    if name not in EXPERIMENTS:
        raise KeyError(f"unknown experiment {name!r}; valid: {', '.join(EXPERIMENTS)}")
    exp = EXPERIMENTS[name]
    params = dict(params or {})
    unknown = set(params) - set(exp.defaults)
    if unknown:
        raise ValueError(f"unknown parameter(s) for {name}: {sorted(unknown)}")
    return exp.fn({**exp.defaults, **params})
