"""Evaluation tools: weighted moments and general position, Bernstein bounds,
density-quality scores, penalty tables, accuracy and ROC analysis."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .datagen import EnvDataset
from .objectives import (PenaltyReport, WeightingMode, full_wri_loss, per_sample_loss,
                         vrex_penalty, wri_penalty)

__all__ = [
    "WeightedMoments",
    "GeneralPositionCheck",
    "RocCurve",
    "PenaltyTable",
    "TablePredictor",
    "weighted_moments",
    "check_general_position",
    "bernstein_bound",
    "weight_stats",
    "proportional_density_mse",
    "roc_auroc",
    "mann_whitney_auc",
    "fit_single_feature_predictor",
    "evaluate_ideal_penalties",
    "accuracy",
    "format_table",
]


# ----------------------------------------------------------------------------
# weighted moments and general position


@dataclass
class WeightedMoments:
    sigma_ij: np.ndarray
    mu_ij: np.ndarray


def _weights(weight, X: np.ndarray) -> np.ndarray:
    w = weight(X) if callable(weight) else weight
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), (len(X),))
    return w


def weighted_moments(D: EnvDataset, weight) -> WeightedMoments:
    """Sample estimates of E_i[x x^T a(x)] and 2 E_i[x y a(x)].

    ``weight`` is a callable on the design matrix, an array of per-row
    weights, or a scalar.
    """
    X = D.X
    w = _weights(weight, X)
    S = (X * w[:, None]).T @ X / D.n
    mu = 2.0 * (X * (w * D.y)[:, None]).sum(axis=0) / D.n
    return WeightedMoments(0.5 * (S + S.T), mu)


@dataclass
class GeneralPositionCheck:
    status: str  # pass | fail | inconclusive
    rank_ok: bool
    ranks: list[int]
    gammas: np.ndarray
    probes: np.ndarray
    d_spu: int
    n_pairs: int
    tol: float
    spans: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    @property
    def min_rank(self) -> int:
        return min(self.ranks) if self.ranks else 0


def check_general_position(envs: Sequence[EnvDataset], weightings, n_probes: int = 16,
                           tol: float = 1e-8, rng: np.random.Generator | None = None
                           ) -> GeneralPositionCheck:
    """Randomised rank test of the general-position condition.

    ``weightings[i][j]`` is the weight applied to environment ``i``'s samples
    in R^{i,j} (callable, array or scalar). For each probe (unit ``x``,
    ``gamma ~ N(0, 1)``) the rows ``(S^{ij} - S^{ji}) x + gamma (m^{ij} - m^{ji})``
    over all pairs are restricted to the spurious block and their numerical
    rank is compared with ``d_spu``. ``rank_ok`` reports the rank condition
    alone; ``status`` is ``inconclusive`` when there are too few pairs
    (C(k, 2) <= 2 d_spu) or a single environment.
    """
    rng = rng or np.random.default_rng(0)
    k = len(envs)
    d_inv, d_spu = envs[0].layout
    sp = slice(d_inv, d_inv + d_spu)
    pairs = [(i, j) for i in range(k) for j in range(i + 1, k)]
    mom = {(i, j): weighted_moments(envs[i], weightings[i][j])
           for i in range(k) for j in range(k) if i != j}
    dS = [(mom[i, j].sigma_ij - mom[j, i].sigma_ij)[sp, sp] for i, j in pairs]
    dm = [(mom[i, j].mu_ij - mom[j, i].mu_ij)[sp] for i, j in pairs]
    probes = rng.standard_normal((n_probes, d_spu))
    probes /= np.linalg.norm(probes, axis=1, keepdims=True)
    gammas = rng.standard_normal(n_probes)
    ranks, spans = [], []
    for x, g in zip(probes, gammas):
        if not pairs:
            ranks.append(0)
            continue
        M = np.array([S @ x + g * m for S, m in zip(dS, dm)])
        s = np.linalg.svd(M, compute_uv=False)
        r = int(np.sum(s > tol * s[0])) if s[0] > 0 else 0
        ranks.append(r)
        spans.append(M)
    rank_ok = bool(pairs) and all(r == d_spu for r in ranks)
    if k < 2 or len(pairs) <= 2 * d_spu:
        status = "inconclusive"
    else:
        status = "pass" if rank_ok else "fail"
    return GeneralPositionCheck(status, rank_ok, ranks, gammas, probes, d_spu, len(pairs), tol, spans)


# ----------------------------------------------------------------------------
# weighting statistics


def bernstein_bound(M: float, var: float, n: int, delta: float) -> float:
    """Deviation bound 2 M ln(1/delta) / (3 n) + sqrt(2 var ln(1/delta) / n)."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    if var < 0:
        raise ValueError("var must be non-negative")
    L = math.log(1.0 / delta)
    return 2.0 * M * L / (3.0 * n) + math.sqrt(2.0 * var * L / n)


def weight_stats(weights, losses=None) -> tuple[float, float, float]:
    """``(M, variance, ESS)`` of a weight sample.

    The variance is that of ``weights * losses`` (losses default to 1, the
    worst case for a loss bounded by one).
    """
    w = np.asarray(weights, dtype=np.float64).ravel()
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    l = np.ones_like(w) if losses is None else np.asarray(losses, dtype=np.float64).ravel()
    M = max(1.0, float(w.max()))
    var = float(np.var(w * l, ddof=1)) if w.size > 1 else 0.0
    ess = float(w.sum() ** 2 / np.sum(w * w)) if np.any(w > 0) else 0.0
    return M, var, ess


def proportional_density_mse(estimates, exact) -> float:
    """MSE after the best rescaling of ``estimates``, relative to the best constant.

    A constant estimator scores exactly 1 and a proportional one scores 0.
    """
    est = np.asarray(estimates, dtype=np.float64).ravel()
    ex = np.asarray(exact, dtype=np.float64).ravel()
    if est.shape != ex.shape or est.size < 2:
        raise ValueError("estimates and exact densities need the same length (at least 2)")
    base = np.mean((ex - ex.mean()) ** 2)
    if base == 0.0:
        raise ValueError("proportional_density_mse is undefined when all exact densities are equal")
    den = est @ est
    C = (est @ ex) / den if den > 0 else 0.0
    return float(np.mean((C * est - ex) ** 2) / base)


# ----------------------------------------------------------------------------
# ROC


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auroc: float
    tpr_at_fpr: dict[float, float]

    def to_dict(self) -> dict:
        return {"auroc": self.auroc,
                "tpr_at_fpr": {f"{k:g}": v for k, v in self.tpr_at_fpr.items()},
                "thresholds": self.thresholds.tolist(), "fpr": self.fpr.tolist(),
                "tpr": self.tpr.tolist()}


def roc_auroc(scores, in_dist, fpr_levels=(0.2, 0.4, 0.6, 0.8)) -> RocCurve:
    """ROC of ``scores`` (higher = more in-distribution) against boolean labels."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(in_dist, dtype=bool).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_in, n_out = int(y.sum()), int((~y).sum())
    if n_in == 0 or n_out == 0:
        raise ValueError("roc_auroc needs both in- and out-of-distribution samples")
    thr = np.unique(s)[::-1]
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    # index of the last sample with score >= each threshold
    last = np.searchsorted(-s_sorted, -thr, side="right")
    tp = np.cumsum(y_sorted)[last - 1]
    fp = np.cumsum(~y_sorted)[last - 1]
    tpr = np.concatenate([[0.0], tp / n_in])
    fpr = np.concatenate([[0.0], fp / n_out])
    auroc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    # keep the upper vertex where fpr repeats
    keep = np.append(np.diff(fpr) > 0, True)
    at = {float(l): float(np.interp(l, fpr[keep], tpr[keep])) for l in fpr_levels}
    return RocCurve(np.concatenate([[np.inf], thr]), fpr, tpr, auroc, at)


def mann_whitney_auc(scores, in_dist) -> float:
    """U / (n_in n_out) by direct pair counting (ties count one half)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(in_dist, dtype=bool)
    a, b = s[y][:, None], s[~y][None, :]
    return float(((a > b).sum() + 0.5 * (a == b).sum()) / (a.size * b.size))


# ----------------------------------------------------------------------------
# ideal penalty tables


@dataclass
class TablePredictor:
    """Binary classifier whose logit is looked up from one integer feature."""

    column: int
    logits: dict[int, float]
    default: float = 0.0

    def __call__(self, X: np.ndarray) -> np.ndarray:
        v = X[:, self.column].astype(np.int64)
        return np.array([self.logits.get(int(t), self.default) for t in v])


def fit_single_feature_predictor(envs: Sequence[EnvDataset], column: int, eps: float = 1e-6
                                 ) -> TablePredictor:
    """Logistic regression on the one-hot encoding of a single discrete column,
    fit on the pooled environments (closed form: per-value log-odds)."""
    X = np.concatenate([D.X[:, column] for D in envs]).astype(np.int64)
    y = np.concatenate([D.y for D in envs]).astype(np.float64)
    logits = {}
    for v in np.unique(X):
        p = np.clip(y[X == v].mean(), eps, 1 - eps)
        logits[int(v)] = float(np.log(p / (1 - p)))
    return TablePredictor(column, logits)


def _empirical_pmf(D: EnvDataset, column: int) -> dict[int, float]:
    vals, counts = np.unique(D.X[:, column].astype(np.int64), return_counts=True)
    return {int(v): c / D.n for v, c in zip(vals, counts)}


def _penalties(predictor, envs: Sequence[EnvDataset], inv_column: int) -> PenaltyReport:
    tape = dc.Tape()
    losses = [per_sample_loss(tape.constant(predictor(D.X)), D.y, "logistic") for D in envs]
    pmfs = [_empirical_pmf(D, inv_column) for D in envs]
    dens = [[np.array([pmfs[j].get(int(v), 0.0) for v in D.X[:, inv_column]]) for j in range(len(envs))]
            for D in envs]
    _, rep = full_wri_loss(losses, dens, [], 0.0, 0.0, WeightingMode("density"))
    rep.extra["wri_uniform"] = float(wri_penalty(losses, [[None] * len(envs)] * len(envs)).data)
    rep.extra["vrex_tape"] = float(vrex_penalty([dc.mean(l) for l in losses]).data)
    return rep


@dataclass
class PenaltyTable:
    rows: list[dict]
    reports: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "reports": self.reports}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_text(self) -> str:
        return format_table(["method", "dataset", "digit", "color", "min"],
                            [[r["method"], r["dataset"], f"{r['digit']:.3e}", f"{r['color']:.3e}", r["min"]]
                             for r in self.rows])

    def lookup(self, method: str, dataset: str) -> dict:
        for r in self.rows:
            if r["method"] == method and r["dataset"] == dataset:
                return r
        raise KeyError((method, dataset))


def evaluate_ideal_penalties(datasets: Mapping[str, Sequence[EnvDataset]], n_train: int = 2
                             ) -> PenaltyTable:
    """WRI and VREx penalties of the digit-only and colour-only predictors.

    ``datasets`` maps a name (e.g. ``"HCMNIST"``) to the environments of an
    ideal (digit, colour) dataset; only the first ``n_train`` environments are
    used. WRI weights each environment by the other's empirical digit
    frequencies.
    """
    rows, reports = [], {}
    per = {}
    for name, envs in datasets.items():
        train = list(envs)[:n_train]
        preds = {"digit": fit_single_feature_predictor(train, 0),
                 "color": fit_single_feature_predictor(train, 1)}
        per[name] = {p: _penalties(f, train, 0) for p, f in preds.items()}
        for p, rep in per[name].items():
            reports[f"{name}/{p}"] = rep.to_dict()
    for method in ("wri", "vrex"):
        for name in datasets:
            vals = {p: getattr(per[name][p], method) for p in ("digit", "color")}
            rows.append({"method": method.upper() if method == "wri" else "VREx", "dataset": name,
                         **vals, "min": "Digit" if vals["digit"] <= vals["color"] else "Color"})
    return PenaltyTable(rows, reports)


# ----------------------------------------------------------------------------
# accuracy and tables


def accuracy(model, D: EnvDataset) -> float:
    """Fraction of correct predictions; 1-D outputs are logits (positive = class 1)."""
    out = np.asarray(model(D.X))
    pred = (out > 0).astype(np.int64) if out.ndim == 1 else out.argmax(axis=1)
    return float(np.mean(pred == D.y.astype(np.int64)))


def format_table(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [[str(h) for h in headers]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def report_json(obj) -> str:
    def conv(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if hasattr(o, "__dataclass_fields__"):
            return asdict(o)
        raise TypeError(type(o))
    return json.dumps(obj, indent=1, default=conv, sort_keys=True)
