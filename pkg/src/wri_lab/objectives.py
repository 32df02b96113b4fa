"""Risks and invariance penalties.

Everything here works on tape tensors so penalties can be differentiated.
The low-level functions take per-environment model outputs and per-sample
losses; :func:`empirical_risk`, :func:`erm_loss` and friends are thin
wrappers that run a predictor on :class:`~wri_lab.datagen.EnvDataset` objects.

Cross-environment weights are passed as ``weights[i][j]``: the weight of each
sample of environment ``i`` in the weighted risk R^{i,j}. Entries may be
tensors (learned densities on the tape), arrays, or ``None`` for weight 1.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

__all__ = [
    "LOSSES",
    "WeightingMode",
    "PenaltyReport",
    "SupportError",
    "per_sample_loss",
    "scale_derivative",
    "empirical_risk",
    "erm_loss",
    "weighted_risk",
    "cross_weights",
    "pairwise_risks",
    "wri_penalty",
    "vrex_penalty",
    "irmv1_penalty",
    "full_wri_loss",
]

LOSSES = ("squared", "logistic", "cross_entropy")


class SupportError(ValueError):
    """A density-ratio denominator fell below the floor."""


@dataclass(frozen=True)
class WeightingMode:
    kind: str = "density"  # density | density_ratio | uniform
    reference: int = 0
    floor: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("density", "density_ratio", "uniform"):
            raise ValueError(f"unknown weighting kind {self.kind!r}")


@dataclass
class PenaltyReport:
    env_risks: list[float]
    pair_risks: list[list[float]]
    wri: float = 0.0
    vrex: float = 0.0
    irm: float = 0.0
    erm_term: float = 0.0
    penalty_term: float = 0.0
    log_term: float = 0.0
    total: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def per_sample_loss(out: Tensor, y, loss: str) -> Tensor:
    if loss == "squared":
        return dc.squared_error(out, y)
    if loss == "logistic":
        return dc.logistic_loss(out, y)
    if loss == "cross_entropy":
        return dc.softmax_cross_entropy(out, y)
    raise ValueError(f"unknown loss {loss!r}; expected one of {LOSSES}")


def scale_derivative(out: Tensor, y, loss: str) -> Tensor:
    """Per-sample d/dw loss(w * out, y) at w = 1, as a tape expression.

    squared:        2 f (f - y)
    logistic:       f (sigmoid(f) - y)
    cross_entropy:  sum_k z_k softmax(z)_k - z_y
    """
    if loss == "squared":
        return dc.scale(dc.mul(out, dc.sub(out, np.asarray(y, dtype=np.float64))), 2.0)
    if loss == "logistic":
        return dc.mul(out, dc.sub(dc.sigmoid(out), np.asarray(y, dtype=np.float64)))
    if loss == "cross_entropy":
        z = out
        zmax = z.data.max(axis=1, keepdims=True)
        e = dc.exp(dc.sub(z, zmax))
        p = dc.div(e, dc.reshape(dc.sum_(e, axis=1), (z.shape[0], 1)))
        labels = np.asarray(y).astype(np.int64)
        onehot = np.zeros(z.shape)
        onehot[np.arange(z.shape[0]), labels] = 1.0
        return dc.sum_(dc.mul(z, dc.sub(p, onehot)), axis=1)
    raise ValueError(f"unknown loss {loss!r}")


def _mean_weighted(losses: Tensor, w) -> Tensor:
    if losses.size == 0:
        raise dc.ShapeError("empty environment")
    return dc.mean(losses if w is None else dc.mul(losses, w))


# ----------------------------------------------------------------------------
# risks


def empirical_risk(model, P, D, loss: str) -> Tensor:
    """(1/|D|) sum of per-sample losses of ``model`` on dataset ``D``."""
    if D.n == 0:
        raise dc.ShapeError("empirical_risk: empty dataset")
    return dc.mean(per_sample_loss(model.forward(P, D.X), D.y, loss))


def erm_loss(model, P, envs, loss: str) -> Tensor:
    return dc.mean(dc.stack([empirical_risk(model, P, D, loss) for D in envs]))


def weighted_risk(losses: Tensor, weights=None) -> Tensor:
    """Mean of ``weights * losses``; weight 1 when ``weights`` is None."""
    return _mean_weighted(losses, weights)


def cross_weights(dens: Sequence[Sequence], mode: WeightingMode):
    """Turn ``dens[i][j]`` (density of env j on env i's samples) into weights.

    density:        w[i][j] = d^j(x_i)
    density_ratio:  w[i][j] = d^ref(x_i) / d^i(x_i)  (1 on the reference)
    uniform:        None everywhere
    """
    k = len(dens) if dens is not None else 0
    if mode.kind == "uniform":
        return [[None] * k for _ in range(k)]
    if mode.kind == "density":
        return [[dens[i][j] if i != j else None for j in range(k)] for i in range(k)]
    r = mode.reference
    out = []
    for i in range(k):
        if i == r:
            out.append([None] * k)
            continue
        den = dens[i][i]
        dv = den.data if isinstance(den, Tensor) else np.asarray(den)
        bad = int(np.sum(dv < mode.floor))
        if bad:
            raise SupportError(f"density ratio: {bad} sample(s) of env {i} have denominator below "
                               f"{mode.floor:g} (support mismatch)")
        num = dens[i][r]
        if isinstance(num, Tensor) or isinstance(den, Tensor):
            w = dc.div(num, den)
        else:
            w = np.asarray(num) / dv
        out.append([w] * k)
    return out


def pairwise_risks(losses: Sequence[Tensor], weights) -> list[list[Tensor | None]]:
    k = len(losses)
    return [[_mean_weighted(losses[i], weights[i][j]) if i != j else None for j in range(k)]
            for i in range(k)]


def wri_penalty(losses: Sequence[Tensor], weights) -> Tensor:
    """Sum over ordered pairs i != j of (R^{i,j} - R^{j,i})**2."""
    k = len(losses)
    if k < 2:
        raise ValueError("wri_penalty needs at least two environments")
    R = pairwise_risks(losses, weights)
    terms = [dc.square(dc.sub(R[i][j], R[j][i])) for i in range(k) for j in range(k) if i != j]
    return dc.sum_(dc.stack(terms))


def vrex_penalty(risks: Sequence[Tensor]) -> Tensor:
    """Population variance of the per-environment risks."""
    if len(risks) < 2:
        raise ValueError("vrex_penalty needs at least two environments")
    return dc.variance(list(risks))


def irmv1_penalty(outputs: Sequence[Tensor], labels: Sequence, loss: str) -> Tensor:
    """Sum over environments of (d/dw R^e(w f) at w=1)**2."""
    grads = [dc.mean(scale_derivative(o, y, loss)) for o, y in zip(outputs, labels)]
    return dc.sum_(dc.square(dc.stack(grads)))


# ----------------------------------------------------------------------------
# practical objective


def full_wri_loss(losses: Sequence[Tensor], dens, own_dens: Sequence, lam: float, beta: float,
                  mode: WeightingMode = WeightingMode(), normalize_by_nll: bool = False,
                  include_erm: bool = True) -> tuple[Tensor, PenaltyReport]:
    """ERM + lam * WRI (+ beta * sum_e mean(-log d^e) on each env's own samples).

    ``dens[i][j]`` is density j evaluated on env i; ``own_dens[e]`` is d^e on
    env e's own samples (usually ``dens[e][e]``). With ``normalize_by_nll``
    the WRI term is divided by the (constant) mean predictor risk.
    """
    if lam < 0 or beta < 0:
        raise ValueError("lam and beta must be non-negative")
    tape = losses[0].tape
    risks = [dc.mean(l) for l in losses]
    erm = dc.mean(dc.stack(risks))
    total = erm if include_erm else tape.constant(0.0)
    wri_val, log_val = 0.0, 0.0
    pair = [[float("nan")] * len(losses) for _ in losses]
    if lam > 0 or dens is not None:
        w = cross_weights(dens, mode)
        R = pairwise_risks(losses, w)
        pair = [[float(r.data) if r is not None else float(risks[i].data) for r in row]
                for i, row in enumerate(R)]
        wri = wri_penalty(losses, w)
        wri_val = float(wri.data)
        if lam > 0:
            coef = lam / float(erm.data) if normalize_by_nll else lam
            total = dc.add(total, dc.scale(wri, coef))
    if beta > 0:
        for d in own_dens:
            if np.any(d.data <= 0):
                raise dc.DomainError("full_wri_loss: density output is not positive")
        logs = [dc.mean(dc.neg(dc.log(d))) for d in own_dens]
        log_term = dc.sum_(dc.stack(logs))
        log_val = float(log_term.data)
        total = dc.add(total, dc.scale(log_term, beta))
    report = PenaltyReport(
        env_risks=[float(r.data) for r in risks],
        pair_risks=pair,
        wri=wri_val,
        vrex=float(np.var([float(r.data) for r in risks])),
        erm_term=float(erm.data),
        penalty_term=float(total.data) - (float(erm.data) if include_erm else 0.0) - beta * log_val,
        log_term=log_val,
        total=float(total.data),
    )
    return total, report
