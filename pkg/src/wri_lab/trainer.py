"""Training loops.

:func:`train_wri_alternating` alternates Adam steps on the predictor (density
outputs frozen) with bursts of Adam steps on the per-environment density
models (predictor frozen). Weights can also be fixed functions instead of
learned densities, in which case only the predictor is trained.

A weight function is any callable ``fn(model, P, X)`` returning per-row
weights as an array or as a tape tensor (when the weight depends on the
predictor's parameters, as for the exact feature density used by
:func:`run_two_param_experiment`).
"""
from __future__ import annotations

import csv
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .datagen import CouplingSpec, EnvDataset, gen_regression_envs, regression_moments
from .diffcore import Tape
from .models import BoundedMlpDensity, Predictor, TwoParamPredictor
from .objectives import (WeightingMode, full_wri_loss, irmv1_penalty, per_sample_loss,
                         vrex_penalty)

__all__ = [
    "TrainConfig",
    "TrainTrace",
    "TrainingError",
    "train_wri_alternating",
    "train_baseline",
    "run_two_param_experiment",
    "two_weight_coupling",
    "FeatureDensityWeights",
    "feature_density_weights",
    "invariant_density_weights",
    "ols_closed_form",
]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    n_steps: int = 500
    batch_size: int | None = 256
    lr: float = 1e-2
    weight_decay: float = 0.0
    lam: float = 1.0
    loss: str = "squared"
    density_lr: float = 2e-2
    density_weight_decay: float = 1e-5
    density_batch_size: int | None = 256
    density_lam: float = 5.0
    beta: float = 0.02
    omega: int = 1
    n_d: int = 4
    anneal_steps: int = 0
    d_min: float = 0.05
    d_max: float = 1.0
    normalize_by_nll: bool = False
    weighting: str = "density"
    seed: int = 0

    def __post_init__(self):
        if self.omega < 1 or self.n_d < 1 or self.n_steps < 1:
            raise ValueError("omega, n_d and n_steps must all be at least 1")
        if not self.d_min < self.d_max:
            raise ValueError("d_min must be below d_max")

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **kw})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainTrace:
    records: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def column(self, name: str) -> np.ndarray:
        return np.array([r.get(name, np.nan) for r in self.records], dtype=np.float64)

    def to_csv(self, path) -> None:
        keys: list[str] = []
        for r in self.records:
            keys.extend(k for k in r if k not in keys)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for r in self.records:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# ----------------------------------------------------------------------------
# helpers


def _batches(envs: Sequence[EnvDataset], size: int | None, rng: np.random.Generator):
    if size is None:
        return list(envs)
    out = []
    for D in envs:
        if size >= D.n:
            out.append(D)
        else:
            out.append(D.subset(np.sort(rng.choice(D.n, size, replace=False))))
    return out


def _losses(model: Predictor, P, batch, loss: str):
    outs = [model.forward(P, D.X) for D in batch]
    return outs, [per_sample_loss(o, D.y, loss) for o, D in zip(outs, batch)]


def _record(step: int, rep, model: Predictor, extra: dict | None = None) -> dict:
    rec = {"step": step, "total": rep.total, "erm": rep.erm_term, "penalty": rep.penalty_term,
           "log": rep.log_term}
    for e, r in enumerate(rep.env_risks):
        rec[f"risk_{e}"] = r
    if isinstance(model, TwoParamPredictor):
        rec["inv_weight"] = model.inv_weight
        rec["spu_weight"] = model.spu_weight
    if extra:
        rec.update(extra)
    return rec


def _check_finite(step: int, total, rep) -> None:
    if not math.isfinite(float(total.data)):
        raise TrainingError(f"non-finite loss at step {step}: erm={rep.erm_term} "
                            f"penalty={rep.penalty_term} log={rep.log_term}")


@contextmanager
def _step_context(step: int, what: str = ""):
    """Re-raise tape-level non-finite errors with the training step attached."""
    try:
        yield
    except dc.NonFiniteError as exc:
        raise TrainingError(f"non-finite value in {what}step {step}: {exc}") from exc


def _is_learned(d) -> bool:
    return isinstance(d, BoundedMlpDensity)


def _eval_density(d, Pd, model, P, X, phi):
    if _is_learned(d):
        return d.forward(Pd, phi)
    w = d(model, P, X)
    return w


def _feature_input(model: Predictor, P, X):
    phi = model.features(P, X)
    data = phi.data if isinstance(phi, dc.Tensor) else np.asarray(phi)
    return data.reshape(len(X), -1)


# ----------------------------------------------------------------------------
# WRI


def train_wri_alternating(config: TrainConfig, envs: Sequence[EnvDataset], predictor: Predictor,
                          densities: Sequence, monitor: Callable | None = None,
                          monitor_every: int = 1):
    """Alternating minimisation of the practical WRI objective.

    ``densities`` holds one entry per environment: a :class:`BoundedMlpDensity`
    (learned) or a fixed weight function. It may instead be a single object
    with a ``cross(model, P, Xs)`` method returning the full table of fixed
    weights ``[[d^j on Xs[i]]]`` at once. Returns
    ``(predictor, densities, trace)`` with fresh model copies.

    ``monitor(predictor, densities)`` may return extra trace columns; it runs
    every ``monitor_every`` steps and on the last step.
    """
    if len(envs) < 2:
        raise ValueError("train_wri_alternating needs at least two environments")
    joint = hasattr(densities, "cross")
    if not joint and len(densities) != len(envs):
        raise ValueError("need exactly one density per environment")
    model = predictor.copy()
    dens = densities if joint else [d.copy() if _is_learned(d) else d for d in densities]
    learned = not joint and any(_is_learned(d) for d in dens)
    mode = WeightingMode(config.weighting)
    opt = dc.adam_init(model.params, config.lr, config.weight_decay)
    dopts = [] if joint else [dc.adam_init(d.params, config.density_lr, config.density_weight_decay)
                              if _is_learned(d) else None for d in dens]
    rng_pred = np.random.default_rng([config.seed, 1])
    rng_dens = np.random.default_rng([config.seed, 2])
    trace = TrainTrace()

    for i in range(1, config.n_steps + 1):
        batch = _batches(envs, config.batch_size, rng_pred)
        lam = config.lam if i > config.anneal_steps else 0.0
        with _step_context(i):
            total, rep, tape, P = _wri_predictor_loss(config, model, dens, batch, lam, joint, mode)
        _check_finite(i, total, rep)
        grads = tape.backward(total, P)
        model.params = dc.adam_step(opt, model.params, grads)

        log_val = float("nan")
        if learned and (i - 1) % config.omega == 0 and (config.density_lam > 0 or config.beta > 0):
            for _ in range(config.n_d):
                dbatch = _batches(envs, config.density_batch_size, rng_dens)
                with _step_context(i, "density "):
                    log_val = _density_step(config, model, dens, dopts, dbatch, mode)

        extra = {"density_log": log_val}
        if monitor is not None and (i % monitor_every == 0 or i == config.n_steps):
            extra.update(monitor(model, dens))
        trace.records.append(_record(i, rep, model, extra))
    return model, dens, trace


def _wri_predictor_loss(config, model, dens, batch, lam, joint, mode):
    k = len(batch)
    tape = Tape()
    P = model.on_tape(tape)
    _, losses = _losses(model, P, batch, config.loss)
    if lam > 0 and joint:
        cross = dens.cross(model, P, [D.X for D in batch])
    elif lam > 0:
        Pds = [d.on_tape(tape, trainable=False) if _is_learned(d) else None for d in dens]
        phis = [_feature_input(model, P, D.X) for D in batch]
        cross = [[_eval_density(dens[j], Pds[j], model, P, batch[e].X, phis[e])
                  for j in range(k)] for e in range(k)]
        # learned density outputs are constants for the predictor step
        cross = [[c.data if (isinstance(c, dc.Tensor) and _is_learned(dens[j])) else c
                  for j, c in enumerate(row)] for row in cross]
    else:
        cross = None
    total, rep = full_wri_loss(losses, cross, [], lam, 0.0, mode, config.normalize_by_nll)
    return total, rep, tape, P


def _density_step(config, model, dens, dopts, batch, mode) -> float:
    k = len(batch)
    tape = Tape()
    P = model.on_tape(tape, trainable=False)
    _, losses = _losses(model, P, batch, config.loss)
    Pds = [d.on_tape(tape) if _is_learned(d) else None for d in dens]
    phis = [_feature_input(model, P, D.X) for D in batch]
    cross = [[_eval_density(dens[j], Pds[j], model, P, batch[e].X, phis[e]) for j in range(k)]
             for e in range(k)]
    own = [cross[e][e] for e in range(k) if _is_learned(dens[e])]
    total, rep = full_wri_loss(losses, cross, own, config.density_lam, config.beta, mode,
                               config.normalize_by_nll, include_erm=False)
    if not math.isfinite(float(total.data)):
        raise TrainingError(f"non-finite density loss: wri={rep.wri} log={rep.log_term}")
    for j, d in enumerate(dens):
        if _is_learned(d):
            g = tape.backward(total, Pds[j])
            d.params = dc.adam_step(dopts[j], d.params, g)
    return rep.log_term


# ----------------------------------------------------------------------------
# baselines


def train_baseline(method: str, config: TrainConfig, envs: Sequence[EnvDataset],
                   predictor: Predictor, monitor: Callable | None = None, monitor_every: int = 1):
    """ERM, IRMv1 or VREx with a penalty weight of 1 until ``anneal_steps``
    and ``config.lam`` afterwards. Returns ``(predictor, trace)``."""
    if method not in ("erm", "irm", "vrex"):
        raise ValueError(f"unknown baseline {method!r}")
    model = predictor.copy()
    opt = dc.adam_init(model.params, config.lr, config.weight_decay)
    rng_pred = np.random.default_rng([config.seed, 1])
    trace = TrainTrace()
    for i in range(1, config.n_steps + 1):
        batch = _batches(envs, config.batch_size, rng_pred)
        tape = Tape()
        P = model.on_tape(tape)
        with _step_context(i):
            outs, losses = _losses(model, P, batch, config.loss)
            total, rep = full_wri_loss(losses, None, [], 0.0, 0.0)
            if method != "erm":
                weight = config.lam if i > config.anneal_steps else 1.0
                if method == "irm":
                    pen = irmv1_penalty(outs, [D.y for D in batch], config.loss)
                else:
                    pen = vrex_penalty([dc.mean(l) for l in losses])
                rep.penalty_term = float(pen.data)
                if method == "irm":
                    rep.irm = rep.penalty_term
                total = dc.add(total, dc.scale(pen, weight))
                rep.total = float(total.data)
        _check_finite(i, total, rep)
        grads = tape.backward(total, P)
        model.params = dc.adam_step(opt, model.params, grads)
        extra = None
        if monitor is not None and (i % monitor_every == 0 or i == config.n_steps):
            extra = monitor(model, None)
        trace.records.append(_record(i, rep, model, extra))
    return model, trace


def invariant_density_weights(density, d_inv: int) -> Callable:
    """Fixed weight function ``density.pdf(X[:, :d_inv])``.

    The last few results are cached by array identity, which makes full-batch
    training (the same arrays every step) cheap.
    """
    cache: list[tuple[np.ndarray, np.ndarray]] = []

    def weight(model, P, X):
        for key, val in cache:
            if key is X:
                return val
        val = density.pdf(X[:, :d_inv])
        cache.append((X, val))
        del cache[:-8]
        return val

    return weight


# ----------------------------------------------------------------------------
# two-parameter featurizer experiment


def two_weight_coupling() -> CouplingSpec:
    """Fixed 2-D regression coupling (one invariant, one spurious column)."""
    return CouplingSpec(
        task="regression",
        w_inv_star=np.array([1.0]),
        sigma_y=0.5,
        inv_means=[np.array([m]) for m in (-1.0, 0.0, 1.5, 0.5, -0.5)],
        inv_covs=[np.array([[v]]) for v in (1.0, 0.25, 2.0, 0.5, 1.5)],
        spu_scale=[np.array([s]) for s in (1.0, 2.0, 0.5, -1.0, 1.5)],
        spu_cov=[np.array([[v]]) for v in (0.5, 1.0, 0.25, 0.5, 2.0)],
    )


class FeatureDensityWeights:
    """Exact density of the scalar feature ``a x_inv + b x_spu``, per environment.

    In environment ``e`` the feature is Gaussian with mean ``u . m_e`` and
    variance ``u^T C_e u`` for ``u = (a, b)``. The density is taken of the
    feature divided by ``|u|``, which makes the weights invariant to
    rescaling the featurizer (otherwise inflating ``u`` and shrinking the
    head drives any density-weighted penalty to zero). Weights are built on
    the tape so gradients flow into the featurizer.
    """

    def __init__(self, spec: CouplingSpec):
        self.moments = [regression_moments(spec, e) for e in range(spec.k)]

    def _params(self, P):
        a, b = P["a"], P["b"]
        norm = dc.sqrt(dc.add(dc.square(a), dc.square(b)))
        out = []
        for mean, cov in self.moments:
            mu = dc.add(dc.scale(a, mean[0]), dc.scale(b, mean[1]))
            var = dc.add(dc.add(dc.scale(dc.square(a), cov[0, 0]),
                                dc.scale(dc.mul(a, b), 2 * cov[0, 1])),
                         dc.scale(dc.square(b), cov[1, 1]))
            coef = dc.div(norm, dc.sqrt(dc.scale(var, 2 * np.pi)))
            out.append((mu, dc.scale(var, 2.0), coef))
        return out

    @staticmethod
    def _pdf(z, mu, two_var, coef):
        return dc.mul(dc.exp(dc.neg(dc.div(dc.square(dc.sub(z, mu)), two_var))), coef)

    def cross(self, model: TwoParamPredictor, P, Xs):
        pars = self._params(P)
        zs = [dc.reshape(model.features(P, X), (len(X),)) for X in Xs]
        return [[self._pdf(z, *p) for p in pars] for z in zs]

    def env(self, e: int) -> Callable:
        """Single-environment weight function ``fn(model, P, X)``."""
        def weight(model, P, X):
            return self._pdf(dc.reshape(model.features(P, X), (len(X),)), *self._params(P)[e])
        return weight


def feature_density_weights(spec: CouplingSpec, e: int) -> Callable:
    return FeatureDensityWeights(spec).env(e)


def run_two_param_experiment(init: str, method: str, config: TrainConfig,
                             spec: CouplingSpec | None = None, n: int = 10000,
                             envs: Sequence[EnvDataset] | None = None) -> TrainTrace:
    """Train the two-weight featurizer model and trace both feature weights."""
    if init not in ("equal_weights", "spurious_only"):
        raise ValueError(f"unknown init {init!r}")
    if method not in ("wri", "erm"):
        raise ValueError(f"unknown method {method!r}")
    spec = spec or two_weight_coupling()
    if spec.d_inv != 1 or spec.d_spu != 1:
        raise ValueError("the two-parameter experiment needs one invariant and one spurious column")
    if envs is None:
        envs = gen_regression_envs(spec, n, np.random.default_rng([config.seed, 0]))
    a0 = 1.0 if init == "equal_weights" else 0.0
    model = TwoParamPredictor(1, a=a0, b=1.0)
    if method == "erm":
        _, trace = train_baseline("erm", config, envs, model)
    else:
        _, _, trace = train_wri_alternating(config, envs, model, FeatureDensityWeights(spec))
    last = trace.records[-1]
    if not (math.isfinite(last["spu_weight"]) and abs(last["spu_weight"]) < 1e6):
        raise TrainingError("two-parameter experiment diverged")
    return trace


# ----------------------------------------------------------------------------
# closed-form oracle


def ols_closed_form(X: np.ndarray, y: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """(X^T X + ridge I)^{-1} X^T y."""
    X = np.asarray(X, dtype=np.float64)
    A = X.T @ X + ridge * np.eye(X.shape[1])
    if ridge == 0.0 and np.linalg.matrix_rank(A) < X.shape[1]:
        raise np.linalg.LinAlgError("ols_closed_form: X^T X is singular; pass ridge > 0")
    return np.linalg.solve(A, X.T @ np.asarray(y, dtype=np.float64))
