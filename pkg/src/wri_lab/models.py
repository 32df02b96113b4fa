"""Predictors and per-environment density models.

Models are plain parameter containers (``params``: name -> ndarray). The
differentiable forward pass takes a dict of tape tensors, which lets a
trainer place the parameters on a fresh tape every step::

    tape = Tape()
    P = model.on_tape(tape)
    out = model.forward(P, X)
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tape, Tensor

__all__ = [
    "Predictor",
    "LinearPredictor",
    "MlpPredictor",
    "TwoParamPredictor",
    "GaussianDensity",
    "BoundedMlpDensity",
    "gaussian_logpdf",
    "density_eval",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
]


def _init(rng: np.random.Generator, *shape) -> np.ndarray:
    return rng.normal(0.0, 0.1, size=shape)


class _Model:
    kind = "model"

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def on_tape(self, tape: Tape, trainable: bool = True) -> dict[str, Tensor]:
        make = tape.leaf if trainable else tape.constant
        return {k: make(v) for k, v in self.params.items()}

    def copy(self):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.params = {k: v.copy() for k, v in self.params.items()}
        return new

    def config(self) -> dict:
        return {}

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "config": self.config(),
            "shapes": {k: list(v.shape) for k, v in self.params.items()},
            "params": {k: v.ravel().tolist() for k, v in self.params.items()},
        }


class Predictor(_Model):
    """f = g o Phi. Subclasses define ``features`` (Phi) and ``head`` (g)."""

    d_in: int
    d_out: int

    def _check(self, X) -> None:
        if X.ndim != 2 or X.shape[1] != self.d_in:
            raise dc.ShapeError(f"{self.kind}: expected input with {self.d_in} columns, got shape {X.shape}")

    def features(self, P: dict[str, Tensor], X: np.ndarray):
        return X

    def head(self, P: dict[str, Tensor], Z) -> Tensor:
        raise NotImplementedError

    def forward(self, P: dict[str, Tensor], X: np.ndarray) -> Tensor:
        X = np.asarray(X, dtype=np.float64)
        self._check(X)
        out = self.head(P, self.features(P, X))
        return dc.reshape(out, (X.shape[0],)) if self.d_out == 1 else out

    def __call__(self, X: np.ndarray) -> np.ndarray:
        tape = Tape()
        return self.forward(self.on_tape(tape, trainable=False), X).data


class LinearPredictor(Predictor):
    kind = "linear"

    def __init__(self, d_in: int, d_out: int = 1, rng: np.random.Generator | None = None,
                 params: dict | None = None, bias: bool = True):
        self.d_in, self.d_out, self.bias = d_in, d_out, bias
        if params is None:
            rng = rng or np.random.default_rng(0)
            params = {"W": _init(rng, d_in, d_out)}
            if bias:
                params["b"] = np.zeros(d_out)
        super().__init__(params)

    def config(self):
        return {"d_in": self.d_in, "d_out": self.d_out, "bias": self.bias}

    def head(self, P, Z):
        out = dc.matmul(Z, P["W"])
        return dc.add(out, P["b"]) if self.bias else out

    @property
    def weights(self) -> np.ndarray:
        return self.params["W"][:, 0] if self.d_out == 1 else self.params["W"]


class MlpPredictor(Predictor):
    """One hidden ReLU layer; Phi is the identity."""

    kind = "mlp"

    def __init__(self, d_in: int, d_out: int = 1, hidden: int = 32,
                 rng: np.random.Generator | None = None, params: dict | None = None):
        self.d_in, self.d_out, self.hidden = d_in, d_out, hidden
        if params is None:
            rng = rng or np.random.default_rng(0)
            params = {
                "W1": _init(rng, d_in, hidden), "b1": np.zeros(hidden),
                "W2": _init(rng, hidden, d_out), "b2": np.zeros(d_out),
            }
        super().__init__(params)

    def config(self):
        return {"d_in": self.d_in, "d_out": self.d_out, "hidden": self.hidden}

    def head(self, P, Z):
        h = dc.relu(dc.add(dc.matmul(Z, P["W1"]), P["b1"]))
        return dc.add(dc.matmul(h, P["W2"]), P["b2"])


class TwoParamPredictor(Predictor):
    """Linear model behind a two-weight feature layer.

    ``Phi(x) = a * x_inv + b * x_spu`` where the first ``d_block`` columns form
    the invariant block and the rest the spurious block; the head is
    ``g(z) = v . z + c``. There is no activation anywhere.
    """

    kind = "two_param_featurizer_linear"

    def __init__(self, d_block: int = 1, a: float = 1.0, b: float = 1.0,
                 rng: np.random.Generator | None = None, params: dict | None = None):
        self.d_block = d_block
        self.d_in, self.d_out = 2 * d_block, 1
        if params is None:
            params = {"a": np.array(a), "b": np.array(b), "v": np.ones(d_block), "c": np.zeros(())}
        super().__init__(params)

    def config(self):
        return {"d_block": self.d_block}

    def features(self, P, X):
        k = self.d_block
        return dc.add(dc.mul(P["a"], X[:, :k]), dc.mul(P["b"], X[:, k:]))

    def head(self, P, Z):
        return dc.add(dc.matmul(Z, P["v"]), P["c"])

    @property
    def inv_weight(self) -> float:
        return float(self.params["a"])

    @property
    def spu_weight(self) -> float:
        return float(self.params["b"])


def predict(model: Predictor, P: dict[str, Tensor], X: np.ndarray) -> Tensor:
    return model.forward(P, X)


# ----------------------------------------------------------------------------
# densities


@dataclass
class GaussianDensity:
    """Multivariate normal with full or diagonal covariance."""

    mean: np.ndarray
    cov: np.ndarray
    diagonal: bool = False
    _chol: np.ndarray | None = field(default=None, repr=False, compare=False)
    _chol_inv: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if self.diagonal:
            cov = np.diag(np.diag(cov))
        if cov.shape != (self.mean.size, self.mean.size):
            raise dc.ShapeError(f"GaussianDensity: mean {self.mean.shape} vs covariance {cov.shape}")
        self.cov = 0.5 * (cov + cov.T)
        eig = np.linalg.eigvalsh(self.cov)
        if eig.min() <= 1e-12 * max(1.0, eig.max()):
            raise np.linalg.LinAlgError(
                f"GaussianDensity: covariance is singular (smallest eigenvalue {eig.min():.3g})")
        self._chol = np.linalg.cholesky(self.cov)
        self._chol_inv = np.linalg.inv(self._chol)

    @classmethod
    def fit(cls, X: np.ndarray, diagonal: bool = False) -> "GaussianDensity":
        """Maximum-likelihood fit (1/n covariance)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[0] == 1 and X.shape[1] > 1:
            X = X.T
        mu = X.mean(axis=0)
        C = (X - mu).T @ (X - mu) / len(X)
        return cls(mu, C, diagonal)

    @property
    def dim(self) -> int:
        return self.mean.size

    def logpdf(self, x) -> np.ndarray:
        return gaussian_logpdf(self, x)

    def pdf(self, x) -> np.ndarray:
        return np.exp(self.logpdf(x))

    def to_dict(self):
        return {"kind": "gaussian", "mean": self.mean.tolist(), "cov": self.cov.tolist(),
                "diagonal": self.diagonal}


def gaussian_logpdf(density: GaussianDensity, x) -> np.ndarray:
    """Exact log density at each row of ``x`` (a 1-D input is one point,
    unless the density is univariate)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1 and density.dim > 1
    X = x[None, :] if single else (x[:, None] if x.ndim == 1 else x)
    if X.shape[1] != density.dim:
        raise dc.ShapeError(f"gaussian_logpdf: point dimension {X.shape[1]} vs density dimension {density.dim}")
    L = density._chol
    z = (X - density.mean) @ density._chol_inv.T
    maha = np.sum(z * z, axis=1)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    out = -0.5 * (maha + logdet + density.dim * np.log(2.0 * np.pi))
    return out[0] if single else out


class BoundedMlpDensity(_Model):
    """Unnormalised density ``d_min + (d_max - d_min) * sigmoid(mlp(z))``."""

    kind = "bounded_mlp_density"

    def __init__(self, d_in: int, hidden: int = 16, d_min: float = 0.05, d_max: float = 1.0,
                 rng: np.random.Generator | None = None, params: dict | None = None):
        if not 0.0 < d_min < d_max:
            raise ValueError(f"need 0 < d_min < d_max, got d_min={d_min}, d_max={d_max}")
        self.d_in, self.hidden, self.d_min, self.d_max = d_in, hidden, float(d_min), float(d_max)
        if params is None:
            rng = rng or np.random.default_rng(0)
            params = {
                "W1": _init(rng, d_in, hidden), "b1": np.zeros(hidden),
                "W2": _init(rng, hidden, 1), "b2": np.zeros(1),
            }
        super().__init__(params)

    def config(self):
        return {"d_in": self.d_in, "hidden": self.hidden, "d_min": self.d_min, "d_max": self.d_max}

    def logit(self, P, Z) -> Tensor:
        Zv = Z.data if isinstance(Z, Tensor) else np.asarray(Z, dtype=np.float64)
        if Zv.ndim != 2 or Zv.shape[1] != self.d_in:
            raise dc.ShapeError(f"{self.kind}: expected input with {self.d_in} columns, got shape {Zv.shape}")
        h = dc.relu(dc.add(dc.matmul(Z, P["W1"]), P["b1"]))
        return dc.reshape(dc.add(dc.matmul(h, P["W2"]), P["b2"]), (Zv.shape[0],))

    def forward(self, P, Z) -> Tensor:
        s = dc.sigmoid(self.logit(P, Z))
        return dc.add(dc.scale(s, self.d_max - self.d_min), self.d_min)

    def __call__(self, Z) -> np.ndarray:
        tape = Tape()
        return self.forward(self.on_tape(tape, trainable=False), Z).data


def density_eval(density: BoundedMlpDensity, P: dict[str, Tensor], phi_x) -> Tensor:
    return density.forward(P, phi_x)


# ----------------------------------------------------------------------------
# checkpoints

_KINDS = {c.kind: c for c in (LinearPredictor, MlpPredictor, TwoParamPredictor, BoundedMlpDensity)}


def save_checkpoint(models, path) -> None:
    """Write a model (or a list of models) as JSON."""
    many = isinstance(models, (list, tuple))
    payload = [m.to_dict() for m in models] if many else models.to_dict()
    Path(path).write_text(json.dumps(payload, indent=1))


def _from_dict(d: dict):
    if d["kind"] == "gaussian":
        return GaussianDensity(np.array(d["mean"]), np.array(d["cov"]), d.get("diagonal", False))
    cls = _KINDS[d["kind"]]
    params = {k: np.array(v, dtype=np.float64).reshape(d["shapes"][k]) for k, v in d["params"].items()}
    return cls(**d["config"], params=params)


def load_checkpoint(path):
    payload = json.loads(Path(path).read_text())
    return [_from_dict(d) for d in payload] if isinstance(payload, list) else _from_dict(payload)
