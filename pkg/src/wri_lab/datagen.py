"""Seedable synthetic environments.

Every generator takes a ``numpy.random.Generator`` and is a pure function of
it and its arguments, so two runs from the same seed give identical arrays.

Generators cover:

* the linear-Gaussian regression coupling (label caused by the invariant
  block, spurious block caused by the label),
* the multi-class simulator with randomly drawn environment parameters and
  optional parity-cone control of the spurious means,
* the three-environment 2-D toy problem,
* idealised heteroskedastic coloured digits (digit code, colour) with and
  without covariate shift, plus out-of-distribution digit codes.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

__all__ = [
    "GenerationError",
    "CouplingSpec",
    "EnvDataset",
    "IdealCmnistPoint",
    "rand_cov",
    "mvn_sample",
    "sample_regression_spec",
    "gen_regression_envs",
    "regression_moments",
    "gen_classification_sim",
    "apply_parity_cone",
    "gen_toy2d",
    "TOY2D_PARAMS",
    "gen_hcmnist_ideal",
    "hcmnist_digit_pmf",
    "ideal_points",
    "make_ood_digits",
    "one_hot_digits",
    "EASY_DIGITS",
    "OOD_CODE_SOURCE",
]


class GenerationError(RuntimeError):
    pass


@dataclass
class EnvDataset:
    """One environment's samples.

    ``layout`` is (d_inv, d_spu): the first ``d_inv`` columns are invariant.
    It is ground truth for generators, analysis and tests; trainers never
    read it.
    """

    env_id: int
    X: np.ndarray
    y: np.ndarray
    layout: tuple[int, int]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y)
        if self.X.ndim != 2:
            raise ValueError(f"X must be 2-D, got shape {self.X.shape}")
        if len(self.y) != len(self.X):
            raise ValueError(f"{len(self.X)} rows but {len(self.y)} labels")
        if sum(self.layout) != self.X.shape[1]:
            raise ValueError(f"layout {self.layout} does not match {self.X.shape[1]} columns")

    @property
    def n(self) -> int:
        return len(self.X)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def x_inv(self) -> np.ndarray:
        return self.X[:, : self.layout[0]]

    @property
    def x_spu(self) -> np.ndarray:
        return self.X[:, self.layout[0]:]

    def subset(self, idx) -> "EnvDataset":
        meta = {k: (v[idx] if isinstance(v, np.ndarray) and len(v) == self.n else v)
                for k, v in self.meta.items()}
        return EnvDataset(self.env_id, self.X[idx], self.y[idx], self.layout, meta)


@dataclass
class CouplingSpec:
    """Parameters of a causal prediction coupling.

    ``task`` is ``"regression"`` or ``"classification"``.

    Regression: ``w_inv_star`` (d_inv,), per environment ``spu_scale``
    (d_spu,) and ``spu_cov`` (d_spu, d_spu) so that
    ``X_spu = spu_scale * Y + N(0, spu_cov)``.

    Classification: ``w_inv_star`` holds one unit row per class (c, d_inv);
    per environment ``spu_means`` (c, d_spu) and ``spu_covs`` (c, d_spu, d_spu).
    """

    task: str
    w_inv_star: np.ndarray
    sigma_y: float
    inv_means: list[np.ndarray]
    inv_covs: list[np.ndarray]
    spu_scale: list[np.ndarray] = field(default_factory=list)
    spu_cov: list[np.ndarray] = field(default_factory=list)
    spu_means: list[np.ndarray] = field(default_factory=list)
    spu_covs: list[np.ndarray] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.inv_means)

    @property
    def d_inv(self) -> int:
        return int(np.shape(self.inv_means[0])[0])

    @property
    def d_spu(self) -> int:
        if self.task == "regression":
            return int(np.shape(self.spu_scale[0])[0])
        return int(np.shape(self.spu_means[0])[1])

    @property
    def c(self) -> int:
        return 1 if self.task == "regression" else int(np.shape(self.w_inv_star)[0])

    def to_dict(self) -> dict:
        def conv(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, list):
                return [conv(x) for x in v]
            return v
        return {k: conv(v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "CouplingSpec":
        arr = lambda xs: [np.asarray(x, dtype=np.float64) for x in xs]  # noqa: E731
        return cls(
            task=d["task"],
            w_inv_star=np.asarray(d["w_inv_star"], dtype=np.float64),
            sigma_y=float(d["sigma_y"]),
            inv_means=arr(d["inv_means"]),
            inv_covs=arr(d["inv_covs"]),
            spu_scale=arr(d.get("spu_scale", [])),
            spu_cov=arr(d.get("spu_cov", [])),
            spu_means=arr(d.get("spu_means", [])),
            spu_covs=arr(d.get("spu_covs", [])),
        )


def _cholesky(cov: np.ndarray, what: str) -> np.ndarray:
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        # PSD but singular covariances (e.g. zero noise) are legitimate
        w, v = np.linalg.eigh(cov)
        if w.min() < -1e-10 * max(1.0, abs(w).max()):
            raise ValueError(f"{what}: covariance is not positive semi-definite "
                             f"(smallest eigenvalue {w.min():.3g})") from None
        return v * np.sqrt(np.clip(w, 0.0, None))


def mvn_sample(rng: np.random.Generator, mean, cov, n: int) -> np.ndarray:
    """n draws from N(mean, cov) as ``mean + z @ L.T`` with ``L L^T = cov``."""
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    L = _cholesky(cov, "mvn_sample")
    z = rng.standard_normal((n, mean.shape[0]))
    return mean + z @ L.T


def _haar_orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def rand_cov(a: float, b: float, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Random covariance ``Q diag(s**2) Q^T``, ``s ~ U(a, b)`` i.i.d., Q Haar."""
    if a <= 0:
        raise ValueError(f"rand_cov: lower bound must be positive, got {a}")
    if b < a:
        raise ValueError(f"rand_cov: upper bound {b} below lower bound {a}")
    q = _haar_orthogonal(dim, rng)
    s = rng.uniform(a, b, size=dim)
    cov = (q * s**2) @ q.T
    return 0.5 * (cov + cov.T)


# ----------------------------------------------------------------------------
# regression coupling


def sample_regression_spec(d_inv: int, d_spu: int, k: int, rng: np.random.Generator,
                           sigma_y: float = 0.5, inv_shift: float = 1.0,
                           spu_scale_std: float = 1.0, spu_noise: tuple[float, float] = (0.5, 1.5),
                           inv_spread: tuple[float, float] = (0.5, 1.5),
                           spu_scale_mean: float = 0.0) -> CouplingSpec:
    """Random regression coupling with shifted invariant marginals.

    ``w_inv_star`` is drawn on the unit sphere; environment means are
    ``N(0, inv_shift**2 I)`` and covariances come from :func:`rand_cov`.
    Spurious scales are ``N(spu_scale_mean, spu_scale_std**2)`` per coordinate.
    """
    w = rng.standard_normal(d_inv)
    w /= np.linalg.norm(w)
    return CouplingSpec(
        task="regression",
        w_inv_star=w,
        sigma_y=float(sigma_y),
        inv_means=[rng.normal(0.0, inv_shift, d_inv) for _ in range(k)],
        inv_covs=[rand_cov(*inv_spread, d_inv, rng) for _ in range(k)],
        spu_scale=[rng.normal(spu_scale_mean, spu_scale_std, d_spu) for _ in range(k)],
        spu_cov=[rand_cov(*spu_noise, d_spu, rng) for _ in range(k)],
    )


def gen_regression_envs(spec: CouplingSpec, n: int, rng: np.random.Generator) -> list[EnvDataset]:
    """Sample ``n`` points per environment from a regression coupling."""
    if spec.task != "regression":
        raise ValueError("gen_regression_envs needs a regression CouplingSpec")
    if n < 1:
        raise ValueError("n must be at least 1")
    w = np.asarray(spec.w_inv_star, dtype=np.float64)
    envs = []
    for e in range(spec.k):
        x_inv = mvn_sample(rng, spec.inv_means[e], spec.inv_covs[e], n)
        y = x_inv @ w + spec.sigma_y * rng.standard_normal(n)
        eta = mvn_sample(rng, np.zeros(spec.d_spu), spec.spu_cov[e], n)
        x_spu = np.outer(y, spec.spu_scale[e]) + eta
        envs.append(EnvDataset(e, np.hstack([x_inv, x_spu]), y, (spec.d_inv, spec.d_spu)))
    return envs


def regression_moments(spec: CouplingSpec, e: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact mean and covariance of X = [X_inv, X_spu] in environment ``e``."""
    w = np.asarray(spec.w_inv_star, dtype=np.float64)
    m, S = np.asarray(spec.inv_means[e]), np.atleast_2d(spec.inv_covs[e])
    a, Sn = np.asarray(spec.spu_scale[e]), np.atleast_2d(spec.spu_cov[e])
    ey = w @ m
    vy = w @ S @ w + spec.sigma_y**2
    cov_xy = S @ w
    mean = np.concatenate([m, a * ey])
    top = np.hstack([S, np.outer(cov_xy, a)])
    bot = np.hstack([np.outer(a, cov_xy), vy * np.outer(a, a) + Sn])
    return mean, np.vstack([top, bot])


# ----------------------------------------------------------------------------
# multi-class simulator


def _unit_sphere(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def apply_parity_cone(spu_means: np.ndarray, class_dirs: np.ndarray, theta_parity: float,
                      test_envs=(-1,)) -> np.ndarray:
    """Force spurious means into a cone around each class direction.

    ``spu_means`` has shape (k, c, d_spu). Training environments are first
    sign-corrected so that ``c_y . mu > 0`` (test environments so that it is
    negative), then each mean is rotated toward its axis (``c_y`` for
    training, ``-c_y`` for test) so its angle to the axis is multiplied by
    ``theta_parity / 90``. Norms are preserved.
    """
    if not 0.0 < theta_parity <= 90.0:
        raise ValueError(f"theta_parity must lie in (0, 90], got {theta_parity}")
    means = np.array(spu_means, dtype=np.float64)
    k, c, _ = means.shape
    test = {t % k for t in test_envs}
    factor = theta_parity / 90.0
    for e in range(k):
        sgn_env = -1.0 if e in test else 1.0
        for y in range(c):
            mu = means[e, y]
            norm = np.linalg.norm(mu)
            if norm == 0.0:
                warnings.warn(f"apply_parity_cone: zero spurious mean (env {e}, class {y}) left unchanged")
                continue
            axis = sgn_env * class_dirs[y] / np.linalg.norm(class_dirs[y])
            proj = axis @ mu
            if proj < 0:
                mu = -mu
                proj = -proj
            perp = mu - proj * axis
            pn = np.linalg.norm(perp)
            if pn <= 1e-15 * norm:
                means[e, y] = mu
                continue
            angle = np.arctan2(pn, proj) * factor
            means[e, y] = norm * (np.cos(angle) * axis + np.sin(angle) * perp / pn)
    return means


def gen_classification_sim(sigma_inv: float, delta_inv: float, sigma_y: float, sigma_spu: float,
                           k: int, c: int, d_inv: int, d_spu: int, n: int,
                           rng: np.random.Generator, theta_parity: float | None = None,
                           max_attempts: int = 1000) -> tuple[list[EnvDataset], CouplingSpec]:
    """Random multi-class environments; the last environment is the test one.

    Parameter draws are rejected whenever a class takes more than 1.5x its
    uniform share in any environment.
    """
    if not 0.0 <= delta_inv <= 1.0:
        raise ValueError("delta_inv must lie in [0, 1]")
    if min(sigma_inv, sigma_y, sigma_spu) < 0:
        raise ValueError("sigmas must be non-negative")
    if c < 2:
        raise ValueError("need at least two classes")
    cap = 1.5 / c
    worst = 0.0
    for _ in range(max_attempts):
        W = _unit_sphere(rng, c, d_inv)
        inv_means = [rng.normal(0.0, sigma_inv, d_inv) for _ in range(k)]
        if delta_inv == 0.0:
            inv_covs = [np.eye(d_inv) for _ in range(k)]
        else:
            inv_covs = [rand_cov(1 - delta_inv, 1 + delta_inv, d_inv, rng) for _ in range(k)]
        spu_means = rng.normal(0.0, sigma_spu, (k, c, d_spu))
        spu_covs = np.array([[rand_cov(0.5, 1.5, d_spu, rng) for _ in range(c)] for _ in range(k)])
        if theta_parity is not None:
            dirs = _unit_sphere(rng, c, d_spu)
            spu_means = apply_parity_cone(spu_means, dirs, theta_parity, test_envs=(k - 1,))
        envs, worst = [], 0.0
        for e in range(k):
            x_inv = mvn_sample(rng, inv_means[e], inv_covs[e], n)
            scores = x_inv @ W.T + sigma_y * rng.standard_normal((n, c))
            y = np.argmax(scores, axis=1)
            x_spu = np.empty((n, d_spu))
            for cls in range(c):
                idx = np.flatnonzero(y == cls)
                x_spu[idx] = mvn_sample(rng, spu_means[e, cls], spu_covs[e, cls], len(idx))
            share = np.bincount(y, minlength=c).max() / n
            worst = max(worst, share)
            envs.append(EnvDataset(e, np.hstack([x_inv, x_spu]), y, (d_inv, d_spu)))
        if worst <= cap:
            spec = CouplingSpec("classification", W, float(sigma_y), inv_means, inv_covs,
                                spu_means=list(spu_means), spu_covs=list(spu_covs))
            return envs, spec
    raise GenerationError(f"gen_classification_sim: no balanced draw after {max_attempts} attempts "
                          f"(last max class share {worst:.3f} > cap {cap:.3f})")


# ----------------------------------------------------------------------------
# toy 2-D problem

# (inv std, spurious mean for Y=0, spurious mean for Y=1, spurious std);
# an optional fifth entry shifts the invariant mean (default 0)
TOY2D_PARAMS = (
    (2.0, 1.0, -1.0, 0.5),
    (0.5, 1.0, -1.0, 2.0),
    (3.0, -1.0, 1.0, 1.0),
)


def gen_toy2d(n: int, rng: np.random.Generator, params=TOY2D_PARAMS) -> list[EnvDataset]:
    """Two training environments and one test environment, ``n`` points each.

    ``Y = 1[X_inv + eps > 0]`` with standard normal ``eps``; the spurious
    coordinate is drawn from a class-conditional normal whose sign flips in
    the test environment.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    envs = []
    for e, row in enumerate(params):
        s_inv, m0, m1, s_spu = row[:4]
        mu_inv = row[4] if len(row) > 4 else 0.0
        x_inv = mu_inv + s_inv * rng.standard_normal(n)
        y = (x_inv + rng.standard_normal(n) > 0).astype(np.int64)
        x_spu = np.where(y == 1, m1, m0) + s_spu * rng.standard_normal(n)
        envs.append(EnvDataset(e, np.column_stack([x_inv, x_spu]), y, (1, 1)))
    return envs


# ----------------------------------------------------------------------------
# idealised heteroskedastic coloured digits

EASY_DIGITS = (0, 1, 5, 6)
FLIP_EASY, FLIP_HARD = 0.05, 0.25
COLOR_MATCH = (0.8, 0.9, 0.1)
SHIFT_SPLIT = (0.65, 0.05, 0.30)
# source digit of each out-of-distribution code 10..17 (mirrored 3,4,7,9 then 4,6,7,9)
OOD_CODE_SOURCE = (3, 4, 7, 9, 4, 6, 7, 9)


class IdealCmnistPoint(NamedTuple):
    digit: int
    color: int
    label: int
    env_id: int
    in_dist: bool = True


def _is_easy(digits: np.ndarray) -> np.ndarray:
    return np.isin(digits, EASY_DIGITS)


def _labels_and_colors(digits: np.ndarray, color_match: float, rng: np.random.Generator,
                       source: np.ndarray | None = None):
    src = digits if source is None else source
    base = (src >= 5).astype(np.int64)
    flip_p = np.where(_is_easy(src), FLIP_EASY, FLIP_HARD)
    label = base ^ (rng.random(len(digits)) < flip_p)
    color = np.where(rng.random(len(digits)) < color_match, label, 1 - label)
    return label.astype(np.int64), color.astype(np.int64)


def _ideal_env(e: int, digits: np.ndarray, rng: np.random.Generator) -> EnvDataset:
    label, color = _labels_and_colors(digits, COLOR_MATCH[e], rng)
    return EnvDataset(e, np.column_stack([digits, color]).astype(np.float64), label, (1, 1))


def gen_hcmnist_ideal(covariate_shift: bool, n: int, rng: np.random.Generator) -> list[EnvDataset]:
    """Three environments of (digit, colour) features, the third being test.

    Colour agrees with the label with probability 0.8, 0.9 and 0.1. Labels
    are ``digit >= 5`` flipped with probability 0.05 for digits 0, 1, 5, 6
    and 0.25 otherwise. With ``covariate_shift`` the easy digits are split
    65/5/30 across the environments and the rest fill each environment up
    to equal size.
    """
    if n < 30:
        raise GenerationError(f"gen_hcmnist_ideal: n={n} is too small (need at least 30)")
    sizes = [n // 3 + (1 if i < n % 3 else 0) for i in range(3)]
    digits = rng.integers(0, 10, size=n)
    if not covariate_shift:
        cuts = np.cumsum(sizes)[:-1]
        return [_ideal_env(e, d, rng) for e, d in enumerate(np.split(digits, cuts))]
    easy = rng.permutation(digits[_is_easy(digits)])
    hard = rng.permutation(digits[~_is_easy(digits)])
    c1 = int(round(SHIFT_SPLIT[0] * len(easy)))
    c2 = c1 + int(round(SHIFT_SPLIT[1] * len(easy)))
    easy_parts = [easy[:c1], easy[c1:c2], easy[c2:]]
    need = [s - len(p) for s, p in zip(sizes, easy_parts)]
    if min(need) < 0 or sum(need) != len(hard):
        raise GenerationError(f"gen_hcmnist_ideal: cannot equalise environment sizes with n={n} "
                              f"(easy counts {[len(p) for p in easy_parts]}, sizes {sizes})")
    hard_parts = np.split(hard, np.cumsum(need)[:-1])
    envs = []
    for e in range(3):
        d = rng.permutation(np.concatenate([easy_parts[e], hard_parts[e]]))
        envs.append(_ideal_env(e, d, rng))
    return envs


def hcmnist_digit_pmf(covariate_shift: bool) -> np.ndarray:
    """Population digit distribution of each environment, shape (3, 10)."""
    pmf = np.full((3, 10), 0.1)
    if covariate_shift:
        easy = np.array(_is_easy(np.arange(10)))
        for e in range(3):
            easy_mass = 3 * 0.4 * SHIFT_SPLIT[e]
            pmf[e, easy] = easy_mass / 4
            pmf[e, ~easy] = (1 - easy_mass) / 6
    return pmf


def ideal_points(ds: EnvDataset) -> list[IdealCmnistPoint]:
    flags = ds.meta.get("in_dist", np.ones(ds.n, dtype=bool))
    return [IdealCmnistPoint(int(d), int(c), int(y), ds.env_id, bool(f))
            for (d, c), y, f in zip(ds.X.astype(np.int64), ds.y, flags)]


def make_ood_digits(rng: np.random.Generator, n: int, env_id: int = 2) -> EnvDataset:
    """Test-environment points, half ordinary digits and half mirrored codes.

    Mirrored digits get codes 10..17 (outside the 0..9 training support);
    their labels follow the digit they were mirrored from. ``meta['in_dist']``
    holds the ground-truth flag.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    n_in = n - n // 2
    codes = np.concatenate([rng.integers(0, 10, n_in), rng.integers(10, 18, n // 2)])
    source = np.where(codes >= 10, np.asarray(OOD_CODE_SOURCE)[np.clip(codes - 10, 0, 7)], codes)
    label, color = _labels_and_colors(codes, COLOR_MATCH[env_id], rng, source=source)
    flags = codes < 10
    order = rng.permutation(n)
    X = np.column_stack([codes, color]).astype(np.float64)[order]
    return EnvDataset(env_id, X, label[order], (1, 1), {"in_dist": flags[order]})


def one_hot_digits(X: np.ndarray, n_codes: int = 18) -> np.ndarray:
    """Encode (digit, colour) rows as a digit one-hot block plus a +-1 colour column."""
    digits = X[:, 0].astype(np.int64)
    out = np.zeros((len(X), n_codes + 1))
    out[np.arange(len(X)), digits] = 1.0
    out[:, -1] = 2.0 * X[:, 1] - 1.0
    return out
