"""Diagonal-covariance Gaussian mixtures and the two-model likelihood-ratio detector.

Models are trained by mini-batch Adam on the mean negative log-likelihood
(``train_gd``), with EM (``train_em``) available as an independent
reference. Weights are parameterized through a softmax, variances as
``floor + exp(v)`` so they never drop below the variance floor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, softmax
from sklearn.base import BaseEstimator, ClassifierMixin, DensityMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_frame_list, check_frames
from .dsp import CepstralFeatures
from .exceptions import (
    CompatibilityError,
    DataError,
    DivergenceError,
    EmptyInputError,
    ShapeError,
)

__all__ = [
    "GmmModel",
    "DetectorPair",
    "TrainConfig",
    "log_density",
    "nll_and_grad",
    "density_gradient",
    "train_gd",
    "train_em",
    "score",
    "score_frames",
    "score_gradient",
    "DiagonalGMM",
    "GmmDetector",
]

LOG_2PI = np.log(2.0 * np.pi)
_CHUNK = 512


@dataclass
class GmmModel:
    weights: np.ndarray      # (M,)
    means: np.ndarray        # (M, D)
    variances: np.ndarray    # (M, D)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        m = self.weights.shape[0]
        if self.means.shape != self.variances.shape or self.means.shape[0] != m:
            raise ShapeError("weights, means and variances disagree on M or D")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights <= 0):
            raise ValueError("weights must be positive and sum to one")

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def to_dict(self) -> dict:
        return {"m": self.n_components, "d": self.dim,
                "weights": self.weights.tolist(),
                "means": self.means.tolist(),
                "variances": self.variances.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> GmmModel:
        model = cls(np.array(d["weights"]), np.array(d["means"]), np.array(d["variances"]))
        if model.n_components != d.get("m", model.n_components) or model.dim != d.get("d", model.dim):
            raise ShapeError("model file m/d fields disagree with arrays")
        return model


@dataclass
class DetectorPair:
    """``real_model`` fits genuine audio, ``fake_model`` generated audio."""

    real_model: GmmModel
    fake_model: GmmModel
    fingerprint: dict | None = None

    def __post_init__(self):
        if self.real_model.dim != self.fake_model.dim:
            raise ShapeError("real and fake models must share the feature dimension")

    def to_dict(self) -> dict:
        return {"real": dict(self.real_model.to_dict(), feature_fingerprint=self.fingerprint),
                "fake": dict(self.fake_model.to_dict(), feature_fingerprint=self.fingerprint),
                "feature_fingerprint": self.fingerprint}

    @classmethod
    def from_dict(cls, d: dict) -> DetectorPair:
        return cls(GmmModel.from_dict(d["real"]), GmmModel.from_dict(d["fake"]),
                   d.get("feature_fingerprint"))

    def save(self, path, provenance: dict | None = None) -> None:
        doc = self.to_dict()
        if provenance is not None:
            doc["provenance"] = provenance
        Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> DetectorPair:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TrainConfig:
    components: int = 128
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    variance_floor: float = 1e-4    # relative to per-dimension data variance
    kmeans_iterations: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        for name in ("components", "epochs", "batch_size", "learning_rate", "variance_floor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


# --------------------------------------------------------------------------
# Densities and gradients
# --------------------------------------------------------------------------

def _component_log_probs(model: GmmModel, x: np.ndarray) -> np.ndarray:
    """``log w_m + log N(x_i; mu_m, diag var_m)`` as an (n, M) array."""
    out = np.empty((x.shape[0], model.n_components))
    log_norm = np.log(model.weights) - 0.5 * (model.dim * LOG_2PI + np.log(model.variances).sum(axis=1))
    inv_var = 1.0 / model.variances
    for lo in range(0, x.shape[0], _CHUNK):
        diff = x[lo:lo + _CHUNK, None, :] - model.means[None]
        out[lo:lo + _CHUNK] = log_norm - 0.5 * np.einsum("nmd,md->nm", diff * diff, inv_var)
    return out


def log_density(model: GmmModel, x) -> np.ndarray | float:
    """Log of the mixture density at one D-vector or at each row of an (n, D) array."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[1] != model.dim:
        raise ShapeError(f"expected {model.dim}-dimensional input, got {x2.shape[1]}")
    out = logsumexp(_component_log_probs(model, x2), axis=1)
    return float(out[0]) if single else out


def responsibilities(model: GmmModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lp = _component_log_probs(model, x)
    ll = logsumexp(lp, axis=1)
    return np.exp(lp - ll[:, None]), ll


def density_gradient(model: GmmModel, x: np.ndarray) -> np.ndarray:
    """Gradient of ``log p(x)`` with respect to each row of ``x`` (n, D)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    gamma, _ = responsibilities(model, x)
    inv_var = 1.0 / model.variances
    # sum_m gamma_m (mu_m - x) / var_m
    return gamma @ (model.means * inv_var) - x * (gamma @ inv_var)


def _unpack(params: dict, floor: np.ndarray) -> GmmModel:
    return _raw_model(softmax(params["logits"]), params["means"], floor + np.exp(params["log_var"]))


def _raw_model(weights, means, variances) -> GmmModel:
    # skips validation on the hot path; softmax weights can underflow to 0
    model = object.__new__(GmmModel)
    model.weights = np.maximum(weights, np.finfo(float).tiny)
    model.means = means
    model.variances = variances
    return model


def nll_and_grad(params: dict, x: np.ndarray, floor: np.ndarray) -> tuple[float, dict]:
    """Mean negative log-likelihood of ``x`` and its gradient w.r.t. the raw parameters.

    ``params`` holds ``logits`` (M,), ``means`` (M, D) and ``log_var`` (M, D);
    variances are ``floor + exp(log_var)``.
    """
    model = _unpack(params, floor)
    gamma, ll = responsibilities(model, x)
    n = x.shape[0]
    inv_var = 1.0 / model.variances
    nk = gamma.sum(axis=0)
    diff = x[:, None, :] - model.means[None]                 # (n, M, D)
    g_means = -np.einsum("nm,nmd->md", gamma, diff) * inv_var / n
    sq = np.einsum("nm,nmd->md", gamma, diff * diff)
    g_var = -0.5 * (sq * inv_var ** 2 - nk[:, None] * inv_var) / n
    g_log_var = g_var * np.exp(params["log_var"])
    g_logits = -(nk - n * model.weights) / n
    return float(-ll.mean()), {"logits": g_logits, "means": g_means, "log_var": g_log_var}


# --------------------------------------------------------------------------
# Initialization
# --------------------------------------------------------------------------

def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(x.shape[0])]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(x.shape[0])
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total))
            idx = min(idx, x.shape[0] - 1)
        centers[j] = x[idx]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def _assign(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    labels = np.empty(x.shape[0], dtype=np.int64)
    c2 = (centers ** 2).sum(axis=1)
    for lo in range(0, x.shape[0], 4096):
        xb = x[lo:lo + 4096]
        labels[lo:lo + 4096] = np.argmin(c2[None] - 2.0 * xb @ centers.T, axis=1)
    return labels


def _kmeans_init(x: np.ndarray, k: int, iterations: int, rng: np.random.Generator,
                 floor: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """k-means++ seeding plus Lloyd refinement; returns means and per-cluster variances."""
    centers = _kmeans_pp(x, k, rng)
    for _ in range(iterations):
        labels = _assign(x, centers)
        for j in range(k):
            members = x[labels == j]
            centers[j] = members.mean(axis=0) if len(members) else x[rng.integers(x.shape[0])]
    labels = _assign(x, centers)
    data_var = x.var(axis=0)
    variances = np.empty_like(centers)
    for j in range(k):
        members = x[labels == j]
        variances[j] = members.var(axis=0) if len(members) > 1 else data_var
    return centers, np.maximum(variances, 2.0 * floor)


def _variance_floor(x: np.ndarray, rel: float) -> np.ndarray:
    v = x.var(axis=0)
    v = np.where(v > 0, v, 1.0)
    return rel * v


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

def train_gd(frames, cfg: TrainConfig | None = None) -> GmmModel:
    """Fit a diagonal GMM by mini-batch Adam on the mean negative log-likelihood.

    Initialization uses k-means++ means refined by a few Lloyd steps,
    per-cluster variances and uniform weights. Batch order is drawn from
    ``cfg.seed``; identical inputs give bit-identical models.
    """
    cfg = cfg or TrainConfig()
    x = check_frames(frames)
    if x.shape[0] < cfg.components:
        raise DataError(f"{x.shape[0]} frames cannot support {cfg.components} components")
    rng = np.random.default_rng(cfg.seed)
    floor = _variance_floor(x, cfg.variance_floor)
    means, variances = _kmeans_init(x, cfg.components, cfg.kmeans_iterations, rng, floor)
    params = {"logits": np.zeros(cfg.components),
              "means": means,
              "log_var": np.log(variances - floor)}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(val) for k, val in params.items()}
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(x.shape[0])
        for lo in range(0, x.shape[0], cfg.batch_size):
            batch = x[order[lo:lo + cfg.batch_size]]
            loss, grads = nll_and_grad(params, batch, floor)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at step {step}")
            step += 1
            b1, b2 = cfg.beta1, cfg.beta2
            for key, g in grads.items():
                m[key] = b1 * m[key] + (1 - b1) * g
                v[key] = b2 * v[key] + (1 - b2) * g * g
                m_hat = m[key] / (1 - b1 ** step)
                v_hat = v[key] / (1 - b2 ** step)
                params[key] = params[key] - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
    w = softmax(params["logits"])
    w = np.maximum(w, np.finfo(float).tiny)
    return GmmModel(w / w.sum(), params["means"], floor + np.exp(params["log_var"]))


def train_em(frames, n_components: int, iterations: int = 50, seed: int = 0,
             variance_floor: float = 1e-4, return_history: bool = False):
    """Reference EM fit with k-means++ seeding.

    Components that lose all responsibility are re-seeded on a random frame.
    With ``return_history`` the total data log-likelihood before every
    M-step is returned as well.
    """
    x = check_frames(frames)
    if x.shape[0] < n_components:
        raise DataError(f"{x.shape[0]} frames cannot support {n_components} components")
    rng = np.random.default_rng(seed)
    floor = _variance_floor(x, variance_floor)
    data_var = np.maximum(x.var(axis=0), floor)
    means = _kmeans_pp(x, n_components, rng)
    model = GmmModel(np.full(n_components, 1.0 / n_components), means,
                     np.tile(data_var, (n_components, 1)))
    history = []
    for _ in range(iterations):
        gamma, ll = responsibilities(model, x)
        history.append(float(ll.sum()))
        nk = gamma.sum(axis=0)
        means = np.empty_like(model.means)
        variances = np.empty_like(model.variances)
        for j in range(n_components):
            if nk[j] < 1e-10:
                means[j] = x[rng.integers(x.shape[0])]
                variances[j] = data_var
                nk[j] = 1e-10
                continue
            means[j] = gamma[:, j] @ x / nk[j]
            variances[j] = gamma[:, j] @ (x - means[j]) ** 2 / nk[j]
        weights = nk / nk.sum()
        model = GmmModel(weights, means, np.maximum(variances, floor))
    if return_history:
        _, ll = responsibilities(model, x)
        history.append(float(ll.sum()))
        return model, history
    return model


# --------------------------------------------------------------------------
# Scoring
# --------------------------------------------------------------------------

def _check_fingerprint(pair: DetectorPair, feats: CepstralFeatures) -> None:
    if pair.fingerprint is None or feats.config is None:
        return
    if feats.config.fingerprint() != pair.fingerprint:
        raise CompatibilityError("features were extracted with a different configuration "
                                 "than the detector was trained on")


def score_frames(pair: DetectorPair, frames: np.ndarray) -> float:
    """Mean per-frame log-likelihood ratio of a ``T x D`` frame matrix."""
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if frames.shape[0] == 0:
        raise EmptyInputError("cannot score zero frames")
    return float(np.mean(log_density(pair.real_model, frames) - log_density(pair.fake_model, frames)))


def score(pair: DetectorPair, feats: CepstralFeatures | np.ndarray) -> float:
    """Log-likelihood ratio: positive values favour genuine audio."""
    if isinstance(feats, CepstralFeatures):
        _check_fingerprint(pair, feats)
        frames = feats.stacked()
    else:
        frames = feats
    return score_frames(pair, frames)


def score_gradient(pair: DetectorPair, frames: np.ndarray) -> np.ndarray:
    """Gradient of :func:`score_frames` with respect to every frame entry."""
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    g = density_gradient(pair.real_model, frames) - density_gradient(pair.fake_model, frames)
    return g / frames.shape[0]


# --------------------------------------------------------------------------
# Estimator front ends
# --------------------------------------------------------------------------

class DiagonalGMM(DensityMixin, BaseEstimator):
    """Diagonal-covariance Gaussian mixture density estimator.

    Parameters
    ----------
    n_components : int
        Number of mixture components.
    solver : {"gd", "em"}
        ``"gd"`` trains by mini-batch Adam, ``"em"`` by expectation
        maximization.
    epochs, batch_size, learning_rate :
        Gradient-descent schedule (ignored by EM).
    max_iter : int
        EM iterations (ignored by gradient descent).
    variance_floor : float
        Floor on every variance, relative to the per-dimension data variance.
    random_state : int
        Seed for initialization and batch order.
    """

    def __init__(self, n_components=128, solver="gd", epochs=10, batch_size=128,
                 learning_rate=1e-3, max_iter=50, variance_floor=1e-4, random_state=0):
        self.n_components = n_components
        self.solver = solver
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.max_iter = max_iter
        self.variance_floor = variance_floor
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        return TrainConfig(components=self.n_components, epochs=self.epochs,
                           batch_size=self.batch_size, learning_rate=self.learning_rate,
                           seed=self.random_state, variance_floor=self.variance_floor)

    def fit(self, X, y=None):
        X = check_frames(X)
        if self.solver == "gd":
            self.model_ = train_gd(X, self.train_config())
        elif self.solver == "em":
            self.model_ = train_em(X, self.n_components, self.max_iter, self.random_state,
                                   self.variance_floor)
        else:
            raise ValueError(f"solver must be 'gd' or 'em', got {self.solver!r}")
        self.n_features_in_ = X.shape[1]
        return self

    def score_samples(self, X):
        check_is_fitted(self, "model_")
        return log_density(self.model_, check_frames(X, n_features=self.n_features_in_))

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))


class GmmDetector(ClassifierMixin, BaseEstimator):
    """Two-GMM likelihood-ratio classifier over variable-length frame sequences.

    ``X`` is a sequence of ``T_i x D`` frame matrices (one per clip), ``y``
    holds 1 for genuine and 0 for generated clips. ``decision_function``
    returns the mean per-frame log-likelihood ratio; positive means genuine.
    """

    def __init__(self, n_components=128, epochs=10, batch_size=128, learning_rate=1e-3,
                 variance_floor=1e-4, random_state=0):
        self.n_components = n_components
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.variance_floor = variance_floor
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(components=self.n_components, epochs=self.epochs,
                           batch_size=self.batch_size, learning_rate=self.learning_rate,
                           seed=self.random_state, variance_floor=self.variance_floor)

    def fit(self, X, y):
        X = check_frame_list(X)
        y = np.asarray(y)
        if y.shape[0] != len(X):
            raise ShapeError(f"{len(X)} clips but {y.shape[0]} labels")
        if set(np.unique(y)) - {0, 1} or len(np.unique(y)) != 2:
            raise ValueError("y must contain both classes, coded 1 (real) and 0 (fake)")
        real = np.vstack([x for x, lab in zip(X, y) if lab == 1])
        fake = np.vstack([x for x, lab in zip(X, y) if lab == 0])
        cfg = self._config()
        self.pair_ = DetectorPair(train_gd(real, cfg), train_gd(fake, cfg))
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = real.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "pair_")
        X = check_frame_list(X, n_features=self.n_features_in_)
        return np.array([score_frames(self.pair_, x) for x in X])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)
