"""Score histograms, score distributions, losses and evaluation metrics.

Everything here is a pure function on float64 numpy arrays. Histograms and
distributions are plain length-10 arrays; bin ``i`` (0-based) holds score
``i + 1``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, DegeneratePredictionError, InvalidAnnotationError

N_BINS = 10
SCORES = np.arange(1, N_BINS + 1, dtype=np.float64)
DEFAULT_THRESHOLD = 5.0
DEFAULT_SIGMA = 3.0
KL_EPS = 1e-6


def as_histogram(counts) -> np.ndarray:
    """Validate raw vote counts and return them as an int64 array."""
    h = np.asarray(counts)
    if h.shape != (N_BINS,):
        raise InvalidAnnotationError(f"histogram must have {N_BINS} bins, got shape {h.shape}")
    if not np.all(np.isfinite(h)) or np.any(h != np.round(h)):
        raise InvalidAnnotationError(f"histogram counts must be integers: {h.tolist()}")
    h = h.astype(np.int64)
    if np.any(h < 0):
        raise InvalidAnnotationError(f"negative vote count in {h.tolist()}")
    return h


def normalize_histogram(counts) -> np.ndarray:
    h = as_histogram(counts)
    total = h.sum()
    if total <= 0:
        raise InvalidAnnotationError("histogram has zero total votes")
    return h / float(total)


def check_distribution(p, atol: float = 1e-6) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != N_BINS:
        raise DataError(f"distribution must have {N_BINS} bins, got shape {p.shape}")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise DataError("distribution has negative or non-finite entries")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > atol):
        raise DataError("distribution does not sum to 1")
    return p


def l1_normalize(p) -> np.ndarray:
    """Normalize a raw (non-negative) prediction so that it sums to one."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise DataError("raw prediction has negative entries")
    s = p.sum(axis=-1, keepdims=True)
    if np.any(s <= 0):
        raise DegeneratePredictionError("prediction sums to zero; cannot normalize")
    return p / s


def mean_score(p) -> float | np.ndarray:
    """Expected score of a raw prediction after l1 normalization.

    Works on a single vector or a stack of vectors along the last axis.
    """
    ph = l1_normalize(p)
    mu = ph @ SCORES
    return float(mu) if np.ndim(mu) == 0 else mu


def binarize(mean, t: float = DEFAULT_THRESHOLD):
    """True for high quality. A mean exactly equal to ``t`` counts as low."""
    return np.asarray(mean) > t


@dataclass(frozen=True)
class HuberConfig:
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @property
    def delta(self) -> float:
        return 1.0 / self.sigma**2


def huber_elementwise(p, g, delta: float):
    """Per-element Huber value and derivative w.r.t. ``p``.

    ``|p - g| <= delta`` takes the quadratic branch, knee included.
    """
    r = np.asarray(p, dtype=np.float64) - np.asarray(g, dtype=np.float64)
    a = np.abs(r)
    quad = a <= delta
    val = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
    grad = np.where(quad, r, delta * np.sign(r))
    return val, grad


def huber_loss(p, g, cfg: HuberConfig = HuberConfig()):
    """Summed per-bin Huber loss of one prediction; returns ``(loss, grad)``."""
    val, grad = huber_elementwise(p, g, cfg.delta)
    return float(val.sum()), grad


def euclidean_loss(p, g):
    r = np.asarray(p, dtype=np.float64) - np.asarray(g, dtype=np.float64)
    return float(0.5 * np.sum(r * r)), r


def cd_loss(p, g) -> float | np.ndarray:
    """Squared distance between cumulative distributions (last axis)."""
    pc = np.cumsum(np.asarray(p, dtype=np.float64), axis=-1)
    gc = np.cumsum(np.asarray(g, dtype=np.float64), axis=-1)
    out = np.sum((pc - gc) ** 2, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def _smooth(x, eps):
    x = np.asarray(x, dtype=np.float64) + eps
    return x / x.sum(axis=-1, keepdims=True)


def kl_div(p, g, eps: float = KL_EPS) -> float | np.ndarray:
    """KL(g || p) with additive ``eps`` smoothing and renormalization of both."""
    ps, gs = _smooth(p, eps), _smooth(g, eps)
    out = np.sum(gs * np.log(gs / ps), axis=-1)
    out = np.maximum(out, 0.0)  # clip -1e-17 style roundoff
    return float(out) if np.ndim(out) == 0 else out


def spearman_rho(x, y) -> float | None:
    """Spearman correlation with average ranks for ties.

    Returns None when either side is constant (correlation undefined).
    """
    rx = rankdata(np.asarray(x, dtype=np.float64), method="average")
    ry = rankdata(np.asarray(y, dtype=np.float64), method="average")
    dx, dy = rx - rx.mean(), ry - ry.mean()
    den = math.sqrt(float(np.dot(dx, dx)) * float(np.dot(dy, dy)))
    if den == 0.0:
        return None
    return float(np.clip(np.dot(dx, dy) / den, -1.0, 1.0))


@dataclass
class EvalReport:
    """Aggregate metrics over a set of images.

    ``spearman_rho`` is None when undefined (constant means). ``cd_loss`` and
    ``kl_div`` are None for mean-head models, which predict no distribution.
    """

    cd_loss: float | None
    kl_div: float | None
    mse: float
    spearman_rho: float | None
    accuracy: float
    n_images: int

    KEYS = ("cd_loss", "kl_div", "mse", "spearman_rho", "accuracy", "n_images")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in self.KEYS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**{k: d[k] for k in cls.KEYS})


def _mean_metrics(mu_pred, mu_gt, t):
    mu_pred = np.asarray(mu_pred, dtype=np.float64)
    mu_gt = np.asarray(mu_gt, dtype=np.float64)
    mse = float(np.mean((mu_pred - mu_gt) ** 2))
    acc = float(np.mean(binarize(mu_pred, t) == binarize(mu_gt, t)))
    return mse, spearman_rho(mu_pred, mu_gt), acc


def dataset_metrics(
    preds: Sequence, gts: Sequence, t: float = DEFAULT_THRESHOLD, eps: float = KL_EPS
) -> EvalReport:
    """Metric bundle for raw distribution predictions against ground truths."""
    if len(preds) == 0 or len(preds) != len(gts):
        raise DataError(f"need equal, non-empty prediction/truth lists (got {len(preds)} and {len(gts)})")
    P = l1_normalize(np.stack([np.asarray(p, dtype=np.float64) for p in preds]))
    G = check_distribution(np.stack([np.asarray(g, dtype=np.float64) for g in gts]))
    mse, rho, acc = _mean_metrics(P @ SCORES, G @ SCORES, t)
    return EvalReport(
        cd_loss=float(np.mean(cd_loss(P, G))),
        kl_div=float(np.mean(kl_div(P, G, eps))),
        mse=mse,
        spearman_rho=rho,
        accuracy=acc,
        n_images=len(P),
    )


def mean_head_metrics(pred_means: Sequence[float], gts: Sequence, t: float = DEFAULT_THRESHOLD) -> EvalReport:
    """Metric bundle for models that regress the mean score directly."""
    if len(pred_means) == 0 or len(pred_means) != len(gts):
        raise DataError("need equal, non-empty prediction/truth lists")
    G = check_distribution(np.stack([np.asarray(g, dtype=np.float64) for g in gts]))
    mse, rho, acc = _mean_metrics(pred_means, G @ SCORES, t)
    return EvalReport(cd_loss=None, kl_div=None, mse=mse, spearman_rho=rho, accuracy=acc, n_images=len(G))
