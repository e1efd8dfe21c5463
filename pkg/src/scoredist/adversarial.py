"""Pixel-space gradient descent toward a shifted score distribution.

The network is frozen; only the image changes. Heatmaps show where it
changed most.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import distcore
from .errors import NumericalError, ShapeError
from .model import Network, predict_distribution

DIRECTIONS = ("improve", "worsen")
MAX_BACKOFF = 5


def make_target(p, direction: str, shift_amount: float) -> np.ndarray:
    """Move ``shift_amount`` of every bin's mass one bin up (improve) or down
    (worsen). The extreme bin in the direction of travel keeps its mass."""
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    if not 0.0 < shift_amount <= 1.0:
        raise ValueError(f"shift_amount must lie in (0, 1], got {shift_amount}")
    p = distcore.check_distribution(p)
    moved = np.zeros_like(p)
    out = p.copy()
    if direction == "improve":
        moved[:-1] = shift_amount * p[:-1]
        out -= moved
        out[1:] += moved[:-1]
    else:
        moved[1:] = shift_amount * p[1:]
        out -= moved
        out[:-1] += moved[1:]
    return out / out.sum()


@dataclass
class PerturbConfig:
    direction: str = "worsen"
    shift_amount: float = 0.5
    steps: int = 100
    step_size: float = 10.0
    linf_budget: float | None = None
    pixel_range: tuple = (0.0, 1.0)
    sigma: float = distcore.DEFAULT_SIGMA

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.linf_budget is not None and self.linf_budget < 0:
            raise ValueError("linf_budget must be non-negative")


@dataclass
class TracePoint:
    step: int
    loss: float
    mean: float
    step_size: float


@dataclass
class PerturbResult:
    image: np.ndarray
    trace: list = field(default_factory=list)
    target: np.ndarray | None = None

    @property
    def iterations(self) -> int:
        return len(self.trace) - 1


def _loss_and_grad(net: Network, x: np.ndarray, target, delta):
    xt = ad.Tensor(x[None].astype(net.dtype), requires_grad=True)
    out = net.forward(xt)
    if isinstance(out, tuple):
        w = net.fusion_weight
        out = ad.add(ad.mul(out[0], w), ad.mul(out[1], 1.0 - w))
    loss = ad.huber(out, np.asarray(target)[None], delta)
    loss.backward()
    raw = out.data[0].astype(np.float64)
    mean = distcore.mean_score(raw) if raw.sum() > 0 else math.nan
    return float(loss.data), xt.grad[0].astype(np.float64), mean


def perturb(net: Network, image, target, cfg: PerturbConfig) -> PerturbResult:
    """Gradient descent on pixels so the prediction approaches ``target``.

    Each step starts at ``cfg.step_size`` and halves it (at most five times)
    while the loss goes up; the last candidate is accepted regardless.
    Pixels are clamped to ``pixel_range`` and, if set, to an L-inf ball
    around the original image.
    """
    x0 = np.asarray(image, dtype=np.float64)
    lo, hi = cfg.pixel_range
    if x0.min() < lo or x0.max() > hi:
        raise ValueError(f"image values outside pixel range {cfg.pixel_range}")
    delta = distcore.HuberConfig(cfg.sigma).delta
    if cfg.linf_budget is not None:
        lo = np.maximum(lo, x0 - cfg.linf_budget)
        hi = np.minimum(hi, x0 + cfg.linf_budget)

    flags = {k: p.requires_grad for k, p in net.params.items()}
    net.set_trainable(False)
    try:
        x = x0.copy()
        loss, grad, mean = _loss_and_grad(net, x, target, delta)
        trace = [TracePoint(0, loss, mean, 0.0)]
        for step in range(1, cfg.steps + 1):
            if not np.all(np.isfinite(grad)):
                raise NumericalError(f"non-finite image gradient at step {step}")
            size = cfg.step_size
            for attempt in range(MAX_BACKOFF + 1):
                cand = np.clip(x - size * grad, lo, hi)
                if not np.all(np.isfinite(cand)):
                    raise NumericalError(f"non-finite pixels at step {step}")
                c_loss, c_grad, c_mean = _loss_and_grad(net, cand, target, delta)
                if c_loss <= loss or attempt == MAX_BACKOFF:
                    break
                size /= 2
            x, loss, grad, mean = cand, c_loss, c_grad, c_mean
            trace.append(TracePoint(step, loss, mean, size))
    finally:
        for k, p in net.params.items():
            p.requires_grad = flags[k]
            p.grad = None
    return PerturbResult(x.astype(np.float32), trace, np.asarray(target))


def adversarial_run(net: Network, image, cfg: PerturbConfig) -> PerturbResult:
    """Target = the current prediction shifted per ``cfg``; then perturb."""
    target = make_target(predict_distribution(net, image), cfg.direction, cfg.shift_amount)
    return perturb(net, image, target, cfg)


@dataclass
class HeatmapResult:
    values: np.ndarray
    original_mean: float | None = None
    perturbed_mean: float | None = None
    iterations: int = 0

    @property
    def summary(self) -> dict:
        v = self.values
        return {"max": float(v.max()), "mean": float(v.mean()), "sum": float(v.sum()), "nonzero": int(np.count_nonzero(v))}


def heatmap(original, perturbed, original_mean=None, perturbed_mean=None, iterations: int = 0) -> HeatmapResult:
    """Per-pixel l2 norm of the channel difference."""
    a = np.asarray(original, dtype=np.float64)
    b = np.asarray(perturbed, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise ShapeError(f"heatmap needs two [C,H,W] images of equal shape, got {a.shape} and {b.shape}")
    values = np.sqrt(np.sum((b - a) ** 2, axis=0))
    return HeatmapResult(values, original_mean, perturbed_mean, iterations)


def write_trace(trace, path):
    with open(path, "w") as f:
        f.write("step,loss,mean\n")
        for t in trace:
            f.write(f"{t.step},{t.loss!r},{t.mean!r}\n")


def write_heatmap_csv(h: HeatmapResult, path):
    np.savetxt(path, h.values, delimiter=",", fmt="%.9g")
