"""Two-stage training: teacher distillation, then score-distribution regression.

The stage order is enforced through ``Network.stage``: aesthetic training
starts only from a distilled network or when explicitly asked to start from
scratch.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import distcore
from .data import Corpus, batches, shape_buckets, stack_images
from .errors import DataError, NumericalError, StageOrderError
from .model import HeadConfig, NetConfig, Network

log = logging.getLogger(__name__)

LOSSES = ("huber", "euclidean")
INITS = ("distilled", "scratch", "aesthetic")


@dataclass
class OptimizerConfig:
    """SGD settings. Defaults are the full-scale values; see :meth:`desk`."""

    base_lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    step_iters: int = 20000
    lr_factor: float = 0.1
    iters: int = 60000
    seed: int = 0
    sigma: float = distcore.DEFAULT_SIGMA
    eval_every: int = 0

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1 or self.step_iters < 1 or self.iters < 0:
            raise ValueError("batch_size and step_iters must be >= 1, iters >= 0")

    @classmethod
    def desk(cls, **overrides) -> "OptimizerConfig":
        """Desk-scale defaults for the synthetic corpus."""
        base = dict(base_lr=0.05, batch_size=16, step_iters=2100, iters=3000)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return asdict(self)


def lr_at(it: int, cfg: OptimizerConfig) -> float:
    return cfg.base_lr * cfg.lr_factor ** (it // cfg.step_iters)


def sgd_step(params: dict, grads: dict, state: dict, cfg: OptimizerConfig, it: int, lr_mult: dict | None = None):
    """One momentum-SGD update, in place.

    ``v <- momentum * v + grad + weight_decay * param``;
    ``param <- param - lr(it) * v``. ``params`` maps names to Tensors or
    arrays, ``state`` holds the velocities.
    """
    lr = lr_at(it, cfg)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient at iteration {it} for {name} (norm {np.linalg.norm(g)})")
        arr = p.data if isinstance(p, ad.Tensor) else p
        v = state.get(name)
        if v is None:
            v = np.zeros_like(arr)
        v = cfg.momentum * v + g + cfg.weight_decay * arr
        state[name] = v
        scale = lr * (lr_mult.get(name, 1.0) if lr_mult else 1.0)
        arr -= (scale * v).astype(arr.dtype)
    return params, state


@dataclass
class CurvePoint:
    iter: int
    stage: str
    lr: float
    loss: float


def write_curve(curve, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", "stage", "lr", "loss"])
        for c in curve:
            w.writerow([c.iter, c.stage, repr(c.lr), repr(c.loss)])


def read_curve(path):
    with open(path) as f:
        rows = list(csv.DictReader(f))
    return [CurvePoint(int(r["iter"]), r["stage"], float(r["lr"]), float(r["loss"])) for r in rows]


def _train_loop(net: Network, corpus: Corpus, ids, loss_fn, cfg: OptimizerConfig, stage: str, lr_mult=None, on_iter=None):
    if not ids:
        raise DataError("no training images")
    params = {k: v for k, v in net.params.items() if v.requires_grad}
    state, curve, it, epoch = {}, [], 0, 0
    while it < cfg.iters:
        for batch in batches(corpus, list(ids), cfg.batch_size, cfg.seed, epoch):
            if it >= cfg.iters:
                break
            net.zero_grad()
            loss = loss_fn(batch)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(f"{stage} loss became non-finite at iteration {it}")
            loss.backward()
            grads = {k: p.grad for k, p in params.items()}
            curve.append(CurvePoint(it, stage, lr_at(it, cfg), value))
            sgd_step(params, grads, state, cfg, it, lr_mult)
            it += 1
            if on_iter is not None:
                on_iter(it)
        epoch += 1
    net.zero_grad()
    return curve


# teacher

def teacher_features(image) -> np.ndarray:
    """Orientation and sharpness statistics of the luminance channel."""
    y = np.asarray(image, dtype=np.float64).mean(axis=0)
    dx, dy = np.diff(y, axis=1), np.diff(y, axis=0)
    dxx, dyy = np.diff(y, 2, axis=1), np.diff(y, 2, axis=0)
    dxy = np.diff(dx, axis=0)
    stats = [np.abs(a).mean() for a in (dx, dy, dxx, dyy, dxy)]
    return np.log(np.array(stats) + 1e-3)


@dataclass
class TeacherClassifier:
    """Softmax regression on fixed image statistics, standing in for a
    large pretrained classifier."""

    weight: np.ndarray
    bias: np.ndarray
    feat_mean: np.ndarray
    feat_std: np.ndarray
    temperature: float = 1.0

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]

    def logits(self, images) -> np.ndarray:
        F = np.stack([teacher_features(im) for im in images])
        return ((F - self.feat_mean) / self.feat_std) @ self.weight + self.bias

    def predict_proba(self, images) -> np.ndarray:
        z = self.logits(images) / self.temperature
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.asarray(d["weight"]), np.asarray(d["bias"]), np.asarray(d["feat_mean"]), np.asarray(d["feat_std"]), d["temperature"]
        )


def train_teacher(images, labels, n_classes: int, iters: int = 500, lr: float = 0.5, l2: float = 1e-3, temperature: float = 2.0, seed: int = 0):
    F = np.stack([teacher_features(im) for im in images])
    mu, sd = F.mean(axis=0), F.std(axis=0) + 1e-12
    X = (F - mu) / sd
    Y = np.eye(n_classes)[np.asarray(labels)]
    rng = np.random.default_rng(seed)
    w = ad.Tensor(rng.standard_normal((X.shape[1], n_classes)) * 0.01, requires_grad=True, dtype=np.float64)
    b = ad.Tensor(np.zeros(n_classes), requires_grad=True, dtype=np.float64)
    Xt = ad.Tensor(X, dtype=np.float64)
    for _ in range(iters):
        w.grad = b.grad = None
        loss = ad.cross_entropy_soft(ad.linear(Xt, w, b), Y)
        loss.backward()
        w.data -= lr * (w.grad + l2 * w.data)
        b.data -= lr * b.grad
    return TeacherClassifier(w.data.copy(), b.data.copy(), mu, sd, temperature)


@dataclass
class TeacherTargets:
    ids: list
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or len(self.ids) != len(self.probs):
            raise DataError("teacher targets need one probability row per image id")
        if np.any(self.probs < 0) or np.any(np.abs(self.probs.sum(axis=1) - 1) > 1e-6):
            raise DataError("teacher targets must be probability vectors")
        self._index = {i: k for k, i in enumerate(self.ids)}

    def __getitem__(self, image_ids):
        return self.probs[[self._index[i] for i in image_ids]]

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]

    def save(self, path):
        with open(path, "w") as f:
            for i, row in zip(self.ids, self.probs):
                f.write(",".join([i, *(repr(float(v)) for v in row)]) + "\n")

    @classmethod
    def load(cls, path):
        ids, rows = [], []
        with open(path) as f:
            for n, line in enumerate(f, start=1):
                fields = line.strip().split(",")
                try:
                    rows.append([float(v) for v in fields[1:]])
                except ValueError as e:
                    raise DataError(f"{path}: line {n}: {e}") from e
                ids.append(fields[0])
        return cls(ids, np.array(rows))


def generate_teacher_targets(teacher: TeacherClassifier, corpus: Corpus, ids=None) -> TeacherTargets:
    ids = list(ids if ids is not None else corpus.ids)
    imgs = []
    for i in ids:
        im = corpus.images[i]
        if im.ndim != 3 or im.shape[0] != 3:
            raise DataError(f"teacher expects [3,H,W] images, {i} has shape {im.shape}")
        imgs.append(im)
    return TeacherTargets(ids, teacher.predict_proba(imgs))


# evaluation

def predict_corpus(net: Network, corpus: Corpus, ids, batch_size: int = 64) -> dict:
    """Raw predictions per image id (fused for the dual variant)."""
    out = {}
    for _, bucket in sorted(shape_buckets(corpus, list(ids)).items()):
        for k in range(0, len(bucket), batch_size):
            chunk = bucket[k : k + batch_size]
            raw = net.predict_raw(stack_images(corpus, chunk, net.dtype))
            out.update(zip(chunk, raw))
    return {i: out[i] for i in ids}


def predict_branches_corpus(net: Network, corpus: Corpus, ids, batch_size: int = 64):
    a_out, b_out = {}, {}
    for _, bucket in sorted(shape_buckets(corpus, list(ids)).items()):
        for k in range(0, len(bucket), batch_size):
            chunk = bucket[k : k + batch_size]
            a, b = net.predict_branches(stack_images(corpus, chunk, net.dtype))
            a_out.update(zip(chunk, a))
            b_out.update(zip(chunk, b))
    return np.stack([a_out[i] for i in ids]), np.stack([b_out[i] for i in ids])


def ground_truths(corpus: Corpus, ids, clean: bool = False) -> np.ndarray:
    get = corpus.clean_distribution if clean else corpus.distribution
    return np.stack([get(i) for i in ids])


def evaluate(net: Network, corpus: Corpus, ids, t: float = distcore.DEFAULT_THRESHOLD, clean: bool = False):
    """EvalReport plus the raw per-image predictions it was computed from."""
    ids = list(ids)
    preds = predict_corpus(net, corpus, ids)
    gts = ground_truths(corpus, ids, clean)
    P = np.stack([preds[i] for i in ids])
    if net.cfg.head.variant == "mean":
        return distcore.mean_head_metrics(P[:, 0], gts, t), preds
    return distcore.dataset_metrics(P, gts, t), preds


# stage 1: distillation

@dataclass
class DistillResult:
    net: Network
    curve: list
    ce_before: float
    ce_after: float


def distill_cross_entropy(net: Network, corpus: Corpus, ids, targets: TeacherTargets) -> float:
    """Mean cross-entropy of the distillation head against teacher targets."""
    total, n = 0.0, 0
    with ad.no_grad():
        for _, bucket in sorted(shape_buckets(corpus, list(ids)).items()):
            for k in range(0, len(bucket), 64):
                chunk = bucket[k : k + 64]
                logits = net.forward_distill(stack_images(corpus, chunk, net.dtype))
                total += float(ad.cross_entropy_soft(logits, targets[chunk]).data) * len(chunk)
                n += len(chunk)
    return total / n


def train_distill(net: Network, corpus: Corpus, ids, targets: TeacherTargets, cfg: OptimizerConfig) -> DistillResult:
    """Fit backbone + a temporary FC/softmax head to the teacher's soft labels.

    The head is removed afterwards and the network tagged ``distilled``.
    """
    if net.stage != "init":
        raise StageOrderError(f"distillation must start from a fresh network, got stage {net.stage!r}")
    ids = list(ids)
    net.add_distill_head(targets.n_classes, seed=cfg.seed)
    ce_before = distill_cross_entropy(net, corpus, ids, targets)

    def loss_fn(batch):
        logits = net.forward_distill(stack_images(corpus, batch, net.dtype))
        return ad.cross_entropy_soft(logits, targets[batch])

    curve = _train_loop(net, corpus, ids, loss_fn, cfg, "distill")
    ce_after = distill_cross_entropy(net, corpus, ids, targets)
    log.info("distillation cross-entropy %.4f -> %.4f", ce_before, ce_after)
    net.strip_distill_head()
    net.stage = "distilled"
    net.metadata.update({"stage": "distilled", "iteration": cfg.iters, "seed": cfg.seed})
    return DistillResult(net, curve, ce_before, ce_after)


# stage 2: aesthetic regression

def network_from_distilled(distilled: Network, head: HeadConfig, seed: int = 0) -> Network:
    """Fresh heads on top of a distilled backbone."""
    if distilled.stage != "distilled":
        raise StageOrderError(f"expected a distilled network, got stage {distilled.stage!r}")
    cfg = NetConfig(distilled.cfg.backbone, head, distilled.cfg.spp_n, distilled.cfg.dtype)
    net = Network(cfg, seed=seed)
    for k, v in distilled.backbone_params().items():
        net.params[k] = ad.Tensor(v.data.copy(), requires_grad=True)
    net.stage = "distilled"
    return net


def dual_from_dist(dist_net: Network, seed: int = 0, branch_lr: float = 1.0, shared_lr: float = 0.1):
    """Add a global-max-pool branch to a trained dist-head network.

    Returns the network and per-parameter learning-rate multipliers: the
    new branch trains at the base rate, everything else at a tenth of it.
    """
    if dist_net.cfg.head.variant != "dist":
        raise DataError("dual branch is built from a dist-head network")
    head = HeadConfig(dist_net.cfg.head.hidden, "dual")
    cfg = NetConfig(dist_net.cfg.backbone, head, dist_net.cfg.spp_n, dist_net.cfg.dtype)
    net = Network(cfg, seed=seed)
    for k, v in dist_net.params.items():
        net.params[k] = ad.Tensor(v.data.copy(), requires_grad=True)
    net.stage = dist_net.stage
    mult = {k: (branch_lr if k.startswith("gmp.") else shared_lr) for k in net.params}
    return net, mult


@dataclass
class AestheticResult:
    net: Network
    curve: list
    reports: list = field(default_factory=list)


def _targets(corpus, batch, variant):
    G = ground_truths(corpus, batch)
    if variant == "mean":
        return (G @ distcore.SCORES)[:, None]
    return G


def train_aesthetic(
    net: Network,
    corpus: Corpus,
    ids,
    cfg: OptimizerConfig,
    loss: str = "huber",
    init: str | None = None,
    val_ids=None,
    lr_mult: dict | None = None,
    clean_val: bool = False,
) -> AestheticResult:
    """Regress score distributions (or means, for the mean head).

    ``init`` must be ``"distilled"`` (network comes out of stage one),
    ``"scratch"`` (explicit opt-out of distillation) or ``"aesthetic"``
    (continue from an aesthetic checkpoint, e.g. to add the dual branch).
    """
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}; expected one of {LOSSES}")
    if init not in INITS:
        raise StageOrderError("aesthetic training needs a distilled network or an explicit from-scratch flag")
    if init == "distilled" and net.stage != "distilled":
        raise StageOrderError(f"init='distilled' but the network is at stage {net.stage!r}; run distillation first")
    if init == "scratch" and net.stage != "init":
        raise StageOrderError(f"init='scratch' expects a fresh network, got stage {net.stage!r}")
    if init == "aesthetic" and net.stage != "aesthetic":
        raise StageOrderError(f"init='aesthetic' expects an aesthetic checkpoint, got stage {net.stage!r}")
    variant = net.cfg.head.variant
    delta = distcore.HuberConfig(cfg.sigma).delta

    def crit(out, target):
        return ad.huber(out, target, delta) if loss == "huber" else ad.euclidean(out, target)

    def loss_fn(batch):
        out = net.forward(stack_images(corpus, batch, net.dtype))
        target = _targets(corpus, batch, variant)
        if isinstance(out, tuple):
            return crit(out[0], target) + crit(out[1], target)
        return crit(out, target)

    reports = []

    def on_iter(it):
        if val_ids and cfg.eval_every and it % cfg.eval_every == 0:
            rep, _ = evaluate(net, corpus, val_ids, clean=clean_val)
            reports.append((it, rep))
            log.info("iter %d validation %s", it, rep.to_dict())

    curve = _train_loop(net, corpus, list(ids), loss_fn, cfg, "aesthetic", lr_mult, on_iter)
    net.stage = "aesthetic"
    net.metadata.update({"stage": "aesthetic", "iteration": cfg.iters, "seed": cfg.seed, "loss": loss, "init": init})
    return AestheticResult(net, curve, reports)
