"""Backbone + SPP + head network, its variants, fusion and checkpoints.

Variants:

* ``dist`` - two FC layers (each followed by ReLU) on the SPP vector, 10 outputs
* ``mean`` - same, one output regressing the mean score
* ``dual`` - ``dist`` plus a second two-layer head on a global-max-pooled
  branch sharing the backbone; the two predictions are late-fused.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import distcore
from .errors import (
    CheckpointError,
    CorruptCheckpointError,
    DataError,
    DegeneratePredictionError,
    ResolutionError,
    ShapeError,
    UnsupportedVersionError,
)
from .spp import SPPConfig, adaptive_spp, global_max_branch

CHECKPOINT_MAGIC = "scoredist-checkpoint"
CHECKPOINT_VERSION = 1
VARIANTS = ("dist", "mean", "dual")
STAGES = ("init", "distilled", "aesthetic")


@dataclass
class BackboneConfig:
    """Plain conv + ReLU blocks; every block downsamples by ``stride``."""

    channels: tuple = (16, 32, 64, 64)
    kernel: int = 3
    stride: int = 2
    pad: int = 1
    in_channels: int = 3

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    def output_size(self, size: int) -> int:
        for _ in self.channels:
            size = ad.conv_output_size(size, self.kernel, self.stride, self.pad)
        return size


@dataclass
class HeadConfig:
    hidden: int = 256
    variant: str = "dist"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def out_width(self) -> int:
        return 1 if self.variant == "mean" else distcore.N_BINS


@dataclass
class NetConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    spp_n: int = 3
    dtype: str = "float32"

    @property
    def spp(self) -> SPPConfig:
        return SPPConfig(self.spp_n, self.backbone.out_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["channels"] = list(self.backbone.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        bb = dict(d["backbone"])
        bb["channels"] = tuple(bb["channels"])
        return cls(BackboneConfig(**bb), HeadConfig(**d["head"]), d["spp_n"], d["dtype"])


def min_input_size(cfg: NetConfig) -> int:
    """Smallest side length whose backbone output still fits the SPP grid."""
    s = 1
    while cfg.backbone.output_size(s) < cfg.spp_n:
        s += 1
    return s


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Network:
    def __init__(self, cfg: NetConfig | None = None, seed: int = 0):
        self.cfg = cfg or NetConfig()
        self.dtype = np.dtype(self.cfg.dtype)
        self.params: dict[str, ad.Tensor] = {}
        self.stage = "init"
        self.fusion_weight = 0.5
        self.metadata: dict = {}
        rng = np.random.default_rng(seed)
        self._init_backbone(rng)
        self._init_heads(rng)

    # construction

    def _param(self, name, arr):
        self.params[name] = ad.Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True)

    def _init_backbone(self, rng):
        bb = self.cfg.backbone
        cin = bb.in_channels
        for i, cout in enumerate(bb.channels):
            fan_in = cin * bb.kernel * bb.kernel
            self._param(f"conv{i}.w", _he(rng, (cout, cin, bb.kernel, bb.kernel), fan_in, self.dtype))
            self._param(f"conv{i}.b", np.zeros(cout))
            cin = cout

    def _init_head(self, rng, prefix, in_dim):
        h = self.cfg.head
        self._param(f"{prefix}.fc1.w", _he(rng, (in_dim, h.hidden), in_dim, self.dtype))
        self._param(f"{prefix}.fc1.b", np.zeros(h.hidden))
        self._param(f"{prefix}.fc2.w", rng.standard_normal((h.hidden, h.out_width)) * 0.01)
        # positive bias keeps the final ReLU alive at initialization
        bias = distcore.SCORES.mean() if h.variant == "mean" else 1.0 / distcore.N_BINS
        self._param(f"{prefix}.fc2.b", np.full(h.out_width, bias))

    def _init_heads(self, rng):
        self._init_head(rng, "head", self.cfg.spp.output_length)
        if self.cfg.head.variant == "dual":
            self._init_head(rng, "gmp", self.cfg.backbone.out_channels)

    def reinit_heads(self, seed: int):
        for name in [k for k in self.params if not k.startswith("conv")]:
            del self.params[name]
        self._init_heads(np.random.default_rng(seed))

    def add_distill_head(self, n_classes: int, seed: int = 0):
        rng = np.random.default_rng([seed, 1])
        d = self.cfg.spp.output_length
        self._param("distill.w", _he(rng, (d, n_classes), d, self.dtype))
        self._param("distill.b", np.zeros(n_classes))

    def strip_distill_head(self):
        self.params.pop("distill.w", None)
        self.params.pop("distill.b", None)

    def backbone_params(self) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith("conv")}

    @property
    def min_input_size(self) -> int:
        return min_input_size(self.cfg)

    # forward passes

    def _batch(self, x):
        x = x if isinstance(x, ad.Tensor) else ad.Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim == 3:
            x = ad.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1] != self.cfg.backbone.in_channels:
            raise ShapeError(f"expected image of shape [N,{self.cfg.backbone.in_channels},H,W], got {x.shape}")
        H, W = x.shape[-2:]
        m = self.min_input_size
        if H < m or W < m:
            raise ResolutionError(f"image {H}x{W} is too small; minimum input size is {m}x{m}")
        return x

    def features(self, x):
        bb = self.cfg.backbone
        h = self._batch(x)
        for i in range(len(bb.channels)):
            h = ad.conv2d(h, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"], bb.stride, bb.pad)
            h = ad.relu(h)
        return h

    def _head(self, prefix, v):
        p = self.params
        h = ad.relu(ad.linear(v, p[f"{prefix}.fc1.w"], p[f"{prefix}.fc1.b"]))
        return ad.relu(ad.linear(h, p[f"{prefix}.fc2.w"], p[f"{prefix}.fc2.b"]))

    def forward(self, x):
        """Raw outputs for a batch [N,3,H,W] (or one image [3,H,W]).

        Returns a [N, out] tensor, or for the dual variant a pair
        ``(spp_branch, gmp_branch)`` of [N, 10] tensors.
        """
        fmap = self.features(x)
        out = self._head("head", adaptive_spp(fmap, self.cfg.spp))
        if self.cfg.head.variant == "dual":
            return out, self._head("gmp", global_max_branch(fmap))
        return out

    def forward_distill(self, x):
        if "distill.w" not in self.params:
            raise CheckpointError("network has no distillation head")
        v = adaptive_spp(self.features(x), self.cfg.spp)
        return ad.linear(v, self.params["distill.w"], self.params["distill.b"])

    def predict_raw(self, x) -> np.ndarray:
        """Inference helper: raw (fused, for dual) outputs as float64 [N, out]."""
        with ad.no_grad():
            out = self.forward(x)
        if isinstance(out, tuple):
            return fuse(out[0].data.astype(np.float64), out[1].data.astype(np.float64), self.fusion_weight)
        return out.data.astype(np.float64)

    def predict_branches(self, x):
        if self.cfg.head.variant != "dual":
            raise DataError("predict_branches needs the dual variant")
        with ad.no_grad():
            a, b = self.forward(x)
        return a.data.astype(np.float64), b.data.astype(np.float64)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def set_trainable(self, flag: bool):
        for p in self.params.values():
            p.requires_grad = flag


def predict_distribution(net: Network, image) -> np.ndarray:
    """l1-normalized prediction(s); an all-zero output is an error."""
    raw = net.predict_raw(image)
    if raw.shape[-1] != distcore.N_BINS:
        raise DataError("predict_distribution needs a distribution head")
    if np.any(raw.sum(axis=-1) <= 0):
        raise DegeneratePredictionError("network output is all zeros; no distribution to normalize")
    out = distcore.l1_normalize(raw)
    return out[0] if np.ndim(image) == 3 else out


def fuse(p_spp, p_gmp, w: float):
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"fusion weight must lie in [0, 1], got {w}")
    return w * np.asarray(p_spp, dtype=np.float64) + (1.0 - w) * np.asarray(p_gmp, dtype=np.float64)


FUSION_GRID = np.round(np.arange(101) * 0.01, 2)


def fusion_objective(preds_spp, preds_gmp, gts, w: float) -> float:
    """Mean CDLoss of the fused, l1-normalized predictions."""
    fused = fuse(preds_spp, preds_gmp, w)
    return float(np.mean(distcore.cd_loss(distcore.l1_normalize(fused), np.asarray(gts, dtype=np.float64))))


def learn_fusion_weight(preds_spp, preds_gmp, gts, grid=FUSION_GRID) -> float:
    """Grid-search the fusion weight minimizing mean validation CDLoss.

    Ties go to the smallest weight.
    """
    if len(gts) == 0:
        raise DataError("cannot learn a fusion weight from an empty validation set")
    losses = [fusion_objective(preds_spp, preds_gmp, gts, w) for w in grid]
    return float(grid[int(np.argmin(losses))])


# checkpoints

def save_checkpoint(net: Network, path, metadata: dict | None = None):
    meta = dict(net.metadata)
    meta.update(metadata or {})
    tensors, blobs, offset = [], [], 0
    for name, t in net.params.items():
        arr = np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    data = b"".join(blobs)
    header = {
        "format": CHECKPOINT_MAGIC,
        "format_version": CHECKPOINT_VERSION,
        "config": net.cfg.to_dict(),
        "stage": net.stage,
        "fusion_weight": net.fusion_weight,
        "metadata": meta,
        "tensors": tensors,
        "data_nbytes": len(data),
        "sha256": hashlib.sha256(data).hexdigest(),
    }
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(data)
    os.replace(tmp, path)


def read_checkpoint_header(path) -> tuple[dict, bytes]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    nl = blob.find(b"\n")
    if nl < 0:
        raise CorruptCheckpointError(f"{path}: missing header")
    try:
        header = json.loads(blob[:nl])
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"{path}: unreadable header ({e})") from e
    if not isinstance(header, dict) or header.get("format") != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a scoredist checkpoint")
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: checkpoint format version {header.get('format_version')!r} is not supported (expected {CHECKPOINT_VERSION})"
        )
    data = blob[nl + 1 :]
    if len(data) != header.get("data_nbytes"):
        raise CorruptCheckpointError(f"{path}: expected {header.get('data_nbytes')} data bytes, found {len(data)} (truncated?)")
    if hashlib.sha256(data).hexdigest() != header.get("sha256"):
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    return header, data


def load_checkpoint(path) -> Network:
    header, data = read_checkpoint_header(path)
    try:
        cfg = NetConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptCheckpointError(f"{path}: bad config block ({e})") from e
    net = Network(cfg, seed=0)
    loaded = {}
    for t in header["tensors"]:
        arr = np.frombuffer(data, dtype=np.dtype(t["dtype"]), count=int(np.prod(t["shape"], dtype=np.int64)), offset=t["offset"])
        loaded[t["name"]] = arr.reshape(t["shape"]).astype(net.dtype)
    for name, arr in loaded.items():
        if name in net.params and net.params[name].shape != arr.shape:
            raise ShapeError(f"{path}: tensor {name} has shape {arr.shape}, network expects {net.params[name].shape}")
    stage = header.get("stage", "init")
    # a distilled checkpoint carries only the backbone; heads stay freshly initialized
    missing = [k for k in net.params if k not in loaded and not (stage == "distilled" and not k.startswith("conv"))]
    if missing:
        raise ShapeError(f"{path}: checkpoint lacks tensors {missing}")
    for name, arr in loaded.items():
        net.params[name] = ad.Tensor(arr.copy(), requires_grad=True)
    net.stage = stage
    net.fusion_weight = float(header.get("fusion_weight", 0.5))
    net.metadata = dict(header.get("metadata", {}))
    return net
