"""Annotations, images, splits and the synthetic desk-scale corpus.

Images are float32 arrays of shape [3, H, W] with values in [0, 1]; on disk
they are 8-bit RGB PNGs, so everything generated here is quantized to 1/255
steps before any statistic is measured.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.optimize import brentq
from scipy.special import ndtr
from scipy.ndimage import gaussian_filter

from . import distcore
from .errors import DataError, InvalidAnnotationError, ParseError


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: str
    counts: tuple

    def __post_init__(self):
        if not self.image_id:
            raise InvalidAnnotationError("empty image id")
        h = distcore.as_histogram(self.counts)
        if h.sum() < 1:
            raise InvalidAnnotationError(f"{self.image_id}: histogram has zero votes")
        object.__setattr__(self, "counts", tuple(int(c) for c in h))

    @property
    def distribution(self) -> np.ndarray:
        return distcore.normalize_histogram(self.counts)


def _split_fields(line: str) -> list[str]:
    if "," in line:
        return [f.strip() for f in line.split(",")]
    return line.split()


def _parse_lines(path, convert):
    path = Path(path)
    if not path.exists():
        raise DataError(f"annotation file not found: {path}")
    text = path.read_text()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    out, problems, seen = [], [], set()
    for n, line in enumerate(lines, start=1):
        fields = _split_fields(line.strip())
        if len(fields) != 1 + distcore.N_BINS:
            problems.append((n, f"expected {1 + distcore.N_BINS} fields, got {len(fields) if line.strip() else 0}"))
            continue
        image_id, values = fields[0], fields[1:]
        if image_id in seen:
            problems.append((n, f"duplicate image id {image_id!r}"))
            continue
        try:
            out.append(convert(image_id, values))
            seen.add(image_id)
        except (ValueError, InvalidAnnotationError) as e:
            problems.append((n, str(e)))
    if problems:
        raise ParseError(path, problems)
    return out


def _to_record(image_id, values):
    counts = []
    for v in values:
        if not v.lstrip("-").isdigit():
            raise ValueError(f"count {v!r} is not an integer")
        c = int(v)
        if c < 0:
            raise ValueError(f"negative count {c}")
        counts.append(c)
    return AnnotationRecord(image_id, tuple(counts))


def parse_annotations(path) -> list[AnnotationRecord]:
    """Strictly parse ``image_id,c1,...,c10`` lines (commas or whitespace).

    Every bad line is collected and reported together in a ParseError.
    """
    return _parse_lines(path, _to_record)


def write_annotations(records, path):
    with open(path, "w") as f:
        for r in records:
            f.write(",".join([r.image_id, *map(str, r.counts)]) + "\n")


def parse_predictions(path) -> dict[str, np.ndarray]:
    """Per-image raw predictions, ``image_id,p1,...,p10`` with real values."""

    def conv(image_id, values):
        p = np.array([float(v) for v in values])
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("prediction values must be finite and non-negative")
        return image_id, p

    return dict(_parse_lines(path, conv))


def write_predictions(preds: dict, path):
    with open(path, "w") as f:
        for image_id, p in preds.items():
            f.write(",".join([image_id, *(repr(float(v)) for v in p)]) + "\n")


def import_ava(path) -> list[AnnotationRecord]:
    """Read the official AVA.txt listing (index, image id, 10 counts, tags, challenge)."""
    records = []
    for line in Path(path).read_text().splitlines():
        f = line.split()
        if len(f) >= 12:
            records.append(AnnotationRecord(f[1], tuple(int(c) for c in f[2:12])))
    return records


# images

def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def to_uint8(image) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_image(image, path):
    Image.fromarray(to_uint8(image).transpose(1, 2, 0)).save(path, format="PNG")


def save_gray(values, path, vmax=None):
    v = np.asarray(values, dtype=np.float64)
    vmax = vmax if vmax is not None else (v.max() if v.max() > 0 else 1.0)
    Image.fromarray(np.clip(np.round(v / vmax * 255), 0, 255).astype(np.uint8), mode="L").save(path, format="PNG")


def resized_shape(h: int, w: int, target_small_side: int) -> tuple[int, int]:
    if h <= 0 or w <= 0:
        raise DataError(f"image dimensions must be positive, got {h}x{w}")
    if h <= w:
        return target_small_side, max(1, int(round(w * target_small_side / h)))
    return max(1, int(round(h * target_small_side / w))), target_small_side


def resize_keep_aspect(image, target_small_side: int) -> np.ndarray:
    """Bilinear resize so the smaller side equals ``target_small_side``."""
    image = np.asarray(image, dtype=np.float32)
    C, H, W = image.shape
    h2, w2 = resized_shape(H, W, target_small_side)
    if (h2, w2) == (H, W):
        return image.copy()
    out = np.empty((C, h2, w2), dtype=np.float32)
    for c in range(C):
        out[c] = np.asarray(Image.fromarray(image[c], mode="F").resize((w2, h2), Image.BILINEAR))
    return out


# splits

@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int

    def to_dict(self):
        return asdict(self)


def make_split(ids, val_count: int, seed: int, test_count: int = 0, test_ids=None) -> DatasetSplit:
    """Deterministic shuffle-and-partition.

    A fixed ``test_ids`` list (AVA style) is removed first; otherwise
    ``test_count`` ids are sampled.
    """
    ids = list(ids)
    if test_ids is not None:
        test = [i for i in ids if i in set(test_ids)]
        pool = [i for i in ids if i not in set(test_ids)]
        test_count = 0
    else:
        test, pool = [], ids
    order = np.random.default_rng(seed).permutation(len(pool))
    pool = [pool[k] for k in order]
    if test_count:
        test, pool = pool[:test_count], pool[test_count:]
    if val_count >= len(pool):
        raise DataError(f"val_count {val_count} leaves no training images (only {len(pool)} available)")
    return DatasetSplit(train=pool[val_count:], val=pool[:val_count], test=test, seed=seed)


# image statistics used by the synthetic rule

def luminance(image) -> np.ndarray:
    return np.asarray(image, dtype=np.float64).mean(axis=0)


def image_stats(image) -> tuple[float, float]:
    """(mean luminance, edge density) where edge density is the mean
    forward-difference gradient magnitude of the luminance."""
    y = luminance(image)
    dx = y[:-1, 1:] - y[:-1, :-1]
    dy = y[1:, :-1] - y[:-1, :-1]
    return float(y.mean()), float(np.mean(np.sqrt(dx * dx + dy * dy)))


# synthetic corpus

CLASS_NAMES = ("hstripes", "vstripes", "checker", "blobs")


@dataclass
class SynthSpec:
    n_images: int = 2000
    min_size: int = 40
    max_size: int = 56
    size_step: int = 8
    n_classes: int = 4
    class_std: tuple = (0.9, 1.2, 1.5, 1.8)
    rule_intercept: float = 1.0
    rule_lum: float = 6.0
    rule_edge: float = 12.0
    mean_range: tuple = (2.0, 9.0)
    voters: tuple = (150, 250)
    outlier_rate: float = 0.0
    outlier_mass: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.outlier_rate < 1.0:
            raise ValueError(f"outlier_rate must lie in [0, 1), got {self.outlier_rate}")
        if not 1 <= self.n_classes <= len(CLASS_NAMES):
            raise ValueError(f"n_classes must be in 1..{len(CLASS_NAMES)}")
        if len(self.class_std) < self.n_classes:
            raise ValueError("need one std per class")

    def to_dict(self):
        d = asdict(self)
        for k in ("class_std", "mean_range", "voters"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("class_std", "mean_range", "voters"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def rule(self, lum: float, edge: float) -> float:
        lo, hi = self.mean_range
        return float(np.clip(self.rule_intercept + self.rule_lum * lum + self.rule_edge * edge, lo, hi))


def discretized_gaussian(loc: float, std: float) -> np.ndarray:
    z = (np.arange(0.5, distcore.N_BINS + 1.0) - loc) / std
    a, b = z[:-1], z[1:]
    # upper-tail form on the right of the mode avoids 1 - 1 cancellation
    mass = np.where(a > 0, ndtr(-a) - ndtr(-b), ndtr(b) - ndtr(a))
    return mass / mass.sum()


def gaussian_with_mean(target_mean: float, std: float) -> np.ndarray:
    """Discretized Gaussian over bins 1..10 whose mean is exactly ``target_mean``."""
    f = lambda loc: discretized_gaussian(loc, std) @ distcore.SCORES - target_mean
    return discretized_gaussian(brentq(f, -5.0, 16.0, xtol=1e-12), std)


def counts_from_probs(probs, total: int) -> np.ndarray:
    """Largest-remainder rounding of ``total * probs`` to integer votes."""
    raw = np.asarray(probs) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    counts[np.argsort(-(raw - counts), kind="stable")[:short]] += 1
    return counts


def _pattern(cls: int, H: int, W: int, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    period = rng.uniform(4.0, 12.0)
    phase = rng.uniform(0, 2 * np.pi)
    name = CLASS_NAMES[cls]
    if name == "hstripes":
        return np.sin(2 * np.pi * yy / period + phase)
    if name == "vstripes":
        return np.sin(2 * np.pi * xx / period + phase)
    if name == "checker":
        return np.sign(np.sin(2 * np.pi * xx / period + phase)) * np.sign(np.sin(2 * np.pi * yy / period + phase))
    blob = gaussian_filter(rng.standard_normal((H, W)), sigma=rng.uniform(1.5, 3.0), mode="wrap")
    return blob / (blob.std() + 1e-12)


def render_image(cls: int, H: int, W: int, rng) -> np.ndarray:
    base = rng.uniform(0.15, 0.85)
    amp = rng.uniform(0.05, 0.3)
    tint = rng.uniform(-0.05, 0.05, size=3)
    pat = _pattern(cls, H, W, rng)
    img = np.clip(base + tint[:, None, None] + amp * pat[None], 0.0, 1.0)
    return to_uint8(img).astype(np.float32) / 255.0


@dataclass
class Corpus:
    """In-memory dataset: images, observed histograms and per-image metadata."""

    ids: list
    images: dict
    counts: dict
    info: dict = field(default_factory=dict)
    spec: dict = field(default_factory=dict)
    split: DatasetSplit | None = None

    def distribution(self, image_id) -> np.ndarray:
        return distcore.normalize_histogram(self.counts[image_id])

    def clean_distribution(self, image_id) -> np.ndarray:
        """Uncorrupted ground truth when known (synthetic data), else the observed one."""
        rec = self.info.get(image_id)
        if rec and "clean_probs" in rec:
            return np.asarray(rec["clean_probs"], dtype=np.float64)
        return self.distribution(image_id)

    def subset(self, ids) -> "Corpus":
        ids = list(ids)
        return Corpus(
            ids,
            {i: self.images[i] for i in ids},
            {i: self.counts[i] for i in ids},
            {i: self.info[i] for i in ids if i in self.info},
            self.spec,
        )

    def classes(self, ids=None) -> np.ndarray:
        return np.array([self.info[i]["class"] for i in (ids or self.ids)])


def generate_synthetic(spec: SynthSpec) -> Corpus:
    """Procedural images whose score distributions follow a known rule.

    Each image's ground-truth mean is ``spec.rule(luminance, edge_density)``
    measured on the quantized image; its spread depends on the latent class.
    An ``outlier_rate`` fraction get a spurious vote spike at a far bin.
    """
    rng = np.random.default_rng(spec.seed)
    sizes = np.arange(spec.min_size, spec.max_size + 1, spec.size_step)
    ids, images, counts, info = [], {}, {}, {}
    width = len(str(spec.n_images - 1))
    for k in range(spec.n_images):
        image_id = f"syn{k:0{width}d}"
        cls = int(rng.integers(spec.n_classes))
        H, W = int(rng.choice(sizes)), int(rng.choice(sizes))
        img = render_image(cls, H, W, rng)
        lum, edge = image_stats(img)
        mu = spec.rule(lum, edge)
        std = float(spec.class_std[cls])
        probs = gaussian_with_mean(mu, std)
        n_votes = int(rng.integers(spec.voters[0], spec.voters[1] + 1))
        c = counts_from_probs(probs, n_votes)
        outlier = bool(rng.random() < spec.outlier_rate)
        spike_bin = None
        if outlier:
            far = [b for b in range(distcore.N_BINS) if abs(b + 1 - mu) >= 3.0]
            spike_bin = int(rng.choice(far))
            c[spike_bin] += int(round(spec.outlier_mass * n_votes))
        ids.append(image_id)
        images[image_id] = img
        counts[image_id] = c
        info[image_id] = {
            "class": cls,
            "height": H,
            "width": W,
            "luminance": lum,
            "edge_density": edge,
            "rule_mean": mu,
            "std": std,
            "outlier": outlier,
            "spike_bin": None if spike_bin is None else spike_bin + 1,
            "clean_probs": probs.tolist(),
        }
    return Corpus(ids, images, counts, info, spec.to_dict())


def write_corpus(corpus: Corpus, out_dir):
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for i in corpus.ids:
        save_image(corpus.images[i], out / "images" / f"{i}.png")
    write_annotations([AnnotationRecord(i, tuple(corpus.counts[i])) for i in corpus.ids], out / "annotations.csv")
    manifest = {"seed": corpus.spec.get("seed"), "spec": corpus.spec, "images": corpus.info}
    if corpus.split is not None:
        manifest["split"] = corpus.split.to_dict()
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_corpus(corpus_dir) -> Corpus:
    d = Path(corpus_dir)
    records = parse_annotations(d / "annotations.csv")
    info, spec, split = {}, {}, None
    if (d / "manifest.json").exists():
        with open(d / "manifest.json") as f:
            m = json.load(f)
        info, spec = m.get("images", {}), m.get("spec", {})
        if "split" in m:
            split = DatasetSplit(**m["split"])
    ids, images, counts = [], {}, {}
    for r in records:
        p = d / "images" / f"{r.image_id}.png"
        if not p.exists():
            raise DataError(f"missing image for {r.image_id}: {p}")
        ids.append(r.image_id)
        images[r.image_id] = load_image(p)
        counts[r.image_id] = np.array(r.counts, dtype=np.int64)
    return Corpus(ids, images, counts, info, spec, split)


def synth_corpus(spec: SynthSpec, val_count: int, test_count: int, split_seed: int | None = None) -> Corpus:
    corpus = generate_synthetic(spec)
    corpus.split = make_split(corpus.ids, val_count, spec.seed if split_seed is None else split_seed, test_count=test_count)
    return corpus


def shape_buckets(corpus: Corpus, ids) -> dict:
    out = {}
    for i in ids:
        out.setdefault(corpus.images[i].shape, []).append(i)
    return out


def batches(corpus: Corpus, ids, batch_size: int, seed: int, epoch: int) -> list[list]:
    """Same-shape batches for one epoch; a pure function of (seed, epoch)."""
    rng = np.random.default_rng([seed, epoch])
    order = [ids[k] for k in rng.permutation(len(ids))]
    out = []
    for _, bucket in sorted(shape_buckets(corpus, order).items()):
        out.extend(bucket[k : k + batch_size] for k in range(0, len(bucket), batch_size))
    return [out[k] for k in rng.permutation(len(out))]


def stack_images(corpus: Corpus, ids, dtype=np.float32) -> np.ndarray:
    return np.stack([corpus.images[i] for i in ids]).astype(dtype, copy=False)
