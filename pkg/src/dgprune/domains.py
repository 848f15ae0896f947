"""Seeded synthetic multi-domain tasks.

Two task families share one ``DomainSpec``:

* ``vector``: a 2-D informative subspace whose class centroids are rotated
  per domain, one spurious coordinate that copies a label code with
  probability ``spurious_rho``, and noise coordinates scaled per domain.
* ``nucleus``: small RGB fields of disc-shaped cells with a per-domain colour
  bias, radius range and density; targets are Gaussian proximity maps.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .seeding import derive_seed, rng_for

CLASS_NAMES = (
    "negative fibroblast",
    "negative lymphocyte",
    "negative tumor",
    "positive fibroblast",
    "positive lymphocyte",
    "positive tumor",
    "other",
)
N_CLASSES = len(CLASS_NAMES)

# hematoxylin-blue negatives, DAB-brown positives
CLASS_COLORS = np.array([
    [0.35, 0.45, 0.75],
    [0.20, 0.25, 0.55],
    [0.50, 0.60, 0.85],
    [0.65, 0.40, 0.25],
    [0.45, 0.25, 0.15],
    [0.80, 0.55, 0.35],
    [0.55, 0.35, 0.60],
])
BACKGROUND_COLOR = np.array([0.85, 0.85, 0.85])

HUE_PRESETS = {
    "neutral": (0.0, 0.0, 0.0),
    "partial blue": (-0.06, -0.02, 0.08),
    "partial orange": (0.08, 0.02, -0.08),
    "partial violet": (0.05, -0.06, 0.08),
    "brown red": (0.08, -0.06, -0.06),
    "yellow green": (0.04, 0.08, -0.08),
}

SPURIOUS_INDEX = 2
TASKS = ("vector", "nucleus")


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    """Generative description of one domain.

    Vector fields: ``rotation_deg``, ``spurious_rho``, ``spurious_noise``,
    ``feature_scale`` (one factor per noise coordinate, or a single factor),
    ``noise_sigma``, ``separation`` (distance between adjacent centroids),
    ``n_features``, ``n_classes`` (global class count).

    Nucleus fields: ``hue`` (per-channel additive bias), ``radius_range``,
    ``texture_seed``, ``density`` (expected cells per 1000 px^2),
    ``hollow_prob``, ``noise_level``, ``sigma`` (proximity-map width;
    ``None`` means half the minimum radius).
    """

    domain_id: str
    task: str
    categories: tuple
    rotation_deg: float = 0.0
    spurious_rho: float = 0.0
    spurious_noise: float = 1.0
    feature_scale: tuple = (1.0,)
    noise_sigma: float = 0.3
    separation: float = 2.0
    n_features: int = 8
    n_classes: int = N_CLASSES
    hue: tuple = (0.0, 0.0, 0.0)
    radius_range: tuple = (4, 6)
    texture_seed: int = 0
    density: float = 2.5
    hollow_prob: float = 0.0
    noise_level: float = 0.02
    sigma: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(int(c) for c in self.categories))
        object.__setattr__(self, "feature_scale", tuple(float(s) for s in np.atleast_1d(self.feature_scale)))
        object.__setattr__(self, "hue", tuple(float(h) for h in self.hue))
        object.__setattr__(self, "radius_range", tuple(float(r) for r in self.radius_range))
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise DomainError(f"{self.domain_id}: task must be one of {TASKS}")
        if not self.categories:
            raise DomainError(f"{self.domain_id}: empty category subset")
        if len(set(self.categories)) != len(self.categories):
            raise DomainError(f"{self.domain_id}: duplicate categories")
        if min(self.categories) < 0 or max(self.categories) >= self.n_classes:
            raise DomainError(f"{self.domain_id}: categories must lie in 0..{self.n_classes - 1}")
        if self.task == "vector":
            if not 0.0 <= self.spurious_rho <= 1.0:
                raise DomainError(f"{self.domain_id}: spurious_rho must be in [0, 1]")
            if self.n_features < 3:
                raise DomainError(f"{self.domain_id}: need >= 3 features (2 informative + 1 spurious)")
            n_noise = self.n_features - 3
            if len(self.feature_scale) not in (1, n_noise):
                raise DomainError(f"{self.domain_id}: feature_scale needs 1 or {n_noise} entries")
            if self.noise_sigma < 0 or self.separation <= 0:
                raise DomainError(f"{self.domain_id}: bad noise_sigma/separation")
        else:
            if self.n_classes > N_CLASSES:
                raise DomainError(f"{self.domain_id}: nucleus palette has {N_CLASSES} classes")
            lo, hi = self.radius_range
            if lo < 2 or hi < lo:
                raise DomainError(f"{self.domain_id}: radius_range must satisfy 2 <= lo <= hi")
            if len(self.hue) != 3:
                raise DomainError(f"{self.domain_id}: hue needs 3 channels")
            if self.density <= 0:
                raise DomainError(f"{self.domain_id}: density must be positive")
            if not 0.0 <= self.hollow_prob <= 1.0:
                raise DomainError(f"{self.domain_id}: hollow_prob must be in [0, 1]")
            if self.sigma is not None and self.sigma <= 0:
                raise DomainError(f"{self.domain_id}: sigma must be positive")

    @property
    def proximity_sigma(self) -> float:
        return self.sigma if self.sigma is not None else self.radius_range[0] / 2.0

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("categories", "feature_scale", "hue", "radius_range"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        if isinstance(d.get("hue"), str):
            d["hue"] = HUE_PRESETS[d["hue"]]
        return cls(**d)


class VectorSample(NamedTuple):
    features: np.ndarray
    label: int


@dataclass
class VectorSet:
    """Array-backed list of :class:`VectorSample`."""

    features: np.ndarray
    labels: np.ndarray
    domain_id: str = ""

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> VectorSample:
        return VectorSample(self.features[i], int(self.labels[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))


@dataclass
class NucleusSample:
    image: np.ndarray  # (3, H, W)
    annotations: list  # [(x, y, cls)]
    maps: np.ndarray  # (n_classes, H, W)
    domain_id: str = ""

    def target(self) -> np.ndarray:
        """Class maps plus a background channel ``1 - max(class maps)``."""
        bg = 1.0 - self.maps.max(axis=0, keepdims=True)
        return np.concatenate([self.maps, bg], axis=0)


def class_centroids(n_classes: int, separation: float) -> np.ndarray:
    """Centroids on a circle, adjacent ones ``separation`` apart."""
    radius = separation / (2.0 * np.sin(np.pi / n_classes)) if n_classes > 1 else 0.0
    ang = 2.0 * np.pi * np.arange(n_classes) / max(n_classes, 1)
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def spurious_codes(n_classes: int) -> np.ndarray:
    return np.linspace(-2.0, 2.0, n_classes) if n_classes > 1 else np.zeros(1)


def rotation(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])


def gen_vector_domain(spec: DomainSpec, count: int, seed: int) -> VectorSet:
    if spec.task != "vector":
        raise DomainError(f"{spec.domain_id} is not a vector domain")
    if count < 1:
        raise DomainError("count must be >= 1")
    rng = rng_for(seed, "vector")
    cats = np.array(spec.categories)
    labels = cats[rng.integers(0, len(cats), size=count)]
    cent = class_centroids(spec.n_classes, spec.separation) @ rotation(spec.rotation_deg).T
    informative = cent[labels] + spec.noise_sigma * rng.standard_normal((count, 2))
    copy = rng.random(count) < spec.spurious_rho
    code = spurious_codes(spec.n_classes)[labels] + 0.1 * rng.standard_normal(count)
    spurious = np.where(copy, code, spec.spurious_noise * rng.standard_normal(count))
    n_noise = spec.n_features - 3
    scale = np.broadcast_to(np.asarray(spec.feature_scale), (n_noise,))
    noise = rng.standard_normal((count, n_noise)) * scale
    x = np.concatenate([informative, spurious[:, None], noise], axis=1)
    return VectorSet(x, labels.astype(np.int64), spec.domain_id)


def _poisson_disc(rng, size: int, margin: int, min_dist: float, target: int) -> list:
    lo, hi = margin, size - 1 - margin
    if hi < lo:
        return []
    pts: list = []
    attempts = 0
    while len(pts) < target and attempts < 30 * target:
        attempts += 1
        x, y = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
        if all((x - px) ** 2 + (y - py) ** 2 >= min_dist**2 for px, py in pts):
            pts.append((x, y))
    return pts


def gen_nucleus_sample(spec: DomainSpec, image_size: int, seed: int) -> NucleusSample:
    if spec.task != "nucleus":
        raise DomainError(f"{spec.domain_id} is not a nucleus domain")
    if image_size < 32:
        raise DomainError("image_size must be >= 32")
    rng = rng_for(seed, "nucleus")
    lo, hi = spec.radius_range
    expected = spec.density * image_size * image_size / 1000.0
    target = max(1, int(rng.poisson(expected)))
    centers = _poisson_disc(rng, image_size, int(np.ceil(hi)), 2.0 * hi, target)
    if not centers:
        raise DomainError(f"{spec.domain_id}: no cell fits a {image_size}px field with radius {hi}")

    hue = np.asarray(spec.hue)[:, None, None]
    img = np.broadcast_to(BACKGROUND_COLOR[:, None, None], (3, image_size, image_size)).copy()
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    cats = np.array(spec.categories)
    annotations = []
    for x, y in centers:
        cls = int(cats[rng.integers(len(cats))])
        r = rng.uniform(lo, hi)
        d2 = (xx - x) ** 2 + (yy - y) ** 2
        region = d2 <= r * r
        if rng.random() < spec.hollow_prob:
            region &= d2 > max(r - 1.5, 0.0) ** 2
        img[:, region] = CLASS_COLORS[cls][:, None]
        annotations.append((x, y, cls))
    img = img + hue
    if spec.noise_level > 0:
        texture = rng_for(spec.texture_seed, "texture", seed)
        img = img + spec.noise_level * texture.standard_normal(img.shape)
    img = np.clip(img, 0.0, 1.0)
    maps = np.stack([
        proximity_map(annotations, c, image_size, spec.proximity_sigma) for c in range(spec.n_classes)
    ])
    return NucleusSample(img, annotations, maps, spec.domain_id)


def proximity_map(annotations, cls: int, image_size, sigma: float) -> np.ndarray:
    """Max-combined Gaussian bumps, exactly 1.0 at each annotation of ``cls``."""
    if sigma <= 0:
        raise DomainError("sigma must be positive")
    h, w = (image_size, image_size) if np.isscalar(image_size) else image_size
    out = np.zeros((h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    for x, y, c in annotations:
        if not (0 <= x < w and 0 <= y < h):
            raise DomainError(f"annotation ({x}, {y}) lies outside a {w}x{h} image")
        if c != cls:
            continue
        np.maximum(out, np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2.0 * sigma**2)), out=out)
    return out


@dataclass
class Pool:
    """A materialized training/validation set for one domain."""

    spec: DomainSpec
    x: np.ndarray
    y: np.ndarray  # labels (vector) or target maps (nucleus)
    annotations: list | None = None

    def __len__(self) -> int:
        return len(self.x)


def make_pool(spec: DomainSpec, count: int, seed: int, image_size: int = 32) -> Pool:
    if spec.task == "vector":
        data = gen_vector_domain(spec, count, seed)
        return Pool(spec, data.features, data.labels)
    samples = [gen_nucleus_sample(spec, image_size, derive_seed(seed, i)) for i in range(count)]
    return Pool(
        spec,
        np.stack([s.image for s in samples]),
        np.stack([s.target() for s in samples]),
        [s.annotations for s in samples],
    )


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    domains: list
    annotations: list | None = None


def batch_split(batch_size: int, ratio: Sequence[int], has_invasion: bool) -> tuple[int, int]:
    if batch_size < 1:
        raise DomainError("batch_size must be >= 1")
    if not has_invasion:
        return batch_size, 0
    a, b = (int(r) for r in ratio)
    if a < 0 or b < 0 or a + b == 0 or batch_size % (a + b):
        raise DomainError(f"ratio {a}:{b} does not divide batch size {batch_size}")
    unit = batch_size // (a + b)
    return a * unit, b * unit


class _PoolCursor:
    """Epoch-shuffled cycling over one pool."""

    def __init__(self, pool: Pool, rng):
        self.pool, self.rng = pool, rng
        self.order = rng.permutation(len(pool))
        self.pos = 0

    def take(self, n: int) -> np.ndarray:
        idx = []
        while len(idx) < n:
            if self.pos == len(self.order):
                self.order, self.pos = self.rng.permutation(len(self.pool)), 0
            idx.append(self.order[self.pos])
            self.pos += 1
        return np.array(idx, dtype=np.int64)


def _fresh(spec: DomainSpec, n: int, seed: int, image_size: int):
    if spec.task == "vector":
        d = gen_vector_domain(spec, n, seed)
        return d.features, d.labels, None
    samples = [gen_nucleus_sample(spec, image_size, derive_seed(seed, i)) for i in range(n)]
    return (np.stack([s.image for s in samples]), np.stack([s.target() for s in samples]),
            [s.annotations for s in samples])


def domain_stream(sources, invasions=(), batch_size: int = 8, ratio=(1, 1), seed: int = 0,
                  image_size: int = 32) -> Iterator[Batch]:
    """Infinite iterator of merged batches.

    ``sources``/``invasions`` hold :class:`Pool` objects (sampled without
    replacement per pass) or :class:`DomainSpec` objects (fresh samples per
    batch). The source share of each batch is spread round-robin across the
    source domains; likewise for invasion domains.
    """
    sources, invasions = list(sources), list(invasions)
    if not sources:
        raise DomainError("domain_stream needs at least one source domain")
    n_src, n_inv = batch_split(batch_size, ratio, bool(invasions))
    members = [(d, n) for group, total in ((sources, n_src), (invasions, n_inv))
               for d, n in zip(group, _spread(total, len(group)))]
    cursors = {id(d): _PoolCursor(d, rng_for(seed, "cursor", i))
               for i, (d, _) in enumerate(members) if isinstance(d, Pool)}
    step = 0
    while True:
        xs, ys, doms, anns = [], [], [], []
        for i, (d, n) in enumerate(members):
            if n == 0:
                continue
            if isinstance(d, Pool):
                idx = cursors[id(d)].take(n)
                xs.append(d.x[idx]), ys.append(d.y[idx])
                anns.extend([d.annotations[j] for j in idx] if d.annotations is not None else [None] * n)
                doms.extend([d.spec.domain_id] * n)
            else:
                x, y, a = _fresh(d, n, derive_seed(seed, step, i), image_size)
                xs.append(x), ys.append(y)
                anns.extend(a if a is not None else [None] * n)
                doms.extend([d.domain_id] * n)
        step += 1
        has_ann = any(a is not None for a in anns)
        yield Batch(np.concatenate(xs), np.concatenate(ys), doms, anns if has_ann else None)


def _spread(total: int, k: int) -> list:
    base, extra = divmod(total, k) if k else (0, 0)
    return [base + (1 if i < extra else 0) for i in range(k)]


def dump_dataset(path, specs: Sequence[DomainSpec], counts: Sequence[int], seed: int,
                 image_size: int = 32) -> Path:
    """Write a manifest plus per-sample binaries and annotation lists.

    Nucleus samples become ``<domain>/<i>.bin`` (float64 LE, C x H x W) and
    ``<domain>/<i>.txt`` (``x y class`` per line). Vector domains become
    ``<domain>/features.bin`` (float64 LE, n x d) and ``<domain>/labels.txt``.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"format": 1, "seed": seed, "image_size": image_size, "domains": []}
    for spec, count in zip(specs, counts):
        dseed = derive_seed(seed, spec.domain_id)
        ddir = root / spec.domain_id
        ddir.mkdir(exist_ok=True)
        if spec.task == "vector":
            data = gen_vector_domain(spec, count, dseed)
            ddir.joinpath("features.bin").write_bytes(data.features.astype("<f8").tobytes())
            ddir.joinpath("labels.txt").write_text("".join(f"{int(v)}\n" for v in data.labels))
            shape = list(data.features.shape[1:])
        else:
            for i in range(count):
                s = gen_nucleus_sample(spec, image_size, derive_seed(dseed, i))
                ddir.joinpath(f"{i:05d}.bin").write_bytes(s.image.astype("<f8").tobytes())
                ddir.joinpath(f"{i:05d}.txt").write_text("".join(f"{x} {y} {c}\n" for x, y, c in s.annotations))
            shape = [3, image_size, image_size]
        manifest["domains"].append({"spec": spec.to_dict(), "seed": dseed, "count": count, "shape": shape})
    root.joinpath("manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_dataset(path) -> dict:
    """Read a dump back: ``{domain_id: VectorSet | list[(image, annotations)]}``."""
    root = Path(path)
    manifest = json.loads(root.joinpath("manifest.json").read_text())
    out = {}
    for entry in manifest["domains"]:
        spec = DomainSpec.from_dict(entry["spec"])
        ddir = root / spec.domain_id
        shape = tuple(entry["shape"])
        if spec.task == "vector":
            feats = np.frombuffer(ddir.joinpath("features.bin").read_bytes(), dtype="<f8").reshape(-1, *shape)
            labels = np.array([int(v) for v in ddir.joinpath("labels.txt").read_text().split()], dtype=np.int64)
            out[spec.domain_id] = VectorSet(feats.copy(), labels, spec.domain_id)
        else:
            items = []
            for i in range(entry["count"]):
                img = np.frombuffer(ddir.joinpath(f"{i:05d}.bin").read_bytes(), dtype="<f8").reshape(shape)
                lines = ddir.joinpath(f"{i:05d}.txt").read_text().splitlines()
                anns = [tuple(int(v) for v in ln.split()) for ln in lines if ln.strip()]
                items.append((img.copy(), anns))
            out[spec.domain_id] = items
    return out
