"""Synthetic biased-scene benchmark.

Every scene holds one object on a textured background. The object's shape is
the class label (the causal factor). Its color and the background texture are
non-causal: each source dataset has a majority color, drawn with probability
``color_bias`` (bias inside a dataset), and its own background texture (bias
across datasets). The target split draws colors uniformly and uses background
textures that no source dataset has.

Images are float32 in [0, 1], laid out as [3, S, S].
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from gbdal.errors import ConfigError, FormatError

SHAPES = ("square", "disk", "triangle", "cross")

# Object palette, indexed by color id modulo its length.
PALETTE = np.array(
    [
        [0.90, 0.10, 0.10],
        [0.10, 0.80, 0.15],
        [0.15, 0.30, 0.95],
        [0.95, 0.85, 0.10],
        [0.85, 0.10, 0.85],
        [0.10, 0.85, 0.85],
    ],
    dtype=np.float32,
)

ROLES = ("source", "target", "target_adv", "target_gauss")
TARGET_DATASET_ID = -1


@dataclass(frozen=True)
class FactorSpec:
    num_classes: int = 3
    shapes: tuple[int, ...] = (0, 2, 3)  # square, triangle, cross
    colors: tuple[int, ...] = (0, 1, 2, 3)
    backgrounds: tuple[int, ...] = (0, 1)
    target_backgrounds: tuple[int, ...] = (2, 3, 4)
    color_bias: float = 0.9
    canvas_size: int = 32
    object_scale_range: tuple[float, float] = (0.4, 0.6)
    center_jitter: float = 0.06
    background_contrast: float = 0.25

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.shapes) != self.num_classes:
            raise ConfigError("need exactly one shape id per class")
        if len(set(self.shapes)) != len(self.shapes):
            raise ConfigError("shape ids must be distinct")
        if any(s < 0 or s >= len(SHAPES) for s in self.shapes):
            raise ConfigError(f"shape ids must lie in [0, {len(SHAPES)})")
        if len(self.colors) < 2:
            raise ConfigError("need at least two colors")
        if not 0.0 <= self.color_bias <= 1.0:
            raise ConfigError(f"color_bias must lie in [0, 1], got {self.color_bias}")
        if self.canvas_size < 16:
            raise ConfigError(f"canvas_size must be >= 16, got {self.canvas_size}")
        if not self.backgrounds or not self.target_backgrounds:
            raise ConfigError("source and target background lists must be non-empty")
        if set(self.backgrounds) & set(self.target_backgrounds):
            raise ConfigError("target backgrounds must be disjoint from source backgrounds")
        lo, hi = self.object_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError(f"bad object_scale_range {self.object_scale_range}")
        if self.center_jitter < 0 or hi / 2 + self.center_jitter > 0.5:
            raise ConfigError("objects must fit inside the canvas")
        if not 0.0 <= self.background_contrast <= 1.0:
            raise ConfigError("background_contrast must lie in [0, 1]")

    def majority_color(self, dataset_id: int) -> int:
        return self.colors[dataset_id % len(self.colors)]

    def source_background(self, dataset_id: int) -> int:
        return self.backgrounds[dataset_id % len(self.backgrounds)]


@dataclass
class Scene:
    image: np.ndarray
    class_label: int
    box: np.ndarray
    dataset_id: int
    color_id: int
    background_id: int


@dataclass
class DatasetSplit:
    """Scenes stored as stacked arrays; iterate or index to get `Scene` views."""

    name: str
    role: str
    images: np.ndarray  # [n, 3, S, S] float32
    labels: np.ndarray  # [n] int64
    boxes: np.ndarray  # [n, 4] float64, (cx, cy, w, h)
    dataset_ids: np.ndarray
    color_ids: np.ndarray
    background_ids: np.ndarray

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"unknown split role {self.role!r}")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Scene:
        return Scene(
            image=self.images[i],
            class_label=int(self.labels[i]),
            box=self.boxes[i],
            dataset_id=int(self.dataset_ids[i]),
            color_id=int(self.color_ids[i]),
            background_id=int(self.background_ids[i]),
        )

    def __iter__(self) -> Iterator[Scene]:
        return (self[i] for i in range(len(self)))

    @property
    def scenes(self) -> list[Scene]:
        return list(self)

    @property
    def canvas_size(self) -> int:
        return self.images.shape[-1] if self.images.ndim == 4 else 0

    def with_images(self, images: np.ndarray, name: str, role: str) -> "DatasetSplit":
        return DatasetSplit(
            name=name,
            role=role,
            images=images.astype(np.float32, copy=False),
            labels=self.labels.copy(),
            boxes=self.boxes.copy(),
            dataset_ids=self.dataset_ids.copy(),
            color_ids=self.color_ids.copy(),
            background_ids=self.background_ids.copy(),
        )

    def equals(self, other: "DatasetSplit") -> bool:
        return (
            self.name == other.name
            and self.role == other.role
            and self.images.shape == other.images.shape
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.boxes, other.boxes)
            and np.array_equal(self.dataset_ids, other.dataset_ids)
            and np.array_equal(self.color_ids, other.color_ids)
            and np.array_equal(self.background_ids, other.background_ids)
        )


# ---------------------------------------------------------------------------
# rasterization

_MASK64 = (1 << 64) - 1


def _mix(*values: int) -> int:
    """splitmix64 folded over the inputs; platform independent."""
    h = 0x9E3779B97F4A7C15
    for v in values:
        h = (h + (v & _MASK64) + 0x9E3779B97F4A7C15) & _MASK64
        h ^= h >> 30
        h = (h * 0xBF58476D1CE4E5B9) & _MASK64
        h ^= h >> 27
        h = (h * 0x94D049BB133111EB) & _MASK64
        h ^= h >> 31
    return h


def _unit(h: int) -> float:
    return (h >> 11) / float(1 << 53)


def _background_colors(background_id: int, contrast: float) -> tuple[np.ndarray, np.ndarray]:
    """Base color in [0.2, 0.6]^3 and a second color offset by at most ``contrast`` per channel."""
    a = np.array([0.2 + 0.4 * _unit(_mix(background_id, 1, c)) for c in range(3)])
    b = a + contrast * np.array([2 * _unit(_mix(background_id, 2, c)) - 1 for c in range(3)])
    return a.astype(np.float32), np.clip(b, 0, 1).astype(np.float32)


def render_background(background_id: int, size: int, phase: tuple[int, int], contrast: float = 0.25) -> np.ndarray:
    """Procedural texture keyed by ``background_id``: stripes, checker or block noise.

    ``phase`` shifts the pattern so scenes sharing a background are not identical.
    """
    family = background_id % 3
    rows, cols = np.mgrid[0:size, 0:size]
    rows = rows + phase[0]
    cols = cols + phase[1]
    h = _mix(background_id, 7)
    if family == 0:
        period = 4 + h % 5
        orient = (h >> 8) % 3
        coord = {0: rows, 1: cols, 2: rows + cols}[orient]
        t = ((coord // (period // 2 + 1)) % 2).astype(np.float32)
    elif family == 1:
        cell = 2 + h % 4
        t = (((rows // cell) + (cols // cell)) % 2).astype(np.float32)
    else:
        cell = 2 + 2 * (h % 2)
        r, c = rows // cell, cols // cell
        lut = np.array(
            [[_unit(_mix(background_id, 11, i, j)) for j in range(c.max() + 1)] for i in range(r.max() + 1)],
            dtype=np.float32,
        )
        t = lut[r, c]
    ca, cb = _background_colors(background_id, contrast)
    img = ca[:, None, None] * (1 - t[None]) + cb[:, None, None] * t[None]
    return img.astype(np.float32)


def shape_mask(shape_id: int, size: int, cx: float, cy: float, s: float) -> np.ndarray:
    """Boolean mask of pixel centers inside the shape (no anti-aliasing)."""
    coords = (np.arange(size) + 0.5) / size
    x = coords[None, :] - cx
    y = coords[:, None] - cy
    h = s / 2
    name = SHAPES[shape_id]
    if name == "square":
        return (np.abs(x) <= h) & (np.abs(y) <= h)
    if name == "disk":
        return x**2 + y**2 <= h**2
    if name == "triangle":
        depth = y + h  # 0 at apex, 2h at base
        return (depth >= 0) & (depth <= 2 * h) & (np.abs(x) <= depth / 2)
    if name == "cross":
        arm = h / 3
        return ((np.abs(x) <= arm) & (np.abs(y) <= h)) | ((np.abs(y) <= arm) & (np.abs(x) <= h))
    raise ConfigError(f"unknown shape id {shape_id}")


def _render_scene(spec: FactorSpec, rng: np.random.Generator, label: int, color_id: int, background_id: int):
    size = spec.canvas_size
    lo, hi = spec.object_scale_range
    s = float(rng.uniform(lo, hi))
    cx = 0.5 + float(rng.uniform(-spec.center_jitter, spec.center_jitter))
    cy = 0.5 + float(rng.uniform(-spec.center_jitter, spec.center_jitter))
    phase = tuple(int(p) for p in rng.integers(0, 64, size=2))
    img = render_background(background_id, size, phase, spec.background_contrast)
    mask = shape_mask(spec.shapes[label], size, cx, cy, s)
    color = PALETTE[color_id % len(PALETTE)]
    img[:, mask] = color[:, None]
    return img, np.array([cx, cy, s, s], dtype=np.float64)


def _assemble(spec, rng, name, role, labels, color_ids, background_ids, dataset_id) -> DatasetSplit:
    n = len(labels)
    size = spec.canvas_size
    images = np.empty((n, 3, size, size), dtype=np.float32)
    boxes = np.empty((n, 4), dtype=np.float64)
    for i in range(n):
        images[i], boxes[i] = _render_scene(spec, rng, int(labels[i]), int(color_ids[i]), int(background_ids[i]))
    return DatasetSplit(
        name=name,
        role=role,
        images=images,
        labels=np.asarray(labels, dtype=np.int64),
        boxes=boxes,
        dataset_ids=np.full(n, dataset_id, dtype=np.int64),
        color_ids=np.asarray(color_ids, dtype=np.int64),
        background_ids=np.asarray(background_ids, dtype=np.int64),
    )


def generate_source(spec: FactorSpec, dataset_id: int, n: int, seed: int) -> DatasetSplit:
    """Biased source dataset: majority color w.p. ``color_bias``, one fixed background."""
    spec.validate()
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    if dataset_id < 0:
        raise ConfigError("source dataset ids must be non-negative")
    rng = np.random.default_rng([seed, dataset_id, 0x5EED])
    labels = rng.integers(0, spec.num_classes, size=n)
    majority = spec.majority_color(dataset_id)
    others = np.array([c for c in spec.colors if c != majority])
    biased = rng.random(n) < spec.color_bias
    color_ids = np.where(biased, majority, others[rng.integers(0, len(others), size=n)])
    backgrounds = np.full(n, spec.source_background(dataset_id))
    return _assemble(spec, rng, f"source{dataset_id}", "source", labels, color_ids, backgrounds, dataset_id)


def generate_target(spec: FactorSpec, n: int, seed: int) -> DatasetSplit:
    """Unbiased held-out split: uniform colors, backgrounds unseen by any source."""
    spec.validate()
    if n < 0:
        raise ConfigError(f"n must be >= 0, got {n}")
    rng = np.random.default_rng([seed, 0x7A26E7])
    labels = rng.integers(0, spec.num_classes, size=n)
    colors = np.asarray(spec.colors)
    color_ids = colors[rng.integers(0, len(colors), size=n)]
    bgs = np.asarray(spec.target_backgrounds)
    backgrounds = bgs[rng.integers(0, len(bgs), size=n)]
    split = _assemble(spec, rng, "target", "target", labels, color_ids, backgrounds, TARGET_DATASET_ID)
    if n == 0:
        split.images = np.empty((0, 3, spec.canvas_size, spec.canvas_size), dtype=np.float32)
    return split


def gaussian_corrupt(split: DatasetSplit, sigma: float, seed: int) -> DatasetSplit:
    """Additive zero-mean Gaussian pixel noise, clamped to [0, 1]."""
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        images = split.images.copy()
    else:
        rng = np.random.default_rng([seed, 0x6A055])
        noise = rng.normal(0.0, sigma, size=split.images.shape)
        images = np.clip(split.images.astype(np.float64) + noise, 0.0, 1.0).astype(np.float32)
    return split.with_images(images, f"{split.name}_gauss", "target_gauss")


# ---------------------------------------------------------------------------
# container format: "GBD1" | u32 version | u32 count | u32 canvas | u16+name | u16+role
#                   | count*3*S*S float32 LE | count metadata records

MAGIC = b"GBD1"
VERSION = 1
_HEADER = struct.Struct("<4sIII")
_RECORD = np.dtype(
    [("label", "<i8"), ("box", "<f8", (4,)), ("dataset_id", "<i8"), ("color_id", "<i8"), ("background_id", "<i8")]
)


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def save_split(split: DatasetSplit, path) -> None:
    path = Path(path)
    n, size = len(split), split.canvas_size or 0
    records = np.zeros(n, dtype=_RECORD)
    records["label"] = split.labels
    records["box"] = split.boxes
    records["dataset_id"] = split.dataset_ids
    records["color_id"] = split.color_ids
    records["background_id"] = split.background_ids
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, size))
        fh.write(_pack_str(split.name))
        fh.write(_pack_str(split.role))
        fh.write(np.ascontiguousarray(split.images, dtype="<f4").tobytes())
        fh.write(records.tobytes())


def load_split(path) -> DatasetSplit:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"split file not found: {path}") from exc
    try:
        magic, version, n, size = _HEADER.unpack_from(raw, 0)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        offset = _HEADER.size
        strings = []
        for _ in range(2):
            (length,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            if offset + length > len(raw):
                raise FormatError(f"{path}: truncated header")
            strings.append(raw[offset : offset + length].decode("utf-8"))
            offset += length
        n_img = n * 3 * size * size
        expected = offset + 4 * n_img + n * _RECORD.itemsize
        if len(raw) != expected:
            raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
        images = np.frombuffer(raw, dtype="<f4", count=n_img, offset=offset).reshape(n, 3, size, size)
        offset += 4 * n_img
        records = np.frombuffer(raw, dtype=_RECORD, count=n, offset=offset)
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt split container ({exc})") from exc
    return DatasetSplit(
        name=strings[0],
        role=strings[1],
        images=images.astype(np.float32),
        labels=records["label"].astype(np.int64),
        boxes=records["box"].astype(np.float64),
        dataset_ids=records["dataset_id"].astype(np.int64),
        color_ids=records["color_id"].astype(np.int64),
        background_ids=records["background_id"].astype(np.int64),
    )
