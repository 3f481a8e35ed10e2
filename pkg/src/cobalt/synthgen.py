"""Colored-glyph datasets with a class/color spurious correlation, and paired views."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CBLT"
VERSION = 1

# Every channel is lit on every glyph, so shape survives in luminance whatever the color.
PALETTE = np.array(
    [
        [0.95, 0.30, 0.30],
        [0.30, 0.90, 0.30],
        [0.30, 0.40, 0.95],
        [0.95, 0.90, 0.30],
        [0.90, 0.35, 0.90],
        [0.30, 0.90, 0.90],
        [0.95, 0.60, 0.25],
        [0.60, 0.35, 0.95],
    ]
)
BACKGROUND = 0.1


@dataclass
class DatasetSpec:
    n_classes: int = 5
    n_colors: int = 5
    correlation: float = 0.995
    val_correlation: float | None = None
    test_correlation: float | None = None
    n_train: int = 10000
    n_val: int = 2000
    n_test: int = 2500
    image_size: int = 32
    patch_size: int = 8
    noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("correlation", "val_correlation", "test_correlation"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        if self.n_colors < self.n_classes:
            raise ValueError(
                f"n_colors={self.n_colors} < n_classes={self.n_classes}: "
                "each class needs its own majority color"
            )
        if self.n_colors > len(PALETTE):
            raise ValueError(f"at most {len(PALETTE)} colors are available")
        if self.image_size % self.patch_size:
            raise ValueError(f"patch size {self.patch_size} does not divide image size {self.image_size}")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown dataset spec fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticSample:
    sample_id: int
    image: np.ndarray
    y: int
    a: int
    shape_seed: int


@dataclass
class Dataset:
    """Images, labels and color attributes, column-wise, plus split membership."""

    spec: DatasetSpec
    sample_id: np.ndarray
    images: np.ndarray
    y: np.ndarray
    a: np.ndarray
    splits: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.sample_id)

    def split(self, name: str) -> "Dataset":
        idx = self.splits[name]
        return Dataset(self.spec, self.sample_id[idx], self.images[idx], self.y[idx], self.a[idx])

    def samples(self):
        for k in range(len(self)):
            yield SyntheticSample(int(self.sample_id[k]), self.images[k], int(self.y[k]), int(self.a[k]), int(self.sample_id[k]))


# glyphs


def _glyph(cls: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Binary mask of the class glyph with per-sample jitter in position, scale and stroke."""
    r = np.arange(size)[:, None] + 0.5
    c = np.arange(size)[None, :] + 0.5
    half = size / 2.0
    cy = half + rng.uniform(-0.08, 0.08) * size
    cx = half + rng.uniform(-0.08, 0.08) * size
    ext = size * rng.uniform(0.28, 0.36)
    stroke = size * rng.uniform(0.08, 0.12)
    dy, dx = r - cy, c - cx
    kind = cls % 5
    if kind == 0:  # ring
        rad = np.hypot(dy, dx)
        mask = np.abs(rad - ext * 0.8) < stroke * 0.7
    elif kind == 1:  # plus
        mask = ((np.abs(dx) < stroke * 0.6) & (np.abs(dy) < ext)) | ((np.abs(dy) < stroke * 0.6) & (np.abs(dx) < ext))
    elif kind == 2:  # diagonal cross
        u, v = (dx + dy) / np.sqrt(2), (dx - dy) / np.sqrt(2)
        reach = np.maximum(np.abs(dx), np.abs(dy)) < ext
        mask = ((np.abs(u) < stroke * 0.6) | (np.abs(v) < stroke * 0.6)) & reach
    elif kind == 3:  # square outline
        box = np.maximum(np.abs(dx), np.abs(dy))
        mask = np.abs(box - ext * 0.8) < stroke * 0.6
    else:  # horizontal bars
        mask = (np.abs(dx) < ext) & ((np.abs(dy - ext * 0.6) < stroke * 0.6) | (np.abs(dy + ext * 0.6) < stroke * 0.6))
    if cls >= 5:
        mask = mask.T
    return mask


def render(cls: int, color: int, size: int, noise: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    mask = _glyph(cls, size, rng)
    img = np.full((size, size, 3), BACKGROUND)
    img[mask] = PALETTE[color]
    img += rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def _colors_for_split(y: np.ndarray, rho: float | None, n_colors: int, rng: np.random.Generator) -> np.ndarray:
    if rho is None:
        return rng.integers(0, n_colors, len(y))
    n_per = np.bincount(y)
    a = y.copy()
    for cls, count in enumerate(n_per):
        cls_idx = np.flatnonzero(y == cls)
        n_minor = int(round((1.0 - rho) * count))
        minor = rng.choice(cls_idx, size=n_minor, replace=False) if n_minor else np.empty(0, dtype=int)
        others = np.array([c for c in range(n_colors) if c != cls])
        if len(minor):
            a[minor] = others[rng.integers(0, len(others), len(minor))]
    return a


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Build train/val/test splits with class-balanced labels.

    In each correlated split a fraction ``correlation`` of every class
    carries the class's majority color (color index == class index); the
    rest draw uniformly among the other colors. The test split uses uniform
    colors unless ``test_correlation`` is set. Validation follows the
    training correlation unless ``val_correlation`` overrides it.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    rhos = {
        "train": spec.correlation,
        "val": spec.correlation if spec.val_correlation is None else spec.val_correlation,
        "test": spec.test_correlation,
    }
    sizes = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    ys, as_, splits = [], [], {}
    start = 0
    for name in ("train", "val", "test"):
        n = sizes[name]
        y = np.arange(n) % spec.n_classes
        a = _colors_for_split(y, rhos[name], spec.n_colors, rng)
        ys.append(y)
        as_.append(a)
        splits[name] = np.arange(start, start + n)
        start += n
    y = np.concatenate(ys).astype(np.int64)
    a = np.concatenate(as_).astype(np.int64)
    sample_id = np.arange(len(y), dtype=np.int64)
    # Per-sample seeds derive from the master seed, so rendering order is irrelevant.
    seeds = np.random.SeedSequence(spec.seed).spawn(1)[0].generate_state(len(y), dtype=np.uint32)
    images = np.empty((len(y), spec.image_size, spec.image_size, 3))
    for k in range(len(y)):
        images[k] = render(int(y[k]), int(a[k]), spec.image_size, spec.noise, int(seeds[k]))
    return Dataset(spec, sample_id, images, y, a, splits)


def ground_truth_groups(y, a, n_colors: int) -> np.ndarray:
    return np.asarray(y, dtype=np.int64) * n_colors + np.asarray(a, dtype=np.int64)


# views


@dataclass
class Crop:
    """Square source-image window ``[top, top+size) x [left, left+size)``, resized to the full view."""

    top: float
    left: float
    size: float


@dataclass
class AugConfig:
    enabled: bool = True
    scale: tuple[float, float] = (0.5, 1.0)
    brightness: float = 0.2


@dataclass
class ViewPair:
    view_s: np.ndarray
    view_t: np.ndarray
    overlap_map: dict[int, int]
    crop_s: Crop
    crop_t: Crop

    def student_mask(self, n_patches: int) -> np.ndarray:
        """1 for student patches that have a teacher counterpart."""
        mask = np.zeros(n_patches)
        mask[list(self.overlap_map.values())] = 1.0
        return mask


def patch_centers(crop: Crop, view_size: int, patch: int) -> np.ndarray:
    """Source-image (row, col) center of every view patch, row-major."""
    g = view_size // patch
    stride = crop.size / g
    idx = (np.arange(g) + 0.5) * stride
    rows = crop.top + idx
    cols = crop.left + idx
    return np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=-1).reshape(-1, 2)


def overlap_map(crop_from: Crop, crop_to: Crop, view_size: int, patch: int) -> dict[int, int]:
    """Map patch i of ``crop_from`` to patch j of ``crop_to`` when their source centers
    lie strictly within half a patch stride of each other on both axes.

    The tolerance uses the smaller of the two strides, which keeps the map
    injective and makes it the exact inverse of the reverse-direction map.
    """
    g = view_size // patch
    tol = 0.5 * min(crop_from.size, crop_to.size) / g
    idx = np.arange(g) + 0.5

    def near(origin_a: float, origin_b: float) -> np.ndarray:
        a = origin_a + idx * (crop_from.size / g)
        b = origin_b + idx * (crop_to.size / g)
        return np.abs(a[:, None] - b[None, :]) < tol - 1e-9

    # rows and columns are independent, so closeness factors per axis
    rows, cols = near(crop_from.top, crop_to.top), near(crop_from.left, crop_to.left)
    ri, rj = np.nonzero(rows)
    ci, cj = np.nonzero(cols)
    src = (ri[:, None] * g + ci[None, :]).ravel()
    dst = (rj[:, None] * g + cj[None, :]).ravel()
    return {int(i): int(j) for i, j in sorted(zip(src.tolist(), dst.tolist()))}


def _apply_crop(image: np.ndarray, crop: Crop) -> np.ndarray:
    size = image.shape[0]
    if crop.top == 0 and crop.left == 0 and crop.size == size:
        return image.copy()
    # separable bilinear resampling, edges clamped
    grid = (np.arange(size) + 0.5) * crop.size / size - 0.5
    (r0, r1, fr), (c0, c1, fc) = (_linear_taps(origin + grid, size) for origin in (crop.top, crop.left))
    rows = image[r0] * (1.0 - fr)[:, None, None] + image[r1] * fr[:, None, None]
    return rows[:, c0] * (1.0 - fc)[None, :, None] + rows[:, c1] * fc[None, :, None]


def _crop_batch(images: np.ndarray, crops: list[Crop]) -> np.ndarray:
    n, size, _, ch = images.shape
    sizes = np.array([c.size for c in crops])[:, None]
    grid = (np.arange(size) + 0.5)[None, :] * sizes / size - 0.5
    offset = np.arange(n)[:, None] * size

    def resample(x: np.ndarray, origins: np.ndarray) -> np.ndarray:
        # interpolate along axis 1 of (n, size, rest...) with contiguous row gathers
        lo, hi, frac = _linear_taps(origins[:, None] + grid, size)
        flat = x.reshape(n * size, -1)
        shape = (n, size) + x.shape[2:]
        w = frac.reshape(n, size, *([1] * (x.ndim - 2)))
        return flat[(lo + offset).ravel()].reshape(shape) * (1.0 - w) + flat[(hi + offset).ravel()].reshape(shape) * w

    rows = resample(images, np.array([c.top for c in crops]))
    cols = resample(np.ascontiguousarray(rows.transpose(0, 2, 1, 3)), np.array([c.left for c in crops]))
    return np.ascontiguousarray(cols.transpose(0, 2, 1, 3))


def _linear_taps(coords: np.ndarray, size: int):
    coords = np.clip(coords, 0.0, size - 1.0)
    lo = np.floor(coords).astype(np.int64)
    return lo, np.minimum(lo + 1, size - 1), coords - lo


def _random_crop(size: int, cfg: AugConfig, rng: np.random.Generator) -> Crop:
    area = rng.uniform(*cfg.scale)
    side = float(np.sqrt(area) * size)
    return Crop(float(rng.uniform(0, size - side)), float(rng.uniform(0, size - side)), side)


def make_views(
    image: np.ndarray,
    aug: AugConfig,
    seed,
    patch: int,
    crops: tuple[Crop, Crop] | None = None,
) -> ViewPair:
    """Two independently cropped and brightness-jittered views plus their patch overlap.

    ``crops`` pins the (student, teacher) geometry; otherwise crops are drawn
    from ``aug``. The overlap map runs from teacher patch index to student
    patch index.
    """
    size = image.shape[0]
    if patch > size:
        raise ValueError("crop must cover at least one patch")
    rng = np.random.default_rng(seed)
    full = Crop(0.0, 0.0, float(size))
    if crops is None:
        crops = (_random_crop(size, aug, rng), _random_crop(size, aug, rng)) if aug.enabled else (full, full)
    crop_s, crop_t = crops
    views = []
    for crop in (crop_s, crop_t):
        view = _apply_crop(image, crop)
        if aug.enabled and aug.brightness > 0:
            view = np.clip(view * rng.uniform(1 - aug.brightness, 1 + aug.brightness), 0.0, 1.0)
        views.append(view)
    return ViewPair(views[0], views[1], overlap_map(crop_t, crop_s, size, patch), crop_s, crop_t)


def make_view_batch(images: np.ndarray, aug: AugConfig, seeds, patch: int):
    """Batched :func:`make_views` over (B, H, W, C) images, one seed per image.

    Draws the same random numbers as the per-image call, so the views agree
    bit for bit. Returns ``(views_s, views_t, overlaps)``.
    """
    images = np.asarray(images)
    n, size = len(images), images.shape[1]
    if patch > size:
        raise ValueError("crop must cover at least one patch")
    if not aug.enabled:
        return images.copy(), images.copy(), [{i: i for i in range((size // patch) ** 2)} for _ in range(n)]
    crops, factors = [], []
    for seed in seeds:
        rng = np.random.default_rng(int(seed))
        pair = (_random_crop(size, aug, rng), _random_crop(size, aug, rng))
        crops.append(pair)
        factors.append([rng.uniform(1 - aug.brightness, 1 + aug.brightness) if aug.brightness > 0 else 1.0
                        for _ in range(2)])
    factors = np.asarray(factors)
    views = []
    for k in range(2):
        view = _crop_batch(images, [c[k] for c in crops])
        if aug.brightness > 0:
            view = np.clip(view * factors[:, k, None, None, None], 0.0, 1.0)
        views.append(view)
    return views[0], views[1], [overlap_map(t, s, size, patch) for s, t in crops]


# persistence


def _record_dtype(h: int, w: int, c: int) -> np.dtype:
    return np.dtype([("sample_id", "<u4"), ("y", "<u2"), ("a", "<u2"), ("image", "<f8", (h, w, c))])


def save_dataset(dataset: Dataset, directory: str | Path) -> Path:
    """Write ``dataset.cblt``, the ``dataset.json`` sidecar and one manifest per split."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n, h, w, c = dataset.images.shape
    spec = dataset.spec
    path = directory / "dataset.cblt"
    records = np.empty(n, dtype=_record_dtype(h, w, c))
    records["sample_id"] = dataset.sample_id
    records["y"] = dataset.y
    records["a"] = dataset.a
    records["image"] = dataset.images
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<6I", n, h, w, c, spec.n_classes, spec.n_colors))
        fh.write(records.tobytes())
    (directory / "dataset.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    for name, idx in dataset.splits.items():
        ids = dataset.sample_id[idx]
        (directory / f"{name}.txt").write_text("".join(f"{int(i)}\n" for i in ids))
    return path


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    path = directory / "dataset.cblt" if directory.is_dir() else directory
    directory = path.parent
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    n, h, w, c, n_classes, n_colors = struct.unpack_from("<6I", raw, 6)
    dtype = _record_dtype(h, w, c)
    offset = 6 + 24
    if len(raw) - offset != n * dtype.itemsize:
        raise ValueError(f"{path}: expected {n} records, file size disagrees")
    records = np.frombuffer(raw, dtype=dtype, count=n, offset=offset)
    meta = directory / "dataset.json"
    spec = DatasetSpec.from_dict(json.loads(meta.read_text())) if meta.exists() else DatasetSpec(
        n_classes=n_classes, n_colors=n_colors, image_size=h
    )
    sample_id = records["sample_id"].astype(np.int64)
    position = {int(s): k for k, s in enumerate(sample_id)}
    splits = {}
    for name in ("train", "val", "test"):
        manifest = directory / f"{name}.txt"
        if manifest.exists():
            ids = [int(line) for line in manifest.read_text().split()]
            splits[name] = np.array([position[i] for i in ids], dtype=np.int64)
    return Dataset(
        spec,
        sample_id,
        np.array(records["image"]),
        records["y"].astype(np.int64),
        records["a"].astype(np.int64),
        splits,
    )
