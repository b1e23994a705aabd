"""Dataset ingestion, preprocessing, augmentation and batching.

Images are 2-D float arrays. Geometric transforms share one resampler that
maps every output pixel to a source coordinate; images are read bilinearly,
masks with nearest neighbour and then re-binarised so they stay in {0, 1}.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import BoundsError, ConfigError, DataError, DimensionError

SPLITS = ("train", "val", "test")
DEFAULT_THRESHOLD = 0.5
NORM_EPS = 1e-7
NORM_MODES = ("image", "dataset")
_COORD_TOL = 1e-9


# ---------------------------------------------------------------------------
# intensity ops


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float
    eps: float = NORM_EPS


def normalize(x: np.ndarray, eps: float = NORM_EPS) -> tuple[np.ndarray, NormStats]:
    """Per-image standardisation with the population standard deviation."""
    x = np.asarray(x)
    if x.size == 0:
        raise DataError("cannot normalise an empty image")
    work = x.astype(np.float64)
    stats = NormStats(float(work.mean()), float(work.std()), eps)
    return apply_norm(x, stats), stats


def apply_norm(x: np.ndarray, stats: NormStats) -> np.ndarray:
    """Standardise ``x`` with given statistics (used for dataset-wide normalisation)."""
    x = np.asarray(x)
    out = (x.astype(np.float64) - stats.mean) / (stats.std + stats.eps)
    return out.astype(_float_dtype(x))


def dataset_stats(images, eps: float = NORM_EPS) -> NormStats:
    """Population mean and standard deviation pooled over every pixel of every image."""
    flat = [np.asarray(im, dtype=np.float64).ravel() for im in images]
    if not flat or not sum(f.size for f in flat):
        raise DataError("cannot compute statistics of an empty dataset")
    work = np.concatenate(flat)
    return NormStats(float(work.mean()), float(work.std()), eps)


def binarize_mask(m, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """1 where ``m >= threshold`` else 0, in the input's float dtype."""
    m = np.asarray(m)
    dtype = m.dtype if np.issubdtype(m.dtype, np.floating) else np.float32
    return (m >= threshold).astype(dtype)


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    if sigma <= 0:
        raise ConfigError(f"gaussian sigma must be > 0, got {sigma}")
    if radius < 1:
        raise ConfigError(f"gaussian radius must be >= 1, got {radius}")
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return k / k.sum()


def smooth_filter(x: np.ndarray, sigma: float, radius: int = 2) -> np.ndarray:
    """Separable normalised Gaussian blur with reflect padding."""
    k = gaussian_kernel(sigma, radius)
    work = np.asarray(x, dtype=np.float64)
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (radius, radius)
        padded = np.pad(work, pad, mode="reflect" if work.shape[axis] > radius else "symmetric")
        n = work.shape[axis]
        acc = np.zeros_like(work)
        for i, wgt in enumerate(k):
            sl = [slice(None), slice(None)]
            sl[axis] = slice(i, i + n)
            acc += wgt * padded[tuple(sl)]
        work = acc
    return work.astype(_float_dtype(x))


def _float_dtype(x) -> np.dtype:
    dt = np.asarray(x).dtype
    return dt if np.issubdtype(dt, np.floating) else np.dtype(np.float32)


# ---------------------------------------------------------------------------
# resampling


def sample(img: np.ndarray, rows: np.ndarray, cols: np.ndarray, order: str = "bilinear",
           fill: float | str = 0.0) -> np.ndarray:
    """Read ``img`` at fractional ``(rows, cols)``.

    ``fill`` is the value used outside the image, or ``"edge"`` to clamp
    coordinates to the border.
    """
    img = np.asarray(img)
    h, w = img.shape
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    # snap float noise at the borders back inside
    rows = np.where((rows < 0) & (rows > -_COORD_TOL), 0.0, rows)
    rows = np.where((rows > h - 1) & (rows < h - 1 + _COORD_TOL), h - 1.0, rows)
    cols = np.where((cols < 0) & (cols > -_COORD_TOL), 0.0, cols)
    cols = np.where((cols > w - 1) & (cols < w - 1 + _COORD_TOL), w - 1.0, cols)
    if fill == "edge":
        rows = np.clip(rows, 0, h - 1)
        cols = np.clip(cols, 0, w - 1)
        fill_value = 0.0
    else:
        fill_value = float(fill)
    if order == "nearest":
        r = np.floor(rows + 0.5).astype(np.int64)
        c = np.floor(cols + 0.5).astype(np.int64)
        inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        vals = img[np.clip(r, 0, h - 1), np.clip(c, 0, w - 1)]
        return np.where(inside, vals, fill_value).astype(_float_dtype(img))
    if order != "bilinear":
        raise ConfigError(f"unknown interpolation order {order!r}")
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    src = img.astype(np.float64)

    def corner(r, c):
        inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        return np.where(inside, src[np.clip(r, 0, h - 1), np.clip(c, 0, w - 1)], fill_value)

    out = (corner(r0, c0) * (1 - fr) * (1 - fc) + corner(r0, c0 + 1) * (1 - fr) * fc
           + corner(r0 + 1, c0) * fr * (1 - fc) + corner(r0 + 1, c0 + 1) * fr * fc)
    return out.astype(_float_dtype(img))


def resize(x: np.ndarray, out_h: int, out_w: int, order: str = "bilinear") -> np.ndarray:
    """Corner-aligned resize: output corners sample input corners exactly."""
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"resize target must be >= 1x1, got {out_h}x{out_w}")
    x = np.asarray(x)
    h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x.astype(_float_dtype(x), copy=True)
    rs = np.linspace(0, h - 1, out_h) if out_h > 1 else np.array([(h - 1) / 2])
    cs = np.linspace(0, w - 1, out_w) if out_w > 1 else np.array([(w - 1) / 2])
    rr, cc = np.meshgrid(rs, cs, indexing="ij")
    return sample(x, rr, cc, order, fill="edge")


def crop_roi(x: np.ndarray, top: int, left: int, h: int, w: int) -> np.ndarray:
    x = np.asarray(x)
    H, W = x.shape
    if h < 1 or w < 1 or top < 0 or left < 0 or top + h > H or left + w > W:
        raise BoundsError(f"ROI (top={top}, left={left}, h={h}, w={w}) exceeds image {H}x{W}")
    return x[top:top + h, left:left + w].copy()


def _grid(shape):
    h, w = shape
    return np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")


def rotation_coords(shape, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """Source coordinates for a counter-clockwise rotation about the centre."""
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = _grid(shape)
    y, x = rr - cy, cc - cx
    t = np.deg2rad(theta)
    return cy + np.cos(t) * y + np.sin(t) * x, cx - np.sin(t) * y + np.cos(t) * x


def rotate(x: np.ndarray, theta: float, order: str = "bilinear") -> np.ndarray:
    x = np.asarray(x)
    quarter = float(theta) / 90.0
    if quarter == np.round(quarter):
        k = int(np.round(quarter)) % 4
        if k % 2 == 0 or x.shape[0] == x.shape[1]:
            return np.rot90(x, k).astype(_float_dtype(x), copy=True)
    rows, cols = rotation_coords(x.shape, theta)
    return sample(x, rows, cols, order, fill=0.0)


def scale_coords(shape, s: float) -> tuple[np.ndarray, np.ndarray]:
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = _grid(shape)
    return cy + (rr - cy) / s, cx + (cc - cx) / s


def scale_aug(x: np.ndarray, s: float, order: str = "bilinear") -> np.ndarray:
    """Zoom about the centre keeping extents: ``s > 1`` crops, ``s < 1`` zero-pads."""
    if s <= 0:
        raise ConfigError(f"scale factor must be > 0, got {s}")
    x = np.asarray(x)
    if s == 1:
        return x.astype(_float_dtype(x), copy=True)
    rows, cols = scale_coords(x.shape, s)
    return sample(x, rows, cols, order, fill=0.0)


def flip(x: np.ndarray, axis: int) -> np.ndarray:
    return np.flip(np.asarray(x), axis=axis).astype(_float_dtype(x), copy=True)


# ---------------------------------------------------------------------------
# augmentation config and elastic warps


@dataclass
class AugmentConfig:
    enabled: bool = False
    rotation_deg: float = 15.0
    scale_min: float = 0.9
    scale_max: float = 1.1
    elastic_alpha: float = 2.0
    elastic_sigma: float = 4.0
    smooth_sigma: float = 0.5
    smooth_radius: int = 1
    rotate: bool = True
    scale: bool = True
    elastic: bool = True
    smooth: bool = False
    hflip: bool = True
    vflip: bool = False
    seed: int = 0

    def validate(self) -> "AugmentConfig":
        if not 0 < self.scale_min <= self.scale_max:
            raise ConfigError(f"scale range must satisfy 0 < min <= max, got [{self.scale_min}, {self.scale_max}]")
        if self.smooth_sigma <= 0:
            raise ConfigError(f"smooth_sigma must be > 0, got {self.smooth_sigma}")
        if self.smooth_radius < 1:
            raise ConfigError(f"smooth_radius must be >= 1, got {self.smooth_radius}")
        if self.elastic_alpha < 0 or self.elastic_sigma <= 0:
            raise ConfigError("elastic_alpha must be >= 0 and elastic_sigma > 0")
        if self.rotation_deg < 0:
            raise ConfigError(f"rotation_deg must be >= 0, got {self.rotation_deg}")
        return self


def elastic_field(shape, alpha: float, sigma: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed uniform displacement field ``(d_row, d_col)`` scaled by ``alpha``."""
    rng = np.random.default_rng(seed)
    raw = rng.uniform(-1.0, 1.0, size=(2, *shape))
    d_row = ndimage.gaussian_filter(raw[0], sigma, mode="reflect") * alpha
    d_col = ndimage.gaussian_filter(raw[1], sigma, mode="reflect") * alpha
    return d_row, d_col


def elastic_coords(shape, alpha: float, sigma: float, seed: int):
    d_row, d_col = elastic_field(shape, alpha, sigma, seed)
    rr, cc = _grid(shape)
    return rr + d_row, cc + d_col


def elastic_deform(x: np.ndarray, cfg: AugmentConfig, seed: int, order: str = "bilinear") -> np.ndarray:
    x = np.asarray(x)
    if cfg.elastic_alpha == 0:
        return x.astype(_float_dtype(x), copy=True)
    rows, cols = elastic_coords(x.shape, cfg.elastic_alpha, cfg.elastic_sigma, seed)
    return sample(x, rows, cols, order, fill="edge")


def augment_pair(image: np.ndarray, mask: np.ndarray, cfg: AugmentConfig,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Apply one random draw of every enabled augmentation to an image/mask pair.

    Geometry is identical for both; the mask is resampled nearest-neighbour and
    re-binarised, and intensity smoothing touches the image only.
    """
    img, msk = np.asarray(image), np.asarray(mask)
    if cfg.hflip and rng.random() < 0.5:
        img, msk = flip(img, 1), flip(msk, 1)
    if cfg.vflip and rng.random() < 0.5:
        img, msk = flip(img, 0), flip(msk, 0)
    if cfg.rotate and cfg.rotation_deg > 0:
        theta = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
        img, msk = rotate(img, theta), rotate(msk, theta, order="nearest")
    if cfg.scale and (cfg.scale_min, cfg.scale_max) != (1.0, 1.0):
        s = rng.uniform(cfg.scale_min, cfg.scale_max)
        img, msk = scale_aug(img, s), scale_aug(msk, s, order="nearest")
    if cfg.elastic and cfg.elastic_alpha > 0:
        seed = int(rng.integers(2**31))
        img, msk = elastic_deform(img, cfg, seed), elastic_deform(msk, cfg, seed, order="nearest")
    if cfg.smooth:
        img = smooth_filter(img, cfg.smooth_sigma, cfg.smooth_radius)
    return img, binarize_mask(msk, DEFAULT_THRESHOLD)


# ---------------------------------------------------------------------------
# files, manifests and splits


def read_pgm(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "1"):
            im = im.convert("L")
        return np.asarray(im, dtype=np.uint8).copy()


def write_pgm(path, arr: np.ndarray) -> None:
    """Write an 8-bit binary PGM; float input is taken as [0, 1] and rounded."""
    arr = np.asarray(arr)
    if np.issubdtype(arr.dtype, np.floating):
        arr = np.clip(np.floor(arr * 255.0 + 0.5), 0, 255)
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path, format="PPM")


def read_mask(path) -> np.ndarray:
    return (read_pgm(path) >= 128).astype(np.float32)


@dataclass
class SampleRecord:
    image: str
    mask: str
    split: str | None = None


@dataclass
class Manifest:
    records: list[SampleRecord]
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == name]

    def counts(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}

    def resolve(self, rel: str) -> Path:
        return self.root / rel


def load_manifest(path) -> Manifest:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"image", "mask"} <= set(reader.fieldnames):
            raise DataError(f"{path}: manifest header must contain 'image,mask' (got {reader.fieldnames})")
        records = []
        for lineno, row in enumerate(reader, start=2):
            split = (row.get("split") or "").strip() or None
            if split is not None and split not in SPLITS:
                raise DataError(f"{path}:{lineno}: unknown split {split!r}")
            records.append(SampleRecord(row["image"], row["mask"], split))
    return Manifest(records, path.parent)


def save_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image", "mask", "split"])
        for r in manifest.records:
            writer.writerow([r.image, r.mask, r.split or ""])


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(np.floor(0.70 * n + 1e-9))
    n_val = int(np.floor(0.15 * n + 1e-9))
    return n_train, n_val, n - n_train - n_val


def split_dataset(records: Sequence[SampleRecord] | Manifest, seed: int = 0) -> Manifest:
    """Seeded 70:15:15 assignment (train and val floored, test takes the rest)."""
    root = Path()
    if isinstance(records, Manifest):
        root, records = records.root, records.records
    if not records:
        raise DataError("cannot split an empty dataset")
    n = len(records)
    order = np.random.default_rng(seed).permutation(n)
    n_train, n_val, _ = split_sizes(n)
    tags = [None] * n
    for rank, idx in enumerate(order):
        tags[idx] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return Manifest([replace(r, split=t) for r, t in zip(records, tags)], root)


# ---------------------------------------------------------------------------
# in-memory sample sets and batching


@dataclass
class SampleSet:
    """Preprocessed images and masks, both ``N x 1 x H x W`` float32."""

    images: np.ndarray
    masks: np.ndarray
    names: list[str]
    split: str | None = None
    norm_stats: NormStats | None = None  # set when normalised with dataset-wide statistics

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_arrays(cls, images, masks, names=None, split=None, normalized: bool = False) -> "SampleSet":
        images = np.asarray(images, dtype=np.float32)
        masks = np.asarray(masks, dtype=np.float32)
        if images.ndim == 3:
            images = images[:, None]
        if masks.ndim == 3:
            masks = masks[:, None]
        if images.shape != masks.shape:
            raise DimensionError(f"image stack {images.shape} and mask stack {masks.shape} differ")
        if not normalized:
            images = np.stack([normalize(im[0])[0][None] for im in images]) if len(images) else images
        names = list(names) if names is not None else [f"sample{i:04d}" for i in range(len(images))]
        return cls(images, binarize_mask(masks), names, split)


def _prepare_pair(image_u8, mask_u8_or_bin, size=None, roi=None):
    img = np.asarray(image_u8, dtype=np.float32) / 255.0
    msk = np.asarray(mask_u8_or_bin, dtype=np.float32)
    if img.shape != msk.shape:
        raise DimensionError(f"image {img.shape} and mask {msk.shape} differ in size")
    if size is not None:
        img = resize(img, *size)
        msk = resize(msk, *size, order="nearest")
    if roi is not None:
        img = crop_roi(img, *roi)
        msk = crop_roi(msk, *roi)
    return img, binarize_mask(msk)


def preprocess_pair(image_u8: np.ndarray, mask_u8_or_bin: np.ndarray, size=None, roi=None,
                    stats: NormStats | None = None):
    """Scale to [0, 1], resize, crop and standardise one pair (mask stays binary).

    Standardisation is per image unless dataset ``stats`` are given.
    """
    img, msk = _prepare_pair(image_u8, mask_u8_or_bin, size, roi)
    img = normalize(img)[0] if stats is None else apply_norm(img, stats)
    return img.astype(np.float32), msk


def load_split(manifest: Manifest, split: str | None, size=None, roi=None, norm: str = "image",
               stats: NormStats | None = None) -> SampleSet:
    """Load and preprocess one split.

    ``norm="image"`` standardises every image on its own. ``norm="dataset"``
    uses ``stats`` if given (e.g. the training split's), otherwise the pooled
    statistics of this split, which are kept in ``norm_stats``.
    """
    if norm not in NORM_MODES:
        raise ConfigError(f"normalization must be one of {NORM_MODES}, got {norm!r}")
    records = manifest.records if split is None else manifest.split(split)
    if not records:
        raise DataError(f"split {split!r} has no records")
    images, masks, names = [], [], []
    for rec in records:
        ipath, mpath = manifest.resolve(rec.image), manifest.resolve(rec.mask)
        for p in (ipath, mpath):
            if not p.exists():
                raise DataError(f"missing file {p}")
        img, msk = _prepare_pair(read_pgm(ipath), read_mask(mpath), size, roi)
        images.append(img)
        masks.append(msk[None])
        names.append(Path(rec.image).stem)
    if norm == "image":
        stats = None
        images = [normalize(im)[0] for im in images]
    else:
        stats = stats if stats is not None else dataset_stats(images)
        images = [apply_norm(im, stats) for im in images]
    stacked = np.stack([im[None] for im in images]).astype(np.float32)
    return SampleSet(stacked, np.stack(masks), names, split, stats)


def batch_iter(data: SampleSet, batch_size: int, seed: int = 0, augment: AugmentConfig | None = None,
               shuffle: bool | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, masks)`` batches; the last batch may be short.

    Only the train split is shuffled by default. Augmentation draws come from
    the same seeded generator as the shuffle, so one seed fixes a whole epoch.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(data)
    if n == 0:
        raise DataError(f"split {data.split!r} has no records")
    if shuffle is None:
        shuffle = data.split == "train"
    aug_seed = augment.seed if augment is not None else 0
    rng = np.random.default_rng([seed, aug_seed])
    order = rng.permutation(n) if shuffle else np.arange(n)
    use_aug = augment is not None and augment.enabled
    if use_aug:
        augment.validate()
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        imgs, msks = data.images[idx], data.masks[idx]
        if use_aug:
            pairs = [augment_pair(im[0], mk[0], augment, rng) for im, mk in zip(imgs, msks)]
            imgs = np.stack([p[0][None] for p in pairs]).astype(np.float32)
            msks = np.stack([p[1][None] for p in pairs]).astype(np.float32)
        yield imgs, msks


# ---------------------------------------------------------------------------
# synthetic data


def synth_blobs(n: int, size: int = 64, seed: int = 0, noise: float = 0.05,
                max_blobs: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Random bright ellipses on a noisy background; returns images in [0, 1] and binary masks."""
    rng = np.random.default_rng(seed)
    rr, cc = _grid((size, size))
    images = np.empty((n, size, size), dtype=np.float32)
    masks = np.empty((n, size, size), dtype=np.float32)
    for i in range(n):
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, max_blobs + 1))):
            cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
            ay, ax = rng.uniform(0.08 * size, 0.22 * size, size=2)
            ang = rng.uniform(0, np.pi)
            y, x = rr - cy, cc - cx
            u = np.cos(ang) * x + np.sin(ang) * y
            v = -np.sin(ang) * x + np.cos(ang) * y
            mask |= (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
        background = 0.25 + 0.1 * rng.random()
        foreground = 0.65 + 0.2 * rng.random()
        img = np.where(mask, foreground, background) + noise * rng.standard_normal((size, size))
        images[i] = np.clip(smooth_filter(img, 0.8, 2), 0.0, 1.0)
        masks[i] = mask
    return images, masks


def write_synth_dataset(out_dir, n: int, size: int = 64, seed: int = 0) -> Path:
    """Write ``n`` synthetic pairs as PGM files plus ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    images, masks = synth_blobs(n, size, seed)
    records = []
    for i, (img, msk) in enumerate(zip(images, masks)):
        stem = f"blob{i:04d}"
        write_pgm(out / "images" / f"{stem}.pgm", img)
        write_pgm(out / "masks" / f"{stem}.pgm", msk)
        records.append(SampleRecord(f"images/{stem}.pgm", f"masks/{stem}.pgm"))
    path = out / "manifest.csv"
    save_manifest(Manifest(records, out), path)
    return path


def dump_augmented(image: np.ndarray, mask: np.ndarray, stem: str, out_dir, cfg: AugmentConfig,
                   count: int = 4, seed: int = 0) -> list[Path]:
    """Write ``<stem>_augN.pgm`` previews of augmented images (rescaled to [0, 1])."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, cfg.seed])
    paths = []
    for i in range(count):
        img, _ = augment_pair(image, mask, cfg, rng)
        lo, hi = float(img.min()), float(img.max())
        view = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
        p = out / f"{stem}_aug{i}.pgm"
        write_pgm(p, view)
        paths.append(p)
    return paths
