"""Source/target domain datasets: synthetic glyph pairs, image folders, subsets, persistence.

Every dataset is held as one float32 array ``x`` of shape (N, H, W, C) with values
in [0, 1] and an int64 label array ``y``.  Arrays are frozen (read-only) after
construction so datasets can be shared between workers.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

SPLITS = ("train", "test", "all")
SHIFT_KINDS = ("color_inversion", "background_noise", "channel_permutation", "identity")

_BLOB_MAGIC = b"NTPD"
_BLOB_VERSION = 1


@dataclass(frozen=True)
class LabeledSample:
    x: np.ndarray
    y: int


@dataclass(frozen=True, eq=False)
class DomainDataset:
    name: str
    x: np.ndarray
    y: np.ndarray
    label_set: tuple
    split: str = "all"
    seed_provenance: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.float32)
        y = np.ascontiguousarray(self.y, dtype=np.int64)
        if x.ndim != 4:
            raise ValueError(f"x must have shape (N, H, W, C), got {x.shape}")
        if y.shape != (x.shape[0],):
            raise ValueError(f"y must have shape ({x.shape[0]},), got {y.shape}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if not np.all(np.isfinite(x)) or (x.size and (x.min() < 0.0 or x.max() > 1.0)):
            raise ValueError("pixel values must be finite and within [0, 1]")
        if y.size and (y.min() < 0 or y.max() >= len(self.label_set)):
            raise ValueError("labels must index into label_set")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "label_set", tuple(self.label_set))

    def __len__(self) -> int:
        return int(self.x.shape[0])

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(self.x[i], int(self.y[i]))

    @property
    def samples(self) -> Iterator[LabeledSample]:
        return (self[i] for i in range(len(self)))

    @property
    def num_classes(self) -> int:
        return len(self.label_set)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.x.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)

    def take(self, indices, *, split: str | None = None, seed: int | None = None,
             name: str | None = None) -> "DomainDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return DomainDataset(
            name=name or self.name,
            x=self.x[idx],
            y=self.y[idx],
            label_set=self.label_set,
            split=split or self.split,
            seed_provenance=self.seed_provenance if seed is None else seed,
            meta=dict(self.meta),
        )


@dataclass(frozen=True)
class SubsetSpec:
    """Size of a subset: an absolute ``count`` or a fraction in (0, 1]."""

    count: int | float
    stratified: bool = True
    seed: int = 0

    def resolve(self, n: int) -> int:
        c = self.count
        if isinstance(c, float):
            if not 0.0 < c <= 1.0:
                raise ValueError(f"fractional count must lie in (0, 1], got {c}")
            return max(1, int(round(c * n)))
        c = int(c)
        if c < 1:
            raise ValueError(f"count must be positive, got {c}")
        return c


@dataclass(frozen=True)
class SyntheticPairConfig:
    num_classes: int = 10
    per_class: int = 200
    image_size: tuple[int, int, int] = (32, 32, 3)
    shift: str = "color_inversion"
    seed: int = 0
    pixel_noise: float = 0.06
    name: str = "glyphs"

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "per_class": self.per_class,
            "image_size": list(self.image_size),
            "shift": self.shift,
            "seed": self.seed,
            "pixel_noise": self.pixel_noise,
            "name": self.name,
        }


# 5x7 bitmaps for ten digit-like glyphs; further classes use random bitmaps.
_DIGITS = (
    ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
)


def glyph_bitmaps(num_classes: int) -> list[np.ndarray]:
    out = [np.array([[c == "1" for c in row] for row in g], dtype=np.float32) for g in _DIGITS]
    rng = np.random.default_rng(12345)
    while len(out) < num_classes:
        cand = (rng.random((7, 5)) < 0.45).astype(np.float32)
        if cand.sum() >= 8 and all(np.abs(cand - b).sum() >= 6 for b in out):
            out.append(cand)
    return out[:num_classes]


def _render_alpha(bitmap: np.ndarray, hw: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    h, w = hw
    up = 8
    big = np.kron(bitmap, np.ones((up, up), dtype=np.float32))
    big = np.pad(big, up, mode="constant")
    thick = rng.uniform(0.0, 2.5)
    if thick > 0.3:
        big = ndimage.grey_dilation(big, size=(1 + int(2 * thick),) * 2)
    bh, bw = big.shape
    scale = rng.uniform(0.5, 0.8) * h / (7 * up)
    angle = np.deg2rad(rng.uniform(-12.0, 12.0))
    shear = rng.uniform(-0.15, 0.15)
    c, s = np.cos(angle), np.sin(angle)
    forward = scale * np.array([[c, -s], [s, c]]) @ np.array([[1.0, shear], [0.0, 1.0]])
    inv = np.linalg.inv(forward)
    centre_out = np.array([h / 2 + rng.uniform(-0.08, 0.08) * h,
                           w / 2 + rng.uniform(-0.08, 0.08) * w])
    offset = np.array([bh / 2, bw / 2]) - inv @ centre_out
    alpha = ndimage.affine_transform(big, inv, offset=offset, output_shape=(h, w), order=1)
    alpha = ndimage.gaussian_filter(alpha, sigma=rng.uniform(0.3, 0.9))
    return np.clip(alpha, 0.0, 1.0)


def _source_style(alpha: np.ndarray, channels: int, noise: float,
                  rng: np.random.Generator) -> np.ndarray:
    fg = np.array([rng.uniform(0.7, 1.0), rng.uniform(0.45, 0.85), rng.uniform(0.1, 0.5)])
    bg = np.array([rng.uniform(0.0, 0.3), rng.uniform(0.05, 0.35), rng.uniform(0.1, 0.4)])
    if channels != 3:
        fg, bg = np.full(channels, fg.mean()), np.full(channels, bg.mean())
    img = alpha[..., None] * fg + (1.0 - alpha[..., None]) * bg
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _texture(shape: tuple[int, int, int], rng: np.random.Generator) -> np.ndarray:
    h, w, c = shape
    tex = ndimage.gaussian_filter(rng.random((h, w, c)), sigma=(2.0, 2.0, 0.0))
    tex = (tex - tex.min()) / max(tex.max() - tex.min(), 1e-6)
    return tex


def apply_shift(img: np.ndarray, alpha: np.ndarray, kind: str,
                rng: np.random.Generator) -> np.ndarray:
    if kind == "identity":
        return img
    if kind == "color_inversion":
        return 1.0 - img
    if kind == "channel_permutation":
        c = img.shape[-1]
        return img[..., np.roll(np.arange(c), 1)]
    if kind == "background_noise":
        bg = np.clip(0.25 + 0.6 * _texture(img.shape, rng), 0.0, 1.0)
        a = alpha[..., None]
        return np.clip(a * img + (1.0 - a) * bg, 0.0, 1.0)
    raise ValueError(f"unknown shift kind {kind!r}; expected one of {SHIFT_KINDS}")


def _render_domain(cfg: SyntheticPairConfig, seed_seq: np.random.SeedSequence, shift: str):
    h, w, c = cfg.image_size
    bitmaps = glyph_bitmaps(cfg.num_classes)
    n = cfg.num_classes * cfg.per_class
    x = np.empty((n, h, w, c), dtype=np.float32)
    y = np.repeat(np.arange(cfg.num_classes), cfg.per_class)
    order = np.random.default_rng(seed_seq.spawn(1)[0]).permutation(n)
    y = y[order]
    children = seed_seq.spawn(n)
    for i in range(n):
        rng = np.random.default_rng(children[i])
        alpha = _render_alpha(bitmaps[y[i]], (h, w), rng)
        img = _source_style(alpha, c, cfg.pixel_noise, rng)
        x[i] = apply_shift(img, alpha, shift, rng)
    return x, y


def generate_synthetic_domain_pair(cfg: SyntheticPairConfig) -> tuple[DomainDataset, DomainDataset]:
    """Render a (source, target) pair of glyph domains differing by ``cfg.shift``.

    Both domains share the label set.  The target is rendered from its own seed
    stream and then shifted, except for ``identity`` where it reuses the source
    render so the two domains coincide sample for sample.
    """
    if cfg.num_classes < 2:
        raise ValueError("need at least 2 classes")
    if cfg.per_class < 4:
        raise ValueError("need at least 4 samples per class")
    if cfg.shift not in SHIFT_KINDS:
        raise ValueError(f"unknown shift kind {cfg.shift!r}; expected one of {SHIFT_KINDS}")
    root = np.random.SeedSequence([cfg.seed, 0x5EED])
    src_seq, tgt_seq = root.spawn(2)
    labels = tuple(str(i) for i in range(cfg.num_classes))
    meta = {"generator": cfg.to_dict()}
    xs, ys = _render_domain(cfg, src_seq, "identity")
    if cfg.shift == "identity":
        xt, yt = xs, ys
    else:
        xt, yt = _render_domain(cfg, tgt_seq, cfg.shift)
    source = DomainDataset(f"{cfg.name}-source", xs, ys, labels, "all", cfg.seed,
                           {**meta, "role": "source"})
    target = DomainDataset(f"{cfg.name}-{cfg.shift}", xt, yt, labels, "all", cfg.seed,
                           {**meta, "role": "target"})
    return source, target


def _round_robin_order(y: np.ndarray, num_classes: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    per_class = [rng.permutation(np.flatnonzero(y == c)) for c in range(num_classes)]
    depth = max((len(p) for p in per_class), default=0)
    order = []
    for r in range(depth):
        for c in rng.permutation(num_classes):
            if r < len(per_class[c]):
                order.append(per_class[c][r])
    return np.asarray(order, dtype=np.int64)


def stratified_subset(ds: DomainDataset, spec: SubsetSpec) -> DomainDataset:
    """Draw a seeded subset; subsets of growing size from one seed are nested.

    Selection is a prefix of a fixed seeded ordering (round-robin across classes
    when stratified), so a size-m subset is contained in every larger one.
    """
    n = spec.resolve(len(ds))
    if n > len(ds):
        raise ValueError(f"subset size {n} exceeds dataset size {len(ds)}")
    if spec.stratified:
        present = int(np.count_nonzero(ds.class_counts()))
        if n < present:
            raise ValueError(f"stratified subset of {n} cannot cover {present} classes")
        order = _round_robin_order(ds.y, ds.num_classes, spec.seed)
    else:
        order = np.random.default_rng(spec.seed).permutation(len(ds))
    chosen = np.sort(order[:n])
    return ds.take(chosen, seed=spec.seed)


def train_test_split(ds: DomainDataset, test_fraction: float = 0.2,
                     seed: int = 0) -> tuple[DomainDataset, DomainDataset]:
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    test_idx = []
    for c in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.y == c))
        test_idx.extend(idx[: int(round(test_fraction * len(idx)))])
    mask = np.zeros(len(ds), dtype=bool)
    mask[np.asarray(test_idx, dtype=np.int64)] = True
    train = ds.take(np.flatnonzero(~mask), split="train", seed=seed)
    test = ds.take(np.flatnonzero(mask), split="test", seed=seed)
    return train, test


def log_spaced_sizes(n_min: int, n_max: int, k: int) -> list[int]:
    """``k`` strictly increasing integers geometrically spaced from n_min to n_max.

    Interior points are rounded up; collisions are pushed up to the next free
    integer (and pulled back below the upper endpoint when needed).
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    if not 1 <= n_min < n_max:
        raise ValueError(f"need 1 <= n_min < n_max, got ({n_min}, {n_max})")
    if k > n_max - n_min + 1:
        raise ValueError(f"cannot fit {k} distinct sizes in [{n_min}, {n_max}]")
    raw = np.logspace(math.log10(n_min), math.log10(n_max), k)
    sizes = [int(math.ceil(v - 1e-9)) for v in raw]
    sizes[0], sizes[-1] = n_min, n_max
    for i in range(1, k):
        sizes[i] = max(sizes[i], sizes[i - 1] + 1)
    sizes[-1] = n_max
    for i in range(k - 2, -1, -1):
        sizes[i] = min(sizes[i], sizes[i + 1] - 1)
    return sizes


_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".ppm", ".pgm"}


def load_image_domain(source: str | Path, resize: Sequence[int] = (32, 32, 3)) -> DomainDataset:
    """Load a class-per-subdirectory image folder, an ``.npz`` archive, or a saved domain."""
    from PIL import Image, UnidentifiedImageError

    path = Path(source)
    if not path.exists():
        raise FileNotFoundError(f"no such dataset: {path}")
    h, w, c = (int(v) for v in resize)
    if path.is_dir() and (path / "manifest.json").exists():
        return load_domain(path)
    if path.suffix == ".npz":
        with np.load(path) as arc:
            x = np.asarray(arc["x"], dtype=np.float32)
            y = np.asarray(arc["y"], dtype=np.int64)
            labels = tuple(str(v) for v in arc["label_set"]) if "label_set" in arc else \
                tuple(str(i) for i in range(int(y.max()) + 1))
        if x.max() > 1.0:
            x = x / 255.0
        if x.ndim == 3:
            x = x[..., None]
        x = _resize_array(x, (h, w, c))
        return DomainDataset(path.stem, x, y, labels, "all", None, {"path": str(path)})
    if not path.is_dir():
        raise ValueError(f"unrecognised dataset source: {path}")

    classes = sorted(p.name for p in path.iterdir() if p.is_dir())
    if not classes:
        raise ValueError(f"{path} has no class subdirectories")
    xs, ys = [], []
    for label, cls in enumerate(classes):
        files = sorted(f for f in (path / cls).iterdir() if f.is_file())
        if not files:
            raise ValueError(f"class {cls!r} has no images")
        for f in files:
            if f.suffix.lower() not in _IMAGE_SUFFIXES:
                raise ValueError(f"not an image file: {f}")
            try:
                with Image.open(f) as im:
                    im = im.convert("L" if c == 1 else "RGB")
                    im = im.resize((w, h), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except UnidentifiedImageError as exc:
                raise ValueError(f"not an image file: {f}") from exc
            if arr.ndim == 2:
                arr = np.repeat(arr[..., None], c, axis=-1)
            xs.append(arr[..., :c])
            ys.append(label)
    return DomainDataset(path.name, np.stack(xs), np.asarray(ys), tuple(classes), "all", None,
                         {"path": str(path)})


def _resize_array(x: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    h, w, c = shape
    if x.shape[-1] == 1 and c > 1:
        x = np.repeat(x, c, axis=-1)
    x = x[..., :c]
    if x.shape[1:3] != (h, w):
        zoom = (1.0, h / x.shape[1], w / x.shape[2], 1.0)
        x = ndimage.zoom(x, zoom, order=1)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def save_domain(ds: DomainDataset, directory: str | Path) -> Path:
    """Write ``manifest.json`` and ``data.bin`` (little-endian blob).

    Blob layout: magic ``NTPD``, uint32 version, uint32 N, H, W, C, then
    N*H*W*C float32 pixels in row-major order, then N uint16 labels.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n, h, w, c = ds.x.shape
    if ds.num_classes > np.iinfo(np.uint16).max:
        raise ValueError("too many classes for uint16 labels")
    with open(d / "data.bin", "wb") as fh:
        fh.write(_BLOB_MAGIC)
        fh.write(struct.pack("<5I", _BLOB_VERSION, n, h, w, c))
        fh.write(ds.x.astype("<f4", copy=False).tobytes(order="C"))
        fh.write(ds.y.astype("<u2").tobytes())
    manifest = {
        "name": ds.name,
        "label_set": list(ds.label_set),
        "split": ds.split,
        "seed": ds.seed_provenance,
        "meta": ds.meta,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def load_domain(directory: str | Path) -> DomainDataset:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    raw = (d / "data.bin").read_bytes()
    if raw[:4] != _BLOB_MAGIC:
        raise ValueError(f"{d / 'data.bin'} is not a dataset blob")
    version, n, h, w, c = struct.unpack_from("<5I", raw, 4)
    if version != _BLOB_VERSION:
        raise ValueError(f"unsupported blob version {version}")
    off = 4 + 20
    count = n * h * w * c
    x = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(n, h, w, c)
    y = np.frombuffer(raw, dtype="<u2", count=n, offset=off + 4 * count)
    return DomainDataset(manifest["name"], x.astype(np.float32), y.astype(np.int64),
                         tuple(manifest["label_set"]), manifest["split"], manifest["seed"],
                         manifest.get("meta", {}))
