"""Dataset formats, synthetic shape data, token-grid pooling, and tensor file IO.

A dataset directory looks like::

    images/0000.ppm     binary PPM (P6), 8-bit RGB
    masks/0000.pgm      binary PGM (P5), 16-bit big-endian; pixel value 0 is
                        void, value k+1 marks the visible region of instance k
    index.json          sample list with per-instance category labels
    vocab.txt           one category name per line

Tensors are stored in a small self-describing binary container (".mcpp"):
magic ``MCPP`` (4 bytes), version u32, ndim u32, ndim x u64 dims (all
little-endian), then row-major little-endian IEEE-754 float64 values.
"""

from __future__ import annotations

import json
import hashlib
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_TEMPLATE = "A photo of {}"

SHAPE_NAMES = ("disk", "square", "triangle")

COLOR_PALETTE = {
    "red": (220, 60, 50),
    "green": (70, 170, 90),
    "blue": (60, 90, 220),
    "yellow": (230, 200, 60),
    "magenta": (200, 70, 200),
    "cyan": (80, 200, 210),
}

BACKGROUND_RGB = (28, 28, 32)


class DataFormatError(ValueError):
    """Malformed dataset file: bad header, truncated payload, bad label, ..."""


# ---------------------------------------------------------------------------
# Vocabulary and samples
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Vocabulary:
    """Ordered category names plus prompt templates with one ``{}`` slot."""

    names: tuple[str, ...]
    templates: tuple[str, ...] = (DEFAULT_TEMPLATE,)

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "templates", tuple(self.templates))
        if not self.names:
            raise ValueError("vocabulary needs at least one category")
        if any(not n for n in self.names):
            raise ValueError("category names must be non-empty")
        if len(set(self.names)) != len(self.names):
            raise ValueError("category names must be unique")
        if not self.templates:
            raise ValueError("at least one prompt template required")
        for t in self.templates:
            if t.count("{}") != 1:
                raise ValueError(f"template {t!r} must contain exactly one '{{}}'")

    def __len__(self) -> int:
        return len(self.names)

    def expand(self, name: str) -> list[str]:
        return [t.format(name) for t in self.templates]

    def digest(self) -> str:
        payload = json.dumps([list(self.names), list(self.templates)])
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class SegmentationSample:
    """One image with per-instance region masks and category labels."""

    image: np.ndarray  # (H, W, 3) uint8
    masks: np.ndarray  # (Q, H, W) float64 in [0, 1]
    labels: np.ndarray  # (Q,) int64 indices into the vocabulary
    sample_id: str = ""

    def validate(self, n_categories: int) -> None:
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError("image must be (H, W, 3)")
        if self.masks.ndim != 3 or self.masks.shape[1:] != self.image.shape[:2]:
            raise ValueError("masks must be (Q, H, W) matching the image")
        if self.masks.shape[0] < 1:
            raise ValueError("need at least one instance")
        if self.masks.shape[0] != self.labels.shape[0]:
            raise ValueError("masks and labels disagree on instance count")
        if not ((self.labels >= 0) & (self.labels < n_categories)).all():
            raise ValueError("labels out of vocabulary range")
        if not ((self.masks >= 0.0) & (self.masks <= 1.0)).all():
            raise ValueError("mask values must lie in [0, 1]")
        if not (self.masks >= 0.5).any(axis=(1, 2)).all():
            raise ValueError("every mask needs at least one pixel >= 0.5")

    def category_raster(self) -> np.ndarray:
        """Per-pixel category id, -1 where no instance covers the pixel.

        Later instances win on overlap, matching the occlusion order used
        by the synthetic generator.
        """
        out = np.full(self.image.shape[:2], -1, dtype=np.int64)
        for mask, label in zip(self.masks, self.labels):
            out[mask >= 0.5] = int(label)
        return out


# ---------------------------------------------------------------------------
# Tensor container
# ---------------------------------------------------------------------------

TENSOR_MAGIC = b"MCPP"
TENSOR_VERSION = 1
_MAX_NDIM = 32


def write_tensor(path, values) -> None:
    """Write an array as float64 to the MCPP container. Bit-exact round trip."""
    arr = np.asarray(values, dtype=np.float64)
    header = TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + arr.astype("<f8", copy=False).tobytes())


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12:
        raise DataFormatError(f"{path}: truncated header")
    if data[:4] != TENSOR_MAGIC:
        raise DataFormatError(f"{path}: bad magic {data[:4]!r}")
    version, ndim = struct.unpack_from("<II", data, 4)
    if version != TENSOR_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    if ndim > _MAX_NDIM:
        raise DataFormatError(f"{path}: implausible ndim {ndim}")
    if len(data) < 12 + 8 * ndim:
        raise DataFormatError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{ndim}Q", data, 12)
    count = 1
    for d in dims:
        count *= d
    payload = data[12 + 8 * ndim:]
    if len(payload) != 8 * count:
        raise DataFormatError(
            f"{path}: payload holds {len(payload)} bytes, dims require {8 * count}"
        )
    values = np.frombuffer(payload, dtype="<f8", count=count)
    return values.astype(np.float64).reshape(dims)


# ---------------------------------------------------------------------------
# PPM / PGM rasters
# ---------------------------------------------------------------------------


def _parse_pnm_header(data: bytes, path, expect_magic: bytes):
    """Return (width, height, maxval, payload_offset) for a binary PNM file."""
    if data[:2] != expect_magic:
        raise DataFormatError(f"{path}: expected {expect_magic!r} header, got {data[:2]!r}")
    fields = []
    i = 2
    while len(fields) < 3:
        if i >= len(data):
            raise DataFormatError(f"{path}: truncated header")
        c = data[i:i + 1]
        if c.isspace():
            i += 1
        elif c == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isdigit():
            j = i
            while j < len(data) and data[j:j + 1].isdigit():
                j += 1
            fields.append(int(data[i:j]))
            i = j
        else:
            raise DataFormatError(f"{path}: unexpected byte {c!r} in header")
    if i >= len(data) or not data[i:i + 1].isspace():
        raise DataFormatError(f"{path}: missing whitespace after maxval")
    width, height, maxval = fields
    return width, height, maxval, i + 1


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("PPM image must be uint8 (H, W, 3)")
    h, w = image.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def read_ppm(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    w, h, maxval, off = _parse_pnm_header(data, path, b"P6")
    if maxval != 255:
        raise DataFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    payload = data[off:]
    if len(payload) != w * h * 3:
        raise DataFormatError(f"{path}: expected {w * h * 3} pixel bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def write_pgm16(path, raster: np.ndarray) -> None:
    raster = np.asarray(raster)
    if raster.dtype != np.uint16 or raster.ndim != 2:
        raise ValueError("PGM raster must be uint16 (H, W)")
    h, w = raster.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + raster.astype(">u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    w, h, maxval, off = _parse_pnm_header(data, path, b"P5")
    if maxval != 65535:
        raise DataFormatError(f"{path}: expected 16-bit maxval 65535, got {maxval}")
    payload = data[off:]
    if len(payload) != w * h * 2:
        raise DataFormatError(f"{path}: expected {w * h * 2} sample bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=">u2").reshape(h, w).astype(np.uint16)


# ---------------------------------------------------------------------------
# Synthetic shape dataset
# ---------------------------------------------------------------------------


def _normalize_colors(colors) -> tuple[tuple[str, tuple[int, int, int]], ...]:
    out = []
    for entry in colors:
        if isinstance(entry, str):
            if entry not in COLOR_PALETTE:
                raise ValueError(f"unknown palette color {entry!r}")
            out.append((entry, COLOR_PALETTE[entry]))
        else:
            name, rgb = entry
            rgb = tuple(int(v) for v in rgb)
            if len(rgb) != 3 or any(not 0 <= v <= 255 for v in rgb):
                raise ValueError(f"bad RGB triple for color {name!r}: {rgb}")
            out.append((str(name), rgb))
    return tuple(out)


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    """Recipe for a deterministic multi-shape dataset.

    Categories are the cross product shapes x colors ("red disk", ...), so a
    seen/unseen split can hold out shape-color pairs while keeping every
    individual shape and color in the training set.
    """

    n_train: int
    n_val: int = 0
    image_size: int = 64
    shapes: tuple[str, ...] = ("disk", "square")
    colors: tuple = (("red", COLOR_PALETTE["red"]), ("blue", COLOR_PALETTE["blue"]))
    shapes_per_image: tuple[int, int] = (1, 3)
    size_range: tuple[float, float] = (0.10, 0.22)  # half-extent / image_size
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "colors", _normalize_colors(self.colors))
        object.__setattr__(self, "shapes_per_image", tuple(self.shapes_per_image))
        object.__setattr__(self, "size_range", tuple(self.size_range))
        if self.n_train < 1 or self.n_val < 0:
            raise ValueError("need n_train >= 1 and n_val >= 0")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        if not self.shapes:
            raise ValueError("need at least one shape")
        for s in self.shapes:
            if s not in SHAPE_NAMES:
                raise ValueError(f"unknown shape {s!r}; choose from {SHAPE_NAMES}")
        if not self.colors:
            raise ValueError("need at least one color")
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi:
            raise ValueError("shapes_per_image must be a range with 1 <= lo <= hi")
        slo, shi = self.size_range
        if not 0.0 < slo <= shi < 0.5:
            raise ValueError("size_range must satisfy 0 < lo <= hi < 0.5")

    def categories(self) -> list[str]:
        return [f"{cname} {shape}" for shape in self.shapes for (cname, _) in self.colors]

    def category_parts(self, idx: int) -> tuple[str, tuple[int, int, int]]:
        shape = self.shapes[idx // len(self.colors)]
        _, rgb = self.colors[idx % len(self.colors)]
        return shape, rgb

    def to_json(self) -> dict:
        return {
            "n_train": self.n_train,
            "n_val": self.n_val,
            "image_size": self.image_size,
            "shapes": list(self.shapes),
            "colors": [[n, list(rgb)] for n, rgb in self.colors],
            "shapes_per_image": list(self.shapes_per_image),
            "size_range": list(self.size_range),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SyntheticDatasetSpec":
        known = {"n_train", "n_val", "image_size", "shapes", "colors",
                 "shapes_per_image", "size_range", "seed"}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown dataset spec keys: {sorted(unknown)}")
        return cls(**obj)


def _rasterize_shape(rng: np.random.Generator, shape: str, size: int,
                     size_range: tuple[float, float] = (0.10, 0.22)) -> np.ndarray:
    """Binary (size, size) mask of one randomly placed shape, never empty."""
    coords = np.arange(size, dtype=np.float64) + 0.5
    xx = coords[None, :]
    yy = coords[:, None]
    for _ in range(100):
        r = rng.uniform(size_range[0], size_range[1]) * size
        cx = rng.uniform(r + 1.0, size - r - 1.0)
        cy = rng.uniform(r + 1.0, size - r - 1.0)
        if shape == "disk":
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        elif shape == "square":
            half = r * np.sqrt(np.pi) / 2.0  # area-matched to the disk
            mask = (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
        elif shape == "triangle":
            a = r * np.sqrt(np.pi / 2.0)
            # apex up: vertices (cx, cy-a), (cx-a, cy+a), (cx+a, cy+a)
            below_apex = yy <= cy + a
            left = (yy - (cy - a)) * a - (xx - cx) * (-2 * a) >= 0
            right = (yy - (cy - a)) * (-a) - (xx - cx) * (-2 * a) <= 0
            mask = below_apex & left & right
        else:
            raise ValueError(f"unknown shape {shape!r}")
        if mask.sum() >= 9:
            return mask.astype(np.float64)
    raise RuntimeError(f"could not place a visible {shape} in {size}px")


def _render_sample(rng, spec: SyntheticDatasetSpec, cat_ids):
    size = spec.image_size
    image = np.empty((size, size, 3), dtype=np.uint8)
    image[:] = BACKGROUND_RGB
    drawn = [(cid, _rasterize_shape(rng, spec.category_parts(cid)[0], size,
                                    spec.size_range))
             for cid in cat_ids]
    # Later instances occlude earlier ones; fully hidden instances are dropped.
    raster = np.zeros((size, size), dtype=np.uint16)
    labels = []
    covered = np.zeros((size, size), dtype=bool)
    for cid, mask in reversed(drawn):
        visible = (mask >= 0.5) & ~covered
        covered |= visible
        if visible.any():
            labels.append((cid, visible))
    labels.reverse()  # back to draw order
    kept = []
    for k, (cid, visible) in enumerate(labels):
        raster[visible] = k + 1
        image[visible] = spec.category_parts(cid)[1]
        kept.append(int(cid))
    return image, raster, kept


def generate_synthetic_dataset(spec: SyntheticDatasetSpec, out_dir) -> dict:
    """Write a dataset directory; byte-identical for identical specs.

    Returns the index structure that was written to index.json.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(spec.seed)
    categories = spec.categories()
    n_cat = len(categories)
    n_total = spec.n_train + spec.n_val
    lo, hi = spec.shapes_per_image
    counts = rng.integers(lo, hi + 1, size=n_total)
    total_instances = int(counts.sum())
    if total_instances < n_cat:
        raise ValueError(
            f"{total_instances} instances cannot cover {n_cat} categories; "
            "increase image count or shapes_per_image"
        )
    # Guarantee every category appears at least once across the split.
    slots = np.concatenate([
        rng.permutation(n_cat),
        rng.integers(0, n_cat, size=total_instances - n_cat),
    ])
    rng.shuffle(slots)

    samples = []
    pos = 0
    for i in range(n_total):
        cat_ids = slots[pos:pos + counts[i]]
        pos += int(counts[i])
        while True:
            image, raster, labels = _render_sample(rng, spec, cat_ids)
            if labels:
                break
        sid = f"{i:04d}"
        write_ppm(out / "images" / f"{sid}.ppm", image)
        write_pgm16(out / "masks" / f"{sid}.pgm", raster)
        samples.append({
            "id": sid,
            "split": "train" if i < spec.n_train else "val",
            "image": f"images/{sid}.ppm",
            "mask": f"masks/{sid}.pgm",
            "labels": labels,
        })

    index = {
        "version": 1,
        "image_size": spec.image_size,
        "categories": categories,
        "spec": spec.to_json(),
        "samples": samples,
    }
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    (out / "vocab.txt").write_text("".join(f"{c}\n" for c in categories))
    return index


def load_dataset(path, split: str = "all"):
    """Load a dataset directory -> (samples, vocabulary).

    ``split`` selects "train", "val", or "all"; ordering follows index.json.
    """
    root = Path(path)
    if split not in ("all", "train", "val"):
        raise ValueError(f"unknown split {split!r}")
    vocab_file = root / "vocab.txt"
    if not vocab_file.exists():
        raise DataFormatError(f"{vocab_file}: missing")
    names = [line.strip() for line in vocab_file.read_text().splitlines() if line.strip()]
    vocab = Vocabulary(tuple(names))

    index_file = root / "index.json"
    if not index_file.exists():
        raise DataFormatError(f"{index_file}: missing")
    try:
        index = json.loads(index_file.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{index_file}: invalid JSON ({exc})") from exc

    samples = []
    for rec in index.get("samples", []):
        if split != "all" and rec.get("split") != split:
            continue
        sid = rec.get("id", "?")
        image = read_ppm(root / rec["image"])
        raster = read_pgm16(root / rec["mask"])
        if raster.shape != image.shape[:2]:
            raise DataFormatError(f"sample {sid}: mask shape {raster.shape} "
                                  f"does not match image {image.shape[:2]}")
        labels = np.asarray(rec["labels"], dtype=np.int64)
        n_inst = len(labels)
        if n_inst < 1:
            raise DataFormatError(f"sample {sid}: no instances listed")
        if raster.max(initial=0) > n_inst:
            raise DataFormatError(f"sample {sid}: raster references instance "
                                  f"{int(raster.max())} but only {n_inst} labeled")
        bad = labels[(labels < 0) | (labels >= len(vocab))]
        if bad.size:
            raise DataFormatError(f"sample {sid}: label {int(bad[0])} outside "
                                  f"vocabulary of {len(vocab)} categories")
        masks = (raster[None, :, :] == np.arange(1, n_inst + 1)[:, None, None])
        for k in range(n_inst):
            if not masks[k].any():
                raise DataFormatError(f"sample {sid}: instance {k} has no pixels")
        samples.append(SegmentationSample(
            image=image,
            masks=masks.astype(np.float64),
            labels=labels,
            sample_id=str(sid),
        ))
    return samples, vocab


# ---------------------------------------------------------------------------
# Raster -> token grid
# ---------------------------------------------------------------------------


def _overlap_matrix(n_cells: int, n_pixels: int) -> np.ndarray:
    """(n_cells, n_pixels) fractional overlap between cell and pixel intervals."""
    edges = np.arange(n_cells + 1, dtype=np.float64) * (n_pixels / n_cells)
    lo = edges[:-1][:, None]
    hi = edges[1:][:, None]
    px = np.arange(n_pixels, dtype=np.float64)[None, :]
    return np.clip(np.minimum(hi, px + 1.0) - np.maximum(lo, px), 0.0, None)


def mask_to_token_grid(mask: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Area-weighted average of mask values over each grid cell.

    Output is a flat row of length grid_h * grid_w in [0, 1]; the total mass
    sum(cell * cell_pixel_area) equals the pixel-level mask sum. An all-zero
    result signals a mask the caller should drop.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ValueError("mask must be 2-D")
    if mask.min() < -1e-9 or mask.max() > 1.0 + 1e-9:
        raise ValueError("mask values must lie in [0, 1]")
    g_h, g_w = grid
    if g_h < 1 or g_w < 1:
        raise ValueError("grid dims must be positive")
    h, w = mask.shape
    rows = _overlap_matrix(g_h, h)
    cols = _overlap_matrix(g_w, w)
    sums = rows @ mask @ cols.T
    cell_area = (h / g_h) * (w / g_w)
    return np.clip(sums / cell_area, 0.0, 1.0).reshape(-1)


def build_token_masks(masks: np.ndarray, grid: tuple[int, int]):
    """Pool (Q, H, W) masks to the token grid, dropping empty rows.

    Returns (values, kept) where values is (Q_kept, N) and kept lists the
    surviving input indices. Dropped instances trigger a warning.
    """
    values = []
    kept = []
    for q in range(masks.shape[0]):
        row = mask_to_token_grid(masks[q], grid)
        if row.max() <= 0.0:
            warnings.warn(f"instance {q} vanished on the {grid} token grid; dropped")
            continue
        values.append(row)
        kept.append(q)
    if kept:
        return np.stack(values), kept
    return np.zeros((0, grid[0] * grid[1])), kept
