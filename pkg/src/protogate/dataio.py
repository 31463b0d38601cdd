"""Dataset and configuration I/O.

The embedding interchange format ("EMB1") is bit-exact and trivially
writable from any ecosystem:

    magic "EMB1" | u32 version=1 | u32 n | u32 d | n*d little-endian f32, row-major

Labels travel in a sibling CSV with header `index,label_id,class_name`.
Values are stored as f32 on disk and widened to f64 in memory, so a
dataset loaded from disk always round-trips bitwise.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, FormatError, TruncationError, ValidationError

EMB_MAGIC = b"EMB1"
EMB_VERSION = 1
EMB_HEADER = struct.Struct("<4sIII")

UNKNOWN_LABEL = -1


# ---------------------------------------------------------------------------
# Embedding datasets
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingDataset:
    """Labeled dense feature vectors, the universal currency of the pipeline.

    vectors: (n, d) float64, values f32-representable when file-backed
    labels:  (n,) int64, dense 0-based class ids; -1 marks open-set truth
    class_names: id -> human name
    view: "full" for whole-image features, "context" for masked-image features
    """

    vectors: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    view: str = "full"

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def validate(self, allow_unknown: bool = False) -> "EmbeddingDataset":
        if self.vectors.ndim != 2:
            raise ValidationError(f"vectors must be 2-D, got ndim={self.vectors.ndim}")
        if not np.all(np.isfinite(self.vectors)):
            raise ValidationError("vectors contain non-finite values")
        if self.labels.shape != (self.n,):
            raise ValidationError(
                f"labels shape {self.labels.shape} does not match n={self.n}"
            )
        if self.view not in ("full", "context"):
            raise ValidationError(f"unknown view {self.view!r}")
        if self.n == 0:
            return self
        lo = int(self.labels.min())
        if lo < (UNKNOWN_LABEL if allow_unknown else 0):
            raise ValidationError(f"negative label {lo}")
        known = self.labels[self.labels >= 0]
        if known.size:
            if int(known.max()) >= len(self.class_names):
                raise ValidationError(
                    f"label {int(known.max())} out of range for "
                    f"{len(self.class_names)} classes"
                )
            if not allow_unknown:
                present = np.unique(known)
                expected = np.arange(len(self.class_names))
                if present.size != expected.size or not np.array_equal(present, expected):
                    raise ValidationError(
                        "class id set is not contiguous from 0 "
                        f"(present: {present.tolist()})"
                    )
        return self

    def take(self, rows: np.ndarray) -> "EmbeddingDataset":
        """New dataset holding the given rows (copies)."""
        return EmbeddingDataset(
            vectors=self.vectors[rows].copy(),
            labels=self.labels[rows].copy(),
            class_names=list(self.class_names),
            view=self.view,
        )


def check_paired_views(full: EmbeddingDataset, context: EmbeddingDataset) -> None:
    """Verify two views describe the same corpus: same n, labels, ordering."""
    if full.n != context.n:
        raise ValidationError(f"paired views differ in n: {full.n} vs {context.n}")
    if not np.array_equal(full.labels, context.labels):
        raise ValidationError("paired views disagree on labels/ordering")
    if full.class_names != context.class_names:
        raise ValidationError("paired views disagree on class names")


def save_vectors(vectors: np.ndarray, path) -> None:
    """Write a raw EMB1 file (no labels)."""
    arr = np.ascontiguousarray(vectors, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"EMB1 payload must be 2-D, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("refusing to write non-finite values")
    n, d = arr.shape
    with open(path, "wb") as f:
        f.write(EMB_HEADER.pack(EMB_MAGIC, EMB_VERSION, n, d))
        f.write(arr.astype("<f4").tobytes())


def load_vectors(path) -> np.ndarray:
    """Read a raw EMB1 file into an (n, d) float64 array."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < EMB_HEADER.size:
        raise TruncationError(f"{path}: file shorter than the 16-byte header")
    magic, version, n, d = EMB_HEADER.unpack_from(blob)
    if magic != EMB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != EMB_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    payload = blob[EMB_HEADER.size :]
    expected = 4 * n * d
    if len(payload) != expected:
        raise TruncationError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    flat = np.frombuffer(payload, dtype="<f4")
    arr = flat.astype(np.float64).reshape(n, d)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: payload contains non-finite values")
    return arr


def default_labels_path(emb_path) -> Path:
    return Path(emb_path).with_suffix(".csv")


def save_labels(labels: np.ndarray, class_names: list[str], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "label_id", "class_name"])
        for i, lab in enumerate(labels.tolist()):
            name = class_names[lab] if lab >= 0 else "<unknown>"
            w.writerow([i, lab, name])


def load_labels(path, allow_unknown: bool = False) -> tuple[np.ndarray, list[str]]:
    """Read an `index,label_id,class_name` CSV.

    Returns (labels, class_names). Known ids must be dense from 0; with
    allow_unknown, -1 rows are accepted and gaps in the id range get
    placeholder names (evaluation sets need not mention every class).
    """
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != [
            "index",
            "label_id",
            "class_name",
        ]:
            raise FormatError(f"{path}: expected header index,label_id,class_name")
        for row in reader:
            if not row:
                continue
            rows.append(row)
    labels = np.empty(len(rows), dtype=np.int64)
    names: dict[int, str] = {}
    for i, row in enumerate(rows):
        if len(row) < 3:
            raise FormatError(f"{path}: malformed row {i}: {row!r}")
        try:
            idx = int(row[0])
            lab = int(row[1])
        except ValueError as e:
            raise FormatError(f"{path}: non-integer field in row {i}") from e
        if idx != i:
            raise ValidationError(f"{path}: row {i} carries index {idx}")
        if lab < (UNKNOWN_LABEL if allow_unknown else 0):
            raise ValidationError(f"{path}: bad label {lab} in row {i}")
        if lab >= 0:
            prev = names.setdefault(lab, row[2])
            if prev != row[2]:
                raise ValidationError(
                    f"{path}: class {lab} named both {prev!r} and {row[2]!r}"
                )
        labels[i] = lab
    if names:
        top = max(names)
        missing = [c for c in range(top + 1) if c not in names]
        if missing and not allow_unknown:
            raise ValidationError(f"{path}: class ids not contiguous, missing {missing}")
        class_names = [names.get(c, f"class_{c}") for c in range(top + 1)]
    else:
        class_names = []
    return labels, class_names


def load_embeddings(
    emb_path, labels_path=None, view: str = "full", allow_unknown: bool = False
) -> EmbeddingDataset:
    """Load an EMB1 file plus its label CSV into a validated dataset."""
    vectors = load_vectors(emb_path)
    if labels_path is None:
        labels_path = default_labels_path(emb_path)
    labels, class_names = load_labels(labels_path, allow_unknown=allow_unknown)
    if labels.shape[0] != vectors.shape[0]:
        raise ValidationError(
            f"{labels_path}: {labels.shape[0]} label rows for {vectors.shape[0]} vectors"
        )
    ds = EmbeddingDataset(vectors, labels, class_names, view=view)
    return ds.validate(allow_unknown=allow_unknown)


def save_embeddings(
    ds: EmbeddingDataset, emb_path, labels_path=None, allow_unknown: bool = False
) -> None:
    """Inverse of load_embeddings (bitwise round trip for f32-exact data)."""
    ds.validate(allow_unknown=allow_unknown)
    save_vectors(ds.vectors, emb_path)
    if labels_path is None:
        labels_path = default_labels_path(emb_path)
    save_labels(ds.labels, ds.class_names, labels_path)


# ---------------------------------------------------------------------------
# Raster images and the center-mask utility
# ---------------------------------------------------------------------------


@dataclass
class RasterImage:
    """8-bit raster image, (height, width, channels) with channels 1 or 3."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValidationError(f"bad image shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValidationError("image dimensions must be >= 1")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def load_png(path) -> RasterImage:
    try:
        im = Image.open(path)
    except Exception as e:
        raise FormatError(f"{path}: not a decodable image: {e}") from e
    with im:
        if im.format != "PNG":
            raise FormatError(f"{path}: only PNG input is supported, got {im.format}")
        mode = "L" if im.mode in ("L", "1", "I;16") else "RGB"
        arr = np.asarray(im.convert(mode), dtype=np.uint8)
    return RasterImage(arr)


def save_png(img: RasterImage, path) -> None:
    px = img.pixels[:, :, 0] if img.channels == 1 else img.pixels
    Image.fromarray(px).save(path, format="PNG")


def mask_center(img: RasterImage, gamma: int) -> RasterImage:
    """Zero out the gamma x gamma square centered on the image.

    The center is (floor(w/2), floor(h/2)); the square spans
    [c - gamma//2, c + ceil(gamma/2)) on each axis, clipped to the image.
    All other pixels are copied unchanged.
    """
    if gamma < 1:
        raise ValidationError(f"gamma must be >= 1, got {gamma}")
    h, w = img.height, img.width
    cy, cx = h // 2, w // 2
    y0, y1 = max(0, cy - gamma // 2), min(h, cy + (gamma + 1) // 2)
    x0, x1 = max(0, cx - gamma // 2), min(w, cx + (gamma + 1) // 2)
    out = img.pixels.copy()
    out[y0:y1, x0:x1, :] = 0
    return RasterImage(out)


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Hyperparameters for a pipeline run. A run is reproducible from
    (seed, config); CLI flags override file values which override defaults."""

    k: int = 4                  # representatives per class
    beta: int = 32              # context prototype count
    gamma: int = 96             # mask size, pixels
    threshold: float = 0.0021   # open-set gate
    lr_main: float = 5e-5
    lr_classifier: float = 1e-4
    batch_size: int = 32
    weight_decay: float = 1e-5
    epochs: int = 17
    lr_decay_epoch: int = 8     # decay kicks in after this many epochs
    lr_decay_factor: float = 0.1
    stage1_epochs: int = 5      # classifier-only warmup epochs
    mixup_alpha: float = 0.4
    seed: int = 0

    def validate(self) -> "RunConfig":
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if self.beta < 1:
            raise ValidationError("beta must be >= 1")
        if self.gamma < 1:
            raise ValidationError("gamma must be >= 1")
        if self.lr_main <= 0 or self.lr_classifier <= 0:
            raise ValidationError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if self.lr_decay_epoch < 0:
            raise ValidationError("lr_decay_epoch must be >= 0")
        if self.lr_decay_factor <= 0:
            raise ValidationError("lr_decay_factor must be > 0")
        if self.stage1_epochs < 0:
            raise ValidationError("stage1_epochs must be >= 0")
        if self.mixup_alpha <= 0:
            raise ValidationError("mixup_alpha must be > 0")
        if self.seed < 0:
            raise ValidationError("seed must be >= 0")
        return self

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        """Parse a flat key=value config file ('#' starts a comment)."""
        values = {}
        types = {f.name: f.type for f in fields(cls)}
        with open(path) as f:
            for lineno, raw in enumerate(f, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise FormatError(f"{path}:{lineno}: expected key=value")
                key, _, value = line.partition("=")
                key, value = key.strip(), value.strip()
                if key not in types:
                    raise ValidationError(f"{path}:{lineno}: unknown key {key!r}")
                caster = int if types[key] == "int" else float
                try:
                    values[key] = caster(value)
                except ValueError as e:
                    raise FormatError(f"{path}:{lineno}: bad value for {key!r}") from e
        return cls(**values).validate()

    def with_overrides(self, **kwargs) -> "RunConfig":
        """Copy with the non-None kwargs replaced."""
        updates = {k: v for k, v in kwargs.items() if v is not None}
        return replace(self, **updates).validate()

    def canonical(self) -> str:
        """Stable key=value rendering, used for config hashing."""
        return "\n".join(
            f"{f.name}={getattr(self, f.name)!r}" for f in fields(self)
        )

    def to_file(self, path) -> None:
        with open(path, "w") as f:
            for fld in fields(self):
                f.write(f"{fld.name} = {getattr(self, fld.name)}\n")


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def split_batches(ds: EmbeddingDataset, batch_size: int, seed) -> list[np.ndarray]:
    """Seeded permutation of all row indices, chunked into consecutive
    batches. The last batch may be short. Deterministic for a fixed seed."""
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(ds.n)
    return [perm[i : i + batch_size] for i in range(0, ds.n, batch_size)]
