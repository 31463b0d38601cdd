"""Binary container for trained model parts.

Same spirit as the embedding format: a little-endian, magic-tagged layout
("EMS1") that any ecosystem can write. The file is a flat set of named
sections; each section is an f64 array, an i64 array, or a UTF-8 string.
Sections are sorted by name on write, so identical contents produce
identical bytes.

    magic "EMS1" | u32 version=1 | u32 section_count
    per section:
        u32 name_len | name utf-8
        u8 kind (0 = f64 array, 1 = i64 array, 2 = utf8)
        arrays: u32 ndim | ndim x u32 dims | payload little-endian
        utf8:   u32 byte_len | bytes

Parameters are stored at full f64 width: these are training artifacts and
must round-trip bitwise. Class prototype banks are exported as embedding
files instead (see save_bank), so external tools can read them.
"""

from __future__ import annotations

import struct

import numpy as np

from . import dataio
from .alignment import Projector, PrototypeBank
from .context import ContextDictionary, FusionHead
from .errors import DataError, FormatError, TruncationError, ValidationError

EMS_MAGIC = b"EMS1"
EMS_VERSION = 1

KIND_F64 = 0
KIND_I64 = 1
KIND_UTF8 = 2

# every typed file carries its kind so mixed-up paths fail loudly
KIND_SECTION = "container_kind"

_U32 = struct.Struct("<I")
_U8 = struct.Struct("<B")


def write_container(path, sections: dict) -> None:
    """Write named sections; values are float arrays, int arrays, or str."""
    blobs = [EMS_MAGIC, _U32.pack(EMS_VERSION), _U32.pack(len(sections))]
    for name in sorted(sections):
        value = sections[name]
        raw_name = name.encode("utf-8")
        blobs.append(_U32.pack(len(raw_name)))
        blobs.append(raw_name)
        if isinstance(value, str):
            payload = value.encode("utf-8")
            blobs.append(_U8.pack(KIND_UTF8))
            blobs.append(_U32.pack(len(payload)))
            blobs.append(payload)
            continue
        arr = np.asarray(value)
        if arr.dtype.kind in "iu":
            kind, dtype = KIND_I64, "<i8"
        elif arr.dtype.kind == "f":
            kind, dtype = KIND_F64, "<f8"
            if not np.all(np.isfinite(arr)):
                raise ValidationError(
                    f"section {name!r} contains non-finite values"
                )
        else:
            raise ValidationError(
                f"section {name!r} has unsupported dtype {arr.dtype}"
            )
        blobs.append(_U8.pack(kind))
        blobs.append(_U32.pack(arr.ndim))
        for dim in arr.shape:
            blobs.append(_U32.pack(dim))
        blobs.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(blobs))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncationError(
                f"{self.path}: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.blob)}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u8(self) -> int:
        return _U8.unpack(self.take(1))[0]


def read_container(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    magic = r.take(4)
    if magic != EMS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    version = r.u32()
    if version != EMS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    count = r.u32()
    sections: dict = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        kind = r.u8()
        if kind == KIND_UTF8:
            sections[name] = r.take(r.u32()).decode("utf-8")
            continue
        if kind not in (KIND_F64, KIND_I64):
            raise FormatError(f"{path}: section {name!r} has bad kind {kind}")
        ndim = r.u32()
        shape = tuple(r.u32() for _ in range(ndim))
        n_items = 1
        for dim in shape:
            n_items *= dim
        width = 8
        payload = r.take(n_items * width)
        dtype = "<f8" if kind == KIND_F64 else "<i8"
        arr = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
        if kind == KIND_F64 and not np.all(np.isfinite(arr)):
            raise DataError(f"{path}: section {name!r} has non-finite values")
        sections[name] = arr
    if r.pos != len(blob):
        raise TruncationError(
            f"{path}: {len(blob) - r.pos} trailing bytes after last section"
        )
    return sections


def _expect_kind(sections: dict, path, expected: str) -> None:
    got = sections.get(KIND_SECTION)
    if got != expected:
        raise FormatError(
            f"{path}: expected a {expected} file, found {got!r}"
        )


def save_dictionary(dct: ContextDictionary, path) -> None:
    dct.validate()
    write_container(
        path,
        {
            KIND_SECTION: "context-dictionary",
            "prototypes": dct.prototypes,
            "priors": dct.priors,
            "group_sizes": dct.group_sizes,
        },
    )


def load_dictionary(path) -> ContextDictionary:
    sections = read_container(path)
    _expect_kind(sections, path, "context-dictionary")
    return ContextDictionary(
        prototypes=sections["prototypes"],
        priors=sections["priors"],
        group_sizes=sections["group_sizes"],
    ).validate()


def save_head(head: FusionHead, path) -> None:
    head.check_finite()
    write_container(
        path,
        {KIND_SECTION: "fusion-head", **head.params()},
    )


def load_head(path) -> FusionHead:
    sections = read_container(path)
    _expect_kind(sections, path, "fusion-head")
    head = FusionHead(
        query_proj=sections["query_proj"],
        key_proj=sections["key_proj"],
        cls_weight=sections["cls_weight"],
        cls_bias=sections["cls_bias"],
    )
    if head.query_proj.shape != head.key_proj.shape:
        raise FormatError(f"{path}: attention map shapes disagree")
    return head


def save_projector(proj: Projector, path) -> None:
    proj.check_finite()
    write_container(
        path,
        {KIND_SECTION: "projector", **proj.params()},
    )


def load_projector(path) -> Projector:
    sections = read_container(path)
    _expect_kind(sections, path, "projector")
    return Projector(
        w1=sections["w1"], b1=sections["b1"],
        w2=sections["w2"], b2=sections["b2"],
    )


def save_bank(bank: PrototypeBank, class_names: list[str], path) -> None:
    """Prototype bank as a plain embedding file, one row per class.

    Note the embedding format stores 32-bit floats; prototypes are means,
    so this export rounds them. Contributor counts are provenance only and
    are not preserved.
    """
    bank.validate()
    if len(class_names) != bank.n_classes:
        raise ValidationError(
            f"{bank.n_classes} prototypes but {len(class_names)} names"
        )
    ds = dataio.EmbeddingDataset(
        vectors=bank.prototypes,
        labels=np.arange(bank.n_classes, dtype=np.int64),
        class_names=list(class_names),
    )
    dataio.save_embeddings(ds, path)


def load_bank(path) -> tuple[PrototypeBank, list[str]]:
    ds = dataio.load_embeddings(path)
    bank = PrototypeBank(
        prototypes=ds.vectors,
        counts=np.ones(ds.n, dtype=np.int64),
    )
    if not np.array_equal(ds.labels, np.arange(ds.n)):
        raise FormatError(f"{path}: bank rows must be labeled 0..C-1 in order")
    return bank.validate(), list(ds.class_names)
