"""Binary and text file formats.

DMLD dataset (little-endian)::

    b"DMLD" | version u16 = 1 | num_examples u32 | rank u8 | dims u32 * rank
    | dtype u8 (0 = float64) | payload float64 row-major | labels u32 * num

``dims`` is the per-example shape.

DMLC checkpoint (little-endian)::

    b"DMLC" | version u16 = 1 | count u16
    | count * (name_len u16 | name utf-8 | rank u8 | dims u32 * rank | float64 payload)

Tensor names are store-qualified: ``generator/dense0.weight``.

Split manifest: three text lines ``train: 0,1,2``, ``val: ...``, ``test: ...``.
"""

import struct
from pathlib import Path
from typing import Mapping

import numpy as np
from loguru import logger

from .errors import FormatError
from .models import ParamStore

DATASET_MAGIC = b"DMLD"
CHECKPOINT_MAGIC = b"DMLC"
VERSION = 1
DTYPE_FLOAT64 = 0
SPLIT_ROLES = ("train", "val", "test")


class _Reader:
    """Cursor over a byte buffer that reports truncation as FormatError."""

    def __init__(self, data: bytes, source: Path):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError(f"{self.source}: truncated at byte {self.offset} (needed {size} more)")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count), dtype=dtype, count=count)

    def expect_header(self, magic: bytes) -> None:
        found = self.take(4) if len(self.data) >= 4 else self.data
        if found != magic:
            raise FormatError(f"{self.source}: bad magic {found!r}, expected {magic!r}")
        (version,) = self.unpack("<H")
        if version != VERSION:
            raise FormatError(f"{self.source}: unsupported version {version}")


def write_dataset(path: Path, examples: np.ndarray, labels: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    examples = np.ascontiguousarray(examples, dtype="<f8")
    labels = np.asarray(labels)
    dims = examples.shape[1:]
    header = DATASET_MAGIC + struct.pack("<HIB", VERSION, examples.shape[0], len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims) + struct.pack("<B", DTYPE_FLOAT64)
    with open(path, "wb") as f:
        f.write(header)
        f.write(examples.tobytes(order="C"))
        f.write(labels.astype("<u4").tobytes())
    logger.info(f"Wrote {examples.shape[0]} examples to {path}")


def read_dataset(path: Path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    reader.expect_header(DATASET_MAGIC)
    num, rank = reader.unpack("<IB")
    dims = reader.unpack(f"<{rank}I") if rank else ()
    (dtype,) = reader.unpack("<B")
    if dtype != DTYPE_FLOAT64:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    count = num * int(np.prod(dims, dtype=np.int64))
    examples = reader.array("<f8", count).reshape((num,) + tuple(dims)).astype(np.float64)
    labels = reader.array("<u4", num).astype(np.int64)
    if reader.offset != len(reader.data):
        raise FormatError(f"{path}: {len(reader.data) - reader.offset} trailing bytes")
    return examples, labels


def write_split(path: Path, split: Mapping[str, list[int]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{role}: " + ",".join(str(c) for c in split[role]) for role in SPLIT_ROLES]
    path.write_text("\n".join(lines) + "\n")


def read_split(path: Path) -> dict[str, list[int]]:
    path = Path(path)
    roles: dict[str, list[int]] = {}
    for number, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        role, sep, rest = line.partition(":")
        role = role.strip()
        if not sep or role not in SPLIT_ROLES:
            raise FormatError(f"{path}:{number}: expected 'train:', 'val:' or 'test:'")
        if role in roles:
            raise FormatError(f"{path}:{number}: duplicate '{role}' line")
        try:
            roles[role] = [int(tok) for tok in rest.split(",") if tok.strip()]
        except ValueError:
            raise FormatError(f"{path}:{number}: class ids must be integers") from None
    missing = [r for r in SPLIT_ROLES if r not in roles]
    if missing:
        raise FormatError(f"{path}: missing {', '.join(missing)} line(s)")
    return roles


def save_checkpoint(stores: Mapping[str, ParamStore], path: Path) -> None:
    """Write named parameter stores to a DMLC file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = [(f"{store}/{name}", value) for store, params in stores.items() for name, value in params.items()]
    if len(tensors) > 0xFFFF:
        raise FormatError(f"{len(tensors)} tensors exceed the DMLC limit")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HH", VERSION, len(tensors))]
    for name, value in tensors:
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    path.write_bytes(b"".join(chunks))
    logger.info(f"Saved checkpoint with {len(tensors)} tensors to {path}")


def load_checkpoint(path: Path) -> dict[str, ParamStore]:
    """Read a DMLC file back into named parameter stores."""
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    reader.expect_header(CHECKPOINT_MAGIC)
    (count,) = reader.unpack("<H")
    grouped: dict[str, dict[str, np.ndarray]] = {}
    for _ in range(count):
        (length,) = reader.unpack("<H")
        try:
            qualified = reader.take(length).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: tensor name is not valid UTF-8") from None
        store, sep, name = qualified.partition("/")
        if not sep:
            raise FormatError(f"{path}: tensor name '{qualified}' lacks a store prefix")
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(dims, dtype=np.int64))
        grouped.setdefault(store, {})[name] = reader.array("<f8", size).reshape(dims).astype(np.float64)
    if reader.offset != len(reader.data):
        raise FormatError(f"{path}: {len(reader.data) - reader.offset} trailing bytes")
    logger.debug(f"Loaded checkpoint {path}: stores {list(grouped)}")
    return {store: ParamStore(entries) for store, entries in grouped.items()}
