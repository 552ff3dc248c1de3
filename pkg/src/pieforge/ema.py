"""Category-wise EMA blending of a student checkpoint into per-category
teacher checkpoints.

Teachers share every tensor shape with the student except anchor-head
tensors, whose output-channel dimension covers only the teacher's own class
range; those are blended against the matching channel slice of the student
tensor. Channels are class-major: all anchor channels of class 1, then
class 2, and so on, each class block spanning anchors-per-class times the
per-anchor payload (7 box fields for regression weights, 1 for logits).

Checkpoint container "CKP1", little-endian:
    magic "CKP1"
    u32 tensor count
    per tensor: u16 name length + UTF-8 name, u8 rank, rank x u32 dims,
                prod(dims) x f32 row-major data
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .classes import Category

MAGIC = b"CKP1"

DEFAULT_ANCHOR_PATTERNS: tuple[str, ...] = (r"anchor",)

ANCHORS_PER_CLASS = 2  # pre-defined anchor orientations (0 and 90 degrees)
BOX_CODE_SIZE = 7  # cx, cy, cz, l, w, h, yaw
DEFAULT_KERNEL = 3


class CheckpointShapeError(ValueError):
    """Tensor shape disagreement, naming the offending tensor."""


class CheckpointFormatError(ValueError):
    """Malformed CKP1 payload."""


class Checkpoint:
    """Ordered map of named f32 tensors. Immutable by convention: blending
    returns a new checkpoint and never mutates the inputs."""

    def __init__(self, tensors: Mapping[str, np.ndarray]):
        self.tensors: dict[str, np.ndarray] = {}
        for name, arr in tensors.items():
            a = np.asarray(arr, dtype=np.float32)
            self.tensors[str(name)] = a

    def __len__(self) -> int:
        return len(self.tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def allclose(self, other: "Checkpoint", atol: float = 0.0) -> bool:
        if self.names() != other.names():
            return False
        return all(
            np.allclose(self.tensors[n], other.tensors[n], atol=atol, rtol=0.0)
            for n in self.tensors
        )

    def to_bytes(self) -> bytes:
        chunks = [MAGIC, struct.pack("<I", len(self.tensors))]
        for name, arr in self.tensors.items():
            enc = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(enc)))
            chunks.append(enc)
            chunks.append(struct.pack("<B", arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        view = memoryview(blob)
        if bytes(view[:4]) != MAGIC:
            raise CheckpointFormatError(f"bad magic {bytes(view[:4])!r}")
        off = 4

        def take(n: int) -> memoryview:
            nonlocal off
            if off + n > len(view):
                raise CheckpointFormatError(
                    f"truncated payload at offset {off}: need {n} bytes"
                )
            chunk = view[off:off + n]
            off += n
            return chunk

        (count,) = struct.unpack("<I", take(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", take(2))
            name = bytes(take(name_len)).decode("utf-8")
            (rank,) = struct.unpack("<B", take(1))
            dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
            n_vals = int(np.prod(dims, dtype=np.int64)) if rank else 1
            data = np.frombuffer(take(4 * n_vals), dtype="<f4").reshape(dims)
            if name in tensors:
                raise CheckpointFormatError(f"duplicate tensor name {name!r}")
            tensors[name] = data.copy()
        if off != len(view):
            raise CheckpointFormatError(f"{len(view) - off} trailing bytes")
        return cls(tensors)

    def write(self, path: str | Path) -> None:
        from .io import atomic_write_bytes

        atomic_write_bytes(Path(path), self.to_bytes())

    @classmethod
    def read(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class CategoryLayout:
    """Contiguous class-id ranges per category over [1, z], plus the anchor
    head geometry needed to map classes onto output channels."""

    ranges: Mapping[Category, tuple[int, int]]
    anchors_per_class: int = ANCHORS_PER_CLASS
    box_code_size: int = BOX_CODE_SIZE
    kernel: int = DEFAULT_KERNEL

    def __post_init__(self):
        spans = sorted(self.ranges.values())
        if not spans:
            raise ValueError("layout needs at least one category range")
        if spans[0][0] != 1:
            raise ValueError(f"class ranges must start at 1, got {spans[0][0]}")
        for (lo0, hi0), (lo1, _) in zip(spans, spans[1:]):
            if lo1 != hi0 + 1:
                raise ValueError(f"class ranges must be contiguous and disjoint, got {spans}")
        for lo, hi in spans:
            if hi < lo:
                raise ValueError(f"empty class range {(lo, hi)}")

    @property
    def num_classes(self) -> int:
        return max(hi for _, hi in self.ranges.values())

    def class_range(self, category: Category) -> tuple[int, int]:
        try:
            return self.ranges[Category(category)]
        except KeyError:
            raise KeyError(f"layout has no range for category {category}") from None

    @classmethod
    def from_class_table(cls, table, **kwargs) -> "CategoryLayout":
        return cls(table.contiguous_ranges(), **kwargs)

    @classmethod
    def three_way(cls, m: int, n: int, z: int, **kwargs) -> "CategoryLayout":
        """Vehicle ids 1..m-1, pedestrian m..n-1, cyclist n..z."""
        return cls(
            {
                Category.VEHICLE: (1, m - 1),
                Category.PEDESTRIAN: (m, n - 1),
                Category.CYCLIST: (n, z),
            },
            **kwargs,
        )


def adjust_split(
    anchor_tensor: np.ndarray, layout: CategoryLayout, category: Category | str
) -> np.ndarray:
    """Output-channel block of an anchor-head tensor for one category.

    The leading axis must be the output-channel dimension, a multiple of the
    class count; channels are grouped class-major. Concatenating the slices
    of all categories in id order reconstructs the tensor exactly.
    """
    z = layout.num_classes
    c_out = anchor_tensor.shape[0]
    if c_out % z != 0:
        raise CheckpointShapeError(
            f"anchor tensor with C_out={c_out} is not divisible by {z} classes"
        )
    block = c_out // z
    lo, hi = layout.class_range(Category(category))
    return anchor_tensor[(lo - 1) * block: hi * block]


def is_anchor_tensor(name: str, patterns: Sequence[str] = DEFAULT_ANCHOR_PATTERNS) -> bool:
    return any(re.search(p, name) for p in patterns)


def cema_update(
    teacher: Checkpoint,
    student: Checkpoint,
    alpha: float,
    layout: CategoryLayout,
    category: Category | str,
    anchor_patterns: Sequence[str] = DEFAULT_ANCHOR_PATTERNS,
) -> Checkpoint:
    """One EMA step: every teacher tensor becomes
    alpha * teacher + (1 - alpha) * student.

    Anchor-head tensors (matched by name pattern) blend against the student's
    channel slice for `category`; all other tensors must match shapes exactly
    and blend whole. Arithmetic runs in float64 and is rounded back to f32.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must be within [0, 1], got {alpha}")
    category = Category(category)
    t_names, s_names = set(teacher.names()), set(student.names())
    if t_names != s_names:
        missing = sorted(t_names ^ s_names)
        raise CheckpointShapeError(f"teacher/student tensor names differ: {missing}")
    out: dict[str, np.ndarray] = {}
    for name in teacher.names():
        t = teacher[name]
        s = student[name]
        if is_anchor_tensor(name, anchor_patterns):
            s = adjust_split(s, layout, category)
            if s.shape != t.shape:
                raise CheckpointShapeError(
                    f"anchor tensor {name!r}: category slice shape {s.shape} "
                    f"!= teacher shape {t.shape}"
                )
        elif s.shape != t.shape:
            raise CheckpointShapeError(
                f"tensor {name!r}: teacher shape {t.shape} != student shape {s.shape} "
                f"and it is not an anchor-head tensor"
            )
        blended = alpha * t.astype(np.float64) + (1.0 - alpha) * s.astype(np.float64)
        out[name] = blended.astype(np.float32)
    return Checkpoint(out)
