"""Token bags and their bit-exact on-disk format.

One file per patient.  Layout (all integers little-endian):

    bytes 0..3    magic b"RAAB"
    bytes 4..7    u32 format version (currently 1)
    bytes 8..23   u32 P, R, C, D
    bytes 24..    P*R*C*D little-endian float32, row-major [patch][row][col][dim]

Storage is 32-bit to halve disk cost; everything in memory is float64, so
values round-trip bitwise exactly when they are float32-representable
(which everything read from disk, including generated datasets, is).
Patient identity and the diagnosis label live in the dataset manifest,
not in the token file.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"RAAB"
VERSION = 1
HEADER = struct.Struct("<4s5I")

CLASS_NAMES = ("Healthy", "Benign", "OPMD", "OSCC")
NUM_CLASSES = 4

DEFAULT_ROWS = 14
DEFAULT_COLS = 14
DEFAULT_DIM = 384


class BagFormatError(ValueError):
    """Malformed token file or inconsistent bag contents."""


@dataclass
class GridTokens:
    """One patch's token grid, shape (rows, cols, dim)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise BagFormatError(f"token grid must be 3-d, got shape {self.values.shape}")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def __eq__(self, other) -> bool:
        return isinstance(other, GridTokens) and \
            self.values.shape == other.values.shape and \
            np.array_equal(self.values, other.values)


@dataclass
class TokenBag:
    """All token grids of one patient plus the patient-level label."""

    patient_id: str
    label: int
    grids: list[GridTokens] = field(default_factory=list)

    def __post_init__(self):
        if not self.grids:
            raise BagFormatError(f"bag {self.patient_id!r} has no patches")
        if not 0 <= self.label < NUM_CLASSES:
            raise BagFormatError(
                f"bag {self.patient_id!r} label {self.label} outside 0..{NUM_CLASSES - 1}")
        first = self.grids[0].values.shape
        for i, grid in enumerate(self.grids):
            if grid.values.shape != first:
                raise BagFormatError(
                    f"bag {self.patient_id!r} patch {i} shape {grid.values.shape} != {first}")

    @property
    def num_patches(self) -> int:
        return len(self.grids)

    @property
    def rows(self) -> int:
        return self.grids[0].rows

    @property
    def cols(self) -> int:
        return self.grids[0].cols

    @property
    def dim(self) -> int:
        return self.grids[0].dim

    def stacked(self) -> np.ndarray:
        """(P, R, C, D) view of all patches."""
        return np.stack([g.values for g in self.grids])

    def __eq__(self, other) -> bool:
        return isinstance(other, TokenBag) and \
            self.patient_id == other.patient_id and \
            self.label == other.label and \
            len(self.grids) == len(other.grids) and \
            all(a == b for a, b in zip(self.grids, other.grids))


def write_bag(bag: TokenBag, path) -> None:
    path = Path(path)
    values = bag.stacked()
    bad = ~np.isfinite(values)
    if bad.any():
        idx = tuple(map(int, np.unravel_index(int(np.argmax(bad)), values.shape)))
        raise BagFormatError(f"bag {bag.patient_id!r} has non-finite value at {idx}")
    payload = values.astype("<f4").tobytes()
    header = HEADER.pack(MAGIC, VERSION, bag.num_patches, bag.rows, bag.cols, bag.dim)
    path.write_bytes(header + payload)


def read_bag(path, patient_id: str | None = None, label: int = 0) -> TokenBag:
    """Load a token file.  Identity and label are manifest-owned, so callers
    that have them pass them in; standalone reads default to the file stem
    and label 0."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER.size:
        raise BagFormatError(f"{path}: file shorter than header ({len(raw)} bytes)")
    magic, version, p, r, c, d = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BagFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise BagFormatError(f"{path}: unsupported version {version}, expected {VERSION}")
    expected = HEADER.size + p * r * c * d * 4
    if len(raw) != expected:
        raise BagFormatError(
            f"{path}: payload truncated or padded: expected {expected} bytes, got {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f4", offset=HEADER.size)
    values = flat.astype(np.float64).reshape(p, r, c, d)
    bad = ~np.isfinite(values)
    if bad.any():
        idx = tuple(map(int, np.unravel_index(int(np.argmax(bad)), values.shape)))
        raise BagFormatError(f"{path}: non-finite value at {idx}")
    pid = patient_id if patient_id is not None else path.stem
    return TokenBag(pid, label, [GridTokens(values[i]) for i in range(p)])


def file_size_for(p: int, r: int, c: int, d: int) -> int:
    """Exact byte size of a token file with these dimensions."""
    return HEADER.size + p * r * c * d * 4
