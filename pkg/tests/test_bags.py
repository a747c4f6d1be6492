"""Token-file format: round trips, header layout, and corruption handling."""

import struct

import numpy as np
import pytest

from raamil.bags import (
    CLASS_NAMES,
    DEFAULT_COLS,
    DEFAULT_DIM,
    DEFAULT_ROWS,
    HEADER,
    MAGIC,
    NUM_CLASSES,
    VERSION,
    BagFormatError,
    GridTokens,
    TokenBag,
    file_size_for,
    read_bag,
    write_bag,
)
from raamil.rng import stream


def make_bag(pid="p1", label=2, patches=2, rows=4, cols=5, dim=3, tag="bag"):
    s = stream(99, tag)
    grids = []
    for _ in range(patches):
        vals = s.normal_array((rows, cols, dim))
        # float32 grid so the f32 file round-trips bitwise
        grids.append(GridTokens(vals.astype(np.float32).astype(np.float64)))
    return TokenBag(pid, label, grids)


class TestConstants:
    def test_class_names_and_count(self):
        assert CLASS_NAMES == ("Healthy", "Benign", "OPMD", "OSCC")
        assert NUM_CLASSES == 4

    def test_default_grid_shape(self):
        assert (DEFAULT_ROWS, DEFAULT_COLS, DEFAULT_DIM) == (14, 14, 384)

    def test_header_is_24_bytes(self):
        assert HEADER.size == 24


class TestContainers:
    def test_grid_must_be_3d(self):
        with pytest.raises(BagFormatError, match="3-d"):
            GridTokens(np.zeros((4, 4)))

    def test_bag_requires_patches(self):
        with pytest.raises(BagFormatError, match="no patches"):
            TokenBag("p1", 0, [])

    def test_bag_rejects_mismatched_grids(self):
        a = GridTokens(np.zeros((4, 4, 3)))
        b = GridTokens(np.zeros((4, 5, 3)))
        with pytest.raises(BagFormatError):
            TokenBag("p1", 0, [a, b])

    def test_bag_rejects_bad_label(self):
        g = GridTokens(np.zeros((2, 2, 2)))
        with pytest.raises(BagFormatError):
            TokenBag("p1", 4, [g])
        with pytest.raises(BagFormatError):
            TokenBag("p1", -1, [g])

    def test_stacked_shape(self):
        bag = make_bag(patches=3, rows=4, cols=5, dim=6)
        assert bag.stacked().shape == (3, 4, 5, 6)
        assert bag.num_patches == 3
        assert (bag.rows, bag.cols, bag.dim) == (4, 5, 6)


class TestRoundTrip:
    def test_bitwise_round_trip(self, tmp_path):
        bag = make_bag(patches=3, rows=14, cols=14, dim=8)
        path = tmp_path / "p1.raab"
        write_bag(bag, path)
        back = read_bag(path, patient_id="p1", label=2)
        assert back == bag
        assert np.array_equal(back.stacked(), bag.stacked())

    def test_second_write_is_byte_identical(self, tmp_path):
        bag = make_bag()
        a = tmp_path / "a.raab"
        b = tmp_path / "b.raab"
        write_bag(bag, a)
        write_bag(bag, b)
        assert a.read_bytes() == b.read_bytes()

    def test_header_fields_on_disk(self, tmp_path):
        bag = make_bag(patches=2, rows=4, cols=5, dim=3)
        path = tmp_path / "p.raab"
        write_bag(bag, path)
        raw = path.read_bytes()
        magic, version, p, r, c, d = HEADER.unpack_from(raw)
        assert magic == MAGIC == b"RAAB"
        assert version == VERSION == 1
        assert (p, r, c, d) == (2, 4, 5, 3)

    def test_payload_is_le_f32_row_major(self, tmp_path):
        bag = make_bag(patches=1, rows=2, cols=2, dim=2)
        path = tmp_path / "p.raab"
        write_bag(bag, path)
        flat = np.frombuffer(path.read_bytes(), dtype="<f4", offset=HEADER.size)
        expected = bag.stacked().astype("<f4").ravel()
        assert np.array_equal(flat, expected)

    def test_file_size_matches_helper(self, tmp_path):
        bag = make_bag(patches=3, rows=4, cols=5, dim=6)
        path = tmp_path / "p.raab"
        write_bag(bag, path)
        assert path.stat().st_size == file_size_for(3, 4, 5, 6)

    def test_file_size_for_default_grid(self):
        assert file_size_for(1, 14, 14, 384) == 24 + 14 * 14 * 384 * 4

    def test_read_defaults_identity_to_stem(self, tmp_path):
        bag = make_bag(pid="whatever", label=3)
        path = tmp_path / "case-007.raab"
        write_bag(bag, path)
        back = read_bag(path)
        assert back.patient_id == "case-007"
        assert back.label == 0


class TestCorruption:
    def write_good(self, tmp_path):
        bag = make_bag()
        path = tmp_path / "p.raab"
        write_bag(bag, path)
        return path

    def test_short_file(self, tmp_path):
        path = tmp_path / "p.raab"
        path.write_bytes(b"RA")
        with pytest.raises(BagFormatError, match="shorter than header"):
            read_bag(path)

    def test_bad_magic(self, tmp_path):
        path = self.write_good(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(BagFormatError, match="magic"):
            read_bag(path)

    def test_bad_version(self, tmp_path):
        path = self.write_good(tmp_path)
        raw = bytearray(path.read_bytes())
        struct.pack_into("<I", raw, 4, 9)
        path.write_bytes(bytes(raw))
        with pytest.raises(BagFormatError, match="version 9"):
            read_bag(path)

    def test_truncated_payload(self, tmp_path):
        path = self.write_good(tmp_path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(BagFormatError, match="truncated or padded"):
            read_bag(path)

    def test_padded_payload(self, tmp_path):
        path = self.write_good(tmp_path)
        path.write_bytes(path.read_bytes() + b"\x00" * 3)
        with pytest.raises(BagFormatError, match="truncated or padded"):
            read_bag(path)

    def test_nonfinite_payload_rejected_on_read(self, tmp_path):
        path = self.write_good(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[HEADER.size:HEADER.size + 4] = struct.pack("<f", float("nan"))
        path.write_bytes(bytes(raw))
        with pytest.raises(BagFormatError, match="non-finite"):
            read_bag(path)

    def test_nonfinite_values_rejected_on_write(self, tmp_path):
        vals = np.zeros((1, 2, 2, 2))
        vals[0, 1, 0, 1] = np.inf
        bag = TokenBag("p1", 0, [GridTokens(vals[0])])
        with pytest.raises(BagFormatError, match=r"\(0, 1, 0, 1\)"):
            write_bag(bag, tmp_path / "p.raab")
