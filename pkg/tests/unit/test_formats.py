"""
Tests for the on-disk formats: FLT1 tensors, binary PGM and JSON
"""

import json
import os
import struct
import sys
from enum import Enum

import numpy as np
import pytest

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "..", "src"))

from errors import DatasetError, ShapeError
from formats import FLT_MAGIC, load_tensor, read_json, read_pgm, safe_json_dumps, save_tensor, write_json, write_pgm


class Color(Enum):
    RED = "red"


@pytest.mark.unit
class TestTensorFiles:
    def test_header_layout(self, tmp_path):
        path = tmp_path / "t.flt"
        save_tensor(path, np.arange(6, dtype=np.float64).reshape(2, 3))
        raw = path.read_bytes()
        assert raw[:4] == FLT_MAGIC
        assert struct.unpack_from("<3I", raw, 4) == (2, 2, 3)
        assert len(raw) == 4 + 4 * 3 + 4 * 6

    def test_values_stored_as_float32(self, tmp_path):
        path = tmp_path / "t.flt"
        data = np.array([[0.1, -2.5], [1e6, 3.0]])
        save_tensor(path, data)
        loaded = load_tensor(path)
        assert loaded.dtype == np.float32
        np.testing.assert_array_equal(loaded, data.astype(np.float32))

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.flt"
        path.write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(DatasetError):
            load_tensor(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.flt"
        save_tensor(path, np.ones((4, 4)))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ShapeError, match="header promises"):
            load_tensor(path)


@pytest.mark.unit
class TestPGM:
    def test_8bit_header_and_pixels(self, tmp_path):
        path = tmp_path / "img.pgm"
        image = np.array([[0, 1, 2], [253, 254, 255]])
        write_pgm(path, image)
        assert path.read_bytes().startswith(b"P5\n3 2\n255\n")
        np.testing.assert_array_equal(read_pgm(path), image)

    def test_16bit_is_big_endian(self, tmp_path):
        path = tmp_path / "img.pgm"
        write_pgm(path, np.array([[258]]), maxval=65535)
        assert path.read_bytes().endswith(b"\x01\x02")
        assert read_pgm(path)[0, 0] == 258

    def test_values_are_clipped(self, tmp_path):
        path = tmp_path / "img.pgm"
        write_pgm(path, np.array([[-5, 300]]))
        np.testing.assert_array_equal(read_pgm(path), [[0, 255]])

    def test_header_comments_skipped(self, tmp_path):
        path = tmp_path / "img.pgm"
        path.write_bytes(b"P5\n# made by hand\n2 1\n255\n" + bytes([7, 9]))
        np.testing.assert_array_equal(read_pgm(path), [[7, 9]])

    def test_rejects_3d(self, tmp_path):
        with pytest.raises(ShapeError):
            write_pgm(tmp_path / "x.pgm", np.zeros((2, 2, 2)))

    def test_rejects_unsupported_maxval(self, tmp_path):
        with pytest.raises(ValueError):
            write_pgm(tmp_path / "x.pgm", np.zeros((2, 2)), maxval=1023)

    def test_rejects_ascii_pgm(self, tmp_path):
        path = tmp_path / "ascii.pgm"
        path.write_bytes(b"P2\n1 1\n255\n0\n")
        with pytest.raises(DatasetError):
            read_pgm(path)


@pytest.mark.unit
class TestJSON:
    def test_numpy_types_serialized(self):
        data = {"i": np.int64(3), "f": np.float32(0.5), "a": np.arange(3), "e": Color.RED}
        assert json.loads(safe_json_dumps(data)) == {"i": 3, "f": 0.5, "a": [0, 1, 2], "e": "red"}

    def test_keys_sorted(self):
        assert safe_json_dumps({"b": 1, "a": 2}, indent=None) == '{"a": 2, "b": 1}'

    def test_unknown_type_still_fails(self):
        with pytest.raises(TypeError):
            safe_json_dumps({"x": object()})

    def test_write_then_read(self, tmp_path):
        path = tmp_path / "summary.json"
        write_json(path, {"dsc": np.float64(0.75)})
        assert path.read_text().endswith("\n")
        assert read_json(path) == {"dsc": 0.75}

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetError, match="Missing JSON file"):
            read_json(tmp_path / "absent.json")
