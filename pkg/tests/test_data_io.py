"""IDX/CSV ingestion, normalization, and the binary model container."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dpcdbn.data_io import (
    CONTAINER_MAGIC,
    RawDataset,
    load_csv,
    load_idx,
    load_idx_pair,
    normalize,
    read_container,
    write_container,
    write_idx_images,
    write_idx_labels,
)
from dpcdbn.errors import (
    BadMagic,
    CorruptContainer,
    DimMismatch,
    NegativeFeature,
    ParseError,
    SchemaMismatch,
    TruncatedFile,
    VersionMismatch,
)


def idx_image_bytes(images):
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    return struct.pack(">IIII", 0x00000803, n, rows, cols) + images.tobytes()


class TestIdx:
    def test_hand_built_fixture(self, tmp_path):
        pixels = np.arange(4 * 2 * 2, dtype=np.uint8).reshape(4, 2, 2)
        path = tmp_path / "imgs.idx"
        path.write_bytes(idx_image_bytes(pixels))
        data = load_idx(path)
        assert len(data.instances) == 4
        for i in range(4):
            assert data.instances[i] == pytest.approx(pixels[i] / 255.0)

    def test_label_file(self, tmp_path):
        path = tmp_path / "labels.idx"
        path.write_bytes(struct.pack(">II", 0x00000801, 3) + bytes([1, 0, 1]))
        data = load_idx(path)
        assert list(data.labels) == [1, 0, 1]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(struct.pack(">IIII", 0xDEADBEEF, 1, 1, 1) + b"\x00")
        with pytest.raises(BadMagic):
            load_idx(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.idx"
        path.write_bytes(struct.pack(">IIII", 0x00000803, 2, 2, 2) + b"\x00" * 5)
        with pytest.raises(TruncatedFile):
            load_idx(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "long.idx"
        path.write_bytes(idx_image_bytes(np.zeros((1, 2, 2), dtype=np.uint8)) + b"\x00")
        with pytest.raises(DimMismatch):
            load_idx(path)

    def test_write_read_round_trip(self, tmp_path, rng):
        images = rng.random((5, 4, 4))
        labels = rng.integers(0, 2, 5)
        write_idx_images(tmp_path / "x.idx", images)
        write_idx_labels(tmp_path / "y.idx", labels)
        data = load_idx_pair(tmp_path / "x.idx", tmp_path / "y.idx")
        assert list(data.labels) == list(labels)
        quantized = np.round(images * 255.0) / 255.0
        for i in range(5):
            assert data.instances[i] == pytest.approx(quantized[i], abs=1e-12)

    def test_pair_order_enforced(self, tmp_path, rng):
        write_idx_images(tmp_path / "x.idx", rng.random((2, 2, 2)))
        write_idx_labels(tmp_path / "y.idx", np.zeros(2, dtype=int))
        with pytest.raises(BadMagic):
            load_idx_pair(tmp_path / "y.idx", tmp_path / "x.idx")

    def test_pair_count_mismatch(self, tmp_path, rng):
        write_idx_images(tmp_path / "x.idx", rng.random((2, 2, 2)))
        write_idx_labels(tmp_path / "y.idx", np.zeros(3, dtype=int))
        with pytest.raises(DimMismatch):
            load_idx_pair(tmp_path / "x.idx", tmp_path / "y.idx")


class TestNormalize:
    def test_l2_scaling(self):
        out = normalize(RawDataset([np.array([3.0, 4.0])]))
        assert out.instances[0] == pytest.approx([0.6, 0.8])

    def test_compliant_instance_unchanged(self):
        out = normalize(RawDataset([np.array([0.1, 0.2])]))
        assert out.instances[0] == pytest.approx([0.1, 0.2])

    def test_zero_instance_unchanged(self):
        out = normalize(RawDataset([np.zeros(4)]))
        assert np.all(out.instances[0] == 0.0)

    def test_negative_entry_rejected(self):
        with pytest.raises(NegativeFeature):
            normalize(RawDataset([np.array([-0.1, 0.2])]))

    def test_pixel_mode(self):
        out = normalize(RawDataset([np.array([[2.0, 4.0]])]), mode="pixel")
        assert out.instances[0] == pytest.approx(np.array([[0.5, 1.0]]))
        assert out.provenance == "normalize:pixel"

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            normalize(RawDataset([np.zeros(2)]), mode="minmax")

    @settings(max_examples=50, deadline=None)
    @given(
        hnp.arrays(
            np.float64,
            (3, 3),
            elements=st.floats(min_value=0, max_value=100, allow_nan=False),
        )
    )
    def test_l2_norm_constraint_and_idempotence(self, instance):
        once = normalize(RawDataset([instance]))
        assert np.linalg.norm(once.instances[0].ravel()) <= 1.0 + 1e-12
        assert np.all(once.instances[0] >= 0.0)
        twice = normalize(RawDataset(list(once.instances)))
        assert twice.instances[0] == pytest.approx(once.instances[0], abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(
        hnp.arrays(
            np.float64,
            (3, 3),
            elements=st.floats(min_value=0, max_value=100, allow_nan=False),
        )
    )
    def test_pixel_mode_idempotence(self, instance):
        once = normalize(RawDataset([instance]), mode="pixel")
        assert np.all(once.instances[0] <= 1.0 + 1e-12)
        twice = normalize(RawDataset(list(once.instances)), mode="pixel")
        assert twice.instances[0] == pytest.approx(once.instances[0], abs=1e-15)


class TestCsv:
    def test_fixture(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("a,b,label\n1.5,2.5,1\n3.0,4.0,0\n")
        data = load_csv(path, ["a", "b", "label"], label_column="label")
        assert len(data.instances) == 2
        assert data.instances[0] == pytest.approx([1.5, 2.5])
        assert list(data.labels) == [1.0, 0.0]

    def test_schema_mismatch(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("a,c\n1,2\n")
        with pytest.raises(SchemaMismatch):
            load_csv(path, ["a", "b"])

    def test_parse_error_carries_position(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("a,b\n1,2\n3,oops\n")
        with pytest.raises(ParseError) as err:
            load_csv(path, ["a", "b"])
        assert err.value.row == 3
        assert err.value.col == 1

    def test_empty_file(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("")
        with pytest.raises(SchemaMismatch):
            load_csv(path, ["a"])


class TestContainer:
    def _write(self, path, rng):
        meta = {"alpha": 1, "nested": {"b": [1, 2]}}
        arrays = {"w": rng.random((2, 3)), "b": rng.random(4)}
        write_container(path, meta, arrays)
        return meta, arrays

    def test_round_trip(self, tmp_path, rng):
        path = tmp_path / "model.bin"
        meta, arrays = self._write(path, rng)
        got_meta, got_arrays = read_container(path)
        assert got_meta == meta
        for name in arrays:
            assert np.array_equal(got_arrays[name], arrays[name])

    def test_rewrite_is_byte_identical(self, tmp_path, rng):
        meta = {"k": 2}
        arrays = {"w": rng.random((3, 3))}
        write_container(tmp_path / "a.bin", meta, arrays)
        write_container(tmp_path / "b.bin", meta, arrays)
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_magic_check(self, tmp_path, rng):
        path = tmp_path / "model.bin"
        self._write(path, rng)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(CorruptContainer):
            read_container(path)

    def test_version_check(self, tmp_path, rng):
        path = tmp_path / "model.bin"
        self._write(path, rng)
        data = bytearray(path.read_bytes())
        data[4] = 99
        # keep the checksum valid so only the version trips
        import zlib

        data[-4:] = struct.pack("<I", zlib.crc32(bytes(data[:-4])))
        path.write_bytes(bytes(data))
        with pytest.raises(VersionMismatch):
            read_container(path)

    def test_truncation_detected(self, tmp_path, rng):
        path = tmp_path / "model.bin"
        self._write(path, rng)
        data = path.read_bytes()
        path.write_bytes(data[:-9])
        with pytest.raises(CorruptContainer):
            read_container(path)

    def test_bit_flip_detected(self, tmp_path, rng):
        path = tmp_path / "model.bin"
        self._write(path, rng)
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(CorruptContainer):
            read_container(path)

    def test_magic_constant(self):
        assert CONTAINER_MAGIC == b"DPCN"


class TestRawDataset:
    def test_shape_consistency_enforced(self):
        with pytest.raises(DimMismatch):
            RawDataset([np.zeros((2, 2)), np.zeros((3, 3))])

    def test_label_length_enforced(self):
        with pytest.raises(DimMismatch):
            RawDataset([np.zeros((2, 2))], labels=np.zeros(2))
