"""PLY and label-sidecar round trips plus malformed-input diagnostics."""

import numpy as np
import pytest

import geoset as gs
from geoset import ply_io


def random_cloud(n=17, normals=True, seed=2):
    rng = np.random.default_rng(seed)
    nrm = None
    if normals:
        nrm = rng.normal(size=(n, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return gs.PointCloud(rng.normal(size=(n, 3)), normals=nrm)


class TestPlyRoundTrip:
    @pytest.mark.parametrize("binary", [True, False])
    @pytest.mark.parametrize("normals", [True, False])
    def test_round_trip(self, tmp_path, binary, normals):
        cloud = random_cloud(normals=normals)
        path = tmp_path / "cloud.ply"
        ply_io.write_ply(path, cloud, binary=binary)
        back = ply_io.read_ply(path)
        # stored as float32, so compare at that precision
        np.testing.assert_allclose(back.positions, cloud.positions, atol=1e-6)
        if normals:
            np.testing.assert_allclose(back.normals, cloud.normals, atol=1e-6)
        else:
            assert back.normals is None

    def test_empty_cloud(self, tmp_path):
        path = tmp_path / "empty.ply"
        ply_io.write_ply(path, gs.PointCloud(np.zeros((0, 3))))
        assert len(ply_io.read_ply(path)) == 0

    def test_extra_scalar_property_is_skipped(self, tmp_path):
        path = tmp_path / "extra.ply"
        header = ("ply\nformat ascii 1.0\nelement vertex 2\n"
                  "property float x\nproperty float y\nproperty float z\n"
                  "property float confidence\nend_header\n")
        path.write_bytes(header.encode() + b"1 2 3 0.9\n4 5 6 0.1\n")
        cloud = ply_io.read_ply(path)
        np.testing.assert_allclose(cloud.positions, [[1, 2, 3], [4, 5, 6]])


class TestPlyErrors:
    def header(self, fmt="binary_little_endian", count=2):
        return (f"ply\nformat {fmt} 1.0\nelement vertex {count}\n"
                "property float x\nproperty float y\nproperty float z\n"
                "end_header\n")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_bytes(b"not a ply file")
        with pytest.raises(gs.FileFormatError) as err:
            ply_io.read_ply(path)
        assert err.value.byte_offset == 0
        assert err.value.path == str(path)

    def test_truncated_binary_body_reports_offset(self, tmp_path):
        path = tmp_path / "short.ply"
        head = self.header().encode()
        path.write_bytes(head + b"\x00" * 10)  # needs 24 bytes
        with pytest.raises(gs.FileFormatError, match="truncated") as err:
            ply_io.read_ply(path)
        assert err.value.byte_offset == len(head) + 10

    def test_missing_end_header(self, tmp_path):
        path = tmp_path / "noend.ply"
        path.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 1\n")
        with pytest.raises(gs.FileFormatError, match="end_header"):
            ply_io.read_ply(path)

    def test_unsupported_format(self, tmp_path):
        path = tmp_path / "big.ply"
        path.write_bytes(self.header(fmt="binary_big_endian").encode())
        with pytest.raises(gs.FileFormatError, match="unsupported format"):
            ply_io.read_ply(path)

    def test_list_property_rejected(self, tmp_path):
        path = tmp_path / "list.ply"
        path.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 1\n"
                         b"property list uchar int idx\nend_header\n")
        with pytest.raises(gs.FileFormatError, match="list"):
            ply_io.read_ply(path)

    def test_non_vertex_element_rejected(self, tmp_path):
        path = tmp_path / "face.ply"
        path.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 0\n"
                         b"property float x\nproperty float y\nproperty float z\n"
                         b"element face 3\nproperty float area\nend_header\n")
        with pytest.raises(gs.FileFormatError, match="unsupported element"):
            ply_io.read_ply(path)

    def test_missing_coordinate_property(self, tmp_path):
        path = tmp_path / "noy.ply"
        path.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 1\n"
                         b"property float x\nproperty float z\nend_header\n1 2\n")
        with pytest.raises(gs.FileFormatError, match="'y'"):
            ply_io.read_ply(path)

    def test_ascii_row_width_mismatch(self, tmp_path):
        path = tmp_path / "wide.ply"
        path.write_bytes(self.header(fmt="ascii", count=1).encode() + b"1 2\n")
        with pytest.raises(gs.FileFormatError, match="expected 3"):
            ply_io.read_ply(path)

    def test_ascii_missing_rows(self, tmp_path):
        path = tmp_path / "few.ply"
        path.write_bytes(self.header(fmt="ascii", count=3).encode() + b"1 2 3\n")
        with pytest.raises(gs.FileFormatError, match="expected 3 vertex rows"):
            ply_io.read_ply(path)


class TestLabels:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "labels.gsl"
        labels = np.array([0, 3, 3, 1, 2], dtype=np.uint32)
        ply_io.write_labels(path, labels)
        np.testing.assert_array_equal(ply_io.read_labels(path), labels)

    def test_empty_labels(self, tmp_path):
        path = tmp_path / "none.gsl"
        ply_io.write_labels(path, np.array([], dtype=np.uint32))
        assert len(ply_io.read_labels(path)) == 0

    def test_negative_labels_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="non-negative"):
            ply_io.write_labels(tmp_path / "neg.gsl", np.array([-1, 2]))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.gsl"
        path.write_bytes(b"XXXX\x00\x00\x00\x00")
        with pytest.raises(gs.FileFormatError, match="magic") as err:
            ply_io.read_labels(path)
        assert err.value.byte_offset == 0

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "cut.gsl"
        path.write_bytes(ply_io.LABEL_MAGIC + (5).to_bytes(4, "little") + b"\x01" * 6)
        with pytest.raises(gs.FileFormatError, match="truncated") as err:
            ply_io.read_labels(path)
        assert err.value.byte_offset == 14
