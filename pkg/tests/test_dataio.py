import logging
import struct

import numpy as np
import pytest

from recureg import dataio
from recureg.cnn import count_parameters, small_network
from recureg.dataio import (
    FormatError,
    load_dataset,
    load_scene,
    read_image,
    read_pfm,
    read_pgm,
    read_ppm,
    render_disparity,
    write_image,
    write_pfm,
    write_pgm,
    write_ppm,
)


class TestPFM:
    def test_hand_built_little_endian(self, tmp_path):
        # rows stored bottom-up: first row on disk is the bottom row [3, 4]
        body = struct.pack("<4f", 3, 4, 1, 2)
        path = tmp_path / "a.pfm"
        path.write_bytes(b"Pf\n2 2\n-1.0\n" + body)
        np.testing.assert_array_equal(read_pfm(path), [[1, 2], [3, 4]])

    def test_hand_built_big_endian(self, tmp_path):
        body = struct.pack(">4f", 3, 4, 1, 2)
        path = tmp_path / "a.pfm"
        path.write_bytes(b"Pf\n2 2\n1.0\n" + body)
        np.testing.assert_array_equal(read_pfm(path), [[1, 2], [3, 4]])

    def test_written_bytes(self, tmp_path):
        path = tmp_path / "a.pfm"
        write_pfm(np.array([[1.0, 2.0], [3.0, 4.0]]), path)
        assert path.read_bytes() == b"Pf\n2 2\n-1.0\n" + struct.pack("<4f", 3, 4, 1, 2)

    def test_round_trip_bit_exact(self, tmp_path):
        grid = np.random.default_rng(0).normal(size=(7, 5)).astype(np.float32)
        grid[2, 3] = np.inf
        path = tmp_path / "a.pfm"
        write_pfm(grid, path)
        back = read_pfm(path)
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back, grid)

    def test_color_round_trip(self, tmp_path):
        grid = np.random.default_rng(1).random((3, 4, 3)).astype(np.float32)
        path = tmp_path / "c.pfm"
        write_pfm(grid, path)
        assert path.read_bytes()[:2] == b"PF"
        np.testing.assert_array_equal(read_pfm(path), grid)

    @pytest.mark.parametrize("data,offset,msg", [
        (b"P7\n2 2\n-1.0\n", 0, "bad magic"),
        (b"Pf\n2 x\n-1.0\n", 5, "bad height"),
        (b"Pf\n2 2\nabc\n", 7, "bad scale"),
        (b"Pf\n2 2\n0\n", 7, "non-zero"),
        (b"Pf\n0 2\n-1.0\n", 3, "positive"),
        (b"Pf\n2 2\n-1.0\n" + b"\0" * 15, 27, "truncated"),
        (b"Pf\n2 2\n-1.0\n" + b"\0" * 17, 28, "trailing"),
        (b"Pf\n2 2", 6, "end of header"),
    ])
    def test_malformed(self, tmp_path, data, offset, msg):
        path = tmp_path / "bad.pfm"
        path.write_bytes(data)
        with pytest.raises(FormatError, match=msg) as info:
            read_pfm(path)
        assert info.value.offset == offset
        assert f"byte {offset}" in str(info.value)

    def test_bad_channels(self, tmp_path):
        with pytest.raises(ValueError):
            write_pfm(np.zeros((2, 2, 2)), tmp_path / "x.pfm")


class TestPNM:
    def test_ppm_fixture(self, tmp_path):
        path = tmp_path / "a.ppm"
        path.write_bytes(b"P6\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255]))
        np.testing.assert_array_equal(read_ppm(path), [[[1, 0, 0], [0, 0, 1]]])

    def test_header_comments(self, tmp_path):
        path = tmp_path / "a.pgm"
        path.write_bytes(b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 51]))
        np.testing.assert_allclose(read_pgm(path), [[0, 0.2]])

    def test_ppm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).random((5, 6, 3))
        path = tmp_path / "a.ppm"
        write_ppm(img, path)
        back = read_ppm(path)
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-7
        write_ppm(back, path)
        np.testing.assert_array_equal(read_ppm(path), back)

    def test_pgm_round_trip(self, tmp_path):
        img = np.arange(12).reshape(3, 4) / 255
        path = tmp_path / "a.pgm"
        write_pgm(img, path)
        np.testing.assert_array_equal(read_pgm(path), img.astype(np.float32))

    def test_sixteen_bit_rejected(self, tmp_path):
        path = tmp_path / "a.pgm"
        path.write_bytes(b"P5\n1 1\n65535\n\0\0")
        with pytest.raises(FormatError, match="unsupported maxval 65535"):
            read_pgm(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "a.ppm"
        path.write_bytes(b"P5\n1 1\n255\n\0")
        with pytest.raises(FormatError, match="bad magic"):
            read_ppm(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "a.ppm"
        path.write_bytes(b"P6\n2 2\n255\n" + bytes(11))
        with pytest.raises(FormatError, match="truncated"):
            read_ppm(path)

    def test_clipping_on_write(self, tmp_path):
        path = tmp_path / "a.pgm"
        write_pgm(np.array([[-1.0, 2.0]]), path)
        np.testing.assert_array_equal(read_pgm(path), [[0, 1]])

    def test_dispatch(self, tmp_path):
        img = np.random.default_rng(2).random((3, 3, 3))
        for ext in (".ppm", ".pfm"):
            path = tmp_path / f"x{ext}"
            write_image(img, path)
            assert read_image(path).shape == (3, 3, 3)
        with pytest.raises(ValueError, match="unsupported"):
            read_image(tmp_path / "x.bmp")

    def test_png(self, tmp_path):
        pytest.importorskip("PIL")
        img = np.random.default_rng(3).random((4, 5, 3))
        path = tmp_path / "x.png"
        write_image(img, path)
        assert np.abs(read_image(path) - img).max() <= 0.5 / 255 + 1e-7


class TestRender:
    def test_constant(self):
        out = render_disparity(np.full((3, 4), 2.0), range_hint=5)
        assert out.shape == (3, 4, 3)
        assert np.all(out == out[0, 0])

    def test_endpoints(self):
        out = render_disparity(np.array([[0.0, 5.0, 9.0]]), range_hint=5)
        np.testing.assert_allclose(out[0, 0], dataio.RAMP[0])
        np.testing.assert_allclose(out[0, 1], dataio.RAMP[-1])
        np.testing.assert_allclose(out[0, 2], dataio.RAMP[-1])

    def test_holes_black(self):
        out = render_disparity(np.array([[1.0, np.inf, np.nan]]))
        np.testing.assert_array_equal(out[0, 1:], 0)

    def test_monotone_luminance(self):
        out = render_disparity(np.linspace(0, 4, 50)[None], range_hint=4)
        lum = out[0] @ np.array([0.299, 0.587, 0.114])
        assert np.all(np.diff(lum) > 0)

    def test_auto_range(self):
        dx = np.linspace(0, 100, 1001)[None]
        out = render_disparity(dx)
        np.testing.assert_allclose(out[0, -1], dataio.RAMP[-1])
        assert not np.allclose(out[0, 900], dataio.RAMP[-1])

    def test_bad_range(self):
        with pytest.raises(ValueError):
            render_disparity(np.zeros((2, 2)), range_hint=0)


class TestDataset:
    def make_scene(self, root, name, disp=True, right=True, ndisp=None):
        d = root / name
        d.mkdir()
        img = np.random.default_rng(len(name)).random((4, 6, 3))
        write_ppm(img, d / "im0.ppm")
        if right:
            write_ppm(img, d / "im1.ppm")
        if disp:
            write_pfm(np.ones((4, 6)), d / "disp0.pfm")
        if ndisp:
            (d / "calib.txt").write_text(f"cam0=[1 0 0]\nndisp={ndisp}\nwidth=6\n")

    def test_empty(self, tmp_path):
        assert len(load_dataset(tmp_path)) == 0

    def test_missing_root(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope")

    def test_two_scenes_one_unsupervised(self, tmp_path, caplog):
        self.make_scene(tmp_path, "cones", ndisp=60)
        self.make_scene(tmp_path, "teddy", disp=False)
        with caplog.at_level(logging.WARNING):
            index = load_dataset(tmp_path)
        assert [s.name for s in index] == ["cones", "teddy"]
        assert [s.supervised for s in index] == [True, False]
        assert index.scenes[0].ndisp == 60 and index.scenes[1].ndisp is None
        assert index.problems == {"teddy": ["disp0"]}
        assert "teddy" in caplog.text

    def test_missing_image_skipped(self, tmp_path, caplog):
        self.make_scene(tmp_path, "a")
        self.make_scene(tmp_path, "b", right=False)
        with caplog.at_level(logging.WARNING):
            index = load_dataset(tmp_path)
        assert [s.name for s in index] == ["a"]
        assert index.problems == {"b": ["im1"]}
        assert "skipped" in caplog.text

    def test_load_scene(self, tmp_path):
        self.make_scene(tmp_path, "a")
        left, right, disp = load_scene(load_dataset(tmp_path).scenes[0])
        assert left.shape == (4, 6, 3) and disp.shape == (4, 6)

    def test_loading_does_not_touch_files(self, tmp_path):
        self.make_scene(tmp_path, "a")
        before = {p: p.stat().st_mtime_ns for p in tmp_path.rglob("*")}
        load_scene(load_dataset(tmp_path).scenes[0])
        assert before == {p: p.stat().st_mtime_ns for p in tmp_path.rglob("*")}


class TestCheckpointWrappers:
    def test_round_trip(self, tmp_path):
        net = small_network(seed=2)
        dataio.save_checkpoint(net, tmp_path / "m.ckpt")
        back = dataio.load_checkpoint(tmp_path / "m.ckpt")
        assert count_parameters(back) == count_parameters(net)
        x = np.random.default_rng(0).random((16, 20, 6)).astype(np.float32)
        np.testing.assert_array_equal(back.forward(x), net.forward(x))
