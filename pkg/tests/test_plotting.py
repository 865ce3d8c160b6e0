import numpy as np
import pytest

from rmelnet.plotting import attention_image, grid_image, read_pgm, render_sample_figure, to_gray, write_pgm


class TestGray:
    def test_linear_map(self):
        assert to_gray(np.array([0.0, 0.5, 1.0, 2.0, -1.0]), 0, 1).tolist() == [0, 128, 255, 255, 0]

    def test_zero_range_is_mid_gray(self):
        assert (to_gray(np.full((3, 2), 4.0), 4.0, 4.0) == 128).all()

    def test_grid_orientation(self):
        v = np.zeros((5, 3))
        v[0, 0] = 1.0  # first frame, lowest bin
        img, bounds = grid_image(v)
        assert img.shape == (3, 5) and bounds == (0.0, 1.0)
        assert img[-1, 0] == 255 and img.sum() == 255

    def test_attention_values(self):
        w = np.array([[0.2, 0.8], [1.0, 0.0], [0.5, 0.5]])
        img = attention_image(w)
        assert img.shape == (2, 3)
        assert img[::-1].T.tolist() == [[51, 204], [255, 0], [128, 128]]


class TestPgm:
    def test_round_trip_with_whitespace_valued_pixels(self, tmp_path):
        img = np.array([[9, 10, 32], [13, 0, 255]], dtype=np.uint8)
        write_pgm(tmp_path / "a.pgm", img)
        assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)

    def test_header(self, tmp_path):
        write_pgm(tmp_path / "a.pgm", np.zeros((2, 3), dtype=np.uint8))
        assert (tmp_path / "a.pgm").read_bytes() == b"P5\n3 2\n255\n" + bytes(6)

    @pytest.mark.parametrize("data", [b"P6\n1 1\n255\n\0", b"P5\n2 2\n255\n\0"])
    def test_rejects(self, tmp_path, data):
        (tmp_path / "b.pgm").write_bytes(data)
        with pytest.raises(ValueError):
            read_pgm(tmp_path / "b.pgm")


class TestFigure:
    def test_png_written_and_stable(self, tmp_path):
        rng = np.random.default_rng(0)
        grid, attn = rng.normal(size=(10, 4)), rng.uniform(size=(10, 6))
        render_sample_figure(tmp_path / "a.png", grid, attn, title="seed 1")
        render_sample_figure(tmp_path / "b.png", grid, attn, title="seed 1")
        data = (tmp_path / "a.png").read_bytes()
        assert data[:8] == b"\x89PNG\r\n\x1a\n"
        assert data == (tmp_path / "b.png").read_bytes()
