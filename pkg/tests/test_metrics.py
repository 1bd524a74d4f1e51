import numpy as np
import pytest

from fastdvd.errors import ShapeError
from fastdvd.metrics import PSNR_CAP_DB, mse, psnr_frame, psnr_sequence


def test_mse_basic():
    a = np.zeros((1, 3, 4, 4), np.float32)
    assert mse(a, a) == 0.0
    assert mse(a, a + np.float32(0.1)) == pytest.approx(0.01, rel=1e-6)
    with pytest.raises(ShapeError):
        mse(a, np.zeros((1, 3, 4, 5)))


def test_mse_matches_independent_summation():
    rng = np.random.default_rng(0)
    a, b = rng.random((2, 3, 17, 11)), rng.random((2, 3, 17, 11))
    total = 0.0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        total += (x - y) ** 2
    assert abs(mse(a, b) - total / a.size) < 1e-10


def test_psnr_frame_values():
    a = np.full((1, 3, 8, 8), 0.5)
    assert psnr_frame(a, a) == PSNR_CAP_DB == 100.0
    assert psnr_frame(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr_frame(a, a - 0.1) == psnr_frame(a - 0.1, a)


def test_psnr_matches_8bit_reference():
    rng = np.random.default_rng(1)
    clean8 = rng.integers(0, 256, (3, 32, 32))
    noisy8 = np.clip(clean8 + rng.integers(-20, 21, clean8.shape), 0, 255)
    ref = 10 * np.log10(255.0 ** 2 / np.mean((clean8 - noisy8) ** 2.0))
    got = psnr_frame(clean8[None] / 255.0, noisy8[None] / 255.0)
    assert abs(got - ref) < 0.01


def test_psnr_sequence():
    a = np.full((1, 3, 4, 4), 0.5)
    frames20 = a + 0.1
    frames30 = a + 10 ** -1.5
    rep = psnr_sequence([a, a], [frames20, frames30])
    assert rep.count == 2
    assert rep.per_frame == pytest.approx([20.0, 30.0])
    assert rep.sequence_avg == pytest.approx(25.0)
    single = psnr_sequence([a], [frames30])
    assert single.sequence_avg == single.per_frame[0]
    assert psnr_sequence([a, a], [a, a]).sequence_avg == 100.0
    with pytest.raises(ShapeError):
        psnr_sequence([a, a], [a])


def test_report_csv(tmp_path):
    a = np.full((1, 3, 4, 4), 0.5)
    rep = psnr_sequence([a, a, a], [a, a + 0.1, a])
    path = tmp_path / "r.csv"
    rep.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "frame_index,psnr_db" and len(lines) == 4
    assert lines[2].startswith("1,20.0")
    assert "over 3 frames" in rep.text()
