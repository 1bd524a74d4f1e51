import numpy as np
import pytest
from PIL import Image

from fastdvd.errors import SequenceIOError
from fastdvd.model import CASCADE, FIVE_INPUT, init_weights
from fastdvd.video import (Denoiser, FrameSequence, NoiseSpec, StreamState, add_awgn,
                           build_noise_map, crop, denoise_sequence, load_sequence,
                           pad_to_multiple, save_sequence, window_indices)

SMALL = (4, 8, 8)


def _write_pngs(directory, arrays, names=None):
    directory.mkdir(parents=True, exist_ok=True)
    for i, a in enumerate(arrays):
        Image.fromarray(a, "RGB").save(directory / (names[i] if names else f"{i:05d}.png"))


def _random_seq(rng, n, h, w):
    return FrameSequence.from_array(rng.random((n, 3, h, w), dtype=np.float32))


class TestIO:
    def test_roundtrip_pixel_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = [rng.integers(0, 256, (6, 7, 3), dtype=np.uint8) for _ in range(3)]
        _write_pngs(tmp_path / "in", arrays)
        seq = load_sequence(tmp_path / "in")
        assert len(seq) == 3 and seq.frames[0].shape == (1, 3, 6, 7)
        assert seq.frames[0].dtype == np.float32
        save_sequence(seq, tmp_path / "out")
        for i, a in enumerate(arrays):
            back = np.asarray(Image.open(tmp_path / "out" / f"{i:05d}.png"))
            np.testing.assert_array_equal(back, a)

    def test_numeric_order(self, tmp_path):
        arrays = [np.full((2, 2, 3), v, np.uint8) for v in (10, 20, 30)]
        _write_pngs(tmp_path, arrays, ["2.png", "10.png", "1.png"])
        seq = load_sequence(tmp_path)
        assert seq.names == ["1.png", "2.png", "10.png"]
        assert [round(float(f.max()) * 255) for f in seq.frames] == [30, 10, 20]

    def test_empty_directory(self, tmp_path):
        with pytest.raises(SequenceIOError):
            load_sequence(tmp_path)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(SequenceIOError):
            load_sequence(tmp_path / "nope")

    def test_mixed_dimensions(self, tmp_path):
        _write_pngs(tmp_path, [np.zeros((2, 2, 3), np.uint8), np.zeros((2, 3, 3), np.uint8)])
        with pytest.raises(SequenceIOError, match="expected"):
            load_sequence(tmp_path)

    def test_unreadable_file(self, tmp_path):
        _write_pngs(tmp_path, [np.zeros((2, 2, 3), np.uint8)])
        (tmp_path / "00001.png").write_bytes(b"not a png")
        with pytest.raises(SequenceIOError, match="00001"):
            load_sequence(tmp_path)

    def test_save_clamps_and_rounds(self, tmp_path):
        frame = np.array([-0.2, 0.5 / 255, 1.6 / 255, 1.3]).reshape(1, 1, 1, 4)
        seq = FrameSequence([np.repeat(frame, 3, axis=1).astype(np.float32)])
        save_sequence(seq, tmp_path)
        px = np.asarray(Image.open(tmp_path / "00000.png"))[0, :, 0]
        np.testing.assert_array_equal(px, [0, 0, 2, 255])


class TestNoise:
    def test_sigma_zero_is_exact(self):
        seq = _random_seq(np.random.default_rng(0), 3, 5, 5)
        out = add_awgn(seq, NoiseSpec(0.0, seed=3))
        for a, b in zip(seq.frames, out.frames):
            np.testing.assert_array_equal(a, b)

    def test_sample_statistics(self):
        seq = FrameSequence.from_array(np.full((4, 3, 250, 334), 0.5, np.float32))
        noise = np.concatenate([f.ravel() for f in add_awgn(seq, NoiseSpec(25, seed=1)).frames])
        noise = noise.astype(np.float64) - 0.5
        assert noise.size >= 1_000_000
        assert abs(noise.std() / (25 / 255) - 1) < 0.01
        assert abs(noise.mean()) < 3 * noise.std() / np.sqrt(noise.size)

    def test_clipped_in_range(self):
        seq = _random_seq(np.random.default_rng(1), 2, 16, 16)
        out = add_awgn(seq, NoiseSpec(80, clipped=True, seed=2))
        for f in out.frames:
            assert f.min() >= 0 and f.max() <= 1

    def test_seeds(self):
        seq = _random_seq(np.random.default_rng(2), 3, 8, 8)
        a = add_awgn(seq, NoiseSpec(25, seed=5))
        b = add_awgn(seq, NoiseSpec(25, seed=5))
        c = add_awgn(seq, NoiseSpec(25, seed=6))
        assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))
        assert not np.array_equal(a.frames[0], c.frames[0])
        assert not np.array_equal(a.frames[0] - seq.frames[0], a.frames[1] - seq.frames[1])

    def test_frame_noise_independent_of_sequence_length(self):
        seq = _random_seq(np.random.default_rng(3), 4, 8, 8)
        full = add_awgn(seq, NoiseSpec(10, seed=9))
        head = add_awgn(FrameSequence(seq.frames[:2]), NoiseSpec(10, seed=9))
        np.testing.assert_array_equal(full.frames[1], head.frames[1])

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            NoiseSpec(-1.0)

    def test_noise_map(self):
        m = build_noise_map(50, 4, 6)
        assert m.shape == (1, 1, 4, 6)
        np.testing.assert_allclose(m, 50 / 255)
        assert abs(float(m[0, 0, 0, 0]) - 0.19608) < 1e-5
        np.testing.assert_array_equal(build_noise_map(0, 2, 2), 0)


class TestWindow:
    @pytest.mark.parametrize("t,expected", [(0, [2, 1, 0, 1, 2]), (1, [1, 0, 1, 2, 3]),
                                            (42, [40, 41, 42, 43, 44]),
                                            (84, [82, 83, 84, 83, 82])])
    def test_examples(self, t, expected):
        assert window_indices(t, 85) == expected

    def test_short_sequences(self):
        assert window_indices(0, 1) == [0] * 5
        assert window_indices(0, 2) == [0, 1, 0, 1, 0]
        assert window_indices(1, 3) == [1, 0, 1, 2, 1]

    def test_invalid(self):
        with pytest.raises(ValueError):
            window_indices(3, 3)


class TestPadding:
    def test_examples(self):
        assert pad_to_multiple(np.zeros((1, 3, 540, 960)))[0].shape == (1, 3, 540, 960)
        assert pad_to_multiple(np.zeros((1, 3, 480, 854)))[0].shape == (1, 3, 480, 856)

    @pytest.mark.parametrize("h,w", [(5, 7), (1, 1), (1, 6), (2, 3), (9, 9)])
    def test_crop_inverts_pad(self, h, w):
        x = np.random.default_rng(h * w).random((1, 3, h, w))
        padded, dims = pad_to_multiple(x)
        assert padded.shape[2] % 4 == 0 and padded.shape[3] % 4 == 0
        np.testing.assert_array_equal(crop(padded, dims), x)

    def test_reflection(self):
        x = np.arange(6.0).reshape(1, 1, 1, 6)
        padded, _ = pad_to_multiple(np.repeat(x, 2, axis=2))
        np.testing.assert_array_equal(padded[0, 0, 0], [0, 1, 2, 3, 4, 5, 4, 3])


@pytest.fixture(scope="module")
def weights():
    return init_weights(CASCADE, SMALL, seed=0)


class TestDenoise:
    @pytest.mark.parametrize("n", [1, 2, 3, 4, 7])
    def test_streaming_matches_naive(self, weights, n):
        seq = _random_seq(np.random.default_rng(n), n, 10, 13)
        a = denoise_sequence(seq, 20, weights, streaming=True)
        b = denoise_sequence(seq, 20, weights, streaming=False)
        assert len(a) == n and a.frames[0].shape == (1, 3, 10, 13)
        for x, y in zip(a.frames, b.frames):
            np.testing.assert_array_equal(x, y)

    def test_block1_counters(self, weights):
        seq = _random_seq(np.random.default_rng(0), 8, 8, 8)
        den = Denoiser(weights, 25, streaming=True)
        counts = []
        for t in range(len(seq)):
            before = den.block1_evals
            den.denoise_frame(seq, t)
            counts.append(den.block1_evals - before)
        assert counts == [3] + [1] * 7
        assert den.block2_evals == 8
        naive = Denoiser(weights, 25, streaming=False)
        naive(seq)
        assert naive.block1_evals == 24

    def test_single_frame(self, weights):
        seq = _random_seq(np.random.default_rng(1), 1, 8, 8)
        out = denoise_sequence(seq, 10, weights)
        assert len(out) == 1
        assert np.all((out.frames[0] >= 0) & (out.frames[0] <= 1))

    def test_five_input_model(self):
        w = init_weights(FIVE_INPUT, SMALL, seed=0)
        seq = _random_seq(np.random.default_rng(2), 4, 8, 8)
        out = denoise_sequence(seq, 10, w, streaming=True)
        ref = denoise_sequence(seq, 10, w, streaming=False)
        np.testing.assert_array_equal(out.frames[3], ref.frames[3])


def test_stream_state_lru():
    s = StreamState(capacity=2)
    s.put("a", 1)
    s.put("b", 2)
    assert s.get("a") == 1
    s.put("c", 3)
    assert s.get("b") is None and s.get("a") == 1 and s.get("c") == 3
