"""Frame sequence I/O, noise synthesis, temporal windowing and inference.

Frames are ``(1, 3, h, w)`` float32 arrays with values in [0, 1]. Noise
levels are given on the 0-255 scale everywhere and divided by 255 here.
"""

from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
import re

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import SequenceIOError, ShapeError
from .model import CASCADE, den_block_forward, fastdvdnet_forward, five_input_forward

FRAME_PATTERN = "{:05d}.png"
_NUMERIC = re.compile(r"^(\d+)\.png$", re.IGNORECASE)
SPAN = 5


@dataclass
class FrameSequence:
    """An ordered list of same-sized RGB frames of shape (1, 3, h, w)."""
    frames: list
    fps: float = None
    names: list = field(default_factory=list)

    def __post_init__(self):
        if not self.frames:
            raise SequenceIOError("a sequence needs at least one frame")
        shape = self.frames[0].shape
        if len(shape) != 4 or shape[:2] != (1, 3):
            raise ShapeError(f"frames must be (1, 3, h, w), got {shape}",
                             expected="(1, 3, h, w)", actual=shape)
        for i, f in enumerate(self.frames):
            if f.shape != shape:
                raise ShapeError(f"frame {i} has shape {f.shape}, expected {shape}",
                                 expected=shape, actual=f.shape)

    def __len__(self):
        return len(self.frames)

    @property
    def height(self):
        return self.frames[0].shape[2]

    @property
    def width(self):
        return self.frames[0].shape[3]

    def stack(self):
        """All frames as one (t, 3, h, w) array."""
        return np.concatenate(self.frames, axis=0)

    @classmethod
    def from_array(cls, array, fps=None):
        """Build from a (t, 3, h, w) array."""
        array = np.asarray(array, dtype=np.float32)
        return cls([array[i:i + 1].copy() for i in range(array.shape[0])], fps)


def frame_from_uint8(rgb):
    """(h, w, 3) uint8 image to a (1, 3, h, w) float32 frame."""
    return (rgb.astype(np.float32) / 255.0).transpose(2, 0, 1)[None].copy()


def frame_to_uint8(frame):
    """Inverse of :func:`frame_from_uint8` with rounding and clamping."""
    q = np.clip(np.rint(frame[0].transpose(1, 2, 0) * 255.0), 0, 255)
    return q.astype(np.uint8)


def list_frame_files(directory):
    """PNG files named by an integer, in numeric order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise SequenceIOError(f"not a directory: {directory}")
    numbered = []
    for entry in directory.iterdir():
        m = _NUMERIC.match(entry.name)
        if m and entry.is_file():
            numbered.append((int(m.group(1)), entry))
    numbered.sort()
    return [p for _, p in numbered]


def load_sequence(directory) -> FrameSequence:
    files = list_frame_files(directory)
    if not files:
        raise SequenceIOError(f"no numbered PNG frames in {directory}")
    frames = []
    for path in files:
        try:
            with Image.open(path) as img:
                rgb = np.asarray(img.convert("RGB"))
        except (OSError, UnidentifiedImageError) as exc:
            raise SequenceIOError(f"cannot read frame {path}: {exc}") from exc
        if frames and rgb.shape[:2] != frames[0].shape[2:]:
            raise SequenceIOError(
                f"frame {path.name} is {rgb.shape[1]}x{rgb.shape[0]}, expected "
                f"{frames[0].shape[3]}x{frames[0].shape[2]}")
        frames.append(frame_from_uint8(rgb))
    return FrameSequence(frames, names=[p.name for p in files])


def save_sequence(seq: FrameSequence, directory):
    """Write frames as ``00000.png``, ``00001.png``, ..."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(seq.frames):
            Image.fromarray(frame_to_uint8(frame), "RGB").save(
                directory / FRAME_PATTERN.format(i))
    except OSError as exc:
        raise SequenceIOError(f"cannot write frames to {directory}: {exc}") from exc


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float
    clipped: bool = False
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ValueError(f"sigma must be a finite value >= 0, got {self.sigma}")


def frame_rng(seed, index):
    """Counter-based generator for frame ``index`` of a run seeded by ``seed``.

    Each frame gets its own stream so noise does not depend on the order in
    which frames are processed.
    """
    ss = np.random.SeedSequence(int(seed) & (2 ** 64 - 1), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


def awgn_frame(frame, spec: NoiseSpec, index):
    if spec.sigma == 0:
        out = frame.copy()
    else:
        noise = frame_rng(spec.seed, index).standard_normal(frame.shape, dtype=np.float32)
        out = frame + noise * np.float32(spec.sigma / 255.0)
    if spec.clipped:
        np.clip(out, 0.0, 1.0, out=out)
    return out


def add_awgn(seq: FrameSequence, spec: NoiseSpec) -> FrameSequence:
    frames = [awgn_frame(f, spec, i) for i, f in enumerate(seq.frames)]
    return FrameSequence(frames, seq.fps, list(seq.names))


def build_noise_map(sigma, h, w, n=1, dtype=np.float32):
    """Constant noise map of value ``sigma / 255``, shape (n, 1, h, w)."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    return np.full((n, 1, h, w), sigma / 255.0, dtype=dtype)


def reflect_index(i, n):
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i %= period
    return period - i if i > n - 1 else i


def window_indices(t, n_frames):
    """Indices of the five frames around ``t``, reflected at both ends."""
    if n_frames < 1 or not 0 <= t < n_frames:
        raise ValueError(f"need 0 <= t < n_frames, got t={t}, n_frames={n_frames}")
    half = SPAN // 2
    return [reflect_index(t + k, n_frames) for k in range(-half, half + 1)]


def pad_to_multiple(frame, multiple=4):
    """Reflect-pad bottom/right so h and w are multiples of ``multiple``.

    Returns ``(padded, (h, w))``; :func:`crop` undoes it.
    """
    h, w = frame.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if ph == 0 and pw == 0:
        return frame, (h, w)
    pad = [(0, 0)] * (frame.ndim - 2) + [(0, ph), (0, pw)]
    # numpy's reflect mode repeats the pattern when the pad exceeds the size
    mode = "reflect" if min(h, w) > 1 else "edge"
    return np.pad(frame, pad, mode=mode), (h, w)


def crop(frame, dims):
    h, w = dims
    return frame[..., :h, :w]


class StreamState:
    """Small LRU memo of first-stage block outputs.

    Entries are keyed by the triplet of source frame indices. Reflection at
    the sequence ends produces triplets like (2, 1, 0) whose center index is
    shared with (0, 1, 2), so the center alone is not a sufficient key.
    """

    def __init__(self, capacity=3):
        self.capacity = capacity
        self.entries = OrderedDict()

    def get(self, key):
        value = self.entries.get(key)
        if value is not None:
            self.entries.move_to_end(key)
        return value

    def put(self, key, value):
        self.entries[key] = value
        self.entries.move_to_end(key)
        while len(self.entries) > self.capacity:
            self.entries.popitem(last=False)

    def clear(self):
        self.entries.clear()


class Denoiser:
    """Frame-by-frame video denoiser with optional first-stage memoization.

    ``block1_evals`` and ``block2_evals`` count block applications since
    construction.
    """

    def __init__(self, weights, sigma, streaming=True):
        if sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        self.weights = weights
        self.sigma = float(sigma)
        self.streaming = streaming and weights.variant == CASCADE
        self.state = StreamState()
        self.block1_evals = 0
        self.block2_evals = 0
        self._padded = OrderedDict()
        self._map = None

    def _frame(self, seq, i):
        f = self._padded.get(i)
        if f is None:
            f, _ = pad_to_multiple(seq.frames[i])
            self._padded[i] = f
            while len(self._padded) > SPAN + 2:
                self._padded.popitem(last=False)
        return f

    def _noise_map(self, h, w):
        if self._map is None or self._map.shape[2:] != (h, w):
            self._map = build_noise_map(self.sigma, h, w)
        return self._map

    def denoise_frame(self, seq: FrameSequence, t):
        idx = window_indices(t, len(seq))
        frames = [self._frame(seq, i) for i in idx]
        nmap = self._noise_map(*frames[0].shape[2:])
        w = self.weights
        if w.variant != CASCADE:
            out = five_input_forward(w, frames, nmap)
        elif self.streaming:
            stage1 = []
            for k in range(3):
                key = tuple(idx[k:k + 3])
                y = self.state.get(key)
                if y is None:
                    y = den_block_forward(w.block1, frames[k:k + 3], nmap)
                    self.block1_evals += 1
                    self.state.put(key, y)
                stage1.append(y)
            out = den_block_forward(w.block2, stage1, nmap)
            self.block2_evals += 1
        else:
            out = fastdvdnet_forward(w, frames, nmap)
            self.block1_evals += 3
            self.block2_evals += 1
        out = crop(out, (seq.height, seq.width))
        return np.clip(out, 0.0, 1.0)

    def __call__(self, seq: FrameSequence):
        return FrameSequence([self.denoise_frame(seq, t) for t in range(len(seq))],
                             seq.fps, list(seq.names))


def denoise_sequence(seq: FrameSequence, sigma, weights, streaming=True) -> FrameSequence:
    """Denoise every frame of ``seq`` given its noise level ``sigma`` (0-255)."""
    return Denoiser(weights, sigma, streaming)(seq)
