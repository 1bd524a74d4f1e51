"""Training configuration, patch sampling, augmentation and the training loop."""

from dataclasses import dataclass, field, fields
import logging
import os
from pathlib import Path
import queue
import threading

import numpy as np
from PIL import Image

from .autograd import Graph
from .errors import ConfigError, TrainingDivergedError
from .model import CASCADE, DEFAULT_CHANNELS, VARIANTS, model_forward
from .optim import AdamState, adam_step, lr_for_epoch, orthogonalize_kernels
from .video import SPAN, load_sequence, list_frame_files
from .weights_io import save_weights

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Training hyper-parameters; the defaults are the full-scale recipe."""
    patch_size: int = 96
    temporal_span: int = 5
    sigma_range: tuple = (5.0, 50.0)
    epochs: int = 80
    batch_size: int = 96
    lr_schedule: tuple = ((0, 1e-3), (50, 1e-4), (60, 1e-6))
    ortho_epochs: int = 60
    sample_count: int = 384000
    flips: bool = True
    scale_factors: tuple = (0.9, 1.0, 1.1)
    seed: int = 0
    variant: str = CASCADE
    channels: tuple = DEFAULT_CHANNELS
    clipped: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        def bad(key, msg):
            raise ConfigError(f"{key}: {msg}", key=key)

        if self.temporal_span != SPAN:
            bad("temporal_span", f"must be {SPAN}")
        if self.variant not in VARIANTS:
            bad("variant", f"must be one of {', '.join(VARIANTS)}")
        if self.patch_size < 4 or self.patch_size % 4:
            bad("patch_size", "must be a positive multiple of 4")
        lo, hi = self.sigma_range
        if not 0 <= lo <= hi <= 255:
            bad("sigma_range", "need 0 <= low <= high <= 255")
        for key in ("epochs", "batch_size", "sample_count"):
            if getattr(self, key) < 1:
                bad(key, "must be >= 1")
        if self.ortho_epochs < 0:
            bad("ortho_epochs", "must be >= 0")
        starts = [s for s, _ in self.lr_schedule]
        if not starts or starts[0] != 0 or any(b <= a for a, b in zip(starts, starts[1:])):
            bad("lr_schedule", "start epochs must increase strictly from 0")
        if any(not r > 0 for _, r in self.lr_schedule):
            bad("lr_schedule", "rates must be positive")
        if not self.scale_factors or any(not f > 0 for f in self.scale_factors):
            bad("scale_factors", "need at least one positive factor")
        if len(self.channels) != 3 or any(c < 1 for c in self.channels):
            bad("channels", "need three positive widths")

    @property
    def steps_per_epoch(self):
        return max(1, self.sample_count // self.batch_size)


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _schedule(text):
    out = []
    for item in text.split(","):
        start, rate = item.split(":")
        out.append((int(start), float(rate)))
    return tuple(out)


_PARSERS = {
    "patch_size": int,
    "temporal_span": int,
    "sigma_range": _floats,
    "epochs": int,
    "batch_size": int,
    "lr_schedule": _schedule,
    "ortho_epochs": int,
    "sample_count": int,
    "flips": _bool,
    "scale_factors": _floats,
    "seed": int,
    "variant": str.strip,
    "channels": lambda t: tuple(int(v) for v in t.split(",")),
    "clipped": _bool,
}


def parse_train_config(text) -> TrainConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Lists are comma separated and the schedule is written as
    ``start:rate,start:rate``. Unknown keys raise :class:`ConfigError`.
    """
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"unknown config key {key!r}", key=key)
        try:
            values[key] = _PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", key=key) from exc
    if "sigma_range" in values and len(values["sigma_range"]) != 2:
        raise ConfigError("sigma_range needs two values", key="sigma_range")
    return TrainConfig(**values)


def load_train_config(path) -> TrainConfig:
    with open(path) as f:
        return parse_train_config(f.read())


def format_train_config(cfg: TrainConfig) -> str:
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, tuple) and v and isinstance(v[0], tuple):
            return ",".join(f"{s}:{r!r}" for s, r in v)
        if isinstance(v, tuple):
            return ",".join(repr(x) for x in v)
        return str(v)
    return "".join(f"{f.name} = {fmt(getattr(cfg, f.name))}\n" for f in fields(cfg))


def load_dataset(directory):
    """Each subdirectory holding numbered PNG frames becomes one sequence.

    Returns a list of (t, 3, h, w) float32 arrays in subdirectory name order.
    """
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    seqs = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        if list_frame_files(sub):
            seqs.append(load_sequence(sub).stack())
    if not seqs:
        raise ValueError(f"no frame sequences under {root}")
    return seqs


def rescale_frames(frames, factor):
    """Bilinearly resize a (t, 3, h, w) stack by ``factor``."""
    if factor == 1.0:
        return frames
    t, c, h, w = frames.shape
    size = (max(1, round(w * factor)), max(1, round(h * factor)))
    out = np.empty((t, c, size[1], size[0]), dtype=np.float32)
    for i in range(t):
        for ch in range(c):
            img = Image.fromarray(np.ascontiguousarray(frames[i, ch], dtype=np.float32))
            out[i, ch] = np.asarray(img.resize(size, Image.BILINEAR))
    return np.clip(out, 0.0, 1.0)


@dataclass
class TrainingSample:
    noisy: np.ndarray      # (5, 3, p, p)
    noise_map: np.ndarray  # (1, p, p)
    clean: np.ndarray      # (3, p, p), the central frame
    sigma: float = 0.0


def augment(sample: TrainingSample, rng) -> TrainingSample:
    """Independent horizontal and vertical flips, each with probability 1/2."""
    hflip = rng.random() < 0.5
    vflip = rng.random() < 0.5
    axes = [a for a, on in ((-1, hflip), (-2, vflip)) if on]
    if not axes:
        return sample
    flip = lambda a: np.ascontiguousarray(np.flip(a, axis=axes))  # noqa: E731
    return TrainingSample(flip(sample.noisy), flip(sample.noise_map),
                          flip(sample.clean), sample.sigma)


def _sources(dataset, config):
    """Eligible (sequence, scaled frames) pairs grouped by sequence."""
    p = config.patch_size
    sources = []
    for i, seq in enumerate(dataset):
        if seq.shape[0] < SPAN:
            log.warning("skipping sequence %d: %d frames, need %d", i, seq.shape[0], SPAN)
            continue
        scaled = []
        for f in config.scale_factors:
            s = rescale_frames(seq, f)
            if min(s.shape[2:]) >= p:
                scaled.append(s)
        if not scaled:
            log.warning("skipping sequence %d: %dx%d is smaller than patch %d",
                        i, seq.shape[3], seq.shape[2], p)
            continue
        sources.append(scaled)
    if not sources:
        raise ValueError("no sequence in the dataset is long and large enough to sample")
    return sources


def sample_patches(dataset, config: TrainConfig, rng):
    """Endless stream of :class:`TrainingSample` drawn from ``dataset``."""
    sources = _sources(dataset, config)
    p = config.patch_size
    lo, hi = config.sigma_range
    half = SPAN // 2
    while True:
        scaled = sources[rng.integers(len(sources))]
        frames = scaled[rng.integers(len(scaled))]
        t = rng.integers(half, frames.shape[0] - half)
        y = rng.integers(frames.shape[2] - p + 1)
        x = rng.integers(frames.shape[3] - p + 1)
        clean = frames[t - half:t + half + 1, :, y:y + p, x:x + p]
        sigma = float(rng.uniform(lo, hi))
        noise = rng.standard_normal(clean.shape, dtype=np.float32)
        noisy = clean + noise * np.float32(sigma / 255.0)
        if config.clipped:
            np.clip(noisy, 0.0, 1.0, out=noisy)
        nmap = np.full((1, p, p), sigma / 255.0, dtype=np.float32)
        sample = TrainingSample(noisy, nmap, clean[half].copy(), sigma)
        if config.flips:
            sample = augment(sample, rng)
        yield sample


def make_batch(samples):
    """Stack samples into ``(frames, noise_map, clean)`` model inputs."""
    noisy = np.stack([s.noisy for s in samples], axis=1)
    frames = [np.ascontiguousarray(noisy[k]) for k in range(noisy.shape[0])]
    nmap = np.stack([s.noise_map for s in samples])
    clean = np.stack([s.clean for s in samples])
    return frames, nmap, clean


def _batches(dataset, config, rng):
    stream = sample_patches(dataset, config, rng)
    while True:
        yield make_batch([next(stream) for _ in range(config.batch_size)])


class _Prefetcher:
    """Runs a batch generator on a worker thread, preserving its order."""

    def __init__(self, gen, depth):
        self._queue = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, args=(gen,), daemon=True)
        self._thread.start()

    def _put(self, item):
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                pass
        return False

    def _run(self, gen):
        try:
            for item in gen:
                if not self._put(item):
                    return
        except BaseException as exc:  # surfaced to the consumer
            self._put(exc)

    def __next__(self):
        item = self._queue.get()
        if isinstance(item, BaseException):
            raise item
        return item

    def close(self):
        self._stop.set()
        self._thread.join()


@dataclass
class TrainResult:
    weights: object
    epoch_losses: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)


def train_step(weights, batch, state, lr):
    """One ADAM step on ``batch``; returns the loss before the update."""
    frames, nmap, clean = batch
    g = Graph()
    out = model_forward(weights, frames, nmap, training=True, ops=g)
    loss = g.mse_loss(out, clean)
    value = float(loss.value)
    grads = g.backward(loss)
    if np.isfinite(value):
        adam_step(weights.trainable(), grads, state, lr)
    return value


def train(weights, dataset, config: TrainConfig, log_file=None, checkpoint_dir=None,
          prefetch=0, progress=None) -> TrainResult:
    """Train ``weights`` in place.

    Args:
        weights: initial ``ModelWeights``; updated in place and returned.
        dataset: list of (t, 3, h, w) clean sequences.
        config: hyper-parameters.
        log_file: optional path or text stream for ``epoch,step,loss,lr`` lines.
        checkpoint_dir: if set, weights are saved there after every epoch.
        prefetch: number of batches prepared ahead on a worker thread
            (0 disables the thread). The batch order does not depend on it.
        progress: optional callable ``progress(epoch, mean_loss)``.

    Raises:
        TrainingDivergedError: the loss became NaN or infinite.
    """
    if weights.variant != config.variant:
        raise ConfigError(f"model is {weights.variant} but config says {config.variant}",
                          key="variant")
    rng = np.random.default_rng(config.seed)
    batches = _batches(dataset, config, rng)
    if prefetch > 0:
        batches = _Prefetcher(batches, prefetch)
    own_log = isinstance(log_file, (str, os.PathLike))
    out = open(log_file, "w") if own_log else log_file
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)
    state = AdamState()
    result = TrainResult(weights)
    try:
        if out is not None:
            out.write("epoch,step,loss,lr\n")
        for epoch in range(config.epochs):
            lr = lr_for_epoch(config.lr_schedule, epoch)
            losses = []
            for step in range(config.steps_per_epoch):
                loss = train_step(weights, next(batches), state, lr)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(epoch, step, loss)
                losses.append(loss)
                if out is not None:
                    out.write(f"{epoch},{step},{loss:.9g},{lr:.9g}\n")
            if epoch < config.ortho_epochs:
                orthogonalize_kernels(weights)
            mean = float(np.mean(losses))
            result.epoch_losses.append(mean)
            result.step_losses.extend(losses)
            log.info("epoch %d: mean loss %.6g (lr %g)", epoch, mean, lr)
            if checkpoint_dir is not None:
                save_weights(weights, Path(checkpoint_dir) / f"epoch_{epoch:03d}.fdw")
            if progress is not None:
                progress(epoch, mean)
    finally:
        if isinstance(batches, _Prefetcher):
            batches.close()
        if own_log:
            out.close()
    return result
