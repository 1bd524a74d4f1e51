"""Per-frame latency benchmark on synthetic frames."""

from dataclasses import dataclass
import time

import numpy as np

from .video import Denoiser, FrameSequence

WARMUP_FRAMES = 2


@dataclass
class ModeStats:
    name: str
    frame_ms: list          # steady-state frames only
    block1_per_frame: float

    @property
    def mean_ms(self):
        return float(np.mean(self.frame_ms))

    @property
    def median_ms(self):
        return float(np.median(self.frame_ms))


@dataclass
class BenchReport:
    width: int
    height: int
    frames: int
    naive: ModeStats
    streaming: ModeStats = None

    @property
    def speedup(self):
        if self.streaming is None:
            return None
        return self.naive.mean_ms / self.streaming.mean_ms

    def lines(self):
        out = [f"bench {self.width}x{self.height}, {self.frames} frames "
               f"({WARMUP_FRAMES} warm-up frames excluded)"]
        for s in (self.naive, self.streaming):
            if s is not None:
                out.append(f"{s.name:<9} mean {s.mean_ms:.1f} ms  median {s.median_ms:.1f} ms"
                           f"  block1 evals/frame {s.block1_per_frame:.2f}")
        if self.streaming is not None:
            out.append(f"speedup (naive/streaming mean) {self.speedup:.2f}x")
        return out


def random_sequence(width, height, frames, seed=0):
    rng = np.random.default_rng(seed)
    data = rng.random((frames, 3, height, width), dtype=np.float32)
    return FrameSequence.from_array(data)


def run_benchmark(weights, width=960, height=540, frames=20, sigma=25.0,
                  streaming=True, seed=0, clock=time.perf_counter):
    """Time frame-by-frame denoising of a random sequence.

    The naive pipeline is always measured. With ``streaming`` the cached
    pipeline is measured too; the two are interleaved frame by frame so
    drifts in machine speed affect both alike.
    """
    if frames <= WARMUP_FRAMES:
        raise ValueError(f"need more than {WARMUP_FRAMES} frames, got {frames}")
    seq = random_sequence(width, height, frames, seed)
    modes = [("naive", Denoiser(weights, sigma, streaming=False))]
    if streaming:
        modes.append(("streaming", Denoiser(weights, sigma, streaming=True)))
    times = {name: [] for name, _ in modes}
    evals = {name: [] for name, _ in modes}
    for t in range(frames):
        for name, den in modes:
            before = den.block1_evals
            start = clock()
            den.denoise_frame(seq, t)
            elapsed = clock() - start
            if t >= WARMUP_FRAMES:
                times[name].append(elapsed * 1e3)
                evals[name].append(den.block1_evals - before)
    stats = {name: ModeStats(name, times[name], float(np.mean(evals[name])))
             for name, _ in modes}
    return BenchReport(width, height, frames, stats["naive"], stats.get("streaming"))
