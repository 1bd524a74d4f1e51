"""MSE and PSNR on [0, 1] frames."""

from dataclasses import dataclass
import csv

import numpy as np

from .errors import ShapeError

PSNR_CAP_DB = 100.0
_MSE_FLOOR = 1e-10


def _check_pair(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}",
                         expected=np.shape(a), actual=np.shape(b))


def mse(a, b):
    """Mean squared difference over all elements, accumulated in float64."""
    _check_pair(a, b)
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(d * d))


def psnr_from_mse(value):
    if value < _MSE_FLOOR:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / value))


def psnr_frame(clean, estimate):
    """PSNR in dB with peak 1, over all channels jointly; 100 dB cap."""
    return psnr_from_mse(mse(clean, estimate))


@dataclass
class PsnrReport:
    per_frame: list
    sequence_avg: float
    count: int

    def text(self):
        return f"PSNR {self.sequence_avg:.2f} dB over {self.count} frames"

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["frame_index", "psnr_db"])
            for i, v in enumerate(self.per_frame):
                writer.writerow([i, f"{v:.6f}"])


def psnr_sequence(clean_frames, est_frames) -> PsnrReport:
    """Per-frame PSNR and their arithmetic mean.

    Both arguments are sequences of frames (lists, ``FrameSequence`` or a
    stacked array indexed along the first axis).
    """
    if len(clean_frames) != len(est_frames):
        raise ShapeError(f"sequence lengths differ: {len(clean_frames)} vs "
                         f"{len(est_frames)}", expected=len(clean_frames),
                         actual=len(est_frames))
    if len(clean_frames) == 0:
        raise ValueError("cannot compute PSNR of an empty sequence")
    values = [psnr_frame(c, e) for c, e in zip(_frames(clean_frames), _frames(est_frames))]
    return PsnrReport(values, float(np.mean(values)), len(values))


def _frames(seq):
    return seq.frames if hasattr(seq, "frames") else seq
