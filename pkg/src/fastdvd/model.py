"""Denoising block, two-step cascade and five-input variant.

Parameters live in a flat ``{name: array}`` store. A block with prefix
``block1`` owns ``block1.<layer>.weight``, ``block1.<layer>.bias`` and, for
layers followed by batch normalization, ``block1.<layer>.bn.gamma`` /
``.bn.beta`` / ``.bn.running_mean`` / ``.bn.running_var``.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .autograd import Eager, Node
from .errors import ShapeError
from .kernels import BatchNormParams, ConvParams
from .optim import orthogonalize_kernels

CASCADE = "cascade"
FIVE_INPUT = "five_input"
VARIANTS = (CASCADE, FIVE_INPUT)

DEFAULT_CHANNELS = (32, 64, 128)
FRAME_FEATURES = 30  # InputConv output channels per frame group


class LayerSpec(NamedTuple):
    name: str
    in_ch: int
    out_ch: int
    stride: int = 1
    groups: int = 1
    bn: bool = True


def block_layout(input_frames, channels=DEFAULT_CHANNELS):
    """The 16 convolutions of one denoising block, in execution order."""
    c0, c1, c2 = channels
    k = input_frames
    return [
        LayerSpec("inc.0", 4 * k, FRAME_FEATURES * k, groups=k),
        LayerSpec("inc.1", FRAME_FEATURES * k, c0),
        LayerSpec("down1.0", c0, c1, stride=2),
        LayerSpec("down1.1", c1, c1),
        LayerSpec("down1.2", c1, c1),
        LayerSpec("down2.0", c1, c2, stride=2),
        LayerSpec("down2.1", c2, c2),
        LayerSpec("down2.2", c2, c2),
        LayerSpec("up2.0", c2, c2),
        LayerSpec("up2.1", c2, c2),
        LayerSpec("up2.2", c2, 4 * c1, bn=False),
        LayerSpec("up1.0", c1, c1),
        LayerSpec("up1.1", c1, c1),
        LayerSpec("up1.2", c1, 4 * c0, bn=False),
        LayerSpec("outc.0", c0, c0),
        LayerSpec("outc.1", c0, 3, bn=False),
    ]


# Convolutions adjacent to the residual path: zeroing them (weights and bias)
# makes a block return its central frame unchanged.
RESIDUAL_ADJACENT = ("up2.2", "up1.2", "outc.1")


@dataclass
class DenBlockWeights:
    """View of one block's parameters inside a shared tensor store."""
    prefix: str
    input_frames: int
    channels: tuple
    tensors: dict

    @property
    def layout(self):
        return block_layout(self.input_frames, self.channels)

    def key(self, layer, field):
        return f"{self.prefix}.{layer}.{field}"

    def conv(self, spec):
        return ConvParams(self.tensors[self.key(spec.name, "weight")],
                          self.tensors[self.key(spec.name, "bias")],
                          spec.stride, spec.groups)

    def bn(self, spec):
        t = self.tensors
        return BatchNormParams(t[self.key(spec.name, "bn.gamma")],
                               t[self.key(spec.name, "bn.beta")],
                               t[self.key(spec.name, "bn.running_mean")],
                               t[self.key(spec.name, "bn.running_var")])

    def tensor_shapes(self):
        shapes = {}
        for spec in self.layout:
            shapes[self.key(spec.name, "weight")] = (spec.out_ch, spec.in_ch // spec.groups, 3, 3)
            shapes[self.key(spec.name, "bias")] = (spec.out_ch,)
            if spec.bn:
                for f in ("gamma", "beta", "running_mean", "running_var"):
                    shapes[self.key(spec.name, f"bn.{f}")] = (spec.out_ch,)
        return shapes


@dataclass
class ModelWeights:
    variant: str
    channels: tuple
    tensors: dict

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}")
        self.channels = tuple(int(c) for c in self.channels)

    def _block(self, prefix, frames):
        return DenBlockWeights(prefix, frames, self.channels, self.tensors)

    @property
    def blocks(self):
        if self.variant == CASCADE:
            return [self._block("block1", 3), self._block("block2", 3)]
        return [self._block("block", 5)]

    @property
    def block1(self):
        self._require(CASCADE)
        return self.blocks[0]

    @property
    def block2(self):
        self._require(CASCADE)
        return self.blocks[1]

    @property
    def block(self):
        self._require(FIVE_INPUT)
        return self.blocks[0]

    def _require(self, variant):
        if self.variant != variant:
            raise ValueError(f"operation needs a {variant} model, got {self.variant}")

    def expected_shapes(self):
        shapes = {}
        for b in self.blocks:
            shapes.update(b.tensor_shapes())
        return shapes

    def conv_kernels(self):
        """Yield ``(tensor_name, groups)`` for every convolution kernel."""
        for b in self.blocks:
            for spec in b.layout:
                yield b.key(spec.name, "weight"), spec.groups

    def trainable(self):
        """Learnable tensors (everything except batch-norm running stats)."""
        return {k: v for k, v in self.tensors.items() if ".running_" not in k}

    def conv_count(self, block_index=0):
        return len(self.blocks[block_index].layout)

    def copy(self):
        return ModelWeights(self.variant, self.channels,
                            {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype):
        return ModelWeights(self.variant, self.channels,
                            {k: v.astype(dtype) for k, v in self.tensors.items()})

    def parameter_count(self):
        return sum(v.size for k, v in self.trainable().items())


def init_weights(variant=CASCADE, channels=DEFAULT_CHANNELS, seed=0):
    """Fan-in scaled uniform init followed by one orthogonalization pass."""
    rng = np.random.default_rng(seed)
    w = ModelWeights(variant, channels, {})
    for block in w.blocks:
        for spec in block.layout:
            fan_in = spec.in_ch // spec.groups * 9
            bound = 1.0 / np.sqrt(fan_in)
            shape = (spec.out_ch, spec.in_ch // spec.groups, 3, 3)
            w.tensors[block.key(spec.name, "weight")] = rng.uniform(
                -bound, bound, shape).astype(np.float32)
            w.tensors[block.key(spec.name, "bias")] = rng.uniform(
                -bound, bound, spec.out_ch).astype(np.float32)
            if spec.bn:
                bn = BatchNormParams.identity(spec.out_ch)
                w.tensors[block.key(spec.name, "bn.gamma")] = bn.gamma
                w.tensors[block.key(spec.name, "bn.beta")] = bn.beta
                w.tensors[block.key(spec.name, "bn.running_mean")] = bn.running_mean
                w.tensors[block.key(spec.name, "bn.running_var")] = bn.running_var
    orthogonalize_kernels(w)
    return w


def _shape(x):
    return x.value.shape if isinstance(x, Node) else x.shape


def den_block_forward(w: DenBlockWeights, frames, noise_map, training=False, ops=None):
    """Run one denoising block.

    ``frames`` holds ``w.input_frames`` tensors of shape (n, 3, h, w) and
    ``noise_map`` is (n, 1, h, w). The block predicts the noise and returns
    ``central_frame - prediction``. Pass a :class:`~fastdvd.autograd.Graph`
    as ``ops`` to record the pass for training.
    """
    ops = ops or Eager()
    if len(frames) != w.input_frames:
        raise ShapeError(f"block expects {w.input_frames} frames, got {len(frames)}",
                         expected=w.input_frames, actual=len(frames))
    n, _, h, wd = _shape(frames[0])
    for f in frames:
        if _shape(f) != (n, 3, h, wd):
            raise ShapeError(f"frame shape {_shape(f)} differs from {(n, 3, h, wd)}",
                             expected=(n, 3, h, wd), actual=_shape(f))
    if _shape(noise_map) != (n, 1, h, wd):
        raise ShapeError(f"noise map must be {(n, 1, h, wd)}, got {_shape(noise_map)}",
                         expected=(n, 1, h, wd), actual=_shape(noise_map))
    if h % 4 or wd % 4:
        raise ShapeError(f"spatial dims {h}x{wd} must be multiples of 4; "
                         "pad the frames first (see video.pad_to_multiple)",
                         actual=(h, wd))

    t = w.tensors
    layers = {spec.name: spec for spec in w.layout}

    def conv(x, name, relu=True):
        spec = layers[name]
        y = ops.conv2d(x, ops.param(w.key(name, "weight"), t[w.key(name, "weight")]),
                       ops.param(w.key(name, "bias"), t[w.key(name, "bias")]),
                       spec.stride, spec.groups)
        if spec.bn:
            y = ops.batch_norm(
                y,
                ops.param(w.key(name, "bn.gamma"), t[w.key(name, "bn.gamma")]),
                ops.param(w.key(name, "bn.beta"), t[w.key(name, "bn.beta")]),
                t[w.key(name, "bn.running_mean")], t[w.key(name, "bn.running_var")],
                training)
        return ops.relu(y) if relu else y

    parts = []
    for f in frames:
        parts += [f, noise_map]
    x = ops.concat_channels(parts)
    x0 = conv(conv(x, "inc.0"), "inc.1")
    x1 = conv(conv(conv(x0, "down1.0"), "down1.1"), "down1.2")
    x2 = conv(conv(conv(x1, "down2.0"), "down2.1"), "down2.2")
    x2 = conv(conv(x2, "up2.0"), "up2.1")
    x2 = ops.pixel_shuffle(conv(x2, "up2.2", relu=False))
    x1 = ops.add(x1, x2)
    x1 = conv(conv(x1, "up1.0"), "up1.1")
    x1 = ops.pixel_shuffle(conv(x1, "up1.2", relu=False))
    x0 = ops.add(x0, x1)
    noise = conv(conv(x0, "outc.0"), "outc.1", relu=False)
    return ops.sub(frames[w.input_frames // 2], noise)


def _check_five(frames):
    if len(frames) != 5:
        raise ShapeError(f"expected 5 frames, got {len(frames)}", expected=5,
                         actual=len(frames))


def fastdvdnet_forward(w: ModelWeights, frames, noise_map, training=False, ops=None):
    """Two-step cascade over five consecutive frames.

    The three first-stage applications share ``w.block1``; the same noise
    map conditions both stages.
    """
    _check_five(frames)
    b1 = w.block1
    stage1 = [den_block_forward(b1, frames[i:i + 3], noise_map, training, ops)
              for i in range(3)]
    return den_block_forward(w.block2, stage1, noise_map, training, ops)


def five_input_forward(w: ModelWeights, frames, noise_map, training=False, ops=None):
    """Single block taking all five frames (one-step ablation variant)."""
    _check_five(frames)
    return den_block_forward(w.block, list(frames), noise_map, training, ops)


def model_forward(w: ModelWeights, frames, noise_map, training=False, ops=None):
    """Dispatch on ``w.variant``."""
    if w.variant == CASCADE:
        return fastdvdnet_forward(w, frames, noise_map, training, ops)
    return five_input_forward(w, frames, noise_map, training, ops)
