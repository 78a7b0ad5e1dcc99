"""Conditional PatchGAN discriminator with foreground-aware patch masking."""
from __future__ import annotations

import numpy as np

from .autodiff import Adam, Tensor, concat, conv2d, conv_output_size, leaky_relu, sigmoid

KERNEL = 4
PADDING = 1
STRIDES = (2, 2, 2, 1, 1)
WIDTHS = (64, 128, 256, 512)


def receptive_field(strides=STRIDES, kernel=KERNEL):
    r, jump = 1, 1
    for s in strides:
        r += (kernel - 1) * jump
        jump *= s
    return r


def receptive_field_offset(strides=STRIDES, padding=PADDING):
    """Input coordinate of the first pixel seen by output cell 0 (negative = padding)."""
    offset, jump = 0, 1
    for s in strides:
        offset -= padding * jump
        jump *= s
    return offset


def score_map_size(size, strides=STRIDES):
    for s in strides:
        size = conv_output_size(size, KERNEL, s, PADDING)
    return size


def parameter_count(input_channels=6, widths=WIDTHS):
    chans = (input_channels,) + tuple(widths) + (1,)
    return sum(co * ci * KERNEL * KERNEL + co for ci, co in zip(chans[:-1], chans[1:]))


class PatchDiscriminator:
    """Five 4x4 conv blocks scoring 70x70 patches as real or fake.

    The input is the condition image stacked with the residual
    ``candidate - condition``; there are no normalization layers.

    Parameters
    ----------
    input_channels : int
        Channels after stacking condition and residual (6 for RGB).
    widths : tuple of int
        Output channels of the first four blocks.
    seed : int
        Seed for the N(0, 0.02) weight initialization.
    negative_slope : float
        Leaky ReLU slope after blocks 1-4.
    lr : float
        Adam learning rate used by :meth:`step`.
    dtype : numpy dtype
        Parameter precision; float64 is only needed for gradient checks.
    """

    def __init__(self, input_channels=6, widths=WIDTHS, seed=0, negative_slope=0.2, lr=1e-4, dtype=np.float32):
        if input_channels != 6:
            raise ValueError("the discriminator takes condition RGB + residual RGB (6 channels)")
        if len(widths) != 4:
            raise ValueError("widths must list the four hidden block widths")
        self.input_channels = input_channels
        self.widths = tuple(int(w) for w in widths)
        self.negative_slope = negative_slope
        self.seed = seed
        rng = np.random.default_rng(seed)
        chans = (input_channels,) + self.widths + (1,)
        self.blocks = []
        for ci, co in zip(chans[:-1], chans[1:]):
            w = Tensor(rng.normal(0.0, 0.02, size=(co, ci, KERNEL, KERNEL)), requires_grad=True, dtype=dtype)
            b = Tensor(np.zeros(co), requires_grad=True, dtype=dtype)
            self.blocks.append((w, b))
        self.optimizer = Adam(self.parameters, lr=lr)

    @property
    def parameters(self):
        return [t for block in self.blocks for t in block]

    def set_trainable(self, flag):
        for p in self.parameters:
            p.requires_grad = flag

    def step(self):
        """Adam update of every parameter holding a gradient."""
        self.optimizer.step()

    def zero_grad(self):
        self.optimizer.zero_grad()

    def state_dict(self):
        return {f"block{i}.{kind}": t.data.copy()
                for i, block in enumerate(self.blocks) for kind, t in zip(("weight", "bias"), block)}

    def load_state_dict(self, state):
        for i, (w, b) in enumerate(self.blocks):
            for kind, t in (("weight", w), ("bias", b)):
                arr = np.asarray(state[f"block{i}.{kind}"])
                if arr.shape != t.shape:
                    raise ValueError(f"block{i}.{kind}: expected {t.shape}, got {arr.shape}")
                t.data = arr.astype(t.dtype).copy()

    def __call__(self, condition, candidate):
        return self.forward(condition, candidate)

    def forward(self, condition, candidate):
        condition = condition if isinstance(condition, Tensor) else Tensor(condition)
        candidate = candidate if isinstance(candidate, Tensor) else Tensor(candidate)
        if condition.shape != candidate.shape:
            raise ValueError(f"condition {condition.shape} and candidate {candidate.shape} differ")
        rf = receptive_field()
        if condition.shape[1] < rf or condition.shape[2] < rf:
            raise ValueError(f"input {condition.shape[1:]} smaller than the {rf}x{rf} receptive field")
        x = concat([condition, candidate - condition], axis=0)
        last = len(self.blocks) - 1
        for i, ((w, b), s) in enumerate(zip(self.blocks, STRIDES)):
            x = conv2d(x, w, b, stride=s, padding=PADDING)
            x = sigmoid(x) if i == last else leaky_relu(x, self.negative_slope)
        return x


def _window_means(mask, out_h, out_w):
    """Mean of ``mask`` over each score cell's receptive field, clipped to the image."""
    h, w = mask.shape
    rf = receptive_field()
    off = receptive_field_offset()
    integral = np.zeros((h + 1, w + 1))
    integral[1:, 1:] = np.asarray(mask, dtype=np.float64).cumsum(0).cumsum(1)
    jump = int(np.prod(STRIDES))
    r0 = np.clip(off + jump * np.arange(out_h), 0, h)
    r1 = np.clip(off + jump * np.arange(out_h) + rf, 0, h)
    c0 = np.clip(off + jump * np.arange(out_w), 0, w)
    c1 = np.clip(off + jump * np.arange(out_w) + rf, 0, w)
    total = (integral[r1][:, c1] - integral[r0][:, c1] - integral[r1][:, c0] + integral[r0][:, c0])
    area = np.outer(r1 - r0, c1 - c0)
    return total / np.maximum(area, 1)


def receptive_field_mask(foreground, occlusion_valid, min_foreground=0.1, min_valid=0.5):
    """Score cells worth keeping: enough foreground and mostly unoccluded.

    A cell is kept when at least ``min_foreground`` of its receptive field is
    foreground and more than ``min_valid`` of it is valid.
    """
    foreground = np.asarray(foreground, dtype=bool)
    occlusion_valid = np.asarray(occlusion_valid, dtype=bool)
    if foreground.shape != occlusion_valid.shape:
        raise ValueError("foreground and validity masks must have the same shape")
    h, w = foreground.shape
    oh, ow = score_map_size(h), score_map_size(w)
    fg = _window_means(foreground, oh, ow)
    valid = _window_means(occlusion_valid, oh, ow)
    return ((fg >= min_foreground - 1e-12) & (valid > min_valid))[None]
