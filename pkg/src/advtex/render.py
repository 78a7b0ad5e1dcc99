"""Differentiable texture-to-view rendering through a cached uv map."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import AdamState, Tensor, adam_step, bilinear_sample, make_sampling_plan


@dataclass
class TextureState:
    """Optimized texture ``image`` (3, S, S) and its Adam moments.

    uv (0, 0) maps to texel center (0, 0) and uv (1, 1) to (S-1, S-1), with
    u along columns and v along rows.
    """

    image: Tensor
    adam: AdamState = field(default_factory=AdamState)

    @classmethod
    def zeros(cls, size, lr=1e-3, channels=3):
        image = Tensor(np.zeros((channels, size, size), dtype=np.float32), requires_grad=True)
        return cls(image, AdamState(learning_rate=lr))

    @classmethod
    def from_image(cls, image, lr=1e-3):
        arr = np.asarray(image, dtype=np.float32).transpose(2, 0, 1)
        return cls(Tensor(arr, requires_grad=True), AdamState(learning_rate=lr))

    @property
    def size(self):
        return self.image.shape[1]

    def to_image(self):
        """(S, S, 3) float copy of the texture."""
        return self.image.data.transpose(1, 2, 0).copy()

    def step(self):
        adam_step(self.image, self.adam)
        clamp_texture(self)


def clamp_texture(texture):
    np.clip(texture.image.data, 0.0, 1.0, out=texture.image.data)


def uv_to_texel(uv_map, shape):
    """Continuous (row, col) texel coordinates, shape (2, H, W)."""
    th, tw = shape
    uv = np.asarray(uv_map, dtype=np.float64)
    return np.stack([uv[..., 1] * (th - 1), uv[..., 0] * (tw - 1)])


def texture_plan(view, texture_shape):
    if view.uv_map is None:
        raise ValueError("view has no uv map; rasterize the mesh first")
    valid = view.uv_valid if view.uv_valid is not None else view.foreground
    return make_sampling_plan(texture_shape, uv_to_texel(view.uv_map, texture_shape), valid)


def render_texture(texture, view, plan=None):
    """Render ``texture`` into ``view``.

    Returns ``(rendered, valid)``: a (3, H, W) tensor differentiable with
    respect to ``texture.image`` and the boolean render-validity mask.
    A precomputed ``plan`` from :func:`texture_plan` skips the index setup.
    """
    image = texture.image if isinstance(texture, TextureState) else texture
    if plan is None:
        plan = texture_plan(view, image.shape[1:])
    valid = np.zeros(plan.out_shape, dtype=bool)
    valid.ravel()[plan.flat_out] = True
    return bilinear_sample(image, plan=plan), valid


def sample_texture(texture, uv_map, mask):
    """Non-differentiable lookup of an (S, S, 3) texture; returns (H, W, 3)."""
    texture = np.asarray(texture, dtype=np.float32)
    src = Tensor(texture.transpose(2, 0, 1))
    out = bilinear_sample(src, uv_to_texel(uv_map, texture.shape[:2]), mask)
    return out.data.transpose(1, 2, 0)
