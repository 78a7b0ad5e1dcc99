"""Alternating adversarial texture optimization.

Each step draws a (source, auxiliary) pair, updates the discriminator on
real (auxiliary warped into the source view) versus fake (texture rendered
into the source view), then updates the texture against the frozen
discriminator plus a decaying L1 term.

Two data modes share the loop. In 3D mode views are :class:`ViewSample`
objects and rendering goes through each view's uv map. In 2D mode views are
plain (H, W, 3) images: the texture *is* the image, the auxiliary
observation is used directly as the real example, and all masks are full.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor, backward, l1_loss, masked_bce_loss
from .discriminator import WIDTHS, PatchDiscriminator, receptive_field_mask
from .geometry import ViewSample, reproject_view
from .render import TextureState, render_texture, texture_plan

logger = logging.getLogger(__name__)

HISTORY_FIELDS = ("step", "lambda", "loss_L1", "loss_G_adv", "loss_D_real", "loss_D_fake",
                  "kept_cells_real", "kept_cells_fake")


@dataclass
class OptimConfig:
    total_steps: int = 10000
    lambda0: float = 10.0
    lambda_decay: float = 0.8
    lambda_interval: int = 1000
    lr_texture: float = 1e-3
    lr_discriminator: float = 1e-4
    texture_size: int = 128
    theta_z: float = 0.1
    seed: int = 0
    frame_stride: int = 1
    adversarial: bool = True
    disc_widths: tuple = WIDTHS
    snapshot_every: int = 1000

    def __post_init__(self):
        self.disc_widths = tuple(int(w) for w in self.disc_widths)
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if not 0 < self.lambda_decay < 1:
            raise ValueError("lambda_decay must lie in (0, 1)")
        if self.lambda_interval <= 0:
            raise ValueError("lambda_interval must be positive")
        if self.lr_texture <= 0 or self.lr_discriminator <= 0:
            raise ValueError("learning rates must be positive")
        if self.frame_stride < 1:
            raise ValueError("frame_stride must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["disc_widths"] = list(self.disc_widths)
        return d


def lambda_schedule(step, config):
    """L1 weight at ``step``: ``lambda0 * lambda_decay ** (step // lambda_interval)``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    # repeated products round like the hand computation (8 * 0.8 == 6.4, 0.8 ** 2 * 10 != 6.4)
    lam = config.lambda0
    for _ in range(step // config.lambda_interval):
        lam *= config.lambda_decay
    return lam


def _is_view(x):
    return isinstance(x, ViewSample)


def _condition(view):
    """Masked source color as (3, H, W) plus the foreground mask."""
    if _is_view(view):
        fg = view.foreground
        return (view.color * fg[..., None]).transpose(2, 0, 1), fg
    img = np.asarray(view, dtype=np.float32)
    return img.transpose(2, 0, 1), np.ones(img.shape[:2], dtype=bool)


def _fake(texture, view, plan=None, differentiable=True):
    image = texture.image if differentiable else Tensor(texture.image.data)
    if _is_view(view):
        return render_texture(image, view, plan)
    if image.shape[1:] != np.shape(view)[:2]:
        raise ValueError(f"2D texture {image.shape[1:]} does not match image {np.shape(view)[:2]}")
    return image, np.ones(image.shape[1:], dtype=bool)


def _real(source, auxiliary, theta_z):
    if _is_view(source):
        warped, valid = reproject_view(source, auxiliary, theta_z)
        return warped.transpose(2, 0, 1), valid
    img = np.asarray(auxiliary, dtype=np.float32)
    return img.transpose(2, 0, 1), np.ones(img.shape[:2], dtype=bool)


def texture_objective(texture, disc, source, step, config, plan=None):
    """Combined texture loss ``BCE(D(cond, fake), 1) + lambda(step) * L1(fake, cond)``.

    The discriminator is frozen while the graph is built. Returns
    ``(loss, diagnostics, n_terms)`` where ``n_terms`` counts foreground
    pixels plus kept score cells.
    """
    lam = lambda_schedule(step, config)
    cond, fg = _condition(source)
    fake, valid = _fake(texture, source, plan)
    l1, n_l1 = l1_loss(fake, cond, fg)
    adv, kept = Tensor(np.zeros((), dtype=np.float32)), 0
    if disc is not None and config.adversarial:
        mask = receptive_field_mask(fg, valid)
        disc.set_trainable(False)
        try:
            scores = disc(Tensor(cond), fake)
        finally:
            disc.set_trainable(True)
        adv, kept = masked_bce_loss(scores, 1, mask)
    diag = {"lambda": lam, "loss_L1": float(l1.data), "loss_G_adv": float(adv.data), "kept_cells_fake": kept}
    return adv + l1 * lam, diag, n_l1 + kept


def texture_step(texture, disc, source, auxiliary, step, config, plan=None):
    """One texture update against the frozen discriminator.

    Pass ``disc=None`` (or ``config.adversarial=False``) for the L1-only
    baseline. ``auxiliary`` is unused here and kept for symmetry with
    :func:`discriminator_step`. Returns a diagnostics dict.
    """
    loss, diag, n_terms = texture_objective(texture, disc, source, step, config, plan)
    if n_terms == 0:
        logger.debug("texture step %d skipped: no foreground and no kept score cells", step)
        diag["skipped"] = True
        return diag
    backward(loss)
    if texture.image.grad is not None:
        texture.step()
    return diag


def discriminator_step(texture, disc, source, auxiliary, config, plan=None):
    """One discriminator update on real (reprojected auxiliary) vs fake (rendered texture)."""
    cond, fg = _condition(source)
    cond_t = Tensor(cond)
    real, real_valid = _real(source, auxiliary, config.theta_z)
    fake, fake_valid = _fake(texture, source, plan, differentiable=False)
    mask_real = receptive_field_mask(fg, real_valid)
    mask_fake = receptive_field_mask(fg, fake_valid)
    disc.set_trainable(True)
    loss_real, n_real = masked_bce_loss(disc(cond_t, Tensor(real)), 1, mask_real)
    loss_fake, n_fake = masked_bce_loss(disc(cond_t, fake), 0, mask_fake)
    diag = {"loss_D_real": float(loss_real.data), "loss_D_fake": float(loss_fake.data),
            "kept_cells_real": n_real, "kept_cells_fake_D": n_fake}
    if n_real == 0:
        logger.debug("discriminator step: no valid reprojected patches, real term skipped")
        diag["real_skipped"] = True
    if n_real or n_fake:
        backward(loss_real + loss_fake)
        disc.step()
    return diag


@dataclass
class OptimResult:
    texture: TextureState
    discriminator: PatchDiscriminator = None
    history: list = field(default_factory=list)
    config: OptimConfig = None


def prepare_views(views, frame_stride=1):
    """Apply the frame stride and check there are at least two views left."""
    views = list(views)[::frame_stride]
    if len(views) < 2:
        raise ValueError(f"need at least 2 views after frame_stride={frame_stride}, got {len(views)}")
    kinds = {_is_view(v) for v in views}
    if len(kinds) != 1:
        raise ValueError("views mix 2D images and 3D view samples")
    return views


def optimize_texture(views, config, on_snapshot=None, progress=None):
    """Run the alternating optimization and return an :class:`OptimResult`.

    ``on_snapshot(step, texture, history)`` is called every
    ``config.snapshot_every`` steps and after the last step. ``progress`` is
    an optional callable receiving each step's history row.
    """
    views = prepare_views(views, config.frame_stride)
    mode_3d = _is_view(views[0])
    rng = np.random.default_rng(config.seed)
    if mode_3d:
        texture = TextureState.zeros(config.texture_size, lr=config.lr_texture)
        plans = [texture_plan(v, texture.image.shape[1:]) for v in views]
    else:
        h, w = np.shape(views[0])[:2]
        texture = TextureState(Tensor(np.zeros((3, h, w), dtype=np.float32), requires_grad=True))
        texture.adam.learning_rate = config.lr_texture
        plans = [None] * len(views)
    disc = None
    if config.adversarial:
        disc = PatchDiscriminator(widths=config.disc_widths, seed=config.seed, lr=config.lr_discriminator)

    history = []
    for step in range(config.total_steps):
        i, j = rng.choice(len(views), size=2, replace=False)
        row = dict.fromkeys(HISTORY_FIELDS, 0.0)
        row["step"] = step
        if disc is not None:
            row.update(discriminator_step(texture, disc, views[i], views[j], config, plans[i]))
        row.update(texture_step(texture, disc, views[i], views[j], step, config, plans[i]))
        history.append({k: row[k] for k in HISTORY_FIELDS})
        if progress is not None:
            progress(history[-1])
        last = step == config.total_steps - 1
        if on_snapshot is not None and ((step + 1) % config.snapshot_every == 0 or last):
            on_snapshot(step + 1, texture, history)
    return OptimResult(texture, disc, history, config)
