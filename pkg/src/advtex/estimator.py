"""scikit-learn style front end for texture optimization."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .discriminator import WIDTHS
from .geometry import ViewSample
from .metrics import evaluate
from .optim import OptimConfig, optimize_texture
from .render import render_texture, texture_plan


def check_views(X):
    """Validate optimizer input and report its mode.

    Accepts a sequence of :class:`ViewSample` (3D mode) or a stack /
    sequence of equally sized (H, W, 3) images in [0, 1] (2D mode).
    Returns ``(mode, views)``.
    """
    if isinstance(X, np.ndarray):
        X = list(X)
    X = list(X)
    if len(X) < 2:
        raise ValueError(f"need at least 2 views, got {len(X)}")
    if all(isinstance(v, ViewSample) for v in X):
        for i, v in enumerate(X):
            if v.uv_map is None:
                raise ValueError(f"view {i} has no uv map")
            if v.shape != X[0].shape:
                raise ValueError(f"view {i} has size {v.shape}, expected {X[0].shape}")
        return "3d", X
    if any(isinstance(v, ViewSample) for v in X):
        raise ValueError("views mix 2D images and 3D view samples")
    imgs = [np.asarray(v, dtype=np.float32) for v in X]
    shape = imgs[0].shape
    if len(shape) != 3 or shape[2] != 3:
        raise ValueError(f"2D observations must be (H, W, 3) images, got {shape}")
    for i, img in enumerate(imgs):
        if img.shape != shape:
            raise ValueError(f"observation {i} has shape {img.shape}, expected {shape}")
        if not np.all(np.isfinite(img)):
            raise ValueError(f"observation {i} contains non-finite values")
    return "2d", imgs


class AdversarialTextureOptimizer(BaseEstimator):
    """Texture optimization with a learned, misalignment-tolerant objective.

    ``fit`` takes multi-view observations and learns ``texture_``.
    ``predict`` renders the fitted texture into views. Setting
    ``adversarial=False`` gives the plain L1 baseline.

    Attributes
    ----------
    texture_ : ndarray of shape (S, S, 3)
    history_ : list of dict
        Per-step losses, lambda and kept score-cell counts.
    discriminator_ : PatchDiscriminator or None
    mode_ : {"2d", "3d"}
    """

    def __init__(self, total_steps=10000, lambda0=10.0, lambda_decay=0.8, lambda_interval=1000,
                 lr_texture=1e-3, lr_discriminator=1e-4, texture_size=128, theta_z=0.1,
                 frame_stride=1, adversarial=True, disc_widths=WIDTHS, snapshot_every=1000, seed=0):
        self.total_steps = total_steps
        self.lambda0 = lambda0
        self.lambda_decay = lambda_decay
        self.lambda_interval = lambda_interval
        self.lr_texture = lr_texture
        self.lr_discriminator = lr_discriminator
        self.texture_size = texture_size
        self.theta_z = theta_z
        self.frame_stride = frame_stride
        self.adversarial = adversarial
        self.disc_widths = disc_widths
        self.snapshot_every = snapshot_every
        self.seed = seed

    def _config(self):
        return OptimConfig(**self.get_params())

    def fit(self, X, y=None, on_snapshot=None, progress=None):
        mode, views = check_views(X)
        config = self._config()
        result = optimize_texture(views, config, on_snapshot=on_snapshot, progress=progress)
        self.mode_ = mode
        self.config_ = config
        self.texture_state_ = result.texture
        self.texture_ = result.texture.to_image()
        self.discriminator_ = result.discriminator
        self.history_ = result.history
        self.n_views_ = len(views[::config.frame_stride])
        return self

    def predict(self, X):
        """Render the fitted texture into each view.

        2D mode returns the optimized image once per requested observation.
        """
        check_is_fitted(self, "texture_")
        if isinstance(X, ViewSample):
            X = [X]
        out = []
        for v in X:
            if self.mode_ == "2d":
                out.append(self.texture_.copy())
                continue
            img, _ = render_texture(self.texture_state_, v, texture_plan(v, self.texture_.shape[:2]))
            out.append(img.data.transpose(1, 2, 0))
        return np.stack(out)

    def score(self, X, y=None, patch_size=7, search_window=24):
        """Negative nearest patch loss of the fitted texture against reference ``X``."""
        check_is_fitted(self, "texture_")
        return -evaluate(self.texture_, X, patch_size, search_window).nearest_patch
