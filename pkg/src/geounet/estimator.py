"""scikit-learn compatible wrappers around the training and inference pipeline."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .geometry import CartesianFrame, CartesianMask, cartesian_to_polar, polar_to_cartesian, PolarFrame
from .inference import infer
from .losses import LossWeights
from .metrics import dice, mm_calibration
from .model import VARIANTS, ModelConfig
from .phantom import Sample
from .training import AugmentConfig, TrainConfig, train


def check_frames(X, name="X"):
    """Validate a stack of square grayscale frames, returning ``(n, H, H)`` float64."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1] != X.shape[2]:
        raise ValueError(f"{name} must have shape (n_frames, H, H), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains NaN or infinite values")
    return X


def check_masks(y, X=None, name="y"):
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if X is not None and y.shape != X.shape:
        raise ValueError(f"{name} shape {y.shape} does not match frames {X.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError(f"{name} must be binary")
    return y.astype(np.uint8)


class GeoUNetSegmenter(BaseEstimator):
    """Lumen segmenter trained on polar-resampled frames.

    ``fit(X, y)`` takes Cartesian frames ``(n, H, H)`` with intensities in
    [0, 1] and binary lumen masks of the same shape; ``predict`` returns
    Cartesian masks. ``variant`` selects one of ``geounet``, ``no-cdfelu``,
    ``contour-only``, ``polar-pixel`` or ``cartesian-pixel``.
    """

    def __init__(self, variant="geounet", R=128, depth=4, base_channels=8, total_iters=2000,
                 batch_size=3, grad_accum_steps=1, lr_start=1e-4, lr_end=1e-7,
                 lambda_dice=0.9, augment=True, mode="plain", validation_fraction=0.1,
                 val_every=100, fov_mm=70.0, random_state=0):
        self.variant = variant
        self.R = R
        self.depth = depth
        self.base_channels = base_channels
        self.total_iters = total_iters
        self.batch_size = batch_size
        self.grad_accum_steps = grad_accum_steps
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.lambda_dice = lambda_dice
        self.augment = augment
        self.mode = mode
        self.validation_fraction = validation_fraction
        self.val_every = val_every
        self.fov_mm = fov_mm
        self.random_state = random_state

    def _train_config(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {sorted(VARIANTS)}, got {self.variant!r}")
        aug = AugmentConfig() if self.augment else AugmentConfig(enabled=False)
        return TrainConfig(
            batch_size=self.batch_size, grad_accum_steps=self.grad_accum_steps,
            lr_start=self.lr_start, lr_end=self.lr_end, total_iters=self.total_iters,
            seed=self.random_state, augment=aug, val_every=self.val_every,
            model=ModelConfig.variant(self.variant, R=self.R, depth=self.depth,
                                      base_channels=self.base_channels, seed=self.random_state),
            loss=LossWeights(lambda_dice=self.lambda_dice),
        )

    def _samples(self, X, y, labels, prefix):
        mpp = mm_calibration(X.shape[1], self.fov_mm)
        return [Sample(frame=CartesianFrame(x, mm_per_pixel=mpp),
                       mask=CartesianMask(m, mm_per_pixel=mpp),
                       label=lab, id=f"{prefix}_{i:05d}")
                for i, (x, m, lab) in enumerate(zip(X, y, labels))]

    def fit(self, X, y, labels=None, X_val=None, y_val=None):
        X = check_frames(X)
        y = check_masks(y, X)
        labels = ["N1"] * len(X) if labels is None else list(labels)
        cfg = self._train_config()
        if X_val is None:
            n_val = max(1, int(round(self.validation_fraction * len(X))))
            if n_val >= len(X):
                # too few frames to hold any out; validate on the training set
                X_val, y_val, val_labels = X, y, labels
            else:
                perm = np.random.default_rng(self.random_state).permutation(len(X))
                val_idx, tr_idx = perm[:n_val], perm[n_val:]
                X_val, y_val = X[val_idx], y[val_idx]
                val_labels = [labels[i] for i in val_idx]
                X, y, labels = X[tr_idx], y[tr_idx], [labels[i] for i in tr_idx]
        else:
            X_val = check_frames(X_val, "X_val")
            y_val = check_masks(y_val, X_val, "y_val")
            val_labels = ["N1"] * len(X_val)
        dataset = {"train": self._samples(X, y, labels, "train"),
                   "val": self._samples(X_val, y_val, val_labels, "val")}
        result = train(cfg, dataset)
        self.model_ = result.model
        self.best_val_metric_ = result.best_metric
        self.history_ = result.history
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def _infer(self, X):
        check_is_fitted(self, "model_")
        X = check_frames(X)
        mpp = mm_calibration(X.shape[1], self.fov_mm)
        return [infer(self.model_, CartesianFrame(x, mm_per_pixel=mpp), mode=self.mode) for x in X]

    def predict(self, X):
        """Binary Cartesian lumen masks, shape ``(n, H, H)``."""
        return np.stack([r.mask.pixels for r in self._infer(X)])

    def predict_contour(self, X):
        """Soft contour depth (radius bins) per angle row, shape ``(n, R)``."""
        if VARIANTS[self.variant]["use_contour_branch"] is False:
            raise AttributeError(f"variant {self.variant!r} has no contour branch")
        return np.stack([r.contour.depth for r in self._infer(X)])

    def score(self, X, y):
        """Mean Dice of predicted against reference masks."""
        X = check_frames(X)
        y = check_masks(y, X)
        return float(np.mean([dice(p, t) for p, t in zip(self.predict(X), y)]))


class PolarTransformer(TransformerMixin, BaseEstimator):
    """Stateless Cartesian-to-polar resampling of frame stacks."""

    def __init__(self, R=256, interp="bilinear", r_max_px=None):
        self.R = R
        self.interp = interp
        self.r_max_px = r_max_px

    def fit(self, X, y=None):
        X = check_frames(X)
        self.frame_size_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "frame_size_")
        X = check_frames(X)
        if X.shape[1] != self.frame_size_:
            raise ValueError(f"fitted on {self.frame_size_}px frames, got {X.shape[1]}px")
        return np.stack([
            cartesian_to_polar(CartesianFrame(x), self.R, self.interp, r_max_px=self.r_max_px).pixels
            for x in X])

    def inverse_transform(self, P):
        check_is_fitted(self, "frame_size_")
        P = np.asarray(P, dtype=np.float64)
        r_max = self.r_max_px or self.frame_size_ / 2.0
        return np.stack([
            polar_to_cartesian(PolarFrame(p, r_max_px=r_max), self.frame_size_, self.interp).pixels
            for p in P])
