"""Training penalties for the contour and pixel branches.

All functions take batched tensors (leading batch dimension) or a single
unbatched grid, and return the mean over the batch of the per-sample loss.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy import ndimage

LOG_EPS = 1e-7
DICE_EPS = 1e-5


@dataclass
class LossWeights:
    lambda_dice: float = 0.9
    w_ce: float = 1.0
    w_huber: float = 1.0
    w_dense: float = 1.0
    hausdorff_alpha: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.lambda_dice <= 1.0:
            # lambda = 1 is allowed so the dense loss can reduce to pure Dice
            raise ValueError(f"lambda_dice must be in (0, 1], got {self.lambda_dice}")
        for name in ("w_ce", "w_huber", "w_dense"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_json(self):
        return asdict(self)


def _batched(t, ndim):
    t = torch.as_tensor(t)
    return t[None] if t.dim() == ndim else t


def _check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise ValueError("loss input contains non-finite values")


def contour_targets(y_pix):
    """Per-row lumen depth, clipped to the last contour class ``R-1``."""
    y_pix = _batched(y_pix, 2)
    R = y_pix.shape[-1]
    return y_pix.sum(dim=-1).clamp(max=R - 1).long()


def contour_ce(p_c, y_c):
    """Binary cross entropy of every contour cell against the one-hot depth target.

    Normalised by ``R**2`` per sample (rows times columns).
    """
    p_c = _batched(p_c, 2)
    y_c = torch.as_tensor(y_c)
    y_c = y_c[None] if y_c.dim() == 1 else y_c
    _check_finite(p_c)
    R = p_c.shape[-1]
    y_c = y_c.long().clamp(0, R - 1)
    onehot = torch.zeros_like(p_c).scatter_(-1, y_c[..., None].to(p_c.device), 1.0)
    p = p_c.clamp(LOG_EPS, 1.0 - LOG_EPS)
    ll = onehot * torch.log(p) + (1.0 - onehot) * torch.log1p(-p)
    per_sample = -ll.sum(dim=(-2, -1)) / (p_c.shape[-2] * R)
    return per_sample.mean()


def huber(s_c, y_c):
    """Summed Huber penalty (knee at 1) between soft and true contour depths."""
    s_c = _batched(s_c, 1)
    y_c = torch.as_tensor(y_c, dtype=s_c.dtype, device=s_c.device)
    y_c = y_c[None] if y_c.dim() == 1 else y_c
    if s_c.shape != y_c.shape:
        raise ValueError(f"shape mismatch: {tuple(s_c.shape)} vs {tuple(y_c.shape)}")
    _check_finite(s_c, y_c)
    d = (y_c - s_c).abs()
    per_row = torch.where(d < 1.0, 0.5 * d * d, d - 0.5)
    return per_row.sum(dim=-1).mean()


def soft_dice(pred, target):
    pred = _batched(pred, 2)
    target = torch.as_tensor(target, dtype=pred.dtype, device=pred.device)
    target = target[None] if target.dim() == 2 else target
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    inter = (pred * target).sum(dim=(-2, -1))
    denom = pred.sum(dim=(-2, -1)) + target.sum(dim=(-2, -1))
    return (1.0 - (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)).mean()


def boundary_distance(mask):
    """Euclidean distance of every pixel to the mask boundary (0 if the mask is uniform)."""
    mask = np.asarray(mask) > 0
    if not mask.any() or mask.all():
        return np.zeros(mask.shape)
    return ndimage.distance_transform_edt(mask) + ndimage.distance_transform_edt(~mask)


def hausdorff_dt(pred, target, alpha=2.0):
    """Distance-transform weighted squared error.

    ``mean((pred - target)**2 * (DT(target)**alpha + DT(pred > 0.5)**alpha))``.
    The distance maps are computed in numpy and carry no gradient.
    """
    pred = _batched(pred, 2)
    target = torch.as_tensor(target, dtype=pred.dtype, device=pred.device)
    target = target[None] if target.dim() == 2 else target
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    pred_np = pred.detach().cpu().numpy()
    targ_np = target.detach().cpu().numpy()
    weights = np.stack([
        boundary_distance(t) ** alpha + boundary_distance(p > 0.5) ** alpha
        for p, t in zip(pred_np, targ_np)
    ])
    w = torch.as_tensor(weights, dtype=pred.dtype, device=pred.device)
    return ((pred - target) ** 2 * w).mean(dim=(-2, -1)).mean()


def dense_loss(pred, target, w=None):
    w = w or LossWeights()
    dice = soft_dice(pred, target)
    if w.lambda_dice == 1.0:
        return dice
    return w.lambda_dice * dice + (1.0 - w.lambda_dice) * hausdorff_dt(pred, target, w.hausdorff_alpha)


def unified_loss(out, y_pix, w=None):
    """Sum of the enabled branch losses.

    Returns ``(total, breakdown)`` where ``breakdown`` maps term name to its
    weighted value (as a float) and always sums to ``total``.
    """
    w = w or LossWeights()
    y_pix = _batched(torch.as_tensor(y_pix), 2)
    terms = {}
    if out.p_c is not None:
        if out.s_c is None:
            raise ValueError("contour branch output is missing s_c")
        y_c = contour_targets(y_pix)
        terms["ce"] = w.w_ce * contour_ce(out.p_c, y_c)
        terms["huber"] = w.w_huber * huber(out.s_c, y_c.to(out.s_c.dtype))
    if out.p_pix is not None:
        terms["dense"] = w.w_dense * dense_loss(out.dense, y_pix.to(out.dense.dtype), w)
    if not terms:
        raise ValueError("forward output has no branch to supervise")
    total = sum(terms.values())
    breakdown = {k: float(v.detach()) for k, v in terms.items()}
    return total, breakdown
