"""Shared UNet feature extractor with a contour head and a pixel head."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import SoftContour, contour_to_mask

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    R: int = 256
    depth: int = 4
    base_channels: int = 16
    use_pixel_branch: bool = True
    use_cdfelu: bool = True
    representation: str = "polar"
    use_contour_branch: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.R <= 0 or self.R % (2 ** self.depth):
            raise ValueError(f"R={self.R} must be divisible by 2**depth={2 ** self.depth}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if self.representation not in ("polar", "cartesian"):
            raise ValueError(f"representation must be 'polar' or 'cartesian', got {self.representation!r}")
        if self.use_cdfelu and not self.use_pixel_branch:
            raise ValueError("use_cdfelu requires use_pixel_branch")
        if self.representation == "cartesian" and self.use_contour_branch:
            raise ValueError("the contour branch is only defined in the polar representation")
        if self.use_cdfelu and not self.use_contour_branch:
            raise ValueError("use_cdfelu requires the contour branch")
        if not (self.use_contour_branch or self.use_pixel_branch):
            raise ValueError("at least one prediction branch must be enabled")

    @classmethod
    def variant(cls, name, **overrides):
        """Config for a named architecture variant."""
        flags = VARIANTS[name]
        return cls(**{**flags, **overrides})

    def to_json(self):
        return asdict(self)


VARIANTS = {
    "geounet": dict(use_pixel_branch=True, use_cdfelu=True, use_contour_branch=True,
                    representation="polar"),
    "no-cdfelu": dict(use_pixel_branch=True, use_cdfelu=False, use_contour_branch=True,
                      representation="polar"),
    "contour-only": dict(use_pixel_branch=False, use_cdfelu=False, use_contour_branch=True,
                         representation="polar"),
    "polar-pixel": dict(use_pixel_branch=True, use_cdfelu=False, use_contour_branch=False,
                        representation="polar"),
    "cartesian-pixel": dict(use_pixel_branch=True, use_cdfelu=False, use_contour_branch=False,
                            representation="cartesian"),
}


@dataclass
class ForwardOutput:
    """Batched branch outputs; grids are ``(B, rows, R)`` and ``s_c`` is ``(B, rows)``."""

    p_c: torch.Tensor | None = None
    s_c: torch.Tensor | None = None
    p_pix: torch.Tensor | None = None
    s_pix: torch.Tensor | None = None

    @property
    def dense(self):
        """The pixel map the dense losses and pixel-only predictions use."""
        return self.s_pix if self.s_pix is not None else self.p_pix

    def map(self, fn):
        return ForwardOutput(**{k: None if v is None else fn(v) for k, v in vars(self).items()})


def cdfelu(p_pix, p_c):
    """Gate pixel probabilities by one minus the inclusive radial CDF of the contour.

    ``out[..., r] = p_pix[..., r] * (1 - sum_{j<=r} p_c[..., j])``, clamped to [0, 1]
    against round-off. Works on numpy arrays or tensors.
    """
    if tuple(p_pix.shape) != tuple(p_c.shape):
        raise ValueError(f"shape mismatch: p_pix {tuple(p_pix.shape)} vs p_c {tuple(p_c.shape)}")
    if isinstance(p_pix, torch.Tensor):
        return (p_pix * (1.0 - torch.cumsum(p_c, dim=-1))).clamp(0.0, 1.0)
    p_pix = np.asarray(p_pix, dtype=np.float64)
    return np.clip(p_pix * (1.0 - np.cumsum(np.asarray(p_c, dtype=np.float64), axis=-1)), 0.0, 1.0)


def soft_argmax(p_c):
    """Row-wise expected column index of a row-normalised probability grid."""
    r = torch.arange(p_c.shape[-1], dtype=p_c.dtype, device=p_c.device)
    return (p_c * r).sum(dim=-1)


def heads_to_output(contour_logits, pixel_logits, use_cdfelu):
    """Turn raw head logits into branch outputs.

    ``contour_logits`` is ``(B, rows, R)`` or None; ``pixel_logits`` is
    ``(B, 2, rows, R)`` or None.
    """
    out = ForwardOutput()
    if contour_logits is not None:
        out.p_c = torch.softmax(contour_logits, dim=-1)
        out.s_c = soft_argmax(out.p_c)
    if pixel_logits is not None:
        out.p_pix = torch.softmax(pixel_logits, dim=1)[:, 1]
        if use_cdfelu:
            out.s_pix = cdfelu(out.p_pix, out.p_c)
    return out


def _norm(c):
    return nn.GroupNorm(min(4, c), c)


class ConvBlock(nn.Sequential):
    def __init__(self, c_in, c_out):
        super().__init__(
            nn.Conv2d(c_in, c_out, 3, padding=1),
            _norm(c_out),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1),
            _norm(c_out),
            nn.ReLU(inplace=True),
        )


class GeoUNet(nn.Module):
    """UNet with ``depth`` down/up-sampling stages and one or two 1x1 heads.

    Fully convolutional: any row count works at inference; rows that are not a
    multiple of ``2**depth`` are handled by padding skip mismatches.
    """

    def __init__(self, cfg):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        C = cfg.base_channels
        chans = [C * 2 ** i for i in range(cfg.depth + 1)]
        self.enc = nn.ModuleList([ConvBlock(1, chans[0])])
        self.enc.extend(ConvBlock(chans[i], chans[i + 1]) for i in range(cfg.depth))
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(chans[i + 1], chans[i], 2, stride=2) for i in reversed(range(cfg.depth)))
        self.dec = nn.ModuleList(
            ConvBlock(2 * chans[i], chans[i]) for i in reversed(range(cfg.depth)))
        self.contour_head = nn.Conv2d(C, 1, 1) if cfg.use_contour_branch else None
        self.pixel_head = nn.Conv2d(C, 2, 1) if cfg.use_pixel_branch else None

    def features(self, x):
        skips = []
        for i, block in enumerate(self.enc):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        x = skips.pop()
        for up, block in zip(self.up, self.dec):
            skip = skips.pop()
            x = up(x)
            dh, dw = skip.shape[-2] - x.shape[-2], skip.shape[-1] - x.shape[-1]
            if dh or dw:
                x = F.pad(x, (0, dw, 0, dh))
            x = block(torch.cat([skip, x], dim=1))
        return x

    def head_logits(self, x):
        feats = self.features(x)
        contour = self.contour_head(feats)[:, 0] if self.contour_head is not None else None
        pixel = self.pixel_head(feats) if self.pixel_head is not None else None
        return contour, pixel

    def forward(self, x):
        """``x`` is ``(B, 1, rows, R)`` or ``(B, rows, R)``; returns a :class:`ForwardOutput`."""
        if x.dim() == 3:
            x = x[:, None]
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValueError(f"expected single-channel input (B, 1, rows, R), got {tuple(x.shape)}")
        if x.shape[-1] != self.cfg.R:
            raise ValueError(f"input has {x.shape[-1]} radius columns, model expects R={self.cfg.R}")
        contour, pixel = self.head_logits(x)
        return heads_to_output(contour, pixel, self.cfg.use_cdfelu)


def build_model(cfg, seed=None):
    """Construct a model with parameters initialised deterministically from ``seed``."""
    if isinstance(cfg, dict):
        cfg = ModelConfig(**cfg)
    seed = cfg.seed if seed is None else seed
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = GeoUNet(cfg)
    return model


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def forward_frame(model, polar_pixels):
    """Run one ``(rows, R)`` numpy grid through the model without gradients."""
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(polar_pixels), dtype=dtype)[None, None]
    with torch.no_grad():
        out = model(x)
    return out.map(lambda t: t[0].cpu().numpy().astype(np.float64))


def predict_mask(out, r_max_px=None, theta0=0.0):
    """Final polar prediction: the binarised soft contour."""
    s_c = out.s_c if not hasattr(out.s_c, "detach") else out.s_c.detach().cpu().numpy()
    s_c = np.asarray(s_c, dtype=np.float64)
    R = len(s_c)
    return contour_to_mask(SoftContour(np.clip(s_c, 0.0, R - 1), theta0=theta0), r_max_px=r_max_px)


def save_checkpoint(model, path, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "version": CHECKPOINT_VERSION,
        "config": json.dumps(model.cfg.to_json(), sort_keys=True),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }, path)
    return path


def load_checkpoint(path, expected_config=None):
    """Rebuild a model from a checkpoint; rejects unknown versions and config mismatches."""
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    version = blob.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {version!r} is not supported (expected {CHECKPOINT_VERSION})")
    cfg = ModelConfig(**json.loads(blob["config"]))
    if expected_config is not None:
        if isinstance(expected_config, dict):
            expected_config = ModelConfig(**expected_config)
        if cfg != expected_config:
            raise ValueError("checkpoint config does not match the expected model config")
    model = GeoUNet(cfg)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model
