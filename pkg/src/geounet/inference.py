"""Plain and wrap-padded inference from a Cartesian frame to a Cartesian mask."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    CartesianFrame, CartesianMask, PolarFrame, PolarMask, SoftContour, cartesian_to_polar,
    count_components, default_pad_rows, default_start_row, largest_component, polar_to_cartesian,
    slice_middle, star_fill, unrotate_rows, wrap_pad,
)
from .model import ForwardOutput, forward_frame, predict_mask

MODES = ("plain", "plusplus")


@dataclass
class InferenceResult:
    mask: CartesianMask
    contour: SoftContour | None
    outputs: ForwardOutput
    n_components: int
    discontinuity: float | None


def discontinuity_score(s_c):
    """Seam jump ``|s[R-1] - s[0]|`` in excess of the median row-to-row change."""
    s = np.asarray(s_c.depth if isinstance(s_c, SoftContour) else s_c, dtype=np.float64)
    if len(s) < 2:
        return 0.0
    typical = np.median(np.abs(np.diff(s)))
    return float(max(abs(s[-1] - s[0]) - typical, 0.0))


def _polar_outputs(model, polar, mode, pad_rows, start_row):
    R = polar.R
    if mode == "plain":
        return forward_frame(model, polar.pixels)
    padded = wrap_pad(polar, pad_rows)
    out = forward_frame(model, padded.pixels)

    def reslice(a):
        # 1D contours are sliced as a single-column grid
        grid = a[:, None] if a.ndim == 1 else a
        sliced = slice_middle(PolarFrame(grid, r_max_px=polar.r_max_px, theta0=padded.theta0,),
                              start_row, R).pixels
        return unrotate_rows(sliced, pad_rows, start_row).reshape((R,) + a.shape[1:])

    return out.map(reslice)


def infer(model, frame, mode="plain", pad_rows=None, start_row=None, keep_largest=True):
    """Segment one Cartesian frame.

    Contour-bearing models return the binarised soft contour; pixel-only
    models threshold the pixel map at 0.5 and keep the largest component.
    The returned mask is always in the frame's original orientation.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if not isinstance(frame, CartesianFrame):
        frame = CartesianFrame(frame)
    cfg = model.cfg
    H = frame.size
    mpp = frame.mm_per_pixel

    if cfg.representation == "cartesian":
        if H != cfg.R:
            raise ValueError(f"Cartesian model expects {cfg.R}x{cfg.R} frames, got {H}x{H}")
        out = forward_frame(model, frame.pixels)
        raw = (out.p_pix > 0.5).astype(np.uint8)
        n = count_components(raw)
        mask = largest_component(raw) if keep_largest else raw
        return InferenceResult(CartesianMask(mask, mm_per_pixel=mpp), None, out, n, None)

    R = cfg.R
    pad_rows = default_pad_rows(R) if pad_rows is None else pad_rows
    start_row = default_start_row(R) if start_row is None else start_row
    r_max = H / 2.0
    polar = cartesian_to_polar(frame, R, interp="bilinear", r_max_px=r_max)
    out = _polar_outputs(model, polar, mode, pad_rows, start_row)

    if out.s_c is not None:
        polar_mask = predict_mask(out, r_max_px=r_max)
        polar_mask.mm_per_pixel = mpp
        # the continuous prefix-row shape is star-convex; keep it so after rasterisation
        mask = star_fill(polar_to_cartesian(polar_mask, H, interp="nearest", mm_per_pixel=mpp))
        contour = SoftContour(out.s_c, theta0=0.0, r_max_px=r_max)
        n = count_components(mask.pixels)
        return InferenceResult(mask, contour, out, n, discontinuity_score(out.s_c))

    polar_mask = PolarMask((out.p_pix > 0.5).astype(np.uint8), r_max_px=r_max, mm_per_pixel=mpp)
    raw = polar_to_cartesian(polar_mask, H, interp="nearest", mm_per_pixel=mpp).pixels
    n = count_components(raw)
    mask = largest_component(raw) if keep_largest else raw
    return InferenceResult(CartesianMask(mask, mm_per_pixel=mpp), None, out, n, None)


def infer_polar_contour(model, polar_pixels, mode="plain", pad_rows=None, start_row=None):
    """Soft contour for an already-polar ``R x R`` input (no Cartesian round trip)."""
    polar = PolarFrame(np.asarray(polar_pixels), r_max_px=1.0)
    R = polar.R
    pad_rows = default_pad_rows(R) if pad_rows is None else pad_rows
    start_row = default_start_row(R) if start_row is None else start_row
    return _polar_outputs(model, polar, mode, pad_rows, start_row).s_c


def evaluate_model(model, samples, mode="plain", predictor=None):
    """Per-frame evaluation records (Dice, diameters, component counts) over samples.

    ``predictor`` may replace the model with any ``frame -> CartesianMask`` callable.
    """
    from .metrics import frame_record

    records = []
    for s in samples:
        if predictor is not None:
            mask = predictor(s.frame)
            n = count_components(mask.pixels)
            disc = None
        else:
            res = infer(model, s.frame, mode=mode)
            mask, n, disc = res.mask, res.n_components, res.discontinuity
        rec = frame_record(mask, s.mask, s.label, s.frame.mm_per_pixel, s.id, n)
        rec["discontinuity"] = disc
        records.append(rec)
    return records
