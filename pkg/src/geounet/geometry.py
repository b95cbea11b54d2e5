"""Coordinate-system and mask/contour conversions.

Conventions
-----------
* Cartesian arrays are indexed ``(row, col)``. The angle ``theta`` is measured
  counter-clockwise from the +x axis as the image is displayed, i.e. a point
  at radius ``r`` sits at ``(row_c - r*sin(theta), col_c + r*cos(theta))``.
* Polar arrays are indexed ``(theta, r)``: row ``i`` is the angle
  ``theta0 + 2*pi*i/R`` and column ``j`` is the radius ``r_max_px*(j+0.5)/R``
  where ``R`` is the number of columns.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

TWO_PI = 2.0 * np.pi

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def _check_interp(interp):
    if interp not in ("bilinear", "nearest"):
        raise ValueError(f"interp must be 'bilinear' or 'nearest', got {interp!r}")
    return 1 if interp == "bilinear" else 0


def _require_binary(values, what):
    if not np.isin(values, (0, 1)).all():
        raise ValueError(f"{what} must be binary (values in {{0, 1}})")


@dataclass
class CartesianFrame:
    """Square grayscale frame in scanner coordinates."""

    pixels: np.ndarray
    mm_per_pixel: float = 70.0 / 256
    center: tuple | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2 or self.pixels.shape[0] != self.pixels.shape[1]:
            raise ValueError(f"Cartesian frame must be square 2D, got shape {self.pixels.shape}")
        if not np.isfinite(self.pixels).all():
            raise ValueError("Cartesian frame contains non-finite values")
        if not self.mm_per_pixel > 0:
            raise ValueError("mm_per_pixel must be positive")
        H = self.pixels.shape[0]
        if self.center is None:
            self.center = ((H - 1) / 2.0, (H - 1) / 2.0)
        self.center = (float(self.center[0]), float(self.center[1]))
        if not (0 <= self.center[0] <= H - 1 and 0 <= self.center[1] <= H - 1):
            raise ValueError(f"center {self.center} lies outside the {H}x{H} grid")

    @property
    def size(self):
        return self.pixels.shape[0]


@dataclass
class CartesianMask(CartesianFrame):
    """Binary lumen mask sharing the frame's calibration."""

    def __post_init__(self):
        super().__post_init__()
        _require_binary(self.pixels, "CartesianMask")
        self.pixels = self.pixels.astype(np.uint8)


@dataclass
class PolarFrame:
    """Polar resampling; rows are angle bins, columns radius bins."""

    pixels: np.ndarray
    r_max_px: float
    theta0: float = 0.0
    mm_per_pixel: float | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2:
            raise ValueError(f"polar frame must be 2D, got shape {self.pixels.shape}")
        if not np.isfinite(self.pixels).all():
            raise ValueError("polar frame contains non-finite values")
        if not self.r_max_px > 0:
            raise ValueError("r_max_px must be positive")

    @property
    def R(self):
        """Number of radius bins, which also sets the angular step 2*pi/R."""
        return self.pixels.shape[1]

    @property
    def n_rows(self):
        return self.pixels.shape[0]

    def thetas(self):
        return self.theta0 + TWO_PI * np.arange(self.n_rows) / self.R

    def radii(self):
        return self.r_max_px * (np.arange(self.R) + 0.5) / self.R


@dataclass
class PolarMask(PolarFrame):
    def __post_init__(self):
        super().__post_init__()
        _require_binary(self.pixels, "PolarMask")
        self.pixels = self.pixels.astype(np.uint8)


@dataclass
class ContourDepthMap:
    """Integer lumen depth per angle, i.e. the number of lumen pixels in each row."""

    depth: np.ndarray
    R: int | None = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth)
        if self.R is None:
            self.R = len(self.depth)
        if not np.issubdtype(self.depth.dtype, np.integer):
            if not np.array_equal(self.depth, np.round(self.depth)):
                raise ValueError("contour depth map must be integer-valued")
            self.depth = self.depth.astype(np.int64)
        if (self.depth < 0).any() or (self.depth > self.R).any():
            raise ValueError(f"contour depths must lie in [0, {self.R}]")

    def full_radius_rows(self):
        """Rows whose lumen fills every radius bin; these have no contour class."""
        return np.flatnonzero(self.depth >= self.R)

    def clipped(self):
        """Targets usable as a contour class index (depth R is folded onto R-1)."""
        return np.minimum(self.depth, self.R - 1)


@dataclass
class SoftContour:
    """Real-valued contour position (in radius bins) per angle row."""

    depth: np.ndarray
    R: int | None = None
    theta0: float = 0.0
    r_max_px: float | None = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.ndim != 1:
            raise ValueError("soft contour must be a 1D vector")
        if self.R is None:
            self.R = len(self.depth)
        if not np.isfinite(self.depth).all():
            raise ValueError("soft contour contains non-finite values")


def cartesian_to_polar(frame, R, interp=None, r_max_px=None):
    """Resample a Cartesian frame or mask onto an ``R x R`` polar grid.

    ``interp`` defaults to nearest-neighbour for :class:`CartesianMask` inputs
    (labels stay binary) and bilinear otherwise. Samples falling outside the
    Cartesian grid read 0.
    """
    if not isinstance(frame, CartesianFrame):
        frame = CartesianFrame(frame)
    R = int(R)
    if R <= 0:
        raise ValueError(f"R must be positive, got {R}")
    if R < 8:
        raise ValueError(f"R must be at least 8, got {R}")
    if interp is None:
        interp = "nearest" if isinstance(frame, CartesianMask) else "bilinear"
    order = _check_interp(interp)
    if r_max_px is None:
        r_max_px = frame.size / 2.0

    theta = TWO_PI * np.arange(R) / R
    radius = r_max_px * (np.arange(R) + 0.5) / R
    rows = frame.center[0] - np.sin(theta)[:, None] * radius[None, :]
    cols = frame.center[1] + np.cos(theta)[:, None] * radius[None, :]
    src = frame.pixels.astype(np.float64)
    if order == 0:
        # explicit rounding so ties behave identically on every platform
        ri = np.floor(rows + 0.5).astype(np.int64)
        ci = np.floor(cols + 0.5).astype(np.int64)
        inside = (ri >= 0) & (ri < frame.size) & (ci >= 0) & (ci < frame.size)
        out = np.zeros((R, R))
        out[inside] = src[ri[inside], ci[inside]]
    else:
        # the grid covers pixel footprints [-0.5, H-0.5]; edge pixels extend to their borders
        hi = frame.size - 0.5
        inside = (rows >= -0.5) & (rows <= hi) & (cols >= -0.5) & (cols <= hi)
        out = ndimage.map_coordinates(src, [rows, cols], order=1, mode="nearest")
        out[~inside] = 0.0

    if isinstance(frame, CartesianMask) and order == 0:
        return PolarMask(out.astype(np.uint8), r_max_px=r_max_px, theta0=0.0,
                         mm_per_pixel=frame.mm_per_pixel)
    return PolarFrame(out, r_max_px=r_max_px, theta0=0.0, mm_per_pixel=frame.mm_per_pixel)


def polar_to_cartesian(polar, H, interp=None, mm_per_pixel=None):
    """Inverse resampling onto an ``H x H`` Cartesian grid centred at ``(H-1)/2``.

    Angles wrap around; pixels beyond ``r_max_px`` are 0. Radii closer to the
    centre than the first bin centre reuse column 0.
    """
    H = int(H)
    if H < 8:
        raise ValueError(f"H must be at least 8, got {H}")
    if interp is None:
        interp = "nearest" if isinstance(polar, PolarMask) else "bilinear"
    order = _check_interp(interp)
    R = polar.R
    n_rows = polar.n_rows
    c = (H - 1) / 2.0
    rr, cc = np.mgrid[0:H, 0:H].astype(np.float64)
    dy = c - rr
    dx = cc - c
    radius = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    row_f = np.mod((theta - polar.theta0) / (TWO_PI / R), R)
    col_f = radius * R / polar.r_max_px - 0.5
    inside = radius <= polar.r_max_px
    src = polar.pixels.astype(np.float64)

    if order == 0:
        ri = np.mod(np.floor(row_f + 0.5).astype(np.int64), R)
        ci = np.clip(np.floor(col_f + 0.5).astype(np.int64), 0, R - 1)
        valid = inside & (ri < n_rows)
        out = np.zeros((H, H))
        out[valid] = src[ri[valid], ci[valid]]
    else:
        if n_rows < R:
            raise ValueError("bilinear back-conversion needs a full 2*pi polar frame")
        # one wrapped row so interpolation between row R-1 and row 0 is continuous
        wrapped = np.concatenate([src[:R], src[:1]], axis=0)
        col_c = np.clip(col_f, 0.0, R - 1)
        out = ndimage.map_coordinates(wrapped, [row_f, col_c], order=1, mode="nearest")
        out[~inside] = 0.0

    mpp = mm_per_pixel or polar.mm_per_pixel or 70.0 / 256
    if isinstance(polar, PolarMask) and order == 0:
        return CartesianMask(out.astype(np.uint8), mm_per_pixel=mpp)
    return CartesianFrame(out, mm_per_pixel=mpp)


def mask_to_contour_depth(mask):
    """Lumen depth per angle: the row sums of a binary polar mask."""
    pixels = mask.pixels if isinstance(mask, PolarFrame) else np.asarray(mask)
    _require_binary(pixels, "polar mask")
    return ContourDepthMap(pixels.astype(np.int64).sum(axis=1), R=pixels.shape[1])


def depth_to_mask(depth, R=None):
    """Exact inverse of :func:`mask_to_contour_depth` for prefix masks.

    Row ``i`` gets ones in its first ``depth[i]`` columns. Used to build
    star-convex references, not as the prediction rule.
    """
    if isinstance(depth, ContourDepthMap):
        R = depth.R if R is None else R
        depth = depth.depth
    depth = np.asarray(depth)
    R = len(depth) if R is None else R
    return (np.arange(R)[None, :] < depth[:, None]).astype(np.uint8)


def contour_to_mask(contour, r_max_px=None):
    """Binarise a soft contour: ones at and to the left of each row's contour.

    Column ``j`` of row ``i`` is set when ``j <= floor(depth[i] + 0.5)``, so every
    row is a prefix of ones and the Cartesian region is star-convex.
    """
    if not isinstance(contour, SoftContour):
        contour = SoftContour(contour)
    R = contour.R
    d = contour.depth
    if (d < 0).any() or (d > R - 1).any():
        bad = int(np.flatnonzero((d < 0) | (d > R - 1))[0])
        raise ValueError(f"contour depth {d[bad]:.4g} at row {bad} outside [0, {R - 1}]")
    last = np.floor(d + 0.5).astype(np.int64)
    pixels = (np.arange(R)[None, :] <= last[:, None]).astype(np.uint8)
    r_max = r_max_px or contour.r_max_px or R / 2.0
    return PolarMask(pixels, r_max_px=r_max, theta0=contour.theta0)


def wrap_pad(polar, pad_rows):
    """Prepend the last ``pad_rows`` angle rows so the input wraps continuously."""
    R = polar.R
    pad_rows = int(pad_rows)
    if not 0 < pad_rows <= R:
        raise ValueError(f"pad_rows must be in (0, {R}], got {pad_rows}")
    if polar.n_rows != R:
        raise ValueError("wrap_pad expects an unpadded R x R polar frame")
    pixels = np.concatenate([polar.pixels[R - pad_rows:], polar.pixels], axis=0)
    return replace(polar, pixels=pixels, theta0=polar.theta0 - TWO_PI * pad_rows / R)


def slice_middle(padded, start_row, R=None):
    """Take ``R`` consecutive angle rows starting at ``start_row``."""
    R = padded.R if R is None else int(R)
    start_row = int(start_row)
    if start_row < 0 or start_row + R > padded.n_rows:
        raise ValueError(
            f"slice [{start_row}, {start_row + R}) out of bounds for {padded.n_rows} rows")
    pixels = padded.pixels[start_row:start_row + R]
    return replace(padded, pixels=pixels, theta0=padded.theta0 + TWO_PI * start_row / padded.R)


def default_pad_rows(R):
    """Rows covering a quarter turn of extra context."""
    return int(round(R / 4))


def default_start_row(R):
    """Row offset so the slice begins at -pi/3 when padded by a quarter turn."""
    return int(round(R / 12))


def unrotate_rows(sliced_rows, pad_rows, start_row):
    """Circularly shift rows of a re-sliced output back to the original theta0."""
    return np.roll(sliced_rows, start_row - pad_rows, axis=0)


def label_components(mask):
    """8-connected component labelling; labels follow raster order of first pixel."""
    labels, n = ndimage.label(np.asarray(mask) > 0, structure=_EIGHT_CONNECTED)
    return labels, n


def count_components(mask):
    return label_components(mask)[1]


def largest_component(mask):
    """Keep only the largest 8-connected foreground component.

    Ties go to the component whose first pixel comes earliest in raster order.
    An empty mask is returned unchanged.
    """
    is_obj = isinstance(mask, CartesianFrame)
    pixels = mask.pixels if is_obj else np.asarray(mask)
    _require_binary(pixels, "mask")
    labels, n = label_components(pixels)
    if n == 0:
        out = np.zeros_like(pixels, dtype=np.uint8)
    else:
        sizes = np.bincount(labels.ravel())[1:]
        # argmax returns the first maximum; labels are numbered in raster order
        keep = int(np.argmax(sizes)) + 1
        out = (labels == keep).astype(np.uint8)
    if is_obj:
        return CartesianMask(out, mm_per_pixel=mask.mm_per_pixel, center=mask.center)
    return out


def star_fill(mask):
    """Make a mask digitally star-convex about the frame centre.

    Each foreground pixel is joined to the nearest central pixel by a unit-step
    digital line. Every line is 8-connected and the central pixels are mutually
    adjacent, so a non-empty result is one 8-connected component containing the
    centre. Nearest-neighbour back-conversion of a thin angular spike can leave
    its tip detached; this reattaches it along the spike's own ray.
    """
    is_obj = isinstance(mask, CartesianFrame)
    pixels = mask.pixels if is_obj else np.asarray(mask)
    _require_binary(pixels, "mask")
    out = pixels > 0
    rr, cc = np.nonzero(out)
    if len(rr):
        H, W = out.shape
        cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
        r0 = np.where(rr > cy, np.ceil(cy), np.floor(cy)).astype(int)
        c0 = np.where(cc > cx, np.ceil(cx), np.floor(cx)).astype(int)
        dr, dc = rr - r0, cc - c0
        n = np.maximum(np.abs(dr), np.abs(dc))
        for k in range(int(n.max()) + 1):
            sel = n >= k
            t = k / np.maximum(n[sel], 1)
            out[np.floor(r0[sel] + t * dr[sel] + 0.5).astype(int),
                np.floor(c0[sel] + t * dc[sel] + 0.5).astype(int)] = True
    out = out.astype(np.uint8)
    if is_obj:
        return CartesianMask(out, mm_per_pixel=mask.mm_per_pixel, center=mask.center)
    return out


def polar_star_convexity(mask, R=256):
    """Polar Dice between a mask and its prefix-filled version (1.0 = star-convex)."""
    if not isinstance(mask, CartesianMask):
        mask = CartesianMask(mask)
    polar = cartesian_to_polar(mask, R, interp="nearest")
    filled = depth_to_mask(mask_to_contour_depth(polar))
    a = polar.pixels.astype(bool)
    b = filled.astype(bool)
    denom = a.sum() + b.sum()
    return 1.0 if denom == 0 else 2.0 * (a & b).sum() / denom


# --- PNG + JSON sidecar serialization -------------------------------------------------

def _sidecar(path):
    return Path(path).with_suffix(".json")


def save_frame(frame, path, bits=16):
    """Write a frame or mask as grayscale PNG plus a JSON sidecar of geometry metadata."""
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    px = np.asarray(frame.pixels, dtype=np.float64)
    is_mask = isinstance(frame, (CartesianMask, PolarMask))
    if is_mask:
        img = Image.fromarray((px > 0).astype(np.uint8) * 255)
    elif bits == 16:
        img = Image.fromarray(np.round(np.clip(px, 0, 1) * 65535).astype(np.uint16))
    elif bits == 8:
        img = Image.fromarray(np.round(np.clip(px, 0, 1) * 255).astype(np.uint8))
    else:
        raise ValueError("bits must be 8 or 16")
    img.save(path)
    meta = {"kind": type(frame).__name__, "mask": is_mask}
    if isinstance(frame, CartesianFrame):
        meta.update(mm_per_pixel=frame.mm_per_pixel, center=list(frame.center))
    else:
        meta.update(theta0=frame.theta0, r_max_px=frame.r_max_px,
                    mm_per_pixel=frame.mm_per_pixel)
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_frame(path):
    from PIL import Image

    path = Path(path)
    arr = np.asarray(Image.open(path))
    side = _sidecar(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    is_mask = meta.get("mask", False)
    if is_mask:
        px = (arr > 127).astype(np.uint8)
    elif arr.dtype == np.uint16 or arr.max() > 255:
        px = arr.astype(np.float64) / 65535.0
    else:
        px = arr.astype(np.float64) / 255.0
    kind = meta.get("kind", "CartesianMask" if is_mask else "CartesianFrame")
    if kind.startswith("Polar"):
        cls = PolarMask if is_mask else PolarFrame
        return cls(px, r_max_px=meta["r_max_px"], theta0=meta.get("theta0", 0.0),
                   mm_per_pixel=meta.get("mm_per_pixel"))
    cls = CartesianMask if is_mask else CartesianFrame
    kwargs = {}
    if "mm_per_pixel" in meta:
        kwargs["mm_per_pixel"] = meta["mm_per_pixel"]
    if "center" in meta:
        kwargs["center"] = tuple(meta["center"])
    return cls(px, **kwargs)
