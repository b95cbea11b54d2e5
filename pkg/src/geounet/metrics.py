"""Evaluation: Dice, major/minor lumen diameters and the clinical-target table."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import CartesianFrame, largest_component

THRESHOLDS_MM = (0.25, 0.5, 0.75)
# minimum pass fractions per threshold; thresholds absent from a dict carry no target
CLINICAL_TARGETS = {
    "N1": {0.25: 0.50, 0.5: 0.90, 0.75: 0.95},
    "N2": {0.5: 0.50, 0.75: 0.70},
}
DEFAULT_FOV_MM = 70.0
RAY_ANGLES_DEG = np.arange(0, 180, 5)
RAY_STEP_PX = 0.25
# anti-aliasing applied to the binary mask before locating edges along rays
RAY_SMOOTH_SIGMA_PX = 1.0


def mm_calibration(frame_px, fov_mm=DEFAULT_FOV_MM):
    if frame_px <= 0 or fov_mm <= 0:
        raise ValueError("frame_px and fov_mm must be positive")
    return fov_mm / frame_px


def _pixels(mask):
    return np.asarray(mask.pixels if isinstance(mask, CartesianFrame) else mask) > 0


def dice(pred, truth):
    a, b = _pixels(pred), _pixels(truth)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(a, b).sum() / denom


@dataclass
class DiameterReport:
    major_mm: float
    minor_mm: float
    major_err_mm: float | None = None
    minor_err_mm: float | None = None
    label: str | None = None
    major_angle_deg: float | None = None
    minor_angle_deg: float | None = None

    @property
    def stent_size_mm(self):
        """Mean of major and minor diameters rounded to the 0.5 mm stent grid."""
        return round((self.major_mm + self.minor_mm) / 2.0 / 0.5) * 0.5


def _reach(field_, com, direction, max_t):
    """Distance from ``com`` along ``direction`` to the lumen edge.

    The (smoothed) mask is sampled bilinearly every ``RAY_STEP_PX``; the edge is the
    first 0.5 crossing, located by linear interpolation between samples.
    """
    ts = np.arange(0, int(max_t / RAY_STEP_PX) + 2) * RAY_STEP_PX
    coords = np.stack([com[0] + ts * direction[0], com[1] + ts * direction[1]])
    vals = ndimage.map_coordinates(field_, coords, order=1, mode="constant", cval=0.0)
    out = np.flatnonzero(vals < 0.5)
    if len(out) == 0:
        return float(ts[-1])
    i = out[0]
    if i == 0:
        return 0.0
    v0, v1 = vals[i - 1], vals[i]
    return float(ts[i - 1] + RAY_STEP_PX * (v0 - 0.5) / (v0 - v1))


def chord_lengths(mask, angles_deg=RAY_ANGLES_DEG):
    """Chord length (px) through the centre of mass of the largest component per angle."""
    m = largest_component(_pixels(mask).astype(np.uint8)).astype(bool)
    if not m.any():
        raise ValueError("no lumen: mask is empty")
    com = ndimage.center_of_mass(m)
    field_ = ndimage.gaussian_filter(m.astype(np.float64), RAY_SMOOTH_SIGMA_PX)
    if field_.max() < 0.5:
        # lumen too thin to survive smoothing
        field_ = m.astype(np.float64)
    max_t = float(np.hypot(*m.shape))
    chords = []
    for a in np.deg2rad(np.asarray(angles_deg, dtype=np.float64)):
        # angle measured counter-clockwise from +x as displayed
        d = np.array([-np.sin(a), np.cos(a)])
        chords.append(_reach(field_, com, d, max_t) + _reach(field_, com, -d, max_t))
    return np.asarray(chords)


def diameters(mask, mm_per_pixel=None, truth=None, label=None):
    """Major/minor diameters in mm; with ``truth`` also the absolute errors."""
    if mm_per_pixel is None:
        mm_per_pixel = mask.mm_per_pixel if isinstance(mask, CartesianFrame) else mm_calibration(256)
    chords = chord_lengths(mask) * mm_per_pixel
    i_max, i_min = int(np.argmax(chords)), int(np.argmin(chords))
    report = DiameterReport(
        major_mm=float(chords[i_max]), minor_mm=float(chords[i_min]), label=label,
        major_angle_deg=float(RAY_ANGLES_DEG[i_max]), minor_angle_deg=float(RAY_ANGLES_DEG[i_min]),
    )
    if truth is not None:
        ref = diameters(truth, mm_per_pixel)
        report.major_err_mm = abs(report.major_mm - ref.major_mm)
        report.minor_err_mm = abs(report.minor_mm - ref.minor_mm)
    return report


def pass_fractions(errors_mm, thresholds=THRESHOLDS_MM):
    e = np.asarray(errors_mm, dtype=np.float64)
    if e.size == 0:
        return [float("nan")] * len(thresholds)
    return [float(np.mean(e <= t)) for t in thresholds]


@dataclass
class ClinicalTable:
    """Per-label pass fractions and Dice summaries, one row per label."""

    rows: dict = field(default_factory=dict)
    frames: list = field(default_factory=list)
    thresholds: tuple = THRESHOLDS_MM
    dice_space: str = "cartesian"

    def targets_met(self, label):
        row = self.rows[label]
        goals = CLINICAL_TARGETS[label]
        return all(
            row[f"{axis}_within_{t}"] >= goals[t]
            for axis in ("major", "minor") for t in goals
        )

    def to_records(self):
        recs = []
        for label, row in self.rows.items():
            recs.append({"label": label, **row, "targets_met": self.targets_met(label)})
        return recs

    def to_json(self):
        return json.dumps({"dice_space": self.dice_space, "thresholds_mm": list(self.thresholds),
                           "rows": self.to_records()}, indent=2)

    def to_csv(self):
        return _records_to_csv(self.to_records(), TABLE_COLUMNS)

    def frames_csv(self):
        return _records_to_csv(self.frames, FRAME_COLUMNS)

    def write(self, out_dir, prefix="clinical"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{prefix}_table.csv").write_text(self.to_csv())
        (out / f"{prefix}_table.json").write_text(self.to_json())
        (out / f"{prefix}_frames.csv").write_text(self.frames_csv())
        return out


TABLE_COLUMNS = (
    ["label", "n_frames", "dice_mean", "dice_std"]
    + [f"major_within_{t}" for t in THRESHOLDS_MM]
    + [f"minor_within_{t}" for t in THRESHOLDS_MM]
    + ["targets_met"]
)
FRAME_COLUMNS = ["id", "label", "dice", "major_mm", "minor_mm", "true_major_mm", "true_minor_mm",
                 "major_err_mm", "minor_err_mm", "stent_size_mm", "n_components"]


def _records_to_csv(records, columns):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for r in records:
        writer.writerow(r)
    return buf.getvalue()


def frame_record(pred, truth, label, mm_per_pixel, frame_id=None, n_components=None):
    """Per-frame evaluation record; an empty prediction counts as a total miss."""
    true_d = diameters(truth, mm_per_pixel)
    try:
        pred_d = diameters(pred, mm_per_pixel)
        major, minor = pred_d.major_mm, pred_d.minor_mm
        stent = pred_d.stent_size_mm
    except ValueError:
        major = minor = 0.0
        stent = 0.0
    return {
        "id": frame_id, "label": label, "dice": float(dice(pred, truth)),
        "major_mm": major, "minor_mm": minor,
        "true_major_mm": true_d.major_mm, "true_minor_mm": true_d.minor_mm,
        "major_err_mm": abs(major - true_d.major_mm), "minor_err_mm": abs(minor - true_d.minor_mm),
        "stent_size_mm": stent, "n_components": n_components,
    }


def clinical_report(samples, mm_per_pixel, thresholds=THRESHOLDS_MM):
    """Aggregate ``(pred, truth, label)`` triples (optionally with an id) into a table."""
    if not samples:
        raise ValueError("clinical_report needs at least one frame")
    frames = []
    for item in samples:
        pred, truth, label = item[:3]
        if label not in CLINICAL_TARGETS:
            raise ValueError(f"frame label must be one of {sorted(CLINICAL_TARGETS)}, got {label!r}")
        fid = item[3] if len(item) > 3 else len(frames)
        frames.append(frame_record(pred, truth, label, mm_per_pixel, fid))
    return table_from_frames(frames, thresholds)


def table_from_frames(frames, thresholds=THRESHOLDS_MM):
    table = ClinicalTable(frames=frames, thresholds=tuple(thresholds))
    for label in ("N1", "N2"):
        fr = [f for f in frames if f["label"] == label]
        if not fr:
            continue
        d = np.array([f["dice"] for f in fr])
        row = {"n_frames": len(fr), "dice_mean": float(d.mean()), "dice_std": float(d.std())}
        for axis in ("major", "minor"):
            fracs = pass_fractions([f[f"{axis}_err_mm"] for f in fr], thresholds)
            row.update({f"{axis}_within_{t}": v for t, v in zip(thresholds, fracs)})
        table.rows[label] = row
    return table
