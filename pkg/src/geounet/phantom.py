"""Synthetic venous IVUS phantoms: star-convex lumens with speckled appearance.

N1 phantoms are near-elliptical; N2 phantoms are compressed (stronger
eccentricity) with larger boundary harmonics.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CartesianFrame, CartesianMask, SoftContour, TWO_PI, save_frame

LUMEN_LEVEL = 0.15
WALL_LEVEL = 0.6
TISSUE_LEVEL = 0.4
LABELS = ("N1", "N2")
SPLITS = ("train", "val", "test")

# dense angle grid used to validate a spec against its invariants
_CHECK_THETA = np.linspace(0.0, TWO_PI, 2048, endpoint=False)


@dataclass
class PhantomSpec:
    r0: float
    harmonics: list = field(default_factory=list)
    eccentricity: float = 0.0
    wall_thickness: float = 6.0
    speckle_sigma: float = 0.0
    catheter_radius: float = 4.0
    label: str = "N1"
    seed: int = 0
    orientation: float = 0.0

    def to_json(self):
        d = asdict(self)
        d["harmonics"] = [list(map(float, h)) for h in self.harmonics]
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["harmonics"] = [(int(k), float(a), float(p)) for k, a, p in d.get("harmonics", [])]
        return cls(**d)


@dataclass
class Sample:
    frame: CartesianFrame
    mask: CartesianMask
    label: str
    id: str


def contour_radius(spec, theta):
    """Lumen boundary radius in pixels at the given angles."""
    theta = np.asarray(theta, dtype=np.float64)
    if not 0.0 <= spec.eccentricity < 1.0:
        raise ValueError(f"eccentricity must be in [0, 1), got {spec.eccentricity}")
    base = spec.r0 / np.sqrt(1.0 + spec.eccentricity * np.cos(2.0 * (theta - spec.orientation)))
    for k, amp, phase in spec.harmonics:
        if int(k) < 1:
            raise ValueError(f"harmonic order must be >= 1, got {k}")
        base = base + amp * np.cos(int(k) * theta + phase)
    return base


def validate_spec(spec, r_max_px=None):
    r = contour_radius(spec, _CHECK_THETA)
    i = int(np.argmin(r))
    if r[i] <= 0:
        raise ValueError(f"non-positive lumen radius {r[i]:.3f} px at theta={_CHECK_THETA[i]:.4f} rad")
    floor = spec.catheter_radius + 2.0
    if r[i] < floor:
        raise ValueError(
            f"lumen radius {r[i]:.3f} px at theta={_CHECK_THETA[i]:.4f} rad is inside "
            f"catheter_radius + 2 = {floor:.3f} px")
    if r_max_px is not None and r.max() >= r_max_px:
        j = int(np.argmax(r))
        raise ValueError(
            f"lumen radius {r[j]:.3f} px at theta={_CHECK_THETA[j]:.4f} rad exceeds r_max_px={r_max_px}")


def sample_contour(spec, R=256, r_max_px=128.0):
    """Contour depth (in radius bins, same units as a lumen depth count) per angle row."""
    validate_spec(spec, r_max_px)
    theta = TWO_PI * np.arange(R) / R
    radius = contour_radius(spec, theta)
    depth = np.clip(radius * R / r_max_px, 0.0, R - 1)
    return SoftContour(depth, R=R, theta0=0.0, r_max_px=r_max_px)


def render_sample(spec, H=256, mm_per_pixel=None, sample_id=None):
    """Rasterise a phantom into a frame/mask pair of size ``H x H``."""
    if H < 64:
        raise ValueError(f"H must be at least 64, got {H}")
    validate_spec(spec, H / 2.0)
    c = (H - 1) / 2.0
    rr, cc = np.mgrid[0:H, 0:H].astype(np.float64)
    dy, dx = c - rr, cc - c
    radius = np.hypot(dx, dy)
    boundary = contour_radius(spec, np.arctan2(dy, dx))

    lumen = radius <= boundary
    wall = (~lumen) & (radius <= boundary + spec.wall_thickness)
    img = np.full((H, H), TISSUE_LEVEL)
    img[wall] = WALL_LEVEL
    img[lumen] = LUMEN_LEVEL
    if spec.speckle_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        img = img * (1.0 + spec.speckle_sigma * rng.standard_normal((H, H)))
    img[radius <= spec.catheter_radius] = 0.0
    img = np.clip(img, 0.0, 1.0)

    mpp = mm_per_pixel if mm_per_pixel is not None else 70.0 / H
    sid = sample_id if sample_id is not None else f"{spec.label.lower()}_{spec.seed}"
    return Sample(
        frame=CartesianFrame(img, mm_per_pixel=mpp),
        mask=CartesianMask(lumen.astype(np.uint8), mm_per_pixel=mpp),
        label=spec.label,
        id=sid,
    )


def random_spec(rng, label, H=256, seed=None):
    """Draw a valid spec of the given regime, sized relative to the frame."""
    if label not in LABELS:
        raise ValueError(f"label must be one of {LABELS}, got {label!r}")
    s = H / 256.0
    seed = int(rng.integers(0, 2**31 - 1)) if seed is None else int(seed)
    for _ in range(100):
        if label == "N1":
            ecc = rng.uniform(0.0, 0.2)
            n_harm, amp_frac = rng.integers(0, 3), 0.04
        else:
            ecc = rng.uniform(0.4, 0.7)
            n_harm, amp_frac = rng.integers(1, 4), 0.08
        r0 = rng.uniform(30.0, 62.0) * s
        harmonics = []
        for _ in range(int(n_harm)):
            k = int(rng.integers(2, 6))
            harmonics.append((k, float(rng.uniform(0, amp_frac) * r0), float(rng.uniform(0, TWO_PI))))
        spec = PhantomSpec(
            r0=float(r0),
            harmonics=harmonics,
            eccentricity=float(ecc),
            wall_thickness=float(rng.uniform(4.0, 10.0) * s),
            speckle_sigma=float(rng.uniform(0.1, 0.3)),
            catheter_radius=float(4.0 * s),
            label=label,
            seed=seed,
            orientation=float(rng.uniform(0, np.pi)),
        )
        r = contour_radius(spec, _CHECK_THETA)
        # leave room for the wall ring and for translation during augmentation
        if r.min() >= spec.catheter_radius + 2 + 2 * s and r.max() + spec.wall_thickness < 0.8 * H / 2:
            return spec
    raise RuntimeError("could not draw a valid phantom spec in 100 attempts")


def _sample_seed(seed, split_index, i):
    return int(np.random.SeedSequence([int(seed), split_index, i]).generate_state(1)[0])


def generate_split(n, n2_fraction, seed, split, H=256):
    """In-memory samples for one split; deterministic in ``(seed, split)``."""
    if n <= 0:
        raise ValueError("sample counts must be positive")
    if not 0.0 <= n2_fraction <= 1.0:
        raise ValueError(f"n2_fraction must be in [0, 1], got {n2_fraction}")
    split_index = SPLITS.index(split) if split in SPLITS else len(SPLITS)
    n2 = int(round(n * n2_fraction))
    order = np.random.default_rng([int(seed), split_index, 7]).permutation(n)
    labels = np.array(["N1"] * n, dtype=object)
    labels[order[:n2]] = "N2"
    samples, specs = [], []
    for i in range(n):
        sseed = _sample_seed(seed, split_index, i)
        spec = random_spec(np.random.default_rng(sseed), labels[i], H=H, seed=sseed)
        sid = f"{split}_{i:05d}"
        samples.append(render_sample(spec, H, sample_id=sid))
        specs.append(spec)
    return samples, specs


def make_dataset(n_train, n_val, n_test, n2_fraction, seed, out_dir, H=256):
    """Write a phantom dataset and return its manifest dictionary.

    Layout: ``images/<id>.png``, ``masks/<id>.png`` (each with a JSON sidecar
    carrying calibration) and ``manifest.json``.
    """
    for n in (n_train, n_val, n_test):
        if n <= 0:
            raise ValueError("sample counts must be positive")
    if not 0.0 <= n2_fraction <= 1.0:
        raise ValueError(f"n2_fraction must be in [0, 1], got {n2_fraction}")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot write dataset to {out}: {e}") from e

    entries = []
    for split, n in zip(SPLITS, (n_train, n_val, n_test)):
        samples, specs = generate_split(n, n2_fraction, seed, split, H=H)
        for sample, spec in zip(samples, specs):
            save_frame(sample.frame, out / "images" / f"{sample.id}.png")
            save_frame(sample.mask, out / "masks" / f"{sample.id}.png")
            entries.append({"id": sample.id, "label": sample.label, "split": split,
                            "spec": spec.to_json()})
    seeds = [e["spec"]["seed"] for e in entries]
    assert len(set(seeds)) == len(seeds), "phantom seeds collided across splits"
    manifest = {
        "format": "geounet-phantoms/1",
        "seed": int(seed),
        "H": int(H),
        "mm_per_pixel": 70.0 / H,
        "n2_fraction": float(n2_fraction),
        "samples": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["root"] = str(path.parent)
    return manifest


def load_split(manifest, split):
    """Load the samples of one split from disk."""
    from .geometry import load_frame

    if isinstance(manifest, (str, Path)):
        manifest = load_manifest(manifest)
    root = Path(manifest["root"])
    samples = []
    for e in manifest["samples"]:
        if e["split"] != split:
            continue
        frame = load_frame(root / "images" / f"{e['id']}.png")
        mask = load_frame(root / "masks" / f"{e['id']}.png")
        samples.append(Sample(frame=frame, mask=mask, label=e["label"], id=e["id"]))
    return samples
