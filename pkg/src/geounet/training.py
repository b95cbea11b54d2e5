"""Data pipeline, optimisation loop and the ablation harness."""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .geometry import CartesianFrame, CartesianMask, cartesian_to_polar, polar_star_convexity
from .losses import LossWeights, contour_targets, huber, soft_dice, unified_loss
from .model import VARIANTS, ModelConfig, build_model, count_parameters, save_checkpoint
from .phantom import Sample, load_manifest, load_split

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def _range(value):
    lo, hi = (float(v) for v in value)
    if lo > hi:
        raise ValueError(f"range {value} is not ordered")
    return (lo, hi)


@dataclass
class AugmentConfig:
    rotation_deg: tuple = (-180.0, 180.0)
    translate_px: tuple = (-10.0, 10.0)
    shear_deg: tuple = (-5.0, 5.0)
    contrast_gamma: tuple = (0.8, 1.25)
    blur_sigma: tuple = (0.0, 1.5)
    intensity_scale: tuple = (0.8, 1.2)
    speckle_sigma: tuple = (0.0, 0.1)
    enabled: bool = True
    max_retries: int = 10
    min_star_convexity: float = 0.98

    def __post_init__(self):
        for f in ("rotation_deg", "translate_px", "shear_deg", "contrast_gamma",
                  "blur_sigma", "intensity_scale", "speckle_sigma"):
            setattr(self, f, _range(getattr(self, f)))
        if self.contrast_gamma[0] <= 0 or self.intensity_scale[0] < 0 or self.blur_sigma[0] < 0 \
                or self.speckle_sigma[0] < 0:
            raise ValueError("photometric ranges must be non-negative (gamma strictly positive)")

    @classmethod
    def identity(cls):
        return cls(rotation_deg=(0, 0), translate_px=(0, 0), shear_deg=(0, 0), contrast_gamma=(1, 1),
                   blur_sigma=(0, 0), intensity_scale=(1, 1), speckle_sigma=(0, 0))


@dataclass
class TrainConfig:
    batch_size: int = 3
    grad_accum_steps: int = 16
    lr_start: float = 1e-4
    lr_end: float = 1e-7
    total_iters: int = 2000
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    val_every: int = 100
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("learning rates must satisfy lr_start >= lr_end > 0")
        if self.total_iters <= 0 or self.batch_size <= 0 or self.grad_accum_steps <= 0:
            raise ValueError("total_iters, batch_size and grad_accum_steps must be positive")
        if self.val_every <= 0:
            raise ValueError("val_every must be positive")

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(it, cfg):
    """Learning rate after ``it`` updates, decaying linearly from lr_start to lr_end."""
    if not 0 <= it <= cfg.total_iters:
        raise ValueError(f"iteration {it} outside [0, {cfg.total_iters}]")
    return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * it / cfg.total_iters


# --- augmentation ---------------------------------------------------------------------

def _affine(rotation_deg, shear_deg):
    """Forward 2x2 map in (row, col) coordinates; positive rotation is counter-clockwise."""
    a = np.deg2rad(rotation_deg)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    shear = np.array([[1.0, 0.0], [np.tan(np.deg2rad(shear_deg)), 1.0]])
    return rot @ shear


def warp(pixels, matrix, translation, order):
    """Apply ``out(c + M(p - c) + t) = in(p)`` about the grid centre."""
    H = pixels.shape[0]
    c = np.full(2, (H - 1) / 2.0)
    inv = np.linalg.inv(matrix)
    offset = c - inv @ (c + np.asarray(translation, dtype=np.float64))
    return ndimage.affine_transform(pixels.astype(np.float64), inv, offset=offset, order=order,
                                    mode="constant", cval=0.0)


def rotate(pixels, rotation_deg, order=1):
    return warp(pixels, _affine(rotation_deg, 0.0), (0.0, 0.0), order)


def _mask_ok(mask, reference_area, min_star):
    H = mask.shape[0]
    c = (H - 1) / 2.0
    ci = int(np.floor(c + 0.5))
    if not mask[ci, ci]:
        return False
    rr, cc = np.nonzero(mask)
    if np.hypot(rr - c, cc - c).max() >= H / 2.0 - 1:
        return False
    if reference_area and abs(int(mask.sum()) - reference_area) > 0.25 * reference_area:
        return False
    return polar_star_convexity(mask, R=H) >= min_star


def augment(sample, cfg, rng):
    """Stacked Cartesian augmentation.

    Geometric transforms hit frame and mask alike (mask with nearest
    neighbour); photometric ones only the frame.
    """
    if not cfg.enabled:
        return sample
    frame = sample.frame.pixels.astype(np.float64)
    mask = sample.mask.pixels

    for _ in range(cfg.max_retries):
        rot = rng.uniform(*cfg.rotation_deg)
        shear = rng.uniform(*cfg.shear_deg)
        trans = rng.uniform(*cfg.translate_px, size=2)
        M = _affine(rot, shear)
        if np.allclose(M, np.eye(2)) and not trans.any():
            new_frame, new_mask = frame.copy(), mask.copy()
            break
        new_mask = (warp(mask, M, trans, order=0) > 0.5).astype(np.uint8)
        if _mask_ok(new_mask, int(mask.sum()), cfg.min_star_convexity):
            new_frame = warp(frame, M, trans, order=1)
            break
    else:
        raise TrainingError(
            f"augmentation of sample {sample.id!r} pushed the lumen out of the field of view "
            f"{cfg.max_retries} times")

    gamma = rng.uniform(*cfg.contrast_gamma)
    sigma = rng.uniform(*cfg.blur_sigma)
    scale = rng.uniform(*cfg.intensity_scale)
    speckle = rng.uniform(*cfg.speckle_sigma)
    if gamma != 1.0:
        new_frame = np.clip(new_frame, 0.0, 1.0) ** gamma
    if sigma > 0:
        new_frame = ndimage.gaussian_filter(new_frame, sigma)
    if scale != 1.0:
        new_frame = new_frame * scale
    if speckle > 0:
        new_frame = new_frame * (1.0 + speckle * rng.standard_normal(new_frame.shape))
    if gamma != 1.0 or scale != 1.0 or speckle > 0:
        new_frame = np.clip(new_frame, 0.0, 1.0)

    mpp = sample.frame.mm_per_pixel
    return Sample(frame=CartesianFrame(new_frame, mm_per_pixel=mpp),
                  mask=CartesianMask(new_mask, mm_per_pixel=mpp), label=sample.label, id=sample.id)


# --- batching -------------------------------------------------------------------------

def model_input(sample, model_cfg):
    """Network input and target grids for one sample in the model's representation."""
    if model_cfg.representation == "cartesian":
        if sample.frame.size != model_cfg.R:
            raise ValueError(f"Cartesian model needs {model_cfg.R}px frames, got {sample.frame.size}")
        return sample.frame.pixels.astype(np.float64), sample.mask.pixels.astype(np.float64)
    r_max = sample.frame.size / 2.0
    x = cartesian_to_polar(sample.frame, model_cfg.R, interp="bilinear", r_max_px=r_max).pixels
    y = cartesian_to_polar(sample.mask, model_cfg.R, interp="nearest", r_max_px=r_max).pixels
    return x, y.astype(np.float64)


def collate(pairs, dtype=torch.float32):
    xs = torch.as_tensor(np.stack([p[0] for p in pairs]), dtype=dtype)[:, None]
    ys = torch.as_tensor(np.stack([p[1] for p in pairs]), dtype=dtype)
    return xs, ys


def accumulate_gradients(model, micro_batches, weights):
    """Backpropagate the mean loss over micro-batches; returns the averaged breakdown.

    Each micro-batch loss is a per-sample mean, so with equal micro-batch sizes
    the accumulated gradient equals that of one large batch.
    """
    n = len(micro_batches)
    total, agg = 0.0, {}
    for x, y in micro_batches:
        out = model(x)
        loss, bd = unified_loss(out, y, weights)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss {float(loss.detach())}; breakdown {bd}")
        (loss / n).backward()
        total += float(loss.detach()) / n
        for k, v in bd.items():
            agg[k] = agg.get(k, 0.0) + v / n
    return total, agg


def validation_metric(model, pairs, dtype=torch.float32, chunk=8):
    """Huber loss for contour-bearing models, soft Dice loss for pixel-only ones."""
    model.eval()
    vals = []
    with torch.no_grad():
        for i in range(0, len(pairs), chunk):
            x, y = collate(pairs[i:i + chunk], dtype)
            out = model(x)
            for b in range(x.shape[0]):
                if out.s_c is not None:
                    yc = contour_targets(y[b]).to(out.s_c.dtype)
                    vals.append(float(huber(out.s_c[b], yc[0])))
                else:
                    vals.append(float(soft_dice(out.p_pix[b], y[b])))
    model.train()
    return float(np.mean(vals))


@dataclass
class TrainResult:
    model: torch.nn.Module
    checkpoint: Path | None
    best_metric: float
    best_iter: int
    history: list


def _resolve_dataset(dataset):
    """Accept a manifest path/dict or a ``{"train": [...], "val": [...]}`` dict of samples."""
    if isinstance(dataset, dict) and "train" in dataset and "samples" not in dataset:
        return dataset
    manifest = load_manifest(dataset) if isinstance(dataset, (str, Path)) else dataset
    return {split: load_split(manifest, split) for split in ("train", "val", "test")}


def train(cfg, dataset, out_dir=None, progress=None):
    """Optimise a model on the ``train`` split, selecting the best ``val`` checkpoint."""
    splits = _resolve_dataset(dataset)
    train_samples, val_samples = splits.get("train") or [], splits.get("val") or []
    if not train_samples or not val_samples:
        raise ValueError("dataset needs non-empty train and val splits")
    dtype = getattr(torch, cfg.dtype)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "train_config.json").write_text(json.dumps(cfg.to_json(), indent=2))
    log_file = open(out_dir / "train_log.jsonl", "w") if out_dir is not None else None

    torch.manual_seed(cfg.seed)
    model = build_model(cfg.model, seed=cfg.seed).to(dtype)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_start)
    val_pairs = [model_input(s, cfg.model) for s in val_samples]
    static_pairs = None if cfg.augment.enabled else [model_input(s, cfg.model) for s in train_samples]

    n = len(train_samples)
    order, cursor, epoch = None, n, -1
    history, best = [], (float("inf"), -1, None)
    t0 = time.perf_counter()

    def next_index():
        nonlocal order, cursor, epoch
        if cursor >= n:
            epoch += 1
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            cursor = 0
        cursor += 1
        return int(order[cursor - 1]), epoch

    try:
        for it in range(cfg.total_iters):
            lr = lr_schedule(it, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad(set_to_none=True)
            micro, ids = [], []
            for _ in range(cfg.grad_accum_steps):
                pairs = []
                for _ in range(cfg.batch_size):
                    idx, ep = next_index()
                    ids.append(train_samples[idx].id)
                    if static_pairs is not None:
                        pairs.append(static_pairs[idx])
                    else:
                        rng = np.random.default_rng([cfg.seed, idx, ep])
                        pairs.append(model_input(augment(train_samples[idx], cfg.augment, rng), cfg.model))
                micro.append(collate(pairs, dtype))
            try:
                loss, breakdown = accumulate_gradients(model, micro, cfg.loss)
            except (TrainingError, ValueError) as e:
                if out_dir is not None:
                    (out_dir / "failed_batch.json").write_text(
                        json.dumps({"iter": it, "sample_ids": ids, "error": str(e)}, indent=2))
                raise TrainingError(f"iteration {it}: {e}; offending batch ids {ids}") from e
            opt.step()

            rec = {"iter": it + 1, "lr": lr, "loss": loss, "breakdown": breakdown,
                   "wall_time": time.perf_counter() - t0}
            if (it + 1) % cfg.val_every == 0 or it + 1 == cfg.total_iters:
                metric = validation_metric(model, val_pairs, dtype)
                rec["val_metric"] = metric
                if metric < best[0]:
                    best = (metric, it + 1, copy.deepcopy(model.state_dict()))
                    if out_dir is not None:
                        save_checkpoint(model, out_dir / "best.pt",
                                        extra={"iter": it + 1, "val_metric": metric})
                if progress:
                    progress(rec)
            history.append(rec)
            if log_file:
                log_file.write(json.dumps(rec) + "\n")
    finally:
        if log_file:
            log_file.close()

    model.load_state_dict(best[2])
    model.eval()
    ckpt = out_dir / "best.pt" if out_dir is not None else None
    logger.info("training finished: best val %.5g at iter %d", best[0], best[1])
    return TrainResult(model=model, checkpoint=ckpt, best_metric=best[0], best_iter=best[1],
                       history=history)


def kfold_splits(samples, k, seed=0, group=None):
    """Partition samples into ``k`` (train, held_out) folds.

    ``group`` maps a sample to its group key (a phantom "pullback"); all
    samples of a group land in the same fold. Defaults to one group per sample.
    """
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    group = group or (lambda s: s.id)
    keys = sorted({group(s) for s in samples})
    if len(keys) < k:
        raise ValueError(f"{len(keys)} groups cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(keys))
    fold_of = {keys[j]: i % k for i, j in enumerate(order)}
    return [([s for s in samples if fold_of[group(s)] != f], [s for s in samples if fold_of[group(s)] == f])
            for f in range(k)]


# --- ablation suite -------------------------------------------------------------------

ABLATION_VARIANTS = tuple(VARIANTS)


@dataclass
class AblationReport:
    rows: list
    tables: dict

    COLUMNS = ("variant", "n_params", "dice_mean", "dice_std",
               "major_within_0.25", "major_within_0.5", "major_within_0.75",
               "minor_within_0.25", "minor_within_0.5", "minor_within_0.75",
               "mean_components", "max_components")

    def to_csv(self):
        lines = [",".join(self.COLUMNS)]
        for r in self.rows:
            lines.append(",".join(f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c])
                                  for c in self.COLUMNS))
        return "\n".join(lines) + "\n"

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(self.to_csv())
        (out / "ablation.json").write_text(json.dumps(
            {"rows": self.rows, "per_label": {k: t.to_records() for k, t in self.tables.items()}},
            indent=2))
        return out


def variant_config(base_cfg, name):
    m = base_cfg.model
    model_cfg = ModelConfig.variant(name, R=m.R, depth=m.depth, base_channels=m.base_channels,
                                    seed=m.seed)
    return TrainConfig(**{**{f.name: getattr(base_cfg, f.name) for f in fields(TrainConfig)},
                          "model": model_cfg})


def run_ablation_suite(base_cfg, dataset, variants=ABLATION_VARIANTS, out_dir=None, mode="plain"):
    """Train and evaluate every variant on shared data and seeds."""
    from .inference import evaluate_model
    from .metrics import table_from_frames

    splits = _resolve_dataset(dataset)
    rows, tables = [], {}
    for name in variants:
        cfg = variant_config(base_cfg, name)
        sub = Path(out_dir) / name if out_dir is not None else None
        result = train(cfg, splits, out_dir=sub)
        frames = evaluate_model(result.model, splits["test"], mode=mode)
        table = table_from_frames(frames)
        tables[name] = table
        pooled = table_from_frames([{**f, "label": "N1"} for f in frames]).rows["N1"]
        comps = [f["n_components"] for f in frames]
        rows.append({"variant": name, "n_params": count_parameters(result.model),
                     **{k: pooled[k] for k in pooled if k != "n_frames"},
                     "mean_components": float(np.mean(comps)), "max_components": int(np.max(comps))})
    report = AblationReport(rows=rows, tables=tables)
    if out_dir is not None:
        report.write(out_dir)
    return report
