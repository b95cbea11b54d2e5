import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def disk(H, radius, center=None):
    c = (H - 1) / 2.0 if center is None else center
    rr, cc = np.mgrid[0:H, 0:H]
    if np.isscalar(c):
        c = (c, c)
    return (((rr - c[0]) ** 2 + (cc - c[1]) ** 2) <= radius ** 2).astype(np.uint8)


def ellipse(H, a, b, center=None):
    """Axis-aligned ellipse: semi-axis ``a`` along columns, ``b`` along rows."""
    c = (H - 1) / 2.0 if center is None else center
    rr, cc = np.mgrid[0:H, 0:H]
    return ((((cc - c) / a) ** 2 + ((rr - c) / b) ** 2) <= 1.0).astype(np.uint8)


def star_mask(rng, H, min_radius=8.0):
    """Smooth random star-convex mask about the frame centre, rasterised by pixel centres."""
    c = (H - 1) / 2.0
    r0 = rng.uniform(max(min_radius + 12, H * 0.12), H * 0.32)
    ks = rng.integers(2, 6, size=3)
    amps = rng.uniform(0, 0.08, size=3) * r0
    phases = rng.uniform(0, 2 * np.pi, size=3)
    rr, cc = np.mgrid[0:H, 0:H]
    theta = np.arctan2(c - rr, cc - c)
    bound = r0 + sum(a * np.cos(k * theta + p) for k, a, p in zip(ks, amps, phases))
    return (np.hypot(rr - c, cc - c) <= bound).astype(np.uint8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data():
    """Small 64 px phantom splits for fast pipeline tests."""
    from geounet.phantom import generate_split
    return {split: generate_split(n, 0.5, 0, split, H=64)[0]
            for split, n in (("train", 6), ("val", 3), ("test", 4))}


def tiny_config(variant="geounet", iters=3, **kw):
    from geounet.model import ModelConfig
    from geounet.training import TrainConfig
    model = ModelConfig.variant(variant, R=64, depth=2, base_channels=4)
    return TrainConfig(**{"batch_size": 2, "grad_accum_steps": 1, "total_iters": iters, "val_every": 2,
                          "model": model, **kw})


_CRITERIA = {}


def record_criterion(number, passed, detail):
    """Register the outcome of one acceptance criterion for the terminal summary."""
    _CRITERIA[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
