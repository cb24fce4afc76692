"""Seeded procedural corpora: textured backgrounds with crack-like defects.

Everything is a pure function of the config seed.  Per-image generators are
seeded with ``SeedSequence([seed, stream, index])`` so corpora of different
sizes share their common prefix.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor_image import save_image, write_tensor

STYLES = ("grain", "blotch")
TRAIN, TEST_BG, TEST_DEFECT, GRAIN_STREAM = 0, 1, 2, 3
GRAIN_PERIOD = (7.0, 10.0)  # pixels per sinusoid cycle
# (blur sigma in pixels, weight relative to the unit sinusoid) of each noise scale
GRAIN_NOISE = ((2.0, 0.35), (12.0, 1.0))


@dataclass(frozen=True)
class DefectSpec:
    strokes: tuple[int, int] = (1, 3)
    width: tuple[int, int] = (1, 4)
    offset: tuple[float, float] = (0.3, 0.7)
    fraction: tuple[float, float] = (0.001, 0.05)

    def __post_init__(self):
        for name in ("strokes", "width", "offset", "fraction"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"defect.{name}: lower bound {lo} above upper bound {hi}")
            object.__setattr__(self, name, (lo, hi))
        if self.strokes[0] < 1 or self.width[0] < 1:
            raise ValueError("defects need at least one stroke of width >= 1")
        if not 0 < self.fraction[0] <= self.fraction[1] < 1:
            raise ValueError(f"defect.fraction must lie in (0, 1), got {self.fraction}")
        if not 0 < self.offset[0] <= self.offset[1] <= 1:
            raise ValueError(f"defect.offset must lie in (0, 1], got {self.offset}")


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    image_size: tuple[int, int] = (128, 128)
    style: str = "grain"
    defect: DefectSpec = field(default_factory=DefectSpec)

    def __post_init__(self):
        size = self.image_size
        if isinstance(size, int):
            size = (size, size)
        size = tuple(int(s) for s in size)
        if len(size) != 2 or min(size) < 8:
            raise ValueError(f"image_size must be two sides >= 8, got {self.image_size}")
        object.__setattr__(self, "image_size", size)
        if self.style not in STYLES:
            raise ValueError(f"style must be one of {STYLES}, got {self.style!r}")
        if isinstance(self.defect, dict):
            object.__setattr__(self, "defect", DefectSpec(**self.defect))


def _rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index]))


def _gaussian_blur(a: np.ndarray, sigma: float) -> np.ndarray:
    r = max(1, int(np.ceil(3 * sigma)))
    x = np.arange(-r, r + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    out = np.pad(a, r, mode="wrap")
    out = np.apply_along_axis(lambda v: np.convolve(v, k, mode="valid"), 0, out)
    return np.apply_along_axis(lambda v: np.convolve(v, k, mode="valid"), 1, out)


def _rescale(a: np.ndarray, lo: float = 0.1, hi: float = 0.9) -> np.ndarray:
    amin, amax = a.min(), a.max()
    if amax == amin:
        return np.full_like(a, (lo + hi) / 2)
    return lo + (hi - lo) * (a - amin) / (amax - amin)


def _quantize(a: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Round to 8-bit levels, keeping only levels inside ``[lo, hi]``."""
    q = np.clip(np.rint(a * 255.0), np.ceil(lo * 255.0 - 1e-9), np.floor(hi * 255.0 + 1e-9))
    return (q / 255.0).astype(np.float32)


def grain_angle(seed: int) -> float:
    """Grain direction shared by every image of a corpus."""
    return float(_rng(seed, GRAIN_STREAM, 0).uniform(0, np.pi))


def background_from_rng(rng: np.random.Generator, size, style: str, theta: float = 0.0) -> np.ndarray:
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if style == "grain":
        period = rng.uniform(*GRAIN_PERIOD)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
        field_ = wave
        for sigma, weight in GRAIN_NOISE:
            noise = _gaussian_blur(rng.normal(size=(h, w)), sigma)
            field_ = field_ + weight * noise / (noise.std() + 1e-12)
    else:
        field_ = np.zeros((h, w))
        for _ in range(int(rng.integers(4, 9))):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            sig = rng.uniform(0.08, 0.25) * min(h, w)
            amp = rng.uniform(-1.0, 1.0)
            field_ += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig))
    return _quantize(_rescale(field_), 0.1, 0.9)[:, :, None]


def gen_background(cfg: SynthConfig, index: int = 0, stream: int = TRAIN) -> np.ndarray:
    """One background image in [0.1, 0.9], deterministic in ``(cfg.seed, stream, index)``."""
    return background_from_rng(_rng(cfg.seed, stream, index), cfg.image_size, cfg.style, grain_angle(cfg.seed))


def _disk(width: int) -> list[tuple[int, int]]:
    r = (width - 1) / 2.0
    lo, hi = -int(np.floor(r)), int(np.ceil(r))
    c = (hi + lo) / 2.0
    return [(dy, dx) for dy in range(lo, hi + 1) for dx in range(lo, hi + 1) if (dy - c) ** 2 + (dx - c) ** 2 <= r * r + 0.5]


def _stroke(rng: np.random.Generator, size, width: int, length: float) -> np.ndarray:
    """Random-walk polyline of roughly ``length`` pixels, dilated to ``width``."""
    h, w = size
    mask = np.zeros((h, w), dtype=bool)
    y, x = rng.uniform(0.2 * h, 0.8 * h), rng.uniform(0.2 * w, 0.8 * w)
    heading = rng.uniform(0, 2 * np.pi)
    travelled = 0.0
    offsets = _disk(width)
    while travelled < length:
        seg = rng.uniform(3.0, 7.0)
        heading += rng.normal(0.0, 0.5)
        steps = int(np.ceil(seg * 2))
        for _ in range(steps):
            ny, nx = y + 0.5 * np.sin(heading), x + 0.5 * np.cos(heading)
            if not (0 <= ny < h and 0 <= nx < w):
                heading += np.pi / 2
                continue
            y, x = ny, nx
            iy, ix = int(y), int(x)
            for dy, dx in offsets:
                yy, xx = iy + dy, ix + dx
                if 0 <= yy < h and 0 <= xx < w:
                    mask[yy, xx] = True
        travelled += seg
    return mask


def defect_from_rng(rng: np.random.Generator, bg: np.ndarray, spec: DefectSpec, retries: int = 10):
    h, w = bg.shape[:2]
    lo, hi = spec.fraction
    for _ in range(retries + 1):
        n_strokes = int(rng.integers(spec.strokes[0], spec.strokes[1] + 1))
        target = rng.uniform(lo, hi) * h * w
        delta = np.zeros((h, w))
        for _ in range(n_strokes):
            width = int(rng.integers(spec.width[0], spec.width[1] + 1))
            stroke = _stroke(rng, (h, w), width, target / (n_strokes * width))
            offset = rng.uniform(*spec.offset) * (1 if rng.random() < 0.5 else -1)
            delta[stroke] += offset
        defective = _quantize(np.clip(bg + delta[:, :, None], 0.0, 1.0))
        mask = np.any(defective != bg, axis=2)
        if lo <= mask.mean() <= hi:
            # float64 keeps the difference of two float32 images exact
            return defective, mask, defective.astype(np.float64) - bg
    raise ValueError(f"could not draw a defect covering [{lo}, {hi}] of the image in {retries} retries")


def inject_defect(bg: np.ndarray, cfg: SynthConfig, index: int = 0):
    """Returns ``(defective, mask, S_true)`` with ``defective == bg + S_true`` exactly."""
    return defect_from_rng(_rng(cfg.seed, TEST_DEFECT, index), np.asarray(bg, dtype=np.float32), cfg.defect)


def manifest(cfg: SynthConfig, n_train: int, n_test: int) -> dict:
    d = asdict(cfg.defect)
    return {
        "seed": cfg.seed,
        "style": cfg.style,
        "n_train": n_train,
        "n_test": n_test,
        "image_size": list(cfg.image_size),
        "defect": {k: list(v) for k, v in d.items()},
    }


def config_from_manifest(m: dict) -> SynthConfig:
    return SynthConfig(seed=int(m["seed"]), image_size=tuple(m["image_size"]), style=m["style"], defect=DefectSpec(**{k: tuple(v) for k, v in m["defect"].items()}))


def sample_test_item(cfg: SynthConfig, index: int):
    """Background, defective image, mask and S_true of test item ``index``."""
    bg = gen_background(cfg, index, TEST_BG)
    defective, mask, s_true = inject_defect(bg, cfg, index)
    return bg, defective, mask, s_true


def gen_corpus(cfg: SynthConfig, n_train: int, n_test: int, out_dir) -> dict:
    """Write ``train/``, ``test/``, ``truth/``, ``truth_s/`` and ``manifest.json`` under ``out_dir``."""
    if n_train < 0 or n_test < 0:
        raise ValueError("image counts must be non-negative")
    for sub in ("train", "test", "truth", "truth_s"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    for i in range(n_train):
        save_image(gen_background(cfg, i, TRAIN), os.path.join(out_dir, "train", f"train_{i:04d}.png"))
    for i in range(n_test):
        _, defective, mask, s_true = sample_test_item(cfg, i)
        name = f"test_{i:04d}"
        save_image(defective, os.path.join(out_dir, "test", name + ".png"))
        save_image(mask.astype(np.float32), os.path.join(out_dir, "truth", name + ".png"))
        write_tensor(s_true, os.path.join(out_dir, "truth_s", name + ".ptf"))
    m = manifest(cfg, n_train, n_test)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(m, f, indent=2, sort_keys=True)
        f.write("\n")
    return m
