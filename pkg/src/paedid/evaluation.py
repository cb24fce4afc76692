"""Segmentation metrics, threshold selection and tuning-parameter grid search."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .addressing import AddressingParams, deep_image_prior
from .decomposition import DecompParams, decompose
from .errors import ShapeMismatchError

log = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    pass


def dice(pred, truth) -> float:
    """``2|A & B| / (|A| + |B|)``; two empty masks agree perfectly (1.0)."""
    a = np.asarray(pred, dtype=bool)
    b = np.asarray(truth, dtype=bool)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def _average_ranks(x: np.ndarray) -> np.ndarray:
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    avg = ends - (counts - 1) / 2.0  # 1-based mean rank of each tie group
    return avg[inverse]


def pixel_auroc(scores, truth) -> float:
    """Mann-Whitney AUROC over pixels; tied pairs count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=bool).ravel()
    if s.shape != t.shape:
        raise ShapeMismatchError(f"{s.size} scores for {t.size} labels")
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both defective and normal pixels")
    ranks = _average_ranks(s)
    u = ranks[t].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def select_threshold(score_images, truths, grid) -> float:
    """Grid threshold maximising mean dice of ``score > t``; ties go to the smallest t."""
    if not score_images or len(score_images) != len(truths) or len(grid) == 0:
        raise ValueError("need matching, non-empty score and truth lists and a non-empty grid")
    best_t, best = None, -1.0
    for t in sorted(grid):
        m = float(np.mean([dice(np.asarray(s) > t, g) for s, g in zip(score_images, truths)]))
        if m > best:
            best_t, best = t, m
    return float(best_t)


# ---------------------------------------------------------------------------
# tuning-parameter selection


@dataclass(frozen=True)
class TuneGrid:
    l: tuple[int, ...] = (7,)
    k: tuple[int, ...] = (13,)
    lam1: tuple[float, ...] = (1e-5,)
    alpha: tuple[float, ...] = (0.3,)

    def __post_init__(self):
        for name in ("l", "k", "lam1", "alpha"):
            vals = tuple(getattr(self, name))
            if not vals:
                raise ValueError(f"tuning grid for {name} is empty")
            object.__setattr__(self, name, vals)
        if any(v % 2 == 0 for v in self.l):
            raise ValueError(f"aggregation lengths must be odd, got {self.l}")

    def __len__(self):
        return len(self.l) * len(self.k) * len(self.lam1) * len(self.alpha)


@dataclass
class TuneResult:
    best: dict
    table: list[dict] = field(default_factory=list)


class GridPointError(RuntimeError):
    def __init__(self, point: dict, cause: Exception):
        super().__init__(f"pipeline failed at grid point {point}: {cause}")
        self.point = point
        self.cause = cause


def background_criterion(images, backgrounds, s_true) -> float:
    """Sum over images of ``|X - L - S_true|_2`` (Frobenius norm per image)."""
    return float(sum(np.linalg.norm((np.asarray(x, np.float64) - l - s).ravel()) for x, l, s in zip(images, backgrounds, s_true)))


def tune_parameters(images, s_true, grid: TuneGrid, model, banks: dict, aligned: bool = False, base: DecompParams = DecompParams()) -> TuneResult:
    """Exhaustive grid search of (l, k, lam1, alpha) on annotated images.

    ``banks`` maps each aggregation length in the grid to its ``(raw, agg)``
    pair.  The prior depends on (l, k, alpha) only, so it is computed once
    per such triple and reused across lam1.
    """
    if len(images) == 0 or len(images) != len(s_true):
        raise ValueError("need a non-empty set of images with matching defect annotations")
    missing = [l for l in grid.l if l not in banks]
    if missing:
        raise ValueError(f"no memory bank for aggregation length(s) {missing}")
    table = []
    for l, k, alpha in itertools.product(grid.l, grid.k, grid.alpha):
        raw, agg = banks[l]
        point = {"l": l, "k": k, "alpha": alpha}
        try:
            params = AddressingParams(k=k, alpha=alpha, aligned=aligned)
            priors = [deep_image_prior(model, raw, agg, x, params).X_hat for x in images]
        except Exception as exc:  # noqa: BLE001 - re-raised with the grid point attached
            raise GridPointError(point, exc) from exc
        for lam in grid.lam1:
            p = {**point, "lam1": lam}
            try:
                dp = DecompParams(lam1=lam, lr=base.lr, max_iter=base.max_iter, tol=base.tol, patience=base.patience, ssim=base.ssim)
                ls = [decompose(x, xh, dp).L for x, xh in zip(images, priors)]
            except Exception as exc:  # noqa: BLE001
                raise GridPointError(p, exc) from exc
            crit = background_criterion(images, ls, s_true)
            log.info("tune l=%d k=%d lam1=%g alpha=%g -> %.6g", l, k, lam, alpha, crit)
            table.append({**p, "criterion": crit})
    order = {"l": grid.l, "k": grid.k, "lam1": grid.lam1, "alpha": grid.alpha}
    table.sort(key=lambda r: tuple(order[n].index(r[n]) for n in ("l", "k", "lam1", "alpha")))
    best = min(table, key=lambda r: r["criterion"])
    return TuneResult(best={n: best[n] for n in ("l", "k", "lam1", "alpha")}, table=table)
