"""SSIM loss, deep-prior image decomposition and mask post-processing.

``decompose`` splits a test image ``X`` into a background ``L`` that stays
SSIM-close to the deep image prior ``X_hat`` and a sparse residual
``S = X - L``::

    min_L  ssim_loss(L, X_hat) + lam1 * |X - L|_1

``decompose_noisy`` adds a Gaussian noise term ``e``::

    min_{L,S}  |X - L - S|_2^2 + lam1 * |S|_1 + lam2 * ssim_loss(L, X_hat)
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ShapeMismatchError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"SSIM window side must be odd, got {self.window}")
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValueError("SSIM constants must be positive")


@dataclass(frozen=True)
class DecompParams:
    lam1: float = 1e-5
    lam2: float | None = None
    lr: float = 0.01
    max_iter: int = 500
    tol: float = 1e-6
    patience: int = 10
    ssim: SsimParams = SsimParams()

    def __post_init__(self):
        for name in ("lam1", "lam2"):
            v = getattr(self, name)
            if v is not None and not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if not self.lr > 0 or self.max_iter < 0 or self.patience < 1:
            raise ValueError("invalid solver settings")


@dataclass
class DecompResult:
    L: np.ndarray
    S: np.ndarray
    e: np.ndarray | None = None
    objective: list[float] = field(default_factory=list)
    iterations: int = 0


# ---------------------------------------------------------------------------
# SSIM


def _box_valid(a: np.ndarray, w: int) -> np.ndarray:
    """Sum over every w x w window fully inside ``a`` (first two axes)."""
    c = np.cumsum(a, axis=0)
    c = np.concatenate([c[w - 1:w], c[w:] - c[:-w]], axis=0)
    c = np.cumsum(c, axis=1)
    return np.concatenate([c[:, w - 1:w], c[:, w:] - c[:, :-w]], axis=1)


def _box_full(g: np.ndarray, w: int) -> np.ndarray:
    """Adjoint of ``_box_valid``: scatter window values back onto their pixels."""
    pad = ((w - 1, w - 1), (w - 1, w - 1)) + ((0, 0),) * (g.ndim - 2)
    return _box_valid(np.pad(g, pad), w)


def _check_pair(a, b, p: SsimParams):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"SSIM inputs differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.shape[0] < p.window or a.shape[1] < p.window:
        raise ShapeMismatchError(f"image {a.shape[:2]} smaller than the {p.window}x{p.window} SSIM window")
    return a, b


def _ssim_terms(a, b, p: SsimParams):
    n = float(p.window * p.window)
    mu_a = _box_valid(a, p.window) / n
    mu_b = _box_valid(b, p.window) / n
    var_a = _box_valid(a * a, p.window) / n - mu_a * mu_a
    var_b = _box_valid(b * b, p.window) / n - mu_b * mu_b
    cov = _box_valid(a * b, p.window) / n - mu_a * mu_b
    a1 = 2 * mu_a * mu_b + p.c1
    a2 = 2 * cov + p.c2
    b1 = mu_a * mu_a + mu_b * mu_b + p.c1
    b2 = var_a + var_b + p.c2
    return mu_a, mu_b, a1, a2, b1, b2


def ssim_map(a, b, p: SsimParams = SsimParams()) -> np.ndarray:
    """Local SSIM of every valid window, shape ``(H-w+1, W-w+1, C)``."""
    a, b = _check_pair(a, b, p)
    _, _, a1, a2, b1, b2 = _ssim_terms(a, b, p)
    return (a1 * a2) / (b1 * b2)


def ssim_loss(a, b, p: SsimParams = SsimParams()) -> float:
    """``1 - mean local SSIM`` over all valid windows and channels; in [0, 2]."""
    return float(1.0 - ssim_map(a, b, p).mean())


def ssim_loss_grad(a, b, p: SsimParams = SsimParams()) -> tuple[float, np.ndarray]:
    """Loss and its exact gradient with respect to ``a``.

    The per-window derivative is regrouped so every term carries a factor
    that vanishes bitwise when ``a == b``; the gradient at a perfect match
    is exactly zero rather than rounding noise.
    """
    shape = np.shape(a)
    a, b = _check_pair(a, b, p)
    mu_a, mu_b, a1, a2, b1, b2 = _ssim_terms(a, b, p)
    s = (a1 * a2) / (b1 * b2)
    loss = float(1.0 - s.mean())
    k1 = 2 * (a2 * (mu_b * b1 - mu_a * a1) / (b1 * b1 * b2) + a1 * (mu_a * a2 - mu_b * b2) / (b1 * b2 * b2))
    k2 = 2 * a1 / (b1 * b2)
    k4 = 2 * a1 * (b2 - a2) / (b1 * b2 * b2)
    scale = -1.0 / (s.size * p.window * p.window)
    grad = scale * (_box_full(k1, p.window) + _box_full(k2, p.window) * (b - a) + _box_full(k4, p.window) * a)
    return loss, grad.reshape(shape)


# ---------------------------------------------------------------------------
# solvers


class _Adam:
    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self, g):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _l1_pseudo_grad(g_smooth, r, lam):
    """Minimum-norm subgradient of ``f + lam*|r|`` where ``r = L - X``."""
    sign_r = np.sign(r)
    at_kink = r == 0
    g_kink = np.where(np.abs(g_smooth) <= lam, 0.0, g_smooth - lam * np.sign(g_smooth))
    return np.where(at_kink, g_kink, g_smooth + lam * sign_r)


def _converged(trace, patience, tol) -> bool:
    if len(trace) <= patience:
        return False
    old, new = trace[-1 - patience], trace[-1]
    return abs(new - old) <= tol * max(abs(old), 1e-300)


def _prepare(X, X_hat):
    X = np.asarray(X, dtype=np.float64)
    X_hat = np.asarray(X_hat, dtype=np.float64)
    if X.shape != X_hat.shape:
        raise ShapeMismatchError(f"image {X.shape} and prior {X_hat.shape} differ in shape")
    return X, X_hat


def decompose(X, X_hat, p: DecompParams = DecompParams()) -> DecompResult:
    """Solve the noiseless decomposition from ``L = X_hat`` by projected Adam.

    The L1 term uses its minimum-norm subgradient, and a step that would
    carry ``L`` across ``X`` stops at ``X`` (orthant projection), so pixels
    explained by the background sit at exactly ``S = 0``.  ``L`` is clamped
    to [0, 1] after every step.  The best iterate is returned.
    """
    X, X_hat = _prepare(X, X_hat)
    lam = float(p.lam1)
    L = X_hat.copy()
    opt = _Adam(L.shape, p.lr)

    def objective(L):
        loss, g = ssim_loss_grad(L, X_hat, p.ssim)
        return loss + lam * float(np.abs(X - L).sum()), g

    f, g_ssim = objective(L)
    trace = [f]
    best_f, best_L = f, L
    it = 0
    for it in range(1, p.max_iter + 1):
        r = L - X
        g = _l1_pseudo_grad(g_ssim, r, lam)
        orthant = np.where(r != 0, np.sign(r), -np.sign(g))
        L_new = L - opt.step(g)
        L_new = np.where(np.sign(L_new - X) != orthant, X, L_new)
        L = np.clip(L_new, 0.0, 1.0)
        f, g_ssim = objective(L)
        if not np.isfinite(f):
            raise DivergenceError(f"decomposition objective became non-finite at iteration {it}")
        trace.append(f)
        if f < best_f:
            best_f, best_L = f, L
        if _converged(trace, p.patience, p.tol):
            break
    log.debug("decompose: %d iterations, objective %.6g -> %.6g", it, trace[0], best_f)
    return DecompResult(L=best_L, S=X - best_L, objective=trace, iterations=it)


def soft_threshold(x, tau):
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def decompose_noisy(X, X_hat, p: DecompParams) -> DecompResult:
    """Block-coordinate solver for the noisy model ``X = L + S + e``.

    Alternates one Adam step on ``L`` (``S`` fixed) with the exact
    ``S``-update ``soft_threshold(X - L, lam1 / 2)``.
    """
    if p.lam2 is None:
        raise ValueError("noisy decomposition requires lam2")
    X, X_hat = _prepare(X, X_hat)
    lam1, lam2 = float(p.lam1), float(p.lam2)
    L = X_hat.copy()
    S = soft_threshold(X - L, lam1 / 2)
    opt = _Adam(L.shape, p.lr)

    def objective(L, S):
        loss, g = ssim_loss_grad(L, X_hat, p.ssim)
        r = X - L - S
        return float((r * r).sum()) + lam1 * float(np.abs(S).sum()) + lam2 * loss, lam2 * g

    f, g_ssim = objective(L, S)
    trace = [f]
    best = (f, L, S)
    it = 0
    for it in range(1, p.max_iter + 1):
        g = g_ssim - 2 * (X - L - S)
        L = np.clip(L - opt.step(g), 0.0, 1.0)
        S = soft_threshold(X - L, lam1 / 2)
        f, g_ssim = objective(L, S)
        if not np.isfinite(f):
            raise DivergenceError(f"noisy decomposition objective became non-finite at iteration {it}")
        trace.append(f)
        if f < best[0]:
            best = (f, L, S)
        if _converged(trace, p.patience, p.tol):
            break
    _, L, S = best
    return DecompResult(L=L, S=S, e=X - L - S, objective=trace, iterations=it)


def residual_segmentation(X, X_hat) -> np.ndarray:
    """Plain reconstruction residual ``X - X_hat`` (no decomposition)."""
    X, X_hat = _prepare(X, X_hat)
    return X - X_hat


def defect_magnitude(S) -> np.ndarray:
    """Per-pixel max-over-channels ``|S|``, min-max scaled to [0, 1]; flat input maps to zeros."""
    S = np.asarray(S, dtype=np.float64)
    m = np.abs(S).max(axis=2) if S.ndim == 3 else np.abs(S)
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def binarize(S, t: float) -> np.ndarray:
    return defect_magnitude(S) > t
