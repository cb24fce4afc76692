"""Memory addressing: k-NN over the aggregated bank, anomaly scores, prior retrieval.

Distances are ``1 - cosine similarity`` so that smaller means more similar
and a large mean distance to the k nearest bank rows flags an anomalous
patch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError
from .memory_bank import AggBank, RawBank, aggregate
from .nn import Model, decode, encode

_QUERY_BLOCK = 64  # queries per distance block; bounds memory at 64 x rows


@dataclass(frozen=True)
class AddressingParams:
    k: int = 13
    alpha: float = 0.3
    aligned: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class ScoreMap:
    s: np.ndarray  # (P1, P2)
    s_alpha: float
    A: np.ndarray  # (P1, P2) bool, patches to replace


@dataclass
class PriorResult:
    X_hat: np.ndarray
    score: ScoreMap
    M_hat: np.ndarray
    M_retrieved: np.ndarray
    M_updated: np.ndarray


def patch_distance(a, b) -> float:
    """``1 - <a, b> / (|a| |b|)``; two zero vectors are at distance 0, one zero vector at 1."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeMismatchError(f"latent vectors differ in length: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0 if na == nb else 1.0
    return float(min(max(1.0 - np.dot(a / na, b / nb), 0.0), 2.0))


def _unit(q: np.ndarray):
    q = np.asarray(q, dtype=np.float64)
    n = np.sqrt(np.einsum("ij,ij->i", q, q))
    zero = n == 0
    return q / np.where(zero, 1.0, n)[:, None], zero


def cosine_distances(queries: np.ndarray, unit_bank: np.ndarray, bank_zero: np.ndarray) -> np.ndarray:
    """Distance matrix ``(n_queries, n_rows)`` against pre-normalised bank rows."""
    qu, qzero = _unit(queries)
    d = np.clip(1.0 - qu @ unit_bank.T, 0.0, 2.0)
    if qzero.any() or bank_zero.any():
        both = qzero[:, None] & bank_zero[None, :]
        one = qzero[:, None] ^ bank_zero[None, :]
        d = np.where(both, 0.0, np.where(one, 1.0, d))
    return d


def _k_smallest(d: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k smallest entries, ascending by (distance, position)."""
    if k >= d.size:
        return np.argsort(d, kind="stable")[:k]
    kth = np.partition(d, k - 1)[k - 1]
    cand = np.flatnonzero(d <= kth)
    return cand[np.argsort(d[cand], kind="stable")[:k]]


def knn_query(query, agg: AggBank, k: int, aligned: bool = False, location=None):
    """k nearest aggregated bank rows to one aggregated query vector.

    Returns ``(row_indices, distances)`` sorted by ascending distance, ties
    by ascending row index.  In aligned mode only rows recorded at
    ``location`` are candidates.
    """
    q = np.asarray(query, dtype=np.float64).reshape(1, -1)
    if q.shape[1] != agg.matrix.shape[1]:
        raise ShapeMismatchError(f"query length {q.shape[1]} != bank width {agg.matrix.shape[1]}")
    unit, zero = agg.unit_rows()
    if aligned:
        if location is None:
            raise ValueError("aligned search needs the query location")
        cand = agg.rows_at(*location)
    else:
        cand = np.arange(agg.rows)
    if len(cand) < k:
        raise ValueError(f"only {len(cand)} bank candidates for k={k}" + (f" at location {tuple(location)}" if aligned else ""))
    d = cosine_distances(q, unit[cand], zero[cand])[0]
    pos = _k_smallest(d, k)
    return cand[pos], d[pos]


def knn_map(query_agg: np.ndarray, agg: AggBank, k: int, aligned: bool = False):
    """Vectorised ``knn_query`` for a whole ``(P1, P2, D)`` aggregated query map.

    Returns index and distance arrays of shape ``(P1, P2, k)``.
    """
    p1, p2, dim = query_agg.shape
    if dim != agg.matrix.shape[1]:
        raise ShapeMismatchError(f"query width {dim} != bank width {agg.matrix.shape[1]}")
    unit, zero = agg.unit_rows()
    idx = np.empty((p1, p2, k), dtype=np.int64)
    dist = np.empty((p1, p2, k))
    if aligned:
        for a in range(p1):
            for b in range(p2):
                idx[a, b], dist[a, b] = knn_query(query_agg[a, b], agg, k, True, (a, b))
        return idx, dist
    if agg.rows < k:
        raise ValueError(f"only {agg.rows} bank rows for k={k}")
    q = query_agg.reshape(p1 * p2, dim)
    flat_i = idx.reshape(p1 * p2, k)
    flat_d = dist.reshape(p1 * p2, k)
    for start in range(0, q.shape[0], _QUERY_BLOCK):
        block = cosine_distances(q[start:start + _QUERY_BLOCK], unit, zero)
        for r, row in enumerate(block):
            pos = _k_smallest(row, k)
            flat_i[start + r] = pos
            flat_d[start + r] = row[pos]
    return idx, dist


def threshold_scores(s: np.ndarray, alpha: float) -> ScoreMap:
    """Pick ``s_alpha`` so the ``ceil(alpha * P)`` top-scoring patches satisfy ``s > s_alpha``.

    Patches tied with the first excluded score are excluded as well.
    """
    flat = np.sort(s.ravel())[::-1]
    n = int(math.ceil(alpha * flat.size - 1e-9))
    if n <= 0:
        s_alpha = float(flat[0])
    elif n >= flat.size:
        s_alpha = float(flat[-1])
    else:
        s_alpha = float(flat[n])
    return ScoreMap(s=s, s_alpha=s_alpha, A=s > s_alpha)


def anomaly_score(query_agg: np.ndarray, agg: AggBank, params: AddressingParams, _knn=None) -> ScoreMap:
    idx, dist = _knn if _knn is not None else knn_map(query_agg, agg, params.k, params.aligned)
    s = dist.sum(axis=2) / params.k
    return threshold_scores(s, params.alpha)


def retrieve_prior_features(query_agg: np.ndarray, raw: RawBank, agg: AggBank, params: AddressingParams, _knn=None) -> np.ndarray:
    """Mean raw latent of the k nearest aggregated rows at every location."""
    if raw.rows != agg.rows:
        raise ShapeMismatchError("raw and aggregated banks are not row-aligned")
    idx, _ = _knn if _knn is not None else knn_map(query_agg, agg, params.k, params.aligned)
    retrieved = raw.matrix[idx].astype(np.float64).sum(axis=2) / params.k
    return retrieved.astype(raw.matrix.dtype)


def replace_top_alpha(M_hat: np.ndarray, M_retrieved: np.ndarray, score: ScoreMap) -> np.ndarray:
    if M_hat.shape != M_retrieved.shape or M_hat.shape[:2] != score.A.shape:
        raise ShapeMismatchError("feature maps and score map disagree in shape")
    return np.where(score.A[:, :, None], M_retrieved, M_hat)


def deep_image_prior(model: Model, raw: RawBank, agg: AggBank, X: np.ndarray, params: AddressingParams) -> PriorResult:
    """Encode, score against the bank, swap the top-alpha patches for retrieved latents, decode."""
    M_hat = encode(model, X)
    q = aggregate(M_hat, agg.l)
    knn = knn_map(q, agg, params.k, params.aligned)
    score = anomaly_score(q, agg, params, _knn=knn)
    M_ret = retrieve_prior_features(q, raw, agg, params, _knn=knn)
    M_upd = replace_top_alpha(M_hat, M_ret, score)
    return PriorResult(X_hat=decode(model, M_upd), score=score, M_hat=M_hat, M_retrieved=M_ret, M_updated=M_upd)
