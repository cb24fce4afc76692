"""Raw and aggregated patch-latent memory banks, coreset reduction, bank files.

Both banks are matricized: one row per training patch, rows ordered
image-major then ``p1`` then ``p2``.  A shared side table maps every row back
to ``(image, p1, p2)`` and stays attached through coreset reduction, so row
``j`` of the aggregated bank always describes the same patch as row ``j`` of
the raw bank.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptFileError, ShapeMismatchError
from .nn import Model, encode
from .tensor_image import read_tensor_from, tensor_to_bytes

BANK_MAGIC = b"PAEB"
BANK_VERSION = 1


@dataclass
class RawBank:
    matrix: np.ndarray  # (rows, P3) float32
    index: np.ndarray  # (rows, 3) int64: image, p1, p2
    dims: tuple[int, int, int, int]  # I, P1, P2, P3

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]


@dataclass
class AggBank:
    matrix: np.ndarray  # (rows, P3 * w * w) float32
    index: np.ndarray
    dims: tuple[int, int, int, int]
    l: int
    _unit: tuple | None = field(default=None, repr=False, compare=False)
    _by_loc: dict | None = field(default=None, repr=False, compare=False)

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def window(self) -> int:
        return window_side(self.l)

    def unit_rows(self):
        """Rows scaled to unit norm (float64) and a mask of all-zero rows; cached."""
        if self._unit is None:
            m = self.matrix.astype(np.float64)
            norms = np.sqrt(np.einsum("ij,ij->i", m, m))
            zero = norms == 0
            self._unit = (m / np.where(zero, 1.0, norms)[:, None], zero)
        return self._unit

    def rows_at(self, p1: int, p2: int) -> np.ndarray:
        """Bank rows recorded at spatial location ``(p1, p2)``, ascending."""
        if self._by_loc is None:
            groups: dict = {}
            for j, (_, a, b) in enumerate(self.index):
                groups.setdefault((int(a), int(b)), []).append(j)
            self._by_loc = {k: np.asarray(v, dtype=np.int64) for k, v in groups.items()}
        return self._by_loc.get((int(p1), int(p2)), np.empty(0, dtype=np.int64))


def window_side(l: int) -> int:
    return 2 * (l // 2) + 1


def aggregate(fmap: np.ndarray, l: int) -> np.ndarray:
    """Neighbourhood vectors of a ``(P1, P2, P3)`` map -> ``(P1, P2, P3 * w * w)``.

    Each vector is the row-major ``(dy, dx, channel)`` flattening of the
    ``w x w`` window centred on the patch, zero outside the map.
    """
    if l < 1 or l % 2 == 0:
        raise ValueError(f"aggregation length must be a positive odd integer, got {l}")
    p1, p2, p3 = fmap.shape
    if l > min(2 * p1 - 1, 2 * p2 - 1):
        raise ValueError(f"aggregation length {l} too large for a {p1}x{p2} feature map")
    r = l // 2
    w = window_side(l)
    padded = np.pad(fmap, ((r, r), (r, r), (0, 0)))
    s = padded.strides
    view = np.lib.stride_tricks.as_strided(padded, shape=(p1, p2, w, w, p3), strides=(s[0], s[1], s[0], s[1], s[2]), writeable=False)
    return view.reshape(p1, p2, w * w * p3).copy()


def _side_table(n_images: int, p1: int, p2: int) -> np.ndarray:
    i, a, b = np.meshgrid(np.arange(n_images), np.arange(p1), np.arange(p2), indexing="ij")
    return np.stack([i.ravel(), a.ravel(), b.ravel()], axis=1).astype(np.int64)


def build_raw_bank(model: Model, images) -> RawBank:
    """Encode every image (one at a time, the same path used for test queries)."""
    if len(images) == 0:
        raise ValueError("cannot build a memory bank from zero images")
    maps = []
    for k, img in enumerate(images):
        if tuple(np.shape(img)) != model.arch.input_dims:
            raise ShapeMismatchError(f"image {k} has shape {np.shape(img)}, model expects {model.arch.input_dims}")
        maps.append(encode(model, img))
    fm = np.stack(maps).astype(np.float32)
    n, p1, p2, p3 = fm.shape
    return RawBank(matrix=fm.reshape(n * p1 * p2, p3), index=_side_table(n, p1, p2), dims=(n, p1, p2, p3))


def raw_feature_maps(raw: RawBank) -> np.ndarray:
    n, p1, p2, p3 = raw.dims
    if raw.rows != n * p1 * p2:
        raise ValueError("feature maps are only recoverable from an unreduced bank")
    return raw.matrix.reshape(n, p1, p2, p3)


def build_agg_bank(raw: RawBank, l: int) -> AggBank:
    maps = raw_feature_maps(raw)
    n, p1, p2, p3 = raw.dims
    agg = np.stack([aggregate(m, l) for m in maps])
    return AggBank(matrix=agg.reshape(n * p1 * p2, -1), index=raw.index.copy(), dims=raw.dims, l=l)


def random_projection(dim: int, target: int, seed: int) -> np.ndarray | None:
    """Gaussian projection matrix with N(0, 1/target) entries, or None for identity."""
    if dim <= target:
        return None
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0 / np.sqrt(target), size=(dim, target))


def greedy_coreset(features: np.ndarray, n_c: int, seed: int) -> np.ndarray:
    """k-center greedy selection; returns row indices in selection order.

    The first row is drawn uniformly with ``seed``; each later pick is the row
    farthest (Euclidean) from everything picked so far, lowest index on ties.
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= n_c <= n:
        raise ValueError(f"coreset size {n_c} outside [1, {n}]")
    rng = np.random.default_rng(seed)
    first = int(rng.integers(n))
    selected = np.zeros(n, dtype=bool)
    order = [first]
    selected[first] = True
    mind = np.full(n, np.inf)
    last = first
    for _ in range(n_c - 1):
        diff = x - x[last]
        mind = np.minimum(mind, np.sqrt(np.einsum("ij,ij->i", diff, diff)))
        cand = np.where(selected, -np.inf, mind)
        last = int(np.argmax(cand))
        selected[last] = True
        order.append(last)
    return np.asarray(order, dtype=np.int64)


def coreset_subsample(agg: AggBank, raw: RawBank, n_c: int, seed: int = 0, proj_dim: int = 128):
    """Reduce both banks to the same ``n_c`` rows chosen on the projected aggregated bank."""
    if agg.rows != raw.rows or not np.array_equal(agg.index, raw.index):
        raise ShapeMismatchError("aggregated and raw banks are not row-aligned")
    if n_c > agg.rows:
        raise ValueError(f"coreset size {n_c} exceeds bank rows {agg.rows}")
    feats = agg.matrix.astype(np.float64)
    proj = random_projection(feats.shape[1], proj_dim, seed)
    if proj is not None:
        feats = feats @ proj
    sel = greedy_coreset(feats, n_c, seed)
    new_raw = RawBank(matrix=raw.matrix[sel].copy(), index=raw.index[sel].copy(), dims=raw.dims)
    new_agg = AggBank(matrix=agg.matrix[sel].copy(), index=agg.index[sel].copy(), dims=agg.dims, l=agg.l)
    return new_agg, new_raw


# ---------------------------------------------------------------------------
# bank files


def bank_to_bytes(raw: RawBank, agg: AggBank) -> bytes:
    if raw.rows != agg.rows or not np.array_equal(raw.index, agg.index):
        raise ShapeMismatchError("raw and aggregated banks are not row-aligned")
    head = BANK_MAGIC + struct.pack("<I", BANK_VERSION)
    head += struct.pack("<5I", *raw.dims, agg.l)
    head += struct.pack("<I", raw.rows)
    head += np.ascontiguousarray(raw.index, dtype="<u4").tobytes()
    return head + tensor_to_bytes(raw.matrix) + tensor_to_bytes(agg.matrix)


def save_bank(raw: RawBank, agg: AggBank, path) -> None:
    with open(path, "wb") as f:
        f.write(bank_to_bytes(raw, agg))


def load_bank(path) -> tuple[RawBank, AggBank]:
    with open(path, "rb") as fh:
        data = fh.read()
    f = io.BytesIO(data)
    if f.read(4) != BANK_MAGIC:
        raise CorruptFileError(f"{path}: not a memory bank file (bad magic)")
    try:
        (version,) = struct.unpack("<I", f.read(4))
        if version != BANK_VERSION:
            raise CorruptFileError(f"{path}: bank version {version}, expected {BANK_VERSION}")
        n, p1, p2, p3, l = struct.unpack("<5I", f.read(20))
        (rows,) = struct.unpack("<I", f.read(4))
    except struct.error as exc:
        raise CorruptFileError(f"{path}: truncated bank header") from exc
    side = f.read(12 * rows)
    if len(side) != 12 * rows:
        raise CorruptFileError(f"{path}: truncated side table")
    index = np.frombuffer(side, dtype="<u4").reshape(rows, 3).astype(np.int64)
    raw_m = read_tensor_from(f)
    agg_m = read_tensor_from(f)
    w = window_side(l)
    if raw_m.shape != (rows, p3) or agg_m.shape != (rows, p3 * w * w):
        raise CorruptFileError(f"{path}: matrix shapes {raw_m.shape}/{agg_m.shape} disagree with header")
    if f.tell() != len(data):
        raise CorruptFileError(f"{path}: trailing bytes after bank payload")
    dims = (n, p1, p2, p3)
    return RawBank(raw_m, index, dims), AggBank(agg_m, index.copy(), dims, l)
