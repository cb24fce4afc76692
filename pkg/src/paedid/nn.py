"""Minimal convolutional autoencoder in numpy with exact reverse-mode gradients.

Tensors are NHWC.  Every layer caches what it needs in ``forward`` and
consumes it in ``backward``; parameter gradients land in ``layer.grads``.
The encoder is ``[conv3x3 -> ReLU -> maxpool2] * stages``; the decoder
mirrors it with nearest 2x upsampling and ends in ``conv3x3 -> sigmoid``.
"""
from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import CorruptFileError, DivergenceError, ShapeMismatchError
from .tensor_image import read_tensor_from, tensor_to_bytes

log = logging.getLogger(__name__)

CKPT_MAGIC = b"PAEM"
CKPT_VERSION = 1


# ---------------------------------------------------------------------------
# layers


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    """3x3 patches of a padded NHWC batch -> (N*h*w, 9*C), ordered (dy, dx, c)."""
    n, _, _, c = xp.shape
    s = xp.strides
    view = as_strided(xp, shape=(n, h, w, 3, 3, c), strides=(s[0], s[1], s[2], s[1], s[2], s[3]), writeable=False)
    return view.reshape(n * h * w, 9 * c)


class Conv2D:
    """3x3 convolution, stride 1, zero 'same' padding."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = weight  # (3, 3, cin, cout)
        self.bias = bias  # (cout,)
        self.grads: tuple[np.ndarray, np.ndarray] | None = None
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, h, w, c = x.shape
        kh, kw, cin, cout = self.weight.shape
        if (kh, kw) != (3, 3) or c != cin:
            raise ShapeMismatchError(f"conv expects {cin} input channels with 3x3 kernel, got input {x.shape}, kernel {self.weight.shape}")
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        cols = _im2col(xp, h, w)
        out = cols @ self.weight.reshape(9 * cin, cout) + self.bias
        self._cache = (x.shape, cols)
        return out.reshape(n, h, w, cout)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("Conv2D.backward called without cached activations")
        (n, h, w, cin), cols = self._cache
        cout = self.weight.shape[3]
        d2 = dout.reshape(-1, cout)
        dw = (cols.T @ d2).reshape(self.weight.shape)
        db = d2.sum(axis=0)
        dcols = (d2 @ self.weight.reshape(9 * cin, cout).T).reshape(n, h, w, 3, 3, cin)
        dxp = np.zeros((n, h + 2, w + 2, cin), dtype=dout.dtype)
        for dy in range(3):
            for dx in range(3):
                dxp[:, dy:dy + h, dx:dx + w, :] += dcols[:, :, :, dy, dx, :]
        self.grads = (dw, db)
        return dxp[:, 1:-1, 1:-1, :]


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, dout):
        if self._mask is None:
            raise RuntimeError("ReLU.backward called without cached activations")
        return np.where(self._mask, dout, 0).astype(dout.dtype, copy=False)


class MaxPool2:
    """2x2 max-pool; gradient goes to the first (row-major) maximum of each block."""

    def __init__(self):
        self._cache = None

    def forward(self, x):
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeMismatchError(f"max-pool needs even spatial dims, got {h}x{w}")
        blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
        idx = np.argmax(blocks, axis=-1)
        self._cache = (x.shape, idx)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        if self._cache is None:
            raise RuntimeError("MaxPool2.backward called without cached activations")
        (n, h, w, c), idx = self._cache
        onehot = np.arange(4) == idx[..., None]
        blocks = np.where(onehot, dout[..., None], 0).astype(dout.dtype, copy=False)
        return blocks.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)


class Upsample2:
    """Nearest-neighbour 2x upsampling."""

    def __init__(self):
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)

    def backward(self, dout):
        if self._shape is None:
            raise RuntimeError("Upsample2.backward called without cached activations")
        n, h, w, c = self._shape
        return dout.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4))


class Sigmoid:
    def __init__(self):
        self._y = None

    def forward(self, x):
        e = np.exp(-np.abs(x))
        y = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
        self._y = y
        return y

    def backward(self, dout):
        if self._y is None:
            raise RuntimeError("Sigmoid.backward called without cached activations")
        y = self._y
        return dout * y * (1 - y)


def layer_backward(layer, upstream: np.ndarray):
    """Return ``(input_grad, param_grads)``; ``param_grads`` is ``()`` for parameter-free layers."""
    dx = layer.backward(upstream)
    return dx, (layer.grads if isinstance(layer, Conv2D) else ())


# ---------------------------------------------------------------------------
# architecture / model


@dataclass(frozen=True)
class ArchSpec:
    input_dims: tuple[int, int, int]
    channels: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        d1, d2, d3 = self.input_dims
        if not self.channels or any(c < 1 for c in self.channels):
            raise ValueError(f"need at least one positive encoder width, got {self.channels}")
        if d3 < 1 or d1 < 1 or d2 < 1:
            raise ValueError(f"bad input dims {self.input_dims}")
        f = 2 ** self.stages
        if d1 % f or d2 % f:
            raise ValueError(f"input {d1}x{d2} not divisible by 2^{self.stages}")

    @property
    def stages(self) -> int:
        return len(self.channels)

    @property
    def latent_dims(self) -> tuple[int, int, int]:
        f = 2 ** self.stages
        return (self.input_dims[0] // f, self.input_dims[1] // f, self.channels[-1])

    def conv_shapes(self) -> list[tuple[int, int]]:
        """(cin, cout) for every conv, encoder first, final output conv last."""
        ch = self.channels
        shapes = []
        cin = self.input_dims[2]
        for c in ch:
            shapes.append((cin, c))
            cin = c
        for j in range(len(ch) - 1, -1, -1):
            shapes.append((ch[j], ch[j - 1] if j > 0 else ch[0]))
        shapes.append((ch[0], self.input_dims[2]))
        return shapes


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class Model:
    arch: ArchSpec
    params: list[np.ndarray]  # [w0, b0, w1, b1, ...] in conv_shapes order
    seed: int = 0
    epochs: int = 0
    loss_trace: list[float] = field(default_factory=list)

    @property
    def n_encoder_convs(self) -> int:
        return self.arch.stages

    def _convs(self) -> list[Conv2D]:
        return [Conv2D(self.params[2 * i], self.params[2 * i + 1]) for i in range(len(self.params) // 2)]

    def encoder_layers(self, convs=None) -> list:
        convs = convs or self._convs()
        layers = []
        for conv in convs[: self.arch.stages]:
            layers += [conv, ReLU(), MaxPool2()]
        return layers

    def decoder_layers(self, convs=None) -> list:
        convs = convs or self._convs()
        layers = []
        for conv in convs[self.arch.stages: 2 * self.arch.stages]:
            layers += [Upsample2(), conv, ReLU()]
        layers += [convs[-1], Sigmoid()]
        return layers

    def layers(self):
        convs = self._convs()
        return self.encoder_layers(convs) + self.decoder_layers(convs), convs


def init_model(arch: ArchSpec, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    params = []
    for cin, cout in arch.conv_shapes():
        bound = np.sqrt(6.0 / (9 * cin + 9 * cout))
        params.append(rng.uniform(-bound, bound, size=(3, 3, cin, cout)).astype(np.float32))
        params.append(np.zeros(cout, dtype=np.float32))
    return Model(arch=arch, params=params, seed=seed)


def _as_batch(x: np.ndarray, dims: tuple[int, ...], what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(dims):
        raise ShapeMismatchError(f"{what} expects (..., {', '.join(map(str, dims))}), got {x.shape}")
    return x, single


def _run(layers, x):
    for layer in layers:
        x = layer.forward(x)
    return x


def encode(model: Model, img: np.ndarray) -> np.ndarray:
    """Feature map ``(P1, P2, P3)`` of one image, or ``(N, P1, P2, P3)`` of a batch."""
    x, single = _as_batch(img, model.arch.input_dims, "encode")
    out = _run(model.encoder_layers(), x.astype(model.params[0].dtype))
    return out[0] if single else out


def decode(model: Model, m: np.ndarray) -> np.ndarray:
    x, single = _as_batch(m, model.arch.latent_dims, "decode")
    out = _run(model.decoder_layers(), x.astype(model.params[0].dtype))
    return out[0] if single else out


def reconstruct(model: Model, img: np.ndarray) -> np.ndarray:
    return decode(model, encode(model, img))


def loss_and_grads(model: Model, batch: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Summed squared reconstruction error of a batch (averaged per image) and its parameter gradients."""
    layers, convs = model.layers()
    x = batch.astype(model.params[0].dtype)
    y = _run(layers, x)
    r = y - x
    n = x.shape[0]
    loss = float(np.sum(r.astype(np.float64) ** 2) / n)
    g = (2.0 / n) * r
    for layer in reversed(layers):
        g = layer.backward(g)
    grads = []
    for conv in convs:
        grads.extend(conv.grads)
    return loss, grads


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    t: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns new ``(params, state)``; inputs are not modified."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatchError("params, grads and state must have equal length")
    t = state.t + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeMismatchError(f"param {p.shape} vs grad {g.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        step = (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
        new_p.append((p - step).astype(p.dtype, copy=False))
        new_m.append(m.astype(p.dtype, copy=False))
        new_v.append(v.astype(p.dtype, copy=False))
    return new_p, AdamState(t, new_m, new_v)


# ---------------------------------------------------------------------------
# training


def train_autoencoder(images, cfg: TrainConfig, arch: ArchSpec, on_epoch=None) -> Model:
    """Minimise the summed squared reconstruction error by mini-batch Adam.

    Deterministic for a fixed ``cfg.seed``: the seed drives both the weight
    initialisation and the per-epoch shuffle.  ``model.loss_trace`` holds the
    mean per-image squared error of each epoch.
    """
    data = np.stack([np.asarray(im, dtype=np.float32) for im in images]) if len(images) else None
    if data is None:
        raise ValueError("training needs at least one image")
    if tuple(data.shape[1:]) != arch.input_dims:
        raise ShapeMismatchError(f"images are {data.shape[1:]}, architecture expects {arch.input_dims}")
    model = init_model(arch, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    state = AdamState.zeros_like(model.params)
    n = data.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = data[order[start:start + cfg.batch_size]]
            loss, grads = loss_and_grads(model, batch)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            total += loss * batch.shape[0]
            model.params, state = adam_step(model.params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        model.loss_trace.append(total / n)
        model.epochs = epoch + 1
        log.debug("epoch %d loss %.6g", epoch + 1, total / n)
        if on_epoch is not None:
            on_epoch(epoch + 1, total / n)
    return model


# ---------------------------------------------------------------------------
# checkpoints


def model_to_bytes(model: Model) -> bytes:
    a = model.arch
    head = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, a.stages)
    head += struct.pack(f"<{a.stages}I", *a.channels)
    head += struct.pack("<III", *a.input_dims)
    return head + b"".join(tensor_to_bytes(p) for p in model.params)


def save_model(model: Model, path) -> None:
    with open(path, "wb") as f:
        f.write(model_to_bytes(model))


def load_model(path) -> Model:
    with open(path, "rb") as f:
        data = f.read()
    f = io.BytesIO(data)
    if f.read(4) != CKPT_MAGIC:
        raise CorruptFileError(f"{path}: not a model checkpoint (bad magic)")
    try:
        version, stages = struct.unpack("<II", f.read(8))
        if version != CKPT_VERSION:
            raise CorruptFileError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
        if not 1 <= stages <= 16:
            raise CorruptFileError(f"{path}: implausible stage count {stages}")
        channels = struct.unpack(f"<{stages}I", f.read(4 * stages))
        dims = struct.unpack("<III", f.read(12))
    except struct.error as exc:
        raise CorruptFileError(f"{path}: truncated checkpoint header") from exc
    try:
        arch = ArchSpec(dims, channels)
    except ValueError as exc:
        raise CorruptFileError(f"{path}: invalid architecture ({exc})") from exc
    params = []
    for cin, cout in arch.conv_shapes():
        w = read_tensor_from(f)
        b = read_tensor_from(f)
        if w.shape != (3, 3, cin, cout) or b.shape != (cout,):
            raise CorruptFileError(f"{path}: parameter shape {w.shape}/{b.shape} does not match architecture")
        params += [w, b]
    if f.tell() != len(data):
        raise CorruptFileError(f"{path}: trailing bytes after parameters")
    return Model(arch=arch, params=params)
