"""JSON pipeline configuration and the per-image inference path shared by the CLI.

A config file is a single JSON object with the optional sections ``arch``,
``train``, ``addressing``, ``decomposition``, ``coreset``, ``threshold`` and
``data``.  Missing keys take the defaults below; unknown keys are errors.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .addressing import AddressingParams, PriorResult, deep_image_prior
from .decomposition import DecompParams, DecompResult, SsimParams, decompose, decompose_noisy, defect_magnitude, residual_segmentation
from .errors import ConfigError
from .memory_bank import AggBank, RawBank
from .nn import ArchSpec, Model, TrainConfig
from .synth import DefectSpec, SynthConfig

MODES = ("paedid", "residual", "noisy")
CLEAN_SCORE = 1e-6  # images whose every patch scores at or below this are normal

_DEFAULTS = {
    "arch": {"input_size": [128, 128, 1], "channels": [64, 128]},
    "train": {"lr": 1e-3, "batch_size": 16, "epochs": 100, "seed": 0},
    "addressing": {"l": 7, "k": 13, "alpha": 0.3, "aligned": False},
    "decomposition": {"lam1": 1e-5, "lam2": None, "lr": 0.01, "max_iter": 500, "tol": 1e-6, "patience": 10},
    "coreset": {"n_c": None, "seed": 0, "proj_dim": 128},
    "threshold": 0.5,
    "data": {
        "seed": 0,
        "style": "grain",
        "image_size": [128, 128],
        "n_train": 200,
        "n_test": 20,
        "defect": {"strokes": [1, 3], "width": [1, 4], "offset": [0.3, 0.7], "fraction": [0.001, 0.05]},
    },
}


@dataclass(frozen=True)
class CoresetConfig:
    n_c: int | None = None
    seed: int = 0
    proj_dim: int = 128


@dataclass(frozen=True)
class PipelineConfig:
    arch: ArchSpec = field(default_factory=lambda: ArchSpec((128, 128, 1), (64, 128)))
    train: TrainConfig = field(default_factory=TrainConfig)
    addressing: AddressingParams = field(default_factory=AddressingParams)
    l: int = 7
    decomposition: DecompParams = field(default_factory=DecompParams)
    coreset: CoresetConfig = field(default_factory=CoresetConfig)
    threshold: float = 0.5
    data: SynthConfig = field(default_factory=SynthConfig)
    n_train: int = 200
    n_test: int = 20

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Override every seed in the config (training, coreset and corpus)."""
        return replace(
            self,
            train=replace(self.train, seed=seed),
            coreset=replace(self.coreset, seed=seed),
            data=replace(self.data, seed=seed),
        )


def _merge(defaults: dict, given, where: str) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"{where or 'config'}: expected a JSON object, got {type(given).__name__}")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {unknown}")
    out = {}
    for key, default in defaults.items():
        path = f"{where}.{key}" if where else key
        if key not in given:
            out[key] = default
        elif isinstance(default, dict):
            out[key] = _merge(default, given[key], path)
        else:
            out[key] = given[key]
    return out


def _num(v, path: str, kind=float, allow_none=False):
    if v is None and allow_none:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {v!r}")
    if kind is int:
        if float(v) != int(v):
            raise ConfigError(f"{path}: expected an integer, got {v!r}")
        return int(v)
    return float(v)


def _pair(v, path: str, kind=float):
    if not isinstance(v, (list, tuple)) or len(v) != 2:
        raise ConfigError(f"{path}: expected a two-element list, got {v!r}")
    return tuple(_num(x, path, kind) for x in v)


def config_from_dict(d: dict) -> PipelineConfig:
    c = _merge(_DEFAULTS, d, "")
    try:
        a = c["arch"]
        size = a["input_size"]
        if not isinstance(size, list) or len(size) != 3:
            raise ConfigError(f"arch.input_size: expected [height, width, channels], got {size!r}")
        if not isinstance(a["channels"], list):
            raise ConfigError(f"arch.channels: expected a list, got {a['channels']!r}")
        arch = ArchSpec(tuple(_num(s, "arch.input_size", int) for s in size), tuple(_num(x, "arch.channels", int) for x in a["channels"]))

        t = c["train"]
        train = TrainConfig(
            lr=_num(t["lr"], "train.lr"),
            batch_size=_num(t["batch_size"], "train.batch_size", int),
            epochs=_num(t["epochs"], "train.epochs", int),
            seed=_num(t["seed"], "train.seed", int),
        )

        ad = c["addressing"]
        if not isinstance(ad["aligned"], bool):
            raise ConfigError(f"addressing.aligned: expected true/false, got {ad['aligned']!r}")
        l = _num(ad["l"], "addressing.l", int)
        if l < 1 or l % 2 == 0:
            raise ConfigError(f"addressing.l must be a positive odd integer, got {l}")
        addressing = AddressingParams(k=_num(ad["k"], "addressing.k", int), alpha=_num(ad["alpha"], "addressing.alpha"), aligned=ad["aligned"])

        dc = c["decomposition"]
        decomp = DecompParams(
            lam1=_num(dc["lam1"], "decomposition.lam1"),
            lam2=_num(dc["lam2"], "decomposition.lam2", allow_none=True),
            lr=_num(dc["lr"], "decomposition.lr"),
            max_iter=_num(dc["max_iter"], "decomposition.max_iter", int),
            tol=_num(dc["tol"], "decomposition.tol"),
            patience=_num(dc["patience"], "decomposition.patience", int),
            ssim=SsimParams(),
        )

        cs = c["coreset"]
        n_c = _num(cs["n_c"], "coreset.n_c", int, allow_none=True)
        if n_c is not None and n_c < 1:
            raise ConfigError(f"coreset.n_c must be >= 1, got {n_c}")
        coreset = CoresetConfig(n_c=n_c, seed=_num(cs["seed"], "coreset.seed", int), proj_dim=_num(cs["proj_dim"], "coreset.proj_dim", int))

        thr = _num(c["threshold"], "threshold")
        if not 0.0 <= thr <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got {thr}")

        dd = c["data"]
        df = dd["defect"]
        defect = DefectSpec(
            strokes=_pair(df["strokes"], "data.defect.strokes", int),
            width=_pair(df["width"], "data.defect.width", int),
            offset=_pair(df["offset"], "data.defect.offset"),
            fraction=_pair(df["fraction"], "data.defect.fraction"),
        )
        data = SynthConfig(seed=_num(dd["seed"], "data.seed", int), image_size=_pair(dd["image_size"], "data.image_size", int), style=dd["style"], defect=defect)
        n_train = _num(dd["n_train"], "data.n_train", int)
        n_test = _num(dd["n_test"], "data.n_test", int)
        if n_train < 0 or n_test < 0:
            raise ConfigError("data.n_train and data.n_test must be >= 0")
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return PipelineConfig(arch=arch, train=train, addressing=addressing, l=l, decomposition=decomp, coreset=coreset, threshold=thr, data=data, n_train=n_train, n_test=n_test)


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(d)


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


# ---------------------------------------------------------------------------
# per-image inference


@dataclass
class Segmentation:
    prior: PriorResult
    decomp: DecompResult
    magnitude: np.ndarray  # (H, W) in [0, 1]
    mask: np.ndarray  # (H, W) bool
    clean: bool


def segment_image(model: Model, raw: RawBank, agg: AggBank, X: np.ndarray, cfg: PipelineConfig, mode: str = "paedid") -> Segmentation:
    """Prior, decomposition and thresholded mask for one image.

    If no patch of ``X`` scores above ``CLEAN_SCORE`` the image is judged
    normal and the mask is left empty, whatever the residual looks like.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "noisy" and cfg.decomposition.lam2 is None:
        raise ConfigError("noisy mode needs decomposition.lam2 in the config")
    prior = deep_image_prior(model, raw, agg, X, cfg.addressing)
    if mode == "paedid":
        res = decompose(X, prior.X_hat, cfg.decomposition)
    elif mode == "noisy":
        res = decompose_noisy(X, prior.X_hat, cfg.decomposition)
    else:
        res = DecompResult(L=prior.X_hat, S=residual_segmentation(X, prior.X_hat))
    magnitude = defect_magnitude(res.S)
    clean = bool(prior.score.s.max() <= CLEAN_SCORE)
    mask = np.zeros(magnitude.shape, dtype=bool) if clean else magnitude > cfg.threshold
    return Segmentation(prior=prior, decomp=res, magnitude=magnitude, mask=mask, clean=clean)
