"""``paedid`` command line: corpus generation, training, banks, inference, metrics, tuning.

Every subcommand prints at most one JSON document on stdout.  Logs go to
stderr at the level named by ``PAEDID_LOG`` (quiet, info or debug).

Exit codes: 0 success, 2 config/usage error, 3 I/O or file-format error,
4 numerical failure, 5 shape mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import multiprocessing
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .errors import ConfigError, PaedidError, ShapeMismatchError
from .evaluation import GridPointError, TuneGrid, UndefinedMetricError, dice, pixel_auroc, tune_parameters
from .memory_bank import build_agg_bank, build_raw_bank, coreset_subsample, load_bank, save_bank
from .nn import load_model, save_model, train_autoencoder
from .pipeline import MODES, PipelineConfig, load_config, segment_image
from .synth import gen_corpus
from .tensor_image import load_image, read_tensor, resize_bilinear, save_image, write_tensor

log = logging.getLogger("paedid")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_SHAPE = 0, 2, 3, 4, 5
LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _emit(report: dict) -> None:
    sys.stdout.write(json.dumps(report, indent=2, sort_keys=True) + "\n")
    sys.stdout.flush()


def _pngs(directory) -> list[str]:
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"no such directory: {directory}")
    return sorted(os.path.join(directory, f) for f in os.listdir(directory) if f.lower().endswith(".png"))


def _stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def _training_images(data_dir) -> list[str]:
    sub = os.path.join(data_dir, "train")
    paths = _pngs(sub if os.path.isdir(sub) else data_dir)
    if not paths:
        raise ConfigError(f"no PNG images found under {data_dir}")
    return paths


def _load_for(paths, dims) -> list[np.ndarray]:
    images = []
    for p in paths:
        img = load_image(p)
        if img.shape != tuple(dims):
            raise ShapeMismatchError(f"{p}: image is {img.shape}, model expects {tuple(dims)}")
        images.append(img)
    return images


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: PipelineConfig, args) -> int:
    n_train = cfg.n_train if args.n_train is None else args.n_train
    n_test = cfg.n_test if args.n_test is None else args.n_test
    m = gen_corpus(cfg.data, n_train, n_test, args.out_dir)
    _emit({"out_dir": args.out_dir, "manifest": m})
    return EXIT_OK


def cmd_train(cfg: PipelineConfig, args) -> int:
    paths = _training_images(args.data_dir)
    images = _load_for(paths, cfg.arch.input_dims)
    tc = cfg.train if args.epochs is None else replace(cfg.train, epochs=args.epochs)
    log.info("training on %d images for %d epochs", len(images), tc.epochs)
    model = train_autoencoder(images, tc, cfg.arch, on_epoch=lambda e, loss: log.info("epoch %d loss %.6g", e, loss))
    save_model(model, args.model_out)
    csv_path = args.model_out + ".loss.csv"
    with open(csv_path, "w") as f:
        f.write("epoch,loss\n")
        for i, loss in enumerate(model.loss_trace, 1):
            f.write(f"{i},{loss!r}\n")
    _emit({
        "model": args.model_out,
        "loss_csv": csv_path,
        "images": len(images),
        "epochs": tc.epochs,
        "final_loss": model.loss_trace[-1] if model.loss_trace else None,
        "latent_dims": list(cfg.arch.latent_dims),
    })
    return EXIT_OK


def cmd_build_bank(cfg: PipelineConfig, args) -> int:
    model = load_model(args.model)
    images = _load_for(_training_images(args.data_dir), model.arch.input_dims)
    raw = build_raw_bank(model, images)
    try:
        agg = build_agg_bank(raw, cfg.l)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    full_rows = raw.rows
    n_c = args.coreset if args.coreset is not None else cfg.coreset.n_c
    if n_c is not None:
        if n_c < 1 or n_c > raw.rows:
            raise ConfigError(f"coreset size {n_c} outside [1, {raw.rows}]")
        agg, raw = coreset_subsample(agg, raw, n_c, cfg.coreset.seed, cfg.coreset.proj_dim)
    save_bank(raw, agg, args.bank_out)
    _emit({
        "bank": args.bank_out,
        "rows": raw.rows,
        "full_rows": full_rows,
        "dims": list(raw.dims),
        "l": agg.l,
        "agg_width": int(agg.matrix.shape[1]),
        "coreset": n_c,
    })
    return EXIT_OK


# decompose workers share read-only state through fork
_STATE: dict = {}


def _heat(score: np.ndarray, shape) -> np.ndarray:
    """Patch scores clipped to [0, 1] and bilinearly upsampled to the image size."""
    return resize_bilinear(np.clip(score, 0.0, 1.0)[:, :, None], *shape)


def _decompose_one(job):
    path, prefix = job
    model, raw, agg, cfg, mode = _STATE["model"], _STATE["raw"], _STATE["agg"], _STATE["cfg"], _STATE["mode"]
    X = load_image(path)
    if X.shape != model.arch.input_dims:
        raise ShapeMismatchError(f"{path}: image is {X.shape}, model expects {model.arch.input_dims}")
    seg = segment_image(model, raw, agg, X, cfg, mode)
    res = seg.decomp
    save_image(seg.prior.X_hat, prefix + "_prior.png")
    save_image(np.clip(res.L, 0.0, 1.0), prefix + "_background.png")
    write_tensor(res.S, prefix + "_S.ptf")
    if res.e is not None:
        write_tensor(res.e, prefix + "_noise.ptf")
    save_image(seg.magnitude, prefix + "_magnitude.png")
    save_image(seg.mask.astype(np.float32), prefix + "_mask.png")
    save_image(_heat(seg.prior.score.s, X.shape[:2]), prefix + "_score.png")
    write_tensor(seg.prior.score.s, prefix + "_score.ptf")
    with open(prefix + "_objective.csv", "w") as f:
        f.write("iter,objective\n")
        for i, v in enumerate(res.objective):
            f.write(f"{i},{v!r}\n")
    return {
        "image": path,
        "prefix": prefix,
        "replaced_patches": int(seg.prior.score.A.sum()),
        "s_alpha": seg.prior.score.s_alpha,
        "final_objective": min(res.objective) if res.objective else None,
        "iterations": res.iterations,
        "mask_pixels": int(seg.mask.sum()),
        "clean": seg.clean,
    }


def cmd_decompose(cfg: PipelineConfig, args) -> int:
    if args.mode == "noisy" and cfg.decomposition.lam2 is None:
        raise ConfigError("--mode noisy needs decomposition.lam2 in the config")
    images = []
    for item in args.images:
        images.extend(_pngs(item) if os.path.isdir(item) else [item])
    images = sorted(images)
    if not images:
        raise ConfigError("no input images")
    prefix = args.out_prefix
    as_dir = prefix.endswith(os.sep) or os.path.isdir(prefix)
    if len(images) > 1 and not as_dir:
        raise ConfigError("several input images need --out-prefix to name a directory")
    if as_dir:
        os.makedirs(prefix, exist_ok=True)
        jobs = [(p, os.path.join(prefix, _stem(p))) for p in images]
    else:
        parent = os.path.dirname(prefix)
        if parent:
            os.makedirs(parent, exist_ok=True)
        jobs = [(images[0], prefix)]
    model = load_model(args.model)
    raw, agg = load_bank(args.bank)
    if raw.dims[1:] != model.arch.latent_dims:
        raise ShapeMismatchError(f"bank latent dims {raw.dims[1:]} do not match model latent dims {model.arch.latent_dims}")
    _STATE.update(model=model, raw=raw, agg=agg, cfg=cfg, mode=args.mode)
    n_jobs = max(1, int(args.jobs or 1))
    if n_jobs > 1 and len(jobs) > 1 and "fork" in multiprocessing.get_all_start_methods():
        with multiprocessing.get_context("fork").Pool(min(n_jobs, len(jobs))) as pool:
            results = pool.map(_decompose_one, jobs)
    else:
        results = [_decompose_one(j) for j in jobs]
    _emit({"mode": args.mode, "images": results})
    return EXIT_OK


def _mask_key(path: str) -> str:
    s = _stem(path)
    return s[: -len("_mask")] if s.endswith("_mask") else s


def _find_scores(key: str, dirs) -> str | None:
    for d in dirs:
        for name in (key + "_magnitude.png", key + ".png", key + "_magnitude.ptf", key + ".ptf"):
            p = os.path.join(d, name)
            if os.path.isfile(p):
                return p
    return None


def cmd_eval(cfg: PipelineConfig, args) -> int:
    preds = {}
    for p in _pngs(args.pred_dir):
        s = _stem(p)
        if s.endswith(("_prior", "_background", "_magnitude", "_score")):
            continue
        preds[_mask_key(p)] = p
    truths = {_stem(p): p for p in _pngs(args.truth_dir)}
    if set(preds) != set(truths):
        missing = sorted(set(truths) - set(preds))
        extra = sorted(set(preds) - set(truths))
        raise ConfigError(f"unpaired masks: no prediction for {missing[:5]}, no truth for {extra[:5]}")
    if not truths:
        raise ConfigError("no masks to evaluate")
    score_dirs = [args.scores] if args.scores else [args.pred_dir]
    per_image = []
    for key in sorted(truths):
        truth = load_image(truths[key]).max(axis=2) > 0.5
        pred = load_image(preds[key]).max(axis=2) > 0.5
        if pred.shape != truth.shape:
            raise ShapeMismatchError(f"{key}: prediction {pred.shape} vs truth {truth.shape}")
        row = {"image": key, "dice": dice(pred, truth), "auroc": None}
        sp = _find_scores(key, score_dirs)
        if sp is not None:
            sc = read_tensor(sp) if sp.endswith(".ptf") else load_image(sp)
            sc = np.abs(np.asarray(sc, dtype=np.float64))
            sc = sc.max(axis=2) if sc.ndim == 3 else sc
            if sc.shape != truth.shape:
                raise ShapeMismatchError(f"{key}: score map {sc.shape} vs truth {truth.shape}")
            try:
                row["auroc"] = pixel_auroc(sc, truth)
            except UndefinedMetricError:
                log.info("%s: AUROC undefined (single-class truth)", key)
        per_image.append(row)
    d = np.array([r["dice"] for r in per_image])
    aurocs = [r["auroc"] for r in per_image if r["auroc"] is not None]
    _emit({
        "dice_mean": float(d.mean()),
        "dice_std": float(d.std()),
        "auroc_mean": float(np.mean(aurocs)) if aurocs else None,
        "per_image": per_image,
    })
    return EXIT_OK


def _read_grid(path, cfg: PipelineConfig) -> TuneGrid:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read grid {path}: {exc}") from exc
    try:
        g = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(g, dict):
        raise ConfigError(f"{path}: grid must be a JSON object")
    defaults = {"l": [cfg.l], "k": [cfg.addressing.k], "lam1": [cfg.decomposition.lam1], "alpha": [cfg.addressing.alpha]}
    unknown = sorted(set(g) - set(defaults))
    if unknown:
        raise ConfigError(f"{path}: unknown grid key(s) {unknown}")
    vals = {}
    for key, default in defaults.items():
        v = g.get(key, default)
        if not isinstance(v, list) or not v:
            raise ConfigError(f"{path}: grid entry {key!r} must be a non-empty list")
        if any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in v):
            raise ConfigError(f"{path}: grid entry {key!r} must hold numbers")
        vals[key] = tuple(int(x) for x in v) if key in ("l", "k") else tuple(float(x) for x in v)
    try:
        return TuneGrid(**vals)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_tune(cfg: PipelineConfig, args) -> int:
    grid = _read_grid(args.grid, cfg)
    model = load_model(args.model)
    banks = {}
    for path in args.bank:
        raw, agg = load_bank(path)
        if raw.dims[1:] != model.arch.latent_dims:
            raise ShapeMismatchError(f"{path}: bank latent dims {raw.dims[1:]} do not match the model")
        banks[agg.l] = (raw, agg)
    test_dir = os.path.join(args.annotated_dir, "test")
    s_dir = os.path.join(args.annotated_dir, "truth_s")
    paths = _pngs(test_dir)
    if not paths:
        raise ConfigError(f"no annotated images under {test_dir}")
    images, s_true = [], []
    for p in paths:
        sp = os.path.join(s_dir, _stem(p) + ".ptf")
        if not os.path.isfile(sp):
            raise ConfigError(f"{p}: no defect annotation {sp}")
        images.append(_load_for([p], model.arch.input_dims)[0])
        s = read_tensor(sp)
        if s.shape != images[-1].shape:
            raise ShapeMismatchError(f"{sp}: annotation {s.shape} vs image {images[-1].shape}")
        s_true.append(s)
    missing = [l for l in grid.l if l not in banks]
    if missing:
        raise ConfigError(f"no --bank given for aggregation length(s) {missing}")
    result = tune_parameters(images, s_true, grid, model, banks, cfg.addressing.aligned, cfg.decomposition)
    _emit({"best": result.best, "table": result.table})
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and error mapping


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS, help="pipeline config JSON")
    common.add_argument("--seed", type=int, metavar="N", default=argparse.SUPPRESS, help="override every seed in the config")
    common.add_argument("--jobs", type=int, metavar="N", default=argparse.SUPPRESS, help="parallel image jobs (decompose)")

    parser = argparse.ArgumentParser(prog="paedid", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[common], help="write a seeded synthetic corpus")
    p.add_argument("out_dir")
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train the patch autoencoder")
    p.add_argument("data_dir")
    p.add_argument("model_out")
    p.add_argument("--epochs", type=int, default=None, help="override train.epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-bank", parents=[common], help="encode training images into memory banks")
    p.add_argument("model")
    p.add_argument("data_dir")
    p.add_argument("bank_out")
    p.add_argument("--coreset", type=int, default=None, metavar="N", help="reduce the bank to N rows")
    p.set_defaults(func=cmd_build_bank)

    p = sub.add_parser("decompose", parents=[common], help="segment defects in one or more images")
    p.add_argument("model")
    p.add_argument("bank")
    p.add_argument("images", nargs="+", help="PNG files or directories of PNGs")
    p.add_argument("--out-prefix", required=True, help="output path prefix, or a directory for several images")
    p.add_argument("--mode", choices=MODES, default="paedid")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("eval", parents=[common], help="dice and AUROC of predicted masks")
    p.add_argument("pred_dir")
    p.add_argument("truth_dir")
    p.add_argument("--scores", default=None, help="directory of score maps (default: look beside the masks)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tune", parents=[common], help="grid search of l, k, lam1 and alpha")
    p.add_argument("annotated_dir")
    p.add_argument("grid")
    p.add_argument("model")
    p.add_argument("--bank", action="append", required=True, help="bank file; repeat once per aggregation length")
    p.set_defaults(func=cmd_tune)
    return parser


def _setup_logging() -> None:
    level_name = os.environ.get("PAEDID_LOG", "quiet").lower()
    if level_name not in LOG_LEVELS:
        raise ConfigError(f"PAEDID_LOG must be one of {sorted(LOG_LEVELS)}, got {level_name!r}")
    logging.basicConfig(level=LOG_LEVELS[level_name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, GridPointError):
        return exit_code_for(exc.cause)
    if isinstance(exc, PaedidError):
        return exc.exit_code
    if isinstance(exc, (OSError, EOFError)):
        return EXIT_IO
    if isinstance(exc, (ArithmeticError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ValueError, TypeError, KeyError)):
        return EXIT_CONFIG
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _setup_logging()
        cfg = load_config(getattr(args, "config", None))
        if getattr(args, "seed", None) is not None:
            cfg = cfg.with_seed(args.seed)
        args.jobs = getattr(args, "jobs", 1)
        return args.func(cfg, args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an exit code
        code = exit_code_for(exc)
        if code == 1:
            log.exception("unexpected failure")
        print(f"paedid {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
