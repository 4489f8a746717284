"""Command-line entry point: ``mpox-cbam {train,eval,crossval,gradcheck,synth}``.

Exit codes: 0 ok, 1 gradient check failed, 2 config error, 3 data error,
4 numerical error, 5 degenerate cross-validation fold.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ConfigError, RunConfig, load_config
from .data import augment, load_directory, resize_dataset, split, synth_generate, write_directory
from .errors import DegenerateFold, EmptyClass, FormatError, InvalidConfig, NumericalError, UnsupportedFormat
from .estimator import CBAMClassifier
from .evaluation import CVReport, FoldResult, confusion, cross_validate, metrics, render_report
from .model import build_model, default_freeze
from .training import bce_loss, evaluate, fit, load_checkpoint, model_from_checkpoint, restore, save_checkpoint

logger = logging.getLogger("mpox_cbam")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_FOLD = 0, 1, 2, 3, 4, 5
GRADCHECK_SIZE = (16, 16)
GRADCHECK_TOL = 1e-4


class DataError(Exception):
    pass


def _fail(code: int, stage: str, exc) -> int:
    print(f"error [{stage}]: {exc}", file=sys.stderr)
    return code


def _load_data(cfg: RunConfig, data_dir, seed: int):
    if data_dir is None:
        ds = synth_generate(cfg.synth.n, tuple(cfg.synth.size), seed)
    else:
        try:
            ds = load_directory(data_dir)
        except (OSError, EmptyClass, UnsupportedFormat, FormatError) as exc:
            raise DataError(exc) from exc
    return resize_dataset(ds, tuple(cfg.input_size))


def _freeze(cfg: RunConfig, i: int):
    mode = cfg.models[i].freeze
    backbone = cfg.backbone(i)
    return {"default": default_freeze(backbone), "none": frozenset(), "all": None}[mode]


def _estimator(cfg: RunConfig, i: int, seed: int) -> CBAMClassifier:
    m, t = cfg.models[i], cfg.train
    return CBAMClassifier(
        blocks=tuple(tuple(b) for b in m.blocks), reduction_ratio=m.reduction_ratio, freeze=m.freeze,
        learning_rate=t.learning_rate, batch_size=t.batch_size, epochs=t.epochs, beta1=t.beta1,
        beta2=t.beta2, epsilon=t.epsilon, threshold=cfg.threshold, random_state=seed,
    )


def _single_report(label, probs, y, threshold, fold="test") -> CVReport:
    cm = confusion(probs, y, threshold)
    rep = metrics(cm)
    return CVReport(label, (FoldResult(fold, cm, rep),), rep)


def _write_single(out: Path, report: CVReport):
    table, csv_text = render_report([report])
    csv_lines = csv_text.splitlines()
    # a single evaluation has no average row
    (out / "report.csv").write_text("\n".join(csv_lines[:-1]) + "\n", encoding="utf-8")
    cm = report.folds[0].confusion
    (out / "report.txt").write_text(table + "\n" + cm.grid(), encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out)
    ds = _load_data(cfg, args.data, seed)
    train_ds, test_ds, val_ds = split(ds, cfg.split_spec(seed))
    aug = cfg.augmentation()
    train_ds, val_ds = augment(train_ds, aug), augment(val_ds, aug)
    i = 0
    frozen = _freeze(cfg, i)
    model = build_model(cfg.backbone(i), cfg.models[i].reduction_ratio, seed=seed, freeze=frozen or ())
    if frozen is None:
        model.freeze_all()
    history, best = fit(model, train_ds, val_ds, cfg.train_config(seed))
    restore(model, best)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(best, out / "checkpoint.bin")
    (out / "history.csv").write_text(history.to_csv(), encoding="utf-8")
    X, y = test_ds.to_arrays()
    _write_single(out, _single_report(cfg.models[i].label, model.predict_proba(X), y, cfg.threshold))
    print(f"best epoch {best.epoch}, val_loss {best.val_loss:.6f}; wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.bin"
    try:
        rec = load_checkpoint(ckpt)
    except (OSError, FormatError) as exc:
        raise DataError(exc) from exc
    model = model_from_checkpoint(rec)
    h, w = model.config.input_shape[1:]
    ds = _load_data(cfg.model_copy(update={"input_size": (h, w)}), args.data, seed)
    X, y = ds.to_arrays()
    loss, _ = evaluate(model, X, y)
    out.mkdir(parents=True, exist_ok=True)
    report = _single_report(cfg.models[0].label, model.predict_proba(X), y, cfg.threshold, fold="eval")
    _write_single(out, report)
    print(f"loss {loss:.6f}, accuracy {report.average.accuracy:.2f}%")
    return EXIT_OK


def cmd_crossval(args) -> int:
    cfg = load_config(args.config)
    if args.folds < 2:
        raise ConfigError(f"folds: k must be >= 2, got {args.folds}")
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out)
    ds = _load_data(cfg, args.data, seed)
    X, y = ds.to_arrays()
    reports = []
    for i, m in enumerate(cfg.models):
        cfg.backbone(i)
        est = _estimator(cfg, i, seed)
        reports.append(cross_validate(est, X, y, k=args.folds, seed=seed, label=m.label,
                                      threshold=cfg.threshold, n_jobs=args.threads))
    out.mkdir(parents=True, exist_ok=True)
    for f in range(args.folds):
        parts = [f"[{r.label}] fold {f}\n{r.folds[f].confusion.grid()}" for r in reports]
        (out / f"confusion_fold{f}.txt").write_text("\n".join(parts), encoding="utf-8")
    table, csv_text = render_report(reports)
    (out / "report.txt").write_text(table, encoding="utf-8")
    (out / "report.csv").write_text(csv_text, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def gradcheck_model(cfg: RunConfig, seed: int, i: int = 0):
    """Model, loss function and parameter list for a 1 x 3 x 16 x 16 gradient check."""
    backbone = cfg.backbone(i, GRADCHECK_SIZE)
    model = build_model(backbone, cfg.models[i].reduction_ratio, seed=seed, freeze=())
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.uniform(size=(1,) + backbone.input_shape))
    y = np.ones(1)
    names = list(model.params)

    def loss_fn(ps):
        return bce_loss(model.forward(x, dict(zip(names, ps))), y)

    return model, loss_fn, [model.params[n] for n in names]


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    _, loss_fn, params = gradcheck_model(cfg, seed)
    err = T.gradient_check(loss_fn, params, eps=1e-6)
    print(f"max relative error: {err:.6e} over {sum(p.size for p in params)} parameters")
    return EXIT_OK if err < GRADCHECK_TOL else EXIT_CHECK


def cmd_synth(args) -> int:
    if args.n < 2 or args.n % 2:
        raise ConfigError(f"n: must be a positive even number, got {args.n}")
    ds = synth_generate(args.n, (args.size, args.size), args.seed if args.seed is not None else 0)
    try:
        paths = write_directory(ds, args.out)
    except OSError as exc:
        raise DataError(exc) from exc
    print(f"wrote {len(paths)} images to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpox-cbam", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
        if data:
            p.add_argument("--data", help="dataset root with Monkeypox/ and Others/; synthetic data when omitted")
            p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, default=1, help="parallel folds (default: 1)")

    p = sub.add_parser("train", help="train one model and write checkpoint, history and test report")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint file (default: OUT/checkpoint.bin)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", help="k-fold cross-validation of every configured model")
    common(p)
    p.add_argument("--folds", "-k", type=int, default=4, help="number of folds (default: 4)")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the model gradients")
    common(p, data=False)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic dataset as PPM files")
    p.add_argument("--n", type=int, default=200, help="number of images, even (default: 200)")
    p.add_argument("--size", type=int, default=32, help="image height and width (default: 32)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=1, help="unused; accepted for uniformity")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    stage = args.command
    try:
        return args.func(args)
    except (ConfigError, InvalidConfig) as exc:
        return _fail(EXIT_CONFIG, stage, exc)
    except DataError as exc:
        return _fail(EXIT_DATA, stage, exc)
    except DegenerateFold as exc:
        return _fail(EXIT_FOLD, stage, exc)
    except NumericalError as exc:
        return _fail(EXIT_NUMERIC, stage, exc)


if __name__ == "__main__":
    sys.exit(main())
