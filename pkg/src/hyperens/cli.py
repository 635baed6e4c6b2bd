"""Command-line entry point: ``generate``, ``train``, ``predict``, ``evaluate``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .inference import (
    average_probability_maps,
    entropy_map,
    hyper_ensemble_predict,
    predictor,
    read_map,
    sliding_window_predict,
    threshold_map,
    write_label_map,
    write_map,
    write_pgm,
)
from .metrics import aggregate, evaluate, macro_average, write_reports
from .models import HyperResUNet, load_checkpoint
from .serialize import FormatError
from .synthdata import generate_dataset, load_dataset, save_dataset, split_dataset
from .trainer import TrainingDiverged, save_members, train

logger = logging.getLogger("hyperens")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ValidationError(Exception):
    pass


def label_name(tau: float) -> str:
    """File stem for a thresholded map, e.g. ``label_tau025`` for 0.25."""
    return f"label_tau{round(tau * 100):03d}"


def _select(samples, dataset_cfg, split: str):
    if split == "all":
        return samples
    tr, va = split_dataset(samples, dataset_cfg.train_fraction, dataset_cfg.seed)
    if split == "train":
        return tr
    if split == "val":
        return va
    raise ValidationError(f"unknown split {split!r}")


def _load_dataset(path):
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise ValidationError(str(exc)) from exc


def cmd_generate(cfg: dict, out_dir: Path) -> int:
    dcfg = cfgmod.dataset_config(cfg)
    samples = generate_dataset(dcfg)
    save_dataset(samples, dcfg, out_dir)
    cfgmod.echo(cfg, out_dir)
    logger.info("wrote %d samples to %s", len(samples), out_dir)
    return EXIT_OK


def cmd_train(cfg: dict, dataset: Path, out_dir: Path) -> int:
    samples, dcfg = _load_dataset(dataset)
    train_set = _select(samples, dcfg, "train")
    spec, tcfg = cfgmod.model_spec(cfg), cfgmod.train_config(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "train.log", "w") as log_file:
        members = train(train_set, spec, tcfg, log_file=log_file)
    save_members(members, out_dir)
    cfgmod.echo(cfg, out_dir)
    total = sum(m.report.wall_time for m in members)
    logger.info("trained %d member(s) with %s in %.1f s", len(members), tcfg.strategy, total)
    return EXIT_OK


def _load_run(path: Path):
    """Return the list of models for a run directory or a single checkpoint."""
    if (path / "members.json").is_file():
        names = [m["name"] for m in json.loads((path / "members.json").read_text())["members"]]
        return [load_checkpoint(path / n).model for n in names]
    if (path / "manifest").is_file():
        return [load_checkpoint(path).model]
    raise ValidationError(f"no checkpoint or run directory at {path}")


def cmd_predict(cfg: dict, checkpoints: list[Path], dataset: Path, out_dir: Path, split: str, method: str | None) -> int:
    models = []
    for c in checkpoints:
        models.extend(_load_run(c))
    hyper = [m for m in models if isinstance(m, HyperResUNet)]
    if hyper and len(models) > 1:
        raise ValidationError("a hypernetwork must be predicted on its own")
    samples, dcfg = _load_dataset(dataset)
    chosen = _select(samples, dcfg, split)
    patch, overlap = int(cfg["predict.patch_size"]), float(cfg["predict.overlap"])
    taus = [float(t) for t in cfg["predict.taus"]]
    out_dir.mkdir(parents=True, exist_ok=True)
    predictors = [] if hyper else [predictor(m) for m in models]
    ids = []
    for s in chosen:
        sid = s.meta["id"]
        ids.append(sid)
        if hyper:
            p = hyper_ensemble_predict(s.image, hyper[0], cfg["predict.alpha_grid"], min(patch, *s.shape), overlap)
        else:
            p = average_probability_maps(
                [sliding_window_predict(s.image, f, min(patch, *s.shape), overlap) for f in predictors]
            )
        d = out_dir / sid
        d.mkdir(exist_ok=True)
        write_map(d / "prob", p)
        write_pgm(d / "prob.pgm", p)
        write_map(d / "entropy", entropy_map(p))
        for t in taus:
            write_label_map(d / label_name(t), threshold_map(p, t))
    info = {
        "method": method or checkpoints[0].name,
        "kind": "hyper" if hyper else "plain",
        "members": len(models),
        "samples": ids,
        "taus": taus,
    }
    (out_dir / "prediction.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
    cfgmod.echo(cfg, out_dir)
    return EXIT_OK


def cmd_evaluate(cfg: dict, predictions: list[Path], dataset: Path, out_dir: Path) -> int:
    samples, _ = _load_dataset(dataset)
    by_id = {s.meta["id"]: s for s in samples}
    taus = [float(t) for t in cfg["evaluate.taus"]]
    thr = float(cfg["evaluate.threshold"])
    micro, macro = {}, {}
    for pred_dir in predictions:
        info_file = pred_dir / "prediction.json"
        if not info_file.is_file():
            raise ValidationError(f"{pred_dir} has no prediction.json")
        info = json.loads(info_file.read_text())
        orphans = [i for i in info["samples"] if i not in by_id]
        if orphans:
            raise ValidationError(f"{pred_dir}: predictions without dataset samples: {', '.join(orphans)}")
        items = []
        for sid in info["samples"]:
            s = by_id[sid]
            items.append((read_map(pred_dir / sid / "prob.f64"), s.annotation, s.p_true))
        name = info["method"]
        if name in micro:
            raise ValidationError(f"method name {name!r} appears twice")
        micro[name] = aggregate(items, taus, thr)
        macro[name] = macro_average([evaluate(p, t, pt, taus, thr) for p, t, pt in items])
    write_reports(micro, macro, out_dir)
    cfgmod.echo(cfg, out_dir)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hyperens", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides (JSON values)")

    p = sub.add_parser("generate", help="write a synthetic dataset")
    common(p)
    p = sub.add_parser("train", help="train one strategy on the dataset's training split")
    common(p)
    p.add_argument("--dataset", type=Path, required=True)
    p = sub.add_parser("predict", help="probability, entropy and label maps for a split")
    common(p)
    p.add_argument("--checkpoints", type=Path, nargs="+", required=True, help="run directories or checkpoints")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "all"))
    p.add_argument("--method", help="name recorded for evaluation (default: first checkpoint dir name)")
    p = sub.add_parser("evaluate", help="CSV/JSON metric reports for prediction directories")
    common(p)
    p.add_argument("--predictions", type=Path, nargs="+", required=True)
    p.add_argument("--dataset", type=Path, required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = cfgmod.load_config(args.config, args.overrides)
        try:
            args.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ValidationError(f"cannot create output directory {args.out}: {exc}") from exc
        if args.command == "generate":
            return cmd_generate(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.dataset, args.out)
        if args.command == "predict":
            return cmd_predict(cfg, args.checkpoints, args.dataset, args.out, args.split, args.method)
        return cmd_evaluate(cfg, args.predictions, args.dataset, args.out)
    except (cfgmod.ConfigError, ValidationError, FormatError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return EXIT_INVALID
    except (TrainingDiverged, FloatingPointError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
