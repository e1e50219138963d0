import argparse
import json
import platform
import sys
import traceback
from pathlib import Path
from typing import List, Optional

import numpy as np
import scipy
import sklearn
import pydantic

import gradcore as gc
from config import Config, dump_train_config, load_train_config
from data import gen_synthetic, load_dataset, save_dataset
from evaluator import evaluate_classifier, inspect_deformations, run_ablation, run_sweeps, write_rows_csv
from logger import logger
from models import ArchSpec, ClassifierSpec, GenSpec, MetricsReport, SweepRow, TrainConfig
from monitoring import get_performance_metrics
from networks import BoostedClassifier, CorldNet, load_classifier, load_corld, shape_feature_dim
from selftest import run_all
from storage import write_run_manifest, write_text
from training import train_classifier, train_corld, write_report_csv
from validators import UsageError, ValidationError

__version__ = "1.0.0"

class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting on usage errors"""

    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _yes_no(value: str) -> bool:
    if value not in ("yes", "no"):
        raise argparse.ArgumentTypeError(f"expected yes or no, got {value!r}")
    return value == "yes"


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out", help="output directory")
    common.add_argument("--config", help="TrainConfig key=value file")
    common.add_argument("--seed", type=int, help="u64 seed")
    common.add_argument("--float-mode", choices=["f32", "f64"])

    with_data = _Parser(add_help=False)
    with_data.add_argument("--data", required=True, help="dataset directory")

    parser = _Parser(prog="corld", description="Template-free contrastive deformable-shape representation learning")
    parser.add_argument("--version", action="version", version=f"corld {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    gen.add_argument("--classes", type=int, default=4)
    gen.add_argument("--per-class", type=int, default=50)
    gen.add_argument("--size", type=int, default=32)
    gen.add_argument("--amplitude", type=float, default=2.0)
    gen.add_argument("--noise-std", type=float, default=0.02)
    gen.add_argument("--steps", type=int, default=6)

    train = sub.add_parser("train", parents=[common, with_data], help="phase 1: train the CoRLD network")
    train.add_argument("--template-input", type=_yes_no)
    train.add_argument("--contrastive", type=_yes_no)
    train.add_argument("--template-mode", choices=["single", "multi"])
    train.add_argument("--epochs", type=int)

    clf = sub.add_parser("train-clf", parents=[common, with_data], help="phase 2: train the boosted classifier")
    clf.add_argument("--corld", help="CoRLD checkpoint (required unless --arm image_only)")
    clf.add_argument("--arm", choices=["fused", "image_only", "shape_only"], default="fused")
    clf.add_argument("--epochs", type=int)

    ev = sub.add_parser("eval", parents=[common, with_data], help="test-split metrics of a classifier")
    ev.add_argument("--clf", required=True, help="classifier checkpoint")
    ev.add_argument("--corld", help="CoRLD checkpoint feeding shape features")
    ev.add_argument("--split", choices=["train", "val", "test"], default="test")

    sub.add_parser("ablate", parents=[common, with_data], help="template x contrastive ablation grid")
    sub.add_parser("sweep-tau", parents=[common, with_data], help="temperature sweep")
    rob = sub.add_parser("robustness", parents=[common, with_data], help="universal-noise robustness sweep")
    rob.add_argument("--noise-kind", choices=["fgsm_universal", "fixed_random"], default="fgsm_universal")
    sub.add_parser("sweep-template", parents=[common, with_data], help="single vs multi template")
    sub.add_parser("selftest", parents=[common], help="gradient, deformation and contrastive property suites")

    ins = sub.add_parser("inspect", parents=[common, with_data], help="deformation quality per checkpoint")
    ins.add_argument("--corld", action="append", required=True, help="CoRLD checkpoint (repeatable)")
    ins.add_argument("--samples", type=int, default=8)
    return parser


def _train_config(args) -> TrainConfig:
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    for flag, key in (("template_input", "template_in_input"), ("contrastive", "contrastive_on"),
                      ("template_mode", "template_mode")):
        value = getattr(args, flag, None)
        if value is not None:
            updates[key] = value
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        updates["epochs_clf" if args.command == "train-clf" else "epochs_corld"] = epochs
    updates["out_dir"] = str(_out_dir(args))
    return TrainConfig.model_validate({**cfg.model_dump(), **updates})


def _out_dir(args) -> Path:
    return Path(args.out) if args.out else Path(Config.OUT_ROOT) / args.command


def _versions() -> dict:
    return {
        "corld": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "pydantic": pydantic.VERSION,
    }


def _write_metrics(path: Path, arm: str, split: str, metrics: MetricsReport) -> None:
    write_rows_csv(path, [SweepRow(kind="eval", arm=arm, param=split, metrics=metrics)], "eval")
    write_text(path.parent / "confusion.json", json.dumps(metrics.confusion) + "\n")


def _cmd_gen_data(args, out: Path) -> dict:
    spec = GenSpec(
        classes=args.classes, per_class=args.per_class, size=args.size,
        seed=args.seed if args.seed is not None else 7,
        deform_amplitude=args.amplitude, noise_std=args.noise_std, steps=args.steps,
    )
    save_dataset(gen_synthetic(spec), out)
    return spec.model_dump()


def _cmd_train(args, out: Path) -> dict:
    cfg = _train_config(args)
    data = load_dataset(args.data)
    net = CorldNet(ArchSpec(in_channels=2 if cfg.template_in_input else 1), seed=cfg.seed)
    report = train_corld(net, data, cfg)
    write_report_csv(report, out / "train_corld.csv")
    dump_train_config(cfg, out / "train.cfg")
    return cfg.model_dump()


def _cmd_train_clf(args, out: Path) -> dict:
    cfg = _train_config(args)
    data = load_dataset(args.data)
    net = None
    if args.arm != "image_only":
        if not args.corld:
            raise UsageError(f"--corld is required for the {args.arm} arm")
        net = load_corld(args.corld)
    spec = ClassifierSpec(
        num_classes=data.num_classes,
        use_image=args.arm != "shape_only",
        use_shape=args.arm != "image_only",
        fuse_source=cfg.fuse_source,
        shape_dim=shape_feature_dim(net.arch, data.size, cfg.fuse_source) if net is not None else 0,
    )
    clf = BoostedClassifier(spec, seed=cfg.seed)
    report = train_classifier(clf, net, data, cfg)
    write_report_csv(report, out / f"train_clf_{clf.arm}.csv")
    dump_train_config(cfg, out / "train.cfg")
    return cfg.model_dump()


def _cmd_eval(args, out: Path) -> dict:
    data = load_dataset(args.data)
    clf = load_classifier(args.clf)
    net = load_corld(args.corld) if args.corld else None
    if clf.spec.use_shape and net is None:
        raise UsageError("--corld is required for classifiers that use shape features")
    metrics = evaluate_classifier(clf, net, data, args.split)
    logger.info(f"[eval] {clf.arm} on {args.split}: accuracy={metrics.accuracy:.4f} auc={metrics.auc:.4f}")
    _write_metrics(out / "metrics.csv", clf.arm, args.split, metrics)
    return {"clf": args.clf, "corld": args.corld, "split": args.split}


def _cmd_ablate(args, out: Path) -> dict:
    cfg = _train_config(args)
    run_ablation(load_dataset(args.data), cfg, out)
    return cfg.model_dump()


def _cmd_sweep(kind: str):
    def command(args, out: Path) -> dict:
        cfg = _train_config(args)
        run_sweeps(kind, load_dataset(args.data), cfg, out,
                   noise_kind=getattr(args, "noise_kind", "fgsm_universal"))
        return cfg.model_dump()
    return command


def _cmd_selftest(args, out: Path) -> dict:
    results = run_all(seed=args.seed or 0)
    failed = [f"{r.suite}/{r.name}" for r in results if not r.passed]
    if failed:
        raise ValidationError(f"{len(failed)} self-test checks failed: {', '.join(failed)}")
    return {"checks": len(results)}


def _cmd_inspect(args, out: Path) -> dict:
    data = load_dataset(args.data)
    nets = {Path(path).stem: load_corld(path) for path in args.corld}
    inspect_deformations(nets, data, out, max_samples=args.samples)
    return {"corld": args.corld, "samples": args.samples}


HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "train-clf": _cmd_train_clf,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "sweep-tau": _cmd_sweep("tau"),
    "robustness": _cmd_sweep("robustness"),
    "sweep-template": _cmd_sweep("template_mode"),
    "selftest": _cmd_selftest,
    "inspect": _cmd_inspect,
}


def _failing_module(error: BaseException) -> str:
    frames = traceback.extract_tb(error.__traceback__)
    return Path(frames[-1].filename).stem if frames else "main"


def run_cli(argv: Optional[List[str]] = None) -> int:
    """Exit codes: 0 success, 1 usage error, 2 runtime error"""
    argv = list(sys.argv[1:] if argv is None else argv)
    Config.validate_config()
    try:
        args = build_parser().parse_args(argv)
        gc.set_float_mode(args.float_mode or (Config.FLOAT_MODE if Config.FLOAT_MODE in ("f32", "f64") else "f32"))
        out = _out_dir(args)
        logger.info(f"Running {args.command} (float mode {gc.get_float_mode()}) -> {out}")
        config = HANDLERS[args.command](args, out)
        write_run_manifest(out, ["corld"] + argv, config, int(config.get("seed", args.seed or 0)), _versions())
        logger.info(f"Performance: {get_performance_metrics()}")
        return 0
    except SystemExit as e:
        return int(e.code or 0)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error in {_failing_module(e)}: {e}", file=sys.stderr)
        logger.debug(traceback.format_exc())
        return 2


if __name__ == "__main__":
    sys.exit(run_cli())
