from __future__ import annotations

from pathlib import Path
from typing import Sequence
import argparse
import dataclasses
import logging
import sys

import numpy as np

from . import export, spm
from .data import Dataset, gen_dataset
from .gcp import GcpConfig, SubsetMode
from .model import ToyModel
from .training import TrainConfig, train, truncation_sweep
from .attribution import (
    EigMode, EigSelection, PerturbMode, ReluRule, default_split, eigen_saliency, perturb,
    DEFAULT_PERTURB_LR, DEFAULT_PERTURB_STEPS,
)
from .diagnostics import spectrum_histogram, spectrum_spread, write_kappa_csv
from .gradcheck import TARGETS, gradcheck
from .exceptions import SebPoolException, ValidationError

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

EXIT_OK = 0
EXIT_TOLERANCE = 1
EXIT_ERROR = 2


def configure_logger(level, formatter: logging.Formatter, handler: logging.Handler | None = None):
    handler = logging.StreamHandler() if handler is None else handler
    handler.setFormatter(formatter)

    package_logger = logging.getLogger("sebpool")
    package_logger.setLevel(level)
    package_logger.addHandler(handler)


def _on_off(value: str) -> bool:
    match value.lower():
        case "on":
            return True
        case "off":
            return False
        case _:
            raise argparse.ArgumentTypeError(f"expected on or off, found '{value}'")


def _int_list(value: str) -> list[int]:
    try:
        return [int(k) for k in value.split(",") if k.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{value}' is not a comma separated list of integers") from None


def _load_config(args: argparse.Namespace) -> GcpConfig:
    cfg = GcpConfig() if args.config is None else GcpConfig.from_json(Path(args.config).read_text())
    seb = getattr(args, "seb", None)
    return cfg if seb is None else dataclasses.replace(cfg, use_seb=seb)


def _dataset(args: argparse.Namespace) -> Dataset:
    return gen_dataset(seed=args.seed)


def _model(args: argparse.Namespace, dataset: Dataset, cfg: GcpConfig) -> ToyModel:
    """The saved model in --model, or a freshly trained one"""
    if args.model is not None:
        return ToyModel.load(args.model)

    logger.info("No model given, training one for %d epochs", args.epochs)
    return train(dataset, cfg, TrainConfig(epochs=args.epochs, seed=args.seed)).model


def _sample(dataset: Dataset, index: int) -> tuple[np.ndarray, int]:
    if not 0 <= index < len(dataset):
        raise ValidationError(f"Sample {index} does not exist, the dataset has {len(dataset)}")
    return dataset.samples[index]


def cmd_gradcheck(args: argparse.Namespace) -> int:
    report = gradcheck(args.op, args.trials, args.seed, args.out)
    print(
        f"{args.op}: {sum(r.passed for r in report.results)}/{len(report.results)} passed, "
        f"max relative error {report.max_rel_err:.3e} (tolerance {report.tolerance:.0e})"
    )
    return EXIT_OK if report.passed else EXIT_TOLERANCE


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    dataset = _dataset(args)
    val = None
    if args.val_fraction > 0:
        dataset, val = dataset.split(args.val_fraction)

    report = train(dataset, cfg, TrainConfig(epochs=args.epochs, seed=args.seed), val)
    if args.out is not None:
        report.to_csv(args.out)
    if args.kappa_out is not None:
        write_kappa_csv(args.kappa_out, report.kappa_series, report.rank_deficient_series)
    if args.save_model is not None:
        report.model.save(args.save_model)

    if report.train_acc:
        print(f"final train accuracy {report.train_acc[-1]:.3f}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    dataset = _dataset(args)
    model = _model(args, dataset, cfg)

    ks = args.ks if args.ks else list(range(model.d, 0, -1))
    results = truncation_sweep(model, dataset, ks, cfg, SubsetMode(args.subset_mode))
    if args.out is not None:
        export.write_csv(args.out, ["k", "accuracy"], results.items())
    for k, accuracy in results.items():
        print(f"k={k} accuracy={accuracy:.3f}")
    return EXIT_OK


def cmd_attribute(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    dataset = _dataset(args)
    model = _model(args, dataset, cfg)
    x, _ = _sample(dataset, args.sample)

    t = default_split(model.d) if args.t is None else args.t
    sel = EigSelection(EigMode(args.mode), t)
    saliency = eigen_saliency(model, x, sel, ReluRule(args.rule), cfg)

    saliency.to_pgm(args.out)
    if args.raw is not None:
        saliency.to_spm(args.raw)
    return EXIT_OK


def cmd_perturb(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    dataset = _dataset(args)
    model = _model(args, dataset, cfg)
    x, _ = _sample(dataset, args.sample)

    t = default_split(model.d) if args.t is None else args.t
    trace = perturb(model, x, t, PerturbMode(args.mode), args.steps, args.lr)

    if args.out is not None:
        trace.to_csv(args.out)
    if args.image is not None:
        spm.save(args.image, trace.image)
    print(f"loss {trace.loss_history[0]:.6e} -> {trace.loss_history[-1]:.6e}")
    return EXIT_OK


def cmd_spectrum(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    dataset = _dataset(args)
    report = train(dataset, cfg, TrainConfig(epochs=args.epochs, seed=args.seed))

    spectra = report.spectra_snapshots[max(report.spectra_snapshots)] if report.spectra_snapshots else []
    if len(spectra) == 0:
        raise ValidationError("Training produced no spectrum snapshot, use at least one epoch")

    spectrum_histogram(list(spectra), args.bins).to_csv(args.out)
    print(f"eigenvalues spread over {spectrum_spread(list(spectra)):.1f} octaves")
    if args.kappa_out is not None:
        write_kappa_csv(args.kappa_out, report.kappa_series, report.rank_deficient_series)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sebpool",
        description="Global covariance pooling with the scaling eigen branch: gradient "
                    "checks, toy training runs and eigenvalue attribution"
    )
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--config", default=None, help="GcpConfig as a JSON file")
    subparsers = parser.add_subparsers(dest="command", required=True)

    p = subparsers.add_parser("gradcheck", help="finite-difference check of an analytic gradient")
    p.add_argument("--op", required=True, choices=sorted(TARGETS))
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--out", default=None, help="CSV report")
    p.set_defaults(func=cmd_gradcheck)

    p = subparsers.add_parser("train", help="train the toy model on the synthetic dataset")
    p.add_argument("--seb", type=_on_off, default=None, metavar="on|off")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--val-fraction", type=float, default=0.0)
    p.add_argument("--out", default=None, help="CSV with the per-epoch metrics")
    p.add_argument("--kappa-out", default=None)
    p.add_argument("--save-model", default=None, metavar="DIR")
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (
        ("sweep", cmd_sweep, "accuracy when only some eigenvalues are used at inference"),
        ("attribute", cmd_attribute, "eigen-selective saliency map of a sample"),
        ("perturb", cmd_perturb, "perturb a sample towards a spectral subspace"),
    ):
        p = subparsers.add_parser(name, help=help_text)
        p.add_argument("--model", default=None, metavar="DIR",
                       help="saved model, a new one is trained if missing")
        p.add_argument("--epochs", type=int, default=TrainConfig.epochs,
                       help="epochs when a model has to be trained")
        p.set_defaults(func=func)

        match name:
            case "sweep":
                p.add_argument("--ks", type=_int_list, default=None)
                p.add_argument("--subset-mode", default=SubsetMode.TOP.value,
                               choices=[mode.value for mode in SubsetMode])
                p.add_argument("--out", default=None)
            case "attribute":
                p.add_argument("--sample", type=int, default=0)
                p.add_argument("--mode", default=EigMode.ALL.value, choices=[m.value for m in EigMode])
                p.add_argument("--rule", default=ReluRule.DECONV.value, choices=[r.value for r in ReluRule])
                p.add_argument("--t", type=int, default=None, help="number of large eigenvalues")
                p.add_argument("--out", required=True, help="PGM image")
                p.add_argument("--raw", default=None, help="SPM1 file with the raw values")
            case "perturb":
                p.add_argument("--sample", type=int, default=0)
                p.add_argument("--mode", default=PerturbMode.L1.value, choices=[m.value for m in PerturbMode])
                p.add_argument("--steps", type=int, default=DEFAULT_PERTURB_STEPS)
                p.add_argument("--lr", type=float, default=DEFAULT_PERTURB_LR)
                p.add_argument("--t", type=int, default=None, help="number of large eigenvalues")
                p.add_argument("--out", default=None, help="CSV with the loss history")
                p.add_argument("--image", default=None, help="SPM1 file with the perturbed input")

    p = subparsers.add_parser("spectrum", help="histogram of the pooled spectra after training")
    p.add_argument("--seb", type=_on_off, default=None, metavar="on|off")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out", required=True)
    p.add_argument("--kappa-out", default=None)
    p.set_defaults(func=cmd_spectrum)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logger(args.log_level, logging.Formatter(LOG_FORMAT))

    try:
        return args.func(args)
    except SebPoolException as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
