"""Command-line interface: gen-data, train, infer, eval, ablate, plot."""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from .baselines import kmeans_segment, spectral_segment
from .checkpoint import CheckpointError
from .config import (
    ALIGNERS,
    LOSS_ABLATIONS,
    MIN_AREA,
    SHAPE_KINDS,
    VARIANTS,
    DatasetConfig,
    NetConfig,
    TrainConfig,
    load_train_config,
    save_config,
)
from .dataset import DatasetError, read_manifest, read_scene
from .inference import (
    MASK_FILTERS,
    default_tau,
    evaluate_dataset,
    load_model,
    mask_name,
    read_mask,
    segment_dataset,
    write_mask,
)
from .metrics import EvalReport, masks_from_labels, miou
from .reporting import export_pdf, plot_grid
from .scenegen import build_dataset, resize_depth, resize_labels
from .training import TrainingDivergedError, fit

logger = logging.getLogger(__name__)

BASELINES = {"kmeans": kmeans_segment, "spectral": spectral_segment}
PRESET_ROWS = (("a-ot", "a", "ot"), ("ai-ot", "ai", "ot"), ("aip-ot", "aip", "ot"),
               ("aip-greedy", "aip", "greedy"))


def setup_logging(verbose: bool = False) -> None:
    """Configure application logging."""
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )


def _csv(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def _int_list(text: str) -> List[int]:
    """``1,3,5`` or ``1-7``."""
    values: List[int] = []
    for item in _csv(text):
        if "-" in item:
            lo, hi = item.split("-", 1)
            values.extend(range(int(lo), int(hi) + 1))
        else:
            values.append(int(item))
    return values


def _float_list(text: str) -> List[float]:
    return [float(item) for item in _csv(text)]


def _dims(text: str) -> tuple:
    dims = _float_list(text)
    if len(dims) != 3:
        raise argparse.ArgumentTypeError(f"--dims needs three values, got {text!r}")
    return tuple(dims)


# --- gen-data ---------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace) -> int:
    config = DatasetConfig(
        shape=args.shape,
        dims=args.dims,
        n_instances=args.n,
        count=args.count,
        bin_scale=args.bin_scale,
        native_size=args.size,
        base_seed=args.seed,
        val_count=args.val,
        test_count=args.test,
        hard_test=args.hard_test,
        noise_sigma=args.noise,
        overlap=not args.no_overlap,
        workers=args.workers,
    )
    manifest = build_dataset(config, args.out, progress=not args.quiet)
    print(f"\nDataset written to {args.out}: {manifest.count} scenes of {manifest.class_name} "
          f"(n={manifest.n_instances})")
    for name in ("train", "val", "test"):
        print(f"  {name}: {len(manifest.splits[name])}")
    return 0


# --- train ------------------------------------------------------------------

def _train_config(args: argparse.Namespace) -> TrainConfig:
    config = load_train_config(args.config) if args.config else TrainConfig()
    overrides = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "n_instances": args.instances,
        "seed": args.seed,
        "device": args.device,
        "aligner": args.aligner,
        "variant": args.variant,
        "train_subset": args.subset,
        "noise_sigma": args.noise,
        "checkpoint_every": args.checkpoint_every,
        "validate_every": args.validate_every,
    }
    config = replace(config, **{k: v for k, v in overrides.items() if v is not None})
    if args.losses:
        config.use_inter, config.use_pose = LOSS_ABLATIONS[args.losses]
    if args.reduced:
        config.nets = NetConfig.reduced()
    if args.auto_reset:
        config.auto_reset = True
    return config.validate()


def cmd_train(args: argparse.Namespace) -> int:
    config = _train_config(args)
    last = None
    for path in fit(args.data, config, args.out, resume=args.resume, progress=not args.quiet):
        print(f"checkpoint: {path}")
        last = path
    if last is None:
        logger.warning("No checkpoint written; nothing left to train")
    return 0


# --- infer ------------------------------------------------------------------

def cmd_infer(args: argparse.Namespace) -> int:
    model = load_model(args.checkpoint, args.device)
    manifest = read_manifest(args.data)
    tau = default_tau(manifest) if args.tau is None else args.tau
    out = Path(args.out)
    count = 0
    for index, _, mask, _ in segment_dataset(args.data, args.split, model, tau, args.min_area,
                                             args.filter, progress=not args.quiet):
        write_mask(out / mask_name(index), mask, tau, model.n_instances, model.checkpoint_id)
        count += 1
    print(f"\nWrote {count} masks to {out} (tau={tau:.4f}, checkpoint {model.checkpoint_id})")
    return 0


# --- eval -------------------------------------------------------------------

def _gt_labels(labels: np.ndarray, shape: tuple) -> np.ndarray:
    return labels if labels.shape == shape else resize_labels(labels, shape[0])


def _report_from_masks(args: argparse.Namespace) -> EvalReport:
    manifest = read_manifest(args.gt)
    ids, scores = [], []
    checkpoint_id = None
    for index in tqdm(manifest.split(args.split), disable=args.quiet, desc="eval"):
        path = Path(args.pred) / mask_name(index)
        if not path.exists():
            raise DatasetError(f"missing predicted mask {path}")
        pred, meta = read_mask(path)
        checkpoint_id = meta.get("checkpoint_id", checkpoint_id)
        scene = read_scene(args.gt, index, manifest)
        gt = masks_from_labels(_gt_labels(scene.labels, pred.shape), manifest.n_instances)
        if not any(m.any() for m in gt):
            continue
        ids.append(index)
        scores.append(miou(pred, gt, bijective=args.bijective))
    return EvalReport(ids, scores, manifest.class_name, "masks",
                      {"split": args.split, "pred": str(args.pred), "bijective": args.bijective},
                      checkpoint_id)


def baseline_report(
    directory: Path, split: str, method: str, seed: int = 0, bijective: bool = False,
    progress: bool = False,
) -> EvalReport:
    """mIoU of a clustering baseline on the 64x64 raw depth of a split."""
    manifest = read_manifest(directory)
    segment = BASELINES[method]
    ids, scores = [], []
    for index in tqdm(manifest.split(split), disable=not progress, desc=method):
        scene = read_scene(directory, index, manifest)
        image = resize_depth(scene.depth, manifest.input_size)[0].numpy()
        gt = masks_from_labels(resize_labels(scene.labels, manifest.input_size), manifest.n_instances)
        if not any(m.any() for m in gt):
            continue
        pred = segment(image, manifest.n_instances, manifest.floor, seed)
        ids.append(index)
        scores.append(miou(pred, gt, bijective=bijective))
    if not ids:
        raise ValueError(f"split {split!r} has no scenes to evaluate")
    return EvalReport(ids, scores, manifest.class_name, method,
                      {"split": split, "seed": seed, "bijective": bijective})


def cmd_eval(args: argparse.Namespace) -> int:
    if args.pred:
        report = _report_from_masks(args)
    elif args.baseline:
        report = baseline_report(args.gt, args.split, args.baseline, args.seed, args.bijective,
                                 progress=not args.quiet)
    else:
        model = load_model(args.checkpoint, args.device)
        report = evaluate_dataset(args.gt, args.split, model, args.tau, args.min_area, args.filter,
                                  args.bijective, progress=not args.quiet)
    if args.report:
        report.write_jsonl(args.report)
    if args.pdf:
        export_pdf([report], args.pdf)
    print()
    print(report.summary_table())
    return 0


# --- ablate -----------------------------------------------------------------

def ablation_configs(args: argparse.Namespace, base: TrainConfig) -> Dict[str, TrainConfig]:
    """Named configs, one sweep per given flag, each varying one knob of ``base``."""
    rows: Dict[str, TrainConfig] = {}
    if args.presets:
        for name, losses, aligner in PRESET_ROWS:
            use_inter, use_pose = LOSS_ABLATIONS[losses]
            rows[name] = replace(base, use_inter=use_inter, use_pose=use_pose, aligner=aligner)
    for losses in _csv(args.losses or ""):
        if losses not in LOSS_ABLATIONS:
            raise ValueError(f"Unknown loss ablation {losses!r} (choose from {sorted(LOSS_ABLATIONS)})")
        use_inter, use_pose = LOSS_ABLATIONS[losses]
        rows[losses] = replace(base, use_inter=use_inter, use_pose=use_pose)
    for aligner in _csv(args.aligners or ""):
        rows[f"aligner-{aligner}"] = replace(base, aligner=aligner)
    for variant in _csv(args.variants or ""):
        rows[f"variant-{variant}"] = replace(base, variant=variant, auto_reset=variant == "2d")
    for n in _int_list(args.instances or ""):
        rows[f"n-{n}"] = replace(base, n_instances=n)
    for subset in _int_list(args.subsets or ""):
        rows[f"subset-{subset}"] = replace(base, train_subset=subset)
    for sigma in _float_list(args.noise or ""):
        rows[f"noise-{sigma:g}"] = replace(base, noise_sigma=sigma)
    if not rows:
        raise ValueError("ablate needs at least one sweep flag")
    for config in rows.values():
        config.validate()
    return rows


def cmd_ablate(args: argparse.Namespace) -> int:
    base = load_train_config(args.config) if args.config else TrainConfig()
    if args.reduced:
        base = replace(base, nets=NetConfig.reduced())
    if args.epochs is not None:
        base = replace(base, epochs=args.epochs)
    rows = ablation_configs(args, base)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, config in rows.items():
        save_config(config, out / f"{name}.json")
        print(f"config: {out / f'{name}.json'}")
    if not args.run:
        return 0
    if not args.data:
        raise ValueError("ablate --run needs --data")

    reports: List[EvalReport] = []
    for name, config in rows.items():
        logger.info("Ablation row %s", name)
        checkpoints = list(fit(args.data, config, out / name, progress=not args.quiet))
        model = load_model(checkpoints[-1], config.device)
        report = evaluate_dataset(args.data, args.split, model, progress=not args.quiet,
                                  noise_sigma=config.noise_sigma)
        report.method = name
        report.config = config.to_dict()
        reports.append(report)
    with open(out / "ablation.jsonl", "w", encoding="utf-8") as handle:
        for report in reports:
            handle.write(json.dumps({"row": report.method, "mean": report.mean,
                                     "checkpoint_id": report.checkpoint_id}, sort_keys=True) + "\n")
    print()
    print(f"{'row':<16} {'mIoU':>7}")
    print("-" * 24)
    for report in reports:
        print(f"{report.method:<16} {report.mean:>7.3f}")
    return 0


# --- plot -------------------------------------------------------------------

def cmd_plot(args: argparse.Namespace) -> int:
    model = load_model(args.checkpoint, args.device)
    manifest = read_manifest(args.data)
    rows = []
    for index, result, clean, labels in segment_dataset(args.data, args.split, model, args.tau,
                                                        args.min_area, progress=False):
        image = read_scene(args.data, index, manifest).depth
        rows.append((resize_depth(image)[0].numpy(), result, labels, clean))
        if len(rows) >= args.count:
            break
    path = plot_grid(args.out, rows)
    print(f"figure: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="insegan",
        description="Unsupervised instance segmentation of depth images of identical objects",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Enable debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="Hide progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="Render a synthetic bin dataset")
    gen.add_argument("--shape", choices=SHAPE_KINDS, default="box")
    gen.add_argument("--dims", type=_dims, default=(1.0, 0.6, 0.4), help="x,y,z extent")
    gen.add_argument("--n", type=int, default=5, help="Instances per scene (default: 5)")
    gen.add_argument("--count", type=int, default=1000)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--bin-scale", type=float, default=4.0,
                     help="Bin side in shape diameters (default: 4)")
    gen.add_argument("--size", type=int, default=224, help="Native render size")
    gen.add_argument("--val", type=int, default=None)
    gen.add_argument("--test", type=int, default=None)
    gen.add_argument("--hard-test", action="store_true",
                     help="Test split = scenes where K-Means scores lowest")
    gen.add_argument("--noise", type=float, default=0.0, help="Gaussian depth noise sigma")
    gen.add_argument("--no-overlap", action="store_true", help="Keep footprints disjoint")
    gen.add_argument("--workers", type=int, default=0)
    gen.add_argument("--out", type=Path, required=True)
    gen.set_defaults(func=cmd_gen_data)

    train = sub.add_parser("train", help="Train generator, discriminator and encoder")
    train.add_argument("--data", type=Path, required=True)
    train.add_argument("--out", type=Path, required=True)
    train.add_argument("--config", type=Path, help="TrainConfig JSON file")
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--instances", type=int)
    train.add_argument("--seed", type=int)
    train.add_argument("--device")
    train.add_argument("--aligner", choices=ALIGNERS)
    train.add_argument("--variant", choices=VARIANTS)
    train.add_argument("--losses", choices=sorted(LOSS_ABLATIONS))
    train.add_argument("--subset", type=int, help="Use the first N training scenes")
    train.add_argument("--noise", type=float, help="Override the dataset's noise sigma")
    train.add_argument("--checkpoint-every", type=int)
    train.add_argument("--validate-every", type=int)
    train.add_argument("--reduced", action="store_true", help="Width-reduced networks")
    train.add_argument("--auto-reset", action="store_true",
                       help="Reset optimizers instead of stopping on divergence")
    train.add_argument("--resume", type=Path)
    train.set_defaults(func=cmd_train)

    infer = sub.add_parser("infer", help="Segment a dataset split with a checkpoint")
    infer.add_argument("--checkpoint", type=Path, required=True)
    infer.add_argument("--data", type=Path, required=True)
    infer.add_argument("--split", default="test")
    infer.add_argument("--out", type=Path, required=True)
    infer.add_argument("--tau", type=float)
    infer.add_argument("--min-area", type=int, default=MIN_AREA)
    infer.add_argument("--filter", choices=MASK_FILTERS, default="components")
    infer.add_argument("--device", default="cpu")
    infer.set_defaults(func=cmd_infer)

    ev = sub.add_parser("eval", help="Score masks, a baseline or a checkpoint by mIoU")
    ev.add_argument("--gt", type=Path, required=True, help="Dataset directory")
    ev.add_argument("--split", default="test")
    source = ev.add_mutually_exclusive_group(required=True)
    source.add_argument("--pred", type=Path, help="Directory of predicted masks")
    source.add_argument("--baseline", choices=sorted(BASELINES))
    source.add_argument("--checkpoint", type=Path)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--tau", type=float)
    ev.add_argument("--min-area", type=int, default=MIN_AREA)
    ev.add_argument("--filter", choices=MASK_FILTERS, default="components")
    ev.add_argument("--bijective", action="store_true", help="One-to-one segment matching")
    ev.add_argument("--report", type=Path, help="Write per-scene JSON lines here")
    ev.add_argument("--pdf", type=Path, help="Write a PDF summary here")
    ev.add_argument("--device", default="cpu")
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="Write (and optionally run) ablation configs")
    ab.add_argument("--config", type=Path, help="Base TrainConfig JSON file")
    ab.add_argument("--losses", help="Comma list of a, ai, ap, aip")
    ab.add_argument("--aligners", help="Comma list of ot, hungarian, greedy")
    ab.add_argument("--variants", help="Comma list of 3d, 2d")
    ab.add_argument("--instances", help="Instance counts, e.g. 1-7")
    ab.add_argument("--subsets", help="Training subset sizes, e.g. 500,1000,3000")
    ab.add_argument("--noise", help="Noise sigmas, e.g. 0.1,0.2,0.5")
    ab.add_argument("--presets", action="store_true", help="Loss and aligner preset rows")
    ab.add_argument("--reduced", action="store_true")
    ab.add_argument("--epochs", type=int)
    ab.add_argument("--out", type=Path, required=True)
    ab.add_argument("--run", action="store_true", help="Train and evaluate every row")
    ab.add_argument("--data", type=Path)
    ab.add_argument("--split", default="test")
    ab.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("plot", help="Figure grid of inputs, renders and segmentations")
    pl.add_argument("--checkpoint", type=Path, required=True)
    pl.add_argument("--data", type=Path, required=True)
    pl.add_argument("--split", default="test")
    pl.add_argument("--count", type=int, default=4)
    pl.add_argument("--tau", type=float)
    pl.add_argument("--min-area", type=int, default=MIN_AREA)
    pl.add_argument("--out", type=Path, required=True, help="PNG path")
    pl.add_argument("--device", default="cpu")
    pl.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    setup_logging(verbose=args.verbose)
    try:
        return args.func(args)
    except (DatasetError, CheckpointError, TrainingDivergedError, RuntimeError, ValueError,
            OSError) as exc:
        logger.error("error=%s message=%s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
