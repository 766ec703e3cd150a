from __future__ import annotations

import argparse
import logging
import sys
import time
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any

import pydantic
from pydantic import BaseModel

from .app_context import AppContext, bootstrap
from .config import DATASETS_DIR, MODELS_DIR, PRODUCTS_DIR, REPORTS_DIR, setting
from .data.storage import load_fingerprint, load_manifest, load_registry, load_tile, save_fingerprint, save_mask
from .errors import ToolkitError, ValidationError
from .helpers import MASK_METHODS, parse_methods, safe_float, safe_int
from .services.run_journal import EntityType, OperationType
from .version import get_app_version

logger = logging.getLogger(__name__)

RESIDUAL_EXTRACTOR = "residual"


def _validated[M: BaseModel](model: type[M], data: dict[str, Any]) -> M:
    try:
        return model.model_validate(data)
    except pydantic.ValidationError as exc:
        raise ValidationError(f"invalid {model.__name__}: {exc}") from exc


def _int_list(raw: str | None) -> list[int] | None:
    if not raw:
        return None
    return [int(part) for part in raw.split(",") if part.strip()]


def cmd_synth(ctx: AppContext, args: argparse.Namespace) -> int:
    from .services.synthgrd import generate_pool

    out = Path(args.out)
    registry = generate_pool(
        args.products,
        height=args.height,
        width=args.width,
        tile_side=args.tile_side,
        seed=args.seed,
        out_dir=out,
        workers=ctx.workers,
    )
    tiles = sum(len(p.tiles) for p in registry.products)
    ctx.journal.log_operation(
        OperationType.SYNTHESIZE,
        EntityType.PRODUCT_POOL,
        str(out),
        {"products": len(registry.products), "tiles": tiles},
    )
    print(f"{len(registry.products)} products, {tiles} tiles -> {out / 'products.json'}")
    return 0


def cmd_splice(ctx: AppContext, args: argparse.Namespace) -> int:
    from .services.splicer import DatasetBlueprint, build_dataset

    sides = _int_list(args.max_sides)
    match args.set:
        case "fed":
            blueprint = DatasetBlueprint.fed(seed=args.seed)
        case "sd1":
            blueprint = DatasetBlueprint.sd1(seed=args.seed)
        case _:
            blueprint = DatasetBlueprint.sd2(seed=args.seed)
    updates: dict[str, object] = {"max_target_reuse": args.max_target_reuse, "min_side": args.min_side}
    if args.per_op is not None:
        updates["per_op"] = args.per_op
    if sides:
        updates["max_sides"] = sides
    if args.operations:
        updates["operations"] = [op.strip() for op in args.operations.split(",") if op.strip()]
    if args.modes:
        updates["modes"] = [m.strip() for m in args.modes.split(",") if m.strip()]
    blueprint = _validated(DatasetBlueprint, {**blueprint.model_dump(), **updates})

    registry = load_registry(args.pool)
    out = Path(args.out)
    manifest = build_dataset(blueprint, registry, out, workers=ctx.workers)
    ctx.journal.log_operation(
        OperationType.SPLICE,
        EntityType.DATASET,
        blueprint.name,
        {"records": len(manifest.records), "pristine": len(manifest.pristine_tiles), "out": str(out)},
    )
    print(f"{blueprint.name}: {len(manifest.records)} records, {len(manifest.pristine_tiles)} pristine tiles -> {out}")
    return 0


def cmd_train_fp(ctx: AppContext, args: argparse.Namespace) -> int:
    from .services.fingerprint import ExtractorConfig, train_extractor

    mode = args.mode.upper()
    base = ExtractorConfig.full(mode, args.seed) if args.preset == "full" else ExtractorConfig.desk(mode, args.seed)
    overrides = {
        key: value
        for key, value in {
            "depth": args.depth,
            "width": args.width,
            "max_epochs": args.epochs,
            "iters_per_epoch": args.iters,
            "lr": args.lr,
            "val_split": args.val_split,
            "patch": args.patch,
        }.items()
        if value is not None
    }
    cfg = _validated(ExtractorConfig, {**base.model_dump(), **overrides})
    fed = load_manifest(args.fed)
    result = train_extractor(fed, cfg)
    out = Path(args.out)
    result.extractor.save(out)
    ctx.journal.log_training(
        EntityType.EXTRACTOR, str(out), len(result.history), result.best_epoch, result.best_val_loss
    )
    print(f"{result.extractor.extractor_id}: best val loss {result.best_val_loss:.5f} at epoch {result.best_epoch}")
    return 0


def _load_extractor(spec: str):
    from .services.experiment import ResidualEnergyExtractor
    from .services.fingerprint import FingerprintExtractor

    if spec == RESIDUAL_EXTRACTOR:
        return ResidualEnergyExtractor()
    return FingerprintExtractor.load(spec)


def cmd_extract(ctx: AppContext, args: argparse.Namespace) -> int:
    extractor = _load_extractor(args.model)
    started = time.perf_counter()
    fp = extractor.extract(load_tile(args.input))
    elapsed = (time.perf_counter() - started) * 1000.0
    path = save_fingerprint(fp, args.out)
    ctx.journal.log_operation(OperationType.EXTRACT, EntityType.FINGERPRINT, str(path), {"ms": round(elapsed, 1)})
    ctx.journal.log_performance_issue("extract", elapsed)
    print(f"{fp.height}x{fp.width} fingerprint -> {path}")
    return 0


def cmd_mask(ctx: AppContext, args: argparse.Namespace) -> int:
    from .services.maskest import UNetEstimator, estimate_mask

    fp = load_fingerprint(args.fp)
    model = UNetEstimator.load(args.model) if args.model else None
    estimate = estimate_mask(args.method, fp, args.seed, model=model, tau=args.tau, n_clusters=args.clusters)
    path = save_mask(estimate.mask, args.out)
    ctx.journal.log_operation(
        OperationType.ESTIMATE, EntityType.MASK, str(path), {"method": args.method, "area": estimate.mask.area}
    )
    print(f"{args.method}: {estimate.mask.area} spliced pixels -> {path}")
    return 0


def cmd_train_unet(ctx: AppContext, args: argparse.Namespace) -> int:
    from .services.experiment import extract_pairs
    from .services.maskest import UNetConfig, train_unet

    extractor = _load_extractor(args.fp_model)
    sd1 = load_manifest(args.sd1)
    pairs = extract_pairs(sd1, extractor)
    requested = {"max_epochs": args.epochs, "lr": args.lr, "seed": args.seed}
    overrides = {k: v for k, v in requested.items() if v is not None}
    cfg = _validated(UNetConfig, overrides)
    result = train_unet(pairs, cfg, extractor_id=extractor.extractor_id)
    out = Path(args.out)
    result.estimator.save(out)
    ctx.journal.log_training(EntityType.UNET, str(out), len(result.history), result.best_epoch, result.best_val_loss)
    print(f"U-Net for {extractor.extractor_id}: best val loss {result.best_val_loss:.5f} at epoch {result.best_epoch}")
    return 0


def cmd_evaluate(ctx: AppContext, args: argparse.Namespace) -> int:
    from .services.experiment import run_experiment
    from .services.maskest import UNetEstimator

    manifest = load_manifest(args.sd2)
    extractors = [_load_extractor(spec) for spec in args.fp_model]
    methods = parse_methods(args.methods)
    unets = {}
    for directory in args.unet or []:
        estimator = UNetEstimator.load(directory)
        unets[estimator.extractor_id] = estimator
    outcome = run_experiment(
        manifest, extractors, methods, Path(args.out), unets=unets, workers=ctx.workers, seed=args.seed, tau=args.tau
    )
    summary = outcome.report.summary()
    if not summary.empty:
        print(summary.to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    print(f"{outcome.records} records, {outcome.report.failures} failed rows, exit {outcome.exit_code}")
    return outcome.exit_code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sar-splice", description="SAR amplitude splicing fabrication and localization"
    )
    parser.add_argument("-d", "--debug", action="store_true", help="verbose logging (also writes debug.log)")
    parser.add_argument("--version", action="version", version=f"%(prog)s {get_app_version()}")
    parser.add_argument("-j", "--workers", type=int, default=None, help="parallel worker processes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic products and tiles")
    p.add_argument("--products", type=int, default=20)
    p.add_argument("--height", type=int, default=1024)
    p.add_argument("--width", type=int, default=1024)
    p.add_argument("--tile-side", type=int, default=safe_int(setting("desk_tile_side"), 256, min_value=8))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=str(PRODUCTS_DIR))
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("splice", help="build the FED, SD1 or SD2 dataset")
    p.add_argument("--set", choices=["fed", "sd1", "sd2"], required=True)
    p.add_argument("--per-op", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pool", default=str(PRODUCTS_DIR / "products.json"))
    p.add_argument("--out", default=str(DATASETS_DIR))
    p.add_argument("--max-sides", default=None, help="comma-separated crop side limits")
    p.add_argument(
        "--min-side",
        type=int,
        default=safe_int(setting("min_side"), 128, min_value=1),
        help="smallest crop side; every --max-sides entry must be at least this",
    )
    p.add_argument("--operations", default=None, help="comma-separated subset of the catalog")
    p.add_argument("--modes", default=None, help="inter, intra or both")
    p.add_argument("--max-target-reuse", type=int, default=2)
    p.set_defaults(handler=cmd_splice)

    p = sub.add_parser("train-fp", help="train a fingerprint extractor on FED")
    p.add_argument("--fed", required=True)
    p.add_argument("--mode", choices=["be", "sae", "asae"], default="sae")
    p.add_argument(
        "--preset",
        choices=["desk", "full"],
        default="full",
        help="full: 17 layers x 64 channels, lr 1e-4; desk: 5 x 16, lr 1e-3, tile validation split",
    )
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--patch", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--val-split", choices=["product", "tile"], default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=str(MODELS_DIR / "extractor"))
    p.set_defaults(handler=cmd_train_fp)

    p = sub.add_parser("extract", help="compute the fingerprint of one tile")
    p.add_argument("--model", required=True, help=f"extractor directory or '{RESIDUAL_EXTRACTOR}'")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_extract)

    p = sub.add_parser("mask", help="estimate a tampering mask from a fingerprint")
    p.add_argument("--method", choices=list(MASK_METHODS), required=True)
    p.add_argument("--fp", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--tau", type=float, default=safe_float(setting("tau"), 0.5))
    p.add_argument("--clusters", type=int, default=safe_int(setting("clusters"), 7, min_value=1))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_mask)

    p = sub.add_parser("train-unet", help="train the U-Net mask estimator on SD1 fingerprints")
    p.add_argument("--sd1", required=True)
    p.add_argument("--fp-model", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=str(MODELS_DIR / "unet"))
    p.set_defaults(handler=cmd_train_unet)

    p = sub.add_parser("evaluate", help="score mask estimation on SD2")
    p.add_argument("--sd2", required=True)
    p.add_argument("--fp-model", action="append", required=True, help="repeat for several extractors")
    p.add_argument("--methods", default=",".join(MASK_METHODS))
    p.add_argument("--unet", action="append", default=None, help="U-Net directories, matched by extractor id")
    p.add_argument("--tau", type=float, default=safe_float(setting("tau"), 0.5))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=str(REPORTS_DIR))
    p.set_defaults(handler=cmd_evaluate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    ctx = bootstrap(debug=args.debug, workers=args.workers)
    handler: Callable[[AppContext, argparse.Namespace], int] = args.handler
    started = time.time()
    try:
        code = handler(ctx, args)
    except ToolkitError as exc:
        logger.error("%s failed [%s]: %s", args.command, exc.code, exc)
        return 1
    except Exception:
        logger.exception("%s crashed", args.command)
        return 1
    logger.info("%s finished in %.2fs (exit %s)", args.command, time.time() - started, code)
    return code


if __name__ == "__main__":
    sys.exit(main())
