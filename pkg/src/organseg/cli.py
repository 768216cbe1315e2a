"""``organseg`` command line.

Every command prints ``key=value`` lines on standard output and exits with
0 on success, 1 on a usage error, 2 on unreadable or malformed input and 3
when training fails.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import anatomy, chroma, metrics, phantom, pipeline, raster, shapenet
from .anatomy import OrganId
from .errors import (
    BoundsError,
    FormatError,
    RegistryParseError,
    RegistryValidationError,
    TrainingDataError,
    TrainingDivergence,
)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAINING = 0, 1, 2, 3
RESULT_COLUMNS = ("organ", "found", "box_x", "box_y", "box_w", "box_h", "score")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _organ_choice(value: str):
    if value.lower() == "all":
        return "all"
    try:
        return OrganId.parse(value)
    except ValueError:
        names = ", ".join(o.value for o in OrganId)
        raise argparse.ArgumentTypeError(f"unknown organ {value!r} (choose from {names} or all)") from None


def _int_list(value: str) -> list[int]:
    try:
        out = [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _bounded(kind, lo=None, hi=None):
    def parse(value: str):
        try:
            v = kind(value)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid {kind.__name__} {value!r}") from None
        if (lo is not None and v < lo) or (hi is not None and v > hi):
            raise argparse.ArgumentTypeError(f"{value} outside [{lo}, {hi if hi is not None else 'inf'}]")
        return v

    return parse


POSITIVE = _bounded(int, 1)
NON_NEGATIVE = _bounded(int, 0)


def _emit(**pairs) -> None:
    print(" ".join(f"{k}={_fmt(v)}" for k, v in pairs.items()))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    if isinstance(v, bool):
        return str(int(v))
    return str(v)


def _load_registry(path) -> anatomy.Registry:
    if path is None:
        return anatomy.builtin_registry()
    return anatomy.parse_registry(Path(path).read_text(encoding="utf-8"))


def _split(items: list, fraction: float) -> tuple[list, list]:
    cut = int(round(len(items) * fraction))
    return items[:cut], items[cut:]


# --- commands ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    params = phantom.PhantomParams(seed=args.seed, noise=args.noise)
    manifest = phantom.generate_dataset(args.n, params, _load_registry(args.registry), args.out)
    _emit(images=args.n, manifest=manifest)
    return EXIT_OK


def cmd_train_color(args) -> int:
    registry = _load_registry(args.registry)
    items = phantom.load_labeled(args.manifest)
    rgb, labels = pipeline.color_training_pixels(items, registry, args.per_class, args.seed)
    model = chroma.train_color_model_arrays(rgb, labels, epochs=args.epochs,
                                            learning_rate=args.learning_rate, seed=args.seed)
    chroma.save_color_model(model, args.out)
    acc = float(np.mean(chroma.classify_pixels(model, rgb) == labels))
    _emit(samples=len(rgb), train_accuracy=acc, model=args.out)
    return EXIT_OK


def _shape_data(items, registry, color_model, seed, jittered, negatives, stride):
    x, y = pipeline.shape_training_set(items, registry, color_model, seed=seed,
                                       jittered=jittered, negatives=negatives, stride=stride)
    if len(x) == 0:
        raise TrainingDataError("manifest yields no shape crops")
    return x, y


def cmd_train_shape(args) -> int:
    registry = _load_registry(args.registry)
    color_model = chroma.load_color_model(args.color_model)
    items = phantom.load_labeled(args.manifest)
    x, y = _shape_data(items, registry, color_model, args.seed, args.jittered, args.negatives, args.stride)
    net = shapenet.default_architecture(args.seed, conv_stages=args.stages)
    cfg = shapenet.TrainConfig(epochs=args.epochs, seed=args.seed)
    net, history = shapenet.train(net, x, y, cfg)
    shapenet.save_weights(net, args.out)
    loss = history.losses[-1] if len(history) else float("nan")
    acc = history.accuracies[-1] if len(history) else shapenet.accuracy(net, x, y)
    _emit(samples=len(x), epochs=args.epochs, final_loss=loss, train_accuracy=acc, model=args.out)
    return EXIT_OK


def load_shape_model(path) -> shapenet.ShapeNet:
    stages = shapenet.stored_conv_stages(path)
    return shapenet.load_weights(path, shapenet.architecture(stages))


def _write_results(out_dir: Path, results) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "results.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for r in results:
            b = r.box
            writer.writerow([r.organ.value, int(r.found), b.x, b.y, b.w, b.h, f"{r.score:.6f}"])
    for r in results:
        raster.encode_mask(r.mask, out_dir / f"{r.organ.value.lower()}.png")


def cmd_segment(args) -> int:
    registry = _load_registry(args.registry)
    color_model = chroma.load_color_model(args.color_model)
    net = load_shape_model(args.shape_model)
    cfg = pipeline.PipelineConfig(stride=args.stride, threshold=args.threshold)
    organs = registry.organs if args.organ == "all" else [args.organ]
    out = Path(args.out)
    for path in args.image:
        img = raster.resize_canonical(raster.load_image(path))
        labels = chroma.classify_image(color_model, img)
        results = [pipeline.segment_organ(img, o, registry, color_model, net, cfg, labels) for o in organs]
        _write_results(out / Path(path).stem, results)
        for r in results:
            b = r.box
            _emit(image=Path(path).stem, organ=r.organ.value, found=r.found, score=r.score,
                  box=f"{b.x},{b.y},{b.w},{b.h}")
    return EXIT_OK


def read_results(folder: Path, width: int, height: int) -> list[pipeline.SegmentationResult]:
    out = []
    with open(folder / "results.csv", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
            raise FormatError(f"{folder / 'results.csv'}: unexpected header")
        for row in reader:
            organ = OrganId.parse(row["organ"])
            box = raster.Rect(*(int(row[k]) for k in ("box_x", "box_y", "box_w", "box_h")))
            mask_path = folder / f"{organ.value.lower()}.png"
            mask = raster.decode_mask(mask_path) if mask_path.exists() else raster.BitMask.empty(width, height)
            out.append(pipeline.SegmentationResult(organ, row["found"] == "1", box, mask, float(row["score"])))
    return out


def cmd_evaluate(args) -> int:
    results_dir = Path(args.results)
    pairs = []
    for item in phantom.load_labeled(args.manifest):
        folder = results_dir / item.path.stem
        if not (folder / "results.csv").exists():
            continue
        for r in read_results(folder, item.image.width, item.image.height):
            if r.organ in item.masks:
                pairs.append((r, item.masks[r.organ]))
    if not pairs:
        raise FormatError(f"no results under {results_dir} match {args.manifest}")
    rows, text = metrics.evaluate_dataset(pairs)
    Path(args.out).write_text(text, encoding="utf-8")
    for r in rows:
        _emit(organ=r.organ.value, n=r.n, dice=r.dice, precision=r.precision, recall=r.recall, f_score=r.f_score)
    return EXIT_OK


def cmd_sweep(args) -> int:
    registry = _load_registry(args.registry)
    items = phantom.load_labeled(args.manifest)
    train_items, eval_items = _split(items, args.train_fraction)
    if not train_items or not eval_items:
        raise TrainingDataError("sweep needs images on both sides of the split")
    if args.color_model:
        color_model = chroma.load_color_model(args.color_model)
    else:
        color_model = pipeline.train_color_from_items(train_items, registry, seed=args.seed)
    x, y = _shape_data(train_items, registry, color_model, args.seed, args.jittered, args.negatives, args.stride)
    xe, ye = pipeline.shape_eval_set(eval_items, registry, color_model, seed=args.seed + 1, stride=args.stride)
    evalset = metrics.SweepEval(
        xe, ye, [(it.image, it.masks) for it in eval_items], registry, color_model,
        pipeline.PipelineConfig(stride=args.stride),
    )
    rows, text = metrics.sweep(snapshot_trainer(x, y), args.stages, args.epochs, evalset, args.seed)
    Path(args.out).write_text(text, encoding="utf-8")
    for r in rows:
        _emit(conv_stages=r.conv_stages, epochs=r.epochs, shape_accuracy=r.shape_accuracy, mean_dice=r.mean_dice)
    return EXIT_OK


def snapshot_trainer(x, y, **cfg):
    """A sweep train function that runs once per stage count and keeps epoch snapshots."""

    def train_fn(conv_stages, epochs_list, seed):
        net = shapenet.default_architecture(seed, conv_stages=conv_stages)
        wanted = set(epochs_list)
        snaps = {0: net} if 0 in wanted else {}
        total = max(epochs_list)
        if total > 0:
            def keep(epoch, current):
                if epoch in wanted:
                    snaps[epoch] = current

            shapenet.train(net, x, y, shapenet.TrainConfig(epochs=total, seed=seed, **cfg), on_epoch=keep)
        return snaps

    return train_fn


def read_corners(path) -> dict[OrganId, list[tuple[int, int]]]:
    """Corners from an ``organ,x,y`` table or a dataset manifest (``box_x,box_y``)."""
    corners: dict[OrganId, list[tuple[int, int]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = set(reader.fieldnames or ())
        if {"organ", "x", "y"} <= fields:
            xk, yk = "x", "y"
        elif {"organ", "box_x", "box_y"} <= fields:
            xk, yk = "box_x", "box_y"
        else:
            raise FormatError(f"{path}: need columns organ,x,y or organ,box_x,box_y")
        for row in reader:
            if not row[xk].strip() or not row[yk].strip():
                continue
            try:
                organ = OrganId.parse(row["organ"])
                corners.setdefault(organ, []).append((int(row[xk]), int(row[yk])))
            except ValueError as exc:
                raise FormatError(f"{path}: {exc}") from None
    return corners


def cmd_stats(args) -> int:
    base = _load_registry(args.registry)
    corners = read_corners(args.annotations)
    specs = []
    for spec in base:
        pts = corners.get(spec.organ)
        region = anatomy.plausible_region_from_stats(pts) if pts else spec.region
        specs.append(anatomy.OrganSpec(spec.organ, spec.box_w, spec.box_h, region, spec.category))
        r = region
        _emit(organ=spec.organ.value, n=len(pts or ()), region=f"{r.amin},{r.bmin}:{r.amax},{r.bmax}")
    Path(args.out).write_text(anatomy.serialize_registry(anatomy.Registry(specs)), encoding="utf-8")
    return EXIT_OK


# --- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="organseg", description="Organ segmentation on whole-body section images.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a phantom dataset")
    p.add_argument("--n", type=POSITIVE, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=NON_NEGATIVE, default=12)
    p.add_argument("--registry")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-color", help="fit the pixel color model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-class", type=POSITIVE, default=4000)
    p.add_argument("--epochs", type=NON_NEGATIVE, default=60)
    p.add_argument("--learning-rate", type=_bounded(float, 1e-12), default=0.5)
    p.add_argument("--registry")
    p.set_defaults(func=cmd_train_color)

    p = sub.add_parser("train-shape", help="train the shape classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--color-model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=NON_NEGATIVE, default=70)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stages", type=_bounded(int, 1, len(shapenet.STAGE_WIDTHS)), default=3)
    p.add_argument("--jittered", type=NON_NEGATIVE, default=1)
    p.add_argument("--negatives", type=NON_NEGATIVE, default=2)
    p.add_argument("--stride", type=POSITIVE, default=anatomy.DEFAULT_STRIDE)
    p.add_argument("--registry")
    p.set_defaults(func=cmd_train_shape)

    p = sub.add_parser("segment", help="segment organs in images")
    p.add_argument("--image", action="append", required=True, help="repeatable")
    p.add_argument("--organ", type=_organ_choice, default="all")
    p.add_argument("--registry")
    p.add_argument("--color-model", required=True)
    p.add_argument("--shape-model", required=True)
    p.add_argument("--stride", type=POSITIVE, default=anatomy.DEFAULT_STRIDE)
    p.add_argument("--threshold", type=_bounded(float, 0.0, 1.0), default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="score segmentation results against a manifest")
    p.add_argument("--results", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="grid over conv stages and epochs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stages", type=_int_list, default=[2, 3, 4])
    p.add_argument("--epochs", type=_int_list, default=[10, 40, 70])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--color-model")
    p.add_argument("--train-fraction", type=_bounded(float, 0.0, 1.0), default=0.5)
    p.add_argument("--jittered", type=NON_NEGATIVE, default=1)
    p.add_argument("--negatives", type=NON_NEGATIVE, default=2)
    p.add_argument("--stride", type=POSITIVE, default=anatomy.DEFAULT_STRIDE)
    p.add_argument("--registry")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("stats", help="derive plausible regions from annotated corners")
    p.add_argument("--annotations", required=True)
    p.add_argument("--registry", help="base registry for box sizes and categories")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (TrainingDivergence, TrainingDataError) as exc:
        print(f"organseg: training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (FileNotFoundError, IsADirectoryError, PermissionError, FormatError,
            RegistryParseError, RegistryValidationError, BoundsError) as exc:
        print(f"organseg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError) as exc:
        print(f"organseg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
