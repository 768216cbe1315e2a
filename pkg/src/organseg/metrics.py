"""Overlap scores for binary masks, per-organ summaries and the model sweep."""

from __future__ import annotations

import io
import csv
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .anatomy import OrganId
from .raster import BitMask


def _bits(mask) -> np.ndarray:
    return mask.bits if isinstance(mask, BitMask) else np.asarray(mask, dtype=bool)


def _counts(pred, truth) -> tuple[int, int, int]:
    p, t = _bits(pred), _bits(truth)
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    inter = int(np.count_nonzero(p & t))
    return inter, int(np.count_nonzero(p)), int(np.count_nonzero(t))


def dice(pred, truth) -> float:
    """2|P & T| / (|P| + |T|); two empty masks score 1.0."""
    inter, np_, nt = _counts(pred, truth)
    if np_ + nt == 0:
        return 1.0
    return 2.0 * inter / (np_ + nt)


def prf(pred, truth) -> tuple[float, float, float]:
    """Precision, recall and their harmonic mean.

    An empty side scores 1.0 when the other side is empty too, else 0.0.
    """
    inter, np_, nt = _counts(pred, truth)
    if np_ == 0:
        precision = 1.0 if nt == 0 else 0.0
    else:
        precision = inter / np_
    if nt == 0:
        recall = 1.0 if np_ == 0 else 0.0
    else:
        recall = inter / nt
    s = precision + recall
    f = 2.0 * precision * recall / s if s > 0 else 0.0
    return precision, recall, f


@dataclass(frozen=True)
class ScoreRow:
    organ: OrganId
    n: int
    dice: float
    precision: float
    recall: float
    f_score: float


REPORT_COLUMNS = ("organ", "n", "dice", "precision", "recall", "f_score")


def score_rows_csv(rows: Sequence[ScoreRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in rows:
        writer.writerow([r.organ.value, r.n] + [f"{v:.6f}" for v in (r.dice, r.precision, r.recall, r.f_score)])
    return buf.getvalue()


def evaluate_dataset(results: Iterable) -> tuple[list[ScoreRow], str]:
    """Per-organ mean scores over ``(SegmentationResult, truth mask)`` pairs.

    A result that was not found contributes its (empty) mask, so it is scored
    as a prediction of absence. Rows follow organ order.
    """
    per_organ: dict[OrganId, list[tuple[float, float, float, float]]] = {}
    for result, truth in results:
        pred = result.mask if result.found else BitMask(np.zeros_like(_bits(truth)))
        p, r, f = prf(pred, truth)
        per_organ.setdefault(result.organ, []).append((dice(pred, truth), p, r, f))
    if not per_organ:
        raise ValueError("no results to evaluate")
    rows = []
    for organ in OrganId:
        if organ not in per_organ:
            continue
        scores = np.array(per_organ[organ], dtype=np.float64)
        means = scores.mean(axis=0)
        rows.append(ScoreRow(organ, len(scores), *(float(m) for m in means)))
    return rows, score_rows_csv(rows)


# --- sweep ---------------------------------------------------------------------------

SWEEP_COLUMNS = ("conv_stages", "epochs", "shape_accuracy", "mean_dice")

TrainFn = Callable[[int, Sequence[int], int], Mapping[int, object]]


@dataclass(frozen=True)
class SweepRow:
    conv_stages: int
    epochs: int
    shape_accuracy: float
    mean_dice: float


@dataclass(frozen=True, eq=False)
class SweepEval:
    """Held-out material for the sweep.

    ``shape_images``/``shape_labels`` are classifier inputs. ``images`` pairs
    each canonical image with its per-organ truth masks; the other fields
    configure end-to-end segmentation.
    """

    shape_images: np.ndarray
    shape_labels: np.ndarray
    images: Sequence[tuple[object, Mapping[OrganId, BitMask]]]
    registry: object
    color_model: object
    config: object = None


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for r in rows:
        writer.writerow([r.conv_stages, r.epochs, f"{r.shape_accuracy:.6f}", f"{r.mean_dice:.6f}"])
    return buf.getvalue()


def end_to_end_dice(net, evalset: SweepEval) -> float:
    from .pipeline import PipelineConfig, segment_all_organs

    cfg = evalset.config if evalset.config is not None else PipelineConfig()
    scores = []
    for img, truths in evalset.images:
        for result in segment_all_organs(img, evalset.registry, evalset.color_model, net, cfg):
            if result.organ in truths:
                scores.append(dice(result.mask, truths[result.organ]))
    return float(np.mean(scores)) if scores else 0.0


def sweep(train_fn: TrainFn, stages: Sequence[int], epochs: Sequence[int],
          evalset: SweepEval, seed: int = 0) -> tuple[list[SweepRow], str]:
    """Score a fresh net for every (conv stages, epochs) grid point.

    ``train_fn(conv_stages, epochs_list, seed)`` returns ``{epochs: net}``; one
    call per stage count lets a constant-rate run hand back its intermediate
    epochs. Rows are in grid order.
    """
    from .shapenet import accuracy

    stages, epochs = list(stages), list(epochs)
    if not stages or not epochs:
        raise ValueError("sweep grid must be non-empty")
    rows = []
    for k in stages:
        nets = train_fn(k, sorted(set(epochs)), seed)
        for e in epochs:
            net = nets[e]
            acc = accuracy(net, evalset.shape_images, evalset.shape_labels)
            rows.append(SweepRow(k, e, acc, end_to_end_dice(net, evalset)))
    return rows, sweep_csv(rows)
