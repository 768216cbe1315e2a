"""The ten acceptance criteria, each printing one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s``. The lines are also
repeated in the terminal summary. Criteria 1-3 share one benchmark run of
roughly half an hour; criterion 10 trains three more nets.
"""

import itertools
import math
import subprocess
import sys
import time
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import record
from organseg.anatomy import (
    OrganId,
    PlausibleRegion,
    builtin_registry,
    candidate_boxes,
    parse_registry,
    serialize_registry,
    spec_candidates,
)
from organseg.cli import snapshot_trainer
from organseg.metrics import SweepEval, dice, evaluate_dataset, prf, sweep
from organseg.phantom import PhantomParams, generate_phantom
from organseg.pipeline import (
    SegmentationResult,
    baseline_labels,
    baseline_pixel_segment,
    segment_all_organs,
    segment_organ,
    shape_eval_set,
    shape_training_set,
    train_baseline,
    train_color_from_items,
)
from organseg.shapenet import (
    TrainConfig,
    accuracy,
    backward,
    default_architecture,
    gradient_check,
    tiny_net,
    train,
)

pytestmark = pytest.mark.slow

REG = builtin_registry()
ORGANS = list(OrganId)

BENCH_SEED = 42
BENCH_IMAGES = 100
DICE_MIN = 0.80
PRECISION_MIN = 0.85
BENCH_BUDGET_S = 30 * 60
SHAPE_ACC_MIN = 0.90
BASELINE_GAP = 0.10


def verdict(number, ok, detail, capsys=None):
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    record(line)
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line)
    return ok


def labeled(seed):
    truth = generate_phantom(PhantomParams(seed=seed), REG)
    return SimpleNamespace(
        image=truth.image,
        masks={o: truth[o].mask for o in ORGANS},
        boxes={o: truth[o].box for o in ORGANS if truth[o].present},
    )


def mean_rows(per_image_rows):
    """Average per-image ScoreRows (n = 1 each) into per-organ (dice, precision) means."""
    out = {}
    for organ in ORGANS:
        vals = [(r.dice, r.precision) for rows in per_image_rows for r in rows if r.organ is organ]
        if vals:
            out[organ] = tuple(np.mean(vals, axis=0))
    return out


# --- criteria 1-3: shared phantom benchmark ----------------------------------------------


@pytest.fixture(scope="module")
def benchmark():
    """Train on phantoms 0-49 of seed 42, evaluate pipeline and baseline on 50-99.

    Images are generated lazily and scored one at a time so the whole corpus
    never sits in memory.
    """
    t0 = time.perf_counter()
    seeds = [BENCH_SEED + i for i in range(BENCH_IMAGES)]
    train_seeds, test_seeds = seeds[:BENCH_IMAGES // 2], seeds[BENCH_IMAGES // 2:]
    train_items = [labeled(s) for s in train_seeds]
    color_model = train_color_from_items(train_items, REG, seed=0)
    x, y = shape_training_set(train_items, REG, color_model, seed=0)
    baseline = train_baseline(train_items, seed=0)
    del train_items
    net, history = train(default_architecture(0), x, y, TrainConfig(epochs=70, seed=0))
    del x, y

    pipeline_rows, baseline_rows, eval_x, eval_y = [], [], [], []
    for seed in test_seeds:
        item = labeled(seed)
        ex, ey = shape_eval_set([item], REG, color_model, seed=seed)
        eval_x.append(ex)
        eval_y.append(ey)
        results = segment_all_organs(item.image, REG, color_model, net)
        pipeline_rows.append(evaluate_dataset([(r, item.masks[r.organ]) for r in results])[0])
        labels = baseline_labels(item.image, baseline)
        pairs = []
        for r in results:
            mask = baseline_pixel_segment(item.image, r.organ, baseline, labels)
            pairs.append((SegmentationResult(r.organ, True, r.box, mask, 1.0), item.masks[r.organ]))
        baseline_rows.append(evaluate_dataset(pairs)[0])
    shape_acc = accuracy(net, np.concatenate(eval_x), np.concatenate(eval_y))
    return SimpleNamespace(
        pipeline=mean_rows(pipeline_rows),
        baseline=mean_rows(baseline_rows),
        shape_accuracy=shape_acc,
        n_eval_crops=int(sum(len(e) for e in eval_y)),
        final_loss=history.losses[-1],
        seconds=time.perf_counter() - t0,
    )


def test_criterion_01_end_to_end_benchmark(benchmark, capsys):
    scores = benchmark.pipeline
    parts = [f"{o.value} d={scores[o][0]:.3f} p={scores[o][1]:.3f}" for o in ORGANS]
    ok_scores = all(scores[o][0] >= DICE_MIN and scores[o][1] >= PRECISION_MIN for o in ORGANS)
    ok_time = benchmark.seconds <= BENCH_BUDGET_S
    detail = (f"dice>={DICE_MIN} precision>={PRECISION_MIN}: " + ", ".join(parts)
              + f"; runtime {benchmark.seconds / 60:.1f} min (budget {BENCH_BUDGET_S // 60})")
    assert verdict(1, ok_scores and ok_time, detail, capsys)


def test_criterion_02_shape_accuracy(benchmark, capsys):
    acc = benchmark.shape_accuracy
    detail = f"held-out shape accuracy {acc:.4f} on {benchmark.n_eval_crops} crops (need >= {SHAPE_ACC_MIN})"
    assert verdict(2, acc >= SHAPE_ACC_MIN, detail, capsys)


def test_criterion_03_baseline_gap(benchmark, capsys):
    gaps = {o: benchmark.pipeline[o][0] - benchmark.baseline[o][0] for o in ORGANS}
    parts = [f"{o.value} {benchmark.pipeline[o][0]:.3f}-{benchmark.baseline[o][0]:.3f}={gaps[o]:.3f}"
             for o in ORGANS]
    detail = f"pipeline minus baseline dice >= {BASELINE_GAP}: " + ", ".join(parts)
    assert verdict(3, all(g >= BASELINE_GAP for g in gaps.values()), detail, capsys)


# --- criterion 4: gradients -----------------------------------------------------------------


def test_criterion_04_gradient_check(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    sample = (rng.normal(size=(4, 8, 8, 2)).astype(np.float32), np.array([0, 1, 2, 3]))
    net = tiny_net(0)
    err = gradient_check(net, sample, eps=1e-2)

    def doubled(net, x, y, rng):
        grads = backward(net, x, y, rng)
        grads[-2] = grads[-2] * 2
        return grads

    planted = gradient_check(net, sample, eps=1e-2, grad_fn=doubled)
    seconds = time.perf_counter() - t0
    ok = err < 1e-2 and planted > 0.5 and seconds < 60
    detail = f"max rel error {err:.2e} (< 1e-2), planted 2x bug {planted:.3f} (> 0.5), {seconds:.1f} s (< 60)"
    assert verdict(4, ok, detail, capsys)


# --- criterion 5: metric oracle --------------------------------------------------------------


def _oracle_counts(pred, truth):
    tp = fp = fn = 0
    for p, t in zip(pred.ravel().tolist(), truth.ravel().tolist()):
        tp += p and t
        fp += p and not t
        fn += t and not p
    return tp, fp, fn


def test_criterion_05_metric_oracle(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    mismatches = 0
    worst_identity = 0.0
    for _ in range(1000):
        dp, dt = rng.uniform(0, 0.6, size=2)
        pred = rng.random((32, 32)) < dp
        truth = rng.random((32, 32)) < dt
        tp, fp, fn = _oracle_counts(pred, truth)
        d = 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
        p = (1.0 if fn == 0 else 0.0) if tp + fp == 0 else tp / (tp + fp)
        r = (1.0 if fp == 0 else 0.0) if tp + fn == 0 else tp / (tp + fn)
        got_d = dice(pred, truth)
        got_p, got_r, got_f = prf(pred, truth)
        mismatches += (got_d != d) + (got_p != p) + (got_r != r)
        worst_identity = max(worst_identity, abs(got_f - got_d))
    seconds = time.perf_counter() - t0
    ok = mismatches == 0 and worst_identity <= 1e-12 and seconds < 10
    detail = (f"1000 random 32x32 pairs: {mismatches} mismatches, max |F1-dice| {worst_identity:.1e} "
              f"(<= 1e-12), {seconds:.2f} s (< 10)")
    assert verdict(5, ok, detail, capsys)


# --- criterion 6: candidate count oracle -------------------------------------------------------


def _axis_positions(lo, hi, stride):
    return [v for v in range(lo, hi + 1) if (v - lo) % stride == 0 or v == hi]


def _brute_force(region, w, h, stride):
    boxes = set()
    for b in _axis_positions(region.bmin, region.bmax, stride):
        for a in _axis_positions(region.amin, region.amax, stride):
            x0, y0 = min(a, 1999), min(b, 999)
            boxes.add((x0, y0, min(a + w, 2000) - x0, min(b + h, 1000) - y0))
    return boxes


def test_criterion_06_candidate_oracle(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    cases = [(REG[OrganId.LIVER].region, 300, 800, 10)]
    while len(cases) < 100:
        amin, bmin = int(rng.integers(0, 2000)), int(rng.integers(0, 1000))
        amax = min(2000, amin + int(rng.integers(0, 500)))
        bmax = min(1000, bmin + int(rng.integers(0, 400)))
        cases.append((PlausibleRegion(amin, bmin, amax, bmax), int(rng.integers(1, 700)),
                      int(rng.integers(1, 900)), int(rng.integers(1, 60))))
    bad = 0
    for region, w, h, stride in cases:
        boxes = candidate_boxes(region, w, h, stride)
        expect = _brute_force(region, w, h, stride)
        bad += len(boxes) != len(expect) or {(r.x, r.y, r.w, r.h) for r in boxes} != expect
    liver = len(spec_candidates(REG[OrganId.LIVER], 10))
    seconds = time.perf_counter() - t0
    ok = bad == 0 and liver == 1280 and seconds < 5
    detail = f"100 (region, stride) pairs, {bad} disagree; Liver stride 10 -> {liver} (1280); {seconds:.2f} s (< 5)"
    assert verdict(6, ok, detail, capsys)


# --- criterion 7: table fidelity -----------------------------------------------------------


GOLDEN = [
    ("Brain", 400, 400, (0, 400, 120, 630), "CAT1"),
    ("Heart", 100, 100, (800, 430, 990, 1000), "CAT3"),
    ("Liver", 300, 800, (1010, 400, 1400, 710), "CAT4"),
    ("Kidney", 400, 400, (1200, 190, 1500, 500), "CAT4"),
    ("Spine", 600, 200, (100, 50, 400, 400), "CAT2"),
]


def test_criterion_07_table_fidelity(capsys):
    got = [(s.organ.value, s.box_w, s.box_h, (s.region.amin, s.region.bmin, s.region.amax, s.region.bmax),
            s.category.name) for s in REG]
    text = serialize_registry(REG)
    round_trip = parse_registry(text) == REG and serialize_registry(parse_registry(text)) == text
    ok = got == GOLDEN and round_trip
    detail = f"builtin registry {'matches' if got == GOLDEN else 'DIFFERS from'} golden rows; file round trip {'exact' if round_trip else 'BROKEN'}"
    assert verdict(7, ok, detail, capsys)


# --- criterion 8: determinism of the CLI chain ------------------------------------------------


def _chain(root):
    def cli(*args):
        proc = subprocess.run([sys.executable, "-m", "organseg", *args], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        return proc.stdout

    data = root / "data"
    cli("synth", "--n", "10", "--seed", "42", "--out", str(data))
    manifest = data / "manifest.csv"
    cli("train-color", "--manifest", str(manifest), "--out", str(root / "color.bin"), "--seed", "0")
    cli("train-shape", "--manifest", str(manifest), "--color-model", str(root / "color.bin"),
        "--out", str(root / "shape.bin"), "--epochs", "5", "--seed", "0")
    images = [str(data / "images" / f"phantom_{i:04d}.png") for i in (8, 9)]
    cli("segment", *itertools.chain.from_iterable(("--image", p) for p in images),
        "--organ", "all", "--color-model", str(root / "color.bin"), "--shape-model", str(root / "shape.bin"),
        "--stride", "10", "--threshold", "0.5", "--out", str(root / "seg"))
    cli("evaluate", "--results", str(root / "seg"), "--manifest", str(manifest), "--out", str(root / "report.csv"))
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_08_cli_determinism(tmp_path, capsys):
    first = _chain(tmp_path / "run1")
    second = _chain(tmp_path / "run2")
    differing = [str(k) for k in first if first.get(k) != second.get(k)]
    same_set = first.keys() == second.keys()
    report = first.get(next(k for k in first if k.name == "report.csv"), b"").decode()
    well_formed = report.startswith("organ,n,dice,precision,recall,f_score\n") and len(report.splitlines()) == 6
    masks = sum(1 for k in first if k.parts[0] == "seg" and k.suffix == ".png")
    ok = same_set and not differing and well_formed and masks == 10
    detail = (f"{len(first)} files (weights, {masks} result masks, reports) compared across two runs: "
              f"{len(differing)} differ; report well-formed: {well_formed}")
    assert verdict(8, ok, detail, capsys)


# --- criterion 9: throughput -----------------------------------------------------------------


def test_criterion_09_single_organ_throughput(capsys):
    item = labeled(7)
    color_model = train_color_from_items([item], REG, per_class=2000, seed=0, epochs=20)
    net = default_architecture(0)
    times = []
    for _ in range(2):
        t0 = time.perf_counter()
        segment_organ(item.image, OrganId.LIVER, REG, color_model, net)
        times.append(time.perf_counter() - t0)
    best = min(times)
    n = len(spec_candidates(REG[OrganId.LIVER], 10))
    detail = (f"Liver, stride 10, {n} candidates: best of 2 runs {best:.2f} s "
              f"(runs {', '.join(f'{t:.2f}' for t in times)}; need <= 10 s)")
    assert verdict(9, best <= 10.0, detail, capsys)


# --- criterion 10: sweep sanity -----------------------------------------------------------------


SWEEP_STAGES = (2, 3, 4)
SWEEP_EPOCHS = (0, 10, 40, 70)


def test_criterion_10_sweep(capsys):
    train_items = [labeled(s) for s in range(500, 516)]
    color_model = train_color_from_items(train_items, REG, seed=0)
    x, y = shape_training_set(train_items, REG, color_model, seed=0)
    del train_items
    eval_items = [labeled(s) for s in range(516, 532)]
    xe, ye = shape_eval_set(eval_items, REG, color_model, seed=1)
    evalset = SweepEval(xe, ye, [(it.image, it.masks) for it in eval_items[:2]], REG, color_model)
    del eval_items
    rows, text = sweep(snapshot_trainer(x, y), SWEEP_STAGES, SWEEP_EPOCHS, evalset, seed=0)
    with capsys.disabled():
        print("\n" + text)
    control = [r for r in rows if r.epochs == 0]
    chance_tol = 3 * math.sqrt((1 / 6) * (5 / 6) / len(ye))
    control_ok = all(abs(r.shape_accuracy - 1 / 6) <= chance_tol for r in control)
    best = max(r.mean_dice for r in rows if r.epochs > 0)
    target = next(r for r in rows if (r.conv_stages, r.epochs) == (3, 70))
    near_best = best - target.mean_dice <= 0.05
    detail = (f"0-epoch accuracies {', '.join(f'{r.shape_accuracy:.3f}' for r in control)} "
              f"(1/6 +/- {chance_tol:.3f}); (3,70) dice {target.mean_dice:.3f} vs grid max {best:.3f} (within 0.05)")
    assert verdict(10, control_ok and near_best, detail, capsys)
