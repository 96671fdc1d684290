"""Acceptance suite: one or more tests per criterion, tagged with ``criterion``.

The terminal summary prints one ``[PASS]``/``[FAIL]`` line per criterion.
"""

from __future__ import annotations

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy.stats import spearmanr

from conftest import tiny_model
from histoxai import attribution, cli, dataset, evaluation, models, training
from histoxai.config import ATTRIBUTION_METHODS, AugmentationPolicy, HyperParams, SmoothGradParams
from histoxai.preprocess import build_pipeline, load_image
from histoxai.synthetic import quadrant_image, quadrant_slices, write_blob_dataset
from oracles import brute_force_metrics, central_difference_grad, patch_occlusion

METRIC_ORACLE = "metric oracle equivalence (200 instances, 1e-9; uniform log loss = ln 5; < 10 s)"
JACCARD_F1 = "Jaccard-F1 identity (per class, 1e-9; published benchmark rows consistent)"
GRADIENT = "gradient correctness (finite differences, >= 20 pixels, rel err < 1e-2, < 30 s)"
IDENTITIES = "attribution identities (smoothgrad sigma 0, faster_scorecam top_k=K, layercam = gradcam; < 1 min)"
LOCALIZATION = "localization (>= 8/10 mass > 0.5; occlusion Spearman > 0.5; < 2 min)"
TRAINING = "training sanity (>= 0.95 train acc in 10 epochs < 5 min; overfit < 0.01; lr in [1e-4, 1e-3])"
DETERMINISM = "determinism (trace, metric files, attribution maps)"
END_TO_END = "end-to-end CLI (exit 0, full run layout, 8-tile grid, < 10 min)"
LC25000 = "optional LC25000 subset row (not gating)"

REFERENCE_ROWS = {  # published LC25000 benchmark rows: (accuracy, precision, recall, f1, jaccard, log loss)
    "Xception": (0.9989, 0.9989, 0.9989, 0.9989, 0.9978, 0.0384),
    "DenseNet201": (0.9971, 0.9971, 0.9971, 0.9971, 0.9942, 0.1057),
    "ResNet101": (0.9928, 0.9928, 0.9928, 0.9928, 0.9858, 0.2595),
    "InceptionV3": (0.9904, 0.9907, 0.9904, 0.9904, 0.9812, 0.3460),
    "DenseNet121": (0.9896, 0.9898, 0.9896, 0.9896, 0.9795, 0.3749),
    "DenseNet169": (0.9888, 0.9888, 0.9888, 0.9888, 0.9781, 0.4037),
    "ResNet152": (0.9885, 0.9886, 0.9885, 0.9885, 0.9774, 0.4133),
    "InceptionResNetV2": (0.9765, 0.9765, 0.9765, 0.9765, 0.9547, 0.8458),
}


def random_instances(count: int = 200, seed: int = 99):
    """Random (labels, probability rows) pairs, N <= 50, 5 classes; a third have argmax ties."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        n = int(rng.integers(1, 51))
        labels = rng.integers(0, 5, size=n)
        if i % 3 == 0:
            counts = rng.integers(0, 4, size=(n, 5)).astype(np.float64)
            counts[counts.sum(axis=1) == 0, 0] = 1.0
            proba = counts / counts.sum(axis=1, keepdims=True)
        else:
            proba = rng.dirichlet(np.full(5, 0.7), size=n)
        out.append((labels, proba))
    return out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@pytest.mark.criterion(METRIC_ORACLE)
def test_metric_suite_matches_brute_force_oracle():
    start = time.perf_counter()
    worst = 0.0
    for i, (labels, proba) in enumerate(random_instances()):
        averaging = ("weighted", "macro", "micro")[i % 3]
        got = evaluation.metric_suite(labels, proba, averaging)
        want = brute_force_metrics(labels.tolist(), proba.tolist(), averaging)
        for key in evaluation.METRIC_KEYS:
            worst = max(worst, abs(getattr(got, key) - want[key]))
            assert getattr(got, key) == pytest.approx(want[key], abs=1e-9), (i, averaging, key)
    elapsed = time.perf_counter() - start
    print(f"max |suite - oracle| = {worst:.3e} over 200 instances in {elapsed:.2f} s")
    assert elapsed < 10.0


@pytest.mark.criterion(METRIC_ORACLE)
def test_uniform_predictor_log_loss_is_ln5():
    labels = np.arange(40) % 5
    report = evaluation.metric_suite(labels, np.full((40, 5), 0.2))
    assert report.log_loss == pytest.approx(math.log(5), abs=1e-6)
    assert report.log_loss == pytest.approx(1.60944, abs=1e-5)


@pytest.mark.criterion(JACCARD_F1)
def test_per_class_jaccard_equals_f1_over_two_minus_f1():
    checked = 0
    for labels, proba in random_instances():
        report = evaluation.metric_suite(labels, proba, class_order=list("abcde"))
        oracle = brute_force_metrics(labels.tolist(), proba.tolist())
        for k, m in enumerate(report.per_class.values()):
            assert m.jaccard == pytest.approx(m.f1 / (2 - m.f1), abs=1e-9)
            assert m.jaccard == pytest.approx(oracle["per_class_jaccard"][k], abs=1e-9)
            checked += 1
    assert checked == 1000


@pytest.mark.criterion(JACCARD_F1)
@pytest.mark.parametrize("model_name", list(REFERENCE_ROWS))
def test_reference_rows_are_consistent_with_the_identity(model_name):
    f1, jaccard = REFERENCE_ROWS[model_name][3], REFERENCE_ROWS[model_name][4]
    # aggregate Jaccard is an average of per-class F/(2-F), a convex map, so it
    # sits at or above F/(2-F) of the aggregate F1 (up to 4-decimal rounding)
    assert jaccard >= f1 / (2 - f1) - 5e-5
    assert abs(jaccard - f1 / (2 - f1)) < 1e-3


# ---------------------------------------------------------------------------
# attribution
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def probe_images(blob_manifest):
    pipe = build_pipeline("test", models.TINY_INPUT_SIZE)
    recs = blob_manifest.split("test")[:10]
    return [pipe.prepare(load_image(blob_manifest.abspath(r))) for r in recs]


@pytest.mark.criterion(GRADIENT)
def test_vanilla_saliency_matches_finite_differences(trained_tiny, probe_images):
    model, _ = trained_tiny
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    pixels = [tuple(int(v) for v in rng.integers(0, 32, size=2)) for _ in range(24)]
    image = probe_images[0]
    target = int(np.argmax(models.predict_proba(model, [image])[0]))

    analytic = attribution.input_gradient(model, image, target)
    numeric = central_difference_grad(model, image.data, target, pixels, step=1e-3)
    sal_analytic = np.array([np.abs(analytic[r, c]).max() for r, c in pixels])
    sal_numeric = np.abs(numeric).max(axis=1)
    rel = np.abs(sal_analytic - sal_numeric) / np.maximum(np.maximum(sal_analytic, sal_numeric), 1e-12)
    print(f"saliency rel err over {len(pixels)} pixels: max {rel.max():.2e}, median {np.median(rel):.2e}")
    assert rel.max() < 1e-2

    # the map the method returns is exactly the normalized max-abs gradient
    sal = attribution.vanilla_saliency(model, image, target)
    want, _, _ = attribution.normalize_map(np.abs(analytic).max(axis=-1))
    np.testing.assert_array_equal(sal.values, want)
    assert time.perf_counter() - start < 30.0


@pytest.mark.criterion(IDENTITIES)
def test_smoothgrad_with_zero_noise_is_vanilla_saliency(trained_tiny, probe_images):
    model, _ = trained_tiny
    for image in probe_images[:3]:
        for reduction in ("max_abs", "mean_abs"):
            vanilla = attribution.vanilla_saliency(model, image, "predicted", reduction)
            smooth = attribution.smoothgrad(model, image, "predicted",
                                            SmoothGradParams(n_samples=7, noise_sigma=0.0, seed=1), reduction)
            assert smooth.values.tobytes() == vanilla.values.tobytes()


@pytest.mark.criterion(IDENTITIES)
def test_faster_scorecam_with_all_channels_is_scorecam(trained_tiny, probe_images):
    model, _ = trained_tiny
    k = model.target_shape[2]
    for image in probe_images[:3]:
        full = attribution.scorecam(model, image, "predicted")
        for top_k in (k, k + 5):
            fast = attribution.faster_scorecam(model, image, "predicted", top_k=top_k)
            assert fast.values.tobytes() == full.values.tobytes()
            assert fast.raw_range == full.raw_range


@pytest.mark.criterion(IDENTITIES)
def test_layercam_equals_gradcam_for_spatially_constant_positive_gradients(probe_images):
    # GAP -> linear head with positive weights: d logit_c / d A_k(i,j) = w_ck / (h*w)
    # at every location, so both methods weight A_k by the same constant
    start = time.perf_counter()
    model = tiny_model(seed=5)
    with torch.no_grad():
        model.head.weight.abs_()
    for image in probe_images:
        for c in range(5):
            g = attribution.gradcam(model, image, c)
            lc = attribution.layercam(model, image, c)
            assert np.max(np.abs(g.values - lc.values)) < 1e-6
    assert time.perf_counter() - start < 60.0


def quadrant_corpus():
    rng = np.random.default_rng(5)
    return [(i % 5, i % 4, quadrant_image(i % 5, i % 4, rng)) for i in range(10)]


@pytest.mark.criterion(LOCALIZATION)
def test_gradcam_mass_in_evidence_quadrant(trained_tiny):
    model, _ = trained_tiny
    start = time.perf_counter()
    fractions = []
    for c, q, img in quadrant_corpus():
        amap = attribution.gradcam(model, img, c)
        rows, cols = quadrant_slices(q)
        fractions.append(float(amap.values[rows, cols].sum() / max(amap.values.sum(), 1e-12)))
    hits = sum(f > 0.5 for f in fractions)
    print("quadrant mass fractions:", np.round(fractions, 3).tolist(), f"-> {hits}/10")
    assert hits >= 8
    assert time.perf_counter() - start < 120.0


@pytest.mark.criterion(LOCALIZATION)
def test_gradcam_agrees_with_occlusion_oracle(trained_tiny):
    model, _ = trained_tiny
    start = time.perf_counter()
    rhos = []
    for c, _q, img in quadrant_corpus():
        amap = attribution.gradcam(model, img, c)
        drops, boxes = patch_occlusion(model, img, c, patch=8, fill=0.5)
        mass = [amap.values[r:r + 8, k:k + 8].sum() for r, k in boxes]
        rhos.append(spearmanr(drops, mass)[0])
    print("per-image Spearman:", np.round(rhos, 3).tolist(), f"mean {np.mean(rhos):.3f}")
    assert np.mean(rhos) > 0.5
    assert time.perf_counter() - start < 120.0


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@pytest.mark.criterion(TRAINING)
def test_tiny_net_reaches_train_accuracy(trained_tiny):
    _, trace = trained_tiny
    assert len(trace.epochs) == 10
    final = trace.epochs[-1].train_accuracy
    total = sum(r.wall_time for r in trace.epochs)
    print(f"final train accuracy {final:.4f}, training time {total:.1f} s")
    assert final >= 0.95
    assert total < 300.0


@pytest.mark.criterion(TRAINING)
def test_single_batch_overfit(blob_manifest):
    model = tiny_model(seed=2, class_order=blob_manifest.classes)
    data = training.SplitData(blob_manifest, "train", build_pipeline("test", models.TINY_INPUT_SIZE))
    # two images of each class
    idx = [i for c in range(5) for i in np.flatnonzero(data.labels == c)[:2]]
    x, y = data.batch(idx)
    assert sorted(y.tolist()) == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]
    losses = training.overfit_single_batch(model, x, y, steps=200)
    print(f"overfit loss: first {losses[0]:.4f}, last {losses[-1]:.5f}")
    assert losses[-1] < 0.01


@pytest.mark.criterion(TRAINING)
def test_learning_rate_stays_within_stated_bounds(trained_tiny):
    _, trace = trained_tiny
    lrs = [r.learning_rate for r in trace.epochs]
    assert all(1e-4 <= lr <= 1e-3 for lr in lrs)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))

    # drive the configured scheduler through a long plateau: it decays and clamps at the floor
    hp = HyperParams(epochs=60, seed=0)
    optimizer, scheduler = training._make_optimizer(tiny_model(), hp)
    seen = []
    for _ in range(60):
        scheduler.step(1.0)
        seen.append(optimizer.param_groups[0]["lr"])
    assert all(1e-4 - 1e-12 <= lr <= 1e-3 for lr in seen)
    assert all(b <= a for a, b in zip(seen, seen[1:]))
    assert seen[-1] == pytest.approx(1e-4)


# ---------------------------------------------------------------------------
# CLI, end to end and determinism
# ---------------------------------------------------------------------------


def _run_pipeline(root: Path, run_dir: Path, config: Path) -> tuple[list[int], float]:
    start = time.perf_counter()
    codes = [
        cli.main(["prepare", "--config", str(config), "--run-dir", str(run_dir)]),
        cli.main(["train", "--run-dir", str(run_dir)]),
        cli.main(["evaluate", "--run-dir", str(run_dir)]),
        cli.main(["explain", "--run-dir", str(run_dir), "--sample", "test:0"]),
    ]
    return codes, time.perf_counter() - start


@pytest.fixture(scope="module")
def two_runs(blob_root, tmp_path_factory):
    base = tmp_path_factory.mktemp("runs")
    config = base / "config.yaml"
    config.write_text(
        f"seed: 11\n"
        f"dataset:\n  root: {blob_root}\n"
        f"model:\n  backbone: TinyTestNet\n  pretrained: false\n"
        f"preprocess:\n  input_size: [32, 32]\n"
        f"visualization:\n  tile_size: 96\n",
        encoding="utf-8",
    )
    return [(base / name, *_run_pipeline(blob_root, base / name, config)) for name in ("a", "b")]


@pytest.mark.criterion(END_TO_END)
def test_cli_pipeline_produces_the_run_layout(two_runs):
    run_dir, codes, elapsed = two_runs[0]
    print(f"pipeline exit codes {codes}, {elapsed:.1f} s")
    assert codes == [0, 0, 0, 0]
    assert elapsed < 600.0
    for rel in ("config.yaml", "manifest.tsv", "train/best.pt", "train/state.pt", "train/trace.tsv",
                "train/summary.json", "eval/metrics.json", "eval/metrics.csv", "eval/confusion.png"):
        assert (run_dir / rel).is_file(), rel
    explain = run_dir / "explain"
    overlays = [p for p in explain.glob("*.png") if not p.name.endswith("__grid.png")]
    assert sorted(p.name.split("__")[1] for p in overlays) == sorted(ATTRIBUTION_METHODS)
    assert len(list((explain / "maps").glob("*.map"))) == 7
    (grid,) = explain.glob("*__grid.png")
    from PIL import Image

    with Image.open(grid) as im:
        # 8 tiles, 4 columns -> 2 rows of 96-px tiles
        assert im.size == (4 * 96, 2 * 96)


@pytest.mark.criterion(DETERMINISM)
def test_identical_runs_produce_identical_artifacts(two_runs):
    (a, *_), (b, *_) = two_runs
    same = ["manifest.tsv", "train/trace.tsv", "eval/metrics.json", "eval/metrics.csv", "eval/confusion.png"]
    same += [str(p.relative_to(a)) for p in sorted((a / "explain").rglob("*")) if p.is_file()]
    for rel in same:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    assert len(same) == 20


@pytest.mark.criterion(DETERMINISM)
def test_attribution_map_hashes_repeat(trained_tiny, probe_images):
    model, _ = trained_tiny
    for method in ATTRIBUTION_METHODS:
        first = attribution.explain(model, probe_images[1], method).digest()
        second = attribution.explain(model, probe_images[1], method).digest()
        assert first == second, method


@pytest.mark.criterion(DETERMINISM)
def test_training_trace_hash_repeats(tmp_path):
    root = tmp_path / "data"
    write_blob_dataset(root, per_class=12, seed=4)
    manifest = dataset.split_manifest(dataset.scan_dataset(root), (0.5, 0.25, 0.25), seed=1)
    digests = []
    for _ in range(2):
        model = tiny_model(seed=3, class_order=manifest.classes)
        _, trace = training.train(model, manifest, HyperParams(epochs=3, seed=8),
                                  AugmentationPolicy(seed=8))
        digests.append(trace.digest())
    assert digests[0] == digests[1]


# ---------------------------------------------------------------------------
# optional: real data
# ---------------------------------------------------------------------------


@pytest.mark.criterion(LC25000)
def test_lc25000_subset_row(tmp_path):
    root = os.environ.get("HISTOXAI_LC25000_ROOT")
    if not root:
        pytest.skip("set HISTOXAI_LC25000_ROOT to an LC25000 root to run this check")
    subset = tmp_path / "subset"
    for class_dir in sorted(p for p in Path(root).iterdir() if p.is_dir()):
        (subset / class_dir.name).mkdir(parents=True)
        files = sorted(f for f in class_dir.iterdir() if f.suffix.lower() in dataset.IMAGE_SUFFIXES)[:500]
        for f in files:
            (subset / class_dir.name / f.name).symlink_to(f)
    backbone = os.environ.get("HISTOXAI_LC25000_BACKBONE", "DenseNet121")
    config = tmp_path / "config.yaml"
    config.write_text(f"dataset:\n  root: {subset}\nmodel:\n  backbone: {backbone}\n  pretrained: false\n"
                      f"training:\n  epochs: {int(os.environ.get('HISTOXAI_LC25000_EPOCHS', '2'))}\n",
                      encoding="utf-8")
    run = tmp_path / "run"
    assert cli.main(["prepare", "--config", str(config), "--run-dir", str(run)]) == 0
    assert cli.main(["train", "--run-dir", str(run)]) == 0
    assert cli.main(["evaluate", "--run-dir", str(run)]) == 0
    report = evaluation.load_report(run / "eval" / "metrics.json")
    assert evaluation.table_rows([report])[0] == list(evaluation.TABLE_COLUMNS)
    assert all(0.0 <= v <= 1.0 for k, v in report.row().items() if k != "log_loss")
