"""Acceptance gate: one test per shipped criterion.

Each test prints a single PASS/FAIL line naming the criterion before
asserting, so a plain pytest run doubles as the checklist.
"""

from __future__ import annotations

import math
import time

import numpy as np

from polyfuse import (
    FoldBundle,
    ModalityShape,
    ModelConfig,
    TrainSpec,
    analytic_param_count,
    build,
    cross_entropy,
    generate_synthetic,
    grad_check,
    macro_f1,
    mae,
    make_folds,
    multiclass_accuracy,
    run_cv,
    train_fold,
    with_trial_dims,
)
from polyfuse.numerics import cross_entropy_with_logits

from conftest import tiny_bundle


def verdict(num: int, desc: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {num}: {desc} [{detail}]"
    print(line)
    assert ok, line


def reference_config(modalities: int, *, layers: int = 5, heads: int = 3,
                     model_dim: int = 30, ffn_size: int = 120) -> ModelConfig:
    shapes = tuple(ModalityShape(2, 16) for _ in range(modalities))
    return ModelConfig(
        modalities=shapes, cm_layers=layers, sa_layers=layers,
        cm_heads=heads, sa_heads=heads, model_dim=model_dim,
        ffn_size=ffn_size, num_classes=3,
    ).validate()


def total_params(modalities: int, **dims) -> int:
    return analytic_param_count(reference_config(modalities, **dims)).total


def bundles_for(dataset, folds) -> list[FoldBundle]:
    return [
        FoldBundle(
            train=dataset.subset(f.train_idx),
            val=dataset.subset(f.val_idx),
            test=dataset.subset(f.test_idx),
        )
        for f in folds
    ]


def test_criterion_1_layer_scaling_deltas():
    start = time.perf_counter()
    six = [total_params(6, layers=layers) for layers in range(1, 6)]
    steps = [b - a for a, b in zip(six, six[1:])]
    four_delta = total_params(4, layers=5) - total_params(4, layers=1)
    # The closed form must agree with exact enumeration of built weights.
    built_ok = all(
        build(reference_config(6, layers=layers), seed=0).params.total_count
        == total for layers, total in ((1, six[0]), (5, six[4]))
    )
    elapsed = time.perf_counter() - start
    ok = (
        six[4] - six[0] == 313_320
        and all(step == 78_330 for step in steps)
        and four_delta == 223_800
        and built_ok
        and elapsed < 1.0
    )
    verdict(1, "layer-count parameter deltas reproduce the cost table",
            ok, f"5-vs-1 delta {six[4] - six[0]:,}, per-step {steps[0]:,}, "
                f"4-stream delta {four_delta:,}, {elapsed:.3f}s")


def test_criterion_2_head_count_invariance():
    analytic = {h: total_params(6, heads=h) for h in (1, 2, 3)}
    built = {
        h: build(reference_config(6, heads=h), seed=0).params.total_count
        for h in (1, 2, 3)
    }
    ok = len(set(analytic.values())) == 1 and len(set(built.values())) == 1 \
        and analytic[1] == built[1]
    verdict(2, "head count never changes the parameter total",
            ok, f"analytic {sorted(set(analytic.values()))}, "
                f"built {sorted(set(built.values()))}")


def test_criterion_3_ffn_width_linearity():
    totals = {f: total_params(6, ffn_size=f) for f in (30, 60, 90, 120)}
    span = totals[120] - totals[30]
    consecutive = {totals[f + 30] - totals[f] for f in (30, 60, 90)}
    ok = (
        span == 192_150
        and span == 90 * 2_135
        and consecutive == {30 * 2_135}
    )
    verdict(3, "feed-forward width scales parameters linearly",
            ok, f"120-vs-30 delta {span:,}, slope {span // 90:,}/unit")


def test_criterion_4_combined_row_subtotals():
    # Each row pins layers at 1 and applies a subset of local optima; the
    # published totals split into 7 blocks plus a width-dependent front-end
    # and head overhead (3,580 scalars at width 30, 2,020 at width 18).
    rows = [
        ("narrow layers + heads", 30, 120, 78_330, 3_580, 81_910),
        ("narrow layers + width", 18, 120, 28_854, 2_020, 30_874),
        ("narrow layers + ffn", 30, 30, 39_900, 3_580, 43_480),
        ("all four narrowed", 18, 30, 14_868, 2_020, 16_888),
    ]
    failures = []
    for name, dim, ffn, blocks_expected, overhead, published in rows:
        breakdown = analytic_param_count(
            reference_config(6, layers=1, heads=1, model_dim=dim, ffn_size=ffn)
        )
        if breakdown.blocks_subtotal != blocks_expected:
            failures.append(f"{name}: blocks {breakdown.blocks_subtotal:,}")
        if blocks_expected + overhead != published:
            failures.append(f"{name}: total {blocks_expected + overhead:,}")
    verdict(4, "combined-knob block subtotals reconcile with published totals",
            not failures, "; ".join(failures) or "4 rows exact")


def test_criterion_5_end_to_end_gradient_check():
    start = time.perf_counter()
    config = ModelConfig(
        modalities=(ModalityShape(1, 4), ModalityShape(1, 4)),
        cm_layers=1, sa_layers=1, cm_heads=1, sa_heads=1,
        model_dim=6, ffn_size=30, dropout=0.0, num_classes=3,
    ).validate()
    model = build(config, seed=0)
    rng = np.random.default_rng(0)
    xs = [rng.standard_normal((2, 1, 4)) for _ in range(2)]
    ys = np.array([0, 2])

    def loss_fn():
        return cross_entropy_with_logits(model.forward(xs, train_flag=False), ys)

    worst = grad_check(loss_fn, model.params, eps=1e-5)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 30.0
    verdict(5, "full-model gradients match finite differences",
            ok, f"max relative error {worst:.3e}, {elapsed:.1f}s")


def test_criterion_6_fold_protocol_properties():
    start = time.perf_counter()
    rng = np.random.default_rng(20260816)
    failures = 0
    for _ in range(200):
        n = int(rng.integers(20, 400))
        seed = int(rng.integers(0, 2**31 - 1))
        folds = make_folds(n, seed)
        per_split = n // 10
        everything = frozenset(range(n))
        for f in folds:
            val, test = set(f.val_idx), set(f.test_idx)
            train = set(f.train_idx)
            if len(val) != per_split or len(test) != per_split:
                failures += 1
            if train & val or train & test or val & test:
                failures += 1
            if train | val | test != everything:
                failures += 1
        if not np.array_equal(folds[9].test_idx, folds[0].val_idx):
            failures += 1
    elapsed = time.perf_counter() - start
    ok = failures == 0 and elapsed < 5.0
    verdict(6, "fold splits are disjoint, exhaustive, and wrap around",
            ok, f"200 (N, seed) pairs, {failures} violations, {elapsed:.2f}s")


def test_criterion_7_metric_hand_oracles():
    labels = lambda *xs: np.array(xs, dtype=np.int64)  # noqa: E731
    uniform = np.full((6, 3), 1.0 / 3.0)
    checks = {
        "accuracy 7/9": abs(
            multiclass_accuracy(labels(0, 1, 1), labels(0, 1, 2), 3) - 7 / 9
        ),
        "f1 1/2": abs(
            macro_f1(labels(0, 1, 0, 1), labels(0, 0, 1, 1), 2) - 0.5
        ),
        "cross-entropy ln 3": abs(
            cross_entropy(uniform, labels(0, 1, 2, 0, 1, 2)) - math.log(3)
        ),
        "mae 4/9": abs(
            mae(uniform, labels(0, 1, 2, 0, 1, 2)) - 4 / 9
        ),
    }
    bad = {name: err for name, err in checks.items() if not err < 1e-12}
    verdict(7, "metric implementations match hand-computed cases",
            not bad, f"max abs error {max(checks.values()):.2e}")


def test_criterion_8_learning_on_separable_data():
    start = time.perf_counter()
    base = ModelConfig(
        modalities=(ModalityShape(2, 32), ModalityShape(2, 32)), num_classes=3,
    )
    config = with_trial_dims(base, layers=1, heads=1, model_dim=12, ffn_size=30)
    spec = TrainSpec().validate()
    folds = make_folds(500, seed=0)

    separable = generate_synthetic(
        num_modalities=2, num_samples=500, num_classes=3,
        channels=2, timesteps=32, separability=5.0, seed=0,
    )
    learned = run_cv(config, spec, bundles_for(separable, folds))

    shuffled = generate_synthetic(
        num_modalities=2, num_samples=500, num_classes=3,
        channels=2, timesteps=32, separability=0.0, seed=0,
    )
    control = run_cv(config, spec, bundles_for(shuffled, folds))

    # A constant predictor scores (1 + (n-1)^2) / n^2 under one-vs-rest
    # accuracy; for three balanced classes that chance level is 5/9.
    chance = 5 / 9
    elapsed = time.perf_counter() - start
    ok = (
        learned.mean.accuracy >= 0.85
        and abs(control.mean.accuracy - chance) <= 0.15
        and elapsed < 600.0
    )
    verdict(8, "separable synthetic data is learned, unseparable is not",
            ok, f"accuracy {learned.mean.accuracy:.3f}, "
                f"control {control.mean.accuracy:.3f} vs chance {chance:.3f}, "
                f"{elapsed:.0f}s")


def test_criterion_9_depth_cost_direction():
    bundle = tiny_bundle(num_samples=40)
    base = ModelConfig(
        modalities=(ModalityShape(1, 8), ModalityShape(1, 8)),
        num_classes=3, dropout=0.0,
    )
    spec = TrainSpec(epochs=2, batch_size=16, seed=0).validate()
    reports = {}
    for layers in (1, 5):
        config = with_trial_dims(base, layers=layers, heads=3,
                                 model_dim=30, ffn_size=120)
        _, _, reports[layers] = train_fold(config, spec, bundle)
    shallow, deep = reports[1], reports[5]
    ok = (
        shallow.train_time_h < deep.train_time_h
        and shallow.memory_mb < deep.memory_mb
        and shallow.params < deep.params
    )
    verdict(9, "the shallow model costs strictly less on every resource axis",
            ok, f"time {shallow.train_time_h:.2e}h vs {deep.train_time_h:.2e}h, "
                f"memory {shallow.memory_mb:.1f}MB vs {deep.memory_mb:.1f}MB, "
                f"params {shallow.params:,} vs {deep.params:,}")
