import json

import numpy as np
import pytest

from randes import ConfigError, StructuralMismatchError, compress
from randes.harness import (
    DEFAULT_LAMBDA_GRID, EXTENDED_LAMBDA_GRID, Arch, TrainConfig, baseline_task_arithmetic,
    baseline_weight_averaging, evaluate, evaluate_all, forward, generate_tasks, grid_search_lambda, run_ablation,
    sweep_csv, write_sweep,
)
from randes.tensormap import bit_equal


def test_grids():
    assert DEFAULT_LAMBDA_GRID == (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    assert len(EXTENDED_LAMBDA_GRID) == 20 and EXTENDED_LAMBDA_GRID[-1] == 2.0


def test_generation_is_deterministic(small_suite):
    again = generate_tasks(seed=7, T=3, arch=small_suite.arch, train=small_suite.train)
    assert bit_equal(again.base, small_suite.base)
    assert all(bit_equal(a, b) for a, b in zip(again.finetuned, small_suite.finetuned))


def test_single_task_training_helps():
    ts = generate_tasks(seed=3, T=1, arch=Arch(blocks=2, width=8), train=TrainConfig(steps=30))
    task = ts.tasks[0]
    x, y = task.x_train, task.y_train
    base_loss = np.mean((forward(ts.base, x, ts.arch) - y) ** 2)
    tuned_loss = np.mean((forward(ts.finetuned[0], x, ts.arch) - y) ** 2)
    assert tuned_loss < base_loss


def test_generation_errors():
    with pytest.raises(ConfigError):
        generate_tasks(T=0)
    with pytest.raises(ConfigError):
        generate_tasks(T=1, arch=Arch(blocks=1))


def test_frozen_layers_untouched(small_suite):
    for m in small_suite.finetuned:
        assert np.array_equal(m["input.proj"], small_suite.base["input.proj"])
        assert np.array_equal(m["output.head"], small_suite.base["output.head"])


def test_suite_finetunes_halve_heldout_mse(suite):
    for task, model in zip(suite.tasks, suite.finetuned):
        assert -evaluate(model, task, suite.arch) < 0.5 * -evaluate(suite.base, task, suite.arch)


def test_suite_frozen_goldens(suite):
    # values produced by this trainer on the fixed suite, frozen
    base = np.mean(evaluate_all([suite.base] * suite.T, suite, "test"))
    tuned = np.mean(evaluate_all(suite.finetuned, suite, "test"))
    assert base == pytest.approx(-1.0921711432, abs=1e-6)
    assert tuned == pytest.approx(-0.0029709917, abs=1e-6)


def test_evaluate_behaviour(small_suite):
    t = small_suite.tasks[0]
    a = small_suite.arch
    assert evaluate(small_suite.finetuned[0], t, a) > evaluate(small_suite.base, t, a)
    assert evaluate(small_suite.base, t, a) == evaluate(small_suite.base, t, a)
    store = compress(small_suite.base, small_suite.models()[:1], lam=1.0)
    assert evaluate(store.retrieve("task0"), t, a) == evaluate(small_suite.finetuned[0], t, a)
    with pytest.raises(StructuralMismatchError):
        evaluate(small_suite.base.subset(["input.proj"]), t, a)
    with pytest.raises(ConfigError):
        t.split("train")


def test_baselines(small_suite):
    m = small_suite.finetuned[0]
    assert bit_equal(baseline_weight_averaging([m, m, m]), m)
    assert bit_equal(baseline_task_arithmetic(small_suite.base, [m], 1.0), m)
    a, b = small_suite.finetuned[:2]
    base = small_suite.base
    ta = baseline_task_arithmetic(base, [a, b], 0.3)
    for name in base:
        b64 = base[name].astype(np.float64)
        acc = 0.3 * (a[name].astype(np.float64) - b64) + np.zeros_like(b64)
        acc = 0.3 * (b[name].astype(np.float64) - b64) + acc
        assert np.array_equal(ta[name], (b64 + acc).astype(np.float32))
    with pytest.raises(ConfigError):
        baseline_weight_averaging([])
    with pytest.raises(ConfigError):
        baseline_task_arithmetic(base, [], 1.0)


def test_identity_store_equals_task_arithmetic(small_suite):
    store = compress(small_suite.base, small_suite.models(), lam=0.4, mode="identity")
    ta = baseline_task_arithmetic(small_suite.base, small_suite.finetuned, 0.4)
    assert bit_equal(store.merged(), ta)
    for tid in small_suite.task_ids:
        assert bit_equal(store.retrieve(tid), ta)


def test_lambda_sweep_shape_and_ties(small_suite):
    r = grid_search_lambda(small_suite, "srsf", with_analysis=False)
    assert [p.setting for p in r.points] == list(DEFAULT_LAMBDA_GRID)
    best = max(p.avg_metric for p in r.points)
    assert r.argbest == min(p.setting for p in r.points if p.avg_metric == best)
    single = grid_search_lambda(small_suite, "srsf", [0.3], with_analysis=False)
    assert single.argbest == 0.3


@pytest.mark.parametrize("grid", [[], [0.2, 0.1], [0.0, 0.5], [0.1, 0.1]])
def test_bad_grids(small_suite, grid):
    with pytest.raises(ConfigError):
        grid_search_lambda(small_suite, "srsf", grid)


def test_single_task_lambda_monotone():
    ts = generate_tasks(seed=5, T=1, arch=Arch(blocks=2, width=8), train=TrainConfig(steps=40))
    r = grid_search_lambda(ts, "srsf", with_analysis=False)
    metrics = [p.avg_metric for p in r.points]
    assert all(b >= a for a, b in zip(metrics, metrics[1:]))
    assert r.points[-1].avg_metric == evaluate(ts.finetuned[0], ts.tasks[0], ts.arch, "val")


def test_ablations(small_suite):
    modes = run_ablation(small_suite, "mode", lam=0.5)
    assert [p.setting for p in modes.points] == ["identity", "shuffle", "shift", "rsf", "srsf", "rd"]
    ta = baseline_task_arithmetic(small_suite.base, small_suite.finetuned, 0.5)
    assert modes.point("identity").per_task_metric == dict(
        zip(small_suite.task_ids, evaluate_all([ta] * 3, small_suite, "val")))
    skips = run_ablation(small_suite, "skip_rate", settings=[1, 2, 3], lam=0.5)
    counts = [p.selected_layers for p in skips.points]
    assert counts == sorted(counts, reverse=True) and len(set(counts)) == 3
    sel = run_ablation(small_suite, "selector", lam=0.5)
    assert sel.point("mlp").selected_layers == sel.point("attn").selected_layers == 3
    with pytest.raises(ConfigError):
        run_ablation(small_suite, "mode", settings=["dct"], lam=0.5)
    with pytest.raises(ConfigError):
        run_ablation(small_suite, "depth", lam=0.5)


def test_sweep_artifacts_are_deterministic(small_suite, tmp_path):
    r1 = grid_search_lambda(small_suite, "shuffle", [0.2, 0.4])
    r2 = grid_search_lambda(small_suite, "shuffle", [0.2, 0.4])
    p1 = write_sweep(r1, tmp_path / "a")
    p2 = write_sweep(r2, tmp_path / "b")
    for a, b in zip(p1, p2):
        assert a.read_bytes() == b.read_bytes()
    data = json.loads(p1[0].read_text())
    assert data["axis"] == "lambda" and len(data["points"]) == 2
    rows = sweep_csv(r1).splitlines()
    assert len(rows) == 1 + 2 * (small_suite.T + 1)
    assert rows[small_suite.T + 1].split(",")[2] == "avg"
