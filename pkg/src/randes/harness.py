"""Desk-scale experiments: synthetic fine-tunes, baselines, lambda sweeps, ablations.

The synthetic "model zoo" is a residual MLP

    h0 = x W_in^T
    h_k = h_{k-1} + tanh(h_{k-1} A_k^T) M_k^T      k = 1..K
    y = h_K W_out^T

with ``A_k`` named ``blocks.{k}.attn.proj`` and ``M_k`` named
``blocks.{k}.mlp.fc``. Each task is a linear teacher ``y = W_t x`` where
``W_t`` mixes a component shared by all tasks with a task-specific one
(independent teachers by default). Fine-tuning is full-batch gradient descent
on the block matrices only; the input projection and readout stay frozen,
like a shared embedding and head.

Everything is a pure function of the seeds passed in.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .analysis import interference_norm_direct, pairwise_cosine_stats
from .errors import ConfigError, StructuralMismatchError
from .schema import TargetSelector, select_targets
from .store import SuperpositionStore, compress
from .tensormap import TensorMap, check_structure, sub

DEFAULT_LAMBDA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 11))
EXTENDED_LAMBDA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 21))
RUN_SEEDS = (42, 43, 44)
CONTEXT_MODES = {"identity": "identity", "rbd": "rsf", "rd": "rd"}
ABLATION_AXES = ("mode", "skip_rate", "selector", "context")


@dataclass(frozen=True)
class Arch:
    blocks: int = 4
    width: int = 32
    in_dim: int = 4  # inputs live in a low-dimensional subspace of the stream
    out_dim: int = 4

    def shapes(self) -> dict[str, tuple[int, int]]:
        shapes = {"input.proj": (self.width, self.in_dim), "output.head": (self.out_dim, self.width)}
        for k in range(1, self.blocks + 1):
            shapes[f"blocks.{k}.attn.proj"] = (self.width, self.width)
            shapes[f"blocks.{k}.mlp.fc"] = (self.width, self.width)
        return shapes


@dataclass(frozen=True)
class TrainConfig:
    n_train: int = 512
    n_heldout: int = 256
    steps: int = 300
    lr: float = 0.1
    shared_weight: float = 0.0  # fraction of teacher variance shared by all tasks


@dataclass
class SyntheticTask:
    task_id: str
    index: int
    teacher: np.ndarray  # (out_dim, in_dim)
    input_spec: dict
    x_train: np.ndarray = field(repr=False)
    y_train: np.ndarray = field(repr=False)
    x_heldout: np.ndarray = field(repr=False)
    y_heldout: np.ndarray = field(repr=False)

    def split(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        half = len(self.x_heldout) // 2
        if which == "all":
            return self.x_heldout, self.y_heldout
        if which == "val":
            return self.x_heldout[:half], self.y_heldout[:half]
        if which == "test":
            return self.x_heldout[half:], self.y_heldout[half:]
        raise ConfigError(f"unknown split {which!r}")


@dataclass
class SyntheticTaskSet:
    seed: int
    arch: Arch
    train: TrainConfig
    tasks: list[SyntheticTask]
    base: TensorMap
    finetuned: list[TensorMap]

    @property
    def T(self) -> int:
        return len(self.tasks)

    @property
    def task_ids(self) -> list[str]:
        return [t.task_id for t in self.tasks]

    def models(self) -> list[tuple[str, TensorMap]]:
        return list(zip(self.task_ids, self.finetuned))

    def deltas(self) -> list[TensorMap]:
        b = self.base.astype(np.float64)
        return [sub(m.astype(np.float64), b) for m in self.finetuned]


# -- network ---------------------------------------------------------------


def _block_names(arch: Arch, k: int) -> tuple[str, str]:
    return f"blocks.{k}.attn.proj", f"blocks.{k}.mlp.fc"


def forward(model, x: np.ndarray, arch: Arch) -> np.ndarray:
    p = {name: np.asarray(v, dtype=np.float64) for name, v in model.items()}
    h = x @ p["input.proj"].T
    for k in range(1, arch.blocks + 1):
        a_name, m_name = _block_names(arch, k)
        h = h + np.tanh(h @ p[a_name].T) @ p[m_name].T
    return h @ p["output.head"].T


def _mse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((pred - target) ** 2))


def _train_blocks(params: dict, x: np.ndarray, y: np.ndarray, arch: Arch, cfg: TrainConfig) -> dict:
    """Full-batch gradient descent on the block matrices (float64, deterministic)."""
    params = {k: v.copy() for k, v in params.items()}
    scale = 2.0 / (y.shape[0] * y.shape[1])
    for _ in range(cfg.steps):
        hs = [x @ params["input.proj"].T]
        us = []
        for k in range(1, arch.blocks + 1):
            a_name, m_name = _block_names(arch, k)
            u = np.tanh(hs[-1] @ params[a_name].T)
            us.append(u)
            hs.append(hs[-1] + u @ params[m_name].T)
        g = scale * (hs[-1] @ params["output.head"].T - y) @ params["output.head"]
        grads = {}
        for k in range(arch.blocks, 0, -1):
            a_name, m_name = _block_names(arch, k)
            u = us[k - 1]
            grads[m_name] = g.T @ u
            ga = (g @ params[m_name]) * (1.0 - u * u)
            grads[a_name] = ga.T @ hs[k - 1]
            g = g + ga @ params[a_name]
        for name, grad in grads.items():
            params[name] -= cfg.lr * grad
    return params


def generate_tasks(
    seed: int = 42,
    T: int = 8,
    arch: Optional[Arch] = None,
    train: Optional[TrainConfig] = None,
) -> SyntheticTaskSet:
    """Seeded base network plus ``T`` fine-tunes on distinct linear teachers."""
    arch = arch or Arch()
    train = train or TrainConfig()
    if T < 1:
        raise ConfigError("T must be >= 1")
    if arch.blocks < 2:
        raise ConfigError("need at least 2 blocks (shuffling permutes across blocks)")
    rng = np.random.default_rng(seed)

    base = {}
    for name, (rows, cols) in sorted(arch.shapes().items()):
        std = 1.0 / math.sqrt(cols)
        if name.endswith("mlp.fc"):
            std *= 0.5
        base[name] = rng.standard_normal((rows, cols)) * std
    base = {k: v.astype(np.float32).astype(np.float64) for k, v in base.items()}

    shared = rng.standard_normal((arch.out_dim, arch.in_dim)) / math.sqrt(arch.in_dim)
    a, b = math.sqrt(train.shared_weight), math.sqrt(1.0 - train.shared_weight)
    tasks, finetuned = [], []
    for i in range(T):
        teacher = a * shared + b * rng.standard_normal((arch.out_dim, arch.in_dim)) / math.sqrt(arch.in_dim)
        x_train = rng.standard_normal((train.n_train, arch.in_dim))
        x_held = rng.standard_normal((train.n_heldout, arch.in_dim))
        task = SyntheticTask(
            task_id=f"task{i}",
            index=i,
            teacher=teacher,
            input_spec={"kind": "gaussian", "mean": 0.0, "std": 1.0, "dim": arch.in_dim},
            x_train=x_train,
            y_train=x_train @ teacher.T,
            x_heldout=x_held,
            y_heldout=x_held @ teacher.T,
        )
        tasks.append(task)
        tuned = _train_blocks(base, task.x_train, task.y_train, arch, train)
        finetuned.append(TensorMap(tuned, dtype=np.float32))
    return SyntheticTaskSet(seed, arch, train, tasks, TensorMap(base, dtype=np.float32), finetuned)


def evaluate(model, task: SyntheticTask, arch: Arch, split: str = "all") -> float:
    """Negative held-out MSE (higher is better)."""
    expected = arch.shapes()
    for name, shape in expected.items():
        if name not in model or tuple(model[name].shape) != shape:
            raise StructuralMismatchError(f"model does not fit the architecture at {name!r}")
    x, y = task.split(split)
    return -_mse(forward(model, x, arch), y)


def evaluate_all(models: Sequence, taskset: SyntheticTaskSet, split: str) -> list[float]:
    return [evaluate(m, t, taskset.arch, split) for m, t in zip(models, taskset.tasks)]


# -- baselines --------------------------------------------------------------


def baseline_weight_averaging(models: Sequence[TensorMap]) -> TensorMap:
    if not models:
        raise ConfigError("need at least one model to average")
    for m in models[1:]:
        check_structure(models[0], m)
    out = {}
    for name in models[0]:
        acc = np.zeros(models[0][name].shape, dtype=np.float64)
        for m in models:
            acc += m[name]
        out[name] = (acc / len(models)).astype(models[0][name].dtype)
    return TensorMap(out, dtype=None)


def baseline_task_arithmetic(base: TensorMap, models: Sequence[TensorMap], lam: float) -> TensorMap:
    """``theta_0 + lam * sum_i (theta_i - theta_0)``, accumulated like the store does."""
    if not models:
        raise ConfigError("need at least one model")
    out = {}
    for m in models:
        check_structure(base, m)
    for name in base:
        b = base[name].astype(np.float64)
        acc = np.zeros(b.shape, dtype=np.float64)
        for m in models:
            acc = lam * (m[name].astype(np.float64) - b) + acc
        out[name] = (b + acc).astype(base[name].dtype)
    return TensorMap(out, dtype=None)


# -- sweeps -----------------------------------------------------------------


@dataclass
class SweepPoint:
    setting: Union[float, int, str]
    per_task_metric: dict[str, float]  # validation split
    avg_metric: float  # validation split, used for argbest
    test_per_task_metric: dict[str, float]
    test_avg_metric: float
    mean_abs_cosine: Optional[float]
    interference_norm: float  # median over tasks
    selected_layers: int
    mode: str
    lam: float


@dataclass
class SweepResult:
    axis: str
    points: list[SweepPoint]
    argbest: Union[float, int, str]
    config: dict = field(default_factory=dict)

    def point(self, setting) -> SweepPoint:
        for p in self.points:
            if p.setting == setting:
                return p
        raise KeyError(setting)

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "argbest": self.argbest,
            "config": self.config,
            "points": [asdict(p) for p in self.points],
        }


def _argbest(points: Sequence[SweepPoint]):
    # settings arrive in increasing / caller order; strict > keeps the first of ties
    best = points[0]
    for p in points[1:]:
        if p.avg_metric > best.avg_metric:
            best = p
    return best.setting


def evaluate_store(
    taskset: SyntheticTaskSet,
    lam: float,
    mode: str,
    global_seed: int,
    selector: Optional[TargetSelector] = None,
    setting=None,
    with_analysis: bool = True,
) -> SweepPoint:
    """One compress + retrieve-all + evaluate pass."""
    selector = selector or TargetSelector()
    store = compress(
        taskset.base, taskset.models(), lam, mode, global_seed, selector, allow_nonorthogonal=True
    )
    retrieved = [store.retrieve(tid) for tid in taskset.task_ids]
    val = evaluate_all(retrieved, taskset, "val")
    test = evaluate_all(retrieved, taskset, "test")
    mean_abs, interference = None, 0.0
    if with_analysis:
        deltas = taskset.deltas()
        transforms = [store.transform(tid) for tid in taskset.task_ids]
        if len(deltas) > 1:
            mean_abs = pairwise_cosine_stats(deltas, transforms).mean_abs
        interference = statistics.median(
            interference_norm_direct(deltas, transforms, i, lam) for i in range(len(deltas))
        )
    return SweepPoint(
        setting=setting if setting is not None else lam,
        per_task_metric=dict(zip(taskset.task_ids, val)),
        avg_metric=float(np.mean(val)),
        test_per_task_metric=dict(zip(taskset.task_ids, test)),
        test_avg_metric=float(np.mean(test)),
        mean_abs_cosine=mean_abs,
        interference_norm=interference,
        selected_layers=0 if mode == "identity" else len(_quiet_targets(store, selector)),
        mode=mode,
        lam=lam,
    )


def _quiet_targets(store: SuperpositionStore, selector: TargetSelector) -> list[str]:
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return select_targets(store.schema, selector)


def _check_grid(grid: Sequence[float]) -> list[float]:
    grid = [float(g) for g in grid]
    if not grid:
        raise ConfigError("lambda grid is empty")
    if any(g <= 0 for g in grid):
        raise ConfigError("lambda grid values must be > 0")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError("lambda grid must be strictly increasing")
    return grid


def grid_search_lambda(
    taskset: SyntheticTaskSet,
    mode: str = "srsf",
    grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
    global_seed: int = 42,
    selector: Optional[TargetSelector] = None,
    with_analysis: bool = True,
) -> SweepResult:
    grid = _check_grid(grid)
    points = [
        evaluate_store(taskset, lam, mode, global_seed, selector, lam, with_analysis) for lam in grid
    ]
    config = {"mode": mode, "global_seed": global_seed, "data_seed": taskset.seed, "T": taskset.T}
    return SweepResult("lambda", points, _argbest(points), config)


def run_ablation(
    taskset: SyntheticTaskSet,
    axis: str,
    settings: Optional[Sequence] = None,
    lam: Optional[float] = None,
    mode: str = "srsf",
    global_seed: int = 42,
) -> SweepResult:
    """One pass per setting at a fixed lambda (default: best lambda for srsf)."""
    defaults = {
        "mode": ("identity", "shuffle", "shift", "rsf", "srsf", "rd"),
        "skip_rate": (1, 2, 3, 4),
        "selector": ("all", "mlp", "attn"),
        "context": ("identity", "rbd", "rd"),
    }
    if axis not in defaults:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    settings = list(settings if settings is not None else defaults[axis])
    unknown = [s for s in settings if s not in defaults[axis]]
    if unknown or not settings:
        raise ConfigError(f"unknown {axis} settings: {unknown or settings}")
    if lam is None:
        lam = float(grid_search_lambda(taskset, "srsf", global_seed=global_seed, with_analysis=False).argbest)

    points = []
    for s in settings:
        point_mode, selector = mode, TargetSelector()
        if axis == "mode":
            point_mode = s
        elif axis == "context":
            point_mode = CONTEXT_MODES[s]
        elif axis == "skip_rate":
            selector = TargetSelector(skip_rate=int(s))
        elif axis == "selector":
            selector = TargetSelector(mode=s)
        points.append(evaluate_store(taskset, lam, point_mode, global_seed, selector, s))
    config = {"mode": mode, "lambda": lam, "global_seed": global_seed, "data_seed": taskset.seed, "T": taskset.T}
    return SweepResult(axis, points, _argbest(points), config)


# -- artifacts ----------------------------------------------------------------

SWEEP_CSV_FIELDS = ("axis", "setting", "task_id", "val_metric", "test_metric",
                    "mean_abs_cosine", "interference_norm")


def sweep_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for p in result.points:
        for tid in p.per_task_metric:
            w.writerow({"axis": result.axis, "setting": p.setting, "task_id": tid,
                        "val_metric": repr(p.per_task_metric[tid]),
                        "test_metric": repr(p.test_per_task_metric[tid]),
                        "mean_abs_cosine": "", "interference_norm": ""})
        w.writerow({"axis": result.axis, "setting": p.setting, "task_id": "avg",
                    "val_metric": repr(p.avg_metric), "test_metric": repr(p.test_avg_metric),
                    "mean_abs_cosine": "" if p.mean_abs_cosine is None else repr(p.mean_abs_cosine),
                    "interference_norm": repr(p.interference_norm)})
    return buf.getvalue()


def write_sweep(result: SweepResult, out_dir: Union[str, Path], stem: str = "sweep") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path, csv_path = out_dir / f"{stem}.json", out_dir / f"{stem}.csv"
    json_path.write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    csv_path.write_text(sweep_csv(result), encoding="utf-8")
    return json_path, csv_path
