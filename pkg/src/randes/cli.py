"""Command-line front end: ``randes <command> ...``.

Exit codes are part of the interface: 0 ok, 2 structural mismatch, 3 I/O or
unreadable file, 4 bad configuration / unknown task, 5 integrity failure.
Human-readable progress goes to stderr; JSON results go to stdout or files.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

from . import checkpoint as ckpt
from . import harness
from .analysis import interference_report, pairwise_cosine_stats, reports_to_csv
from .errors import (
    ConfigError,
    DegenerateInputError,
    DuplicateTaskError,
    FormatError,
    IntegrityError,
    InvalidSpecError,
    NumericalDegeneracyError,
    SchemaError,
    StructuralMismatchError,
    UnknownTaskError,
)
from .schema import NamingConvention, TargetSelector, parse_schema
from .store import DELTA_NAME, MANIFEST_NAME, LoraAdapter, compress, load
from .transforms import MODES, TransformSpec, materialize

log = logging.getLogger("randes")

EXIT_OK, EXIT_STRUCTURAL, EXIT_IO, EXIT_CONFIG, EXIT_INTEGRITY = 0, 2, 3, 4, 5
LOCK_NAME = ".lock"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, IntegrityError):
        return EXIT_INTEGRITY
    if isinstance(exc, (StructuralMismatchError, SchemaError)):
        return EXIT_STRUCTURAL
    if isinstance(exc, (FormatError, OSError)):
        return EXIT_IO
    if isinstance(exc, (ConfigError, DuplicateTaskError, UnknownTaskError, InvalidSpecError,
                        NumericalDegeneracyError, DegenerateInputError, ValueError)):
        return EXIT_CONFIG
    raise exc


def _parse_pairs(values: Optional[list[str]], flag: str) -> list[tuple[str, Path]]:
    pairs, seen = [], set()
    for raw in values or []:
        task_id, sep, path = raw.partition("=")
        if not sep or not task_id or not path:
            raise ConfigError(f"{flag} expects id=path, got {raw!r}")
        if task_id in seen:
            raise DuplicateTaskError(f"task id {task_id!r} given twice")
        seen.add(task_id)
        pairs.append((task_id, Path(path)))
    return pairs


def _require_files(*paths: Path) -> None:
    for p in paths:
        if not Path(p).is_file():
            raise FileNotFoundError(f"no such file: {p}")


def parse_grid(spec: str) -> list[float]:
    """``"a:b:step"`` -> inclusive list, e.g. ``"0.1:1.0:0.1"`` -> 10 points."""
    try:
        start, stop, step = (float(v) for v in spec.split(":"))
    except ValueError as exc:
        raise ConfigError(f"grid must look like a:b:step, got {spec!r}") from exc
    if step <= 0 or stop < start:
        raise ConfigError(f"empty grid {spec!r}")
    count = int(round((stop - start) / step)) + 1
    return [round(start + k * step, 10) for k in range(count)]


def _selector(args) -> TargetSelector:
    return TargetSelector(mode=args.selector, skip_rate=args.skip_rate)


def _naming(args) -> Optional[NamingConvention]:
    if getattr(args, "naming", None):
        _require_files(args.naming)
        return NamingConvention.from_dict(json.loads(Path(args.naming).read_text()))
    return None


def _load_inputs(models, loras, lora_scale):
    items = []
    for task_id, path in models:
        items.append((task_id, ckpt.load_checkpoint(path), "full_finetune"))
    for task_id, path in loras:
        items.append((task_id, LoraAdapter.from_tensors(ckpt.load_checkpoint(path), lora_scale), "lora"))
    return items


def _store_bytes(directory: Path) -> int:
    return sum((directory / n).stat().st_size for n in (DELTA_NAME, MANIFEST_NAME))


@contextmanager
def _advisory_lock(directory: Path):
    # Best effort only: concurrent writers to one store are the caller's problem.
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        owned = True
    except FileExistsError:
        log.warning("store %s looks locked by another process (%s exists)", directory, lock)
        owned = False
    try:
        yield
    finally:
        if owned:
            lock.unlink(missing_ok=True)


def _emit(payload) -> None:
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# -- commands ------------------------------------------------------------------


def cmd_compress(args) -> int:
    models = _parse_pairs(args.model, "--model")
    loras = _parse_pairs(args.lora, "--lora")
    if {t for t, _ in models} & {t for t, _ in loras}:
        raise DuplicateTaskError("a task id appears under both --model and --lora")
    _require_files(args.base, *(p for _, p in models + loras))
    out = Path(args.out)
    base = ckpt.load_checkpoint(args.base)
    store = compress(
        base,
        _load_inputs(models, loras, args.lora_scale),
        lam=args.lam,
        mode=args.mode,
        global_seed=args.seed,
        selector=_selector(args),
        naming=_naming(args),
        base_sha256=ckpt.file_sha256(args.base),
        allow_nonorthogonal=args.allow_nonorthogonal,
    )
    with _advisory_lock(out):
        store.save(out)
    total = _store_bytes(out)
    for e in store.registry:
        print(f"{e.task_id}: index {e.model_index}, |delta| = {e.delta_norm:.6g}", file=sys.stderr)
    print(f"store {out}: {total} bytes ({len(store.registry)} tasks)", file=sys.stderr)
    _emit({"store": str(out), "store_bytes": total,
           "tasks": [e.to_dict() for e in store.registry]})
    return EXIT_OK


def cmd_retrieve(args) -> int:
    _require_files(args.base, Path(args.store) / MANIFEST_NAME, Path(args.store) / DELTA_NAME)
    store = load(args.store, args.base)
    store.entry(args.task)
    start = time.perf_counter()
    model = store.retrieve(args.task)
    elapsed_ms = (time.perf_counter() - start) * 1e3
    size = ckpt.save_checkpoint(model, args.out)
    print(f"retrieved {args.task} in {elapsed_ms:.2f} ms -> {args.out} ({size} bytes)", file=sys.stderr)
    _emit({"task_id": args.task, "out": str(args.out), "retrieval_ms": elapsed_ms})
    return EXIT_OK


def _single_model(args) -> tuple[str, object, str]:
    models = _parse_pairs(args.model, "--model")
    loras = _parse_pairs(args.lora, "--lora")
    if len(models) + len(loras) != 1:
        raise ConfigError("give exactly one --model or --lora")
    _require_files(*(p for _, p in models + loras))
    return _load_inputs(models, loras, args.lora_scale)[0]


def cmd_add(args) -> int:
    _require_files(args.base, Path(args.store) / MANIFEST_NAME)
    task_id, model, kind = _single_model(args)
    store = load(args.store, args.base)
    store.add(task_id, model, kind)
    with _advisory_lock(Path(args.store)):
        store.save(args.store)
    print(f"added {task_id} as index {store.entry(task_id).model_index}", file=sys.stderr)
    _emit(store.manifest())
    return EXIT_OK


def cmd_remove(args) -> int:
    _require_files(args.base, Path(args.store) / MANIFEST_NAME)
    task_id, model, _ = _single_model(args)
    store = load(args.store, args.base)
    store.remove(task_id, model)
    with _advisory_lock(Path(args.store)):
        store.save(args.store)
    print(f"removed {task_id}", file=sys.stderr)
    _emit(store.manifest())
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.store:
        _require_files(args.base, Path(args.store) / MANIFEST_NAME)
        pairs = _parse_pairs(args.model, "--model")
        _require_files(*(p for _, p in pairs))
        store = load(args.store, args.base)
        given = dict(pairs)
        missing = [t for t in store.task_ids if t not in given]
        if missing:
            raise ConfigError(f"analysis needs every stored model; missing --model for {missing}")
        ids = store.task_ids
        deltas = [store.delta_of(ckpt.load_checkpoint(given[t])) for t in ids]
        transforms = [store.transform(t) for t in ids]
        lam, schema = store.lam, store.schema
    else:
        pairs = _parse_pairs(args.delta, "--delta")
        if not pairs:
            raise ConfigError("analyze needs --store with --model, or --delta files")
        _require_files(*(p for _, p in pairs))
        ids = [t for t, _ in pairs]
        deltas = [ckpt.load_checkpoint(p) for _, p in pairs]
        schema = parse_schema(deltas[0], _naming(args))
        transforms = [
            materialize(TransformSpec(args.mode, args.seed, i, _selector(args)), schema)
            for i in range(len(deltas))
        ]
        lam = args.lam
    targets = [ids.index(args.task)] if args.task else range(len(ids))
    if args.task and args.task not in ids:
        raise UnknownTaskError(f"unknown task id {args.task!r}")
    reports = [interference_report(ids, deltas, transforms, i, lam) for i in targets]
    payload = {"reports": [r.to_dict() for r in reports]}
    if len(deltas) > 1:
        stats = pairwise_cosine_stats(deltas, transforms, schema)
        payload["pairwise"] = {"matrix": stats.matrix, "mean": stats.mean,
                               "mean_abs": stats.mean_abs, "max_abs": stats.max_abs}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        (out / "report.csv").write_text(reports_to_csv(reports))
    for r in reports:
        print(f"{r.task_id}: direct {r.direct_norm:.6g}  expansion {r.expansion_norm:.6g}", file=sys.stderr)
    _emit(payload)
    return EXIT_OK


def _sweep_from_config(cfg: dict, grid_override: Optional[list[float]]) -> harness.SweepResult:
    data = dict(cfg.get("data", {}))
    arch_keys = {"blocks", "width", "in_dim", "out_dim"}
    train_keys = {"n_train", "n_heldout", "steps", "lr", "shared_weight"}
    unknown = set(data) - arch_keys - train_keys - {"seed", "tasks"}
    if unknown:
        raise ConfigError(f"unknown data keys {sorted(unknown)}")
    taskset = harness.generate_tasks(
        seed=int(data.get("seed", 42)),
        T=int(data.get("tasks", 8)),
        arch=harness.Arch(**{k: data[k] for k in arch_keys & set(data)}),
        train=harness.TrainConfig(**{k: data[k] for k in train_keys & set(data)}),
    )
    axis = cfg.get("axis", "lambda")
    mode = cfg.get("mode", "srsf")
    global_seed = int(cfg.get("global_seed", 42))
    if axis == "lambda":
        grid = cfg.get("grid", harness.DEFAULT_LAMBDA_GRID)
        if isinstance(grid, str):
            grid = parse_grid(grid)
        if grid_override:
            grid = grid_override
        return harness.grid_search_lambda(taskset, mode, grid, global_seed)
    return harness.run_ablation(taskset, axis, cfg.get("settings"), cfg.get("lambda"), mode, global_seed)


def cmd_sweep(args) -> int:
    _require_files(args.config)
    try:
        cfg = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"sweep config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("sweep config must be a JSON object")
    result = _sweep_from_config(cfg, parse_grid(args.grid) if args.grid else None)
    out = Path(args.out or cfg.get("out", "."))
    json_path, csv_path = harness.write_sweep(result, out)
    print(f"{result.axis} sweep: {len(result.points)} points, best {result.argbest} "
          f"-> {json_path}, {csv_path}", file=sys.stderr)
    _emit({"axis": result.axis, "argbest": result.argbest, "json": str(json_path), "csv": str(csv_path)})
    return EXIT_OK


def cmd_generate(args) -> int:
    taskset = harness.generate_tasks(args.seed, args.tasks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt.save_checkpoint(taskset.base, out / "base.rdck")
    for tid, model in taskset.models():
        ckpt.save_checkpoint(model, out / f"{tid}.rdck")
    print(f"wrote base + {taskset.T} fine-tunes to {out}", file=sys.stderr)
    _emit({"base": str(out / "base.rdck"),
           "models": {tid: str(out / f"{tid}.rdck") for tid in taskset.task_ids}})
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _transform_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=MODES, default="srsf")
    p.add_argument("--seed", type=int, default=42, help="global seed (model i uses seed + i)")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--selector", choices=("all", "mlp", "attn"), default="all")
    p.add_argument("--skip-rate", type=int, default=1)
    p.add_argument("--naming", help="JSON file with a naming-convention override")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", action="append", metavar="ID=PATH", help="full fine-tune checkpoint")
    p.add_argument("--lora", action="append", metavar="ID=PATH",
                   help="checkpoint of <layer>.lora_A / <layer>.lora_B factors")
    p.add_argument("--lora-scale", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="randes", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("compress", help="superpose fine-tunes into a store directory")
    p.add_argument("--base", required=True)
    _model_flags(p)
    p.add_argument("--out", "--store", dest="out", required=True)
    _transform_flags(p)
    p.add_argument("--allow-nonorthogonal", action="store_true", help="permit --mode rd")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("retrieve", help="rebuild one fine-tune from a store")
    p.add_argument("--store", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_retrieve)

    for name, func in (("add", cmd_add), ("remove", cmd_remove)):
        p = sub.add_parser(name, help=f"{name} one model in place (hot swap)")
        p.add_argument("--store", required=True)
        p.add_argument("--base", required=True)
        _model_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("analyze", help="interference norms and cosine statistics")
    p.add_argument("--store")
    p.add_argument("--base")
    p.add_argument("--model", action="append", metavar="ID=PATH")
    p.add_argument("--delta", action="append", metavar="ID=PATH", help="delta checkpoint")
    p.add_argument("--task")
    p.add_argument("--out")
    _transform_flags(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="run a harness sweep from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", help="override lambda grid, a:b:step")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("generate", help="write a synthetic base + fine-tunes")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--tasks", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("RANDES_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already printed
        return int(exc.code or 0)
    if args.command == "analyze" and args.store and not args.base:
        print("randes analyze: --store needs --base", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except Exception as exc:  # mapped to the stable exit codes
        code = _exit_code(exc)
        print(f"randes {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
