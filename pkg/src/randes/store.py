"""Compress many fine-tunes into one superposed delta and retrieve them again.

    multi_delta = lam * sum_i O_i (theta_i - theta_0)
    retrieve(i) = theta_0 + O_i^-1 multi_delta

Individual deltas are never kept. Each task is remembered only by its seed
index, so adding a model costs one manifest line; removing one requires the
caller to hand the original checkpoint back.

The superposed delta is accumulated and persisted in float64 even though
checkpoints are float32: a float32 ``theta_0 + (theta_i - theta_0)`` does not
round-trip for entries that move close to zero, and single-model retrieval
has to be bit-exact.
"""

from __future__ import annotations

import json
import math
import os
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import checkpoint as ckpt
from .errors import (
    ConfigError,
    DuplicateTaskError,
    FormatError,
    IntegrityError,
    InvalidSpecError,
    StructuralMismatchError,
    UnknownTaskError,
)
from .prng import PRNG_VERSION
from .schema import ModelSchema, NamingConvention, TargetSelector, parse_schema
from .tensormap import TensorMap, axpy, check_structure, frobenius_norm, sub, zeros_like
from .transforms import (
    MaterializedTransform,
    TransformSpec,
    apply,
    apply_inverse,
    materialize,
    parse_mode,
)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
DELTA_NAME = "multi_delta.rdck"
SOURCE_KINDS = ("full_finetune", "lora")
NORM_TOLERANCE = 1e-4
LORA_A_SUFFIX = ".lora_A"
LORA_B_SUFFIX = ".lora_B"


@dataclass(frozen=True)
class LoraAdapter:
    """Low-rank update ``scale * B @ A`` per layer; unlisted layers are unchanged."""

    factors: Mapping[str, tuple[np.ndarray, np.ndarray]]  # name -> (B [m, r], A [r, n])
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError("lora_scale must be > 0")

    @classmethod
    def from_tensors(cls, tm: Mapping, scale: float = 1.0) -> "LoraAdapter":
        """Read ``<layer>.lora_A`` / ``<layer>.lora_B`` pairs from a checkpoint."""
        factors = {}
        for name in tm:
            if name.endswith(LORA_A_SUFFIX):
                layer = name[: -len(LORA_A_SUFFIX)]
                b_name = layer + LORA_B_SUFFIX
                if b_name not in tm:
                    raise StructuralMismatchError(f"LoRA factor {b_name!r} missing")
                factors[layer] = (np.asarray(tm[b_name]), np.asarray(tm[name]))
            elif name.endswith(LORA_B_SUFFIX):
                if name[: -len(LORA_B_SUFFIX)] + LORA_A_SUFFIX not in tm:
                    raise StructuralMismatchError(f"LoRA factor {name!r} has no matching lora_A")
            else:
                raise StructuralMismatchError(f"tensor {name!r} is not a LoRA factor")
        return cls(factors, scale)

    def dense_delta(self, base: Mapping[str, np.ndarray]) -> TensorMap:
        out = {name: np.zeros(arr.shape, dtype=np.float64) for name, arr in base.items()}
        for layer in sorted(self.factors):
            B, A = self.factors[layer]
            if layer not in base:
                raise StructuralMismatchError(f"LoRA layer {layer!r} not in base checkpoint")
            B = np.asarray(B, dtype=np.float64)
            A = np.asarray(A, dtype=np.float64)
            target = base[layer].shape
            if B.ndim != 2 or A.ndim != 2 or B.shape[1] != A.shape[0] or (B.shape[0], A.shape[1]) != target:
                raise StructuralMismatchError(
                    f"LoRA factors for {layer!r}: B{B.shape} @ A{A.shape} does not give {target}"
                )
            out[layer] = self.scale * (B @ A)
        return TensorMap._wrap(out)


@dataclass(frozen=True)
class TaskEntry:
    task_id: str
    spec: TransformSpec
    delta_norm: float
    source_kind: str = "full_finetune"
    lora_scale: float = 1.0

    @property
    def model_index(self) -> int:
        return self.spec.model_index

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "model_index": self.model_index,
            "source_kind": self.source_kind,
            "lora_scale": self.lora_scale,
            "delta_norm": self.delta_norm,
        }


ModelInput = Union[TensorMap, LoraAdapter]


class SuperpositionStore:
    """Base checkpoint + superposed multi-delta + seed registry.

    Retrieval is read-only and safe from many threads at once; ``add`` and
    ``remove`` mutate in place and need exclusive access.
    """

    def __init__(
        self,
        base: TensorMap,
        lam: float,
        mode: str = "srsf",
        global_seed: int = 42,
        selector: Optional[TargetSelector] = None,
        naming: Optional[NamingConvention] = None,
        base_sha256: Optional[str] = None,
        allow_nonorthogonal: bool = False,
    ):
        lam = float(lam)
        if not (0.0 < lam <= 2.0) or math.isnan(lam):
            raise ConfigError(f"lambda must lie in (0, 2], got {lam}")
        self.mode = parse_mode(mode)
        if self.mode == "rd" and not allow_nonorthogonal:
            raise InvalidSpecError("mode 'rd' is not orthogonal; pass allow_nonorthogonal=True")
        self.base = base
        self.lam = lam
        self.global_seed = int(global_seed)
        self.selector = selector or TargetSelector()
        self.naming = naming or NamingConvention()
        self.base_sha256 = base_sha256 or ckpt.bytes_sha256(ckpt.encode(base))
        self.format_version = FORMAT_VERSION
        self.included = [n for n in base if not self.naming.is_excluded(n)]
        self.schema: ModelSchema = parse_schema(base.subset(self.included), self.naming)
        self.multi_delta = zeros_like(base.subset(self.included), dtype=np.float64)
        self.registry: list[TaskEntry] = []
        self._transforms: dict[int, MaterializedTransform] = {}
        self._base64 = base.subset(self.included).astype(np.float64)
        # validates the selector against the schema up front
        TransformSpec(self.mode, self.global_seed, 0, self.selector)

    # -- registry ---------------------------------------------------------

    @property
    def task_ids(self) -> list[str]:
        return [e.task_id for e in self.registry]

    def entry(self, task_id: str) -> TaskEntry:
        for e in self.registry:
            if e.task_id == task_id:
                return e
        raise UnknownTaskError(f"unknown task id {task_id!r}")

    def make_spec(self, model_index: int) -> TransformSpec:
        return TransformSpec(self.mode, self.global_seed, model_index, self.selector)

    def transform_for_index(self, model_index: int) -> MaterializedTransform:
        t = self._transforms.get(model_index)
        if t is None:
            t = materialize(self.make_spec(model_index), self.schema)
            self._transforms[model_index] = t
        return t

    def transform(self, task_id: str) -> MaterializedTransform:
        return self.transform_for_index(self.entry(task_id).model_index)

    # -- deltas -------------------------------------------------------------

    def delta_of(self, model: ModelInput, source_kind: str = "full_finetune") -> TensorMap:
        """float64 delta ``theta_i - theta_0`` over the superposed layers."""
        if source_kind not in SOURCE_KINDS:
            raise ConfigError(f"unknown source_kind {source_kind!r}")
        if isinstance(model, LoraAdapter):
            if source_kind != "lora":
                raise ConfigError("a LoraAdapter must be added with source_kind='lora'")
            return model.dense_delta(self._base64)
        if source_kind == "lora":
            raise ConfigError("source_kind='lora' needs a LoraAdapter")
        check_structure(model, self.base)
        return sub(model.subset(self.included).astype(np.float64), self._base64)

    # -- mutation -----------------------------------------------------------

    def add(
        self,
        task_id: str,
        model: ModelInput,
        source_kind: Optional[str] = None,
        model_index: Optional[int] = None,
    ) -> "SuperpositionStore":
        if any(e.task_id == task_id for e in self.registry):
            raise DuplicateTaskError(f"task id {task_id!r} already in the store")
        if source_kind is None:
            source_kind = "lora" if isinstance(model, LoraAdapter) else "full_finetune"
        if model_index is None:
            model_index = max((e.model_index for e in self.registry), default=-1) + 1
        elif any(e.model_index == model_index for e in self.registry):
            raise ConfigError(f"model_index {model_index} already in use")
        delta = self.delta_of(model, source_kind)
        t = self.transform_for_index(model_index)
        self.multi_delta = axpy(self.lam, apply(t, delta), self.multi_delta)
        lora_scale = float(model.scale) if isinstance(model, LoraAdapter) else 1.0
        self.registry.append(
            TaskEntry(task_id, self.make_spec(model_index), frobenius_norm(delta), source_kind, lora_scale)
        )
        return self

    def remove(self, task_id: str, model: ModelInput) -> "SuperpositionStore":
        """Subtract a task's contribution, recomputed from its original checkpoint."""
        entry = self.entry(task_id)
        delta = self.delta_of(model, entry.source_kind)
        norm = frobenius_norm(delta)
        deviation = abs(norm - entry.delta_norm) / max(entry.delta_norm, 1e-30)
        if deviation > NORM_TOLERANCE:
            raise IntegrityError(
                f"checkpoint for {task_id!r} has delta norm {norm:.6g}, "
                f"store recorded {entry.delta_norm:.6g}"
            )
        t = self.transform_for_index(entry.model_index)
        self.multi_delta = axpy(-self.lam, apply(t, delta), self.multi_delta)
        self.registry = [e for e in self.registry if e.task_id != task_id]
        return self

    # -- retrieval ----------------------------------------------------------

    def retrieve(self, task_id: str) -> TensorMap:
        t = self.transform(task_id)
        restored = apply_inverse(t, self.multi_delta)
        out = dict(self.base.items())
        for name in self.included:
            out[name] = (self._base64[name] + restored[name]).astype(self.base[name].dtype)
        return TensorMap._wrap(out, self.base.metadata)

    def merged(self) -> TensorMap:
        """``theta_0 + multi_delta`` (the single merged model, e.g. Task Arithmetic)."""
        out = dict(self.base.items())
        for name in self.included:
            out[name] = (self._base64[name] + self.multi_delta[name]).astype(self.base[name].dtype)
        return TensorMap._wrap(out, self.base.metadata)

    # -- persistence --------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "format_version": self.format_version,
            "prng_version": PRNG_VERSION,
            "lambda": self.lam,
            "mode": self.mode,
            "global_seed": self.global_seed,
            "selector": self.selector.to_dict(),
            "naming_convention": self.naming.to_dict(),
            "base_sha256": self.base_sha256,
            "tasks": [e.to_dict() for e in self.registry],
        }

    def save(self, directory: Union[str, os.PathLike]) -> dict[str, int]:
        """Write ``multi_delta.rdck`` and ``manifest.json``; returns their sizes."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        sizes = {DELTA_NAME: ckpt.save_checkpoint(self.multi_delta, directory / DELTA_NAME)}
        text = json.dumps(self.manifest(), indent=2) + "\n"
        tmp = directory / (MANIFEST_NAME + ".tmp")
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, directory / MANIFEST_NAME)
        sizes[MANIFEST_NAME] = len(text.encode("utf-8"))
        return sizes


def compress(
    base: TensorMap,
    models: Iterable[Sequence],
    lam: float = 1.0,
    mode: str = "srsf",
    global_seed: int = 42,
    selector: Optional[TargetSelector] = None,
    naming: Optional[NamingConvention] = None,
    base_sha256: Optional[str] = None,
    allow_nonorthogonal: bool = False,
) -> SuperpositionStore:
    """Superpose ``models`` (``(task_id, model[, source_kind])`` tuples) onto ``base``.

    Model ``i`` in input order gets seed index ``i`` and is summed in that order.
    """
    store = SuperpositionStore(
        base, lam, mode, global_seed, selector, naming, base_sha256, allow_nonorthogonal
    )
    models = list(models)
    seen = set()
    for item in models:
        if item[0] in seen:
            raise DuplicateTaskError(f"task id {item[0]!r} given twice")
        seen.add(item[0])
    for item in models:
        task_id, model = item[0], item[1]
        source_kind = item[2] if len(item) > 2 else None
        store.add(task_id, model, source_kind)
    return store


def read_manifest(directory: Union[str, os.PathLike]) -> dict:
    path = Path(directory) / MANIFEST_NAME
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt manifest {path}: {exc}") from exc
    if not isinstance(manifest, dict):
        raise FormatError(f"corrupt manifest {path}")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(
            f"manifest format_version {manifest.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    if manifest.get("prng_version") != PRNG_VERSION:
        raise FormatError(
            f"manifest prng_version {manifest.get('prng_version')!r}, expected {PRNG_VERSION}"
        )
    return manifest


def load(
    directory: Union[str, os.PathLike],
    base: Union[TensorMap, str, os.PathLike],
) -> SuperpositionStore:
    """Rebuild a store from disk; ``base`` must be the checkpoint it was built on."""
    manifest = read_manifest(directory)
    if isinstance(base, TensorMap):
        base_map, digest = base, ckpt.bytes_sha256(ckpt.encode(base))
    else:
        base_map, digest = ckpt.load_checkpoint(base), ckpt.file_sha256(base)
    if digest != manifest["base_sha256"]:
        raise IntegrityError(
            f"base checkpoint sha256 {digest} does not match manifest {manifest['base_sha256']}"
        )
    try:
        store = SuperpositionStore(
            base_map,
            manifest["lambda"],
            manifest["mode"],
            manifest["global_seed"],
            TargetSelector.from_dict(manifest["selector"]),
            NamingConvention.from_dict(manifest["naming_convention"]),
            base_sha256=manifest["base_sha256"],
            allow_nonorthogonal=True,
        )
        tasks = manifest["tasks"]
    except KeyError as exc:
        raise FormatError(f"manifest missing field {exc}") from exc
    multi_delta = ckpt.load_checkpoint(Path(directory) / DELTA_NAME)
    try:
        check_structure(multi_delta, store.multi_delta)
    except StructuralMismatchError as exc:
        raise IntegrityError(f"multi_delta does not fit the base checkpoint: {exc}") from exc
    store.multi_delta = multi_delta
    for t in tasks:
        store.registry.append(
            TaskEntry(
                t["task_id"],
                store.make_spec(int(t["model_index"])),
                float(t["delta_norm"]),
                t["source_kind"],
                float(t["lora_scale"]),
            )
        )
    if len(set(store.task_ids)) != len(store.registry):
        raise FormatError("manifest lists a task id twice")
    return store
