"""Seeded layer-wise orthogonal transforms and their exact inverses.

A transform is never a d x d matrix. It is a small bundle of per-group block
permutations and per-layer column sign vectors, regenerated on demand from
``(mode, global_seed, model_index, selector)``:

=========  ================================================================
identity   nothing moves
shuffle    random permutation of each same-type group across blocks
shift      cyclic shift of each group by ``model_index + 1`` block positions
rsf        random +-1 per column of every selected layer
srsf       shuffle, then rsf
rd         random N(0, 1) per column (ablation only, not orthogonal)
=========  ================================================================

Permutations follow ``delta[k] <- delta[sigma(k)]``: block position ``k`` of
the output receives the tensor that sat at position ``sigma(k)``.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpecError, NumericalDegeneracyError, StructuralMismatchError
from .prng import MASK64, SplitMix64, derive_seed
from .schema import ModelSchema, TargetSelector, select_targets, selected_positions
from .tensormap import TensorMap

MODES = ("identity", "shuffle", "shift", "rsf", "srsf", "rd")
ORTHOGONAL_MODES = ("identity", "shuffle", "shift", "rsf", "srsf")
RD_MIN_MAGNITUDE = 1e-12


def parse_mode(mode: str) -> str:
    mode = str(mode).strip().lower()
    if "+" in mode:
        parts = set(mode.split("+"))
        if "rd" in parts:
            raise InvalidSpecError(
                f"mode {mode!r}: rd replaces the sign-flip context and cannot be combined"
            )
        raise InvalidSpecError(f"mode {mode!r}: combined modes are not supported, use srsf")
    if mode not in MODES:
        raise InvalidSpecError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    return mode


@dataclass(frozen=True)
class TransformSpec:
    mode: str
    global_seed: int
    model_index: int
    selector: TargetSelector = TargetSelector()

    def __post_init__(self):
        object.__setattr__(self, "mode", parse_mode(self.mode))
        if not 0 <= int(self.global_seed) <= MASK64:
            raise InvalidSpecError(f"global_seed {self.global_seed} outside the u64 range")
        if int(self.model_index) < 0:
            raise InvalidSpecError("model_index must be >= 0")

    @property
    def effective_seed(self) -> int:
        return (int(self.global_seed) + int(self.model_index)) & MASK64

    @property
    def orthogonal(self) -> bool:
        return self.mode in ORTHOGONAL_MODES


@dataclass(frozen=True)
class MaterializedTransform:
    mode: str
    # layer_type -> (member names by block, order) with out[k] = in[order[k]]
    permutations: dict[str, tuple[tuple[str, ...], tuple[int, ...]]] = field(default_factory=dict)
    signs: dict[str, np.ndarray] = field(default_factory=dict)
    diags: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def orthogonal(self) -> bool:
        return self.mode in ORTHOGONAL_MODES

    def layers(self) -> set[str]:
        names = set(self.signs) | set(self.diags)
        for members, _ in self.permutations.values():
            names.update(members)
        return names


def _columns(shape: tuple[int, ...]) -> int:
    return shape[-1]


def materialize(spec: TransformSpec, schema: ModelSchema) -> MaterializedTransform:
    """Regenerate the concrete permutations / sign vectors for ``spec``."""
    mode = spec.mode
    if mode == "identity":
        return MaterializedTransform(mode)

    seed = spec.effective_seed
    permutations = {}
    if mode in ("shuffle", "srsf", "shift"):
        for ltype, positions in selected_positions(schema, spec.selector).items():
            members = schema.groups[ltype]
            n = len(positions)
            if mode == "shift":
                step = (spec.model_index + 1) % n
                perm = [(a - step) % n for a in range(n)]
            else:
                perm = SplitMix64(derive_seed(seed, "perm:" + ltype)).permutation(n)
            order = list(range(len(members)))
            for a in range(n):
                order[positions[a]] = positions[perm[a]]
            permutations[ltype] = (members, tuple(order))

    signs, diags = {}, {}
    if mode in ("rsf", "srsf", "rd"):
        targets = select_targets(schema, spec.selector)
        for name in targets:
            n = _columns(schema.shapes[name])
            if mode == "rd":
                diags[name] = SplitMix64(derive_seed(seed, "diag:" + name)).normals(n)
            else:
                signs[name] = SplitMix64(derive_seed(seed, "sign:" + name)).signs(n)

    for arr in (*signs.values(), *diags.values()):
        arr.setflags(write=False)
    return MaterializedTransform(mode, permutations, signs, diags)


def _check_layers(t: MaterializedTransform, x: Mapping) -> None:
    for name in sorted(t.layers()):
        if name not in x:
            raise StructuralMismatchError(f"transform touches {name!r}, which the delta lacks")
    for name, vec in (*t.signs.items(), *t.diags.items()):
        if _columns(x[name].shape) != vec.shape[0]:
            raise StructuralMismatchError(
                f"tensor {name!r}: {_columns(x[name].shape)} columns, transform has {vec.shape[0]}"
            )


def _permute(entries: dict, t: MaterializedTransform, inverse: bool) -> None:
    for members, order in t.permutations.values():
        src = [entries[n] for n in members]
        for k, j in enumerate(order):
            if inverse:
                entries[members[j]] = src[k]
            else:
                entries[members[k]] = src[j]


def _scale_columns(entries: dict, vectors: Mapping[str, np.ndarray], divide: bool) -> None:
    for name, vec in vectors.items():
        x = entries[name]
        v = vec.astype(x.dtype, copy=False)
        entries[name] = x / v if divide else x * v


def apply(t: MaterializedTransform, delta: TensorMap) -> TensorMap:
    """Return ``O @ delta``; tensors the transform does not touch pass through."""
    _check_layers(t, delta)
    entries = dict(delta.items())
    _permute(entries, t, inverse=False)
    _scale_columns(entries, t.signs, divide=False)
    _scale_columns(entries, t.diags, divide=False)
    return TensorMap._wrap(entries, delta.metadata)


def apply_inverse(t: MaterializedTransform, x: TensorMap) -> TensorMap:
    """Return ``O^-1 @ x``. Exact for every orthogonal mode."""
    _check_layers(t, x)
    for name, vec in t.diags.items():
        if np.any(np.abs(vec) < RD_MIN_MAGNITUDE):
            raise NumericalDegeneracyError(f"diagonal of {name!r} has an entry below 1e-12")
    entries = dict(x.items())
    _scale_columns(entries, t.signs, divide=False)  # D^-1 == D
    _scale_columns(entries, t.diags, divide=True)
    _permute(entries, t, inverse=True)
    return TensorMap._wrap(entries, x.metadata)


def compose_signs(t: MaterializedTransform, extra: MaterializedTransform) -> MaterializedTransform:
    """``extra @ t`` for a pure sign-flip ``extra`` (used for conjugation checks)."""
    if extra.permutations or extra.diags:
        raise InvalidSpecError("compose_signs only accepts a pure sign-flip transform")
    signs = dict(t.signs)
    for name, vec in extra.signs.items():
        signs[name] = signs[name] * vec if name in signs else vec
    for arr in signs.values():
        arr.setflags(write=False)
    if t.mode in ("rsf", "srsf", "rd"):
        mode = t.mode
    else:
        mode = "srsf" if t.permutations else "rsf"
    return MaterializedTransform(mode, dict(t.permutations), signs, dict(t.diags))
