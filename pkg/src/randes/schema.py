"""Layer-name parsing: blocks, layer types, shuffle groups, target selection.

Names are classified by a :class:`NamingConvention` (regexes, stored in the
manifest). The default convention understands ``blocks.{k}.{type}`` for
repeated blocks and ``input.*`` / ``output.*`` for the ends of the network.
Anything else is treated as an output-class layer and never transformed.
"""

from __future__ import annotations

import re
import warnings
from collections.abc import Mapping
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .errors import ConfigError, SchemaError


@dataclass(frozen=True)
class NamingConvention:
    block_pattern: str = r"^blocks\.(?P<k>\d+)\.(?P<type>.+)$"
    input_pattern: str = r"^input\."
    output_pattern: str = r"^output\."
    mlp_tokens: tuple[str, ...] = ("mlp",)
    attn_tokens: tuple[str, ...] = ("attn",)
    # Layers matching these are left out of the superposition entirely.
    exclude: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "block_pattern": self.block_pattern,
            "input_pattern": self.input_pattern,
            "output_pattern": self.output_pattern,
            "mlp_tokens": list(self.mlp_tokens),
            "attn_tokens": list(self.attn_tokens),
            "exclude": list(self.exclude),
        }

    @classmethod
    def from_dict(cls, d: Optional[Mapping]) -> "NamingConvention":
        if not d:
            return cls()
        known = cls().to_dict()
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown naming_convention keys: {sorted(unknown)}")
        kw = {**known, **d}
        for key in ("mlp_tokens", "attn_tokens", "exclude"):
            kw[key] = tuple(kw[key])
        conv = cls(**kw)
        try:
            block = re.compile(conv.block_pattern)
            re.compile(conv.input_pattern)
            re.compile(conv.output_pattern)
            for p in conv.exclude:
                re.compile(p)
        except re.error as exc:
            raise ConfigError(f"bad naming-convention regex: {exc}") from exc
        if not {"k", "type"} <= set(block.groupindex):
            raise ConfigError("block_pattern needs named groups 'k' and 'type'")
        return conv

    def is_excluded(self, name: str) -> bool:
        return any(re.search(p, name) for p in self.exclude)


@dataclass(frozen=True)
class LayerId:
    raw_name: str
    block_index: Optional[int]  # 1-based block ordinal, None outside blocks
    layer_type: Optional[str]
    io_class: str  # "input" | "output" | "block"


class SelectorMode(str, Enum):
    ALL = "all"
    MLP = "mlp"
    ATTN = "attn"
    CUSTOM = "custom"


@dataclass(frozen=True)
class TargetSelector:
    mode: SelectorMode = SelectorMode.ALL
    patterns: tuple[str, ...] = ()
    skip_rate: int = 1

    def __post_init__(self):
        try:
            object.__setattr__(self, "mode", SelectorMode(str(getattr(self.mode, "value", self.mode)).lower()))
        except ValueError as exc:
            raise ConfigError(f"unknown selector mode {self.mode!r}") from exc
        object.__setattr__(self, "patterns", tuple(self.patterns))
        if not isinstance(self.skip_rate, int) or isinstance(self.skip_rate, bool) or self.skip_rate < 1:
            raise ConfigError(f"skip_rate must be an integer >= 1, got {self.skip_rate!r}")

    def to_dict(self) -> dict:
        return {"mode": self.mode.value, "patterns": list(self.patterns), "skip_rate": self.skip_rate}

    @classmethod
    def from_dict(cls, d: Optional[Mapping]) -> "TargetSelector":
        if not d:
            return cls()
        return cls(mode=d.get("mode", "all"), patterns=tuple(d.get("patterns", ())),
                   skip_rate=d.get("skip_rate", 1))


@dataclass(frozen=True)
class ModelSchema:
    layers: tuple[LayerId, ...]
    K: int
    groups: dict[str, tuple[str, ...]]  # layer_type -> names ordered by block
    shapes: dict[str, tuple[int, ...]] = field(repr=False)
    convention: NamingConvention = NamingConvention()

    @property
    def selector_universe(self) -> frozenset[str]:
        return frozenset(self.groups)

    @property
    def block_layers(self) -> list[str]:
        return [l.raw_name for l in self.layers if l.io_class == "block"]

    def layer(self, name: str) -> LayerId:
        for l in self.layers:
            if l.raw_name == name:
                return l
        raise KeyError(name)


def parse_schema(
    checkpoint: Mapping, convention: Optional[NamingConvention] = None
) -> ModelSchema:
    """Classify every tensor name and build same-type shuffle groups."""
    conv = convention or NamingConvention()
    block_re = re.compile(conv.block_pattern)
    input_re = re.compile(conv.input_pattern)

    shapes = {name: tuple(checkpoint[name].shape) for name in sorted(checkpoint)}
    raw_blocks: dict[str, tuple[int, str]] = {}
    io: dict[str, str] = {}
    for name in shapes:
        m = block_re.match(name)
        if m:
            raw_blocks[name] = (int(m.group("k")), m.group("type"))
        elif input_re.search(name):
            io[name] = "input"
        else:
            # output-pattern matches and unclassifiable names both land here
            io[name] = "output"

    ordinals = {k: i + 1 for i, k in enumerate(sorted({k for k, _ in raw_blocks.values()}))}
    seen: dict[tuple[int, str], str] = {}
    by_type: dict[str, list[tuple[int, str]]] = {}
    for name, (k, ltype) in raw_blocks.items():
        key = (ordinals[k], ltype)
        if key in seen:
            raise SchemaError(
                f"duplicate layer (block {ordinals[k]}, type {ltype!r}): {seen[key]!r} and {name!r}"
            )
        seen[key] = name
        by_type.setdefault(ltype, []).append((ordinals[k], name))

    groups: dict[str, tuple[str, ...]] = {}
    for ltype in sorted(by_type):
        members = [name for _, name in sorted(by_type[ltype])]
        member_shapes = {shapes[n] for n in members}
        if len(member_shapes) > 1:
            detail = ", ".join(f"{n}:{shapes[n]}" for n in members)
            raise SchemaError(f"group {ltype!r} mixes shapes: {detail}")
        groups[ltype] = tuple(members)

    layers = []
    for name in shapes:
        if name in raw_blocks:
            k, ltype = raw_blocks[name]
            layers.append(LayerId(name, ordinals[k], ltype, "block"))
        else:
            layers.append(LayerId(name, None, None, io[name]))
    return ModelSchema(tuple(layers), len(ordinals), groups, shapes, conv)


def _type_matches(schema: ModelSchema, sel: TargetSelector, ltype: str) -> bool:
    conv = schema.convention
    if sel.mode is SelectorMode.ALL:
        return True
    if sel.mode is SelectorMode.MLP:
        return any(tok in ltype for tok in conv.mlp_tokens)
    if sel.mode is SelectorMode.ATTN:
        return any(tok in ltype for tok in conv.attn_tokens)
    return any(re.search(p, ltype) for p in sel.patterns)


def selected_positions(schema: ModelSchema, sel: TargetSelector) -> dict[str, tuple[int, ...]]:
    """Per selected group, the 0-based block positions the transform touches."""
    out = {}
    for ltype, members in schema.groups.items():
        if _type_matches(schema, sel, ltype):
            out[ltype] = tuple(range(0, len(members), sel.skip_rate))
    return out


def select_targets(schema: ModelSchema, sel: TargetSelector) -> list[str]:
    """Layer names a transform with this selector acts on, ordered by (type, block)."""
    picked = [
        schema.groups[ltype][pos]
        for ltype, positions in selected_positions(schema, sel).items()
        for pos in positions
    ]
    if not picked:
        warnings.warn(f"selector {sel.to_dict()} matches no layers", stacklevel=2)
    return picked
