"""Seeded delta superposition: many fine-tunes stored as one base + one delta + seeds."""

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    ConfigError,
    DegenerateInputError,
    DuplicateTaskError,
    FormatError,
    IntegrityError,
    InvalidSpecError,
    NumericalDegeneracyError,
    RandesError,
    SchemaError,
    StructuralMismatchError,
    UnknownTaskError,
)
from .schema import NamingConvention, TargetSelector, parse_schema, select_targets
from .store import LoraAdapter, SuperpositionStore, compress, load
from .tensormap import TensorMap
from .transforms import TransformSpec, apply, apply_inverse, materialize

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DegenerateInputError",
    "DuplicateTaskError",
    "FormatError",
    "IntegrityError",
    "InvalidSpecError",
    "LoraAdapter",
    "NamingConvention",
    "NumericalDegeneracyError",
    "RandesError",
    "SchemaError",
    "StructuralMismatchError",
    "SuperpositionStore",
    "TargetSelector",
    "TensorMap",
    "TransformSpec",
    "UnknownTaskError",
    "apply",
    "apply_inverse",
    "compress",
    "load",
    "load_checkpoint",
    "materialize",
    "parse_schema",
    "save_checkpoint",
    "select_targets",
]
