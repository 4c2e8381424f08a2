"""Interference norms and cosine statistics for superposed deltas.

When task ``i`` is retrieved, the other tasks leave behind

    lam * sum_{j != i} O_i^-1 O_j delta_j

Its Frobenius norm can be computed directly, or from the pairwise expansion

    lam^2 * (sum_j |T_j|^2 + 2 * sum_{l < j} |T_l| |T_j| cos(T_l, T_j))

over the transformed deltas ``T_j = O_i^-1 O_j delta_j``. Agreement of the two
is a cheap end-to-end check on the transform code.
"""

from __future__ import annotations

import csv
import io
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np

from .errors import ConfigError, NumericalDegeneracyError, StructuralMismatchError
from .schema import ModelSchema
from .tensormap import TensorMap, check_structure, cosine, frobenius_norm, inner
from .transforms import MaterializedTransform, apply, apply_inverse

RADICAND_SLACK = 1e-9


def _check_args(deltas: Sequence, transforms: Sequence, i: int) -> None:
    if len(deltas) == 0:
        raise ConfigError("need at least one delta")
    if len(deltas) != len(transforms):
        raise ConfigError(f"{len(deltas)} deltas but {len(transforms)} transforms")
    if not 0 <= i < len(deltas):
        raise ConfigError(f"task index {i} out of range for {len(deltas)} deltas")


def interfering_terms(
    deltas: Sequence[TensorMap], transforms: Sequence[MaterializedTransform], i: int
) -> list[TensorMap]:
    """``O_i^-1 O_j delta_j`` for every ``j != i``, in index order."""
    _check_args(deltas, transforms, i)
    return [
        apply_inverse(transforms[i], apply(transforms[j], deltas[j]))
        for j in range(len(deltas))
        if j != i
    ]


def _sum(terms: Sequence[TensorMap]) -> dict[str, np.ndarray]:
    acc: dict[str, np.ndarray] = {}
    for term in terms:
        for name, arr in term.items():
            if name in acc:
                acc[name] = acc[name] + arr.astype(np.float64)
            else:
                acc[name] = arr.astype(np.float64)
    return acc


def interference_norm_direct(
    deltas: Sequence[TensorMap],
    transforms: Sequence[MaterializedTransform],
    i: int,
    lam: float,
) -> float:
    terms = interfering_terms(deltas, transforms, i)
    if not terms:
        return 0.0
    return abs(lam) * frobenius_norm(_sum(terms))


def _safe_cosine(x: TensorMap, y: TensorMap) -> Optional[float]:
    if frobenius_norm(x) == 0.0 or frobenius_norm(y) == 0.0:
        return None
    return cosine(x, y)


def expansion_from_terms(terms: Sequence[TensorMap], lam: float) -> float:
    norms = [frobenius_norm(t) for t in terms]
    radicand = math.fsum(n * n for n in norms)
    cross = []
    for a, b in combinations(range(len(terms)), 2):
        c = _safe_cosine(terms[a], terms[b])
        if c is not None:
            cross.append(2.0 * norms[a] * norms[b] * c)
    radicand = math.fsum([radicand, *cross])
    if radicand < 0.0:
        if radicand < -RADICAND_SLACK * max(1.0, math.fsum(n * n for n in norms)):
            raise NumericalDegeneracyError(f"negative radicand {radicand:.3e} in interference expansion")
        radicand = 0.0
    return abs(lam) * math.sqrt(radicand)


def interference_norm_expansion(
    deltas: Sequence[TensorMap],
    transforms: Sequence[MaterializedTransform],
    i: int,
    lam: float,
) -> float:
    return expansion_from_terms(interfering_terms(deltas, transforms, i), lam)


@dataclass
class CosineStats:
    matrix: list[list[Optional[float]]]
    mean: Optional[float]
    mean_abs: Optional[float]
    max_abs: Optional[float]
    # layer_type -> cosines between different blocks of one delta
    within_model: dict[str, list[float]] = field(default_factory=dict)
    # layer_type -> cosines of the same layer across different deltas
    across_model: dict[str, list[float]] = field(default_factory=dict)


def cosine_matrix(maps: Sequence[TensorMap]) -> list[list[Optional[float]]]:
    n = len(maps)
    norms = [frobenius_norm(m) for m in maps]
    out: list[list[Optional[float]]] = [[None] * n for _ in range(n)]
    for a in range(n):
        if norms[a] > 0.0:
            out[a][a] = 1.0
        for b in range(a + 1, n):
            if norms[a] == 0.0 or norms[b] == 0.0:
                continue
            c = max(-1.0, min(1.0, inner(maps[a], maps[b]) / (norms[a] * norms[b])))
            out[a][b] = out[b][a] = c
    return out


def _summary(matrix) -> tuple[Optional[float], Optional[float], Optional[float]]:
    vals = [matrix[a][b] for a in range(len(matrix)) for b in range(a + 1, len(matrix))]
    vals = [v for v in vals if v is not None]
    if not vals:
        return None, None, None
    arr = np.asarray(vals)
    return float(arr.mean()), float(np.abs(arr).mean()), float(np.abs(arr).max())


def _vec_cos(x: np.ndarray, y: np.ndarray) -> Optional[float]:
    x = x.ravel().astype(np.float64)
    y = y.ravel().astype(np.float64)
    nx, ny = math.sqrt(float(x @ x)), math.sqrt(float(y @ y))
    if nx == 0.0 or ny == 0.0:
        return None
    return max(-1.0, min(1.0, float(x @ y) / (nx * ny)))


def layer_cosines(
    deltas: Sequence[Mapping], schema: ModelSchema
) -> tuple[dict[str, list[float]], dict[str, list[float]]]:
    """Within-model vs across-model cosine samples, per shuffle group."""
    within: dict[str, list[float]] = {}
    across: dict[str, list[float]] = {}
    for ltype, members in schema.groups.items():
        w, c = [], []
        for d in deltas:
            for a, b in combinations(members, 2):
                v = _vec_cos(d[a], d[b])
                if v is not None:
                    w.append(v)
        for name in members:
            for da, db in combinations(deltas, 2):
                v = _vec_cos(da[name], db[name])
                if v is not None:
                    c.append(v)
        within[ltype], across[ltype] = w, c
    return within, across


def pairwise_cosine_stats(
    deltas: Sequence[TensorMap],
    transforms: Optional[Sequence[MaterializedTransform]] = None,
    schema: Optional[ModelSchema] = None,
) -> CosineStats:
    """Pairwise cosines of (optionally transformed) deltas; zero deltas give None."""
    if len(deltas) < 2:
        raise ConfigError("pairwise statistics need at least two deltas")
    for d in deltas[1:]:
        check_structure(deltas[0], d)
    maps = list(deltas)
    if transforms is not None:
        if len(transforms) != len(deltas):
            raise StructuralMismatchError("one transform per delta required")
        maps = [apply(t, d) for t, d in zip(transforms, deltas)]
    matrix = cosine_matrix(maps)
    mean, mean_abs, max_abs = _summary(matrix)
    stats = CosineStats(matrix, mean, mean_abs, max_abs)
    if schema is not None:
        stats.within_model, stats.across_model = layer_cosines(maps, schema)
    return stats


@dataclass
class InterferenceReport:
    task_id: str
    lam: float
    direct_norm: float
    expansion_norm: float
    pairwise: list[list[Optional[float]]]
    mean_abs_cosine: Optional[float]
    interfering_ids: list[str] = field(default_factory=list)

    @property
    def relative_gap(self) -> float:
        return abs(self.direct_norm - self.expansion_norm) / max(self.direct_norm, 1e-12)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "lambda": self.lam,
            "direct_norm": self.direct_norm,
            "expansion_norm": self.expansion_norm,
            "mean_abs_cosine": self.mean_abs_cosine,
            "pairwise": self.pairwise,
        }

    def csv_rows(self) -> list[dict]:
        rows = []
        ids = self.interfering_ids or [str(k) for k in range(len(self.pairwise))]
        for a, b in combinations(range(len(self.pairwise)), 2):
            rows.append(
                {
                    "task_id": self.task_id,
                    "task_a": ids[a],
                    "task_b": ids[b],
                    "cosine": self.pairwise[a][b],
                }
            )
        return rows


REPORT_CSV_FIELDS = ("task_id", "task_a", "task_b", "cosine")


def interference_report(
    task_ids: Sequence[str],
    deltas: Sequence[TensorMap],
    transforms: Sequence[MaterializedTransform],
    i: int,
    lam: float,
) -> InterferenceReport:
    terms = interfering_terms(deltas, transforms, i)
    direct = abs(lam) * frobenius_norm(_sum(terms)) if terms else 0.0
    expansion = expansion_from_terms(terms, lam)
    pairwise = cosine_matrix(terms)
    _, mean_abs, _ = _summary(pairwise)
    others = [tid for k, tid in enumerate(task_ids) if k != i]
    return InterferenceReport(task_ids[i], lam, direct, expansion, pairwise, mean_abs, others)


def reports_to_csv(reports: Sequence[InterferenceReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        for row in r.csv_rows():
            writer.writerow({**row, "cosine": "" if row["cosine"] is None else repr(row["cosine"])})
    return buf.getvalue()
