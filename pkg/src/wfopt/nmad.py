"""Normalized Mean Absolute Deviation over per-algorithm optimal configurations.

Given optimal pipeline configurations for several algorithms, NMAD measures
how far the other algorithms' optima lie from a reference point ``r``.  Each
algorithm is represented by its optimum closest to ``r`` (L1 distance in the
min-max normalized space), and

    NMAD(r) = (1/K) (1/N) || sum_i |p_i - r| ||_1

with K dimensions and N algorithms.  A value of 0 marks a configuration that
is optimal for every algorithm.
"""

from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .configspace import Configuration, ConfigSpace, NotNormalizableError, SpaceError

SCHEMA = "wfopt.optimal-set/1"


@dataclass(frozen=True)
class OptimalSet:
    """Optimal configurations per algorithm in a numeric configuration space."""

    space: ConfigSpace
    points: Mapping[str, tuple[Configuration, ...]]
    name: str = "optimal-set"

    def __post_init__(self) -> None:
        if not self.points:
            raise SpaceError("optimal set needs at least one algorithm")
        for d in self.space.dims:
            if not d.is_numeric:
                raise NotNormalizableError(f"dimension {d.name!r} ({d.kind}) is outside the NMAD metric scope")
        fixed = {}
        for algo, pts in self.points.items():
            if not pts:
                raise SpaceError(f"algorithm {algo!r} has no optimal configuration")
            fixed[algo] = tuple(self.space.validate(p) for p in pts)
        object.__setattr__(self, "points", fixed)

    @property
    def n_algorithms(self) -> int:
        return len(self.points)

    def distinct_points(self) -> list[Configuration]:
        seen: dict[Configuration, None] = {}
        for pts in self.points.values():
            for p in pts:
                seen.setdefault(p, None)
        return list(seen)

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> OptimalSet:
        schema = doc.get("schema", SCHEMA)
        if schema != SCHEMA:
            raise ValueError(f"unsupported optimal-set schema {schema!r}")
        space = ConfigSpace.from_json(doc["space"])
        points = {algo: tuple(Configuration(p) for p in pts) for algo, pts in doc["algorithms"].items()}
        return cls(space, points, doc.get("name", space.name))

    @classmethod
    def load(cls, path: str | Path) -> OptimalSet:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_json(self) -> dict:
        return {
            "schema": SCHEMA,
            "name": self.name,
            "space": self.space.to_json(),
            "algorithms": {a: [p.to_json() for p in pts] for a, pts in self.points.items()},
        }


@dataclass(frozen=True)
class NmadRow:
    reference: Configuration
    value: float
    representants: Mapping[str, Configuration]


@dataclass(frozen=True)
class NmadReport:
    name: str
    rows: tuple[NmadRow, ...]

    def as_dict(self) -> dict[tuple, float]:
        return {tuple(r.reference.values()): r.value for r in self.rows}

    def render(self, digits: int = 3) -> str:
        dims = list(self.rows[0].reference) if self.rows else []
        lines = [f"{self.name}", f"{'(' + ', '.join(dims) + ')':<24}NMAD"]
        for r in self.rows:
            point = "(" + ", ".join(str(v) for v in r.reference.values()) + ")"
            lines.append(f"{point:<24}{r.value:.{digits}f}")
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "rows": [
                {
                    "reference": r.reference.to_json(),
                    "nmad": r.value,
                    "representants": {a: p.to_json() for a, p in r.representants.items()},
                }
                for r in self.rows
            ],
        }


def representant(points: Sequence[Configuration], r: Mapping[str, Any], space: ConfigSpace) -> Configuration:
    """The point closest to ``r`` in normalized L1 distance; ties go to enumeration order."""
    if not points:
        raise ValueError("representant needs at least one point")
    ref = space.normalize(r)
    return min(points, key=lambda p: (float(np.abs(space.normalize(p) - ref).sum()), space.order_key(p)))


def nmad(opt: OptimalSet, r: Mapping[str, Any]) -> float:
    r = opt.space.validate(r)
    ref = opt.space.normalize(r)
    total = np.zeros_like(ref)
    for pts in opt.points.values():
        total += np.abs(opt.space.normalize(representant(pts, r, opt.space)) - ref)
    return float(total.sum() / (len(ref) * opt.n_algorithms)) if len(ref) else 0.0


def report(opt: OptimalSet) -> NmadReport:
    """One row per distinct optimal configuration, most universal first."""
    rows = []
    for r in opt.distinct_points():
        reps = {a: representant(pts, r, opt.space) for a, pts in opt.points.items()}
        rows.append(NmadRow(r, nmad(opt, r), reps))
    rows.sort(key=lambda row: (row.value, opt.space.order_key(row.reference)))
    return NmadReport(opt.name, tuple(rows))


def fixture_path(name: str) -> Path:
    """Path of a bundled fixture (``echr`` or ``newsgroup``)."""
    return Path(__file__).with_name("fixtures") / f"{name}.json"
