"""Finite, optionally conditional configuration spaces.

A :class:`ConfigSpace` is an ordered list of finite :class:`ParamDomain`
objects plus single-parent activation conditions.  Because every condition
points at an earlier dimension, the condition graph is a forest; counting,
enumeration and uniform sampling all walk that forest.
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from typing import Any

import numpy as np

KINDS = ("categorical", "integer", "real", "boolean")
NUMERIC_KINDS = ("integer", "real")


class SpaceError(ValueError):
    """Raised for malformed spaces or configurations."""


class NotNormalizableError(SpaceError):
    """Raised when normalization meets a non-numeric dimension."""


@dataclass(frozen=True)
class ParamDomain:
    """A single finite hyperparameter domain.

    ``values`` holds the categorical symbols or the sorted grid.  Boolean
    domains always hold ``(False, True)``.
    """

    name: str
    kind: str
    values: tuple = ()

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise SpaceError(f"unknown domain kind {self.kind!r} for {self.name!r}")
        if self.kind == "boolean":
            object.__setattr__(self, "values", (False, True))
            return
        values = tuple(self.values)
        if not values:
            raise SpaceError(f"domain {self.name!r} is empty")
        if self.kind in NUMERIC_KINDS:
            cast = int if self.kind == "integer" else float
            values = tuple(cast(v) for v in values)
            if any(b <= a for a, b in zip(values, values[1:])):
                raise SpaceError(f"grid {self.name!r} must be strictly increasing")
        else:
            values = tuple(tuple(v) if isinstance(v, list) else v for v in values)
        if self.kind == "categorical" and len(set(map(_freeze, values))) != len(values):
            raise SpaceError(f"categorical domain {self.name!r} has duplicates")
        object.__setattr__(self, "values", values)

    @property
    def is_numeric(self) -> bool:
        return self.kind in NUMERIC_KINDS

    @property
    def size(self) -> int:
        return len(self.values)

    def index(self, value: Any) -> int:
        for i, v in enumerate(self.values):
            if _same(v, value):
                return i
        raise SpaceError(f"value {value!r} not in domain {self.name!r}")

    def contains(self, value: Any) -> bool:
        return any(_same(v, value) for v in self.values)

    def to_json(self) -> dict:
        out: dict[str, Any] = {"name": self.name, "type": self.kind}
        if self.kind != "boolean":
            out["values"] = list(self.values)
        return out


@dataclass(frozen=True)
class Condition:
    """``child`` is active only when ``parent`` takes one of ``values``."""

    child: str
    parent: str
    values: tuple

    def holds(self, parent_value: Any) -> bool:
        return any(_same(v, parent_value) for v in self.values)


def categorical(name: str, values) -> ParamDomain:
    return ParamDomain(name, "categorical", tuple(values))


def integer(name: str, values) -> ParamDomain:
    return ParamDomain(name, "integer", tuple(values))


def real(name: str, values) -> ParamDomain:
    return ParamDomain(name, "real", tuple(values))


def boolean(name: str) -> ParamDomain:
    return ParamDomain(name, "boolean")


class Configuration(Mapping):
    """An immutable assignment of values to the active dimensions of a space."""

    __slots__ = ("_items", "_dict", "_hash")

    def __init__(self, items: Mapping[str, Any] | list[tuple[str, Any]] = ()):
        pairs = list(items.items()) if isinstance(items, Mapping) else list(items)
        self._items = tuple(pairs)
        self._dict = dict(pairs)
        self._hash = None

    def __getitem__(self, key: str) -> Any:
        return self._dict[key]

    def __iter__(self):
        return iter(self._dict)

    def __len__(self) -> int:
        return len(self._dict)

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash(frozenset((k, _freeze(v)) for k, v in self._items))
        return self._hash

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Mapping):
            return NotImplemented
        if set(self._dict) != set(other):
            return False
        return all(_same(v, other[k]) for k, v in self._dict.items())

    def __repr__(self) -> str:
        body = ", ".join(f"{k}={v!r}" for k, v in self._items)
        return f"Configuration({body})"

    def to_json(self) -> dict:
        return {k: _jsonable(v) for k, v in self._items}

    def key(self) -> str:
        """Canonical string key, stable across processes."""
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    def merged(self, other: Mapping[str, Any]) -> Configuration:
        return Configuration(list(self._items) + list(other.items()))

    def restricted(self, names) -> Configuration:
        names = set(names)
        return Configuration([(k, v) for k, v in self._items if k in names])


@dataclass(frozen=True)
class ConfigSpace:
    """Ordered finite dimensions with single-parent activation conditions."""

    dims: tuple[ParamDomain, ...]
    conditions: tuple[Condition, ...] = ()
    name: str = "space"
    _by_name: dict = field(init=False, repr=False, compare=False)
    _cond: dict = field(init=False, repr=False, compare=False)
    _children: dict = field(init=False, repr=False, compare=False)
    _counts: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "dims", tuple(self.dims))
        object.__setattr__(self, "conditions", tuple(self.conditions))
        by_name: dict[str, int] = {}
        for i, d in enumerate(self.dims):
            if d.name in by_name:
                raise SpaceError(f"duplicate dimension {d.name!r}")
            by_name[d.name] = i
        cond: dict[str, Condition] = {}
        children: dict[str, list[str]] = {d.name: [] for d in self.dims}
        for c in self.conditions:
            if c.child not in by_name or c.parent not in by_name:
                raise SpaceError(f"condition references unknown dimension: {c}")
            if by_name[c.parent] >= by_name[c.child]:
                raise SpaceError(f"condition parent {c.parent!r} must precede {c.child!r}")
            if c.child in cond:
                raise SpaceError(f"dimension {c.child!r} has more than one guard")
            parent = self.dims[by_name[c.parent]]
            for v in c.values:
                if not parent.contains(v):
                    raise SpaceError(f"guard value {v!r} not in domain {c.parent!r}")
            cond[c.child] = c
            children[c.parent].append(c.child)
        object.__setattr__(self, "_by_name", by_name)
        object.__setattr__(self, "_cond", cond)
        object.__setattr__(self, "_children", children)
        object.__setattr__(self, "_counts", {})

    # -- lookup ---------------------------------------------------------

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dims]

    def __getitem__(self, name: str) -> ParamDomain:
        return self.dims[self._by_name[name]]

    def __contains__(self, name: object) -> bool:
        return name in self._by_name

    def condition_of(self, name: str) -> Condition | None:
        return self._cond.get(name)

    def is_active(self, name: str, partial: Mapping[str, Any]) -> bool:
        """Whether ``name`` is active given values of earlier dimensions."""
        c = self._cond.get(name)
        if c is None:
            return True
        if c.parent not in partial:
            return False
        return c.holds(partial[c.parent])

    @property
    def numeric_dims(self) -> list[ParamDomain]:
        return [d for d in self.dims if d.is_numeric]

    # -- counting -------------------------------------------------------

    def _subtree_count(self, name: str) -> int:
        return sum(self._value_weights(name))

    def _value_weights(self, name: str) -> list[int]:
        if name in self._counts:
            return self._counts[name]
        weights = []
        for v in self[name].values:
            prod = 1
            for child in self._children[name]:
                if self._cond[child].holds(v):
                    prod *= self._subtree_count(child)
            weights.append(prod)
        self._counts[name] = weights
        return weights

    def cardinality(self) -> int:
        """Exact number of valid configurations."""
        total = 1
        for d in self.dims:
            if d.name not in self._cond:
                total *= self._subtree_count(d.name)
        return total

    # -- enumeration and sampling --------------------------------------

    def enumerate(self) -> Iterator[Configuration]:
        """Yield every valid configuration once, lexicographic in dim order."""
        dims = self.dims

        def rec(i: int, partial: dict) -> Iterator[Configuration]:
            if i == len(dims):
                yield Configuration([(d.name, partial[d.name]) for d in dims if d.name in partial])
                return
            d = dims[i]
            if not self.is_active(d.name, partial):
                yield from rec(i + 1, partial)
                return
            for v in d.values:
                partial[d.name] = v
                yield from rec(i + 1, partial)
            del partial[d.name]

        yield from rec(0, {})

    def sample(self, rng: np.random.Generator) -> Configuration:
        """Draw a configuration uniformly from the valid set."""
        values: dict[str, Any] = {}
        for d in self.dims:
            if not self.is_active(d.name, values):
                continue
            weights = self._value_weights(d.name)
            if all(w == weights[0] for w in weights):
                idx = int(rng.integers(len(weights)))
            else:
                total = sum(weights)
                r = int(rng.integers(total))
                idx = 0
                while r >= weights[idx]:
                    r -= weights[idx]
                    idx += 1
            values[d.name] = d.values[idx]
        return Configuration([(n, values[n]) for n in self.names if n in values])

    def default_configuration(self) -> Configuration:
        """First configuration in enumeration order."""
        return next(iter(self.enumerate()))

    # -- validity -------------------------------------------------------

    def validate(self, config: Mapping[str, Any]) -> Configuration:
        """Return ``config`` reordered to dim order, raising if invalid."""
        seen: dict[str, Any] = {}
        for d in self.dims:
            active = self.is_active(d.name, seen)
            if active:
                if d.name not in config:
                    raise SpaceError(f"active dimension {d.name!r} has no value")
                if not d.contains(config[d.name]):
                    raise SpaceError(f"value {config[d.name]!r} not in domain {d.name!r}")
                seen[d.name] = d.values[d.index(config[d.name])]
            elif d.name in config:
                raise SpaceError(f"inactive dimension {d.name!r} carries a value")
        extra = set(config) - set(self._by_name)
        if extra:
            raise SpaceError(f"unknown dimensions {sorted(extra)}")
        return Configuration([(n, seen[n]) for n in self.names if n in seen])

    def is_valid(self, config: Mapping[str, Any]) -> bool:
        try:
            self.validate(config)
        except SpaceError:
            return False
        return True

    def order_key(self, config: Mapping[str, Any]) -> tuple:
        """Sort key reproducing enumeration order."""
        key = []
        for d in self.dims:
            key.append(d.index(config[d.name]) + 1 if d.name in config else 0)
        return tuple(key)

    # -- normalization --------------------------------------------------

    def normalize(self, config: Mapping[str, Any]) -> np.ndarray:
        """Min-max map each numeric grid value into [0, 1] using raw values."""
        coords = []
        for d in self.dims:
            if not d.is_numeric:
                raise NotNormalizableError(f"dimension {d.name!r} ({d.kind}) cannot be normalized")
            if d.name not in config:
                raise SpaceError(f"dimension {d.name!r} has no value")
            lo, hi = d.values[0], d.values[-1]
            v = config[d.name]
            coords.append(0.0 if hi == lo else (v - lo) / (hi - lo))
        return np.asarray(coords, dtype=float)

    def denormalize(self, coords) -> Configuration:
        """Map normalized coordinates back to the nearest grid values."""
        coords = np.asarray(coords, dtype=float)
        if len(coords) != len(self.dims):
            raise SpaceError("coordinate count does not match dimension count")
        out = []
        for d, c in zip(self.dims, coords):
            if not d.is_numeric:
                raise NotNormalizableError(f"dimension {d.name!r} ({d.kind}) cannot be normalized")
            lo, hi = d.values[0], d.values[-1]
            target = lo + c * (hi - lo)
            out.append((d.name, min(d.values, key=lambda v: abs(v - target))))
        return Configuration(out)

    # -- composition ----------------------------------------------------

    def prefixed(self, prefix: str) -> ConfigSpace:
        dims = [ParamDomain(prefix + d.name, d.kind, d.values) for d in self.dims]
        conds = [Condition(prefix + c.child, prefix + c.parent, c.values) for c in self.conditions]
        return ConfigSpace(tuple(dims), tuple(conds), name=prefix + self.name)

    # -- serialization --------------------------------------------------

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "dims": [d.to_json() for d in self.dims],
            "conditions": [
                {"child": c.child, "parent": c.parent, "values": [_jsonable(v) for v in c.values]}
                for c in self.conditions
            ],
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> ConfigSpace:
        dims = tuple(ParamDomain(d["name"], d["type"], tuple(d.get("values", ()))) for d in doc["dims"])
        conds = tuple(
            Condition(c["child"], c["parent"], tuple(c["values"])) for c in doc.get("conditions", ())
        )
        return cls(dims, conds, name=doc.get("name", "space"))


def union_space(a: ConfigSpace, b: ConfigSpace, name: str | None = None) -> ConfigSpace:
    """Product space of ``a`` and ``b``; dimension names must be disjoint."""
    clash = set(a.names) & set(b.names)
    if clash:
        raise SpaceError(f"dimension names clash: {sorted(clash)}")
    return ConfigSpace(a.dims + b.dims, a.conditions + b.conditions, name=name or f"{a.name}+{b.name}")


def _freeze(v: Any) -> Any:
    if isinstance(v, list):
        return tuple(_freeze(x) for x in v)
    if isinstance(v, bool):
        return ("bool", v)
    if isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool):
        return ("num", float(v))
    if v is None:
        return ("none",)
    return ("obj", v)


def _same(a: Any, b: Any) -> bool:
    if isinstance(a, bool) or isinstance(b, bool):
        return isinstance(a, bool) and isinstance(b, bool) and a == b
    if isinstance(a, (int, float, np.integer, np.floating)) and isinstance(b, (int, float, np.integer, np.floating)):
        return float(a) == float(b) or (math.isnan(float(a)) and math.isnan(float(b)))
    if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return a == b


def _jsonable(v: Any) -> Any:
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    return v
