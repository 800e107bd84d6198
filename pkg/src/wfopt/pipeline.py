"""Pipeline prototypes: layered DAGs of operator slots.

A prototype fixes the topology (source, slots, union nodes, sink) and which
operators each slot may hold.  An instance picks one operator, or ``EMPTY``,
per slot together with that operator's configuration.
"""

from __future__ import annotations

import hashlib
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .configspace import Condition, Configuration, ConfigSpace, categorical
from .errors import IncompatibilityError

EMPTY = "EMPTY"
DATA_TAGS = ("numeric-matrix", "labeled-numeric-matrix", "mixed-table", "class-vector")


@dataclass(frozen=True)
class DataKind:
    tag: str
    dim_constraint: tuple[int | None, int | None] | None = None

    def __post_init__(self) -> None:
        if self.tag not in DATA_TAGS:
            raise ValueError(f"unknown data kind {self.tag!r}")

    def __str__(self) -> str:
        return self.tag


NUMERIC_MATRIX = DataKind("numeric-matrix")
CLASS_VECTOR = DataKind("class-vector")


@dataclass(frozen=True)
class OperatorSignature:
    """Name, typing and configuration space of an operator.

    ``fit(X, y, params, rng)`` returns ``(X', y', functor)``; it may raise
    :class:`IncompatibilityError`.
    """

    name: str
    input: DataKind
    output: DataKind
    space: ConfigSpace
    train_only: bool = False
    fit: Callable | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Slot:
    id: str
    layer: str
    catalog: tuple[str, ...]


@dataclass(frozen=True)
class PipelinePrototype:
    name: str
    slots: tuple[Slot, ...]
    unions: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]
    layers: tuple[str, ...]
    source_kind: DataKind = NUMERIC_MATRIX
    sink_kind: DataKind = NUMERIC_MATRIX

    def __post_init__(self) -> None:
        nodes = self.nodes
        if len(set(nodes)) != len(nodes):
            raise ValueError("duplicate node ids")
        for u, v in self.edges:
            if u not in nodes or v not in nodes:
                raise ValueError(f"edge ({u}, {v}) references an unknown node")
            if v == "source" or u == "sink":
                raise ValueError(f"edge ({u}, {v}) enters the source or leaves the sink")
        for s in self.slots:
            if s.layer not in self.layers:
                raise ValueError(f"slot {s.id!r} belongs to unknown layer {s.layer!r}")
            if len(self.predecessors(s.id)) != 1:
                raise ValueError(f"slot {s.id!r} must have exactly one input")
        order = self.topological_order()
        reach = {"source"}
        for n in order:
            if n != "source" and any(p in reach for p in self.predecessors(n)):
                reach.add(n)
        if reach != set(nodes):
            raise ValueError("every node must be reachable from the source")
        coreach = {"sink"}
        for n in reversed(order):
            if n != "sink" and any(s in coreach for s in self.successors(n)):
                coreach.add(n)
        if coreach != set(nodes):
            raise ValueError("every node must reach the sink")

    @property
    def nodes(self) -> list[str]:
        return ["source", *(s.id for s in self.slots), *self.unions, "sink"]

    def slot(self, slot_id: str) -> Slot:
        for s in self.slots:
            if s.id == slot_id:
                return s
        raise KeyError(slot_id)

    def is_slot(self, node: str) -> bool:
        return any(s.id == node for s in self.slots)

    def predecessors(self, node: str) -> list[str]:
        return [u for u, v in self.edges if v == node]

    def successors(self, node: str) -> list[str]:
        return [v for u, v in self.edges if u == node]

    def topological_order(self) -> list[str]:
        """Kahn's algorithm, ties broken by declaration order."""
        nodes = self.nodes
        indeg = {n: 0 for n in nodes}
        for _, v in self.edges:
            indeg[v] += 1
        ready = [n for n in nodes if indeg[n] == 0]
        out = []
        while ready:
            n = ready.pop(0)
            out.append(n)
            for v in self.successors(n):
                indeg[v] -= 1
                if indeg[v] == 0:
                    ready.append(v)
            ready.sort(key=nodes.index)
        if len(out) != len(nodes):
            raise ValueError("prototype graph has a cycle")
        return out

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "source": {"kind": self.source_kind.tag},
            "sink": {"kind": self.sink_kind.tag},
            "layers": [
                {"name": layer, "slots": [{"id": s.id, "catalog": list(s.catalog)} for s in self.slots if s.layer == layer]}
                for layer in self.layers
            ],
            "unions": list(self.unions),
            "edges": [list(e) for e in self.edges],
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> PipelinePrototype:
        slots, layers = [], []
        for layer in doc["layers"]:
            layers.append(layer["name"])
            for s in layer["slots"]:
                slots.append(Slot(s["id"], layer["name"], tuple(s["catalog"])))
        return cls(
            name=doc.get("name", "prototype"),
            slots=tuple(slots),
            unions=tuple(doc.get("unions", ())),
            edges=tuple(tuple(e) for e in doc["edges"]),
            layers=tuple(layers),
            source_kind=DataKind(doc.get("source", {}).get("kind", "numeric-matrix")),
            sink_kind=DataKind(doc.get("sink", {}).get("kind", "numeric-matrix")),
        )


def appendix_a_prototype() -> PipelinePrototype:
    """rebalance -> normalize -> (PCA | SelectKBest) -> union -> algorithm."""
    return PipelinePrototype(
        name="rebalance-normalize-features",
        slots=(
            Slot("rebalance", "rebalance", ("NearMiss", "CondensedNearestNeighbour", "SMOTE")),
            Slot("normalize", "normalize", ("StandardScaler", "PowerTransformer", "MinMaxScaler", "RobustScaler")),
            Slot("features.pca", "features", ("PCA",)),
            Slot("features.kbest", "features", ("SelectKBest",)),
        ),
        unions=("features.union",),
        edges=(
            ("source", "rebalance"),
            ("rebalance", "normalize"),
            ("normalize", "features.pca"),
            ("normalize", "features.kbest"),
            ("features.pca", "features.union"),
            ("features.kbest", "features.union"),
            ("features.union", "sink"),
        ),
        layers=("rebalance", "normalize", "features"),
    )


# -- instances ------------------------------------------------------------


def param_dim(slot_id: str, op: str, param: str) -> str:
    return f"{slot_id}.{op}.{param}"


def pipeline_space(proto: PipelinePrototype, catalog: Mapping[str, OperatorSignature]) -> ConfigSpace:
    """One choice dimension per slot, plus each operator's parameters active only when chosen."""
    dims, conds = [], []
    for s in proto.slots:
        missing = [op for op in s.catalog if op not in catalog]
        if missing:
            raise KeyError(f"slot {s.id!r} references unknown operators {missing}")
        dims.append(categorical(s.id, (EMPTY, *s.catalog)))
        for op in s.catalog:
            for d in catalog[op].space.dims:
                name = param_dim(s.id, op, d.name)
                dims.append(type(d)(name, d.kind, d.values))
                conds.append(Condition(name, s.id, (op,)))
    return ConfigSpace(tuple(dims), tuple(conds), name=proto.name)


@dataclass(frozen=True)
class PipelineInstance:
    prototype: PipelinePrototype
    assignment: Mapping[str, tuple[str, Configuration]]

    @classmethod
    def from_config(cls, proto: PipelinePrototype, config: Mapping[str, Any]) -> PipelineInstance:
        assignment = {}
        for s in proto.slots:
            op = config.get(s.id, EMPTY)
            prefix = f"{s.id}.{op}."
            params = Configuration([(k[len(prefix):], v) for k, v in config.items() if k.startswith(prefix)])
            assignment[s.id] = (op, params)
        return cls(proto, assignment)

    @classmethod
    def empty(cls, proto: PipelinePrototype) -> PipelineInstance:
        return cls(proto, {s.id: (EMPTY, Configuration()) for s in proto.slots})

    def operator(self, slot_id: str) -> str:
        return self.assignment.get(slot_id, (EMPTY, Configuration()))[0]

    def describe(self) -> str:
        parts = []
        for s in self.prototype.slots:
            op, params = self.assignment.get(s.id, (EMPTY, Configuration()))
            if op != EMPTY:
                body = ",".join(f"{k}={v}" for k, v in params.items())
                parts.append(f"{s.id}={op}({body})")
        return " ".join(parts) or "identity"


@dataclass(frozen=True)
class Incompatibility:
    """First edge whose endpoint kinds disagree."""

    edge: tuple[str, str]
    expected: str
    found: str

    def __str__(self) -> str:
        return f"edge {self.edge[0]}->{self.edge[1]}: expected {self.expected}, found {self.found}"


def check_compatibility(
    proto: PipelinePrototype, inst: PipelineInstance, catalog: Mapping[str, OperatorSignature]
) -> Incompatibility | None:
    """Static type check by graph traversal; ``None`` means compatible."""
    out_kind: dict[str, DataKind] = {}
    for node in proto.topological_order():
        if node == "source":
            out_kind[node] = proto.source_kind
            continue
        preds = proto.predecessors(node)
        if node == "sink":
            for p in preds:
                if out_kind[p] != proto.sink_kind:
                    return Incompatibility((p, node), str(proto.sink_kind), str(out_kind[p]))
            continue
        if proto.is_slot(node):
            (p,) = preds
            op = inst.operator(node)
            if op == EMPTY:
                out_kind[node] = out_kind[p]
                continue
            if op not in proto.slot(node).catalog:
                raise ValueError(f"operator {op!r} not allowed in slot {node!r}")
            sig = catalog[op]
            if out_kind[p] != sig.input:
                return Incompatibility((p, node), str(sig.input), str(out_kind[p]))
            out_kind[node] = sig.output
        else:
            first = out_kind[preds[0]]
            for p in preds[1:]:
                if out_kind[p] != first:
                    return Incompatibility((p, node), str(first), str(out_kind[p]))
            out_kind[node] = first
    return None


# -- execution ------------------------------------------------------------


@dataclass(frozen=True)
class FittedPipeline:
    """Per-node functors plus the union wiring chosen at fit time."""

    prototype: PipelinePrototype
    steps: tuple[tuple[str, Any], ...]
    union_inputs: Mapping[str, tuple[str, ...]]
    n_features_in: int
    n_features_out: int

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features_in:
            raise ValueError(f"expected {self.n_features_in} columns, got shape {X.shape}")
        out: dict[str, np.ndarray] = {"source": X}
        functors = dict(self.steps)
        proto = self.prototype
        for node in proto.topological_order():
            if node == "source":
                continue
            preds = proto.predecessors(node)
            if node == "sink":
                out[node] = out[preds[0]]
            elif node in self.union_inputs:
                out[node] = np.hstack([out[p] for p in self.union_inputs[node]])
            else:
                functor = functors.get(node)
                out[node] = out[preds[0]] if functor is None else functor.transform(out[preds[0]])
        return out["sink"]


def _union_sources(proto: PipelinePrototype, inst: PipelineInstance, node: str) -> tuple[str, ...]:
    """Inputs fed by an EMPTY slot are dropped; if all are, the first passes through."""
    preds = proto.predecessors(node)
    kept = tuple(p for p in preds if not (proto.is_slot(p) and inst.operator(p) == EMPTY))
    return kept or preds[:1]


def fit_transform(
    inst: PipelineInstance,
    X,
    y,
    catalog: Mapping[str, OperatorSignature],
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, FittedPipeline]:
    """Fit every node in topological order and return the transformed training data.

    Raises :class:`IncompatibilityError` carrying the failing node id.
    """
    proto = inst.prototype
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    data: dict[str, tuple[np.ndarray, np.ndarray]] = {"source": (X, y)}
    steps: list[tuple[str, Any]] = []
    unions: dict[str, tuple[str, ...]] = {}
    for node in proto.topological_order():
        if node == "source":
            continue
        preds = proto.predecessors(node)
        if node == "sink":
            data[node] = data[preds[0]]
            continue
        if proto.is_slot(node):
            Xin, yin = data[preds[0]]
            op, params = inst.assignment.get(node, (EMPTY, Configuration()))
            if op == EMPTY:
                data[node] = (Xin, yin)
                continue
            sig = catalog[op]
            try:
                Xout, yout, functor = sig.fit(Xin, yin, dict(params), rng)
            except IncompatibilityError as exc:
                raise IncompatibilityError(exc.cause, node=node) from exc
            except (ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
                raise IncompatibilityError(f"{op} failed: {exc}", node=node) from exc
            if Xout.shape[0] == 0 or Xout.shape[0] != len(yout):
                raise IncompatibilityError(f"{op} produced {Xout.shape[0]} rows", node=node)
            if not np.all(np.isfinite(Xout)):
                raise IncompatibilityError(f"{op} produced non-finite values", node=node)
            data[node] = (Xout, yout)
            steps.append((node, functor))
        else:
            sources = _union_sources(proto, inst, node)
            rows = {data[p][0].shape[0] for p in sources}
            if len(rows) != 1:
                raise IncompatibilityError(f"union inputs disagree on row counts {sorted(rows)}", node=node)
            ys = [data[p][1] for p in sources]
            if any(not np.array_equal(ys[0], other) for other in ys[1:]):
                raise IncompatibilityError("union inputs disagree on labels", node=node)
            unions[node] = sources
            data[node] = (np.hstack([data[p][0] for p in sources]), ys[0])
    Xt, yt = data["sink"]
    fitted = FittedPipeline(proto, tuple(steps), unions, X.shape[1], Xt.shape[1])
    return Xt, yt, fitted


def fingerprint(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]
