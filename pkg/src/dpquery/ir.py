"""Graph IR over nested relational algebra and the AST lowering pass.

Nodes are relational operators, each node's output edge is a dataset
descriptor (schema, taint, cardinality). Lowering canonicalizes the plan to
Scan -> Select (merged conjuncts, pushed to scans) -> Predict (one per model
call) -> Select (on prediction outputs) -> Project -> Aggregate so that the
rewrite rules can pattern-match a fixed shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

from .errors import InvalidParameter, LoweringError
from .frontend import (
    AttrRef,
    Comparison,
    ModelCall,
    QueryAst,
    Scope,
    Star,
)

# cardinality guesses per operator, enough for latency ranking at desk scale
SELECT_CONJUNCT_SELECTIVITY = 0.25


@dataclass(frozen=True)
class ScanOp:
    relation: str
    alias: Optional[str] = None

    def label(self) -> str:
        return f"Scan({self.relation})"


@dataclass(frozen=True)
class SelectOp:
    predicates: tuple[Comparison, ...]

    def label(self) -> str:
        return f"Select({' AND '.join(p.sql() for p in self.predicates)})"


@dataclass(frozen=True)
class ProjectOp:
    attrs: tuple[str, ...]

    def label(self) -> str:
        return f"Project({', '.join(self.attrs)})"


@dataclass(frozen=True)
class JoinOp:
    left_attr: str
    right_attr: str

    def label(self) -> str:
        return f"Join({self.left_attr} = {self.right_attr})"


@dataclass(frozen=True)
class AggregateOp:
    aggs: tuple[tuple[str, Optional[str]], ...]  # (func, attr or None for *)
    group_keys: tuple[str, ...] = ()

    def label(self) -> str:
        parts = [f"{f}({a or '*'})" for f, a in self.aggs]
        if self.group_keys:
            parts.append(f"BY {', '.join(self.group_keys)}")
        return f"Aggregate({', '.join(parts)})"


@dataclass(frozen=True)
class PredictOp:
    model_name: str
    inputs: tuple[str, ...]
    output: str
    model_id: Optional[str] = None
    task: str = "classification"
    epsilon: float = 0.0  # accounted cost of using this model release

    def label(self) -> str:
        mid = f"@{self.model_id}" if self.model_id else ""
        return f"Predict({self.model_name}{mid}: {', '.join(self.inputs)} -> {self.output})"


@dataclass(frozen=True)
class NoisyAggregateOp:
    func: str
    attr: Optional[str]
    sensitivity: float
    epsilon: float

    def label(self) -> str:
        return f"NoisyAggregate({self.func}({self.attr or '*'}), eps={self.epsilon:g})"


@dataclass(frozen=True)
class NoisyEmbeddingLookupOp:
    encoder_id: str
    store_id: str
    inputs: tuple[str, ...]
    output: str
    k: int
    epsilon: float

    def label(self) -> str:
        return f"NoisyEmbeddingLookup(store={self.store_id}, k={self.k})"


@dataclass(frozen=True)
class ConstantOp:
    schema: tuple[tuple[str, str], ...]
    rows: tuple[tuple, ...]

    def label(self) -> str:
        return f"Constant({', '.join(n for n, _ in self.schema)})"


Operator = Union[
    ScanOp,
    SelectOp,
    ProjectOp,
    JoinOp,
    AggregateOp,
    PredictOp,
    NoisyAggregateOp,
    NoisyEmbeddingLookupOp,
    ConstantOp,
]

_ARITY = {
    ScanOp: 0,
    ConstantOp: 0,
    SelectOp: 1,
    ProjectOp: 1,
    AggregateOp: 1,
    PredictOp: 1,
    NoisyAggregateOp: 1,
    NoisyEmbeddingLookupOp: 1,
    JoinOp: 2,
}


@dataclass(frozen=True)
class IrNode:
    id: int
    op: Operator
    children: tuple[int, ...]


@dataclass(frozen=True)
class DatasetEdge:
    producer: int
    schema: tuple[tuple[str, str], ...]  # (name, data_type)
    taint: frozenset[str] = frozenset()
    relation_tainted: bool = False
    cardinality: int = 0
    payload_kind: str = "relation"  # or object_collection

    def attr_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.schema)

    def has_taint(self) -> bool:
        return bool(self.taint) or self.relation_tainted


class IrGraph:
    """Immutable-after-build operator DAG with exactly one sink."""

    def __init__(self, nodes: dict[int, IrNode], edges: dict[int, DatasetEdge], sink: int):
        self.nodes = dict(nodes)
        self.edges = dict(edges)
        self.sink = sink
        self._validate()

    def _validate(self) -> None:
        consumed: set[int] = set()
        for node in self.nodes.values():
            expected = _ARITY[type(node.op)]
            if len(node.children) != expected:
                raise InvalidParameter(
                    f"node {node.id} ({type(node.op).__name__}) has arity "
                    f"{len(node.children)}, expected {expected}"
                )
            for child in node.children:
                if child not in self.nodes:
                    raise InvalidParameter(f"node {node.id} references missing child {child}")
                consumed.add(child)
        sinks = set(self.nodes) - consumed
        if sinks != {self.sink}:
            raise InvalidParameter(f"expected single sink {self.sink}, found {sorted(sinks)}")
        self.topo_order()  # raises on cycles

    def node(self, node_id: int) -> IrNode:
        return self.nodes[node_id]

    def edge(self, node_id: int) -> DatasetEdge:
        return self.edges[node_id]

    def parent_of(self, node_id: int) -> Optional[int]:
        for node in self.nodes.values():
            if node_id in node.children:
                return node.id
        return None

    def topo_order(self) -> list[int]:
        order: list[int] = []
        state: dict[int, int] = {}

        def visit(nid: int) -> None:
            if state.get(nid) == 2:
                return
            if state.get(nid) == 1:
                raise InvalidParameter("IR graph has a cycle")
            state[nid] = 1
            for child in self.nodes[nid].children:
                visit(child)
            state[nid] = 2
            order.append(nid)

        for nid in sorted(self.nodes):
            visit(nid)
        return order

    def with_edges(self, edges: dict[int, DatasetEdge]) -> "IrGraph":
        return IrGraph(self.nodes, edges, self.sink)

    def sink_schema(self) -> tuple[tuple[str, str], ...]:
        return self.edges[self.sink].schema

    # --- serialization ---

    def to_json(self) -> dict:
        return {
            "sink": self.sink,
            "nodes": [
                {
                    "id": n.id,
                    "kind": type(n.op).__name__.removesuffix("Op"),
                    "label": n.op.label(),
                    "children": list(n.children),
                }
                for nid, n in sorted(self.nodes.items())
            ],
            "edges": [
                {
                    "producer": e.producer,
                    "schema": [{"name": n, "data_type": t} for n, t in e.schema],
                    "taint": sorted(e.taint),
                    "relation_tainted": e.relation_tainted,
                    "cardinality": e.cardinality,
                    "payload_kind": e.payload_kind,
                }
                for nid, e in sorted(self.edges.items())
            ],
        }

    def to_dot(self, highlight: Optional[set[int]] = None) -> str:
        highlight = highlight or set()
        unknown = highlight - set(self.nodes)
        if unknown:
            raise InvalidParameter(f"highlight references missing nodes {sorted(unknown)}")
        lines = ["digraph ir {", "  rankdir=BT;"]
        for nid in sorted(self.nodes):
            node = self.nodes[nid]
            attrs = [f'label="{nid}: {_dot_escape(node.op.label())}"', "shape=box"]
            if nid in highlight:
                attrs.append('style=filled')
                attrs.append('fillcolor="palegreen"')
            lines.append(f"  n{nid} [{', '.join(attrs)}];")
        for nid in sorted(self.nodes):
            for child in self.nodes[nid].children:
                edge = self.edges[child]
                lines.append(f'  n{child} -> n{nid} [label="{edge.cardinality}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def _dot_escape(text: str) -> str:
    return text.replace('"', '\\"')


class GraphBuilder:
    def __init__(self):
        self.nodes: dict[int, IrNode] = {}
        self.edges: dict[int, DatasetEdge] = {}
        self._next = 0

    def add(self, op: Operator, children: tuple[int, ...], edge_info: dict) -> int:
        nid = self._next
        self._next += 1
        self.nodes[nid] = IrNode(nid, op, children)
        self.edges[nid] = DatasetEdge(producer=nid, **edge_info)
        return nid

    def build(self, sink: int) -> IrGraph:
        return IrGraph(self.nodes, self.edges, sink)


# --- lowering ---------------------------------------------------------------

_AGG_TYPES = {"COUNT": "int64", "SUM": "float64", "AVG": "float64"}


def _resolved_name(scope: Scope, ref: AttrRef) -> str:
    _, attr = scope.resolve(ref)
    return attr


def _strip_qualifiers(cmp_: Comparison, scope: Scope) -> Comparison:
    """Rewrite operands to unqualified schema attribute names."""

    def fix(op):
        if isinstance(op, AttrRef):
            return AttrRef(None, _resolved_name(scope, op))
        return op

    return Comparison(fix(cmp_.lhs), cmp_.op, fix(cmp_.rhs))


def lower(ast: QueryAst, catalog, model_signatures: Optional[dict[str, int]] = None) -> IrGraph:
    """Lower a bound AST to canonical IR.

    model_signatures optionally maps model names to their expected arity;
    a mismatch raises LoweringError.
    """
    scope = Scope(catalog, ast)
    builder = GraphBuilder()

    rel_refs = [ast.relation] + [j.relation for j in ast.joins]
    rel_names = [r.name for r in rel_refs]
    if len(set(rel_names)) != len(rel_names):
        raise LoweringError("self-joins are not supported")

    # partition WHERE conjuncts: per-relation pushdown vs model-call predicates
    def referenced_relations(cmp_: Comparison) -> set[str]:
        rels = set()
        for side in (cmp_.lhs, cmp_.rhs):
            if isinstance(side, AttrRef):
                rels.add(scope.resolve(side)[0])
            elif isinstance(side, ModelCall):
                for arg in side.args:
                    rels.add(scope.resolve(arg)[0])
        return rels

    def has_model_call(cmp_: Comparison) -> bool:
        return isinstance(cmp_.lhs, ModelCall) or isinstance(cmp_.rhs, ModelCall)

    pushed: dict[str, list[Comparison]] = {name: [] for name in rel_names}
    residual: list[Comparison] = []
    model_preds: list[Comparison] = []
    for cmp_ in ast.where:
        if has_model_call(cmp_):
            model_preds.append(cmp_)
            continue
        rels = referenced_relations(cmp_)
        if len(rels) == 1:
            pushed[next(iter(rels))].append(cmp_)
        else:
            residual.append(cmp_)

    # scans with pushed selects
    def schema_of(rel_name: str) -> tuple[tuple[str, str], ...]:
        rel = catalog.relation(rel_name)
        return tuple((a.name, a.data_type) for a in rel.attributes)

    def payload_of(schema) -> str:
        return "object_collection" if any(t == "blob" for _, t in schema) else "relation"

    current: dict[str, int] = {}
    for ref in rel_refs:
        schema = schema_of(ref.name)
        card = catalog.relation(ref.name).row_count_estimate
        nid = builder.add(
            ScanOp(ref.name, ref.alias),
            (),
            {"schema": schema, "cardinality": card, "payload_kind": payload_of(schema)},
        )
        if pushed[ref.name]:
            preds = tuple(_strip_qualifiers(c, scope) for c in pushed[ref.name])
            card = max(1, int(card * SELECT_CONJUNCT_SELECTIVITY ** len(preds)))
            nid = builder.add(
                SelectOp(preds),
                (nid,),
                {"schema": schema, "cardinality": card, "payload_kind": payload_of(schema)},
            )
        current[ref.name] = nid

    # left-deep joins in declaration order
    top = current[rel_names[0]]
    for join in ast.joins:
        left_edge = builder.edges[top]
        right_edge = builder.edges[current[join.relation.name]]
        lrel, lattr = scope.resolve(join.left)
        rrel, rattr = scope.resolve(join.right)
        if rrel != join.relation.name:
            # normalize: left side of the condition belongs to the existing subtree
            lattr, rattr = rattr, lattr
        merged = _merge_schemas(left_edge.schema, right_edge.schema)
        card = max(left_edge.cardinality, right_edge.cardinality)
        top = builder.add(
            JoinOp(lattr, rattr),
            (top, current[join.relation.name]),
            {"schema": merged, "cardinality": card, "payload_kind": payload_of(merged)},
        )

    if residual:
        edge = builder.edges[top]
        preds = tuple(_strip_qualifiers(c, scope) for c in residual)
        card = max(1, int(edge.cardinality * SELECT_CONJUNCT_SELECTIVITY ** len(preds)))
        top = builder.add(
            SelectOp(preds),
            (top,),
            {"schema": edge.schema, "cardinality": card, "payload_kind": edge.payload_kind},
        )

    star_attrs = tuple(n for n, _ in builder.edges[top].schema)  # before predicts

    # one Predict per distinct model call, then a Select over prediction outputs
    calls: list[ModelCall] = []
    for call in ast.model_calls():
        if call not in calls:
            calls.append(call)
    output_attr: dict[ModelCall, str] = {}
    for i, call in enumerate(calls):
        if model_signatures and call.name in model_signatures:
            if model_signatures[call.name] != len(call.args):
                raise LoweringError(
                    f"model {call.name} expects {model_signatures[call.name]} inputs,"
                    f" got {len(call.args)}"
                )
        out_name = "pred" if i == 0 else f"pred{i + 1}"
        output_attr[call] = out_name
        edge = builder.edges[top]
        inputs = tuple(_resolved_name(scope, a) for a in call.args)
        schema = edge.schema + ((out_name, "text"),)
        top = builder.add(
            PredictOp(call.name, inputs, out_name),
            (top,),
            {"schema": schema, "cardinality": edge.cardinality,
             "payload_kind": edge.payload_kind},
        )

    if model_preds:
        def substitute(op):
            if isinstance(op, ModelCall):
                return AttrRef(None, output_attr[op])
            if isinstance(op, AttrRef):
                return AttrRef(None, _resolved_name(scope, op))
            return op

        preds = tuple(
            Comparison(substitute(c.lhs), c.op, substitute(c.rhs)) for c in model_preds
        )
        edge = builder.edges[top]
        card = max(1, int(edge.cardinality * SELECT_CONJUNCT_SELECTIVITY ** len(preds)))
        top = builder.add(
            SelectOp(preds),
            (top,),
            {"schema": edge.schema, "cardinality": card, "payload_kind": edge.payload_kind},
        )

    # projection and aggregation
    aggs = [item for item in ast.select if item.agg != "NONE"]
    plain = [item for item in ast.select if item.agg == "NONE"]
    group_keys = tuple(_resolved_name(scope, a) for a in ast.group_by)

    if aggs:
        agg_specs: list[tuple[str, Optional[str]]] = []
        needed: list[str] = list(group_keys)
        for item in aggs:
            if isinstance(item.expr, Star):
                agg_specs.append((item.agg, None))
            elif isinstance(item.expr, AttrRef):
                name = _resolved_name(scope, item.expr)
                agg_specs.append((item.agg, name))
                if name not in needed:
                    needed.append(name)
            elif isinstance(item.expr, ModelCall):
                name = output_attr[item.expr]
                agg_specs.append((item.agg, name))
                if name not in needed:
                    needed.append(name)
            else:
                raise LoweringError(f"cannot aggregate over {item.expr!r}")
        star_only = all(a is None for _, a in agg_specs) and not group_keys
        if needed and not star_only:
            edge = builder.edges[top]
            types = dict(edge.schema)
            top = builder.add(
                ProjectOp(tuple(needed)),
                (top,),
                {"schema": tuple((n, types[n]) for n in needed),
                 "cardinality": edge.cardinality, "payload_kind": "relation"},
            )
        edge = builder.edges[top]
        types = dict(edge.schema)
        out_schema = tuple((k, types[k]) for k in group_keys) + tuple(
            (_agg_output_name(f, a), _AGG_TYPES[f]) for f, a in agg_specs
        )
        card = 1 if not group_keys else max(1, edge.cardinality // 4)
        top = builder.add(
            AggregateOp(tuple(agg_specs), group_keys),
            (top,),
            {"schema": out_schema, "cardinality": card, "payload_kind": "relation"},
        )
    else:
        edge = builder.edges[top]
        if ast.select_star:
            attrs = star_attrs
        else:
            attrs = []
            for item in plain:
                if isinstance(item.expr, AttrRef):
                    attrs.append(_resolved_name(scope, item.expr))
                elif isinstance(item.expr, ModelCall):
                    attrs.append(output_attr[item.expr])
                else:
                    raise LoweringError(f"cannot project {item.expr!r}")
            attrs = tuple(attrs)
        types = dict(edge.schema)
        top = builder.add(
            ProjectOp(attrs),
            (top,),
            {"schema": tuple((n, types[n]) for n in attrs),
             "cardinality": edge.cardinality, "payload_kind": edge.payload_kind},
        )

    return builder.build(top)


def _agg_output_name(func: str, attr: Optional[str]) -> str:
    return func.lower() if attr is None else f"{func.lower()}_{attr}"


def _merge_schemas(left, right) -> tuple[tuple[str, str], ...]:
    names = {n for n, _ in left}
    merged = list(left)
    for n, t in right:
        merged.append((n, t) if n not in names else (f"r.{n}", t))
    return tuple(merged)
