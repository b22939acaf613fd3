"""Forward taint propagation over the IR and sensitive-region extraction.

Propagation rules (conservative, relation-level flag models implicit flows):
  Scan      emits the catalog taints of its relation; the relation flag is set
            when rows matching a tuple-taint predicate can be touched.
  Select    passes attribute taints through; a predicate reading tainted data
            additionally sets the relation flag (the output cardinality leaks).
  Project   keeps taints of retained attributes; the flag survives projection.
  Join      unions both sides.
  Predict   taints its output attribute iff any input attribute is tainted or
            the flag is set.
  Aggregate taints all outputs iff the input carries any taint.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

from .catalog import Catalog
from .errors import UnknownRelation
from .frontend import AttrRef, Comparison
from .ir import (
    AggregateOp,
    DatasetEdge,
    IrGraph,
    JoinOp,
    PredictOp,
    ProjectOp,
    ScanOp,
    SelectOp,
)
from .tables import AndPred, TableStore, eval_predicate


@dataclass
class SensitiveRegion:
    root: int
    member_nodes: set[int]
    tainted_inputs: set[str]
    reason: str

    def to_json(self) -> dict:
        return {
            "root": self.root,
            "member_nodes": sorted(self.member_nodes),
            "tainted_inputs": sorted(self.tainted_inputs),
            "reason": self.reason,
        }


def _predicate_attrs(predicates: tuple[Comparison, ...]) -> set[str]:
    names = set()
    for cmp_ in predicates:
        for side in (cmp_.lhs, cmp_.rhs):
            if isinstance(side, AttrRef):
                names.add(side.name)
    return names


def _tuple_taint_applies(
    ir: IrGraph,
    scan_id: int,
    predicate,
    tables: Optional[TableStore],
) -> bool:
    """Can the query touch a row the owner labeled tainted? Checked against the
    actual data when available, conjoining the pushed selection predicates;
    assumed satisfiable otherwise."""
    if tables is None:
        return True
    relation = ir.node(scan_id).op.relation
    table = tables.peek(relation)
    if table is None:
        return True
    parent = ir.parent_of(scan_id)
    query_preds: tuple[Comparison, ...] = ()
    if parent is not None and isinstance(ir.node(parent).op, SelectOp):
        query_preds = ir.node(parent).op.predicates
    combined = AndPred((predicate, *query_preds)) if query_preds else predicate
    for row in table.rows:
        if eval_predicate(combined, table.row_dict(row)):
            return True
    return False


def propagate(
    ir: IrGraph,
    catalog: Catalog,
    role: Optional[str] = None,
    tables: Optional[TableStore] = None,
) -> IrGraph:
    """Return a copy of the IR whose edges carry computed taint."""
    taints = catalog.taints_for(role)
    tuple_preds = catalog.tuple_taint_predicates(role)
    edges: dict[int, DatasetEdge] = {}

    for nid in ir.topo_order():
        node = ir.node(nid)
        op = node.op
        base = ir.edge(nid)
        if isinstance(op, ScanOp):
            if op.relation not in catalog.relations:
                raise UnknownRelation(op.relation)
            attr_taint = taints.get(op.relation, set()) & set(base.attr_names())
            flag = any(
                _tuple_taint_applies(ir, nid, pred, tables)
                for pred in tuple_preds.get(op.relation, [])
            )
            edges[nid] = replace(base, taint=frozenset(attr_taint), relation_tainted=flag)
            continue
        child_edges = [edges[c] for c in node.children]
        if isinstance(op, SelectOp):
            inp = child_edges[0]
            read = _predicate_attrs(op.predicates)
            implicit = inp.relation_tainted or bool(read & inp.taint)
            edges[nid] = replace(base, taint=inp.taint, relation_tainted=implicit)
        elif isinstance(op, ProjectOp):
            inp = child_edges[0]
            kept = inp.taint & set(op.attrs)
            edges[nid] = replace(base, taint=frozenset(kept),
                                 relation_tainted=inp.relation_tainted)
        elif isinstance(op, JoinOp):
            left, right = child_edges
            edges[nid] = replace(
                base,
                taint=left.taint | right.taint,
                relation_tainted=left.relation_tainted or right.relation_tainted,
            )
        elif isinstance(op, PredictOp):
            inp = child_edges[0]
            out_tainted = inp.relation_tainted or bool(set(op.inputs) & inp.taint)
            taint = set(inp.taint)
            if out_tainted:
                taint.add(op.output)
            taint &= set(base.attr_names())
            edges[nid] = replace(base, taint=frozenset(taint),
                                 relation_tainted=inp.relation_tainted)
        elif isinstance(op, AggregateOp):
            inp = child_edges[0]
            if inp.has_taint():
                edges[nid] = replace(base, taint=frozenset(base.attr_names()),
                                     relation_tainted=inp.relation_tainted)
            else:
                edges[nid] = replace(base, taint=frozenset(), relation_tainted=False)
        else:
            # rewritten-plan operators: output of a DP mechanism is considered
            # protected, no further taint
            edges[nid] = replace(base, taint=frozenset(), relation_tainted=False)
    return ir.with_edges(edges)


def _is_member(ir: IrGraph, nid: int) -> bool:
    """A node belongs to a sensitive region when it computes on tainted data:
    it consumes at least one input edge and its own output still carries
    taint. Sources are never members, and an operator that discards all taint
    (projecting sensitive columns away) ends the region below itself."""
    node = ir.node(nid)
    return bool(node.children) and ir.edge(nid).has_taint()


def find_sensitive_regions(ir: IrGraph) -> list[SensitiveRegion]:
    """Maximal connected sets of taint-carrying operators, one region each.

    The region root is the member closest to the sink: the boundary where a
    rewrite (model substitution or output perturbation) anchors.
    """
    members = {nid for nid in ir.nodes if _is_member(ir, nid)}
    if not members:
        return []

    # connected components over parent/child adjacency restricted to members
    adjacency: dict[int, set[int]] = {m: set() for m in members}
    for nid in members:
        for child in ir.node(nid).children:
            if child in members:
                adjacency[nid].add(child)
                adjacency[child].add(nid)

    topo_rank = {nid: i for i, nid in enumerate(ir.topo_order())}
    seen: set[int] = set()
    regions: list[SensitiveRegion] = []
    for start in sorted(members):
        if start in seen:
            continue
        component = {start}
        stack = [start]
        while stack:
            cur = stack.pop()
            for nxt in adjacency[cur]:
                if nxt not in component:
                    component.add(nxt)
                    stack.append(nxt)
        seen |= component
        root = max(component, key=lambda n: topo_rank[n])
        tainted_inputs: set[str] = set()
        sources: set[str] = set()
        for nid in component:
            for child in ir.node(nid).children:
                edge = ir.edge(child)
                tainted_inputs |= set(edge.taint)
                if isinstance(ir.node(child).op, ScanOp) and edge.has_taint():
                    sources.add(ir.node(child).op.relation)
                if edge.relation_tainted:
                    sources.add(f"rows({type(ir.node(child).op).__name__.removesuffix('Op')}#{child})")
        path = " -> ".join(
            f"{type(ir.node(n).op).__name__.removesuffix('Op')}#{n}"
            for n in sorted(component, key=lambda n: topo_rank[n])
        )
        reason = (
            f"tainted attributes {sorted(tainted_inputs)} flow through {path}"
            if tainted_inputs
            else f"tainted rows flow through {path}"
        )
        regions.append(SensitiveRegion(root, component, tainted_inputs, reason))
    regions.sort(key=lambda r: r.root)
    return regions
