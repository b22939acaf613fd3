"""Plan execution over in-memory tables, plus the nested-loop reference oracle.

Budget discipline: the plan's total epsilon (summed over DP-bearing
operators) is debited before any table row is read; a failed debit leaves
both the ledger and the data untouched. Receipts record the mechanism trace
so epsilon_charged always equals the ledger delta.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence


from .catalog import BudgetLedger
from .dp import NoiseStream, laplace_mechanism
from .errors import InvalidParameter, ModelMissing
from .frontend import AttrRef, Literal, ModelCall, QueryAst, Scope, Star
from .ir import (
    AggregateOp,
    ConstantOp,
    IrGraph,
    JoinOp,
    NoisyAggregateOp,
    NoisyEmbeddingLookupOp,
    PredictOp,
    ProjectOp,
    ScanOp,
    SelectOp,
    _agg_output_name,
)
from .learn.knn import NoisyStore, knn_predict
from .tables import Table, TableStore, compare_values, eval_predicate


@dataclass
class StubModel:
    """Callable-backed model for tests and oracle evaluation."""

    name: str
    fn: Callable[[Sequence], object]

    def predict_batch(self, rows: Sequence[Sequence]) -> list:
        return [self.fn(row) for row in rows]


class ModelStore:
    """Resolves Predict operators to artifacts or stubs, and holds noisy stores."""

    def __init__(self):
        self.models: dict[str, object] = {}
        self.stores: dict[str, NoisyStore] = {}

    def add(self, name: str, model) -> None:
        self.models[name] = model

    def add_store(self, store_id: str, store: NoisyStore) -> None:
        self.stores[store_id] = store

    def resolve(self, op: PredictOp):
        key = op.model_id or op.model_name
        if key in self.models:
            return self.models[key]
        if op.model_name in self.models:
            return self.models[op.model_name]
        raise ModelMissing(f"no model for {op.model_name} (id={op.model_id})")

    def get(self, model_id: str):
        if model_id not in self.models:
            raise ModelMissing(model_id)
        return self.models[model_id]

    def get_store(self, store_id: str) -> NoisyStore:
        if store_id not in self.stores:
            raise ModelMissing(f"noisy store {store_id}")
        return self.stores[store_id]


@dataclass
class MechanismTraceEntry:
    node: int
    mechanism: str
    params: dict
    epsilon: float

    def to_json(self) -> dict:
        return {"node": self.node, "mechanism": self.mechanism,
                "params": self.params, "epsilon": self.epsilon}


@dataclass
class ExecutionReceipt:
    plan_id: str
    epsilon_charged: float
    wall_latency_ms: float
    rows_out: int
    mechanism_trace: list[MechanismTraceEntry] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "plan_id": self.plan_id,
            "epsilon_charged": self.epsilon_charged,
            "wall_latency_ms": self.wall_latency_ms,
            "rows_out": self.rows_out,
            "mechanism_trace": [t.to_json() for t in self.mechanism_trace],
        }


def plan_epsilon(ir: IrGraph) -> float:
    """Total accounted epsilon across the plan's DP-bearing operators."""
    total = 0.0
    for node in ir.nodes.values():
        op = node.op
        if isinstance(op, (NoisyAggregateOp, NoisyEmbeddingLookupOp)):
            total += op.epsilon
        elif isinstance(op, PredictOp):
            total += op.epsilon
    return total


def execute(
    ir: IrGraph,
    tables: TableStore,
    models: ModelStore,
    ledger: BudgetLedger,
    dataset: str,
    user: str,
    plan_id: str = "adhoc",
    seed: int = 0,
) -> tuple[Table, ExecutionReceipt]:
    """Debit-then-run evaluation of a (possibly rewritten) IR."""
    epsilon = plan_epsilon(ir)
    ledger.debit(dataset, user, epsilon, plan_id)

    stream = NoiseStream(seed).spawn(f"exec-{plan_id}")
    trace: list[MechanismTraceEntry] = []
    start = time.perf_counter()
    results: dict[int, Table] = {}
    for nid in ir.topo_order():
        node = ir.node(nid)
        children = [results[c] for c in node.children]
        results[nid] = _eval_node(node.id, node.op, children, ir, tables, models,
                                  stream, trace)
    out = results[ir.sink]
    wall_ms = (time.perf_counter() - start) * 1000.0
    receipt = ExecutionReceipt(plan_id, epsilon, wall_ms, len(out.rows), trace)
    return out, receipt


def _eval_node(nid, op, children, ir, tables, models, stream, trace) -> Table:
    if isinstance(op, ScanOp):
        table = tables.get(op.relation)
        schema = ir.edge(nid).schema
        order = [table.index_of(n) for n, _ in schema]
        return Table(schema, [tuple(row[i] for i in order) for row in table.rows])

    if isinstance(op, ConstantOp):
        return Table(op.schema, [tuple(r) for r in op.rows])

    if isinstance(op, SelectOp):
        inp = children[0]
        kept = [
            row
            for row in inp.rows
            if all(eval_predicate(p, inp.row_dict(row)) for p in op.predicates)
        ]
        return Table(inp.schema, kept)

    if isinstance(op, ProjectOp):
        inp = children[0]
        idx = [inp.index_of(a) for a in op.attrs]
        schema = tuple(inp.schema[i] for i in idx)
        return Table(schema, [tuple(row[i] for i in idx) for row in inp.rows])

    if isinstance(op, JoinOp):
        left, right = children
        li, ri = left.index_of(op.left_attr), right.index_of(op.right_attr)
        build: dict = {}
        for row in right.rows:
            if row[ri] is not None:  # SQL semantics: NULL joins nothing
                build.setdefault(row[ri], []).append(row)
        schema = ir.edge(nid).schema
        rows = []
        for lrow in left.rows:
            if lrow[li] is None:
                continue
            for rrow in build.get(lrow[li], []):
                rows.append(tuple(lrow) + tuple(rrow))
        return Table(schema, rows)

    if isinstance(op, PredictOp):
        inp = children[0]
        model = models.resolve(op)
        idx = [inp.index_of(a) for a in op.inputs]
        outputs = model.predict_batch([tuple(row[i] for i in idx) for row in inp.rows])
        if op.epsilon > 0:
            params = {"model_id": op.model_id or op.model_name}
            accounting = getattr(model, "accounting", None)
            if accounting:
                params["accounting"] = accounting
            trace.append(MechanismTraceEntry(nid, "dp_trained_model", params, op.epsilon))
        # the declared edge schema decides which input columns survive: a
        # pass-through predict keeps them all, a collapsed subquery keeps none
        declared = ir.edge(nid).schema
        wide = inp.schema + ((op.output, _output_type(op)),)
        wide_rows = [row + (out,) for row, out in zip(inp.rows, outputs)]
        if tuple(n for n, _ in declared) == tuple(n for n, _ in wide):
            return Table(wide, wide_rows)
        keep = [[n for n, _ in wide].index(name) for name, _ in declared]
        return Table(declared, [tuple(r[i] for i in keep) for r in wide_rows])

    if isinstance(op, NoisyEmbeddingLookupOp):
        inp = children[0]
        encoder = models.get(op.encoder_id)
        store = models.get_store(op.store_id)
        idx = [inp.index_of(a) for a in op.inputs]
        labels = []
        for row in inp.rows:
            vec = encoder.embed_batch([tuple(row[i] for i in idx)])[0]
            labels.append(knn_predict(vec, store, op.k))
        trace.append(
            MechanismTraceEntry(
                nid,
                "gaussian_embedding_store",
                {"k": op.k, "store": op.store_id,
                 "noise_multiplier": store.noise_multiplier,
                 "clip_norm": store.clip_norm},
                op.epsilon,
            )
        )
        schema = inp.schema + ((op.output, "text"),)
        return Table(schema, [row + (lab,) for row, lab in zip(inp.rows, labels)])

    if isinstance(op, AggregateOp):
        return _aggregate(children[0], op.aggs, op.group_keys)

    if isinstance(op, NoisyAggregateOp):
        inp = children[0]
        exact = _aggregate(inp, ((op.func, op.attr),), ())
        true_value = exact.rows[0][0]
        if op.func == "AVG":
            half = op.epsilon / 2.0
            clipped = _clipped_column(inp, op.attr, op.sensitivity)
            noisy_sum = laplace_mechanism(sum(clipped), op.sensitivity, half, stream)
            noisy_count = laplace_mechanism(len(inp.rows), 1.0, half, stream)
            value = noisy_sum / max(noisy_count, 1.0)
            trace.append(MechanismTraceEntry(
                nid, "laplace", {"part": "sum", "sensitivity": op.sensitivity,
                                 "scale": op.sensitivity / half}, half))
            trace.append(MechanismTraceEntry(
                nid, "laplace", {"part": "count", "sensitivity": 1.0,
                                 "scale": 1.0 / half}, half))
        else:
            if op.func == "SUM":
                clipped = _clipped_column(inp, op.attr, op.sensitivity)
                true_value = sum(clipped) if clipped else 0.0
            value = laplace_mechanism(
                float(true_value or 0.0), op.sensitivity, op.epsilon, stream
            )
            trace.append(MechanismTraceEntry(
                nid, "laplace",
                {"sensitivity": op.sensitivity, "scale": op.sensitivity / op.epsilon},
                op.epsilon))
        name = _agg_output_name(op.func, op.attr)
        return Table(((name, "float64"),), [(float(value),)])

    raise InvalidParameter(f"cannot execute operator {op!r}")


def _output_type(op: PredictOp) -> str:
    return {"classification": "text", "regression": "float64",
            "blob-retrieval": "blob"}.get(op.task, "text")


def _clipped_column(table: Table, attr: str, bound: float) -> list[float]:
    col = table.column(attr)
    return [max(-bound, min(bound, float(v))) for v in col if v is not None]


def _aggregate(inp: Table, aggs, group_keys) -> Table:
    key_idx = [inp.index_of(k) for k in group_keys]
    groups: dict[tuple, list[tuple]] = {}
    for row in inp.rows:
        groups.setdefault(tuple(row[i] for i in key_idx), []).append(row)
    if not group_keys and not groups:
        groups[()] = []
    types = dict(inp.schema)
    schema = tuple((k, types[k]) for k in group_keys) + tuple(
        (_agg_output_name(f, a), "int64" if f == "COUNT" else "float64") for f, a in aggs
    )
    rows = []
    for key, members in groups.items():
        out = list(key)
        for func, attr in aggs:
            if func == "COUNT":
                if attr is None:
                    out.append(len(members))
                else:
                    i = inp.index_of(attr)
                    out.append(sum(1 for m in members if m[i] is not None))
                continue
            i = inp.index_of(attr)
            values = [float(m[i]) for m in members if m[i] is not None]
            if not values:
                out.append(None)
            elif func == "SUM":
                total = 0.0
                for v in values:
                    total += v
                out.append(total)
            elif func == "AVG":
                total = 0.0
                for v in values:
                    total += v
                out.append(total / len(values))
            else:
                raise InvalidParameter(f"unknown aggregate {func}")
        rows.append(tuple(out))
    return Table(schema, rows)


# --- reference oracle ---------------------------------------------------------

def reference_eval(ast: QueryAst, catalog, tables: TableStore,
                   models: Optional[ModelStore] = None) -> Table:
    """Naive nested-loop evaluation of the bound AST; the differential-testing
    ground truth for execute()."""
    scope = Scope(catalog, ast)
    rel_refs = [ast.relation] + [j.relation for j in ast.joins]

    # cross product in declaration order, then join conditions as filters
    def cat_schema(rel_name):
        rel = catalog.relation(rel_name)
        return [(a.name, a.data_type) for a in rel.attributes]

    combined_schema: list[tuple[str, str]] = []
    seen = set()
    for ref in rel_refs:
        for name, dtype in cat_schema(ref.name):
            combined_schema.append((name if name not in seen else f"r.{name}", dtype))
            seen.add(name)

    current: list[tuple] = [()]
    for ref in rel_refs:
        table = tables.peek(ref.name)
        order = [table.index_of(n) for n, _ in cat_schema(ref.name)]
        expanded = []
        for partial in current:
            for row in table.rows:
                expanded.append(partial + tuple(row[i] for i in order))
        current = expanded

    names = [n for n, _ in combined_schema]

    def row_dict(row):
        return dict(zip(names, row))

    for join in ast.joins:
        _, lattr = scope.resolve(join.left)
        _, rattr = scope.resolve(join.right)
        current = [
            r for r in current
            if compare_values(row_dict(r).get(lattr), "=", row_dict(r).get(rattr))
        ]

    def operand_value(op, rd):
        if isinstance(op, Literal):
            return op.value
        if isinstance(op, AttrRef):
            _, name = scope.resolve(op)
            return rd[name]
        if isinstance(op, ModelCall):
            if models is None:
                raise ModelMissing(op.name)
            args = tuple(rd[scope.resolve(a)[1]] for a in op.args)
            fake = PredictOp(op.name, (), "x")
            return models.resolve(fake).predict_batch([args])[0]
        raise InvalidParameter(f"cannot evaluate {op!r}")

    filtered = []
    for row in current:
        rd = row_dict(row)
        if all(
            compare_values(operand_value(c.lhs, rd), c.op, operand_value(c.rhs, rd))
            for c in ast.where
        ):
            filtered.append(row)

    group_keys = [scope.resolve(a)[1] for a in ast.group_by]
    aggs = [item for item in ast.select if item.agg != "NONE"]

    if aggs:
        agg_specs = []
        for item in aggs:
            if isinstance(item.expr, Star):
                agg_specs.append((item.agg, None))
            elif isinstance(item.expr, AttrRef):
                agg_specs.append((item.agg, scope.resolve(item.expr)[1]))
            else:
                raise InvalidParameter("model-call aggregates need lowering")
        interim = Table(tuple(combined_schema), filtered)
        return _aggregate(interim, tuple(agg_specs), tuple(group_keys))

    if ast.select_star:
        attrs = names
    else:
        attrs = []
        for item in ast.select:
            if isinstance(item.expr, AttrRef):
                attrs.append(scope.resolve(item.expr)[1])
            else:
                raise InvalidParameter("model-call projections need lowering")
    idx = [names.index(a) for a in attrs]
    schema = tuple(combined_schema[i] for i in idx)
    return Table(schema, [tuple(r[i] for i in idx) for r in filtered])
