"""Shared test machinery: random catalogs/queries/IRs and independent oracles."""

from __future__ import annotations

import numpy as np

from dpquery.catalog import AttributeDescriptor, Catalog, RelationDescriptor
from dpquery.executor import ModelStore, StubModel
from dpquery.ir import (
    AggregateOp,
    DatasetEdge,
    IrGraph,
    IrNode,
    JoinOp,
    PredictOp,
    ProjectOp,
    ScanOp,
    SelectOp,
)
from dpquery.frontend import AttrRef, Comparison, Literal
from dpquery.tables import Table, TableStore


def build_catalog(spec: dict[str, list[tuple[str, str, bool]]],
                  budgets: dict | None = None) -> Catalog:
    """spec: relation -> [(attr, type, tainted)]."""
    cat = Catalog()
    for rel, attrs in spec.items():
        cat.add_relation(
            RelationDescriptor(
                rel,
                [AttributeDescriptor(n, t, tainted) for n, t, tainted in attrs],
                None,
                100,
            )
        )
    for role in ("owner", "data_scientist", "admin"):
        cat.add_role(role)
    budgets = budgets or {}
    for ds, eps in budgets.get("datasets", {}).items():
        cat.ledger.register_dataset(ds, eps)
    for user, eps in budgets.get("users", {}).items():
        cat.ledger.register_user(user, eps)
    return cat


# --- random relational workloads (parser fuzz + differential testing) ---------

_WORDS = ("alpha", "beta", "gamma", "delta", "omega", "kappa", "sigma", "theta")


class WorkloadGen:
    """Seeded generator of catalogs, tables, and grammar-valid queries.

    Attribute names are globally unique across relations so join outputs never
    collide; model calls appear only in WHERE and bind to a shared stub.
    """

    def __init__(self, seed: int):
        self.rng = np.random.Generator(np.random.Philox(seed))

    def catalog_and_tables(self, tainted: bool = False):
        n_rel = int(self.rng.integers(1, 3))
        spec = {}
        tables = {}
        for r in range(n_rel):
            rel = f"T{r}"
            attrs = [(f"k{r}", "int64", False)]
            n_attr = int(self.rng.integers(2, 5))
            for a in range(n_attr):
                dtype = ("int64", "float64", "text")[int(self.rng.integers(3))]
                attrs.append((f"c{r}_{a}", dtype, False))
            if tainted and self.rng.random() < 0.7:
                idx = int(self.rng.integers(1, len(attrs)))
                attrs[idx] = (attrs[idx][0], attrs[idx][1], True)
            spec[rel] = attrs
            rows = []
            n_rows = int(self.rng.integers(5, 40))
            for i in range(n_rows):
                row = []
                for name, dtype, _ in attrs:
                    if name.startswith("k"):
                        row.append(int(self.rng.integers(0, 8)))
                    elif dtype == "int64":
                        row.append(int(self.rng.integers(-20, 20)))
                    elif dtype == "float64":
                        row.append(float(np.round(self.rng.normal() * 10, 3)))
                    else:
                        row.append(str(_WORDS[int(self.rng.integers(len(_WORDS)))]))
                rows.append(tuple(row))
            tables[rel] = Table(tuple((n, t) for n, t, _ in attrs), rows)
        catalog = build_catalog(spec)
        for rel, table in tables.items():
            catalog.relations[rel].row_count_estimate = len(table.rows)
        store = TableStore(tables)
        return catalog, store

    def _literal_for(self, dtype: str) -> str:
        if dtype == "int64":
            return str(int(self.rng.integers(-20, 20)))
        if dtype == "float64":
            return repr(float(np.round(self.rng.normal() * 10, 3)))
        return f"'{_WORDS[int(self.rng.integers(len(_WORDS)))]}'"

    def query(self, catalog: Catalog, allow_model_calls: bool = False) -> str:
        rels = sorted(catalog.relations)
        base = rels[int(self.rng.integers(len(rels)))]

        joined = []
        if len(rels) > 1 and self.rng.random() < 0.4:
            other = next(r for r in rels if r != base)
            joined.append(other)
        scope_rels = [base] + joined

        def attrs_of(rel):
            return [(a.name, a.data_type) for a in catalog.relations[rel].attributes]

        all_attrs = [(rel, n, t) for rel in scope_rels for n, t in attrs_of(rel)]

        preds = []
        for _ in range(int(self.rng.integers(0, 3))):
            rel, name, dtype = all_attrs[int(self.rng.integers(len(all_attrs)))]
            op = ("=", "<", ">", "<=", ">=", "<>")[int(self.rng.integers(6))]
            preds.append(f"{name} {op} {self._literal_for(dtype)}")
        if allow_model_calls and self.rng.random() < 0.5:
            rel, name, dtype = all_attrs[int(self.rng.integers(len(all_attrs)))]
            preds.append(f"tagger({name}) = '{_WORDS[0]}'")

        mode = self.rng.random()
        group = ""
        if mode < 0.35:
            select = "count(*)"
            numeric = [(r, n, t) for r, n, t in all_attrs if t in ("int64", "float64")]
            if numeric and self.rng.random() < 0.5:
                _, n, _ = numeric[int(self.rng.integers(len(numeric)))]
                select = f"{('SUM', 'AVG')[int(self.rng.integers(2))]}({n})"
            if self.rng.random() < 0.4:
                _, gname, _ = all_attrs[int(self.rng.integers(len(all_attrs)))]
                group = f" GROUP BY {gname}"
                select = f"{gname}, {select}"
        elif mode < 0.5:
            select = "*"
        else:
            k = int(self.rng.integers(1, min(4, len(all_attrs)) + 1))
            chosen = list(dict.fromkeys(
                all_attrs[int(self.rng.integers(len(all_attrs)))][1] for _ in range(k)
            ))
            select = ", ".join(chosen)

        sql = f"SELECT {select} FROM {base}"
        for other in joined:
            sql += f" JOIN {other} ON {base}.k{base[1:]} = {other}.k{other[1:]}"
        if preds:
            sql += " WHERE " + " AND ".join(preds)
        sql += group
        return sql


def stub_models() -> ModelStore:
    store = ModelStore()
    store.add("tagger", StubModel(
        "tagger", lambda vals: _WORDS[hash(str(vals[0])) % 2]))
    return store


def word_tagger_store() -> ModelStore:
    """Deterministic-by-value stub (hash() is salted per process; use crc)."""
    import zlib

    store = ModelStore()
    store.add("tagger", StubModel(
        "tagger", lambda vals: _WORDS[zlib.crc32(str(vals[0]).encode()) % 2]))
    return store


# --- random IR + reachability oracle for taint soundness ----------------------

def random_ir_and_catalog(seed: int):
    """Random single-sink IR (<= 12 nodes) over 1-2 relations with <= 4 tainted
    source attributes; attribute names unique across relations."""
    rng = np.random.Generator(np.random.Philox(seed))
    n_rel = int(rng.integers(1, 3))
    spec = {}
    for r in range(n_rel):
        attrs = [(f"k{r}", "int64", False)]
        for a in range(int(rng.integers(2, 5))):
            attrs.append((f"c{r}_{a}", ("int64", "text")[int(rng.integers(2))], False))
        spec[f"R{r}"] = attrs
    all_attr_slots = [(rel, i) for rel, attrs in spec.items()
                      for i in range(len(attrs))]
    n_taint = int(rng.integers(0, 5))
    for _ in range(n_taint):
        rel, i = all_attr_slots[int(rng.integers(len(all_attr_slots)))]
        name, dtype, _ = spec[rel][i]
        spec[rel][i] = (name, dtype, True)
    catalog = build_catalog(spec)

    nodes: dict[int, IrNode] = {}
    edges: dict[int, DatasetEdge] = {}
    next_id = [0]

    def add(op, children, schema):
        nid = next_id[0]
        next_id[0] += 1
        nodes[nid] = IrNode(nid, op, tuple(children))
        edges[nid] = DatasetEdge(producer=nid, schema=tuple(schema), cardinality=10)
        return nid

    def grow_chain(nid, budget):
        while budget > 0 and rng.random() < 0.75:
            schema = list(edges[nid].schema)
            kind = int(rng.integers(4))
            if kind == 0 and len(schema) > 1:  # Project
                keep = sorted(
                    set(int(rng.integers(len(schema)))
                        for _ in range(int(rng.integers(1, len(schema) + 1))))
                )
                new_schema = [schema[i] for i in keep]
                nid = add(ProjectOp(tuple(n for n, _ in new_schema)), [nid], new_schema)
            elif kind == 1:  # Select on a random attr
                name, dtype = schema[int(rng.integers(len(schema)))]
                lit = Literal(1, quoted=False) if dtype == "int64" else Literal("alpha")
                nid = add(SelectOp((Comparison(AttrRef(None, name), ">", lit),)),
                          [nid], schema)
            elif kind == 2:  # Predict over 1-2 attrs
                n_in = min(len(schema), int(rng.integers(1, 3)))
                ins = tuple(n for n, _ in
                            [schema[int(rng.integers(len(schema)))] for _ in range(n_in)])
                out = f"p{nid}"
                nid = add(PredictOp(f"model{nid}", ins, out),
                          [nid], schema + [(out, "text")])
            else:  # Aggregate closes the chain
                name, dtype = schema[int(rng.integers(len(schema)))]
                func = "COUNT" if dtype == "text" else ("COUNT", "SUM")[int(rng.integers(2))]
                attr = None if func == "COUNT" else name
                out_name = func.lower() if attr is None else f"{func.lower()}_{attr}"
                nid = add(AggregateOp(((func, attr),), ()),
                          [nid], [(out_name, "float64")])
                break
            budget -= 1
        return nid

    roots = []
    for r in range(n_rel):
        rel = f"R{r}"
        schema = [(n, t) for n, t, _ in spec[rel]]
        sid = add(ScanOp(rel), [], schema)
        roots.append(grow_chain(sid, 3))
    if len(roots) == 2:
        ls, rs = edges[roots[0]].schema, edges[roots[1]].schema
        lints = [n for n, t in ls if t == "int64"]
        rints = [n for n, t in rs if t == "int64"]
        if lints and rints:
            top = add(JoinOp(lints[0], rints[0]), roots, list(ls) + list(rs))
        else:
            # no joinable key: drop the second chain (keep one sink)
            drop = set()
            stack = [roots[1]]
            while stack:
                cur = stack.pop()
                drop.add(cur)
                stack.extend(nodes[cur].children)
            for nid in drop:
                del nodes[nid], edges[nid]
            top = roots[0]
        top = grow_chain(top, 2)
    else:
        top = roots[0]
    return IrGraph(nodes, edges, top), catalog


def reachability_oracle(ir: IrGraph, catalog: Catalog) -> dict[int, set[str]]:
    """Independent explicit-dataflow taint: per-edge attribute sets reachable
    from tainted sources without any implicit-flow handling."""
    taints = {name: rel.tainted_attributes() for name, rel in catalog.relations.items()}
    out: dict[int, set[str]] = {}
    for nid in ir.topo_order():
        op = ir.node(nid).op
        kids = [out[c] for c in ir.node(nid).children]
        schema_names = set(ir.edge(nid).attr_names())
        if isinstance(op, ScanOp):
            out[nid] = set(taints.get(op.relation, set())) & schema_names
        elif isinstance(op, SelectOp):
            out[nid] = set(kids[0])
        elif isinstance(op, ProjectOp):
            out[nid] = kids[0] & set(op.attrs)
        elif isinstance(op, JoinOp):
            out[nid] = kids[0] | kids[1]
        elif isinstance(op, PredictOp):
            reach = set(kids[0])
            if set(op.inputs) & kids[0]:
                reach.add(op.output)
            out[nid] = reach & schema_names
        elif isinstance(op, AggregateOp):
            reach = set()
            for func, attr in op.aggs:
                if attr is not None and attr in kids[0]:
                    reach.add(func.lower() if attr is None else f"{func.lower()}_{attr}")
            for key in op.group_keys:
                if key in kids[0]:
                    reach.add(key)
            out[nid] = reach & schema_names
        else:
            out[nid] = set()
    return out
