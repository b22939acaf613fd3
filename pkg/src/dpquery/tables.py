"""In-memory tables, CSV/JSONL loading, and predicate evaluation.

Values are plain Python scalars: int, float, str, or None. Blob attributes
are carried as opaque strings (synthetic records at desk scale). Comparison
semantics: numeric when both sides are numbers, lexicographic otherwise;
any comparison against None is false.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

from .errors import UnknownRelation
from .frontend import AttrRef, Comparison, Literal, BareToken

Value = Union[int, float, str, None]

_CASTS = {
    "int64": int,
    "float64": float,
    "text": str,
    "blob": str,
}


@dataclass
class Table:
    schema: tuple[tuple[str, str], ...]  # (name, data_type)
    rows: list[tuple]

    def __post_init__(self):
        names = [n for n, _ in self.schema]
        assert len(names) == len(set(names)), "duplicate attribute names"
        for row in self.rows:
            assert len(row) == len(self.schema), "row arity mismatch"

    @property
    def attr_names(self) -> list[str]:
        return [n for n, _ in self.schema]

    def index_of(self, name: str) -> int:
        for i, (n, _) in enumerate(self.schema):
            if n == name:
                return i
        raise KeyError(name)

    def column(self, name: str) -> list[Value]:
        i = self.index_of(name)
        return [row[i] for row in self.rows]

    def row_dict(self, row: tuple) -> dict[str, Value]:
        return {n: v for (n, _), v in zip(self.schema, row)}

    def sorted_rows(self) -> list[tuple]:
        return sorted(self.rows, key=lambda r: tuple(_sort_key(v) for v in r))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.attr_names)
            writer.writerows(self.rows)


def _sort_key(v: Value):
    if v is None:
        return (0, "")
    if isinstance(v, (int, float)):
        return (1, float(v))
    return (2, str(v))


def cast_value(raw: str, data_type: str) -> Value:
    if raw == "" or raw is None:
        return None
    return _CASTS[data_type](raw)


def load_csv(path: str | Path, schema: tuple[tuple[str, str], ...]) -> Table:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        order = {name: i for i, name in enumerate(header)}
        rows = []
        for raw in reader:
            rows.append(tuple(cast_value(raw[order[name]], dt) for name, dt in schema))
    return Table(schema, rows)


def load_jsonl(path: str | Path, schema: tuple[tuple[str, str], ...]) -> Table:
    rows = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            rows.append(
                tuple(
                    None if record.get(name) is None else _CASTS[dt](record[name])
                    for name, dt in schema
                )
            )
    return Table(schema, rows)


def save_jsonl(table: Table, path: str | Path) -> None:
    with open(path, "w") as fh:
        for row in table.rows:
            fh.write(json.dumps(table.row_dict(row)) + "\n")


class TableStore:
    """Named tables with an access counter (used to verify debit-before-read)."""

    def __init__(self, tables: Optional[dict[str, Table]] = None):
        self.tables: dict[str, Table] = dict(tables or {})
        self.access_count = 0

    def add(self, name: str, table: Table) -> None:
        self.tables[name] = table

    def get(self, name: str) -> Table:
        if name not in self.tables:
            raise UnknownRelation(f"no data for relation {name}")
        self.access_count += 1
        return self.tables[name]

    def peek(self, name: str) -> Optional[Table]:
        """Access without counting (catalog sampling, not query execution)."""
        return self.tables.get(name)

    def __contains__(self, name: str) -> bool:
        return name in self.tables


# --- predicates --------------------------------------------------------------

@dataclass(frozen=True)
class NotPred:
    inner: "Predicate"

    def sql(self) -> str:
        return f"NOT({self.inner.sql()})"


@dataclass(frozen=True)
class AndPred:
    parts: tuple["Predicate", ...]

    def sql(self) -> str:
        return " AND ".join(p.sql() for p in self.parts)


Predicate = Union[Comparison, NotPred, AndPred]


def compare_values(lhs: Value, op: str, rhs: Value) -> bool:
    if lhs is None or rhs is None:
        return False
    if isinstance(lhs, (int, float)) and isinstance(rhs, (int, float)):
        a, b = float(lhs), float(rhs)
    else:
        a, b = str(lhs), str(rhs)
    if op == "=":
        return a == b
    if op == "<>":
        return a != b
    if op == "<":
        return a < b
    if op == ">":
        return a > b
    if op == "<=":
        return a <= b
    if op == ">=":
        return a >= b
    raise ValueError(f"unknown comparison operator {op}")


def _operand_value(op, row: dict[str, Value], models=None) -> Value:
    if isinstance(op, Literal):
        return op.value
    if isinstance(op, (AttrRef, BareToken)):
        name = op.name
        if isinstance(op, AttrRef) and op.qualifier and name not in row:
            name = f"{op.qualifier}.{op.name}"
        if name not in row:
            raise KeyError(name)
        return row[name]
    raise TypeError(f"cannot evaluate operand {op!r} without model context")


def eval_predicate(pred: Predicate, row: dict[str, Value]) -> bool:
    if isinstance(pred, Comparison):
        return compare_values(
            _operand_value(pred.lhs, row), pred.op, _operand_value(pred.rhs, row)
        )
    if isinstance(pred, NotPred):
        return not eval_predicate(pred.inner, row)
    if isinstance(pred, AndPred):
        return all(eval_predicate(p, row) for p in pred.parts)
    raise TypeError(f"unknown predicate {pred!r}")


def predicate_to_json(pred: Optional[Predicate]):
    if pred is None:
        return None
    if isinstance(pred, Comparison):
        return pred.sql()
    if isinstance(pred, NotPred):
        return {"not": predicate_to_json(pred.inner)}
    if isinstance(pred, AndPred):
        return {"and": [predicate_to_json(p) for p in pred.parts]}
    raise TypeError(f"unknown predicate {pred!r}")


def predicate_from_json(data) -> Optional[Predicate]:
    from .frontend import parse_predicate

    if data is None:
        return None
    if isinstance(data, str):
        return parse_predicate(data)
    if "not" in data:
        return NotPred(predicate_from_json(data["not"]))
    if "and" in data:
        return AndPred(tuple(predicate_from_json(p) for p in data["and"]))
    raise ValueError(f"bad predicate payload {data!r}")
