"""Data catalog: schemas, sensitivity annotations, access policies, budget ledger.

The catalog is the single source of truth for what is sensitive. Owners
either taint attributes directly (annotate_taint) or register view-based
access policies from which per-role taints are derived: an attribute a role
cannot see through any view is tainted for that role, and the complement of
a view's row filter becomes a tuple-level taint predicate.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .errors import (
    InsufficientBudget,
    InvalidParameter,
    UnknownAttribute,
    UnknownRelation,
    UnknownRole,
)
from .tables import (
    AndPred,
    NotPred,
    Predicate,
    TableStore,
    predicate_from_json,
    predicate_to_json,
)

DEFAULT_ROLE_EPSILON = 1.0
DEFAULT_DELTA = 1e-5
REDACTION_MARKER = "REDACTED"


@dataclass
class AttributeDescriptor:
    name: str
    data_type: str  # int64 | float64 | text | blob
    tainted: bool = False
    per_role_epsilon: dict[str, float] = field(default_factory=dict)
    clamp_bound: Optional[float] = None  # sensitivity bound for SUM/AVG perturbation

    def __post_init__(self):
        if self.data_type not in ("int64", "float64", "text", "blob"):
            raise InvalidParameter(f"unknown data type {self.data_type}")
        for role, eps in self.per_role_epsilon.items():
            if eps <= 0:
                raise InvalidParameter(f"per-role epsilon for {role} must be > 0")


@dataclass
class RelationDescriptor:
    name: str
    attributes: list[AttributeDescriptor]
    tuple_taint_predicate: Optional[Predicate] = None
    row_count_estimate: int = 0

    def __post_init__(self):
        if not self.attributes:
            raise InvalidParameter(f"relation {self.name} needs at least one attribute")
        names = [a.name for a in self.attributes]
        if len(names) != len(set(names)):
            raise InvalidParameter(f"duplicate attribute names in {self.name}")

    def has_attribute(self, name: str) -> bool:
        return any(a.name == name for a in self.attributes)

    def attribute(self, name: str) -> AttributeDescriptor:
        for a in self.attributes:
            if a.name == name:
                return a
        raise UnknownAttribute(f"{self.name}.{name}")

    def tainted_attributes(self) -> set[str]:
        return {a.name for a in self.attributes if a.tainted}


@dataclass
class PolicyView:
    base_relation: str
    retained_attributes: list[str]
    row_filter: Optional[Predicate] = None


@dataclass
class AccessPolicy:
    role: str
    views: list[PolicyView]


@dataclass
class TaintAnnotation:
    """One role-scoped taint fact derived from a policy."""

    relation: str
    attributes: set[str]
    tuple_predicate: Optional[Predicate]
    role: str


@dataclass
class DebitEntry:
    timestamp: float
    user: str
    dataset: str
    plan_id: str
    epsilon: float


@dataclass
class BudgetAccount:
    epsilon_initial: float
    epsilon_remaining: float
    delta: float = DEFAULT_DELTA


class BudgetLedger:
    """Per-dataset and per-user remaining (epsilon, delta), with an append-only
    debit log. All mutations go through a single lock; debits are atomic."""

    def __init__(self):
        self.dataset_budgets: dict[str, BudgetAccount] = {}
        self.user_budgets: dict[str, BudgetAccount] = {}
        self.debit_log: list[DebitEntry] = []
        self._lock = threading.Lock()

    def register_dataset(self, name: str, epsilon: float, delta: float = DEFAULT_DELTA):
        self.dataset_budgets[name] = BudgetAccount(epsilon, epsilon, delta)

    def register_user(self, name: str, epsilon: float, delta: float = DEFAULT_DELTA):
        self.user_budgets[name] = BudgetAccount(epsilon, epsilon, delta)

    def remaining(self, dataset: str, user: str) -> tuple[float, float]:
        return (
            self.dataset_budgets[dataset].epsilon_remaining,
            self.user_budgets[user].epsilon_remaining,
        )

    def debit(self, dataset: str, user: str, epsilon: float, plan_id: str) -> None:
        if epsilon < 0:
            raise InvalidParameter("epsilon must be nonnegative")
        with self._lock:
            if dataset not in self.dataset_budgets:
                raise InvalidParameter(f"no budget account for dataset {dataset}")
            if user not in self.user_budgets:
                raise InvalidParameter(f"no budget account for user {user}")
            daccount = self.dataset_budgets[dataset]
            uaccount = self.user_budgets[user]
            if epsilon > daccount.epsilon_remaining:
                raise InsufficientBudget(
                    f"dataset {dataset} has {daccount.epsilon_remaining} epsilon left,"
                    f" plan needs {epsilon}"
                )
            if epsilon > uaccount.epsilon_remaining:
                raise InsufficientBudget(
                    f"user {user} has {uaccount.epsilon_remaining} epsilon left,"
                    f" plan needs {epsilon}"
                )
            # inf - inf is nan; an infinite account stays infinite
            if daccount.epsilon_remaining != float("inf"):
                daccount.epsilon_remaining -= epsilon
            if uaccount.epsilon_remaining != float("inf"):
                uaccount.epsilon_remaining -= epsilon
            self.debit_log.append(DebitEntry(time.time(), user, dataset, plan_id, epsilon))

    def to_json(self) -> dict:
        def accounts(d):
            return {
                k: {
                    "epsilon_initial": v.epsilon_initial,
                    "epsilon_remaining": v.epsilon_remaining,
                    "delta": v.delta,
                }
                for k, v in d.items()
            }

        return {
            "dataset_budgets": accounts(self.dataset_budgets),
            "user_budgets": accounts(self.user_budgets),
            "debit_log": [
                {
                    "timestamp": e.timestamp,
                    "user": e.user,
                    "dataset": e.dataset,
                    "plan_id": e.plan_id,
                    "epsilon": e.epsilon,
                }
                for e in self.debit_log
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "BudgetLedger":
        ledger = cls()
        for key, ctor in (("dataset_budgets", ledger.dataset_budgets),
                          ("user_budgets", ledger.user_budgets)):
            for name, acc in data.get(key, {}).items():
                ctor[name] = BudgetAccount(
                    acc["epsilon_initial"], acc["epsilon_remaining"], acc["delta"]
                )
        for e in data.get("debit_log", []):
            ledger.debit_log.append(
                DebitEntry(e["timestamp"], e["user"], e["dataset"], e["plan_id"], e["epsilon"])
            )
        return ledger


class Catalog:
    def __init__(self):
        self.relations: dict[str, RelationDescriptor] = {}
        self.policies: list[AccessPolicy] = []
        self.ledger = BudgetLedger()
        self.roles: set[str] = set()
        self.version = 0

    # --- schema management ---

    def add_relation(self, rel: RelationDescriptor) -> None:
        self.relations[rel.name] = rel

    def relation(self, name: str) -> RelationDescriptor:
        if name not in self.relations:
            raise UnknownRelation(name)
        return self.relations[name]

    def add_role(self, role: str) -> None:
        self.roles.add(role)

    # --- taint annotation ---

    def annotate_taint(
        self,
        relation: str,
        attributes: Iterable[str],
        tuple_predicate: Optional[Predicate] = None,
        params: Optional[dict[str, float]] = None,
    ) -> bool:
        """Mark attributes tainted; returns True when the catalog state changed.

        Idempotent: repeating the same annotation leaves the catalog unchanged.
        """
        rel = self.relation(relation)
        attributes = list(attributes)
        for name in attributes:
            if not rel.has_attribute(name):
                raise UnknownAttribute(f"{relation}.{name}")
        changed = False
        for name in attributes:
            attr = rel.attribute(name)
            if not attr.tainted:
                attr.tainted = True
                changed = True
            for role, eps in (params or {}).items():
                if attr.per_role_epsilon.get(role) != eps:
                    if eps <= 0:
                        raise InvalidParameter("per-role epsilon must be > 0")
                    attr.per_role_epsilon[role] = eps
                    changed = True
        if tuple_predicate is not None and rel.tuple_taint_predicate != tuple_predicate:
            rel.tuple_taint_predicate = tuple_predicate
            changed = True
        for role in (params or {}):
            if role not in self.roles:
                self.roles.add(role)
                changed = True
        if changed:
            self.version += 1
        return changed

    def add_policy(self, policy: AccessPolicy) -> list[TaintAnnotation]:
        """Store a policy and return the taints it implies (also see
        extract_taints_from_policy)."""
        annotations = self.extract_taints_from_policy(policy)
        self.policies.append(policy)
        self.roles.add(policy.role)
        self.version += 1
        return annotations

    def extract_taints_from_policy(self, policy: AccessPolicy) -> list[TaintAnnotation]:
        """Derive role-scoped taints: attributes absent from every view of the
        role are tainted; row-filter complements become tuple taint predicates."""
        by_relation: dict[str, list[PolicyView]] = {}
        for view in policy.views:
            rel = self.relation(view.base_relation)
            for name in view.retained_attributes:
                if not rel.has_attribute(name):
                    raise UnknownAttribute(f"{view.base_relation}.{name}")
            by_relation.setdefault(view.base_relation, []).append(view)
        annotations = []
        for rel_name, views in by_relation.items():
            rel = self.relations[rel_name]
            visible: set[str] = set()
            for view in views:
                visible.update(view.retained_attributes)
            hidden = {a.name for a in rel.attributes} - visible
            filters = [v.row_filter for v in views if v.row_filter is not None]
            tuple_pred: Optional[Predicate] = None
            if filters and len(filters) == len(views):
                # rows outside every view are tainted for this role
                complements = tuple(NotPred(f) for f in filters)
                tuple_pred = complements[0] if len(complements) == 1 else AndPred(complements)
            if hidden or tuple_pred is not None:
                annotations.append(TaintAnnotation(rel_name, hidden, tuple_pred, policy.role))
        return annotations

    def taints_for(self, role: Optional[str] = None) -> dict[str, set[str]]:
        """Effective attribute taints per relation: owner annotations plus any
        policy-derived taints for the given role."""
        taints = {name: rel.tainted_attributes() for name, rel in self.relations.items()}
        if role is not None:
            for policy in self.policies:
                if policy.role != role:
                    continue
                for ann in self.extract_taints_from_policy(policy):
                    taints.setdefault(ann.relation, set()).update(ann.attributes)
        return {k: v for k, v in taints.items()}

    def tuple_taint_predicates(self, role: Optional[str] = None) -> dict[str, list[Predicate]]:
        preds: dict[str, list[Predicate]] = {}
        for name, rel in self.relations.items():
            if rel.tuple_taint_predicate is not None:
                preds.setdefault(name, []).append(rel.tuple_taint_predicate)
        if role is not None:
            for policy in self.policies:
                if policy.role != role:
                    continue
                for ann in self.extract_taints_from_policy(policy):
                    if ann.tuple_predicate is not None:
                        preds.setdefault(ann.relation, []).append(ann.tuple_predicate)
        return preds

    # --- redacted schema view ---

    def describe(self, role: str, tables: Optional[TableStore] = None) -> dict:
        """Role-redacted schema listing: tainted attributes keep their names but
        sample values are replaced by a redaction marker."""
        if role not in self.roles:
            raise UnknownRole(role)
        taints = self.taints_for(role)
        out = {"role": role, "relations": []}
        for name in sorted(self.relations):
            rel = self.relations[name]
            table = tables.peek(name) if tables is not None else None
            attrs = []
            for a in rel.attributes:
                redacted = a.name in taints.get(name, set())
                if redacted:
                    samples: list | str = REDACTION_MARKER
                elif table is not None:
                    seen: list = []
                    for v in table.column(a.name):
                        if v not in seen:
                            seen.append(v)
                        if len(seen) >= 3:
                            break
                    samples = seen
                else:
                    samples = []
                attrs.append(
                    {
                        "name": a.name,
                        "data_type": a.data_type,
                        "redacted": redacted,
                        "samples": samples,
                    }
                )
            out["relations"].append(
                {"name": name, "row_count_estimate": rel.row_count_estimate, "attributes": attrs}
            )
        return out

    def debit(self, dataset: str, user: str, epsilon: float, plan_id: str) -> None:
        self.ledger.debit(dataset, user, epsilon, plan_id)

    # --- persistence (one JSON document: relations, policies, ledger) ---

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "roles": sorted(self.roles),
            "relations": [
                {
                    "name": rel.name,
                    "attributes": [
                        {
                            "name": a.name,
                            "data_type": a.data_type,
                            "tainted": a.tainted,
                            "per_role_epsilon": a.per_role_epsilon,
                            "clamp_bound": a.clamp_bound,
                        }
                        for a in rel.attributes
                    ],
                    "tuple_taint_predicate": predicate_to_json(rel.tuple_taint_predicate),
                    "row_count_estimate": rel.row_count_estimate,
                }
                for rel in self.relations.values()
            ],
            "policies": [
                {
                    "role": p.role,
                    "views": [
                        {
                            "base_relation": v.base_relation,
                            "retained_attributes": v.retained_attributes,
                            "row_filter": predicate_to_json(v.row_filter),
                        }
                        for v in p.views
                    ],
                }
                for p in self.policies
            ],
            "ledger": self.ledger.to_json(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Catalog":
        cat = cls()
        cat.version = data.get("version", 0)
        cat.roles = set(data.get("roles", []))
        for rel in data.get("relations", []):
            cat.add_relation(
                RelationDescriptor(
                    rel["name"],
                    [
                        AttributeDescriptor(
                            a["name"],
                            a["data_type"],
                            a.get("tainted", False),
                            dict(a.get("per_role_epsilon", {})),
                            a.get("clamp_bound"),
                        )
                        for a in rel["attributes"]
                    ],
                    predicate_from_json(rel.get("tuple_taint_predicate")),
                    rel.get("row_count_estimate", 0),
                )
            )
        for p in data.get("policies", []):
            cat.policies.append(
                AccessPolicy(
                    p["role"],
                    [
                        PolicyView(
                            v["base_relation"],
                            list(v["retained_attributes"]),
                            predicate_from_json(v.get("row_filter")),
                        )
                        for v in p["views"]
                    ],
                )
            )
            cat.roles.add(p["role"])
        cat.ledger = BudgetLedger.from_json(data.get("ledger", {}))
        return cat

    def save(self, path: str | Path) -> None:
        tmp = Path(str(path) + ".tmp")
        tmp.write_text(json.dumps(self.to_json(), indent=2))
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "Catalog":
        return cls.from_json(json.loads(Path(path).read_text()))
