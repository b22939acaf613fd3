"""Cost estimation, Pareto filtering, budget-constrained plan selection, and
cost-model refinement from execution feedback.

Accuracy curves are piecewise-linear over a fixed epsilon grid and always
monotone nondecreasing (isotonic clamp after every update). Latency is a
linear model (per-row, fixed) refit online by recursive least squares.
acc_drop is measured against exact execution, i.e. acc_drop = 1 - acc(eps).
"""

from __future__ import annotations

import bisect
import json
import math
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import NoFeasiblePlan, UnknownPlan
from .ir import IrGraph
from .rewrite import (
    RULE_PASS,
    RULE_S1,
    RULE_S2,
    RULE_S2A,
    RULE_S3,
    RULE_S4,
    CandidatePlan,
    TrainingRequest,
)
from .taint import SensitiveRegion

EPS_GRID = (0.5, 1.0, 2.0, 4.0, 6.0, 8.0, 16.0, math.inf)
EMA_WEIGHT = 0.3
TRAINING_AMORTIZATION_QUERIES = 10
DEFAULT_WEIGHTS = (1.0, 10.0, 0.001)  # (epsilon, acc_drop, latency_ms)

# accuracy priors per rule family; S4 is analytic, S3 sits 0.05 below S1
_MODEL_PRIOR = (0.50, 0.58, 0.66, 0.74, 0.80, 0.84, 0.90, 0.95)


@dataclass
class CostVector:
    epsilon: float
    acc_drop: float
    latency_ms: float

    def __post_init__(self):
        if self.epsilon < 0 or not (0 <= self.acc_drop <= 1) or self.latency_ms < 0:
            raise ValueError(f"bad cost vector {self}")
        if not (math.isfinite(self.acc_drop) and math.isfinite(self.latency_ms)):
            raise ValueError("acc_drop and latency must be finite")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.epsilon, self.acc_drop, self.latency_ms)

    def to_json(self) -> dict:
        return {"epsilon": self.epsilon, "acc_drop": self.acc_drop,
                "latency_ms": self.latency_ms}


@dataclass
class UserConstraints:
    max_epsilon: float = math.inf
    min_accuracy: float = 0.0
    max_latency_ms: float = math.inf
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS
    k: int = 3

    @classmethod
    def from_json(cls, data: Optional[dict]) -> "UserConstraints":
        data = data or {}
        return cls(
            max_epsilon=data.get("max_epsilon", math.inf),
            min_accuracy=data.get("min_accuracy", 0.0),
            max_latency_ms=data.get("max_latency_ms", math.inf),
            weights=tuple(data.get("weights", DEFAULT_WEIGHTS)),
            k=data.get("k", 3),
        )


def isotonic_increasing(values: Sequence[float],
                        weights: Optional[Sequence[float]] = None) -> list[float]:
    """Pool-adjacent-violators: weighted least-squares monotone nondecreasing
    fit. A large weight pins a point (fresh observations outrank stale priors)."""
    weights = list(weights) if weights is not None else [1.0] * len(values)
    blocks = [[float(v), float(w), 1] for v, w in zip(values, weights)]
    i = 0
    while i < len(blocks) - 1:
        if blocks[i][0] > blocks[i + 1][0] + 1e-15:
            total = blocks[i][0] * blocks[i][1] + blocks[i + 1][0] * blocks[i + 1][1]
            weight = blocks[i][1] + blocks[i + 1][1]
            blocks[i] = [total / weight, weight, blocks[i][2] + blocks[i + 1][2]]
            del blocks[i + 1]
            i = max(i - 1, 0)
        else:
            i += 1
    out: list[float] = []
    for value, _, count in blocks:
        out.extend([value] * count)
    return out


class RecursiveLeastSquares:
    """theta = [per_row_ms, fixed_ms] fit on (cardinality, latency) pairs."""

    def __init__(self, theta: Optional[Sequence[float]] = None,
                 p: Optional[Sequence[Sequence[float]]] = None):
        self.theta = np.array(theta if theta is not None else [1e-3, 0.1])
        self.p = np.array(p if p is not None else np.eye(2) * 1e6)

    def update(self, cardinality: float, latency_ms: float) -> None:
        x = np.array([float(cardinality), 1.0])
        px = self.p @ x
        gain = px / (1.0 + x @ px)
        self.theta = self.theta + gain * (latency_ms - x @ self.theta)
        self.p = self.p - np.outer(gain, px)

    def predict(self, cardinality: float) -> float:
        return float(max(0.0, self.theta[0] * cardinality + self.theta[1]))

    def to_json(self) -> dict:
        return {"theta": self.theta.tolist(), "p": self.p.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "RecursiveLeastSquares":
        return cls(data["theta"], data["p"])


@dataclass
class CurveEntry:
    values: list[float]
    observed: list[bool]

    @classmethod
    def prior(cls, rule_id: str) -> "CurveEntry":
        if rule_id == RULE_S3:
            vals = [max(0.0, v - 0.05) for v in _MODEL_PRIOR]
        else:
            vals = list(_MODEL_PRIOR)
        return cls(vals, [False] * len(EPS_GRID))


class CostModel:
    """Learned accuracy curves keyed by (rule, task fingerprint), plus latency
    estimators per rule and the observation log."""

    PER_STEP_TRAIN_MS = 0.05

    def __init__(self):
        self.curves: dict[str, CurveEntry] = {}
        self.latency: dict[str, RecursiveLeastSquares] = {}
        self.observations: list[dict] = []
        self.executed_plans: dict[str, dict] = {}
        self._lock = threading.Lock()

    @staticmethod
    def key(rule_id: str, fingerprint: str) -> str:
        return f"{rule_id}|{fingerprint}"

    def curve(self, rule_id: str, fingerprint: str) -> CurveEntry:
        key = self.key(rule_id, fingerprint)
        if key not in self.curves:
            self.curves[key] = CurveEntry.prior(rule_id)
        return self.curves[key]

    def set_curve(self, rule_id: str, fingerprint: str, values: Sequence[float],
                  observed: bool = True) -> None:
        vals = isotonic_increasing(values)
        self.curves[self.key(rule_id, fingerprint)] = CurveEntry(
            list(vals), [observed] * len(EPS_GRID)
        )

    def accuracy_at(self, rule_id: str, fingerprint: str, epsilon: float) -> tuple[float, bool]:
        """Interpolated acc(eps) and whether any supporting point was observed."""
        entry = self.curve(rule_id, fingerprint)
        grid = EPS_GRID
        if epsilon >= grid[-2] * 2:
            return entry.values[-1], entry.observed[-1]
        if epsilon <= grid[0]:
            return entry.values[0], entry.observed[0]
        hi = bisect.bisect_left(grid, epsilon)
        lo = hi - 1
        if math.isinf(grid[hi]):
            return entry.values[lo], entry.observed[lo]
        frac = (epsilon - grid[lo]) / (grid[hi] - grid[lo])
        acc = entry.values[lo] + frac * (entry.values[hi] - entry.values[lo])
        return acc, entry.observed[lo] or entry.observed[hi]

    def grid_index(self, epsilon: float) -> int:
        if epsilon >= 32 or math.isinf(epsilon):
            return len(EPS_GRID) - 1
        finite = EPS_GRID[:-1]
        return min(
            range(len(finite)),
            key=lambda i: abs(math.log(max(epsilon, 1e-9)) - math.log(finite[i])),
        )

    def latency_model(self, rule_id: str) -> RecursiveLeastSquares:
        if rule_id not in self.latency:
            self.latency[rule_id] = RecursiveLeastSquares()
        return self.latency[rule_id]

    def record_execution(self, plan: CandidatePlan, cardinality: int) -> None:
        with self._lock:
            self.executed_plans[plan.plan_id] = {
                "rule_id": plan.rule_id,
                "fingerprint": plan.fingerprint,
                "epsilon": plan.epsilon,
                "cardinality": cardinality,
            }

    # --- persistence ---

    def to_json(self) -> dict:
        return {
            "curves": {
                k: {"values": e.values, "observed": e.observed}
                for k, e in self.curves.items()
            },
            "latency": {k: m.to_json() for k, m in self.latency.items()},
            "observations": self.observations,
            "executed_plans": self.executed_plans,
        }

    @classmethod
    def from_json(cls, data: dict) -> "CostModel":
        model = cls()
        for k, e in data.get("curves", {}).items():
            model.curves[k] = CurveEntry(list(e["values"]), list(e["observed"]))
        for k, m in data.get("latency", {}).items():
            model.latency[k] = RecursiveLeastSquares.from_json(m)
        model.observations = list(data.get("observations", []))
        model.executed_plans = dict(data.get("executed_plans", {}))
        return model

    def save(self, path: str | Path) -> None:
        tmp = Path(str(path) + ".tmp")
        tmp.write_text(json.dumps(self.to_json(), indent=2))
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "CostModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def _plan_cardinality(plan: CandidatePlan) -> int:
    """Rows the privacy-bearing operator must process."""
    ir = plan.base_ir
    if plan.region is None:
        return ir.edge(ir.sink).cardinality
    from .rewrite import region_shape

    shape = region_shape(ir, plan.region)
    if plan.rule_id in (RULE_S2, RULE_S2A):
        return 1
    if plan.rule_id in (RULE_S1, RULE_S3) and shape.predicts:
        return ir.edge(ir.node(shape.predicts[0]).children[0]).cardinality
    if shape.aggregate is not None:
        return ir.edge(ir.node(shape.aggregate).children[0]).cardinality
    return ir.edge(plan.region.root).cardinality


def estimate(plan: CandidatePlan, cost_model: CostModel) -> CostVector:
    """Fill the plan's cost vector: accountant/mechanism epsilon, curve-based
    or analytic accuracy drop, linear latency."""
    card = _plan_cardinality(plan)
    latency = cost_model.latency_model(plan.rule_id).predict(card)
    low_confidence = False

    if plan.rule_id == RULE_PASS:
        cost = CostVector(0.0, 0.0, latency)
    elif plan.rule_id == RULE_S4:
        b = plan.mech_params["sensitivity"] / plan.mech_params["epsilon"]
        magnitude = _expected_magnitude(plan, card)
        drop = min(1.0, b / max(magnitude, 1.0))
        cost = CostVector(plan.epsilon, drop, latency)
    else:
        acc, observed = cost_model.accuracy_at(
            plan.rule_id, plan.fingerprint, plan.epsilon
        )
        low_confidence = not observed
        drop = min(1.0, max(0.0, 1.0 - acc))
        if isinstance(plan.binding, TrainingRequest):
            latency += (
                CostModel.PER_STEP_TRAIN_MS
                * plan.binding.dpsgd.steps
                / TRAINING_AMORTIZATION_QUERIES
            )
        cost = CostVector(plan.epsilon, drop, latency)
    plan.cost = cost
    plan.low_confidence = low_confidence
    return cost


def _expected_magnitude(plan: CandidatePlan, cardinality: int) -> float:
    func = plan.mech_params.get("func", "COUNT")
    sensitivity = plan.mech_params.get("sensitivity", 1.0)
    if func == "COUNT":
        return float(cardinality)
    if func == "SUM":
        return sensitivity * cardinality / 2.0
    return sensitivity / 2.0  # AVG


def dominates(a: CostVector, b: CostVector) -> bool:
    at, bt = a.as_tuple(), b.as_tuple()
    return all(x <= y for x, y in zip(at, bt)) and any(x < y for x, y in zip(at, bt))


def pareto(plans: Sequence[CandidatePlan]) -> list[CandidatePlan]:
    """Non-dominated subset under component-wise <=, ordered by (eps, latency).

    Sorted sweep: after ordering lexicographically, a plan can only be
    dominated by an earlier one, so each plan is checked against the frontier
    built so far.
    """
    if not plans:
        return []
    for plan in plans:
        assert plan.cost is not None, "estimate() must run before pareto()"
    ordered = sorted(
        plans, key=lambda p: (p.cost.epsilon, p.cost.latency_ms, p.cost.acc_drop)
    )
    frontier: list[CandidatePlan] = []
    for plan in ordered:
        if not any(dominates(kept.cost, plan.cost) for kept in frontier):
            frontier.append(plan)
    frontier.sort(key=lambda p: (p.cost.epsilon, p.cost.latency_ms))
    return frontier


def scalarize(cost: CostVector, weights: Sequence[float]) -> float:
    return (
        weights[0] * cost.epsilon
        + weights[1] * cost.acc_drop
        + weights[2] * cost.latency_ms
    )


@dataclass
class SelectionResult:
    chosen: list[CandidatePlan]
    top_k: list[CandidatePlan]
    frontier: list[CandidatePlan]
    base_latency_ms: float
    objective: float


def select(
    ir: IrGraph,
    regions: list[SensitiveRegion],
    candidates: list[CandidatePlan],
    ledger,
    dataset: str,
    user: str,
    constraints: UserConstraints,
    cost_model: CostModel,
) -> SelectionResult:
    """Bottom-up selection: accumulate per-operator latency over the IR and, at
    each region root, pick the feasible scheme minimizing the scalarized
    objective. Raises NoFeasiblePlan when a region has no feasible candidate."""
    remaining = min(ledger.remaining(dataset, user)) if dataset and user else math.inf
    eps_cap = min(constraints.max_epsilon, remaining)

    for plan in candidates:
        if plan.cost is None:
            estimate(plan, cost_model)

    def feasible(plan: CandidatePlan) -> bool:
        c = plan.cost
        return (
            c.epsilon <= eps_cap
            and (1.0 - c.acc_drop) >= constraints.min_accuracy
            and c.latency_ms <= constraints.max_latency_ms
        )

    # operator-level latency outside the regions (same for every plan choice)
    per_row = cost_model.latency_model(RULE_PASS).theta[0]
    region_nodes = set()
    for region in regions:
        region_nodes |= region.member_nodes
    base_latency = 0.0
    for nid in ir.topo_order():
        if nid in region_nodes:
            continue
        base_latency += per_row * ir.edge(nid).cardinality

    chosen: list[CandidatePlan] = []
    objective = constraints.weights[2] * base_latency
    if not regions:
        plan = next((p for p in candidates if p.rule_id == RULE_PASS), None)
        if plan is None:
            from .rewrite import passthrough_plan

            plan = passthrough_plan(ir)
            estimate(plan, cost_model)
        chosen = [plan]
        feasible_plans = [plan]
    else:
        feasible_plans = []
        for region in regions:
            region_plans = [
                p for p in candidates
                if p.region is not None and p.region.root == region.root
            ]
            ok = [p for p in region_plans if feasible(p)]
            if not ok:
                raise NoFeasiblePlan(
                    f"region at node {region.root}: no candidate satisfies "
                    f"eps<={eps_cap:.3g}, acc>={constraints.min_accuracy},"
                    f" latency<={constraints.max_latency_ms:.3g}ms"
                )
            best = min(ok, key=lambda p: (scalarize(p.cost, constraints.weights), p.plan_id))
            chosen.append(best)
            objective += scalarize(best.cost, constraints.weights)
            feasible_plans.extend(ok)

    frontier = pareto(feasible_plans)
    top_k = sorted(
        frontier, key=lambda p: (scalarize(p.cost, constraints.weights), p.plan_id)
    )[: constraints.k]
    return SelectionResult(chosen, top_k, frontier, base_latency, objective)


def feedback(
    plan_id: str,
    observed: dict,
    cost_model: CostModel,
) -> None:
    """Refine the cost model from an executed plan's observed accuracy/latency.

    Accuracy updates the curve point nearest the plan's epsilon by EMA and
    re-monotonizes; latency updates the rule's RLS estimator.
    """
    record = cost_model.executed_plans.get(plan_id)
    if record is None:
        raise UnknownPlan(plan_id)
    with cost_model._lock:
        rule_id, fingerprint = record["rule_id"], record["fingerprint"]
        if "accuracy" in observed and observed["accuracy"] is not None:
            entry = cost_model.curve(rule_id, fingerprint)
            idx = cost_model.grid_index(record["epsilon"])
            entry.values[idx] = (
                (1 - EMA_WEIGHT) * entry.values[idx] + EMA_WEIGHT * observed["accuracy"]
            )
            entry.observed[idx] = True
            # the fresh point is pinned; stale neighbors move to restore order
            pin = [1e6 if i == idx else 1.0 for i in range(len(entry.values))]
            entry.values = isotonic_increasing(entry.values, pin)
        if "latency_ms" in observed and observed["latency_ms"] is not None:
            cost_model.latency_model(rule_id).update(
                record["cardinality"], observed["latency_ms"]
            )
        cost_model.observations.append({"plan_id": plan_id, **observed})
