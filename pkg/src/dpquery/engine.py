"""End-to-end pipeline shared by the CLI and the HTTP service: analyze ->
enumerate -> select -> materialize -> execute -> feedback."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from . import optimizer as opt
from .executor import execute
from .frontend import QueryAst, bind, parse
from .ir import IrGraph, lower
from .rewrite import CandidatePlan, DroppedPlan, enumerate_plans, passthrough_plan
from .scenarios import Workspace
from .taint import SensitiveRegion, find_sensitive_regions, propagate
from .training import MaterializedPlan, materialize


@dataclass
class Analysis:
    sql: str
    ast: QueryAst
    ir: IrGraph
    regions: list[SensitiveRegion]
    role: str

    @property
    def region_nodes(self) -> set[int]:
        nodes: set[int] = set()
        for region in self.regions:
            nodes |= region.member_nodes
        return nodes

    def dot(self) -> str:
        return self.ir.to_dot(self.region_nodes)

    def to_json(self) -> dict:
        return {
            "sql": self.sql,
            "ir": self.ir.to_json(),
            "dot": self.dot(),
            "regions": [r.to_json() for r in self.regions],
        }


@dataclass
class Recommendation:
    plans: list[CandidatePlan]
    dropped: list[DroppedPlan]
    selection: opt.SelectionResult

    def to_json(self) -> dict:
        return {
            "top_k": [p.to_json() for p in self.selection.top_k],
            "chosen": [p.to_json() for p in self.selection.chosen],
            "frontier": [p.to_json() for p in self.selection.frontier],
            "dropped": [
                {"rule_id": d.rule_id, "region_root": d.region_root, "reason": d.reason}
                for d in self.dropped
            ],
        }


def analyze(ws: Workspace, sql: str, role: Optional[str] = None) -> Analysis:
    role = role or ws.default_role
    ast = bind(parse(sql), ws.catalog)
    ir = lower(ast, ws.catalog)
    annotated = propagate(ir, ws.catalog, role=role, tables=ws.tables)
    regions = find_sensitive_regions(annotated)
    return Analysis(sql, ast, annotated, regions, role)


def enumerate_candidates(
    ws: Workspace,
    analysis: Analysis,
    user: Optional[str] = None,
    enforce_budget: bool = True,
):
    user = user or ws.default_user
    plans, dropped = enumerate_plans(
        analysis.ir, analysis.regions, ws.catalog, ws.registry, ws.catalog.ledger,
        ws.default_dataset, user, ws.options, enforce_budget=enforce_budget,
    )
    if not analysis.regions:
        plans = [passthrough_plan(analysis.ir)]
    for plan in plans:
        opt.estimate(plan, ws.cost_model)
    return plans, dropped


def recommend(
    ws: Workspace,
    analysis: Analysis,
    user: Optional[str] = None,
    constraints: Optional[opt.UserConstraints] = None,
) -> Recommendation:
    user = user or ws.default_user
    constraints = constraints or ws.constraints
    plans, dropped = enumerate_candidates(ws, analysis, user)
    selection = opt.select(
        analysis.ir, analysis.regions, plans, ws.catalog.ledger,
        ws.default_dataset, user, constraints, ws.cost_model,
    )
    return Recommendation(plans, dropped, selection)


def materialize_plan(ws: Workspace, plan: CandidatePlan) -> MaterializedPlan:
    # oracle_models doubles as the runtime model store: stubs, trained
    # artifacts, and noisy stores all end up here
    return materialize(plan, ws.tables, ws.registry, ws.oracle_models,
                       ws.options.model_bindings)


def run_materialized(
    ws: Workspace,
    mat: MaterializedPlan,
    user: Optional[str] = None,
    seed: int = 0,
):
    user = user or ws.default_user
    models = ws.oracle_models
    for mid, artifact in ws.registry.artifacts.items():
        if mid not in models.models:
            models.add(mid, artifact)
    table, receipt = execute(
        mat.ir, ws.tables, models, ws.catalog.ledger,
        ws.default_dataset, user, plan_id=mat.plan.plan_id, seed=seed,
    )
    ws.cost_model.record_execution(mat.plan, opt._plan_cardinality(mat.plan))
    return table, receipt


def give_feedback(ws: Workspace, plan_id: str, latency_ms: Optional[float],
                  accuracy: Optional[float]) -> None:
    opt.feedback(plan_id, {"latency_ms": latency_ms, "accuracy": accuracy}, ws.cost_model)
