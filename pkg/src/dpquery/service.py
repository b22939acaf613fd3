"""HTTP+JSON service exposing the five-step workflow with on-disk persistence.

Every mutating store (catalog+ledger, cost model, registry) is persisted via
atomic rename immediately after the mutation, so a restarted process
reproduces all pre-crash GET responses. Sessions are in-memory; the workflow
state machine (analyzed -> recommended -> selected -> executed) returns 409
on out-of-order calls, 402 on exhausted budgets.
"""

from __future__ import annotations

import json
import threading
import uuid
from pathlib import Path
from typing import Optional

from fastapi import Body, FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from .catalog import Catalog
from .engine import Analysis, analyze, materialize_plan, recommend, run_materialized
from .errors import (
    DpQueryError,
    InsufficientBudget,
    ModelMissing,
    NoFeasiblePlan,
    QuerySyntaxError,
    SemanticError,
    UnknownAttribute,
    UnknownPlan,
    UnknownRelation,
    UnknownRole,
    VersionConflict,
    WorkflowStateError,
)
from .frontend import parse_predicate
from .learn.registry import ModelRegistry
from .optimizer import CostModel, UserConstraints, feedback as cost_feedback
from .scenarios import Workspace, load_scenario

_STATUS = {
    QuerySyntaxError: 400,
    SemanticError: 400,
    UnknownRelation: 404,
    UnknownAttribute: 404,
    UnknownRole: 404,
    UnknownPlan: 404,
    ModelMissing: 404,
    InsufficientBudget: 402,
    NoFeasiblePlan: 409,
    WorkflowStateError: 409,
    VersionConflict: 409,
}

_ORDER = ["analyzed", "recommended", "selected", "executed"]


class Session:
    def __init__(self, user: str, role: str, sql: str, analysis: Analysis):
        self.session_id = uuid.uuid4().hex[:12]
        self.user = user
        self.role = role
        self.sql = sql
        self.analysis = analysis
        self.recommendation = None
        self.selected = None  # MaterializedPlan
        self.receipts: list[dict] = []
        self.state = "analyzed"

    def require(self, minimum: str) -> None:
        if _ORDER.index(self.state) < _ORDER.index(minimum):
            raise WorkflowStateError(
                f"session is in state {self.state!r}, endpoint needs {minimum!r}"
            )


class ServiceState:
    def __init__(self, data_dir: str | Path, scenario: Optional[str] = None):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        meta_path = self.data_dir / "service_meta.json"
        if meta_path.exists():
            scenario = json.loads(meta_path.read_text())["scenario"]
        elif scenario is None:
            scenario = "imdb_sentiment"
        self.scenario = scenario
        meta_path.write_text(json.dumps({"scenario": scenario}))

        self.ws: Workspace = load_scenario(scenario, self.data_dir)
        catalog_path = self.data_dir / "catalog.json"
        cost_path = self.data_dir / "cost_model.json"
        if catalog_path.exists():
            self.ws.catalog = Catalog.load(catalog_path)
        if cost_path.exists():
            self.ws.cost_model = CostModel.load(cost_path)
        registry_dir = self.data_dir / "registry"
        disk_registry = ModelRegistry(registry_dir)
        for artifact in self.ws.registry.artifacts.values():
            if artifact.id not in disk_registry:
                disk_registry.add(artifact)
        self.ws.registry = disk_registry

        self.sessions: dict[str, Session] = {}
        self.lock = threading.RLock()
        self.persist()

    def persist(self) -> None:
        self.ws.catalog.save(self.data_dir / "catalog.json")
        self.ws.cost_model.save(self.data_dir / "cost_model.json")

    def session(self, session_id: str) -> Session:
        if session_id not in self.sessions:
            raise UnknownPlan(f"unknown session {session_id}")
        return self.sessions[session_id]


def create_app(data_dir: str | Path, scenario: Optional[str] = None) -> FastAPI:
    state = ServiceState(data_dir, scenario)
    app = FastAPI(title="declarative privacy-preserving inference queries")
    app.state.service = state
    # the browser UI is served from a different origin than the API
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.exception_handler(DpQueryError)
    async def handle_domain_error(request: Request, exc: DpQueryError):
        status = 400
        for klass, code in _STATUS.items():
            if isinstance(exc, klass):
                status = code
                break
        body = {"code": exc.code, "message": exc.message, "detail": exc.detail}
        if isinstance(exc, QuerySyntaxError):
            body["line"], body["col"] = exc.line, exc.col
        return JSONResponse(status_code=status, content=body)

    @app.post("/catalog/annotate")
    def catalog_annotate(payload: dict = Body(...)):
        with state.lock:
            expected = payload.get("expected_version")
            if expected is not None and expected != state.ws.catalog.version:
                raise VersionConflict(
                    f"catalog at version {state.ws.catalog.version}, request expected {expected}"
                )
            predicate = payload.get("tuple_predicate")
            changed = state.ws.catalog.annotate_taint(
                payload["relation"],
                payload.get("attributes", []),
                parse_predicate(predicate) if predicate else None,
                payload.get("params", {}),
            )
            state.persist()
            return {"changed": changed, "version": state.ws.catalog.version}

    @app.get("/catalog")
    def catalog_describe(role: str):
        return state.ws.catalog.describe(role, state.ws.tables)

    @app.post("/query/analyze")
    def query_analyze(payload: dict = Body(...)):
        with state.lock:
            analysis = analyze(
                state.ws, payload["sql"],
                payload.get("role", state.ws.default_role),
            )
            session = Session(
                payload.get("user", state.ws.default_user),
                payload.get("role", state.ws.default_role),
                payload["sql"],
                analysis,
            )
            state.sessions[session.session_id] = session
            return {"session_id": session.session_id, **analysis.to_json()}

    @app.post("/plans/recommend")
    def plans_recommend(payload: dict = Body(...)):
        with state.lock:
            session = state.session(payload["session"])
            session.require("analyzed")
            constraints = UserConstraints.from_json(payload.get("constraints"))
            if payload.get("constraints") and "weights" in payload["constraints"] \
                    and session.role != "admin":
                # scalarization weights are an admin-tunable default
                constraints.weights = state.ws.constraints.weights
            if not payload.get("constraints"):
                constraints = state.ws.constraints
            rec = recommend(state.ws, session.analysis, session.user, constraints)
            session.recommendation = rec
            if _ORDER.index(session.state) < _ORDER.index("recommended"):
                session.state = "recommended"
            return rec.to_json()

    @app.post("/plans/select")
    def plans_select(payload: dict = Body(...)):
        with state.lock:
            session = state.session(payload["session"])
            session.require("recommended")
            plan = next(
                (p for p in session.recommendation.plans
                 if p.plan_id == payload["plan_id"]),
                None,
            )
            if plan is None:
                raise UnknownPlan(payload["plan_id"])
            mat = materialize_plan(state.ws, plan)
            session.selected = mat
            session.state = "selected"
            state.persist()
            return {
                "plan_id": plan.plan_id,
                "model_id": mat.model_id,
                "store_id": mat.store_id,
            }

    @app.post("/execute")
    def execute_endpoint(payload: dict = Body(...)):
        with state.lock:
            session = state.session(payload["session"])
            session.require("selected")
            table, receipt = run_materialized(
                state.ws, session.selected, session.user,
                seed=payload.get("seed", 0),
            )
            session.state = "executed"
            session.receipts.append(receipt.to_json())
            state.persist()
            return {
                "schema": [{"name": n, "data_type": t} for n, t in table.schema],
                "rows": [list(r) for r in table.rows],
                "receipt": receipt.to_json(),
            }

    @app.post("/feedback")
    def feedback_endpoint(payload: dict = Body(...)):
        with state.lock:
            plan_id = payload["plan_id"]
            if plan_id not in state.ws.cost_model.executed_plans:
                raise WorkflowStateError(f"plan {plan_id} has not been executed")
            cost_feedback(
                plan_id,
                {"latency_ms": payload.get("latency_ms"),
                 "accuracy": payload.get("accuracy")},
                state.ws.cost_model,
            )
            state.persist()
            return {"ok": True}

    @app.get("/budget")
    def budget(user: str, dataset: str):
        ledger = state.ws.catalog.ledger
        if dataset not in ledger.dataset_budgets:
            raise UnknownRelation(dataset)
        if user not in ledger.user_budgets:
            raise UnknownRole(user)
        d = ledger.dataset_budgets[dataset]
        u = ledger.user_budgets[user]
        return {
            "dataset": {"name": dataset, "epsilon_remaining": d.epsilon_remaining,
                        "epsilon_initial": d.epsilon_initial, "delta": d.delta},
            "user": {"name": user, "epsilon_remaining": u.epsilon_remaining,
                     "epsilon_initial": u.epsilon_initial, "delta": u.delta},
        }

    return app
