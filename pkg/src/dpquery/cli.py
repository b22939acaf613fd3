"""Batch CLI over the engine library.

Subcommands: annotate, analyze, recommend, execute, feedback, report, serve.
Exit codes: 0 ok, 1 parse/semantic error, 2 no feasible plan,
3 insufficient budget.

State (catalog+ledger, cost model, registry, executed plans) persists in
--data-dir so repeated invocations compose like one session.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

from .catalog import Catalog
from .engine import analyze, give_feedback, materialize_plan, recommend, run_materialized
from .errors import (
    DpQueryError,
    InsufficientBudget,
    NoFeasiblePlan,
    QuerySyntaxError,
    SemanticError,
)
from .optimizer import CostModel, UserConstraints
from .scenarios import Workspace, load_scenario

EXIT_PARSE = 1
EXIT_NO_PLAN = 2
EXIT_BUDGET = 3


def _load_workspace(args) -> Workspace:
    data_dir = Path(args.data_dir)
    ws = load_scenario(args.scenario, data_dir)
    catalog_path = data_dir / "catalog.json"
    cost_path = data_dir / "cost_model.json"
    if catalog_path.exists():
        ws.catalog = Catalog.load(catalog_path)
    if cost_path.exists():
        ws.cost_model = CostModel.load(cost_path)
    if args.seed is not None:
        ws.options.seed = args.seed
    return ws


def _persist(ws: Workspace) -> None:
    ws.catalog.save(ws.data_dir / "catalog.json")
    ws.cost_model.save(ws.data_dir / "cost_model.json")


def _emit(rows: list[dict], fmt: str, headers: list[str]) -> str:
    if fmt == "json":
        return json.dumps(rows, indent=2, default=str)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=headers, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
        return buf.getvalue().rstrip("\n")
    widths = {h: max(len(h), *(len(str(r.get(h, ""))) for r in rows)) if rows else len(h)
              for h in headers}
    lines = ["  ".join(h.ljust(widths[h]) for h in headers)]
    lines.append("  ".join("-" * widths[h] for h in headers))
    for r in rows:
        lines.append("  ".join(str(r.get(h, "")).ljust(widths[h]) for h in headers))
    return "\n".join(lines)


def _constraints(ws: Workspace, args) -> UserConstraints:
    c = ws.constraints
    return UserConstraints(
        max_epsilon=args.max_epsilon if args.max_epsilon is not None else c.max_epsilon,
        min_accuracy=args.min_accuracy if args.min_accuracy is not None else c.min_accuracy,
        max_latency_ms=c.max_latency_ms,
        weights=c.weights,
        k=args.k if args.k is not None else c.k,
    )


def cmd_annotate(args) -> int:
    ws = _load_workspace(args)
    params = json.loads(args.params) if args.params else {}
    changed = ws.catalog.annotate_taint(args.relation, args.attributes, None, params)
    _persist(ws)
    print(f"annotated {args.relation}: {', '.join(args.attributes)}"
          f" ({'changed' if changed else 'no change'})")
    return 0


def cmd_analyze(args) -> int:
    ws = _load_workspace(args)
    sql = args.sql or ws.queries["default"]
    analysis = analyze(ws, sql, args.role)
    rows = [
        {
            "region": i,
            "root": r.root,
            "members": " ".join(str(n) for n in sorted(r.member_nodes)),
            "tainted_inputs": " ".join(sorted(r.tainted_inputs)),
        }
        for i, r in enumerate(analysis.regions)
    ]
    print(_emit(rows, args.format, ["region", "root", "members", "tainted_inputs"]))
    if not analysis.regions:
        print("query touches no tainted data")
    dot_path = Path(args.data_dir) / "plan.dot"
    dot_path.write_text(analysis.dot())
    print(f"wrote {dot_path}")
    return 0


def cmd_recommend(args) -> int:
    ws = _load_workspace(args)
    sql = args.sql or ws.queries["default"]
    analysis = analyze(ws, sql, args.role)
    rec = recommend(ws, analysis, args.user, _constraints(ws, args))
    if not analysis.regions:
        print("no protection needed")
        return 0
    rows = [
        {
            "rank": i + 1,
            "plan_id": p.plan_id,
            "rule": p.rule_id,
            "epsilon": f"{p.cost.epsilon:.4g}",
            "acc_drop": f"{p.cost.acc_drop:.4f}",
            "latency_ms": f"{p.cost.latency_ms:.3f}",
            "explanation": p.explanation,
        }
        for i, p in enumerate(rec.selection.top_k)
    ]
    print(_emit(rows, args.format,
                ["rank", "plan_id", "rule", "epsilon", "acc_drop", "latency_ms",
                 "explanation"]))
    return 0


def cmd_execute(args) -> int:
    ws = _load_workspace(args)
    sql = args.sql or ws.queries["default"]
    analysis = analyze(ws, sql, args.role)
    if args.plan_id:
        # a pinned plan bypasses the planner's budget gate; the ledger debit
        # is the enforcement point
        from .engine import enumerate_candidates

        plans, _ = enumerate_candidates(ws, analysis, args.user, enforce_budget=False)
        plan = next((p for p in plans if p.plan_id == args.plan_id), None)
        if plan is None:
            print(f"unknown plan {args.plan_id}", file=sys.stderr)
            return EXIT_NO_PLAN
    else:
        rec = recommend(ws, analysis, args.user, _constraints(ws, args))
        plan = rec.selection.chosen[0]
    mat = materialize_plan(ws, plan)
    table, receipt = run_materialized(ws, mat, args.user, seed=args.seed or 0)
    _persist(ws)
    headers = [n for n, _ in table.schema]
    rows = [dict(zip(headers, r)) for r in table.rows]
    print(_emit(rows, args.format, headers))
    print(f"receipt: {json.dumps(receipt.to_json())}")
    return 0


def cmd_feedback(args) -> int:
    ws = _load_workspace(args)
    give_feedback(ws, args.plan_id, args.latency_ms, args.accuracy)
    _persist(ws)
    print(f"cost model updated from {args.plan_id}")
    return 0


def cmd_report(args) -> int:
    from .report import run_accuracy_sweep, write_pareto_report

    ws = _load_workspace(args)
    out_dir = Path(args.out or (Path(args.data_dir) / "report"))
    frontier = write_pareto_report(ws, out_dir)
    sweep = run_accuracy_sweep(ws, out_dir)
    print(f"wrote {out_dir}/pareto_frontier.csv (+.png): {len(frontier)} plans")
    print(f"wrote {out_dir}/accuracy_sweep.csv (+.png): {len(sweep)} grid points")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    addr = args.addr or os.environ.get("DPD_ADDR", "127.0.0.1:8080")
    host, _, port = addr.partition(":")
    app = create_app(args.data_dir, scenario=args.scenario)
    uvicorn.run(app, host=host, port=int(port or 8080), log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpquery")
    parser.add_argument("--data-dir",
                        default=os.environ.get("DPD_DATA_DIR", "./dpquery-data"))
    parser.add_argument("--scenario", default="imdb_sentiment")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--format", choices=["table", "json", "csv"], default="table")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("annotate", help="taint attributes of a relation")
    p.add_argument("--relation", required=True)
    p.add_argument("--attributes", nargs="+", required=True)
    p.add_argument("--params", help="per-role epsilon map as JSON")
    p.set_defaults(fn=cmd_annotate)

    for name, fn in (("analyze", cmd_analyze), ("recommend", cmd_recommend),
                     ("execute", cmd_execute)):
        p = sub.add_parser(name)
        p.add_argument("--sql")
        p.add_argument("--role")
        p.add_argument("--user")
        p.add_argument("--k", type=int)
        p.add_argument("--max-epsilon", type=float, dest="max_epsilon")
        p.add_argument("--min-accuracy", type=float, dest="min_accuracy")
        if name == "execute":
            p.add_argument("--plan-id", dest="plan_id")
        p.set_defaults(fn=fn)

    p = sub.add_parser("feedback")
    p.add_argument("--plan-id", required=True, dest="plan_id")
    p.add_argument("--latency-ms", type=float, dest="latency_ms")
    p.add_argument("--accuracy", type=float)
    p.set_defaults(fn=cmd_feedback)

    p = sub.add_parser("report", help="write Pareto frontier + accuracy sweep CSVs and figures")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--addr")
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (QuerySyntaxError, SemanticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except NoFeasiblePlan as exc:
        print(f"no feasible plan: {exc}", file=sys.stderr)
        return EXIT_NO_PLAN
    except InsufficientBudget as exc:
        print(f"insufficient budget: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except DpQueryError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
