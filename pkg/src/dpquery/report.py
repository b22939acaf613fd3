"""Report rendering: delimited outputs plus matplotlib figures.

The `report` CLI subcommand replays a scenario and writes, side by side,
- pareto_frontier.csv / pareto_frontier.png  (epsilon vs predicted accuracy,
  marker size encodes latency)
- accuracy_sweep.csv / accuracy_sweep.png    (trained-model accuracy and
  accounted epsilon across a noise-multiplier grid)
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .dp import DpSgdConfig, epsilon_for_config
from .engine import analyze, recommend
from .scenarios import Workspace
from .tables import Table
from .training import train_request
from .rewrite import TrainingRequest


def write_pareto_report(ws: Workspace, out_dir: Path) -> list[dict]:
    out_dir.mkdir(parents=True, exist_ok=True)
    analysis = analyze(ws, ws.queries["default"])
    rec = recommend(ws, analysis)
    rows = []
    for plan in rec.selection.frontier:
        rows.append(
            {
                "plan_id": plan.plan_id,
                "rule": plan.rule_id,
                "epsilon": plan.cost.epsilon,
                "predicted_accuracy": 1.0 - plan.cost.acc_drop,
                "latency_ms": plan.cost.latency_ms,
                "explanation": plan.explanation,
            }
        )
    csv_path = out_dir / "pareto_frontier.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()) if rows else
                                ["plan_id", "rule", "epsilon", "predicted_accuracy",
                                 "latency_ms", "explanation"])
        writer.writeheader()
        writer.writerows(rows)

    fig, ax = plt.subplots(figsize=(6, 4))
    if rows:
        eps = [r["epsilon"] for r in rows]
        acc = [r["predicted_accuracy"] for r in rows]
        size = [20 + 5 * r["latency_ms"] for r in rows]
        ax.scatter(eps, acc, s=size, alpha=0.7)
        for r in rows:
            ax.annotate(r["rule"].split("_")[0], (r["epsilon"], r["predicted_accuracy"]),
                        fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("epsilon")
    ax.set_ylabel("predicted accuracy")
    ax.set_title(f"Pareto frontier: {ws.name}")
    fig.tight_layout()
    fig.savefig(out_dir / "pareto_frontier.png", dpi=120)
    plt.close(fig)
    return rows


def run_accuracy_sweep(ws: Workspace, out_dir: Path) -> list[dict]:
    """Train the default model family across the sweep's noise multipliers and
    report accounted epsilon plus held-out accuracy per grid point."""
    out_dir.mkdir(parents=True, exist_ok=True)
    sweep = ws.sweep or {
        "sigmas": [0.5, 1.0, 2.0, 4.0],
        "steps": 200,
        "sampling_rate": 0.2,
        "clip_norm": 1.0,
        "learning_rate": 0.8,
        "test_fraction": 0.25,
    }
    relation = ws.default_dataset
    table = ws.tables.peek(relation)
    model_name, binding = next(iter(ws.options.model_bindings.items()))
    n_test = int(len(table.rows) * sweep.get("test_fraction", 0.25))
    train_table = Table(table.schema, table.rows[n_test:])
    test_table = Table(table.schema, table.rows[:n_test])

    input_attr = "Review" if "Review" in table.attr_names else table.attr_names[-2]
    rows = []
    for sigma in sweep["sigmas"]:
        config = DpSgdConfig(
            clip_norm=sweep["clip_norm"],
            noise_multiplier=sigma,
            sampling_rate=sweep["sampling_rate"],
            steps=sweep["steps"],
            learning_rate=sweep["learning_rate"],
            delta=1e-5,
            seed=11,
        )
        request = TrainingRequest(
            kind="row_label",
            relation=relation,
            input_attrs=(input_attr,),
            label_attr=binding.label_attr,
            task=binding.task,
            family="sweep",
            hidden=(16,),
            search=False,
            dpsgd=config,
        )
        tmp_tables = type(ws.tables)({relation: train_table})
        artifact = train_request(request, tmp_tables, f"sweep-s{sigma:g}",
                                 binding.featurizer_spec)
        li = test_table.index_of(binding.label_attr)
        ii = test_table.index_of(input_attr)
        predictions = artifact.predict_batch([(r[ii],) for r in test_table.rows])
        accuracy = float(
            np.mean([p == r[li] for p, r in zip(predictions, test_table.rows)])
        )
        rows.append(
            {
                "noise_multiplier": sigma,
                "epsilon": epsilon_for_config(config),
                "test_accuracy": accuracy,
                "steps": sweep["steps"],
            }
        )

    csv_path = out_dir / "accuracy_sweep.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["noise_multiplier", "epsilon",
                                                "test_accuracy", "steps"])
        writer.writeheader()
        writer.writerows(rows)

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    sigmas = [r["noise_multiplier"] for r in rows]
    ax1.plot(sigmas, [r["epsilon"] for r in rows], marker="o")
    ax1.set_xlabel("noise multiplier")
    ax1.set_ylabel("epsilon")
    ax1.set_yscale("log")
    ax2.plot([r["epsilon"] for r in rows], [r["test_accuracy"] for r in rows], marker="o")
    ax2.set_xlabel("epsilon")
    ax2.set_ylabel("test accuracy")
    ax2.set_xscale("log")
    fig.suptitle(f"accuracy vs privacy: {ws.name}")
    fig.tight_layout()
    fig.savefig(out_dir / "accuracy_sweep.png", dpi=120)
    plt.close(fig)
    return rows
