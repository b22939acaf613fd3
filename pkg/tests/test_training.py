"""Plan materialization and the noiseless-equivalence invariant: with oracle
models (trained to convergence without noise, or stubbed with the true
labeling function) and infinite privacy settings, every rewrite reproduces
the original query's answer exactly."""

import math
import threading
from dataclasses import replace

import numpy as np
import pytest

from dpquery.dp import DpSgdConfig
from dpquery.engine import analyze, enumerate_candidates, materialize_plan, run_materialized
from dpquery.executor import ModelStore, StubModel, execute, reference_eval
from dpquery.ir import NoisyAggregateOp
from dpquery.rewrite import RULE_S1, RULE_S2, RULE_S2A, RULE_S3, RULE_S4, apply_plan
from dpquery.scenarios import load_scenario
from dpquery.training import materialize, train_request


def exact_config(seed=13, steps=300):
    return DpSgdConfig(clip_norm=1e12, noise_multiplier=0.0, sampling_rate=1.0,
                       steps=steps, learning_rate=1.0, delta=1e-5, seed=seed)


@pytest.fixture
def imdb(tmp_path):
    ws = load_scenario("imdb_sentiment", tmp_path)
    ws.catalog.ledger.register_dataset("IMDB_MOVIE_REVIEW", math.inf)
    ws.catalog.ledger.register_user("analyst", math.inf)
    return ws


def truth_of(ws):
    analysis = analyze(ws, ws.queries["default"])
    ref = reference_eval(analysis.ast, ws.catalog, ws.tables, ws.oracle_models)
    return analysis, ref


def plans_of(ws, analysis):
    plans, _ = enumerate_candidates(ws, analysis, enforce_budget=False)
    return plans


def test_s1_noiseless_equivalence(imdb):
    analysis, ref = truth_of(imdb)
    s1 = next(p for p in plans_of(imdb, analysis) if p.rule_id == RULE_S1)
    plan = replace(s1, binding=replace(s1.binding, dpsgd=exact_config()),
                   epsilon=math.inf, plan_id="s1-exact")
    mat = materialize_plan(imdb, plan)
    out, receipt = run_materialized(imdb, mat)
    assert out.rows == ref.rows
    # the trained-model release shows up in the mechanism trace
    assert any(t.mechanism == "dp_trained_model" for t in receipt.mechanism_trace)
    assert sum(t.epsilon for t in receipt.mechanism_trace) == receipt.epsilon_charged


def test_s2_noiseless_equivalence(tmp_path):
    ws = load_scenario("alzheimers_care", tmp_path)
    ws.catalog.ledger.register_dataset("Central_Hospital_Organization", math.inf)
    ws.catalog.ledger.register_user("nurse_jane", math.inf)
    analysis, ref = truth_of(ws)
    s2 = next(p for p in plans_of(ws, analysis) if p.rule_id == RULE_S2)
    plan = replace(s2, binding=replace(s2.binding, dpsgd=exact_config(steps=400)),
                   epsilon=math.inf, plan_id="s2-exact")
    mat = materialize_plan(ws, plan)
    out, _ = run_materialized(ws, mat)
    assert out.rows == ref.rows


def test_s2a_stub_oracle_equivalence(imdb):
    analysis, ref = truth_of(imdb)
    true_count = float(ref.rows[0][0])
    s2a = next(p for p in plans_of(imdb, analysis) if p.rule_id == RULE_S2A)
    rewritten = apply_plan(
        s2a,
        _stub_regression_model(len(s2a.binding.input_attrs), true_count),
    )
    models = ModelStore()
    models.add("s2a-oracle", StubModel("s2a-oracle", lambda vals: true_count))
    out, _ = execute(rewritten, imdb.tables, models, imdb.catalog.ledger,
                     "IMDB_MOVIE_REVIEW", "analyst", plan_id="s2a")
    assert out.rows[0][0] == true_count


def _stub_regression_model(arity, value):
    class _Stub:
        id = "s2a-oracle"

        class signature:
            input_types = tuple("float64" for _ in range(arity))
            output_type = "float64"
            task = "regression"

        @staticmethod
        def predict_batch(rows):
            return [value for _ in rows]

    return _Stub


def test_s3_k1_noiseless_equivalence(imdb):
    imdb.options.knn_k = 1
    imdb.options.s3_sigma_grid = (1.0,)
    analysis, ref = truth_of(imdb)
    s3 = next(p for p in plans_of(imdb, analysis) if p.rule_id == RULE_S3)
    s3.mech_params["sigma"] = 0.0  # noiseless store
    s3.mech_params["clip"] = 1e9
    mat = materialize_plan(imdb, s3)
    out, _ = run_materialized(imdb, mat)
    # every queried row's embedding is in the store: 1-NN finds itself
    assert out.rows == ref.rows


def test_s4_infinite_epsilon_equivalence(imdb):
    analysis, ref = truth_of(imdb)
    s4 = next(p for p in plans_of(imdb, analysis) if p.rule_id == RULE_S4)
    s4.mech_params["epsilon"] = math.inf
    s4.epsilon = math.inf
    mat = materialize_plan(imdb, s4)
    out, _ = run_materialized(imdb, mat)
    assert float(out.rows[0][0]) == float(ref.rows[0][0])


def test_search_family_trains_via_dnas(imdb):
    from dpquery.rewrite import ArchFamily

    imdb.options.families = (ArchFamily("searched", (), True),)
    imdb.options.sigma_grid = (8.0,)
    imdb.options.steps = 20
    analysis, _ = truth_of(imdb)
    s1 = next(p for p in plans_of(imdb, analysis) if p.rule_id == RULE_S1)
    assert s1.binding.search
    mat = materialize_plan(imdb, s1)
    artifact = imdb.registry.get(mat.model_id)
    assert artifact.provenance.trained_with_dp
    assert artifact.accounting and artifact.accounting["T"] <= 20
    out, receipt = run_materialized(imdb, mat)
    assert receipt.epsilon_charged == s1.epsilon


def test_s2a_training_uses_label_column_for_predictions(imdb):
    analysis, ref = truth_of(imdb)
    s2a = next(p for p in plans_of(imdb, analysis) if p.rule_id == RULE_S2A)
    assert s2a.binding.predict_outputs == {"pred": "sentiment"}
    cfg = replace(exact_config(steps=1500), learning_rate=0.1)
    artifact = train_request(
        replace(s2a.binding, dpsgd=cfg, samples=48), imdb.tables, "s2a-model",
    )
    # the first training sample is the query's own instantiation: noiseless
    # training memorizes its target
    from dpquery.rewrite import encode_predicates, region_shape

    shape = region_shape(analysis.ir, s2a.region)
    _, values = encode_predicates(analysis.ir, shape.selects)
    predicted = artifact.predict_batch([values])[0]
    assert abs(predicted - float(ref.rows[0][0])) <= 5.0

    mat = materialize_plan(imdb, replace(s2a, plan_id="s2a-mat"))
    out, _ = run_materialized(imdb, mat)
    assert len(out.rows) == 1 and isinstance(out.rows[0][0], float)


def test_reuse_after_training(imdb):
    analysis, _ = truth_of(imdb)
    s1 = next(p for p in plans_of(imdb, analysis) if p.rule_id == RULE_S1)
    mat = materialize_plan(imdb, s1)
    # second enumeration sees the registry artifact: reuse instead of training
    plans2 = plans_of(imdb, analysis)
    s1_again = [p for p in plans2 if p.rule_id == RULE_S1]
    assert len(s1_again) == 1
    assert s1_again[0].binding.__class__.__name__ == "ModelRef"
    assert s1_again[0].binding.model_id == mat.model_id


def test_concurrent_debits_linearizable():
    from dpquery.catalog import BudgetLedger

    ledger = BudgetLedger()
    ledger.register_dataset("D", 100.0)
    ledger.register_user("u", 100.0)
    errors = []

    def worker(tid):
        for i in range(50):
            try:
                ledger.debit("D", "u", 0.25, f"t{tid}-{i}")
            except Exception as exc:  # pragma: no cover
                errors.append(exc)

    threads = [threading.Thread(target=worker, args=(t,)) for t in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert ledger.remaining("D", "u") == (0.0, 0.0)
    assert len(ledger.debit_log) == 400
