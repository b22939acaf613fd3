"""Materializes candidate plans: trains (or reuses) the models a rewritten
plan needs and produces the executable IR.

Training data never leaves this boundary; only DP-trained weights, noisy
embedding stores, or calibrated noise parameters reach the execution layer.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dp import NoiseStream, accounting_receipt
from .errors import EmptyData, InvalidParameter, ModelMissing
from .executor import ModelStore
from .ir import IrGraph
from .learn.dnas import BlockSpec, SearchSpace, dnas_search, finalize_with_dpsgd, train_with_dpsgd
from .learn.features import (
    FieldHashFeaturizer,
    HashedTextFeaturizer,
    featurize_rows,
    featurizer_from_spec,
)
from .learn.knn import build_noisy_store
from .learn.nn import LayerSpec, Mlp
from .learn.registry import ModelArtifact, ModelRegistry, Provenance, Signature, dataset_fingerprint
from .rewrite import (
    RULE_PASS,
    RULE_S3,
    RULE_S4,
    CandidatePlan,
    ModelRef,
    TrainingRequest,
    _attr_literal,
    apply_plan,
    predicate_slots,
)
from .tables import Table, TableStore, eval_predicate


@dataclass
class MaterializedPlan:
    plan: CandidatePlan
    ir: IrGraph
    model_id: Optional[str] = None
    store_id: Optional[str] = None
    train_accuracy: Optional[float] = None


def _table_fingerprint(table: Table) -> str:
    payload = repr(table.schema).encode() + repr(table.rows).encode()
    return dataset_fingerprint(payload)


def _default_featurizer(input_types: tuple[str, ...], kind: str):
    if kind == "key_lookup":
        return FieldHashFeaturizer(len(input_types))
    return HashedTextFeaturizer(32)


def _training_matrix(request: TrainingRequest, table: Table, featurizer):
    idx = [table.index_of(a) for a in request.input_attrs]
    rows = [tuple(r[i] for i in idx) for r in table.rows]
    x = featurize_rows(featurizer, rows)
    labels = table.column(request.label_attr)
    return x, labels


def _sample_aggregates(request: TrainingRequest, table: Table, seed: int):
    """Instantiate the predicate template over observed values and compute the
    true aggregate per instantiation: the (features, target) pairs for S2A.

    Predicate attributes produced by a predict operator are materialized from
    their training label columns (the owner's ground truth). The first sample
    is the query's own instantiation, mirroring a model trained for this p.
    """
    from .frontend import AttrRef, Comparison, Literal

    if request.predict_outputs:
        schema = table.schema + tuple(
            (out, dict(table.schema)[label])
            for out, label in request.predict_outputs.items()
        )
        label_idx = [table.index_of(label) for label in request.predict_outputs.values()]
        rows = [row + tuple(row[i] for i in label_idx) for row in table.rows]
        table = Table(schema, rows)

    ordered = predicate_slots(request.predicates)
    rng = np.random.Generator(np.random.Philox(seed))
    columns = {}
    for pred in ordered:
        attr, _ = _attr_literal(pred)
        values = [v for v in table.column(attr) if v is not None]
        columns[attr] = values or [0]
    keys, targets = [], []
    for sample_idx in range(request.samples):
        literals = []
        for pred in ordered:
            attr, lit = _attr_literal(pred)
            if sample_idx == 0:
                literals.append(lit)
            else:
                pool = columns[attr]
                literals.append(pool[int(rng.integers(len(pool)))])
        instantiated = []
        for pred, lit in zip(ordered, literals):
            attr, _ = _attr_literal(pred)
            instantiated.append(
                Comparison(AttrRef(None, attr), pred.op,
                           Literal(lit, quoted=isinstance(lit, str)))
            )
        kept = [
            row for row in table.rows
            if all(eval_predicate(p, table.row_dict(row)) for p in instantiated)
        ]
        if request.agg_func == "COUNT":
            target = float(len(kept))
        else:
            i = table.index_of(request.label_attr)
            vals = [float(r[i]) for r in kept if r[i] is not None]
            if request.agg_func == "SUM":
                target = float(sum(vals))
            else:
                target = float(sum(vals) / len(vals)) if vals else 0.0
        keys.append(tuple(literals))
        targets.append(target)
    return keys, np.asarray(targets, dtype=np.float64)


def _default_search_space(in_dim: int, n_classes: int) -> SearchSpace:
    return SearchSpace(
        in_dim,
        n_classes,
        [BlockSpec(in_dim, 16, (8, 16)), BlockSpec(16, 16, (0, 8, 16))],
    )


def train_request(
    request: TrainingRequest,
    tables: TableStore,
    artifact_id: str,
    featurizer_spec: Optional[dict] = None,
) -> ModelArtifact:
    """Run the request's training recipe and wrap the result as an artifact."""
    table = tables.peek(request.relation)
    if table is None:
        raise ModelMissing(f"no data for training relation {request.relation}")
    if not table.rows:
        raise EmptyData(f"relation {request.relation} is empty")
    fingerprint = _table_fingerprint(table)
    config = request.dpsgd

    if request.kind == "aggregate_map":
        keys, y = _sample_aggregates(request, table, config.seed)
        featurizer = FieldHashFeaturizer(len(request.input_attrs), dim_per_field=32,
                                         hashes=2)
        x = featurize_rows(featurizer, keys)
        shift = float(np.mean(y))
        scale = float(np.std(y)) or 1.0
        y_norm = (y - shift) / scale
        layers = [LayerSpec(w, "relu") for w in (request.hidden or (32,))]
        layers.append(LayerSpec(1, "identity"))
        model = Mlp.initialized(x.shape[1], layers, config.seed)
        model, steps, epsilon = train_with_dpsgd(
            model, x, y_norm[:, None], config, loss="squared-error"
        )
        trained_with_dp = config.noise_multiplier > 0 or steps == 0
        return ModelArtifact(
            id=artifact_id,
            signature=Signature(
                tuple("float64" for _ in request.input_attrs), "float64", "regression"
            ),
            in_dim=x.shape[1],
            layers=layers,
            weights=model.weights,
            provenance=Provenance(trained_with_dp,
                                  epsilon if trained_with_dp else None,
                                  fingerprint),
            featurizer_spec=featurizer.spec(),
            output_scale=scale,
            output_shift=shift,
            accounting=accounting_receipt(config, steps, epsilon),
        )

    # classification / blob-retrieval over rows
    featurizer = (
        featurizer_from_spec(featurizer_spec)
        if featurizer_spec
        else _default_featurizer(request.input_attrs, request.kind)
    )
    x, labels = _training_matrix(request, table, featurizer)
    vocab = sorted({str(v) for v in labels if v is not None})
    label_idx = {v: i for i, v in enumerate(vocab)}
    y = np.array([label_idx[str(v)] for v in labels], dtype=np.int64)
    schema_types = dict(table.schema)
    signature = Signature(
        tuple(schema_types[a] for a in request.input_attrs),
        schema_types.get(request.label_attr, "text"),
        request.task,
    )

    if request.search:
        space = _default_search_space(x.shape[1], len(vocab))
        n = x.shape[0]
        split = max(1, int(n * 0.8))
        result = dnas_search(
            space, (x[:split], y[:split]), (x[split:] if split < n else x[:split],
                                            y[split:] if split < n else y[:split]),
            cost_weight=0.0, seed=config.seed,
        )
        artifact = finalize_with_dpsgd(
            space, result.widths, config, (x, y), init_seed=config.seed,
            artifact_id=artifact_id, signature=signature,
            featurizer_spec=featurizer.spec(), label_vocab=vocab,
            fingerprint=fingerprint,
        )
        return artifact

    layers = [LayerSpec(w, "relu") for w in request.hidden]
    layers.append(LayerSpec(len(vocab), "softmax-out"))
    model = Mlp.initialized(x.shape[1], layers, config.seed)
    model, steps, epsilon = train_with_dpsgd(model, x, y, config, loss="cross-entropy")
    trained_with_dp = config.noise_multiplier > 0 or steps == 0
    return ModelArtifact(
        id=artifact_id,
        signature=signature,
        in_dim=x.shape[1],
        layers=layers,
        weights=model.weights,
        provenance=Provenance(trained_with_dp, epsilon if trained_with_dp else None,
                              fingerprint),
        featurizer_spec=featurizer.spec(),
        label_vocab=vocab,
        accounting=accounting_receipt(config, steps, epsilon),
    )


def materialize(
    plan: CandidatePlan,
    tables: TableStore,
    registry: ModelRegistry,
    models: ModelStore,
    bindings: Optional[dict] = None,
) -> MaterializedPlan:
    """Resolve the plan's model binding (reuse, train, or build a noisy store)
    and return the executable rewritten IR."""
    if plan.rule_id == RULE_PASS:
        return MaterializedPlan(plan, plan.base_ir)

    if plan.rule_id == RULE_S4:
        return MaterializedPlan(plan, apply_plan(plan))

    if plan.rule_id == RULE_S3:
        params = plan.mech_params
        encoder = registry.get(params["encoder_id"])
        table = tables.peek(params["relation"])
        if table is None or not table.rows:
            raise EmptyData(f"relation {params['relation']} has no rows to embed")
        idx = [table.index_of(a) for a in params["input_attrs"]]
        rows = [tuple(r[i] for i in idx) for r in table.rows]
        vectors = encoder.embed_batch(rows)
        labels = [str(v) for v in table.column(params["label_attr"])]
        stream = NoiseStream(zlib.crc32(plan.plan_id.encode())).spawn("s3-store")
        store = build_noisy_store(
            vectors, labels, params["clip"], params["sigma"], 1e-5, stream
        )
        store_id = f"store-{plan.plan_id}"
        models.add_store(store_id, store)
        models.add(params["encoder_id"], encoder)
        ir = apply_plan(plan, store_id=store_id)
        return MaterializedPlan(plan, ir, store_id=store_id)

    if isinstance(plan.binding, ModelRef):
        artifact = registry.get(plan.binding.model_id)
        models.add(artifact.id, artifact)
        return MaterializedPlan(plan, apply_plan(plan, artifact), model_id=artifact.id)

    if isinstance(plan.binding, TrainingRequest):
        request = plan.binding
        artifact_id = f"m-{plan.plan_id}"
        featurizer_spec = None
        if bindings:
            for binding in bindings.values():
                if binding.label_attr == request.label_attr and binding.featurizer_spec:
                    featurizer_spec = binding.featurizer_spec
                    break
        artifact = train_request(request, tables, artifact_id, featurizer_spec)
        registry.add(artifact)
        models.add(artifact.id, artifact)
        ir = apply_plan(plan, artifact)
        train_acc = None
        return MaterializedPlan(plan, ir, model_id=artifact.id, train_accuracy=train_acc)

    raise InvalidParameter(f"plan {plan.plan_id} has no binding to materialize")
