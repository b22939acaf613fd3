"""Privacy-preserving transformation rules and candidate-plan enumeration.

Rules over a sensitive region:
  S1  swap a prediction operator for a DP-trained substitute of the same
      signature.
  S2  collapse project(select(R)) [optionally under a predict] into a single
      model call that maps the selection key straight to the query output.
  S2A same collapse when an aggregate tops the pattern: the model predicts
      the aggregate value from the encoded predicate.
  S3  replace the predict with nearest-neighbor inference over noisy
      embeddings produced by a public encoder.
  S4  keep the query, perturb the aggregate output with calibrated noise.

Each instantiation proposes a grid of privacy operating points; plans whose
cheapest point exceeds the remaining budget are dropped with a reason.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

from .catalog import Catalog
from .dp import DpSgdConfig, epsilon_for_config, gaussian_release_epsilon
from .errors import SignatureMismatch
from .frontend import AttrRef, Comparison, Literal
from .ir import (
    AggregateOp,
    ConstantOp,
    DatasetEdge,
    IrGraph,
    IrNode,
    NoisyAggregateOp,
    NoisyEmbeddingLookupOp,
    PredictOp,
    ProjectOp,
    ScanOp,
    SelectOp,
)
from .learn.registry import ModelRegistry, Signature
from .taint import SensitiveRegion

RULE_S1 = "S1_ModelReplacePredict"
RULE_S2 = "S2_ModelReplaceSubquery"
RULE_S2A = "S2A_ModelReplaceAggregate"
RULE_S3 = "S3_NoisyEmbeddingKnn"
RULE_S4 = "S4_OutputPerturbation"
RULE_PASS = "PASS_Through"

ALL_RULES = (RULE_S1, RULE_S2, RULE_S2A, RULE_S3, RULE_S4)


@dataclass
class ModelBinding:
    """How to obtain training data for a named model call."""

    task: str  # classification | regression | blob-retrieval
    label_attr: str
    relation: Optional[str] = None
    featurizer_spec: Optional[dict] = None


@dataclass
class ArchFamily:
    name: str
    hidden: tuple[int, ...] = (16,)
    search: bool = False


@dataclass
class PlannerOptions:
    families: tuple[ArchFamily, ...] = (ArchFamily("mlp16", (16,)),)
    sigma_grid: tuple[float, ...] = (4.0, 8.0, 16.0)
    s4_epsilon_grid: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)
    s3_sigma_grid: tuple[float, ...] = (1.0, 2.0, 4.0)
    steps: int = 60
    sampling_rate: float = 0.5
    clip_norm: float = 1.0
    learning_rate: float = 0.25
    delta: float = 1e-5
    knn_k: int = 5
    embed_clip: float = 1.0
    seed: int = 7
    model_bindings: dict[str, ModelBinding] = field(default_factory=dict)
    aggregate_samples: int = 64
    enabled_rules: tuple[str, ...] = ALL_RULES


@dataclass
class TrainingRequest:
    kind: str  # row_label | key_lookup | aggregate_map
    relation: str
    input_attrs: tuple[str, ...]
    label_attr: Optional[str]
    task: str
    family: str
    hidden: tuple[int, ...]
    search: bool
    dpsgd: DpSgdConfig
    agg_func: Optional[str] = None
    predicates: tuple[Comparison, ...] = ()
    samples: int = 64
    predict_outputs: dict = field(default_factory=dict)  # predict attr -> label attr

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "relation": self.relation,
            "input_attrs": list(self.input_attrs),
            "label_attr": self.label_attr,
            "task": self.task,
            "family": self.family,
            "hidden": list(self.hidden),
            "search": self.search,
            "dpsgd": self.dpsgd.to_json(),
            "agg_func": self.agg_func,
            "predicates": [p.sql() for p in self.predicates],
            "samples": self.samples,
        }


@dataclass
class ModelRef:
    model_id: str
    epsilon_spent: float

    def to_json(self) -> dict:
        return {"model_id": self.model_id, "epsilon_spent": self.epsilon_spent}


@dataclass
class CandidatePlan:
    plan_id: str
    rule_id: str
    base_ir: IrGraph
    region: Optional[SensitiveRegion]
    binding: Union[ModelRef, TrainingRequest, None]
    epsilon: float
    fingerprint: str
    explanation: str
    mech_params: dict = field(default_factory=dict)
    cost: Optional["CostVector"] = None  # filled by the optimizer
    low_confidence: bool = False

    def to_json(self) -> dict:
        out = {
            "plan_id": self.plan_id,
            "rule_id": self.rule_id,
            "region": self.region.to_json() if self.region else None,
            "epsilon": self.epsilon,
            "fingerprint": self.fingerprint,
            "explanation": self.explanation,
            "mech_params": {k: v for k, v in self.mech_params.items()},
            "low_confidence": self.low_confidence,
        }
        if isinstance(self.binding, ModelRef):
            out["model"] = self.binding.to_json()
        elif isinstance(self.binding, TrainingRequest):
            out["training_request"] = self.binding.to_json()
        if self.cost is not None:
            out["cost"] = self.cost.to_json()
            # clients display this verbatim instead of doing their own math
            out["cost"]["predicted_accuracy"] = 1.0 - self.cost.acc_drop
        return out


@dataclass
class DroppedPlan:
    rule_id: str
    region_root: int
    reason: str


# --- region shape inspection --------------------------------------------------

@dataclass
class RegionShape:
    chain: list[int]  # scan .. root, bottom-up (single-relation chains only)
    scan: Optional[int]
    selects: list[int]
    predicts: list[int]
    project: Optional[int]
    aggregate: Optional[int]
    relation: Optional[str]


def region_shape(ir: IrGraph, region: SensitiveRegion) -> RegionShape:
    """Describe the operator chain under the region root when it is linear
    over a single scan; joins and multi-relation regions yield a partial shape."""
    chain: list[int] = []
    cursor = region.root
    scan = None
    while True:
        chain.append(cursor)
        node = ir.node(cursor)
        if isinstance(node.op, ScanOp):
            scan = cursor
            break
        if len(node.children) != 1:
            break
        cursor = node.children[0]
    chain.reverse()
    shape = RegionShape(chain, scan, [], [], None, None, None)
    if scan is not None:
        shape.relation = ir.node(scan).op.relation
    for nid in chain:
        op = ir.node(nid).op
        if isinstance(op, SelectOp):
            shape.selects.append(nid)
        elif isinstance(op, PredictOp):
            shape.predicts.append(nid)
        elif isinstance(op, ProjectOp):
            shape.project = nid
        elif isinstance(op, AggregateOp):
            shape.aggregate = nid
    return shape


def _equality_key(ir: IrGraph, selects: list[int]) -> Optional[list[tuple[str, object]]]:
    """Attr -> literal pairs when every predicate is an equality with a literal."""
    pairs: list[tuple[str, object]] = []
    for nid in selects:
        for pred in ir.node(nid).op.predicates:
            attr, lit = _attr_literal(pred)
            if attr is None or pred.op != "=":
                return None
            pairs.append((attr, lit))
    return pairs


def _attr_literal(pred: Comparison) -> tuple[Optional[str], object]:
    if isinstance(pred.lhs, AttrRef) and isinstance(pred.rhs, Literal):
        return pred.lhs.name, pred.rhs.value
    if isinstance(pred.rhs, AttrRef) and isinstance(pred.lhs, Literal):
        return pred.rhs.name, pred.lhs.value
    return None, None


def _short_hash(text: str) -> str:
    return format(zlib.crc32(text.encode()) & 0xFFFFFF, "06x")


def predicate_slots(predicates: Sequence[Comparison]) -> list[Comparison]:
    """Stable slot order for predicate encodings: by (attribute, operator),
    ties in original order, so training-time instantiations line up with the
    query's own encoding."""
    keyed = []
    for i, pred in enumerate(predicates):
        attr, _ = _attr_literal(pred)
        if attr is None:
            continue
        keyed.append(((attr, pred.op, i), pred))
    keyed.sort(key=lambda kv: kv[0])
    return [pred for _, pred in keyed]


def encode_predicates(ir: IrGraph, selects: list[int]) -> tuple[tuple[str, ...], list]:
    """Fixed-order predicate encoding: one slot per (attr, op) holding the raw
    comparison literal; the model's featurizer turns slot values into vectors."""
    preds = []
    for nid in selects:
        preds.extend(ir.node(nid).op.predicates)
    ordered = predicate_slots(preds)
    slots = []
    values = []
    for pred in ordered:
        attr, lit = _attr_literal(pred)
        slots.append(f"{attr}{pred.op}")
        values.append(lit)
    return tuple(slots), values


# --- enumeration ---------------------------------------------------------------

def enumerate_plans(
    ir: IrGraph,
    regions: list[SensitiveRegion],
    catalog: Catalog,
    registry: ModelRegistry,
    ledger,
    dataset: str,
    user: str,
    options: PlannerOptions,
    enforce_budget: bool = True,
) -> tuple[list[CandidatePlan], list[DroppedPlan]]:
    plans: list[CandidatePlan] = []
    dropped: list[DroppedPlan] = []
    if enforce_budget:
        try:
            remainder = min(ledger.remaining(dataset, user))
        except KeyError:
            remainder = math.inf
    else:
        remainder = math.inf

    for region in regions:
        shape = region_shape(ir, region)
        plans_r, dropped_r = _rules_for_region(
            ir, region, shape, catalog, registry, options
        )
        plans_r = [p for p in plans_r if p.rule_id in options.enabled_rules]
        for rule_id in {p.rule_id for p in plans_r}:
            rule_plans = [p for p in plans_r if p.rule_id == rule_id]
            if min(p.epsilon for p in rule_plans) > remainder:
                dropped.append(
                    DroppedPlan(
                        rule_id,
                        region.root,
                        f"minimum feasible epsilon "
                        f"{min(p.epsilon for p in rule_plans):.3g} exceeds remaining "
                        f"budget {remainder:.3g}",
                    )
                )
                plans_r = [p for p in plans_r if p.rule_id != rule_id]
        plans.extend(plans_r)
        dropped.extend(dropped_r)
    return plans, dropped


def applicable_rules(ir: IrGraph, region: SensitiveRegion, catalog: Catalog,
                     registry: ModelRegistry, options: "PlannerOptions") -> set[str]:
    """Which rules match this region (mirrors enumerate_plans' matching)."""
    shape = region_shape(ir, region)
    rules: set[str] = set()
    if shape.predicts:
        trainable = [
            nid for nid in shape.predicts
            if ir.node(nid).op.model_name in options.model_bindings
            and (shape.relation or _source_relation(ir, nid)) is not None
        ]
        if trainable:
            rules.add(RULE_S1)
        if _find_encoder(registry) is not None and any(
            ir.node(nid).op.task == "classification" for nid in trainable
        ):
            rules.add(RULE_S3)
    if _matches_s2(ir, region, shape):
        rules.add(RULE_S2)
    if _matches_s2a(ir, region, shape) and \
            _predict_output_labels(ir, shape, options) is not None:
        rules.add(RULE_S2A)
    if _s4_sensitivity(ir, region, shape, catalog) is not None:
        rules.add(RULE_S4)
    return rules


def _matches_s2(ir: IrGraph, region: SensitiveRegion, shape: RegionShape) -> bool:
    """project(select(R)) over one relation, optionally under a predict,
    no aggregate, all predicates equality-with-literal on relation attributes,
    single projected attr."""
    if shape.scan is None or shape.aggregate is not None or shape.project is None:
        return False
    if ir.node(region.root).op.__class__ is not ProjectOp:
        return False
    if len(ir.node(shape.project).op.attrs) != 1:
        return False
    if not shape.selects:
        return False
    key = _equality_key(ir, shape.selects)
    if key is None:
        return False
    scan_attrs = set(ir.edge(shape.scan).attr_names())
    return all(attr in scan_attrs for attr, _ in key)


def _matches_s2a(ir: IrGraph, region: SensitiveRegion, shape: RegionShape) -> bool:
    """Aggregate over the predict/select chain of one relation; every predicate
    attribute must come from the scan or from a predict output (whose training
    label column stands in for it)."""
    if shape.scan is None or shape.aggregate is None or shape.aggregate != region.root:
        return False
    agg = ir.node(shape.aggregate).op
    if agg.group_keys or len(agg.aggs) != 1:
        return False
    if not shape.selects:
        return False
    slots, _ = encode_predicates(ir, shape.selects)
    return len(slots) > 0


def _predict_output_labels(ir: IrGraph, shape: RegionShape, options) -> Optional[dict]:
    """Map predict-output attrs to their training label columns; None when a
    predict has no binding (S2A cannot instantiate its predicate then)."""
    out = {}
    for nid in shape.predicts:
        op = ir.node(nid).op
        binding = options.model_bindings.get(op.model_name)
        if binding is None:
            return None
        out[op.output] = binding.label_attr
    scan_attrs = set(ir.edge(shape.scan).attr_names()) if shape.scan is not None else set()
    for sel in shape.selects:
        for pred in ir.node(sel).op.predicates:
            attr, _ = _attr_literal(pred)
            if attr is not None and attr not in scan_attrs and attr not in out:
                return None
    return out


def _s4_sensitivity(ir: IrGraph, region: SensitiveRegion, shape: RegionShape,
                    catalog: Catalog) -> Optional[float]:
    if shape.aggregate is None or shape.aggregate != region.root:
        return None
    agg = ir.node(shape.aggregate).op
    if agg.group_keys or len(agg.aggs) != 1:
        return None
    func, attr = agg.aggs[0]
    if func == "COUNT":
        return 1.0
    if func in ("SUM", "AVG"):
        if attr is None or shape.relation is None:
            return None
        descriptor = catalog.relation(shape.relation).attribute(attr) if \
            catalog.relation(shape.relation).has_attribute(attr) else None
        if descriptor is None or descriptor.clamp_bound is None:
            return None  # no declared clamp bound: sensitivity unbounded
        return float(descriptor.clamp_bound)
    return None


def _find_encoder(registry: ModelRegistry):
    encoders = [a for a in registry.artifacts.values() if a.signature.task == "embedding"]
    return max(encoders, key=lambda a: a.created_seq) if encoders else None


def _source_relation(ir: IrGraph, predict_id: int) -> Optional[str]:
    """The unique scanned relation whose schema covers the predict's inputs;
    None when the inputs span relations (no single training source)."""
    op = ir.node(predict_id).op
    inputs = set(op.inputs)
    cursor = [ir.node(predict_id).children[0]]
    matches = []
    while cursor:
        nid = cursor.pop()
        node = ir.node(nid)
        if isinstance(node.op, ScanOp):
            if inputs <= set(ir.edge(nid).attr_names()):
                matches.append(node.op.relation)
        cursor.extend(node.children)
    return matches[0] if len(matches) == 1 else None


def _rules_for_region(ir, region, shape, catalog, registry, options):
    plans: list[CandidatePlan] = []
    dropped: list[DroppedPlan] = []

    if shape.predicts:
        plans += _s1_plans(ir, region, shape, registry, options, dropped)
        plans += _s3_plans(ir, region, shape, registry, options, dropped)
    if _matches_s2(ir, region, shape):
        plans += _s2_plans(ir, region, shape, registry, options, dropped)
    if _matches_s2a(ir, region, shape):
        predict_outputs = _predict_output_labels(ir, shape, options)
        if predict_outputs is None:
            dropped.append(
                DroppedPlan(RULE_S2A, region.root,
                            "predicate references a prediction without a training"
                            " label binding")
            )
        else:
            plans += _s2a_plans(ir, region, shape, registry, options, predict_outputs)
    sensitivity = _s4_sensitivity(ir, region, shape, catalog)
    if sensitivity is not None:
        plans += _s4_plans(ir, region, shape, sensitivity, options)
    elif shape.aggregate is not None and shape.aggregate == region.root:
        agg = ir.node(shape.aggregate).op
        if not agg.group_keys and len(agg.aggs) == 1 and agg.aggs[0][0] in ("SUM", "AVG"):
            dropped.append(
                DroppedPlan(RULE_S4, region.root,
                            f"no clamp bound declared for {agg.aggs[0][1]}: "
                            "sensitivity unbounded")
            )
    return plans, dropped


def _grid_config(options: PlannerOptions, sigma: float) -> DpSgdConfig:
    return DpSgdConfig(
        clip_norm=options.clip_norm,
        noise_multiplier=sigma,
        sampling_rate=options.sampling_rate,
        steps=options.steps,
        learning_rate=options.learning_rate,
        delta=options.delta,
        seed=options.seed,
    )


def _training_plans(ir, region, rule_id, request_proto, signature, registry, options,
                    explain):
    """Shared S1/S2/S2A helper: reuse a registry model when one matches,
    otherwise one plan per (family, noise multiplier)."""
    plans = []
    match = registry.match(signature)
    if match is not None and match.kind == "exact":
        artifact = match.artifact
        eps = artifact.provenance.epsilon_spent if artifact.provenance.trained_with_dp \
            else math.inf
        plans.append(
            CandidatePlan(
                plan_id=f"{rule_id.split('_')[0]}-{region.root}-reuse-{artifact.id}",
                rule_id=rule_id,
                base_ir=ir,
                region=region,
                binding=ModelRef(artifact.id, eps),
                epsilon=eps,
                fingerprint=f"reuse:{artifact.id}",
                explanation=f"{explain}; reuse pre-trained model {artifact.id} "
                f"(eps already spent: {eps:.3g})",
            )
        )
        return plans
    for family in options.families:
        for sigma in options.sigma_grid:
            config = _grid_config(options, sigma)
            eps = epsilon_for_config(config)
            request = replace(request_proto, family=family.name,
                              hidden=tuple(family.hidden), search=family.search,
                              dpsgd=config)
            plans.append(
                CandidatePlan(
                    plan_id=f"{rule_id.split('_')[0]}-{region.root}-{family.name}"
                    f"-s{sigma:g}",
                    rule_id=rule_id,
                    base_ir=ir,
                    region=region,
                    binding=request,
                    epsilon=eps,
                    fingerprint=f"{request_proto.relation}:{family.name}",
                    explanation=f"{explain}; train family={family.name} with DP-SGD "
                    f"(sigma={sigma:g}, T={config.steps}) -> eps={eps:.3g}",
                )
            )
    return plans


def _s1_plans(ir, region, shape, registry, options, dropped):
    plans = []
    for predict_id in shape.predicts:
        op = ir.node(predict_id).op
        binding = options.model_bindings.get(op.model_name)
        if binding is None:
            dropped.append(
                DroppedPlan(RULE_S1, region.root,
                            f"no training binding for model {op.model_name}")
            )
            continue
        relation = binding.relation or shape.relation or _source_relation(ir, predict_id)
        if relation is None:
            dropped.append(
                DroppedPlan(RULE_S1, region.root,
                            "predict inputs span relations: no single training source")
            )
            continue
        input_schema = dict(ir.edge(ir.node(predict_id).children[0]).schema)
        signature = Signature(
            tuple(input_schema[a] for a in op.inputs), "text", binding.task
        )
        request = TrainingRequest(
            kind="row_label",
            relation=relation,
            input_attrs=op.inputs,
            label_attr=binding.label_attr,
            task=binding.task,
            family="",
            hidden=(),
            search=False,
            dpsgd=_grid_config(options, options.sigma_grid[0]),
        )
        plans += _training_plans(
            ir, region, RULE_S1, request, signature, registry, options,
            f"replace {op.model_name} with a DP-trained substitute",
        )
    return plans


def _s2_plans(ir, region, shape, registry, options, dropped):
    key = _equality_key(ir, shape.selects)
    assert key is not None
    project_op = ir.node(shape.project).op
    out_attr = project_op.attrs[0]
    scan_schema = dict(ir.edge(shape.scan).schema)
    out_type = scan_schema.get(out_attr, "text")
    task = "blob-retrieval" if out_type == "blob" else "classification"
    input_attrs = tuple(a for a, _ in key)
    signature = Signature(tuple(scan_schema[a] for a in input_attrs), out_type, task)
    request = TrainingRequest(
        kind="key_lookup",
        relation=shape.relation,
        input_attrs=input_attrs,
        label_attr=out_attr,
        task=task,
        family="",
        hidden=(),
        search=False,
        dpsgd=_grid_config(options, options.sigma_grid[0]),
    )
    return _training_plans(
        ir, region, RULE_S2, request, signature, registry, options,
        f"map ({', '.join(input_attrs)}) -> {out_attr} with a DP-trained model",
    )


def _s2a_plans(ir, region, shape, registry, options, predict_outputs):
    agg = ir.node(shape.aggregate).op
    func, attr = agg.aggs[0]
    slots, literals = encode_predicates(ir, shape.selects)
    preds = []
    for nid in shape.selects:
        preds.extend(ir.node(nid).op.predicates)
    signature = Signature(
        tuple("float64" if isinstance(v, (int, float)) else "text" for v in literals),
        "float64", "regression",
    )
    request = TrainingRequest(
        kind="aggregate_map",
        relation=shape.relation,
        input_attrs=slots,
        label_attr=attr,
        task="regression",
        family="",
        hidden=(),
        search=False,
        dpsgd=_grid_config(options, options.sigma_grid[0]),
        agg_func=func,
        predicates=tuple(preds),
        samples=options.aggregate_samples,
        predict_outputs=predict_outputs,
    )
    return _training_plans(
        ir, region, RULE_S2A, request, signature, registry, options,
        f"predict {func}({attr or '*'}) directly from the encoded predicate",
    )


def _s3_plans(ir, region, shape, registry, options, dropped):
    encoder = _find_encoder(registry)
    if encoder is None:
        dropped.append(
            DroppedPlan(RULE_S3, region.root, "no public encoder in the registry")
        )
        return []
    plans = []
    for predict_id in shape.predicts:
        op = ir.node(predict_id).op
        if op.task != "classification":
            continue
        binding = options.model_bindings.get(op.model_name)
        if binding is None:
            continue
        relation = binding.relation or shape.relation or _source_relation(ir, predict_id)
        if relation is None:
            continue
        for sigma in options.s3_sigma_grid:
            eps = gaussian_release_epsilon(sigma, options.delta)
            plans.append(
                CandidatePlan(
                    plan_id=f"S3-{region.root}-s{sigma:g}",
                    rule_id=RULE_S3,
                    base_ir=ir,
                    region=region,
                    binding=None,
                    epsilon=eps,
                    fingerprint=f"{relation}:knn",
                    explanation=f"noisy-embedding kNN over encoder {encoder.id} "
                    f"(sigma={sigma:g}, k={options.knn_k}) -> eps={eps:.3g}",
                    mech_params={
                        "predict_id": predict_id,
                        "encoder_id": encoder.id,
                        "sigma": sigma,
                        "clip": options.embed_clip,
                        "k": options.knn_k,
                        "relation": relation,
                        "label_attr": binding.label_attr,
                        "input_attrs": list(op.inputs),
                    },
                )
            )
    return plans


def _s4_plans(ir, region, shape, sensitivity, options):
    agg = ir.node(shape.aggregate).op
    func, attr = agg.aggs[0]
    plans = []
    for eps in options.s4_epsilon_grid:
        plans.append(
            CandidatePlan(
                plan_id=f"S4-{region.root}-e{eps:g}",
                rule_id=RULE_S4,
                base_ir=ir,
                region=region,
                binding=None,
                epsilon=eps,
                fingerprint=f"{func}",
                explanation=f"perturb {func}({attr or '*'}) with Laplace noise "
                f"(sensitivity={sensitivity:g}, eps={eps:g})",
                mech_params={"func": func, "attr": attr,
                             "sensitivity": sensitivity, "epsilon": eps},
            )
        )
    return plans


def passthrough_plan(ir: IrGraph) -> CandidatePlan:
    return CandidatePlan(
        plan_id="PASS-0",
        rule_id=RULE_PASS,
        base_ir=ir,
        region=None,
        binding=None,
        epsilon=0.0,
        fingerprint="passthrough",
        explanation="query touches no tainted data; no protection needed",
    )


# --- plan application -----------------------------------------------------------

def _subtree(ir: IrGraph, root: int) -> set[int]:
    nodes = {root}
    stack = [root]
    while stack:
        for child in ir.node(stack.pop()).children:
            if child not in nodes:
                nodes.add(child)
                stack.append(child)
    return nodes


def _splice(ir: IrGraph, root: int, new_nodes: list[tuple], new_edges: list[dict]) -> IrGraph:
    """Replace the subtree rooted at `root` with a fresh chain; the last new
    node takes root's place. new_nodes: [(op, children_within_chain)]."""
    removed = _subtree(ir, root)
    next_id = max(ir.nodes) + 1
    nodes = {nid: n for nid, n in ir.nodes.items() if nid not in removed}
    edges = {nid: e for nid, e in ir.edges.items() if nid not in removed}
    chain_ids = []
    for (op, child_slots), edge_info in zip(new_nodes, new_edges):
        nid = next_id
        next_id += 1
        children = tuple(chain_ids[slot] for slot in child_slots)
        nodes[nid] = IrNode(nid, op, children)
        edges[nid] = DatasetEdge(producer=nid, **edge_info)
        chain_ids.append(nid)
    new_root = chain_ids[-1]
    parent = ir.parent_of(root)
    if parent is None:
        sink = new_root
    else:
        sink = ir.sink
        old = nodes[parent]
        nodes[parent] = IrNode(
            old.id, old.op, tuple(new_root if c == root else c for c in old.children)
        )
    return IrGraph(nodes, edges, sink)


def _replace_node(ir: IrGraph, node_id: int, op) -> IrGraph:
    nodes = dict(ir.nodes)
    old = nodes[node_id]
    nodes[node_id] = IrNode(node_id, op, old.children)
    return IrGraph(nodes, dict(ir.edges), ir.sink)


def schemas_compatible(a, b) -> bool:
    """Same attribute names; int64/float64 are interchangeable (noisy outputs
    of integer aggregates are real-valued)."""
    if len(a) != len(b):
        return False
    numeric = {"int64", "float64"}
    for (n1, t1), (n2, t2) in zip(a, b):
        if n1 != n2:
            return False
        if t1 != t2 and not (t1 in numeric and t2 in numeric):
            return False
    return True


def apply_plan(plan: CandidatePlan, model=None, store_id: Optional[str] = None) -> IrGraph:
    """Rewrite the base IR according to the plan's rule. S1/S2/S2A need the
    materialized model artifact; S3 needs the noisy store id."""
    ir = plan.base_ir
    original_schema = ir.sink_schema()
    shape = region_shape(ir, plan.region) if plan.region else None

    if plan.rule_id == RULE_PASS:
        return ir

    if plan.rule_id == RULE_S1:
        predict_id = shape.predicts[0]
        op = ir.node(predict_id).op
        if model is None:
            raise SignatureMismatch("S1 requires a materialized model")
        if len(model.signature.input_types) != len(op.inputs):
            raise SignatureMismatch(
                f"model {model.id} takes {len(model.signature.input_types)} inputs,"
                f" operator feeds {len(op.inputs)}"
            )
        eps = plan.epsilon
        new_op = replace(op, model_id=model.id, epsilon=eps)
        out = _replace_node(ir, predict_id, new_op)

    elif plan.rule_id in (RULE_S2, RULE_S2A):
        if model is None:
            raise SignatureMismatch(f"{plan.rule_id} requires a materialized model")
        if plan.rule_id == RULE_S2:
            key = _equality_key(ir, shape.selects)
            attrs = tuple(a for a, _ in key)
            values = tuple(v for _, v in key)
            scan_schema = dict(ir.edge(shape.scan).schema)
            const_schema = tuple((a, scan_schema[a]) for a in attrs)
            out_attr, out_type = ir.edge(shape.project).schema[0]
        else:
            slots, values_list = encode_predicates(ir, shape.selects)
            attrs = slots
            values = tuple(values_list)
            const_schema = tuple(
                (a, "float64" if isinstance(v, (int, float)) else "text")
                for a, v in zip(attrs, values)
            )
            out_attr, out_type = ir.edge(shape.aggregate).schema[0]
        if len(model.signature.input_types) != len(attrs):
            raise SignatureMismatch(
                f"model {model.id} arity {len(model.signature.input_types)} != {len(attrs)}"
            )
        task = model.signature.task
        new_nodes = [
            (ConstantOp(const_schema, (values,)), ()),
            (PredictOp(model.id, attrs, out_attr, model_id=model.id, task=task,
                       epsilon=plan.epsilon), (0,)),
        ]
        out_schema = ((out_attr, "float64" if plan.rule_id == RULE_S2A else out_type),)
        new_edges = [
            {"schema": const_schema, "cardinality": 1},
            {"schema": out_schema, "cardinality": 1},
        ]
        out = _splice(ir, plan.region.root, new_nodes, new_edges)

    elif plan.rule_id == RULE_S3:
        predict_id = plan.mech_params["predict_id"]
        op = ir.node(predict_id).op
        new_op = NoisyEmbeddingLookupOp(
            encoder_id=plan.mech_params["encoder_id"],
            store_id=store_id or f"store-{plan.plan_id}",
            inputs=op.inputs,
            output=op.output,
            k=plan.mech_params["k"],
            epsilon=plan.epsilon,
        )
        out = _replace_node(ir, predict_id, new_op)

    elif plan.rule_id == RULE_S4:
        params = plan.mech_params
        new_op = NoisyAggregateOp(
            func=params["func"],
            attr=params["attr"],
            sensitivity=params["sensitivity"],
            epsilon=params["epsilon"],
        )
        out = _replace_node(ir, plan.region.root, new_op)

    else:
        raise SignatureMismatch(f"unknown rule {plan.rule_id}")

    if not schemas_compatible(out.sink_schema(), original_schema):
        raise SignatureMismatch(
            f"rewrite changed the sink schema: {out.sink_schema()} vs {original_schema}"
        )
    return out
