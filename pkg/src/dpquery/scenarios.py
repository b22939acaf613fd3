"""Scenario bundles: catalog + synthetic data + queries + constraints.

Bundles are JSON files (shipped under dpquery/fixtures/); their data files
are materialized on demand by seeded generators, so every scenario is fully
reproducible from its bundle alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .catalog import AttributeDescriptor, Catalog, RelationDescriptor
from .executor import ModelStore, StubModel
from .learn.features import HashedTextFeaturizer
from .learn.nn import LayerSpec, init_weights
from .learn.registry import ModelArtifact, ModelRegistry, Provenance, Signature
from .optimizer import CostModel, UserConstraints
from .rewrite import ArchFamily, ModelBinding, PlannerOptions
from .tables import Table, TableStore, load_csv, load_jsonl, save_jsonl

FIXTURES_DIR = Path(__file__).parent / "fixtures"

POSITIVE_CUES = ("wonderful", "superb", "delightful", "moving", "brilliant", "charming")
NEGATIVE_CUES = ("dreadful", "boring", "clumsy", "tedious", "bland", "dismal")
SENTIMENT_VOCAB = POSITIVE_CUES + NEGATIVE_CUES
_FILLERS = ("the", "film", "plot", "with", "scenes", "a", "story", "that",
            "felt", "and", "it", "was", "in", "parts")


def sentiment_of(text: str) -> str:
    """Ground-truth labeling rule used both to plant labels and as the oracle
    model stub."""
    tokens = text.lower().split()
    pos = sum(tokens.count(w) for w in POSITIVE_CUES)
    neg = sum(tokens.count(w) for w in NEGATIVE_CUES)
    return "Positive" if pos > neg else "Negative"


def generate_reviews(rows: int, seed: int, with_date: bool = True) -> Table:
    """Synthetic review corpus with planted cue words; the label always agrees
    with sentiment_of (strict cue majority by construction)."""
    rng = np.random.Generator(np.random.Philox(seed))
    schema = [("review_id", "int64")]
    if with_date:
        schema.append(("date", "text"))
    schema += [("Review", "text"), ("sentiment", "text")]
    out = []
    for i in range(rows):
        positive = bool(rng.integers(2))
        main = POSITIVE_CUES if positive else NEGATIVE_CUES
        other = NEGATIVE_CUES if positive else POSITIVE_CUES
        n_main = int(rng.integers(2, 4))
        n_other = int(rng.integers(0, n_main))  # strictly fewer than n_main
        words = [str(_FILLERS[int(rng.integers(len(_FILLERS)))]) for _ in range(6)]
        words += [main[int(rng.integers(len(main)))] for _ in range(n_main)]
        words += [other[int(rng.integers(len(other)))] for _ in range(n_other)]
        order = rng.permutation(len(words))
        text = " ".join(words[j] for j in order)
        row = [i + 1]
        if with_date:
            row.append(f"06/{int(rng.integers(1, 31)):02d}/2015")
        row += [text, "Positive" if positive else "Negative"]
        out.append(tuple(row))
    return Table(tuple(schema), out)


def patient_age(i: int) -> str:
    return str(65 + (i * 7) % 26)


def patient_location(i: int) -> str:
    return f"Elderly Care-{(i % 3) + 1}"


def generate_patients(rows: int, seed: int) -> Table:
    """Synthetic elderly-care records; MRI scans are opaque blob tokens."""
    rng = np.random.Generator(np.random.Philox(seed))
    schema = (
        ("patient_id", "int64"),
        ("Nurse_Location", "text"),
        ("Alzheimer_Patient_Name", "text"),
        ("Alzheimer_Patient_Age", "text"),
        ("MRI_Images", "blob"),
    )
    out = []
    for i in range(1, rows + 1):
        token = f"mri-scan-{i:03d}-{int(rng.integers(1 << 30)):08x}"
        out.append((i, patient_location(i), f"Patient {i:02d}", patient_age(i), token))
    return Table(schema, out)


_GENERATORS = {
    "imdb_reviews": lambda rows, seed: generate_reviews(rows, seed, with_date=True),
    "reviews_nodate": lambda rows, seed: generate_reviews(rows, seed, with_date=False),
    "alzheimers_patients": generate_patients,
}

_STUBS = {
    "sentiment_cues": lambda: StubModel("sentiment_cues", lambda vals: sentiment_of(str(vals[0]))),
}


def make_text_encoder(encoder_id: str, dim: int, seed: int,
                      text_dim: int = 32) -> ModelArtifact:
    """Public encoder: seeded random projection over hashed text features."""
    layers = [LayerSpec(dim, "identity")]
    return ModelArtifact(
        id=encoder_id,
        signature=Signature(("text",), "float64", "embedding"),
        in_dim=text_dim,
        layers=layers,
        weights=init_weights(text_dim, layers, seed),
        provenance=Provenance(trained_with_dp=False),
        featurizer_spec=HashedTextFeaturizer(text_dim).spec(),
    )


@dataclass
class Workspace:
    name: str
    catalog: Catalog
    tables: TableStore
    registry: ModelRegistry
    cost_model: CostModel
    options: PlannerOptions
    oracle_models: ModelStore
    queries: dict[str, str]
    constraints: UserConstraints
    default_user: str
    default_role: str
    default_dataset: str
    sweep: dict = field(default_factory=dict)
    data_dir: Optional[Path] = None


def bundle_path(name: str) -> Path:
    candidate = Path(name)
    if candidate.suffix == ".json" and candidate.exists():
        return candidate
    path = FIXTURES_DIR / f"{name}.json"
    if not path.exists():
        known = sorted(p.stem for p in FIXTURES_DIR.glob("*.json"))
        raise FileNotFoundError(f"unknown scenario {name!r}; available: {known}")
    return path


def load_scenario(name: str, data_dir: str | Path) -> Workspace:
    bundle = json.loads(bundle_path(name).read_text())
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)

    catalog = Catalog()
    tables = TableStore()
    seed = bundle.get("seed", 7)
    for rel in bundle["relations"]:
        attrs = [
            AttributeDescriptor(
                a["name"], a["data_type"], a.get("tainted", False),
                dict(a.get("per_role_epsilon", {})), a.get("clamp_bound")
            )
            for a in rel["attributes"]
        ]
        schema = tuple((a.name, a.data_type) for a in attrs)
        data = rel["data"]
        path = data_dir / data["path"]
        if not path.exists():
            table = _GENERATORS[data["generator"]](data["rows"], seed)
            if data["format"] == "jsonl":
                save_jsonl(table, path)
            else:
                table.to_csv(path)
        table = (load_jsonl if data["format"] == "jsonl" else load_csv)(path, schema)
        tables.add(rel["name"], table)
        catalog.add_relation(
            RelationDescriptor(rel["name"], attrs, None, len(table.rows))
        )

    for role in bundle.get("roles", []):
        catalog.add_role(role)
    budgets = bundle.get("budgets", {})
    for name_, b in budgets.get("datasets", {}).items():
        catalog.ledger.register_dataset(name_, b["epsilon"], b.get("delta", 1e-5))
    for name_, b in budgets.get("users", {}).items():
        catalog.ledger.register_user(name_, b["epsilon"], b.get("delta", 1e-5))

    registry = ModelRegistry()
    for enc in bundle.get("encoders", []):
        registry.add(make_text_encoder(enc["id"], enc["dim"], enc.get("seed", 99)))

    cost_model = CostModel()
    for key, values in bundle.get("cost_model", {}).get("curves", {}).items():
        rule_id, fingerprint = key.split("|", 1)
        cost_model.set_curve(rule_id, fingerprint, values, observed=True)

    opts = bundle.get("options", {})
    options = PlannerOptions(
        families=tuple(
            ArchFamily(f["name"], tuple(f.get("hidden", [16])), f.get("search", False))
            for f in opts.get("families", [{"name": "mlp16", "hidden": [16]}])
        ),
        sigma_grid=tuple(opts.get("sigma_grid", [4.0, 8.0, 16.0])),
        s4_epsilon_grid=tuple(opts.get("s4_epsilon_grid", [0.25, 0.5, 1.0, 2.0, 4.0])),
        s3_sigma_grid=tuple(opts.get("s3_sigma_grid", [1.0, 2.0, 4.0])),
        steps=opts.get("steps", 60),
        sampling_rate=opts.get("sampling_rate", 0.5),
        clip_norm=opts.get("clip_norm", 1.0),
        learning_rate=opts.get("learning_rate", 0.25),
        delta=opts.get("delta", 1e-5),
        seed=seed,
        model_bindings={
            name_: ModelBinding(
                mb["task"], mb["label_attr"], mb.get("relation"), mb.get("featurizer")
            )
            for name_, mb in bundle.get("model_bindings", {}).items()
        },
    )
    if "enabled_rules" in opts:
        options.enabled_rules = tuple(opts["enabled_rules"])

    oracle_models = ModelStore()
    for model_name, stub in bundle.get("oracle_models", {}).items():
        oracle_models.add(model_name, _STUBS[stub["kind"]]())

    return Workspace(
        name=bundle["name"],
        catalog=catalog,
        tables=tables,
        registry=registry,
        cost_model=cost_model,
        options=options,
        oracle_models=oracle_models,
        queries=dict(bundle.get("queries", {})),
        constraints=UserConstraints.from_json(bundle.get("constraints")),
        default_user=bundle.get("default_user", "analyst"),
        default_role=bundle.get("default_role", "data_scientist"),
        default_dataset=bundle["relations"][0]["name"],
        sweep=dict(bundle.get("sweep", {})),
        data_dir=data_dir,
    )
