"""Post-hoc edits of bottleneck activations and their effect on rankings.

An edit encodes one user or item embedding, changes some latent units,
decodes, and re-scores through the frozen recommender. Nothing is written
back into the recommender or the SAE.

By default the edited vector competes against the original embeddings of
everything else; ``all_reconstructed=True`` instead reconstructs every
user and item first, matching the world used for fidelity measurements.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import InteractionDataset
from .recommender import RecommenderModel, score_items
from .sae import SaeBundle, decode, encode, reconstruct

log = logging.getLogger(__name__)

INTERVENTION_SCHEMA = "intervention/1"
MODES = ("set", "add", "scale")
TRAJECTORY_COLUMNS = ["sweep_value", "segment", "mean_rank", "fraction_in_topN"]


@dataclass(frozen=True)
class Edit:
    neuron: int
    mode: str
    value: float

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"edit mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "scale" and self.value < 0:
            raise ValueError("scale factor must be >= 0")


@dataclass
class InterventionSpec:
    side: str
    entity: int
    edits: list[Edit] = field(default_factory=list)
    audience: dict = field(default_factory=lambda: {"kind": "all"})

    @classmethod
    def from_json(cls, doc: dict) -> "InterventionSpec":
        if doc.get("schema") != INTERVENTION_SCHEMA:
            raise ValueError(f"expected schema {INTERVENTION_SCHEMA!r}, got {doc.get('schema')!r}")
        target = doc["target"]
        edits = [Edit(int(e["neuron"]), e["mode"], float(e["value"])) for e in doc.get("edits", [])]
        return cls(target["side"], int(target["entity"]), edits, dict(doc.get("audience", {"kind": "all"})))

    def to_json(self) -> dict:
        return {
            "schema": INTERVENTION_SCHEMA,
            "target": {"side": self.side, "entity": self.entity},
            "edits": [{"neuron": e.neuron, "mode": e.mode, "value": e.value} for e in self.edits],
            "audience": self.audience,
        }


def edit_latent(z: np.ndarray, edits: Sequence[Edit]) -> np.ndarray:
    """Apply ``edits`` left to right; negative results are clamped to zero."""
    z = np.array(z, dtype=np.float64)
    for e in edits:
        if not 0 <= e.neuron < z.size:
            raise ValueError(f"neuron {e.neuron} out of range for a bottleneck of {z.size}")
        if e.mode == "set":
            z[e.neuron] = e.value
        elif e.mode == "add":
            z[e.neuron] += e.value
        else:
            z[e.neuron] *= e.value
        if z[e.neuron] < 0:
            log.warning("edit drove neuron %d to %.4g; clamped to 0", e.neuron, z[e.neuron])
            z[e.neuron] = 0.0
    return z


def apply_intervention(bundle: SaeBundle, model: RecommenderModel, spec: InterventionSpec) -> np.ndarray:
    """Edited reconstruction of the targeted user or item embedding."""
    sae = bundle.for_side(spec.side)
    if sae.d != model.d:
        raise ValueError(f"SAE expects d={sae.d}, recommender has d={model.d}")
    table = model.user_embeddings if spec.side == "user" else model.item_embeddings
    z = encode(sae, table[spec.entity])
    return decode(sae, edit_latent(z, spec.edits))


def rank_from_scores(scores: np.ndarray, item: int) -> int:
    """1 + items scoring strictly higher + tied items with a lower index."""
    s = scores[item]
    return int(1 + np.count_nonzero(scores > s) + np.count_nonzero(scores[:item] == s))


def rank_of_item(
    model: RecommenderModel,
    user: int,
    item: int,
    candidate_embeddings: np.ndarray | None = None,
    user_embedding: np.ndarray | None = None,
) -> int:
    """Rank of ``item`` for ``user`` against a candidate item table (original by default)."""
    table = model.item_embeddings if candidate_embeddings is None else candidate_embeddings
    eu = model.user_embeddings[user] if user_embedding is None else user_embedding
    return rank_from_scores(score_items(model, eu, table), item)


def label_affinity_segments(dataset: InteractionDataset, threshold: float = 0.6, labels: Sequence[str] | None = None) -> dict[str, list[int]]:
    """Users whose training positives carry a label at least ``threshold`` of the time."""
    labels = list(labels) if labels is not None else dataset.labels()
    by_user = dataset.items_by_user(("train",))
    meta = dataset.item_metadata
    out = {lab: [] for lab in labels}
    for u, items in enumerate(by_user):
        if items.size == 0:
            continue
        for lab in labels:
            share = sum(1 for i in items if i in meta and lab in meta[i].labels) / items.size
            if share >= threshold:
                out[lab].append(u)
    return out


def resolve_audience(audience: Mapping, dataset: InteractionDataset | None, n_users: int) -> dict[str, list[int]]:
    kind = audience.get("kind", "all")
    if kind == "all":
        return {"all": list(range(n_users))}
    if kind == "users":
        return {audience.get("name", "users"): [int(u) for u in audience["users"]]}
    if kind == "label":
        if dataset is None:
            raise ValueError("label audiences need the dataset")
        segs = label_affinity_segments(dataset, audience.get("threshold", 0.6), audience["labels"])
        return segs
    raise ValueError(f"unknown audience kind {kind!r}")


def cohort_aligned_neurons(user_activations: np.ndarray, cohort: Sequence[int], rel: float = 0.5) -> list[int]:
    """Units that fire more for ``cohort`` than for the remaining users.

    Lift is the cohort's mean activation minus everyone else's. Units with a
    lift of at least ``rel`` times the largest lift are returned, largest
    first; a concept split over two units is then caught by both.
    """
    if not 0.0 < rel <= 1.0:
        raise ValueError("rel must be in (0, 1]")
    acts = np.asarray(user_activations)
    mask = np.zeros(acts.shape[0], dtype=bool)
    mask[np.asarray(cohort, dtype=np.int64)] = True
    if not mask.any() or mask.all():
        raise ValueError("cohort must be a non-empty proper subset of the users")
    lift = acts[mask].mean(axis=0) - acts[~mask].mean(axis=0)
    top = lift.max()
    if top <= 0:
        return []
    order = np.argsort(-lift, kind="stable")
    return [int(j) for j in order if lift[j] >= rel * top]


@dataclass
class RankTrajectory:
    sweep_values: list[float]
    top_n: int
    rows: list[dict]

    def mean_ranks(self, segment: str) -> list[float | None]:
        return [r["mean_rank"] for r in self.rows if r["segment"] == segment]


def trajectory_csv(traj: RankTrajectory) -> str:
    from .analysis import rows_to_csv

    return rows_to_csv(traj.rows, TRAJECTORY_COLUMNS)


def _tables(model: RecommenderModel, bundle: SaeBundle, all_reconstructed: bool):
    if all_reconstructed:
        return reconstruct(bundle.user, model.user_embeddings), reconstruct(bundle.item, model.item_embeddings)
    return model.user_embeddings, model.item_embeddings


def promotion_sweep(
    bundle: SaeBundle,
    model: RecommenderModel,
    item: int,
    neuron: int,
    values: Sequence[float],
    segments: Mapping[str, Sequence[int]],
    n: int = 30,
    mode: str = "set",
    all_reconstructed: bool = False,
) -> RankTrajectory:
    """Rank of ``item`` for each audience segment as one of its latent units is pushed.

    ``mean_rank`` counts users whose rank exceeds ``n`` as ``n + 1``;
    ``fraction_in_topN`` is the share of users with rank <= n.
    """
    values = [float(v) for v in values]
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ValueError("sweep values must be strictly increasing")
    users_t, items_t = _tables(model, bundle, all_reconstructed)
    rows = []
    for v in values:
        spec = InterventionSpec("item", item, [Edit(neuron, mode, v)])
        table = items_t.copy()
        table[item] = apply_intervention(bundle, model, spec)
        for name, users in segments.items():
            if len(users) == 0:
                rows.append({"sweep_value": v, "segment": name, "mean_rank": None, "fraction_in_topN": None, "n_users": 0})
                continue
            ranks = np.array([rank_from_scores(score_items(model, users_t[u], table), item) for u in users])
            rows.append({
                "sweep_value": v,
                "segment": name,
                "mean_rank": float(np.mean(np.minimum(ranks, n + 1))),
                "fraction_in_topN": float(np.mean(ranks <= n)),
                "n_users": len(users),
            })
    return RankTrajectory(values, n, rows)


def cohort_exposure(
    bundle: SaeBundle,
    model: RecommenderModel,
    cohort: Sequence[int],
    edits: Sequence[Edit],
    label: str,
    dataset: InteractionDataset,
    n: int = 10,
    all_reconstructed: bool = False,
) -> dict:
    """Count ``label`` items in each cohort user's top-n before and after editing their latents.

    "Before" uses the user's unedited reconstruction and "after" the same
    reconstruction with ``edits`` applied, so the report isolates the edit
    from reconstruction error.
    """
    _, items_t = _tables(model, bundle, all_reconstructed)
    labelled = np.zeros(model.n_items, dtype=bool)
    for i, meta in dataset.item_metadata.items():
        labelled[i] = label in meta.labels
    per_user = []
    for u in cohort:
        z = encode(bundle.user, model.user_embeddings[u])
        before_u = decode(bundle.user, z)
        after_u = decode(bundle.user, edit_latent(z, edits))
        before = np.argsort(-score_items(model, before_u, items_t), kind="stable")[:n]
        after = np.argsort(-score_items(model, after_u, items_t), kind="stable")[:n]
        per_user.append({"user": int(u), "before": int(labelled[before].sum()), "after": int(labelled[after].sum())})
    before_total = sum(r["before"] for r in per_user)
    after_total = sum(r["after"] for r in per_user)
    return {
        "label": label,
        "top_n": n,
        "before": before_total,
        "after": after_total,
        "reduction": (before_total - after_total) / before_total if before_total else 0.0,
        "per_user": per_user,
    }


def suppress_for_cohort(
    bundle: SaeBundle,
    model: RecommenderModel,
    cohort: Sequence[int],
    neurons: int | Sequence[int],
    label: str,
    dataset: InteractionDataset,
    scale: float = 0.0,
    n: int = 10,
    all_reconstructed: bool = False,
) -> dict:
    """Exposure report after multiplying ``neurons`` by ``scale`` (0 zeroes them) for every cohort user."""
    if not 0.0 <= scale <= 1.0:
        raise ValueError("suppression scale must be in [0, 1]")
    neurons = [int(neurons)] if isinstance(neurons, (int, np.integer)) else [int(j) for j in neurons]
    edits = [Edit(j, "scale", scale) for j in neurons]
    report = cohort_exposure(bundle, model, cohort, edits, label, dataset, n, all_reconstructed)
    report.update(neurons=neurons, scale=scale)
    return report
