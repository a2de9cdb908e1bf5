"""Monosemanticity measurements over SAE bottleneck activations."""
from __future__ import annotations

import csv
import io
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import InteractionDataset, ItemMeta
from .recommender import RecommenderModel, rank_order
from .sae import SaeModel, encode

log = logging.getLogger(__name__)

NEURONS_SCHEMA = "neurons/1"


def neuron_activations(sae: SaeModel, model: RecommenderModel, side: str = "item") -> np.ndarray:
    """(n_entities, m) latent codes of every frozen user or item embedding."""
    if side not in ("user", "item"):
        raise ValueError("side must be 'user' or 'item'")
    if sae.d != model.d:
        raise ValueError(f"SAE expects d={sae.d}, recommender has d={model.d}")
    table = model.item_embeddings if side == "item" else model.user_embeddings
    return encode(sae, table)


def top_activating(activations: np.ndarray, neuron: int, k: int) -> list[tuple[int, float]]:
    """The ``k`` rows with the largest activation of ``neuron``; ties go to the lower index."""
    col = activations[:, neuron]
    order = rank_order(col)[:k]
    return [(int(i), float(col[i])) for i in order]


def _item_indices(top_items) -> list[int]:
    return [int(t[0]) if isinstance(t, (tuple, list)) else int(t) for t in top_items]


def semantic_purity(top_items, label: str, metadata: Mapping[int, ItemMeta]) -> float:
    """Share of ``top_items`` whose label set contains ``label``.

    Items without metadata count as non-matching; their number is logged.
    """
    items = _item_indices(top_items)
    if not items:
        return 0.0
    missing = sum(1 for i in items if i not in metadata)
    if missing:
        log.warning("%d of %d items have no metadata; counted as non-matching", missing, len(items))
    hits = sum(1 for i in items if i in metadata and label in metadata[i].labels)
    return hits / len(items)


def popularity_top_distance(item_popularity: np.ndarray) -> np.ndarray:
    """Per-item distance from the head of the popularity ranking, in (0, 1).

    The most popular item sits at ``0.5 / n``; tied items share their mid rank.
    """
    pop = np.asarray(item_popularity, dtype=np.float64)
    return (rankdata(-pop, method="average") - 0.5) / pop.size


def popularity_percentile(top_items, item_popularity: np.ndarray, k: int | None = None) -> float:
    """Mean top-distance of the first ``k`` items (lower means more popular)."""
    items = _item_indices(top_items)
    if k is not None:
        items = items[:k]
    if not items:
        raise ValueError("no items to average")
    return float(np.mean(popularity_top_distance(item_popularity)[items]))


def monosemanticity_from_activations(activations: np.ndarray, item_embeddings: np.ndarray, top_t: int = 30):
    """Activation-weighted mean pairwise cosine among each neuron's top items.

    For neuron j with top-``top_t`` items a, b and normalised activation
    weights w, the score is sum_{a<b} w_a w_b cos(e_a, e_b) / sum_{a<b} w_a w_b.
    Returns ``(per_neuron, aggregate, skipped)``; per-neuron entries are NaN
    for neurons with fewer than two active items, which are listed in
    ``skipped`` and left out of the aggregate mean.
    """
    norms = np.linalg.norm(item_embeddings, axis=1, keepdims=True)
    unit = item_embeddings / np.where(norms > 0, norms, 1.0)
    m = activations.shape[1]
    scores = np.full(m, np.nan)
    skipped = []
    for j in range(m):
        top = rank_order(activations[:, j])[:top_t]
        a = activations[top, j]
        keep = a > 0
        if keep.sum() < 2:
            skipped.append(j)
            continue
        w = a[keep] / a[keep].sum()
        cos = unit[top[keep]] @ unit[top[keep]].T
        ww = np.outer(w, w)
        iu = np.triu_indices(w.size, k=1)
        scores[j] = float(np.sum(ww[iu] * cos[iu]) / np.sum(ww[iu]))
    valid = scores[~np.isnan(scores)]
    aggregate = float(valid.mean()) if valid.size else float("nan")
    return scores, aggregate, skipped


def monosemanticity_score(sae: SaeModel, model: RecommenderModel, top_t: int = 30):
    acts = neuron_activations(sae, model, "item")
    return monosemanticity_from_activations(acts, model.item_embeddings, top_t)


def genre_activation_profile(
    activations: np.ndarray,
    metadata: Mapping[int, ItemMeta],
    label: str | None = None,
    neuron: int | None = None,
) -> list[dict]:
    """Plot-ready rows for one label across neurons, or one neuron across labels.

    With ``label``: one row per neuron holding the mean activation over items
    carrying the label and the catalogue-wide mean. With ``neuron``: one row
    per label holding the neuron's mean activation over that label's items.
    """
    if (label is None) == (neuron is None):
        raise ValueError("give exactly one of label or neuron")
    if label is not None:
        if not label:
            raise ValueError("label must be non-empty")
        idx = [i for i, m in metadata.items() if label in m.labels]
        if not idx:
            raise ValueError(f"no items carry label {label!r}")
        mean = activations[idx].mean(axis=0)
        base = activations.mean(axis=0)
        return [
            {"label": label, "neuron": j, "mean_activation": float(mean[j]), "baseline": float(base[j])}
            for j in range(activations.shape[1])
        ]
    labels = sorted({lab for m in metadata.values() for lab in m.labels})
    rows = []
    for lab in labels:
        idx = [i for i, m in metadata.items() if lab in m.labels]
        rows.append({
            "neuron": neuron,
            "label": lab,
            "n_items": len(idx),
            "mean_activation": float(activations[idx, neuron].mean()),
        })
    return rows


def peak_neuron(profile: Sequence[dict]) -> int:
    """Neuron with the largest lift over baseline in a label-mode profile."""
    return max(profile, key=lambda r: (r["mean_activation"] - r["baseline"], -r["neuron"]))["neuron"]


def temporal_profile(activations: np.ndarray, metadata: Mapping[int, ItemMeta], neuron: int, k: int = 50, bucket: int = 10):
    """Decade histogram of the neuron's top-``k`` items with a known year.

    Returns ``(counts, n_missing_year)`` with counts keyed by bucket start year.
    """
    counts: Counter[int] = Counter()
    missing = 0
    for i, _ in top_activating(activations, neuron, k):
        meta = metadata.get(i)
        if meta is None or meta.year is None:
            missing += 1
            continue
        counts[(meta.year // bucket) * bucket] += 1
    return dict(sorted(counts.items())), missing


def best_neuron_for_label(activations: np.ndarray, metadata: Mapping[int, ItemMeta], label: str, k: int = 10) -> tuple[int, float]:
    """Neuron whose top-``k`` items are purest for ``label``.

    Ties on purity go to the neuron with the larger lift of mean activation on
    labelled items over the catalogue mean.
    """
    idx = [i for i, m in metadata.items() if label in m.labels]
    lift = activations[idx].mean(axis=0) - activations.mean(axis=0) if idx else np.zeros(activations.shape[1])
    best = None
    for j in range(activations.shape[1]):
        if not np.any(activations[:, j] > 0):
            continue
        p = semantic_purity(top_activating(activations, j, k), label, metadata)
        key = (p, lift[j])
        if best is None or key > best[0]:
            best = (key, j)
    if best is None:
        return -1, 0.0
    return best[1], best[0][0]


@dataclass
class NeuronReport:
    neuron_index: int
    top_items: list[tuple[int, float]]
    assigned_label: str | None = None
    purity_at: dict[int, float] = field(default_factory=dict)
    popularity_percentile_at: dict[int, float] = field(default_factory=dict)
    monosemanticity: float = float("nan")


def neuron_reports(
    activations: np.ndarray,
    dataset: InteractionDataset,
    item_embeddings: np.ndarray,
    labels: Mapping[int, str] | None = None,
    ks: Sequence[int] = (10, 20, 50),
    top_t: int = 30,
) -> list[NeuronReport]:
    kmax = min(max(ks), activations.shape[0])
    mono, _, _ = monosemanticity_from_activations(activations, item_embeddings, top_t)
    out = []
    for j in range(activations.shape[1]):
        top = top_activating(activations, j, kmax)
        rep = NeuronReport(j, top, monosemanticity=float(mono[j]))
        for k in ks:
            if k <= kmax:
                rep.popularity_percentile_at[k] = popularity_percentile(top, dataset.item_popularity, k)
        if labels and j in labels:
            rep.assigned_label = labels[j]
            for k in ks:
                if k <= kmax:
                    rep.purity_at[k] = semantic_purity(top[:k], labels[j], dataset.item_metadata)
        out.append(rep)
    return out


def export_neurons(reports: Sequence[NeuronReport], dataset: InteractionDataset) -> dict:
    """Top-item lists per neuron, for labelling outside this package."""
    neurons = []
    for r in reports:
        items = []
        for i, a in r.top_items:
            meta = dataset.item_metadata.get(i, ItemMeta())
            items.append({
                "item_id": dataset.item_ids[i],
                "title": meta.title,
                "labels": sorted(meta.labels),
                "activation": a,
            })
        entry = {"neuron": r.neuron_index, "top_items": items, "monosemanticity": None if np.isnan(r.monosemanticity) else r.monosemanticity}
        if r.popularity_percentile_at:
            entry["popularity_top_distance"] = {str(k): v for k, v in r.popularity_percentile_at.items()}
        if r.assigned_label is not None:
            entry["label"] = r.assigned_label
            entry["purity"] = {str(k): v for k, v in r.purity_at.items()}
        neurons.append(entry)
    return {"schema": NEURONS_SCHEMA, "neurons": neurons}


def read_label_file(path) -> dict[int, str]:
    """Parse ``neuron_index<TAB>label`` lines."""
    out = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 2 or not parts[0].strip().isdigit():
                raise ValueError(f"{path}:{lineno}: expected 'neuron_index<TAB>label'")
            out[int(parts[0])] = parts[1].strip()
    return out


def rows_to_csv(rows: Sequence[Mapping], columns: Sequence[str] | None = None) -> str:
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items() if k in columns})
    return buf.getvalue()
