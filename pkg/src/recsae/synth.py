"""Planted-concept interaction data with known ground truth.

Items are split into contiguous concept blocks; every user prefers exactly
one concept and draws most positives from that block (popular items in the
block more often), with a ``noise`` share drawn uniformly from other blocks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ItemMeta, RawInteraction
from .mathops import make_rng
from .recommender import TrainConfig
from .sae import LossConfig, SaeTrainConfig


@dataclass
class PlantedData:
    interactions: list[RawInteraction]
    metadata: dict[str, ItemMeta]
    item_concept: dict[str, int]
    user_concept: dict[str, int]
    concept_labels: list[str]

    def ground_truth(self) -> dict:
        return {
            "schema": "groundtruth/1",
            "concept_labels": self.concept_labels,
            "item_concept": self.item_concept,
            "user_concept": self.user_concept,
        }


def concept_label(c: int) -> str:
    return f"concept_{c}"


def make_planted(
    n_users: int = 200,
    n_items: int = 120,
    n_concepts: int = 4,
    noise: float = 0.1,
    seed: int = 0,
    min_positives: int = 12,
    max_positives: int = 24,
    popularity_skew: float = 0.7,
) -> PlantedData:
    if n_concepts < 1 or n_items < n_concepts:
        raise ValueError("need at least one item per concept")
    if not 0.0 <= noise <= 1.0:
        raise ValueError("noise must be in [0, 1]")
    rng = make_rng(seed)
    item_concept = np.repeat(np.arange(n_concepts), -(-n_items // n_concepts))[:n_items]
    # Within-block popularity follows a shuffled power law.
    weights = np.empty(n_items)
    for c in range(n_concepts):
        block = np.flatnonzero(item_concept == c)
        w = 1.0 / (np.arange(block.size) + 1.0) ** popularity_skew
        weights[block] = rng.permutation(w / w.sum())
    user_concept = rng.integers(0, n_concepts, size=n_users)

    interactions = []
    for u in range(n_users):
        c = user_concept[u]
        block = np.flatnonzero(item_concept == c)
        others = np.flatnonzero(item_concept != c)
        n_pos = int(rng.integers(min_positives, max_positives + 1))
        n_noise = int(rng.binomial(n_pos, noise)) if others.size else 0
        n_in = min(n_pos - n_noise, block.size)
        n_noise = min(n_noise, others.size)
        chosen = rng.choice(block, size=n_in, replace=False, p=weights[block] / weights[block].sum())
        if n_noise:
            chosen = np.concatenate([chosen, rng.choice(others, size=n_noise, replace=False)])
        for i in np.sort(chosen):
            interactions.append(RawInteraction(str(u), str(i), 1.0))

    metadata = {
        str(i): ItemMeta(
            title=f"item {i}",
            labels=frozenset({concept_label(int(item_concept[i]))}),
            year=1950 + 10 * (int(item_concept[i]) % 6) + int(rng.integers(0, 10)),
        )
        for i in range(n_items)
    }
    return PlantedData(
        interactions=interactions,
        metadata=metadata,
        item_concept={str(i): int(item_concept[i]) for i in range(n_items)},
        user_concept={str(u): int(user_concept[u]) for u in range(n_users)},
        concept_labels=[concept_label(c) for c in range(n_concepts)],
    )


# Settings tuned on the planted suite (200 users, 120 items, 4 concepts).
# The recommender-level defaults elsewhere follow the MovieLens setup and are
# too large for a catalogue this small.
SYNTH_BETAS = (0.0, 4.0, 16.0, 64.0, 256.0, 1024.0)


def synthetic_train_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(learning_rate=0.05, batch_size=64, epochs=20, d=8, seed=seed)


def synthetic_sae_config(seed: int = 0, beta: float = 16.0, levels: int = 1) -> SaeTrainConfig:
    return SaeTrainConfig(
        m=16,
        levels=levels,
        learning_rate=1e-2,
        epochs=300,
        seed=seed,
        loss=LossConfig(alpha=0.1, beta=beta, lambda1=0.01, lambda2=0.1, rho=0.05, batch_size=64),
    )
