"""How faithfully an SAE-reconstructed recommender reproduces the original rankings."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .analysis import monosemanticity_from_activations, rows_to_csv
from .data import InteractionDataset
from .mathops import make_rng
from .recommender import RecommenderModel, rank_order, score_items
from .sae import SaeBundle, SaeTrainConfig, encode, reconstruct, train_sae

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ["beta", "seed", "rbo_mean", "rbo_std", "tau_mean", "tau_std", "monosemanticity", "active_neuron_fraction"]


def _check_unique(lst, name):
    if len(set(lst)) != len(lst):
        raise ValueError(f"{name} contains duplicate items")


def rbo(list_a: Sequence, list_b: Sequence, p: float = 0.9) -> float:
    """Extrapolated rank-biased overlap evaluated at the shorter list's depth.

    With agreement A_d = |a[:d] & b[:d]| / d and depth k,
    RBO = A_k p^k + (1 - p) / p * sum_{d<=k} A_d p^d.
    """
    _check_unique(list_a, "list_a")
    _check_unique(list_b, "list_b")
    if not 0.0 < p < 1.0:
        raise ValueError("persistence p must be in (0, 1)")
    k = min(len(list_a), len(list_b))
    if k == 0:
        return 0.0
    seen_a, seen_b = set(), set()
    overlap = 0
    total = 0.0
    agreement = 0.0
    for d in range(1, k + 1):
        x, y = list_a[d - 1], list_b[d - 1]
        if x == y:
            overlap += 1
        else:
            overlap += (x in seen_b) + (y in seen_a)
        seen_a.add(x)
        seen_b.add(y)
        agreement = overlap / d
        total += agreement * p**d
    return float(min(1.0, agreement * p**k + (1.0 - p) / p * total))


def kendall_tau(list_a: Sequence, list_b: Sequence) -> float:
    """Kendall's tau between the orders two lists impose on their shared items.

    NaN when fewer than two items are shared.
    """
    _check_unique(list_a, "list_a")
    _check_unique(list_b, "list_b")
    pos_b = {x: r for r, x in enumerate(list_b)}
    shared = [pos_b[x] for x in list_a if x in pos_b]
    n = len(shared)
    if n < 2:
        return float("nan")
    r = np.asarray(shared)
    diff = np.sign(r[None, :] - r[:, None])
    iu = np.triu_indices(n, k=1)
    return float(diff[iu].sum() / (n * (n - 1) / 2))


def shared_count(list_a: Sequence, list_b: Sequence) -> int:
    return len(set(list_a) & set(list_b))


def reconstructed_tables(model: RecommenderModel, bundle: SaeBundle, level: int | None = None):
    return (
        reconstruct(bundle.user, model.user_embeddings, level),
        reconstruct(bundle.item, model.item_embeddings, level),
    )


def reconstructed_top_n(model: RecommenderModel, bundle: SaeBundle, user: int, n: int, level: int | None = None) -> list[int]:
    """Top-n items when the user and every item are replaced by their reconstructions."""
    eu = reconstruct(bundle.user, model.user_embeddings[user], level)
    items = reconstruct(bundle.item, model.item_embeddings, level)
    return rank_order(score_items(model, eu, items))[:n].tolist()


@dataclass
class FidelityResult:
    users: np.ndarray
    rbo: np.ndarray
    kendall_tau: np.ndarray
    shared: np.ndarray
    list_depth: int = 30

    @property
    def rbo_mean(self) -> float:
        return float(np.mean(self.rbo))

    @property
    def rbo_std(self) -> float:
        return float(np.std(self.rbo))

    @property
    def tau_mean(self) -> float:
        return float(np.nanmean(self.kendall_tau)) if np.any(~np.isnan(self.kendall_tau)) else float("nan")

    @property
    def tau_std(self) -> float:
        return float(np.nanstd(self.kendall_tau)) if np.any(~np.isnan(self.kendall_tau)) else float("nan")


def evaluate_fidelity(
    model: RecommenderModel,
    bundle: SaeBundle,
    users: Sequence[int] | None = None,
    depth: int = 30,
    p: float = 0.9,
    level: int | None = None,
) -> FidelityResult:
    users = np.arange(model.n_users) if users is None else np.asarray(users, dtype=np.int64)
    rec_u, rec_i = reconstructed_tables(model, bundle, level)
    r, t, s = [], [], []
    for u in users:
        orig = rank_order(score_items(model, model.user_embeddings[u], model.item_embeddings))[:depth].tolist()
        recon = rank_order(score_items(model, rec_u[u], rec_i))[:depth].tolist()
        r.append(rbo(orig, recon, p))
        t.append(kendall_tau(orig, recon))
        s.append(shared_count(orig, recon))
    return FidelityResult(users, np.array(r), np.array(t), np.array(s), depth)


def active_neuron_fraction(model: RecommenderModel, bundle: SaeBundle) -> float:
    """Mean share of bottleneck units that fire, over every user and item embedding."""
    z = np.concatenate([encode(bundle.user, model.user_embeddings), encode(bundle.item, model.item_embeddings)])
    return float(np.mean(z > 0))


def beta_sweep(
    dataset: InteractionDataset,
    model: RecommenderModel,
    beta_values: Sequence[float],
    base: SaeTrainConfig,
    seeds: Sequence[int] = (0,),
    n_users: int | None = None,
    depth: int = 30,
    p: float = 0.9,
    top_t: int = 30,
) -> list[dict]:
    """Train one SAE per (beta, seed) and tabulate fidelity and interpretability.

    Rows are ordered by beta then seed. When more than one seed is given each
    beta also gets an aggregate row with ``seed == "mean"``.
    """
    users = None
    if n_users is not None and n_users < model.n_users:
        users = np.sort(make_rng(base.seed).choice(model.n_users, size=n_users, replace=False))
    rows = []
    for beta in beta_values:
        per_seed = []
        for seed in seeds:
            cfg = replace(base, seed=seed, loss=replace(base.loss, beta=float(beta)))
            try:
                bundle, _ = train_sae(model, dataset, cfg)
            except Exception as exc:
                raise RuntimeError(f"SAE training failed at beta={beta}, seed={seed}: {exc}") from exc
            fid = evaluate_fidelity(model, bundle, users, depth, p)
            _, mono, _ = monosemanticity_from_activations(encode(bundle.item, model.item_embeddings), model.item_embeddings, top_t)
            row = {
                "beta": float(beta),
                "seed": seed,
                "rbo_mean": fid.rbo_mean,
                "rbo_std": fid.rbo_std,
                "tau_mean": fid.tau_mean,
                "tau_std": fid.tau_std,
                "monosemanticity": mono,
                "active_neuron_fraction": active_neuron_fraction(model, bundle),
            }
            log.info("beta %.3g seed %s rbo %.4f mono %.4f", beta, seed, row["rbo_mean"], mono)
            per_seed.append(row)
        rows.extend(per_seed)
        if len(per_seed) > 1:
            agg = {"beta": float(beta), "seed": "mean"}
            for col in SWEEP_COLUMNS[2:]:
                agg[col] = float(np.nanmean([r[col] for r in per_seed]))
            rows.append(agg)
    return rows


def sweep_csv(rows: Sequence[dict]) -> str:
    return rows_to_csv(rows, SWEEP_COLUMNS)
