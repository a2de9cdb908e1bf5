"""Sparse autoencoder over frozen recommender embeddings.

The SAE is ``z = relu(W e + b_enc)``, ``e~ = W^T z + b_dec`` with a single
stored weight matrix (tied decoder). Optional nested dictionary sizes make
it a Matryoshka SAE: level ``l`` reconstructs from the first
``nested_sizes[l-1]`` latents only, and the reconstruction losses are
averaged over levels.

Training minimises

    alpha * L_emb + beta * L_pred + lambda1 * l1 + lambda2 * KL

where ``L_pred`` compares affinities of original and reconstructed
user/item pairs through the frozen scorer, so its gradient is pushed back
through the recommender's scoring function into the SAE.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import InteractionDataset
from .mathops import DTYPE, AdamState, TrainingError, adam_step, as_float, make_rng
from .recommender import RecommenderModel, score_batch, score_batch_with_gradients

log = logging.getLogger(__name__)

SAE_SCHEMA = "sae/1"
KL_EPS = 1e-6
DEAD_THRESHOLD = 1e-6


def matryoshka_sizes(m: int, levels: int) -> tuple[int, ...]:
    """Evenly spaced nested sizes ``ceil(k m / levels)``, deduplicated, ending at m."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    sizes = sorted({math.ceil(k * m / levels) for k in range(1, levels + 1)})
    return tuple(s for s in sizes if s > 0)


@dataclass
class SaeModel:
    W: np.ndarray
    b_enc: np.ndarray
    b_dec: np.ndarray
    nested_sizes: tuple[int, ...] | None = None

    def __post_init__(self):
        m, d = self.W.shape
        if self.b_enc.shape != (m,) or self.b_dec.shape != (d,):
            raise ValueError("bias shapes do not match W")
        if self.nested_sizes is not None:
            sizes = tuple(int(s) for s in self.nested_sizes)
            if any(b <= a for a, b in zip(sizes, sizes[1:])) or sizes[-1] != m or sizes[0] < 1:
                raise ValueError(f"nested sizes must be strictly ascending and end at m={m}: {sizes}")
            self.nested_sizes = sizes

    @property
    def m(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    @property
    def decoder_weight(self) -> np.ndarray:
        return self.W.T

    @property
    def level_sizes(self) -> tuple[int, ...]:
        return self.nested_sizes if self.nested_sizes is not None else (self.m,)

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b_enc": self.b_enc, "b_dec": self.b_dec}

    def copy(self) -> "SaeModel":
        return SaeModel(self.W.copy(), self.b_enc.copy(), self.b_dec.copy(), self.nested_sizes)

    def to_json(self) -> dict:
        return {
            "m": self.m,
            "d": self.d,
            "W": self.W.tolist(),
            "b_enc": self.b_enc.tolist(),
            "b_dec": self.b_dec.tolist(),
            "nested_sizes": None if self.nested_sizes is None else list(self.nested_sizes),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SaeModel":
        nested = doc.get("nested_sizes")
        return cls(
            np.asarray(doc["W"], dtype=DTYPE).reshape(doc["m"], doc["d"]),
            np.asarray(doc["b_enc"], dtype=DTYPE),
            np.asarray(doc["b_dec"], dtype=DTYPE),
            None if nested is None else tuple(nested),
        )


def init_sae(d: int, m: int, rng: np.random.Generator, b_dec=None, nested_sizes=None) -> SaeModel:
    bound = 1.0 / math.sqrt(d)
    W = rng.uniform(-bound, bound, size=(m, d))
    b_dec = np.zeros(d) if b_dec is None else np.array(b_dec, dtype=DTYPE)
    return SaeModel(W, np.zeros(m), b_dec, nested_sizes)


def _level_size(sae: SaeModel, level: int | None) -> int:
    if level is None:
        return sae.m
    sizes = sae.level_sizes
    if not 1 <= level <= len(sizes):
        raise ValueError(f"level must be in 1..{len(sizes)}, got {level}")
    return sizes[level - 1]


def encode(sae: SaeModel, e) -> np.ndarray:
    """Latent code(s) for one embedding (d,) or a batch (n, d)."""
    e = as_float(e)
    if e.shape[-1] != sae.d:
        raise ValueError(f"expected embedding length {sae.d}, got {e.shape[-1]}")
    return np.maximum(e @ sae.W.T + sae.b_enc, 0.0)


def decode(sae: SaeModel, z, level: int | None = None) -> np.ndarray:
    """Reconstruction from the first ``nested_sizes[level-1]`` latents (all when level is None)."""
    z = as_float(z)
    if z.shape[-1] != sae.m:
        raise ValueError(f"expected latent length {sae.m}, got {z.shape[-1]}")
    k = _level_size(sae, level)
    return z[..., :k] @ sae.W[:k] + sae.b_dec


def reconstruct(sae: SaeModel, e, level: int | None = None) -> np.ndarray:
    return decode(sae, encode(sae, e), level)


@dataclass
class SaeBundle:
    """The SAE(s) applied to each tower; ``user is item`` in shared mode."""

    user: SaeModel
    item: SaeModel

    @property
    def shared(self) -> bool:
        return self.user is self.item

    def for_side(self, side: str) -> SaeModel:
        if side not in ("user", "item"):
            raise ValueError("side must be 'user' or 'item'")
        return self.user if side == "user" else self.item

    def params(self) -> dict[str, np.ndarray]:
        if self.shared:
            return self.user.params()
        return {
            **{f"user.{k}": v for k, v in self.user.params().items()},
            **{f"item.{k}": v for k, v in self.item.params().items()},
        }

    def copy(self) -> "SaeBundle":
        if self.shared:
            s = self.user.copy()
            return SaeBundle(s, s)
        return SaeBundle(self.user.copy(), self.item.copy())


# --- losses ------------------------------------------------------------------

@dataclass
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    lambda1: float = 1e-3
    lambda2: float = 1e-2
    rho: float = 0.05
    batch_size: int = 64
    pred_pairs_per_batch: int | None = None
    activation_stat: str = "soft"

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie strictly inside (0, 1)")
        for name in ("alpha", "beta", "lambda1", "lambda2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.activation_stat not in ("soft", "indicator"):
            raise ValueError("activation_stat must be 'soft' or 'indicator'")

    @property
    def n_pairs(self) -> int:
        return self.pred_pairs_per_batch or self.batch_size


def loss_emb(e, e_rec) -> float:
    """Squared Euclidean reconstruction error of one embedding."""
    diff = as_float(e) - as_float(e_rec)
    return diff @ diff


def loss_pred(model: RecommenderModel, pairs, sae_u: SaeModel, sae_i: SaeModel | None = None, level: int | None = None) -> float:
    """Mean squared gap between original and reconstructed affinities over ``pairs``."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        raise ValueError("need at least one user-item pair")
    sae_i = sae_u if sae_i is None else sae_i
    eu = model.user_embeddings[pairs[:, 0]]
    ei = model.item_embeddings[pairs[:, 1]]
    y = score_batch(model, eu, ei)
    y_rec = score_batch(model, reconstruct(sae_u, eu, level), reconstruct(sae_i, ei, level))
    return np.mean((y - y_rec) ** 2)


def activation_rates(z: np.ndarray, stat: str = "soft") -> np.ndarray:
    """Per-neuron rate p_j in [0, 1]: batch mean of min(z, 1), or of 1[z > 0]."""
    z = np.atleast_2d(z)
    a = np.minimum(z, 1.0) if stat == "soft" else (z > 0).astype(z.dtype)
    return a.mean(axis=0)


def kl_sparsity(p: np.ndarray, rho: float):
    pc = np.clip(p, KL_EPS, 1.0 - KL_EPS)
    return (np.sum(rho * np.log(rho / pc) + (1 - rho) * np.log((1 - rho) / (1 - pc))))


def loss_sparsity(z_batch, config: LossConfig) -> tuple[float, float]:
    """(mean per-row l1 norm, summed Bernoulli KL of activation rates against rho)."""
    z = np.atleast_2d(as_float(z_batch))
    l1 = np.abs(z).sum(axis=1).mean()
    return l1, kl_sparsity(activation_rates(z, config.activation_stat), config.rho)


@dataclass
class SaeBatch:
    user_emb: np.ndarray
    item_emb: np.ndarray
    pair_user_emb: np.ndarray
    pair_item_emb: np.ndarray
    y_orig: np.ndarray | None = None


@dataclass
class LossParts:
    total: float
    emb: float
    pred: float
    l1: float
    kl: float
    rates: np.ndarray = field(repr=False, default=None)


class _Grad:
    """Gradient accumulator for one SAE."""

    def __init__(self, sae: SaeModel):
        self.sae = sae
        self.W = np.zeros_like(sae.W)
        self.b_enc = np.zeros_like(sae.b_enc)
        self.b_dec = np.zeros_like(sae.b_dec)


class _Block:
    """One batch of embeddings passed through an SAE, with its pending latent gradient."""

    def __init__(self, acc: _Grad, x: np.ndarray):
        self.acc = acc
        self.x = x
        self.pre = x @ acc.sae.W.T + acc.sae.b_enc
        self.z = np.maximum(self.pre, 0.0)
        self.g_z = np.zeros_like(self.z)

    def decode(self, k: int) -> np.ndarray:
        s = self.acc.sae
        return self.z[:, :k] @ s.W[:k] + s.b_dec

    def back_decode(self, k: int, g_rec: np.ndarray) -> None:
        s, acc = self.acc.sae, self.acc
        acc.W[:k] += self.z[:, :k].T @ g_rec
        acc.b_dec += g_rec.sum(axis=0)
        self.g_z[:, :k] += g_rec @ s.W[:k].T

    def back_encode(self) -> None:
        g_pre = self.g_z * (self.pre > 0)
        self.acc.W += g_pre.T @ self.x
        self.acc.b_enc += g_pre.sum(axis=0)


def _sparsity_terms(blocks: list[_Block], cfg: LossConfig, want_grads: bool):
    z = np.concatenate([b.z for b in blocks], axis=0)
    n = z.shape[0]
    l1 = z.sum() / n
    p = activation_rates(z, cfg.activation_stat)
    kl = kl_sparsity(p, cfg.rho)
    if want_grads:
        g = np.full_like(z, cfg.lambda1 / n)
        if cfg.activation_stat == "soft" and cfg.lambda2:
            pc = np.clip(p, KL_EPS, 1.0 - KL_EPS)
            dkl = (-cfg.rho / pc + (1 - cfg.rho) / (1 - pc)) * ((p > KL_EPS) & (p < 1 - KL_EPS))
            g += cfg.lambda2 * (dkl / n)[None, :] * (z < 1.0)
        row = 0
        for b in blocks:
            b.g_z += g[row:row + b.z.shape[0]]
            row += b.z.shape[0]
    return l1, kl, p


def sae_objective(model: RecommenderModel, bundle: SaeBundle, batch: SaeBatch, cfg: LossConfig, want_grads: bool = True):
    """Total loss on one batch, its parts and (optionally) gradients for every SAE parameter.

    Gradients are returned in the layout of ``bundle.params()``. The
    recommender is only evaluated; nothing on it is written.
    """
    shared = bundle.shared
    gu = _Grad(bundle.user)
    gi = gu if shared else _Grad(bundle.item)
    bu, bi = _Block(gu, batch.user_emb), _Block(gi, batch.item_emb)
    pu, pi = _Block(gu, batch.pair_user_emb), _Block(gi, batch.pair_item_emb)
    sizes = bundle.user.level_sizes
    if bundle.item.level_sizes != sizes:
        raise ValueError("user and item SAEs must share nested sizes")
    n_levels = len(sizes)

    emb = 0.0
    for blk in (bu, bi):
        n = blk.x.shape[0]
        for k in sizes:
            diff = blk.decode(k) - blk.x
            emb = emb + np.sum(diff * diff) / (n * n_levels)
            if want_grads and cfg.alpha:
                blk.back_decode(k, cfg.alpha * 2.0 * diff / (n * n_levels))

    pred = 0.0
    n_pairs = pu.x.shape[0]
    if n_pairs:
        y = batch.y_orig if batch.y_orig is not None else score_batch(model, pu.x, pi.x)
        for k in sizes:
            y_rec, dyu, dyi = score_batch_with_gradients(model, pu.decode(k), pi.decode(k))
            r = y - y_rec
            pred = pred + np.mean(r * r) / n_levels
            if want_grads and cfg.beta:
                g_y = cfg.beta * (-2.0 * r) / (n_pairs * n_levels)
                pu.back_decode(k, g_y[:, None] * dyu)
                pi.back_decode(k, g_y[:, None] * dyi)

    if shared:
        l1, kl, rates = _sparsity_terms([bu, bi], cfg, want_grads)
    else:
        l1u, klu, ru = _sparsity_terms([bu], cfg, want_grads)
        l1i, kli, ri = _sparsity_terms([bi], cfg, want_grads)
        l1, kl, rates = l1u + l1i, klu + kli, np.concatenate([ru, ri])

    total = cfg.alpha * emb + cfg.beta * pred + cfg.lambda1 * l1 + cfg.lambda2 * kl
    parts = LossParts(total, emb, pred, l1, kl, rates)
    if not want_grads:
        return parts, None
    for blk in (bu, bi, pu, pi):
        blk.back_encode()
    if shared:
        grads = {"W": gu.W, "b_enc": gu.b_enc, "b_dec": gu.b_dec}
    else:
        grads = {
            "user.W": gu.W, "user.b_enc": gu.b_enc, "user.b_dec": gu.b_dec,
            "item.W": gi.W, "item.b_enc": gi.b_enc, "item.b_dec": gi.b_dec,
        }
    return parts, grads


def total_loss(model: RecommenderModel, bundle: SaeBundle, batch: SaeBatch, cfg: LossConfig) -> float:
    return sae_objective(model, bundle, batch, cfg, want_grads=False)[0].total


# --- training ----------------------------------------------------------------

@dataclass
class SaeTrainConfig:
    m: int = 22
    levels: int = 1
    nested_sizes: tuple[int, ...] | None = None
    shared: bool = True
    learning_rate: float = 1e-2
    epochs: int = 50
    steps_per_epoch: int | None = None
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def resolved_nested(self) -> tuple[int, ...] | None:
        if self.nested_sizes is not None:
            return tuple(self.nested_sizes)
        if self.levels > 1:
            return matryoshka_sizes(self.m, self.levels)
        return None

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["nested_sizes"] = None if self.nested_sizes is None else list(self.nested_sizes)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "SaeTrainConfig":
        doc = dict(doc)
        doc["loss"] = LossConfig(**doc.get("loss", {}))
        if doc.get("nested_sizes") is not None:
            doc["nested_sizes"] = tuple(doc["nested_sizes"])
        return cls(**doc)


@dataclass
class SaeTrainReport:
    epochs: list[dict] = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.epochs[-1] if self.epochs else {}


def _draw(rng: np.random.Generator, pool: np.ndarray, k: int) -> np.ndarray:
    return rng.choice(pool, size=k, replace=k > pool.size)


def train_sae(model: RecommenderModel, dataset: InteractionDataset, config: SaeTrainConfig):
    """Fit an SAE (or one per tower) on the frozen recommender's embeddings.

    Each step draws a batch of user rows, a batch of item rows and a sample
    of (training user, random item) pairs for the prediction-level loss,
    then takes one Adam step on the SAE parameters only.
    Returns ``(SaeBundle, SaeTrainReport)``.
    """
    if dataset.n_users != model.n_users or dataset.n_items != model.n_items:
        raise ValueError(
            f"recommender has {model.n_users} users / {model.n_items} items, dataset has "
            f"{dataset.n_users} / {dataset.n_items}"
        )
    cfg = config.loss
    fingerprint = model.fingerprint()
    rng = make_rng(config.seed)
    nested = config.resolved_nested()
    U, I = model.user_embeddings, model.item_embeddings
    if config.shared:
        sae = init_sae(model.d, config.m, rng, np.concatenate([U, I]).mean(axis=0), nested)
        bundle = SaeBundle(sae, sae)
    else:
        bundle = SaeBundle(
            init_sae(model.d, config.m, rng, U.mean(axis=0), nested),
            init_sae(model.d, config.m, rng, I.mean(axis=0), nested),
        )
    params = bundle.params()
    adam = AdamState(learning_rate=config.learning_rate)
    all_users = np.arange(model.n_users)
    all_items = np.arange(model.n_items)
    train_users = dataset.users_with_split("train")
    if train_users.size == 0:
        train_users = all_users
    B, S = cfg.batch_size, cfg.n_pairs
    steps = config.steps_per_epoch or max(1, -(-max(model.n_users, model.n_items) // B))
    report = SaeTrainReport()

    for epoch in range(config.epochs):
        sums = np.zeros(5)
        rate_sum = 0.0
        for step in range(steps):
            pu = _draw(rng, train_users, S)
            pi = rng.integers(0, model.n_items, size=S)
            batch = SaeBatch(U[_draw(rng, all_users, B)], I[_draw(rng, all_items, B)], U[pu], I[pi])
            parts, grads = sae_objective(model, bundle, batch, cfg)
            if not np.isfinite(parts.total):
                raise TrainingError(f"non-finite SAE loss at epoch {epoch}, step {step}")
            adam_step(params, grads, adam)
            sums += (parts.total, parts.emb, parts.pred, parts.l1, parts.kl)
            rate_sum = rate_sum + parts.rates
        rates = rate_sum / steps
        mean = sums / steps
        report.epochs.append({
            "epoch": epoch,
            "total": float(mean[0]),
            "emb": float(mean[1]),
            "pred": float(mean[2]),
            "l1": float(mean[3]),
            "kl": float(mean[4]),
            "activation_rates": rates.tolist(),
            "dead_fraction": float(np.mean(rates < DEAD_THRESHOLD)),
        })
        log.debug("sae epoch %d total %.5f emb %.5f pred %.6f", epoch, *mean[:3])

    if model.fingerprint() != fingerprint:
        raise TrainingError("recommender parameters changed during SAE training")
    return bundle, report


# --- checkpoints -------------------------------------------------------------

def bundle_to_json(bundle: SaeBundle, config: SaeTrainConfig, recommender_fingerprint: str) -> dict:
    saes = {"shared": bundle.user.to_json()} if bundle.shared else {
        "user": bundle.user.to_json(), "item": bundle.item.to_json()}
    return {
        "schema": SAE_SCHEMA,
        "shared": bundle.shared,
        "saes": saes,
        "train_config": config.to_json(),
        "loss_config": asdict(config.loss),
        "seed": config.seed,
        "recommender_fingerprint": recommender_fingerprint,
    }


def bundle_from_json(doc: dict) -> tuple[SaeBundle, SaeTrainConfig, str]:
    if doc.get("schema") != SAE_SCHEMA:
        raise ValueError(f"expected schema {SAE_SCHEMA!r}, got {doc.get('schema')!r}")
    if doc["shared"]:
        s = SaeModel.from_json(doc["saes"]["shared"])
        bundle = SaeBundle(s, s)
    else:
        bundle = SaeBundle(SaeModel.from_json(doc["saes"]["user"]), SaeModel.from_json(doc["saes"]["item"]))
    return bundle, SaeTrainConfig.from_json(doc["train_config"]), doc["recommender_fingerprint"]
