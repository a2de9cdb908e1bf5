"""Two-tower recommenders (MF and NCF) on implicit feedback.

Both towers are plain embedding lookups. MF scores with
``sigmoid(e_u . e_i)``; NCF feeds ``[e_u ; e_i]`` through a ReLU MLP and a
sigmoid output. All gradients are written out by hand.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .artifacts import array_digest
from .data import InteractionDataset, NegativeSampler
from .mathops import DTYPE, AdamState, TrainingError, adam_step, as_float, make_rng, sigmoid

log = logging.getLogger(__name__)

MODEL_SCHEMA = "recmodel/1"
DEFAULT_HIDDEN = (64, 32, 16)


@dataclass
class RecommenderModel:
    """Embedding tables plus, for NCF, the scorer MLP.

    ``layers`` holds ``(weight, bias)`` pairs with weights shaped
    ``(out, in)``; the last pair is the linear output unit.
    """

    kind: str
    user_embeddings: np.ndarray
    item_embeddings: np.ndarray
    layers: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("MF", "NCF"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.user_embeddings.shape[1] != self.item_embeddings.shape[1]:
            raise ValueError("user and item towers must share the embedding dimension")
        if self.kind == "MF" and self.layers:
            raise ValueError("MF has no scorer parameters")

    @property
    def d(self) -> int:
        return self.user_embeddings.shape[1]

    @property
    def n_users(self) -> int:
        return self.user_embeddings.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_embeddings.shape[0]

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(w.shape[0] for w, _ in self.layers[:-1])

    def params(self) -> dict[str, np.ndarray]:
        """Live references to every parameter block, keyed by name."""
        p = {"user_embeddings": self.user_embeddings, "item_embeddings": self.item_embeddings}
        for k, (w, b) in enumerate(self.layers):
            p[f"layer{k}.weight"] = w
            p[f"layer{k}.bias"] = b
        return p

    def fingerprint(self) -> str:
        return array_digest(self.params())

    def copy(self) -> "RecommenderModel":
        return RecommenderModel(
            self.kind,
            self.user_embeddings.copy(),
            self.item_embeddings.copy(),
            [(w.copy(), b.copy()) for w, b in self.layers],
        )

    def to_json(self) -> dict:
        return {
            "schema": MODEL_SCHEMA,
            "kind": self.kind,
            "d": self.d,
            "hidden": list(self.hidden),
            "user_embeddings": self.user_embeddings.tolist(),
            "item_embeddings": self.item_embeddings.tolist(),
            "layers": [{"weight": w.tolist(), "bias": b.tolist()} for w, b in self.layers],
            "fingerprint": self.fingerprint(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RecommenderModel":
        if doc.get("schema") != MODEL_SCHEMA:
            raise ValueError(f"expected schema {MODEL_SCHEMA!r}, got {doc.get('schema')!r}")
        d = int(doc["d"])
        model = cls(
            doc["kind"],
            np.asarray(doc["user_embeddings"], dtype=DTYPE).reshape(-1, d),
            np.asarray(doc["item_embeddings"], dtype=DTYPE).reshape(-1, d),
            [(np.asarray(l["weight"], dtype=DTYPE), np.asarray(l["bias"], dtype=DTYPE)) for l in doc["layers"]],
        )
        if "fingerprint" in doc and doc["fingerprint"] != model.fingerprint():
            raise ValueError("checkpoint fingerprint does not match its parameters")
        return model


def init_model(kind: str, n_users: int, n_items: int, d: int, seed: int = 0, hidden=DEFAULT_HIDDEN, init_scale: float = 0.05) -> RecommenderModel:
    rng = make_rng(seed)
    users = rng.uniform(-init_scale, init_scale, size=(n_users, d))
    items = rng.uniform(-init_scale, init_scale, size=(n_items, d))
    layers = []
    if kind == "NCF":
        widths = [2 * d, *hidden, 1]
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            layers.append((rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return RecommenderModel(kind, users, items, layers)


# --- scoring -----------------------------------------------------------------

def _logits(model: RecommenderModel, eu: np.ndarray, ei: np.ndarray, keep_cache: bool = False):
    """Pre-sigmoid scores for row-aligned (n, d) user/item arrays."""
    if eu.shape[-1] != model.d or ei.shape[-1] != model.d:
        raise ValueError(f"embedding length must be {model.d}, got {eu.shape[-1]} and {ei.shape[-1]}")
    if model.kind == "MF":
        out = np.einsum("nd,nd->n", eu, ei)
        return (out, None) if keep_cache else out
    h = np.concatenate([eu, ei], axis=1)
    cache = [h]
    for w, b in model.layers[:-1]:
        a = h @ w.T + b
        cache.append(a)
        h = np.maximum(a, 0.0)
    w, b = model.layers[-1]
    out = (h @ w.T + b)[:, 0]
    return (out, cache) if keep_cache else out


def _logit_backward(model: RecommenderModel, eu, ei, cache, g_out: np.ndarray, want_params: bool = False):
    """Backpropagate ``g_out`` = dL/dlogit (n,) to both embeddings (and scorer weights)."""
    if model.kind == "MF":
        return g_out[:, None] * ei, g_out[:, None] * eu, []
    d = model.d
    grads = [None] * len(model.layers)
    w_out, _ = model.layers[-1]
    h_last = np.maximum(cache[-1], 0.0) if len(cache) > 1 else cache[0]
    if want_params:
        grads[-1] = (g_out[None, :] @ h_last, np.array([g_out.sum()]))
    g = g_out[:, None] * w_out  # (n, last hidden)
    for k in range(len(model.layers) - 2, -1, -1):
        a = cache[k + 1]
        g_a = g * (a > 0)
        if want_params:
            h_prev = cache[0] if k == 0 else np.maximum(cache[k], 0.0)
            grads[k] = (g_a.T @ h_prev, g_a.sum(axis=0))
        g = g_a @ model.layers[k][0]
    return g[:, :d], g[:, d:], grads


def score_batch(model: RecommenderModel, eu: np.ndarray, ei: np.ndarray) -> np.ndarray:
    eu = np.atleast_2d(as_float(eu))
    ei = np.atleast_2d(as_float(ei))
    return sigmoid(_logits(model, eu, ei))


def score(model: RecommenderModel, e_u, e_i) -> float:
    """Affinity in (0, 1) for a single user/item embedding pair."""
    return float(score_batch(model, e_u, e_i)[0])


@dataclass
class ScoreGradients:
    d_score_d_user_embedding: np.ndarray
    d_score_d_item_embedding: np.ndarray


def score_batch_with_gradients(model: RecommenderModel, eu, ei):
    """Affinities and d(affinity)/d(embeddings) for row-aligned batches.

    The model is read only; no parameter gradients are produced.
    """
    eu = np.atleast_2d(as_float(eu))
    ei = np.atleast_2d(as_float(ei))
    logit, cache = _logits(model, eu, ei, keep_cache=True)
    y = sigmoid(logit)
    gu, gi, _ = _logit_backward(model, eu, ei, cache, y * (1.0 - y))
    return y, gu, gi


def score_with_gradients(model: RecommenderModel, e_u, e_i) -> tuple[float, ScoreGradients]:
    y, gu, gi = score_batch_with_gradients(model, e_u, e_i)
    return float(y[0]), ScoreGradients(gu[0], gi[0])


def score_items(model: RecommenderModel, e_u: np.ndarray, item_embeddings: np.ndarray) -> np.ndarray:
    """Scores of one user embedding against every row of ``item_embeddings``."""
    e_u = as_float(e_u)
    if model.kind == "MF":
        if e_u.shape[-1] != model.d or item_embeddings.shape[1] != model.d:
            raise ValueError("embedding dimension mismatch")
        return sigmoid(item_embeddings @ e_u)
    return score_batch(model, np.broadcast_to(e_u, item_embeddings.shape), item_embeddings)


def rank_order(scores: np.ndarray) -> np.ndarray:
    """Indices sorted by score descending, ties by ascending index."""
    return np.argsort(-np.asarray(scores), kind="stable")


def top_n(model: RecommenderModel, user: int, n: int, exclude_train: bool = False, dataset: InteractionDataset | None = None) -> list[int]:
    scores = score_items(model, model.user_embeddings[user], model.item_embeddings)
    order = rank_order(scores)
    if exclude_train:
        if dataset is None:
            raise ValueError("exclude_train needs the dataset")
        seen = set(dataset.items_by_user(("train",))[user].tolist())
        order = np.array([i for i in order if i not in seen], dtype=np.int64)
    if n > order.size:
        raise ValueError(f"asked for top {n} but only {order.size} items are eligible")
    return order[:n].tolist()


# --- evaluation --------------------------------------------------------------

def percentile_rank(scores: np.ndarray, target: int, eligible: np.ndarray) -> float:
    """Position of ``target`` among ``eligible`` items, 0 = first, ties at their midpoint."""
    s = scores[eligible]
    t = scores[target]
    if eligible.size <= 1:
        return 0.0
    higher = np.count_nonzero(s > t)
    ties = np.count_nonzero(s == t) - 1
    return (higher + 0.5 * ties) / (eligible.size - 1)


def mpr(model: RecommenderModel, dataset: InteractionDataset, split: str = "val") -> float:
    """Mean percentile rank of held-out positives; lower is better.

    Candidates for a user are all items outside the positives the model was
    fit on: the train split for ``val``, train and val for ``test``.
    """
    if split not in ("val", "test"):
        raise ValueError("split must be 'val' or 'test'")
    held = dataset.pairs(split)
    if held.size == 0:
        raise ValueError(f"split {split!r} is empty")
    excluded = dataset.items_by_user(("train",) if split == "val" else ("train", "val"))
    all_items = np.arange(dataset.n_items)
    total = 0.0
    for u in np.unique(held[:, 0]):
        scores = score_items(model, model.user_embeddings[u], model.item_embeddings)
        mask = np.ones(dataset.n_items, dtype=bool)
        mask[excluded[u]] = False
        eligible = all_items[mask]
        for i in held[held[:, 0] == u, 1]:
            total += percentile_rank(scores, i, eligible)
    return total / held.shape[0]


# --- training ----------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 256
    epochs: int = 10
    negatives_per_positive: int = 4
    seed: int = 0
    d: int = 20
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    patience: int = 2
    init_scale: float = 0.05

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        for name in ("batch_size", "negatives_per_positive", "d"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        self.hidden = tuple(self.hidden)


def bce_loss_and_grads(model: RecommenderModel, users: np.ndarray, items: np.ndarray, labels: np.ndarray):
    """Mean binary cross-entropy over a batch and its gradient for every block."""
    eu = model.user_embeddings[users]
    ei = model.item_embeddings[items]
    logit, cache = _logits(model, eu, ei, keep_cache=True)
    # log(1 + exp(x)) - y x, computed stably
    loss = np.mean(np.logaddexp(0.0, logit) - labels * logit)
    g_out = (sigmoid(logit) - labels) / users.size
    gu, gi, layer_grads = _logit_backward(model, eu, ei, cache, g_out, want_params=True)
    grads = {
        "user_embeddings": np.zeros_like(model.user_embeddings),
        "item_embeddings": np.zeros_like(model.item_embeddings),
    }
    np.add.at(grads["user_embeddings"], users, gu)
    np.add.at(grads["item_embeddings"], items, gi)
    for k, (gw, gb) in enumerate(layer_grads):
        grads[f"layer{k}.weight"] = gw
        grads[f"layer{k}.bias"] = gb
    return float(loss), grads


def train_recommender(dataset: InteractionDataset, config: TrainConfig, kind: str = "MF"):
    """Fit a recommender with BCE on positives plus popularity-sampled negatives.

    Negatives are redrawn every epoch. When a validation split exists the
    best-MPR epoch is returned and training stops after ``config.patience``
    epochs without improvement. Returns ``(model, log)``.
    """
    train = dataset.pairs("train")
    if train.size == 0:
        raise ValueError("dataset has no training positives")
    model = init_model(kind, dataset.n_users, dataset.n_items, config.d, config.seed, config.hidden, config.init_scale)
    rng = make_rng(config.seed + 1)
    sampler = NegativeSampler(dataset, seed=config.seed + 2)
    adam = AdamState(learning_rate=config.learning_rate)
    params = model.params()
    has_val = bool(np.any(dataset.split == 1))
    history: list[dict] = []
    best, best_mpr, stale = model.copy(), np.inf, 0
    k = config.negatives_per_positive

    for epoch in range(config.epochs):
        order = rng.permutation(train.shape[0])
        pos = train[order]
        negs = sampler.sample_for_users(np.repeat(pos[:, 0], k)).reshape(-1, k)
        losses = []
        for b, start in enumerate(range(0, pos.shape[0], config.batch_size)):
            chunk = pos[start:start + config.batch_size]
            neg = negs[start:start + config.batch_size]
            users = np.concatenate([chunk[:, 0], np.repeat(chunk[:, 0], k)])
            items = np.concatenate([chunk[:, 1], neg.ravel()])
            labels = np.concatenate([np.ones(chunk.shape[0]), np.zeros(neg.size)])
            loss, grads = bce_loss_and_grads(model, users, items, labels)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            adam_step(params, grads, adam)
            losses.append(loss)
        entry = {"epoch": epoch, "loss": float(np.mean(losses))}
        if has_val:
            entry["val_mpr"] = mpr(model, dataset, "val")
            if entry["val_mpr"] < best_mpr:
                best, best_mpr, stale = model.copy(), entry["val_mpr"], 0
            else:
                stale += 1
        else:
            best = model.copy()
        history.append(entry)
        log.info("epoch %d loss %.5f val_mpr %s", epoch, entry["loss"], entry.get("val_mpr"))
        if has_val and stale >= config.patience:
            break
    return best, history
