"""Interaction ingestion, implicit-feedback dataset construction and negative sampling."""
from __future__ import annotations

import csv
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .mathops import make_rng

log = logging.getLogger(__name__)

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {"train": TRAIN, "val": VAL, "test": TEST}
DATASET_SCHEMA = "dataset/1"


class DataFormatError(ValueError):
    """Input file does not follow the expected layout."""


class ConfigError(ValueError):
    """Parameters are inconsistent with the data they are applied to."""


@dataclass(frozen=True)
class RawInteraction:
    user_id: str
    item_id: str
    value: float = 1.0
    timestamp: int | None = None

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise ValueError("user_id and item_id must be non-empty")
        if self.value < 0:
            raise ValueError(f"interaction value must be >= 0, got {self.value}")


@dataclass(frozen=True)
class ItemMeta:
    title: str = ""
    labels: frozenset[str] = frozenset()
    year: int | None = None


def _check_malformed(path: Path, n_lines: int, bad: list[int]) -> None:
    if not bad:
        return
    if len(bad) > 0.01 * n_lines:
        raise DataFormatError(
            f"{path}: {len(bad)} of {n_lines} lines malformed; first offending line is {bad[0]}"
        )
    log.warning("%s: skipped %d malformed lines (first at line %d)", path, len(bad), bad[0])


def load_movielens(path) -> list[RawInteraction]:
    """Parse a ``user::item::rating::timestamp`` ratings file.

    Every rated item becomes a positive, whatever the rating. Malformed
    lines are skipped with a warning unless they exceed 1% of the file.
    """
    path = Path(path)
    out: list[RawInteraction] = []
    bad: list[int] = []
    n_lines = 0
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            n_lines += 1
            parts = line.split("::")
            try:
                if len(parts) != 4:
                    raise ValueError
                user, item, rating, ts = parts
                out.append(RawInteraction(user.strip(), item.strip(), float(rating), int(ts)))
            except ValueError:
                bad.append(lineno)
    if n_lines == 0:
        log.warning("%s: no interactions found", path)
    _check_malformed(path, n_lines, bad)
    return out


def load_lastfm(path, user_col: int = 0, artist_col: int = 1, track_col: int | None = 2) -> list[RawInteraction]:
    """Aggregate tab-separated listening events to one interaction per (user, artist).

    ``value`` is the number of events for the pair. The track column is only
    checked for presence; it does not affect aggregation.
    """
    path = Path(path)
    counts: Counter[tuple[str, str]] = Counter()
    bad: list[int] = []
    n_lines = 0
    need = max(c for c in (user_col, artist_col, track_col) if c is not None) + 1
    with path.open(encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            n_lines += 1
            parts = line.split("\t")
            if len(parts) < need:
                bad.append(lineno)
                continue
            user, artist = parts[user_col].strip(), parts[artist_col].strip()
            if not user or not artist:
                bad.append(lineno)
                continue
            counts[(user, artist)] += 1
    if n_lines == 0:
        log.warning("%s: no events found", path)
    _check_malformed(path, n_lines, bad)
    return [RawInteraction(u, a, float(c)) for (u, a), c in counts.items()]


def load_metadata(path) -> dict[str, ItemMeta]:
    """Read the ``item_id<TAB>title<TAB>label|label<TAB>year`` sidecar."""
    path = Path(path)
    out: dict[str, ItemMeta] = {}
    with path.open(encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), start=1):
            if not row or not row[0].strip():
                continue
            if len(row) < 3:
                raise DataFormatError(f"{path}:{lineno}: expected at least 3 columns")
            labels = frozenset(s.strip() for s in row[2].split("|") if s.strip())
            year = None
            if len(row) > 3 and row[3].strip():
                try:
                    year = int(row[3])
                except ValueError as exc:
                    raise DataFormatError(f"{path}:{lineno}: bad year {row[3]!r}") from exc
            out[row[0].strip()] = ItemMeta(row[1], labels, year)
    return out


_TITLE_YEAR = re.compile(r"^(.*)\((\d{4})\)\s*$")


def load_movielens_movies(path, encoding: str = "latin-1") -> dict[str, ItemMeta]:
    """Read an ML-1M ``movies.dat`` (``id::Title (Year)::Genre|Genre``) as metadata."""
    out: dict[str, ItemMeta] = {}
    with Path(path).open(encoding=encoding) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != 3:
                raise DataFormatError(f"{path}:{lineno}: expected 3 '::'-separated fields")
            title, year = parts[1].strip(), None
            m = _TITLE_YEAR.match(title)
            if m:
                year = int(m.group(2))
            out[parts[0]] = ItemMeta(title, frozenset(g for g in parts[2].split("|") if g), year)
    return out


def _id_key(s: str):
    return (0, int(s), "") if s.isdigit() else (1, 0, s)


@dataclass
class InteractionDataset:
    """Deduplicated implicit positives with dense indices and a per-positive split tag.

    ``users``/``items``/``split`` are parallel arrays sorted by (user, item).
    Treat instances as immutable once built.
    """

    user_ids: list[str]
    item_ids: list[str]
    users: np.ndarray
    items: np.ndarray
    split: np.ndarray
    item_popularity: np.ndarray
    item_metadata: dict[int, ItemMeta] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def pairs(self, split: str | None = None) -> np.ndarray:
        """(n, 2) array of (user, item) positives, optionally for one split."""
        mask = slice(None) if split is None else self.split == SPLIT_NAMES[split]
        return np.stack([self.users[mask], self.items[mask]], axis=1)

    def items_by_user(self, splits: Iterable[str] = ("train",)) -> list[np.ndarray]:
        codes = [SPLIT_NAMES[s] for s in splits]
        mask = np.isin(self.split, codes)
        u, i = self.users[mask], self.items[mask]
        bounds = np.searchsorted(u, np.arange(self.n_users + 1))
        return [i[bounds[k]:bounds[k + 1]] for k in range(self.n_users)]

    def pair_keys(self, splits: Iterable[str] = ("train",)) -> np.ndarray:
        """Sorted ``user * n_items + item`` keys for fast membership tests."""
        mask = np.isin(self.split, [SPLIT_NAMES[s] for s in splits])
        return np.sort(self.users[mask].astype(np.int64) * self.n_items + self.items[mask])

    def users_with_split(self, split: str) -> np.ndarray:
        return np.unique(self.users[self.split == SPLIT_NAMES[split]])

    def split_sizes(self) -> dict[str, int]:
        return {name: int(np.sum(self.split == code)) for name, code in SPLIT_NAMES.items()}

    def items_with_label(self, label: str) -> np.ndarray:
        return np.array(
            sorted(i for i, m in self.item_metadata.items() if label in m.labels), dtype=np.int64
        )

    def labels(self) -> list[str]:
        return sorted({lab for m in self.item_metadata.values() for lab in m.labels})

    def raw_interactions(self) -> list[RawInteraction]:
        return [RawInteraction(self.user_ids[u], self.item_ids[i]) for u, i in zip(self.users, self.items)]

    def summary(self) -> dict:
        return {
            "n_users": self.n_users,
            "n_items": self.n_items,
            "n_positives": int(self.users.size),
            "splits": self.split_sizes(),
            "users_with_test": int(self.users_with_split("test").size),
        }

    def to_json(self) -> dict:
        meta = []
        for i in range(self.n_items):
            m = self.item_metadata.get(i)
            meta.append(None if m is None else {"title": m.title, "labels": sorted(m.labels), "year": m.year})
        return {
            "schema": DATASET_SCHEMA,
            "config": self.config,
            "user_ids": self.user_ids,
            "item_ids": self.item_ids,
            "positives": np.stack([self.users, self.items, self.split], axis=1).tolist(),
            "item_popularity": self.item_popularity.tolist(),
            "item_metadata": meta,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "InteractionDataset":
        if doc.get("schema") != DATASET_SCHEMA:
            raise DataFormatError(f"expected schema {DATASET_SCHEMA!r}, got {doc.get('schema')!r}")
        pos = np.asarray(doc["positives"], dtype=np.int64).reshape(-1, 3)
        meta = {
            i: ItemMeta(m["title"], frozenset(m["labels"]), m.get("year"))
            for i, m in enumerate(doc["item_metadata"])
            if m is not None
        }
        return cls(
            user_ids=list(doc["user_ids"]),
            item_ids=list(doc["item_ids"]),
            users=pos[:, 0].copy(),
            items=pos[:, 1].copy(),
            split=pos[:, 2].astype(np.int8),
            item_popularity=np.asarray(doc["item_popularity"], dtype=np.int64),
            item_metadata=meta,
            config=dict(doc.get("config", {})),
        )


def build_dataset(
    raw: Sequence[RawInteraction],
    min_user_positives: int = 6,
    seed: int = 0,
    n_test: int = 5,
    val_fraction: float = 0.05,
    metadata: dict[str, ItemMeta] | None = None,
) -> InteractionDataset:
    """Index, deduplicate and split raw interactions.

    Users with at least ``min_user_positives`` positives get exactly ``n_test``
    randomly chosen test positives; the rest keep everything in training.
    A ``val_fraction`` share of the remaining training positives is then moved
    to validation, never taking a user's last training positive.
    """
    if not raw:
        raise ConfigError("no interactions to build a dataset from")
    if min_user_positives <= n_test:
        raise ConfigError("min_user_positives must exceed the number of test positives")
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError("val_fraction must be in [0, 1)")

    user_ids = sorted({r.user_id for r in raw}, key=_id_key)
    item_ids = sorted({r.item_id for r in raw}, key=_id_key)
    uidx = {u: k for k, u in enumerate(user_ids)}
    iidx = {i: k for k, i in enumerate(item_ids)}
    keys = np.unique(np.array([uidx[r.user_id] * len(item_ids) + iidx[r.item_id] for r in raw], dtype=np.int64))
    users = keys // len(item_ids)
    items = keys % len(item_ids)
    popularity = np.bincount(items, minlength=len(item_ids)).astype(np.int64)

    rng = make_rng(seed)
    split = np.full(users.size, TRAIN, dtype=np.int8)
    bounds = np.searchsorted(users, np.arange(len(user_ids) + 1))
    eligible = 0
    for u in range(len(user_ids)):
        lo, hi = bounds[u], bounds[u + 1]
        if hi - lo >= min_user_positives:
            eligible += 1
            chosen = rng.choice(hi - lo, size=n_test, replace=False)
            split[lo + chosen] = TEST
    if eligible == 0:
        raise ConfigError(f"no user has at least {min_user_positives} positives; cannot hold out a test set")

    train_idx = np.flatnonzero(split == TRAIN)
    quota = int(round(val_fraction * train_idx.size))
    remaining = np.bincount(users[train_idx], minlength=len(user_ids))
    taken = 0
    for k in rng.permutation(train_idx):
        if taken >= quota:
            break
        if remaining[users[k]] > 1:
            split[k] = VAL
            remaining[users[k]] -= 1
            taken += 1

    item_meta = {}
    if metadata:
        item_meta = {iidx[i]: m for i, m in metadata.items() if i in iidx}
    config = {
        "min_user_positives": min_user_positives,
        "n_test": n_test,
        "val_fraction": val_fraction,
        "seed": seed,
    }
    return InteractionDataset(user_ids, item_ids, users, items, split, popularity, item_meta, config)


class NegativeSampler:
    """Draws items with probability proportional to popularity, skipping a user's training positives.

    Rejection against the global distribution is exact for the restricted
    distribution; users whose positives cover most of the popularity mass
    fall back to an explicit restricted draw.
    """

    def __init__(self, dataset: InteractionDataset, seed: int = 0, exclude_splits: Sequence[str] = ("train",)):
        pop = dataset.item_popularity.astype(np.float64)
        total = pop.sum()
        self.sampling_weights = pop / total if total > 0 else np.full(pop.size, 1.0 / pop.size)
        self.n_items = dataset.n_items
        self.rng_seed = seed
        self.rng = make_rng(seed)
        self._keys = dataset.pair_keys(exclude_splits)
        self._by_user = dataset.items_by_user(exclude_splits)
        self._cdf = np.cumsum(self.sampling_weights)
        self._cdf[-1] = 1.0

    def _excluded(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        keys = users.astype(np.int64) * self.n_items + items
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, max(self._keys.size - 1, 0))
        return (self._keys.size > 0) & (self._keys[pos] == keys)

    def _restricted_weights(self, user: int) -> np.ndarray:
        w = self.sampling_weights.copy()
        w[self._by_user[user]] = 0.0
        s = w.sum()
        if s <= 0:
            w = np.ones(self.n_items)
            w[self._by_user[user]] = 0.0
            s = w.sum()
        return w / s

    def eligible_count(self, user: int) -> int:
        return self.n_items - self._by_user[user].size

    def sample_for_users(self, users: np.ndarray, max_rounds: int = 20) -> np.ndarray:
        """One negative per entry of ``users`` (vectorised rejection sampling)."""
        users = np.asarray(users, dtype=np.int64)
        out = np.searchsorted(self._cdf, self.rng.random(users.size), side="right")
        bad = np.flatnonzero(self._excluded(users, out))
        rounds = 0
        while bad.size and rounds < max_rounds:
            out[bad] = np.searchsorted(self._cdf, self.rng.random(bad.size), side="right")
            bad = bad[self._excluded(users[bad], out[bad])]
            rounds += 1
        for k in bad:
            u = int(users[k])
            if self.eligible_count(u) == 0:
                raise ConfigError(f"user {u} has no eligible negative items")
            out[k] = self.rng.choice(self.n_items, p=self._restricted_weights(u))
        return out


def sample_negatives(sampler: NegativeSampler, user: int, k: int, replace: bool = True) -> list[int]:
    """Draw ``k`` negatives for ``user``.

    Draws are independent (with replacement) by default. With
    ``replace=False`` the items are distinct and ``k`` may not exceed the
    number of eligible items.
    """
    eligible = sampler.eligible_count(user)
    if eligible == 0 or (not replace and k > eligible):
        raise ConfigError(f"cannot draw {k} negatives for user {user}: only {eligible} eligible items")
    if replace:
        return sampler.sample_for_users(np.full(k, user)).tolist()
    w = sampler._restricted_weights(user)
    nonzero = int(np.count_nonzero(w))
    if nonzero < k:
        raise ConfigError(f"cannot draw {k} distinct negatives for user {user}: only {nonzero} have positive weight")
    return sampler.rng.choice(sampler.n_items, size=k, replace=False, p=w).tolist()
