"""Offline evaluation: baselines, precision@10, and sweep experiments.

The protocol: split the significant-interaction tuples 80/20, train on the
80%, and for each user with held-out interactions count how many of their
top ten recommendations (drawn from training items, their own training items
excluded) appear in the test set. Scores average over evaluated users.

Users who appear only in the test split have no model; they are scored with
the configured fallback recommender and counted in the report rather than
silently dropped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from . import als
from .events import UserItemAggregate
from .trainer import ModelState, TrainerConfig, run_stream

_logger = logging.getLogger(__name__)


@dataclass
class Dataset:
    """Significant (user, item, aggregate) tuples, unique per (user, item)."""

    tuples: list[tuple[str, str, UserItemAggregate]]

    def __post_init__(self):
        seen = set()
        for u, i, _ in self.tuples:
            if (u, i) in seen:
                raise ValueError(f"duplicate dataset tuple ({u!r}, {i!r})")
            seen.add((u, i))

    def __len__(self) -> int:
        return len(self.tuples)

    def items(self) -> set[str]:
        return {i for _, i, _ in self.tuples}

    def by_user(self) -> dict[str, set[str]]:
        out: dict[str, set[str]] = {}
        for u, i, _ in self.tuples:
            out.setdefault(u, set()).add(i)
        return out

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "Dataset":
        """Build a dataset from bare pairs (share-backed aggregates)."""
        return cls([(u, i, UserItemAggregate(u, i, shares=1)) for u, i in pairs])


@dataclass
class EvalReport:
    system: str
    precision_at_10: float
    users_evaluated: int
    fallback_users: int = 0
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.precision_at_10 <= 1.0:
            raise ValueError("precision must lie in [0, 1]")
        if self.users_evaluated <= 0:
            raise ValueError("users_evaluated must be positive")


def split(
    data: Dataset, train_fraction: float = 0.8, seed: int = 0
) -> tuple[Dataset, Dataset]:
    """Seeded uniform partition; train gets floor(fraction * n) tuples.

    Both halves keep the input's relative tuple order, so the training half
    remains a valid stream for the incremental trainer.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    n = len(data.tuples)
    rng = np.random.default_rng(seed)
    picks = rng.permutation(n)[: int(train_fraction * n)]
    mask = np.zeros(n, dtype=bool)
    mask[picks] = True
    train = Dataset([t for j, t in enumerate(data.tuples) if mask[j]])
    test = Dataset([t for j, t in enumerate(data.tuples) if not mask[j]])
    return train, test


def global_top(train: Dataset, n: int) -> list[tuple[str, float]]:
    """Items ranked by how many users interacted with them, ties by id."""
    counts: dict[str, int] = {}
    for _, i, _ in train.tuples:
        counts[i] = counts.get(i, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [(i, float(c)) for i, c in ranked[:n]]


def random_rank(train: Dataset, n: int, seed: int) -> list[tuple[str, float]]:
    """A seeded uniform shuffle of the training catalog, truncated to n."""
    catalog = sorted(train.items())
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(catalog))
    return [(catalog[int(j)], 0.0) for j in order[:n]]


class ColdUserError(KeyError):
    """The recommender has no model for this user."""


class Recommender(Protocol):
    name: str

    def recommend(self, user_id: str, exclude: set[str], n: int) -> list[str]: ...


class GlobalTopRecommender:
    name = "global_top"

    def __init__(self, train: Dataset):
        self._ranked = [i for i, _ in global_top(train, len(train.items()))]

    def recommend(self, user_id: str, exclude: set[str], n: int) -> list[str]:
        return [i for i in self._ranked if i not in exclude][:n]


class RandomRecommender:
    """Independent uniform ranking per evaluated user."""

    name = "random"

    def __init__(self, train: Dataset, seed: int):
        self._catalog = sorted(train.items())
        self._rng = np.random.default_rng(seed)

    def recommend(self, user_id: str, exclude: set[str], n: int) -> list[str]:
        order = self._rng.permutation(len(self._catalog))
        out = []
        for j in order:
            item = self._catalog[int(j)]
            if item not in exclude:
                out.append(item)
                if len(out) == n:
                    break
        return out


class CollaborativeRecommender:
    """Scores x_u . y_i over the training catalog, lexicographic tie-break."""

    name = "collaborative"

    def __init__(self, user_vectors: dict[str, np.ndarray], item_vectors: dict[str, np.ndarray]):
        self._users = user_vectors
        self._item_ids = sorted(item_vectors)
        self._Y = (
            np.stack([item_vectors[i] for i in self._item_ids])
            if self._item_ids
            else np.zeros((0, 1))
        )

    @classmethod
    def from_state(cls, state: ModelState) -> "CollaborativeRecommender":
        return cls(state.users, state.items)

    @classmethod
    def from_factors(
        cls, F: als.FactorMatrices, user_ids: Sequence[str], item_ids: Sequence[str]
    ) -> "CollaborativeRecommender":
        users = {u: F.X[r] for r, u in enumerate(user_ids)}
        items = {i: F.Y[c] for c, i in enumerate(item_ids)}
        return cls(users, items)

    def recommend(self, user_id: str, exclude: set[str], n: int) -> list[str]:
        vec = self._users.get(user_id)
        if vec is None:
            raise ColdUserError(user_id)
        excl = {j for j, i in enumerate(self._item_ids) if i in exclude}
        top = als.recommend_collaborative(vec, self._Y, excl, n)
        return [self._item_ids[j] for j, _ in top]


def precision_at_10(
    recommender: Recommender,
    train: Dataset,
    test: Dataset,
    *,
    n: int = 10,
    fallback: Recommender | None = None,
    normalize_by_produced: bool = False,
    config: dict | None = None,
) -> EvalReport:
    """Mean precision@n over users with held-out interactions.

    Each user's score divides hits by ``n`` (the paper's reading) unless
    ``normalize_by_produced`` is set, in which case it divides by the number
    of recommendations actually produced. Users the recommender cannot serve
    fall back to ``fallback`` and are counted in the report.
    """
    train_items = train.by_user()
    test_items = test.by_user()
    if not test_items:
        raise ValueError("no users to evaluate: test split is empty")

    total = 0.0
    fallback_users = 0
    for user in sorted(test_items):
        exclude = train_items.get(user, set())
        try:
            recs = recommender.recommend(user, exclude, n)
        except ColdUserError:
            if fallback is None:
                raise
            fallback_users += 1
            recs = fallback.recommend(user, exclude, n)
        recs = recs[:n]
        hits = sum(1 for i in recs if i in test_items[user])
        denom = max(len(recs), 1) if normalize_by_produced else n
        total += hits / denom

    return EvalReport(
        system=recommender.name,
        precision_at_10=total / len(test_items),
        users_evaluated=len(test_items),
        fallback_users=fallback_users,
        config=dict(config or {}),
    )


def train_incremental(
    train: Dataset, cfg: TrainerConfig
) -> ModelState:
    """Run the incremental trainer over the training stream."""
    state = ModelState(cfg.als)
    actions = [(u, i) for u, i, _ in train.tuples]
    run_stream(actions, state, cfg)
    return state


def train_direct(
    train: Dataset, params: als.AlsParams
) -> CollaborativeRecommender:
    """Train the underlying factorization on the full matrix in one shot.

    Users and items are indexed in stream first-appearance order and
    initialized exactly like an incremental run that sees the whole stream
    as a single batch, making the two paths bit-comparable.
    """
    user_ids: dict[str, int] = {}
    item_ids: dict[str, int] = {}
    rows, cols = [], []
    for u, i, _ in train.tuples:
        rows.append(user_ids.setdefault(u, len(user_ids)))
        cols.append(item_ids.setdefault(i, len(item_ids)))
    R = als.SparseRatings(
        len(user_ids),
        len(item_ids),
        rows=np.asarray(rows, dtype=np.int64),
        cols=np.asarray(cols, dtype=np.int64),
        vals=np.ones(len(rows)),
    )
    F0 = als.init_factors(len(user_ids), len(item_ids), params)
    F = als.latent_factor_update(R, F0, params)
    return CollaborativeRecommender.from_factors(F, list(user_ids), list(item_ids))


@dataclass
class SweepRow:
    x: int  # batch size, or parallelism level
    precision_at_10: float
    users_evaluated: int
    reference: bool = False


def _evaluate_state(
    state: ModelState, train: Dataset, test: Dataset, config: dict
) -> EvalReport:
    rec = CollaborativeRecommender.from_state(state)
    return precision_at_10(
        rec, train, test, fallback=GlobalTopRecommender(train), config=config
    )


def sweep_batch_size(
    data: Dataset,
    sizes: Sequence[int],
    cfg: TrainerConfig,
    seed: int,
    train_fraction: float = 0.8,
) -> list[SweepRow]:
    """Precision@10 per batch size, plus the single-shot reference row.

    The reference trains the underlying factorization directly on the full
    training matrix (equivalent to a single all-data batch) and is appended
    with the training-set size as its x value.
    """
    rows: list[SweepRow] = []
    if not sizes and data is None:
        return rows
    train, test = split(data, train_fraction, seed)
    for size in sizes:
        run_cfg = TrainerConfig(
            batch_size=size,
            min_batch_users=cfg.min_batch_users,
            parallelism=cfg.parallelism,
            als=cfg.als,
        )
        state = train_incremental(train, run_cfg)
        report = _evaluate_state(state, train, test, {"batch_size": size, "seed": seed})
        rows.append(SweepRow(size, report.precision_at_10, report.users_evaluated))
        _logger.info("batch size %d: precision@10 %.4f", size, report.precision_at_10)

    if sizes:
        direct = train_direct(train, cfg.als)
        report = precision_at_10(
            direct,
            train,
            test,
            fallback=GlobalTopRecommender(train),
            config={"reference": True, "seed": seed},
        )
        rows.append(
            SweepRow(len(train.tuples), report.precision_at_10, report.users_evaluated, True)
        )
    return rows


def sweep_parallelism(
    data: Dataset,
    levels: Sequence[int],
    batch_size: int,
    cfg: TrainerConfig,
    seed: int,
    train_fraction: float = 0.8,
) -> list[SweepRow]:
    """Precision@10 per parallelism level at a fixed batch size."""
    rows: list[SweepRow] = []
    if not levels:
        return rows
    train, test = split(data, train_fraction, seed)
    for level in levels:
        run_cfg = TrainerConfig(
            batch_size=batch_size,
            min_batch_users=cfg.min_batch_users,
            parallelism=level,
            als=cfg.als,
        )
        state = train_incremental(train, run_cfg)
        report = _evaluate_state(
            state, train, test, {"parallelism": level, "batch_size": batch_size, "seed": seed}
        )
        rows.append(SweepRow(level, report.precision_at_10, report.users_evaluated))
        _logger.info("parallelism %d: precision@10 %.4f", level, report.precision_at_10)
    return rows
