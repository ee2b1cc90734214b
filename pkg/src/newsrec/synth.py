"""Synthetic clickstream and article corpus with learnable structure.

Users and items belong to taste clusters; a user mostly interacts with items
from their own cluster, with item popularity following a power law inside
each cluster. Interactions are realized as browsing sessions (click chains
whose gaps become dwell times, plus shares/comments), and each item gets an
article whose vocabulary is correlated with its cluster so the content
ranker has signal to learn.

The returned dataset of significant interactions is *derived* from the
generated events through the ingestion rules, so events and dataset can
never disagree.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .content import ArticleDocument
from .evaluation import Dataset
from .events import EventKind, InteractionEvent, SignificanceRule, SignificanceTracker

_HORIZON_SECONDS = 10 * 24 * 3600
_CLUSTER_VOCAB = 60
_COMMON_VOCAB = 120
_IN_CLUSTER_PROB = 0.90
_SESSION_LO = 3
_SESSION_HI = 7  # inclusive


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 2000
    n_items: int = 1000
    n_clusters: int = 4
    popularity_skew: float = 1.2
    actions_per_user: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if min(self.n_users, self.n_items, self.n_clusters) < 1:
            raise ValueError("user/item/cluster counts must be positive")
        if self.actions_per_user <= 0:
            raise ValueError("actions_per_user must be positive")
        if self.popularity_skew < 0:
            raise ValueError("popularity_skew must be >= 0 (0 = uniform)")


@dataclass
class SyntheticData:
    events: list[InteractionEvent]
    articles: list[ArticleDocument]
    dataset: Dataset


def _item_cluster(idx: int, n_clusters: int) -> int:
    return idx % n_clusters


def _cluster_weights(spec: SyntheticSpec) -> list[np.ndarray]:
    """Per-cluster sampling weights, power-law in within-cluster rank."""
    buckets: list[list[int]] = [[] for _ in range(spec.n_clusters)]
    for idx in range(spec.n_items):
        buckets[_item_cluster(idx, spec.n_clusters)].append(idx)
    weights = []
    for members in buckets:
        rank = np.arange(1, len(members) + 1, dtype=np.float64)
        w = rank ** (-spec.popularity_skew)
        weights.append(w / w.sum() if len(members) else w)
    return weights


def _sample_user_items(
    spec: SyntheticSpec,
    rng: np.random.Generator,
    cluster: int,
    buckets: list[np.ndarray],
    weights: list[np.ndarray],
) -> list[int]:
    m = max(1, int(rng.poisson(spec.actions_per_user)))
    picked: dict[int, None] = {}
    for _ in range(m):
        if spec.n_clusters > 1 and rng.random() >= _IN_CLUSTER_PROB:
            idx = int(rng.integers(spec.n_items))
        else:
            members = buckets[cluster]
            idx = int(members[rng.choice(len(members), p=weights[cluster])])
        picked[idx] = None
    return list(picked)


def generate_synthetic(
    spec: SyntheticSpec,
    session_bounds: tuple[int, int] | None = None,
) -> SyntheticData:
    """Generate events, articles, and the derived significant-action dataset.

    ``session_bounds`` controls browsing burstiness: how many items a user
    reads per sitting (inclusive range). Small sessions spread a user's
    actions across the stream; sessions larger than their whole history give
    single-burst users whose actions land in one contiguous stream slice.
    """
    lo, hi = session_bounds if session_bounds is not None else (_SESSION_LO, _SESSION_HI)
    if not 1 <= lo <= hi:
        raise ValueError("session_bounds must satisfy 1 <= lo <= hi")
    rng = np.random.default_rng(spec.seed)
    rule = SignificanceRule()
    buckets = [
        np.asarray([i for i in range(spec.n_items) if _item_cluster(i, spec.n_clusters) == c])
        for c in range(spec.n_clusters)
    ]
    weights = _cluster_weights(spec)

    item_ids = [f"a{idx:05d}" for idx in range(spec.n_items)]
    raw: list[tuple[int, int, InteractionEvent]] = []  # (timestamp, seq, event)
    seq = 0

    def emit(user: str, item: str, kind: EventKind, ts: float) -> None:
        nonlocal seq
        raw.append((int(ts), seq, InteractionEvent(user, item, kind, int(ts))))
        seq += 1

    for uidx in range(spec.n_users):
        user = f"u{uidx:05d}"
        cluster = uidx % spec.n_clusters
        items = _sample_user_items(spec, rng, cluster, buckets, weights)
        order = rng.permutation(len(items))
        items = [items[int(j)] for j in order]
        pos = 0
        while pos < len(items):
            size = int(rng.integers(lo, hi + 1))
            session = items[pos : pos + size]
            pos += size
            ts = float(rng.integers(0, _HORIZON_SECONDS))
            for si, idx in enumerate(session):
                emit(user, item_ids[idx], EventKind.CLICK, ts)
                if rng.random() < 0.10:
                    # short detour: a sub-threshold visit to a random item
                    noise = item_ids[int(rng.integers(spec.n_items))]
                    ts += float(rng.integers(1, 10))
                    emit(user, noise, EventKind.CLICK, ts)
                if si == len(session) - 1:
                    # last click gets no dwell; a share keeps it significant
                    kind = EventKind.SHARE if rng.random() < 0.5 else EventKind.COMMENT
                    emit(user, item_ids[idx], kind, ts + 1)
                else:
                    ts += float(rng.integers(15, 600))

    raw.sort(key=lambda t: (t[0], t[1]))
    events = [ev for _, _, ev in raw]

    tracker = SignificanceTracker(rule)
    order_pairs: list[tuple[str, str]] = []
    for ev in events:
        order_pairs.extend(tracker.feed(ev))
    tuples = [(u, i, tracker.aggregates[(u, i)]) for u, i in order_pairs]
    dataset = Dataset(tuples)

    articles = _make_articles(spec, item_ids, rng)
    return SyntheticData(events=events, articles=articles, dataset=dataset)


def _make_articles(
    spec: SyntheticSpec, item_ids: list[str], rng: np.random.Generator
) -> list[ArticleDocument]:
    common = [f"common{j}" for j in range(_COMMON_VOCAB)]
    cluster_vocab = [
        [f"c{c}w{j}" for j in range(_CLUSTER_VOCAB)] for c in range(spec.n_clusters)
    ]
    articles = []
    for idx, item_id in enumerate(item_ids):
        c = _item_cluster(idx, spec.n_clusters)
        vocab = cluster_vocab[c]
        title_words = [vocab[int(j)] for j in rng.integers(0, len(vocab), 3)]
        title_words.append(common[int(rng.integers(len(common)))])
        body_words = [vocab[int(j)] for j in rng.integers(0, len(vocab), 25)]
        body_words += [common[int(j)] for j in rng.integers(0, len(common), 15)]
        author = f"reporterc{c}a{int(rng.integers(5))}"
        articles.append(
            ArticleDocument(
                item_id=item_id,
                section=f"section{c}",
                author_text=author,
                title=" ".join(title_words),
                body=" ".join(body_words),
            )
        )
    return articles


def dataset_actions(dataset: Dataset) -> list[tuple[str, str]]:
    """The dataset's (user, item) pairs in stream order."""
    return [(u, i) for u, i, _ in dataset.tuples]
