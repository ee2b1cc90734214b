"""Single-process serving runtime: ingestion, training, caching, serving.

The four layers live in one process: HTTP endpoints gather events and
articles, a background trainer thread folds significant actions into the
factorization in batches (flushed by size or by a timer so quiet periods
still train), the store persists everything durably, and recommendation
handlers read models through short-lived caches so serving never blocks on
training.

Delivery to the trainer is at-least-once: events are durably logged before
being queued, training progress is checkpointed per batch, and on restart
any significant actions past the last checkpoint are re-derived from the
event log and re-queued. Application is idempotent because ratings are sets.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Request
from pydantic import BaseModel, Field, field_validator

from . import als, content, trainer
from .content import ArticleDocument, ContentModel, RankerConfig
from .events import (
    EventKind,
    InteractionEvent,
    OrderingError,
    SignificanceRule,
    SignificanceTracker,
    format_event_line,
    parse_event_line,
)
from .store import Namespace, Store
from .trainer import ModelState, TrainerConfig

_logger = logging.getLogger(__name__)

Algorithm = Literal["collab", "content", "top"]


@dataclass
class EngineConfig:
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    ranker: RankerConfig = field(default_factory=RankerConfig)
    rule: SignificanceRule = field(default_factory=SignificanceRule)
    flush_interval: float = 60.0
    model_ttl: float = 5.0
    top_ttl: float = 30.0
    queue_capacity: int = 100_000
    train_content_models: bool = True


class BackPressureError(RuntimeError):
    """The training queue is full; the caller should retry later."""


class _TtlCache:
    """Loaded-at timestamped cache; entries older than the TTL are misses."""

    def __init__(self, ttl: float):
        self.ttl = ttl
        self._data: dict[str, tuple[float, object]] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, key: str, loader):
        now = time.monotonic()
        with self._lock:
            entry = self._data.get(key)
            if entry is not None and now - entry[0] < self.ttl:
                self.hits += 1
                return entry[1]
            self.misses += 1
        value = loader()
        with self._lock:
            self._data[key] = (time.monotonic(), value)
        return value

    def invalidate_all(self) -> None:
        with self._lock:
            self._data.clear()


class _Latencies:
    """Bounded reservoir of recent latencies with on-demand quantiles."""

    def __init__(self, cap: int = 8192):
        self._cap = cap
        self._values: list[float] = []
        self._lock = threading.Lock()
        self.count = 0

    def record(self, seconds: float) -> None:
        with self._lock:
            self.count += 1
            self._values.append(seconds)
            if len(self._values) > self._cap:
                self._values = self._values[-self._cap :]

    def snapshot(self) -> dict:
        with self._lock:
            vals = list(self._values)
            count = self.count
        out = {"count": count, "p50_ms": 0.0, "p95_ms": 0.0, "p99_ms": 0.0}
        if vals:
            arr = np.asarray(vals) * 1000.0
            out["p50_ms"] = float(np.percentile(arr, 50))
            out["p95_ms"] = float(np.percentile(arr, 95))
            out["p99_ms"] = float(np.percentile(arr, 99))
        return out


class RecommendationEngine:
    """Wires the store, the model state, the trainer thread, and the caches."""

    def __init__(self, store: Store, cfg: EngineConfig):
        self.store = store
        self.cfg = cfg
        self.state = ModelState(cfg.trainer.als)
        self.tracker = SignificanceTracker(cfg.rule)
        self.articles: dict[str, content.FeatureVector] = {}
        self.article_times: dict[str, float] = {}
        self.seen: dict[str, set[str]] = {}
        self._queue: queue.Queue[tuple[str, str]] = queue.Queue(maxsize=cfg.queue_capacity)
        self._pad_rng = np.random.default_rng(cfg.trainer.als.seed)
        self._neg_rng = np.random.default_rng(cfg.trainer.als.seed + 1)

        # _state_lock guards the model state, popularity, and the item matrix;
        # the trainer holds it only for bookkeeping and write-back, never for
        # solves, so serving does not block on training.
        self._state_lock = threading.RLock()
        # _ingest_lock guards the tracker, seen sets, article catalog, and
        # event sequencing.
        self._ingest_lock = threading.Lock()
        self._user_cache = _TtlCache(cfg.model_ttl)
        self._content_cache = _TtlCache(cfg.model_ttl)
        self._top_cache = _TtlCache(cfg.top_ttl)

        self.latencies: dict[str, _Latencies] = {}
        self.request_counts: dict[str, int] = {}
        self._metrics_lock = threading.Lock()

        self.events_ingested = 0
        self.actions_enqueued = 0
        self.actions_trained = 0
        self._next_event_seq = 0
        self._next_batch_seq = 0

        self._item_ids: list[str] = []
        self._item_matrix = np.zeros((0, cfg.trainer.als.k))

        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._recover()

    # --- startup ---

    def _recover(self) -> None:
        params = self.cfg.trainer.als
        for key, value in self.store.scan(Namespace.ARTICLE):
            obj = json.loads(value.decode("utf-8"))
            self.articles[key.decode("utf-8")] = frozenset(obj["features"])
            self.article_times[key.decode("utf-8")] = float(obj.get("ingested_at", 0.0))
        for key, value in self.store.scan(Namespace.USER_VEC):
            self.state.users[key.decode("utf-8")] = als.vector_from_bytes(value)
        for key, value in self.store.scan(Namespace.ITEM_VEC):
            self.state.items[key.decode("utf-8")] = als.vector_from_bytes(value)
        for key, value in self.store.scan(Namespace.RATINGS):
            items = trainer.ratings_from_bytes(value)
            self.state.ratings[key.decode("utf-8")] = dict.fromkeys(items)
        for items in self.state.ratings.values():
            self.state.popularity.update(items.keys())

        trained = 0
        for key, value in self.store.scan(Namespace.CHECKPOINT):
            trained += int(value.decode("ascii"))
            self._next_batch_seq = int(key.decode("ascii")) + 1
        self.actions_trained = trained

        replayed = 0
        for key, value in self.store.scan(Namespace.EVENTS):
            ev = parse_event_line(value.decode("utf-8"))
            self.events_ingested += 1
            self._next_event_seq = int(key.decode("ascii")) + 1
            for pair in self.tracker.feed(ev):
                self.seen.setdefault(pair[0], set()).add(pair[1])
                replayed += 1
                if replayed > trained:
                    self._queue.put_nowait(pair)
                    self.actions_enqueued += 1
        self.actions_enqueued += trained  # already-applied actions count as delivered
        self._rebuild_item_matrix()
        if self.events_ingested:
            _logger.info(
                "recovered %d events, %d trained actions, %d pending",
                self.events_ingested,
                trained,
                self._queue.qsize(),
            )

    def _rebuild_item_matrix(self) -> None:
        with self._state_lock:
            self._item_ids = sorted(self.state.items)
            k = self.cfg.trainer.als.k
            self._item_matrix = (
                np.stack([self.state.items[i] for i in self._item_ids])
                if self._item_ids
                else np.zeros((0, k))
            )

    # --- lifecycle ---

    def start(self) -> None:
        if self._thread is not None:
            return
        self._stop.clear()
        self._thread = threading.Thread(target=self._train_loop, name="trainer", daemon=True)
        self._thread.start()

    def close(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=30)
            self._thread = None
        self.store.close()

    # --- ingestion ---

    def ingest_event(self, ev: InteractionEvent) -> int:
        """Durably log the event, feed sessionization, queue new significant
        actions for training. Returns the assigned sequence number."""
        pending = self._queue.qsize()
        if pending + 2 >= self.cfg.queue_capacity:
            raise BackPressureError(f"training queue at capacity ({pending} pending)")
        with self._ingest_lock:
            # validate ordering before the durable append so rejected events
            # leave no trace
            seq = self._next_event_seq
            line = format_event_line(ev).encode("utf-8")
            pairs = self.tracker.feed(ev)  # raises OrderingError on regression
            self.store.put(Namespace.EVENTS, f"{seq:020d}", line)
            self._next_event_seq = seq + 1
            self.events_ingested += 1
            for user_id, item_id in pairs:
                self.seen.setdefault(user_id, set()).add(item_id)
        for pair in pairs:
            self._queue.put_nowait(pair)
            self.actions_enqueued += 1
        return seq

    def ingest_article(self, doc: ArticleDocument) -> None:
        feats = content.extract_features(doc, self.cfg.ranker)
        now = time.time()
        record = {
            "item_id": doc.item_id,
            "section": doc.section,
            "author_text": doc.author_text,
            "title": doc.title,
            "body": doc.body,
            "features": sorted(feats),
            "ingested_at": now,
        }
        self.store.put(Namespace.ARTICLE, doc.item_id, json.dumps(record).encode("utf-8"))
        with self._ingest_lock:
            self.articles[doc.item_id] = feats
            self.article_times[doc.item_id] = now

    # --- training loop ---

    def trainer_lag(self) -> int:
        return self.actions_enqueued - self.actions_trained

    def _train_loop(self) -> None:
        cfg = self.cfg.trainer
        pending: list[tuple[str, str]] = []
        last_flush = time.monotonic()
        while not self._stop.is_set():
            timeout = max(0.01, self.cfg.flush_interval / 10)
            try:
                pending.append(self._queue.get(timeout=timeout))
            except queue.Empty:
                pass
            while len(pending) < cfg.batch_size * cfg.parallelism:
                try:
                    pending.append(self._queue.get_nowait())
                except queue.Empty:
                    break
            now = time.monotonic()
            full = len(pending) >= cfg.batch_size
            due = pending and (now - last_flush) >= self.cfg.flush_interval
            if full or due:
                take = len(pending) if due else (len(pending) // cfg.batch_size) * cfg.batch_size
                take = min(take, cfg.batch_size * cfg.parallelism)
                batch, pending = pending[:take], pending[take:]
                try:
                    self._train_batches(batch)
                except Exception:
                    _logger.exception("trainer batch failed")
                last_flush = time.monotonic()
        if pending:
            try:
                self._train_batches(pending)
            except Exception:
                _logger.exception("final trainer flush failed")

    def _train_batches(self, actions: list[tuple[str, str]]) -> None:
        """Run one group of batches and persist everything they touched."""
        cfg = self.cfg.trainer
        trainer.run_stream(
            actions,
            self.state,
            cfg,
            on_batch=self._persist_batch,
            rng=self._pad_rng,
            state_lock=self._state_lock,
        )
        self._rebuild_item_matrix()
        if self.cfg.train_content_models:
            users = dict.fromkeys(u for u, _ in actions)
            self._train_content_models(list(users))

    def _persist_batch(self, bi: int, job, state: ModelState) -> None:
        for user_id in job.row_users:
            self.store.put(Namespace.USER_VEC, user_id, als.vector_to_bytes(state.users[user_id]))
            self.store.put(
                Namespace.RATINGS, user_id, trainer.ratings_to_bytes(state.ratings[user_id])
            )
        for item_id in job.col_items:
            self.store.put(Namespace.ITEM_VEC, item_id, als.vector_to_bytes(state.items[item_id]))
            self.store.put(
                Namespace.POPULARITY, item_id, str(state.popularity[item_id]).encode("ascii")
            )
        seq = self._next_batch_seq
        self.store.put(
            Namespace.CHECKPOINT, trainer.checkpoint_key(seq), trainer.checkpoint_value(job.n_actions)
        )
        self._next_batch_seq = seq + 1
        self.actions_trained += job.n_actions

    def _train_content_models(self, users: list[str]) -> None:
        with self._ingest_lock:
            articles = dict(self.articles)
        corpus = set(articles)
        for user_id in users:
            with self._state_lock:
                rated = self.state.rated_items(user_id)
            positives = [articles[i] for i in sorted(rated) if i in articles]
            if not positives:
                continue
            neg_ids = content.sample_negatives(
                rated, corpus, self.cfg.ranker.negative_ratio, self._neg_rng
            )
            negatives = [articles[i] for i in sorted(neg_ids)]
            if not negatives:
                continue
            try:
                model = content.train_user_model(
                    positives, negatives, self.cfg.ranker, owner=user_id
                )
            except content.DegenerateTrainingError:
                continue
            self.store.put(
                Namespace.CONTENT_MODEL, user_id, content.content_model_to_bytes(model)
            )

    # --- serving ---

    def _seen(self, user_id: str) -> set[str]:
        seen = {i for u, i in self.tracker.significant_pairs() if u == user_id}
        seen.update(self.state.rated_items(user_id))
        return seen

    def _window_filter(self, item_ids, window: float | None):
        if window is None:
            return list(item_ids)
        cutoff = time.time() - window
        return [i for i in item_ids if self.article_times.get(i, -1.0) >= cutoff]

    def _load_user_vector(self, user_id: str) -> np.ndarray | None:
        def loader():
            raw = self.store.get(Namespace.USER_VEC, user_id)
            return als.vector_from_bytes(raw) if raw is not None else None

        return self._user_cache.get(user_id, loader)

    def _load_content_model(self, user_id: str) -> ContentModel | None:
        def loader():
            raw = self.store.get(Namespace.CONTENT_MODEL, user_id)
            if raw is None:
                return None
            return content.content_model_from_bytes(user_id, raw)

        return self._content_cache.get(user_id, loader)

    def _top_ranking(self) -> list[tuple[str, float]]:
        def loader():
            with self._lock:
                counts = dict(self.state.popularity)
                for i in self.articles:
                    counts.setdefault(i, 0)
                for i in self._item_ids:
                    counts.setdefault(i, 0)
            ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
            return [(i, float(c)) for i, c in ranked]

        return self._top_cache.get("top", loader)

    def recommend(
        self,
        user_id: str,
        n: int = 10,
        algorithm: Algorithm = "collab",
        candidate_window: float | None = None,
    ) -> dict:
        """Dispatch to one algorithm, always excluding the user's seen items.

        Unknown users (or users without a content model) fall back to the
        top-articles ranking with ``fallback`` set in the response.
        """
        if n < 1:
            raise ValueError("n must be >= 1")
        exclude = self._seen(user_id)
        fallback = False
        items: list[tuple[str, float]] = []

        if algorithm == "collab":
            vec = self._load_user_vector(user_id)
            if vec is None:
                fallback = True
            else:
                with self._lock:
                    item_ids = self._item_ids
                    Y = self._item_matrix
                if candidate_window is not None:
                    keep = set(self._window_filter(item_ids, candidate_window))
                    excl = {
                        j for j, i in enumerate(item_ids) if i in exclude or i not in keep
                    }
                else:
                    excl = {j for j, i in enumerate(item_ids) if i in exclude}
                top = als.recommend_collaborative(vec, Y, excl, n)
                items = [(item_ids[j], s) for j, s in top]
        elif algorithm == "content":
            model = self._load_content_model(user_id)
            if model is None:
                fallback = True
            else:
                with self._lock:
                    candidates = {
                        i: self.articles[i]
                        for i in self._window_filter(self.articles, candidate_window)
                    }
                    popularity = dict(self.state.popularity)
                items = content.recommend_content(
                    user_id,
                    {user_id: model},
                    candidates,
                    popularity,
                    exclude,
                    n,
                    beta=self.cfg.ranker.beta,
                )
        elif algorithm != "top":
            raise ValueError(f"unknown algorithm {algorithm!r}")

        if algorithm == "top" or fallback:
            ranked = self._top_ranking()
            allowed = (
                None
                if candidate_window is None
                else set(self._window_filter([i for i, _ in ranked], candidate_window))
            )
            items = [
                (i, s)
                for i, s in ranked
                if i not in exclude and (allowed is None or i in allowed)
            ][:n]

        return {
            "user_id": user_id,
            "algorithm": algorithm,
            "fallback": fallback,
            "items": [{"item_id": i, "score": s} for i, s in items],
        }

    # --- metrics ---

    def record_request(self, endpoint: str, seconds: float) -> None:
        with self._metrics_lock:
            self.request_counts[endpoint] = self.request_counts.get(endpoint, 0) + 1
            self.latencies.setdefault(endpoint, _Latencies()).record(seconds)

    def metrics(self) -> dict:
        with self._metrics_lock:
            endpoints = {
                name: {"count": self.request_counts.get(name, 0), **lat.snapshot()}
                for name, lat in self.latencies.items()
            }
            counts = dict(self.request_counts)
        for name, count in counts.items():
            endpoints.setdefault(
                name, {"count": count, "p50_ms": 0.0, "p95_ms": 0.0, "p99_ms": 0.0}
            )
        hits = self._user_cache.hits + self._content_cache.hits + self._top_cache.hits
        misses = self._user_cache.misses + self._content_cache.misses + self._top_cache.misses
        return {
            "endpoints": endpoints,
            "cache": {
                "hits": hits,
                "misses": misses,
                "hit_ratio": hits / (hits + misses) if hits + misses else 0.0,
            },
            "trainer": {
                "events_ingested": self.events_ingested,
                "actions_enqueued": self.actions_enqueued,
                "actions_trained": self.actions_trained,
                "lag": self.trainer_lag(),
            },
        }


# --- HTTP surface ---

class EventBody(BaseModel):
    user_id: str = Field(min_length=1)
    item_id: str = Field(min_length=1)
    kind: str
    timestamp: int = Field(ge=0)

    @field_validator("kind")
    @classmethod
    def _valid_kind(cls, v: str) -> str:
        if v not in (k.value for k in EventKind):
            raise ValueError(f"kind must be one of click/share/comment, got {v!r}")
        return v

    def to_event(self) -> InteractionEvent:
        return InteractionEvent(self.user_id, self.item_id, EventKind(self.kind), self.timestamp)


class ArticleBody(BaseModel):
    item_id: str = Field(min_length=1)
    section: str = ""
    author_text: str = ""
    title: str = ""
    body: str = ""

    def to_document(self) -> ArticleDocument:
        return ArticleDocument(
            item_id=self.item_id,
            section=self.section,
            author_text=self.author_text,
            title=self.title,
            body=self.body,
        )


_ENDPOINT_NAMES = {
    "/events": "events",
    "/articles": "articles",
    "/recommendations": "recommendations",
    "/metrics": "metrics",
}


def create_app(engine: RecommendationEngine) -> FastAPI:
    app = FastAPI(title="newsrec", version="0.1.0")
    app.state.engine = engine

    @app.middleware("http")
    async def _timing(request: Request, call_next):
        name = _ENDPOINT_NAMES.get(request.url.path)
        start = time.monotonic()
        response = await call_next(request)
        if name is not None:
            engine.record_request(name, time.monotonic() - start)
        return response

    @app.post("/events")
    def post_events(body: EventBody | list[EventBody]):
        single = isinstance(body, EventBody)
        events = [body] if single else body
        seqs = []
        for ev in events:
            try:
                seqs.append(engine.ingest_event(ev.to_event()))
            except OrderingError as exc:
                raise HTTPException(status_code=400, detail=str(exc))
            except BackPressureError as exc:
                raise HTTPException(status_code=503, detail=str(exc))
        return {"sequence": seqs[0]} if single else {"sequences": seqs, "count": len(seqs)}

    @app.post("/articles")
    def post_article(body: ArticleBody):
        engine.ingest_article(body.to_document())
        return {"item_id": body.item_id, "status": "ingested"}

    @app.get("/recommendations")
    def get_recommendations(
        user: str = Query(min_length=1),
        n: int = Query(default=10, ge=1),
        algo: Algorithm = "collab",
        window: float | None = Query(default=None, gt=0),
    ):
        return engine.recommend(user, n=n, algorithm=algo, candidate_window=window)

    @app.get("/metrics")
    def get_metrics():
        return engine.metrics()

    return app
