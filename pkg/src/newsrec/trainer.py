"""Incremental training: batch-wise factor updates over a growing model.

The trainer owns three persistent maps (user vectors, item vectors, and each
user's set of significant items so far) and consumes the significant-action
stream in batches. For every batch it assembles a sub-problem whose rows are
the batch's users (padded with random known users when the batch is too
small) and whose columns are the union of those users' complete rating
histories, runs the factor update on it, and writes the solved vectors back.
Vectors of entities outside the sub-problem are never touched.

Batches may be processed in parallel: each solve reads a snapshot of the
vectors taken at dispatch and write-backs go last-writer-wins per entity, so
high parallelism trades convergence quality for throughput rather than
failing outright.
"""

from __future__ import annotations

import contextlib
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, ContextManager, Iterable, Sequence

import numpy as np

from .als import AlsParams, FactorMatrices, SparseRatings, latent_factor_update

_logger = logging.getLogger(__name__)

Action = tuple[str, str]  # (user_id, item_id) significant action


class StreamProcessingError(RuntimeError):
    """A batch failed mid-stream; ``batch_index`` identifies it for replay."""

    def __init__(self, batch_index: int, cause: BaseException):
        super().__init__(f"batch {batch_index} failed: {cause}")
        self.batch_index = batch_index
        self.__cause__ = cause


@dataclass
class TrainerConfig:
    batch_size: int = 10000
    min_batch_users: int = 100
    parallelism: int = 1
    als: AlsParams = field(default_factory=AlsParams)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.min_batch_users < 1:
            raise ValueError("min_batch_users must be >= 1")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")


class ModelState:
    """All model state accumulated from the stream so far.

    ``ratings`` values are insertion-ordered sets (dicts with None values):
    membership is set-semantics, iteration order is deterministic, which
    keeps whole training runs reproducible from the seed alone.
    """

    def __init__(self, params: AlsParams):
        self.params = params
        self.users: dict[str, np.ndarray] = {}
        self.items: dict[str, np.ndarray] = {}
        self.ratings: dict[str, dict[str, None]] = {}
        self.popularity: Counter[str] = Counter()
        self._rng = np.random.default_rng(params.seed)

    def _new_vector(self) -> np.ndarray:
        return self._rng.random(self.params.k) * self.params.init_scale

    def rated_items(self, user_id: str) -> set[str]:
        return set(self.ratings.get(user_id, ()))

    def check_integrity(self) -> None:
        """Raise if the referential invariants are broken (test hook)."""
        for u, items in self.ratings.items():
            if u not in self.users:
                raise AssertionError(f"ratings user {u!r} has no vector")
            for i in items:
                if i not in self.items:
                    raise AssertionError(f"rated item {i!r} has no vector")
        recount: Counter[str] = Counter()
        for items in self.ratings.values():
            recount.update(items.keys())
        if recount != +self.popularity:
            raise AssertionError("popularity counts disagree with ratings recount")


def pad_batch(
    batch_users: Sequence[str],
    state: ModelState,
    cfg: TrainerConfig,
    rng: np.random.Generator,
) -> list[str]:
    """Return the batch's users, padded up to the configured floor.

    Padding draws uniformly without replacement from previously seen users
    with non-empty ratings. The result is an ordered, duplicate-free list:
    batch users first (input order), then any padding in sampled order.
    """
    users = list(dict.fromkeys(batch_users))
    if len(users) >= cfg.min_batch_users:
        return users
    member = set(users)
    pool = sorted(
        u for u, items in state.ratings.items() if items and u not in member
    )
    need = min(cfg.min_batch_users - len(users), len(pool))
    if need > 0:
        picked = rng.choice(len(pool), size=need, replace=False)
        users.extend(pool[int(j)] for j in picked)
    return users


@dataclass
class _BatchJob:
    """A dispatched sub-problem: snapshot in, solved factors out."""

    row_users: list[str]
    col_items: list[str]
    ratings: SparseRatings
    factors: FactorMatrices
    n_actions: int
    result: FactorMatrices | None = None


def _prepare_batch(
    batch: Sequence[Action],
    state: ModelState,
    cfg: TrainerConfig,
    rng: np.random.Generator,
) -> _BatchJob | None:
    """Algorithm bookkeeping plus sub-problem assembly for one batch.

    Registers unseen users/items with fresh random vectors, folds the batch
    into the rating sets, then snapshots the padded sub-problem. Column order
    is batch items in first-appearance order followed by the remaining
    history items in row order, so a batch covering the entire stream
    assembles exactly the matrix a from-scratch training run would use.
    """
    if not batch:
        return None
    if state.params.k != cfg.als.k:
        raise ValueError("state and trainer configured with different k")

    for user_id, _ in batch:
        if user_id not in state.users:
            state.users[user_id] = state._new_vector()
        if user_id not in state.ratings:
            state.ratings[user_id] = {}
    for user_id, item_id in batch:
        if item_id not in state.ratings[user_id]:
            state.ratings[user_id][item_id] = None
            state.popularity[item_id] += 1
    for _, item_id in batch:
        if item_id not in state.items:
            state.items[item_id] = state._new_vector()

    row_users = pad_batch([u for u, _ in batch], state, cfg, rng)
    col_index: dict[str, int] = {}
    for _, item_id in batch:
        if item_id not in col_index:
            col_index[item_id] = len(col_index)
    rows: list[int] = []
    cols: list[int] = []
    for r, user_id in enumerate(row_users):
        for item_id in state.ratings[user_id]:
            c = col_index.get(item_id)
            if c is None:
                c = len(col_index)
                col_index[item_id] = c
            rows.append(r)
            cols.append(c)
    col_items = list(col_index)

    ratings = SparseRatings(
        len(row_users),
        len(col_items),
        rows=np.asarray(rows, dtype=np.int64),
        cols=np.asarray(cols, dtype=np.int64),
        vals=np.ones(len(rows)),
    )
    factors = FactorMatrices(
        np.stack([state.users[u] for u in row_users]),
        np.stack([state.items[i] for i in col_items]),
    )
    return _BatchJob(row_users, col_items, ratings, factors, len(batch))


def _solve_batch(job: _BatchJob, cfg: TrainerConfig) -> _BatchJob:
    job.result = latent_factor_update(job.ratings, job.factors, cfg.als)
    return job


def _write_back(job: _BatchJob, state: ModelState) -> None:
    assert job.result is not None
    for r, user_id in enumerate(job.row_users):
        state.users[user_id] = job.result.X[r].copy()
    for c, item_id in enumerate(job.col_items):
        state.items[item_id] = job.result.Y[c].copy()


def process_batch(
    batch: Sequence[Action],
    state: ModelState,
    cfg: TrainerConfig,
    rng: np.random.Generator | None = None,
) -> ModelState:
    """Apply one batch of significant actions to the model state.

    An empty batch is a no-op. Only vectors of the padded batch's users and
    of the items in their rating histories are modified.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.als.seed)
    job = _prepare_batch(batch, state, cfg, rng)
    if job is not None:
        _solve_batch(job, cfg)
        _write_back(job, state)
    return state


def partition_batches(
    actions: Iterable[Action], batch_size: int
) -> list[list[Action]]:
    """Split the action stream into consecutive batches of batch_size."""
    batches: list[list[Action]] = []
    cur: list[Action] = []
    for action in actions:
        cur.append(action)
        if len(cur) == batch_size:
            batches.append(cur)
            cur = []
    if cur:
        batches.append(cur)
    return batches


OnBatch = Callable[[int, _BatchJob, "ModelState"], None]


def run_stream(
    actions: Iterable[Action],
    state: ModelState,
    cfg: TrainerConfig,
    on_batch: OnBatch | None = None,
    rng: np.random.Generator | None = None,
    state_lock: ContextManager | None = None,
) -> ModelState:
    """Consume the whole action stream in batches of ``cfg.batch_size``.

    With parallelism P > 1, up to P consecutive batches are dispatched as a
    group: bookkeeping stays sequential, the solves run concurrently on
    vector snapshots, and results are written back in batch order (so the
    later batch wins conflicting entities). P = 1 reduces to a sequential
    fold of :func:`process_batch`.

    ``state_lock``, when given, is held around state mutations (bookkeeping,
    write-back, ``on_batch``) but never around the solves, so concurrent
    readers of the state only wait for the cheap phases.

    ``on_batch`` runs after each batch's write-back; any exception from it or
    from the solve is wrapped in :class:`StreamProcessingError` carrying the
    batch index for replay.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.als.seed)
    lock = state_lock if state_lock is not None else contextlib.nullcontext()
    batches = partition_batches(actions, cfg.batch_size)
    _logger.info("training on %d batches of up to %d actions", len(batches), cfg.batch_size)

    if cfg.parallelism == 1:
        for bi, batch in enumerate(batches):
            try:
                with lock:
                    job = _prepare_batch(batch, state, cfg, rng)
                assert job is not None  # partition never yields empty batches
                _solve_batch(job, cfg)
                with lock:
                    _write_back(job, state)
                    if on_batch is not None:
                        on_batch(bi, job, state)
            except Exception as exc:
                raise StreamProcessingError(bi, exc) from exc
        return state

    with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
        for start in range(0, len(batches), cfg.parallelism):
            group = batches[start : start + cfg.parallelism]
            jobs: list[_BatchJob] = []
            for offset, batch in enumerate(group):
                try:
                    with lock:
                        job = _prepare_batch(batch, state, cfg, rng)
                    assert job is not None
                    jobs.append(job)
                except Exception as exc:
                    raise StreamProcessingError(start + offset, exc) from exc
            futures = [pool.submit(_solve_batch, job, cfg) for job in jobs]
            for offset, (job, fut) in enumerate(zip(jobs, futures)):
                bi = start + offset
                try:
                    fut.result()
                    with lock:
                        _write_back(job, state)
                        if on_batch is not None:
                            on_batch(bi, job, state)
                except Exception as exc:
                    raise StreamProcessingError(bi, exc) from exc
    return state


# --- store record formats owned by the trainer ---

def ratings_to_bytes(items: Iterable[str]) -> bytes:
    """Sorted item-id list, newline-joined."""
    return "\n".join(sorted(items)).encode("utf-8")


def ratings_from_bytes(raw: bytes) -> list[str]:
    text = raw.decode("utf-8")
    return text.split("\n") if text else []


def checkpoint_key(batch_sequence: int) -> bytes:
    return f"{batch_sequence:020d}".encode("ascii")


def checkpoint_value(actions_applied: int) -> bytes:
    return str(actions_applied).encode("ascii")
