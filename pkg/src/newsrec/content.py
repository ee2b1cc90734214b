"""Per-user content-based ranking over binary text features.

Articles are reduced to presence features: the section name, author terms,
and title/body terms, each carrying a type prefix so the three spaces never
collide. For every user a regularized logistic model separates the articles
they interacted with from a random sample of articles they never touched
(capped at five negatives per positive). The regularization cost is picked
by cross-validated F1, the fitted model is pruned to its most extreme
coefficients, and ranking scores multiply the model's probability by
smoothed item popularity so fresh items stay recommendable.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, TextIO

import numpy as np
import scipy.optimize
import scipy.sparse as sp
from scipy.special import expit

FeatureVector = frozenset[str]

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


class DegenerateTrainingError(ValueError):
    """Training data cannot identify a model (e.g. only one class present)."""


class ColdUserError(KeyError):
    """No content model exists for this user."""


@lru_cache(maxsize=1)
def default_stopwords() -> frozenset[str]:
    text = resources.files("newsrec").joinpath("stopwords.txt").read_text("utf-8")
    return frozenset(w for w in text.split() if w)


@dataclass(frozen=True)
class ArticleDocument:
    item_id: str
    section: str = ""
    author_text: str = ""
    title: str = ""
    body: str = ""

    def __post_init__(self):
        if not self.item_id:
            raise ValueError("item_id must be non-empty")


@dataclass
class ContentModel:
    """A user's sparse linear scorer over prefixed features."""

    owner: str
    coefficients: dict[str, float]
    intercept: float
    cost: float | None
    cv_scores: dict[float, float] = field(default_factory=dict)


@dataclass(frozen=True)
class RankerConfig:
    costs: tuple[float, ...] = (10.0, 20.0, 50.0)
    negative_ratio: int = 5
    keep_top: int = 2500
    keep_bottom: int = 2500
    beta: float = 10.0
    cv_folds: int = 5
    stopwords: frozenset[str] = field(default_factory=default_stopwords)

    def __post_init__(self):
        if not self.costs or any(c <= 0 for c in self.costs):
            raise ValueError("costs must be a non-empty list of positive values")
        if self.negative_ratio < 1:
            raise ValueError("negative_ratio must be >= 1")
        if min(self.keep_top, self.keep_bottom, self.cv_folds) < 1:
            raise ValueError("keep_top/keep_bottom/cv_folds must be positive")
        if self.beta <= 0:
            raise ValueError("beta must be positive")


def _tokens(text: str, stopwords: frozenset[str]) -> Iterable[str]:
    for tok in _TOKEN_SPLIT.split(text.lower()):
        if tok and tok not in stopwords:
            yield tok


def extract_features(doc: ArticleDocument, cfg: RankerConfig) -> FeatureVector:
    """Binary presence features with per-type prefixes, no stemming."""
    feats: set[str] = set()
    section = doc.section.strip().lower()
    if section:
        feats.add(f"s:{section}")
    for tok in _tokens(doc.author_text, cfg.stopwords):
        feats.add(f"a:{tok}")
    for tok in _tokens(doc.title + " " + doc.body, cfg.stopwords):
        feats.add(f"t:{tok}")
    return frozenset(feats)


def sample_negatives(
    user_ratings: set[str],
    corpus: set[str],
    ratio: int,
    rng: np.random.Generator,
) -> set[str]:
    """Uniform sample of unseen items, at most ratio * |positives| of them."""
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    pool = sorted(corpus - user_ratings)
    want = min(ratio * len(user_ratings), len(pool))
    if want == 0:
        return set()
    picked = rng.choice(len(pool), size=want, replace=False)
    return {pool[int(j)] for j in picked}


def _logistic_loss_grad(
    theta: np.ndarray, X: sp.csr_matrix, y: np.ndarray, cost: float
) -> tuple[float, np.ndarray]:
    """L2-regularized logistic loss (intercept unpenalized) and its gradient.

    loss = 0.5 ||w||^2 + cost * sum_j log(1 + exp(-y_j (x_j.w + b)))
    with labels y in {-1, +1}.
    """
    w, b = theta[:-1], theta[-1]
    z = X @ w + b
    yz = y * z
    loss = 0.5 * float(w @ w) + cost * float(np.sum(np.logaddexp(0.0, -yz)))
    s = expit(-yz)  # d/dz log(1+e^(-yz)) = -y * sigmoid(-yz)
    gw = w - cost * (X.T @ (y * s))
    gb = -cost * float(np.sum(y * s))
    return loss, np.concatenate([gw, [gb]])


def _features_to_csr(
    examples: list[FeatureVector], vocab: dict[str, int]
) -> sp.csr_matrix:
    indptr = [0]
    indices: list[int] = []
    for feats in examples:
        cols = sorted(vocab[f] for f in feats if f in vocab)
        indices.extend(cols)
        indptr.append(len(indices))
    return sp.csr_matrix(
        (np.ones(len(indices)), indices, indptr), shape=(len(examples), len(vocab))
    )


def train_logreg(
    examples: list[tuple[FeatureVector, int]], cost: float
) -> tuple[dict[str, float], float]:
    """Fit the regularized logistic model; returns (coefficients, intercept).

    Optimization runs until the loss gradient norm falls below
    1e-6 * (1 + |loss|); deterministic for a fixed example order.
    """
    labels = {label for _, label in examples}
    if labels != {0, 1}:
        raise DegenerateTrainingError(
            f"need both classes present, got labels {sorted(labels)}"
        )
    vocab = {f: j for j, f in enumerate(sorted(set().union(*(fv for fv, _ in examples))))}
    X = _features_to_csr([fv for fv, _ in examples], vocab)
    y = np.asarray([1.0 if label else -1.0 for _, label in examples])

    theta = np.zeros(len(vocab) + 1)
    for _ in range(4):
        res = scipy.optimize.minimize(
            _logistic_loss_grad,
            theta,
            args=(X, y, cost),
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": 2000, "gtol": 1e-10, "ftol": 1e-15},
        )
        theta = res.x
        loss, grad = _logistic_loss_grad(theta, X, y, cost)
        if float(np.linalg.norm(grad)) < 1e-6 * (1.0 + abs(loss)):
            break
    coeffs = {f: float(theta[j]) for f, j in vocab.items()}
    return coeffs, float(theta[-1])


def _f1_positive(y_true: list[int], y_pred: list[int]) -> float:
    tp = sum(1 for t, p in zip(y_true, y_pred) if t == 1 and p == 1)
    fp = sum(1 for t, p in zip(y_true, y_pred) if t == 0 and p == 1)
    fn = sum(1 for t, p in zip(y_true, y_pred) if t == 1 and p == 0)
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def _cv_f1(
    positives: list[FeatureVector],
    negatives: list[FeatureVector],
    cost: float,
    folds: int,
) -> float:
    """Mean positive-class F1 over label-stratified folds.

    Folds assign examples round-robin within each class, so every fold holds
    both classes whenever folds <= min(|pos|, |neg|).
    """
    scores = []
    for fold in range(folds):
        train_ex: list[tuple[FeatureVector, int]] = []
        test_ex: list[tuple[FeatureVector, int]] = []
        for cls, members in ((1, positives), (0, negatives)):
            for j, fv in enumerate(members):
                (test_ex if j % folds == fold else train_ex).append((fv, cls))
        coeffs, intercept = train_logreg(train_ex, cost)
        y_true = [label for _, label in test_ex]
        y_pred = [
            1 if intercept + sum(coeffs.get(f, 0.0) for f in fv) >= 0 else 0
            for fv, _ in test_ex
        ]
        scores.append(_f1_positive(y_true, y_pred))
    return float(np.mean(scores))


def _prune(
    coeffs: dict[str, float], keep_top: int, keep_bottom: int
) -> dict[str, float]:
    if len(coeffs) <= keep_top + keep_bottom:
        return dict(coeffs)
    by_value = sorted(coeffs.items(), key=lambda kv: (kv[1], kv[0]))
    keep = {f for f, _ in by_value[:keep_bottom]}
    keep.update(f for f, _ in by_value[-keep_top:])
    return {f: v for f, v in coeffs.items() if f in keep}


def train_user_model(
    positives: list[FeatureVector],
    negatives: list[FeatureVector],
    cfg: RankerConfig,
    owner: str = "",
) -> ContentModel:
    """Cost search by cross-validated F1, full retrain, coefficient pruning.

    Ties in CV F1 go to the smaller cost. When a class has fewer members
    than there are folds the fold count shrinks to keep both classes in
    every training fold; with fewer than two usable folds the search is
    skipped and the smallest cost is used.
    """
    if not positives or not negatives:
        raise DegenerateTrainingError("need at least one positive and one negative")

    folds = min(cfg.cv_folds, len(positives), len(negatives))
    cv_scores: dict[float, float] = {}
    if folds >= 2:
        for cost in cfg.costs:
            cv_scores[cost] = _cv_f1(positives, negatives, cost, folds)
        best = None
        for cost in sorted(cfg.costs):
            if best is None or cv_scores[cost] > cv_scores[best]:
                best = cost
    else:
        best = min(cfg.costs)

    examples = [(fv, 1) for fv in positives] + [(fv, 0) for fv in negatives]
    coeffs, intercept = train_logreg(examples, best)
    pruned = _prune(coeffs, cfg.keep_top, cfg.keep_bottom)
    return ContentModel(
        owner=owner,
        coefficients=pruned,
        intercept=intercept,
        cost=best,
        cv_scores=cv_scores,
    )


def score(model: ContentModel, features: FeatureVector | set[str]) -> float:
    """Probability that the article interests the model's owner."""
    z = model.intercept + sum(model.coefficients.get(f, 0.0) for f in features)
    return float(expit(z))


def boosted_score(p_ui: float, f_i: float, beta: float) -> float:
    """Popularity-boosted ranking score p * (f + beta)."""
    if not 0.0 <= p_ui <= 1.0:
        raise ValueError("p_ui must lie in [0, 1]")
    if f_i < 0:
        raise ValueError("popularity count must be >= 0")
    return p_ui * (f_i + beta)


def recommend_content(
    user: str,
    models: Mapping[str, ContentModel],
    articles: Mapping[str, FeatureVector],
    popularity: Mapping[str, int],
    exclude: set[str],
    n: int,
    beta: float = 10.0,
) -> list[tuple[str, float]]:
    """Rank candidate articles by boosted score for one user."""
    model = models.get(user)
    if model is None:
        raise ColdUserError(user)
    scored = []
    for item_id, feats in articles.items():
        if item_id in exclude:
            continue
        s = boosted_score(score(model, feats), popularity.get(item_id, 0), beta)
        scored.append((item_id, s))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:n]


# --- persistence formats owned by this module ---

def content_model_to_bytes(model: ContentModel) -> bytes:
    """(intercept, [(feature_id, coefficient), ...]) as canonical JSON."""
    pairs = sorted(model.coefficients.items())
    return json.dumps([model.intercept, pairs]).encode("utf-8")


def content_model_from_bytes(owner: str, raw: bytes) -> ContentModel:
    intercept, pairs = json.loads(raw.decode("utf-8"))
    return ContentModel(
        owner=owner,
        coefficients={f: float(v) for f, v in pairs},
        intercept=float(intercept),
        cost=None,
    )


def article_to_json(doc: ArticleDocument) -> str:
    return json.dumps(
        {
            "item_id": doc.item_id,
            "section": doc.section,
            "author_text": doc.author_text,
            "title": doc.title,
            "body": doc.body,
        }
    )


def article_from_json(text: str) -> ArticleDocument:
    obj = json.loads(text)
    return ArticleDocument(
        item_id=obj["item_id"],
        section=obj.get("section", ""),
        author_text=obj.get("author_text", ""),
        title=obj.get("title", ""),
        body=obj.get("body", ""),
    )


def read_articles(source: str | Path | TextIO) -> list[ArticleDocument]:
    """Read a line-delimited article batch file (one JSON document per line)."""
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            return read_articles(fh)
    out = []
    for lineno, line in enumerate(source, 1):
        if not line.strip():
            continue
        try:
            out.append(article_from_json(line))
        except (ValueError, KeyError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return out


def write_articles(articles: Iterable[ArticleDocument], dest: str | Path | TextIO) -> None:
    if isinstance(dest, (str, Path)):
        with open(dest, "w", encoding="utf-8") as fh:
            write_articles(articles, fh)
            return
    for doc in articles:
        dest.write(article_to_json(doc) + "\n")
