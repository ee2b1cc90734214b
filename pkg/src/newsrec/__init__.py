"""Real-time news recommendations: incremental implicit-feedback
matrix factorization, per-user content ranking, offline evaluation,
and a single-process serving runtime."""

from .als import AlsParams
from .content import ArticleDocument, RankerConfig
from .evaluation import Dataset, EvalReport
from .events import InteractionEvent, SignificanceRule, UserItemAggregate
from .trainer import ModelState, TrainerConfig

__all__ = [
    "AlsParams",
    "ArticleDocument",
    "Dataset",
    "EvalReport",
    "InteractionEvent",
    "ModelState",
    "RankerConfig",
    "SignificanceRule",
    "TrainerConfig",
    "UserItemAggregate",
]

__version__ = "0.1.0"
