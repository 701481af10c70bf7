from __future__ import annotations

import logging
from typing import Callable, List, Sequence

import numpy as np

from ..errors import DomainError, EvaluationError, NumericalError, SizeError
from ..state import EvaluationEvent, MetricsReport, Session


logger = logging.getLogger(__name__)

POPULARITY_FLOOR = 1e-6

Recommender = Callable[[Sequence[int], int], List[int]]


def evaluate_events(recommender: Recommender, validation: Sequence[Session], k: int) -> List[EvaluationEvent]:
    """One event per next-item position: prefix x_1..x_t, target x_{t+1}."""
    events: List[EvaluationEvent] = []
    for session in validation:
        if len(session) < 2:
            raise SizeError(f"validation sessions need at least 2 items, got {len(session)}")
        for t in range(1, len(session)):
            prefix = list(session[:t])
            recs = list(recommender(prefix, k))
            events.append(EvaluationEvent(prefix=prefix, target=int(session[t]), recs=recs))
    return events


def _require_events(events: Sequence[EvaluationEvent]) -> None:
    if len(events) == 0:
        raise EvaluationError("cannot compute metrics over an empty event list")


def top_k_accuracy(events: Sequence[EvaluationEvent]) -> float:
    _require_events(events)
    hits = sum(1 for e in events if e.target in e.recs)
    return hits / len(events)


def catalog_coverage(events: Sequence[EvaluationEvent], n_x: int) -> float:
    """Share of the catalog recommended at least once."""
    _require_events(events)
    if n_x < 1:
        raise DomainError(f"catalog size must be positive, got {n_x}")
    seen = {item for e in events for item in e.recs}
    if seen and (min(seen) < 0 or max(seen) >= n_x):
        raise DomainError(f"recommended item outside catalog [0, {n_x})")
    return len(seen) / n_x


def count_short_events(events: Sequence[EvaluationEvent], k: int) -> int:
    return sum(1 for e in events if len(e.recs) < k)


def novelty(events: Sequence[EvaluationEvent], popularity: np.ndarray, k: int) -> float:
    """
    Mean -log p over recommended items, p clamped below at 1e-6.

    Events with fewer than k recommendations are left out; if none are left
    the novelty is 0.0.
    """
    _require_events(events)
    full = [e.recs[:k] for e in events if len(e.recs) >= k]
    if not full:
        return 0.0
    recs = np.asarray(full, dtype=np.int64)
    pop = np.asarray(popularity, dtype=np.float64)
    if recs.min() < 0 or recs.max() >= len(pop):
        raise DomainError(f"recommended item outside popularity vector of length {len(pop)}")
    p = np.maximum(pop[recs], POPULARITY_FLOOR)
    return float(-np.log(p).sum() / (len(full) * k))


def evaluate(
    recommender: Recommender,
    validation: Sequence[Session],
    k: int,
    popularity: np.ndarray,
    n_x: int,
) -> MetricsReport:
    """All three metrics over the events of a validation set."""
    events = evaluate_events(recommender, validation, k)
    _require_events(events)
    report = MetricsReport(
        top_k_accuracy=top_k_accuracy(events),
        catalog_coverage=catalog_coverage(events, n_x),
        novelty=novelty(events, popularity, k),
        k=k,
        n_events=len(events),
        n_short_events=count_short_events(events, k),
    )
    if not all(np.isfinite([report.top_k_accuracy, report.catalog_coverage, report.novelty])):
        raise NumericalError("metrics are not finite")
    if report.n_short_events:
        logger.info("%d of %d events had fewer than %d recommendations", report.n_short_events, len(events), k)
    return report
