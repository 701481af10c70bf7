from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import sparse

from ..errors import ArgumentError, DomainError
from ..state import Session


logger = logging.getLogger(__name__)

WALK_STEPS = 2


@dataclass(frozen=True)
class TransitionMatrix:
    """Row-stochastic first-order transitions; all-zero rows are terminal."""

    probs: sparse.csr_matrix

    @property
    def n_x(self) -> int:
        return int(self.probs.shape[0])

    def is_terminal(self, item: int) -> bool:
        return self.probs.indptr[item] == self.probs.indptr[item + 1]

    def row(self, item: int) -> np.ndarray:
        return self.probs.getrow(item).toarray().ravel()

    @cached_property
    def within_row_cumsum(self) -> np.ndarray:
        indptr, data = self.probs.indptr, self.probs.data
        running = np.concatenate(([0.0], np.cumsum(data)))
        return running[1:] - np.repeat(running[indptr[:-1]], np.diff(indptr))

    @cached_property
    def search_keys(self) -> np.ndarray:
        """Row index plus cumulative probability, one key per stored entry."""
        return np.repeat(np.arange(self.n_x), np.diff(self.probs.indptr)) + self.within_row_cumsum


def estimate_transitions(sessions: Sequence[Session], n_x: int) -> TransitionMatrix:
    """Maximum-likelihood P(next=j | current=i) from consecutive pairs."""
    if n_x < 1:
        raise DomainError(f"catalog size must be positive, got {n_x}")
    src: List[int] = []
    dst: List[int] = []
    for session in sessions:
        src.extend(session[:-1])
        dst.extend(session[1:])
    rows = np.asarray(src, dtype=np.int64)
    cols = np.asarray(dst, dtype=np.int64)
    if rows.size and (min(rows.min(), cols.min()) < 0 or max(rows.max(), cols.max()) >= n_x):
        raise DomainError(f"session holds an item outside catalog [0, {n_x})")

    counts = sparse.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n_x, n_x)).tocsr()
    counts.sum_duplicates()
    totals = np.asarray(counts.sum(axis=1)).ravel()
    inverse = np.divide(1.0, totals, out=np.zeros_like(totals), where=totals > 0)
    probs = sparse.diags(inverse) @ counts
    probs = sparse.csr_matrix(probs)
    probs.sort_indices()
    logger.debug("Estimated transitions over %d pairs, %d non-terminal rows", rows.size, int((totals > 0).sum()))
    return TransitionMatrix(probs=probs)


def _step(T: TransitionMatrix, current: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """
    One move for every walker; walkers on terminal rows get -1.

    Row entries are laid end to end on a single axis (row index + cumulative
    probability), so one searchsorted draws every walker's next item.
    """
    indptr, indices = T.probs.indptr, T.probs.indices
    within, keys = T.within_row_cumsum, T.search_keys

    start, end = indptr[current], indptr[current + 1]
    alive = end > start
    u = rng.random(len(current))
    out = np.full(len(current), -1, dtype=np.int64)
    if alive.any():
        totals = within[end[alive] - 1]
        pos = np.searchsorted(keys, current[alive] + u[alive] * totals, side="right")
        pos = np.clip(pos, start[alive], end[alive] - 1)
        out[alive] = indices[pos]
    return out


def visit_counts(T: TransitionMatrix, cart: Sequence[int], seed: int, n_walks: int = 500) -> np.ndarray:
    """
    States visited at both steps of n_walks two-step walks from every cart item.

    Each cart position draws from its own generator seeded by
    (seed, position, item), so counts do not depend on how carts are batched.
    """
    counts = np.zeros(T.n_x, dtype=np.int64)
    for position, item in enumerate(cart):
        if item < 0 or item >= T.n_x:
            raise DomainError(f"cart item {item} outside catalog [0, {T.n_x})")
        rng = np.random.default_rng([seed, position, int(item)])
        walkers = np.full(n_walks, int(item), dtype=np.int64)
        for _ in range(WALK_STEPS):
            walkers = _step(T, walkers, rng)
            walkers = walkers[walkers >= 0]
            if walkers.size == 0:
                break
            counts += np.bincount(walkers, minlength=T.n_x)
    return counts


def random_walk_recommend(
    T: TransitionMatrix,
    cart: Sequence[int],
    k: int,
    seed: int,
    n_walks: int = 500,
) -> List[int]:
    """The k most visited items outside the cart; ties go to the lower index."""
    if len(cart) == 0:
        raise ArgumentError("cart must contain at least one item")
    if k < 1:
        raise ArgumentError(f"k must be positive, got {k}")
    counts = visit_counts(T, cart, seed, n_walks)
    counts[np.asarray(cart, dtype=np.int64)] = 0
    order = np.argsort(-counts, kind="stable")
    visited = order[counts[order] > 0]
    return [int(i) for i in visited[:k]]


class MarkovRecommender:
    def __init__(self, T: TransitionMatrix, seed: int = 0, n_walks: int = 500):
        self.T = T
        self.seed = seed
        self.n_walks = n_walks

    def recommend(self, prefix: Sequence[int], k: int) -> List[int]:
        return random_walk_recommend(self.T, prefix, k, self.seed, self.n_walks)

    __call__ = recommend


def export_transitions(path: Path, T: TransitionMatrix, item_ids: Optional[Sequence[str]] = None) -> Path:
    """CSV triples from,to,prob; external ids when an id-map is given."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    coo = T.probs.tocoo()
    order = np.lexsort((coo.col, coo.row))
    src, dst = coo.row[order], coo.col[order]
    if item_ids is not None:
        ids = np.asarray(item_ids, dtype=object)
        src, dst = ids[src], ids[dst]
    frame = pd.DataFrame({"from": src, "to": dst, "prob": coo.data[order]})
    frame.to_csv(path, index=False, lineterminator="\n")
    return path
