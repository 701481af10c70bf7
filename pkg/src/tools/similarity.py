from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Sequence, Union

import numpy as np
import pandas as pd

from ..errors import ArgumentError, DegenerateInputError, DomainError, SizeError
from ..state import MAX_SESSION_LENGTH, MarketCentroid, MarketDataset, Session, SimilaritySettings, TrainConfig
from .dataset import align_catalogs
from .nn_model import train


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GlobalEmbedding:
    """Embedding layer W1 of a model trained on the pooled markets, over their union catalog."""

    W1: np.ndarray
    item_ids: List[str]

    @property
    def n1(self) -> int:
        return int(self.W1.shape[0])

    @property
    def n_x(self) -> int:
        return int(self.W1.shape[1])

    @property
    def version(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.W1, dtype=np.float64).tobytes()).hexdigest()

    def index_map(self) -> Dict[str, int]:
        return {ext: i for i, ext in enumerate(self.item_ids)}


def global_embedding(markets: Sequence[MarketDataset], config: TrainConfig) -> GlobalEmbedding:
    """
    Train one network on every market's sessions and keep only its embedding.

    Markets are first remapped onto the union id-map, so an item sold in
    several markets has a single column.
    """
    if len(markets) == 0:
        raise SizeError("global embedding needs at least one market")
    aligned = align_catalogs(markets)
    pooled: List[Session] = [s for market in aligned for s in market.sessions]
    if not pooled:
        raise SizeError("global embedding needs at least one session across the markets")
    n_x = aligned[0].catalog_size
    params, _ = train(pooled, n_x, config)
    embedding = GlobalEmbedding(W1=params.W1.copy(), item_ids=list(aligned[0].item_ids))
    logger.info(
        "Global embedding over %d markets: %d pooled sessions, union catalog %d, version %s",
        len(markets),
        len(pooled),
        n_x,
        embedding.version[:12],
    )
    return embedding


def _to_embedding_space(embedding: GlobalEmbedding, market: MarketDataset) -> List[Session]:
    if list(market.item_ids) == embedding.item_ids:
        return market.sessions
    index = embedding.index_map()
    try:
        lookup = np.asarray([index[ext] for ext in market.item_ids], dtype=np.int64)
    except KeyError as exc:
        raise DomainError(f"market '{market.market_id}' has item {exc} outside the embedding catalog") from exc
    return [lookup[np.asarray(s, dtype=np.int64)].tolist() for s in market.sessions]


def purchase_vector(embedding: GlobalEmbedding, session: Sequence[int], max_len: int = MAX_SESSION_LENGTH) -> np.ndarray:
    """Concatenated item embeddings, zero blocks after the last item."""
    if not 1 <= len(session) <= max_len:
        raise SizeError(f"session length must be in [1, {max_len}], got {len(session)}")
    items = np.asarray(session, dtype=np.int64)
    if items.min() < 0 or items.max() >= embedding.n_x:
        raise DomainError(f"session holds an item outside catalog [0, {embedding.n_x})")
    h = np.zeros(max_len * embedding.n1)
    h[: len(items) * embedding.n1] = embedding.W1[:, items].T.ravel()
    return h


def market_centroid(
    embedding: GlobalEmbedding,
    market: MarketDataset,
    n: int = 850,
    seed: int = 0,
    max_len: int = MAX_SESSION_LENGTH,
) -> MarketCentroid:
    """
    Mean purchase vector of n sessions drawn without replacement.

    `market` should hold training sessions only; markets smaller than n
    contribute all of theirs and n_used records how many.
    """
    sessions = _to_embedding_space(embedding, market)
    if len(sessions) == 0:
        raise SizeError(f"market '{market.market_id}' has no sessions to build a centroid from")
    rng = np.random.default_rng(seed)
    n_used = min(n, len(sessions))
    chosen = rng.choice(len(sessions), size=n_used, replace=False)
    vectors = np.stack([purchase_vector(embedding, sessions[i][:max_len], max_len) for i in chosen])
    return MarketCentroid(
        market_id=market.market_id,
        p_bar=vectors.mean(axis=0),
        n_used=n_used,
        embedding_hash=embedding.version,
    )


def cosine_similarity(a: Union[MarketCentroid, np.ndarray], b: Union[MarketCentroid, np.ndarray]) -> float:
    if isinstance(a, MarketCentroid) and isinstance(b, MarketCentroid):
        if a.embedding_hash and b.embedding_hash and a.embedding_hash != b.embedding_hash:
            raise ArgumentError(
                f"centroids of '{a.market_id}' and '{b.market_id}' come from different embeddings"
            )
    u = a.p_bar if isinstance(a, MarketCentroid) else np.asarray(a, dtype=np.float64)
    v = b.p_bar if isinstance(b, MarketCentroid) else np.asarray(b, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine similarity is undefined for a zero-norm centroid")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def similarity_matrix(centroids: Sequence[MarketCentroid]) -> pd.DataFrame:
    """Pairwise cosine similarities, labelled by market id on both axes."""
    if len(centroids) < 2:
        raise SizeError(f"a similarity matrix needs at least 2 markets, got {len(centroids)}")
    ids = [c.market_id for c in centroids]
    values = np.zeros((len(ids), len(ids)))
    for i, a in enumerate(centroids):
        values[i, i] = 1.0
        for j in range(i + 1, len(centroids)):
            values[i, j] = values[j, i] = cosine_similarity(a, centroids[j])
    return pd.DataFrame(values, index=ids, columns=ids)


def label_similarity(value: float, settings: SimilaritySettings) -> str:
    if value > settings.similar_threshold:
        return "similar"
    if value < settings.dissimilar_threshold:
        return "dissimilar"
    return "neutral"


def rank_sources(
    matrix: Union[pd.DataFrame, Mapping[str, Mapping[str, float]]],
    target: str,
    settings: SimilaritySettings = SimilaritySettings(),
) -> pd.DataFrame:
    """Candidate sources for `target`, most similar first, with similar/dissimilar/neutral labels."""
    frame = matrix if isinstance(matrix, pd.DataFrame) else pd.DataFrame(matrix)
    if target not in frame.index:
        raise ArgumentError(f"unknown target market '{target}'")
    column = frame.loc[target].drop(labels=[target])
    ranked = pd.DataFrame({"market_id": column.index, "similarity": column.to_numpy(dtype=np.float64)})
    ranked = ranked.sort_values(["similarity", "market_id"], ascending=[False, True], kind="stable")
    ranked["label"] = [label_similarity(v, settings) for v in ranked["similarity"]]
    return ranked.reset_index(drop=True)
