from __future__ import annotations

import logging
from collections import defaultdict
from typing import Dict, List, Tuple

from ..config import resolve_output_dir
from ..state import (
    AblationResult,
    AblationRow,
    ExperimentConfig,
    ExperimentState,
    MarketCentroid,
    RankedSource,
    SimilarityReport,
    TransferResult,
    partition_key,
)
from ..tools.dataset import training_dataset
from ..tools.report_tools import (
    emit_report,
    plot_ablation_overview,
    plot_popularity_profiles,
    read_similarity_csv,
    write_timing_log,
)
from ..tools.similarity import (
    global_embedding,
    label_similarity,
    market_centroid,
    rank_sources,
    similarity_matrix,
)
from .training import transfer_pairs


logger = logging.getLogger(__name__)

CurveKey = Tuple[str, str, int]


def _curves(state: ExperimentState) -> Dict[CurveKey, AblationResult]:
    config = state["config"]
    grouped: Dict[CurveKey, List[AblationRow]] = defaultdict(list)
    for outcome in state.get("rows", []):
        grouped[(outcome.market_id, outcome.eval_market_id, outcome.seed)].append(outcome.row)
    return {
        key: AblationResult(
            market_id=key[0],
            eval_market_id=key[1],
            seed=key[2],
            model=config.model,
            config=config,
            rows=sorted(rows, key=lambda r: r.fraction),
        )
        for key, rows in grouped.items()
    }


def collect_ablation_node(state: ExperimentState) -> Dict[str, List[AblationResult]]:
    """
    Fan-in for the per-fraction jobs.

    Job outcomes arrive in completion order through the `rows` reducer; this
    regroups them per (market, seed) in config order with ascending fractions.
    """
    config = state["config"]
    curves = _curves(state)
    results = [curves[(s.market_id, s.market_id, seed)] for s in config.markets for seed in config.seeds]
    return {"ablation_results": results}


def _ranked_sources(config: ExperimentConfig) -> Tuple[Dict[str, float], Dict[str, str]]:
    """Similarity and label of each configured source, most similar first; empty without a matrix."""
    if not config.similarity_csv:
        return {}, {}
    target = config.target
    ranked = rank_sources(read_similarity_csv(config.similarity_csv), target, config.similarity)
    ranked = ranked[ranked["market_id"].isin(config.sources)]
    similarity = {m: float(v) for m, v in zip(ranked["market_id"], ranked["similarity"])}
    labels = dict(zip(ranked["market_id"], ranked["label"]))
    if target in config.sources:
        # a target listed as its own source ranks first at self-similarity 1
        similarity = {target: 1.0, **similarity}
        labels = {target: label_similarity(1.0, config.similarity), **labels}
    missing = [s for s in config.sources if s not in similarity]
    if missing:
        logger.warning("No similarity to %s for source(s) %s; they go last", target, ", ".join(missing))
    return similarity, labels


def collect_transfer_node(state: ExperimentState) -> Dict[str, List[TransferResult]]:
    config = state["config"]
    curves = _curves(state)
    target = config.target
    similarity, labels = _ranked_sources(config)
    order = list(similarity) + [s for s in dict.fromkeys(config.sources) if s not in similarity]

    results: List[TransferResult] = []
    for seed in config.seeds:
        by_source = {train: curves[(train, evaluated, seed)] for train, evaluated in transfer_pairs(state)}
        results.append(
            TransferResult(
                target=target,
                seed=seed,
                baseline=curves[(target, target, seed)],
                sources=[by_source[s] for s in order],
                source_similarity=similarity,
                source_labels=labels,
            )
        )
    return {"transfer_results": results}


def embedding_node(state: ExperimentState) -> Dict[str, object]:
    """Trains the pooled network on every market's training split and keeps W1."""
    config = state["config"]
    seed = config.seeds[0]
    training = [
        training_dataset(market, state["partitions"][partition_key(market_id, seed)])
        for market_id, market in state["markets"].items()
    ]
    return {"embedding": global_embedding(training, config.train_config(seed))}


def centroids_node(state: ExperimentState) -> Dict[str, Dict[str, MarketCentroid]]:
    config = state["config"]
    seed = config.seeds[0]
    embedding = state["embedding"]
    centroids: Dict[str, MarketCentroid] = {}
    for market_id, market in state["markets"].items():
        training = training_dataset(market, state["partitions"][partition_key(market_id, seed)])
        centroids[market_id] = market_centroid(
            embedding,
            training,
            n=config.similarity.n_centroid,
            seed=seed,
            max_len=config.similarity.max_len,
        )
        if centroids[market_id].n_used < config.similarity.n_centroid:
            logger.warning(
                "Market %s has only %d training sessions for its centroid (wanted %d)",
                market_id,
                centroids[market_id].n_used,
                config.similarity.n_centroid,
            )
    return {"centroids": centroids}


def similarity_matrix_node(state: ExperimentState) -> Dict[str, SimilarityReport]:
    config = state["config"]
    centroids = [state["centroids"][spec.market_id] for spec in config.markets]
    matrix = similarity_matrix(centroids)
    rankings = {}
    for market_id in matrix.index:
        ranked = rank_sources(matrix, market_id, config.similarity)
        rankings[market_id] = [RankedSource(**record) for record in ranked.to_dict("records")]
    report = SimilarityReport(
        market_ids=list(matrix.index),
        matrix=matrix.to_numpy().tolist(),
        n_used={c.market_id: c.n_used for c in centroids},
        embedding_hash=state["embedding"].version,
        seed=config.seeds[0],
        config=config,
        rankings=rankings,
    )
    return {"similarity_report": report}


def emit_node(state: ExperimentState) -> Dict[str, List[str]]:
    """Writes every collected result; the only node that touches report files."""
    config = state["config"]
    output_dir = resolve_output_dir(config.output_dir)
    formats = ["json", "csv"] + (["svg"] if config.plots else [])

    kind = state.get("kind", "ablation")
    if kind == "similarity":
        results = [state["similarity_report"]]
    elif kind == "transfer":
        results = state["transfer_results"]
    else:
        results = state["ablation_results"]
    written = emit_report(results, output_dir, formats)

    if kind == "ablation":
        written.append(write_timing_log(output_dir / "timing.log", results))
        if config.plots:
            profiles = {m_id: m.popularity for m_id, m in state["markets"].items()}
            written.append(plot_popularity_profiles(output_dir / "popularity-profiles.svg", profiles, config))
            if len(config.markets) > 1:
                for seed in config.seeds:
                    curves = [r for r in results if r.seed == seed]
                    path = output_dir / f"ablation-overview-seed{seed}-{config.model}.svg"
                    written.append(plot_ablation_overview(path, curves))
    elif kind == "transfer":
        curves = [r.baseline for r in results] + [s for r in results for s in r.sources]
        written.append(write_timing_log(output_dir / "timing.log", curves))
    return {"written": [str(p) for p in written]}
