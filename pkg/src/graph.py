from __future__ import annotations

import logging
from typing import Any, Dict, List

from langgraph.graph import END, StateGraph

from .nodes.markets import load_markets_node, partition_node
from .nodes.reporting import (
    centroids_node,
    collect_ablation_node,
    collect_transfer_node,
    embedding_node,
    emit_node,
    similarity_matrix_node,
)
from .nodes.training import TRAIN_NODE, fan_out_ablation, fan_out_transfer, train_fraction_node
from .errors import ConfigError
from .state import AblationResult, ExperimentConfig, ExperimentState, SimilarityReport, TransferResult


logger = logging.getLogger(__name__)


def _fraction_graph(fan_out, collect) -> StateGraph[ExperimentState]:
    """
    Shared topology of the ablation and transfer protocols.

      load_markets -> partition
        └─(Send per job)─> train_fraction ... train_fraction
                              └─> collect -> emit -> END

    Jobs run in parallel; the reducer-backed `rows` field gathers them.
    """
    graph = StateGraph(ExperimentState)

    graph.add_node("load_markets", load_markets_node)
    graph.add_node("partition", partition_node)
    graph.add_node(TRAIN_NODE, train_fraction_node)
    graph.add_node("collect", collect)
    graph.add_node("emit", emit_node)

    graph.set_entry_point("load_markets")
    graph.add_edge("load_markets", "partition")

    # Map step: one Send per (market, seed, fraction) job
    graph.add_conditional_edges("partition", fan_out, [TRAIN_NODE])

    # Reduce step
    graph.add_edge(TRAIN_NODE, "collect")
    graph.add_edge("collect", "emit")
    graph.add_edge("emit", END)
    return graph


def build_ablation_graph() -> StateGraph[ExperimentState]:
    return _fraction_graph(fan_out_ablation, collect_ablation_node)


def build_transfer_graph() -> StateGraph[ExperimentState]:
    return _fraction_graph(fan_out_transfer, collect_transfer_node)


def build_similarity_graph() -> StateGraph[ExperimentState]:
    """load_markets -> partition -> embedding -> centroids -> matrix -> emit."""
    graph = StateGraph(ExperimentState)
    graph.add_node("load_markets", load_markets_node)
    graph.add_node("partition", partition_node)
    graph.add_node("embedding", embedding_node)
    graph.add_node("centroids", centroids_node)
    graph.add_node("matrix", similarity_matrix_node)
    graph.add_node("emit", emit_node)

    graph.set_entry_point("load_markets")
    graph.add_edge("load_markets", "partition")
    graph.add_edge("partition", "embedding")
    graph.add_edge("embedding", "centroids")
    graph.add_edge("centroids", "matrix")
    graph.add_edge("matrix", "emit")
    graph.add_edge("emit", END)
    return graph


GRAPH_BUILDERS = {
    "ablation": build_ablation_graph,
    "transfer": build_transfer_graph,
    "similarity": build_similarity_graph,
}


def get_compiled_graph(kind: str = "ablation"):
    """Convenience helper for running one experiment protocol."""
    return GRAPH_BUILDERS[kind]().compile()


def _invoke(kind: str, config: ExperimentConfig) -> Dict[str, Any]:
    initial_state: ExperimentState = {
        "config": config,
        "kind": kind,
        "markets": {},
        "latents": {},
        "partitions": {},
        "rows": [],
        "written": [],
    }
    logger.info("Running %s experiment '%s' (%d markets, seeds %s)", kind, config.name, len(config.markets), config.seeds)
    return get_compiled_graph(kind).invoke(
        initial_state,
        config={"max_concurrency": config.max_workers, "recursion_limit": 50},
    )


def run_ablation(config: ExperimentConfig) -> List[AblationResult]:
    """One AblationResult per (market, seed), each with a row per fraction."""
    return _invoke("ablation", config)["ablation_results"]


def run_transfer(config: ExperimentConfig) -> List[TransferResult]:
    """Baseline (target on target) plus one curve per source, all scored on the target's validation set."""
    if config.target is None or not config.sources:
        raise ConfigError("transfer needs a 'target' and at least one entry in 'sources'")
    return _invoke("transfer", config)["transfer_results"]


def run_similarity_study(config: ExperimentConfig) -> SimilarityReport:
    if len(config.markets) < 2:
        raise ConfigError("a similarity study needs at least 2 markets")
    return _invoke("similarity", config)["similarity_report"]
