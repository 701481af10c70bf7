from __future__ import annotations

import logging
import time
from pathlib import Path
from typing import Dict, List, Tuple

from langgraph.types import Send

from ..config import resolve_output_dir
from ..errors import ConfigError
from ..state import AblationRow, ExperimentState, FractionTask, JobOutcome, partition_key
from ..tools.dataset import compute_popularity, validation_hash
from ..tools.markov import MarkovRecommender, estimate_transitions
from ..tools.metrics import Recommender, evaluate
from ..tools.nn_model import LstmRecommender, train, write_loss_trace


logger = logging.getLogger(__name__)

TRAIN_NODE = "train_fraction"


def _task(state: ExperimentState, train_market: str, eval_market: str, seed: int, fraction: float) -> Send:
    payload: FractionTask = {
        "config": state["config"],
        "market": state["markets"][train_market],
        "eval_market": state["markets"][eval_market],
        "partition": state["partitions"][partition_key(train_market, seed)],
        "eval_partition": state["partitions"][partition_key(eval_market, seed)],
        "fraction": fraction,
        "seed": seed,
    }
    return Send(TRAIN_NODE, payload)


def fan_out_ablation(state: ExperimentState) -> List[Send]:
    """One job per (market, seed, fraction), each trained and evaluated on its own market."""
    config = state["config"]
    return [
        _task(state, spec.market_id, spec.market_id, seed, fraction)
        for spec in config.markets
        for seed in config.seeds
        for fraction in config.fractions
    ]


def transfer_pairs(state: ExperimentState) -> List[Tuple[str, str]]:
    """(train market, eval market) pairs: the target baseline first, then each distinct source."""
    config = state["config"]
    target = config.target
    if target is None:
        raise ConfigError("transfer needs a 'target' market")
    if not config.sources:
        raise ConfigError("transfer needs at least one source market")
    target_ids = state["markets"][target].item_ids
    pairs = [(target, target)]
    for source in config.sources:
        if state["markets"][source].item_ids != target_ids:
            raise ConfigError(
                f"source '{source}' and target '{target}' do not share an id-map; set align_catalogs or pass id_map files"
            )
        if (source, target) not in pairs:
            pairs.append((source, target))
    return pairs


def fan_out_transfer(state: ExperimentState) -> List[Send]:
    config = state["config"]
    return [
        _task(state, train_market, eval_market, seed, fraction)
        for train_market, eval_market in transfer_pairs(state)
        for seed in config.seeds
        for fraction in config.fractions
    ]


def _trace_name(task: FractionTask) -> str:
    market, eval_market = task["market"].market_id, task["eval_market"].market_id
    return f"traces/{market}-on-{eval_market}-seed{task['seed']}-f{task['fraction']:.1f}.csv"


def train_fraction_node(task: FractionTask) -> Dict[str, List[JobOutcome]]:
    """
    Trains a fresh model on the cumulative buckets of one fraction and scores
    it on the evaluation market's fixed validation set.

    Novelty uses popularity from the evaluation market's full training split.
    """
    config, seed, fraction = task["config"], task["seed"], task["fraction"]
    market, eval_market = task["market"], task["eval_market"]
    sessions = task["partition"].for_fraction(fraction)
    validation = task["eval_partition"].validation
    n_x = market.catalog_size

    logger.info(
        "Job start: %s on %s, seed %d, fraction %.1f (%d sessions)",
        config.model,
        market.market_id,
        seed,
        fraction,
        len(sessions),
    )
    started = time.perf_counter()

    loss_trace: List[float] = []
    trace_file = None
    recommender: Recommender
    if config.model == "markov":
        recommender = MarkovRecommender(estimate_transitions(sessions, n_x), seed=seed, n_walks=config.markov.n_walks)
    else:
        params, loss_trace = train(sessions, n_x, config.train_config(seed))
        recommender = LstmRecommender(params)
        trace_file = _trace_name(task)
        write_loss_trace(resolve_output_dir(config.output_dir) / Path(trace_file), loss_trace)

    popularity = compute_popularity(task["eval_partition"].training, eval_market.catalog_size)
    metrics = evaluate(recommender, validation, config.k, popularity, eval_market.catalog_size)
    elapsed = time.perf_counter() - started

    logger.info(
        "Job done: %s on %s -> %s, seed %d, fraction %.1f: acc=%.4f cov=%.4f nov=%.4f (%.1fs)",
        config.model,
        market.market_id,
        eval_market.market_id,
        seed,
        fraction,
        metrics.top_k_accuracy,
        metrics.catalog_coverage,
        metrics.novelty,
        elapsed,
    )
    row = AblationRow(
        fraction=fraction,
        n_train_sessions=len(sessions),
        metrics=metrics,
        loss_trace=loss_trace,
        loss_trace_file=trace_file,
        validation_hash=validation_hash(validation),
        wall_clock=elapsed,
    )
    outcome = JobOutcome(market_id=market.market_id, eval_market_id=eval_market.market_id, seed=seed, row=row)
    return {"rows": [outcome]}
