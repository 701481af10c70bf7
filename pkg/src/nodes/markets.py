from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from ..errors import ConfigError, DataError
from ..state import DataPartition, ExperimentConfig, ExperimentState, MarketDataset, MarketSpec, partition_key
from ..tools.dataset import align_catalogs, load_id_map, load_market, partition
from ..tools.synthgen import LatentStructure, derive_related_market, generate_market


logger = logging.getLogger(__name__)


def _spec_order(config: ExperimentConfig) -> List[MarketSpec]:
    """Base markets before the markets derived from them."""
    done: Dict[str, MarketSpec] = {}
    pending = list(config.markets)
    while pending:
        progressed = False
        for spec in list(pending):
            if spec.derive_from is None or spec.derive_from in done:
                done[spec.market_id] = spec
                pending.remove(spec)
                progressed = True
        if not progressed:
            raise ConfigError(f"circular derive_from among markets: {[s.market_id for s in pending]}")
    return list(done.values())


def _build_market(
    spec: MarketSpec, latents: Dict[str, LatentStructure]
) -> Tuple[MarketDataset, Optional[LatentStructure]]:
    if spec.path is not None:
        item_ids = load_id_map(Path(spec.id_map)) if spec.id_map else None
        return load_market(spec.market_id, Path(spec.path), spec.format, item_ids), None

    synthetic = spec.synthetic.model_copy(update={"market_id": spec.market_id})
    if spec.derive_from is None:
        return generate_market(synthetic)
    base = latents.get(spec.derive_from)
    if base is None:
        raise ConfigError(f"market '{spec.market_id}' derives from '{spec.derive_from}', which is not synthetic")
    return derive_related_market(base, spec.perturbation, synthetic)


def load_markets_node(state: ExperimentState) -> Dict[str, object]:
    """
    Loads or generates every configured market before any training starts.

    Missing files fail here with DataError, so no partial experiment runs.
    """
    config = state["config"]
    for spec in config.markets:
        if spec.path is not None and not Path(spec.path).exists():
            raise DataError(f"market '{spec.market_id}': data file not found: {spec.path}")
        if spec.id_map is not None and not Path(spec.id_map).exists():
            raise DataError(f"market '{spec.market_id}': id-map not found: {spec.id_map}")

    built: Dict[str, MarketDataset] = {}
    latents: Dict[str, LatentStructure] = {}
    for spec in _spec_order(config):
        market, latent = _build_market(spec, latents)
        built[spec.market_id] = market
        if latent is not None:
            latents[spec.market_id] = latent

    ordered = [built[spec.market_id] for spec in config.markets]
    if config.align_catalogs:
        ordered = align_catalogs(ordered)
        logger.info("Aligned %d markets onto a union catalog of %d items", len(ordered), ordered[0].catalog_size)
    return {"markets": {m.market_id: m for m in ordered}, "latents": latents}


def partition_node(state: ExperimentState) -> Dict[str, Dict[str, DataPartition]]:
    """Splits every market once per seed; all fractions share that split's validation set."""
    config = state["config"]
    partitions: Dict[str, DataPartition] = {}
    for market_id, market in state["markets"].items():
        for seed in config.seeds:
            partitions[partition_key(market_id, seed)] = partition(market.sessions, seed)
    logger.info("Partitioned %d markets for seeds %s", len(state["markets"]), config.seeds)
    return {"partitions": partitions}
