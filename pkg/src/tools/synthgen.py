from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from ..errors import ArgumentError, DataError
from ..state import MAX_SESSION_LENGTH, MarketDataset, Session, SyntheticMarketConfig
from .dataset import build_market, save_id_map, write_native_csv


logger = logging.getLogger(__name__)

ITEM_ID_FORMAT = "item-{:05d}"

# sub-streams of the market seed (fresh: of the base digest)
_LATENT_STREAM = 0
_SESSION_STREAM = 2
_FRESH_STREAM = 3


@dataclass(frozen=True)
class LatentStructure:
    """Ground-truth first-order structure behind a synthetic market."""

    transitions: np.ndarray  # n_x x n_x, rows sum to 1, strictly positive
    start: np.ndarray  # n_x

    @property
    def n_x(self) -> int:
        return int(self.start.shape[0])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.transitions, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(self.start, dtype=np.float64).tobytes())
        return h.hexdigest()


def item_ids(n_x: int) -> List[str]:
    return [ITEM_ID_FORMAT.format(i) for i in range(n_x)]


def zipf_weights(n_x: int, s: float) -> np.ndarray:
    ranks = np.arange(1, n_x + 1, dtype=np.float64)
    w = ranks ** (-s)
    return w / w.sum()


def _row_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    # tiny floor keeps every transition strictly positive at very low temperature
    probs = np.maximum(probs, np.finfo(np.float64).tiny)
    return probs / probs.sum(axis=1, keepdims=True)


def _draw_structure(config: SyntheticMarketConfig, seed: int, stream: int) -> LatentStructure:
    rng = np.random.default_rng([seed, stream])
    start = np.empty(config.n_x)
    start[rng.permutation(config.n_x)] = zipf_weights(config.n_x, config.zipf_s)
    noise = rng.standard_normal((config.n_x, config.n_x))
    logits = noise / config.temperature + config.popularity_coupling * np.log(start)[None, :]
    return LatentStructure(transitions=_row_softmax(logits), start=start)


def _sample_sessions(latent: LatentStructure, config: SyntheticMarketConfig) -> List[Session]:
    """Markov walks from the start distribution with geometric lengths cut to [2, 64]."""
    rng = np.random.default_rng([config.seed, _SESSION_STREAM])
    n, n_x = config.n_sessions, latent.n_x
    lengths = np.minimum(MAX_SESSION_LENGTH, 1 + rng.geometric(config.length_dist, size=n))
    walks = np.zeros((n, int(lengths.max())), dtype=np.int64)
    walks[:, 0] = rng.choice(n_x, size=n, p=latent.start)

    cumulative = np.cumsum(latent.transitions, axis=1)
    keys = (cumulative + np.arange(n_x)[:, None]).ravel()
    for t in range(1, walks.shape[1]):
        active = np.flatnonzero(lengths > t)
        current = walks[active, t - 1]
        u = rng.random(len(active))
        pos = np.searchsorted(keys, current + u * cumulative[current, -1], side="right")
        walks[active, t] = np.clip(pos - current * n_x, 0, n_x - 1)
    return [walks[i, : lengths[i]].tolist() for i in range(n)]


def _check(config: SyntheticMarketConfig) -> None:
    if config.n_x < 2 or config.n_sessions < 1 or config.temperature <= 0:
        raise ArgumentError(f"invalid synthetic market config: {config.model_dump()}")
    if not 0.0 < config.length_dist <= 1.0 or config.zipf_s < 0 or config.popularity_coupling < 0:
        raise ArgumentError(f"invalid synthetic market config: {config.model_dump()}")


def _market(config: SyntheticMarketConfig, latent: LatentStructure) -> MarketDataset:
    sessions = _sample_sessions(latent, config)
    market = build_market(config.market_id, sessions, item_ids(config.n_x))
    logger.info(
        "Generated market %s: %d sessions over %d items (tau=%g, zipf_s=%g)",
        config.market_id,
        len(sessions),
        config.n_x,
        config.temperature,
        config.zipf_s,
    )
    return market


def generate_market(config: SyntheticMarketConfig) -> Tuple[MarketDataset, LatentStructure]:
    _check(config)
    latent = _draw_structure(config, config.seed, _LATENT_STREAM)
    return _market(config, latent), latent


def alternative_structure(base: LatentStructure, config: SyntheticMarketConfig) -> LatentStructure:
    """
    The independent structure every market derived from `base` moves toward.

    Seeded from the base's digest, so a whole perturbation family lies on one
    line from base (eps=0) to this structure (eps=1).
    """
    return _draw_structure(config, int(base.digest()[:16], 16), _FRESH_STREAM)


def derive_related_market(
    base: LatentStructure, perturbation: float, config: SyntheticMarketConfig
) -> Tuple[MarketDataset, LatentStructure]:
    """
    Sessions from (1 - eps) * base + eps * fresh, rows renormalized.

    `fresh` is alternative_structure(base, config), shared by every market
    derived from the same base; config.seed only drives the sessions.
    """
    _check(config)
    if not 0.0 <= perturbation <= 1.0:
        raise ArgumentError(f"perturbation must be in [0, 1], got {perturbation}")
    if config.n_x != base.n_x:
        raise ArgumentError(f"derived market needs n_x={base.n_x}, config has {config.n_x}")

    if perturbation == 0.0:
        latent = base
    else:
        fresh = alternative_structure(base, config)
        transitions = (1.0 - perturbation) * base.transitions + perturbation * fresh.transitions
        start = (1.0 - perturbation) * base.start + perturbation * fresh.start
        latent = LatentStructure(
            transitions=transitions / transitions.sum(axis=1, keepdims=True),
            start=start / start.sum(),
        )
    return _market(config, latent), latent


def save_latent(path: Path, latent: LatentStructure) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        np.savez(f, transitions=latent.transitions, start=latent.start)
    return path


def load_latent(path: Path) -> LatentStructure:
    path = Path(path)
    if not path.exists():
        raise DataError(f"latent structure not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        return LatentStructure(transitions=archive["transitions"], start=archive["start"])


def write_market(
    directory: Path,
    market: MarketDataset,
    latent: LatentStructure,
    config: SyntheticMarketConfig,
    perturbation: float = 0.0,
    derived_from: Optional[str] = None,
) -> Path:
    """Native CSV, id-map, latent .npz and a manifest tying both to the config and seed."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = config.market_id
    write_native_csv(directory / f"{stem}.csv", market.sessions, market.item_ids)
    save_latent(directory / f"{stem}.latent.npz", latent)
    save_id_map(directory / f"{stem}.idmap.csv", market.item_ids)
    manifest = {
        "market_id": config.market_id,
        "config": config.model_dump(),
        "seed": config.seed,
        "latent_sha256": latent.digest(),
        "derived_from": derived_from,
        "perturbation": perturbation,
        "n_sessions": len(market.sessions),
        "sessions_file": f"{stem}.csv",
        "latent_file": f"{stem}.latent.npz",
        "id_map_file": f"{stem}.idmap.csv",
    }
    manifest_path = directory / f"{stem}.manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path
