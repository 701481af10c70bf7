import operator
from typing import Annotated, Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing_extensions import TypedDict


Session = List[int]

N_BUCKETS = 10
MAX_SESSION_LENGTH = 64
DEFAULT_FRACTIONS = [round(0.1 * i, 1) for i in range(1, N_BUCKETS + 1)]


class MarketDataset(BaseModel):
    """One market: its fixed catalog, cart sessions and item popularity."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    market_id: str = Field(..., description="Market label, e.g. 'SE' or 'synthetic-a'.")
    catalog_size: int = Field(..., ge=1, description="n_x, the number of catalog items.")
    sessions: List[Session] = Field(
        default_factory=list,
        description="Sessions as dense catalog indices in cart order.",
    )
    popularity: np.ndarray = Field(..., description="Relative popularity p(x_i) per catalog index.")
    item_ids: List[str] = Field(
        ...,
        description="External item id for every dense index (the id-map, index -> external id).",
    )

    @model_validator(mode="after")
    def _check_catalog(self) -> "MarketDataset":
        if len(self.item_ids) != self.catalog_size:
            raise ValueError(
                f"item_ids has {len(self.item_ids)} entries for a catalog of {self.catalog_size}"
            )
        if self.popularity.shape != (self.catalog_size,):
            raise ValueError("popularity must have one entry per catalog item")
        for session in self.sessions:
            for item in session:
                if item < 0 or item >= self.catalog_size:
                    raise ValueError(f"item index {item} outside catalog of {self.catalog_size}")
        return self


class DataPartition(BaseModel):
    """Fixed validation split plus ten equally sized training buckets."""

    seed: int
    validation: List[Session]
    buckets: List[List[Session]] = Field(..., min_length=N_BUCKETS, max_length=N_BUCKETS)

    def cumulative(self, j: int) -> List[Session]:
        """Concatenation of buckets 1..j (1-based, as in the 10%..100% protocol)."""
        if not 1 <= j <= N_BUCKETS:
            raise ValueError(f"bucket count must be in 1..{N_BUCKETS}, got {j}")
        out: List[Session] = []
        for bucket in self.buckets[:j]:
            out.extend(bucket)
        return out

    def for_fraction(self, fraction: float) -> List[Session]:
        return self.cumulative(int(round(fraction * N_BUCKETS)))

    @property
    def training(self) -> List[Session]:
        return self.cumulative(N_BUCKETS)


class TrainConfig(BaseModel):
    loss: Literal["cross-entropy", "bpr"] = "cross-entropy"
    batch_size: int = Field(64, ge=1)
    epochs: int = Field(25, ge=1)
    neg_samples: int = Field(1024, ge=1, description="|N_S|, negatives per prediction step (bpr only).")
    lr: float = Field(1e-3, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    n1: int = Field(20, ge=1, description="Embedding dimension.")
    n2: int = Field(50, ge=1, description="LSTM output units.")
    seed: int = 0
    progress: bool = False


class SyntheticMarketConfig(BaseModel):
    market_id: str = "synthetic"
    n_x: int = Field(500, ge=2)
    n_sessions: int = Field(50000, ge=1)
    zipf_s: float = Field(1.0, ge=0.0, description="Popularity concentration of the start distribution.")
    temperature: float = Field(0.5, gt=0.0, description="Lower means a more deterministic next item.")
    length_dist: float = Field(
        0.35, gt=0.0, le=1.0, description="Geometric parameter of the session length, truncated to [2, 64]."
    )
    popularity_coupling: float = Field(
        1.0, ge=0.0, description="Weight of log-popularity added to the latent transition logits."
    )
    seed: int = 0


class EvaluationEvent(BaseModel):
    prefix: List[int]
    target: int
    recs: List[int]

    @field_validator("recs")
    @classmethod
    def _distinct(cls, recs: List[int]) -> List[int]:
        if len(set(recs)) != len(recs):
            raise ValueError("recommendations must be distinct")
        return recs


class MetricsReport(BaseModel):
    top_k_accuracy: float = Field(..., ge=0.0, le=1.0)
    catalog_coverage: float = Field(..., ge=0.0, le=1.0)
    novelty: float = Field(..., ge=0.0)
    k: int = Field(..., ge=1)
    n_events: int = Field(..., gt=0)
    n_short_events: int = Field(0, ge=0, description="Events with fewer than k recs, left out of novelty.")


class MarketCentroid(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    market_id: str
    p_bar: np.ndarray
    n_used: int = Field(..., ge=1)
    embedding_hash: str = ""


class MarketSpec(BaseModel):
    """Where a market comes from: a data file, or the synthetic generator."""

    market_id: str
    path: Optional[str] = None
    format: Literal["native-csv", "yoochoose-buys"] = "native-csv"
    id_map: Optional[str] = Field(default=None, description="id-map CSV fixing the catalog (and its order) of a file market.")
    synthetic: Optional[SyntheticMarketConfig] = None
    derive_from: Optional[str] = Field(
        default=None, description="market_id of a synthetic market whose latent structure is perturbed."
    )
    perturbation: float = Field(0.0, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _one_source(self) -> "MarketSpec":
        if (self.path is None) == (self.synthetic is None):
            raise ValueError(f"market '{self.market_id}' needs exactly one of 'path' or 'synthetic'")
        if self.derive_from is not None and self.synthetic is None:
            raise ValueError(f"market '{self.market_id}' derives from another market but has no synthetic config")
        return self


class MarkovSettings(BaseModel):
    n_walks: int = Field(500, ge=1)


class SimilaritySettings(BaseModel):
    n_centroid: int = Field(850, ge=1)
    max_len: int = Field(MAX_SESSION_LENGTH, ge=2)
    similar_threshold: float = 0.85
    dissimilar_threshold: float = 0.65


class ExperimentConfig(BaseModel):
    name: str = "experiment"
    markets: List[MarketSpec] = Field(..., min_length=1)
    target: Optional[str] = Field(default=None, description="Transfer target market_id.")
    sources: List[str] = Field(default_factory=list, description="Transfer source market_ids.")
    fractions: List[float] = Field(default_factory=lambda: list(DEFAULT_FRACTIONS))
    model: Literal["lstm-ce", "lstm-bpr", "markov"] = "lstm-ce"
    k: int = Field(4, ge=1)
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)
    output_dir: str = "experiment"
    train: TrainConfig = Field(default_factory=TrainConfig)
    markov: MarkovSettings = Field(default_factory=MarkovSettings)
    similarity: SimilaritySettings = Field(default_factory=SimilaritySettings)
    plots: bool = True
    max_workers: int = Field(1, ge=1)
    align_catalogs: bool = Field(
        False, description="Remap every market onto the union id-map before training (file-based transfer)."
    )
    similarity_csv: Optional[str] = Field(
        default=None, description="Similarity matrix CSV from an earlier study, used to rank transfer sources."
    )

    @field_validator("fractions")
    @classmethod
    def _tenths(cls, fractions: List[float]) -> List[float]:
        if not fractions:
            raise ValueError("fractions must not be empty")
        cleaned: List[float] = []
        for f in fractions:
            tenths = round(f * N_BUCKETS)
            if abs(f * N_BUCKETS - tenths) > 1e-9 or not 1 <= tenths <= N_BUCKETS:
                raise ValueError(f"fraction {f} is not one of 0.1, 0.2, ..., 1.0")
            cleaned.append(round(tenths / N_BUCKETS, 1))
        return sorted(set(cleaned))

    @model_validator(mode="after")
    def _known_markets(self) -> "ExperimentConfig":
        ids = [m.market_id for m in self.markets]
        if len(set(ids)) != len(ids):
            raise ValueError("market ids must be unique")
        for ref in [self.target, *self.sources]:
            if ref is not None and ref not in ids:
                raise ValueError(f"unknown market '{ref}'")
        for m in self.markets:
            if m.derive_from is not None and m.derive_from not in ids:
                raise ValueError(f"market '{m.market_id}' derives from unknown market '{m.derive_from}'")
        return self

    def train_config(self, seed: int) -> TrainConfig:
        loss = "bpr" if self.model == "lstm-bpr" else "cross-entropy"
        return self.train.model_copy(update={"loss": loss, "seed": seed})


class AblationRow(BaseModel):
    fraction: float
    n_train_sessions: int
    metrics: MetricsReport
    loss_trace: List[float] = Field(default_factory=list, description="Mean per-step training loss per epoch.")
    loss_trace_file: Optional[str] = None
    validation_hash: str
    wall_clock: float = Field(0.0, exclude=True, description="Seconds spent training and evaluating; logged, never serialized.")


class AblationResult(BaseModel):
    market_id: str = Field(..., description="Market whose sessions were used for training.")
    eval_market_id: str = Field(..., description="Market whose validation split was evaluated.")
    seed: int
    model: str
    config: ExperimentConfig
    rows: List[AblationRow] = Field(default_factory=list)

    @model_validator(mode="after")
    def _ascending(self) -> "AblationResult":
        fractions = [r.fraction for r in self.rows]
        if fractions != sorted(set(fractions)):
            raise ValueError("rows must have unique, ascending fractions")
        return self


class RankedSource(BaseModel):
    market_id: str
    similarity: float
    label: Literal["similar", "neutral", "dissimilar"]


class TransferResult(BaseModel):
    target: str
    seed: int
    baseline: AblationResult
    sources: List[AblationResult] = Field(default_factory=list)
    source_similarity: Dict[str, float] = Field(
        default_factory=dict, description="Cosine similarity of each source to the target, when computed."
    )
    source_labels: Dict[str, str] = Field(
        default_factory=dict, description="similar / neutral / dissimilar per source, from the similarity thresholds."
    )


class SimilarityReport(BaseModel):
    market_ids: List[str]
    matrix: List[List[float]]
    n_used: Dict[str, int]
    embedding_hash: str
    seed: int
    config: ExperimentConfig
    rankings: Dict[str, List[RankedSource]] = Field(
        default_factory=dict, description="Every other market ranked as a source for each market, most similar first."
    )


class JobOutcome(BaseModel):
    """One finished (train market, eval market, seed, fraction) job."""

    market_id: str
    eval_market_id: str
    seed: int
    row: AblationRow


class FractionTask(TypedDict):
    """Payload sent to one parallel train-and-evaluate job."""

    config: ExperimentConfig
    market: MarketDataset
    eval_market: MarketDataset
    partition: DataPartition
    eval_partition: DataPartition
    fraction: float
    seed: int


class ExperimentState(TypedDict, total=False):
    """
    Global LangGraph state for one experiment run.

    `rows` carries a reducer so parallel per-fraction jobs can append their
    outcomes without overwriting each other.
    """

    config: ExperimentConfig
    kind: Literal["ablation", "transfer", "similarity"]
    markets: Dict[str, MarketDataset]
    latents: Dict[str, object]
    partitions: Dict[str, DataPartition]

    rows: Annotated[List[JobOutcome], operator.add]

    ablation_results: List[AblationResult]
    transfer_results: List[TransferResult]

    embedding: object
    centroids: Dict[str, MarketCentroid]
    similarity_report: Optional[SimilarityReport]

    written: Annotated[List[str], operator.add]


def partition_key(market_id: str, seed: int) -> str:
    return f"{market_id}@{seed}"
