from __future__ import annotations

import hashlib
import json
import logging
import re
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..errors import DataError, DomainError, ParseError, SizeError
from ..state import MAX_SESSION_LENGTH, N_BUCKETS, DataPartition, MarketDataset, Session


logger = logging.getLogger(__name__)

SessionFormat = Literal["native-csv", "yoochoose-buys"]

NATIVE_COLUMNS = ["session_id", "item_id"]
YOOCHOOSE_COLUMNS = ["session_id", "timestamp", "item_id", "price", "quantity"]
ID_MAP_COLUMNS = ["external_id", "index"]


def _pandas_line(exc: Exception) -> Optional[int]:
    match = re.search(r"line (\d+)", str(exc))
    return int(match.group(1)) if match else None


def _read_rows(path: Path, n_fields: int) -> pd.DataFrame:
    try:
        rows = pd.read_csv(
            path,
            header=None,
            dtype=str,
            keep_default_na=False,
            skip_blank_lines=True,
            encoding="utf-8",
            on_bad_lines="error",
        )
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=list(range(n_fields)))
    except pd.errors.ParserError as exc:
        raise ParseError(f"malformed row ({exc})", line=_pandas_line(exc), path=str(path)) from exc
    except UnicodeDecodeError as exc:
        raise ParseError(f"file is not UTF-8: {exc}", path=str(path)) from exc
    if rows.shape[1] != n_fields:
        raise ParseError(f"expected {n_fields} fields per row, found {rows.shape[1]}", line=1, path=str(path))
    return rows.fillna("")


def _drop_header(rows: pd.DataFrame) -> pd.DataFrame:
    if len(rows) and rows.iloc[0, 0].strip().lower() == "session_id":
        return rows.iloc[1:]
    return rows


def _check_required(rows: pd.DataFrame, required: Dict[int, str], path: Path, header_offset: int) -> None:
    for col, name in required.items():
        blank = rows[col].str.strip() == ""
        if blank.any():
            first = int(np.flatnonzero(blank.to_numpy())[0])
            raise ParseError(f"missing {name}", line=first + 1 + header_offset, path=str(path))


def load_sessions(
    path: Path,
    fmt: SessionFormat = "native-csv",
    item_ids: Optional[List[str]] = None,
) -> Tuple[List[Session], List[str]]:
    """
    Read purchase rows and group them into sessions of dense item indices.

    Returns (sessions, item_ids) where item_ids[index] is the external id.
    Passing an existing item_ids list extends that id-map instead of starting
    a new one, which keeps several markets on one shared catalog.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"session file not found: {path}")

    n_fields = len(NATIVE_COLUMNS) if fmt == "native-csv" else len(YOOCHOOSE_COLUMNS)
    raw = _read_rows(path, n_fields)
    rows = _drop_header(raw)
    header_offset = len(raw) - len(rows)
    rows = rows.reset_index(drop=True)

    ids: List[str] = list(item_ids) if item_ids is not None else []
    if rows.empty:
        return [], ids

    if fmt == "native-csv":
        _check_required(rows, {0: "session_id", 1: "item_id"}, path, header_offset)
        frame = pd.DataFrame({"session_id": rows[0].str.strip(), "item_id": rows[1].str.strip()})
        frame["order"] = np.arange(len(frame))
    elif fmt == "yoochoose-buys":
        _check_required(rows, {0: "session_id", 1: "timestamp", 2: "item_id"}, path, header_offset)
        stamps = pd.to_datetime(rows[1].str.strip(), errors="coerce", format="ISO8601", utc=True)
        if stamps.isna().any():
            first = int(np.flatnonzero(stamps.isna().to_numpy())[0])
            raise ParseError("timestamp is not ISO-8601", line=first + 1 + header_offset, path=str(path))
        frame = pd.DataFrame(
            {"session_id": rows[0].str.strip(), "item_id": rows[2].str.strip(), "order": stamps}
        )
    else:
        raise DataError(f"unknown session format '{fmt}'")

    index_of = {ext: i for i, ext in enumerate(ids)}
    first_seen = pd.unique(frame["session_id"])
    session_rank = {sid: r for r, sid in enumerate(first_seen)}
    frame["rank"] = frame["session_id"].map(session_rank)
    frame = frame.sort_values(["rank", "order"], kind="stable")

    sessions: List[Session] = []
    for _, group in frame.groupby("rank", sort=True):
        session: Session = []
        for ext in group["item_id"]:
            idx = index_of.get(ext)
            if idx is None:
                idx = len(ids)
                index_of[ext] = idx
                ids.append(ext)
            session.append(idx)
        sessions.append(session)

    logger.info("Loaded %d sessions over %d items from %s", len(sessions), len(ids), path)
    return sessions, ids


def preprocess(raw: Iterable[Sequence[int]]) -> List[Session]:
    """Drop single-item purchases and keep the first 64 items of longer ones."""
    out: List[Session] = []
    for session in raw:
        if len(session) < 2:
            continue
        out.append(list(session[:MAX_SESSION_LENGTH]))
    return out


def compute_popularity(sessions: Iterable[Sequence[int]], n_x: int) -> np.ndarray:
    """Purchase count of every item relative to the most purchased one."""
    if n_x < 1:
        raise DomainError(f"catalog size must be positive, got {n_x}")
    flat = [item for session in sessions for item in session]
    if not flat:
        return np.zeros(n_x, dtype=np.float64)
    items = np.asarray(flat, dtype=np.int64)
    if items.min() < 0 or items.max() >= n_x:
        raise DomainError(f"item index outside catalog [0, {n_x})")
    counts = np.bincount(items, minlength=n_x).astype(np.float64)
    return counts / counts.max()


def popularity_profile(popularity: np.ndarray) -> np.ndarray:
    """Relative popularity sorted from most to least purchased item."""
    return np.sort(np.asarray(popularity, dtype=np.float64))[::-1]


def partition(sessions: Sequence[Session], seed: int) -> DataPartition:
    """
    Random 1/11 validation split, remaining sessions dealt round-robin into
    ten buckets. Whole sessions are shuffled, never the items inside one.
    """
    n = len(sessions)
    if n < N_BUCKETS + 1:
        raise SizeError(f"partition needs at least {N_BUCKETS + 1} sessions, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [list(sessions[i]) for i in order]
    n_val = n // (N_BUCKETS + 1)
    buckets: List[List[Session]] = [[] for _ in range(N_BUCKETS)]
    for i, session in enumerate(shuffled[n_val:]):
        buckets[i % N_BUCKETS].append(session)
    return DataPartition(seed=seed, validation=shuffled[:n_val], buckets=buckets)


def build_market(market_id: str, sessions: List[Session], item_ids: List[str]) -> MarketDataset:
    n_x = len(item_ids)
    return MarketDataset(
        market_id=market_id,
        catalog_size=n_x,
        sessions=sessions,
        popularity=compute_popularity(sessions, n_x),
        item_ids=item_ids,
    )


def training_dataset(market: MarketDataset, split: DataPartition, fraction: float = 1.0) -> MarketDataset:
    """The market restricted to the cumulative buckets of `fraction`, popularity recomputed on them."""
    return build_market(market.market_id, split.for_fraction(fraction), list(market.item_ids))


def load_market(
    market_id: str,
    path: Path,
    fmt: SessionFormat = "native-csv",
    item_ids: Optional[List[str]] = None,
) -> MarketDataset:
    raw, ids = load_sessions(path, fmt, item_ids)
    sessions = preprocess(raw)
    if not ids:
        raise DataError(f"market '{market_id}' has no items in {path}")
    logger.info("Market %s: kept %d of %d sessions after cleaning", market_id, len(sessions), len(raw))
    return build_market(market_id, sessions, ids)


def align_catalogs(markets: Sequence[MarketDataset]) -> List[MarketDataset]:
    """Remap every market onto the union id-map (first-seen order across markets)."""
    union: List[str] = []
    index_of: Dict[str, int] = {}
    for market in markets:
        for ext in market.item_ids:
            if ext not in index_of:
                index_of[ext] = len(union)
                union.append(ext)
    aligned: List[MarketDataset] = []
    for market in markets:
        lookup = np.asarray([index_of[ext] for ext in market.item_ids], dtype=np.int64)
        sessions = [lookup[np.asarray(s, dtype=np.int64)].tolist() for s in market.sessions]
        aligned.append(build_market(market.market_id, sessions, list(union)))
    return aligned


def save_id_map(path: Path, item_ids: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"external_id": list(item_ids), "index": np.arange(len(item_ids))}).to_csv(
        path, index=False, lineterminator="\n"
    )
    return path


def load_id_map(path: Path) -> List[str]:
    frame = pd.read_csv(path, dtype={"external_id": str, "index": np.int64}, keep_default_na=False)
    if list(frame.columns) != ID_MAP_COLUMNS:
        raise ParseError(f"id-map header must be {','.join(ID_MAP_COLUMNS)}", line=1, path=str(path))
    frame = frame.sort_values("index")
    if not np.array_equal(frame["index"].to_numpy(), np.arange(len(frame))):
        raise ParseError("id-map indices must be dense 0..n-1", path=str(path))
    return frame["external_id"].tolist()


def write_native_csv(path: Path, sessions: Sequence[Session], item_ids: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    session_col: List[int] = []
    item_col: List[str] = []
    for sid, session in enumerate(sessions):
        for item in session:
            session_col.append(sid)
            item_col.append(item_ids[item])
    pd.DataFrame({"session_id": session_col, "item_id": item_col}).to_csv(path, index=False, lineterminator="\n")
    return path


def validation_hash(sessions: Sequence[Session]) -> str:
    """Content hash of a session list; identical lists give identical hashes."""
    payload = json.dumps([list(map(int, s)) for s in sessions], separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
