from __future__ import annotations

import io
import json
import logging
from pathlib import Path
from typing import Iterable, List, Mapping, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from ..errors import ArgumentError, DataError  # noqa: E402
from ..state import AblationResult, ExperimentConfig, SimilarityReport, TransferResult  # noqa: E402
from .dataset import popularity_profile  # noqa: E402


logger = logging.getLogger(__name__)

Result = Union[AblationResult, TransferResult, SimilarityReport]

FORMATS = ("json", "csv", "svg")
METRICS = ("top_k_accuracy", "catalog_coverage", "novelty")
ROW_COLUMNS = [
    "fraction",
    "n_train_sessions",
    *METRICS,
    "k",
    "n_events",
    "n_short_events",
    "validation_hash",
    "loss_trace_file",
]

# fixed so re-rendering the same result gives the same SVG bytes
plt.rcParams["svg.hashsalt"] = "sessionrec"


def _config_of(result: Result) -> ExperimentConfig:
    return result.baseline.config if isinstance(result, TransferResult) else result.config


def _seed_of(result: Result) -> int:
    return result.seed


def result_stem(result: Result) -> str:
    if isinstance(result, AblationResult):
        where = result.market_id
        if result.eval_market_id != result.market_id:
            where += f"-on-{result.eval_market_id}"
        return f"ablation-{where}-seed{result.seed}-{result.model}"
    if isinstance(result, TransferResult):
        return f"transfer-{result.target}-seed{result.seed}-{result.baseline.model}"
    return f"similarity-seed{result.seed}"


def _header(result: Result) -> str:
    config = _config_of(result)
    lines = [f"# config: {config.model_dump_json()}", f"# seed: {_seed_of(result)}"]
    if isinstance(result, AblationResult):
        lines += [f"# train_market: {result.market_id}", f"# eval_market: {result.eval_market_id}"]
    elif isinstance(result, TransferResult):
        lines += [f"# target: {result.target}"]
    return "\n".join(lines) + "\n"


def ablation_frame(result: AblationResult) -> pd.DataFrame:
    records = []
    for row in result.rows:
        record = {"fraction": row.fraction, "n_train_sessions": row.n_train_sessions}
        record.update({m: getattr(row.metrics, m) for m in METRICS})
        record.update(
            k=row.metrics.k,
            n_events=row.metrics.n_events,
            n_short_events=row.metrics.n_short_events,
            validation_hash=row.validation_hash,
            loss_trace_file=row.loss_trace_file or "",
        )
        records.append(record)
    return pd.DataFrame.from_records(records, columns=ROW_COLUMNS)


def _transfer_frame(result: TransferResult) -> pd.DataFrame:
    frames = []
    for role, curve in [("baseline", result.baseline)] + [("source", s) for s in result.sources]:
        frame = ablation_frame(curve)
        frame.insert(0, "train_market", curve.market_id)
        frame.insert(0, "role", role)
        frame.insert(2, "similarity", result.source_similarity.get(curve.market_id, np.nan))
        frame.insert(3, "label", result.source_labels.get(curve.market_id, ""))
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def _similarity_frame(result: SimilarityReport) -> pd.DataFrame:
    frame = pd.DataFrame(result.matrix, index=result.market_ids, columns=result.market_ids)
    frame.index.name = "market_id"
    return frame


def rankings_frame(result: SimilarityReport) -> pd.DataFrame:
    """One row per (target, candidate source), most similar first within each target."""
    records = [
        {"target": target, "rank": rank, **source.model_dump()}
        for target, ranked in result.rankings.items()
        for rank, source in enumerate(ranked, start=1)
    ]
    return pd.DataFrame.from_records(records, columns=["target", "rank", "market_id", "similarity", "label"])


def _write_frame(path: Path, result: Result, frame: pd.DataFrame, index: bool = False) -> Path:
    buffer = io.StringIO()
    buffer.write(_header(result))
    # default float repr is the shortest string that reads back to the same double
    frame.to_csv(buffer, index=index, lineterminator="\n")
    path.write_text(buffer.getvalue(), encoding="utf-8")
    return path


def _write_csv(path: Path, result: Result) -> Path:
    if isinstance(result, AblationResult):
        return _write_frame(path, result, ablation_frame(result))
    if isinstance(result, TransferResult):
        return _write_frame(path, result, _transfer_frame(result))
    return _write_frame(path, result, _similarity_frame(result), index=True)


def _save_svg(fig: plt.Figure, path: Path, result: Result) -> Path:
    metadata = {"Date": None, "Description": _header(result).strip()}
    fig.savefig(path, format="svg", metadata=metadata)
    plt.close(fig)
    return path


def _write_svg(path: Path, result: Result) -> Path:
    if isinstance(result, AblationResult):
        fig, axes = plt.subplots(1, len(METRICS), figsize=(12, 3.5))
        fractions = [r.fraction for r in result.rows]
        for ax, metric in zip(axes, METRICS):
            values = [getattr(r.metrics, metric) for r in result.rows]
            ax.plot(fractions, values, marker="o", gid=f"series-{metric}", label=metric)
            ax.set_xlabel("training fraction")
            ax.set_title(metric.replace("_", " "))
        fig.suptitle(f"{result.model} on {result.eval_market_id} (trained on {result.market_id}, seed {result.seed})")
    elif isinstance(result, TransferResult):
        fig, ax = plt.subplots(figsize=(6, 4))
        for curve in [result.baseline, *result.sources]:
            fractions = [r.fraction for r in curve.rows]
            values = [r.metrics.top_k_accuracy for r in curve.rows]
            name = "baseline" if curve is result.baseline else curve.market_id
            label = name
            if curve is not result.baseline and curve.market_id in result.source_labels:
                label = f"{name} ({result.source_labels[curve.market_id]})"
            ax.plot(fractions, values, marker="o", gid=f"series-{name}", label=label)
        ax.set_xlabel("training fraction")
        ax.set_ylabel(f"top-{result.baseline.config.k} accuracy on {result.target}")
        ax.legend()
        ax.set_title(f"transfer to {result.target} (seed {result.seed})")
    else:
        fig, ax = plt.subplots(figsize=(5, 4))
        image = ax.imshow(np.asarray(result.matrix), vmin=-1.0, vmax=1.0, cmap="viridis", gid="similarity-heatmap")
        ax.set_xticks(range(len(result.market_ids)), result.market_ids, rotation=45, ha="right")
        ax.set_yticks(range(len(result.market_ids)), result.market_ids)
        for i, row in enumerate(result.matrix):
            for j, value in enumerate(row):
                ax.text(j, i, f"{value:.2f}", ha="center", va="center", fontsize=8, color="white")
        fig.colorbar(image, ax=ax)
        ax.set_title(f"market similarity (seed {result.seed})")
    fig.tight_layout()
    return _save_svg(fig, path, result)


def emit_report(results: Sequence[Result], output_dir: Path, formats: Iterable[str] = ("json", "csv")) -> List[Path]:
    """
    Write every result as JSON and CSV, plus SVG plots when "svg" is requested.

    JSON is the full pydantic dump (config included); CSV and SVG carry the
    config and seed in their header comment and metadata.
    """
    if len(results) == 0:
        raise ArgumentError("nothing to report")
    wanted = list(dict.fromkeys(formats))
    unknown = [f for f in wanted if f not in FORMATS]
    if unknown:
        raise ArgumentError(f"unknown report format(s): {', '.join(unknown)}")

    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    for result in results:
        # market ids like "eps-0.25" put dots in the stem, so suffixes are appended, not swapped
        stem = result_stem(result)
        if "json" in wanted:
            path = output_dir / f"{stem}.json"
            path.write_text(result.model_dump_json(indent=2) + "\n", encoding="utf-8")
            written.append(path)
        if "csv" in wanted:
            written.append(_write_csv(output_dir / f"{stem}.csv", result))
            if isinstance(result, SimilarityReport) and result.rankings:
                written.append(_write_frame(output_dir / f"{stem}-rankings.csv", result, rankings_frame(result)))
        if "svg" in wanted:
            written.append(_write_svg(output_dir / f"{stem}.svg", result))
    for path in written:
        logger.info("Wrote %s", path)
    return written


def plot_ablation_overview(path: Path, results: Sequence[AblationResult]) -> Path:
    """One panel per metric with every market's curve overlaid, for comparing saturation across markets."""
    if len(results) == 0:
        raise ArgumentError("nothing to plot")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, len(METRICS), figsize=(12, 3.5))
    for ax, metric in zip(axes, METRICS):
        for result in results:
            fractions = [r.fraction for r in result.rows]
            values = [getattr(r.metrics, metric) for r in result.rows]
            ax.plot(fractions, values, marker="o", gid=f"series-{metric}-{result.market_id}", label=result.market_id)
        ax.set_xlabel("training fraction")
        ax.set_title(metric.replace("_", " "))
    axes[0].legend()
    first = results[0]
    fig.suptitle(f"{first.model} across markets (seed {first.seed})")
    fig.tight_layout()
    return _save_svg(fig, path, first)


def plot_popularity_profiles(path: Path, profiles: Mapping[str, np.ndarray], config: ExperimentConfig) -> Path:
    """Descending relative-popularity curve of every market on log-log axes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    for market_id, popularity in profiles.items():
        curve = popularity_profile(popularity)
        curve = curve[curve > 0]
        ax.loglog(np.arange(1, len(curve) + 1), curve, gid=f"series-{market_id}", label=market_id)
    ax.set_xlabel("item rank")
    ax.set_ylabel("relative popularity")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Description": f"# config: {config.model_dump_json()}"})
    plt.close(fig)
    return path


def write_timing_log(path: Path, results: Sequence[AblationResult]) -> Path:
    """Wall-clock seconds per job; kept apart from the reports so those stay reproducible."""
    lines = ["train_market,eval_market,seed,fraction,seconds"]
    for result in results:
        for row in result.rows:
            lines.append(f"{result.market_id},{result.eval_market_id},{result.seed},{row.fraction},{row.wall_clock:.3f}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_result(path: Path) -> Result:
    """Load a result JSON written by emit_report, whatever its kind."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"result file not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"result file {path} is not valid JSON: {exc}") from exc
    if "baseline" in payload:
        return TransferResult.model_validate(payload)
    if "matrix" in payload:
        return SimilarityReport.model_validate(payload)
    return AblationResult.model_validate(payload)


def read_similarity_csv(path: Path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"similarity matrix not found: {path}")
    frame = pd.read_csv(path, comment="#", index_col=0, dtype={"market_id": str}, float_precision="round_trip")
    if list(frame.index) != list(frame.columns):
        raise DataError(f"similarity matrix in {path} must have matching row and column labels")
    return frame
