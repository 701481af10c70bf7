import pandas as pd
import pytest

from src.errors import ArgumentError, DataError
from src.state import AblationResult, AblationRow, MetricsReport, RankedSource, SimilarityReport, TransferResult
from src.tools.report_tools import (
    emit_report,
    plot_ablation_overview,
    read_result,
    read_similarity_csv,
    result_stem,
    write_timing_log,
)

from .helpers import small_experiment


def _row(fraction, accuracy=0.5):
    metrics = MetricsReport(top_k_accuracy=accuracy, catalog_coverage=0.25, novelty=1.5, k=4, n_events=10)
    return AblationRow(
        fraction=fraction,
        n_train_sessions=int(fraction * 100),
        metrics=metrics,
        loss_trace=[2.0, 1.5],
        validation_hash="abc",
        wall_clock=3.25,
    )


def _ablation(market_id="m1", eval_market_id="m1", model="lstm-ce"):
    return AblationResult(
        market_id=market_id,
        eval_market_id=eval_market_id,
        seed=7,
        model=model,
        config=small_experiment(),
        rows=[_row(0.5, 0.4), _row(1.0, 0.6)],
    )


class TestResultStem:
    def test_ablation(self):
        assert result_stem(_ablation()) == "ablation-m1-seed7-lstm-ce"

    def test_cross_market(self):
        assert result_stem(_ablation("m2", "m1")) == "ablation-m2-on-m1-seed7-lstm-ce"

    def test_transfer(self):
        result = TransferResult(target="m1", seed=7, baseline=_ablation())
        assert result_stem(result) == "transfer-m1-seed7-lstm-ce"


class TestEmitReport:
    def test_json_round_trip(self, tmp_path):
        result = _ablation()
        (path,) = emit_report([result], tmp_path, ["json"])
        restored = read_result(path)
        assert restored.model_dump() == result.model_dump()
        assert "wall_clock" not in path.read_text()

    def test_csv_rows_and_header(self, tmp_path):
        (path,) = emit_report([_ablation()], tmp_path, ["csv"])
        text = path.read_text()
        assert text.startswith("# config: ")
        assert "# seed: 7" in text
        frame = pd.read_csv(path, comment="#", float_precision="round_trip")
        assert len(frame) == 2
        assert frame["top_k_accuracy"].tolist() == [0.4, 0.6]

    def test_svg_series(self, tmp_path):
        (path,) = emit_report([_ablation()], tmp_path, ["svg"])
        svg = path.read_text()
        for metric in ("top_k_accuracy", "catalog_coverage", "novelty"):
            assert f'id="series-{metric}"' in svg

    def test_svg_is_reproducible(self, tmp_path):
        first = emit_report([_ablation()], tmp_path / "a", ["svg"])[0].read_bytes()
        second = emit_report([_ablation()], tmp_path / "b", ["svg"])[0].read_bytes()
        assert first == second

    def test_transfer_csv(self, tmp_path):
        result = TransferResult(
            target="m1",
            seed=7,
            baseline=_ablation(),
            sources=[_ablation("m2", "m1")],
            source_similarity={"m2": 0.9},
            source_labels={"m2": "similar"},
        )
        written = emit_report([result], tmp_path, ["json", "csv", "svg"])
        assert [p.suffix for p in written] == [".json", ".csv", ".svg"]
        frame = pd.read_csv(written[1], comment="#", float_precision="round_trip")
        assert frame["role"].tolist() == ["baseline", "baseline", "source", "source"]
        assert frame.loc[frame["role"] == "source", "similarity"].tolist() == [0.9, 0.9]
        assert frame["label"].fillna("").tolist() == ["", "", "similar", "similar"]
        assert isinstance(read_result(written[0]), TransferResult)

    def test_similarity_report(self, tmp_path):
        report = SimilarityReport(
            market_ids=["a", "b", "c"],
            matrix=[[1.0, 0.7, 0.1 + 0.2], [0.7, 1.0, 0.9], [0.1 + 0.2, 0.9, 1.0]],
            n_used={"a": 5, "b": 5, "c": 5},
            embedding_hash="h",
            seed=0,
            config=small_experiment(),
            rankings={
                "a": [
                    RankedSource(market_id="b", similarity=0.7, label="neutral"),
                    RankedSource(market_id="c", similarity=0.1 + 0.2, label="dissimilar"),
                ],
            },
        )
        written = emit_report([report], tmp_path, ["json", "csv", "svg"])
        assert [p.name for p in written] == [
            "similarity-seed0.json",
            "similarity-seed0.csv",
            "similarity-seed0-rankings.csv",
            "similarity-seed0.svg",
        ]
        assert read_result(written[0]).rankings == report.rankings
        matrix = read_similarity_csv(written[1])
        assert matrix.to_numpy().tolist() == report.matrix

        rankings = pd.read_csv(written[2], comment="#", float_precision="round_trip")
        assert rankings["market_id"].tolist() == ["b", "c"]
        assert rankings["rank"].tolist() == [1, 2]
        assert rankings["label"].tolist() == ["neutral", "dissimilar"]

    def test_csv_floats_read_back_exactly(self, tmp_path):
        values = [0.1 + 0.2, 1 / 3, 2 / 3]
        result = _ablation().model_copy(
            update={"rows": [_row(f, accuracy=v) for f, v in zip((0.3, 0.6, 0.9), values)]}
        )
        (path,) = emit_report([result], tmp_path, ["csv"])
        frame = pd.read_csv(path, comment="#", float_precision="round_trip")
        assert frame["top_k_accuracy"].tolist() == values
        assert frame["fraction"].tolist() == [0.3, 0.6, 0.9]

    def test_dotted_market_ids_keep_their_stem(self, tmp_path):
        written = emit_report([_ablation("eps-0.25", "eps-0.25")], tmp_path, ["json", "csv"])
        assert [p.name for p in written] == [
            "ablation-eps-0.25-seed7-lstm-ce.json",
            "ablation-eps-0.25-seed7-lstm-ce.csv",
        ]

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ArgumentError):
            emit_report([_ablation()], tmp_path, ["pdf"])

    def test_nothing_to_report(self, tmp_path):
        with pytest.raises(ArgumentError):
            emit_report([], tmp_path)


class TestReadResult:
    def test_missing(self, tmp_path):
        with pytest.raises(DataError):
            read_result(tmp_path / "nope.json")

    def test_not_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{", encoding="utf-8")
        with pytest.raises(DataError):
            read_result(path)


class TestTimingLog:
    def test_one_line_per_job(self, tmp_path):
        path = write_timing_log(tmp_path / "timing.log", [_ablation()])
        lines = path.read_text().splitlines()
        assert lines[0] == "train_market,eval_market,seed,fraction,seconds"
        assert lines[1:] == ["m1,m1,7,0.5,3.250", "m1,m1,7,1.0,3.250"]


class TestAblationOverview:
    def test_panel_per_metric_curve_per_market(self, tmp_path):
        results = [_ablation("m1", "m1"), _ablation("m2", "m2")]
        path = plot_ablation_overview(tmp_path / "overview.svg", results)
        svg = path.read_text()
        for metric in ("top_k_accuracy", "catalog_coverage", "novelty"):
            for market_id in ("m1", "m2"):
                assert f'id="series-{metric}-{market_id}"' in svg
        assert svg.count('<g id="axes_') == 3

    def test_nothing_to_plot(self, tmp_path):
        with pytest.raises(ArgumentError):
            plot_ablation_overview(tmp_path / "overview.svg", [])
