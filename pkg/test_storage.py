"""Tests for sample files, weight sets, traces, reports and manifests on disk."""

import json

import numpy as np
from numpy.testing import assert_array_equal
import pytest

from consensus_mc.aggregation import AggregatedSampleSet, AggregationFamily, uniform_weights
from consensus_mc.evaluation import summarize
from consensus_mc.exceptions import StorageError
from consensus_mc.models import TemperingMode
from consensus_mc.samplers import SubposteriorSampleSet
from consensus_mc.storage import (
    read_aggregated,
    read_csv_rows,
    read_manifest,
    read_report,
    read_sample_file,
    read_sample_set,
    read_weight_set,
    write_aggregated,
    write_comparison,
    write_manifest,
    write_report,
    write_sample_file,
    write_sample_set,
    write_trace,
    write_weight_set,
)
from consensus_mc.variational import OptimizerTrace, TraceRow


@pytest.fixture
def samples():
    draws = np.random.default_rng(0).normal(size=(3, 7, 2, 2))
    return SubposteriorSampleSet(
        model_tag="niw",
        draws=draws,
        mode=TemperingMode.subposterior(3),
        seeds=(11, 12, 2**63 + 5),
    )


class TestSampleFiles:
    @pytest.mark.parametrize("fmt", ["binary", "csv"])
    def test_sample_set_survives_disk(self, tmp_path, samples, fmt):
        paths = write_sample_set(tmp_path, samples, fmt)
        assert [p.name for p in paths] == [
            f"partition_00{k}.{'bin' if fmt == 'binary' else 'csv'}" for k in range(3)
        ]
        restored = read_sample_set(tmp_path)
        assert_array_equal(restored.draws, samples.draws)
        assert restored.seeds == samples.seeds
        assert restored.mode == samples.mode
        assert restored.model_tag == "niw"

    def test_header_fields(self, tmp_path, samples):
        write_sample_set(tmp_path, samples)
        header, draws = read_sample_file(tmp_path / "partition_001.bin")
        assert {key: header[key] for key in ("model", "d", "K", "k", "T", "seed")} == {
            "model": "niw", "d": 2, "K": 3, "k": 1, "T": 7, "seed": 12,
        }
        assert header["shape"] == [2, 2]
        assert draws.shape == (7, 2, 2)

    def test_binary_is_little_endian(self, tmp_path):
        path = tmp_path / "one.bin"
        write_sample_file(path, np.array([[1.5]]), {"model": "probit", "d": 1, "K": 1, "k": 0, "seed": 0})
        assert path.read_bytes().endswith(np.array([1.5], dtype="<f8").tobytes())

    def test_rewrite_is_byte_identical(self, tmp_path, samples):
        first = write_sample_set(tmp_path / "a", samples)
        second = write_sample_set(tmp_path / "b", samples)
        for a, b in zip(first, second):
            assert a.read_bytes() == b.read_bytes()

    def test_missing_header_key(self, tmp_path):
        with pytest.raises(StorageError):
            write_sample_file(tmp_path / "x.bin", np.zeros((2, 1)), {"model": "probit"})

    def test_truncated_file(self, tmp_path, samples):
        write_sample_set(tmp_path, samples)
        path = tmp_path / "partition_000.bin"
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(StorageError):
            read_sample_file(path)

    def test_not_a_sample_file(self, tmp_path):
        path = tmp_path / "partition_000.bin"
        path.write_bytes(b"hello")
        with pytest.raises(StorageError):
            read_sample_file(path)

    def test_missing_partition(self, tmp_path, samples):
        write_sample_set(tmp_path, samples)
        (tmp_path / "partition_002.bin").unlink()
        with pytest.raises(StorageError):
            read_sample_set(tmp_path)

    def test_aggregated_provenance(self, tmp_path):
        aggregated = AggregatedSampleSet(
            "probit", np.arange(6.0).reshape(3, 2), "w123", "s456", algorithm="vcmc"
        )
        write_aggregated(tmp_path / "vcmc.csv", aggregated, k=5, fmt="csv")
        restored = read_aggregated(tmp_path / "vcmc.csv")
        assert_array_equal(restored.draws, aggregated.draws)
        assert (restored.weights_id, restored.samples_id, restored.algorithm) == ("w123", "s456", "vcmc")


class TestWeightsAndTraces:
    def test_weight_set_json(self, tmp_path):
        weights = uniform_weights(4, (2, 3), AggregationFamily.COMBINATORIAL)
        path = tmp_path / "weights" / "uniform_cmc.json"
        write_weight_set(path, weights)
        payload = json.loads(path.read_text())
        assert (payload["K"], payload["L"], payload["d"]) == (4, 2, 3)
        assert_array_equal(read_weight_set(path).weights, weights.weights)

    def test_invalid_weight_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"family": "vector", "weights": [[0.9], [0.9]]}))
        with pytest.raises(StorageError):
            read_weight_set(path)

    def test_trace_columns(self, tmp_path):
        trace = OptimizerTrace()
        trace.append(TraceRow(0, -10.5, 2.0, 0.01, 0.001))
        trace.append(TraceRow(1, -9.25, 1.5, 0.0090909, 0.002))
        write_trace(tmp_path / "vcmc_trace.csv", trace)
        rows = read_csv_rows(tmp_path / "vcmc_trace.csv")
        assert list(rows[0]) == ["iteration", "objective", "grad_norm", "step", "seconds"]
        assert [float(row["objective"]) for row in rows] == [-10.5, -9.25]


class TestReports:
    def test_report_files(self, tmp_path):
        report = summarize([0.1, None, 0.3], "gaussian_cmc", "first_moments", k=10,
                           labels=["theta[0]", "theta[1]", "theta[2]"])
        json_path, csv_path = write_report(tmp_path, report)
        assert json_path.name == "gaussian_cmc_first_moments.json"
        payload = read_report(json_path)
        assert payload["median"] == pytest.approx(0.2)
        assert payload["n_excluded"] == 1
        rows = read_csv_rows(csv_path)
        assert [row["excluded"] for row in rows] == ["0", "1", "0"]
        assert rows[1]["error"] == ""

    def test_comparison_table(self, tmp_path):
        path = tmp_path / "comparison_first_moments.csv"
        write_comparison(path, {10: {"vcmc": 0.05}, 5: {"vcmc": 0.02, "uniform_cmc": 0.1}},
                         ["uniform_cmc", "vcmc"])
        rows = read_csv_rows(path)
        assert [row["K"] for row in rows] == ["5", "10"]
        assert rows[1]["uniform_cmc"] == ""

    def test_manifest(self, tmp_path):
        write_manifest(tmp_path, {"status": "complete", "seed": 3})
        assert read_manifest(tmp_path) == {"status": "complete", "seed": 3}

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(StorageError):
            read_manifest(tmp_path)
