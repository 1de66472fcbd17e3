"""Persisted artifacts: sample files, weight sets, traces, reports and manifests.

Sample files carry a JSON header and one flattened parameter per row, either
little-endian float64 after a ``CMCS`` magic and a 4-byte header length, or
decimal CSV after a ``# {header}`` line. Every writer goes through
``atomic_write``.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
import csv
import io
import json
import logging
from pathlib import Path
import struct
from typing import Any

import numpy as np
from numpy.typing import NDArray

from .aggregation import AggregatedSampleSet, WeightSet
from .const import FORMAT_BINARY, FORMAT_CSV, MANIFEST_FILE, SAMPLE_FILE_MAGIC
from .evaluation import EvaluationReport
from .exceptions import StorageError, WeightSetError
from .models import TemperingKind, TemperingMode
from .samplers import SubposteriorSampleSet
from .util import atomic_write, canonical_json, partition_file_name
from .variational import OptimizerTrace

_LOGGER = logging.getLogger(__name__)

Array = NDArray[np.float64]

_LENGTH = struct.Struct("<I")
_HEADER_KEYS = ("model", "d", "K", "k", "T", "seed", "shape")
TRACE_FIELDS = ["iteration", "objective", "grad_norm", "step", "seconds"]


def _csv_text(fieldnames: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(fieldnames), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buffer.getvalue()


def _number(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def write_sample_file(path: Path, draws: Array, header: dict[str, Any], fmt: str = FORMAT_BINARY) -> None:
    """Write (T, *shape) draws with ``header`` (model, d, K, k, T, seed, ...)."""
    draws = np.asarray(draws, dtype=np.float64)
    header = {**header, "T": int(draws.shape[0]), "shape": list(draws.shape[1:]), "format": fmt}
    missing = [key for key in _HEADER_KEYS if key not in header]
    if missing:
        raise StorageError(f"sample header is missing {missing}")
    flat = draws.reshape(draws.shape[0], -1)
    header_text = json.dumps(header, sort_keys=True)
    if fmt == FORMAT_BINARY:
        header_bytes = header_text.encode()
        payload = (
            SAMPLE_FILE_MAGIC
            + _LENGTH.pack(len(header_bytes))
            + header_bytes
            + np.ascontiguousarray(flat, dtype="<f8").tobytes()
        )
        atomic_write(path, payload)
    elif fmt == FORMAT_CSV:
        lines = [f"# {header_text}"]
        lines.extend(",".join(repr(float(v)) for v in row) for row in flat)
        atomic_write(path, "\n".join(lines) + "\n")
    else:
        raise StorageError(f"unknown sample file format: {fmt}")
    _LOGGER.debug("Wrote %d draws to %s", draws.shape[0], path)


def read_sample_file(path: Path) -> tuple[dict[str, Any], Array]:
    """Return (header, draws reshaped to (T, *shape))."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as err:
        raise StorageError(f"cannot read sample file {path}: {err}") from err

    try:
        if raw.startswith(SAMPLE_FILE_MAGIC):
            offset = len(SAMPLE_FILE_MAGIC)
            (length,) = _LENGTH.unpack_from(raw, offset)
            offset += _LENGTH.size
            header = json.loads(raw[offset:offset + length])
            flat = np.frombuffer(raw[offset + length:], dtype="<f8").astype(np.float64)
        elif raw.startswith(b"# "):
            text = raw.decode()
            first, _, body = text.partition("\n")
            header = json.loads(first[2:])
            rows = [line for line in body.splitlines() if line]
            flat = np.array(
                [float(v) for line in rows for v in line.split(",")], dtype=np.float64
            )
        else:
            raise StorageError(f"{path} is not a sample file")
    except (ValueError, struct.error) as err:
        raise StorageError(f"malformed sample file {path}: {err}") from err

    shape = tuple(header.get("shape", ()))
    n_draws = int(header.get("T", -1))
    expected = n_draws * int(np.prod(shape))
    if n_draws < 0 or flat.size != expected:
        raise StorageError(f"{path}: header promises {n_draws} draws of shape {shape}, found {flat.size} values")
    return header, flat.reshape(n_draws, *shape)


def write_sample_set(directory: Path, samples: SubposteriorSampleSet, fmt: str = FORMAT_BINARY) -> list[Path]:
    """One file per partition, named partition_###.bin|csv."""
    paths = []
    dim = int(samples.param_shape[-1]) if samples.param_shape else 1
    for k in range(samples.n_partitions):
        path = Path(directory) / partition_file_name(k, fmt)
        header = {
            "model": samples.model_tag,
            "d": dim,
            "K": samples.n_partitions,
            "k": k,
            "seed": samples.seeds[k],
            "mode": str(samples.mode.kind),
        }
        write_sample_file(path, samples.draws[k], header, fmt)
        paths.append(path)
    return paths


def read_sample_set(directory: Path) -> SubposteriorSampleSet:
    """Load every partition file of a directory back into a sample set."""
    directory = Path(directory)
    paths = sorted(p for p in directory.glob("partition_*") if p.suffix in (".bin", ".csv"))
    if not paths:
        raise StorageError(f"no sample files in {directory}")
    headers, draws = zip(*(read_sample_file(p) for p in paths))
    n_partitions = headers[0]["K"]
    if len(paths) != n_partitions:
        raise StorageError(f"{directory}: found {len(paths)} partition files for K={n_partitions}")
    for k, header in enumerate(headers):
        if header["k"] != k or header["K"] != n_partitions or header["model"] != headers[0]["model"]:
            raise StorageError(f"{paths[k]}: header inconsistent with partition {k} of {n_partitions}")
        if tuple(header["shape"]) != tuple(headers[0]["shape"]) or header["T"] != headers[0]["T"]:
            raise StorageError(f"{paths[k]}: draw shape differs from partition 0")
    mode = TemperingMode(TemperingKind(headers[0].get("mode", TemperingKind.SUBPOSTERIOR)), n_partitions)
    return SubposteriorSampleSet(
        model_tag=headers[0]["model"],
        draws=np.stack(draws),
        mode=mode,
        seeds=tuple(int(h["seed"]) for h in headers),
    )


def write_aggregated(path: Path, aggregated: AggregatedSampleSet, k: int, fmt: str = FORMAT_BINARY) -> None:
    header = {
        "model": aggregated.model_tag,
        "d": int(aggregated.param_shape[-1]) if aggregated.param_shape else 1,
        "K": k,
        "k": -1,
        "seed": 0,
        "algorithm": aggregated.algorithm,
        "weights": aggregated.weights_id,
        "samples": aggregated.samples_id,
    }
    write_sample_file(path, aggregated.draws, header, fmt)


def read_aggregated(path: Path) -> AggregatedSampleSet:
    header, draws = read_sample_file(path)
    return AggregatedSampleSet(
        model_tag=header["model"],
        draws=draws,
        weights_id=header.get("weights", ""),
        samples_id=header.get("samples", ""),
        algorithm=header.get("algorithm", ""),
    )


def write_weight_set(path: Path, weights: WeightSet) -> None:
    atomic_write(path, canonical_json(weights.as_dict()))


def read_weight_set(path: Path) -> WeightSet:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, ValueError) as err:
        raise StorageError(f"cannot read weight set {path}: {err}") from err
    try:
        return WeightSet.from_dict(payload)
    except WeightSetError as err:
        raise StorageError(f"{path}: {err}") from err


def write_trace(path: Path, trace: OptimizerTrace) -> None:
    rows = (
        {
            "iteration": row.iteration,
            "objective": _number(row.objective),
            "grad_norm": _number(row.grad_norm),
            "step": _number(row.step),
            "seconds": f"{row.seconds:.6f}",
        }
        for row in trace.rows
    )
    atomic_write(path, _csv_text(TRACE_FIELDS, rows))


def read_csv_rows(path: Path) -> list[dict[str, str]]:
    try:
        with Path(path).open(newline="") as handle:
            return list(csv.DictReader(handle))
    except OSError as err:
        raise StorageError(f"cannot read {path}: {err}") from err


def write_report(directory: Path, report: EvaluationReport) -> tuple[Path, Path]:
    """{algorithm}_{suite}.json with the summary, .csv with one row per function."""
    stem = f"{report.algorithm}_{report.suite}"
    json_path = Path(directory) / f"{stem}.json"
    csv_path = Path(directory) / f"{stem}.csv"
    atomic_write(json_path, canonical_json(report.as_dict()))
    labels = report.labels or tuple(str(i) for i in range(len(report.errors)))
    rows = (
        {"function": label, "error": _number(error), "excluded": int(error is None)}
        for label, error in zip(labels, report.errors)
    )
    atomic_write(csv_path, _csv_text(["function", "error", "excluded"], rows))
    return json_path, csv_path


def read_report(path: Path) -> dict[str, Any]:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as err:
        raise StorageError(f"cannot read report {path}: {err}") from err


def write_comparison(
    path: Path, medians: Mapping[int, Mapping[str, float]], algorithms: Sequence[str]
) -> None:
    """K on rows, algorithms on columns, median relative error in cells."""
    rows = (
        {"K": k, **{alg: _number(medians[k].get(alg)) for alg in algorithms}}
        for k in sorted(medians)
    )
    atomic_write(path, _csv_text(["K", *algorithms], rows))


def write_manifest(directory: Path, manifest: dict[str, Any]) -> Path:
    path = Path(directory) / MANIFEST_FILE
    atomic_write(path, canonical_json(manifest))
    return path


def read_manifest(directory: Path) -> dict[str, Any]:
    path = Path(directory) / MANIFEST_FILE
    if not path.is_file():
        raise StorageError(f"no manifest in {directory}")
    try:
        return json.loads(path.read_text())
    except ValueError as err:
        raise StorageError(f"malformed manifest {path}: {err}") from err
