"""Experiment coordinator: runs and persists the pipeline stages for a config."""

from __future__ import annotations

from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import replace
import logging
from pathlib import Path
import shutil
import time
from typing import Any

import numpy as np
import voluptuous as vol

from .aggregation import (
    Alignment,
    WeightSet,
    aggregate,
    align_clusters,
    family_for_model,
    gaussian_weights,
    uniform_weights,
)
from .config import ExperimentConfig
from .const import (
    AGGREGATED_DIR,
    FORMAT_BINARY,
    MANIFEST_FILE,
    MODEL_MIXTURE,
    REPORTS_DIR,
    SAMPLES_DIR,
    SCHEMA_VERSION,
    SERIAL_DIR,
    WEIGHTS_DIR,
)
from .data import Dataset, build_dataset, generate_test_points
from .evaluation import (
    Algorithm,
    EvaluationReport,
    SuiteKind,
    TestFunctionSuite,
    effective_sample_size,
    evaluate_algorithms,
)
from .exceptions import ConsensusError, EvaluationError, OptimizationError, StageError, StorageError
from .models import MixtureSpec
from .samplers import SubposteriorSampleSet, partition_data, run_parallel, run_serial
from .storage import (
    read_aggregated,
    read_csv_rows,
    read_manifest,
    read_report,
    read_sample_set,
    read_weight_set,
    write_aggregated,
    write_comparison,
    write_manifest,
    write_report,
    write_sample_set,
    write_trace,
    write_weight_set,
)
from .util import derive_seed, k_dir_name
from .variational import optimize

_LOGGER = logging.getLogger(__name__)

# Seed streams mixed with the master seed, kept apart from the partition-index
# streams the samplers use.
_PARTITION_STREAM = 1 << 32
_OPTIMIZER_STREAM = 2 << 32
_TEST_POINT_STREAM = 3 << 32

WEIGHTED_ALGORITHMS = (Algorithm.UNIFORM_CMC, Algorithm.GAUSSIAN_CMC, Algorithm.VCMC)
TRACE_FILE = "vcmc_trace.csv"

MANIFEST_SCHEMA = vol.Schema(
    {
        vol.Required("schema_version"): SCHEMA_VERSION,
        vol.Required("config_hash"): str,
        vol.Required("config"): dict,
        vol.Required("seed"): int,
        vol.Required("status"): vol.In(["running", "complete"]),
        vol.Optional("stages", default={}): {str: vol.Coerce(float)},
        vol.Optional("serial"): dict,
        vol.Optional("partitions", default={}): {str: dict},
    },
    extra=vol.ALLOW_EXTRA,
)

REPORT_SCHEMA = vol.Schema(
    {
        vol.Required("algorithm"): vol.In([str(alg) for alg in Algorithm]),
        vol.Required("suite"): vol.In([str(kind) for kind in SuiteKind]),
        vol.Required("K"): vol.Any(None, int),
        vol.Required("median"): vol.All(vol.Coerce(float), vol.Range(min=0)),
        vol.Required("q1"): vol.All(vol.Coerce(float), vol.Range(min=0)),
        vol.Required("q3"): vol.All(vol.Coerce(float), vol.Range(min=0)),
        vol.Required("n_functions"): vol.All(int, vol.Range(min=1)),
        vol.Required("n_excluded"): vol.All(int, vol.Range(min=0)),
    }
)


class ExperimentCoordinator:
    """Run the stages of one experiment into one output directory."""

    def __init__(
        self,
        config: ExperimentConfig,
        out: str | Path | None = None,
        threads: int | None = None,
        force: bool = False,
    ) -> None:
        """Initialize the coordinator."""
        self.config = config
        self.out = Path(out) if out is not None else config.out
        self.threads = config.threads if threads is None else threads
        self.force = force
        self.timings: dict[str, float] = {}
        self._dataset: Dataset | None = None

    @property
    def dataset(self) -> Dataset:
        if self._dataset is None:
            self._dataset = build_dataset(self.config.model_block)
            _LOGGER.debug(
                "Dataset %s: %d rows, d=%d", self._dataset.source,
                self._dataset.model.n_obs, self._dataset.model.dim,
            )
        return self._dataset

    def k_dir(self, k: int) -> Path:
        return self.out / k_dir_name(k)

    # Plumbing

    @contextmanager
    def _stage(self, name: str) -> Iterator[None]:
        _LOGGER.info("Stage %s started", name)
        started = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except (ConsensusError, OSError, ValueError, np.linalg.LinAlgError) as err:
            raise StageError(name, err) from err
        finally:
            elapsed = time.perf_counter() - started
            key = name.split()[0]
            self.timings[key] = self.timings.get(key, 0.0) + elapsed
        _LOGGER.info("Stage %s finished in %.2fs", name, elapsed)

    def _manifest(self) -> dict[str, Any]:
        if (self.out / MANIFEST_FILE).is_file():
            return read_manifest(self.out)
        return {
            "schema_version": SCHEMA_VERSION,
            "config": self.config.data,
            "config_hash": self.config.hash,
            "seed": self.config.seed,
            "status": "running",
            "stages": {},
            "partitions": {},
        }

    def _update_manifest(self, status: str | None = None, **entries: Any) -> None:
        manifest = self._manifest()
        stages = manifest.setdefault("stages", {})
        for key, seconds in self.timings.items():
            stages[key] = round(seconds, 6)
        partitions = entries.pop("partitions", None)
        if partitions:
            for name, entry in partitions.items():
                manifest.setdefault("partitions", {}).setdefault(name, {}).update(entry)
        manifest.update(entries)
        if status is not None:
            manifest["status"] = status
        write_manifest(self.out, manifest)

    def prepare_output(self) -> None:
        """Create the output directory; replace an existing one only with force."""
        if self.out.exists() and any(self.out.iterdir()):
            if not self.force:
                raise StorageError(f"output directory {self.out} is not empty; pass --force to overwrite")
            if not (self.out / MANIFEST_FILE).is_file():
                raise StorageError(f"refusing to remove {self.out}: it holds no {MANIFEST_FILE}")
            _LOGGER.info("Removing previous experiment in %s", self.out)
            shutil.rmtree(self.out)
        self.out.mkdir(parents=True, exist_ok=True)

    def plan(self) -> list[str]:
        """Human-readable stage plan, used by --dry-run."""
        cfg = self.config
        ref = cfg.reference_sampler
        lines = [
            f"serial: {cfg.model_tag} reference chain, {ref.iterations} iterations "
            f"({ref.n_keep} draws) -> {self.out / SERIAL_DIR}"
        ]
        algorithms = [str(alg) for alg in cfg.algorithms]
        for k in cfg.k_sweep:
            base = self.k_dir(k)
            lines.append(f"sample K={k}: {cfg.sampler.n_keep} draws per partition -> {base / SAMPLES_DIR}")
            lines.append(f"optimize K={k}: {', '.join(algorithms)} -> {base / WEIGHTS_DIR}")
            lines.append(f"aggregate K={k}: -> {base / AGGREGATED_DIR}")
        suites = ", ".join(str(kind) for kind in cfg.suites)
        lines.append(f"evaluate: {suites} -> {self.out}/K###/{REPORTS_DIR}, comparison_<suite>.csv")
        return lines

    # Stages

    def sample_serial(self) -> SubposteriorSampleSet:
        with self._stage("serial"):
            reference = run_serial(self.dataset.model, self.config.reference_sampler)
            write_sample_set(self.out / SERIAL_DIR, reference, self.config.sample_format)
            ess = effective_sample_size(reference.draws[0])
        self._update_manifest(serial={
            "T": reference.n_draws,
            "seed": reference.seeds[0],
            "iterations": self.config.reference_sampler.iterations,
            "min_ess": float(ess.min()),
            "diagnostics": list(reference.diagnostics),
        })
        return reference

    def sample_parallel(self, k: int) -> SubposteriorSampleSet:
        with self._stage(f"sample K={k}"):
            model = self.dataset.model
            partitions = partition_data(model.n_obs, k, derive_seed(self.config.seed, _PARTITION_STREAM, k))
            partitions.validate()
            samples = run_parallel(model, partitions, self.config.tempering(k), self.config.sampler, self.threads)
            write_sample_set(self.k_dir(k) / SAMPLES_DIR, samples, self.config.sample_format)
        self._update_manifest(partitions={k_dir_name(k): {
            "K": k,
            "T": samples.n_draws,
            "seeds": list(samples.seeds),
            "diagnostics": list(samples.diagnostics),
        }})
        return samples

    def _load_samples(self, k: int) -> SubposteriorSampleSet:
        return read_sample_set(self.k_dir(k) / SAMPLES_DIR)

    def fit_weights(self, k: int) -> dict[str, WeightSet]:
        """Uniform, Gaussian and variational weights for one K."""
        with self._stage(f"optimize K={k}"):
            samples = self._load_samples(k)
            model = self.dataset.model
            family = family_for_model(model.tag)
            alignment: Alignment | None = None
            shape: tuple[int, ...] = (model.dim,)
            if model.tag == MODEL_MIXTURE:
                alignment = align_clusters(samples)
                shape = (alignment.n_clusters, model.dim)

            directory = self.k_dir(k) / WEIGHTS_DIR
            objective = self.config.objective
            fitted: dict[str, WeightSet] = {}
            for algorithm in self.config.algorithms:
                if algorithm is Algorithm.UNIFORM_CMC:
                    weights = uniform_weights(k, shape, family, alignment, objective.floor)
                elif algorithm is Algorithm.GAUSSIAN_CMC:
                    weights = gaussian_weights(samples, family, alignment, objective.floor)
                elif algorithm is Algorithm.VCMC:
                    seed = derive_seed(self.config.seed, _OPTIMIZER_STREAM, k)
                    try:
                        weights, trace = optimize(model, samples, objective, seed, alignment)
                    except OptimizationError as err:
                        if err.trace is not None:
                            write_trace(directory / TRACE_FILE, err.trace)
                        raise
                    write_trace(directory / TRACE_FILE, trace)
                else:
                    continue
                write_weight_set(directory / f"{algorithm}.json", weights)
                fitted[str(algorithm)] = weights
        self._update_manifest(partitions={k_dir_name(k): {
            "weights": {name: ws.fingerprint for name, ws in fitted.items()},
        }})
        return fitted

    def aggregate(self, k: int) -> None:
        with self._stage(f"aggregate K={k}"):
            samples = self._load_samples(k)
            fmt = self.config.sample_format
            for algorithm in self.config.algorithms:
                if algorithm not in WEIGHTED_ALGORITHMS:
                    continue
                weights = read_weight_set(self.k_dir(k) / WEIGHTS_DIR / f"{algorithm}.json")
                aggregated = replace(aggregate(weights, samples), algorithm=str(algorithm))
                suffix = "bin" if fmt == FORMAT_BINARY else "csv"
                write_aggregated(self.k_dir(k) / AGGREGATED_DIR / f"{algorithm}.{suffix}", aggregated, k, fmt)

    def _test_points(self) -> np.ndarray:
        model = self.dataset.model
        n = self.config.test_points
        seed = derive_seed(self.config.seed, _TEST_POINT_STREAM)
        centers = self.dataset.truth.get("centers")
        if centers is not None and isinstance(model, MixtureSpec):
            return generate_test_points(centers, model.sigma2, n, seed)
        rng = np.random.default_rng(seed)
        rows = rng.choice(model.n_obs, size=min(n, model.n_obs), replace=False)
        return model.x[np.sort(rows)]

    def _suite(self, kind: SuiteKind, param_shape: tuple[int, ...]) -> TestFunctionSuite:
        model = self.dataset.model
        if kind is SuiteKind.COMEMBERSHIP:
            if not isinstance(model, MixtureSpec):
                raise EvaluationError("comembership suite needs a mixture model")
            return TestFunctionSuite(
                kind, param_shape, self._test_points(), model.sigma2, model.log_weights
            )
        return TestFunctionSuite(kind, param_shape)

    def evaluate(self, k: int, reference: SubposteriorSampleSet | None = None) -> dict[str, dict[str, EvaluationReport]]:
        """One report per (algorithm, suite) for one K."""
        with self._stage(f"evaluate K={k}"):
            if reference is None:
                if not (self.out / SERIAL_DIR).is_dir():
                    raise EvaluationError(f"missing serial reference in {self.out / SERIAL_DIR}")
                reference = read_sample_set(self.out / SERIAL_DIR)
            reference_draws = reference.draws[0]
            fmt = self.config.sample_format
            suffix = "bin" if fmt == FORMAT_BINARY else "csv"

            samples_by_algorithm: dict[str, Any] = {}
            for algorithm in self.config.algorithms:
                if algorithm is Algorithm.SERIAL:
                    continue
                path = self.k_dir(k) / AGGREGATED_DIR / f"{algorithm}.{suffix}"
                samples_by_algorithm[str(algorithm)] = read_aggregated(path)
            n_draws = min(
                [s.n_draws for s in samples_by_algorithm.values()] or [self.config.sampler.n_keep]
            )
            if Algorithm.SERIAL in self.config.algorithms:
                samples_by_algorithm = {
                    str(Algorithm.SERIAL): reference_draws[:n_draws], **samples_by_algorithm
                }

            reports: dict[str, dict[str, EvaluationReport]] = {}
            for kind in self.config.suites:
                suite = self._suite(kind, tuple(reference_draws.shape[1:]))
                trim = self.config.trim_fraction if kind is SuiteKind.COMEMBERSHIP else 1.0
                by_algorithm = evaluate_algorithms(samples_by_algorithm, reference_draws, suite, k, trim)
                for report in by_algorithm.values():
                    write_report(self.k_dir(k) / REPORTS_DIR, report)
                reports[str(kind)] = by_algorithm
        return reports

    def evaluate_all(self) -> dict[int, dict[str, dict[str, EvaluationReport]]]:
        if not (self.out / SERIAL_DIR).is_dir():
            raise StageError("evaluate", EvaluationError(f"missing serial reference in {self.out / SERIAL_DIR}"))
        reference = read_sample_set(self.out / SERIAL_DIR)
        results = {k: self.evaluate(k, reference) for k in self.config.k_sweep}
        algorithms = [str(alg) for alg in self.config.algorithms]
        for kind in self.config.suites:
            medians = {
                k: {alg: report.median for alg, report in results[k][str(kind)].items()}
                for k in results
            }
            write_comparison(self.out / f"comparison_{kind}.csv", medians, algorithms)
        self._update_manifest()
        return results

    def run(self) -> dict[int, dict[str, dict[str, EvaluationReport]]]:
        """Full pipeline: reference chain, then per-K sampling, weights and aggregation, then evaluation."""
        self.prepare_output()
        self._update_manifest(status="running")
        self.sample_serial()
        for k in self.config.k_sweep:
            self.sample_parallel(k)
            self.fit_weights(k)
            self.aggregate(k)
        results = self.evaluate_all()
        self._update_manifest(status="complete")
        return results


def validate_experiment(out: str | Path) -> list[str]:
    """Re-check every file of an experiment directory; return the problems found."""
    out = Path(out)
    problems: list[str] = []
    try:
        manifest = MANIFEST_SCHEMA(read_manifest(out))
    except (StorageError, vol.Invalid) as err:
        return [f"{out / MANIFEST_FILE}: {err}"]

    def check(label: str, func: Any, *args: Any) -> Any:
        try:
            return func(*args)
        except (ConsensusError, vol.Invalid, ValueError, KeyError) as err:
            problems.append(f"{label}: {err}")
            return None

    if (out / SERIAL_DIR).is_dir():
        check(str(out / SERIAL_DIR), read_sample_set, out / SERIAL_DIR)

    for name, entry in sorted(manifest.get("partitions", {}).items()):
        base = out / name
        samples = check(str(base / SAMPLES_DIR), read_sample_set, base / SAMPLES_DIR)
        if samples is not None and "T" in entry and samples.n_draws != entry["T"]:
            problems.append(f"{base / SAMPLES_DIR}: T={samples.n_draws}, manifest says {entry['T']}")
        for path in sorted((base / WEIGHTS_DIR).glob("*.json")):
            weights = check(str(path), read_weight_set, path)
            if weights is not None and samples is not None and weights.n_partitions != samples.n_partitions:
                problems.append(f"{path}: K={weights.n_partitions}, samples have {samples.n_partitions}")
        for path in sorted((base / AGGREGATED_DIR).glob("*")):
            check(str(path), read_aggregated, path)
        for path in sorted((base / REPORTS_DIR).glob("*.json")):
            report = check(str(path), lambda p: REPORT_SCHEMA(read_report(p)), path)
            if report is not None and not report["q1"] <= report["median"] <= report["q3"]:
                problems.append(f"{path}: quartiles out of order")

    for path in sorted(out.glob("comparison_*.csv")):
        rows = check(str(path), read_csv_rows, path)
        if rows is not None and any("K" not in row for row in rows):
            problems.append(f"{path}: missing K column")
    for problem in problems:
        _LOGGER.warning("%s", problem)
    return problems
