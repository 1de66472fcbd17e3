"""Experiment configuration: TOML (or JSON) files validated with voluptuous."""

from __future__ import annotations

import json
import logging
from pathlib import Path
import tomllib
from typing import Any

import voluptuous as vol

from .const import (
    CONF_ALGORITHMS,
    CONF_BATCH_SIZE,
    CONF_BURN_IN,
    CONF_DATA,
    CONF_ENTROPY,
    CONF_EVALUATION,
    CONF_FLOOR,
    CONF_FORMAT,
    CONF_ITERATIONS,
    CONF_K,
    CONF_LEAPFROG_STEPS,
    CONF_MIXTURE_GRADIENT,
    CONF_MODE,
    CONF_MODEL,
    CONF_OBJECTIVE,
    CONF_OUT,
    CONF_PARTITIONS,
    CONF_REFERENCE_MULTIPLIER,
    CONF_SAMPLER,
    CONF_SCHEMA_VERSION,
    CONF_SEED,
    CONF_STEP_A,
    CONF_STEP_B,
    CONF_STEP_SIZE,
    CONF_SUITES,
    CONF_SYNTHETIC,
    CONF_TEST_POINTS,
    CONF_THIN,
    CONF_THREADS,
    CONF_TRIM_FRACTION,
    CONF_TUNE,
    CONF_TYPE,
    DEFAULT_BATCH_SIZE,
    DEFAULT_BURN_IN,
    DEFAULT_ITERATIONS,
    DEFAULT_K_SWEEP,
    DEFAULT_LEAPFROG_STEPS,
    DEFAULT_OPT_ITERATIONS,
    DEFAULT_REFERENCE_MULTIPLIER,
    DEFAULT_STEP_A,
    DEFAULT_STEP_B,
    DEFAULT_STEP_SIZE,
    DEFAULT_TEST_POINTS,
    DEFAULT_THIN,
    DEFAULT_TRIM_FRACTION,
    DEFAULT_WEIGHT_FLOOR,
    FORMAT_BINARY,
    FORMAT_CSV,
    MODE_PARTIAL,
    MODE_SUBPOSTERIOR,
    MODEL_MIXTURE,
    MODEL_TAGS,
    SCHEMA_VERSION,
)
from .evaluation import Algorithm, SuiteKind, default_suites
from .exceptions import ConfigError, SamplerError
from .models import TemperingKind, TemperingMode
from .samplers import SamplerConfig
from .util import config_hash
from .variational import EntropyMode, MixtureGradient, ObjectiveConfig

_LOGGER = logging.getLogger(__name__)

_POSITIVE = vol.All(vol.Coerce(float), vol.Range(min=0, min_included=False))
_COUNT = vol.All(int, vol.Range(min=1))


def _k_sweep(value: Any) -> list[int]:
    """Accept a single K or a list of them."""
    values = value if isinstance(value, list) else [value]
    if not values:
        raise vol.Invalid("K sweep must not be empty")
    return [_COUNT(v) for v in values]


SYNTHETIC_SCHEMA = vol.Schema(
    {
        vol.Required("n"): vol.All(int, vol.Range(min=0)),
        vol.Required("d"): _COUNT,
        vol.Optional(CONF_SEED, default=0): vol.All(int, vol.Range(min=0)),
        vol.Optional("eigen_range"): vol.All([_POSITIVE], vol.Length(min=2, max=2)),
    }
)

MODEL_SCHEMA = vol.Schema(
    {
        vol.Required(CONF_TYPE): vol.In(MODEL_TAGS),
        vol.Exclusive(CONF_DATA, "source"): str,
        vol.Exclusive(CONF_SYNTHETIC, "source"): SYNTHETIC_SCHEMA,
        vol.Optional("sigma2"): _POSITIVE,
        vol.Optional("tau2"): _POSITIVE,
        vol.Optional("nu"): vol.Coerce(float),
        vol.Optional("scale"): [[vol.Coerce(float)]],
        vol.Optional("mu"): [vol.Coerce(float)],
        vol.Optional("clusters"): _COUNT,
        vol.Optional("weights"): [vol.Coerce(float)],
    }
)

PARTITIONS_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_K, default=DEFAULT_K_SWEEP): _k_sweep,
        vol.Optional(CONF_MODE, default=MODE_SUBPOSTERIOR): vol.In([MODE_SUBPOSTERIOR, MODE_PARTIAL]),
    }
)

SAMPLER_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_ITERATIONS, default=DEFAULT_ITERATIONS): _COUNT,
        vol.Optional(CONF_BURN_IN, default=DEFAULT_BURN_IN): vol.All(int, vol.Range(min=0)),
        vol.Optional(CONF_THIN, default=DEFAULT_THIN): _COUNT,
        vol.Optional(CONF_STEP_SIZE, default=DEFAULT_STEP_SIZE): _POSITIVE,
        vol.Optional(CONF_LEAPFROG_STEPS, default=DEFAULT_LEAPFROG_STEPS): _COUNT,
        vol.Optional(CONF_TUNE, default=True): bool,
        vol.Optional(CONF_REFERENCE_MULTIPLIER, default=DEFAULT_REFERENCE_MULTIPLIER): _COUNT,
        vol.Optional(CONF_FORMAT, default=FORMAT_BINARY): vol.In([FORMAT_BINARY, FORMAT_CSV]),
    }
)

OBJECTIVE_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_ENTROPY, default=str(EntropyMode.RELAXED_MEAN)): vol.In(
            [str(mode) for mode in EntropyMode]
        ),
        vol.Optional(CONF_BATCH_SIZE, default=DEFAULT_BATCH_SIZE): _COUNT,
        vol.Optional(CONF_ITERATIONS, default=DEFAULT_OPT_ITERATIONS): vol.All(int, vol.Range(min=0)),
        vol.Optional(CONF_STEP_A, default=DEFAULT_STEP_A): _POSITIVE,
        vol.Optional(CONF_STEP_B, default=DEFAULT_STEP_B): vol.All(vol.Coerce(float), vol.Range(min=0)),
        vol.Optional(CONF_FLOOR, default=DEFAULT_WEIGHT_FLOOR): vol.All(
            vol.Coerce(float), vol.Range(min=0, max=1, max_included=False)
        ),
        vol.Optional(CONF_MIXTURE_GRADIENT, default=str(MixtureGradient.EXACT)): vol.In(
            [str(variant) for variant in MixtureGradient]
        ),
    }
)

EVALUATION_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_SUITES): [vol.In([str(kind) for kind in SuiteKind])],
        vol.Optional(CONF_ALGORITHMS, default=[str(alg) for alg in Algorithm]): vol.All(
            [vol.In([str(alg) for alg in Algorithm])], vol.Length(min=1)
        ),
        vol.Optional(CONF_TEST_POINTS, default=DEFAULT_TEST_POINTS): vol.All(int, vol.Range(min=2)),
        vol.Optional(CONF_TRIM_FRACTION, default=DEFAULT_TRIM_FRACTION): vol.All(
            vol.Coerce(float), vol.Range(min=0, max=1, min_included=False)
        ),
    }
)

CONFIG_SCHEMA = vol.Schema(
    {
        vol.Required(CONF_SCHEMA_VERSION): vol.All(int, vol.In([SCHEMA_VERSION])),
        vol.Optional(CONF_SEED, default=0): vol.All(int, vol.Range(min=0, max=2**64 - 1)),
        vol.Optional(CONF_OUT, default="out"): str,
        vol.Optional(CONF_THREADS, default=0): vol.All(int, vol.Range(min=0)),
        vol.Required(CONF_MODEL): MODEL_SCHEMA,
        vol.Optional(CONF_PARTITIONS, default={}): PARTITIONS_SCHEMA,
        vol.Optional(CONF_SAMPLER, default={}): SAMPLER_SCHEMA,
        vol.Optional(CONF_OBJECTIVE, default={}): OBJECTIVE_SCHEMA,
        vol.Optional(CONF_EVALUATION, default={}): EVALUATION_SCHEMA,
    }
)


class ExperimentConfig:
    """Validated experiment settings with typed accessors."""

    def __init__(self, data: dict[str, Any], base_dir: Path | None = None) -> None:
        """Validate ``data``; relative data paths resolve against ``base_dir``."""
        try:
            self._data = CONFIG_SCHEMA(data)
        except vol.Invalid as err:
            raise ConfigError(f"invalid config: {err}") from err
        self._base_dir = base_dir or Path.cwd()
        self._check_model()
        self._sampler = self._build_sampler()
        self._objective = ObjectiveConfig(
            entropy=EntropyMode(self._data[CONF_OBJECTIVE][CONF_ENTROPY]),
            batch_size=self._data[CONF_OBJECTIVE][CONF_BATCH_SIZE],
            iterations=self._data[CONF_OBJECTIVE][CONF_ITERATIONS],
            step_a=self._data[CONF_OBJECTIVE][CONF_STEP_A],
            step_b=self._data[CONF_OBJECTIVE][CONF_STEP_B],
            floor=self._data[CONF_OBJECTIVE][CONF_FLOOR],
            mixture_gradient=MixtureGradient(self._data[CONF_OBJECTIVE][CONF_MIXTURE_GRADIENT]),
        )

    def _check_model(self) -> None:
        block = self._data[CONF_MODEL]
        if CONF_DATA not in block and CONF_SYNTHETIC not in block:
            raise ConfigError(f"invalid config: [{CONF_MODEL}] needs '{CONF_DATA}' or '{CONF_SYNTHETIC}'")
        if block[CONF_TYPE] == MODEL_MIXTURE and "clusters" not in block:
            raise ConfigError(f"invalid config: mixture model needs 'clusters' @ data['{CONF_MODEL}']")
        if CONF_DATA in block:
            path = Path(block[CONF_DATA])
            if not path.is_absolute():
                path = self._base_dir / path
            if not path.is_file():
                raise ConfigError(f"data file not found: {path}")
            block[CONF_DATA] = str(path)

    def _build_sampler(self) -> SamplerConfig:
        block = self._data[CONF_SAMPLER]
        try:
            return SamplerConfig(
                iterations=block[CONF_ITERATIONS],
                burn_in=block[CONF_BURN_IN],
                thin=block[CONF_THIN],
                seed=self._data[CONF_SEED],
                step_size=block[CONF_STEP_SIZE],
                leapfrog_steps=block[CONF_LEAPFROG_STEPS],
                tune=block[CONF_TUNE],
            )
        except SamplerError as err:
            raise ConfigError(f"invalid config: {err} @ data['{CONF_SAMPLER}']") from err

    @property
    def data(self) -> dict[str, Any]:
        return self._data

    @property
    def seed(self) -> int:
        return self._data[CONF_SEED]

    @property
    def out(self) -> Path:
        return Path(self._data[CONF_OUT])

    @property
    def threads(self) -> int:
        return self._data[CONF_THREADS]

    @property
    def model_block(self) -> dict[str, Any]:
        return self._data[CONF_MODEL]

    @property
    def model_tag(self) -> str:
        return self._data[CONF_MODEL][CONF_TYPE]

    @property
    def k_sweep(self) -> list[int]:
        return list(self._data[CONF_PARTITIONS][CONF_K])

    def tempering(self, k: int) -> TemperingMode:
        return TemperingMode(TemperingKind(self._data[CONF_PARTITIONS][CONF_MODE]), k)

    @property
    def sampler(self) -> SamplerConfig:
        return self._sampler

    @property
    def reference_sampler(self) -> SamplerConfig:
        """The serial reference chain, lengthened by the reference multiplier."""
        return self._sampler.lengthened(self._data[CONF_SAMPLER][CONF_REFERENCE_MULTIPLIER])

    @property
    def sample_format(self) -> str:
        return self._data[CONF_SAMPLER][CONF_FORMAT]

    @property
    def objective(self) -> ObjectiveConfig:
        return self._objective

    @property
    def suites(self) -> list[SuiteKind]:
        suites = self._data[CONF_EVALUATION].get(CONF_SUITES)
        if suites is None:
            return default_suites(self.model_tag)
        return [SuiteKind(kind) for kind in suites]

    @property
    def algorithms(self) -> list[Algorithm]:
        return [Algorithm(alg) for alg in self._data[CONF_EVALUATION][CONF_ALGORITHMS]]

    @property
    def test_points(self) -> int:
        return self._data[CONF_EVALUATION][CONF_TEST_POINTS]

    @property
    def trim_fraction(self) -> float:
        return self._data[CONF_EVALUATION][CONF_TRIM_FRACTION]

    @property
    def hash(self) -> str:
        return config_hash(self._data)

    def with_overrides(
        self, seed: int | None = None, out: str | Path | None = None, threads: int | None = None
    ) -> ExperimentConfig:
        """Return a copy with command-line overrides applied."""
        data = json.loads(json.dumps(self._data))
        if seed is not None:
            data[CONF_SEED] = seed
        if out is not None:
            data[CONF_OUT] = str(out)
        if threads is not None:
            data[CONF_THREADS] = threads
        return ExperimentConfig(data, self._base_dir)


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a TOML config (or its JSON mirror) and validate it."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        if path.suffix == ".json":
            data = json.loads(path.read_text())
        elif path.suffix == ".toml":
            with path.open("rb") as handle:
                data = tomllib.load(handle)
        else:
            raise ConfigError(f"unsupported config format '{path.suffix}': {path}")
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as err:
        raise ConfigError(f"{path}: {err}") from err
    _LOGGER.debug("Loaded config %s", path)
    return ExperimentConfig(data, path.parent.resolve())
