"""Dataset loading and seeded synthetic generators for the three models."""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray
from scipy.special import ndtr
from scipy.stats import ortho_group

from .const import CONF_DATA, CONF_SYNTHETIC, CONF_TYPE, MODEL_MIXTURE, MODEL_NIW, MODEL_PROBIT
from .exceptions import ConfigError
from .models import MixtureSpec, ModelSpec, NIWSpec, ProbitSpec

_LOGGER = logging.getLogger(__name__)

LABEL_COLUMN = "y"


@dataclass(frozen=True, eq=False)
class Dataset:
    """A model instance plus whatever the generator knows about the truth."""

    model: ModelSpec
    truth: dict[str, NDArray[np.float64]] = field(default_factory=dict)
    source: str = "synthetic"


def read_csv(path: str | Path) -> tuple[list[str], NDArray[np.float64]]:
    """Read a headered numeric CSV into (column names, N x C matrix)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"data file not found: {path}")
    with path.open() as handle:
        header = handle.readline().strip()
    if not header:
        raise ConfigError(f"data file has no header row: {path}")
    columns = [name.strip() for name in header.split(",")]
    try:
        values = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
    except ValueError as err:
        raise ConfigError(f"could not parse {path}: {err}") from err
    if values.size == 0:
        values = np.zeros((0, len(columns)))
    if values.shape[1] != len(columns):
        raise ConfigError(f"{path}: {values.shape[1]} values per row but {len(columns)} columns")
    _LOGGER.debug("Loaded %d rows x %d columns from %s", values.shape[0], len(columns), path)
    return columns, values


def generate_probit(
    n: int, d: int, seed: int, sigma2: float = 1.0
) -> Dataset:
    """Intercept plus d-1 standard normal covariates; labels from a drawn beta."""
    rng = np.random.default_rng(seed)
    x = np.ones((n, d))
    if d > 1:
        x[:, 1:] = rng.standard_normal((n, d - 1))
    beta = rng.standard_normal(d)
    y = (rng.random(n) < ndtr(x @ beta)).astype(np.int64)
    return Dataset(ProbitSpec(x=x, y=y, sigma2=sigma2), {"beta": beta})


def generate_niw(
    n: int,
    d: int,
    seed: int,
    nu: float | None = None,
    scale: NDArray[np.float64] | None = None,
    eigen_range: tuple[float, float] = (0.5, 5.0),
) -> Dataset:
    """Gaussian data whose covariance has a geometric spectrum in a random basis."""
    rng = np.random.default_rng(seed)
    spectrum = np.geomspace(eigen_range[1], eigen_range[0], d)
    basis = np.eye(d) if d == 1 else ortho_group.rvs(d, random_state=rng)
    covariance = basis @ np.diag(spectrum) @ basis.T
    x = rng.multivariate_normal(np.zeros(d), covariance, size=n)
    model = NIWSpec(
        x=x,
        nu=float(d + 2) if nu is None else float(nu),
        scale=np.eye(d) if scale is None else np.asarray(scale, dtype=np.float64),
    )
    return Dataset(model, {"covariance": covariance, "precision": np.linalg.inv(covariance)})


def generate_mixture(
    n: int,
    d: int,
    n_clusters: int,
    seed: int,
    tau2: float = 4.0,
    sigma2: float = 1.0,
) -> Dataset:
    """Centers from the prior, uniform assignments, isotropic noise."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, np.sqrt(tau2), size=(n_clusters, d))
    labels = rng.integers(n_clusters, size=n)
    x = centers[labels] + np.sqrt(sigma2) * rng.standard_normal((n, d))
    model = MixtureSpec(x=x, n_clusters=n_clusters, tau2=tau2, sigma2=sigma2)
    return Dataset(model, {"centers": centers, "labels": labels.astype(np.float64)})


def generate_test_points(
    centers: NDArray[np.float64], sigma2: float, n: int, seed: int
) -> NDArray[np.float64]:
    """Fresh held-out points from the mixture with the given true centers."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(centers.shape[0], size=n)
    return centers[labels] + np.sqrt(sigma2) * rng.standard_normal((n, centers.shape[1]))


def _load_model_from_csv(block: dict[str, Any]) -> Dataset:
    columns, values = read_csv(block[CONF_DATA])
    kind = block[CONF_TYPE]
    if kind == MODEL_PROBIT:
        if LABEL_COLUMN not in columns:
            raise ConfigError(f"probit data needs a '{LABEL_COLUMN}' column: {block[CONF_DATA]}")
        label_idx = columns.index(LABEL_COLUMN)
        features = np.delete(values, label_idx, axis=1)
        model: ModelSpec = ProbitSpec(
            x=features, y=values[:, label_idx], sigma2=block.get("sigma2", 1.0)
        )
    elif kind == MODEL_NIW:
        d = values.shape[1]
        model = NIWSpec(
            x=values,
            nu=block.get("nu", d + 2),
            scale=np.asarray(block.get("scale", np.eye(d)), dtype=np.float64),
            mu=block.get("mu"),
        )
    else:
        model = MixtureSpec(
            x=values,
            n_clusters=block["clusters"],
            tau2=block.get("tau2", 4.0),
            sigma2=block.get("sigma2", 1.0),
            weights=block.get("weights"),
        )
    return Dataset(model, source=str(block[CONF_DATA]))


def build_dataset(block: dict[str, Any]) -> Dataset:
    """Build the model described by a validated ``[model]`` config block."""
    if block.get(CONF_DATA):
        return _load_model_from_csv(block)

    synthetic = block[CONF_SYNTHETIC]
    kind = block[CONF_TYPE]
    n, d, seed = synthetic["n"], synthetic["d"], synthetic["seed"]
    if kind == MODEL_PROBIT:
        return generate_probit(n, d, seed, sigma2=block.get("sigma2", 1.0))
    if kind == MODEL_NIW:
        scale = block.get("scale")
        return generate_niw(
            n,
            d,
            seed,
            nu=block.get("nu"),
            scale=None if scale is None else np.asarray(scale, dtype=np.float64),
            eigen_range=tuple(synthetic.get("eigen_range", (0.5, 5.0))),
        )
    if kind == MODEL_MIXTURE:
        return generate_mixture(
            n,
            d,
            block["clusters"],
            seed,
            tau2=block.get("tau2", 4.0),
            sigma2=block.get("sigma2", 1.0),
        )
    raise ConfigError(f"unknown model type: {kind}")
