import random
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, TypeVar

import numpy as np
import yaml
from jaxtyping import Float
from pydantic import BaseModel
from pydantic.v1.utils import deep_update
from tqdm import tqdm

from ihpmp.settings import REPO_ROOT

T = TypeVar("T", bound=BaseModel)
A = TypeVar("A")
R = TypeVar("R")

CONFIG_SUFFIXES = (".yaml", ".yml", ".json")


def to_root_path(path: str | Path) -> Path:
    """Converts relative paths to absolute ones, assuming they are relative to the repo root."""
    return Path(path) if Path(path).is_absolute() else Path(REPO_ROOT / path)


def from_root_path(path: str | Path) -> Path:
    """Converts absolute paths to relative ones, relative to the repo root."""
    path = Path(path)
    try:
        return path.relative_to(REPO_ROOT)
    except ValueError:
        # If the path is not relative to REPO_ROOT, return the original path
        return path


def set_seed(seed: int | None) -> None:
    """Set the random seed for random and NumPy."""
    if seed is not None:
        np.random.seed(seed)
        random.seed(seed)


def read_config_file(path: Path | str) -> dict[str, Any]:
    """Read a YAML (or JSON, which is a subset of YAML) mapping from disk."""
    path = Path(path)
    if path.suffix not in CONFIG_SUFFIXES:
        raise ValueError(f"Config file {path} must end in one of {CONFIG_SUFFIXES}")
    if not path.exists():
        raise FileNotFoundError(f"Config file {path} does not exist")
    with open(path) as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise ValueError(f"Config file {path} does not contain a mapping")
    return data


def load_config(config_path_or_obj: Path | str | T, config_model: type[T]) -> T:
    """Load the config of class `config_model`, either from a file or an existing config object.

    Args:
        config_path_or_obj: if config object, must be instance of `config_model`. If str or Path,
            this must be the path to a .yaml (or .json) file.
        config_model: the class of the config that we are loading
    """
    if isinstance(config_path_or_obj, config_model):
        return config_path_or_obj
    assert isinstance(
        config_path_or_obj, str | Path
    ), f"passed config is of invalid type {type(config_path_or_obj)}"
    return config_model(**read_config_file(config_path_or_obj))


BaseModelType = TypeVar("BaseModelType", bound=BaseModel)


def replace_pydantic_model(model: BaseModelType, *updates: dict[str, Any]) -> BaseModelType:
    """Create a new model with (potentially nested) updates in the form of dictionaries.

    Args:
        model: The model to update.
        updates: The zero or more dictionaries of updates that will be applied sequentially.

    Returns:
        A replica of the model with the updates applied.

    Examples:
        >>> class Tol(BaseModel):
        ...     adjoint: float
        ...     max_condition: float
        >>> class Run(BaseModel):
        ...     tol: Tol
        >>> run = Run(tol={"adjoint": 1e-6, "max_condition": 1e-4})
        >>> replace_pydantic_model(run, {"tol": {"adjoint": 1e-8}})
        Run(tol=Tol(adjoint=1e-08, max_condition=0.0001))
    """
    return model.__class__(**deep_update(model.model_dump(), *updates))


def parallel_map(
    fn: Callable[[A], R],
    items: Sequence[A],
    jobs: int = 1,
    desc: str | None = None,
    progress: bool = False,
) -> list[R]:
    """Apply `fn` to every item, on up to `jobs` threads, returning results in input order."""
    assert jobs >= 1, f"jobs must be positive, got {jobs}"
    if jobs == 1 or len(items) <= 1:
        return [fn(item) for item in tqdm(items, desc=desc, disable=not progress)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(tqdm(pool.map(fn, items), total=len(items), desc=desc, disable=not progress))


def as_vector(values: float | Sequence[float] | np.ndarray, dim: int, name: str) -> np.ndarray:
    """Coerce a scalar or sequence into a float vector of length `dim`."""
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    if arr.shape == (1,) and dim > 1:
        arr = np.full(dim, arr[0])
    if arr.shape != (dim,):
        raise ValueError(f"{name} must have {dim} entries, got shape {arr.shape}")
    return arr


def to_tuple(values: np.ndarray) -> tuple[float, ...]:
    return tuple(float(v) for v in np.ravel(values))


def successive_differences(values: Float[np.ndarray, "n m"]) -> Float[np.ndarray, "n-1"]:
    """Norms of consecutive differences, the quantity tested by every Cauchy criterion here."""
    return np.linalg.norm(np.diff(values, axis=0), axis=-1)


def save_csv(path: Path, header: Sequence[str], rows: np.ndarray) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.atleast_2d(rows), delimiter=",", header=",".join(header), comments="")
    return path


def write_json(path: Path, model: BaseModel) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(model.model_dump_json(indent=2) + "\n")
    return path


def write_yaml(path: Path, model: BaseModel) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.dump(model.model_dump(mode="json"), f, indent=2)
    return path
