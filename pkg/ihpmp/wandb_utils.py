import os
from collections.abc import Mapping
from pathlib import Path
from typing import Any, TypeVar

import wandb
import yaml
from dotenv import load_dotenv
from pydantic import BaseModel

from ihpmp.log import logger
from ihpmp.utils import replace_pydantic_model

T = TypeVar("T", bound=BaseModel)

ARTIFACT_SUFFIXES = (".json", ".csv", ".yaml")


def init_wandb(
    config: T, project: str, sweep_config_path: Path | str | None = None, name: str | None = None
) -> T:
    """Initialize Weights & Biases and return a config updated with sweep hyperparameters.

    If a sweep config is provided, wandb is first initialized with it so that wandb picks the
    hyperparameters of this instance of the sweep and stores them in wandb.config. The config is
    then updated with these hyperparameters.

    Args:
        config: The base config.
        project: The name of the wandb project.
        sweep_config_path: The path to the sweep config file.
        name: The name of the wandb run.

    Returns:
        Config updated with sweep hyperparameters (if any).
    """
    if sweep_config_path is not None:
        with open(sweep_config_path) as f:
            sweep_data = yaml.safe_load(f)
        wandb.init(config=sweep_data, save_code=True, name=name)
    else:
        load_dotenv(override=True)
        wandb.init(project=project, entity=os.getenv("WANDB_ENTITY"), save_code=True, name=name)

    config = replace_pydantic_model(config, wandb.config)

    # Update the non-frozen keys in the wandb config (only relevant for sweeps)
    wandb.config.update(config.model_dump(mode="json"))
    return config


def scalar_metrics(data: Mapping[str, Any], prefix: str = "") -> dict[str, float]:
    """Flatten the numeric and boolean leaves of a nested mapping into `a/b/c` keys.

    Lists are skipped; their rows go to the CSV artifacts instead.
    """
    metrics: dict[str, float] = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            metrics.update(scalar_metrics(value, prefix=f"{name}/"))
        elif isinstance(value, bool | int | float):
            metrics[name] = float(value)
    return metrics


def log_report(report: BaseModel, out_dir: Path | None = None) -> dict[str, float]:
    """Log a report's scalar fields to the active run and upload the artifacts in `out_dir`."""
    metrics = scalar_metrics(report.model_dump(mode="json"))
    wandb.log(metrics)
    if out_dir is not None:
        for path in sorted(out_dir.iterdir()):
            if path.suffix in ARTIFACT_SUFFIXES:
                wandb.save(str(path), base_path=out_dir, policy="now")
    logger.info(f"Logged {len(metrics)} metrics to wandb")
    return metrics
