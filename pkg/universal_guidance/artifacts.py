"""
Run Artifacts

Writes the files of a run directory: samples.csv, metrics.json,
resolved_config.toml, trajectory.jsonl and scatter.svg. Output is
byte-identical for identical inputs, so nothing time-dependent is recorded.
"""

from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union
import json
import logging
import math

import numpy as np
import pandas as pd

from .errors import DimensionMismatchError

logger = logging.getLogger(__name__)

SAMPLES_NAME = "samples.csv"
METRICS_NAME = "metrics.json"
TRAJECTORY_NAME = "trajectory.jsonl"
SCATTER_NAME = "scatter.svg"

FLOAT_FORMAT = "%.17g"


def samples_frame(
    samples: np.ndarray,
    losses: np.ndarray,
    realness: np.ndarray,
    spec_names: Sequence[str],
    first_chain: int = 0,
) -> pd.DataFrame:
    """
    Build the samples table.

    Columns: chain_index, z0..z{d-1}, loss_<spec> per spec, realness.
    """
    samples = np.atleast_2d(samples)
    n, d = samples.shape
    losses = np.asarray(losses).reshape(n, -1)
    if losses.shape[1] != len(spec_names):
        raise DimensionMismatchError(f"{losses.shape[1]} loss columns for {len(spec_names)} specs")

    columns: Dict[str, Any] = {"chain_index": np.arange(first_chain, first_chain + n)}
    for j in range(d):
        columns[f"z{j}"] = samples[:, j]
    for j, name in enumerate(spec_names):
        columns[f"loss_{name}"] = losses[:, j]
    columns["realness"] = np.asarray(realness, dtype=float).reshape(n)
    return pd.DataFrame(columns)


def sample_columns(df: pd.DataFrame) -> List[str]:
    """The z0..z{d-1} columns of a samples table, in order."""
    cols = [c for c in df.columns if c.startswith("z") and c[1:].isdigit()]
    return sorted(cols, key=lambda c: int(c[1:]))


def read_samples(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path)


def _json_ready(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _json_ready(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_ready(v) for v in value]
    if isinstance(value, np.ndarray):
        return _json_ready(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return None if math.isnan(value) or math.isinf(value) else value
    if isinstance(value, np.bool_):
        return bool(value)
    return value


class RunArtifacts:
    """
    Writer for one run directory.

    Tracks what was written in a metadata dictionary that ends up in
    metrics.json next to the metrics themselves.
    """

    def __init__(self, output_dir: Union[str, Path]):
        """
        Initialize the writer.

        Args:
            output_dir: Run directory, created if missing
        """
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(exist_ok=True, parents=True)
        self.metadata: Dict[str, Any] = {"files": {}, "record_counts": {}}

    def path(self, name: str) -> Path:
        return self.output_dir / name

    def write_samples(self, df: pd.DataFrame) -> Path:
        path = self.path(SAMPLES_NAME)
        df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        self.metadata["files"]["samples"] = SAMPLES_NAME
        self.metadata["record_counts"]["samples"] = len(df)
        logger.info(f"Samples saved to {path}")
        return path

    def write_trajectory(self, trajectory) -> Path:
        path = trajectory.write_jsonl(self.path(TRAJECTORY_NAME))
        self.metadata["files"]["trajectory"] = TRAJECTORY_NAME
        self.metadata["record_counts"]["trajectory_steps"] = len(trajectory)
        return path

    def write_svg(self, svg_text: str) -> Path:
        path = self.path(SCATTER_NAME)
        path.write_text(svg_text, encoding="utf-8")
        self.metadata["files"]["scatter"] = SCATTER_NAME
        logger.info(f"Scatter plot saved to {path}")
        return path

    def note_file(self, key: str, name: str) -> None:
        self.metadata["files"][key] = name

    def save_metrics(self, metrics: Dict[str, Any], extra: Optional[Dict[str, Any]] = None) -> Path:
        """
        Save metrics and run metadata to metrics.json.

        Args:
            metrics: RunMetrics.to_dict() output
            extra: Additional run facts (seed, counts, sampler settings)
        """
        path = self.path(METRICS_NAME)
        self.metadata["files"]["metrics"] = METRICS_NAME
        payload = {"metrics": metrics, "run": extra or {}, "metadata": self.metadata}
        with open(path, "w") as f:
            json.dump(_json_ready(payload), f, indent=2, sort_keys=True)
            f.write("\n")
        logger.info(f"Metrics saved to {path}")
        return path


def write_table(df: pd.DataFrame, path: Union[str, Path], sep: str = "\t") -> Path:
    """Write an ablation or summary table."""
    path = Path(path)
    df.to_csv(path, sep=sep, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"Table saved to {path}")
    return path


def write_json(data: Dict[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    with open(path, "w") as f:
        json.dump(_json_ready(data), f, indent=2, sort_keys=True)
        f.write("\n")
    return path
