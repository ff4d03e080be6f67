"""
Run Configuration

Loads TOML run configs, validates them against the world they describe,
fills defaults, and writes the resolved config back out.

Example:
    config = load_config("scenarios/classifier.toml")
    specs = config.build_specs(config.build_world())
"""

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union
import copy
import logging
import os
import re
import sys

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError, UniversalGuidanceError
from .factory import GuidanceFactory
from .guidance import DEFAULT_BACKWARD_STEP_SIZE, DEFAULT_BACKWARD_STEPS, GuidanceSpec
from .models import AnalyticDenoiser, Denoiser, GaussianMixture, PerturbedDenoiser
from .sampler import SamplerConfig
from .schedule import (
    DEFAULT_BETA_MAX,
    DEFAULT_BETA_MIN,
    DEFAULT_T,
    NoiseSchedule,
    schedule_from_config,
)

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "UG_OUTPUT_DIR"
RESOLVED_CONFIG_NAME = "resolved_config.toml"

DEFAULT_WORLD = {
    "weights": [0.5, 0.5],
    "means": [[-3.0, 0.0], [3.0, 0.0]],
    "covariances": [[0.25, 0.25], [0.25, 0.25]],
}
DEFAULT_SCHEDULE = {"T": DEFAULT_T, "beta_min": DEFAULT_BETA_MIN, "beta_max": DEFAULT_BETA_MAX}
DEFAULT_SAMPLER = {"kind": "ddim", "recurrence_k": 1, "record_trajectory": False, "eta": 0.0}
DEFAULT_EVALUATION = {
    "n_chains": 1000,
    "oracle": "auto",
    "noise_var": 0.01,
    "reference_size": 2000,
    "permutations": 200,
    "svg": True,
}
DEFAULT_PERTURBATION = {"amplitude": 0.0, "seed": 0, "frequency": 1.0}
GUIDANCE_DEFAULTS = {
    "w": 1.0,
    "m": DEFAULT_BACKWARD_STEPS,
    "step_size": DEFAULT_BACKWARD_STEP_SIZE,
    "weight": 1.0,
}

TOP_LEVEL_KEYS = {
    "seed", "output_dir", "name", "description",
    "schedule", "world", "sampler", "guidance", "evaluation", "reference",
}
WORLD_KEYS = {"weights", "means", "covariances", "perturbation"}
GUIDANCE_COMMON_KEYS = {"kind", "name", "w", "m", "step_size", "weight", "reference_w"}
GUIDANCE_KIND_KEYS = {
    "component-classifier": {"target", "temperature"},
    "noisy-classifier": {"target"},
    "linear-inverse": {"A", "y"},
    "label-field": {"labels", "temperature"},
    "embedding-match": {"W", "target", "mode"},
}
REFERENCE_KEYS = {"w", "k", "note"}
ORACLE_CHOICES = {"auto", "world", "none"}

# reference_w values belong to image-scale losses; w is re-tuned for the
# analytic worlds with the same s(t) = w * sqrt(1 - alpha_t) shape.
SCENARIO_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "unguided": {"reference_w": None, "reference_k": None, "w": 0.0, "k": 1},
    "classifier": {"reference_w": 400.0, "reference_k": 10, "w": 1.5, "k": 1},
    "clip-analog": {"reference_w": 10.0, "reference_k": 8, "w": 1.0, "k": 8},
    "segmentation-analog": {"reference_w": 400.0, "reference_k": 10, "w": 2.0, "k": 10},
    "face-analog": {"reference_w": 20000.0, "reference_k": 2, "w": 1.0, "k": 2},
    "object-location-analog": {"reference_w": 100.0, "reference_k": 3, "w": 1.0, "k": 3},
    "inpainting-multi": {"reference_w": 200.0, "reference_k": 1, "w": 2.0, "k": 1},
}


# ---------------------------------------------------------------------------
# Bundled scenarios
# ---------------------------------------------------------------------------

def list_scenarios() -> List[str]:
    """
    List bundled scenario names.

    Returns:
        Sorted scenario names
    """
    folder = resources.files("universal_guidance") / "scenarios"
    return sorted(p.name[: -len(".toml")] for p in folder.iterdir() if p.name.endswith(".toml"))


def scenario_path(name: str) -> Path:
    """
    Path of a bundled scenario file.

    Raises:
        ConfigError: If no scenario has that name
    """
    target = resources.files("universal_guidance") / "scenarios" / f"{name}.toml"
    if not target.is_file():
        raise ConfigError(
            f"Unknown scenario: {name}. Available: {', '.join(list_scenarios())}", key="scenario"
        )
    return Path(str(target))


def resolve_config_path(ref: Union[str, Path]) -> Path:
    """A config file path, or the bundled scenario of that name."""
    path = Path(ref)
    if path.exists() or path.suffix == ".toml":
        return path
    return scenario_path(str(ref))


# ---------------------------------------------------------------------------
# RunConfig
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """
    Validated run configuration with every default filled in.

    Blocks stay as plain dictionaries so the resolved config can be dumped
    and reloaded unchanged.
    """
    name: str = "run"
    description: str = ""
    seed: int = 0
    output_dir: Optional[str] = None
    schedule: Dict[str, Any] = field(default_factory=lambda: dict(DEFAULT_SCHEDULE))
    world: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(DEFAULT_WORLD))
    sampler: Dict[str, Any] = field(default_factory=lambda: dict(DEFAULT_SAMPLER))
    guidance: List[Dict[str, Any]] = field(default_factory=list)
    evaluation: Dict[str, Any] = field(default_factory=lambda: dict(DEFAULT_EVALUATION))
    reference: Dict[str, Any] = field(default_factory=dict)
    source: Optional[Path] = field(default=None, compare=False)

    @property
    def n_chains(self) -> int:
        return int(self.evaluation["n_chains"])

    def build_schedule(self) -> NoiseSchedule:
        return schedule_from_config(self.schedule)

    def build_world(self) -> GaussianMixture:
        return GaussianMixture.from_dict(self.world)

    def build_denoiser(self, gmm: GaussianMixture, schedule: NoiseSchedule) -> Denoiser:
        """Analytic denoiser, wrapped in a perturbation when amplitude > 0."""
        denoiser: Denoiser = AnalyticDenoiser(gmm, schedule)
        perturbation = self.world.get("perturbation")
        if perturbation and perturbation["amplitude"] > 0.0:
            denoiser = PerturbedDenoiser(
                denoiser,
                amplitude=perturbation["amplitude"],
                seed=perturbation["seed"],
                frequency=perturbation["frequency"],
            )
        return denoiser

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            kind=self.sampler["kind"],
            recurrence_k=self.sampler["recurrence_k"],
            seed=self.seed,
            record_trajectory=self.sampler["record_trajectory"],
            eta=self.sampler["eta"],
        )

    def build_specs(self, gmm: GaussianMixture) -> List[GuidanceSpec]:
        """Guidance specs in declaration order."""
        specs = []
        for decl in self.guidance:
            params = {
                k: v for k, v in decl.items() if k not in GUIDANCE_COMMON_KEYS
            }
            specs.append(
                GuidanceFactory.create_spec(
                    decl["kind"],
                    gmm=gmm,
                    w=decl["w"],
                    m=decl["m"],
                    step_size=decl["step_size"],
                    weight=decl["weight"],
                    name=decl.get("name"),
                    **params,
                )
            )
        return specs

    def with_overrides(
        self, seed: Optional[int] = None, output_dir: Optional[str] = None
    ) -> "RunConfig":
        resolved = copy.deepcopy(self)
        if seed is not None:
            resolved.seed = int(seed)
        if output_dir is not None:
            resolved.output_dir = str(output_dir)
        return resolved

    def to_dict(self) -> Dict:
        """Convert to dictionary"""
        data: Dict[str, Any] = {
            "name": self.name,
            "description": self.description,
            "seed": self.seed,
        }
        if self.output_dir is not None:
            data["output_dir"] = self.output_dir
        data["schedule"] = dict(self.schedule)
        data["world"] = copy.deepcopy(self.world)
        data["sampler"] = dict(self.sampler)
        data["evaluation"] = dict(self.evaluation)
        if self.reference:
            data["reference"] = dict(self.reference)
        if self.guidance:
            data["guidance"] = copy.deepcopy(self.guidance)
        return data

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save_resolved(self, directory: Union[str, Path]) -> Path:
        """
        Save the resolved config as resolved_config.toml.

        Args:
            directory: Run output directory
        """
        path = Path(directory) / RESOLVED_CONFIG_NAME
        with open(path, "wb") as f:
            tomli_w.dump(self.to_dict(), f)
        logger.info(f"Resolved config saved to {path}")
        return path


def resolve_output_dir(config: RunConfig, cli_out: Optional[Union[str, Path]] = None) -> Path:
    """--out > UG_OUTPUT_DIR > config output_dir > ./runs/<name>."""
    if cli_out:
        return Path(cli_out)
    env_out = os.getenv(OUTPUT_DIR_ENV)
    if env_out:
        return Path(env_out)
    if config.output_dir:
        return Path(config.output_dir)
    return Path.cwd() / "runs" / config.name


# ---------------------------------------------------------------------------
# Loading and validation
# ---------------------------------------------------------------------------

def _line_of(text: Optional[str], key: str) -> Optional[int]:
    if not text:
        return None
    leaf = re.escape(key.split(".")[-1].split("[")[0])
    pattern = re.compile(rf"^\s*(\[+\s*)?[\w.\"-]*\b{leaf}\b")
    for number, line in enumerate(text.splitlines(), start=1):
        if pattern.match(line):
            return number
    return None


def _reject_unknown(block: Mapping, allowed, prefix: str, text: Optional[str]) -> None:
    for key in block:
        if key not in allowed:
            dotted = f"{prefix}.{key}" if prefix else key
            raise ConfigError(f"Unknown config key: {dotted}", key=dotted, line=_line_of(text, key))


def _table(data: Mapping, key: str, text: Optional[str]) -> Dict:
    value = data.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(f"'{key}' must be a table", key=key, line=_line_of(text, key))
    return value


def _merge(defaults: Mapping, given: Mapping) -> Dict:
    merged = dict(defaults)
    merged.update(given)
    return merged


def _resolve_guidance(index: int, decl: Mapping, text: Optional[str]) -> Dict:
    prefix = f"guidance[{index}]"
    if "kind" not in decl:
        raise ConfigError("guidance declaration needs a kind", key=f"{prefix}.kind")
    try:
        kind = GuidanceFactory.canonical_kind(decl["kind"])
    except UniversalGuidanceError as e:
        raise ConfigError(str(e), key=f"{prefix}.kind", line=_line_of(text, "kind")) from e
    _reject_unknown(decl, GUIDANCE_COMMON_KEYS | GUIDANCE_KIND_KEYS[kind], prefix, text)
    resolved = _merge(GUIDANCE_DEFAULTS, decl)
    resolved["kind"] = kind
    for key in ("w", "step_size", "weight"):
        resolved[key] = float(resolved[key])
    return resolved


def config_from_dict(
    data: Mapping, text: Optional[str] = None, source: Optional[Path] = None
) -> RunConfig:
    """
    Validate a parsed config and fill defaults.

    Args:
        data: Parsed TOML document
        text: Original text, used to point errors at a line
        source: File the config came from

    Returns:
        RunConfig

    Raises:
        ConfigError: Naming the offending key
    """
    _reject_unknown(data, TOP_LEVEL_KEYS, "", text)

    schedule = _table(data, "schedule", text)
    _reject_unknown(schedule, DEFAULT_SCHEDULE.keys(), "schedule", text)
    world = _table(data, "world", text)
    _reject_unknown(world, WORLD_KEYS, "world", text)
    sampler = _table(data, "sampler", text)
    _reject_unknown(sampler, DEFAULT_SAMPLER.keys(), "sampler", text)
    evaluation = _table(data, "evaluation", text)
    _reject_unknown(evaluation, DEFAULT_EVALUATION.keys(), "evaluation", text)
    reference = _table(data, "reference", text)
    _reject_unknown(reference, REFERENCE_KEYS, "reference", text)

    declarations = data.get("guidance", [])
    if not isinstance(declarations, list):
        raise ConfigError("'guidance' must be an array of tables", key="guidance")

    if world:
        missing = {"weights", "means", "covariances"} - set(world)
        if missing:
            key = f"world.{sorted(missing)[0]}"
            raise ConfigError(f"world is missing {', '.join(sorted(missing))}", key=key)
        world_resolved = copy.deepcopy(dict(world))
    else:
        world_resolved = copy.deepcopy(DEFAULT_WORLD)
    if "perturbation" in world_resolved:
        perturbation = world_resolved["perturbation"]
        _reject_unknown(perturbation, DEFAULT_PERTURBATION.keys(), "world.perturbation", text)
        world_resolved["perturbation"] = _merge(DEFAULT_PERTURBATION, perturbation)

    evaluation_resolved = _merge(DEFAULT_EVALUATION, evaluation)
    if evaluation_resolved["oracle"] not in ORACLE_CHOICES:
        raise ConfigError(
            f"Unknown oracle: {evaluation_resolved['oracle']}. "
            f"Available: {', '.join(sorted(ORACLE_CHOICES))}",
            key="evaluation.oracle",
            line=_line_of(text, "oracle"),
        )

    config = RunConfig(
        name=str(data.get("name", source.stem if source else "run")),
        description=str(data.get("description", "")),
        seed=int(data.get("seed", 0)),
        output_dir=data.get("output_dir"),
        schedule=_merge(DEFAULT_SCHEDULE, schedule),
        world=world_resolved,
        sampler=_merge(DEFAULT_SAMPLER, sampler),
        guidance=[_resolve_guidance(i, decl, text) for i, decl in enumerate(declarations)],
        evaluation=evaluation_resolved,
        reference=dict(reference),
        source=source,
    )
    validate_config(config, text)
    return config


def validate_config(config: RunConfig, text: Optional[str] = None) -> None:
    """
    Build every object the config describes to check shapes and ranges.

    Raises:
        ConfigError: Naming the block that failed
    """
    def check(key: str, build):
        try:
            return build()
        except (UniversalGuidanceError, ValueError, TypeError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"Invalid {key}: {e}", key=key, line=_line_of(text, key)) from e

    check("schedule", config.build_schedule)
    gmm = check("world", config.build_world)
    check("sampler", config.sampler_config)
    if config.n_chains < 1:
        raise ConfigError(
            "n_chains must be >= 1", key="evaluation.n_chains", line=_line_of(text, "n_chains")
        )
    for index, decl in enumerate(config.guidance):
        _check_dimensions(index, decl, gmm.dim, text)
        single = copy.copy(config)
        single.guidance = [decl]
        check(f"guidance[{index}]", lambda: single.build_specs(gmm))
    perturbation = config.world.get("perturbation")
    if perturbation and perturbation["amplitude"] < 0.0:
        raise ConfigError("perturbation amplitude must be >= 0", key="world.perturbation.amplitude")


def _check_dimensions(index: int, decl: Mapping, d: int, text: Optional[str]) -> None:
    """Every matrix or label vector must act on the world's d coordinates."""
    for key in ("A", "W", "labels"):
        if key not in decl:
            continue
        value = decl[key]
        dotted = f"guidance[{index}].{key}"
        if not isinstance(value, list) or not value:
            raise ConfigError(
                f"{key} must be a nonempty array", key=dotted, line=_line_of(text, key)
            )
        rows = value if key != "labels" and isinstance(value[0], list) else [value]
        widths = {len(row) if isinstance(row, list) else -1 for row in rows}
        if widths != {d}:
            raise ConfigError(
                f"{key} must have {d} columns to match the world dimension",
                key=dotted,
                line=_line_of(text, key),
            )


def _decode_line(error: Exception) -> Optional[int]:
    line = getattr(error, "lineno", None)
    if line is not None:
        return int(line)
    match = re.search(r"line (\d+)", str(error))
    return int(match.group(1)) if match else None


def load_config(path: Union[str, Path]) -> RunConfig:
    """
    Load and validate a run config.

    Args:
        path: TOML file, or the name of a bundled scenario

    Returns:
        RunConfig with defaults filled in

    Raises:
        ConfigError: On parse or validation failure
        OSError: If the file cannot be read
    """
    path = resolve_config_path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Cannot parse {path}: {e}", line=_decode_line(e)) from e
    config = config_from_dict(data, text=text, source=path)
    logger.debug(f"Loaded config '{config.name}' from {path}")
    return config
