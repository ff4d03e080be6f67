"""
Command-line interface.

    universal-guidance run <config> [--out DIR] [--seed N] [--dry-run]
    universal-guidance ablate <config> --grid "k=1,4,10" | "m=0,5;w=1,2"
    universal-guidance plot <samples.csv> --world <config> [--out FILE]
    universal-guidance list

<config> is a TOML file or the name of a bundled scenario. The output
directory resolves as --out > UG_OUTPUT_DIR > config output_dir >
./runs/<name>. Exit codes: 0 success, 2 config error, 3 numerical abort,
4 I/O error.
"""

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union
import argparse
import logging
import sys

import numpy as np

from .artifacts import (
    RunArtifacts,
    read_samples,
    sample_columns,
    samples_frame,
    write_json,
    write_table,
)
from .config import SCENARIO_DEFAULTS, RunConfig, list_scenarios, load_config, resolve_output_dir
from .errors import ConfigError, UniversalGuidanceError
from .evaluation import (
    ABLATION_COLUMNS,
    World,
    ablation_forward_vs_backward,
    ablation_recurrence,
    compute_run_metrics,
    default_oracle,
    evaluation_rng,
    spec_names,
)
from .models import gmm_log_density, gmm_sample
from .plotting import emit_scatter_svg
from .sampler import UniversalGuidanceSampler

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the process exit status."""
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, OSError):
        return EXIT_IO
    return EXIT_NUMERICAL


def _oracle(config: RunConfig, gmm, specs, rng) -> Optional[np.ndarray]:
    choice = config.evaluation["oracle"]
    size = int(config.evaluation["reference_size"])
    if choice == "none":
        return None
    if choice == "world":
        return gmm_sample(gmm, size, rng)
    return default_oracle(gmm, specs, size, rng, noise_var=config.evaluation["noise_var"])


def execute_run(config: RunConfig, output_dir: Union[str, Path]) -> Path:
    """
    Sample, score and write every artifact of a run.

    Args:
        config: Validated run config
        output_dir: Run directory

    Returns:
        Path of the run directory

    Raises:
        UniversalGuidanceError: On numerical aborts, with chain context
        OSError: If artifacts cannot be written
    """
    config = config.with_overrides(output_dir=str(output_dir))
    schedule = config.build_schedule()
    gmm = config.build_world()
    denoiser = config.build_denoiser(gmm, schedule)
    specs = config.build_specs(gmm)
    sampler_config = config.sampler_config()
    names = spec_names(specs)

    logger.info(
        f"Running '{config.name}': {config.n_chains} chain(s), {len(specs)} guidance spec(s), "
        f"k={sampler_config.recurrence_k}, seed={config.seed}"
    )
    sampler = UniversalGuidanceSampler(sampler_config, schedule, denoiser, specs)
    result = sampler.sample(config.n_chains)

    rng = evaluation_rng(config.seed)
    oracle = _oracle(config, gmm, specs, rng)
    permutations = int(config.evaluation["permutations"]) if oracle is not None else 0
    metrics = compute_run_metrics(
        result.samples, specs, gmm, oracle, rng=rng, n_permutations=permutations
    )

    artifacts = RunArtifacts(output_dir)
    realness = gmm_log_density(gmm, result.samples)
    artifacts.write_samples(samples_frame(result.samples, result.losses, realness, names))
    config.save_resolved(artifacts.output_dir)
    artifacts.note_file("resolved_config", "resolved_config.toml")
    if result.trajectory is not None:
        artifacts.write_trajectory(result.trajectory)
    if config.evaluation["svg"]:
        if gmm.dim == 2:
            artifacts.write_svg(emit_scatter_svg(result.samples, gmm, specs))
        else:
            logger.warning(f"Skipping scatter.svg: world has d = {gmm.dim}")

    artifacts.save_metrics(
        metrics.to_dict(),
        extra={
            "name": config.name,
            "seed": config.seed,
            "n_chains": config.n_chains,
            "guidance": names,
            "sampler": sampler_config.to_dict(),
            "denoiser_calls": result.denoiser_calls,
            "recurrence_draws": result.recurrence_draws,
            "oracle": config.evaluation["oracle"] if oracle is not None else "none",
        },
    )
    return artifacts.output_dir


def run_scenario(config: RunConfig, output_dir: Union[str, Path]) -> int:
    """
    Run a config and write its artifacts.

    Args:
        config: Validated run config
        output_dir: Run directory

    Returns:
        Exit status (0 on success, 3 numerical abort, 4 I/O error)
    """
    try:
        execute_run(config, output_dir)
    except (UniversalGuidanceError, ArithmeticError, OSError) as e:
        logger.error(f"Run '{config.name}' aborted: {e}")
        return exit_code_for(e)
    return EXIT_OK


def parse_grid(text: str) -> Dict[str, List[float]]:
    """
    Parse "k=1,4,10" or "m=0,5;w=1,2".

    Raises:
        ConfigError: On unknown axes or unparsable values
    """
    grid: Dict[str, List[float]] = {}
    for part in filter(None, (p.strip() for p in text.split(";"))):
        if "=" not in part:
            raise ConfigError(f"Grid axis '{part}' needs the form name=v1,v2", key="grid")
        axis, values = (s.strip() for s in part.split("=", 1))
        if axis not in ("k", "m", "w"):
            raise ConfigError(f"Unknown grid axis: {axis}. Available: k, m, w", key="grid")
        try:
            grid[axis] = [float(v) for v in values.split(",") if v.strip()]
        except ValueError as e:
            raise ConfigError(f"Bad grid values for {axis}: {values}", key="grid") from e
        if not grid[axis]:
            raise ConfigError(f"Grid axis {axis} has no values", key="grid")
    if not grid:
        raise ConfigError("Empty grid", key="grid")
    if "k" in grid and len(grid) > 1:
        raise ConfigError("Grid over k cannot be combined with m or w", key="grid")
    return grid


def run_ablation(
    config: RunConfig, grid: Dict[str, List[float]], output_dir: Union[str, Path]
) -> Path:
    """Run a k grid or an (m, w) grid and write ablation.tsv and ablation.json."""
    schedule = config.build_schedule()
    gmm = config.build_world()
    specs = config.build_specs(gmm)
    world = World(gmm, schedule, config.sampler_config(), config.build_denoiser(gmm, schedule))
    spec = specs[0] if specs else None
    if len(specs) > 1:
        logger.warning(f"Ablating the first of {len(specs)} guidance specs")

    if "k" in grid:
        report = ablation_recurrence(world, spec, [int(k) for k in grid["k"]], config.n_chains)
    else:
        if spec is None:
            raise ConfigError("An (m, w) grid needs a guidance spec", key="guidance")
        m_values = [int(m) for m in grid.get("m", [0, spec.backward_steps])]
        w_values = grid.get("w", [spec.strength.w])
        report = ablation_forward_vs_backward(world, spec, m_values, w_values, config.n_chains)

    output_dir = Path(output_dir)
    output_dir.mkdir(exist_ok=True, parents=True)
    write_table(report.table[ABLATION_COLUMNS], output_dir / "ablation.tsv")
    write_json(report.to_dict(), output_dir / "ablation.json")
    return output_dir


def _configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="universal-guidance",
        description="Universal guidance sampling on analytic Gaussian-mixture worlds",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")
    verbs = parser.add_subparsers(dest="verb", required=True)

    run = verbs.add_parser("run", help="Sample a scenario and write its artifacts")
    run.add_argument("config", help="TOML config file or bundled scenario name")
    run.add_argument(
        "--out", help="Output directory (CLI > env:UG_OUTPUT_DIR > config > ./runs/<name>)"
    )
    run.add_argument("--seed", type=int, help="Override the config seed")
    run.add_argument(
        "--dry-run", action="store_true", help="Validate and print the resolved config"
    )

    ablate = verbs.add_parser("ablate", help="Run a k grid or an (m, w) grid")
    ablate.add_argument("config", help="TOML config file or bundled scenario name")
    ablate.add_argument("--grid", required=True, help='"k=1,4,10" or "m=0,5;w=1,2"')
    ablate.add_argument("--out", help="Output directory")
    ablate.add_argument("--seed", type=int, help="Override the config seed")

    plot = verbs.add_parser("plot", help="Render samples.csv as scatter.svg")
    plot.add_argument("samples", help="samples.csv of a run")
    plot.add_argument("--world", required=True, help="Config whose world and guidance are drawn")
    plot.add_argument("--out", help="SVG path (default: scatter.svg next to the samples)")

    verbs.add_parser("list", help="List bundled scenarios")
    return parser


def _cmd_run(args) -> int:
    config = load_config(args.config).with_overrides(seed=args.seed)
    output_dir = resolve_output_dir(config, args.out)
    if args.dry_run:
        sys.stdout.write(config.with_overrides(output_dir=str(output_dir)).to_toml())
        return EXIT_OK
    return run_scenario(config, output_dir)


def _cmd_ablate(args) -> int:
    config = load_config(args.config).with_overrides(seed=args.seed)
    grid = parse_grid(args.grid)
    output_dir = resolve_output_dir(config, args.out)
    run_ablation(config, grid, output_dir)
    print((output_dir / "ablation.tsv").read_text(), end="")
    return EXIT_OK


def _cmd_plot(args) -> int:
    config = load_config(args.world)
    gmm = config.build_world()
    df = read_samples(args.samples)
    samples = df[sample_columns(df)].to_numpy(dtype=float)
    svg = emit_scatter_svg(samples, gmm, config.build_specs(gmm))
    out = Path(args.out) if args.out else Path(args.samples).with_name("scatter.svg")
    out.write_text(svg, encoding="utf-8")
    logger.info(f"Scatter plot saved to {out}")
    return EXIT_OK


def _cmd_list(args) -> int:
    for name in list_scenarios():
        defaults = SCENARIO_DEFAULTS.get(name, {})
        reference_w = defaults.get("reference_w")
        if reference_w is not None:
            reference = f"reference w={reference_w:g}, k={defaults.get('reference_k')}"
        else:
            reference = "no reference value"
        print(f"{name:<24} w={defaults.get('w', '?')}, k={defaults.get('k', '?')}  ({reference})")
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "ablate": _cmd_ablate, "plot": _cmd_plot, "list": _cmd_list}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose, args.quiet)
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (UniversalGuidanceError, ArithmeticError, OSError) as e:
        logger.error(f"Aborted: {e}")
        print(f"error: {e}", file=sys.stderr)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
