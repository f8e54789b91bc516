"""
Command-line interface.

Subcommands: verify-theory, gen-model, gen-data, calibrate, evaluate
and ablate. Every subcommand resolves its configuration from its
defaults, an optional `--config` JSON file (a run manifest is accepted
and replays that run) and explicit flags, in that order, and writes a
`run_manifest.json` next to its outputs.
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable
import argparse
import json
import time

import pandas as pd
from tqdm import tqdm

from noisy_quant import __version__
from noisy_quant.calibration import (
    NOISE_LAYER_TYPES,
    CalibConfig,
    CalibResult,
    calibrate,
)
from noisy_quant.model_runner import (
    Model,
    ModelDims,
    ModelRunner,
    argmax_agreement,
    evaluate,
    gen_data,
    gen_model,
    load_batches,
    output_mse,
    save_batches,
)
from noisy_quant.noise_theory import SnapshotSpec, sweep_grid, sweep_n, sweep_x
from noisy_quant.noisy_linear import overhead_report
from qe_statistics import QEStatistics
from utils.exceptions import ConfigError, DataIOError, NoisyQuantError
from utils.utils import atomic_write_text, create_logger, file_sha256

MANIFEST_FILE = "run_manifest.json"

ABLATION_PATTERNS: dict[str, tuple[str, ...]] = {
    "none": (),
    "qkv": ("qkv",),
    "proj": ("proj",),
    "fc1": ("fc1",),
    "fc2": ("fc2",),
    "all": NOISE_LAYER_TYPES,
}

COMMAND_DEFAULTS: dict[str, dict] = {
    "verify-theory": {
        "sweep": "both",
        "b": 1.0,
        "x": 0.1,
        "n": 1.4,
        "n_start": 0.1,
        "n_stop": 1.9,
        "n_step": 0.1,
        "x_start": 0.0,
        "x_stop": 0.6,
        "x_step": 0.05,
        "elements": 20,
        "instances": 10,
        "seed": 0,
        "out": "theory",
    },
    "gen-model": {
        **ModelDims().to_dict(),
        "architecture": "encoder",
        "seed": 0,
        "out": "model",
    },
    "gen-data": {
        "model": "model",
        "count": 8,
        "seed": 0,
        "out": "data",
    },
    "calibrate": {
        "model": "model",
        "data": "data",
        "out": "calibration",
        **CalibConfig().to_dict(),
    },
    "evaluate": {
        "model": "model",
        "data": "data",
        "calib": "calibration/calib.json",
        "bins": 64,
        "out": "evaluation",
    },
    "ablate": {
        "model": "model",
        "data": "data",
        "calib": "calibration/calib.json",
        "out": "ablation",
    },
}


@dataclass
class RunManifest:
    """
    Record of one command run.

    Replaying `config` through `--config` reproduces every artifact
    bitwise; only `wall_clock_seconds` differs between runs.
    """

    command: str
    config: dict
    seeds: dict = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)
    tool_version: str = __version__
    wall_clock_seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, directory: str | Path) -> Path:
        return atomic_write_text(
            Path(directory) / MANIFEST_FILE,
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
        )


def _float_list(text: str) -> list[float]:
    try:
        return [float(value) for value in text.split(",") if value.strip()]
    except ValueError as error:
        raise argparse.ArgumentTypeError(f"invalid float list: {text!r}") from error


def _name_list(text: str) -> list[str]:
    return [value.strip() for value in text.split(",") if value.strip()]


def build_parser() -> argparse.ArgumentParser:
    """Argument parser of every subcommand; flags default to None so
    that only explicitly given flags override the configuration."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config or run manifest")
    common.add_argument("--verbose", action="store_true", help="Log progress")
    common.add_argument("--out", help="Output directory")

    parser = argparse.ArgumentParser(
        prog="noisy_quant",
        description="Post-training activation quantization with a Noisy Bias",
    )
    parser.add_argument("--version", action="version", version=__version__)
    commands = parser.add_subparsers(dest="command", required=True)

    theory = commands.add_parser(
        "verify-theory", parents=[common], help="Closed form vs simulation sweeps"
    )
    theory.add_argument("--sweep", choices=["n", "x", "both"])
    for name in ("b", "x", "n", "n_start", "n_stop", "n_step", "x_start", "x_stop", "x_step"):
        theory.add_argument(f"--{name.replace('_', '-')}", dest=name, type=float)
    theory.add_argument("--elements", type=int)
    theory.add_argument("--instances", type=int)
    theory.add_argument("--seed", type=int)

    model = commands.add_parser(
        "gen-model", parents=[common], help="Generate a random model bundle"
    )
    for name in ModelDims().to_dict():
        model.add_argument(f"--{name}", type=int)
    model.add_argument("--architecture", choices=["encoder", "mlp"])
    model.add_argument("--seed", type=int)

    data = commands.add_parser(
        "gen-data", parents=[common], help="Generate Gaussian input batches"
    )
    data.add_argument("--model", help="Model bundle directory")
    data.add_argument("--count", type=int)
    data.add_argument("--seed", type=int)

    calib = commands.add_parser(
        "calibrate", parents=[common], help="Fit quantizers and search the noise"
    )
    calib.add_argument("--model")
    calib.add_argument("--data")
    calib.add_argument("--bits-w", dest="bits_w", type=int)
    calib.add_argument("--bits-a", dest="bits_a", type=int)
    calib.add_argument("--fitter", choices=["minmax", "percentile", "scale_search", "twin"])
    calib.add_argument("--percentile", type=float)
    calib.add_argument("--noise-grid", dest="noise_grid", type=_float_list)
    calib.add_argument("--objective", choices=["closed_form", "empirical"])
    calib.add_argument(
        "--noise-layers", dest="noise_layers", type=_name_list,
        help="Comma-separated subset of qkv,proj,fc1,fc2",
    )
    calib.add_argument("--seed", type=int)
    calib.add_argument("--calib-samples", dest="calib_samples", type=int)
    calib.add_argument(
        "--refit-after-noise", dest="refit_after_noise",
        action=argparse.BooleanOptionalAction, default=None,
    )
    calib.add_argument(
        "--verify-sampled-noise", dest="verify_sampled_noise",
        action=argparse.BooleanOptionalAction, default=None,
    )
    calib.add_argument(
        "--verify-model-output", dest="verify_model_output",
        action=argparse.BooleanOptionalAction, default=None,
    )

    for name, help_text in (
        ("evaluate", "Per-layer and model-output errors"),
        ("ablate", "Noise on each layer type"),
    ):
        command = commands.add_parser(name, parents=[common], help=help_text)
        command.add_argument("--model")
        command.add_argument("--data")
        command.add_argument("--calib", help="calib.json written by calibrate")
        if name == "evaluate":
            command.add_argument("--bins", type=int)

    return parser


def load_config_file(path: str | Path, command: str) -> dict:
    """
    Read a `--config` file; a run manifest contributes its `config`
    block and must belong to the same command.
    """
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as error:
        raise ConfigError(f"Cannot read config {path}: {error}") from error
    except json.JSONDecodeError as error:
        raise ConfigError(f"{path}: malformed JSON") from error

    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: the config must be a JSON object")

    if "command" in payload and "config" in payload:
        if payload["command"] != command:
            raise ConfigError(
                f"{path} is a {payload['command']!r} manifest, not {command!r}"
            )
        payload = payload["config"]

    return payload


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """
    Merge defaults, the `--config` file and explicit flags.

    Raises
    ------
    ConfigError
        For keys the command does not know.
    """
    config = dict(COMMAND_DEFAULTS[command])

    if args.config:
        loaded = load_config_file(args.config, command)
        unknown = set(loaded) - set(config)
        if unknown:
            raise ConfigError(f"Unknown {command} config key(s): {sorted(unknown)}")
        config.update(loaded)

    config.update(
        {
            key: value for key, value in vars(args).items()
            if key in config and value is not None
        }
    )
    return config


def _written(paths: list[Path], root: Path) -> dict[str, str]:
    return {
        Path(path).relative_to(root).as_posix(): file_sha256(path)
        for path in sorted(paths)
    }


def cmd_verify_theory(config: dict, verbose: bool) -> tuple[list[Path], dict]:
    """Closed-form vs simulated error differences along n and x."""
    out = Path(config["out"])
    spec = SnapshotSpec(
        x=config["x"], b=config["b"], n=config["n"],
        elements=config["elements"], instances=config["instances"],
        seed=config["seed"],
    )
    written = []

    match config["sweep"]:
        case "n" | "x" | "both":
            pass
        case _:
            raise ConfigError(f"Invalid sweep: {config['sweep']}")

    if config["sweep"] in ("n", "both"):
        grid = sweep_grid(config["n_start"], config["n_stop"], config["n_step"])
        curve = sweep_n(config["x"], config["b"], grid, spec, verbose)
        curve.to_csv(out / "sweep_n.csv")
        written.append(out / "sweep_n.csv")

    if config["sweep"] in ("x", "both"):
        grid = sweep_grid(config["x_start"], config["x_stop"], config["x_step"])
        curve = sweep_x(config["n"], config["b"], grid, spec, verbose)
        curve.to_csv(out / "sweep_x.csv")
        written.append(out / "sweep_x.csv")

    return written, {"seed": config["seed"]}


def cmd_gen_model(config: dict, verbose: bool) -> tuple[list[Path], dict]:
    """Random model bundle."""
    dims = ModelDims.from_dict({key: config[key] for key in ModelDims().to_dict()})
    model = gen_model(dims, config["seed"], config["architecture"])
    return model.save(config["out"]), {"seed": config["seed"]}


def cmd_gen_data(config: dict, verbose: bool) -> tuple[list[Path], dict]:
    """Gaussian input batches for a model bundle."""
    model = Model.load(config["model"])
    batches = gen_data(model.spec, config["count"], config["seed"])
    return save_batches(config["out"], batches), {"seed": config["seed"]}


def cmd_calibrate(config: dict, verbose: bool) -> tuple[list[Path], dict]:
    """Calibration result JSON."""
    model = Model.load(config["model"])
    batches = load_batches(config["data"])
    calib_config = CalibConfig.from_dict(
        {key: value for key, value in config.items() if key not in ("model", "data", "out")}
    )

    result = calibrate(model, batches, calib_config, verbose)
    path = result.save(Path(config["out"]) / "calib.json")

    seeds = {
        "seed": calib_config.seed,
        "noise_seeds": {layer.name: layer.noise_seed for layer in result.layers},
    }
    return [path], seeds


def _load_inputs(config: dict) -> tuple[Model, list, CalibResult]:
    return (
        Model.load(config["model"]),
        load_batches(config["data"]),
        CalibResult.load(config["calib"]),
    )


def cmd_evaluate(config: dict, verbose: bool) -> tuple[list[Path], dict]:
    """Evaluation metrics, per-layer reports, histograms, the layer
    type table and the noise overhead report."""
    model, batches, calib = _load_inputs(config)
    out = Path(config["out"])

    metrics = evaluate(model, batches, calib, verbose, config["bins"])
    layers = calib.build_layers(model, "noisyquant")
    statistics = QEStatistics(metrics.reports)

    written = [
        atomic_write_text(
            out / "metrics.json", json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n"
        ),
        atomic_write_text(out / "layers.csv", metrics.report_frame().to_csv(index=False)),
        atomic_write_text(out / "histograms.csv", metrics.histogram_frame().to_csv(index=False)),
        atomic_write_text(out / "layer_types.csv", statistics.calculate_all_statistics().to_csv()),
        atomic_write_text(
            out / "cost_report.json",
            json.dumps(overhead_report(layers, model.spec.dims.tokens), indent=2, sort_keys=True)
            + "\n",
        ),
    ]
    return written, {"seed": calib.config.seed}


def ablation_table(
    model: Model,
    batches: list,
    calib: CalibResult,
    verbose: bool = False,
) -> pd.DataFrame:
    """
    Run NoisyQuant with noise on each layer-type pattern.

    Returns
    -------
    pd.DataFrame
        One row per pattern (none, qkv, proj, fc1, fc2, all) with the
        noisy layer count, output MSE and argmax agreement against the
        floating-point model, and the summed noisy input error and D.
    """
    reference = ModelRunner(model).run(batches, "fp")
    inputs = ModelRunner(model).trace(batches)
    rows = []

    for pattern, layer_types in tqdm(
        ABLATION_PATTERNS.items(), desc="ablate", disable=not verbose
    ):
        pattern_calib = calib.with_noise_layers(layer_types)
        runner = ModelRunner(model, pattern_calib, verbose)
        outputs = runner.run(batches, "noisyquant")
        layers = runner.layers("noisyquant")
        reports = [layer.layer_qe_report(inputs[name]) for name, layer in layers.items()]

        rows.append(
            {
                "pattern": pattern,
                "noise_layers": ",".join(layer_types),
                "noisy_layers": sum(layer.noise_enabled for layer in pattern_calib.layers),
                "output_mse": output_mse(outputs, reference),
                "agreement": argmax_agreement(outputs, reference),
                "input_qe_noisy_sum": sum(report.input_qe_noisy for report in reports),
                "D_sum": sum(report.delta for report in reports),
            }
        )

    return pd.DataFrame(rows)


def cmd_ablate(config: dict, verbose: bool) -> tuple[list[Path], dict]:
    """Layer-type ablation table."""
    model, batches, calib = _load_inputs(config)
    table = ablation_table(model, batches, calib, verbose)
    path = atomic_write_text(Path(config["out"]) / "ablation.csv", table.to_csv(index=False))
    return [path], {"seed": calib.config.seed}


COMMANDS: dict[str, Callable[[dict, bool], tuple[list[Path], dict]]] = {
    "verify-theory": cmd_verify_theory,
    "gen-model": cmd_gen_model,
    "gen-data": cmd_gen_data,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    """
    Run one subcommand.

    Returns
    -------
    int
        0 on success, otherwise the exit code of the raised error:
        2 configuration, 3 data or model I/O, 4 precondition.
    """
    args = build_parser().parse_args(argv)
    logger = create_logger("NoisyQuant", args.verbose)
    start = time.perf_counter()

    try:
        config = resolve_config(args.command, args)
        written, seeds = COMMANDS[args.command](config, args.verbose)

        out = Path(config["out"])
        manifest = RunManifest(
            command=args.command,
            config=config,
            seeds=seeds,
            artifacts=_written(written, out),
            wall_clock_seconds=time.perf_counter() - start,
        )
        manifest.save(out)
    except NoisyQuantError as error:
        logger.error("%s: %s", type(error).__name__, error)
        return error.exit_code
    except OSError as error:
        logger.error("I/O error: %s", error)
        return DataIOError.exit_code

    logger.info(
        "%s finished in %.2f seconds, %d artifact(s) in %s",
        args.command, manifest.wall_clock_seconds, len(written), out,
    )
    return 0
