"""
Calibration module.

Collects floating-point activation statistics from calibration batches,
fits weight and activation quantizers, and linearly searches the Noisy
Bias half-range of every linear layer by minimizing the predicted
change of the activation quantization error.
"""

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Literal, Mapping, NamedTuple, Sequence
import json
import logging
import time

import numpy as np
import pandas as pd
from tqdm import tqdm

from noisy_quant.model_runner import Model, ModelRunner, output_mse
from noisy_quant.noise_theory import FEASIBILITY_TOLERANCE, delta_terms
from noisy_quant.noisy_linear import (
    NoisyBias,
    QuantLinearLayer,
    int16_activation_scale,
)
from noisy_quant.numerics import Tensor2D, as_array, derive_seed
from noisy_quant.quantizers import (
    ActivationParams,
    QuantParams,
    apply_quantizer,
    bin_center_distance,
    fit_activation_minmax,
    fit_activation_percentile,
    fit_activation_scale_search,
    fit_twin_region,
    fit_weight_minmax,
    params_from_dict,
    reference_scale,
)
from utils.exceptions import ConfigError, InvalidArgumentError, PreconditionError
from utils.utils import atomic_write_text, create_logger

FitterName = Literal["minmax", "percentile", "scale_search", "twin"]
FITTERS: tuple[str, ...] = ("minmax", "percentile", "scale_search", "twin")
ObjectiveMode = Literal["closed_form", "empirical"]
OBJECTIVES: tuple[str, ...] = ("closed_form", "empirical")
NOISE_LAYER_TYPES: tuple[str, ...] = ("qkv", "proj", "fc1", "fc2")
DEFAULT_NOISE_GRID: tuple[float, ...] = tuple(
    float(value) for value in np.round(np.arange(1, 21) * 0.05, 2)
)


@dataclass(frozen=True)
class CalibConfig:
    """
    Calibration settings.

    Parameters
    ----------
    bits_w : int, optional
        Weight bit-width.
        (default: 6)
    bits_a : int, optional
        Activation bit-width.
        (default: 6)
    fitter : {"minmax", "percentile", "scale_search", "twin"}, optional
        Activation quantizer fitter.
        (default: "minmax")
    percentile : float, optional
        Clip percentile of the "percentile" fitter.
        (default: 99.99)
    noise_grid : tuple of float, optional
        Noise half-ranges searched, as fractions in (0, 1] of the
        activation scale.
        (default: 0.05, 0.10, ..., 1.00)
    objective : {"closed_form", "empirical"}, optional
        How the search objective is evaluated.
        (default: "closed_form")
    noise_layers : tuple of str, optional
        Layer types that receive a Noisy Bias.
        (default: ("qkv", "proj", "fc1", "fc2"))
    seed : int, optional
        Master seed of every noise draw.
        (default: 0)
    calib_samples : int or None, optional
        Number of leading batches used for calibration; None uses all.
        (default: None)
    refit_after_noise : bool, optional
        Refit the activation grid on X + N for the noisy modes.
        (default: False)
    verify_sampled_noise : bool, optional
        Measure the error change of the actually sampled noise on the
        calibration activations and drop every grid point where it is
        not negative.
        (default: True)
    verify_model_output : bool, optional
        Commit a layer's noise only when it lowers the NoisyQuant output
        MSE of the calibration batches, layer by layer in model order.
        (default: True)
    """

    bits_w: int = 6
    bits_a: int = 6
    fitter: FitterName = "minmax"
    percentile: float = 99.99
    noise_grid: tuple[float, ...] = DEFAULT_NOISE_GRID
    objective: ObjectiveMode = "closed_form"
    noise_layers: tuple[str, ...] = NOISE_LAYER_TYPES
    seed: int = 0
    calib_samples: int | None = None
    refit_after_noise: bool = False
    verify_sampled_noise: bool = True
    verify_model_output: bool = True

    def __post_init__(self):
        unknown_layers = set(self.noise_layers) - set(NOISE_LAYER_TYPES)
        if unknown_layers:
            raise InvalidArgumentError(
                f"noise_layers must be a subset of {NOISE_LAYER_TYPES}, got {sorted(unknown_layers)}"
            )
        object.__setattr__(
            self, "noise_grid", tuple(sorted(float(value) for value in self.noise_grid))
        )
        object.__setattr__(
            self,
            "noise_layers",
            tuple(layer for layer in NOISE_LAYER_TYPES if layer in set(self.noise_layers)),
        )

        for name in ("bits_w", "bits_a"):
            bits = getattr(self, name)
            if not isinstance(bits, int) or not 2 <= bits <= 16:
                raise InvalidArgumentError(f"{name} must be an integer in [2, 16], got {bits!r}")
        if self.fitter not in FITTERS:
            raise InvalidArgumentError(f"Invalid fitter: {self.fitter}")
        if self.objective not in OBJECTIVES:
            raise InvalidArgumentError(f"Invalid objective: {self.objective}")
        if not 0 < self.percentile <= 100:
            raise InvalidArgumentError(f"percentile must be in (0, 100], got {self.percentile}")
        if not self.noise_grid or any(not 0 < value <= 1 for value in self.noise_grid):
            raise InvalidArgumentError(
                f"noise_grid fractions must be non-empty and in (0, 1], got {self.noise_grid}"
            )
        if self.calib_samples is not None and self.calib_samples < 1:
            raise InvalidArgumentError(
                f"calib_samples must be at least 1, got {self.calib_samples}"
            )

    @classmethod
    def from_dict(cls, payload: dict) -> "CalibConfig":
        unknown = set(payload) - {item.name for item in fields(cls)}
        if unknown:
            raise ConfigError(f"Unknown calibration key(s): {sorted(unknown)}")
        return cls(**payload)

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["noise_grid"] = list(self.noise_grid)
        payload["noise_layers"] = list(self.noise_layers)
        return payload


@dataclass(frozen=True)
class LayerCalibration:
    """
    Calibration of one linear layer.

    `searched_n` and `objective` are the raw search result.
    `selected_n` is the half-range committed after the sampled and
    model-output checks, regardless of the layer-type toggles; `n` is
    the half-range actually applied.
    """

    name: str
    layer_type: str
    index: int
    w_params: QuantParams
    a_params: ActivationParams
    searched_n: float
    objective: float
    noise_seed: int
    noise_enabled: bool
    n: float
    selected_n: float = 0.0
    selected_objective: float = 0.0
    sampled_delta: float | None = None
    output_delta: float | None = None
    a_params_refit: ActivationParams | None = None
    curve: tuple[tuple[float, float], ...] = ()

    @property
    def eligible(self) -> bool:
        """True when a noise half-range survived every check."""
        return self.selected_n > 0

    def with_toggle(self, enabled_types: Iterable[str]) -> "LayerCalibration":
        enabled = self.eligible and self.layer_type in set(enabled_types)
        return replace(self, noise_enabled=enabled, n=self.selected_n if enabled else 0.0)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "layer_type": self.layer_type,
            "index": self.index,
            "w_params": self.w_params.to_dict(),
            "a_params": self.a_params.to_dict(),
            "a_params_refit": (
                None if self.a_params_refit is None else self.a_params_refit.to_dict()
            ),
            "searched_n": self.searched_n,
            "objective": self.objective,
            "selected_n": self.selected_n,
            "selected_objective": self.selected_objective,
            "sampled_delta": self.sampled_delta,
            "output_delta": self.output_delta,
            "noise_seed": self.noise_seed,
            "noise_enabled": self.noise_enabled,
            "n": self.n,
            "curve": [list(point) for point in self.curve],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "LayerCalibration":
        refit = payload.get("a_params_refit")
        return cls(
            name=payload["name"],
            layer_type=payload["layer_type"],
            index=payload["index"],
            w_params=QuantParams.from_dict(payload["w_params"]),
            a_params=params_from_dict(payload["a_params"]),
            searched_n=payload["searched_n"],
            objective=payload["objective"],
            noise_seed=payload["noise_seed"],
            noise_enabled=payload["noise_enabled"],
            n=payload["n"],
            selected_n=payload.get("selected_n", 0.0),
            selected_objective=payload.get("selected_objective", 0.0),
            sampled_delta=payload.get("sampled_delta"),
            output_delta=payload.get("output_delta"),
            a_params_refit=None if refit is None else params_from_dict(refit),
            curve=tuple(tuple(point) for point in payload.get("curve", [])),
        )


@dataclass(frozen=True)
class CalibResult:
    """
    Calibration of a whole model: per-layer quantizers and noise, and
    the per-tensor grids of the attention operands.
    """

    config: CalibConfig
    layers: tuple[LayerCalibration, ...]
    attention_params: Mapping[str, QuantParams] = field(default_factory=dict)

    def layer(self, name: str) -> LayerCalibration:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def with_noise_layers(self, noise_layers: Iterable[str]) -> "CalibResult":
        """
        The same calibration with a different layer-type enable map.

        Parameters
        ----------
        noise_layers : iterable of str
            Layer types that receive noise.

        Returns
        -------
        CalibResult
            Only the noise fields of layers whose type changed state
            differ from `self`.
        """
        noise_layers = tuple(noise_layers)
        unknown = set(noise_layers) - set(NOISE_LAYER_TYPES)
        if unknown:
            raise InvalidArgumentError(f"Unknown noise layer type(s): {sorted(unknown)}")

        config = replace(self.config, noise_layers=noise_layers)
        return replace(
            self,
            config=config,
            layers=tuple(layer.with_toggle(config.noise_layers) for layer in self.layers),
        )

    def integer_ready(self) -> bool:
        """True when every linear layer can run the integer path."""
        return all(
            isinstance(params, QuantParams)
            and params.granularity == "tensor"
            and params.bits <= 8
            and layer.w_params.bits <= 8
            for layer in self.layers
            for params in (layer.a_params, layer.a_params_refit or layer.a_params)
        )

    def build_layers(
        self,
        model: Model,
        mode: str = "noisyquant",
    ) -> dict[str, QuantLinearLayer]:
        """
        Quantized linear layers of `model` with noise attached.

        Layers without noise carry a disabled (all-zero) Noisy Bias, so
        every mode can run on them. Refitted activation grids, when
        present, are used by the noisy and integer modes only.
        """
        layers = {}
        for name, layer in model.linear_layers().items():
            calibration = self.layer(name)
            a_params = calibration.a_params
            if (
                mode in ("noisyquant", "integer")
                and calibration.noise_enabled
                and calibration.a_params_refit is not None
            ):
                a_params = calibration.a_params_refit

            layers[name] = layer.with_params(calibration.w_params, a_params).attach_noise(
                calibration.n, calibration.noise_seed
            )
        return layers

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "layers": [layer.to_dict() for layer in self.layers],
            "attention_params": {
                key: params.to_dict() for key, params in sorted(self.attention_params.items())
            },
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "CalibResult":
        try:
            return cls(
                config=CalibConfig.from_dict(payload["config"]),
                layers=tuple(LayerCalibration.from_dict(layer) for layer in payload["layers"]),
                attention_params={
                    key: QuantParams.from_dict(params)
                    for key, params in payload.get("attention_params", {}).items()
                },
            )
        except (KeyError, TypeError) as error:
            raise ConfigError(f"Malformed calibration result: {error}") from error

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> Path:
        return atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "CalibResult":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as error:
            raise ConfigError(f"{path}: malformed JSON") from error
        return cls.from_dict(payload)


class NoiseSearch(NamedTuple):
    """Result of `search_noise_range`."""

    n: float
    objective: float
    curve: pd.DataFrame


def collect_activations(
    model: Model,
    calib_data: Sequence[Tensor2D],
) -> dict[str, Tensor2D]:
    """
    Floating-point inputs of every linear layer, plus the attention
    operands, concatenated over the calibration batches in batch order.

    Raises
    ------
    PreconditionError
        If `calib_data` is empty.
    """
    batches = list(calib_data)
    if not batches:
        raise PreconditionError("Calibration needs at least one batch")
    return ModelRunner(model).trace(batches)


def objective_L(
    activations: Tensor2D | np.ndarray,
    a_params: ActivationParams,
    n: float,
    mode: ObjectiveMode = "closed_form",
    seed: int = 0,
) -> float:
    """
    Predicted per-element change of the activation quantization error
    caused by a Noisy Bias of half-range `n`.

    Parameters
    ----------
    activations : Tensor2D or np.ndarray
        Calibration activations (m x t).
    a_params : QuantParams or TwinQuantParams
        The activation grid.
    n : float
        Noise half-range.
    mode : {"closed_form", "empirical"}, optional
        "closed_form" sums the expected delta of every in-range element
        whose window x <= n <= 2b - x holds; other elements add 0.
        "empirical" samples one (m x 1) noise vector with `seed` and
        measures QE(X + N) - QE(X).
        (default: "closed_form")
    seed : int, optional
        Seed of the empirical noise draw.
        (default: 0)

    Returns
    -------
    float
        The summed change divided by the number of elements; 0 when no
        element contributes.
    """
    values = as_array(activations)
    if values.size == 0:
        return 0.0

    match mode:
        case "closed_form":
            distance = bin_center_distance(values, a_params)
            inside = ~distance.clipped
            x = distance.distances[inside]
            b = distance.half_bin[inside]
            tolerance = FEASIBILITY_TOLERANCE * np.maximum(b, 1.0)
            feasible = (x - tolerance <= n) & (n <= 2 * b - x + tolerance)

            if n <= 0 or not np.any(feasible):
                return 0.0
            total = np.sum(delta_terms(x[feasible], n, b[feasible]))
            return float(total / values.size)

        case "empirical":
            if values.ndim != 2:
                raise PreconditionError("The empirical objective needs m x t activations")
            noise = NoisyBias.sample(
                values.shape[0], n, seed, int16_activation_scale(a_params)
            ).array()
            noisy_values = values + noise
            baseline = np.mean((apply_quantizer(values, a_params) - values) ** 2)
            noisy = np.mean((apply_quantizer(noisy_values, a_params) - noisy_values) ** 2)
            return float(noisy - baseline)

        case _:
            raise InvalidArgumentError(f"Invalid objective: {mode}")


def search_noise_range(
    activations: Tensor2D | np.ndarray,
    a_params: ActivationParams,
    config: CalibConfig,
    seed: int = 0,
) -> NoiseSearch:
    """
    Linear search of the noise half-range over `config.noise_grid`.

    Parameters
    ----------
    activations : Tensor2D or np.ndarray
        Calibration activations.
    a_params : QuantParams or TwinQuantParams
        The fitted activation grid; the grid fractions multiply its
        (positive-region) scale.
    config : CalibConfig
        Grid and objective mode.
    seed : int, optional
        Seed of the empirical objective.
        (default: 0)

    Returns
    -------
    NoiseSearch
        The minimizing n with its objective (ties go to the smaller n)
        and the full curve. When no grid point has a negative
        objective the result is n = 0, objective 0.
    """
    scale = reference_scale(a_params)
    grid = [fraction * scale for fraction in config.noise_grid]
    values = [
        objective_L(activations, a_params, n, config.objective, seed) for n in grid
    ]
    curve = pd.DataFrame(
        {"fraction": list(config.noise_grid), "n": grid, "objective": values}
    )

    best = int(np.argmin(values))
    if values[best] >= 0:
        return NoiseSearch(0.0, 0.0, curve)
    return NoiseSearch(float(grid[best]), float(values[best]), curve)


def fit_activation(
    samples: Tensor2D,
    weight: Tensor2D,
    config: CalibConfig,
) -> ActivationParams:
    """Fit the activation grid selected by `config.fitter`."""
    match config.fitter:
        case "minmax":
            return fit_activation_minmax(samples, config.bits_a)
        case "percentile":
            return fit_activation_percentile(samples, config.bits_a, config.percentile)
        case "scale_search":
            return fit_activation_scale_search(
                samples, weight, config.bits_a, weight_bits=config.bits_w
            )
        case "twin":
            return fit_twin_region(samples, config.bits_a)
        case _:
            raise InvalidArgumentError(f"Invalid fitter: {config.fitter}")


def sampled_delta(
    activations: Tensor2D,
    a_params: ActivationParams,
    n: float,
    seed: int,
) -> float:
    """Error change of the exact noise `attach_noise(n, seed)` draws."""
    return objective_L(activations, a_params, n, "empirical", seed)


def noise_candidates(
    calibration: LayerCalibration,
    samples: Tensor2D,
    weight: Tensor2D,
    config: CalibConfig,
) -> list[LayerCalibration]:
    """
    Grid points of a searched layer that may be committed, best
    predicted objective first.

    A point qualifies when its objective is negative and, with
    `config.verify_sampled_noise`, the noise it actually draws lowers
    the activation error of `samples`. Each candidate carries its
    `selected_n`, `selected_objective`, `sampled_delta` and, with
    `config.refit_after_noise`, the grid refitted on X + N.
    """
    predicted = sorted(
        (objective, n) for n, objective in calibration.curve if objective < 0
    )
    scale = int16_activation_scale(calibration.a_params)
    candidates = []

    for objective, n in predicted:
        measured = None
        if config.verify_sampled_noise:
            measured = sampled_delta(samples, calibration.a_params, n, calibration.noise_seed)
            if measured >= 0:
                continue

        refit = None
        if config.refit_after_noise:
            noise = NoisyBias.sample(samples.shape[0], n, calibration.noise_seed, scale)
            refit = fit_activation(Tensor2D(samples.to_numpy() + noise.array()), weight, config)

        candidates.append(
            replace(
                calibration,
                selected_n=float(n),
                selected_objective=float(objective),
                sampled_delta=measured,
                a_params_refit=refit,
            )
        )
    return candidates


def _accept_by_output(
    model: Model,
    batches: list[Tensor2D],
    result: CalibResult,
    candidates: list[list[LayerCalibration]],
    logger: logging.Logger,
) -> tuple[LayerCalibration, ...]:
    """
    Greedy pass in model order: each layer keeps the candidate with the
    lowest NoisyQuant output MSE, and only when it is strictly below the
    MSE of the noise committed so far.
    """
    reference = ModelRunner(model).run(batches, "fp")
    layers = list(result.layers)
    current = output_mse(ModelRunner(model, result).run(batches, "quant"), reference)
    logger.info("Quantized output MSE %.6g", current)

    for position, options in enumerate(candidates):
        best, best_mse = None, current
        for candidate in options:
            trial = list(layers)
            trial[position] = candidate.with_toggle(NOISE_LAYER_TYPES)
            runner = ModelRunner(model, replace(result, layers=tuple(trial)))
            mse = output_mse(runner.run(batches, "noisyquant"), reference)
            if mse < best_mse:
                best, best_mse = candidate, mse

        if best is None:
            if options:
                logger.info("%s: no noise lowers the output MSE", layers[position].name)
            continue

        layers[position] = replace(best, output_delta=best_mse - current).with_toggle(
            NOISE_LAYER_TYPES
        )
        current = best_mse

    logger.info("NoisyQuant output MSE %.6g", current)
    return tuple(layers)


def calibrate(
    model: Model,
    data: Sequence[Tensor2D],
    config: CalibConfig | None = None,
    verbose: bool = False,
) -> CalibResult:
    """
    Calibrate every linear layer and attention operand of `model`.

    Weights always get per-channel MinMax grids. Activations get the
    configured fitter. Every qkv, proj, fc1 and fc2 layer is searched
    and its noise selected whatever the layer-type toggles; layers of a
    disabled type then keep n = 0, and "other" layers never carry
    noise. The noise of layer i is drawn from
    derive_seed(seed, i, "noisy-bias").

    Parameters
    ----------
    model : Model
        The model.
    data : sequence of Tensor2D
        Calibration batches; the first `config.calib_samples` are used.
    config : CalibConfig, optional
        Settings.
        (default: CalibConfig())
    verbose : bool, optional
        Log progress and show a progress bar.
        (default: False)

    Returns
    -------
    CalibResult
        The calibration, deterministic given the config.
    """
    config = config or CalibConfig()
    logger = create_logger("Calibration", verbose)
    start = time.perf_counter()

    batches = list(data)[: config.calib_samples]
    activations = collect_activations(model, batches)
    logger.info("Collected activations from %d batch(es)", len(batches))

    layers = []
    candidates = []
    linear_layers = model.linear_layers()
    for index, (name, layer) in enumerate(
        tqdm(linear_layers.items(), desc="calibrate", disable=not verbose)
    ):
        samples = activations[name]
        calibration = LayerCalibration(
            name=name,
            layer_type=layer.layer_type,
            index=index,
            w_params=fit_weight_minmax(layer.weight, config.bits_w),
            a_params=fit_activation(samples, layer.weight, config),
            searched_n=0.0,
            objective=0.0,
            noise_seed=derive_seed(config.seed, index, "noisy-bias"),
            noise_enabled=False,
            n=0.0,
        )

        options = []
        if layer.layer_type in NOISE_LAYER_TYPES:
            search = search_noise_range(
                samples, calibration.a_params, config, calibration.noise_seed
            )
            calibration = replace(
                calibration,
                searched_n=search.n,
                objective=search.objective,
                curve=tuple(
                    zip(search.curve["n"].tolist(), search.curve["objective"].tolist())
                ),
            )
            options = noise_candidates(calibration, samples, layer.weight, config)
            if search.n > 0 and not options:
                logger.warning(
                    "%s: no sampled noise reduces the error, disabled", name
                )

        logger.info(
            "%s (%s): searched n=%g, objective=%.4g, %d candidate(s)",
            name, layer.layer_type, calibration.searched_n, calibration.objective,
            len(options),
        )
        layers.append(calibration)
        candidates.append(options)

    attention_params = {
        key: fit_activation_minmax(samples, config.bits_a)
        for key, samples in sorted(activations.items())
        if key not in linear_layers
    }
    result = CalibResult(config, tuple(layers), attention_params)

    if config.verify_model_output:
        selected = _accept_by_output(model, batches, result, candidates, logger)
    else:
        selected = tuple(
            options[0] if options else calibration
            for calibration, options in zip(layers, candidates)
        )

    logger.info("Calibration took %.3f seconds", time.perf_counter() - start)
    return replace(
        result, layers=tuple(layer.with_toggle(config.noise_layers) for layer in selected)
    )
