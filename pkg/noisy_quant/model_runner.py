"""
Model runner module.

A desk-scale transformer encoder block (and plain MLPs) over the
features x tokens activation layout, the model bundle format, synthetic
weights and data, and the execution and evaluation of the model in
floating point, simulated quantization, NoisyQuant and integer modes.

Classes:
- ModelDims: Model dimensions.
- LayerSpec: One entry of the ordered layer list.
- ModelSpec: Ordered layer list with a consistent dimension chain.
- Model: A ModelSpec together with its weight tensors.
- ModelRunner: Executes a model in every mode.
- EvalMetrics: Per-layer reports and model-output metrics.
"""

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Literal, Mapping, Sequence
import json
import time

import numpy as np
import pandas as pd

from noisy_quant.noisy_linear import LAYER_TYPES, QEReport, QuantLinearLayer
from noisy_quant.numerics import (
    TENSOR_EXTENSION,
    Rng,
    Tensor2D,
    as_array,
    gelu64,
    layernorm,
    load_tensor,
    matmul64,
    save_tensor,
    softmax_rows,
)
from noisy_quant.quantizers import apply_quantizer
from qe_statistics import QEStatistics
from utils.exceptions import (
    ConfigError,
    DataIOError,
    InvalidArgumentError,
    ModelBundleError,
    NotCalibratedError,
    PreconditionError,
    ShapeMismatchError,
)
from utils.utils import atomic_write_text, create_logger

if TYPE_CHECKING:
    from noisy_quant.calibration import CalibResult

LayerKind = Literal[
    "layernorm", "linear", "attention", "gelu", "softmax_rows", "residual_add"
]
LAYER_KINDS: tuple[str, ...] = (
    "layernorm", "linear", "attention", "gelu", "softmax_rows", "residual_add"
)
RunMode = Literal["fp", "quant", "noisyquant", "integer"]
RUN_MODES: tuple[str, ...] = ("fp", "quant", "noisyquant", "integer")
Architecture = Literal["encoder", "mlp", "custom"]
ATTENTION_OPERANDS: tuple[str, ...] = ("q", "k", "v", "probs")

MODEL_FILE = "model.json"
BATCH_PREFIX = "batch_"
BIAS_STD = 0.02


@dataclass(frozen=True)
class ModelDims:
    """
    Dimensions of a generated model.

    Parameters
    ----------
    tokens : int, optional
        Tokens (columns) per batch.
        (default: 16)
    width : int, optional
        Embedding width.
        (default: 64)
    mlp : int, optional
        Hidden width of the MLP.
        (default: 256)
    heads : int, optional
        Attention heads; must divide `width`.
        (default: 4)
    classes : int, optional
        Outputs of the classifier head.
        (default: 10)
    """

    tokens: int = 16
    width: int = 64
    mlp: int = 256
    heads: int = 4
    classes: int = 10

    def __post_init__(self):
        for item in fields(self):
            value = getattr(self, item.name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise InvalidArgumentError(
                    f"{item.name} must be a positive integer, got {value!r}"
                )
        if self.width % self.heads:
            raise InvalidArgumentError(
                f"heads ({self.heads}) must divide width ({self.width})"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelDims":
        unknown = set(payload) - {item.name for item in fields(cls)}
        if unknown:
            raise ConfigError(f"Unknown model dimension(s): {sorted(unknown)}")
        return cls(**payload)


@dataclass(frozen=True)
class LayerSpec:
    """
    One layer of the ordered layer list.

    `linear` layers name their weight and bias tensors and carry one
    layer type tag. `residual_add` adds the output with index `source`,
    where index 0 is the model input and index i + 1 the output of
    layer i. `attention` splits its input into q, k and v.
    """

    kind: LayerKind
    name: str
    layer_type: str | None = None
    in_features: int | None = None
    out_features: int | None = None
    weight: str | None = None
    bias: str | None = None
    heads: int | None = None
    source: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ModelBundleError(f"{self.name}: unknown layer kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {key: value for key, value in asdict(self).items() if value is not None}

    @classmethod
    def from_dict(cls, payload: dict) -> "LayerSpec":
        unknown = set(payload) - {item.name for item in fields(cls)}
        if unknown:
            raise ModelBundleError(f"Unknown layer field(s): {sorted(unknown)}")
        return cls(**payload)


def _linear(name: str, layer_type: str, fan_in: int, fan_out: int) -> LayerSpec:
    return LayerSpec(
        kind="linear",
        name=name,
        layer_type=layer_type,
        in_features=fan_in,
        out_features=fan_out,
        weight=f"{name}.weight{TENSOR_EXTENSION}",
        bias=f"{name}.bias{TENSOR_EXTENSION}",
    )


def encoder_layers(dims: ModelDims) -> tuple[LayerSpec, ...]:
    """Single pre-norm encoder block followed by a classifier head."""
    width, mlp = dims.width, dims.mlp
    return (
        LayerSpec(kind="layernorm", name="norm1"),
        _linear("qkv", "qkv", width, 3 * width),
        LayerSpec(kind="attention", name="attn", heads=dims.heads),
        _linear("proj", "proj", width, width),
        LayerSpec(kind="residual_add", name="residual1", source=0),
        LayerSpec(kind="layernorm", name="norm2"),
        _linear("fc1", "fc1", width, mlp),
        LayerSpec(kind="gelu", name="gelu"),
        _linear("fc2", "fc2", mlp, width),
        LayerSpec(kind="residual_add", name="residual2", source=5),
        _linear("head", "other", width, dims.classes),
    )


def mlp_layers(dims: ModelDims) -> tuple[LayerSpec, ...]:
    """Plain MLP: fc1, GELU, fc2 and a classifier head."""
    return (
        _linear("fc1", "fc1", dims.width, dims.mlp),
        LayerSpec(kind="gelu", name="gelu"),
        _linear("fc2", "fc2", dims.mlp, dims.width),
        _linear("head", "other", dims.width, dims.classes),
    )


@dataclass(frozen=True)
class ModelSpec:
    """
    Ordered layer list with a consistent dimension chain.

    Raises
    ------
    ModelBundleError
        If the dimension chain is inconsistent, a linear layer misses
        its tensors or tag, or a residual source is out of range.
    """

    name: str
    dims: ModelDims
    layers: tuple[LayerSpec, ...]
    architecture: Architecture = "custom"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    def validate(self) -> list[int]:
        widths = [self.dims.width]
        names = set()

        for index, layer in enumerate(self.layers):
            if layer.name in names:
                raise ModelBundleError(f"Duplicate layer name {layer.name!r}")
            names.add(layer.name)
            features = widths[-1]

            match layer.kind:
                case "layernorm" | "gelu" | "softmax_rows":
                    pass
                case "linear":
                    if layer.layer_type not in LAYER_TYPES:
                        raise ModelBundleError(
                            f"{layer.name}: layer_type must be one of {LAYER_TYPES}, "
                            f"got {layer.layer_type!r}"
                        )
                    if not (layer.weight and layer.bias):
                        raise ModelBundleError(f"{layer.name}: missing tensor references")
                    if layer.in_features != features:
                        raise ModelBundleError(
                            f"{layer.name}: expects {layer.in_features} inputs, "
                            f"receives {features}"
                        )
                    features = layer.out_features
                case "attention":
                    heads = layer.heads or 1
                    if features % 3 or (features // 3) % heads:
                        raise ModelBundleError(
                            f"{layer.name}: {features} features cannot split into "
                            f"q, k, v over {heads} heads"
                        )
                    features //= 3
                case "residual_add":
                    if layer.source is None or not 0 <= layer.source <= index:
                        raise ModelBundleError(
                            f"{layer.name}: residual source {layer.source} out of range"
                        )
                    if widths[layer.source] != features:
                        raise ModelBundleError(
                            f"{layer.name}: cannot add {widths[layer.source]} "
                            f"features to {features}"
                        )

            widths.append(features)

        return widths

    @property
    def output_features(self) -> int:
        return self.validate()[-1]

    @property
    def linear_specs(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.kind == "linear"]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "architecture": self.architecture,
            "dims": self.dims.to_dict(),
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelSpec":
        try:
            return cls(
                name=payload["name"],
                dims=ModelDims.from_dict(payload["dims"]),
                layers=tuple(LayerSpec.from_dict(layer) for layer in payload["layers"]),
                architecture=payload.get("architecture", "custom"),
            )
        except (KeyError, TypeError) as error:
            raise ModelBundleError(f"Malformed model spec: {error}") from error


@dataclass(frozen=True, eq=False)
class Model:
    """A ModelSpec with its weight tensors, read-only after load."""

    spec: ModelSpec
    tensors: Mapping[str, Tensor2D]

    def __post_init__(self):
        for layer in self.spec.linear_specs:
            expected = {
                layer.weight: (layer.out_features, layer.in_features),
                layer.bias: (layer.out_features, 1),
            }
            for key, shape in expected.items():
                if key not in self.tensors:
                    raise ModelBundleError(f"{layer.name}: tensor {key!r} is missing")
                if self.tensors[key].shape != shape:
                    raise ModelBundleError(
                        f"{layer.name}: tensor {key!r} has shape "
                        f"{self.tensors[key].shape}, expected {shape}"
                    )

    def linear_layers(self) -> dict[str, QuantLinearLayer]:
        """Floating-point linear layers in model order."""
        return {
            layer.name: QuantLinearLayer(
                weight=self.tensors[layer.weight],
                bias=self.tensors[layer.bias],
                layer_type=layer.layer_type,
                name=layer.name,
            )
            for layer in self.spec.linear_specs
        }

    def save(self, directory: str | Path) -> list[Path]:
        """
        Write the bundle: `model.json` plus one `.t2d` file per tensor.

        Returns
        -------
        list of Path
            Every written file.
        """
        directory = Path(directory)
        written = [
            save_tensor(directory / key, tensor)
            for key, tensor in sorted(self.tensors.items())
        ]
        written.append(
            atomic_write_text(
                directory / MODEL_FILE,
                json.dumps(self.spec.to_dict(), indent=2, sort_keys=True) + "\n",
            )
        )
        return written

    @classmethod
    def load(cls, directory: str | Path) -> "Model":
        """
        Read a bundle written by `save`.

        Raises
        ------
        ModelBundleError
            If `model.json` is missing or malformed, or a tensor is
            missing or has the wrong shape.
        """
        directory = Path(directory)
        spec_path = directory / MODEL_FILE

        if not spec_path.is_file():
            raise ModelBundleError(f"{directory}: no {MODEL_FILE}")

        try:
            payload = json.loads(spec_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as error:
            raise ModelBundleError(f"{spec_path}: malformed JSON") from error

        spec = ModelSpec.from_dict(payload)
        tensors = {}
        for layer in spec.linear_specs:
            for key in (layer.weight, layer.bias):
                path = directory / key
                if not path.is_file():
                    raise ModelBundleError(f"{directory}: tensor file {key!r} is missing")
                tensors[key] = load_tensor(path)

        return cls(spec, tensors)


def gen_model(
    dims: ModelDims | None = None,
    seed: int = 0,
    architecture: Literal["encoder", "mlp"] = "encoder",
) -> Model:
    """
    Generate random weights for an encoder block or an MLP.

    Weights are Gaussian with standard deviation 1/sqrt(fan_in), biases
    Gaussian with standard deviation 0.02. Every tensor is drawn from
    its own sub-stream of `seed`, so the bundle is deterministic.

    Parameters
    ----------
    dims : ModelDims, optional
        Model dimensions.
        (default: ModelDims())
    seed : int, optional
        Master seed.
        (default: 0)
    architecture : {"encoder", "mlp"}, optional
        Model family.
        (default: "encoder")

    Returns
    -------
    Model
        The generated model.
    """
    dims = dims or ModelDims()

    match architecture:
        case "encoder":
            layers = encoder_layers(dims)
        case "mlp":
            layers = mlp_layers(dims)
        case _:
            raise InvalidArgumentError(f"Invalid architecture: {architecture}")

    spec = ModelSpec(
        name=f"{architecture}-{seed}", dims=dims, layers=layers, architecture=architecture
    )
    rng = Rng(seed)
    tensors = {}

    for layer in spec.linear_specs:
        fan_in, fan_out = layer.in_features, layer.out_features
        weight = rng.child("weight", layer.name).generator().normal(
            0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in)
        )
        bias = rng.child("bias", layer.name).generator().normal(
            0.0, BIAS_STD, size=(fan_out, 1)
        )
        tensors[layer.weight] = Tensor2D(weight)
        tensors[layer.bias] = Tensor2D(bias)

    return Model(spec, tensors)


def gen_data(spec: ModelSpec, count: int, seed: int = 0) -> list[Tensor2D]:
    """
    Generate standard Gaussian input batches (width x tokens).

    Parameters
    ----------
    spec : ModelSpec
        The model the data feeds.
    count : int
        Number of batches, at least 1.
    seed : int, optional
        Master seed; batch i uses sub-stream ("batch", i).
        (default: 0)

    Returns
    -------
    list of Tensor2D
        The batches.
    """
    if count < 1:
        raise InvalidArgumentError(f"count must be at least 1, got {count}")

    rng = Rng(seed)
    shape = (spec.dims.width, spec.dims.tokens)
    return [
        Tensor2D(rng.child("batch", index).generator().standard_normal(shape))
        for index in range(count)
    ]


def save_batches(directory: str | Path, batches: Sequence[Tensor2D]) -> list[Path]:
    directory = Path(directory)
    return [
        save_tensor(directory / f"{BATCH_PREFIX}{index:04d}{TENSOR_EXTENSION}", batch)
        for index, batch in enumerate(batches)
    ]


def load_batches(directory: str | Path) -> list[Tensor2D]:
    """Read every batch file of `directory` in name order."""
    directory = Path(directory)
    paths = sorted(directory.glob(f"{BATCH_PREFIX}*{TENSOR_EXTENSION}"))

    if not paths:
        raise DataIOError(f"{directory}: no {BATCH_PREFIX}*{TENSOR_EXTENSION} files")
    return [load_tensor(path) for path in paths]


@dataclass
class EvalMetrics:
    """
    Evaluation of a calibrated model against its floating-point run.

    Attributes
    ----------
    reports : list of QEReport
        Per linear layer, measured on the floating-point layer inputs.
    output_mse : dict
        Model-output mean squared error per mode.
    agreement : dict
        Fraction of columns whose argmax matches the floating-point
        output, per mode.
    layer_types : pd.DataFrame
        Per-layer-type aggregation of the reports.
    """

    reports: list[QEReport]
    output_mse: dict[str, float]
    agreement: dict[str, float]
    layer_types: pd.DataFrame = field(default_factory=pd.DataFrame)

    def report_frame(self) -> pd.DataFrame:
        return pd.DataFrame([report.to_dict() for report in self.reports])

    def histogram_frame(self) -> pd.DataFrame:
        frames = []
        for report in self.reports:
            frame = report.histogram_frame()
            frame.insert(0, "layer", report.layer)
            frames.append(frame)
        return pd.concat(frames, ignore_index=True)

    def to_dict(self) -> dict:
        return {
            "output_mse": self.output_mse,
            "agreement": self.agreement,
            "layers": [report.to_dict() for report in self.reports],
            "layer_types": self.layer_types.reset_index().to_dict(orient="records"),
        }


def output_mse(outputs: Sequence[Tensor2D], reference: Sequence[Tensor2D]) -> float:
    """Mean squared difference over every element of every batch."""
    values = np.hstack([as_array(output) for output in outputs])
    expected = np.hstack([as_array(output) for output in reference])
    return float(np.mean((values - expected) ** 2))


def argmax_agreement(outputs: Sequence[Tensor2D], reference: Sequence[Tensor2D]) -> float:
    """Fraction of columns where both outputs share the argmax row."""
    values = np.hstack([as_array(output) for output in outputs])
    expected = np.hstack([as_array(output) for output in reference])
    return float(np.mean(np.argmax(values, axis=0) == np.argmax(expected, axis=0)))


class ModelRunner:
    """
    Execute a model in floating point or with quantized linear layers.

    Parameters
    ----------
    model : Model
        The model.
    calib : CalibResult, optional
        Calibration of the model; required for every mode but "fp".
    verbose : bool, optional
        Log progress at INFO level.
        (default: False)

    Notes
    -----
    LayerNorm, GELU, softmax and residual additions always run in full
    precision. The attention operands q, k, v and the probabilities are
    quantized on per-tensor grids in the quantized modes but never carry
    a Noisy Bias.
    """

    def __init__(
        self,
        model: Model,
        calib: "CalibResult | None" = None,
        verbose: bool = False,
    ):
        self.model = model
        self.calib = calib
        self.logger = create_logger("Model_Runner", verbose)
        self._fp_layers = model.linear_layers()
        self._layers: dict[str, dict[str, QuantLinearLayer]] = {}

    def layers(self, mode: RunMode = "noisyquant") -> dict[str, QuantLinearLayer]:
        """Calibrated linear layers for `mode`, built once per mode."""
        if mode == "fp":
            return self._fp_layers
        if self.calib is None:
            raise NotCalibratedError(f"Mode {mode!r} needs a calibration result")
        if mode not in self._layers:
            self._layers[mode] = self.calib.build_layers(self.model, mode)
        return self._layers[mode]

    def _linear(self, layer: LayerSpec, values: np.ndarray, mode: str) -> np.ndarray:
        match mode:
            case "fp":
                output = self._fp_layers[layer.name].forward_fp(values)
            case "quant":
                output = self.layers(mode)[layer.name].forward_quant(values)
            case "noisyquant":
                output = self.layers(mode)[layer.name].forward_noisyquant(values)
            case "integer":
                output = self.layers(mode)[layer.name].forward_integer(values)
            case _:
                raise InvalidArgumentError(f"Invalid mode: {mode}")
        return output.to_numpy()

    def _operand(self, layer: LayerSpec, operand: str, values: np.ndarray) -> np.ndarray:
        key = f"{layer.name}.{operand}"
        params = self.calib.attention_params.get(key)
        if params is None:
            raise NotCalibratedError(f"No quantizer for attention operand {key!r}")
        return apply_quantizer(values, params)

    def _attention(
        self,
        layer: LayerSpec,
        values: np.ndarray,
        quantized: bool,
        capture: dict | None,
    ) -> np.ndarray:
        width = values.shape[0] // 3
        heads = layer.heads or 1
        head_width = width // heads
        operands = {
            "q": values[:width],
            "k": values[width:2 * width],
            "v": values[2 * width:],
        }

        if capture is not None:
            for operand in ATTENTION_OPERANDS[:3]:
                capture.setdefault(f"{layer.name}.{operand}", []).append(operands[operand])
        if quantized:
            operands = {
                operand: self._operand(layer, operand, operand_values)
                for operand, operand_values in operands.items()
            }

        probabilities = []
        for head in range(heads):
            rows = slice(head * head_width, (head + 1) * head_width)
            scores = matmul64(operands["q"][rows].T, operands["k"][rows])
            probabilities.append(softmax_rows(scores / np.sqrt(head_width)))

        if capture is not None:
            capture.setdefault(f"{layer.name}.probs", []).append(np.vstack(probabilities))
        if quantized:
            probabilities = [
                self._operand(layer, "probs", probs) for probs in probabilities
            ]

        outputs = [
            matmul64(operands["v"][head * head_width:(head + 1) * head_width], probs.T)
            for head, probs in enumerate(probabilities)
        ]
        return np.vstack(outputs)

    def forward(
        self,
        x: Tensor2D | np.ndarray,
        mode: RunMode = "fp",
        disabled_layers: Iterable[str] = (),
        capture: dict | None = None,
    ) -> Tensor2D:
        """
        Run one batch through the layer list.

        Parameters
        ----------
        x : Tensor2D or np.ndarray
            Input batch (width x tokens).
        mode : {"fp", "quant", "noisyquant", "integer"}, optional
            Execution mode.
            (default: "fp")
        disabled_layers : iterable of str, optional
            Layers (linear or attention) kept in floating point.
        capture : dict, optional
            When given, receives the input of every linear layer and
            the attention operands, appended per batch.

        Returns
        -------
        Tensor2D
            The model output.
        """
        if mode not in RUN_MODES:
            raise InvalidArgumentError(f"Invalid mode: {mode}")
        if mode != "fp" and self.calib is None:
            raise NotCalibratedError(f"Mode {mode!r} needs a calibration result")

        values = as_array(x)
        if values.ndim != 2 or values.shape[0] != self.model.spec.dims.width:
            raise ShapeMismatchError(
                f"Expected {self.model.spec.dims.width} input rows, got {values.shape}"
            )

        disabled = set(disabled_layers)
        outputs = [values]

        for layer in self.model.spec.layers:
            current = outputs[-1]
            quantized = mode != "fp" and layer.name not in disabled

            match layer.kind:
                case "layernorm":
                    result = layernorm(current)
                case "gelu":
                    result = gelu64(current)
                case "softmax_rows":
                    result = softmax_rows(current)
                case "residual_add":
                    result = current + outputs[layer.source]
                case "linear":
                    if capture is not None:
                        capture.setdefault(layer.name, []).append(current)
                    result = self._linear(layer, current, mode if quantized else "fp")
                case "attention":
                    result = self._attention(layer, current, quantized, capture)

            outputs.append(Tensor2D(result).to_numpy())

        return Tensor2D(outputs[-1])

    def run(
        self,
        data: Sequence[Tensor2D] | Tensor2D,
        mode: RunMode = "fp",
        disabled_layers: Iterable[str] = (),
    ) -> list[Tensor2D]:
        """Run every batch of `data` in `mode`."""
        batches = [data] if isinstance(data, Tensor2D) else list(data)
        disabled = tuple(disabled_layers)
        start = time.perf_counter()

        outputs = [self.forward(batch, mode, disabled) for batch in batches]

        self.logger.info(
            "%s run over %d batch(es) took %.3f seconds",
            mode, len(batches), time.perf_counter() - start,
        )
        return outputs

    def trace(self, data: Sequence[Tensor2D] | Tensor2D) -> dict[str, Tensor2D]:
        """
        Floating-point inputs of every linear layer and attention
        operand, concatenated along the token axis in batch order.
        """
        batches = [data] if isinstance(data, Tensor2D) else list(data)
        if not batches:
            raise PreconditionError("Tracing needs at least one batch")

        capture: dict[str, list[np.ndarray]] = {}
        for batch in batches:
            self.forward(batch, "fp", capture=capture)

        return {key: Tensor2D(np.hstack(values)) for key, values in capture.items()}

    def integer_ready(self) -> bool:
        return self.calib is not None and self.calib.integer_ready()


def evaluate(
    model: Model,
    data: Sequence[Tensor2D],
    calib: "CalibResult",
    verbose: bool = False,
    bins: int = 64,
) -> EvalMetrics:
    """
    Compare the quantized modes of a calibrated model with its
    floating-point run.

    Parameters
    ----------
    model : Model
        The model.
    data : sequence of Tensor2D
        Evaluation batches.
    calib : CalibResult
        Calibration of the model.
    verbose : bool, optional
        Log progress at INFO level.
        (default: False)
    bins : int, optional
        Histogram bins of the reports.
        (default: 64)

    Returns
    -------
    EvalMetrics
        Per-layer QE reports (on floating-point layer inputs), output
        MSE and argmax agreement for quant, noisyquant and, when every
        activation grid is per-tensor, integer modes, and the
        per-layer-type table.
    """
    logger = create_logger("Evaluation", verbose)
    start = time.perf_counter()
    runner = ModelRunner(model, calib, verbose)

    reference = runner.run(data, "fp")
    modes = ["quant", "noisyquant"]
    if runner.integer_ready():
        modes.append("integer")
    else:
        logger.warning("Integer mode skipped: activation grids are not per-tensor")

    mse, agreement = {}, {}
    for mode in modes:
        outputs = runner.run(data, mode)
        mse[mode] = output_mse(outputs, reference)
        agreement[mode] = argmax_agreement(outputs, reference)

    inputs = runner.trace(data)
    layers = runner.layers("noisyquant")
    reports = [layers[name].layer_qe_report(inputs[name], bins) for name in layers]

    logger.info("Evaluation took %.3f seconds", time.perf_counter() - start)
    return EvalMetrics(
        reports=reports,
        output_mse=mse,
        agreement=agreement,
        layer_types=QEStatistics(reports).layer_type_summary(),
    )
