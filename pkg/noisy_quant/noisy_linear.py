"""
Noisy linear module.

Quantized fully-connected layers with a fixed Noisy Bias added to the
input activation before quantization and removed after the multiply
through a precomputed denoising bias:

    f(X)     = W X + B
    f_q(X)   = q_W(W) q_A(X) + B
    f_Nq(X)  = q_W(W) q_A(X + N) + (B - q_W(W) N)

The integer path stores N as INT16 codes at 1/256 of the activation
step and B' in the int32 accumulator domain.

Classes:
- NoisyBias: The per-layer noise vector and its INT16 image.
- QuantLinearLayer: Weights, quantizers, noise and denoising bias.
- QEReport: Per-layer input/output quantization error statistics.
"""

from dataclasses import dataclass, field, replace
from typing import Literal, Mapping
import logging

import numpy as np
import pandas as pd

from noisy_quant.numerics import (
    Histogram,
    Rng,
    Tensor2D,
    as_array,
    histogram,
    histogram_edges,
    matmul64,
    uniform_vector,
)
from noisy_quant.quantizers import (
    ActivationParams,
    IdentityParams,
    QuantParams,
    apply_quantizer,
    quantize_codes,
    round_half_away,
)
from utils.exceptions import (
    AccumulatorOverflowError,
    ConfigError,
    InvalidArgumentError,
    NoiseMissingError,
    NotCalibratedError,
    PreconditionError,
    ShapeMismatchError,
)

LayerType = Literal["qkv", "proj", "fc1", "fc2", "other"]
LAYER_TYPES: tuple[str, ...] = ("qkv", "proj", "fc1", "fc2", "other")

NOISE_FRACTION_BITS = 8
INPUT_FRACTION_BITS = 16
INT16_MAX = 2**15 - 1
INT32_MAX = 2**31 - 1

INT8_MAC_PJ = 0.23
FP32_ADD_PJ = 0.9
INT16_ADD_PJ = 0.05

logger = logging.getLogger("Noisy_Linear")


def noise_scale_for(activation_scale: float) -> float:
    """Fixed-point step of the INT16 noise image."""
    return activation_scale / 2**NOISE_FRACTION_BITS


def int16_activation_scale(a_params: ActivationParams | None) -> float | None:
    """Activation step the INT16 noise image is anchored to, if any."""
    if isinstance(a_params, QuantParams) and a_params.granularity == "tensor":
        return float(a_params.scale)
    return None


@dataclass(frozen=True, eq=False)
class NoisyBias:
    """
    Per-layer Noisy Bias, sampled once and fixed for inference.

    When an activation scale is known the sampled values are snapped to
    the INT16 grid (step `noise_scale`), so the float and integer
    execution paths add the very same noise.

    Parameters
    ----------
    values : Tensor2D
        The noise vector (m x 1), every value in [-n, n].
    half_range : float
        Noise half-range n; 0 means disabled.
    seed : int or None
        Seed the vector was sampled with.
    int16_codes : np.ndarray or None
        INT16 image of the noise.
    noise_scale : float or None
        Step of the INT16 image.
    """

    values: Tensor2D
    half_range: float
    seed: int | None = None
    int16_codes: np.ndarray | None = None
    noise_scale: float | None = None

    @property
    def enabled(self) -> bool:
        return self.half_range > 0

    @property
    def length(self) -> int:
        return self.values.rows

    def array(self) -> np.ndarray:
        """The noise as a float64 column, reconstructed from the INT16
        image when one exists."""
        if self.int16_codes is None:
            return self.values.to_numpy()
        return self.int16_codes.astype(np.float64).reshape(-1, 1) * self.noise_scale

    @classmethod
    def from_values(
        cls,
        values,
        half_range: float | None = None,
        activation_scale: float | None = None,
        seed: int | None = None,
    ) -> "NoisyBias":
        """
        Build a Noisy Bias from explicit values.

        Parameters
        ----------
        values : array-like
            The noise values (any shape, flattened to m x 1).
        half_range : float, optional
            Noise half-range; defaults to max|values|.
        activation_scale : float, optional
            Activation grid step; when given, values are snapped to the
            INT16 grid of step activation_scale / 256.
        seed : int, optional
            Seed recorded with the noise.

        Returns
        -------
        NoisyBias
            The noise with its INT16 image.
        """
        raw = np.asarray(values, dtype=np.float64).reshape(-1, 1)
        half_range = float(np.max(np.abs(raw), initial=0.0)) if half_range is None else float(half_range)

        if half_range < 0:
            raise InvalidArgumentError(f"Noise half-range must be non-negative, got {half_range}")

        if activation_scale is None:
            return cls(Tensor2D(raw), half_range, seed)

        noise_scale = noise_scale_for(activation_scale)
        limit = int(np.floor(half_range / noise_scale + 1e-9))

        if limit > INT16_MAX:
            raise ConfigError(
                f"Noise half-range {half_range} needs codes up to {limit}, "
                "beyond the INT16 range at this activation scale"
            )

        codes = np.clip(round_half_away(raw / noise_scale), -limit, limit).astype(np.int16)
        snapped = codes.astype(np.float64) * noise_scale
        return cls(Tensor2D(snapped), half_range, seed, codes, noise_scale)

    @classmethod
    def sample(
        cls,
        length: int,
        half_range: float,
        seed: int,
        activation_scale: float | None = None,
    ) -> "NoisyBias":
        """
        Sample N ~ U(-n, n) of `length` values.

        Parameters
        ----------
        length : int
            Number of input features m.
        half_range : float
            Noise half-range n; 0 gives a disabled, all-zero noise.
        seed : int
            Seed of the draw.
        activation_scale : float, optional
            Activation grid step used for the INT16 image.

        Returns
        -------
        NoisyBias
            The sampled noise.
        """
        if half_range < 0:
            raise InvalidArgumentError(f"Noise half-range must be non-negative, got {half_range}")

        if half_range == 0:
            raw = np.zeros((length, 1))
        else:
            raw = uniform_vector(Rng(seed), length, -half_range, half_range).to_numpy()

        return cls.from_values(raw, half_range, activation_scale, seed)

    def to_dict(self) -> dict:
        return {
            "half_range": self.half_range,
            "seed": self.seed,
            "noise_scale": self.noise_scale,
            "enabled": self.enabled,
        }


@dataclass(frozen=True, eq=False)
class QEReport:
    """
    Quantization error statistics of one layer on one input.

    All errors are per-element mean squared errors.

    Attributes
    ----------
    layer : str
        Layer name.
    layer_type : str
        Layer type tag.
    bits_w, bits_a : int or None
        Weight and activation bit-widths.
    n : float
        Noise half-range.
    input_qe : float
        Mean (q(X) - X)**2.
    input_qe_noisy : float
        Mean (q(X + N) - X - N)**2.
    delta : float
        input_qe_noisy - input_qe.
    output_qe : float
        Mean (f_q(X) - f(X))**2.
    output_qe_noisy : float
        Mean (f_Nq(X) - f(X))**2.
    drop_pct : float
        Relative output error reduction in percent.
    histograms : dict
        Input and output histograms.
    """

    layer: str
    layer_type: str
    bits_w: int | None
    bits_a: int | None
    n: float
    input_qe: float
    input_qe_noisy: float
    delta: float
    output_qe: float
    output_qe_noisy: float
    drop_pct: float
    histograms: dict[str, Histogram] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "layer_type": self.layer_type,
            "bits_w": self.bits_w,
            "bits_a": self.bits_a,
            "n": self.n,
            "input_qe": self.input_qe,
            "input_qe_noisy": self.input_qe_noisy,
            "D": self.delta,
            "output_qe": self.output_qe,
            "output_qe_noisy": self.output_qe_noisy,
            "drop_pct": self.drop_pct,
        }

    def histogram_frame(self) -> pd.DataFrame:
        """All histograms of the report as one long table."""
        records = []
        for name, hist in self.histograms.items():
            records += hist.to_records(name)
        return pd.DataFrame(records, columns=["histogram", "bin_left", "bin_right", "count"])


def _bits(params) -> int | None:
    return None if params is None else params.bits


def _round_to_odd(values: np.ndarray) -> np.ndarray:
    floor = np.floor(values)
    keep = (floor == values) | (np.mod(floor, 2) == 1)
    return np.where(keep, floor, floor + 1).astype(np.int64)


def _rounding_shift(values: np.ndarray, bits: int) -> np.ndarray:
    half = np.int64(1) << (bits - 1)
    return np.sign(values) * ((np.abs(values) + half) >> bits)


@dataclass(frozen=True, eq=False)
class QuantLinearLayer:
    """
    Fully-connected layer f(X) = W X + B with quantized execution paths.

    Parameters
    ----------
    weight : Tensor2D
        W (k x m).
    bias : Tensor2D
        B (k x 1).
    layer_type : {"qkv", "proj", "fc1", "fc2", "other"}, optional
        Layer type tag.
        (default: "other")
    name : str, optional
        Layer name.
        (default: "linear")
    w_params : QuantParams or IdentityParams, optional
        Weight quantizer.
    a_params : QuantParams, TwinQuantParams or IdentityParams, optional
        Activation quantizer.
    noisy : NoisyBias, optional
        The attached Noisy Bias.
    denoise_bias : Tensor2D, optional
        B' = B - q_W(W) N, computed by `attach_noise`.
    """

    weight: Tensor2D
    bias: Tensor2D
    layer_type: LayerType = "other"
    name: str = "linear"
    w_params: QuantParams | IdentityParams | None = None
    a_params: ActivationParams | None = None
    noisy: NoisyBias | None = None
    denoise_bias: Tensor2D | None = None

    def __post_init__(self):
        if self.layer_type not in LAYER_TYPES:
            raise InvalidArgumentError(
                f"layer_type must be one of {LAYER_TYPES}, got {self.layer_type!r}"
            )
        if self.bias.shape != (self.weight.rows, 1):
            raise ShapeMismatchError(
                f"{self.name}: bias shape {self.bias.shape} does not match "
                f"weight shape {self.weight.shape}"
            )
        if self.noisy is not None and self.noisy.length != self.weight.cols:
            raise ShapeMismatchError(
                f"{self.name}: noise length {self.noisy.length} does not match "
                f"{self.weight.cols} input features"
            )

    @property
    def out_features(self) -> int:
        return self.weight.rows

    @property
    def in_features(self) -> int:
        return self.weight.cols

    def with_params(
        self,
        w_params: QuantParams | IdentityParams,
        a_params: ActivationParams,
    ) -> "QuantLinearLayer":
        """Return a copy with new quantizers and no noise attached."""
        return replace(
            self, w_params=w_params, a_params=a_params, noisy=None, denoise_bias=None
        )

    def _input(self, x) -> np.ndarray:
        values = as_array(x)
        if values.ndim != 2 or values.shape[0] != self.in_features:
            raise ShapeMismatchError(
                f"{self.name}: expected {self.in_features} input rows, got {values.shape}"
            )
        return values

    def _require_params(self):
        if self.w_params is None or self.a_params is None:
            raise NotCalibratedError(f"{self.name}: quantizer parameters are not fitted")

    def quantized_weight(self) -> np.ndarray:
        """q_W(W) as float64."""
        self._require_params()
        return apply_quantizer(self.weight, self.w_params)

    def compute_denoise_bias(self, noisy: NoisyBias) -> Tensor2D:
        """B - q_W(W) N."""
        return Tensor2D(
            self.bias.to_numpy() - matmul64(self.quantized_weight(), noisy.array())
        )

    def forward_fp(self, x) -> Tensor2D:
        """
        Floating-point output W X + B.

        Parameters
        ----------
        x : Tensor2D or np.ndarray
            Input activations (m x t).

        Returns
        -------
        Tensor2D
            The layer output (k x t).
        """
        values = self._input(x)
        return Tensor2D(matmul64(self.weight.to_numpy(), values) + self.bias.to_numpy())

    def _quantized_forward(self, values: np.ndarray, bias: Tensor2D) -> Tensor2D:
        quantized_input = apply_quantizer(values, self.a_params)
        return Tensor2D(
            matmul64(self.quantized_weight(), quantized_input) + bias.to_numpy()
        )

    def forward_quant(self, x) -> Tensor2D:
        """
        Simulated quantized output q_W(W) q_A(X) + B.

        Raises
        ------
        NotCalibratedError
            If the quantizers are not fitted.
        """
        self._require_params()
        return self._quantized_forward(self._input(x), self.bias)

    def attach_noise(
        self,
        n: float,
        seed: int = 0,
        values=None,
    ) -> "QuantLinearLayer":
        """
        Attach a Noisy Bias and precompute the denoising bias.

        Parameters
        ----------
        n : float
            Noise half-range; 0 attaches a disabled, all-zero noise.
        seed : int, optional
            Seed of the noise draw.
            (default: 0)
        values : array-like, optional
            Explicit noise values used instead of sampling.

        Returns
        -------
        QuantLinearLayer
            A new layer carrying the noise and B'.
        """
        self._require_params()
        activation_scale = int16_activation_scale(self.a_params)

        if values is not None:
            noisy = NoisyBias.from_values(values, n if n else None, activation_scale, seed)
        else:
            noisy = NoisyBias.sample(self.in_features, n, seed, activation_scale)

        layer = replace(self, noisy=noisy, denoise_bias=self.compute_denoise_bias(noisy))
        logger.info("%s: attached noise n=%g (seed %s)", self.name, n, seed)
        return layer

    def forward_noisyquant(self, x) -> Tensor2D:
        """
        NoisyQuant output q_W(W) q_A(X + N) + B'.

        Raises
        ------
        NoiseMissingError
            If no noise is attached.
        """
        if self.noisy is None:
            raise NoiseMissingError(f"{self.name}: no Noisy Bias attached")

        values = self._input(x)
        return self._quantized_forward(values + self.noisy.array(), self.denoise_bias)

    def _integer_params(self) -> tuple[QuantParams, QuantParams]:
        self._require_params()
        a_params, w_params = self.a_params, self.w_params

        if not (isinstance(a_params, QuantParams) and a_params.granularity == "tensor"):
            raise PreconditionError(
                f"{self.name}: the integer path needs a per-tensor activation grid"
            )
        if not isinstance(w_params, QuantParams):
            raise PreconditionError(f"{self.name}: the integer path needs quantized weights")
        if a_params.bits > 8 or w_params.bits > 8:
            raise ConfigError(
                f"{self.name}: the integer path supports at most 8-bit codes, "
                f"got W{w_params.bits}A{a_params.bits}"
            )
        if self.noisy is None:
            raise NoiseMissingError(f"{self.name}: no Noisy Bias attached")
        if self.noisy.enabled and self.noisy.int16_codes is None:
            raise PreconditionError(f"{self.name}: the noise has no INT16 image")

        return a_params, w_params

    def bias_scale(self) -> np.ndarray:
        """Accumulator LSB a_scale * w_scale per output channel (k x 1)."""
        a_params, w_params = self._integer_params()
        w_scale = np.broadcast_to(
            np.asarray(w_params.scale, dtype=np.float64).reshape(-1, 1),
            (self.out_features, 1),
        )
        return a_params.scale * w_scale

    def bias_codes(self) -> np.ndarray:
        """B' in accumulator units (int64, k x 1)."""
        codes = round_half_away(self.denoise_bias.to_numpy() / self.bias_scale()).astype(np.int64)

        if np.any(np.abs(codes) > INT32_MAX):
            raise AccumulatorOverflowError(f"{self.name}: B' exceeds the int32 range")
        if np.any(np.abs(codes) > INT16_MAX):
            logger.warning(
                "%s: %d B' code(s) exceed the INT16 range",
                self.name, int(np.sum(np.abs(codes) > INT16_MAX)),
            )
        return codes

    def integer_activation_codes(self, x) -> np.ndarray:
        """
        int8 codes of X + N computed in fixed point.

        X enters at 2**-16 of the activation step with round-to-odd,
        the INT16 noise codes (2**-8 of the step) are shifted into that
        domain, and one rounding shift yields the activation codes. The
        round-to-odd entry keeps the final rounding identical to
        rounding (X + N) / a_scale directly.
        """
        a_params, _ = self._integer_params()
        values = self._input(x)
        unit = 1 << INPUT_FRACTION_BITS
        limit = (abs(a_params.qmin) + 1) * unit

        fixed = _round_to_odd(np.clip(values / a_params.scale * unit, -limit, limit))

        if self.noisy.enabled:
            shift = INPUT_FRACTION_BITS - NOISE_FRACTION_BITS
            fixed = fixed + (self.noisy.int16_codes.astype(np.int64).reshape(-1, 1) << shift)

        codes = _rounding_shift(fixed, INPUT_FRACTION_BITS)
        return np.clip(codes, a_params.qmin, a_params.qmax)

    def forward_integer(self, x) -> Tensor2D:
        """
        Integer-only execution: int8 activation and weight codes, INT16
        noise, int32 accumulation plus B' codes, one final rescale.

        Raises
        ------
        AccumulatorOverflowError
            If an accumulator leaves the int32 range.
        PreconditionError
            For per-channel or two-region activation grids.
        """
        _, w_params = self._integer_params()
        x_codes = self.integer_activation_codes(x)
        w_codes = quantize_codes(self.weight, w_params)

        accumulator = np.matmul(w_codes, x_codes) + self.bias_codes()

        if np.any(np.abs(accumulator) > INT32_MAX):
            raise AccumulatorOverflowError(
                f"{self.name}: accumulator exceeds the int32 range"
            )

        return Tensor2D(accumulator.astype(np.float64) * self.bias_scale())

    def integer_error_bound(self) -> np.ndarray:
        """
        Per-output bound on |forward_integer - forward_noisyquant|:
        sum_c |q_W(W)_c| * noise_scale / 2 + bias_scale / 2.
        """
        bias_scale = self.bias_scale()
        noise_scale = self.noisy.noise_scale if self.noisy.enabled else 0.0
        weight_term = np.sum(np.abs(self.quantized_weight()), axis=1, keepdims=True)
        return weight_term * noise_scale / 2 + bias_scale / 2

    def layer_qe_report(self, x, bins: int = 64) -> QEReport:
        """
        Input and output quantization errors with and without noise.

        Parameters
        ----------
        x : Tensor2D or np.ndarray
            Input activations (m x t).
        bins : int, optional
            Histogram bins.
            (default: 64)

        Returns
        -------
        QEReport
            Per-element mean errors, their difference, the relative
            output error drop and histograms.
        """
        tensor = x if isinstance(x, Tensor2D) else Tensor2D(x)
        values = self._input(tensor)
        noise = self.noisy.array() if self.noisy is not None else np.zeros((self.in_features, 1))
        noisy_values = values + noise

        quantized = apply_quantizer(values, self.a_params)
        quantized_noisy = apply_quantizer(noisy_values, self.a_params)

        input_qe = float(np.mean((quantized - values) ** 2))
        input_qe_noisy = float(np.mean((quantized_noisy - noisy_values) ** 2))

        output_fp = self.forward_fp(tensor).to_numpy()
        output_quant = self.forward_quant(tensor).to_numpy()
        output_noisy = (
            self.forward_noisyquant(tensor).to_numpy()
            if self.noisy is not None else output_quant
        )

        output_qe = float(np.mean((output_quant - output_fp) ** 2))
        output_qe_noisy = float(np.mean((output_noisy - output_fp) ** 2))
        drop_pct = (
            100 * (output_qe - output_qe_noisy) / output_qe if output_qe > 0 else 0.0
        )

        input_edges = histogram_edges(
            float(min(values.min(), noisy_values.min())),
            float(max(values.max(), noisy_values.max())),
            bins,
        )
        outputs = np.concatenate([output_fp, output_quant, output_noisy])
        output_edges = histogram_edges(float(outputs.min()), float(outputs.max()), bins)

        return QEReport(
            layer=self.name,
            layer_type=self.layer_type,
            bits_w=_bits(self.w_params),
            bits_a=_bits(self.a_params),
            n=self.noisy.half_range if self.noisy is not None else 0.0,
            input_qe=input_qe,
            input_qe_noisy=input_qe_noisy,
            delta=input_qe_noisy - input_qe,
            output_qe=output_qe,
            output_qe_noisy=output_qe_noisy,
            drop_pct=float(drop_pct),
            histograms={
                "input": histogram(values, input_edges),
                "input_noisy": histogram(noisy_values, input_edges),
                "output_fp": histogram(output_fp, output_edges),
                "output_quant": histogram(output_quant, output_edges),
                "output_noisyquant": histogram(output_noisy, output_edges),
            },
        )


def max_accumulator(in_features: int, bits_a: int = 8, bits_w: int = 8) -> int:
    """Worst-case |accumulator| of an m-input dot product of codes."""
    return in_features * 2 ** (bits_a - 1) * 2 ** (bits_w - 1)


def overhead_report(layers: Mapping[str, QuantLinearLayer], tokens: int) -> dict:
    """
    Memory and compute overhead of the Noisy Bias.

    Parameters
    ----------
    layers : Mapping[str, QuantLinearLayer]
        The model's linear layers.
    tokens : int
        Tokens (columns) per forward pass.

    Returns
    -------
    dict
        Parameter counts, INT8 MACs, noise adds and energy estimates
        (0.23 pJ per INT8 MAC, 0.9 pJ per FP32 add, 0.05 pJ per INT16
        add), per layer and in total.
    """
    rows = []
    for name, layer in layers.items():
        k, m = layer.out_features, layer.in_features
        noise_enabled = layer.noisy is not None and layer.noisy.enabled
        rows.append(
            {
                "layer": name,
                "layer_type": layer.layer_type,
                "weight_params": k * m,
                "bias_params": k,
                "noise_params": m if noise_enabled else 0,
                "int8_macs": k * m * tokens,
                "noise_adds": m * tokens if noise_enabled else 0,
            }
        )

    frame = pd.DataFrame(
        rows,
        columns=["layer", "layer_type", "weight_params", "bias_params",
                 "noise_params", "int8_macs", "noise_adds"],
    )
    totals = frame.drop(columns=["layer", "layer_type"]).sum().astype(int).to_dict()

    params = totals.get("weight_params", 0) + totals.get("bias_params", 0)
    mac_energy = totals.get("int8_macs", 0) * INT8_MAC_PJ
    fp32_add_energy = totals.get("noise_adds", 0) * FP32_ADD_PJ
    int16_add_energy = totals.get("noise_adds", 0) * INT16_ADD_PJ

    return {
        "tokens": tokens,
        "layers": frame.to_dict(orient="records"),
        "totals": {key: int(value) for key, value in totals.items()},
        "noise_param_pct": 100 * totals.get("noise_params", 0) / params if params else 0.0,
        "energy_pj": {
            "int8_mac": mac_energy,
            "noise_add_fp32": fp32_add_energy,
            "noise_add_int16": int16_add_energy,
        },
        "add_overhead_pct_fp32": 100 * fp32_add_energy / mac_energy if mac_energy else 0.0,
        "add_overhead_pct_int16": 100 * int16_add_energy / mac_energy if mac_energy else 0.0,
    }
