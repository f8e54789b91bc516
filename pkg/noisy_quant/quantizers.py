"""
Quantizers module.

Symmetric uniform quantizer grids and the procedures that fit them:
per-channel MinMax for weights, MinMax, percentile, cosine-similarity
scale search and a two-region (sign split) quantizer for activations,
plus the bin-center distance map consumed by the noise theory.
"""

from dataclasses import dataclass
from typing import Literal, NamedTuple
import logging

import numpy as np
from sklearn.metrics.pairwise import cosine_similarity

from noisy_quant.numerics import Tensor2D, as_array, matmul64
from utils.exceptions import (
    InvalidArgumentError,
    NotCalibratedError,
    PreconditionError,
)

EPSILON_SCALE = 1e-8
DEFAULT_SEARCH_ALPHAS = tuple(np.round(np.arange(50, 121) / 100, 2))
TWIN_POSITIVE_PERCENTILE = 99.99

logger = logging.getLogger("Quantizers")


def round_half_away(values: np.ndarray) -> np.ndarray:
    """
    Round to the nearest integer, ties away from zero.

    Parameters
    ----------
    values : np.ndarray
        Real values.

    Returns
    -------
    np.ndarray
        Rounded values (float dtype).
    """
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


@dataclass(frozen=True, eq=False)
class QuantParams:
    """
    Symmetric uniform quantizer grid with a zero level.

    Parameters
    ----------
    bits : int
        Bit-width, at least 2.
    scale : float or np.ndarray
        Grid step. A scalar for per-tensor grids or one positive value
        per output channel (row) for per-channel grids.
    granularity : {"tensor", "channel"}, optional
        Grid granularity.
        (default: "tensor")

    Attributes
    ----------
    qmin : int
        Smallest code, -2**(bits - 1).
    qmax : int
        Largest code, 2**(bits - 1) - 1.
    half_bin : float or np.ndarray
        Half bin width b = scale / 2.
    """

    bits: int
    scale: float | np.ndarray
    granularity: Literal["tensor", "channel"] = "tensor"

    def __post_init__(self):
        if int(self.bits) < 2:
            raise InvalidArgumentError(f"bits must be at least 2, got {self.bits}")

        match self.granularity:
            case "tensor":
                scale = float(self.scale)
            case "channel":
                scale = np.asarray(self.scale, dtype=np.float64).reshape(-1)
                scale.setflags(write=False)
            case _:
                raise InvalidArgumentError(
                    "granularity must be either 'tensor' or 'channel'"
                )

        if not np.all(np.asarray(scale) > 0) or not np.all(np.isfinite(scale)):
            raise InvalidArgumentError("Quantizer scale must be positive and finite")

        object.__setattr__(self, "bits", int(self.bits))
        object.__setattr__(self, "scale", scale)

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def half_bin(self) -> float | np.ndarray:
        return self.scale / 2

    def broadcast_scale(self, shape: tuple[int, ...]) -> float | np.ndarray:
        """Return the scale broadcastable against an array of `shape`."""
        if self.granularity == "tensor":
            return self.scale

        if len(shape) != 2 or shape[0] != self.scale.size:
            raise PreconditionError(
                f"Per-channel grid with {self.scale.size} channels "
                f"cannot quantize shape {shape}"
            )
        return self.scale.reshape(-1, 1)

    def to_dict(self) -> dict:
        scale = (
            self.scale if self.granularity == "tensor"
            else [float(value) for value in self.scale]
        )
        return {
            "bits": self.bits,
            "granularity": self.granularity,
            "scale": scale,
            "rounding": "half-away",
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "QuantParams":
        if payload.get("rounding", "half-away") != "half-away":
            raise InvalidArgumentError(
                f"Unsupported rounding mode {payload.get('rounding')!r}"
            )
        return cls(
            bits=payload["bits"],
            scale=payload["scale"],
            granularity=payload.get("granularity", "tensor"),
        )


@dataclass(frozen=True, eq=False)
class TwinQuantParams:
    """
    Two symmetric grids routed by the sign of the value: negatives use
    `negative`, everything at or above `split` uses `positive`.
    """

    negative: QuantParams
    positive: QuantParams
    split: float = 0.0

    @property
    def bits(self) -> int:
        return self.positive.bits

    @property
    def granularity(self) -> str:
        return "twin"

    def to_dict(self) -> dict:
        return {
            "granularity": "twin",
            "split": self.split,
            "negative": self.negative.to_dict(),
            "positive": self.positive.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TwinQuantParams":
        return cls(
            negative=QuantParams.from_dict(payload["negative"]),
            positive=QuantParams.from_dict(payload["positive"]),
            split=payload.get("split", 0.0),
        )


@dataclass(frozen=True)
class IdentityParams:
    """Pass-through quantizer: values are left unchanged."""

    bits: None = None

    @property
    def granularity(self) -> str:
        return "identity"

    def to_dict(self) -> dict:
        return {"granularity": "identity"}


ActivationParams = QuantParams | TwinQuantParams | IdentityParams


def params_from_dict(payload: dict) -> ActivationParams:
    """Rebuild any quantizer description written by `to_dict`."""
    match payload.get("granularity"):
        case "twin":
            return TwinQuantParams.from_dict(payload)
        case "identity":
            return IdentityParams()
        case _:
            return QuantParams.from_dict(payload)


def quantize_codes(x: Tensor2D | np.ndarray | float, p: QuantParams) -> np.ndarray:
    """
    Integer codes clamp(round_half_away(x / scale), qmin, qmax).

    Parameters
    ----------
    x : Tensor2D, np.ndarray or float
        Values to quantize.
    p : QuantParams
        The grid.

    Returns
    -------
    np.ndarray
        int64 codes with the shape of `x`.
    """
    values = as_array(x)
    scale = p.broadcast_scale(values.shape)
    codes = np.clip(round_half_away(values / scale), p.qmin, p.qmax)
    return codes.astype(np.int64)


def quantize(x, p: QuantParams):
    """
    Quantize and dequantize `x` on the grid `p`.

    Parameters
    ----------
    x : Tensor2D, np.ndarray or float
        Values to quantize.
    p : QuantParams
        The grid.

    Returns
    -------
    Tensor2D or np.ndarray
        code * scale, as a Tensor2D when `x` is one, otherwise a
        float64 array.
    """
    values = as_array(x)
    dequantized = quantize_codes(values, p) * p.broadcast_scale(values.shape)

    if isinstance(x, Tensor2D):
        return Tensor2D(dequantized)
    return dequantized


def quantize_twin(x, p: TwinQuantParams) -> np.ndarray:
    """Quantize each value on the grid of its sign region."""
    values = as_array(x)
    negative = values < p.split
    return np.where(
        negative,
        quantize(values, p.negative),
        quantize(values, p.positive),
    )


def apply_quantizer(x, p: ActivationParams | None) -> np.ndarray:
    """
    Dispatch quantize-dequantize over every quantizer type.

    Parameters
    ----------
    x : Tensor2D or np.ndarray
        Values to quantize.
    p : QuantParams, TwinQuantParams or IdentityParams
        The quantizer.

    Returns
    -------
    np.ndarray
        Float64 dequantized values.

    Raises
    ------
    NotCalibratedError
        If `p` is None.
    """
    match p:
        case QuantParams():
            return quantize(as_array(x), p)
        case TwinQuantParams():
            return quantize_twin(x, p)
        case IdentityParams():
            return as_array(x)
        case None:
            raise NotCalibratedError("Quantizer parameters are not fitted")
        case _:
            raise InvalidArgumentError(f"Unknown quantizer {p!r}")


def _safe_scale(max_abs: np.ndarray | float, qmax: int, what: str):
    scale = np.asarray(max_abs, dtype=np.float64) / qmax
    degenerate = scale <= 0

    if np.any(degenerate):
        logger.warning(
            "%s: %d all-zero group(s), using epsilon scale %g",
            what, int(np.sum(degenerate)), EPSILON_SCALE,
        )
        scale = np.where(degenerate, EPSILON_SCALE, scale)

    return scale


def fit_weight_minmax(w: Tensor2D | np.ndarray, bits: int) -> QuantParams:
    """
    Per-channel absolute MinMax weight grid, without clamping.

    Parameters
    ----------
    w : Tensor2D or np.ndarray
        Weights (k output channels x m inputs).
    bits : int
        Bit-width.

    Returns
    -------
    QuantParams
        Per-channel grid with scale_c = max|w_c| / qmax, so each
        channel's largest magnitude maps to code qmax. All-zero
        channels get the epsilon scale.
    """
    weights = as_array(w)
    qmax = 2 ** (bits - 1) - 1
    scale = _safe_scale(np.max(np.abs(weights), axis=1), qmax, "fit_weight_minmax")
    return QuantParams(bits=bits, scale=scale, granularity="channel")


def fit_activation_minmax(samples: Tensor2D | np.ndarray, bits: int) -> QuantParams:
    """
    Per-tensor absolute MinMax activation grid.

    Parameters
    ----------
    samples : Tensor2D or np.ndarray
        Calibration activations.
    bits : int
        Bit-width.

    Returns
    -------
    QuantParams
        Grid with scale = max|samples| / qmax.
    """
    values = as_array(samples)
    if values.size == 0:
        raise PreconditionError("fit_activation_minmax needs samples")

    qmax = 2 ** (bits - 1) - 1
    scale = _safe_scale(np.max(np.abs(values)), qmax, "fit_activation_minmax")
    return QuantParams(bits=bits, scale=float(scale))


def fit_activation_percentile(
    samples: Tensor2D | np.ndarray,
    bits: int,
    pct: float = 99.99,
) -> QuantParams:
    """
    Per-tensor grid clipped at a percentile of |samples|.

    Parameters
    ----------
    samples : Tensor2D or np.ndarray
        Calibration activations.
    bits : int
        Bit-width.
    pct : float, optional
        Percentile in (0, 100], linearly interpolated.
        (default: 99.99)

    Returns
    -------
    QuantParams
        Grid with scale = percentile_pct(|samples|) / qmax.

    Raises
    ------
    PreconditionError
        If `samples` is empty.
    InvalidArgumentError
        If `pct` is outside (0, 100].
    """
    values = as_array(samples)
    if values.size == 0:
        raise PreconditionError("fit_activation_percentile needs samples")
    if not 0 < pct <= 100:
        raise InvalidArgumentError(f"pct must be in (0, 100], got {pct}")

    qmax = 2 ** (bits - 1) - 1
    clip = np.percentile(np.abs(values), pct, method="linear")
    scale = _safe_scale(clip, qmax, "fit_activation_percentile")
    return QuantParams(bits=bits, scale=float(scale))


def fit_activation_scale_search(
    x_cal: Tensor2D | np.ndarray,
    weight: Tensor2D | np.ndarray,
    bits: int,
    weight_bits: int = 8,
    alphas: tuple[float, ...] = DEFAULT_SEARCH_ALPHAS,
) -> QuantParams:
    """
    Choose the activation scale from a candidate grid by maximizing the
    cosine similarity between the floating-point layer output and the
    output computed with quantized weights and activations.

    Candidates are alpha * s_minmax for every alpha in `alphas`
    (default 0.50, 0.51, ..., 1.20). Ties go to the smaller scale.

    Parameters
    ----------
    x_cal : Tensor2D or np.ndarray
        Calibration activations (m x t).
    weight : Tensor2D or np.ndarray
        Layer weights (k x m), quantized with `fit_weight_minmax`.
    bits : int
        Activation bit-width.
    weight_bits : int, optional
        Weight bit-width.
        (default: 8)
    alphas : tuple of float, optional
        Candidate multipliers of the MinMax scale.

    Returns
    -------
    QuantParams
        The selected per-tensor grid.

    Raises
    ------
    PreconditionError
        If the calibration set or the candidate grid is empty.
    """
    activations = as_array(x_cal)
    weights = as_array(weight)

    if activations.size == 0:
        raise PreconditionError("fit_activation_scale_search needs calibration data")
    if len(alphas) == 0:
        raise PreconditionError("The scale candidate grid is empty")

    minmax_scale = fit_activation_minmax(activations, bits).scale
    quantized_weights = quantize(weights, fit_weight_minmax(weights, weight_bits))
    reference = matmul64(weights, activations).reshape(1, -1)

    best_scale, best_similarity = None, -np.inf
    for scale in sorted(float(alpha) * minmax_scale for alpha in alphas):
        params = QuantParams(bits=bits, scale=scale)
        output = matmul64(quantized_weights, quantize(activations, params))
        similarity = float(cosine_similarity(reference, output.reshape(1, -1))[0, 0])

        if similarity > best_similarity + 1e-12:
            best_scale, best_similarity = scale, similarity

    logger.info(
        "scale search: selected %.6g (MinMax %.6g), cosine %.8f",
        best_scale, minmax_scale, best_similarity,
    )
    return QuantParams(bits=bits, scale=best_scale)


def fit_twin_region(samples: Tensor2D | np.ndarray, bits: int) -> TwinQuantParams:
    """
    Fit a sign-split quantizer: MinMax on the negative values and the
    99.99th percentile on the non-negative values.

    Parameters
    ----------
    samples : Tensor2D or np.ndarray
        Calibration activations.
    bits : int
        Bit-width of both regions.

    Returns
    -------
    TwinQuantParams
        The two grids. An empty side gets the epsilon scale.
    """
    values = as_array(samples).reshape(-1)
    if values.size == 0:
        raise PreconditionError("fit_twin_region needs samples")

    negatives = values[values < 0]
    positives = values[values >= 0]

    if negatives.size:
        negative = fit_activation_minmax(negatives, bits)
    else:
        logger.warning("fit_twin_region: no negative samples, using epsilon scale")
        negative = QuantParams(bits=bits, scale=EPSILON_SCALE)

    if positives.size:
        positive = fit_activation_percentile(positives, bits, TWIN_POSITIVE_PERCENTILE)
    else:
        logger.warning("fit_twin_region: no positive samples, using epsilon scale")
        positive = QuantParams(bits=bits, scale=EPSILON_SCALE)

    return TwinQuantParams(negative=negative, positive=positive)


class BinDistance(NamedTuple):
    """
    Result of `bin_center_distance`.

    Attributes
    ----------
    distances : np.ndarray
        b - |x - nearest level|, in [0, b]; NaN where clipped.
    half_bin : np.ndarray
        Per-element half bin width b of the owning grid.
    clipped : np.ndarray
        True where the value lies outside [qmin*scale, qmax*scale].
    """

    distances: np.ndarray
    half_bin: np.ndarray
    clipped: np.ndarray


def _grid_distance(values: np.ndarray, p: QuantParams):
    scale = p.scale
    half_bin = scale / 2
    residual = values - scale * round_half_away(values / scale)
    distances = np.clip(half_bin - np.abs(residual), 0.0, half_bin)
    clipped = (values < p.qmin * scale) | (values > p.qmax * scale)
    return distances, np.full(values.shape, half_bin), clipped


def bin_center_distance(x, p: QuantParams | TwinQuantParams) -> BinDistance:
    """
    Distance of every value from the decision threshold of its bin.

    The distance is b minus the distance to the nearest reconstruction
    level: 0 on a rounding threshold (worst case), b on a level (zero
    error). Values outside the clip range are flagged and excluded.

    Parameters
    ----------
    x : Tensor2D or np.ndarray
        Activations.
    p : QuantParams or TwinQuantParams
        A per-tensor grid, or a two-region grid (each value measured on
        its own region's grid).

    Returns
    -------
    BinDistance
        Distances, per-element half bin width and clipped mask.

    Raises
    ------
    PreconditionError
        For per-channel grids.
    """
    values = as_array(x)

    match p:
        case QuantParams(granularity="tensor"):
            distances, half_bin, clipped = _grid_distance(values, p)
        case TwinQuantParams():
            negative = values < p.split
            neg = _grid_distance(values, p.negative)
            pos = _grid_distance(values, p.positive)
            distances, half_bin, clipped = (
                np.where(negative, n_part, p_part) for n_part, p_part in zip(neg, pos)
            )
        case _:
            raise PreconditionError("bin_center_distance needs a per-tensor grid")

    distances = np.where(clipped, np.nan, distances)
    return BinDistance(distances=distances, half_bin=half_bin, clipped=clipped)


def reference_scale(p: ActivationParams) -> float:
    """
    The activation scale the noise search grid is expressed in: the
    tensor scale, or the positive-region scale of a two-region grid.
    """
    match p:
        case QuantParams(granularity="tensor"):
            return float(p.scale)
        case TwinQuantParams():
            return float(p.positive.scale)
        case _:
            raise PreconditionError("The noise search needs a per-tensor activation grid")
