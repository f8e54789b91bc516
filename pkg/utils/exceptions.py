"""
Custom Exceptions Module

This module defines custom exceptions to handle specific error
conditions of the quantization toolkit. Every exception carries the
process exit code the command-line interface returns for it.

Classes
-------
NoisyQuantError(Exception)
    Base class of every toolkit error.
ConfigError(NoisyQuantError)
    Invalid configuration (exit code 2).
InvalidArgumentError(ConfigError, ValueError)
    Exception raised for invalid function arguments.
AccumulatorOverflowError(ConfigError)
    Integer accumulator exceeded the int32 range.
DataIOError(NoisyQuantError)
    Data or model input/output failure (exit code 3).
TensorFormatError(DataIOError, ValueError)
    Malformed tensor container.
NonFiniteValueError(DataIOError, ValueError)
    NaN or infinite value found in a tensor.
ModelBundleError(DataIOError)
    Unreadable or inconsistent model bundle.
PreconditionError(NoisyQuantError)
    Violated operation precondition (exit code 4).
FeasibilityError(PreconditionError, ValueError)
    Parameters outside the validity window of the closed forms.
ShapeMismatchError(PreconditionError, ValueError)
    Incompatible tensor dimensions.
NotCalibratedError(PreconditionError)
    Quantized execution requested before calibration.
NoiseMissingError(PreconditionError)
    Noisy execution requested on a layer without a Noisy Bias.

"""


class NoisyQuantError(Exception):
    """
    Base class for the toolkit exceptions.

    Attributes
    ----------
    exit_code : int
        Process exit code used by the command-line interface.
    """

    exit_code: int = 1


class ConfigError(NoisyQuantError):
    """Exception raised for an invalid configuration."""

    exit_code = 2


class InvalidArgumentError(ConfigError, ValueError):
    """
    Exception raised for invalid arguments.

    Attributes
    ----------
    message : str
        Explanation of the error.
    """


class AccumulatorOverflowError(ConfigError):
    """Exception raised when an int32 accumulator would overflow."""


class DataIOError(NoisyQuantError):
    """Exception raised when data or model files cannot be used."""

    exit_code = 3


class TensorFormatError(DataIOError, ValueError):
    """Exception raised for a malformed `.t2d` container."""


class NonFiniteValueError(DataIOError, ValueError):
    """Exception raised when a tensor holds NaN or infinite values."""


class ModelBundleError(DataIOError):
    """Exception raised for an unreadable or inconsistent model bundle."""


class PreconditionError(NoisyQuantError):
    """Exception raised when an operation precondition is violated."""

    exit_code = 4


class FeasibilityError(PreconditionError, ValueError):
    """
    Exception raised when (x, n, b) leave the window where the
    closed-form error expressions hold.
    """


class ShapeMismatchError(PreconditionError, ValueError):
    """Exception raised for incompatible tensor dimensions."""


class NotCalibratedError(PreconditionError):
    """Exception raised when quantizer parameters are missing."""


class NoiseMissingError(PreconditionError):
    """Exception raised when a layer has no Noisy Bias attached."""
