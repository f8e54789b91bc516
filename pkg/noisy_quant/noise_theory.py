"""
Noise theory module.

Closed-form quantization error of a histogram snapshot with and without
an additive uniform Noisy Bias, the reduction threshold, the snapshot
simulation used to verify the closed forms, and an independent Monte
Carlo oracle for the expected error.

All closed forms model the bin that owns the snapshot as centered on
its rounding threshold at 0, with reconstruction levels at -b and +b.
A snapshot value x in [0, b] quantizes to +b with error (b - x)**2.
With N ~ U(-n, n) and x <= n <= 2b - x the noisy value crosses at most
one threshold, and

    E_N[QE(x + N)] = 1/(2n) * [ int_{x-n}^{0} (z + b)**2 dz
                               + int_{0}^{x+n} (z - b)**2 dz ]
                   = x**2 - (b/n) x**2 + n**2/3 - n b + b**2

The constant term is n**2 / 3: integrating the two squares gives
((x + n - b)**3 - (x - n + b)**3 + 2 b**3) / (6n), whose n**3 part is
2n**3 / (6n) = n**2 / 3.
"""

from dataclasses import dataclass, field
from typing import Literal, NamedTuple
import logging

import numpy as np
import pandas as pd
from tqdm import tqdm

from noisy_quant.numerics import Rng, uniform_vector
from utils.exceptions import FeasibilityError, InvalidArgumentError
from utils.utils import atomic_write_text

FEASIBILITY_TOLERANCE = 1e-12

logger = logging.getLogger("Noise_Theory")


def _check_distance(x, b):
    x, b = np.asarray(x, dtype=np.float64), np.asarray(b, dtype=np.float64)

    if np.any(b <= 0):
        raise FeasibilityError(f"Half bin width must be positive, got b={b}")
    if np.any(x < 0) or np.any(x > b):
        raise FeasibilityError(f"Distance x={x} must lie in [0, b={b}]")

    return x, b


def _check_feasible(x, n, b):
    x, b = _check_distance(x, b)
    n = np.asarray(n, dtype=np.float64)
    tolerance = FEASIBILITY_TOLERANCE * np.maximum(b, 1.0)

    if np.any(n <= 0):
        raise FeasibilityError(f"Noise half-range must be positive, got n={n}")
    if np.any(n < x - tolerance) or np.any(n > 2 * b - x + tolerance):
        raise FeasibilityError(
            f"Closed forms need x <= n <= 2b - x, got x={x}, n={n}, b={b}"
        )

    return x, n, b


def _as_result(values):
    return float(values) if np.ndim(values) == 0 else values


def snapshot_qe(x, b):
    """
    Squared quantization error of a snapshot at distance `x`.

    Parameters
    ----------
    x : float or np.ndarray
        Distance from the bin center, in [0, b].
    b : float or np.ndarray
        Half bin width.

    Returns
    -------
    float or np.ndarray
        (b - x)**2.

    Raises
    ------
    FeasibilityError
        If `x` is outside [0, b].
    """
    x, b = _check_distance(x, b)
    return _as_result((b - x) ** 2)


def expected_qe_closed_form(x, n, b):
    """
    Expected squared error of the snapshot after adding N ~ U(-n, n).

    Parameters
    ----------
    x : float or np.ndarray
        Distance from the bin center.
    n : float or np.ndarray
        Noise half-range, with x <= n <= 2b - x.
    b : float or np.ndarray
        Half bin width.

    Returns
    -------
    float or np.ndarray
        x**2 - (b/n) x**2 + n**2/3 - n b + b**2.
    """
    x, n, b = _check_feasible(x, n, b)
    return _as_result(x**2 - (b / n) * x**2 + n**2 / 3 - n * b + b**2)


def delta_terms(x, n, b):
    """
    Unchecked delta D(x, n, b), for callers that filter feasibility
    themselves.
    """
    return -(b / n) * x**2 + 2 * b * x + n**2 / 3 - n * b


def delta_closed_form(x, n, b):
    """
    Expected change of the squared error caused by the Noisy Bias.

    Parameters
    ----------
    x : float or np.ndarray
        Distance from the bin center.
    n : float or np.ndarray
        Noise half-range, with x <= n <= 2b - x.
    b : float or np.ndarray
        Half bin width.

    Returns
    -------
    float or np.ndarray
        -(b/n) x**2 + 2 b x + n**2/3 - n b; negative when the noise
        reduces the error.
    """
    x, n, b = _check_feasible(x, n, b)
    return _as_result(delta_terms(x, n, b))


def reduction_threshold(n, b):
    """
    Largest distance for which the Noisy Bias reduces the error.

    Parameters
    ----------
    n : float
        Noise half-range, 0 < n <= 3b.
    b : float
        Half bin width.

    Returns
    -------
    float
        x* = n (1 - sqrt(n / 3b)); delta(x, n, b) <= 0 iff x <= x*.
    """
    n, b = np.asarray(n, dtype=np.float64), np.asarray(b, dtype=np.float64)

    if np.any(n <= 0):
        raise FeasibilityError(f"Noise half-range must be positive, got n={n}")
    if np.any(b <= 0) or np.any(n > 3 * b):
        raise FeasibilityError(f"reduction_threshold needs 0 < n <= 3b, got n={n}, b={b}")

    return _as_result(n * (1 - np.sqrt(n / (3 * b))))


def feasible_n_range(x: float, b: float) -> tuple[float, float]:
    """
    Interval of noise half-ranges for which the closed forms hold.

    Parameters
    ----------
    x : float
        Distance from the bin center, in [0, b].
    b : float
        Half bin width.

    Returns
    -------
    tuple of float
        (x, 2b - x).
    """
    x, b = _check_distance(x, b)
    return float(x), float(2 * b - x)


def two_level_quantize(values: np.ndarray, b: float) -> np.ndarray:
    """Quantizer of a single threshold at 0 with levels -b and +b."""
    return np.where(values >= 0, b, -b)


@dataclass(frozen=True)
class SnapshotSpec:
    """
    Settings of one snapshot simulation.

    Parameters
    ----------
    x : float
        Distance from the bin center, in [0, b].
    b : float
        Half bin width.
    n : float
        Noise half-range.
    elements : int, optional
        Number of activation elements sharing the value x.
        (default: 20)
    instances : int, optional
        Number of independently sampled Noisy Bias instances.
        (default: 10)
    seed : int, optional
        Seed of the noise draws.
        (default: 0)
    """

    x: float
    b: float
    n: float
    elements: int = 20
    instances: int = 10
    seed: int = 0

    @property
    def feasible(self) -> bool:
        tolerance = FEASIBILITY_TOLERANCE * max(self.b, 1.0)
        return (
            self.b > 0
            and 0 <= self.x <= self.b
            and self.n > 0
            and self.x - tolerance <= self.n <= 2 * self.b - self.x + tolerance
        )


def empirical_delta(spec: SnapshotSpec) -> tuple[float, float]:
    """
    Simulate the snapshot error difference for independent Noisy Bias
    instances.

    Every instance draws `elements` noise values, computes the
    per-element mean of (Q(x + N) - x - N)**2 - (b - x)**2 on the
    two-level quantizer, and the instances are summarized by their mean
    and (population) standard deviation.

    Parameters
    ----------
    spec : SnapshotSpec
        The simulation settings.

    Returns
    -------
    tuple of float
        (mean, std) across instances.

    Raises
    ------
    FeasibilityError
        If the snapshot is outside the closed-form window.
    InvalidArgumentError
        If `elements` or `instances` is not positive.
    """
    _check_feasible(spec.x, spec.n, spec.b)
    if spec.elements < 1 or spec.instances < 1:
        raise InvalidArgumentError("elements and instances must be positive")

    rng = Rng(spec.seed)
    baseline = (spec.b - spec.x) ** 2

    deltas = np.empty(spec.instances)
    for instance in range(spec.instances):
        noise = uniform_vector(
            rng.child("snapshot", instance), spec.elements, -spec.n, spec.n
        ).to_numpy().reshape(-1)
        noisy = spec.x + noise
        errors = (two_level_quantize(noisy, spec.b) - noisy) ** 2
        deltas[instance] = np.mean(errors) - baseline

    return float(np.mean(deltas)), float(np.std(deltas))


@dataclass
class DeltaCurve:
    """
    Closed-form and simulated error difference along one sweep.

    Attributes
    ----------
    sweep : {"n", "x"}
        The swept variable.
    grid : np.ndarray
        Sweep values.
    closed_form : np.ndarray
        Closed-form delta (NaN where infeasible).
    emp_mean : np.ndarray
        Simulated mean delta (NaN where infeasible).
    emp_std : np.ndarray
        Simulated standard deviation (NaN where infeasible).
    feasible : np.ndarray
        Feasibility flag of each grid point.
    """

    sweep: Literal["n", "x"]
    grid: np.ndarray
    closed_form: np.ndarray
    emp_mean: np.ndarray
    emp_std: np.ndarray
    feasible: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return len(self.grid)

    def to_frame(self) -> pd.DataFrame:
        """Return the curve with the CSV column layout."""
        return pd.DataFrame(
            {
                "sweep_value": self.grid,
                "closed_form": self.closed_form,
                "emp_mean": self.emp_mean,
                "emp_std": self.emp_std,
                "feasible": self.feasible,
            }
        )

    def to_csv(self, path) -> None:
        atomic_write_text(path, self.to_frame().to_csv(index=False))

    def sign_change(self) -> float | None:
        """
        Linearly interpolated sweep value where the simulated mean first
        changes sign, or None when it never does.
        """
        frame = self.to_frame().query("feasible")
        values = frame["sweep_value"].to_numpy()
        means = frame["emp_mean"].to_numpy()

        for idx in range(1, len(means)):
            previous, current = means[idx - 1], means[idx]
            if previous == 0:
                return float(values[idx - 1])
            if np.sign(previous) != np.sign(current):
                weight = previous / (previous - current)
                return float(values[idx - 1] + weight * (values[idx] - values[idx - 1]))

        return None


def _sweep(
    sweep: Literal["n", "x"],
    points: list[SnapshotSpec],
    grid: np.ndarray,
    verbose: bool,
) -> DeltaCurve:
    if len(points) == 0:
        raise InvalidArgumentError("The sweep grid is empty")

    closed_form = np.full(len(points), np.nan)
    emp_mean = np.full(len(points), np.nan)
    emp_std = np.full(len(points), np.nan)
    feasible = np.array([point.feasible for point in points])

    for idx, point in enumerate(tqdm(points, disable=not verbose, desc=f"sweep {sweep}")):
        if not feasible[idx]:
            logger.info("skipping infeasible point x=%g n=%g", point.x, point.n)
            continue
        closed_form[idx] = delta_closed_form(point.x, point.n, point.b)
        emp_mean[idx], emp_std[idx] = empirical_delta(point)

    return DeltaCurve(
        sweep=sweep,
        grid=np.asarray(grid, dtype=np.float64),
        closed_form=closed_form,
        emp_mean=emp_mean,
        emp_std=emp_std,
        feasible=feasible,
    )


def sweep_n(
    x: float,
    b: float,
    n_grid,
    spec: SnapshotSpec | None = None,
    verbose: bool = False,
) -> DeltaCurve:
    """
    Sweep the noise half-range at a fixed snapshot distance.

    Parameters
    ----------
    x : float
        Snapshot distance.
    b : float
        Half bin width.
    n_grid : array-like
        Noise half-ranges to evaluate.
    spec : SnapshotSpec, optional
        Supplies `elements`, `instances` and `seed`; each grid point
        uses the sub-seed (seed, "sweep-n", index).
    verbose : bool, optional
        Show a progress bar.
        (default: False)

    Returns
    -------
    DeltaCurve
        One row per grid point; infeasible points are flagged.
    """
    _check_distance(x, b)
    spec = spec or SnapshotSpec(x=x, b=b, n=b)
    rng = Rng(spec.seed)
    grid = np.asarray(n_grid, dtype=np.float64).reshape(-1)

    points = [
        SnapshotSpec(
            x=float(x), b=float(b), n=float(n),
            elements=spec.elements, instances=spec.instances,
            seed=rng.child("sweep-n", idx).seed,
        )
        for idx, n in enumerate(grid)
    ]
    return _sweep("n", points, grid, verbose)


def sweep_x(
    n: float,
    b: float,
    x_grid,
    spec: SnapshotSpec | None = None,
    verbose: bool = False,
) -> DeltaCurve:
    """
    Sweep the snapshot distance at a fixed noise half-range.

    Parameters
    ----------
    n : float
        Noise half-range.
    b : float
        Half bin width.
    x_grid : array-like
        Snapshot distances to evaluate.
    spec : SnapshotSpec, optional
        Supplies `elements`, `instances` and `seed`; each grid point
        uses the sub-seed (seed, "sweep-x", index).
    verbose : bool, optional
        Show a progress bar.
        (default: False)

    Returns
    -------
    DeltaCurve
        One row per grid point; infeasible points are flagged.

    Raises
    ------
    FeasibilityError
        If no distance x in [0, b] admits the fixed `n`, that is when
        n is outside (0, 2b].
    """
    if n <= 0 or b <= 0:
        raise FeasibilityError(f"sweep_x needs positive n and b, got n={n}, b={b}")
    _, widest = feasible_n_range(0.0, b)
    if n > widest * (1 + FEASIBILITY_TOLERANCE):
        raise FeasibilityError(
            f"n={n} exceeds 2b={widest}; no snapshot distance is feasible"
        )

    spec = spec or SnapshotSpec(x=0.0, b=b, n=n)
    rng = Rng(spec.seed)
    grid = np.asarray(x_grid, dtype=np.float64).reshape(-1)

    points = [
        SnapshotSpec(
            x=float(x), b=float(b), n=float(n),
            elements=spec.elements, instances=spec.instances,
            seed=rng.child("sweep-x", idx).seed,
        )
        for idx, x in enumerate(grid)
    ]
    return _sweep("x", points, grid, verbose)


class MonteCarloEstimate(NamedTuple):
    """Sample mean and its standard error."""

    mean: float
    standard_error: float


def monte_carlo_expected_qe(
    x: float,
    n: float,
    b: float,
    samples: int = 1_000_000,
    seed: int = 0,
) -> MonteCarloEstimate:
    """
    Estimate E_N[(Q(x + N) - x - N)**2] by direct sampling of N.

    Parameters
    ----------
    x : float
        Snapshot distance.
    n : float
        Noise half-range.
    b : float
        Half bin width.
    samples : int, optional
        Number of noise draws.
        (default: 1_000_000)
    seed : int, optional
        Seed of the draws.
        (default: 0)

    Returns
    -------
    MonteCarloEstimate
        The sample mean and its standard error.

    Raises
    ------
    InvalidArgumentError
        If `samples` is not positive.
    FeasibilityError
        If (x, n, b) is outside the closed-form window.
    """
    if samples < 1:
        raise InvalidArgumentError(f"samples must be positive, got {samples}")
    _check_feasible(x, n, b)

    noise = Rng(seed).child("monte-carlo").generator().uniform(-n, n, size=samples)
    noisy = x + noise
    errors = (two_level_quantize(noisy, b) - noisy) ** 2

    standard_error = np.std(errors, ddof=1) / np.sqrt(samples) if samples > 1 else 0.0
    return MonteCarloEstimate(float(np.mean(errors)), float(standard_error))


def sweep_grid(start: float, stop: float, step: float) -> np.ndarray:
    """
    Inclusive, evenly spaced grid from `start` to `stop`.

    Parameters
    ----------
    start : float
        First value.
    stop : float
        Last value.
    step : float
        Spacing.

    Returns
    -------
    np.ndarray
        round((stop - start) / step) + 1 values.
    """
    if step <= 0 or stop < start:
        raise InvalidArgumentError(
            f"Invalid grid start={start}, stop={stop}, step={step}"
        )
    count = int(round((stop - start) / step)) + 1
    return np.round(np.linspace(start, stop, count), 12)
