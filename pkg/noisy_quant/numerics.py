"""
Numerics module.

Dense 2-D tensor carrier, deterministic random generation, histograms,
elementary nonlinearities and the `.t2d` tensor container used by every
other module of the toolkit.

Classes:
- Tensor2D: Immutable row-major matrix of 32-bit reals.
- Rng: Immutable seed holder with a documented sub-seeding scheme.
- Histogram: Binned counts with underflow/overflow accounting.
"""

from dataclasses import dataclass
from pathlib import Path
import hashlib
import json

import numpy as np
from scipy.special import erf

from utils.exceptions import (
    InvalidArgumentError,
    NonFiniteValueError,
    ShapeMismatchError,
    TensorFormatError,
)
from utils.utils import atomic_write_bytes

TENSOR_EXTENSION = ".t2d"
_PAYLOAD_DTYPE = np.dtype("<f4")


@dataclass(frozen=True, eq=False)
class Tensor2D:
    """
    Dense row-major matrix of 32-bit reals.

    Parameters
    ----------
    values : array-like
        A two-dimensional array. It is converted to a read-only,
        C-contiguous float32 array.

    Raises
    ------
    ShapeMismatchError
        If `values` is not two-dimensional.
    NonFiniteValueError
        If `values` holds NaN or infinite entries.
    """

    values: np.ndarray

    def __post_init__(self):
        array = np.array(self.values, dtype=np.float32, order="C")

        if array.ndim != 2:
            raise ShapeMismatchError(
                f"Tensor2D needs a 2-D array, got {array.ndim} dimensions"
            )

        if not np.all(np.isfinite(array)):
            raise NonFiniteValueError("Tensor2D values must be finite")

        array.setflags(write=False)
        object.__setattr__(self, "values", array)

    @classmethod
    def column(cls, values) -> "Tensor2D":
        """Build a `length x 1` tensor from a flat sequence."""
        return cls(np.asarray(values, dtype=np.float64).reshape(-1, 1))

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Tensor2D":
        return cls(np.zeros((rows, cols), dtype=np.float32))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def data(self) -> np.ndarray:
        """The row-major payload as a flat float32 array."""
        return self.values.reshape(-1)

    def to_numpy(self) -> np.ndarray:
        """Return a float64 copy of the values."""
        return self.values.astype(np.float64)

    def equals(self, other: "Tensor2D") -> bool:
        """Bitwise equality, shapes included."""
        return (
            self.shape == other.shape
            and np.array_equal(
                self.values.view(np.uint32), other.values.view(np.uint32)
            )
        )


def as_array(values: Tensor2D | np.ndarray | float) -> np.ndarray:
    """
    Convert a tensor, array or scalar into a float64 numpy array.

    Parameters
    ----------
    values : Tensor2D, np.ndarray or float
        The input values.

    Returns
    -------
    np.ndarray
        A float64 array (a copy for Tensor2D inputs).
    """
    if isinstance(values, Tensor2D):
        return values.to_numpy()
    return np.asarray(values, dtype=np.float64)


def derive_seed(seed: int, *tags: int | str) -> int:
    """
    Derive a 64-bit sub-seed from a master seed and a tag path.

    The sub-seed is the first 8 bytes (little-endian) of the BLAKE2b
    digest of `"<seed>/<tag>/<tag>..."`, so the same (seed, layer,
    purpose) path gives the same stream on every platform.

    Parameters
    ----------
    seed : int
        The master seed.
    *tags : int or str
        Path of the sub-stream, e.g. a layer index and a purpose tag.

    Returns
    -------
    int
        The derived seed in [0, 2**64).
    """
    path = "/".join([str(int(seed))] + [str(tag) for tag in tags])
    digest = hashlib.blake2b(path.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class Rng:
    """
    Immutable random stream descriptor.

    Every draw builds a fresh PCG64 bit generator from `seed`, so a
    given `Rng` always produces the same values. Independent streams
    are obtained with `child`.

    Parameters
    ----------
    seed : int
        Seed of the stream, reduced modulo 2**64.
    """

    seed: int
    algorithm: str = "PCG64"

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) % (1 << 64))

    def child(self, *tags: int | str) -> "Rng":
        """Return the sub-stream addressed by `tags`."""
        return Rng(derive_seed(self.seed, *tags))

    def generator(self) -> np.random.Generator:
        """Return a freshly seeded numpy generator for this stream."""
        return np.random.Generator(np.random.PCG64(self.seed))


def uniform_vector(rng: Rng, length: int, lo: float, hi: float) -> Tensor2D:
    """
    Draw `length` i.i.d. uniform values in [lo, hi) as a column tensor.

    Parameters
    ----------
    rng : Rng
        The random stream.
    length : int
        Number of values.
    lo : float
        Inclusive lower bound.
    hi : float
        Exclusive upper bound.

    Returns
    -------
    Tensor2D
        A `length x 1` tensor.

    Raises
    ------
    InvalidArgumentError
        If `lo >= hi` or `length` is negative.
    """
    if not lo < hi:
        raise InvalidArgumentError(f"uniform_vector needs lo < hi, got {lo} >= {hi}")
    if length < 0:
        raise InvalidArgumentError(f"length must be non-negative, got {length}")

    values = rng.generator().uniform(lo, hi, size=length).astype(np.float32)

    # float32 narrowing may round a draw onto the excluded upper bound
    upper = np.nextafter(np.float32(hi), np.float32(lo))
    lower = np.float32(lo)
    if lower < lo:
        lower = np.nextafter(lower, np.float32(hi))
    values = np.clip(values, lower, upper)

    return Tensor2D(values.reshape(-1, 1))


def matmul(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    """
    Matrix product with float64 accumulation.

    Parameters
    ----------
    a : Tensor2D
        Left operand (r x k).
    b : Tensor2D
        Right operand (k x c).

    Returns
    -------
    Tensor2D
        The product (r x c), narrowed to float32.

    Raises
    ------
    ShapeMismatchError
        If `a.cols != b.rows`.
    """
    return Tensor2D(matmul64(as_array(a), as_array(b)))


def matmul64(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """
    Float64 matrix product used by all layer arithmetic.

    Parameters
    ----------
    left : np.ndarray
        Left operand (r x k).
    right : np.ndarray
        Right operand (k x c).

    Returns
    -------
    np.ndarray
        The float64 product (r x c).
    """
    if left.shape[1] != right.shape[0]:
        raise ShapeMismatchError(
            f"Cannot multiply {left.shape} by {right.shape}"
        )
    return np.matmul(
        np.ascontiguousarray(left, dtype=np.float64),
        np.ascontiguousarray(right, dtype=np.float64),
    )


def gelu(x: Tensor2D | np.ndarray) -> Tensor2D:
    """
    Exact GELU, 0.5 * x * (1 + erf(x / sqrt(2))).

    Parameters
    ----------
    x : Tensor2D or np.ndarray
        Input values.

    Returns
    -------
    Tensor2D
        The elementwise GELU.
    """
    return Tensor2D(gelu64(as_array(x)))


def gelu64(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """
    Row-wise softmax in float64; every row sums to one.

    Parameters
    ----------
    x : np.ndarray
        Scores, one row per query.

    Returns
    -------
    np.ndarray
        Row-normalized probabilities.
    """
    shifted = x - np.max(x, axis=1, keepdims=True)
    exp_values = np.exp(shifted)
    return exp_values / np.sum(exp_values, axis=1, keepdims=True)


def layernorm(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """
    Normalize every token (column) to zero mean and unit variance over
    the feature axis, without affine parameters.

    Parameters
    ----------
    x : np.ndarray
        Activations (features x tokens).
    eps : float, optional
        Variance floor.
        (default: 1e-6)

    Returns
    -------
    np.ndarray
        Normalized activations.
    """
    mean = np.mean(x, axis=0, keepdims=True)
    variance = np.var(x, axis=0, keepdims=True)
    return (x - mean) / np.sqrt(variance + eps)


@dataclass(frozen=True, eq=False)
class Histogram:
    """
    Histogram with explicit edges and out-of-range accounting.

    Parameters
    ----------
    edges : np.ndarray
        Strictly increasing bin edges (bins + 1 values).
    counts : np.ndarray
        Per-bin counts; the last bin is closed on the right.
    underflow : int
        Number of values below `edges[0]`.
    overflow : int
        Number of values above `edges[-1]`.
    """

    edges: np.ndarray
    counts: np.ndarray
    underflow: int = 0
    overflow: int = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.underflow + self.overflow

    def to_records(self, name: str) -> list[dict]:
        """
        Flatten the histogram into CSV-ready records, including one
        underflow and one overflow row.
        """
        records = [
            {"histogram": name, "bin_left": -np.inf,
             "bin_right": float(self.edges[0]), "count": self.underflow}
        ]
        records += [
            {"histogram": name, "bin_left": float(left),
             "bin_right": float(right), "count": int(count)}
            for left, right, count in zip(
                self.edges[:-1], self.edges[1:], self.counts
            )
        ]
        records.append(
            {"histogram": name, "bin_left": float(self.edges[-1]),
             "bin_right": np.inf, "count": self.overflow}
        )
        return records


def histogram_edges(lo: float, hi: float, bins: int = 64) -> np.ndarray:
    """
    Equal-width edges covering [lo, hi]; a degenerate range is widened
    by one unit so edges stay strictly increasing.
    """
    if bins < 1:
        raise InvalidArgumentError(f"bins must be positive, got {bins}")
    if not hi > lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)


def histogram(values: Tensor2D | np.ndarray, edges: np.ndarray) -> Histogram:
    """
    Count `values` into the bins defined by `edges`.

    Parameters
    ----------
    values : Tensor2D or np.ndarray
        Values to summarize.
    edges : np.ndarray
        Strictly increasing bin edges.

    Returns
    -------
    Histogram
        Counts whose total equals the number of values.

    Raises
    ------
    InvalidArgumentError
        If the edges are not strictly increasing.
    """
    edges = np.asarray(edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise InvalidArgumentError("Histogram edges must be strictly increasing")

    flat = as_array(values).reshape(-1)
    counts, _ = np.histogram(flat, bins=edges)

    return Histogram(
        edges=edges,
        counts=counts.astype(np.int64),
        underflow=int(np.sum(flat < edges[0])),
        overflow=int(np.sum(flat > edges[-1])),
    )


def save_tensor(path: str | Path, tensor: Tensor2D) -> Path:
    """
    Write `tensor` as a `.t2d` container: one JSON header line followed
    by rows x cols little-endian float32 values.

    Parameters
    ----------
    path : str or Path
        Destination file.
    tensor : Tensor2D
        The tensor to store.

    Returns
    -------
    Path
        The written path.
    """
    header = {
        "dtype": "f32",
        "rows": tensor.rows,
        "cols": tensor.cols,
        "byte_order": "little-endian",
    }
    payload = (
        json.dumps(header, separators=(",", ":")).encode("utf-8")
        + b"\n"
        + tensor.values.astype(_PAYLOAD_DTYPE).tobytes(order="C")
    )
    return atomic_write_bytes(path, payload)


def load_tensor(path: str | Path) -> Tensor2D:
    """
    Read a `.t2d` container.

    Parameters
    ----------
    path : str or Path
        The file to read.

    Returns
    -------
    Tensor2D
        The stored tensor, bit-identical to what was saved.

    Raises
    ------
    TensorFormatError
        If the header is malformed or the payload length does not
        match the header shape.
    NonFiniteValueError
        If the payload holds NaN or infinite values.
    """
    raw = Path(path).read_bytes()
    header_end = raw.find(b"\n")

    if header_end < 0:
        raise TensorFormatError(f"{path}: missing header line")

    try:
        header = json.loads(raw[:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        raise TensorFormatError(f"{path}: malformed header") from error

    expected_header = {"dtype": "f32", "byte_order": "little-endian"}
    if not isinstance(header, dict) or any(
        header.get(key) != value for key, value in expected_header.items()
    ):
        raise TensorFormatError(f"{path}: unsupported header {header!r}")

    rows, cols = header.get("rows"), header.get("cols")
    if not all(
        isinstance(dim, int) and not isinstance(dim, bool) and dim >= 0 for dim in (rows, cols)
    ):
        raise TensorFormatError(f"{path}: invalid shape {rows}x{cols}")

    payload = raw[header_end + 1:]
    expected_bytes = rows * cols * _PAYLOAD_DTYPE.itemsize

    if len(payload) != expected_bytes:
        raise TensorFormatError(
            f"{path}: payload holds {len(payload)} bytes, "
            f"header shape {rows}x{cols} needs {expected_bytes}"
        )

    values = np.frombuffer(payload, dtype=_PAYLOAD_DTYPE).reshape(rows, cols)
    return Tensor2D(values)
