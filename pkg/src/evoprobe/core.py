"""Domain primitives shared by every attack: points, criteria, distances,
the query ledger and the hard-label oracle interface."""

from __future__ import annotations

import abc
import math
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

Label = int
Bounds = Tuple[float, float]
Shape = Tuple[int, int, int]

INF = math.inf


class BudgetExhausted(RuntimeError):
    """Raised when a query would push a ledger past its budget."""


class MalformedPointFile(ValueError):
    pass


@dataclass(frozen=True)
class Point:
    """A point of the search space: flat values plus optional grid shape and box bounds."""

    values: np.ndarray
    shape: Optional[Shape] = None
    bounds: Optional[Bounds] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if not np.all(np.isfinite(values)):
            raise ValueError("point values must be finite")
        if self.shape is not None:
            shape = tuple(int(s) for s in self.shape)
            if len(shape) != 3 or math.prod(shape) != values.size:
                raise ValueError(f"shape {shape} does not match length {values.size}")
            object.__setattr__(self, "shape", shape)
        if self.bounds is not None:
            lo, hi = float(self.bounds[0]), float(self.bounds[1])
            if lo > hi:
                raise ValueError("empty bounds")
            if values.size and (values.min() < lo or values.max() > hi):
                raise ValueError("point values outside bounds")
            object.__setattr__(self, "bounds", (lo, hi))

    def __len__(self):
        return self.values.size

    def grid(self) -> np.ndarray:
        if self.shape is None:
            raise ValueError("point has no grid shape")
        return self.values.reshape(self.shape)


PointLike = Union[Point, np.ndarray, Sequence[float]]


def as_array(p: PointLike) -> np.ndarray:
    if isinstance(p, Point):
        return p.values
    return np.asarray(p, dtype=np.float64).reshape(-1)


def l2_distance(a: PointLike, b: PointLike) -> float:
    a, b = as_array(a), as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    d = a - b
    return math.sqrt(float(d @ d))


def mse(a: PointLike, b: PointLike) -> float:
    """Mean squared error, the reported distortion; equals ``l2_distance(a, b)**2 / n``."""
    a, b = as_array(a), as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        return 0.0
    d = a - b
    return float(d @ d) / a.size


# -- adversarial criteria ---------------------------------------------------


@dataclass(frozen=True)
class DodgeBinary:
    """Verification dodging: adversarial when the oracle says "not the same" (label 0)."""

    def is_adversarial(self, label: Label) -> bool:
        return label == 0


@dataclass(frozen=True)
class ImpersonateBinary:
    def is_adversarial(self, label: Label) -> bool:
        return label == 1


@dataclass(frozen=True)
class DodgeMulticlass:
    true_label: int

    def is_adversarial(self, label: Label) -> bool:
        return label != self.true_label


@dataclass(frozen=True)
class ImpersonateMulticlass:
    target_label: int

    def is_adversarial(self, label: Label) -> bool:
        return label == self.target_label


AdversarialCriterion = Union[DodgeBinary, ImpersonateBinary, DodgeMulticlass, ImpersonateMulticlass]


def is_adversarial(criterion: AdversarialCriterion, label: Label) -> bool:
    return criterion.is_adversarial(label)


# -- query accounting -------------------------------------------------------


@dataclass
class QueryLedger:
    budget: int
    count: int = 0

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError("budget must be non-negative")

    @property
    def remaining(self) -> int:
        return self.budget - self.count

    def require(self):
        if self.count >= self.budget:
            raise BudgetExhausted(f"query budget of {self.budget} exhausted")

    def charge(self):
        self.require()
        self.count += 1


class HardLabelOracle(abc.ABC):
    """A query-only model returning a single integer label per input.

    Subclasses implement :meth:`predict`.  Callers go through :meth:`query`,
    which charges the caller's ledger and keeps an internal call count so
    accounting can be cross-checked.
    """

    n: int
    shape: Optional[Shape] = None
    bounds: Optional[Bounds] = None
    labels: Sequence[int] = (0, 1)

    def __init__(self):
        self._calls = 0
        self._calls_lock = threading.Lock()

    @property
    def calls(self) -> int:
        return self._calls

    @abc.abstractmethod
    def predict(self, x: np.ndarray) -> Label:
        """Return the label of ``x`` without any accounting."""

    def query(self, x: PointLike, ledger: Optional[QueryLedger] = None) -> Label:
        x = as_array(x)
        if x.size != self.n:
            raise ValueError(f"dimension mismatch: oracle expects {self.n}, got {x.size}")
        if ledger is not None:
            ledger.require()
        label = self.predict(x)
        if ledger is not None:
            ledger.charge()
        with self._calls_lock:
            self._calls += 1
        return label

    def make_point(self, values) -> Point:
        values = as_array(values)
        bounds = self.bounds
        if bounds is not None and values.size and (values.min() < bounds[0] or values.max() > bounds[1]):
            bounds = None
        return Point(values, shape=self.shape, bounds=bounds)


def loss(
    candidate: PointLike,
    original: PointLike,
    oracle: HardLabelOracle,
    criterion: AdversarialCriterion,
    ledger: Optional[QueryLedger] = None,
) -> float:
    """Attack objective: the L2 distance if the candidate is adversarial, else ``inf``.

    Exactly one oracle query is issued.  ``inf`` is IEEE infinity, so ``inf < inf``
    is false and any finite loss compares below it.
    """
    candidate = as_array(candidate)
    original = as_array(original)
    if candidate.shape != original.shape:
        raise ValueError(f"length mismatch: {candidate.size} vs {original.size}")
    label = oracle.query(candidate, ledger)
    if criterion.is_adversarial(label):
        return l2_distance(candidate, original)
    return INF


# -- point files ------------------------------------------------------------

_MAGIC = b"EVPT"
_HEADER = struct.Struct("<4sIQ")  # magic, n, reserved padding -> 16 bytes


def encode_point_binary(values: PointLike) -> bytes:
    """16-byte header (``EVPT``, little-endian u32 n, 8 zero bytes) then n little-endian f64."""
    arr = as_array(values)
    return _HEADER.pack(_MAGIC, arr.size, 0) + arr.astype("<f8").tobytes()


def decode_point_binary(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise MalformedPointFile("truncated header")
    magic, n, _ = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise MalformedPointFile(f"bad magic {magic!r}")
    body = data[_HEADER.size:]
    if len(body) != 8 * n:
        raise MalformedPointFile(f"expected {8 * n} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f8").astype(np.float64)


def write_point(path: Union[str, Path], values: PointLike, fmt: str = "binary"):
    path = Path(path)
    arr = as_array(values)
    if fmt == "binary":
        path.write_bytes(encode_point_binary(arr))
    elif fmt == "csv":
        path.write_text(",".join(repr(float(v)) for v in arr) + "\n")
    else:
        raise ValueError(f"unknown point format {fmt!r}")


def read_point_values(path: Union[str, Path], fmt: Optional[str] = None) -> np.ndarray:
    path = Path(path)
    if fmt is None:
        fmt = "csv" if path.suffix.lower() == ".csv" else "binary"
    if fmt == "binary":
        return decode_point_binary(path.read_bytes())
    if fmt == "csv":
        rows = [r for r in path.read_text().splitlines() if r.strip()]
        if len(rows) != 1:
            raise MalformedPointFile(f"expected a single CSV row, found {len(rows)}")
        try:
            return np.array([float(c) for c in rows[0].split(",")], dtype=np.float64)
        except ValueError as exc:
            raise MalformedPointFile(str(exc)) from None
    raise ValueError(f"unknown point format {fmt!r}")
