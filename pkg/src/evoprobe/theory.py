"""Monte Carlo check of the zero-mean success bound.

For a (1+1)-ES step ``z ~ N(0, sigma^2 C)`` from a point at distance ``d`` of
the original, the probability that the step reduces the distance is at most
``4 lambda_max d^2 / (sigma^2 lambda_min^2 n^2)``.  This module evaluates the
bound and estimates the probability by sampling.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, List, Tuple, Union

import numpy as np

from .core import PointLike, as_array

# 10**5 normals of dimension 1000 would need 800 MB at once
_CHUNK_ELEMENTS = 4_000_000


@dataclass(frozen=True)
class BoundReport:
    n: int
    sigma: float
    lambda_max: float
    lambda_min: float
    distance: float
    bound_value: float
    mc_estimate: float
    mc_std_error: float
    samples: int
    holds: bool

    @classmethod
    def columns(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list:
        # booleans as 0/1, like the harness CSVs
        return [int(v) if isinstance(v, bool) else v for v in asdict(self).values()]


def _check_C(C_diag) -> np.ndarray:
    C = np.asarray(C_diag, dtype=np.float64).reshape(-1)
    if C.size == 0 or not np.all(C > 0):
        raise ValueError("covariance diagonal must be strictly positive")
    return C


def theorem1_bound(x_tilde: PointLike, x: PointLike, sigma: float, C_diag) -> float:
    """``4 lambda_max ||x_tilde - x||^2 / (sigma^2 lambda_min^2 n^2)`` for diagonal ``C``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    xt, x0 = as_array(x_tilde), as_array(x)
    if xt.shape != x0.shape:
        raise ValueError("points differ in length")
    C = _check_C(C_diag)
    if C.size != xt.size:
        raise ValueError("C_diag must have one entry per coordinate")
    n = xt.size
    d2 = float((xt - x0) @ (xt - x0))
    lam_max, lam_min = float(C.max()), float(C.min())
    return 4.0 * lam_max * d2 / (sigma ** 2 * lam_min ** 2 * n ** 2)


def mc_success_probability(
    x_tilde: PointLike,
    x: PointLike,
    sigma: float,
    C_diag,
    samples: int,
    rng: Union[np.random.Generator, int, None] = None,
) -> Tuple[float, float]:
    """Estimate ``P(||x_tilde + z - x|| < ||x_tilde - x||)`` for ``z ~ N(0, sigma^2 diag(C))``.

    Returns ``(p_hat, std_error)`` with ``std_error = sqrt(p_hat (1 - p_hat) / S)``.
    The event is evaluated as ``2 d.z + |z|^2 < 0`` with ``d = x_tilde - x``,
    which avoids cancellation when ``|z|`` is tiny relative to ``|d|``.
    """
    if samples < 10_000:
        raise ValueError("at least 10^4 samples are required")
    rng = np.random.default_rng(rng)
    d = as_array(x_tilde) - as_array(x)
    C = _check_C(C_diag)
    if C.size != d.size:
        raise ValueError("C_diag must have one entry per coordinate")
    scale = sigma * np.sqrt(C)
    n = d.size
    chunk = max(1, _CHUNK_ELEMENTS // n)
    hits = 0
    done = 0
    while done < samples:
        b = min(chunk, samples - done)
        z = rng.standard_normal((b, n)) * scale
        hits += int(np.count_nonzero(2.0 * (z @ d) + np.einsum("ij,ij->i", z, z) < 0.0))
        done += b
    p = hits / samples
    return p, math.sqrt(p * (1.0 - p) / samples)


def bound_report(
    x_tilde: PointLike,
    x: PointLike,
    sigma: float,
    C_diag,
    samples: int,
    rng: Union[np.random.Generator, int, None] = None,
) -> BoundReport:
    C = _check_C(C_diag)
    bound = theorem1_bound(x_tilde, x, sigma, C)
    p, se = mc_success_probability(x_tilde, x, sigma, C, samples, rng)
    xt, x0 = as_array(x_tilde), as_array(x)
    return BoundReport(
        n=xt.size,
        sigma=float(sigma),
        lambda_max=float(C.max()),
        lambda_min=float(C.min()),
        distance=float(np.linalg.norm(xt - x0)),
        bound_value=bound,
        mc_estimate=p,
        mc_std_error=se,
        samples=int(samples),
        holds=p - 3.0 * se <= bound,
    )


def verify_bound_grid(
    n_values: Iterable[int],
    sigma_values: Iterable[float],
    samples: int = 100_000,
    rng: Union[np.random.Generator, int, None] = None,
) -> List[BoundReport]:
    """One report per ``(n, sigma)`` with ``C = I`` and ``x_tilde - x = e_1``.

    Each cell gets its own child generator spawned from ``rng``.
    """
    n_values, sigma_values = list(n_values), list(sigma_values)
    if not n_values or not sigma_values:
        raise ValueError("grids must be nonempty")
    rng = np.random.default_rng(rng)
    children = rng.spawn(len(n_values) * len(sigma_values))
    reports = []
    for i, n in enumerate(n_values):
        x = np.zeros(n)
        x_tilde = np.zeros(n)
        x_tilde[0] = 1.0
        for j, sigma in enumerate(sigma_values):
            child = children[i * len(sigma_values) + j]
            reports.append(bound_report(x_tilde, x, sigma, np.ones(n), samples, child))
    return reports


def all_hold(reports: Iterable[BoundReport]) -> bool:
    return all(r.holds for r in reports)
