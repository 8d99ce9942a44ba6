"""Evolutionary hard-label attack: a (1+1) evolution strategy with a biased
mean, diagonal covariance adaptation, stochastic coordinate selection and a
bilinear low-dimensional search space."""

from __future__ import annotations

import collections
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import (
    INF,
    AdversarialCriterion,
    HardLabelOracle,
    Point,
    PointLike,
    QueryLedger,
    Shape,
    as_array,
    l2_distance,
    loss,
)

SIGMA_FLOOR = 1e-12


class InitializationError(RuntimeError):
    pass


@dataclass(frozen=True)
class RandomUniform:
    """Resample uniform points in ``[low, high]`` until one is adversarial."""

    max_attempts: int = 100
    low: float = 0.0
    high: float = 1.0


@dataclass(frozen=True)
class GivenPoint:
    """Start from a known adversarial point, e.g. the target image for impersonation."""

    point: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "point", as_array(self.point).copy())


InitMode = Union[RandomUniform, GivenPoint]


def init_query_cap(init: InitMode) -> int:
    return init.max_attempts if isinstance(init, RandomUniform) else 1


@dataclass(frozen=True)
class EvoHyperParams:
    budget: int
    search_shape: Optional[Shape] = None
    m: Optional[int] = None
    k: Optional[int] = None
    c_c: float = 0.01
    c_cov: float = 0.001
    sigma_factor: float = 0.01
    mu_init: float = 0.1
    success_window: int = 10
    clamp_to_bounds: bool = True
    cma_enabled: bool = True
    scs_enabled: bool = True
    scs_weighting: str = "covariance"

    def __post_init__(self):
        if self.search_shape is not None:
            shape = tuple(int(s) for s in self.search_shape)
            object.__setattr__(self, "search_shape", shape)
            m = math.prod(shape)
            if self.m is not None and self.m != m:
                raise ValueError(f"m={self.m} disagrees with search_shape {shape}")
            object.__setattr__(self, "m", m)
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.m is not None and self.m < 1:
            raise ValueError("m must be positive")
        if self.k is not None and (self.k < 1 or (self.m is not None and self.k > self.m)):
            raise ValueError(f"k={self.k} must lie in [1, m]")
        for name in ("c_c", "c_cov"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.sigma_factor <= 0 or self.mu_init < 0 or self.success_window < 1:
            raise ValueError("sigma_factor > 0, mu_init >= 0 and success_window >= 1 required")
        if self.scs_weighting not in ("covariance", "uniform"):
            raise ValueError(f"unknown scs_weighting {self.scs_weighting!r}")

    def resolve(self, n: int, grid_shape: Optional[Shape]) -> Tuple[Optional[Shape], int, int]:
        """Return ``(search_shape, m, k)`` for an oracle of dimension ``n``."""
        if grid_shape is None:
            if self.m is not None and self.m != n:
                raise ValueError("an oracle without grid shape is searched in full dimension (m = n)")
            shape, m = None, n
        elif self.search_shape is None:
            if self.m is not None and self.m != n:
                raise ValueError("search_shape is required when m < n")
            shape, m = grid_shape, n
        else:
            shape, m = self.search_shape, self.m
            if shape[2] != grid_shape[2] or shape[0] > grid_shape[0] or shape[1] > grid_shape[1]:
                raise ValueError(f"search shape {shape} cannot upscale to {grid_shape}")
        k = m if (self.k is None or not self.scs_enabled) else self.k
        if k > m:
            raise ValueError(f"k={k} exceeds m={m}")
        return shape, m, k


@dataclass
class TraceRecord:
    query_index: int
    l2: float
    mse: float
    accepted: bool
    sigma: float
    mu: float


@dataclass
class AttackTrace:
    """Per-query records of an attack loop.

    ``l2``/``mse`` hold the distortion of the current point *after* the query,
    so the records read directly as a distortion-vs-queries step curve.
    """

    n: int
    initial_l2: float = 0.0
    init_queries: int = 0
    records: List[TraceRecord] = field(default_factory=list)

    @property
    def initial_mse(self) -> float:
        return self.initial_l2 ** 2 / self.n

    def append(self, rec: TraceRecord):
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def accepted(self) -> List[TraceRecord]:
        return [r for r in self.records if r.accepted]

    def acceptance_rate(self) -> float:
        return sum(r.accepted for r in self.records) / len(self.records) if self.records else 0.0

    def as_tuples(self) -> List[tuple]:
        return [(r.query_index, r.l2, r.mse, r.accepted, r.sigma, r.mu) for r in self.records]


TraceSink = Callable[[TraceRecord], None]


@dataclass
class EvoState:
    current: np.ndarray
    original: np.ndarray
    C_diag: np.ndarray
    p_c: np.ndarray
    mu: float
    success_history: collections.deque
    ledger: QueryLedger
    current_loss: float
    init_queries: int = 0


# -- steps of the loop ------------------------------------------------------


def initialize(
    oracle: HardLabelOracle,
    criterion: AdversarialCriterion,
    original: PointLike,
    init: InitMode,
    rng: np.random.Generator,
    *,
    m: Optional[int] = None,
    mu_init: float = 0.1,
    success_window: int = 10,
    ledger: Optional[QueryLedger] = None,
    on_attempt: Optional[Callable[[int, bool], None]] = None,
) -> EvoState:
    """Find an adversarial starting point and build a fresh search state.

    Every attempt costs one query.  ``on_attempt(query_index, adversarial)`` is
    called after each of them.
    """
    original = as_array(original).copy()
    if original.size != oracle.n:
        raise ValueError(f"original has dimension {original.size}, oracle expects {oracle.n}")
    if ledger is None:
        ledger = QueryLedger(budget=init_query_cap(init))
    m = original.size if m is None else m

    def attempt(x):
        value = loss(x, original, oracle, criterion, ledger)
        if on_attempt is not None:
            on_attempt(ledger.count, value < INF)
        return value

    if isinstance(init, GivenPoint):
        start = init.point.copy()
        if start.size != original.size:
            raise ValueError("initial point has the wrong dimension")
        start_loss = attempt(start)
        if start_loss == INF:
            raise InitializationError("given initial point is not adversarial")
    else:
        start_loss = INF
        for _ in range(init.max_attempts):
            start = rng.uniform(init.low, init.high, size=original.size)
            start_loss = attempt(start)
            if start_loss < INF:
                break
        else:
            raise InitializationError(
                f"no adversarial point found in {init.max_attempts} uniform draws"
            )
    return EvoState(
        current=start,
        original=original,
        C_diag=np.ones(m),
        p_c=np.zeros(m),
        mu=float(mu_init),
        success_history=collections.deque(maxlen=success_window),
        ledger=ledger,
        current_loss=start_loss,
        init_queries=ledger.count,
    )


def sample_raw_step(C_diag: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Draw ``z ~ N(0, sigma^2 diag(C))``."""
    return sigma * np.sqrt(C_diag) * rng.standard_normal(C_diag.size)


def select_coordinates(weights: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Pick ``k`` distinct indices, each draw proportional to ``weights`` among the
    indices not yet drawn.

    Uses exponential keys (Efraimidis-Spirakis): the ``k`` largest
    ``log(u_i) / w_i`` have the same law as ``k`` successive renormalized draws.
    Returned indices are sorted.
    """
    m = weights.size
    if not 0 <= k <= m:
        raise ValueError(f"k={k} outside [0, {m}]")
    if k == m:
        return np.arange(m)
    if k == 0:
        return np.zeros(0, dtype=np.intp)
    keys = np.log(rng.random(m)) / weights
    return np.sort(np.argpartition(keys, m - k)[m - k:])


def mask(z: np.ndarray, selected) -> np.ndarray:
    out = np.zeros_like(z)
    idx = np.asarray(selected, dtype=np.intp)
    out[idx] = z[idx]
    return out


@lru_cache(maxsize=64)
def _interp_matrix(src: int, dst: int) -> np.ndarray:
    """``dst x src`` linear interpolation weights with corners aligned."""
    if src == dst:
        return np.eye(dst)
    if src > dst:
        raise ValueError(f"cannot upscale from {src} to {dst}")
    A = np.zeros((dst, src))
    if src == 1 or dst == 1:
        A[:, 0] = 1.0
        return A
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - lo
    rows = np.arange(dst)
    A[rows, lo] = 1.0 - frac
    A[rows, lo + 1] += frac
    A.setflags(write=False)
    return A


def upscale_bilinear(z: np.ndarray, src_shape: Shape, dst_shape: Shape) -> np.ndarray:
    """Bilinearly resize a flat ``(h', w', c)`` grid to a flat ``(h, w, c)`` grid.

    Output pixel ``(i, j)`` samples the source at ``(i (h'-1)/(h-1), j (w'-1)/(w-1))``.
    Equal shapes return the input unchanged.
    """
    src_shape, dst_shape = tuple(src_shape), tuple(dst_shape)
    if len(src_shape) != 3 or len(dst_shape) != 3 or src_shape[2] != dst_shape[2]:
        raise ValueError(f"incompatible shapes {src_shape} -> {dst_shape}")
    if z.size != math.prod(src_shape):
        raise ValueError(f"vector of length {z.size} does not fit shape {src_shape}")
    if src_shape == dst_shape:
        return z
    Ah = _interp_matrix(src_shape[0], dst_shape[0])
    Aw = _interp_matrix(src_shape[1], dst_shape[1])
    hs, ws, c = src_shape
    rows = (Ah @ z.reshape(hs, ws * c)).reshape(dst_shape[0], ws, c)
    return (Aw @ rows).reshape(-1)


def add_bias(z_up: np.ndarray, mu: float, original: np.ndarray, current: np.ndarray) -> np.ndarray:
    return z_up + mu * (original - current)


def _clamp(x: np.ndarray, oracle: HardLabelOracle, enabled: bool) -> np.ndarray:
    if enabled and oracle.bounds is not None:
        return np.clip(x, oracle.bounds[0], oracle.bounds[1])
    return x


def try_candidate(
    state: EvoState,
    step: np.ndarray,
    oracle: HardLabelOracle,
    criterion: AdversarialCriterion,
    *,
    clamp_to_bounds: bool = True,
    sigma: float = float("nan"),
    trace: Optional[AttackTrace] = None,
    sink: Optional[TraceSink] = None,
) -> bool:
    """Query ``current + step`` and move there iff its loss is strictly lower."""
    candidate = _clamp(state.current + step, oracle, clamp_to_bounds)
    new_loss = loss(candidate, state.original, oracle, criterion, state.ledger)
    accepted = new_loss < state.current_loss
    if accepted:
        state.current = candidate
        state.current_loss = new_loss
    state.success_history.append(accepted)
    if trace is not None or sink is not None:
        rec = TraceRecord(
            query_index=state.ledger.count,
            l2=state.current_loss,
            mse=state.current_loss ** 2 / state.current.size,
            accepted=accepted,
            sigma=sigma,
            mu=state.mu,
        )
        if trace is not None:
            trace.append(rec)
        if sink is not None:
            sink(rec)
    return accepted


def update_evolution_path(p_c: np.ndarray, z: np.ndarray, sigma: float, c_c: float) -> np.ndarray:
    return (1.0 - c_c) * p_c + math.sqrt(c_c * (2.0 - c_c)) * (z / sigma)


_C_FLOOR = np.finfo(np.float64).tiny


def update_covariance(C_diag: np.ndarray, p_c: np.ndarray, c_cov: float) -> np.ndarray:
    # a coordinate that never moves decays as (1 - c_cov)^t and would underflow
    # to exactly 0 after ~7e5 updates at c_cov = 0.001; keep it a normal double
    return np.maximum((1.0 - c_cov) * C_diag + c_cov * p_c * p_c, _C_FLOOR)


def update_mu(mu: float, success_history: Sequence[bool]) -> float:
    """1/5th success rule: ``mu * exp(P_success - 1/5)``."""
    if len(success_history) == 0:
        return mu
    p_success = sum(success_history) / len(success_history)
    return mu * math.exp(p_success - 0.2)


# -- the loop ---------------------------------------------------------------


def evolve(
    state: EvoState,
    oracle: HardLabelOracle,
    criterion: AdversarialCriterion,
    params: EvoHyperParams,
    iterations: int,
    rng: np.random.Generator,
    *,
    trace: Optional[AttackTrace] = None,
    sink: Optional[TraceSink] = None,
    adapt_mu: bool = True,
) -> EvoState:
    """Run up to ``iterations`` trials from an initialized state."""
    search_shape, m, k = params.resolve(oracle.n, oracle.shape)
    if state.C_diag.size != m:
        raise ValueError(f"state has {state.C_diag.size} search coordinates, expected {m}")
    uniform = np.ones(m)
    for _ in range(iterations):
        sigma = params.sigma_factor * state.current_loss
        if sigma < SIGMA_FLOOR:
            break
        z = sample_raw_step(state.C_diag, sigma, rng)
        if k < m:
            weights = state.C_diag if params.scs_weighting == "covariance" else uniform
            z = mask(z, select_coordinates(weights, k, rng))
        z_up = z if search_shape is None else upscale_bilinear(z, search_shape, oracle.shape)
        step = add_bias(z_up, state.mu, state.original, state.current)
        accepted = try_candidate(
            state,
            step,
            oracle,
            criterion,
            clamp_to_bounds=params.clamp_to_bounds,
            sigma=sigma,
            trace=trace,
            sink=sink,
        )
        if accepted and params.cma_enabled:
            state.p_c = update_evolution_path(state.p_c, z, sigma, params.c_c)
            state.C_diag = update_covariance(state.C_diag, state.p_c, params.c_cov)
        if adapt_mu:
            state.mu = update_mu(state.mu, state.success_history)
    return state


def run(
    oracle: HardLabelOracle,
    criterion: AdversarialCriterion,
    original: PointLike,
    params: EvoHyperParams,
    init: InitMode,
    rng: Union[np.random.Generator, int, None] = None,
    *,
    sink: Optional[TraceSink] = None,
    return_state: bool = False,
):
    """Run the evolutionary attack for ``params.budget`` trials after initialization.

    Returns ``(final_point, trace)``, or ``(final_point, trace, state)`` with
    ``return_state=True``.  The final point is adversarial.
    """
    rng = np.random.default_rng(rng)
    _, m, _ = params.resolve(oracle.n, oracle.shape)
    ledger = QueryLedger(budget=init_query_cap(init) + params.budget)
    state = initialize(
        oracle,
        criterion,
        original,
        init,
        rng,
        m=m,
        mu_init=params.mu_init,
        success_window=params.success_window,
        ledger=ledger,
    )
    trace = AttackTrace(n=oracle.n, initial_l2=state.current_loss, init_queries=state.init_queries)
    evolve(state, oracle, criterion, params, params.budget, rng, trace=trace, sink=sink)
    final = oracle.make_point(state.current)
    if return_state:
        return final, trace, state
    return final, trace
