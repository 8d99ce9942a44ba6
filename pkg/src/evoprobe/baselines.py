"""Comparison attacks: an unbiased (1+1)-ES and a boundary random walk."""

from __future__ import annotations

import collections
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .core import INF, AdversarialCriterion, HardLabelOracle, PointLike, QueryLedger, loss
from .evo_attack import (
    AttackTrace,
    EvoHyperParams,
    InitMode,
    TraceRecord,
    TraceSink,
    evolve,
    init_query_cap,
    initialize,
)


def run_unbiased_es(
    oracle: HardLabelOracle,
    criterion: AdversarialCriterion,
    original: PointLike,
    T: int,
    init: InitMode,
    rng: Union[np.random.Generator, int, None] = None,
    *,
    sigma_factor: float = 0.01,
    clamp_to_bounds: bool = True,
    sink: Optional[TraceSink] = None,
):
    """Zero-mean (1+1)-ES: the evolutionary loop with ``mu = 0``, ``C = I`` and ``k = m = n``."""
    rng = np.random.default_rng(rng)
    if T < 0:
        raise ValueError("T must be non-negative")
    ledger = QueryLedger(budget=init_query_cap(init) + T)
    state = initialize(oracle, criterion, original, init, rng, mu_init=0.0, ledger=ledger)
    trace = AttackTrace(n=oracle.n, initial_l2=state.current_loss, init_queries=state.init_queries)
    if T > 0:
        params = EvoHyperParams(
            budget=T,
            sigma_factor=sigma_factor,
            mu_init=0.0,
            clamp_to_bounds=clamp_to_bounds,
            cma_enabled=False,
            scs_enabled=False,
        )
        evolve(state, oracle, criterion, params, T, rng, trace=trace, sink=sink, adapt_mu=False)
    return oracle.make_point(state.current), trace


@dataclass(frozen=True)
class BoundaryParams:
    """Step sizes are relative to the current distance from the original."""

    orth_step: float = 0.01
    toward_step: float = 0.01
    adapt_window: int = 10
    orth_target: float = 0.5
    toward_target: float = 0.2
    max_orth_step: float = 1.0
    max_toward_step: float = 0.5
    clamp_to_bounds: bool = True

    def __post_init__(self):
        if self.orth_step <= 0 or self.toward_step < 0:
            raise ValueError("orth_step must be positive and toward_step non-negative")
        if self.adapt_window < 1:
            raise ValueError("adapt_window must be >= 1")
        if not 0 < self.max_toward_step < 1:
            raise ValueError("max_toward_step must lie in (0, 1)")


def run_boundary(
    oracle: HardLabelOracle,
    criterion: AdversarialCriterion,
    original: PointLike,
    params: BoundaryParams,
    T: int,
    init: InitMode,
    rng: Union[np.random.Generator, int, None] = None,
    *,
    sink: Optional[TraceSink] = None,
):
    """Random walk along the decision boundary with a contraction toward the original.

    Each trial perturbs the current point orthogonally to the source direction
    (scale ``orth_step * d``), projects back onto the sphere of radius ``d``
    around the original, then shrinks the distance by ``1 - toward_step``.
    One query per trial.  After every ``adapt_window`` trials both step sizes
    are rescaled by ``exp(P_success - target)``, with targets of 1/2 for the
    orthogonal step and 1/5 for the contraction.
    """
    rng = np.random.default_rng(rng)
    if T < 0:
        raise ValueError("T must be non-negative")
    ledger = QueryLedger(budget=init_query_cap(init) + T)
    state = initialize(oracle, criterion, original, init, rng, ledger=ledger)
    trace = AttackTrace(n=oracle.n, initial_l2=state.current_loss, init_queries=state.init_queries)
    x = state.original
    n = x.size
    orth, toward = params.orth_step, params.toward_step
    window = collections.deque(maxlen=params.adapt_window)
    bounds = oracle.bounds if params.clamp_to_bounds else None

    for t in range(T):
        d = state.current_loss
        if d < 1e-12:
            break
        source = (x - state.current) / d
        eta = rng.standard_normal(n)
        eta -= (eta @ source) * source
        norm_eta = np.linalg.norm(eta)
        if norm_eta > 0:
            eta *= orth * d / norm_eta
        sph = state.current + eta
        sph = x + (sph - x) * (d / np.linalg.norm(sph - x))
        candidate = x + (1.0 - toward) * (sph - x)
        if bounds is not None:
            candidate = np.clip(candidate, bounds[0], bounds[1])
        new_loss = loss(candidate, x, oracle, criterion, ledger)
        accepted = new_loss <= state.current_loss and new_loss < INF
        if accepted:
            state.current = candidate
            state.current_loss = new_loss
        window.append(accepted)
        rec = TraceRecord(ledger.count, state.current_loss, state.current_loss ** 2 / n, accepted, orth * d, toward)
        trace.append(rec)
        if sink is not None:
            sink(rec)
        if (t + 1) % params.adapt_window == 0:
            p = sum(window) / len(window)
            orth = min(orth * math.exp(p - params.orth_target), params.max_orth_step)
            toward = min(toward * math.exp(p - params.toward_target), params.max_toward_step)
    return oracle.make_point(state.current), trace
