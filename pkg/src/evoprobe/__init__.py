"""Decision-based (hard-label) evolutionary attacks and their test bench."""

from .core import (
    BudgetExhausted,
    DodgeBinary,
    DodgeMulticlass,
    HardLabelOracle,
    ImpersonateBinary,
    ImpersonateMulticlass,
    Point,
    QueryLedger,
    l2_distance,
    loss,
    mse,
)
from .evo_attack import EvoHyperParams, GivenPoint, RandomUniform, run

__version__ = "0.1.0"

__all__ = [
    "BudgetExhausted",
    "DodgeBinary",
    "DodgeMulticlass",
    "EvoHyperParams",
    "GivenPoint",
    "HardLabelOracle",
    "ImpersonateBinary",
    "ImpersonateMulticlass",
    "Point",
    "QueryLedger",
    "RandomUniform",
    "l2_distance",
    "loss",
    "mse",
    "run",
]
