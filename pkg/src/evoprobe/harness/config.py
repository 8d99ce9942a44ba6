"""Experiment configuration: JSON with a schema version, validated up front.

Every problem in a config is collected and reported together, before any
run starts.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from ..baselines import BoundaryParams
from ..core import (
    DodgeBinary,
    DodgeMulticlass,
    ImpersonateBinary,
    ImpersonateMulticlass,
    read_point_values,
)
from ..evo_attack import EvoHyperParams, GivenPoint, RandomUniform
from ..oracles import (
    CentroidIdOracle,
    ConstantOracle,
    CosineVerifyOracle,
    EllipsoidOracle,
    HalfspaceOracle,
    SphereOracle,
    random_embedding,
)

SCHEMA_VERSION = 1
METHODS = ("evolutionary", "boundary", "unbiased-es")
ORACLE_TYPES = ("halfspace", "sphere", "ellipsoid", "constant", "cosine-verify", "centroid-id", "remote")
CRITERIA = ("dodge", "impersonate", "dodge-multiclass", "impersonate-multiclass")

_EVO_KEYS = set(EvoHyperParams.__dataclass_fields__) - {"budget"} | {"k_fraction"}
_BOUNDARY_KEYS = set(BoundaryParams.__dataclass_fields__)
_TOP_KEYS = {
    "schema_version", "oracle", "criterion", "original", "init", "method", "methods",
    "evo", "boundary", "budgets", "seeds", "m_sweep", "output_dir", "workers",
}


class ConfigError(ValueError):
    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("invalid config:\n  - " + "\n  - ".join(self.problems))


# -- vectors ----------------------------------------------------------------


def resolve_vector(spec, n: Optional[int] = None, base_dir: Optional[Path] = None) -> np.ndarray:
    """Turn a vector spec into an array.

    Accepted forms: an inline list; ``{"file": path}``; ``{"fill": v, "n": n}``;
    ``{"basis": i, "n": n, "scale": s}``; ``{"uniform": [lo, hi], "n": n, "seed": s}``.
    ``n`` may be omitted inside the spec when the caller knows it.
    """
    if isinstance(spec, (list, tuple)):
        v = np.asarray(spec, dtype=np.float64)
    elif isinstance(spec, dict):
        size = spec.get("n", n)
        if "file" in spec:
            path = Path(spec["file"])
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            v = read_point_values(path, spec.get("format"))
        elif "fill" in spec:
            v = np.full(int(size), float(spec["fill"]))
        elif "basis" in spec:
            v = np.zeros(int(size))
            v[int(spec["basis"])] = float(spec.get("scale", 1.0))
        elif "uniform" in spec:
            lo, hi = spec["uniform"]
            v = np.random.default_rng(spec.get("seed", 0)).uniform(lo, hi, int(size))
        else:
            raise ValueError(f"unrecognized vector spec keys {sorted(spec)}")
    else:
        raise ValueError(f"vector spec must be a list or an object, got {type(spec).__name__}")
    if n is not None and v.size != n:
        raise ValueError(f"vector has length {v.size}, expected {n}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


# -- the config -------------------------------------------------------------


@dataclass
class ExperimentConfig:
    oracle: Dict[str, Any]
    criterion: Dict[str, Any]
    original: Any
    init: Dict[str, Any]
    methods: List[str]
    budgets: List[int]
    seeds: List[int]
    evo: Dict[str, Any] = field(default_factory=dict)
    boundary: Dict[str, Any] = field(default_factory=dict)
    m_sweep: List[List[int]] = field(default_factory=list)
    output_dir: str = "runs/experiment"
    workers: int = 1
    schema_version: int = SCHEMA_VERSION
    base_dir: Optional[str] = None

    @property
    def T(self) -> int:
        return self.budgets[-1]

    # serialization

    @classmethod
    def from_dict(cls, d: Dict[str, Any], base_dir: Optional[str] = None) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        problems = []
        unknown = set(d) - _TOP_KEYS
        if unknown:
            problems.append(f"unknown keys: {sorted(unknown)}")
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            problems.append(f"schema_version {version} unsupported (expected {SCHEMA_VERSION})")
        if "method" in d and "methods" in d:
            problems.append("give either 'method' or 'methods', not both")
        methods = d.pop("methods", d.pop("method", None))
        if isinstance(methods, str):
            methods = [methods]
        for key in ("oracle", "criterion", "original", "budgets", "seeds"):
            if key not in d:
                problems.append(f"missing required key '{key}'")
        if methods is None:
            problems.append("missing required key 'method'")
        if problems:
            raise ConfigError(problems)
        cfg = cls(
            oracle=d["oracle"],
            criterion=d["criterion"],
            original=d["original"],
            init=d.get("init", {"mode": "random-uniform"}),
            methods=list(methods),
            budgets=list(d["budgets"]),
            seeds=list(d["seeds"]),
            evo=d.get("evo", {}),
            boundary=d.get("boundary", {}),
            m_sweep=[list(s) for s in d.get("m_sweep", [])],
            output_dir=d.get("output_dir", "runs/experiment"),
            workers=d.get("workers", 1),
            schema_version=version,
            base_dir=base_dir,
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: not valid JSON ({exc})"]) from None
        return cls.from_dict(d, base_dir=str(path.parent.resolve()))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "oracle": copy.deepcopy(self.oracle),
            "criterion": copy.deepcopy(self.criterion),
            "original": copy.deepcopy(self.original),
            "init": copy.deepcopy(self.init),
            "methods": list(self.methods),
            "evo": copy.deepcopy(self.evo),
            "boundary": copy.deepcopy(self.boundary),
            "budgets": list(self.budgets),
            "seeds": list(self.seeds),
            "m_sweep": [list(s) for s in self.m_sweep],
            "output_dir": self.output_dir,
            "workers": self.workers,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    # validation

    def validate(self):
        problems = []
        for m in self.methods:
            if m not in METHODS:
                problems.append(f"unknown method {m!r} (choose from {', '.join(METHODS)})")
        if not self.methods:
            problems.append("at least one method is required")
        if len(set(self.methods)) != len(self.methods):
            problems.append("methods are repeated")
        if not self.seeds:
            problems.append("seeds must be nonempty")
        elif not all(isinstance(s, int) and not isinstance(s, bool) for s in self.seeds):
            problems.append("seeds must be integers")
        elif len(set(self.seeds)) != len(self.seeds):
            problems.append("seeds are repeated")
        if not self.budgets:
            problems.append("budgets must be nonempty")
        elif not all(isinstance(b, int) and not isinstance(b, bool) and b >= 1 for b in self.budgets):
            problems.append("budgets must be positive integers")
        elif any(b2 <= b1 for b1, b2 in zip(self.budgets, self.budgets[1:])):
            problems.append("budgets must be strictly increasing")
        if not isinstance(self.workers, int) or self.workers < 1:
            problems.append("workers must be a positive integer")
        problems += self._check_evo()
        try:
            BoundaryParams(**self.boundary)
        except (TypeError, ValueError) as exc:
            problems.append(f"boundary: {exc}")
        oracle = None
        try:
            oracle = build_oracle(self.oracle, self.base_dir)
        except (TypeError, ValueError, KeyError) as exc:
            problems.append(f"oracle: {exc}")
        try:
            build_criterion(self.criterion)
        except (TypeError, ValueError, KeyError) as exc:
            problems.append(f"criterion: {exc}")
        if oracle is not None:
            try:
                build_original(self.original, oracle.n, self.base_dir)
            except (TypeError, ValueError, KeyError, OSError) as exc:
                problems.append(f"original: {exc}")
            try:
                build_init(self.init, oracle.n, self.base_dir)
            except (TypeError, ValueError, KeyError, OSError) as exc:
                problems.append(f"init: {exc}")
            if "evolutionary" in self.methods and self.budgets and not problems:
                try:
                    self.evo_params(n=oracle.n).resolve(oracle.n, oracle.shape)
                except ValueError as exc:
                    problems.append(f"evo: {exc}")
            for s in self.m_sweep:
                if len(s) != 3 or oracle.shape is None or s[2] != oracle.shape[2] or s[0] > oracle.shape[0] or s[1] > oracle.shape[1]:
                    problems.append(f"m_sweep entry {s} does not fit the oracle grid {oracle.shape}")
            if hasattr(oracle, "close"):
                oracle.close()
        if problems:
            raise ConfigError(problems)

    def _check_evo(self) -> List[str]:
        unknown = set(self.evo) - _EVO_KEYS
        if unknown:
            return [f"evo: unknown keys {sorted(unknown)}"]
        if "k" in self.evo and "k_fraction" in self.evo:
            return ["evo: give either k or k_fraction"]
        kf = self.evo.get("k_fraction")
        if kf is not None and not 0 < kf <= 1:
            return ["evo: k_fraction must lie in (0, 1]"]
        try:
            # the oracle dimension is checked later; any n works for k_fraction here
            self.evo_params(budget=1, n=1)
        except (TypeError, ValueError) as exc:
            return [f"evo: {exc}"]
        return []

    def evo_params(self, budget: Optional[int] = None, n: Optional[int] = None, **overrides) -> EvoHyperParams:
        """Hyper-parameters with ``k_fraction`` turned into ``k``; ``n`` is the oracle dimension."""
        kw = dict(self.evo)
        kw.update(overrides)
        kf = kw.pop("k_fraction", None)
        if kw.get("search_shape") is not None:
            kw["search_shape"] = tuple(kw["search_shape"])
            m = math.prod(kw["search_shape"])
            kw.setdefault("m", m)
        if kf is not None and "k" not in kw:
            m = kw.get("m", n)
            if m is None:
                raise ValueError("k_fraction needs m or the oracle dimension")
            kw["k"] = max(1, int(round(kf * m)))
        return EvoHyperParams(budget=self.T if budget is None else budget, **kw)

    def boundary_params(self) -> BoundaryParams:
        return BoundaryParams(**self.boundary)


# -- builders ---------------------------------------------------------------


def _shape(spec):
    s = spec.get("shape")
    return None if s is None else tuple(int(v) for v in s)


def _bounds(spec, default=None):
    b = spec.get("bounds", default)
    return None if b is None else (float(b[0]), float(b[1]))


def build_oracle(spec: Dict[str, Any], base_dir=None, *, gate=None):
    base = Path(base_dir) if base_dir else None
    kind = spec.get("type")
    if kind not in ORACLE_TYPES:
        raise ValueError(f"unknown oracle type {kind!r}")
    shape = _shape(spec)
    n = spec.get("n", math.prod(shape) if shape else None)
    if kind == "halfspace":
        w = resolve_vector(spec["w"], n, base)
        return HalfspaceOracle(w, spec["b"], shape=shape, bounds=_bounds(spec))
    if kind == "sphere":
        c = resolve_vector(spec["center"], n, base)
        return SphereOracle(c, spec["radius"], shape=shape, bounds=_bounds(spec))
    if kind == "ellipsoid":
        c = resolve_vector(spec["center"], n, base)
        a = resolve_vector(spec["axes"], c.size, base)
        return EllipsoidOracle(c, a, shape=shape, bounds=_bounds(spec))
    if kind == "constant":
        return ConstantOracle(int(spec["n"]), spec.get("label", 1), shape=shape, bounds=_bounds(spec))
    if kind in ("cosine-verify", "centroid-id"):
        if n is None:
            raise ValueError("embedding oracles need 'n' or 'shape'")
        rng = np.random.default_rng(spec.get("seed", 0))
        E = random_embedding(int(spec.get("embed_dim", 64)), n, rng, shape=shape, low_res=spec.get("low_res"))
        bounds = _bounds(spec, (0.0, 1.0))
        if kind == "cosine-verify":
            ref = resolve_vector(spec["reference"], n, base)
            return CosineVerifyOracle(E, ref, spec["threshold"], shape=shape, bounds=bounds)
        if "gallery" in spec:
            gallery = np.asarray(spec["gallery"], dtype=np.float64)
        else:
            K = int(spec.get("classes", 10))
            gallery = E @ rng.uniform(0.0, 1.0, (n, K))
            gallery = (gallery - gallery.mean(axis=1, keepdims=True)).T
        return CentroidIdOracle(E, gallery, shape=shape, bounds=bounds)
    # remote
    from ..remote import RemoteOracle, RemoteOracleConfig

    if n is None:
        raise ValueError("remote oracles need 'n' or 'shape'")
    rcfg = RemoteOracleConfig.from_dict(spec["remote"])
    return RemoteOracle(rcfg, n, shape=shape, bounds=_bounds(spec, (0.0, 1.0)), gate=gate)


def build_criterion(spec: Dict[str, Any]):
    kind = spec.get("type")
    if kind == "dodge":
        return DodgeBinary()
    if kind == "impersonate":
        return ImpersonateBinary()
    if kind == "dodge-multiclass":
        return DodgeMulticlass(int(spec["true_label"]))
    if kind == "impersonate-multiclass":
        return ImpersonateMulticlass(int(spec["target_label"]))
    raise ValueError(f"unknown criterion {kind!r} (choose from {', '.join(CRITERIA)})")


def build_original(spec, n: int, base_dir=None) -> np.ndarray:
    return resolve_vector(spec, n, Path(base_dir) if base_dir else None)


def build_init(spec: Dict[str, Any], n: int, base_dir=None):
    mode = spec.get("mode", "random-uniform")
    if mode == "random-uniform":
        return RandomUniform(
            max_attempts=int(spec.get("max_attempts", 100)),
            low=float(spec.get("low", 0.0)),
            high=float(spec.get("high", 1.0)),
        )
    if mode == "given":
        return GivenPoint(resolve_vector(spec["point"], n, Path(base_dir) if base_dir else None))
    raise ValueError(f"unknown init mode {mode!r}")


def apply_overrides(d: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """Apply ``dotted.key=value`` overrides; values parse as JSON, else stay strings."""
    d = copy.deepcopy(d)
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"override {item!r} is not key=value"])
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return d
