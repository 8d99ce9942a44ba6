"""Hard-label oracle backed by an HTTP similarity-score endpoint.

The client posts a point inside a JSON request template, reads a numeric
score at a JSON pointer in the response and thresholds it into label 0/1.
"""

from __future__ import annotations

import base64
import copy
import hashlib
import json
import math
import os
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional

import httpx
import numpy as np

from .core import (
    Bounds,
    HardLabelOracle,
    PointLike,
    QueryLedger,
    as_array,
    decode_point_binary,
    encode_point_binary,
)

ENV_URL = "EVOPROBE_REMOTE_URL"
PLACEHOLDER = "{{point}}"

_COMPARISONS = {
    ">=": lambda s, t: s >= t,
    ">": lambda s, t: s > t,
    "<=": lambda s, t: s <= t,
    "<": lambda s, t: s < t,
}
_COMPARISON_ALIASES = {"≥": ">=", "≤": "<=", "ge": ">=", "gt": ">", "le": "<=", "lt": "<"}


class RemoteConfigError(ValueError):
    """Bad configuration, including any HTTP 4xx answer."""


class RemoteProtocolError(ValueError):
    """The response could not be turned into a score."""


class RemoteQueryFailed(RuntimeError):
    """Transport kept failing after every retry."""


@dataclass(frozen=True)
class RemoteOracleConfig:
    endpoint_url: str
    request_template: Any = field(default_factory=lambda: {"image": PLACEHOLDER})
    payload_encoding: str = "json-array"
    score_path: str = "/similarity"
    threshold: float = 90.0
    comparison: str = ">"
    rate_limit: float = 10.0
    max_retries: int = 3
    backoff_base_ms: int = 100
    timeout_ms: int = 5000
    cache_enabled: bool = True
    count_cache_hits: bool = True
    method: str = "POST"
    header: Optional[Dict[str, str]] = None

    def __post_init__(self):
        comparison = _COMPARISON_ALIASES.get(self.comparison, self.comparison)
        if comparison not in _COMPARISONS:
            raise RemoteConfigError(f"unknown comparison {self.comparison!r}")
        object.__setattr__(self, "comparison", comparison)
        if self.payload_encoding not in ("json-array", "base64"):
            raise RemoteConfigError(f"unknown payload encoding {self.payload_encoding!r}")
        if not self.rate_limit > 0:
            raise RemoteConfigError("rate_limit must be positive")
        if self.max_retries < 0:
            raise RemoteConfigError("max_retries must be >= 0")
        if self.backoff_base_ms < 0 or self.timeout_ms <= 0:
            raise RemoteConfigError("backoff_base_ms >= 0 and timeout_ms > 0 required")
        if not self.score_path:
            raise RemoteConfigError("score_path must be nonempty")
        if self.method.upper() != "POST":
            raise RemoteConfigError("only POST is supported")
        if self.header is not None and len(self.header) != 1:
            raise RemoteConfigError("at most one static header is supported")
        if not _contains_placeholder(self.request_template):
            raise RemoteConfigError(f"request_template has no {PLACEHOLDER!r} placeholder")

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "RemoteOracleConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise RemoteConfigError(f"unknown remote config keys: {sorted(unknown)}")
        d = dict(d)
        if os.environ.get(ENV_URL):
            d["endpoint_url"] = os.environ[ENV_URL]
        if "endpoint_url" not in d:
            raise RemoteConfigError("endpoint_url is required")
        return cls(**d)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _contains_placeholder(node) -> bool:
    if isinstance(node, str):
        return node == PLACEHOLDER
    if isinstance(node, dict):
        return any(_contains_placeholder(v) for v in node.values())
    if isinstance(node, list):
        return any(_contains_placeholder(v) for v in node)
    return False


def _substitute(node, payload):
    if isinstance(node, str) and node == PLACEHOLDER:
        return payload
    if isinstance(node, dict):
        return {k: _substitute(v, payload) for k, v in node.items()}
    if isinstance(node, list):
        return [_substitute(v, payload) for v in node]
    return node


def encode_payload(values: PointLike, encoding: str):
    arr = as_array(values)
    if encoding == "json-array":
        return [float(v) for v in arr]
    if encoding == "base64":
        return base64.b64encode(encode_point_binary(arr)).decode("ascii")
    raise RemoteConfigError(f"unknown payload encoding {encoding!r}")


def decode_payload(payload, encoding: str) -> np.ndarray:
    """Inverse of :func:`encode_payload`, for servers and tests."""
    if encoding == "json-array":
        return np.asarray(payload, dtype=np.float64)
    if encoding == "base64":
        return decode_point_binary(base64.b64decode(payload))
    raise RemoteConfigError(f"unknown payload encoding {encoding!r}")


def build_request_body(config: RemoteOracleConfig, values: PointLike) -> bytes:
    """Fill the template and serialize it; equal points give equal bytes."""
    doc = _substitute(copy.deepcopy(config.request_template), encode_payload(values, config.payload_encoding))
    return json.dumps(doc, separators=(",", ":"), allow_nan=False).encode("utf-8")


def json_pointer_get(doc, pointer: str):
    """Resolve an RFC 6901 pointer such as ``/result/0/score``."""
    if pointer == "":
        return doc
    if not pointer.startswith("/"):
        raise RemoteProtocolError(f"JSON pointer must start with '/': {pointer!r}")
    node = doc
    for raw in pointer[1:].split("/"):
        token = raw.replace("~1", "/").replace("~0", "~")
        if isinstance(node, dict):
            if token not in node:
                raise RemoteProtocolError(f"missing key {token!r} at {pointer!r}")
            node = node[token]
        elif isinstance(node, list):
            if not token.isdigit() or int(token) >= len(node):
                raise RemoteProtocolError(f"bad index {token!r} at {pointer!r}")
            node = node[int(token)]
        else:
            raise RemoteProtocolError(f"cannot descend into a scalar at {pointer!r}")
    return node


def extract_score(response_doc, pointer: str) -> float:
    value = json_pointer_get(response_doc, pointer)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise RemoteProtocolError(f"score at {pointer!r} is not numeric: {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise RemoteProtocolError(f"score at {pointer!r} is not finite")
    return value


def label_from_score(score: float, threshold: float, comparison: str) -> int:
    comparison = _COMPARISON_ALIASES.get(comparison, comparison)
    return int(_COMPARISONS[comparison](score, threshold))


class RateGate:
    """Blocks so that consecutive request starts are at least ``1 / rate`` seconds apart.

    A guard band (5% of the interval, at least 2 ms) is added so the spacing
    still holds when measured at the server, after network jitter.
    """

    def __init__(self, rate: float, guard: Optional[float] = None):
        self.min_interval = 1.0 / rate
        self.interval = self.min_interval + (max(0.002, 0.05 * self.min_interval) if guard is None else guard)
        self._lock = threading.Lock()
        self._last = -math.inf

    def wait(self):
        with self._lock:
            now = time.monotonic()
            delay = self._last + self.interval - now
            if delay > 0:
                time.sleep(delay)
                now = time.monotonic()
            self._last = now


class RemoteOracle(HardLabelOracle):
    """Hard-label oracle over HTTP.

    Every logical query charges the caller's ledger once, however many
    retries it takes.  Cache hits are charged too unless
    ``count_cache_hits`` is false.  A query that fails for good is not charged.
    """

    def __init__(
        self,
        config: RemoteOracleConfig,
        n: int,
        *,
        shape=None,
        bounds: Optional[Bounds] = (0.0, 1.0),
        gate: Optional[RateGate] = None,
        client: Optional[httpx.Client] = None,
        sleep=time.sleep,
    ):
        super().__init__()
        self.config = config
        self.n = int(n)
        if shape is not None and math.prod(shape) != self.n:
            raise ValueError(f"shape {shape} does not match dimension {n}")
        self.shape = None if shape is None else tuple(int(s) for s in shape)
        self.bounds = bounds
        self.gate = gate if gate is not None else RateGate(config.rate_limit)
        self._client = client if client is not None else httpx.Client(timeout=config.timeout_ms / 1000.0)
        self._sleep = sleep
        self._cache: Dict[str, int] = {}
        self._cache_lock = threading.Lock()
        self.requests_sent = 0
        self.cache_hits = 0

    def close(self):
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @staticmethod
    def cache_key(x: np.ndarray) -> str:
        return hashlib.sha256(np.ascontiguousarray(x, dtype="<f8").tobytes()).hexdigest()

    def _post(self, body: bytes) -> httpx.Response:
        headers = {"content-type": "application/json"}
        if self.config.header:
            headers.update(self.config.header)
        attempt = 0
        while True:
            self.gate.wait()
            self.requests_sent += 1
            try:
                resp = self._client.post(self.config.endpoint_url, content=body, headers=headers)
            except httpx.TimeoutException as exc:
                error = f"timeout: {exc}"
            except httpx.TransportError as exc:
                error = f"transport error: {exc}"
            else:
                if resp.status_code < 400:
                    return resp
                if resp.status_code < 500:
                    raise RemoteConfigError(f"HTTP {resp.status_code} from {self.config.endpoint_url}")
                error = f"HTTP {resp.status_code}"
            if attempt >= self.config.max_retries:
                raise RemoteQueryFailed(f"giving up after {attempt + 1} attempts, last: {error}")
            self._sleep(self.config.backoff_base_ms * (2 ** attempt) / 1000.0)
            attempt += 1

    def score(self, x: PointLike) -> float:
        """Fetch the raw score without caching or accounting."""
        resp = self._post(build_request_body(self.config, as_array(x)))
        try:
            doc = resp.json()
        except ValueError as exc:
            raise RemoteProtocolError(f"response is not JSON: {exc}") from None
        return extract_score(doc, self.config.score_path)

    def predict(self, x):
        return label_from_score(self.score(x), self.config.threshold, self.config.comparison)

    def query(self, x: PointLike, ledger: Optional[QueryLedger] = None) -> int:
        x = as_array(x)
        if x.size != self.n:
            raise ValueError(f"dimension mismatch: oracle expects {self.n}, got {x.size}")
        if ledger is not None:
            ledger.require()
        key = self.cache_key(x) if self.config.cache_enabled else None
        label = None
        if key is not None:
            with self._cache_lock:
                label = self._cache.get(key)
        hit = label is not None
        if hit:
            self.cache_hits += 1
        else:
            label = self.predict(x)
            if key is not None:
                with self._cache_lock:
                    self._cache[key] = label
        if ledger is not None and (not hit or self.config.count_cache_hits):
            ledger.charge()
        with self._calls_lock:
            self._calls += 1
        return label


def remote_query(config: RemoteOracleConfig, x: PointLike, ledger: Optional[QueryLedger] = None) -> int:
    """One-shot query through a temporary client."""
    x = as_array(x)
    with RemoteOracle(config, x.size, bounds=None) as oracle:
        return oracle.query(x, ledger)
