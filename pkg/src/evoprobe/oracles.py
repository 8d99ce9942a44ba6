"""Synthetic hard-label oracles with known geometry, plus point-file loading.

Halfspace, sphere and ellipsoid oracles have closed-form (or 1-D solvable)
minimal adversarial distances and serve as ground truth.  The two embedding
oracles mimic a face pipeline: a fixed linear embedding followed by a cosine
threshold (verification) or a nearest-centroid rule (identification).
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .core import (
    AdversarialCriterion,
    Bounds,
    DodgeBinary,
    HardLabelOracle,
    ImpersonateBinary,
    Point,
    PointLike,
    Shape,
    as_array,
    read_point_values,
)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def _check_shape(n: int, shape) -> Optional[Shape]:
    if shape is None:
        return None
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or math.prod(shape) != n:
        raise ValueError(f"shape {shape} does not match dimension {n}")
    return shape


class HalfspaceOracle(HardLabelOracle):
    """Label 1 iff ``w . x >= b``."""

    def __init__(self, w, b: float, *, shape=None, bounds: Optional[Bounds] = None):
        super().__init__()
        self.w = _frozen(w).reshape(-1)
        self.b = float(b)
        self.norm_w = float(np.linalg.norm(self.w))
        if not self.norm_w > 0:
            raise ValueError("halfspace normal must be nonzero")
        self.n = self.w.size
        self.shape = _check_shape(self.n, shape)
        self.bounds = bounds

    def predict(self, x):
        return int(self.w @ x >= self.b)


class SphereOracle(HardLabelOracle):
    """Label 1 iff ``||x - c|| <= r``."""

    def __init__(self, center, radius: float, *, shape=None, bounds: Optional[Bounds] = None):
        super().__init__()
        self.center = _frozen(center).reshape(-1)
        self.radius = float(radius)
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        self.n = self.center.size
        self.shape = _check_shape(self.n, shape)
        self.bounds = bounds

    def predict(self, x):
        d = x - self.center
        return int(d @ d <= self.radius * self.radius)


class EllipsoidOracle(HardLabelOracle):
    """Label 1 iff ``sum(((x - c) / a) ** 2) <= 1`` for axis-aligned semi-axes ``a``."""

    def __init__(self, center, axes, *, shape=None, bounds: Optional[Bounds] = None):
        super().__init__()
        self.center = _frozen(center).reshape(-1)
        self.axes = _frozen(axes).reshape(-1)
        if self.axes.shape != self.center.shape:
            raise ValueError("center and axes must have the same length")
        if not np.all(self.axes > 0):
            raise ValueError("semi-axes must be positive")
        self.n = self.center.size
        self.shape = _check_shape(self.n, shape)
        self.bounds = bounds

    def predict(self, x):
        u = (x - self.center) / self.axes
        return int(u @ u <= 1.0)


class ConstantOracle(HardLabelOracle):
    """Always answers the same label; with a matching criterion the loss is pure distance."""

    def __init__(self, n: int, label: int = 1, *, shape=None, bounds: Optional[Bounds] = None):
        super().__init__()
        self.n = int(n)
        self.label = int(label)
        self.shape = _check_shape(self.n, shape)
        self.bounds = bounds

    def predict(self, x):
        return self.label


def random_embedding(d: int, n: int, rng, *, shape=None, low_res=None) -> np.ndarray:
    """A ``d x n`` Gaussian embedding matrix.

    With ``shape=(h, w, c)`` and ``low_res=(h', w')`` each row is a random
    ``h' x w' x c`` pattern upscaled bilinearly, so the embedding only sees
    spatially smooth content.  Smooth rows are centred, which makes the
    embedding blind to a global brightness shift; without this every image
    in ``[0, 1]`` embeds close to the all-ones direction.
    """
    rng = np.random.default_rng(rng)
    if low_res is None:
        return rng.standard_normal((d, n)) / math.sqrt(n)
    from .evo_attack import upscale_bilinear

    if shape is None:
        raise ValueError("a smooth embedding needs the grid shape")
    src = (int(low_res[0]), int(low_res[1]), shape[2])
    rows = [upscale_bilinear(rng.standard_normal(math.prod(src)), src, shape) for _ in range(d)]
    E = np.stack(rows)
    E -= E.mean(axis=1, keepdims=True)
    return E / np.linalg.norm(E, axis=1, keepdims=True)


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(u @ v) / (nu * nv)


class CosineVerifyOracle(HardLabelOracle):
    """Verification: label 1 iff ``cos(E x, E x_ref) >= threshold``."""

    def __init__(self, E, x_ref, threshold: float, *, shape=None, bounds: Optional[Bounds] = (0.0, 1.0)):
        super().__init__()
        self.E = _frozen(E)
        self.x_ref = _frozen(x_ref).reshape(-1)
        if self.E.ndim != 2 or self.E.shape[1] != self.x_ref.size:
            raise ValueError("embedding matrix must be d x n with n = len(x_ref)")
        if not np.all(np.isfinite(self.E)):
            raise ValueError("embedding must be finite")
        if not -1.0 < threshold < 1.0:
            raise ValueError("threshold must lie in (-1, 1)")
        self.ref_embedding = _frozen(self.E @ self.x_ref)
        if not np.any(self.ref_embedding):
            raise ValueError("reference embedding is zero")
        self.threshold = float(threshold)
        self.n = self.x_ref.size
        self.shape = _check_shape(self.n, shape)
        self.bounds = bounds

    def similarity(self, x) -> float:
        return _cosine(self.E @ as_array(x), self.ref_embedding)

    def predict(self, x):
        return int(self.similarity(x) >= self.threshold)


class CentroidIdOracle(HardLabelOracle):
    """Identification: label ``argmax_j cos(E x, g_j)`` over the gallery, ties to the lowest index.

    Labels are 1-based, ``1..K``.
    """

    def __init__(self, E, gallery, *, shape=None, bounds: Optional[Bounds] = (0.0, 1.0)):
        super().__init__()
        self.E = _frozen(E)
        gallery = np.array(gallery, dtype=np.float64)
        if gallery.ndim != 2 or gallery.shape[0] < 2 or gallery.shape[1] != self.E.shape[0]:
            raise ValueError("gallery must be K x d with K >= 2")
        norms = np.linalg.norm(gallery, axis=1)
        if not np.all(norms > 0):
            raise ValueError("gallery centroids must be nonzero")
        self.gallery = _frozen(gallery)
        self._unit_gallery = gallery / norms[:, None]
        self.n = self.E.shape[1]
        self.shape = _check_shape(self.n, shape)
        self.bounds = bounds
        self.labels = tuple(range(1, gallery.shape[0] + 1))

    def scores(self, x) -> np.ndarray:
        e = self.E @ as_array(x)
        ne = np.linalg.norm(e)
        if ne == 0.0:
            return np.zeros(self.gallery.shape[0])
        return self._unit_gallery @ e / ne

    def predict(self, x):
        # np.argmax returns the first maximum, which is the tie rule
        return int(np.argmax(self.scores(x))) + 1


# -- ground truth -----------------------------------------------------------


def _ellipsoid_distance(x, center, axes, tol=1e-10) -> float:
    """Euclidean distance from ``x`` to the solid axis-aligned ellipsoid.

    The nearest boundary point is ``y_i = c_i + a_i^2 u_i / (a_i^2 + t)`` with
    ``u = x - c``; the multiplier ``t >= 0`` solves
    ``sum(a_i^2 u_i^2 / (a_i^2 + t)^2) = 1`` and is found by bisection.
    """
    u = np.asarray(x, dtype=np.float64) - center
    a2 = axes * axes
    if np.sum(u * u / a2) <= 1.0:
        return 0.0

    def g(t):
        return float(np.sum(a2 * u * u / (a2 + t) ** 2)) - 1.0

    lo, hi = 0.0, float(np.max(axes) * np.linalg.norm(u))
    while g(hi) > 0:
        hi *= 2.0
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if g(mid) > 0:
            lo = mid
        else:
            hi = mid
    t = 0.5 * (lo + hi)
    y = a2 * u / (a2 + t)
    return float(np.linalg.norm(u - y))


def analytic_min_distortion(oracle: HardLabelOracle, x: PointLike, criterion: AdversarialCriterion) -> Optional[float]:
    """Exact minimal L2 distance from ``x`` to the region the criterion accepts.

    Supports binary criteria on halfspace, sphere and ellipsoid oracles; returns
    ``None`` for anything else.  The distance to the closed label-1 set is exact;
    for label 0 (an open set) the value is the infimum.
    """
    x = as_array(x)
    inside = {DodgeBinary: False, ImpersonateBinary: True}.get(type(criterion))
    if inside is None:
        return None
    if isinstance(oracle, HalfspaceOracle):
        gap = (oracle.b - float(oracle.w @ x)) / oracle.norm_w
        return max(gap, 0.0) if inside else max(-gap, 0.0)
    if isinstance(oracle, SphereOracle):
        r = float(np.linalg.norm(x - oracle.center))
        return max(r - oracle.radius, 0.0) if inside else max(oracle.radius - r, 0.0)
    if isinstance(oracle, EllipsoidOracle):
        if inside:
            return _ellipsoid_distance(x, oracle.center, oracle.axes)
        # distance to the exterior: only closed form on the axes is easy, skip
        u = (x - oracle.center) / oracle.axes
        return 0.0 if u @ u > 1.0 else None
    return None


# -- loading ----------------------------------------------------------------


def load_point(path: Union[str, Path], fmt: Optional[str] = None, *, shape=None, bounds=None) -> Point:
    """Read a point from a CSV row or an ``EVPT`` binary file."""
    values = read_point_values(path, fmt)
    if shape is not None and math.prod(shape) != values.size:
        raise ValueError(f"file holds {values.size} values, shape {tuple(shape)} needs {math.prod(shape)}")
    return Point(values, shape=shape, bounds=bounds)
