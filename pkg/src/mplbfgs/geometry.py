"""Overlapping domain decomposition, window functions, and collocation points.

Boxes are built with a fixed overlap per axis and extend half an overlap
width beyond the domain, so the raw cosine windows always have a positive
pointwise sum on the closed domain and can be normalized into a partition of
unity. Box indexing is C-order over the per-axis cell indices (last axis
fastest).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Jet2

__all__ = [
    "GeometryError",
    "InvalidConfigError",
    "Domain",
    "Decomposition",
    "CollocationSet",
    "build_decomposition",
    "norm_point",
    "raw_window",
    "window",
    "hammersley",
    "assign_points",
    "normalized_input_jet",
    "raw_window_jets_batch",
    "partition_window_jets",
]


class GeometryError(RuntimeError):
    """A point escaped the decomposition's coverage guarantees."""


class InvalidConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Domain:
    """Axis-aligned box domain in 1 or 2 dimensions."""

    bounds: tuple[tuple[float, float], ...]

    def __post_init__(self):
        for lo, hi in self.bounds:
            if not lo < hi:
                raise InvalidConfigError(f"degenerate axis interval [{lo}, {hi}]")

    @property
    def d(self):
        return len(self.bounds)

    def extent(self, k):
        lo, hi = self.bounds[k]
        return hi - lo

    def contains(self, x, tol=0.0):
        x = np.atleast_1d(x)
        return all(
            lo - tol <= x[k] <= hi + tol for k, (lo, hi) in enumerate(self.bounds)
        )


@dataclass(frozen=True)
class Decomposition:
    """Overlapping boxes covering a domain, with per-axis overlap widths."""

    domain: Domain
    counts: tuple[int, ...]
    overlap: tuple[float, ...]
    boxes: tuple[tuple[tuple[float, float], ...], ...]

    @property
    def n_subdomains(self):
        return len(self.boxes)

    @property
    def d(self):
        return self.domain.d

    def box(self, j):
        return self.boxes[j]

    def inside_box(self, j, x):
        """Strict interior membership; points on a face do not belong."""
        x = np.atleast_1d(x)
        return all(a < x[k] < b for k, (a, b) in enumerate(self.boxes[j]))


@dataclass(frozen=True)
class CollocationSet:
    """Points plus, for each subdomain, the indices of the points it owns."""

    points: np.ndarray
    assignment: tuple[np.ndarray, ...]

    @property
    def n(self):
        return self.points.shape[0]


def build_decomposition(domain, counts, overlap_ratio=0.4):
    """Uniform overlapping decomposition with ``counts[k]`` cells per axis.

    Along an axis with extent E and m cells, the cell width is h = E/m, the
    overlap is ``overlap_ratio * h``, and cell i becomes the box
    [lo + i*h - overlap/2, lo + (i+1)*h + overlap/2]. The outermost boxes
    therefore reach half an overlap beyond the domain.
    """
    counts = tuple(int(c) for c in np.atleast_1d(counts))
    if len(counts) != domain.d:
        raise InvalidConfigError(
            f"counts {counts} do not match domain dimension {domain.d}"
        )
    if any(c < 1 for c in counts):
        raise InvalidConfigError("need at least one subdomain per axis")
    if not 0.0 < overlap_ratio < 1.0:
        raise InvalidConfigError("overlap_ratio must lie strictly in (0, 1)")

    axis_intervals = []
    overlap = []
    for k, m in enumerate(counts):
        lo, hi = domain.bounds[k]
        h = (hi - lo) / m
        delta = overlap_ratio * h
        overlap.append(delta)
        axis_intervals.append(
            [(lo + i * h - delta / 2.0, lo + (i + 1) * h + delta / 2.0) for i in range(m)]
        )

    boxes = []
    for multi in np.ndindex(*counts):
        boxes.append(tuple(axis_intervals[k][i] for k, i in enumerate(multi)))
    return Decomposition(domain, counts, tuple(overlap), tuple(boxes))


def norm_point(decomp, j, x):
    """Map a point into box j's reference coordinates, (-1, 1) inside it.

    Accepts floats or jets per coordinate; the map is affine per axis.
    """
    box = decomp.boxes[j]
    xs = x if isinstance(x, (list, tuple)) else np.atleast_1d(x)
    out = []
    for k, (a, b) in enumerate(box):
        out.append((2.0 * xs[k] - a - b) * (1.0 / (b - a)))
    return out if isinstance(x, (list, tuple)) else np.array(out)


def _component_value(c):
    if isinstance(c, Jet2):
        return float(ad._val(c.val))
    return float(c)


def raw_window(decomp, j, x):
    """Unnormalized cosine window of box j, zero outside the open box.

    Accepts floats or jets per coordinate. The product form
    prod_k (1 + cos(pi * xi_k))**2 is clamped to an exact zero whenever any
    reference coordinate reaches magnitude one, so the support is exactly
    the open box.
    """
    xs = x if isinstance(x, (list, tuple)) else np.atleast_1d(x)
    xi = norm_point(decomp, j, list(xs) if isinstance(x, (list, tuple)) else xs)
    if any(abs(_component_value(c)) >= 1.0 for c in xi):
        if any(isinstance(c, Jet2) for c in xi):
            template = next(c for c in xi if isinstance(c, Jet2))
            return template._like(0.0)
        return 0.0
    w = None
    for c in xi:
        factor = (1.0 + ad.cos(np.pi * c)) ** 2
        w = factor if w is None else w * factor
    return w


def window(decomp, j, x):
    """Partition-of-unity window: raw window j over the sum of raw windows."""
    num = raw_window(decomp, j, x)
    den = None
    for m in range(decomp.n_subdomains):
        r = raw_window(decomp, m, x)
        den = r if den is None else den + r
    den_value = _component_value(den.val if isinstance(den, Jet2) else den)
    if den_value <= 0.0:
        raise GeometryError(
            f"window sum vanished at {np.atleast_1d(x)}; decomposition does not cover the point"
        )
    return num / den


def _radical_inverse_base2(i):
    q = 0.0
    bk = 0.5
    n = int(i)
    while n > 0:
        q += (n & 1) * bk
        n >>= 1
        bk *= 0.5
    return q


def hammersley(count, domain):
    """Deterministic Hammersley points inside the domain.

    In 2-D, point i is (i/n, vdc2(i)) scaled to the domain; in 1-D the base-2
    radical inverse alone is used. Repeated calls are bit-identical.
    """
    n = int(count)
    if n < 1:
        raise InvalidConfigError("need at least one point")
    vdc = np.array([_radical_inverse_base2(i) for i in range(n)])
    if domain.d == 1:
        lo, hi = domain.bounds[0]
        pts = lo + vdc * (hi - lo)
        return pts.reshape(n, 1)
    if domain.d == 2:
        lin = np.arange(n) / n
        (lo0, hi0), (lo1, hi1) = domain.bounds
        pts = np.empty((n, 2))
        pts[:, 0] = lo0 + lin * (hi0 - lo0)
        pts[:, 1] = lo1 + vdc * (hi1 - lo1)
        return pts
    raise InvalidConfigError(f"unsupported dimension {domain.d}")


def assign_points(decomp, points):
    """Assign each point to every box whose open interior contains it."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != decomp.d:
        raise InvalidConfigError(f"points must have shape (n, {decomp.d})")
    n = points.shape[0]
    covered = np.zeros(n, dtype=bool)
    assignment = []
    for box in decomp.boxes:
        inside = np.ones(n, dtype=bool)
        for k, (a, b) in enumerate(box):
            inside &= (points[:, k] > a) & (points[:, k] < b)
        covered |= inside
        assignment.append(np.nonzero(inside)[0])
    if not covered.all():
        bad = int(np.nonzero(~covered)[0][0])
        raise GeometryError(f"point {points[bad]} is covered by no subdomain box")
    return CollocationSet(points, tuple(assignment))


# ----------------------------------------------------------------------------
# Batched jet helpers for loss evaluation
# ----------------------------------------------------------------------------


def normalized_input_jet(decomp, j, points, orders):
    """Jet of the reference coordinates of box j for a batch of points.

    Returns a matrix jet of shape (m, d): the value is the normalized input
    fed to subnetwork j, the first-derivative channel for axis k is the
    constant column scaling 2/(b_k - a_k), and second derivatives vanish.
    """
    box = decomp.boxes[j]
    m, d = points.shape
    val = np.empty((m, d))
    d1 = []
    for k, (a, b) in enumerate(box):
        val[:, k] = (2.0 * points[:, k] - a - b) / (b - a)
        col = np.zeros((1, d))
        col[0, k] = 2.0 / (b - a)
        d1.append(np.broadcast_to(col, (m, d)))
    d2 = tuple(0.0 if o >= 2 else None for o in orders)
    return Jet2(val, tuple(d1), d2)


def _axis_coordinate_jets(points, orders):
    m, d = points.shape
    jets = []
    for k in range(d):
        d1 = tuple(1.0 if s == k else 0.0 for s in range(d))
        d2 = tuple(0.0 if o >= 2 else None for o in orders)
        jets.append(Jet2(points[:, k].copy(), d1, d2))
    return jets


def raw_window_jets_batch(decomp, j, points, orders):
    """Raw-window jet of box j at points strictly inside the box."""
    box = decomp.boxes[j]
    coords = _axis_coordinate_jets(points, orders)
    w = None
    for k, (a, b) in enumerate(box):
        xi = (2.0 * coords[k] - (a + b)) * (1.0 / (b - a))
        factor = (1.0 + ad.cos(np.pi * xi)) ** 2
        w = factor if w is None else w * factor
    return w


def partition_window_jets(decomp, colloc, orders):
    """Normalized window jets for every subdomain at its assigned points.

    Raw-window jets are accumulated pointwise over all covering boxes and
    each subdomain's jet is divided by that sum, yielding partition-of-unity
    weights whose spatial derivatives are exact.
    """
    points = colloc.points
    n = points.shape[0]
    d = points.shape[1]
    raws = []
    sum_val = np.zeros(n)
    sum_d1 = [np.zeros(n) for _ in range(d)]
    sum_d2 = [np.zeros(n) if o >= 2 else None for o in orders]
    for j, idx in enumerate(colloc.assignment):
        if idx.size == 0:
            raws.append(None)
            continue
        w = raw_window_jets_batch(decomp, j, points[idx], orders)
        raws.append(w)
        np.add.at(sum_val, idx, w.val)
        for k in range(d):
            if not ad._is_zero(w.d1[k]):
                np.add.at(sum_d1[k], idx, w.d1[k])
            if sum_d2[k] is not None and w.d2[k] is not None and not ad._is_zero(w.d2[k]):
                np.add.at(sum_d2[k], idx, w.d2[k])
    if np.any(sum_val <= 0.0):
        bad = int(np.nonzero(sum_val <= 0.0)[0][0])
        raise GeometryError(f"window sum vanished at point {points[bad]}")

    windows = []
    for j, idx in enumerate(colloc.assignment):
        if idx.size == 0:
            windows.append(None)
            continue
        s = Jet2(
            sum_val[idx],
            tuple(sum_d1[k][idx] for k in range(d)),
            tuple(None if sum_d2[k] is None else sum_d2[k][idx] for k in range(d)),
        )
        windows.append(raws[j] / s)
    return windows
