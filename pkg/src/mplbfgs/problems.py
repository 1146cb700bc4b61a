"""Benchmark boundary-value problems and their collocation losses.

Each problem bundles a residual operator acting on jet channels, a lifting
pair (l, C) that hard-enforces boundary and initial data, and a truth oracle
for validation. The loss evaluators precompute everything independent of the
parameters (window jets, normalized inputs, lifting jets, forcing values), so
an evaluation only runs the subnetworks and the residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import burgers_ref
from . import geometry as geo
from . import model as mdl
from .autodiff import Jet2
from .geometry import InvalidConfigError

__all__ = [
    "UndefinedMetricError",
    "Problem",
    "poisson_problem",
    "burgers_problem",
    "physics_loss",
    "local_loss",
    "relative_l2",
    "lifted_values_batch",
    "GlobalObjective",
    "LocalObjective",
    "TrialEvaluation",
]

BURGERS_NU = 0.01 / np.pi


class UndefinedMetricError(ZeroDivisionError):
    """Relative error against an identically-zero truth field."""


@dataclass(frozen=True)
class Problem:
    """Residual operator, boundary lifting, and truth for one benchmark.

    ``residual(u, du, d2u, x)`` receives the solution jet channels (each a
    tape Var, array, or float) and the raw coordinates, and returns the
    pointwise equation residual including the forcing. ``orders[k]`` is the
    derivative order the residual needs along axis k. ``lifting`` vanishes on
    the constrained part of the boundary and ``offset`` interpolates the
    prescribed data there, so offset + lifting * network satisfies the
    constraints for any parameters.
    """

    name: str
    domain: geo.Domain
    orders: tuple[int, ...]
    residual: Callable
    lifting: Callable
    offset: Callable
    truth: Callable | None

    @property
    def d(self):
        return self.domain.d


def poisson_problem(dim):
    """Manufactured Poisson problems with homogeneous Dirichlet data.

    1-D: -u'' = 400 pi^2 sin(20 pi x) on (0,1), truth sin(20 pi x).
    2-D: -lap u = 32 pi^2 sin(4 pi x1) sin(4 pi x2) on (0,1)^2.
    """
    if dim == 1:
        dom = geo.Domain(((0.0, 1.0),))

        def residual(u, du, d2u, x):
            f = 400.0 * np.pi**2 * np.sin(20.0 * np.pi * x[:, 0])
            return -d2u[0] - f

        return Problem(
            name="poisson1d",
            domain=dom,
            orders=(2,),
            residual=residual,
            lifting=lambda x: (4.0 * x) * (1.0 - x),
            offset=lambda x: 0.0,
            truth=lambda pts: np.sin(20.0 * np.pi * pts[:, 0]),
        )
    if dim == 2:
        dom = geo.Domain(((0.0, 1.0), (0.0, 1.0)))

        def residual(u, du, d2u, x):
            f = (
                32.0
                * np.pi**2
                * np.sin(4.0 * np.pi * x[:, 0])
                * np.sin(4.0 * np.pi * x[:, 1])
            )
            return -(d2u[0] + d2u[1]) - f

        return Problem(
            name="poisson2d",
            domain=dom,
            orders=(2, 2),
            residual=residual,
            lifting=lambda x1, x2: (4.0 * x1) * (1.0 - x1) * ((4.0 * x2) * (1.0 - x2)),
            offset=lambda x1, x2: 0.0,
            truth=lambda pts: np.sin(4.0 * np.pi * pts[:, 0])
            * np.sin(4.0 * np.pi * pts[:, 1]),
        )
    raise InvalidConfigError(f"no Poisson benchmark in dimension {dim}")


class _BurgersTruth:
    """Cross-checked reference values, cached per query-point set."""

    def __init__(self, nu=BURGERS_NU):
        self.nu = nu
        self._cache = {}

    def __call__(self, points):
        points = np.asarray(points, dtype=np.float64)
        key = points.tobytes()
        if key not in self._cache:
            self._cache[key] = burgers_ref.reference_at_points(points, self.nu)
        return self._cache[key]


def burgers_problem(nu=BURGERS_NU):
    """Viscous Burgers on (0,1) x (-1,1) with coordinates (t, x).

    Initial data -sin(pi x) and homogeneous Dirichlet walls are enforced by
    C(t,x) = -sin(pi x) and l(t,x) = t (1 - x^2). Truth comes from the
    dual-oracle reference field.
    """
    dom = geo.Domain(((0.0, 1.0), (-1.0, 1.0)))

    def residual(u, du, d2u, x):
        return du[0] + u * du[1] - nu * d2u[1]

    return Problem(
        name="burgers",
        domain=dom,
        orders=(1, 2),
        residual=residual,
        lifting=lambda t, x: t * (1.0 - x**2),
        offset=lambda t, x: -ad.sin(np.pi * x),
        truth=_BurgersTruth(nu),
    )


# ----------------------------------------------------------------------------
# Loss evaluators
# ----------------------------------------------------------------------------


def _lifting_jets(problem, points):
    """Constant jets of the lifting pair at a batch of points."""
    coords = geo._axis_coordinate_jets(points, problem.orders)
    lift = problem.lifting(*coords)
    off = problem.offset(*coords)
    template = lift if isinstance(lift, Jet2) else coords[0]
    if not isinstance(lift, Jet2):
        lift = template._like(lift)
    if not isinstance(off, Jet2):
        off = template._like(off)
    return lift, off


class _GlobalLossEngine:
    """Physics loss of the lifted global surrogate over fixed points."""

    def __init__(self, problem, model, colloc):
        if colloc.n == 0:
            raise InvalidConfigError("collocation set is empty")
        self.problem = problem
        self.model = model
        self.colloc = colloc
        self.p = model.layout.size
        orders = problem.orders
        self.windows = geo.partition_window_jets(model.decomp, colloc, orders)
        self.inputs = []
        for j, idx in enumerate(colloc.assignment):
            if idx.size == 0:
                self.inputs.append(None)
                continue
            self.inputs.append(
                geo.normalized_input_jet(model.decomp, j, colloc.points[idx], orders)
            )
        self.lift, self.offset = _lifting_jets(problem, colloc.points)

    def forward(self, theta):
        """Scalar loss; a Var when ``theta`` is a Var, else a float."""
        n = self.colloc.n
        model = self.model
        total = None
        for j, idx in enumerate(self.colloc.assignment):
            if idx.size == 0:
                continue
            theta_j = ad.narrow(theta, model.layout.offsets[j], model.layout.sizes[j])
            out = mdl.subnet_forward_jet(model.subnet, theta_j, self.inputs[j])
            contrib = self.windows[j] * out
            scattered = ad.jet_map(lambda c: ad.scatter_add(c, idx, n), contrib)
            total = scattered if total is None else total + scattered
        u = self.offset + self.lift * total
        r = self.problem.residual(u.val, u.d1, u.d2, self.colloc.points)
        return ad.vmean(r * r)


class _LocalLossEngine:
    """Residual loss of one isolated raw-windowed subnetwork on its points.

    Uses the unnormalized window, which vanishes on the subdomain boundary,
    and applies no global lifting and no neighbor contributions.
    """

    def __init__(self, problem, model, j, points):
        points = np.asarray(points, dtype=np.float64)
        if points.shape[0] == 0:
            raise InvalidConfigError(f"subdomain {j} has no collocation points")
        self.problem = problem
        self.model = model
        self.j = j
        self.points = points
        self.p = model.subnet.param_count
        orders = problem.orders
        self.window = geo.raw_window_jets_batch(model.decomp, j, points, orders)
        self.input = geo.normalized_input_jet(model.decomp, j, points, orders)

    def forward(self, theta_j):
        out = mdl.subnet_forward_jet(self.model.subnet, theta_j, self.input)
        v = self.window * out
        r = self.problem.residual(v.val, v.d1, v.d2, self.points)
        return ad.vmean(r * r)


@dataclass
class TrialEvaluation:
    """A taped forward pass kept alive so its gradient can be swept later."""

    value: float
    slope: float
    tape: ad.Tape
    out: ad.Var
    leaf: ad.Var


class _Objective:
    """Counting wrapper around a loss engine.

    ``sink(dl, dg)`` is called once per evaluation with the loss/gradient
    evaluation deltas; clones sharing the precomputed engine but with a
    different sink are cheap.
    """

    def __init__(self, engine, sink=None):
        self._engine = engine
        self.sink = sink

    @property
    def p(self):
        return self._engine.p

    def with_sink(self, sink):
        clone = object.__new__(type(self))
        clone._engine = self._engine
        clone.sink = sink
        return clone

    def _count(self, dl, dg):
        if self.sink is not None:
            self.sink(dl, dg)

    def value(self, theta):
        """Loss only; runs the numpy path, no tape."""
        self._count(1, 0)
        out = self._engine.forward(np.asarray(theta, dtype=np.float64))
        value = float(out)
        if not np.isfinite(value):
            raise ad.EvaluationError("non-finite loss value")
        return value

    def value_grad(self, theta):
        """Loss and full gradient from one taped forward plus reverse sweep."""
        self._count(1, 1)
        tape = ad.Tape()
        leaf = tape.leaf(np.asarray(theta, dtype=np.float64))
        out = self._engine.forward(leaf)
        (g,) = tape.gradient(out, [leaf])
        return float(out.val), g

    def value_slope(self, theta, direction):
        """Loss and directional slope via tangent propagation.

        The tape is recorded and returned so the gradient at this point can
        still be obtained later without another forward pass.
        """
        self._count(1, 0)
        tape = ad.Tape()
        leaf = tape.leaf(
            np.asarray(theta, dtype=np.float64),
            tan=np.asarray(direction, dtype=np.float64),
        )
        out = self._engine.forward(leaf)
        value = float(out.val)
        if not np.isfinite(value):
            loc = tape.first_nonfinite()
            idx, name = loc if loc is not None else (out.idx, "output")
            raise ad.EvaluationError(
                f"non-finite value in primitive {idx} ({name})",
                op_index=idx,
                op_name=name,
            )
        slope = float(out.tan) if out.tan is not None else 0.0
        return TrialEvaluation(value, slope, tape, out, leaf)

    def grad_of_trial(self, trial):
        """Reverse sweep over a kept trial tape; no new forward pass."""
        self._count(0, 1)
        (g,) = trial.tape.gradient(trial.out, [trial.leaf])
        return g


class GlobalObjective(_Objective):
    def __init__(self, problem, model, colloc, sink=None):
        super().__init__(_GlobalLossEngine(problem, model, colloc), sink)


class LocalObjective(_Objective):
    def __init__(self, problem, model, j, points, sink=None):
        super().__init__(_LocalLossEngine(problem, model, j, points), sink)
        self.j = j


# ----------------------------------------------------------------------------
# Public loss / metric entry points
# ----------------------------------------------------------------------------


def physics_loss(problem, model, theta, points):
    """Mean squared equation residual of the lifted surrogate."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] == 0:
        raise InvalidConfigError("empty point set")
    colloc = geo.assign_points(model.decomp, points)
    engine = _GlobalLossEngine(problem, model, colloc)
    return float(engine.forward(mdl._theta_values(theta)))


def local_loss(problem, model, j, theta_j, points):
    """Mean squared residual of the isolated raw-windowed subnetwork j."""
    engine = _LocalLossEngine(problem, model, j, points)
    return float(engine.forward(np.asarray(theta_j, dtype=np.float64)))


def lifted_values_batch(problem, model, theta, points):
    """Values of the lifted solution at many points (no derivatives)."""
    points = np.asarray(points, dtype=np.float64)
    n_net = mdl.fbpinn_forward_batch(model, theta, points)
    cols = [points[:, k] for k in range(points.shape[1])]
    lift = problem.lifting(*cols)
    off = problem.offset(*cols)
    return np.asarray(off + lift * n_net, dtype=np.float64)


def relative_l2(problem, model, theta, points, truth_values=None):
    """Discrete relative L2 error of the lifted surrogate against the truth."""
    points = np.asarray(points, dtype=np.float64)
    if truth_values is None:
        if problem.truth is None:
            raise InvalidConfigError(f"problem {problem.name} has no truth oracle")
        truth_values = problem.truth(points)
    truth_values = np.asarray(truth_values, dtype=np.float64)
    denom = float(np.linalg.norm(truth_values))
    if denom == 0.0:
        raise UndefinedMetricError("truth field has zero norm on the validation set")
    approx = lifted_values_batch(problem, model, theta, points)
    return float(np.linalg.norm(approx - truth_values) / denom)


def validation_points(problem, n_1d=512, n_2d=(128, 128)):
    """Uniform validation grid, endpoints included."""
    if problem.d == 1:
        lo, hi = problem.domain.bounds[0]
        return np.linspace(lo, hi, n_1d).reshape(-1, 1)
    (lo0, hi0), (lo1, hi1) = problem.domain.bounds
    g0 = np.linspace(lo0, hi0, n_2d[0])
    g1 = np.linspace(lo1, hi1, n_2d[1])
    a, b = np.meshgrid(g0, g1, indexing="ij")
    return np.column_stack([a.ravel(), b.ravel()])
