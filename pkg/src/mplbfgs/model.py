"""Subdomain networks and their window-weighted sum.

Each subdomain owns a small residual network evaluated on normalized inputs;
the global surrogate is the partition-of-unity weighted sum of subnetwork
outputs, optionally composed with a problem's boundary lifting. Parameters
live in one flat vector with one contiguous block per subnetwork.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import BlockLayout, Jet2, LayoutError, ParamVector

__all__ = [
    "SubnetConfig",
    "FbpinnModel",
    "build_model",
    "init_params",
    "subnet_forward",
    "subnet_forward_jet",
    "fbpinn_forward",
    "fbpinn_forward_batch",
    "lifted_u",
    "lifted_point_function",
    "restrict",
    "prolong_sum",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class SubnetConfig:
    """Residual tanh network: input affine, ``blocks`` residual updates
    ``h <- h + tanh(W h + b)``, then an affine output head."""

    input_dim: int
    width: int = 20
    blocks: int = 2

    def __post_init__(self):
        if self.width < 1 or self.blocks < 0 or self.input_dim < 1:
            raise ValueError("invalid subnet configuration")

    @property
    def param_count(self):
        d, w = self.input_dim, self.width
        return (d * w + w) + self.blocks * (w * w + w) + (w + 1)

    def shapes(self):
        """Parameter tensors in flat-storage order."""
        d, w = self.input_dim, self.width
        out = [("w_in", (d, w)), ("b_in", (w,))]
        for i in range(self.blocks):
            out.append((f"w_{i}", (w, w)))
            out.append((f"b_{i}", (w,)))
        out.append(("w_out", (w, 1)))
        out.append(("b_out", (1,)))
        return out


@dataclass
class FbpinnModel:
    """Decomposition plus one subnetwork per subdomain.

    ``theta`` holds the current parameters; optimizers replace it wholesale.
    Parameter block j is subnetwork j's flat parameters, so restriction and
    prolongation are block slicing and scatter.
    """

    decomp: geo.Decomposition
    subnet: SubnetConfig
    layout: BlockLayout = field(init=False)
    theta: ParamVector | None = None

    def __post_init__(self):
        n = self.decomp.n_subdomains
        self.layout = BlockLayout([self.subnet.param_count] * n)

    @property
    def n_subdomains(self):
        return self.decomp.n_subdomains

    @property
    def p(self):
        return self.layout.size


def build_model(decomp, width=20, blocks=2):
    return FbpinnModel(decomp, SubnetConfig(decomp.d, width, blocks))


def init_params(model, seed):
    """Glorot-uniform weights, zero biases, from one seeded generator.

    Weight matrices are drawn subnet by subnet in flat-storage order with
    bound sqrt(6 / (fan_in + fan_out)); biases stay zero. Deterministic for
    a fixed seed.
    """
    rng = np.random.default_rng(seed)
    blocks = []
    for _ in range(model.n_subdomains):
        parts = []
        for name, shape in model.subnet.shapes():
            if name.startswith("w"):
                fan_in, fan_out = shape if len(shape) == 2 else (shape[0], 1)
                bound = np.sqrt(6.0 / (fan_in + fan_out))
                parts.append(rng.uniform(-bound, bound, size=shape).ravel())
            else:
                parts.append(np.zeros(int(np.prod(shape))))
        blocks.append(np.concatenate(parts))
    return ParamVector(np.concatenate(blocks), model.layout)


def _unpack(config, theta_block):
    """Views of the parameter tensors inside one flat block (Var or array)."""
    if np.shape(ad._val(theta_block)) != (config.param_count,):
        raise LayoutError(
            f"expected {config.param_count} parameters, got "
            f"{np.shape(ad._val(theta_block))}"
        )
    tensors = {}
    pos = 0
    for name, shape in config.shapes():
        size = int(np.prod(shape))
        flat = ad.narrow(theta_block, pos, size)
        tensors[name] = ad.reshape(flat, shape) if len(shape) > 1 else flat
        pos += size
    return tensors


def subnet_forward_jet(config, theta_block, xi_jet):
    """Subnetwork output jet for a batch of normalized inputs.

    ``xi_jet`` is a matrix jet of shape (m, d); the result is a jet of shape
    (m,). ``theta_block`` may be a tape Var (training) or a plain array.
    """
    t = _unpack(config, theta_block)
    h = ad.jet_affine(xi_jet, t["w_in"], t["b_in"])
    for i in range(config.blocks):
        h = h + ad.tanh(ad.jet_affine(h, t[f"w_{i}"], t[f"b_{i}"]))
    out = ad.jet_affine(h, t["w_out"], t["b_out"])
    m = np.shape(ad._val(out.val))[0]
    return ad.jet_map(lambda c: ad.reshape(c, (m,)), out)


def subnet_forward(config, theta_block, xi):
    """Scalar subnetwork output at one normalized input point."""
    xi = np.atleast_1d(np.asarray(xi, dtype=np.float64)).reshape(1, -1)
    jet = subnet_forward_jet(config, np.asarray(theta_block, float), Jet2(xi))
    return float(jet.val[0])


def _theta_values(theta):
    return theta.values if isinstance(theta, ParamVector) else np.asarray(theta, float)


def fbpinn_forward_batch(model, theta, points):
    """Window-weighted sum of subnetwork outputs at many points (values only)."""
    points = np.asarray(points, dtype=np.float64)
    values = _theta_values(theta)
    colloc = geo.assign_points(model.decomp, points)
    windows = geo.partition_window_jets(model.decomp, colloc, orders=())
    total = np.zeros(points.shape[0])
    for j, idx in enumerate(colloc.assignment):
        if idx.size == 0:
            continue
        xi = geo.normalized_input_jet(model.decomp, j, points[idx], orders=())
        out = subnet_forward_jet(model.subnet, model.layout.restrict(values, j), xi)
        np.add.at(total, idx, windows[j].val * out.val)
    return total


def fbpinn_forward(model, theta, x):
    """Global surrogate value at one point."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    return float(fbpinn_forward_batch(model, theta, x.reshape(1, -1))[0])


def lifted_u(model, problem, theta, x):
    """Boundary-conforming solution value C(x) + l(x) * N(theta, x)."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    n = fbpinn_forward(model, theta, x)
    return float(problem.offset(*x) + problem.lifting(*x) * n)


def lifted_point_function(model, problem, theta):
    """Pointwise jet evaluator of the lifted solution, for derivative probes.

    The returned callable accepts one jet (or float) per coordinate and
    evaluates the full composition: input normalization, subnetworks,
    partition-of-unity windows, and the problem's lifting.
    """
    values = _theta_values(theta)

    def fn(*coords):
        total = None
        den = None
        contribs = []
        for j in range(model.n_subdomains):
            w = geo.raw_window(model.decomp, j, list(coords))
            wval = w.val if isinstance(w, Jet2) else w
            if isinstance(w, Jet2) or wval != 0.0:
                den = w if den is None else den + w
                if _nonzero_value(w):
                    contribs.append((j, w))
        for j, w in contribs:
            xi = geo.norm_point(model.decomp, j, list(coords))
            xi_jet = _stack_point_jet(xi)
            out = subnet_forward_jet(model.subnet, model.layout.restrict(values, j), xi_jet)
            out = ad.jet_map(lambda c: ad.reshape(c, ()), out)
            term = (w / den) * out
            total = term if total is None else total + term
        if total is None:
            raise geo.GeometryError("point lies outside every subdomain box")
        return problem.offset(*coords) + problem.lifting(*coords) * total

    return fn


def _nonzero_value(w):
    v = w.val if isinstance(w, Jet2) else w
    return float(ad._val(v)) != 0.0


def _stack_point_jet(coords):
    """Combine scalar coordinate jets into a (1, d) matrix jet."""
    jets = [c if isinstance(c, Jet2) else Jet2(c) for c in coords]
    naxes = max((j.naxes for j in jets), default=0)
    for j in jets:
        if j.naxes not in (0, naxes):
            raise ValueError("coordinate jets track different axes")
    d = len(jets)

    def col(values):
        row = np.empty((1, d))
        for k, v in enumerate(values):
            row[0, k] = float(ad._val(v))
        return row

    val = col([j.val for j in jets])
    d1 = []
    d2 = []
    for a in range(naxes):
        d1.append(col([j.d1[a] if j.naxes else 0.0 for j in jets]))
        if any(j.naxes and j.d2[a] is None for j in jets):
            d2.append(None)
        else:
            d2.append(col([j.d2[a] if j.naxes else 0.0 for j in jets]))
    return Jet2(val, tuple(d1), tuple(d2))


def restrict(theta, j):
    """Block j of a parameter vector (the local parameters)."""
    if isinstance(theta, ParamVector):
        return theta.restrict(j)
    raise TypeError("restrict expects a ParamVector")


def prolong_sum(layout, blocks):
    """Reassemble a full parameter vector from per-subdomain blocks."""
    if len(blocks) != layout.n_blocks:
        raise LayoutError(f"expected {layout.n_blocks} blocks, got {len(blocks)}")
    out = np.zeros(layout.size)
    for j, b in enumerate(blocks):
        out += layout.embed(j, b)
    return ParamVector(out, layout)


def save_checkpoint(path, theta):
    """Binary checkpoint: uint64 header (n_blocks, sizes...) then float64 data,
    all little-endian, enabling bit-exact resume."""
    layout = theta.layout
    header = np.array([layout.n_blocks, *layout.sizes], dtype="<u8")
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(theta.values.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    n_blocks = int(np.frombuffer(raw[:8], dtype="<u8")[0])
    sizes = np.frombuffer(raw[8 : 8 + 8 * n_blocks], dtype="<u8").astype(int)
    layout = BlockLayout(sizes)
    values = np.frombuffer(raw[8 + 8 * n_blocks :], dtype="<f8").astype(np.float64)
    if values.shape[0] != layout.size:
        raise LayoutError("checkpoint data does not match its header")
    return ParamVector(values, layout)
