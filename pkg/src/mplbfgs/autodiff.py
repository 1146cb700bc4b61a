"""Reverse-mode tape over float64 numpy values plus forward second-order jets.

Training a collocation loss needs two derivative flavors at once: pure first
and second derivatives of the network output along each input axis (forward
jets), and the gradient of the scalar loss with respect to every trainable
parameter (reverse mode). Jets are propagated with tape variables as their
components, so the spatial-derivative channels stay differentiable with
respect to parameters and a single reverse sweep yields the full gradient.

Supported primitives: add, sub, mul, div, negation, integer/real powers with
constant exponent, tanh, sin, cos, and affine combinations (dense affine maps
plus the linear bookkeeping ops narrow/reshape/scatter/sum). Everything else
must be composed from these.

Tape variables may additionally carry a tangent (a directional derivative
with respect to the leaf values), which gives slopes for line searches at
forward-pass cost, without a reverse sweep.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "EvaluationError",
    "LayoutError",
    "BlockLayout",
    "ParamVector",
    "Tape",
    "Var",
    "Jet2",
    "grad",
    "value_and_slope",
    "spatial_jet",
    "tanh",
    "sin",
    "cos",
    "vsum",
    "vmean",
    "affine",
    "narrow",
    "reshape",
    "scatter_add",
    "coordinate_jets",
    "constant_jet",
]


class EvaluationError(RuntimeError):
    """A non-finite value appeared during an evaluation."""

    def __init__(self, message, op_index=None, op_name=None):
        super().__init__(message)
        self.op_index = op_index
        self.op_name = op_name


class LayoutError(ValueError):
    """Parameter data does not match the declared block layout."""


class BlockLayout:
    """Contiguous, disjoint parameter blocks covering ``[0, size)``.

    Block j occupies ``[offsets[j], offsets[j] + sizes[j])`` of the flat
    parameter vector; restriction is slicing and prolongation is scatter.
    """

    __slots__ = ("sizes", "offsets", "size")

    def __init__(self, sizes):
        self.sizes = tuple(int(s) for s in sizes)
        if any(s <= 0 for s in self.sizes):
            raise LayoutError("block sizes must be positive")
        offs = []
        total = 0
        for s in self.sizes:
            offs.append(total)
            total += s
        self.offsets = tuple(offs)
        self.size = total

    @property
    def n_blocks(self):
        return len(self.sizes)

    def block_slice(self, j):
        if not 0 <= j < len(self.sizes):
            raise LayoutError(f"block index {j} out of range [0, {len(self.sizes)})")
        return slice(self.offsets[j], self.offsets[j] + self.sizes[j])

    def restrict(self, values, j):
        """Extract block j as a fresh array."""
        return np.array(values[self.block_slice(j)], dtype=np.float64)

    def embed(self, j, block):
        """Zero-padded prolongation of a single block into the full vector."""
        block = np.asarray(block, dtype=np.float64)
        if block.shape != (self.sizes[j],):
            raise LayoutError(
                f"block {j} has size {self.sizes[j]}, got shape {block.shape}"
            )
        out = np.zeros(self.size)
        out[self.block_slice(j)] = block
        return out

    def __eq__(self, other):
        return isinstance(other, BlockLayout) and self.sizes == other.sizes

    def __repr__(self):
        return f"BlockLayout(sizes={self.sizes})"


class ParamVector:
    """Flat trainable-parameter vector with a per-subdomain block layout."""

    __slots__ = ("values", "layout")

    def __init__(self, values, layout):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] != layout.size:
            raise LayoutError(
                f"expected {layout.size} values, got shape {values.shape}"
            )
        self.values = values
        self.layout = layout

    def copy(self):
        return ParamVector(self.values.copy(), self.layout)

    def restrict(self, j):
        return self.layout.restrict(self.values, j)

    def __len__(self):
        return self.layout.size

    def __repr__(self):
        return f"ParamVector(size={self.layout.size}, blocks={self.layout.n_blocks})"


# ----------------------------------------------------------------------------
# Tape and variables
# ----------------------------------------------------------------------------


class _Node:
    __slots__ = ("name", "val", "bwd")

    def __init__(self, name, val, bwd):
        self.name = name
        self.val = val
        self.bwd = bwd


class Tape:
    """Ordered record of primitive operations for one evaluation.

    Nodes are appended in execution order, so every operand precedes its
    consumers and one reverse sweep accumulates adjoints for every leaf.
    Tapes are instance-local; never share one between concurrent evaluations.
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def _push(self, name, val, bwd, tan=None):
        idx = len(self.nodes)
        self.nodes.append(_Node(name, val, bwd))
        return Var(self, idx, val, tan)

    def leaf(self, value, tan=None):
        value = np.asarray(value, dtype=np.float64)
        if tan is not None:
            tan = np.asarray(tan, dtype=np.float64)
            if tan.shape != value.shape:
                raise ValueError("tangent shape must match leaf shape")
        return self._push("leaf", value, (), tan)

    def first_nonfinite(self):
        """Index and name of the first node holding a non-finite value."""
        for i, node in enumerate(self.nodes):
            if not np.all(np.isfinite(node.val)):
                return i, node.name
        return None

    def gradient(self, out, leaves):
        """Adjoints of a scalar output with respect to the given leaves."""
        if np.ndim(out.val) != 0:
            raise ValueError("gradient target must be scalar")
        if not math.isfinite(float(out.val)):
            loc = self.first_nonfinite()
            idx, name = loc if loc is not None else (out.idx, "output")
            raise EvaluationError(
                f"non-finite value in primitive {idx} ({name})",
                op_index=idx,
                op_name=name,
            )
        adj = [None] * (out.idx + 1)
        adj[out.idx] = 1.0
        nodes = self.nodes
        for i in range(out.idx, -1, -1):
            g = adj[i]
            if g is None:
                continue
            for p, fn in nodes[i].bwd:
                c = fn(g)
                a = adj[p]
                adj[p] = c if a is None else a + c
        grads = []
        for leaf in leaves:
            a = adj[leaf.idx] if leaf.idx <= out.idx else None
            if a is None:
                grads.append(np.zeros(np.shape(leaf.val)))
            else:
                grads.append(np.broadcast_to(np.asarray(a), np.shape(leaf.val)).copy())
        return grads


class Var:
    """Handle to one tape node; supports the primitive arithmetic set."""

    __slots__ = ("tape", "idx", "val", "tan")

    # Make numpy defer to the reflected operators instead of building
    # object arrays when an ndarray is the left operand.
    __array_ufunc__ = None

    def __init__(self, tape, idx, val, tan=None):
        self.tape = tape
        self.idx = idx
        self.val = val
        self.tan = tan

    @property
    def shape(self):
        return np.shape(self.val)

    def __add__(self, other):
        return vadd(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return vsub(self, other)

    def __rsub__(self, other):
        return vsub(other, self)

    def __mul__(self, other):
        return vmul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return vdiv(self, other)

    def __rtruediv__(self, other):
        return vdiv(other, self)

    def __pow__(self, n):
        return vpow(self, n)

    def __neg__(self):
        return vmul(self, -1.0)

    def __repr__(self):
        return f"Var(idx={self.idx}, shape={self.shape})"


def _val(x):
    return x.val if isinstance(x, Var) else x


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif tape is not x.tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def _unbroadcast(g, shape):
    """Sum an adjoint back down to the shape of the operand it belongs to."""
    if np.shape(g) == shape:
        return g
    if shape == ():
        return np.sum(g)
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _tan_out(shape, *parts):
    parts = [p for p in parts if p is not None]
    if not parts:
        return None
    t = parts[0]
    for p in parts[1:]:
        t = t + p
    if np.shape(t) != shape:
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), shape)
    return t


def vadd(a, b):
    ta, tb = isinstance(a, Var), isinstance(b, Var)
    if not (ta or tb):
        return a + b
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    val = av + bv
    bwd = []
    if ta:
        sa = np.shape(av)
        bwd.append((a.idx, lambda g: _unbroadcast(g, sa)))
    if tb:
        sb = np.shape(bv)
        bwd.append((b.idx, lambda g: _unbroadcast(g, sb)))
    tan = _tan_out(np.shape(val), a.tan if ta else None, b.tan if tb else None)
    return tape._push("add", val, tuple(bwd), tan)


def vsub(a, b):
    ta, tb = isinstance(a, Var), isinstance(b, Var)
    if not (ta or tb):
        return a - b
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    val = av - bv
    bwd = []
    if ta:
        sa = np.shape(av)
        bwd.append((a.idx, lambda g: _unbroadcast(g, sa)))
    if tb:
        sb = np.shape(bv)
        bwd.append((b.idx, lambda g: _unbroadcast(-g, sb)))
    tb_tan = (-b.tan if b.tan is not None else None) if tb else None
    tan = _tan_out(np.shape(val), a.tan if ta else None, tb_tan)
    return tape._push("sub", val, tuple(bwd), tan)


def vmul(a, b):
    ta, tb = isinstance(a, Var), isinstance(b, Var)
    if not (ta or tb):
        return a * b
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    val = av * bv
    bwd = []
    if ta:
        sa = np.shape(av)
        bwd.append((a.idx, lambda g: _unbroadcast(g * bv, sa)))
    if tb:
        sb = np.shape(bv)
        bwd.append((b.idx, lambda g: _unbroadcast(g * av, sb)))
    parts = []
    if ta and a.tan is not None:
        parts.append(a.tan * bv)
    if tb and b.tan is not None:
        parts.append(b.tan * av)
    tan = _tan_out(np.shape(val), *parts)
    return tape._push("mul", val, tuple(bwd), tan)


def vdiv(a, b):
    ta, tb = isinstance(a, Var), isinstance(b, Var)
    if not (ta or tb):
        return a / b
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    val = av / bv
    bwd = []
    if ta:
        sa = np.shape(av)
        bwd.append((a.idx, lambda g: _unbroadcast(g / bv, sa)))
    if tb:
        sb = np.shape(bv)
        bwd.append((b.idx, lambda g: _unbroadcast(-g * val / bv, sb)))
    parts = []
    if ta and a.tan is not None:
        parts.append(a.tan / bv)
    if tb and b.tan is not None:
        parts.append(-b.tan * val / bv)
    tan = _tan_out(np.shape(val), *parts)
    return tape._push("div", val, tuple(bwd), tan)


def vpow(a, n):
    """a ** n with constant exponent n."""
    if not isinstance(a, Var):
        return a ** n
    n = float(n)
    av = a.val
    val = av ** n
    dval = n * av ** (n - 1.0)
    bwd = ((a.idx, lambda g: g * dval),)
    tan = None if a.tan is None else a.tan * dval
    return a.tape._push("pow", val, bwd, tan)


def _unary(x, fval, name):
    """Build a unary tape op from (value, derivative) computed together."""
    val, dval = fval(x.val)
    bwd = ((x.idx, lambda g: g * dval),)
    tan = None if x.tan is None else x.tan * dval
    return x.tape._push(name, val, bwd, tan)


def _vtanh(x):
    def f(v):
        t = np.tanh(v)
        return t, 1.0 - t * t

    return _unary(x, f, "tanh")


def _vsin(x):
    return _unary(x, lambda v: (np.sin(v), np.cos(v)), "sin")


def _vcos(x):
    return _unary(x, lambda v: (np.cos(v), -np.sin(v)), "cos")


def affine(h, w, b=None):
    """Affine combination ``h @ w + b`` for 2-D operands; any may be a Var."""
    th, tw, tb = isinstance(h, Var), isinstance(w, Var), isinstance(b, Var)
    if not (th or tw or tb):
        out = np.asarray(h) @ np.asarray(w)
        return out if b is None else out + b
    tape = _tape_of(h, w, b)
    hv, wv = np.asarray(_val(h)), np.asarray(_val(w))
    val = hv @ wv
    if b is not None:
        val = val + _val(b)
    bwd = []
    if th:
        bwd.append((h.idx, lambda g: g @ wv.T))
    if tw:
        bwd.append((w.idx, lambda g: hv.T @ g))
    if tb:
        sb = np.shape(_val(b))
        bwd.append((b.idx, lambda g: _unbroadcast(g, sb)))
    parts = []
    if th and h.tan is not None:
        parts.append(h.tan @ wv)
    if tw and w.tan is not None:
        parts.append(hv @ w.tan)
    if tb and b.tan is not None:
        parts.append(b.tan)
    tan = _tan_out(np.shape(val), *parts)
    return tape._push("affine", val, tuple(bwd), tan)


def narrow(x, offset, length):
    """Contiguous slice ``x[offset:offset + length]`` of a 1-D quantity."""
    if not isinstance(x, Var):
        return np.asarray(x)[offset : offset + length]
    xv = x.val
    n = xv.shape[0]
    val = xv[offset : offset + length]

    def back(g):
        out = np.zeros(n)
        out[offset : offset + length] = g
        return out

    tan = None if x.tan is None else x.tan[offset : offset + length]
    return x.tape._push("narrow", val, ((x.idx, back),), tan)


def reshape(x, shape):
    if not isinstance(x, Var):
        return np.reshape(x, shape)
    old = np.shape(x.val)
    val = np.reshape(x.val, shape)
    bwd = ((x.idx, lambda g: np.reshape(g, old)),)
    tan = None if x.tan is None else np.reshape(x.tan, shape)
    return x.tape._push("reshape", val, bwd, tan)


def scatter_add(x, index, size):
    """Length ``size`` vector with ``out[index] += x``; linear in ``x``."""
    if not isinstance(x, Var):
        out = np.zeros(size)
        np.add.at(out, index, x)
        return out
    out = np.zeros(size)
    np.add.at(out, index, x.val)
    bwd = ((x.idx, lambda g: g[index]),)
    tan = None
    if x.tan is not None:
        tan = np.zeros(size)
        np.add.at(tan, index, x.tan)
    return x.tape._push("scatter", out, bwd, tan)


def vsum(x):
    """Sum of all elements, as a scalar."""
    if not isinstance(x, Var):
        return float(np.sum(x))
    xv = x.val
    shape = np.shape(xv)
    val = np.float64(np.sum(xv))
    bwd = ((x.idx, lambda g: np.broadcast_to(g, shape)),)
    tan = None if x.tan is None else np.float64(np.sum(x.tan))
    return x.tape._push("sum", val, bwd, tan)


def vmean(x):
    n = int(np.prod(np.shape(_val(x)))) or 1
    return vsum(x) * (1.0 / n)


# ----------------------------------------------------------------------------
# Second-order forward jets
# ----------------------------------------------------------------------------

# Jet channels use the float 0.0 as an exact symbolic zero so that untouched
# derivative channels cost nothing; None marks a channel that is not tracked
# (second order not requested for that axis).


def _is_zero(x):
    return isinstance(x, float) and x == 0.0


def _jadd(a, b):
    if _is_zero(a):
        return b
    if _is_zero(b):
        return a
    return a + b


def _jmul(a, b):
    if _is_zero(a) or _is_zero(b):
        return 0.0
    return a * b


class Jet2:
    """Value with per-axis first and pure second derivatives.

    ``d1`` and ``d2`` are tuples with one entry per tracked input axis; a
    ``d2`` entry of None means second order is not tracked for that axis.
    Components may be floats, numpy arrays, or tape variables.
    """

    __slots__ = ("val", "d1", "d2")

    __array_ufunc__ = None

    def __init__(self, val, d1=(), d2=()):
        self.val = val
        self.d1 = tuple(d1)
        self.d2 = tuple(d2)
        if len(self.d1) != len(self.d2):
            raise ValueError("d1 and d2 must track the same axes")

    @property
    def naxes(self):
        return len(self.d1)

    def _like(self, value):
        return Jet2(
            value,
            (0.0,) * len(self.d1),
            tuple(None if b is None else 0.0 for b in self.d2),
        )

    def __add__(self, other):
        if not isinstance(other, Jet2):
            other = self._like(other)
        d2 = tuple(
            None if (x is None or y is None) else _jadd(x, y)
            for x, y in zip(self.d2, other.d2)
        )
        return Jet2(
            vadd(self.val, other.val),
            tuple(_jadd(x, y) for x, y in zip(self.d1, other.d1)),
            d2,
        )

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        if not isinstance(other, Jet2):
            other = self._like(other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Jet2):
            # constant factor
            c = other
            d2 = tuple(None if b is None else _jmul(b, c) for b in self.d2)
            return Jet2(vmul(self.val, c), tuple(_jmul(a, c) for a in self.d1), d2)
        u, v = self, other
        d1 = tuple(
            _jadd(_jmul(ua, v.val), _jmul(u.val, va))
            for ua, va in zip(u.d1, v.d1)
        )
        d2 = []
        for ua, ub, va, vb in zip(u.d1, u.d2, v.d1, v.d2):
            if ub is None or vb is None:
                d2.append(None)
            else:
                d2.append(
                    _jadd(
                        _jadd(_jmul(ub, v.val), _jmul(u.val, vb)),
                        _jmul(2.0, _jmul(ua, va)),
                    )
                )
        return Jet2(vmul(u.val, v.val), d1, tuple(d2))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Jet2):
            return self * (1.0 / other)
        u, v = self, other
        q = vdiv(u.val, v.val)
        d1 = []
        d2 = []
        for ua, ub, va, vb in zip(u.d1, u.d2, v.d1, v.d2):
            qa_num = _jadd(ua, -_jmul(q, va)) if not _is_zero(va) else ua
            qa = 0.0 if _is_zero(qa_num) else vdiv(qa_num, v.val)
            d1.append(qa)
            if ub is None or vb is None:
                d2.append(None)
            else:
                num = _jadd(ub, -_jadd(_jmul(2.0, _jmul(qa, va)), _jmul(q, vb)))
                d2.append(0.0 if _is_zero(num) else vdiv(num, v.val))
        return Jet2(q, tuple(d1), tuple(d2))

    def __rtruediv__(self, other):
        return self._like(other) / self

    def __pow__(self, n):
        n = float(n)
        v = self.val
        val = vpow(v, n)
        dv = vmul(vpow(v, n - 1.0), n)
        ddv = vmul(vpow(v, n - 2.0), n * (n - 1.0))
        return _jet_chain(self, val, dv, ddv)

    def __repr__(self):
        return f"Jet2(naxes={self.naxes})"


def _jet_chain(x, fval, dfval, ddfval):
    """Apply the univariate chain rule f(x) given f, f', f'' at x.val."""
    d1 = tuple(_jmul(dfval, a) for a in x.d1)
    d2 = []
    for a, b in zip(x.d1, x.d2):
        if b is None:
            d2.append(None)
        else:
            d2.append(_jadd(_jmul(ddfval, _jmul(a, a)), _jmul(dfval, b)))
    return Jet2(fval, d1, tuple(d2))


def tanh(x):
    if isinstance(x, Jet2):
        t = tanh(x.val)
        s = 1.0 - vmul(t, t)
        return _jet_chain(x, t, s, vmul(vmul(t, s), -2.0))
    if isinstance(x, Var):
        return _vtanh(x)
    return np.tanh(x)


def sin(x):
    if isinstance(x, Jet2):
        s, c = sin(x.val), cos(x.val)
        return _jet_chain(x, s, c, vmul(s, -1.0))
    if isinstance(x, Var):
        return _vsin(x)
    return np.sin(x)


def cos(x):
    if isinstance(x, Jet2):
        s, c = sin(x.val), cos(x.val)
        return _jet_chain(x, c, vmul(s, -1.0), vmul(c, -1.0))
    if isinstance(x, Var):
        return _vcos(x)
    return np.cos(x)


def jet_affine(x, w, b=None):
    """Affine map applied to a jet; derivative channels see the linear part."""
    d1 = tuple(0.0 if _is_zero(a) else affine(a, w) for a in x.d1)
    d2 = tuple(
        None if c is None else (0.0 if _is_zero(c) else affine(c, w))
        for c in x.d2
    )
    return Jet2(affine(x.val, w, b), d1, d2)


def jet_map(fn, x):
    """Apply a linear elementwise-shape transform to every jet channel."""
    d1 = tuple(0.0 if _is_zero(a) else fn(a) for a in x.d1)
    d2 = tuple(None if c is None else (0.0 if _is_zero(c) else fn(c)) for c in x.d2)
    return Jet2(fn(x.val), d1, d2)


def constant_jet(value, orders):
    """Jet for a quantity independent of all tracked axes."""
    return Jet2(
        value,
        (0.0,) * len(orders),
        tuple(0.0 if o >= 2 else None for o in orders),
    )


def coordinate_jets(x, orders):
    """Seed jets for the coordinates of one point.

    ``orders[k]`` is the highest derivative tracked for axis k (1 or 2).
    Returns one jet per coordinate, each tracking all axes.
    """
    d = len(orders)
    jets = []
    for k in range(d):
        d1 = tuple(1.0 if m == k else 0.0 for m in range(d))
        d2 = tuple(0.0 if o >= 2 else None for o in orders)
        jets.append(Jet2(x[k], d1, d2))
    return jets


# ----------------------------------------------------------------------------
# Public entry points
# ----------------------------------------------------------------------------


def grad(objective, theta):
    """Value and reverse-mode gradient of a scalar objective.

    ``objective`` maps a flat parameter Var to a scalar Var; ``theta`` may be
    a numpy vector or a ParamVector, and the gradient is returned with the
    same layout. Raises EvaluationError on non-finite intermediates.
    """
    is_pv = isinstance(theta, ParamVector)
    values = theta.values if is_pv else np.asarray(theta, dtype=np.float64)
    tape = Tape()
    leaf = tape.leaf(values)
    out = objective(leaf)
    if not isinstance(out, Var):
        raise TypeError("objective must return a tape variable")
    value = float(out.val)
    (gvec,) = tape.gradient(out, [leaf])
    if is_pv:
        return value, ParamVector(gvec, theta.layout)
    return value, gvec


def value_and_slope(objective, theta, direction):
    """Objective value and directional derivative along ``direction``.

    Uses tangent propagation through the forward pass; no reverse sweep.
    """
    values = theta.values if isinstance(theta, ParamVector) else np.asarray(theta)
    dvals = (
        direction.values
        if isinstance(direction, ParamVector)
        else np.asarray(direction)
    )
    tape = Tape()
    leaf = tape.leaf(values, tan=dvals)
    out = objective(leaf)
    value = float(out.val)
    if not math.isfinite(value):
        loc = tape.first_nonfinite()
        idx, name = loc if loc is not None else (out.idx, "output")
        raise EvaluationError(
            f"non-finite value in primitive {idx} ({name})",
            op_index=idx,
            op_name=name,
        )
    slope = float(out.tan) if out.tan is not None else 0.0
    return value, slope


def spatial_jet(fn, x, axis):
    """Value and pure first/second derivative of ``fn`` along one input axis.

    ``fn`` receives one jet per coordinate (positionally) and must be built
    from the supported primitives. Other axes are held fixed.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    d = x.shape[0]
    if not 0 <= axis < d:
        raise ValueError(f"axis {axis} out of range for dimension {d}")
    seeds = []
    for k in range(d):
        seeds.append(Jet2(x[k], (1.0 if k == axis else 0.0,), (0.0,)))
    out = fn(*seeds)
    if isinstance(out, Jet2):
        u = float(_val(out.val))
        du = float(_val(out.d1[0])) if not _is_zero(out.d1[0]) else 0.0
        d2u = float(_val(out.d2[0])) if not _is_zero(out.d2[0]) else 0.0
        return u, du, d2u
    return float(out), 0.0, 0.0
