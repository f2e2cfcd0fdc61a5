"""Reverse-mode automatic differentiation on numpy arrays.

Tensor-level tape: each recorded node stores the op, the input variables and
whatever the forward pass saved for the adjoint.  Ops are registered once in a
global table so the grad-check CLI can enumerate them and probe every adjoint.

Discrete quantities (traced paths, visibility, nearest-neighbour indices,
fractional-delay taps) never enter the tape; they are passed to ops as keyword
constants.
"""

from __future__ import annotations

import numpy as np


class DiffOp:
    """A differentiable primitive: forward plus adjoint (VJP), optional JVP."""

    def __init__(self, name, forward, adjoint, jvp=None):
        self.name = name
        self.forward = forward    # (*arrays, **consts) -> (out, saved)
        self.adjoint = adjoint    # (cot_out, saved) -> tuple of input cotangents
        self.jvp = jvp            # (tangents, saved) -> out tangent (probe only)

    def __repr__(self):
        return f"DiffOp({self.name})"


_OPS: dict[str, DiffOp] = {}


def register_op(name, forward, adjoint, jvp=None):
    if name in _OPS:
        raise ValueError(f"op {name!r} already registered")
    op = DiffOp(name, forward, adjoint, jvp)
    _OPS[name] = op
    return op


def get_op(name):
    return _OPS[name]


def registered_ops():
    return dict(_OPS)


class Var:
    """A node in the computation graph wrapping a float64 ndarray."""

    __slots__ = ("data", "grad", "name")
    __array_priority__ = 100  # beat ndarray in mixed binary ops

    def __init__(self, data, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Var(shape={self.data.shape}, name={self.name})"

    def __add__(self, other):
        return apply("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return apply("sub", self, other)

    def __rsub__(self, other):
        return apply("sub", other, self)

    def __mul__(self, other):
        return apply("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return apply("div", self, other)

    def __rtruediv__(self, other):
        return apply("div", other, self)

    def __neg__(self):
        return apply("neg", self)

    def __matmul__(self, other):
        return apply("matmul", self, other)

    def __rmatmul__(self, other):
        return apply("matmul", other, self)

    def __getitem__(self, idx):
        return apply("getitem", self, idx=idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", self, shape=shape)

    def sum(self, axis=None):
        return apply("sum", self, axis=axis)


class Tape:
    """Ordered record of op applications; backward replays it once, reversed."""

    def __init__(self):
        self.nodes = []  # (op, input_vars_or_None, out_var, saved)
        self._outputs = set()  # ids of vars produced on this tape

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def backward(self, loss: Var, seed=None):
        """Accumulate d(loss)/d(leaf) into the ``.grad`` of every leaf Var."""
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ValueError("backward expects a scalar loss")
        grads: dict[int, np.ndarray] = {}
        g0 = np.ones_like(loss.data) if seed is None else np.asarray(seed, dtype=np.float64)
        if id(loss) in self._outputs:
            grads[id(loss)] = g0
        else:
            loss.grad = g0 if loss.grad is None else loss.grad + g0
            return
        for op, inputs, out, saved in reversed(self.nodes):
            cot = grads.pop(id(out), None)
            if cot is None:
                continue
            cots = op.adjoint(cot, saved)
            for v, c in zip(inputs, cots):
                if v is None or c is None:
                    continue
                if id(v) in self._outputs:
                    prev = grads.get(id(v))
                    grads[id(v)] = c if prev is None else prev + c
                else:  # leaf (parameter or external input)
                    v.grad = c if v.grad is None else v.grad + c


_TAPES: list[Tape] = []


def current_tape():
    return _TAPES[-1] if _TAPES else None


def value(x):
    """Raw ndarray behind a Var, or the array itself."""
    return x.data if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def apply(name, *args, **consts):
    """Run a registered op; record it when a tape is active and a Var flows in.

    Positional args are differentiable inputs (Var or array-like); keyword
    args are non-differentiated constants.
    """
    op = _OPS[name]
    tape = current_tape()
    has_var = any(isinstance(a, Var) for a in args)
    arrays = [value(a) for a in args]
    out, saved = op.forward(*arrays, **consts)
    if tape is None or not has_var:
        return out
    inputs = [a if isinstance(a, Var) else None for a in args]
    out_var = Var(out)
    tape.nodes.append((op, inputs, out_var, saved))
    tape._outputs.add(id(out_var))
    return out_var


def _unbroadcast(g, shape):
    """Sum gradient g down to the given (possibly broadcast) input shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural primitives
# ---------------------------------------------------------------------------

register_op(
    "add",
    lambda a, b: (a + b, (a.shape, b.shape)),
    lambda g, s: (_unbroadcast(g, s[0]), _unbroadcast(g, s[1])),
    jvp=lambda t, s: _t(t[0], s[0]) + _t(t[1], s[1]),
)

register_op(
    "sub",
    lambda a, b: (a - b, (a.shape, b.shape)),
    lambda g, s: (_unbroadcast(g, s[0]), _unbroadcast(-g, s[1])),
    jvp=lambda t, s: _t(t[0], s[0]) - _t(t[1], s[1]),
)

register_op(
    "mul",
    lambda a, b: (a * b, (a, b)),
    lambda g, s: (_unbroadcast(g * s[1], s[0].shape), _unbroadcast(g * s[0], s[1].shape)),
    jvp=lambda t, s: _t(t[0], s[0].shape) * s[1] + s[0] * _t(t[1], s[1].shape),
)

register_op(
    "div",
    lambda a, b: (a / b, (a, b)),
    lambda g, s: (
        _unbroadcast(g / s[1], s[0].shape),
        _unbroadcast(-g * s[0] / (s[1] ** 2), s[1].shape),
    ),
    jvp=lambda t, s: _t(t[0], s[0].shape) / s[1] - s[0] * _t(t[1], s[1].shape) / s[1] ** 2,
)

register_op(
    "neg",
    lambda a: (-a, None),
    lambda g, s: (-g,),
    jvp=lambda t, s: -t[0],
)

register_op(
    "exp",
    lambda a: (np.exp(a), np.exp(a)),
    lambda g, s: (g * s,),
    jvp=lambda t, s: t[0] * s,
)

register_op(
    "log",
    lambda a: (np.log(a), a),
    lambda g, s: (g / s,),
    jvp=lambda t, s: t[0] / s,
)

register_op(
    "sqrt",
    lambda a: (np.sqrt(a), np.sqrt(a)),
    lambda g, s: (g / (2.0 * s),),
    jvp=lambda t, s: t[0] / (2.0 * s),
)

register_op(
    "sin",
    lambda a: (np.sin(a), a),
    lambda g, s: (g * np.cos(s),),
    jvp=lambda t, s: t[0] * np.cos(s),
)

register_op(
    "cos",
    lambda a: (np.cos(a), a),
    lambda g, s: (-g * np.sin(s),),
    jvp=lambda t, s: -t[0] * np.sin(s),
)

register_op(
    "tanh",
    lambda a: (np.tanh(a), np.tanh(a)),
    lambda g, s: (g * (1.0 - s**2),),
    jvp=lambda t, s: t[0] * (1.0 - s**2),
)


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


register_op(
    "sigmoid",
    lambda a: ((lambda y: (y, y))(_sigmoid(a))),
    lambda g, s: (g * s * (1.0 - s),),
    jvp=lambda t, s: t[0] * s * (1.0 - s),
)

register_op(
    "relu",
    lambda a: (np.maximum(a, 0.0), a > 0),
    lambda g, s: (g * s,),
    jvp=lambda t, s: t[0] * s,
)

register_op(
    "abs",
    lambda a: (np.abs(a), np.sign(a)),
    lambda g, s: (g * s,),
    jvp=lambda t, s: t[0] * s,
)

register_op(
    "square",
    lambda a: (a * a, a),
    lambda g, s: (2.0 * g * s,),
    jvp=lambda t, s: 2.0 * t[0] * s,
)


def _floor_fwd(a, floor):
    out = np.maximum(a, floor)
    return out, a >= floor


register_op(
    "clip_min",
    _floor_fwd,
    lambda g, s: (g * s,),
    jvp=lambda t, s: t[0] * s,
)


def _t(t, shape):
    """Broadcast a tangent (or zeros for None) to the op's working shape."""
    if t is None:
        return np.zeros(shape)
    return t


# ---------------------------------------------------------------------------
# reductions / shape ops
# ---------------------------------------------------------------------------


def _sum_fwd(a, axis=None, keepdims=False):
    return a.sum(axis=axis, keepdims=keepdims), (a.shape, axis, keepdims)


def _sum_adj(g, saved):
    shape, axis, keepdims = saved
    if axis is None:
        return (np.broadcast_to(g, shape).copy(),)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return (np.broadcast_to(g, shape).copy(),)


register_op("sum", _sum_fwd, _sum_adj,
            jvp=lambda t, s: t[0].sum(axis=s[1], keepdims=s[2]))


def _mean_fwd(a, axis=None):
    return a.mean(axis=axis), (a.shape, axis, a.size if axis is None else a.shape[axis])


def _mean_adj(g, saved):
    shape, axis, n = saved
    if axis is None:
        return (np.broadcast_to(g / n, shape).copy(),)
    g = np.expand_dims(g, axis % len(shape))
    return (np.broadcast_to(g / n, shape).copy(),)


register_op("mean", _mean_fwd, _mean_adj,
            jvp=lambda t, s: t[0].mean(axis=s[1]))

register_op(
    "reshape",
    lambda a, shape: (a.reshape(shape), (a.shape, shape)),
    lambda g, s: (g.reshape(s[0]),),
    jvp=lambda t, s: t[0].reshape(s[1]),
)


def _getitem_fwd(a, idx):
    return a[idx], (a.shape, idx)


def _getitem_adj(g, saved):
    shape, idx = saved
    out = np.zeros(shape)
    np.add.at(out, idx, g)
    return (out,)


register_op("getitem", _getitem_fwd, _getitem_adj,
            jvp=lambda t, s: t[0][s[1]])


def _concat_fwd(*arrays, axis=0):
    return np.concatenate(arrays, axis=axis), (axis, [a.shape[axis] for a in arrays])


def _concat_adj(g, saved):
    axis, sizes = saved
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


register_op("concat", _concat_fwd, _concat_adj,
            jvp=lambda t, s: np.concatenate(t, axis=s[0]))


# ---------------------------------------------------------------------------
# linear algebra / attention
# ---------------------------------------------------------------------------


def _matmul_fwd(a, b):
    return a @ b, (a, b)


def _matmul_adj(g, saved):
    a, b = saved
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    if b.ndim == 1:  # (..., n, m) @ (m,) -> (..., n)
        ga = np.einsum("...n,m->...nm", g, b)
        gb = np.einsum("...nm,...n->m", a, g)
        return _unbroadcast(ga, a.shape), gb
    if a.ndim == 1:  # (m,) @ (..., m, k) -> (..., k)
        ga = np.einsum("...k,...mk->m", g, b)
        gb = np.einsum("m,...k->...mk", a, g)
        return ga, _unbroadcast(gb, b.shape)
    ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
    gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
    return ga, gb


register_op(
    "matmul",
    _matmul_fwd,
    _matmul_adj,
    jvp=lambda t, s: _t(t[0], s[0].shape) @ s[1] + s[0] @ _t(t[1], s[1].shape),
)


def _softmax(a, axis):
    m = a.max(axis=axis, keepdims=True)
    e = np.exp(a - m)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_fwd(a, axis=-1):
    y = _softmax(a, axis)
    return y, (y, axis)


def _softmax_adj(g, saved):
    y, axis = saved
    dot = (g * y).sum(axis=axis, keepdims=True)
    return (y * (g - dot),)


def _softmax_jvp(t, saved):
    y, axis = saved
    dot = (t[0] * y).sum(axis=axis, keepdims=True)
    return y * (t[0] - dot)


register_op("softmax", _softmax_fwd, _softmax_adj, jvp=_softmax_jvp)


def _segment_sum_fwd(a, seg_ids=None, n_segments=None):
    out = np.zeros((n_segments,) + a.shape[1:])
    np.add.at(out, seg_ids, a)
    return out, (seg_ids, a.shape, n_segments)


def _segment_sum_adj(g, saved):
    seg_ids, shape, _ = saved
    return (g[seg_ids],)


def _segment_sum_jvp(t, saved):
    seg_ids, shape, n_segments = saved
    out = np.zeros((n_segments,) + shape[1:])
    np.add.at(out, seg_ids, t[0])
    return out


register_op("segment_sum", _segment_sum_fwd, _segment_sum_adj, jvp=_segment_sum_jvp)


def _revcumsum_fwd(a, axis=-1):
    out = np.flip(np.cumsum(np.flip(a, axis=axis), axis=axis), axis=axis)
    return out, axis


def _revcumsum_adj(g, axis):
    # adjoint of reverse cumsum is forward cumsum
    return (np.cumsum(g, axis=axis),)


register_op("revcumsum", _revcumsum_fwd, _revcumsum_adj,
            jvp=lambda t, s: np.flip(np.cumsum(np.flip(t[0], axis=s), axis=s), axis=s))


# ---------------------------------------------------------------------------
# convenience wrappers
# ---------------------------------------------------------------------------


def exp(x):
    return apply("exp", x)


def log(x):
    return apply("log", x)


def sin(x):
    return apply("sin", x)


def cos(x):
    return apply("cos", x)


def tanh(x):
    return apply("tanh", x)


def sigmoid(x):
    return apply("sigmoid", x)


def relu(x):
    return apply("relu", x)


def absolute(x):
    return apply("abs", x)


def square(x):
    return apply("square", x)


def sqrt(x):
    return apply("sqrt", x)


def clip_min(x, floor):
    return apply("clip_min", x, floor=floor)


def matmul(a, b):
    return apply("matmul", a, b)


def softmax(a, axis=-1):
    return apply("softmax", a, axis=axis)


def concat(arrays, axis=0):
    return apply("concat", *arrays, axis=axis)


def mean(a, axis=None):
    return apply("mean", a, axis=axis)


def asum(a, axis=None, keepdims=False):
    return apply("sum", a, axis=axis, keepdims=keepdims)


def segment_sum(a, seg_ids, n_segments):
    return apply("segment_sum", a, seg_ids=np.asarray(seg_ids), n_segments=int(n_segments))


def revcumsum(a, axis=-1):
    return apply("revcumsum", a, axis=axis)


# ---------------------------------------------------------------------------
# verification harness
# ---------------------------------------------------------------------------


def grad_check(f, params, eps=1e-4, n_coords=64, rng=None):
    """Max relative error of tape gradients vs central finite differences.

    ``f()`` evaluates a scalar taped function of the Vars in ``params``
    (dict name -> Var).  A random subset of coordinates per parameter is
    probed.  ``eps`` may be a sequence of step sizes; each coordinate then
    scores its best step, which handles objectives whose curvature varies by
    orders of magnitude across coordinates (no single step size is both
    below the curvature error and above the round-off noise for all of
    them, but a wrong gradient fails at every step size).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    eps_list = [float(eps)] if np.isscalar(eps) else [float(e) for e in eps]
    for v in params.values():
        v.grad = None
    with Tape() as tape:
        loss = f()
    if not np.isfinite(value(loss)).all():
        raise FloatingPointError("non-finite loss in grad_check")
    tape.backward(loss)
    worst = 0.0
    for name, v in params.items():
        g = v.grad if v.grad is not None else np.zeros_like(v.data)
        flat = v.data.reshape(-1)
        n = min(n_coords, flat.size)
        idxs = rng.choice(flat.size, size=n, replace=False)
        for i in idxs:
            orig = flat[i]
            gi = g.reshape(-1)[i]
            best = np.inf
            for e in eps_list:
                flat[i] = orig + e
                fp = float(value(f()))
                flat[i] = orig - e
                fm = float(value(f()))
                flat[i] = orig
                fd = (fp - fm) / (2.0 * e)
                denom = max(abs(fd), abs(gi), 1e-6)
                best = min(best, abs(fd - gi) / denom)
            worst = max(worst, best)
    return worst


def adjoint_probe(op_name, arg_shapes, consts=None, rng=None, n_probes=4):
    """Check <J dx, dy> == <dx, adj(dy)> for a registered op with a JVP.

    Returns the max relative error over random probes; ops without a JVP
    raise ValueError (they are validated through grad_check instead).
    """
    op = _OPS[op_name]
    if op.jvp is None:
        raise ValueError(f"op {op_name!r} has no JVP; use grad_check")
    rng = np.random.default_rng(0) if rng is None else rng
    consts = consts or {}
    worst = 0.0
    for _ in range(n_probes):
        args = [rng.standard_normal(s) for s in arg_shapes]
        if op_name in ("log", "sqrt"):
            args = [np.abs(a) + 0.5 for a in args]
        out, saved = op.forward(*args, **consts)
        dxs = [rng.standard_normal(s) for s in arg_shapes]
        dy = rng.standard_normal(np.shape(out))
        jdx = op.jvp(dxs, saved)
        cots = op.adjoint(dy, saved)
        lhs = float(np.sum(jdx * dy))
        rhs = float(sum(np.sum(dx * c) for dx, c in zip(dxs, cots) if c is not None))
        denom = max(abs(lhs), abs(rhs), 1e-12)
        worst = max(worst, abs(lhs - rhs) / denom)
    return worst
