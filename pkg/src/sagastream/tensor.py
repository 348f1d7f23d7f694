"""Dense tensors with a reverse-mode autodiff tape.

Every numeric value the engine touches is a ``Tensor``: an immutable,
contiguous numpy buffer plus a unique id. Operations optionally record
onto a ``Tape``; replaying the tape backward yields gradients for every
watched tensor. The op vocabulary is exactly what the vertex/edge
programs need: elementwise arithmetic and activations, matmul, axis
reductions, row gather/scatter, segment reductions, and a fused
softmax-cross-entropy loss head.
"""

import itertools

import numpy as np

from .errors import NumericError, ShapeError

# Strict mode surfaces NaN/Inf immediately instead of letting it propagate.
strict = True

_ids = itertools.count()


class Tensor:
    """Immutable dense array with shape metadata and a tape id."""

    __slots__ = ("data", "tid")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        self.data = arr
        self.tid = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def nbytes(self):
        return self.data.nbytes

    def to_numpy(self):
        return np.array(self.data)

    def __repr__(self):
        return f"Tensor(id={self.tid}, shape={self.shape}, dtype={self.data.dtype})"


def tensor(data, dtype=np.float64):
    return Tensor(data, dtype=dtype)


def zeros(shape, dtype=np.float64):
    return Tensor(np.zeros(shape, dtype=dtype))


class Tape:
    """Ordered record of executed operations for reverse-mode autodiff.

    A tape is single-owner: record on it from one thread only. Watched
    tensors (parameters, inputs) always appear in the gradient map, with
    zeros if the backward sweep never reaches them.
    """

    def __init__(self):
        self._entries = []  # (out_tid, in_tids, backward_fn)
        self._watched = {}  # tid -> Tensor

    def watch(self, t):
        self._watched[t.tid] = t

    def record(self, out, inputs, backward_fn):
        self._entries.append((out.tid, tuple(i.tid for i in inputs), backward_fn))

    def __len__(self):
        return len(self._entries)


def backward(tape, seed):
    """Run the tape in reverse, seeding the final output with ``seed``.

    Returns a map tid -> gradient ndarray covering every watched tensor
    and every tensor the sweep visited.
    """
    if not tape._entries:
        raise ShapeError("cannot run backward on an empty tape")
    out_tid = tape._entries[-1][0]
    final_shape = _shape_of_entry(tape, out_tid)
    if tuple(seed.shape) != final_shape:
        raise ShapeError(
            f"seed shape {tuple(seed.shape)} does not match tape output {final_shape}"
        )
    grads = {out_tid: np.array(seed.data, dtype=seed.dtype)}
    for entry_out, in_tids, backward_fn in reversed(tape._entries):
        g = grads.get(entry_out)
        if g is None:
            continue
        partials = backward_fn(g)
        for tid, part in zip(in_tids, partials):
            if part is None:
                continue
            if tid in grads:
                grads[tid] = grads[tid] + part
            else:
                grads[tid] = part
    for tid, t in tape._watched.items():
        if tid not in grads:
            grads[tid] = np.zeros(t.shape, dtype=t.dtype)
    return grads


def _shape_of_entry(tape, out_tid):
    # The final op's output shape is recoverable from its backward closure
    # metadata; we stash it on the function object when recording.
    for entry_out, _, fn in reversed(tape._entries):
        if entry_out == out_tid:
            return fn.out_shape
    raise ShapeError("tape output not found")


_instrument = None


class MatmulCounter:
    """Counts matmul row applications, bucketed by an externally set stage tag.

    One application = one (row vector) x (matrix) product, so a batched
    [n,k]x[k,m] matmul counts n.
    """

    def __init__(self):
        self.stage = None
        self.counts = {}

    def add(self, rows):
        key = self.stage or "untagged"
        self.counts[key] = self.counts.get(key, 0) + rows

    def total(self):
        return sum(self.counts.values())


def instrument_matmuls(counter):
    """Install (or clear, with None) the global matmul application counter."""
    global _instrument
    _instrument = counter


def _finalize(arr, op, inputs, tape, backward_fn):
    if strict and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by '{op}'")
    out = Tensor(arr)
    if tape is not None:
        backward_fn.out_shape = tuple(arr.shape)
        tape.record(out, inputs, backward_fn)
    return out


def _broadcast_kind(sa, sb):
    """Classify a binary broadcast: equal | a_lead | b_lead | a_row | b_row.

    Allowed forms: identical shapes; a parameter-like operand whose shape
    equals the other's trailing dims (broadcast along the leading axis);
    a per-row scalar column [n,1] against [n,m].
    """
    if sa == sb:
        return "equal"
    if len(sb) < len(sa) and sb == sa[len(sa) - len(sb):]:
        return "b_lead"
    if len(sa) < len(sb) and sa == sb[len(sb) - len(sa):]:
        return "a_lead"
    if len(sa) == 2 and len(sb) == 2 and sb == (sa[0], 1):
        return "b_row"
    if len(sa) == 2 and len(sb) == 2 and sa == (sb[0], 1):
        return "a_row"
    raise ShapeError(f"shapes {sa} and {sb} are not broadcast-compatible")


def _reduce_to(grad, shape, kind, side):
    """Sum a broadcast gradient back down to the operand's shape."""
    if kind == "equal" or (kind == "b_lead" and side == "a") or \
       (kind == "a_lead" and side == "b") or \
       (kind == "b_row" and side == "a") or (kind == "a_row" and side == "b"):
        return grad
    if kind in ("a_lead", "b_lead"):
        extra = grad.ndim - len(shape)
        return grad.sum(axis=tuple(range(extra)))
    # row-scalar side
    return grad.sum(axis=1, keepdims=True)


_UNARY = {
    "sigmoid": lambda x: 1.0 / (1.0 + np.exp(-x)),
    "tanh": np.tanh,
    "relu": lambda x: np.maximum(x, 0.0),
}

_BINARY = {"add", "sub", "mul", "div", "max"}


def elementwise(op, a, b=None, tape=None):
    """Dispatch an elementwise op by name; see the named wrappers below."""
    if op in _UNARY:
        if b is not None:
            raise ShapeError(f"'{op}' is unary")
        return _unary(op, a, tape)
    if op in _BINARY:
        if b is None:
            raise ShapeError(f"'{op}' needs two operands")
        return _binary(op, a, b, tape)
    raise ShapeError(f"unknown elementwise op '{op}'")


def _unary(op, a, tape):
    x = a.data
    y = _UNARY[op](x)

    def bwd(g, x=x, y=y, op=op):
        if op == "sigmoid":
            return (g * y * (1.0 - y),)
        if op == "tanh":
            return (g * (1.0 - y * y),)
        # relu: gradient at 0 is defined as 0
        return (g * (x > 0.0),)

    return _finalize(y, op, (a,), tape, bwd)


def _binary(op, a, b, tape):
    kind = _broadcast_kind(a.shape, b.shape)
    x, w = a.data, b.data
    if op == "add":
        y = x + w
    elif op == "sub":
        y = x - w
    elif op == "mul":
        y = x * w
    elif op == "div":
        if strict and np.any(w == 0.0):
            raise NumericError("division by zero")
        y = x / w
    else:  # max: ties route the gradient to the first operand
        y = np.maximum(x, w)

    def bwd(g, x=x, w=w, op=op, kind=kind, sa=a.shape, sb=b.shape):
        if op == "add":
            ga, gb = g, g
        elif op == "sub":
            ga, gb = g, -g
        elif op == "mul":
            ga, gb = g * w, g * x
        elif op == "div":
            ga, gb = g / w, -g * x / (w * w)
        else:
            mask = x >= w
            ga, gb = g * mask, g * ~mask
        return (_reduce_to(ga, sa, kind, "a"), _reduce_to(gb, sb, kind, "b"))

    return _finalize(y, op, (a, b), tape, bwd)


def add(a, b, tape=None):
    return _binary("add", a, b, tape)


def sub(a, b, tape=None):
    return _binary("sub", a, b, tape)


def mul(a, b, tape=None):
    return _binary("mul", a, b, tape)


def div(a, b, tape=None):
    return _binary("div", a, b, tape)


def maximum(a, b, tape=None):
    return _binary("max", a, b, tape)


def sigmoid(a, tape=None):
    return _unary("sigmoid", a, tape)


def tanh(a, tape=None):
    return _unary("tanh", a, tape)


def relu(a, tape=None):
    return _unary("relu", a, tape)


def matmul(a, b, tape=None):
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    x, w = a.data, b.data
    y = x @ w
    if _instrument is not None:
        _instrument.add(x.shape[0])

    def bwd(g, x=x, w=w):
        return (g @ w.T, x.T @ g)

    return _finalize(y, "matmul", (a, b), tape, bwd)


def typed_matmul(a, labels, mats, tape=None):
    """Row-wise matmul with a per-row parameter matrix chosen by label.

    ``labels`` is an integer vector (len = rows of a); ``mats`` is the
    ordered list of candidate matrices, one per label value.
    """
    if len(a.shape) != 2:
        raise ShapeError("typed_matmul needs a 2-D left operand")
    lab = np.asarray(labels).reshape(-1).astype(np.int64)
    if lab.shape[0] != a.shape[0]:
        raise ShapeError("label count does not match row count")
    if lab.size and (lab.min() < 0 or lab.max() >= len(mats)):
        raise ShapeError("edge label out of range for the parameter family")
    for m in mats:
        if m.shape != mats[0].shape or m.shape[0] != a.shape[1]:
            raise ShapeError("parameter family shapes are inconsistent")
    x = a.data
    out = np.zeros((x.shape[0], mats[0].shape[1]), dtype=x.dtype)
    groups = [np.nonzero(lab == t)[0] for t in range(len(mats))]
    for t, rows in enumerate(groups):
        if rows.size:
            out[rows] = x[rows] @ mats[t].data
            if _instrument is not None:
                _instrument.add(rows.size)

    def bwd(g, x=x, groups=groups, mats=mats):
        gx = np.zeros_like(x)
        gms = [np.zeros(m.shape, dtype=x.dtype) for m in mats]
        for t, rows in enumerate(groups):
            if rows.size:
                gx[rows] = g[rows] @ mats[t].data.T
                gms[t] = x[rows].T @ g[rows]
        return (gx, None) + tuple(gms)

    return _finalize(out, "typed_matmul", (a, _as_tensor(lab)) + tuple(mats), tape, bwd)


def select_rows_by_label(labels, options, tape=None):
    """out[i] = options[labels[i]][i]; routes gradients to the chosen option."""
    lab = np.asarray(labels).reshape(-1).astype(np.int64)
    base = options[0]
    for o in options:
        if o.shape != base.shape:
            raise ShapeError("select options must share a shape")
    if lab.shape[0] != base.shape[0]:
        raise ShapeError("label count does not match row count")
    if lab.size and (lab.min() < 0 or lab.max() >= len(options)):
        raise ShapeError("edge label out of range for the select options")
    out = np.zeros(base.shape, dtype=base.dtype)
    groups = [np.nonzero(lab == t)[0] for t in range(len(options))]
    for t, rows in enumerate(groups):
        if rows.size:
            out[rows] = options[t].data[rows]

    def bwd(g, groups=groups, n=len(options), shape=base.shape, dt=base.dtype):
        outs = [None]
        for t in range(n):
            go = np.zeros(shape, dtype=dt)
            rows = groups[t]
            if rows.size:
                go[rows] = g[rows]
            outs.append(go)
        return tuple(outs)

    return _finalize(out, "select_rows", (_as_tensor(lab),) + tuple(options), tape, bwd)


def reduce(op, a, axis, tape=None):
    if axis < 0 or axis >= len(a.shape):
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
    x = a.data
    if op == "sum":
        y = x.sum(axis=axis)

        def bwd(g, axis=axis, shape=a.shape):
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    elif op == "max":
        if x.shape[axis] == 0:
            raise ShapeError("reduce max over an empty axis")
        y = x.max(axis=axis)
        amax = np.expand_dims(x.argmax(axis=axis), axis)

        def bwd(g, axis=axis, shape=a.shape, amax=amax):
            out = np.zeros(shape, dtype=g.dtype)
            np.put_along_axis(out, amax, np.expand_dims(g, axis), axis)
            return (out,)

    else:
        raise ShapeError(f"unknown reduce op '{op}'")
    return _finalize(y, f"reduce_{op}", (a,), tape, bwd)


def reshape(a, shape, tape=None):
    y = a.data.reshape(shape)

    def bwd(g, shape=a.shape):
        return (g.reshape(shape),)

    return _finalize(y, "reshape", (a,), tape, bwd)


def take_rows(a, idx, tape=None):
    """y[k] = a[idx[k]]; backward scatter-adds into the source rows."""
    indices = np.asarray(idx, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= a.shape[0]):
        raise ShapeError("row index out of range")
    y = a.data[indices]

    def bwd(g, indices=indices, shape=a.shape):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, indices, g)
        return (out,)

    return _finalize(y, "take_rows", (a,), tape, bwd)


def segment_sum(a, segment_ids, num_segments, tape=None):
    """Sum rows by segment id (rows may arrive in any order)."""
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape[0] != a.shape[0]:
        raise ShapeError("segment id count does not match row count")
    out = np.zeros((num_segments,) + a.shape[1:], dtype=a.dtype)
    np.add.at(out, seg, a.data)

    def bwd(g, seg=seg):
        return (g[seg],)

    return _finalize(out, "segment_sum", (a,), tape, bwd)


def segment_max(a, segment_ids, num_segments, empty_fill=0.0, tape=None):
    """Elementwise max of rows by segment; empty segments get ``empty_fill``.

    Gradient routes each output element to the first row attaining the max
    (lowest row index), and is zero for empty segments.
    """
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape[0] != a.shape[0]:
        raise ShapeError("segment id count does not match row count")
    x = a.data
    out = np.full((num_segments,) + a.shape[1:], -np.inf, dtype=a.dtype)
    arg = np.full((num_segments,) + a.shape[1:], -1, dtype=np.int64)
    for k in range(x.shape[0]):
        s = seg[k]
        win = x[k] > out[s]
        out[s] = np.where(win, x[k], out[s])
        arg[s] = np.where(win, k, arg[s])
    empty = arg[..., 0] < 0 if arg.ndim > 1 else arg < 0
    out[empty] = empty_fill

    def bwd(g, arg=arg, nrows=x.shape[0], shape=x.shape):
        gx = np.zeros(shape, dtype=g.dtype)
        valid = arg >= 0
        rows = arg[valid]
        if arg.ndim == 2:
            cols = np.nonzero(valid)[1]
            np.add.at(gx, (rows, cols), g[valid])
        else:
            np.add.at(gx, rows, g[valid])
        return (gx,)

    return _finalize(out, "segment_max", (a,), tape, bwd)


def softmax_cross_entropy(logits, labels, tape=None):
    """Mean softmax cross-entropy over rows; labels are integer classes."""
    lab = np.asarray(labels, dtype=np.int64)
    if len(logits.shape) != 2 or lab.shape[0] != logits.shape[0]:
        raise ShapeError("logits must be [n, classes] with one label per row")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    denom = ez.sum(axis=1, keepdims=True)
    p = ez / denom
    n = z.shape[0]
    logp = (z - zmax) - np.log(denom)
    loss = -logp[np.arange(n), lab].mean()

    def bwd(g, p=p, lab=lab, n=n):
        gz = p.copy()
        gz[np.arange(n), lab] -= 1.0
        return (g * gz / n,)

    return _finalize(np.asarray(loss), "softmax_xent", (logits,), tape, bwd)


def _as_tensor(arr):
    t = Tensor.__new__(Tensor)
    a = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
    a.flags.writeable = False
    t.data = a
    t.tid = next(_ids)
    return t
