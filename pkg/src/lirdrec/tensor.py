"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Only the operations the recommenders need are provided. Every op records a node
on the active :class:`Tape` when at least one input requires a gradient; with no
active tape the ops simply compute values.

    with Tape() as tape:
        loss = mean(softplus_neg(dot_rows(u, i)))
    tape.backward(loss)
"""
import json
import threading

import numpy as np
from scipy.special import expit

from . import container
from .errors import FormatError, NonFiniteError, ShapeError

DEFAULT_SLOPE = 0.01

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def numpy(self):
        return self.value

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<{type(self).__name__}{label} shape={self.shape} dtype={self.dtype}>"


class Parameter(Tensor):
    """A trainable tensor with a gradient accumulator of the same shape."""

    __slots__ = ()

    def __init__(self, value, name):
        super().__init__(np.array(value, copy=True), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


def constant(value, dtype=None):
    return Tensor(np.asarray(value, dtype=dtype))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op, out, inputs, backward):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops.

    ``checked=True`` raises :class:`NonFiniteError` as soon as any op yields a
    NaN or Inf.
    """

    def __init__(self, checked=False):
        self.nodes = []
        self.checked = checked
        self.visit_order = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, op, out, inputs, backward):
        self.nodes.append(_Node(op, out, inputs, backward))

    def backward(self, root, grad=None):
        """Propagate ``d root`` back through every recorded node, newest first.

        Parameter gradients accumulate; intermediate tensors receive ``.grad``
        so callers can inspect them afterwards.
        """
        seed = np.ones_like(root.value) if grad is None else np.asarray(grad, dtype=root.value.dtype)
        if seed.shape != root.shape:
            raise ShapeError(f"seed gradient shape {seed.shape} != output shape {root.shape}")
        root.grad = seed if root.grad is None else root.grad + seed
        self.visit_order = []
        for idx in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[idx]
            self.visit_order.append(idx)
            g = node.out.grad
            if g is None:
                continue
            needs = tuple(t.requires_grad for t in node.inputs)
            grads = node.backward(g, needs)
            for inp, gi, need in zip(node.inputs, grads, needs):
                if not need or gi is None:
                    continue
                inp.grad = gi if inp.grad is None else inp.grad + gi


def _emit(op, value, inputs, backward):
    tape = active_tape()
    if tape is not None and tape.checked and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs_grad)
    if needs_grad:
        tape.record(op, out, inputs, backward)
    return out


def _require(cond, msg):
    if not cond:
        raise ShapeError(msg)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _require(a.value.ndim == 2 and b.value.ndim == 2 and a.shape[1] == b.shape[0],
             f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def backward(g, needs):
        return (g @ bv.T if needs[0] else None, av.T @ g if needs[1] else None)

    return _emit("matmul", av @ bv, (a, b), backward)


def add_bias(x, b):
    x, b = _as_tensor(x), _as_tensor(b)
    _require(x.value.ndim == 2 and b.value.ndim == 1 and x.shape[1] == b.shape[0],
             f"add_bias: bias {b.shape} does not match {x.shape}")

    def backward(g, needs):
        return (g, g.sum(axis=0) if needs[1] else None)

    return _emit("add_bias", x.value + b.value, (x, b), backward)


def leaky_relu(x, slope=DEFAULT_SLOPE):
    x = _as_tensor(x)
    pos = x.value > 0
    value = np.where(pos, x.value, slope * x.value)

    def backward(g, needs):
        return (np.where(pos, g, slope * g),)

    return _emit("leaky_relu", value, (x,), backward)


def concat_cols(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    _require(len(tensors) > 0, "concat_cols: empty list")
    rows = tensors[0].shape[0]
    _require(all(t.value.ndim == 2 and t.shape[0] == rows for t in tensors),
             f"concat_cols: row counts differ {[t.shape for t in tensors]}")
    edges = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g, needs):
        return tuple(g[:, edges[k]:edges[k + 1]] if needs[k] else None for k in range(len(tensors)))

    return _emit("concat_cols", np.concatenate([t.value for t in tensors], axis=1), tuple(tensors), backward)


def slice_cols(x, start, stop):
    x = _as_tensor(x)
    _require(x.value.ndim == 2 and 0 <= start < stop <= x.shape[1],
             f"slice_cols: [{start}:{stop}] invalid for {x.shape}")

    def backward(g, needs):
        full = np.zeros_like(x.value)
        full[:, start:stop] = g
        return (full,)

    return _emit("slice_cols", x.value[:, start:stop], (x,), backward)


def gather_rows(table, indices):
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    _require(idx.ndim == 1, "gather_rows: indices must be 1-D")
    _require(len(idx) == 0 or (idx.min() >= 0 and idx.max() < table.shape[0]),
             f"gather_rows: index out of range for {table.shape[0]} rows")

    def backward(g, needs):
        full = np.zeros_like(table.value)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("gather_rows", table.value[idx], (table,), backward)


def spmm(sparse, dense):
    """``sparse @ dense`` for a scipy sparse operator that carries no gradient."""
    dense = _as_tensor(dense)
    _require(dense.value.ndim == 2 and sparse.shape[1] == dense.shape[0],
             f"spmm: incompatible shapes {sparse.shape} @ {dense.shape}")

    def backward(g, needs):
        return (np.asarray(sparse.T @ g),)

    return _emit("spmm", np.asarray(sparse @ dense.value), (dense,), backward)


def dot_rows(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _require(a.value.ndim == 2 and a.shape == b.shape, f"dot_rows: shapes {a.shape} vs {b.shape}")
    av, bv = a.value, b.value

    def backward(g, needs):
        g = g[:, None]
        return (g * bv if needs[0] else None, g * av if needs[1] else None)

    return _emit("dot_rows", np.einsum("ij,ij->i", av, bv), (a, b), backward)


def softplus_neg(z):
    """Elementwise ``-ln(sigmoid(z))``, computed as ``softplus(-z)``."""
    z = _as_tensor(z)
    zv = z.value

    def backward(g, needs):
        return (g * (expit(zv) - 1.0),)

    return _emit("softplus_neg", np.logaddexp(0.0, -zv), (z,), backward)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _require(a.shape == b.shape, f"add: shapes {a.shape} vs {b.shape}")
    return _emit("add", a.value + b.value, (a, b), lambda g, needs: (g, g))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _require(a.shape == b.shape, f"sub: shapes {a.shape} vs {b.shape}")
    return _emit("sub", a.value - b.value, (a, b), lambda g, needs: (g, -g))


def scale(x, c):
    x = _as_tensor(x)
    c = float(c)
    return _emit("scale", x.value * x.value.dtype.type(c), (x,), lambda g, needs: (g * c,))


def chunk_scale(x, weights):
    """Multiply each of the B equal-width column chunks of ``x`` by ``weights[:, b]``."""
    x, w = _as_tensor(x), _as_tensor(weights)
    _require(x.value.ndim == 2 and w.value.ndim == 2 and x.shape[0] == w.shape[0],
             f"chunk_scale: shapes {x.shape} vs {w.shape}")
    n, width = x.shape
    nb = w.shape[1]
    _require(width % nb == 0, f"chunk_scale: width {width} not divisible into {nb} chunks")
    xr = x.value.reshape(n, nb, width // nb)
    wv = w.value

    def backward(g, needs):
        gr = g.reshape(n, nb, width // nb)
        gx = (gr * wv[:, :, None]).reshape(n, width) if needs[0] else None
        gw = (gr * xr).sum(axis=2) if needs[1] else None
        return gx, gw

    return _emit("chunk_scale", (xr * wv[:, :, None]).reshape(n, width), (x, w), backward)


def softmax_rows(x):
    x = _as_tensor(x)
    _require(x.value.ndim == 2, "softmax_rows: needs a 2-D tensor")
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g, needs):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit("softmax_rows", s, (x,), backward)


def mean(x):
    x = _as_tensor(x)
    n = x.value.size
    return _emit("mean", np.asarray(x.value.mean()), (x,),
                 lambda g, needs: (np.full_like(x.value, g / n),))


def total(x):
    x = _as_tensor(x)
    return _emit("sum", np.asarray(x.value.sum()), (x,),
                 lambda g, needs: (np.full_like(x.value, g),))


def sum_squares(x):
    x = _as_tensor(x)
    xv = x.value
    return _emit("sum_squares", np.asarray((xv * xv).sum()), (x,),
                 lambda g, needs: (2.0 * g * xv,))


def xavier_uniform(rng, shape, dtype=np.float32):
    """Glorot/Xavier uniform init; for 2-D ``shape`` fan_in = shape[1], fan_out = shape[0]."""
    fan_out, fan_in = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def adam_update(value, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns ``(new_value, new_m, new_v)``."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new = value - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new.astype(value.dtype, copy=False), m, v


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        for p in self.params:
            p.value, self.m[p.name], self.v[p.name] = adam_update(
                p.value, p.grad, self.m[p.name], self.v[p.name], self.t,
                self.lr, self.beta1, self.beta2, self.eps)


def _as_2d(a):
    a = np.asarray(a)
    if a.ndim == 2:
        return a
    return a.reshape(1, -1)


def save_checkpoint(path, params, optimizer=None, extra=None):
    """Write parameters (and Adam moments) as ``FMX1`` records plus a JSON sidecar.

    The sidecar at ``path + ".json"`` lists every record in file order with its
    name and original shape, and carries ``extra`` verbatim.
    """
    entries = []
    with open(path, "wb") as fh:
        for p in params:
            container.write_dense(fh, _as_2d(p.value), p.name)
            entries.append({"name": p.name, "kind": "value", "shape": list(p.shape)})
            if optimizer is not None:
                for kind, store in (("adam_m", optimizer.m), ("adam_v", optimizer.v)):
                    container.write_dense(fh, _as_2d(store[p.name]), f"{p.name}/{kind}")
                    entries.append({"name": p.name, "kind": kind, "shape": list(p.shape)})
    meta = {"records": entries, "extra": extra or {}}
    if optimizer is not None:
        meta["optimizer"] = {"t": optimizer.t, "lr": optimizer.lr, "beta1": optimizer.beta1,
                             "beta2": optimizer.beta2, "eps": optimizer.eps}
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_checkpoint(path):
    """Read a checkpoint written by :func:`save_checkpoint`.

    Returns ``(values, moments, meta)`` where ``values`` maps name -> array and
    ``moments`` maps name -> ``(m, v)`` (empty when no optimizer was saved).
    """
    with open(path + ".json", encoding="utf-8") as fh:
        meta = json.load(fh)
    values, moments = {}, {}
    with open(path, "rb") as fh:
        for entry in meta["records"]:
            rec = container.read_dense(fh)
            if rec is None:
                raise FormatError(f"{path}: fewer records than the sidecar lists")
            arr, thash, _ = rec
            tag = entry["name"] if entry["kind"] == "value" else f"{entry['name']}/{entry['kind']}"
            if thash != container.tag_hash(tag):
                raise FormatError(f"{path}: record tag mismatch for {tag!r}")
            arr = arr.reshape(entry["shape"])
            if entry["kind"] == "value":
                values[entry["name"]] = arr
            else:
                moments.setdefault(entry["name"], {})[entry["kind"]] = arr
    moments = {k: (d["adam_m"], d["adam_v"]) for k, d in moments.items()}
    return values, moments, meta
