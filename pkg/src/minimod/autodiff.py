"""Minimal reverse-mode autodiff over dense numpy tensors.

Ops record backward closures onto an explicit Tape (a Wengert list). Running
``backward`` replays the tape in reverse, accumulating gradients only into
tensors that require them, so frozen parameters cost neither memory nor
compute on the backward pass. float64 is the default dtype; float32 is a
per-model switch for throughput.
"""

from __future__ import annotations

import numpy as np

from . import _kernels as K

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Shape-incompatible inputs to a primitive, naming the op and shapes."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense array plus grad bookkeeping. Data is always a numpy array."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_grad_borrowed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._grad_borrowed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}, name={self.name})"


class Parameter:
    """Named, optionally trainable tensor. Freezing clears requires_grad so
    the backward pass never touches it."""

    __slots__ = ("tensor", "name")

    def __init__(self, data, name: str, trainable: bool = True):
        self.tensor = Tensor(np.asarray(data), requires_grad=trainable, name=name)
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value):
        self.tensor.data = np.asarray(value)

    @property
    def trainable(self) -> bool:
        return self.tensor.requires_grad

    @trainable.setter
    def trainable(self, flag: bool):
        self.tensor.requires_grad = bool(flag)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape}, trainable={self.trainable})"


class Tape:
    """Ordered record of executed primitives; replayed once, in reverse."""

    __slots__ = ("_nodes", "_consumed")

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def record(self, out: Tensor, inputs: tuple, backward_fn):
        self._nodes.append((out, inputs, backward_fn))

    def __len__(self):
        return len(self._nodes)


_ACTIVE_TAPE: Tape | None = None


class trace:
    """Context manager installing a tape; ops outside any trace run grad-free."""

    __slots__ = ("tape", "_prev")

    def __init__(self, tape: Tape | None = None):
        self.tape = tape if tape is not None else Tape()

    def __enter__(self) -> Tape:
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self.tape
        return self.tape

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _c(a: np.ndarray) -> np.ndarray:
    return a if a.flags.c_contiguous else np.ascontiguousarray(a)


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` along broadcast axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accum(t: Tensor, g: np.ndarray):
    # First contribution adopts the array (possibly shared/borrowed); a second
    # contribution must not mutate it, so it allocates a fresh sum once.
    if t.grad is None:
        t.grad = g
        t._grad_borrowed = True
    elif t._grad_borrowed:
        t.grad = t.grad + g
        t._grad_borrowed = False
    else:
        t.grad += g


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Replay `tape` in reverse from scalar `loss`.

    Returns gradients keyed by parameter name for every named trainable
    tensor the forward pass touched. Frozen or untouched parameters have no
    entry. A tape can be consumed only once.
    """
    if tape._consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError("backward", loss.data.shape)
    tape._consumed = True
    loss.grad = np.ones(loss.data.shape, dtype=loss.data.dtype)
    loss._grad_borrowed = False
    named: dict[str, Tensor] = {}
    for out, inputs, backward_fn in reversed(tape._nodes):
        g = out.grad
        if g is None:
            continue
        backward_fn(g)
        out.grad = None  # free activation grads as we go
        for t in inputs:
            if t.requires_grad and t.name is not None:
                named[t.name] = t
    return {name: t.grad for name, t in named.items() if t.grad is not None}


def clear_grads(params) -> None:
    """Drop leaf gradients between steps (params: iterable of Parameter)."""
    for p in params:
        p.tensor.grad = None
        p.tensor._grad_borrowed = False


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b. Supports (..., m, k) @ (k, n) and batched (..., m, k) @ (..., k, n)
    with identical batch dims; no implicit batch broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError("matmul", a.data.shape, b.data.shape)
    if b.data.ndim > 2 and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError("matmul", a.data.shape, b.data.shape)
    out = Tensor(a.data @ b.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                ad = a.data.reshape(-1, a.data.shape[-1])
                _accum(b, ad.T @ g.reshape(-1, g.shape[-1]))
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
                _accum(b, _unbroadcast(gb, b.data.shape))

    return _record(out, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add with numpy broadcasting (covers bias add and masks)."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ShapeError("add", a.data.shape, b.data.shape) from None

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with broadcasting (dropout masks, loss weighting)."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ShapeError("mul", a.data.shape, b.data.shape) from None

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data * c)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * c)

    return _record(out, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.data.shape))

    return _record(out, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    inv = np.argsort(axes)

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.ascontiguousarray(g.transpose(inv)))

    return _record(out, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    a = _as_tensor(a)
    x = _c(a.data)
    inner = K.gelu_inner(x)
    th = np.tanh(inner, out=inner)
    out = Tensor(K.gelu_combine(x, th))

    def bwd(g):
        if a.requires_grad:
            _accum(a, K.gelu_backward(x, th, _c(g)))

    return _record(out, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * (1.0 - y * y))

    return _record(out, (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    shape = a.data.shape
    h = shape[-1]
    if gain.data.shape != (h,) or bias.data.shape != (h,):
        raise ShapeError("layer_norm", shape, gain.data.shape, bias.data.shape)
    x2 = _c(a.data).reshape(-1, h)
    out2, xhat, inv = K.layer_norm_forward(x2, gain.data, bias.data, eps)
    out = Tensor(out2.reshape(shape))

    def bwd(g):
        gx, dgain, dbias = K.layer_norm_backward(xhat, inv, gain.data,
                                                 _c(g).reshape(-1, h))
        if a.requires_grad:
            _accum(a, gx.reshape(shape))
        if gain.requires_grad:
            _accum(gain, dgain)
        if bias.requires_grad:
            _accum(bias, dbias)

    return _record(out, (a, gain, bias), bwd)


def softmax(a: Tensor) -> Tensor:
    """Stable softmax over the last axis."""
    a = _as_tensor(a)
    shape = a.data.shape
    z = K.rows_sub_max(_c(a.data).reshape(-1, shape[-1]))
    np.exp(z, out=z)
    K.rows_normalize(z)
    out = Tensor(z.reshape(shape))

    def bwd(g):
        if a.requires_grad:
            gy = K.softmax_backward(z, _c(g).reshape(-1, shape[-1]))
            _accum(a, gy.reshape(shape))

    return _record(out, (a,), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError("embedding", f"id range [{ids.min()},{ids.max()}]", table.data.shape)
    out = Tensor(table.data[ids])

    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            K.scatter_add_rows(gt, ids.reshape(-1), _c(g).reshape(-1, table.data.shape[1]))
            _accum(table, gt)

    return _record(out, (table,), bwd)


def slice_rows(a: Tensor, n: int) -> Tensor:
    """First n rows of a 2-D tensor (positional-embedding lookup)."""
    a = _as_tensor(a)
    out = Tensor(a.data[:n])

    def bwd(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[:n] = g
            _accum(a, ga)

    return _record(out, (a,), bwd)


def take_rows(a: Tensor, rows: np.ndarray, unique: bool = False) -> Tensor:
    """Select rows of a 2-D tensor (masked-position gather before the head).
    Set unique=True when indices never repeat; the backward scatter then
    assigns instead of accumulating."""
    a = _as_tensor(a)
    rows = np.asarray(rows)
    out = Tensor(a.data[rows])

    def bwd(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            if unique:
                ga[rows] = g
            else:
                K.scatter_add_rows(ga, rows, _c(g))
            _accum(a, ga)

    return _record(out, (a,), bwd)


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p={p} outside [0, 1)")
    a = _as_tensor(a)
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype)
    keep /= 1.0 - p
    out = Tensor(a.data * keep)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * keep)

    return _record(out, (a,), bwd)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over rows of (n, V) logits."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ShapeError("cross_entropy", logits.data.shape, labels.shape)
    n = logits.data.shape[0]
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1))
    nll = lse - z[np.arange(n), labels]
    out = Tensor(np.asarray(nll.mean(), dtype=logits.data.dtype))

    def bwd(g):
        if logits.requires_grad:
            p = np.exp(z - lse[:, None])
            p[np.arange(n), labels] -= 1.0
            _accum(logits, p * (g / n))

    return _record(out, (logits,), bwd)


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    a = _as_tensor(a)
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype))

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype))

    return _record(out, (a,), bwd)


def mean_pair(a: Tensor, b: Tensor) -> Tensor:
    """(a + b) / 2 for two scalar losses."""
    return scale(add(a, b), 0.5)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class GradientNaNError(RuntimeError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter '{name}'")
        self.parameter = name


class Adam:
    """Adam with decoupled weight decay. Moment state is allocated lazily,
    so frozen parameters never acquire state."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-6,
                 weight_decay: float = 0.01):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Parameter], grads: dict[str, np.ndarray], lr: float):
        if lr < 0:
            raise ValueError(f"negative learning rate {lr}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if not p.trainable:
                continue
            if not np.all(np.isfinite(g)):
                raise GradientNaNError(name)
            if g.shape != p.data.shape:
                raise ShapeError("adam_step", g.shape, p.data.shape)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            K.adam_update(p.data.reshape(-1), _c(g).reshape(-1),
                          m.reshape(-1), self.v[name].reshape(-1),
                          lr, b1, b2, bc1, bc2, self.eps, self.weight_decay)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat view of moment state for checkpointing."""
        out = {}
        for k, a in self.m.items():
            out[f"m.{k}"] = a
        for k, a in self.v.items():
            out[f"v.{k}"] = a
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int):
        self.t = t
        self.m = {k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("m.")}
        self.v = {k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("v.")}
