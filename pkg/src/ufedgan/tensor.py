"""Dense tensors with tape-based reverse-mode differentiation.

Arrays are numpy, row-major, images NCHW. Operations performed while a
:class:`Tape` is active, and with at least one input that has
``requires_grad=True``, are recorded on that tape; ``tape.backward(loss)``
then fills ``.grad`` on every registered leaf.

Two working precisions are supported: float32 (the default, used for
protocol runs) and float64 ("wide", used by finite-difference checks).

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(w * Tensor([3.0, 4.0]))
    >>> tape.backward(loss)[w]
    array([3., 4.], dtype=float32)
"""
import contextlib
import threading

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NumericalError, TapeStateError

FLOAT32 = np.dtype(np.float32)
FLOAT64 = np.dtype(np.float64)

_state = threading.local()


def _default_dtype():
    return getattr(_state, "dtype", FLOAT32)


@contextlib.contextmanager
def precision(mode):
    """Temporarily set the default dtype: ``"standard"``/float32 or ``"wide"``/float64."""
    dtype = {"standard": FLOAT32, "wide": FLOAT64}.get(mode, None)
    dtype = np.dtype(mode) if dtype is None else dtype
    prev = _default_dtype()
    _state.dtype = dtype
    try:
        yield dtype
    finally:
        _state.dtype = prev


def _tape_stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def backward_count():
    """Number of backward passes run on this thread (instrumentation)."""
    return getattr(_state, "backwards", 0)


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional array plus optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_producer", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(_default_dtype())
        elif not isinstance(data, np.ndarray):
            arr = arr.astype(_default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._producer = None

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    dtype = property(lambda self: self.data.dtype)
    size = property(lambda self: self.data.size)

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Append-only record of primitive operations; single use.

    Any ``requires_grad`` tensor that enters a recorded op without having
    been produced on this tape is registered as a leaf. ``watch`` registers
    leaves explicitly (useful when some may end up unreachable).
    """

    def __init__(self):
        self.nodes = []
        self.leaves = []
        self._leaf_ids = set()
        self._consumed = False

    def __enter__(self):
        if self._consumed:
            raise TapeStateError("tape already consumed by backward()")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def watch(self, *tensors):
        for t in tensors:
            if isinstance(t, (list, tuple)):
                self.watch(*t)
                continue
            t.requires_grad = True
            if id(t) not in self._leaf_ids:
                self._leaf_ids.add(id(t))
                self.leaves.append(t)

    def record(self, out, parents, backward):
        for p in parents:
            if p.requires_grad and p._producer is not self and id(p) not in self._leaf_ids:
                self._leaf_ids.add(id(p))
                self.leaves.append(p)
        out.requires_grad = True
        out._producer = self
        self.nodes.append(_Node(out, parents, backward))

    def backward(self, loss):
        """Propagate d(loss)/d(leaf) to every registered leaf.

        Returns a dict keyed by leaf tensor; each leaf's ``.grad`` is also
        overwritten. Leaves the loss does not depend on receive zeros.
        """
        if self._consumed:
            raise TapeStateError("tape already consumed by backward()")
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        _state.backwards = backward_count() + 1
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        result = {}
        for leaf in self.leaves:
            g = grads.get(id(leaf))
            g = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
            leaf.grad = g
            result[leaf] = g
        self.nodes = []
        return result


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{op} produced non-finite values")


def _emit(op, data, parents, backward):
    """Wrap a forward result and record it if gradients are needed."""
    _check_finite(data, op)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, backward)
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shapes(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise -----------------------------------------------------------------

def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _broadcast_shapes("add", a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _broadcast_shapes("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _broadcast_shapes("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def relu(x):
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope=0.2):
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope).astype(x.dtype)
    return _emit("leaky_relu", x.data * scale, (x,), lambda g: (g * scale,))


def tanh(x):
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1 - y * y),))


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    y = _sigmoid(x.data)
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


# shape and reductions --------------------------------------------------------

def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _emit("reshape", y, (x,), lambda g: (g.reshape(x.shape),))


def sum_(x, axis=None):
    kept = np.sum(x.data, axis=axis, keepdims=True).shape

    def backward(g):
        return (np.broadcast_to(g.reshape(kept), x.shape).copy(),)

    return _emit("sum", np.asarray(np.sum(x.data, axis=axis)), (x,), backward)


def mean(x, axis=None):
    kept = np.sum(x.data, axis=axis, keepdims=True).shape
    count = x.size // int(np.prod(kept))

    def backward(g):
        return ((np.broadcast_to(g.reshape(kept), x.shape) / count).astype(x.dtype),)

    return _emit("mean", np.asarray(np.mean(x.data, axis=axis)), (x,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError("concat: incompatible shapes " + ", ".join(str(t.shape) for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", y, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


# convolutions ----------------------------------------------------------------

def _conv_out(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation of NCHW ``x`` with an (out, in, kh, kw) kernel."""
    if stride < 1:
        raise ContractError(f"conv2d: stride must be >= 1, got {stride}")
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: incompatible shapes {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((o, n, ho, wo), dtype=np.result_type(x.dtype, kernel.dtype))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            out += np.tensordot(kernel.data[:, :, i, j], patch, axes=([1], [1]))
    out = out.transpose(1, 0, 2, 3)

    def backward(g):
        gt = g.transpose(1, 0, 2, 3)  # (o, n, ho, wo)
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kernel.data)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
                gk[:, :, i, j] = np.tensordot(gt, xp[sl], axes=([1, 2, 3], [0, 2, 3]))
                gxp[sl] += np.tensordot(kernel.data[:, :, i, j], gt, axes=([0], [0])).transpose(1, 0, 2, 3)
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        return gx, gk

    return _emit("conv2d", np.ascontiguousarray(out), (x, kernel), backward)


def conv2d_transposed(x, kernel, stride=1, padding=0):
    """Transposed convolution; ``kernel`` is (in, out, kh, kw).

    Output spatial size is ``(h - 1) * stride - 2 * padding + kh``. This is
    exactly the input-gradient map of :func:`conv2d` with the same kernel
    and hyperparameters.
    """
    if stride < 1:
        raise ContractError(f"conv2d_transposed: stride must be >= 1, got {stride}")
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[0]:
        raise DimensionError(f"conv2d_transposed: incompatible shapes {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    _, o, kh, kw = kernel.shape
    fh, fw = (h - 1) * stride + kh, (w - 1) * stride + kw
    ho, wo = fh - 2 * padding, fw - 2 * padding
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d_transposed: padding {padding} too large for {x.shape}")
    full = np.zeros((n, o, fh, fw), dtype=np.result_type(x.dtype, kernel.dtype))
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(kernel.data[:, :, i, j], x.data, axes=([0], [1]))  # (o, n, h, w)
            full[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += contrib.transpose(1, 0, 2, 3)
    out = full[:, :, padding:padding + ho, padding:padding + wo]

    def backward(g):
        gfull = np.zeros_like(full)
        gfull[:, :, padding:padding + ho, padding:padding + wo] = g
        gx = np.zeros_like(x.data)
        gk = np.zeros_like(kernel.data)
        for i in range(kh):
            for j in range(kw):
                gs = gfull[:, :, i:i + stride * h:stride, j:j + stride * w:stride]  # (n, o, h, w)
                gx += np.tensordot(kernel.data[:, :, i, j], gs, axes=([1], [1])).transpose(1, 0, 2, 3)
                gk[:, :, i, j] = np.tensordot(x.data, gs, axes=([0, 2, 3], [0, 2, 3]))
        return gx, gk

    return _emit("conv2d_transposed", np.ascontiguousarray(out), (x, kernel), backward)


# normalization ---------------------------------------------------------------

class RunningStats:
    """Batchnorm running mean/variance; updated in place in training mode."""

    def __init__(self, channels, dtype=FLOAT32, momentum=0.1):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum

    def copy(self):
        other = RunningStats(len(self.mean), self.mean.dtype, self.momentum)
        other.mean[...] = self.mean
        other.var[...] = self.var
        return other


def batchnorm(x, gamma, beta, running_stats, training=True, eps=1e-5):
    """Per-channel normalization of (N, F) or (N, C, H, W) input.

    Training mode normalizes with biased batch statistics and folds the
    unbiased batch variance into ``running_stats``; eval mode normalizes
    with the running statistics.
    """
    if x.ndim not in (2, 4) or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm: incompatible shapes {x.shape}, {gamma.shape}, {beta.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    count = x.size // x.shape[1]
    if training:
        if count < 2:
            raise ContractError("batchnorm: training mode needs more than one value per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = running_stats.momentum
        running_stats.mean[...] = (1 - m) * running_stats.mean + m * mu
        running_stats.var[...] = (1 - m) * running_stats.var + m * var * count / (count - 1)
    else:
        mu, var = running_stats.mean, running_stats.var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    y = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (inv.reshape(bshape) / count) * (
                count * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape))
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, gg, gb

    return _emit("batchnorm", y.astype(x.dtype), (x, gamma, beta), backward)


# losses ----------------------------------------------------------------------

def bce_loss(predictions, targets):
    """Mean binary cross-entropy of probabilities in the open interval (0, 1)."""
    p = predictions
    t = as_tensor(targets, like=p)
    if p.shape != t.shape:
        raise DimensionError(f"bce_loss: incompatible shapes {p.shape} and {t.shape}")
    if np.any(p.data <= 0) or np.any(p.data >= 1):
        raise DomainError("bce_loss: predictions must lie strictly inside (0, 1)")
    n = p.size
    loss = -np.mean(t.data * np.log(p.data) + (1 - t.data) * np.log1p(-p.data))

    def backward(g):
        return (g * (p.data - t.data) / (p.data * (1 - p.data)) / n, None)

    return _emit("bce_loss", np.asarray(loss, dtype=p.dtype), (p, t), backward)


def bce_with_logits(logits, targets):
    """``bce_loss(sigmoid(logits), targets)`` computed without saturation."""
    z = logits
    t = as_tensor(targets, like=z)
    if z.shape != t.shape:
        raise DimensionError(f"bce_with_logits: incompatible shapes {z.shape} and {t.shape}")
    n = z.size
    v = z.data
    loss = np.mean(np.maximum(v, 0) - v * t.data + np.log1p(np.exp(-np.abs(v))))

    def backward(g):
        return (g * (_sigmoid(v) - t.data) / n, None)

    return _emit("bce_with_logits", np.asarray(loss, dtype=z.dtype), (z, t), backward)


def log_softmax(x):
    """Row-wise log-softmax of an (N, K) tensor."""
    v = x.data
    shifted = v - v.max(axis=1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=1, keepdims=True),)

    return _emit("log_softmax", y, (x,), backward)


def softmax(x):
    """Row-wise probabilities as a plain array (inference only, not recorded)."""
    return np.exp(log_softmax(Tensor(x.data)).data)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: incompatible shapes {logits.shape} and {labels.shape}")
    logp = log_softmax(logits)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = -1.0 / len(labels)
    return sum_(mul(logp, Tensor(onehot)))


# parameter vectors -----------------------------------------------------------

def flatten_params(tensors):
    """Concatenate tensors (or raw arrays) into one flat vector, in order."""
    arrays = [t.data if isinstance(t, Tensor) else np.asarray(t) for t in tensors]
    if not arrays:
        return np.zeros(0, dtype=_default_dtype())
    return np.concatenate([a.ravel() for a in arrays])


def unflatten_params(vec, shapes):
    """Split ``vec`` back into tensors of the given shapes (bit-exact)."""
    vec = np.asarray(vec)
    shapes = [tuple(s) for s in shapes]
    total = sum(int(np.prod(s)) for s in shapes)
    if vec.ndim != 1 or total != vec.size:
        raise DimensionError(f"unflatten_params: vector of length {vec.size} cannot fill shapes totalling {total}")
    out, pos = [], 0
    for s in shapes:
        k = int(np.prod(s))
        out.append(Tensor(vec[pos:pos + k].reshape(s).copy()))
        pos += k
    return out
