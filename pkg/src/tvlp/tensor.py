"""Dense tensor core with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float64 by default) and record parent links so
that ``backward`` on a scalar loss accumulates gradients into every
``requires_grad`` leaf. Shape mixing is deliberately strict: operands must
match exactly, be scalar, or differ only by leading batch axes.
"""

import threading

import numpy as np

DEFAULT_DTYPE = np.float64

_state = threading.local()


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class NonFiniteError(ArithmeticError):
    """A forward operation produced NaN or Inf."""


class GradientError(RuntimeError):
    """Backward was invoked on an invalid graph root."""


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording (evaluation paths)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _check_finite(arr, op):
    # a NaN/Inf anywhere propagates to the sum; one reduction, no bool temp
    if not np.isfinite(arr.sum()):
        raise NonFiniteError(f"non-finite values produced by '{op}'")


class Tensor:
    """N-dimensional array participating in a gradient tape.

    ``grad`` is allocated as zeros for requires_grad leaves and accumulated
    into by ``backward`` (add-into semantics; call ``zero_grad`` to reset).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_op", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = ()
        self._op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        backward(self)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _make(data, parents, op):
    """Wrap ``data`` in a Tensor, linking parents when grads are needed.

    ``parents`` is a sequence of (tensor, grad_fn) pairs where grad_fn maps
    the output gradient array to that parent's gradient contribution.
    """
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    if _grad_enabled() and any(p.requires_grad for p, _ in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
    else:
        out.requires_grad = False
        out._parents = ()
    return out


def _is_scalar_like(t):
    return t.data.ndim == 0 or t.data.size == 1


def _elementwise_check(a, b, op):
    """Allow equal shapes, scalar operands, or trailing-suffix broadcast."""
    if a.shape == b.shape or _is_scalar_like(a) or _is_scalar_like(b):
        return
    small, big = (a, b) if a.ndim < b.ndim else (b, a)
    if small.ndim < big.ndim and big.shape[big.ndim - small.ndim:] == small.shape:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after leading-batch/scalar broadcast."""
    if grad.shape == shape:
        return grad
    if shape == () or int(np.prod(shape)) == 1:
        return grad.sum().reshape(shape)
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


# -- arithmetic ----------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _elementwise_check(a, b, "add")
    out = a.data + b.data
    return _make(out, [(a, lambda g: _unbroadcast(g, a.shape)),
                       (b, lambda g: _unbroadcast(g, b.shape))], "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _elementwise_check(a, b, "sub")
    out = a.data - b.data
    return _make(out, [(a, lambda g: _unbroadcast(g, a.shape)),
                       (b, lambda g: _unbroadcast(-g, b.shape))], "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _elementwise_check(a, b, "mul")
    out = a.data * b.data
    return _make(out, [(a, lambda g: _unbroadcast(g * b.data, a.shape)),
                       (b, lambda g: _unbroadcast(g * a.data, b.shape))], "mul")


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _elementwise_check(a, b, "div")
    out = a.data / b.data
    return _make(out, [(a, lambda g: _unbroadcast(g / b.data, a.shape)),
                       (b, lambda g: _unbroadcast(-g * a.data / (b.data ** 2), b.shape))],
                 "div")


def neg(a):
    a = _as_tensor(a)
    return _make(-a.data, [(a, lambda g: -g)], "neg")


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, [(a, lambda g: g * out)], "exp")


def log(a):
    a = _as_tensor(a)
    out = np.log(a.data)
    return _make(out, [(a, lambda g: g / a.data)], "log")


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, [(a, lambda g: g * (1.0 - out ** 2))], "tanh")


def relu(a):
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _make(out, [(a, lambda g: g * (a.data > 0))], "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """tanh-approximation GELU; the gradient matches this exact forward."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner)

    return _make(out, [(a, grad_fn)], "gelu")


# -- shape ops -----------------------------------------------------------


def reshape(a, *shape):
    a = _as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.shape
    out = a.data.reshape(shape)
    return _make(out, [(a, lambda g: g.reshape(old))], "reshape")


def transpose(a, axes=None):
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return _make(out, [(a, lambda g: np.transpose(g, inverse))], "transpose")


def getitem(a, key):
    a = _as_tensor(a)
    out = a.data[key]
    if np.isscalar(out) or out.ndim == 0:
        out = np.asarray(out)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return full

    return _make(out.copy(), [(a, grad_fn)], "getitem")


def concatenate(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def make_grad(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    parents = [(t, make_grad(i)) for i, t in enumerate(tensors)]
    return _make(out, parents, "concatenate")


# -- reductions ----------------------------------------------------------


def _restore_axes(g, axis, shape, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def sum_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _make(np.asarray(out),
                 [(a, lambda g: _restore_axes(g, axis, a.shape, keepdims))], "sum")


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax % a.ndim] for ax in axes]))
    return _make(np.asarray(out),
                 [(a, lambda g: _restore_axes(g, axis, a.shape, keepdims) / count)],
                 "mean")


# -- linear algebra ------------------------------------------------------


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents {a.shape} @ {b.shape} do not match")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents {a.shape} @ {b.shape} must match exactly")
    out = a.data @ b.data
    return _make(out,
                 [(a, lambda g: g @ np.swapaxes(b.data, -1, -2)),
                  (b, lambda g: np.swapaxes(a.data, -1, -2) @ g)], "matmul")


# -- neural-net primitives ------------------------------------------------


def softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - inner)

    return _make(out, [(a, grad_fn)], "softmax")


def log_softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def grad_fn(g):
        return g - soft * g.sum(axis=axis, keepdims=True)

    return _make(out, [(a, grad_fn)], "log_softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Standardize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError("layer_norm: gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data
    d = x.shape[-1]

    def grad_x(g):
        gh = g * gain.data
        return inv * (gh - gh.mean(axis=-1, keepdims=True)
                      - xhat * (gh * xhat).mean(axis=-1, keepdims=True))

    def grad_gain(g):
        return (g * xhat).reshape(-1, d).sum(axis=0)

    def grad_bias(g):
        return g.reshape(-1, d).sum(axis=0)

    return _make(out, [(x, grad_x), (gain, grad_gain), (bias, grad_bias)], "layer_norm")


def cross_entropy(logits, targets, ignore_index=None):
    """Mean negative log-likelihood over rows not flagged with ignore_index.

    ``logits`` is (N, C); ``targets`` an int array of shape (N,).
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-d logits, got {logits.shape}")
    if targets.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy: one target per logits row required")
    n, c = logits.shape
    valid = np.ones(n, dtype=bool) if ignore_index is None else targets != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise GradientError("cross_entropy: every position is ignored, loss undefined")
    bad = targets[valid]
    if bad.min() < 0 or bad.max() >= c:
        raise ShapeError("cross_entropy: target index out of range")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    picked = logp[valid, targets[valid]]
    out = np.asarray(-picked.mean())

    def grad_fn(g):
        soft = np.exp(logp)
        gl = np.zeros_like(logits.data)
        gl[valid] = soft[valid]
        gl[valid, targets[valid]] -= 1.0
        return gl * (float(g) / n_valid)

    return _make(out, [(logits, grad_fn)], "cross_entropy")


def embedding(weight, ids):
    """Row lookup with scatter-add gradient into the table."""
    weight = _as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError("embedding: index out of range")
    out = weight.data[ids]

    def grad_fn(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return gw

    return _make(out.copy(), [(weight, grad_fn)], "embedding")


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-d convolution, NCHW layout, square stride/padding."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects (B,C,H,W) input and (O,C,kh,kw) weight")
    b_, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input channels {c} != weight channels {ci}")
    s, p = int(stride), int(padding)
    h_out = (h + 2 * p - kh) // s + 1
    w_out = (w + 2 * p - kw) // s + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError("conv2d: kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((b_, o, h_out, w_out))
    for dy in range(kh):
        for dx in range(kw):
            patch = xp[:, :, dy:dy + s * h_out:s, dx:dx + s * w_out:s]
            # (B,C,H,W) x (O,C) over C, via BLAS
            out += np.moveaxis(np.tensordot(patch, weight.data[:, :, dy, dx],
                                            axes=([1], [1])), 3, 1)
    if bias is not None:
        bias = _as_tensor(bias)
        out += bias.data[None, :, None, None]

    def grad_x(g):
        gxp = np.zeros_like(xp)
        for dy in range(kh):
            for dx in range(kw):
                contrib = np.tensordot(g, weight.data[:, :, dy, dx], axes=([1], [0]))
                gxp[:, :, dy:dy + s * h_out:s, dx:dx + s * w_out:s] += np.moveaxis(
                    contrib, 3, 1)
        return gxp[:, :, p:p + h, p:p + w]

    def grad_w(g):
        gw = np.zeros_like(weight.data)
        for dy in range(kh):
            for dx in range(kw):
                patch = xp[:, :, dy:dy + s * h_out:s, dx:dx + s * w_out:s]
                gw[:, :, dy, dx] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))
        return gw

    parents = [(x, grad_x), (weight, grad_w)]
    if bias is not None:
        parents.append((bias, lambda g: g.sum(axis=(0, 2, 3))))
    return _make(out, parents, "conv2d")


def l2_normalize(a, axis=-1, eps=0.0):
    """Scale rows along ``axis`` to unit norm; zero rows are an error."""
    a = _as_tensor(a)
    norm = np.sqrt((a.data ** 2).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise ShapeError("l2_normalize: zero-norm input")
    out = a.data / norm

    def grad_fn(g):
        inner = (g * a.data).sum(axis=axis, keepdims=True)
        return g / norm - a.data * inner / norm ** 3

    return _make(out, [(a, grad_fn)], "l2_normalize")


# -- backward ------------------------------------------------------------


def backward(loss):
    """Accumulate dloss/dleaf into every reachable requires_grad leaf."""
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise GradientError(f"backward root must be scalar, got shape {loss.shape}")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, grad_fn in node._parents:
            if not parent.requires_grad:
                continue
            contrib = grad_fn(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib


# -- finite-difference oracle ---------------------------------------------


class GradCheckReport:
    """Per-input relative errors from comparing tape gradients to central differences."""

    def __init__(self, errors, tol):
        self.errors = errors
        self.tol = tol
        self.max_error = max(errors.values()) if errors else 0.0
        self.passed = self.max_error <= tol

    def __repr__(self):
        status = "pass" if self.passed else "FAIL"
        return f"GradCheckReport({status}, max_error={self.max_error:.3e}, tol={self.tol:.1e})"


def check_gradients(f, inputs, h=1e-5, tol=1e-4, eps=1e-3,
                    max_checks_per_input=None, rng=None):
    """Compare tape gradients of scalar ``f(inputs)`` against central differences.

    Relative error per element is |g_ad - g_fd| / (|g_ad| + |g_fd| + eps);
    a report passes iff the max over all checked elements is <= tol. ``eps``
    floors the denominator so that near-zero gradients are judged on the
    absolute scale of finite-difference roundoff rather than blowing up.
    Large inputs can be subsampled with ``max_checks_per_input``.
    """
    inputs = list(inputs)
    for t in inputs:
        if not t.requires_grad:
            raise GradientError("check_gradients: all inputs must require grad")
        t.zero_grad()

    out = f(inputs)
    if out.data.ndim != 0 and out.data.size != 1:
        raise GradientError("check_gradients: f must be scalar-valued")
    backward(out)
    analytic = [t.grad.copy() for t in inputs]

    rng = rng or np.random.default_rng(0)
    errors = {}
    for idx, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_checks_per_input is not None and n > max_checks_per_input:
            positions = rng.choice(n, size=max_checks_per_input, replace=False)
        else:
            positions = range(n)
        worst = 0.0
        for pos in positions:
            orig = flat[pos]
            flat[pos] = orig + h
            with no_grad():
                up = f(inputs).item()
            flat[pos] = orig - h
            with no_grad():
                down = f(inputs).item()
            flat[pos] = orig
            fd = (up - down) / (2.0 * h)
            ad = analytic[idx].reshape(-1)[pos]
            rel = abs(ad - fd) / (abs(ad) + abs(fd) + eps)
            worst = max(worst, rel)
        errors[t.name or f"input{idx}"] = worst
        t.zero_grad()
    return GradCheckReport(errors, tol)
