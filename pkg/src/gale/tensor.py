"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation that touches a ``requires_grad`` tensor records its parents and
a backward closure on the output.  ``backward`` walks the recorded graph in
reverse topological order (a :class:`Tape`) exactly once; calling it a second
time on the same graph raises.

Besides the arithmetic needed by the forecasting models this module holds the
Adam optimizer (decoupled weight decay), global-norm gradient clipping and a
central finite-difference gradient used as a test oracle.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64

_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)


class NonFiniteError(ValueError):
    """A tensor operation produced NaN or Inf."""


class TapeConsumedError(RuntimeError):
    """``backward`` was called twice on the same recorded graph."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def _check_finite(arr, what="tensor"):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None
               for i in items)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    """N-dimensional float64 array with an optional gradient record."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) \
            else np.ascontiguousarray(data, dtype=DTYPE)
        _check_finite(arr, name or "tensor")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._consumed = False

    # -- construction helpers -------------------------------------------
    @classmethod
    def _result(cls, data, parents, backward, what):
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=DTYPE)
        _check_finite(data, what)
        out.data = data
        out.grad = None
        out.name = None
        out._consumed = False
        live = tuple(p for p in parents if p.requires_grad)
        if live and _grad_enabled.get():
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad = self.grad + g

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
        return Tensor._result(a.data + b.data, (a, b), back, "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
        return Tensor._result(a.data * b.data, (a, b), back, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a constant")
        return self * (1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __getitem__(self, idx):
        a = self

        def back(g):
            full = np.zeros_like(a.data)
            if _is_basic_index(idx):
                full[idx] += g
            else:
                np.add.at(full, idx, g)
            return (full,)
        return Tensor._result(a.data[idx], (a,), back, "getitem")

    # -- shape ops -----------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._result(self.data.transpose(axes), (self,),
                              lambda g: (g.transpose(inv),), "transpose")

    def swapaxes(self, a1, a2):
        axes = list(range(self.ndim))
        axes[a1], axes[a2] = axes[a2], axes[a1]
        return self.transpose(axes)

    def sum(self, axis=None, keepdims=False):
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape),)
        return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), back, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


Parameter = Tensor


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product with numpy broadcasting over leading axes."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with ndim >= 2")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return Tensor._result(a.data @ b.data, (a, b), back, "matmul")


def relu(x):
    mask = x.data > 0
    return Tensor._result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def exp(x):
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return Tensor._result(y, (x,), lambda g: (g * y,), "exp")


def softmax_rows(x, mask=None):
    """Softmax over the last axis.

    ``mask`` is an optional boolean array broadcastable to ``x``; ``True``
    entries are excluded (probability exactly zero).  Every row needs at least
    one unmasked entry.
    """
    z = x.data
    if mask is not None:
        z = np.where(mask, -np.inf, z)
        if np.all(np.broadcast_to(mask, z.shape), axis=-1).any():
            raise ValueError("softmax row with every entry masked")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return Tensor._result(y, (x,), back, "softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit population variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError("layer_norm gain/bias must match the last extent")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)
    return Tensor._result(out, (x, gain, bias), back, "layer_norm")


def linear(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x``."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear shape mismatch: input {x.shape}, weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError(f"linear bias shape {b.shape} does not match weight {w.shape}")
    xd = x.data
    y = xd @ w.data
    if b is not None:
        y = y + b.data

    def back(g):
        gx = g @ w.data.T
        g2 = g.reshape(-1, g.shape[-1])
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(y, parents, back, "linear")


def dropout(x, p, training, rng):
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor._result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))
    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis),
                          tuple(tensors), back, "concat")


def causal_conv1d(x, w, b, dilation=1):
    """Causal 1-D convolution over the time axis.

    ``x`` is ``(..., L, C_in)``, ``w`` is ``(K, C_in, C_out)``.  Output at time
    ``t`` reads inputs ``t - dilation*(K-1-k)`` for ``k = 0..K-1`` (zero left
    padding), so nothing after ``t`` contributes.
    """
    K, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv input channels {x.shape[-1]} != kernel {cin}")
    L = x.shape[-2]
    pad = dilation * (K - 1)
    xp = np.concatenate([np.zeros(x.shape[:-2] + (pad, cin)), x.data], axis=-2)
    taps = [xp[..., k * dilation:k * dilation + L, :] for k in range(K)]
    cols = np.concatenate(taps, axis=-1)                     # (..., L, K*cin)
    wm = w.data.reshape(K * cin, cout)
    y = cols @ wm + b.data

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.reshape(-1, K * cin).T @ g2).reshape(K, cin, cout)
        gcols = g @ wm.T
        gxp = np.zeros_like(xp)
        for k in range(K):
            gxp[..., k * dilation:k * dilation + L, :] += gcols[..., k * cin:(k + 1) * cin]
        return gxp[..., pad:, :], gw, g2.sum(axis=0)
    return Tensor._result(y, (x, w, b), back, "causal_conv1d")


def mse_loss(pred, target):
    """Mean of squared differences over every element (N * L_pred * d_a terms)."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def back(g):
        gp = g * 2.0 * diff / n
        return gp, -gp
    return Tensor._result(np.mean(diff * diff), (pred, target), back, "mse_loss")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    """Operations reachable from a scalar output, in topological order."""

    nodes: list

    @classmethod
    def from_output(cls, out):
        order, seen = [], set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def backward(loss):
    """Populate ``.grad`` on every ``requires_grad`` leaf feeding ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeConsumedError("graph already consumed by a previous backward()")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    tape = Tape.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node._accumulate(g)
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in tape.nodes:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

def clip_grad_norm(params, max_norm):
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the applied scale (1.0 when no clipping happened).
    """
    sq = sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)
    norm = np.sqrt(sq)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad = p.grad * scale
    return scale


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class Adam:
    """Adam with decoupled weight decay (the AdamW update)."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                               weight_decay=weight_decay,
                               m=[np.zeros_like(p.data) for p in self.params],
                               v=[np.zeros_like(p.data) for p in self.params])

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.state, self.params)


def adam_step(state, params):
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match the parameter set")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, p in enumerate(params):
        if state.m[i].shape != p.shape:
            raise ValueError(f"optimizer state shape {state.m[i].shape} != parameter {p.shape}")
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        if state.weight_decay:
            p.data = p.data * (1.0 - state.lr * state.weight_decay)
        update = (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        p.data = p.data - state.lr * update


# ---------------------------------------------------------------------------
# verification oracle
# ---------------------------------------------------------------------------

def finite_diff_gradient(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x`` (any array shape)."""
    x = np.array(x, dtype=DTYPE, copy=True)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
