"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation used by the model lives here. Arrays are
row-major numpy float64; gradients are accumulated into ``.grad`` buffers
by walking the recorded graph in reverse topological order. Broadcasting
is limited to the patterns the model needs: scalar <-> array, and adding
a smaller operand whose leading axes are missing or whose axes have
size 1 (bias rows, per-channel biases).
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError

# Toggle for the per-op finiteness guard. On by default: NaN/Inf is an
# error state, never a silent value.
FINITE_CHECKS = True

_MAGIC = b"MAQT"


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` along axes that were broadcast."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node in the computation graph.

    Immutable after construction except for the ``grad`` buffer. Tensors
    created by ops carry closure backward functions; calling
    :meth:`backward` on a scalar consumes the tape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    # -- basics ---------------------------------------------------------

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

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """Copy of this tensor cut off from the graph."""
        return Tensor(self.data.copy())

    # -- backward -------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from a scalar. Consumes the tape."""
        if self.data.shape != ():
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise ContractError("tape already consumed; re-run the forward pass before backward")
        GradTape(self).run()

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        if not isinstance(other, Tensor):
            return _make(self.data + other, (self,), "add_const",
                         lambda g: (g,))
        out_data = self.data + other.data
        a_shape, b_shape = self.shape, other.shape
        return _make(out_data, (self, other), "add",
                     lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)))

    __radd__ = __add__

    def __neg__(self):
        return _make(-self.data, (self,), "neg", lambda g: (-g,))

    def __sub__(self, other):
        if not isinstance(other, Tensor):
            return self + (-other)
        out_data = self.data - other.data
        a_shape, b_shape = self.shape, other.shape
        return _make(out_data, (self, other), "sub",
                     lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Tensor):
            c = float(other)
            return _make(self.data * c, (self,), "scale", lambda g: (g * c,))
        a, b = self, other
        out_data = a.data * b.data
        return _make(out_data, (a, b), "mul",
                     lambda g: (_unbroadcast(g * b.data, a.shape),
                                _unbroadcast(g * a.data, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor/tensor division is not part of the op set; multiply by a reciprocal")
        return self * (1.0 / float(other))

    # -- shape ops ------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _make(self.data.reshape(shape), (self,), "reshape",
                     lambda g: (g.reshape(old),))

    def transpose(self):
        if self.ndim != 2:
            raise ShapeError(f"transpose expects a 2-d tensor, got shape {self.shape}")
        return _make(self.data.T.copy(), (self,), "transpose", lambda g: (g.T,))

    @property
    def T(self):
        return self.transpose()

    def slice_cols(self, start, stop):
        """Columns [start, stop) of a 2-d tensor."""
        if self.ndim != 2:
            raise ShapeError(f"slice_cols expects a 2-d tensor, got shape {self.shape}")
        full = self.shape

        def back(g):
            dg = np.zeros(full)
            dg[:, start:stop] = g
            return (dg,)

        return _make(self.data[:, start:stop].copy(), (self,), "slice_cols", back)

    def column(self, j):
        """Column j of a 2-d tensor, as a 1-d tensor."""
        if self.ndim != 2:
            raise ShapeError(f"column expects a 2-d tensor, got shape {self.shape}")
        full = self.shape

        def back(g):
            dg = np.zeros(full)
            dg[:, j] = g
            return (dg,)

        return _make(self.data[:, j].copy(), (self,), "column", back)

    def row(self, i):
        """Row i of a 2-d tensor, as a 1-d tensor."""
        if self.ndim != 2:
            raise ShapeError(f"row expects a 2-d tensor, got shape {self.shape}")
        full = self.shape

        def back(g):
            dg = np.zeros(full)
            dg[i, :] = g
            return (dg,)

        return _make(self.data[i, :].copy(), (self,), "row", back)

    # -- reductions -----------------------------------------------------

    def sum(self):
        shape = self.shape
        return _make(self.data.sum(), (self,), "sum",
                     lambda g: (np.broadcast_to(g, shape).copy(),))

    def mean(self):
        n = self.size
        shape = self.shape
        return _make(self.data.mean(), (self,), "mean",
                     lambda g: (np.broadcast_to(g / n, shape).copy(),))


class GradTape:
    """Reverse-topological record of the ops feeding one scalar loss.

    Built lazily at backward time from the parent links the ops record.
    Runs each node's backward exactly once, then clears the graph so a
    second sweep without a fresh forward pass is rejected.
    """

    def __init__(self, root):
        self.root = root
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.order = order

    def run(self):
        root = self.root
        root.grad = np.ones_like(root.data)
        for node in reversed(self.order):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.shape:
                    raise ContractError(
                        f"{node._op}: gradient shape {g.shape} != operand shape {parent.shape}")
                parent._accumulate(g)
        for node in self.order:
            node._consumed = True
            node._parents = ()
            node._backward = None


def _make(data, parents, op, backward):
    """Build an op result; record the tape entry if any input needs grad."""
    if FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{op}' produced non-finite values")
    out = Tensor(data)
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        # requires_grad of each parent is re-checked at sweep time
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# constructors


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def randn(rng, shape, scale=1.0, requires_grad=False):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-d matrix product. dA = g @ B^T, dB = A^T @ g."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    a_data, b_data = a.data, b.data
    return _make(a_data @ b_data, (a, b), "matmul",
                 lambda g: (g @ b_data.T, a_data.T @ g))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along `axis` (max-subtracted before exponentiation)."""
    if x.size == 0 or x.shape[axis] < 1:
        raise ShapeError(f"softmax along an empty axis of shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (x,), "softmax", back)


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic function, overflow-free for any finite input."""
    e = np.exp(-np.abs(x.data))
    p = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(p, (x,), "sigmoid", lambda g: (g * p * (1.0 - p),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def maximum_const(x: Tensor, floor: float) -> Tensor:
    """max(x, floor). Subgradient 0 at and below the floor."""
    mask = x.data > floor
    return _make(np.where(mask, x.data, floor), (x,), "maximum_const",
                 lambda g: (g * mask,))


def log(x: Tensor) -> Tensor:
    x_data = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x_data)
    return _make(y, (x,), "log", lambda g: (g / x_data,))


def pow_const(x: Tensor, exponent: float) -> Tensor:
    """x ** p for a constant p >= 0. p == 0 yields ones with zero gradient."""
    if exponent < 0:
        raise ShapeError("pow_const requires a non-negative exponent")
    if exponent == 0:
        return _make(np.ones_like(x.data), (x,), "pow0",
                     lambda g: (np.zeros_like(g),))
    x_data = x.data
    y = x_data ** exponent

    def back(g):
        if exponent == 1.0:
            return (g.copy(),)
        return (g * exponent * x_data ** (exponent - 1.0),)

    return _make(y, (x,), "pow_const", back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis, then affine.

    Population variance; epsilon goes under the square root.
    """
    d = x.shape[-1] if x.ndim else 0
    if d < 2:
        raise ShapeError(f"layer_norm needs last dimension >= 2, got shape {x.shape}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data
    g_data = gain.data

    def back(g):
        dxhat = g * g_data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=axes)
        dbias = g.sum(axis=axes)
        return (dx, dgain, dbias)

    return _make(out, (x, gain, bias), "layer_norm", back)


def _conv_out_len(n, stride):
    # kernel 3, padding 1: floor((n - 1)/s) + 1 == ceil(n/s)
    return (n - 1) // stride + 1


def _im2col(xp, stride, h_out, w_out):
    c = xp.shape[0]
    cols = np.empty((c, 3, 3, h_out, w_out))
    for ky in range(3):
        for kx in range(3):
            cols[:, ky, kx] = xp[:, ky:ky + (h_out - 1) * stride + 1:stride,
                                 kx:kx + (w_out - 1) * stride + 1:stride]
    return cols.reshape(c * 9, h_out * w_out)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """3x3 cross-correlation with padding 1.

    x: (C_in, H, W), kernels: (C_out, C_in, 3, 3) -> (C_out, ceil(H/s), ceil(W/s)).
    """
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be (C,H,W), got {x.shape}")
    if kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d kernels must be (C_out,C_in,3,3), got {kernels.shape}")
    c_in, h, w = x.shape
    if kernels.shape[1] != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernels {kernels.shape}")
    if h < 3 or w < 3:
        raise ShapeError(f"conv2d needs spatial dims >= 3, got {x.shape}")
    c_out = kernels.shape[0]
    h_out, w_out = _conv_out_len(h, stride), _conv_out_len(w, stride)

    xp = np.zeros((c_in, h + 2, w + 2))
    xp[:, 1:-1, 1:-1] = x.data
    cols = _im2col(xp, stride, h_out, w_out)            # (C_in*9, P)
    k2 = kernels.data.reshape(c_out, c_in * 9)
    out = (k2 @ cols).reshape(c_out, h_out, w_out)

    def back(g):
        g2 = g.reshape(c_out, h_out * w_out)
        dk = (g2 @ cols.T).reshape(kernels.shape)
        dcols = (k2.T @ g2).reshape(c_in, 3, 3, h_out, w_out)
        dxp = np.zeros_like(xp)
        for ky in range(3):
            for kx in range(3):
                dxp[:, ky:ky + (h_out - 1) * stride + 1:stride,
                    kx:kx + (w_out - 1) * stride + 1:stride] += dcols[:, ky, kx]
        return (dxp[:, 1:-1, 1:-1], dk)

    return _make(out, (x, kernels), "conv2d", back)


def global_avg_pool(x: Tensor) -> Tensor:
    """(C, H, W) -> (C,): per-channel spatial mean."""
    if x.ndim != 3:
        raise ShapeError(f"global_avg_pool expects (C,H,W), got {x.shape}")
    c, h, w = x.shape
    out = x.data.mean(axis=(1, 2))

    def back(g):
        return (np.broadcast_to(g[:, None, None] / (h * w), (c, h, w)).copy(),)

    return _make(out, (x,), "global_avg_pool", back)


def concat_cols(parts) -> Tensor:
    """Concatenate 2-d tensors along columns."""
    parts = list(parts)
    if not parts or any(p.ndim != 2 for p in parts):
        raise ShapeError("concat_cols expects a non-empty list of 2-d tensors")
    widths = [p.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)

    def back(g):
        grads, at = [], 0
        for wdt in widths:
            grads.append(g[:, at:at + wdt])
            at += wdt
        return tuple(grads)

    return _make(out, tuple(parts), "concat_cols", back)


def stack_rows(rows) -> Tensor:
    """Stack 1-d tensors of equal length into a (B, n) tensor."""
    rows = list(rows)
    if not rows or any(r.ndim != 1 for r in rows):
        raise ShapeError("stack_rows expects a non-empty list of 1-d tensors")
    out = np.stack([r.data for r in rows])

    def back(g):
        return tuple(g[i] for i in range(len(rows)))

    return _make(out, tuple(rows), "stack_rows", back)


def dropout(x: Tensor, rate: float, rng, train: bool) -> Tensor:
    """Inverted dropout: identity in eval mode, mask/(1-rate) in train mode."""
    if not train or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0,1), got {rate}")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * mask, (x,), "dropout", lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# flat binary serialization: magic "MAQT", u32 rank, u64 dims, f64 LE payload


def save_tensor(fh, t: Tensor) -> None:
    data = np.asarray(t.data, dtype="<f8", order="C")  # keeps 0-d rank 0
    fh.write(_MAGIC)
    fh.write(struct.pack("<I", data.ndim))
    for d in data.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(data.tobytes())


def load_tensor(fh) -> Tensor:
    magic = fh.read(4)
    if magic != _MAGIC:
        raise ContractError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise ContractError("tensor payload truncated")
    arr = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return Tensor(arr)


def save_tensor_file(path, t: Tensor) -> None:
    with open(path, "wb") as fh:
        save_tensor(fh, t)


def load_tensor_file(path) -> Tensor:
    with open(path, "rb") as fh:
        return load_tensor(fh)
