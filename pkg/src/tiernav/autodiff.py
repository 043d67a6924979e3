"""Reverse-mode automatic differentiation over float64 numpy arrays.

A Tensor wraps one array plus an optional gradient and links to the
tensors that produced it, so the compute graph is the implicit DAG of
parent pointers. backward() walks that DAG once in reverse topological
order and accumulates gradients additively across fan-out.

Only the primitives the map encoder and policy heads need are provided;
each carries a hand-written backward rule. Everything is float64: the
models are tiny and exact central-difference gradient checking matters
more than speed here.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError, ShapeError, StateError

_GRAD_ENABLED = True


class no_grad:
    """Context manager that skips tape construction (rollouts, eval)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """float64 array + optional grad + tape links."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def const(data) -> Tensor:
    """Non-differentiable input tensor."""
    return Tensor(data)


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _node(data, parents, op, backward) -> Tensor:
    """Build an op output; track it only if the tape is live and needed."""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        track = tuple(p for p in parents if p.requires_grad)
        return Tensor(data, requires_grad=True, op=op, parents=track, backward=backward)
    return Tensor(data, op=op)


def backward(loss: Tensor):
    """Populate .grad on every tensor reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    # Iterative post-order: each node appended after all its parents.
    order = []
    state: dict[int, int] = {}
    stack = [loss]
    while stack:
        node = stack[-1]
        st = state.get(id(node), 0)
        if st == 0:
            state[id(node)] = 1
            for p in node._parents:
                if state.get(id(p), 0) == 0:
                    stack.append(p)
        elif st == 1:
            state[id(node)] = 2
            order.append(node)
            stack.pop()
        else:
            stack.pop()
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------- elementwise


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _node(a.data + b.data, (a, b), "add", bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _node(a.data - b.data, (a, b), "sub", bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _node(a.data * b.data, (a, b), "mul", bw)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties route the gradient to the first operand."""
    _same_shape(a, b, "minimum")
    take_a = a.data <= b.data

    def bw(g):
        _accum(a, g * take_a)
        _accum(b, g * ~take_a)

    return _node(np.minimum(a.data, b.data), (a, b), "minimum", bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, -g)

    return _node(-a.data, (a,), "neg", bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        _accum(a, g * c)

    return _node(a.data * c, (a,), "scale", bw)


def add_scalar(a: Tensor, c: float) -> Tensor:
    def bw(g):
        _accum(a, g)

    return _node(a.data + float(c), (a,), "add_scalar", bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)

    return _node(a.data * mask, (a,), "relu", bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        _accum(a, g * out * (1.0 - out))

    return _node(out, (a,), "sigmoid", bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - out * out))

    return _node(out, (a,), "tanh", bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        _accum(a, g * out)

    return _node(out, (a,), "exp", bw)


def clip_value(a: Tensor, lo: float, hi: float) -> Tensor:
    """min(max(x, lo), hi); gradient passes only strictly inside the bounds."""
    if lo > hi:
        raise ConfigError(f"clip_value: lo={lo} > hi={hi}")
    inside = (a.data > lo) & (a.data < hi)

    def bw(g):
        _accum(a, g * inside)

    return _node(np.clip(a.data, lo, hi), (a,), "clip_value", bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, g * 2.0 * a.data)

    return _node(a.data * a.data, (a,), "square", bw)


# ---------------------------------------------------------------- reductions


def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, np.full_like(a.data, float(g)))

    return _node(a.data.sum(), (a,), "sum_all", bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        _accum(a, np.full_like(a.data, float(g) / n))

    return _node(a.data.mean(), (a,), "mean_all", bw)


def global_avg_pool(a: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C] spatial mean."""
    if a.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {a.data.shape}")
    n, c, h, w = a.data.shape

    def bw(g):
        _accum(a, np.broadcast_to(g[:, :, None, None], a.data.shape) / (h * w))

    return _node(a.data.mean(axis=(2, 3)), (a,), "global_avg_pool", bw)


# ---------------------------------------------------------------- structural


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _node(a.data.reshape(shape), (a,), "reshape", bw)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offs = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offs[:-1], offs[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat", bw)


def pick(a: Tensor, idx) -> Tensor:
    """Row-wise column pick: out[n] = a[n, idx[n]]."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.data.shape[0],):
        raise ShapeError(f"pick: got {a.data.shape} and idx {idx.shape}")
    rows = np.arange(a.data.shape[0])

    def bw(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[rows, idx] = g
            _accum(a, ga)

    return _node(a.data[rows, idx], (a,), "pick", bw)


def embedding(table: Tensor, idx) -> Tensor:
    """Row lookup with scatter-add backward: out[n] = table[idx[n]]."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.min(initial=0) < 0 or (idx.size and idx.max() >= table.data.shape[0]):
        raise ContractError(f"embedding index out of range for table of {table.data.shape[0]} rows")

    def bw(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            _accum(table, gt)

    return _node(table.data[idx], (table,), "embedding", bw)


# ---------------------------------------------------------------- dense / conv


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), "matmul", bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x[N,Din] @ weight[Din,Dout] + bias[Dout]."""
    if x.data.ndim != 2:
        raise ShapeError(f"linear expects 2-D input, got {x.data.shape}")
    if x.data.shape[1] != weight.data.shape[0]:
        raise ShapeError(f"linear: input {x.data.shape} incompatible with weight {weight.data.shape}")
    if bias.data.shape != (weight.data.shape[1],):
        raise ShapeError(f"linear: bias {bias.data.shape} incompatible with weight {weight.data.shape}")

    def bw(g):
        _accum(x, g @ weight.data.T)
        _accum(weight, x.data.T @ g)
        _accum(bias, g.sum(axis=0))

    return _node(x.data @ weight.data + bias.data, (x, weight, bias), "linear", bw)


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, k, k, ho, wo), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(gcols: np.ndarray, xshape, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = xshape
    gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    gc = gcols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gc[:, :, i, j]
    if pad:
        return gxp[:, :, pad:-pad, pad:-pad]
    return gxp


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation with zero padding. Input [N,Cin,H,W] or [Cin,H,W]."""
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: input {x.data.shape}, kernel {kernel.data.shape}")
    n, cin, h, w = xd.shape
    cout, kcin, kh, kw = kernel.data.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if kh != kw or kh % 2 == 0:
        raise ConfigError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if stride < 1:
        raise ConfigError(f"conv2d: stride must be >= 1, got {stride}")
    if (h + 2 * pad - kh) % stride or (w + 2 * pad - kw) % stride:
        raise ConfigError(
            f"conv2d: non-integral output size for input {h}x{w}, kernel {kh}, stride {stride}, pad {pad}"
        )
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = _im2col(xp, kh, stride, ho, wo)
    wmat = kernel.data.reshape(cout, cin * kh * kw)
    out = np.matmul(wmat[None], cols).reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    if squeeze:
        out = out[0]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gd = g[None] if squeeze else g
        gflat = gd.reshape(n, cout, ho * wo)
        if kernel.requires_grad:
            gw = np.einsum("nol,nkl->ok", gflat, cols)
            _accum(kernel, gw.reshape(kernel.data.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, gd.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = np.matmul(wmat.T[None], gflat)
            gx = _col2im(gcols, xd.shape, kh, stride, pad, ho, wo)
            _accum(x, gx[0] if squeeze else gx)

    return _node(out, parents, "conv2d", bw)


def depthwise_conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel kxk spatial convolution, stride 1, size-preserving pad."""
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, c, h, w = xd.shape
    kc, kh, kw = kernel.data.shape
    if kc != c or kh != kw or kh % 2 == 0:
        raise ShapeError(f"depthwise_conv2d: input {x.data.shape}, kernel {kernel.data.shape}")
    pad = (kh - 1) // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros_like(xd)
    for i in range(kh):
        for j in range(kw):
            out += kernel.data[None, :, i, j, None, None] * xp[:, :, i : i + h, j : j + w]
    if squeeze:
        out_t = out[0]
    else:
        out_t = out

    def bw(g):
        gd = g[None] if squeeze else g
        if kernel.requires_grad:
            gk = np.zeros_like(kernel.data)
            for i in range(kh):
                for j in range(kw):
                    gk[:, i, j] = (gd * xp[:, :, i : i + h, j : j + w]).sum(axis=(0, 2, 3))
            _accum(kernel, gk)
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gp[:, :, i : i + h, j : j + w] += kernel.data[None, :, i, j, None, None] * gd
            gx = gp[:, :, pad : pad + h, pad : pad + w]
            _accum(x, gx[0] if squeeze else gx)

    return _node(out_t, (x, kernel), "depthwise_conv2d", bw)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    eps: float = 1e-5,
    momentum: float = 0.1,
    stats_ready: bool = True,
) -> Tensor:
    """Per-channel normalization over (N,H,W) with affine transform.

    Train mode uses batch statistics and updates the running arrays
    in place (exponential moving average). Infer mode uses the running
    statistics and requires them to be populated.
    """
    if eps <= 0:
        raise ConfigError(f"batchnorm2d: eps must be > 0, got {eps}")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"batchnorm2d expects [N,C,H,W], got {x.data.shape}")
    n, c, h, w = xd.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batchnorm2d: affine shapes {gamma.data.shape}/{beta.data.shape} for {c} channels")
    if mode == "train":
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    elif mode == "infer":
        if not stats_ready:
            raise StateError("batchnorm2d: infer mode with unpopulated running statistics")
        mean = running_mean
        var = running_var
    else:
        raise ConfigError(f"batchnorm2d: mode must be 'train' or 'infer', got {mode!r}")
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None, None]) * invstd[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g):
        gd = g[None] if squeeze else g
        if beta.requires_grad:
            _accum(beta, gd.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            _accum(gamma, (gd * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxhat = gd * gamma.data[None, :, None, None]
            if mode == "train":
                m = n * h * w
                s1 = gxhat.sum(axis=(0, 2, 3))
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3))
                gx = (invstd[None, :, None, None] / m) * (
                    m * gxhat - s1[None, :, None, None] - xhat * s2[None, :, None, None]
                )
            else:
                gx = gxhat * invstd[None, :, None, None]
            _accum(x, gx[0] if squeeze else gx)

    return _node(out[0] if squeeze else out, (x, gamma, beta), "batchnorm2d", bw)


# ---------------------------------------------------------------- softmax


def log_softmax(logits: Tensor) -> Tensor:
    if logits.data.ndim != 2:
        raise ShapeError(f"log_softmax expects [N,A], got {logits.data.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def bw(g):
        _accum(logits, g - probs * g.sum(axis=1, keepdims=True))

    return _node(out, (logits,), "log_softmax", bw)


def softmax(logits: Tensor) -> Tensor:
    """Probabilities over the last axis of [N,A] logits."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax expects [N,A], got {logits.data.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        _accum(logits, out * (g - (g * out).sum(axis=1, keepdims=True)))

    return _node(out, (logits,), "softmax", bw)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over every element of the squared difference."""
    return mean_all(square(sub(pred, target)))
