"""Dense float64 tensors with a reverse-mode tape.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the upstream gradient back to them.  :func:`backward`
walks the resulting DAG in reverse topological order.  :class:`Graph`
is a read-only view of that DAG used for structural inspection.
"""

from __future__ import annotations

import hashlib
from collections.abc import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "tag", "name", "branch")

    def __init__(self, data, requires_grad=False, name=None, *, parents=(), op="const", tag=None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self.backward_fn: Callable[[np.ndarray], None] | None = None
        self.op = op
        self.tag = tag
        self.name = name
        # branch choice of a piecewise op (relu mask, pool argmax); None if smooth
        self.branch: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        label = self.name or self.tag or self.op
        return f"Tensor({label}, shape={self.shape})"

    def __add__(self, other):
        return residual_add(self, other)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def _node(data, parents, op, tag=None):
    return Tensor(data, requires_grad=_needs_grad(*parents), parents=parents, op=op, tag=tag)


def constant(data, tag=None) -> Tensor:
    return Tensor(data, tag=tag)


def zeros(shape, tag=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), tag=tag)


# --------------------------------------------------------------------------
# elementwise / structural ops
# --------------------------------------------------------------------------


def residual_add(a: Tensor, b: Tensor, tag=None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"residual_add: shapes {a.shape} and {b.shape} differ")
    out = _node(a.data + b.data, (a, b), "add", tag)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    out.backward_fn = backward_fn
    return out


def add_n(terms: Sequence[Tensor], tag=None) -> Tensor:
    """Elementwise sum of equally shaped tensors, summed left to right."""
    terms = list(terms)
    if not terms:
        raise ShapeError("add_n: no operands")
    shape = terms[0].shape
    for t in terms[1:]:
        if t.shape != shape:
            raise ShapeError(f"add_n: shapes {shape} and {t.shape} differ")
    data = terms[0].data.copy()
    for t in terms[1:]:
        data += t.data
    out = _node(data, tuple(terms), "add_n", tag)

    def backward_fn(g):
        for t in terms:
            if t.requires_grad:
                t.accumulate(g)

    out.backward_fn = backward_fn
    return out


def scale(x: Tensor, c: float, tag=None) -> Tensor:
    out = _node(x.data * c, (x,), "scale", tag)

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate(g * c)

    out.backward_fn = backward_fn
    return out


def relu(x: Tensor, tag=None) -> Tensor:
    mask = x.data > 0
    out = _node(np.maximum(x.data, 0.0), (x,), "relu", tag)
    out.branch = mask

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate(g * mask)

    out.backward_fn = backward_fn
    return out


def global_avg_pool(x: Tensor, tag=None) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = _node(x.data.mean(axis=(2, 3)), (x,), "gap", tag)

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate(np.broadcast_to(g[:, :, None, None] / (h * w), x.shape))

    out.backward_fn = backward_fn
    return out


def dense(x: Tensor, weight: Tensor, bias: Tensor, tag=None) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} does not match {weight.shape[1]} outputs")
    out = _node(x.data @ weight.data + bias.data, (x, weight, bias), "dense", tag)

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate(g @ weight.data.T)
        if weight.requires_grad:
            weight.accumulate(x.data.T @ g)
        if bias.requires_grad:
            bias.accumulate(g.sum(axis=0))

    out.backward_fn = backward_fn
    return out


# --------------------------------------------------------------------------
# convolution and pooling
# --------------------------------------------------------------------------


def _out_extent(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, pad: int = 0, tag=None) -> Tensor:
    """Cross-correlation of an NCHW input with an OIKK kernel (no bias)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIKK weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if i != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {i}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} or pad={pad}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    ho, wo = _out_extent(h, kh, stride, pad), _out_extent(w, kw, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, Ho, Wo, C, kh, kw) -> rows of the im2col matrix
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    y = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = _node(y, (x, weight), "conv2d", tag)

    def backward_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        if weight.requires_grad:
            weight.accumulate((gmat.T @ cols).reshape(weight.shape))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros(xp.shape, dtype=DTYPE)
            for a in range(kh):
                for b in range(kw):
                    dxp[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += dcols[
                        :, :, :, :, a, b
                    ].transpose(0, 3, 1, 2)
            x.accumulate(dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp)

    out.backward_fn = backward_fn
    return out


def max_pool2d(x: Tensor, k: int, stride: int, pad: int = 0, tag=None) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = _out_extent(h, k, stride, pad), _out_extent(w, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win.reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    out = _node(y, (x,), "max_pool2d", tag)
    out.branch = arg

    def backward_fn(g):
        if not x.requires_grad:
            return
        dxp = np.zeros(xp.shape, dtype=DTYPE)
        for a in range(k):
            for b in range(k):
                sel = g * (arg == a * k + b)
                dxp[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += sel
        x.accumulate(dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp)

    out.backward_fn = backward_fn
    return out


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    train: bool = True,
    momentum: float = 0.9,
    tag=None,
) -> Tensor:
    """Per-channel batch normalization of an NCHW tensor.

    In train mode the batch statistics are used and the running buffers are
    updated in place as ``running = momentum * running + (1 - momentum) * batch``.
    In eval mode the running buffers are used and left untouched.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if n == 0:
        raise ShapeError("batch_norm: empty batch")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},)")
    if eps <= 0:
        raise ValueError("batch_norm: eps must be positive")
    m = n * h * w
    if train:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        unbiased = var * m / (m - 1) if m > 1 else var
        running_var *= momentum
        running_var += (1 - momentum) * unbiased
    else:
        mean, var = running_mean, running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * invstd[None, :, None, None]
    y = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    out = _node(y, (x, gamma, beta), "batch_norm", tag)

    def backward_fn(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        gx = g * gamma.data[None, :, None, None]
        if train:
            s1 = gx.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = (gx * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            x.accumulate((gx - s1 / m - xhat * s2 / m) * invstd[None, :, None, None])
        else:
            x.accumulate(gx * invstd[None, :, None, None])

    out.backward_fn = backward_fn
    return out


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def sigmoid(z):
    return expit(np.asarray(z, dtype=DTYPE))


def sigmoid_bce_loss(logit: Tensor, label, tag=None) -> Tensor:
    """Mean binary cross-entropy on raw logits, in log-sum-exp form."""
    y = np.asarray(label, dtype=DTYPE).reshape(logit.shape)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("sigmoid_bce_loss: labels must be 0 or 1")
    z = logit.data
    n = z.shape[0] if z.ndim else 1
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = _node(np.array(per.sum() / n), (logit,), "bce", tag)

    def backward_fn(g):
        if logit.requires_grad:
            logit.accumulate(g * (sigmoid(z) - y) / n)

    out.backward_fn = backward_fn
    return out


# --------------------------------------------------------------------------
# graph traversal and backprop
# --------------------------------------------------------------------------


def topological_order(outputs: Iterable[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    for root in outputs:
        if id(root) in seen:
            continue
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node.parents):
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor requiring grad."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = topological_order([loss])
    for node in order:
        if node.parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None and node.requires_grad:
            node.backward_fn(node.grad)


def branch_signature(outputs: Iterable[Tensor]) -> bytes:
    """Digest of every piecewise branch taken while computing ``outputs``.

    Two evaluations with equal signatures lie on the same smooth piece.
    """
    h = hashlib.blake2b(digest_size=16)
    for node in topological_order(outputs):
        if node.branch is not None:
            h.update(np.ascontiguousarray(node.branch).tobytes())
    return h.digest()


class Graph:
    """Topologically ordered view of the DAG that produced ``outputs``."""

    def __init__(self, outputs: Sequence[Tensor]):
        self.outputs = list(outputs)
        self.nodes = topological_order(self.outputs)
        self.index = {id(n): i for i, n in enumerate(self.nodes)}

    def __len__(self):
        return len(self.nodes)

    @property
    def parameters(self) -> dict[str, Tensor]:
        return {n.name: n for n in self.nodes if n.name is not None and n.requires_grad and not n.parents}

    def inputs_of(self, node: Tensor) -> list[int]:
        return [self.index[id(p)] for p in node.parents]

    def tagged(self, prefix: str = "") -> list[Tensor]:
        return [n for n in self.nodes if n.tag is not None and n.tag.startswith(prefix)]

    def ancestors(self, node: Tensor) -> list[Tensor]:
        return topological_order([node])[:-1]

    def is_acyclic(self) -> bool:
        return all(i < self.index[id(n)] for n in self.nodes for i in self.inputs_of(n))
