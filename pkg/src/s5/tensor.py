"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is a dynamic tape: every op links its output tensor to its
parents and stores a vector-Jacobian closure. `backward` walks the tape
once in reverse topological order. Compute is 64-bit throughout so
finite-difference gradient checks stay tight; stability tricks (row-max
subtraction, log-sum-exp) are applied wherever logs of softmax appear.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import DimensionError, GraphStateError

# recording state is per-thread: parallel no-grad evaluation in worker
# threads must never flip recording off under the training thread
_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (pseudo-label passes, eval)."""
    prev = _recording()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A contiguous row-major float64 array plus an optional grad buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_backward_done")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _make(data, parents, vjp):
    """Wrap an op result, recording the tape node only when grads can flow."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._vjp is not None for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def backward(loss: Tensor):
    """Populate grad buffers of every tensor reachable from `loss`.

    Reverse traversal visits each tape node exactly once. Calling this a
    second time on the same loss raises GraphStateError.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._backward_done:
        raise GraphStateError("backward already ran on this graph; rebuild the forward pass first")
    loss._backward_done = True

    # Iterative post-order DFS: creation links are acyclic by construction.
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent.grad += g


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; a 1-D `b` broadcasts over the rows of a 2-D `a` (bias)."""
    if a.data.shape == b.data.shape:
        def vjp(g):
            return g, g
    elif a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        def vjp(g):
            return g, g.sum(axis=0)
    else:
        raise DimensionError(f"add shape mismatch: {a.data.shape} + {b.data.shape}")
    return _make(a.data + b.data, (a, b), vjp)


def mul(a: Tensor, s) -> Tensor:
    """Multiply by a python scalar or an equal-shaped tensor."""
    if isinstance(s, Tensor):
        if a.data.shape != s.data.shape:
            raise DimensionError(f"mul shape mismatch: {a.data.shape} * {s.data.shape}")

        def vjp(g):
            return g * s.data, g * a.data

        return _make(a.data * s.data, (a, s), vjp)
    c = float(s)

    def vjp_scalar(g):
        return (g * c,)

    return _make(a.data * c, (a,), vjp_scalar)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), vjp)


def _scalar(g) -> float:
    return float(np.asarray(g).reshape(-1)[0])


def sum_all(x: Tensor) -> Tensor:
    def vjp(g):
        return (np.full_like(x.data, _scalar(g)),)

    return _make(np.array(x.data.sum()), (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return _make(x.data.reshape(shape), (x,), vjp)


def transpose2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose2d needs rank 2, got {x.data.shape}")

    def vjp(g):
        return (g.T,)

    return _make(x.data.T.copy(), (x,), vjp)


def slice_cols(x: Tensor, j0: int, j1: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= j0 <= j1 <= x.data.shape[1]):
        raise DimensionError(f"slice_cols [{j0}:{j1}] invalid for shape {x.data.shape}")

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[:, j0:j1] = g
        return (gx,)

    return _make(x.data[:, j0:j1].copy(), (x,), vjp)


def concat_cols(parts) -> Tensor:
    """Concatenate 2-D tensors along the channel (column) axis."""
    parts = list(parts)
    rows = {p.data.shape[0] for p in parts}
    if any(p.data.ndim != 2 for p in parts) or len(rows) != 1:
        raise DimensionError(
            "concat_cols needs rank-2 operands with equal row counts, got "
            + ", ".join(str(p.data.shape) for p in parts)
        )
    widths = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), vjp)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Channel concatenation of two token/feature blocks."""
    return concat_cols([a, b])


def linear_cat(x: Tensor, pairs) -> Tensor:
    """Apply several (weight, bias) linears to `x` and concatenate the outputs.

    The forward pass fuses the weights column-wise and runs one matmul, so
    a linear split into column blocks reproduces the unsplit linear
    bit-for-bit. Gradients are routed back to each weight/bias separately.
    """
    pairs = list(pairs)
    if x.data.ndim != 2:
        raise DimensionError(f"linear_cat input must be rank 2, got {x.data.shape}")
    for w, b in pairs:
        if w.data.ndim != 2 or w.data.shape[0] != x.data.shape[1] or b.data.shape != (w.data.shape[1],):
            raise DimensionError(
                f"linear_cat operand mismatch: x {x.data.shape}, w {w.data.shape}, b {b.data.shape}"
            )
    w_cat = np.concatenate([w.data for w, _ in pairs], axis=1)
    b_cat = np.concatenate([b.data for _, b in pairs])
    out = x.data @ w_cat
    out = out + b_cat
    widths = [w.data.shape[1] for w, _ in pairs]
    offsets = np.cumsum([0] + widths)
    parents = (x,) + tuple(t for pair in pairs for t in pair)

    def vjp(g):
        grads = [g @ w_cat.T]
        for i in range(len(pairs)):
            gi = g[:, offsets[i]:offsets[i + 1]]
            grads.append(x.data.T @ gi)
            grads.append(gi.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, vjp)


def gather_rows(x: Tensor, index) -> Tensor:
    """Row permutation; the gradient applies the inverse permutation."""
    index = np.asarray(index, dtype=np.int64)
    inverse = np.empty_like(index)
    inverse[index] = np.arange(index.size)

    def vjp(g):
        return (g[inverse],)

    return _make(x.data[index], (x,), vjp)


def softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows needs rank 2, got {x.data.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        inner = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - inner),)

    return _make(s, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    if x.data.ndim != 2 or gain.data.shape != (x.data.shape[1],) or bias.data.shape != (x.data.shape[1],):
        raise DimensionError(
            f"layer_norm shapes: x {x.data.shape}, gain {gain.data.shape}, bias {bias.data.shape}"
        )
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data
    d = x.data.shape[1]

    def vjp(g):
        g_xhat = g * gain.data
        # d xhat / dx for a shared per-row mean and variance
        gx = inv_std * (
            g_xhat
            - g_xhat.mean(axis=1, keepdims=True)
            - xhat * (g_xhat * xhat).sum(axis=1, keepdims=True) / d
        )
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _make(out, (x, gain, bias), vjp)


def cross_entropy_masked(logits: Tensor, labels, mask) -> Tensor:
    """Mean over masked-in rows of -log softmax(logits)[label].

    An all-zero mask yields a constant 0 scalar detached from the graph, so
    a fully gated unsupervised branch contributes nothing to gradients.
    """
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask)
    n, k = logits.data.shape
    if labels.shape != (n,) or mask.shape != (n,):
        raise DimensionError(
            f"cross_entropy_masked: logits {logits.data.shape}, labels {labels.shape}, mask {mask.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range [0, {k})")
    sel = mask.astype(bool)
    count = int(sel.sum())
    if count == 0:
        return Tensor(np.array(0.0))

    row_max = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - row_max
    lse = np.log(np.exp(shifted).sum(axis=1)) + row_max[:, 0]
    nll = lse - logits.data[np.arange(n), labels]
    loss = nll[sel].sum() / count

    def vjp(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        p *= (sel / count)[:, None]
        return (p * _scalar(g),)

    return _make(np.array(loss), (logits,), vjp)
