"""Small reverse-mode autodiff engine over numpy arrays.

Only the layers a U-Net and its pooling classifier head need are provided.
Arrays are float32 by default; ``precision(np.float64)`` switches the
default dtype for freshly created tensors (used by :func:`grad_check`).
Operations keep whatever dtype their inputs carry.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import SplitMix64

PROB_FLOOR = 1e-12

_state = {"dtype": np.float32, "checked": False}


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf reached an op boundary while checked mode was on."""


class GradCheckError(RuntimeError):
    pass


@contextlib.contextmanager
def precision(dtype):
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def checked_mode(enabled: bool = True):
    prev = _state["checked"]
    _state["checked"] = enabled
    try:
        yield
    finally:
        _state["checked"] = prev


def default_dtype():
    return _state["dtype"]


class Node:
    """A value in the computation graph plus the recipe for its gradient.

    ``backward_fn`` maps the upstream gradient to one gradient per parent
    (``None`` where a parent needs none).
    """

    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "name", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf", name=None,
                 requires_grad=False):
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node<{self.op}{label} shape={self.value.shape} dtype={self.value.dtype}>"


def constant(data, dtype=None) -> Node:
    return Node(np.asarray(data, dtype=dtype or default_dtype()), op="const")


def param(data, name=None, dtype=None) -> Node:
    return Node(np.array(data, dtype=dtype or default_dtype()), op="param", name=name,
                requires_grad=True)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, parents, backward_fn, op) -> Node:
    if _state["checked"] and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite output from {op}")
    needs = any(p.requires_grad for p in parents)
    return Node(value, parents, backward_fn if needs else None, op, requires_grad=needs)


# -- elementwise / reductions -------------------------------------------------

def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _make(a.value + b.value, (a, b), lambda g: (g, g), "add")


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def sum_all(x: Node) -> Node:
    shape, dtype = x.shape, x.value.dtype
    return _make(np.asarray(x.value.sum(), dtype=dtype), (x,),
                 lambda g: (np.full(shape, g, dtype=dtype),), "sum")


def concat_channels(nodes: Sequence[Node]) -> Node:
    """Concatenate along axis 1 (channels)."""
    nodes = [_as_node(n) for n in nodes]
    ref = nodes[0].shape
    for n in nodes[1:]:
        if n.value.ndim != len(ref) or n.shape[:1] + n.shape[2:] != ref[:1] + ref[2:]:
            raise ShapeError(f"concat: {n.shape} incompatible with {ref} outside axis 1")
    splits = np.cumsum([n.shape[1] for n in nodes])[:-1]
    return _make(np.concatenate([n.value for n in nodes], axis=1), nodes,
                 lambda g: tuple(np.split(g, splits, axis=1)), "concat")


def relu(x: Node) -> Node:
    xv = x.value
    mask = xv > 0
    return _make(np.where(mask, xv, 0).astype(xv.dtype), (x,),
                 lambda g: (g * mask,), "relu")


# -- convolutional layers -----------------------------------------------------

def conv2d(x: Node, kernel: Node, bias: Node, padding: int = 0) -> Node:
    """Stride-1 cross-correlation, N×Cin×H×W with Cout×Cin×Kh×Kw -> N×Cout×H'×W'."""
    xv, wv, bv = x.value, kernel.value, bias.value
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {xv.shape}, {wv.shape}")
    n, c, h, w = xv.shape
    cout, cin, kh, kw = wv.shape
    if cin != c:
        raise ShapeError(f"conv2d: input channels {c} != kernel in-channels {cin}")
    if bv.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bv.shape} != ({cout},)")
    if padding < 0:
        raise ShapeError(f"conv2d: negative padding {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = hp - kh + 1, wp - kw + 1

    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # n, c, ho, wo, kh, kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = wv.reshape(cout, -1)
    out = (cols @ wmat.T + bv).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    need_dx = x.requires_grad

    def backward_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dw = (g2.T @ cols).reshape(wv.shape)
        db = g2.sum(axis=0)
        dx = None
        if need_dx:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros((n, c, hp, wp), dtype=xv.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding:padding + h, padding:padding + w]
        return dx, dw, db

    return _make(out, (x, kernel, bias), backward_fn, "conv2d")


def transposed_conv2d(x: Node, kernel: Node, bias: Node | None = None, stride: int = 2) -> Node:
    """Stride-2 transposed convolution with a Cin×Cout×2×2 kernel; doubles H and W."""
    xv, wv = x.value, kernel.value
    if stride != 2:
        raise ShapeError(f"transposed_conv2d: only stride 2 is supported, got {stride}")
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError(f"transposed_conv2d: expected 4-d input and kernel, got {xv.shape}, {wv.shape}")
    n, c, h, w = xv.shape
    cin, cout, kh, kw = wv.shape
    if (kh, kw) != (2, 2):
        raise ShapeError(f"transposed_conv2d: kernel must be 2x2 for stride 2, got {kh}x{kw}")
    if cin != c:
        raise ShapeError(f"transposed_conv2d: input channels {c} != kernel in-channels {cin}")
    if bias is not None and bias.value.shape != (cout,):
        raise ShapeError(f"transposed_conv2d: bias shape {bias.value.shape} != ({cout},)")

    x2 = xv.transpose(0, 2, 3, 1).reshape(-1, c)
    wmat = wv.reshape(cin, -1)
    out = (x2 @ wmat).reshape(n, h, w, cout, 2, 2).transpose(0, 3, 1, 4, 2, 5)
    out = np.ascontiguousarray(out.reshape(n, cout, 2 * h, 2 * w))
    if bias is not None:
        out += bias.value[:, None, None]
    need_dx = x.requires_grad

    def backward_fn(g):
        g2 = g.reshape(n, cout, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(n * h * w, -1)
        dw = (x2.T @ g2).reshape(wv.shape)
        dx = (g2 @ wmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2) if need_dx else None
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, backward_fn, "transposed_conv2d")


def maxpool2d(x: Node, window: int = 2) -> Node:
    """2×2 max pooling; ties go to the first element in row-major window order."""
    xv = x.value
    if window != 2:
        raise ShapeError(f"maxpool2d: only window 2 is supported, got {window}")
    if xv.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-d input, got {xv.shape}")
    n, c, h, w = xv.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: spatial dims must be even, got H={h}, W={w}")
    h2, w2 = h // 2, w // 2
    xr = xv.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = xr.argmax(axis=-1)[..., None]
    out = np.take_along_axis(xr, idx, axis=-1)[..., 0]

    def backward_fn(g):
        gr = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gr, idx, g[..., None], axis=-1)
        return (gr.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _make(out, (x,), backward_fn, "maxpool2d")


# -- heads and losses ---------------------------------------------------------

def softmax_channels(x: Node) -> Node:
    """Softmax over axis 1; works for N×C×H×W maps and N×C score rows."""
    xv = x.value
    if xv.ndim < 2 or xv.shape[1] < 2:
        raise ShapeError(f"softmax_channels: need at least 2 channels on axis 1, got {xv.shape}")
    e = np.exp(xv - xv.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (x,), backward_fn, "softmax")


def cross_entropy_pixelwise(probs: Node, target) -> Node:
    """Mean of -log p[target] over every pixel (or row), with p floored at 1e-12.

    ``target`` holds 0-based class indices shaped like ``probs`` minus axis 1.
    """
    pv = probs.value
    t = np.asarray(target)
    if t.shape != pv.shape[:1] + pv.shape[2:]:
        raise ShapeError(f"cross_entropy: target shape {t.shape} does not match probs {pv.shape}")
    if not np.issubdtype(t.dtype, np.integer):
        raise ValueError(f"cross_entropy: target must be integer class indices, got {t.dtype}")
    n_classes = pv.shape[1]
    if t.size and (t.min() < 0 or t.max() >= n_classes):
        raise ValueError(f"cross_entropy: target index outside [0, {n_classes})")
    idx = t[:, None].astype(np.intp)
    picked = np.take_along_axis(pv, idx, axis=1)
    clamped = np.maximum(picked, pv.dtype.type(PROB_FLOOR))
    count = t.size
    loss = np.asarray(-np.log(clamped).mean(), dtype=pv.dtype)

    def backward_fn(g):
        dp = np.zeros_like(pv)
        local = np.where(picked >= PROB_FLOOR, -g / (count * clamped), 0).astype(pv.dtype)
        np.put_along_axis(dp, idx, local, axis=1)
        return (dp,)

    return _make(loss, (probs,), backward_fn, "cross_entropy")


def global_avg_pool_channels(x: Node) -> Node:
    xv = x.value
    if xv.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected N×C×H×W, got {xv.shape}")
    n, c, h, w = xv.shape
    scale = xv.dtype.type(1.0 / (h * w))

    def backward_fn(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], xv.shape).copy(),)

    return _make(xv.mean(axis=(2, 3)), (x,), backward_fn, "gap")


def fully_connected(x: Node, weight: Node, bias: Node) -> Node:
    xv, wv, bv = x.value, weight.value, bias.value
    if xv.ndim != 2 or wv.ndim != 2 or wv.shape[1] != xv.shape[1] or bv.shape != (wv.shape[0],):
        raise ShapeError(
            f"fully_connected: input {xv.shape}, weight {wv.shape}, bias {bv.shape} do not agree")

    def backward_fn(g):
        return g @ wv, g.T @ xv, g.sum(axis=0)

    return _make(xv @ wv.T + bv, (x, weight, bias), backward_fn, "fully_connected")


# -- backward pass ------------------------------------------------------------

def _topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
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
        for parent in reversed(node.parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node, params: Iterable[Node] = ()) -> None:
    """Populate ``.grad`` on every node that leads to ``loss``.

    Nodes listed in ``params`` that the loss does not depend on receive an
    all-zero gradient.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss) if loss.requires_grad else []
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.backward_fn(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
    reached = {id(n) for n in order}
    for p in params:
        if id(p) not in reached or p.grad is None:
            p.grad = np.zeros_like(p.value)


# -- verification -------------------------------------------------------------

def grad_check(builder: Callable[[Mapping[str, Node]], Node],
               input_shapes: Mapping[str, tuple], seed: int, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``builder`` receives named float64 parameter nodes (values uniform in
    [-1, 1) from the seeded stream) and returns a scalar loss node. The error
    per element is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if not input_shapes:
        raise GradCheckError("no parameters")
    rng = SplitMix64(seed)
    values = {name: rng.uniform(tuple(shape), -1.0, 1.0) for name, shape in input_shapes.items()}

    def evaluate(vals):
        nodes = {name: param(v, name=name, dtype=np.float64) for name, v in vals.items()}
        return nodes, builder(nodes)

    worst = 0.0
    with precision(np.float64), checked_mode():
        try:
            nodes, loss = evaluate(values)
        except NonFiniteError as exc:
            raise GradCheckError(f"non-finite forward value at the initial point: {exc}") from exc
        backward(loss, nodes.values())
        for name, v in values.items():
            analytic = nodes[name].grad
            flat = v.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                try:
                    flat[i] = orig + step
                    plus = float(evaluate(values)[1].value)
                    flat[i] = orig - step
                    minus = float(evaluate(values)[1].value)
                except NonFiniteError as exc:
                    raise GradCheckError(f"non-finite value while probing parameter {name!r}[{i}]") from exc
                finally:
                    flat[i] = orig
                num = (plus - minus) / (2 * step)
                a = float(analytic.reshape(-1)[i])
                if not np.isfinite(num) or not np.isfinite(a):
                    raise GradCheckError(f"non-finite gradient for parameter {name!r}[{i}]")
                worst = max(worst, abs(a - num) / max(1e-8, abs(a) + abs(num)))
    return worst
