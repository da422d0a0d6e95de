"""Dense neural-network substrate: reverse-mode autodiff over numpy arrays.

Everything in the suite trains through this module: `Tensor` records the
computation graph, `backward` runs the reverse pass, `Mlp` holds dense
layers, and `Adam` applies updates. Only the pieces the benchmark needs are
implemented (dense layers, leaky-relu, softmax losses); there is no GPU,
convolution, or graph compilation.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64

LEAK = 0.2  # leaky-relu slope on the negative side

ACTIVATIONS = ("lrelu", "linear", "softmax")


class ShapeError(ValueError):
    """Operand shapes do not line up."""


class ArchitectureError(ValueError):
    """Layer widths or activation tags describe an impossible network."""


class DivergenceError(RuntimeError):
    """A loss or gradient stopped being finite during training."""


_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording (cheap eval passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Array node in the computation graph.

    Leaf tensors created with ``requires_grad=True`` receive gradients in
    ``.grad`` after ``backward``. Tensors produced by ops carry the closure
    needed to push gradients to their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data, parents, bwd) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _from_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _from_op(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _from_op(a.data * c, (a,), lambda g: (g * c,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _from_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"cannot matmul {a.data.shape} with {b.data.shape}")
    return _from_op(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def linear(x, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine layer ``x @ W + b`` with the bias broadcast over the batch."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"linear expects a (batch, features) input, got {x.data.shape}")
    if x.data.shape[1] != weight.data.shape[0]:
        raise ShapeError(
            f"input width {x.data.shape[1]} does not match layer fan-in {weight.data.shape[0]}"
        )
    return _from_op(
        x.data @ weight.data + bias.data,
        (x, weight, bias),
        lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0)),
    )


def leaky_relu(x, leak: float = LEAK) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, leak * x.data)
    return _from_op(out, (x,), lambda g: (np.where(pos, g, leak * g),))


def softmax(x) -> Tensor:
    """Row-wise softmax over the last axis, max-subtracted for stability."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _from_op(s, (x,), bwd)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)
    return _from_op(out, (x,), lambda g: (g - soft * g.sum(axis=-1, keepdims=True),))


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _from_op(out, (x,), bwd)


def tmean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return scale(tsum(x, axis=axis), 1.0 / n)


def min_along_last(x) -> Tensor:
    """Minimum over the last axis; the gradient flows only to the (first) argmin."""
    x = as_tensor(x)
    idx = x.data.argmin(axis=-1)
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return _from_op(out, (x,), bwd)


def concat(parts, axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=axis)
    return _from_op(out, tuple(parts), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(parts, axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.stack([p.data for p in parts], axis=axis)
    return _from_op(out, tuple(parts), lambda g: tuple(np.moveaxis(g, axis, 0)))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.data.shape),))


def broadcast_rows(x, rows: int) -> Tensor:
    """Broadcast a (1, k) tensor to (rows, k)."""
    x = as_tensor(x)
    out = np.broadcast_to(x.data, (rows,) + x.data.shape[1:]).copy()
    return _from_op(out, (x,), lambda g: (g.sum(axis=0, keepdims=True),))


def select_columns(x, index: np.ndarray) -> Tensor:
    """Pick one entry per row: ``out[i] = x[i, index[i]]``."""
    x = as_tensor(x)
    index = np.asarray(index)
    rows = np.arange(x.data.shape[0])
    out = x.data[rows, index]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, index), g)
        return (gx,)

    return _from_op(out, (x,), bwd)


def stop_gradient(x) -> Tensor:
    """Detach a value from the graph; no gradient flows upstream of it."""
    x = as_tensor(x)
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred, target) -> Tensor:
    """Squared error summed over feature dims, averaged over the batch."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"mse shapes differ: {pred.data.shape} vs {target.data.shape}")
    sq = square(sub(pred, target))
    if pred.data.ndim <= 1:
        return tsum(sq)
    per_example = tsum(reshape(sq, (pred.data.shape[0], -1)), axis=1)
    return tmean(per_example)


def cross_entropy_loss(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    logits = as_tensor(logits)
    if logits.data.ndim == 1:
        logits = reshape(logits, (1, -1))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    width = logits.data.shape[1]
    if labels.min() < 0 or labels.max() >= width:
        raise IndexError(f"label out of range for {width} classes")
    picked = select_columns(log_softmax(logits), labels)
    return scale(tmean(picked), -1.0)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every reachable leaf's .grad."""
    if loss.data.size != 1:
        raise ShapeError("backward expects a scalar loss")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any recorded computation")

    topo: list[Tensor] = []
    seen = set()
    stack_ = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._bwd is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._bwd(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------------------
# layers and optimizer


class Mlp:
    """Stack of dense layers with per-layer activation tags.

    ``activations`` defaults to the hidden activation after every layer but
    the last, which stays linear. Weights are fan-based uniform
    (±sqrt(6/(fan_in+fan_out))), biases zero; the same seed reproduces the
    parameters bit for bit.
    """

    def __init__(self, widths, hidden_activation: str = "lrelu",
                 activations=None, seed: int = 0, rng=None):
        widths = list(widths)
        if len(widths) < 2:
            raise ArchitectureError("an MLP needs at least an input and an output width")
        if any(w < 1 for w in widths):
            raise ArchitectureError(f"layer widths must be positive, got {widths}")
        if activations is None:
            activations = [hidden_activation] * (len(widths) - 2) + ["linear"]
        if len(activations) != len(widths) - 1:
            raise ArchitectureError("need one activation tag per layer")
        for tag in activations:
            if tag not in ACTIVATIONS:
                raise ArchitectureError(f"unknown activation {tag!r}")

        if rng is None:
            rng = np.random.default_rng(seed)
        self.widths = widths
        self.activations = list(activations)
        self.layers: list[tuple[Tensor, Tensor, str]] = []
        for fan_in, fan_out, tag in zip(widths[:-1], widths[1:], activations):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
            b = Tensor(np.zeros(fan_out), requires_grad=True)
            self.layers.append((w, b, tag))

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        squeeze = x.data.ndim == 1
        if squeeze:
            x = reshape(x, (1, -1))
        for w, b, tag in self.layers:
            x = linear(x, w, b)
            if tag == "lrelu":
                x = leaky_relu(x)
            elif tag == "softmax":
                x = softmax(x)
        if squeeze:
            x = reshape(x, (-1,))
        return x

    def params(self) -> list[Tensor]:
        out = []
        for w, b, _ in self.layers:
            out.extend((w, b))
        return out

    def param_arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.params()]

    def load_arrays(self, arrays) -> None:
        params = self.params()
        if len(arrays) != len(params):
            raise ArchitectureError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, arr in zip(params, arrays):
            arr = np.asarray(arr, dtype=DTYPE)
            if arr.shape != p.data.shape:
                raise ShapeError(f"array shape {arr.shape} does not fit parameter {p.data.shape}")
            p.data = arr.copy()


class Adam:
    """Adam with bias correction. ``step`` consumes and clears .grad."""

    def __init__(self, params, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise DivergenceError("non-finite gradient in Adam step")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None
