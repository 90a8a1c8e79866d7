"""Dense tensors and a reverse-mode differentiation tape.

Every primitive op computes its forward value eagerly with numpy. When a
:class:`Tape` is active and at least one input requires a gradient, the op
also appends a node holding a local backward rule. ``Tape.backward`` walks
the nodes in exact reverse execution order and accumulates gradients
additively, so a weight reused at every timestep receives the sum of its
per-step contributions.

Outside an active tape the ops behave like plain numpy functions, which is
how evaluation and the landscape scans run.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float64

_ACTIVE: list["Tape"] = []


class Tensor:
    """An n-dimensional array that can take part in a tape."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(dtype or DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple, output: Tensor, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Gradients(dict):
    """Tensor -> gradient array; tensors never reached map to zeros."""

    def __missing__(self, key):
        return np.zeros_like(key.data)


class Tape:
    """Records primitive ops between ``__enter__`` and ``__exit__``.

    A new tape is built for every forward pass.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, output: Tensor | None = None, seed=None) -> Gradients:
        """Propagate ``seed`` from ``output`` back to every leaf.

        ``seed`` defaults to ones shaped like ``output``. Returns a mapping
        from each leaf tensor with ``requires_grad`` to its total gradient.
        """
        grads = Gradients()
        if output is None:
            if not self.nodes:
                return grads
            output = self.nodes[-1].output
        seed = np.ones_like(output.data) if seed is None else np.asarray(seed, dtype=output.dtype)
        if seed.shape != output.shape:
            raise ShapeError(f"seed shape {seed.shape} does not match output shape {output.shape}")

        produced = {id(n.output) for n in self.nodes}
        acc: dict[int, np.ndarray] = {id(output): seed.copy()}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = acc.pop(id(node.output), None)
            if g is None:
                continue
            local = node.backward(g)
            for inp, gi in zip(node.inputs, local):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in acc:
                    acc[key] = acc[key] + gi
                else:
                    acc[key] = gi
                if key not in produced:
                    leaves[key] = inp
        for key, t in leaves.items():
            grads[t] = acc.get(key, np.zeros_like(t.data))
        if id(output) not in produced and output.requires_grad:
            grads[output] = seed
        return grads


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _record(op: str, inputs: tuple, out: np.ndarray, backward: Callable) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(op, inputs, result, backward))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _record("mul", (a, b), a.data * b.data,
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record("square", (a,), a.data * a.data, lambda g: (2.0 * a.data * g,))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return _record("broadcast", (a,), out, lambda g: (_unbroadcast(g, a.shape),))


def custom(forward: Callable, backward: Callable, *inputs, op: str = "custom") -> Tensor:
    """Node with caller-supplied rules.

    ``forward(*arrays) -> array``; ``backward(g, out, *arrays) -> tuple`` of
    input gradients (``None`` for inputs without one). Used for the spike
    function, whose backward pass is a surrogate rather than its derivative.
    """
    inputs = tuple(as_tensor(x) for x in inputs)
    arrays = [t.data for t in inputs]
    out = forward(*arrays)

    def bwd(g):
        res = backward(g, out, *arrays)
        return res if isinstance(res, tuple) else (res,)

    return _record(op, inputs, out, bwd)


# ---------------------------------------------------------------------------
# shape and reductions
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def take(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record("take", (a,), np.array(out, copy=True), bwd)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    return _record("stack", tensors, out,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), out, bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra and layers
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _record("matmul", (a, b), a.data @ b.data,
                   lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` for x (N, in), w (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    inputs = (x, w) if b is None else (x, w, as_tensor(b))
    out = x.data @ w.data.T
    if b is not None:
        out = out + inputs[2].data

    def bwd(g):
        grads = (g @ w.data, g.T @ x.data)
        return grads if b is None else grads + (g.sum(axis=0),)

    return _record("linear", inputs, out, bwd)


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """(N, C, H, W) -> (N, H', W', C, k, k) patch view over a zero-padded input."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5)


def conv2d(x, w, b=None, padding: int | None = None) -> Tensor:
    """Stride-1 2-D convolution (cross-correlation) via explicit patch gather.

    x: (N, C, H, W); w: (O, C, k, k). ``padding`` defaults to ``k // 2``
    which keeps spatial size for odd kernels.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} does not match weight {w.shape}")
    k = w.shape[2]
    pad = k // 2 if padding is None else padding
    n, c, h, wd = x.shape
    o = w.shape[0]
    cols = _im2col(x.data, k, pad)
    ho, wo = cols.shape[1], cols.shape[2]
    cols2 = cols.reshape(n * ho * wo, c * k * k)
    wmat = w.data.reshape(o, c * k * k)
    out = (cols2 @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    inputs = (x, w)
    if b is not None:
        bt = as_tensor(b)
        inputs = (x, w, bt)
        out = out + bt.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols2).reshape(w.shape)
        gcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
        gx = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + ho, j:j + wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if pad:
            gx = gx[:, :, pad:pad + h, pad:pad + wd]
        grads = (gx, gw)
        if b is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    return _record("conv2d", inputs, out, bwd)


def avg_pool2d(x, k: int) -> Tensor:
    """Non-overlapping k x k average pooling; trailing rows/cols that do not fill a window are dropped."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d: expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise ShapeError(f"avg_pool2d: window {k} larger than input {x.shape}")
    crop = x.data[:, :, :ho * k, :wo * k]
    out = crop.reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))

    def bwd(g):
        up = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        if (ho * k, wo * k) != (h, w):
            full = np.zeros_like(x.data)
            full[:, :, :ho * k, :wo * k] = up
            up = full
        return (up,)

    return _record("avg_pool2d", (x,), out, bwd)


def batch_norm(x, gamma, beta, axes: tuple, eps: float) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize ``x`` over ``axes`` with batch statistics, then apply the affine.

    ``gamma``/``beta`` must broadcast against ``x``. Returns the output
    together with the batch mean and biased variance (plain arrays).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data
    m = x.size // mu.size

    def bwd(g):
        gxhat = g * gamma.data
        gx = inv / m * (m * gxhat - gxhat.sum(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        return (gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape))

    return _record("batch_norm", (x, gamma, beta), out, bwd), mu, var


def log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean over rows of -log softmax(logits)[label]; logits (N, K), labels (N,)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"class index out of range [0, {k})")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    out = np.asarray(-logp[rows, labels].mean())

    def bwd(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _record("softmax_ce", (logits,), out, bwd)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

class GradCheckError(RuntimeError):
    """Raised when the loss is not finite at a perturbed point."""

    def __init__(self, failures):
        self.failures = failures
        lines = ", ".join(f"{name}[{idx}]" for name, idx in failures[:5])
        super().__init__(f"non-finite loss at perturbed points: {lines}")


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               max_entries: int | None = None, seed: int = 0, richardson: bool = False,
               reference: tuple[Callable[[], Tensor], Sequence[Tensor]] | None = None) -> float:
    """Compare tape gradients against central differences.

    ``f`` builds a scalar loss from the current values of ``params``. Returns
    ``max |analytic - numeric| / (|numeric| + 1e-12)`` over the checked
    entries. ``max_entries`` limits the number of entries probed per
    parameter (chosen with a fixed seed) to keep large checks fast.

    With ``richardson`` the numeric slope is ``(4 D(eps/2) - D(eps)) / 3``,
    which cancels the eps**2 error term. ``reference = (f_ref, params_ref)``
    takes the differences on a copy of the program instead, typically one in
    extended precision, so that gradients far below the loss scale are not
    lost to round-off; its losses are kept in their own dtype.
    """
    with Tape() as tape:
        loss = f()
    grads = tape.backward(loss)
    f_num, p_num = reference if reference is not None else (f, params)
    if len(p_num) != len(params):
        raise ShapeError("reference program has a different parameter list")
    rng = np.random.default_rng(seed)
    worst = 0.0
    failures = []
    for p_idx, (p, q) in enumerate(zip(params, p_num)):
        if q.shape != p.shape:
            raise ShapeError(f"reference parameter {p_idx} has shape {q.shape}, expected {p.shape}")
        analytic = grads[p]
        flat = q.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            slopes = []
            for h in ((eps, eps / 2.0) if richardson else (eps,)):
                flat[i] = orig + h
                fp = f_num().data[()]
                flat[i] = orig - h
                fm = f_num().data[()]
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    break
                slopes.append((fp - fm) / (2.0 * h))
            if len(slopes) < (2 if richardson else 1):
                failures.append((p.name or f"param{p_idx}", int(i)))
                continue
            num = (4.0 * slopes[1] - slopes[0]) / 3.0 if richardson else slopes[0]
            err = float(abs(analytic.reshape(-1)[i] - num) / (abs(num) + 1e-12))
            worst = max(worst, err)
    if failures:
        raise GradCheckError(failures)
    return worst
