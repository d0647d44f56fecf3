"""A small reverse-mode autodiff engine on numpy arrays.

Only the operations the two referencing networks need are provided. Image
tensors are channels-last ``(batch, height, width, channels)``; height is the
temporal axis and width the feature axis. Everything runs in float64.
"""

from __future__ import annotations

import contextlib
import io
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DegenerateVector, ShapeError, StoreError, UsageError

COS_CLAMP = 1e-7
PROB_CLAMP = 1e-12

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "op")

    def __init__(self, data, requires_grad: bool = False, parents: Sequence["Tensor"] = (),
                 backward: Optional[Callable] = None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        assert np.isfinite(self.data).all(), f"non-finite values produced by {op or 'input'}"
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward
        self._consumed = False
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate gradients into every tensor of the recorded graph.

        The graph is released afterwards; a second call on the same root
        raises :class:`UsageError`.
        """
        if self._consumed:
            raise UsageError("backward() already ran on this graph; recompute the forward pass")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node._parents:
                node._backward = None
                node._parents = ()
        self._consumed = True


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _node(data, parents, backward, op) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, True, parents, backward, op)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, op="param")


# ------------------------------------------------------------ elementwise

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _node(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _node(x.data.mean(), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),), "mean")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


# ------------------------------------------------------------ structural

def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != ax):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {ref} and {x.shape}")
    sizes = [x.shape[ax] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([x.data for x in xs], axis=ax), xs,
                 lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def flatten(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _node(x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),), "flatten")


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not match weights {w.shape}")
    out = x.data @ w.data
    parents = (x, w)
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"dense: bias {b.shape} does not match weights {w.shape}")
        out = out + b.data
        parents = (x, w, b)

    def backward(g):
        grads = (g @ w.data.T, x.data.T @ g)
        return grads + ((g.sum(axis=0),) if b is not None else ())

    return _node(out, parents, backward, "dense")


def _same_padding(k: int) -> tuple[int, int]:
    before = (k - 1) // 2
    return before, k - 1 - before


def conv2d(x: Tensor, k: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Cross-correlation with zero 'same' padding.

    ``x`` is ``(batch, H, W, Cin)`` and ``k`` is ``(kh, kw, Cin, Cout)``. Even
    kernels put the extra padding row/column after the data.
    """
    x, k = as_tensor(x), as_tensor(k)
    b = None if b is None else as_tensor(b)
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {k.shape}")
    bs, h, w, cin = x.shape
    kh, kw, kcin, cout = k.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias {b.shape} does not match {cout} output channels")
    pt, pb = _same_padding(kh)
    pl, pr = _same_padding(kw)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(bs * h * w, kh * kw * cin)
    kmat = k.data.reshape(kh * kw * cin, cout)
    out = cols @ kmat
    if b is not None:
        out += b.data
    out = out.reshape(bs, h, w, cout)
    parents = (x, k) if b is None else (x, k, b)

    def backward(g):
        g2 = g.reshape(bs * h * w, cout)
        dk = (cols.T @ g2).reshape(kh, kw, cin, cout)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ kmat.T).reshape(bs, h, w, kh, kw, cin)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
            dx = dxp[:, pt:pt + h, pl:pl + w, :]
        grads = (dx, dk)
        return grads + ((g2.sum(axis=0),) if b is not None else ())

    return _node(out, parents, backward, "conv2d")


def avg_pool(x: Tensor) -> Tensor:
    """Average pairs of consecutive rows (2x1 window, stride 2) along axis 1.

    With an odd row count the last row is passed through unchanged.
    """
    x = as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeError(f"avg_pool needs at least 2 dimensions, got {x.shape}")
    h = x.shape[1]
    if h < 2:
        raise ShapeError("avg_pool needs at least 2 rows")
    even = h - h % 2
    pooled = 0.5 * (x.data[:, 0:even:2] + x.data[:, 1:even:2])
    if h % 2:
        pooled = np.concatenate([pooled, x.data[:, -1:]], axis=1)

    def backward(g):
        dx = np.empty_like(x.data)
        half = 0.5 * g[:, : even // 2]
        dx[:, 0:even:2] = half
        dx[:, 1:even:2] = half
        if h % 2:
            dx[:, -1:] = g[:, -1:]
        return (dx,)

    return _node(pooled, (x,), backward, "avg_pool")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two spatial axes: ``(b, H, W, C) -> (b, C)``."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-d input, got {x.shape}")
    _, h, w, _ = x.shape
    return _node(x.data.mean(axis=(1, 2)), (x,),
                 lambda g: (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy(),), "gap")


def time_avg_pool(x: Tensor) -> Tensor:
    """Mean over the height (time) axis: ``(b, H, W, C) -> (b, W, C)``."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"time_avg_pool expects 4-d input, got {x.shape}")
    h = x.shape[1]
    return _node(x.data.mean(axis=1), (x,),
                 lambda g: (np.broadcast_to(g[:, None] / h, x.shape).copy(),), "time_pool")


# ------------------------------------------------------------ losses

def mad_loss(pred: Tensor, gt) -> Tensor:
    """Mean angle in radians between rows of ``pred`` and ``gt``.

    The cosine is clamped to ``[-1 + 1e-7, 1 - 1e-7]`` so the arccos gradient
    stays finite; clamped rows contribute no gradient.
    """
    gt = np.asarray(gt, dtype=np.float64)
    if pred.data.ndim != 2 or pred.shape != gt.shape or pred.shape[1] != 3:
        raise ShapeError(f"mad_loss expects matching (b, 3) inputs, got {pred.shape} and {gt.shape}")
    p = pred.data
    pn = np.linalg.norm(p, axis=1)
    gn = np.linalg.norm(gt, axis=1)
    if np.any(pn < 1e-12) or np.any(gn < 1e-12):
        raise DegenerateVector("mad_loss got a zero-norm row")
    raw = np.sum(p * gt, axis=1) / (pn * gn)
    c = np.clip(raw, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
    theta = np.arccos(c)
    n = p.shape[0]

    def backward(g):
        inside = (raw > -1.0 + COS_CLAMP) & (raw < 1.0 - COS_CLAMP)
        dtheta_dc = np.where(inside, -1.0 / np.sqrt(1.0 - c * c), 0.0)
        dc_dp = gt / (pn * gn)[:, None] - c[:, None] * p / (pn * pn)[:, None]
        return (g * (dtheta_dc / n)[:, None] * dc_dp,)

    return _node(theta.mean(), (pred,), backward, "mad_loss")


def bce_loss(prob: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of probabilities clamped to ``[1e-12, 1 - 1e-12]``."""
    y = np.asarray(labels, dtype=np.float64).reshape(prob.shape)
    p = prob.data
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    n = p.size

    def backward(g):
        inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
        d = np.where(inside, (-y / pc + (1.0 - y) / (1.0 - pc)) / n, 0.0)
        return (g * d,)

    return _node(loss, (prob,), backward, "bce_loss")


# ------------------------------------------------------------ optimisation

class Adam:
    """Adam with bias correction; ``lr`` may be changed between steps."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr0: float = 1e-3, factor: float = 0.5, patience: int = 5, min_lr: float = 1e-5):
        self.lr = lr0
        self.factor, self.patience, self.min_lr = factor, patience, min_lr
        self.best = math.inf
        self.wait = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.wait = 0
        return self.lr


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def param_count(model) -> int:
    """Number of trainable scalars of anything exposing ``parameters()``."""
    return int(sum(p.data.size for p in model.parameters()))


# ------------------------------------------------------------ weight files

WEIGHT_FORMAT = "driveref-weights-v1"


def save_weights(path, named: dict[str, np.ndarray], fingerprint: str) -> None:
    arrays = {f"p:{k}": np.asarray(v) for k, v in named.items()}
    arrays["__format__"] = np.array(WEIGHT_FORMAT)
    arrays["__fingerprint__"] = np.array(fingerprint)
    arrays["__order__"] = np.array(list(named))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_weights(path, fingerprint: Optional[str] = None) -> dict[str, np.ndarray]:
    """Read a weight file, refusing it when the architecture fingerprint differs."""
    try:
        with np.load(path, allow_pickle=False) as z:
            if "__format__" not in z or str(z["__format__"]) != WEIGHT_FORMAT:
                raise StoreError(f"{path}: not a weight file")
            found = str(z["__fingerprint__"])
            if fingerprint is not None and found != fingerprint:
                raise StoreError(f"{path}: architecture {found!r} does not match {fingerprint!r}")
            return {k: z[f"p:{k}"] for k in z["__order__"].tolist()}
    except (OSError, ValueError, KeyError) as exc:
        raise StoreError(f"{path}: cannot read weights ({exc})") from exc
