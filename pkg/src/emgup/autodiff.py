"""Small reverse-mode differentiation engine on top of numpy float64 arrays.

Every operation records a closure on the output tensor; ``Tensor.backward``
walks the recorded graph in reverse topological order and accumulates
gradients into leaves that have ``requires_grad`` set.  The graph is released
after the backward pass.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64
COS_EPS = 1e-12

_grad_enabled = True


class DimensionError(ValueError):
    pass


class RankError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.array(values, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def __len__(self) -> int:
        return len(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    @staticmethod
    def _make(values: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.values = values
        out.grad = None
        out.name = None
        live = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = live
        out._parents = parents if live else ()
        out._backward = backward if live else None
        return out

    # -- backward pass -----------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.values.size != 1:
            raise RankError(f"backward needs a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.values)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accum(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        # free the tape
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other)
        sa, sb = self.shape, other.shape
        return Tensor._make(
            self.values + other.values,
            (self, other),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.values, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        return self + (-_as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self.values, other.values
        return Tensor._make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return self * other.pow(-1.0)
        return self * (1.0 / other)

    def pow(self, exponent: float) -> "Tensor":
        a = self.values
        return Tensor._make(
            a**exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),)
        )

    __pow__ = pow

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, idx) -> "Tensor":
        shape = self.shape

        fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

        def back(g):
            full = np.zeros(shape, dtype=DTYPE)
            if fancy:
                np.add.at(full, idx, g)
            else:
                full[idx] += g
            return (full,)

        return Tensor._make(self.values[idx], (self,), back)

    # -- reductions / shape ------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.values.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.values.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        old = self.shape
        return Tensor._make(
            self.values.reshape(*shape), (self,), lambda g: (g.reshape(old),)
        )

    def transpose(self, *axes) -> "Tensor":
        inv = np.argsort(axes)
        return Tensor._make(
            self.values.transpose(*axes), (self,), lambda g: (g.transpose(*inv),)
        )

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return Tensor._make(
            np.swapaxes(self.values, a, b), (self,), lambda g: (np.swapaxes(g, a, b),)
        )

    def flip(self, axis: int) -> "Tensor":
        return Tensor._make(
            np.flip(self.values, axis).copy(), (self,), lambda g: (np.flip(g, axis).copy(),)
        )

    # -- elementwise -------------------------------------------------------
    def relu(self) -> "Tensor":
        mask = self.values > 0
        return Tensor._make(self.values * mask, (self,), lambda g: (g * mask,))

    def exp(self) -> "Tensor":
        out = np.exp(self.values)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = np.maximum(self.values, np.finfo(DTYPE).tiny)
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self) -> "Tensor":
        return self.pow(0.5)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# differentiable operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions broadcast like ``np.matmul``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.values, b.values

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return Tensor._make(av @ bv, (a, b), back)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor._make(
        np.concatenate([t.values for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    return Tensor._make(
        np.stack([t.values for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


def conv1d(signal: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation.

    ``signal`` is ``channels x length`` or ``batch x channels x length``;
    ``kernels`` is ``out x channels x width``.  Output length is
    ``(length - width) // stride + 1``.
    """
    signal, kernels = _as_tensor(signal), _as_tensor(kernels)
    x, w = signal.values, kernels.values
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if stride < 1:
        raise ValueError("stride must be positive")
    if w.ndim != 3 or x.ndim != 3 or w.shape[1] != x.shape[1]:
        raise DimensionError(f"conv1d shape mismatch: signal {signal.shape}, kernels {kernels.shape}")
    B, C, L = x.shape
    O, _, W = w.shape
    if W > L:
        raise DimensionError(f"conv1d kernel width {W} exceeds signal length {L}: empty output")
    Lout = (L - W) // stride + 1
    # patches: B x C x Lout x W
    patches = np.lib.stride_tricks.sliding_window_view(x, W, axis=2)[:, :, ::stride][:, :, :Lout]
    cols = patches.transpose(0, 2, 1, 3).reshape(B, Lout, C * W)
    wmat = w.reshape(O, C * W)
    out = (cols @ wmat.T).transpose(0, 2, 1)  # B x O x Lout

    def back(g):
        if squeeze:
            g = g[None]
        gt = g.transpose(0, 2, 1)  # B x Lout x O
        gw = (gt.reshape(-1, O).T @ cols.reshape(-1, C * W)).reshape(w.shape)
        if not signal.requires_grad:
            return None, gw
        gcols = (gt @ wmat).reshape(B, Lout, C, W)
        gx = np.zeros_like(x)
        span = stride * (Lout - 1) + 1
        for k in range(W):
            gx[:, :, k : k + span : stride] += gcols[:, :, :, k].transpose(0, 2, 1)
        if squeeze:
            gx = gx[0]
        return gx, gw

    if squeeze:
        out = out[0]
    return Tensor._make(np.ascontiguousarray(out), (signal, kernels), back)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get probability 0.

    Every slice along ``axis`` must keep at least one unmasked entry.
    """
    x = _as_tensor(x)
    v = x.values
    if mask is not None:
        v = np.where(mask, v, -np.inf)
    m = v.max(axis=axis, keepdims=True)
    e = np.exp(v - m)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor._make(p, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    v = x.values
    m = v.max(axis=axis, keepdims=True)
    shifted = v - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return Tensor._make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[target]``."""
    logits = _as_tensor(logits)
    v = logits.values
    if v.ndim == 1:
        v = v[None]
    targets = np.atleast_1d(np.asarray(targets))
    B, C = v.shape
    if len(targets) != B:
        raise DimensionError(f"{len(targets)} targets for {B} rows of logits")
    if np.any(targets < 0) or np.any(targets >= C):
        raise IndexError(f"target index out of range [0, {C})")
    targets = targets.astype(np.int64)
    m = v.max(axis=1, keepdims=True)
    shifted = v - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(B), targets].mean()
    shape = logits.shape

    def back(g):
        grad = np.exp(logp)
        grad[np.arange(B), targets] -= 1.0
        return ((g / B) * grad.reshape(shape),)

    return Tensor._make(np.array(loss), (logits,), back)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity along the last axis (leading axes broadcast).

    A pair where either norm is below 1e-12 has similarity 0 and zero
    gradient.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cosine_similarity dimension mismatch: {a.shape} vs {b.shape}")
    av, bv = a.values, b.values
    na = np.sqrt((av * av).sum(-1, keepdims=True))
    nb = np.sqrt((bv * bv).sum(-1, keepdims=True))
    ok = (na >= COS_EPS) & (nb >= COS_EPS)
    sa = np.where(ok, na, 1.0)
    sb = np.where(ok, nb, 1.0)
    dot = (av * bv).sum(-1, keepdims=True)
    out = np.where(ok, dot / (sa * sb), 0.0)

    def back(g):
        g = g[..., None] * ok
        ga = g * (bv / (sa * sb) - out * av / (sa * sa))
        gb = g * (av / (sa * sb) - out * bv / (sb * sb))
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return Tensor._make(out[..., 0], (a, b), back)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each vector along the last axis to unit norm; vectors with norm
    below 1e-12 map to zero with zero gradient."""
    x = _as_tensor(x)
    v = x.values
    n = np.sqrt((v * v).sum(-1, keepdims=True))
    ok = n >= COS_EPS
    sn = np.where(ok, n, 1.0)
    u = np.where(ok, v / sn, 0.0)

    def back(g):
        return (ok * (g - u * (g * u).sum(-1, keepdims=True)) / sn,)

    return Tensor._make(u, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * (var + eps).pow(-0.5) * gain + bias


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.5
    beta2: float = 0.99
    weight_decay: float = 3e-4
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One Adam update with decoupled weight decay, in place.

    ``params`` maps names to Tensors; ``grads`` maps the same names to arrays
    (a missing or None gradient is treated as zero).
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.values)
        if g.shape != p.values.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {p.values.shape}")
        m = state.first_moment.get(name)
        if m is None:
            m = np.zeros_like(p.values)
            state.second_moment[name] = np.zeros_like(p.values)
        v = state.second_moment[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        if state.weight_decay:
            p.values *= 1.0 - lr * state.weight_decay
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
