"""A small reverse-mode differentiation kernel over numpy arrays.

Only the operations the graph predictor and the Q-network need are provided.
Each op records its parents and a closure that pushes the output gradient back;
:meth:`Tensor.backward` replays those closures in reverse topological order.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None) -> None:
        self.data = np.asarray(data, dtype=dtype if dtype is not None else np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def _child(self, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor(data, dtype=data.dtype)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype)
        else:
            self.grad += grad

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents if p.requires_grad)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # arithmetic

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other, self.data.dtype)
        a_shape, b_shape = self.shape, other.shape
        return self._child(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return self._child(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other, self.data.dtype))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other, self.data.dtype) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other, self.data.dtype)
        a, b = self.data, other.data
        return self._child(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        a, b = self.data, other.data
        need_a, need_b = self.requires_grad, other.requires_grad
        return self._child(
            a @ b,
            (self, other),
            lambda g: (g @ b.T if need_a else None, a.T @ g if need_b else None),
        )

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return self._child(self.data * mask, (self,), lambda g: (g * mask,))

    def square(self) -> "Tensor":
        a = self.data
        return self._child(a * a, (self,), lambda g: (2.0 * a * g,))

    def sum(self, axis: int | None = None) -> "Tensor":
        shape = self.shape
        if axis is None:
            return self._child(np.asarray(self.data.sum()), (self,), lambda g: (np.broadcast_to(g, shape).copy(),))
        return self._child(
            self.data.sum(axis=axis),
            (self,),
            lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
        )

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.data.size)

    def rows(self, index: np.ndarray) -> "Tensor":
        """Gather rows ``self[index]``."""
        shape = self.shape

        def back(g):
            out = np.zeros(shape, dtype=g.dtype)
            np.add.at(out, index, g)
            return (out,)

        return self._child(self.data[index], (self,), back)

    def log_softmax(self) -> "Tensor":
        """Row-wise log-softmax of a 2-D tensor."""
        shifted = self.data - self.data.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        p = np.exp(logp)
        return self._child(logp, (self,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def as_tensor(x, dtype=np.float64) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parts):
        out.requires_grad = True
        out._parents = tuple(parts)
        out._backward = lambda g: tuple(np.split(g, sizes, axis=axis))
    return out


def segment_sum(x: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    out = np.zeros((n_segments,) + x.shape[1:], dtype=x.data.dtype)
    np.add.at(out, segments, x.data)
    return x._child(out, (x,), lambda g: (g[segments],))


def segment_mean(x: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    counts = np.bincount(segments, minlength=n_segments).astype(x.data.dtype)
    if np.any(counts == 0):
        raise ValueError("empty segment in mean pooling")
    return segment_sum(x, segments, n_segments) * (1.0 / counts)[:, None]


def segment_max(x: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Per-segment column max; ties route the gradient to the lowest row."""
    n, d = x.shape
    out = np.full((n_segments, d), -np.inf, dtype=x.data.dtype)
    np.maximum.at(out, segments, x.data)
    if np.any(np.isinf(out)):
        raise ValueError("empty segment in max pooling")
    hit = x.data == out[segments]
    # keep only the first hit per (segment, column)
    winner = np.full((n_segments, d), n, dtype=np.int64)
    rows = np.broadcast_to(np.arange(n)[:, None], (n, d))
    cand = np.where(hit, rows, n)
    np.minimum.at(winner, segments, cand)

    def back(g):
        full = np.zeros((n, d), dtype=g.dtype)
        cols = np.broadcast_to(np.arange(d), (n_segments, d))
        full[winner, cols] = g
        return (full,)

    return x._child(out, (x,), back)


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * np.square(g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            np.divide(m, denom, out=denom)
            denom *= self.lr / c1
            p.data -= denom
            if self.t % 50 == 0:
                # decaying float32 moments otherwise sink into (very slow) subnormals
                m[np.abs(m) < 1e-30] = 0.0
                v[v < 1e-30] = 0.0


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a-b| / max(|a|, |b|, floor)``; the floor keeps near-zero gradients from dominating."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-4) -> float:
    """Max relative error between backprop and central differences over every parameter entry."""
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        numeric = np.empty(flat.size)
        for k in range(flat.size):
            saved = flat[k]
            flat[k] = saved + step
            up = loss_fn().item()
            flat[k] = saved - step
            down = loss_fn().item()
            flat[k] = saved
            numeric[k] = (up - down) / (2 * step)
        if flat.size:
            worst = max(worst, float(relative_error(g.reshape(-1), numeric).max()))
    return worst
