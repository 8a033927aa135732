"""Minimal reverse-mode tape over the functional operators.

``Var`` wraps an ndarray; traced ops record a backward closure and their
parents. ``backward`` walks the graph in reverse topological order and
accumulates ``grad`` on every reachable Var. Tracing is disabled inside
``no_grad()`` (and caches are dropped), which keeps inference memory flat.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

from . import ops

_GRAD_ENABLED = True

# Optional finite-ness assertions after every traced op.
DEBUG_CHECKS = os.environ.get("EGOSEG_DEBUG_CHECKS", "") == "1"


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Var:
    """A node in the compute graph; ``data`` is always a plain ndarray."""

    __slots__ = ("data", "grad", "parents", "grad_fn")

    def __init__(self, data, parents=(), grad_fn=None):
        self.data = data
        self.grad = None
        if _GRAD_ENABLED:
            self.parents = parents
            self.grad_fn = grad_fn
        else:
            self.parents = ()
            self.grad_fn = None

    @property
    def shape(self):
        return self.data.shape


def _make(data, parents, grad_fn):
    if DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by a traced op")
    return Var(data, parents, grad_fn)


def backward(root: Var, seed=None):
    """Accumulate gradients from ``root`` into every reachable Var."""
    topo, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))

    root.grad = np.ones_like(root.data) if seed is None else seed
    for node in reversed(topo):
        if node.grad_fn is None or node.grad is None:
            continue
        grads = node.grad_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# Traced wrappers


def conv2d(x: Var, w: Var, b: Var | None = None, stride=1, pad=0, dilation=1) -> Var:
    y, cache = ops.conv2d_forward(
        x.data,
        w.data,
        None if b is None else b.data,
        stride,
        pad,
        dilation,
        keep_cache=_GRAD_ENABLED,
    )
    parents = (x, w) if b is None else (x, w, b)

    def bw(dy):
        dx, dw, db = ops.conv2d_backward(dy, cache)
        return (dx, dw) if b is None else (dx, dw, db)

    return _make(y, parents, bw)


def deconv2d(x: Var, w: Var, b: Var | None = None, stride=2, pad=1) -> Var:
    y, cache = ops.deconv2d_forward(
        x.data, w.data, None if b is None else b.data, stride, pad, keep_cache=_GRAD_ENABLED
    )
    parents = (x, w) if b is None else (x, w, b)

    def bw(dy):
        dx, dw, db = ops.deconv2d_backward(dy, cache)
        return (dx, dw) if b is None else (dx, dw, db)

    return _make(y, parents, bw)


def batchnorm(x: Var, gamma: Var, beta: Var, running, mode: str) -> Var:
    """``running`` is a dict with mutable 'mean'/'var' entries; train mode
    writes the updated statistics back into it."""
    y, cache, new_rm, new_rv = ops.batchnorm_forward(
        x.data, gamma.data, beta.data, running["mean"], running["var"], mode
    )
    if mode == "train":
        running["mean"] = new_rm
        running["var"] = new_rv

    def bw(dy):
        return ops.batchnorm_backward(dy, cache)

    return _make(y, (x, gamma, beta), bw)


def relu(x: Var) -> Var:
    y, cache = ops.relu_forward(x.data, keep_cache=_GRAD_ENABLED)
    return _make(y, (x,), lambda dy: (ops.relu_backward(dy, cache),))


def maxpool2d(x: Var, kernel=2, stride=None, pad=0) -> Var:
    y, cache = ops.maxpool2d_forward(x.data, kernel, stride, pad, keep_cache=_GRAD_ENABLED)
    return _make(y, (x,), lambda dy: (ops.maxpool2d_backward(dy, cache),))


def avgpool_factor(x: Var, factor: int) -> Var:
    y, cache = ops.avgpool_factor_forward(x.data, factor, keep_cache=_GRAD_ENABLED)
    return _make(y, (x,), lambda dy: (ops.avgpool_factor_backward(dy, cache),))


def maxpool_factor(x: Var, factor: int) -> Var:
    """Max pooling with kernel = stride = factor (config alternative to avg)."""
    n, c, h, w = x.data.shape
    if factor > h and factor > w:
        raise ValueError(f"pool factor {factor} exceeds feature map {h}x{w} in both dims")
    k = min(factor, h, w)
    return maxpool2d(x, kernel=k, stride=k)


def upsample_bilinear(x: Var, oh: int, ow: int) -> Var:
    y, cache = ops.upsample_bilinear_forward(x.data, oh, ow, keep_cache=_GRAD_ENABLED)
    return _make(y, (x,), lambda dy: (ops.upsample_bilinear_backward(dy, cache),))


def add(a: Var, b: Var) -> Var:
    return _make(a.data + b.data, (a, b), lambda dy: (dy, dy))


def concat(xs) -> Var:
    y, cache = ops.concat_forward([v.data for v in xs], keep_cache=_GRAD_ENABLED)
    return _make(y, tuple(xs), lambda dy: tuple(ops.concat_backward(dy, cache)))
