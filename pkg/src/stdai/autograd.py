"""Tape-based reverse-mode autodiff over numpy arrays.

A :class:`Tape` records primitive operations as they run. Each primitive
stores a closure mapping the output gradient to input gradients, and
:func:`backward` replays the tape in reverse. Gradients are only computed
for tensors that (transitively) depend on a trainable parameter, so frozen
parameters never receive a gradient array.

Images are single samples laid out as ``[C, H, W]``; there is no batch axis.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, TrainingHalted

LEAKY_SLOPE = 0.01


class Tensor:
    """A value on a tape. ``param`` is set for parameter leaves."""

    __slots__ = ("data", "requires_grad", "node_id", "param")

    def __init__(self, data, requires_grad=False, node_id=-1, param=None):
        self.data = data
        self.requires_grad = requires_grad
        self.node_id = node_id
        self.param = param

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    inputs: tuple
    output: int
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of primitive ops.

    ``dtype`` defaults to float32; float64 tapes exist for gradient checking.
    """

    dtype: type = np.float32
    nodes: list = field(default_factory=list)
    _next_id: int = 0

    def _new(self, data, requires_grad, param=None):
        t = Tensor(np.asarray(data, dtype=self.dtype), requires_grad, self._next_id, param)
        self._next_id += 1
        return t

    def constant(self, array):
        return self._new(array, False)

    def parameter(self, name, array, trainable=True):
        """Register a parameter leaf. Frozen leaves never get gradients."""
        return self._new(array, trainable, param=name)

    def _record(self, op, inputs, out_data, backward_fn):
        requires = any(t.requires_grad for t in inputs)
        out = self._new(out_data, requires)
        if requires:
            self.nodes.append(Node(op, tuple(inputs), out.node_id, backward_fn))
        return out

    # -- elementwise -----------------------------------------------------

    def _binary_shape(self, op, a, b):
        try:
            return np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None

    def add(self, a, b):
        self._binary_shape("add", a, b)

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return self._record("add", (a, b), a.data + b.data, bw)

    def sub(self, a, b):
        self._binary_shape("sub", a, b)

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return self._record("sub", (a, b), a.data - b.data, bw)

    def mul(self, a, b):
        self._binary_shape("mul", a, b)
        ad, bd = a.data, b.data

        def bw(g):
            ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
            return ga, gb

        return self._record("mul", (a, b), ad * bd, bw)

    def scale(self, a, c):
        c = float(c)
        return self._record("scale", (a,), a.data * self.dtype(c), lambda g: (g * self.dtype(c),))

    def leaky_relu(self, x, slope=LEAKY_SLOPE):
        pos = x.data > 0
        s = self.dtype(slope)
        out = np.where(pos, x.data, x.data * s)
        return self._record("leaky_relu", (x,), out, lambda g: (np.where(pos, g, g * s),))

    # -- reductions (accumulated in float64) -------------------------------

    def sum(self, x):
        out = np.sum(x.data, dtype=np.float64)

        def bw(g):
            return (np.full(x.shape, g, dtype=self.dtype),)

        return self._record("sum", (x,), out, bw)

    def mean(self, x):
        n = x.data.size
        out = np.sum(x.data, dtype=np.float64) / n

        def bw(g):
            return (np.full(x.shape, g / n, dtype=self.dtype),)

        return self._record("mean", (x,), out, bw)

    # -- structural ------------------------------------------------------

    def concat(self, tensors):
        tensors = list(tensors)
        if not tensors:
            raise ShapeError("concat", "no inputs")
        hw = tensors[0].shape[1:]
        for t in tensors:
            if t.data.ndim != 3 or t.shape[1:] != hw:
                dims = [tuple(u.shape) for u in tensors]
                raise ShapeError("concat", f"spatial dims disagree: {dims}")
        splits = np.cumsum([t.shape[0] for t in tensors])[:-1]
        out = np.concatenate([t.data for t in tensors], axis=0)

        def bw(g):
            return tuple(np.split(g, splits, axis=0))

        return self._record("concat", tensors, out, bw)

    def maxpool2(self, x):
        c, h, w = _chw("maxpool2", x)
        if h % 2 or w % 2:
            raise ShapeError("maxpool2", f"spatial dims must be even, got {(h, w)}")
        blocks = x.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4)
        blocks = blocks.reshape(c, h // 2, w // 2, 4)
        idx = np.argmax(blocks, axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

        def bw(g):
            gb = np.zeros((c, h // 2, w // 2, 4), dtype=g.dtype)
            np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
            gb = gb.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4)
            return (gb.reshape(c, h, w),)

        return self._record("maxpool2", (x,), out, bw)

    def upsample2(self, x):
        c, h, w = _chw("upsample2", x)
        out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

        def bw(g):
            return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

        return self._record("upsample2", (x,), out, bw)

    def conv2d(self, x, weight, bias, pad):
        """Stride-1 cross-correlation with symmetric zero padding."""
        c, h, w = _chw("conv2d", x)
        if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
            raise ShapeError("conv2d", f"weight must be [O, C, k, k], got {weight.shape}")
        o, wc, k, _ = weight.shape
        if wc != c:
            raise ShapeError("conv2d", f"input has {c} channels, weight expects {wc}")
        if bias.shape != (o,):
            raise ShapeError("conv2d", f"bias shape {bias.shape} != ({o},)")
        ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
        if ho < 1 or wo < 1:
            raise ShapeError("conv2d", f"kernel {k} with pad {pad} too large for {(h, w)}")
        cols = _im2col(x.data, k, pad)
        wmat = weight.data.reshape(o, c * k * k)
        out = (wmat @ cols).reshape(o, ho, wo) + bias.data[:, None, None]

        def bw(g):
            gm = g.reshape(o, ho * wo)
            gx = gw = gb = None
            if x.requires_grad:
                dcols = wmat.T @ gm
                gx = _col2im(dcols, (c, h, w), k, pad)
            if weight.requires_grad:
                gw = (gm @ cols.T).reshape(weight.shape)
            if bias.requires_grad:
                gb = gm.sum(axis=1, dtype=np.float64).astype(g.dtype)
            return gx, gw, gb

        return self._record("conv2d", (x, weight, bias), out, bw)

    def channel_affine(self, f, a, b):
        """(1 + a) * f + b with per-channel vectors a, b."""
        c, _, _ = _chw("channel_affine", f)
        if a.shape != (c,) or b.shape != (c,):
            raise ShapeError("channel_affine", f"feature has {c} channels, a {a.shape}, b {b.shape}")
        fd = f.data
        s = (1 + a.data)[:, None, None]
        out = s * fd + b.data[:, None, None]

        def bw(g):
            gf = g * s if f.requires_grad else None
            ga = np.sum(g * fd, axis=(1, 2), dtype=np.float64).astype(g.dtype) if a.requires_grad else None
            gb = np.sum(g, axis=(1, 2), dtype=np.float64).astype(g.dtype) if b.requires_grad else None
            return gf, ga, gb

        return self._record("channel_affine", (f, a, b), out, bw)


def _chw(op, x):
    if x.data.ndim != 3:
        raise ShapeError(op, f"expected [C, H, W], got {x.shape}")
    return x.shape


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    nd = g.ndim - len(shape)
    if nd:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _im2col(x, k, pad):
    c = x.shape[0]
    if k == 1 and pad == 0:
        return x.reshape(c, -1)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # C, Ho, Wo, k, k
    ho, wo = win.shape[1], win.shape[2]
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)


def _col2im(dcols, shape, k, pad):
    c, h, w = shape
    if k == 1 and pad == 0:
        return dcols.reshape(c, h, w)
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    d = dcols.reshape(c, k, k, ho, wo)
    gp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            gp[:, i:i + ho, j:j + wo] += d[:, i, j]
    return gp[:, pad:pad + h, pad:pad + w]


def backward(tape, loss):
    """Gradients of a scalar ``loss`` for every trainable parameter leaf.

    Returns a dict keyed by parameter name. Parameters registered as frozen
    are absent from the result.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError("backward", f"loss must be scalar, got shape {loss.shape}")
    grads = {loss.node_id: np.ones(loss.shape, dtype=tape.dtype)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output, None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if not t.requires_grad or gi is None:
                continue
            gi = np.asarray(gi, dtype=tape.dtype)
            if t.node_id in grads:
                grads[t.node_id] = grads[t.node_id] + gi
            else:
                grads[t.node_id] = gi
            if t.param is not None:
                leaves[t.node_id] = t.param
    return {name: grads[nid] for nid, name in leaves.items() if nid in grads}


# -- optimisation ------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """One Adam update with bias correction, applied in place to ``params``.

    ``params`` and ``grads`` are dicts of arrays keyed by name; parameters
    without a gradient entry are left untouched. Returns ``(params, state)``.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    step = state.step + 1
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingHalted(step, f"non-finite gradient for {name!r}")
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError("adam_step", f"{name}: grad {g.shape} vs param {p.shape}")
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p -= update.astype(p.dtype)
    state.step = step
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    lr0: float = 1e-3
    total_steps: int = 1
    floor: float = 0.0


_warned_past_end = False


def cosine_lr(t, schedule):
    """Cosine-annealed rate from ``lr0`` at t=0 down to ``floor`` at t=T."""
    global _warned_past_end
    T = schedule.total_steps
    if t > T:
        if not _warned_past_end:
            warnings.warn(f"cosine_lr: step {t} past schedule end {T}; using floor rate",
                          RuntimeWarning, stacklevel=2)
            _warned_past_end = True
        return schedule.floor
    if t < 0:
        raise ValueError(f"step must be nonnegative, got {t}")
    if T <= 0:
        return schedule.lr0
    return schedule.floor + 0.5 * (schedule.lr0 - schedule.floor) * (1.0 + math.cos(math.pi * t / T))
