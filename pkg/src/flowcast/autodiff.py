"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Tape`` records operations in execution order while it is active; calling
``backward(loss)`` replays the recorded backward rules in exact reverse order
and accumulates gradients into every participating tensor.  Tapes are created
fresh per training step and are confined to a single thread.

Shapes are checked strictly: binary ops require equal shapes, except for the
sanctioned bias add over the last axis.  There is no implicit broadcasting;
``expand`` tiles a size-1 axis explicitly when a quantity must be repeated.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import NumericError, ShapeError

# When set (env FLOWCAST_DEBUG=1), every op output is checked for NaN/Inf.
DEBUG_CHECKS = os.environ.get("FLOWCAST_DEBUG", "") not in ("", "0")

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
_LN_EPS = 1e-5


class Tensor:
    """A dense float64 array that can participate in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_gown")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._gown = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        # First contribution borrows g's buffer; a second contribution
        # allocates a fresh owned buffer, so borrowed buffers (which may be
        # another tensor's .grad) are never mutated in place.
        if self.grad is None:
            self.grad = g
            self._gown = False
        elif self._gown:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._gown = True

    def owned_grad(self) -> np.ndarray:
        """Gradient buffer safe for in-place mutation (allocating if needed)."""
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
            self._gown = True
        elif not self._gown:
            self.grad = self.grad.copy()
            self._gown = True
        return self.grad

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{rg})"


class Tape:
    """Ordered record of differentiable operations for one backward pass."""

    def __init__(self):
        self.ops: list = []  # backward closures, appended in forward order
        self._prev = None

    def __enter__(self) -> "Tape":
        global _TAPE
        self._prev = _TAPE
        _TAPE = self
        return self

    def __exit__(self, *exc):
        global _TAPE
        _TAPE = self._prev
        return False


_TAPE: Tape | None = None


class no_grad:
    """Context manager that suspends recording on the active tape."""

    def __enter__(self):
        global _TAPE
        self._prev = _TAPE
        _TAPE = None
        return self

    def __exit__(self, *exc):
        global _TAPE
        _TAPE = self._prev
        return False


def active_tape() -> Tape | None:
    return _TAPE


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(tensor) into .grad of every recorded participant.

    The loss must be scalar (one element).  The active tape is consumed:
    its op list is cleared after the sweep.  Gradients accumulate across
    calls; callers reset .grad themselves when starting a new step.
    """
    tape = _TAPE
    if tape is None:
        raise RuntimeError("backward() requires an active Tape")
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not tape.ops:
        raise RuntimeError("backward: tape is empty")
    loss.accumulate_grad(np.ones_like(loss.data))
    for op in reversed(tape.ops):
        op()
    tape.ops.clear()


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
        t._gown = False


def _finite(out: np.ndarray, op: str) -> None:
    if DEBUG_CHECKS and not np.all(np.isfinite(out)):
        raise NumericError(f"{op}: non-finite values in output")


def _record(out: Tensor, fn) -> None:
    out.requires_grad = True
    _TAPE.ops.append(fn)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.  Either b is a 2-D weight applied to a's last axis, or
    a and b are stacks with identical leading dims (batched attention)."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {ad.shape} vs {bd.shape}")
    if bd.ndim != 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: leading dims differ, {ad.shape} vs {bd.shape}")
    out = Tensor(np.matmul(ad, bd))
    _finite(out.data, "matmul")
    if _TAPE is not None and (a.requires_grad or b.requires_grad):
        def _bw():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                a.accumulate_grad(np.matmul(g, bd.swapaxes(-1, -2)))
            if b.requires_grad:
                if bd.ndim == 2:
                    k, n = bd.shape
                    gb = np.matmul(ad.reshape(-1, k).T, g.reshape(-1, n))
                else:
                    gb = np.matmul(ad.swapaxes(-1, -2), g)
                b.accumulate_grad(gb)
        _record(out, _bw)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may also be a 1-D bias over a's last axis."""
    ad, bd = a.data, b.data
    bias = bd.ndim == 1 and ad.ndim > 1
    if bias:
        if bd.shape[0] != ad.shape[-1]:
            raise ShapeError(f"add: bias length {bd.shape[0]} != last axis of {ad.shape}")
    elif ad.shape != bd.shape:
        raise ShapeError(f"add: shapes differ, {ad.shape} vs {bd.shape}")
    out = Tensor(ad + bd)
    _finite(out.data, "add")
    if _TAPE is not None and (a.requires_grad or b.requires_grad):
        def _bw():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g.reshape(-1, g.shape[-1]).sum(axis=0) if bias else g)
        _record(out, _bw)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: shapes differ, {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data - b.data)
    _finite(out.data, "sub")
    if _TAPE is not None and (a.requires_grad or b.requires_grad):
        def _bw():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(-g)
        _record(out, _bw)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes differ, {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data)
    _finite(out.data, "mul")
    if _TAPE is not None and (a.requires_grad or b.requires_grad):
        ad, bd = a.data, b.data
        def _bw():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                a.accumulate_grad(g * bd)
            if b.requires_grad:
                b.accumulate_grad(g * ad)
        _record(out, _bw)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s)
    _finite(out.data, "scale")
    if _TAPE is not None and a.requires_grad:
        def _bw():
            if out.grad is not None:
                a.accumulate_grad(out.grad * s)
        _record(out, _bw)
    return out


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data)
    _finite(out.data, "square")
    if _TAPE is not None and a.requires_grad:
        ad = a.data
        def _bw():
            if out.grad is not None:
                a.accumulate_grad(out.grad * (2.0 * ad))
        _record(out, _bw)
    return out


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ShapeError(f"transpose: needs >=2-D, got {a.data.shape}")
    out = Tensor(a.data.swapaxes(-1, -2))
    if _TAPE is not None and a.requires_grad:
        def _bw():
            if out.grad is not None:
                a.accumulate_grad(out.grad.swapaxes(-1, -2))
        _record(out, _bw)
    return out


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {a.data.shape}")
    inv = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes))
    if _TAPE is not None and a.requires_grad:
        def _bw():
            if out.grad is not None:
                a.accumulate_grad(out.grad.transpose(inv))
        _record(out, _bw)
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape
    out = Tensor(a.data.reshape(shape))
    if _TAPE is not None and a.requires_grad:
        def _bw():
            if out.grad is not None:
                a.accumulate_grad(out.grad.reshape(old))
        _record(out, _bw)
    return out


def expand(a: Tensor, axis: int, n: int) -> Tensor:
    """Tile a size-1 axis to size n (explicit broadcast with summed backward)."""
    if a.data.shape[axis] != 1:
        raise ShapeError(f"expand: axis {axis} of {a.data.shape} is not 1")
    out = Tensor(np.repeat(a.data, n, axis=axis))
    if _TAPE is not None and a.requires_grad:
        def _bw():
            if out.grad is not None:
                a.accumulate_grad(out.grad.sum(axis=axis, keepdims=True))
        _record(out, _bw)
    return out


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    shapes = [t.data.shape for t in tensors]
    base = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(base) or any(s[i] != base[i] for i in range(len(base)) if i != axis % len(base)):
            raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    if _TAPE is not None and any(t.requires_grad for t in tensors):
        sizes = [s[axis] for s in shapes]
        offsets = np.cumsum([0] + sizes)
        def _bw():
            g = out.grad
            if g is None:
                return
            idx = [slice(None)] * g.ndim
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx[axis] = slice(lo, hi)
                    t.accumulate_grad(g[tuple(idx)])
        _record(out, _bw)
    return out


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(a.data[idx])
    if _TAPE is not None and a.requires_grad:
        def _bw():
            if out.grad is not None:
                a.owned_grad()[idx] += out.grad
        _record(out, _bw)
    return out


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
              mask: np.ndarray | None = None) -> Tensor:
    """Fused scaled-dot-product multi-head attention over (B, S, D) stacks.

    ``mask`` is an additive constant (e.g. -1e30 on blocked pairs) broadcast
    onto the (B, heads, S_q, S_kv) score array; it never carries gradients.
    Fusing keeps the tape short; the backward rule is the standard closed form
    and is finite-difference tested like every other op.
    """
    B, Sq, Dm = q.data.shape
    if k.data.shape != v.data.shape or k.data.shape[0] != B or k.data.shape[2] != Dm:
        raise ShapeError(f"attention: q {q.data.shape}, k {k.data.shape}, v {v.data.shape}")
    if Dm % n_heads:
        raise ShapeError(f"attention: model dim {Dm} not divisible by {n_heads} heads")
    Skv = k.data.shape[1]
    dh = Dm // n_heads
    inv = dh ** -0.5
    qh = q.data.reshape(B, Sq, n_heads, dh).transpose(0, 2, 1, 3)
    kh = k.data.reshape(B, Skv, n_heads, dh).transpose(0, 2, 1, 3)
    vh = v.data.reshape(B, Skv, n_heads, dh).transpose(0, 2, 1, 3)
    sc = np.matmul(qh, kh.transpose(0, 1, 3, 2))
    sc *= inv
    if mask is not None:
        sc += mask
    sc -= sc.max(axis=-1, keepdims=True)
    w = np.exp(sc)
    w /= w.sum(axis=-1, keepdims=True)
    out = Tensor(np.matmul(w, vh).transpose(0, 2, 1, 3).reshape(B, Sq, Dm))
    _finite(out.data, "attention")
    if _TAPE is not None and (q.requires_grad or k.requires_grad or v.requires_grad):
        def _bw():
            if out.grad is None:
                return
            g = out.grad.reshape(B, Sq, n_heads, dh).transpose(0, 2, 1, 3)
            if v.requires_grad:
                gv = np.matmul(w.transpose(0, 1, 3, 2), g)
                v.accumulate_grad(gv.transpose(0, 2, 1, 3).reshape(B, Skv, Dm))
            gw = np.matmul(g, vh.transpose(0, 1, 3, 2))
            gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True))
            gs *= inv
            if q.requires_grad:
                gq = np.matmul(gs, kh)
                q.accumulate_grad(gq.transpose(0, 2, 1, 3).reshape(B, Sq, Dm))
            if k.requires_grad:
                gk = np.matmul(gs.transpose(0, 1, 3, 2), qh)
                k.accumulate_grad(gk.transpose(0, 2, 1, 3).reshape(B, Skv, Dm))
        _record(out, _bw)
    return out


def attention_block(res: Tensor, q_in: Tensor, kv: Tensor, wq: Tensor, wk: Tensor,
                    wv: Tensor, wo: Tensor, n_heads: int,
                    mask: np.ndarray | None = None) -> Tensor:
    """res + MHA(q_in, kv) with projections fused into one tape entry.

    Computes attention(q_in@wq, kv@wk, kv@wv) @ wo added onto the residual
    stream.  Semantically identical to composing matmul/attention/add; fused
    purely to keep the per-step tape short on desk-scale CPUs.
    """
    xd, kvd = q_in.data, kv.data
    if res.data.shape != xd.shape:
        raise ShapeError(f"attention_block: residual {res.data.shape} != query {xd.shape}")
    B, Sq, Dm = xd.shape
    Skv = kvd.shape[1]
    for nm, w in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
        if w.data.shape != (Dm, Dm):
            raise ShapeError(f"attention_block: {nm} must be ({Dm},{Dm}), got {w.data.shape}")
    if Dm % n_heads:
        raise ShapeError(f"attention_block: dim {Dm} not divisible by {n_heads} heads")
    dh = Dm // n_heads
    inv = dh ** -0.5
    qd = np.matmul(xd, wq.data)
    kd = np.matmul(kvd, wk.data)
    vd = np.matmul(kvd, wv.data)
    qh = qd.reshape(B, Sq, n_heads, dh).transpose(0, 2, 1, 3)
    kh = kd.reshape(B, Skv, n_heads, dh).transpose(0, 2, 1, 3)
    vh = vd.reshape(B, Skv, n_heads, dh).transpose(0, 2, 1, 3)
    sc = np.matmul(qh, kh.transpose(0, 1, 3, 2))
    sc *= inv
    if mask is not None:
        sc += mask
    sc -= sc.max(axis=-1, keepdims=True)
    w = np.exp(sc)
    w /= w.sum(axis=-1, keepdims=True)
    od = np.matmul(w, vh).transpose(0, 2, 1, 3).reshape(B, Sq, Dm)
    out = Tensor(res.data + np.matmul(od, wo.data))
    _finite(out.data, "attention_block")
    needs = (res.requires_grad or q_in.requires_grad or kv.requires_grad
             or wq.requires_grad or wk.requires_grad or wv.requires_grad
             or wo.requires_grad)
    if _TAPE is not None and needs:
        def _bw():
            g = out.grad
            if g is None:
                return
            if res.requires_grad:
                res.accumulate_grad(g)
            go = np.matmul(g, wo.data.T)
            if wo.requires_grad:
                wo.accumulate_grad(np.matmul(od.reshape(-1, Dm).T, g.reshape(-1, Dm)))
            gh = go.reshape(B, Sq, n_heads, dh).transpose(0, 2, 1, 3)
            gv = np.matmul(w.transpose(0, 1, 3, 2), gh)
            gv = gv.transpose(0, 2, 1, 3).reshape(B, Skv, Dm)
            gw = np.matmul(gh, vh.transpose(0, 1, 3, 2))
            gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True))
            gs *= inv
            gq = np.matmul(gs, kh).transpose(0, 2, 1, 3).reshape(B, Sq, Dm)
            gk = np.matmul(gs.transpose(0, 1, 3, 2), qh)
            gk = gk.transpose(0, 2, 1, 3).reshape(B, Skv, Dm)
            if wq.requires_grad:
                wq.accumulate_grad(np.matmul(xd.reshape(-1, Dm).T, gq.reshape(-1, Dm)))
            if wk.requires_grad:
                wk.accumulate_grad(np.matmul(kvd.reshape(-1, Dm).T, gk.reshape(-1, Dm)))
            if wv.requires_grad:
                wv.accumulate_grad(np.matmul(kvd.reshape(-1, Dm).T, gv.reshape(-1, Dm)))
            if q_in.requires_grad:
                q_in.accumulate_grad(np.matmul(gq, wq.data.T))
            if kv.requires_grad:
                kv.accumulate_grad(np.matmul(gk, wk.data.T) + np.matmul(gv, wv.data.T))
        _record(out, _bw)
    return out


def ffn_block(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """x + W2 @ gelu(W1 @ layer_norm(x) + b1) + b2, fused into one tape entry."""
    xd = x.data
    Dm = xd.shape[-1]
    if w1.data.shape[0] != Dm or w2.data.shape != (w1.data.shape[1], Dm):
        raise ShapeError(
            f"ffn_block: weights {w1.data.shape}/{w2.data.shape} do not match dim {Dm}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    lninv = 1.0 / np.sqrt(var + _LN_EPS)
    xn = xc * lninv
    hpre = np.matmul(xn, w1.data) + b1.data
    phi = 0.5 * (1.0 + erf(hpre * _INV_SQRT2))
    h = hpre * phi
    out = Tensor(xd + np.matmul(h, w2.data) + b2.data)
    _finite(out.data, "ffn_block")
    needs = (x.requires_grad or w1.requires_grad or b1.requires_grad
             or w2.requires_grad or b2.requires_grad)
    if _TAPE is not None and needs:
        FF = w1.data.shape[1]
        def _bw():
            g = out.grad
            if g is None:
                return
            g2 = g.reshape(-1, Dm)
            if b2.requires_grad:
                b2.accumulate_grad(g2.sum(axis=0))
            if w2.requires_grad:
                w2.accumulate_grad(np.matmul(h.reshape(-1, FF).T, g2))
            gh = np.matmul(g, w2.data.T)
            pdf = np.exp(-0.5 * hpre * hpre) * _INV_SQRT2PI
            ghpre = gh * (phi + hpre * pdf)
            if b1.requires_grad:
                b1.accumulate_grad(ghpre.reshape(-1, FF).sum(axis=0))
            if w1.requires_grad:
                w1.accumulate_grad(np.matmul(xn.reshape(-1, Dm).T, ghpre.reshape(-1, FF)))
            if x.requires_grad:
                gxn = np.matmul(ghpre, w1.data.T)
                gm = gxn.mean(axis=-1, keepdims=True)
                gy = (gxn * xn).mean(axis=-1, keepdims=True)
                x.accumulate_grad(g + lninv * (gxn - gm - xn * gy))
        _record(out, _bw)
    return out


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)
    _finite(out.data, "softmax")
    if _TAPE is not None and a.requires_grad:
        def _bw():
            g = out.grad
            if g is None:
                return
            a.accumulate_grad(s * (g - (g * s).sum(axis=-1, keepdims=True)))
        _record(out, _bw)
    return out


def layer_norm(a: Tensor) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (eps 1e-5, no affine).

    A constant vector maps to zeros: the variance is clamped additively, never
    divided by zero.
    """
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    y = xc * inv
    out = Tensor(y)
    _finite(out.data, "layer_norm")
    if _TAPE is not None and a.requires_grad:
        def _bw():
            g = out.grad
            if g is None:
                return
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * y).mean(axis=-1, keepdims=True)
            a.accumulate_grad(inv * (g - gm - y * gy))
        _record(out, _bw)
    return out


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * phi)
    _finite(out.data, "gelu")
    if _TAPE is not None and a.requires_grad:
        def _bw():
            if out.grad is None:
                return
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            a.accumulate_grad(out.grad * (phi + x * pdf))
        _record(out, _bw)
    return out


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    out = Tensor(x * sig)
    _finite(out.data, "silu")
    if _TAPE is not None and a.requires_grad:
        def _bw():
            if out.grad is not None:
                a.accumulate_grad(out.grad * (sig * (1.0 + x * (1.0 - sig))))
        _record(out, _bw)
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; backward scatter-adds into the table gradient."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding: id out of range [0, {table.data.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    out = Tensor(table.data[ids])
    if _TAPE is not None and table.requires_grad:
        def _bw():
            if out.grad is not None:
                np.add.at(table.owned_grad(), ids, out.grad)
        _record(out, _bw)
    return out


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements (scalar output)."""
    out = Tensor(a.data.sum())
    if _TAPE is not None and a.requires_grad:
        shp = a.data.shape
        def _bw():
            if out.grad is not None:
                a.accumulate_grad(np.broadcast_to(out.grad, shp))
        _record(out, _bw)
    return out


def tmean(a: Tensor) -> Tensor:
    """Mean of all elements (scalar output)."""
    n = a.data.size
    out = Tensor(a.data.sum() / n)
    if _TAPE is not None and a.requires_grad:
        shp = a.data.shape
        def _bw():
            if out.grad is not None:
                a.accumulate_grad(np.broadcast_to(out.grad / n, shp))
        _record(out, _bw)
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradReport:
    max_rel_err: float
    passed: bool
    tolerance: float
    per_input: list = field(default_factory=list)


def grad_check(function, point, tolerance: float = 1e-5, h: float = 1e-5,
               floor: float = 1e-6) -> GradReport:
    """Compare tape gradients of a scalar function against central differences.

    ``function`` maps a list of Tensors to a scalar Tensor; ``point`` is the
    list of input arrays.  Relative error per element is
    |g_ad - g_fd| / max(|g_ad| + |g_fd|, floor).  Non-finite values anywhere
    are reported as failure.
    """
    arrays = [np.asarray(p, dtype=np.float64) for p in point]
    inputs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape():
        loss = function(inputs)
        backward(loss)
    ad_grads = [np.zeros_like(a) if x.grad is None else x.grad.copy()
                for a, x in zip(arrays, inputs)]

    worst = 0.0
    per_input = []
    ok = True
    for i, a in enumerate(arrays):
        fd = np.zeros_like(a)
        flat = a.reshape(-1)
        fd_flat = fd.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            lo_inputs = [Tensor(arr) for arr in arrays]
            fp = float(function(lo_inputs).data)
            flat[j] = orig - h
            lo_inputs = [Tensor(arr) for arr in arrays]
            fm = float(function(lo_inputs).data)
            flat[j] = orig
            fd_flat[j] = (fp - fm) / (2.0 * h)
        if not (np.all(np.isfinite(fd)) and np.all(np.isfinite(ad_grads[i]))):
            ok = False
            worst = float("inf")
            per_input.append(float("inf"))
            continue
        denom = np.maximum(np.abs(ad_grads[i]) + np.abs(fd), floor)
        rel = float((np.abs(ad_grads[i] - fd) / denom).max()) if a.size else 0.0
        per_input.append(rel)
        worst = max(worst, rel)
    passed = ok and worst < tolerance
    return GradReport(max_rel_err=worst, passed=passed, tolerance=tolerance,
                      per_input=per_input)
