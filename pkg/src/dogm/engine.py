"""Reverse-mode automatic differentiation on numpy arrays.

The engine records a flat tape of ``Tensor`` nodes as ops execute; calling
``backward`` on a scalar walks the reachable subgraph in reverse creation
order (a valid topological order, and a fixed reduction order, which is part
of the determinism contract) accumulating gradients into ``.grad``.

Shapes are at most 4 axes.  Spatial ops work on ``(H, W, C)`` maps:

* ``conv2d``: 2-D cross-correlation, weights laid out ``(C_in, K, K, C_out)``.
  Stride 1 zero-pads to "same"; stride 3 requires the spatial dims to divide
  by 3 and tiles exactly (no padding), which makes its adjoint a plain
  transposed matmul.  Both directions reduce to im2col + GEMM.
* ``upsample3``: nearest-neighbor x3; the adjoint sums each 3x3 block.
* ``convlstm_step``: peephole-free ConvLSTM cell built from primitives - a
  single gate convolution over ``concat(x, h_prev)`` split four ways
  (input, forget, output, candidate).  Dropout, when given, applies to the
  non-recurrent input path only.

Training runs in float64; inference may run the same graph in float32 (ops
preserve the input dtype).  Every op output is checked finite (a NaN or Inf
raises ``NumericFault``) unless ``check_finite`` is switched off.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NumericFault(FloatingPointError):
    """An op produced a NaN or Inf."""


class EngineState:
    grad_enabled: bool = True
    check_finite: bool = True
    _seq: int = 0


_state = EngineState()


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def finite_checks(enabled: bool):
    prev = _state.check_finite
    _state.check_finite = enabled
    try:
        yield
    finally:
        _state.check_finite = prev


class Tensor:
    """A node in the autodiff graph: a numpy array plus adjoint plumbing."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float64, np.float32):
            self.data = self.data.astype(np.float64)
        if self.data.ndim > 4:
            raise ValueError("tensors are limited to 4 axes")
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward = None
        _state._seq += 1
        self._seq = _state._seq

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detached(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.data.shape}, dtype={self.data.dtype})"


def _check(arr: np.ndarray, op: str) -> None:
    if _state.check_finite:
        # a full-array sum is one SIMD pass; NaN/Inf both poison it
        s = float(arr.sum())
        if not math.isfinite(s) and not np.isfinite(arr).all():
            raise NumericFault(f"non-finite values produced by op '{op}'")


def _node(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    _check(data, op)
    out = Tensor(data)
    out.name = op
    if _state.grad_enabled:
        out._parents = tuple(p for p in parents if isinstance(p, Tensor))
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t._backward is None and not t.requires_grad and not t._parents:
        return  # constant leaf: gradient not wanted
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) and g.base is not None else np.asarray(g)
    else:
        t.grad += g


def backward(loss: Tensor, free_graph: bool = True) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    ``free_graph`` drops closures and interior gradients as soon as they
    have been consumed, which bounds peak memory during BPTT.
    """
    if loss.data.size != 1:
        raise ValueError("backward starts from a scalar")
    # reachable set, then reverse creation order = reverse topological order
    seen = {id(loss): loss}
    stack = [loss]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    order = sorted(seen.values(), key=lambda t: t._seq, reverse=True)
    loss.grad = np.ones_like(loss.data)
    for node in order:
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if free_graph:
            node._backward = None
            node._parents = ()
            if not node.requires_grad:
                node.grad = None


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError("add requires matching shapes")
    out = a.data + b.data

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _node(out, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError("sub requires matching shapes")
    out = a.data - b.data

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _node(out, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError("mul requires matching shapes")
    ad, bd = a.data, b.data
    out = ad * bd

    def bwd(g):
        _accum(a, g * bd)
        _accum(b, g * ad)

    return _node(out, (a, b), bwd, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s

    def bwd(g):
        _accum(a, g * s)

    return _node(out, (a,), bwd, "scale")


def add_const(a: Tensor, c) -> Tensor:
    out = a.data + c

    def bwd(g):
        _accum(a, g)

    return _node(out, (a,), bwd, "add_const")


def rsub_const(c, a: Tensor) -> Tensor:
    """c - a for a non-differentiable constant c."""
    out = c - a.data

    def bwd(g):
        _accum(a, -g)

    return _node(out, (a,), bwd, "rsub_const")


def mul_const(a: Tensor, c) -> Tensor:
    """Elementwise product with a non-differentiable array or scalar."""
    c = np.asarray(c)
    out = a.data * c

    def bwd(g):
        _accum(a, g * c)

    return _node(out, (a,), bwd, "mul_const")


def power(a: Tensor, p: float) -> Tensor:
    """a ** p for non-negative a (used by the focal weighting)."""
    ad = a.data
    if p == 2.0:
        out = ad * ad

        def bwd2(g):
            _accum(a, g * (2.0 * ad))

        return _node(out, (a,), bwd2, "power")
    out = np.power(ad, p)

    def bwd(g):
        _accum(a, g * p * np.power(ad, p - 1.0))

    return _node(out, (a,), bwd, "power")


def clamped_log(a: Tensor, floor: float = 1e-12) -> Tensor:
    """log(max(a, floor)); below the floor the gradient is zero."""
    ad = a.data
    clipped = np.maximum(ad, floor)
    out = np.log(clipped)
    mask = ad >= floor

    def bwd(g):
        _accum(a, g * mask / clipped)

    return _node(out, (a,), bwd, "clamped_log")


def sum_all(a: Tensor) -> Tensor:
    out = a.data.sum()

    def bwd(g):
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _node(np.asarray(out), (a,), bwd, "sum_all")


def sigmoid(a: Tensor) -> Tensor:
    x = np.clip(a.data, -500.0, 500.0)
    out = 1.0 / (1.0 + np.exp(-x))

    def bwd(g):
        _accum(a, g * out * (1.0 - out))

    return _node(out, (a,), bwd, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - out * out))

    return _node(out, (a,), bwd, "tanh")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0

    def bwd(g):
        _accum(a, g * mask)

    return _node(out, (a,), bwd, "relu")


def softmax_channels(a: Tensor) -> Tensor:
    """Softmax over the trailing (channel) axis; sums to 1 per cell."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accum(a, out * (g - dot))

    return _node(out, (a,), bwd, "softmax")


def dropout(a: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a precomputed inverted-dropout mask (0 or 1/(1-rate))."""
    out = a.data * mask

    def bwd(g):
        _accum(a, g * mask)

    return _node(out, (a,), bwd, "dropout")


# ---------------------------------------------------------------------------
# shape ops


def concat_channels(parts: list[Tensor]) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=-1)
    sizes = [p.data.shape[-1] for p in parts]
    offs = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offs[:-1], offs[1:]):
            _accum(p, g[..., lo:hi])

    return _node(out, tuple(parts), bwd, "concat")


def channel_slice(a: Tensor, lo: int, hi: int) -> Tensor:
    out = a.data[..., lo:hi].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[..., lo:hi] = g
        _accum(a, full)

    return _node(out, (a,), bwd, "channel_slice")


def squeeze_channel(a: Tensor) -> Tensor:
    """Drop a trailing channel axis of size one; adjoint restores it."""
    if a.data.shape[-1] != 1:
        raise ValueError(f"last axis must have size 1, got {a.data.shape}")
    out = a.data[..., 0].copy()

    def bwd(g):
        _accum(a, g[..., None])

    return _node(out, (a,), bwd, "squeeze_channel")


def crop2d(a: Tensor, ox: int, oy: int, h: int, w: int) -> Tensor:
    """Spatial crop of an (H, W, C) map; adjoint zero-pads back."""
    if ox < 0 or oy < 0 or ox + h > a.data.shape[0] or oy + w > a.data.shape[1]:
        raise ValueError("crop outside tensor bounds")
    out = a.data[ox : ox + h, oy : oy + w].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[ox : ox + h, oy : oy + w] = g
        _accum(a, full)

    return _node(out, (a,), bwd, "crop2d")


def shift2d(a: Tensor, dx: int, dy: int) -> Tensor:
    """Translate an (H, W, C) map by whole cells, zero-filling the border.

    ``out[i, j] = a[i - dx, j - dy]`` where defined: positive ``dx`` moves
    content toward larger row indices.
    """
    out = np.zeros_like(a.data)
    H, W = a.data.shape[:2]
    if abs(dx) < H and abs(dy) < W:
        ds_r = slice(max(dx, 0), H + min(dx, 0))
        sr_r = slice(max(-dx, 0), H + min(-dx, 0))
        ds_c = slice(max(dy, 0), W + min(dy, 0))
        sr_c = slice(max(-dy, 0), W + min(-dy, 0))
        out[ds_r, ds_c] = a.data[sr_r, sr_c]

    def bwd(g):
        gi = np.zeros_like(a.data)
        if abs(dx) < H and abs(dy) < W:
            ds_r = slice(max(dx, 0), H + min(dx, 0))
            sr_r = slice(max(-dx, 0), H + min(-dx, 0))
            ds_c = slice(max(dy, 0), W + min(dy, 0))
            sr_c = slice(max(-dy, 0), W + min(-dy, 0))
            gi[sr_r, sr_c] = g[ds_r, ds_c]
        _accum(a, gi)

    return _node(out, (a,), bwd, "shift2d")


def upsample3(a: Tensor) -> Tensor:
    """Nearest-neighbor x3 upsampling of an (H, W, C) map."""
    H, W, C = a.data.shape
    out = np.broadcast_to(a.data[:, None, :, None, :], (H, 3, W, 3, C)).reshape(3 * H, 3 * W, C)

    def bwd(g):
        _accum(a, g.reshape(H, 3, W, 3, C).sum(axis=(1, 3)))

    return _node(out, (a,), bwd, "upsample3")


# ---------------------------------------------------------------------------
# convolution

# im2col buffers above this many elements are processed in row blocks
_COL_BLOCK_ELEMS = 12_000_000


def _im2col_matmul(xp: np.ndarray, w2d: np.ndarray, K: int, H: int, W: int) -> np.ndarray:
    """(H+K-1, W+K-1, Cin) padded input x (Cin*K*K, Cout) -> (H*W, Cout).

    Patch channels are ordered (c, kh, kw) to match the weight layout.
    Large products fall back to row-blocked evaluation to bound memory.
    """
    Cin = xp.shape[2]
    cols = Cin * K * K
    out = np.empty((H * W, w2d.shape[1]), dtype=xp.dtype)
    rows_per_block = max(1, int(_COL_BLOCK_ELEMS // max(1, cols * W)))
    for r0 in range(0, H, rows_per_block):
        r1 = min(H, r0 + rows_per_block)
        win = sliding_window_view(xp[r0 : r1 + K - 1], (K, K), axis=(0, 1))
        patch = win.reshape((r1 - r0) * W, cols)
        out[r0 * W : r1 * W] = patch @ w2d
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """2-D cross-correlation over an (H, W, Cin) map.

    Weights: ``(Cin, K, K, Cout)``.  Stride 1 pads to same size; stride 3
    requires K = 3 and spatial dims divisible by 3 (exact tiling).
    """
    H, W, Cin = x.data.shape
    wc_in, K, K2, Cout = w.data.shape
    if K != K2 or wc_in != Cin:
        raise ValueError(f"weight shape {w.data.shape} incompatible with input {x.data.shape}")
    if x.data.dtype != w.data.dtype:
        raise ValueError("input and weight dtypes must match")
    w2d = w.data.reshape(Cin * K * K, Cout)

    if stride == 1:
        pad = K // 2
        if pad:
            xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
            y2 = _im2col_matmul(xp, w2d, K, H, W)
        else:
            y2 = x.data.reshape(H * W, Cin) @ w2d
        Ho, Wo = H, W
    elif stride == 3:
        if K != 3:
            raise ValueError("stride-3 convolution is defined for 3x3 kernels")
        if H % 3 or W % 3:
            raise ValueError(f"stride-3 convolution needs dims divisible by 3, got {H}x{W}")
        Ho, Wo = H // 3, W // 3
        patch = x.data.reshape(Ho, 3, Wo, 3, Cin).transpose(0, 2, 4, 1, 3).reshape(Ho * Wo, Cin * 9)
        y2 = patch @ w2d
    else:
        raise ValueError("stride must be 1 or 3")

    if b is not None:
        if b.data.shape != (Cout,):
            raise ValueError("bias must have shape (Cout,)")
        y2 = y2 + b.data
    y = y2.reshape(Ho, Wo, Cout)

    def bwd(g):
        g2 = g.reshape(Ho * Wo, Cout)
        if b is not None:
            _accum(b, g2.sum(axis=0))
        if stride == 1:
            pad = K // 2
            if pad:
                xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
                win = sliding_window_view(xp, (K, K), axis=(0, 1))
                patch_m = win.reshape(H * W, Cin * K * K)
                _accum(w, (patch_m.T @ g2).reshape(w.data.shape))
                # full correlation of g with the flipped kernel gives dX
                wflip = w.data[:, ::-1, ::-1, :].transpose(3, 1, 2, 0).reshape(Cout * K * K, Cin)
                gp = np.pad(g, ((pad, pad), (pad, pad), (0, 0)))
                dx = _im2col_matmul(gp, wflip, K, H, W).reshape(H, W, Cin)
                _accum(x, dx)
            else:
                _accum(w, (x.data.reshape(H * W, Cin).T @ g2).reshape(w.data.shape))
                _accum(x, (g2 @ w2d.T).reshape(H, W, Cin))
        else:
            patch_m = x.data.reshape(Ho, 3, Wo, 3, Cin).transpose(0, 2, 4, 1, 3).reshape(Ho * Wo, Cin * 9)
            _accum(w, (patch_m.T @ g2).reshape(w.data.shape))
            dpatch = (g2 @ w2d.T).reshape(Ho, Wo, Cin, 3, 3)
            _accum(x, dpatch.transpose(0, 3, 1, 4, 2).reshape(H, W, Cin))

    parents = (x, w, b) if b is not None else (x, w)
    return _node(y, parents, bwd, "conv2d")


# ---------------------------------------------------------------------------
# recurrent cell


def convlstm_step(
    x: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
    w: Tensor,
    b: Tensor,
    dropout_mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """One peephole-free ConvLSTM step.

    Gate pre-activations come from a single convolution of
    ``concat(x, h_prev)`` producing ``4 * C_hidden`` channels ordered
    (input, forget, output, candidate):

        c = sigmoid(f) * c_prev + sigmoid(i) * tanh(g)
        h = sigmoid(o) * tanh(c)

    ``dropout_mask`` (inverted-dropout scaling, or None) is applied to the
    non-recurrent input ``x`` only.
    """
    C = h_prev.data.shape[-1]
    if w.data.shape[-1] != 4 * C:
        raise ValueError("gate conv must produce 4 * hidden channels")
    if dropout_mask is not None:
        x = dropout(x, dropout_mask)
    gates = conv2d(concat_channels([x, h_prev]), w, b, stride=1)
    i = sigmoid(channel_slice(gates, 0, C))
    f = sigmoid(channel_slice(gates, C, 2 * C))
    o = sigmoid(channel_slice(gates, 2 * C, 3 * C))
    g = tanh(channel_slice(gates, 3 * C, 4 * C))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Worst finite-difference discrepancies per checked leaf."""

    max_rel_err: float = 0.0
    per_leaf: dict = field(default_factory=dict)
    samples: int = 0

    def ok(self, threshold: float = 1e-4) -> bool:
        return self.max_rel_err < threshold


def grad_check(
    build,
    leaves: list[Tensor],
    samples: int = 200,
    step: float = 1e-6,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    ``build()`` must return a scalar loss Tensor computed from the given
    leaf tensors (which it captures; their ``.data`` is perturbed in place).
    Relative error uses a 1e-5 floor so noise on near-zero gradients is
    judged on an absolute scale.
    """
    rng = rng or np.random.default_rng(0)
    for leaf in leaves:
        leaf.grad = None
        leaf.requires_grad = True
    loss = build()
    backward(loss, free_graph=False)
    analytic = [np.zeros_like(l.data) if l.grad is None else l.grad.copy() for l in leaves]

    report = GradCheckReport()
    sizes = np.array([l.data.size for l in leaves], dtype=np.float64)
    alloc = np.maximum(1, np.round(samples * sizes / sizes.sum()).astype(int))
    with no_grad():
        for leaf, grad, n in zip(leaves, analytic, alloc):
            flat = leaf.data.reshape(-1)
            idx = rng.choice(flat.size, size=min(n, flat.size), replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                lp = float(build().data)
                flat[i] = orig - step
                lm = float(build().data)
                flat[i] = orig
                fd = (lp - lm) / (2 * step)
                an = float(grad.reshape(-1)[i])
                rel = abs(an - fd) / max(abs(an), abs(fd), 1e-5)
                worst = max(worst, rel)
                report.samples += 1
            report.per_leaf[leaf.name or f"leaf{id(leaf)}"] = worst
            report.max_rel_err = max(report.max_rel_err, worst)
    return report
