"""Minimal reverse-mode differentiation on a flat tape.

Exactly the operations the branched autoencoder needs: dense layers,
strided convolution (2D/3D), leaky ReLU, sigmoid, max over branches,
mean-squared-error, an L1 penalty, and the Adam update. Values are
32-bit floats; convolution and loss reductions accumulate in 64-bit
before rounding so the summation order never shows up at test
tolerances. No graphs, no broadcasting zoo: the tape is a list of
records replayed in reverse.
"""

from __future__ import annotations

import itertools
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ParameterError

F32 = np.float32

_ids = itertools.count()


def as_f32(x, name: str = "tensor") -> np.ndarray:
    """Coerce to a C-contiguous float32 array (0-d allowed), rejecting NaN/Inf."""
    arr = np.asarray(x, dtype=F32, order="C")
    if arr.ndim and not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite values")
    return arr


class Node:
    """A value produced on (or fed into) a tape.

    ``track`` marks nodes that participate in backprop; plain constants
    are wrapped untracked so no gradient buffers are kept for them.
    ``f64`` optionally carries the pre-rounding 64-bit value of scalar
    reductions, used by finite-difference test oracles.
    """

    __slots__ = ("data", "nid", "track", "f64")

    def __init__(self, data: np.ndarray, track: bool = True, f64: float | None = None):
        self.data = data
        self.nid = next(_ids)
        self.track = track
        self.f64 = f64

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() on a non-scalar node")
        return float(self.data)

    def item64(self) -> float:
        """Scalar value before the final float32 rounding, when recorded."""
        return self.f64 if self.f64 is not None else self.item()


class Parameter:
    """Trainable value plus its gradient buffer (same shape, float32)."""

    __slots__ = ("value", "grad", "name", "nid")

    def __init__(self, value, name: str = ""):
        self.value = as_f32(value, name or "parameter")
        self.grad = np.zeros_like(self.value)
        self.name = name
        self.nid = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name or self.nid}, shape={self.value.shape})"


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid exp overflow
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _im2col(xp: np.ndarray, k: int, stride: int, d: int) -> tuple[np.ndarray, tuple[int, ...]]:
    """Unfold padded [C, *spatial] into [n_windows, C*k^d] rows, C-ordered windows."""
    c = xp.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k,) * d, axis=tuple(range(1, d + 1)))
    win = win[(slice(None),) + (slice(None, None, stride),) * d]
    out_sp = win.shape[1 : 1 + d]
    axes = tuple(range(1, d + 1)) + (0,) + tuple(range(d + 1, 2 * d + 1))
    cols = win.transpose(axes).reshape(int(np.prod(out_sp)), c * k**d)
    return np.ascontiguousarray(cols), out_sp


def _col2im(gcols: np.ndarray, c: int, padded_sp: Sequence[int], k: int, stride: int,
            out_sp: Sequence[int]) -> np.ndarray:
    """Scatter-add [n_windows, C*k^d] gradients back onto the padded input (float64)."""
    d = len(out_sp)
    g = gcols.reshape(*out_sp, c, *((k,) * d))
    gpad = np.zeros((c, *padded_sp), dtype=np.float64)
    for off in itertools.product(range(k), repeat=d):
        sub = g[(Ellipsis,) + off]  # [*out_sp, C]
        view = gpad[(slice(None),) + tuple(slice(a, a + stride * o, stride)
                                           for a, o in zip(off, out_sp))]
        view += np.moveaxis(sub, -1, 0)
    return gpad


class Tape:
    """Ordered record of operations; one backward() sweep fills gradients.

    Records are appended in execution order, which is a topological order
    by construction. backward() may be called once per recording; calling
    it again without recording new operations raises ContractError.
    """

    def __init__(self):
        self._records: list[tuple[int, object]] = []
        self._grads: dict[int, np.ndarray] = {}
        self._spent = False

    # -- node plumbing ---------------------------------------------------

    def leaf(self, data, name: str = "input") -> Node:
        """A tracked input node whose gradient can be queried after backward()."""
        return Node(as_f32(data, name), track=True)

    def _as_node(self, x) -> Node:
        if isinstance(x, Node):
            return x
        if isinstance(x, Parameter):
            raise ContractError("parameters enter ops through their dedicated slots")
        return Node(as_f32(x), track=False)

    def _emit(self, data: np.ndarray, backward, f64: float | None = None) -> Node:
        node = Node(data, track=True, f64=f64)
        self._records.append((node.nid, backward))
        self._spent = False
        return node

    def _acc(self, node: Node, g: np.ndarray) -> None:
        if not node.track:
            return
        slot = self._grads.get(node.nid)
        if slot is None:
            self._grads[node.nid] = np.array(g, dtype=F32, copy=True)
        else:
            slot += g

    def grad(self, ref: Node | Parameter) -> np.ndarray:
        """Gradient of the last backward()'s loss w.r.t. a node or parameter."""
        if isinstance(ref, Parameter):
            return ref.grad
        g = self._grads.get(ref.nid)
        return g if g is not None else np.zeros_like(ref.data)

    # -- layers ----------------------------------------------------------

    def dense(self, x, w: Parameter, b: Parameter) -> Node:
        """y = x @ W.T + b for x of shape [n_in] or [N, n_in]."""
        xn = self._as_node(x)
        xv = xn.data
        if w.value.ndim != 2:
            raise DimensionError(f"dense weight must be 2-D, got {w.value.shape}")
        n_out, n_in = w.value.shape
        if xv.ndim not in (1, 2) or xv.shape[-1] != n_in:
            raise DimensionError(f"dense input {xv.shape} does not match weight {w.value.shape}")
        if b.value.shape != (n_out,):
            raise DimensionError(f"dense bias {b.value.shape} does not match n_out={n_out}")
        y = xv @ w.value.T + b.value

        def backward(g):
            if xv.ndim == 1:
                w.grad += np.outer(g, xv)
                b.grad += g
            else:
                w.grad += g.T @ xv
                b.grad += g.sum(axis=0, dtype=np.float64).astype(F32)
            if xn.track:
                self._acc(xn, g @ w.value)

        return self._emit(y, backward)

    def conv(self, x, w: Parameter, stride: int, padding: int,
             bias: Parameter | None = None) -> Node:
        """Strided cross-correlation with zero padding; 2-D or 3-D by kernel rank.

        x: [C_in, *spatial]; w: [C_out, C_in, k, k(, k)]. Accumulation runs
        in float64 and is rounded once to float32.
        """
        xn = self._as_node(x)
        xv = xn.data
        d = w.value.ndim - 2
        if d not in (2, 3):
            raise DimensionError(f"conv kernel must be rank 4 or 5, got {w.value.shape}")
        c_out, c_in = w.value.shape[:2]
        k = w.value.shape[2]
        if any(ks != k for ks in w.value.shape[2:]):
            raise DimensionError("conv kernels must be square/cubic")
        if xv.ndim != d + 1 or xv.shape[0] != c_in:
            raise DimensionError(f"conv input {xv.shape} does not match kernel {w.value.shape}")
        if stride < 1 or padding < 0:
            raise ParameterError("conv stride must be >= 1 and padding >= 0")
        for e in xv.shape[1:]:
            if e + 2 * padding < k:
                raise DimensionError(f"spatial extent {e} too small for kernel {k}, pad {padding}")
        if bias is not None and bias.value.shape != (c_out,):
            raise DimensionError("conv bias shape mismatch")

        xp = np.pad(xv, [(0, 0)] + [(padding, padding)] * d)
        cols, out_sp = _im2col(xp, k, stride, d)
        wm = w.value.reshape(c_out, -1)
        y64 = cols.astype(np.float64) @ wm.T.astype(np.float64)
        if bias is not None:
            y64 += bias.value.astype(np.float64)
        n_win = cols.shape[0]
        y = y64.astype(F32).T.reshape(c_out, *out_sp)
        padded_sp = xp.shape[1:]

        def backward(g):
            gm = g.reshape(c_out, n_win).T  # [n_windows, C_out]
            gm64 = gm.astype(np.float64)
            w.grad += (gm64.T @ cols.astype(np.float64)).astype(F32).reshape(w.value.shape)
            if bias is not None:
                bias.grad += gm.sum(axis=0, dtype=np.float64).astype(F32)
            if xn.track:
                gcols = gm64 @ wm.astype(np.float64)
                gpad = _col2im(gcols, c_in, padded_sp, k, stride, out_sp)
                if padding:
                    sl = (slice(None),) + (slice(padding, -padding),) * d
                    gpad = gpad[sl]
                self._acc(xn, gpad.astype(F32))

        return self._emit(y, backward)

    # -- activations -----------------------------------------------------

    def leaky_relu(self, x, slope: float = 0.02) -> Node:
        if not 0.0 < slope < 1.0:
            raise ParameterError(f"leaky ReLU slope must be in (0,1), got {slope}")
        xn = self._as_node(x)
        # slope < 1 makes max(x, slope*x) the leaky ramp
        y = np.maximum(xn.data, F32(slope) * xn.data)

        def backward(g):
            if xn.track:
                self._acc(xn, np.where(xn.data >= 0, g, F32(slope) * g))

        return self._emit(y, backward)

    def sigmoid(self, x) -> Node:
        xn = self._as_node(x)
        y = _sigmoid(xn.data)

        def backward(g):
            if xn.track:
                self._acc(xn, g * y * (1.0 - y))

        return self._emit(y, backward)

    def hardclip(self, x) -> Node:
        """clip(x, 0, 1); gradient passes only on the open interval."""
        xn = self._as_node(x)
        y = np.clip(xn.data, 0.0, 1.0)
        inside = (xn.data > 0) & (xn.data < 1)

        def backward(g):
            if xn.track:
                self._acc(xn, np.where(inside, g, F32(0.0)))

        return self._emit(y, backward)

    def leakyclip(self, x, slope: float = 0.01) -> Node:
        """Two-sided leaky clip to [0, 1]: identity inside, slope outside.

        y = max(min(x, slope*x + 1 - slope), slope*x). Keeps a small
        gradient everywhere, unlike sigmoid or a hard clip.
        """
        if not 0.0 < slope < 1.0:
            raise ParameterError(f"leaky clip slope must be in (0,1), got {slope}")
        xn = self._as_node(x)
        xv = xn.data
        s = F32(slope)
        y = np.maximum(np.minimum(xv, s * xv + F32(1.0 - slope)), s * xv)
        inside = (xv >= 0) & (xv <= 1)

        def backward(g):
            if xn.track:
                self._acc(xn, np.where(inside, g, s * g))

        return self._emit(y, backward)

    # -- structure -------------------------------------------------------

    def flatten(self, x) -> Node:
        xn = self._as_node(x)
        shape = xn.data.shape
        y = xn.data.reshape(-1)

        def backward(g):
            if xn.track:
                self._acc(xn, g.reshape(shape))

        return self._emit(y, backward)

    def concat_code_points(self, code, points) -> Node:
        """Rows [z ; p] for a single code z [c] and point batch p [N, d]."""
        zn = self._as_node(code)
        pn = self._as_node(points)
        if zn.data.ndim != 1 or pn.data.ndim != 2:
            raise DimensionError("expected code [c] and points [N, d]")
        n = pn.data.shape[0]
        c = zn.data.shape[0]
        y = np.concatenate([np.broadcast_to(zn.data, (n, c)), pn.data], axis=1)
        y = np.ascontiguousarray(y)

        def backward(g):
            if zn.track:
                self._acc(zn, g[:, :c].sum(axis=0, dtype=np.float64).astype(F32))
            if pn.track:
                self._acc(pn, g[:, c:])

        return self._emit(y, backward)

    def branch_max(self, x) -> tuple[Node, np.ndarray | int]:
        """Max over the branch axis; ties go to the lowest index.

        [k] -> scalar node + int argmax; [N, k] -> [N] node + int array.
        The gradient routes only to the argmax element(s).
        """
        xn = self._as_node(x)
        xv = xn.data
        if xv.size == 0:
            raise DimensionError("branch max over an empty vector")
        if xv.ndim == 1:
            arg = int(np.argmax(xv))
            y = xv[arg].reshape(())

            def backward(g):
                if xn.track:
                    gx = np.zeros_like(xv)
                    gx[arg] = g
                    self._acc(xn, gx)

            return self._emit(y, backward), arg
        if xv.ndim == 2:
            args = np.argmax(xv, axis=1)
            rows = np.arange(xv.shape[0])
            y = xv[rows, args]

            def backward(g):
                if xn.track:
                    gx = np.zeros_like(xv)
                    gx[rows, args] = g
                    self._acc(xn, gx)

            return self._emit(y, backward), args
        raise DimensionError(f"branch max expects rank 1 or 2, got {xv.shape}")

    # -- losses and scalars ------------------------------------------------

    def mse(self, pred, target) -> Node:
        pn = self._as_node(pred)
        tv = as_f32(target, "mse target")
        if pn.data.shape != tv.shape:
            raise DimensionError(f"mse shapes differ: {pn.data.shape} vs {tv.shape}")
        if pn.data.size == 0:
            raise DimensionError("mse over an empty tensor")
        diff = pn.data - tv
        n = diff.size
        val64 = float(np.sum(diff.astype(np.float64) ** 2) / n)

        def backward(g):
            if pn.track:
                self._acc(pn, (F32(2.0 / n) * g) * diff)

        return self._emit(np.asarray(val64, dtype=F32).reshape(()), backward, f64=val64)

    def l1(self, params: Iterable[Parameter]) -> Node:
        """Sum of |w| over all entries of the given parameters; subgradient 0 at 0."""
        plist = list(params)
        val64 = float(sum(np.sum(np.abs(p.value), dtype=np.float64) for p in plist))

        def backward(g):
            for p in plist:
                p.grad += g * np.sign(p.value)

        return self._emit(np.asarray(val64, dtype=F32).reshape(()), backward, f64=val64)

    def sum(self, x) -> Node:
        xn = self._as_node(x)
        val64 = float(np.sum(xn.data, dtype=np.float64))

        def backward(g):
            if xn.track:
                self._acc(xn, np.full_like(xn.data, g))

        return self._emit(np.asarray(val64, dtype=F32).reshape(()), backward, f64=val64)

    def sum_param(self, p: Parameter) -> Node:
        """Scalar sum of a parameter's entries (leaf entry point for tests)."""
        val64 = float(np.sum(p.value, dtype=np.float64))

        def backward(g):
            p.grad += np.full_like(p.value, g)

        return self._emit(np.asarray(val64, dtype=F32).reshape(()), backward, f64=val64)

    def add(self, a, b) -> Node:
        an, bn = self._as_node(a), self._as_node(b)
        if an.data.shape != bn.data.shape:
            raise DimensionError(f"add shapes differ: {an.data.shape} vs {bn.data.shape}")
        f64 = None
        if an.f64 is not None and bn.f64 is not None:
            f64 = an.f64 + bn.f64
        y = an.data + bn.data

        def backward(g):
            self._acc(an, g)
            self._acc(bn, g)

        return self._emit(y, backward, f64=f64)

    def scale(self, x, c: float) -> Node:
        xn = self._as_node(x)
        f64 = xn.f64 * c if xn.f64 is not None else None
        y = xn.data * F32(c)

        def backward(g):
            if xn.track:
                self._acc(xn, g * F32(c))

        return self._emit(y, backward, f64=f64)

    # -- reverse sweep -----------------------------------------------------

    def backward(self, loss: Node) -> None:
        """Populate gradients of everything reachable from a scalar loss."""
        if not isinstance(loss, Node) or loss.data.shape != ():
            raise ContractError("backward() needs a scalar loss recorded on this tape")
        if self._spent:
            raise ContractError("backward() already ran on this tape; record new ops first")
        if not any(nid == loss.nid for nid, _ in self._records):
            raise ContractError("loss was not produced on this tape")
        self._grads.clear()
        self._grads[loss.nid] = np.ones((), dtype=F32)
        for nid, fn in reversed(self._records):
            g = self._grads.get(nid)
            if g is None:
                continue
            fn(g)
        self._spent = True


class Adam:
    """Bias-corrected adaptive-moment update, applied in place."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        if len({p.nid for p in self.params}) != len(self.params):
            raise ParameterError("duplicate parameter passed to Adam")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad.shape != p.value.shape:
                raise DimensionError(f"gradient shape drifted for {p!r}")
            g = p.grad
            m *= self.beta1
            m += F32(1.0 - self.beta1) * g
            v *= self.beta2
            v += F32(1.0 - self.beta2) * (g * g)
            p.value -= F32(self.lr) * (m / F32(bc1)) / (np.sqrt(v / F32(bc2)) + F32(self.eps))

    def state_arrays(self) -> tuple[int, list[np.ndarray], list[np.ndarray]]:
        return self.t, self.m, self.v

    def load_state(self, t: int, m: list[np.ndarray], v: list[np.ndarray]) -> None:
        if len(m) != len(self.params) or len(v) != len(self.params):
            raise DimensionError("optimizer state does not match parameter list")
        for p, mi, vi in zip(self.params, m, v):
            if mi.shape != p.value.shape or vi.shape != p.value.shape:
                raise DimensionError("optimizer moment shape mismatch")
        self.t = int(t)
        self.m = [mi.astype(F32, copy=True) for mi in m]
        self.v = [vi.astype(F32, copy=True) for vi in v]
