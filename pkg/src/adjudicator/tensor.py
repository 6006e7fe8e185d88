"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every model computation is expressed through the primitives in this module.
Each primitive evaluates its forward value eagerly with numpy and, when a
Tape is active and some input requires gradients, appends a backward closure
to the tape. Because tensors are created in execution order, the tape is
already topologically sorted; a reverse sweep walks it once back to front.

Conventions:
  * all values are float64; masks are plain numpy arrays treated as
    constants (gradients never flow through a mask),
  * broadcasting follows numpy's trailing-dimension rules, which is all the
    model needs (vector-to-rows and scalar broadcast),
  * gradients accumulate additively into ``Tensor.grad``; unreachable
    tensors keep ``grad is None``, which readers treat as zero.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "tape_paused",
    "ShapeError",
    "DomainError",
    "UsageError",
    "matmul",
    "add",
    "sub",
    "neg",
    "mul",
    "scale",
    "softmax",
    "masked_softmax",
    "layer_norm",
    "gelu",
    "tanh",
    "sigmoid",
    "log",
    "log_sigmoid",
    "powc",
    "clamp_min",
    "relu",
    "masked_mean",
    "concat",
    "stack",
    "select",
    "slice_rows",
    "reshape",
    "transpose",
    "sum_all",
    "mean_all",
    "entropy",
    "finite_diff_check",
    "GradCheckReport",
    "ParamCheck",
]

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327
_MASK_OFFSET = 1e9


class ShapeError(ValueError):
    """Operand dimensions incompatible with the requested primitive."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class DomainError(ValueError):
    """Input value outside a primitive's numeric domain."""


class UsageError(RuntimeError):
    """The differentiation machinery was driven incorrectly."""


class Tensor:
    """A dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", f"expected one element, got dims {self.data.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return np.array(self.data, copy=True)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape), dtype=np.float64)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(dims={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ShapeError("div", "only division by a python scalar is supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


_STATE = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_STATE, "tape", None)


class Tape:
    """Records one backward closure per primitive, in execution order.

    Used as a context manager; tapes nest per thread. A tape may be swept
    more than once (gradients must be reset in between, or they accumulate).
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._outer: Tape | None = None

    def __enter__(self) -> "Tape":
        self._outer = getattr(_STATE, "tape", None)
        _STATE.tape = self
        return self

    def __exit__(self, *exc) -> bool:
        _STATE.tape = self._outer
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and sweep the tape in reverse order."""
        if loss.data.size != 1:
            raise UsageError(f"backward requires a scalar loss, got dims {loss.data.shape}")
        loss._accumulate(np.ones_like(loss.data))
        for out, fn in reversed(self._nodes):
            g = out.grad
            if g is not None:
                fn(g)

    def reset_grads(self, leaves: Sequence[Tensor] = ()) -> None:
        """Clear gradients of every recorded output plus the given leaves."""
        for out, _ in self._nodes:
            out.grad = None
        for t in leaves:
            t.grad = None

    def clear(self) -> None:
        self._nodes.clear()


@contextmanager
def tape_paused():
    """Suspend recording on the current thread for the duration of the block.

    Primitives run as plain numpy inside; results come back as constant
    tensors. Useful when part of a forward pass is known to carry no trainable
    gradient and the bookkeeping would be wasted work.
    """
    outer = getattr(_STATE, "tape", None)
    _STATE.tape = None
    try:
        yield
    finally:
        _STATE.tape = outer


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _record(out: Tensor, fn: Callable[[np.ndarray], None]) -> None:
    tape = _active_tape()
    if tape is not None:
        tape._nodes.append((out, fn))


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b)
    try:
        out_data = a.data + b.data
    except ValueError:
        raise ShapeError("add", f"cannot broadcast {a.data.shape} with {b.data.shape}") from None
    rg = a.requires_grad or b.requires_grad
    out = Tensor(out_data, rg)
    if rg:
        ash, bsh = a.data.shape, b.data.shape

        def bwd(g):
            if a.requires_grad:
                a._accumulate(_reduce_to(g, ash))
            if b.requires_grad:
                b._accumulate(_reduce_to(g, bsh))

        _record(out, bwd)
    return out


def sub(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b)
    try:
        out_data = a.data - b.data
    except ValueError:
        raise ShapeError("sub", f"cannot broadcast {a.data.shape} with {b.data.shape}") from None
    rg = a.requires_grad or b.requires_grad
    out = Tensor(out_data, rg)
    if rg:
        ash, bsh = a.data.shape, b.data.shape

        def bwd(g):
            if a.requires_grad:
                a._accumulate(_reduce_to(g, ash))
            if b.requires_grad:
                b._accumulate(_reduce_to(-g, bsh))

        _record(out, bwd)
    return out


def neg(a) -> Tensor:
    a = _lift(a)
    out = Tensor(-a.data, a.requires_grad)
    if a.requires_grad:

        def bwd(g):
            a._accumulate(-g)

        _record(out, bwd)
    return out


def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b)
    try:
        out_data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", f"cannot broadcast {a.data.shape} with {b.data.shape}") from None
    rg = a.requires_grad or b.requires_grad
    out = Tensor(out_data, rg)
    if rg:
        ad, bd = a.data, b.data

        def bwd(g):
            if a.requires_grad:
                a._accumulate(_reduce_to(g * bd, ad.shape))
            if b.requires_grad:
                b._accumulate(_reduce_to(g * ad, bd.shape))

        _record(out, bwd)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant (no gradient for ``c``)."""
    c = float(c)
    out = Tensor(a.data * c, a.requires_grad)
    if a.requires_grad:

        def bwd(g):
            a._accumulate(g * c)

        _record(out, bwd)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, with 1-D operands treated as vectors.

    Supported pairings: (2D,2D), (2D,1D), (1D,2D), (1D,1D), and batched
    stacks of matrices with identical leading dimensions.
    """
    a = _lift(a)
    b = _lift(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ShapeError("matmul", "operands must have at least one dimension")
    a_inner = ad.shape[-1]
    b_inner = bd.shape[-2] if bd.ndim > 1 else bd.shape[0]
    if a_inner != b_inner:
        raise ShapeError("matmul", f"inner dims differ: {ad.shape} vs {bd.shape}")
    if ad.ndim > 2 or bd.ndim > 2:
        if ad.ndim == 1 or bd.ndim == 1:
            raise ShapeError("matmul", f"cannot mix vectors with batched stacks: {ad.shape} vs {bd.shape}")
        if ad.shape[:-2] != bd.shape[:-2]:
            raise ShapeError("matmul", f"batch dims differ: {ad.shape} vs {bd.shape}")
    out = Tensor(ad @ bd, a.requires_grad or b.requires_grad)
    if out.requires_grad:

        def bwd(g):
            if a.requires_grad:
                if ad.ndim == 1 and bd.ndim == 1:
                    ga = g * bd
                elif bd.ndim == 1:
                    ga = np.multiply.outer(g, bd)
                elif ad.ndim == 1:
                    ga = bd @ g
                else:
                    ga = g @ np.swapaxes(bd, -1, -2)
                a._accumulate(ga)
            if b.requires_grad:
                if ad.ndim == 1 and bd.ndim == 1:
                    gb = g * ad
                elif ad.ndim == 1:
                    gb = np.multiply.outer(ad, g)
                elif bd.ndim == 1:
                    gb = ad.T @ g
                else:
                    gb = np.swapaxes(ad, -1, -2) @ g
                b._accumulate(gb)

        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def softmax(x: Tensor) -> Tensor:
    """Row softmax over the last axis, stabilized by max subtraction."""
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    s = e.sum(axis=-1, keepdims=True)
    y = e / s
    out = Tensor(y, x.requires_grad)
    if x.requires_grad:

        def bwd(g):
            x._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

        _record(out, bwd)
    return out


def masked_softmax(x: Tensor, mask) -> Tensor:
    """Row softmax restricted to positions where ``mask`` is 1.

    Masked positions receive an additive -1e9 before the stabilized softmax
    and are then forced to exactly zero, so masked values can never leak
    into downstream sums. The mask is a constant; it must broadcast against
    ``x`` along the trailing axes and leave at least one live position per
    row.
    """
    xd = x.data
    mk = np.asarray(mask, dtype=np.float64)
    try:
        shifted = xd + (mk - 1.0) * _MASK_OFFSET
    except ValueError:
        raise ShapeError("masked_softmax", f"mask {mk.shape} does not broadcast with {xd.shape}") from None
    m = shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted - m) * mk
    s = e.sum(axis=-1, keepdims=True)
    if not np.all(s > 0.0):
        raise DomainError("masked_softmax: a row has no unmasked positions")
    y = e / s
    out = Tensor(y, x.requires_grad)
    if x.requires_grad:

        def bwd(g):
            # masked entries of y are exactly zero, so their slots get zero grad
            x._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

        _record(out, bwd)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row over the last axis, then apply gain and bias."""
    xd = x.data
    if gain.data.shape != xd.shape[-1:] or bias.data.shape != xd.shape[-1:]:
        raise ShapeError(
            "layer_norm",
            f"gain/bias dims {gain.data.shape}/{bias.data.shape} do not match feature dim {xd.shape[-1:]}",
        )
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    y = gain.data * xn + bias.data
    rg = x.requires_grad or gain.requires_grad or bias.requires_grad
    out = Tensor(y, rg)
    if rg:
        gd = gain.data

        def bwd(g):
            if gain.requires_grad:
                gain._accumulate(_reduce_to(g * xn, gd.shape))
            if bias.requires_grad:
                bias._accumulate(_reduce_to(g, gd.shape))
            if x.requires_grad:
                dxn = g * gd
                term = dxn - dxn.mean(axis=-1, keepdims=True) - xn * (dxn * xn).mean(axis=-1, keepdims=True)
                x._accumulate(inv * term)

        _record(out, bwd)
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = Tensor(xd * cdf, x.requires_grad)
    if x.requires_grad:

        def bwd(g):
            pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
            x._accumulate(g * (cdf + xd * pdf))

        _record(out, bwd)
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y, x.requires_grad)
    if x.requires_grad:

        def bwd(g):
            x._accumulate(g * (1.0 - y * y))

        _record(out, bwd)
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function.

    Computed from exp(-|x|) so that sigmoid(x) + sigmoid(-x) == 1.0 exactly
    in floating point (the 1-q subtraction is exact for q in [0.5, 1]).
    """
    xd = x.data
    q = 1.0 / (1.0 + np.exp(-np.abs(xd)))
    y = np.where(xd >= 0.0, q, 1.0 - q)
    out = Tensor(y, x.requires_grad)
    if x.requires_grad:

        def bwd(g):
            x._accumulate(g * y * (1.0 - y))

        _record(out, bwd)
    return out


def log(x: Tensor) -> Tensor:
    xd = x.data
    if not np.all(xd > 0.0):
        raise DomainError("log: input must be strictly positive")
    out = Tensor(np.log(xd), x.requires_grad)
    if x.requires_grad:

        def bwd(g):
            x._accumulate(g / xd)

        _record(out, bwd)
    return out


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)), stable in both tails."""
    xd = x.data
    y = np.minimum(xd, 0.0) - np.log1p(np.exp(-np.abs(xd)))
    out = Tensor(y, x.requires_grad)
    if x.requires_grad:

        def bwd(g):
            q = 1.0 / (1.0 + np.exp(-np.abs(xd)))
            sig_neg = np.where(xd >= 0.0, 1.0 - q, q)
            x._accumulate(g * sig_neg)

        _record(out, bwd)
    return out


def powc(x: Tensor, exponent: float) -> Tensor:
    """Elementwise power with a fixed python-scalar exponent.

    Non-integer exponents require strictly positive inputs; negative
    exponents additionally reject zeros. ``exponent == 0`` returns ones with
    zero gradient for any input.
    """
    p = float(exponent)
    xd = x.data
    if p == 0.0:
        out = Tensor(np.ones_like(xd), x.requires_grad)
        if x.requires_grad:

            def bwd_zero(g):
                x._accumulate(np.zeros_like(xd))

            _record(out, bwd_zero)
        return out
    if p != int(p) and not np.all(xd > 0.0):
        raise DomainError(f"powc: non-integer exponent {p} requires strictly positive input")
    if p < 0 and np.any(xd == 0.0):
        raise DomainError(f"powc: negative exponent {p} undefined at zero")
    out = Tensor(xd**p, x.requires_grad)
    if x.requires_grad:

        def bwd(g):
            x._accumulate(g * p * xd ** (p - 1.0))

        _record(out, bwd)
    return out


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """Elementwise max(x, floor); gradient passes only where x > floor."""
    floor = float(floor)
    xd = x.data
    out = Tensor(np.maximum(xd, floor), x.requires_grad)
    if x.requires_grad:

        def bwd(g):
            x._accumulate(g * (xd > floor))

        _record(out, bwd)
    return out


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out = Tensor(np.maximum(xd, 0.0), x.requires_grad)
    if x.requires_grad:

        def bwd(g):
            x._accumulate(g * (xd > 0.0))

        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# reductions and reshaping


def masked_mean(x: Tensor, mask) -> Tensor:
    """Mean over axis-0 rows where ``mask`` is 1. Mask is a constant."""
    xd = x.data
    mk = np.asarray(mask, dtype=np.float64)
    if mk.ndim != 1 or mk.shape[0] != xd.shape[0]:
        raise ShapeError("masked_mean", f"mask {mk.shape} does not match leading dim of {xd.shape}")
    n = mk.sum()
    if n <= 0.0:
        raise DomainError("masked_mean: mask selects no rows")
    w = mk / n
    out = Tensor(w @ xd if xd.ndim > 1 else w @ xd, x.requires_grad)
    if x.requires_grad:

        def bwd(g):
            if xd.ndim > 1:
                x._accumulate(np.multiply.outer(w, g))
            else:
                x._accumulate(w * g)

        _record(out, bwd)
    return out


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 1-D tensors along the feature axis."""
    if not parts:
        raise ShapeError("concat", "needs at least one part")
    datas = [p.data for p in parts]
    for d in datas:
        if d.ndim != 1:
            raise ShapeError("concat", f"parts must be 1-D, got dims {d.shape}")
    out = Tensor(np.concatenate(datas), any(p.requires_grad for p in parts))
    if out.requires_grad:
        sizes = [d.shape[0] for d in datas]

        def bwd(g):
            off = 0
            for p, n in zip(parts, sizes):
                if p.requires_grad:
                    p._accumulate(g[off : off + n])
                off += n

        _record(out, bwd)
    return out


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack scalar tensors into a 1-D vector."""
    if not parts:
        raise ShapeError("stack", "needs at least one part")
    for p in parts:
        if p.data.size != 1:
            raise ShapeError("stack", f"parts must be scalars, got dims {p.data.shape}")
    out = Tensor(
        np.array([p.data.reshape(()) for p in parts]),
        any(p.requires_grad for p in parts),
    )
    if out.requires_grad:

        def bwd(g):
            for i, p in enumerate(parts):
                if p.requires_grad:
                    p._accumulate(np.asarray(g[i]).reshape(p.data.shape))

        _record(out, bwd)
    return out


def select(x: Tensor, index: int) -> Tensor:
    """Index along axis 0: row of a matrix, element of a vector."""
    xd = x.data
    if xd.ndim == 0:
        raise ShapeError("select", "cannot index a scalar")
    if not 0 <= index < xd.shape[0]:
        raise ShapeError("select", f"index {index} out of range for dims {xd.shape}")
    out = Tensor(xd[index].copy(), x.requires_grad)
    if x.requires_grad:

        def bwd(g):
            gx = np.zeros_like(xd)
            gx[index] = g
            x._accumulate(gx)

        _record(out, bwd)
    return out


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous axis-0 slice ``x[start:stop]``."""
    xd = x.data
    if xd.ndim == 0:
        raise ShapeError("slice_rows", "cannot slice a scalar")
    if not (0 <= start < stop <= xd.shape[0]):
        raise ShapeError("slice_rows", f"range [{start}, {stop}) invalid for dims {xd.shape}")
    out = Tensor(xd[start:stop].copy(), x.requires_grad)
    if x.requires_grad:

        def bwd(g):
            gx = np.zeros_like(xd)
            gx[start:stop] = g
            x._accumulate(gx)

        _record(out, bwd)
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    xd = x.data
    try:
        y = xd.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot view dims {xd.shape} as {shape}") from None
    out = Tensor(y, x.requires_grad)
    if x.requires_grad:

        def bwd(g):
            x._accumulate(g.reshape(xd.shape))

        _record(out, bwd)
    return out


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    xd = x.data
    if len(axes) != xd.ndim:
        raise ShapeError("transpose", f"axes {axes} do not match dims {xd.shape}")
    out = Tensor(np.transpose(xd, axes), x.requires_grad)
    if x.requires_grad:
        inv = tuple(np.argsort(axes))

        def bwd(g):
            x._accumulate(np.transpose(g, inv))

        _record(out, bwd)
    return out


def sum_all(x: Tensor) -> Tensor:
    xd = x.data
    out = Tensor(xd.sum(), x.requires_grad)
    if x.requires_grad:

        def bwd(g):
            x._accumulate(np.broadcast_to(g, xd.shape))

        _record(out, bwd)
    return out


def mean_all(x: Tensor) -> Tensor:
    xd = x.data
    out = Tensor(xd.mean(), x.requires_grad)
    if x.requires_grad:
        inv_n = 1.0 / xd.size

        def bwd(g):
            x._accumulate(np.broadcast_to(g * inv_n, xd.shape))

        _record(out, bwd)
    return out


def entropy(p: Tensor) -> Tensor:
    """Shannon entropy -sum(p * ln p) of a 1-D vector, with 0 ln 0 == 0."""
    pd = p.data
    if pd.ndim != 1:
        raise ShapeError("entropy", f"expected a 1-D vector, got dims {pd.shape}")
    if np.any(pd < 0.0):
        raise DomainError("entropy: probabilities must be non-negative")
    pos = pd > 0.0
    logs = np.zeros_like(pd)
    logs[pos] = np.log(pd[pos])
    out = Tensor(-(pd[pos] * logs[pos]).sum(), p.requires_grad)
    if p.requires_grad:

        def bwd(g):
            gp = np.zeros_like(pd)
            gp[pos] = -(logs[pos] + 1.0) * g
            p._accumulate(gp)

        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class ParamCheck:
    """Per-parameter result of a finite-difference comparison."""

    name: str
    max_rel_err: float
    worst_index: int
    analytic: float
    numeric: float
    checked: int
    kinks: int


@dataclass
class GradCheckReport:
    """Outcome of ``finite_diff_check`` over a set of named parameters."""

    params: list[ParamCheck]
    max_rel_err: float
    worst_param: str
    step: float
    tolerance: float
    passed: bool
    kink_total: int = 0

    def format(self) -> str:
        lines = [f"{'parameter':<28} {'max rel err':>12} {'checked':>8} {'kinks':>6}"]
        for p in self.params:
            lines.append(f"{p.name:<28} {p.max_rel_err:>12.3e} {p.checked:>8d} {p.kinks:>6d}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(
            f"{verdict}: max relative error {self.max_rel_err:.3e} "
            f"(worst: {self.worst_param}, tolerance {self.tolerance:.1e}, step {self.step:.1e})"
        )
        if self.kink_total:
            lines.append(
                f"warning: {self.kink_total} coordinate(s) skipped as non-differentiable points"
            )
        return "\n".join(lines)


def _scalar_of(value) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    kink_tol: float = 0.1,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central finite differences.

    ``f`` rebuilds its graph from the current parameter values on every
    call. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
    denominator. Coordinates where forward and backward one-sided
    differences disagree badly are counted as suspected kinks and skipped
    instead of failed. Raises UsageError if two evaluations of ``f`` at the
    same point differ (non-deterministic function).
    """
    base = _scalar_of(f())
    if base != _scalar_of(f()):
        raise UsageError("finite_diff_check: f is not deterministic at the base point")

    with Tape() as tape:
        out = f()
        if not isinstance(out, Tensor):
            raise UsageError("finite_diff_check: f must return a Tensor for the analytic pass")
        tape.backward(out)
        analytic = {
            name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
            for name, t in params
        }
    tape.reset_grads([t for _, t in params])

    entries: list[ParamCheck] = []
    kink_total = 0
    for name, t in params:
        flat = t.data.reshape(-1)
        aflat = analytic[name].reshape(-1)
        worst = 0.0
        worst_i = 0
        worst_a = worst_n = 0.0
        kinks = 0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = _scalar_of(f())
            flat[i] = orig - step
            fm = _scalar_of(f())
            flat[i] = orig
            fwd = (fp - base) / step
            bwd = (base - fm) / step
            if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), 1.0):
                kinks += 1
                continue
            num = (fp - fm) / (2.0 * step)
            ana = aflat[i]
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            if rel > worst:
                worst, worst_i, worst_a, worst_n = rel, i, ana, num
        entries.append(
            ParamCheck(
                name=name,
                max_rel_err=worst,
                worst_index=worst_i,
                analytic=worst_a,
                numeric=worst_n,
                checked=flat.size - kinks,
                kinks=kinks,
            )
        )
        kink_total += kinks

    overall = max((e.max_rel_err for e in entries), default=0.0)
    worst_param = max(entries, key=lambda e: e.max_rel_err).name if entries else ""
    return GradCheckReport(
        params=entries,
        max_rel_err=overall,
        worst_param=worst_param,
        step=step,
        tolerance=tolerance,
        passed=overall < tolerance,
        kink_total=kink_total,
    )
