"""Reverse-mode automatic differentiation over a recorded tape of array ops.

All recorded values are real float64 arrays.  Complex quantities are carried
as (re, im) pairs of real arrays (see ``CVar`` below), which keeps every loss
real and every gradient an ordinary real array; no Wirtinger calculus.

The primitive set: add / sub / mul / div (broadcasting), matmul, tensordot,
permute / reshape / concat / getitem / take, tanh / sin / cos / sqrt, sum,
l2norm, max_const, matrix inverse, cross.  Layer norm and the Cayley unitary
are composites of these.  SVD is deliberately not differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "CVar",
    "CapabilityError",
    "ContractViolation",
    "backward_grads",
    "forward_eval",
    "finite_diff_check",
    "FiniteDiffReport",
]


class CapabilityError(RuntimeError):
    """A graph builder asked for something the tape cannot record."""


class ContractViolation(ValueError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


def _asarray(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class _Node:
    __slots__ = ("value", "parents", "vjp", "requires_grad")

    def __init__(self, value, parents, vjp, requires_grad):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad


class Var:
    """Handle to one tape node."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self) -> tuple:
        return self.tape.nodes[self.idx].value.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.idx].requires_grad

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def _append(self, value, parents=(), vjp=None, requires_grad=False) -> Var:
        self.nodes.append(_Node(value, parents, vjp, requires_grad))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, requires_grad: bool = True) -> Var:
        return self._append(_asarray(value), requires_grad=requires_grad)

    def constant(self, value) -> Var:
        return self._append(_asarray(value))

    def wrap(self, x) -> Var:
        """Return ``x`` if it is already a Var on this tape, else a constant."""
        if isinstance(x, Var):
            if x.tape is not self:
                raise CapabilityError("mixing Vars from different tapes")
            return x
        return self.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise CapabilityError("at least one operand must be a Var")


def _binary(x, y, fwd, vjp_maker) -> Var:
    tape = _tape_of(x, y)
    x = tape.wrap(x)
    y = tape.wrap(y)
    xv, yv = x.value, y.value
    out = fwd(xv, yv)
    req = x.requires_grad or y.requires_grad
    vjp = vjp_maker(xv, yv, out) if req else None
    return tape._append(out, (x.idx, y.idx), vjp, req)


def add(x, y) -> Var:
    return _binary(
        x, y, np.add,
        lambda xv, yv, out: lambda g: (_unbroadcast(g, xv.shape), _unbroadcast(g, yv.shape)),
    )


def sub(x, y) -> Var:
    return _binary(
        x, y, np.subtract,
        lambda xv, yv, out: lambda g: (_unbroadcast(g, xv.shape), _unbroadcast(-g, yv.shape)),
    )


def mul(x, y) -> Var:
    return _binary(
        x, y, np.multiply,
        lambda xv, yv, out: lambda g: (_unbroadcast(g * yv, xv.shape), _unbroadcast(g * xv, yv.shape)),
    )


def div(x, y) -> Var:
    return _binary(
        x, y, np.divide,
        lambda xv, yv, out: lambda g: (
            _unbroadcast(g / yv, xv.shape),
            _unbroadcast(-g * xv / (yv * yv), yv.shape),
        ),
    )


def neg(x) -> Var:
    tape = _tape_of(x)
    x = tape.wrap(x)
    return tape._append(-x.value, (x.idx,), (lambda g: (-g,)), x.requires_grad)


def matmul(x, y) -> Var:
    """Batched matrix multiply with numpy broadcasting; both operands ndim >= 2."""

    def vjp_maker(xv, yv, out):
        def vjp(g):
            gx = _unbroadcast(g @ np.swapaxes(yv, -1, -2), xv.shape)
            gy = _unbroadcast(np.swapaxes(xv, -1, -2) @ g, yv.shape)
            return gx, gy

        return vjp

    tape = _tape_of(x, y)
    x, y = tape.wrap(x), tape.wrap(y)
    if x.value.ndim < 2 or y.value.ndim < 2:
        raise CapabilityError("matmul operands must have ndim >= 2")
    return _binary(x, y, np.matmul, vjp_maker)


def tensordot(x, y, axes: tuple[Sequence[int], Sequence[int]]) -> Var:
    """np.tensordot with explicit axis lists; result = free axes of x then of y."""
    tape = _tape_of(x, y)
    x, y = tape.wrap(x), tape.wrap(y)
    xv, yv = x.value, y.value
    ax_x = [a % xv.ndim for a in axes[0]]
    ax_y = [a % yv.ndim for a in axes[1]]
    out = np.tensordot(xv, yv, axes=(ax_x, ax_y))
    req = x.requires_grad or y.requires_grad
    vjp = None
    if req:
        free_x = [i for i in range(xv.ndim) if i not in ax_x]
        free_y = [j for j in range(yv.ndim) if j not in ax_y]
        sorted_ax_x = sorted(ax_x)
        sorted_ax_y = sorted(ax_y)

        def vjp(g):
            # grad wrt x: contract g's free-y block against y's free axes
            g_fy = list(range(len(free_x), len(free_x) + len(free_y)))
            raw = np.tensordot(g, yv, axes=(g_fy, free_y))
            src = [0] * xv.ndim
            for pos, i in enumerate(free_x):
                src[i] = pos
            for t, i in enumerate(ax_x):
                src[i] = len(free_x) + sorted_ax_y.index(ax_y[t])
            gx = raw.transpose(src)
            # grad wrt y: contract x's free axes against g's free-x block
            g_fx = list(range(len(free_x)))
            raw = np.tensordot(xv, g, axes=(free_x, g_fx))
            src = [0] * yv.ndim
            for pos, j in enumerate(free_y):
                src[j] = len(ax_y) + pos
            for t, j in enumerate(ax_y):
                src[j] = sorted_ax_x.index(ax_x[t])
            gy = raw.transpose(src)
            return gx, gy

    return tape._append(out, (x.idx, y.idx), vjp, req)


def permute(x, axes: Sequence[int]) -> Var:
    tape = _tape_of(x)
    x = tape.wrap(x)
    axes = [a % x.value.ndim for a in axes]
    inv = np.argsort(axes)
    return tape._append(
        x.value.transpose(axes), (x.idx,), (lambda g: (g.transpose(inv),)), x.requires_grad
    )


def reshape(x, shape) -> Var:
    tape = _tape_of(x)
    x = tape.wrap(x)
    old = x.value.shape
    return tape._append(
        x.value.reshape(shape), (x.idx,), (lambda g: (g.reshape(old),)), x.requires_grad
    )


def concat(xs: Sequence, axis: int = 0) -> Var:
    tape = _tape_of(*xs)
    xs = [tape.wrap(x) for x in xs]
    values = [x.value for x in xs]
    out = np.concatenate(values, axis=axis)
    req = any(x.requires_grad for x in xs)
    vjp = None
    if req:
        sizes = [v.shape[axis] for v in values]
        offsets = np.cumsum([0] + sizes)

        def vjp(g):
            sl = [slice(None)] * g.ndim
            grads = []
            for k in range(len(sizes)):
                sl[axis] = slice(offsets[k], offsets[k + 1])
                grads.append(g[tuple(sl)])
            return tuple(grads)

    return tape._append(out, tuple(x.idx for x in xs), vjp, req)


def getitem(x, key) -> Var:
    tape = _tape_of(x)
    x = tape.wrap(x)
    out = x.value[key]
    shape = x.value.shape

    def vjp(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return tape._append(np.ascontiguousarray(out), (x.idx,), vjp, x.requires_grad)


def take(x, indices, axis: int) -> Var:
    tape = _tape_of(x)
    x = tape.wrap(x)
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(x.value, indices, axis=axis)
    shape = x.value.shape

    def vjp(g):
        full = np.zeros(shape)
        view = np.moveaxis(full, axis, 0)
        np.add.at(view, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return tape._append(out, (x.idx,), vjp, x.requires_grad)


def _unary(x, fwd, vjp_from_value) -> Var:
    tape = _tape_of(x)
    x = tape.wrap(x)
    out = fwd(x.value)
    vjp = vjp_from_value(x.value, out) if x.requires_grad else None
    return tape._append(out, (x.idx,), vjp, x.requires_grad)


def tanh(x) -> Var:
    return _unary(x, np.tanh, lambda xv, out: lambda g: (g * (1.0 - out * out),))


def sin(x) -> Var:
    return _unary(x, np.sin, lambda xv, out: lambda g: (g * np.cos(xv),))


def cos(x) -> Var:
    return _unary(x, np.cos, lambda xv, out: lambda g: (-g * np.sin(xv),))


def sqrt(x) -> Var:
    """Square root; caller must keep inputs bounded away from zero."""
    return _unary(x, np.sqrt, lambda xv, out: lambda g: (g * 0.5 / out,))


def sum_(x, axes=None, keepdims: bool = False) -> Var:
    tape = _tape_of(x)
    x = tape.wrap(x)
    xv = x.value
    axes_t = tuple(range(xv.ndim)) if axes is None else tuple(a % xv.ndim for a in np.atleast_1d(axes))
    out = xv.sum(axis=axes_t, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            shape = list(xv.shape)
            for a in axes_t:
                shape[a] = 1
            g = g.reshape(shape)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return tape._append(np.asarray(out), (x.idx,), vjp if x.requires_grad else None, x.requires_grad)


def l2norm(x, axes=None, keepdims: bool = False) -> Var:
    """Euclidean norm over ``axes``; gradient is exactly zero at the origin."""
    tape = _tape_of(x)
    x = tape.wrap(x)
    xv = x.value
    axes_t = tuple(range(xv.ndim)) if axes is None else tuple(a % xv.ndim for a in np.atleast_1d(axes))
    out = np.sqrt((xv * xv).sum(axis=axes_t, keepdims=keepdims))

    def vjp(g):
        shape = list(xv.shape)
        for a in axes_t:
            shape[a] = 1
        gk, yk = g.reshape(shape), out.reshape(shape)
        return (gk * xv / np.maximum(yk, 1e-300),)

    return tape._append(np.asarray(out), (x.idx,), vjp if x.requires_grad else None, x.requires_grad)


def max_const(x, c: float) -> Var:
    """Elementwise max(x, c); gradient passes where x >= c."""

    def vjp_from_value(xv, out):
        mask = (xv >= c).astype(np.float64)
        return lambda g: (g * mask,)

    return _unary(x, lambda xv: np.maximum(xv, c), vjp_from_value)


def inv(x) -> Var:
    """Inverse of a single square matrix."""

    def vjp_from_value(xv, out):
        def vjp(g):
            return (-out.T @ g @ out.T,)

        return vjp

    return _unary(x, np.linalg.inv, vjp_from_value)


def cross(x, y) -> Var:
    """Cross product along the last axis (length 3)."""

    def vjp_maker(xv, yv, out):
        def vjp(g):
            return (
                _unbroadcast(np.cross(yv, g), xv.shape),
                _unbroadcast(np.cross(g, xv), yv.shape),
            )

        return vjp

    return _binary(x, y, np.cross, vjp_maker)


def mean_(x, axes=None, keepdims: bool = False) -> Var:
    tape = _tape_of(x)
    x = tape.wrap(x)
    xv = x.value
    axes_t = tuple(range(xv.ndim)) if axes is None else tuple(a % xv.ndim for a in np.atleast_1d(axes))
    n = float(np.prod([xv.shape[a] for a in axes_t]))
    return mul(sum_(x, axes=axes_t, keepdims=keepdims), 1.0 / n)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Var:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = mean_(x, axes=(-1,), keepdims=True)
    xc = sub(x, mu)
    var = mean_(mul(xc, xc), axes=(-1,), keepdims=True)
    xn = div(xc, sqrt(add(var, eps)))
    return add(mul(xn, gamma), beta)


# ---------------------------------------------------------------------------
# complex pairs
# ---------------------------------------------------------------------------


class CVar(NamedTuple):
    """A complex array as a (re, im) pair of real Vars."""

    re: Var
    im: Var

    @property
    def value(self) -> np.ndarray:
        return self.re.value + 1j * self.im.value


def cwrap(tape: Tape, z: np.ndarray) -> CVar:
    z = np.asarray(z, dtype=np.complex128)
    return CVar(tape.constant(z.real.copy()), tape.constant(z.imag.copy()))


def cadd(a: CVar, b: CVar) -> CVar:
    return CVar(add(a.re, b.re), add(a.im, b.im))


def csub(a: CVar, b: CVar) -> CVar:
    return CVar(sub(a.re, b.re), sub(a.im, b.im))


def cconj(a: CVar) -> CVar:
    return CVar(a.re, neg(a.im))


def cmul(a: CVar, b: CVar) -> CVar:
    return CVar(
        sub(mul(a.re, b.re), mul(a.im, b.im)),
        add(mul(a.re, b.im), mul(a.im, b.re)),
    )


def ctensordot(a: CVar, b: CVar, axes) -> CVar:
    return CVar(
        sub(tensordot(a.re, b.re, axes), tensordot(a.im, b.im, axes)),
        add(tensordot(a.re, b.im, axes), tensordot(a.im, b.re, axes)),
    )


def cmatmul(a: CVar, b: CVar) -> CVar:
    return CVar(
        sub(matmul(a.re, b.re), matmul(a.im, b.im)),
        add(matmul(a.re, b.im), matmul(a.im, b.re)),
    )


def cnorm(a: CVar, axes=None, keepdims: bool = False) -> Var:
    """Euclidean norm of a complex array (a real Var)."""
    mag2 = add(mul(a.re, a.re), mul(a.im, a.im))
    return l2norm(_sqrt_stack(mag2), axes=axes, keepdims=keepdims)


def _sqrt_stack(mag2: Var) -> Var:
    # l2norm computes sqrt(sum(x^2)); feeding sqrt(mag2) keeps its safe
    # zero-gradient behaviour for complex norms without a second primitive.
    return _unary(mag2, np.sqrt, lambda xv, out: lambda g: (g * 0.5 / np.maximum(out, 1e-300),))


def cayley_unitary(raw_antisym: Var, raw_sym: Var) -> CVar:
    """Differentiable Cayley unitary U = (I - A)(I + A)^{-1}.

    A = X + iY with X the strict-lower-triangle antisymmetrization of
    ``raw_antisym`` and Y the symmetrization of ``raw_sym``; matches
    tensor.materialize_unitary.
    """
    chi = raw_antisym.shape[0]
    lower = np.tril(np.ones((chi, chi)), -1)
    p_low = mul(raw_antisym, lower)
    x = sub(p_low, permute(p_low, (1, 0)))
    y = mul(add(raw_sym, permute(raw_sym, (1, 0))), 0.5)
    eye = np.eye(chi)
    ix = add(x, eye)  # I + X
    # complex inverse of (I + A) via the real 2chi x 2chi block embedding
    top = concat([ix, neg(y)], axis=1)
    bottom = concat([y, ix], axis=1)
    block_inv = inv(concat([top, bottom], axis=0))
    r = block_inv[:chi, :chi]
    s = block_inv[chi:, :chi]
    left = CVar(sub(_const_like(raw_antisym, eye), x), neg(y))  # I - A
    return cmatmul(left, CVar(r, s))


def _const_like(ref: Var, value) -> Var:
    return ref.tape.constant(value)


# ---------------------------------------------------------------------------
# backward pass and checks
# ---------------------------------------------------------------------------


class Gradients:
    """Gradient buffers keyed by tape node index."""

    def __init__(self, buffers: dict):
        self._buffers = buffers

    def of(self, var: Var) -> np.ndarray:
        g = self._buffers.get(var.idx)
        if g is None:
            return np.zeros_like(var.value)
        return g


def backward_grads(tape: Tape, output: Var) -> Gradients:
    """Accumulate d(output)/d(node) for every grad-requiring node.

    ``output`` must be rank-0 (a real loss).  Accumulation order is fixed by
    node index, so repeated calls are bitwise identical.
    """
    node = tape.nodes[output.idx]
    if node.value.shape != ():
        raise ContractViolation(f"backward requires a rank-0 output, got shape {node.value.shape}")
    buffers: dict[int, np.ndarray] = {output.idx: np.ones(())}
    for idx in range(output.idx, -1, -1):
        g = buffers.get(idx)
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.vjp is None or not node.requires_grad:
            continue
        parent_grads = node.vjp(g)
        for pidx, pg in zip(node.parents, parent_grads):
            if pg is None or not tape.nodes[pidx].requires_grad:
                continue
            acc = buffers.get(pidx)
            buffers[pidx] = pg if acc is None else acc + pg
    return Gradients(buffers)


def forward_eval(builder: Callable[[Tape], Var]) -> tuple[Tape, Var]:
    """Run a graph builder on a fresh tape and return (tape, output Var)."""
    tape = Tape()
    out = builder(tape)
    if not isinstance(out, Var) or out.tape is not tape:
        raise CapabilityError("builder must return a Var recorded on the provided tape")
    return tape, out


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    per_param: dict = field(default_factory=dict)
    tol: float = 0.0
    passed: bool = False
    n_coords: int = 0

    def __str__(self):
        lines = [f"finite-diff check: max rel err {self.max_rel_err:.3e} "
                 f"({'pass' if self.passed else 'FAIL'} at tol {self.tol:.1e}, {self.n_coords} coords)"]
        for name, err in sorted(self.per_param.items()):
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def finite_diff_check(
    loss_fn: Callable[[dict], Var],
    params: dict,
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords_per_param: int | None = None,
    seed: int = 0,
) -> FiniteDiffReport:
    """Compare autodiff gradients against central finite differences.

    ``loss_fn`` receives a dict of Vars (one per entry of ``params``, wired to
    a shared fresh tape) and must return a scalar Var.  Relative error per
    coordinate is |ad - fd| / max(|ad|, |fd|, 1e-6).
    """
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def run(p) -> tuple[Tape, Var, dict]:
        tape = Tape()
        pvars = {k: tape.leaf(v, requires_grad=True) for k, v in p.items()}
        return tape, loss_fn(pvars), pvars

    tape, out, pvars = run(params)
    grads = backward_grads(tape, out)
    rng = np.random.default_rng(seed)
    per_param = {}
    n_total = 0
    worst = 0.0
    for name in sorted(params):
        base = params[name]
        ad = grads.of(pvars[name]).reshape(-1)
        n = base.size
        coords = np.arange(n)
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        worst_here = 0.0
        flat = base.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            _, up, _ = run(params)
            flat[c] = orig - eps
            _, down, _ = run(params)
            flat[c] = orig
            fd = (float(up.value) - float(down.value)) / (2.0 * eps)
            rel = abs(ad[c] - fd) / max(abs(ad[c]), abs(fd), 1e-6)
            worst_here = max(worst_here, rel)
        per_param[name] = worst_here
        worst = max(worst, worst_here)
        n_total += len(coords)
    return FiniteDiffReport(
        max_rel_err=worst, per_param=per_param, tol=tol, passed=worst <= tol, n_coords=n_total
    )
