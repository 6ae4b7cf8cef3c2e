"""Reverse-mode differentiation on an explicit, append-only tape.

Every primitive is registered in ``RULES`` with a forward (numpy) function and
a backward rule.  Backward rules are written in terms of the same primitives,
so running ``backward(..., create_graph=True)`` records the gradient
computation onto the tape and a second ``backward`` differentiates through it.
That is how forces (a first derivative) can appear inside a training loss.

Typical use::

    with Tape() as tape:
        x = tape.leaf(np.array([1.0, 2.0]), name="x")
        y = (x * x).sum()
    grads = backward(tape, y)
    grads[x]  # -> array([2., 4.])
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "central_difference",
    "Tensor",
    "Tape",
    "GradientSet",
    "UnsupportedOpError",
    "ContractError",
    "RULES",
    "record",
    "backward",
    "grad",
    "grad_check",
    "GradCheckReport",
    "override_rule",
]


class UnsupportedOpError(LookupError):
    """Raised when an op kind has no registered backward rule."""


class ContractError(ValueError):
    """Raised when a differentiation contract is violated (e.g. non-scalar output)."""


_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A numpy array plus the flag that tells the tape to track it."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: int):
        return power(self, p)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    attrs: dict


@dataclass
class Tape:
    """Append-only record of op applications; nodes are in topological order."""

    nodes: list[Node] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)
    recording: bool = True

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def leaf(self, data, name: str | None = None) -> Tensor:
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.leaves.append(t)
        return t

    def watch(self, t: Tensor) -> Tensor:
        t.requires_grad = True
        self.leaves.append(t)
        return t

    @contextlib.contextmanager
    def paused(self):
        prev, self.recording = self.recording, False
        try:
            yield
        finally:
            self.recording = prev


@contextlib.contextmanager
def no_record():
    """Evaluate ops without recording them on the active tape."""
    tape = current_tape()
    if tape is None:
        yield
        return
    with tape.paused():
        yield


@dataclass(frozen=True)
class Rule:
    forward: Callable
    backward: Callable


RULES: dict[str, Rule] = {}


def register(name: str, forward: Callable, backward: Callable) -> None:
    RULES[name] = Rule(forward, backward)


@contextlib.contextmanager
def override_rule(name: str, backward: Callable):
    """Temporarily swap in a different backward rule (used for negative controls)."""
    old = RULES[name]
    RULES[name] = Rule(old.forward, backward)
    try:
        yield
    finally:
        RULES[name] = old


def record(op: str, *inputs, **attrs) -> Tensor:
    """Apply registered op ``op`` and append it to the active tape when needed."""
    rule = RULES.get(op)
    if rule is None:
        raise UnsupportedOpError(f"no backward rule registered for op {op!r}")
    ins = tuple(as_tensor(x) for x in inputs)
    data = rule.forward(*(t.data for t in ins), **attrs)
    tape = current_tape()
    if tape is not None and tape.recording and any(t.requires_grad for t in ins):
        out = Tensor(data, requires_grad=True)
        tape.nodes.append(Node(op, ins, out, attrs))
        return out
    return Tensor(data)


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast_axes(shape_from: tuple, shape_to: tuple) -> tuple[tuple, tuple]:
    lead = len(shape_from) - len(shape_to)
    axes = list(range(lead))
    for i, n in enumerate(shape_to):
        if n == 1 and shape_from[lead + i] != 1:
            axes.append(lead + i)
    return tuple(axes), shape_to


def _sum_to_fwd(x, shape):
    shape = tuple(shape)
    if x.shape == shape:
        return x
    axes, _ = _unbroadcast_axes(x.shape, shape)
    return np.sum(x, axis=axes).reshape(shape)


def sum_to(x, shape) -> Tensor:
    x = as_tensor(x)
    if x.shape == tuple(shape):
        return x
    return record("sum_to", x, shape=tuple(shape))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    if x.shape == tuple(shape):
        return x
    return record("broadcast_to", x, shape=tuple(shape))


register(
    "sum_to",
    _sum_to_fwd,
    lambda g, ins, out, needs, shape: (broadcast_to(g, ins[0].shape),),
)
register(
    "broadcast_to",
    lambda x, shape: np.broadcast_to(x, shape).copy(),
    lambda g, ins, out, needs, shape: (sum_to(g, ins[0].shape),),
)


def add(a, b) -> Tensor:
    return record("add", a, b)


def sub(a, b) -> Tensor:
    return record("sub", a, b)


def mul(a, b) -> Tensor:
    return record("mul", a, b)


def div(a, b) -> Tensor:
    return record("div", a, b)


def neg(a) -> Tensor:
    return record("neg", a)


register(
    "add",
    np.add,
    lambda g, ins, out, needs: (
        sum_to(g, ins[0].shape) if needs[0] else None,
        sum_to(g, ins[1].shape) if needs[1] else None,
    ),
)
register(
    "sub",
    np.subtract,
    lambda g, ins, out, needs: (
        sum_to(g, ins[0].shape) if needs[0] else None,
        sum_to(neg(g), ins[1].shape) if needs[1] else None,
    ),
)
register(
    "mul",
    np.multiply,
    lambda g, ins, out, needs: (
        sum_to(mul(g, ins[1]), ins[0].shape) if needs[0] else None,
        sum_to(mul(g, ins[0]), ins[1].shape) if needs[1] else None,
    ),
)
register(
    "div",
    np.divide,
    lambda g, ins, out, needs: (
        sum_to(div(g, ins[1]), ins[0].shape) if needs[0] else None,
        sum_to(neg(div(mul(g, out), ins[1])), ins[1].shape) if needs[1] else None,
    ),
)
register("neg", np.negative, lambda g, ins, out, needs: (neg(g),))


def exp(x) -> Tensor:
    return record("exp", x)


def log(x) -> Tensor:
    return record("log", x)


def sqrt(x) -> Tensor:
    return record("sqrt", x)


def sin(x) -> Tensor:
    return record("sin", x)


def cos(x) -> Tensor:
    return record("cos", x)


def sigmoid(x) -> Tensor:
    return record("sigmoid", x)


def silu(x) -> Tensor:
    return record("silu", x)


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    return record("leaky_relu", x, slope=float(slope))


def abs_(x) -> Tensor:
    return record("abs", x)


def power(x, p: int) -> Tensor:
    if int(p) != p:
        raise ValueError("power only supports integer exponents")
    return record("power", x, p=int(p))


def clip_min(x, lo: float) -> Tensor:
    return record("clip_min", x, lo=float(lo))


def _sigmoid_np(x):
    return np.exp(-np.logaddexp(0.0, -x))


register("exp", np.exp, lambda g, ins, out, needs: (mul(g, out),))
register("log", np.log, lambda g, ins, out, needs: (div(g, ins[0]),))
register("sqrt", np.sqrt, lambda g, ins, out, needs: (div(mul(g, 0.5), out),))
register("sin", np.sin, lambda g, ins, out, needs: (mul(g, cos(ins[0])),))
register("cos", np.cos, lambda g, ins, out, needs: (neg(mul(g, sin(ins[0]))),))
register(
    "sigmoid",
    _sigmoid_np,
    lambda g, ins, out, needs: (mul(g, mul(out, sub(1.0, out))),),
)


def _silu_bwd(g, ins, out, needs):
    x = ins[0]
    s = sigmoid(x)
    return (mul(g, add(s, mul(mul(x, s), sub(1.0, s)))),)


register("silu", lambda x: x * _sigmoid_np(x), _silu_bwd)
register(
    "leaky_relu",
    lambda x, slope: np.where(x > 0, x, slope * x),
    lambda g, ins, out, needs, slope: (mul(g, np.where(ins[0].data > 0, 1.0, slope)),),
)
register("abs", np.abs, lambda g, ins, out, needs: (mul(g, np.sign(ins[0].data)),))
register(
    "power",
    lambda x, p: x**p,
    lambda g, ins, out, needs, p: (
        mul(g, mul(float(p), power(ins[0], p - 1))) if p != 1 else g,
    ),
)
register(
    "clip_min",
    lambda x, lo: np.maximum(x, lo),
    lambda g, ins, out, needs, lo: (mul(g, (ins[0].data > lo).astype(np.float64)),),
)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    if isinstance(axis, int):
        axis = (axis,)
    return record("sum", x, axis=None if axis is None else tuple(axis), keepdims=keepdims)


def _sum_bwd(g, ins, out, needs, axis, keepdims):
    shape = ins[0].shape
    if axis is None:
        kshape = (1,) * len(shape)
    else:
        axes = {a % len(shape) for a in axis}
        kshape = tuple(1 if i in axes else n for i, n in enumerate(shape))
    return (broadcast_to(reshape(g, kshape), shape),)


register(
    "sum",
    lambda x, axis, keepdims: np.sum(x, axis=axis, keepdims=keepdims),
    _sum_bwd,
)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return record("reshape", x, shape=shape)


register(
    "reshape",
    lambda x, shape: np.reshape(x, shape),
    lambda g, ins, out, needs, shape: (reshape(g, ins[0].shape),),
)


def transpose(x, axes) -> Tensor:
    return record("transpose", x, axes=tuple(axes))


register(
    "transpose",
    lambda x, axes: np.transpose(x, axes),
    lambda g, ins, out, needs, axes: (transpose(g, tuple(np.argsort(axes))),),
)


def _parse_einsum(spec: str) -> tuple[list[str], str]:
    if "->" not in spec or "." in spec:
        raise ValueError(f"einsum spec must be explicit without ellipsis: {spec!r}")
    lhs, out = spec.replace(" ", "").split("->")
    subs = lhs.split(",")
    for s in subs:
        if len(set(s)) != len(s):
            raise ValueError(f"repeated index inside one operand is unsupported: {spec!r}")
    return subs, out


def einsum(spec: str, *operands) -> Tensor:
    return record("einsum", *operands, spec=spec)


def _einsum_bwd(g, ins, out, needs, spec):
    subs, out_sub = _parse_einsum(spec)
    grads = []
    for k, sk in enumerate(subs):
        if not needs[k]:
            grads.append(None)
            continue
        others = [ins[j] for j in range(len(ins)) if j != k]
        other_subs = [subs[j] for j in range(len(ins)) if j != k]
        available = out_sub + "".join(other_subs)
        target = "".join(c for c in sk if c in available)
        gk = einsum(",".join([out_sub, *other_subs]) + "->" + target, g, *others)
        if target != sk:
            kshape = tuple(n if c in target else 1 for c, n in zip(sk, ins[k].shape))
            gk = broadcast_to(reshape(gk, kshape), ins[k].shape)
        grads.append(gk)
    return tuple(grads)


register(
    "einsum",
    lambda *xs, spec: np.einsum(spec, *xs, optimize=len(xs) > 1),
    _einsum_bwd,
)


def take(x, idx, axis: int = 0) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    return record("take", x, idx=idx, axis=axis)


def segment_sum(x, idx, n: int, axis: int = 0) -> Tensor:
    """Sum slices of ``x`` along ``axis`` into ``n`` buckets given by ``idx``."""
    idx = np.asarray(idx, dtype=np.intp)
    return record("segment_sum", x, idx=idx, n=int(n), axis=axis)


def _segment_sum_fwd(x, idx, n, axis):
    xm = np.moveaxis(x, axis, 0)
    out = np.zeros((n,) + xm.shape[1:])
    if idx.size:
        np.add.at(out, idx, xm)
    return np.moveaxis(out, 0, axis)


register(
    "take",
    lambda x, idx, axis: np.take(x, idx, axis=axis),
    lambda g, ins, out, needs, idx, axis: (segment_sum(g, idx, ins[0].shape[axis], axis),),
)
register(
    "segment_sum",
    _segment_sum_fwd,
    lambda g, ins, out, needs, idx, n, axis: (take(g, idx, axis),),
)


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    if len(xs) == 1:
        return as_tensor(xs[0])
    return record("concat", *xs, axis=axis)


def slice_axis(x, start: int, stop: int, axis: int) -> Tensor:
    return record("slice", x, start=int(start), stop=int(stop), axis=axis)


def pad_axis(x, before: int, after: int, axis: int) -> Tensor:
    return record("pad", x, before=int(before), after=int(after), axis=axis)


def _concat_bwd(g, ins, out, needs, axis):
    grads, start = [], 0
    for t, need in zip(ins, needs):
        stop = start + t.shape[axis]
        grads.append(slice_axis(g, start, stop, axis) if need else None)
        start = stop
    return tuple(grads)


def _slice_fwd(x, start, stop, axis):
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    return x[tuple(sl)]


def _pad_fwd(x, before, after, axis):
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    return np.pad(x, widths)


register("concat", lambda *xs, axis: np.concatenate(xs, axis=axis), _concat_bwd)
register(
    "slice",
    _slice_fwd,
    lambda g, ins, out, needs, start, stop, axis: (
        pad_axis(g, start, ins[0].shape[axis] - stop, axis),
    ),
)
register(
    "pad",
    _pad_fwd,
    lambda g, ins, out, needs, before, after, axis: (
        slice_axis(g, before, before + ins[0].shape[axis], axis),
    ),
)


# ---------------------------------------------------------------------------
# backward


class GradientSet:
    """Gradients keyed by leaf tensor; a missing leaf reads as zeros."""

    def __init__(self, grads: dict[int, tuple[Tensor, Tensor]] | None = None):
        self._grads = dict(grads or {})

    def __contains__(self, leaf: Tensor) -> bool:
        return id(leaf) in self._grads

    def __getitem__(self, leaf: Tensor) -> np.ndarray:
        return self.tensor(leaf).data

    def tensor(self, leaf: Tensor) -> Tensor:
        hit = self._grads.get(id(leaf))
        if hit is None:
            return Tensor(np.zeros(leaf.shape))
        return hit[1]

    def leaves(self) -> list[Tensor]:
        return [leaf for leaf, _ in self._grads.values()]

    def __len__(self) -> int:
        return len(self._grads)

    def __add__(self, other: "GradientSet") -> "GradientSet":
        merged = dict(self._grads)
        for key, (leaf, g) in other._grads.items():
            if key in merged:
                merged[key] = (leaf, Tensor(merged[key][1].data + g.data))
            else:
                merged[key] = (leaf, g)
        return GradientSet(merged)


def backward(
    tape: Tape,
    output: Tensor,
    create_graph: bool = False,
    wrt: Sequence[Tensor] | None = None,
) -> GradientSet:
    """Reverse sweep from scalar ``output`` over ``tape``.

    With ``create_graph`` the gradient computation is itself recorded, so the
    returned gradient tensors can be differentiated again.  ``wrt`` restricts
    the sweep to nodes that depend on the given leaves.
    """
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    produced = {id(n.out) for n in tape.nodes}
    relevant: set[int] | None = None
    if wrt is not None:
        relevant = {id(t) for t in wrt}
        for node in tape.nodes:
            if any(id(t) in relevant for t in node.inputs):
                relevant.add(id(node.out))
    grads: dict[int, Tensor] = {id(output): Tensor(np.ones_like(output.data))}
    holders: dict[int, Tensor] = {id(output): output}
    stop = len(tape.nodes)
    ctx = contextlib.nullcontext() if create_graph else tape.paused()
    with ctx, _activate(tape):
        for node in reversed(tape.nodes[:stop]):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            if relevant is None:
                needs = tuple(t.requires_grad for t in node.inputs)
            else:
                needs = tuple(id(t) in relevant for t in node.inputs)
                if not any(needs):
                    continue
            rule = RULES.get(node.op)
            if rule is None:
                raise UnsupportedOpError(node.op)
            in_grads = rule.backward(g, node.inputs, node.out, needs, **node.attrs)
            for t, gi, need in zip(node.inputs, in_grads, needs):
                if gi is None or not need:
                    continue
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else add(prev, gi)
                holders[key] = t
    keep = None if wrt is None else {id(t) for t in wrt}
    return GradientSet(
        {
            k: (holders[k], g)
            for k, g in grads.items()
            if k not in produced and (keep is None or k in keep)
        }
    )


@contextlib.contextmanager
def _activate(tape: Tape):
    stack = _tape_stack()
    if stack and stack[-1] is tape:
        yield
        return
    stack.append(tape)
    try:
        yield
    finally:
        stack.remove(tape)


def grad(fn: Callable[..., Tensor], leaves: Sequence[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    """Value and gradients of scalar ``fn(*tensors)`` at the given arrays."""
    with Tape() as tape:
        ts = [tape.leaf(x) for x in leaves]
        y = fn(*ts)
    gs = backward(tape, y)
    return y.item(), [gs[t] for t in ts]


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if not e <= self.tol]

    def lines(self) -> list[str]:
        return [
            f"{name}\t{err:.3e}\t{'pass' if err <= self.tol else 'FAIL'}"
            for name, err in self.errors.items()
        ]


def central_difference(value_at: Callable[[float], float], h: float, analytic: float | None = None,
                       tol: float = 1e-4, floor: float = 1e-6, kink_retry: bool = False) -> float:
    """``(f(h) - f(-h)) / 2h`` for ``f = value_at``, a function of the offset.

    With ``kink_retry`` and a disagreeing ``analytic`` value the difference is
    repeated at ``h / 10``; the smaller stencil replaces the first only if the
    two finite differences disagree with each other (a kink such as LeakyReLU
    at 0 inside the wider stencil).  A wrong derivative still fails: both
    stencils agree with each other and not with ``analytic``.
    """
    d = (value_at(h) - value_at(-h)) / (2 * h)
    if kink_retry and analytic is not None:
        scale = max(abs(d), abs(analytic), floor)
        if abs(d - analytic) > tol * scale:
            small = h / 10
            d_small = (value_at(small) - value_at(-small)) / (2 * small)
            if abs(d_small - d) > tol * scale:
                return d_small
    return d


def grad_check(
    fn: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    h: float = 1e-4,
    tol: float = 1e-4,
    max_entries: int | None = None,
    directions: int = 0,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
    kink_retry: bool = False,
) -> GradCheckReport:
    """Compare tape gradients of ``fn`` with central differences.

    ``fn`` takes no arguments and reads the current values of ``leaves``.  Per
    leaf the error is ``max|g_tape - g_fd| / max(max|g_fd|, max|g_tape|, floor)``
    over the checked entries.  ``max_entries`` subsamples coordinates of large
    leaves; ``directions`` adds random directional-derivative probes.

    ``kink_retry`` is passed to :func:`central_difference` for every probe.
    """
    rng = rng or np.random.default_rng(0)
    for leaf in leaves:
        leaf.requires_grad = True
    with Tape() as tape:
        y = fn()
    analytic = backward(tape, y)

    def value() -> float:
        with no_record():
            return float(fn().data.reshape(-1)[0])

    def probe(set_offset, analytic_value: float) -> float:
        def at(step: float) -> float:
            set_offset(step)
            try:
                return value()
            finally:
                set_offset(0.0)

        return central_difference(at, h, analytic_value, tol, floor, kink_retry)

    errors: dict[str, float] = {}
    for n, leaf in enumerate(leaves):
        name = leaf.name or f"leaf{n}"
        g = analytic[leaf]
        flat = leaf.data.reshape(-1)
        count = flat.size
        if max_entries is not None and count > max_entries:
            picks = np.sort(rng.choice(count, size=max_entries, replace=False))
        else:
            picks = np.arange(count)
        ad, fd = [], []
        for k in picks:
            orig = flat[k]

            def shift(step, k=k, orig=orig):
                flat[k] = orig + step

            ad.append(float(g.reshape(-1)[k]))
            fd.append(probe(shift, ad[-1]))
        base = leaf.data.copy()
        for _ in range(directions):
            v = rng.standard_normal(leaf.shape)

            def shift(step, v=v):
                leaf.data[...] = base + step * v

            ad.append(float(np.sum(g * v)))
            fd.append(probe(shift, ad[-1]))
        ad_arr, fd_arr = np.asarray(ad), np.asarray(fd)
        if ad_arr.size == 0:
            errors[name] = 0.0
            continue
        scale = max(np.max(np.abs(fd_arr)), np.max(np.abs(ad_arr)), floor)
        errors[name] = float(np.max(np.abs(ad_arr - fd_arr)) / scale)
    return GradCheckReport(errors, tol)


def leaves_of(params: Iterable[Tensor]) -> list[Tensor]:
    return [p for p in params if p.requires_grad]
