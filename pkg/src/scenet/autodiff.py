"""Reverse-mode differentiation over dense float64 arrays.

Every operation used by the training objective is implemented here as a
primitive with analytic partials: affine layers, the rectifier, Hadamard
products, softmax, Euclidean distance, the fused mask/weight composition,
concatenation and the reductions used by the penalties.  A recorded-graph
``Tensor`` carries the value forward and the partials backward; the
finite-difference verifier ``check_gradients`` is the ground truth every
analytic rule is tested against.

Conventions
-----------
* All values are ``numpy`` arrays of dtype float64; scalars are 0-d arrays.
* The rectifier derivative at exactly 0 is defined as 0, and so is the
  derivative of ``|x|`` at 0 and of the Euclidean distance at coincident
  points.  Gradient tests must keep inputs away from these kinks.
* Gradients accumulate: a tensor used twice receives both contributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, NumericError


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A node in the recorded computation graph."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad=False, parents=(), backward=None, name=None):
        self.value = _as_array(value)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from a scalar output through the recorded graph."""
        if self.value.ndim != 0:
            raise ContractError("backward() requires a scalar output")
        if not np.isfinite(self.value):
            raise NumericError("backward() called on a non-finite value")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.value))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Minimal arithmetic sugar used when combining loss terms.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(other, -1.0) if isinstance(other, Tensor) else -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}{tag})"


def constant(value) -> Tensor:
    return Tensor(value)


def parameter(value, name=None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = Tensor(a.value + float(b), parents=(a,))
        out._backward = lambda g: a.requires_grad and a._accumulate(g)
        return out
    if a.value.shape != b.value.shape:
        raise DimensionError(f"add: shapes {a.value.shape} and {b.value.shape} differ")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return Tensor(a.value + b.value, parents=(a, b), backward=backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.value * s, parents=(a,))
    out._backward = lambda g: a.requires_grad and a._accumulate(g * s)
    return out


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Entrywise product of two same-shape tensors."""
    if a.value.shape != b.value.shape:
        raise DimensionError(f"hadamard: shapes {a.value.shape} and {b.value.shape} differ")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.value)
        if b.requires_grad:
            b._accumulate(g * a.value)

    return Tensor(a.value * b.value, parents=(a, b), backward=backward)


_kink_trace = None


class KinkTrace:
    """Records how close rectifier/absolute-value/distance inputs come to
    their derivative kinks during any forward run inside the context.

    Finite differencing is unreliable within ``eps`` of a kink; callers
    that verify gradients on random inputs use this to redraw inputs that
    landed too close.
    """

    def __init__(self):
        self.min_margin = float("inf")

    def observe(self, values) -> None:
        v = np.asarray(values)
        if v.size:
            self.min_margin = min(self.min_margin, float(np.min(np.abs(v))))

    def __enter__(self) -> "KinkTrace":
        global _kink_trace
        self._outer = _kink_trace
        _kink_trace = self
        return self

    def __exit__(self, *exc):
        global _kink_trace
        _kink_trace = self._outer
        return False


def relu(x: Tensor) -> Tensor:
    if _kink_trace is not None:
        _kink_trace.observe(x.value)
    mask = x.value > 0

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return Tensor(np.where(mask, x.value, 0.0), parents=(x,), backward=backward)


def affine_forward(x: Tensor, w: Tensor, b: Tensor, activation: str = "none") -> Tensor:
    """Apply ``W x + b`` (or batched ``x W^T + b``) with an optional rectifier.

    ``x`` may be a single vector of length F or a batch of shape (B, F);
    ``w`` has shape (D, F) and ``b`` length D.
    """
    if activation not in ("none", "rectifier"):
        raise ContractError(f"unknown activation {activation!r}")
    wv, bv = w.value, b.value
    if wv.ndim != 2 or bv.ndim != 1 or wv.shape[0] != bv.shape[0]:
        raise DimensionError(f"affine: weight {wv.shape} and bias {bv.shape} do not conform")
    xv = x.value
    if xv.ndim == 1:
        if xv.shape[0] != wv.shape[1]:
            raise DimensionError(f"affine: input length {xv.shape[0]} != {wv.shape[1]}")
        value = wv @ xv + bv

        def backward(g):
            if x.requires_grad:
                x._accumulate(wv.T @ g)
            if w.requires_grad:
                w._accumulate(np.outer(g, xv))
            if b.requires_grad:
                b._accumulate(g)

    elif xv.ndim == 2:
        if xv.shape[1] != wv.shape[1]:
            raise DimensionError(f"affine: input width {xv.shape[1]} != {wv.shape[1]}")
        value = xv @ wv.T + bv

        def backward(g):
            if x.requires_grad:
                x._accumulate(g @ wv)
            if w.requires_grad:
                w._accumulate(g.T @ xv)
            if b.requires_grad:
                b._accumulate(g.sum(axis=0))

    else:
        raise DimensionError(f"affine: input must be 1-D or 2-D, got shape {xv.shape}")
    out = Tensor(value, parents=(x, w, b), backward=backward)
    if activation == "rectifier":
        out = relu(out)
    return out


def softmax(z: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, computed with max subtraction."""
    zv = z.value
    if zv.ndim == 0 or zv.shape[-1] == 0:
        raise DimensionError("softmax: input must have at least one entry")
    shifted = zv - zv.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if z.requires_grad:
            inner = (g * s).sum(axis=-1, keepdims=True)
            z._accumulate(s * (g - inner))

    return Tensor(s, parents=(z,), backward=backward)


def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance along the last axis.

    The derivative at coincident points (distance exactly 0) is taken as 0.
    """
    if a.value.shape != b.value.shape:
        raise DimensionError(
            f"euclidean_distance: shapes {a.value.shape} and {b.value.shape} differ"
        )
    diff = a.value - b.value
    d = np.sqrt((diff * diff).sum(axis=-1))
    if _kink_trace is not None:
        _kink_trace.observe(d)

    def backward(g):
        safe = np.where(d > 0, d, 1.0)
        factor = (g / safe) * (d > 0)
        contrib = factor[..., None] * diff
        if a.requires_grad:
            a._accumulate(contrib)
        if b.requires_grad:
            b._accumulate(-contrib)

    return Tensor(d, parents=(a, b), backward=backward)


def masked_compose(v: Tensor, masks: Tensor, w: Tensor) -> Tensor:
    """Weighted combination of masked embeddings, fused into one primitive.

    For a single item: ``out[d] = sum_j w[j] * masks[j, d] * v[d]``,
    i.e. the w-convex combination of the rows ``masks[j] * v``.  Batched
    form takes ``v`` of shape (B, D) and ``w`` of shape (B, M).
    """
    cv = masks.value
    if cv.ndim != 2:
        raise DimensionError(f"masked_compose: mask bank must be 2-D, got {cv.shape}")
    m, d = cv.shape
    vv, wv = v.value, w.value
    if vv.ndim == 1:
        if vv.shape[0] != d or wv.shape != (m,):
            raise DimensionError(
                f"masked_compose: item {vv.shape}, weights {wv.shape}, bank {cv.shape}"
            )
        eff = wv @ cv  # (D,) effective mask

        def backward(g):
            gv = g * vv
            if v.requires_grad:
                v._accumulate(g * eff)
            if masks.requires_grad:
                masks._accumulate(np.outer(wv, gv))
            if w.requires_grad:
                w._accumulate(cv @ gv)

    elif vv.ndim == 2:
        if vv.shape[1] != d or wv.ndim != 2 or wv.shape != (vv.shape[0], m):
            raise DimensionError(
                f"masked_compose: batch {vv.shape}, weights {wv.shape}, bank {cv.shape}"
            )
        eff = wv @ cv  # (B, D)

        def backward(g):
            gv = g * vv
            if v.requires_grad:
                v._accumulate(g * eff)
            if masks.requires_grad:
                masks._accumulate(wv.T @ gv)
            if w.requires_grad:
                w._accumulate(gv @ cv.T)

    else:
        raise DimensionError(f"masked_compose: item must be 1-D or 2-D, got {vv.shape}")
    return Tensor(eff * vv, parents=(v, masks, w), backward=backward)


def concat(parts, axis: int = -1) -> Tensor:
    """Concatenate tensors along the last (or first) axis."""
    parts = list(parts)
    if not parts:
        raise DimensionError("concat: need at least one tensor")
    if axis not in (-1, 0):
        raise ContractError("concat: only axis -1 or 0 is supported")
    widths = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = (Ellipsis, slice(lo, hi)) if axis == -1 else slice(lo, hi)
                p._accumulate(g[sl])

    return Tensor(
        np.concatenate([p.value for p in parts], axis=axis), parents=tuple(parts), backward=backward
    )


def absolute(x: Tensor) -> Tensor:
    if _kink_trace is not None:
        _kink_trace.observe(x.value)
    sign = np.sign(x.value)  # sign(0) == 0, matching the documented kink rule

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * sign)

    return Tensor(np.abs(x.value), parents=(x,), backward=backward)


def sum_lastaxis(x: Tensor) -> Tensor:
    def backward(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g[..., None], x.value.shape))

    return Tensor(x.value.sum(axis=-1), parents=(x,), backward=backward)


def mean(x: Tensor) -> Tensor:
    n = x.value.size
    if n == 0:
        raise DimensionError("mean: empty tensor")

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.value, float(g) / n))

    return Tensor(x.value.mean(), parents=(x,), backward=backward)


class ParamSet:
    """A named collection of trainable tensors with same-shape gradient slots."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = parameter(value, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def n_entries(self) -> int:
        return sum(t.value.size for t in self._params.values())

    def state(self) -> dict:
        return {name: t.value.copy() for name, t in self._params.items()}

    def load_state(self, state: dict) -> None:
        for name, t in self._params.items():
            if name not in state:
                raise ContractError(f"missing parameter {name!r} in state")
            arr = _as_array(state[name])
            if arr.shape != t.value.shape:
                raise DimensionError(
                    f"parameter {name!r}: expected shape {t.value.shape}, got {arr.shape}"
                )
            t.value = arr.copy()


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    worst_flat_index: int
    analytic: float
    numeric: float
    flagged: bool


@dataclass
class GradCheckReport:
    eps: float
    tol: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def failures(self) -> list[str]:
        return [e.name for e in self.entries if e.flagged]

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_text(self) -> str:
        lines = [f"# eps\t{self.eps!r}", f"# tol\t{self.tol!r}", "parameter\tmax_rel_error\tstatus"]
        for e in self.entries:
            status = "FAIL" if e.flagged else "ok"
            lines.append(f"{e.name}\t{e.max_rel_error!r}\t{status}")
        return "\n".join(lines) + "\n"


def check_gradients(loss_fn, params: ParamSet, eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must rebuild and return the scalar loss Tensor from the
    current parameter values each time it is called.  Per-entry error is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``, so near-zero
    entries are compared absolutely.  Entries above ``tol`` are flagged.
    """
    if eps <= 0:
        raise ContractError("check_gradients: eps must be positive")
    params.zero_grad()
    out = loss_fn()
    if not isinstance(out, Tensor) or out.value.ndim != 0:
        raise ContractError("loss_fn must return a scalar Tensor")
    if not np.isfinite(out.value):
        raise NumericError("loss is non-finite at the evaluation point")
    out.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.value))
        for name, t in params.items()
    }

    def value_at() -> float:
        v = float(loss_fn().value)
        if not np.isfinite(v):
            raise NumericError("loss became non-finite during finite differencing")
        return v

    report = GradCheckReport(eps=eps, tol=tol)
    for name, t in params.items():
        grad_flat = analytic[name].reshape(-1)
        worst = (0.0, 0, 0.0, 0.0)
        for i in range(t.value.size):
            idx = np.unravel_index(i, t.value.shape)
            orig = t.value[idx]
            t.value[idx] = orig + eps
            f_plus = value_at()
            t.value[idx] = orig - eps
            f_minus = value_at()
            t.value[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = grad_flat[i]
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if rel > worst[0]:
                worst = (rel, i, a, numeric)
        rel, idx, a, n = worst
        report.entries.append(
            GradCheckEntry(
                name=name,
                max_rel_error=rel,
                worst_flat_index=idx,
                analytic=a,
                numeric=n,
                flagged=rel > tol,
            )
        )
    return report
