"""Dense float64 arrays with a reverse-mode tape, plus AdamW and the LR schedule.

Values are plain ``numpy`` arrays. A 2-D array is a matrix; leading axes are
batch axes and every op broadcasts over them the way ``numpy.matmul`` does.
An op records itself on a :class:`Tape` whenever one of its inputs is a
:class:`Var`; with plain arrays in, a plain array comes out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

LAYER_NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


class Var:
    """A value produced on a tape."""

    __slots__ = ("value", "tape", "index", "parents", "backward_fn", "name")

    def __init__(self, value, tape, index, parents=(), backward_fn=None, name=None):
        self.value = value
        self.tape = tape
        self.index = index
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var#{self.index}{tag}{self.value.shape}"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


ArrayLike = Union[np.ndarray, Var, float]


class Tape:
    """Ordered record of primitive ops; rebuilt for every forward pass."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.parameter_ids: dict[str, int] = {}

    def __len__(self):
        return len(self.nodes)

    def parameter(self, name: str, value: np.ndarray) -> Var:
        if name in self.parameter_ids:
            raise ValueError(f"parameter {name!r} already on tape")
        var = self._record(np.asarray(value, dtype=np.float64), (), None, name=name)
        self.parameter_ids[name] = var.index
        return var

    def _record(self, value, parents, backward_fn, name=None) -> Var:
        var = Var(value, self, len(self.nodes), parents, backward_fn, name)
        self.nodes.append(var)
        return var

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradient of a scalar ``loss`` for every parameter on this tape.

        Parameters the loss does not depend on get an all-zero gradient.
        The tape itself is not modified.
        """
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ValueError("loss is not a node on this tape")
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads.pop(node.index, None)
            if g is None or node.backward_fn is None:
                if g is not None:
                    grads[node.index] = g  # leaf: keep
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not isinstance(parent, Var):
                    continue
                pg = _unbroadcast(pg, parent.value.shape)
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = pg
        out = {}
        for name, idx in self.parameter_ids.items():
            g = grads.get(idx)
            out[name] = np.zeros_like(self.nodes[idx].value) if g is None else g
        return out


def value_of(x: ArrayLike) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> Optional[Tape]:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("inputs live on different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _emit(value, parents, backward_fn):
    tape = _tape_of(*parents)
    if tape is None:
        return value
    return tape._record(value, parents, backward_fn)


# ---------------------------------------------------------------- primitives


def matmul(a: ArrayLike, b: ArrayLike):
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {av.shape} x {bv.shape}")

    def back(g):
        return (
            g @ np.swapaxes(bv, -1, -2) if isinstance(a, Var) else None,
            np.swapaxes(av, -1, -2) @ g if isinstance(b, Var) else None,
        )

    return _emit(av @ bv, (a, b), back)


def add(a: ArrayLike, b: ArrayLike):
    return _emit(value_of(a) + value_of(b), (a, b), lambda g: (g, g))


def sub(a: ArrayLike, b: ArrayLike):
    return _emit(value_of(a) - value_of(b), (a, b), lambda g: (g, -g))


def mul(a: ArrayLike, b: ArrayLike):
    av, bv = value_of(a), value_of(b)
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def transpose(x: ArrayLike, axes: Sequence[int]):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(value_of(x), axes), (x,), lambda g: (np.transpose(g, inverse),))


def swap_last(x: ArrayLike):
    return _emit(np.swapaxes(value_of(x), -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: ArrayLike, shape: Sequence[int]):
    xv = value_of(x)
    return _emit(xv.reshape(shape), (x,), lambda g: (g.reshape(xv.shape),))


def total(x: ArrayLike):
    """Sum of all entries, as a 0-d value."""
    xv = value_of(x)
    return _emit(np.asarray(xv.sum()), (x,), lambda g: (np.broadcast_to(g, xv.shape),))


def mean(x: ArrayLike, axis: int, keepdims: bool = False):
    xv = value_of(x)
    count = xv.shape[axis]

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, xv.shape),)

    return _emit(xv.mean(axis=axis, keepdims=keepdims), (x,), back)


def softmax_rows(m: ArrayLike):
    """Softmax along the last axis with per-row max subtraction."""
    mv = value_of(m)
    e = np.exp(mv - mv.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return _emit(y, (m,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def layer_norm(x: ArrayLike, gain: ArrayLike, bias: ArrayLike, eps: float = LAYER_NORM_EPS):
    xv, gv, bv = value_of(x), value_of(gain), value_of(bias)
    cols = xv.shape[-1]
    if gv.shape != (cols,) or bv.shape != (cols,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({cols},), got {gv.shape}, {bv.shape}")
    mu = xv.mean(axis=-1, keepdims=True)
    centered = xv - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def back(g):
        dxhat = g * gv
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, g * xhat, g

    return _emit(xhat * gv + bv, (x, gain, bias), back)


def gelu(x: ArrayLike):
    """Tanh-form GELU."""
    xv = value_of(x)
    x2 = xv * xv
    t = np.tanh(_GELU_C * xv * (1.0 + 0.044715 * x2))

    def back(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * d_inner),)

    return _emit(0.5 * xv * (1.0 + t), (x,), back)


def log_clipped(x: ArrayLike, floor: float = 1e-12):
    """Natural log of ``max(x, floor)``; no gradient where the floor is active."""
    xv = value_of(x)
    live = xv > floor
    safe = np.where(live, xv, 1.0)

    def back(g):
        return (np.where(live, g / safe, 0.0),)

    return _emit(np.log(np.maximum(xv, floor)), (x,), back)


# ----------------------------------------------------------------- checking


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a, b = np.asarray(a), np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


# ---------------------------------------------------------------- optimizer


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


@dataclass
class OptimizerState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    base_lr: float = 1e-4
    # per-row update counts for parameters updated with a row mask
    row_steps: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **kwargs) -> "OptimizerState":
        state = cls(**kwargs)
        state.first_moment = {k: np.zeros_like(v) for k, v in params.items()}
        state.second_moment = {k: np.zeros_like(v) for k, v in params.items()}
        return state


def adamw_step(
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    active_rows: Optional[Mapping[str, np.ndarray]] = None,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One AdamW update with decoupled weight decay, in place.

    ``theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)``

    ``active_rows`` maps a parameter name to a boolean mask over its first
    axis; inactive rows are left alone entirely (value, moments and their
    bias-correction count), as if that row had sat the step out.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    active_rows = active_rows or {}
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {theta.shape}")
        m = state.first_moment.setdefault(name, np.zeros_like(theta))
        v = state.second_moment.setdefault(name, np.zeros_like(theta))
        rows = active_rows.get(name)
        if rows is None and name not in state.row_steps:
            t = state.step_count
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if lr == 0.0:
                continue
            update = (m / (1.0 - b1**t)) / (np.sqrt(v / (1.0 - b2**t)) + state.epsilon)
            theta -= lr * (update + state.weight_decay * theta)
            continue
        counts = state.row_steps.setdefault(name, np.full(theta.shape[0], state.step_count - 1))
        rows = np.ones(theta.shape[0], dtype=bool) if rows is None else np.asarray(rows, dtype=bool)
        if not rows.any():
            continue
        counts[rows] += 1
        t = counts[rows].reshape((-1,) + (1,) * (theta.ndim - 1))
        m[rows] = b1 * m[rows] + (1.0 - b1) * g[rows]
        v[rows] = b2 * v[rows] + (1.0 - b2) * (g[rows] * g[rows])
        if lr == 0.0:
            continue
        update = (m[rows] / (1.0 - b1**t)) / (np.sqrt(v[rows] / (1.0 - b2**t)) + state.epsilon)
        theta[rows] -= lr * (update + state.weight_decay * theta[rows])
    return params, state


def lr_schedule(step: int, total_steps: int, warmup_frac: float, base_lr: float) -> float:
    """Linear warmup from 0, then cosine decay to exactly 0 at ``total_steps``."""
    if not 0 < warmup_frac < 1:
        raise ValueError("warmup_frac must be in (0, 1)")
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = warmup_frac * total_steps
    if step < warmup:
        return base_lr * step / warmup
    progress = (step - warmup) / (total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))

