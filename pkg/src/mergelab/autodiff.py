"""Reverse-mode differentiation over a fixed op vocabulary, plus optimizers.

The graph is built implicitly as ops are applied to :class:`Var` nodes
(define-by-run). The op set is intentionally small: linear algebra, ReLU,
row-wise L2 normalization, masked blending for trigger injection, and the
two softmax-based losses. That is enough to differentiate every loss in the
lab with respect to weights and with respect to input pixels.

A graph is single-owner during forward/backward; distinct graphs may run
concurrently.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .numerics import ParamSet


class Var:
    """Node in the computation graph holding a forward value."""

    __slots__ = ("value", "_parents", "_vjp")

    def __init__(self, value, _parents=(), _vjp=None):
        self.value = np.asarray(value)
        self._parents = _parents
        self._vjp = _vjp

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    @property
    def shape(self):
        return self.value.shape


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} x {bv.shape}")
    out = av @ bv

    def vjp(g):
        return g @ bv.T, av.T @ g

    return Var(out, (a, b), vjp)


def add(a: Var, b: Var) -> Var:
    out = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return Var(out, (a, b), vjp)


def mul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    out = av * bv

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return Var(out, (a, b), vjp)


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return Var(a.value * c, (a,), lambda g: (g * c,))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return Var(a.value * mask, (a,), lambda g: (g * mask,))


def reshape(a: Var, shape) -> Var:
    orig = a.value.shape
    return Var(a.value.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def l2_normalize_rows(a: Var, eps: float = 1e-12) -> Var:
    """Normalize each row of [n, d] to (numerically) unit L2 norm."""
    v = a.value
    if v.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects [n, d], got {v.shape}")
    sq = (v * v).sum(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(sq + eps)
    out = v * inv

    def vjp(g):
        # d(v/r)/dv with r = sqrt(sum v^2 + eps): g/r - v * <g, v> / r^3
        gv = (g * v).sum(axis=1, keepdims=True)
        return (g * inv - v * gv * inv**3,)

    return Var(out, (a,), vjp)


def dot(a: Var, b: Var) -> Var:
    """Scalar inner product of two same-shaped arrays."""
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        raise ShapeError(f"dot: shapes differ {av.shape} vs {bv.shape}")
    out = np.asarray((av * bv).sum())

    def vjp(g):
        return g * bv, g * av

    return Var(out, (a, b), vjp)


def mean_all(a: Var) -> Var:
    n = a.value.size
    out = np.asarray(a.value.mean())

    def vjp(g):
        return (np.full_like(a.value, g / n),)

    return Var(out, (a,), vjp)


def blend(pattern: Var, x: Var, mask: np.ndarray) -> Var:
    """Masked blend: mask * pattern + (1 - mask) * x.

    Gradient flows to `pattern` only through masked entries and to `x`
    only through unmasked entries. `mask` is a constant array broadcastable
    against both inputs.
    """
    mask = np.asarray(mask)
    out = mask * pattern.value + (1.0 - mask) * x.value

    def vjp(g):
        return (
            _unbroadcast(g * mask, pattern.value.shape),
            _unbroadcast(g * (1.0 - mask), x.value.shape),
        )

    return Var(out, (pattern, x), vjp)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    """Mean cross-entropy of row-wise softmax against integer labels."""
    z = logits.value
    if z.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [n, k] logits, got {z.shape}")
    labels = np.asarray(labels)
    if labels.shape != (z.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {z.shape}")
    n = z.shape[0]
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    picked = z[np.arange(n), labels][:, None]
    out = np.asarray((lse - picked).mean())

    def vjp(g):
        p = _softmax(z)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return Var(out, (logits,), vjp)


def softmax_entropy(logits: Var) -> Var:
    """Mean Shannon entropy of the row-wise softmax distribution."""
    z = logits.value
    if z.ndim != 2:
        raise ShapeError(f"softmax_entropy expects [n, k] logits, got {z.shape}")
    n = z.shape[0]
    p = _softmax(z)
    logp = np.log(np.clip(p, 1e-300, None))
    ent = -(p * logp).sum(axis=1)
    out = np.asarray(ent.mean())

    def vjp(g):
        # dH/dz_j = -p_j (log p_j + H) per row
        grad = -p * (logp + ent[:, None])
        return (grad * (g / n),)

    return Var(out, (logits,), vjp)


def backward(loss: Var, wrt) -> list[np.ndarray]:
    """Reverse-mode gradients of a scalar loss for the requested leaves.

    Returns gradients aligned with `wrt`; a leaf the loss does not depend
    on gets a zero gradient of matching shape.
    """
    if loss.value.ndim != 0:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    wrt = list(wrt)
    for v in wrt:
        if not isinstance(v, Var) or not v.is_leaf:
            raise ContractError("gradients may only be requested for leaf variables")

    # Topological order via iterative DFS.
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.value.dtype)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg

    out = []
    for v in wrt:
        g = grads.get(id(v))
        out.append(np.zeros_like(v.value) if g is None else np.asarray(g))
    return out


# ---------------------------------------------------------------------------
# Optimizers


@dataclass
class OptimState:
    """Per-parameter optimizer slots plus hyperparameters.

    kind is "sgd" (with momentum) or "adam". Slot tensors mirror parameter
    shapes and are created lazily on first use.
    """

    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float | None = None
    step: int = 0
    slots: dict = field(default_factory=dict)

    def _slot(self, name: str, key: str, like: np.ndarray) -> np.ndarray:
        store = self.slots.setdefault(name, {})
        if key not in store:
            store[key] = np.zeros_like(like)
        return store[key]


def opt_step(params: ParamSet, grads: dict, state: OptimState) -> ParamSet:
    """One optimizer update; parameters without gradients pass through."""
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter '{name}'")
        if np.shape(g) != params[name].shape:
            raise ContractError(
                f"gradient shape {np.shape(g)} does not match parameter "
                f"'{name}' of shape {params[name].shape}"
            )
    if state.clip_norm is not None and grads:
        total = float(np.sqrt(sum(float((np.asarray(g) ** 2).sum()) for g in grads.values())))
        if total > state.clip_norm:
            factor = state.clip_norm / total
            grads = {k: np.asarray(g) * factor for k, g in grads.items()}

    state.step += 1
    out: ParamSet = {}
    for name, p in params.items():
        if name not in grads:
            out[name] = p
            continue
        g = np.asarray(grads[name], dtype=p.dtype)
        if state.kind == "sgd":
            v = state._slot(name, "v", p)
            v *= state.momentum
            v += g
            out[name] = p - state.lr * v
        elif state.kind == "adam":
            b1, b2 = state.betas
            m = state._slot(name, "m", p)
            v = state._slot(name, "v", p)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            mhat = m / (1 - b1**state.step)
            vhat = v / (1 - b2**state.step)
            out[name] = p - state.lr * mhat / (np.sqrt(vhat) + state.eps)
        else:
            raise ContractError(f"unknown optimizer kind '{state.kind}'")
    return out
