"""Dense float64 arithmetic, a small reverse-mode tape, and optimizer kernels.

Every primitive accepts either plain ``numpy`` arrays or :class:`Node` values.
When no input is a node the primitive just computes the value, so the same
forward code serves inference and training.
"""

from dataclasses import dataclass, field

import numpy as np


class ContractError(ValueError):
    """An argument violates a documented precondition (shape, range, layout)."""


class DomainError(ValueError):
    """A value lies outside the mathematical domain of an operation."""


class EvaluationError(ArithmeticError):
    """A function produced a non-finite value."""


# ---------------------------------------------------------------------------
# Tensor2 serialisation
# ---------------------------------------------------------------------------

def tensor_to_dict(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ContractError(f"expected a 1-D or 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError("tensor entries must be finite")
    return {"rows": int(a.shape[0]), "cols": int(a.shape[1]), "data": [float(v) for v in a.ravel()]}


def tensor_from_dict(d):
    try:
        rows, cols, data = int(d["rows"]), int(d["cols"]), d["data"]
    except (KeyError, TypeError) as exc:
        raise ContractError(f"malformed tensor record: {exc}") from None
    if len(data) != rows * cols:
        raise ContractError(f"tensor data length {len(data)} != {rows}x{cols}")
    a = np.asarray(data, dtype=np.float64).reshape(rows, cols)
    if not np.all(np.isfinite(a)):
        raise ContractError("tensor entries must be finite")
    return a


# ---------------------------------------------------------------------------
# Reverse-mode tape
# ---------------------------------------------------------------------------

class Node:
    __slots__ = ("value", "tape", "index")

    def __init__(self, value, tape, index):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Node(index={self.index}, shape={self.shape})"


class GradTape:
    """Ordered record of primitive applications.

    One tape per training step. ``leaf`` registers a parameter; every primitive
    applied to a node appends an entry holding its parent indices and a closure
    mapping the output gradient to parent gradients.
    """

    def __init__(self):
        self._parents = []
        self._backward = []
        self._values = []

    def __len__(self):
        return len(self._values)

    def _push(self, value, parents, backward):
        node = Node(value, self, len(self._values))
        self._values.append(value)
        self._parents.append(parents)
        self._backward.append(backward)
        return node

    def leaf(self, value):
        return self._push(np.asarray(value, dtype=np.float64), (), None)

    def record(self, value, parents, backward):
        """Append an op. ``parents`` may contain non-node constants (skipped)."""
        idx = tuple(p.index if isinstance(p, Node) else None for p in parents)
        return self._push(value, idx, backward)

    def gradient(self, output, wrt):
        """Gradients of scalar ``output`` w.r.t. each node in ``wrt``.

        Nodes that did not influence ``output`` receive zeros.
        """
        if output.tape is not self:
            raise ContractError("output node belongs to a different tape")
        if np.size(output.value) != 1:
            raise ContractError("gradient requires a scalar output")
        grads = [None] * len(self._values)
        grads[output.index] = np.ones_like(output.value, dtype=np.float64)
        for i in range(output.index, -1, -1):
            g = grads[i]
            if g is None or self._backward[i] is None:
                continue
            parent_grads = self._backward[i](g)
            for p, pg in zip(self._parents[i], parent_grads):
                if p is None or pg is None:
                    continue
                grads[p] = pg if grads[p] is None else grads[p] + pg
        out = []
        for node in wrt:
            g = grads[node.index]
            out.append(np.zeros_like(node.value) if g is None else g)
        return out


def value_of(x):
    return x.value if isinstance(x, Node) else x


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return None


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.shape[-1] != bv.shape[0]:
        raise ContractError(f"matmul shape mismatch {av.shape} @ {bv.shape}")
    out = av @ bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(out, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def scale(a, c):
    """Multiply by a constant scalar."""
    out = value_of(a) * c
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(out, (a,), lambda g: (g * c,))


def relu(a):
    av = value_of(a)
    mask = av > 0
    out = np.where(mask, av, 0.0)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(out, (a,), lambda g: (g * mask,))


def affine(x, w, b):
    return add(matmul(x, w), b)


def grad_reverse(a, lam):
    """Identity forward; backward multiplies the gradient by ``-lam``."""
    if lam < 0:
        raise ContractError("reversal coefficient must be non-negative")
    av = value_of(a)
    tape = _tape_of(a)
    if tape is None:
        return av
    return tape.record(av, (a,), lambda g: (grl_backward(g, lam),))


def grl_backward(upstream, lam):
    return -lam * np.asarray(upstream)


def softmax(a):
    av = value_of(a)
    e = np.exp(av - av.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    tape = _tape_of(a)
    if tape is None:
        return p

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return tape.record(p, (a,), backward)


def log_softmax(row):
    """Numerically stable ``row - logsumexp(row)`` along the last axis."""
    row = np.asarray(row, dtype=np.float64)
    if not np.all(np.isfinite(row)):
        raise ContractError("log_softmax requires finite entries")
    m = row.max(axis=-1, keepdims=True)
    shifted = row - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"length mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DomainError("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------

def grad_check(scalar_fn, params, eps=1e-5, fd_fn=None, wrt=None):
    """Maximum relative error between tape gradients and central differences.

    ``scalar_fn(params)`` is called once with a dict of tape nodes (must return
    a scalar node) and repeatedly with dicts of plain arrays (must return a
    float). ``fd_fn`` replaces ``scalar_fn`` for the finite-difference side,
    which is how a surrogate objective is checked against a reversal layer.
    ``wrt`` restricts the comparison to a subset of parameter names.

    The error per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 0 < eps <= 1e-2:
        raise ContractError("eps must lie in (0, 1e-2]")
    fd_fn = scalar_fn if fd_fn is None else fd_fn
    names = list(params) if wrt is None else list(wrt)
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    tape = GradTape()
    nodes = {k: tape.leaf(v) for k, v in base.items()}
    out = scalar_fn(nodes)
    if not isinstance(out, Node):
        # constant function: nothing was recorded
        analytic = [np.zeros_like(base[k]) for k in names]
        value = float(out)
    else:
        value = float(np.squeeze(out.value))
        analytic = tape.gradient(out, [nodes[k] for k in names])
    if not np.isfinite(value):
        raise EvaluationError("function value is not finite")

    worst = 0.0
    for name, ga in zip(names, analytic):
        p = base[name]
        flat = p.reshape(-1)
        ga = np.asarray(ga).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(fd_fn(base))
            flat[j] = orig - eps
            fm = float(fd_fn(base))
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise EvaluationError(f"non-finite value perturbing {name}[{j}]")
            num = (fp - fm) / (2 * eps)
            err = abs(ga[j] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def zeros_like(cls, params, **hypers):
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
            **hypers,
        )


def adamw_step(state, params, grads, lr):
    """One AdamW update with decoupled weight decay.

    Returns ``(new_params, new_state)``; inputs are left untouched.
    """
    if lr < 0:
        raise ContractError("learning rate must be non-negative")
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ContractError("params, grads and optimizer state keys differ")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ContractError(f"shape mismatch for {k}: {p.shape} vs {g.shape}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        step = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p
        new_params[k] = p - lr * step
        new_m[k], new_v[k] = m, v
    new_state = AdamWState(new_m, new_v, t, b1, b2, state.eps, state.weight_decay)
    return new_params, new_state


def lr_at(step, total_steps, base_lr, warmup_frac=0.1):
    """Linear warmup from 0 to ``base_lr`` then linear decay to 0."""
    if total_steps <= 0:
        raise ContractError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if not 0 < warmup_frac < 1:
        raise ContractError("warmup_frac must lie in (0, 1)")
    warmup = warmup_frac * total_steps
    if step < warmup:
        return base_lr * step / warmup
    return base_lr * (total_steps - step) / (total_steps - warmup)
