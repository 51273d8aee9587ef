"""Minimal reverse-mode differentiation over dense float64 arrays.

A Tape records primitive operations in execution order; the backward pass
replays the records in reverse, accumulating adjoints into every input that
requires a gradient. Outside of a `with Tape():` block all operations run
forward-only, which is what sampling and finite-difference probes use.

Shapes follow numpy broadcasting; every primitive sums gradients back over
broadcast axes so parameters of any shape compose with batched activations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Execution-ordered record of primitives for one backward pass."""

    def __init__(self) -> None:
        self.records: list[tuple[Tensor, callable]] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes are single-owner")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def backward(self, loss: "Tensor") -> None:
        """Seed d(loss)/d(loss) = 1 and replay the records in reverse."""
        if loss.value.size != 1:
            raise ValueError("backward expects a scalar loss")
        loss.grad = np.ones_like(loss.value)
        for out, backprop in reversed(self.records):
            if out.grad is not None:
                backprop(out.grad)


class Tensor:
    """A float64 array plus an optional gradient accumulator."""

    __slots__ = ("value", "grad", "requires")

    def __init__(self, value, requires: bool = False) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires = requires

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, requires={self.requires})"


def constant(value) -> Tensor:
    return Tensor(value, requires=False)


def _record(out: Tensor, backprop) -> None:
    if _ACTIVE_TAPE is not None and out.requires:
        _ACTIVE_TAPE.records.append((out, backprop))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy matmul semantics."""
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ValueError(f"matmul needs 2-d or higher operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.value @ b.value, requires=a.requires or b.requires)

    def backprop(g: np.ndarray) -> None:
        if a.requires:
            a.accumulate(_unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape))
        if b.requires:
            b.accumulate(_unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape))

    _record(out, backprop)
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.value.reshape(shape), requires=a.requires)

    def backprop(g: np.ndarray) -> None:
        a.accumulate(g.reshape(a.value.shape))

    _record(out, backprop)
    return out


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    out = Tensor(np.swapaxes(a.value, -1, -2), requires=a.requires)

    def backprop(g: np.ndarray) -> None:
        a.accumulate(np.swapaxes(g, -1, -2))

    _record(out, backprop)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        value = a.value + b.value
    except ValueError as exc:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}") from exc
    out = Tensor(value, requires=a.requires or b.requires)

    def backprop(g: np.ndarray) -> None:
        if a.requires:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires:
            b.accumulate(_unbroadcast(g, b.shape))

    _record(out, backprop)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        value = a.value * b.value
    except ValueError as exc:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}") from exc
    out = Tensor(value, requires=a.requires or b.requires)

    def backprop(g: np.ndarray) -> None:
        if a.requires:
            a.accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires:
            b.accumulate(_unbroadcast(g * a.value, b.shape))

    _record(out, backprop)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.value * c, requires=a.requires)

    def backprop(g: np.ndarray) -> None:
        a.accumulate(g * c)

    _record(out, backprop)
    return out


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    out = Tensor(np.concatenate([p.value for p in parts], axis=axis),
                 requires=any(p.requires for p in parts))
    sizes = [p.value.shape[axis] for p in parts]

    def backprop(g: np.ndarray) -> None:
        offsets = np.cumsum(sizes)[:-1]
        for p, piece in zip(parts, np.split(g, offsets, axis=axis)):
            if p.requires:
                p.accumulate(piece)

    _record(out, backprop)
    return out


def split(a: Tensor, n_parts: int, axis: int = -1) -> list[Tensor]:
    """Split into equal parts along an axis; each part backprops into its slice."""
    pieces = np.split(a.value, n_parts, axis=axis)
    outs = []
    width = pieces[0].shape[axis]
    for i, piece in enumerate(pieces):
        out = Tensor(piece, requires=a.requires)

        def backprop(g: np.ndarray, i=i) -> None:
            if a.grad is None:
                a.grad = np.zeros_like(a.value)
            sl = [slice(None)] * a.value.ndim
            sl[axis] = slice(i * width, (i + 1) * width)
            a.grad[tuple(sl)] += g

        _record(out, backprop)
        outs.append(out)
    return outs


def slice_axis(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice along one axis."""
    sl = [slice(None)] * a.value.ndim
    sl[axis] = slice(start, stop)
    out = Tensor(a.value[tuple(sl)], requires=a.requires)

    def backprop(g: np.ndarray) -> None:
        if a.grad is None:
            a.grad = np.zeros_like(a.value)
        a.grad[tuple(sl)] += g

    _record(out, backprop)
    return out


def lookup(table: Tensor, indices: np.ndarray) -> Tensor:
    """Embedding lookup: gather rows of `table` by integer index."""
    idx = np.asarray(indices)
    out = Tensor(table.value[idx], requires=table.requires)

    def backprop(g: np.ndarray) -> None:
        if table.grad is None:
            table.grad = np.zeros_like(table.value)
        np.add.at(table.grad, idx, g)

    _record(out, backprop)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, requires=a.requires)

    def backprop(g: np.ndarray) -> None:
        # d/dx softmax: y * (g - sum(g*y))
        inner = (g * y).sum(axis=axis, keepdims=True)
        a.accumulate(y * (g - inner))

    _record(out, backprop)
    return out


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = a.value.mean(axis=-1, keepdims=True)
    var = a.value.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.value - mu) * inv
    out = Tensor(xhat * gain.value + bias.value,
                 requires=a.requires or gain.requires or bias.requires)

    def backprop(g: np.ndarray) -> None:
        if gain.requires:
            gain.accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires:
            bias.accumulate(_unbroadcast(g, bias.shape))
        if a.requires:
            gx = g * gain.value
            term = gx - gx.mean(axis=-1, keepdims=True) \
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            a.accumulate(inv * term)

    _record(out, backprop)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.value))
    out = Tensor(y, requires=a.requires)

    def backprop(g: np.ndarray) -> None:
        a.accumulate(g * y * (1.0 - y))

    _record(out, backprop)
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    out = Tensor(y, requires=a.requires)

    def backprop(g: np.ndarray) -> None:
        a.accumulate(g * (1.0 - y * y))

    _record(out, backprop)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    out = Tensor(np.where(mask, a.value, 0.0), requires=a.requires)

    def backprop(g: np.ndarray) -> None:
        a.accumulate(g * mask)

    _record(out, backprop)
    return out


def conv1d_same(x: Tensor, w: Tensor) -> Tensor:
    """1-d convolution along the second-to-last axis with zero same-padding.

    x: (..., N, C_in); w: (width, C_in, C_out) with odd width.
    """
    width = w.value.shape[0]
    if width % 2 == 0:
        raise ValueError("conv1d_same requires an odd kernel width")
    if x.value.shape[-1] != w.value.shape[1]:
        raise ValueError(f"conv1d channel mismatch: input {x.shape}, kernel {w.value.shape}")
    n = x.value.shape[-2]
    pad = width // 2
    out_val = np.zeros(x.value.shape[:-1] + (w.value.shape[2],))
    for k in range(width):
        off = k - pad
        lo, hi = max(0, -off), min(n, n - off)
        if lo >= hi:
            continue
        out_val[..., lo:hi, :] += x.value[..., lo + off:hi + off, :] @ w.value[k]
    out = Tensor(out_val, requires=x.requires or w.requires)

    def backprop(g: np.ndarray) -> None:
        for k in range(width):
            off = k - pad
            lo, hi = max(0, -off), min(n, n - off)
            if lo >= hi:
                continue
            x_slice = x.value[..., lo + off:hi + off, :]
            g_slice = g[..., lo:hi, :]
            if w.requires:
                gw = np.swapaxes(x_slice, -1, -2) @ g_slice
                gw = gw.reshape(-1, gw.shape[-2], gw.shape[-1]).sum(axis=0)
                if w.grad is None:
                    w.grad = np.zeros_like(w.value)
                w.grad[k] += gw
            if x.requires:
                gx = g_slice @ w.value[k].T
                if x.grad is None:
                    x.grad = np.zeros_like(x.value)
                x.grad[..., lo + off:hi + off, :] += gx

    _record(out, backprop)
    return out


def gated(a: Tensor, b: Tensor) -> Tensor:
    """Gated activation tanh(a) * sigmoid(b)."""
    if a.value.shape != b.value.shape:
        raise ValueError(f"gated shape mismatch: {a.shape} vs {b.shape}")
    ta = np.tanh(a.value)
    sb = 1.0 / (1.0 + np.exp(-b.value))
    out = Tensor(ta * sb, requires=a.requires or b.requires)

    def backprop(g: np.ndarray) -> None:
        if a.requires:
            a.accumulate(g * sb * (1.0 - ta * ta))
        if b.requires:
            b.accumulate(g * ta * sb * (1.0 - sb))

    _record(out, backprop)
    return out


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over every element."""
    if a.value.shape != b.value.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.value - b.value
    out = Tensor(np.mean(diff * diff), requires=a.requires or b.requires)
    size = diff.size

    def backprop(g: np.ndarray) -> None:
        coeff = 2.0 * float(g) / size
        if a.requires:
            a.accumulate(coeff * diff)
        if b.requires:
            b.accumulate(-coeff * diff)

    _record(out, backprop)
    return out


def cross_entropy(d: Tensor, p: np.ndarray, eps: float = 1e-12) -> Tensor:
    """Mean over rows of -sum(d * log(p + eps)); gradient flows into d only."""
    p = np.asarray(p, dtype=np.float64)
    logp = np.log(p + eps)
    try:
        per_elem = d.value * logp
    except ValueError as exc:
        raise ValueError(f"cross_entropy shape mismatch: {d.shape} vs {p.shape}") from exc
    n_rows = max(1, per_elem.size // per_elem.shape[-1])
    out = Tensor(-per_elem.sum() / n_rows, requires=d.requires)

    def backprop(g: np.ndarray) -> None:
        d.accumulate(_unbroadcast(-float(g) * np.broadcast_to(logp, d.value.shape) / n_rows,
                                  d.shape))

    _record(out, backprop)
    return out


# ---------------------------------------------------------------------------
# parameters and optimization
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameter tensors with paired gradient accumulators."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_coords(self) -> int:
        return sum(t.value.size for t in self._params.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.value.ravel() for t in self._params.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for t in self._params.values():
            n = t.value.size
            t.value = vec[i:i + n].reshape(t.value.shape).copy()
            i += n

    def grads_flat(self) -> np.ndarray:
        chunks = []
        for t in self._params.values():
            chunks.append(np.zeros(t.value.size) if t.grad is None else t.grad.ravel())
        return np.concatenate(chunks)


class Adam:
    """Adaptive-moment SGD over a ParamStore."""

    def __init__(self, store: ParamStore, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {n: np.zeros_like(t.value) for n, t in store.items()}
        self._v = {n: np.zeros_like(t.value) for n, t in store.items()}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.store.items():
            if p.grad is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.value = p.value - self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


# ---------------------------------------------------------------------------
# verification and linear algebra
# ---------------------------------------------------------------------------

def grad_check(f, store: ParamStore, eps: float = 1e-5,
               probes: int | None = None, seed: int = 0) -> float:
    """Compare reverse-mode gradients of scalar f(store) to central differences.

    Checks every coordinate when the store is small; above 10k coordinates (or
    when `probes` is given) it compares directional derivatives along random
    unit directions instead. Returns the maximum relative error, falling back
    to absolute error when both values are below 1e-8.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")

    with Tape() as tape:
        loss = f(store)
        if not np.isfinite(loss.value):
            raise ValueError("f evaluated to a non-finite value")
        store.zero_grad()
        tape.backward(loss)
    g = store.grads_flat()

    theta = store.flat()

    def f_at(vec: np.ndarray) -> float:
        store.set_flat(vec)
        out = float(f(store).value)
        if not np.isfinite(out):
            raise ValueError("f evaluated to a non-finite value during probing")
        return out

    def rel_err(ad: float, fd: float) -> float:
        denom = max(abs(ad), abs(fd))
        return abs(ad - fd) if denom < 1e-8 else abs(ad - fd) / denom

    n = theta.size
    worst = 0.0
    try:
        if probes is None and n <= 10_000:
            for i in range(n):
                bump = np.zeros(n)
                bump[i] = eps
                fd = (f_at(theta + bump) - f_at(theta - bump)) / (2.0 * eps)
                worst = max(worst, rel_err(g[i], fd))
        else:
            k = probes if probes is not None else 64
            rng = np.random.default_rng(seed)
            for _ in range(k):
                u = rng.standard_normal(n)
                u /= np.linalg.norm(u)
                fd = (f_at(theta + eps * u) - f_at(theta - eps * u)) / (2.0 * eps)
                worst = max(worst, rel_err(float(g @ u), fd))
    finally:
        store.set_flat(theta)
    return worst


def ridge_pseudo_inverse(m: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """Return (M^T M + ridge I)^-1 M^T via a Cholesky solve.

    With ridge = 0 and a well-conditioned M^T M this is the exact left
    pseudo-inverse.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-d matrix, got shape {m.shape}")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    d = m.shape[1]
    gram = m.T @ m + ridge * np.eye(d)
    try:
        factor = scipy.linalg.cho_factor(gram, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            f"normal matrix is not positive definite (ridge={ridge}); increase the ridge"
        ) from exc
    return scipy.linalg.cho_solve(factor, m.T)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, store: ParamStore, meta: dict[str, str] | None = None) -> None:
    """Write parameters as text: `# key value` header lines, then named arrays."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# mobidiff-checkpoint 1\n")
        for key, value in (meta or {}).items():
            fh.write(f"# {key} {value}\n")
        for name, t in store.items():
            dims = " ".join(str(s) for s in t.value.shape)
            fh.write(f"{name} {t.value.ndim} {dims}\n")
            fh.write(" ".join(f"{v:.17g}" for v in t.value.ravel()) + "\n")


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    arrays: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        lines = fh.readlines()
    i = 0
    while i < len(lines):
        line = lines[i].rstrip("\n")
        i += 1
        if not line.strip():
            continue
        if line.startswith("#"):
            parts = line[1:].strip().split(None, 1)
            if len(parts) == 2 and parts[0] != "mobidiff-checkpoint":
                meta[parts[0]] = parts[1]
            continue
        fields = line.split()
        name, ndim = fields[0], int(fields[1])
        shape = tuple(int(v) for v in fields[2:2 + ndim])
        values = np.array([float(v) for v in lines[i].split()], dtype=np.float64)
        i += 1
        arrays[name] = values.reshape(shape)
    return arrays, meta


def param_store_from_arrays(arrays: dict[str, np.ndarray]) -> ParamStore:
    store = ParamStore()
    for name, arr in arrays.items():
        store.add(name, arr)
    return store
