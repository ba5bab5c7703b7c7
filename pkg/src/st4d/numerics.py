"""Dense float64 linear algebra with per-layer analytic gradients.

Matrices are plain 2-D float64 numpy arrays. Every layer comes as a
forward function returning ``(output, cache)`` and a matching backward
function consuming ``(grad_output, cache)``, so the whole pipeline is an
explicit DAG that a finite-difference oracle can audit end to end.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray

GELU_C = math.sqrt(2.0 / math.pi)


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class FdProbeError(RuntimeError):
    """Loss became non-finite while probing a parameter entry."""


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> Array:
    """Coerce nested sequences or arrays to a 2-D float64 matrix."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"matrix must be 2-D, got shape {m.shape}")
    if rows is not None and m.shape != (rows, cols):
        raise DimensionError(f"expected shape ({rows}, {cols}), got {m.shape}")
    return m


def matmul(a: Array, b: Array) -> Array:
    """Matrix product with an explicit shape check."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(a: Array) -> Array:
    """Row-wise softmax with max subtraction for stability."""
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_bwd(grad_out: Array, probs: Array) -> Array:
    """Backward of softmax_rows given its output ``probs``."""
    inner = (grad_out * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_out - inner)


def sigmoid(x: Array) -> Array:
    """Elementwise logistic function, stable for large |x|."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gelu(x: Array) -> Array:
    """Smooth gelu (tanh form), used everywhere an MLP needs a nonlinearity."""
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * x**3)))


def gelu_grad(x: Array) -> Array:
    """Analytic derivative of :func:`gelu`."""
    u = GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    du = GELU_C * (1.0 + 3.0 * 0.044715 * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du


def linear_fwd(x: Array, w: Array, b: Array | None = None):
    """``out = x @ w.T + b``; x (n, d_in), w (d_out, d_in), b (1, d_out)."""
    out = matmul(x, w.T)
    if b is not None:
        out = out + b
    return out, (x, w)


def linear_bwd(grad_out: Array, cache):
    """Returns (grad_x, grad_w, grad_b)."""
    x, w = cache
    grad_w = grad_out.T @ x
    grad_x = grad_out @ w
    grad_b = grad_out.sum(axis=0, keepdims=True)
    return grad_x, grad_w, grad_b


def mlp_fwd(x: Array, w1: Array, b1: Array, w2: Array, b2: Array):
    """Two-layer perceptron with a gelu hidden layer."""
    h_pre, c1 = linear_fwd(x, w1, b1)
    h = gelu(h_pre)
    out, c2 = linear_fwd(h, w2, b2)
    return out, (c1, h_pre, c2)


def mlp_bwd(grad_out: Array, cache):
    """Returns (grad_x, (grad_w1, grad_b1, grad_w2, grad_b2))."""
    c1, h_pre, c2 = cache
    dh, dw2, db2 = linear_bwd(grad_out, c2)
    dh_pre = dh * gelu_grad(h_pre)
    dx, dw1, db1 = linear_bwd(dh_pre, c1)
    return dx, (dw1, db1, dw2, db2)


def attention_fwd(q: Array, k: Array, v: Array, scale: float):
    """Scaled dot-product attention for one head: softmax(q k^T * scale) v."""
    scores = (q @ k.T) * scale
    probs = softmax_rows(scores)
    out = probs @ v
    return out, (q, k, v, probs, scale)


def attention_bwd(grad_out: Array, cache):
    """Returns (grad_q, grad_k, grad_v)."""
    q, k, v, probs, scale = cache
    dv = probs.T @ grad_out
    dprobs = grad_out @ v.T
    dscores = softmax_rows_bwd(dprobs, probs)
    dq = (dscores @ k) * scale
    dk = (dscores.T @ q) * scale
    return dq, dk, dv


# ---------------------------------------------------------------------------
# Deterministic randomness
# ---------------------------------------------------------------------------


class Rng:
    """Seeded PCG64 generator with named stream splitting.

    ``split(label)`` derives an independent child stream from the root seed
    and the label, so scene generation, parameter init, and data order each
    consume their own stream and ablations differ only in the ablated factor.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = _key
        ss = np.random.SeedSequence(self.seed, spawn_key=_key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def split(self, label: str) -> "Rng":
        digest = hashlib.sha256(label.encode("utf-8")).digest()
        child = int.from_bytes(digest[:4], "big")
        return Rng(self.seed, self._key + (child,))

    def child_seed(self, label: str) -> int:
        """A stable 63-bit seed for handing to another component."""
        payload = f"{self.seed}:{'/'.join(map(str, self._key))}:{label}"
        digest = hashlib.sha256(payload.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "big") >> 1

    def normal(self, shape, scale: float = 1.0) -> Array:
        return self._gen.normal(0.0, scale, size=shape)

    def uniform(self, low: float, high: float, shape=None) -> Array | float:
        out = self._gen.uniform(low, high, size=shape)
        return out if shape is not None else float(out)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> Array:
        return self._gen.permutation(n)

    def choice(self, seq, size=None, replace=True):
        idx = self._gen.choice(len(seq), size=size, replace=replace)
        if size is None:
            return seq[int(idx)]
        return [seq[int(i)] for i in idx]

    def xavier_uniform(self, fan_out: int, fan_in: int) -> Array:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return self._gen.uniform(-limit, limit, size=(fan_out, fan_in))


# ---------------------------------------------------------------------------
# Parameter store
# ---------------------------------------------------------------------------


@dataclass
class ParamStore:
    """Named parameters, their gradients, a frozen set, and Adam moments.

    Updates mutate parameter arrays in place so that any module holding a
    view of a parameter sees the trained values.
    """

    params: dict[str, Array] = field(default_factory=dict)
    grads: dict[str, Array] = field(default_factory=dict)
    frozen: set[str] = field(default_factory=set)
    _m: dict[str, Array] = field(default_factory=dict)
    _v: dict[str, Array] = field(default_factory=dict)

    def add(self, name: str, value) -> Array:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already exists")
        m = as_matrix(value)
        if not np.isfinite(m).all():
            raise ValueError(f"parameter {name!r} contains non-finite values")
        self.params[name] = m
        return m

    def names(self) -> list[str]:
        return sorted(self.params)

    def unfrozen_names(self) -> list[str]:
        return [n for n in self.names() if n not in self.frozen]

    def zero_grads(self) -> None:
        self.grads = {}

    def accumulate_grad(self, name: str, grad: Array) -> None:
        if name not in self.params:
            raise KeyError(f"unknown parameter {name!r}")
        if grad.shape != self.params[name].shape:
            raise DimensionError(
                f"gradient shape {grad.shape} does not match parameter "
                f"{name!r} shape {self.params[name].shape}"
            )
        if name in self.grads:
            self.grads[name] = self.grads[name] + grad
        else:
            self.grads[name] = np.array(grad, dtype=np.float64)

    def set_frozen(self, names) -> None:
        unknown = set(names) - set(self.params)
        if unknown:
            raise KeyError(f"cannot freeze unknown parameters: {sorted(unknown)}")
        self.frozen = set(names)

    def freeze_all_except(self, prefixes) -> None:
        """Freeze every parameter whose name starts with none of the prefixes."""
        keep = tuple(prefixes)
        self.frozen = {n for n in self.params if not n.startswith(keep)}

    def clone(self) -> "ParamStore":
        other = ParamStore()
        other.params = {n: v.copy() for n, v in self.params.items()}
        other.grads = {n: v.copy() for n, v in self.grads.items()}
        other.frozen = set(self.frozen)
        other._m = {n: v.copy() for n, v in self._m.items()}
        other._v = {n: v.copy() for n, v in self._v.items()}
        return other

    # Serialization: decimal strings via repr() round-trip float64 exactly.
    def to_json(self) -> str:
        doc = {
            name: {
                "rows": int(mat.shape[0]),
                "cols": int(mat.shape[1]),
                "data": [repr(float(x)) for x in mat.ravel()],
            }
            for name, mat in sorted(self.params.items())
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ParamStore":
        doc = json.loads(text)
        store = cls()
        for name, entry in doc.items():
            rows, cols = entry["rows"], entry["cols"]
            data = np.array([float(s) for s in entry["data"]], dtype=np.float64)
            store.params[name] = data.reshape(rows, cols)
        return store

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


# ---------------------------------------------------------------------------
# Gradient oracle and optimizer
# ---------------------------------------------------------------------------


@dataclass
class FdEntry:
    name: str
    row: int
    col: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class FdReport:
    eps: float
    tol: float
    n_checked: int
    max_rel_err: float
    worst: FdEntry | None
    failures: list[FdEntry]

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [
            f"fd_check: {status}  entries={self.n_checked}  "
            f"max_rel_err={self.max_rel_err:.3e}  tol={self.tol:.1e}  eps={self.eps:.1e}"
        ]
        if self.worst is not None:
            w = self.worst
            lines.append(
                f"  worst: {w.name}[{w.row},{w.col}] analytic={w.analytic:.6e} "
                f"numeric={w.numeric:.6e} rel={w.rel_err:.3e}"
            )
        for f in self.failures[:20]:
            lines.append(
                f"  FAIL {f.name}[{f.row},{f.col}] analytic={f.analytic:.6e} "
                f"numeric={f.numeric:.6e} rel={f.rel_err:.3e}"
            )
        return "\n".join(lines)


def fd_check(loss_fn, params: ParamStore, eps: float = 1e-6, tol: float = 1e-4,
             rel_floor: float = 1e-3) -> FdReport:
    """Central-difference audit of analytic gradients.

    ``loss_fn(params)`` must return a finite scalar and populate
    ``params.grads`` for every unfrozen parameter it touches as a side
    effect; the analytic gradients are snapshotted from the first call.
    Each unfrozen entry is then perturbed by +/- eps and the central
    difference is compared against the snapshot.

    The relative-error denominator is ``max(|analytic|, |numeric|,
    rel_floor)``; for near-zero entries this turns the check into an
    absolute tolerance of ``tol * rel_floor``, sized two orders above the
    roundoff of a central difference at unit loss scale, while a genuine
    backward bug still surfaces as an O(1) relative error.
    """
    params.zero_grads()
    base = float(loss_fn(params))
    if not math.isfinite(base):
        raise FdProbeError("loss is non-finite at the unperturbed point")
    analytic = {
        name: params.grads.get(name, np.zeros_like(params.params[name])).copy()
        for name in params.unfrozen_names()
    }

    max_rel = 0.0
    worst: FdEntry | None = None
    failures: list[FdEntry] = []
    n_checked = 0
    for name in params.unfrozen_names():
        mat = params.params[name]
        grad = analytic[name]
        for idx in np.ndindex(mat.shape):
            orig = mat[idx]
            mat[idx] = orig + eps
            loss_plus = float(loss_fn(params))
            mat[idx] = orig - eps
            loss_minus = float(loss_fn(params))
            mat[idx] = orig
            if not (math.isfinite(loss_plus) and math.isfinite(loss_minus)):
                raise FdProbeError(f"non-finite loss probing {name}[{idx[0]},{idx[1]}]")
            numeric = (loss_plus - loss_minus) / (2.0 * eps)
            an = float(grad[idx])
            rel = abs(numeric - an) / max(abs(numeric), abs(an), rel_floor)
            n_checked += 1
            entry = FdEntry(name, idx[0], idx[1], an, numeric, rel)
            if rel > max_rel:
                max_rel = rel
                worst = entry
            if rel >= tol:
                failures.append(entry)
    # Leave the store as the caller expects: gradients of the unperturbed point.
    params.zero_grads()
    loss_fn(params)
    return FdReport(eps=eps, tol=tol, n_checked=n_checked,
                    max_rel_err=max_rel, worst=worst, failures=failures)


def adam_step(params: ParamStore, lr: float, betas: tuple[float, float] = (0.9, 0.999),
              step: int = 1, eps: float = 1e-8, weight_decay: float = 0.0) -> ParamStore:
    """One Adam/AdamW update applied in place to unfrozen parameters.

    Weight decay is decoupled (AdamW). Moment buffers live in the store and
    persist across calls; ``step`` is the 1-based global step used for bias
    correction. Frozen parameters and parameters without gradients are left
    untouched.
    """
    beta1, beta2 = betas
    for name in params.unfrozen_names():
        if name not in params.grads:
            continue
        g = params.grads[name]
        m = params._m.get(name)
        v = params._v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        params._m[name] = m
        params._v[name] = v
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        update = m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay:
            update = update + weight_decay * params.params[name]
        params.params[name] -= lr * update
    return params
