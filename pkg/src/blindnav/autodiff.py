"""Reverse-mode automatic differentiation over dense numpy tensors.

Scope is exactly what the agents need: dense matmul, elementwise maps,
concat/split, embedding lookup, a GRU step, stable softmax losses, AdamW,
and a versioned binary checkpoint. Training runs in float32; gradient
verification runs the same graphs in float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np


class AutodiffError(Exception):
    pass


_GRAD_ENABLED = True


class no_grad:
    """Context manager: ops built inside do not record the backward graph."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to the parent's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            raise AutodiffError("nested Tensor")
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise AutodiffError(f"backward needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        state: dict[int, int] = {}
        stack: list[Tensor] = [self]
        while stack:
            node = stack[-1]
            k = id(node)
            if state.get(k, 0) == 0:
                state[k] = 1
                for p in node._parents:
                    if state.get(id(p), 0) == 0 and p._backward is not None:
                        stack.append(p)
            else:
                stack.pop()
                if state[k] == 1:
                    state[k] = 2
                    topo.append(node)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            grads = node._backward(node.grad)
            for p, g in zip(node._parents, grads):
                if g is None or not (p.requires_grad or p._backward is not None):
                    continue
                p.grad = g if p.grad is None else p.grad + g

    # Convenience operators; all defer to the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={'set' if self.grad is not None else 'none'})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._backward is not None for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (a.data.ndim <= 1 or b.data.ndim <= 1):
        if a.shape[-1] != b.shape[-1]:
            raise AutodiffError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "add")
    data = a.data + b.data
    return _node(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "sub")
    data = a.data - b.data
    return _node(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "mul")
    data = a.data * b.data
    return _node(
        data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise AutodiffError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data
    return _node(data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def concat(parts: list, axis: int = 1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(data, tuple(parts), backward)


def split(t: Tensor, sizes: list, axis: int = 1) -> list:
    t = _as_tensor(t)
    if sum(sizes) != t.shape[axis]:
        raise AutodiffError(f"split: sizes {sizes} do not cover axis {axis} of {t.shape}")
    splits = np.cumsum(sizes)[:-1]
    pieces = np.split(t.data, splits, axis=axis)
    outs = []
    offset = 0
    for piece in pieces:
        lo = offset
        hi = offset + piece.shape[axis]
        offset = hi

        def backward(g, lo=lo, hi=hi):
            full = np.zeros_like(t.data)
            idx = [slice(None)] * t.data.ndim
            idx[axis] = slice(lo, hi)
            full[tuple(idx)] = g
            return (full,)

        outs.append(_node(piece, (t,), backward))
    return outs


def sigmoid(t) -> Tensor:
    t = _as_tensor(t)
    out = np.empty_like(t.data)
    pos = t.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t.data[pos]))
    e = np.exp(t.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _node(out, (t,), lambda g: (g * out * (1.0 - out),))


def tanh(t) -> Tensor:
    t = _as_tensor(t)
    out = np.tanh(t.data)
    return _node(out, (t,), lambda g: (g * (1.0 - out * out),))


def relu(t) -> Tensor:
    t = _as_tensor(t)
    out = np.maximum(t.data, 0.0)
    return _node(out, (t,), lambda g: (g * (t.data > 0),))


def exp(t) -> Tensor:
    t = _as_tensor(t)
    out = np.exp(t.data)
    return _node(out, (t,), lambda g: (g * out,))


def log(t) -> Tensor:
    t = _as_tensor(t)
    return _node(np.log(t.data), (t,), lambda g: (g / t.data,))


def clip(t, lo: float, hi: float) -> Tensor:
    """Value clip; gradient passes only where the input is inside [lo, hi]."""
    t = _as_tensor(t)
    out = np.clip(t.data, lo, hi)
    inside = (t.data >= lo) & (t.data <= hi)
    return _node(out, (t,), lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.data <= b.data
    data = np.where(take_a, a.data, b.data)
    return _node(
        data, (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
    )


def reduce_sum(t, axis=None) -> Tensor:
    t = _as_tensor(t)
    data = t.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, t.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), t.shape).copy(),)

    return _node(np.asarray(data), (t,), backward)


def mean(t, axis=None) -> Tensor:
    t = _as_tensor(t)
    n = t.data.size if axis is None else t.shape[axis]
    return mul(reduce_sum(t, axis=axis), 1.0 / n)


def reshape(t, shape) -> Tensor:
    t = _as_tensor(t)
    old = t.shape
    return _node(t.data.reshape(shape), (t,), lambda g: (g.reshape(old),))


def gather_rows(table: Tensor, idx) -> Tensor:
    """Embedding lookup: rows of a 2D table selected by an integer vector."""
    table = _as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    data = table.data[idx]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(data, (table,), backward)


def scatter_rows(base: Tensor, idx, rows: Tensor) -> Tensor:
    """Copy of `base` with rows at `idx` replaced by `rows` (no duplicates)."""
    base = _as_tensor(base)
    rows = _as_tensor(rows)
    idx = np.asarray(idx, dtype=np.int64)
    if rows.shape[0] != idx.shape[0] or rows.shape[1:] != base.shape[1:]:
        raise AutodiffError(f"scatter_rows: rows {rows.shape} into base {base.shape}")
    data = base.data.copy()
    data[idx] = rows.data

    def backward(g):
        g_base = g.copy()
        g_base[idx] = 0.0
        return (g_base, g[idx])

    return _node(data, (base, rows), backward)


def take_per_row(t: Tensor, idx) -> Tensor:
    """Element [i, idx[i]] per row, as a vector (used for chosen-action log-probs)."""
    t = _as_tensor(t)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(t.shape[0])
    data = t.data[rows, idx]

    def backward(g):
        full = np.zeros_like(t.data)
        full[rows, idx] = g
        return (full,)

    return _node(data, (t,), backward)


def log_softmax(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    shift = t.data - t.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=1, keepdims=True))
    out = shift - lse
    softmax_out = np.exp(out)

    def backward(g):
        return (g - softmax_out * g.sum(axis=1, keepdims=True),)

    return _node(out, (t,), backward)


def softmax(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    shift = t.data - t.data.max(axis=1, keepdims=True)
    e = np.exp(shift)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (t,), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row negative log-likelihood of integer targets; callers reduce."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise AutodiffError(
            f"cross_entropy: targets shape {targets.shape} vs logits {logits.shape}"
        )
    return neg(take_per_row(log_softmax(logits), targets))


@dataclass
class GruParams:
    """One GRU layer. Gate order in the fused input weights is [z | r | c].

    Convention: z = sig(W_z[x,h]+b_z), r = sig(W_r[x,h]+b_r),
    c = tanh(W_c[x, r*h]+b_c), h' = (1-z)*h + z*c.
    """

    w_in: Tensor    # (in_dim, 3H)
    bias: Tensor    # (3H,)
    u_zr: Tensor    # (H, 2H) recurrent weights for z and r
    u_c: Tensor     # (H, H) recurrent weights for the candidate, applied to r*h

    @property
    def hidden(self) -> int:
        return self.u_c.shape[0]


def gru_step(p: GruParams, x: Tensor, h: Tensor) -> Tensor:
    gates_x = add(matmul(x, p.w_in), p.bias)
    return gru_step_pre(p, gates_x, h)


def gru_step_pre(p: GruParams, gates_x: Tensor, h: Tensor) -> Tensor:
    """gru_step given the precomputed input projection x @ w_in + bias.

    The input projection has no recurrent dependency, so sequence replays can
    batch it over every step at once and pay only the two state matmuls here.
    """
    hdim = p.hidden
    gx_zr, gx_c = split(gates_x, [2 * hdim, hdim], axis=1)
    zr = sigmoid(add(gx_zr, matmul(h, p.u_zr)))
    z, r = split(zr, [hdim, hdim], axis=1)
    c = tanh(add(gx_c, matmul(mul(r, h), p.u_c)))
    one_minus_z = sub(1.0, z)
    return add(mul(one_minus_z, h), mul(z, c))


class ParamStore:
    """Named trainable tensors; the unit of checkpointing and optimization."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise AutodiffError(f"duplicate parameter name {name!r}")
        t = Tensor(np.ascontiguousarray(array), requires_grad=True)
        self._params[name] = t
        return t

    def adopt(self, name: str, tensor: Tensor) -> Tensor:
        """Share an existing parameter under this store (joint optimizers)."""
        if name in self._params:
            raise AutodiffError(f"duplicate parameter name {name!r}")
        if not tensor.requires_grad:
            raise AutodiffError(f"adopted parameter {name!r} must require grad")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list:
        return list(self._params)

    def remove(self, name: str) -> None:
        if name not in self._params:
            raise AutodiffError(f"no parameter named {name!r}")
        del self._params[name]

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> dict:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state_dict(self, state: dict) -> None:
        for k, t in self._params.items():
            if k not in state:
                raise AutodiffError(f"checkpoint missing parameter {k!r}")
            if state[k].shape != t.data.shape:
                raise AutodiffError(
                    f"shape mismatch for {k!r}: {state[k].shape} vs {t.data.shape}"
                )
            t.data = state[k].astype(t.data.dtype).copy()


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise AutodiffError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise AutodiffError("betas must lie in [0, 1)")


class AdamW:
    """Adam with decoupled weight decay; wd=0 recovers plain Adam."""

    def __init__(self, store: ParamStore, config: OptimConfig):
        self.store = store
        self.config = config
        self.step_count = 0
        self._m = {k: np.zeros_like(t.data) for k, t in store.items()}
        self._v = {k: np.zeros_like(t.data) for k, t in store.items()}

    def step(self) -> None:
        c = self.config
        self.step_count += 1
        b1t = 1.0 - c.beta1 ** self.step_count
        b2t = 1.0 - c.beta2 ** self.step_count
        for name, p in self.store.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise AutodiffError(f"non-finite gradient in parameter {name!r}")
            m = self._m[name]
            v = self._v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            if c.weight_decay:
                p.data -= c.lr * c.weight_decay * p.data
            p.data -= c.lr * (m / b1t) / (np.sqrt(v / b2t) + c.eps)
        self.store.zero_grad()

    def state_dict(self) -> dict:
        out = {"adamw/step": np.asarray([self.step_count], dtype=np.float32)}
        for k in self.store.names():
            out[f"adamw/m/{k}"] = self._m[k].copy()
            out[f"adamw/v/{k}"] = self._v[k].copy()
        return out

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["adamw/step"][0])
        for k in self.store.names():
            self._m[k] = state[f"adamw/m/{k}"].astype(self._m[k].dtype).copy()
            self._v[k] = state[f"adamw/v/{k}"].astype(self._v[k].dtype).copy()


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for _, p in store.items():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = total ** 0.5
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for _, p in store.items():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# Parameter initializers.

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def orthogonal(rng: np.random.Generator, rows: int, cols: int,
               dtype=np.float32) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q[:rows, :cols].astype(dtype)


def grad_check(fn, inputs: list, eps: float = 1e-5) -> float:
    """Max relative error between backward gradients and central differences.

    fn maps the list of Tensors to a scalar Tensor; inputs should hold
    float64 data for the differences to resolve below the 1e-4 gate.
    """
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    out = fn(inputs)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    for t, ana in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            with no_grad():
                flat[i] = keep + eps
                hi = float(fn(inputs).data)
                flat[i] = keep - eps
                lo = float(fn(inputs).data)
            flat[i] = keep
            num[i] = (hi - lo) / (2.0 * eps)
        ana_flat = ana.reshape(-1)
        # The 1e-6 floor makes near-zero coordinates an absolute comparison;
        # central-difference noise sits around 1e-11 there, far below any
        # plausible backward bug, which would land at 1e-5 or worse.
        denom = np.maximum(np.maximum(np.abs(ana_flat), np.abs(num)), 1e-6)
        worst = max(worst, float(np.max(np.abs(ana_flat - num) / denom)))
    return worst


# Checkpoint format: magic, version, named float32 tensor table, then an
# optional second table for optimizer state. Raw little-endian payloads.

_MAGIC = b"BNAVCKPT"
_CKPT_VERSION = 1


def _write_table(f, arrays: dict) -> None:
    f.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        f.write(struct.pack("<H", len(nb)))
        f.write(nb)
        f.write(struct.pack("<B", arr32.ndim))
        for d in arr32.shape:
            f.write(struct.pack("<I", d))
        f.write(arr32.tobytes())


def _read_table(f) -> dict:
    (count,) = struct.unpack("<I", f.read(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", f.read(2))
        name = f.read(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", f.read(1))
        shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape).copy()
        out[name] = arr
    return out


def save_checkpoint(path, params: dict, optim_state: dict | None = None,
                    meta: dict | None = None) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _CKPT_VERSION))
        meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<I", len(meta_blob)))
        f.write(meta_blob)
        _write_table(f, params)
        f.write(struct.pack("<B", 1 if optim_state else 0))
        if optim_state:
            _write_table(f, optim_state)


def load_checkpoint(path) -> tuple:
    """(params, optim_state or None, meta)."""
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise AutodiffError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _CKPT_VERSION:
            raise AutodiffError(f"{path}: unsupported checkpoint version {version}")
        (mlen,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(mlen).decode("utf-8"))
        params = _read_table(f)
        (has_opt,) = struct.unpack("<B", f.read(1))
        optim_state = _read_table(f) if has_opt else None
    return params, optim_state, meta
