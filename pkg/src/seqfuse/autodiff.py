"""Minimal dense-tensor engine with reverse-mode differentiation.

Everything is a 2-D float64 matrix (batch rows x feature columns); vectors
are 1 x n or n x 1. Ops run eagerly on numpy and, when a tape is active and
an input requires grad, append a (output, inputs, vjp) record. `backward`
walks the records in reverse and accumulates gradients with +=, so running
it twice without a grad reset doubles every gradient — callers reset.

Broadcasting is deliberately restricted: `add` accepts a 1 x n row vector
as its second argument (bias), `scale_rows` a rows x 1 column; everything
else wants exact shapes so mistakes surface as DimensionError, not silent
broadcast.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DimensionError, NumericsError
from .rng import Xoshiro256

_EPS_BCE = 1e-12


class Tensor:
    __slots__ = ("data", "requires_grad", "_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self._grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def grad(self) -> np.ndarray | None:
        if self._grad is None and self.requires_grad:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on non-scalar shape {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Execution record for one forward pass; a context manager.

    A tape and its tensors belong to one thread. Independent tapes (one per
    grid-search trial) may run in parallel.
    """

    _active: list["Tape"] = []

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        Tape._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._active.pop()

    @staticmethod
    def current() -> "Tape | None":
        return Tape._active[-1] if Tape._active else None


def _result(op_name: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    if not np.isfinite(out_data).all():
        raise NumericsError(f"{op_name} produced a non-finite value")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    tape = Tape.current()
    if tape is not None and requires:
        tape.records.append((out, inputs, vjp))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate .grad for every requires_grad tensor reachable from `loss`.

    Gradients accumulate (+=) across fan-out and across repeated calls;
    records are visited once, in reverse execution order.
    """
    if loss.data.shape != (1, 1):
        raise DimensionError(f"loss must be scalar, got shape {loss.shape}")
    scratch: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    seen: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, vjp in reversed(tape.records):
        seen.setdefault(id(out), out)
        for t in inputs:
            seen.setdefault(id(t), t)
        g_out = scratch.get(id(out))
        if g_out is None:
            continue
        for t, g_in in zip(inputs, vjp(g_out)):
            if g_in is None or not t.requires_grad:
                continue
            acc = scratch.get(id(t))
            scratch[id(t)] = g_in if acc is None else acc + g_in
    for key, g in scratch.items():
        t = seen[key]
        if t.requires_grad:
            t._grad = g.copy() if t._grad is None else t._grad + g


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _result("matmul", out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; b may be a 1 x n row vector broadcast over a's rows."""
    if a.shape == b.shape:
        def vjp(g):
            return g, g
    elif b.shape == (1, a.shape[1]):
        def vjp(g):
            return g, g.sum(axis=0, keepdims=True)
    else:
        raise DimensionError(f"add: {a.shape} + {b.shape}")
    return _result("add", a.data + b.data, (a, b), vjp)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: {a.shape} * {b.shape}")
    out = a.data * b.data

    def vjp(g):
        return g * b.data, g * a.data

    return _result("hadamard", out, (a, b), vjp)


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    if axis not in (0, 1):
        raise DimensionError(f"concat: axis must be 0 or 1, got {axis}")
    other = 1 - axis
    widths = [t.shape[axis] for t in tensors]
    if len({t.shape[other] for t in tensors}) != 1:
        raise DimensionError(
            f"concat: mismatched shapes {[t.shape for t in tensors]} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    edges = np.cumsum([0] + widths)

    def vjp(g):
        if axis == 1:
            return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(tensors)))
        return tuple(g[edges[i]:edges[i + 1], :] for i in range(len(tensors)))

    return _result("concat", out, tuple(tensors), vjp)


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign to avoid overflow in exp.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _result("sigmoid", out, (x,), vjp)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _result("tanh", out, (x,), vjp)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction; a 1 x n input is the vector case."""
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _result("softmax", out, (x,), vjp)


def scale(x: Tensor, alpha: float) -> Tensor:
    def vjp(g):
        return (g * alpha,)

    return _result("scale", x.data * alpha, (x,), vjp)


def tsum(x: Tensor) -> Tensor:
    """Full reduction to a 1 x 1 scalar."""
    out = np.array([[x.data.sum()]])

    def vjp(g):
        return (np.full_like(x.data, g[0, 0]),)

    return _result("sum", out, (x,), vjp)


def row_sum(x: Tensor) -> Tensor:
    """Reduce columns, keeping one value per row (rows x 1)."""
    out = x.data.sum(axis=1, keepdims=True)

    def vjp(g):
        return (np.repeat(g, x.shape[1], axis=1),)

    return _result("row_sum", out, (x,), vjp)


def scale_rows(x: Tensor, c: Tensor) -> Tensor:
    """Multiply row i of x by c[i, 0]; c is a rows x 1 column."""
    if c.shape != (x.shape[0], 1):
        raise DimensionError(f"scale_rows: x {x.shape}, c {c.shape}")
    out = x.data * c.data

    def vjp(g):
        return g * c.data, (g * x.data).sum(axis=1, keepdims=True)

    return _result("scale_rows", out, (x, c), vjp)


def embedding_lookup(weights: Tensor, index_lists: list[list[int]]) -> Tensor:
    """Row i of the output is the sum of `weights` rows named by index_lists[i].

    This is the sparse path for multi-hot inputs: equivalent to X @ weights
    for a binary X whose set bits are the index lists, without densifying X.
    """
    rows = len(index_lists)
    out = np.zeros((rows, weights.shape[1]))
    for i, idxs in enumerate(index_lists):
        if len(idxs) == 0:
            raise DimensionError(f"embedding_lookup: empty index list at row {i}")
        if max(idxs) >= weights.shape[0] or min(idxs) < 0:
            raise DimensionError(
                f"embedding_lookup: index out of range for {weights.shape[0]} rows")
        out[i] = weights.data[list(idxs)].sum(axis=0)

    def vjp(g):
        gw = np.zeros_like(weights.data)
        for i, idxs in enumerate(index_lists):
            for j in idxs:
                gw[j] += g[i]
        return (gw,)

    return _result("embedding_lookup", out, (weights,), vjp)


def weighted_bce(y_hat: Tensor, y: np.ndarray, w_pos: float = 1.0, w_neg: float = 1.0) -> Tensor:
    """-mean(w_pos*y*log(p) + w_neg*(1-y)*log(1-p)), p clamped to [eps, 1-eps]."""
    y = np.asarray(y, dtype=np.float64).reshape(y_hat.shape)
    p = np.clip(y_hat.data, _EPS_BCE, 1.0 - _EPS_BCE)
    n = p.size
    loss = -(w_pos * y * np.log(p) + w_neg * (1.0 - y) * np.log1p(-p)).sum() / n

    def vjp(g):
        interior = (y_hat.data > _EPS_BCE) & (y_hat.data < 1.0 - _EPS_BCE)
        d = -(w_pos * y / p - w_neg * (1.0 - y) / (1.0 - p)) / n
        return (g[0, 0] * d * interior,)

    return _result("weighted_bce", np.array([[loss]]), (y_hat,), vjp)


# ---------------------------------------------------------------------------
# parameter initialization and optimizers
# ---------------------------------------------------------------------------


def init_uniform(shape: tuple[int, int], fan_in: int, rng: Xoshiro256) -> Tensor:
    """uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), drawn in row-major order."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    data = np.array(
        [rng.uniform(-bound, bound) for _ in range(shape[0] * shape[1])]
    ).reshape(shape)
    return Tensor(data, requires_grad=True)


class Sgd:
    def __init__(self, params: dict[str, Tensor], lr: float):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for t in self.params.values():
            if t.requires_grad and t._grad is not None:
                t.data -= self.lr * t._grad

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self._v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if not p.requires_grad or p._grad is None:
                continue
            g = p._grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()


# ---------------------------------------------------------------------------
# checkpoint format: JSON manifest + little-endian float64 blob, row-major
# ---------------------------------------------------------------------------


def save_checkpoint(directory: str | Path, tensors: dict[str, Tensor | np.ndarray],
                    meta: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blob = bytearray()
    for name in sorted(tensors):
        arr = tensors[name]
        data = arr.data if isinstance(arr, Tensor) else np.asarray(arr, dtype=np.float64)
        raw = struct.pack(f"<{data.size}d", *data.reshape(-1).tolist())
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        blob.extend(raw)
        offset += len(raw)
    manifest = {"tensors": entries, "meta": meta or {}}
    (directory / "weights.bin").write_bytes(bytes(blob))
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_checkpoint(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    blob = (directory / "weights.bin").read_bytes()
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        vals = struct.unpack_from(f"<{count}d", blob, entry["offset"])
        tensors[entry["name"]] = np.array(vals, dtype=np.float64).reshape(shape)
    return tensors, manifest.get("meta", {})


def update_checkpoint_meta(directory: str | Path, updates: dict) -> None:
    """Merge keys into an existing checkpoint's JSON block (weights untouched)."""
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    manifest.setdefault("meta", {}).update(updates)
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
