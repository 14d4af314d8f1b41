"""Define-by-run reverse-mode autodiff over dense 2-D float64 tensors.

A :class:`Tape` is opened per example; every operation whose inputs are
watched on the active tape appends a record holding its parents and a
vector-Jacobian rule. ``tape.backward(loss)`` replays the records in
reverse. With no tape active the same functions are plain numpy.
"""

from __future__ import annotations

import base64
import itertools
import json
import struct
import threading
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ConsistencyError(RuntimeError):
    pass


_local = threading.local()
_open_tapes = [0]  # across all threads; lets untracked code skip the lookup
_count_lock = threading.Lock()


def current_tape() -> "Tape | None":
    if not _open_tapes[0]:
        return None
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Immutable 2-D value, optionally tracked on a tape.

    Untracked results may carry extra leading axes (a batch of independent
    evaluations, used by batched finite differences); ``shape``, ``rows`` and
    ``cols`` always describe the trailing matrix.
    """

    __slots__ = ("data", "node", "tape")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionError(f"empty tensor shape {arr.shape}")
        self.data = arr
        self.tape = tape
        self.node = node

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Untracked tensor around an op result already known to be 2-D float64."""
        t = object.__new__(cls)
        t.data, t.tape, t.node = arr, None, None
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[-2:]

    @property
    def rows(self) -> int:
        return self.data.shape[-2]

    @property
    def cols(self) -> int:
        return self.data.shape[-1]

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        tracked = "" if self.node is None else f", node={self.node}"
        return f"Tensor({self.data.tolist()}{tracked})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of operations for one forward pass.

    Use as a context manager; while open, it is the thread's active tape.
    """

    def __init__(self):
        self.parents: list[tuple] = []
        self.rules: list[Callable | None] = []
        self.shapes: list[tuple[int, int]] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        with _count_lock:
            _open_tapes[0] += 1
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()
        with _count_lock:
            _open_tapes[0] -= 1

    def __len__(self) -> int:
        return len(self.rules)

    def watch(self, value) -> Tensor:
        """Register a leaf (e.g. a parameter) whose gradient is wanted.

        The returned tensor shares memory with ``value`` when it is a float64
        array, so in-place perturbation is seen by later forward passes.
        """
        data = value.data if isinstance(value, Tensor) else value
        t = Tensor(data, tape=self, node=len(self.rules))
        self.parents.append(())
        self.rules.append(None)
        self.shapes.append(t.shape)
        return t

    def record(self, data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
        parents = tuple(t.node if t.tape is self else None for t in inputs)
        node = len(self.rules)
        self.parents.append(parents)
        self.rules.append(rule)
        self.shapes.append(data.shape)
        return Tensor(data, tape=self, node=node)

    def backward(self, loss: Tensor) -> "Gradients":
        if loss.shape != (1, 1):
            raise ValueError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
        if loss.tape is not self:
            raise ValueError("loss is not tracked on this tape")
        grads: list[np.ndarray | None] = [None] * len(self.rules)
        grads[loss.node] = np.ones((1, 1))
        for i in range(loss.node, -1, -1):
            g = grads[i]
            rule = self.rules[i]
            if g is None or rule is None:
                continue
            parents = self.parents[i]
            local = rule(g)
            for p, pg in zip(parents, local):
                if p is None or pg is None:
                    continue
                if grads[p] is None:
                    grads[p] = pg
                else:
                    grads[p] = grads[p] + pg
        return Gradients(self, grads)


class Gradients:
    """Gradient map returned by :meth:`Tape.backward`, indexed by tensor."""

    def __init__(self, tape: Tape, grads: list):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape:
            raise KeyError("tensor is not tracked on this tape")
        g = self._grads[t.node]
        return np.zeros(t.shape) if g is None else g

    def reached(self, t: Tensor) -> bool:
        return t.tape is self._tape and self._grads[t.node] is not None


def _emit(data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    if _open_tapes[0]:
        tape = current_tape()
        if tape is not None:
            for t in inputs:
                if t.tape is tape:
                    return tape.record(data, inputs, rule)
    return Tensor._wrap(data)


def join(arrays: Sequence[np.ndarray], axis: int) -> np.ndarray:
    """Concatenate along ``axis`` (-1 or -2), broadcasting any leading batch axes."""
    lead = np.broadcast_shapes(*(a.shape[:-2] for a in arrays))
    if lead:
        arrays = [np.broadcast_to(a, lead + a.shape[-2:]) for a in arrays]
    return np.concatenate(arrays, axis=axis)


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit(out, (a, b), lambda g: (g / bd, -g * out / bd))


def scale(a, k: float) -> Tensor:
    a = as_tensor(a)
    k = float(k)
    return _emit(a.data * k, (a,), lambda g: (g * k,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function on a plain array; split by sign so exp never overflows."""
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = stable_sigmoid(a.data)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return _emit(np.abs(a.data), (a,), lambda g: (g * s,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise NumericError("log of a non-positive value")
    return _emit(np.log(x), (a,), lambda g: (g / x,))


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, tanh, sigmoid."""
    if op in ("tanh", "sigmoid"):
        if b is not None:
            raise ValueError(f"{op} is unary")
        return tanh(a) if op == "tanh" else sigmoid(a)
    if op == "scale":
        return scale(a, b)
    binary = {"add": add, "sub": sub, "mul": mul}
    if op not in binary:
        raise ValueError(f"unknown elementwise op {op!r}")
    return binary[op](a, b)


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _emit(np.swapaxes(a.data, -1, -2), (a,), lambda g: (g.T,))


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T (+ b)`` with ``b`` (1 x out) added to every row of the result."""
    x, w = as_tensor(x), as_tensor(w)
    if x.cols != w.cols:
        raise DimensionError(f"linear: input {x.shape} does not fit weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ np.swapaxes(wd, -1, -2)
    if b is None:
        return _emit(out, (x, w), lambda g: (g @ wd, g.T @ xd))
    b = as_tensor(b)
    if b.shape != (1, w.rows):
        raise DimensionError(f"linear: bias {b.shape} does not fit weight {w.shape}")
    out = out + b.data
    return _emit(out, (x, w, b), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0, keepdims=True)))


# -- reductions and reshaping --------------------------------------------------

def total(a) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=(-2, -1), keepdims=True)
    return _emit(out, (a,), lambda g: (np.full(shape, g[0, 0]),))


def sum_rows(a) -> Tensor:
    """Column-wise sum: n x d -> 1 x d."""
    a = as_tensor(a)
    n = a.rows
    return _emit(a.data.sum(axis=-2, keepdims=True), (a,), lambda g: (np.repeat(g, n, axis=0),))


def row(a, i: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        out[i] = g[0]
        return (out,)

    return _emit(a.data[..., i : i + 1, :].copy(), (a,), rule)


def concat_rows(hs: Sequence[Tensor]) -> Tensor:
    if not hs:
        raise ValueError("concat_rows needs at least one tensor")
    hs = [as_tensor(h) for h in hs]
    width = hs[0].cols
    for h in hs:
        if h.cols != width:
            raise DimensionError(f"concat_rows: widths {width} and {h.cols} differ")
    if len(hs) == 1:
        return hs[0]
    bounds = list(itertools.accumulate((h.rows for h in hs), initial=0))
    data = join([h.data for h in hs], axis=-2)
    return _emit(data, hs, lambda g: tuple(g[bounds[k] : bounds[k + 1]] for k in range(len(hs))))


def concat_cols(hs: Sequence[Tensor]) -> Tensor:
    if not hs:
        raise ValueError("concat_cols needs at least one tensor")
    hs = [as_tensor(h) for h in hs]
    for h in hs:
        if h.rows != hs[0].rows:
            raise DimensionError(f"concat_cols: row counts {hs[0].rows} and {h.rows} differ")
    if len(hs) == 1:
        return hs[0]
    bounds = list(itertools.accumulate((h.cols for h in hs), initial=0))
    data = join([h.data for h in hs], axis=-1)
    return _emit(data, hs, lambda g: tuple(g[:, bounds[k] : bounds[k + 1]] for k in range(len(hs))))


def cols(a, lo: int, hi: int) -> Tensor:
    """Column slice ``a[:, lo:hi]``."""
    a = as_tensor(a)
    if not 0 <= lo < hi <= a.cols:
        raise DimensionError(f"cols: slice [{lo}, {hi}) outside width {a.cols}")
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        out[:, lo:hi] = g
        return (out,)

    return _emit(a.data[..., lo:hi].copy(), (a,), rule)


def reshape(a, rows: int, ncols: int) -> Tensor:
    """Row-major reshape."""
    a = as_tensor(a)
    shape = a.shape
    if rows * ncols != shape[0] * shape[1]:
        raise DimensionError(f"reshape: cannot view {shape} as ({rows}, {ncols})")
    out = a.data.reshape(a.data.shape[:-2] + (rows, ncols)).copy()
    return _emit(out, (a,), lambda g: (g.reshape(shape),))


def custom(data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    """Record a hand-written operation.

    ``data`` is the 2-D result; ``rule(g)`` returns one gradient (or None) per
    input, each shaped like that input.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim < 2:
        raise DimensionError(f"custom op output must be 2-D, got {data.shape}")
    return _emit(data, tuple(as_tensor(t) for t in inputs), rule)


# -- normalisation -------------------------------------------------------------

def softmax(a, axis: str = "row") -> Tensor:
    """Softmax of each row (``axis="row"``) or of the whole tensor."""
    a = as_tensor(a)
    x = a.data
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax input is not finite")
    if axis == "row":
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        out = e / e.sum(axis=-1, keepdims=True)
        return _emit(out, (a,), lambda g: (out * (g - (g * out).sum(axis=1, keepdims=True)),))
    if axis == "whole":
        e = np.exp(x - x.max(axis=(-2, -1), keepdims=True))
        out = e / e.sum(axis=(-2, -1), keepdims=True)
        return _emit(out, (a,), lambda g: (out * (g - (g * out).sum()),))
    raise ValueError(f"axis must be 'row' or 'whole', got {axis!r}")


DEGENERATE_TOL = 1e-12
RATIO_EPS = 1e-8


def normalize_rows(a, eps: float = RATIO_EPS) -> Tensor:
    """Divide each row by its own sum.

    A sum smaller than ``eps`` in magnitude is replaced by ``eps`` with the
    sum's sign (and then treated as a constant); sums below 1e-12 raise
    :class:`NumericError` instead of being masked.
    """
    a = as_tensor(a)
    x = a.data
    s = x.sum(axis=-1, keepdims=True)
    if np.any(np.abs(s) < DEGENERATE_TOL):
        raise NumericError("degenerate denominator: a row sums to ~0")
    live = np.abs(s) >= eps
    denom = np.where(live, s, eps * np.sign(s))
    out = x / denom
    return _emit(out, (a,), lambda g: ((g - live * (g * out).sum(axis=1, keepdims=True)) / denom,))


# -- parameters ----------------------------------------------------------------

class ParamStore:
    """Named float64 parameters plus their Adagrad accumulators."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.accum: dict[str, np.ndarray] = {}
        self.frozen: set[str] = set()

    def add(self, name: str, value, frozen: bool = False) -> np.ndarray:
        if name in self.values:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64, ndmin=2)
        if arr.ndim != 2:
            raise DimensionError(f"parameter {name!r} must be 2-D")
        self.values[name] = arr
        self.accum[name] = np.zeros_like(arr)
        if frozen:
            self.frozen.add(name)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def trainable(self) -> list[str]:
        return [n for n in self.values if n not in self.frozen]

    def size(self) -> int:
        return sum(self.values[n].size for n in self.trainable())

    def bind(self, tape: Tape | None = None) -> dict[str, dict[str, Tensor]]:
        """Tensors for a forward pass, grouped by the prefix before the first dot.

        Trainable parameters are watched on ``tape``; frozen ones are constants.
        """
        groups: dict[str, dict[str, Tensor]] = {}
        for name, arr in self.values.items():
            group, _, key = name.partition(".")
            if tape is not None and name not in self.frozen:
                t = tape.watch(arr)
            else:
                t = Tensor(arr)
            groups.setdefault(group, {})[key] = t
        return groups

    def gradients(self, bound: Mapping[str, Mapping[str, Tensor]], grads: Gradients) -> dict[str, np.ndarray]:
        out = {}
        for name in self.trainable():
            group, _, key = name.partition(".")
            out[name] = grads[bound[group][key]]
        return out

    def copy(self) -> "ParamStore":
        new = ParamStore()
        new.values = {k: v.copy() for k, v in self.values.items()}
        new.accum = {k: v.copy() for k, v in self.accum.items()}
        new.frozen = set(self.frozen)
        return new

    # -- checkpoint I/O --------------------------------------------------------

    MAGIC = b"TLSTMCK\x00"
    VERSION = 1

    def _manifest(self, meta: Mapping | None) -> tuple[dict, bytes]:
        entries, chunks, offset = [], [], 0
        for name, arr in self.values.items():
            rows, cols = arr.shape
            entries.append({"name": name, "rows": rows, "cols": cols, "offset": offset,
                            "frozen": name in self.frozen})
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            offset += arr.size
        manifest = {"version": self.VERSION, "params": entries, "meta": dict(meta or {})}
        return manifest, b"".join(chunks)

    def save(self, path, meta: Mapping | None = None, fmt: str = "binary") -> None:
        """Write a checkpoint: manifest + flat little-endian float64 payload.

        ``fmt="json"`` writes the interchange variant with a base64 payload.
        """
        manifest, payload = self._manifest(meta)
        path = Path(path)
        if fmt == "json":
            manifest["payload"] = base64.b64encode(payload).decode("ascii")
            path.write_text(json.dumps(manifest))
            return
        if fmt != "binary":
            raise ValueError(f"unknown checkpoint format {fmt!r}")
        head = json.dumps(manifest).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            fh.write(struct.pack("<II", self.VERSION, len(head)))
            fh.write(head)
            fh.write(payload)

    @classmethod
    def load(cls, path) -> tuple["ParamStore", dict]:
        """Read either checkpoint variant; returns the store and its metadata."""
        raw = Path(path).read_bytes()
        if raw.startswith(cls.MAGIC):
            version, n = struct.unpack_from("<II", raw, len(cls.MAGIC))
            start = len(cls.MAGIC) + 8
            manifest = json.loads(raw[start : start + n].decode("utf-8"))
            payload = raw[start + n :]
        elif raw.lstrip()[:1] == b"{":
            manifest = json.loads(raw.decode("utf-8"))
            version = manifest.get("version")
            payload = base64.b64decode(manifest["payload"])
        else:
            raise ValueError(f"{path}: not a checkpoint file")
        if version != cls.VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        flat = np.frombuffer(payload, dtype="<f8")
        store = cls()
        for e in manifest["params"]:
            size = e["rows"] * e["cols"]
            chunk = flat[e["offset"] : e["offset"] + size]
            if chunk.size != size:
                raise ValueError(f"{path}: payload truncated at {e['name']!r}")
            store.add(e["name"], chunk.reshape(e["rows"], e["cols"]).astype(np.float64),
                      frozen=e.get("frozen", False))
        return store, manifest.get("meta", {})


# -- verification --------------------------------------------------------------

def grad_check(
    f: Callable[[dict], Tensor],
    params: ParamStore,
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
    batched: bool = False,
    chunk: int = 256,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps bound parameters (see :meth:`ParamStore.bind`) to a scalar
    tensor. Error per entry is ``|a - n| / max(1, |a|, |n|)``.

    With ``batched=True`` the ``2 * chunk`` perturbed copies of a parameter
    are stacked on a leading axis and evaluated in one untracked pass. The
    differences are the same; ``f`` must then use tensor operations only.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with Tape() as tape:
        bound = params.bind(tape)
        loss = f(bound)
        if loss.tape is tape:
            analytic = params.gradients(bound, tape.backward(loss))
        else:  # loss does not depend on any parameter
            analytic = {n: np.zeros_like(params[n]) for n in params.trainable()}

    def value() -> float:
        return f(params.bind(None)).item()

    base = value()
    if value() != base:
        raise ConsistencyError("f is not deterministic: two evaluations differ")

    worst = 0.0
    for name in names if names is not None else params.trainable():
        ga = analytic[name].reshape(-1)
        if batched:
            num = _batched_differences(f, params, name, eps, chunk)
        else:
            num = _looped_differences(value, params[name], eps)
        err = np.abs(ga - num) / np.maximum(1.0, np.maximum(np.abs(ga), np.abs(num)))
        worst = max(worst, float(err.max(initial=0.0)))
    return worst


def _looped_differences(value: Callable[[], float], arr: np.ndarray, eps: float) -> np.ndarray:
    flat = arr.reshape(-1)
    num = np.empty(flat.size)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = value()
        flat[k] = orig - eps
        down = value()
        flat[k] = orig
        num[k] = (up - down) / (2.0 * eps)
    return num


def _batched_differences(f, params: ParamStore, name: str, eps: float, chunk: int) -> np.ndarray:
    arr = params[name]
    group, _, key = name.partition(".")
    n = arr.size
    num = np.empty(n)
    for lo in range(0, n, chunk):
        idx = np.arange(lo, min(n, lo + chunk))
        m = idx.size
        pert = np.broadcast_to(arr.reshape(-1), (2 * m, n)).copy()
        pert[np.arange(m), idx] = arr.reshape(-1)[idx] + eps
        pert[m + np.arange(m), idx] = arr.reshape(-1)[idx] - eps
        bound = params.bind(None)
        bound[group][key] = Tensor._wrap(pert.reshape((2 * m,) + arr.shape))
        out = np.asarray(f(bound).data)
        if out.ndim == 2:  # f ignored this parameter
            num[idx] = 0.0
            continue
        out = out.reshape(2 * m)
        num[idx] = (out[:m] - out[m:]) / (2.0 * eps)
    return num
