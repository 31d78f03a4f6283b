"""Small dense tensor engine with reverse-mode differentiation.

Everything in the decoder, losses and encoder is built from the ops in this
module. Values live in numpy arrays; each op records a closure that maps the
output gradient to gradients of its inputs. Binary ops only broadcast by
leading-dimension expansion (the smaller shape must be a suffix of the larger
one); anything else needs an explicit :func:`broadcast_to` or reshape.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float32


class ShapeError(ValueError):
    pass


def get_dtype():
    return _DTYPE


def set_dtype(dtype) -> None:
    global _DTYPE
    _DTYPE = np.dtype(dtype).type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default scalar type (float32 for training, float64 for checks)."""
    old = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator (Philox) keyed by a run seed plus optional stream keys."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), *keys])))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _leading_shape(sa: tuple, sb: tuple, op: str) -> tuple:
    if sa == sb:
        return sa
    short, long = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long[len(long) - len(short):] == short:
        return long
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb} (only leading-dimension expansion is allowed)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _leading_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _leading_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _leading_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _leading_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b), lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), the stable building block for logit-space BCE."""
    a = as_tensor(a)
    ad = a.data
    return _node(np.logaddexp(0.0, ad).astype(ad.dtype), (a,), lambda g: (g * _sigmoid(ad),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def broadcast_to(a, shape) -> Tensor:
    """Explicit numpy-style broadcast (the only way to expand size-1 axes)."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from exc
    old = a.shape

    def bw(g):
        g = _unbroadcast(g, old)
        axes = tuple(i for i, (o, n) in enumerate(zip(old, g.shape)) if o == 1 and n != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _node(np.ascontiguousarray(out), (a,), bw)


def take(a, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back into place."""
    a = as_tensor(a)
    shape = a.shape

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(i is Ellipsis or isinstance(i, (slice, int)) for i in idx)

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in tensors]} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, lambda g: tuple(np.split(g, splits, axis=ax)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors]
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------- reductions


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return reduce_sum(a, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Batched matmul over the last two axes; leading axes follow the suffix rule."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _leading_shape(a.shape[:-2], b.shape[:-2], "matmul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(ad @ bd, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _node(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def l2_normalize(a, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """v / max(|v|, eps) along ``axis``; below eps the norm is treated as constant."""
    a = as_tensor(a)
    ad = a.data
    norm = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps)
    out = ad / denom

    def bw(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(big, (g - out * proj) / denom, g / denom),)

    return _node(out, (a,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data

    def bw(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, beta.shape)

    return _node(xhat * gd + beta.data, (x, gamma, beta), bw)


def bilinear_gather(grid, loc) -> Tensor:
    """Sample ``grid`` (..., h, w, c) at continuous (row, col) locations (..., n, 2).

    Integer coordinates address cell centres. Corners falling outside
    [0, h-1] x [0, w-1] contribute zero.
    """
    grid, loc = as_tensor(grid), as_tensor(loc)
    if grid.ndim < 3 or loc.shape[-1] != 2 or grid.shape[:-3] != loc.shape[:-2]:
        raise ShapeError(f"bilinear_gather: incompatible shapes grid {grid.shape} and locations {loc.shape}")
    lead = grid.shape[:-3]
    h, w, c = grid.shape[-3:]
    n = loc.shape[-2]
    nb = int(np.prod(lead)) if lead else 1
    gd = grid.data.reshape(nb * h * w, c)
    ld = loc.data.reshape(nb, n, 2)

    r, q = ld[..., 0], ld[..., 1]
    r0, q0 = np.floor(r), np.floor(q)
    fr, fq = r - r0, q - q0
    r0, q0 = r0.astype(np.int64), q0.astype(np.int64)
    base = (np.arange(nb) * h * w)[:, None]
    corners = []
    for dr, dq, wgt, dw_dr, dw_dq in (
        (0, 0, (1 - fr) * (1 - fq), -(1 - fq), -(1 - fr)),
        (0, 1, (1 - fr) * fq, -fq, (1 - fr)),
        (1, 0, fr * (1 - fq), (1 - fq), -fr),
        (1, 1, fr * fq, fq, fr),
    ):
        ri, qi = r0 + dr, q0 + dq
        valid = (ri >= 0) & (ri < h) & (qi >= 0) & (qi < w)
        lin = base + np.clip(ri, 0, h - 1) * w + np.clip(qi, 0, w - 1)
        vals = gd[lin] * valid[..., None]
        corners.append((lin, valid, wgt, dw_dr, dw_dq, vals))
    out = sum(wgt[..., None] * vals for _, _, wgt, _, _, vals in corners)

    def bw(g):
        g = g.reshape(nb, n, c)
        ggrid = np.zeros_like(gd)
        gloc = np.zeros_like(ld)
        for lin, valid, wgt, dw_dr, dw_dq, vals in corners:
            np.add.at(ggrid, lin.reshape(-1), (g * (wgt * valid)[..., None]).reshape(-1, c))
            gv = (g * vals).sum(-1)
            gloc[..., 0] += gv * dw_dr
            gloc[..., 1] += gv * dw_dq
        return ggrid.reshape(grid.shape), gloc.reshape(loc.shape)

    return _node(out.reshape(lead + (n, c)).astype(gd.dtype), (grid, loc), bw)


# ---------------------------------------------------------------- differentiation


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    The graph is consumed: interior nodes drop their closures and gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=parent.data.dtype)
            if g.shape != parent.shape:
                g = g.reshape(parent.shape)
            parent.grad = g if parent.grad is None else parent.grad + g
    for node in order:
        if node._parents:
            node._parents = ()
            node._backward = None
            node.grad = None


def fd_check(
    f: Callable[..., Tensor],
    at: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    coords: Iterable[tuple[int, int]] | None = None,
    floor: float = 1e-8,
) -> float:
    """Worst relative error between backward() and central differences.

    ``at`` is one tensor or a list of tensors that ``f`` reads (f is called with
    no arguments when a list is given, with the tensor otherwise). ``coords``
    restricts the check to (tensor index, flat index) pairs. The error is
    |a - n| / max(|a|, |n|, floor).
    """
    single = isinstance(at, Tensor)
    params = [at] if single else list(at)
    call = (lambda: f(params[0])) if single else f
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        p.requires_grad = True
        p.grad = None
    backward(call())
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]
    if coords is None:
        coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    worst = 0.0
    for i, j in coords:
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        fp = float(call().data)
        flat[j] = orig - h
        fm = float(call().data)
        flat[j] = orig
        num = (fp - fm) / (2 * h)
        ana = float(analytic[i].reshape(-1)[j])
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst


# ---------------------------------------------------------------- parameters and optimizer


@dataclass
class ParamStore:
    params: dict[str, Tensor] = field(default_factory=dict)
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        self.exp_avg[name] = np.zeros_like(t.data)
        self.exp_avg_sq[name] = np.zeros_like(t.data)
        self.steps[name] = 0
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> None:
        """Convert parameters and moments in place (tensor identities are kept)."""
        for name, p in self.params.items():
            p.data = p.data.astype(dtype)
            self.exp_avg[name] = self.exp_avg[name].astype(dtype)
            self.exp_avg_sq[name] = self.exp_avg_sq[name].astype(dtype)

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in self.params.values() if p.grad is not None))


def adamw_step(
    store: ParamStore,
    lr: float,
    wd: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    grad_scale: float = 1.0,
) -> list[str]:
    """One AdamW update with decoupled weight decay. Returns names skipped for lack of a gradient."""
    b1, b2 = betas
    skipped = []
    for name, p in store.params.items():
        if p.grad is None:
            skipped.append(name)
            continue
        g = p.grad * grad_scale if grad_scale != 1.0 else p.grad
        store.steps[name] += 1
        t = store.steps[name]
        m = store.exp_avg[name]
        v = store.exp_avg_sq[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data = (p.data * (1 - lr * wd) - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
    return skipped


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return min_lr + 0.5 * (base_lr - min_lr) * (1 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------- checkpoints

_MAGIC = "VECMAP-PARAMS 1"


def save_params(store: ParamStore, path: str | Path) -> None:
    """Text manifest (name, shape, byte offset) followed by little-endian float32 data."""
    lines = [_MAGIC]
    blobs = []
    offset = 0
    for name, p in store.params.items():
        arr = np.asarray(p.data, dtype="<f4")
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"{name} {shape} {offset}")
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    lines.append("END")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    Path(path).write_bytes(header + b"".join(blobs))


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    end = raw.find(b"\nEND\n")
    if not raw.startswith(_MAGIC.encode()) or end < 0:
        raise ValueError(f"{path}: not a parameter checkpoint")
    body = raw[end + 5:]
    out = {}
    for line in raw[:end].decode("utf-8").splitlines()[1:]:
        name, shape, offset = line.split()
        dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        count = int(np.prod(dims)) if dims else 1
        out[name] = np.frombuffer(body, dtype="<f4", count=count, offset=int(offset)).reshape(dims).copy()
    return out


def load_into(store: ParamStore, path: str | Path) -> None:
    values = load_params(path)
    missing = set(store.params) - set(values)
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
    for name, p in store.params.items():
        if values[name].shape != p.shape:
            raise ShapeError(f"checkpoint {name}: shape {values[name].shape} != {p.shape}")
        p.data = values[name].astype(p.data.dtype)
