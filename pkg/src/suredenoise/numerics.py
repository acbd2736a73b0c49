"""NumPy-backed tensors with reverse-mode automatic differentiation.

The engine is deliberately small: every differentiable operation builds a
node that remembers its parents and a vector-Jacobian product, and
``backward()`` replays the graph in reverse topological order. Gradients
accumulate into ``requires_grad`` leaves, so repeated backward passes sum.

Shapes must match exactly for binary elementwise ops; the only broadcasting
allowed is tensor-with-python-scalar. Training code uses float32, all
gradient-check tests use float64.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class RngStream:
    """Deterministic random stream derived from (seed, stream id).

    Backed by numpy's PCG64 seeded via ``SeedSequence([seed, stream_id])``,
    which numpy guarantees to be reproducible across platforms. The same
    (seed, stream id) and draw sequence always yields the same values.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed, self.stream_id]))
        )

    def child(self, stream_id: int) -> "RngStream":
        """A new independent stream sharing this stream's seed."""
        return RngStream(self.seed, stream_id)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(mean, std, size=shape)

    def rademacher(self, shape) -> np.ndarray:
        return self._gen.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


class Tensor:
    """Dense array with optional gradient tracking.

    ``data`` is always a numpy array. ``grad`` is lazily allocated and
    zeroed; it survives across backward calls so gradients accumulate until
    ``zero_grad`` is called.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _vjp: Callable | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.size == 0 or any(d < 1 for d in arr.shape):
            raise ValueError(f"invalid tensor shape {arr.shape}: every extent must be >= 1")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- graph construction helpers --------------------------------------

    def _tracked(self) -> bool:
        return self.requires_grad or self._vjp is not None

    def backward(self) -> None:
        """Populate ``grad`` of every requires_grad leaf reachable from this
        scalar. Accumulates into existing grads."""
        if self.size != 1:
            raise ValueError("backward requires a scalar loss tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p._tracked() and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent._tracked():
                    continue
                acc = grads.get(id(parent))
                if acc is None:
                    grads[id(parent)] = pg.astype(parent.dtype, copy=True)
                else:
                    acc += pg

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_pair(a: Tensor, b) -> tuple[Tensor, Tensor | float]:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    elif not np.isscalar(b):
        raise TypeError("operand must be a Tensor or scalar")
    return a, b


def add(a: Tensor, b) -> Tensor:
    a, b = _as_pair(a, b)
    if isinstance(b, Tensor):
        return Tensor(a.data + b.data, _parents=(a, b), _vjp=lambda g: (g, g))
    return Tensor(a.data + b, _parents=(a,), _vjp=lambda g: (g,))


def sub(a: Tensor, b) -> Tensor:
    a, b = _as_pair(a, b)
    if isinstance(b, Tensor):
        return Tensor(a.data - b.data, _parents=(a, b), _vjp=lambda g: (g, -g))
    return Tensor(a.data - b, _parents=(a,), _vjp=lambda g: (g,))


def mul(a: Tensor, b) -> Tensor:
    a, b = _as_pair(a, b)
    if isinstance(b, Tensor):
        return Tensor(a.data * b.data, _parents=(a, b),
                      _vjp=lambda g: (g * b.data, g * a.data))
    return scale(a, float(b))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return Tensor(a.data * s, _parents=(a,), _vjp=lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    # gradient at exactly zero is defined as 0
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0.0), _parents=(a,),
                  _vjp=lambda g: (g * mask,))


def reduce_sum(a: Tensor) -> Tensor:
    return Tensor(np.array(a.data.sum()), _parents=(a,),
                  _vjp=lambda g: (np.broadcast_to(g, a.shape).copy(),))


def reduce_mean(a: Tensor) -> Tensor:
    n = a.size
    return Tensor(np.array(a.data.mean()), _parents=(a,),
                  _vjp=lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def sq_norm(a: Tensor) -> Tensor:
    """Sum of squared entries, differentiable (gradient 2v)."""
    return Tensor(np.array((a.data * a.data).sum()), _parents=(a,),
                  _vjp=lambda g: (g * 2.0 * a.data,))


def tensor_randn(shape: Sequence[int], rng: RngStream, mean: float = 0.0,
                 std: float = 1.0, dtype=np.float64) -> Tensor:
    if std < 0:
        raise ValueError("std must be >= 0")
    shape = tuple(int(d) for d in shape)
    if any(d < 1 for d in shape):
        raise ValueError(f"invalid shape {shape}")
    return Tensor(rng.normal(shape, mean, std), dtype=dtype)


# -- convolution ------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N,C,H,W) zero-padded to 'same', unfolded to (N*H*W, C*k*k)."""
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    # (N,C,H,W,k,k) -> (N,H,W,C,k,k)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * h * w, c * k * k), (n, c, h, w)


def _col2im(cols: np.ndarray, shape: tuple, k: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add columns back to (N,C,H,W)."""
    n, c, h, w = shape
    p = k // 2
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    cols = cols.reshape(n, h, w, c, k, k)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + h, j:j + w] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out[:, :, p:p + h, p:p + w]


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """2-D cross-correlation, zero 'same' padding, stride 1.

    x: (N,C,H,W), kernels: (O,C,k,k), bias: (O,). Output (N,O,H,W),
    differentiable w.r.t. all three inputs.
    """
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OCkk kernels")
    n, c, h, w = x.shape
    o, ck, kh, kw = kernels.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError("kernel must be square with odd spatial size")
    if ck != c:
        raise ValueError(f"channel mismatch: input has {c}, kernels expect {ck}")
    if bias.shape != (o,):
        raise ValueError(f"bias must have shape ({o},)")
    k = kh
    cols, in_shape = _im2col(x.data, k)
    wmat = kernels.data.reshape(o, c * k * k)
    out = cols @ wmat.T + bias.data
    out = out.reshape(n, h, w, o).transpose(0, 3, 1, 2)

    def vjp(g: np.ndarray):
        gflat = g.transpose(0, 2, 3, 1).reshape(n * h * w, o)
        dw = (gflat.T @ cols).reshape(o, c, k, k)
        db = gflat.sum(axis=0)
        dx = _col2im(gflat @ wmat, in_shape, k)
        return dx, dw, db

    return Tensor(np.ascontiguousarray(out), _parents=(x, kernels, bias), _vjp=vjp)


# -- finite differences ------------------------------------------------------

def finite_diff_grad(f: Callable[[Tensor], float], at: Tensor,
                     h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar-valued function, coordinate
    by coordinate. The verification oracle; intentionally independent of
    the autodiff path."""
    if h <= 0:
        raise ValueError("step h must be > 0")
    def evaluate(arr: np.ndarray) -> float:
        out = f(Tensor(arr.copy()))
        return out.item() if isinstance(out, Tensor) else float(out)

    x = at.data.astype(np.float64).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate(x)
        flat[i] = orig - h
        fm = evaluate(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
