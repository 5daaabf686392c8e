"""Dense float64 tensors with a dynamic reverse-mode tape.

Every op accepts optional leading batch axes; the trailing axes carry the
documented layout (``[..., C, H, W]`` for feature maps, ``[..., N, C]`` for
token matrices).
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import fft as sp_fft
from scipy import special


class ShapeError(ValueError):
    pass


class SymmetryError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
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
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def power(x: Tensor, k: float) -> Tensor:
    """x ** k for x >= 0 (k >= 1 keeps the derivative finite at 0)."""
    out = np.power(x.data, k)
    return _make(out, (x,), lambda g: (g * k * np.power(x.data, k - 1),))


def absolute(x: Tensor) -> Tensor:
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    z = x.data
    c = np.sqrt(2.0 / np.pi)
    inner = c * (z + 0.044715 * (z * z * z))
    th = np.tanh(inner)
    out = 0.5 * z * (1.0 + th)

    def backward(g):
        d_inner = c * (1.0 + 3 * 0.044715 * z * z)
        return (g * (0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * d_inner),)

    return _make(out, (x,), backward)


def elementwise(x, value: np.ndarray, derivative: np.ndarray) -> Tensor:
    """Wrap an element-wise map already evaluated as ``value`` with its pointwise ``derivative``."""
    x = as_tensor(x)
    if value.shape != x.shape or derivative.shape != x.shape:
        raise ShapeError("element-wise value and derivative must match the input shape")
    return _make(value, (x,), lambda g: (g * derivative,))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return special.expit(z)


def softplus(x: Tensor) -> Tensor:
    z = x.data
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return _make(out, (x,), lambda g: (g * _sigmoid(z),))


def log_sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = -np.logaddexp(0.0, -z)
    return _make(out, (x,), lambda g: (g * _sigmoid(-z),))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data

    def backward(g):
        return (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape))

    return _make(np.where(pick_a, a.data, b.data), (a, b), backward)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data

    def backward(g):
        return (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape))

    return _make(np.where(pick_a, a.data, b.data), (a, b), backward)


def clip_min(x: Tensor, lo: float) -> Tensor:
    return maximum(x, lo)


# reductions and shape ops

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def getitem(x: Tensor, index) -> Tensor:
    def backward(g):
        if _is_basic(index):
            # basic indexing never repeats an element, so assignment suffices
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)
        if isinstance(index, np.ndarray) and index.ndim == 1 and index.dtype.kind in "iu":
            # row gather along axis 0: scatter-add through a one-hot matrix
            onehot = np.zeros((x.shape[0], index.size))
            onehot[index, np.arange(index.size)] = 1.0
            return ((onehot @ g.reshape(index.size, -1)).reshape(x.shape),)
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, xs, backward)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(x, x.shape[:axis % (x.ndim + 1)] + (1,) + x.shape[axis % (x.ndim + 1):])
                   for x in xs], axis=axis)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(np.broadcast_to(x.data, shape).copy(), (x,),
                 lambda g: (_unbroadcast(g, x.shape),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def backward(g):
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return _make(out, (x,), backward)


# spatial primitives

def conv1x1(x, weight, bias=None, exact: bool = True) -> Tensor:
    """Point-wise convolution of ``x[..., Cin, H, W]`` by ``weight[..., Cout, Cin]``.

    Leading axes of ``weight`` and ``bias`` broadcast against those of ``x``,
    which is how per-instance dynamic kernels are applied. ``exact=False``
    uses BLAS, which is several times faster but sums channels in an
    implementation-defined order.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim < 3:
        raise ShapeError(f"conv1x1 expects [..., Cin, H, W], got {x.shape}")
    cin, h, w = x.shape[-3:]
    if weight.ndim < 2 or weight.shape[-1] != cin:
        raise ShapeError(f"weight {weight.shape} does not match {cin} input channels")
    # einsum accumulates channels in ascending order per pixel (BLAS does not),
    # which makes the result reproducible against a per-pixel loop
    if exact:
        out = np.einsum("...oc,...chw->...ohw", weight.data, x.data)
    else:
        xf = x.data.reshape(x.shape[:-2] + (h * w,))
        out = np.matmul(weight.data, xf)
        out = out.reshape(out.shape[:-1] + (h, w))

    def backward(g):
        gf = g.reshape(g.shape[:-2] + (h * w,))
        xf = x.data.reshape(x.shape[:-2] + (h * w,))
        gx = np.matmul(np.swapaxes(weight.data, -1, -2), gf)
        gw = np.matmul(gf, np.swapaxes(xf, -1, -2))
        gx = _unbroadcast(gx.reshape(gx.shape[:-1] + (h, w)), x.shape)
        return gx, _unbroadcast(gw, weight.shape)

    y = _make(out, (x, weight), backward)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape[-1] != weight.shape[-2]:
            raise ShapeError(f"bias {bias.shape} does not match {weight.shape[-2]} outputs")
        y = y + reshape(bias, bias.shape + (1, 1))
    return y


def _upsample_axis(data: np.ndarray, axis: int) -> np.ndarray:
    """x2 along ``axis`` with half-pixel sampling: output 2i samples i - 1/4, 2i+1 samples i + 1/4."""
    x = np.moveaxis(data, axis, -1)
    xp = np.concatenate([x[..., :1], x, x[..., -1:]], axis=-1)   # edge clamp
    lo, mid, hi = xp[..., :-2], xp[..., 1:-1], xp[..., 2:]
    # lerp form keeps constant inputs bit-exact
    even = lo + 0.75 * (mid - lo)
    odd = mid + 0.25 * (hi - mid)
    out = np.stack([even, odd], axis=-1).reshape(x.shape[:-1] + (2 * x.shape[-1],))
    return np.moveaxis(out, -1, axis)


def _upsample_axis_adjoint(g: np.ndarray, axis: int, n: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    gxp = np.zeros(g.shape[:-1] + (n + 2,))
    gxp[..., :-2] += 0.25 * ge
    gxp[..., 1:-1] += 0.75 * (ge + go)
    gxp[..., 2:] += 0.25 * go
    gx = gxp[..., 1:-1].copy()
    gx[..., 0] += gxp[..., 0]
    gx[..., -1] += gxp[..., -1]
    return np.moveaxis(gx, -1, axis)


def resize_bilinear(x, factor: int = 2) -> Tensor:
    """Upsample ``x[..., C, H, W]`` by two with half-pixel (align-corners-false) sampling."""
    x = as_tensor(x)
    if factor != 2:
        raise ShapeError("only factor 2 is supported")
    if x.ndim < 3:
        raise ShapeError(f"resize_bilinear expects [..., C, H, W], got {x.shape}")
    h, w = x.shape[-2:]
    out = _upsample_axis(_upsample_axis(x.data, x.ndim - 2), x.ndim - 1)

    def backward(g):
        g = _upsample_axis_adjoint(g, x.ndim - 1, w)
        return (_upsample_axis_adjoint(g, x.ndim - 2, h),)

    return _make(out, (x,), backward)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 mean pooling with stride 2 on ``[..., C, H, W]``."""
    *lead, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {(h, w)}")
    y = reshape(x, tuple(lead) + (c, h // 2, 2, w // 2, 2))
    return mean(y, axis=(-3, -1))


def space_to_depth(x: Tensor, block: int) -> Tensor:
    """Fold ``block x block`` neighbourhoods into channels: [..., C, H, W] -> [..., C*b*b, H/b, W/b]."""
    *lead, c, h, w = x.shape
    if h % block or w % block:
        raise ShapeError(f"spatial dims {(h, w)} not divisible by {block}")
    n = len(lead)
    y = reshape(x, tuple(lead) + (c, h // block, block, w // block, block))
    y = transpose(y, tuple(range(n)) + (n, n + 2, n + 4, n + 1, n + 3))
    return reshape(y, tuple(lead) + (c * block * block, h // block, w // block))


# spectra

@dataclass
class Spectrum:
    """Complex 2D spectrum stored as separate real and imaginary tensors ``[..., C, H, W]``."""

    real: Tensor
    imag: Tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.real.shape

    def complex(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data


def fft2(x) -> Spectrum:
    """Unnormalized forward DFT over the two trailing axes of ``x[..., C, H, W]``."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"fft2 expects [C, H, W] (optionally batched), got rank {x.ndim}")
    if min(x.shape[-2:]) < 1:
        raise ShapeError("fft2 needs H, W >= 1")
    z = sp_fft.fft2(x.data)
    # the DFT matrix is symmetric, so each part's adjoint is the same part of fft2(g)
    real = _make(z.real.copy(), (x,), lambda g: (sp_fft.fft2(g).real,))
    imag = _make(z.imag.copy(), (x,), lambda g: (sp_fft.fft2(g).imag,))
    return Spectrum(real, imag)


def hermitian_residue(z: np.ndarray) -> float:
    mirrored = np.conj(np.roll(np.flip(z, axis=(-2, -1)), shift=(1, 1), axis=(-2, -1)))
    return float(np.max(np.abs(z - mirrored))) if z.size else 0.0


def ifft2(s: Spectrum, check: bool = True, tol: float = 1e-6) -> Tensor:
    """Inverse DFT scaled by 1/(H*W), returning the real part.

    With ``check`` the input must be Hermitian within ``tol`` and the discarded
    imaginary residue must stay below ``tol``.
    """
    z = s.complex()
    if check:
        residue = hermitian_residue(z)
        scale = max(1.0, float(np.max(np.abs(z)))) if z.size else 1.0
        if residue > tol * scale:
            raise SymmetryError(f"spectrum is not Hermitian: max residue {residue:.3e}")
    y = sp_fft.ifft2(z)
    if check and y.size and np.max(np.abs(y.imag)) > tol * max(1.0, np.max(np.abs(y.real))):
        raise SymmetryError(f"imaginary residue {np.max(np.abs(y.imag)):.3e} after ifft2")

    def backward(g):
        gi = sp_fft.ifft2(g)
        return gi.real, -gi.imag

    return _make(y.real.copy(), (s.real, s.imag), backward)


# parameters and gradient checking

class ParamStore:
    """Ordered mapping of named trainable tensors."""

    def __init__(self, params: dict[str, np.ndarray] | None = None):
        self._params: dict[str, Tensor] = {}
        for k, v in (params or {}).items():
            self.add(k, v)

    def add(self, name: str, value) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def prefixed(self, prefix: str) -> dict[str, Tensor]:
        """Sub-view of parameters under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self._params.items() if k.startswith(p)}

    def tree(self, prefix: str = "") -> dict:
        """Nested dict view splitting names on dots, optionally below ``prefix``."""
        root: dict = {}
        for k, v in (self.prefixed(prefix).items() if prefix else self._params.items()):
            node = root
            *path, leaf = k.split(".")
            for part in path:
                node = node.setdefault(part, {})
            node[leaf] = v
        return root

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self._params.items()}

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) ^ set(state)
        if missing:
            raise KeyError(f"state keys differ: {sorted(missing)}")
        for k, t in self._params.items():
            if state[k].shape != t.shape:
                raise ShapeError(f"{k}: {state[k].shape} != {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)


def grad_check(f: Callable[[], Tensor], params: ParamStore | dict[str, Tensor],
               eps: float = 1e-4, names: Iterable[str] | None = None,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must rebuild the graph from the current parameter values on every call.
    ``max_entries`` caps the number of checked coordinates per parameter
    (chosen at random with ``seed``); ``None`` checks all of them.
    """
    items = dict(params.items())
    if names is not None:
        items = {k: items[k] for k in names}
    for t in items.values():
        t.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite")
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, t in items.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                up = f().item()
            flat[i] = orig - eps
            with no_grad():
                down = f().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
            numeric = (up - down) / (2 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
