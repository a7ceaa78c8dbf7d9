"""Dense 2-D/3-D arrays, resampling, and a small reverse-mode gradient tape.

Sampling convention (used by every resampler in this library): pixel centers
sit at integer coordinates, and an output pixel i samples the source at
position (i + 0.5) * src / out - 0.5 (align-corners=false). Nearest-neighbor
rounds that position half-down and clamps to the border; bilinear blends the
two straddling samples and clamps at the border. Resampling to the source's
own size is bit-exact for both modes.

The gradient tape records a closed set of primitives (add, mul with numpy
broadcasting, log, sqrt, sum/mean, softmax, cumsum, reshape, channel concat,
bilinear resample). Values are float64 throughout; a tape is single-owner and
consumed by its one backward pass.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import DimensionError, NumericalFailure, TapeStateError

__all__ = [
    "Plane2D",
    "FeatureStack",
    "GradTape",
    "Var",
    "backward",
    "resample_nearest",
    "resample_bilinear",
    "concat_channels",
    "nearest_index",
    "bilinear_coeffs",
    "concat_vars",
    "round_half_up",
]


def round_half_up(x: float) -> int:
    """Round to nearest integer, ties away from the floor (0.5 -> 1)."""
    return int(np.floor(x + 0.5))


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------

class Plane2D:
    """A read-only H×W grid of float64 values, all finite."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionError(f"Plane2D needs a 2-D array, got ndim={arr.ndim}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionError(f"Plane2D dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericalFailure("Plane2D values must be finite")
        arr.flags.writeable = False
        self.data = arr

    @classmethod
    def full(cls, height: int, width: int, value: float) -> "Plane2D":
        return cls(np.full((height, width), value, dtype=np.float64))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def to_array(self) -> np.ndarray:
        """Mutable copy of the underlying values."""
        return np.array(self.data)

    def __repr__(self):
        return f"Plane2D({self.height}x{self.width})"


class FeatureStack:
    """An ordered set of same-sized planes (channel-major feature map)."""

    __slots__ = ("planes",)

    def __init__(self, planes):
        planes = tuple(planes)
        for p in planes:
            if not isinstance(p, Plane2D):
                raise DimensionError("FeatureStack planes must be Plane2D")
        if planes:
            h, w = planes[0].shape
            for p in planes[1:]:
                if p.shape != (h, w):
                    raise DimensionError(
                        f"FeatureStack planes disagree on size: {p.shape} vs {(h, w)}"
                    )
        self.planes = planes

    @classmethod
    def from_array(cls, arr) -> "FeatureStack":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 3:
            raise DimensionError(f"FeatureStack.from_array needs (C,H,W), got {arr.shape}")
        return cls(Plane2D(arr[c]) for c in range(arr.shape[0]))

    @property
    def channels(self) -> int:
        return len(self.planes)

    @property
    def height(self):
        return self.planes[0].height if self.planes else None

    @property
    def width(self):
        return self.planes[0].width if self.planes else None

    def as_array(self) -> np.ndarray:
        """Values as a (C,H,W) array (copy)."""
        if not self.planes:
            return np.zeros((0, 0, 0))
        return np.stack([p.data for p in self.planes])

    def __repr__(self):
        return f"FeatureStack({self.channels}x{self.height}x{self.width})"


# ---------------------------------------------------------------------------
# Resampling kernels
# ---------------------------------------------------------------------------

@lru_cache(maxsize=1024)
def _nearest_index_cached(n_src: int, n_out: int) -> np.ndarray:
    pos = (np.arange(n_out) + 0.5) * (n_src / n_out) - 0.5
    idx = np.clip(np.ceil(pos - 0.5).astype(np.int64), 0, n_src - 1)
    idx.flags.writeable = False
    return idx


def nearest_index(n_src: int, n_out: int) -> np.ndarray:
    """Source index per output index, round-half-down, clamped to the border.

    Cached and returned read-only; resampling the same sizes repeatedly
    (every training step) reuses the index map.
    """
    if n_src < 1 or n_out < 1:
        raise DimensionError(f"resampling needs positive sizes, got {n_src}->{n_out}")
    return _nearest_index_cached(int(n_src), int(n_out))


@lru_cache(maxsize=1024)
def _bilinear_coeffs_cached(n_src: int, n_out: int):
    pos = (np.arange(n_out) + 0.5) * (n_src / n_out) - 0.5
    base = np.floor(pos)
    t = pos - base
    i0 = np.clip(base.astype(np.int64), 0, n_src - 1)
    i1 = np.clip(base.astype(np.int64) + 1, 0, n_src - 1)
    for a in (i0, i1, t):
        a.flags.writeable = False
    return i0, i1, t


def bilinear_coeffs(n_src: int, n_out: int):
    """Per-output (lo index, hi index, hi weight), border-clamped, cached."""
    if n_src < 1 or n_out < 1:
        raise DimensionError(f"resampling needs positive sizes, got {n_src}->{n_out}")
    return _bilinear_coeffs_cached(int(n_src), int(n_out))


def _nearest_take(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resample on the first two axes; any dtype, pure copy."""
    yi = nearest_index(arr.shape[0], out_h)
    xi = nearest_index(arr.shape[1], out_w)
    return arr[yi[:, None], xi[None, :]]


def _bilinear_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample on the last two axes of a float array.

    Computed as nested lerps and clamped to the corner hull, so constants are
    preserved bit-exactly and the output range never escapes the input range.
    """
    h, w = arr.shape[-2:]
    y0, y1, ty = bilinear_coeffs(h, out_h)
    x0, x1, tx = bilinear_coeffs(w, out_w)
    g00 = arr[..., y0[:, None], x0[None, :]]
    g01 = arr[..., y0[:, None], x1[None, :]]
    g10 = arr[..., y1[:, None], x0[None, :]]
    g11 = arr[..., y1[:, None], x1[None, :]]
    wy = ty[:, None]
    wx = tx[None, :]
    top = g00 + wx * (g01 - g00)
    bot = g10 + wx * (g11 - g10)
    out = top + wy * (bot - top)
    lo = np.minimum(np.minimum(g00, g01), np.minimum(g10, g11))
    hi = np.maximum(np.maximum(g00, g01), np.maximum(g10, g11))
    return np.minimum(np.maximum(out, lo), hi)


def resample_nearest(src: Plane2D, out_h: int, out_w: int) -> Plane2D:
    """Nearest-neighbor resample; values are copied, never blended."""
    return Plane2D(_nearest_take(src.data, out_h, out_w))


def resample_bilinear(src: Plane2D, out_h: int, out_w: int) -> Plane2D:
    """Bilinear resample with border clamp."""
    return Plane2D(_bilinear_array(src.data, out_h, out_w))


def concat_channels(a: FeatureStack, b: FeatureStack) -> FeatureStack:
    """Stack b's channels after a's; both must share height/width."""
    if a.channels and b.channels and (a.height, a.width) != (b.height, b.width):
        raise DimensionError(
            f"concat_channels size mismatch: {(a.height, a.width)} vs {(b.height, b.width)}"
        )
    return FeatureStack(a.planes + b.planes)


# ---------------------------------------------------------------------------
# Reverse-mode tape
# ---------------------------------------------------------------------------

class Var:
    """A float64 array recorded on a GradTape.

    Supports +, -, * (with Var, scalar or ndarray operands, numpy
    broadcasting rules) plus the method primitives below. After the owning
    tape's backward pass, leaf parameters expose their adjoint in .grad.
    """

    __slots__ = ("tape", "value", "name", "grad", "_parents", "_vjp")

    def __init__(self, tape, value, parents=(), vjp=None, name=None):
        self.tape = tape
        self.value = np.asarray(value, dtype=np.float64)
        self.name = name
        self.grad = None
        self._parents = tuple(parents)
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        a, b = self, _as_operand(other)
        if isinstance(b, Var):
            _same_tape(a, b)
            return self.tape._record(
                a.value + b.value, (a, b),
                lambda adj: (_unbroadcast(adj, a.shape), _unbroadcast(adj, b.shape)),
            )
        return self.tape._record(
            a.value + b, (a,), lambda adj: (_unbroadcast(adj, a.shape),)
        )

    __radd__ = __add__

    def __mul__(self, other):
        a, b = self, _as_operand(other)
        if isinstance(b, Var):
            _same_tape(a, b)
            return self.tape._record(
                a.value * b.value, (a, b),
                lambda adj: (
                    _unbroadcast(adj * b.value, a.shape),
                    _unbroadcast(adj * a.value, b.shape),
                ),
            )
        return self.tape._record(
            a.value * b, (a,), lambda adj: (_unbroadcast(adj * b, a.shape),)
        )

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)

    def __sub__(self, other):
        return self + (-1.0) * _as_operand(other)

    def __rsub__(self, other):
        return (-self) + other

    # -- primitives ---------------------------------------------------------

    def log(self) -> "Var":
        x = self.value
        return self.tape._record(np.log(x), (self,), lambda adj: (adj / x,))

    def sqrt(self, grad_floor: float = 0.0) -> "Var":
        """sqrt of max(x, 0); the adjoint is zeroed where x <= grad_floor."""
        x = self.value
        y = np.sqrt(np.clip(x, 0.0, None))
        def vjp(adj):
            live = x > grad_floor
            return (np.where(live, adj / (2.0 * np.where(live, y, 1.0)), 0.0),)
        return self.tape._record(y, (self,), vjp)

    def sum(self, axis=None) -> "Var":
        x = self.value
        def vjp(adj):
            if axis is None:
                return (np.broadcast_to(adj, x.shape).copy(),)
            return (np.broadcast_to(np.expand_dims(adj, axis), x.shape).copy(),)
        return self.tape._record(np.sum(x, axis=axis), (self,), vjp)

    def mean(self, axis=None) -> "Var":
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def softmax(self, axis: int = 0) -> "Var":
        p = _softmax_forward(self.value, axis)
        return self.tape._record(p, (self,), lambda adj: (_softmax_vjp(p, adj, axis),))

    def cumsum(self, axis: int = 0) -> "Var":
        return self.tape._record(
            np.cumsum(self.value, axis=axis), (self,),
            lambda adj: (np.flip(np.cumsum(np.flip(adj, axis), axis=axis), axis),),
        )

    def reshape(self, shape) -> "Var":
        old = self.value.shape
        return self.tape._record(
            self.value.reshape(shape), (self,), lambda adj: (adj.reshape(old),)
        )

    def resample_bilinear(self, out_h: int, out_w: int) -> "Var":
        """Bilinear resample on the last two axes, differentiable."""
        src_shape = self.value.shape
        h, w = src_shape[-2:]
        y0, y1, ty = bilinear_coeffs(h, out_h)
        x0, x1, tx = bilinear_coeffs(w, out_w)
        out = _bilinear_array(self.value, out_h, out_w)
        return self.tape._record(
            out, (self,),
            lambda adj: (_bilinear_vjp(adj, src_shape, y0, y1, ty, x0, x1, tx),),
        )

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ""
        return f"Var{tag}(shape={self.value.shape})"


def concat_vars(parts, axis: int = 0) -> Var:
    """Concatenate Vars (and constant arrays) along an axis, differentiable."""
    vars_ = [p for p in parts if isinstance(p, Var)]
    if not vars_:
        raise TapeStateError("concat_vars needs at least one Var")
    tape = vars_[0].tape
    for v in vars_[1:]:
        _same_tape(vars_[0], v)
    values = [p.value if isinstance(p, Var) else np.asarray(p, dtype=np.float64)
              for p in parts]
    out = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)
    var_slots = [i for i, p in enumerate(parts) if isinstance(p, Var)]

    def vjp(adj):
        pieces = []
        for i in var_slots:
            sl = [slice(None)] * adj.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(adj[tuple(sl)])
        return tuple(pieces)

    return tape._record(out, tuple(vars_), vjp)


class GradTape:
    """Ordered record of primitive ops; one forward pass, one backward pass."""

    def __init__(self):
        self._nodes: list[Var] = []
        self._param_names: set[str] = set()
        self._params: list[Var] = []
        self._consumed = False

    def param(self, value, name: str) -> Var:
        """Register a leaf parameter whose gradient backward() will report."""
        if self._consumed:
            raise TapeStateError("tape already consumed")
        if name in self._param_names:
            raise TapeStateError(f"duplicate parameter name {name!r}")
        v = Var(self, value, name=name)
        if not np.all(np.isfinite(v.value)):
            raise NumericalFailure(f"parameter {name!r} has non-finite values")
        self._param_names.add(name)
        self._params.append(v)
        self._nodes.append(v)
        return v

    def constant(self, value) -> Var:
        """Lift a value onto the tape without tracking its gradient."""
        if self._consumed:
            raise TapeStateError("tape already consumed")
        v = Var(self, value)
        self._nodes.append(v)
        return v

    def _record(self, value, parents, vjp) -> Var:
        if self._consumed:
            raise TapeStateError("tape already consumed")
        v = Var(self, value, parents=parents, vjp=vjp)
        self._nodes.append(v)
        return v

    def backward(self, loss: Var, adjoint: float = 1.0) -> dict:
        """Reverse sweep from a scalar loss; returns {param name: gradient}.

        Consumes the tape: a second call (or a call on a fresh tape with no
        recorded forward pass) raises TapeStateError.
        """
        if self._consumed:
            raise TapeStateError("tape already consumed")
        if not self._nodes:
            raise TapeStateError("backward called before any forward pass")
        if not isinstance(loss, Var) or loss.tape is not self:
            raise TapeStateError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise TapeStateError(f"loss must be scalar, got shape {loss.value.shape}")
        self._consumed = True

        adjoints = {id(loss): np.broadcast_to(
            np.asarray(adjoint, dtype=np.float64), loss.value.shape).copy()}
        for node in reversed(self._nodes):
            adj = adjoints.pop(id(node), None)
            if adj is None:
                continue
            if node.name is not None:
                node.grad = adj
            if node._vjp is None:
                continue
            for parent, contrib in zip(node._parents, node._vjp(adj)):
                contrib = np.asarray(contrib, dtype=np.float64)
                prev = adjoints.get(id(parent))
                adjoints[id(parent)] = contrib if prev is None else prev + contrib
        return {
            p.name: (p.grad if p.grad is not None else np.zeros_like(p.value))
            for p in self._params
        }


def backward(tape: GradTape, loss: Var, adjoint: float = 1.0) -> dict:
    """Run the tape's reverse sweep (see GradTape.backward)."""
    return tape.backward(loss, adjoint)


# ---------------------------------------------------------------------------
# vjp helpers (module-level so tests can fault-inject by monkeypatching)
# ---------------------------------------------------------------------------

def _softmax_forward(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)

def _softmax_vjp(p, adj, axis):
    return p * (adj - np.sum(p * adj, axis=axis, keepdims=True))

def _bilinear_vjp(adj, src_shape, y0, y1, ty, x0, x1, tx):
    h, w = src_shape[-2:]
    lead = int(np.prod(src_shape[:-2])) if len(src_shape) > 2 else 1
    out_h, out_w = adj.shape[-2:]
    adj_flat = adj.reshape(lead, out_h * out_w)
    grad = np.zeros((lead, h * w))
    wy1 = ty[:, None]
    wx1 = tx[None, :]
    corners = (
        (y0, x0, (1.0 - wy1) * (1.0 - wx1)),
        (y0, x1, (1.0 - wy1) * wx1),
        (y1, x0, wy1 * (1.0 - wx1)),
        (y1, x1, wy1 * wx1),
    )
    for yy, xx, wgt in corners:
        lin = (yy[:, None] * w + xx[None, :]).ravel()
        wf = wgt.ravel()
        for c in range(lead):
            grad[c] += np.bincount(lin, weights=adj_flat[c] * wf, minlength=h * w)
    return grad.reshape(src_shape)


def _as_operand(other):
    if isinstance(other, Var):
        return other
    return np.asarray(other, dtype=np.float64)

def _same_tape(a: Var, b: Var):
    if a.tape is not b.tape:
        raise TapeStateError("operands live on different tapes")

def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the operand's shape."""
    grad = np.asarray(grad)
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)
