"""
Minimal reverse-mode differentiation engine.

Tensors wrap contiguous numpy buffers. Every primitive registered here has a
forward rule and a vector-Jacobian product; `apply_primitive` records a node on
the active `Tape` whenever an input requires a gradient, and `backward` walks
that tape in reverse, accumulating gradients into the leaves.

Two float modes exist: f32 for training and f64 for gradient verification.
"""

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from cache import identity_coords, pad_fold_matrix
from config import Config
from validators import DomainError, ShapeError, ValidationError, validate_same_shape

EPS = 1e-12

_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = threading.local()
_ids = itertools.count()


# ---------------------------------------------------------------------------
# Float mode
# ---------------------------------------------------------------------------

def get_float_mode() -> str:
    mode = getattr(_state, "mode", None)
    if mode is None:
        mode = Config.FLOAT_MODE if Config.FLOAT_MODE in _DTYPES else "f32"
    return mode


def set_float_mode(mode: str) -> None:
    if mode not in _DTYPES:
        raise ValidationError(f"unknown float mode {mode!r} (expected f32 or f64)")
    _state.mode = mode


@contextmanager
def float_mode(mode: str):
    """Temporarily switch the float mode of newly created tensors"""
    previous = getattr(_state, "mode", None)
    set_float_mode(mode)
    try:
        yield
    finally:
        _state.mode = previous


def current_dtype():
    return _DTYPES[get_float_mode()]


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------

class Tensor:
    """n-dimensional float array with an optional gradient slot"""

    __slots__ = ("data", "requires_grad", "grad", "id")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scalar_mul(self, 1.0 / float(other))

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return (
            f"Tensor(shape={self.shape}, dtype={self.data.dtype}, "
            f"requires_grad={self.requires_grad})"
        )


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Create a leaf tensor in the current float mode"""
    array = np.array(data, dtype=dtype or current_dtype(), copy=True, order="C")
    if not np.all(np.isfinite(array)):
        raise DomainError("tensor data must be finite")
    return Tensor(array, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=current_dtype()), requires_grad=requires_grad)


def parameter(data) -> Tensor:
    """Trainable leaf in the current float mode"""
    return tensor(data, requires_grad=True)


@dataclass
class Node:
    kind: str
    inputs: List[Tensor]
    output: Tensor
    saved: Any
    attrs: Dict[str, Any]


@dataclass
class Tape:
    """Ordered record of primitive applications; one per thread"""

    nodes: List[Node] = field(default_factory=list)
    _outputs: Dict[int, int] = field(default_factory=dict)

    def record(self, node: Node) -> None:
        self._outputs[node.output.id] = len(self.nodes)
        self.nodes.append(node)

    def produced(self, t: Tensor) -> bool:
        return t.id in self._outputs

    def reset(self) -> None:
        self.nodes = []
        self._outputs = {}

    def replay(self) -> bool:
        """Recompute every node and report whether outputs match bit-exactly"""
        for node in self.nodes:
            out, _ = PRIMITIVES[node.kind].forward([t.data for t in node.inputs], node.attrs)
            out = out.astype(node.output.data.dtype, copy=False)
            if out.shape != node.output.shape or not np.array_equal(out, node.output.data):
                return False
        return True

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Optional[Tape]:
    """Innermost open tape on this thread, if any"""
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


@contextmanager
def no_tape():
    """Suspend recording, e.g. for frozen feature extraction"""
    stack = getattr(_state, "tapes", None)
    saved = list(stack) if stack else []
    _state.tapes = []
    try:
        yield
    finally:
        _state.tapes = saved


# ---------------------------------------------------------------------------
# Primitive registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Primitive:
    kind: str
    forward: Callable[[List[np.ndarray], Dict[str, Any]], Any]
    vjp: Callable[..., List[Optional[np.ndarray]]]


PRIMITIVES: Dict[str, Primitive] = {}


def register(kind: str):
    """Class decorator registering a primitive with `forward` and `vjp` staticmethods"""
    def wrap(cls):
        PRIMITIVES[kind] = Primitive(kind, cls.forward, cls.vjp)
        return cls
    return wrap


def apply_primitive(kind: str, inputs: Sequence[Tensor], attrs: Optional[Dict[str, Any]] = None) -> Tensor:
    """Evaluate a primitive and record it on the active tape"""
    prim = PRIMITIVES.get(kind)
    if prim is None:
        raise ValidationError(f"unknown primitive kind {kind!r}")
    attrs = attrs or {}
    dtypes = {t.data.dtype for t in inputs}
    if len(dtypes) > 1:
        raise ValidationError(f"{kind}: mixed float modes {sorted(str(d) for d in dtypes)}")
    dtype = inputs[0].data.dtype
    out_data, saved = prim.forward([t.data for t in inputs], attrs)
    out_data = np.asarray(out_data, dtype=dtype)
    if not np.isfinite(out_data).all():
        raise DomainError(f"{kind}: non-finite output (overflow or NaN) for inputs {[t.shape for t in inputs]}")
    if not out_data.flags.c_contiguous:
        out_data = np.ascontiguousarray(out_data)
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(Node(kind, list(inputs), out, saved, attrs))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(leaf) into the grad slot of every requires_grad leaf"""
    if loss.size != 1:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ValidationError("loss was not produced on this tape")

    # recording order is a topological order
    grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output.id, None)
        if g is None:
            continue
        in_grads = PRIMITIVES[node.kind].vjp(
            g, [t.data for t in node.inputs], node.output.data, node.saved, node.attrs
        )
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=t.data.dtype)
            grads[t.id] = grads[t.id] + gi if t.id in grads else gi
            if not tape.produced(t):
                leaves[t.id] = t

    # Accumulate into leaves
    for tid, leaf in leaves.items():
        g = np.array(grads[tid], dtype=leaf.data.dtype, copy=True)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    tape.reset()


def grad_check(f: Callable[[], Tensor], leaves: Sequence[Tensor], step: float = 1e-6,
               seed: int = 0, max_coords: int = 64) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must rebuild its scalar output from `leaves` on every call. Leaf
    buffers are perturbed in place and restored.
    """
    if not 1e-6 <= step <= 1e-3:
        raise ValidationError(f"grad_check step {step} outside [1e-6, 1e-3]")
    for leaf in leaves:
        leaf.grad = None
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    analytic = [
        leaf.grad.reshape(-1).copy() if leaf.grad is not None else np.zeros(leaf.size, dtype=leaf.data.dtype)
        for leaf in leaves
    ]

    # Central differences on a random subset of coordinates
    rng = np.random.default_rng(seed)
    worst = 0.0
    for leaf, grad in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        coords = np.sort(rng.choice(flat.size, size=min(flat.size, max_coords), replace=False))
        for k in coords:
            original = flat[k]
            flat[k] = original + step
            plus = f().item()
            flat[k] = original - step
            minus = f().item()
            flat[k] = original
            numeric = (plus - minus) / (2.0 * step)
            a = float(grad[k])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    return worst


# ---------------------------------------------------------------------------
# Elementwise and linear algebra
# ---------------------------------------------------------------------------

def _sum_to_axis1(g: np.ndarray) -> np.ndarray:
    axes = tuple(i for i in range(g.ndim) if i != 1)
    return g.sum(axis=axes)


def _bias_view(b: np.ndarray, ndim: int) -> np.ndarray:
    return b.reshape((1, -1) + (1,) * (ndim - 2))


@register("add")
class _Add:
    @staticmethod
    def forward(xs, attrs):
        validate_same_shape("add", [x.shape for x in xs])
        return xs[0] + xs[1], None

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        return [g, g]


@register("sub")
class _Sub:
    @staticmethod
    def forward(xs, attrs):
        validate_same_shape("sub", [x.shape for x in xs])
        return xs[0] - xs[1], None

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        return [g, -g]


@register("mul")
class _Mul:
    @staticmethod
    def forward(xs, attrs):
        validate_same_shape("mul", [x.shape for x in xs])
        return xs[0] * xs[1], None

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        return [g * xs[1], g * xs[0]]


@register("scalar_mul")
class _ScalarMul:
    @staticmethod
    def forward(xs, attrs):
        return xs[0] * xs[0].dtype.type(attrs["scalar"]), None

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        return [g * g.dtype.type(attrs["scalar"])]


@register("matmul")
class _Matmul:
    @staticmethod
    def forward(xs, attrs):
        a, b = xs
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible dims {a.shape} @ {b.shape}")
        return a @ b, None

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        a, b = xs
        return [g @ b.T, a.T @ g]


@register("transpose")
class _Transpose:
    @staticmethod
    def forward(xs, attrs):
        if xs[0].ndim != 2:
            raise ShapeError(f"transpose: expected 2-D input, got {xs[0].shape}")
        return xs[0].T, None

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        return [g.T]


@register("reshape")
class _Reshape:
    @staticmethod
    def forward(xs, attrs):
        shape = tuple(attrs["shape"])
        try:
            return xs[0].reshape(shape), None
        except ValueError:
            raise ShapeError(f"reshape: cannot view {xs[0].shape} as {shape}") from None

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        return [g.reshape(xs[0].shape)]


@register("flatten")
class _Flatten:
    @staticmethod
    def forward(xs, attrs):
        return xs[0].reshape(xs[0].shape[0], -1), None

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        return [g.reshape(xs[0].shape)]


@register("roll")
class _Roll:
    @staticmethod
    def forward(xs, attrs):
        return np.roll(xs[0], attrs["shift"], axis=attrs["axis"]), None

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        return [np.roll(g, -attrs["shift"], axis=attrs["axis"])]


@register("add_bias")
class _AddBias:
    @staticmethod
    def forward(xs, attrs):
        x, b = xs
        if x.ndim < 2 or b.shape != (x.shape[1],):
            raise ShapeError(f"add_bias: bias {b.shape} does not match channels of {x.shape}")
        return x + _bias_view(b, x.ndim), None

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        return [g, _sum_to_axis1(g)]


@register("concat")
class _Concat:
    @staticmethod
    def forward(xs, attrs):
        axis = attrs.get("axis", 1)
        ref = list(xs[0].shape)
        for x in xs[1:]:
            other = list(x.shape)
            if len(other) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, other)) if i != axis):
                raise ShapeError(f"concat: {tuple(ref)} and {tuple(other)} differ off axis {axis}")
        return np.concatenate(xs, axis=axis), None

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        axis = attrs.get("axis", 1)
        bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return np.split(g, bounds, axis=axis)


@register("leaky_relu")
class _LeakyRelu:
    @staticmethod
    def forward(xs, attrs):
        slope = xs[0].dtype.type(attrs.get("slope", 0.1))
        return np.where(xs[0] > 0, xs[0], xs[0] * slope), None

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        slope = g.dtype.type(attrs.get("slope", 0.1))
        return [np.where(xs[0] > 0, g, g * slope)]


@register("tanh")
class _Tanh:
    @staticmethod
    def forward(xs, attrs):
        return np.tanh(xs[0]), None

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        return [g * (1 - out * out)]


@register("exp")
class _Exp:
    @staticmethod
    def forward(xs, attrs):
        return np.exp(xs[0]), None

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        return [g * out]


@register("square")
class _Square:
    @staticmethod
    def forward(xs, attrs):
        return xs[0] * xs[0], None

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        return [2 * g * xs[0]]


@register("sqrt")
class _Sqrt:
    @staticmethod
    def forward(xs, attrs):
        eps = attrs.get("eps", EPS)
        if xs[0].size and xs[0].min() < eps:
            raise DomainError(f"sqrt: input {xs[0].min():.3g} below eps={eps}")
        return np.sqrt(xs[0]), None

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        return [g / (2 * out)]


@register("log")
class _Log:
    @staticmethod
    def forward(xs, attrs):
        eps = attrs.get("eps", EPS)
        if xs[0].size and xs[0].min() < eps:
            raise DomainError(f"log: input {xs[0].min():.3g} below eps={eps}")
        return np.log(xs[0]), None

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        return [g / xs[0]]


@register("dropout")
class _Dropout:
    @staticmethod
    def forward(xs, attrs):
        keep = attrs["keep"]
        if keep.shape != xs[0].shape:
            raise ShapeError(f"dropout: mask {keep.shape} vs input {xs[0].shape}")
        scale = xs[0].dtype.type(1.0 / (1.0 - attrs["p"]))
        return np.where(keep, xs[0] * scale, 0), None

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        scale = g.dtype.type(1.0 / (1.0 - attrs["p"]))
        return [np.where(attrs["keep"], g * scale, 0)]


# ---------------------------------------------------------------------------
# Reductions and normalizers
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    return np.broadcast_to(np.expand_dims(g, axes), shape)


def _count(shape: tuple, axis) -> int:
    if axis is None:
        return int(np.prod(shape))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return int(np.prod([shape[a] for a in axes]))


@register("sum")
class _Sum:
    @staticmethod
    def forward(xs, attrs):
        return np.asarray(xs[0].sum(axis=attrs.get("axis"))), None

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        return [_expand_reduced(g, xs[0].shape, attrs.get("axis"))]


@register("mean")
class _Mean:
    @staticmethod
    def forward(xs, attrs):
        return np.asarray(xs[0].mean(axis=attrs.get("axis"))), None

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        axis = attrs.get("axis")
        return [_expand_reduced(g, xs[0].shape, axis) / g.dtype.type(_count(xs[0].shape, axis))]


@register("dot")
class _Dot:
    @staticmethod
    def forward(xs, attrs):
        validate_same_shape("dot", [x.shape for x in xs])
        return np.asarray((xs[0] * xs[1]).sum(axis=attrs.get("axis", -1))), None

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        ge = _expand_reduced(g, xs[0].shape, attrs.get("axis", -1))
        return [ge * xs[1], ge * xs[0]]


@register("softmax")
class _Softmax:
    @staticmethod
    def forward(xs, attrs):
        axis = attrs.get("axis", -1)
        shifted = xs[0] - xs[0].max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=axis, keepdims=True), None

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        axis = attrs.get("axis", -1)
        return [out * (g - (g * out).sum(axis=axis, keepdims=True))]


@register("log_softmax")
class _LogSoftmax:
    """log softmax along `axis`; entries where `mask` is False are excluded from
    the normalizer and produce 0"""

    @staticmethod
    def forward(xs, attrs):
        axis = attrs.get("axis", -1)
        x = xs[0]
        mask = attrs.get("mask")
        if mask is None:
            mask = np.ones(x.shape, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"log_softmax: mask {mask.shape} vs input {x.shape}")
        if not mask.any(axis=axis).all():
            raise DomainError("log_softmax: a row has no unmasked entries")
        z = np.where(mask, x, -np.inf)
        m = z.max(axis=axis, keepdims=True)
        lse = m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))
        return np.where(mask, x - lse, 0), mask

    @staticmethod
    def vjp(g, xs, out, mask, attrs):
        axis = attrs.get("axis", -1)
        gm = np.where(mask, g, 0)
        p = np.where(mask, np.exp(out), 0)
        return [gm - p * gm.sum(axis=axis, keepdims=True)]


@register("logsumexp")
class _LogSumExp:
    """Stable log-sum-exp reduction along `axis` over entries where `mask` is True"""

    @staticmethod
    def forward(xs, attrs):
        axis = attrs.get("axis", -1)
        x = xs[0]
        mask = attrs.get("mask")
        if mask is None:
            mask = np.ones(x.shape, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"logsumexp: mask {mask.shape} vs input {x.shape}")
        if not mask.any(axis=axis).all():
            raise DomainError("logsumexp: a row has no unmasked entries")
        z = np.where(mask, x, -np.inf)
        m = z.max(axis=axis, keepdims=True)
        lse = m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))
        return np.squeeze(lse, axis=axis), (mask, lse)

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        axis = attrs.get("axis", -1)
        mask, lse = saved
        weights = np.where(mask, np.exp(np.where(mask, xs[0], 0) - lse), 0)
        return [np.expand_dims(g, axis) * weights]


@register("l2_normalize")
class _L2Normalize:
    @staticmethod
    def forward(xs, attrs):
        axis = attrs.get("axis", -1)
        eps = xs[0].dtype.type(attrs.get("eps", EPS))
        norm = np.sqrt((xs[0] * xs[0]).sum(axis=axis, keepdims=True) + eps)
        return xs[0] / norm, norm

    @staticmethod
    def vjp(g, xs, out, norm, attrs):
        axis = attrs.get("axis", -1)
        return [(g - out * (g * out).sum(axis=axis, keepdims=True)) / norm]


@register("group_norm")
class _GroupNorm:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        groups = attrs.get("groups", 1)
        eps = x.dtype.type(attrs.get("eps", 1e-5))
        if x.ndim < 2 or x.shape[1] % groups:
            raise ShapeError(f"group_norm: {x.shape} channels not divisible by groups={groups}")
        b, c = x.shape[:2]
        xg = x.reshape(b, groups, -1)
        mu = xg.mean(axis=-1, keepdims=True)
        inv = 1 / np.sqrt(xg.var(axis=-1, keepdims=True) + eps)
        xhat = ((xg - mu) * inv).reshape(x.shape)
        out = xhat
        if len(xs) == 3:
            w, bias = xs[1], xs[2]
            if w.shape != (c,) or bias.shape != (c,):
                raise ShapeError(f"group_norm: affine {w.shape}/{bias.shape} vs channels {c}")
            out = xhat * _bias_view(w, x.ndim) + _bias_view(bias, x.ndim)
        return out, (xhat, inv)

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        xhat, inv = saved
        x = xs[0]
        groups = attrs.get("groups", 1)
        grads = []
        dxhat = g
        if len(xs) == 3:
            dxhat = g * _bias_view(xs[1], x.ndim)
        b = x.shape[0]
        dg = dxhat.reshape(b, groups, -1)
        xh = xhat.reshape(b, groups, -1)
        dx = inv * (dg - dg.mean(axis=-1, keepdims=True) - xh * (dg * xh).mean(axis=-1, keepdims=True))
        grads.append(dx.reshape(x.shape))
        if len(xs) == 3:
            grads.append(_sum_to_axis1(g * xhat))
            grads.append(_sum_to_axis1(g))
        return grads


# ---------------------------------------------------------------------------
# Spatial primitives
# ---------------------------------------------------------------------------

def _pool(x: np.ndarray, kh: int, kw: int, kind: str) -> np.ndarray:
    if x.ndim != 4 or x.shape[2] % kh or x.shape[3] % kw:
        raise ShapeError(f"{kind}: input {x.shape} not divisible by window {kh}x{kw}")
    b, c, h, w = x.shape
    return x.reshape(b, c, h // kh, kh, w // kw, kw).mean(axis=(3, 5))


def _unpool(g: np.ndarray, kh: int, kw: int) -> np.ndarray:
    return np.repeat(np.repeat(g, kh, axis=2), kw, axis=3) / g.dtype.type(kh * kw)


@register("avg_pool2d")
class _AvgPool2d:
    @staticmethod
    def forward(xs, attrs):
        k = attrs.get("kernel", 2)
        return _pool(xs[0], k, k, "avg_pool2d"), None

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        k = attrs.get("kernel", 2)
        return [_unpool(g, k, k)]


@register("adaptive_avg_pool2d")
class _AdaptiveAvgPool2d:
    @staticmethod
    def forward(xs, attrs):
        size = attrs.get("output_size", 1)
        h, w = xs[0].shape[2:]
        if h % size or w % size:
            raise ShapeError(f"adaptive_avg_pool2d: {h}x{w} not divisible by output size {size}")
        return _pool(xs[0], h // size, w // size, "adaptive_avg_pool2d"), None

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        size = attrs.get("output_size", 1)
        h, w = xs[0].shape[2:]
        return [_unpool(g, h // size, w // size)]


def _pad(x: np.ndarray, p: int, periodic: bool) -> np.ndarray:
    if p == 0:
        return x
    mode = "wrap" if periodic else "constant"
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode=mode)


def _unpad(g: np.ndarray, h: int, w: int, p: int, periodic: bool) -> np.ndarray:
    """Fold the gradient of a padded tensor back onto the original grid"""
    if p == 0:
        return g
    fh = pad_fold_matrix(h, p, periodic).astype(g.dtype)
    fw = pad_fold_matrix(w, p, periodic).astype(g.dtype)
    return np.matmul(np.matmul(fh, g), fw.T)


def _window(offset: int, stride: int, count: int) -> slice:
    return slice(offset, offset + stride * (count - 1) + 1, stride)


@register("conv2d")
class _Conv2d:
    """x [B,Cin,H,W] * w [Cout,Cin,kh,kw] (+ bias [Cout]); output size
    floor((H + 2p - k)/s) + 1"""

    @staticmethod
    def forward(xs, attrs):
        x, w = xs[0], xs[1]
        s = attrs.get("stride", 1)
        p = attrs.get("padding", 0)
        periodic = attrs.get("pad_mode", "zeros") == "periodic"
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
        b, cin, h, wd = x.shape
        kh, kw = w.shape[2:]
        ho = (h + 2 * p - kh) // s + 1
        wo = (wd + 2 * p - kw) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
        # im2col
        xp = _pad(x, p, periodic)
        cols = np.empty((b, cin, kh, kw, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = xp[:, :, _window(i, s, ho), _window(j, s, wo)]
        out = np.tensordot(cols, w, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
        if len(xs) == 3:
            if xs[2].shape != (w.shape[0],):
                raise ShapeError(f"conv2d: bias {xs[2].shape} vs {w.shape[0]} output channels")
            out = out + _bias_view(xs[2], 4)
        return out, cols

    @staticmethod
    def vjp(g, xs, out, cols, attrs):
        x, w = xs[0], xs[1]
        s = attrs.get("stride", 1)
        p = attrs.get("padding", 0)
        periodic = attrs.get("pad_mode", "zeros") == "periodic"
        b, cin, h, wd = x.shape
        kh, kw = w.shape[2:]
        ho, wo = g.shape[2:]
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        gcols = np.tensordot(g, w, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
        gxp = np.zeros((b, cin, h + 2 * p, wd + 2 * p), dtype=x.dtype)
        # col2im
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, _window(i, s, ho), _window(j, s, wo)] += gcols[:, :, i, j]
        grads = [_unpad(gxp, h, wd, p, periodic), gw]
        if len(xs) == 3:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads


@register("transposed_conv2d")
class _TransposedConv2d:
    """x [B,Cin,H,W], w [Cin,Cout,kh,kw] (+ bias [Cout]); output size
    (H - 1)*s - 2p + k"""

    @staticmethod
    def forward(xs, attrs):
        x, w = xs[0], xs[1]
        s = attrs.get("stride", 1)
        p = attrs.get("padding", 0)
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"transposed_conv2d: input {x.shape} incompatible with kernel {w.shape}")
        b, cin, h, wd = x.shape
        cout, kh, kw = w.shape[1:]
        hf = (h - 1) * s + kh
        wf = (wd - 1) * s + kw
        if hf - 2 * p < 1 or wf - 2 * p < 1:
            raise ShapeError(f"transposed_conv2d: padding {p} consumes the whole output")
        y = np.tensordot(x, w, axes=([1], [0]))  # [B,H,W,Cout,kh,kw]
        full = np.zeros((b, cout, hf, wf), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                full[:, :, _window(i, s, h), _window(j, s, wd)] += y[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        out = full[:, :, p:hf - p, p:wf - p]
        if len(xs) == 3:
            if xs[2].shape != (cout,):
                raise ShapeError(f"transposed_conv2d: bias {xs[2].shape} vs {cout} output channels")
            out = out + _bias_view(xs[2], 4)
        return out, None

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        x, w = xs[0], xs[1]
        s = attrs.get("stride", 1)
        p = attrs.get("padding", 0)
        b, cin, h, wd = x.shape
        cout, kh, kw = w.shape[1:]
        hf = (h - 1) * s + kh
        wf = (wd - 1) * s + kw
        gfull = np.zeros((b, cout, hf, wf), dtype=g.dtype)
        gfull[:, :, p:hf - p, p:wf - p] = g
        gcols = np.empty((b, cout, kh, kw, h, wd), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gcols[:, :, i, j] = gfull[:, :, _window(i, s, h), _window(j, s, wd)]
        gx = np.tensordot(gcols, w, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(x, gcols, axes=([0, 2, 3], [0, 4, 5]))
        grads = [gx, gw]
        if len(xs) == 3:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads


@register("grid_sample")
class _GridSample:
    """Periodic bilinear sampling of image [B,C,H,W] at x + disp(x), disp [B,2,H,W].

    Channel 0 of disp moves along rows, channel 1 along columns.
    """

    @staticmethod
    def forward(xs, attrs):
        image, disp = xs
        if image.ndim != 4 or disp.ndim != 4 or disp.shape[1] != 2 or (
            image.shape[0], image.shape[2], image.shape[3]) != (disp.shape[0], disp.shape[2], disp.shape[3]):
            raise ShapeError(f"grid_sample: image {image.shape} and displacement {disp.shape} disagree")
        b, c, h, w = image.shape
        rows, cols = identity_coords(h, w)
        y = rows.astype(image.dtype) + disp[:, 0]
        x = cols.astype(image.dtype) + disp[:, 1]
        y0 = np.floor(y)
        x0 = np.floor(x)
        fy = (y - y0)[:, None]
        fx = (x - x0)[:, None]
        # wrap corner indices onto the torus
        i0 = y0.astype(np.int64) % h
        j0 = x0.astype(np.int64) % w
        i1 = (i0 + 1) % h
        j1 = (j0 + 1) % w
        bi = np.arange(b)[:, None, None]
        corners = [image[bi, :, i, j].transpose(0, 3, 1, 2) for i, j in ((i0, j0), (i0, j1), (i1, j0), (i1, j1))]
        v00, v01, v10, v11 = corners
        out = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)
        return out, (i0, i1, j0, j1, fy, fx, corners)

    @staticmethod
    def vjp(g, xs, out, saved, attrs):
        image = xs[0]
        i0, i1, j0, j1, fy, fx, (v00, v01, v10, v11) = saved
        b, c, h, w = image.shape
        base = (np.arange(b)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * (h * w)
        indices = []
        weights = []
        for i, j, wt in (
            (i0, j0, (1 - fy) * (1 - fx)),
            (i0, j1, (1 - fy) * fx),
            (i1, j0, fy * (1 - fx)),
            (i1, j1, fy * fx),
        ):
            indices.append((base + (i * w + j)[:, None]).reshape(-1))
            weights.append((g * wt).reshape(-1))
        # scatter-add; corners may coincide
        gimage = np.bincount(
            np.concatenate(indices), weights=np.concatenate(weights), minlength=image.size
        ).reshape(image.shape)
        dy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
        dx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
        gdisp = np.stack([(g * dy).sum(axis=1), (g * dx).sum(axis=1)], axis=1)
        return [gimage, gdisp]


# ---------------------------------------------------------------------------
# Functional front-end
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("sub", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("mul", [a, b])


def scalar_mul(a: Tensor, scalar: float) -> Tensor:
    return apply_primitive("scalar_mul", [a], {"scalar": float(scalar)})


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", [a, b])


def transpose(a: Tensor) -> Tensor:
    return apply_primitive("transpose", [a])


def reshape(a: Tensor, shape) -> Tensor:
    return apply_primitive("reshape", [a], {"shape": tuple(shape)})


def flatten(a: Tensor) -> Tensor:
    return apply_primitive("flatten", [a])


def roll(a: Tensor, shift: int, axis: int) -> Tensor:
    return apply_primitive("roll", [a], {"shift": shift, "axis": axis})


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    return apply_primitive("add_bias", [a, bias])


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    return apply_primitive("concat", list(tensors), {"axis": axis})


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    return apply_primitive("leaky_relu", [a], {"slope": slope})


def tanh(a: Tensor) -> Tensor:
    return apply_primitive("tanh", [a])


def exp(a: Tensor) -> Tensor:
    return apply_primitive("exp", [a])


def square(a: Tensor) -> Tensor:
    return apply_primitive("square", [a])


def sqrt(a: Tensor, eps: float = EPS) -> Tensor:
    return apply_primitive("sqrt", [a], {"eps": eps})


def log(a: Tensor, eps: float = EPS) -> Tensor:
    return apply_primitive("log", [a], {"eps": eps})


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    if p <= 0:
        return a
    return apply_primitive("dropout", [a], {"p": p, "keep": rng.random(a.shape) >= p})


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    return apply_primitive("sum", [a], {"axis": axis})


def mean(a: Tensor, axis=None) -> Tensor:
    return apply_primitive("mean", [a], {"axis": axis})


def dot(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive("dot", [a, b], {"axis": axis})


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive("softmax", [a], {"axis": axis})


def log_softmax(a: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    return apply_primitive("log_softmax", [a], {"axis": axis, "mask": mask})


def logsumexp(a: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    return apply_primitive("logsumexp", [a], {"axis": axis, "mask": mask})


def l2_normalize(a: Tensor, axis: int = -1, eps: float = EPS) -> Tensor:
    return apply_primitive("l2_normalize", [a], {"axis": axis, "eps": eps})


def group_norm(a: Tensor, groups: int, weight: Optional[Tensor] = None,
               bias: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    inputs = [a] if weight is None else [a, weight, bias]
    return apply_primitive("group_norm", inputs, {"groups": groups, "eps": eps})


def avg_pool2d(a: Tensor, kernel: int = 2) -> Tensor:
    return apply_primitive("avg_pool2d", [a], {"kernel": kernel})


def adaptive_avg_pool2d(a: Tensor, output_size: int = 1) -> Tensor:
    return apply_primitive("adaptive_avg_pool2d", [a], {"output_size": output_size})


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, pad_mode: str = "zeros") -> Tensor:
    inputs = [x, w] if bias is None else [x, w, bias]
    return apply_primitive("conv2d", inputs, {"stride": stride, "padding": padding, "pad_mode": pad_mode})


def transposed_conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
                      stride: int = 2, padding: int = 1) -> Tensor:
    inputs = [x, w] if bias is None else [x, w, bias]
    return apply_primitive("transposed_conv2d", inputs, {"stride": stride, "padding": padding})


def grid_sample(image: Tensor, disp: Tensor) -> Tensor:
    return apply_primitive("grid_sample", [image, disp])
