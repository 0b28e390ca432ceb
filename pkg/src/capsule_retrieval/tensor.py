"""Dense tensors with reverse-mode automatic differentiation on NumPy storage.

Every operation returns a fresh ``Tensor`` carrying references to its inputs
and a backward closure; ``backward`` replays that record in reverse
topological order, visiting each node exactly once and accumulating into the
persistent ``grad`` buffers of everything that requires gradients.

Conventions baked in here:

- No implicit broadcasting between tensors.  Elementwise ops demand identical
  shapes; the bias patterns of ``dense``, ``conv2d`` and ``batch_norm`` are
  handled inside those ops.  Python scalars are the only exception.
- Subgradients at kinks are fixed: ``leaky_relu`` uses 1 at exactly 0,
  ``relu`` uses 0, and ``l2_norm`` has gradient 0 at the origin.
- Any NaN/Inf appearing in a forward value or a propagated gradient raises
  ``NumericsError`` (checks can be switched off for speed).
- Default storage is float64 so finite-difference checks have headroom;
  ``set_default_dtype(np.float32)`` switches new leaves to single precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericsError",
    "BatchNormState",
    "set_default_dtype",
    "default_dtype",
    "set_finite_checks",
    "make_op",
    "backward",
    "elementwise_add",
    "elementwise_sub",
    "elementwise_mul",
    "negate",
    "add_scalar",
    "mul_scalar",
    "relu",
    "leaky_relu",
    "reshape",
    "transpose",
    "narrow",
    "reduce_sum",
    "softmax",
    "l2_norm",
    "dense",
    "conv2d",
    "batch_norm",
    "einsum2",
]


class ShapeError(ValueError):
    """An operand's shape violates the operation's contract."""


class NumericsError(ArithmeticError):
    """A forward or backward pass produced NaN or Inf."""


_DEFAULT_DTYPE = np.float64
_CHECK_FINITE = True


def set_default_dtype(dtype) -> None:
    """Set the dtype used for new leaf tensors (float64 or float32)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dt}; use float64 or float32")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


def set_finite_checks(enabled: bool) -> None:
    """Enable/disable NaN/Inf checking on op outputs and gradients."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _check_finite(arr: np.ndarray, where: str) -> None:
    if _CHECK_FINITE and not np.isfinite(arr).all():
        raise NumericsError(f"non-finite values produced by {where}")


class Tensor:
    """N-dimensional real array, optionally tracked for differentiation.

    ``grad`` is a same-shape buffer present only when ``requires_grad``;
    repeated calls to ``backward`` accumulate into it until ``zero_grad``.
    Data produced by an operation must be treated as immutable.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        _check_finite(arr, "leaf construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    # Operator sugar; tensor-tensor forms require identical shapes.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return elementwise_add(self, other)
        return add_scalar(self, float(other))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return elementwise_sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return elementwise_mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return negate(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flag})"


def make_op(data: np.ndarray, parents: tuple, backward_fn, name: str) -> Tensor:
    """Wrap an op result so the backward pass can reach its inputs.

    ``backward_fn(g)`` receives the cotangent of the output and must return
    one gradient array (or None) per parent, in order.
    """
    _check_finite(data, name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = np.zeros_like(data) if out.requires_grad else None
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = backward_fn if out.requires_grad else None
    out.op = name
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of the recorded graph (iterative)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

    ``loss`` must hold exactly one element.  Calling backward again without
    zeroing gradients adds the new gradients on top of the old ones.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad")

    order = _topo_order(loss)
    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flow.get(id(node))
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if _CHECK_FINITE and not np.isfinite(pg).all():
                raise NumericsError(f"non-finite gradient out of {node.op}")
            prev = flow.get(id(parent))
            # fresh allocation: closures may hand out aliased arrays
            flow[id(parent)] = pg if prev is None else prev + pg
    for node in order:
        g = flow.get(id(node))
        if g is not None:
            node.grad += g


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "elementwise_add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g), "elementwise_add")


def elementwise_sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "elementwise_sub")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g), "elementwise_sub")


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "elementwise_mul")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "elementwise_mul")


def negate(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,), "negate")


def add_scalar(a: Tensor, s: float) -> Tensor:
    return make_op(a.data + s, (a,), lambda g: (g,), "add_scalar")


def mul_scalar(a: Tensor, s: float) -> Tensor:
    return make_op(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float) -> Tensor:
    """x for x >= 0, slope*x otherwise; the subgradient at 0 is 1."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    scale = np.where(a.data >= 0, 1.0, slope)
    return make_op(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def reshape(a: Tensor, new_shape) -> Tensor:
    new_shape = tuple(int(d) for d in new_shape)
    if int(np.prod(new_shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {new_shape}")
    old_shape = a.shape
    return make_op(
        a.data.reshape(new_shape), (a,), lambda g: (g.reshape(old_shape),), "reshape"
    )


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inverse = tuple(int(ax) for ax in np.argsort(axes))
    return make_op(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inverse),),
        "transpose",
    )


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis`` starting at ``start``."""
    axis = int(axis)
    if not 0 <= axis < a.ndim:
        raise ShapeError(f"narrow: axis {axis} out of range for shape {a.shape}")
    if start < 0 or length < 1 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow: window [{start}, {start + length}) exceeds axis of size {a.shape[axis]}"
        )
    index = tuple(
        slice(start, start + length) if d == axis else slice(None) for d in range(a.ndim)
    )
    shape = a.shape

    def grad_fn(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[index] = g
        return (gx,)

    return make_op(a.data[index].copy(), (a,), grad_fn, "narrow")


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (int, np.integer)):
        axis = (int(axis),)
    axes = tuple(int(ax) % ndim if -ndim <= int(ax) < ndim else int(ax) for ax in axis)
    for ax in axes:
        if not 0 <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
    return axes


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def grad_fn(g):
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape),)

    return make_op(out, (a,), grad_fn, "reduce_sum")


def softmax(a: Tensor, axis: int) -> Tensor:
    """Softmax along ``axis``, computed with max subtraction for stability."""
    (axis,) = _normalize_axes(axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op(y, (a,), grad_fn, "softmax")


def l2_norm(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; gradient at the zero vector is 0.

    Computed scale-safely (largest magnitude factored out) so the norm of a
    nonzero vector never underflows to 0.
    """
    (axis,) = _normalize_axes(axis, a.ndim)
    m = np.abs(a.data).max(axis=axis, keepdims=True)
    safe_m = np.where(m > 0, m, 1.0)
    scaled = a.data / safe_m
    n = safe_m * np.sqrt((scaled * scaled).sum(axis=axis, keepdims=True))
    out = n if keepdims else n.reshape(_drop_axis(a.shape, axis))
    ad = a.data

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (ad * (g / safe),)

    return make_op(out, (a,), grad_fn, "l2_norm")


def _drop_axis(shape: tuple[int, ...], axis: int) -> tuple[int, ...]:
    return shape[:axis] + shape[axis + 1 :]


# ---------------------------------------------------------------------------
# linear layers
# ---------------------------------------------------------------------------


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: ``x[N, D] @ weight[D, E] + bias[E]``."""
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise ShapeError(
            f"dense expects 2-d input/weight and 1-d bias, got {x.shape}, "
            f"{weight.shape}, {bias.shape}"
        )
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise ShapeError(
            f"dense: input {x.shape} incompatible with weight {weight.shape} "
            f"and bias {bias.shape}"
        )
    xd, wd = x.data, weight.data
    out = xd @ wd + bias.data

    def grad_fn(g):
        return (g @ wd.T, xd.T @ g, g.sum(axis=0))

    return make_op(out, (x, weight, bias), grad_fn, "dense")


def conv2d(
    x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0
) -> Tensor:
    """2-d cross-correlation with zero padding (no kernel flip).

    Shapes: input [N, C, H, W], weight [F, C, kH, kW], bias [F]; output
    spatial size floor((H + 2*padding - kH)/stride) + 1 and likewise for W.
    """
    stride = int(stride)
    padding = int(padding)
    if stride < 1:
        raise ValueError(f"conv2d stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d padding must be non-negative, got {padding}")
    if x.ndim != 4 or weight.ndim != 4 or bias.ndim != 1:
        raise ShapeError(
            f"conv2d expects 4-d input/weight and 1-d bias, got {x.shape}, "
            f"{weight.shape}, {bias.shape}"
        )
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if cw != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {cw}")
    if bias.shape[0] != f:
        raise ShapeError(f"conv2d: bias length {bias.shape[0]} != {f} filters")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} exceeds padded input "
            f"{h + 2 * padding}x{w + 2 * padding} (zero-size output)"
        )
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [N, C, H', W', kH, kW]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n, h_out * w_out, c * kh * kw
    )
    wmat = weight.data.reshape(f, c * kh * kw)
    out = cols @ wmat.T + bias.data  # [N, L, F]
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(n, f, h_out, w_out)

    padded_shape = xp.shape

    def grad_fn(g):
        g2 = np.ascontiguousarray(
            g.reshape(n, f, h_out * w_out).transpose(0, 2, 1)
        )  # [N, L, F]
        gb = g2.sum(axis=(0, 1))
        gw = np.einsum("nlf,nlk->fk", g2, cols).reshape(f, c, kh, kw)
        gcols = (g2 @ wmat).reshape(n, h_out, w_out, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros(padded_shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += (
                    gcols[:, :, :, :, i, j]
                )
        gx = gxp[:, :, padding : padding + h, padding : padding + w]
        return (gx, gw, gb)

    return make_op(out, (x, weight, bias), grad_fn, "conv2d")


@dataclass
class BatchNormState:
    """Per-channel running statistics, mutated by train-mode forward passes."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def initial(cls, channels: int, dtype=None) -> "BatchNormState":
        dt = dtype if dtype is not None else _DEFAULT_DTYPE
        return cls(np.zeros(channels, dtype=dt), np.ones(channels, dtype=dt))

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.mean.copy(), self.var.copy())


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over an [N, C, H, W] tensor.

    Train mode normalizes by the batch statistics (biased variance) and
    updates ``state`` in place as ``momentum * old + (1 - momentum) * batch``;
    eval mode normalizes by the running statistics.
    """
    if eps <= 0:
        raise ValueError(f"batch_norm eps must be positive, got {eps}")
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects [N, C, H, W], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batch_norm: gamma/beta must have shape ({c},), got {gamma.shape}, {beta.shape}"
        )
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    gshape = (1, c, 1, 1)
    xd = x.data

    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        state.mean[...] = momentum * state.mean + (1.0 - momentum) * mu
        state.var[...] = momentum * state.var + (1.0 - momentum) * var
    else:
        mu = state.mean
        var = state.var

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(gshape)) * inv.reshape(gshape)
    out = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)
    gd = gamma.data

    def grad_fn(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gd.reshape(gshape)
        if training:
            # gradient through the batch statistics
            mean_g = gxhat.sum(axis=axes, keepdims=True) / count
            mean_gx = (gxhat * xhat).sum(axis=axes, keepdims=True) / count
            gx = inv.reshape(gshape) * (gxhat - mean_g - xhat * mean_gx)
        else:
            gx = gxhat * inv.reshape(gshape)
        return (gx, ggamma, gbeta)

    return make_op(out, (x, gamma, beta), grad_fn, "batch_norm")


def einsum2(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Differentiable two-operand einsum.

    Every index of each operand must appear in the output spec or in the
    other operand, so each input gradient is itself a single einsum.
    """
    try:
        lhs, out_spec = subscripts.replace(" ", "").split("->")
        a_spec, b_spec = lhs.split(",")
    except ValueError as exc:
        raise ValueError(f"einsum2 needs 'ab,bc->ac'-style subscripts: {subscripts!r}") from exc
    for spec, name in ((a_spec, "first"), (b_spec, "second"), (out_spec, "output")):
        if len(set(spec)) != len(spec):
            raise ValueError(f"einsum2: repeated index in {name} operand spec {spec!r}")
    if not set(a_spec) <= set(out_spec) | set(b_spec) or not set(b_spec) <= set(
        out_spec
    ) | set(a_spec):
        raise ValueError(f"einsum2 cannot differentiate {subscripts!r}")
    ad, bd = a.data, b.data
    out = np.einsum(subscripts, ad, bd)

    def grad_fn(g):
        ga = np.einsum(f"{out_spec},{b_spec}->{a_spec}", g, bd)
        gb = np.einsum(f"{a_spec},{out_spec}->{b_spec}", ad, g)
        return (ga, gb)

    return make_op(out, (a, b), grad_fn, "einsum2")
