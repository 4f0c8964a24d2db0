"""Reverse-mode automatic differentiation on numpy float64 arrays.

A small closure-graph engine providing exactly the operations the
coupling networks and density objectives need: 3x3 same-padding
convolution, a handful of elementwise functions, channel-wise affine
transforms, the structural rearrangements used by multi-scale flows,
and Adam.  Shapes are checked strictly: binary operations accept equal
shapes or a scalar on one side, nothing else.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Parameter",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "log_abs",
    "tanh",
    "relu",
    "affine",
    "reduce_sum",
    "concat_channels",
    "slice_channels",
    "channel_affine",
    "reverse_channels",
    "squeeze2x2",
    "unsqueeze2x2",
    "conv2d",
    "squeeze2x2_array",
    "unsqueeze2x2_array",
    "finite_diff_grad",
    "Adam",
]

# Inputs to exp() are clipped here so a finite forward pass can never
# overflow to inf; model code additionally bounds coupling scales long
# before this limit is reached.
_EXP_MAX = 700.0


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class Tensor:
    """A node in the computation graph wrapping a float64 ndarray."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        """Accumulate d(self)/d(param) into every reachable Parameter.

        ``self`` must be a scalar.  Gradients add up across calls;
        parameters not connected to this node are left untouched.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar loss, got shape {self.shape}")
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if isinstance(node, Parameter):
                node.grad += g
            if node._backward is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None:
                        continue
                    cur = grads.get(id(parent))
                    grads[id(parent)] = pg if cur is None else cur + pg

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Parameter(Tensor):
    """A trainable leaf tensor with a persistent, accumulating gradient."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _wrap(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _check_binary(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}; only scalar broadcast is allowed")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # The only legal broadcast is scalar-vs-tensor, so fold everything.
    return np.sum(g).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a.data, b.data)
    return Tensor(
        a.data + b.data,
        (a, b),
        lambda g: (_reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a.data, b.data)
    return Tensor(
        a.data - b.data,
        (a, b),
        lambda g: (_reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a.data, b.data)
    return Tensor(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.data.shape), _reduce_to(g * a.data, b.data.shape)),
    )


def neg(a) -> Tensor:
    a = _wrap(a)
    return Tensor(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _wrap(a)
    clipped = np.minimum(a.data, _EXP_MAX)
    out = np.exp(clipped)
    inside = a.data <= _EXP_MAX
    return Tensor(out, (a,), lambda g: (g * np.where(inside, out, 0.0),))


def log_abs(a) -> Tensor:
    """log|x|, guarded away from zero so the forward value stays finite."""
    a = _wrap(a)
    safe = np.maximum(np.abs(a.data), 1e-300)
    out = np.log(safe)
    denom = np.where(a.data == 0.0, 1e-300, a.data)
    return Tensor(out, (a,), lambda g: (g / denom,))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return Tensor(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0.0
    return Tensor(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def affine(a, scale: float, shift: float = 0.0) -> Tensor:
    """Elementwise scale*x + shift with python-scalar coefficients."""
    a = _wrap(a)
    scale = float(scale)
    return Tensor(scale * a.data + float(shift), (a,), lambda g: (g * scale,))


def reduce_sum(a, axes: tuple[int, ...] | None = None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        out = np.sum(a.data)

        def back_all(g):
            return (np.broadcast_to(g, a.data.shape),)

        return Tensor(out, (a,), back_all)
    axes = tuple(ax % a.data.ndim for ax in axes)
    out = np.sum(a.data, axis=axes)

    def back(g):
        expanded = g
        for ax in sorted(axes):
            expanded = np.expand_dims(expanded, ax)
        return (np.broadcast_to(expanded, a.data.shape),)

    return Tensor(out, (a,), back)


def _channel_axis(data: np.ndarray) -> int:
    if data.ndim not in (3, 4):
        raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got shape {data.shape}")
    return data.ndim - 3


def concat_channels(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels requires at least one tensor")
    parts = [_wrap(p) for p in parts]
    axis = _channel_axis(parts[0].data)
    for p in parts[1:]:
        if p.data.ndim != parts[0].data.ndim:
            raise ShapeError("concat_channels operands must share rank")
        if p.data.shape[:axis] + p.data.shape[axis + 1 :] != parts[0].data.shape[:axis] + parts[0].data.shape[axis + 1 :]:
            raise ShapeError("concat_channels operands must agree outside the channel axis")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(parts))
        )

    return Tensor(out, tuple(parts), back)


def slice_channels(a, start: int, stop: int) -> Tensor:
    a = _wrap(a)
    axis = _channel_axis(a.data)
    channels = a.data.shape[axis]
    if not (0 <= start < stop <= channels):
        raise ShapeError(f"channel slice [{start}:{stop}] out of range for {channels} channels")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def back(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return (full,)

    return Tensor(a.data[sl], (a,), back)


def channel_affine(x, scale, offset) -> Tensor:
    """Per-channel (x - offset) * scale for (C,H,W) or (N,C,H,W) input."""
    x, scale, offset = _wrap(x), _wrap(scale), _wrap(offset)
    axis = _channel_axis(x.data)
    C = x.data.shape[axis]
    if scale.data.shape != (C,) or offset.data.shape != (C,):
        raise ShapeError(
            f"channel_affine expects scale/offset of shape ({C},), got {scale.data.shape} and {offset.data.shape}"
        )
    view = (C,) + (1, 1)
    s_view = scale.data.reshape(view)
    o_view = offset.data.reshape(view)
    centered = x.data - o_view
    out = centered * s_view
    reduce_axes = tuple(i for i in range(x.data.ndim) if i != axis)

    def back(g):
        gx = g * s_view
        gscale = np.sum(g * centered, axis=reduce_axes)
        goffset = -np.sum(g, axis=reduce_axes) * scale.data
        return (gx, gscale, goffset)

    return Tensor(out, (x, scale, offset), back)


def reverse_channels(a) -> Tensor:
    a = _wrap(a)
    axis = _channel_axis(a.data)
    out = np.flip(a.data, axis=axis).copy()

    def back(g):
        return (np.flip(g, axis=axis),)

    return Tensor(out, (a,), back)


def squeeze2x2_array(d: np.ndarray) -> np.ndarray:
    """Space-to-depth: (..., C, 2h, 2w) -> (..., 4C, h, w), row-major blocks."""
    *lead, C, H, W = d.shape
    if H % 2 or W % 2:
        raise ShapeError(f"squeeze needs even spatial dims, got {H}x{W}")
    h, w = H // 2, W // 2
    nl = len(lead)
    view = d.reshape(*lead, C, h, 2, w, 2)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 4, nl + 1, nl + 3)
    return view.transpose(perm).reshape(*lead, 4 * C, h, w)


def unsqueeze2x2_array(d: np.ndarray) -> np.ndarray:
    """Depth-to-space inverse of :func:`squeeze2x2_array`."""
    *lead, C4, h, w = d.shape
    if C4 % 4:
        raise ShapeError(f"unsqueeze needs a channel count divisible by 4, got {C4}")
    C = C4 // 4
    nl = len(lead)
    view = d.reshape(*lead, C, 2, 2, h, w)
    perm = tuple(range(nl)) + (nl, nl + 3, nl + 1, nl + 4, nl + 2)
    return view.transpose(perm).reshape(*lead, C, 2 * h, 2 * w)


def squeeze2x2(a) -> Tensor:
    a = _wrap(a)
    _channel_axis(a.data)
    out = squeeze2x2_array(a.data)
    return Tensor(out, (a,), lambda g: (unsqueeze2x2_array(g),))


def unsqueeze2x2(a) -> Tensor:
    a = _wrap(a)
    _channel_axis(a.data)
    out = unsqueeze2x2_array(a.data)
    return Tensor(out, (a,), lambda g: (squeeze2x2_array(g),))


def _im2col(xp: np.ndarray, H: int, W: int) -> np.ndarray:
    """Gather 3x3 patches from padded input (N,C,H+2,W+2) -> (N, 9C, H*W)."""
    N, C = xp.shape[0], xp.shape[1]
    cols = np.empty((N, 9 * C, H * W), dtype=np.float64)
    k = 0
    for di in range(3):
        for dj in range(3):
            cols[:, k * C : (k + 1) * C, :] = xp[:, :, di : di + H, dj : dj + W].reshape(N, C, H * W)
            k += 1
    return cols


def conv2d(x, weight, bias) -> Tensor:
    """3x3 cross-correlation with same zero padding and stride 1.

    ``x`` is (C,H,W) or (N,C,H,W); ``weight`` is (C_out, C_in, 3, 3);
    ``bias`` is (C_out,).
    """
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    if weight.data.ndim != 4 or weight.data.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d weight must be (C_out, C_in, 3, 3), got {weight.data.shape}")
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"conv2d input must be (C,H,W) or (N,C,H,W), got {x.data.shape}")
    xd = x.data if batched else x.data[None]
    N, Cin, H, W = xd.shape
    Cout = weight.data.shape[0]
    if weight.data.shape[1] != Cin:
        raise ShapeError(f"conv2d input has {Cin} channels but weight expects {weight.data.shape[1]}")
    if bias.data.shape != (Cout,):
        raise ShapeError(f"conv2d bias must be ({Cout},), got {bias.data.shape}")

    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, H, W)
    # Flat kernel layout (di, dj, c_in) matches the patch layout above.
    wf = weight.data.transpose(0, 2, 3, 1).reshape(Cout, 9 * Cin)
    out = np.matmul(wf, cols)  # (N, Cout, H*W)
    out = out.reshape(N, Cout, H, W) + bias.data.reshape(1, Cout, 1, 1)
    if not batched:
        out = out[0]

    def back(g):
        gb = g if batched else g[None]
        gflat = gb.reshape(N, Cout, H * W)
        dbias = gflat.sum(axis=(0, 2))
        dwf = np.matmul(gflat, cols.transpose(0, 2, 1)).sum(axis=0)  # (Cout, 9Cin)
        dweight = dwf.reshape(Cout, 3, 3, Cin).transpose(0, 3, 1, 2)
        dcols = np.matmul(wf.T, gflat)  # (N, 9Cin, H*W)
        gxp = np.zeros_like(xp)
        k = 0
        for di in range(3):
            for dj in range(3):
                gxp[:, :, di : di + H, dj : dj + W] += dcols[:, k * Cin : (k + 1) * Cin, :].reshape(
                    N, Cin, H, W
                )
                k += 1
        gx = gxp[:, :, 1 : 1 + H, 1 : 1 + W]
        return ((gx if batched else gx[0]), dweight, dbias)

    return Tensor(out, (x, weight, bias), back)


def finite_diff_grad(loss_fn, params: list[Parameter], epsilon: float = 1e-4) -> list[np.ndarray]:
    """Central-difference gradient of ``loss_fn()`` w.r.t. each parameter."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(loss_fn())
            flat[i] = orig - epsilon
            f_minus = float(loss_fn())
            flat[i] = orig
            gf[i] = (f_plus - f_minus) / (2.0 * epsilon)
        grads.append(g)
    return grads


class Adam:
    """Adam with bias correction; gradients are cleared after each step."""

    def __init__(
        self,
        params: list[Parameter],
        learning_rate: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad[...] = 0.0
