"""Reverse-mode automatic differentiation with 3D layer kernels.

A ``Tensor`` wraps a float64 numpy array and records the graph of ops
that produced it.  ``backward`` on a scalar walks the graph in reverse
topological order and accumulates gradients into every tensor marked
``requires_grad``.  The op set is exactly what a convolutional
autoencoder with metric-learning losses needs: 3D convolution (stride 1,
zero "same" padding), 2x2x2 max-pooling with argmax memory, max-unpooling,
transposed convolution, ReLU, flatten/reshape, and scalar-friendly
elementwise arithmetic.

Convolution uses a fixed shift-and-accumulate schedule: for every output
element the products are added in (in-channel, kx, ky, kz) order with the
bias last, so results are bit-identical to a naive nested-loop reference
with the same accumulation order.  All computation is float64 and
single-threaded; identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, UsageError

Array = np.ndarray


def _check_finite(arr: Array, ctx: str) -> Array:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {ctx}")
    return arr


class Tensor:
    """Array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _check_finite(
            np.asarray(data, dtype=np.float64), "tensor data"
        )
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    # -- graph plumbing ----------------------------------------------------

    def _accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Accumulate gradients of this scalar w.r.t. the recorded graph."""
        if self.data.size != 1:
            raise UsageError(
                f"backward requires a scalar, got shape {self.shape}"
            )
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
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        # Interior nodes get a fresh buffer per pass; leaves accumulate
        # across passes, so repeated backward without zeroing adds up.
        for node in topo:
            if node._backward is not None:
                node.grad = None
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _as_tensor_like(other, self)
        _same_shape(self, other)
        out = _node(self.data + other.data, (self, other))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g)
            if other.requires_grad:
                other._accumulate(g)

        out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = _node(-self.data, (self,))
        out._backward = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other) -> "Tensor":
        return self + (-_as_tensor_like(other, self))

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor_like(other, self) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor_like(other, self)
        _same_shape(self, other)
        out = _node(self.data * other.data, (self, other))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g * other.data)
            if other.requires_grad:
                other._accumulate(g * self.data)

        out._backward = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _as_tensor_like(other, self)
        _same_shape(self, other)
        out = _node(self.data / other.data, (self, other))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g / other.data)
            if other.requires_grad:
                other._accumulate(-g * self.data / (other.data * other.data))

        out._backward = bwd
        return out

    def __pow__(self, exponent) -> "Tensor":
        exponent = float(exponent)
        out = _node(self.data**exponent, (self,))
        out._backward = lambda g: self._accumulate(
            g * exponent * self.data ** (exponent - 1.0)
        )
        return out

    def sum(self) -> "Tensor":
        out = _node(self.data.sum(keepdims=False).reshape(()), (self,))
        out._backward = lambda g: self._accumulate(
            np.full_like(self.data, float(g))
        )
        return out

    def exp(self) -> "Tensor":
        out = _node(np.exp(self.data), (self,))
        out._backward = lambda g: self._accumulate(g * out.data)
        return out

    def log(self) -> "Tensor":
        out = _node(np.log(self.data), (self,))
        out._backward = lambda g: self._accumulate(g / self.data)
        return out

    def clamp_min(self, floor: float) -> "Tensor":
        mask = self.data > floor
        out = _node(np.maximum(self.data, floor), (self,))
        out._backward = lambda g: self._accumulate(g * mask)
        return out

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _node(self.data.reshape(shape), (self,))
        out._backward = lambda g: self._accumulate(g.reshape(self.data.shape))
        return out


def _node(data: Array, parents: tuple[Tensor, ...]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _check_finite(np.asarray(data, dtype=np.float64), "op output")
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(p for p in parents if p.requires_grad)
    out._backward = None
    return out


def _as_tensor_like(value, ref: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full_like(ref.data, float(value)))


def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise UsageError(f"shape mismatch: {a.shape} vs {b.shape}")


class ParamStore:
    """Named learnable tensors with deterministic iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise UsageError(f"duplicate parameter name {name!r}")
        t = data if isinstance(data, Tensor) else Tensor(data)
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> dict[str, Array]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state(self, state: dict[str, Array]) -> None:
        if set(state) != set(self._params):
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            raise UsageError(
                f"parameter name mismatch: missing={sorted(missing)}, "
                f"unexpected={sorted(extra)}"
            )
        for name, arr in state.items():
            t = self._params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != t.data.shape:
                raise UsageError(
                    f"shape mismatch for {name!r}: {arr.shape} vs {t.data.shape}"
                )
            t.data = _check_finite(arr.copy(), f"parameter {name!r}")


# ---------------------------------------------------------------------------
# 3D kernels (raw-array cores + differentiable wrappers)
# ---------------------------------------------------------------------------


def _offset_slices(n: int, off: int) -> tuple[slice, slice]:
    """Destination/source slice pair for a shift by ``off`` with zero fill."""
    lo = max(0, -off)
    hi = min(n, n - off)
    return slice(lo, hi), slice(lo + off, hi + off)


def _conv_fwd(x: Array, w: Array) -> Array:
    """Same-padded stride-1 cross-correlation, no bias.

    x: [C_in, X, Y, Z]; w: [C_out, C_in, k, k, k] -> [C_out, X, Y, Z].
    Accumulation order per output element is (c_in, kx, ky, kz), which the
    naive reference implementation must match for bit-exact agreement.
    """
    c_in, nx, ny, nz = x.shape
    c_out, _, k, _, _ = w.shape
    p = k // 2
    out = np.zeros((c_out, nx, ny, nz), dtype=np.float64)
    for ci in range(c_in):
        xi = x[ci]
        for kx in range(k):
            dxd, dxs = _offset_slices(nx, kx - p)
            for ky in range(k):
                dyd, dys = _offset_slices(ny, ky - p)
                for kz in range(k):
                    dzd, dzs = _offset_slices(nz, kz - p)
                    out[:, dxd, dyd, dzd] += (
                        w[:, ci, kx, ky, kz, None, None, None]
                        * xi[dxs, dys, dzs]
                    )
    return out


def _conv_igrad(g: Array, w: Array) -> Array:
    """Adjoint of ``_conv_fwd`` w.r.t. the input.

    g: [C_out, X, Y, Z]; w: [C_out, C_in, k, k, k] -> [C_in, X, Y, Z].
    """
    c_out, nx, ny, nz = g.shape
    _, c_in, k, _, _ = w.shape
    p = k // 2
    out = np.zeros((c_in, nx, ny, nz), dtype=np.float64)
    for kx in range(k):
        dxd, dxs = _offset_slices(nx, kx - p)
        for ky in range(k):
            dyd, dys = _offset_slices(ny, ky - p)
            for kz in range(k):
                dzd, dzs = _offset_slices(nz, kz - p)
                out[:, dxs, dys, dzs] += np.tensordot(
                    w[:, :, kx, ky, kz], g[:, dxd, dyd, dzd], axes=(0, 0)
                )
    return out


def _conv_wgrad(x: Array, g: Array, k: int) -> Array:
    """Adjoint of ``_conv_fwd`` w.r.t. the weights.

    x: [C_in, X, Y, Z]; g: [C_out, X, Y, Z] -> [C_out, C_in, k, k, k].
    """
    c_in, nx, ny, nz = x.shape
    c_out = g.shape[0]
    p = k // 2
    out = np.empty((c_out, c_in, k, k, k), dtype=np.float64)
    for kx in range(k):
        dxd, dxs = _offset_slices(nx, kx - p)
        for ky in range(k):
            dyd, dys = _offset_slices(ny, ky - p)
            for kz in range(k):
                dzd, dzs = _offset_slices(nz, kz - p)
                out[:, :, kx, ky, kz] = np.tensordot(
                    g[:, dxd, dyd, dzd],
                    x[:, dxs, dys, dzs],
                    axes=([1, 2, 3], [1, 2, 3]),
                )
    return out


def conv3d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3D convolution, stride 1, zero "same" padding.

    x: [C_in, X, Y, Z]; w: [C_out, C_in, k, k, k], k odd; b: [C_out].
    Output spatial dims equal input dims.  The bias is added after the
    product accumulation.
    """
    if x.data.ndim != 4 or w.data.ndim != 5:
        raise UsageError(f"bad ranks: input {x.shape}, weights {w.shape}")
    if x.shape[0] != w.shape[1]:
        raise UsageError(
            f"channel mismatch: input {x.shape[0]}, weights expect {w.shape[1]}"
        )
    k = w.shape[2]
    if w.shape[2:] != (k, k, k) or k % 2 == 0:
        raise UsageError(f"kernel must be cubic with odd size, got {w.shape[2:]}")
    if b.shape != (w.shape[0],):
        raise UsageError(f"bias shape {b.shape} != ({w.shape[0]},)")
    data = _conv_fwd(x.data, w.data)
    data += b.data[:, None, None, None]
    out = _node(data, (x, w, b))

    def bwd(g):
        if x.requires_grad:
            x._accumulate(_conv_igrad(g, w.data))
        if w.requires_grad:
            w._accumulate(_conv_wgrad(x.data, g, k))
        if b.requires_grad:
            b._accumulate(g.sum(axis=(1, 2, 3)))

    out._backward = bwd
    return out


def deconv3d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Transposed 3D convolution: conv3d's input-gradient as a forward map.

    x: [C_in, X, Y, Z]; w: [C_in, C_out, k, k, k], k odd; b: [C_out].
    With stride 1 and "same" padding the spatial dims are preserved, and
    forward(deconv3d) with weights W equals the input-gradient pass of
    conv3d with the same W.
    """
    if x.data.ndim != 4 or w.data.ndim != 5:
        raise UsageError(f"bad ranks: input {x.shape}, weights {w.shape}")
    if x.shape[0] != w.shape[0]:
        raise UsageError(
            f"channel mismatch: input {x.shape[0]}, weights expect {w.shape[0]}"
        )
    k = w.shape[2]
    if w.shape[2:] != (k, k, k) or k % 2 == 0:
        raise UsageError(f"kernel must be cubic with odd size, got {w.shape[2:]}")
    if b.shape != (w.shape[1],):
        raise UsageError(f"bias shape {b.shape} != ({w.shape[1]},)")
    data = _conv_igrad(x.data, w.data)
    data += b.data[:, None, None, None]
    out = _node(data, (x, w, b))

    def bwd(g):
        if x.requires_grad:
            x._accumulate(_conv_fwd(g, w.data))
        if w.requires_grad:
            w._accumulate(_conv_wgrad(g, x.data, k))
        if b.requires_grad:
            b._accumulate(g.sum(axis=(1, 2, 3)))

    out._backward = bwd
    return out


def maxpool3d(x: Tensor) -> tuple[Tensor, Array]:
    """2x2x2 max-pooling with stride 2.

    Returns the pooled tensor and int64 argmax indices (flat indices into
    the input array, shape equal to the pooled output).  Ties go to the
    lowest linear index.  Backward routes each pooled gradient to its
    argmax position only.
    """
    if x.data.ndim != 4:
        raise UsageError(f"maxpool3d expects rank 4, got {x.shape}")
    c, nx, ny, nz = x.shape
    if nx % 2 or ny % 2 or nz % 2:
        raise UsageError(f"spatial dims must be even, got {(nx, ny, nz)}")
    win = x.data.reshape(c, nx // 2, 2, ny // 2, 2, nz // 2, 2)
    win = win.transpose(0, 1, 3, 5, 2, 4, 6).reshape(
        c, nx // 2, ny // 2, nz // 2, 8
    )
    local = win.argmax(axis=-1)  # first max = lowest (dx, dy, dz)
    data = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]

    # Convert window-local offsets to flat indices into the input.
    dx, dy, dz = local // 4, (local // 2) % 2, local % 2
    ci, xi, yi, zi = np.indices(local.shape, sparse=True)
    flat = np.ravel_multi_index(
        (ci, 2 * xi + dx, 2 * yi + dy, 2 * zi + dz), x.data.shape
    ).astype(np.int64)

    out = _node(data, (x,))

    def bwd(g):
        if x.requires_grad:
            # Argmax indices are unique across windows, so a plain
            # scatter assignment is exact.
            acc = np.zeros(x.data.size, dtype=np.float64)
            acc[flat.ravel()] = g.ravel()
            x._accumulate(acc.reshape(x.data.shape))

    out._backward = bwd
    return out, flat


def maxunpool3d(x: Tensor, indices: Array, output_dims) -> Tensor:
    """Scatter pooled values back to their argmax positions, zeros elsewhere.

    ``indices`` must come from a maxpool3d over a tensor of shape
    ``output_dims``; ``x`` must match the indices' shape.
    """
    output_dims = tuple(int(d) for d in output_dims)
    indices = np.asarray(indices)
    if x.shape != indices.shape:
        raise UsageError(
            f"input shape {x.shape} != indices shape {indices.shape}"
        )
    size = int(np.prod(output_dims))
    if indices.size and (indices.min() < 0 or indices.max() >= size):
        raise UsageError("unpool indices out of range for output dims")
    flat = np.zeros(size, dtype=np.float64)
    flat[indices.ravel()] = x.data.ravel()
    out = _node(flat.reshape(output_dims), (x,))

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g.reshape(-1)[indices.ravel()].reshape(x.data.shape))

    out._backward = bwd
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    out = _node(np.where(mask, x.data, 0.0), (x,))
    out._backward = lambda g: x._accumulate(g * mask)
    return out


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.data.size)
