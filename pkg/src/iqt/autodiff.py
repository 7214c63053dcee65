"""Reverse-mode automatic differentiation over 5-D tensors (N, C, X, Y, Z).

Supplies exactly the operators the anisotropic U-Net needs: same-padded
3x3x3 and 1x1x1 convolutions, blockwise transpose convolutions, max
pooling with anisotropic windows, ReLU, batch normalization, channel
concatenation, elementwise add, mean squared error, and fixed binary
channel masking for ensembling. Gradient checking against central finite
differences is a first-class operation.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError

OP_KINDS = (
    "conv3",
    "conv1",
    "convtranspose",
    "convtranspose_z",
    "maxpool",
    "relu",
    "batchnorm",
    "concat_channels",
    "add",
    "mse",
    "masksemble_mask",
)


class Tensor:
    """A 5-D array with an accumulated gradient of the same shape."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, validate: bool = True):
        arr = np.asarray(data)
        if arr.ndim != 5:
            raise ShapeError("tensors are 5-D (N, C, X, Y, Z)", arr.shape)
        if validate and not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name or ''} contains NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, name={self.name!r})"


class BatchNormState:
    """Running statistics for one batchnorm layer, updated in training."""

    def __init__(self, channels: int, dtype=np.float64):
        self.running_mean = np.zeros((1, channels, 1, 1, 1), dtype=dtype)
        self.running_var = np.ones((1, channels, 1, 1, 1), dtype=dtype)


class _Node:
    __slots__ = ("kind", "inputs", "params", "output", "cache")

    def __init__(self, kind, inputs, params, output, cache):
        self.kind = kind
        self.inputs = inputs
        self.params = params
        self.output = output
        self.cache = cache


class Graph:
    """Topologically ordered op list; replayable for finite differencing."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.mutate_state = True  # running-stat updates allowed

    def apply(self, kind: str, inputs, params: dict | None = None) -> Tensor:
        if kind not in _FORWARD:
            raise ValueError(f"unknown op kind {kind!r}; known: {sorted(_FORWARD)}")
        params = dict(params or {})
        inputs = list(inputs)
        out_data, cache = _FORWARD[kind]([t.data for t in inputs], params, self)
        output = Tensor(out_data, validate=False)
        self.nodes.append(_Node(kind, inputs, params, output, cache))
        return output

    def recompute(self):
        """Re-run every forward in order, writing outputs in place.

        Running statistics are frozen during replay so the graph stays a
        pure function of its leaf tensors.
        """
        saved, self.mutate_state = self.mutate_state, False
        try:
            for node in self.nodes:
                out_data, cache = _FORWARD[node.kind]([t.data for t in node.inputs], node.params, self)
                node.output.data = out_data
                node.cache = cache
        finally:
            self.mutate_state = saved


def op_apply(graph: Graph, kind: str, inputs, params: dict | None = None) -> Tensor:
    """Apply one operator, appending its node to the graph."""
    return graph.apply(kind, inputs, params)


def backward(graph: Graph, loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into .grad for requires_grad leaves.

    Gradients are summed over every use of a tensor. The loss must be the
    scalar output of a graph node. Gradients are not propagated into
    inputs that neither require grad nor feed another node.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(node.output) for node in graph.nodes}
    if id(loss) not in produced:
        raise ValueError("loss tensor was not produced by this graph")
    for node in reversed(graph.nodes):
        gout = grads.pop(id(node.output), None)
        if gout is None:
            continue
        needed = [t.requires_grad or id(t) in produced for t in node.inputs]
        gins = _BACKWARD[node.kind](
            gout, [t.data for t in node.inputs], node.output.data, node.cache, node.params, needed
        )
        for tensor, gin in zip(node.inputs, gins):
            if gin is None:
                continue
            if id(tensor) in produced:
                if id(tensor) in grads:
                    grads[id(tensor)] += gin
                else:
                    grads[id(tensor)] = gin
            elif tensor.requires_grad:
                tensor.grad += gin


def kink_margins(graph: Graph) -> tuple[float, float]:
    """Distance of the graph's state from relu/maxpool non-smoothness.

    Returns (min |pre-relu activation|, min runner-up gap across pooling
    windows). Finite differencing is only trustworthy when both margins
    comfortably exceed the perturbation's downstream effect.
    """
    relu_margin = math.inf
    pool_margin = math.inf
    for node in graph.nodes:
        if node.kind == "relu":
            values = np.abs(node.inputs[0].data)
            if values.size:
                relu_margin = min(relu_margin, float(values.min()))
        elif node.kind == "maxpool":
            x = node.inputs[0].data
            wx, wy, wz = node.params["window"]
            if wx * wy * wz == 1:
                continue
            N, C, X, Y, Z = x.shape
            blocks = x.reshape(N, C, X // wx, wx, Y // wy, wy, Z // wz, wz)
            blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(N, C, X // wx, Y // wy, Z // wz, -1)
            top2 = np.partition(blocks, blocks.shape[-1] - 2, axis=-1)[..., -2:]
            pool_margin = min(pool_margin, float((top2[..., 1] - top2[..., 0]).min()))
    return relu_margin, pool_margin


def gradient_check(graph: Graph, loss: Tensor, tensor: Tensor, epsilon: float = 1e-5) -> float:
    """Max relative error between backprop and central finite differences.

    Perturbs every entry of `tensor` by +/- epsilon, replaying the graph,
    and compares (L+ - L-) / 2 eps against the accumulated gradient.
    Intended for small float64 tensors.
    """
    if tensor.data.size > 1000:
        raise ValueError(f"gradient_check is for small tensors (<= 1000 entries), got {tensor.data.size}")
    if not tensor.requires_grad:
        raise ValueError("tensor does not require grad")
    tensor.zero_grad()
    backward(graph, loss)
    analytic = tensor.grad.copy()

    flat = tensor.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + epsilon
        graph.recompute()
        up = float(loss.data.reshape(-1)[0])
        flat[i] = keep - epsilon
        graph.recompute()
        down = float(loss.data.reshape(-1)[0])
        flat[i] = keep
        numeric[i] = (up - down) / (2.0 * epsilon)
    graph.recompute()

    numeric = numeric.reshape(tensor.data.shape)
    denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), 1e-8)
    return float(np.max(np.abs(numeric - analytic) / denom))


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

def _pad1(x: np.ndarray) -> np.ndarray:
    N, C, X, Y, Z = x.shape
    xp = np.zeros((N, C, X + 2, Y + 2, Z + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1, 1:-1] = x
    return xp


def _conv_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' cross-correlation; kernel is cubic, size 1 or 3."""
    from ._kernels import conv3_forward

    N, C, X, Y, Z = x.shape
    O, Cw, kx, ky, kz = w.shape
    if Cw != C:
        raise ShapeError("kernel channels do not match input", w.shape, x.shape)
    if kx == ky == kz == 1:
        out = np.matmul(w[:, :, 0, 0, 0], np.ascontiguousarray(x).reshape(N, C, -1))  # (N, O, XYZ)
        return out.reshape(N, O, X, Y, Z)
    out = np.zeros((N, O, X, Y, Z), dtype=x.dtype)
    conv3_forward(_pad1(np.ascontiguousarray(x)), np.ascontiguousarray(w), out)
    return out


def _conv_weight_grad(x: np.ndarray, gout: np.ndarray, kshape) -> np.ndarray:
    from ._kernels import conv3_weight_grad

    kx, ky, kz = kshape
    if kx == ky == kz == 1:
        dw = np.tensordot(gout, x, axes=([0, 2, 3, 4], [0, 2, 3, 4]))  # (O, C)
        return dw[:, :, None, None, None]
    O, C = gout.shape[1], x.shape[1]
    dw = np.zeros((O, C, 3, 3, 3), dtype=x.dtype)
    conv3_weight_grad(_pad1(np.ascontiguousarray(x)), np.ascontiguousarray(gout), dw)
    return dw


def _conv_input_grad(gout: np.ndarray, w: np.ndarray) -> np.ndarray:
    # Same-padded correlation with the spatially flipped, channel-swapped kernel.
    w_flip = w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
    return _conv_same(gout, np.ascontiguousarray(w_flip))


def _fw_conv(inputs, params, graph):
    x, w = inputs[0], inputs[1]
    out = _conv_same(x, w)
    if len(inputs) == 3:
        out = out + inputs[2]
    return out, None


def _bw_conv(gout, inputs, out, cache, params, needed):
    x, w = inputs[0], inputs[1]
    gout = np.ascontiguousarray(gout)
    grads = [
        _conv_input_grad(gout, w) if needed[0] else None,
        _conv_weight_grad(x, gout, w.shape[2:]) if needed[1] else None,
    ]
    if len(inputs) == 3:
        grads.append(np.sum(gout, axis=(0, 2, 3, 4), keepdims=True) if needed[2] else None)
    return grads


def _check_kernel(kind, w):
    k = w.shape[2:]
    want = (3, 3, 3) if kind == "conv3" else (1, 1, 1)
    if k != want:
        raise ShapeError(f"{kind} kernel must be {want}", w.shape)


def _fw_conv3(inputs, params, graph):
    _check_kernel("conv3", inputs[1])
    return _fw_conv(inputs, params, graph)


def _fw_conv1(inputs, params, graph):
    _check_kernel("conv1", inputs[1])
    return _fw_conv(inputs, params, graph)


# ---------------------------------------------------------------------------
# Blockwise transpose convolution (kernel == stride), z-only or general
# ---------------------------------------------------------------------------

def _fw_convtranspose(inputs, params, graph):
    x, w = inputs[0], inputs[1]
    ux, uy, uz = params["factor"]
    N, C, X, Y, Z = x.shape
    O, Cw, kx, ky, kz = w.shape
    if (kx, ky, kz) != (ux, uy, uz) or Cw != C:
        raise ShapeError("transpose kernel must be (O, C, ux, uy, uz)", w.shape, (None, C, ux, uy, uz))
    # out[n,o, ux*x+i, uy*y+j, uz*z+k] = sum_c w[o,c,i,j,k] x[n,c,x,y,z]
    core = np.tensordot(x, w, axes=(1, 1))  # (N, X, Y, Z, O, ux, uy, uz)
    core = core.transpose(0, 4, 1, 5, 2, 6, 3, 7)  # (N, O, X, ux, Y, uy, Z, uz)
    out = np.ascontiguousarray(core).reshape(N, O, X * ux, Y * uy, Z * uz)
    if len(inputs) == 3:
        out = out + inputs[2]
    return out, None


def _bw_convtranspose(gout, inputs, out, cache, params, needed=None):
    x, w = inputs[0], inputs[1]
    ux, uy, uz = params["factor"]
    N, C, X, Y, Z = x.shape
    O = w.shape[0]
    g = gout.reshape(N, O, X, ux, Y, uy, Z, uz).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    g = np.ascontiguousarray(g)  # (N, O, X, Y, Z, ux, uy, uz)
    dx = np.tensordot(g, w, axes=([1, 5, 6, 7], [0, 2, 3, 4]))  # (N, X, Y, Z, C)
    dx = np.ascontiguousarray(dx.transpose(0, 4, 1, 2, 3))
    dw = np.tensordot(g, x, axes=([0, 2, 3, 4], [0, 2, 3, 4]))  # (O, ux, uy, uz, C)
    dw = np.ascontiguousarray(dw.transpose(0, 4, 1, 2, 3))
    grads = [dx, dw]
    if len(inputs) == 3:
        grads.append(np.sum(gout, axis=(0, 2, 3, 4), keepdims=True))
    return grads


def _fw_convtranspose_z(inputs, params, graph):
    u = int(params["u"])
    params = dict(params)
    params["factor"] = (1, 1, u)
    out, cache = _fw_convtranspose(inputs, params, graph)
    return out, cache


def _bw_convtranspose_z(gout, inputs, out, cache, params, needed=None):
    params = dict(params)
    params["factor"] = (1, 1, int(params["u"]))
    return _bw_convtranspose(gout, inputs, out, cache, params, needed)


# ---------------------------------------------------------------------------
# Pooling, activation, normalization
# ---------------------------------------------------------------------------

def _fw_maxpool(inputs, params, graph):
    (x,) = inputs
    wx, wy, wz = params["window"]
    N, C, X, Y, Z = x.shape
    if X % wx or Y % wy or Z % wz:
        raise ShapeError(f"dims not divisible by pool window {params['window']}", x.shape)
    Xo, Yo, Zo = X // wx, Y // wy, Z // wz
    blocks = x.reshape(N, C, Xo, wx, Yo, wy, Zo, wz).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    blocks = np.ascontiguousarray(blocks).reshape(N, C, Xo, Yo, Zo, wx * wy * wz)
    arg = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _bw_maxpool(gout, inputs, out, cache, params, needed=None):
    (x,) = inputs
    wx, wy, wz = params["window"]
    N, C, X, Y, Z = x.shape
    Xo, Yo, Zo = X // wx, Y // wy, Z // wz
    scattered = np.zeros((N, C, Xo, Yo, Zo, wx * wy * wz), dtype=gout.dtype)
    np.put_along_axis(scattered, cache[..., None], gout[..., None], axis=-1)
    dx = scattered.reshape(N, C, Xo, Yo, Zo, wx, wy, wz).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return [np.ascontiguousarray(dx).reshape(N, C, X, Y, Z)]


def _fw_relu(inputs, params, graph):
    (x,) = inputs
    return np.maximum(x, 0.0), None


def _bw_relu(gout, inputs, out, cache, params, needed=None):
    return [gout * (inputs[0] > 0.0)]


def _fw_batchnorm(inputs, params, graph):
    x, gamma, beta = inputs
    state: BatchNormState = params["state"]
    eps = params.get("eps", 1e-5)
    if params.get("training", True):
        mu = x.mean(axis=(0, 2, 3, 4), keepdims=True)
        var = np.mean(x * x, axis=(0, 2, 3, 4), keepdims=True) - mu * mu
        if graph.mutate_state:
            momentum = params.get("momentum", 0.99)
            state.running_mean = momentum * state.running_mean + (1.0 - momentum) * mu
            state.running_var = momentum * state.running_var + (1.0 - momentum) * var
    else:
        mu = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    out = gamma * xhat + beta
    return out, (xhat, inv_std)


def _bw_batchnorm(gout, inputs, out, cache, params, needed=None):
    x, gamma, beta = inputs
    xhat, inv_std = cache
    axes = (0, 2, 3, 4)
    dgamma = np.sum(gout * xhat, axis=axes, keepdims=True)
    dbeta = np.sum(gout, axis=axes, keepdims=True)
    dxhat = gout * gamma
    if params.get("training", True):
        m = x.shape[0] * x.shape[2] * x.shape[3] * x.shape[4]
        dx = inv_std / m * (m * dxhat - np.sum(dxhat, axis=axes, keepdims=True) - xhat * np.sum(dxhat * xhat, axis=axes, keepdims=True))
    else:
        dx = dxhat * inv_std
    return [dx, dgamma, dbeta]


# ---------------------------------------------------------------------------
# Structure ops and loss
# ---------------------------------------------------------------------------

def _fw_concat(inputs, params, graph):
    base = inputs[0].shape
    for arr in inputs[1:]:
        if arr.shape[0] != base[0] or arr.shape[2:] != base[2:]:
            raise ShapeError("concat inputs must agree outside the channel axis", base, arr.shape)
    sizes = [arr.shape[1] for arr in inputs]
    return np.concatenate(inputs, axis=1), sizes


def _bw_concat(gout, inputs, out, cache, params, needed=None):
    splits = np.cumsum(cache)[:-1]
    return list(np.split(gout, splits, axis=1))


def _fw_add(inputs, params, graph):
    a, b = inputs
    if a.shape != b.shape:
        raise ShapeError("add needs matching shapes", a.shape, b.shape)
    return a + b, None


def _bw_add(gout, inputs, out, cache, params, needed=None):
    return [gout, gout]


def _fw_mse(inputs, params, graph):
    a, b = inputs
    if a.shape != b.shape:
        raise ShapeError("mse needs matching shapes", a.shape, b.shape)
    diff = a - b
    val = np.mean(diff * diff)
    return np.full((1, 1, 1, 1, 1), val, dtype=a.dtype), diff


def _bw_mse(gout, inputs, out, cache, params, needed=None):
    diff = cache
    g = float(gout.reshape(-1)[0])
    scale = 2.0 * g / diff.size
    return [scale * diff, -scale * diff]


def _fw_masksemble(inputs, params, graph):
    x, masks = inputs[0], params["masks"]
    m, c = masks.shape
    N, C = x.shape[0], x.shape[1]
    if C != c:
        raise ShapeError("mask channel count mismatch", (m, c), x.shape)
    if N % m:
        raise ShapeError(f"batch size must be divisible by mask count {m}", x.shape)
    group = np.repeat(np.arange(m), N // m)
    factor = masks[group][:, :, None, None, None].astype(x.dtype)
    return x * factor, factor


def _bw_masksemble(gout, inputs, out, cache, params, needed=None):
    return [gout * cache]


_FORWARD = {
    "conv3": _fw_conv3,
    "conv1": _fw_conv1,
    "convtranspose": _fw_convtranspose,
    "convtranspose_z": _fw_convtranspose_z,
    "maxpool": _fw_maxpool,
    "relu": _fw_relu,
    "batchnorm": _fw_batchnorm,
    "concat_channels": _fw_concat,
    "add": _fw_add,
    "mse": _fw_mse,
    "masksemble_mask": _fw_masksemble,
}

_BACKWARD = {
    "conv3": _bw_conv,
    "conv1": _bw_conv,
    "convtranspose": _bw_convtranspose,
    "convtranspose_z": _bw_convtranspose_z,
    "maxpool": _bw_maxpool,
    "relu": _bw_relu,
    "batchnorm": _bw_batchnorm,
    "concat_channels": _bw_concat,
    "add": _bw_add,
    "mse": _bw_mse,
    "masksemble_mask": _bw_masksemble,
}
