"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array (float64 by default, float32 selectable) and
records the operations applied to it. Calling ``backward()`` on a scalar
result walks the recorded graph in reverse topological order and deposits
gradients on every leaf created with ``requires_grad=True``. Gradients
accumulate additively when a tensor fans out to multiple consumers.

Feature maps use the layout (batch, channels, height, width). Tensor data
must not be mutated after it has participated in a recorded computation;
parameter updates happen between recordings.
"""

from __future__ import annotations

import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float64

_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}

_MAGIC = b"PSTN"
_FORMAT_VERSION = 1


class Tensor:
    """N-dimensional array node of the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn",
                 "_backward_done")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in _DTYPE_CODES:
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.size == 0:
            raise ValueError("tensors must have at least one element")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._backward_done = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    # -- graph plumbing -------------------------------------------------------

    def _accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep from a scalar root.

        Every reachable leaf with requires_grad accumulates its total
        derivative in ``.grad``. A graph can be swept once; re-recording is
        required before the next backward call.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar root, got shape {self.data.shape}")
        if self._backward_done:
            raise RuntimeError("backward() already called on this graph; "
                               "re-record the computation before calling again")

        order = []
        seen = set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
            node._backward_done = True


def _node(data, parents, backward_fn):
    """Build an op-result tensor; records the edge only if a parent needs grad."""
    needs = any(p.requires_grad or p._parents for p in parents)
    out = Tensor(data)
    if needs:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


# -- elementwise and reduction ops --------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        if a.requires_grad or a._parents:
            a._accumulate_grad(g)
        if b.requires_grad or b._parents:
            b._accumulate_grad(g)

    return _node(a.data + b.data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        a._accumulate_grad(g * c)

    return _node(a.data * c, (a,), bwd)


def tensor_sum(a: Tensor) -> Tensor:
    def bwd(g):
        a._accumulate_grad(np.full_like(a.data, g.reshape(-1)[0]))

    return _node(np.sum(a.data).reshape(()), (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient at 0 routes to 0

    def bwd(g):
        a._accumulate_grad(g * mask)

    return _node(np.maximum(a.data, 0), (a,), bwd)


def elementwise_mean(inputs) -> Tensor:
    """Mean of same-shape tensors; gradient distributes 1/n to each input."""
    inputs = list(inputs)
    if not inputs:
        raise ValueError("elementwise_mean: empty input list")
    shape = inputs[0].shape
    for t in inputs:
        if t.shape != shape:
            raise ValueError(
                f"elementwise_mean: shape mismatch {t.shape} vs {shape}")
    n = len(inputs)
    acc = inputs[0].data
    for t in inputs[1:]:
        acc = acc + t.data

    def bwd(g):
        gi = g / n
        for t in inputs:
            if t.requires_grad or t._parents:
                t._accumulate_grad(gi)

    return _node(acc / n, tuple(inputs), bwd)


def mse_loss(prediction: Tensor, target: Tensor) -> Tensor:
    if prediction.shape != target.shape:
        raise ValueError(
            f"mse_loss: shape mismatch {prediction.shape} vs {target.shape}")
    diff = prediction.data - target.data
    n = diff.size

    def bwd(g):
        g0 = g.reshape(-1)[0]
        coeff = 2.0 * g0 / n
        if prediction.requires_grad or prediction._parents:
            prediction._accumulate_grad(coeff * diff)
        if target.requires_grad or target._parents:
            target._accumulate_grad(-coeff * diff)

    return _node(np.mean(diff * diff).reshape(()), (prediction, target), bwd)


# -- convolution ---------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, same_padding=True) -> Tensor:
    """2-D convolution (cross-correlation), stride 1, optional same padding.

    weight: (out_ch, in_ch, k, k) with odd k when same_padding is set;
    bias: (out_ch,). Differentiable w.r.t. all three inputs.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv2d: input must be 4-D (N,C,H,W), got {x.shape}")
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d: weight must be (O,C,k,k), got {weight.shape}")
    out_ch, in_ch, k, _ = weight.shape
    n, cx, h, w = x.shape
    if cx != in_ch:
        raise ValueError(
            f"conv2d: input has {cx} channels but weight expects {in_ch}")
    if bias.data.shape != (out_ch,):
        raise ValueError(f"conv2d: bias must be ({out_ch},), got {bias.shape}")
    if same_padding and k % 2 == 0:
        raise ValueError("conv2d: same padding requires an odd kernel size")

    pad = k // 2 if same_padding else 0
    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x.data
    ho = xp.shape[2] - k + 1
    wo = xp.shape[3] - k + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {k} larger than input {h}x{w}")

    # im2col: (N, Ho, Wo, C*k*k) rows against (C*k*k, O) columns
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, in_ch * k * k)
    wmat = weight.data.reshape(out_ch, in_ch * k * k).T
    out = cols @ wmat + bias.data
    out = out.reshape(n, ho, wo, out_ch).transpose(0, 3, 1, 2)

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, out_ch)
        if bias.requires_grad or bias._parents:
            bias._accumulate_grad(gmat.sum(axis=0))
        if weight.requires_grad or weight._parents:
            gw = (cols.T @ gmat).T.reshape(out_ch, in_ch, k, k)
            weight._accumulate_grad(gw)
        if x.requires_grad or x._parents:
            gcols = (gmat @ wmat.T).reshape(n, ho, wo, in_ch, k, k)
            gcols = gcols.transpose(0, 3, 4, 5, 1, 2)  # (N,C,k,k,Ho,Wo)
            gx = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gx[:, :, i:i + ho, j:j + wo] += gcols[:, :, i, j]
            if pad:
                gx = gx[:, :, pad:pad + h, pad:pad + w]
            x._accumulate_grad(gx)

    return _node(out, (x, weight, bias), bwd)


# -- max pooling ----------------------------------------------------------------


def max_pool2d(x: Tensor, k: int, s: int) -> Tensor:
    """Left-anchored max pooling.

    The window for output position z covers input [s*z, s*z + k - 1]; cells
    past the edge read -inf. Output spatial extents are ceil(H/s) x ceil(W/s),
    so stride 1 preserves extents. Backward routes each upstream value to the
    first argmax in row-major window scan order.
    """
    if k < 1 or s < 1:
        raise ValueError(f"max_pool2d: kernel and stride must be >= 1, "
                         f"got k={k}, s={s}")
    if x.data.ndim != 4:
        raise ValueError(f"max_pool2d: input must be 4-D, got {x.shape}")
    n, c, h, w = x.shape
    ho = -(-h // s)
    wo = -(-w // s)
    ph = s * (ho - 1) + k
    pw = s * (wo - 1) + k
    if ph > h or pw > w:
        xp = np.pad(x.data, ((0, 0), (0, 0), (0, ph - h), (0, pw - w)),
                    constant_values=-np.inf)
    else:
        xp = x.data

    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    flat = windows.reshape(n, c, ho, wo, k * k)
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gi = np.zeros((n, c, max(h, ph), max(w, pw)), dtype=x.data.dtype)
        rows = idx // k + (np.arange(ho) * s)[None, None, :, None]
        cols = idx % k + (np.arange(wo) * s)[None, None, None, :]
        bi = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gi, (bi, ci, rows, cols), g)
        x._accumulate_grad(gi[:, :, :h, :w])

    return _node(out, (x,), bwd)


# -- bilinear resize --------------------------------------------------------------


def _resize_axis_coords(n_in: int, n_out: int):
    """Corner-aligned source coordinates plus gather indices and weights."""
    if n_out == 1:
        src = np.zeros(1)
    else:
        src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.floor(src).astype(np.intp)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear_resize(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Corner-aligned bilinear interpolation on the spatial axes."""
    if target_h < 1 or target_w < 1:
        raise ValueError("bilinear_resize: target extents must be >= 1")
    if x.data.ndim != 4:
        raise ValueError(f"bilinear_resize: input must be 4-D, got {x.shape}")
    n, c, h, w = x.shape
    r0, r1, fr = _resize_axis_coords(h, target_h)
    c0, c1, fc = _resize_axis_coords(w, target_w)
    fr = fr[:, None]
    fc = fc[None, :]
    w00 = (1 - fr) * (1 - fc)
    w01 = (1 - fr) * fc
    w10 = fr * (1 - fc)
    w11 = fr * fc
    d = x.data
    out = (w00 * d[:, :, r0[:, None], c0[None, :]]
           + w01 * d[:, :, r0[:, None], c1[None, :]]
           + w10 * d[:, :, r1[:, None], c0[None, :]]
           + w11 * d[:, :, r1[:, None], c1[None, :]])
    out = out.astype(d.dtype, copy=False)

    def bwd(g):
        gx = np.zeros_like(d)
        bi = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        for wgt, ri, cj in ((w00, r0, c0), (w01, r0, c1),
                            (w10, r1, c0), (w11, r1, c1)):
            np.add.at(gx, (bi, ci, ri[None, None, :, None],
                           cj[None, None, None, :]), g * wgt)
        x._accumulate_grad(gx)

    return _node(out, (x,), bwd)


# -- serialization -----------------------------------------------------------------


def save_tensor(f, t: Tensor) -> None:
    """Write one tensor in the flat binary format (magic PSTN, little-endian)."""
    close = False
    if isinstance(f, (str, bytes)) or hasattr(f, "__fspath__"):
        f = open(f, "wb")
        close = True
    try:
        arr = t.data
        f.write(_MAGIC)
        f.write(struct.pack("<I", _FORMAT_VERSION))
        f.write(struct.pack("<I", _DTYPE_CODES[arr.dtype]))
        f.write(struct.pack("<I", arr.ndim))
        for extent in arr.shape:
            f.write(struct.pack("<Q", extent))
        f.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    finally:
        if close:
            f.close()


def load_tensor(f) -> Tensor:
    close = False
    if isinstance(f, (str, bytes)) or hasattr(f, "__fspath__"):
        f = open(f, "rb")
        close = True
    try:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"bad tensor file magic: {magic!r}")
        version, = struct.unpack("<I", f.read(4))
        if version != _FORMAT_VERSION:
            raise ValueError(f"unsupported tensor format version {version}")
        code, = struct.unpack("<I", f.read(4))
        if code not in _CODE_DTYPES:
            raise ValueError(f"unknown dtype code {code}")
        dtype = _CODE_DTYPES[code]
        rank, = struct.unpack("<I", f.read(4))
        shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        raw = f.read(count * dtype.itemsize)
        arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype)
        return Tensor(arr.reshape(shape))
    finally:
        if close:
            f.close()
