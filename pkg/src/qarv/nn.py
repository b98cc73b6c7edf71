"""Neural network ops and layers on top of the autodiff engine.

Functional ops (conv2d, depthwise_conv2d, the norms, pixel_shuffle_up,
gelu, pad2d) each carry a hand-derived backward pass.  Layer classes are
thin stateful wrappers that own Parameters; ``Module`` provides recursive,
deterministically ordered parameter discovery for the optimizer and the
checkpoint writer.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import special as _special

from .autodiff import Parameter, Tensor, concat

# ---------------------------------------------------------------------------
# padding


def pad2d(x: Tensor, pad: Sequence[int], mode: str = "zero") -> Tensor:
    """Pad the two trailing (spatial) axes of an NCHW tensor.

    pad = (top, bottom, left, right).  mode "zero" or "replicate"
    (replicate repeats the edge rows/columns).
    """
    pt, pb, pl, pr = pad
    if min(pt, pb, pl, pr) < 0:
        raise ValueError("negative padding")
    if (pt, pb, pl, pr) == (0, 0, 0, 0):
        return x
    a = x
    n, c, h, w = a.shape
    widths = ((0, 0), (0, 0), (pt, pb), (pl, pr))
    if mode == "zero":
        out_data = np.pad(a.data, widths, mode="constant")

        def bw(g):
            if a.requires_grad:
                a._accumulate(np.ascontiguousarray(g[:, :, pt:pt + h, pl:pl + w]))

    elif mode == "replicate":
        out_data = np.pad(a.data, widths, mode="edge")

        def bw(g):
            if not a.requires_grad:
                return
            # clip-gather is separable, so fold rows then columns
            gh = g[:, :, pt:pt + h, :].copy()
            if pt:
                gh[:, :, 0, :] += g[:, :, :pt, :].sum(axis=2)
            if pb:
                gh[:, :, -1, :] += g[:, :, pt + h:, :].sum(axis=2)
            gw = gh[:, :, :, pl:pl + w].copy()
            if pl:
                gw[:, :, :, 0] += gh[:, :, :, :pl].sum(axis=3)
            if pr:
                gw[:, :, :, -1] += gh[:, :, :, pl + w:].sum(axis=3)
            a._accumulate(gw)

    else:
        raise ValueError(f"unknown padding mode {mode!r}")
    return Tensor._make(out_data, (a,), bw)


# ---------------------------------------------------------------------------
# convolutions


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols, ho, wo


def _col2im(cols: np.ndarray, xp_shape: tuple, stride: int) -> np.ndarray:
    n, c, kh, kw, ho, wo = cols.shape
    xp = np.zeros(xp_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return xp


def _conv1x1(x: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    """Pointwise conv as a single channel-axis contraction."""
    a = x
    o, c = weight.shape[:2]
    wmat = weight.data.reshape(o, c)
    out_data = np.ascontiguousarray(
        np.tensordot(wmat, a.data, axes=([1], [1])).transpose(1, 0, 2, 3))
    if bias is not None:
        out_data += bias.data.reshape(1, o, 1, 1)
    parents = (a, weight) if bias is None else (a, weight, bias)

    def bw(g):
        if weight.requires_grad:
            gw = np.tensordot(g, a.data, axes=([0, 2, 3], [0, 2, 3]))
            weight._accumulate(gw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if a.requires_grad:
            gx = np.tensordot(wmat.T, g, axes=([1], [1])).transpose(1, 0, 2, 3)
            a._accumulate(np.ascontiguousarray(gx))

    return Tensor._make(out_data, parents, bw)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, pad_mode: str = "zero") -> Tensor:
    """Cross-correlation of an NCHW tensor with an (O, C, kh, kw) kernel.

    Output spatial size is floor((H + 2*pad - k) / stride) + 1.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OCKK weight")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]}, weight {weight.shape[1]}")
    if weight.shape[2] == weight.shape[3] == 1 and stride == 1 and padding == 0:
        return _conv1x1(x, weight, bias)
    xp = pad2d(x, (padding,) * 4, mode=pad_mode) if padding else x
    a = xp
    o, c, kh, kw = weight.shape
    n = a.shape[0]
    cols, ho, wo = _im2col(a.data, kh, kw, stride)
    cols2 = cols.reshape(n, c * kh * kw, ho * wo)
    wmat = weight.data.reshape(o, c * kh * kw)
    flat = cols2.transpose(1, 0, 2).reshape(c * kh * kw, n * ho * wo)
    out_data = (wmat @ flat).reshape(o, n, ho * wo).transpose(1, 0, 2)
    out_data = np.ascontiguousarray(out_data).reshape(n, o, ho, wo)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, o, 1, 1)
    parents = (a, weight) if bias is None else (a, weight, bias)

    def bw(g):
        gy = g.reshape(n, o, ho * wo)
        gy_flat = np.ascontiguousarray(gy.transpose(1, 0, 2)).reshape(o, n * ho * wo)
        if weight.requires_grad:
            gw = gy_flat @ flat.T
            weight._accumulate(gw.reshape(o, c, kh, kw))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gy.sum(axis=(0, 2)))
        if a.requires_grad:
            gcols = (wmat.T @ gy_flat).reshape(c * kh * kw, n, ho * wo)
            gcols = np.ascontiguousarray(gcols.transpose(1, 0, 2))
            gcols = gcols.reshape(n, c, kh, kw, ho, wo)
            a._accumulate(_col2im(gcols, a.shape, stride))

    return Tensor._make(out_data, parents, bw)


# tap index tables per (padded spatial shape, kernel), shared by both
# directions of the depthwise conv
_DW_INDEX_CACHE: dict = {}


def _dw_indices(hp: int, wp: int, kh: int, kw: int):
    key = (hp, wp, kh, kw)
    cached = _DW_INDEX_CACHE.get(key)
    if cached is None:
        ho, wo = hp - kh + 1, wp - kw + 1
        p = np.arange(ho * wo)
        py, px = p // wo, p % wo
        taps = np.arange(kh * kw)
        ti, tj = taps // kw, taps % kw
        q = (py[None, :] + ti[:, None]) * wp + (px[None, :] + tj[:, None])  # (KK, HoWo)
        flat = p[None, :] * (hp * wp) + q
        cached = (p, q, flat)
        _DW_INDEX_CACHE[key] = cached
    return cached


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     padding: int = 0, pad_mode: str = "zero") -> Tensor:
    """Per-channel (groups == channels) stride-1 convolution; weight is (C, kh, kw).

    Implemented as a per-channel dense (out-pixel x in-pixel) matrix so
    every direction is one batched matmul; sized for small feature maps.
    """
    if x.ndim != 4 or weight.ndim != 3:
        raise ValueError("depthwise_conv2d expects NCHW input and CKK weight")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"channel mismatch: input {x.shape[1]}, weight {weight.shape[0]}")
    xp = pad2d(x, (padding,) * 4, mode=pad_mode) if padding else x
    a = xp
    c, kh, kw = weight.shape
    n, _, hp, wp = a.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    p, q, flat = _dw_indices(hp, wp, kh, kw)
    mat = np.zeros((c, ho * wo, hp * wp), dtype=a.data.dtype)
    mat[:, p[None, :], q] = weight.data.reshape(c, kh * kw)[:, :, None]
    xpf = np.ascontiguousarray(a.data.transpose(1, 2, 3, 0)).reshape(c, hp * wp, n)
    out = mat @ xpf  # (C, HoWo, N)
    out_data = np.ascontiguousarray(out.reshape(c, ho, wo, n).transpose(3, 0, 1, 2))
    if bias is not None:
        out_data += bias.data.reshape(1, c, 1, 1)
    parents = (a, weight) if bias is None else (a, weight, bias)

    def bw(g):
        gf = np.ascontiguousarray(g.transpose(1, 2, 3, 0)).reshape(c, ho * wo, n)
        if weight.requires_grad:
            t = gf @ xpf.transpose(0, 2, 1)  # (C, HoWo, HpWp)
            gw = t.reshape(c, -1)[:, flat].sum(axis=2)
            weight._accumulate(gw.reshape(c, kh, kw))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if a.requires_grad:
            gxf = mat.transpose(0, 2, 1) @ gf  # (C, HpWp, N)
            gx = gxf.reshape(c, hp, wp, n).transpose(3, 0, 1, 2)
            a._accumulate(np.ascontiguousarray(gx))

    return Tensor._make(out_data, parents, bw)


# ---------------------------------------------------------------------------
# normalization

_NORM_EPS = 1e-6


def _normalize(x: Tensor, axes: tuple) -> Tensor:
    """Zero-mean unit-variance over `axes` (no affine), eps 1e-6."""
    reduced = 1
    for ax in axes:
        reduced *= x.shape[ax]
    if reduced < 2:
        raise ValueError("normalization needs at least 2 elements along the reduced axes")
    a = x
    mu = a.data.mean(axis=axes, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(_NORM_EPS, dtype=a.data.dtype))
    out_data = xc * inv

    def bw(g):
        if a.requires_grad:
            gm = g.mean(axis=axes, keepdims=True)
            gy = (g * out_data).mean(axis=axes, keepdims=True)
            a._accumulate(inv * (g - gm - out_data * gy))

    return Tensor._make(out_data, (a,), bw)


def layer_norm(x: Tensor) -> Tensor:
    """Channelwise normalization per spatial position (NCHW, axis 1)."""
    return _normalize(x, (1,))


def instance_norm(x: Tensor) -> Tensor:
    """Per-(sample, channel) normalization over the spatial axes."""
    return _normalize(x, (2, 3))


def group_norm(x: Tensor, num_groups: int) -> Tensor:
    """Normalization over (channels-in-group, H, W) per sample and group."""
    n, c, h, w = x.shape
    if c % num_groups != 0:
        raise ValueError(f"{c} channels not divisible into {num_groups} groups")
    g = x.reshape(n, num_groups, c // num_groups, h, w)
    return _normalize(g, (2, 3, 4)).reshape(n, c, h, w)


def group_size_for(channels: int, target: int = 32) -> int:
    """Largest divisor of `channels` that does not exceed `target`."""
    for size in range(min(target, channels), 0, -1):
        if channels % size == 0:
            return size
    return 1


# ---------------------------------------------------------------------------
# activations / resampling


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    a = x
    inner = _special.erf(a.data * np.asarray(math.sqrt(0.5), dtype=a.data.dtype))
    out_data = 0.5 * a.data * (1.0 + inner)

    def bw(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * a.data * a.data) * np.asarray(1.0 / math.sqrt(2 * math.pi),
                                                              dtype=a.data.dtype)
            a._accumulate(g * (0.5 * (1.0 + inner) + a.data * pdf))

    return Tensor._make(out_data, (a,), bw)


def pixel_shuffle_up(x: Tensor, factor: int) -> Tensor:
    """Rearrange (N, C*r^2, H, W) -> (N, C, H*r, W*r) (sub-pixel upsampling)."""
    n, c, h, w = x.shape
    r = factor
    if c % (r * r) != 0:
        raise ValueError(f"{c} channels not divisible by {r}^2")
    co = c // (r * r)
    a = x

    def fwd(d):
        out = d.reshape(n, co, r, r, h, w)
        out = out.transpose(0, 1, 4, 2, 5, 3)  # N, C, H, r, W, r
        return np.ascontiguousarray(out).reshape(n, co, h * r, w * r)

    def bw(g):
        if a.requires_grad:
            gg = g.reshape(n, co, h, r, w, r)
            gg = np.ascontiguousarray(gg.transpose(0, 1, 3, 5, 2, 4))
            a._accumulate(gg.reshape(n, c, h, w))

    return Tensor._make(fwd(a.data), (a,), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight.T + bias for 2-D x (batch, features)."""
    out = x.matmul(weight.transpose((1, 0)))
    if bias is not None:
        out = out + bias
    return out


# ---------------------------------------------------------------------------
# modules


class Module:
    """Base class with recursive parameter discovery (insertion order).

    Parameters are found on attributes that are Parameter, Module, or
    arbitrarily nested lists/tuples of them.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, val in vars(self).items():
            yield from _walk_parameters(prefix + name, val)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def parameter_dict(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for name, p in self.named_parameters():
            if name in out:
                raise ValueError(f"duplicate parameter name {name!r}")
            out[name] = p
        return out

    def assign_parameter_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def _walk_parameters(name: str, val) -> Iterator[tuple[str, "Parameter"]]:
    if isinstance(val, Parameter):
        yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for k, item in enumerate(val):
            yield from _walk_parameters(f"{name}.{k}", item)


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1,
                 padding: int = 0, pad_mode: str = "zero", bias: bool = True,
                 zero_init: bool = False, *, rng: np.random.Generator, dtype=np.float32):
        self.stride = stride
        self.padding = padding
        self.pad_mode = pad_mode
        fan_in = cin * kernel * kernel
        bound = 1.0 / math.sqrt(fan_in)
        wdata = (np.zeros((cout, cin, kernel, kernel), dtype=dtype) if zero_init
                 else _uniform(rng, (cout, cin, kernel, kernel), bound, dtype))
        self.weight = Parameter(wdata)
        self.bias = Parameter(np.zeros(cout, dtype=dtype) if zero_init
                              else _uniform(rng, (cout,), bound, dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride,
                      padding=self.padding, pad_mode=self.pad_mode)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, kernel: int = 7, padding: int = 3,
                 pad_mode: str = "zero", *, rng: np.random.Generator, dtype=np.float32):
        self.padding = padding
        self.pad_mode = pad_mode
        bound = 1.0 / math.sqrt(kernel * kernel)
        self.weight = Parameter(_uniform(rng, (channels, kernel, kernel), bound, dtype))
        self.bias = Parameter(_uniform(rng, (channels,), bound, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return depthwise_conv2d(x, self.weight, self.bias,
                                padding=self.padding, pad_mode=self.pad_mode)


class Linear(Module):
    def __init__(self, fin: int, fout: int, bias: bool = True, zero_init: bool = False,
                 *, rng: np.random.Generator, dtype=np.float32):
        bound = 1.0 / math.sqrt(fin)
        wdata = (np.zeros((fout, fin), dtype=dtype) if zero_init
                 else _uniform(rng, (fout, fin), bound, dtype))
        self.weight = Parameter(wdata)
        self.bias = Parameter(np.zeros(fout, dtype=dtype) if zero_init
                              else _uniform(rng, (fout,), bound, dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


__all__ = [
    "Conv2d", "DepthwiseConv2d", "Linear", "Module",
    "concat", "conv2d", "depthwise_conv2d", "gelu", "group_norm",
    "group_size_for", "instance_norm", "layer_norm", "linear",
    "pad2d", "pixel_shuffle_up",
]
