"""Convolution variants and the auxiliary layers a FasterNet needs.

All convolutions lower to im2col + GEMM except depthwise, which accumulates
shifted input windows per channel (there is no cross-channel reduction to
hand to a GEMM).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np
from scipy.special import erf

from .errors import ParameterError, ShapeError, SpecError
from .tensor import (DTYPE, Tensor, _col2im, _im2col, concat_channels,
                     output_size, slice_channels, uniform_buffer)

KINDS = ("regular", "depthwise", "group", "partial", "pointwise")


def partial_channels(ratio: float, channels: int) -> int:
    """Number of convolved channels: ``round(ratio * channels)`` (half-up), at least 1."""
    return max(1, math.floor(ratio * channels + 0.5))


def format_ratio(ratio: float) -> str:
    frac = Fraction(ratio).limit_denominator(1024)
    return str(frac.numerator) if frac.denominator == 1 else f"{frac.numerator}/{frac.denominator}"


@dataclass(frozen=True)
class ConvSpec:
    """Operator kind plus geometry.

    ``pad`` defaults to ``(k - 1) // 2`` for stride 1 ("same" output) and to 0
    otherwise, which matches the non-overlapping embedding/merging layers.
    ``ratio`` and ``slice_end`` only apply to partial convolutions and
    ``groups`` only to group convolutions.
    """

    kind: str
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: Optional[int] = None
    groups: int = 1
    ratio: float = 0.25
    slice_end: str = "first"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown convolution kind {self.kind!r}")
        if self.pad is None:
            object.__setattr__(self, "pad", (self.kernel - 1) // 2 if self.stride == 1 else 0)
        cin, cout, k = self.in_channels, self.out_channels, self.kernel
        if cin < 1 or cout < 1 or k < 1 or self.stride < 1 or self.pad < 0:
            raise SpecError(f"invalid geometry in {self}")
        if self.kind == "group":
            g = self.groups
            if g < 1 or cin % g or cout % g:
                raise SpecError(f"groups={g} must divide in={cin} and out={cout}")
        elif self.groups != 1 and self.kind != "depthwise":
            raise SpecError(f"groups only applies to group convolutions, got {self.groups}")
        if self.kind == "depthwise":
            if cin != cout:
                raise SpecError("depthwise convolution needs in_channels == out_channels")
            object.__setattr__(self, "groups", cin)
        if self.kind == "pointwise" and (k != 1 or self.stride != 1 or self.pad != 0):
            raise SpecError("pointwise convolution requires k=1, stride=1, pad=0")
        if self.kind == "partial":
            if cin != cout:
                raise SpecError("partial convolution keeps the channel count: in must equal out")
            if self.stride != 1:
                raise SpecError("partial convolution requires stride 1 so untouched channels align")
            if k % 2 == 0 or self.pad != (k - 1) // 2:
                raise SpecError("partial convolution needs an odd kernel with 'same' padding")
            if not 0 < self.ratio <= 1:
                raise SpecError(f"partial ratio must be in (0, 1], got {self.ratio}")
            if self.slice_end not in ("first", "last"):
                raise SpecError(f"slice_end must be 'first' or 'last', got {self.slice_end!r}")

    @classmethod
    def regular(cls, in_channels, out_channels, kernel=3, stride=1, pad=None):
        return cls("regular", in_channels, out_channels, kernel, stride, pad)

    @classmethod
    def depthwise(cls, channels, kernel=3, stride=1, pad=None):
        return cls("depthwise", channels, channels, kernel, stride, pad)

    @classmethod
    def group(cls, in_channels, out_channels, groups, kernel=3, stride=1, pad=None):
        return cls("group", in_channels, out_channels, kernel, stride, pad, groups=groups)

    @classmethod
    def partial(cls, channels, ratio=0.25, kernel=3, slice_end="first"):
        return cls("partial", channels, channels, kernel, ratio=ratio, slice_end=slice_end)

    @classmethod
    def pointwise(cls, in_channels, out_channels):
        return cls("pointwise", in_channels, out_channels, 1, 1, 0)

    @property
    def partial_channels(self) -> int:
        return partial_channels(self.ratio, self.in_channels)

    @property
    def conv_slice(self) -> tuple[int, int]:
        """(start, count) of the channels a partial convolution touches."""
        cp = self.partial_channels
        start = 0 if self.slice_end == "first" else self.in_channels - cp
        return start, cp

    def weight_shape(self) -> tuple[int, int, int, int]:
        k = self.kernel
        if self.kind == "depthwise":
            return (self.in_channels, 1, k, k)
        if self.kind == "group":
            return (self.out_channels, self.in_channels // self.groups, k, k)
        if self.kind == "partial":
            cp = self.partial_channels
            return (cp, cp, k, k)
        return (self.out_channels, self.in_channels, k, k)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return (output_size(h, self.kernel, self.stride, self.pad),
                output_size(w, self.kernel, self.stride, self.pad))

    def notation(self) -> str:
        """Layer string in the ``Conv_k_c_s`` / ``PConv_k_c_s_r`` convention."""
        k, c, s = self.kernel, self.out_channels, self.stride
        if self.kind == "partial":
            return f"PConv_{k}_{c}_{s}_{format_ratio(self.ratio)}"
        if self.kind == "depthwise":
            return f"DWConv_{k}_{c}_{s}"
        if self.kind == "group":
            return f"GConv_{k}_{c}_{s}_g{self.groups}"
        return f"Conv_{k}_{c}_{s}"


def parse_notation(text: str, in_channels: int) -> ConvSpec:
    """Inverse of :meth:`ConvSpec.notation` given the incoming channel count."""
    parts = text.split("_")
    try:
        head, k, c, s = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
        if head == "PConv":
            return ConvSpec.partial(c, float(Fraction(parts[4])), k)
        if head == "DWConv":
            return ConvSpec.depthwise(c, k, s)
        if head == "GConv":
            return ConvSpec.group(in_channels, c, int(parts[4].lstrip("g")), k, s)
        if head == "Conv":
            if k == 1 and s == 1:
                return ConvSpec.pointwise(in_channels, c)
            return ConvSpec.regular(in_channels, c, k, s)
    except (IndexError, ValueError) as exc:
        raise SpecError(f"cannot parse layer notation {text!r}") from exc
    raise SpecError(f"unknown layer notation {text!r}")


@dataclass
class ConvWeights:
    filter: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        self.filter = np.ascontiguousarray(self.filter, dtype=DTYPE)
        if self.bias is not None:
            self.bias = np.ascontiguousarray(self.bias, dtype=DTYPE)

    def check(self, spec: ConvSpec) -> None:
        if self.filter.shape != spec.weight_shape():
            raise ShapeError(f"filter shape {self.filter.shape} != {spec.weight_shape()} for {spec.notation()}")
        n_out = spec.weight_shape()[0]
        if self.bias is not None and self.bias.shape != (n_out,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({n_out},)")

    def param_count(self) -> int:
        return self.filter.size + (0 if self.bias is None else self.bias.size)


def init_conv_weights(spec: ConvSpec, seed: int, bias: bool = False) -> ConvWeights:
    """Kaiming-uniform fan-in weights (negative slope sqrt(5)) drawn from SplitMix64.

    The bound is ``1/sqrt(fan_in)``, the usual framework default, which keeps
    deep residual stacks at unit scale without normalization statistics.
    """
    shape = spec.weight_shape()
    fan_in = shape[1] * shape[2] * shape[3]
    bound = 1.0 / math.sqrt(fan_in)
    filt = uniform_buffer(seed, int(np.prod(shape)), -bound, bound).reshape(shape)
    b = None
    if bias:
        b = uniform_buffer(seed ^ 0x5BD1E995, shape[0], -1 / math.sqrt(fan_in), 1 / math.sqrt(fan_in))
    return ConvWeights(filt, b)


@dataclass
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("gamma", "beta", "mean", "var"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=DTYPE))
        n = self.gamma.shape
        if len(n) != 1 or any(getattr(self, a).shape != n for a in ("beta", "mean", "var")):
            raise ShapeError("BN parameter vectors must all have the same length")
        self.validate()

    def validate(self) -> None:
        if np.any(self.var < 0):
            raise ParameterError("BN running variance must be non-negative")
        if self.eps < 0:
            raise ParameterError("BN epsilon must be non-negative")

    @classmethod
    def neutral(cls, channels: int, eps: float = 1e-5) -> "BNParams":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels), eps)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def scale(self) -> np.ndarray:
        """Per-channel ``gamma / sqrt(var + eps)`` evaluated in float64."""
        return self.gamma.astype(np.float64) / np.sqrt(self.var.astype(np.float64) + self.eps)


def _to_output(out: np.ndarray, n: int, ho: int, wo: int) -> np.ndarray:
    # (O, n*ho*wo) -> (n, O, ho, wo)
    out = out.reshape(out.shape[0], n, ho, wo)
    if n == 1:
        return out.reshape(1, out.shape[0], ho, wo)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _from_output(dy: np.ndarray) -> np.ndarray:
    n, o, ho, wo = dy.shape
    if n == 1:
        return dy.reshape(o, ho * wo)
    return np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)


def _cols(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    if k == 1 and stride == 1 and pad == 0:
        return _from_output(x)
    return _im2col(x, k, stride, pad)


def _conv_gemm(x: np.ndarray, filt: np.ndarray, k: int, stride: int, pad: int, groups: int = 1) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = output_size(h, k, stride, pad), output_size(w, k, stride, pad)
    cols = _cols(x, k, stride, pad)
    o = filt.shape[0]
    if groups == 1:
        out = np.matmul(filt.reshape(o, -1), cols)
    else:
        g = groups
        out = np.matmul(filt.reshape(g, o // g, -1), cols.reshape(g, -1, cols.shape[1]))
        out = out.reshape(o, -1)
    return _to_output(out, n, ho, wo)


def _depthwise(x: np.ndarray, filt: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = output_size(h, k, stride, pad), output_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros((n, c, ho, wo), dtype=DTYPE)
    taps = filt.reshape(c, k, k)
    for ky in range(k):
        y_end = ky + stride * (ho - 1) + 1
        for kx in range(k):
            x_end = kx + stride * (wo - 1) + 1
            out += taps[None, :, ky, kx, None, None] * xp[:, :, ky:y_end:stride, kx:x_end:stride]
    return out


def _regular_forward(spec: ConvSpec, filt: np.ndarray, x: np.ndarray) -> np.ndarray:
    if spec.kind == "depthwise":
        return _depthwise(x, filt, spec.kernel, spec.stride, spec.pad)
    groups = spec.groups if spec.kind == "group" else 1
    return _conv_gemm(x, filt, spec.kernel, spec.stride, spec.pad, groups)


def _slice_spec(spec: ConvSpec) -> ConvSpec:
    cp = spec.partial_channels
    return ConvSpec.regular(cp, cp, spec.kernel, 1, spec.pad)


def conv_forward(spec: ConvSpec, w: ConvWeights, x: Tensor) -> Tensor:
    """Run one convolution.

    A partial convolution applies a regular convolution to the selected
    ``c_p`` channels and copies every other input channel to the output
    unchanged.
    """
    if x.c != spec.in_channels:
        raise ShapeError(f"{spec.notation()} expects {spec.in_channels} input channels, got {x.c}")
    w.check(spec)
    if spec.kind == "partial":
        start, cp = spec.conv_slice
        inner = conv_forward(_slice_spec(spec), w, slice_channels(x, start, cp))
        c = spec.in_channels
        if cp == c:
            return inner
        if start == 0:
            return concat_channels(inner, slice_channels(x, cp, c - cp))
        return concat_channels(slice_channels(x, 0, start), inner)
    out = _regular_forward(spec, w.filter, x.data)
    if w.bias is not None:
        out += w.bias[None, :, None, None]
    return Tensor.wrap(out)


def conv_flops_actual(spec: ConvSpec, out_h: int, out_w: int) -> int:
    """Multiply-add count of one convolution producing an ``out_h x out_w`` map."""
    hw = out_h * out_w
    k2 = spec.kernel * spec.kernel
    cin, cout = spec.in_channels, spec.out_channels
    if spec.kind == "depthwise":
        return hw * k2 * cin
    if spec.kind == "group":
        return hw * k2 * cin * cout // spec.groups
    if spec.kind == "partial":
        cp = spec.partial_channels
        return hw * k2 * cp * cp
    return hw * k2 * cin * cout


def conv_params(spec: ConvSpec, bias: bool = False) -> int:
    shape = spec.weight_shape()
    return int(np.prod(shape)) + (shape[0] if bias else 0)


def conv_backward_data_weights(spec: ConvSpec, w: ConvWeights, x: Tensor, dy: Tensor):
    """Gradients of ``sum(dy * conv_forward(spec, w, x))`` w.r.t. input and filter.

    Returns ``(dx, dw)`` with ``dx`` a Tensor shaped like ``x`` and ``dw`` an
    array shaped like ``w.filter``. Bias (if any) does not affect either.
    """
    if x.c != spec.in_channels:
        raise ShapeError(f"{spec.notation()} expects {spec.in_channels} input channels, got {x.c}")
    w.check(spec)
    ho, wo = spec.output_hw(x.h, x.w)
    if dy.shape != (x.n, spec.out_channels, ho, wo):
        raise ShapeError(f"dy shape {dy.shape} != forward output {(x.n, spec.out_channels, ho, wo)}")
    if spec.kind == "partial":
        start, cp = spec.conv_slice
        dx_inner, dw = _gemm_backward(_slice_spec(spec), w.filter,
                                      x.data[:, start:start + cp], dy.data[:, start:start + cp])
        dx = dy.data.copy()
        dx[:, start:start + cp] = dx_inner
        return Tensor.wrap(dx), dw
    if spec.kind == "depthwise":
        dx, dw = _depthwise_backward(spec, w.filter, x.data, dy.data)
    else:
        dx, dw = _gemm_backward(spec, w.filter, x.data, dy.data)
    return Tensor.wrap(dx), dw


def _gemm_backward(spec: ConvSpec, filt: np.ndarray, x: np.ndarray, dy: np.ndarray):
    k, s, p = spec.kernel, spec.stride, spec.pad
    g = spec.groups if spec.kind == "group" else 1
    o = filt.shape[0]
    cols = _cols(x, k, s, p)
    dy_mat = _from_output(dy)
    m = cols.shape[1]
    w_g = filt.reshape(g, o // g, -1)
    cols_g = cols.reshape(g, -1, m)
    dy_g = dy_mat.reshape(g, o // g, m)
    dw = np.matmul(dy_g, cols_g.transpose(0, 2, 1)).reshape(filt.shape)
    dcols = np.matmul(w_g.transpose(0, 2, 1), dy_g).reshape(-1, m)
    if k == 1 and s == 1 and p == 0:
        dx = _to_output(dcols, x.shape[0], x.shape[2], x.shape[3]).copy()
    else:
        dx = _col2im(dcols, x.shape, k, s, p)
    return np.ascontiguousarray(dx, dtype=DTYPE), dw.astype(DTYPE)


def _depthwise_backward(spec: ConvSpec, filt: np.ndarray, x: np.ndarray, dy: np.ndarray):
    k, stride, pad = spec.kernel, spec.stride, spec.pad
    n, c, h, w = x.shape
    ho, wo = dy.shape[2], dy.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    dxp = np.zeros_like(xp)
    dw = np.zeros((c, k, k), dtype=DTYPE)
    taps = filt.reshape(c, k, k)
    for ky in range(k):
        y_end = ky + stride * (ho - 1) + 1
        for kx in range(k):
            x_end = kx + stride * (wo - 1) + 1
            window = xp[:, :, ky:y_end:stride, kx:x_end:stride]
            dw[:, ky, kx] = np.einsum("nchw,nchw->c", window, dy)
            dxp[:, :, ky:y_end:stride, kx:x_end:stride] += taps[None, :, ky, kx, None, None] * dy
    dx = dxp[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(dx), dw.reshape(filt.shape)


def bn_forward(p: BNParams, x: Tensor) -> Tensor:
    """Inference-mode batch normalization with running statistics."""
    if p.channels != x.c:
        raise ShapeError(f"BN has {p.channels} channels, input has {x.c}")
    scale = p.scale().astype(DTYPE)[None, :, None, None]
    out = (x.data - p.mean[None, :, None, None]) * scale + p.beta[None, :, None, None]
    return Tensor.wrap(out)


def fold_bn_into_conv(spec: ConvSpec, w: ConvWeights, p: BNParams) -> ConvWeights:
    """Merge a following BN into the convolution's filter and bias.

    Partial convolutions cannot absorb a BN: their copied channels carry no
    weights to scale.
    """
    p.validate()
    if spec.kind == "partial":
        raise SpecError("a BN after a partial convolution cannot be folded into it")
    w.check(spec)
    if p.channels != spec.out_channels:
        raise ShapeError(f"BN has {p.channels} channels, conv produces {spec.out_channels}")
    scale = p.scale()
    filt = w.filter.astype(np.float64) * scale[:, None, None, None]
    b = np.zeros(spec.out_channels) if w.bias is None else w.bias.astype(np.float64)
    bias = p.beta.astype(np.float64) + (b - p.mean.astype(np.float64)) * scale
    return ConvWeights(filt.astype(DTYPE), bias.astype(DTYPE))


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return Tensor.wrap(np.maximum(x.data, DTYPE(0)))
    if kind == "gelu":
        d = x.data
        return Tensor.wrap((DTYPE(0.5) * d * (DTYPE(1) + erf(d * DTYPE(1 / math.sqrt(2))))).astype(DTYPE))
    raise SpecError(f"unknown activation {kind!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    return Tensor.wrap(x.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(DTYPE))


def fully_connected(w: np.ndarray, b: np.ndarray, x: Tensor) -> np.ndarray:
    """``y = x @ w.T + b`` for a pooled ``(n, c, 1, 1)`` input; returns ``(n, classes)``."""
    if x.h != 1 or x.w != 1:
        raise ShapeError(f"fully_connected expects (n, c, 1, 1), got {x.shape}")
    if w.ndim != 2 or w.shape[1] != x.c:
        raise ShapeError(f"FC weight {w.shape} incompatible with {x.c} input channels")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"FC bias {b.shape} != ({w.shape[0]},)")
    return np.matmul(x.data.reshape(x.n, x.c), w.T.astype(DTYPE)) + b.astype(DTYPE)


def residual_add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"residual shapes differ: {a.shape} vs {b.shape}")
    return Tensor.wrap(a.data + b.data)
