"""Spatial operators: standard and deformable convolution, pooling, batch norm, residual blocks."""

# == IMPORTS ===================================================================================== #

from typing import *

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from tensor_core import (
    Array, ShapeError, Tensor, add, make_output, relu, resolve_dtype
)

# == DEFINES ===================================================================================== #

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

Pair = Tuple[int, int]

def _pair(value: Union[int, Sequence[int]]) -> Pair:
    if isinstance(value, (int, np.integer)):
        return int(value), int(value)

    first, second = value
    return int(first), int(second)

# == KERNELS & OFFSETS =========================================================================== #

class ConvKernel:
    """Weights, bias, and geometry of one convolution.

    Parameters
    ==========
    weight: `Tensor`
        Shape `[C_out, C_in, kH, kW]`.

    bias: `Tensor`
        Shape `[C_out]`.

    stride: `int | (int, int)` = `1`

    padding: `int | (int, int)` = `0`
        Zero padding applied to both sides of each spatial axis.
    """

    def __init__(self,
        weight: Tensor,
        bias: Tensor,
        stride: Union[int, Pair] = 1,
        padding: Union[int, Pair] = 0
    ):
        errors = []
        self.stride: Pair = _pair(stride)
        self.padding: Pair = _pair(padding)

        if weight.ndim != 4:
            errors.append(f"Kernel weight must have rank 4; got {weight.ndim}.")
        elif weight.shape[2] < 1 or weight.shape[3] < 1:
            errors.append(f"Kernel extents must be at least 1; got {list(weight.shape[2:])}.")
        elif bias.shape != (weight.shape[0],):
            errors.append(
                f"Bias must have shape [{weight.shape[0]}]; got {list(bias.shape)}."
            )

        if min(self.stride) < 1:
            errors.append(f"Stride must be positive; got {self.stride}.")
        if min(self.padding) < 0:
            errors.append(f"Padding must be non-negative; got {self.padding}.")
        if not np.all(np.isfinite(weight.data)):
            errors.append("Kernel weight must be finite.")

        if len(errors) > 0:
            raise ShapeError('\n'.join(errors))

        self.weight = weight
        self.bias = bias

    @classmethod
    def create(cls,
        in_channels: int,
        out_channels: int,
        kernel_size: Union[int, Pair] = 3,
        stride: Union[int, Pair] = 1,
        padding: Union[int, Pair] = 1,
        rng: Optional[np.random.Generator] = None,
        dtype: Union[str, np.dtype, None] = None,
        zero: bool = False
    ) -> "ConvKernel":
        """Creates a kernel with He fan-in initialized weights (or all zeros) and zero bias."""

        kH, kW = _pair(kernel_size)
        dtype = resolve_dtype(dtype)
        shape = (out_channels, in_channels, kH, kW)

        if zero:
            weight = np.zeros(shape, dtype=dtype)
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            fan_in = in_channels * kH * kW
            weight = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)

        return cls(
            Tensor(weight, requires_grad=True),
            Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True),
            stride  = stride,
            padding = padding
        )

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> Pair:
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def taps(self) -> int:
        return self.weight.shape[2] * self.weight.shape[3]

    def output_extent(self, height: int, width: int) -> Pair:
        """Output (H', W') for an input of the given extent; raises if it is not integral."""

        errors = []
        extents = []

        for axis, size, k, s, p in zip(
            ("height", "width"), (height, width), self.kernel_size, self.stride, self.padding
        ):
            span = size + 2 * p - k
            if span < 0:
                errors.append(f"Input {axis} {size} is smaller than kernel {k} after padding.")
            elif span % s != 0:
                errors.append(
                    f"Input {axis} {size} with kernel {k}, padding {p} and stride {s} "
                    "does not give an integral output extent."
                )
            else:
                extents.append(span // s + 1)

        if len(errors) > 0:
            raise ShapeError('\n'.join(errors))

        return extents[0], extents[1]

    def parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        return { f"{prefix}weight": self.weight, f"{prefix}bias": self.bias }

class OffsetField:
    """Per-location sampling displacements for a deformable convolution.

    `offsets` has shape `[N, 2*kH*kW, H_out, W_out]`; channel `2*t` holds the row
    displacement and channel `2*t + 1` the column displacement of kernel tap `t`
    (taps enumerated row-major over the kernel window), in input pixels.
    """

    def __init__(self, offsets: Tensor):
        if offsets.ndim != 4 or offsets.shape[1] % 2 != 0:
            raise ShapeError(
                f"Offsets must have shape [N, 2*taps, H, W]; got {list(offsets.shape)}."
            )

        self.offsets = offsets

    def check(self, kernel: ConvKernel, batch: int, height: int, width: int) -> None:
        expected = (batch, 2 * kernel.taps, height, width)
        if self.offsets.shape != expected:
            raise ShapeError(
                f"Offset field shape {list(self.offsets.shape)} does not match "
                f"kernel and output geometry {list(expected)}."
            )

def make_offset_branch(kernel: ConvKernel) -> ConvKernel:
    """Creates the zero-initialized standard convolution that predicts `kernel`'s offsets.

    The branch has `2*kH*kW` output channels and the kernel's own size, stride, and
    padding, so its output lines up with the deformable layer's output grid.
    """

    return ConvKernel.create(
        kernel.in_channels,
        2 * kernel.taps,
        kernel.kernel_size,
        stride  = kernel.stride,
        padding = kernel.padding,
        dtype   = kernel.weight.dtype,
        zero    = True
    )

# == CONVOLUTION ================================================================================= #

def _check_conv_input(name: str, x: Tensor, kernel: ConvKernel) -> Tuple[int, int, int, int]:
    errors = []

    if x.ndim != 4:
        errors.append(f"{name} expects input [N, C, H, W]; got rank {x.ndim}.")
    elif x.shape[1] != kernel.in_channels:
        errors.append(
            f"{name}: input has {x.shape[1]} channels but kernel expects "
            f"{kernel.in_channels}."
        )

    if len(errors) > 0:
        raise ShapeError('\n'.join(errors))

    return x.shape

def _window_slices(kernel: ConvKernel, out_h: int, out_w: int, i: int, j: int):
    sH, sW = kernel.stride
    return (
        slice(None), slice(None),
        slice(i, i + sH * (out_h - 1) + 1, sH),
        slice(j, j + sW * (out_w - 1) + 1, sW)
    )

def _im2col(x: Array, kernel: ConvKernel, out_h: int, out_w: int) -> Array:
    N, C, H, W = x.shape
    kH, kW = kernel.kernel_size
    pH, pW = kernel.padding

    padded = np.pad(x, ((0, 0), (0, 0), (pH, pH), (pW, pW)))
    cols = np.empty((N, C, kH, kW, out_h, out_w), dtype=x.dtype)

    for i in range(kH):
        for j in range(kW):
            cols[:, :, i, j] = padded[_window_slices(kernel, out_h, out_w, i, j)]

    return cols.reshape(N, C * kH * kW, out_h * out_w)

def _col2im(
    cols: Array,
    shape: Tuple[int, int, int, int],
    kernel: ConvKernel,
    out_h: int,
    out_w: int
) -> Array:
    N, C, H, W = shape
    kH, kW = kernel.kernel_size
    pH, pW = kernel.padding

    cols = cols.reshape(N, C, kH, kW, out_h, out_w)
    padded = np.zeros((N, C, H + 2 * pH, W + 2 * pW), dtype=cols.dtype)

    for i in range(kH):
        for j in range(kW):
            padded[_window_slices(kernel, out_h, out_w, i, j)] += cols[:, :, i, j]

    return padded[:, :, pH:pH + H, pW:pW + W]

def _linear_from_columns(
    cols: Array,
    kernel: ConvKernel,
    out_h: int,
    out_w: int
) -> Tuple[Array, Callable[[Array], Tuple[Array, Array, Array]]]:
    """Applies the kernel weights to unrolled columns; returns output and a backward helper."""

    N = cols.shape[0]
    C_out = kernel.out_channels
    w2 = kernel.weight.data.reshape(C_out, -1)

    out = np.matmul(w2, cols) + kernel.bias.data[None, :, None]

    def backward(g: Array):
        g2 = g.reshape(N, C_out, out_h * out_w)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.weight.shape)
        db = g2.sum(axis=(0, 2))
        dcols = np.matmul(w2.T, g2)
        return dcols, dw, db

    return out.reshape(N, C_out, out_h, out_w), backward

def conv2d(x: Tensor, kernel: ConvKernel) -> Tensor:
    """Standard 2D convolution with zero padding: y(p0) = sum_n w(pn) x(p0 + pn) + b."""

    N, C, H, W = _check_conv_input("conv2d", x, kernel)
    out_h, out_w = kernel.output_extent(H, W)

    cols = _im2col(x.data, kernel, out_h, out_w)
    out, linear_backward = _linear_from_columns(cols, kernel, out_h, out_w)

    def backward(upstream):
        (g,) = upstream
        dcols, dw, db = linear_backward(g)
        return _col2im(dcols, x.shape, kernel, out_h, out_w), dw, db

    return make_output("conv2d", out, (x, kernel.weight, kernel.bias), backward)

# == BILINEAR SAMPLING =========================================================================== #

class _BilinearSampler:
    """Bilinear reads of a channels-last map at fractional (row, col) positions.

    Out-of-range neighbours read as zero. Cells are chosen with `ceil(p) - 1`, so at an
    integer coordinate the sample sits on the far edge of the cell below it and coordinate
    gradients there are the left-hand limits.
    """

    def __init__(self, xt: Array, batch: Array, rows: Array, cols: Array):
        N, H, W, C = xt.shape

        y0 = np.ceil(rows) - 1
        x0 = np.ceil(cols) - 1
        self.ly = rows - y0
        self.lx = cols - x0

        y0 = y0.astype(np.int64)
        x0 = x0.astype(np.int64)

        self.shape = xt.shape
        self.flat_map = xt.reshape(N * H * W, C)
        self.corners = []

        for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
            yy = y0 + dy
            xx = x0 + dx
            valid = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
            flat = (batch * H + np.clip(yy, 0, H - 1)) * W + np.clip(xx, 0, W - 1)
            values = self.flat_map[flat] * valid[..., None]
            self.corners.append((flat, valid, values))

    def _weights(self) -> Tuple[Array, Array, Array, Array]:
        ly, lx = self.ly, self.lx
        return (1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx

    def values(self) -> Array:
        out = None
        for weight, (_, _, values) in zip(self._weights(), self.corners):
            term = values * weight[..., None]
            out = term if out is None else out + term

        return out

    def input_grad(self, g: Array) -> Array:
        N, H, W, C = self.shape
        grad = np.zeros((N * H * W, C), dtype=g.dtype)

        for weight, (flat, valid, _) in zip(self._weights(), self.corners):
            contribution = g * (weight * valid)[..., None]
            np.add.at(grad, flat.reshape(-1), contribution.reshape(-1, C))

        return grad.reshape(N, H, W, C)

    def coord_grads(self, g: Array) -> Tuple[Array, Array]:
        (_, _, v00), (_, _, v01), (_, _, v10), (_, _, v11) = self.corners
        ly = self.ly[..., None]
        lx = self.lx[..., None]

        d_row = (1 - lx) * (v10 - v00) + lx * (v11 - v01)
        d_col = (1 - ly) * (v01 - v00) + ly * (v11 - v10)

        return (g * d_row).sum(axis=-1), (g * d_col).sum(axis=-1)

def bilinear_sample(x: Tensor, p: Union[Tensor, Sequence[float]]) -> Tensor:
    """Reads the `[C, H, W]` map `x` at fractional position `p = (row, col)`.

    Differentiable with respect to both `x` and `p`; out-of-bounds neighbours contribute
    zero.
    """

    if x.ndim != 3:
        raise ShapeError(f"bilinear_sample expects [C, H, W]; got rank {x.ndim}.")
    if not isinstance(p, Tensor):
        p = Tensor(np.asarray(p, dtype=x.dtype))
    if p.shape != (2,):
        raise ShapeError(f"Sample position must have shape [2]; got {list(p.shape)}.")

    xt = np.ascontiguousarray(np.moveaxis(x.data, 0, -1))[None]
    sampler = _BilinearSampler(
        xt, np.zeros(1, dtype=np.int64), p.data[0:1], p.data[1:2]
    )

    def backward(upstream):
        (g,) = upstream
        g = g[None]
        dx = np.moveaxis(sampler.input_grad(g)[0], -1, 0)
        d_row, d_col = sampler.coord_grads(g)
        return dx, np.concatenate([d_row, d_col]).astype(p.dtype)

    return make_output("bilinear_sample", sampler.values()[0], (x, p), backward)

# == DEFORMABLE CONVOLUTION ====================================================================== #

def deform_conv2d(x: Tensor, kernel: ConvKernel, offsets: OffsetField) -> Tensor:
    """Deformable convolution: y(p0) = sum_n w(pn) x(p0 + pn + dp_n) + b.

    One offset set per output location is shared by all input channels. Fractional reads go
    through bilinear interpolation, and gradients flow to `x`, the kernel, and the offsets.
    """

    N, C, H, W = _check_conv_input("deform_conv2d", x, kernel)
    out_h, out_w = kernel.output_extent(H, W)
    offsets.check(kernel, N, out_h, out_w)

    kH, kW = kernel.kernel_size
    sH, sW = kernel.stride
    pH, pW = kernel.padding
    taps = kH * kW

    tap_rows = (np.arange(taps) // kW).astype(x.dtype)
    tap_cols = (np.arange(taps) % kW).astype(x.dtype)

    base_rows = tap_rows[:, None, None] + (np.arange(out_h) * sH - pH)[None, :, None]
    base_cols = tap_cols[:, None, None] + (np.arange(out_w) * sW - pW)[None, None, :]

    off = offsets.offsets.data
    rows = base_rows[None] + off[:, 0::2]
    cols = base_cols[None] + off[:, 1::2]
    batch = np.broadcast_to(np.arange(N)[:, None, None, None], rows.shape)

    xt = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    sampler = _BilinearSampler(xt, batch, rows, cols)

    # (N, taps, H', W', C) -> (N, C*taps, H'*W'), matching the weight layout
    sampled = sampler.values().astype(x.dtype, copy=False)
    unrolled = np.ascontiguousarray(sampled.transpose(0, 4, 1, 2, 3)).reshape(
        N, C * taps, out_h * out_w
    )
    out, linear_backward = _linear_from_columns(
        unrolled, kernel, out_h, out_w
    )

    def backward(upstream):
        (g,) = upstream
        dcols, dw, db = linear_backward(g)
        dcols = dcols.reshape(N, C, taps, out_h, out_w).transpose(0, 2, 3, 4, 1)

        dx = sampler.input_grad(dcols).transpose(0, 3, 1, 2)
        d_row, d_col = sampler.coord_grads(dcols)

        doff = np.empty_like(off)
        doff[:, 0::2] = d_row
        doff[:, 1::2] = d_col

        return dx, dw, db, doff

    return make_output("deform_conv2d", out,
        (x, kernel.weight, kernel.bias, offsets.offsets), backward
    )

# == POOLING ===================================================================================== #

def max_pool2d(
    x: Tensor,
    window: Union[int, Pair],
    stride: Union[int, Pair, None] = None
) -> Tensor:
    """Max pooling without padding; the gradient goes to the first maximum of each window."""

    kH, kW = _pair(window)
    sH, sW = _pair(stride if stride is not None else window)

    errors = []
    if x.ndim != 4:
        errors.append(f"max_pool2d expects [N, C, H, W]; got rank {x.ndim}.")
    else:
        if kH < 1 or kW < 1 or sH < 1 or sW < 1:
            errors.append("Pooling window and stride must be positive.")
        if kH > x.shape[2] or kW > x.shape[3]:
            errors.append(
                f"Pooling window {(kH, kW)} exceeds input extent {x.shape[2:]}."
            )

    if len(errors) > 0:
        raise ShapeError('\n'.join(errors))

    N, C, H, W = x.shape
    out_h = (H - kH) // sH + 1
    out_w = (W - kW) // sW + 1

    windows = sliding_window_view(x.data, (kH, kW), axis=(2, 3))
    windows = windows[:, :, ::sH, ::sW][:, :, :out_h, :out_w].reshape(
        N, C, out_h, out_w, kH * kW
    )

    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    rows = np.arange(out_h)[:, None] * sH + arg // kW
    cols = np.arange(out_w)[None, :] * sW + arg % kW
    source = rows * W + cols
    plane = np.arange(N * C).reshape(N, C, 1, 1)

    def backward(upstream):
        (g,) = upstream
        grad = np.zeros((N * C, H * W), dtype=g.dtype)
        np.add.at(grad,
            (np.broadcast_to(plane, source.shape).reshape(-1), source.reshape(-1)),
            g.reshape(-1)
        )
        return (grad.reshape(N, C, H, W),)

    return make_output("max_pool2d", np.ascontiguousarray(out), (x,), backward)

def adaptive_kernel_size(in_extent: int, out_extent: int) -> int:
    """k = in - (out - 1) * floor(in / out); the paired stride is floor(in / out)."""

    errors = []
    if out_extent < 1:
        errors.append(f"Output extent must be at least 1; got {out_extent}.")
    if out_extent > in_extent:
        errors.append(
            f"Output extent {out_extent} exceeds input extent {in_extent}."
        )

    if len(errors) > 0:
        raise ShapeError('\n'.join(errors))

    return in_extent - (out_extent - 1) * (in_extent // out_extent)

def adaptive_max_pool2d(x: Tensor, out: Pair) -> Tensor:
    """Max pooling whose kernel and stride are derived so the output is exactly `out`."""

    if x.ndim != 4:
        raise ShapeError(f"adaptive_max_pool2d expects [N, C, H, W]; got rank {x.ndim}.")

    target_h, target_w = _pair(out)
    H, W = x.shape[2], x.shape[3]

    window = (adaptive_kernel_size(H, target_h), adaptive_kernel_size(W, target_w))
    stride = (H // target_h, W // target_w)

    return max_pool2d(x, window, stride)

# == BATCH NORMALIZATION ========================================================================= #

class RunningStats:
    """Per-channel running mean and variance used in evaluation mode."""

    def __init__(self, channels: int, dtype: Union[str, np.dtype, None] = None,
        momentum: float = BN_MOMENTUM
    ):
        dtype = resolve_dtype(dtype)
        self.mean: Array = np.zeros(channels, dtype=dtype)
        self.var: Array = np.ones(channels, dtype=dtype)
        self.momentum = momentum

class BatchNorm:
    """Scale, shift, and running statistics for one batch-norm layer."""

    def __init__(self, channels: int, dtype: Union[str, np.dtype, None] = None):
        dtype = resolve_dtype(dtype)
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.stats = RunningStats(channels, dtype)

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.stats, mode)

    def parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        return { f"{prefix}gamma": self.gamma, f"{prefix}beta": self.beta }

    def buffers(self, prefix: str = "") -> Dict[str, Array]:
        return { f"{prefix}running_mean": self.stats.mean, f"{prefix}running_var": self.stats.var }

def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    mode: str = "train",
    eps: float = BN_EPS
) -> Tensor:
    """Per-channel batch normalization of `[N, C, H, W]` input.

    Parameters
    ==========
    mode: `str` = `"train"`
        `"train"` normalizes with batch statistics and updates `stats` (unbiased variance,
        momentum `stats.momentum`); `"eval"` normalizes with `stats`.
    """

    errors = []
    if mode not in ("train", "eval"):
        errors.append(f"Unknown batch-norm mode '{mode}'.")
    if x.ndim != 4:
        errors.append(f"batch_norm expects [N, C, H, W]; got rank {x.ndim}.")
    elif gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        errors.append(f"Scale and shift must have shape [{x.shape[1]}].")

    if len(errors) > 0:
        raise ShapeError('\n'.join(errors))

    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]

    def per_channel(values: Array) -> Array:
        return values[None, :, None, None]

    if mode == "train":
        if count == 0:
            raise ShapeError("batch_norm cannot use batch statistics of an empty batch.")

        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)

        unbiased = var * count / (count - 1) if count > 1 else var
        stats.mean[...] = (1 - stats.momentum) * stats.mean + stats.momentum * mu
        stats.var[...] = (1 - stats.momentum) * stats.var + stats.momentum * unbiased
    else:
        mu = stats.mean
        var = stats.var

    inv = 1 / np.sqrt(var + eps)
    xhat = (x.data - per_channel(mu)) * per_channel(inv)
    out = per_channel(gamma.data) * xhat + per_channel(beta.data)

    def backward(upstream):
        (g,) = upstream
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * per_channel(gamma.data)

        if mode == "train":
            dx = per_channel(inv / count) * (
                count * dxhat
                - per_channel(dxhat.sum(axis=axes))
                - xhat * per_channel((dxhat * xhat).sum(axis=axes))
            )
        else:
            dx = dxhat * per_channel(inv)

        return dx, dgamma, dbeta

    return make_output("batch_norm", out.astype(x.dtype), (x, gamma, beta), backward)

# == LAYERS ====================================================================================== #

class SamplingPoint(NamedTuple):
    """One input-space read of a convolution tap, as exported for receptive-field plots."""

    layer: int
    tap: int
    row: float
    col: float

class ConvLayer:
    """Convolution (standard or deformable), optional batch norm, optional ReLU.

    A layer is deformable when it owns an offset branch; the branch reads the same input and
    its output is the layer's offset field. The realized offsets and output extent of the
    most recent forward pass are kept for sampling traces.
    """

    def __init__(self,
        kernel: ConvKernel,
        norm: Optional[BatchNorm] = None,
        offset_branch: Optional[ConvKernel] = None,
        activation: bool = True
    ):
        self.kernel = kernel
        self.norm = norm
        self.offset_branch = offset_branch
        self.activation = activation

        self.last_offsets: Optional[Array] = None
        self.last_output_shape: Optional[Tuple[int, ...]] = None

    @property
    def deformable(self) -> bool:
        return self.offset_branch is not None

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        if self.deformable:
            field = conv2d(x, self.offset_branch)
            self.last_offsets = field.data
            y = deform_conv2d(x, self.kernel, OffsetField(field))
        else:
            y = conv2d(x, self.kernel)

        self.last_output_shape = y.shape

        if self.norm is not None:
            y = self.norm(y, mode)
        if self.activation:
            y = relu(y)

        return y

    def parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        params = self.kernel.parameters(prefix)
        if self.offset_branch is not None:
            params.update(self.offset_branch.parameters(f"{prefix}offset."))
        if self.norm is not None:
            params.update(self.norm.parameters(f"{prefix}bn."))

        return params

    def buffers(self, prefix: str = "") -> Dict[str, Array]:
        return self.norm.buffers(f"{prefix}bn.") if self.norm is not None else {}

    def sampling_points(self,
        row: float,
        col: float,
        batch_index: int = 0
    ) -> List[Tuple[int, float, float]]:
        """Input-space (tap, row, col) reads of the output unit at (row, col).

        Fractional unit positions keep their exact grid geometry; learned offsets are looked
        up at the nearest realized output location.
        """

        kH, kW = self.kernel.kernel_size
        sH, sW = self.kernel.stride
        pH, pW = self.kernel.padding

        offsets = None
        if self.deformable:
            if self.last_offsets is None:
                raise ValueError("Deformable layer has no realized offsets; run forward first.")
            _, _, out_h, out_w = self.last_offsets.shape
            r = int(np.clip(np.rint(row), 0, out_h - 1))
            c = int(np.clip(np.rint(col), 0, out_w - 1))
            offsets = self.last_offsets[batch_index, :, r, c]

        points = []
        for tap in range(kH * kW):
            i, j = divmod(tap, kW)
            pr = row * sH - pH + i
            pc = col * sW - pW + j
            if offsets is not None:
                pr += float(offsets[2 * tap])
                pc += float(offsets[2 * tap + 1])
            points.append((tap, float(pr), float(pc)))

        return points

class PoolLayer:
    """Fixed max pooling stage, or adaptive pooling when `target` is given."""

    def __init__(self,
        window: Union[int, Pair, None] = None,
        stride: Union[int, Pair, None] = None,
        target: Optional[Pair] = None
    ):
        self.window = _pair(window) if window is not None else None
        self.stride = _pair(stride) if stride is not None else self.window
        self.target = target
        self._last_geometry: Optional[Tuple[Pair, Pair]] = None

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        if self.target is not None:
            H, W = x.shape[2], x.shape[3]
            target_h, target_w = _pair(self.target)
            window = (adaptive_kernel_size(H, target_h), adaptive_kernel_size(W, target_w))
            stride = (H // target_h, W // target_w)
        else:
            window, stride = self.window, self.stride

        self._last_geometry = (window, stride)
        return max_pool2d(x, window, stride)

    def map_point(self, row: float, col: float) -> Tuple[float, float]:
        """Maps an output position to the centre of its pooling window."""

        window, stride = self._last_geometry or (self.window, self.stride)
        return (
            row * stride[0] + (window[0] - 1) / 2,
            col * stride[1] + (window[1] - 1) / 2
        )

class ResidualBlock:
    """Two 3x3 same-width convolutions with batch norm and a skip connection."""

    def __init__(self, first: ConvLayer, second: ConvLayer):
        errors = []
        for layer in (first, second):
            if layer.kernel.kernel_size != (3, 3) or layer.kernel.padding != (1, 1):
                errors.append("Residual convolutions must be 3x3 with padding 1.")
            if layer.kernel.in_channels != layer.kernel.out_channels:
                errors.append("Residual convolutions must keep the channel count.")
        if first.kernel.out_channels != second.kernel.in_channels:
            errors.append("Residual convolutions must share one channel count.")

        if len(errors) > 0:
            raise ShapeError('\n'.join(sorted(set(errors))))

        self.conv1 = first
        self.conv2 = second
        self.conv2.activation = False

    @classmethod
    def create(cls,
        channels: int,
        rng: Optional[np.random.Generator] = None,
        dtype: Union[str, np.dtype, None] = None
    ) -> "ResidualBlock":
        return cls(*(
            ConvLayer(
                ConvKernel.create(channels, channels, 3, 1, 1, rng=rng, dtype=dtype),
                BatchNorm(channels, dtype)
            )
            for _ in range(2)
        ))

    @property
    def channels(self) -> int:
        return self.conv1.kernel.in_channels

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        return residual_block_forward(x, self, mode)

    def parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        return {
            **self.conv1.parameters(f"{prefix}conv1."),
            **self.conv2.parameters(f"{prefix}conv2.")
        }

    def buffers(self, prefix: str = "") -> Dict[str, Array]:
        return { **self.conv1.buffers(f"{prefix}conv1."), **self.conv2.buffers(f"{prefix}conv2.") }

def residual_block_forward(x: Tensor, block: ResidualBlock, mode: str = "train") -> Tensor:
    """relu(bn2(conv2(relu(bn1(conv1(x))))) + x)."""

    if x.ndim != 4 or x.shape[1] != block.channels:
        raise ShapeError(
            f"Residual block expects {block.channels} input channels; got shape "
            f"{list(x.shape)}."
        )

    branch = block.conv2.forward(block.conv1.forward(x, mode), mode)
    return relu(add(branch, x))

# == SAMPLING TRACE ============================================================================== #

def trace_sampling_locations(
    layer_stack: Sequence[Union[ConvLayer, PoolLayer]],
    output_unit: Tuple[int, int, int, int],
    levels: int = 2,
    batch_index: int = 0
) -> List[SamplingPoint]:
    """Follows one output unit back to the input-space positions its taps read.

    Parameters
    ==========
    layer_stack: `Sequence[ConvLayer | PoolLayer]`
        Spatial stages in forward order. A forward pass must have been run so deformable
        layers have realized offsets.

    output_unit: `(layer, channel, row, col)`
        The unit to trace, in the output of `layer_stack[layer]`.

    levels: `int` = `2`
        How many convolution levels to recurse through. Pooling stages are crossed by mapping
        each point to its window centre and do not count as a level.

    Returns
    =======
    `List[SamplingPoint]`
        Reads of every traced convolution, tagged with the stage index they belong to; the
        unit's own layer comes first.
    """

    layer, channel, row, col = output_unit
    errors = []

    if not 0 <= layer < len(layer_stack):
        errors.append(f"Layer {layer} out of range for a stack of {len(layer_stack)}.")
    else:
        stage = layer_stack[layer]
        if not isinstance(stage, ConvLayer):
            errors.append(f"Stage {layer} is not a convolution.")
        elif stage.last_output_shape is None:
            errors.append(f"Stage {layer} has not run a forward pass.")
        else:
            _, channels, out_h, out_w = stage.last_output_shape
            if not (0 <= channel < channels and 0 <= row < out_h and 0 <= col < out_w):
                errors.append(
                    f"Unit {(channel, row, col)} out of range for output "
                    f"{[channels, out_h, out_w]}."
                )

    if len(errors) > 0:
        raise ShapeError('\n'.join(errors))

    points: List[SamplingPoint] = []
    frontier = [(float(row), float(col))]
    traced = 0
    index = layer

    while index >= 0 and traced < levels:
        stage = layer_stack[index]

        if isinstance(stage, ConvLayer):
            reached = []
            for r, c in frontier:
                for tap, pr, pc in stage.sampling_points(r, c, batch_index):
                    points.append(SamplingPoint(index, tap, pr, pc))
                    reached.append((pr, pc))
            frontier = reached
            traced += 1
        else:
            frontier = [stage.map_point(r, c) for r, c in frontier]

        index -= 1

    return points
