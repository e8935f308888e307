"""Convolution, batch normalization and activation layers.

All spatial operations are "valid": no padding mode exists.  A transposed
convolution is implemented as the exact linear adjoint of the forward
convolution with the same kernel, so decoder blocks mirror encoder blocks
shape for shape.
"""
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from ..errors import ShapeError
from .autodiff import Tensor

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def conv_output_size(size, kernel, stride):
    """Spatial size after a valid convolution, or <= 0 if it does not fit."""
    if size < kernel:
        return 0
    return (size - kernel) // stride + 1


# raw numerics -----------------------------------------------------------
def _windows(x, kh, kw, sh, sw, ho, wo):
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]


def conv_forward(x, w, stride):
    """Valid cross-correlation of ``x`` (N, C, H, W) with ``w`` (O, C, kh, kw)."""
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f"input has {c} channels, kernel expects {ci}")
    sh, sw = stride
    ho, wo = conv_output_size(h, kh, sh), conv_output_size(wd, kw, sw)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {h}x{wd}")
    win = _windows(x, kh, kw, sh, sw, ho, wo)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2)


def conv_input_adjoint(g, w, stride, in_hw):
    """Apply the transpose of ``conv_forward(., w, stride)`` to ``g``.

    ``in_hw`` is the spatial size of the forward input; rows or columns the
    forward pass never read (when the stride does not divide evenly) get 0.
    """
    n, o, ho, wo = g.shape
    _, c, kh, kw = w.shape
    sh, sw = stride
    h, wd = in_hw
    if conv_output_size(h, kh, sh) != ho or conv_output_size(wd, kw, sw) != wo:
        raise ShapeError(f"gradient {ho}x{wo} inconsistent with input size {h}x{wd}")
    cols = np.tensordot(g, w, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
    out = np.zeros((n, c, h, wd), dtype=np.result_type(g, w))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return out


def conv_weight_grad(x, g, stride, kernel_hw):
    """Gradient of ``<conv_forward(x, w), g>`` with respect to ``w``."""
    kh, kw = kernel_hw
    sh, sw = stride
    ho, wo = g.shape[2], g.shape[3]
    win = _windows(x, kh, kw, sh, sw, ho, wo)
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))


# layer types --------------------------------------------------------------
@dataclass
class ConvLayer:
    """A (possibly transposed) valid convolution.

    For a forward layer ``kernel`` is (out_ch, in_ch, kh, kw).  For a
    transposed layer it is stored in the orientation of the forward
    convolution it is the adjoint of, i.e. (in_ch, out_ch, kh, kw) from the
    transposed layer's point of view.
    """

    kernel: Tensor
    bias: Tensor
    stride: tuple = (1, 1)
    transposed: bool = False

    def __post_init__(self):
        k = self.kernel.shape
        if len(k) != 4 or k[2] < 1 or k[3] < 1:
            raise ShapeError(f"kernel must be (out, in, kh, kw) with kh, kw >= 1, got {k}")
        if min(self.stride) < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.bias.shape != (self.out_channels,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.out_channels},)")

    @property
    def in_channels(self):
        return self.kernel.shape[0] if self.transposed else self.kernel.shape[1]

    @property
    def out_channels(self):
        return self.kernel.shape[1] if self.transposed else self.kernel.shape[0]

    @property
    def kernel_size(self):
        return self.kernel.shape[2], self.kernel.shape[3]

    @classmethod
    def init(cls, in_ch, out_ch, kernel_size, stride=(1, 1), transposed=False, rng=None,
             dtype=np.float64):
        """Seeded uniform fan-in initialisation."""
        rng = np.random.default_rng(rng)
        kh, kw = kernel_size
        shape = (in_ch, out_ch, kh, kw) if transposed else (out_ch, in_ch, kh, kw)
        bound = np.sqrt(3.0 / (in_ch * kh * kw))
        kernel = rng.uniform(-bound, bound, size=shape).astype(dtype)
        bias = rng.uniform(-bound, bound, size=out_ch).astype(dtype)
        return cls(Tensor(kernel, requires_grad=True), Tensor(bias, requires_grad=True),
                   tuple(stride), transposed)

    def output_size(self, size):
        """Spatial output size for a square input of side ``size``."""
        (kh, _), (sh, _) = self.kernel_size, self.stride
        if self.transposed:
            return (size - 1) * sh + kh
        return conv_output_size(size, kh, sh)


@dataclass
class BatchNormState:
    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def init(cls, channels, dtype=np.float64, momentum=0.1, epsilon=1e-5):
        return cls(
            Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            np.zeros(channels, dtype=dtype),
            np.ones(channels, dtype=dtype),
            momentum,
            epsilon,
        )

    @property
    def channels(self):
        return self.running_mean.shape[0]


# differentiable ops ---------------------------------------------------------
def conv2d(x, layer, out_hw=None):
    """Forward or transposed convolution of a (N, C, H, W) tensor.

    ``out_hw`` fixes the output size of a transposed layer; by default it is
    ``(in - 1) * stride + k``, the largest input the forward layer maps to
    this size.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d needs a 4-D tensor, got shape {x.shape}")
    if x.shape[1] != layer.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, layer expects {layer.in_channels}")
    w, b, stride = layer.kernel, layer.bias, layer.stride
    kh, kw = layer.kernel_size

    if not layer.transposed:
        out = conv_forward(x.data, w.data, stride) + b.data[None, :, None, None]

        def backward(g):
            if x.requires_grad:
                x._accumulate(conv_input_adjoint(g, w.data, stride, x.shape[2:]))
            if w.requires_grad:
                w._accumulate(conv_weight_grad(x.data, g, stride, (kh, kw)))
            if b.requires_grad:
                b._accumulate(g.sum(axis=(0, 2, 3)))

        return Tensor(out, parents=(x, w, b), backward=backward)

    if out_hw is None:
        out_hw = tuple((s - 1) * st + k for s, st, k in zip(x.shape[2:], stride, (kh, kw)))
    out = conv_input_adjoint(x.data, w.data, stride, out_hw) + b.data[None, :, None, None]

    def backward_t(g):
        if x.requires_grad:
            x._accumulate(conv_forward(g, w.data, stride))
        if w.requires_grad:
            w._accumulate(conv_weight_grad(g, x.data, stride, (kh, kw)))
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))

    return Tensor(out, parents=(x, w, b), backward=backward_t)


def batch_norm(x, state, mode="infer", update_stats=True):
    """Per-channel batch normalization over (N, H, W).

    ``mode="train"`` normalizes with batch statistics and (unless
    ``update_stats`` is false) folds them into the running averages;
    ``mode="infer"`` uses the running averages only.
    """
    if x.data.ndim != 4 or x.shape[1] != state.channels:
        raise ShapeError(f"batch_norm expects (N, {state.channels}, H, W), got {x.shape}")
    gamma, beta, eps = state.scale, state.shift, state.epsilon
    axes = (0, 2, 3)
    if mode == "train":
        if x.shape[0] < 2:
            raise ShapeError("batch_norm in train mode needs a batch of at least 2")
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            mom = state.momentum
            state.running_mean[:] = (1 - mom) * state.running_mean + mom * mu
            state.running_var[:] = (1 - mom) * state.running_var + mom * var * (m / (m - 1))
    elif mode == "infer":
        mu, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if not x.requires_grad:
            return
        gx = g * gamma.data[None, :, None, None]
        if mode == "train":
            s1 = gx.sum(axis=axes)[None, :, None, None]
            s2 = (gx * xhat).sum(axis=axes)[None, :, None, None]
            dx = (gx - s1 / m - xhat * s2 / m) * inv_std[None, :, None, None]
        else:
            dx = gx * inv_std[None, :, None, None]
        x._accumulate(dx)

    return Tensor(out.astype(x.dtype, copy=False), parents=(x, gamma, beta), backward=backward)


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written via erf."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        x._accumulate(g * (cdf + x.data * pdf))

    return Tensor((x.data * cdf).astype(x.dtype, copy=False), parents=(x,), backward=backward)


def sigmoid(x):
    s = expit(x.data)

    def backward(g):
        x._accumulate(g * s * (1.0 - s))

    return Tensor(s, parents=(x,), backward=backward)


def activation(x, kind):
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")
