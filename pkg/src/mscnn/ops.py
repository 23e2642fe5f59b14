"""Core array operations: convolution, deconvolution, pooling, activations
and the SGD update rule, with hand-derived backward passes.

Tensors are plain numpy arrays in (batch, channel, height, width) layout,
float32 by default; pass float64 arrays to run any operation in the 64-bit
gradient-checking mode. Pool switches are uint8 arrays shaped like the
pooled tensor, holding the argmax flat index (0..3, row-major) of each 2x2
window. Every function is pure: inputs are never mutated, repeated calls
are bit-identical.

"Same" padding zero-pads so the output spatial size is ceil(input/stride),
split floor(total/2) before / rest after. Transposed convolution is the
exact adjoint of the convolution with the same geometry, so its "same"
output size is input*stride.
"""

import numpy as np

from .backend import kernels


def _check_finite(arr, op):
    s = float(np.sum(arr, dtype=np.float64))
    if not np.isfinite(s) and not np.isfinite(arr).all():
        raise FloatingPointError(f"{op}: result contains non-finite values")


def same_pad_1d(size, kernel, stride):
    """(output size, pad before, pad after) for 'same' padding."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def explicit_out_1d(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


class ConvSpec:
    """Geometry of one (possibly transposed) convolution."""

    __slots__ = ("in_channels", "out_channels", "kernel", "stride", "padding", "transposed")

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding="same",
                 transposed=False):
        if kernel < 1:
            raise ValueError(f"kernel must be >= 1, got {kernel}")
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        if padding != "same" and (not isinstance(padding, int) or padding < 0):
            raise ValueError(f"padding must be 'same' or a non-negative count, got {padding!r}")
        if in_channels < 1 or out_channels < 1:
            raise ValueError("channel counts must be positive")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.transposed = transposed

    def pads(self, h, w):
        """Padding (pt, pb, pl, pr) for a (non-transposed) input of h x w."""
        k, s = self.kernel, self.stride
        if self.padding == "same":
            _, pt, pb = same_pad_1d(h, k, s)
            _, pl, pr = same_pad_1d(w, k, s)
        else:
            pt = pb = pl = pr = self.padding
        return pt, pb, pl, pr

    def __repr__(self):
        return (f"ConvSpec({self.in_channels}->{self.out_channels}, k={self.kernel}, "
                f"s={self.stride}, pad={self.padding!r}, transposed={self.transposed})")


def _pad_nchw(x, pt, pb, pl, pr):
    if pt == pb == pl == pr == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + pt + pb, w + pl + pr), x.dtype)
    out[:, :, pt : pt + h, pl : pl + w] = x
    return out


def _require(cond, msg):
    if not cond:
        raise ValueError(msg)


def _check_conv_args(x, weights, bias, spec, transposed):
    _require(x.ndim == 4, f"input must be rank 4 (n,c,h,w), got shape {x.shape}")
    _require(spec.transposed == transposed,
             f"spec.transposed={spec.transposed} does not match the operation")
    if transposed:
        wshape = (spec.in_channels, spec.out_channels, spec.kernel, spec.kernel)
    else:
        wshape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
    _require(tuple(weights.shape) == wshape,
             f"weights shape {weights.shape} does not match spec {wshape}")
    _require(x.shape[1] == spec.in_channels,
             f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if bias is not None:
        _require(bias.shape == (spec.out_channels,),
                 f"bias shape {bias.shape}, expected ({spec.out_channels},)")
        _require(bias.dtype == x.dtype, "bias dtype must match input dtype")
    _require(weights.dtype == x.dtype, "weights dtype must match input dtype")


def conv2d(x, weights, bias, spec):
    """2-D correlation plus bias. weights: (out_ch, in_ch, k, k)."""
    _check_conv_args(x, weights, bias, spec, transposed=False)
    pt, pb, pl, pr = spec.pads(x.shape[2], x.shape[3])
    xp = _pad_nchw(x, pt, pb, pl, pr)
    out = kernels().conv2d_padded(xp, weights, bias, spec.stride)
    _require(out.shape[2] >= 1 and out.shape[3] >= 1,
             f"empty output for input {x.shape} with {spec}")
    _check_finite(out, "conv2d")
    return out


def conv2d_backward(x, weights, grad_out, spec):
    """Gradients of conv2d w.r.t. input, weights and bias."""
    _check_conv_args(x, weights, None, spec, transposed=False)
    pt, pb, pl, pr = spec.pads(x.shape[2], x.shape[3])
    xp = _pad_nchw(x, pt, pb, pl, pr)
    k, s = spec.kernel, spec.stride
    ho = (xp.shape[2] - k) // s + 1
    wo = (xp.shape[3] - k) // s + 1
    _require(grad_out.shape == (x.shape[0], spec.out_channels, ho, wo),
             f"grad_out shape {grad_out.shape}, expected {(x.shape[0], spec.out_channels, ho, wo)}")
    _require(grad_out.dtype == x.dtype, "grad_out dtype must match input dtype")

    grad_bias = grad_out.sum(axis=(0, 2, 3))
    grad_weights = kernels().conv2d_grad_weight(xp, grad_out, k, k, s)

    if s == 1 and k - 1 - pt >= 0 and k - 1 - pb >= 0 and k - 1 - pl >= 0 and k - 1 - pr >= 0:
        # gather form: correlate padded grad with the flipped, transposed kernel
        gp = _pad_nchw(grad_out, k - 1 - pt, k - 1 - pb, k - 1 - pl, k - 1 - pr)
        wft = np.ascontiguousarray(weights.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        zero = np.zeros(spec.in_channels, x.dtype)
        grad_input = kernels().conv2d_padded(gp, wft, zero, 1)
    else:
        gxp = kernels().tconv2d_scatter(grad_out, weights, s, xp.shape[2], xp.shape[3])
        grad_input = np.ascontiguousarray(
            gxp[:, :, pt : pt + x.shape[2], pl : pl + x.shape[3]])
    _check_finite(grad_input, "conv2d_backward")
    return grad_input, grad_weights, grad_bias


def _tconv_geometry(spec, h, w):
    """Output size and conv-side pads for a transposed conv on h x w input."""
    k, s = spec.kernel, spec.stride
    if spec.padding == "same":
        oh, ow = h * s, w * s
    else:
        oh = (h - 1) * s + k - 2 * spec.padding
        ow = (w - 1) * s + k - 2 * spec.padding
        _require(oh >= 1 and ow >= 1, f"transposed output would be empty for input {h}x{w}")
    fwd = ConvSpec(spec.out_channels, spec.in_channels, k, s, spec.padding)
    pt, pb, pl, pr = fwd.pads(oh, ow)
    # the adjoint pair must agree on the downsampled size
    _require((oh + pt + pb - k) // s + 1 == h and (ow + pl + pr - k) // s + 1 == w,
             f"transposed geometry mismatch for input {h}x{w} with {spec}")
    return oh, ow, pt, pb, pl, pr


def transposed_conv2d(x, weights, bias, spec):
    """Transposed convolution (adjoint of conv2d). weights: (in_ch, out_ch, k, k)."""
    _check_conv_args(x, weights, bias, spec, transposed=True)
    oh, ow, pt, pb, pl, pr = _tconv_geometry(spec, x.shape[2], x.shape[3])
    padded = kernels().tconv2d_scatter(x, weights, spec.stride, oh + pt + pb, ow + pl + pr)
    out = np.ascontiguousarray(padded[:, :, pt : pt + oh, pl : pl + ow])
    out += bias[None, :, None, None]
    _check_finite(out, "transposed_conv2d")
    return out


def transposed_conv2d_backward(x, weights, grad_out, spec):
    """Gradients of transposed_conv2d w.r.t. input, weights and bias."""
    _check_conv_args(x, weights, None, spec, transposed=True)
    oh, ow, pt, pb, pl, pr = _tconv_geometry(spec, x.shape[2], x.shape[3])
    _require(grad_out.shape == (x.shape[0], spec.out_channels, oh, ow),
             f"grad_out shape {grad_out.shape}, expected {(x.shape[0], spec.out_channels, oh, ow)}")
    _require(grad_out.dtype == x.dtype, "grad_out dtype must match input dtype")
    gp = _pad_nchw(grad_out, pt, pb, pl, pr)
    zero = np.zeros(spec.in_channels, x.dtype)
    grad_input = kernels().conv2d_padded(gp, weights, zero, spec.stride)
    grad_weights = kernels().conv2d_grad_weight(gp, x, spec.kernel, spec.kernel, spec.stride)
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    _check_finite(grad_input, "transposed_conv2d_backward")
    return grad_input, grad_weights, grad_bias


def maxpool2x2(x, pad_odd=False):
    """Disjoint 2x2 max pooling. Returns (pooled, switches).

    Odd spatial sizes are rejected unless pad_odd, which extends the
    bottom/right edge with -inf before pooling.
    """
    _require(x.ndim == 4, f"input must be rank 4, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        if not pad_odd:
            raise ValueError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
        hp, wp = h + h % 2, w + w % 2
        xe = np.full((n, c, hp, wp), -np.inf, x.dtype)
        xe[:, :, :h, :w] = x
        x = xe
    out, sw = kernels().maxpool2x2(x)
    _check_finite(out, "maxpool2x2")
    return out, sw


def maxpool2x2_backward(grad_out, switches):
    """Route pooled gradients back to their argmax positions."""
    return unpool2x2(grad_out, switches)


def unpool2x2(y, switches):
    """Scatter each value to its switch position in a 2x-larger map."""
    _require(y.ndim == 4, f"input must be rank 4, got shape {y.shape}")
    _require(y.shape == switches.shape,
             f"value shape {y.shape} does not match switches shape {switches.shape}")
    if switches.size and int(switches.max()) > 3:
        raise ValueError("switch index out of its 2x2 window")
    return kernels().unpool2x2(y, switches)


def unpool2x2_backward(grad_out, switches):
    """Adjoint of unpool2x2: gather gradients from the switch positions."""
    _require(grad_out.shape[2] == 2 * switches.shape[2]
             and grad_out.shape[3] == 2 * switches.shape[3]
             and grad_out.shape[:2] == switches.shape[:2],
             f"gradient shape {grad_out.shape} inconsistent with switches {switches.shape}")
    return kernels().unpool2x2_gather(grad_out, switches)


def avgpool_same(x, window=3):
    """Shape-preserving windowed mean; zero padding, full-window divisor.

    Self-adjoint, so it is also its own backward operation.
    """
    _require(x.ndim == 4, f"input must be rank 4, got shape {x.shape}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd, got {window}")
    r = window // 2
    xp = _pad_nchw(x, r, r, r, r)
    out = kernels().avgpool_win(xp, window)
    _check_finite(out, "avgpool_same")
    return out


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return np.where(x > 0, grad_out, x.dtype.type(0))


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out, y):
    """Backward through sigmoid given its output y."""
    return grad_out * y * (1.0 - y)


def hadamard(a, b):
    """Elementwise product; shapes must match exactly."""
    _require(a.shape == b.shape, f"hadamard shapes differ: {a.shape} vs {b.shape}")
    return a * b


def sgd_momentum_step(param, grad, velocity, lr, momentum, weight_decay):
    """One SGD step: v' = momentum*v + (grad + 2*weight_decay*param),
    param' = param - lr*v'. Returns (param', v') without mutating inputs."""
    _require(param.shape == grad.shape == velocity.shape,
             f"shape mismatch: param {param.shape}, grad {grad.shape}, velocity {velocity.shape}")
    if not lr > 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must be in [0,1), got {momentum}")
    if weight_decay < 0:
        raise ValueError(f"weight_decay must be >= 0, got {weight_decay}")
    for name, arr in (("param", param), ("grad", grad), ("velocity", velocity)):
        s = float(np.sum(arr, dtype=np.float64))
        if not np.isfinite(s) and not np.isfinite(arr).all():
            raise FloatingPointError(f"sgd_momentum_step: non-finite {name}")
    dt = param.dtype.type
    new_v = dt(momentum) * velocity + (grad + dt(2.0 * weight_decay) * param)
    new_p = param - dt(lr) * new_v
    return new_p, new_v
