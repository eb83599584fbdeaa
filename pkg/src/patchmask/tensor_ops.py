"""Dense layer primitives with explicit forward/backward passes.

Tensors are plain ``numpy.ndarray`` objects; feature maps are NHWC
(batch, height, width, channel) so that im2col rows and GEMM outputs need
no transposes. Every ``*_forward`` returns ``(output, cache)`` and the
matching ``*_backward`` consumes that cache. Forward matrix products are
issued one sample at a time (stacked ``matmul``) so that a sample's result
never depends on which other samples share its batch; inference relies on
that for bit-exact tiling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractViolation

BN_EPS = 1e-5
LOG_EPS = 1e-12


@dataclass
class LayerParams:
    """Learnable arrays (and normalization statistics) of one layer.

    Convolutions use ``weight`` with shape ``(out, in, k, k)``; the fully
    connected layer uses ``weight`` ``(out, in)`` plus ``bias``; batch
    normalization uses ``scale``/``shift`` and the running statistics.
    """

    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    scale: np.ndarray | None = None
    shift: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    momentum: float = 0.9

    LEARNABLE = ("weight", "bias", "scale", "shift")
    STATISTICS = ("running_mean", "running_var")

    def __post_init__(self):
        vectors = [getattr(self, n) for n in ("scale", "shift", "running_mean", "running_var")]
        present = [v for v in vectors if v is not None]
        if present and len({v.shape for v in present}) != 1:
            raise ContractViolation("per-channel normalization vectors differ in length")
        if self.running_var is not None and not np.all(self.running_var > 0):
            raise ContractViolation("running variance must be strictly positive")
        if self.bias is not None and self.weight is not None and self.bias.shape[0] != self.weight.shape[0]:
            raise ContractViolation("bias length does not match output channels")

    @property
    def is_norm(self):
        return self.scale is not None

    def arrays(self, include_statistics=False):
        names = self.LEARNABLE + (self.STATISTICS if include_statistics else ())
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}

    def copy(self):
        kwargs = {n: (None if a is None else a.copy()) for n, a in
                  ((n, getattr(self, n)) for n in self.LEARNABLE + self.STATISTICS)}
        return LayerParams(momentum=self.momentum, **kwargs)


# --------------------------------------------------------------------------
# convolution


def conv_output_extent(extent, stride):
    """Spatial extent after a same-padded convolution: ``ceil(extent / stride)``."""
    return -(-extent // stride)


def _pad_hw(x, pad):
    b, h, w, c = x.shape
    out = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    out[:, pad:pad + h, pad:pad + w, :] = x
    return out


def _im2col(x, k, stride):
    pad = (k - 1) // 2
    b, h, w, c = x.shape
    ho, wo = conv_output_extent(h, stride), conv_output_extent(w, stride)
    if k == 1:
        cols = x[:, ::stride, ::stride, :] if stride != 1 else x
        return np.ascontiguousarray(cols).reshape(b, ho * wo, c), ho, wo
    xp = _pad_hw(x, pad)
    windows = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    # (b, ho, wo, c, k, k) -> (b, ho, wo, k, k, c)
    cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(b, ho * wo, k * k * c), ho, wo


def _kernel_matrix(weight):
    """``(out, in, k, k)`` kernel as a ``(k*k*in, out)`` matrix matching im2col order."""
    return weight.transpose(2, 3, 1, 0).reshape(-1, weight.shape[0])


def conv2d_forward(x, params, stride=1):
    """3x3 (or 1x1) cross-correlation with zero padding, NHWC in and out.

    Output extents are ``ceil(H / stride)``, so 15 -> 8 -> 4 at stride 2.
    """
    weight = params.weight if isinstance(params, LayerParams) else params
    cout, cin, k, k2 = weight.shape
    if x.ndim != 4 or x.shape[3] != cin:
        raise ContractViolation(
            f"conv2d: input {x.shape} does not match kernel input channels {cin}")
    if k != k2 or k not in (1, 3) or stride not in (1, 2):
        raise ContractViolation(f"conv2d: unsupported kernel {k}x{k2} / stride {stride}")
    cols, ho, wo = _im2col(x, k, stride)
    out = np.matmul(cols, _kernel_matrix(weight).astype(x.dtype, copy=False))
    out = out.reshape(x.shape[0], ho, wo, cout)
    if isinstance(params, LayerParams) and params.bias is not None:
        out += params.bias
    return out, (cols, x.shape, weight, stride)


def conv2d_backward(dout, cache):
    """Returns ``(grad_input, {"weight": ...})``."""
    if cache is None:
        raise ContractViolation("conv2d_backward: missing cached forward input")
    cols, x_shape, weight, stride = cache
    b, h, w, cin = x_shape
    cout, _, k, _ = weight.shape
    ho, wo = conv_output_extent(h, stride), conv_output_extent(w, stride)
    if dout.shape != (b, ho, wo, cout):
        raise ContractViolation(f"conv2d_backward: grad shape {dout.shape} != {(b, ho, wo, cout)}")
    d2 = dout.reshape(-1, cout)
    wmat = _kernel_matrix(weight)
    dw = (cols.reshape(-1, cols.shape[-1]).T @ d2).reshape(k, k, cin, cout).transpose(3, 2, 0, 1)
    if k == 3 and stride == 1:
        # the input gradient is a same-padded correlation with the flipped, transposed kernel
        flipped = weight.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
        dcols, _, _ = _im2col(dout, k, 1)
        dx = (dcols.reshape(-1, dcols.shape[-1]) @ _kernel_matrix(flipped).astype(dout.dtype, copy=False))
        return dx.reshape(x_shape), {"weight": np.ascontiguousarray(dw)}
    dcols = (d2 @ wmat.T).reshape(b, ho, wo, k * k, cin)
    if k == 1:
        if stride == 1:
            return dcols.reshape(x_shape), {"weight": np.ascontiguousarray(dw)}
        dx = np.zeros(x_shape, dtype=dout.dtype)
        dx[:, ::stride, ::stride, :] = dcols[:, :, :, 0, :]
        return dx, {"weight": np.ascontiguousarray(dw)}
    pad = (k - 1) // 2
    dxp = np.zeros((b, h + 2 * pad, w + 2 * pad, cin), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += \
                dcols[:, :, :, i * k + j, :]
    dx = np.ascontiguousarray(dxp[:, pad:pad + h, pad:pad + w, :])
    return dx, {"weight": np.ascontiguousarray(dw)}


# --------------------------------------------------------------------------
# batch normalization


def batchnorm_forward(x, params, mode="train", eps=BN_EPS):
    """Per-channel normalization of NHWC input over (batch, height, width).

    Train mode uses batch statistics and folds them into the running
    statistics in place: ``running = momentum * running + (1 - momentum) * batch``
    (biased batch variance). Eval mode is a fixed affine map.
    """
    c = x.shape[-1]
    if mode == "eval":
        inv = 1.0 / np.sqrt(params.running_var.astype(np.float64) + eps)
        a = (params.scale * inv).astype(x.dtype)
        shift = (params.shift - params.running_mean * params.scale * inv).astype(x.dtype)
        return x * a + shift, ("eval", a)
    if mode != "train":
        raise ContractViolation(f"unknown mode {mode!r}")
    if x.shape[0] < 2:
        raise ContractViolation("batchnorm in train mode needs a batch of at least 2")
    flat = x.reshape(-1, c)
    n = flat.shape[0]
    mean = flat.sum(axis=0, dtype=np.float64) / n
    xc = x - mean.astype(x.dtype)
    var = np.square(xc).reshape(-1, c).sum(axis=0, dtype=np.float64) / n
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std.astype(x.dtype)
    m = params.momentum
    params.running_mean = (m * params.running_mean + (1 - m) * mean).astype(params.running_mean.dtype)
    params.running_var = (m * params.running_var + (1 - m) * var).astype(params.running_var.dtype)
    gamma = params.scale.astype(x.dtype)
    out = xhat * gamma + params.shift.astype(x.dtype)
    return out, ("train", xhat, inv_std, gamma)


def batchnorm_backward(dout, cache):
    if cache[0] == "eval":
        return dout * cache[1], {}
    _, xhat, inv_std, gamma = cache
    c = dout.shape[-1]
    n = dout.size // c
    dbeta = dout.reshape(-1, c).sum(axis=0, dtype=np.float64)
    dgamma = (dout * xhat).reshape(-1, c).sum(axis=0, dtype=np.float64)
    k = (gamma * inv_std / n).astype(dout.dtype)
    dx = k * (dout * dout.dtype.type(n) - dbeta.astype(dout.dtype) - xhat * dgamma.astype(dout.dtype))
    return dx, {"scale": dgamma.astype(dout.dtype), "shift": dbeta.astype(dout.dtype)}


# --------------------------------------------------------------------------
# pointwise and head layers


def relu_forward(x):
    out = np.maximum(x, 0)
    return out, out


def relu_backward(dout, out):
    return np.where(out > 0, dout, 0).astype(dout.dtype, copy=False)


def avgpool_global_forward(x):
    """Mean over the spatial axes of NHWC input, accumulated in float64."""
    b, h, w, c = x.shape
    out = x.reshape(b, h * w, c).sum(axis=1, dtype=np.float64) / (h * w)
    return out.astype(x.dtype), x.shape


def avgpool_global_backward(dout, shape):
    b, h, w, c = shape
    return np.broadcast_to((dout / (h * w))[:, None, None, :], shape).copy()


def fully_connected_forward(x, params):
    """``x @ W.T + b`` for ``x`` of shape ``(batch, features)``."""
    w = params.weight
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ContractViolation(f"fully_connected: input {x.shape} vs weight {w.shape}")
    out = np.matmul(x[:, None, :], w.T)[:, 0, :]
    if params.bias is not None:
        out = out + params.bias
    return out, (x, w)


def fully_connected_backward(dout, cache):
    x, w = cache
    grads = {"weight": dout.T @ x, "bias": dout.sum(axis=0)}
    return dout @ w, grads


def dropout_forward(x, keep, mode="train", rng=None):
    """Inverted dropout; the identity in eval mode or when ``keep == 1``."""
    if mode == "eval" or keep >= 1.0:
        return x, None
    if not 0.0 < keep <= 1.0:
        raise ContractViolation(f"dropout keep probability {keep} outside (0, 1]")
    if rng is None:
        raise ContractViolation("dropout in train mode needs an explicit RNG stream")
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(dprobs, probs):
    """Vector-Jacobian product of softmax."""
    return probs * (dprobs - (dprobs * probs).sum(axis=1, keepdims=True))


def cross_entropy_loss(probs, labels, eps=LOG_EPS):
    """Mean binary cross entropy of the class-1 probability.

    Returns ``(loss, grad_logits)``; the gradient is taken with respect to
    the pre-softmax logits, ``(probs - onehot) / batch``. Clamping of ``p``
    to ``[eps, 1 - eps]`` only affects the reported value.
    """
    probs = np.asarray(probs)
    y = np.asarray(labels).astype(np.float64).reshape(-1)
    if probs.ndim != 2 or probs.shape[1] != 2 or probs.shape[0] != y.shape[0] or y.size == 0:
        raise ContractViolation(f"cross_entropy_loss: probabilities {probs.shape} vs labels {y.shape}")
    p = probs[:, 1].astype(np.float64)
    # probability given to the true class, so loss(y=0, p) == loss(y=1, 1 - p) exactly
    target = np.clip(np.where(y == 1, p, 1.0 - p), eps, 1 - eps)
    loss = -np.mean(np.log(target))
    onehot = np.stack([1 - y, y], axis=1)
    grad = ((probs - onehot) / y.size).astype(probs.dtype)
    return float(loss), grad


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple
    per_array: dict = field(default_factory=dict)
    tolerance: float = 1e-4
    n_checked: int = 0

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance

    @property
    def failures(self):
        return sorted(n for n, e in self.per_array.items() if e >= self.tolerance)

    @property
    def offending_layers(self):
        return sorted({n.rsplit(".", 1)[0] if "." in n else n for n in self.failures})

    def __str__(self):
        status = "ok" if self.passed else "FAILED in " + ", ".join(self.offending_layers)
        return (f"gradient check {status}: max relative error {self.max_rel_error:.3e} "
                f"over {self.n_checked} entries (tolerance {self.tolerance:g})")


def relative_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradient_check(loss_fn, arrays, analytic, tolerance=1e-4, n_checks=200, step=1e-5, seed=0):
    """Compare analytic gradients with central finite differences.

    ``arrays`` maps names to the float64 arrays ``loss_fn()`` reads (perturbed
    in place and restored); ``analytic`` maps the same names to gradients.
    Entries are drawn at random, at least ``n_checks`` in total and at least
    two per array, so every layer is exercised.
    """
    rng = np.random.default_rng(seed)
    total = sum(a.size for a in arrays.values())
    per_array, worst, worst_err, checked = {}, None, 0.0, 0
    for name, arr in arrays.items():
        if arr.dtype != np.float64:
            raise ContractViolation(f"gradient_check needs float64 arrays; {name} is {arr.dtype}")
        k = min(arr.size, max(2, math.ceil(n_checks * arr.size / total)))
        flat = arr.reshape(-1)
        grad = np.asarray(analytic[name]).reshape(-1)
        err_max = 0.0
        for idx in rng.choice(arr.size, size=k, replace=False):
            orig = flat[idx]
            flat[idx] = orig + step
            fp = loss_fn()
            flat[idx] = orig - step
            fm = loss_fn()
            flat[idx] = orig
            numeric = (fp - fm) / (2 * step)
            err = relative_error(float(grad[idx]), numeric)
            err_max = max(err_max, err)
            if err >= worst_err:
                worst_err, worst = err, (name, int(idx))
        per_array[name] = err_max
        checked += k
    return GradCheckReport(worst_err, worst, per_array, tolerance, checked)
