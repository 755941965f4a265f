"""Small numpy kernel for the encoder: layer forward/backward pairs, Adam,
and a central-difference gradient checker.

Tensors are plain ``numpy.ndarray`` objects in row-major order.  Activations
are laid out ``(channels, time)``; every op works in whatever float dtype it
is handed, so the same code trains in float32 and is gradient-checked in
float64.

Reduction order (for reproducibility): ``conv1d_backward`` accumulates the
input gradient tap by tap in increasing tap index; weight and bias gradients
are single BLAS/numpy reductions over time.  Batch-norm statistics reduce
over the concatenated time axis of all batch items in batch order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, InputTooShortError, NumericError

log = logging.getLogger(__name__)


@dataclass
class Parameter:
    """A trainable tensor together with its gradient and Adam moments."""

    value: np.ndarray
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    step_count: int = 0

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0


def conv_out_length(length, kernel_size, stride):
    """Output length of a valid (unpadded) strided convolution."""
    if length < kernel_size:
        raise InputTooShortError(length, kernel_size)
    return (length - kernel_size) // stride + 1


def _frames(x, kernel_size, stride):
    # (C_in, T) -> (C_in, T_out, k) strided view, no copy
    return sliding_window_view(x, kernel_size, axis=1)[:, ::stride, :]


def conv1d_forward(x, weight, bias, stride, acc_dtype=None):
    """Valid 1-D convolution (cross-correlation) of a ``(C_in, T)`` signal.

    Parameters
    ----------
    x : ndarray, shape (C_in, T)
    weight : ndarray, shape (C_out, C_in, k)
    bias : ndarray, shape (C_out,)
    stride : int
    acc_dtype : dtype, optional
        Accumulate in this dtype and round back to ``x.dtype``.  With float64
        accumulation of float32 data every output column is, in practice,
        bitwise independent of where it sits in the GEMM.

    Returns
    -------
    ndarray, shape (C_out, T_out) with ``T_out = (T - k) // stride + 1``.
    """
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    c_out, c_in, k = weight.shape
    if x.ndim != 2 or x.shape[0] != c_in:
        raise ContractError(f"input shape {x.shape} does not match weight {weight.shape}")
    if bias.shape != (c_out,):
        raise ContractError(f"bias shape {bias.shape}, expected ({c_out},)")
    t_out = conv_out_length(x.shape[1], k, stride)
    cols = _frames(x, k, stride)[:, :t_out, :]
    # (C_in, T_out, k) -> (C_in, k, T_out) -> (C_in*k, T_out)
    cols = cols.transpose(0, 2, 1).reshape(c_in * k, t_out)
    if acc_dtype is not None:
        out = weight.reshape(c_out, c_in * k).astype(acc_dtype) @ cols.astype(acc_dtype)
        out += bias[:, None]
        return out.astype(x.dtype)
    out = weight.reshape(c_out, c_in * k) @ cols
    out += bias[:, None]
    return out


def conv1d_backward(grad_out, x, weight, stride):
    """Gradients of :func:`conv1d_forward`.

    Returns ``(grad_input, grad_weight, grad_bias)``.
    """
    c_out, c_in, k = weight.shape
    if x.ndim != 2 or x.shape[0] != c_in:
        raise ContractError(f"saved input shape {x.shape} does not match weight {weight.shape}")
    t_out = conv_out_length(x.shape[1], k, stride)
    if grad_out.shape != (c_out, t_out):
        raise ContractError(f"grad_out shape {grad_out.shape}, expected {(c_out, t_out)}")

    cols = _frames(x, k, stride)[:, :t_out, :].transpose(0, 2, 1).reshape(c_in * k, t_out)
    grad_weight = (grad_out @ cols.T).reshape(c_out, c_in, k)
    grad_bias = grad_out.sum(axis=1)

    gcols = (weight.reshape(c_out, c_in * k).T @ grad_out).reshape(c_in, k, t_out)
    grad_input = np.zeros_like(x)
    span = stride * (t_out - 1) + 1
    for j in range(k):
        grad_input[:, j:j + span:stride] += gcols[:, j, :]
    return grad_input, grad_weight, grad_bias


@dataclass
class BatchNormStats:
    """Running statistics of one batch-norm layer (not trained by Adam)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    num_batches_tracked: int = 0

    @classmethod
    def fresh(cls, channels, dtype=np.float32):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm_forward(xs, gamma, beta, stats, training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over the batch and time axes.

    ``xs`` is a list of ``(C, T_b)`` arrays (one per batch item, lengths may
    differ); statistics pool every frame of every item.  In training mode the
    running statistics in ``stats`` are updated by an exponential moving
    average (unbiased variance, as is conventional).  Returns
    ``(outputs, cache)``; ``cache`` is ``None`` in eval mode.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    lengths = [x.shape[1] for x in xs]
    x = np.concatenate(xs, axis=1) if len(xs) > 1 else xs[0]
    if training:
        n = x.shape[1]
        mean = x.mean(axis=1)
        xc = x - mean[:, None]
        var = (xc * xc).mean(axis=1)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std[:, None]
        unbiased = var * (n / (n - 1)) if n > 1 else var
        stats.running_mean[...] = (1 - momentum) * stats.running_mean + momentum * mean
        stats.running_var[...] = (1 - momentum) * stats.running_var + momentum * unbiased
        stats.num_batches_tracked += 1
        cache = (xhat, inv_std, gamma, lengths)
    else:
        if stats.num_batches_tracked == 0:
            log.warning("batch norm used in eval mode before any training batch; "
                        "running statistics are the initial (0, 1)")
        inv_std = 1.0 / np.sqrt(stats.running_var + eps)
        xhat = (x - stats.running_mean[:, None]) * inv_std[:, None]
        cache = None
    out = gamma[:, None] * xhat + beta[:, None]
    out = out.astype(xs[0].dtype, copy=False)
    return np.split(out, np.cumsum(lengths)[:-1], axis=1), cache


def batchnorm_backward(grad_outs, cache):
    """Gradients of training-mode :func:`batchnorm_forward`.

    Returns ``(grad_inputs, grad_gamma, grad_beta)`` where ``grad_inputs``
    is split like the forward inputs.
    """
    xhat, inv_std, gamma, lengths = cache
    g = np.concatenate(grad_outs, axis=1) if len(grad_outs) > 1 else grad_outs[0]
    if g.shape != xhat.shape:
        raise ContractError(f"grad shape {g.shape} does not match cached {xhat.shape}")
    grad_beta = g.sum(axis=1)
    grad_gamma = (g * xhat).sum(axis=1)
    n = g.shape[1]
    gx = (gamma * inv_std / n)[:, None] * (n * g - grad_beta[:, None] - xhat * grad_gamma[:, None])
    return np.split(gx, np.cumsum(lengths)[:-1], axis=1), grad_gamma, grad_beta


def leaky_relu(x, slope=0.01):
    return np.where(x >= 0, x, slope * x)


def leaky_relu_backward(grad_out, x, slope=0.01):
    return np.where(x >= 0, grad_out, slope * grad_out)


def linear_forward(x, weight, bias, acc_dtype=None):
    """Frame-wise affine map: ``(C, T) -> (N, T)`` with ``weight`` ``(N, C)``."""
    if x.ndim != 2 or weight.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise ContractError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ContractError(f"linear: bias shape {bias.shape}, expected ({weight.shape[0]},)")
    if acc_dtype is not None:
        return (weight.astype(acc_dtype) @ x.astype(acc_dtype) + bias[:, None]).astype(x.dtype)
    return weight @ x + bias[:, None]


def linear_backward(grad_out, x, weight):
    if grad_out.shape != (weight.shape[0], x.shape[1]):
        raise ContractError(f"linear: grad_out shape {grad_out.shape} inconsistent with "
                            f"input {x.shape} and weight {weight.shape}")
    return weight.T @ grad_out, grad_out @ x.T, grad_out.sum(axis=1)


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, in place, then clear the gradients.

    ``params`` maps names to :class:`Parameter`.  If any gradient is
    non-finite nothing is updated and :class:`NumericError` is raised.
    """
    for name, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {name!r}; step aborted")
    for p in params.values():
        p.step_count += 1
        t = p.step_count
        g = p.grad
        p.m *= beta1
        p.m += (1 - beta1) * g
        p.v *= beta2
        p.v += (1 - beta2) * (g * g)
        m_hat = p.m / (1 - beta1 ** t)
        v_hat = p.v / (1 - beta2 ** t)
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype, copy=False)
        p.zero_grad()


FLOOR_FRACTION = 0.01


@dataclass
class GradCheckReport:
    max_rel_error: dict
    tol: float
    checked: dict

    @property
    def worst(self):
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0

    @property
    def passed(self):
        return self.worst < self.tol

    def __str__(self):
        lines = [f"{name}: max rel err {err:.3e} over {self.checked[name]} coords"
                 for name, err in self.max_rel_error.items()]
        return "\n".join(lines)


def grad_check(func: Callable[[], tuple], params: Mapping[str, np.ndarray],
               h=1e-3, tol=1e-5, max_coords=None, seed=0):
    """Compare analytic gradients with central differences.

    ``func()`` must return ``(loss, grads)`` where ``grads`` maps every name
    in ``params`` to an array of the same shape.  ``params`` arrays are
    perturbed in place (and restored) so ``func`` has to read them live.
    If ``max_coords`` is set, only that many randomly chosen coordinates of
    each parameter are differenced.

    The per-coordinate error is ``|a - n| / max(|a|, |n|, floor)`` where
    ``floor = 0.01 * max(|a|, |n|)`` over the parameter, so entries that are
    tiny next to the parameter's largest gradient are judged on an absolute
    scale instead of amplifying O(h^2) truncation error.
    """
    _, analytic = func()
    analytic = {k: np.array(v, dtype=np.float64) for k, v in analytic.items()}
    rng = np.random.default_rng(seed)
    errors, checked = {}, {}
    for name, arr in params.items():
        flat = arr.reshape(-1)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        else:
            idx = np.arange(flat.size)
        numeric = np.empty(len(idx))
        for n, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            f_plus = float(func()[0])
            flat[i] = old - h
            f_minus = float(func()[0])
            flat[i] = old
            numeric[n] = (f_plus - f_minus) / (2 * h)
        a = analytic[name].reshape(-1)[idx]
        floor = FLOOR_FRACTION * max(np.max(np.abs(numeric)), np.max(np.abs(a)), 1e-300)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        errors[name] = float(np.max(np.abs(a - numeric) / denom)) if len(idx) else 0.0
        checked[name] = len(idx)
    return GradCheckReport(errors, tol, checked)
