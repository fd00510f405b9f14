"""Dense NCHW tensor ops: convolution, batch norm, pooling, loss, SGD.

All arrays are numpy ndarrays. Training math runs in float64; inference may
feed float32 inputs but every op promotes to float64 internally so results are
identical either way.

Layout is NCHW for activations and [Co, Ci, kh, kw] for conv weights.
Convolution output extent is floor((H + 2*pad - kh) / stride) + 1 per axis.

Determinism: convolutions reduce through an im2col matrix whose contraction
axis is laid out kernel-major then input-channel, and the matrix product is a
single BLAS gemm (parallel over output tiles, serial over the reduction), so
results are bit-identical across runs and thread counts. Everything else is
elementwise or a fixed-order numpy reduction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConvGeometry:
    """Static shape parameters of a 2-d convolution.

    Attributes:
        kernel: (kh, kw) filter extent.
        stride: step between output positions, shared by both axes.
        padding: symmetric zero/pad-value ring width, shared by both axes.
    """

    kernel: tuple[int, int]
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        kh, kw = self.kernel
        if kh < 1 or kw < 1:
            raise ValueError(f"kernel must be positive, got {self.kernel}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")

    def out_extent(self, h: int, w: int) -> tuple[int, int]:
        """Output (H', W') for an input of spatial extent (h, w)."""
        kh, kw = self.kernel
        oh = (h + 2 * self.padding - kh) // self.stride + 1
        ow = (w + 2 * self.padding - kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ValueError(
                f"kernel {self.kernel} with stride {self.stride} and padding "
                f"{self.padding} does not fit input extent {(h, w)}"
            )
        return oh, ow


def _check_conv_shapes(x: np.ndarray, w: np.ndarray, geom: ConvGeometry) -> None:
    if x.ndim != 4:
        raise ValueError(f"conv input must be 4-d NCHW, got ndim={x.ndim}")
    if w.ndim != 4:
        raise ValueError(f"conv weight must be 4-d [Co,Ci,kh,kw], got ndim={w.ndim}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"input channels {x.shape[1]} != weight input channels {w.shape[1]}"
        )
    if (w.shape[2], w.shape[3]) != geom.kernel:
        raise ValueError(
            f"weight kernel {(w.shape[2], w.shape[3])} != geometry kernel {geom.kernel}"
        )


def _pad_input(x: np.ndarray, pad: int, pad_value: float) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(
        x, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
        mode="constant", constant_values=pad_value,
    )


def _im2col(xp: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Patch matrix [N*OH*OW, kh*kw*Ci] from a padded input.

    The reduction axis is ordered (kh, kw, ci): kernel-major, then input
    channel, which fixes the accumulation blocking for determinism.
    """
    kh, kw = geom.kernel
    s = geom.stride
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::s, ::s, :, :]                      # [N, Ci, OH, OW, kh, kw]
    n, ci, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 4, 5, 1)               # [N, OH, OW, kh, kw, Ci]
    return np.ascontiguousarray(cols).reshape(n * oh * ow, kh * kw * ci)


def _weight_matrix(w: np.ndarray) -> np.ndarray:
    """Weights as [kh*kw*Ci, Co], matching the im2col reduction layout."""
    co = w.shape[0]
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(-1, co)


def conv2d_forward(
    x: np.ndarray,
    w: np.ndarray,
    geom: ConvGeometry,
    pad_value: float = 0.0,
) -> np.ndarray:
    """2-d cross-correlation (no bias).

    Args:
        x: input [N, Ci, H, W].
        w: filters [Co, Ci, kh, kw].
        geom: stride/padding/kernel description; geom.kernel must match w.
        pad_value: value of the padding ring (0 for real inputs, -1 for
            binarized planes).

    Returns:
        Output [N, Co, H', W'] in float64.
    """
    _check_conv_shapes(x, w, geom)
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, _, h, wd = x.shape
    oh, ow = geom.out_extent(h, wd)
    xp = _pad_input(x, geom.padding, pad_value)
    cols = _im2col(xp, geom)
    y = cols @ _weight_matrix(w)                          # [N*OH*OW, Co]
    return y.reshape(n, oh, ow, w.shape[0]).transpose(0, 3, 1, 2)


def conv2d_backward(
    grad_y: np.ndarray,
    x: np.ndarray,
    w: np.ndarray,
    geom: ConvGeometry,
    pad_value: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of conv2d_forward w.r.t. input and weights.

    Args:
        grad_y: upstream gradient [N, Co, H', W'].
        x, w, geom, pad_value: exactly as passed to the forward call.

    Returns:
        (grad_x [N, Ci, H, W], grad_w [Co, Ci, kh, kw]).

    The padding ring receives gradient too, but it is discarded: pad cells
    are constants, not inputs.
    """
    _check_conv_shapes(x, w, geom)
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    grad_y = np.asarray(grad_y, dtype=np.float64)
    n, ci, h, wd = x.shape
    co = w.shape[0]
    kh, kw = geom.kernel
    s, p = geom.stride, geom.padding
    oh, ow = geom.out_extent(h, wd)
    if grad_y.shape != (n, co, oh, ow):
        raise ValueError(
            f"grad_y shape {grad_y.shape} != expected {(n, co, oh, ow)}"
        )

    gy = np.ascontiguousarray(grad_y.transpose(0, 2, 3, 1)).reshape(-1, co)

    xp = _pad_input(x, p, pad_value)
    cols = _im2col(xp, geom)
    gw = (gy.T @ cols).reshape(co, kh, kw, ci).transpose(0, 3, 1, 2)

    gcols = gy @ _weight_matrix(w).T                      # [N*OH*OW, kh*kw*Ci]
    gcols = gcols.reshape(n, oh, ow, kh, kw, ci)
    gxp = np.zeros_like(xp)
    for i in range(kh):                                   # scatter-add col2im
        for j in range(kw):
            gxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += (
                gcols[:, :, :, i, j, :].transpose(0, 3, 1, 2)
            )
    if p:
        gxp = gxp[:, :, p:-p, p:-p]
    return gxp, np.ascontiguousarray(gw)


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float = 0.1,
    eps: float = 1e-5,
    training: bool = True,
) -> tuple[np.ndarray, dict]:
    """Per-channel batch normalization over (N, H, W).

    In training mode normalizes with batch statistics and updates
    running_mean / running_var in place:
        running <- (1 - momentum) * running + momentum * batch.
    In inference mode normalizes with the running statistics, making the op
    batch-invariant.

    Returns:
        (y, cache) where cache feeds batchnorm_backward.
    """
    if x.ndim != 4:
        raise ValueError(f"batchnorm input must be 4-d NCHW, got ndim={x.ndim}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}"
        )
    x = np.asarray(x, dtype=np.float64)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        if x.shape[0] == 0:
            raise ValueError("batchnorm requires a non-empty batch in training mode")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))                      # biased, matches backward
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = {"xhat": xhat, "gamma": gamma, "inv_std": inv_std, "m": m,
             "training": training}
    return y, cache


def batchnorm_backward(
    grad_y: np.ndarray, cache: dict
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of batchnorm_forward (training mode) w.r.t. x, gamma, beta."""
    xhat = cache["xhat"]
    gamma = cache["gamma"]
    inv_std = cache["inv_std"]
    m = cache["m"]
    grad_y = np.asarray(grad_y, dtype=np.float64)
    dgamma = np.sum(grad_y * xhat, axis=(0, 2, 3))
    dbeta = np.sum(grad_y, axis=(0, 2, 3))
    if not cache["training"]:
        dx = grad_y * (gamma * inv_std)[None, :, None, None]
        return dx, dgamma, dbeta
    dxhat = grad_y * gamma[None, :, None, None]
    s1 = np.sum(dxhat, axis=(0, 2, 3))[None, :, None, None]
    s2 = np.sum(dxhat * xhat, axis=(0, 2, 3))[None, :, None, None]
    dx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


def avgpool_global(x: np.ndarray) -> np.ndarray:
    """Spatial mean: [N, C, H, W] -> [N, C]."""
    if x.ndim != 4:
        raise ValueError(f"global pool input must be 4-d NCHW, got ndim={x.ndim}")
    return np.asarray(x, dtype=np.float64).mean(axis=(2, 3))


def avgpool_global_backward(grad_y: np.ndarray, in_shape: tuple) -> np.ndarray:
    n, c, h, w = in_shape
    g = np.asarray(grad_y, dtype=np.float64) / (h * w)
    return np.broadcast_to(g[:, :, None, None], in_shape).copy()


def avgpool_2x2(x: np.ndarray) -> np.ndarray:
    """Non-overlapping 2x2 mean pool; H and W must be even."""
    if x.ndim != 4:
        raise ValueError(f"2x2 pool input must be 4-d NCHW, got ndim={x.ndim}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"2x2 pool needs even spatial extent, got {(h, w)}")
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avgpool_2x2_backward(grad_y: np.ndarray, in_shape: tuple) -> np.ndarray:
    n, c, h, w = in_shape
    g = np.asarray(grad_y, dtype=np.float64) / 4.0
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. logits.

    Args:
        logits: [N, K] real scores.
        labels: [N] integer class ids in [0, K).

    Returns:
        (loss, grad) with grad[i] = (softmax(logits[i]) - onehot(labels[i])) / N.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"logits must be 2-d [N,K], got ndim={logits.ndim}")
    n, k = logits.shape
    if n == 0:
        raise ValueError("softmax_cross_entropy requires a non-empty batch")
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(
            f"labels must lie in [0, {k}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    logp = z[rows, labels] - np.log(ez.sum(axis=1))
    loss = float(-logp.mean())
    grad = p.copy()
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


def sgd_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    velocities: list[np.ndarray],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    decay_mask: list[bool] | None = None,
) -> None:
    """One SGD step with classic momentum, updating params in place.

    For each parameter:
        v <- momentum * v + grad + wd * param
        param <- param - lr * v
    where wd is weight_decay when the parameter's decay_mask entry is True
    (mask None means decay applies to all).
    """
    if not (len(params) == len(grads) == len(velocities)):
        raise ValueError(
            f"params/grads/velocities lengths differ: "
            f"{len(params)}/{len(grads)}/{len(velocities)}"
        )
    if decay_mask is not None and len(decay_mask) != len(params):
        raise ValueError(
            f"decay_mask length {len(decay_mask)} != params length {len(params)}"
        )
    for i, (p, g, v) in enumerate(zip(params, grads, velocities)):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(
                f"param {i}: shape mismatch param {p.shape} grad {g.shape} "
                f"velocity {v.shape}"
            )
        wd = weight_decay if (decay_mask is None or decay_mask[i]) else 0.0
        v *= momentum
        v += g
        if wd:
            v += wd * p
        p -= lr * v
