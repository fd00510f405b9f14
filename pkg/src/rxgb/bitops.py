"""1-bit compute: bit-packed planes, XNOR-popcount dots, binary conv,
weight binarization, and the shifted sign / shifted PReLU activations.

Encoding: a bit value of 1 means +1 and 0 means -1; sign(0) is +1 everywhere.
Bits are packed LSB-first into little-endian uint64 words (word_bits = 64),
row-major over the logical tensor. Padding bits past the payload are zero and
are masked out of every popcount.

The XNOR identity for n-length {-1,+1} vectors:
    dot(a, b) = 2 * popcount(NOT(a XOR b) AND payload_mask) - n.

Binary convolution accumulates exact integers via popcount and applies the
per-output-channel scale once at the end, so its output is bit-identical to
the real-valued convolution of the unpacked operands whenever those integer
sums are exactly representable (always, at these sizes).

Activation gradients use the piecewise surrogate

    approxsign(u) = -1          u < -1
                    u^2 + 2u    -1 <= u < 0
                    2u - u^2    0 <= u < 1
                    1           u >= 1

whose derivative (2+2u on [-1,0), 2-2u on [0,1), else 0) replaces the true
zero-almost-everywhere derivative of sign.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WORD_BITS = 64


@dataclass
class BitPlane:
    """Bit-packed view of a {-1,+1} tensor.

    Attributes:
        words: 1-d uint64 array, LSB-first packed bits.
        n_bits: payload length (= prod(shape)); trailing bits are zero.
        shape: logical tensor shape.
    """

    words: np.ndarray
    n_bits: int
    shape: tuple[int, ...]

    def __post_init__(self):
        if self.words.dtype != np.uint64:
            raise ValueError(f"words must be uint64, got {self.words.dtype}")
        expect = (self.n_bits + WORD_BITS - 1) // WORD_BITS
        if self.words.shape != (expect,):
            raise ValueError(
                f"words length {self.words.shape} != expected ({expect},) "
                f"for {self.n_bits} bits"
            )
        if int(np.prod(self.shape)) != self.n_bits:
            raise ValueError(f"shape {self.shape} does not hold {self.n_bits} bits")

    @property
    def payload_mask(self) -> np.ndarray:
        """Per-word mask with ones at payload bit positions."""
        return _payload_mask(self.n_bits, len(self.words))


def _payload_mask(n_bits: int, n_words: int) -> np.ndarray:
    mask = np.full(n_words, np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    rem = n_bits % WORD_BITS
    if rem:
        mask[-1] = np.uint64((1 << rem) - 1)
    return mask


def _pack_bit_rows(bits: np.ndarray) -> np.ndarray:
    """[R, K] 0/1 uint8 -> [R, ceil(K/64)] uint64, LSB-first per row."""
    r, k = bits.shape
    n_words = (k + WORD_BITS - 1) // WORD_BITS
    packed = np.packbits(bits, axis=1, bitorder="little")  # [R, ceil(K/8)] u8
    out = np.zeros((r, n_words * 8), dtype=np.uint8)
    out[:, :packed.shape[1]] = packed
    return out.view("<u8").reshape(r, n_words)


def pack(x: np.ndarray) -> BitPlane:
    """Binarize a real tensor (sign with sign(0)=+1) and bit-pack it."""
    x = np.asarray(x)
    bits = (x >= 0).astype(np.uint8).reshape(1, -1)
    words = _pack_bit_rows(bits)[0]
    return BitPlane(words=words, n_bits=x.size, shape=tuple(x.shape))


def unpack(plane: BitPlane) -> np.ndarray:
    """Inverse of pack: {-1,+1} float64 tensor of plane.shape."""
    bits = np.unpackbits(
        plane.words.view(np.uint8), count=plane.n_bits, bitorder="little"
    )
    return (bits.astype(np.float64) * 2.0 - 1.0).reshape(plane.shape)


def xnor_dot(a: BitPlane, b: BitPlane) -> int:
    """Exact integer dot product of two packed {-1,+1} vectors."""
    if a.n_bits != b.n_bits:
        raise ValueError(f"length mismatch: {a.n_bits} vs {b.n_bits} bits")
    xnor = ~(a.words ^ b.words) & a.payload_mask
    pop = int(np.bitwise_count(xnor).sum())
    return 2 * pop - a.n_bits


def binarize_weights(
    w_latent: np.ndarray, weight_scaling: bool = True
) -> tuple[BitPlane, np.ndarray]:
    """Binarize latent conv weights.

    Args:
        w_latent: [Co, Ci, kh, kw] real latent weights.
        weight_scaling: when True, alpha[co] = mean(|w_latent[co]|); when
            False, alpha is all ones.

    Returns:
        (bits, alpha): packed sign bits in canonical [Co, Ci, kh, kw] row-major
        order and the per-output-channel scale.
    """
    if w_latent.ndim != 4:
        raise ValueError(f"latent weights must be 4-d, got ndim={w_latent.ndim}")
    w_latent = np.asarray(w_latent, dtype=np.float64)
    if weight_scaling:
        alpha = np.abs(w_latent).mean(axis=(1, 2, 3))
    else:
        alpha = np.ones(w_latent.shape[0])
    return pack(w_latent), alpha


def effective_weights(
    w_latent: np.ndarray, weight_scaling: bool = True
) -> np.ndarray:
    """Real-arithmetic twin of binarize_weights: alpha[co] * sign(w_latent)."""
    w_latent = np.asarray(w_latent, dtype=np.float64)
    sgn = np.where(w_latent >= 0, 1.0, -1.0)
    if not weight_scaling:
        return sgn
    alpha = np.abs(w_latent).mean(axis=(1, 2, 3))
    return sgn * alpha[:, None, None, None]


def ste_mask(w_latent: np.ndarray) -> np.ndarray:
    """Straight-through clip indicator 1{|w| <= 1} as float64."""
    return (np.abs(w_latent) <= 1.0).astype(np.float64)


def binary_conv2d(x_bits: BitPlane, w_bits: BitPlane, alpha: np.ndarray, geom) -> np.ndarray:
    """Convolution over bit-packed operands via XNOR-popcount.

    Args:
        x_bits: packed input, logical shape [N, Ci, H, W].
        w_bits: packed filters, logical shape [Co, Ci, kh, kw].
        alpha: [Co] per-output-channel scale applied after the integer
            accumulation.
        geom: tensor_ops.ConvGeometry; padding contributes -1 (bit 0).

    Returns:
        [N, Co, H', W'] float64, equal to alpha[co] times the exact integer
        XNOR accumulation.
    """
    n, ci, h, w = x_bits.shape
    co, ci2, kh, kw = w_bits.shape
    if ci != ci2:
        raise ValueError(f"input channels {ci} != weight input channels {ci2}")
    if (kh, kw) != geom.kernel:
        raise ValueError(f"weight kernel {(kh, kw)} != geometry kernel {geom.kernel}")
    if alpha.shape != (co,):
        raise ValueError(f"alpha shape {alpha.shape} != ({co},)")
    s, p = geom.stride, geom.padding
    oh, ow = geom.out_extent(h, w)

    x = unpack(x_bits)
    xp = np.full((n, ci, h + 2 * p, w + 2 * p), -1.0)
    xp[:, :, p:p + h, p:p + w] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::s, ::s, :, :]
    # (kh, kw, ci) reduction order, same blocking as the real conv path
    cols = win.transpose(0, 2, 3, 4, 5, 1).reshape(n * oh * ow, kh * kw * ci)
    patch_words = _pack_bit_rows((cols >= 0).astype(np.uint8))

    wf = unpack(w_bits).transpose(0, 2, 3, 1).reshape(co, kh * kw * ci)
    filt_words = _pack_bit_rows((wf >= 0).astype(np.uint8))

    k = kh * kw * ci
    mask = _payload_mask(k, patch_words.shape[1])
    dots = np.empty((patch_words.shape[0], co), dtype=np.int64)
    chunk = max(1, (1 << 22) // max(1, co * patch_words.shape[1]))
    for lo in range(0, patch_words.shape[0], chunk):
        pw = patch_words[lo:lo + chunk]
        xnor = ~(pw[:, None, :] ^ filt_words[None, :, :]) & mask
        pop = np.bitwise_count(xnor).sum(axis=2, dtype=np.int64)
        dots[lo:lo + chunk] = 2 * pop - k
    y = dots.astype(np.float64) * np.asarray(alpha, dtype=np.float64)[None, :]
    return y.reshape(n, oh, ow, co).transpose(0, 3, 1, 2)


def rsign_forward(x: np.ndarray, shift: np.ndarray) -> tuple[np.ndarray, dict]:
    """Per-channel shifted sign: y = sign(x - shift[c]), sign(0) = +1.

    Returns (y, cache); y is {-1,+1} float64 of x's shape.
    """
    x = np.asarray(x, dtype=np.float64)
    c = x.shape[1]
    if shift.shape != (c,):
        raise ValueError(f"shift shape {shift.shape} != ({c},)")
    u = x - shift[None, :, None, None]
    y = np.where(u >= 0, 1.0, -1.0)
    return y, {"u": u}


def _approxsign_dydu(u: np.ndarray) -> np.ndarray:
    d = np.zeros_like(u)
    neg = (u >= -1.0) & (u < 0.0)
    pos = (u >= 0.0) & (u < 1.0)
    d[neg] = 2.0 + 2.0 * u[neg]
    d[pos] = 2.0 - 2.0 * u[pos]
    return d


def rsign_backward(grad_y: np.ndarray, cache: dict) -> tuple[np.ndarray, np.ndarray]:
    """Surrogate gradients of rsign: (grad_x, grad_shift).

    grad_x routes through the approxsign derivative; grad_shift[c] is the
    negated channel sum of grad_x (chain through u = x - shift).
    """
    u = cache["u"]
    grad_x = np.asarray(grad_y, dtype=np.float64) * _approxsign_dydu(u)
    grad_shift = -grad_x.sum(axis=(0, 2, 3))
    return grad_x, grad_shift


def rprelu_forward(
    x: np.ndarray, beta: np.ndarray, gamma: np.ndarray, zeta: np.ndarray
) -> tuple[np.ndarray, dict]:
    """Shifted PReLU: y = f(x - gamma[c]) + zeta[c], f(u) = u if u >= 0 else beta[c]*u.

    The kink at u = 0 takes the positive branch. Returns (y, cache).
    """
    x = np.asarray(x, dtype=np.float64)
    c = x.shape[1]
    for name, arr in (("beta", beta), ("gamma", gamma), ("zeta", zeta)):
        if arr.shape != (c,):
            raise ValueError(f"{name} shape {arr.shape} != ({c},)")
    u = x - gamma[None, :, None, None]
    pos = u >= 0
    y = np.where(pos, u, beta[None, :, None, None] * u) + zeta[None, :, None, None]
    return y, {"u": u, "pos": pos, "beta": beta}


def rprelu_backward(
    grad_y: np.ndarray, cache: dict
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of rprelu: (grad_x, grad_beta, grad_gamma, grad_zeta)."""
    u, pos, beta = cache["u"], cache["pos"], cache["beta"]
    g = np.asarray(grad_y, dtype=np.float64)
    slope = np.where(pos, 1.0, beta[None, :, None, None])
    grad_x = g * slope
    grad_gamma = -grad_x.sum(axis=(0, 2, 3))
    grad_beta = (g * np.where(pos, 0.0, u)).sum(axis=(0, 2, 3))
    grad_zeta = g.sum(axis=(0, 2, 3))
    return grad_x, grad_beta, grad_gamma, grad_zeta
