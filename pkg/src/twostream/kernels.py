"""Low-level numeric kernels shared by the differentiation graph and the
analysis modules.

All image-like arrays are channels-last float32: frames are (H, W, C),
single-channel maps are (H, W). Convolutions are cross-correlations
(no kernel flip), stride 1, size-preserving for odd kernels. Reductions
accumulate in float64 so losses keep precision past float32 forwards.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

F32 = np.float32


class KernelError(ValueError):
    """Raised for invalid shapes or parameters in a numeric kernel."""


# ---------------------------------------------------------------------------
# Convolution (im2col + BLAS matmul)
# ---------------------------------------------------------------------------

def prepare_conv_weights(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Precompute forward and input-gradient matmul operands.

    `w` is laid out [out, in, kh, kw] (the archive convention). Returns
    (w_fwd, w_bwd) where w_fwd is (in*kh*kw, out) matching the im2col
    column order (c, u, v) and w_bwd is (out*kh*kw, in) for the
    full-correlation gradient pass (kernel spatially flipped).
    """
    if w.ndim != 4:
        raise KernelError(f"conv weights must be 4-d [out,in,kh,kw], got {w.shape}")
    out_c, in_c, kh, kw = w.shape
    w = np.ascontiguousarray(w, dtype=F32)
    w_fwd = w.transpose(1, 2, 3, 0).reshape(in_c * kh * kw, out_c).copy()
    w_bwd = w[:, :, ::-1, ::-1].transpose(0, 2, 3, 1).reshape(out_c * kh * kw, in_c).copy()
    return w_fwd, w_bwd


def _pad2d(x: np.ndarray, ph: int, pw: int, mode: str) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    spec = ((ph, ph), (pw, pw)) + ((0, 0),) * (x.ndim - 2)
    if mode == "zero":
        return np.pad(x, spec, mode="constant")
    if mode == "reflect":
        return np.pad(x, spec, mode="reflect")
    raise KernelError(f"unknown padding mode {mode!r}")


def _unpad2d_accumulate(xp: np.ndarray, ph: int, pw: int, mode: str) -> np.ndarray:
    """Adjoint of _pad2d: fold padded-border gradients back into the interior."""
    if ph == 0 and pw == 0:
        return xp
    if mode == "zero":
        return np.ascontiguousarray(xp[ph:xp.shape[0] - ph, pw:xp.shape[1] - pw])
    # reflect: padded index -k mirrors interior index +k (no edge duplication).
    # Fold rows first across the full padded width, then columns, so corner
    # pads (reflected in both axes) are routed correctly.
    h = xp.shape[0] - 2 * ph
    w = xp.shape[1] - 2 * pw
    rows = xp[ph:ph + h].copy()
    for k in range(1, ph + 1):
        rows[k] += xp[ph - k]
        rows[h - 1 - k] += xp[ph + h - 1 + k]
    core = rows[:, pw:pw + w].copy()
    for k in range(1, pw + 1):
        core[:, k] += rows[:, pw - k]
        core[:, w - 1 - k] += rows[:, pw + w - 1 + k]
    return core


def _im2col_matmul(xp: np.ndarray, kh: int, kw: int, w_mat: np.ndarray) -> np.ndarray:
    """Correlate padded (Hp, Wp, C) input with a (C*kh*kw, out) weight matrix."""
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))  # (Ho, Wo, C, kh, kw)
    ho, wo = win.shape[0], win.shape[1]
    cols = win.reshape(ho * wo, -1)
    return (cols @ w_mat).reshape(ho, wo, w_mat.shape[1])


def conv2d_forward(x: np.ndarray, w_fwd: np.ndarray, bias: np.ndarray | None,
                   kh: int, kw: int, pad_mode: str) -> np.ndarray:
    ph, pw = kh // 2, kw // 2
    xp = _pad2d(x, ph, pw, pad_mode)
    y = _im2col_matmul(xp, kh, kw, w_fwd)
    if bias is not None:
        y += bias
    return y


def conv2d_backward_input(dy: np.ndarray, w_bwd: np.ndarray,
                          kh: int, kw: int, pad_mode: str) -> np.ndarray:
    ph, pw = kh // 2, kw // 2
    dyp = _pad2d(dy, kh - 1, kw - 1, "zero")
    dxp = _im2col_matmul(dyp, kh, kw, w_bwd)
    return _unpad2d_accumulate(dxp, ph, pw, pad_mode)


# ---------------------------------------------------------------------------
# Pooling (2x2, stride 2, floor on odd sizes)
# ---------------------------------------------------------------------------

def _pool_blocks(x: np.ndarray) -> np.ndarray:
    """View (H, W, C) as (H2, W2, 4, C) with the window flattened in
    row-major scan order (0,0), (0,1), (1,0), (1,1)."""
    h2, w2 = x.shape[0] // 2, x.shape[1] // 2
    xe = x[:h2 * 2, :w2 * 2]
    return xe.reshape(h2, 2, w2, 2, -1).transpose(0, 2, 1, 3, 4).reshape(h2, w2, 4, x.shape[2])


def maxpool2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    blocks = _pool_blocks(x)
    idx = blocks.argmax(axis=2)  # first maximum wins on ties
    y = np.take_along_axis(blocks, idx[:, :, None, :], axis=2)[:, :, 0, :]
    return y, idx


def maxpool2_backward(dy: np.ndarray, idx: np.ndarray, in_shape: tuple) -> np.ndarray:
    h2, w2, c = dy.shape
    blocks = np.zeros((h2, w2, 4, c), dtype=dy.dtype)
    np.put_along_axis(blocks, idx[:, :, None, :], dy[:, :, None, :], axis=2)
    dx = np.zeros(in_shape, dtype=dy.dtype)
    dx[:h2 * 2, :w2 * 2] = (
        blocks.reshape(h2, w2, 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h2 * 2, w2 * 2, c)
    )
    return dx


def avgpool2_forward(x: np.ndarray) -> np.ndarray:
    return _pool_blocks(x).mean(axis=2, dtype=x.dtype)


def avgpool2_backward(dy: np.ndarray, in_shape: tuple) -> np.ndarray:
    h2, w2, c = dy.shape
    dx = np.zeros(in_shape, dtype=dy.dtype)
    quarter = (dy * dy.dtype.type(0.25))[:, None, :, None, :]
    dx[:h2 * 2, :w2 * 2] = np.broadcast_to(
        quarter, (h2, 2, w2, 2, c)).reshape(h2 * 2, w2 * 2, c)
    return dx


# ---------------------------------------------------------------------------
# Bilinear resize (half-pixel centers, align-corners false)
# ---------------------------------------------------------------------------

def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation matrix M (n_out, n_in): out = M @ in along one axis.

    Uses half-pixel source coordinates clamped to the valid range; the
    identity when n_in == n_out. The adjoint (transpose) is the exact
    gradient of the interpolation.
    """
    if n_in < 1 or n_out < 1:
        raise KernelError("resize sizes must be positive")
    m = np.zeros((n_out, n_in), dtype=F32)
    scale = n_in / n_out
    for i in range(n_out):
        s = (i + 0.5) * scale - 0.5
        s = min(max(s, 0.0), n_in - 1.0)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, n_in - 1)
        f = s - i0
        m[i, i0] += 1.0 - f
        m[i, i1] += f
    return m


def apply_resize(x: np.ndarray, m_rows: np.ndarray, m_cols: np.ndarray) -> np.ndarray:
    """Resize (H, W) or (H, W, C) with row/col interpolation matrices."""
    squeeze = x.ndim == 2
    if squeeze:
        x = x[:, :, None]
    mr = m_rows.astype(x.dtype, copy=False)
    mc = m_cols.astype(x.dtype, copy=False)
    y = np.tensordot(mr, x, (1, 0))              # (Ho, W, C)
    y = np.tensordot(mc, y, (1, 1)).transpose(1, 0, 2)  # (Ho, Wo, C)
    y = np.ascontiguousarray(y)
    return y[:, :, 0] if squeeze else y


def resize_bilinear(x: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    h, w = x.shape[0], x.shape[1]
    ho, wo = out_hw
    if (h, w) == (ho, wo):
        return np.ascontiguousarray(x, dtype=F32)
    return apply_resize(x, resize_matrix(h, ho), resize_matrix(w, wo))


# ---------------------------------------------------------------------------
# Separable correlation helpers (SSIM windows, flow pyramids)
# ---------------------------------------------------------------------------

def gaussian_kernel1d(sigma: float, radius: int | None = None) -> np.ndarray:
    if sigma <= 0:
        raise KernelError("sigma must be positive")
    if radius is None:
        radius = int(np.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return (k / k.sum()).astype(np.float64)


def correlate1d(x: np.ndarray, k: np.ndarray, axis: int, mode: str = "reflect") -> np.ndarray:
    """Correlate along one axis. mode 'reflect' preserves size, 'valid' shrinks."""
    k = np.asarray(k, dtype=np.float64)
    n = k.shape[0]
    if mode == "reflect":
        r = n // 2
        spec = [(0, 0)] * x.ndim
        spec[axis] = (r, n - 1 - r)
        x = np.pad(x, spec, mode="reflect")
    elif mode != "valid":
        raise KernelError(f"unknown correlate mode {mode!r}")
    win = sliding_window_view(x, n, axis=axis)
    return win @ k


def correlate_separable(x: np.ndarray, k_rows: np.ndarray, k_cols: np.ndarray,
                        mode: str = "reflect") -> np.ndarray:
    return correlate1d(correlate1d(x, k_rows, axis=0, mode=mode), k_cols, axis=1, mode=mode)
