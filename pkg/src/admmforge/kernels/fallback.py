"""Pure numpy implementations of the convolution/pooling inner loops.

These mirror the compiled kernels in ``admmforge._ckernels`` exactly
(same layouts, same argmax tie-breaking) so either backend can be
swapped in at import time.
"""

import numpy as np

BACKEND = "python"


def conv_out_size(extent: int, kernel: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - kernel) // stride + 1


def im2col(x, kh, kw, sh, sw, ph, pw):
    """Unfold conv patches of ``x`` (B,C,H,W) into a (C*kh*kw, B*OH*OW) matrix."""
    b, c, h, w = x.shape
    oh = conv_out_size(h, kh, sh, ph)
    ow = conv_out_size(w, kw, sw, pw)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    sb, sc, sh_, sw_ = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, kh, kw, oh, ow),
        strides=(sb, sc, sh_, sw_, sh_ * sh, sw_ * sw),
        writeable=False,
    )
    return np.ascontiguousarray(windows.transpose(1, 2, 3, 0, 4, 5)).reshape(
        c * kh * kw, b * oh * ow
    )


def col2im(cols, x_shape, kh, kw, sh, sw, ph, pw):
    """Fold a (C*kh*kw, B*OH*OW) patch-gradient matrix back onto ``x_shape``."""
    b, c, h, w = x_shape
    oh = conv_out_size(h, kh, sh, ph)
    ow = conv_out_size(w, kw, sw, pw)
    blocks = cols.reshape(c, kh, kw, b, oh, ow).transpose(3, 0, 1, 2, 4, 5)
    dx = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += blocks[:, :, i, j]
    if ph or pw:
        dx = dx[:, :, ph : ph + h, pw : pw + w]
    return np.ascontiguousarray(dx)


def maxpool_forward(x, k, s):
    """Max over k*k windows at stride s. Returns (out, flat argmax into H*W).

    Ties route to the first (row-major) position inside the window.
    """
    b, c, h, w = x.shape
    oh = conv_out_size(h, k, s, 0)
    ow = conv_out_size(w, k, s, 0)
    sb, sc, sh_, sw_ = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, oh, ow, k, k),
        strides=(sb, sc, sh_ * s, sw_ * s, sh_, sw_),
        writeable=False,
    ).reshape(b, c, oh, ow, k * k)
    local = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, local[..., None], axis=-1)[..., 0]
    ohg, owg = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    rows = ohg * s + local // k
    colsw = owg * s + local % k
    idx = (rows * w + colsw).astype(np.int64)
    return np.ascontiguousarray(out), idx


def maxpool_backward(grad, idx, h, w):
    """Scatter pooled gradients back to the argmax positions."""
    b, c = grad.shape[:2]
    dx = np.zeros((b, c, h * w), dtype=grad.dtype)
    flat_idx = idx.reshape(b, c, -1)
    np.add.at(dx, (np.arange(b)[:, None, None], np.arange(c)[None, :, None], flat_idx),
              grad.reshape(b, c, -1))
    return dx.reshape(b, c, h, w)
