"""Pure-numpy reference kernels for valid 2-D convolution and 2x2 max-pool.

Convolutions are computed as a sum of shifted-slab contractions, one
einsum per kernel tap, which keeps everything inside BLAS-backed numpy
calls. The max-pool winner is the first maximal element of each block in
row-major (row, col) order; the compiled backend follows the same rule so
gradients agree between backends even on plateaus of equal pixels.
"""

import numpy as np


def conv2d_forward(x, k):
    """x: [B, Ci, H, W], k: [Co, Ci, kh, kw] -> [B, Co, H-kh+1, W-kw+1]."""
    B, Ci, H, W = x.shape
    Co, _, kh, kw = k.shape
    OH, OW = H - kh + 1, W - kw + 1
    y = np.zeros((B, Co, OH, OW))
    for u in range(kh):
        for v in range(kw):
            y += np.einsum(
                "oc,bcij->boij", k[:, :, u, v], x[:, :, u : u + OH, v : v + OW],
                optimize=True,
            )
    return y


def conv2d_backward(x, k, gy):
    """Gradients of conv2d_forward w.r.t. input and kernels."""
    B, Ci, H, W = x.shape
    Co, _, kh, kw = k.shape
    OH, OW = gy.shape[2], gy.shape[3]
    gx = np.zeros_like(x)
    gk = np.zeros_like(k)
    for u in range(kh):
        for v in range(kw):
            xs = x[:, :, u : u + OH, v : v + OW]
            gk[:, :, u, v] = np.einsum("boij,bcij->oc", gy, xs, optimize=True)
            gx[:, :, u : u + OH, v : v + OW] += np.einsum(
                "oc,boij->bcij", k[:, :, u, v], gy, optimize=True
            )
    return gx, gk


def maxpool2_forward(x):
    """x: [B, C, H, W] -> (y [B, C, H//2, W//2], winner index in 0..3).

    Odd trailing rows/columns are cropped. The index encodes the winning
    offset inside each 2x2 block as 2*du + dv.
    """
    B, C, H, W = x.shape
    OH, OW = H // 2, W // 2
    blocks = (
        x[:, :, : OH * 2, : OW * 2]
        .reshape(B, C, OH, 2, OW, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, OH, OW, 4)
    )
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return y, idx.astype(np.int64)


def maxpool2_backward(idx, gy, H, W):
    """Scatter gy back to the winning input positions of each block."""
    B, C, OH, OW = gy.shape
    gx = np.zeros((B, C, H, W))
    rows = np.arange(OH)[None, None, :, None] * 2 + idx // 2
    cols = np.arange(OW)[None, None, None, :] * 2 + idx % 2
    b = np.arange(B)[:, None, None, None]
    c = np.arange(C)[None, :, None, None]
    gx[b, c, rows, cols] = gy
    return gx
