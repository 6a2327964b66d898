"""Valid-padding 2-D convolution via im2col.

Forward lowers each input window into a row of a patch matrix so the
convolution becomes one matmul; backward scatters the column gradients
back with col2im. Works on plain arrays and on autodiff Tensors.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, make_node, value_of
from .errors import ShapeError


def conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int) -> tuple[int, int]:
    """Output spatial size for valid padding and the given stride."""
    if h < kh or w < kw:
        raise ShapeError(f"kernel ({kh},{kw}) larger than input ({h},{w})")
    return (h - kh) // stride + 1, (w - kw) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Lower [B,C,H,W] into patches [B*Ho*Wo, C*kh*kw].

    Row order is batch-major, then output row, then output column; each
    row holds one receptive field flattened channel-first.
    """
    b, c, h, w = x.shape
    ho, wo = conv_output_hw(h, w, kh, kw, stride)
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [B,C,Ho,Wo,kh,kw]
    return (
        windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw).copy()
    )


def col2im(
    gcols: np.ndarray, x_shape: tuple[int, ...], kh: int, kw: int, stride: int
) -> np.ndarray:
    """Scatter-add patch gradients [B*Ho*Wo, C*kh*kw] back to input shape."""
    b, c, h, w = x_shape
    ho, wo = conv_output_hw(h, w, kh, kw, stride)
    g6 = gcols.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    gx = np.zeros(x_shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g6[
                :, :, i, j
            ]
    return gx


def conv2d(x, weights, bias, stride: int = 1):
    """Convolve x [B,C,H,W] with weights [O,C,kh,kw] plus bias [O].

    Returns [B,O,Ho,Wo]. Any of the three operands may be a Tensor; the
    result is a Tensor when at least one is.
    """
    xd = value_of(x).astype(np.float64, copy=False)
    wd = value_of(weights)
    bd = value_of(bias)
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError("conv2d expects x [B,C,H,W] and weights [O,C,kh,kw]")
    if xd.shape[1] != wd.shape[1]:
        raise ShapeError(
            f"input channels {xd.shape[1]} do not match kernel channels {wd.shape[1]}"
        )
    b, c, h, w = xd.shape
    o, _, kh, kw = wd.shape
    ho, wo = conv_output_hw(h, w, kh, kw, stride)

    cols = im2col(xd, kh, kw, stride)          # [B*Ho*Wo, C*kh*kw]
    wmat = wd.reshape(o, -1)                   # [O, C*kh*kw]
    out2 = cols @ wmat.T + bd                  # [B*Ho*Wo, O]
    out = out2.reshape(b, ho, wo, o).transpose(0, 3, 1, 2)

    parents = []
    roles = []
    for role, v in (("x", x), ("w", weights), ("b", bias)):
        if isinstance(v, Tensor):
            parents.append(v)
            roles.append(role)
    if not parents:
        return out

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        grads = []
        for role in roles:
            if role == "x":
                grads.append(col2im(g2 @ wmat, xd.shape, kh, kw, stride))
            elif role == "w":
                grads.append((g2.T @ cols).reshape(wd.shape))
            else:
                grads.append(g2.sum(axis=0))
        return tuple(grads)

    return make_node(out, tuple(parents), vjp)
