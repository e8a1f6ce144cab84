"""Numpy fallback for the compiled kernels (same signatures, same results)."""

import numpy as np


def conv2d_valid(x, w, b, stride, groups):
    n, _, h, width = x.shape
    oc, cin, kh, kw = w.shape
    oh = (h - kh) // stride + 1
    ow = (width - kw) // stride + 1
    opg = oc // groups

    out = np.empty((n, groups, opg, oh, ow), dtype=x.dtype)
    out[...] = b.reshape(1, groups, opg, 1, 1)
    xg = x.reshape(n, groups, cin, h, width)
    wg = w.reshape(groups, opg, cin, kh, kw)
    # accumulation order ci -> ky -> kx matches the compiled kernel
    for ci in range(cin):
        for ky in range(kh):
            for kx in range(kw):
                patch = xg[:, :, ci, ky:ky + stride * (oh - 1) + 1:stride, kx:kx + stride * (ow - 1) + 1:stride]
                out += wg[None, :, :, ci, ky, kx, None, None] * patch[:, :, None]
    return out.reshape(n, oc, oh, ow)


def sparse_conv2d_valid(x, w, b, in_keep, out_keep, stride, groups):
    # no work skipping here: zero-fill, dense conv, re-mask
    x = np.where(in_keep.astype(bool), x, x.dtype.type(0))
    out = conv2d_valid(x, w, b, stride, groups)
    return np.where(out_keep.astype(bool), out, out.dtype.type(0))
