# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled direct-convolution kernels.

Both kernels take an already zero-padded input and accumulate each output
element as ``bias + sum_{ci, ky, kx} w * x`` in exactly that order, which is
the order the numpy fallback uses, so the two backends agree bit for bit.
Loops run term-major over a whole output row so the innermost loop is a
contiguous axpy the compiler can vectorise.
"""

import numpy as np

from cython cimport floating


def conv2d_valid(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                 floating[::1] b, int stride, int groups):
    cdef Py_ssize_t N = x.shape[0], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OC = w.shape[0], CIN = w.shape[1], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t OH = (H - KH) // stride + 1, OW = (W - KW) // stride + 1
    cdef Py_ssize_t opg = OC // groups
    cdef Py_ssize_t n, oc, oy, ox, ci, ky, kx, c0
    cdef floating wv
    cdef floating* orow
    cdef floating* xrow

    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((N, OC, OH, OW), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    if N == 0 or OC == 0 or OH <= 0 or OW <= 0:
        return out_arr

    with nogil:
        for n in range(N):
            for oc in range(OC):
                c0 = (oc // opg) * CIN
                for oy in range(OH):
                    orow = &out[n, oc, oy, 0]
                    for ox in range(OW):
                        orow[ox] = b[oc]
                    for ci in range(CIN):
                        for ky in range(KH):
                            for kx in range(KW):
                                wv = w[oc, ci, ky, kx]
                                xrow = &x[n, c0 + ci, oy * stride + ky, kx]
                                if stride == 1:
                                    for ox in range(OW):
                                        orow[ox] = orow[ox] + wv * xrow[ox]
                                else:
                                    for ox in range(OW):
                                        orow[ox] = orow[ox] + wv * xrow[ox * stride]
    return out_arr


def sparse_conv2d_valid(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                        floating[::1] b, unsigned char[:, ::1] in_keep,
                        unsigned char[:, ::1] out_keep, int stride, int groups):
    """Computes only runs of kept outputs; masked inputs are zero-filled first."""
    cdef Py_ssize_t N = x.shape[0], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OC = w.shape[0], CIN = w.shape[1], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t OH = (H - KH) // stride + 1, OW = (W - KW) // stride + 1
    cdef Py_ssize_t opg = OC // groups
    cdef Py_ssize_t n, oc, oy, ox, ci, ky, kx, c0, r, nruns, lo, hi
    cdef floating wv
    cdef floating* orow
    cdef floating* xrow

    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((N, OC, OH, OW), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    if N == 0 or OC == 0 or OH <= 0 or OW <= 0:
        return out_arr
    xz_arr = np.where(np.asarray(in_keep, dtype=bool), np.asarray(x), dtype(0))
    cdef floating[:, :, :, ::1] xz = np.ascontiguousarray(xz_arr, dtype=dtype)
    # per output row: [start, end) pairs of kept runs
    runs_arr = np.zeros((OH, OW + 1), dtype=np.intp)
    cdef Py_ssize_t[:, ::1] runs = runs_arr
    cdef Py_ssize_t[::1] counts = np.zeros(OH, dtype=np.intp)

    with nogil:
        for oy in range(OH):
            nruns = 0
            ox = 0
            while ox < OW:
                if out_keep[oy, ox]:
                    runs[oy, 2 * nruns] = ox
                    while ox < OW and out_keep[oy, ox]:
                        ox = ox + 1
                    runs[oy, 2 * nruns + 1] = ox
                    nruns = nruns + 1
                else:
                    ox = ox + 1
            counts[oy] = nruns

        for n in range(N):
            for oc in range(OC):
                c0 = (oc // opg) * CIN
                for oy in range(OH):
                    nruns = counts[oy]
                    if nruns == 0:
                        continue
                    orow = &out[n, oc, oy, 0]
                    for r in range(nruns):
                        for ox in range(runs[oy, 2 * r], runs[oy, 2 * r + 1]):
                            orow[ox] = b[oc]
                    for ci in range(CIN):
                        for ky in range(KH):
                            for kx in range(KW):
                                wv = w[oc, ci, ky, kx]
                                xrow = &xz[n, c0 + ci, oy * stride + ky, kx]
                                for r in range(nruns):
                                    lo = runs[oy, 2 * r]
                                    hi = runs[oy, 2 * r + 1]
                                    if stride == 1:
                                        for ox in range(lo, hi):
                                            orow[ox] = orow[ox] + wv * xrow[ox]
                                    else:
                                        for ox in range(lo, hi):
                                            orow[ox] = orow[ox] + wv * xrow[ox * stride]
    return out_arr
