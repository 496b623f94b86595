# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_pykernels``.

Same algorithms as the numpy fallback: for stride 1 each kernel tap is one
BLAS ``dgemm`` on the flat-shift layout, but the tap and batch loops run in C
instead of issuing one numpy call per tap.  Other strides use direct loops.
"""
import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

from ._pykernels import embed, flat_span

cnp.import_array()

NAME = "cython"


cdef inline void _gemm_acc(char* ta, char* tb, int m, int n, int k,
                           double* a, int lda, double* b, int ldb,
                           double* c, int ldc) noexcept nogil:
    # column-major C += op(A) op(B)
    cdef double one = 1.0
    dgemm(ta, tb, &m, &n, &k, &one, a, &lda, b, &ldb, &one, c, &ldc)


def _taps_first(w):
    cout, cin, k = w.shape[:3]
    return np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1), dtype=np.float64).reshape(k ** 3, cout, cin)


def conv3d_forward(xp_in, w_in, b_in, int stride, out_dims):
    """Convolution of a padded input ``[B,Cin,Dp,Hp,Wp]``; ``b_in`` may be None."""
    cdef double[:, :, :, :, ::1] x = np.ascontiguousarray(xp_in, dtype=np.float64)
    cdef Py_ssize_t B = x.shape[0], Cin = x.shape[1], Cout = w_in.shape[0], k = w_in.shape[2]
    cdef Py_ssize_t Dp = x.shape[2], Hp = x.shape[3], Wp = x.shape[4]
    cdef Py_ssize_t Do = out_dims[0], Ho = out_dims[1], Wo = out_dims[2]
    cdef double[::1] bias = np.zeros(Cout) if b_in is None else np.ascontiguousarray(b_in, dtype=np.float64)
    cdef Py_ssize_t b, co, ci, kd, kh, kw, od, oh, ow, t, off
    cdef int L, S, E
    cdef double wv
    cdef double* op
    cdef double* xq
    cdef double[:, :, ::1] wt
    cdef double[:, :, ::1] ext
    cdef double[:, :, :, :, ::1] w
    if stride == 1:
        wt = _taps_first(w_in)
        L = flat_span(out_dims, Hp, Wp)
        S = Dp * Hp * Wp
        E = Do * Hp * Wp
        ext_arr = np.empty((B, Cout, E), dtype=np.float64)
        ext = ext_arr
        with nogil:
            for b in range(B):
                for co in range(Cout):
                    op = &ext[b, co, 0]
                    for ow in range(E):
                        op[ow] = bias[co]
                t = 0
                for kd in range(k):
                    for kh in range(k):
                        for kw in range(k):
                            off = (kd * Hp + kh) * Wp + kw
                            # ext[b] (Cout x L) += wt[t] (Cout x Cin) @ x[b] window (Cin x L)
                            _gemm_acc(b"N", b"N", L, <int>Cout, <int>Cin,
                                      &x[b, 0, 0, 0, 0] + off, S, &wt[t, 0, 0], <int>Cin,
                                      &ext[b, 0, 0], E)
                            t += 1
        return np.ascontiguousarray(ext_arr.reshape(B, Cout, Do, Hp, Wp)[:, :, :, :Ho, :Wo])

    w = np.ascontiguousarray(w_in, dtype=np.float64)
    out_arr = np.empty((B, Cout, Do, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, :, ::1] out = out_arr
    with nogil:
        for b in range(B):
            for co in range(Cout):
                for od in range(Do):
                    for oh in range(Ho):
                        op = &out[b, co, od, oh, 0]
                        for ow in range(Wo):
                            op[ow] = bias[co]
                for ci in range(Cin):
                    for kd in range(k):
                        for kh in range(k):
                            for kw in range(k):
                                wv = w[co, ci, kd, kh, kw]
                                for od in range(Do):
                                    for oh in range(Ho):
                                        op = &out[b, co, od, oh, 0]
                                        xq = &x[b, ci, kd + od * stride, kh + oh * stride, kw]
                                        for ow in range(Wo):
                                            op[ow] += wv * xq[ow * stride]
    return out_arr


def conv3d_backward_input(g_in, w_in, padded_shape, int stride):
    """Gradient w.r.t. the padded input."""
    cdef Py_ssize_t B = g_in.shape[0], Cout = g_in.shape[1]
    cdef Py_ssize_t Do = g_in.shape[2], Ho = g_in.shape[3], Wo = g_in.shape[4]
    cdef Py_ssize_t Cin = w_in.shape[1], k = w_in.shape[2]
    cdef Py_ssize_t Dp = padded_shape[2], Hp = padded_shape[3], Wp = padded_shape[4]
    out_arr = np.zeros(tuple(padded_shape), dtype=np.float64)
    cdef double[:, :, :, :, ::1] gx = out_arr
    cdef Py_ssize_t b, co, ci, kd, kh, kw, od, oh, ow, t, off
    cdef int L, S, E
    cdef double wv
    cdef double* gq
    cdef double* gp
    cdef double[:, :, ::1] wt
    cdef double[:, :, ::1] ext
    cdef double[:, :, :, :, ::1] g
    cdef double[:, :, :, :, ::1] w
    if stride == 1:
        wt = _taps_first(w_in)
        L = flat_span(g_in.shape[2:], Hp, Wp)
        S = Dp * Hp * Wp
        E = Do * Hp * Wp
        ext = embed(np.asarray(g_in, dtype=np.float64), Hp, Wp)
        with nogil:
            for b in range(B):
                t = 0
                for kd in range(k):
                    for kh in range(k):
                        for kw in range(k):
                            off = (kd * Hp + kh) * Wp + kw
                            # gx[b] window (Cin x L) += wt[t].T (Cin x Cout) @ ext[b] (Cout x L)
                            _gemm_acc(b"N", b"T", L, <int>Cin, <int>Cout,
                                      &ext[b, 0, 0], E, &wt[t, 0, 0], <int>Cin,
                                      &gx[b, 0, 0, 0, 0] + off, S)
                            t += 1
        return out_arr

    g = np.ascontiguousarray(g_in, dtype=np.float64)
    w = np.ascontiguousarray(w_in, dtype=np.float64)
    with nogil:
        for b in range(B):
            for ci in range(Cin):
                for co in range(Cout):
                    for kd in range(k):
                        for kh in range(k):
                            for kw in range(k):
                                wv = w[co, ci, kd, kh, kw]
                                for od in range(Do):
                                    for oh in range(Ho):
                                        gp = &g[b, co, od, oh, 0]
                                        gq = &gx[b, ci, kd + od * stride, kh + oh * stride, kw]
                                        for ow in range(Wo):
                                            gq[ow * stride] += wv * gp[ow]
    return out_arr


def conv3d_backward_weight(g_in, xp_in, int k, int stride):
    """Gradient w.r.t. the weights, accumulated over the batch in order."""
    cdef double[:, :, :, :, ::1] x = np.ascontiguousarray(xp_in, dtype=np.float64)
    cdef Py_ssize_t B = g_in.shape[0], Cout = g_in.shape[1]
    cdef Py_ssize_t Do = g_in.shape[2], Ho = g_in.shape[3], Wo = g_in.shape[4]
    cdef Py_ssize_t Cin = x.shape[1], Dp = x.shape[2], Hp = x.shape[3], Wp = x.shape[4]
    cdef Py_ssize_t b, co, ci, kd, kh, kw, od, oh, ow, t, off
    cdef int L, S, E
    cdef double acc
    cdef double* gp
    cdef double* xq
    cdef double[:, :, ::1] ext
    cdef double[:, :, ::1] gwt
    cdef double[:, :, :, :, ::1] g
    cdef double[:, :, :, :, ::1] gw
    if stride == 1:
        L = flat_span(g_in.shape[2:], Hp, Wp)
        S = Dp * Hp * Wp
        E = Do * Hp * Wp
        ext = embed(np.asarray(g_in, dtype=np.float64), Hp, Wp)
        gwt_arr = np.zeros((k ** 3, Cout, Cin), dtype=np.float64)
        gwt = gwt_arr
        with nogil:
            for b in range(B):
                t = 0
                for kd in range(k):
                    for kh in range(k):
                        for kw in range(k):
                            off = (kd * Hp + kh) * Wp + kw
                            # gwt[t] (Cout x Cin) += ext[b] (Cout x L) @ x[b] window.T (L x Cin)
                            _gemm_acc(b"T", b"N", <int>Cin, <int>Cout, L,
                                      &x[b, 0, 0, 0, 0] + off, S, &ext[b, 0, 0], E,
                                      &gwt[t, 0, 0], <int>Cin)
                            t += 1
        return np.ascontiguousarray(gwt_arr.reshape(k, k, k, Cout, Cin).transpose(3, 4, 0, 1, 2))

    g = np.ascontiguousarray(g_in, dtype=np.float64)
    gw_arr = np.zeros((Cout, Cin, k, k, k), dtype=np.float64)
    gw = gw_arr
    with nogil:
        for co in range(Cout):
            for ci in range(Cin):
                for kd in range(k):
                    for kh in range(k):
                        for kw in range(k):
                            acc = 0.0
                            for b in range(B):
                                for od in range(Do):
                                    for oh in range(Ho):
                                        gp = &g[b, co, od, oh, 0]
                                        xq = &x[b, ci, kd + od * stride, kh + oh * stride, kw]
                                        for ow in range(Wo):
                                            acc += gp[ow] * xq[ow * stride]
                            gw[co, ci, kd, kh, kw] = acc
    return gw_arr


def maxpool2_forward(x_in):
    cdef double[:, :, :, :, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t D = x.shape[2] // 2, H = x.shape[3] // 2, W = x.shape[4] // 2
    out_arr = np.empty((B, C, D, H, W), dtype=np.float64)
    arg_arr = np.empty((B, C, D, H, W), dtype=np.int8)
    cdef double[:, :, :, :, ::1] out = out_arr
    cdef cnp.int8_t[:, :, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, c, d, h, w, dz, dy, dx
    cdef double best, v
    cdef cnp.int8_t best_i, i
    with nogil:
        for b in range(B):
            for c in range(C):
                for d in range(D):
                    for h in range(H):
                        for w in range(W):
                            best = x[b, c, 2 * d, 2 * h, 2 * w]
                            best_i = 0
                            i = 0
                            for dz in range(2):
                                for dy in range(2):
                                    for dx in range(2):
                                        v = x[b, c, 2 * d + dz, 2 * h + dy, 2 * w + dx]
                                        if v > best:
                                            best = v
                                            best_i = i
                                        i += 1
                            out[b, c, d, h, w] = best
                            arg[b, c, d, h, w] = best_i
    return out_arr, arg_arr


def maxpool2_backward(g_in, arg_in, in_shape):
    cdef double[:, :, :, :, ::1] g = np.ascontiguousarray(g_in, dtype=np.float64)
    cdef cnp.int8_t[:, :, :, :, ::1] arg = np.ascontiguousarray(arg_in, dtype=np.int8)
    out_arr = np.zeros(tuple(in_shape), dtype=np.float64)
    cdef double[:, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t B = g.shape[0], C = g.shape[1], D = g.shape[2], H = g.shape[3], W = g.shape[4]
    cdef Py_ssize_t b, c, d, h, w
    cdef int a
    with nogil:
        for b in range(B):
            for c in range(C):
                for d in range(D):
                    for h in range(H):
                        for w in range(W):
                            a = arg[b, c, d, h, w]
                            out[b, c, 2 * d + (a >> 2), 2 * h + ((a >> 1) & 1), 2 * w + (a & 1)] = g[b, c, d, h, w]
    return out_arr
