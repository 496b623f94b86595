"""Pure-numpy implementations of the hot volumetric kernels.

``_ckernels.pyx`` provides the same functions compiled.  Convolutions with
stride 1 use the flat-shift layout: the output is written on the padded
``Hp x Wp`` grid (columns past ``Ho``/``Wo`` are scratch) so that every kernel
tap is a single matrix product against a contiguous window of the input.
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided

NAME = "python"


def tap_offsets(k, Hp, Wp):
    return [(kd * Hp + kh) * Wp + kw for kd in range(k) for kh in range(k) for kw in range(k)]


def flat_span(out_dims, Hp, Wp):
    """Number of flat positions from the first to the last valid output."""
    Do, Ho, Wo = out_dims
    return (Do - 1) * Hp * Wp + (Ho - 1) * Wp + Wo


def taps_first(w):
    """``[Cout,Cin,k,k,k]`` -> ``[k^3, Cout, Cin]``."""
    cout, cin, k = w.shape[:3]
    return np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1)).reshape(k ** 3, cout, cin)


def embed(g, Hp, Wp):
    """Place ``g[B,C,Do,Ho,Wo]`` on the padded H x W grid with zeros elsewhere."""
    B, C, Do, Ho, Wo = g.shape
    ext = np.zeros((B, C, Do, Hp, Wp), dtype=np.float64)
    ext[:, :, :, :Ho, :Wo] = g
    return ext.reshape(B, C, Do * Hp * Wp)


def im2col3d(xp, k, stride, out_dims):
    """Unfold ``[B,C,Dp,Hp,Wp]`` into ``[B, C*k^3, Do*Ho*Wo]`` (rows ordered c, kd, kh, kw)."""
    xp = np.ascontiguousarray(xp, dtype=np.float64)
    B, C = xp.shape[:2]
    Do, Ho, Wo = out_dims
    sb, sc, sd, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(B, C, k, k, k, Do, Ho, Wo),
        strides=(sb, sc, sd, sh, sw, sd * stride, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(B, C * k ** 3, Do * Ho * Wo)


def col2im3d(cols, padded_shape, k, stride, out_dims):
    """Adjoint of :func:`im2col3d`: scatter-add columns back onto the grid."""
    B, C = padded_shape[:2]
    Do, Ho, Wo = out_dims
    cols = cols.reshape(B, C, k, k, k, Do, Ho, Wo)
    out = np.zeros(padded_shape, dtype=np.float64)
    for kd in range(k):
        dsl = slice(kd, kd + stride * (Do - 1) + 1, stride)
        for kh in range(k):
            hsl = slice(kh, kh + stride * (Ho - 1) + 1, stride)
            for kw in range(k):
                wsl = slice(kw, kw + stride * (Wo - 1) + 1, stride)
                out[:, :, dsl, hsl, wsl] += cols[:, :, kd, kh, kw]
    return out


def conv3d_forward(xp, w, bias, stride, out_dims):
    xp = np.ascontiguousarray(xp, dtype=np.float64)
    B, Cin, Dp, Hp, Wp = xp.shape
    cout, k = w.shape[0], w.shape[2]
    Do, Ho, Wo = out_dims
    if stride != 1:
        cols = im2col3d(xp, k, stride, out_dims)
        out = np.matmul(w.reshape(cout, -1), cols)
        if bias is not None:
            out += bias[None, :, None]
        return out.reshape((B, cout) + tuple(out_dims))

    L = flat_span(out_dims, Hp, Wp)
    wt = taps_first(w)
    offsets = tap_offsets(k, Hp, Wp)
    xf = xp.reshape(B, Cin, Dp * Hp * Wp)
    ext = np.empty((B, cout, Do * Hp * Wp), dtype=np.float64)
    ext[...] = 0.0 if bias is None else bias[None, :, None]
    for b in range(B):
        acc = ext[b, :, :L]
        for t, off in enumerate(offsets):
            acc += wt[t] @ xf[b, :, off:off + L]
    return np.ascontiguousarray(ext.reshape(B, cout, Do, Hp, Wp)[:, :, :, :Ho, :Wo])


def conv3d_backward_input(g, w, padded_shape, stride):
    B, Cin, Dp, Hp, Wp = padded_shape
    cout, k = w.shape[0], w.shape[2]
    out_dims = g.shape[2:]
    if stride != 1:
        gcols = np.matmul(w.reshape(cout, -1).T, g.reshape(B, cout, -1))
        return col2im3d(gcols, padded_shape, k, stride, out_dims)

    L = flat_span(out_dims, Hp, Wp)
    wt = taps_first(w)
    ext = embed(g, Hp, Wp)
    gx = np.zeros((B, Cin, Dp * Hp * Wp), dtype=np.float64)
    for b in range(B):
        for t, off in enumerate(tap_offsets(k, Hp, Wp)):
            gx[b, :, off:off + L] += wt[t].T @ ext[b, :, :L]
    return gx.reshape(padded_shape)


def conv3d_backward_weight(g, xp, k, stride):
    xp = np.ascontiguousarray(xp, dtype=np.float64)
    B, Cin, Dp, Hp, Wp = xp.shape
    cout = g.shape[1]
    out_dims = g.shape[2:]
    if stride != 1:
        cols = im2col3d(xp, k, stride, out_dims)
        gw = np.matmul(g.reshape(B, cout, -1), cols.transpose(0, 2, 1)).sum(axis=0)
        return gw.reshape(cout, Cin, k, k, k)

    L = flat_span(out_dims, Hp, Wp)
    ext = embed(g, Hp, Wp)
    xf = xp.reshape(B, Cin, Dp * Hp * Wp)
    gwt = np.zeros((k ** 3, cout, Cin), dtype=np.float64)
    offsets = tap_offsets(k, Hp, Wp)
    for b in range(B):
        gb = ext[b, :, :L]
        for t, off in enumerate(offsets):
            gwt[t] += gb @ xf[b, :, off:off + L].T
    return np.ascontiguousarray(gwt.reshape(k, k, k, cout, Cin).transpose(3, 4, 0, 1, 2))


def maxpool2_forward(x):
    """2x max-pool over the three spatial axes.

    Returns the pooled values and, per output cell, the flat offset (0..7,
    scan order d, h, w) of the first maximal input.
    """
    B, C, D, H, W = x.shape
    blocks = x.reshape(B, C, D // 2, 2, H // 2, 2, W // 2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(B, C, D // 2, H // 2, W // 2, 8)
    arg = blocks.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(blocks, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2_backward(g, arg, in_shape):
    B, C, D, H, W = in_shape
    blocks = np.zeros((B, C, D // 2, H // 2, W // 2, 8), dtype=np.float64)
    np.put_along_axis(blocks, arg[..., None].astype(np.intp), g[..., None], axis=-1)
    blocks = blocks.reshape(B, C, D // 2, H // 2, W // 2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return np.ascontiguousarray(blocks).reshape(in_shape)
