"""Volumetric network kernels: convolution, pooling, upsampling, softmax."""
import numpy as np

from . import backend
from .autograd import as_tensor, make_op, softmax


def conv_output_extent(n, k, stride, padding):
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise ValueError(
            f"conv3d: extent {n} with kernel {k}, stride {stride}, padding {padding} "
            "does not give an integral output size"
        )
    return span // stride + 1


def conv3d(x, weight, bias=None, stride=1, padding=0):
    """3D cross-correlation of ``x[B,Cin,D,H,W]`` with ``weight[Cout,Cin,k,k,k]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError(f"conv3d: expected 5-D input and weight, got {x.shape} and {weight.shape}")
    cout, cin, k = weight.shape[:3]
    if weight.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ValueError(f"conv3d: kernel must be an odd cube, got {weight.shape[2:]}")
    if x.shape[1] != cin:
        raise ValueError(f"conv3d: input has {x.shape[1]} channels, weight expects {cin}")
    if padding < 0 or stride < 1:
        raise ValueError("conv3d: padding must be >= 0 and stride >= 1")
    B = x.shape[0]
    out_dims = tuple(conv_output_extent(n, k, stride, padding) for n in x.shape[2:])

    xp = x.data
    if padding:
        p = padding
        B_, C_, D_, H_, W_ = xp.shape
        buf = np.zeros((B_, C_, D_ + 2 * p, H_ + 2 * p, W_ + 2 * p))
        buf[:, :, p:-p, p:-p, p:-p] = xp
        xp = buf
    kern = backend.kernels
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv3d: bias shape {bias.shape} does not match {cout} output channels")
    out_data = kern.conv3d_forward(xp, weight.data, None if bias is None else bias.data, stride, out_dims)
    parents = (x, weight) if bias is None else (x, weight, bias)
    padded_shape = xp.shape

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = kern.conv3d_backward_weight(g, xp, k, stride)
        if x.requires_grad:
            gx = kern.conv3d_backward_input(g, weight.data, padded_shape, stride)
            if padding:
                p = padding
                gx = gx[:, :, p:-p, p:-p, p:-p]
        if bias is not None and bias.requires_grad:
            gb = g.reshape(B, cout, -1).sum(axis=2).sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_op(out_data, parents, backward, "conv3d")


def max_pool3d(x):
    """2x max-pool over D, H, W; ties go to the first voxel in scan order."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise ValueError(f"max_pool3d: expected 5-D input, got {x.shape}")
    if any(n % 2 for n in x.shape[2:]):
        raise ValueError(f"max_pool3d: spatial extents {x.shape[2:]} must all be even")
    kern = backend.kernels
    out_data, arg = kern.maxpool2_forward(x.data)
    in_shape = x.shape

    def backward(g):
        return (kern.maxpool2_backward(np.ascontiguousarray(g), arg, in_shape),)

    return make_op(out_data, (x,), backward, "max_pool3d")


def upsample3d(x, factor=2):
    """Nearest-neighbour upsampling of the three spatial axes."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise ValueError(f"upsample3d: expected 5-D input, got {x.shape}")
    f = int(factor)
    B, C, D, H, W = x.shape
    out_data = np.broadcast_to(
        x.data[:, :, :, None, :, None, :, None], (B, C, D, f, H, f, W, f)
    ).reshape(B, C, D * f, H * f, W * f)

    def backward(g):
        return (g.reshape(B, C, D, f, H, f, W, f).sum(axis=(3, 5, 7)),)

    return make_op(np.ascontiguousarray(out_data), (x,), backward, "upsample3d")


def softmax_channel(logits):
    """Per-voxel softmax over the channel axis of ``[B,K,D,H,W]`` logits."""
    logits = as_tensor(logits)
    if logits.ndim < 2 or logits.shape[1] < 2:
        raise ValueError(f"softmax_channel: need at least 2 channels, got shape {logits.shape}")
    return softmax(logits, axis=1)


def instance_norm(x, gamma=None, beta=None, eps=1e-5):
    """Normalise each (sample, channel) over its spatial extent, then scale and shift."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise ValueError(f"instance_norm: expected 5-D input, got {x.shape}")
    B, C = x.shape[:2]
    n = x.data[0, 0].size
    flat = x.data.reshape(B, C, n)
    mean = flat.mean(axis=2, keepdims=True)
    centred = flat - mean
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=2, keepdims=True) + eps)
    xhat = centred * inv_std
    parents = [x]
    out = xhat
    if gamma is not None:
        gamma, beta = as_tensor(gamma), as_tensor(beta)
        if gamma.shape != (C,) or beta.shape != (C,):
            raise ValueError(f"instance_norm: affine parameters must have shape ({C},)")
        out = xhat * gamma.data[None, :, None] + beta.data[None, :, None]
        parents += [gamma, beta]

    def backward(g):
        g = g.reshape(B, C, n)
        gg = gamma.data[None, :, None] * g if gamma is not None else g
        gx = None
        if x.requires_grad:
            gx = inv_std * (gg - gg.mean(axis=2, keepdims=True)
                            - xhat * (gg * xhat).mean(axis=2, keepdims=True))
            gx = gx.reshape(x.shape)
        if gamma is None:
            return (gx,)
        ggamma = (g * xhat).sum(axis=2).sum(axis=0) if gamma.requires_grad else None
        gbeta = g.sum(axis=2).sum(axis=0) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return make_op(out.reshape(x.shape), tuple(parents), backward, "instance_norm")
