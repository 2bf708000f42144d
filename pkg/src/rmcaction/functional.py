"""Differentiable network operations over :class:`~rmcaction.tensor.Tensor`.

Convolutions lower patches to a column matrix and run one BLAS matmul;
1x1 kernels skip the patch extraction entirely. Backward passes reuse
the padded input saved at forward time and scatter gradients back with
a short loop over kernel offsets, so every op stays deterministic.
"""

from __future__ import annotations

from typing import Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _result

IntOrPair = Union[int, Tuple[int, int]]
IntOrTriple = Union[int, Tuple[int, int, int]]


def _pair(v: IntOrPair) -> Tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


def _triple(v: IntOrTriple) -> Tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    a, b, c = v
    return (int(a), int(b), int(c))


def _out_extent(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def _check_conv_geometry(op: str, sizes, kernel, stride, padding) -> None:
    for name, size, k, s, p in zip("tlhw"[-len(sizes):], sizes, kernel, stride, padding):
        if s <= 0:
            raise ValueError(f"{op}: stride must be positive, got {stride}")
        if p < 0:
            raise ValueError(f"{op}: padding must be non-negative, got {padding}")
        if size + 2 * p < k:
            raise ValueError(
                f"{op}: kernel {kernel} does not fit padded input "
                f"(axis {name}: {size} + 2*{p} < {k})"
            )


# ----------------------------------------------------------------------
# 2D convolution


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: IntOrPair = 1,
    padding: IntOrPair = 0,
) -> Tensor:
    """Cross-correlate ``x`` [N,C,H,W] with ``weight`` [F,C,kh,kw]."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"conv2d: input channels {c} != weight channels {cw} "
                         f"(input {x.shape}, weight {weight.shape})")
    _check_conv_geometry("conv2d", (h, w), (kh, kw), (sh, sw), (ph, pw))
    ho = _out_extent(h, kh, sh, ph)
    wo = _out_extent(w, kw, sw, pw)

    if ph or pw:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    else:
        xp = np.ascontiguousarray(x.data)
    w2 = weight.data.reshape(f, -1)
    single = kh == 1 and kw == 1
    colm = None

    if single:
        xs = xp[:, :, ::sh, ::sw] if (sh > 1 or sw > 1) else xp
        xs = np.ascontiguousarray(xs).reshape(n, c, ho * wo)
        out = np.matmul(w2[None], xs).reshape(n, f, ho, wo)   # batched GEMM
    else:
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        colm = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
        out = np.ascontiguousarray((colm @ w2.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data.reshape(1, f, 1, 1)

    def vjp_weight(g):
        if single:
            gm = g.reshape(n, f, ho * wo)
            gw = np.matmul(gm, xs.transpose(0, 2, 1)).sum(axis=0)
        else:
            gm = g.transpose(0, 2, 3, 1).reshape(-1, f)
            gw = gm.T @ colm
        return gw.reshape(weight.shape)

    def vjp_input(g):
        gxp = np.zeros_like(xp)
        if single:
            gxs = np.matmul(w2.T[None], g.reshape(n, f, ho * wo)).reshape(n, c, ho, wo)
            gxp[:, :, ::sh, ::sw] = gxs
        else:
            gm = g.transpose(0, 2, 3, 1).reshape(-1, f)
            gcols = (gm @ w2).reshape(n, ho, wo, c, kh, kw)
            gcols = gcols.transpose(0, 3, 1, 2, 4, 5)         # [N,C,Ho,Wo,kh,kw]
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u:u + sh * ho:sh, v:v + sw * wo:sw] += gcols[:, :, :, :, u, v]
        if ph or pw:
            return gxp[:, :, ph:ph + h, pw:pw + w]
        return gxp

    parents = [(x, vjp_input), (weight, vjp_weight)]
    if bias is not None:
        parents.append((bias, lambda g: g.sum(axis=(0, 2, 3))))
    return _result(out, parents)


# ----------------------------------------------------------------------
# 3D convolution


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: IntOrTriple = 1,
    padding: IntOrTriple = 0,
) -> Tensor:
    """Cross-correlate ``x`` [N,C,L,H,W] with ``weight`` [F,C,kt,kh,kw]."""
    st, sh, sw = _triple(stride)
    pt, ph, pw = _triple(padding)
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError(f"conv3d: expected 5-d input and weight, got {x.shape} and {weight.shape}")
    n, c, l, h, w = x.shape
    f, cw, kt, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"conv3d: input channels {c} != weight channels {cw} "
                         f"(input {x.shape}, weight {weight.shape})")
    _check_conv_geometry("conv3d", (l, h, w), (kt, kh, kw), (st, sh, sw), (pt, ph, pw))
    lo = _out_extent(l, kt, st, pt)
    ho = _out_extent(h, kh, sh, ph)
    wo = _out_extent(w, kw, sw, pw)

    if pt or ph or pw:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    else:
        xp = np.ascontiguousarray(x.data)
    w2 = weight.data.reshape(f, -1)
    single = kt == 1 and kh == 1 and kw == 1
    colm = None

    if single:
        xs = xp[:, :, ::st, ::sh, ::sw] if (st > 1 or sh > 1 or sw > 1) else xp
        xs = np.ascontiguousarray(xs).reshape(n, c, lo * ho * wo)
        out = np.matmul(w2[None], xs).reshape(n, f, lo, ho, wo)
    else:
        cols = sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw]
        colm = np.ascontiguousarray(cols.transpose(0, 2, 3, 4, 1, 5, 6, 7))
        colm = colm.reshape(n * lo * ho * wo, c * kt * kh * kw)
        out = np.ascontiguousarray((colm @ w2.T).reshape(n, lo, ho, wo, f).transpose(0, 4, 1, 2, 3))
    if bias is not None:
        out += bias.data.reshape(1, f, 1, 1, 1)

    def vjp_weight(g):
        if single:
            gm = g.reshape(n, f, lo * ho * wo)
            gw = np.matmul(gm, xs.transpose(0, 2, 1)).sum(axis=0)
        else:
            gm = g.transpose(0, 2, 3, 4, 1).reshape(-1, f)
            gw = gm.T @ colm
        return gw.reshape(weight.shape)

    def vjp_input(g):
        gxp = np.zeros_like(xp)
        if single:
            gxs = np.matmul(w2.T[None], g.reshape(n, f, lo * ho * wo)).reshape(n, c, lo, ho, wo)
            gxp[:, :, ::st, ::sh, ::sw] = gxs
        else:
            gm = g.transpose(0, 2, 3, 4, 1).reshape(-1, f)
            gcols = (gm @ w2).reshape(n, lo, ho, wo, c, kt, kh, kw)
            gcols = gcols.transpose(0, 4, 1, 2, 3, 5, 6, 7)
            for u in range(kt):
                for v in range(kh):
                    for q in range(kw):
                        gxp[:, :, u:u + st * lo:st, v:v + sh * ho:sh, q:q + sw * wo:sw] += \
                            gcols[:, :, :, :, :, u, v, q]
        if pt or ph or pw:
            return gxp[:, :, pt:pt + l, ph:ph + h, pw:pw + w]
        return gxp

    parents = [(x, vjp_input), (weight, vjp_weight)]
    if bias is not None:
        parents.append((bias, lambda g: g.sum(axis=(0, 2, 3, 4))))
    return _result(out, parents)


# ----------------------------------------------------------------------
# pooling


def maxpool3d(
    x: Tensor,
    kernel: IntOrTriple,
    stride: Optional[IntOrTriple] = None,
    padding: IntOrTriple = 0,
) -> Tensor:
    """Windowed maximum over [N,C,L,H,W]; gradient routes to the first
    maximal element of each window in scan order."""
    kt, kh, kw = _triple(kernel)
    st, sh, sw = _triple(stride) if stride is not None else (kt, kh, kw)
    pt, ph, pw = _triple(padding)
    if x.ndim != 5:
        raise ValueError(f"maxpool3d: expected 5-d input, got {x.shape}")
    n, c, l, h, w = x.shape
    _check_conv_geometry("maxpool3d", (l, h, w), (kt, kh, kw), (st, sh, sw), (pt, ph, pw))
    if max(pt, ph, pw) >= max(kt, kh, kw):
        raise ValueError(f"maxpool3d: padding {padding} must be smaller than kernel {kernel}")
    lo = _out_extent(l, kt, st, pt)
    ho = _out_extent(h, kh, sh, ph)
    wo = _out_extent(w, kw, sw, pw)

    if pt or ph or pw:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    win = sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw]
    flat = win.reshape(n, c, lo, ho, wo, kt * kh * kw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)

    def vjp(g):
        gxp = np.zeros_like(xp)
        ut, rem = np.divmod(arg, kh * kw)
        uh, uw = np.divmod(rem, kw)
        ni, ci, li, hi, wi = np.indices(arg.shape, sparse=True)
        ti = li * st + ut
        yi = hi * sh + uh
        xi = wi * sw + uw
        np.add.at(gxp, (ni, ci, ti, yi, xi), g)
        if pt or ph or pw:
            return gxp[:, :, pt:pt + l, ph:ph + h, pw:pw + w]
        return gxp

    return _result(out, [(x, vjp)])


def maxpool2d(x: Tensor, kernel: IntOrPair, stride: Optional[IntOrPair] = None,
              padding: IntOrPair = 0) -> Tensor:
    """2D max pooling as a temporal-size-1 special case of maxpool3d."""
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride) if stride is not None else (kh, kw)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    x5 = x.reshape((n, c, 1, h, w))
    out = maxpool3d(x5, (1, kh, kw), (1, sh, sw), (0, ph, pw))
    _, _, _, ho, wo = out.shape
    return out.reshape((n, c, ho, wo))


def global_spatiotemporal_avgpool(x: Tensor) -> Tensor:
    """Mean over the temporal and both spatial axes: [N,C,L,H,W] -> [N,C]."""
    if x.ndim != 5:
        raise ValueError(f"global_spatiotemporal_avgpool: expected 5-d input, got {x.shape}")
    return x.mean(axis=(2, 3, 4))


# ----------------------------------------------------------------------
# linear / nonlinearity / normalization


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map: [N,D] @ [D,K] + [K]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"linear: expected 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear: inner extents differ (input {x.shape}, weight {weight.shape})")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    xd, wd = x.data, weight.data
    parents = [(x, lambda g: g @ wd.T), (weight, lambda g: xd.T @ g)]
    if bias is not None:
        parents.append((bias, lambda g: g.sum(axis=0)))
    return _result(out, parents)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize over every non-channel axis (channel axis = 1).

    Train mode uses batch statistics and decays the running buffers in
    place (``r = momentum * r + (1 - momentum) * batch``); eval mode
    normalizes with the running buffers.
    """
    if x.ndim < 2:
        raise ValueError(f"batchnorm: expected at least 2-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm: gamma/beta shape {gamma.shape}/{beta.shape} "
                         f"does not match {c} channels")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    dt = x.dtype.type

    if training:
        m = int(np.prod([x.shape[a] for a in axes]))
        if m <= 1:
            raise ValueError(
                f"batchnorm: training mode needs more than one value per channel, "
                f"got input shape {x.shape}")
        mu = x.data.mean(axis=axes)
        # one-pass variance; clamp tiny negative values from cancellation
        var = (x.data * x.data).mean(axis=axes) - mu * mu
        np.maximum(var, 0.0, out=var)
        running_mean *= dt(momentum)
        running_mean += dt(1.0 - momentum) * mu
        running_var *= dt(momentum)
        running_var += dt(1.0 - momentum) * var
    else:
        mu = running_mean
        var = running_var

    inv = 1.0 / np.sqrt(var + dt(eps))
    xhat = x.data - mu.reshape(bshape)
    xhat *= inv.reshape(bshape)
    gamma_b = gamma.data.reshape(bshape)
    inv_b = inv.reshape(bshape)
    out = gamma_b * xhat
    out += beta.data.reshape(bshape)

    def vjp_input(g):
        if not training:
            return g * (gamma_b * inv_b)
        gxhat = g * gamma_b
        mean_g = gxhat.mean(axis=axes, keepdims=True)
        mean_gx = (gxhat * xhat).mean(axis=axes, keepdims=True)
        gxhat -= mean_g
        gxhat -= xhat * mean_gx
        gxhat *= inv_b
        return gxhat

    parents = [
        (x, vjp_input),
        (gamma, lambda g: (g * xhat).sum(axis=axes)),
        (beta, lambda g: g.sum(axis=axes)),
    ]
    return _result(out.astype(x.dtype, copy=False), parents)


# ----------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of -log softmax(logits)[label]."""
    lab = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ValueError(f"softmax_cross_entropy: expected 2-d logits, got {logits.shape}")
    n, k = logits.shape
    if lab.shape != (n,):
        raise ValueError(f"softmax_cross_entropy: {n} rows but {lab.shape} labels")
    if lab.min() < 0 or lab.max() >= k:
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {k})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(sez)
    loss = np.asarray(-logp[np.arange(n), lab].mean(), dtype=logits.dtype)
    softmax = ez / sez

    def vjp(g):
        grad = softmax.copy()
        grad[np.arange(n), lab] -= 1
        return grad * (g / n)

    return _result(loss, [(logits, vjp)])


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain numpy softmax for score post-processing (no gradients)."""
    z = logits - logits.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=axis, keepdims=True)
