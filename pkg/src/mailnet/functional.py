"""Differentiable layer primitives on (batch, channel, height, width) tensors."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, DimensionError, StateError
from .tensor import Tensor, as_tensor, make, sigmoid, relu  # noqa: F401  (re-exported)

__all__ = [
    "conv2d",
    "pad2d",
    "conv_output_size",
    "resolve_padding",
    "global_pool",
    "local_pool",
    "channel_shuffle",
    "shuffle_permutation",
    "dct_matrix",
    "dct2d",
    "batch_norm",
    "linear",
    "upsample_nearest",
    "cross_entropy",
    "relu",
    "sigmoid",
]


def _check_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{what} expects a (B, C, H, W) tensor, got shape {x.shape}")


# -- convolution ----------------------------------------------------------------

def resolve_padding(padding, kh: int, kw: int) -> tuple[int, int]:
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"'same' padding needs odd kernels, got {kh}x{kw}")
        return (kh - 1) // 2, (kw - 1) // 2
    if isinstance(padding, int):
        return padding, padding
    ph, pw = padding
    return int(ph), int(pw)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, w, stride: int = 1, padding="same", groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding and channel groups.

    ``w`` has shape (C_out, C_in // groups, k_h, k_w).  Depthwise convolution
    is ``groups == C_in`` (with ``C_out`` a multiple of ``C_in`` for a depth
    multiplier).  No bias.
    """
    x, w = as_tensor(x), as_tensor(w)
    _check_4d(x, "conv2d input")
    if w.ndim != 4:
        raise DimensionError(f"conv2d weights must be 4-D, got shape {w.shape}")
    B, C, H, W = x.shape
    Co, Cg, kh, kw = w.shape
    if groups < 1 or C % groups or Co % groups:
        raise ConfigError(f"groups={groups} must divide channels_in={C} and channels_out={Co}")
    if Cg != C // groups:
        raise DimensionError(
            f"weight axis 1 (channels per group) is {Cg}, expected {C // groups} for "
            f"channels_in={C}, groups={groups}"
        )
    if stride < 1:
        raise ConfigError(f"stride must be positive, got {stride}")
    ph, pw = resolve_padding(padding, kh, kw)
    Ho, Wo = conv_output_size(H, kh, stride, ph), conv_output_size(W, kw, stride, pw)
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"kernel {kh}x{kw} does not fit input {H}x{W} with padding ({ph},{pw})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    if kh == 1 and kw == 1:
        return _conv_pointwise(x, w, xp, stride, groups, (ph, pw), (Ho, Wo))
    if Cg == 1 and groups == C and C > 1:
        if H * W <= DENSE_DEPTHWISE_MAX:
            return _conv_depthwise_dense(x, w, stride, (ph, pw), (Ho, Wo))
        return _conv_depthwise(x, w, xp, stride, groups, (ph, pw), (Ho, Wo))
    return _conv_general(x, w, xp, stride, groups, (ph, pw), (Ho, Wo))


def _crop(gp: np.ndarray, ph: int, pw: int, H: int, W: int) -> np.ndarray:
    return gp[:, :, ph:ph + H, pw:pw + W]


def _conv_pointwise(x, w, xp, stride, groups, pads, out_hw):
    B, C, H, W = x.shape
    Co = w.shape[0]
    G = groups
    Ho, Wo = out_hw
    xs = xp[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    xg = xs.reshape(B, G, C // G, Ho * Wo)
    wg = w.data.reshape(G, Co // G, C // G)
    out = np.matmul(wg, xg).reshape(B, Co, Ho, Wo)

    def bw(g):
        gg = g.reshape(B, G, Co // G, Ho * Wo)
        gx = gw = None
        if x.requires_grad:
            dxs = np.matmul(wg.transpose(0, 2, 1), gg).reshape(B, C, Ho, Wo)
            dxp = np.zeros_like(xp)
            dxp[:, :, ::stride, ::stride][:, :, :Ho, :Wo] = dxs
            gx = _crop(dxp, pads[0], pads[1], H, W)
        if w.requires_grad:
            gw = np.matmul(gg, xg.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.shape)
        return gx, gw

    return make(out, (x, w), bw)


# depthwise maps with at most this many pixels run as per-channel dense matmuls
DENSE_DEPTHWISE_MAX = 256


@lru_cache(maxsize=128)
def _tap_index(H: int, W: int, kh: int, kw: int, stride: int, ph: int, pw: int, Ho: int, Wo: int):
    """Flat (output pixel, input pixel) positions touched by each kernel tap, grouped by tap."""
    o = np.arange(Ho * Wo)
    r0, c0 = (o // Wo) * stride - ph, (o % Wo) * stride - pw
    pos, starts = [], []
    n = 0
    for i in range(kh):
        for j in range(kw):
            r, c = r0 + i, c0 + j
            ok = (r >= 0) & (r < H) & (c >= 0) & (c < W)
            starts.append(n)
            pos.append(o[ok] * (H * W) + r[ok] * W + c[ok])
            n += int(ok.sum())
    taps = np.repeat(np.arange(kh * kw), np.diff(starts + [n]))
    pos = np.concatenate(pos)
    for a in (pos, taps):
        a.setflags(write=False)
    return pos, taps, np.array(starts), np.diff(starts + [n]) > 0


def _conv_depthwise_dense(x, w, stride, pads, out_hw):
    B, C, H, W = x.shape
    Co, _, kh, kw = w.shape
    Ho, Wo = out_hw
    mult = Co // C
    HW, HWo = H * W, Ho * Wo
    pos, taps, starts, nonempty = _tap_index(H, W, kh, kw, stride, pads[0], pads[1], Ho, Wo)
    # each channel's conv as a (HWo, HW) matrix built from its kernel taps
    M = np.zeros((Co, HWo * HW))
    M[:, pos] = w.data.reshape(Co, kh * kw)[:, taps]
    M = M.reshape(C, mult * HWo, HW)
    xc = x.data.transpose(1, 2, 3, 0).reshape(C, HW, B)
    out = np.matmul(M, xc).reshape(Co, Ho, Wo, B).transpose(3, 0, 1, 2)

    def bw(g):
        gc = g.transpose(1, 2, 3, 0).reshape(C, mult * HWo, B)
        gx = gw = None
        if w.requires_grad:
            dM = np.matmul(gc, xc.transpose(0, 2, 1)).reshape(Co, HWo * HW)
            gw = np.zeros((Co, kh * kw))
            gw[:, nonempty] = np.add.reduceat(dM[:, pos], starts[nonempty], axis=1)
            gw = gw.reshape(w.shape)
        if x.requires_grad:
            gx = np.matmul(M.transpose(0, 2, 1), gc).reshape(C, H, W, B).transpose(3, 0, 1, 2)
        return gx, gw

    return make(np.ascontiguousarray(out), (x, w), bw)


def _conv_depthwise(x, w, xp, stride, groups, pads, out_hw):
    B, C, H, W = x.shape
    Co, _, kh, kw = w.shape
    Ho, Wo = out_hw
    mult = Co // C
    # output channel c * mult + k reads input channel c
    wd = w.data[:, 0].reshape(C, mult, kh, kw)
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    xv = xp[:, :, None]
    out = np.zeros((B, C, mult, Ho, Wo))
    tmp = np.empty_like(out)
    for i in range(kh):
        for j in range(kw):
            np.multiply(xv[..., i:i + hs:stride, j:j + ws:stride], wd[None, :, :, i, j, None, None], out=tmp)
            out += tmp

    def bw(g):
        g5 = g.reshape(B, C, mult, Ho, Wo)
        gx = gw = None
        if w.requires_grad:
            gw = np.empty((C, mult, kh, kw))
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, i:i + hs:stride, j:j + ws:stride]
                    gw[:, :, i, j] = np.einsum("bckhw,bchw->ck", g5, patch)
            gw = gw.reshape(w.shape)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            gsum = g5[:, :, 0] if mult == 1 else None
            for i in range(kh):
                for j in range(kw):
                    if mult == 1:
                        dxp[:, :, i:i + hs:stride, j:j + ws:stride] += gsum * wd[None, :, 0, i, j, None, None]
                    else:
                        dxp[:, :, i:i + hs:stride, j:j + ws:stride] += np.einsum(
                            "bckhw,ck->bchw", g5, wd[:, :, i, j])
            gx = _crop(dxp, pads[0], pads[1], H, W)
        return gx, gw

    return make(out.reshape(B, Co, Ho, Wo), (x, w), bw)


def _conv_general(x, w, xp, stride, groups, pads, out_hw):
    B, C, H, W = x.shape
    Co, Cg, kh, kw = w.shape
    G = groups
    Ho, Wo = out_hw
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    # (B, G, Cg, Ho, Wo, kh, kw) x (G, Og, Cg, kh, kw)
    cols = win.reshape(B, G, Cg, Ho, Wo, kh, kw)
    cols = np.ascontiguousarray(cols.transpose(0, 1, 3, 4, 2, 5, 6)).reshape(B, G, Ho * Wo, Cg * kh * kw)
    wg = w.data.reshape(G, Co // G, Cg * kh * kw)
    out = np.matmul(cols, wg.transpose(0, 2, 1)[None])  # (B, G, HoWo, Og)
    out = out.transpose(0, 1, 3, 2).reshape(B, Co, Ho, Wo)
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1

    def bw(g):
        gg = g.reshape(B, G, Co // G, Ho * Wo)
        gx = gw = None
        if w.requires_grad:
            gw = np.matmul(gg, cols).sum(axis=0).reshape(w.shape)
        if x.requires_grad:
            # (B, G, Cg*kh*kw, HoWo) -> per-tap (B, C, Ho, Wo) slabs
            dcols = np.matmul(wg.transpose(0, 2, 1)[None], gg)
            dcols = dcols.reshape(B, C, kh, kw, Ho, Wo)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[:, :, i, j]
            gx = _crop(dxp, pads[0], pads[1], H, W)
        return gx, gw

    return make(out, (x, w), bw)


def pad2d(x, ph: int, pw: int | None = None) -> Tensor:
    """Zero-pad the last two axes by ``ph`` rows and ``pw`` columns on each side."""
    x = as_tensor(x)
    pw = ph if pw is None else pw
    width = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    out = np.pad(x.data, width)
    h, w = x.shape[-2:]
    return make(out, (x,), lambda g: (g[..., ph:ph + h, pw:pw + w].copy(),))


# -- pooling ----------------------------------------------------------------------

def global_pool(x, kind: str = "avg") -> Tensor:
    """Per-channel spatial reduction to shape (B, C, 1, 1).

    Max/min route the gradient to the first attaining element in row-major order.
    """
    x = as_tensor(x)
    _check_4d(x, "global_pool")
    B, C, H, W = x.shape
    if H < 1 or W < 1:
        raise DimensionError(f"global_pool needs a non-empty spatial extent, got {H}x{W}")
    if kind == "avg":
        out = x.data.mean(axis=(2, 3), keepdims=True)
        scale = 1.0 / (H * W)
        return make(out, (x,), lambda g: (np.broadcast_to(g * scale, x.shape).copy(),))
    if kind not in ("max", "min"):
        raise ConfigError(f"unknown global pool kind {kind!r}")
    flat = x.data.reshape(B, C, H * W)
    idx = flat.argmax(axis=2) if kind == "max" else flat.argmin(axis=2)
    out = np.take_along_axis(flat, idx[..., None], axis=2).reshape(B, C, 1, 1)

    def bw(g):
        gflat = np.zeros((B, C, H * W))
        np.put_along_axis(gflat, idx[..., None], g.reshape(B, C, 1), axis=2)
        return (gflat.reshape(x.shape),)

    return make(out, (x,), bw)


def local_pool(x, kind: str = "avg", window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping window pooling; trailing rows/cols that do not fill a window are dropped."""
    x = as_tensor(x)
    _check_4d(x, "local_pool")
    if window != stride:
        raise ConfigError("local_pool supports non-overlapping windows only (window == stride)")
    B, C, H, W = x.shape
    if H < window or W < window:
        raise DimensionError(f"pool window {window} exceeds spatial extent {H}x{W}")
    k = window
    Ho, Wo = H // k, W // k
    xc = x.data[:, :, :Ho * k, :Wo * k]
    blocks = xc.reshape(B, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, k * k)

    def scatter(gblocks):
        full = gblocks.reshape(B, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * k, Wo * k)
        if Ho * k == H and Wo * k == W:
            return full
        gx = np.zeros(x.shape)
        gx[:, :, :Ho * k, :Wo * k] = full
        return gx

    if kind == "avg":
        out = blocks.mean(axis=-1)
        return make(out, (x,), lambda g: (scatter(np.repeat(g[..., None] / (k * k), k * k, axis=-1)),))
    if kind != "max":
        raise ConfigError(f"unknown local pool kind {kind!r}")
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        return (scatter(gb),)

    return make(out, (x,), bw)


def upsample_nearest(x, size: tuple[int, int]) -> Tensor:
    """Nearest-neighbour resize: output pixel (i, j) reads input (i*h//H, j*w//W)."""
    x = as_tensor(x)
    _check_4d(x, "upsample_nearest")
    _, _, h, w = x.shape
    H, W = size
    if (h, w) == (H, W):
        return x
    ri = (np.arange(H) * h) // H
    ci = (np.arange(W) * w) // W
    if H % h == 0 and W % w == 0 and np.array_equal(ri, np.repeat(np.arange(h), H // h)):
        fh, fw = H // h, W // w
        out = np.repeat(np.repeat(x.data, fh, axis=2), fw, axis=3)
        B, C = x.shape[:2]
        return make(out, (x,), lambda g: (g.reshape(B, C, h, fh, w, fw).sum(axis=(3, 5)),))
    Ur = np.zeros((H, h))
    Ur[np.arange(H), ri] = 1.0
    Uc = np.zeros((W, w))
    Uc[np.arange(W), ci] = 1.0
    out = np.einsum("ih,bchw,jw->bcij", Ur, x.data, Uc, optimize=True)
    return make(out, (x,), lambda g: (np.einsum("ih,bcij,jw->bchw", Ur, g, Uc, optimize=True),))


# -- channel shuffle ----------------------------------------------------------------

def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    """Source channel index for each output channel."""
    if groups < 1 or channels % groups:
        raise ConfigError(f"shuffle groups={groups} must divide channels={channels}")
    return np.arange(channels).reshape(groups, channels // groups).T.reshape(-1)


def channel_shuffle(x, groups: int) -> Tensor:
    x = as_tensor(x)
    _check_4d(x, "channel_shuffle")
    perm = shuffle_permutation(x.shape[1], groups)
    inv = np.argsort(perm)
    return make(x.data[:, perm], (x,), lambda g: (g[:, inv],))


# -- DCT ------------------------------------------------------------------------------

@lru_cache(maxsize=64)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix; rows are frequencies."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    m.setflags(write=False)
    return m


def dct2d(x, inverse: bool = False) -> Tensor:
    """Separable orthonormal 2-D DCT-II over the last two axes (DCT-III when ``inverse``)."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"dct2d needs at least 2 axes, got shape {x.shape}")
    Dh = dct_matrix(x.shape[-2])
    Dw = dct_matrix(x.shape[-1])
    if inverse:
        Dh, Dw = Dh.T, Dw.T
    out = Dh @ x.data @ Dw.T
    return make(out, (x,), lambda g: (Dh.T @ g @ Dw,))


# -- normalisation and dense layers ----------------------------------------------------------

def batch_norm(x, gamma, beta, running_mean: np.ndarray | None, running_var: np.ndarray | None,
               training: bool, momentum: float = 0.1, eps: float = 1e-5,
               update_stats: bool = True) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch moments normalise and (optionally) update the
    running buffers in place.  Eval mode reads the running buffers and fails if
    they were never filled.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_4d(x, "batch_norm")
    C = x.shape[1]
    shp = (1, C, 1, 1)
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_stats and running_mean is not None:
            unbiased = var * n / max(n - 1, 1)
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise StateError("batch_norm in eval mode before running statistics were initialised")
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(shp)) * inv.reshape(shp)
    out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(shp)
            if training:
                m = x.shape[0] * x.shape[2] * x.shape[3]
                gx = (inv.reshape(shp) / m) * (
                    m * gxhat
                    - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                )
            else:
                gx = gxhat * inv.reshape(shp)
        return gx, gg, gb

    return make(out, (x, gamma, beta), bw)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` for a (B, in) input and (out, in) weight."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2:
        raise DimensionError(f"linear expects a (B, features) input, got {x.shape}")
    if weight.shape[1] != x.shape[1]:
        raise DimensionError(f"linear input axis 1 is {x.shape[1]}, weight expects {weight.shape[1]}")
    parents = (x, weight) if bias is None else (x, weight, as_tensor(bias))
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + parents[2].data

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return make(out, parents, bw)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (B, K) logits, got {logits.shape}")
    B, K = logits.shape
    if labels.shape != (B,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise DataError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(B), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        return (p * (g / B),)

    return make(np.asarray(loss), (logits,), bw)
