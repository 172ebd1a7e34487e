"""Low-level numpy kernels: a forward/adjoint pair for every primitive.

Everything here operates on plain ndarrays (CHW layout for image-like data),
never mutates an input, and is deterministic: summation order within each
output element is fixed and no threading is used, so identical inputs give
bit-identical outputs. Adjoints are analytic transposes of the forwards; the
test suite verifies each pair against central finite differences.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

PROB_FLOOR = 1e-8  # clamp applied to probabilities before log in cross-entropy


# ---------------------------------------------------------------------------
# convolution


def conv_out_size(n: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp, kh, kw, stride, dilation, oh, ow):
    """Gather conv patches from a padded input into (cin, kh, kw, oh, ow)."""
    cin = xp.shape[0]
    cols = np.empty((cin, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            r0 = i * dilation
            c0 = j * dilation
            cols[:, i, j] = xp[:, r0:r0 + stride * (oh - 1) + 1:stride,
                               c0:c0 + stride * (ow - 1) + 1:stride]
    return cols


def conv2d_fwd(x, w, b, stride=1, dilation=1, padding=0):
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(
            f"conv2d: input has {cin} channels (shape {x.shape}) but kernel "
            f"expects {cin_w} (shape {w.shape})")
    oh = conv_out_size(h, kh, stride, dilation, padding)
    ow = conv_out_size(wd, kw, stride, dilation, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d: output dims {(oh, ow)} < 1 for input {x.shape}, kernel "
            f"{w.shape}, stride={stride}, dilation={dilation}, padding={padding}")
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _im2col(xp, kh, kw, stride, dilation, oh, ow)
    y = w.reshape(cout, -1) @ cols.reshape(cin * kh * kw, oh * ow)
    y = y.reshape(cout, oh, ow)
    if b is not None:
        y = y + b[:, None, None]
    return y


def conv2d_bwd(x, w, stride, dilation, padding, up,
               need_x=True, need_w=True, need_b=True):
    """Adjoint of conv2d_fwd; returns (dx, dw, db), entries None when not needed."""
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    oh, ow = up.shape[1], up.shape[2]
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
    up_mat = up.reshape(cout, oh * ow)

    dw = None
    if need_w:
        cols = _im2col(xp, kh, kw, stride, dilation, oh, ow)
        dw = (up_mat @ cols.reshape(cin * kh * kw, oh * ow).T).reshape(w.shape)

    dx = None
    if need_x:
        dcols = (w.reshape(cout, -1).T @ up_mat).reshape(cin, kh, kw, oh, ow)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                r0 = i * dilation
                c0 = j * dilation
                dxp[:, r0:r0 + stride * (oh - 1) + 1:stride,
                    c0:c0 + stride * (ow - 1) + 1:stride] += dcols[:, i, j]
        dx = dxp[:, padding:padding + h, padding:padding + wd] if padding else dxp

    db = up.sum(axis=(1, 2)) if need_b else None
    return dx, dw, db


def shared_conv_fwd(x, k):
    """Convolve every channel of x with the same 2-D kernel, valid mode."""
    kh, kw = k.shape
    oh = x.shape[1] - kh + 1
    ow = x.shape[2] - kw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"shared_conv: kernel {k.shape} larger than input {x.shape}")
    y = np.zeros((x.shape[0], oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            y += k[i, j] * x[:, i:i + oh, j:j + ow]
    return y


def shared_conv_bwd(x, k, up, need_x=True, need_k=True):
    kh, kw = k.shape
    oh, ow = up.shape[1], up.shape[2]
    dx = np.zeros_like(x) if need_x else None
    dk = np.zeros_like(k) if need_k else None
    for i in range(kh):
        for j in range(kw):
            if need_k:
                dk[i, j] = np.sum(up * x[:, i:i + oh, j:j + ow])
            if need_x:
                dx[:, i:i + oh, j:j + ow] += k[i, j] * up
    return dx, dk


# ---------------------------------------------------------------------------
# padding and resampling


def pad_edge_fwd(x, p):
    return np.pad(x, ((0, 0), (p, p), (p, p)), mode="edge")


def pad_edge_bwd(up, p, in_shape):
    c, h, w = in_shape
    d = up[:, p:p + h, p:p + w].copy()
    d[:, 0, :] += up[:, :p, p:p + w].sum(axis=1)
    d[:, -1, :] += up[:, p + h:, p:p + w].sum(axis=1)
    d[:, :, 0] += up[:, p:p + h, :p].sum(axis=2)
    d[:, :, -1] += up[:, p:p + h, p + w:].sum(axis=2)
    d[:, 0, 0] += up[:, :p, :p].sum(axis=(1, 2))
    d[:, 0, -1] += up[:, :p, p + w:].sum(axis=(1, 2))
    d[:, -1, 0] += up[:, p + h:, :p].sum(axis=(1, 2))
    d[:, -1, -1] += up[:, p + h:, p + w:].sum(axis=(1, 2))
    return d


def _resize_axis(n_in: int, n_out: int):
    """Source indices and fractions for align-corners-false sampling, edge clamped."""
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(pos)
    frac = pos - i0
    i0 = i0.astype(np.int64)
    lo = np.clip(i0, 0, n_in - 1)
    hi = np.clip(i0 + 1, 0, n_in - 1)
    return lo, hi, frac


def _bilinear_weights(fy, fx, dtype):
    fy = fy.astype(dtype)[:, None]
    fx = fx.astype(dtype)[None, :]
    return (1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx


def resize_fwd(x, oh, ow):
    c, h, w = x.shape
    if oh < 1 or ow < 1:
        raise ShapeError(f"resize: target dims {(oh, ow)} < 1")
    if (oh, ow) == (h, w):
        return x.copy()
    y0, y1, fy = _resize_axis(h, oh)
    x0, x1, fx = _resize_axis(w, ow)
    w00, w01, w10, w11 = _bilinear_weights(fy, fx, x.dtype)
    return (w00 * x[:, y0[:, None], x0[None, :]]
            + w01 * x[:, y0[:, None], x1[None, :]]
            + w10 * x[:, y1[:, None], x0[None, :]]
            + w11 * x[:, y1[:, None], x1[None, :]])


def resize_bwd(in_shape, up):
    c, h, w = in_shape
    oh, ow = up.shape[1], up.shape[2]
    if (oh, ow) == (h, w):
        return up.copy()
    y0, y1, fy = _resize_axis(h, oh)
    x0, x1, fx = _resize_axis(w, ow)
    weights = _bilinear_weights(fy, fx, up.dtype)
    corners = ((y0, x0), (y0, x1), (y1, x0), (y1, x1))
    dx = np.zeros(in_shape, dtype=up.dtype)
    flat = dx.reshape(c, h * w)
    chan = np.arange(c)[:, None]
    for (yi, xi), wgt in zip(corners, weights):
        idx = (yi[:, None] * w + xi[None, :]).ravel()
        np.add.at(flat, (chan, idx[None, :]), (up * wgt).reshape(c, -1))
    return dx


# ---------------------------------------------------------------------------
# pointwise


def relu_fwd(x):
    return np.maximum(x, 0)


def relu_bwd(x, up):
    return up * (x > 0)


def sigmoid_fwd(x):
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + z), z / (1 + z))


def sigmoid_bwd(y, up):
    return up * y * (1 - y)


def softmax_fwd(x):
    e = np.exp(x - x.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def softmax_bwd(y, up):
    return y * (up - (up * y).sum(axis=0, keepdims=True))


# ---------------------------------------------------------------------------
# warping and shifting


def _sample_axis(base, flow_component, n):
    pos = base + flow_component
    i0 = np.floor(pos)
    frac = (pos - i0).astype(flow_component.dtype)
    i0 = i0.astype(np.int64)
    lo = np.clip(i0, 0, n - 1)
    hi = np.clip(i0 + 1, 0, n - 1)
    return lo, hi, frac


def warp_fwd(prev, flow):
    """Backward-warp prev by flow: out[c,y,x] = prev[c, y+flow_y, x+flow_x], bilinear.

    Out-of-range sample coordinates clamp to the border. flow[0] is the
    horizontal component (+x rightward), flow[1] vertical (+y downward).
    """
    c, h, w = prev.shape
    if flow.shape != (2, h, w):
        raise ShapeError(f"warp: flow shape {flow.shape} does not match prev {prev.shape}")
    x0, x1, fx = _sample_axis(np.arange(w)[None, :], flow[0], w)
    y0, y1, fy = _sample_axis(np.arange(h)[:, None], flow[1], h)
    p00 = prev[:, y0, x0]
    p01 = prev[:, y0, x1]
    p10 = prev[:, y1, x0]
    p11 = prev[:, y1, x1]
    return ((1 - fy) * ((1 - fx) * p00 + fx * p01)
            + fy * ((1 - fx) * p10 + fx * p11))


def warp_bwd(prev, flow, up, need_prev=True, need_flow=True):
    c, h, w = prev.shape
    x0, x1, fx = _sample_axis(np.arange(w)[None, :], flow[0], w)
    y0, y1, fy = _sample_axis(np.arange(h)[:, None], flow[1], h)

    d_prev = None
    if need_prev:
        d_prev = np.zeros_like(prev)
        flat = d_prev.reshape(c, h * w)
        chan = np.arange(c)[:, None]
        for yi, xi, wgt in ((y0, x0, (1 - fy) * (1 - fx)), (y0, x1, (1 - fy) * fx),
                            (y1, x0, fy * (1 - fx)), (y1, x1, fy * fx)):
            idx = (yi * w + xi).ravel()
            np.add.at(flat, (chan, idx[None, :]), (up * wgt).reshape(c, -1))

    d_flow = None
    if need_flow:
        p00 = prev[:, y0, x0]
        p01 = prev[:, y0, x1]
        p10 = prev[:, y1, x0]
        p11 = prev[:, y1, x1]
        dfx = (up * ((1 - fy) * (p01 - p00) + fy * (p11 - p10))).sum(axis=0)
        dfy = (up * ((1 - fx) * (p10 - p00) + fx * (p11 - p01))).sum(axis=0)
        d_flow = np.stack([dfx, dfy])
    return d_prev, d_flow


def shift_fwd(x, dx, dy):
    """Shift so out[c,y,x] = x[c, y+dy, x+dx], clamping source indices to the edge."""
    c, h, w = x.shape
    ys = np.clip(np.arange(h) + dy, 0, h - 1)
    xs = np.clip(np.arange(w) + dx, 0, w - 1)
    return x[:, ys[:, None], xs[None, :]]


def shift_bwd(in_shape, dx, dy, up):
    c, h, w = in_shape
    ys = np.clip(np.arange(h) + dy, 0, h - 1)
    xs = np.clip(np.arange(w) + dx, 0, w - 1)
    d = np.zeros(in_shape, dtype=up.dtype)
    idx = (ys[:, None] * w + xs[None, :]).ravel()
    np.add.at(d.reshape(c, h * w), (np.arange(c)[:, None], idx[None, :]),
              up.reshape(c, -1))
    return d


# ---------------------------------------------------------------------------
# fusion and normalization


def fuse_fwd(stack, weights):
    """Per-pixel inner product over candidates: out[c] = sum_d weights[d] * stack[d,c]."""
    return np.einsum("dhw,dchw->chw", weights, stack)


def fuse_bwd(stack, weights, up, need_stack=True, need_weights=True):
    d_stack = np.einsum("dhw,chw->dchw", weights, up) if need_stack else None
    d_weights = np.einsum("chw,dchw->dhw", up, stack) if need_weights else None
    return d_stack, d_weights


def renorm_fwd(x):
    """Clamp to >= 0 and divide by the per-pixel channel sum."""
    xc = np.maximum(x, 0)
    s = xc.sum(axis=0, keepdims=True)
    bad = s <= 1e-9
    if bad.any():
        y, xi = np.argwhere(bad[0])[0]
        raise ShapeError(f"renorm: non-positive channel sum at pixel (x={xi}, y={y})")
    return xc / s


def renorm_bwd(x, y, up):
    s = np.maximum(x, 0).sum(axis=0, keepdims=True)
    d = (up - (up * y).sum(axis=0, keepdims=True)) / s
    return np.where(x > 0, d, 0)


# ---------------------------------------------------------------------------
# losses and reductions


def _check_labels(labels, class_count):
    bad = (labels < 0) | (labels >= class_count)
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise ShapeError(
            f"label {int(labels[y, x])} out of range [0, {class_count}) at "
            f"pixel (x={x}, y={y})")


def cross_entropy_fwd(probs, labels):
    """Mean over pixels of -log(prob at true class), probs floored at PROB_FLOOR."""
    c = probs.shape[0]
    if labels.shape != probs.shape[1:]:
        raise ShapeError(f"labels shape {labels.shape} does not match probs {probs.shape}")
    _check_labels(labels, c)
    p = np.take_along_axis(probs, labels[None], axis=0)[0]
    return np.asarray(-np.log(np.maximum(p, PROB_FLOOR)).mean())


def cross_entropy_bwd(probs, labels, up):
    p = np.take_along_axis(probs, labels[None], axis=0)[0]
    n = p.size
    g_true = np.where(p > PROB_FLOOR, -1.0 / np.maximum(p, PROB_FLOOR), 0.0)
    g_true = g_true * (float(up) / n)
    d = np.zeros_like(probs)
    np.put_along_axis(d, labels[None], g_true[None], axis=0)
    return d


def sum_all_fwd(x):
    return np.asarray(x.sum())


def sum_all_bwd(in_shape, up, dtype):
    return np.full(in_shape, float(up), dtype=dtype)
