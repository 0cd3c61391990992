"""Strided/dilated 2-D convolution and its transpose, NCHW layout.

Both are lowered to one BLAS matmul over an im2col buffer. ``_col2im`` is
the exact adjoint of ``_im2col``, which makes the backward passes and the
transposed convolution share the same two kernels.
"""
from __future__ import annotations

import numpy as np

from .core import ShapeError, Tensor, _emit

# stride-1 convs use the narrow kernel unless padding inflates its work past this ratio
NARROW_FACTOR = 3


def conv_output_size(size: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """(B,C,Hp,Wp) padded input -> (C*kh*kw, B*ho*wo) patch matrix."""
    return _im2col_cm(np.ascontiguousarray(xp.transpose(1, 0, 2, 3)), kh, kw, stride, dilation, ho, wo)


def _im2col_cm(xt: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """Same as :func:`_im2col` for a channel-major (C,B,Hp,Wp) input."""
    c, b = xt.shape[:2]
    cols = np.empty((c, kh, kw, b, ho, wo), dtype=xt.dtype)
    for u in range(kh):
        r0 = u * dilation
        for v in range(kw):
            c0 = v * dilation
            cols[:, u, v] = xt[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride]
    return cols.reshape(c * kh * kw, b * ho * wo)


def _col2im(cols: np.ndarray, padded_shape, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add adjoint of :func:`_im2col`."""
    b, c, hp, wp = padded_shape
    return _col2im_cm(cols, (c, b, hp, wp), kh, kw, stride, dilation, ho, wo).transpose(1, 0, 2, 3)


def _col2im_cm(cols: np.ndarray, shape_cm, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add into a channel-major (C,B,Hp,Wp) buffer."""
    c, b, hp, wp = shape_cm
    cols = cols.reshape(c, kh, kw, b, ho, wo)
    out = np.zeros((c, b, hp, wp), dtype=cols.dtype)
    for u in range(kh):
        r0 = u * dilation
        for v in range(kw):
            c0 = v * dilation
            out[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += cols[:, u, v]
    return out


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _crop(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return x[:, :, padding:-padding, padding:-padding]


def _conv_narrow(x, kernel, bias, xt, dilation, padding, ho, wo):
    """Stride-1 conv with fewer output than input channels.

    Multiplies first and sums shifted slices afterwards, so the only
    patch buffer (in the backward pass) has ``Cout * k * k`` rows.
    """
    cin, b, hp, wp = xt.shape
    cout, _, kh, kw = kernel.shape
    w_all = kernel.data.transpose(2, 3, 0, 1).reshape(kh * kw * cout, cin)
    z = (w_all @ xt.reshape(cin, -1)).reshape(kh, kw, cout, b, hp, wp)
    acc = np.zeros((cout, b, ho, wo), dtype=z.dtype)
    for u in range(kh):
        for v in range(kw):
            acc += z[u, v, :, :, u * dilation : u * dilation + ho, v * dilation : v * dilation + wo]
    out = acc.transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def vjp(g):
        # full-padded gradient; its patches at the padded-input grid give both adjoints
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3))
        eh, ew = dilation * (kh - 1), dilation * (kw - 1)
        gpad = np.zeros((cout, b, hp + eh, wp + ew), dtype=g.dtype)
        gpad[:, :, eh : eh + ho, ew : ew + wo] = gt
        gcols = _im2col_cm(gpad, kh, kw, 1, dilation, hp, wp)
        gx = gk = gb = None
        if x.requires_grad:
            wflip = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
            gxp = (wflip @ gcols).reshape(cin, b, hp, wp)
            gx = _crop(gxp, padding).transpose(1, 0, 2, 3)
        if kernel.requires_grad:
            m = xt.reshape(cin, -1) @ gcols.T
            gk = m.reshape(cin, cout, kh, kw)[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gk = np.ascontiguousarray(gk)
        if bias is not None and bias.requires_grad:
            gb = gt.reshape(cout, -1).sum(axis=1)
        return gx, gk, gb

    return out, vjp


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding.

    ``x`` is (B, Cin, H, W) and ``kernel`` is (Cout, Cin, Kh, Kw).
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"conv2d: bad geometry stride={stride} dilation={dilation} padding={padding}")
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if cin != kcin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {kcin} (kernel shape {kernel.shape})")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    ho = conv_output_size(h, kh, stride, dilation, padding)
    wo = conv_output_size(w, kw, stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: empty output for input {h}x{w}, kernel {kh}x{kw}, dilation {dilation}, padding {padding}"
        )
    xt = _pad(np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)), padding)
    if stride == 1 and cout * xt.shape[2] * xt.shape[3] <= NARROW_FACTOR * cin * ho * wo:
        out, vjp = _conv_narrow(x, kernel, bias, xt, dilation, padding, ho, wo)
        inputs = (x, kernel) if bias is None else (x, kernel, bias)
        return _emit(out, inputs, vjp, "conv2d")
    cols = _im2col_cm(xt, kh, kw, stride, dilation, ho, wo)
    wmat = kernel.data.reshape(cout, -1)
    out = (wmat @ cols).reshape(cout, b, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def vjp(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gx = gk = gb = None
        if x.requires_grad:
            gcols = wmat.T @ gmat
            gx = _crop(_col2im_cm(gcols, xt.shape, kh, kw, stride, dilation, ho, wo), padding).transpose(1, 0, 2, 3)
        if kernel.requires_grad:
            gk = (gmat @ cols.T).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=1)
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit(out, inputs, vjp, "conv2d")


def conv_transpose2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Gradient of :func:`conv2d` w.r.t. its input, as a forward op.

    ``kernel`` is (Cin, Cout, Kh, Kw). Output size is
    ``(H-1)*stride - 2*padding + Kh + output_padding``.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or padding < 0 or not 0 <= output_padding < stride:
        raise ValueError(f"conv_transpose2d: bad geometry stride={stride} padding={padding} output_padding={output_padding}")
    b, cin, h, w = x.shape
    kcin, cout, kh, kw = kernel.shape
    if cin != kcin:
        raise ShapeError(f"conv_transpose2d: input has {cin} channels but kernel expects {kcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({cout},)")
    full_h = (h - 1) * stride + kh + output_padding
    full_w = (w - 1) * stride + kw + output_padding
    ho, wo = full_h - 2 * padding, full_w - 2 * padding
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: computed output size {ho}x{wo} is not positive")
    xmat = x.data.transpose(1, 0, 2, 3).reshape(cin, -1)
    kmat = kernel.data.reshape(cin, -1)
    cols = kmat.T @ xmat
    full = _col2im(cols, (b, cout, full_h, full_w), kh, kw, stride, 1, h, w)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def vjp(g):
        gfull = np.zeros((b, cout, full_h, full_w), dtype=g.dtype)
        gfull[:, :, padding : padding + ho, padding : padding + wo] = g
        gcols = _im2col(gfull, kh, kw, stride, 1, h, w)
        gx = gk = gb = None
        if x.requires_grad:
            gx = (kmat @ gcols).reshape(cin, b, h, w).transpose(1, 0, 2, 3)
        if kernel.requires_grad:
            gk = (xmat @ gcols.T).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit(out, inputs, vjp, "conv_transpose2d")
