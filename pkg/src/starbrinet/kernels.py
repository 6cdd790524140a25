"""Dense tensor kernels with hand-written analytic backward passes.

Every operation is a pure function ``forward(inputs) -> (output, ctx)`` paired
with ``*_backward(ctx, grad_output) -> input gradients``.  There is no tape:
callers are responsible for invoking backwards in reverse order and for
routing the returned gradients.  Convolution is cross-correlation (no kernel
flip) on N,C,H,W row-major arrays with zero padding.

All kernels preserve the dtype of their inputs; run float64 when feeding the
finite-difference checker and float32 for timed training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Array = np.ndarray

_debug_finite_checks = False


def set_debug_finite_checks(enabled: bool) -> None:
    """Toggle post-kernel NaN/Inf detection (off by default: it costs a pass
    over every output, which is measurable in timed training loops)."""
    global _debug_finite_checks
    _debug_finite_checks = bool(enabled)


def _finite_or_raise(name: str, *arrays: Array) -> None:
    if not _debug_finite_checks:
        return
    for a in arrays:
        if a is not None and not np.isfinite(a).all():
            raise FloatingPointError(f"{name}: non-finite values detected")


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ValueError(message)


# ---------------------------------------------------------------------------
# im2col / col2im
# ---------------------------------------------------------------------------

def _pad2d(x: Array, padding: int) -> Array:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _conv_out_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    return ((h + 2 * padding - kh) // stride + 1,
            (w + 2 * padding - kw) // stride + 1)


def _im2col(x: Array, kh: int, kw: int, stride: int, padding: int) -> tuple[Array, tuple[int, int]]:
    """Unfold ``x`` [N,C,H,W] into a [C*Kh*Kw, N*Ho*Wo] patch matrix."""
    n, c, h, w = x.shape
    xp = _pad2d(x, padding)
    ho, wo = _conv_out_hw(h, w, kh, kw, stride, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: [N, C, Ho, Wo, Kh, Kw] -> [C, Kh, Kw, N, Ho, Wo] -> flatten
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3))
    return cols.reshape(c * kh * kw, n * ho * wo), (ho, wo)


def _col2im(gcols: Array, x_shape: tuple, kh: int, kw: int, stride: int, padding: int) -> Array:
    """Scatter-add a patch-matrix gradient back onto the input grid."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    g = gcols.reshape(c, kh, kw, n, ho, wo)
    gx = np.zeros((n, c, hp, wp), dtype=gcols.dtype)
    for u in range(kh):
        for v in range(kw):
            gx[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += \
                g[:, u, v].transpose(1, 0, 2, 3)
    if padding:
        gx = gx[:, :, padding:hp - padding, padding:wp - padding]
    return gx


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvCtx:
    x_shape: tuple
    weights: tuple[Array, ...]
    stride: int
    padding: int
    out_hw: tuple[int, int]
    cols: Array  # cached unfold; shared by the weight- and input-gradient GEMMs


def _validate_conv(x: Array, weight: Array, bias: Array | None, stride: int, padding: int,
                   transposed: bool = False) -> None:
    _require(x.ndim == 4, f"conv input must be N,C,H,W, got shape {x.shape}")
    _require(weight.ndim == 4, f"conv weight must be 4-D, got shape {weight.shape}")
    _require(stride >= 1, f"stride must be >= 1, got {stride}")
    _require(padding >= 0, f"padding must be >= 0, got {padding}")
    cin = weight.shape[1] if not transposed else weight.shape[0]
    _require(x.shape[1] == cin,
             f"input channels {x.shape[1]} do not match weight channels {cin}")
    if bias is not None:
        cout = weight.shape[0] if not transposed else weight.shape[1]
        _require(bias.shape == (cout,),
                 f"bias shape {bias.shape} does not match {cout} output channels")
    if not transposed:
        kh, kw = weight.shape[2], weight.shape[3]
        _require(kh <= x.shape[2] + 2 * padding and kw <= x.shape[3] + 2 * padding,
                 f"kernel {kh}x{kw} larger than padded input "
                 f"{x.shape[2] + 2 * padding}x{x.shape[3] + 2 * padding}")


def conv2d(x: Array, weight: Array, bias: Array | None, stride: int = 1,
           padding: int = 0) -> tuple[Array, ConvCtx]:
    """Cross-correlate ``x`` [N,Cin,H,W] with ``weight`` [Cout,Cin,Kh,Kw]."""
    out, ctx = conv2d_multi(x, [(weight, bias)], stride, padding)
    return out[0], ctx


def conv2d_multi(x: Array, weight_bias: list, stride: int = 1,
                 padding: int = 0) -> tuple[list[Array], ConvCtx]:
    """Run several convolutions that share one input (and one im2col unfold).

    ConvLSTM cells convolve the same [x, h] stack with both the gate and the
    candidate weights; sharing the patch matrix roughly halves unfold cost.
    """
    for weight, bias in weight_bias:
        _validate_conv(x, weight, bias, stride, padding)
    kh, kw = weight_bias[0][0].shape[2:]
    for weight, _ in weight_bias[1:]:
        _require(weight.shape[2:] == (kh, kw),
                 "all weights in conv2d_multi must share a kernel size")
    _finite_or_raise("conv2d", x)
    n = x.shape[0]
    cols, (ho, wo) = _im2col(x, kh, kw, stride, padding)
    outs = []
    for weight, bias in weight_bias:
        cout = weight.shape[0]
        y = weight.reshape(cout, -1) @ cols
        if bias is not None:
            y += bias[:, None]
        outs.append(np.ascontiguousarray(
            y.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)))
    ctx = ConvCtx(x.shape, tuple(w for w, _ in weight_bias), stride, padding,
                  (ho, wo), cols)
    _finite_or_raise("conv2d", *outs)
    return outs, ctx


def conv2d_backward(ctx: ConvCtx, grad_out: Array) -> tuple[Array, Array, Array]:
    (gx, grads) = conv2d_multi_backward(ctx, [grad_out])
    gw, gb = grads[0]
    return gx, gw, gb


def conv2d_multi_backward(ctx: ConvCtx, grad_outs: list[Array]) -> tuple[Array, list]:
    """Gradients for conv2d_multi: returns (grad_input, [(gw, gb), ...])."""
    n = ctx.x_shape[0]
    kh, kw = ctx.weights[0].shape[2:]
    ho, wo = ctx.out_hw
    cols = ctx.cols
    wgrads = []
    gcols = None
    for weight, gy in zip(ctx.weights, grad_outs):
        cout = weight.shape[0]
        _require(gy.shape == (n, cout, ho, wo),
                 f"grad_out shape {gy.shape} does not match forward output "
                 f"{(n, cout, ho, wo)}")
        gym = np.ascontiguousarray(gy.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gw = (gym @ cols.T).reshape(weight.shape)
        gb = gym.sum(axis=1)
        wgrads.append((gw, gb))
        contrib = weight.reshape(cout, -1).T @ gym
        gcols = contrib if gcols is None else gcols + contrib
    gx = _col2im(gcols, ctx.x_shape, kh, kw, ctx.stride, ctx.padding)
    _finite_or_raise("conv2d_backward", gx)
    return gx, wgrads


# ---------------------------------------------------------------------------
# Transposed convolution
# ---------------------------------------------------------------------------
#
# Decomposed by output phase: rows a with a common (a + padding) mod stride
# receive contributions from a fixed subset of kernel taps, so each of the
# stride^2 phases is an ordinary stride-1 correlation of the input with a
# flipped sub-kernel.  Phases with equal sub-kernel extent share one unfold
# and one stacked GEMM; outputs interleave into the upsampled grid without
# any scatter-add.

@dataclass
class _PhaseSpec:
    taps_u: tuple[int, ...]
    taps_v: tuple[int, ...]
    a0: int
    b0: int
    A0: int
    B0: int
    na: int
    nb: int


@dataclass
class _PhaseGroup:
    mu: int
    mv: int
    corr_hw: tuple[int, int]
    phases: list
    cols: Array


@dataclass
class ConvTransposeCtx:
    x_shape: tuple
    weight: Array
    stride: int
    padding: int
    out_hw: tuple[int, int]
    groups: list


def _phase_specs(kh, kw, stride, padding, hh, ww):
    def axis(k, size):
        specs = []
        for q in range(stride):
            taps = tuple(u for u in range(k) if u % stride == q)
            if not taps:
                continue
            start = (q - padding) % stride
            if start >= size:
                continue
            count = (size - start + stride - 1) // stride
            first = (start + padding - q) // stride
            specs.append((taps, start, first, count))
        return specs

    return axis(kh, hh), axis(kw, ww)


def _phase_weight(weight: Array, spec: _PhaseSpec) -> Array:
    # [Cin, Cout, mu, mv] sub-kernel, flipped, as a [Cout, Cin*mu*mv] GEMM row
    wsub = weight[:, :, spec.taps_u][:, :, :, spec.taps_v][:, :, ::-1, ::-1]
    cout = weight.shape[1]
    return np.ascontiguousarray(wsub.transpose(1, 0, 2, 3)).reshape(cout, -1)


def conv_transpose2d(x: Array, weight: Array, bias: Array | None, stride: int = 1,
                     padding: int = 0) -> tuple[Array, ConvTransposeCtx]:
    """Transposed convolution of ``x`` [N,Cin,H,W] with ``weight``
    [Cin,Cout,Kh,Kw]; inverts the shape map of conv2d at equal
    stride/padding/kernel: H'' = (H-1)*stride - 2*padding + Kh."""
    _validate_conv(x, weight, bias, stride, padding, transposed=True)
    _finite_or_raise("conv_transpose2d", x)
    n, cin, h, w = x.shape
    _, cout, kh, kw = weight.shape
    hh = (h - 1) * stride - 2 * padding + kh
    ww = (w - 1) * stride - 2 * padding + kw
    _require(hh >= 1 and ww >= 1,
             f"conv_transpose2d output {hh}x{ww} is empty for input "
             f"{h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}")
    u_specs, v_specs = _phase_specs(kh, kw, stride, padding, hh, ww)
    by_extent: dict[tuple[int, int], list[_PhaseSpec]] = {}
    for taps_u, a0, A0, na in u_specs:
        for taps_v, b0, B0, nb in v_specs:
            spec = _PhaseSpec(taps_u, taps_v, a0, b0, A0, B0, na, nb)
            by_extent.setdefault((len(taps_u), len(taps_v)), []).append(spec)

    y = np.zeros((n, cout, hh, ww), dtype=x.dtype)
    groups = []
    for (mu, mv), specs in by_extent.items():
        xpad = np.pad(x, ((0, 0), (0, 0), (mu - 1, mu - 1), (mv - 1, mv - 1)))
        cols, corr_hw = _im2col(xpad, mu, mv, 1, 0)
        wstack = np.concatenate([_phase_weight(weight, s) for s in specs])
        corr = (wstack @ cols).reshape(len(specs), cout, n, *corr_hw)
        for k, s in enumerate(specs):
            y[:, :, s.a0::stride, s.b0::stride] = \
                corr[k, :, :, s.A0:s.A0 + s.na, s.B0:s.B0 + s.nb].transpose(1, 0, 2, 3)
        groups.append(_PhaseGroup(mu, mv, corr_hw, specs, cols))
    if bias is not None:
        y += bias[None, :, None, None]
    _finite_or_raise("conv_transpose2d", y)
    return y, ConvTransposeCtx(x.shape, weight, stride, padding, (hh, ww), groups)


def conv_transpose2d_backward(ctx: ConvTransposeCtx, grad_out: Array) -> tuple[Array, Array, Array]:
    n, cin, h, w = ctx.x_shape
    weight, stride = ctx.weight, ctx.stride
    cout = weight.shape[1]
    hh, ww = ctx.out_hw
    _require(grad_out.shape == (n, cout, hh, ww),
             f"grad_out shape {grad_out.shape} does not match forward output "
             f"{(n, cout, hh, ww)}")
    gb = grad_out.sum(axis=(0, 2, 3))
    gx = np.zeros(ctx.x_shape, dtype=grad_out.dtype)
    gw = np.zeros_like(weight)
    for grp in ctx.groups:
        ch, cw = grp.corr_hw
        gcorr = np.zeros((len(grp.phases), cout, n, ch, cw), dtype=grad_out.dtype)
        for k, s in enumerate(grp.phases):
            gcorr[k, :, :, s.A0:s.A0 + s.na, s.B0:s.B0 + s.nb] = \
                grad_out[:, :, s.a0::stride, s.b0::stride].transpose(1, 0, 2, 3)
        gstack = gcorr.reshape(len(grp.phases) * cout, -1)
        wstack = np.concatenate([_phase_weight(weight, s) for s in grp.phases])
        gwstack = (gstack @ grp.cols.T).reshape(len(grp.phases), cout, cin,
                                                grp.mu, grp.mv)
        for k, s in enumerate(grp.phases):
            gsub = gwstack[k].transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
            gw[:, :, np.asarray(s.taps_u)[:, None], np.asarray(s.taps_v)[None, :]] += gsub
        gxpad = _col2im(wstack.T @ gstack,
                        (n, cin, h + 2 * (grp.mu - 1), w + 2 * (grp.mv - 1)),
                        grp.mu, grp.mv, 1, 0)
        gx += gxpad[:, :, grp.mu - 1:grp.mu - 1 + h, grp.mv - 1:grp.mv - 1 + w]
    _finite_or_raise("conv_transpose2d_backward", gx)
    return gx, gw, gb


# ---------------------------------------------------------------------------
# Group normalization
# ---------------------------------------------------------------------------

@dataclass
class GroupNormCtx:
    x_hat: Array
    inv_std: Array  # [N, G, 1]
    gamma: Array
    num_groups: int


def group_norm(x: Array, num_groups: int, gamma: Array, beta: Array,
               eps: float = 1e-5) -> tuple[Array, GroupNormCtx]:
    """Normalize each (sample, channel-group) to zero mean / unit variance,
    then apply the per-channel affine gamma * x_hat + beta."""
    _require(x.ndim == 4, f"group_norm input must be N,C,H,W, got {x.shape}")
    n, c, h, w = x.shape
    _require(num_groups >= 1 and c % num_groups == 0,
             f"channels {c} not divisible by num_groups {num_groups}")
    _require(gamma.shape == (c,) and beta.shape == (c,),
             f"gamma/beta must have shape ({c},)")
    _require(eps > 0, "eps must be positive")
    _finite_or_raise("group_norm", x)
    xg = x.reshape(n, num_groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    centered = xg - mean
    var = np.einsum("ngk,ngk->ng", centered, centered)[..., None]
    var /= centered.shape[2]
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    centered *= inv_std
    x_hat = centered.reshape(n, c, h, w)
    out = x_hat * gamma[:, None, None]
    out += beta[:, None, None]
    _finite_or_raise("group_norm", out)
    return out, GroupNormCtx(x_hat, inv_std, gamma, num_groups)


def group_norm_backward(ctx: GroupNormCtx, grad_out: Array) -> tuple[Array, Array, Array]:
    x_hat, inv_std, gamma, g = ctx.x_hat, ctx.inv_std, ctx.gamma, ctx.num_groups
    n, c, h, w = x_hat.shape
    _require(grad_out.shape == x_hat.shape,
             f"grad_out shape {grad_out.shape} does not match {x_hat.shape}")
    ggamma = np.einsum("nchw,nchw->c", grad_out, x_hat)
    gbeta = grad_out.sum(axis=(0, 2, 3))
    gxhat = (grad_out * gamma[:, None, None]).reshape(n, g, -1)
    xh = x_hat.reshape(n, g, -1)
    count = gxhat.shape[2]
    m1 = gxhat.mean(axis=2, keepdims=True)
    m2 = np.einsum("ngk,ngk->ng", gxhat, xh)[..., None]
    m2 /= count
    gxhat -= m1
    gxhat -= xh * m2
    gxhat *= inv_std
    gx = gxhat.reshape(n, c, h, w)
    _finite_or_raise("group_norm_backward", gx)
    return gx, ggamma, gbeta


def groups_for(channels: int, channels_per_group: int) -> int:
    """Group count under the fixed channels-per-group rule; falls back to a
    single group when the count does not divide (tiny test configurations)."""
    if channels_per_group >= 1 and channels % channels_per_group == 0:
        return channels // channels_per_group
    return 1


# ---------------------------------------------------------------------------
# Elementwise kernels
# ---------------------------------------------------------------------------

@dataclass
class ElementwiseCtx:
    kind: str
    saved: tuple


def sigmoid(x: Array) -> tuple[Array, ElementwiseCtx]:
    _finite_or_raise("sigmoid", x)
    z = np.exp(-np.abs(x))
    t = 1.0 / (1.0 + z)
    out = np.where(x >= 0, t, 1.0 - t).astype(x.dtype, copy=False)
    return out, ElementwiseCtx("sigmoid", (out,))


def tanh(x: Array) -> tuple[Array, ElementwiseCtx]:
    _finite_or_raise("tanh", x)
    out = np.tanh(x)
    return out, ElementwiseCtx("tanh", (out,))


def add(a: Array, b: Array) -> tuple[Array, ElementwiseCtx]:
    _require(a.shape == b.shape, f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b, ElementwiseCtx("add", ())


def hadamard(a: Array, b: Array) -> tuple[Array, ElementwiseCtx]:
    _require(a.shape == b.shape, f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    return a * b, ElementwiseCtx("hadamard", (a, b))


def elementwise(kind: str, a: Array, b: Array | None = None) -> tuple[Array, ElementwiseCtx]:
    """Dispatcher over the elementwise kernel set {sigmoid, tanh, add, hadamard}."""
    if kind in ("sigmoid", "tanh"):
        _require(b is None, f"{kind} is unary")
        return (sigmoid if kind == "sigmoid" else tanh)(a)
    if kind in ("add", "hadamard"):
        _require(b is not None, f"{kind} requires two operands")
        return (add if kind == "add" else hadamard)(a, b)
    raise ValueError(f"unknown elementwise kind: {kind!r}")


def elementwise_backward(ctx: ElementwiseCtx, grad_out: Array):
    """Returns the gradient(s) matching the forward operand list."""
    if ctx.kind == "sigmoid":
        (out,) = ctx.saved
        return grad_out * out * (1.0 - out)
    if ctx.kind == "tanh":
        (out,) = ctx.saved
        return grad_out * (1.0 - out * out)
    if ctx.kind == "add":
        return grad_out, grad_out
    if ctx.kind == "hadamard":
        a, b = ctx.saved
        return grad_out * b, grad_out * a
    raise ValueError(f"unknown elementwise kind: {ctx.kind!r}")


# ---------------------------------------------------------------------------
# Channel concat / split
# ---------------------------------------------------------------------------

@dataclass
class ConcatCtx:
    sizes: tuple[int, ...]


def concat_channels(parts: list[Array]) -> tuple[Array, ConcatCtx]:
    _require(len(parts) >= 1, "concat_channels requires at least one part")
    first = parts[0]
    for p in parts[1:]:
        _require(p.ndim == 4 and p.shape[0] == first.shape[0]
                 and p.shape[2:] == first.shape[2:],
                 f"concat_channels parts disagree: {first.shape} vs {p.shape}")
    out = np.concatenate(parts, axis=1) if len(parts) > 1 else parts[0]
    return out, ConcatCtx(tuple(p.shape[1] for p in parts))


def concat_channels_backward(ctx: ConcatCtx, grad_out: Array) -> list[Array]:
    return split_channels(grad_out, list(ctx.sizes))


def split_channels(x: Array, sizes: list[int]) -> list[Array]:
    _require(sum(sizes) == x.shape[1],
             f"split sizes {sizes} do not sum to {x.shape[1]} channels")
    bounds = np.cumsum([0] + list(sizes))
    return [x[:, bounds[i]:bounds[i + 1]] for i in range(len(sizes))]


def split_channels_backward(grads: list[Array]) -> Array:
    out, _ = concat_channels(list(grads))
    return out
