"""One convolutional-LSTM cell step with group-normalized gate convolutions.

The cell keeps a ``(h, c)`` state and, per step, computes

    f, i, o = sigmoid(GN(conv([x, h_prev]; Wg) + bg))     (joint 3-gate conv)
    c       = f * c_prev + i * tanh(GN(conv([x, h_prev]; Wc) + bc))
    h       = o * tanh(c)

Gate slices are ordered (f, i, o) inside the joint convolution.  Both inner
convolutions are stride-1 "same" convolutions; normalization statistics are
per time-step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .params import Param, conv_weight, ones, zeros

Array = np.ndarray


@dataclass
class ConvLSTMParams:
    """Parameters of one cell: joint gate conv (3*Chid out), candidate conv
    (Chid out), and the affine parameters of their group normalizations."""

    Wg: Param
    bg: Param
    gn_g_gamma: Param
    gn_g_beta: Param
    Wc: Param
    bc: Param
    gn_c_gamma: Param
    gn_c_beta: Param
    groups_g: int
    groups_c: int

    @property
    def hidden_channels(self) -> int:
        return self.Wc.shape[0]

    @property
    def in_channels(self) -> int:
        return self.Wg.shape[1] - self.hidden_channels

    @property
    def kernel(self) -> tuple[int, int]:
        return (self.Wg.shape[2], self.Wg.shape[3])

    @property
    def padding(self) -> int:
        return (self.Wg.shape[2] - 1) // 2

    def named(self, prefix: str):
        for field in ("Wg", "bg", "gn_g_gamma", "gn_g_beta",
                      "Wc", "bc", "gn_c_gamma", "gn_c_beta"):
            yield f"{prefix}.{field}", getattr(self, field)


@dataclass
class CellState:
    h: Array
    c: Array


def init_cell_params(rng: np.random.Generator, cin: int, chid: int,
                     kernel: tuple[int, int] = (3, 3), channels_per_group: int = 16,
                     dtype=np.float32) -> ConvLSTMParams:
    kh, kw = kernel
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"cell kernel must be odd for 'same' padding, got {kernel}")
    return ConvLSTMParams(
        Wg=conv_weight(rng, 3 * chid, cin + chid, kh, kw, dtype),
        bg=zeros(3 * chid, dtype),
        gn_g_gamma=ones(3 * chid, dtype),
        gn_g_beta=zeros(3 * chid, dtype),
        Wc=conv_weight(rng, chid, cin + chid, kh, kw, dtype),
        bc=zeros(chid, dtype),
        gn_c_gamma=ones(chid, dtype),
        gn_c_beta=zeros(chid, dtype),
        groups_g=K.groups_for(3 * chid, channels_per_group),
        groups_c=K.groups_for(chid, channels_per_group),
    )


def zero_state(n: int, chid: int, hw: tuple[int, int], dtype=np.float32) -> CellState:
    h, w = hw
    return CellState(h=np.zeros((n, chid, h, w), dtype=dtype),
                     c=np.zeros((n, chid, h, w), dtype=dtype))


@dataclass
class CellCtx:
    conv_ctx: K.ConvCtx
    gn_joint_ctx: K.GroupNormCtx | None
    gn_g_ctx: K.GroupNormCtx | None
    gn_c_ctx: K.GroupNormCtx | None
    gates: Array       # sigmoid outputs, 3*Chid channels
    g: Array           # tanh candidate
    f: Array
    i: Array
    o: Array
    prev_c: Array
    tanh_c: Array
    cin: int


def _joint_groups(p: ConvLSTMParams) -> int:
    """Gate and candidate normalizations can share one group_norm call when
    both use the same channels-per-group (group statistics stay identical)."""
    chid = p.hidden_channels
    if (3 * chid) // p.groups_g == chid // p.groups_c:
        return p.groups_g + p.groups_c
    return 0


def cell_step(x: Array, prev: CellState, p: ConvLSTMParams) -> tuple[CellState, CellCtx]:
    chid = p.hidden_channels
    if x.shape[2:] != prev.h.shape[2:] or x.shape[0] != prev.h.shape[0]:
        raise ValueError(f"input {x.shape} and state {prev.h.shape} disagree "
                         "on batch or spatial size")
    if x.shape[1] != p.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, parameters expect "
                         f"{p.in_channels}")
    xh, _ = K.concat_channels([x, prev.h])
    # one joint convolution for the 3 gates plus the candidate
    wj = np.concatenate([p.Wg.data, p.Wc.data])
    bj = np.concatenate([p.bg.data, p.bc.data])
    pre, conv_ctx = K.conv2d(xh, wj, bj, stride=1, padding=p.padding)
    joint = _joint_groups(p)
    gn_joint_ctx = gn_g_ctx = gn_c_ctx = None
    if joint:
        gammaj = np.concatenate([p.gn_g_gamma.data, p.gn_c_gamma.data])
        betaj = np.concatenate([p.gn_g_beta.data, p.gn_c_beta.data])
        normed, gn_joint_ctx = K.group_norm(pre, joint, gammaj, betaj)
        g_norm, c_norm = normed[:, :3 * chid], normed[:, 3 * chid:]
    else:
        g_norm, gn_g_ctx = K.group_norm(pre[:, :3 * chid], p.groups_g,
                                        p.gn_g_gamma.data, p.gn_g_beta.data)
        c_norm, gn_c_ctx = K.group_norm(pre[:, 3 * chid:], p.groups_c,
                                        p.gn_c_gamma.data, p.gn_c_beta.data)
    gates, _ = K.sigmoid(g_norm)
    f, i, o = K.split_channels(gates, [chid, chid, chid])
    g = np.tanh(c_norm)
    c = f * prev.c + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    ctx = CellCtx(conv_ctx, gn_joint_ctx, gn_g_ctx, gn_c_ctx, gates, g, f, i, o,
                  prev.c, tanh_c, cin=x.shape[1])
    return CellState(h=h, c=c), ctx


def cell_backward(ctx: CellCtx, grad_h: Array, grad_c: Array,
                  p: ConvLSTMParams) -> tuple[Array, Array, Array]:
    """Accumulate parameter gradients into ``p`` and return
    (grad_x, grad_h_prev, grad_c_prev)."""
    chid = p.hidden_channels
    go = grad_h * ctx.tanh_c
    gc = grad_c + grad_h * ctx.o * (1.0 - ctx.tanh_c * ctx.tanh_c)
    gf = gc * ctx.prev_c
    gc_prev = gc * ctx.f
    gi = gc * ctx.g
    gg = gc * ctx.i

    g_cnorm = gg * (1.0 - ctx.g * ctx.g)
    ggates = np.concatenate([gf, gi, go], axis=1)
    g_gnorm = ggates * ctx.gates * (1.0 - ctx.gates)

    if ctx.gn_joint_ctx is not None:
        gnormed = np.concatenate([g_gnorm, g_cnorm], axis=1)
        g_pre, ggammaj, gbetaj = K.group_norm_backward(ctx.gn_joint_ctx, gnormed)
        ggamma_g, ggamma_c = ggammaj[:3 * chid], ggammaj[3 * chid:]
        gbeta_g, gbeta_c = gbetaj[:3 * chid], gbetaj[3 * chid:]
    else:
        g_gpre, ggamma_g, gbeta_g = K.group_norm_backward(ctx.gn_g_ctx, g_gnorm)
        g_cpre, ggamma_c, gbeta_c = K.group_norm_backward(ctx.gn_c_ctx, g_cnorm)
        g_pre = np.concatenate([g_gpre, g_cpre], axis=1)

    gxh, gwj, gbj = K.conv2d_backward(ctx.conv_ctx, g_pre)
    gx = gxh[:, :ctx.cin]
    gh_prev = gxh[:, ctx.cin:]

    p.Wg.grad += gwj[:3 * chid]
    p.bg.grad += gbj[:3 * chid]
    p.gn_g_gamma.grad += ggamma_g
    p.gn_g_beta.grad += gbeta_g
    p.Wc.grad += gwj[3 * chid:]
    p.bc.grad += gbj[3 * chid:]
    p.gn_c_gamma.grad += ggamma_c
    p.gn_c_beta.grad += gbeta_c
    return gx, gh_prev, gc_prev
