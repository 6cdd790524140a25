"""Star-shaped information bridge across recurrent layers.

At each time-step the hidden outputs of all L layers are concatenated,
passed through a group-normalized 1x1 convolution, and split back into L
residuals that are added to every layer's input at the next time-step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .params import Param, conv_weight, ones, zeros

Array = np.ndarray

# A bridge state is the list of per-layer residual tensors, or None at t=0.
BridgeState = "list[Array] | None"


@dataclass
class BridgeParams:
    W1: Param  # [L*Chid, L*Chid, 1, 1]
    b1: Param
    gamma: Param
    beta: Param
    groups: int
    layers: int

    @property
    def hidden_channels(self) -> int:
        return self.W1.shape[0] // self.layers

    def named(self, prefix: str):
        for field in ("W1", "b1", "gamma", "beta"):
            yield f"{prefix}.{field}", getattr(self, field)


def init_bridge_params(rng: np.random.Generator, layers: int, chid: int,
                       channels_per_group: int = 16, dtype=np.float32) -> BridgeParams:
    total = layers * chid
    return BridgeParams(
        W1=conv_weight(rng, total, total, 1, 1, dtype),
        b1=zeros(total, dtype),
        gamma=ones(total, dtype),
        beta=zeros(total, dtype),
        groups=K.groups_for(total, channels_per_group),
        layers=layers,
    )


@dataclass
class BridgeCtx:
    concat_ctx: K.ConcatCtx
    conv_ctx: K.ConvCtx
    gn_ctx: K.GroupNormCtx
    chid: int
    layers: int


def bridge_step(hidden: list[Array], p: BridgeParams) -> tuple[list[Array], BridgeCtx]:
    """Fuse all layers' hidden outputs into per-layer residuals for t+1."""
    if len(hidden) != p.layers:
        raise ValueError(f"bridge built for {p.layers} layers, got {len(hidden)}")
    stacked, concat_ctx = K.concat_channels(list(hidden))
    z_pre, conv_ctx = K.conv2d(stacked, p.W1.data, p.b1.data, stride=1, padding=0)
    z, gn_ctx = K.group_norm(z_pre, p.groups, p.gamma.data, p.beta.data)
    chid = p.hidden_channels
    residuals = [np.ascontiguousarray(r) for r in K.split_channels(z, [chid] * p.layers)]
    return residuals, BridgeCtx(concat_ctx, conv_ctx, gn_ctx, chid, p.layers)


def bridge_backward(ctx: BridgeCtx, grad_residuals: list[Array],
                    p: BridgeParams) -> list[Array]:
    """Accumulate bridge parameter gradients and return per-layer hidden grads."""
    gz = K.split_channels_backward(list(grad_residuals))
    gz_pre, ggamma, gbeta = K.group_norm_backward(ctx.gn_ctx, gz)
    gstacked, gW1, gb1 = K.conv2d_backward(ctx.conv_ctx, gz_pre)
    p.W1.grad += gW1
    p.b1.grad += gb1
    p.gamma.grad += ggamma
    p.beta.grad += gbeta
    return K.concat_channels_backward(ctx.concat_ctx, gstacked)


def apply_bridge(layer_inputs: list[Array], state) -> list[Array]:
    """Add the previous step's residuals to this step's layer inputs.

    An empty (None) state is the identity; the backward of the add routes the
    output gradient unchanged to both the input and the residual.
    """
    if state is None:
        return list(layer_inputs)
    if len(state) != len(layer_inputs):
        raise ValueError(f"{len(state)} residuals for {len(layer_inputs)} layer inputs")
    out = []
    for x, r in zip(layer_inputs, state):
        if x.shape != r.shape:
            raise ValueError(f"residual shape {r.shape} does not match input {x.shape}")
        out.append(x + r)
    return out
