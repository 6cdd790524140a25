"""Full sequence-to-sequence nowcasting network.

Pipeline: a resize-in stack (two stride-2 convolutions plus one stride-1
convolution, each group-normalized with a tanh nonlinearity) maps frames to
quarter-resolution features; the input statistics route the sequence to one
of three bridged ConvLSTM encoder columns; the encoder's final cell states
and bridge residuals seed a shared bridged ConvLSTM decoder that runs
autoregressively in feature space; a mirrored transposed-convolution stack
and a sigmoid 1x1 head map each decoded feature back to a full-resolution
frame in (0, 1).

Forward functions return explicit context tapes; ``backward_batch`` walks
them in reverse and accumulates parameter gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import bridge as B
from . import convlstm as C
from . import kernels as K
from .data import RadarSequence, Route, RouteThresholds, route as route_frames
from .params import Param, conv_weight, deconv_weight, ones, zeros

Array = np.ndarray

ROUTE_COLUMN = {Route.LIGHT: 0, Route.MODERATE: 1, Route.HEAVY: 2}
DOWNSAMPLE = 4  # two stride-2 resize convolutions


@dataclass
class NetworkConfig:
    input_hw: tuple[int, int] = (32, 32)
    layers: int = 2
    hidden_channels: tuple[int, ...] = (32, 32)
    cell_kernel: tuple[int, int] = (3, 3)
    context: int = 10
    horizon: int = 10
    channels_per_group: int = 16
    thresholds: RouteThresholds = field(
        default_factory=lambda: RouteThresholds(0.05, 0.004, 0.12, 0.02))
    use_bridge: bool = True
    columns: int = 3

    def __post_init__(self):
        h, w = self.input_hw
        if h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise ValueError(f"input size {self.input_hw} must be divisible by {DOWNSAMPLE}")
        if self.context < 1 or self.horizon < 1:
            raise ValueError("context and horizon must be >= 1")
        if len(self.hidden_channels) != self.layers:
            raise ValueError(f"{self.layers} layers need {self.layers} channel counts")
        if len(set(self.hidden_channels)) != 1:
            raise ValueError("hidden channel counts must be uniform across layers "
                             "(bridge residuals are added to every layer input)")
        if self.columns not in (1, 3):
            raise ValueError(f"columns must be 1 or 3, got {self.columns}")

    @property
    def feature_channels(self) -> int:
        return self.hidden_channels[0]

    @property
    def feature_hw(self) -> tuple[int, int]:
        return (self.input_hw[0] // DOWNSAMPLE, self.input_hw[1] // DOWNSAMPLE)


def paper_scale_config(**overrides) -> NetworkConfig:
    """The full-scale configuration: 100x100 frames, 2 layers of 64 filters."""
    base = dict(input_hw=(100, 100), layers=2, hidden_channels=(64, 64))
    base.update(overrides)
    return NetworkConfig(**base)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class ConvBlockParams:
    """One resize block: (transposed) convolution + group norm + tanh."""
    W: Param
    b: Param
    gamma: Param
    beta: Param
    stride: int
    padding: int
    transposed: bool
    groups: int

    def named(self, prefix: str):
        for name in ("W", "b", "gamma", "beta"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class StackParams:
    cells: list[C.ConvLSTMParams]
    bridge: B.BridgeParams | None

    def named(self, prefix: str):
        for i, cell in enumerate(self.cells):
            yield from cell.named(f"{prefix}.cell{i}")
        if self.bridge is not None:
            yield from self.bridge.named(f"{prefix}.bridge")


@dataclass
class ModelParams:
    resize_in: list[ConvBlockParams]
    resize_out: list[ConvBlockParams]
    head_w: Param
    head_b: Param
    encoders: list[StackParams]
    decoder: StackParams

    def named(self):
        for i, blk in enumerate(self.resize_in):
            yield from blk.named(f"resize_in.{i}")
        for i, blk in enumerate(self.resize_out):
            yield from blk.named(f"resize_out.{i}")
        yield "head.W", self.head_w
        yield "head.b", self.head_b
        for i, enc in enumerate(self.encoders):
            yield from enc.named(f"encoder{i}")
        yield from self.decoder.named("decoder")

    def zero_grads(self):
        for _, p in self.named():
            p.zero_grad()


def _init_stack(rng, cfg: NetworkConfig, dtype) -> StackParams:
    cells = []
    cin = cfg.feature_channels
    for chid in cfg.hidden_channels:
        cells.append(C.init_cell_params(rng, cin, chid, cfg.cell_kernel,
                                        cfg.channels_per_group, dtype))
        cin = chid
    bridge = (B.init_bridge_params(rng, cfg.layers, cfg.hidden_channels[0],
                                   cfg.channels_per_group, dtype)
              if cfg.use_bridge else None)
    return StackParams(cells=cells, bridge=bridge)


def init_model_params(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD06)))
    cpg = cfg.channels_per_group
    c = cfg.feature_channels

    def block(cin, cout, k, stride, pad, transposed=False):
        w = (deconv_weight(rng, cin, cout, k, k, dtype) if transposed
             else conv_weight(rng, cout, cin, k, k, dtype))
        return ConvBlockParams(W=w, b=zeros(cout, dtype), gamma=ones(cout, dtype),
                               beta=zeros(cout, dtype), stride=stride, padding=pad,
                               transposed=transposed, groups=K.groups_for(cout, cpg))

    resize_in = [block(1, c, 4, 2, 1), block(c, c, 4, 2, 1), block(c, c, 3, 1, 1)]
    resize_out = [block(c, c, 3, 1, 1, transposed=True),
                  block(c, c, 4, 2, 1, transposed=True),
                  block(c, c, 4, 2, 1, transposed=True)]
    head_w = conv_weight(rng, 1, c, 1, 1, dtype)
    head_b = zeros(1, dtype)
    encoders = [_init_stack(rng, cfg, dtype) for _ in range(cfg.columns)]
    decoder = _init_stack(rng, cfg, dtype)
    return ModelParams(resize_in=resize_in, resize_out=resize_out,
                       head_w=head_w, head_b=head_b,
                       encoders=encoders, decoder=decoder)


# ---------------------------------------------------------------------------
# Resize stacks
# ---------------------------------------------------------------------------

@dataclass
class BlockCtx:
    conv_ctx: object
    gn_ctx: K.GroupNormCtx
    out: Array  # tanh output


def _block_forward(x: Array, blk: ConvBlockParams) -> tuple[Array, BlockCtx]:
    if blk.transposed:
        pre, conv_ctx = K.conv_transpose2d(x, blk.W.data, blk.b.data,
                                           blk.stride, blk.padding)
    else:
        pre, conv_ctx = K.conv2d(x, blk.W.data, blk.b.data, blk.stride, blk.padding)
    normed, gn_ctx = K.group_norm(pre, blk.groups, blk.gamma.data, blk.beta.data)
    out = np.tanh(normed)
    return out, BlockCtx(conv_ctx, gn_ctx, out)


def _block_backward(ctx: BlockCtx, grad: Array, blk: ConvBlockParams) -> Array:
    g = grad * (1.0 - ctx.out * ctx.out)
    g, ggamma, gbeta = K.group_norm_backward(ctx.gn_ctx, g)
    if blk.transposed:
        gx, gw, gb = K.conv_transpose2d_backward(ctx.conv_ctx, g)
    else:
        gx, gw, gb = K.conv2d_backward(ctx.conv_ctx, g)
    blk.W.grad += gw
    blk.b.grad += gb
    blk.gamma.grad += ggamma
    blk.beta.grad += gbeta
    return gx


def resize_in_forward(frames: Array, params: ModelParams) -> tuple[Array, list[BlockCtx]]:
    """Map [N,1,H,W] frames to [N,C,H/4,W/4] features."""
    x, ctxs = frames, []
    for blk in params.resize_in:
        x, ctx = _block_forward(x, blk)
        ctxs.append(ctx)
    return x, ctxs


def resize_in_backward(ctxs: list[BlockCtx], grad: Array, params: ModelParams) -> Array:
    for blk, ctx in zip(reversed(params.resize_in), reversed(ctxs)):
        grad = _block_backward(ctx, grad, blk)
    return grad


@dataclass
class ResizeOutCtx:
    block_ctxs: list[BlockCtx]
    head_conv_ctx: K.ConvCtx
    sig_out: Array


def resize_out_forward(features: Array, params: ModelParams) -> tuple[Array, ResizeOutCtx]:
    """Map [N,C,h,w] features to [N,1,H,W] predicted frames in (0, 1)."""
    x, ctxs = features, []
    for blk in params.resize_out:
        x, ctx = _block_forward(x, blk)
        ctxs.append(ctx)
    logits, head_ctx = K.conv2d(x, params.head_w.data, params.head_b.data, 1, 0)
    out, _ = K.sigmoid(logits)
    return out, ResizeOutCtx(ctxs, head_ctx, out)


def resize_out_backward(ctx: ResizeOutCtx, grad: Array, params: ModelParams) -> Array:
    g = grad * ctx.sig_out * (1.0 - ctx.sig_out)
    g, gw, gb = K.conv2d_backward(ctx.head_conv_ctx, g)
    params.head_w.grad += gw
    params.head_b.grad += gb
    for blk, bctx in zip(reversed(params.resize_out), reversed(ctx.block_ctxs)):
        g = _block_backward(bctx, g, blk)
    return g


# ---------------------------------------------------------------------------
# Bridged stack steps
# ---------------------------------------------------------------------------

@dataclass
class StepCtx:
    cell_ctxs: list[C.CellCtx]
    bridge_ctx: B.BridgeCtx | None
    applied_bridge: bool


def _stack_step(x_in: Array, states: list[C.CellState], bridge_state,
                stack: StackParams, compute_bridge: bool):
    new_states: list[C.CellState] = []
    cell_ctxs: list[C.CellCtx] = []
    inp = x_in
    for l, cell in enumerate(stack.cells):
        if l > 0:
            inp = new_states[l - 1].h
        if bridge_state is not None:
            inp = inp + bridge_state[l]
        state, ctx = C.cell_step(inp, states[l], cell)
        new_states.append(state)
        cell_ctxs.append(ctx)
    new_bridge, bridge_ctx = (None, None)
    if stack.bridge is not None and compute_bridge:
        new_bridge, bridge_ctx = B.bridge_step([s.h for s in new_states], stack.bridge)
    step_ctx = StepCtx(cell_ctxs, bridge_ctx, applied_bridge=bridge_state is not None)
    return new_states, new_bridge, step_ctx


def _stack_step_backward(ctx: StepCtx, gh: list[Array], gc: list[Array],
                         g_next_residuals, stack: StackParams):
    """Backward one step.  ``gh``/``gc`` hold grads wrt this step's new states
    (mutated in place); ``g_next_residuals`` are grads wrt the bridge output
    computed at this step.  Returns (gx_in, gh_prev, gc_prev, g_residuals_in).
    """
    if g_next_residuals is not None:
        ghidden = B.bridge_backward(ctx.bridge_ctx, g_next_residuals, stack.bridge)
        for l in range(len(gh)):
            gh[l] = gh[l] + ghidden[l]
    n_layers = len(stack.cells)
    g_residuals_in = [None] * n_layers if ctx.applied_bridge else None
    gx_in = None
    for l in reversed(range(n_layers)):
        gx_l, gh_prev_l, gc_prev_l = C.cell_backward(ctx.cell_ctxs[l], gh[l], gc[l],
                                                     stack.cells[l])
        if ctx.applied_bridge:
            g_residuals_in[l] = gx_l
        if l > 0:
            gh[l - 1] = gh[l - 1] + gx_l
        else:
            gx_in = gx_l
        gh[l], gc[l] = gh_prev_l, gc_prev_l
    return gx_in, gh, gc, g_residuals_in


def run_encoder(features: list[Array], stack: StackParams, cfg: NetworkConfig):
    """Run T bridged steps over per-step features; returns final states, the
    final bridge state, and the step tape."""
    n = features[0].shape[0]
    dtype = features[0].dtype
    states = [C.zero_state(n, chid, cfg.feature_hw, dtype)
              for chid in cfg.hidden_channels]
    bridge_state = None
    tape = []
    for x in features:
        states, bridge_state, ctx = _stack_step(x, states, bridge_state, stack,
                                                compute_bridge=True)
        tape.append(ctx)
    return states, bridge_state, tape


def run_encoder_backward(tape, gh, gc, g_final_residuals, stack: StackParams):
    """Returns per-step feature gradients (list of T arrays)."""
    g_feats = [None] * len(tape)
    g_next = g_final_residuals
    for t in reversed(range(len(tape))):
        gx, gh, gc, g_next = _stack_step_backward(tape[t], gh, gc, g_next, stack)
        g_feats[t] = gx
    return g_feats


def run_decoder(states, bridge_state, first_input: Array, steps: int,
                stack: StackParams):
    """Autoregressive decode: step 1 consumes ``first_input``; later steps
    consume the previous step's top-layer output.  Returns top-layer outputs."""
    if steps < 1:
        raise ValueError(f"decoder steps must be >= 1, got {steps}")
    outputs = []
    tape = []
    x = first_input
    for k in range(steps):
        # The bridge at the last step would never be consumed; skip it.
        states, bridge_state, ctx = _stack_step(x, states, bridge_state, stack,
                                                compute_bridge=(k < steps - 1))
        x = states[-1].h
        outputs.append(x)
        tape.append(ctx)
    return outputs, tape


def run_decoder_backward(tape, g_outputs, stack: StackParams, state_shapes):
    """Returns (g_first_input, gh_init, gc_init, g_init_residuals)."""
    n_layers = len(stack.cells)
    gh = [np.zeros(s, dtype=g_outputs[0].dtype) for s in state_shapes]
    gc = [np.zeros(s, dtype=g_outputs[0].dtype) for s in state_shapes]
    g_next = None
    g_first = None
    for k in reversed(range(len(tape))):
        gh[n_layers - 1] = gh[n_layers - 1] + g_outputs[k]
        gx, gh, gc, g_res = _stack_step_backward(tape[k], gh, gc, g_next, stack)
        if k > 0:
            gh[n_layers - 1] = gh[n_layers - 1] + gx
        else:
            g_first = gx
        g_next = g_res
    return g_first, gh, gc, g_next


# ---------------------------------------------------------------------------
# Spec-facing wrappers
# ---------------------------------------------------------------------------

def column_index(r: Route, cfg: NetworkConfig) -> int:
    return 0 if cfg.columns == 1 else ROUTE_COLUMN[r]


def encode(features: list[Array], column: Route, params: ModelParams,
           cfg: NetworkConfig):
    """Encode per-step features with the routed column; returns the final
    per-layer states and the final bridge state."""
    stack = params.encoders[column_index(column, cfg)]
    states, bridge_state, _ = run_encoder(features, stack, cfg)
    return states, bridge_state


def decode(init_states, init_bridge, first_input: Array, steps: int,
           params: ModelParams, cfg: NetworkConfig):
    outputs, _ = run_decoder(init_states, init_bridge, first_input, steps,
                             params.decoder)
    return outputs


# ---------------------------------------------------------------------------
# End-to-end batch forward / backward
# ---------------------------------------------------------------------------

@dataclass
class BatchTape:
    rin_ctxs: list
    group_slices: list          # (column_idx, batch_positions, enc_tape)
    perm: Array
    dec_tape: list
    rout_ctx: ResizeOutCtx
    feat_shape: tuple
    state_shapes: list


def forward_batch(frames: Array, routes: list[Route], params: ModelParams,
                  cfg: NetworkConfig) -> tuple[Array, BatchTape]:
    """Forward a [B, T, H, W] context batch to [B, L, H, W] predictions.

    Samples are grouped by route so each encoder column runs once per group;
    the shared decoder and resize stacks run on the regrouped full batch.
    """
    b, t, h, w = frames.shape
    if t != cfg.context:
        raise ValueError(f"expected {cfg.context} context frames, got {t}")
    if (h, w) != tuple(cfg.input_hw):
        raise ValueError(f"expected {cfg.input_hw} frames, got {(h, w)}")
    feats_flat, rin_ctxs = resize_in_forward(
        frames.reshape(b * t, 1, h, w), params)
    fc = cfg.feature_channels
    fh, fw = cfg.feature_hw
    feats = feats_flat.reshape(b, t, fc, fh, fw)

    order: dict[int, list[int]] = {}
    for i, r in enumerate(routes):
        order.setdefault(column_index(r, cfg), []).append(i)

    group_slices = []
    perm: list[int] = []
    merged_states = None
    merged_bridge = None
    for col in sorted(order):
        idx = order[col]
        sub = feats[idx]  # [Bg, T, C, fh, fw]
        features = [np.ascontiguousarray(sub[:, step]) for step in range(t)]
        states, bridge_state, enc_tape = run_encoder(features, params.encoders[col], cfg)
        group_slices.append((col, idx, enc_tape))
        perm.extend(idx)
        if merged_states is None:
            merged_states = [C.CellState(s.h, s.c) for s in states]
            merged_bridge = bridge_state
        else:
            merged_states = [
                C.CellState(np.concatenate([m.h, s.h]), np.concatenate([m.c, s.c]))
                for m, s in zip(merged_states, states)]
            if merged_bridge is not None:
                merged_bridge = [np.concatenate([m, s])
                                 for m, s in zip(merged_bridge, bridge_state)]
    perm = np.asarray(perm)

    first_input = np.ascontiguousarray(feats[perm, t - 1])
    state_shapes = [s.h.shape for s in merged_states]
    outputs, dec_tape = run_decoder(merged_states, merged_bridge, first_input,
                                    cfg.horizon, params.decoder)
    stacked = np.concatenate(outputs, axis=0)  # [L*B, C, fh, fw] step-major
    pred_flat, rout_ctx = resize_out_forward(stacked, params)
    pred = pred_flat.reshape(cfg.horizon, b, h, w).transpose(1, 0, 2, 3)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(b)
    pred = np.ascontiguousarray(pred[inv])
    tape = BatchTape(rin_ctxs, group_slices, perm, dec_tape, rout_ctx,
                     feats.shape, state_shapes)
    return pred, tape


def backward_batch(tape: BatchTape, grad_pred: Array, params: ModelParams,
                   cfg: NetworkConfig) -> Array:
    """Accumulate parameter gradients for a forward_batch call; returns the
    gradient with respect to the input frames [B, T, H, W]."""
    b, t = tape.feat_shape[0], tape.feat_shape[1]
    h, w = cfg.input_hw
    gp = grad_pred[tape.perm].transpose(1, 0, 2, 3).reshape(cfg.horizon * b, 1, h, w)
    g_stacked = resize_out_backward(tape.rout_ctx, np.ascontiguousarray(gp), params)
    g_outputs = [g_stacked[k * b:(k + 1) * b] for k in range(cfg.horizon)]
    g_first, gh, gc, g_res = run_decoder_backward(tape.dec_tape, g_outputs,
                                                  params.decoder, tape.state_shapes)
    g_feats = np.zeros(tape.feat_shape, dtype=grad_pred.dtype)
    g_feats[tape.perm, t - 1] += g_first
    offset = 0
    for col, idx, enc_tape in tape.group_slices:
        size = len(idx)
        gh_g = [g[offset:offset + size] for g in gh]
        gc_g = [g[offset:offset + size] for g in gc]
        g_res_g = ([r[offset:offset + size] for r in g_res]
                   if g_res is not None else None)
        g_step = run_encoder_backward(enc_tape, gh_g, gc_g, g_res_g,
                                      params.encoders[col])
        for step in range(t):
            g_feats[idx, step] += g_step[step]
        offset += size
    fc, fh, fw = tape.feat_shape[2:]
    g_frames = resize_in_backward(tape.rin_ctxs, g_feats.reshape(b * t, fc, fh, fw),
                                  params)
    return g_frames.reshape(b, t, h, w)


# ---------------------------------------------------------------------------
# Prediction and baseline
# ---------------------------------------------------------------------------

def predict(seq, params: ModelParams, cfg: NetworkConfig) -> Array:
    """Predict the next ``cfg.horizon`` frames for one context sequence.

    The sequence is routed by its own (mu, delta) statistics; output frames
    are [L, H, W] with every value in (0, 1).
    """
    frames = seq.frames if isinstance(seq, RadarSequence) else np.asarray(seq)
    if frames.shape[0] != cfg.context:
        raise ValueError(f"predict requires exactly {cfg.context} frames, "
                         f"got {frames.shape[0]}")
    if frames.shape[1:] != tuple(cfg.input_hw):
        raise ValueError(f"frame size {frames.shape[1:]} does not match "
                         f"configured {cfg.input_hw}")
    r = route_frames(frames, cfg.thresholds)
    dtype = params.head_w.dtype
    pred, _ = forward_batch(frames[None].astype(dtype, copy=False), [r], params, cfg)
    return pred[0]


def persistence_baseline(seq, horizon: int) -> Array:
    """Repeat the last observed frame ``horizon`` times (no-skill reference)."""
    frames = seq.frames if isinstance(seq, RadarSequence) else np.asarray(seq)
    if frames.shape[0] < 1:
        raise ValueError("persistence baseline needs at least one frame")
    return np.repeat(frames[-1][None], horizon, axis=0)
