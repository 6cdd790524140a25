"""Finite-difference gradient checking harness.

Every differentiable kernel, the ConvLSTM cell, the bridge, the training
loss, and the end-to-end tiny network can be checked against central finite
differences.  Checks require float64: the stated tolerances are unreachable
in single precision.

Relative error is elementwise |analytic - numeric| / max(|analytic|,
|numeric|, 1), maximized over the slot; the unit floor turns the comparison
absolute for near-zero gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import bridge as B
from . import convlstm as C
from . import kernels as K
from . import network as N
from .data import RouteThresholds, Route
from .losses import LossConfig, multi_sigmoid_loss

Array = np.ndarray

OP_TOLERANCE = 1e-4
E2E_TOLERANCE = 1e-3
FD_STEP = 1e-5


@dataclass
class SlotReport:
    slot: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return np.isfinite(self.max_rel_err) and self.max_rel_err < self.tolerance


@dataclass
class CheckReport:
    name: str
    slots: list

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.slots)

    @property
    def worst(self) -> float:
        return max((s.max_rel_err for s in self.slots), default=0.0)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.worst:.3e} over {len(self.slots)} slots"


def relative_error(analytic: Array, numeric: Array) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"gradient shapes disagree: {a.shape} vs {n.shape}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def finite_difference(f, x: Array, h: float = FD_STEP) -> Array:
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gradient_check(name: str, f, inputs: dict, h: float = FD_STEP,
                   tol: float = OP_TOLERANCE) -> CheckReport:
    """Check ``f(inputs) -> (loss, {slot: analytic grad})`` against central
    finite differences on every slot.  Non-finite values fail the slot."""
    for key, arr in inputs.items():
        if arr.dtype != np.float64:
            raise ValueError(f"gradient_check requires float64 inputs; {key} is {arr.dtype}")
    loss, grads = f(inputs)
    slots = []
    for key in inputs:
        analytic = grads[key]
        if not np.isfinite(analytic).all() or not np.isfinite(loss):
            slots.append(SlotReport(key, float("inf"), tol))
            continue

        def loss_only(v, _key=key):
            probe = dict(inputs)
            probe[_key] = v
            return f(probe)[0]

        numeric = finite_difference(loss_only, inputs[key], h)
        slots.append(SlotReport(key, relative_error(analytic, numeric), tol))
    return CheckReport(name=name, slots=slots)


# ---------------------------------------------------------------------------
# Per-operation checks (randomized small instances)
# ---------------------------------------------------------------------------

def _weighted(out: Array, r: Array) -> float:
    return float((out * r).sum())


def check_conv2d(seed: int) -> CheckReport:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 1)))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    k = int(rng.integers(1, 4))
    x = rng.normal(size=(2, 2, 5, 5))
    w = rng.normal(size=(3, 2, k, k))
    b = rng.normal(size=3)
    out, _ = K.conv2d(x, w, b, stride, pad)
    r = rng.normal(size=out.shape)

    def f(inp):
        y, ctx = K.conv2d(inp["x"], inp["w"], inp["b"], stride, pad)
        gx, gw, gb = K.conv2d_backward(ctx, r)
        return _weighted(y, r), {"x": gx, "w": gw, "b": gb}

    return gradient_check(f"conv2d[s{stride},p{pad},k{k}]", f, {"x": x, "w": w, "b": b})


def check_conv_transpose2d(seed: int) -> CheckReport:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 2)))
    stride = int(rng.integers(1, 3))
    k = int(rng.integers(2, 5))
    pad = int(rng.integers(0, min(2, (k + 1) // 2)))
    x = rng.normal(size=(2, 3, 4, 4))
    w = rng.normal(size=(3, 2, k, k))
    b = rng.normal(size=2)
    out, _ = K.conv_transpose2d(x, w, b, stride, pad)
    r = rng.normal(size=out.shape)

    def f(inp):
        y, ctx = K.conv_transpose2d(inp["x"], inp["w"], inp["b"], stride, pad)
        gx, gw, gb = K.conv_transpose2d_backward(ctx, r)
        return _weighted(y, r), {"x": gx, "w": gw, "b": gb}

    return gradient_check(f"conv_transpose2d[s{stride},p{pad},k{k}]", f,
                          {"x": x, "w": w, "b": b})


def check_group_norm(seed: int) -> CheckReport:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 3)))
    groups = int(rng.choice([1, 2, 3]))
    c = groups * int(rng.integers(1, 4))
    x = rng.normal(size=(2, c, 3, 4))
    gamma = rng.normal(size=c)
    beta = rng.normal(size=c)
    r = rng.normal(size=x.shape)

    def f(inp):
        y, ctx = K.group_norm(inp["x"], groups, inp["gamma"], inp["beta"])
        gx, gg, gb = K.group_norm_backward(ctx, r)
        return _weighted(y, r), {"x": gx, "gamma": gg, "beta": gb}

    return gradient_check(f"group_norm[g{groups},c{c}]", f,
                          {"x": x, "gamma": gamma, "beta": beta})


def check_elementwise(seed: int) -> CheckReport:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 4)))
    slots = []
    for kind in ("sigmoid", "tanh", "add", "hadamard"):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4)) if kind in ("add", "hadamard") else None
        out, _ = K.elementwise(kind, a, b)
        r = rng.normal(size=out.shape)
        if b is None:
            def f(inp, _kind=kind):
                y, ctx = K.elementwise(_kind, inp["a"])
                return _weighted(y, r), {"a": K.elementwise_backward(ctx, r)}
            report = gradient_check(kind, f, {"a": a})
        else:
            def f(inp, _kind=kind):
                y, ctx = K.elementwise(_kind, inp["a"], inp["b"])
                ga, gb = K.elementwise_backward(ctx, r)
                return _weighted(y, r), {"a": ga, "b": gb}
            report = gradient_check(kind, f, {"a": a, "b": b})
        slots.extend(SlotReport(f"{kind}.{s.slot}", s.max_rel_err, s.tolerance)
                     for s in report.slots)
    return CheckReport("elementwise", slots)


def check_concat_split(seed: int) -> CheckReport:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 5)))
    a = rng.normal(size=(2, 2, 3, 3))
    b = rng.normal(size=(2, 3, 3, 3))
    out, _ = K.concat_channels([a, b])
    r = rng.normal(size=out.shape)

    def f(inp):
        y, ctx = K.concat_channels([inp["a"], inp["b"]])
        ga, gb = K.concat_channels_backward(ctx, r)
        return _weighted(y, r), {"a": ga, "b": gb}

    return gradient_check("concat_split", f, {"a": a, "b": b})


def check_cell(seed: int) -> CheckReport:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 6)))
    cin, chid, hw = 2, 3, (4, 4)
    p = C.init_cell_params(rng, cin, chid, (3, 3), channels_per_group=3,
                           dtype=np.float64)
    for _, param in p.named("cell"):
        param.data[...] = rng.normal(scale=0.5, size=param.shape)
    x = rng.normal(size=(1, cin, *hw))
    h0 = rng.normal(size=(1, chid, *hw))
    c0 = rng.normal(size=(1, chid, *hw))
    rh = rng.normal(size=(1, chid, *hw))
    rc = rng.normal(size=(1, chid, *hw))
    named = list(p.named("cell"))

    def f(inp):
        for name, param in named:
            param.data = inp[name]
        state, ctx = C.cell_step(inp["x"], C.CellState(inp["h0"], inp["c0"]), p)
        for _, param in named:
            param.zero_grad()
        gx, gh, gc = C.cell_backward(ctx, rh, rc, p)
        loss = float((state.h * rh).sum() + (state.c * rc).sum())
        grads = {"x": gx, "h0": gh, "c0": gc}
        grads.update({name: param.grad.copy() for name, param in named})
        return loss, grads

    inputs = {"x": x, "h0": h0, "c0": c0}
    inputs.update({name: param.data.copy() for name, param in named})
    return gradient_check("convlstm_cell", f, inputs)


def check_bridge(seed: int) -> CheckReport:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 7)))
    p = B.init_bridge_params(rng, layers=2, chid=2, channels_per_group=2,
                             dtype=np.float64)
    for _, param in p.named("bridge"):
        param.data[...] = rng.normal(size=param.shape)
    h0 = rng.normal(size=(1, 2, 3, 3))
    h1 = rng.normal(size=(1, 2, 3, 3))
    r = [rng.normal(size=(1, 2, 3, 3)) for _ in range(2)]
    named = list(p.named("bridge"))

    def f(inp):
        for name, param in named:
            param.data = inp[name]
        residuals, ctx = B.bridge_step([inp["h0"], inp["h1"]], p)
        for _, param in named:
            param.zero_grad()
        ghidden = B.bridge_backward(ctx, r, p)
        loss = float(sum((res * w).sum() for res, w in zip(residuals, r)))
        grads = {"h0": ghidden[0], "h1": ghidden[1]}
        grads.update({name: param.grad.copy() for name, param in named})
        return loss, grads

    inputs = {"h0": h0, "h1": h1}
    inputs.update({name: param.data.copy() for name, param in named})
    return gradient_check("bridge_step", f, inputs)


def check_loss(seed: int) -> CheckReport:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 8)))
    cfg = LossConfig()
    target = rng.uniform(0, 1, size=(3, 4))
    pred = rng.uniform(0, 1, size=(3, 4))

    def f(inp):
        loss, grad = multi_sigmoid_loss(target, inp["pred"], cfg)
        return loss, {"pred": grad}

    return gradient_check("multi_sigmoid_loss", f, {"pred": pred})


def check_end_to_end(seed: int) -> CheckReport:
    """Tiny full network (1 layer, 2 channels, 8x8 frames, T = L = 2)."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 9)))
    cfg = N.NetworkConfig(input_hw=(8, 8), layers=1, hidden_channels=(2,),
                          context=2, horizon=2, channels_per_group=2, columns=1,
                          thresholds=RouteThresholds(0.05, 0.004, 0.12, 0.02))
    params = N.init_model_params(cfg, seed=seed, dtype=np.float64)
    frames = rng.uniform(0.1, 0.9, size=(1, 2, 8, 8))
    r = rng.normal(size=(1, 2, 8, 8))
    named = list(params.named())

    def f(inp):
        for name, param in named:
            param.data = inp[name]
        pred, tape = N.forward_batch(inp["frames"], [Route.LIGHT], params, cfg)
        params.zero_grads()
        g_frames = N.backward_batch(tape, r, params, cfg)
        grads = {name: param.grad.copy() for name, param in named}
        grads["frames"] = g_frames
        return _weighted(pred, r), grads

    inputs = {"frames": frames}
    inputs.update({name: param.data.copy() for name, param in named})
    return gradient_check("end_to_end_tiny", f, inputs, tol=E2E_TOLERANCE)


def run_suite(level: str = "all", instances: int = 5, seed: int = 0) -> list[CheckReport]:
    """Run the requested checks; ``level`` is op | cell | e2e | all."""
    reports: list[CheckReport] = []
    if level in ("op", "all"):
        for s in range(instances):
            reports.append(check_conv2d(seed + s))
            reports.append(check_conv_transpose2d(seed + s))
            reports.append(check_group_norm(seed + s))
            reports.append(check_elementwise(seed + s))
            reports.append(check_concat_split(seed + s))
            reports.append(check_loss(seed + s))
    if level in ("cell", "all"):
        for s in range(instances):
            reports.append(check_cell(seed + s))
            reports.append(check_bridge(seed + s))
    if level in ("e2e", "all"):
        reports.append(check_end_to_end(seed))
    return reports
