"""Training loop, Adam optimizer, scale scheduling, and SBCK checkpoints.

Mini-batches are sampled uniformly over the training sequences with a
per-iteration RNG derived from (seed, iteration), which makes the loss
trajectory independent of dataset file ordering and lets a resumed run
continue bit-exactly from a checkpoint.  Batches are grouped by route inside
the forward pass; gradients flow into only the routed columns plus the shared
resize/decoder parameters.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import network as N
from .data import (DatasetManifest, FileFormatError, BadMagicError, BadVersionError,
                   TruncatedFileError, RadarSequence, Route, RouteThresholds,
                   rseq_read, route as route_frames)
from .losses import LossConfig, frame_mse, multi_sigmoid_loss, sequence_csi

Array = np.ndarray

SBCK_MAGIC = b"SBCK"
SBCK_VERSION = 1

_DTYPES = {"f32": np.float32, "f64": np.float64}


def dtype_of(precision: str):
    try:
        return _DTYPES[precision]
    except KeyError:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {precision!r}")


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 8
    iterations: int = 2000
    eval_interval: int = 200
    seed: int = 0
    lr: float = 0.002
    loss: LossConfig = field(default_factory=LossConfig)
    loss_mode: str = "both"  # both | msl | mse
    precision: str = "f32"
    checkpoint_interval: int = 0  # 0: only save when asked at the end
    class_weights: tuple[float, float, float] | None = None
    clip_norm: float | None = None  # off by default; group norm is the stabilizer
    optimizer: str = "adam"  # "sgd" probes the optimizer-choice question

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss_mode not in ("both", "msl", "mse"):
            raise ValueError(f"loss_mode must be both|msl|mse, got {self.loss_mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam|sgd, got {self.optimizer!r}")
        dtype_of(self.precision)


def paper_scale_train_config(**overrides) -> TrainConfig:
    base = dict(batch_size=32, iterations=20000, eval_interval=1000)
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: N.ModelParams, lr: float = 0.002) -> OptimState:
    m = {name: np.zeros_like(p.data) for name, p in params.named()}
    v = {name: np.zeros_like(p.data) for name, p in params.named()}
    return OptimState(m=m, v=v, lr=lr)


def adam_step(params: N.ModelParams, state: OptimState) -> OptimState:
    """Standard bias-corrected Adam update, applied in place to every named
    parameter.  Raises on a non-finite gradient, naming the parameter."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.named():
        g = p.grad
        if g.shape != state.m[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} does not match "
                             f"optimizer state {state.m[name].shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return state


def clip_gradients(params: N.ModelParams, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for _, p in params.named():
        total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        factor = max_norm / norm
        for _, p in params.named():
            p.grad *= factor
    return norm


def sgd_step(params: N.ModelParams, state: OptimState) -> OptimState:
    """Plain SGD fallback (probe for the optimizer ambiguity; not the default)."""
    state.step += 1
    for name, p in params.named():
        if not np.isfinite(p.grad).all():
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        p.data -= state.lr * p.grad
    return state


# ---------------------------------------------------------------------------
# Scale-factor schedule
# ---------------------------------------------------------------------------

def scale_schedule(iteration: int, schedule: tuple[float, float, int]) -> float:
    """Linear ramp from s_start to s_end over total_iters, clamped afterwards."""
    s_start, s_end, total = schedule
    if s_start <= 0 or s_end <= 0:
        raise ValueError("schedule scales must be positive")
    if total <= 0 or iteration >= total:
        return float(s_end)
    if iteration <= 0:
        return float(s_start)
    return float(s_start + (s_end - s_start) * (iteration / total))


# ---------------------------------------------------------------------------
# Datasets in memory
# ---------------------------------------------------------------------------

@dataclass
class TrainingData:
    sequences: list  # [T+L, H, W] arrays in working dtype
    routes: list     # Route per sequence


def dataset_from_sequences(seqs: list[RadarSequence], thresholds: RouteThresholds,
                           context: int, dtype=np.float32) -> TrainingData:
    sequences = [np.asarray(s.frames, dtype=dtype) for s in seqs]
    routes = [route_frames(f[:context], thresholds) for f in sequences]
    return TrainingData(sequences=sequences, routes=routes)


def load_dataset(manifest: DatasetManifest, base_dir, split: str,
                 dtype=np.float32) -> TrainingData:
    """Load one split.  Entries are sorted by path so the sampled batches do
    not depend on manifest row ordering."""
    entries = sorted(manifest.split(split), key=lambda e: e.path)
    base = Path(base_dir)
    sequences = []
    routes = []
    for e in entries:
        seq = rseq_read(base / e.path)
        sequences.append(np.asarray(seq.frames, dtype=dtype))
        routes.append(e.route)
    return TrainingData(sequences=sequences, routes=routes)


# ---------------------------------------------------------------------------
# Objective and evaluation
# ---------------------------------------------------------------------------

def batch_objective(gt: Array, pred: Array, loss_cfg: LossConfig, s: float,
                    mode: str) -> tuple[float, Array]:
    """Per-sample loss (summed over frames and pixels), averaged over the
    batch; returns the matching gradient with respect to ``pred``."""
    b = gt.shape[0]
    if mode == "mse":
        diff = pred - gt
        return float((diff * diff).sum()) / b, (2.0 * diff) / b
    cfg = replace(loss_cfg, lambda_mse=0.0) if mode == "msl" else loss_cfg
    loss, grad = multi_sigmoid_loss(gt, pred, cfg, s=s)
    return loss / b, grad / b


def evaluate(params: N.ModelParams, cfg: N.NetworkConfig, data: TrainingData,
             batch: int = 16, max_sequences: int | None = None) -> dict:
    """Test-split metrics for the model and the persistence baseline."""
    t, horizon = cfg.context, cfg.horizon
    n = len(data.sequences) if max_sequences is None else min(len(data.sequences),
                                                              max_sequences)
    dtype = params.head_w.dtype
    model_mse, model_csi, persist_mse, persist_csi = [], [], [], []
    undefined = 0
    for lo in range(0, n, batch):
        idx = range(lo, min(lo + batch, n))
        frames = np.stack([data.sequences[i][:t] for i in idx]).astype(dtype, copy=False)
        gts = [data.sequences[i][t:t + horizon] for i in idx]
        routes = [data.routes[i] for i in idx]
        preds, _ = N.forward_batch(frames, routes, params, cfg)
        for k, i in enumerate(idx):
            gt = gts[k]
            model_mse.append(frame_mse(preds[k], gt))
            c, u = sequence_csi(preds[k], gt)
            undefined += u
            if c is not None:
                model_csi.append(c)
            base = N.persistence_baseline(data.sequences[i][:t], horizon)
            persist_mse.append(frame_mse(base, gt))
            pc, _ = sequence_csi(base, gt)
            if pc is not None:
                persist_csi.append(pc)
    return {
        "mse": float(np.mean(model_mse)) if model_mse else float("nan"),
        "csi": float(np.mean(model_csi)) if model_csi else float("nan"),
        "undefined_frames": undefined,
        "persistence_mse": float(np.mean(persist_mse)) if persist_mse else float("nan"),
        "persistence_csi": float(np.mean(persist_csi)) if persist_csi else float("nan"),
        "sequences": n,
    }


def heavy_class_csi(params: N.ModelParams, cfg: N.NetworkConfig,
                    data: TrainingData) -> float:
    """Mean CSI restricted to heavy-routed test sequences."""
    heavy_idx = [i for i, r in enumerate(data.routes) if r == Route.HEAVY]
    subset = TrainingData(sequences=[data.sequences[i] for i in heavy_idx],
                          routes=[data.routes[i] for i in heavy_idx])
    return evaluate(params, cfg, subset)["csi"]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: N.ModelParams
    optim: OptimState
    metrics: list  # metric row dicts
    losses: list   # per-iteration training loss


def _sample_batch(data: TrainingData, tcfg: TrainConfig, iteration: int) -> list[int]:
    rng = np.random.default_rng(np.random.SeedSequence((tcfg.seed, iteration)))
    n = len(data.sequences)
    if tcfg.class_weights is None:
        return list(rng.integers(0, n, size=tcfg.batch_size))
    by_class = {r: [i for i, rr in enumerate(data.routes) if rr == r] for r in Route}
    weights = np.asarray(tcfg.class_weights, dtype=float)
    order = [Route.LIGHT, Route.MODERATE, Route.HEAVY]
    empty = [r for r, w in zip(order, weights) if w > 0 and not by_class[r]]
    if empty:
        warnings.warn(f"classes {[r.value for r in empty]} are empty; "
                      "renormalizing sampling weights", stacklevel=2)
        weights = np.array([w if by_class[r] else 0.0 for r, w in zip(order, weights)])
    weights = weights / weights.sum()
    picks = rng.choice(3, size=tcfg.batch_size, p=weights)
    return [int(rng.choice(by_class[order[c]])) for c in picks]


def train(data: TrainingData, cfg: N.NetworkConfig, tcfg: TrainConfig,
          params: N.ModelParams | None = None, optim: OptimState | None = None,
          start_iteration: int = 0, eval_data: TrainingData | None = None,
          log_path=None, checkpoint_path=None) -> TrainResult:
    """Run (or resume) the training loop.  Deterministic given the seed."""
    if not data.sequences:
        raise ValueError("training data is empty (after rain-less filtering?)")
    dtype = dtype_of(tcfg.precision)
    if params is None:
        params = N.init_model_params(cfg, seed=tcfg.seed, dtype=dtype)
    if optim is None:
        optim = adam_init(params, lr=tcfg.lr)
    t, horizon = cfg.context, cfg.horizon
    metrics: list[dict] = []
    losses: list[float] = []
    log_rows = []

    def eval_row(iteration: int, s: float, route_counts) -> dict:
        row = {"iteration": iteration, "split": "test", "s": s}
        if eval_data is not None:
            row.update(evaluate(params, cfg, eval_data))
        row.update(route_counts)
        return row

    for it in range(start_iteration, tcfg.iterations):
        s = (scale_schedule(it, tcfg.loss.scale_schedule)
             if tcfg.loss.scale_schedule else tcfg.loss.scale)
        idx = _sample_batch(data, tcfg, it)
        frames = np.stack([data.sequences[i][:t] for i in idx])
        gt = np.stack([data.sequences[i][t:t + horizon] for i in idx])
        routes = [data.routes[i] for i in idx]
        preds, tape = N.forward_batch(frames, routes, params, cfg)
        loss, grad = batch_objective(gt, preds, tcfg.loss, s, tcfg.loss_mode)
        params.zero_grads()
        N.backward_batch(tape, grad, params, cfg)
        if tcfg.clip_norm is not None:
            clip_gradients(params, tcfg.clip_norm)
        (adam_step if tcfg.optimizer == "adam" else sgd_step)(params, optim)
        losses.append(loss)

        last = it == tcfg.iterations - 1
        if (tcfg.eval_interval and (it + 1) % tcfg.eval_interval == 0) or last:
            counts = {f"route_{r.value}": routes.count(r) for r in Route}
            row = eval_row(it + 1, s, counts)
            row["loss"] = loss
            metrics.append(row)
            log_rows.append(row)
        if checkpoint_path and tcfg.checkpoint_interval and \
                (it + 1) % tcfg.checkpoint_interval == 0 and not last:
            checkpoint_save(params, optim, cfg, tcfg, checkpoint_path)
    if checkpoint_path:
        checkpoint_save(params, optim, cfg, tcfg, checkpoint_path)
    if log_path:
        write_metrics_csv(log_path, log_rows, config_text=config_blob(cfg, tcfg))
    return TrainResult(params=params, optim=optim, metrics=metrics, losses=losses)


METRIC_COLUMNS = ["iteration", "split", "loss", "mse", "csi", "undefined_frames",
                  "s", "route_light", "route_moderate", "route_heavy",
                  "persistence_mse", "persistence_csi", "heavy_csi"]


def write_metrics_csv(path, rows: list[dict], config_text: str = "") -> None:
    lines = []
    for cline in config_text.splitlines():
        lines.append(f"# {cline}")
    lines.append(",".join(METRIC_COLUMNS))
    for row in rows:
        lines.append(",".join(str(row.get(col, "")) for col in METRIC_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Config blob (structured text embedded in checkpoints and logs)
# ---------------------------------------------------------------------------

def config_blob(cfg: N.NetworkConfig, tcfg: TrainConfig, extra: dict | None = None) -> str:
    thr = cfg.thresholds
    sched = tcfg.loss.scale_schedule
    sections = {
        "network": {
            "input_h": cfg.input_hw[0], "input_w": cfg.input_hw[1],
            "layers": cfg.layers,
            "hidden_channels": ",".join(str(c) for c in cfg.hidden_channels),
            "cell_kernel": f"{cfg.cell_kernel[0]},{cfg.cell_kernel[1]}",
            "context": cfg.context, "horizon": cfg.horizon,
            "channels_per_group": cfg.channels_per_group,
            "use_bridge": int(cfg.use_bridge), "columns": cfg.columns,
            "threshold_m1": repr(thr.m1), "threshold_d1": repr(thr.d1),
            "threshold_m2": repr(thr.m2), "threshold_d2": repr(thr.d2),
        },
        "training": {
            "batch_size": tcfg.batch_size, "iterations": tcfg.iterations,
            "eval_interval": tcfg.eval_interval, "seed": tcfg.seed,
            "lr": repr(tcfg.lr), "loss_mode": tcfg.loss_mode,
            "precision": tcfg.precision,
            "checkpoint_interval": tcfg.checkpoint_interval,
            "clip_norm": "" if tcfg.clip_norm is None else repr(tcfg.clip_norm),
            "optimizer": tcfg.optimizer,
        },
        "loss": {
            "critical_points": ",".join(repr(c) for c in tcfg.loss.critical_points),
            "scale": repr(tcfg.loss.scale),
            "lambda_mse": repr(tcfg.loss.lambda_mse),
            "scale_schedule": ("" if sched is None
                               else f"{sched[0]!r},{sched[1]!r},{sched[2]}"),
        },
    }
    if extra:
        sections["run"] = dict(extra)
    out = []
    for name in sections:
        out.append(f"[{name}]")
        body = sections[name]
        for key in sorted(body):
            out.append(f"{key} = {body[key]}")
    return "\n".join(out) + "\n"


def parse_config_blob(text: str) -> dict:
    sections: dict[str, dict] = {}
    current: dict | None = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = sections.setdefault(line[1:-1], {})
            continue
        if current is None or "=" not in line:
            raise FileFormatError(f"malformed config blob line: {line!r}")
        key, _, value = line.partition("=")
        current[key.strip()] = value.strip()
    return sections


def configs_from_blob(text: str) -> tuple[N.NetworkConfig, TrainConfig]:
    sec = parse_config_blob(text)
    net, tr, lo = sec["network"], sec["training"], sec["loss"]
    cfg = N.NetworkConfig(
        input_hw=(int(net["input_h"]), int(net["input_w"])),
        layers=int(net["layers"]),
        hidden_channels=tuple(int(c) for c in net["hidden_channels"].split(",")),
        cell_kernel=tuple(int(c) for c in net["cell_kernel"].split(",")),
        context=int(net["context"]), horizon=int(net["horizon"]),
        channels_per_group=int(net["channels_per_group"]),
        thresholds=RouteThresholds(float(net["threshold_m1"]), float(net["threshold_d1"]),
                                   float(net["threshold_m2"]), float(net["threshold_d2"])),
        use_bridge=bool(int(net["use_bridge"])), columns=int(net["columns"]))
    sched = lo.get("scale_schedule", "")
    points = tuple(float(c) for c in lo["critical_points"].split(",")) \
        if lo["critical_points"] else ()
    loss = LossConfig(critical_points=points, scale=float(lo["scale"]),
                      lambda_mse=float(lo["lambda_mse"]),
                      scale_schedule=(None if not sched else
                                      (float(sched.split(",")[0]),
                                       float(sched.split(",")[1]),
                                       int(sched.split(",")[2]))))
    clip = tr.get("clip_norm", "")
    tcfg = TrainConfig(batch_size=int(tr["batch_size"]), iterations=int(tr["iterations"]),
                       eval_interval=int(tr["eval_interval"]), seed=int(tr["seed"]),
                       lr=float(tr["lr"]), loss=loss, loss_mode=tr["loss_mode"],
                       precision=tr["precision"],
                       checkpoint_interval=int(tr["checkpoint_interval"]),
                       clip_norm=None if not clip else float(clip),
                       optimizer=tr.get("optimizer", "adam"))
    return cfg, tcfg


# ---------------------------------------------------------------------------
# SBCK checkpoint format
# ---------------------------------------------------------------------------

def _write_tensor(fh, name: str, array: Array) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", array.ndim))
    for dim in array.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(np.ascontiguousarray(array).tobytes())


def checkpoint_save(params: N.ModelParams, optim: OptimState, cfg: N.NetworkConfig,
                    tcfg: TrainConfig, path, extra: dict | None = None) -> None:
    """Little-endian layout: magic "SBCK", u32 version, u32 blob length +
    config blob, u32 tensor count, then per tensor: u16 name length, name,
    u8 rank, u32 dims, raw values in the configured precision."""
    run = {"iteration": optim.step, "optim_lr": repr(optim.lr),
           "optim_beta1": repr(optim.beta1), "optim_beta2": repr(optim.beta2),
           "optim_eps": repr(optim.eps)}
    if extra:
        run.update(extra)
    blob = config_blob(cfg, tcfg, extra=run).encode("utf-8")
    tensors = [(name, p.data) for name, p in params.named()]
    tensors += [(f"optim.m.{name}", optim.m[name]) for name, _ in params.named()]
    tensors += [(f"optim.v.{name}", optim.v[name]) for name, _ in params.named()]
    with open(path, "wb") as fh:
        fh.write(SBCK_MAGIC)
        fh.write(struct.pack("<I", SBCK_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            _write_tensor(fh, name, arr)


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedFileError(f"{self.path}: truncated at byte {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]


def checkpoint_load(path):
    """Returns (params, optim, net_cfg, train_cfg, run_header_dict)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != SBCK_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {SBCK_MAGIC!r}")
    rd = _Reader(raw, path)
    rd.take(4)
    version = rd.u32()
    if version != SBCK_VERSION:
        raise BadVersionError(f"{path}: version {version}, expected {SBCK_VERSION}")
    blob = rd.take(rd.u32()).decode("utf-8")
    cfg, tcfg = configs_from_blob(blob)
    run = parse_config_blob(blob).get("run", {})
    dtype = dtype_of(tcfg.precision)
    count = rd.u32()
    tensors: dict[str, Array] = {}
    for _ in range(count):
        name = rd.take(rd.u16()).decode("utf-8")
        rank = rd.u8()
        shape = tuple(rd.u32() for _ in range(rank))
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(rd.take(size * dtype().itemsize), dtype=dtype)
        tensors[name] = data.reshape(shape).copy()
    if rd.pos != len(raw):
        raise FileFormatError(f"{path}: {len(raw) - rd.pos} trailing bytes")

    params = N.init_model_params(cfg, seed=tcfg.seed, dtype=dtype)
    optim = adam_init(params, lr=float(run.get("optim_lr", tcfg.lr)))
    optim.step = int(run.get("iteration", 0))
    optim.beta1 = float(run.get("optim_beta1", optim.beta1))
    optim.beta2 = float(run.get("optim_beta2", optim.beta2))
    optim.eps = float(run.get("optim_eps", optim.eps))
    for name, p in params.named():
        for key, dest in ((name, None), (f"optim.m.{name}", "m"),
                          (f"optim.v.{name}", "v")):
            if key not in tensors:
                raise FileFormatError(f"{path}: missing tensor {key!r}")
            arr = tensors.pop(key)
            if arr.shape != p.data.shape:
                raise FileFormatError(f"{path}: tensor {key!r} has shape {arr.shape}, "
                                      f"expected {p.data.shape}")
            if dest is None:
                p.data[...] = arr
            elif dest == "m":
                optim.m[name][...] = arr
            else:
                optim.v[name][...] = arr
    if tensors:
        raise FileFormatError(f"{path}: unexpected tensors {sorted(tensors)[:3]}")
    return params, optim, cfg, tcfg, run
