"""Command-line entry point.

Subcommands: gen-data, train, predict, eval, gradcheck, sweep-scale.
Exit codes are a stable contract: 0 success, 1 usage error, 2 I/O or file
format error, 3 failed check.  Every produced artifact embeds the resolved
run configuration (checkpoint blob, CSV comment header, manifest header);
the RSEQ payload format itself is fixed and carries no configuration.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import gradcheck as G
from . import network as N
from . import training as T
from .losses import LossConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_CHECK = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _schedule(text: str) -> tuple[float, float, int]:
    try:
        a, b, n = text.split(":")
        sched = (float(a), float(b), int(n))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(
            f"schedule must be start:end:iterations, got {text!r}") from exc
    if sched[0] <= 0 or sched[1] <= 0 or sched[2] <= 0:
        raise argparse.ArgumentTypeError("schedule values must be positive")
    return sched


def _values(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad value list {text!r}") from exc


def _limit_threads(n: int | None) -> None:
    if n is None:
        env = os.environ.get("STARBRI_THREADS")
        if not env:
            return
        n = int(env)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(n)
    except ImportError:
        pass  # env vars cover freshly spawned BLAS pools only


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

PROFILES = {
    "desk": dict(grid=(32, 32), count=480),
    "paper-like": dict(grid=(100, 100), count=120),
}


def cmd_gen_data(args) -> int:
    profile = PROFILES[args.profile]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    count = profile["count"] if args.count is None else args.count
    gen = D.GenConfig(grid=profile["grid"], length=args.length, count=count,
                      seed=args.seed)
    seqs = D.synth_generate(gen)
    n_train = int(round(count * (1.0 - args.test_fraction)))
    train_seqs = D.filter_rainless(seqs[:n_train], args.min_mean)
    test_seqs = seqs[n_train:]
    if not train_seqs and count:
        print("error: every training sequence fell below --min-mean", file=sys.stderr)
        return EXIT_USAGE
    if train_seqs:
        stats = np.array([D.sequence_stats(s.frames[:args.context])
                          for s in train_seqs])
        thresholds = D.calibrate_thresholds(stats)
    else:
        thresholds = D.RouteThresholds(0.05, 0.004, 0.12, 0.02)

    entries = []
    for split, split_seqs in (("train", train_seqs), ("test", test_seqs)):
        for i, seq in enumerate(split_seqs):
            name = f"{split}_{i:05d}.rseq"
            D.rseq_write(seq, out / name)
            mu, delta = D.sequence_stats(seq.frames[:args.context])
            entries.append(D.ManifestEntry(
                name, mu, delta, D.route(seq.frames[:args.context], thresholds), split))
    header = {"profile": args.profile, "seed": str(args.seed), "count": str(count),
              "length": str(args.length), "context": str(args.context),
              "min_mean": repr(args.min_mean),
              "grid": f"{profile['grid'][0]}x{profile['grid'][1]}",
              "dropped_rainless": str(n_train - len(train_seqs))}
    manifest = D.DatasetManifest(entries=entries, thresholds=thresholds, header=header)
    D.write_manifest(manifest, out / "manifest.tsv")

    train_entries = [e for e in entries if e.split == "train"]
    total = max(1, len(train_entries))
    print(f"wrote {len(entries)} sequences to {out} "
          f"({len(train_entries)} train / {len(test_seqs)} test, "
          f"{n_train - len(train_seqs)} rain-less dropped)")
    for r in D.Route:
        share = sum(1 for e in train_entries if e.route == r) / total
        print(f"  {r.value:9s} {share * 100:5.1f}%")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _network_config_for(manifest: D.DatasetManifest, data_dir: Path,
                        args) -> N.NetworkConfig:
    if not manifest.entries:
        raise ValueError("manifest lists no sequences")
    probe = D.rseq_read(data_dir / manifest.entries[0].path)
    t, h, w = probe.frames.shape
    context = args.context
    horizon = args.horizon
    if t < context + horizon:
        raise ValueError(f"sequences have {t} frames, need context+horizon = "
                         f"{context + horizon}")
    hidden = tuple(args.hidden for _ in range(args.layers))
    return N.NetworkConfig(input_hw=(h, w), layers=args.layers,
                           hidden_channels=hidden, context=context, horizon=horizon,
                           channels_per_group=args.channels_per_group,
                           thresholds=manifest.thresholds,
                           use_bridge=not args.no_bridge,
                           columns=1 if args.single_column else 3)


def _train_config_for(args) -> T.TrainConfig:
    loss = LossConfig(scale=args.scale, lambda_mse=args.lambda_mse,
                      scale_schedule=args.scale_schedule)
    return T.TrainConfig(batch_size=args.batch_size, iterations=args.iterations,
                         eval_interval=args.eval_interval, seed=args.seed,
                         lr=args.lr, loss=loss, loss_mode=args.loss,
                         precision=args.precision,
                         checkpoint_interval=args.checkpoint_interval,
                         clip_norm=args.clip_norm, optimizer=args.optimizer)


def _apply_config_file(args, path: Path) -> None:
    """Overlay values from an INI-style config file; explicit CLI flags win
    because the file is applied only where the flag still holds its default."""
    sections = T.parse_config_blob(path.read_text())
    flat = {}
    for body in sections.values():
        flat.update(body)
    mapping = {
        "iterations": int, "batch_size": int, "seed": int, "eval_interval": int,
        "lr": float, "lambda_mse": float, "scale": float, "loss_mode": str,
        "precision": str, "layers": int, "hidden": int, "channels_per_group": int,
        "context": int, "horizon": int, "checkpoint_interval": int,
    }
    alias = {"loss_mode": "loss"}
    defaults = _TRAIN_DEFAULTS
    for key, cast in mapping.items():
        if key not in flat:
            continue
        dest = alias.get(key, key)
        if getattr(args, dest) == defaults[dest]:
            setattr(args, dest, cast(flat[key]))
    if "scale_schedule" in flat and flat["scale_schedule"] and \
            args.scale_schedule is None:
        args.scale_schedule = _schedule(flat["scale_schedule"].replace(",", ":"))


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    if args.config:
        _apply_config_file(args, Path(args.config))
    manifest = D.read_manifest(data_dir / "manifest.tsv")
    if args.resume:
        params, optim, cfg, tcfg_saved, run = T.checkpoint_load(args.resume)
        tcfg = _train_config_for(args)
        start = int(run.get("iteration", 0))
    else:
        cfg = _network_config_for(manifest, data_dir, args)
        tcfg = _train_config_for(args)
        params = optim = None
        start = 0
    dtype = T.dtype_of(tcfg.precision)
    train_data = T.load_dataset(manifest, data_dir, "train", dtype)
    test_data = T.load_dataset(manifest, data_dir, "test", dtype)
    log_path = args.log or (str(args.out) + ".metrics.csv")
    result = T.train(train_data, cfg, tcfg, params=params, optim=optim,
                     start_iteration=start,
                     eval_data=test_data if test_data.sequences else None,
                     log_path=log_path, checkpoint_path=args.out)
    final = result.metrics[-1] if result.metrics else {}
    print(f"trained {tcfg.iterations - start} iterations; checkpoint -> {args.out}")
    if "mse" in final:
        print(f"final test mse {final['mse']:.4f} csi {final.get('csi', float('nan')):.4f} "
              f"(persistence mse {final.get('persistence_mse', float('nan')):.4f} "
              f"csi {final.get('persistence_csi', float('nan')):.4f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict / eval
# ---------------------------------------------------------------------------

def write_pgm(frame: np.ndarray, path, comment: str = "") -> None:
    """8-bit binary PGM (P5) export of one normalized frame."""
    h, w = frame.shape
    gray = np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n")
        if comment:
            fh.write(f"# {comment}\n".encode())
        fh.write(f"{w} {h}\n255\n".encode())
        fh.write(gray.tobytes())


def cmd_predict(args) -> int:
    params, optim, cfg, tcfg, run = T.checkpoint_load(args.ckpt)
    seq = D.rseq_read(args.input)
    frames = seq.frames
    if frames.shape[0] < cfg.context:
        print(f"error: input has {frames.shape[0]} frames, model needs "
              f"{cfg.context}", file=sys.stderr)
        return EXIT_USAGE
    if frames.shape[0] > cfg.context:
        print(f"note: using the first {cfg.context} of {frames.shape[0]} frames")
        frames = frames[:cfg.context]
    pred = N.predict(frames, params, cfg)
    D.rseq_write(D.RadarSequence(pred.astype(np.float32), origin="synthetic",
                                 source_id="prediction"), args.out)
    print(f"wrote {pred.shape[0]} predicted frames ({pred.shape[1]}x{pred.shape[2]}) "
          f"-> {args.out}")
    if args.preview_dir:
        preview = Path(args.preview_dir)
        preview.mkdir(parents=True, exist_ok=True)
        note = f"starbrinet prediction from {Path(str(args.ckpt)).name}"
        for i, frame in enumerate(frames):
            write_pgm(frame, preview / f"context_{i:02d}.pgm", note)
        for i, frame in enumerate(pred):
            write_pgm(frame, preview / f"pred_{i:02d}.pgm", note)
        print(f"previews -> {preview}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, optim, cfg, tcfg, run = T.checkpoint_load(args.ckpt)
    data_dir = Path(args.data)
    manifest = D.read_manifest(data_dir / "manifest.tsv")
    dtype = T.dtype_of(tcfg.precision)
    test_data = T.load_dataset(manifest, data_dir, args.split, dtype)
    if not test_data.sequences:
        print(f"error: no sequences in split {args.split!r}", file=sys.stderr)
        return EXIT_IO
    metrics = evaluate_with_heavy(params, cfg, test_data)
    row = {"iteration": optim.step, "split": args.split, **metrics}
    T.write_metrics_csv(args.report, [row], config_text=T.config_blob(cfg, tcfg))
    print(f"eval over {metrics['sequences']} sequences: "
          f"mse {metrics['mse']:.4f} csi {metrics['csi']:.4f} "
          f"undefined {metrics['undefined_frames']} | persistence "
          f"mse {metrics['persistence_mse']:.4f} csi {metrics['persistence_csi']:.4f}")
    print(f"report -> {args.report}")
    return EXIT_OK


def evaluate_with_heavy(params, cfg, data) -> dict:
    metrics = T.evaluate(params, cfg, data)
    heavy = [i for i, r in enumerate(data.routes) if r == D.Route.HEAVY]
    if heavy:
        metrics["heavy_csi"] = T.heavy_class_csi(params, cfg, data)
    return metrics


# ---------------------------------------------------------------------------
# gradcheck / sweep-scale
# ---------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    reports = G.run_suite(args.level, instances=args.instances, seed=args.seed)
    failed = 0
    for report in reports:
        print(report.summary())
        failed += 0 if report.passed else 1
    print(f"{len(reports) - failed}/{len(reports)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_CHECK


def cmd_sweep_scale(args) -> int:
    data_dir = Path(args.data)
    manifest = D.read_manifest(data_dir / "manifest.tsv")
    train_data = T.load_dataset(manifest, data_dir, "train", np.float32)
    test_data = T.load_dataset(manifest, data_dir, "test", np.float32)
    probe = D.rseq_read(data_dir / manifest.entries[0].path)
    cfg = N.NetworkConfig(input_hw=probe.frames.shape[1:],
                          layers=args.layers,
                          hidden_channels=tuple(args.hidden for _ in range(args.layers)),
                          channels_per_group=args.channels_per_group,
                          context=args.context, horizon=args.horizon,
                          thresholds=manifest.thresholds)
    rows = []
    runs = [(f"{v:g}", LossConfig(scale=v)) for v in args.values]
    if args.schedule:
        runs.append((f"sched{args.schedule[0]:g}:{args.schedule[1]:g}",
                     LossConfig(scale=args.schedule[1], scale_schedule=args.schedule)))
    for label, loss in runs:
        tcfg = T.TrainConfig(batch_size=args.batch_size, iterations=args.iterations,
                             eval_interval=0, seed=args.seed, loss=loss)
        result = T.train(train_data, cfg, tcfg, eval_data=None)
        metrics = T.evaluate(result.params, cfg, test_data)
        row = {"iteration": tcfg.iterations, "split": f"s={label}",
               "loss": result.losses[-1], "s": label, **metrics}
        rows.append(row)
        print(f"s={label}: loss {result.losses[-1]:.4f} "
              f"mse {metrics['mse']:.4f} csi {metrics['csi']:.4f}")
    tcfg0 = T.TrainConfig(batch_size=args.batch_size, iterations=args.iterations,
                          seed=args.seed)
    T.write_metrics_csv(args.out, rows, config_text=T.config_blob(cfg, tcfg0))
    print(f"sweep report -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_TRAIN_DEFAULTS = dict(iterations=2000, batch_size=8, seed=0, eval_interval=200,
                       lr=0.002, lambda_mse=1.0, scale=15.0, loss="both",
                       precision="f32", layers=2, hidden=32, channels_per_group=16,
                       context=10, horizon=10, checkpoint_interval=0)


def build_parser() -> _Parser:
    parser = _Parser(prog="starbrinet",
                     description="Radar-echo nowcasting: synthetic data, training, "
                                 "prediction, verification, gradient checks.")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS worker threads (or set STARBRI_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic RSEQ dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=None)
    g.add_argument("--length", type=int, default=20)
    g.add_argument("--context", type=int, default=10)
    g.add_argument("--min-mean", type=float, default=0.005, dest="min_mean")
    g.add_argument("--test-fraction", type=float, default=0.25, dest="test_fraction")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None, help="INI config file (flags win)")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--iterations", type=int, default=_TRAIN_DEFAULTS["iterations"])
    t.add_argument("--batch-size", type=int, default=_TRAIN_DEFAULTS["batch_size"],
                   dest="batch_size")
    t.add_argument("--seed", type=int, default=_TRAIN_DEFAULTS["seed"])
    t.add_argument("--eval-interval", type=int, default=_TRAIN_DEFAULTS["eval_interval"],
                   dest="eval_interval")
    t.add_argument("--checkpoint-interval", type=int,
                   default=_TRAIN_DEFAULTS["checkpoint_interval"],
                   dest="checkpoint_interval")
    t.add_argument("--lr", type=float, default=_TRAIN_DEFAULTS["lr"])
    t.add_argument("--lambda-mse", type=float, default=_TRAIN_DEFAULTS["lambda_mse"],
                   dest="lambda_mse")
    t.add_argument("--scale", type=float, default=_TRAIN_DEFAULTS["scale"])
    t.add_argument("--scale-schedule", type=_schedule, default=None,
                   dest="scale_schedule", metavar="START:END:ITERS")
    t.add_argument("--loss", choices=("both", "msl", "mse"),
                   default=_TRAIN_DEFAULTS["loss"])
    t.add_argument("--no-bridge", action="store_true", dest="no_bridge")
    t.add_argument("--single-column", action="store_true", dest="single_column")
    t.add_argument("--clip-norm", type=float, default=None, dest="clip_norm",
                   help="global gradient-norm clip (off by default)")
    t.add_argument("--optimizer", choices=("adam", "sgd"), default="adam",
                   help="plain-SGD fallback probes the optimizer choice")
    t.add_argument("--precision", choices=("f32", "f64"),
                   default=_TRAIN_DEFAULTS["precision"])
    t.add_argument("--layers", type=int, default=_TRAIN_DEFAULTS["layers"])
    t.add_argument("--hidden", type=int, default=_TRAIN_DEFAULTS["hidden"])
    t.add_argument("--channels-per-group", type=int,
                   default=_TRAIN_DEFAULTS["channels_per_group"],
                   dest="channels_per_group")
    t.add_argument("--context", type=int, default=_TRAIN_DEFAULTS["context"])
    t.add_argument("--horizon", type=int, default=_TRAIN_DEFAULTS["horizon"])
    t.add_argument("--log", default=None, help="metrics CSV (default CKPT.metrics.csv)")
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict future frames for one RSEQ input")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preview-dir", default=None, dest="preview_dir",
                   help="also export grayscale PGM previews")
    p.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="evaluate a checkpoint against a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    c.add_argument("--level", choices=("op", "cell", "e2e", "all"), default="all")
    c.add_argument("--instances", type=int, default=5)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("sweep-scale", help="short training run per loss scale factor")
    s.add_argument("--data", required=True)
    s.add_argument("--values", type=_values, default=[1.0, 15.0, 40.0])
    s.add_argument("--iterations", type=int, default=300)
    s.add_argument("--batch-size", type=int, default=8, dest="batch_size")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--schedule", type=_schedule, default=None,
                   metavar="START:END:ITERS", help="add a ramped-scale run")
    s.add_argument("--layers", type=int, default=_TRAIN_DEFAULTS["layers"])
    s.add_argument("--hidden", type=int, default=_TRAIN_DEFAULTS["hidden"])
    s.add_argument("--channels-per-group", type=int,
                   default=_TRAIN_DEFAULTS["channels_per_group"],
                   dest="channels_per_group")
    s.add_argument("--context", type=int, default=_TRAIN_DEFAULTS["context"])
    s.add_argument("--horizon", type=int, default=_TRAIN_DEFAULTS["horizon"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep_scale)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    _limit_threads(args.threads)
    try:
        return args.func(args)
    except D.FileFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
