"""Synthetic radar-echo sequences, dataset splitting, and the RSEQ format.

The generator stands in for a real radar archive at desk scale: each sequence
superposes a few Gaussian rain cells that advect with constant per-cell
velocity and grow or decay exponentially.  Sequences are tagged light /
moderate / heavy by mean intensity and mean absolute changing rate, with
thresholds calibrated by quantile search so the class proportions match a
target mix.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

Array = np.ndarray

RSEQ_MAGIC = b"RSEQ"
RSEQ_VERSION = 1


class FileFormatError(Exception):
    """Base class for binary file-format violations."""


class BadMagicError(FileFormatError):
    pass


class BadVersionError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


class Route(enum.Enum):
    LIGHT = "light"
    MODERATE = "moderate"
    HEAVY = "heavy"


@dataclass
class RouteThresholds:
    """Nested-box routing thresholds on (mean intensity, changing rate)."""
    m1: float
    d1: float
    m2: float
    d2: float

    def as_tuple(self):
        return (self.m1, self.d1, self.m2, self.d2)


@dataclass
class RadarSequence:
    frames: Array  # [T, H, W] normalized intensity in [0, 1]
    origin: str = "synthetic"
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be [T,H,W] with T >= 1, got {self.frames.shape}")

    def __len__(self):
        return self.frames.shape[0]


def sequence_stats(frames: Array) -> tuple[float, float]:
    """(mean intensity mu, mean absolute change delta of the frame means)."""
    frames = np.asarray(frames)
    if frames.shape[0] < 2:
        raise ValueError("sequence statistics require at least 2 frames")
    mu = float(frames.mean())
    frame_means = frames.reshape(frames.shape[0], -1).mean(axis=1)
    delta = float(np.abs(np.diff(frame_means)).mean())
    return mu, delta


def route(frames: Array, thresholds: RouteThresholds) -> Route:
    """Three-way nested-box classification by (mu, delta); total and
    deterministic for any sequence of >= 2 frames."""
    mu, delta = sequence_stats(frames)
    if mu <= thresholds.m1 and delta <= thresholds.d1:
        return Route.LIGHT
    if mu <= thresholds.m2 and delta <= thresholds.d2:
        return Route.MODERATE
    return Route.HEAVY


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

@dataclass
class CellRegime:
    """Sampling ranges for the rain cells of one intensity class."""
    n_cells: tuple[int, int]
    amplitude: tuple[float, float]
    sigma: tuple[float, float]        # Gaussian width, pixels
    speed: tuple[float, float]        # pixels per frame
    growth: tuple[float, float]       # |per-frame log growth rate|, sign random


DEFAULT_REGIMES = {
    Route.LIGHT: CellRegime(n_cells=(1, 2), amplitude=(0.15, 0.40),
                            sigma=(2.5, 4.5), speed=(0.1, 0.5), growth=(0.0, 0.015)),
    Route.MODERATE: CellRegime(n_cells=(2, 3), amplitude=(0.35, 0.70),
                               sigma=(3.0, 5.0), speed=(0.4, 1.1), growth=(0.01, 0.045)),
    Route.HEAVY: CellRegime(n_cells=(3, 5), amplitude=(0.55, 0.95),
                            sigma=(3.0, 6.0), speed=(0.8, 1.8), growth=(0.03, 0.09)),
}


@dataclass
class GenConfig:
    grid: tuple[int, int] = (32, 32)
    length: int = 20
    count: int = 400
    class_mix: tuple[float, float, float] = (0.592, 0.254, 0.154)
    regimes: dict = field(default_factory=lambda: dict(DEFAULT_REGIMES))
    seed: int = 0

    def __post_init__(self):
        mix = np.asarray(self.class_mix, dtype=float)
        if np.any(mix < 0) or not np.isclose(mix.sum(), 1.0, atol=1e-6):
            raise ValueError(f"class mix must be a distribution, got {self.class_mix}")


@dataclass
class GaussianCell:
    amplitude: float
    sigma: float
    center: tuple[float, float]       # (row, col) at t = 0
    velocity: tuple[float, float]     # (d_row, d_col) per frame
    growth: float                     # per-frame log rate


def gaussian_field(hw: tuple[int, int], cells: list[GaussianCell], t: int) -> Array:
    """Render the superposed cell field at integer time ``t``, clipped to [0,1]."""
    h, w = hw
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    frame = np.zeros((h, w), dtype=np.float64)
    for cell in cells:
        cy = cell.center[0] + cell.velocity[0] * t
        cx = cell.center[1] + cell.velocity[1] * t
        amp = cell.amplitude * np.exp(cell.growth * t)
        d2 = (rows - cy) ** 2 + (cols - cx) ** 2
        frame += amp * np.exp(-d2 / (2.0 * cell.sigma ** 2))
    return np.clip(frame, 0.0, 1.0)


def _draw_cells(rng: np.random.Generator, regime: CellRegime,
                hw: tuple[int, int]) -> list[GaussianCell]:
    h, w = hw
    n = int(rng.integers(regime.n_cells[0], regime.n_cells[1] + 1))
    cells = []
    margin = 0.15
    for _ in range(n):
        speed = rng.uniform(*regime.speed)
        heading = rng.uniform(0.0, 2.0 * np.pi)
        growth = rng.uniform(*regime.growth) * (1 if rng.random() < 0.5 else -1)
        cells.append(GaussianCell(
            amplitude=float(rng.uniform(*regime.amplitude)),
            sigma=float(rng.uniform(*regime.sigma)),
            center=(float(rng.uniform(margin * h, (1 - margin) * h)),
                    float(rng.uniform(margin * w, (1 - margin) * w))),
            velocity=(float(speed * np.sin(heading)), float(speed * np.cos(heading))),
            growth=float(growth),
        ))
    return cells


def synth_generate(cfg: GenConfig) -> list[RadarSequence]:
    """Deterministically generate ``cfg.count`` sequences.  Each sequence's
    randomness derives from (seed, index), so generation order is immaterial."""
    order = [Route.LIGHT, Route.MODERATE, Route.HEAVY]
    out = []
    for i in range(cfg.count):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, i)))
        regime_key = order[int(rng.choice(3, p=np.asarray(cfg.class_mix)))]
        cells = _draw_cells(rng, cfg.regimes[regime_key], cfg.grid)
        frames = np.stack([gaussian_field(cfg.grid, cells, t)
                           for t in range(cfg.length)]).astype(np.float32)
        out.append(RadarSequence(frames=frames, origin="synthetic",
                                 source_id=f"seed{cfg.seed}-{i:05d}"))
    return out


# ---------------------------------------------------------------------------
# Windowing / filtering / splitting
# ---------------------------------------------------------------------------

def sliding_window(frames: Array, length: int = 20, stride: int = 1) -> list[RadarSequence]:
    """Windows [i, i+length) for i = 0, stride, 2*stride, ...; an input shorter
    than ``length`` yields no windows."""
    if length < 1:
        raise ValueError(f"window length must be >= 1, got {length}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    frames = np.asarray(frames)
    n = frames.shape[0]
    if n < length:
        return []
    return [RadarSequence(frames=frames[i:i + length], origin="synthetic",
                          source_id=f"win{i}")
            for i in range(0, n - length + 1, stride)]


def filter_rainless(seqs: list[RadarSequence], min_mean: float) -> list[RadarSequence]:
    """Drop sequences whose overall mean intensity falls below ``min_mean``.
    Intended for the training split only; test data stays unchanged."""
    if not 0.0 <= min_mean < 1.0:
        raise ValueError(f"min_mean must lie in [0, 1), got {min_mean}")
    return [s for s in seqs if float(s.frames.mean()) >= min_mean]


def split_by_intensity(seqs: list[RadarSequence], thresholds: RouteThresholds,
                       context: int | None = None):
    """Partition sequences by route.  Returns (light, moderate, heavy, stats);
    routing looks only at the first ``context`` frames when given, matching
    what the network sees at prediction time."""
    buckets = {Route.LIGHT: [], Route.MODERATE: [], Route.HEAVY: []}
    for s in seqs:
        frames = s.frames if context is None else s.frames[:context]
        buckets[route(frames, thresholds)].append(s)
    total = max(1, len(seqs))
    stats = {r.value: len(buckets[r]) / total for r in Route}
    return buckets[Route.LIGHT], buckets[Route.MODERATE], buckets[Route.HEAVY], stats


def calibrate_thresholds(stats: Array,
                         target_light: float = 0.592,
                         target_moderate: float = 0.254) -> RouteThresholds:
    """Quantile search for nested-box thresholds hitting the target class mix.

    ``stats`` is an [n, 2] array of per-sequence (mu, delta).  For a shared
    quantile level p, the joint proportion inside the box
    (mu <= q_mu(p), delta <= q_delta(p)) is monotone in p, so bisection finds
    the level that covers the target mass; the outer box repeats the search at
    the cumulative light+moderate mass.
    """
    stats = np.asarray(stats, dtype=np.float64)
    if stats.ndim != 2 or stats.shape[1] != 2 or stats.shape[0] < 10:
        raise ValueError("calibration needs an [n>=10, 2] array of (mu, delta)")
    mu, delta = stats[:, 0], stats[:, 1]

    def box_for(level: float) -> tuple[float, float]:
        return (float(np.quantile(mu, level)), float(np.quantile(delta, level)))

    def coverage(level: float) -> float:
        m, d = box_for(level)
        return float(np.mean((mu <= m) & (delta <= d)))

    def bisect(target: float) -> float:
        lo, hi = 0.0, 1.0
        for _ in range(50):
            mid = 0.5 * (lo + hi)
            if coverage(mid) < target:
                lo = mid
            else:
                hi = mid
        return hi

    p1 = bisect(target_light)
    p2 = bisect(min(1.0, target_light + target_moderate))
    m1, d1 = box_for(p1)
    m2, d2 = box_for(max(p1, p2))
    # Boxes must nest so the moderate region strictly contains the light one.
    return RouteThresholds(m1=m1, d1=d1, m2=max(m1, m2), d2=max(d1, d2))


# ---------------------------------------------------------------------------
# RSEQ binary format
# ---------------------------------------------------------------------------

def rseq_write(seq: RadarSequence, path) -> None:
    """Little-endian layout: magic "RSEQ", u32 version, u32 T, u32 H, u32 W,
    then T*H*W float32 values in (t, row, col) order."""
    frames = np.ascontiguousarray(seq.frames, dtype=np.float32)
    t, h, w = frames.shape
    with open(path, "wb") as fh:
        fh.write(RSEQ_MAGIC)
        fh.write(struct.pack("<IIII", RSEQ_VERSION, t, h, w))
        fh.write(frames.tobytes())


def rseq_read(path) -> RadarSequence:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != RSEQ_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}, expected {RSEQ_MAGIC!r}")
    if len(blob) < 20:
        raise TruncatedFileError(f"{path}: header truncated at {len(blob)} bytes")
    version, t, h, w = struct.unpack("<IIII", blob[4:20])
    if version != RSEQ_VERSION:
        raise BadVersionError(f"{path}: version {version}, expected {RSEQ_VERSION}")
    payload = blob[20:]
    expected = t * h * w * 4
    if len(payload) != expected:
        raise TruncatedFileError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}")
    frames = np.frombuffer(payload, dtype="<f4").reshape(t, h, w).copy()
    return RadarSequence(frames=frames, origin="file", source_id=str(path))


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    path: str
    mu: float
    delta: float
    route: Route
    split: str  # "train" | "test"


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    thresholds: RouteThresholds
    header: dict = field(default_factory=dict)

    def split(self, which: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == which]


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = ["# starbrinet dataset manifest v1"]
    meta = dict(manifest.header)
    t = manifest.thresholds
    meta.update({"threshold_m1": repr(t.m1), "threshold_d1": repr(t.d1),
                 "threshold_m2": repr(t.m2), "threshold_d2": repr(t.d2)})
    for key in sorted(meta):
        lines.append(f"# {key} = {meta[key]}")
    lines.append("path\tmu\tdelta\troute\tsplit")
    for e in manifest.entries:
        lines.append(f"{e.path}\t{e.mu!r}\t{e.delta!r}\t{e.route.value}\t{e.split}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    header: dict = {}
    entries: list[ManifestEntry] = []
    saw_columns = False
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                key, _, value = body.partition("=")
                header[key.strip()] = value.strip()
            continue
        if not saw_columns:
            saw_columns = True  # column header row
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise FileFormatError(f"{path}: malformed manifest row {line!r}")
        entries.append(ManifestEntry(path=parts[0], mu=float(parts[1]),
                                     delta=float(parts[2]), route=Route(parts[3]),
                                     split=parts[4]))
    try:
        thresholds = RouteThresholds(
            m1=float(header["threshold_m1"]), d1=float(header["threshold_d1"]),
            m2=float(header["threshold_m2"]), d2=float(header["threshold_d2"]))
    except KeyError as exc:
        raise FileFormatError(f"{path}: manifest missing threshold header {exc}") from exc
    return DatasetManifest(entries=entries, thresholds=thresholds, header=header)
