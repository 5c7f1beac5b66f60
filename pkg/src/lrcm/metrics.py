"""Evaluation suite: distributional distance over kinematic/geometric motion
features, beat alignment, diversity, and the freezing analysis triple
(adaptive low-velocity proportion, rhythmic score, length regularity).

All functions are pure; sampled diversity is deterministic given the
configured seed.  Motion beats are defined here as strict local minima of the
smoothed per-frame speed envelope, which is a contract of this package rather
than an imported definition.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import MotionSequence
from .errors import ConfigError, ContractViolation, MetricError

Array = np.ndarray


# ---------------------------------------------------------------------------
# Configuration and result bundle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricConfig:
    bas_sigma: float = 9.0          # frames; beat alignment tolerance
    rs_sigma: float = 30.0          # frames; freeze-to-beat tolerance
    pff_percentile: float = 25.0
    pff_min_frames: int = 5
    pff_max_frames: int = 90
    div_pairs: int = 200
    div_seed: int = 0
    beat_smooth_window: int = 5

    def __post_init__(self):
        if self.bas_sigma <= 0 or self.rs_sigma <= 0:
            raise ConfigError("beat tolerances must be positive")
        if not 0 < self.pff_percentile < 100:
            raise ConfigError("percentile must lie strictly between 0 and 100")
        if self.pff_min_frames > self.pff_max_frames:
            raise ConfigError("freeze window min exceeds max")
        if self.div_pairs < 1:
            raise ConfigError("need at least one diversity pair")


@dataclass
class FeatureGaussian:
    mu: Array
    sigma: Array
    n: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        if self.n < 2:
            raise ContractViolation("a feature Gaussian needs at least 2 samples")


@dataclass
class MetricReport:
    fid_k: float
    fid_g: float
    div_k: float
    div_g: float
    bas: float | None
    adaptive_pff: float
    rs: float | None
    lr: float | None
    pff_delta: float | None = None
    rs_delta: float | None = None
    lr_delta: float | None = None
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "fid_k": self.fid_k, "fid_g": self.fid_g,
            "div_k": self.div_k, "div_g": self.div_g,
            "bas": self.bas, "adaptive_pff": self.adaptive_pff,
            "rs": self.rs, "lr": self.lr,
            "pff_delta": self.pff_delta, "rs_delta": self.rs_delta,
            "lr_delta": self.lr_delta, "flags": sorted(self.flags),
        }


# ---------------------------------------------------------------------------
# Feature extractors
# ---------------------------------------------------------------------------

def kinematic_features(m: MotionSequence) -> Array:
    """Mean and std (per dimension) of first and second time differences."""
    if m.n_frames < 3:
        raise ContractViolation("kinematic features need at least 3 frames")
    v = np.diff(m.frames, axis=0)
    a = np.diff(v, axis=0)
    return np.concatenate([v.mean(axis=0), v.std(axis=0), a.mean(axis=0), a.std(axis=0)])


def geometric_features(m: MotionSequence) -> Array:
    """Mean and std (per dimension) of the raw pose values."""
    if m.n_frames < 1:
        raise ContractViolation("empty motion")
    return np.concatenate([m.frames.mean(axis=0), m.frames.std(axis=0)])


def feature_gaussian(features: list[Array]) -> FeatureGaussian:
    stack = np.stack(features)
    if stack.shape[0] < 2:
        raise ContractViolation("need at least 2 feature vectors")
    return FeatureGaussian(mu=stack.mean(axis=0),
                           sigma=np.atleast_2d(np.cov(stack, rowvar=False)),
                           n=stack.shape[0])


# ---------------------------------------------------------------------------
# Distribution distance
# ---------------------------------------------------------------------------

def _psd_sqrt(mat: Array) -> Array:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if vals.min() < -1e-8:
        raise MetricError(f"covariance has a strongly negative eigenvalue {vals.min():.3g}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(real: FeatureGaussian, gen: FeatureGaussian) -> float:
    """||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r S_g)^{1/2}).

    The cross term uses Tr((S_r^{1/2} S_g S_r^{1/2})^{1/2}), the symmetric
    equivalent, evaluated by eigendecomposition with tiny negative eigenvalues
    clamped to zero.
    """
    if real.mu.shape != gen.mu.shape:
        raise ContractViolation("feature dimensions differ")
    sqrt_r = _psd_sqrt(real.sigma)
    inner = sqrt_r @ gen.sigma @ sqrt_r
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    if vals.min() < -1e-8:
        raise MetricError(f"cross matrix has a strongly negative eigenvalue {vals.min():.3g}")
    trace_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    value = float(((real.mu - gen.mu) ** 2).sum()
                  + np.trace(real.sigma) + np.trace(gen.sigma) - 2.0 * trace_sqrt)
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# Beats
# ---------------------------------------------------------------------------

def speed_envelope(m: MotionSequence, smooth_window: int = 5) -> Array:
    """Moving-average-smoothed per-transition speed; length n_frames - 1.

    Smoothing pads by edge replication so the envelope ends are not dragged
    toward zero.
    """
    if m.n_frames < 2:
        raise ContractViolation("need at least 2 frames for a speed envelope")
    speeds = np.linalg.norm(np.diff(m.frames, axis=0), axis=1)
    if smooth_window <= 1:
        return speeds
    half = smooth_window // 2
    padded = np.pad(speeds, half, mode="edge")
    smoothed = np.convolve(padded, np.ones(smooth_window) / smooth_window, mode="valid")
    return smoothed[: len(speeds)]


def motion_beats(m: MotionSequence, smooth_window: int = 5) -> Array:
    """Strict local minima of the smoothed speed envelope (envelope indices).

    A relative tolerance of 1e-12 of the envelope scale guards against
    floating-point noise promoting flat stretches to minima.
    """
    if m.n_frames < 3:
        raise ContractViolation("need at least 3 frames to find motion beats")
    env = speed_envelope(m, smooth_window)
    tol = 1e-12 * max(1.0, float(np.abs(env).max()))
    inner = (env[:-2] - env[1:-1] > tol) & (env[2:] - env[1:-1] > tol)
    return np.flatnonzero(inner) + 1


def beat_alignment_score(motion_beat_frames, music_beat_frames, cfg: MetricConfig) -> float:
    """Coverage-gated Gaussian agreement between music beats and motion beats.

    Per music beat b: delta_b * exp(-min_m (m-b)^2 / (2 sigma^2)), averaged
    over beats, where delta_b is 1 iff some motion beat lies within sigma
    frames of b.
    """
    music = np.asarray(music_beat_frames, dtype=np.float64)
    if music.size == 0:
        raise MetricError("beat alignment is undefined without music beats")
    motion = np.asarray(motion_beat_frames, dtype=np.float64)
    if motion.size == 0:
        return 0.0
    sigma = cfg.bas_sigma
    total = 0.0
    for b in music:
        d2 = np.min((motion - b) ** 2)
        if math.sqrt(d2) <= sigma:
            total += math.exp(-d2 / (2.0 * sigma * sigma))
    return total / music.size


# ---------------------------------------------------------------------------
# Diversity
# ---------------------------------------------------------------------------

def diversity(features: list[Array], pairs: int, rng: np.random.Generator) -> float:
    """Mean Euclidean distance over sampled unordered pairs.

    When ``pairs`` covers every unordered pair the computation is exhaustive
    (and rng is untouched).
    """
    n = len(features)
    if n < 2:
        raise ContractViolation("diversity needs at least 2 feature vectors")
    if pairs < 1:
        raise ContractViolation("need at least one pair")
    stack = np.stack(features)
    all_pairs = n * (n - 1) // 2
    if pairs >= all_pairs:
        total = 0.0
        for i in range(n):
            total += np.linalg.norm(stack[i + 1:] - stack[i], axis=1).sum()
        return total / all_pairs
    total = 0.0
    for _ in range(pairs):
        i = int(rng.integers(0, n))
        j = int(rng.integers(0, n - 1))
        if j >= i:
            j += 1
        total += float(np.linalg.norm(stack[i] - stack[j]))
    return total / pairs


# ---------------------------------------------------------------------------
# Freezing analysis
# ---------------------------------------------------------------------------

def freeze_runs(m: MotionSequence, cfg: MetricConfig) -> list[tuple[int, int]]:
    """Maximal sub-threshold speed runs with lengths inside the configured window.

    The threshold is the configured percentile of the (unsmoothed) speed
    distribution; frames qualify on strict inequality.  Returns (start, length)
    pairs in envelope indices.
    """
    if m.n_frames < 2:
        return []
    speeds = np.linalg.norm(np.diff(m.frames, axis=0), axis=1)
    theta = np.percentile(speeds, cfg.pff_percentile)
    mask = speeds < theta
    padded = np.concatenate([[0], mask.astype(int), [0]])
    edges = np.flatnonzero(np.diff(padded))
    starts, ends = edges[0::2], edges[1::2]
    return [(int(s), int(e - s)) for s, e in zip(starts, ends)
            if cfg.pff_min_frames <= e - s <= cfg.pff_max_frames]


def adaptive_pff(m: MotionSequence, cfg: MetricConfig) -> float:
    """Fraction of frames spent in qualifying low-velocity runs."""
    if m.n_frames < 2:
        raise ContractViolation("need at least 2 frames")
    frozen = sum(length for _, length in freeze_runs(m, cfg))
    return frozen / m.n_frames


def rhythmic_score(freeze_points, beats, cfg: MetricConfig) -> float:
    """Gaussian agreement of freeze starts with beats; empty freezes score 0."""
    beats = np.asarray(beats, dtype=np.float64)
    if beats.size == 0:
        raise MetricError("rhythmic score is undefined without beats")
    points = np.asarray(freeze_points, dtype=np.float64)
    if points.size == 0:
        return 0.0
    sigma = cfg.rs_sigma
    total = 0.0
    for b in beats:
        d2 = np.min(np.abs(points - b) ** 2)
        total += math.exp(-d2 / (2.0 * sigma * sigma))
    return total / beats.size


def length_regularity(freeze_durations) -> float:
    """1 / (1 + population std of freeze durations)."""
    durations = np.asarray(list(freeze_durations), dtype=np.float64)
    if durations.size == 0:
        raise MetricError("no freezing segments; length regularity is undefined")
    return 1.0 / (1.0 + float(durations.std()))


# ---------------------------------------------------------------------------
# Whole-set evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalSample:
    motion: MotionSequence
    music_beats: Array | None = None


def _set_freeze_stats(samples: list[EvalSample], cfg: MetricConfig):
    pffs, rss, lrs = [], [], []
    for s in samples:
        runs = freeze_runs(s.motion, cfg)
        pffs.append(sum(length for _, length in runs) / s.motion.n_frames)
        if s.music_beats is not None and len(s.music_beats):
            rss.append(rhythmic_score([start for start, _ in runs], s.music_beats, cfg))
        durations = [length for _, length in runs]
        if durations:
            lrs.append(length_regularity(durations))
    pff = float(np.mean(pffs)) if pffs else 0.0
    rs = float(np.mean(rss)) if rss else None
    lr = float(np.mean(lrs)) if lrs else None
    return pff, rs, lr


def _set_bas(samples: list[EvalSample], cfg: MetricConfig):
    scores = []
    for s in samples:
        if s.music_beats is None or not len(s.music_beats):
            continue
        scores.append(beat_alignment_score(motion_beats(s.motion, cfg.beat_smooth_window),
                                           s.music_beats, cfg))
    return float(np.mean(scores)) if scores else None


def evaluate(generated: list[EvalSample], reference: list[EvalSample],
             cfg: MetricConfig) -> MetricReport:
    """Full report for a generated set against a reference set.

    Distribution distances compare generated to reference features; diversity,
    beat alignment and freezing statistics describe the generated set, with
    freezing deltas reported against the reference's own statistics.
    """
    if len(generated) < 2 or len(reference) < 2:
        raise ContractViolation("evaluation needs at least 2 samples per side")
    flags = []

    kin_g = [kinematic_features(s.motion) for s in generated]
    kin_r = [kinematic_features(s.motion) for s in reference]
    geo_g = [geometric_features(s.motion) for s in generated]
    geo_r = [geometric_features(s.motion) for s in reference]

    fid_k = fid(feature_gaussian(kin_r), feature_gaussian(kin_g))
    fid_g_ = fid(feature_gaussian(geo_r), feature_gaussian(geo_g))
    rng = np.random.default_rng([cfg.div_seed, 0xD17])
    div_k = diversity(kin_g, cfg.div_pairs, rng)
    div_g = diversity(geo_g, cfg.div_pairs, rng)

    bas = _set_bas(generated, cfg)
    if bas is None:
        flags.append("bas_unavailable_no_music_beats")
    pff, rs, lr = _set_freeze_stats(generated, cfg)
    pff_ref, rs_ref, lr_ref = _set_freeze_stats(reference, cfg)
    if rs is None:
        flags.append("rs_unavailable")
    if lr is None:
        flags.append("lr_no_freeze_segments")

    return MetricReport(
        fid_k=fid_k, fid_g=fid_g_, div_k=div_k, div_g=div_g,
        bas=bas, adaptive_pff=pff, rs=rs, lr=lr,
        pff_delta=pff - pff_ref,
        rs_delta=(rs - rs_ref) if rs is not None and rs_ref is not None else None,
        lr_delta=(lr - lr_ref) if lr is not None and lr_ref is not None else None,
        flags=flags,
    )


def write_report(report: MetricReport, out_dir) -> tuple[Path, Path]:
    """Emit metrics.json (flat keys) and metrics.csv; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "metrics.json"
    csv_path = out_dir / "metrics.csv"
    payload = report.to_dict()
    json_path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    keys = ["fid_k", "fid_g", "div_k", "div_g", "bas", "adaptive_pff",
            "rs", "lr", "pff_delta", "rs_delta", "lr_delta"]

    def cell(v):
        return "" if v is None else f"{v:.10g}"

    with open(csv_path, "w") as fh:
        fh.write("set," + ",".join(keys) + "\n")
        fh.write("generated," + ",".join(cell(payload[k]) for k in keys) + "\n")
    return json_path, csv_path
