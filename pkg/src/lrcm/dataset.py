"""Decoupled dataset handling: motion/audio/text triples, the annotation text
grammar, binary file formats, manifests, per-genre statistics, and a synthetic
generator for desk-scale experiments.

Annotation files are two-part plain text::

    Dance style characteristics: <comma separated global tokens>
    Dance movement sequence:
    - HH:MM:SS.sss - HH:MM:SS.sss: <comma separated local tokens>
    ...

Parsing is whitespace tolerant; emission is canonical, so parse(emit(a)) == a
and emit(parse(emit(a))) is byte-stable.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, ParseError, ValidationError

Array = np.ndarray

MOTION_MAGIC = b"LRCMMOT1"
AUDIO_MAGIC = b"LRCMAUD1"

GLOBAL_HEADER = "Dance style characteristics:"
SEQUENCE_HEADER = "Dance movement sequence:"

DEFAULT_FPS = 30
POSE_DIM = 61
AUDIO_DIM = 3

GENRES = ("hiphop", "krumping", "popping", "locking", "jazz", "charleston", "tapping")


# ---------------------------------------------------------------------------
# Core value types
# ---------------------------------------------------------------------------

@dataclass
class MotionSequence:
    """Pose frames (T, D) of axis-angle joint values at a fixed frame rate."""

    frames: Array
    fps: int = DEFAULT_FPS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValidationError(f"motion must be 2-D, got shape {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def pose_dim(self) -> int:
        return self.frames.shape[1]

    @property
    def duration_ms(self) -> float:
        return self.n_frames * 1000.0 / self.fps


@dataclass
class AudioFeatures:
    """Per-frame audio features (T, 3) plus the music beat frame indices."""

    frames: Array
    beat_frames: Array
    fps: int = DEFAULT_FPS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.beat_frames = np.asarray(self.beat_frames, dtype=np.int64)

    def validate(self):
        if self.frames.ndim != 2:
            raise ValidationError("audio features must be 2-D")
        t = self.frames.shape[0]
        if len(self.beat_frames) and (
            np.any(np.diff(self.beat_frames) <= 0)
            or self.beat_frames[0] < 0
            or self.beat_frames[-1] >= t
        ):
            raise ValidationError("beat frames must be strictly increasing within [0, T)")


@dataclass
class LocalSegment:
    start_ms: int
    end_ms: int
    tokens: list[str]


@dataclass
class TextAnnotation:
    global_tokens: list[str]
    local_segments: list[LocalSegment] = field(default_factory=list)

    def validate(self):
        for tok in self.global_tokens:
            if not tok or tok != _normalize_token(tok):
                raise ValidationError(f"bad global token {tok!r}")
        prev_end = None
        for seg in self.local_segments:
            if seg.end_ms <= seg.start_ms:
                raise ValidationError(f"segment end {seg.end_ms} <= start {seg.start_ms}")
            if prev_end is not None and seg.start_ms < prev_end:
                raise ValidationError("segments overlap or are out of order")
            if not seg.tokens:
                raise ValidationError("segment without tokens")
            for tok in seg.tokens:
                if not tok or tok != _normalize_token(tok):
                    raise ValidationError(f"bad local token {tok!r}")
            prev_end = seg.end_ms


@dataclass
class DecoupledSample:
    """One motion / audio-features / text-annotation triple."""

    motion: MotionSequence
    audio: AudioFeatures
    text: TextAnnotation
    genre: str
    clip_id: str

    def validate(self):
        if self.motion.n_frames != self.audio.frames.shape[0]:
            raise ValidationError(
                f"{self.clip_id}: motion has {self.motion.n_frames} frames, "
                f"audio has {self.audio.frames.shape[0]}"
            )
        self.audio.validate()
        self.text.validate()
        duration = self.motion.duration_ms
        for seg in self.text.local_segments:
            if seg.end_ms > duration + 1e-6:
                raise ValidationError(
                    f"{self.clip_id}: segment ends at {seg.end_ms}ms beyond clip end {duration:.1f}ms"
                )


@dataclass
class GenreStats:
    genre: str
    full_time_minutes: float
    global_token_count: int
    local_token_count: int
    all_token_count: int


# ---------------------------------------------------------------------------
# Annotation grammar
# ---------------------------------------------------------------------------

_TIME_RE = r"(\d{2,}):(\d{2}):(\d{2})\.(\d{3})"
_SEGMENT_RE = re.compile(rf"^-\s*{_TIME_RE}\s*-\s*{_TIME_RE}\s*:\s*(.+)$")


def _normalize_token(raw: str) -> str:
    return " ".join(raw.lower().split())


def _parse_tokens(raw: str, line_no: int) -> list[str]:
    tokens = [_normalize_token(part) for part in raw.split(",")]
    if any(not tok for tok in tokens):
        raise ParseError("empty token", line_no)
    return tokens


def _timestamp_ms(h: str, m: str, s: str, ms: str, line_no: int) -> int:
    minutes, seconds = int(m), int(s)
    if minutes > 59 or seconds > 59:
        raise ParseError(f"minutes/seconds out of range in {h}:{m}:{s}.{ms}", line_no)
    return ((int(h) * 60 + minutes) * 60 + seconds) * 1000 + int(ms)


def format_timestamp(ms: int) -> str:
    if ms < 0:
        raise ContractViolation("negative timestamp")
    h, rem = divmod(ms, 3_600_000)
    m, rem = divmod(rem, 60_000)
    s, frac = divmod(rem, 1000)
    return f"{h:02d}:{m:02d}:{s:02d}.{frac:03d}"


def parse_annotation(text: str) -> TextAnnotation:
    """Parse annotation text; raises ParseError with a 1-based line number."""
    lines = text.split("\n")
    idx = 0

    def next_content():
        nonlocal idx
        while idx < len(lines):
            stripped = lines[idx].strip()
            idx += 1
            if stripped:
                return stripped, idx
        return None, idx

    first, line_no = next_content()
    if first is None or not first.startswith(GLOBAL_HEADER):
        raise ParseError(f"expected {GLOBAL_HEADER!r} header", line_no if first else 1)
    global_raw = first[len(GLOBAL_HEADER):].strip()
    if not global_raw:
        raise ParseError("no global tokens", line_no)
    global_tokens = _parse_tokens(global_raw, line_no)

    second, line_no = next_content()
    if second is None or second != SEQUENCE_HEADER:
        raise ParseError(f"expected {SEQUENCE_HEADER!r} header", line_no if second else line_no)

    segments: list[LocalSegment] = []
    prev_end = None
    while True:
        content, line_no = next_content()
        if content is None:
            break
        match = _SEGMENT_RE.match(content)
        if not match:
            raise ParseError(f"malformed segment line {content!r}", line_no)
        start = _timestamp_ms(*match.group(1, 2, 3, 4), line_no)
        end = _timestamp_ms(*match.group(5, 6, 7, 8), line_no)
        if end <= start:
            raise ParseError(f"segment end {format_timestamp(end)} not after start", line_no)
        if prev_end is not None and start < prev_end:
            raise ParseError("segments overlap or are out of order", line_no)
        segments.append(LocalSegment(start, end, _parse_tokens(match.group(9), line_no)))
        prev_end = end
    return TextAnnotation(global_tokens=global_tokens, local_segments=segments)


def emit_annotation(a: TextAnnotation) -> str:
    """Canonical text form; round-trip partner of parse_annotation."""
    try:
        a.validate()
    except ValidationError as exc:
        raise ContractViolation(str(exc)) from exc
    out = [f"{GLOBAL_HEADER} {', '.join(a.global_tokens)}", SEQUENCE_HEADER]
    for seg in a.local_segments:
        out.append(
            f"- {format_timestamp(seg.start_ms)} - {format_timestamp(seg.end_ms)}: "
            f"{', '.join(seg.tokens)}"
        )
    return "\n".join(out) + "\n"


def align_local_tokens(a: TextAnnotation, n_frames: int, fps: float) -> list[tuple[str, ...]]:
    """Per-frame token sets; frame f is covered iff start <= f/fps*1000 < end."""
    if fps <= 0:
        raise ContractViolation("fps must be positive")
    duration = n_frames * 1000.0 / fps
    for seg in a.local_segments:
        if seg.end_ms > duration + 1e-6:
            raise ValidationError(f"segment ends at {seg.end_ms}ms beyond clip end {duration:.1f}ms")
    mask: list[tuple[str, ...]] = [()] * n_frames
    for seg in a.local_segments:
        for f in range(n_frames):
            t_ms = f * 1000.0 / fps
            if seg.start_ms <= t_ms < seg.end_ms:
                mask[f] = tuple(seg.tokens)
    return mask


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

def compute_stats(samples: list[DecoupledSample]) -> list[GenreStats]:
    """Per-genre clip time and token totals, sorted by genre name."""
    acc: dict[str, list[float]] = {}
    for s in samples:
        row = acc.setdefault(s.genre, [0.0, 0, 0])
        row[0] += s.motion.n_frames / s.motion.fps / 60.0
        row[1] += len(s.text.global_tokens)
        row[2] += sum(len(seg.tokens) for seg in s.text.local_segments)
    return [
        GenreStats(genre=g, full_time_minutes=v[0], global_token_count=v[1],
                   local_token_count=v[2], all_token_count=v[1] + v[2])
        for g, v in sorted(acc.items())
    ]


def token_frequencies(samples: list[DecoupledSample]) -> list[tuple[str, str, str, int]]:
    """Rows of (genre, scope, token, count) sorted for stable CSV output."""
    counts: dict[tuple[str, str, str], int] = {}
    for s in samples:
        for tok in s.text.global_tokens:
            key = (s.genre, "global", tok)
            counts[key] = counts.get(key, 0) + 1
        for seg in s.text.local_segments:
            for tok in seg.tokens:
                key = (s.genre, "local", tok)
                counts[key] = counts.get(key, 0) + 1
    return [(g, scope, tok, n) for (g, scope, tok), n in sorted(counts.items())]


def split_clips(clip_ids: list[str], test_fraction: float = 0.2) -> tuple[list[str], list[str]]:
    """Deterministic clip-level train/test split; no clip appears in both."""
    import hashlib

    train, test = [], []
    for cid in clip_ids:
        h = int.from_bytes(hashlib.blake2b(cid.encode(), digest_size=4).digest(), "little")
        (test if (h % 1000) / 1000.0 < test_fraction else train).append(cid)
    return train, test


# ---------------------------------------------------------------------------
# Binary file formats
# ---------------------------------------------------------------------------

def write_motion(path, motion: MotionSequence):
    data = motion.frames.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(MOTION_MAGIC)
        fh.write(struct.pack("<III", motion.fps, motion.n_frames, motion.pose_dim))
        fh.write(data.tobytes())


def read_motion(path) -> MotionSequence:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MOTION_MAGIC:
            raise ValidationError(f"{path}: bad motion magic {magic!r}")
        fps, n, d = struct.unpack("<III", fh.read(12))
        raw = fh.read(n * d * 4)
        if len(raw) != n * d * 4:
            raise ValidationError(f"{path}: truncated motion payload")
        frames = np.frombuffer(raw, dtype="<f4").reshape(n, d).astype(np.float64)
    return MotionSequence(frames=frames, fps=fps)


def write_audio(path, audio: AudioFeatures):
    data = audio.frames.astype("<f4")
    beats = audio.beat_frames.astype("<u4")
    with open(path, "wb") as fh:
        fh.write(AUDIO_MAGIC)
        fh.write(struct.pack("<III", audio.fps, data.shape[0], data.shape[1]))
        fh.write(data.tobytes())
        fh.write(struct.pack("<I", len(beats)))
        fh.write(beats.tobytes())


def read_audio(path) -> AudioFeatures:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != AUDIO_MAGIC:
            raise ValidationError(f"{path}: bad audio magic {magic!r}")
        fps, n, d = struct.unpack("<III", fh.read(12))
        raw = fh.read(n * d * 4)
        if len(raw) != n * d * 4:
            raise ValidationError(f"{path}: truncated audio payload")
        frames = np.frombuffer(raw, dtype="<f4").reshape(n, d).astype(np.float64)
        (n_beats,) = struct.unpack("<I", fh.read(4))
        beats = np.frombuffer(fh.read(n_beats * 4), dtype="<u4").astype(np.int64)
    return AudioFeatures(frames=frames, beat_frames=beats, fps=fps)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def write_dataset(samples: list[DecoupledSample], out_dir) -> Path:
    """Write per-clip files plus a JSONL manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for s in samples:
            write_motion(out_dir / f"{s.clip_id}.mot", s.motion)
            write_audio(out_dir / f"{s.clip_id}.aud", s.audio)
            (out_dir / f"{s.clip_id}.txt").write_text(emit_annotation(s.text))
            fh.write(json.dumps({
                "clip_id": s.clip_id,
                "genre": s.genre,
                "motion": f"{s.clip_id}.mot",
                "audio": f"{s.clip_id}.aud",
                "annotation": f"{s.clip_id}.txt",
            }, sort_keys=True) + "\n")
    return manifest


def load_manifest(manifest_path) -> list[DecoupledSample]:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    samples = []
    with open(manifest_path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{manifest_path}:{line_no}: bad JSON ({exc})") from exc
            try:
                text = parse_annotation((base / entry["annotation"]).read_text())
            except ParseError as exc:
                raise ValidationError(f"{entry['annotation']}: {exc}") from exc
            samples.append(DecoupledSample(
                motion=read_motion(base / entry["motion"]),
                audio=read_audio(base / entry["audio"]),
                text=text,
                genre=entry["genre"],
                clip_id=entry["clip_id"],
            ))
    return samples


def validate_samples(samples: list[DecoupledSample]) -> list[str]:
    """Run every invariant; returns a list of human-readable violations."""
    problems = []
    for s in samples:
        try:
            s.validate()
        except ValidationError as exc:
            problems.append(str(exc))
    return problems


# ---------------------------------------------------------------------------
# Synthetic toy data
# ---------------------------------------------------------------------------

@dataclass
class ToyDatasetSpec:
    clips: int = 4
    frames: int = 96
    pose_dim: int = 8
    fps: int = DEFAULT_FPS
    genres: tuple[str, ...] = GENRES[:4]
    components: int = 3
    amplitude: float = 0.9
    beat_period: int = 16
    beat_locked: bool = True  # motion frequencies are harmonics of the beat

    def period_for(self, genre_index: int) -> int:
        return self.beat_period + 2 * genre_index


def _toy_motion(spec: ToyDatasetSpec, genre_index: int, rng: np.random.Generator) -> Array:
    """Sinusoid mixture with a genre-specific frequency signature.

    Beat-locked clips repeat with the genre's beat period, so the pose is a
    function of the audio phase and a conditional model can in principle
    reconstruct it exactly.  Unlocked clips drift against the beat instead.
    """
    t = np.arange(spec.frames, dtype=np.float64)
    motion = np.zeros((spec.frames, spec.pose_dim))
    period = spec.period_for(genre_index)
    for k in range(spec.components):
        if spec.beat_locked:
            freq = (k + 1) / period  # cycles per frame
        else:
            freq = (0.53 + 0.37 * genre_index) * (k + 1) / spec.fps
        amp = spec.amplitude / (k + 1)
        phases = rng.uniform(0, 2 * np.pi, spec.pose_dim)
        motion += amp * np.sin(2 * np.pi * freq * t[:, None] + phases[None, :])
    return motion


def _toy_audio(spec: ToyDatasetSpec, genre_index: int, motion: Array) -> AudioFeatures:
    period = spec.period_for(genre_index)
    beats = np.arange(0, spec.frames, period, dtype=np.int64)
    t = np.arange(spec.frames, dtype=np.float64)
    pulse = np.zeros(spec.frames)
    for b in beats:
        pulse += np.exp(-0.5 * ((t - b) / 2.5) ** 2)
    # asymmetric attack with a period-scale decay: the onset level falls
    # monotonically between beats, so it encodes time-since-beat everywhere
    kernel = np.exp(-np.arange(2 * period) / (period / 2.0))
    onset = np.convolve(pulse, kernel / kernel.sum())[: spec.frames]
    speed = np.zeros(spec.frames)
    speed[1:] = np.linalg.norm(np.diff(motion, axis=0), axis=1)
    energy = np.convolve(speed, np.ones(9) / 9.0, mode="same")
    frames = np.stack([pulse, onset, energy], axis=1)
    return AudioFeatures(frames=frames, beat_frames=beats, fps=spec.fps)


def _toy_annotation(spec: ToyDatasetSpec, genre: str, clip_index: int) -> TextAnnotation:
    duration = int(spec.frames * 1000 / spec.fps)
    half = duration // 2
    moves = ["step touch", "arm wave", "side glide", "knee drop", "shoulder roll"]
    first = moves[clip_index % len(moves)]
    second = moves[(clip_index + 2) % len(moves)]
    segments = [LocalSegment(0, half, [first])]
    if duration - half >= 2:
        segments.append(LocalSegment(half, duration, [second]))
    return TextAnnotation(global_tokens=[genre, "toy groove"], local_segments=segments)


def synthesize_toy_dataset(spec: ToyDatasetSpec, seed: int) -> list[DecoupledSample]:
    """Deterministic synthetic triples; same seed, same dataset."""
    samples = []
    for i in range(spec.clips):
        rng = np.random.default_rng([seed, i])
        genre_index = i % len(spec.genres)
        genre = spec.genres[genre_index]
        motion = MotionSequence(_toy_motion(spec, genre_index, rng), fps=spec.fps)
        audio = _toy_audio(spec, genre_index, motion.frames)
        text = _toy_annotation(spec, genre, i)
        sample = DecoupledSample(motion=motion, audio=audio, text=text,
                                 genre=genre, clip_id=f"{genre}_{i:03d}")
        sample.validate()
        samples.append(sample)
    return samples
