"""Annotation grammar round-trips (including fuzzed), file format round-trips,
statistics fixtures, frame alignment, and the synthetic generator."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lrcm import dataset as ds
from lrcm.errors import ContractViolation, ParseError, ValidationError

EXAMPLE = (
    "Dance style characteristics: popping, extrovert\n"
    "Dance movement sequence:\n"
    "- 00:00:00.000 - 00:00:02.500: walk out, foot movement\n"
)


class TestParseAnnotation:
    def test_example(self):
        a = ds.parse_annotation(EXAMPLE)
        assert a.global_tokens == ["popping", "extrovert"]
        assert len(a.local_segments) == 1
        seg = a.local_segments[0]
        assert (seg.start_ms, seg.end_ms) == (0, 2500)
        assert seg.tokens == ["walk out", "foot movement"]

    def test_empty_movement_list_is_valid(self):
        a = ds.parse_annotation("Dance style characteristics: jazz\n"
                                "Dance movement sequence:\n")
        assert a.global_tokens == ["jazz"]
        assert a.local_segments == []

    def test_whitespace_tolerant(self):
        messy = ("  Dance style characteristics:  Popping ,  EXTROVERT \n\n"
                 "  Dance movement sequence:  \n".replace("sequence:  ", "sequence:") +
                 " -  00:00:00.000  -  00:00:02.500 :  Walk   Out \n")
        a = ds.parse_annotation(messy)
        assert a.global_tokens == ["popping", "extrovert"]
        assert a.local_segments[0].tokens == ["walk out"]

    def test_end_before_start_rejected_with_line(self):
        text = ("Dance style characteristics: x\n"
                "Dance movement sequence:\n"
                "- 00:00:05.000 - 00:00:03.000: spin\n")
        with pytest.raises(ParseError) as err:
            ds.parse_annotation(text)
        assert err.value.line == 3

    def test_overlapping_segments_rejected(self):
        text = ("Dance style characteristics: x\n"
                "Dance movement sequence:\n"
                "- 00:00:00.000 - 00:00:02.000: a\n"
                "- 00:00:01.000 - 00:00:03.000: b\n")
        with pytest.raises(ParseError) as err:
            ds.parse_annotation(text)
        assert err.value.line == 4

    def test_missing_global_header_rejected(self):
        with pytest.raises(ParseError):
            ds.parse_annotation("Dance movement sequence:\n- 00:00:00.000 - 00:00:01.000: a\n")

    def test_missing_sequence_header_rejected(self):
        with pytest.raises(ParseError):
            ds.parse_annotation("Dance style characteristics: x\n"
                                "- 00:00:00.000 - 00:00:01.000: a\n")

    def test_malformed_timestamp_rejected(self):
        with pytest.raises(ParseError):
            ds.parse_annotation("Dance style characteristics: x\n"
                                "Dance movement sequence:\n"
                                "- 0:00:00.000 - 00:00:01.000: a\n")

    def test_minutes_out_of_range_rejected(self):
        with pytest.raises(ParseError):
            ds.parse_annotation("Dance style characteristics: x\n"
                                "Dance movement sequence:\n"
                                "- 00:61:00.000 - 00:62:01.000: a\n")

    def test_empty_token_rejected(self):
        with pytest.raises(ParseError):
            ds.parse_annotation("Dance style characteristics: x,, y\n"
                                "Dance movement sequence:\n")

    def test_touching_segments_allowed(self):
        text = ("Dance style characteristics: x\n"
                "Dance movement sequence:\n"
                "- 00:00:00.000 - 00:00:02.000: a\n"
                "- 00:00:02.000 - 00:00:03.000: b\n")
        assert len(ds.parse_annotation(text).local_segments) == 2


class TestEmitAnnotation:
    def test_roundtrip_identity(self):
        a = ds.parse_annotation(EXAMPLE)
        assert ds.parse_annotation(ds.emit_annotation(a)) == a

    def test_canonical_zero_timestamp(self):
        assert ds.format_timestamp(0) == "00:00:00.000"

    def test_timestamp_arithmetic(self):
        assert ds.format_timestamp(3_723_456) == "01:02:03.456"

    def test_emit_rejects_invalid(self):
        bad = ds.TextAnnotation(global_tokens=["x"],
                                local_segments=[ds.LocalSegment(5, 3, ["a"])])
        with pytest.raises(ContractViolation):
            ds.emit_annotation(bad)


_token = st.text(alphabet="abcdefghijklmnopqrstuvwxyz", min_size=1, max_size=8).map(
    lambda s: s.strip()).filter(bool)
_tokens = st.lists(_token, min_size=1, max_size=4)


@st.composite
def annotations(draw):
    globals_ = draw(_tokens)
    n_segments = draw(st.integers(0, 5))
    segments = []
    cursor = 0
    for _ in range(n_segments):
        start = cursor + draw(st.integers(0, 3000))
        end = start + draw(st.integers(1, 5000))
        segments.append(ds.LocalSegment(start, end, draw(_tokens)))
        cursor = end
    return ds.TextAnnotation(global_tokens=globals_, local_segments=segments)


class TestRoundTripFuzz:
    @given(annotations())
    @settings(max_examples=100, deadline=None)
    def test_parse_emit_roundtrip(self, ann):
        text = ds.emit_annotation(ann)
        parsed = ds.parse_annotation(text)
        assert parsed == ann
        assert ds.emit_annotation(parsed) == text  # byte-stable


class TestAlignment:
    def test_one_second_segment_at_30fps(self):
        a = ds.TextAnnotation(global_tokens=["x"],
                              local_segments=[ds.LocalSegment(0, 1000, ["go"])])
        mask = ds.align_local_tokens(a, 90, 30)
        covered = [i for i, toks in enumerate(mask) if toks]
        assert covered == list(range(30))

    def test_no_segments_all_empty(self):
        a = ds.TextAnnotation(global_tokens=["x"])
        assert all(toks == () for toks in ds.align_local_tokens(a, 10, 30))

    def test_boundary_frame_excluded(self):
        a = ds.TextAnnotation(global_tokens=["x"],
                              local_segments=[ds.LocalSegment(0, 100, ["go"])])
        # frame 3 at 30fps = 100ms -> half-open, not covered
        mask = ds.align_local_tokens(a, 6, 30)
        assert mask[2] and not mask[3]

    def test_segment_beyond_clip_rejected(self):
        a = ds.TextAnnotation(global_tokens=["x"],
                              local_segments=[ds.LocalSegment(0, 10_000, ["go"])])
        with pytest.raises(ValidationError):
            ds.align_local_tokens(a, 30, 30)


# Published per-genre token totals used as a golden consistency fixture.
GENRE_TABLE = {
    "hiphop": (84, 233, 629, 862),
    "krumping": (18, 62, 437, 499),
    "popping": (42, 124, 528, 652),
    "locking": (18, 40, 154, 194),
    "jazz": (52, 89, 345, 434),
    "charleston": (50, 134, 465, 599),
    "tapping": (11, 27, 45, 72),
}


def build_table_fixture() -> list[ds.DecoupledSample]:
    """One synthetic clip per genre whose duration/token counts hit the table."""
    samples = []
    for genre, (minutes, n_global, n_local, _) in GENRE_TABLE.items():
        frames = minutes * 60 * ds.DEFAULT_FPS
        motion = ds.MotionSequence(np.zeros((frames, 1)), fps=ds.DEFAULT_FPS)
        audio = ds.AudioFeatures(frames=np.zeros((frames, 3)),
                                 beat_frames=np.arange(0, frames, 15), fps=ds.DEFAULT_FPS)
        segments = [ds.LocalSegment(1000 * i, 1000 * i + 500, [f"move {i}"])
                    for i in range(n_local)]
        text = ds.TextAnnotation(
            global_tokens=[f"tok {i}" for i in range(n_global)],
            local_segments=segments,
        )
        samples.append(ds.DecoupledSample(motion=motion, audio=audio, text=text,
                                          genre=genre, clip_id=f"{genre}_fixture"))
    return samples


class TestStats:
    def test_table_fixture_counts(self):
        stats = {s.genre: s for s in ds.compute_stats(build_table_fixture())}
        for genre, (minutes, n_global, n_local, n_all) in GENRE_TABLE.items():
            row = stats[genre]
            assert row.full_time_minutes == pytest.approx(minutes)
            assert row.global_token_count == n_global
            assert row.local_token_count == n_local
            assert row.all_token_count == n_all

    def test_additivity_all_genres(self):
        for row in ds.compute_stats(build_table_fixture()):
            assert row.all_token_count == row.global_token_count + row.local_token_count

    def test_empty_input(self):
        assert ds.compute_stats([]) == []

    def test_token_frequencies(self):
        samples = ds.synthesize_toy_dataset(ds.ToyDatasetSpec(clips=4, frames=48,
                                                              pose_dim=4), 0)
        rows = ds.token_frequencies(samples)
        assert all(len(r) == 4 for r in rows)
        total = sum(count for *_rest, count in rows)
        expected = sum(len(s.text.global_tokens)
                       + sum(len(seg.tokens) for seg in s.text.local_segments)
                       for s in samples)
        assert total == expected


class TestBinaryFormats:
    def test_motion_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        motion = ds.MotionSequence(rng.standard_normal((20, 5)).astype(np.float32),
                                   fps=30)
        path = tmp_path / "clip.mot"
        ds.write_motion(path, motion)
        back = ds.read_motion(path)
        assert back.fps == 30
        assert np.allclose(back.frames, motion.frames, atol=1e-6)

    def test_motion_magic_checked(self, tmp_path):
        path = tmp_path / "bad.mot"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(ValidationError):
            ds.read_motion(path)

    def test_audio_roundtrip_with_beats(self, tmp_path):
        rng = np.random.default_rng(1)
        audio = ds.AudioFeatures(frames=rng.standard_normal((25, 3)),
                                 beat_frames=np.array([0, 8, 16, 24]), fps=30)
        path = tmp_path / "clip.aud"
        ds.write_audio(path, audio)
        back = ds.read_audio(path)
        assert np.array_equal(back.beat_frames, audio.beat_frames)
        assert np.allclose(back.frames, audio.frames, atol=1e-6)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "trunc.mot"
        good = tmp_path / "good.mot"
        ds.write_motion(good, ds.MotionSequence(np.zeros((10, 4))))
        path.write_bytes(good.read_bytes()[:-8])
        with pytest.raises(ValidationError):
            ds.read_motion(path)


class TestManifest:
    def test_write_load_roundtrip(self, tmp_path):
        samples = ds.synthesize_toy_dataset(ds.ToyDatasetSpec(clips=3, frames=48,
                                                              pose_dim=4), 5)
        manifest = ds.write_dataset(samples, tmp_path)
        loaded = ds.load_manifest(manifest)
        assert [s.clip_id for s in loaded] == [s.clip_id for s in samples]
        for a, b in zip(loaded, samples):
            assert np.allclose(a.motion.frames, b.motion.frames, atol=1e-6)
            assert a.text == b.text
        assert ds.validate_samples(loaded) == []

    def test_corrupt_annotation_reported(self, tmp_path):
        samples = ds.synthesize_toy_dataset(ds.ToyDatasetSpec(clips=1, frames=48,
                                                              pose_dim=4), 5)
        manifest = ds.write_dataset(samples, tmp_path)
        ann = tmp_path / f"{samples[0].clip_id}.txt"
        ann.write_text("garbage\n")
        with pytest.raises(ValidationError):
            ds.load_manifest(manifest)


class TestValidation:
    def test_frame_count_mismatch_caught(self):
        motion = ds.MotionSequence(np.zeros((10, 4)))
        audio = ds.AudioFeatures(frames=np.zeros((12, 3)), beat_frames=np.array([1]))
        text = ds.TextAnnotation(global_tokens=["x"])
        sample = ds.DecoupledSample(motion=motion, audio=audio, text=text,
                                    genre="jazz", clip_id="c0")
        assert any("frames" in p for p in ds.validate_samples([sample]))

    def test_beats_out_of_range_caught(self):
        motion = ds.MotionSequence(np.zeros((10, 4)))
        audio = ds.AudioFeatures(frames=np.zeros((10, 3)), beat_frames=np.array([3, 99]))
        text = ds.TextAnnotation(global_tokens=["x"])
        sample = ds.DecoupledSample(motion=motion, audio=audio, text=text,
                                    genre="jazz", clip_id="c0")
        assert ds.validate_samples([sample])

    def test_segment_past_end_caught(self):
        motion = ds.MotionSequence(np.zeros((10, 4)))
        audio = ds.AudioFeatures(frames=np.zeros((10, 3)), beat_frames=np.array([3]))
        text = ds.TextAnnotation(global_tokens=["x"],
                                 local_segments=[ds.LocalSegment(0, 99_999, ["a"])])
        sample = ds.DecoupledSample(motion=motion, audio=audio, text=text,
                                    genre="jazz", clip_id="c0")
        assert ds.validate_samples([sample])


class TestToyGenerator:
    def test_same_seed_identical(self):
        spec = ds.ToyDatasetSpec(clips=4, frames=64, pose_dim=6)
        a = ds.synthesize_toy_dataset(spec, 9)
        b = ds.synthesize_toy_dataset(spec, 9)
        for s1, s2 in zip(a, b):
            assert np.array_equal(s1.motion.frames, s2.motion.frames)
            assert np.array_equal(s1.audio.frames, s2.audio.frames)
            assert s1.text == s2.text

    def test_genres_have_distinct_spectral_peaks(self):
        spec = ds.ToyDatasetSpec(clips=2, frames=256, pose_dim=4,
                                 genres=("hiphop", "popping"))
        samples = ds.synthesize_toy_dataset(spec, 1)
        peaks = []
        for s in samples:
            mag = np.abs(np.fft.rfft(s.motion.frames[:, 0]))
            mag[0] = 0.0
            peaks.append(mag.argmax())
        assert peaks[0] != peaks[1]

    def test_samples_pass_invariants(self):
        samples = ds.synthesize_toy_dataset(ds.ToyDatasetSpec(clips=5, frames=96,
                                                              pose_dim=8), 2)
        assert ds.validate_samples(samples) == []

    def test_beats_at_pulse_maxima(self):
        samples = ds.synthesize_toy_dataset(ds.ToyDatasetSpec(clips=1, frames=96,
                                                              pose_dim=4), 3)
        audio = samples[0].audio
        pulse = audio.frames[:, 0]
        for b in audio.beat_frames[1:-1]:
            assert pulse[b] >= pulse[b - 1] and pulse[b] >= pulse[b + 1]


class TestClipSplit:
    def test_partition_and_determinism(self):
        ids = [f"clip_{i}" for i in range(200)]
        train1, test1 = ds.split_clips(ids, 0.25)
        train2, test2 = ds.split_clips(ids, 0.25)
        assert train1 == train2 and test1 == test2
        assert set(train1) | set(test1) == set(ids)
        assert not set(train1) & set(test1)
        assert 0.1 < len(test1) / len(ids) < 0.4
