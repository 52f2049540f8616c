import os
import struct

import numpy as np
import pytest

from scentvc.features import (
    SILENCE_ID,
    BottleneckTrack,
    FeatureTrack,
    LabelFormatError,
    PhonemeInventory,
    TrackFormatError,
    format_lab,
    frame_labels,
    gen_synthetic_pair,
    generate_pairs,
    parse_lab,
    read_bottleneck,
    read_manifest,
    read_track,
    upsample_repeat,
    write_manifest,
    write_track,
)

LAB = """0 50 sil
50 120 a@1
120 200 b@3
200 260 sil
260 300 a@4
300 380 sil
"""


def test_parse_lab_roundtrip():
    inv = PhonemeInventory()
    lab = parse_lab(LAB, inv)
    assert len(lab) == 6
    assert inv.id("sil") == SILENCE_ID
    assert lab.content() == [(1, 1), (2, 3), (1, 4)]
    assert [s.start_ms for s in lab.silences()] == [0, 200, 300]
    assert format_lab(lab, inv) == LAB


@pytest.mark.parametrize(
    "text, message",
    [
        ("", "empty label file"),
        ("0 50 sil\n60 90 a@1\n", "gap at line 2"),
        ("0 50 sil\n40 90 a@1\n", "overlap at line 2"),
        ("-10 50 sil\n", "negative time at line 1"),
        ("0 50 sil\n50 90 a\n", "not 'sil' or 'phoneme@tone'"),
        ("0 50 sil\n50 90 a@9\n", "tone 9 out of range"),
        ("0 50 sil@2\n", "silence cannot carry a tone"),
        ("0 50\n", "expected 3 fields"),
        ("0 x sil\n", "non-integer time"),
    ],
)
def test_parse_lab_errors(text, message):
    with pytest.raises(LabelFormatError, match=message):
        parse_lab(text)


def test_frame_labels_match_per_frame_lookup():
    inv = PhonemeInventory()
    lab = parse_lab(LAB, inv)
    hop = 10.0
    n = 38
    got = frame_labels(lab, hop, n)
    # oracle: linear scan, a frame on a boundary belongs to the later segment
    for t in range(n):
        time = t * hop
        seg = next(s for s in lab if s.start_ms <= time < s.end_ms)
        assert tuple(got[t]) == (seg.phoneme_id, seg.tone_id)
    with pytest.raises(ValueError):
        frame_labels(lab, hop, 39)


def test_upsample_repeat_rows():
    bn = np.arange(12, dtype=np.float32).reshape(4, 3)
    out = upsample_repeat(bn, 4)
    assert out.shape == (16, 3)
    for i in range(16):
        np.testing.assert_array_equal(out[i], bn[i // 4])
    np.testing.assert_array_equal(upsample_repeat(bn, 4, 14), out[:14])
    held = upsample_repeat(bn, 4, 19)
    np.testing.assert_array_equal(held[16:], np.repeat(bn[-1:], 3, axis=0))
    with pytest.raises(ValueError):
        upsample_repeat(bn, 4, 20)
    with pytest.raises(ValueError):
        upsample_repeat(bn, 0)


def test_track_file_layout(tmp_path):
    frames = np.arange(6, dtype=np.float32).reshape(3, 2) / 7
    path = tmp_path / "x.trk"
    write_track(path, FeatureTrack(frames, hop_ms=5.0))
    raw = path.read_bytes()
    assert raw[:4] == b"SCNT"
    assert struct.unpack("<IIII", raw[4:20]) == (1, 3, 2, 5000)
    np.testing.assert_array_equal(np.frombuffer(raw[20:], "<f4").reshape(3, 2), frames)
    back = read_track(path)
    assert back.hop_ms == 5.0
    np.testing.assert_array_equal(back.frames, frames)


def test_track_file_errors(tmp_path):
    path = tmp_path / "x.trk"
    write_track(path, FeatureTrack(np.ones((3, 2))))
    raw = path.read_bytes()
    (tmp_path / "magic.trk").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.trk").write_bytes(raw[:-4])
    (tmp_path / "long.trk").write_bytes(raw + b"\0" * 4)
    (tmp_path / "head.trk").write_bytes(raw[:10])
    with pytest.raises(TrackFormatError, match="bad magic"):
        read_track(tmp_path / "magic.trk")
    with pytest.raises(TrackFormatError, match="truncated"):
        read_track(tmp_path / "short.trk")
    with pytest.raises(TrackFormatError, match="dimension mismatch"):
        read_track(tmp_path / "long.trk")
    with pytest.raises(TrackFormatError, match="truncated header"):
        read_track(tmp_path / "head.trk")


def test_bottleneck_rate_from_hop(tmp_path):
    bn = BottleneckTrack(np.ones((5, 4)), rate_divisor=4)
    write_track(tmp_path / "b.bn", bn, base_hop_ms=10.0)
    back = read_bottleneck(tmp_path / "b.bn", base_hop_ms=10.0)
    assert back.rate_divisor == 4
    with pytest.raises(TrackFormatError):
        read_bottleneck(tmp_path / "b.bn", base_hop_ms=15.0)


def test_feature_track_validation():
    with pytest.raises(ValueError):
        FeatureTrack(np.ones(5))
    with pytest.raises(ValueError):
        FeatureTrack(np.full((3, 2), np.nan))
    with pytest.raises(ValueError):
        FeatureTrack(np.ones((3, 2)), hop_ms=0)


def test_generator_is_deterministic(corpus):
    a = generate_pairs(corpus, 3, seed=11)
    b = generate_pairs(corpus, 3, seed=11)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.src.frames, y.src.frames)
        np.testing.assert_array_equal(x.tgt.frames, y.tgt.frames)
        np.testing.assert_array_equal(x.src_bn.frames, y.src_bn.frames)
    c = generate_pairs(corpus, 3, seed=12)
    assert not np.array_equal(a[0].src.frames, c[0].src.frames)


def test_generator_pairs_are_consistent(pairs):
    for p in pairs:
        p.check()
        assert p.src_lab.duration_ms == p.src.num_frames * p.src.hop_ms
        assert p.tgt_lab.duration_ms == p.tgt.num_frames * p.tgt.hop_ms
        assert p.src_bn.frames.shape[0] == -(-p.src.num_frames // p.src_bn.rate_divisor)
        # pitch is zero exactly on silence frames
        labels = frame_labels(p.tgt_lab, p.tgt.hop_ms, p.tgt.num_frames)[:, 0]
        np.testing.assert_array_equal(p.tgt.pitch == 0, labels == SILENCE_ID)


def test_gen_synthetic_pair_rejects_bad_sequence(corpus):
    with pytest.raises(ValueError):
        gen_synthetic_pair([(1, 1)], corpus.src_spec, corpus.tgt_spec, seed=0)
    with pytest.raises(ValueError):
        gen_synthetic_pair([], corpus.src_spec, corpus.tgt_spec, seed=0)


def test_manifest_roundtrip(tmp_path, corpus, pairs):
    path = write_manifest(pairs[:3], corpus.inventory, tmp_path, "m")
    rows = open(path).read().strip().split("\n")
    assert all(len(r.split("\t")) == 6 for r in rows)
    back, inv = read_manifest(path)
    assert [p.id for p in back] == [p.id for p in pairs[:3]]
    for x, y in zip(back, pairs):
        np.testing.assert_array_equal(x.src.frames, y.src.frames)
        np.testing.assert_array_equal(x.src_bn.frames, y.src_bn.frames)
        assert x.src_bn.rate_divisor == y.src_bn.rate_divisor
        names = lambda lab, i: [(i.name(p), t) for p, t in lab.content()]  # noqa: E731
        assert names(x.tgt_lab, inv) == names(y.tgt_lab, corpus.inventory)


def test_manifest_bad_row(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("a\tb\tc\n")
    with pytest.raises(ValueError, match="6 tab-separated"):
        read_manifest(path)
    os.remove(path)
