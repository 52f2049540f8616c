"""Feature tracks, forced-alignment labels, file formats and the synthetic corpus.

The synthetic generator stands in for a recorded parallel corpus: two
"speakers" render the same phoneme-with-tone sequence with their own spectral
prototypes, durations and pitch, and the source side gets frame-rate-reduced
bottleneck features that carry (noisy) phoneme identity.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

SILENCE = "sil"
SILENCE_ID = 0
NO_TONE = 0

TRACK_MAGIC = b"SCNT"
TRACK_VERSION = 1
_TRACK_HEADER = struct.Struct("<4sIIII")


class LabelFormatError(ValueError):
    pass


class TrackFormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# data types
# --------------------------------------------------------------------------


@dataclass
class FeatureTrack:
    """Time-major frames ``[T, D]``; the pitch channel is the last column."""

    frames: np.ndarray
    hop_ms: float = 10.0
    pitch_channel: int = -1

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2:
            raise ValueError("frames must be a [T, D] matrix")
        if self.frames.shape[0] < 1 or self.frames.shape[1] < 2:
            raise ValueError(f"track needs T >= 1 and D >= 2, got {self.frames.shape}")
        if self.hop_ms <= 0:
            raise ValueError("hop_ms must be positive")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("track contains non-finite values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def pitch(self) -> np.ndarray:
        return self.frames[:, self.pitch_channel]

    @property
    def spectral(self) -> np.ndarray:
        keep = np.ones(self.dim, dtype=bool)
        keep[self.pitch_channel] = False
        return self.frames[:, keep]


@dataclass
class BottleneckTrack:
    """Bottleneck frames, ``rate_divisor`` times sparser than the feature track."""

    frames: np.ndarray
    rate_divisor: int = 4

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise ValueError(f"bottleneck frames must be [T_b >= 1, D_b >= 1], got {self.frames.shape}")
        if self.rate_divisor < 1:
            raise ValueError("rate_divisor must be >= 1")


@dataclass(frozen=True)
class Segment:
    start_ms: int
    end_ms: int
    phoneme_id: int
    tone_id: int

    @property
    def is_silence(self) -> bool:
        return self.phoneme_id == SILENCE_ID


@dataclass
class SegmentSeq:
    segments: list[Segment]
    inventory_size: int
    tone_count: int = 5

    def __post_init__(self):
        prev_end = 0
        for i, seg in enumerate(self.segments):
            if seg.start_ms != prev_end:
                raise LabelFormatError(f"segment {i} starts at {seg.start_ms}, expected {prev_end}")
            if seg.end_ms <= seg.start_ms:
                raise LabelFormatError(f"segment {i} is empty or reversed")
            if seg.is_silence and seg.tone_id != NO_TONE:
                raise LabelFormatError(f"silence segment {i} carries tone {seg.tone_id}")
            prev_end = seg.end_ms

    def __len__(self):
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    @property
    def duration_ms(self) -> int:
        return self.segments[-1].end_ms if self.segments else 0

    def content(self) -> list[tuple[int, int]]:
        """Non-silence (phoneme, tone) sequence."""
        return [(s.phoneme_id, s.tone_id) for s in self.segments if not s.is_silence]

    def silences(self) -> list[Segment]:
        return [s for s in self.segments if s.is_silence]


class PhonemeInventory:
    """Name <-> id table with ``sil`` pinned to id 0."""

    def __init__(self, names: Iterable[str] = ()):
        self.names: list[str] = [SILENCE]
        self._ids: dict[str, int] = {SILENCE: SILENCE_ID}
        for name in names:
            self.add(name)

    def add(self, name: str) -> int:
        if name not in self._ids:
            self._ids[name] = len(self.names)
            self.names.append(name)
        return self._ids[name]

    def id(self, name: str) -> int:
        return self._ids[name]

    def name(self, idx: int) -> str:
        return self.names[idx]

    def __len__(self):
        return len(self.names)

    def __contains__(self, name):
        return name in self._ids


@dataclass
class UtterancePair:
    id: str
    src: FeatureTrack
    tgt: FeatureTrack
    src_lab: SegmentSeq
    tgt_lab: SegmentSeq
    src_bn: BottleneckTrack

    def check(self):
        if self.src_lab.content() != self.tgt_lab.content():
            raise ValueError(f"pair {self.id}: source and target label contents differ")


# --------------------------------------------------------------------------
# labels
# --------------------------------------------------------------------------


def parse_lab(text: str, inventory: PhonemeInventory | None = None, tone_count: int = 5) -> SegmentSeq:
    """Parse ``start_ms end_ms label`` lines into a contiguous :class:`SegmentSeq`.

    ``label`` is ``sil`` or ``phoneme@tone``. Unknown phoneme names are added
    to ``inventory``, which therefore grows across calls sharing it.
    """
    if inventory is None:
        inventory = PhonemeInventory()
    segments = []
    prev_end = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 3:
            raise LabelFormatError(f"expected 3 fields at line {lineno}, got {len(fields)}")
        try:
            start, end = int(fields[0]), int(fields[1])
        except ValueError:
            raise LabelFormatError(f"non-integer time at line {lineno}") from None
        if start < 0 or end < 0:
            raise LabelFormatError(f"negative time at line {lineno}")
        if end <= start:
            raise LabelFormatError(f"empty or reversed span at line {lineno}")
        if start > prev_end:
            raise LabelFormatError(f"gap at line {lineno}")
        if start < prev_end:
            raise LabelFormatError(f"overlap at line {lineno}")
        label = fields[2]
        if label == SILENCE:
            phoneme, tone = SILENCE_ID, NO_TONE
        else:
            name, sep, tone_str = label.partition("@")
            if not sep or not name or not tone_str.isdigit():
                raise LabelFormatError(f"label {label!r} at line {lineno} is not 'sil' or 'phoneme@tone'")
            tone = int(tone_str)
            if not 1 <= tone < tone_count:
                raise LabelFormatError(f"tone {tone} out of range at line {lineno}")
            if name == SILENCE:
                raise LabelFormatError(f"silence cannot carry a tone at line {lineno}")
            phoneme = inventory.add(name)
        segments.append(Segment(start, end, phoneme, tone))
        prev_end = end
    if not segments:
        raise LabelFormatError("empty label file")
    return SegmentSeq(segments, inventory_size=len(inventory), tone_count=tone_count)


def format_lab(lab: SegmentSeq, inventory: PhonemeInventory) -> str:
    lines = []
    for seg in lab:
        label = SILENCE if seg.is_silence else f"{inventory.name(seg.phoneme_id)}@{seg.tone_id}"
        lines.append(f"{seg.start_ms} {seg.end_ms} {label}")
    return "\n".join(lines) + "\n"


def frame_labels(lab: SegmentSeq, hop_ms: float, num_frames: int) -> np.ndarray:
    """Per-frame ``(phoneme_id, tone_id)`` as an int64 array of shape ``[T, 2]``.

    Frame ``t`` sits at time ``t * hop_ms``; a frame on a boundary belongs to
    the later segment.
    """
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    if lab.duration_ms <= (num_frames - 1) * hop_ms:
        raise ValueError(
            f"labels cover {lab.duration_ms} ms but {num_frames} frames at {hop_ms} ms need more than "
            f"{(num_frames - 1) * hop_ms} ms"
        )
    times = np.arange(num_frames) * hop_ms
    ends = np.array([s.end_ms for s in lab.segments], dtype=np.float64)
    idx = np.searchsorted(ends, times, side="right")
    table = np.array([(s.phoneme_id, s.tone_id) for s in lab.segments], dtype=np.int64)
    return table[idx]


# --------------------------------------------------------------------------
# bottleneck upsampling
# --------------------------------------------------------------------------


def upsample_repeat(bn: BottleneckTrack | np.ndarray, r: int, length: int | None = None) -> np.ndarray:
    """Repeat every bottleneck row ``r`` times; optionally cut/extend to ``length`` rows.

    Row ``i`` of the result is input row ``i // r``. When paired with a
    feature track that is longer than ``T_b * r`` by fewer than ``r`` frames
    the last row is held.
    """
    if r <= 0:
        raise ValueError(f"repeat factor must be positive, got {r}")
    frames = bn.frames if isinstance(bn, BottleneckTrack) else np.asarray(bn)
    out = np.repeat(frames, r, axis=0)
    if length is None:
        return out
    if length > out.shape[0]:
        short = length - out.shape[0]
        if short >= r:
            raise ValueError(f"bottleneck track too short: {out.shape[0]} upsampled rows for {length} frames")
        out = np.concatenate([out, np.repeat(out[-1:], short, axis=0)], axis=0)
    return out[:length]


# --------------------------------------------------------------------------
# binary track files
# --------------------------------------------------------------------------


def write_track(path, track: FeatureTrack | BottleneckTrack, base_hop_ms: float = 10.0) -> None:
    if isinstance(track, BottleneckTrack):
        hop_ms = base_hop_ms * track.rate_divisor
    else:
        hop_ms = track.hop_ms
    frames = np.ascontiguousarray(track.frames, dtype="<f4")
    header = _TRACK_HEADER.pack(TRACK_MAGIC, TRACK_VERSION, frames.shape[0], frames.shape[1],
                                int(round(hop_ms * 1000)))
    with open(path, "wb") as f:
        f.write(header)
        f.write(frames.tobytes())


def _read_raw(path) -> tuple[np.ndarray, float]:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _TRACK_HEADER.size:
        raise TrackFormatError(f"{path}: truncated header")
    magic, version, n_frames, dim, hop_us = _TRACK_HEADER.unpack_from(data)
    if magic != TRACK_MAGIC:
        raise TrackFormatError(f"{path}: bad magic {magic!r}")
    if version != TRACK_VERSION:
        raise TrackFormatError(f"{path}: unsupported version {version}")
    if dim == 0 or n_frames == 0:
        raise TrackFormatError(f"{path}: dimension mismatch (T={n_frames}, D={dim})")
    expected = n_frames * dim * 4
    payload = data[_TRACK_HEADER.size:]
    if len(payload) < expected:
        raise TrackFormatError(f"{path}: truncated, header says {n_frames} frames")
    if len(payload) > expected:
        raise TrackFormatError(f"{path}: dimension mismatch, {len(payload) - expected} trailing bytes")
    frames = np.frombuffer(payload, dtype="<f4").reshape(n_frames, dim).astype(np.float32)
    return frames, hop_us / 1000.0


def read_track(path) -> FeatureTrack:
    frames, hop_ms = _read_raw(path)
    return FeatureTrack(frames, hop_ms=hop_ms)


def read_bottleneck(path, base_hop_ms: float = 10.0) -> BottleneckTrack:
    frames, hop_ms = _read_raw(path)
    ratio = hop_ms / base_hop_ms
    if ratio < 1 or abs(ratio - round(ratio)) > 1e-6:
        raise TrackFormatError(f"{path}: hop {hop_ms} ms is not a multiple of {base_hop_ms} ms")
    return BottleneckTrack(frames, rate_divisor=int(round(ratio)))


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------


def read_manifest(path, inventory: PhonemeInventory | None = None) -> tuple[list[UtterancePair], PhonemeInventory]:
    """Load every pair listed in a tab-separated manifest.

    Paths inside the manifest are relative to the manifest's directory.
    """
    if inventory is None:
        inventory = PhonemeInventory()
    root = os.path.dirname(os.path.abspath(path))
    pairs = []
    with open(path, encoding="utf-8") as f:
        rows = [line.rstrip("\n") for line in f if line.strip()]
    for lineno, row in enumerate(rows, start=1):
        fields = row.split("\t")
        if len(fields) != 6:
            raise ValueError(f"{path}:{lineno}: expected 6 tab-separated fields, got {len(fields)}")
        uid, src, tgt, src_lab, tgt_lab, src_bn = fields
        full = [os.path.join(root, p) for p in (src, tgt, src_lab, tgt_lab, src_bn)]
        src_track = read_track(full[0])
        with open(full[2], encoding="utf-8") as fl:
            src_seq = parse_lab(fl.read(), inventory)
        with open(full[3], encoding="utf-8") as fl:
            tgt_seq = parse_lab(fl.read(), inventory)
        pairs.append(UtterancePair(
            id=uid,
            src=src_track,
            tgt=read_track(full[1]),
            src_lab=src_seq,
            tgt_lab=tgt_seq,
            src_bn=read_bottleneck(full[4], base_hop_ms=src_track.hop_ms),
        ))
    # inventory may have grown while parsing; make sizes consistent
    for pair in pairs:
        pair.src_lab.inventory_size = pair.tgt_lab.inventory_size = len(inventory)
    return pairs, inventory


def write_manifest(pairs: Sequence[UtterancePair], inventory: PhonemeInventory, out_dir, name: str) -> str:
    """Write tracks, labels and a manifest ``<out_dir>/<name>.tsv``; returns the manifest path."""
    data_dir = os.path.join(out_dir, name)
    os.makedirs(data_dir, exist_ok=True)
    rows = []
    for pair in pairs:
        rel = {
            "src": f"{name}/{pair.id}.src.trk",
            "tgt": f"{name}/{pair.id}.tgt.trk",
            "src_lab": f"{name}/{pair.id}.src.lab",
            "tgt_lab": f"{name}/{pair.id}.tgt.lab",
            "src_bn": f"{name}/{pair.id}.src.bn",
        }
        write_track(os.path.join(out_dir, rel["src"]), pair.src)
        write_track(os.path.join(out_dir, rel["tgt"]), pair.tgt)
        write_track(os.path.join(out_dir, rel["src_bn"]), pair.src_bn, base_hop_ms=pair.src.hop_ms)
        for key, lab in (("src_lab", pair.src_lab), ("tgt_lab", pair.tgt_lab)):
            with open(os.path.join(out_dir, rel[key]), "w", encoding="utf-8") as f:
                f.write(format_lab(lab, inventory))
        rows.append("\t".join([pair.id, rel["src"], rel["tgt"], rel["src_lab"], rel["tgt_lab"], rel["src_bn"]]))
    manifest = os.path.join(out_dir, f"{name}.tsv")
    with open(manifest, "w", encoding="utf-8") as f:
        f.write("\n".join(rows) + "\n")
    return manifest


# --------------------------------------------------------------------------
# synthetic corpus
# --------------------------------------------------------------------------

# Semitone offsets from the speaker base at the start, middle and end of a toned segment.
DEFAULT_TONE_CONTOURS = {
    1: (4.0, 4.0, 4.0),
    2: (-1.0, 1.0, 5.0),
    3: (-2.0, -6.0, -1.0),
    4: (6.0, 1.0, -5.0),
}

DEFAULT_PHONEMES = ("b", "d", "g", "m", "n", "l", "s", "sh", "a", "o", "e", "i", "u", "ai", "ang")


@dataclass
class SpeakerRenderSpec:
    prototypes: np.ndarray  # [P, D - 1], row 0 is silence
    mean_duration_ms: np.ndarray  # [P]
    duration_jitter: float = 0.2
    pitch_base_hz: float = 120.0
    tone_contours: dict = field(default_factory=lambda: dict(DEFAULT_TONE_CONTOURS))
    noise_sigma: float = 0.1
    transition_frames: int = 3
    seed: int = 0

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        self.mean_duration_ms = np.asarray(self.mean_duration_ms, dtype=np.float64)
        if np.any(self.mean_duration_ms <= 0):
            raise ValueError("mean durations must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if not 0 <= self.duration_jitter < 1:
            raise ValueError("duration jitter must be in [0, 1)")
        if self.transition_frames < 1:
            raise ValueError("transition_frames must be >= 1")


@dataclass
class CorpusConfig:
    """Knobs for the synthetic parallel corpus."""

    feat_dim: int = 20
    bottleneck_dim: int = 16
    rate_divisor: int = 4
    hop_ms: float = 10.0
    phonemes: tuple = DEFAULT_PHONEMES
    tone_count: int = 5
    # probabilities of 0, 1, 2, 3 clause-internal silences; mean 1.15 -> 3.15 alignment points
    clause_break_probs: tuple = (0.25, 0.4, 0.3, 0.05)
    phonemes_per_clause: tuple = (2, 4)
    src_duration_ms: tuple = (30.0, 60.0)
    tgt_duration_scale: float = 1.0
    silence_duration_ms: tuple = (50.0, 80.0)
    src_pitch_hz: float = 120.0
    tgt_pitch_hz: float = 220.0
    noise_sigma: float = 0.1
    bn_noise: float = 0.6
    seed: int = 1234


@dataclass
class SyntheticCorpus:
    config: CorpusConfig
    inventory: PhonemeInventory
    src_spec: SpeakerRenderSpec
    tgt_spec: SpeakerRenderSpec
    bn_table: np.ndarray


def _smooth_rows(x: np.ndarray, width: int = 3) -> np.ndarray:
    kernel = np.ones(width) / width
    return np.stack([np.convolve(row, kernel, mode="same") for row in x])


def make_corpus(config: CorpusConfig | None = None) -> SyntheticCorpus:
    """Build the two speakers and the speaker-independent bottleneck table."""
    config = config or CorpusConfig()
    rng = np.random.default_rng(config.seed)
    inventory = PhonemeInventory(config.phonemes)
    n_ph = len(inventory)
    n_spec = config.feat_dim - 1

    src_proto = _smooth_rows(rng.normal(0.0, 1.5, size=(n_ph, n_spec)))
    # target prototypes are related to the source ones but not a plain copy
    tilt = np.linspace(-0.8, 0.8, n_spec)
    tgt_proto = 0.6 * src_proto + 0.8 * _smooth_rows(rng.normal(0.0, 1.2, size=(n_ph, n_spec))) + tilt
    silence_floor = -3.0
    src_proto[SILENCE_ID] = silence_floor
    tgt_proto[SILENCE_ID] = silence_floor + 0.5

    lo, hi = config.src_duration_ms
    src_dur = rng.uniform(lo, hi, size=n_ph)
    tgt_dur = src_dur * config.tgt_duration_scale * rng.uniform(0.8, 1.2, size=n_ph)
    src_dur[SILENCE_ID] = tgt_dur[SILENCE_ID] = float(np.mean(config.silence_duration_ms))

    src_spec = SpeakerRenderSpec(src_proto, src_dur, pitch_base_hz=config.src_pitch_hz,
                                 noise_sigma=config.noise_sigma, seed=config.seed)
    tgt_spec = SpeakerRenderSpec(tgt_proto, tgt_dur, pitch_base_hz=config.tgt_pitch_hz,
                                 noise_sigma=config.noise_sigma, seed=config.seed + 1)
    bn_table = rng.normal(0.0, 1.0, size=(n_ph, config.bottleneck_dim))
    return SyntheticCorpus(config, inventory, src_spec, tgt_spec, bn_table)


def sample_phoneme_sequence(rng: np.random.Generator, config: CorpusConfig, n_phonemes: int) -> list[tuple[int, int]]:
    """Random clause structure: ``sil clause (sil clause)* sil`` with toned phonemes."""
    n_breaks = rng.choice(len(config.clause_break_probs), p=config.clause_break_probs)
    seq = [(SILENCE_ID, NO_TONE)]
    lo, hi = config.phonemes_per_clause
    for clause in range(n_breaks + 1):
        if clause:
            seq.append((SILENCE_ID, NO_TONE))
        for _ in range(rng.integers(lo, hi + 1)):
            seq.append((int(rng.integers(1, n_phonemes)), int(rng.integers(1, config.tone_count))))
    seq.append((SILENCE_ID, NO_TONE))
    return seq


def _render(seq, spec: SpeakerRenderSpec, hop_ms: float, rng: np.random.Generator, tone_count: int):
    durations = []
    for phoneme, _ in seq:
        ms = spec.mean_duration_ms[phoneme] * (1.0 + spec.duration_jitter * rng.uniform(-1.0, 1.0))
        durations.append(max(1, int(round(ms / hop_ms))))
    bounds = np.concatenate([[0], np.cumsum(durations)])
    n_frames = int(bounds[-1])

    # steady-state segments joined by short cross-fades
    ids = np.repeat([p for p, _ in seq], durations)
    steps = spec.prototypes[ids]
    w = spec.transition_frames
    if w > 1:
        padded = np.pad(steps, ((w // 2, w - 1 - w // 2), (0, 0)), mode="edge")
        steps = np.lib.stride_tricks.sliding_window_view(padded, w, axis=0).mean(-1)
    spectral = steps.copy()
    spectral += rng.normal(0.0, spec.noise_sigma, size=spectral.shape) if spec.noise_sigma > 0 else 0.0

    pitch = np.zeros(n_frames)
    for (phoneme, tone), start, stop in zip(seq, bounds[:-1], bounds[1:]):
        if phoneme == SILENCE_ID:
            continue
        a, b, c = spec.tone_contours[tone]
        u = (np.arange(stop - start) + 0.5) / (stop - start)
        semitones = np.interp(u, [0.0, 0.5, 1.0], [a, b, c])
        pitch[start:stop] = spec.pitch_base_hz * 2.0 ** (semitones / 12.0)

    frames = np.concatenate([spectral, pitch[:, None]], axis=1)
    segments = [
        Segment(int(start * hop_ms), int(stop * hop_ms), int(p), int(tone))
        for (p, tone), start, stop in zip(seq, bounds[:-1], bounds[1:])
    ]
    lab = SegmentSeq(segments, inventory_size=spec.prototypes.shape[0], tone_count=tone_count)
    return FeatureTrack(frames, hop_ms=hop_ms), lab


def gen_synthetic_pair(
    phoneme_seq: Sequence[tuple[int, int]],
    src_spec: SpeakerRenderSpec,
    tgt_spec: SpeakerRenderSpec,
    seed: int,
    bn_table: np.ndarray | None = None,
    *,
    bn_noise: float = 0.6,
    rate_divisor: int = 4,
    hop_ms: float = 10.0,
    tone_count: int = 5,
    uid: str | None = None,
) -> UtterancePair:
    """Render one parallel pair; the same arguments always give identical arrays."""
    if len(phoneme_seq) == 0:
        raise ValueError("empty phoneme sequence")
    if phoneme_seq[0][0] != SILENCE_ID or phoneme_seq[-1][0] != SILENCE_ID:
        raise ValueError("phoneme sequence must begin and end with silence")
    if bn_table is None:
        bn_table = np.random.default_rng(0).normal(size=(src_spec.prototypes.shape[0], 16))
    src_rng, tgt_rng, bn_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))

    src, src_lab = _render(phoneme_seq, src_spec, hop_ms, src_rng, tone_count)
    tgt, tgt_lab = _render(phoneme_seq, tgt_spec, hop_ms, tgt_rng, tone_count)

    n_bn = math.ceil(src.num_frames / rate_divisor)
    ids = frame_labels(src_lab, hop_ms, src.num_frames)[:, 0]
    bn = bn_table[ids[np.arange(n_bn) * rate_divisor]]
    if bn_noise > 0:
        bn = bn + bn_rng.normal(0.0, bn_noise, size=bn.shape)
    return UtterancePair(
        id=uid or f"utt{seed}",
        src=src,
        tgt=tgt,
        src_lab=src_lab,
        tgt_lab=tgt_lab,
        src_bn=BottleneckTrack(bn, rate_divisor=rate_divisor),
    )


def generate_pairs(corpus: SyntheticCorpus, count: int, seed: int, prefix: str = "utt") -> list[UtterancePair]:
    cfg = corpus.config
    seq_rng = np.random.default_rng(seed)
    pairs = []
    for i in range(count):
        seq = sample_phoneme_sequence(seq_rng, cfg, len(corpus.inventory))
        pairs.append(gen_synthetic_pair(
            seq, corpus.src_spec, corpus.tgt_spec, seed=seed * 100_003 + i, bn_table=corpus.bn_table,
            bn_noise=cfg.bn_noise, rate_divisor=cfg.rate_divisor, hop_ms=cfg.hop_ms,
            tone_count=cfg.tone_count, uid=f"{prefix}{i:04d}",
        ))
    return pairs
