"""Fragment augmentation from alignment points.

An alignment point is a silence shared by both utterances of a parallel
pair. Any two points delimit a pair of fragments with identical linguistic
content, so a pair with ``N`` points yields ``N * (N - 1) / 2`` fragments.
During training one of them is drawn per visit instead of the whole pair.
"""

from __future__ import annotations

import logging
import math
import zlib
from collections import Counter
from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from .features import SegmentSeq, UtterancePair, frame_labels, upsample_repeat

log = logging.getLogger(__name__)


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class AlignmentPoint:
    index: int
    src_silence: tuple[int, int]
    tgt_silence: tuple[int, int]


@dataclass(frozen=True)
class FragmentSpec:
    src_range: tuple[int, int]
    tgt_range: tuple[int, int]
    start_point: int
    end_point: int


@dataclass
class Sample:
    """One training example: source features + upsampled bottleneck, target, frame labels."""

    id: str
    src: np.ndarray  # [T, D]
    bn: np.ndarray  # [T, D_b]
    tgt: np.ndarray  # [T', D]
    src_labels: np.ndarray  # [T, 2] (phoneme, tone)
    tgt_labels: np.ndarray  # [T', 2]

    def slice(self, frag: FragmentSpec) -> "Sample":
        s0, s1 = frag.src_range
        t0, t1 = frag.tgt_range
        return Sample(
            id=f"{self.id}[{frag.start_point}:{frag.end_point}]",
            src=self.src[s0:s1],
            bn=self.bn[s0:s1],
            tgt=self.tgt[t0:t1],
            src_labels=self.src_labels[s0:s1],
            tgt_labels=self.tgt_labels[t0:t1],
        )


def _silence_positions(lab: SegmentSeq):
    """Each silence paired with the count of speech segments before it."""
    out = []
    n_speech = 0
    for seg in lab:
        if seg.is_silence:
            out.append((n_speech, (seg.start_ms, seg.end_ms)))
        else:
            n_speech += 1
    return out


def alignment_points(src_lab: SegmentSeq, tgt_lab: SegmentSeq) -> list[AlignmentPoint]:
    """Pair the k-th source silence with the k-th target silence.

    Utterance-initial and -final silences count as points.
    """
    if src_lab.content() != tgt_lab.content():
        raise AlignmentError("non-silence label sequences differ")
    src_sil = _silence_positions(src_lab)
    tgt_sil = _silence_positions(tgt_lab)
    if len(src_sil) != len(tgt_sil):
        raise AlignmentError(f"silence counts differ: {len(src_sil)} vs {len(tgt_sil)}")
    points = []
    for k, ((n_src, span_src), (n_tgt, span_tgt)) in enumerate(zip(src_sil, tgt_sil)):
        if n_src != n_tgt:
            raise AlignmentError(f"silence {k} sits after {n_src} phonemes in source but {n_tgt} in target")
        points.append(AlignmentPoint(k, span_src, span_tgt))
    return points


def _midpoint_frame(span: tuple[int, int], hop_ms: float, num_frames: int | None) -> int:
    frame = int(math.floor((span[0] + span[1]) / 2.0 / hop_ms + 0.5))
    if num_frames is not None:
        frame = min(max(frame, 0), num_frames - 1)
    return frame


def enumerate_fragments(
    points: Sequence[AlignmentPoint],
    src_lab: SegmentSeq,
    tgt_lab: SegmentSeq,
    hop_ms: float,
    src_frames: int | None = None,
    tgt_frames: int | None = None,
) -> list[FragmentSpec]:
    """All fragments between two alignment points, cut at the silence midpoints.

    Ranges are half-open and include the frame nearest each midpoint. Returns
    an empty list for fewer than two points.
    """
    if src_frames is None:
        src_frames = int(math.ceil(src_lab.duration_ms / hop_ms))
    if tgt_frames is None:
        tgt_frames = int(math.ceil(tgt_lab.duration_ms / hop_ms))
    src_cut = [_midpoint_frame(p.src_silence, hop_ms, src_frames) for p in points]
    tgt_cut = [_midpoint_frame(p.tgt_silence, hop_ms, tgt_frames) for p in points]
    return [
        FragmentSpec((src_cut[i], src_cut[j] + 1), (tgt_cut[i], tgt_cut[j] + 1), i, j)
        for i, j in combinations(range(len(points)), 2)
    ]


def whole_sample(pair: UtterancePair) -> Sample:
    """The un-augmented training example for a pair."""
    t_src, t_tgt = pair.src.num_frames, pair.tgt.num_frames
    return Sample(
        id=pair.id,
        src=pair.src.frames,
        bn=upsample_repeat(pair.src_bn, pair.src_bn.rate_divisor, t_src),
        tgt=pair.tgt.frames,
        src_labels=frame_labels(pair.src_lab, pair.src.hop_ms, t_src),
        tgt_labels=frame_labels(pair.tgt_lab, pair.tgt.hop_ms, t_tgt),
    )


def pair_fragments(pair: UtterancePair) -> list[FragmentSpec]:
    """Fragments of a pair, or ``[]`` (with a warning) when its labels do not align."""
    try:
        points = alignment_points(pair.src_lab, pair.tgt_lab)
    except AlignmentError as exc:
        log.warning("pair %s used whole: %s", pair.id, exc)
        return []
    return enumerate_fragments(points, pair.src_lab, pair.tgt_lab, pair.src.hop_ms,
                               pair.src.num_frames, pair.tgt.num_frames)


class FragmentSampler:
    """Caches the whole sample and fragment list of a pair for repeated draws."""

    def __init__(self, pair: UtterancePair):
        self.pair = pair
        self.whole = whole_sample(pair)
        self.fragments = pair_fragments(pair)

    def draw(self, rng: np.random.Generator) -> Sample:
        if not self.fragments:
            return self.whole
        if len(self.fragments) == 1:
            return self.whole.slice(self.fragments[0])
        return self.whole.slice(self.fragments[int(rng.integers(len(self.fragments)))])


def sample_fragment(pair: UtterancePair, rng: np.random.Generator) -> Sample:
    return FragmentSampler(pair).draw(rng)


def visit_rng(seed: int, utt_id: str, epoch: int) -> np.random.Generator:
    """Independent stream per (seed, utterance, epoch) so loading order does not matter."""
    return np.random.default_rng([seed, zlib.crc32(utt_id.encode("utf-8")), epoch])


@dataclass
class AugmentStats:
    histogram: dict[int, int]
    mean_points: float
    total_fragments: int
    num_pairs: int
    misaligned: int

    def as_dict(self):
        return {
            "num_pairs": self.num_pairs,
            "point_histogram": {str(k): v for k, v in sorted(self.histogram.items())},
            "mean_points": self.mean_points,
            "total_fragments": self.total_fragments,
            "misaligned_pairs": self.misaligned,
        }


def corpus_stats(pairs: Sequence[UtterancePair]) -> AugmentStats:
    counts = Counter()
    total = 0
    misaligned = 0
    for pair in pairs:
        try:
            n = len(alignment_points(pair.src_lab, pair.tgt_lab))
        except AlignmentError:
            misaligned += 1
            continue
        counts[n] += 1
        total += n * (n - 1) // 2
    aligned = sum(counts.values())
    mean = sum(n * c for n, c in counts.items()) / aligned if aligned else 0.0
    return AugmentStats(dict(counts), mean, total, len(pairs), misaligned)
