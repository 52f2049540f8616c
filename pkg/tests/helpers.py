"""Small builders shared by several test modules."""

import numpy as np

from scentvc.features import BottleneckTrack, FeatureTrack, Segment, SegmentSeq, UtterancePair


def random_label_pair(rng, n_points, n_phonemes=6, hop_ms=10):
    """Source/target label sequences with ``n_points`` silences (boundaries included)
    and identical speech content but independent durations."""
    content = []
    for k in range(n_points - 1):
        content.append([(int(rng.integers(1, n_phonemes)), int(rng.integers(1, 5)))
                        for _ in range(int(rng.integers(1, 4)))])

    def render():
        segs, t = [], 0
        for k in range(n_points):
            d = hop_ms * int(rng.integers(2, 9))
            segs.append(Segment(t, t + d, 0, 0))
            t += d
            if k < n_points - 1:
                for p, tone in content[k]:
                    d = hop_ms * int(rng.integers(1, 7))
                    segs.append(Segment(t, t + d, p, tone))
                    t += d
        return SegmentSeq(segs, inventory_size=n_phonemes)

    return render(), render()


def pair_from_labels(uid, src_lab, tgt_lab, dim=5, bn_dim=3, rate=4, hop_ms=10, seed=0):
    rng = np.random.default_rng(seed)
    t_src = src_lab.duration_ms // hop_ms
    t_tgt = tgt_lab.duration_ms // hop_ms
    return UtterancePair(
        id=uid,
        src=FeatureTrack(rng.normal(size=(t_src, dim)), hop_ms=hop_ms),
        tgt=FeatureTrack(rng.normal(size=(t_tgt, dim)), hop_ms=hop_ms),
        src_lab=src_lab,
        tgt_lab=tgt_lab,
        src_bn=BottleneckTrack(rng.normal(size=(-(-t_src // rate), bn_dim)), rate_divisor=rate),
    )
