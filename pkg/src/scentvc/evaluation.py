"""Objective metrics: DTW-aligned MCD and F0 RMSE, plus attention diagnostics."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.fft import dct
from scipy.spatial.distance import cdist

from .features import FeatureTrack

MCD_ORDER = 13
_MCD_CONST = 10.0 / math.log(10.0) * math.sqrt(2.0)


def dtw_align(a: np.ndarray, b: np.ndarray) -> tuple[list[tuple[int, int]], float]:
    """Minimal-cost monotonic alignment with steps (1,0), (0,1), (1,1).

    Local cost is the Euclidean distance. On backtracking ties the diagonal
    predecessor wins, then (i-1, j).
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("dtw_align needs non-empty sequences")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    cost = cdist(a, b)
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row, prev, c = acc[i], acc[i - 1], cost[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if row[j - 1] < best:
                best = row[j - 1]
            row[j] = c[j - 1] + best
    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        candidates = ((i - 1, j - 1), (i - 1, j), (i, j - 1))
        i, j = min(candidates, key=lambda ij: acc[ij])  # min keeps the first of equal values
        path.append((i - 1, j - 1))
    path.reverse()
    return path, float(acc[n, m])


def cepstra(track: FeatureTrack) -> np.ndarray:
    """Orthonormal DCT-II over the (log) spectral channels of each frame."""
    return dct(track.spectral.astype(np.float64), type=2, norm="ortho", axis=1)


def _aligned_cepstra(conv: FeatureTrack, ref: FeatureTrack, order: int):
    if conv.dim != ref.dim:
        raise ValueError(f"tracks differ in dimension: {conv.dim} vs {ref.dim}")
    if not math.isclose(conv.hop_ms, ref.hop_ms):
        raise ValueError(f"tracks differ in hop: {conv.hop_ms} vs {ref.hop_ms}")
    c_conv, c_ref = cepstra(conv), cepstra(ref)
    usable = c_ref.shape[1] - 1
    if usable < order:
        warnings.warn(f"only {usable} cepstral coefficients available, MCD uses 1..{usable}")
        order = usable
    x, y = c_conv[:, 1:order + 1], c_ref[:, 1:order + 1]
    path, _ = dtw_align(x, y)
    idx = np.asarray(path)
    return x[idx[:, 0]], y[idx[:, 1]], idx


def mcd(conv: FeatureTrack, ref: FeatureTrack, order: int = MCD_ORDER) -> float:
    """Mel-cepstral distortion in dB, averaged over the DTW path (c0 and pitch excluded)."""
    x, y, _ = _aligned_cepstra(conv, ref, order)
    return float(np.mean(_MCD_CONST * np.sqrt(np.sum((x - y) ** 2, axis=1))))


def f0_rmse(conv: FeatureTrack, ref: FeatureTrack, order: int = MCD_ORDER) -> float:
    """RMSE in Hz of the pitch channel over DTW-aligned frames voiced in both tracks."""
    _, _, idx = _aligned_cepstra(conv, ref, order)
    p, q = conv.pitch[idx[:, 0]].astype(np.float64), ref.pitch[idx[:, 1]].astype(np.float64)
    voiced = (p > 0) & (q > 0)
    if not voiced.any():
        warnings.warn("no frames voiced in both tracks; F0 RMSE set to 0")
        return 0.0
    return float(np.sqrt(np.mean((p[voiced] - q[voiced]) ** 2)))


@dataclass
class AttnDiagnostics:
    monotonicity_violation: float
    coverage_deficit: float
    repeat_score: float

    def as_dict(self):
        return asdict(self)


def attn_diagnostics(trace: np.ndarray, speech_mask: Optional[np.ndarray] = None,
                     expected_ratio: Optional[float] = None, coverage_floor: float = 0.2,
                     backward_tolerance: int = 2, repeat_factor: float = 3.0) -> AttnDiagnostics:
    """Objective alignment-failure rates for one ``[T_dec, T_enc]`` attention trace.

    - monotonicity violation: fraction of decoder steps whose argmax moves back
      by more than ``backward_tolerance`` encoder frames;
    - coverage deficit: fraction of speech encoder frames (``speech_mask``; all
      frames if omitted) receiving total attention below ``coverage_floor``;
    - repeat score: fraction of decoder steps inside argmax runs longer than
      ``repeat_factor`` times the expected decoder/encoder length ratio.
    """
    trace = np.asarray(trace, dtype=np.float64)
    t_dec, t_enc = trace.shape
    argmax = trace.argmax(axis=1)
    violation = float(np.sum(np.diff(argmax) < -backward_tolerance)) / t_dec

    if speech_mask is None:
        speech_mask = np.ones(t_enc, dtype=bool)
    speech_mask = np.asarray(speech_mask, dtype=bool)
    column = trace.sum(axis=0)
    n_speech = int(speech_mask.sum())
    deficit = float(np.sum((column < coverage_floor) & speech_mask)) / n_speech if n_speech else 0.0

    ratio = t_dec / t_enc if expected_ratio is None else expected_ratio
    limit = repeat_factor * ratio
    repeated = 0
    run_start = 0
    for t in range(1, t_dec + 1):
        if t == t_dec or argmax[t] != argmax[run_start]:
            if t - run_start > limit:
                repeated += t - run_start
            run_start = t
    return AttnDiagnostics(violation, deficit, repeated / t_dec)
