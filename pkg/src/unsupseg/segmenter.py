"""Boundary scores from frame embeddings, prominence peak picking, and
threshold tuning.

The score at junction ``i`` (between frames ``i`` and ``i + 1``) is the
negative cosine similarity of the two frames.  Peaks whose prominence is at
least ``delta`` become boundaries, placed at the trailing edge of frame
``i``: ``(i + 1) * hop / sample_rate`` seconds.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError
from .metrics import evaluate_corpus


@dataclass
class ScoreTrack:
    scores: np.ndarray
    normalized: bool = False

    def __len__(self):
        return len(self.scores)


@dataclass
class PeakParams:
    delta: float = 0.5
    normalize: bool = True
    time_offset: float = 0.0

    def __post_init__(self):
        if self.delta < 0:
            raise ConfigError(f"delta must be >= 0, got {self.delta}")
        if self.normalize and self.delta > 1:
            raise ConfigError(f"delta {self.delta} outside [0, 1] for normalized scores")


def boundary_scores(z):
    """``scores[i] = -cos(z_i, z_{i+1})`` for each adjacent frame pair."""
    v = np.asarray(getattr(z, "vectors", z), dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 2:
        raise ContractError("need at least 2 frames to score boundaries")
    norms = np.linalg.norm(v, axis=1)
    zero = np.flatnonzero(norms == 0)
    if len(zero):
        raise ContractError(f"frame {zero[0]} has a zero-norm embedding")
    u = v / norms[:, None]
    cos = np.clip(np.sum(u[:-1] * u[1:], axis=1), -1.0, 1.0)
    return ScoreTrack(-cos, normalized=False)


def normalize_scores(track):
    """Min-max scale to [0, 1]; a constant track becomes all zeros."""
    s = np.asarray(track.scores, dtype=np.float64)
    if len(s) == 0:
        return ScoreTrack(s.copy(), True)
    lo, hi = s.min(), s.max()
    if hi == lo:
        return ScoreTrack(np.zeros_like(s), True)
    return ScoreTrack((s - lo) / (hi - lo), True)


def _nearest_greater(values, reverse=False):
    """Index of the nearest strictly greater element on one side (-1 / n if none)."""
    n = len(values)
    out = np.full(n, n if reverse else -1, dtype=np.int64)
    stack = []
    order = range(n - 1, -1, -1) if reverse else range(n)
    for i in order:
        while stack and values[stack[-1]] <= values[i]:
            stack.pop()
        if stack:
            out[i] = stack[-1]
        stack.append(i)
    return out


def peak_prominences(scores):
    """Interior local maxima and their prominences.

    A candidate ``p`` satisfies ``s[p] > s[p-1]`` and ``s[p] >= s[p+1]`` (so
    a plateau is represented by its leftmost sample).  Its base on each side
    is the minimum between ``p`` and the nearest strictly higher sample on
    that side, or the array end if there is none; prominence is the height
    above the higher of the two bases.  Returns ``(indices, prominences)``.
    """
    s = np.asarray(scores, dtype=np.float64)
    n = len(s)
    if n < 3:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    mid = np.arange(1, n - 1)
    cand = mid[(s[1:-1] > s[:-2]) & (s[1:-1] >= s[2:])]
    left = _nearest_greater(s)
    right = _nearest_greater(s, reverse=True)
    prom = np.empty(len(cand))
    for k, p in enumerate(cand):
        left_base = s[left[p] + 1:p].min()
        right_base = s[p + 1:right[p]].min()
        prom[k] = s[p] - max(left_base, right_base)
    return cand, prom


def detect_peaks(scores, delta):
    """Sorted indices of interior peaks with prominence >= ``delta``."""
    if delta < 0:
        raise ContractError("delta must be >= 0")
    idx, prom = peak_prominences(scores)
    return idx[prom >= delta]


def frames_to_times(indices, hop_samples=160, sample_rate=16000, time_offset=0.0):
    """Junction index -> seconds at the trailing edge of the left frame."""
    return [(int(i) + 1) * hop_samples / sample_rate + time_offset for i in indices]


def segment(encoder, waveform, params=None):
    """Predict boundaries for one utterance; returns ``(times, ScoreTrack)``.

    The returned track is the raw score track; normalization (when enabled)
    only affects peak picking.
    """
    params = params or PeakParams()
    z = encoder.encode(waveform, mode="eval")
    raw = boundary_scores(z)
    return boundaries_from_scores(raw, params, z.hop_samples, z.sample_rate), raw


def boundaries_from_scores(raw, params, hop_samples=160, sample_rate=16000):
    track = normalize_scores(raw) if params.normalize else raw
    peaks = detect_peaks(track.scores, params.delta)
    return frames_to_times(peaks, hop_samples, sample_rate, params.time_offset)


def delta_grid(text):
    """Parse ``start:stop:step`` into an inclusive list of thresholds."""
    try:
        start, stop, step = (float(x) for x in text.split(":"))
    except ValueError:
        raise ConfigError(f"grid must look like start:stop:step, got {text!r}") from None
    if step <= 0 or stop < start:
        raise ConfigError(f"grid {text!r} needs step > 0 and stop >= start")
    n = int(np.floor((stop - start) / step + 1e-9))
    return [round(start + k * step, 10) for k in range(n + 1)]


DEFAULT_GRID = delta_grid("0:1:0.05")


def score_corpus(encoder, utterances):
    """Raw score tracks for ``(key, Waveform, Annotation)`` triples."""
    return {key: boundary_scores(encoder.encode(w, mode="eval")) for key, w, _ in utterances}


def tune_delta(encoder, utterances, grid=None, tolerance=0.02, objective="rval",
               normalize=True, time_offset=0.0, include_edges=False):
    """Pick the threshold maximizing corpus R-value (or F1) on annotated data.

    ``utterances`` are ``(key, Waveform, Annotation)`` triples.  Ties go to
    the smallest threshold.  Returns ``(best_delta, [(delta, EvalReport), ...])``.
    """
    if not utterances:
        raise DataError("tuning needs a non-empty annotated manifest")
    if objective not in ("rval", "f1"):
        raise ConfigError(f"objective must be 'rval' or 'f1', got {objective!r}")
    grid = sorted(DEFAULT_GRID if grid is None else grid)
    if not grid:
        raise ConfigError("empty delta grid")
    tracks = score_corpus(encoder, utterances)
    hop, sr = encoder.config.hop_samples, encoder.config.sample_rate
    gold = gold_map(utterances, include_edges)
    durations = {key: w.duration for key, w, _ in utterances}
    table = []
    for delta in grid:
        params = PeakParams(delta, normalize, time_offset)
        pred = {k: boundaries_from_scores(t, params, hop, sr) for k, t in tracks.items()}
        if include_edges:
            pred = {k: add_edges(v, durations[k]) for k, v in pred.items()}
        table.append((delta, evaluate_corpus(pred, gold, tolerance)))
    return select_delta(table, objective), table


def select_delta(table, objective="rval"):
    """Threshold with the highest objective; the smallest one on ties."""
    def key(rep):
        return rep.r_value if objective == "rval" else rep.f1
    best = None
    for delta, rep in sorted(table, key=lambda row: row[0]):
        if best is None or key(rep) > key(best[1]):
            best = (delta, rep)
    return best[0]


def gold_map(utterances, include_edges=False):
    out = {}
    for key, _, ann in utterances:
        if ann is None:
            raise DataError(f"{key} has no annotation")
        out[key] = ann.boundaries(include_edges)
    return out


def add_edges(times, duration):
    return [0.0] + [t for t in times if 0.0 < t < duration] + [duration]


def write_boundaries(path, times):
    Path(path).write_text("".join(f"{t:.6f}\n" for t in times))


def read_boundaries(path):
    return [float(line) for line in Path(path).read_text().split()]


def write_score_dump(path, raw):
    norm = normalize_scores(raw)
    Path(path).write_text("".join(f"{i}\t{r:.6f}\t{n:.6f}\n"
                                  for i, (r, n) in enumerate(zip(raw.scores, norm.scores))))
