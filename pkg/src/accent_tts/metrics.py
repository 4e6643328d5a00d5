"""Objective evaluation: error rates, posteriorgram KLD, pitch and duration metrics."""

from __future__ import annotations

from typing import Hashable, List, Optional, Sequence, Tuple

import numpy as np

Path_ = List[Tuple[int, int]]

KLD_FLOOR = 1e-10


class MetricError(ValueError):
    pass


def edit_distance(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> int:
    """Unit-cost Levenshtein distance (two-row dynamic programme)."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j - 1] + (r != h), prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[-1]


def per(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> float:
    if len(ref) == 0:
        raise MetricError("empty reference")
    return edit_distance(ref, hyp) / len(ref)


def _word_groups(seq: Sequence[Hashable], wb: Hashable, ignore: Sequence[Hashable]) -> List[tuple]:
    groups: List[list] = [[]]
    for p in seq:
        if p == wb:
            groups.append([])
        elif p not in ignore:
            groups[-1].append(p)
    return [tuple(g) for g in groups if g]


def wer(ref: Sequence[Hashable], hyp: Sequence[Hashable], wb: Hashable = 3, ignore: Sequence[Hashable] = (0, 1, 2)) -> float:
    """Word error rate over WB-delimited phoneme groups.

    Two words match only when their phoneme lists are identical.
    """
    ref_words = _word_groups(ref, wb, ignore)
    if not ref_words:
        raise MetricError("empty reference")
    return edit_distance(ref_words, _word_groups(hyp, wb, ignore)) / len(ref_words)


def _check_posteriorgram(p: np.ndarray, name: str) -> None:
    if p.ndim != 2:
        raise MetricError(f"{name} must be a [T x C] matrix")
    if (p < 0).any() or not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
        raise MetricError(f"{name} rows must be probability distributions")


def kld_posteriorgram(ref, gen) -> float:
    """Mean over rows of KL(ref || gen) in nats, both sides floored at 1e-10."""
    ref = np.asarray(ref, dtype=np.float64)
    gen = np.asarray(gen, dtype=np.float64)
    if ref.shape != gen.shape:
        raise MetricError(f"posteriorgram shapes differ: {ref.shape} vs {gen.shape}")
    _check_posteriorgram(ref, "ref")
    _check_posteriorgram(gen, "gen")
    p = np.maximum(ref, KLD_FLOOR)
    q = np.maximum(gen, KLD_FLOOR)
    return float(np.mean(np.sum(p * np.log(p / q), axis=1)))


def identity_path(n: int) -> Path_:
    return [(i, i) for i in range(n)]


def _check_path(path: Path_, n: int, m: int) -> None:
    if not path:
        raise MetricError("empty path")
    if path[0] != (0, 0) or path[-1] != (n - 1, m - 1):
        raise MetricError("path must run from (0, 0) to the last frame pair")
    for (a, b), (c, d) in zip(path, path[1:]):
        if (c - a, d - b) not in ((1, 0), (0, 1), (1, 1)):
            raise MetricError(f"illegal path step {(a, b)} -> {(c, d)}")


def _voiced_pairs(ref_f0, ref_voiced, gen_f0, gen_voiced, path):
    ref_f0, gen_f0 = np.asarray(ref_f0, float), np.asarray(gen_f0, float)
    ref_v = np.asarray(ref_voiced, bool) if ref_voiced is not None else ref_f0 > 0
    gen_v = np.asarray(gen_voiced, bool) if gen_voiced is not None else gen_f0 > 0
    if path is None:
        if len(ref_f0) != len(gen_f0):
            raise MetricError("contours differ in length; pass a DTW path")
        path = identity_path(len(ref_f0))
    _check_path(path, len(ref_f0), len(gen_f0))
    idx = np.asarray(path)
    keep = ref_v[idx[:, 0]] & gen_v[idx[:, 1]]
    return ref_f0[idx[keep, 0]], gen_f0[idx[keep, 1]]


def f0_rmse(ref_f0, gen_f0, path: Optional[Path_] = None, ref_voiced=None, gen_voiced=None) -> float:
    """F0 RMSE in Hz over path pairs voiced on both sides.

    Voicing defaults to `f0 > 0`; `path=None` means the contours are pre-aligned.
    """
    x, y = _voiced_pairs(ref_f0, ref_voiced, gen_f0, gen_voiced, path)
    if len(x) == 0:
        raise MetricError("no frame pair is voiced on both sides")
    return float(np.sqrt(np.mean((x - y) ** 2)))


def logf0_correlation(ref_f0, gen_f0, path: Optional[Path_] = None, ref_voiced=None, gen_voiced=None) -> float:
    """Pearson correlation of natural-log F0 over both-voiced path pairs."""
    x, y = _voiced_pairs(ref_f0, ref_voiced, gen_f0, gen_voiced, path)
    if len(x) < 2:
        raise MetricError("need at least two both-voiced pairs")
    lx, ly = np.log(x), np.log(y)
    dx, dy = lx - lx.mean(), ly - ly.mean()
    denom = np.sqrt(np.sum(dx * dx)) * np.sqrt(np.sum(dy * dy))
    if denom == 0:
        raise MetricError("constant log-F0 sequence")
    return float(np.sum(dx * dy) / denom)


def uv_error_rate(ref_flags, gen_flags, path: Optional[Path_] = None) -> float:
    """Fraction of aligned frame pairs whose voicing labels disagree."""
    ref_flags, gen_flags = np.asarray(ref_flags, bool), np.asarray(gen_flags, bool)
    if path is None:
        if len(ref_flags) != len(gen_flags):
            raise MetricError("label sequences differ in length; pass a DTW path")
        path = identity_path(len(ref_flags))
    _check_path(path, len(ref_flags), len(gen_flags))
    idx = np.asarray(path)
    return float(np.mean(ref_flags[idx[:, 0]] != gen_flags[idx[:, 1]]))


def frame_distances(ref_mel, gen_mel) -> np.ndarray:
    ref_mel = np.asarray(ref_mel, dtype=np.float64)
    gen_mel = np.asarray(gen_mel, dtype=np.float64)
    diff = ref_mel[:, None, :] - gen_mel[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def dtw_align(ref_mel, gen_mel) -> Tuple[Path_, float]:
    """Minimum-cost monotone alignment under Euclidean frame distance.

    Steps are (1,0), (0,1), (1,1). On equal cumulative cost the backtrace
    prefers the diagonal, then (1,0), then (0,1). Returns (path, cost).
    """
    if len(ref_mel) == 0 or len(gen_mel) == 0:
        raise MetricError("empty spectrogram")
    cost = frame_distances(ref_mel, gen_mel).tolist()
    n, m = len(cost), len(cost[0])
    inf = float("inf")
    acc = [[inf] * m for _ in range(n)]
    for i in range(n):
        row, prow, crow = acc[i], acc[i - 1] if i else None, cost[i]
        for j in range(m):
            if i == 0 and j == 0:
                row[j] = crow[0]
                continue
            best = inf
            if i and j:
                best = prow[j - 1]
            if i and prow[j] < best:
                best = prow[j]
            if j and row[j - 1] < best:
                best = row[j - 1]
            row[j] = crow[j] + best
    path = [(n - 1, m - 1)]
    i, j = n - 1, m - 1
    while (i, j) != (0, 0):
        options = []
        if i and j:
            options.append((acc[i - 1][j - 1], i - 1, j - 1))
        if i:
            options.append((acc[i - 1][j], i - 1, j))
        if j:
            options.append((acc[i][j - 1], i, j - 1))
        best = min(o[0] for o in options)
        _, i, j = next(o for o in options if o[0] == best)
        path.append((i, j))
    path.reverse()
    return path, acc[n - 1][m - 1]


def path_cost(ref_mel, gen_mel, path: Path_) -> float:
    cost = frame_distances(ref_mel, gen_mel)
    total = 0.0
    for i, j in path:
        total += float(cost[i, j])
    return total


def frame_disturbance(path: Path_) -> float:
    """Root-mean-square deviation of an alignment path from the diagonal, in frames."""
    if not path:
        raise MetricError("empty path")
    idx = np.asarray(path, dtype=np.float64)
    return float(np.sqrt(np.mean((idx[:, 0] - idx[:, 1]) ** 2)))


def duration_rmse_ms(ref_dur, gen_dur, hop_ms: float = 12.5) -> float:
    ref_dur = np.asarray(ref_dur, dtype=np.float64)
    gen_dur = np.asarray(gen_dur, dtype=np.float64)
    if ref_dur.shape != gen_dur.shape:
        raise MetricError(f"duration sequences differ in length: {len(ref_dur)} vs {len(gen_dur)}")
    return float(np.sqrt(np.mean(((ref_dur - gen_dur) * hop_ms) ** 2)))


TABLE_COLUMNS = ("f0_rmse_hz", "logf0_corr", "uv_error_pct", "disturbance_frames", "dur_rmse_ms")


def aggregate(records: Sequence[dict]) -> dict:
    """Per-utterance values averaged over utterances, one entry per metric."""
    by_metric: dict = {}
    for rec in records:
        by_metric.setdefault(rec["metric"], []).append(rec["value"])
    return {k: float(np.mean(v)) for k, v in sorted(by_metric.items())}
