"""Independent reference implementations used to check the library code.

They are deliberately naive (full tables, recursion, enumeration) and share no
code with the package.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np


def levenshtein_full_table(a, b) -> int:
    """Textbook full-matrix edit distance."""
    n, m = len(a), len(b)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (0 if a[i - 1] == b[j - 1] else 1))
    return d[n][m]


def levenshtein_recursive(a, b) -> int:
    """Memoised recursion on suffixes, a second independent formulation."""
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        return min(go(i + 1, j) + 1, go(i, j + 1) + 1, go(i + 1, j + 1) + (a[i] != b[j]))

    return go(0, 0)


def split_words(seq, wb=3, ignore=(0, 1, 2)):
    words, cur = [], []
    for s in seq:
        if s == wb:
            if cur:
                words.append(tuple(cur))
            cur = []
        elif s not in ignore:
            cur.append(s)
    if cur:
        words.append(tuple(cur))
    return words


def all_monotone_paths(n, m):
    """Every path from (0,0) to (n-1,m-1) with steps (1,0), (0,1), (1,1)."""

    def rec(i, j):
        if (i, j) == (n - 1, m - 1):
            yield [(i, j)]
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            a, b = i + di, j + dj
            if a < n and b < m:
                for rest in rec(a, b):
                    yield [(i, j)] + rest

    yield from rec(0, 0)


def dtw_exhaustive(ref, gen):
    """Minimum path cost by enumerating all monotone paths (Euclidean frame distance)."""
    ref, gen = np.asarray(ref, float), np.asarray(gen, float)
    best_cost, best_paths = math.inf, []
    for path in all_monotone_paths(len(ref), len(gen)):
        cost = sum(math.sqrt(float(np.sum((ref[i] - gen[j]) ** 2))) for i, j in path)
        if cost < best_cost - 1e-12:
            best_cost, best_paths = cost, [path]
        elif abs(cost - best_cost) <= 1e-12:
            best_paths.append(path)
    return best_cost, best_paths


def central_difference(fn, tensor, index, eps=1e-6) -> float:
    """d fn / d tensor[index] by central differences (tensor modified in place, then restored)."""
    import torch

    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + eps
        plus = float(fn())
        tensor[index] = orig - eps
        minus = float(fn())
        tensor[index] = orig
    return (plus - minus) / (2 * eps)


def gradient_check(model, loss_fn, groups, per_tensor=3, seed=0, eps=1e-6):
    """Compare autograd gradients with central differences on sampled entries
    of every parameter tensor in `groups`.

    Per tensor the error is ||analytic - numeric|| / max(||analytic||, ||numeric||)
    over the sampled entries; the worst tensor error is returned per group.
    """
    import torch

    rng = np.random.default_rng(seed)
    model.zero_grad()
    loss = loss_fn()
    loss.backward()
    worst = {}
    for g in groups:
        errs = []
        for name, p in model.group(g).named_parameters():
            if p.grad is None:
                raise AssertionError(f"{g}.{name} received no gradient")
            flat = p.detach().view(-1)
            picks = rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False)
            # always include the entry with the largest gradient so tiny-gradient tensors are still informative
            picks = set(int(i) for i in picks) | {int(p.grad.abs().view(-1).argmax())}
            analytic, numeric = [], []
            for i in sorted(picks):
                idx = np.unravel_index(i, p.shape)
                analytic.append(float(p.grad[idx]))
                numeric.append(central_difference(loss_fn, p.data, idx, eps))
            a, n = np.array(analytic), np.array(numeric)
            scale = max(np.linalg.norm(a), np.linalg.norm(n))
            # a gradient that is zero by symmetry (e.g. a bias under softmax) is compared absolutely
            errs.append(float(np.linalg.norm(a - n) / scale) if scale > 1e-7 else float(np.linalg.norm(a - n)))
        worst[g] = max(errs)
    return worst


def exhaustive_paths_count(n, m):
    return sum(1 for _ in all_monotone_paths(n, m))


def brute_force_per(ref, hyp):
    return levenshtein_full_table(ref, hyp) / len(ref)


def brute_force_wer(ref, hyp):
    rw = split_words(ref)
    return levenshtein_full_table(rw, split_words(hyp)) / len(rw)



def dtw_enumerate(dist):
    """Exhaustive DTW over a precomputed cost matrix (list of lists).

    Returns (best_cost, best_paths); with integer costs the sums are exact.
    """
    n, m = len(dist), len(dist[0])
    best_cost, best_paths = math.inf, []
    for path in all_monotone_paths(n, m):
        cost = sum(dist[i][j] for i, j in path)
        if cost < best_cost:
            best_cost, best_paths = cost, [path]
        elif cost == best_cost:
            best_paths.append(path)
    return best_cost, best_paths
