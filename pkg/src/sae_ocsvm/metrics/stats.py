"""Kruskal-Wallis analysis of variance on ranks and Dunn's post-hoc test."""
import numpy as np
from scipy.stats import chi2, norm


def _average_ranks(values):
    """1-based ranks, ties receiving the mean of the ranks they span."""
    order = np.argsort(values, kind="mergesort")
    s = values[order]
    ranks = np.empty(len(values))
    start = 0
    bounds = np.flatnonzero(np.r_[s[1:] != s[:-1], True]) + 1
    for end in bounds:
        ranks[order[start:end]] = 0.5 * (start + 1 + end)
        start = end
    tie_sizes = np.diff(np.r_[0, bounds])
    return ranks, tie_sizes


def _pool(groups):
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(groups) < 2:
        raise ValueError("at least two groups are required")
    if any(len(g) == 0 for g in groups):
        raise ValueError("every group must be nonempty")
    values = np.concatenate(groups)
    ranks, ties = _average_ranks(values)
    sizes = np.array([len(g) for g in groups])
    labels = np.repeat(np.arange(len(groups)), sizes)
    mean_ranks = np.array([ranks[labels == k].mean() for k in range(len(groups))])
    return sizes, mean_ranks, ties, len(values)


def kruskal_wallis(groups):
    """Tie-corrected H statistic and its chi-square (k - 1 d.f.) p-value."""
    sizes, mean_ranks, ties, n = _pool(groups)
    correction = 1.0 - np.sum(ties ** 3 - ties) / (n ** 3 - n)
    if correction <= 0:
        return 0.0, 1.0
    h = 12.0 / (n * (n + 1)) * np.sum(sizes * mean_ranks ** 2) - 3.0 * (n + 1)
    h /= correction
    h = max(float(h), 0.0)
    return h, float(chi2.sf(h, len(sizes) - 1))


def dunn_test(groups, bonferroni=False):
    """Two-sided pairwise p-values (k x k matrix, ones on the diagonal)."""
    sizes, mean_ranks, ties, n = _pool(groups)
    k = len(sizes)
    var = n * (n + 1) / 12.0 - np.sum(ties ** 3 - ties) / (12.0 * (n - 1)) if n > 1 else 0.0
    p = np.ones((k, k))
    if var <= 0:
        return p
    n_pairs = k * (k - 1) // 2
    for i in range(k):
        for j in range(i + 1, k):
            se = np.sqrt(var * (1.0 / sizes[i] + 1.0 / sizes[j]))
            z = abs(mean_ranks[i] - mean_ranks[j]) / se
            pij = 2.0 * norm.sf(z)
            if bonferroni:
                pij = min(1.0, pij * n_pairs)
            p[i, j] = p[j, i] = pij
    return p
