"""Independent scalar oracles used by the unit and acceptance tests."""
import itertools
import math

import numpy as np


def kde_log_pdf(samples, bandwidth, value, floor=1e-12):
    """Gaussian KDE evaluated term by term with math.fsum."""
    total = math.fsum(math.exp(-0.5 * ((value - s) / bandwidth) ** 2) for s in samples)
    pdf = total / (len(samples) * bandwidth * math.sqrt(2 * math.pi))
    return math.log(max(pdf, floor))


def chain_brute_force(term, steps, levels):
    """max over all level paths of sum_i term(i, k_{i+1} - k_i), summed left to right from 0.0."""
    best = -math.inf
    for path in itertools.product(range(levels), repeat=steps + 1):
        total = 0.0
        for i in range(steps):
            total += term(i, path[i + 1] - path[i])
        best = max(best, total)
    return best


def lambda_delay_scalar(w, x, a, log_dd, log_dy):
    total = 0.0
    for i in range(len(x) - 1):
        r = ((w[i + 1] - x[i + 1]) - a[i + 1]) - ((w[i] - x[i]) - a[i])
        total += log_dd(r) - log_dy(w[i + 1] - w[i])
    return total


def lambda_robust_scalar(x2, w2, a2, n, p_l, log_dd, log_dy):
    if p_l == 0:
        if len(x2) < n:
            return -math.inf
        return lambda_delay_scalar(w2, x2, a2, log_dd, log_dy)
    total = (n - len(x2)) * math.log(p_l)
    for i in range(len(x2) - 1):
        r = ((w2[i + 1] - x2[i + 1]) - a2[i + 1]) - ((w2[i] - x2[i]) - a2[i])
        ratio = math.exp(log_dd(r) - log_dy(w2[i + 1] - w2[i]))
        total += math.log(p_l + (1 - p_l) * ratio)
    return total


def random_instance(rng, n):
    x = np.cumsum(np.concatenate([[0.0], rng.exponential(0.2, n - 1)]))
    return x


def surrogate_brute_force(x, n_drop, f_dy, f_dd, p_l, grid):
    """Minimum surrogate score over every drop set of size n_drop and every level path."""
    from flowgame.adversary import surrogate_score

    n = len(x)
    best = math.inf
    for dropped in itertools.combinations(range(n), n_drop):
        keep = np.ones(n, dtype=bool)
        keep[list(dropped)] = False
        kept = int(keep.sum())
        for lv in itertools.product(range(grid.size), repeat=kept):
            levels = np.zeros(n, dtype=np.int64)
            levels[keep] = lv
            best = min(best, surrogate_score(x, keep, levels, f_dy, f_dd, p_l, grid))
    return best
