"""Packet matching between a reference flow and an observed flow.

Each reference packet x_i, in ascending order, takes the still-free
observed packet w_j closest to x_i after synchronisation,
|x_i - (w_j - rho)|; it is declared lost when that residual exceeds
gamma. rho is chosen by exhaustive search over pairwise differences
w_j - x_i, maximising the number of matches, then minimising the total
residual, then taking the smallest rho.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .budget import AttackBudget
from .density import quantile_abs
from .trace import as_timestamps


def gamma_threshold(dd_samples, budget: AttackBudget, q: float = 0.999) -> float:
    """Loss threshold: q-quantile of |jitter| plus the delay budget."""
    return quantile_abs(dd_samples, q) + budget.a_max


@dataclass(frozen=True)
class RhoSearch:
    """Candidate offsets are w_j - x_i for j <= i + ceil(p_a * n) + slack."""

    p_a: float = 0.0
    slack: int = 2

    def reach(self, n: int) -> int:
        return math.ceil(round(self.p_a * n, 9)) + self.slack

    def candidate_index(self, n: int, m: int):
        i = np.repeat(np.arange(n), m)
        j = np.tile(np.arange(m), n)
        keep = j <= np.minimum(m - 1, i + self.reach(n))
        return i[keep], j[keep]


@dataclass(frozen=True)
class Matching:
    pairs: tuple
    rho: float
    gamma: float
    lost: frozenset
    unmatched_w: frozenset

    @property
    def n2(self) -> int:
        return len(self.pairs)

    def to_dict(self) -> dict:
        return {"pairs": [list(p) for p in self.pairs], "rho": self.rho, "gamma": self.gamma,
                "lost": sorted(self.lost), "unmatched_w": sorted(self.unmatched_w)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "Matching":
        return cls(tuple((int(i), int(j)) for i, j in data["pairs"]), float(data["rho"]),
                   float(data["gamma"]), frozenset(data["lost"]), frozenset(data.get("unmatched_w", ())))

    @classmethod
    def from_json(cls, text: str) -> "Matching":
        return cls.from_dict(json.loads(text))


@njit(cache=True)
def _greedy_row(x, w, rho, gamma, assigned, used):
    """Greedy pass for one offset; returns (count, total residual)."""
    m = w.size
    used[:] = False
    count = 0
    total = 0.0
    for i in range(x.size):
        best = np.inf
        best_j = -1
        for j in range(m):
            if not used[j]:
                r = abs(x[i] - (w[j] - rho))
                if r < best:
                    best = r
                    best_j = j
        if best_j >= 0 and best <= gamma:
            used[best_j] = True
            assigned[i] = best_j
            count += 1
            total += best
        else:
            assigned[i] = -1
    return count, total


@njit(cache=True)
def _search_kernel(x, W, ci, cj, gamma, assigned_out, rho_out):
    batch, m = W.shape
    n = x.size
    used = np.zeros(m, np.bool_)
    scratch = np.empty(n, np.int64)
    for b in range(batch):
        w = W[b]
        best_count = -1
        best_total = np.inf
        best_rho = np.inf
        for c in range(ci.size):
            rho = w[cj[c]] - x[ci[c]]
            count, total = _greedy_row(x, w, rho, gamma, scratch, used)
            if (count > best_count or (count == best_count and total < best_total)
                    or (count == best_count and total == best_total and rho < best_rho)):
                best_count = count
                best_total = total
                best_rho = rho
        _greedy_row(x, w, best_rho, gamma, assigned_out[b], used)
        rho_out[b] = best_rho


@njit(cache=True)
def _fixed_kernel(x, W, rho, gamma, assigned_out):
    used = np.zeros(W.shape[1], np.bool_)
    for b in range(W.shape[0]):
        _greedy_row(x, W[b], rho, gamma, assigned_out[b], used)


def match_batch(x, W: np.ndarray, gamma: float, search: RhoSearch):
    """Match x against every row of W (shape (B, m)) with full rho search.

    Returns ``(assigned, rho)``: for each row the index of the w packet
    taken by every x_i (-1 when lost) and the chosen offset.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    W = np.ascontiguousarray(np.atleast_2d(W), dtype=np.float64)
    ci, cj = search.candidate_index(x.size, W.shape[1])
    assigned = np.empty((W.shape[0], x.size), dtype=np.int64)
    rho = np.empty(W.shape[0])
    _search_kernel(x, W, ci, cj, float(gamma), assigned, rho)
    return assigned, rho


def match_fixed_rho(x, W: np.ndarray, gamma: float, rho: float):
    """Greedy matching of x against each row of W at a given offset."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    W = np.ascontiguousarray(np.atleast_2d(W), dtype=np.float64)
    assigned = np.empty((W.shape[0], x.size), dtype=np.int64)
    _fixed_kernel(x, W, float(rho), float(gamma), assigned)
    return assigned


def to_matching(assigned_row, m: int, rho: float, gamma: float) -> Matching:
    pairs = tuple((i, int(j)) for i, j in enumerate(assigned_row) if j >= 0)
    used = {j for _, j in pairs}
    lost = frozenset(i for i, j in enumerate(assigned_row) if j < 0)
    return Matching(pairs, float(rho), float(gamma), lost, frozenset(set(range(m)) - used))


def match_flows(x, w, gamma: float, rho_search: RhoSearch | None = None) -> Matching:
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    x = as_timestamps(x)
    w = as_timestamps(w)
    if x.size < 1 or w.size < 1:
        raise ValueError("both flows need at least one packet")
    assigned, rho = match_batch(x, w[None, :], gamma, rho_search or RhoSearch())
    return to_matching(assigned[0], w.size, rho[0], gamma)


def matched_subsequences(matching: Matching, x, w):
    """Paired timestamps (x^{n2}, w^{n2}) in ascending x index."""
    x = as_timestamps(x)
    w = as_timestamps(w)
    pairs = sorted(matching.pairs)
    i = np.array([p[0] for p in pairs], dtype=np.int64)
    j = np.array([p[1] for p in pairs], dtype=np.int64)
    return x[i], w[j]
