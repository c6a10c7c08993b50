"""Adversary strategies: delay-only and delay + chaff + drop.

The optimising adversary cannot see the network jitter, so it plans
against a noise-free surrogate of the analyst: every delay it adds is
assumed to be compensated exactly, leaving a jitter likelihood of
f_dD(0) on each matched IPD. Under that surrogate the detector score of
keeping packets K with delays a is

    (n - |K|) log p_l + sum_i log(p_l + (1 - p_l) f_dD(0) / f_dY(dx_K,i + da_K,i))

which is again a chain objective over the delay grid. With p_l == 0 it
reduces to maximising sum_i log f_dY(dx_i + da_i): make the flow look as
typical as an unrelated one.
"""
from __future__ import annotations

import math

import numpy as np

from .budget import AttackAction, AttackBudget, DelayGrid
from .chain import chain_argmax
from .density import IpdDensity
from .detector import DetectorConfig, score_matched
from .matching import match_batch, match_fixed_rho
from .trace import FlowTrace, as_timestamps

__all__ = [
    "AttackAction", "AttackBudget", "DelayGrid", "STRATEGIES", "apply_attack",
    "chaff_loss_attack_no1", "chaff_loss_attack_no2", "chaff_loss_attack_opt",
    "optimal_delay_attack", "random_delay_attack", "run_strategy", "typicality_dp",
]

CHAFF_CANDIDATES = 64


def _check_grid(grid: DelayGrid, budget: AttackBudget):
    if grid.a_max > budget.a_max:
        raise ValueError("delay grid exceeds the budget's a_max")


def typicality_terms(dx: np.ndarray, f_dy: IpdDensity, grid: DelayGrid) -> np.ndarray:
    """log f_dY(dx_i + (a_{i+1} - a_i)) for every level difference."""
    return f_dy.log_pdf(np.asarray(dx)[..., None] + grid.offsets())


def typicality_dp(x, f_dy: IpdDensity, grid: DelayGrid):
    """(levels, objective) maximising sum_i log f_dY(dx_i + da_i)."""
    dx = np.diff(as_timestamps(x))
    return chain_argmax(typicality_terms(dx, f_dy, grid), grid.size)


def optimal_delay_attack(x, f_dy: IpdDensity, budget: AttackBudget, grid: DelayGrid) -> np.ndarray:
    _check_grid(grid, budget)
    levels, _ = typicality_dp(x, f_dy, grid)
    return grid.values[levels]


def random_delay_attack(x, budget: AttackBudget, seed: int) -> np.ndarray:
    n = as_timestamps(x).size
    return np.random.default_rng(seed).uniform(0.0, budget.a_max, n)


# -- surrogate used by the optimising chaff/loss adversary ---------------------

def surrogate_terms(dx, f_dy: IpdDensity, f_dd: IpdDensity, p_l: float, grid: DelayGrid) -> np.ndarray:
    """Chain terms to maximise; minus the per-IPD surrogate score."""
    if p_l == 0:
        return typicality_terms(dx, f_dy, grid)
    log_y = f_dy.log_pdf(np.asarray(dx)[..., None] + grid.offsets())
    ratio = f_dd.log_pdf(0.0) - log_y
    return -np.logaddexp(math.log(p_l), math.log1p(-p_l) + ratio)


def surrogate_score(x, keep, levels, f_dy, f_dd, p_l, grid) -> float:
    """Surrogate detector score of keeping ``keep`` with the given delay levels."""
    x = as_timestamps(x)
    keep = np.asarray(keep, dtype=bool)
    dx = np.diff(x[keep])
    lv = np.asarray(levels)[keep]
    terms = surrogate_terms(dx, f_dy, f_dd, p_l, grid)
    total = 0.0
    for i in range(dx.size):
        total += terms[i, lv[i + 1] - lv[i] + grid.size - 1]
    lost = x.size - int(keep.sum())
    if p_l == 0:
        if lost:
            raise ValueError("drops are not allowed with p_l == 0")
        return -total
    return lost * math.log(p_l) - total


def _surrogate_dp(x, keep, f_dy, f_dd, p_l, grid):
    """Full-length levels (0 on dropped packets) and the surrogate score."""
    x = as_timestamps(x)
    keep = np.asarray(keep, dtype=bool)
    levels = np.zeros(x.size, dtype=np.int64)
    kept_levels, value = chain_argmax(surrogate_terms(np.diff(x[keep]), f_dy, f_dd, p_l, grid), grid.size)
    levels[keep] = kept_levels
    lost = x.size - int(keep.sum())
    loss = lost * math.log(p_l) if lost else 0.0
    return levels, loss - value


def _greedy_drops(x, n_drop, f_dy, f_dd, p_l, grid) -> np.ndarray:
    """Remove packets one at a time, each time the one lowering the surrogate most."""
    n = x.size
    keep = np.ones(n, dtype=bool)
    for r in range(n_drop):
        kept = np.flatnonzero(keep)
        cand = np.repeat(keep[None, :], kept.size, axis=0)
        cand[np.arange(kept.size), kept] = False
        xs = np.stack([x[row] for row in cand])
        terms = surrogate_terms(np.diff(xs, axis=1), f_dy, f_dd, p_l, grid)
        _, values = chain_argmax(terms, grid.size)
        scores = (r + 1) * math.log(p_l) - values
        keep = cand[int(np.argmin(scores))]
    return keep


def _analyst_view(f_dy, f_dd, budget, grid) -> DetectorConfig:
    return DetectorConfig(f_dd, f_dy, grid, eta=0.5, p_l_assumed=budget.p_l, p_a_assumed=budget.p_a,
                          calib_count=20, mode="robust")


def _place_chaff(x, base, n_chaff, cfg: DetectorConfig) -> np.ndarray:
    """Greedy chaff insertion on a 64-point time grid over [min x, max x].

    Each candidate is scored by matching at the offset the analyst finds
    for the flow without it, then scoring as the robust detector would.
    """
    lo, hi = float(np.min(x)), float(np.max(x))
    times = np.linspace(lo, hi, CHAFF_CANDIDATES)
    chaff = []
    for _ in range(n_chaff):
        current = np.sort(np.concatenate([base, chaff]))
        _, rho = match_batch(x, current[None, :], cfg.gamma, cfg.rho_search)
        W = np.sort(np.concatenate([np.broadcast_to(current, (times.size, current.size)),
                                    times[:, None]], axis=1), axis=1)
        assigned = match_fixed_rho(x, W, cfg.gamma, rho[0])
        scores = score_matched(x, W, assigned, cfg)
        chaff.append(times[int(np.argmin(scores))])
    return np.array(chaff)


def chaff_loss_attack_opt(x, budget: AttackBudget, f_dy: IpdDensity, f_dd: IpdDensity,
                          grid: DelayGrid) -> AttackAction:
    """Heuristic minimiser of the robust detector score.

    Delays come from the chain DP, drops are chosen greedily (each DP
    re-solved on the surviving packets), then chaff is placed greedily
    against the analyst's matching. Both budgets are spent in full.
    """
    _check_grid(grid, budget)
    x = as_timestamps(x)
    n = x.size
    n_drop, n_chaff = budget.n_drop(n), budget.n_chaff(n)
    if budget.p_l == 0 and n_chaff == 0:
        return AttackAction.delay_only(optimal_delay_attack(x, f_dy, budget, grid))
    if n_chaff and n < 2:
        raise ValueError("chaff span undefined")
    keep = _greedy_drops(x, n_drop, f_dy, f_dd, budget.p_l, grid)
    if budget.p_l == 0:
        levels, _ = typicality_dp(x, f_dy, grid)
    else:
        levels, _ = _surrogate_dp(x, keep, f_dy, f_dd, budget.p_l, grid)
    delays = np.where(keep, grid.values[levels], 0.0)
    chaff = np.empty(0)
    if n_chaff:
        base = (x + delays)[keep]
        chaff = _place_chaff(x, base, n_chaff, _analyst_view(f_dy, f_dd, budget, grid))
    return AttackAction(delays, ~keep, chaff)


def _streams(seed: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]


def _random_loss_chaff(x, budget: AttackBudget, drop_rng, chaff_rng):
    n = x.size
    n_drop, n_chaff = budget.n_drop(n), budget.n_chaff(n)
    drop = np.zeros(n, dtype=bool)
    drop[drop_rng.choice(n, size=n_drop, replace=False)] = True
    if n_chaff == 0:
        return drop, np.empty(0)
    lo, hi = float(np.min(x)), float(np.max(x))
    if n < 2 or lo == hi:
        raise ValueError("chaff span undefined")
    return drop, chaff_rng.uniform(lo, hi, n_chaff)


def chaff_loss_attack_no1(x, budget: AttackBudget, seed: int) -> AttackAction:
    """Fully random attack: uniform delays, floor(n p_l) random drops, uniform chaff."""
    x = as_timestamps(x)
    delay_rng, drop_rng, chaff_rng = _streams(seed)
    delays = delay_rng.uniform(0.0, budget.a_max, x.size)
    drop, chaff = _random_loss_chaff(x, budget, drop_rng, chaff_rng)
    return AttackAction(np.where(drop, 0.0, delays), drop, chaff)


def chaff_loss_attack_no2(x, budget: AttackBudget, f_dy: IpdDensity, f_dd: IpdDensity,
                          grid: DelayGrid, seed: int) -> AttackAction:
    """Random drops and chaff exactly as NO1, delays optimised for the surviving packets."""
    _check_grid(grid, budget)
    x = as_timestamps(x)
    _, drop_rng, chaff_rng = _streams(seed)
    drop, chaff = _random_loss_chaff(x, budget, drop_rng, chaff_rng)
    keep = ~drop
    if budget.p_l == 0:
        levels, _ = typicality_dp(x, f_dy, grid)
    else:
        levels, _ = _surrogate_dp(x, keep, f_dy, f_dd, budget.p_l, grid)
    return AttackAction(np.where(keep, grid.values[levels], 0.0), drop, chaff)


def apply_attack(x, action: AttackAction, d1, d2):
    """Observed flow: kept packets get D1 + a + D2, chaff only D2; sorted, originals first on ties."""
    x = as_timestamps(x)
    d1 = np.asarray(d1, dtype=np.float64)
    d2 = np.asarray(d2, dtype=np.float64)
    if action.n != x.size or d1.shape != x.shape:
        raise ValueError("x, d1 and the action must have the same length")
    if d2.size != action.m:
        raise ValueError("d2 must have one entry per output packet")
    if np.any(d1 < 0) or np.any(d2 < 0):
        raise ValueError("network delays must be >= 0")
    keep = ~action.drop
    kept = (x + d1 + action.delays)[keep]
    values = np.concatenate([kept + d2[:kept.size], action.chaff + d2[kept.size:]])
    return FlowTrace(np.sort(values, kind="stable"))


def run_strategy(name: str, x, budget: AttackBudget, f_dy: IpdDensity, f_dd: IpdDensity,
                 grid: DelayGrid, seed: int) -> AttackAction:
    x = as_timestamps(x)
    if name == "none":
        return AttackAction.identity(x.size)
    if name == "opt-delay":
        return AttackAction.delay_only(optimal_delay_attack(x, f_dy, budget, grid))
    if name == "rand-delay":
        return AttackAction.delay_only(random_delay_attack(x, budget, seed))
    if name == "opt":
        return chaff_loss_attack_opt(x, budget, f_dy, f_dd, grid)
    if name == "no1":
        return chaff_loss_attack_no1(x, budget, seed)
    if name == "no2":
        return chaff_loss_attack_no2(x, budget, f_dy, f_dd, grid, seed)
    raise ValueError(f"unknown adversary strategy {name!r}")


STRATEGIES = ("none", "opt-delay", "rand-delay", "opt", "no1", "no2")
