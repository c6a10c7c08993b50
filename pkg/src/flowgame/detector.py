"""Traffic analyst: attack estimation, likelihood-ratio scores, calibration.

Two detector modes share one scoring path:

``delay``   one-to-one packets (m == n); the score is the sum over IPDs of
            log f_dD(residual jitter) - log f_dY(observed IPD), after the
            analyst's best estimate of the adversary's delays.
``robust``  the flows are matched first (chaff and losses allowed); the
            score adds (n - n2) log p_l for unmatched packets and mixes each
            likelihood ratio with p_l.
"""
from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .budget import AttackBudget, DelayGrid, budget_count
from .chain import chain_argmax
from .density import IpdDensity, nearest_rank
from .matching import RhoSearch, gamma_threshold, match_batch, to_matching
from .trace import IpdModel, as_timestamps, synth_flows

MIN_SCORE = -sys.float_info.max
MODES = ("delay", "robust")


@dataclass(frozen=True, eq=False)
class DetectorConfig:
    f_dd: IpdDensity
    f_dy: IpdDensity
    grid: DelayGrid
    eta: float = 0.01
    p_l_assumed: float = 0.0
    p_a_assumed: float = 0.0
    calib_count: int = 100_000
    mode: str = "robust"
    rho_slack: int = 2

    def __post_init__(self):
        if not 0 < self.eta < 1:
            raise ValueError("eta must lie in (0, 1)")
        if not 0 <= self.p_l_assumed < 1:
            raise ValueError("p_l_assumed must lie in [0, 1)")
        if self.p_a_assumed < 0:
            raise ValueError("p_a_assumed must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.calib_count < math.ceil(round(10 / self.eta, 9)):
            raise ValueError(f"calib_count must be >= ceil(10/eta) = {math.ceil(round(10 / self.eta, 9))}")

    @cached_property
    def gamma(self) -> float:
        return gamma_threshold(self.f_dd.samples, AttackBudget(a_max=self.grid.a_max))

    @property
    def rho_search(self) -> RhoSearch:
        return RhoSearch(self.p_a_assumed, self.rho_slack)

    def flow_length(self, n: int) -> int:
        """Length of the unrelated flows used for calibration."""
        if self.mode == "delay":
            return n
        return n + budget_count(self.p_a_assumed, n)

    def params(self) -> dict:
        return {"levels": self.grid.levels, "a_max": self.grid.a_max, "eta": self.eta,
                "p_l_assumed": self.p_l_assumed, "p_a_assumed": self.p_a_assumed,
                "calib_count": self.calib_count, "mode": self.mode, "rho_slack": self.rho_slack}

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.f_dd.fingerprint().encode())
        h.update(self.f_dy.fingerprint().encode())
        h.update(json.dumps(self.params(), sort_keys=True).encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class Verdict:
    lam: float
    epsilon: float
    accept_h1: bool
    n2: int
    rho: float
    loss_veto: bool = False

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "epsilon": self.epsilon, "accept_h1": self.accept_h1,
                "n2": self.n2, "rho": self.rho, "loss_veto": self.loss_veto}


# -- attack estimation -------------------------------------------------------

def estimation_terms(residual: np.ndarray, f_dd: IpdDensity, grid: DelayGrid) -> np.ndarray:
    """log f_dD(dr_i - (a_{i+1} - a_i)) for every level difference.

    ``residual`` = w - x with shape (..., k); output (..., k-1, 2K-1).
    """
    dr = np.diff(residual, axis=-1)
    return f_dd.log_pdf(dr[..., None] - grid.offsets())


def estimate_levels(x, w, f_dd: IpdDensity, grid: DelayGrid):
    """Analyst's DP over the delay grid; returns (levels, objective)."""
    x = as_timestamps(x)
    w = as_timestamps(w)
    if x.shape != w.shape:
        raise ValueError("paired sequences must have equal length")
    return chain_argmax(estimation_terms(w - x, f_dd, grid), grid.size)


def estimate_attack(x, w, f_dd: IpdDensity, f_dy: IpdDensity, grid: DelayGrid) -> np.ndarray:
    """Delay estimate maximising the jitter likelihood of (w - x) - a_hat.

    The f_dY terms do not depend on a_hat and are left out of the search.
    """
    levels, _ = estimate_levels(x, w, f_dd, grid)
    return grid.values[levels]


# -- scores ------------------------------------------------------------------

def _log_ratio(x, w, a_hat, f_dd, f_dy):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    resid = np.diff((w - x) - a_hat, axis=-1)
    return f_dd.log_pdf(resid) - f_dy.log_pdf(np.diff(w, axis=-1))


def lambda_delay(w, x, a_hat, f_dd: IpdDensity, f_dy: IpdDensity) -> float:
    w, x, a_hat = as_timestamps(w), as_timestamps(x), np.asarray(a_hat, dtype=np.float64)
    if not (w.shape == x.shape == a_hat.shape):
        raise ValueError("w, x and a_hat must have equal length")
    return float(np.sum(_log_ratio(x, w, a_hat, f_dd, f_dy)))


def _robust_terms(log_ratio, p_l):
    if p_l == 0:
        return log_ratio
    return np.logaddexp(math.log(p_l), math.log1p(-p_l) + log_ratio)


def lambda_robust(x2, w2, a_hat2, n: int, p_l: float, f_dd: IpdDensity, f_dy: IpdDensity) -> float:
    """Score of the matched subsequences accounting for n - n2 losses.

    With p_l == 0 a loss makes the score ``MIN_SCORE`` (certain rejection).
    """
    x2, w2 = as_timestamps(x2), as_timestamps(w2)
    a_hat2 = np.asarray(a_hat2, dtype=np.float64)
    n2 = x2.size
    if not (w2.shape == x2.shape == a_hat2.shape):
        raise ValueError("matched sequences must have equal length")
    if n2 > n:
        raise ValueError("n2 cannot exceed n")
    if not 0 <= p_l < 1:
        raise ValueError("p_l must lie in [0, 1)")
    if p_l == 0:
        if n2 < n:
            return MIN_SCORE
        loss = 0.0
    else:
        loss = (n - n2) * math.log(p_l)
    return loss + float(np.sum(_robust_terms(_log_ratio(x2, w2, a_hat2, f_dd, f_dy), p_l)))


# -- batched pipeline --------------------------------------------------------

@dataclass
class ScoreBatch:
    scores: np.ndarray
    n2: np.ndarray
    rho: np.ndarray
    assigned: np.ndarray | None = field(default=None, repr=False)

    @property
    def loss_veto(self) -> np.ndarray:
        return self.scores == MIN_SCORE


def score_paired(X2: np.ndarray, W2: np.ndarray, n: int, cfg: DetectorConfig, robust: bool) -> np.ndarray:
    """Scores for rows of equal-length paired sequences (estimate, then score)."""
    X2 = np.atleast_2d(X2)
    W2 = np.atleast_2d(W2)
    n2 = X2.shape[1]
    if n2 <= 1:
        log_ratio_sum = np.zeros(X2.shape[0])
    else:
        levels, _ = chain_argmax(estimation_terms(W2 - X2, cfg.f_dd, cfg.grid), cfg.grid.size)
        a_hat = cfg.grid.values[levels]
        terms = _log_ratio(X2, W2, a_hat, cfg.f_dd, cfg.f_dy)
        if robust:
            terms = _robust_terms(terms, cfg.p_l_assumed)
        log_ratio_sum = np.sum(terms, axis=1)
    if not robust:
        return log_ratio_sum
    p_l = cfg.p_l_assumed
    if p_l == 0:
        if n2 < n:
            return np.full(X2.shape[0], MIN_SCORE)
        return 0.0 + log_ratio_sum
    return (n - n2) * math.log(p_l) + log_ratio_sum


def score_matched(x: np.ndarray, W: np.ndarray, assigned: np.ndarray, cfg: DetectorConfig) -> np.ndarray:
    """Robust scores given the matching of x against each row of W."""
    n = x.size
    batch = W.shape[0]
    n2 = (assigned >= 0).sum(axis=1)
    scores = np.empty(batch)
    for k in np.unique(n2):
        rows = np.flatnonzero(n2 == k)
        sub = assigned[rows]
        mask = sub >= 0
        cols = np.nonzero(mask)[1].reshape(rows.size, k)
        X2 = x[cols]
        W2 = W[rows[:, None], sub[mask].reshape(rows.size, k)]
        scores[rows] = score_paired(X2, W2, n, cfg, robust=True)
    return scores


def score_batch(x, W, cfg: DetectorConfig) -> ScoreBatch:
    """Detector scores of x against every row of W (all rows of equal length)."""
    x = as_timestamps(x)
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    n = x.size
    if cfg.mode == "delay":
        if W.shape[1] != n:
            raise ValueError("delay-mode detection needs m == n")
        scores = score_paired(np.broadcast_to(x, W.shape), W, n, cfg, robust=False)
        return ScoreBatch(scores, np.full(W.shape[0], n), np.zeros(W.shape[0]))
    assigned, rho = match_batch(x, W, cfg.gamma, cfg.rho_search)
    scores = score_matched(x, W, assigned, cfg)
    return ScoreBatch(scores, (assigned >= 0).sum(axis=1), rho, assigned)


def score_flows(x, flows, cfg: DetectorConfig) -> np.ndarray:
    """Scores for a list of observed flows of possibly different lengths."""
    flows = [as_timestamps(w) for w in flows]
    out = np.empty(len(flows))
    by_len: dict[int, list[int]] = {}
    for idx, w in enumerate(flows):
        by_len.setdefault(w.size, []).append(idx)
    for _, idxs in sorted(by_len.items()):
        out[idxs] = score_batch(x, np.stack([flows[i] for i in idxs]), cfg).scores
    return out


def detect(x, w, cfg: DetectorConfig, epsilon: float) -> Verdict:
    """Match (robust mode), estimate the attack, score and threshold (H1 iff score > epsilon)."""
    x = as_timestamps(x)
    w = as_timestamps(w)
    res = score_batch(x, w[None, :], cfg)
    lam = float(res.scores[0])
    return Verdict(lam, float(epsilon), lam > epsilon, int(res.n2[0]), float(res.rho[0]),
                   bool(res.loss_veto[0]) if cfg.mode == "robust" else False)


def detect_matching(x, w, cfg: DetectorConfig):
    """The matching the robust detector uses for (x, w)."""
    x = as_timestamps(x)
    w = as_timestamps(w)
    assigned, rho = match_batch(x, w[None, :], cfg.gamma, cfg.rho_search)
    return to_matching(assigned[0], w.size, rho[0], cfg.gamma)


# -- calibration -------------------------------------------------------------

_CALIB_CHUNK = 4096


def null_scores(x, y_gen: IpdModel, cfg: DetectorConfig, count: int, rng: np.random.Generator) -> np.ndarray:
    """Scores of x against ``count`` unrelated flows drawn from ``y_gen``."""
    x = as_timestamps(x)
    m = cfg.flow_length(x.size)
    out = np.empty(count)
    for lo in range(0, count, _CALIB_CHUNK):
        b = min(_CALIB_CHUNK, count - lo)
        out[lo:lo + b] = score_batch(x, synth_flows(y_gen, m, b, rng), cfg).scores
    return out


def threshold_from_scores(scores, eta: float) -> float:
    """Nearest-rank (1 - eta) quantile: at most eta of the scores lie strictly above."""
    if not 0 < eta < 1:
        raise ValueError("eta must lie in (0, 1)")
    s = np.sort(np.asarray(scores, dtype=np.float64))
    return float(s[nearest_rank(1 - eta, s.size) - 1])


def calibrate_threshold(x, y_gen: IpdModel, cfg: DetectorConfig, seed: int) -> float:
    rng = np.random.default_rng(seed)
    return threshold_from_scores(null_scores(x, y_gen, cfg, cfg.calib_count, rng), cfg.eta)


@dataclass(frozen=True)
class Calibration:
    """Serializable record of a calibrated threshold and its provenance."""

    epsilon: float
    eta: float
    calib_count: int
    seed: int
    fingerprint: str
    params: dict
    x_sha: str = ""
    densities: str = ""

    def to_json(self) -> str:
        return json.dumps({"epsilon": self.epsilon, "eta": self.eta, "calib_count": self.calib_count,
                           "seed": self.seed, "fingerprint": self.fingerprint, "params": self.params,
                           "x_sha": self.x_sha, "densities": self.densities}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Calibration":
        d = json.loads(text)
        return cls(float(d["epsilon"]), float(d["eta"]), int(d["calib_count"]), int(d["seed"]),
                   str(d["fingerprint"]), dict(d["params"]), d.get("x_sha", ""), d.get("densities", ""))


def trace_sha(x) -> str:
    return hashlib.sha256(as_timestamps(x).tobytes()).hexdigest()[:16]
