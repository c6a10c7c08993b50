"""Gaussian kernel density estimates of IPD / jitter distributions."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.signal import fftconvolve

FLOOR = 1e-12
LOG_FLOOR = math.log(FLOOR)
EXACT_MAX = 10_000
GRID_POINTS = 4096
MAX_GRID_POINTS = 1 << 21


class DegenerateSampleError(ValueError):
    pass


def silverman_bandwidth(samples: np.ndarray) -> float:
    n = samples.size
    sd = float(np.std(samples, ddof=1))
    q75, q25 = np.percentile(samples, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * n ** (-0.2)


@dataclass(frozen=True, eq=False)
class IpdDensity:
    """Fitted density with floored log-pdf evaluation.

    Up to ``EXACT_MAX`` samples the kernel sum is evaluated exactly;
    larger fits are tabulated once on a regular grid (spacing at most a
    quarter bandwidth) and interpolated linearly in log space.
    """

    samples: np.ndarray
    bandwidth: float
    _grid: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        s = np.sort(np.asarray(self.samples, dtype=np.float64).ravel())
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        if not (self.bandwidth > 0 and math.isfinite(self.bandwidth)):
            raise ValueError("bandwidth must be a positive finite number")
        if s.size > EXACT_MAX:
            object.__setattr__(self, "_grid", _tabulate(s, self.bandwidth))

    @property
    def n(self) -> int:
        return int(self.samples.size)

    @property
    def exact(self) -> bool:
        return self._grid is None

    def log_pdf(self, value):
        v = np.asarray(value, dtype=np.float64)
        if self._grid is None:
            out = self._exact_log_pdf(v.ravel()).reshape(v.shape)
        else:
            grid, logp = self._grid
            out = np.interp(v, grid, logp, left=LOG_FLOOR, right=LOG_FLOOR)
        out = np.maximum(out, LOG_FLOOR)
        if not np.all(np.isfinite(v)):
            out = np.where(np.isfinite(v), out, LOG_FLOOR)
        return float(out) if out.ndim == 0 else out

    def pdf(self, value):
        return np.exp(self.log_pdf(value))

    def _exact_log_pdf(self, v: np.ndarray) -> np.ndarray:
        s, h = self.samples, self.bandwidth
        norm = math.log(s.size * h * math.sqrt(2 * math.pi))
        out = np.empty(v.size)
        _kernel_log_sum(np.ascontiguousarray(v), s, h, out)
        return out - norm

    def to_dict(self) -> dict:
        return {"kind": "gaussian-kde", "bandwidth": self.bandwidth, "samples": self.samples.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "IpdDensity":
        return cls(np.asarray(data["samples"], dtype=np.float64), float(data["bandwidth"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "IpdDensity":
        return cls.from_dict(json.loads(text))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.float64(self.bandwidth).tobytes())
        h.update(self.samples.tobytes())
        return h.hexdigest()[:16]


@njit(cache=True)
def _kernel_log_sum(v, s, h, out):
    """log sum_j exp(-z_j^2 / 2), z_j = (v - s_j) / h, for sorted s.

    Terms more than ~745 nats below the largest one underflow to zero in
    double precision and are skipped.
    """
    n = s.size
    for i in range(v.size):
        x = v[i]
        if not np.isfinite(x):
            out[i] = -np.inf
            continue
        k = np.searchsorted(s, x)
        zmin = np.inf
        if k < n:
            zmin = (s[k] - x) / h
        if k > 0:
            zmin = min(zmin, (x - s[k - 1]) / h)
        peak = -0.5 * zmin * zmin
        reach = h * np.sqrt(zmin * zmin + 1500.0)
        lo = np.searchsorted(s, x - reach)
        hi = np.searchsorted(s, x + reach, side="right")
        total = 0.0
        for j in range(lo, hi):
            z = (x - s[j]) / h
            total += np.exp(-0.5 * z * z - peak)
        out[i] = peak + np.log(total)


def _tabulate(s: np.ndarray, h: float):
    lo, hi = s[0] - 8 * h, s[-1] + 8 * h
    points = GRID_POINTS
    while (hi - lo) / (points - 1) > h / 4 and points < MAX_GRID_POINTS:
        points *= 2
    grid = np.linspace(lo, hi, points)
    dx = grid[1] - grid[0]
    # linear binning onto the grid, then convolution with the sampled kernel
    pos = (s - lo) / dx
    left = np.clip(np.floor(pos).astype(np.int64), 0, points - 2)
    frac = pos - left
    counts = np.bincount(left, weights=1 - frac, minlength=points)
    counts += np.bincount(left + 1, weights=frac, minlength=points)
    half = int(math.ceil(8 * h / dx))
    offsets = np.arange(-half, half + 1) * dx
    kernel = np.exp(-0.5 * (offsets / h) ** 2) / (h * math.sqrt(2 * math.pi))
    dens = fftconvolve(counts, kernel, mode="same") / s.size
    logp = np.log(np.maximum(dens, FLOOR))
    return grid, logp


def fit_kde(samples, bandwidth: float | None = None) -> IpdDensity:
    """Gaussian KDE with Silverman's rule-of-thumb bandwidth."""
    s = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    if s.size < 2 or not np.all(np.isfinite(s)) or s[0] == s[-1]:
        raise DegenerateSampleError("degenerate sample")
    h = silverman_bandwidth(s) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise DegenerateSampleError("degenerate sample")
    return IpdDensity(s, h)


def log_pdf(density: IpdDensity, value):
    return density.log_pdf(value)


def nearest_rank(q: float, count: int) -> int:
    """1-based nearest-rank index ceil(q * count), guarded against float fuzz."""
    return min(count, max(1, math.ceil(round(q * count, 9))))


def quantile_abs(samples, q: float) -> float:
    """Nearest-rank q-quantile of the absolute values."""
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    a = np.sort(np.abs(np.asarray(samples, dtype=np.float64).ravel()))
    if a.size == 0:
        raise ValueError("empty sample")
    return float(a[nearest_rank(q, a.size) - 1])
