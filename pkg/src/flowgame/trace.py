"""Packet-timing sequences: representation, file I/O, synthesis."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np


class TraceError(ValueError):
    """Raised for malformed or invalid timing data."""


@dataclass(frozen=True, eq=False)
class FlowTrace:
    """Monotone sequence of packet timestamps, in seconds."""

    timestamps: np.ndarray

    def __post_init__(self):
        ts = np.array(self.timestamps, dtype=np.float64, copy=True).ravel()
        if ts.size == 0:
            raise TraceError("empty trace")
        if not np.all(np.isfinite(ts)):
            raise TraceError("non-finite timestamp")
        if np.any(ts < 0):
            raise TraceError("negative timestamp")
        if np.any(np.diff(ts) < 0):
            raise TraceError("unsorted trace")
        ts.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)

    @property
    def n(self) -> int:
        return int(self.timestamps.size)

    def __len__(self):
        return self.n

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.timestamps, dtype=dtype)

    def __eq__(self, other):
        if not isinstance(other, FlowTrace):
            return NotImplemented
        return np.array_equal(self.timestamps, other.timestamps)

    def __hash__(self):
        return hash(self.timestamps.tobytes())

    def __repr__(self):
        return f"FlowTrace(n={self.n}, span={self.timestamps[-1] - self.timestamps[0]:.6g}s)"

    def shifted(self, offset: float) -> "FlowTrace":
        return FlowTrace(self.timestamps + offset)


def as_timestamps(trace) -> np.ndarray:
    """Float64 view of a FlowTrace or any array-like of timestamps."""
    if isinstance(trace, FlowTrace):
        return trace.timestamps
    return np.asarray(trace, dtype=np.float64)


def ipd(trace) -> np.ndarray:
    """Inter-packet delays; length n-1, empty for a single packet."""
    return np.diff(as_timestamps(trace))


def load_trace(source) -> FlowTrace:
    """Read a trace file: one decimal timestamp per line, ``#`` comments allowed."""
    with open(source, "r", encoding="utf-8", newline=None) as fh:
        text = fh.read()
    return parse_trace(text)


def parse_trace(text: str) -> FlowTrace:
    values = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            value = float(line)
        except ValueError:
            raise TraceError(f"line {lineno}: cannot parse timestamp {line!r}") from None
        if not math.isfinite(value):
            raise TraceError(f"line {lineno}: non-finite timestamp")
        values.append(value)
    if not values:
        raise TraceError("empty trace")
    return FlowTrace(np.array(values))


def format_trace(trace) -> str:
    return "".join(f"{t:.9f}\n" for t in as_timestamps(trace))


def write_trace(trace, path) -> None:
    """Write atomically (temp file + rename)."""
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_trace(trace))
    os.replace(tmp, path)


_IPD_PARAMS = {
    "exponential": ("rate",),
    "lognormal": ("mu", "sigma"),
    "pareto": ("shape", "scale"),
    "empirical": (),
}


@dataclass(frozen=True)
class IpdModel:
    """Generator of i.i.d. inter-packet delays.

    Families: ``exponential(rate)``, ``lognormal(mu, sigma)`` (of the
    underlying normal), ``pareto(shape, scale)`` with support ``[scale, inf)``,
    and ``empirical`` which resamples the stored IPDs with replacement.
    """

    family: str
    params: tuple = ()
    samples: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if self.family not in _IPD_PARAMS:
            raise ValueError(f"unknown IPD family {self.family!r}")
        params = dict(self.params)
        expected = _IPD_PARAMS[self.family]
        if set(params) != set(expected):
            raise ValueError(f"{self.family} model needs parameters {expected}, got {sorted(params)}")
        object.__setattr__(self, "params", tuple(sorted((k, float(v)) for k, v in params.items())))
        p = dict(self.params)
        if self.family == "exponential" and not p["rate"] > 0:
            raise ValueError("exponential rate must be > 0")
        if self.family == "lognormal" and not (math.isfinite(p["mu"]) and p["sigma"] > 0):
            raise ValueError("lognormal needs finite mu and sigma > 0")
        if self.family == "pareto" and not (p["shape"] > 0 and p["scale"] > 0):
            raise ValueError("pareto shape and scale must be > 0")
        if self.family == "empirical":
            s = tuple(float(v) for v in self.samples)
            if len(s) < 2:
                raise ValueError("empirical IPD model requires at least 2 samples")
            if min(s) <= 0 or not all(math.isfinite(v) for v in s):
                raise ValueError("empirical IPD samples must be finite and > 0")
            object.__setattr__(self, "samples", s)

    @classmethod
    def exponential(cls, rate: float) -> "IpdModel":
        return cls("exponential", (("rate", rate),))

    @classmethod
    def lognormal(cls, mu: float, sigma: float) -> "IpdModel":
        return cls("lognormal", (("mu", mu), ("sigma", sigma)))

    @classmethod
    def pareto(cls, shape: float, scale: float) -> "IpdModel":
        return cls("pareto", (("shape", shape), ("scale", scale)))

    @classmethod
    def empirical(cls, samples: Iterable[float]) -> "IpdModel":
        return cls("empirical", (), tuple(samples))

    @classmethod
    def from_dict(cls, spec: Mapping) -> "IpdModel":
        spec = dict(spec)
        family = spec.pop("family")
        if family == "empirical":
            return cls.empirical(spec.pop("samples"))
        return cls(family, tuple(spec.items()))

    def to_dict(self) -> dict:
        out = {"family": self.family, **dict(self.params)}
        if self.family == "empirical":
            out["samples"] = list(self.samples)
        return out

    @property
    def mean(self) -> float:
        p = dict(self.params)
        if self.family == "exponential":
            return 1.0 / p["rate"]
        if self.family == "lognormal":
            return math.exp(p["mu"] + p["sigma"] ** 2 / 2)
        if self.family == "pareto":
            return math.inf if p["shape"] <= 1 else p["shape"] * p["scale"] / (p["shape"] - 1)
        return float(np.mean(self.samples))

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        p = dict(self.params)
        if self.family == "exponential":
            out = rng.exponential(1.0 / p["rate"], size)
        elif self.family == "lognormal":
            out = rng.lognormal(p["mu"], p["sigma"], size)
        elif self.family == "pareto":
            out = p["scale"] * (1.0 + rng.pareto(p["shape"], size))
        else:
            out = rng.choice(np.asarray(self.samples), size=size, replace=True)
        # exponential draws can underflow to exactly 0
        return np.maximum(out, np.finfo(np.float64).tiny)


@dataclass(frozen=True)
class DelayModel:
    """Per-packet path delay ``loc + jitter`` clipped at zero.

    Delays are i.i.d. across packets, so the induced jitter (the
    difference of consecutive delays) has zero mean. ``scale == 0``
    gives a constant delay.
    """

    loc: float = 0.0
    scale: float = 0.0
    family: str = "laplace"

    def __post_init__(self):
        if self.family not in ("laplace", "normal"):
            raise ValueError(f"unknown delay family {self.family!r}")
        if not (self.loc >= 0 and self.scale >= 0 and math.isfinite(self.loc) and math.isfinite(self.scale)):
            raise ValueError("delay loc and scale must be finite and >= 0")

    @classmethod
    def from_dict(cls, spec: Mapping) -> "DelayModel":
        return cls(float(spec.get("loc", 0.0)), float(spec.get("scale", 0.0)), spec.get("family", "laplace"))

    def to_dict(self) -> dict:
        return {"family": self.family, "loc": self.loc, "scale": self.scale}

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.scale == 0:
            return np.full(size, self.loc)
        if self.family == "laplace":
            jitter = rng.laplace(0.0, self.scale, size)
        else:
            jitter = rng.normal(0.0, self.scale, size)
        return np.maximum(self.loc + jitter, 0.0)


def jitter_samples(first: DelayModel, second: DelayModel, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` consecutive differences of the end-to-end delay D = D1 + D2."""
    total = first.sample(rng, count + 1) + second.sample(rng, count + 1)
    return np.diff(total)


def synth_flow(model: IpdModel, n: int, seed: int) -> FlowTrace:
    """Flow of ``n`` packets starting at 0 with i.i.d. IPDs from ``model``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    return FlowTrace(cumulative(model.sample(rng, n - 1)))


def synth_flows(model: IpdModel, n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` flows as rows of a (count, n) array."""
    return cumulative(model.sample(rng, (count, n - 1)))


def cumulative(ipds: np.ndarray) -> np.ndarray:
    ipds = np.asarray(ipds, dtype=np.float64)
    zeros = np.zeros(ipds.shape[:-1] + (1,))
    return np.concatenate([zeros, np.cumsum(ipds, axis=-1)], axis=-1)


def split_train_test(corpus: Sequence, fraction: float, seed: int):
    """Random disjoint split; training receives round(fraction * count) items."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    count = len(corpus)
    n_train = math.floor(fraction * count + 0.5)
    if n_train == 0 or n_train == count:
        raise ValueError("split produced empty part")
    order = np.random.default_rng(seed).permutation(count)
    train = sorted(order[:n_train].tolist())
    test = sorted(order[n_train:].tolist())
    return [corpus[i] for i in train], [corpus[i] for i in test]
