"""Adversary budgets, delay grids and attack actions."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def budget_count(ratio: float, n: int) -> int:
    """floor(ratio * n), tolerant of float fuzz such as 0.29 * 100."""
    return int(math.floor(round(ratio * n, 9)))


@dataclass(frozen=True)
class AttackBudget:
    """Maximum delay (s), chaff ratio and drop ratio available to the adversary."""

    a_max: float = 0.0
    p_a: float = 0.0
    p_l: float = 0.0

    def __post_init__(self):
        if not (self.a_max >= 0 and math.isfinite(self.a_max)):
            raise ValueError("a_max must be >= 0")
        if not (self.p_a >= 0 and math.isfinite(self.p_a)):
            raise ValueError("p_a must be >= 0")
        if not 0 <= self.p_l < 1:
            raise ValueError("p_l must lie in [0, 1)")

    def n_drop(self, n: int) -> int:
        return budget_count(self.p_l, n)

    def n_chaff(self, n: int) -> int:
        return budget_count(self.p_a, n)


@dataclass(frozen=True)
class DelayGrid:
    """``levels`` equally spaced delays spanning [0, a_max].

    A zero budget collapses the grid to the single level 0.
    """

    levels: int = 256
    a_max: float = 0.0

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("a delay grid needs at least 2 levels")
        if not (self.a_max >= 0 and math.isfinite(self.a_max)):
            raise ValueError("a_max must be >= 0")

    @property
    def size(self) -> int:
        return 1 if self.a_max == 0 else self.levels

    @property
    def step(self) -> float:
        return 0.0 if self.a_max == 0 else self.a_max / (self.levels - 1)

    @property
    def values(self) -> np.ndarray:
        if self.a_max == 0:
            return np.zeros(1)
        return np.linspace(0.0, self.a_max, self.levels)

    def offsets(self) -> np.ndarray:
        """Delay differences between levels, indexed like chain terms."""
        k = self.size
        return np.arange(-(k - 1), k) * self.step


@dataclass(frozen=True, eq=False)
class AttackAction:
    """Per-packet delays, drop mask and chaff timestamps."""

    delays: np.ndarray
    drop: np.ndarray
    chaff: np.ndarray

    def __post_init__(self):
        delays = np.array(self.delays, dtype=np.float64).ravel()
        drop = np.array(self.drop, dtype=bool).ravel()
        chaff = np.sort(np.array(self.chaff, dtype=np.float64).ravel())
        if delays.shape != drop.shape:
            raise ValueError("delays and drop mask must have the same length")
        for arr in (delays, drop, chaff):
            arr.setflags(write=False)
        object.__setattr__(self, "delays", delays)
        object.__setattr__(self, "drop", drop)
        object.__setattr__(self, "chaff", chaff)

    @classmethod
    def delay_only(cls, delays) -> "AttackAction":
        delays = np.asarray(delays, dtype=np.float64)
        return cls(delays, np.zeros(delays.size, bool), np.empty(0))

    @classmethod
    def identity(cls, n: int) -> "AttackAction":
        return cls.delay_only(np.zeros(n))

    @property
    def n(self) -> int:
        return int(self.delays.size)

    @property
    def m(self) -> int:
        return self.n + int(self.chaff.size) - int(self.drop.sum())

    def violations(self, budget: AttackBudget) -> list[str]:
        problems = []
        if np.any(self.delays < 0) or np.any(self.delays > budget.a_max):
            problems.append("delay outside [0, a_max]")
        if int(self.drop.sum()) > budget.n_drop(self.n):
            problems.append("too many drops")
        if self.chaff.size > budget.n_chaff(self.n):
            problems.append("too many chaff packets")
        return problems

    def __eq__(self, other):
        if not isinstance(other, AttackAction):
            return NotImplemented
        return (np.array_equal(self.delays, other.delays) and np.array_equal(self.drop, other.drop)
                and np.array_equal(self.chaff, other.chaff))

    def to_dict(self) -> dict:
        return {"delays": self.delays.tolist(), "drop": np.flatnonzero(self.drop).tolist(),
                "chaff": self.chaff.tolist()}
