"""Monte Carlo evaluation of the analyst/adversary game.

For each reference flow X: calibrate the threshold on unrelated flows,
then repeat trials (D1, adversary acting on X + D1, D2, detect) and
record the detection fraction. The utility estimate averages the
per-X fractions.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .adversary import STRATEGIES, apply_attack, run_strategy
from .budget import AttackBudget, DelayGrid
from .density import DegenerateSampleError, IpdDensity, fit_kde
from .detector import DetectorConfig, calibrate_threshold, detect, score_flows
from .trace import DelayModel, FlowTrace, IpdModel, ipd, jitter_samples, synth_flow, split_train_test

SWEEP_AXES = ("a_max", "p_a", "p_l", "n", "eta", "adversary")
RESULT_COLUMNS = ("scenario", "adversary", "n", "a_max", "p_a", "p_l", "eta", "u_bar", "ci_low",
                  "ci_high", "x_count", "repeat_count", "seed")
ZERO_JITTER_BANDWIDTH = 1e-4

_TAG_DENSITY, _TAG_X, _TAG_CALIB, _TAG_TRIAL = 1, 2, 3, 4


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0] >> 1)


@dataclass(frozen=True)
class Scenario:
    ipd_model: IpdModel
    delay_model_1: DelayModel = DelayModel()
    delay_model_2: DelayModel = DelayModel()
    n: int = 20
    budget: AttackBudget = AttackBudget()
    adversary: str = "none"
    levels: int = 256
    eta: float = 0.01
    p_l_assumed: float | None = None
    mode: str = "auto"
    x_count: int = 100
    repeat_count: int = 50
    calib_count: int = 100_000
    seed: int = 0
    name: str = "scenario"
    training_ipds: int = 20_000
    jitter_count: int = 40_000
    densities: tuple | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if min(self.x_count, self.repeat_count, self.calib_count, self.n) < 1:
            raise ValueError("counts and n must be >= 1")
        if self.adversary not in STRATEGIES:
            raise ValueError(f"unknown adversary {self.adversary!r}; expected one of {STRATEGIES}")
        if self.mode not in ("auto", "delay", "robust"):
            raise ValueError("mode must be auto, delay or robust")

    @property
    def detector_mode(self) -> str:
        if self.mode != "auto":
            return self.mode
        b = self.budget
        return "delay" if b.p_a == 0 and b.p_l == 0 and not self.p_l_assumed else "robust"

    @property
    def grid(self) -> DelayGrid:
        return DelayGrid(self.levels, self.budget.a_max)

    def fitted_densities(self):
        """(f_dY, f_dD), fitted on the training half of synthetic data unless supplied."""
        if self.densities is not None:
            return self.densities
        key = (self.ipd_model, self.delay_model_1, self.delay_model_2, self.n, self.seed,
               self.training_ipds, self.jitter_count)
        if key not in _DENSITY_CACHE:
            _DENSITY_CACHE[key] = _fit_scenario_densities(self)
        return _DENSITY_CACHE[key]

    def detector_config(self) -> DetectorConfig:
        f_dy, f_dd = self.fitted_densities()
        p_l = self.budget.p_l if self.p_l_assumed is None else self.p_l_assumed
        return DetectorConfig(f_dd, f_dy, self.grid, eta=self.eta, p_l_assumed=p_l,
                              p_a_assumed=self.budget.p_a, calib_count=self.calib_count,
                              mode=self.detector_mode)

    def with_axis(self, axis: str, value) -> "Scenario":
        if axis not in SWEEP_AXES:
            raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
        if axis in ("a_max", "p_a", "p_l"):
            return dataclasses.replace(self, budget=dataclasses.replace(self.budget, **{axis: float(value)}))
        if axis == "n":
            return dataclasses.replace(self, n=int(value))
        if axis == "eta":
            return dataclasses.replace(self, eta=float(value))
        return dataclasses.replace(self, adversary=str(value))

    def echo(self) -> dict:
        return {"scenario": self.name, "adversary": self.adversary, "n": self.n, "a_max": self.budget.a_max,
                "p_a": self.budget.p_a, "p_l": self.budget.p_l, "eta": self.eta, "x_count": self.x_count,
                "repeat_count": self.repeat_count, "seed": self.seed}


_DENSITY_CACHE: dict = {}
_EPSILON_CACHE: dict = {}


def _fit_scenario_densities(sc: Scenario):
    rng = np.random.default_rng(derive_seed(sc.seed, _TAG_DENSITY))
    n = max(sc.n, 2)
    flows = math.ceil(2 * sc.training_ipds / (n - 1))
    corpus = [synth_flow(sc.ipd_model, n, s) for s in rng.integers(0, 2**63, flows)]
    train, _ = split_train_test(corpus, 0.5, int(rng.integers(0, 2**63)))
    f_dy = fit_kde(np.concatenate([ipd(t) for t in train]))
    jitter = jitter_samples(sc.delay_model_1, sc.delay_model_2, sc.jitter_count, rng)
    half = rng.permutation(jitter.size)[: jitter.size // 2]
    try:
        f_dd = fit_kde(jitter[np.sort(half)])
    except DegenerateSampleError:
        # constant path delays: a narrow kernel at zero jitter
        f_dd = IpdDensity(np.zeros(1), ZERO_JITTER_BANDWIDTH)
    return f_dy, f_dd


@dataclass(frozen=True)
class UtilityEstimate:
    u_bar: float
    ci_low: float
    ci_high: float
    per_x: tuple
    params: dict

    @property
    def half_width(self) -> float:
        return (self.ci_high - self.ci_low) / 2

    def row(self) -> dict:
        p = self.params
        return {"scenario": p["scenario"], "adversary": p["adversary"], "n": p["n"], "a_max": p["a_max"],
                "p_a": p["p_a"], "p_l": p["p_l"], "eta": p["eta"], "u_bar": self.u_bar,
                "ci_low": self.ci_low, "ci_high": self.ci_high, "x_count": p["x_count"],
                "repeat_count": p["repeat_count"], "seed": p["seed"]}


def summarize(per_x, params: dict, z: float = 1.96) -> UtilityEstimate:
    """Mean of per-X utilities with a normal-approximation confidence interval."""
    u = np.asarray(per_x, dtype=np.float64)
    mean = float(u.mean())
    half = z * float(u.std(ddof=1)) / math.sqrt(u.size) if u.size > 1 else 0.0
    return UtilityEstimate(mean, max(0.0, mean - half), min(1.0, mean + half), tuple(u.tolist()), dict(params))


# -- trials ------------------------------------------------------------------

def reference_flow(scenario: Scenario, x_index: int) -> FlowTrace:
    return synth_flow(scenario.ipd_model, scenario.n, derive_seed(scenario.seed, _TAG_X, x_index))


def scenario_threshold(scenario: Scenario, x, x_index: int) -> float:
    cfg = scenario.detector_config()
    key = (cfg.fingerprint(), scenario.ipd_model, scenario.seed, x_index, np.asarray(x).tobytes())
    if key not in _EPSILON_CACHE:
        seed = derive_seed(scenario.seed, _TAG_CALIB, x_index)
        _EPSILON_CACHE[key] = calibrate_threshold(x, scenario.ipd_model, cfg, seed)
    return _EPSILON_CACHE[key]


def trial_flow(x, scenario: Scenario, trial_seed: int) -> FlowTrace:
    """Observed flow for one trial: D1, the adversary's action on x + D1, then D2."""
    x = np.asarray(x, dtype=np.float64)
    net1, adv, net2 = np.random.SeedSequence(trial_seed).spawn(3)
    d1 = scenario.delay_model_1.sample(np.random.default_rng(net1), x.size)
    f_dy, f_dd = scenario.fitted_densities()
    action = run_strategy(scenario.adversary, x + d1, scenario.budget, f_dy, f_dd, scenario.grid,
                          int(adv.generate_state(1, np.uint64)[0] >> 1))
    d2 = scenario.delay_model_2.sample(np.random.default_rng(net2), action.m)
    return apply_attack(x, action, d1, d2)


def run_trial(x, scenario: Scenario, epsilon: float, trial_seed: int) -> bool:
    w = trial_flow(x, scenario, trial_seed)
    return detect(x, w, scenario.detector_config(), epsilon).accept_h1


def x_utility(scenario: Scenario, x_index: int) -> float:
    """Detection fraction over the repeat trials for the x_index-th reference flow."""
    x = reference_flow(scenario, x_index).timestamps
    epsilon = scenario_threshold(scenario, x, x_index)
    flows = [trial_flow(x, scenario, derive_seed(scenario.seed, _TAG_TRIAL, x_index, t))
             for t in range(scenario.repeat_count)]
    scores = score_flows(x, flows, scenario.detector_config())
    return float(np.mean(scores > epsilon))


def _x_utilities(args):
    scenario, indices = args
    return [x_utility(scenario, i) for i in indices]


def estimate_utility(scenario: Scenario, jobs: int = 1) -> UtilityEstimate:
    indices = list(range(scenario.x_count))
    if jobs <= 1:
        per_x = [x_utility(scenario, i) for i in indices]
    else:
        chunks = [(scenario, indices[k::jobs]) for k in range(jobs)]
        per_x = [0.0] * len(indices)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for (_, idx), values in zip(chunks, pool.map(_x_utilities, chunks)):
                for i, v in zip(idx, values):
                    per_x[i] = v
    return summarize(per_x, scenario.echo())


def sweep(base: Scenario, axis: str, values, jobs: int = 1) -> list[UtilityEstimate]:
    """One utility estimate per value; every point reuses the base master seed."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    return [estimate_utility(base.with_axis(axis, v), jobs=jobs) for v in values]


# -- result tables -----------------------------------------------------------

def _cell(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def results_csv(estimates) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for est in estimates:
        row = est.row()
        writer.writerow([_cell(row[c]) for c in RESULT_COLUMNS])
    return buf.getvalue()


def results_json(estimates) -> str:
    return json.dumps([est.row() for est in estimates], indent=2) + "\n"


def write_results(estimates, path, fmt: str = "csv") -> None:
    text = results_csv(estimates) if fmt == "csv" else results_json(estimates)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)
