"""Asynchronous tree-structured Parzen estimator and a resumable sweep harness.

Objectives are maximised. Continuous dimensions are modelled in a unit
interval (log-scaled dimensions in log space) with truncated Gaussian
kernels; booleans use Laplace-smoothed Bernoulli frequencies.
"""
from __future__ import annotations

import json
import math
import os
import time
import traceback
from concurrent.futures import FIRST_COMPLETED, Future, ProcessPoolExecutor, wait
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import ndtr

from ballista.errors import InvalidArgumentError

BANDWIDTH_FLOOR = 0.01


@dataclass(frozen=True)
class Dimension:
    name: str
    kind: str  # "float", "log" or "bool"
    lo: float = 0.0
    hi: float = 1.0
    fixed: Optional[object] = None

    def __post_init__(self):
        if self.kind not in ("float", "log", "bool"):
            raise InvalidArgumentError(f"unknown dimension kind {self.kind!r}")
        if self.kind != "bool":
            if not self.lo < self.hi:
                raise InvalidArgumentError(f"{self.name}: lo must be below hi")
            if self.kind == "log" and self.lo <= 0:
                raise InvalidArgumentError(f"{self.name}: log dimension needs lo > 0")

    def to_unit(self, value: float) -> float:
        if self.kind == "log":
            return (math.log(value) - math.log(self.lo)) / (math.log(self.hi) - math.log(self.lo))
        return (value - self.lo) / (self.hi - self.lo)

    def from_unit(self, u: float) -> float:
        u = min(max(u, 0.0), 1.0)
        if self.kind == "log":
            v = math.exp(math.log(self.lo) + u * (math.log(self.hi) - math.log(self.lo)))
        else:
            v = self.lo + u * (self.hi - self.lo)
        return min(max(v, self.lo), self.hi)


@dataclass(frozen=True)
class SearchSpace:
    dims: Tuple[Dimension, ...]

    def __post_init__(self):
        if not self.dims:
            raise InvalidArgumentError("search space is empty")
        names = [d.name for d in self.dims]
        if len(set(names)) != len(names):
            raise InvalidArgumentError("dimension names must be unique")
        object.__setattr__(self, "dims", tuple(self.dims))

    @property
    def names(self) -> List[str]:
        return [d.name for d in self.dims]

    def contains(self, params: dict) -> bool:
        for d in self.dims:
            v = params.get(d.name)
            if d.kind == "bool":
                if not isinstance(v, bool):
                    return False
            elif not (isinstance(v, (int, float)) and d.lo <= v <= d.hi):
                return False
        return True


def default_space() -> SearchSpace:
    """The throwing sweep: reward weights, curriculum thresholds, learner and input toggles."""
    return SearchSpace((
        Dimension("stability_reward_pct", "float", 0.0, 0.2),
        Dimension("stability_threshold", "float", 0.0, 1.0),
        Dimension("accuracy_threshold", "float", 0.0, 1.0),
        Dimension("desired_kl", "log", 1e-3, 1e-1),
        Dimension("roll_reward_pct", "float", 0.0, 0.5),
        Dimension("reward_scale", "float", 0.5, 5.0),
        Dimension("value_loss_coef", "float", 0.1, 1.0),
        Dimension("gru", "bool", fixed=False),
        Dimension("global_foot_pitch_state", "bool"),
        Dimension("body_roll_state", "bool"),
        Dimension("estimate_displacement_state", "bool"),
        Dimension("ball_released_state", "bool"),
    ))


@dataclass(frozen=True)
class TPEConfig:
    quantile: float = 0.25
    n_candidates: int = 24
    n_startup: int = 10

    def __post_init__(self):
        if not 0.0 < self.quantile < 1.0:
            raise InvalidArgumentError("quantile must lie in (0, 1)")
        if self.n_candidates < 1 or self.n_startup < 0:
            raise InvalidArgumentError("n_candidates must be >= 1 and n_startup >= 0")


@dataclass
class TrialRecord:
    trial_id: int
    params: dict
    objective: Optional[float] = None
    status: str = "running"  # running | complete | failed
    started: float = 0.0
    finished: Optional[float] = None
    error: Optional[str] = None

    def __post_init__(self):
        if self.status not in ("running", "complete", "failed"):
            raise InvalidArgumentError(f"unknown trial status {self.status!r}")
        if self.status == "complete" and (self.objective is None
                                          or not math.isfinite(self.objective)):
            raise InvalidArgumentError("a complete trial needs a finite objective")

    def to_dict(self) -> dict:
        return asdict(self)


def objective(accuracy: float, stability_rate: float) -> float:
    """Throwing accuracy plus stability rate clipped at 0.75."""
    for name, v in (("accuracy", accuracy), ("stability_rate", stability_rate)):
        if not 0.0 <= v <= 1.0:
            raise InvalidArgumentError(f"{name} must lie in [0, 1], got {v}")
    return float(accuracy + min(stability_rate, 0.75))


# ------------------------------------------------------------------ densities

def _bandwidth(points: np.ndarray) -> float:
    """Silverman's rule on the unit interval, never narrower than 1 / (n + 1).

    The shrinking floor stops a tight cluster of early winners from collapsing
    the search onto itself; it reaches the fixed 1% floor at 99 points.
    """
    n = points.size
    if n < 2:
        return 1.0
    sigma = float(np.std(points, ddof=1))
    return max(1.06 * sigma * n ** (-0.2), 1.0 / (n + 1), BANDWIDTH_FLOOR)


class _Parzen1D:
    """Truncated-Gaussian mixture on [0, 1] plus one uniform prior component."""

    def __init__(self, points: np.ndarray):
        self.mu = np.asarray(points, dtype=float)
        self.h = _bandwidth(self.mu) if self.mu.size else 1.0
        self.mass = ndtr((1.0 - self.mu) / self.h) - ndtr(-self.mu / self.h)
        self.weight_prior = 1.0 / (self.mu.size + 1)

    def pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_1d(x)[:, None]
        dens = self.weight_prior * np.ones(x.shape[0])
        if self.mu.size:
            z = (x - self.mu[None, :]) / self.h
            k = np.exp(-0.5 * z * z) / (math.sqrt(2 * math.pi) * self.h * self.mass[None, :])
            dens = dens + (1.0 - self.weight_prior) * k.mean(axis=1)
        return dens

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        out = np.empty(n)
        for i in range(n):
            if self.mu.size == 0 or rng.random() < self.weight_prior:
                out[i] = rng.random()
                continue
            c = self.mu[rng.integers(self.mu.size)]
            while True:
                v = c + self.h * rng.standard_normal()
                if 0.0 <= v <= 1.0:
                    out[i] = v
                    break
        return out


def _bernoulli(values: Sequence[bool]) -> float:
    return (sum(bool(v) for v in values) + 1.0) / (len(values) + 2.0)


def sample_uniform(space: SearchSpace, rng: np.random.Generator) -> dict:
    params = {}
    for d in space.dims:
        if d.fixed is not None:
            params[d.name] = d.fixed
        elif d.kind == "bool":
            params[d.name] = bool(rng.random() < 0.5)
        else:
            params[d.name] = d.from_unit(rng.random())
    return params


def split_history(history: Sequence[TrialRecord], quantile: float,
                  rng: np.random.Generator):
    """Complete trials split into (good, bad) at the objective quantile; ties broken at random."""
    done = [t for t in history if t.status == "complete"]
    if not done:
        return [], []
    objs = np.array([t.objective for t in done])
    order = np.lexsort((rng.random(len(done)), -objs))
    n_good = max(1, int(math.ceil(quantile * len(done))))
    good = [done[i] for i in order[:n_good]]
    bad = [done[i] for i in order[n_good:]]
    return good, bad


def suggest(history: Sequence[TrialRecord], space: SearchSpace,
            cfg: Optional[TPEConfig] = None, rng: Optional[np.random.Generator] = None) -> dict:
    """Next parameter assignment. Running and failed trials do not enter the density fits."""
    cfg = cfg or TPEConfig()
    rng = rng or np.random.default_rng()
    if not isinstance(space, SearchSpace) or not space.dims:
        raise InvalidArgumentError("search space is empty")
    done = [t for t in history if t.status == "complete"]
    if len(done) < max(cfg.n_startup, 2):
        return sample_uniform(space, rng)
    objs = np.array([t.objective for t in done])
    if np.ptp(objs) <= 1e-12 * max(1.0, np.abs(objs).max()):
        # a flat history carries no information about where to look
        return sample_uniform(space, rng)
    good, bad = split_history(done, cfg.quantile, rng)

    n = cfg.n_candidates
    cands = [dict() for _ in range(n)]
    score = np.zeros(n)
    for d in space.dims:
        if d.fixed is not None:
            for c in cands:
                c[d.name] = d.fixed
            continue
        if d.kind == "bool":
            p_good = _bernoulli([t.params[d.name] for t in good])
            p_bad = _bernoulli([t.params[d.name] for t in bad])
            draws = rng.random(n) < p_good
            for c, v in zip(cands, draws):
                c[d.name] = bool(v)
            score += np.where(draws, math.log(p_good) - math.log(p_bad),
                              math.log(1 - p_good) - math.log(1 - p_bad))
            continue
        l_model = _Parzen1D(np.array([d.to_unit(t.params[d.name]) for t in good]))
        g_model = _Parzen1D(np.array([d.to_unit(t.params[d.name]) for t in bad]))
        u = l_model.sample(rng, n)
        score += np.log(l_model.pdf(u)) - np.log(g_model.pdf(u))
        for c, v in zip(cands, u):
            c[d.name] = d.from_unit(float(v))
    return cands[int(np.argmax(score))]


# ------------------------------------------------------------------ sweep harness

def load_history(path: str) -> List[TrialRecord]:
    """Read a line-delimited history, skipping a torn final line left by a crash."""
    records = []
    if not os.path.exists(path):
        return records
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                records.append(TrialRecord(**json.loads(line)))
            except (json.JSONDecodeError, TypeError):
                continue
    return records


def _append(path: str, record: TrialRecord) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def _repair_tail(path: str) -> None:
    """Drop a partially written last line so appends start on a fresh line."""
    if not os.path.exists(path):
        return
    with open(path, "rb") as fh:
        data = fh.read()
    if data and not data.endswith(b"\n"):
        cut = data.rfind(b"\n") + 1
        with open(path, "wb") as fh:
            fh.write(data[:cut])


def best_trial(history: Sequence[TrialRecord]) -> Optional[TrialRecord]:
    done = [t for t in history if t.status == "complete"]
    if not done:
        return None
    return max(done, key=lambda t: (t.objective, -t.trial_id))


def _run_one(fn: Callable[[dict], float], params: dict):
    try:
        value = float(fn(params))
        if not math.isfinite(value):
            return None, "non-finite objective"
        return value, None
    except Exception:  # a failing trial must not stop the sweep
        return None, traceback.format_exc(limit=3)


def run_sweep(space: SearchSpace, budget: int, evaluate: Callable[[dict], float],
              history_path: str, workers: int = 1, cfg: Optional[TPEConfig] = None,
              seed: int = 0, max_failures: Optional[int] = None):
    """Run trials until ``budget`` of them are complete; returns (best, history).

    Every finished trial is appended to ``history_path``; calling again with the
    same path resumes. With ``workers > 1`` trials run in worker processes
    (``evaluate`` must be picklable) and suggestions are made while others run.
    """
    if budget < 1:
        raise InvalidArgumentError("budget must be >= 1")
    if workers < 1:
        raise InvalidArgumentError("workers must be >= 1")
    cfg = cfg or TPEConfig()
    max_failures = budget if max_failures is None else max_failures
    os.makedirs(os.path.dirname(os.path.abspath(history_path)), exist_ok=True)
    _repair_tail(history_path)
    history = load_history(history_path)
    next_id = max((t.trial_id for t in history), default=-1) + 1
    failures = sum(t.status == "failed" for t in history)

    def n_complete():
        return sum(t.status == "complete" for t in history)

    def propose(running: List[TrialRecord]) -> TrialRecord:
        nonlocal next_id
        # the stream depends only on how many trials exist, so resumes replay exactly
        rng = np.random.default_rng([seed, next_id])
        params = suggest(history + running, space, cfg, rng)
        rec = TrialRecord(next_id, params, started=time.time())
        next_id += 1
        return rec

    def finish(rec: TrialRecord, value, err) -> None:
        nonlocal failures
        rec.finished = time.time()
        if err is None:
            rec.status, rec.objective = "complete", value
        else:
            rec.status, rec.error = "failed", err
            failures += 1
        history.append(rec)
        _append(history_path, rec)

    if workers == 1:
        while n_complete() < budget and failures <= max_failures:
            rec = propose([])
            finish(rec, *_run_one(evaluate, rec.params))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            running: Dict[Future, TrialRecord] = {}
            while True:
                while (len(running) < workers and n_complete() + len(running) < budget
                       and failures <= max_failures):
                    rec = propose(list(running.values()))
                    running[pool.submit(_run_one, evaluate, rec.params)] = rec
                if not running:
                    break
                finished, _ = wait(list(running), return_when=FIRST_COMPLETED)
                for fut in sorted(finished, key=lambda f: running[f].trial_id):
                    rec = running.pop(fut)
                    try:
                        value, err = fut.result()
                    except Exception as exc:  # the worker process itself died
                        value, err = None, repr(exc)
                    finish(rec, value, err)
    best = best_trial(history)
    if best is not None:
        with open(os.path.join(os.path.dirname(os.path.abspath(history_path)), "best.json"),
                  "w") as fh:
            json.dump({"best": best.to_dict(), "n_complete": n_complete(),
                       "n_failed": failures}, fh, indent=2)
            fh.write("\n")
    return best, history


# ------------------------------------------------------------------ synthetic objectives

def sphere_space(dim: int = 2) -> SearchSpace:
    return SearchSpace(tuple(Dimension(f"x{i}", "float", -5.0, 5.0) for i in range(dim)))


def sphere(params: dict, center: float = 1.0) -> float:
    """Negated sphere function; maximum 0 at every coordinate equal to ``center``."""
    return -sum((v - center) ** 2 for k, v in sorted(params.items()) if k.startswith("x"))


def synthetic_throwing_objective(params: dict) -> float:
    """Smooth stand-in for a training run, used to exercise the sweep quickly.

    Peaks near the search-space values a well-tuned run would favour and returns
    a value in the same [0, 1.75] range as :func:`objective`.
    """
    acc = math.exp(-((params["accuracy_threshold"] - 0.5) ** 2) / 0.08
                   - ((math.log10(params["desired_kl"]) + 1.7) ** 2) / 0.8
                   - ((params["reward_scale"] - 2.5) ** 2) / 8.0)
    acc *= 0.9 if params.get("estimate_displacement_state", True) else 0.75
    stab = 1.0 / (1.0 + math.exp(-(params["stability_reward_pct"] - 0.03) * 60.0))
    stab *= math.exp(-((params["stability_threshold"] - 0.3) ** 2) / 0.5)
    return objective(min(max(acc, 0.0), 1.0), min(max(stab, 0.0), 1.0))
