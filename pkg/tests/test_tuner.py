import json
import math
import subprocess
import sys
import textwrap

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ballista.errors import InvalidArgumentError
from ballista.tuner import (Dimension, SearchSpace, TPEConfig, TrialRecord, best_trial,
                            default_space, load_history, objective, run_sweep, sample_uniform,
                            sphere, sphere_space, split_history, suggest,
                            synthetic_throwing_objective)

UNIT = SearchSpace((Dimension("x", "float", 0.0, 1.0),))


def complete(i, params, value):
    return TrialRecord(i, params, value, "complete")


@pytest.mark.parametrize("acc, stab, expect", [(0.8, 0.9, 1.55), (0.0, 0.0, 0.0),
                                               (0.5, 0.6, 1.1), (1.0, 1.0, 1.75)])
def test_objective_examples(acc, stab, expect):
    assert objective(acc, stab) == pytest.approx(expect, abs=1e-15)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_objective_monotone_and_flat_above_clip(a1, a2, s1, s2):
    (alo, ahi), (slo, shi) = sorted((a1, a2)), sorted((s1, s2))
    assert objective(alo, slo) <= objective(ahi, slo) <= objective(ahi, shi)
    if slo >= 0.75:
        assert objective(ahi, slo) == objective(ahi, shi)


def test_objective_rejects_out_of_range():
    with pytest.raises(InvalidArgumentError):
        objective(1.2, 0.5)
    with pytest.raises(InvalidArgumentError):
        objective(0.5, -0.1)


def test_default_space_matches_sweep_table():
    space = default_space()
    d = {x.name: x for x in space.dims}
    assert (d["stability_reward_pct"].lo, d["stability_reward_pct"].hi) == (0.0, 0.2)
    assert (d["desired_kl"].kind, d["desired_kl"].lo, d["desired_kl"].hi) == ("log", 1e-3, 1e-1)
    assert (d["roll_reward_pct"].hi, d["reward_scale"].lo, d["reward_scale"].hi) == (0.5, 0.5, 5.0)
    assert (d["value_loss_coef"].lo, d["value_loss_coef"].hi) == (0.1, 1.0)
    assert d["gru"].fixed is False
    assert sum(x.kind == "bool" for x in space.dims) == 5


def test_space_validation():
    with pytest.raises(InvalidArgumentError):
        SearchSpace(())
    with pytest.raises(InvalidArgumentError):
        Dimension("x", "float", 1.0, 1.0)
    with pytest.raises(InvalidArgumentError):
        Dimension("x", "log", 0.0, 1.0)
    with pytest.raises(InvalidArgumentError):
        SearchSpace((Dimension("x", "float"), Dimension("x", "bool")))
    with pytest.raises(InvalidArgumentError):
        TrialRecord(0, {}, float("nan"), "complete")


def test_log_dimension_roundtrip():
    d = Dimension("kl", "log", 1e-3, 1e-1)
    assert d.from_unit(0.5) == pytest.approx(1e-2)
    for v in (1e-3, 3e-3, 0.05, 1e-1):
        assert d.from_unit(d.to_unit(v)) == pytest.approx(v, rel=1e-12)


def test_startup_phase_is_uniform():
    hist = [complete(i, {"x": 0.9}, float(i)) for i in range(3)]
    xs = np.array([suggest(hist, UNIT, rng=np.random.default_rng(k))["x"] for k in range(1000)])
    assert xs.min() >= 0.0 and xs.max() <= 1.0
    assert stats.kstest(xs, "uniform").pvalue > 0.01


@settings(max_examples=30)
@given(st.integers(0, 40), st.integers(0, 2 ** 31))
def test_suggestions_within_bounds(n, seed):
    space = default_space()
    rng = np.random.default_rng(seed)
    hist = []
    for i in range(n):
        p = sample_uniform(space, rng)
        hist.append(complete(i, p, synthetic_throwing_objective(p)))
    hist.append(TrialRecord(n, sample_uniform(space, rng)))  # a running trial
    s = suggest(hist, space, rng=rng)
    assert space.contains(s)
    assert s["gru"] is False
    assert all(isinstance(s[d.name], bool) for d in space.dims if d.kind == "bool")


def test_concentrates_near_quadratic_optimum():
    rng = np.random.default_rng(0)
    xs = rng.random(50)
    hist = [complete(i, {"x": float(x)}, -(x - 0.3) ** 2) for i, x in enumerate(xs)]
    s = np.array([suggest(hist, UNIT, rng=np.random.default_rng(100 + k))["x"]
                  for k in range(100)])
    assert np.mean((s >= 0.1) & (s <= 0.5)) >= 0.8


def test_boolean_preference_follows_good_set():
    space = SearchSpace((Dimension("flag", "bool"), Dimension("x", "float")))
    rng = np.random.default_rng(1)
    hist = []
    for i in range(40):
        p = sample_uniform(space, rng)
        hist.append(complete(i, p, (1.0 if p["flag"] else 0.0) + 0.01 * rng.random()))
    picks = [suggest(hist, space, rng=np.random.default_rng(k))["flag"] for k in range(1000)]
    assert np.mean(picks) > 0.5


def test_constant_objective_keeps_suggestions_uniform():
    rng = np.random.default_rng(2)
    hist = [complete(i, {"x": float(rng.random())}, 1.0) for i in range(30)]
    xs = np.array([suggest(hist, UNIT, rng=np.random.default_rng(k))["x"] for k in range(1000)])
    assert stats.kstest(xs, "uniform").pvalue > 0.01


def test_running_and_failed_trials_do_not_shape_densities():
    rng = np.random.default_rng(3)
    hist = [complete(i, {"x": float(x)}, -(x - 0.3) ** 2) for i, x in enumerate(rng.random(30))]
    noisy = hist + [TrialRecord(100 + i, {"x": 0.99}) for i in range(20)] + \
        [TrialRecord(200 + i, {"x": 0.01}, status="failed", error="boom") for i in range(20)]
    a = suggest(hist, UNIT, rng=np.random.default_rng(9))
    b = suggest(noisy, UNIT, rng=np.random.default_rng(9))
    assert a == b


def test_split_breaks_ties_at_random():
    hist = [complete(i, {"x": 0.1 * i}, 1.0) for i in range(8)]
    picks = {split_history(hist, 0.25, np.random.default_rng(k))[0][0].trial_id
             for k in range(50)}
    assert len(picks) > 1
    good, bad = split_history(hist, 0.25, np.random.default_rng(0))
    assert len(good) == 2 and len(bad) == 6


def _best_of(n, seed, use_tpe):
    space = sphere_space(2)
    hist = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        p = suggest(hist, space, rng=rng) if use_tpe else sample_uniform(space, rng)
        hist.append(complete(i, p, sphere(p)))
    return max(t.objective for t in hist)


def test_sphere_benchmark_beats_random_search():
    # objective gap to the optimum (0) of the median best-of-60 over 20 paired repeats
    tpe = np.median([-_best_of(60, s, True) for s in range(20)])
    rnd = np.median([-_best_of(60, s, False) for s in range(20)])
    assert tpe <= 0.8 * rnd


def test_budget_one_runs_single_trial(tmp_path):
    path = tmp_path / "history.jsonl"
    best, hist = run_sweep(sphere_space(2), 1, sphere, str(path))
    assert len(hist) == 1 and best is hist[0] and best.status == "complete"
    assert len(load_history(str(path))) == 1
    summary = json.loads((tmp_path / "best.json").read_text())
    assert summary["best"]["trial_id"] == 0 and summary["n_complete"] == 1


def test_failed_trials_are_recorded_and_sweep_continues(tmp_path):
    def flaky(params):
        if params["x0"] < 0:
            raise RuntimeError("diverged")
        return sphere(params)

    best, hist = run_sweep(sphere_space(2), 12, flaky, str(tmp_path / "h.jsonl"),
                           max_failures=100)
    done = [t for t in hist if t.status == "complete"]
    failed = [t for t in hist if t.status == "failed"]
    assert len(done) == 12 and failed
    assert all("diverged" in t.error for t in failed)
    assert best.objective == max(t.objective for t in done)


def test_failure_cap_stops_sweep(tmp_path):
    def broken(params):
        raise ValueError("always")

    best, hist = run_sweep(sphere_space(1), 5, broken, str(tmp_path / "h.jsonl"),
                           max_failures=3)
    assert best is None and len(hist) == 4
    assert not (tmp_path / "best.json").exists()


def test_non_finite_objective_is_a_failure(tmp_path):
    _, hist = run_sweep(UNIT, 2, lambda p: float("nan") if p["x"] < 0.5 else p["x"],
                        str(tmp_path / "h.jsonl"), max_failures=50)
    assert all(t.status == "failed" for t in hist if t.params["x"] < 0.5)


def test_torn_last_line_is_skipped_and_repaired(tmp_path):
    path = tmp_path / "h.jsonl"
    run_sweep(UNIT, 3, lambda p: p["x"], str(path))
    with open(path, "a") as fh:
        fh.write('{"trial_id": 3, "params": {"x": 0.')
    assert len(load_history(str(path))) == 3
    _, hist = run_sweep(UNIT, 5, lambda p: p["x"], str(path))
    assert [t.trial_id for t in hist] == [0, 1, 2, 3, 4]
    assert all(json.loads(line) for line in path.read_text().splitlines())


CRASHING_SWEEP = textwrap.dedent("""
    import os, sys
    from ballista.tuner import run_sweep, sphere, sphere_space

    def evaluate(params, calls=[0]):
        calls[0] += 1
        if calls[0] == int(sys.argv[2]):
            os._exit(9)
        return sphere(params)

    run_sweep(sphere_space(2), 15, evaluate, sys.argv[1], seed=4)
""")


def test_resume_after_crash(tmp_path):
    script = tmp_path / "crash.py"
    script.write_text(CRASHING_SWEEP)
    path = tmp_path / "crashed" / "h.jsonl"
    proc = subprocess.run([sys.executable, str(script), str(path), "7"])
    assert proc.returncode == 9
    assert len(load_history(str(path))) == 6
    _, resumed = run_sweep(sphere_space(2), 15, sphere, str(path), seed=4)
    ids = [t.trial_id for t in resumed]
    assert len(ids) == len(set(ids)) == 15
    assert sum(t.status == "complete" for t in resumed) == 15
    _, clean = run_sweep(sphere_space(2), 15, sphere, str(tmp_path / "clean" / "h.jsonl"),
                         seed=4)
    assert [t.params for t in resumed] == [t.params for t in clean]
    # a completed sweep resumed again does no further work
    _, again = run_sweep(sphere_space(2), 15, sphere, str(path), seed=4)
    assert len(again) == 15


def test_parallel_workers(tmp_path):
    best, hist = run_sweep(sphere_space(2), 6, sphere, str(tmp_path / "h.jsonl"), workers=2)
    assert sum(t.status == "complete" for t in hist) == 6
    assert len({t.trial_id for t in hist}) == 6
    assert best_trial(hist) is best


def test_sweep_argument_validation(tmp_path):
    with pytest.raises(InvalidArgumentError):
        run_sweep(UNIT, 0, sphere, str(tmp_path / "h.jsonl"))
    with pytest.raises(InvalidArgumentError):
        run_sweep(UNIT, 1, sphere, str(tmp_path / "h.jsonl"), workers=0)
    with pytest.raises(InvalidArgumentError):
        TPEConfig(quantile=1.0)


def test_synthetic_objective_range():
    rng = np.random.default_rng(4)
    vals = [synthetic_throwing_objective(sample_uniform(default_space(), rng))
            for _ in range(200)]
    assert min(vals) >= 0.0 and max(vals) <= 1.75
    assert not math.isclose(min(vals), max(vals))
