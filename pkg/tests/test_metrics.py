import numpy as np
import pytest

from jmsglmb.glmb import JmsGlmbFilter, Label, MultiTargetEstimate, TargetEstimate, TruncationPolicy
from jmsglmb.metrics import (OspaParams, match_track, mode_identification, mode_probability_trace,
                             ospa, positions, switch_steps)
from jmsglmb.simulator import TruthTrajectory

from conftest import line_model
from oracles import brute_ospa

C200 = OspaParams(200.0, 2.0)


def test_ospa_examples():
    X = np.array([[1.0, 2.0], [30.0, -4.0]])
    assert ospa(X, X, C200).total == 0.0
    assert ospa(np.zeros((0, 2)), [[5.0, 5.0]], C200).total == 200.0
    assert ospa([[0.0]], [[100.0]], C200).total == pytest.approx(100.0)
    assert ospa([], [], C200).total == 0.0


def test_ospa_decomposition(rng):
    for _ in range(200):
        X = rng.uniform(0, 400, (rng.integers(0, 5), 2))
        Y = rng.uniform(0, 400, (rng.integers(0, 5), 2))
        r = ospa(X, Y, C200)
        assert r.total ** 2 == pytest.approx(r.localization ** 2 + r.cardinality ** 2, abs=1e-9)
        for v in (r.total, r.localization, r.cardinality):
            assert 0.0 <= v <= 200.0 + 1e-12


def test_ospa_metric_properties():
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        c, p = rng.uniform(10, 300), rng.uniform(1, 3)
        params = OspaParams(c, p)
        X, Y, Z = (rng.uniform(-200, 200, (rng.integers(0, 6), 2)) for _ in range(3))
        dxy, dyx = ospa(X, Y, params).total, ospa(Y, X, params).total
        assert dxy == pytest.approx(dyx, abs=1e-9)
        assert dxy <= ospa(X, Z, params).total + ospa(Z, Y, params).total + 1e-9
        if len(X):
            assert ospa(X, X, params).total == 0.0


def test_ospa_matches_brute_force_up_to_6x6(rng):
    for _ in range(300):
        X = rng.uniform(-300, 300, (rng.integers(0, 7), 2))
        Y = rng.uniform(-300, 300, (rng.integers(0, 7), 2))
        p = float(rng.choice([1.0, 2.0, 3.0]))
        got = ospa(X, Y, OspaParams(200.0, p)).total
        assert got == pytest.approx(brute_ospa(X, Y, 200.0, p), rel=1e-9, abs=1e-9)


def test_ospa_monotone_in_cutoff(rng):
    for _ in range(100):
        X = rng.uniform(0, 500, (rng.integers(1, 5), 2))
        Y = rng.uniform(0, 500, (rng.integers(1, 5), 2))
        vals = [ospa(X, Y, OspaParams(c, 2.0)).total / c for c in (50.0, 100.0, 200.0, 400.0, 800.0)]
        assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))
        raw = [ospa(X, Y, OspaParams(c, 2.0)).total for c in (50.0, 100.0, 200.0, 400.0, 800.0)]
        assert all(a <= b + 1e-12 for a, b in zip(raw, raw[1:]))


def test_ospa_params_validation():
    with pytest.raises(ValueError):
        OspaParams(0.0, 2.0)
    with pytest.raises(ValueError):
        OspaParams(100.0, 0.5)


def test_positions():
    s = np.array([[1.0, 2.0, 3.0, 4.0, 5.0], [6.0, 7.0, 8.0, 9.0, 10.0]])
    assert positions(s).tolist() == [[1.0, 3.0], [6.0, 8.0]]


def _estimate(label, x, y, probs):
    probs = np.asarray(probs, dtype=float)
    mean = np.array([x, 0.0, y, 0.0])
    return TargetEstimate(label, int(np.argmax(probs)), mean, np.eye(4), probs, mean, np.eye(4))


def test_match_track_picks_closest_on_average():
    truth = {1: np.array([0.0, 0.0]), 2: np.array([10.0, 0.0])}
    est = {Label(1, 1): {1: [0.0, 50.0], 2: [10.0, 50.0]},
           Label(1, 2): {1: [0.0, 1.0]},           # close but only present once
           Label(1, 3): {5: [0.0, 0.0]}}           # never overlaps
    assert match_track(truth, est) == Label(1, 1)
    assert match_track(truth, {}) is None


def test_mode_trace_and_identification():
    truth = TruthTrajectory(Label(1, 1), 1, 9, np.zeros((8, 4)), np.array([0] * 5 + [1] * 3))
    truth.states[:, 0] = np.arange(8) * 100.0
    ests = []
    for k in range(1, 9):
        targets = () if k == 4 else (_estimate(Label(1, 1), truth.state_at(k)[0] + 5, 0.0,
                                               [0.9, 0.1] if k <= 6 else [0.2, 0.8]),)
        ests.append(MultiTargetEstimate(targets, len(targets)))
    label, trace = mode_probability_trace(ests, truth)
    assert label == Label(1, 1)
    assert np.isnan(trace[3]).all()
    ok = ~np.isnan(trace[:, 0])
    assert np.allclose(trace[ok].sum(axis=1), 1.0)
    assert switch_steps(truth) == [1, 6]
    eligible, hits = mode_identification(ests, [truth], settle=2)
    # settled steps: 3, 4, 5 (since birth) and 8 (since the switch at 6)
    assert eligible.tolist() == [0, 0, 1, 1, 1, 0, 0, 1]
    assert hits.tolist() == [0, 0, 1, 0, 1, 0, 0, 1]


def test_single_model_trace_is_one():
    model = line_model(n_modes=1, clutter=0.0, pd=1.0, existence=(0.99,), birth_steps=[1])
    truth = TruthTrajectory(Label(1, 1), 1, 11, np.array([[0.5 * k, 0.5] for k in range(10)]), np.zeros(10, int))
    scans = [np.array([[truth.state_at(k)[0]]]) for k in range(1, 11)]
    ests = [e for e, _ in JmsGlmbFilter(model, TruncationPolicy()).run(scans)]
    # positions() expects [x, vx, y, vy]; pad the 1-D estimates for the trace helper
    padded = [MultiTargetEstimate(tuple(_estimate(t.label, t.mean[0], 0.0, t.mode_probs) for t in e.targets),
                                  e.cardinality) for e in ests]
    truth4 = TruthTrajectory(truth.label, 1, 11, np.column_stack([truth.states[:, 0], truth.states[:, 1],
                                                                   np.zeros(10), np.zeros(10)]), truth.modes)
    _, trace = mode_probability_trace(padded, truth4)
    assert np.allclose(trace, 1.0)


def test_mode_trace_rows_sum_to_one():
    rng = np.random.default_rng(2)
    model = line_model(n_modes=3, clutter=1.0, pd=0.9, existence=(0.9,), birth_steps=[1])
    xs = np.cumsum(rng.normal(0.5, 0.3, 15))
    scans = [np.array([[x + rng.normal()]]) for x in xs]
    ests = [e for e, _ in JmsGlmbFilter(model, TruncationPolicy()).run(scans)]
    for e in ests:
        for t in e.targets:
            assert t.mode_probs.sum() == pytest.approx(1.0, abs=1e-9)
