import json
import math

import numpy as np
import pytest

from jmsglmb.gaussian import ConfigurationError
from jmsglmb.glmb import (GlmbDensity, Hypothesis, JmsGlmbFilter, Label, ModeMixture, Track,
                          TruncationPolicy, birth_track, cardinality_distribution, density_from_dict,
                          density_to_dict, extract, filter_step, predict, predict_density, truncate, update)
from jmsglmb.jms import linear_scenario
from jmsglmb.simulator import default_linear_script, simulate_scans, simulate_truth

from conftest import line_model
from oracles import gauss_logpdf, glmb_oracle, kf_correct, kf_step


def track(label, mean, cov, probs, n_modes=None):
    probs = np.asarray(probs, dtype=float)
    return Track(Label(*label), ModeMixture.from_gaussian(mean, cov, probs))


def density(hyps, k=1):
    return GlmbDensity([Hypothesis(tuple(sorted(ts, key=lambda t: t.label)), math.log(w), i)
                        for i, (ts, w) in enumerate(hyps)], k)


def weights_by_labels(dens):
    out = {}
    for h in dens.hypotheses:
        key = tuple((l.birth_time, l.index) for l in h.labels)
        out[key] = out.get(key, 0.0) + math.exp(h.log_weight)
    return out


def check_normalized(dens, tol=1e-9):
    if not dens.hypotheses:
        return
    assert abs(dens.weights.sum() - 1.0) <= tol
    seen = set()
    for h in dens.hypotheses:
        assert len(set(h.labels)) == len(h.labels)
        assert list(h.labels) == sorted(h.labels)
        key = (h.labels, h.history)
        assert key not in seen
        seen.add(key)
        for t in h.tracks:
            assert abs(math.exp(t.density.log_mass()) - 1.0) <= tol


def oracle_keyed(dens):
    got = {}
    for h in dens.hypotheses:
        key = frozenset((t.label.birth_time, t.label.index, t.assoc) for t in h.tracks)
        got[key] = got.get(key, 0.0) + math.exp(h.log_weight)
    return got


# ---------------------------------------------------------------------------
# prediction


def test_predict_certain_survival_without_births():
    model = line_model(ps=1.0, birth_steps=[1])
    t1 = track((1, 1), [0.0, 1.0], np.eye(2), [0.6, 0.4])
    t2 = track((1, 2), [5.0, 0.0], np.eye(2), [1.0, 0.0])
    prior = density([((t1,), 0.3), ((t1, t2), 0.7)])
    pred = predict(prior, model, 2)
    assert weights_by_labels(pred) == pytest.approx({((1, 1),): 0.3, ((1, 1), (1, 2)): 0.7}, abs=1e-15)
    p1 = next(t for h in pred.hypotheses for t in h.tracks if t.label == Label(1, 1))
    m, P = p1.density.moments()
    assert m[0] == pytest.approx(1.0)
    assert P[0, 0] > 1.0


def test_predict_multiplies_components_by_mode_count():
    model = line_model(n_modes=3)
    d = ModeMixture(np.log([0.5, 0.3, 0.2]), np.zeros((3, 2)), np.stack([np.eye(2)] * 3), [0, 1, 2], 3)
    out = predict_density(d, model)
    assert len(out) == 9
    assert out.component_counts() == [3, 3, 3]
    assert out.log_mass() == pytest.approx(0.0, abs=1e-12)
    # mode marginal follows the switching matrix
    assert np.allclose(out.mode_probabilities(), np.array([0.5, 0.3, 0.2]) @ model.switching.probs)


def test_predict_empty_prior_with_one_birth_site():
    model = line_model(existence=(0.2,))
    pred = predict(GlmbDensity.empty(), model, 1)
    assert weights_by_labels(pred) == pytest.approx({(): 0.8, ((1, 1),): 0.2}, abs=1e-15)


def test_predict_preserves_normalization(rng):
    for _ in range(50):
        model = line_model(ps=rng.uniform(0.5, 1.0), existence=tuple(rng.uniform(0, 1, 2)))
        ts = [track((1, i), rng.normal(size=2), np.eye(2), [0.5, 0.5]) for i in (1, 2, 3)]
        w = rng.dirichlet(np.ones(3))
        prior = density([((ts[0],), w[0]), ((ts[0], ts[1]), w[1]), ((ts[1], ts[2]), w[2])])
        pred = predict(prior, model, 2)
        assert abs(pred.weights.sum() - 1.0) <= 1e-12
        check_normalized(pred, 1e-12)


# ---------------------------------------------------------------------------
# update


def test_update_without_detection_keeps_weights_and_densities():
    model = line_model(pd=0.0)
    t1 = track((1, 1), [0.0, 1.0], np.eye(2), [0.6, 0.4])
    t2 = track((1, 2), [5.0, 0.0], np.eye(2), [1.0, 0.0])
    pred = density([((t1,), 0.25), ((t1, t2), 0.75)])
    post = update(pred, np.array([[0.5], [3.0]]), model, TruncationPolicy.exact())
    assert len(post) == 2
    assert weights_by_labels(post) == pytest.approx({((1, 1),): 0.25, ((1, 1), (1, 2)): 0.75}, abs=1e-12)
    for h in post.hypotheses:
        for t in h.tracks:
            ref = t1 if t.label == Label(1, 1) else t2
            assert np.allclose(t.density.means, ref.density.means)
            assert np.allclose(t.density.covs, ref.density.covs)
            assert np.allclose(t.density.log_weights, ref.density.log_weights)


def test_update_detection_to_miss_ratio():
    model = line_model(pd=0.97, clutter=2.0)
    d = ModeMixture(np.log([0.7, 0.3]), [[0.0, 1.0], [0.5, 0.0]], [np.diag([2.0, 1.0]), np.diag([3.0, 1.0])],
                    [0, 1], 2)
    pred = GlmbDensity([Hypothesis((Track(Label(1, 1), d),), 0.0)], 1)
    z = 1.2
    post = update(pred, np.array([[z]]), model, TruncationPolicy.exact())
    w = {h.tracks[0].assoc[-1]: math.exp(h.log_weight) for h in post.hypotheses}
    R = model.sensor.R[0, 0]
    lz = 0.7 * math.exp(gauss_logpdf(z, 0.0, 2.0 + R)) + 0.3 * math.exp(gauss_logpdf(z, 0.5, 3.0 + R))
    kappa = math.exp(model.sensor.log_kappa)
    assert w[1] / w[0] == pytest.approx(0.97 * lz / kappa / 0.03, rel=1e-12)
    # posterior mode marginal is the likelihood-weighted prior
    det = next(h for h in post.hypotheses if h.tracks[0].assoc[-1] == 1)
    l0 = 0.7 * math.exp(gauss_logpdf(z, 0.0, 2.0 + R))
    assert det.tracks[0].density.mode_probabilities()[0] == pytest.approx(l0 / lz, rel=1e-12)


def test_update_empty_prediction_is_empty():
    model = line_model()
    assert len(update(GlmbDensity([], 1), np.array([[0.0]]), model)) == 0


def test_policy_rejects_nonpositive_k():
    with pytest.raises(ConfigurationError):
        TruncationPolicy(max_hypotheses=0)


def test_measurements_outside_region_are_ignored():
    model = line_model(existence=(0.5,), birth_steps=[1])
    pol = TruncationPolicy.exact()
    a, _, da = filter_step(GlmbDensity.empty(), np.array([[0.3]]), model, pol, 1)
    b, _, db = filter_step(GlmbDensity.empty(), np.array([[0.3], [500.0]]), model, pol, 1)
    assert da.n_ignored == 0 and db.n_ignored == 1
    assert np.allclose(sorted(a.weights), sorted(b.weights), rtol=0, atol=1e-15)


def _random_mini_scenario(rng):
    if rng.random() < 0.5:
        model = line_model(existence=tuple(rng.uniform(0.3, 0.7, 2)), birth_steps=[1],
                           pd=rng.uniform(0.5, 0.95), ps=rng.uniform(0.7, 0.99))
    else:
        model = line_model(existence=(rng.uniform(0.3, 0.7),), birth_steps=[1, 2],
                           pd=rng.uniform(0.5, 0.95), ps=rng.uniform(0.7, 0.99))
    scans = [rng.uniform(-6, 8, (rng.integers(0, 4), 1)) for _ in range(3)]
    return model, scans


@pytest.mark.parametrize("joint", [False, True])
def test_exhaustive_oracle_small(joint):
    for seed in range(1000, 1030):
        rng = np.random.default_rng(seed)
        model, scans = _random_mini_scenario(rng)
        ref, tlik = glmb_oracle(model, scans)
        dens = GlmbDensity.empty()
        for k, Z in enumerate(scans, 1):
            dens, _, _ = filter_step(dens, Z, model, TruncationPolicy.exact(), k, joint=joint)
            check_normalized(dens)
        got = oracle_keyed(dens)
        assert set(got) == set(ref)
        for key in ref:
            assert got[key] == pytest.approx(ref[key], abs=1e-9)
        # track densities: mode-wise exact mixtures
        for h in dens.hypotheses:
            for t in h.tracks:
                _, comps = tlik((t.label.birth_time, t.label.index), t.assoc)
                for r in range(model.n_modes):
                    ws = [math.exp(c[0]) for c in comps if c[1] == r]
                    assert math.exp(t.density.mode_log_masses()[r]) == pytest.approx(sum(ws), abs=1e-9)
                ref_mean = sum(math.exp(c[0]) * c[2] for c in comps)
                assert np.allclose(t.density.moments()[0], ref_mean, atol=1e-9)


# ---------------------------------------------------------------------------
# truncation, cardinality and extraction


def test_truncate_examples():
    ts = [track((1, i), [float(i), 0.0], np.eye(2), [1.0, 0.0]) for i in (1, 2, 3)]
    dens = density([((ts[0],), 0.6), ((ts[1],), 0.3), ((ts[2],), 0.1)])
    out = truncate(dens, TruncationPolicy(max_hypotheses=2, min_log_weight=None))
    assert weights_by_labels(out) == pytest.approx({((1, 1),): 2 / 3, ((1, 2),): 1 / 3}, abs=1e-12)
    same = truncate(dens, TruncationPolicy(max_hypotheses=10, min_log_weight=None))
    assert weights_by_labels(same) == pytest.approx(weights_by_labels(dens), abs=1e-15)
    eq = density([((ts[2],), 0.25), ((ts[0],), 0.25), ((ts[1],), 0.25), ((), 0.25)])
    out = truncate(eq, TruncationPolicy(max_hypotheses=2, min_log_weight=None))
    assert [h.labels for h in out.hypotheses] == [(), (Label(1, 1),)]


def test_truncate_relative_weight_floor():
    ts = [track((1, i), [float(i), 0.0], np.eye(2), [1.0, 0.0]) for i in (1, 2)]
    dens = density([((ts[0],), 1 - 1e-8), ((ts[1],), 1e-8)])
    out = truncate(dens, TruncationPolicy(max_hypotheses=None, min_log_weight=-15.0))
    assert len(out) == 1 and out.weights[0] == 1.0


def test_cardinality_distribution_examples():
    t1 = track((1, 1), [0.0, 0.0], np.eye(2), [1.0, 0.0])
    t2 = track((1, 2), [1.0, 0.0], np.eye(2), [1.0, 0.0])
    assert cardinality_distribution(density([((t1, t2), 1.0)])).tolist() == [0.0, 0.0, 1.0]
    rho = cardinality_distribution(density([((), 0.8), ((t1,), 0.2)]))
    assert rho == pytest.approx([0.8, 0.2])


def test_extract_examples():
    d = ModeMixture(np.log([0.7, 0.2, 0.1]), np.zeros((3, 2)), np.stack([np.eye(2)] * 3), [0, 1, 2], 3)
    est = extract(GlmbDensity([Hypothesis((Track(Label(1, 1), d),), 0.0)], 1))
    assert est.cardinality == 1 and est.targets[0].mode == 0
    assert est.targets[0].mode_probs == pytest.approx([0.7, 0.2, 0.1])

    t1 = track((1, 1), [0.0, 0.0], np.eye(2), [1.0, 0.0])
    assert extract(density([((), 0.5), ((t1,), 0.5)])).cardinality == 0

    t2 = track((1, 2), [9.0, 0.0], np.eye(2), [1.0, 0.0])
    est = extract(density([((t1,), 0.4), ((t2,), 0.6)]))
    assert est.targets[0].label == Label(1, 2)
    assert est.hypothesis_weight == pytest.approx(0.6)
    assert extract(GlmbDensity([], 3)).cardinality == 0


def test_extract_moments_over_all_modes():
    d = ModeMixture(np.log([0.6, 0.4]), [[0.0, 0.0], [10.0, 0.0]], np.stack([np.eye(2)] * 2), [0, 1], 2)
    (t,) = extract(GlmbDensity([Hypothesis((Track(Label(1, 1), d),), 0.0)], 1)).targets
    assert t.mean[0] == pytest.approx(4.0)
    assert t.cov[0, 0] == pytest.approx(1.0 + 0.6 * 16 + 0.4 * 36)
    assert t.mode_mean[0] == 0.0


def test_mode_argmax_invariant_to_common_scaling():
    lw = np.log([0.2, 0.5, 0.3])
    for shift in (-50.0, 0.0, 30.0):
        d = ModeMixture(lw + shift, np.zeros((3, 2)), np.stack([np.eye(2)] * 3), [0, 1, 2], 3)
        assert int(np.argmax(d.mode_probabilities())) == 1
        assert d.mode_probabilities().sum() == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# recursion


def test_kalman_equivalence_single_mode(rng):
    model = line_model(n_modes=1, pd=1.0, clutter=0.0, existence=(1.0,), birth_steps=[1])
    site = model.birth.sites[0]
    xs = np.cumsum(rng.normal(0.5, 0.5, 30))
    scans = [np.array([[x + rng.normal()]]) for x in xs]
    f = JmsGlmbFilter(model, TruncationPolicy())
    m, P = site.mean, site.cov
    H, R = model.sensor.H, model.sensor.R
    for k, Z in enumerate(scans, 1):
        if k > 1:
            m, P = kf_step(m, P, model.models[0].F, model.models[0].Q)
        m, P, _ = kf_correct(m, P, Z[0], H, R)
        est, _ = f.step(Z, k)
        (t,) = est.targets
        assert np.allclose(t.mean, m, rtol=1e-9, atol=1e-12)
        assert np.allclose(t.cov, P, rtol=1e-9, atol=1e-12)


def test_identical_modes_reduce_to_kalman(rng):
    # two modes sharing one motion model: after merging, the posterior is the plain Kalman filter
    model = line_model(n_modes=2, q=(1.0, 1.0), pd=1.0, clutter=0.0, existence=(1.0,), birth_steps=[1])
    site = model.birth.sites[0]
    f = JmsGlmbFilter(model, TruncationPolicy())
    m, P = site.mean, site.cov
    for k in range(1, 15):
        z = np.array([[0.7 * k + rng.normal()]])
        if k > 1:
            m, P = kf_step(m, P, model.models[0].F, model.models[0].Q)
        m, P, _ = kf_correct(m, P, z[0], model.sensor.H, model.sensor.R)
        est, _ = f.step(z, k)
        assert np.allclose(est.targets[0].mean, m, rtol=1e-9)
        assert np.allclose(est.targets[0].cov, P, rtol=1e-9)


def test_normalization_under_fuzzing():
    for seed in range(40):
        rng = np.random.default_rng(seed)
        model = line_model(n_modes=int(rng.integers(1, 4)), pd=rng.uniform(0.3, 0.99),
                           ps=rng.uniform(0.5, 0.99), clutter=rng.uniform(0.5, 4.0),
                           existence=tuple(rng.uniform(0.05, 0.6, rng.integers(1, 4))))
        for row in model.switching.probs:
            assert abs(row.sum() - 1.0) <= 1e-12
        pol = TruncationPolicy(max_hypotheses=int(rng.integers(5, 60)))
        dens = GlmbDensity.empty()
        for k in range(1, 7):
            Z = rng.uniform(-20, 20, (rng.integers(0, 5), 1))
            pred = predict(dens, model, k)
            check_normalized(pred)
            post = update(pred, Z, model, pol)
            check_normalized(post)
            dens = truncate(post, pol)
            check_normalized(dens)
            joint, _, _ = filter_step(dens, Z, model, pol, k + 1)
            check_normalized(joint)


def test_clutter_only_regression():
    model = linear_scenario()
    bad = total = 0
    for seed in range(100):
        scans = simulate_scans([], model, 20, seed)
        for est, _ in JmsGlmbFilter(model, TruncationPolicy()).run([s.measurements for s in scans]):
            total += 1
            bad += est.cardinality > 0
    assert bad / total <= 0.05


def test_no_measurements_decay():
    model = line_model(pd=0.99, ps=0.99, clutter=1.0, birth_steps=[1], existence=(0.9,))
    f = JmsGlmbFilter(model, TruncationPolicy.exact())
    est, diag = f.step(np.array([[0.0]]), 1)
    assert est.cardinality == 1
    p_exist = [diag.cardinality[1]]
    for k in range(2, 6):
        est, diag = f.step(np.zeros((0, 1)), k)
        p_exist.append(diag.cardinality[1] if len(diag.cardinality) > 1 else 0.0)
    assert all(b < a for a, b in zip(p_exist, p_exist[1:]))
    # closed form: after an empty scan the track exists with weight p ps (1 - pd),
    # against p (1 - ps) for its death and 1 - p for its absence
    for a, b in zip(p_exist, p_exist[1:]):
        keep = a * 0.99 * 0.01
        assert b == pytest.approx(keep / (keep + a * 0.01 + (1 - a)), rel=1e-9)
    assert est.cardinality == 0


def test_gate_does_not_change_results():
    model = linear_scenario()
    truths = simulate_truth(model, default_linear_script(0, 25))
    scans = [s.measurements for s in simulate_scans(truths, model, 25, seed=3)]
    a = JmsGlmbFilter(model, TruncationPolicy()).run(scans)
    b = JmsGlmbFilter(model, TruncationPolicy(gate_sigma=6.0)).run(scans)
    for (ea, _), (eb, _) in zip(a, b):
        assert ea.cardinality == eb.cardinality
        for ta, tb in zip(ea.targets, eb.targets):
            assert ta.label == tb.label
            assert np.allclose(ta.mean, tb.mean, rtol=1e-6, atol=1e-6)
            assert np.allclose(ta.mode_probs, tb.mode_probs, rtol=0, atol=1e-6)


def test_snapshot_round_trip():
    model = line_model(n_modes=3, existence=(0.4, 0.3))
    rng = np.random.default_rng(5)
    f = JmsGlmbFilter(model, TruncationPolicy(max_hypotheses=50))
    for k in range(1, 5):
        f.step(rng.uniform(-10, 10, (3, 1)), k)
    dens = f.density
    back = density_from_dict(json.loads(json.dumps(density_to_dict(dens))))
    assert back.k == dens.k
    assert len(back) == len(dens)
    for h, g in zip(dens.hypotheses, back.hypotheses):
        assert h.log_weight == g.log_weight and h.history == g.history and h.labels == g.labels
        for t, u in zip(h.tracks, g.tracks):
            assert np.array_equal(t.density.log_weights, u.density.log_weights)
            assert np.array_equal(t.density.means, u.density.means)
            assert np.array_equal(t.density.covs, u.density.covs)
            assert np.array_equal(t.density.modes, u.density.modes)
            assert t.density.n_modes == u.density.n_modes


def test_birth_track():
    model = line_model(n_modes=3, existence=(0.3,))
    t = birth_track(4, 1, model.birth.sites[0])
    assert t.label == Label(4, 1)
    assert t.density.mode_probabilities() == pytest.approx([1.0, 0.0, 0.0])
    assert t.assoc == ()
