"""GLMB density, jump-Markov prediction/update, truncation and estimation.

Each track density is a mode-indexed Gaussian mixture.  Hypotheses hold
references to immutable :class:`Track` objects, so tracks shared between
hypotheses are stored (and predicted/updated) once.
"""
from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from itertools import product
from typing import Iterable, Optional, Sequence

import numpy as np

from .assignment import CostMatrix, k_best, solve_optimal, InfeasibleAssignmentError
from .gaussian import ConfigurationError, Mixture, group_log_mass, logsumexp, moment_match, reduce_grouped
from .jms import BirthSite, JmsModel

log = logging.getLogger(__name__)

UNBOUNDED = None


@dataclass(frozen=True, order=True)
class Label:
    birth_time: int
    index: int

    def __repr__(self):
        return f"({self.birth_time},{self.index})"


class ModeMixture:
    """Joint density over (state, mode) as one Gaussian mixture per mode.

    Stored stacked and sorted by mode: ``modes[j]`` is the mode of component j.
    """

    __slots__ = ("log_weights", "means", "covs", "modes", "n_modes")

    def __init__(self, log_weights, means, covs, modes, n_modes: int):
        self.log_weights = np.asarray(log_weights, dtype=float)
        self.means = np.asarray(means, dtype=float)
        self.covs = np.asarray(covs, dtype=float)
        self.modes = np.asarray(modes, dtype=int)
        self.n_modes = int(n_modes)

    @classmethod
    def from_mixtures(cls, per_mode: Sequence[Mixture]) -> "ModeMixture":
        dim = per_mode[0].dim
        lw = np.concatenate([m.log_weights for m in per_mode])
        means = np.concatenate([m.means for m in per_mode]).reshape(-1, dim)
        covs = np.concatenate([m.covs for m in per_mode]).reshape(-1, dim, dim)
        modes = np.concatenate([np.full(len(m), r) for r, m in enumerate(per_mode)]).astype(int)
        return cls(lw, means, covs, modes, len(per_mode))

    @classmethod
    def from_gaussian(cls, mean, cov, mode_prior) -> "ModeMixture":
        mode_prior = np.asarray(mode_prior, dtype=float)
        live = np.flatnonzero(mode_prior > 0)
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        return cls(np.log(mode_prior[live]), np.repeat(mean[None], len(live), 0),
                   np.repeat(cov[None], len(live), 0), live, len(mode_prior))

    def __len__(self):
        return len(self.log_weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def _bounds(self):
        return np.searchsorted(self.modes, np.arange(self.n_modes + 1))

    def mode(self, r: int) -> Mixture:
        b = self._bounds()
        s = slice(b[r], b[r + 1])
        return Mixture(self.log_weights[s], self.means[s], self.covs[s])

    @property
    def per_mode(self) -> dict[int, Mixture]:
        return {r: self.mode(r) for r in range(self.n_modes)}

    def component_counts(self) -> list[int]:
        return np.diff(self._bounds()).tolist()

    def log_mass(self) -> float:
        return float(logsumexp(self.log_weights)) if len(self) else -np.inf

    def mode_log_masses(self) -> np.ndarray:
        out = np.full(self.n_modes, -np.inf)
        b = self._bounds()
        for r in range(self.n_modes):
            if b[r + 1] > b[r]:
                out[r] = logsumexp(self.log_weights[b[r]:b[r + 1]])
        return out

    def mode_probabilities(self) -> np.ndarray:
        lm = self.mode_log_masses()
        return np.exp(lm - logsumexp(lm))

    def moments(self, r: Optional[int] = None):
        """Mean/cov of the full mode-summed mixture, or of mode ``r`` only."""
        if r is None:
            return moment_match(self.log_weights, self.means, self.covs)
        return self.mode(r).moments()

    def prune_merge(self, prune_thresh, merge_thresh, max_comp) -> "ModeMixture":
        """Reduce each mode's mixture separately (see :func:`prune_merge`)."""
        if prune_thresh < 0 or merge_thresh < 0:
            raise ConfigurationError("thresholds must be nonnegative")
        lw, means, covs, modes = reduce_grouped(self.log_weights, self.means, self.covs, self.modes,
                                                prune_thresh, merge_thresh, max_comp)
        return ModeMixture(lw, means, covs, modes, self.n_modes)

    def __repr__(self):
        return f"ModeMixture(counts={self.component_counts()}, log_mass={self.log_mass():.6g})"


class Track:
    """A label with its (immutable) mode-mixture density.

    ``assoc`` lists the measurement index (1-based, 0 = missed) the track took
    at every update since birth; (label, assoc) identifies the density.
    """

    __slots__ = ("label", "density", "assoc")

    def __init__(self, label: Label, density: ModeMixture, assoc: tuple = ()):
        self.label = label
        self.density = density
        self.assoc = assoc

    @property
    def key(self) -> tuple:
        return (self.label.birth_time, self.label.index, self.assoc)

    def __repr__(self):
        return f"Track({self.label!r}, {self.density!r})"


@dataclass(frozen=True)
class Hypothesis:
    tracks: tuple  # of Track, sorted by label
    log_weight: float
    history: int = 0

    @property
    def labels(self) -> tuple:
        return tuple(t.label for t in self.tracks)

    @property
    def track_map(self) -> dict:
        return {t.label: t.density for t in self.tracks}

    def sort_key(self):
        return (-self.log_weight, tuple((l.birth_time, l.index) for l in self.labels), self.history)


@dataclass
class GlmbDensity:
    hypotheses: list
    k: int = 0

    @classmethod
    def empty(cls, k: int = 0) -> "GlmbDensity":
        return cls([Hypothesis((), 0.0, 0)], k)

    def __len__(self):
        return len(self.hypotheses)

    @property
    def log_weights(self) -> np.ndarray:
        return np.array([h.log_weight for h in self.hypotheses])

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def unique_tracks(self) -> list[Track]:
        seen, out = set(), []
        for h in self.hypotheses:
            for t in h.tracks:
                if id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out


@dataclass(frozen=True)
class TruncationPolicy:
    """Hypothesis truncation plus per-track mixture reduction settings.

    ``max_hypotheses=None`` and ``min_log_weight=None`` disable the respective
    limits; zero thresholds with ``max_components=None`` disable mixture
    reduction.  ``gate_sigma`` enables a Mahalanobis gate on measurements.
    """

    max_hypotheses: Optional[int] = 1000
    min_log_weight: Optional[float] = -15.0
    prune_threshold: float = 1e-5
    merge_threshold: float = 4.0
    max_components: Optional[int] = 10
    gate_sigma: Optional[float] = None

    def __post_init__(self):
        if self.max_hypotheses is not None and self.max_hypotheses <= 0:
            raise ConfigurationError("max_hypotheses must be positive")

    @classmethod
    def exact(cls) -> "TruncationPolicy":
        return cls(None, None, 0.0, 0.0, None, None)

    def hypotheses_for(self, weight: float) -> int:
        if self.max_hypotheses is None:
            return 2 ** 62
        return max(1, math.ceil(self.max_hypotheses * weight))

    @property
    def reduces(self) -> bool:
        return not (self.prune_threshold == 0 and self.merge_threshold == 0 and self.max_components is None)

    def reduce(self, dens: ModeMixture) -> ModeMixture:
        if not self.reduces:
            return dens
        return dens.prune_merge(self.prune_threshold, self.merge_threshold, self.max_components)


@dataclass(frozen=True)
class TargetEstimate:
    label: Label
    mode: int                  # 0-based argmax of the mode marginal
    mean: np.ndarray           # moment-matched over all modes
    cov: np.ndarray
    mode_probs: np.ndarray
    mode_mean: np.ndarray      # mean conditioned on ``mode``
    mode_cov: np.ndarray
    n_components: int = 0


@dataclass(frozen=True)
class MultiTargetEstimate:
    targets: tuple
    cardinality: int
    hypothesis: Optional[int] = None
    hypothesis_weight: float = 0.0

    def __len__(self):
        return len(self.targets)


@dataclass
class StepDiagnostics:
    k: int
    n_hypotheses: int
    effective_hypotheses: float
    n_tracks: int
    n_ignored: int
    component_counts: dict = field(default_factory=dict)
    cardinality: np.ndarray = field(default_factory=lambda: np.zeros(1))


# ---------------------------------------------------------------------------
# helpers


def chain_history(parent: int, k: int, assoc: Iterable[tuple]) -> int:
    """Extend an association-history identifier with one time step's map.

    ``assoc`` holds (birth_time, index, measurement) triples, measurement 0
    meaning a missed detection.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<Qq", parent & (2 ** 64 - 1), k))
    for item in assoc:
        h.update(struct.pack("<qqq", *item))
    return int.from_bytes(h.digest(), "little")


def _log(p: float) -> float:
    return math.log(p) if p > 0 else -math.inf


def _log1m(p: float) -> float:
    return math.log1p(-p) if p < 1 else -math.inf


def select_measurements(Z, model: JmsModel):
    """Measurements inside the sensor region and the original indices kept."""
    m = model.sensor.measurement_dim
    Z = np.asarray(Z, dtype=float).reshape(-1, m)
    inside = model.sensor.in_region(Z)
    n_out = int(np.count_nonzero(~inside))
    if n_out:
        log.warning("ignoring %d measurement(s) outside the observation region", n_out)
    return Z[inside], np.flatnonzero(inside), n_out


def _stacked(densities: Sequence[ModeMixture]):
    """Concatenated component arrays plus the owning density of each component."""
    owner = np.repeat(np.arange(len(densities)), [len(d) for d in densities])
    lw = np.concatenate([d.log_weights for d in densities])
    means = np.concatenate([d.means for d in densities])
    covs = np.concatenate([d.covs for d in densities])
    modes = np.concatenate([d.modes for d in densities])
    return lw, means, covs, modes, owner


def _split(lw, means, covs, modes, owner, count: int, n_modes: int) -> list[ModeMixture]:
    """Inverse of :func:`_stacked` for owner-sorted arrays."""
    b = np.searchsorted(owner, np.arange(count + 1))
    return [ModeMixture(lw[b[i]:b[i + 1]], means[b[i]:b[i + 1]], covs[b[i]:b[i + 1]],
                        modes[b[i]:b[i + 1]], n_modes) for i in range(count)]


def predict_densities(densities: Sequence[ModeMixture], model: JmsModel) -> list[ModeMixture]:
    """Propagate track densities through every mode.

    Each component of mode r' is pushed through model r with its weight
    scaled by P(r | r'); zero-probability switches produce no component.  All
    densities are propagated together, one batch per model.
    """
    if not densities:
        return []
    n_modes = densities[0].n_modes
    lw, means, covs, modes, owner = _stacked(densities)
    log_sw = model.switching.log_probs
    parts = []
    for r, mm in enumerate(model.models):
        lp = log_sw[modes, r]
        ok = np.flatnonzero(np.isfinite(lp))
        if len(ok) == 0:
            continue
        m, P = mm.propagate(means[ok], covs[ok], model.ut)
        parts.append((lw[ok] + lp[ok], m, P, np.full(len(ok), r), owner[ok]))
    if not parts:
        n = densities[0].dim
        return [ModeMixture(np.zeros(0), np.zeros((0, n)), np.zeros((0, n, n)), np.zeros(0, int), n_modes)
                for _ in densities]
    lw, means, covs, modes, owner = (np.concatenate(x) for x in zip(*parts))
    order = np.lexsort((modes, owner))
    return _split(lw[order], means[order], covs[order], modes[order], owner[order], len(densities), n_modes)


def predict_density(dens: ModeMixture, model: JmsModel) -> ModeMixture:
    """Single-density form of :func:`predict_densities`."""
    return predict_densities([dens], model)[0]


def birth_track(k: int, i: int, site: BirthSite) -> Track:
    return Track(Label(k, i), ModeMixture.from_gaussian(site.mean, site.cov, site.mode_prior))


class ScanLikelihood:
    """Measurement likelihoods of a set of predicted tracks against one scan.

    Component arrays of all tracks are stacked so the innovation, likelihood
    and posterior computations run as single batches.  ``log_det[t, j]`` is
    the log of the mode- and component-summed predicted likelihood of
    measurement j under track t (track mass taken as 1).
    """

    def __init__(self, tracks: Sequence[Track], Z: np.ndarray, model: JmsModel,
                 gate_sigma: Optional[float] = None):
        self.tracks = list(tracks)
        n_t, M = len(self.tracks), Z.shape[0]
        self.n_modes = model.n_modes
        if n_t == 0:
            self.log_det = np.zeros((0, M))
            self.gated = np.zeros((0, M), dtype=bool)
            return
        lw, self.means, self.covs, self.modes, self.owner = _stacked([t.density for t in self.tracks])
        self.starts = np.searchsorted(self.owner, np.arange(n_t))
        _, mass, idx = group_log_mass(lw, self.owner)
        self.lw = lw - mass[idx]
        self.inn = model.sensor.innovation(self.means, self.covs, model.ut)
        self.resid = self.inn.residuals(Z)
        d2 = self.inn.mahalanobis2(self.resid)
        self.loglik = self.inn.log_likelihoods(None, self.resid, d2)
        if M:
            joint = self.lw[:, None] + self.loglik
            peak = np.maximum.reduceat(joint, self.starts, axis=0)
            peak = np.where(np.isfinite(peak), peak, 0.0)
            with np.errstate(divide="ignore"):
                self.log_det = np.log(np.add.reduceat(np.exp(joint - peak[self.owner]), self.starts, axis=0)) + peak
        else:
            self.log_det = np.zeros((n_t, 0))
        if gate_sigma is not None and M:
            self.gated = np.minimum.reduceat(d2, self.starts, axis=0) <= gate_sigma ** 2
        else:
            self.gated = np.ones((n_t, M), dtype=bool)

    def __len__(self):
        return len(self.tracks)

    def det_costs(self, log_pd: float, log_kappa: float) -> np.ndarray:
        """-log(P_D * likelihood / kappa) per (track, measurement); +inf when gated out."""
        c = -(log_pd + self.log_det - log_kappa)
        return np.where(self.gated, c, np.inf)

    def posteriors(self, requests: Sequence[tuple], policy: TruncationPolicy, orig_idx) -> dict:
        """Posterior tracks for (track row, measurement or -1 for a miss) pairs.

        Every posterior is reduced per mode in one batch.  ``orig_idx`` maps
        scan columns to the measurement indices recorded in the tracks'
        association lists.
        """
        if not requests:
            return {}
        sl = [slice(self.starts[t], self.starts[t] + len(self.tracks[t].density)) for t, _ in requests]
        lw, means, covs = [], [], []
        for (t, j), s in zip(requests, sl):
            if j < 0:
                lw.append(self.lw[s])
                means.append(self.means[s])
                covs.append(self.covs[s])
            else:
                lw.append(self.lw[s] + self.loglik[s, j] - self.log_det[t, j])
                means.append(self.means[s] + np.einsum("nij,nj->ni", self.inn.gain[s], self.resid[s, j, :]))
                covs.append(self.inn.post_cov[s])
        req = np.repeat(np.arange(len(requests)), [s.stop - s.start for s in sl])
        modes = np.concatenate([self.modes[s] for s in sl])
        groups = req * self.n_modes + modes
        lw, means, covs = np.concatenate(lw), np.concatenate(means), np.concatenate(covs)
        if policy.reduces:
            order = np.argsort(groups, kind="stable")
            lw, means, covs, groups = reduce_grouped(lw[order], means[order], covs[order], groups[order],
                                                     policy.prune_threshold, policy.merge_threshold,
                                                     policy.max_components)
        dens = _split(lw, means, covs, groups % self.n_modes, groups // self.n_modes, len(requests), self.n_modes)
        out = {}
        for (t, j), d in zip(requests, dens):
            tr = self.tracks[t]
            out[(t, j)] = Track(tr.label, d, tr.assoc + (int(orig_idx[j]) + 1 if j >= 0 else 0,))
        return out


# ---------------------------------------------------------------------------
# prediction


def predict(prior: GlmbDensity, model: JmsModel, k: int) -> GlmbDensity:
    """Exact GLMB prediction with constant survival and Bernoulli births.

    Every prior hypothesis spawns one predicted hypothesis per surviving
    subset and per birth subset; the association history is unchanged.
    """
    ps = model.survival_prob
    prior_tracks = prior.unique_tracks()
    pred_tracks = {id(t): Track(t.label, d, t.assoc)
                   for t, d in zip(prior_tracks, predict_densities([t.density for t in prior_tracks], model))}
    births = [birth_track(k, i, s) for i, s in model.birth.sites_at(k)]
    birth_opts = []
    for mask in product((True, False), repeat=len(births)):
        lw = sum(_log(s.existence) if b else _log1m(s.existence)
                 for b, (_, s) in zip(mask, model.birth.sites_at(k)))
        if np.isfinite(lw):
            birth_opts.append((lw, tuple(t for b, t in zip(mask, births) if b)))
    out = []
    for h in prior.hypotheses:
        n = len(h.tracks)
        for mask in product((True, False), repeat=n):
            lw_s = sum(_log(ps) if b else _log1m(ps) for b in mask)
            if not np.isfinite(lw_s):
                continue
            surv = tuple(pred_tracks[id(t)] for b, t in zip(mask, h.tracks) if b)
            for lw_b, born in birth_opts:
                tracks = tuple(sorted(surv + born, key=lambda t: t.label))
                out.append(Hypothesis(tracks, h.log_weight + lw_s + lw_b, h.history))
    return _normalized(GlmbDensity(out, k))


# ---------------------------------------------------------------------------
# update


def _compact(meas: np.ndarray):
    """Drop measurement columns no row can take."""
    keep = np.flatnonzero(np.any(np.isfinite(meas), axis=0))
    return meas[:, keep], keep


def _bounded_children(problems, log_weights, policy: TruncationPolicy):
    """Run ranked assignment on each (hypothesis) problem.

    ``problems`` is a list of CostMatrix (or None when infeasible).  Yields
    (problem index, outcome codes, cost).  Uses the global best child to skip
    children that truncation would discard anyway.
    """
    best = []
    for C in problems:
        try:
            best.append(solve_optimal(C)[1] if C is not None else math.inf)
        except InfeasibleAssignmentError:
            best.append(math.inf)
    best = np.array(best)
    child_best = np.asarray(log_weights) - best
    top = np.max(child_best) if len(child_best) else -math.inf
    if not np.isfinite(top):
        return
    w = np.exp(np.asarray(log_weights) - logsumexp(log_weights))
    for i, C in enumerate(problems):
        if not np.isfinite(best[i]):
            continue
        bound = None
        if policy.min_log_weight is not None:
            bound = log_weights[i] - (top + policy.min_log_weight)
            if best[i] > bound:
                continue
        for cols, cost in k_best(C, policy.hypotheses_for(w[i]), max_cost=bound):
            yield i, C.outcomes(cols), cost


def update(pred: GlmbDensity, Z, model: JmsModel, policy: TruncationPolicy = TruncationPolicy()) -> GlmbDensity:
    """GLMB measurement update of a predicted density.

    For every predicted hypothesis the ranked assignment enumerates the best
    association maps; each spawns a child weighted by the product of per-track
    association scores.  The result is renormalized, mixture-reduced and
    truncated.
    """
    Zs, orig_idx, _ = select_measurements(Z, model)
    k = pred.k
    if not pred.hypotheses:
        return GlmbDensity([], k)
    pd = model.sensor.detection_prob
    log_pd, log_qd, log_kappa = _log(pd), _log1m(pd), model.sensor.log_kappa
    tracks = pred.unique_tracks()
    row = {id(t): i for i, t in enumerate(tracks)}
    lik = ScanLikelihood(tracks, Zs, model, policy.gate_sigma)
    det = lik.det_costs(log_pd, log_kappa)

    problems, keeps = [], []
    for h in pred.hypotheses:
        n = len(h.tracks)
        rows = [row[id(t)] for t in h.tracks]
        meas, keep = _compact(det[rows] if n else np.zeros((0, len(Zs))))
        problems.append(CostMatrix(meas, np.full((n, 1), -log_qd)))
        keeps.append(keep)
    log_w = pred.log_weights
    children = []
    for i, outcome, cost in _bounded_children(problems, log_w, policy):
        h = pred.hypotheses[i]
        picks = [(row[id(t)], int(keeps[i][o]) if o >= 0 else -1) for t, o in zip(h.tracks, outcome)]
        assoc = tuple((t.label.birth_time, t.label.index, int(orig_idx[j]) + 1 if j >= 0 else 0)
                      for t, (_, j) in zip(h.tracks, picks))
        children.append((log_w[i] - cost, picks, chain_history(h.history, k, assoc)))
    return _materialize(children, lik, policy, k, orig_idx)


def _materialize(children, lik, policy: TruncationPolicy, k: int, orig_idx) -> GlmbDensity:
    """Merge, normalize, truncate and build hypotheses from raw children.

    ``children`` are (log weight, [(track row, meas idx or -1)], history).
    Children that pick exactly the same posterior tracks describe the same
    labeled density, so their weights are summed; the merged hypothesis keeps
    the history of its heaviest member.
    """
    if not children:
        return GlmbDensity([], k)
    groups: dict = {}
    for lw, picks, hist in children:
        ident = tuple(sorted(picks))
        g = groups.get(ident)
        if g is None:
            groups[ident] = [[lw], picks, hist, lw]
        else:
            g[0].append(lw)
            if (-lw, hist) < (-g[3], g[2]):
                g[2], g[3] = hist, lw
    merged = list(groups.values())
    lws = np.array([logsumexp(g[0]) if len(g[0]) > 1 else g[0][0] for g in merged])
    lws = lws - logsumexp(lws)
    keys = []
    for g, lw in zip(merged, lws):
        labels = tuple(sorted((lik.tracks[t].label.birth_time, lik.tracks[t].label.index) for t, _ in g[1]))
        keys.append((-lw, labels, g[2]))
    order = sorted(range(len(merged)), key=lambda i: keys[i])
    if policy.max_hypotheses is not None:
        order = order[:policy.max_hypotheses]
    if policy.min_log_weight is not None:
        top = lws[order[0]]
        order = [i for i in order if lws[i] - top >= policy.min_log_weight]
    kept = lws[order] - logsumexp(lws[order])
    requests = sorted({p for i in order for p in merged[i][1]})
    post = lik.posteriors(requests, policy, orig_idx)
    hyps = []
    for i, lw in zip(order, kept):
        _, picks, hist, _ = merged[i]
        tracks = tuple(sorted((post[p] for p in picks), key=lambda t: t.label))
        hyps.append(Hypothesis(tracks, float(lw), hist))
    return GlmbDensity(hyps, k)


def _normalized(dens: GlmbDensity) -> GlmbDensity:
    if not dens.hypotheses:
        return dens
    lw = dens.log_weights
    total = logsumexp(lw)
    hyps = [Hypothesis(h.tracks, float(w), h.history) for h, w in zip(dens.hypotheses, lw - total)]
    hyps.sort(key=Hypothesis.sort_key)
    return GlmbDensity(hyps, dens.k)


def truncate(density: GlmbDensity, policy: TruncationPolicy = TruncationPolicy()) -> GlmbDensity:
    """Keep the heaviest hypotheses (at most ``max_hypotheses``, none lighter than
    ``min_log_weight`` relative to the best) and renormalize."""
    dens = _normalized(density)
    hyps = dens.hypotheses
    if not hyps:
        return dens
    if policy.max_hypotheses is not None:
        hyps = hyps[:policy.max_hypotheses]
    if policy.min_log_weight is not None:
        top = hyps[0].log_weight
        hyps = [h for h in hyps if h.log_weight - top >= policy.min_log_weight]
    return _normalized(GlmbDensity(hyps, dens.k))


# ---------------------------------------------------------------------------
# joint prediction and update


def predict_update(prior: GlmbDensity, Z, model: JmsModel, k: int,
                   policy: TruncationPolicy = TruncationPolicy()):
    """Prediction and update in one ranked assignment per prior hypothesis.

    Rows are the hypothesis' tracks followed by the birth sites; each row
    either takes a measurement, is missed, or is absent (died / not born).
    With unbounded truncation this equals :func:`update` applied to
    :func:`predict`, but survival and birth subsets are ranked together with
    the associations instead of being enumerated.
    Returns (posterior, number of ignored measurements).
    """
    Zs, orig_idx, n_out = select_measurements(Z, model)
    ps, pd = model.survival_prob, model.sensor.detection_prob
    log_pd, log_qd, log_kappa = _log(pd), _log1m(pd), model.sensor.log_kappa
    prior_tracks = prior.unique_tracks()
    pred = [Track(t.label, d, t.assoc)
            for t, d in zip(prior_tracks, predict_densities([t.density for t in prior_tracks], model))]
    row = {id(t): i for i, t in enumerate(prior_tracks)}
    sites = model.birth.sites_at(k)
    births = [birth_track(k, i, s) for i, s in sites]
    lik = ScanLikelihood(pred + births, Zs, model, policy.gate_sigma)
    det = lik.det_costs(log_pd, log_kappa)
    n_p = len(pred)

    surv_det = det[:n_p] - _log(ps)
    surv_priv = np.array([-(_log(ps) + log_qd), -_log1m(ps)])
    if births:
        birth_det = det[n_p:] - np.array([_log(s.existence) for _, s in sites])[:, None]
        birth_priv = np.array([[-(_log(s.existence) + log_qd), -_log1m(s.existence)] for _, s in sites])
    else:
        birth_det = np.zeros((0, len(Zs)))
        birth_priv = np.zeros((0, 2))
    birth_rows = list(range(n_p, n_p + len(births)))

    problems, rows_of, keeps = [], [], []
    for h in prior.hypotheses:
        rows = [row[id(t)] for t in h.tracks]
        meas = np.vstack([surv_det[rows], birth_det])
        priv = np.vstack([np.tile(surv_priv, (len(rows), 1)), birth_priv])
        meas, keep = _compact(meas)
        problems.append(CostMatrix(meas, priv))
        rows_of.append(rows + birth_rows)
        keeps.append(keep)

    log_w = prior.log_weights
    children = []
    for i, outcome, cost in _bounded_children(problems, log_w, policy):
        picks = []
        for r, o in zip(rows_of[i], outcome):
            if o >= 0:
                picks.append((r, int(keeps[i][o])))
            elif o == -1:  # missed
                picks.append((r, -1))
        picks.sort(key=lambda p: lik.tracks[p[0]].label)
        assoc = tuple((lik.tracks[r].label.birth_time, lik.tracks[r].label.index,
                       int(orig_idx[j]) + 1 if j >= 0 else 0) for r, j in picks)
        children.append((log_w[i] - cost, picks, chain_history(prior.hypotheses[i].history, k, assoc)))
    return _materialize(children, lik, policy, k, orig_idx), n_out


# ---------------------------------------------------------------------------
# estimation


def cardinality_distribution(density: GlmbDensity) -> np.ndarray:
    if not density.hypotheses:
        return np.ones(1)
    n_max = max(len(h.tracks) for h in density.hypotheses)
    rho = np.zeros(n_max + 1)
    w = np.exp(density.log_weights - logsumexp(density.log_weights))
    for h, wi in zip(density.hypotheses, w):
        rho[len(h.tracks)] += wi
    return rho


def estimate_track(t: Track) -> TargetEstimate:
    d = t.density
    probs = d.mode_probabilities()
    r = int(np.argmax(probs))
    mean, cov = d.moments()
    mmean, mcov = d.moments(r)
    return TargetEstimate(t.label, r, mean, cov, probs, mmean, mcov, len(d))


def extract(density: GlmbDensity) -> MultiTargetEstimate:
    """MAP cardinality, then the heaviest hypothesis with that many labels.

    Cardinality ties go to the smaller count; hypothesis ties follow the
    (weight, labels, history) sort order.
    """
    if not density.hypotheses:
        return MultiTargetEstimate((), 0)
    rho = cardinality_distribution(density)
    n_star = int(np.argmax(rho))
    cands = [h for h in density.hypotheses if len(h.tracks) == n_star]
    best = min(cands, key=Hypothesis.sort_key)
    targets = tuple(estimate_track(t) for t in best.tracks)
    return MultiTargetEstimate(targets, n_star, best.history, float(np.exp(best.log_weight)))


def filter_step(prior: GlmbDensity, Z, model: JmsModel, policy: TruncationPolicy, k: int,
                joint: bool = True):
    """One recursion: predict, update, truncate and extract.

    ``joint=False`` runs the literal predict/update/truncate sequence, which
    enumerates every survival/birth subset and is only practical for small
    densities.
    """
    if joint:
        post, n_out = predict_update(prior, Z, model, k, policy)
    else:
        n_out = select_measurements(Z, model)[2]
        post = update(predict(prior, model, k), Z, model, policy)
    post = truncate(post, policy)
    est = extract(post)
    w = post.weights
    w = w[w > 0]
    diag = StepDiagnostics(
        k=k,
        n_hypotheses=len(post),
        effective_hypotheses=float(np.exp(-np.sum(w * np.log(w)))) if len(w) else 0.0,
        n_tracks=len(post.unique_tracks()),
        n_ignored=n_out,
        component_counts={t.label: t.n_components for t in est.targets},
        cardinality=cardinality_distribution(post),
    )
    log.debug("k=%d hypotheses=%d tracks=%d est=%d", k, diag.n_hypotheses, diag.n_tracks, est.cardinality)
    return post, est, diag


class JmsGlmbFilter:
    """Convenience wrapper running :func:`filter_step` over a scan sequence."""

    def __init__(self, model: JmsModel, policy: TruncationPolicy = TruncationPolicy(), joint: bool = True):
        self.model = model
        self.policy = policy
        self.joint = joint
        self.density = GlmbDensity.empty()

    def step(self, Z, k: Optional[int] = None):
        k = self.density.k + 1 if k is None else k
        self.density, est, diag = filter_step(self.density, Z, self.model, self.policy, k, self.joint)
        if not self.density.hypotheses:
            # every hypothesis became infeasible; restart from the empty set
            self.density = GlmbDensity.empty(k)
        return est, diag

    def run(self, scans: Sequence) -> list:
        return [self.step(Z, k) for k, Z in enumerate(scans, start=1)]


# ---------------------------------------------------------------------------
# JSON snapshots


def density_to_dict(density: GlmbDensity) -> dict:
    """Plain-data snapshot: a track table plus hypotheses referencing it."""
    table, index = [], {}
    for t in density.unique_tracks():
        index[id(t)] = len(table)
        d = t.density
        table.append({
            "label": [t.label.birth_time, t.label.index],
            "modes": [{"mode": r + 1,
                       "log_weights": m.log_weights.tolist(),
                       "means": m.means.tolist(),
                       "covs": m.covs.tolist()} for r, m in d.per_mode.items()],
        })
    return {
        "k": density.k,
        "tracks": table,
        "hypotheses": [{"labels": [[l.birth_time, l.index] for l in h.labels],
                        "log_weight": h.log_weight,
                        "history": format(h.history, "016x"),
                        "tracks": [index[id(t)] for t in h.tracks]} for h in density.hypotheses],
    }


def density_from_dict(data: dict) -> GlmbDensity:
    tracks = []
    for t in data["tracks"]:
        modes = sorted(t["modes"], key=lambda m: m["mode"])
        dim = next((len(m["means"][0]) for m in modes if m["means"]), 0)
        lw = np.concatenate([np.asarray(m["log_weights"], dtype=float) for m in modes])
        means = np.asarray([x for m in modes for x in m["means"]], dtype=float).reshape(-1, dim)
        covs = np.asarray([c for m in modes for c in m["covs"]], dtype=float).reshape(-1, dim, dim)
        idx = np.concatenate([np.full(len(m["log_weights"]), m["mode"] - 1) for m in modes]).astype(int)
        tracks.append(Track(Label(*t["label"]), ModeMixture(lw, means, covs, idx, len(modes))))
    hyps = [Hypothesis(tuple(tracks[i] for i in h["tracks"]), float(h["log_weight"]), int(h["history"], 16))
            for h in data["hypotheses"]]
    return GlmbDensity(hyps, int(data["k"]))
