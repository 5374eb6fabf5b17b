"""OSPA miss distance and per-run evaluation traces."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .assignment import solve_optimal


@dataclass(frozen=True)
class OspaParams:
    cutoff: float = 200.0
    order: float = 2.0

    def __post_init__(self):
        if self.cutoff <= 0 or self.order < 1:
            raise ValueError("OSPA needs cutoff > 0 and order >= 1")


@dataclass(frozen=True)
class OspaResult:
    total: float
    localization: float
    cardinality: float


def ospa(X, Y, params: OspaParams = OspaParams()) -> OspaResult:
    """OSPA distance between two finite point sets (rows are points)."""
    c, p = params.cutoff, params.order
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    X = X.reshape(len(X), -1) if X.size else np.zeros((0, 1))
    Y = Y.reshape(len(Y), -1) if Y.size else np.zeros((0, 1))
    m, n = len(X), len(Y)
    if m == 0 and n == 0:
        return OspaResult(0.0, 0.0, 0.0)
    if m > n:
        X, Y, m, n = Y, X, n, m
    if m == 0:
        return OspaResult(c, 0.0, c)
    D = np.minimum(np.linalg.norm(X[:, None, :] - Y[None, :, :], axis=-1), c) ** p
    _, loc_sum = solve_optimal(D)
    card_sum = c ** p * (n - m)
    loc = (loc_sum / n) ** (1 / p)
    card = (card_sum / n) ** (1 / p)
    total = ((loc_sum + card_sum) / n) ** (1 / p)
    return OspaResult(float(total), float(loc), float(card))


def positions(states) -> np.ndarray:
    """x, y columns of [x, vx, y, vy, ...] state rows."""
    return np.asarray(states, dtype=float)[..., [0, 2]]


def match_track(truth_positions: dict, est_positions: dict, cutoff: float = 200.0) -> Optional[object]:
    """Estimated label closest to a truth trajectory on average.

    Both arguments map step -> (x, y) (for the estimate: one dict per label,
    ``est_positions[label][step]``).  Over the truth's lifespan each step
    contributes min(distance, cutoff), or the cutoff when the estimate is absent.
    Ties go to the smallest label.
    """
    best, best_cost = None, np.inf
    steps = sorted(truth_positions)
    for label in sorted(est_positions):
        track = est_positions[label]
        if not any(k in track for k in steps):
            continue
        cost = 0.0
        for k in steps:
            if k in track:
                cost += min(float(np.linalg.norm(np.asarray(track[k]) - truth_positions[k])), cutoff)
            else:
                cost += cutoff
        cost /= len(steps)
        if cost < best_cost:
            best, best_cost = label, cost
    return best


def mode_probability_trace(estimates: Sequence, truth, cutoff: float = 200.0):
    """Per-step mode probabilities of the estimated track matched to ``truth``.

    ``estimates`` is the per-step list of MultiTargetEstimate (index 0 is
    step 1).  Returns (matched label, array (steps, n_modes)) with NaN rows
    where the matched track is not estimated.
    """
    truth_pos = {k: truth.state_at(k)[[0, 2]] for k in range(truth.birth_step, truth.death_step)
                 if k <= len(estimates)}
    est_pos, probs = {}, {}
    n_modes = None
    for k, est in enumerate(estimates, start=1):
        for t in est.targets:
            est_pos.setdefault(t.label, {})[k] = t.mean[[0, 2]]
            probs.setdefault(t.label, {})[k] = t.mode_probs
            n_modes = len(t.mode_probs)
    label = match_track(truth_pos, est_pos, cutoff)
    if label is None:
        return None, np.full((len(estimates), n_modes or 1), np.nan)
    trace = np.full((len(estimates), n_modes), np.nan)
    for k, p in probs[label].items():
        trace[k - 1] = p
    return label, trace


def switch_steps(truth) -> list[int]:
    """Birth step plus every step whose mode differs from the previous one."""
    out = [truth.birth_step]
    for k in range(truth.birth_step + 1, truth.death_step):
        if truth.mode_at(k) != truth.mode_at(k - 1):
            out.append(k)
    return out


def mode_identification(estimates: Sequence, truths: Sequence, settle: int = 5):
    """Per-step counts of settled truth steps and of correct argmax modes.

    A step of a truth target is settled when at least ``settle`` steps have
    passed since its birth or last mode switch.  It scores a hit when the
    matched estimated track exists at that step and its most probable mode is
    the true one.  Returns (eligible, hits), integer arrays over steps.
    """
    n = len(estimates)
    eligible = np.zeros(n, dtype=int)
    hits = np.zeros(n, dtype=int)
    for truth in truths:
        _, trace = mode_probability_trace(estimates, truth)
        switches = switch_steps(truth)
        for k in range(truth.birth_step, min(truth.death_step, n + 1)):
            last = max(s for s in switches if s <= k)
            if k - last < settle:
                continue
            eligible[k - 1] += 1
            row = trace[k - 1]
            if not np.isnan(row[0]) and int(np.argmax(row)) == truth.mode_at(k):
                hits[k - 1] += 1
    return eligible, hits
