"""Ground truth and measurement scan generation for jump-Markov scenarios."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .glmb import Label
from .jms import JmsModel, wrap_angle


@dataclass(frozen=True)
class ModeSegment:
    """``steps`` consecutive steps in ``model`` (0-based).  ``turn_rate``, when
    given, overwrites the turn-rate state component at the segment start."""

    model: int
    steps: int
    turn_rate: Optional[float] = None


@dataclass(frozen=True)
class TargetScript:
    label: Label
    birth_step: int
    site: Optional[int] = None              # 1-based birth site, or
    initial_state: Optional[tuple] = None   # an explicit state
    death_step: Optional[int] = None        # first step the target is gone
    mode_schedule: Optional[tuple] = None   # of ModeSegment


@dataclass(frozen=True)
class ScenarioScript:
    steps: int
    births: tuple
    rng_seed: int = 0
    process_noise: bool = False

    def __post_init__(self):
        for b in self.births:
            if not 1 <= b.birth_step <= self.steps:
                raise ValueError(f"birth step {b.birth_step} outside [1, {self.steps}]")
            if (b.site is None) == (b.initial_state is None):
                raise ValueError("each scripted birth needs exactly one of site or initial_state")


@dataclass
class TruthTrajectory:
    label: Label
    birth_step: int
    death_step: int  # exclusive
    states: np.ndarray   # (lifespan, n)
    modes: np.ndarray    # (lifespan,), 0-based

    def alive(self, k: int) -> bool:
        return self.birth_step <= k < self.death_step

    def state_at(self, k: int) -> np.ndarray:
        return self.states[k - self.birth_step]

    def mode_at(self, k: int) -> int:
        return int(self.modes[k - self.birth_step])


@dataclass
class ScanSet:
    k: int
    measurements: np.ndarray            # (M, m)
    truth_assoc: list = field(default_factory=list)  # Label or None (clutter) per measurement


def _schedule(segments: Sequence[ModeSegment], n: int):
    modes, rates = [], []
    for seg in segments:
        for s in range(seg.steps):
            modes.append(seg.model)
            rates.append(seg.turn_rate if s == 0 else None)
    if not modes:
        return None, None
    while len(modes) < n:
        modes.append(modes[-1])
        rates.append(None)
    return modes[:n], rates[:n]


def simulate_truth(model: JmsModel, script: ScenarioScript) -> list[TruthTrajectory]:
    """Sample (or replay scripted) mode sequences and propagate every target.

    A target is born in model 1 at its birth step; at each later step the new
    mode is drawn from the switching matrix row of the previous mode (unless
    scripted) and the state is propagated through that mode's model, with
    process noise when ``script.process_noise`` is set.
    """
    rng = np.random.default_rng(script.rng_seed)
    out = []
    for b in script.births:
        end = script.steps + 1 if b.death_step is None else min(b.death_step, script.steps + 1)
        n = max(end - b.birth_step, 0)
        if b.initial_state is not None:
            x = np.asarray(b.initial_state, dtype=float)
        else:
            site = model.birth.sites[b.site - 1]
            x = rng.multivariate_normal(site.mean, site.cov)
        sched, rates = _schedule(b.mode_schedule or (), n)
        states, modes = [], []
        r = 0
        for i in range(n):
            if sched is not None:
                r = sched[i]
            elif i > 0:
                r = int(rng.choice(model.n_modes, p=model.switching.probs[r]))
            if rates is not None and rates[i] is not None:
                x = x.copy()
                x[4] = rates[i]
            if i > 0:
                mm = model.models[r]
                x = mm.apply(x)
                if script.process_noise:
                    x = x + rng.multivariate_normal(np.zeros(len(x)), mm.Q)
            states.append(np.array(x))
            modes.append(r)
        dim = model.state_dim
        out.append(TruthTrajectory(b.label, b.birth_step, b.birth_step + n,
                                   np.array(states).reshape(n, dim), np.array(modes, dtype=int)))
    return out


def _fold(z: np.ndarray, model: JmsModel) -> np.ndarray:
    if model.sensor.linear:
        return z
    z = z.copy()
    z[..., 0] = wrap_angle(z[..., 0])
    z[..., 1] = np.abs(z[..., 1])
    return z


def simulate_scans(truths: Sequence[TruthTrajectory], model: JmsModel, steps: int, seed: int) -> list[ScanSet]:
    """Detections (thinned by P_D, noisy), uniform Poisson clutter, shuffled."""
    rng = np.random.default_rng(seed)
    sensor = model.sensor
    m = sensor.measurement_dim
    lo, hi = sensor.region[:, 0], sensor.region[:, 1]
    scans = []
    for k in range(1, steps + 1):
        zs, assoc = [], []
        for t in truths:
            if not t.alive(k) or rng.random() >= sensor.detection_prob:
                continue
            z = sensor.measure(t.state_at(k)) + rng.multivariate_normal(np.zeros(m), sensor.R)
            z = _fold(z, model)
            if sensor.in_region(z)[0]:
                zs.append(z)
                assoc.append(t.label)
        n_c = rng.poisson(sensor.clutter_rate)
        clutter = lo + (hi - lo) * rng.random((n_c, m))
        Z = np.vstack([np.array(zs).reshape(-1, m), clutter])
        assoc += [None] * n_c
        perm = rng.permutation(len(Z))
        scans.append(ScanSet(k, Z[perm], [assoc[i] for i in perm]))
    return scans


def random_birth_script(model: JmsModel, steps: int, seed: int, process_noise: bool = True) -> ScenarioScript:
    """Targets born at each site with its existence probability per step."""
    rng = np.random.default_rng(seed)
    births = []
    for k in range(1, steps + 1):
        for i, site in enumerate(model.birth.sites, start=1):
            if rng.random() < site.existence:
                births.append(TargetScript(Label(k, i), k, site=i))
    return ScenarioScript(steps, tuple(births), rng_seed=seed, process_noise=process_noise)


# ---------------------------------------------------------------------------
# default reproduction scripts

SPEED = 100.0


def _v(heading_deg: float, speed: float = SPEED) -> tuple:
    a = np.deg2rad(heading_deg)
    return speed * np.cos(a), speed * np.sin(a)


def default_linear_script(seed: int = 0, steps: int = 100) -> ScenarioScript:
    """Three targets from sites 1-3 born at steps 1, 10, 20, each flying a
    constant-velocity leg, a right turn, another leg, a left turn and a final leg.

    Births after ``steps`` are left out.
    """
    CV, RT, LT = 0, 1, 2

    def target(i, k0, pos, heading, legs):
        vx, vy = _v(heading)
        state = (pos[0], vx, pos[1], vy)
        return TargetScript(Label(k0, i), k0, initial_state=state,
                            mode_schedule=tuple(ModeSegment(r, n) for r, n in legs))

    births = (
        target(1, 1, (40000.0, -50000.0), 120.0, [(CV, 30), (RT, 8), (CV, 20), (LT, 8), (CV, 100)]),
        target(2, 10, (-50000.0, 40000.0), -45.0, [(CV, 25), (LT, 8), (CV, 20), (RT, 8), (CV, 100)]),
        target(3, 20, (-10000.0, 0.0), 30.0, [(CV, 20), (RT, 8), (CV, 15), (LT, 8), (CV, 100)]),
    )
    return ScenarioScript(steps, tuple(b for b in births if b.birth_step <= steps), rng_seed=seed,
                          process_noise=False)


def default_nonlinear_script(seed: int = 0, steps: int = 100) -> ScenarioScript:
    """Same births as the linear script with the turns flown by the
    unknown-turn-rate model at +-3 deg/s."""
    CV, CT = 0, 1
    w = 3 * np.pi / 180

    def target(i, k0, pos, heading, legs):
        vx, vy = _v(heading)
        state = (pos[0], vx, pos[1], vy, 0.0)
        return TargetScript(Label(k0, i), k0, initial_state=state,
                            mode_schedule=tuple(ModeSegment(r, n, rate) for r, n, rate in legs))

    births = (
        target(1, 1, (40000.0, -50000.0), 120.0, [(CV, 30, 0.0), (CT, 10, w), (CV, 20, 0.0), (CT, 10, -w), (CV, 100, 0.0)]),
        target(2, 10, (-50000.0, 40000.0), -45.0, [(CV, 25, 0.0), (CT, 10, -w), (CV, 20, 0.0), (CT, 10, w), (CV, 100, 0.0)]),
        target(3, 20, (-10000.0, 0.0), 30.0, [(CV, 20, 0.0), (CT, 10, w), (CV, 15, 0.0), (CT, 10, -w), (CV, 100, 0.0)]),
    )
    return ScenarioScript(steps, tuple(b for b in births if b.birth_step <= steps), rng_seed=seed,
                          process_noise=False)
