"""Jump-Markov system definitions and the two reference scenario suites.

Mode indices are 0-based in code (``model 1`` of the linear example is index
0).  Files written by the CLI use 1-based mode numbers.
"""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import multivariate_normal

from .gaussian import (ConfigurationError, Innovation, UnscentedParams, kf_innovation,
                       kf_predict_batch, ut_innovation, ut_predict_batch)

CT_EPS = 1e-9


def cv_matrix(T: float) -> np.ndarray:
    return np.array([[1.0, T, 0.0, 0.0],
                     [0.0, 1.0, 0.0, 0.0],
                     [0.0, 0.0, 1.0, T],
                     [0.0, 0.0, 0.0, 1.0]])


def ct_matrix(omega: float, T: float) -> np.ndarray:
    """Coordinated-turn transition for state [x, vx, y, vy].

    Falls back to the constant-velocity limit when ``|omega * T| < 1e-9``.
    """
    if abs(omega * T) < CT_EPS:
        return cv_matrix(T)
    s, c = np.sin(omega * T), np.cos(omega * T)
    return np.array([[1.0, s / omega, 0.0, (c - 1.0) / omega],
                     [0.0, c, 0.0, -s],
                     [0.0, -(c - 1.0) / omega, 1.0, s / omega],
                     [0.0, s, 0.0, c]])


def ct_unknown_rate(state: np.ndarray, T: float) -> np.ndarray:
    """Propagate [x, vx, y, vy, omega] states (any leading shape) one step.

    The turn rate itself is carried over unchanged.
    """
    state = np.asarray(state, dtype=float)
    x, vx, y, vy, w = np.moveaxis(state, -1, 0)
    wT = w * T
    small = np.abs(wT) < CT_EPS
    safe_w = np.where(small, 1.0, w)
    s, c = np.sin(wT), np.cos(wT)
    a = np.where(small, T, s / safe_w)          # sin(wT)/w
    b = np.where(small, 0.0, (1.0 - c) / safe_w)  # (1-cos(wT))/w
    out = np.stack([x + a * vx - b * vy,
                    c * vx - s * vy,
                    y + b * vx + a * vy,
                    s * vx + c * vy,
                    w], axis=-1)
    return out


def white_accel_noise(sigma: float, T: float, turn_rate_term: bool = False) -> np.ndarray:
    """Piecewise-constant white acceleration covariance, optionally with a
    turn-rate random walk entry ``sigma**2 * T**2``."""
    blk = np.array([[T ** 4 / 4, T ** 3 / 2], [T ** 3 / 2, T ** 2]])
    n = 5 if turn_rate_term else 4
    Q = np.zeros((n, n))
    Q[0:2, 0:2] = blk
    Q[2:4, 2:4] = blk
    if turn_rate_term:
        Q[4, 4] = T ** 2
    return sigma ** 2 * Q


def bearing_range(states: np.ndarray) -> np.ndarray:
    """(atan2(y, x), sqrt(x^2 + y^2)) for states [x, vx, y, vy, ...] with a sensor at the origin."""
    states = np.asarray(states, dtype=float)
    x, y = states[..., 0], states[..., 2]
    return np.stack([np.arctan2(y, x), np.hypot(x, y)], axis=-1)


def wrap_angle(a):
    """Wrap angles into (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def bearing_residual(a, b):
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    d = d.copy()
    d[..., 0] = wrap_angle(d[..., 0])
    return d


@dataclass(frozen=True, eq=False)
class MotionModel:
    """One motion mode: linear (``F``) or nonlinear (``f``), with noise ``Q``."""

    id: int
    Q: np.ndarray
    F: Optional[np.ndarray] = None
    f: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = ""

    def __post_init__(self):
        if (self.F is None) == (self.f is None):
            raise ConfigurationError("a motion model needs exactly one of F or f")
        Q = np.asarray(self.Q, dtype=float)
        object.__setattr__(self, "Q", Q)
        if self.F is not None:
            F = np.asarray(self.F, dtype=float)
            if F.shape != Q.shape:
                raise ConfigurationError(f"F {F.shape} and Q {Q.shape} disagree")
            object.__setattr__(self, "F", F)
        if not np.allclose(Q, Q.T):
            raise ConfigurationError("Q must be symmetric")
        if np.any(np.linalg.eigvalsh(Q) < -1e-9 * max(1.0, np.abs(Q).max())):
            raise ConfigurationError("Q must be positive semidefinite")

    @property
    def state_dim(self) -> int:
        return self.Q.shape[0]

    @property
    def linear(self) -> bool:
        return self.F is not None

    def apply(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        return states @ self.F.T if self.linear else self.f(states)

    def propagate(self, means, covs, ut: UnscentedParams):
        if self.linear:
            return kf_predict_batch(means, covs, self.F, self.Q)
        return ut_predict_batch(means, covs, self.f, self.Q, ut)

    def log_density(self, x, x_prev) -> float:
        mean = self.apply(np.asarray(x_prev, dtype=float))
        return float(multivariate_normal(mean, self.Q, allow_singular=True).logpdf(x))


@dataclass(frozen=True, eq=False)
class SwitchingMatrix:
    """Row-stochastic mode switching; ``probs[r_from, r_to]``."""

    probs: np.ndarray

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.probs, dtype=float))
        if P.shape[0] != P.shape[1]:
            raise ConfigurationError("switching matrix must be square")
        if np.any(P < 0) or np.any(P > 1):
            raise ConfigurationError("switching probabilities must lie in [0, 1]")
        if not np.allclose(P.sum(axis=1), 1.0, rtol=0, atol=1e-12):
            raise ConfigurationError("switching matrix rows must sum to 1")
        P.flags.writeable = False
        object.__setattr__(self, "probs", P)

    def __len__(self):
        return self.probs.shape[0]

    def prob(self, r: int, r_prev: int) -> float:
        return float(self.probs[r_prev, r])

    @property
    def log_probs(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.probs)


@dataclass(frozen=True, eq=False)
class SensorModel:
    """Single sensor with uniform Poisson clutter over an axis-aligned region.

    ``residual`` (optional) computes a - b with angular coordinates wrapped.
    """

    R: np.ndarray
    detection_prob: float
    clutter_rate: float
    region: np.ndarray  # (m, 2) lower/upper bounds
    H: Optional[np.ndarray] = None
    h: Optional[Callable[[np.ndarray], np.ndarray]] = None
    residual: Optional[Callable] = None
    angular: tuple = ()  # indices of angular measurement coordinates

    def __post_init__(self):
        if (self.H is None) == (self.h is None):
            raise ConfigurationError("a sensor needs exactly one of H or h")
        if not 0.0 <= self.detection_prob <= 1.0:
            raise ConfigurationError("detection probability must lie in [0, 1]")
        if self.clutter_rate < 0:
            raise ConfigurationError("clutter rate must be nonnegative")
        region = np.asarray(self.region, dtype=float)
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if region.shape != (R.shape[0], 2) or np.any(region[:, 1] <= region[:, 0]):
            raise ConfigurationError("region must be (m, 2) with lower < upper")
        object.__setattr__(self, "region", region)
        object.__setattr__(self, "R", R)
        if self.H is not None:
            object.__setattr__(self, "H", np.atleast_2d(np.asarray(self.H, dtype=float)))

    @property
    def measurement_dim(self) -> int:
        return self.R.shape[0]

    @property
    def linear(self) -> bool:
        return self.H is not None

    @property
    def volume(self) -> float:
        return float(np.prod(self.region[:, 1] - self.region[:, 0]))

    @property
    def log_kappa(self) -> float:
        """Log clutter intensity inside the region.  A clutter-free sensor uses
        a vanishing intensity of exp(-1000) so unexplained measurements are
        effectively forbidden."""
        if self.clutter_rate == 0:
            return -1000.0
        return float(np.log(self.clutter_rate / self.volume))

    def kappa(self, z) -> float:
        return float(np.exp(self.log_kappa)) if self.in_region(np.atleast_2d(z))[0] else 0.0

    def in_region(self, Z: np.ndarray) -> np.ndarray:
        Z = np.asarray(Z, dtype=float).reshape(-1, self.measurement_dim)
        return np.all((Z >= self.region[:, 0]) & (Z <= self.region[:, 1]), axis=1)

    def measure(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        return states @ self.H.T if self.linear else self.h(states)

    def innovation(self, means, covs, ut: UnscentedParams) -> Innovation:
        if self.linear:
            return kf_innovation(means, covs, self.H, self.R, self.residual)
        return ut_innovation(means, covs, self.h, self.R, ut, self.residual)


@dataclass(frozen=True, eq=False)
class BirthSite:
    existence: float
    mean: np.ndarray
    cov: np.ndarray
    mode_prior: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.existence <= 1.0:
            raise ConfigurationError("birth existence probability must lie in [0, 1]")
        mp = np.asarray(self.mode_prior, dtype=float)
        if np.any(mp < 0) or abs(mp.sum() - 1.0) > 1e-12:
            raise ConfigurationError("birth mode prior must be a probability vector")
        object.__setattr__(self, "mode_prior", mp)
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=float))


@dataclass(frozen=True, eq=False)
class BirthModel:
    """Labeled multi-Bernoulli birth; ``steps`` limits births to given times."""

    sites: tuple
    steps: Optional[frozenset] = None

    def active(self, k: int) -> bool:
        return self.steps is None or k in self.steps

    def sites_at(self, k: int) -> list[tuple[int, BirthSite]]:
        """(1-based site index, site) pairs that can give birth at time k."""
        if not self.active(k):
            return []
        return [(i + 1, s) for i, s in enumerate(self.sites)]


@dataclass(frozen=True, eq=False)
class JmsModel:
    models: tuple
    switching: SwitchingMatrix
    sensor: SensorModel
    birth: BirthModel
    survival_prob: float = 0.99
    T: float = 5.0
    ut: UnscentedParams = field(default_factory=UnscentedParams)
    params: Optional[dict] = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.switching) != len(self.models):
            raise ConfigurationError("switching matrix size must match the number of models")
        dims = {m.state_dim for m in self.models}
        if len(dims) != 1:
            raise ConfigurationError("all motion models must share the state dimension")
        if not 0.0 <= self.survival_prob <= 1.0:
            raise ConfigurationError("survival probability must lie in [0, 1]")
        for s in self.birth.sites:
            if s.mean.shape != (self.state_dim,) or len(s.mode_prior) != self.n_modes:
                raise ConfigurationError("birth site does not match the model dimensions")

    @property
    def n_modes(self) -> int:
        return len(self.models)

    @property
    def state_dim(self) -> int:
        return self.models[0].state_dim

    @property
    def linear(self) -> bool:
        return all(m.linear for m in self.models) and self.sensor.linear

    def joint_transition_density(self, x, r: int, x_prev, r_prev: int) -> float:
        """phi(x | x_prev, r) * P(r | r_prev)."""
        if not (0 <= r < self.n_modes and 0 <= r_prev < self.n_modes):
            raise ConfigurationError(f"invalid model index ({r}, {r_prev})")
        p = self.switching.prob(r, r_prev)
        if p == 0.0:
            return 0.0
        return p * float(np.exp(self.models[r].log_density(x, x_prev)))

    def replace(self, **changes) -> "JmsModel":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# reference scenarios

LINEAR_DEFAULTS = {
    "kind": "linear",
    "T": 5.0,
    "survival_prob": 0.99,
    "detection_prob": 0.97,
    "clutter_rate": 60.0,
    "region": [[-60000.0, 60000.0], [-60000.0, 60000.0]],
    "turn_rates": [0.0, 5 * np.pi / 180, -5 * np.pi / 180],
    "sigma_v": [5.0, 20.0, 20.0],
    "sigma_h": 40.0,
    "switching": [[0.8, 0.1, 0.1], [0.2, 0.8, 0.0], [0.2, 0.0, 0.8]],
    "birth": {
        "existence": [0.2, 0.2, 0.2],
        "means": [[40000.0, 0.0, -50000.0, 0.0],
                  [-50000.0, 0.0, 40000.0, 0.0],
                  [-10000.0, 0.0, 0.0, 0.0]],
        "cov_diag": [1000.0, 300.0, 1000.0, 300.0],
        "covs": None,
        "mode_prior": [1.0, 0.0, 0.0],
        "steps": None,
    },
    "ut": {"alpha": 1.0, "beta": 2.0, "kappa": None},
}

NONLINEAR_DEFAULTS = {
    "kind": "nonlinear",
    "T": 5.0,
    "survival_prob": 0.99,
    "detection_prob": 0.97,
    "clutter_rate": 60.0,
    "region": [[-np.pi, np.pi], [0.0, 60000.0 * np.sqrt(2.0)]],
    "sigma_v": [5.0, 20.0],
    "sigma_theta": np.pi / 180,
    "sigma_r": 20.0,
    "switching": [[0.8, 0.2], [0.2, 0.8]],
    "birth": {
        "existence": [0.2, 0.2, 0.2],
        "means": [[40000.0, 0.0, -50000.0, 0.0, 0.0],
                  [-50000.0, 0.0, 40000.0, 0.0, 0.0],
                  [-10000.0, 0.0, 0.0, 0.0, 0.0]],
        "cov_diag": [1000.0, 300.0, 1000.0, 300.0, 1e-4],
        "covs": None,
        "mode_prior": [1.0, 0.0],
        "steps": None,
    },
    "ut": {"alpha": 1.0, "beta": 2.0, "kappa": None},
}


def default_params(kind: str) -> dict:
    if kind == "linear":
        return copy.deepcopy(LINEAR_DEFAULTS)
    if kind == "nonlinear":
        return copy.deepcopy(NONLINEAR_DEFAULTS)
    raise ConfigurationError(f"unknown scenario kind {kind!r}")


def _birth_from_params(b: dict, n: int, n_modes: int) -> BirthModel:
    means = np.asarray(b["means"], dtype=float)
    if "covs" in b and b["covs"] is not None:
        covs = [np.asarray(c, dtype=float) for c in b["covs"]]
    else:
        covs = [np.diag(np.asarray(b["cov_diag"], dtype=float))] * len(means)
    existence = b["existence"]
    if np.isscalar(existence):
        existence = [existence] * len(means)
    prior = np.asarray(b["mode_prior"], dtype=float)
    priors = [prior] * len(means) if prior.ndim == 1 else list(prior)
    if not (len(existence) == len(covs) == len(priors) == len(means)):
        raise ConfigurationError("birth lists have different lengths")
    sites = tuple(BirthSite(float(e), m, c, p) for e, m, c, p in zip(existence, means, covs, priors))
    steps = b.get("steps")
    return BirthModel(sites, None if steps is None else frozenset(int(s) for s in steps))


def model_from_params(params: dict) -> JmsModel:
    """Build a :class:`JmsModel` from a plain parameter dictionary."""
    p = params
    kind = p["kind"]
    T = float(p["T"])
    ut = UnscentedParams(**p.get("ut", {}))
    switching = SwitchingMatrix(np.asarray(p["switching"], dtype=float))
    region = np.asarray(p["region"], dtype=float)
    if kind == "linear":
        rates, sig = p["turn_rates"], p["sigma_v"]
        if len(rates) != len(sig):
            raise ConfigurationError("turn_rates and sigma_v must have equal length")
        models = tuple(
            MotionModel(i, white_accel_noise(s, T), F=ct_matrix(w, T),
                        name="CV" if abs(w * T) < CT_EPS else ("CT(%+.4f)" % w))
            for i, (w, s) in enumerate(zip(rates, sig)))
        H = np.array([[1.0, 0, 0, 0], [0, 0, 1.0, 0]])
        sensor = SensorModel(R=float(p["sigma_h"]) ** 2 * np.eye(2), detection_prob=float(p["detection_prob"]),
                             clutter_rate=float(p["clutter_rate"]), region=region, H=H)
        n = 4
    elif kind == "nonlinear":
        sig = p["sigma_v"]
        if len(sig) != 2:
            raise ConfigurationError("nonlinear scenario uses two models (CV, CT)")
        F_cv = np.eye(5)
        F_cv[:4, :4] = cv_matrix(T)
        models = (MotionModel(0, white_accel_noise(sig[0], T, True), F=F_cv, name="CV"),
                  MotionModel(1, white_accel_noise(sig[1], T, True), f=_CTStep(T), name="CT"))
        R = np.diag([float(p["sigma_theta"]) ** 2, float(p["sigma_r"]) ** 2])
        sensor = SensorModel(R=R, detection_prob=float(p["detection_prob"]),
                             clutter_rate=float(p["clutter_rate"]), region=region, h=bearing_range,
                             residual=bearing_residual, angular=(0,))
        n = 5
    else:
        raise ConfigurationError(f"unknown scenario kind {kind!r}")
    birth = _birth_from_params(p["birth"], n, len(models))
    return JmsModel(models, switching, sensor, birth, float(p["survival_prob"]), T, ut,
                    params=copy.deepcopy(p))


class _CTStep:
    """Picklable coordinated-turn step with a fixed sampling interval."""

    def __init__(self, T):
        self.T = T

    def __call__(self, states):
        return ct_unknown_rate(states, self.T)


def linear_scenario(**overrides) -> JmsModel:
    p = default_params("linear")
    p.update(overrides)
    return model_from_params(p)


def nonlinear_scenario(**overrides) -> JmsModel:
    p = default_params("nonlinear")
    p.update(overrides)
    return model_from_params(p)


def to_plain(obj):
    """Convert numpy scalars/arrays inside a parameter tree to lists and floats."""
    if isinstance(obj, dict):
        return {k: to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_plain(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj
