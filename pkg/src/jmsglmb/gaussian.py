"""Gaussian component algebra.

Kalman and unscented predict/update for single components and for stacked
batches of components, moment matching, and mixture pruning/merging.  Weights
live in the log domain everywhere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

LOG_2PI = np.log(2.0 * np.pi)


def logsumexp(a, axis=None):
    """log(sum(exp(a))) along ``axis``; -inf for empty or all -inf input."""
    a = np.asarray(a, dtype=float)
    if axis is None:
        if a.size == 0:
            return -math.inf
        m = a.max()
        if not math.isfinite(m):
            return float(m)
        return math.log(np.exp(a - m).sum()) + float(m)
    if a.shape[axis] == 0:
        return np.full(np.delete(a.shape, axis), -np.inf)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


class ConfigurationError(ValueError):
    """Inputs have inconsistent dimensions or invalid parameter values."""


class SingularUpdateError(np.linalg.LinAlgError):
    """Innovation covariance could not be factorized."""


class SPDViolationError(np.linalg.LinAlgError):
    """A covariance stayed non positive-definite after jitter."""


@dataclass(frozen=True)
class UnscentedParams:
    alpha: float = 1.0
    beta: float = 2.0
    kappa: Optional[float] = None  # None -> 3 - n

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigurationError("alpha must be positive")

    def lam(self, n: int) -> float:
        kappa = 3.0 - n if self.kappa is None else self.kappa
        lam = self.alpha ** 2 * (n + kappa) - n
        if n + lam <= 0:
            raise ConfigurationError(f"n + lambda = {n + lam} must be positive")
        return lam

    def weights(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        lam = self.lam(n)
        wm = np.full(2 * n + 1, 0.5 / (n + lam))
        wc = wm.copy()
        wm[0] = lam / (n + lam)
        wc[0] = wm[0] + 1.0 - self.alpha ** 2 + self.beta
        return wm, wc


@dataclass(frozen=True)
class GaussianComponent:
    """One weighted Gaussian; ``log_weight`` is the natural log of the weight."""

    log_weight: float
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ConfigurationError(f"cov shape {cov.shape} does not match mean of size {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "log_weight", float(self.log_weight))

    @property
    def weight(self) -> float:
        return float(np.exp(self.log_weight))

    @property
    def dim(self) -> int:
        return self.mean.size


# ---------------------------------------------------------------------------
# covariance conditioning


def symmetrize(covs: np.ndarray) -> np.ndarray:
    return 0.5 * (covs + np.swapaxes(covs, -1, -2))


def condition(covs: np.ndarray) -> np.ndarray:
    """Symmetrize a stack of covariances and make sure each one factorizes.

    A matrix whose Cholesky fails gets ``1e-12 * trace / n`` added on the
    diagonal once; a second failure raises :class:`SPDViolationError`.
    """
    covs = symmetrize(covs)
    try:
        np.linalg.cholesky(covs)
        return covs
    except np.linalg.LinAlgError:
        pass
    flat = covs.reshape(-1, covs.shape[-2], covs.shape[-1]).copy()
    n = flat.shape[-1]
    for i, c in enumerate(flat):
        try:
            np.linalg.cholesky(c)
            continue
        except np.linalg.LinAlgError:
            pass
        jitter = 1e-12 * max(np.trace(c) / n, np.finfo(float).tiny)
        c = c + jitter * np.eye(n)
        try:
            np.linalg.cholesky(c)
        except np.linalg.LinAlgError as exc:
            raise SPDViolationError("covariance is not positive definite") from exc
        flat[i] = c
    return flat.reshape(covs.shape)


def _check_square(name: str, mat: np.ndarray, n: int):
    if mat.shape != (n, n):
        raise ConfigurationError(f"{name} has shape {mat.shape}, expected {(n, n)}")


# ---------------------------------------------------------------------------
# batched primitives; means (N, n), covs (N, n, n)


def kf_predict_batch(means, covs, F, Q):
    F = np.asarray(F, dtype=float)
    Q = np.asarray(Q, dtype=float)
    n = means.shape[-1]
    _check_square("F", F, n)
    _check_square("Q", Q, n)
    means = means @ F.T
    covs = F @ covs @ F.T + Q
    return means, condition(covs)


def ut_sigma_points(means, covs, params: UnscentedParams):
    """Sigma points (N, 2n+1, n) plus mean and covariance weights."""
    n = means.shape[-1]
    lam = params.lam(n)
    try:
        chol = np.linalg.cholesky((n + lam) * covs)
    except np.linalg.LinAlgError as exc:
        raise SPDViolationError("sigma point covariance is not positive definite") from exc
    offsets = np.swapaxes(chol, -1, -2)  # rows are columns of the factor
    pts = np.concatenate(
        [means[:, None, :], means[:, None, :] + offsets, means[:, None, :] - offsets], axis=1
    )
    wm, wc = params.weights(n)
    return pts, wm, wc


def ut_predict_batch(means, covs, f, Q, params: UnscentedParams):
    Q = np.asarray(Q, dtype=float)
    _check_square("Q", Q, means.shape[-1])
    pts, wm, wc = ut_sigma_points(means, covs, params)
    fx = f(pts)
    mean = np.einsum("s,nsi->ni", wm, fx)
    dev = fx - mean[:, None, :]
    cov = np.einsum("s,nsi,nsj->nij", wc, dev, dev) + Q
    return mean, condition(cov)


def _subtract(a, b, residual):
    return a - b if residual is None else residual(a, b)


@dataclass
class Innovation:
    """Everything needed to condition a stack of components on any measurement.

    ``z_pred`` (N, m), ``chol_S`` (N, m, m), ``gain`` (N, n, m) and
    ``post_cov`` (N, n, n).  Posterior covariances do not depend on the
    measurement value, so they are shared by every candidate measurement.
    """

    z_pred: np.ndarray
    chol_S: np.ndarray
    gain: np.ndarray
    post_cov: np.ndarray
    residual: Optional[Callable] = field(default=None, repr=False)

    def residuals(self, Z: np.ndarray) -> np.ndarray:
        """Innovations for every (component, measurement) pair, (N, M, m)."""
        Z = np.asarray(Z, dtype=float).reshape(-1, self.z_pred.shape[-1])
        return _subtract(Z[None, :, :], self.z_pred[:, None, :], self.residual)

    def mahalanobis2(self, resid: np.ndarray) -> np.ndarray:
        N, M, m = resid.shape
        if M == 0:
            return np.zeros((N, 0))
        # whiten with the inverse Cholesky factor, shared across measurements
        y = resid @ np.swapaxes(np.linalg.inv(self.chol_S), -1, -2)
        return np.sum(y * y, axis=-1)

    def log_likelihoods(self, Z: np.ndarray, resid: Optional[np.ndarray] = None,
                        d2: Optional[np.ndarray] = None) -> np.ndarray:
        """log N(z; z_pred, S) for every component and measurement, (N, M)."""
        if resid is None:
            resid = self.residuals(Z)
        if d2 is None:
            d2 = self.mahalanobis2(resid)
        m = self.z_pred.shape[-1]
        half_logdet = np.sum(np.log(np.diagonal(self.chol_S, axis1=-2, axis2=-1)), axis=-1)
        return -0.5 * d2 - half_logdet[:, None] - 0.5 * m * LOG_2PI

    def posterior_means(self, means: np.ndarray, resid_j: np.ndarray) -> np.ndarray:
        return means + np.einsum("nij,nj->ni", self.gain, resid_j)


def _finish_innovation(covs, S, cross, residual) -> Innovation:
    S = symmetrize(S)
    try:
        chol = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise SingularUpdateError("innovation covariance is not invertible") from exc
    # K = C S^-1, via S K^T = C^T
    gain = np.swapaxes(np.linalg.solve(S, np.swapaxes(cross, -1, -2)), -1, -2)
    post = covs - gain @ S @ np.swapaxes(gain, -1, -2)
    return Innovation(None, chol, gain, condition(post), residual)


def kf_innovation(means, covs, H, R, residual=None) -> Innovation:
    H = np.atleast_2d(np.asarray(H, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if H.shape[1] != means.shape[-1]:
        raise ConfigurationError(f"H has {H.shape[1]} columns, state has {means.shape[-1]}")
    _check_square("R", R, H.shape[0])
    cross = covs @ H.T
    S = H @ cross + R
    inn = _finish_innovation(covs, S, cross, residual)
    inn.z_pred = means @ H.T
    return inn


def ut_innovation(means, covs, h, R, params: UnscentedParams, residual=None) -> Innovation:
    R = np.atleast_2d(np.asarray(R, dtype=float))
    pts, wm, wc = ut_sigma_points(means, covs, params)
    hz = h(pts)  # (N, 2n+1, m)
    _check_square("R", R, hz.shape[-1])
    # average deviations from the central point so angular components wrap correctly
    centre = hz[:, :1, :]
    dz = _subtract(hz, centre, residual)
    z_pred = centre[:, 0, :] + np.einsum("s,nsi->ni", wm, dz)
    if residual is not None:
        z_pred = residual(z_pred, np.zeros_like(z_pred))
    dz = _subtract(hz, z_pred[:, None, :], residual)
    dx = pts - means[:, None, :]
    S = np.einsum("s,nsi,nsj->nij", wc, dz, dz) + R
    cross = np.einsum("s,nsi,nsj->nij", wc, dx, dz)
    inn = _finish_innovation(covs, S, cross, residual)
    inn.z_pred = z_pred
    return inn


# ---------------------------------------------------------------------------
# single-component API


def _stack(comp: GaussianComponent):
    return comp.mean[None, :], comp.cov[None, :, :]


def kalman_predict(comp: GaussianComponent, F, Q) -> GaussianComponent:
    m, P = kf_predict_batch(*_stack(comp), F, Q)
    return GaussianComponent(comp.log_weight, m[0], P[0])


def kalman_update(comp: GaussianComponent, z, H, R, residual=None):
    """Condition ``comp`` on ``z``; returns (posterior, log N(z; H m, S))."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    means, covs = _stack(comp)
    inn = kf_innovation(means, covs, H, R, residual)
    return _single_update(comp, means, inn, z)


def _single_update(comp, means, inn: Innovation, z):
    resid = inn.residuals(z[None, :])
    loglik = inn.log_likelihoods(None, resid)[0, 0]
    mean = inn.posterior_means(means, resid[:, 0, :])[0]
    return GaussianComponent(comp.log_weight, mean, inn.post_cov[0]), float(loglik)


def ut_points(comp: GaussianComponent, params: UnscentedParams = UnscentedParams()):
    pts, wm, wc = ut_sigma_points(*_stack(comp), params)
    return list(pts[0]), list(wm), list(wc)


def ukf_predict(comp: GaussianComponent, f, Q, params: UnscentedParams = UnscentedParams()):
    """``f`` maps an array (..., n) of states to (..., n)."""
    m, P = ut_predict_batch(*_stack(comp), f, Q, params)
    return GaussianComponent(comp.log_weight, m[0], P[0])


def ukf_update(comp: GaussianComponent, z, h, R, params: UnscentedParams = UnscentedParams(), residual=None):
    z = np.atleast_1d(np.asarray(z, dtype=float))
    means, covs = _stack(comp)
    inn = ut_innovation(means, covs, h, R, params, residual)
    return _single_update(comp, means, inn, z)


# ---------------------------------------------------------------------------
# mixtures


class Mixture:
    """Weighted Gaussian mixture stored as stacked arrays.

    Arrays are made read-only at construction; operations return new
    mixtures.
    """

    __slots__ = ("log_weights", "means", "covs")

    def __init__(self, log_weights, means, covs):
        log_weights = np.asarray(log_weights, dtype=float).reshape(-1)
        means = np.asarray(means, dtype=float)
        covs = np.asarray(covs, dtype=float)
        if means.ndim != 2 or covs.ndim != 3 or len(means) != len(log_weights) or len(covs) != len(means):
            raise ConfigurationError("inconsistent mixture arrays")
        for a in (log_weights, means, covs):
            a.flags.writeable = False
        self.log_weights = log_weights
        self.means = means
        self.covs = covs

    @classmethod
    def empty(cls, dim: int) -> "Mixture":
        return cls(np.zeros(0), np.zeros((0, dim)), np.zeros((0, dim, dim)))

    @classmethod
    def from_components(cls, comps: Sequence[GaussianComponent], dim: Optional[int] = None) -> "Mixture":
        if not comps:
            if dim is None:
                raise ConfigurationError("dimension required for an empty mixture")
            return cls.empty(dim)
        return cls([c.log_weight for c in comps], np.stack([c.mean for c in comps]), np.stack([c.cov for c in comps]))

    @property
    def components(self) -> list[GaussianComponent]:
        return [GaussianComponent(w, m, P) for w, m, P in zip(self.log_weights, self.means, self.covs)]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def __len__(self):
        return len(self.log_weights)

    def log_mass(self) -> float:
        return float(logsumexp(self.log_weights)) if len(self) else -np.inf

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        return moment_match(self.log_weights, self.means, self.covs)

    def __repr__(self):
        return f"Mixture(n={len(self)}, dim={self.dim}, log_mass={self.log_mass():.6g})"


def moment_match(log_weights, means, covs):
    """Mean and covariance of a (not necessarily normalized) mixture."""
    w = np.exp(log_weights - logsumexp(log_weights))
    mean = w @ means
    d = means - mean
    cov = np.einsum("n,nij->ij", w, covs) + np.einsum("n,ni,nj->ij", w, d, d)
    return mean, symmetrize(cov)


def prune_merge(mix: Mixture, prune_thresh: float = 1e-5, merge_thresh: float = 4.0,
                max_comp: int = 10) -> Mixture:
    """Prune, merge and cap a mixture, keeping its total mass.

    Components whose normalized weight is below ``prune_thresh`` are dropped.
    The heaviest remaining component then absorbs, by moment matching, every
    component within squared Mahalanobis distance ``merge_thresh`` of it
    (measured with its own covariance), and so on greedily.  At most
    ``max_comp`` of the heaviest merged components survive.
    """
    if prune_thresh < 0 or merge_thresh < 0:
        raise ConfigurationError("thresholds must be nonnegative")
    if len(mix) == 0:
        return mix
    lw, means, covs, _ = reduce_grouped(mix.log_weights, mix.means, mix.covs, np.zeros(len(mix), dtype=int),
                                        prune_thresh, merge_thresh, max_comp)
    if len(lw) == 0:
        return Mixture.empty(mix.dim)
    return Mixture(lw, means, covs)


def group_log_mass(lw, groups):
    """Log mass of every group of a group-sorted weight vector.

    Returns (group labels, log masses, index into labels for each element).
    """
    labels, starts = np.unique(groups, return_index=True)
    peak = np.maximum.reduceat(lw, starts)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    idx = np.searchsorted(labels, groups)
    with np.errstate(divide="ignore"):
        mass = np.log(np.add.reduceat(np.exp(lw - peak[idx]), starts)) + peak
    return labels, mass, idx


def _rank_in_group(groups):
    """Position of each element inside its run of equal (sorted) groups."""
    return np.arange(len(groups)) - np.searchsorted(groups, groups)


def reduce_grouped(lw, means, covs, groups, prune_thresh, merge_thresh, max_comp):
    """:func:`prune_merge` applied independently to every group of components.

    ``groups`` is a sorted integer array.  Each group keeps its own total mass;
    groups without mass disappear.  All groups are processed together: the
    greedy merge visits the j-th heaviest survivor of every group at once.
    Returns (log weights, means, covs, groups), sorted by group and then by
    decreasing weight.
    """
    lw = np.asarray(lw, dtype=float)
    groups = np.asarray(groups, dtype=np.int64)
    if len(lw) == 0:
        return lw, means, covs, groups
    labels, total, idx = group_log_mass(lw, groups)
    rel = lw - total[idx]
    keep = np.isfinite(rel)
    if prune_thresh > 0:
        keep &= rel >= math.log(prune_thresh)
    order = np.lexsort((-rel, groups))
    order = order[keep[order]]
    rel, means, covs, groups = rel[order], means[order], covs[order], groups[order]
    merged = False
    if merge_thresh > 0 and len(rel) > 1:
        rank = _rank_in_group(groups)
        gid = np.searchsorted(labels, groups)
        S = int(rank.max()) + 1
        if S > 1:
            # padded (group, slot) layout; d2[g, j, i] is the squared distance
            # of slot i from slot j in slot j's metric
            G = len(labels)
            slot = np.full((G, S), -1)
            slot[gid, rank] = np.arange(len(rel))
            valid = slot >= 0
            n = means.shape[1]
            pm = np.zeros((G, S, n))
            pm[valid] = means[slot[valid]]
            pinv = np.broadcast_to(np.eye(n), (G, S, n, n)).copy()
            pinv[valid] = np.linalg.inv(covs[slot[valid]])
            d = pm[:, None, :, :] - pm[:, :, None, :]
            d2 = np.einsum("gjia,gjab,gjib->gji", d, pinv, d)
            remaining = valid.copy()
            leader = np.full((G, S), -1)
            for j in range(S):
                active = remaining[:, j]
                if not active.any():
                    continue
                close = remaining & (d2[:, j, :] <= merge_thresh) & active[:, None]
                close[:, j] |= active
                leader[close] = j
                remaining &= ~close
            lead = slot[gid, leader[gid, rank]]  # element index of each element's leader
            if np.any(lead != np.arange(len(rel))):
                merged = True
                w = np.exp(rel - rel[lead])
                cl_order = np.argsort(lead, kind="stable")
                heads, starts = np.unique(lead[cl_order], return_index=True)
                ws = w[cl_order]
                mass = np.add.reduceat(ws, starts)
                mean = np.add.reduceat(ws[:, None] * means[cl_order], starts) / mass[:, None]
                dev = means[cl_order] - np.repeat(mean, np.diff(np.append(starts, len(ws))), axis=0)
                spread = covs[cl_order] + dev[:, :, None] * dev[:, None, :]
                cov = np.add.reduceat(ws[:, None, None] * spread, starts) / mass[:, None, None]
                rel = rel[heads] + np.log(mass)
                means, covs, groups = mean, symmetrize(cov), groups[heads]
                order = np.lexsort((-rel, groups))
                rel, means, covs, groups = rel[order], means[order], covs[order], groups[order]
    if max_comp is not None and len(rel) > max_comp:
        sel = _rank_in_group(groups) < max_comp
        rel, means, covs, groups = rel[sel], means[sel], covs[sel], groups[sel]
    _, kept, kidx = group_log_mass(rel, groups)
    rel = rel - kept[kidx] + total[np.searchsorted(labels, groups)]
    return rel, means, condition(covs) if merged else covs, groups


def log_normalize(log_weights) -> np.ndarray:
    log_weights = np.asarray(log_weights, dtype=float)
    return log_weights - logsumexp(log_weights)
