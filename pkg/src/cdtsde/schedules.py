"""Variance-preserving noise schedules and sampling time grids.

Steps are indexed ``0..T``.  Index 0 is the clean state: ``beta[0] = 0``,
``alpha_bar[0] = 1``, ``sigma[0] = 0`` and ``rho[0] = 1``.  Continuous time
``u`` lives on ``[0, 1]`` with grid points ``u_k = k / T``; between grid
points ``alpha_bar`` is interpolated log-linearly, so the drift rate is
piecewise constant.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cdtsde.errors import ParameterError, ScheduleError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        for arr in (self.beta, self.alpha, self.alpha_bar, self.sigma, self.rho):
            arr.flags.writeable = False

    @property
    def sqrt_alpha_bar(self) -> np.ndarray:
        return np.sqrt(self.alpha_bar)

    def log_alpha_bar_at(self, tau):
        """Log-linear interpolation of ``ln alpha_bar`` at fractional step ``tau``."""
        tau = np.asarray(tau, dtype=np.float64)
        log_ab = np.log(self.alpha_bar)
        return np.interp(tau, np.arange(self.T + 1), log_ab)

    def alpha_bar_at(self, tau):
        return np.exp(self.log_alpha_bar_at(tau))

    def sigma_at(self, tau):
        return np.sqrt(-np.expm1(self.log_alpha_bar_at(tau)))

    def beta_continuous(self, tau):
        """Continuous-time rate ``beta(u) = -T ln alpha_k`` on the segment holding ``tau``."""
        k = _segment_index(self.T, np.asarray(tau, dtype=np.float64))
        return -self.T * np.log(self.alpha[k])


def from_betas(betas) -> NoiseSchedule:
    """Build a schedule from explicit per-step rates ``beta_1..beta_T``."""
    b = np.asarray(betas, dtype=np.float64)
    if b.ndim != 1 or b.size < 2:
        raise ParameterError("T", "need at least two steps")
    if np.any(b <= 0) or np.any(b >= 1):
        raise ParameterError("beta", "every rate must lie in (0, 1)")
    T = b.size
    beta = np.concatenate([[0.0], b])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(1.0 - alpha_bar)
    rho = np.ones(T + 1)
    rho[1:] = np.sqrt(alpha_bar[1:] / alpha_bar[:-1])
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma, rho=rho)


def make_vp_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 2e-2) -> NoiseSchedule:
    """Linear beta ramp from ``beta_min`` (step 1) to ``beta_max`` (step T)."""
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ParameterError("T", f"must be an integer >= 2, got {T!r}")
    if not 0 < beta_min < 1:
        raise ParameterError("beta_min", f"must lie in (0, 1), got {beta_min!r}")
    if not 0 < beta_max < 1:
        raise ParameterError("beta_max", f"must lie in (0, 1), got {beta_max!r}")
    if beta_min > beta_max:
        raise ParameterError("beta_min", "must not exceed beta_max")
    return from_betas(np.linspace(beta_min, beta_max, int(T)))


def _segment_index(T: int, tau: np.ndarray) -> np.ndarray:
    # segment (k-1, k] maps to k; tau = 0 uses the first segment
    k = np.ceil(tau).astype(np.int64)
    return np.clip(k, 1, T)


def continuous_coefficients(s: NoiseSchedule, u, tol: float = 1e-12):
    """Return ``(f(u), g(u))`` of the forward SDE at continuous time ``u`` in ``[0, 1]``.

    ``f = d/du ln sqrt(alpha_bar)`` and ``g = sqrt(d sigma^2/du - 2 sigma^2 f)``.
    Under log-linear interpolation ``g^2 = -2 f`` holds exactly on every segment.
    """
    u = np.asarray(u, dtype=np.float64)
    if np.any(u < 0) or np.any(u > 1):
        raise ParameterError("u", "continuous time must lie in [0, 1]")
    tau = u * s.T
    k = _segment_index(s.T, tau)
    f = 0.5 * s.T * np.log(s.alpha[k])
    ab = s.alpha_bar_at(tau)
    dsigma2 = -2.0 * f * ab
    g2 = dsigma2 - 2.0 * (1.0 - ab) * f
    if np.any(g2 < -tol):
        raise ScheduleError(f"negative squared diffusion rate {np.min(g2):.3e}")
    return f, np.sqrt(np.maximum(g2, 0.0))


@dataclass(frozen=True)
class TimeGrid:
    indices: tuple
    t1: int

    def __post_init__(self):
        idx = self.indices
        if idx[0] != self.t1 or idx[-1] != 0:
            raise ScheduleError("grid must run from t1 down to 0")
        if any(a <= b for a, b in zip(idx[:-1], idx[1:])):
            raise ScheduleError("grid indices must be strictly decreasing")

    def pairs(self):
        """Successive ``(s, t)`` pairs, ``s > t``."""
        return list(zip(self.indices[:-1], self.indices[1:]))

    def __len__(self):
        return len(self.indices)


def make_spaced_grid(s: NoiseSchedule, N: int, t1: int) -> TimeGrid:
    """``N + 1`` indices spaced uniformly in index space from ``t1`` down to 0."""
    if not 1 <= t1 < s.T:
        raise ParameterError("t1", f"must satisfy 1 <= t1 < T={s.T}, got {t1}")
    if N < 1:
        raise ParameterError("N", "need at least one step")
    if N > t1:
        raise ScheduleError(f"infeasible grid: N={N} exceeds t1={t1}")
    raw = np.linspace(t1, 0, N + 1)
    idx = np.floor(raw + 0.5).astype(int)
    return TimeGrid(indices=tuple(int(i) for i in idx), t1=int(t1))


def schedule_to_csv(s: NoiseSchedule, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "beta", "alpha_bar", "sigma"])
        for t in range(s.T + 1):
            w.writerow([t, repr(float(s.beta[t])), repr(float(s.alpha_bar[t])), repr(float(s.sigma[t]))])
