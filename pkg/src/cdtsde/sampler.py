"""Reverse-time generation under the domain-mixture forward process.

Notation per cell: ``a = sqrt(alpha_bar)``, ``U = a (1 - L)`` (effective
signal scale) and ``lam = sigma / U``.  A step from ``s`` down to ``t``
transports the state by ``lam_t^2 / lam_s^2``, adds the closed-form
source drift, and blends in the data prediction.  Coefficients are
evaluated in a form that stays finite when ``L_s = 1`` (start of a
truncated trajectory) as long as ``L_t < 1`` and ``sigma_s > 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from cdtsde.errors import ParameterError, SingularityError
from cdtsde.forward import truncated_init
from cdtsde.mixfield import MixField
from cdtsde.schedules import NoiseSchedule, continuous_coefficients, make_spaced_grid

# (x_t, x_src, t) -> predicted clean target
PredictorFn = Callable[[np.ndarray, np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class Reparam:
    Upsilon: np.ndarray
    lam: np.ndarray


@dataclass(frozen=True)
class SamplerConfig:
    N: int
    t1: int
    stochastic: bool = True
    quadrature_n: int = 8
    solver: str = "first_order"
    init: str = "corollary"

    def __post_init__(self):
        if self.N < 1:
            raise ParameterError("N", "need at least one step")
        if self.t1 < 1:
            raise ParameterError("t1", "must be >= 1")
        if self.solver not in ("first_order", "exact"):
            raise ParameterError("solver", f"unknown solver {self.solver!r}")
        if self.init not in ("corollary", "literal"):
            raise ParameterError("init", f"unknown initialisation {self.init!r}")


def signal_noise(sched: NoiseSchedule, tau):
    """``(sqrt(alpha_bar), sigma)`` at an integer or fractional step; exact table values at integers."""
    if float(tau) == int(tau):
        t = int(tau)
        return np.sqrt(sched.alpha_bar[t]), sched.sigma[t]
    return np.sqrt(sched.alpha_bar_at(tau)), sched.sigma_at(tau)


def state_at(sched: NoiseSchedule, L: MixField, tau):
    """``(a, sigma, L)`` at an integer or fractional step."""
    a, sig = signal_noise(sched, tau)
    lt = L.at(int(tau)) if float(tau) == int(tau) else L.at_continuous(tau)
    return a, sig, lt


def reparam(s: NoiseSchedule, L: MixField, t) -> Reparam:
    a, sig, lt = state_at(s, L, t)
    if np.any(lt >= 1.0):
        raise SingularityError(f"mixing field reaches 1 at t={t}; start from truncated_init instead")
    U = a * (1.0 - lt)
    return Reparam(Upsilon=U, lam=sig / U)


@dataclass(frozen=True)
class StepCoefficients:
    transport: np.ndarray  # multiplies x_s
    drift: np.ndarray  # multiplies x_src
    denoise: np.ndarray  # multiplies the data prediction
    noise_var: np.ndarray  # per-cell variance of the added noise
    kappa: np.ndarray  # lam_t^2 / lam_s^2
    Upsilon_t: np.ndarray


def step_coefficients(sched: NoiseSchedule, L: MixField, s_idx, t_idx) -> StepCoefficients:
    if t_idx > s_idx:
        raise ParameterError("t_idx", f"reverse step needs t <= s, got s={s_idx}, t={t_idx}")
    a_s, sig_s, L_s = state_at(sched, L, s_idx)
    a_t, sig_t, L_t = state_at(sched, L, t_idx)
    if sig_s == 0.0:
        raise SingularityError("cannot step from the clean state (sigma_s = 0)")
    if np.any(L_t >= 1.0):
        raise SingularityError(f"mixing field reaches 1 at t={t_idx}")
    U_s = a_s * (1.0 - L_s)
    U_t = a_t * (1.0 - L_t)
    transport = (sig_t ** 2 * U_s) / (sig_s ** 2 * U_t)
    kappa = transport * U_s / U_t
    drift = a_t * L_t - transport * (a_s * L_s)
    one_minus = 1.0 - kappa
    # a non-monotone field can push kappa above 1; the noise variance is floored at 0
    noise_var = np.maximum(sig_t ** 2 * one_minus, 0.0)
    return StepCoefficients(transport, drift, U_t * one_minus, noise_var, kappa, U_t)


def first_order_step(x_s, x_src, s_idx, t_idx, predictor: PredictorFn, L: MixField, sched: NoiseSchedule,
                     rng: Optional[np.random.Generator] = None, stochastic: bool = True):
    """Advance ``x_s`` to ``x_t`` with the data prediction frozen at ``s``."""
    c = step_coefficients(sched, L, s_idx, t_idx)
    pred = predictor(x_s, x_src, s_idx)
    x_t = c.transport * x_s + c.drift * x_src + c.denoise * pred
    if stochastic:
        x_t = x_t + np.sqrt(c.noise_var) * rng.standard_normal(np.shape(x_t))
    return x_t


def exact_reverse_step(x_s, x_src, s_idx, t_idx, predictor: PredictorFn, L: MixField, sched: NoiseSchedule,
                       rng: Optional[np.random.Generator] = None, quadrature_n: int = 8,
                       stochastic: bool = True):
    """Step using the variation-of-constants solution with a panel quadrature
    for the prediction integral.

    Panels are uniform in time between ``t`` and ``s``.  Each panel weight is
    the exact integral of the kernel ``2 lam_t^2 / lam^3`` over the panel and
    the prediction is evaluated at the panel midpoint with the state frozen
    at ``x_s``.  The quadrature is applied as a correction to the frozen
    prediction, so a prediction that does not vary along the step reproduces
    :func:`first_order_step` exactly.
    """
    if quadrature_n < 1:
        raise ParameterError("quadrature_n", "must be >= 1")
    c = step_coefficients(sched, L, s_idx, t_idx)
    pred_s = predictor(x_s, x_src, s_idx)
    x_t = c.transport * x_s + c.drift * x_src + c.denoise * pred_s
    if s_idx != t_idx:
        taus = np.linspace(t_idx, s_idx, quadrature_n + 1)
        a_t, sig_t, L_t = state_at(sched, L, t_idx)
        U_t = a_t * (1.0 - L_t)
        kappas = [np.ones_like(U_t)]
        for tau in taus[1:-1]:
            a, sig, lt = state_at(sched, L, tau)
            U = a * (1.0 - lt)
            kappas.append((sig_t ** 2 * U ** 2) / (sig ** 2 * U_t ** 2))
        kappas.append(c.kappa)
        corr = 0.0
        for i in range(quadrature_n):
            w = kappas[i] - kappas[i + 1]
            mid = 0.5 * (taus[i] + taus[i + 1])
            corr = corr + w * (predictor(x_s, x_src, mid) - pred_s)
        x_t = x_t + U_t * corr
    if stochastic:
        x_t = x_t + np.sqrt(c.noise_var) * rng.standard_normal(np.shape(x_t))
    return x_t


def sample(predictor: PredictorFn, x_src, cfg: SamplerConfig, L: MixField, sched: NoiseSchedule,
           rng: np.random.Generator, callback: Optional[Callable] = None):
    """Generate from ``x_src`` over the spaced grid from ``cfg.t1`` to 0.

    ``x_src`` may carry leading batch axes.  ``callback(i, t, x)`` sees the
    state after every step.  The output is clipped to ``[-1, 1]`` once, at
    the end.
    """
    grid = make_spaced_grid(sched, cfg.N, cfg.t1)
    x_src = np.asarray(x_src, dtype=np.float64)
    if cfg.init == "corollary":
        x = truncated_init(sched, x_src, cfg.t1, rng)
    else:
        # compatibility: the initial-state line of the reference pseudocode, taken literally
        a, sig, lt = state_at(sched, L, cfg.t1)
        x = a * (1.0 - lt) * x_src + sig * rng.standard_normal(x_src.shape)
    if callback is not None:
        callback(0, cfg.t1, x)
    for i, (s_idx, t_idx) in enumerate(grid.pairs(), start=1):
        if cfg.solver == "exact":
            x = exact_reverse_step(x, x_src, s_idx, t_idx, predictor, L, sched, rng,
                                   cfg.quadrature_n, cfg.stochastic)
        else:
            x = first_order_step(x, x_src, s_idx, t_idx, predictor, L, sched, rng, cfg.stochastic)
        if callback is not None:
            callback(i, t_idx, x)
    return np.clip(x, -1.0, 1.0)


def score_from_data_pred(x_t, pred_x0, lam_t, x_src, s: NoiseSchedule, t):
    """Plug-in score ``-(x_t - a_t d_t) / sigma_t^2`` with the predicted mixture ``d_t``."""
    a, sig = signal_noise(s, t)
    if sig == 0.0:
        raise SingularityError("score undefined at sigma = 0")
    d = lam_t * x_src + (1.0 - lam_t) * pred_x0
    return -(x_t - a * d) / sig ** 2


def eps_to_x0(x_t, eps_pred, lam_t, x_src, s: NoiseSchedule, t):
    """Invert the noise prediction to a clean-target prediction."""
    a, sig = signal_noise(s, t)
    if sig == 0.0:
        raise SingularityError("noise prediction undefined at sigma = 0")
    if np.any(lam_t >= 1.0):
        raise SingularityError(f"mixing field reaches 1 at t={t}; the target is not identifiable")
    d = (x_t - sig * eps_pred) / a
    return (d - lam_t * x_src) / (1.0 - lam_t)


def x0_to_eps(x_t, pred_x0, lam_t, x_src, s: NoiseSchedule, t):
    a, sig = signal_noise(s, t)
    if sig == 0.0:
        raise SingularityError("noise prediction undefined at sigma = 0")
    d = lam_t * x_src + (1.0 - lam_t) * pred_x0
    return (x_t - a * d) / sig


def euler_maruyama_reference(x_init, x_src, t_from, t_to, predictor: PredictorFn, L: MixField,
                             sched: NoiseSchedule, rng: Optional[np.random.Generator], n_substeps: int,
                             stochastic: bool = True):
    """Euler-Maruyama integration of the reverse SDE from step ``t_from`` down to ``t_to``.

    Time runs in continuous units ``u = tau / T``.  The field rate is the
    slope of the piecewise-linear field on the current segment.
    """
    if not t_from > t_to >= 0:
        raise ParameterError("t_to", f"need t_from > t_to >= 0, got {t_from}, {t_to}")
    if n_substeps < 1:
        raise ParameterError("n_substeps", "must be >= 1")
    T = sched.T
    h = (t_from - t_to) / n_substeps
    du = h / T
    x = np.array(x_init, dtype=np.float64)
    for k in range(n_substeps):
        tau = t_from - k * h
        f, g = continuous_coefficients(sched, tau / T)
        a = np.sqrt(sched.alpha_bar_at(tau))
        sig2 = -np.expm1(sched.log_alpha_bar_at(tau))
        lt = L.at_continuous(tau)
        rate = L.rate(tau)
        pred = predictor(x, x_src, tau)
        d = lt * x_src + (1.0 - lt) * pred
        score = -(x - a * d) / sig2
        drift = f * x + a * rate * (x_src - pred) - g ** 2 * score
        x = x - drift * du
        if stochastic:
            x = x + g * np.sqrt(du) * rng.standard_normal(x.shape)
    return x
