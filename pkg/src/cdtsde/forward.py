"""Domain-mixture forward process.

The forward marginal at step ``t`` is Gaussian with mean
``sqrt(alpha_bar_t) * d_t`` and covariance ``sigma_t^2 I``, where
``d_t = L_t * x_src + (1 - L_t) * x_tgt`` blends source and target with the
mixing field ``L_t``.  Every sampling routine takes an explicit
``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from cdtsde.errors import DimensionError, ParameterError
from cdtsde.mixfield import MixField
from cdtsde.schedules import NoiseSchedule


@dataclass(frozen=True)
class DomainPair:
    x_src: np.ndarray
    x_tgt: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.x_src.shape != self.x_tgt.shape:
            raise DimensionError(f"source {self.x_src.shape} and target {self.x_tgt.shape} differ")
        if self.mask is not None and self.mask.shape != self.x_src.shape[-2:]:
            raise DimensionError(f"mask shape {self.mask.shape} does not match image {self.x_src.shape[-2:]}")

    @property
    def contrast(self) -> np.ndarray:
        return self.x_src - self.x_tgt


def _check(lam, pair: DomainPair):
    try:
        np.broadcast_shapes(np.shape(lam), pair.x_src.shape)
    except ValueError:
        raise DimensionError(f"field {np.shape(lam)} does not fit image {pair.x_src.shape}") from None


def domain_mixture(lam, pair: DomainPair) -> np.ndarray:
    _check(lam, pair)
    return lam * pair.x_src + (1.0 - lam) * pair.x_tgt


def mixture_increment(lam_t, lam_prev, pair: DomainPair) -> np.ndarray:
    """``d_t - d_{t-1}`` written through the field increment."""
    _check(lam_t, pair)
    return (lam_t - lam_prev) * pair.contrast


def _check_step(s: NoiseSchedule, t: int, lo: int):
    if not lo <= t <= s.T:
        raise ParameterError("t", f"must lie in [{lo}, {s.T}], got {t}")


def forward_marginal_sample(s: NoiseSchedule, L: MixField, pair: DomainPair, t: int,
                            rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
    """Draw ``x_t`` from the forward marginal; ``n`` adds a leading sample axis."""
    _check_step(s, t, 1)
    mean = np.sqrt(s.alpha_bar[t]) * domain_mixture(L.at(t), pair)
    shape = mean.shape if n is None else (n,) + mean.shape
    return mean + s.sigma[t] * rng.standard_normal(shape)


def markov_step(s: NoiseSchedule, L: MixField, pair: DomainPair, x_prev: np.ndarray, t: int,
                rng: np.random.Generator) -> np.ndarray:
    """One transition ``x_{t-1} -> x_t`` consistent with the forward marginals."""
    _check_step(s, t, 1)
    inc = mixture_increment(L.at(t), L.at(t - 1), pair)
    mean = s.rho[t] * x_prev + np.sqrt(s.alpha_bar[t]) * inc
    return mean + np.sqrt(1.0 - s.rho[t] ** 2) * rng.standard_normal(np.shape(x_prev))


def markov_chain(s: NoiseSchedule, L: MixField, pair: DomainPair, t: int,
                 rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
    """Run :func:`markov_step` from the clean target ``x_0`` up to step ``t``."""
    _check_step(s, t, 0)
    x = np.array(pair.x_tgt, dtype=np.float64)
    if n is not None:
        x = np.broadcast_to(x, (n,) + x.shape).copy()
    for k in range(1, t + 1):
        x = markov_step(s, L, pair, x, k, rng)
    return x


def truncated_init(s: NoiseSchedule, x_src: np.ndarray, t1: int, rng: np.random.Generator) -> np.ndarray:
    """Source-centred start ``sqrt(alpha_bar_t1) x_src + sigma_t1 z``."""
    if not 1 <= t1 < s.T:
        raise ParameterError("t1", f"must satisfy 1 <= t1 < T={s.T}, got {t1}")
    return np.sqrt(s.alpha_bar[t1]) * x_src + s.sigma[t1] * rng.standard_normal(np.shape(x_src))
