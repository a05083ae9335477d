"""Mixing-field trajectories: linear, per-channel polynomial and dynamic spatial.

A mixing field assigns every step ``t`` in ``0..T`` a weight map of shape
``(C, H, W)``.  Weight 0 selects the target image and weight 1 the source.
All variants clamp the endpoints exactly (``0`` at ``t = 0``, ``1`` at
``t = T``) and keep interior values inside ``[eps, 1 - eps]``.

The small networks (:class:`ModNet`, :class:`ChannelPoly`) are torch modules
so that the trainer can differentiate through the field.  Built fields are
plain float64 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
from scipy.special import expit
from torch import nn

from cdtsde.errors import DimensionError, ParameterError
from cdtsde.schedules import NoiseSchedule

DEFAULT_EPS = 1e-4
VARIANTS = ("linear", "channel_poly", "dynamic")


@dataclass(frozen=True)
class MixField:
    values: np.ndarray  # (T + 1, C, H, W)
    variant: str
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.values.ndim != 4:
            raise DimensionError(f"mixing field must be 4-d (T+1, C, H, W), got {self.values.shape}")
        if self.variant not in VARIANTS:
            raise ParameterError("variant", f"unknown variant {self.variant!r}")
        self.values.flags.writeable = False

    @property
    def T(self) -> int:
        return self.values.shape[0] - 1

    @property
    def shape(self) -> tuple:
        return self.values.shape[1:]

    def at(self, t: int) -> np.ndarray:
        return self.values[int(t)]

    def at_continuous(self, tau) -> np.ndarray:
        """Piecewise-linear interpolation between integer steps."""
        tau = float(tau)
        if tau <= 0:
            return self.values[0]
        if tau >= self.T:
            return self.values[self.T]
        k = int(np.floor(tau))
        w = tau - k
        if w == 0.0:
            return self.values[k]
        return (1.0 - w) * self.values[k] + w * self.values[k + 1]

    def rate(self, tau) -> np.ndarray:
        """Time derivative per unit of continuous time ``u = tau / T`` (segment slope)."""
        k = int(np.clip(np.ceil(float(tau)), 1, self.T))
        return (self.values[k] - self.values[k - 1]) * self.T

    def truncated(self, t1: int) -> "MixField":
        """Copy with the weight pinned to 1 for every ``t >= t1``."""
        if not 1 <= t1 <= self.T:
            raise ParameterError("t1", f"must lie in [1, T], got {t1}")
        vals = np.array(self.values)
        vals[t1:] = 1.0
        return replace(self, values=vals)


# --- scalar building blocks -------------------------------------------------


def position_encoding(H: int, W: int) -> np.ndarray:
    """Fixed sinusoidal encoding, shape ``(4, H, W)``: ``[sin pi y, cos pi y, sin pi x, cos pi x]``.

    ``x`` runs along the width index and ``y`` along the height index, both
    normalised to ``[-1, 1]``.  A degenerate axis of length 1 maps to ``-1``.
    """
    x = 2.0 * np.arange(W) / (W - 1) - 1.0 if W > 1 else np.full(1, -1.0)
    y = 2.0 * np.arange(H) / (H - 1) - 1.0 if H > 1 else np.full(1, -1.0)
    yy, xx = np.meshgrid(y, x, indexing="ij")
    return np.stack([np.sin(np.pi * yy), np.cos(np.pi * yy), np.sin(np.pi * xx), np.cos(np.pi * xx)])


def boundary_interp(lam_lin, g):
    """``lam_lin * (1 + g * (1 - lam_lin))``: fixes 0 and 1 for any modulation ``g``."""
    return lam_lin * (1.0 + g * (1.0 - lam_lin))


def squash_constants(eps: float) -> tuple[float, float]:
    """Return ``(alpha, beta)`` with ``beta = -logit(eps)`` and ``alpha = 2 beta``."""
    if not 0 < eps < 0.5:
        raise ParameterError("eps", f"must lie in (0, 0.5), got {eps}")
    beta = float(np.log1p(-eps) - np.log(eps))
    return 2.0 * beta, beta


def logistic_squash(f, eps: float = DEFAULT_EPS):
    """Calibrated logistic map sending 0 to ``eps`` and 1 to ``1 - eps``."""
    alpha, beta = squash_constants(eps)
    z = alpha * f - beta
    if isinstance(z, torch.Tensor):
        return torch.sigmoid(z)
    return expit(z)


# --- modulation network -----------------------------------------------------


class ModNet(nn.Module):
    """Light conv map ``(lam_lin, posenc) -> h`` in ``(0, 1)^{C x H x W}``.

    Channel widths ``1 + 4 -> 8 -> 16 -> C`` with 3x3 stride-1 kernels and tanh
    between layers.  With ``zero_final`` the last layer starts at zero, so the
    field starts out as the squashed linear schedule.
    """

    def __init__(self, C: int, seed: int = 0, zero_final: bool = True):
        super().__init__()
        self.C = C
        self.conv1 = nn.Conv2d(5, 8, 3, padding=1)
        self.conv2 = nn.Conv2d(8, 16, 3, padding=1)
        self.conv3 = nn.Conv2d(16, C, 3, padding=1)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2, self.conv3):
                fan_in = conv.in_channels * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) / np.sqrt(fan_in))
                conv.bias.zero_()
            if zero_final:
                self.conv3.weight.zero_()

    def forward(self, lam_lin: torch.Tensor, posenc: torch.Tensor) -> torch.Tensor:
        # lam_lin: (B,), posenc: (4, H, W)
        B = lam_lin.shape[0]
        H, W = posenc.shape[-2:]
        base = lam_lin.to(posenc.dtype).view(B, 1, 1, 1).expand(B, 1, H, W)
        z = torch.cat([base, posenc.unsqueeze(0).expand(B, 4, H, W)], dim=1)
        z = torch.tanh(self.conv1(z))
        z = torch.tanh(self.conv2(z))
        return torch.sigmoid(self.conv3(z))


def modnet_forward(net: ModNet, lam_lin, posenc):
    """Evaluate the modulation network.

    Accepts numpy or torch inputs.  ``lam_lin`` is a scalar or a 1-d batch of
    base values; the result has shape ``(C, H, W)`` or ``(B, C, H, W)``.
    Numpy inputs give a float64 numpy result.
    """
    as_numpy = not isinstance(posenc, torch.Tensor)
    pe = torch.as_tensor(np.asarray(posenc) if as_numpy else posenc)
    if pe.ndim != 3 or pe.shape[0] != 4:
        raise DimensionError(f"position encoding must have shape (4, H, W), got {tuple(pe.shape)}")
    dtype = next(net.parameters()).dtype
    pe = pe.to(dtype)
    scalar = np.ndim(lam_lin) == 0
    lam = torch.as_tensor(lam_lin, dtype=dtype).reshape(-1)
    if as_numpy:
        with torch.no_grad():
            h = net(lam, pe)
        h = h.double().numpy()
    else:
        h = net(lam, pe)
    return h[0] if scalar else h


def dynamic_lambda(net: ModNet, t: torch.Tensor, T: int, posenc: torch.Tensor, eps: float = DEFAULT_EPS):
    """Differentiable field values at a batch of integer steps ``t``; shape ``(B, C, H, W)``."""
    lam_lin = t.to(posenc.dtype) / T
    h = net(lam_lin, posenc)
    g = 2.0 * h - 1.0
    lam_b = lam_lin.view(-1, 1, 1, 1)
    out = logistic_squash(boundary_interp(lam_b, g), eps)
    tb = t.view(-1, 1, 1, 1)
    out = torch.where(tb <= 0, torch.zeros_like(out), out)
    return torch.where(tb >= T, torch.ones_like(out), out)


# --- per-channel polynomial --------------------------------------------------


class ChannelPoly(nn.Module):
    """Per-channel polynomial ``lambda_c(eta) = sum_i a[c, i] eta^i``; starts at the identity."""

    def __init__(self, C: int, degree: int = 3):
        super().__init__()
        if degree < 1:
            raise ParameterError("degree", "must be >= 1")
        a = torch.zeros(C, degree + 1)
        a[:, 1] = 1.0
        self.coeffs = nn.Parameter(a)

    @property
    def degree(self) -> int:
        return self.coeffs.shape[1] - 1

    def forward(self, eta: torch.Tensor) -> torch.Tensor:
        powers = eta.to(self.coeffs.dtype).view(-1, 1) ** torch.arange(self.degree + 1, dtype=self.coeffs.dtype)
        return powers @ self.coeffs.T  # (B, C)


def channel_poly_lambda(poly: ChannelPoly, t: torch.Tensor, T: int, eps: float = DEFAULT_EPS):
    """Differentiable per-channel weights at steps ``t``; shape ``(B, C, 1, 1)``."""
    lam = poly(t.to(poly.coeffs.dtype) / T).clamp(eps, 1.0 - eps)
    lam = lam[:, :, None, None]
    tb = t.view(-1, 1, 1, 1)
    lam = torch.where(tb <= 0, torch.zeros_like(lam), lam)
    return torch.where(tb >= T, torch.ones_like(lam), lam)


# --- builders ---------------------------------------------------------------


def _clamp_endpoints(vals: np.ndarray) -> np.ndarray:
    vals[0] = 0.0
    vals[-1] = 1.0
    return vals


def build_mixfield_linear(s: NoiseSchedule, C: int = 1, H: int = 1, W: int = 1,
                          eps: float = DEFAULT_EPS, raw: bool = False) -> MixField:
    """Spatially uniform field from ``t / T``; squashed unless ``raw``."""
    eta = np.arange(s.T + 1, dtype=np.float64) / s.T
    lam = eta if raw else logistic_squash(eta, eps)
    vals = np.broadcast_to(lam[:, None, None, None], (s.T + 1, C, H, W)).copy()
    return MixField(_clamp_endpoints(vals), "linear", eps)


def build_mixfield_channel_poly(params: ChannelPoly, s: NoiseSchedule, C: int, H: int = 1, W: int = 1,
                                eps: float = DEFAULT_EPS) -> MixField:
    if params.coeffs.shape[0] != C:
        raise DimensionError(f"polynomial has {params.coeffs.shape[0]} channels, expected {C}")
    a = params.coeffs.detach().double().numpy()
    eta = np.arange(s.T + 1, dtype=np.float64) / s.T
    lam = np.polynomial.polynomial.polyval(eta, a.T).T  # (T+1, C)
    lam = np.clip(lam, eps, 1.0 - eps)
    vals = np.broadcast_to(lam[:, :, None, None], (s.T + 1, C, H, W)).copy()
    return MixField(_clamp_endpoints(vals), "channel_poly", eps)


def build_mixfield_dynamic(params: ModNet, s: NoiseSchedule, C: int, H: int, W: int,
                           eps: float = DEFAULT_EPS, chunk: int = 256) -> MixField:
    if params.C != C:
        raise DimensionError(f"modulation network emits {params.C} channels, expected {C}")
    pe = position_encoding(H, W)
    vals = np.empty((s.T + 1, C, H, W))
    steps = np.arange(1, s.T)
    for lo in range(0, steps.size, chunk):
        t = steps[lo:lo + chunk]
        lam_lin = t / s.T
        h = modnet_forward(params, lam_lin, pe)
        g = 2.0 * h - 1.0
        f = boundary_interp(lam_lin[:, None, None, None], g)
        vals[t] = logistic_squash(f, eps)
    return MixField(_clamp_endpoints(vals), "dynamic", eps)


def monotonicity_violation_fraction(field: MixField) -> float:
    """Fraction of ``(t, c, p)`` cells where the weight decreases from ``t`` to ``t + 1``."""
    d = np.diff(field.values, axis=0)
    return float(np.mean(d < 0))
