"""Data-prediction models and the joint score-matching trainer.

A predictor maps ``(x_t, x_src, t)`` to an estimate of the clean target.
Two closed-form oracles serve as test fixtures; :class:`ToyNet` is a small
trainable convolutional model.  The network emits a noise estimate, which
is converted to a clean-target estimate with :func:`eps_to_x0`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from cdtsde.errors import DimensionError, ParameterError, TrainingError
from cdtsde.forward import DomainPair
from cdtsde.io import atomic_open
from cdtsde.mixfield import (
    DEFAULT_EPS,
    ChannelPoly,
    MixField,
    ModNet,
    build_mixfield_channel_poly,
    build_mixfield_dynamic,
    build_mixfield_linear,
    channel_poly_lambda,
    dynamic_lambda,
    position_encoding,
)
from cdtsde.sampler import eps_to_x0, signal_noise
from cdtsde.schedules import NoiseSchedule

KINDS = ("oracle_pair", "gaussian_posterior", "trained")


@dataclass(frozen=True)
class Predictor:
    """Callable wrapper ``(x_t, x_src, t) -> pred_x0`` tagged with its kind."""

    fn: Callable
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError("kind", f"unknown predictor kind {self.kind!r}")

    def __call__(self, x_t, x_src, t):
        return self.fn(x_t, x_src, t)


def oracle_pair_predictor(pair: DomainPair) -> Predictor:
    tgt = np.asarray(pair.x_tgt, dtype=np.float64)

    def fn(x_t, x_src, t):
        return np.broadcast_to(tgt, np.broadcast_shapes(np.shape(x_t), tgt.shape))

    return Predictor(fn, "oracle_pair")


def _field_at(L: MixField, t):
    return L.at(int(t)) if float(t) == int(t) else L.at_continuous(t)


def posterior_gain(a, sig, lam, tau2):
    """Per-cell gain ``k`` of the linear-Gaussian posterior mean."""
    u = a * (1.0 - lam)
    return u * tau2 / (u ** 2 * tau2 + sig ** 2)


def gaussian_posterior_predictor(mu0, tau2: float, L: MixField, sched: NoiseSchedule) -> Predictor:
    """Posterior mean of ``x_0`` when ``x_0 ~ N(mu0, tau2 I)`` independently per cell."""
    if not tau2 > 0:
        raise ParameterError("tau2", "prior variance must be positive")
    mu0 = np.asarray(mu0, dtype=np.float64)

    def fn(x_t, x_src, t):
        a, sig = signal_noise(sched, t)
        lam = _field_at(L, t)
        k = posterior_gain(a, sig, lam, tau2)
        return mu0 + k * (x_t - a * (lam * x_src + (1.0 - lam) * mu0))

    return Predictor(fn, "gaussian_posterior")


# --- trainable model ----------------------------------------------------------


def time_embedding(t: torch.Tensor, T: int, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of ``t / T`` with geometric frequencies; shape ``(B, dim)``."""
    half = dim // 2
    u = t.reshape(-1, 1) / T
    freqs = math.pi * 2.0 ** torch.arange(half, dtype=u.dtype)
    return torch.cat([torch.sin(freqs * u), torch.cos(freqs * u)], dim=1)


class ToyNet(nn.Module):
    """Dilated conv stack over ``[x_t, x_src, emb(t)]`` emitting a noise estimate."""

    def __init__(self, C: int, width: int = 32, emb_dim: int = 8, T: int = 1000,
                 dilations: Sequence[int] = (1, 2, 4, 1)):
        super().__init__()
        if emb_dim % 2:
            raise ParameterError("emb_dim", "must be even")
        self.C, self.width, self.emb_dim, self.T = C, width, emb_dim, T
        self.dilations = tuple(dilations)
        chans = [2 * C + emb_dim] + [width] * len(self.dilations)
        self.body = nn.ModuleList(
            nn.Conv2d(cin, cout, 3, padding=d, dilation=d)
            for cin, cout, d in zip(chans[:-1], chans[1:], self.dilations)
        )
        self.head = nn.Conv2d(width, C, 1)

    def forward(self, x_t: torch.Tensor, x_src: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        B, _, H, W = x_t.shape
        emb = time_embedding(t.to(x_t.dtype), self.T, self.emb_dim)
        z = torch.cat([x_t, x_src, emb[:, :, None, None].expand(B, self.emb_dim, H, W)], dim=1)
        for conv in self.body:
            z = F.silu(conv(z))
        return self.head(z)


def toy_predictor_init(seed: int, C: int, width: int = 32, T: int = 1000) -> ToyNet:
    """Seeded ToyNet with fan-in scaled normal weights and zero biases."""
    net = ToyNet(C, width=width, T=T)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for conv in list(net.body) + [net.head]:
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(1.0 / fan_in))
            conv.bias.zero_()
        # small head keeps the untrained noise estimate near zero
        net.head.weight.mul_(0.1)
    return net


def trained_predictor(net: ToyNet, L: MixField, sched: NoiseSchedule, clip: Optional[float] = 1.0) -> Predictor:
    """Wrap a noise-estimating network as a clean-target predictor for field ``L``.

    Where ``L`` is close to 1 the conversion divides by ``1 - L`` and
    amplifies small noise errors, so the estimate is clipped to
    ``[-clip, clip]`` (the data range).  ``clip=None`` disables this.
    """
    dtype = next(net.parameters()).dtype

    def fn(x_t, x_src, t):
        x_t = np.asarray(x_t, dtype=np.float64)
        x_src = np.asarray(x_src, dtype=np.float64)
        batched = x_t.ndim == 4
        xb = x_t if batched else x_t[None]
        sb = np.broadcast_to(x_src, xb.shape)
        with torch.no_grad():
            eps = net(torch.as_tensor(xb, dtype=dtype), torch.tensor(sb, dtype=dtype),
                      torch.full((xb.shape[0],), float(t), dtype=dtype))
        eps = eps.double().numpy()
        out = eps_to_x0(xb, eps, _field_at(L, t), sb, sched, t)
        if clip is not None:
            out = np.clip(out, -clip, clip)
        return out if batched else out[0]

    return Predictor(fn, "trained")


# --- training -----------------------------------------------------------------

Mixer = Union[ModNet, ChannelPoly, MixField]


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 2e-3
    mixer_lr_mult: float = 10.0
    batch: int = 16
    seed: int = 0
    optimizer: str = "adamw"
    momentum: float = 0.9
    weight_decay: float = 0.0
    eps: float = DEFAULT_EPS
    mixer_loss: str = "noise"

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError("steps", "must be >= 1")
        if not self.lr > 0:
            raise ParameterError("lr", "must be positive")
        if not self.mixer_lr_mult > 0:
            raise ParameterError("mixer_lr_mult", "must be positive")
        if self.batch < 1:
            raise ParameterError("batch", "must be >= 1")
        if self.mixer_loss not in ("noise", "reference"):
            raise ParameterError("mixer_loss", f"unknown mixer loss {self.mixer_loss!r}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ParameterError("optimizer", f"unknown optimizer {self.optimizer!r}")


def mixer_lambda(mixer: Mixer, t: torch.Tensor, T: int, shape, eps: float = DEFAULT_EPS,
                 dtype=torch.float32) -> torch.Tensor:
    """Field values at integer steps ``t`` as a ``(B, C, H, W)``-broadcastable tensor."""
    C, H, W = shape
    if isinstance(mixer, MixField):
        if mixer.T != T:
            raise DimensionError(f"field has T={mixer.T}, schedule has T={T}")
        return torch.as_tensor(mixer.values[t.numpy()], dtype=dtype)
    if isinstance(mixer, ModNet):
        pe = torch.as_tensor(position_encoding(H, W), dtype=dtype)
        return dynamic_lambda(mixer, t, T, pe, eps)
    if isinstance(mixer, ChannelPoly):
        return channel_poly_lambda(mixer, t, T, eps)
    raise ParameterError("mixer", f"unsupported mixer {type(mixer).__name__}")


def build_field(mixer: Mixer, sched: NoiseSchedule, shape, eps: float = DEFAULT_EPS) -> MixField:
    C, H, W = shape
    if isinstance(mixer, MixField):
        return mixer
    if isinstance(mixer, ModNet):
        return build_mixfield_dynamic(mixer, sched, C, H, W, eps)
    return build_mixfield_channel_poly(mixer, sched, C, H, W, eps)


def training_loss(net: ToyNet, mixer: Mixer, sched: NoiseSchedule, x_src: torch.Tensor, x_tgt: torch.Tensor,
                  t: torch.Tensor, noise: torch.Tensor, eps: float = DEFAULT_EPS,
                  reference: Optional[MixField] = None) -> torch.Tensor:
    """Mean squared noise-estimation error at steps ``t`` (each in ``1..T``).

    With a ``reference`` field the per-cell error is rescaled by
    ``((1 - L_ref) / (1 - L))^2``.  That is the clean-target error under the
    fixed weight ``alpha_bar (1 - L_ref)^2 / sigma^2``: it equals the plain
    noise loss when ``L = L_ref`` and stops a trainable field from drifting
    towards ``L = 1``, where the noise becomes trivially identifiable from
    ``x_src`` while the target signal vanishes.
    """
    dtype = x_src.dtype
    lam = mixer_lambda(mixer, t, sched.T, x_src.shape[1:], eps, dtype)
    a = torch.as_tensor(np.sqrt(sched.alpha_bar[t.numpy()]), dtype=dtype).view(-1, 1, 1, 1)
    sig = torch.as_tensor(sched.sigma[t.numpy()], dtype=dtype).view(-1, 1, 1, 1)
    d = lam * x_src + (1.0 - lam) * x_tgt
    x_t = a * d + sig * noise
    err = (net(x_t, x_src, t) - noise) ** 2
    if reference is not None:
        ref = torch.as_tensor(reference.values[t.numpy()], dtype=dtype)
        at_end = (t == sched.T).view(-1, 1, 1, 1)
        w = torch.where(at_end, torch.ones_like(lam), (1.0 - ref) / torch.where(at_end, torch.ones_like(lam), 1.0 - lam))
        err = err * w ** 2
    return torch.mean(err)


@dataclass
class TrainResult:
    net: ToyNet
    mixer: Mixer
    losses: np.ndarray = field(repr=False)

    def field(self, sched: NoiseSchedule, shape, eps: float = DEFAULT_EPS) -> MixField:
        return build_field(self.mixer, sched, shape, eps)


def _stack(dataset: Sequence[DomainPair]):
    if not dataset:
        raise ParameterError("dataset", "must not be empty")
    src = np.stack([np.asarray(p.x_src, dtype=np.float32) for p in dataset])
    tgt = np.stack([np.asarray(p.x_tgt, dtype=np.float32) for p in dataset])
    if src.ndim != 4:
        raise DimensionError(f"pairs must be (C, H, W) images, got {src.shape[1:]}")
    return torch.from_numpy(src), torch.from_numpy(tgt)


def train_score_matching(dataset: Sequence[DomainPair], net: ToyNet, mixer: Mixer, sched: NoiseSchedule,
                         cfg: TrainConfig, on_step: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Jointly fit the noise estimator and (if trainable) the mixing field.

    Each step draws a batch of pairs, a step index ``k`` uniform on
    ``0..T-1`` (schedule entry ``k + 1``), and standard normal noise, all
    from one numpy generator seeded by ``cfg.seed``.  Mixer parameters use
    the learning rate ``cfg.lr * cfg.mixer_lr_mult``.  With
    ``cfg.mixer_loss == "reference"`` a trainable mixer is fitted under the
    reference-weighted loss of :func:`training_loss`, with the squashed
    linear field as reference.
    """
    src, tgt = _stack(dataset)
    reference = None
    if isinstance(mixer, nn.Module) and cfg.mixer_loss == "reference":
        reference = build_mixfield_linear(sched, eps=cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    groups = [{"params": list(net.parameters()), "lr": cfg.lr}]
    if isinstance(mixer, nn.Module):
        groups.append({"params": list(mixer.parameters()), "lr": cfg.lr * cfg.mixer_lr_mult})
    if cfg.optimizer == "adamw":
        opt = torch.optim.AdamW(groups, weight_decay=cfg.weight_decay)
    else:
        opt = torch.optim.SGD(groups, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    n = src.shape[0]
    losses = np.empty(cfg.steps)
    for step in range(cfg.steps):
        idx = rng.integers(0, n, size=cfg.batch)
        t = torch.from_numpy(rng.integers(0, sched.T, size=cfg.batch) + 1)
        noise = torch.from_numpy(rng.standard_normal((cfg.batch,) + tuple(src.shape[1:])).astype(np.float32))
        loss = training_loss(net, mixer, sched, src[idx], tgt[idx], t, noise, cfg.eps, reference)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {step}; steps in batch {t.tolist()}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses[step] = value
        if on_step is not None:
            on_step(step, value)
    return TrainResult(net=net, mixer=mixer, losses=losses)


def smooth_losses(losses, window: int = 50) -> np.ndarray:
    """Trailing moving average; the first entries average what is available."""
    x = np.asarray(losses, dtype=np.float64)
    c = np.cumsum(np.concatenate([[0.0], x]))
    i = np.arange(1, x.size + 1)
    lo = np.maximum(i - window, 0)
    return (c[i] - c[lo]) / (i - lo)


def write_loss_csv(losses, path, window: int = 50) -> None:
    sm = smooth_losses(losses, window)
    with atomic_open(path, "w") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "smoothed_loss"])
        for k, (l, s) in enumerate(zip(losses, sm)):
            w.writerow([k, repr(float(l)), repr(float(s))])
