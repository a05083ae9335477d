"""Acceptance checks, one test per numbered criterion.

Each test reports a PASS/FAIL line through the ``criterion`` fixture; the
verdicts are repeated in a summary section at the end of the pytest run.
Criteria 10 to 13 share six training runs (two schedule variants, three
seeds) and carry the ``experiment`` marker.
"""

import time

import numpy as np
import pytest
import torch

from cdtsde.energy import homogeneous_instance, reference_instance, verify_strict_domination
from cdtsde.forward import DomainPair, domain_mixture, markov_chain, mixture_increment
from cdtsde.mixfield import (
    ChannelPoly,
    ModNet,
    build_mixfield_channel_poly,
    build_mixfield_dynamic,
    build_mixfield_linear,
    logistic_squash,
)
from cdtsde.predictors import (
    Predictor,
    TrainConfig,
    gaussian_posterior_predictor,
    oracle_pair_predictor,
    posterior_gain,
    smooth_losses,
    toy_predictor_init,
    train_score_matching,
    trained_predictor,
    training_loss,
)
from cdtsde.sampler import SamplerConfig, exact_reverse_step, first_order_step, sample
from cdtsde.schedules import make_spaced_grid, make_vp_schedule
from cdtsde.tasks import SyntheticTaskSpec, gen_dataset, misalign, psnr, seg_metrics

T = 1000
SEEDS = (0, 1, 2)
VARIANTS = ("linear", "dynamic")


@pytest.fixture(scope="module")
def sched():
    return make_vp_schedule(T)


def random_dynamic_field(sched, shape, seed):
    return build_mixfield_dynamic(ModNet(shape[0], seed=seed, zero_final=False), sched, *shape)


def test_c01_logistic_calibration(criterion):
    t0 = time.perf_counter()
    worst = 0.0
    for eps in (1e-2, 1e-4, 1e-6):
        lo, hi = logistic_squash(0.0, eps), logistic_squash(1.0, eps)
        worst = max(worst, abs(lo - eps) / eps, abs(hi - (1 - eps)) / (1 - eps))
    dt = time.perf_counter() - t0
    criterion(1, worst <= 1e-12 and dt < 1, f"max relative error {worst:.2e}, {dt:.3f}s")


def test_c02_endpoint_clamps(criterion, sched):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    eps = 1e-3
    poly = ChannelPoly(2)
    with torch.no_grad():
        poly.coeffs.copy_(torch.tensor(rng.normal(0, 1.5, (2, 4))))
    fields = [build_mixfield_linear(sched, 2, 6, 6, eps=eps),
              build_mixfield_channel_poly(poly, sched, 2, 6, 6, eps=eps),
              build_mixfield_dynamic(ModNet(2, seed=5, zero_final=False), sched, 2, 6, 6, eps=eps)]
    ok = True
    for L in fields:
        v = L.values
        ok &= bool(np.all(v[0] == 0.0) and np.all(v[-1] == 1.0))
        ok &= bool(v[1:-1].min() >= eps and v[1:-1].max() <= 1 - eps)
    dt = time.perf_counter() - t0
    criterion(2, ok and dt < 5, f"linear, channel_poly, dynamic clamped: {ok}, {dt:.2f}s")


def test_c03_forward_marginal_consistency(criterion, sched):
    t0 = time.perf_counter()
    L = random_dynamic_field(sched, (1, 8, 8), 3)
    rng = np.random.default_rng(11)
    pair = DomainPair(rng.uniform(-1, 1, (1, 8, 8)), rng.uniform(-1, 1, (1, 8, 8)))
    n = 20000
    worst_z, ratios = 0.0, []
    for t in (T // 4, T // 2, 3 * T // 4):
        x = markov_chain(sched, L, pair, t, np.random.default_rng(t), n=n)
        mean = np.sqrt(sched.alpha_bar[t]) * domain_mixture(L.at(t), pair)
        se = sched.sigma[t] / np.sqrt(n)
        worst_z = max(worst_z, float(np.max(np.abs(x.mean(0) - mean)) / se))
        ratios.append(x.var(0) / sched.sigma[t] ** 2)
    ratios = np.concatenate([r.ravel() for r in ratios])
    dt = time.perf_counter() - t0
    ok = worst_z < 4 and ratios.min() >= 0.9 and ratios.max() <= 1.1 and dt < 120
    criterion(3, ok, f"max mean gap {worst_z:.2f} SE, variance ratio [{ratios.min():.3f}, {ratios.max():.3f}], "
                     f"{dt:.1f}s")


def test_c04_mixture_increment_identity(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        shape = tuple(rng.integers(1, 6, size=3))
        pair = DomainPair(rng.uniform(-1, 1, shape), rng.uniform(-1, 1, shape))
        a, b = rng.uniform(size=shape), rng.uniform(size=shape)
        lhs = domain_mixture(a, pair) - domain_mixture(b, pair)
        worst = max(worst, float(np.max(np.abs(lhs - mixture_increment(a, b, pair)))))
    dt = time.perf_counter() - t0
    criterion(4, worst < 1e-12 and dt < 1, f"max deviation {worst:.1e} over 100 instances, {dt:.3f}s")


def test_c05_strict_domination(criterion):
    t0 = time.perf_counter()
    ref = verify_strict_domination(*reference_instance())
    homo = verify_strict_domination(*homogeneous_instance())
    cert = ref.descent_certificate
    dt = time.perf_counter() - t0
    ok = (ref.gap >= 0.05 * ref.E_glob and abs(homo.gap) < 1e-3 * homo.E_glob
          and cert["negative"] and cert["linear"] and dt < 60)
    criterion(5, ok, f"reference gap {ref.gap / ref.E_glob:.1%} of E_glob, homogeneous gap "
                     f"{abs(homo.gap) / homo.E_glob:.1e}, certificate dE {cert['delta_E'][0]:.2e} "
                     f"ratio {cert['ratio']:.2f} (10 expected), {dt:.1f}s")


def lambda_ode_euler(x_s, src, s_idx, t_idx, pred, L, sched, n):
    """Forward Euler on the noise-free dynamics of ``y = x / Upsilon`` in ``lam = sigma / Upsilon``."""

    def state(tau):
        a = np.sqrt(sched.alpha_bar_at(tau))
        sig = np.sqrt(-np.expm1(sched.log_alpha_bar_at(tau)))
        lt = L.at_continuous(tau)
        U = a * (1 - lt)
        return U, sig / U, lt

    taus = np.linspace(s_idx, t_idx, n + 1)
    U, lam, lt = state(taus[0])
    y = x_s / U
    for tau, nxt in zip(taus[:-1], taus[1:]):
        U2, lam2, lt2 = state(nxt)
        dlam, dL = lam2 - lam, lt2 - lt
        if np.all(lam > 0):
            phi = pred(U * y, src, tau)
            y = y + 2 / lam * y * dlam + (dL / (1 - lt) ** 2 - lt / (1 - lt) * 2 / lam * dlam) * src \
                - 2 / lam * phi * dlam
        U, lam, lt = U2, lam2, lt2
    return U * y


def test_c06_sampler_exactness(criterion, sched):
    t0 = time.perf_counter()
    L = random_dynamic_field(sched, (1, 8, 8), 4)
    rng = np.random.default_rng(3)
    pair = DomainPair(rng.uniform(-1, 1, (1, 8, 8)), rng.uniform(-1, 1, (1, 8, 8)))
    pred = oracle_pair_predictor(pair)
    idx = make_spaced_grid(sched, 10, T // 2).indices
    steps = list(zip(idx[:-1], idx[1:])) + [(900, 850)]
    identical, worst = True, 0.0
    for s_idx, t_idx in steps:
        x = np.sqrt(sched.alpha_bar[s_idx]) * domain_mixture(L.at(s_idx), pair) + 0.3 * rng.standard_normal((1, 8, 8))
        a = first_order_step(x, pair.x_src, s_idx, t_idx, pred, L, sched, stochastic=False)
        b = exact_reverse_step(x, pair.x_src, s_idx, t_idx, pred, L, sched, stochastic=False)
        identical &= bool(np.array_equal(a, b))
        ref = lambda_ode_euler(x, pair.x_src, s_idx, t_idx, pred, L, sched, 1000)
        worst = max(worst, float(np.sqrt(np.mean((b - ref) ** 2))))
    dt = time.perf_counter() - t0
    criterion(6, identical and worst < 1e-3 and dt < 120,
              f"bit-identical: {identical}, worst per-step RMSE vs 1000-substep integration {worst:.1e} "
              f"over {len(steps)} steps, {dt:.1f}s")


def test_c07_oracle_round_trip(criterion, sched):
    t0 = time.perf_counter()
    pairs = gen_dataset(SyntheticTaskSpec("contrast_swap", 20, seed=7))
    L = build_mixfield_linear(sched, 1, 32, 32)
    vals = [psnr(sample(oracle_pair_predictor(p), p.x_src, SamplerConfig(N=50, t1=T // 2), L, sched,
                        np.random.default_rng(i)), p.x_tgt) for i, p in enumerate(pairs)]
    dt = time.perf_counter() - t0
    criterion(7, np.mean(vals) > 30 and dt < 60, f"mean PSNR {np.mean(vals):.2f} dB (min {np.min(vals):.2f}), "
                                                 f"{dt:.1f}s")


def plain_vp_sampler(x_src, x0, sched, idx, rng):
    """First-order VP data-prediction sampler written in log-SNR form over step indices ``idx``; returns every state."""
    ab = sched.alpha_bar
    a = lambda t: np.sqrt(ab[t])
    sig = lambda t: np.sqrt(1.0 - ab[t])
    logsnr = lambda t: np.log(a(t)) - np.log(sig(t)) if t > 0 else np.inf
    x = a(idx[0]) * x_src + sig(idx[0]) * rng.standard_normal(x_src.shape)
    states = [x]
    for s, t in zip(idx[:-1], idx[1:]):
        e = np.exp(-(logsnr(t) - logsnr(s)))
        x = (sig(t) / sig(s)) * e * x + a(t) * (1 - e ** 2) * x0(x, x_src, s)
        x = x + sig(t) * np.sqrt(1 - e ** 2) * rng.standard_normal(x.shape)
        states.append(x)
    return states


def test_c08_vp_reduction(criterion, sched):
    t0 = time.perf_counter()
    zero = build_mixfield_linear(sched, 1, 8, 8)
    zero = type(zero)(np.zeros_like(zero.values), "linear")
    worst = 0.0
    for k, (N, t1) in enumerate([(10, 500), (20, 750), (7, 999), (50, 300)]):
        rng = np.random.default_rng(k)
        src, tgt, w = rng.uniform(-1, 1, (3, 2, 1, 8, 8))
        x0 = lambda x, s_, t: 0.5 * tgt + 0.3 * np.tanh(w * x) * np.cos(t / 200)
        ours = []
        sample(Predictor(x0, "oracle_pair"), src, SamplerConfig(N=N, t1=t1), zero, sched,
               np.random.default_rng(100 + k), callback=lambda i, t, x: ours.append(x))
        # the grid is shared so that only the step arithmetic is compared
        ref = plain_vp_sampler(src, x0, sched, make_spaced_grid(sched, N, t1).indices, np.random.default_rng(100 + k))
        assert len(ours) == len(ref)
        worst = max(worst, max(float(np.max(np.abs(a - b))) for a, b in zip(ours, ref)))
    dt = time.perf_counter() - t0
    criterion(8, worst < 1e-8 and dt < 30, f"max per-step deviation {worst:.1e}, {dt:.2f}s")


def test_c09_gaussian_posterior(criterion, sched):
    t0 = time.perf_counter()
    worst_rel, dominates = 0.0, True
    for t in (T // 4, T // 2, 3 * T // 4):
        # regression of x0 on x_t, prior scaled so x_t carries 80% signal
        n, lam = 50000, 0.35
        rng = np.random.default_rng(t)
        a, sig = np.sqrt(sched.alpha_bar[t]), sched.sigma[t]
        tau2 = 4 * sig ** 2 / (a * (1 - lam)) ** 2
        x0 = 0.2 + np.sqrt(tau2) * rng.standard_normal(n)
        xt = a * (lam * 0.5 + (1 - lam) * x0) + sig * rng.standard_normal(n)
        slope = np.cov(x0, xt)[0, 1] / np.var(xt, ddof=1)
        k = posterior_gain(a, sig, lam, tau2)
        worst_rel = max(worst_rel, abs(slope - k) / k)

        # Bayes against the baselines, prior at unit signal-to-noise so the margins exceed sampling error
        L = build_mixfield_linear(sched, 1, 4, 4)
        lt = L.at(t)
        tau2 = float((sig / (a * (1 - lt.flat[0]))) ** 2)
        mu0 = rng.uniform(-0.5, 0.5, (1, 4, 4))
        src = rng.uniform(-1, 1, (1, 4, 4))
        x0 = mu0 + np.sqrt(tau2) * rng.standard_normal((20000, 1, 4, 4))
        xt = a * (lt * src + (1 - lt) * x0) + sig * rng.standard_normal(x0.shape)
        bayes = gaussian_posterior_predictor(mu0, tau2, L, sched)(xt, src, t)
        naive = (xt / a - lt * src) / (1 - lt)
        mse = lambda p: np.mean((p - x0) ** 2)
        dominates &= bool(mse(bayes) <= mse(np.broadcast_to(mu0, x0.shape)) and mse(bayes) <= mse(naive))
    dt = time.perf_counter() - t0
    criterion(9, worst_rel < 0.01 and dominates and dt < 120,
              f"max relative gain error {worst_rel:.2%}, Bayes dominance: {dominates}, {dt:.1f}s")


# --- trained models ---------------------------------------------------------------


def gradient_check(sched):
    torch.manual_seed(0)
    net = toy_predictor_init(1, 1, width=8).double()
    mixer = ModNet(1, seed=2, zero_final=False).double()
    rng = np.random.default_rng(0)
    src = torch.tensor(rng.uniform(-1, 1, (4, 1, 8, 8)))
    tgt = torch.tensor(rng.uniform(-1, 1, (4, 1, 8, 8)))
    t = torch.tensor([3, 250, 600, 999])
    noise = torch.tensor(rng.standard_normal((4, 1, 8, 8)))
    params = list(net.parameters()) + list(mixer.parameters())
    grads = torch.autograd.grad(training_loss(net, mixer, sched, src, tgt, t, noise), params)
    worst, checked, h = 0.0, 0, 1e-6
    while checked < 20:
        j = rng.integers(len(params))
        i = rng.integers(params[j].numel())
        flat = params[j].data.view(-1)
        with torch.no_grad():
            flat[i] += h
            up = training_loss(net, mixer, sched, src, tgt, t, noise).item()
            flat[i] -= 2 * h
            down = training_loss(net, mixer, sched, src, tgt, t, noise).item()
            flat[i] += h
        fd, g = (up - down) / (2 * h), grads[j].reshape(-1)[i].item()
        if max(abs(fd), abs(g)) < 1e-6:
            continue
        worst = max(worst, abs(fd - g) / max(abs(fd), abs(g)))
        checked += 1
    return worst


@pytest.fixture(scope="module")
def runs(sched):
    """Matched-budget training: 2000 steps on 200 shape_to_mask pairs at 32x32 per variant and seed."""
    out, t0 = {}, time.perf_counter()
    for seed in SEEDS:
        data = gen_dataset(SyntheticTaskSpec("shape_to_mask", 200, seed=seed))
        for v in VARIANTS:
            mixer = ModNet(1, seed=seed) if v == "dynamic" else build_mixfield_linear(sched, 1, 32, 32)
            res = train_score_matching(data, toy_predictor_init(seed, 1), mixer, sched, TrainConfig(seed=seed))
            out[v, seed] = res
    out["seconds"] = time.perf_counter() - t0
    return out


class Evaluator:
    """Samples the 50-pair test set of each seed once per setting and caches the metrics."""

    def __init__(self, runs, sched):
        self.runs, self.sched, self.cache = runs, sched, {}
        self.seconds = 0.0

    def __call__(self, variant, seed, N=20, t1=T // 2, shift=0):
        key = (variant, seed, N, t1, shift)
        if key not in self.cache:
            t0 = time.perf_counter()
            test = gen_dataset(SyntheticTaskSpec("shape_to_mask", 50, seed=1000 + seed))
            res = self.runs[variant, seed]
            L = res.field(self.sched, (1, 32, 32))
            src = np.stack([misalign(p, shift).x_src for p in test])
            out = sample(trained_predictor(res.net, L, self.sched), src, SamplerConfig(N=N, t1=t1), L, self.sched,
                         np.random.default_rng(seed))
            seg = [seg_metrics(o[0], p.mask) for o, p in zip(out, test)]
            self.cache[key] = {
                "finite": bool(np.all(np.isfinite(out))),
                "psnr": float(np.mean([psnr(o, p.x_tgt) for o, p in zip(out, test)])),
                "dice": float(np.mean([s["dice"] for s in seg])),
                "hausdorff": float(np.mean([s["hausdorff"] for s in seg])),
            }
            self.seconds += time.perf_counter() - t0
        return self.cache[key]

    def mean(self, variant, metric, **kw):
        return float(np.mean([self(variant, s, **kw)[metric] for s in SEEDS]))


@pytest.fixture(scope="module")
def evaluator(runs, sched):
    return Evaluator(runs, sched)


@pytest.mark.experiment
def test_c10_training_smoke_and_gradients(criterion, sched, runs):
    t0 = time.perf_counter()
    worst = gradient_check(sched)
    drops = {}
    for key, res in runs.items():
        if key == "seconds":
            continue
        sm = smooth_losses(res.losses)
        drops[key] = 1 - sm[-1] / sm[49]  # first full 50-step window is the initial plateau
    dt = time.perf_counter() - t0 + runs["seconds"] / len(drops)
    least = min(drops.values())
    criterion(10, worst <= 1e-3 and least >= 0.3 and dt < 600,
              f"finite-difference max relative error {worst:.1e} on 20 coordinates; smoothed loss drop "
              f"{least:.1%} (least of {len(drops)} runs); {dt:.0f}s per run")


@pytest.mark.experiment
def test_c11_ablation_direction(criterion, runs, evaluator):
    dice = {v: evaluator.mean(v, "dice") for v in VARIANTS}
    hd = {v: evaluator.mean(v, "hausdorff") for v in VARIANTS}
    dt = runs["seconds"] + evaluator.seconds
    ok = dice["dynamic"] >= dice["linear"] and hd["dynamic"] <= hd["linear"] and dt < 45 * 60
    per_seed = ", ".join(f"seed {s}: {evaluator('dynamic', s)['dice']:.3f}/{evaluator('linear', s)['dice']:.3f}"
                         for s in SEEDS)
    criterion(11, ok, f"Dice dynamic {dice['dynamic']:.3f} vs linear {dice['linear']:.3f}, Hausdorff dynamic "
                      f"{hd['dynamic']:.2f} vs linear {hd['linear']:.2f} (N=20, t1={T // 2}; dice by seed "
                      f"{per_seed}), {dt / 60:.1f} min")


@pytest.mark.experiment
def test_c12_step_efficiency(criterion, evaluator):
    target = evaluator.mean("linear", "psnr", N=20)
    reached = {N: evaluator.mean("dynamic", "psnr", N=N) for N in (5, 10, 20)}
    hits = [N for N, v in reached.items() if v >= target]
    summary = ", ".join(f"N={N}: {v:.2f}" for N, v in reached.items())
    criterion(12, bool(hits), f"linear 20-step PSNR {target:.2f} dB; dynamic {summary}; "
                              f"fewest steps reaching it: {min(hits) if hits else 'none'}")


@pytest.mark.experiment
def test_c13_misalignment_robustness(criterion, evaluator):
    t0 = evaluator.seconds
    shifts = (0, 1, 2, 4, 8)
    dice = {s: evaluator.mean("dynamic", "dice", shift=s) for s in shifts}
    finite = all(evaluator("dynamic", seed, shift=s)["finite"] for seed in SEEDS for s in shifts)
    no_collapse = all(d >= 0.5 * dice[0] for d in dice.values())
    dt = evaluator.seconds - t0
    ok = dice[8] < dice[0] and finite and no_collapse and dt < 600
    criterion(13, ok, "Dice by shift " + ", ".join(f"{s}: {d:.3f}" for s, d in dice.items())
              + f"; finite: {finite}; Dice(8)/Dice(0) = {dice[8] / dice[0]:.2f}; {dt:.0f}s")
