"""Discretised path energy of mixture trajectories and schedule optimisers.

Cells are the flattened ``(C, H, W)`` entries of a :class:`DomainPair`.  A
path assigns each cell a trajectory ``L(t_k)`` on the uniform grid
``t_k = k / M``; the mixture is ``d = L x_src + (1 - L) x_tgt``.  The energy is

    sum_k h sum_cells a_{k+1/2} ((d_{k+1} - d_k) / h)^2
      + trapezoid_k sum_cells m (d_k - u_k)^2

The kinetic term uses one-sided segment differences with the metric at
segment midpoints.  Central differences admit a zero-cost alternating mode
that optimisers exploit, so they are not used.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Optional

import numpy as np

from cdtsde.errors import ConstraintError, DimensionError, ParameterError
from cdtsde.forward import DomainPair

CLASSES = ("global", "pixelwise")


@dataclass(frozen=True)
class EnergySpec:
    """Kinetic metric ``a`` and potential ``m (d - u)^2`` on an ``M + 1`` point grid.

    ``a`` and ``u`` have shape ``(M + 1, n_cells)``; ``m`` has shape ``(n_cells,)``.
    """

    M: int
    a: np.ndarray
    m: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        if self.M < 2:
            raise ParameterError("M", "need at least two grid intervals")
        n = self.m.shape[0]
        if self.a.shape != (self.M + 1, n) or self.u.shape != (self.M + 1, n):
            raise DimensionError(f"a {self.a.shape} and u {self.u.shape} must be ({self.M + 1}, {n})")
        if np.any(self.a <= 0):
            raise ParameterError("a", "kinetic metric must be positive")
        if np.any(self.m < 0):
            raise ParameterError("m", "potential curvature must be non-negative")

    @property
    def n_cells(self) -> int:
        return self.m.shape[0]

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.M + 1)

    @classmethod
    def from_functions(cls, M: int, a, m, u) -> "EnergySpec":
        """Sample per-cell callables ``a_c(t)`` and ``u_c(t)`` on the grid."""
        t = np.linspace(0.0, 1.0, M + 1)
        A = np.stack([np.broadcast_to(np.asarray(f(t), dtype=np.float64), t.shape) for f in a], axis=1)
        U = np.stack([np.broadcast_to(np.asarray(f(t), dtype=np.float64), t.shape) for f in u], axis=1)
        return cls(M, A, np.asarray(m, dtype=np.float64), U)


@dataclass(frozen=True)
class SchedulePath:
    values: np.ndarray  # (M + 1, n_cells)
    cls: str
    converged: Optional[bool] = None
    iterations: Optional[int] = None

    def __post_init__(self):
        if self.cls not in CLASSES:
            raise ParameterError("cls", f"unknown class {self.cls!r}")

    def violations(self, tol: float = 1e-12) -> list[str]:
        v = self.values
        out = []
        if np.any(v[0] != 0.0):
            out.append("L(0) = 0")
        if np.any(v[-1] != 1.0):
            out.append("L(1) = 1")
        if np.any(np.diff(v, axis=0) < -tol):
            out.append("nondecreasing in t")
        if np.any(v < -tol) or np.any(v > 1.0 + tol):
            out.append("values in [0, 1]")
        if self.cls == "global" and np.any(v != v[:, :1]):
            out.append("global path is constant across cells")
        return out


def _cells(pair: DomainPair):
    return np.ravel(pair.x_src).astype(np.float64), np.ravel(pair.x_tgt).astype(np.float64)


def _check_shapes(spec: EnergySpec, pair: DomainPair, values: np.ndarray):
    if pair.x_src.size != spec.n_cells:
        raise DimensionError(f"pair has {pair.x_src.size} cells, spec has {spec.n_cells}")
    if values.shape != (spec.M + 1, spec.n_cells):
        raise DimensionError(f"path shape {values.shape} != {(spec.M + 1, spec.n_cells)}")


def _trap_weights(M: int) -> np.ndarray:
    w = np.full(M + 1, 1.0 / M)
    w[0] = w[-1] = 0.5 / M
    return w


def cell_energies(spec: EnergySpec, values: np.ndarray, pair: DomainPair):
    """Per-cell ``(kinetic, potential)`` for any trajectory array; no feasibility check."""
    src, tgt = _cells(pair)
    h = 1.0 / spec.M
    d = tgt + values * (src - tgt)
    a_mid = 0.5 * (spec.a[1:] + spec.a[:-1])
    kin = np.sum(a_mid * np.diff(d, axis=0) ** 2, axis=0) / h
    pot = spec.m * np.sum(_trap_weights(spec.M)[:, None] * (d - spec.u) ** 2, axis=0)
    return kin, pot


def path_energy(spec: EnergySpec, path: SchedulePath, pair: DomainPair) -> float:
    _check_shapes(spec, pair, path.values)
    bad = path.violations()
    if bad:
        raise ConstraintError("infeasible path violates: " + ", ".join(bad))
    kin, pot = cell_energies(spec, path.values, pair)
    return float(np.sum(kin) + np.sum(pot))


def energy_gradient(spec: EnergySpec, values: np.ndarray, pair: DomainPair) -> np.ndarray:
    """Gradient of the total energy with respect to every ``L(t_k)`` per cell."""
    src, tgt = _cells(pair)
    delta = src - tgt
    h = 1.0 / spec.M
    d = tgt + values * delta
    a_mid = 0.5 * (spec.a[1:] + spec.a[:-1])
    flux = 2.0 * a_mid * np.diff(d, axis=0) / h
    g = np.zeros_like(d)
    g[:-1] -= flux
    g[1:] += flux
    g += 2.0 * spec.m * _trap_weights(spec.M)[:, None] * (d - spec.u)
    return g * delta


# --- projection ---------------------------------------------------------------


def pav(y: np.ndarray) -> np.ndarray:
    """Least-squares nondecreasing fit of each column of ``y`` (pool adjacent violators)."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        return pav(y[:, None])[:, 0]
    out = np.empty_like(y)
    for j in range(y.shape[1]):
        means, counts = [], []
        for v in y[:, j]:
            means.append(v)
            counts.append(1)
            while len(means) > 1 and means[-2] > means[-1]:
                c = counts[-2] + counts[-1]
                means[-2] = (means[-2] * counts[-2] + means[-1] * counts[-1]) / c
                counts[-2] = c
                means.pop()
                counts.pop()
        out[:, j] = np.repeat(means, counts)
    return out


def project_monotone(values: np.ndarray) -> np.ndarray:
    """Euclidean projection onto nondecreasing paths in ``[0, 1]`` pinned at 0 and 1.

    Isotonic regression followed by clipping is the exact projection onto
    the intersection of the monotone cone and the box.
    """
    out = np.array(values, dtype=np.float64)
    out[1:-1] = np.clip(pav(out[1:-1]), 0.0, 1.0)
    out[0] = 0.0
    out[-1] = 1.0
    return out


# --- optimisers -----------------------------------------------------------------


def _lipschitz(spec: EnergySpec, pair: DomainPair) -> np.ndarray:
    src, tgt = _cells(pair)
    d2 = (src - tgt) ** 2
    a_mid = 0.5 * (spec.a[1:] + spec.a[:-1])
    return d2 * (8.0 * a_mid.max(axis=0) * spec.M + 2.0 * spec.m / spec.M)


def _fista(grad_fn, x0, L, max_iter, tol):
    """Accelerated projected gradient with adaptive restart.

    ``L`` broadcasts across columns.  Stops when the gradient-mapping norm
    falls below ``tol`` for every column.
    """
    L = np.where(L > 0, L, 1.0)
    x = project_monotone(x0)
    y, tk = x.copy(), 1.0
    for it in range(1, max_iter + 1):
        g = grad_fn(y)
        x_new = project_monotone(y - g / L)
        gmap = np.sqrt(np.sum(((y - x_new) * L) ** 2, axis=0))
        if np.all(gmap < tol):
            return x_new, True, it
        if np.sum(g * (x_new - x)) > 0:  # momentum points uphill
            tk = 1.0
            y = x_new
        else:
            tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
            y = x_new + ((tk - 1.0) / tn) * (x_new - x)
            tk = tn
        x = x_new
    return x, False, max_iter


def _starts(M: int, n_cols: int, n_starts: int, seed: int) -> list[np.ndarray]:
    lin = np.linspace(0.0, 1.0, M + 1)[:, None] * np.ones((1, n_cols))
    out = [lin]
    rng = np.random.default_rng(seed)
    for _ in range(n_starts - 1):
        r = np.sort(rng.uniform(size=(M - 1, n_cols)), axis=0)
        out.append(np.vstack([np.zeros((1, n_cols)), r, np.ones((1, n_cols))]))
    return out


def optimize_global(spec: EnergySpec, pair: DomainPair, n_starts: int = 5, seed: int = 0,
                    max_iter: int = 50000, tol: float = 1e-9):
    """Best spatially constant schedule; returns ``(path, energy)``."""
    n = spec.n_cells
    _check_shapes(spec, pair, np.zeros((spec.M + 1, n)))
    L = np.sum(_lipschitz(spec, pair))

    def grad(eta):
        return np.sum(energy_gradient(spec, np.repeat(eta, n, axis=1), pair), axis=1, keepdims=True)

    best = None
    for x0 in _starts(spec.M, 1, n_starts, seed):
        eta, ok, it = _fista(grad, x0, L, max_iter, tol)
        vals = np.repeat(eta, n, axis=1)
        e = float(np.sum(cell_energies(spec, vals, pair)))
        if best is None or e < best[1]:
            best = (SchedulePath(vals, "global", ok, it), e)
    return best


def optimize_pixelwise(spec: EnergySpec, pair: DomainPair, n_starts: int = 5, seed: int = 0,
                       max_iter: int = 50000, tol: float = 1e-9, warm_start: Optional[SchedulePath] = None):
    """Best per-cell schedules; the objective separates, so cells are solved side by side.

    Cells with zero contrast keep the linear schedule.  A ``warm_start`` path
    (for example the global optimum) joins the start set.
    """
    n = spec.n_cells
    _check_shapes(spec, pair, np.zeros((spec.M + 1, n)))
    L = _lipschitz(spec, pair)[None, :]
    starts = _starts(spec.M, n, n_starts, seed)
    if warm_start is not None:
        starts.append(np.asarray(warm_start.values, dtype=np.float64))
    best_vals = best_e = None
    all_ok, iters = True, 0
    for x0 in starts:
        vals, ok, it = _fista(lambda v: energy_gradient(spec, v, pair), x0, L, max_iter, tol)
        kin, pot = cell_energies(spec, vals, pair)
        e = kin + pot
        if best_vals is None:
            best_vals, best_e = vals, e
        else:
            better = e < best_e
            best_vals = np.where(better[None, :], vals, best_vals)
            best_e = np.where(better, e, best_e)
        all_ok &= ok
        iters = max(iters, it)
    src, tgt = _cells(pair)
    flat = src == tgt
    best_vals[:, flat] = np.linspace(0.0, 1.0, spec.M + 1)[:, None]
    e = float(np.sum(cell_energies(spec, best_vals, pair)))
    return SchedulePath(best_vals, "pixelwise", all_ok, iters), e


# --- oracles used by tests and reports --------------------------------------------


def dp_single_cell(a, m, u, delta: float, x_tgt: float, levels: int = 2001):
    """Exact minimum over monotone paths with values on a uniform level lattice.

    ``a`` and ``u`` are length ``M + 1`` arrays for one cell.  Returns
    ``(energy, path)``.
    """
    a = np.asarray(a, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    M = a.size - 1
    h = 1.0 / M
    lv = np.linspace(0.0, 1.0, levels)
    d = x_tgt + lv * delta
    w = _trap_weights(M)
    jump = (d[None, :] - d[:, None]) ** 2 / h  # from level i to level j
    jump[np.tril_indices(levels, -1)] = np.inf
    cost = np.full(levels, np.inf)
    cost[0] = m * w[0] * (d[0] - u[0]) ** 2
    back = []
    for k in range(1, M + 1):
        amid = 0.5 * (a[k - 1] + a[k])
        tot = cost[:, None] + amid * jump
        arg = np.argmin(tot, axis=0)
        cost = tot[arg, np.arange(levels)] + m * w[k] * (d - u[k]) ** 2
        if k == M:
            cost[:-1] = np.inf
        back.append(arg)
    j = levels - 1
    path = [j]
    for arg in reversed(back):
        j = arg[j]
        path.append(j)
    return float(cost[-1]), lv[np.array(path[::-1])]


def lattice_search(spec: EnergySpec, pair: DomainPair, levels: int = 21):
    """Exhaustive per-cell search over monotone paths on ``levels`` values."""
    M = spec.M
    lv = np.linspace(0.0, 1.0, levels)
    combos = np.array(list(combinations_with_replacement(range(levels), M - 1)))
    interior = lv[combos]  # (K, M - 1), each row nondecreasing
    paths = np.hstack([np.zeros((len(interior), 1)), interior, np.ones((len(interior), 1))])
    best_e = np.empty(spec.n_cells)
    best_p = np.empty((M + 1, spec.n_cells))
    src, tgt = _cells(pair)
    for c in range(spec.n_cells):
        sub = EnergySpec(M, np.repeat(spec.a[:, c:c + 1], len(paths), 1), np.full(len(paths), spec.m[c]),
                         np.repeat(spec.u[:, c:c + 1], len(paths), 1))
        cp = DomainPair(np.full(len(paths), src[c]), np.full(len(paths), tgt[c]))
        kin, pot = cell_energies(sub, paths.T, cp)
        e = kin + pot
        i = int(np.argmin(e))
        best_e[c] = e[i]
        best_p[:, c] = paths[i]
    return best_e, best_p


# --- strict domination ------------------------------------------------------------


def bump(t: np.ndarray, lo: float = 1.0 / 3.0, hi: float = 2.0 / 3.0) -> np.ndarray:
    """Raised cosine supported on ``[lo, hi]``."""
    s = (t - lo) / (hi - lo)
    return np.where((s > 0) & (s < 1), 0.5 * (1.0 - np.cos(2.0 * np.pi * s)), 0.0)


def is_homogeneous(spec: EnergySpec, pair: DomainPair) -> bool:
    src, tgt = _cells(pair)
    delta = src - tgt
    same = lambda x: bool(np.all(x == x[..., :1]))
    return same(spec.a) and same(spec.m) and same(spec.u) and same(delta) and same(tgt)


@dataclass
class DominationReport:
    E_glob: float
    E_pix: float
    gap: float
    homogeneous: bool
    descent_certificate: dict = field(default_factory=dict)
    global_path: Optional[SchedulePath] = None
    pixel_path: Optional[SchedulePath] = None
    note: str = ""


def descent_certificate(spec: EnergySpec, pair: DomainPair, global_path: SchedulePath,
                        eps_values=(1e-3, 1e-4)) -> dict:
    """Perturb each cell of the global optimum by ``-eps sgn(G_c) psi`` and record the energy change."""
    psi = bump(spec.grid)
    base = global_path.values
    g = energy_gradient(spec, base, pair)
    G = g.T @ psi  # directional derivative per cell
    direction = -np.sign(G)[None, :] * psi[:, None]
    e0 = float(np.sum(cell_energies(spec, base, pair)))
    changes = []
    for eps in eps_values:
        e = float(np.sum(cell_energies(spec, base + eps * direction, pair)))
        changes.append(e - e0)
    changes = np.array(changes)
    ratio = changes[0] / changes[1] if changes[1] != 0 else np.inf
    expected = eps_values[0] / eps_values[1]
    return {
        "eps": list(eps_values),
        "delta_E": changes.tolist(),
        "directional_derivatives": G.tolist(),
        "negative": bool(np.all(changes < 0)),
        "ratio": float(ratio),
        "linear": bool(abs(ratio / expected - 1.0) <= 0.1),
    }


def verify_strict_domination(spec: EnergySpec, pair: DomainPair, **opt) -> DominationReport:
    gpath, e_glob = optimize_global(spec, pair, **opt)
    ppath, e_pix = optimize_pixelwise(spec, pair, warm_start=gpath, **opt)
    homo = is_homogeneous(spec, pair)
    rep = DominationReport(e_glob, e_pix, e_glob - e_pix, homo, global_path=gpath, pixel_path=ppath)
    if homo:
        rep.note = "homogeneous instance; strict gap not required"
    else:
        rep.descent_certificate = descent_certificate(spec, pair, gpath)
    return rep


def reference_instance(M: int = 128, m: float = 10.0):
    """Two cells with unit contrast: one favours early mixing, the other late mixing."""
    spec = EnergySpec.from_functions(
        M, a=[lambda t: 1.0, lambda t: 1.0], m=[m, m],
        u=[lambda t: 1.0 - (1.0 - t) ** 3, lambda t: t ** 3])
    pair = DomainPair(np.ones((1, 1, 2)), np.zeros((1, 1, 2)))
    return spec, pair


def homogeneous_instance(M: int = 128, m: float = 10.0):
    """Control with both cells sharing the early-mixing target."""
    spec = EnergySpec.from_functions(
        M, a=[lambda t: 1.0, lambda t: 1.0], m=[m, m],
        u=[lambda t: 1.0 - (1.0 - t) ** 3, lambda t: 1.0 - (1.0 - t) ** 3])
    pair = DomainPair(np.ones((1, 1, 2)), np.zeros((1, 1, 2)))
    return spec, pair
