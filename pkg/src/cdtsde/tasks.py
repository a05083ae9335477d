"""Synthetic paired-modality tasks, image metrics and the misalignment harness.

Images live in ``[-1, 1]`` with shape ``(C, H, W)``; the dynamic range used
by PSNR and SSIM is therefore ``L = 2``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import gaussian_filter, laplace
from scipy.spatial.distance import directed_hausdorff

from cdtsde.errors import DimensionError, ParameterError
from cdtsde.forward import DomainPair
from cdtsde.io import atomic_open

TASK_KINDS = ("contrast_swap", "speckle_to_smooth", "shape_to_mask")
DYNAMIC_RANGE = 2.0


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str
    n: int
    H: int = 32
    W: int = 32
    C: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ParameterError("kind", f"unknown task {self.kind!r}")
        if self.n < 1:
            raise ParameterError("n", "must be >= 1")
        if self.H < 8 or self.W < 8:
            raise ParameterError("H", "images must be at least 8x8")
        if self.C < 1:
            raise ParameterError("C", "must be >= 1")


def _rescale(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi - lo < 1e-12:
        return np.zeros_like(x)
    return 2.0 * (x - lo) / (hi - lo) - 1.0


def _blobs(rng, H, W, k):
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    img = np.zeros((H, W))
    for _ in range(k):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        r = rng.uniform(0.08, 0.25) * min(H, W)
        img += rng.uniform(0.5, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    return img


def _contrast_swap(rng, spec):
    src, tgt = [], []
    for _ in range(spec.C):
        v = _blobs(rng, spec.H, spec.W, int(rng.integers(3, 7)))
        v = (v - v.min()) / (v.max() - v.min() + 1e-12)
        gamma = rng.uniform(1.3, 2.0)
        src.append(2.0 * v - 1.0)
        tgt.append(2.0 * (1.0 - v) ** gamma - 1.0)
    return np.stack(src), np.stack(tgt), None


def _scene(rng, H, W):
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    img = np.full((H, W), rng.uniform(0.0, 0.3))
    for _ in range(int(rng.integers(2, 5))):
        level = rng.uniform(0.3, 1.0)
        cy, cx = rng.uniform(0.2, 0.8) * H, rng.uniform(0.2, 0.8) * W
        if rng.uniform() < 0.5:
            r = rng.uniform(0.1, 0.25) * min(H, W)
            sel = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            hy, hx = rng.uniform(0.1, 0.25) * H, rng.uniform(0.1, 0.25) * W
            sel = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
        img[sel] = level
    return img


def _speckle_to_smooth(rng, spec):
    scene = _scene(rng, spec.H, spec.W)
    src, tgt = [], []
    for _ in range(spec.C):
        smooth = gaussian_filter(scene, 0.7)
        edges = smooth - 0.8 * laplace(smooth)
        looks = 4.0
        speckle = rng.gamma(looks, 1.0 / looks, size=scene.shape)
        src.append(_rescale(np.maximum(edges, 0.0) * speckle))
        tgt.append(_rescale(smooth))
    return np.stack(src), np.stack(tgt), None


def _strokes(rng, H, W):
    mask = np.zeros((H, W), dtype=bool)
    for _ in range(int(rng.integers(2, 5))):
        y, x = rng.uniform(0.2, 0.8) * H, rng.uniform(0.2, 0.8) * W
        ang = rng.uniform(0, 2 * np.pi)
        for _ in range(int(rng.integers(H // 2, 2 * H))):
            ang += rng.normal(0.0, 0.3)
            y, x = y + 0.7 * np.sin(ang), x + 0.7 * np.cos(ang)
            iy, ix = int(round(y)), int(round(x))
            if not (0 <= iy < H and 0 <= ix < W):
                break
            mask[iy, ix] = True
            if ix + 1 < W:  # two-pixel wide crack
                mask[iy, ix + 1] = True
    return mask


def _shape_to_mask(rng, spec):
    H, W = spec.H, spec.W
    mask = _strokes(rng, H, W)
    while not mask.any():
        mask = _strokes(rng, H, W)
    src = []
    for _ in range(spec.C):
        cells = gaussian_filter(rng.uniform(size=(H, W)), 2.0)
        cells = (cells - cells.mean()) / (cells.std() + 1e-12)
        texture = 0.35 * np.tanh(cells) + 0.1 * rng.normal(size=(H, W))
        img = 0.3 + texture
        img[mask] -= rng.uniform(0.8, 1.2)
        src.append(np.clip(img, -1.0, 1.0))
    tgt = np.where(mask, 1.0, -1.0)
    return np.stack(src), np.broadcast_to(tgt, (spec.C, H, W)).copy(), mask


_GENERATORS = {"contrast_swap": _contrast_swap, "speckle_to_smooth": _speckle_to_smooth,
               "shape_to_mask": _shape_to_mask}


def gen_dataset(spec: SyntheticTaskSpec) -> list[DomainPair]:
    """Generate ``spec.n`` pairs; pair ``i`` uses the ``i``-th child of the seed sequence."""
    children = np.random.SeedSequence(spec.seed).spawn(spec.n)
    gen = _GENERATORS[spec.kind]
    out = []
    for ss in children:
        src, tgt, mask = gen(np.random.default_rng(ss), spec)
        out.append(DomainPair(src.astype(np.float64), tgt.astype(np.float64), mask))
    return out


# --- image metrics --------------------------------------------------------------


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def mae(a, b) -> float:
    a, b = _same_shape(a, b)
    return float(np.mean(np.abs(a - b)))


def psnr(a, b, L: float = DYNAMIC_RANGE) -> float:
    e = mse(a, b)
    if e == 0.0:
        return float("inf")
    return float(10.0 * np.log10(L * L / e))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-r ** 2 / (2 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5, L: float = DYNAMIC_RANGE) -> float:
    """Mean SSIM over all fully contained Gaussian-weighted windows, averaged over channels."""
    a, b = _same_shape(a, b)
    if window < 1 or window % 2 == 0:
        raise ParameterError("window", "must be a positive odd integer")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ParameterError("window", f"image {a.shape[-2:]} smaller than window {window}")
    w = gaussian_window(window, sigma)
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2

    def filt(x):
        return np.einsum("...ijkl,kl->...ij", sliding_window_view(x, (window, window), axis=(-2, -1)), w)

    mu_a, mu_b = filt(a), filt(b)
    va = filt(a * a) - mu_a ** 2
    vb = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2))
    return float(np.mean(s))


# --- segmentation -----------------------------------------------------------------


def seg_metrics(pred_mask, true_mask) -> dict:
    """Overlap and boundary metrics; inputs are binarised at ``> 0``."""
    p = np.asarray(pred_mask) > 0
    g = np.asarray(true_mask) > 0
    if p.shape != g.shape:
        raise DimensionError(f"mask shapes differ: {p.shape} vs {g.shape}")
    if p.ndim == 3:  # channel-replicated masks
        p, g = p.any(axis=0), g.any(axis=0)
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    np_, ng = tp + fp, tp + fn
    if np_ == 0 and ng == 0:
        return {"dice": 1.0, "iou": 1.0, "precision": 1.0, "recall": 1.0, "hausdorff": 0.0}
    dice = 2.0 * tp / (np_ + ng)
    iou = tp / (tp + fp + fn)
    precision = tp / np_ if np_ else 0.0
    recall = tp / ng if ng else 0.0
    if np_ == 0 or ng == 0:
        hd = float(np.hypot(*p.shape))
    else:
        P, G = np.argwhere(p), np.argwhere(g)
        hd = max(directed_hausdorff(P, G)[0], directed_hausdorff(G, P)[0])
    return {"dice": dice, "iou": iou, "precision": precision, "recall": recall, "hausdorff": float(hd)}


# --- robustness -------------------------------------------------------------------


def misalign(pair: DomainPair, shift: int) -> DomainPair:
    """Translate the source by ``(shift, shift)`` pixels with edge replication."""
    H, W = pair.x_src.shape[-2:]
    if not 0 <= shift <= min(H, W) / 4:
        raise ParameterError("shift", f"must satisfy 0 <= shift <= {min(H, W) / 4}, got {shift}")
    if shift == 0:
        return pair
    pad = [(0, 0)] * (pair.x_src.ndim - 2) + [(shift, 0), (shift, 0)]
    moved = np.pad(pair.x_src, pad, mode="edge")[..., :H, :W]
    return DomainPair(moved, pair.x_tgt, pair.mask)


# --- reports ------------------------------------------------------------------------


IMAGE_METRICS = ("ssim", "psnr", "mse", "mae")
SEG_METRICS = ("dice", "iou", "precision", "recall", "hausdorff")


@dataclass
class MetricReport:
    names: tuple
    rows: list = field(default_factory=list)  # one dict per pair

    def add(self, values: dict) -> None:
        self.rows.append({k: float(values[k]) for k in self.names})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def mean(self, name: str) -> float:
        return float(np.mean(self.column(name)))

    def std(self, name: str) -> float:
        col = self.column(name)
        if np.all(col == col[0]):  # also covers a column of infinite PSNRs
            return 0.0
        return float(np.std(col))

    def to_csv(self, path) -> None:
        with atomic_open(path, "w") as fh:
            w = csv.writer(fh)
            w.writerow(["pair"] + list(self.names) + [f"{k}_std" for k in self.names])
            for i, r in enumerate(self.rows):
                w.writerow([i] + [repr(r[k]) for k in self.names] + [""] * len(self.names))
            w.writerow(["aggregate"] + [repr(self.mean(k)) for k in self.names]
                       + [repr(self.std(k)) for k in self.names])


def evaluate(generated, references, masks=None) -> MetricReport:
    """Image metrics for every pair, plus segmentation metrics when ``masks`` is given."""
    if len(generated) != len(references):
        raise DimensionError(f"{len(generated)} generated vs {len(references)} references")
    names = IMAGE_METRICS + (SEG_METRICS if masks is not None else ())
    rep = MetricReport(names)
    for i, (g, r) in enumerate(zip(generated, references)):
        vals = {"ssim": ssim(g, r), "psnr": psnr(g, r), "mse": mse(g, r), "mae": mae(g, r)}
        if masks is not None:
            pred = np.mean(np.asarray(g), axis=0) if np.ndim(g) == 3 else g
            vals.update(seg_metrics(pred, masks[i]))
        rep.add(vals)
    return rep
