"""Closed-form JEPA loss and metric kernels with analytic gradients.

Every loss returns (scalar value, gradient array shaped like the embedding
input). Kernels are pure, single-threaded numpy with a fixed summation order,
so values are bit-stable across runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import INVALID, OCCUPIED, OccupancyGrid, ValidationError


@dataclass(frozen=True, eq=False)
class EmbeddingBatch:
    values: np.ndarray  # (N, D)
    mask: np.ndarray  # (N,) bool: rows participating in the loss

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        m = np.asarray(self.mask, dtype=bool)
        if v.ndim != 2:
            raise ValidationError(f"embedding values must be 2D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("embedding values contain non-finite entries")
        if m.shape != (v.shape[0],):
            raise ValidationError(
                f"mask shape {m.shape} != row count {v.shape[0]}"
            )
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mask", m)


@dataclass(frozen=True)
class LossConfig:
    lambda_reg: float = 10.0
    gamma: float = 1.0
    eps: float = 1e-4
    sigreg_projections: int = 64
    sigreg_beta: float = 1.0
    ema_momentum: float = 0.996

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise ValidationError("lambda_reg must be >= 0")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ValidationError("ema_momentum must be in [0, 1)")
        if self.sigreg_projections < 1:
            raise ValidationError("sigreg_projections must be >= 1")


def _check_pair(pred: EmbeddingBatch, target: EmbeddingBatch) -> None:
    if pred.values.shape != target.values.shape:
        raise ValidationError(
            f"shape mismatch: pred {pred.values.shape} vs target {target.values.shape}"
        )
    if not np.array_equal(pred.mask, target.mask):
        raise ValidationError("pred and target masks differ")


def cosine_prediction_loss(pred: EmbeddingBatch, target: EmbeddingBatch):
    """Mean over masked rows of 1 - cos(pred, target); grad w.r.t. pred only."""
    _check_pair(pred, target)
    rows = np.flatnonzero(pred.mask)
    grads = np.zeros_like(pred.values)
    if rows.size == 0:
        return 0.0, grads
    p = pred.values[rows]
    t = target.values[rows]
    pn = np.linalg.norm(p, axis=1)
    tn = np.linalg.norm(t, axis=1)
    bad = np.flatnonzero((pn < 1e-12) | (tn < 1e-12))
    if bad.size:
        raise ValidationError(
            f"masked row {int(rows[bad[0]])} has near-zero norm; cosine undefined"
        )
    dots = np.einsum("ij,ij->i", p, t)
    cos = dots / (pn * tn)
    value = float(np.mean(1.0 - cos))
    # d(1 - cos)/dp = -(t/(|p||t|) - cos * p/|p|^2)
    g = -(t / (pn * tn)[:, None] - (cos / pn**2)[:, None] * p) / rows.size
    grads[rows] = g
    return value, grads


def l2_prediction_loss(pred: EmbeddingBatch, target: EmbeddingBatch):
    """Mean over masked rows of ||pred - target||^2; grad w.r.t. pred."""
    _check_pair(pred, target)
    rows = np.flatnonzero(pred.mask)
    grads = np.zeros_like(pred.values)
    if rows.size == 0:
        return 0.0, grads
    diff = pred.values[rows] - target.values[rows]
    value = float(np.mean(np.sum(diff * diff, axis=1)))
    grads[rows] = 2.0 * diff / rows.size
    return value, grads


def variance_reg(emb: EmbeddingBatch, gamma: float = 1.0, eps: float = 1e-4):
    """Hinge on per-dimension std over masked rows: mean_d max(0, gamma - std_d)."""
    rows = np.flatnonzero(emb.mask)
    if rows.size < 2:
        raise ValidationError("variance regularization needs >= 2 masked rows")
    x = emb.values[rows]
    n, d = x.shape
    mu = x.mean(axis=0)
    var = np.sum((x - mu) ** 2, axis=0) / (n - 1)  # unbiased
    std = np.sqrt(var + eps)
    hinge = np.maximum(0.0, gamma - std)
    value = float(np.mean(hinge))
    grads = np.zeros_like(emb.values)
    active = hinge > 0.0
    if np.any(active):
        g = np.zeros_like(x)
        g[:, active] = -(x[:, active] - mu[active]) / (
            d * std[active] * (n - 1)
        )
        grads[rows] = g
    return value, grads


def _sigreg_directions(k: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((k, dim))
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return u / norms


def sigreg(emb: EmbeddingBatch, k: int = 64, beta: float = 1.0, seed: int = 0):
    """Normality statistic of masked embeddings on k random 1D projections.

    Per direction, with projections x_1..x_n, the statistic against the
    standard normal is

        T = (1/n^2) sum_jk exp(-b^2 (x_j - x_k)^2 / 2)
            - (2/n) (1+b^2)^{-1/2} sum_j exp(-b^2 x_j^2 / (2 (1+b^2)))
            + (1+2b^2)^{-1/2}

    and the loss is the mean of T over directions. T >= 0 with equality in
    the large-sample Gaussian limit, so minimizing it pushes every projection
    toward N(0, 1).
    """
    if k < 1:
        raise ValidationError("sigreg needs at least one projection direction")
    rows = np.flatnonzero(emb.mask)
    if rows.size < 2:
        raise ValidationError("sigreg needs >= 2 masked rows")
    x = emb.values[rows]
    n, d = x.shape
    dirs = _sigreg_directions(k, d, seed)
    b2 = beta * beta
    c1 = 1.0 / np.sqrt(1.0 + b2)
    c2 = 1.0 / np.sqrt(1.0 + 2.0 * b2)

    total = 0.0
    grad_proj = np.zeros((k, n))
    for ki in range(k):
        z = x @ dirs[ki]
        delta = z[:, None] - z[None, :]
        w = np.exp(-0.5 * b2 * delta * delta)
        e = np.exp(-b2 * z * z / (2.0 * (1.0 + b2)))
        t = w.sum() / (n * n) - (2.0 / n) * c1 * e.sum() + c2
        total += t
        grad_proj[ki] = (
            -(2.0 * b2 / (n * n)) * np.sum(w * delta, axis=1)
            + (2.0 * b2 / (n * (1.0 + b2))) * c1 * z * e
        )
    value = float(total / k)
    grads = np.zeros_like(emb.values)
    grads[rows] = (grad_proj.T @ dirs) / k
    return value, grads


def total_loss(l_jepa, l_reg, lambda_reg: float):
    """Linear combination L = L_jepa + lambda_reg * L_reg, values and grads."""
    v1, g1 = l_jepa
    v2, g2 = l_reg
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    if g1.shape != g2.shape:
        raise ValidationError(
            f"gradient shapes incompatible: {g1.shape} vs {g2.shape}"
        )
    return float(v1 + lambda_reg * v2), g1 + lambda_reg * g2


def ema_update(target_params: np.ndarray, context_params: np.ndarray,
               momentum: float) -> np.ndarray:
    target_params = np.asarray(target_params, dtype=np.float64)
    context_params = np.asarray(context_params, dtype=np.float64)
    if target_params.shape != context_params.shape:
        raise ValidationError(
            f"parameter length mismatch: {target_params.shape} vs "
            f"{context_params.shape}"
        )
    if not 0.0 <= momentum < 1.0:
        raise ValidationError("momentum must be in [0, 1)")
    return momentum * target_params + (1.0 - momentum) * context_params


def masked_bce(logits: np.ndarray, label: OccupancyGrid):
    """Mean BCE over non-INVALID voxels, stable log-sum-exp form.

    INVALID voxels contribute nothing and receive zero gradient.
    """
    z = np.asarray(logits, dtype=np.float64)
    state = label.state
    if z.shape != state.shape:
        raise ValidationError(f"logit shape {z.shape} != label shape {state.shape}")
    valid = state != INVALID
    n = int(valid.sum())
    if n == 0:
        raise ValidationError("all voxels INVALID; BCE undefined")
    y = (state == OCCUPIED).astype(np.float64)
    zv = z[valid]
    yv = y[valid]
    per = np.maximum(zv, 0.0) - zv * yv + np.log1p(np.exp(-np.abs(zv)))
    value = float(per.sum() / n)
    grads = np.zeros_like(z)
    sig = 1.0 / (1.0 + np.exp(-zv))
    grads[valid] = (sig - yv) / n
    return value, grads


def iou_metrics(pred_binary: np.ndarray, label: OccupancyGrid,
                close_fraction: float = 0.5):
    """(iou_full, iou_close) over non-INVALID voxels; empty union -> 1.0.

    The close region is the centered sub-grid spanning close_fraction of the
    x and y extents (full z).
    """
    pred = np.asarray(pred_binary, dtype=bool)
    state = label.state
    if pred.shape != state.shape:
        raise ValidationError(f"pred shape {pred.shape} != label shape {state.shape}")
    valid = state != INVALID
    occ = state == OCCUPIED

    def _iou(region):
        inter = int(np.sum(pred & occ & region))
        union = int(np.sum((pred | occ) & region))
        return 1.0 if union == 0 else inter / union

    iou_full = _iou(valid)
    nx, ny, _ = state.shape
    lo_x = int(round(nx * (1.0 - close_fraction) / 2.0))
    lo_y = int(round(ny * (1.0 - close_fraction) / 2.0))
    close = np.zeros_like(valid)
    close[lo_x:nx - lo_x, lo_y:ny - lo_y, :] = True
    iou_close = _iou(valid & close)
    return iou_full, iou_close


def finite_difference_grad(fn, x: np.ndarray, indices, h_rel: float = 1e-5):
    """Central finite differences of scalar fn at the given flat indices."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros(len(indices))
    flat = x.ravel()
    for j, idx in enumerate(indices):
        h = h_rel * max(1.0, abs(flat[idx]))
        xp = flat.copy()
        xm = flat.copy()
        xp[idx] += h
        xm[idx] -= h
        fp = fn(xp.reshape(x.shape))
        fm = fn(xm.reshape(x.shape))
        out[j] = (fp - fm) / (2.0 * h)
    return out
