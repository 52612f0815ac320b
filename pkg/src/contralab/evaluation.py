"""Frechet distances between Gaussian fits and discriminator stability monitors.

Features are the raw data coordinates.  The resulting numbers live on a
completely different scale from Inception-based FID and must not be compared
with image-benchmark values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .linalg import largest_singular_value
from .models import DiscriminatorParams, discriminator_forward

COV_EPS = 1e-6
GAP_THRESHOLD = 0.5
SIGMA_JUMP = 0.5


class InsufficientSamplesError(ValueError):
    pass


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def fit_gaussian(samples) -> GaussianStats:
    """Mean and population covariance (+ ``1e-6 I``) of an ``n x D`` sample set."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise InsufficientSamplesError(f"need at least 2 samples to fit a Gaussian, got {n}")
    mu = x.mean(axis=0)
    centered = x - mu
    sigma = centered.T @ centered / n
    sigma = 0.5 * (sigma + sigma.T) + COV_EPS * np.eye(x.shape[1])
    return GaussianStats(mu, sigma, n)


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Squared 2-Wasserstein distance between two Gaussians."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    root_a = _psd_sqrt(a.sigma)
    cross = root_a @ b.sigma @ root_a
    vals = np.linalg.eigvalsh(0.5 * (cross + cross.T))
    tr_cross = float(np.sum(np.sqrt(np.clip(vals, 0.0, None))))
    diff = a.mu - b.mu
    d2 = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_cross)
    return max(d2, 0.0)


def class_conditional_frechet(real_x, real_y, fake_x, fake_y) -> dict:
    """Per-class distances, their mean (headline) and the pooled distance."""
    real_x, fake_x = np.asarray(real_x, dtype=np.float64), np.asarray(fake_x, dtype=np.float64)
    real_y, fake_y = np.asarray(real_y).reshape(-1), np.asarray(fake_y).reshape(-1)
    classes = np.unique(real_y)
    per_class = []
    for c in classes:
        r, f = real_x[real_y == c], fake_x[fake_y == c]
        if len(r) < 2 or len(f) < 2:
            raise InsufficientSamplesError(f"class {int(c)} needs >= 2 samples in both sets (real {len(r)}, fake {len(f)})")
        per_class.append(frechet_distance(fit_gaussian(r), fit_gaussian(f)))
    missing = set(np.unique(fake_y).tolist()) - set(classes.tolist())
    if missing:
        raise InsufficientSamplesError(f"class {min(missing)} is absent from the real set")
    pooled = frechet_distance(fit_gaussian(real_x), fit_gaussian(fake_x))
    return {"per_class": per_class, "mean": float(np.mean(per_class)), "pooled": pooled}


@dataclass
class StabilityRecord:
    acc_train: float
    acc_val: float
    acc_fake: float
    sigmas: list[float] = field(default_factory=list)
    collapse_flag: bool = False

    @property
    def gap(self) -> float:
        return self.acc_train - self.acc_val


def _scores(disc: DiscriminatorParams, x, y, weights) -> np.ndarray:
    return discriminator_forward(disc, x, y, weights=weights).adv_score.data[:, 0]


def authenticity_accuracy(disc: DiscriminatorParams, real_train, real_val, fake) -> StabilityRecord:
    """Real samples count as correct when scored > 0, fakes when scored <= 0.

    Each argument is an ``(x, labels)`` pair; labels are only consumed by
    label-dependent score heads.
    """
    with ad.no_grad():
        weights = disc.effective_weights(update_u=False)
        acc_train = float(np.mean(_scores(disc, *real_train, weights) > 0))
        acc_val = float(np.mean(_scores(disc, *real_val, weights) > 0))
        acc_fake = float(np.mean(_scores(disc, *fake, weights) <= 0))
    return StabilityRecord(acc_train, acc_val, acc_fake)


def spectral_trend(disc: DiscriminatorParams) -> dict[str, float]:
    """Brute-force top singular value of every weight the discriminator uses.

    Normalized layers are measured after division by the stored power-iteration
    estimate, which is what the forward pass actually applies.
    """
    with ad.no_grad():
        weights = disc.effective_weights(update_u=False)
    return {name: largest_singular_value(weights[name].data) for name in disc.weight_names()}


@dataclass
class CollapseFlags:
    gap_index: int | None
    sigma_indices: list[int]
    sigma_layers: dict[int, list[str]]

    @property
    def any(self) -> bool:
        return self.gap_index is not None or bool(self.sigma_indices)


def collapse_detector(history) -> CollapseFlags:
    """Scan evaluation records (mappings with ``acc_train``, ``acc_val`` and an
    optional per-layer ``sigmas`` mapping or list)."""
    records = list(history)
    if not records:
        raise ValueError("collapse_detector needs a non-empty history")
    gap_index = None
    sigma_layers: dict[int, list[str]] = {}
    prev = None
    for i, rec in enumerate(records):
        if gap_index is None and rec["acc_train"] - rec["acc_val"] > GAP_THRESHOLD:
            gap_index = i
        sig = rec.get("sigmas")
        if sig is not None:
            sig = dict(sig) if isinstance(sig, dict) else dict(enumerate(sig))
            if prev is not None:
                jumped = [
                    str(k) for k, s in sig.items() if k in prev and prev[k] > 0 and abs(s - prev[k]) / prev[k] > SIGMA_JUMP
                ]
                if jumped:
                    sigma_layers[i] = jumped
            prev = sig
    return CollapseFlags(gap_index, sorted(sigma_layers), sigma_layers)
