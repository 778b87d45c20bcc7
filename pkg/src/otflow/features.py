"""Radial feature kernels and the machinery that places and sizes them.

Two kernel profiles are supported, both functions of r = ||z - center||:

    erf_radial:            F(r) = r erf(r/a) + a exp(-(r/a)^2) / sqrt(pi)
    inverse_multiquadric:  F(r) = (1 + (r/a)^2)^(-1/2)

The erf_radial profile has the closed-form radial derivative
F'(r) = erf(r/a), so its gradient norm is strictly below 1 and
F(r) - r vanishes at large r.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf, expit

from .core import SampleBatch, ValidationError

KERNEL_KINDS = ("erf_radial", "inverse_multiquadric")

_SQRT_PI = math.sqrt(math.pi)


@dataclass(frozen=True)
class Feature:
    """One radial feature: profile kind, center point, bandwidth a > 0."""

    kind: str
    center: np.ndarray
    bandwidth: float

    def __post_init__(self) -> None:
        if self.kind not in KERNEL_KINDS:
            raise ValidationError(f"unknown kernel kind {self.kind!r}")
        center = np.asarray(self.center, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(center)):
            raise ValidationError("feature center must be finite")
        object.__setattr__(self, "center", center)
        if not (np.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise ValidationError(f"bandwidth must be positive, got {self.bandwidth}")


class FeatureSet:
    """Ordered collection of features evaluated together.

    Evaluation is vectorized over points and features; mixed kernel kinds in
    one set are allowed.
    """

    def __init__(self, features) -> None:
        self.features: tuple[Feature, ...] = tuple(features)
        if not self.features:
            raise ValidationError("FeatureSet needs at least one feature")
        dim = self.features[0].center.shape[0]
        for f in self.features:
            if f.center.shape[0] != dim:
                raise ValidationError("all feature centers must share one dimension")
        self.dim = dim
        self.centers = np.stack([f.center for f in self.features])  # (p, n)
        self.bandwidths = np.array([f.bandwidth for f in self.features])  # (p,)
        self.kinds = tuple(f.kind for f in self.features)
        self._erf_mask = np.array([k == "erf_radial" for k in self.kinds])

    def __len__(self) -> int:
        return len(self.features)

    def _radii(self, points: np.ndarray) -> np.ndarray:
        # (N, p) pairwise distances, guarded against tiny negative roundoff
        sq = (
            np.sum(points**2, axis=1)[:, None]
            - 2.0 * points @ self.centers.T
            + np.sum(self.centers**2, axis=1)[None, :]
        )
        return np.sqrt(np.maximum(sq, 0.0))

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Feature values at each point, shape (N, p)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        r = self._radii(points)
        a = self.bandwidths[None, :]
        out = np.empty_like(r)
        m = self._erf_mask
        if m.any():
            s = r[:, m] / a[:, m]
            out[:, m] = r[:, m] * erf(s) + a[:, m] * np.exp(-(s**2)) / _SQRT_PI
        if (~m).any():
            s = r[:, ~m] / a[:, ~m]
            out[:, ~m] = 1.0 / np.sqrt(1.0 + s**2)
        return out

    def _grad_factors(self, points: np.ndarray) -> np.ndarray:
        """w with grad F_j(z_i) = w[i, j] * (z_i - c_j), shape (N, p)."""
        r = self._radii(points)
        a = self.bandwidths[None, :]
        w = np.empty_like(r)
        m = self._erf_mask
        if m.any():
            rm, am = r[:, m], a[:, m]
            # erf(r/a)/r -> 2/(a sqrt(pi)) as r -> 0
            with np.errstate(invalid="ignore", divide="ignore"):
                wm = erf(rm / am) / rm
            wm = np.where(rm == 0.0, 2.0 / (am * _SQRT_PI), wm)
            w[:, m] = wm
        if (~m).any():
            rm, am = r[:, ~m], a[:, ~m]
            w[:, ~m] = -(1.0 / am**2) * (1.0 + (rm / am) ** 2) ** -1.5
        return w

    def gradients(self, points: np.ndarray) -> np.ndarray:
        """Full gradients, shape (N, p, n)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        w = self._grad_factors(points)  # (N, p)
        diff = points[:, None, :] - self.centers[None, :, :]  # (N, p, n)
        return w[:, :, None] * diff

    def rescaled_gradients(
        self, points: np.ndarray, lam: float, y_dim: int
    ) -> np.ndarray:
        """Gradients with the leading y block divided by lambda (dropped at inf)."""
        _check_lambda(lam)
        g = self.gradients(points)
        if y_dim > 0:
            if math.isinf(lam):
                g[:, :, :y_dim] = 0.0
            else:
                g[:, :, :y_dim] /= lam
        return g

    def displacement(
        self, points: np.ndarray, beta: np.ndarray, lam: float, y_dim: int
    ) -> np.ndarray:
        """sum_j beta_j rescaled_grad F_j at each point, shape (N, n).

        Avoids materializing the (N, p, n) gradient tensor.
        """
        _check_lambda(lam)
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        beta = np.asarray(beta, dtype=np.float64).reshape(-1)
        if beta.shape[0] != len(self):
            raise ValidationError(f"beta has {beta.shape[0]} entries for {len(self)} features")
        w = self._grad_factors(points)  # (N, p)
        wb = w * beta[None, :]
        disp = np.sum(wb, axis=1)[:, None] * points - wb @ self.centers  # (N, n)
        if y_dim > 0:
            if math.isinf(lam):
                disp[:, :y_dim] = 0.0
            else:
                disp[:, :y_dim] /= lam
        return disp

    def to_json_dict(self) -> dict:
        return {
            "features": [
                {
                    "kind": f.kind,
                    "center": [float(v) for v in f.center],
                    "bandwidth": float(f.bandwidth),
                }
                for f in self.features
            ]
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "FeatureSet":
        feats = [
            Feature(d["kind"], np.array(d["center"], dtype=np.float64), float(d["bandwidth"]))
            for d in doc["features"]
        ]
        return cls(feats)

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")

    @classmethod
    def load_json(cls, path: str | Path) -> "FeatureSet":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def _check_lambda(lam: float) -> None:
    if not (lam > 0):
        raise ValidationError(f"lambda must be positive, got {lam}")


def eval_feature(feature: Feature, z: np.ndarray) -> float:
    """Value of one feature at one point."""
    fs = FeatureSet([feature])
    return float(fs.evaluate(np.asarray(z, dtype=np.float64)[None, :])[0, 0])


def grad_feature(feature: Feature, z: np.ndarray) -> np.ndarray:
    """Gradient of one feature at one point, shape (n,)."""
    fs = FeatureSet([feature])
    return fs.gradients(np.asarray(z, dtype=np.float64)[None, :])[0, 0]


def rescaled_grad(feature: Feature, z: np.ndarray, lam: float, y_dim: int) -> np.ndarray:
    """Gradient with the first y_dim coordinates divided by lambda.

    At lam = inf the y block is exactly zero (no division is performed).
    """
    fs = FeatureSet([feature])
    return fs.rescaled_gradients(np.asarray(z, dtype=np.float64)[None, :], lam, y_dim)[0, 0]


# ---------------------------------------------------------------------------
# Kernel density estimate used by the bandwidth rule


@dataclass
class DensityEstimate:
    """Product-Gaussian KDE with per-coordinate Silverman bandwidths."""

    support: np.ndarray  # (s, n)
    bandwidths: np.ndarray  # (n,)
    norm: float  # 1 / (s (2 pi)^(n/2) prod h_k)
    _peak: float | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.support.shape[1]

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Density at each query point, strictly positive, shape (N,)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        scaled_q = points / self.bandwidths[None, :]
        scaled_s = self.support / self.bandwidths[None, :]
        sq = (
            np.sum(scaled_q**2, axis=1)[:, None]
            - 2.0 * scaled_q @ scaled_s.T
            + np.sum(scaled_s**2, axis=1)[None, :]
        )
        np.maximum(sq, 0.0, out=sq)
        vals = self.norm * np.sum(np.exp(-0.5 * sq), axis=1)
        return np.maximum(vals, np.finfo(np.float64).tiny)

    def __call__(self, z: np.ndarray) -> float:
        return float(self.evaluate(np.asarray(z, dtype=np.float64)[None, :])[0])

    @property
    def peak_estimate(self) -> float:
        """Rough maximum of the estimate: max over <= 256 strided support points."""
        if self._peak is None:
            s = self.support.shape[0]
            stride = max(1, s // 256)
            self._peak = float(np.max(self.evaluate(self.support[::stride])))
        return self._peak


def silverman_bandwidths(points: np.ndarray) -> np.ndarray:
    """Per-coordinate Silverman bandwidths: sigma_k (4 / ((n+2) count))^(1/(n+4))."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    count, dim = points.shape
    if count < 2:
        raise ValidationError("Silverman bandwidths need at least 2 points")
    sig = np.std(points, axis=0, ddof=1)
    factor = (4.0 / ((dim + 2) * count)) ** (1.0 / (dim + 4))
    h = sig * factor
    # Constant columns degenerate; keep the product kernel finite.
    floor = 1e-12 * np.maximum(1.0, np.abs(points.mean(axis=0)))
    return np.maximum(h, floor)


def kde_fit(points: np.ndarray, rule: str = "silverman", max_support: int = 4000) -> DensityEstimate:
    """Fit a product-Gaussian KDE.

    Supports are strided down to max_support points; the estimate only feeds
    the bandwidth rule, which needs coarse densities, not sharp ones.
    """
    if rule != "silverman":
        raise ValidationError(f"unknown KDE rule {rule!r}")
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[0] > max_support:
        stride = int(np.ceil(points.shape[0] / max_support))
        points = points[::stride]
    points = points.copy()
    h = silverman_bandwidths(points)
    s, dim = points.shape
    norm = 1.0 / (s * (2.0 * math.pi) ** (dim / 2.0) * float(np.prod(h)))
    return DensityEstimate(points, h, norm)


def kde_eval(kde: DensityEstimate, z: np.ndarray) -> float:
    return kde(z)


# ---------------------------------------------------------------------------
# Bandwidth rule and step-size schedule


def bandwidth_for_center(
    center: np.ndarray,
    rho_kde: DensityEstimate,
    mu_kde: DensityEstimate,
    n_p: float,
    dim: int,
    m_t: float,
) -> float:
    """Local bandwidth a = m_t (n_p (1/rho + 1/mu))^(1/dim) at a center.

    Densities are floored at 1e-12 of each estimate's peak before inversion
    so remote centers get large but finite bandwidths.
    """
    if n_p <= 0:
        raise ValidationError(f"n_p must be positive, got {n_p}")
    if dim < 1:
        raise ValidationError(f"dim must be >= 1, got {dim}")
    if m_t <= 0:
        raise ValidationError(f"m_t must be positive, got {m_t}")
    center = np.asarray(center, dtype=np.float64)
    rho = max(rho_kde(center), 1e-12 * rho_kde.peak_estimate)
    mu = max(mu_kde(center), 1e-12 * mu_kde.peak_estimate)
    return float(m_t * (n_p * (1.0 / rho + 1.0 / mu)) ** (1.0 / dim))


@dataclass(frozen=True)
class Schedule:
    """Sigmoid bandwidth multiplier m(t) = 1 + m0 / (1 + exp((t - t_max)/sigma))."""

    m0: float = 10.0
    t_max: int = 5000
    sigma: float | None = None  # defaults to t_max / 10

    def __post_init__(self) -> None:
        if self.m0 < 0:
            raise ValidationError(f"m0 must be >= 0, got {self.m0}")
        if self.t_max < 1:
            raise ValidationError(f"t_max must be >= 1, got {self.t_max}")
        if self.sigma is not None and self.sigma <= 0:
            raise ValidationError(f"sigma must be positive, got {self.sigma}")

    @property
    def effective_sigma(self) -> float:
        return self.t_max / 10.0 if self.sigma is None else self.sigma


def schedule_m(t: int, schedule: Schedule) -> float:
    """Evaluate the multiplier at step t (expit keeps the tails overflow-free)."""
    if t < 0:
        raise ValidationError(f"t must be >= 0, got {t}")
    s = schedule.effective_sigma
    return float(1.0 + schedule.m0 * expit((schedule.t_max - t) / s))


# ---------------------------------------------------------------------------
# Center selection


def select_centers(
    ref_batch: SampleBatch,
    target_batch: SampleBatch,
    count: int,
    rng,
    y_star: np.ndarray | None = None,
    locality_weight: float = 0.0,
    jitter_std: float = 0.0,
    ref_fraction: float = 0.5,
) -> np.ndarray:
    """Draw feature centers from the rows of both batches, shape (count, n).

    ceil(count * ref_fraction) centers come from the reference rows, the rest
    from the target rows, all with replacement. When y_star is given, a
    locality_weight fraction of the drawn centers has its y block replaced by
    y_star plus N(0, jitter_std^2) jitter.
    """
    if count < 1:
        raise ValidationError(f"count must be >= 1, got {count}")
    if not 0.0 <= locality_weight <= 1.0:
        raise ValidationError(f"locality_weight must be in [0, 1], got {locality_weight}")
    if locality_weight > 0.0 and y_star is None:
        raise ValidationError("locality_weight > 0 requires y_star")
    if ref_batch.ambient_dim != target_batch.ambient_dim:
        raise ValidationError("reference and target batches must share dimensions")
    n_ref = math.ceil(count * ref_fraction)
    n_tgt = count - n_ref
    parts = []
    if n_ref:
        idx = rng.integers(0, ref_batch.n_rows, size=n_ref)
        parts.append(ref_batch.points[idx])
    if n_tgt:
        idx = rng.integers(0, target_batch.n_rows, size=n_tgt)
        parts.append(target_batch.points[idx])
    centers = np.vstack(parts).copy()
    if y_star is not None and locality_weight > 0.0:
        y_dim = ref_batch.y_dim
        y_star = np.asarray(y_star, dtype=np.float64).reshape(-1)
        if y_star.shape[0] != y_dim:
            raise ValidationError(f"y_star must have length {y_dim}")
        n_local = int(round(locality_weight * count))
        if n_local:
            which = rng.choice(count, size=n_local, replace=False)
            jitter = jitter_std * rng.standard_normal((n_local, y_dim))
            centers[which, :y_dim] = y_star[None, :] + jitter
    return centers
