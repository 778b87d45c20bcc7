"""Transport flow engine.

The flow is a composition of elementary maps

    z_{t+1} = z_t - sum_j beta_j grad_lam F_j(z_t)

where the F_j are radial features and grad_lam divides the y block of the
gradient by lambda (dropping it exactly at lambda = inf, which freezes the
y coordinates and makes every map block triangular).

Each step solves a one-step Newton system for beta on the empirical dual
objective

    J(beta) = mean_ref phi_beta + mean_target phi_beta^c,
    phi_beta = sum_j beta_j F_j,

whose gradient at beta = 0 is the feature moment mismatch g and whose
Hessian is -G for the Gram matrix

    G_jk = mean_target < grad F_j, grad_lam F_k >.

The Newton ascent direction is therefore beta = (G + tau I)^{-1} g, scaled
by a damping factor.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict, fields, is_dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.optimize

from .core import (
    STREAM_CENTERS,
    STREAM_MARKERS,
    STREAM_REFERENCE,
    STREAM_SPLIT,
    JointDataset,
    NumericsError,
    RngState,
    SampleBatch,
    ValidationError,
    split_dataset,
    build_product_reference,
    append_markers,
)
from .features import (
    DensityEstimate,
    Feature,
    FeatureSet,
    Schedule,
    bandwidth_for_center,
    kde_fit,
    schedule_m,
    select_centers,
)
from .transforms import ColumnTransform, fit_column_transform

TRANSFORM_CHOICES = ("none", "standardize", "log", "log_standardize")


@dataclass(frozen=True)
class ElementaryMap:
    """One flow step: features, coefficients, and the cost weight lambda."""

    feature_set: FeatureSet
    beta: np.ndarray
    lam: float

    def __post_init__(self) -> None:
        beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        if beta.shape[0] != len(self.feature_set):
            raise ValidationError(
                f"beta has {beta.shape[0]} entries for {len(self.feature_set)} features"
            )
        if not np.all(np.isfinite(beta)):
            raise ValidationError("beta must be finite")
        object.__setattr__(self, "beta", beta)
        if not self.lam > 0:
            raise ValidationError(f"lambda must be positive, got {self.lam}")


@dataclass
class FlowConfig:
    """Knobs for fitting a flow. Defaults follow the reference experiments."""

    p: int = 10                      # features per step
    epsilon: float = 1e-6            # termination threshold on max row movement
    t_max: int = 5000                # step cap
    n_p: float = 0.01                # neighbor-count factor in the bandwidth rule
    m0: float = 10.0                 # schedule amplitude
    sigma: float | None = None       # schedule width, None -> t_max / 10
    kde_refresh_interval: int = 200  # steps between reference KDE refits
    ridge: float | None = None       # absolute Gram regularization override
    ridge_rel: float = 1e-8          # default tau = ridge_rel * tr(G)/p
    damping: float = 1.0             # Newton step scale
    lam: float = math.inf            # cost weight; inf freezes y exactly
    kernel: str = "erf_radial"
    locality_weight: float = 0.0     # fraction of centers pinned near y*
    center_ref_fraction: float = 0.5
    bandwidth_dim: int | None = None  # exponent dim in the rule, None -> ambient
    kde_max_support: int = 4000
    seed: int = 0
    # dataset preparation (fit_flow wrapper)
    reference_reuse: bool = True     # reference marginals from the full joint; False splits halves
    target_fraction: float = 0.5     # target share of rows when reference_reuse is False
    reference_mode: str = "permutation"
    reference_size: int | None = None
    marker_count: int = 0
    transform: str = "none"

    def __post_init__(self) -> None:
        if self.p < 1:
            raise ValidationError(f"p must be >= 1, got {self.p}")
        if not self.epsilon > 0:
            raise ValidationError(f"epsilon must be positive, got {self.epsilon}")
        if self.t_max < 1:
            raise ValidationError(f"t_max must be >= 1, got {self.t_max}")
        if not 0 < self.damping <= 1:
            raise ValidationError(f"damping must be in (0, 1], got {self.damping}")
        if not self.lam > 0:
            raise ValidationError(f"lambda must be positive, got {self.lam}")
        if self.ridge is not None and self.ridge < 0:
            raise ValidationError(f"ridge must be >= 0, got {self.ridge}")
        if self.ridge_rel < 0:
            raise ValidationError(f"ridge_rel must be >= 0, got {self.ridge_rel}")
        if self.kde_refresh_interval < 1:
            raise ValidationError("kde_refresh_interval must be >= 1")
        if self.transform not in TRANSFORM_CHOICES:
            raise ValidationError(f"unknown transform {self.transform!r}")
        if self.kernel not in ("erf_radial", "inverse_multiquadric"):
            raise ValidationError(f"unknown kernel {self.kernel!r}")
        if not 0 <= self.locality_weight <= 1:
            raise ValidationError("locality_weight must be in [0, 1]")
        if not 0 < self.target_fraction < 1:
            raise ValidationError("target_fraction must be in (0, 1)")
        if self.marker_count < 0:
            raise ValidationError("marker_count must be >= 0")


@dataclass
class FlowDiagnostics:
    """Per-step traces collected while fitting."""

    max_displacement: list[float] = field(default_factory=list)
    gradient_norm: list[float] = field(default_factory=list)
    feature_count: list[int] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)


@dataclass
class FlowModel:
    """A fitted flow: ordered elementary maps plus bookkeeping."""

    steps: list[ElementaryMap]
    y_dim: int
    x_dim: int
    diagnostics: FlowDiagnostics
    terminated_by: str
    transform: ColumnTransform | None = None
    config: dict | None = None

    @property
    def all_lambda_inf(self) -> bool:
        return all(math.isinf(s.lam) for s in self.steps)


# ---------------------------------------------------------------------------
# Newton building blocks


def objective_gradient(
    features: FeatureSet, ref_batch: SampleBatch, target_batch: SampleBatch
) -> np.ndarray:
    """Moment mismatch g_j = mean_ref F_j - mean_target F_j, shape (p,).

    Marker rows are excluded from both means: the target carries no mass at
    y_star, so marker mass in the reference mean would be a bias no frozen-y
    step can remove.
    """
    if ref_batch.body.shape[0] == 0 or target_batch.body.shape[0] == 0:
        raise ValidationError("objective_gradient needs non-empty batches")
    ref_mean = features.evaluate(ref_batch.body).mean(axis=0)
    tgt_mean = features.evaluate(target_batch.body).mean(axis=0)
    return ref_mean - tgt_mean


def gram_matrix(
    features: FeatureSet, target_batch: SampleBatch, lam: float
) -> np.ndarray:
    """G_jk = mean over target rows of <grad F_j, grad_lam F_k>, shape (p, p).

    Marker rows are excluded, matching objective_gradient.
    """
    body = target_batch.body
    if body.shape[0] == 0:
        raise ValidationError("gram_matrix needs a non-empty target batch")
    grads = features.gradients(body)  # (M, p, n)
    scaled = grads.copy()
    y_dim = target_batch.y_dim
    if y_dim > 0:
        if math.isinf(lam):
            scaled[:, :, :y_dim] = 0.0
        else:
            scaled[:, :, :y_dim] /= lam
    g = np.einsum("mpn,mqn->pq", grads, scaled) / body.shape[0]
    return 0.5 * (g + g.T)


def newton_coefficients(
    g: np.ndarray, gram: np.ndarray, ridge: float, damping: float = 1.0
) -> np.ndarray:
    """Solve (G + ridge I) beta = g and scale by the damping factor."""
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    gram = np.asarray(gram, dtype=np.float64)
    p = g.shape[0]
    if gram.shape != (p, p):
        raise ValidationError(f"gram must be ({p}, {p}), got {gram.shape}")
    if ridge < 0:
        raise ValidationError(f"ridge must be >= 0, got {ridge}")
    if not 0 < damping <= 1:
        raise ValidationError(f"damping must be in (0, 1], got {damping}")
    system = gram + ridge * np.eye(p)
    try:
        cho = scipy.linalg.cho_factor(system, lower=True)
        beta = scipy.linalg.cho_solve(cho, g)
    except scipy.linalg.LinAlgError as exc:
        raise NumericsError(
            f"Gram system not positive definite ({exc}); increase the ridge"
        ) from exc
    return damping * beta


def _shift_points(
    points: np.ndarray, disp: np.ndarray, lam: float, y_dim: int
) -> np.ndarray:
    """points - disp, leaving the y block untouched (bitwise) at lam = inf."""
    if math.isinf(lam) and y_dim > 0:
        out = points.copy()
        out[:, y_dim:] = points[:, y_dim:] - disp[:, y_dim:]
    else:
        out = points - disp
    return out


def apply_elementary(emap: ElementaryMap, batch: SampleBatch) -> SampleBatch:
    """Apply one elementary map to a batch of points."""
    disp = emap.feature_set.displacement(batch.points, emap.beta, emap.lam, batch.y_dim)
    out = _shift_points(batch.points, disp, emap.lam, batch.y_dim)
    if not np.all(np.isfinite(out)):
        bad = int(np.argwhere(~np.isfinite(out).all(axis=1))[0, 0])
        raise NumericsError(f"elementary map produced non-finite values at row {bad}")
    return SampleBatch(out, batch.y_dim, batch.x_dim, batch.marker_count)


# ---------------------------------------------------------------------------
# c-transform and its quadratic expansion


def _phi_and_grad(features: FeatureSet, beta: np.ndarray, z: np.ndarray):
    vals = features.evaluate(z[None, :])[0]
    grads = features.gradients(z[None, :])[0]  # (p, n)
    return float(vals @ beta), grads.T @ beta  # scalar, (n,)


def c_transform_numeric(
    features: FeatureSet,
    beta: np.ndarray,
    z_prime: np.ndarray,
    lam: float,
    y_dim: int,
    n_starts: int = 4,
    tol: float = 1e-14,
    max_iter: int = 400,
) -> float:
    """phi^c(z') = min_z [ c_lam(z, z') - phi(z) ] by damped fixed point + descent.

    The stationarity condition is z = z' + sum_j beta_j grad_lam F_j(z), a
    contraction for small beta; when the fixed point stalls or beta is large,
    multi-start L-BFGS in cost-scaled coordinates takes over. The smallest
    value over all candidates is returned.
    """
    if not lam > 0:
        raise ValidationError(f"lambda must be positive, got {lam}")
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    if beta.shape[0] != len(features):
        raise ValidationError("beta length must match the feature count")
    z_prime = np.asarray(z_prime, dtype=np.float64).reshape(-1)
    if z_prime.shape[0] != features.dim:
        raise ValidationError("z_prime dimension must match the features")
    if not np.any(beta):
        return 0.0  # minimizer is z' itself and both terms vanish there

    inf_lam = math.isinf(lam)

    def value(z: np.ndarray) -> float:
        dy = z[:y_dim] - z_prime[:y_dim]
        dx = z[y_dim:] - z_prime[y_dim:]
        cost_y = 0.0 if inf_lam else 0.5 * lam * float(dy @ dy)
        phi, _ = _phi_and_grad(features, beta, z)
        return cost_y + 0.5 * float(dx @ dx) - phi

    def fixed_point() -> np.ndarray:
        z = z_prime.copy()
        scale = 1.0 + float(np.linalg.norm(z_prime))
        for _ in range(max_iter):
            step = features.rescaled_gradients(z[None, :], lam, y_dim)[0].T @ beta
            z_new = z_prime + step
            if inf_lam:
                z_new[:y_dim] = z_prime[:y_dim]
            delta = float(np.linalg.norm(z_new - z))
            z = z_new
            if delta < tol * scale:
                break
        return z

    candidates = [z_prime, fixed_point()]

    # L-BFGS in u = D^(1/2) z coordinates so the cost part is isotropic.
    # At lam = inf only the x block is free.
    sqrt_lam = math.sqrt(lam) if not inf_lam else 1.0

    def pack(z: np.ndarray) -> np.ndarray:
        if inf_lam:
            return z[y_dim:].copy()
        u = z.copy()
        u[:y_dim] *= sqrt_lam
        return u

    def unpack(u: np.ndarray) -> np.ndarray:
        if inf_lam:
            z = z_prime.copy()
            z[y_dim:] = u
            return z
        z = u.copy()
        z[:y_dim] /= sqrt_lam
        return z

    def fun(u: np.ndarray):
        z = unpack(u)
        phi, grad_phi = _phi_and_grad(features, beta, z)
        dy = z[:y_dim] - z_prime[:y_dim]
        dx = z[y_dim:] - z_prime[y_dim:]
        if inf_lam:
            val = 0.5 * float(dx @ dx) - phi
            grad = dx - grad_phi[y_dim:]
        else:
            val = 0.5 * lam * float(dy @ dy) + 0.5 * float(dx @ dx) - phi
            grad = np.concatenate([sqrt_lam * dy - grad_phi[:y_dim] / sqrt_lam,
                                   dx - grad_phi[y_dim:]])
        return val, grad

    # Minimizer displacement obeys ||D (z - z')|| <= sum |beta_j| sup ||grad F||;
    # erf_radial gradients are below 1, inverse multiquadric below 1/a.
    sup_g = np.where(
        np.array([k == "erf_radial" for k in features.kinds]),
        1.0,
        1.0 / features.bandwidths,
    )
    radius = float(np.abs(beta) @ sup_g) + 1e-12
    rng = np.random.Generator(np.random.Philox(12345))
    starts = [pack(z_prime), pack(candidates[1])]
    for _ in range(max(0, n_starts - 2)):
        jitter = rng.standard_normal(starts[0].shape[0])
        starts.append(pack(z_prime) + radius * jitter)
    for u0 in starts:
        res = scipy.optimize.minimize(
            fun, u0, jac=True, method="L-BFGS-B",
            options={"gtol": 1e-12, "ftol": 1e-18, "maxiter": 200},
        )
        candidates.append(unpack(res.x))
    return min(value(z) for z in candidates)


def expansion_second_order(
    features: FeatureSet,
    beta: np.ndarray,
    z_prime: np.ndarray,
    lam: float,
    y_dim: int,
) -> float:
    """Quadratic c-transform expansion: -sum_j b_j F_j - 0.5 b' A b at z'."""
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    z_prime = np.asarray(z_prime, dtype=np.float64).reshape(-1)
    vals = features.evaluate(z_prime[None, :])[0]
    grads = features.gradients(z_prime[None, :])[0]  # (p, n)
    scaled = grads.copy()
    if y_dim > 0:
        if math.isinf(lam):
            scaled[:, :y_dim] = 0.0
        else:
            scaled[:, :y_dim] /= lam
    quad = grads @ scaled.T  # A_jk = <grad F_j, grad_lam F_k>
    return float(-(beta @ vals) - 0.5 * beta @ quad @ beta)


def empirical_dual_objective(
    features: FeatureSet,
    beta: np.ndarray,
    ref_batch: SampleBatch,
    target_batch: SampleBatch,
    lam: float,
    **ct_kwargs,
) -> float:
    """J(beta) = mean_ref phi_beta + mean_target phi_beta^c (numeric c-transform)."""
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    y_dim = ref_batch.y_dim
    phi_mean = float((features.evaluate(ref_batch.points) @ beta).mean())
    ct_vals = [
        c_transform_numeric(features, beta, row, lam, y_dim, **ct_kwargs)
        for row in target_batch.points
    ]
    return phi_mean + float(np.mean(ct_vals))


# ---------------------------------------------------------------------------
# Fitting


def fit_flow_batches(
    reference: SampleBatch,
    target: SampleBatch,
    config: FlowConfig,
    y_star: np.ndarray | None = None,
    rng: RngState | None = None,
    step_callback=None,
) -> FlowModel:
    """Fit a flow pushing the reference batch onto the target batch.

    Works on a private copy of the reference points; fitting stops when the
    largest row movement drops below config.epsilon or after t_max steps.
    step_callback(t, points, info) is invoked after each step with the live
    point buffer (callbacks must not mutate it). Recover the pushed cloud
    with push_forward(model, reference).
    """
    if reference.y_dim != target.y_dim or reference.x_dim != target.x_dim:
        raise ValidationError("reference and target batches must share dimensions")
    if rng is None:
        rng = RngState(config.seed)
    y_dim, x_dim = reference.y_dim, reference.x_dim
    ambient = y_dim + x_dim
    bw_dim = config.bandwidth_dim if config.bandwidth_dim is not None else ambient
    if y_star is not None:
        y_star = np.asarray(y_star, dtype=np.float64).reshape(-1)
        if y_star.shape[0] != y_dim:
            raise ValidationError(f"y_star must have length {y_dim}")
    use_locality = y_star is not None and config.locality_weight > 0.0

    centers_gen = rng.generator(STREAM_CENTERS)
    boot_gen = rng.generator(STREAM_CENTERS, 1)
    schedule = Schedule(config.m0, config.t_max, config.sigma)
    mu_kde = kde_fit(target.points, max_support=config.kde_max_support)

    z = reference.points.copy()
    steps: list[ElementaryMap] = []
    diag = FlowDiagnostics()
    terminated_by = "t_max"
    rho_kde: DensityEstimate | None = None
    jitter_std: float | None = None

    for t in range(config.t_max):
        tic = time.perf_counter()
        m_t = schedule_m(t, schedule)
        if t % config.kde_refresh_interval == 0:
            rho_kde = kde_fit(z, max_support=config.kde_max_support)
        cur = SampleBatch(z, y_dim, x_dim, reference.marker_count)

        if use_locality and jitter_std is None:
            # Bootstrap the jitter scale from a throwaway no-jitter center draw.
            prov = select_centers(
                cur, target, config.p, boot_gen,
                ref_fraction=config.center_ref_fraction,
            )
            prov_bw = [
                bandwidth_for_center(c, rho_kde, mu_kde, config.n_p, bw_dim, m_t)
                for c in prov
            ]
            jitter_std = 0.1 * float(np.median(prov_bw))

        centers = select_centers(
            cur, target, config.p, centers_gen,
            y_star=y_star if use_locality else None,
            locality_weight=config.locality_weight if use_locality else 0.0,
            jitter_std=jitter_std or 0.0,
            ref_fraction=config.center_ref_fraction,
        )
        bandwidths = np.array([
            bandwidth_for_center(c, rho_kde, mu_kde, config.n_p, bw_dim, m_t)
            for c in centers
        ])
        if use_locality:
            jitter_std = 0.1 * float(np.median(bandwidths))
        fs = FeatureSet([
            Feature(config.kernel, c, b) for c, b in zip(centers, bandwidths)
        ])

        g = objective_gradient(fs, cur, target)
        gram = gram_matrix(fs, target, config.lam)
        ridge = (
            config.ridge
            if config.ridge is not None
            else config.ridge_rel * float(np.trace(gram)) / config.p
        )
        beta = newton_coefficients(g, gram, ridge, config.damping)
        emap = ElementaryMap(fs, beta, config.lam)

        disp = fs.displacement(z, beta, config.lam, y_dim)
        max_disp = float(np.sqrt(np.max(np.sum(disp**2, axis=1))))
        z = _shift_points(z, disp, config.lam, y_dim)
        if not np.all(np.isfinite(z)):
            bad = int(np.argwhere(~np.isfinite(z).all(axis=1))[0, 0])
            raise NumericsError(f"flow diverged at step {t}, row {bad}")

        steps.append(emap)
        diag.max_displacement.append(max_disp)
        diag.gradient_norm.append(float(np.linalg.norm(g)))
        diag.feature_count.append(config.p)
        diag.wall_time.append(time.perf_counter() - tic)
        if step_callback is not None:
            step_callback(t, z, {
                "max_displacement": max_disp,
                "gradient_norm": diag.gradient_norm[-1],
                "m_t": m_t,
                "median_bandwidth": float(np.median(bandwidths)),
            })
        if max_disp < config.epsilon:
            terminated_by = "threshold"
            break

    cfg = asdict(config)
    return FlowModel(steps, y_dim, x_dim, diag, terminated_by, config=cfg)


def prepare_reference(
    joint: JointDataset,
    config: FlowConfig,
    y_star: np.ndarray | None = None,
):
    """Deterministic preprocessing shared by fitting and joint resampling.

    Returns (reference, target_ds, transform, y_star_int): the product
    reference batch (markers appended when y_star is given), the target rows
    (the full joint under reference_reuse, otherwise the held split), the
    fitted column transform (None for "none"), and y_star in transformed
    coordinates. Driven entirely by config.seed, so rebuilding from a model's
    config echo reproduces the reference bitwise.
    """
    if joint.n_rows < 2:
        raise ValidationError("joint dataset too small to split")
    rng = RngState(config.seed)
    transform = fit_column_transform(joint.pairs, config.transform)
    if transform is not None:
        pairs = transform.forward(joint.pairs)
        joint_int = JointDataset(pairs, joint.y_dim, joint.x_dim, seed=joint.seed)
        y_star_int = (
            None
            if y_star is None
            else transform.forward(
                np.asarray(y_star, dtype=np.float64).reshape(1, -1), offset=0
            )[0]
        )
    else:
        joint_int = joint
        y_star_int = None if y_star is None else np.asarray(y_star, dtype=np.float64)

    if config.reference_reuse:
        # Frozen-y flows cannot repair a reference/target y-marginal gap, so
        # the reference is built from the same rows it must be pushed onto.
        ref_src, target_ds = joint_int, joint_int
    else:
        ref_src, target_ds = split_dataset(
            joint_int, config.target_fraction, rng.generator(STREAM_SPLIT)
        )
    size = config.reference_size if config.reference_size is not None else ref_src.n_rows
    reference = build_product_reference(
        ref_src, size, config.reference_mode, rng.generator(STREAM_REFERENCE)
    )
    if y_star_int is not None and config.marker_count > 0:
        marker_gen = rng.generator(STREAM_MARKERS)
        idx = marker_gen.integers(0, ref_src.n_rows, size=config.marker_count)
        reference = append_markers(reference, ref_src.x[idx], y_star_int)
    return reference, target_ds, transform, y_star_int


def fit_flow(
    joint: JointDataset,
    config: FlowConfig,
    y_star: np.ndarray | None = None,
    step_callback=None,
) -> FlowModel:
    """Fit a flow from a joint dataset.

    Builds product reference samples from the joint's marginals (from the
    full rows under config.reference_reuse, otherwise from a held split),
    optionally appends marker rows at y_star, and runs the fitting loop.
    When config.transform is not "none", fitting happens in transformed
    coordinates and the transform is stored in the model for automatic
    inversion.
    """
    reference, target_ds, transform, y_star_int = prepare_reference(
        joint, config, y_star
    )
    rng = RngState(config.seed)
    model = fit_flow_batches(
        reference, target_ds.as_batch(), config, y_star_int, rng, step_callback
    )
    model.transform = transform
    return model


# ---------------------------------------------------------------------------
# Applying fitted flows


def push_forward(model: FlowModel, batch: SampleBatch) -> SampleBatch:
    """Run a batch through every step of a fitted flow.

    For all-lambda-inf models the output y block is exactly the input y block
    (the y map is the identity by construction, so it is copied verbatim,
    which also sidesteps transform round-trip rounding).
    """
    if batch.y_dim != model.y_dim or batch.x_dim != model.x_dim:
        raise ValidationError("batch dimensions do not match the model")
    pts = batch.points
    inner = model.transform.forward(pts) if model.transform is not None else pts.copy()
    y_dim = model.y_dim
    for emap in model.steps:
        disp = emap.feature_set.displacement(inner, emap.beta, emap.lam, y_dim)
        inner = _shift_points(inner, disp, emap.lam, y_dim)
    out = model.transform.inverse(inner) if model.transform is not None else inner
    if model.all_lambda_inf and y_dim > 0:
        out[:, :y_dim] = pts[:, :y_dim]
    if not np.all(np.isfinite(out)):
        bad = int(np.argwhere(~np.isfinite(out).all(axis=1))[0, 0])
        raise NumericsError(f"push_forward produced non-finite values at row {bad}")
    return SampleBatch(out, batch.y_dim, batch.x_dim, batch.marker_count)


def conditional_sample(
    model: FlowModel, y_star: np.ndarray, x_samples: np.ndarray
) -> np.ndarray:
    """Map x-marginal samples to conditional samples at y_star, shape (k, x_dim).

    Requires every step to have lambda = inf so the y block is provably fixed.
    """
    if not model.all_lambda_inf:
        raise ValidationError("conditional sampling requires all steps at lambda = inf")
    y_star = np.asarray(y_star, dtype=np.float64).reshape(-1)
    if y_star.shape[0] != model.y_dim:
        raise ValidationError(f"y_star must have length {model.y_dim}")
    x_samples = np.atleast_2d(np.asarray(x_samples, dtype=np.float64))
    if x_samples.shape[1] != model.x_dim:
        raise ValidationError(f"x_samples must have {model.x_dim} columns")
    k = x_samples.shape[0]
    rows = np.hstack([np.tile(y_star, (k, 1)), x_samples])
    batch = SampleBatch(rows, model.y_dim, model.x_dim)
    pushed = push_forward(model, batch)
    if model.y_dim > 0 and not np.array_equal(pushed.y, batch.y):
        raise NumericsError("y block moved during conditional sampling")
    return pushed.x


# ---------------------------------------------------------------------------
# Model serialization


def _encode_float(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return float(v)


def _decode_float(v) -> float:
    if isinstance(v, str):
        return float(v)
    return float(v)


def encode_json_value(v):
    """Recursively encode a config value, mapping inf floats to strings."""
    if isinstance(v, bool) or v is None or isinstance(v, (int, str)):
        return v
    if isinstance(v, float):
        return _encode_float(v)
    if isinstance(v, np.floating):
        return _encode_float(float(v))
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.ndarray):
        return [encode_json_value(x) for x in v.tolist()]
    if isinstance(v, dict):
        return {k: encode_json_value(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [encode_json_value(x) for x in v]
    if is_dataclass(v) and not isinstance(v, type):
        return encode_json_value(asdict(v))
    raise ValidationError(f"cannot encode config value {v!r}")


def flow_config_from_dict(doc: dict) -> FlowConfig:
    """Build a FlowConfig from a JSON-ish dict, rejecting unknown keys."""
    field_types = {f.name: f for f in fields(FlowConfig)}
    kwargs = {}
    for key, value in doc.items():
        if key not in field_types:
            raise ValidationError(f"unknown flow config key {key!r}")
        if isinstance(value, str) and key in ("lam", "sigma", "ridge", "ridge_rel", "epsilon"):
            value = float(value)
        kwargs[key] = value
    return FlowConfig(**kwargs)


def model_to_json_dict(model: FlowModel) -> dict:
    cfg = None if model.config is None else encode_json_value(model.config)
    return {
        "format": "otflow-model-v1",
        "y_dim": model.y_dim,
        "x_dim": model.x_dim,
        "terminated_by": model.terminated_by,
        "config": cfg,
        "transform": None if model.transform is None else model.transform.to_json_dict(),
        "steps": [
            {
                "lambda": _encode_float(s.lam),
                "beta": [float(b) for b in s.beta],
                "features": s.feature_set.to_json_dict()["features"],
            }
            for s in model.steps
        ],
        "diagnostics": {
            "max_displacement": [float(v) for v in model.diagnostics.max_displacement],
            "gradient_norm": [float(v) for v in model.diagnostics.gradient_norm],
            "feature_count": [int(v) for v in model.diagnostics.feature_count],
        },
    }


def model_from_json_dict(doc: dict) -> FlowModel:
    if doc.get("format") != "otflow-model-v1":
        raise ValidationError(f"unrecognized model format {doc.get('format')!r}")
    steps = [
        ElementaryMap(
            FeatureSet.from_json_dict({"features": sd["features"]}),
            np.array(sd["beta"], dtype=np.float64),
            _decode_float(sd["lambda"]),
        )
        for sd in doc["steps"]
    ]
    diag = FlowDiagnostics(
        max_displacement=[float(v) for v in doc["diagnostics"]["max_displacement"]],
        gradient_norm=[float(v) for v in doc["diagnostics"]["gradient_norm"]],
        feature_count=[int(v) for v in doc["diagnostics"]["feature_count"]],
    )
    transform = (
        None if doc.get("transform") is None
        else ColumnTransform.from_json_dict(doc["transform"])
    )
    return FlowModel(
        steps=steps,
        y_dim=int(doc["y_dim"]),
        x_dim=int(doc["x_dim"]),
        diagnostics=diag,
        terminated_by=str(doc["terminated_by"]),
        transform=transform,
        config=doc.get("config"),
    )


def save_model(model: FlowModel, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(
        json.dumps(model_to_json_dict(model), sort_keys=True) + "\n"
    )


def load_model(path: str | Path) -> FlowModel:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"no such model file: {path}")
    return model_from_json_dict(json.loads(path.read_text()))
