"""Benchmark problems: a bimodal 1-D conditional toy and a predator-prey
inverse problem with a known ODE forward model.

Joint rows are laid out (y, x): observations first, parameters last.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np
import scipy.integrate

from .core import (
    STREAM_NOISE,
    STREAM_ROWS,
    JointDataset,
    NumericsError,
    RngState,
    ValidationError,
)


class IntegrationError(NumericsError):
    """ODE integration produced unusable states."""


# ---------------------------------------------------------------------------
# Banana problem: X ~ N(0, 1), Y = 0.5 X^2 - 1 + N(0, 1)


@dataclass(frozen=True)
class BananaProblem:
    curvature: float = 0.5
    offset: float = -1.0
    noise_std: float = 1.0
    prior_std: float = 1.0

    @property
    def y_dim(self) -> int:
        return 1

    @property
    def x_dim(self) -> int:
        return 1


def banana_joint_sample(
    n: int, rng, problem: BananaProblem = BananaProblem(), seed: int | None = None
) -> JointDataset:
    """Draw n joint rows (y, x)."""
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    x = problem.prior_std * rng.standard_normal(n)
    y = problem.curvature * x**2 + problem.offset + problem.noise_std * rng.standard_normal(n)
    return JointDataset(np.column_stack([y, x]), 1, 1, seed=seed)


def banana_conditional_pdf(
    x_grid: np.ndarray, y_star: float, problem: BananaProblem = BananaProblem()
) -> np.ndarray:
    """Exact conditional density mu(x | y_star) on a grid, by quadrature.

    The grid must span at least +-3 prior standard deviations so the
    normalized values are meaningful on it.
    """
    x_grid = np.asarray(x_grid, dtype=np.float64)
    s = problem.prior_std
    if x_grid.min() > -3 * s or x_grid.max() < 3 * s:
        raise ValidationError(
            "x_grid must cover at least 6 prior standard deviations "
            f"(got [{x_grid.min()}, {x_grid.max()}])"
        )

    def unnorm(x):
        mean_y = problem.curvature * x**2 + problem.offset
        return np.exp(
            -0.5 * ((y_star - mean_y) / problem.noise_std) ** 2
            - 0.5 * (x / s) ** 2
        )

    z, err = scipy.integrate.quad(
        unnorm, -np.inf, np.inf, epsabs=1e-13, epsrel=1e-13, limit=200
    )
    if not (np.isfinite(z) and z > 0) or err > 1e-9 * z:
        raise NumericsError(f"conditional normalizer failed: z={z}, err={err}")
    return unnorm(x_grid) / z


# ---------------------------------------------------------------------------
# Predator-prey problem


@dataclass(frozen=True)
class LVParams:
    alpha: float
    beta: float
    gamma: float
    delta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma, self.delta])


def _params_array(params) -> np.ndarray:
    if isinstance(params, LVParams):
        return params.as_array()
    arr = np.asarray(params, dtype=np.float64).reshape(-1)
    if arr.shape[0] != 4:
        raise ValidationError(f"params must have 4 entries, got {arr.shape[0]}")
    return arr


@dataclass(frozen=True)
class LVProblem:
    """Predator-prey inverse problem configuration.

    The vector field is

        dp1/dt = alpha p1 - beta p1 p2
        dp2/dt = -gamma p2 + delta p1 p2

    (flip_predator_gain=True flips the delta term to -delta p1 p2).
    Observations are the two populations at times k * dt_obs, perturbed by
    Gaussian noise on the log populations. The prior is log-normal with
    interleaved log-means: growth rates near e^-0.125, interaction rates
    near e^-3.
    """

    initial_state: tuple[float, float] = (30.0, 1.0)
    t_end: float = 20.0
    rk4_dt: float = 0.01
    dt_obs: float = 2.0
    noise_var: float = 0.1
    prior_mean_log: tuple[float, float, float, float] = (-0.125, -3.0, -0.125, -3.0)
    prior_var_log: float = 0.5
    flip_predator_gain: bool = False

    def __post_init__(self) -> None:
        if self.rk4_dt <= 0 or self.t_end <= 0 or self.dt_obs <= 0:
            raise ValidationError("time parameters must be positive")
        ratio = self.dt_obs / self.rk4_dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValidationError("rk4_dt must divide dt_obs")
        ratio = self.t_end / self.dt_obs
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValidationError("dt_obs must divide t_end")
        if self.noise_var < 0:
            raise ValidationError("noise_var must be >= 0")
        if self.prior_var_log <= 0:
            raise ValidationError("prior_var_log must be positive")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.rk4_dt))

    @property
    def n_obs_times(self) -> int:
        # observations at k * dt_obs for k = 1 .. t_end/dt_obs - 1
        return int(round(self.t_end / self.dt_obs)) - 1

    @property
    def obs_step_indices(self) -> np.ndarray:
        stride = int(round(self.dt_obs / self.rk4_dt))
        return stride * np.arange(1, self.n_obs_times + 1)

    @property
    def y_dim(self) -> int:
        return 2 * self.n_obs_times

    @property
    def x_dim(self) -> int:
        return 4


LV_TRUE_PARAMS = np.array([0.83, 0.041, 1.08, 0.04])


@dataclass
class Trajectory:
    times: np.ndarray  # (T,)
    states: np.ndarray  # (2, T)

    def at_step(self, idx: int) -> np.ndarray:
        return self.states[:, idx]


def lv_rhs(p, params, flip_predator_gain: bool = False) -> np.ndarray:
    """Predator-prey vector field at state p = (prey, predator)."""
    a, b, g, d = _params_array(params)
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.shape[0] != 2:
        raise ValidationError(f"state must have 2 entries, got {p.shape[0]}")
    sgn = -1.0 if flip_predator_gain else 1.0
    return np.array([a * p[0] - b * p[0] * p[1], -g * p[1] + sgn * d * p[0] * p[1]])


def lv_simulate(params, problem: LVProblem = LVProblem()) -> Trajectory:
    """Classical fixed-step RK4 over [0, t_end], recording the full grid."""
    a, b, g, d = (float(v) for v in _params_array(params))
    sgn = -1.0 if problem.flip_predator_gain else 1.0
    dt = problem.rk4_dt
    n = problem.n_steps
    p1, p2 = (float(v) for v in problem.initial_state)
    out = np.empty((2, n + 1))
    out[0, 0], out[1, 0] = p1, p2
    half = 0.5 * dt
    sixth = dt / 6.0
    for i in range(n):
        k1a = a * p1 - b * p1 * p2
        k1b = sgn * d * p1 * p2 - g * p2
        u1, u2 = p1 + half * k1a, p2 + half * k1b
        k2a = a * u1 - b * u1 * u2
        k2b = sgn * d * u1 * u2 - g * u2
        u1, u2 = p1 + half * k2a, p2 + half * k2b
        k3a = a * u1 - b * u1 * u2
        k3b = sgn * d * u1 * u2 - g * u2
        u1, u2 = p1 + dt * k3a, p2 + dt * k3b
        k4a = a * u1 - b * u1 * u2
        k4b = sgn * d * u1 * u2 - g * u2
        p1 = p1 + sixth * (k1a + 2.0 * (k2a + k3a) + k4a)
        p2 = p2 + sixth * (k1b + 2.0 * (k2b + k3b) + k4b)
        out[0, i + 1], out[1, i + 1] = p1, p2
        if not (math.isfinite(p1) and math.isfinite(p2)) or abs(p1) > 1e12 or abs(p2) > 1e12:
            raise IntegrationError(
                f"integration diverged at t={dt * (i + 1):.2f} for params "
                f"({a}, {b}, {g}, {d})"
            )
    if out.min() < -1e-6:
        raise IntegrationError(
            f"populations went negative beyond tolerance for params ({a}, {b}, {g}, {d})"
        )
    times = dt * np.arange(n + 1)
    return Trajectory(times, out)


def _rk4_batch(params: np.ndarray, problem: LVProblem) -> tuple[np.ndarray, np.ndarray]:
    """Integrate many parameter rows at once; states at observation times.

    Returns (obs_states (n, n_obs, 2), ok (n,) bool). Rows that go non-finite
    or negative are flagged instead of raising.
    """
    params = np.atleast_2d(np.asarray(params, dtype=np.float64))
    n = params.shape[0]
    a, b, g, d = params.T
    sgn = -1.0 if problem.flip_predator_gain else 1.0
    dt = problem.rk4_dt
    half, sixth = 0.5 * dt, dt / 6.0
    p1 = np.full(n, problem.initial_state[0])
    p2 = np.full(n, problem.initial_state[1])
    ok = np.ones(n, dtype=bool)
    obs_idx = set(int(i) for i in problem.obs_step_indices)
    obs = np.empty((n, problem.n_obs_times, 2))
    row = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(problem.n_steps):
            k1a = a * p1 - b * p1 * p2
            k1b = sgn * d * p1 * p2 - g * p2
            u1, u2 = p1 + half * k1a, p2 + half * k1b
            k2a = a * u1 - b * u1 * u2
            k2b = sgn * d * u1 * u2 - g * u2
            u1, u2 = p1 + half * k2a, p2 + half * k2b
            k3a = a * u1 - b * u1 * u2
            k3b = sgn * d * u1 * u2 - g * u2
            u1, u2 = p1 + dt * k3a, p2 + dt * k3b
            k4a = a * u1 - b * u1 * u2
            k4b = sgn * d * u1 * u2 - g * u2
            p1 = p1 + sixth * (k1a + 2.0 * (k2a + k3a) + k4a)
            p2 = p2 + sixth * (k1b + 2.0 * (k2b + k3b) + k4b)
            ok &= np.isfinite(p1) & np.isfinite(p2)
            np.nan_to_num(p1, copy=False, nan=0.0, posinf=0.0, neginf=0.0)
            np.nan_to_num(p2, copy=False, nan=0.0, posinf=0.0, neginf=0.0)
            ok &= (np.abs(p1) < 1e12) & (np.abs(p2) < 1e12)
            ok &= (p1 > -1e-6) & (p2 > -1e-6)
            if (i + 1) in obs_idx:
                obs[:, row, 0] = p1
                obs[:, row, 1] = p2
                row += 1
    return obs, ok


def lv_observe(traj: Trajectory, rng, problem: LVProblem = LVProblem()) -> np.ndarray:
    """Noisy observations: populations at k dt_obs scaled by exp(noise), 18-vector.

    Flattening is time major: (t1 prey, t1 predator, t2 prey, ...). With
    noise_var = 0 the exact states are returned.
    """
    idx = problem.obs_step_indices
    if traj.states.shape[1] <= idx[-1]:
        raise ValidationError("trajectory grid does not reach the last observation time")
    states = traj.states[:, idx].T  # (n_obs, 2)
    if np.any(states <= 0):
        raise IntegrationError("nonpositive population at an observation time")
    if problem.noise_var > 0:
        noise = math.sqrt(problem.noise_var) * rng.standard_normal(states.shape)
        states = states * np.exp(noise)
    return states.reshape(-1)


def lv_prior_sample(n: int, rng, problem: LVProblem = LVProblem()) -> np.ndarray:
    """Draw n parameter vectors from the log-normal prior, shape (n, 4)."""
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    mean = np.asarray(problem.prior_mean_log)
    std = math.sqrt(problem.prior_var_log)
    return np.exp(mean[None, :] + std * rng.standard_normal((n, 4)))


def lv_log_prior(params, problem: LVProblem = LVProblem()) -> float:
    """Log-normal prior log-density in parameter space (includes the Jacobian)."""
    x = _params_array(params)
    if np.any(x <= 0):
        return -math.inf
    lx = np.log(x)
    mean = np.asarray(problem.prior_mean_log)
    var = problem.prior_var_log
    return float(
        -np.sum(lx)
        - 2.0 * math.log(2.0 * math.pi * var)
        - float(np.sum((lx - mean) ** 2)) / (2.0 * var)
    )


def lv_joint_sample(
    n: int,
    rng: RngState,
    problem: LVProblem = LVProblem(),
    max_tries: int = 100,
    return_diagnostics: bool = False,
):
    """Draw n joint rows (y, x): prior parameters and their noisy observations.

    Each row uses its own derived stream (seed, row index), so results do not
    depend on evaluation order; failed integrations redraw from the same
    stream and are counted.
    """
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    if not isinstance(rng, RngState):
        raise ValidationError("lv_joint_sample needs an RngState for per-row streams")
    mean = np.asarray(problem.prior_mean_log)
    std = math.sqrt(problem.prior_var_log)
    gens = [rng.generator(STREAM_ROWS, i) for i in range(n)]
    params = np.empty((n, 4))
    noise = np.empty((n, problem.n_obs_times, 2))
    for i, gen in enumerate(gens):
        params[i] = np.exp(mean + std * gen.standard_normal(4))
        noise[i] = gen.standard_normal((problem.n_obs_times, 2))

    obs, ok = _rk4_batch(params, problem)
    ok &= np.all(obs > 0, axis=(1, 2))
    retries = 0
    pending = np.flatnonzero(~ok)
    for i in pending:
        gen = gens[i]
        for _ in range(max_tries):
            retries += 1
            params[i] = np.exp(mean + std * gen.standard_normal(4))
            noise[i] = gen.standard_normal((problem.n_obs_times, 2))
            obs_i, ok_i = _rk4_batch(params[i][None, :], problem)
            if ok_i[0] and np.all(obs_i > 0):
                obs[i] = obs_i[0]
                break
        else:
            raise IntegrationError(f"row {i}: no valid draw after {max_tries} tries")

    y = (obs * np.exp(math.sqrt(problem.noise_var) * noise)).reshape(n, -1)
    pairs = np.hstack([y, params])
    joint = JointDataset(pairs, problem.y_dim, problem.x_dim, seed=rng.seed)
    if return_diagnostics:
        return joint, {"retries": retries}
    return joint


def lv_log_likelihood(params, y_star: np.ndarray, problem: LVProblem = LVProblem()) -> float:
    """Exact observation log-likelihood; -inf when integration fails.

    Gaussian density of log y* around the log simulated populations (the
    parameter-free Jacobian is dropped).
    """
    y_star = np.asarray(y_star, dtype=np.float64).reshape(-1)
    if y_star.shape[0] != problem.y_dim:
        raise ValidationError(f"y_star must have length {problem.y_dim}")
    if np.any(y_star <= 0):
        raise ValidationError("observations must be positive")
    x = _params_array(params)
    if np.any(x <= 0):
        return -math.inf
    # scalar integrator: ~40x cheaper than the batch path for one row, which
    # matters because MCMC evaluates proposals one at a time
    try:
        traj = lv_simulate(x, problem)
    except IntegrationError:
        return -math.inf
    states = traj.states[:, problem.obs_step_indices].T
    if np.any(states <= 0):
        return -math.inf
    sim = np.log(states.reshape(-1))
    resid = np.log(y_star) - sim
    var = problem.noise_var
    k = y_star.shape[0]
    return float(-0.5 * k * math.log(2.0 * math.pi * var) - float(resid @ resid) / (2.0 * var))


def lv_log_posterior_logspace(
    theta: np.ndarray, y_star: np.ndarray, problem: LVProblem = LVProblem()
) -> float:
    """Posterior log-density over theta = log params (Gaussian prior in theta)."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    if theta.shape[0] != 4:
        raise ValidationError("theta must have 4 entries")
    mean = np.asarray(problem.prior_mean_log)
    var = problem.prior_var_log
    log_prior = -float(np.sum((theta - mean) ** 2)) / (2.0 * var) - 2.0 * math.log(
        2.0 * math.pi * var
    )
    return log_prior + lv_log_likelihood(np.exp(theta), y_star, problem)


def lv_log_likelihood_grad(
    params, y_star: np.ndarray, problem: LVProblem = LVProblem()
) -> np.ndarray:
    """Gradient of the log-likelihood w.r.t. log-parameters, via forward
    sensitivities integrated with the same RK4 grid, shape (4,)."""
    x = _params_array(params)
    a, b, g, d = x
    sgn = -1.0 if problem.flip_predator_gain else 1.0
    dt = problem.rk4_dt

    def rhs(state):
        p, jac = state  # p (2,), jac (2, 4) = dp/dtheta
        f = np.array([a * p[0] - b * p[0] * p[1], sgn * d * p[0] * p[1] - g * p[1]])
        dfdp = np.array([
            [a - b * p[1], -b * p[0]],
            [sgn * d * p[1], sgn * d * p[0] - g],
        ])
        # d/dtheta_j = x_j d/dx_j for theta = log x
        dfdth = np.array([
            [a * p[0], -b * p[0] * p[1], 0.0, 0.0],
            [0.0, 0.0, -g * p[1], sgn * d * p[0] * p[1]],
        ])
        return f, dfdp @ jac + dfdth

    p = np.array(problem.initial_state, dtype=np.float64)
    jac = np.zeros((2, 4))
    obs_idx = set(int(i) for i in problem.obs_step_indices)
    sims, jacs = [], []
    for i in range(problem.n_steps):
        k1 = rhs((p, jac))
        k2 = rhs((p + 0.5 * dt * k1[0], jac + 0.5 * dt * k1[1]))
        k3 = rhs((p + 0.5 * dt * k2[0], jac + 0.5 * dt * k2[1]))
        k4 = rhs((p + dt * k3[0], jac + dt * k3[1]))
        p = p + dt / 6.0 * (k1[0] + 2.0 * (k2[0] + k3[0]) + k4[0])
        jac = jac + dt / 6.0 * (k1[1] + 2.0 * (k2[1] + k3[1]) + k4[1])
        if (i + 1) in obs_idx:
            sims.append(p.copy())
            jacs.append(jac.copy())
    sim = np.stack(sims)  # (n_obs, 2)
    jac_obs = np.stack(jacs)  # (n_obs, 2, 4)
    if np.any(sim <= 0) or not np.all(np.isfinite(sim)):
        raise IntegrationError("sensitivity integration hit nonpositive states")
    y = np.asarray(y_star, dtype=np.float64).reshape(sim.shape)
    resid = (np.log(y) - np.log(sim)) / problem.noise_var  # (n_obs, 2)
    # d log p / d theta = jac / p
    return np.einsum("ki,kij->j", resid / sim, jac_obs)


# ---------------------------------------------------------------------------
# Canonical fixture


def lv_canonical_fixture() -> tuple[np.ndarray, np.ndarray, int]:
    """Load the checked-in (x_star, y_star, seed) fixture."""
    doc = json.loads(
        resources.files("otflow").joinpath("data/lv_canonical.json").read_text()
    )
    return (
        np.array(doc["x_star"], dtype=np.float64),
        np.array(doc["y_star"], dtype=np.float64),
        int(doc["seed"]),
    )


def make_lv_canonical_fixture(seed: int, problem: LVProblem = LVProblem()) -> dict:
    """Regenerate the fixture document from its seed (used to build the data file)."""
    traj = lv_simulate(LV_TRUE_PARAMS, problem)
    gen = RngState(seed).generator(STREAM_NOISE)
    y_star = lv_observe(traj, gen, problem)
    return {
        "x_star": [float(v) for v in LV_TRUE_PARAMS],
        "y_star": [float(v) for v in y_star],
        "seed": seed,
    }
