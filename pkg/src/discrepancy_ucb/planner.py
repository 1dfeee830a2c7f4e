"""Acquisition functions and the sampling-based trajectory optimizer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .gp import GpModel, PriorMean

NORMS = ("l2", "l1", "linf")


class InfeasiblePlanError(RuntimeError):
    """Every sampled action sequence scored -inf."""


@dataclass(frozen=True)
class BoxSafeSet:
    """Axis-aligned box over state-action points; anything outside is unsafe."""

    lower: tuple
    upper: tuple

    def __call__(self, z) -> np.ndarray:
        z = np.atleast_2d(z)
        return np.all((z >= np.asarray(self.lower)) & (z <= np.asarray(self.upper)), axis=1)


@dataclass(frozen=True)
class AcquisitionConfig:
    beta: float = 2.0
    beta_schedule: str = "constant"
    discrepancy_norm: str = "l2"
    discrepancy_weight: float = 1.0
    safe_set: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.discrepancy_norm not in NORMS:
            raise ValueError(f"discrepancy_norm must be one of {NORMS}")
        if self.beta_schedule not in ("constant", "log"):
            raise ValueError("beta_schedule must be 'constant' or 'log'")

    def beta_at(self, n_data: int) -> float:
        """UCB weight for a model holding ``n_data`` observations."""
        if self.beta_schedule == "log":
            return 2.0 * math.log(n_data + 1) if n_data > 0 else self.beta
        return self.beta


@dataclass(frozen=True)
class CemConfig:
    horizon: int = 10
    iterations: int = 10
    samples: int = 50
    elites: int = 10
    kept_elites: int = 5
    init_std: Optional[float] = None
    min_std: float = 0.05
    noise_beta: float = 2.0
    momentum: float = 0.1

    def __post_init__(self):
        if self.horizon < 1 or self.iterations < 1 or self.samples < 1:
            raise ValueError("horizon, iterations and samples must be at least 1")
        if not 1 <= self.elites <= self.samples:
            raise ValueError("need 1 <= elites <= samples")
        if not 0 <= self.kept_elites <= self.elites:
            raise ValueError("need 0 <= kept_elites <= elites")
        if self.init_std is not None and not self.init_std > 0:
            raise ValueError("init_std must be positive")
        if not self.min_std > 0:
            raise ValueError("min_std must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class PlanResult:
    actions: np.ndarray              # (horizon, action_dim)
    value: float
    incumbents: list = field(default_factory=list)   # best value after each iteration
    first_iteration_max: float = -np.inf


def vector_norm(diff: np.ndarray, kind: str = "l2") -> np.ndarray:
    if kind == "l2":
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))
    if kind == "l1":
        return np.abs(diff).sum(axis=1)
    if kind == "linf":
        return np.abs(diff).max(axis=1)
    raise ValueError(f"unknown norm {kind!r}")


def _acquisition(mean, var, m_tau, z, cfg: AcquisitionConfig, beta: float) -> np.ndarray:
    value = np.sqrt(beta) * np.sqrt(var)
    if cfg.discrepancy_weight:
        value = value + cfg.discrepancy_weight * vector_norm(mean - m_tau, cfg.discrepancy_norm)
    if cfg.safe_set is not None:
        value = np.where(cfg.safe_set(z), value, -np.inf)
    return value


def _episode_prior_values(model: GpModel, episode_prior: PriorMean, z, prior_vals):
    return prior_vals if episode_prior is model.prior else episode_prior(z)


def acquisition_value(model: GpModel, episode_prior: PriorMean, z, cfg: AcquisitionConfig,
                      beta: Optional[float] = None):
    """Discrepancy-based UCB score at one point or a batch of points.

    ``|mu(z) - m_tau(z)| + sqrt(beta) * sigma(z) + s(z)`` with the discrepancy
    measured in ``cfg.discrepancy_norm`` and ``s`` the safe-set penalty.
    """
    beta = cfg.beta if beta is None else beta
    q = np.atleast_2d(np.asarray(z, dtype=float))
    mean, var, prior_vals = model.predict(q)
    m_tau = _episode_prior_values(model, episode_prior, q, prior_vals)
    out = _acquisition(mean, var, m_tau, q, cfg, beta)
    return float(out[0]) if np.ndim(z) == 1 else out


def rollout_objective(model: GpModel, episode_prior: PriorMean, x0, seqs, cfg: AcquisitionConfig,
                      project_state: Callable[[np.ndarray], np.ndarray] = lambda x: x,
                      beta: Optional[float] = None):
    """Sum of acquisition values along mean-dynamics rollouts.

    ``seqs`` is one sequence ``(H, du)`` or a batch ``(S, H, du)``; returns a
    float or an ``(S,)`` array. Rollouts that leave the finite reals score -inf.
    """
    beta = cfg.beta if beta is None else beta
    seqs_arr = np.asarray(seqs, dtype=float)
    single = seqs_arr.ndim == 2
    if single:
        seqs_arr = seqs_arr[None]
    S, H, _ = seqs_arr.shape
    x = np.tile(np.asarray(x0, dtype=float), (S, 1))
    total = np.zeros(S)
    alive = np.ones(S, dtype=bool)
    for t in range(H):
        z = np.hstack([x, seqs_arr[:, t]])
        with np.errstate(invalid="ignore", over="ignore"):
            mean, var, prior_vals = model.predict(_finite_rows(z))
        m_tau = _episode_prior_values(model, episode_prior, z, prior_vals)
        total += np.where(alive, _acquisition(mean, var, m_tau, z, cfg, beta), 0.0)
        alive &= np.all(np.isfinite(mean), axis=1)
        x = project_state(np.where(alive[:, None], mean, x))
    total = np.where(alive, total, -np.inf)
    return float(total[0]) if single else total


class TabulatedModel:
    """Read-only view of a model's predictions precomputed on a finite point set.

    ``index`` maps query rows to row positions in ``points``. Stands in for
    the model inside :func:`rollout_objective` when every query is known to
    lie on ``points`` (a finite state-action lattice).
    """

    def __init__(self, model: GpModel, points: np.ndarray, index: Callable[[np.ndarray], np.ndarray]):
        self.prior = model.prior
        self._index = index
        self._mean, self._var, self._prior_vals = model.predict(points)

    def predict(self, z):
        i = self._index(z)
        return self._mean[i], self._var[i], self._prior_vals[i]


def _finite_rows(z: np.ndarray) -> np.ndarray:
    return np.where(np.isfinite(z), z, 0.0)


def colored_noise(exponent: float, size: tuple, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance Gaussian noise with power spectrum ``1/f**exponent`` along the last axis."""
    n = size[-1]
    if exponent == 0 or n < 2:
        return rng.standard_normal(size)
    f = np.fft.rfftfreq(n)
    f = np.maximum(f, 1.0 / n)
    scale = f ** (-exponent / 2.0)
    spec_shape = tuple(size[:-1]) + (f.size,)
    re = rng.standard_normal(spec_shape) * scale
    im = rng.standard_normal(spec_shape) * scale
    # per-bin contribution to the time-domain variance: 4 s_k^2 for interior
    # bins, 2 s_k^2 for the real-only DC and Nyquist bins
    weight = np.full(f.size, 4.0)
    weight[0] = 2.0
    im[..., 0] = 0.0
    re[..., 0] *= np.sqrt(2.0)
    if n % 2 == 0:
        weight[-1] = 2.0
        im[..., -1] = 0.0
        re[..., -1] *= np.sqrt(2.0)
    sigma = np.sqrt(np.sum(weight * scale**2)) / n
    return np.fft.irfft(re + 1j * im, n=n, axis=-1) / sigma


def icem_plan(objective: Callable[[np.ndarray], np.ndarray], cem: CemConfig, low, high, seed,
              init_mean: Optional[np.ndarray] = None,
              snap: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> PlanResult:
    """Improved cross-entropy search over action sequences.

    ``objective`` maps a batch ``(S, H, du)`` to ``(S,)`` scores (higher is
    better). Samples are colored Gaussian noise around a per-timestep mean,
    clipped to ``[low, high]`` and optionally passed through ``snap`` (e.g.
    rounding to a discrete action set). A fraction of the elites is carried
    into the next iteration, the final iteration also scores the mean
    sequence, and the best sequence seen in any iteration is returned.
    """
    low = np.atleast_1d(np.asarray(low, dtype=float))
    high = np.atleast_1d(np.asarray(high, dtype=float))
    du, H = low.size, cem.horizon
    rng = np.random.default_rng(seed)
    mean = np.tile((low + high) / 2.0, (H, 1)) if init_mean is None else np.array(init_mean, dtype=float)
    init_std = 0.5 * (high - low) if cem.init_std is None else np.full(du, cem.init_std)
    std = np.tile(init_std, (H, 1))

    def finish(a):
        a = np.clip(a, low, high)
        return snap(a) if snap is not None else a

    best_seq, best_val = None, -np.inf
    kept = np.empty((0, H, du))
    result = PlanResult(actions=np.empty((H, du)), value=-np.inf)
    for it in range(cem.iterations):
        noise = colored_noise(cem.noise_beta, (cem.samples, du, H), rng).transpose(0, 2, 1)
        cand = finish(mean + std * noise)
        if kept.size:
            cand = np.concatenate([cand, kept])
        if it == cem.iterations - 1:
            cand = np.concatenate([cand, finish(mean)[None]])
        vals = np.asarray(objective(cand), dtype=float)
        vals = np.where(np.isnan(vals), -np.inf, vals)
        if it == 0:
            result.first_iteration_max = float(vals[: cem.samples].max())
        order = np.argsort(-vals, kind="stable")
        if vals[order[0]] > best_val:
            best_val = float(vals[order[0]])
            best_seq = cand[order[0]].copy()
        result.incumbents.append(best_val)
        elite_idx = [i for i in order[: cem.elites] if np.isfinite(vals[i])]
        if not elite_idx:
            kept = np.empty((0, H, du))
            continue
        elite = cand[elite_idx]
        mean = cem.momentum * mean + (1 - cem.momentum) * elite.mean(axis=0)
        std = np.maximum(cem.momentum * std + (1 - cem.momentum) * elite.std(axis=0), cem.min_std)
        kept = elite[: cem.kept_elites]
    if best_seq is None or not np.isfinite(best_val):
        raise InfeasiblePlanError("no feasible sequence")
    result.actions = best_seq
    result.value = best_val
    return result


def greedy_variance_action(model: GpModel, x, candidate_actions) -> np.ndarray:
    """Candidate action with the largest predictive variance at state ``x``; ties go to the lowest index."""
    cands = np.atleast_2d(np.asarray(candidate_actions, dtype=float))
    if cands.shape[0] == 0:
        raise ValueError("candidate_actions must be non-empty")
    z = np.hstack([np.tile(np.asarray(x, dtype=float), (cands.shape[0], 1)), cands])
    var = model.predict_variance(z)
    return cands[int(np.argmax(var))].copy()


def mean_dynamics(model: GpModel) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """The GP posterior mean as a batched transition function ``(x, u) -> x'``."""
    def step(x, u):
        return model.predict_mean(np.hstack([np.atleast_2d(x), np.atleast_2d(u)]))
    return step


def task_mpc_plan(dynamics: Callable, cost: Callable, x0, cem: CemConfig, low, high, seed,
                  project_state: Callable[[np.ndarray], np.ndarray] = lambda x: x,
                  init_mean: Optional[np.ndarray] = None) -> PlanResult:
    """Minimize cumulative cost ``sum_t c(x_{t+1}, u_t)`` along ``dynamics`` rollouts.

    ``dynamics`` is any batched transition function, e.g. :func:`mean_dynamics`
    of a frozen GP or the true simulator.
    """
    x0 = np.asarray(x0, dtype=float)

    def objective(seqs):
        S, H, _ = seqs.shape
        x = np.tile(x0, (S, 1))
        total = np.zeros(S)
        for t in range(H):
            x = project_state(dynamics(x, seqs[:, t]))
            total -= cost(x, seqs[:, t])
        return np.where(np.isfinite(total), total, -np.inf)

    return icem_plan(objective, cem, low, high, seed, init_mean=init_mean)


def pendulum_swingup_cost(x, u) -> np.ndarray:
    """``theta^2 + 0.1 theta_dot^2 + 0.001 u^2`` with theta wrapped to [-pi, pi)."""
    x = np.atleast_2d(x)
    u = np.atleast_2d(u)
    theta = np.mod(x[:, 0] + np.pi, 2 * np.pi) - np.pi
    return theta**2 + 0.1 * x[:, 1] ** 2 + 0.001 * u[:, 0] ** 2


def run_mpc(step: Callable, dynamics: Callable, cost: Callable, x0, steps: int, cem: CemConfig,
            low, high, seed: int, project_state: Callable = lambda x: x):
    """Closed-loop receding-horizon control.

    Plans against ``dynamics`` and executes the first action on ``step`` (the
    real system). Returns the per-step rewards ``-c(x_t, u_t)`` and the visited
    states. The previous plan, shifted by one step, warm-starts the next.
    """
    x = np.asarray(x0, dtype=float)
    rng = np.random.default_rng(seed)
    rewards, states = [], [x.copy()]
    warm = None
    for _ in range(steps):
        plan = task_mpc_plan(dynamics, cost, x, cem, low, high, int(rng.integers(2**63)),
                             project_state=project_state, init_mean=warm)
        u = plan.actions[0]
        rewards.append(-float(cost(x[None], u[None])[0]))
        x = np.asarray(step(x, u), dtype=float).ravel()
        states.append(x.copy())
        warm = np.vstack([plan.actions[1:], plan.actions[-1:]])
    return np.array(rewards), np.array(states)
