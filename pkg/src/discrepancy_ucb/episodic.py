"""Episode orchestration: resets, the plan-act-observe loop and prior absorption."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .env import Environment, NoiseSpec, NoiseStream, observe_transition
from .gp import GpModel, PriorMean, RBFKernel, ZeroPrior, episode_model
from .metrics import (CampaignRecord, EpisodeRow, max_variance_over_grid, mse_over_grid,
                      visited_discrepancy)
from .planner import (AcquisitionConfig, CemConfig, TabulatedModel, greedy_variance_action, icem_plan,
                      rollout_objective, vector_norm)

log = logging.getLogger(__name__)

METHODS = ("discrepancy_ucb", "variance_planner", "sigma_greedy")
SCHEDULES = ("theorem", "experiment", "fixed")


def derive_seed(*parts: int) -> int:
    """Independent 63-bit seed from a tuple of integers."""
    state = np.random.SeedSequence([int(p) for p in parts]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "experiment"
    fixed_value: float = 1e-2
    episode_length: int = 10

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ValueError(f"schedule kind must be one of {SCHEDULES}")
        if self.episode_length < 1:
            raise ValueError("episode_length must be at least 1")
        if not self.fixed_value > 0:
            raise ValueError("fixed_value must be positive")


def regularization(schedule: ScheduleConfig, tau: int, n: int, n_total: Optional[int] = None) -> float:
    """Regularizer for iteration ``n`` of episode ``tau``.

    ``theorem``: ``((tau - 1) N + n)^-2``. ``experiment``: ``1 / n_total^2``
    with ``n_total`` the dataset size once this iteration's observation lands
    (defaults to ``(tau - 1) N + n``). ``fixed``: a constant.
    """
    if schedule.kind == "fixed":
        return schedule.fixed_value
    if tau < 1 or n < 0:
        raise ValueError(f"invalid episode/iteration ({tau}, {n})")
    total = (tau - 1) * schedule.episode_length + n
    if schedule.kind == "experiment" and n_total is not None:
        total = n_total
    if total <= 0:
        raise ValueError("regularization schedule undefined for an empty dataset index")
    return float(total) ** -2


@dataclass
class StepRecord:
    z: np.ndarray
    y: np.ndarray
    variance: float
    discrepancy: float


@dataclass
class EpisodeLog:
    tau: int
    reset_state: np.ndarray
    visited: list = field(default_factory=list)
    step_models: list = field(default_factory=list, repr=False)

    @property
    def points(self) -> np.ndarray:
        return np.array([s.z for s in self.visited])

    @property
    def variances(self) -> np.ndarray:
        return np.array([s.variance for s in self.visited])

    @property
    def discrepancies(self) -> np.ndarray:
        return np.array([s.discrepancy for s in self.visited])


class EpisodeStartModel:
    """The model as seen by the first decision of an episode.

    Before any new observation the episode's mean is by definition the frozen
    prior ``m_tau`` itself, so the discrepancy term vanishes and planning is
    driven by the variance alone. Variances come from ``model`` (they do not
    depend on the prior).
    """

    def __init__(self, model: GpModel, episode_prior: PriorMean):
        self.model = model
        self.prior = episode_prior
        self.input_dim = model.input_dim
        self.n = model.n

    def predict(self, z):
        q = np.atleast_2d(np.asarray(z, dtype=float))
        m = self.prior(q)
        return m, self.model.predict_variance(q), m

    def predict_mean(self, z):
        return self.prior(np.atleast_2d(np.asarray(z, dtype=float)))

    def predict_variance(self, z):
        return self.model.predict_variance(z)


def select_reset_state(model: GpModel, state_grid, action_probe=None) -> np.ndarray:
    """Grid state whose predictive variance is largest.

    ``action_probe`` is one action or an ``(P, du)`` array of actions; a
    state's score is its largest variance over the probes. Ties go to the
    lowest grid index. Defaults to the zero action.
    """
    states = np.atleast_2d(np.asarray(state_grid, dtype=float))
    if states.shape[0] == 0:
        raise ValueError("state grid must be non-empty")
    du = model.input_dim - states.shape[1]
    probes = np.zeros((1, du)) if action_probe is None else np.atleast_2d(np.asarray(action_probe, dtype=float))
    S, P = states.shape[0], probes.shape[0]
    z = np.hstack([np.repeat(states, P, axis=0), np.tile(probes, (S, 1))])
    var = model.predict_variance(z).reshape(S, P).max(axis=1)
    return states[int(np.argmax(var))].copy()


@dataclass(frozen=True)
class PlannerSettings:
    """Exploration policy for one method."""

    method: str = "discrepancy_ucb"
    cem: CemConfig = CemConfig()
    acquisition: AcquisitionConfig = AcquisitionConfig()
    greedy_candidates: int = 21

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")

    @property
    def uses_prior(self) -> bool:
        return self.method == "discrepancy_ucb"

    def effective_acquisition(self) -> AcquisitionConfig:
        if self.method == "variance_planner":
            return dataclasses.replace(self.acquisition, discrepancy_weight=0.0)
        return self.acquisition


def _candidate_actions(env: Environment, count: int) -> np.ndarray:
    if getattr(env, "finite", False):
        return env.actions
    spec = env.spec
    axes = [np.linspace(lo, hi, count) for lo, hi in spec.action_bounds]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def choose_action(env: Environment, model: GpModel, episode_prior: PriorMean, x: np.ndarray,
                  settings: PlannerSettings, seed: int, warm: Optional[np.ndarray] = None):
    """One exploration decision; returns ``(action, planned_sequence_or_None)``."""
    if settings.method == "sigma_greedy":
        return greedy_variance_action(model, x, _candidate_actions(env, settings.greedy_candidates)), None
    acq = settings.effective_acquisition()
    beta = acq.beta_at(model.n)
    snap = None
    view = model
    if getattr(env, "finite", False):
        snap = env.project_action
        view = TabulatedModel(model, env.points, env.lattice_index)

    def objective(seqs):
        return rollout_objective(view, episode_prior, x, seqs, acq, env.project_state, beta=beta)

    plan = icem_plan(objective, settings.cem, env.spec.action_low, env.spec.action_high, seed,
                     init_mean=warm, snap=snap)
    return plan.actions[0].copy(), plan.actions


def run_episode(env: Environment, model: GpModel, episode_prior: PriorMean, settings: PlannerSettings,
                schedule: ScheduleConfig, tau: int, seed: int, x0, noise_std: float = 0.0,
                keep_models: bool = False):
    """Collect one episode of ``schedule.episode_length`` observations.

    Each iteration sets the regularizer, plans from the current state (the
    first one through :class:`EpisodeStartModel`),
    executes the first action on the true system, conditions the model on
    the noisy observation and moves to that observed state.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF])
    noise_seed, plan_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    noise = NoiseStream(NoiseSpec(noise_std, noise_seed))
    plan_rng = np.random.default_rng(plan_seed)
    x = env.project_state(np.asarray(x0, dtype=float))
    episode_log = EpisodeLog(tau=tau, reset_state=x.copy())
    warm = None
    for n in range(1, schedule.episode_length + 1):
        model = model.with_reg(regularization(schedule, tau, n, n_total=model.n + 1))
        view = EpisodeStartModel(model, episode_prior) if n == 1 else model
        u, plan = choose_action(env, view, episode_prior, x, settings,
                                int(plan_rng.integers(2**63)), warm)
        u = env.project_action(u)
        z = np.concatenate([x, u])
        mean, var, prior_vals = view.predict(z[None])
        m_tau = prior_vals if episode_prior is view.prior else episode_prior(z[None])
        disc = float(vector_norm(mean - m_tau, settings.acquisition.discrepancy_norm)[0])
        if keep_models:
            episode_log.step_models.append(model)
        y = env.spec.lift(x, observe_transition(env, x, u, noise))
        episode_log.visited.append(StepRecord(z=z, y=y, variance=float(var[0]), discrepancy=disc))
        model = model.update(z, y)
        x = env.project_state(y)
        if plan is not None and len(plan) > 1:
            warm = np.vstack([plan[1:], plan[-1:]])
    return model, episode_log


def assumption3_check(episode_log: EpisodeLog, models_at_steps, grid):
    """Whether some visited point had at least the grid-average variance when selected.

    Returns ``(held, n_star)`` with the first 1-based witness index, or
    ``(False, None)``.
    """
    grid = np.atleast_2d(grid)
    for n, (step, model) in enumerate(zip(episode_log.visited, models_at_steps), start=1):
        if step.variance >= float(np.mean(model.predict_variance(grid))):
            return True, n
    return False, None


@dataclass
class Campaign:
    """Everything needed to run one trial of active learning."""

    env: Environment
    settings: PlannerSettings
    schedule: ScheduleConfig
    kernel: RBFKernel
    episodes: int
    test_grid: np.ndarray
    state_grid: np.ndarray
    seed: int
    noise_std: float = 0.0
    reset_probes: Optional[np.ndarray] = None
    assumption_grid: Optional[np.ndarray] = None
    memo_size: int = 0
    norm: str = "l2"


def initial_model(c: Campaign) -> GpModel:
    prior = c.env.analytic_prior() if c.settings.uses_prior else ZeroPrior(c.env.spec.state_dim)
    return GpModel.empty(c.kernel, prior, regularization(c.schedule, 1, 1), c.env.spec.input_dim)


def evaluate_row(c: Campaign, model: GpModel, tau: int, episode_log: Optional[EpisodeLog] = None,
                 held: Optional[bool] = None, wall: float = float("nan")) -> EpisodeRow:
    disc = float("nan")
    if episode_log is not None and episode_log.visited:
        disc = visited_discrepancy(c.env.analytic_prior(), c.env.true_fn, episode_log, c.norm)
    return EpisodeRow(tau=tau, max_variance=max_variance_over_grid(model, c.test_grid),
                      mse=mse_over_grid(model, c.env.true_fn, c.test_grid),
                      mean_visited_discrepancy=disc, assumption3_held=held, wall_time_s=wall)


def run_campaign(c: Campaign, record: Optional[CampaignRecord] = None, model: Optional[GpModel] = None,
                 on_episode: Optional[Callable[[CampaignRecord, GpModel], None]] = None):
    """Run episodes ``1..c.episodes``; returns ``(record, final_model)``.

    Passing a partially filled ``record`` and its ``model`` resumes after the
    last completed episode. ``on_episode`` is called after every episode
    (e.g. to checkpoint). On failure the partial record is attached to the
    raised exception as ``exc.record``.
    """
    if record is None:
        record = CampaignRecord(meta={"seed": c.seed, "method": c.settings.method})
    if model is None:
        model = initial_model(c)
    if record.baseline is None:
        record.baseline = evaluate_row(c, model, 0)
    start = len(record.rows) + 1
    try:
        for tau in range(start, c.episodes + 1):
            t0 = time.perf_counter()
            if tau > 1:
                model = episode_model(model, memo_size=c.memo_size)
            episode_prior = model.prior
            x0 = select_reset_state(model, c.state_grid, c.reset_probes)
            model, episode_log = run_episode(
                c.env, model, episode_prior, c.settings, c.schedule, tau, derive_seed(c.seed, tau), x0,
                noise_std=c.noise_std, keep_models=c.assumption_grid is not None)
            held = None
            if c.assumption_grid is not None:
                held, _ = assumption3_check(episode_log, episode_log.step_models, c.assumption_grid)
                episode_log.step_models.clear()
            row = evaluate_row(c, model, tau, episode_log, held)
            row.wall_time_s = time.perf_counter() - t0
            record.append(row)
            log.debug("episode %d: max var %.4g, mse %.4g", tau, row.max_variance, row.mse)
            if on_episode is not None:
                on_episode(record, model)
    except Exception as exc:
        exc.record = record
        raise
    return record, model
