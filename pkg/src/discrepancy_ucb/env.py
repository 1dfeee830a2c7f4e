"""Ground-truth simulators, mis-specified analytic priors and test grids."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .gp import AnalyticPrior

MAX_GRID_POINTS = 1_000_000


def wrap_angle(theta):
    return np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    state_bounds: tuple
    action_bounds: tuple
    wrap_mask: tuple = ()
    dt: float = 0.05
    state_names: tuple = ()
    action_names: tuple = ()

    def __post_init__(self):
        if len(self.state_bounds) != self.state_dim or len(self.action_bounds) != self.action_dim:
            raise ValueError("bounds do not match declared dimensions")
        for lo, hi in tuple(self.state_bounds) + tuple(self.action_bounds):
            if not lo < hi:
                raise ValueError(f"empty interval [{lo}, {hi}]")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.wrap_mask:
            object.__setattr__(self, "wrap_mask", (False,) * self.state_dim)
        if len(self.wrap_mask) != self.state_dim:
            raise ValueError("wrap_mask must have one entry per state coordinate")

    @property
    def input_dim(self) -> int:
        return self.state_dim + self.action_dim

    @property
    def bounds(self) -> np.ndarray:
        return np.array(tuple(self.state_bounds) + tuple(self.action_bounds), dtype=float)

    @property
    def action_low(self) -> np.ndarray:
        return np.array([b[0] for b in self.action_bounds], dtype=float)

    @property
    def action_high(self) -> np.ndarray:
        return np.array([b[1] for b in self.action_bounds], dtype=float)

    @property
    def kernel_wrap_mask(self) -> tuple:
        return tuple(self.wrap_mask) + (False,) * self.action_dim

    @property
    def coordinate_names(self) -> tuple:
        s = self.state_names or tuple(f"x{i}" for i in range(self.state_dim))
        a = self.action_names or tuple(f"u{i}" for i in range(self.action_dim))
        return tuple(s) + tuple(a)

    def clip_action(self, u) -> np.ndarray:
        return np.clip(u, self.action_low, self.action_high)

    def lift(self, x, y) -> np.ndarray:
        """Regression target for a next state ``y`` reached from ``x``.

        Angle coordinates become ``x + wrap(y - x)``, so the target stays
        continuous when a step crosses the +-pi seam instead of jumping by
        2 pi between neighbouring inputs. ``project_state`` undoes this.
        """
        y = np.array(y, dtype=float)
        x = np.asarray(x, dtype=float)
        for i, w in enumerate(self.wrap_mask):
            if w:
                y[..., i] = x[..., i] + wrap_angle(y[..., i] - x[..., i])
        return y

    def project_state(self, x) -> np.ndarray:
        """Wrap angle coordinates and clip the rest into the state box."""
        x = np.array(x, dtype=float)
        for i, (lo, hi) in enumerate(self.state_bounds):
            if self.wrap_mask[i]:
                x[..., i] = wrap_angle(x[..., i])
            else:
                x[..., i] = np.clip(x[..., i], lo, hi)
        return x


@dataclass(frozen=True)
class PendulumParams:
    g: float = 9.81
    m: float = 1.0
    l: float = 1.0

    def __post_init__(self):
        if not (self.m > 0 and self.l > 0):
            raise ValueError("pendulum mass and length must be positive")


PENDULUM_SPEC = EnvSpec(
    state_dim=2, action_dim=1,
    state_bounds=((-np.pi, np.pi), (-8.0, 8.0)),
    action_bounds=((-2.0, 2.0),),
    wrap_mask=(True, False), dt=0.05,
    state_names=("theta", "theta_dot"), action_names=("u",),
)


def pendulum_accel(theta, u, p: PendulumParams):
    """Angular acceleration from ``m l^2 th'' + 3 m g l sin(th) = 3 u``."""
    return 3.0 * u / (p.m * p.l**2) - 3.0 * p.g * np.sin(theta) / p.l


def pendulum_step(x, u, p: PendulumParams, spec: EnvSpec = PENDULUM_SPEC) -> np.ndarray:
    """One forward-Euler step; works on single points or batches of rows."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise ValueError("pendulum_step received non-finite input")
    u = spec.clip_action(u)[..., 0]
    theta, theta_dot = x[..., 0], x[..., 1]
    accel = pendulum_accel(theta, u, p)
    out = np.empty(np.broadcast(theta, u).shape + (2,))
    out[..., 0] = wrap_angle(theta + spec.dt * theta_dot)
    lo, hi = spec.state_bounds[1]
    out[..., 1] = np.clip(theta_dot + spec.dt * accel, lo, hi)
    return out


def pendulum_rk4(x, u, p: PendulumParams, duration: float, steps: int) -> np.ndarray:
    """Unclipped, unwrapped RK4 integration of the pendulum ODE (reference only)."""
    y = np.asarray(x, dtype=float).copy()
    h = duration / steps

    def rhs(s):
        return np.array([s[1], pendulum_accel(s[0], u, p)])

    for _ in range(steps):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * h * k1)
        k3 = rhs(y + 0.5 * h * k2)
        k4 = rhs(y + h * k3)
        y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def linear_env_step(x, u, A, B) -> np.ndarray:
    """``A x + B u`` for single vectors or batches of rows."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if A.shape[0] != A.shape[1] or A.shape[1] != x.shape[-1]:
        raise ValueError(f"A with shape {A.shape} does not act on states of dimension {x.shape[-1]}")
    if B.shape[0] != A.shape[0] or B.shape[1] != u.shape[-1]:
        raise ValueError(f"B with shape {B.shape} does not map actions of dimension {u.shape[-1]}")
    return x @ A.T + u @ B.T


def state_action_grid(spec: EnvSpec, counts: Sequence[int], cap: int = MAX_GRID_POINTS) -> np.ndarray:
    """Evenly spaced Cartesian grid over the state-action box, bounds included."""
    counts = [int(c) for c in counts]
    if len(counts) != spec.input_dim:
        raise ValueError(f"need {spec.input_dim} grid counts, got {len(counts)}")
    if any(c < 2 for c in counts):
        raise ValueError("every grid count must be at least 2")
    total = int(np.prod(counts, dtype=object))
    if total > cap:
        raise ValueError(f"grid of {total} points exceeds the cap of {cap}")
    axes = [np.linspace(lo, hi, c) for (lo, hi), c in zip(spec.bounds, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def grid_to_csv(spec: EnvSpec, grid) -> str:
    """CSV text with a header of coordinate names and one row per grid point."""
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    lines = [",".join(spec.coordinate_names)]
    lines += [",".join(repr(float(v)) for v in row) for row in grid]
    return "\n".join(lines) + "\n"


@dataclass
class NoiseSpec:
    std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.std < 0:
            raise ValueError("noise std must be non-negative")


class NoiseStream:
    """Seeded Gaussian observation noise; one stream per worker, never shared."""

    def __init__(self, spec: NoiseSpec):
        self.spec = spec
        self._rng = np.random.default_rng(spec.seed)
        self.draws = 0

    def sample(self, shape) -> np.ndarray:
        self.draws += 1
        if self.spec.std == 0:
            return np.zeros(shape)
        return self._rng.normal(0.0, self.spec.std, size=shape)


# --------------------------------------------------------------------------
# Environments
# --------------------------------------------------------------------------


class Environment:
    """A true transition function plus the analytic model used as side information."""

    name: str
    spec: EnvSpec
    finite: bool = False

    def step(self, x, u) -> np.ndarray:
        raise NotImplementedError

    def prior_step(self, x, u) -> np.ndarray:
        raise NotImplementedError

    def true_fn(self, z) -> np.ndarray:
        """True transition as a regression target (see :meth:`EnvSpec.lift`)."""
        z = np.atleast_2d(z)
        s = self.spec.state_dim
        return self.spec.lift(z[:, :s], self.step(z[:, :s], z[:, s:]))

    def prior_fn(self, z) -> np.ndarray:
        z = np.atleast_2d(z)
        s = self.spec.state_dim
        return self.spec.lift(z[:, :s], self.prior_step(z[:, :s], z[:, s:]))

    def analytic_prior(self) -> AnalyticPrior:
        return AnalyticPrior(self.prior_fn, self.spec.state_dim, self.prior_descriptor())

    def true_prior(self) -> AnalyticPrior:
        """The true dynamics packaged as a prior (useful as an oracle)."""
        return AnalyticPrior(self.true_fn, self.spec.state_dim, self.prior_descriptor(true=True))

    def prior_descriptor(self, true: bool = False) -> dict:
        raise NotImplementedError

    def project_state(self, x) -> np.ndarray:
        return self.spec.project_state(x)

    def project_action(self, u) -> np.ndarray:
        return self.spec.clip_action(u)

    def state_grid(self, counts: Sequence[int]) -> np.ndarray:
        g = state_action_grid(self.spec, list(counts) + [2] * self.spec.action_dim)
        return np.unique(g[:, : self.spec.state_dim], axis=0)

    def test_grid(self, counts: Sequence[int]) -> np.ndarray:
        return state_action_grid(self.spec, counts)


def observe_transition(env: Environment, x, u, noise: NoiseStream) -> np.ndarray:
    """Noisy next-state observation ``f(x, u) + w``."""
    clean = env.step(np.asarray(x, dtype=float), env.project_action(u))
    return clean + noise.sample(np.shape(clean))


class PendulumEnv(Environment):
    name = "pendulum"

    def __init__(self, true_params: PendulumParams = PendulumParams(),
                 prior_params: PendulumParams = PendulumParams(9.0, 0.5, 2.0),
                 dt: float = 0.05):
        self.true_params = true_params
        self.prior_params = prior_params
        self.spec = EnvSpec(
            state_dim=2, action_dim=1,
            state_bounds=PENDULUM_SPEC.state_bounds, action_bounds=PENDULUM_SPEC.action_bounds,
            wrap_mask=PENDULUM_SPEC.wrap_mask, dt=dt,
            state_names=PENDULUM_SPEC.state_names, action_names=PENDULUM_SPEC.action_names,
        )

    def step(self, x, u):
        return pendulum_step(x, u, self.true_params, self.spec)

    def prior_step(self, x, u):
        return pendulum_step(x, u, self.prior_params, self.spec)

    def prior_descriptor(self, true: bool = False) -> dict:
        p = self.true_params if true else self.prior_params
        return {"env": self.name, "dt": self.spec.dt, "params": {"g": p.g, "m": p.m, "l": p.l}}


class LinearGridEnv(Environment):
    """Linear dynamics ``A x + B u`` restricted to a finite lattice of states.

    The next state is clipped to the lattice box and snapped to the nearest
    lattice value per coordinate, so the state-action space stays finite.
    """

    name = "linear_grid"
    finite = True

    def __init__(self, A, B, state_values: Sequence[Sequence[float]],
                 action_values: Sequence[Sequence[float]], prior_A=None, prior_B=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        self.prior_A = self.A if prior_A is None else np.atleast_2d(np.asarray(prior_A, dtype=float))
        self.prior_B = self.B if prior_B is None else np.atleast_2d(np.asarray(prior_B, dtype=float))
        self.state_values = [np.sort(np.asarray(v, dtype=float)) for v in state_values]
        self.action_values = [np.sort(np.asarray(v, dtype=float)) for v in action_values]
        if self.A.shape[0] != len(self.state_values) or self.B.shape[1] != len(self.action_values):
            raise ValueError("lattice dimensions do not match A and B")
        for v in self.state_values + self.action_values:
            if len(v) < 2:
                raise ValueError("every lattice coordinate needs at least two values")
        self.spec = EnvSpec(
            state_dim=len(self.state_values), action_dim=len(self.action_values),
            state_bounds=tuple((float(v[0]), float(v[-1])) for v in self.state_values),
            action_bounds=tuple((float(v[0]), float(v[-1])) for v in self.action_values),
            dt=1.0,
        )

    @staticmethod
    def _snap(values: list, x: np.ndarray) -> np.ndarray:
        x = np.array(x, dtype=float)
        for i, v in enumerate(values):
            idx = np.abs(x[..., i, None] - v).argmin(axis=-1)
            x[..., i] = v[idx]
        return x

    def project_state(self, x):
        return self._snap(self.state_values, x)

    def project_action(self, u):
        return self._snap(self.action_values, u)

    def _step(self, A, B, x, u):
        return self.project_state(linear_env_step(x, self.project_action(u), A, B))

    def step(self, x, u):
        return self._step(self.A, self.B, x, u)

    def prior_step(self, x, u):
        return linear_env_step(x, self.project_action(u), self.prior_A, self.prior_B)

    def prior_descriptor(self, true: bool = False) -> dict:
        A, B = (self.A, self.B) if true else (self.prior_A, self.prior_B)
        return {"env": self.name, "A": A.tolist(), "B": B.tolist(),
                "state_values": [v.tolist() for v in self.state_values],
                "action_values": [v.tolist() for v in self.action_values]}

    @property
    def states(self) -> np.ndarray:
        return np.array(list(itertools.product(*self.state_values)))

    @property
    def actions(self) -> np.ndarray:
        return np.array(list(itertools.product(*self.action_values)))

    @property
    def points(self) -> np.ndarray:
        """The whole finite state-action space."""
        return np.array([np.concatenate([x, u]) for x in self.states for u in self.actions])

    def state_grid(self, counts=None) -> np.ndarray:
        return self.states

    def lattice_index(self, z) -> np.ndarray:
        """Row index into :attr:`points` of each lattice point in ``z``."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        values = self.state_values + self.action_values
        idx = []
        for c, v in enumerate(values):
            i = np.clip(np.searchsorted(v, z[:, c]), 0, len(v) - 1)
            if not np.array_equal(v[i], z[:, c]):
                raise ValueError("point is not on the lattice")
            idx.append(i)
        return np.ravel_multi_index(idx, [len(v) for v in values])

    def test_grid(self, counts=None) -> np.ndarray:
        return self.points


def resolve_analytic(descriptor: dict) -> AnalyticPrior:
    """Rebuild an analytic prior from the descriptor stored in a snapshot."""
    kind = descriptor.get("env")
    if kind == "pendulum":
        env = PendulumEnv(prior_params=PendulumParams(**descriptor["params"]), dt=descriptor["dt"])
    elif kind == "linear_grid":
        env = LinearGridEnv(descriptor["A"], descriptor["B"], descriptor["state_values"],
                            descriptor["action_values"])
    else:
        raise ValueError(f"unknown analytic prior environment {kind!r}")
    return env.analytic_prior()
