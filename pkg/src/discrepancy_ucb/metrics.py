"""Evaluation curves, the convergence-rate bound and control scoring."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .gp import GpModel, PriorMean
from .planner import vector_norm

CSV_COLUMNS = ("tau", "max_variance", "mse", "mean_visited_discrepancy", "assumption3_held", "wall_time_s")


class InsufficientEpisodesError(ValueError):
    pass


@dataclass
class EpisodeRow:
    tau: int
    max_variance: float
    mse: float
    mean_visited_discrepancy: float = float("nan")
    assumption3_held: Optional[bool] = None
    wall_time_s: float = float("nan")


@dataclass
class CampaignRecord:
    """Per-episode metrics of one campaign.

    ``baseline`` describes the model before any data (episode 0); ``rows``
    holds one entry per completed episode, in order.
    """

    baseline: Optional[EpisodeRow] = None
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, row: EpisodeRow):
        if self.rows and row.tau != self.rows[-1].tau + 1:
            raise ValueError(f"episode {row.tau} does not follow episode {self.rows[-1].tau}")
        self.rows.append(row)

    def column(self, name: str, include_baseline: bool = False) -> np.ndarray:
        rows = ([self.baseline] if include_baseline and self.baseline else []) + self.rows
        return np.array([np.nan if getattr(r, name) is None else float(getattr(r, name)) for r in rows])

    def to_dict(self) -> dict:
        return {"baseline": asdict(self.baseline) if self.baseline else None,
                "rows": [asdict(r) for r in self.rows], "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignRecord":
        return cls(baseline=EpisodeRow(**d["baseline"]) if d.get("baseline") else None,
                   rows=[EpisodeRow(**r) for r in d.get("rows", [])], meta=dict(d.get("meta", {})))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def record_to_csv(record: CampaignRecord, include_timing: bool = True) -> str:
    """Fixed-column CSV text, LF line endings, one row per completed episode.

    With ``include_timing=False`` the wall-time column is written as ``nan``
    so repeated runs are byte-identical.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in record.rows:
        wall = r.wall_time_s if include_timing else float("nan")
        writer.writerow([_fmt(r.tau), _fmt(r.max_variance), _fmt(r.mse),
                         _fmt(r.mean_visited_discrepancy), _fmt(r.assumption3_held), _fmt(wall)])
    return buf.getvalue()


AGGREGATE_METRICS = ("max_variance", "mse", "mean_visited_discrepancy")


def aggregate_csv(records: Sequence[CampaignRecord]) -> str:
    """Per-episode mean/min/max across trials of each plotted metric.

    One row per completed episode; all records must cover the same episodes.
    """
    lengths = {len(r.rows) for r in records}
    if len(lengths) != 1:
        raise ValueError(f"records cover different episode counts: {sorted(lengths)}")
    stats = {m: aggregate_records(records, m) for m in AGGREGATE_METRICS}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["tau"] + [f"{m}_{s}" for m in AGGREGATE_METRICS for s in ("mean", "min", "max")])
    for i, row in enumerate(records[0].rows):
        writer.writerow([row.tau] + [_fmt(stats[m][k][i]) for m in AGGREGATE_METRICS for k in range(3)])
    return buf.getvalue()


def read_csv_rows(text: str) -> list:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    return list(reader)


def max_variance_over_grid(model: GpModel, grid, chunk: int = 2048) -> float:
    grid = np.atleast_2d(grid)
    if grid.shape[0] == 0:
        raise ValueError("grid must be non-empty")
    return max(float(np.max(model.predict_variance(grid[i:i + chunk]))) for i in range(0, len(grid), chunk))


def mse_over_grid(model: GpModel, truth: Callable[[np.ndarray], np.ndarray], grid, chunk: int = 2048) -> float:
    """Mean over the grid of the squared Euclidean error of the posterior mean."""
    grid = np.atleast_2d(grid)
    if grid.shape[0] == 0:
        raise ValueError("grid must be non-empty")
    total = 0.0
    for i in range(0, len(grid), chunk):
        block = grid[i:i + chunk]
        err = model.predict_mean(block) - truth(block)
        total += float(np.sum(err * err))
    return total / grid.shape[0]


def visited_discrepancy(prior: PriorMean | Callable, truth: Callable, visited, norm: str = "l2") -> float:
    """Mean ``|p0(z) - f(z)|`` over visited state-action points (or an episode log)."""
    z = np.atleast_2d(getattr(visited, "points", visited))
    if z.shape[0] == 0:
        raise ValueError("no visited points")
    return float(np.mean(vector_norm(prior(z) - truth(z), norm)))


def theorem1_time(n_z: int, horizon: int, eps: float) -> float:
    """Closed-form episode count after which the mean grid variance is below ``eps``."""
    if not 0 < eps < n_z:
        raise ValueError(f"eps must lie in (0, {n_z}), got {eps}")
    return n_z * (n_z - eps) / (horizon**2 * eps) + n_z * math.log(n_z / eps)


def theorem1_time_ode(n_z: int, horizon: int, eps: float, rtol: float = 1e-10) -> float:
    """Time for ``v' = -v^2 / (n_z (n_z / horizon^2 + v))`` to fall from ``n_z`` to ``eps``.

    Numerical counterpart of :func:`theorem1_time`.
    """
    from scipy.integrate import solve_ivp

    if not 0 < eps < n_z:
        raise ValueError(f"eps must lie in (0, {n_z}), got {eps}")
    b = n_z / horizon**2

    def rhs(_t, v):
        return -v**2 / (n_z * (b + v))

    def hit(_t, v):
        return v[0] - eps

    hit.terminal = True
    hit.direction = -1
    t_max = 10.0 * theorem1_time(n_z, horizon, eps) + 10.0
    sol = solve_ivp(rhs, (0.0, t_max), [float(n_z)], events=hit, rtol=rtol, atol=1e-12)
    if not sol.t_events[0].size:
        raise RuntimeError("ODE did not reach eps within the integration window")
    return float(sol.t_events[0][0])


def theorem1_bound_episode(n_z: int, horizon: int, eps: float) -> int:
    return max(1, math.ceil(theorem1_time(n_z, horizon, eps)))


def max_variance_at_episode_start(record: CampaignRecord, tau: int) -> float:
    """Grid max variance at the start of episode ``tau`` (after ``tau - 1`` episodes)."""
    if tau == 1:
        if record.baseline is None:
            raise InsufficientEpisodesError("record has no baseline row")
        return record.baseline.max_variance
    idx = tau - 2
    if idx >= len(record.rows):
        raise InsufficientEpisodesError(f"campaign stopped after {len(record.rows)} episodes")
    return record.rows[idx].max_variance


def first_episode_below(record: CampaignRecord, eps: float) -> Optional[int]:
    """Smallest episode whose starting grid max variance is at most ``eps``."""
    for tau in range(1, len(record.rows) + 2):
        if max_variance_at_episode_start(record, tau) <= eps:
            return tau
    return None


def verify_convergence(record: CampaignRecord, n_z: int, horizon: int, eps: float) -> bool:
    """Whether the grid max variance is at most ``eps`` by the bound's episode.

    The bound refers to the variance at the start of episode ``ceil(t(eps))``;
    for ``eps >= 1`` the prior variance of the RBF kernel already satisfies it.
    """
    if not record.rows:
        raise InsufficientEpisodesError("insufficient episodes: campaign has no completed episodes")
    if eps >= 1.0:
        return max_variance_at_episode_start(record, 1) <= eps
    bound = theorem1_bound_episode(n_z, horizon, eps)
    if bound - 1 > len(record.rows):
        raise InsufficientEpisodesError(
            f"insufficient episodes: bound episode {bound} needs {bound - 1} completed episodes, "
            f"record has {len(record.rows)}")
    return max_variance_at_episode_start(record, bound) <= eps


def control_score(rewards: Sequence[float]) -> np.ndarray:
    """Running cumulative reward; the last entry is the score."""
    return np.cumsum(np.asarray(rewards, dtype=float))


def relative_control_performance(learned: Sequence[float], oracle: Sequence[float]) -> float:
    """How close the learned-model controller's final cumulative reward comes to the oracle's.

    Both traces are cumulative rewards; only the final entries matter. For
    positive scores this is ``learned / oracle``. Swing-up rewards are
    negated costs, so for negative scores it is ``oracle / learned``: a
    learned controller with twice the oracle's cost scores 0.5. Mixed signs
    or a zero score are rejected.
    """
    a = float(np.asarray(learned, dtype=float).reshape(-1)[-1])
    b = float(np.asarray(oracle, dtype=float).reshape(-1)[-1])
    if a > 0 and b > 0:
        return a / b
    if a < 0 and b < 0:
        return b / a
    raise ValueError(f"cannot compare scores of mixed or zero sign ({a}, {b})")


def aggregate_records(records: Sequence[CampaignRecord], column: str, include_baseline: bool = False):
    """Per-episode mean, min and max of ``column`` across trials."""
    data = np.vstack([r.column(column, include_baseline) for r in records])
    return data.mean(axis=0), data.min(axis=0), data.max(axis=0)
