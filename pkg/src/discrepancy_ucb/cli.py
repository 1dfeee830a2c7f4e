"""Command line entry point: run, compare, verify-theorem and control-eval.

Exit codes are 0 on success, 1 on a runtime failure (partial outputs are kept)
and 2 on a usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as cfgmod
from .config import CampaignConfig, ConfigError
from .env import resolve_analytic
from .episodic import run_campaign
from .gp import GpModel, from_snapshot, to_snapshot
from .metrics import (AGGREGATE_METRICS, CampaignRecord, aggregate_csv, aggregate_records, control_score,
                      first_episode_below, record_to_csv, relative_control_performance, theorem1_bound_episode,
                      theorem1_time, theorem1_time_ode, verify_convergence)
from .planner import mean_dynamics, pendulum_swingup_cost, run_mpc

log = logging.getLogger("discrepancy_ucb")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
THREADS_ENV = "DISCREPANCY_UCB_THREADS"
# Minimum spacing between checkpoints; the final episode is always saved.
CHECKPOINT_INTERVAL_S = 5.0


class UsageError(Exception):
    pass


def _package_version() -> str:
    try:
        from importlib.metadata import version
        return version("artifact")
    except Exception:
        return "unknown"


def _write_text(path: Path, text: str):
    """Write through a temporary file so readers never see half a file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_json(path: Path, data):
    _write_text(path, json.dumps(data, indent=1) + "\n")


def worker_count(jobs: int) -> int:
    """Worker processes for ``jobs`` independent trials, capped by the environment."""
    cap = os.environ.get(THREADS_ENV)
    limit = os.cpu_count() or 1
    if cap:
        try:
            limit = max(1, int(cap))
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be a positive integer, got {cap!r}") from None
    return max(1, min(jobs, limit))


# --------------------------------------------------------------------------
# Trials
# --------------------------------------------------------------------------


def _trial_dir(out: Path, trial: int) -> Path:
    return out / f"trial_{trial:03d}"


def _load_checkpoint(path: Path, cfg: CampaignConfig, memo_size: int):
    data = json.loads(path.read_text())
    if data.get("config_hash") != cfg.config_hash():
        raise UsageError(f"{path}: checkpoint was written for a different config")
    record = CampaignRecord.from_dict(data["record"])
    model = from_snapshot(data["model"], resolve_analytic, memo_size=memo_size)
    return record, model


def run_trial(cfg: CampaignConfig, trial: int, out: Path, resume: bool = False) -> dict:
    """Run one trial, checkpointing at episode boundaries. Returns a manifest entry."""
    campaign = cfgmod.build_campaign(cfg, trial)
    tdir = _trial_dir(out, trial)
    ckpt = tdir / "checkpoint.json"
    record = model = None
    if resume and ckpt.exists():
        record, model = _load_checkpoint(ckpt, cfg, campaign.memo_size)
        log.info("trial %d: resuming after episode %d", trial, len(record.rows))
    csv_path = out / f"trial_{trial:03d}.csv"

    last_saved = [time.monotonic()]

    def checkpoint(rec: CampaignRecord, m: GpModel):
        now = time.monotonic()
        if now - last_saved[0] < CHECKPOINT_INTERVAL_S and len(rec.rows) < campaign.episodes:
            return
        last_saved[0] = now
        _write_json(ckpt, {"config_hash": cfg.config_hash(), "record": rec.to_dict(), "model": to_snapshot(m)})

    t0 = time.perf_counter()
    try:
        record, model = run_campaign(campaign, record=record, model=model, on_episode=checkpoint)
    except Exception as exc:
        partial = getattr(exc, "record", None)
        if partial is not None:
            _write_text(csv_path, record_to_csv(partial, cfg.record_timing))
        raise
    _write_text(csv_path, record_to_csv(record, cfg.record_timing))
    _write_json(tdir / "final_model.json", to_snapshot(model))
    _write_json(tdir / "record.json", record.to_dict())
    base = record.baseline
    return {"trial": trial, "seed": campaign.seed, "csv": csv_path.name,
            "wall_time_s": time.perf_counter() - t0,
            "baseline": {"max_variance": base.max_variance, "mse": base.mse}}


def _run_trial_job(args):
    return run_trial(*args)


def run_trials(cfg: CampaignConfig, out: Path, resume: bool = False):
    """All trials of ``cfg``; returns ``(records, manifest_entries)`` in trial order."""
    jobs = [(cfg, t, out, resume) for t in range(cfg.trials)]
    workers = worker_count(len(jobs))
    if workers == 1:
        entries = [_run_trial_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_run_trial_job, jobs))
    records = [CampaignRecord.from_dict(json.loads((_trial_dir(out, t) / "record.json").read_text()))
               for t in range(cfg.trials)]
    return records, entries


def _manifest(cfg: CampaignConfig, entries, extra: Optional[dict] = None) -> dict:
    import matplotlib
    import scipy
    import yaml

    data = {
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "master_seed": cfg.master_seed,
        "trials": entries,
        "versions": {"artifact": _package_version(), "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__,
                     "matplotlib": matplotlib.__version__, "pyyaml": yaml.__version__},
    }
    data.update(extra or {})
    return data


def execute_run(cfg: CampaignConfig, out: Path, resume: bool = False):
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "config.yaml", cfg.dump())
    t0 = time.perf_counter()
    records, entries = run_trials(cfg, out, resume)
    _write_text(out / "aggregate.csv", aggregate_csv(records))
    _write_json(out / "manifest.json", _manifest(cfg, entries, {"wall_time_s": time.perf_counter() - t0}))
    return records


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def _apply_overrides(cfg: CampaignConfig, args) -> CampaignConfig:
    changes = {}
    if getattr(args, "trials", None) is not None:
        if args.trials < 1:
            raise UsageError("--trials must be at least 1")
        changes["trials"] = args.trials
    if getattr(args, "seed", None) is not None:
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        changes["master_seed"] = args.seed
    if getattr(args, "output_dir", None):
        changes["output_dir"] = str(args.output_dir)
    return dataclasses.replace(cfg, **changes)


def _load(path, args) -> CampaignConfig:
    return _apply_overrides(cfgmod.load_config(path), args)


def cmd_run(args) -> int:
    cfg = _load(args.config[0], args)
    execute_run(cfg, Path(cfg.output_dir), resume=args.resume)
    print(f"wrote {cfg.trials} trial(s) to {cfg.output_dir}")
    return EXIT_OK


def _comparable(a: CampaignConfig, b: CampaignConfig) -> Optional[str]:
    if a.env != b.env:
        return "env sections differ"
    if a.episodes != b.episodes or a.gp.episode_length != b.gp.episode_length:
        return "episode counts differ"
    if a.trials != b.trials:
        return "trial counts differ"
    return None


def summary_table(results) -> str:
    """CSV summary: final-episode metric means per method plus mean visited discrepancy."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "method", "episodes", "final_max_variance", "final_mse",
                "mean_visited_discrepancy"])
    for label, cfg, records in results:
        mv = aggregate_records(records, "max_variance")[0]
        mse = aggregate_records(records, "mse")[0]
        disc = aggregate_records(records, "mean_visited_discrepancy")[0]
        w.writerow([label, cfg.method, len(mv), repr(float(mv[-1])), repr(float(mse[-1])),
                    repr(float(np.mean(disc[1:] if disc.size > 1 else disc)))])
    return buf.getvalue()


def cmd_compare(args) -> int:
    from .plotting import METRIC_LABELS, plot_bands

    if len(args.config) < 2:
        raise UsageError("compare needs at least two --config files")
    cfgs = [_load(p, args) for p in args.config]
    for path, c in zip(args.config[1:], cfgs[1:]):
        reason = _comparable(cfgs[0], c)
        if reason:
            raise UsageError(f"{path} is not comparable with {args.config[0]}: {reason}")
    out = Path(args.output_dir or cfgs[0].output_dir)
    labels, results = [], []
    for c in cfgs:
        label = c.method
        k = 2
        while label in labels:
            label, k = f"{c.method}_{k}", k + 1
        labels.append(label)
        sub = dataclasses.replace(c, output_dir=str(out / label))
        results.append((label, sub, execute_run(sub, out / label, resume=args.resume)))
    for metric in AGGREGATE_METRICS:
        include = metric != "mean_visited_discrepancy"
        series = {}
        for label, _, records in results:
            mean, lo, hi = aggregate_records(records, metric, include_baseline=include)
            x = np.arange(0 if include else 1, len(records[0].rows) + 1)
            series[label] = (x, mean, lo, hi)
        plot_bands(series, METRIC_LABELS[metric], out / f"{metric}.svg", logy=metric != "mean_visited_discrepancy")
    table = summary_table(results)
    _write_text(out / "summary.csv", table)
    print(table, end="")
    return EXIT_OK


def theorem_checks(record: CampaignRecord, n_z: int, horizon: int, eps_list: Sequence[float]) -> list:
    """Bound vs observed episode for each ``eps``; one dict per value."""
    rows = []
    for eps in eps_list:
        bound = theorem1_bound_episode(n_z, horizon, eps) if eps < n_z else 1
        rows.append({"eps": eps, "bound_episode": bound, "observed_episode": first_episode_below(record, eps),
                     "held": verify_convergence(record, n_z, horizon, eps)})
    return rows


def cmd_verify_theorem(args) -> int:
    cfg = _load(args.config[0], args)
    if cfg.env.name != "linear_grid":
        raise UsageError("verify-theorem needs a finite-grid env (env.name: linear_grid)")
    if cfg.gp.schedule != "theorem":
        raise UsageError("verify-theorem needs gp.schedule: theorem")
    eps_list = cfg.theorem.eps if cfg.theorem else [0.5, 0.25, 0.1]
    env = cfgmod.build_env(cfg)
    n_z, horizon = len(env.points), cfg.gp.episode_length
    needed = max([theorem1_bound_episode(n_z, horizon, e) for e in eps_list if e < 1.0] + [1])
    if cfg.episodes < needed:
        print(f"extending the campaign from {cfg.episodes} to {needed} episodes to reach every bound")
        cfg = dataclasses.replace(cfg, episodes=needed)
    out = Path(cfg.output_dir)
    records = execute_run(cfg, out, resume=args.resume)
    rows = []
    for trial, rec in enumerate(records):
        assumption_ok = all(bool(r.assumption3_held) for r in rec.rows)
        for r in theorem_checks(rec, n_z, horizon, eps_list):
            rows.append({"trial": trial, **r, "assumption3_all": assumption_ok})
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    _write_text(out / "theorem.csv", buf.getvalue())
    print(f"N_z={n_z} N={horizon} trials={len(records)}")
    for eps in eps_list:
        sub = [r for r in rows if r["eps"] == eps]
        t_closed = theorem1_time(n_z, horizon, eps) if eps < n_z else 0.0
        t_ode = theorem1_time_ode(n_z, horizon, eps) if eps < n_z else 0.0
        worst = max((r["observed_episode"] or np.inf) for r in sub)
        ok = all(r["held"] for r in sub)
        print(f"eps={eps:g}: bound episode {sub[0]['bound_episode']} (t={t_closed:.2f}, ode {t_ode:.2f}), "
              f"worst observed {worst}, {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if all(r["held"] for r in rows) else EXIT_FAILURE


def _check_snapshot(snap: dict, env, cfg: CampaignConfig):
    rec = snap.get("model", {})
    if rec.get("input_dim") != env.spec.input_dim or rec.get("output_dim") != env.spec.state_dim:
        raise UsageError("snapshot dimensions do not match the configured environment")
    root = snap.get("root", {})
    if root.get("kind") == "analytic":
        if root.get("env") != env.name or (env.name == "pendulum" and root.get("dt") != env.spec.dt):
            raise UsageError(f"snapshot was learned on {root.get('env')!r}, config declares {env.name!r}")
    wrap = rec.get("kernel", {}).get("wrap_mask")
    if wrap is not None and tuple(wrap) != tuple(env.spec.kernel_wrap_mask):
        raise UsageError("snapshot kernel does not match the configured environment")


def control_traces(cfg: CampaignConfig, model: Optional[GpModel], include_prior: bool = True,
                   states: Optional[dict] = None) -> dict:
    """Per-step rewards of swing-up MPC with the oracle, the learned model and the analytic prior.

    If ``states`` is a dict, the executed state trajectory of each run is stored
    in it under the same key as the rewards.
    """
    env = cfgmod.build_env(cfg)
    c = cfg.control
    cem = cfgmod.cem_config(c.cem)
    x0 = env.project_state(np.asarray(c.x0, dtype=float))
    low, high = env.spec.action_low, env.spec.action_high
    planners = {"oracle": env.step}
    if model is not None:
        planners["learned"] = mean_dynamics(model)
    if include_prior:
        planners["prior"] = env.prior_step
    out = {}
    for name, dyn in planners.items():
        rewards, visited = run_mpc(env.step, dyn, pendulum_swingup_cost, x0, c.steps, cem, low, high, c.seed,
                                   project_state=env.project_state)
        out[name] = np.asarray(rewards)
        if states is not None:
            states[name] = visited
    return out


def cmd_control_eval(args) -> int:
    from .plotting import plot_control

    cfg = _load(args.config[0], args)
    if cfg.env.name != "pendulum":
        raise UsageError("control-eval is defined for the pendulum swing-up task")
    if not args.snapshot:
        raise UsageError("control-eval needs --snapshot")
    path = Path(args.snapshot)
    if not path.exists():
        raise UsageError(f"snapshot {path} does not exist")
    try:
        snap = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read snapshot {path}: {exc}") from exc
    env = cfgmod.build_env(cfg)
    _check_snapshot(snap, env, cfg)
    try:
        model = from_snapshot(snap, resolve_analytic)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"invalid snapshot {path}: {exc}") from exc
    traces = control_traces(cfg, model)
    cum = {k: control_score(v) for k, v in traces.items()}
    out = Path(cfg.output_dir)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(traces)
    w.writerow(["step"] + [f"{n}_{s}" for n in names for s in ("reward", "cumulative")])
    for t in range(cfg.control.steps):
        w.writerow([t + 1] + [repr(float(a[t])) for n in names for a in (traces[n], cum[n])])
    _write_text(out / "control.csv", buf.getvalue())
    plot_control(cum, out / "control.svg")
    for n in names:
        print(f"{n}: final cumulative reward {cum[n][-1]:.3f}")
    print(f"learned relative to oracle: {relative_control_performance(cum['learned'], cum['oracle']):.3f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="discrepancy-ucb", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, many=False):
        sp.add_argument("--config", action="append", required=True, metavar="PATH",
                        help="campaign config file" + (" (repeat once per method)" if many else ""))
        sp.add_argument("--output-dir", type=Path, help="override output_dir from the config")
        sp.add_argument("--trials", type=int, help="override the number of trials")
        sp.add_argument("--seed", type=int, help="override master_seed")
        sp.add_argument("--resume", action="store_true", help="continue from per-trial checkpoints")

    common(sub.add_parser("run", help="run all trials of one config"))
    common(sub.add_parser("compare", help="run several methods and overlay their curves"), many=True)
    common(sub.add_parser("verify-theorem", help="check the variance convergence bound on a finite grid"))
    ce = sub.add_parser("control-eval", help="swing-up MPC with a learned model vs the true dynamics")
    common(ce)
    ce.add_argument("--snapshot", help="final_model.json written by run")
    return p


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "verify-theorem": cmd_verify_theorem,
            "control-eval": cmd_control_eval}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command != "compare" and len(args.config) > 1:
        print(f"error: {args.command} takes a single --config", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure: partial outputs stay on disk
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
