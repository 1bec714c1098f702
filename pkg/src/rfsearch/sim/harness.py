"""Batch runs over the (M, N) experiment matrix and their aggregation."""
from __future__ import annotations

import csv
import io
import json
import logging
import multiprocessing as mp
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import MalformedRow, OutputNotWritable, ScenarioInfeasible
from ..grasp.policy import Policy, QPolicy, RandomPolicy, ScriptedPolicy
from .episode import EpisodeBudget, EpisodeConfig, System, run_episode
from .scenario import ScenarioConfig, generate_scenario

log = logging.getLogger(__name__)

EPISODE_COLUMNS = ("system", "M", "N", "seed", "distance", "explore_distance", "attempts",
                   "success", "retries")
SUMMARY_COLUMNS = ("system", "M", "N", "trials", "completed", "completion",
                   "distance_mean", "distance_std_pop", "grasp_attempts", "efficiency")
COMPARISON_COLUMNS = ("M", "N", "rf_distance_mean", "baseline_distance_mean",
                      "distance_ratio", "rf_completion", "baseline_completion")
SYSTEM_ORDER = {s.value: i for i, s in enumerate(System)}
SEED_STRIDE = 1000       # per-trial seed spacing, leaves room for re-seeds
MAX_RESEEDS = 50


def fmt(x) -> str:
    """Floats with 9 significant digits, everything else via str; None -> ''."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.9g}"
    return str(x)


@dataclass
class ExperimentConfig:
    matrix: list = field(default_factory=lambda: [(3, 10, 20)])
    systems: tuple = ("RfGuided", "Baseline")
    seed: int = 0
    budget: dict = field(default_factory=dict)
    planner: dict = field(default_factory=dict)      # PlannerConfig overrides
    episode: dict = field(default_factory=dict)      # EpisodeConfig overrides
    policy: str = "scripted"                          # scripted | random | checkpoint path
    out: str = "results"
    jobs: int = 1

    def __post_init__(self):
        self.matrix = [tuple(int(v) for v in cell) for cell in self.matrix]
        for M, N, trials in self.matrix:
            if trials < 1:
                raise ValueError(f"cell {(M, N, trials)}: trials must be >= 1")
        self.systems = tuple(System(s).value for s in self.systems)
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def episode_config(self) -> EpisodeConfig:
        base = EpisodeConfig()
        planner = replace(base.planner, **self.planner)
        return replace(base, planner=planner, **self.episode)

    def episode_budget(self) -> EpisodeBudget:
        return EpisodeBudget(**self.budget)


def trial_seed(base: int, M: int, N: int, trial: int) -> int:
    """Scenario seed shared by every system for one (M, N, trial) cell."""
    return int(base + SEED_STRIDE * (100 * (16 * M + N) + trial))


def load_policy(spec) -> Policy:
    if isinstance(spec, Policy):
        return spec
    if spec == "scripted":
        return ScriptedPolicy()
    if spec == "random":
        return RandomPolicy()
    from ..grasp.learning import load_params
    return QPolicy(load_params(spec))


def scenario_with_retries(M, N, seed, config: Optional[ScenarioConfig] = None):
    """Generate a scenario, moving on to the next seed when placement fails."""
    for retry in range(MAX_RESEEDS + 1):
        try:
            return generate_scenario(M, N, seed + retry, config), retry
        except ScenarioInfeasible:
            log.info("scenario (M=%d, N=%d, seed=%d) infeasible, re-seeding", M, N, seed + retry)
    raise ScenarioInfeasible(f"no feasible layout for M={M}, N={N} from seed {seed}")


def _run_task(task):
    system, M, N, seed, policy, budget, ep_cfg = task
    scn, retries = scenario_with_retries(M, N, seed)
    m = run_episode(scn, system, load_policy(policy), budget, ep_cfg)
    return {"system": system, "M": M, "N": N, "seed": scn.seed,
            "distance": m.traveled_distance, "explore_distance": float(m.explore_distance),
            "attempts": m.grasp_attempts, "success": bool(m.successful), "retries": retries}


def experiment_tasks(cfg: ExperimentConfig, policy=None) -> list:
    policy = cfg.policy if policy is None else policy
    budget, ep_cfg = cfg.episode_budget(), cfg.episode_config()
    tasks = []
    for M, N, trials in cfg.matrix:
        for t in range(trials):
            seed = trial_seed(cfg.seed, M, N, t)
            for system in cfg.systems:
                tasks.append((system, M, N, seed, policy, budget, ep_cfg))
    return tasks


def _sort_key(row):
    return (SYSTEM_ORDER.get(row["system"], 99), int(row["M"]), int(row["N"]), int(row["seed"]))


def _prepare_out(out) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OutputNotWritable(f"cannot write to {out}: {exc}") from exc
    return out


def write_csv(path, columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r[c]) for c in columns])
    try:
        Path(path).write_bytes(buf.getvalue().encode())
    except OSError as exc:
        raise OutputNotWritable(f"cannot write {path}: {exc}") from exc


def run_experiment(cfg: ExperimentConfig, policy=None, progress=None):
    """Run every (system, M, N, trial) episode; returns the written paths.

    Episodes can run in ``cfg.jobs`` worker processes.  Rows are sorted by
    (system, M, N, seed) before writing, so the files do not depend on the
    worker count or completion order.
    """
    out = _prepare_out(cfg.out)
    tasks = experiment_tasks(cfg, policy)
    rows = []
    if cfg.jobs > 1 and len(tasks) > 1:
        ctx = mp.get_context("spawn")
        with ctx.Pool(min(cfg.jobs, len(tasks))) as pool:
            for row in pool.imap_unordered(_run_task, tasks):
                rows.append(row)
                if progress:
                    progress(row)
    else:
        for task in tasks:
            row = _run_task(task)
            rows.append(row)
            if progress:
                progress(row)
    rows.sort(key=_sort_key)
    episodes = out / "episodes.csv"
    write_csv(episodes, EPISODE_COLUMNS, rows)
    summary, comparison = summarize_rows(rows)
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary)
    write_csv(out / "comparison.csv", COMPARISON_COLUMNS, comparison)
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True,
                                                default=str) + "\n")
    return {"episodes": episodes, "summary": out / "summary.csv",
            "comparison": out / "comparison.csv"}


# --- aggregation --------------------------------------------------------------

_PARSERS = {"system": str, "M": int, "N": int, "seed": int, "distance": float,
            "explore_distance": float, "attempts": int, "success": int, "retries": int}


def read_episodes(path) -> list:
    """Parse an episode CSV; a bad row raises MalformedRow with its line number."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedRow(1, "missing header") from None
        missing = [c for c in EPISODE_COLUMNS if c not in header]
        if missing:
            raise MalformedRow(1, f"missing columns {missing}")
        rows = []
        for raw in reader:
            line = reader.line_num
            if not raw:
                continue
            if len(raw) != len(header):
                raise MalformedRow(line, f"expected {len(header)} fields, got {len(raw)}")
            rec = dict(zip(header, raw))
            row = {}
            for c in EPISODE_COLUMNS:
                try:
                    row[c] = _PARSERS[c](rec[c])
                except ValueError:
                    raise MalformedRow(line, f"bad {c} value {rec[c]!r}") from None
            if row["system"] not in SYSTEM_ORDER:
                raise MalformedRow(line, f"unknown system {row['system']!r}")
            if row["success"] not in (0, 1) or row["attempts"] < 0 or not row["distance"] >= 0:
                raise MalformedRow(line, "value out of range")
            row["success"] = bool(row["success"])
            rows.append(row)
    return rows


def summarize_rows(rows):
    """Per (system, M, N) summary rows and RF/baseline comparison rows.

    Distance statistics use successful trials only (population std) and are
    left empty when no trial succeeded.  Efficiency is successful grasps
    over all grasp attempts in the group.
    """
    groups = {}
    for r in sorted(rows, key=_sort_key):
        groups.setdefault((r["system"], r["M"], r["N"]), []).append(r)
    summary = []
    for (system, M, N), rs in groups.items():
        d = np.array([r["distance"] for r in rs if r["success"]])
        k = int(sum(r["success"] for r in rs))
        attempts = int(sum(r["attempts"] for r in rs))
        summary.append({
            "system": system, "M": M, "N": N, "trials": len(rs), "completed": k,
            "completion": k / len(rs),
            "distance_mean": float(d.mean()) if d.size else None,
            "distance_std_pop": float(d.std()) if d.size else None,
            "grasp_attempts": attempts,
            "efficiency": k / attempts if attempts else None})
    by_key = {(s["system"], s["M"], s["N"]): s for s in summary}
    comparison = []
    for (system, M, N), s in by_key.items():
        if system != System.RF_GUIDED.value:
            continue
        b = by_key.get((System.BASELINE.value, M, N))
        if b is None:
            continue
        ratio = None
        if s["distance_mean"] is not None and b["distance_mean"]:
            ratio = s["distance_mean"] / b["distance_mean"]
        comparison.append({"M": M, "N": N, "rf_distance_mean": s["distance_mean"],
                           "baseline_distance_mean": b["distance_mean"], "distance_ratio": ratio,
                           "rf_completion": s["completion"],
                           "baseline_completion": b["completion"]})
    return summary, comparison


def summarize(episode_csv, out_dir=None):
    """Aggregate an episode CSV; also writes the tables when ``out_dir`` is given."""
    rows = read_episodes(episode_csv)
    summary, comparison = summarize_rows(rows)
    if out_dir is not None:
        out = _prepare_out(out_dir)
        write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary)
        write_csv(out / "comparison.csv", COMPARISON_COLUMNS, comparison)
    return summary, comparison
