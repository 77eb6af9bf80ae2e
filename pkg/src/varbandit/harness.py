"""Experiment orchestration: environment factories, single runs, seeded
sweeps, CSV/JSON reporting and log-log slope fits.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from .algorithms import run_baseline_explore_exploit, run_baseline_se, run_valee, run_vase
from .environments import (
    LinearBanditEnv,
    diagnostics,
    make_lower_bound_env,
    random_unit_actions,
    sigma_q_sq,
)
from .types import (
    Algorithm,
    ConfigError,
    Diagnostics,
    ExperimentConfig,
    FiniteActions,
    LpBall,
    RewardModel,
    RunTrace,
    SamplerKind,
    derive_rng_stream,
)

__all__ = [
    "GRID_ALIASES",
    "REPORT_COLUMNS",
    "RunResult",
    "SweepSpec",
    "TRACE_HEADER",
    "build_environment",
    "default_explore_budget",
    "fit_loglog_slope",
    "format_float",
    "load_json",
    "run_experiment",
    "run_sweep",
    "trace_to_csv",
    "write_report",
    "write_trace_csv",
]

TRACE_HEADER = ("t", "action_id", "reward", "gap", "cum_regret", "phase")
SEED_ENV_VAR = "VARBANDIT_SEED"
SLOPE_MIN_POINTS = 4

# Expected log-log regret slopes, checked in summary.json.
SLOPE_RANGES = {
    Algorithm.VASE.value: (0.35, 0.65),
    Algorithm.VALEE.value: (0.35, 0.65),
    Algorithm.BASELINE_EE.value: (0.55, 0.8),
}


def format_float(x: float) -> str:
    """17 significant digits, round-trip exact."""
    return format(float(x), ".17g")


def load_json(path) -> Any:
    """Parse a JSON file; syntax errors become a ``ConfigError`` with position."""
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno} column {exc.colno}", exc.msg) from None


def seed_override() -> Optional[int]:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None or raw.strip() == "":
        return None
    try:
        seed = int(raw, 0)
    except ValueError:
        raise ConfigError(SEED_ENV_VAR, f"must be an integer, got {raw!r}") from None
    if not 0 <= seed < 2**64:
        raise ConfigError(SEED_ENV_VAR, "must be a 64-bit non-negative integer")
    return seed


# ---------------------------------------------------------------------------
# Environment factory


def _vector(spec: dict, key: str, d: int, rng: np.random.Generator) -> np.ndarray:
    """``theta_star`` as an explicit list or ``{"norm": r}`` (random direction)."""
    raw = spec.get(key)
    field_name = f"environment.{key}"
    if raw is None:
        raise ConfigError(field_name, "missing")
    if isinstance(raw, dict):
        if set(raw) != {"norm"}:
            raise ConfigError(field_name, "object form must be {\"norm\": r}")
        return float(raw["norm"]) * random_unit_actions(1, d, rng)[0]
    vec = np.asarray(raw, dtype=np.float64)
    if vec.shape != (d,):
        raise ConfigError(field_name, f"must have length {d}, got shape {vec.shape}")
    return vec


def _covariance(spec: dict, d: int, q: float, isotropic_target: str) -> np.ndarray:
    """Covariance from ``covariance`` (scalar, diagonal or matrix) or ``sigma_sq``.

    ``sigma_sq`` means ``sigma_sq * I`` on finite sets and the isotropic
    covariance with ``sigma_q^2 = sigma_sq`` on balls.
    """
    if "covariance" in spec and "sigma_sq" in spec:
        raise ConfigError("environment.covariance", "give either covariance or sigma_sq, not both")
    if "sigma_sq" in spec:
        s = spec["sigma_sq"]
        if not isinstance(s, (int, float)) or s < 0:
            raise ConfigError("environment.sigma_sq", f"must be a number >= 0, got {s!r}")
        if isotropic_target == "sigma_q":
            return float(s) / d ** (2.0 / q) * np.eye(d)
        return float(s) * np.eye(d)
    raw = spec.get("covariance", 0.0)
    try:
        cov = np.asarray(raw, dtype=np.float64)
    except (TypeError, ValueError):
        raise ConfigError("environment.covariance", "must be numeric") from None
    if cov.ndim == 0:
        return float(cov) * np.eye(d)
    if cov.shape == (d,):
        return np.diag(cov)
    if cov.shape == (d, d):
        return cov
    raise ConfigError("environment.covariance", f"must be a scalar, length-{d} list or {d}x{d} matrix")


def build_environment(spec: dict, rng: np.random.Generator) -> tuple[LinearBanditEnv, dict]:
    """Instantiate the environment described by a config ``environment`` object.

    Kinds
    -----
    ``finite``
        ``actions`` (list of vectors) or ``random_actions: {"K", "d"}``;
        ``theta_star``; ``covariance`` or ``sigma_sq``.
    ``ball``
        ``d``, ``p``, ``theta_star``, ``covariance`` or ``sigma_sq``.
    ``lower_bound``
        ``construction`` (PLe2 / PGt2), ``d``, ``sigma_sq``, ``q``; the
        horizon is taken from the run.

    Random parts of the instance (actions, direction of ``theta_star``,
    sign vector) come from ``instance_seed`` (default 0) so every run of a
    cell faces the same instance; ``rng`` drives the rewards only.
    ``sampler`` selects the boundedness device (default gaussian_rejection).
    """
    kind = spec.get("kind")
    inst_seed = spec.get("instance_seed", 0)
    if not isinstance(inst_seed, int) or inst_seed < 0:
        raise ConfigError("environment.instance_seed", "must be a non-negative integer")
    inst_rng = np.random.default_rng(inst_seed)
    try:
        sampler = SamplerKind(spec.get("sampler", SamplerKind.GAUSSIAN_REJECTION.value))
    except ValueError:
        raise ConfigError("environment.sampler", f"unknown sampler {spec.get('sampler')!r}") from None
    extras: dict = {}
    try:
        if kind == "finite":
            if "actions" in spec:
                A = np.asarray(spec["actions"], dtype=np.float64)
                if A.ndim != 2:
                    raise ConfigError("environment.actions", "must be a list of equal-length vectors")
            elif "random_actions" in spec:
                ra = spec["random_actions"]
                try:
                    A = random_unit_actions(int(ra["K"]), int(ra["d"]), inst_rng)
                except (KeyError, TypeError, ValueError):
                    raise ConfigError("environment.random_actions", "needs integer K and d") from None
            else:
                raise ConfigError("environment.actions", "give actions or random_actions")
            aset = FiniteActions(A)
            d = aset.d
            theta = _vector(spec, "theta_star", d, inst_rng)
            cov = _covariance(spec, d, 2.0, "matrix")
        elif kind == "ball":
            for key in ("d", "p"):
                if key not in spec:
                    raise ConfigError(f"environment.{key}", "missing")
            try:
                aset = LpBall(int(spec["d"]), float(spec["p"]))
            except ValueError as exc:
                raise ConfigError("environment.p", str(exc)) from None
            d = aset.d
            theta = _vector(spec, "theta_star", d, inst_rng)
            cov = _covariance(spec, d, aset.q, "sigma_q")
        elif kind == "lower_bound":
            return _build_lower_bound(spec, rng, inst_seed, sampler)
        else:
            raise ConfigError("environment.kind", f"must be finite, ball or lower_bound, got {kind!r}")
        model = RewardModel(theta, cov, sampler)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"environment.{kind}", str(exc)) from None
    return LinearBanditEnv(aset, model, rng), extras


def _build_lower_bound(spec, rng, inst_seed, sampler):
    for key in ("d", "sigma_sq", "q", "horizon"):
        if key not in spec:
            raise ConfigError(f"environment.{key}", "missing")
    try:
        env, inst = make_lower_bound_env(
            int(spec["d"]),
            float(spec["sigma_sq"]),
            int(spec["horizon"]),
            float(spec["q"]),
            construction=spec.get("construction", "PLe2"),
            seed=inst_seed,
            rng=rng,
            sampler_kind=sampler,
        )
    except ValueError as exc:
        raise ConfigError("environment", str(exc)) from None
    extras = {
        "epsilon": inst.epsilon,
        "xi": inst.xi.tolist(),
        "effective_sigma_sq": inst.effective_sigma_sq,
        "construction": inst.construction.value,
    }
    return env, extras


# ---------------------------------------------------------------------------
# Single runs


def default_explore_budget(T: int, d: int) -> int:
    """Per-arm budget ``T^(2/3) / d`` of the explore-then-commit baseline."""
    return max(1, int(round(T ** (2.0 / 3.0) / d)))


def run_experiment(config: ExperimentConfig) -> tuple[RunTrace, Diagnostics, dict]:
    """Run one configuration; returns ``(trace, diagnostics, env_extras)``.

    Rewards use ``derive_rng_stream(seed, run_index)`` so run ``i`` of every
    cell in a sweep shares its random stream.
    """
    env_spec = dict(config.environment)
    if env_spec.get("kind") == "lower_bound":
        env_spec.setdefault("horizon", config.horizon)
    rng = derive_rng_stream(config.seed, config.run_index)
    env, extras = build_environment(env_spec, rng)
    diag = diagnostics(env)
    params = dict(config.params)
    common = {"seed": config.seed, "config_hash": config.hash()}
    T, delta = config.horizon, config.delta
    algo = config.algorithm

    def pop(name, default=None):
        return params.pop(name, default)

    if algo is Algorithm.VASE:
        scale = pop("gamma_scale", 1.0)
        trace = run_vase(
            env, T, delta,
            gamma=(lambda dl, ell, d: scale * 2.0 * dl / (ell * (ell + 1) * d * (d + 1))),
            design_iters=int(pop("design_iters", 1000)),
            sr_rule=pop("sr_rule", "bernstein"),
            **common,
        )
    elif algo is Algorithm.BASELINE_SE:
        trace = run_baseline_se(env, T, delta, design_iters=int(pop("design_iters", 1000)), **common)
    elif algo is Algorithm.VALEE:
        if not isinstance(env.action_set, LpBall):
            raise ConfigError("environment.kind", "VALEE needs a ball environment")
        known = None
        if config.known_covariance:
            known = sigma_q_sq(env.reward_model.covariance, env.action_set.q)
        trace = run_valee(env, T, delta, known_sigma_q_sq=known, tau=config.tau,
                          sr_rule=pop("sr_rule", "bernstein"), **common)
    else:
        M = pop("M", "auto")
        if M == "auto":
            n_arms = env.action_set.K if isinstance(env.action_set, FiniteActions) else env.d
            M = default_explore_budget(T, n_arms)
        if not isinstance(M, int) or M < 1:
            raise ConfigError("params.M", f"must be an integer >= 1 or \"auto\", got {M!r}")
        trace = run_baseline_explore_exploit(env, T, M, **common)
    if params:
        raise ConfigError(f"params.{sorted(params)[0]}", f"not used by {algo.value}")
    trace.meta["run_index"] = config.run_index
    return trace, diag, extras


def trace_to_csv(trace: RunTrace) -> str:
    buf = io.StringIO()
    write_trace_csv(trace, buf)
    return buf.getvalue()


def write_trace_csv(trace: RunTrace, out) -> None:
    """Write ``t,action_id,reward,gap,cum_regret,phase`` rows to a path or file."""
    if isinstance(out, (str, os.PathLike)):
        with open(out, "w", newline="") as fh:
            write_trace_csv(trace, fh)
        return
    w = csv.writer(out, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    labels = trace.phase_labels
    n = trace.length
    cum = trace.cum_regret
    for i in range(n):
        w.writerow((
            i + 1,
            int(trace.action_id[i]),
            format_float(trace.reward[i]),
            format_float(trace.gap[i]),
            format_float(cum[i]),
            labels[trace.phase[i]],
        ))


def write_action_table(trace: RunTrace, path) -> None:
    """Vectors behind the ``action_id`` column of a ball-run trace."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        d = len(trace.action_table[0]) if trace.action_table else 0
        w.writerow(["action_id"] + [f"a{i + 1}" for i in range(d)])
        for k, vec in enumerate(trace.action_table):
            w.writerow([k] + [format_float(x) for x in vec])


# ---------------------------------------------------------------------------
# Slopes


def fit_loglog_slope(points: Sequence[tuple[float, float]]) -> Optional[float]:
    """OLS slope of ``log y`` on ``log T``.

    Points with non-positive ``T`` or ``y`` are dropped; fewer than four
    remaining points give ``None``.
    """
    pts = [(float(t), float(y)) for t, y in points if t > 0 and y > 0 and math.isfinite(y)]
    if len(pts) < SLOPE_MIN_POINTS:
        return None
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    if np.ptp(x) == 0:
        return None
    xc = x - x.mean()
    return float(xc @ (y - y.mean()) / (xc @ xc))


# ---------------------------------------------------------------------------
# Sweeps

GRID_ALIASES = {
    "algorithm": "algorithm",
    "T": "horizon",
    "horizon": "horizon",
    "delta": "delta",
    "d": "environment.d",
    "sigma_sq": "environment.sigma_sq",
    "p": "environment.p",
    "q": "environment.q",
}

REPORT_COLUMNS = (
    "cell_id", "algorithm", "horizon", "params", "status", "n_runs",
    "mean_regret", "std_regret", "slope", "sigma_q_sq", "m_sigma",
    "theta_star_dual_norm", "exploit_rate", "total_steps",
)


@dataclass
class SweepSpec:
    """A grid of configurations, each run ``seeds`` times.

    ``base`` is an ``ExperimentConfig`` object (without seed/run_index);
    ``grid`` maps axis names (aliases in ``GRID_ALIASES`` or dotted config
    paths such as ``environment.theta_star``) to value lists.
    """

    base: dict
    grid: dict
    seeds: int = 1
    master_seed: int = 0
    jobs: Optional[int] = None
    out: Optional[str] = None

    @classmethod
    def from_dict(cls, raw: dict) -> "SweepSpec":
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "sweep spec must be a JSON object")
        allowed = {"base", "grid", "seeds", "master_seed", "jobs", "out"}
        unknown = sorted(set(raw) - allowed)
        if unknown:
            raise ConfigError(unknown[0], "unknown field")
        for key in ("base", "grid"):
            if not isinstance(raw.get(key), dict):
                raise ConfigError(key, "must be an object")
        spec = cls(**raw)
        if not spec.grid:
            raise ConfigError("grid", "must contain at least one axis")
        for axis, values in spec.grid.items():
            if not isinstance(values, list) or not values:
                raise ConfigError(f"grid.{axis}", "must be a non-empty list")
        if not isinstance(spec.seeds, int) or spec.seeds < 1:
            raise ConfigError("seeds", "must be an integer >= 1")
        if not isinstance(spec.master_seed, int) or not 0 <= spec.master_seed < 2**64:
            raise ConfigError("master_seed", "must be a 64-bit non-negative integer")
        if spec.jobs is not None and (not isinstance(spec.jobs, int) or spec.jobs < 1):
            raise ConfigError("jobs", "must be an integer >= 1")
        for cell in spec.cells():
            _cell_config(spec, cell, 0)
        return spec

    def cells(self) -> list[dict]:
        axes = sorted(self.grid)
        return [dict(zip(axes, combo)) for combo in itertools.product(*(self.grid[a] for a in axes))]


def _set_path(cfg: dict, path: str, value) -> None:
    keys = path.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(path, "path crosses a non-object field")
    node[keys[-1]] = value


def _cell_config(spec: SweepSpec, cell: dict, run_index: int) -> ExperimentConfig:
    cfg = json.loads(json.dumps(spec.base))
    for axis, value in cell.items():
        _set_path(cfg, GRID_ALIASES.get(axis, axis), value)
    cfg["seed"] = spec.master_seed
    cfg["run_index"] = run_index
    return ExperimentConfig.from_dict(cfg)


@dataclass
class RunResult:
    cell_id: str
    run_index: int
    ok: bool
    final_regret: float = math.nan
    length: int = 0
    exploit_reached: Optional[bool] = None
    diagnostics: dict = field(default_factory=dict)
    error: str = ""


def _execute(job: tuple) -> RunResult:
    cell_id, config_dict, trace_dir = job
    run_index = config_dict["run_index"]
    try:
        cfg = ExperimentConfig.from_dict(config_dict)
        trace, diag, _ = run_experiment(cfg)
        if trace_dir is not None:
            write_trace_csv(trace, Path(trace_dir) / f"{cell_id}_r{run_index}.csv")
        return RunResult(
            cell_id=cell_id,
            run_index=run_index,
            ok=True,
            final_regret=trace.regret,
            length=trace.length,
            exploit_reached=trace.info.get("exploit_reached"),
            diagnostics=diag.to_dict(),
        )
    except Exception as exc:  # isolate failures per run
        return RunResult(
            cell_id=cell_id, run_index=run_index, ok=False,
            error=f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}",
        )


def run_sweep(spec: SweepSpec, out_dir, traces: bool = False, jobs: Optional[int] = None) -> dict:
    """Execute every cell ``spec.seeds`` times and write the report files.

    Writes ``runs.jsonl`` (one result per run), ``report.csv`` and
    ``summary.json`` into ``out_dir``; returns the summary.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace_dir = None
    if traces:
        trace_dir = out / "traces"
        trace_dir.mkdir(exist_ok=True)
    cells = spec.cells()
    width = len(str(max(len(cells) - 1, 0)))
    cell_ids = [f"c{i:0{max(width, 3)}d}" for i in range(len(cells))]
    jobs_list = []
    for cid, cell in zip(cell_ids, cells):
        for r in range(spec.seeds):
            cfg = _cell_config(spec, cell, r).to_dict()
            jobs_list.append((cid, cfg, None if trace_dir is None else str(trace_dir)))
    width_jobs = jobs or spec.jobs or os.cpu_count() or 1
    if width_jobs == 1:
        results = [_execute(j) for j in jobs_list]
    else:
        with ProcessPoolExecutor(max_workers=width_jobs) as pool:
            results = list(pool.map(_execute, jobs_list, chunksize=1))
    with open(out / "runs.jsonl", "w") as fh:
        meta = {"cells": {cid: cell for cid, cell in zip(cell_ids, cells)}, "base": spec.base,
                "seeds": spec.seeds, "master_seed": spec.master_seed}
        fh.write(json.dumps({"sweep": meta}, sort_keys=True) + "\n")
        for res in results:
            fh.write(json.dumps(res.__dict__, sort_keys=True) + "\n")
    return write_report(out)


def _read_runs(in_dir) -> tuple[dict, list[RunResult]]:
    path = Path(in_dir) / "runs.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run a sweep first")
    lines = path.read_text().splitlines()
    meta = json.loads(lines[0])["sweep"]
    return meta, [RunResult(**json.loads(line)) for line in lines[1:] if line.strip()]


def write_report(in_dir) -> dict:
    """Aggregate ``runs.jsonl`` into ``report.csv`` and ``summary.json``."""
    in_dir = Path(in_dir)
    meta, results = _read_runs(in_dir)
    cells: dict = meta["cells"]
    by_cell: dict[str, list[RunResult]] = {cid: [] for cid in cells}
    for res in results:
        by_cell[res.cell_id].append(res)

    def cfg_of(cid):
        cfg = json.loads(json.dumps(meta["base"]))
        for axis, value in cells[cid].items():
            _set_path(cfg, GRID_ALIASES.get(axis, axis), value)
        return cfg

    rows = {}
    for cid in sorted(cells):
        runs = sorted(by_cell[cid], key=lambda r: r.run_index)
        cfg = cfg_of(cid)
        failed = [r for r in runs if not r.ok]
        ok = [r for r in runs if r.ok]
        regrets = np.array([r.final_regret for r in ok])
        diag = ok[0].diagnostics if ok else {}
        exploit = [r.exploit_reached for r in ok if r.exploit_reached is not None]
        other = {k: v for k, v in cells[cid].items() if GRID_ALIASES.get(k, k) not in ("algorithm", "horizon")}
        rows[cid] = {
            "cell_id": cid,
            "algorithm": cfg.get("algorithm"),
            "horizon": cfg.get("horizon"),
            "params": json.dumps(other, sort_keys=True),
            "status": "failed" if failed or not runs else "ok",
            "n_runs": len(ok),
            "mean_regret": float(regrets.mean()) if ok else math.nan,
            "std_regret": float(regrets.std(ddof=1)) if len(ok) > 1 else 0.0 if ok else math.nan,
            "slope": None,
            "sigma_q_sq": diag.get("sigma_q_sq", math.nan),
            "m_sigma": diag.get("m_sigma", math.nan),
            "theta_star_dual_norm": diag.get("theta_star_dual_norm", math.nan),
            "exploit_rate": float(np.mean(exploit)) if exploit else None,
            "total_steps": int(sum(r.length for r in ok)),
            "_errors": [r.error.splitlines()[0] for r in failed],
        }

    # slope per group of cells that differ only in the horizon
    groups: dict[tuple, list[str]] = {}
    for cid, row in rows.items():
        groups.setdefault((row["algorithm"], row["params"]), []).append(cid)
    checks = []
    for (algo, params), cids in sorted(groups.items()):
        pts = [(rows[c]["horizon"], rows[c]["mean_regret"]) for c in cids if rows[c]["status"] == "ok"]
        slope = fit_loglog_slope(pts)
        for c in cids:
            rows[c]["slope"] = slope
        if slope is not None and algo in SLOPE_RANGES:
            lo, hi = SLOPE_RANGES[algo]
            checks.append({
                "algorithm": algo, "params": json.loads(params), "slope": slope,
                "expected": [lo, hi], "verdict": "pass" if lo <= slope <= hi else "fail",
            })

    with open(in_dir / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for cid in sorted(rows):
            row = rows[cid]
            w.writerow([_cell(row[c]) for c in REPORT_COLUMNS])
    summary = {
        "cells": {
            cid: {"status": row["status"], "config": cells[cid], "errors": row["_errors"]}
            for cid, row in sorted(rows.items())
        },
        "n_ok": sum(row["status"] == "ok" for row in rows.values()),
        "n_failed": sum(row["status"] == "failed" for row in rows.values()),
        "theorem_checks": checks,
    }
    (in_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "" if math.isnan(v) else format_float(v)
    return str(v)
