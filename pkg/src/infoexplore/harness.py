"""Experiment orchestration: configs, seeded runs, CSV logs, histograms, aggregation, replay.

Layout of one experiment directory::

    <root>/<name>/
        manifest.json        config, config hash, seeds, versions, schema versions
        config.yaml          the fully resolved config
        aggregate.csv        cross-seed mean/std (after all seeds finish)
        seed_<s>/
            metrics.csv      deterministic per-episode metrics
            timing.csv       wall-clock seconds per episode (not reproducible)
            episodes.npz     every training episode, for histograms and replay
            histograms/hist_<pct>.csv   cumulative visitation at 10% step milestones
            checkpoint/      ensemble, plan memory, replay buffer, rng states
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import math
import os
import platform
import time
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np
import yaml

from .agent import BetaSchedule, ExplorationAgent
from .ensemble import Ensemble, ModelTrainingConfig
from .envs import EnvState, PointMassConfig, PointMassEnv, TiltedPushingEnv, make_config, visitation_histogram, \
    write_histogram_csv
from .infogain import cosine_similarity_study, write_study_csv
from .planner import PlannerConfig

OUTPUT_ROOT_ENV = "INFOEXPLORE_OUTPUT_ROOT"
METRICS_SCHEMA = "infoexplore-metrics/1"
TIMING_SCHEMA = "infoexplore-timing/1"
AGGREGATE_SCHEMA = "infoexplore-aggregate/1"
METRICS_COLUMNS = ("step", "episode", "train_reward", "eval_reward", "beta", "mean_model_nll", "intrinsic_value")
AGGREGATED = ("train_reward", "eval_reward", "beta", "mean_model_nll", "intrinsic_value")
HISTOGRAM_MILESTONES = 10


class ConfigError(ValueError):
    """The experiment config cannot be resolved."""


# ------------------------------------------------------------------ configs

@dataclass
class ExperimentConfig:
    """Everything that determines the CSV output of an experiment.

    ``kind`` is ``"MI"``, ``"LI"`` or ``"none"``; the last forces ``beta = 0``
    (the purely extrinsic baseline). ``model`` holds :class:`Ensemble`
    keyword arguments, ``training`` :class:`ModelTrainingConfig` fields and
    ``planner`` :class:`PlannerConfig` fields (the action dimension and
    bounds come from the environment). ``beta`` is either
    ``{"mode": "constant", "beta0": b}`` or ``{"mode": "adaptive", "alpha": a,
    "gamma": g, "aggregator": "max" | "running_average"}``.
    """
    name: str = "experiment"
    seeds: tuple = (0,)
    env: str = "sim_small"
    env_overrides: dict = field(default_factory=dict)
    kind: str = "MI"
    episodes: int = 60
    beta: dict = field(default_factory=lambda: {"mode": "constant", "beta0": 1.0})
    use_memory: bool = True
    variance_learning_start_step: int | None = None
    eval_every: int = 1
    planner: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    histogram_bins: tuple = (10, 12)
    checkpoint: bool = True

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.histogram_bins = tuple(int(b) for b in self.histogram_bins)
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be distinct, got {list(self.seeds)}")
        if self.kind not in ("MI", "LI", "none"):
            raise ConfigError(f"kind must be MI, LI or none, got {self.kind!r}")
        if self.episodes < 0:
            raise ConfigError("episodes must be >= 0")
        if self.env != "point_mass":
            try:
                make_config(self.env, **self.env_overrides)
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"bad environment config: {exc}") from exc
        self.beta_schedule()

    def beta_schedule(self) -> BetaSchedule:
        if self.kind == "none":
            return BetaSchedule.constant(0.0)
        b = dict(self.beta)
        mode = b.pop("mode", "constant")
        try:
            if mode == "constant":
                return BetaSchedule.constant(float(b.get("beta0", 1e6)))
            if mode == "adaptive":
                return BetaSchedule.adaptive(**b)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad beta config: {exc}") from exc
        raise ConfigError(f"unknown beta mode {mode!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        d["histogram_bins"] = list(self.histogram_bins)
        for k in ("dynamics_hidden", "reward_hidden"):
            if k in d["model"]:
                d["model"][k] = list(d["model"][k])
        return d

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment fields: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


_DESK_ENV = {"freeze_rotation": True}
_DESK_MODEL = {"dynamics_hidden": [32, 32], "reward_hidden": [64], "residual": True, "normalize": True}
_DESK_TRAINING = {"horizon": 5, "max_steps_per_fit": 200}
_DESK_PLANNER = {"n_iter": 4, "population": 100, "elites": 10, "neighbors": 5, "samples_per_neighbor": 10,
                 "horizon": 10}

EXPERIMENT_PRESETS = {
    # desk-scale sparse-reward discovery on the shrunk table; rotation is frozen so a learned model can
    # carry the ball within a few dozen episodes
    "desk": dict(name="desk", env="sim_small", env_overrides=_DESK_ENV, kind="MI", episodes=60,
                 beta={"mode": "constant", "beta0": 1e-3}, model=_DESK_MODEL, training=_DESK_TRAINING,
                 planner=_DESK_PLANNER),
    "desk_pets": dict(name="desk_pets", env="sim_small", env_overrides=_DESK_ENV, kind="none", episodes=60,
                      model=_DESK_MODEL, training=_DESK_TRAINING, planner=_DESK_PLANNER),
    # desk-scale maze, used for visitation coverage; no reward is seen before the exit, so the adaptive
    # schedule keeps the agent purely exploring
    "maze_desk": dict(name="maze_desk", env="maze_small", env_overrides=_DESK_ENV, kind="MI", episodes=60,
                      beta={"mode": "adaptive"}, model=_DESK_MODEL, training=_DESK_TRAINING,
                      planner=_DESK_PLANNER, eval_every=0),
    "maze_desk_pets": dict(name="maze_desk_pets", env="maze_small", env_overrides=_DESK_ENV, kind="none",
                           episodes=60, model=_DESK_MODEL, training=_DESK_TRAINING, planner=_DESK_PLANNER,
                           eval_every=0),
    # sparse plateau: the goal lies beyond the planning horizon from the start
    "plateau": dict(name="plateau", env="point_mass", kind="MI", episodes=200, beta={"mode": "constant", "beta0": 1.0},
                    model={"dynamics_hidden": [16, 16], "reward_hidden": [16]},
                    training={"horizon": 3, "max_steps_per_fit": 30, "batch_size": 32},
                    planner={"n_iter": 3, "population": 40, "elites": 5, "neighbors": 5, "samples_per_neighbor": 5,
                             "horizon": 4},
                    eval_every=0, checkpoint=False),
    # the full-size settings; far beyond a desk budget
    "paper_sim": dict(name="paper_sim", env="sim", kind="MI", episodes=3000, beta={"mode": "constant", "beta0": 1e6},
                      variance_learning_start_step=60_000),
    "paper_maze": dict(name="paper_maze", env="maze", kind="LI", episodes=3000,
                       beta={"mode": "adaptive", "alpha": 1e8, "gamma": 2e5, "aggregator": "max"},
                       variance_learning_start_step=60_000),
}


def _deep_update(base: dict, extra: dict) -> dict:
    # a mapping that switches "mode" (e.g. beta constant -> adaptive) replaces the old one instead of merging
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and v.get("mode", out[k].get("mode")) == out[k].get("mode"):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(raw: dict | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Merge an optional ``preset`` (experiment preset name), the raw mapping and overrides."""
    raw = dict(raw or {})
    preset = raw.pop("preset", None)
    base = {}
    if preset is not None:
        if preset not in EXPERIMENT_PRESETS:
            raise ConfigError(f"unknown experiment preset {preset!r}; choose from {sorted(EXPERIMENT_PRESETS)}")
        base = EXPERIMENT_PRESETS[preset]
    merged = _deep_update(_deep_update(base, raw), overrides or {})
    try:
        return ExperimentConfig.from_dict(merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} does not hold a mapping")
    return resolve_config(raw, overrides)


def parse_override(text: str) -> dict:
    """``a.b=value`` becomes ``{"a": {"b": value}}`` with ``value`` parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    out: dict = yaml.safe_load(value) if value else None
    for part in reversed(key.strip().split(".")):
        out = {part: out}
    return out


def output_root(explicit=None) -> Path:
    return Path(explicit or os.environ.get(OUTPUT_ROOT_ENV, "runs"))


# -------------------------------------------------------------- building

def build_env(cfg: ExperimentConfig):
    if cfg.env == "point_mass":
        return PointMassEnv(PointMassConfig(**cfg.env_overrides))
    return TiltedPushingEnv(make_config(cfg.env, **cfg.env_overrides))


def build_agent(cfg: ExperimentConfig, env, seed: int) -> ExplorationAgent:
    model = dict(cfg.model)
    for k in ("dynamics_hidden", "reward_hidden"):
        if k in model:
            model[k] = tuple(model[k])
    ens = Ensemble(env.observation_dim, env.action_dim, training=ModelTrainingConfig(**cfg.training),
                   random_state=seed, **model)
    planner = PlannerConfig(action_dim=env.action_dim, **cfg.planner)
    return ExplorationAgent(ens, planner, kind=None if cfg.kind == "none" else cfg.kind, beta=cfg.beta_schedule(),
                            use_memory=cfg.use_memory, episode_length=env.episode_length,
                            variance_learning_start_step=cfg.variance_learning_start_step,
                            eval_every=cfg.eval_every, state_bounds=env.state_bounds(), random_state=seed)


# ------------------------------------------------------------------- CSVs

def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _write_csv(path, schema, columns, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {schema}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _read_csv(path, schema, columns=None):
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != f"# {schema}":
            raise ValueError(f"{path}: expected schema {schema!r}, found {first!r}")
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or (columns is not None and tuple(header) != tuple(columns)):
            raise ValueError(f"{path}: unexpected columns {header}")
        return header, [r for r in reader]


def read_metrics(path) -> dict[str, np.ndarray]:
    """Validated metrics CSV as a mapping of column name to array."""
    header, rows = _read_csv(path, METRICS_SCHEMA, METRICS_COLUMNS)
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    out = {c: data[:, i] for i, c in enumerate(header)}
    if np.any(np.diff(out["step"]) <= 0):
        raise ValueError(f"{path}: steps are not strictly increasing")
    return out


def _metrics_row(row) -> tuple:
    return (row.step, row.episode, row.train_reward, row.eval_reward, row.beta, row.model_nll, row.intrinsic_value)


# ------------------------------------------------------------- episodes

def save_episodes(records, path):
    n = len(records)
    T = max((len(r) for r in records), default=0)
    if n:
        do, da = records[0].observations.shape[1], records[0].actions.shape[1]
    else:
        do = da = 0
    obs = np.full((n, T + 1, do), np.nan)
    act = np.full((n, T, da), np.nan)
    rew = np.full((n, T), np.nan)
    on_table = np.zeros((n, T), dtype=bool)
    lengths = np.array([len(r) for r in records], dtype=np.int64)
    for i, r in enumerate(records):
        L = len(r)
        obs[i, :L + 1] = r.observations
        act[i, :L] = r.actions
        rew[i, :L] = r.rewards
        on_table[i, :L] = r.on_table
    inits = json.dumps([r.initial_state for r in records])
    np.savez_compressed(path, observations=obs, actions=act, rewards=rew, on_table=on_table, lengths=lengths,
                        initial_states=np.array(inits))


def load_episodes(path) -> list[dict]:
    with np.load(path) as z:
        inits = json.loads(str(z["initial_states"]))
        out = []
        for i, L in enumerate(z["lengths"]):
            out.append({"observations": z["observations"][i, :L + 1], "actions": z["actions"][i, :L],
                        "rewards": z["rewards"][i, :L], "on_table": z["on_table"][i, :L],
                        "initial_state": inits[i]})
    return out


# ------------------------------------------------------------------ runs

def versions() -> dict:
    def pkg(name):
        try:
            return metadata.version(name)
        except metadata.PackageNotFoundError:
            return None
    return {"python": platform.python_version(), "numpy": np.__version__, "scikit-learn": pkg("scikit-learn"),
            "pyyaml": pkg("PyYAML"), "artifact": pkg("artifact")}


def milestones(total_steps: int, n: int = HISTOGRAM_MILESTONES) -> list[int]:
    """Step counts at which cumulative histograms are written (every ``1/n`` of the budget)."""
    return [math.ceil(k * total_steps / n) for k in range(1, n + 1)]


def run_seed(cfg: ExperimentConfig, seed: int, run_dir, progress=None) -> dict:
    """Train one seed into ``run_dir``; returns a small summary."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    env = build_env(cfg)
    agent = build_agent(cfg, env, seed)
    has_table = isinstance(env, TiltedPushingEnv)
    marks = milestones(cfg.episodes * env.episode_length) if has_table and cfg.episodes else []
    hist_dir = run_dir / "histograms"
    if marks:
        hist_dir.mkdir(exist_ok=True)
    records, metric_rows, timing_rows = [], [], []
    state = {"mark": 0}

    def on_episode(ag, row, rec, ev):
        records.append(rec)
        metric_rows.append(_metrics_row(row))
        timing_rows.append((row.episode, row.wall_time))
        while state["mark"] < len(marks) and ag.total_steps >= marks[state["mark"]]:
            pct = 100 * (state["mark"] + 1) // len(marks)
            grid = visitation_histogram([(r.observations, r.on_table) for r in records], env.config,
                                        cfg.histogram_bins)
            write_histogram_csv(grid, hist_dir / f"hist_{pct:03d}.csv")
            state["mark"] += 1
        if progress is not None:
            progress(seed, row)

    try:
        agent.train(env, cfg.episodes, callback=on_episode)
    finally:
        # partial runs still leave consistent logs behind
        _write_csv(run_dir / "metrics.csv", METRICS_SCHEMA, METRICS_COLUMNS, metric_rows)
        _write_csv(run_dir / "timing.csv", TIMING_SCHEMA, ("episode", "wall_time"), timing_rows)
        save_episodes(records, run_dir / "episodes.npz")
    if has_table and records:
        grid = visitation_histogram([(r.observations, r.on_table) for r in records], env.config, cfg.histogram_bins)
        write_histogram_csv(grid, run_dir / "histogram.csv")
    if cfg.checkpoint:
        agent.save(run_dir / "checkpoint")
    evals = [r[3] for r in metric_rows if not math.isnan(r[3])]
    return {"seed": seed, "episodes": len(metric_rows), "steps": agent.total_steps,
            "best_eval_reward": max(evals) if evals else None,
            "aborted_episodes": sum(r.aborted for r in records)}


def write_manifest(cfg: ExperimentConfig, exp_dir):
    exp_dir = Path(exp_dir)
    manifest = {"name": cfg.name, "config_hash": cfg.config_hash(), "seeds": list(cfg.seeds),
                "config": cfg.to_dict(), "versions": versions(),
                "schemas": {"metrics": METRICS_SCHEMA, "timing": TIMING_SCHEMA, "aggregate": AGGREGATE_SCHEMA}}
    (exp_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    with open(exp_dir / "config.yaml", "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
    return manifest


def run_experiment(cfg: ExperimentConfig, root=None, progress=None) -> Path:
    """Run every seed of ``cfg`` under ``<root>/<name>`` and aggregate them."""
    from ._runtime import tune_allocator
    tune_allocator()
    exp_dir = output_root(root) / cfg.name
    try:
        exp_dir.mkdir(parents=True, exist_ok=True)
        probe = exp_dir / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {exp_dir} is not writable: {exc}") from exc
    write_manifest(cfg, exp_dir)
    summaries = [run_seed(cfg, s, exp_dir / f"seed_{s}", progress) for s in cfg.seeds]
    aggregate([exp_dir / f"seed_{s}" for s in cfg.seeds], exp_dir / "aggregate.csv")
    (exp_dir / "summary.json").write_text(json.dumps(summaries, indent=2))
    return exp_dir


def seed_dirs(path) -> list[Path]:
    """A seed directory itself, or the ``seed_*`` children of an experiment directory."""
    path = Path(path)
    if (path / "metrics.csv").exists():
        return [path]
    dirs = sorted(p for p in path.glob("seed_*") if (p / "metrics.csv").exists())
    if not dirs:
        raise FileNotFoundError(f"no runs found under {path}")
    return dirs


# ------------------------------------------------------------- aggregation

def aggregate(run_dirs, out_path=None) -> dict[str, np.ndarray]:
    """Mean and population std across runs, truncated to the shortest run."""
    runs = [read_metrics(Path(d) / "metrics.csv") for d in run_dirs]
    if not runs:
        raise ValueError("nothing to aggregate")
    n = min(len(r["step"]) for r in runs)
    steps = runs[0]["step"][:n]
    for r in runs[1:]:
        if not np.array_equal(r["step"][:n], steps):
            raise ValueError("runs do not share the same step grid")
    out = {"step": steps}
    for c in AGGREGATED:
        stack = np.stack([r[c][:n] for r in runs])
        out[f"{c}_mean"] = stack.mean(axis=0)
        out[f"{c}_std"] = stack.std(axis=0)
    if out_path is not None:
        cols = ["step"] + [f"{c}_{s}" for c in AGGREGATED for s in ("mean", "std")]
        rows = [[int(out["step"][i])] + [out[c][i] for c in cols[1:]] for i in range(n)]
        _write_csv(out_path, AGGREGATE_SCHEMA, cols + ["n_runs"], [r + [len(runs)] for r in rows])
    return out


def read_aggregate(path) -> dict[str, np.ndarray]:
    header, rows = _read_csv(path, AGGREGATE_SCHEMA)
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    return {c: data[:, i] for i, c in enumerate(header)}


# ---------------------------------------------------------- audit helpers

def _run_config(run_dir) -> ExperimentConfig:
    run_dir = Path(run_dir)
    for p in (run_dir, run_dir.parent):
        if (p / "manifest.json").exists():
            return ExperimentConfig.from_dict(json.loads((p / "manifest.json").read_text())["config"])
    raise FileNotFoundError(f"no manifest.json next to {run_dir}")


def run_histogram(run_dir, bins=None, out_path=None):
    """Recompute the visitation histogram of a seed directory from its episode log."""
    cfg = _run_config(run_dir)
    if cfg.env == "point_mass":
        raise ValueError("visitation histograms need a table environment")
    env = build_env(cfg)
    eps = load_episodes(Path(run_dir) / "episodes.npz")
    grid = visitation_histogram([(e["observations"], e["on_table"]) for e in eps], env.config,
                                tuple(bins) if bins else cfg.histogram_bins)
    if out_path is not None:
        write_histogram_csv(grid, out_path)
    return grid


def replay_episode(run_dir, episode: int) -> dict:
    """Re-simulate logged training episode ``episode`` (0-based) from its actions."""
    cfg = _run_config(run_dir)
    env = build_env(cfg)
    eps = load_episodes(Path(run_dir) / "episodes.npz")
    if not 0 <= episode < len(eps):
        raise IndexError(f"episode {episode} not in log of {len(eps)} episodes")
    ep = eps[episode]
    if ep["initial_state"] is not None:
        obs = env.reset_to(EnvState.from_dict(ep["initial_state"]))
    else:
        obs = env.reset()
    observations, rewards = [obs], []
    for a in ep["actions"]:
        obs, r, _ = env.step(a)
        observations.append(obs)
        rewards.append(r)
    observations = np.array(observations).reshape(ep["observations"].shape)
    obs_dev = float(np.abs(observations - ep["observations"]).max()) if len(rewards) else 0.0
    rew_dev = float(np.abs(np.array(rewards) - ep["rewards"]).max()) if len(rewards) else 0.0
    return {"episode": episode, "steps": len(rewards), "max_observation_deviation": obs_dev,
            "max_reward_deviation": rew_dev, "cumulative_reward": float(np.sum(rewards)),
            "exact": obs_dev == 0.0 and rew_dev == 0.0}


def run_estimator_study(out_dir, seed=0, n_models=1000, sample_counts=(16, 32, 64, 128, 256), kinds=("MI", "LI"),
                        n_theta=5, n_outcomes=8, n_policies=8) -> dict:
    """Cosine-similarity study; one CSV per estimator kind in ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    rows = cosine_similarity_study(seed, sample_counts=tuple(sample_counts), n_models=n_models, kinds=tuple(kinds),
                                   n_theta=n_theta, n_outcomes=n_outcomes, n_policies=n_policies)
    paths = {}
    for k in kinds:
        paths[k] = out_dir / f"cosine_{k.lower()}.csv"
        write_study_csv(rows, paths[k], kind=k)
    return {"rows": rows, "paths": paths, "seconds": time.perf_counter() - t0}
