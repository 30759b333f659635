"""Model-based active exploration loop.

Each episode the agent replans at every step with memory-warm-started CEM
on ``extrinsic + beta * information gain``, executes the first action and
stores the transition. After the episode the ensemble is refit on the whole
replay buffer and one evaluation episode is run with ``beta = 0``.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ensemble import Ensemble
from .infogain import InfoKind
from .planner import PlanMemory, PlannerConfig, cem_plan, cem_plan_with_memory, evaluate_objective
from .validation import as_float_array, check_is_initialized


@dataclass(frozen=True)
class Transition:
    prev_state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    reward: float
    episode_id: int
    step_index: int

    def __post_init__(self):
        if not np.isfinite(self.reward):
            raise ValueError("reward must be finite")


class ReplayBuffer:
    """Unbounded store of whole episodes; nothing is ever evicted."""

    def __init__(self):
        self.episodes: list[list[Transition]] = []
        self._arrays: list[tuple] = []

    def __len__(self):
        return sum(len(ep) for ep in self.episodes)

    @property
    def n_episodes(self) -> int:
        return len(self.episodes)

    def add_episode(self, transitions):
        transitions = list(transitions)
        if not transitions:
            return
        for prev, nxt in zip(transitions, transitions[1:]):
            if not np.array_equal(prev.next_state, nxt.prev_state):
                raise ValueError("transitions of one episode must be contiguous")
        self.episodes.append(transitions)
        states = np.stack([transitions[0].prev_state] + [t.next_state for t in transitions])
        actions = np.stack([t.action for t in transitions])
        rewards = np.array([t.reward for t in transitions])
        self._arrays.append((states, actions, rewards))

    def episode_arrays(self):
        """``(states (T+1, ds), actions (T, da), rewards (T,))`` per episode."""
        return list(self._arrays)

    def state_dict(self):
        d = {"n_episodes": np.array(len(self._arrays))}
        for i, (s, a, r) in enumerate(self._arrays):
            d[f"s{i}"], d[f"a{i}"], d[f"r{i}"] = s, a, r
            d[f"id{i}"] = np.array(self.episodes[i][0].episode_id)
        return d

    @classmethod
    def from_state_dict(cls, d):
        buf = cls()
        for i in range(int(d["n_episodes"])):
            s, a, r, eid = d[f"s{i}"], d[f"a{i}"], d[f"r{i}"], int(d[f"id{i}"])
            buf.add_episode(Transition(s[t], a[t], s[t + 1], float(r[t]), eid, t) for t in range(len(a)))
        return buf


@dataclass
class BetaSchedule:
    """Weight of the intrinsic term, ``beta = alpha * f(rewards) + gamma`` in adaptive mode.

    ``f`` runs over every per-step reward seen during training. The maximum
    starts from 0, so before any positive reward ``beta`` equals ``gamma``.
    """

    mode: str = "constant"
    beta0: float = 1e6
    alpha: float = 1e8
    gamma: float = 2e5
    aggregator: str = "max"
    _max: float = field(default=0.0, repr=False)
    _sum: float = field(default=0.0, repr=False)
    _count: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.mode not in ("constant", "adaptive"):
            raise ValueError(f"unknown beta mode {self.mode!r}")
        if self.aggregator not in ("max", "running_average"):
            raise ValueError(f"unknown aggregator {self.aggregator!r}")

    @classmethod
    def constant(cls, beta0):
        return cls(mode="constant", beta0=beta0)

    @classmethod
    def adaptive(cls, alpha=1e8, gamma=2e5, aggregator="max"):
        return cls(mode="adaptive", alpha=alpha, gamma=gamma, aggregator=aggregator)

    def observe(self, reward):
        r = float(reward)
        self._max = max(self._max, r)
        self._sum += r
        self._count += 1

    def f(self) -> float:
        if self.aggregator == "max":
            return self._max
        return self._sum / self._count if self._count else 0.0

    def value(self) -> float:
        if self.mode == "constant":
            return self.beta0
        return self.alpha * self.f() + self.gamma

    def state_dict(self):
        return {"max": self._max, "sum": self._sum, "count": self._count}

    def load_state_dict(self, d):
        self._max, self._sum, self._count = float(d["max"]), float(d["sum"]), int(d["count"])


@dataclass
class EpisodeRecord:
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    on_table: np.ndarray
    initial_state: dict | None = None
    aborted: bool = False
    error: str | None = None
    intrinsic: float = float("nan")

    @property
    def cumulative_reward(self) -> float:
        return float(self.rewards.sum())

    def __len__(self):
        return len(self.actions)


@dataclass
class TrainingRow:
    step: int
    episode: int
    train_reward: float
    eval_reward: float
    beta: float
    model_nll: float
    intrinsic_value: float
    wall_time: float


class ExplorationAgent:
    """Goal-directed active exploration with an ensemble model and CEM-MPC.

    Parameters
    ----------
    ensemble : Ensemble
    planner : PlannerConfig
    kind : {"MI", "LI", None}
        Information-gain estimator; ``None`` gives the purely extrinsic
        baseline.
    beta : BetaSchedule
    use_memory : bool
        Warm-start CEM from the plan memory.
    episode_length : int
    variance_learning_start_step : int, optional
        Environment step after which the ensemble learns its variances.
    eval_every : int
        Run one evaluation episode every this many training episodes
        (0 disables evaluation).
    state_bounds : (low, high), optional
        Box for clipping model rollouts.
    random_state : int
    """

    def __init__(self, ensemble, planner: PlannerConfig | None = None, kind="MI", beta: BetaSchedule | None = None,
                 use_memory=True, episode_length=50, variance_learning_start_step=None, eval_every=1,
                 state_bounds=None, blowup="clamp", random_state=0):
        if episode_length < 1:
            raise ValueError("episode_length must be >= 1")
        self.ensemble = ensemble
        self.planner = planner if planner is not None else PlannerConfig(action_dim=ensemble.action_dim)
        if self.planner.action_dim != ensemble.action_dim:
            raise ValueError("planner and ensemble disagree on the action dimension")
        self.kind = None if kind is None else InfoKind(kind)
        self.beta = beta if beta is not None else BetaSchedule.constant(1e6)
        self.use_memory = use_memory
        self.episode_length = episode_length
        self.variance_learning_start_step = variance_learning_start_step
        self.eval_every = eval_every
        self.state_bounds = state_bounds
        self.blowup = blowup
        self.random_state = random_state
        if not ensemble.is_initialized:
            ensemble.initialize()
        self.buffer = ReplayBuffer()
        self.memory = PlanMemory(ensemble.state_dim, self.planner.plan_dim, self.planner.memory_capacity)
        streams = np.random.SeedSequence(random_state).spawn(6)
        names = ("plan", "objective", "fit", "env", "eval_plan", "eval_objective")
        self.rngs = {n: np.random.default_rng(s) for n, s in zip(names, streams)}
        self.total_steps = 0
        self.n_episodes = 0

    # ---------------------------------------------------------------- acting
    def current_beta(self) -> float:
        return 0.0 if self.kind is None else float(self.beta.value())

    def plan(self, state, evaluate=False):
        """Plan from ``state``; returns ``(PlanDistribution, intrinsic value of the plan mean)``."""
        check_is_initialized(self.ensemble, "dyn_params_")
        state = as_float_array(state, "state")
        beta = 0.0 if evaluate else self.current_beta()
        kind = self.kind if beta != 0 else None
        obj_rng = self.rngs["eval_objective" if evaluate else "objective"]
        plan_rng = self.rngs["eval_plan" if evaluate else "plan"]
        H, da = self.planner.horizon, self.planner.action_dim

        def objective(samples):
            return evaluate_objective(self.ensemble, state, samples.reshape(-1, H, da), beta, kind, obj_rng,
                                      state_bounds=self.state_bounds, blowup=self.blowup)

        if self.use_memory:
            dist = cem_plan_with_memory(objective, state, self.memory, self.planner, plan_rng, store=not evaluate)
        else:
            dist = cem_plan(objective, self.planner, plan_rng)
        intrinsic = float("nan")
        if kind is not None:
            _, _, intrinsic = evaluate_objective(self.ensemble, state, dist.actions(da), beta, kind, obj_rng,
                                                 state_bounds=self.state_bounds, blowup=self.blowup,
                                                 return_parts=True)
        return dist, intrinsic

    def act(self, state, evaluate=False) -> np.ndarray:
        """First action of the plan computed from ``state`` (receding horizon)."""
        dist, _ = self.plan(state, evaluate)
        return dist.first_action(self.planner.action_dim)

    def run_episode(self, env, evaluate=False) -> EpisodeRecord:
        """Roll out one episode. Training episodes go to the buffer and update beta."""
        obs = env.reset(self.rngs["env"])
        init = env.state.to_dict() if hasattr(env, "state") and hasattr(env.state, "to_dict") else None
        observations, actions, rewards, on_table, intrinsics = [obs], [], [], [], []
        aborted, error = False, None
        for t in range(self.episode_length):
            dist, intrinsic = self.plan(obs, evaluate)
            action = dist.first_action(self.planner.action_dim)
            try:
                obs, r, _ = env.step(action)
                if not np.all(np.isfinite(obs)) or not np.isfinite(r):
                    raise FloatingPointError("environment returned non-finite values")
            except Exception as exc:  # an environment fault ends the episode, keeping the partial record
                aborted, error = True, f"{type(exc).__name__}: {exc}"
                break
            observations.append(np.asarray(obs, dtype=np.float64))
            actions.append(np.asarray(action, dtype=np.float64))
            rewards.append(float(r))
            on_table.append(bool(getattr(env, "ball_on_table", True)))
            intrinsics.append(intrinsic)
            if not evaluate:
                self.beta.observe(r)
                self.total_steps += 1
        da = self.planner.action_dim
        rec = EpisodeRecord(np.array(observations), np.array(actions).reshape(-1, da), np.array(rewards),
                            np.array(on_table, dtype=bool), init, aborted, error,
                            float(np.mean(intrinsics)) if intrinsics and not evaluate else float("nan"))
        if not evaluate:
            eid = self.n_episodes
            self.buffer.add_episode(Transition(rec.observations[t], rec.actions[t], rec.observations[t + 1],
                                               rec.rewards[t], eid, t) for t in range(len(rec)))
            self.n_episodes += 1
        return rec

    # -------------------------------------------------------------- training
    def _maybe_learn_variance(self):
        start = self.variance_learning_start_step
        if start is not None and self.total_steps >= start and self.ensemble.variance_mode != "learned":
            self.ensemble.set_params(variance_mode="learned")

    def update_model(self):
        self._maybe_learn_variance()
        if len(self.buffer) == 0:
            return float("nan")
        self.ensemble.fit(self.buffer, self.rngs["fit"])
        return float(self.ensemble.dataset_nll(self.buffer).mean())

    def train(self, env, n_episodes, callback=None) -> list[TrainingRow]:
        """Alternate episodes and model fits; returns one row per training episode.

        ``callback(agent, row, train_record, eval_record)`` runs after every
        episode and may raise to stop training.
        """
        log = []
        t0 = time.perf_counter()
        for _ in range(n_episodes):
            rec = self.run_episode(env)
            nll = self.update_model()
            ev = None
            if self.eval_every and self.n_episodes % self.eval_every == 0:
                ev = self.run_episode(env, evaluate=True)
            row = TrainingRow(step=self.total_steps, episode=self.n_episodes, train_reward=rec.cumulative_reward,
                              eval_reward=ev.cumulative_reward if ev is not None else float("nan"),
                              beta=self.current_beta(), model_nll=nll, intrinsic_value=rec.intrinsic,
                              wall_time=time.perf_counter() - t0)
            log.append(row)
            if callback is not None:
                callback(self, row, rec, ev)
        return log

    fit = train

    # ----------------------------------------------------------- checkpoints
    def save(self, directory):
        """Write ensemble, plan memory, replay buffer and rng states into ``directory``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.ensemble.save(d / "ensemble.npz")
        np.savez(d / "memory.npz", **self.memory.state_dict())
        np.savez(d / "buffer.npz", **self.buffer.state_dict())
        state = {"total_steps": self.total_steps, "n_episodes": self.n_episodes,
                 "beta": self.beta.state_dict(),
                 "rngs": {k: g.bit_generator.state for k, g in self.rngs.items()},
                 "variance_mode": self.ensemble.variance_mode}
        (d / "agent.json").write_text(json.dumps(state))

    def load_state(self, directory):
        """Restore everything written by :meth:`save` into this agent."""
        d = Path(directory)
        loaded = Ensemble.load(d / "ensemble.npz")
        self.ensemble.set_params(**loaded.get_params())
        for attr in ("dyn_params_", "rew_params_", "dyn_opt_", "rew_opt_", "opt_steps_", "in_mean_", "in_std_",
                     "delta_scale_"):
            setattr(self.ensemble, attr, getattr(loaded, attr))
        with np.load(d / "memory.npz") as z:
            self.memory = PlanMemory.from_state_dict(dict(z))
        with np.load(d / "buffer.npz") as z:
            self.buffer = ReplayBuffer.from_state_dict(dict(z))
        state = json.loads((d / "agent.json").read_text())
        self.total_steps, self.n_episodes = state["total_steps"], state["n_episodes"]
        self.beta.load_state_dict(state["beta"])
        for k, st in state["rngs"].items():
            self.rngs[k].bit_generator.state = st
        return self
