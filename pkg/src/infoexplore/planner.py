"""Cross-entropy-method MPC with a nearest-neighbour plan memory.

The optimisation variable is a flattened open-loop action sequence of
``horizon * action_dim`` entries. The memory variant warm-starts the first
iteration with samples drawn around plans previously computed in nearby
states, which lets the search leave regions where the objective is flat.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .infogain import InfoKind, estimate_from_loglik, sample_trajectories
from .validation import as_float_array, as_generator

WORST_SCORE = -1e12


@dataclass
class PlannerConfig:
    n_iter: int = 12
    population: int = 500
    elites: int = 20
    neighbors: int = 50
    samples_per_neighbor: int = 10
    horizon: int = 20
    action_dim: int = 3
    action_low: float | tuple = -1.0
    action_high: float | tuple = 1.0
    sigma_floor: float = 1e-3
    memory_capacity: int = 50_000

    def __post_init__(self):
        if self.elites > self.population:
            raise ValueError("elites must not exceed population")
        if self.horizon < 1 or self.n_iter < 1 or self.elites < 1:
            raise ValueError("horizon, n_iter and elites must be >= 1")
        if self.neighbors < 0 or self.samples_per_neighbor < 0:
            raise ValueError("neighbors and samples_per_neighbor must be >= 0")

    @property
    def plan_dim(self) -> int:
        return self.horizon * self.action_dim

    def bounds(self):
        low = np.broadcast_to(np.asarray(self.action_low, dtype=np.float64), (self.action_dim,))
        high = np.broadcast_to(np.asarray(self.action_high, dtype=np.float64), (self.action_dim,))
        return np.tile(low, self.horizon), np.tile(high, self.horizon)


@dataclass
class PlanDistribution:
    """Diagonal Gaussian over a flattened action sequence."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma must have the same shape")
        if not np.all(np.isfinite(self.sigma)) or (self.sigma < 0).any():
            raise ValueError("sigma must be finite and non-negative")

    def actions(self, action_dim: int) -> np.ndarray:
        return self.mu.reshape(-1, action_dim)

    def first_action(self, action_dim: int) -> np.ndarray:
        return self.mu[:action_dim].copy()


class PlanMemory:
    """Ring buffer of ``(state, plan)`` pairs with exact Euclidean KNN lookup.

    When full, the oldest entry is overwritten.
    """

    def __init__(self, key_dim: int, plan_dim: int, capacity: int = 50_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.key_dim = key_dim
        self.plan_dim = plan_dim
        self.capacity = capacity
        self.keys = np.zeros((capacity, key_dim))
        self.mus = np.zeros((capacity, plan_dim))
        self.sigmas = np.zeros((capacity, plan_dim))
        self.stamps = np.zeros(capacity, dtype=np.int64)  # insertion counter
        self.size = 0
        self.n_inserted = 0

    def __len__(self):
        return self.size

    def add(self, state, plan: PlanDistribution):
        state = as_float_array(state, "state")
        if state.shape != (self.key_dim,) or plan.mu.shape != (self.plan_dim,):
            raise ValueError("state or plan has the wrong size for this memory")
        slot = self.n_inserted % self.capacity
        self.keys[slot] = state
        self.mus[slot] = plan.mu
        self.sigmas[slot] = plan.sigma
        self.stamps[slot] = self.n_inserted
        self.n_inserted += 1
        self.size = min(self.size + 1, self.capacity)

    def query_indices(self, state, k: int) -> np.ndarray:
        """Slots of the ``min(k, size)`` nearest keys, ties broken by insertion order."""
        if k < 0:
            raise ValueError("k must be >= 0")
        k = min(k, self.size)
        if k == 0:
            return np.zeros(0, dtype=np.int64)
        q = as_float_array(state, "state")
        d2 = ((self.keys[:self.size] - q) ** 2).sum(axis=1)
        if k < self.size:
            kth = np.partition(d2, k - 1)[k - 1]
            cand = np.flatnonzero(d2 <= kth)
        else:
            cand = np.arange(self.size)
        order = np.lexsort((self.stamps[cand], d2[cand]))
        return cand[order[:k]]

    def query(self, state, k: int) -> list[PlanDistribution]:
        return [PlanDistribution(self.mus[i].copy(), self.sigmas[i].copy()) for i in self.query_indices(state, k)]

    def state_dict(self):
        n = self.size
        return {"keys": self.keys[:n].copy(), "mus": self.mus[:n].copy(), "sigmas": self.sigmas[:n].copy(),
                "stamps": self.stamps[:n].copy(), "n_inserted": np.array(self.n_inserted),
                "capacity": np.array(self.capacity)}

    @classmethod
    def from_state_dict(cls, d):
        keys = d["keys"]
        mem = cls(keys.shape[1], d["mus"].shape[1], int(d["capacity"]))
        n = len(keys)
        mem.keys[:n], mem.mus[:n], mem.sigmas[:n], mem.stamps[:n] = keys, d["mus"], d["sigmas"], d["stamps"]
        mem.size, mem.n_inserted = n, int(d["n_inserted"])
        return mem


def knn_query(memory: PlanMemory, state, k: int) -> list[PlanDistribution]:
    return memory.query(state, k)


@dataclass
class CEMTrace:
    """Per-iteration diagnostics of one CEM run."""

    elite_means: list = field(default_factory=list)
    best_scores: list = field(default_factory=list)
    n_evaluated: list = field(default_factory=list)


def _cem(objective, cfg: PlannerConfig, rng, warm_start=(), trace=None):
    rng = as_generator(rng)
    low, high = cfg.bounds()
    mu = np.zeros(cfg.plan_dim)
    sigma = np.ones(cfg.plan_dim)
    for it in range(cfg.n_iter):
        samples = mu + sigma * rng.standard_normal((cfg.population, cfg.plan_dim))
        if it == 0 and warm_start:
            extra = [p.mu + p.sigma * rng.standard_normal((cfg.samples_per_neighbor, cfg.plan_dim)) for p in warm_start]
            samples = np.concatenate([samples] + extra)
        samples = np.clip(samples, low, high)
        scores = np.asarray(objective(samples), dtype=np.float64).reshape(-1)
        if scores.shape[0] != samples.shape[0]:
            raise ValueError("objective must return one score per candidate")
        scores = np.where(np.isfinite(scores), scores, -np.inf)
        # stable sort: equal scores keep candidate order
        elite_idx = np.argsort(-scores, kind="stable")[:cfg.elites]
        elites = samples[elite_idx]
        mu = elites.mean(axis=0)
        sigma = np.maximum(elites.std(axis=0), cfg.sigma_floor)
        if trace is not None:
            trace.elite_means.append(float(scores[elite_idx].mean()))
            trace.best_scores.append(float(scores[elite_idx[0]]))
            trace.n_evaluated.append(int(samples.shape[0]))
    return PlanDistribution(mu, sigma)


def cem_plan(objective, cfg: PlannerConfig, rng, trace: CEMTrace | None = None) -> PlanDistribution:
    """Vanilla CEM: start at N(0, 1), refit mean/std to the top elites each iteration.

    ``objective`` maps a ``(n_candidates, plan_dim)`` array to one score per
    row (higher is better).
    """
    return _cem(objective, cfg, rng, trace=trace)


def cem_plan_with_memory(objective, current_state, memory: PlanMemory, cfg: PlannerConfig, rng,
                         trace: CEMTrace | None = None, store: bool = True) -> PlanDistribution:
    """CEM whose first iteration also samples around the plans of the K nearest stored states.

    The warm-start candidates are appended to the population. The final
    distribution is stored under ``current_state`` unless ``store`` is off.
    """
    neighbors = memory.query(current_state, cfg.neighbors) if cfg.samples_per_neighbor > 0 else []
    plan = _cem(objective, cfg, rng, warm_start=neighbors, trace=trace)
    if store:
        memory.add(current_state, plan)
    return plan


def evaluate_objective(ensemble, start_state, action_seqs, beta, kind, rng, horizon=None,
                       state_bounds=None, blowup="clamp", return_parts=False):
    """Expected summed reward plus ``beta`` times the information gain.

    One trajectory per ensemble member is sampled for every candidate; the
    same trajectories serve the reward average and the estimator. ``kind``
    may be ``None`` to skip the intrinsic term entirely; an
    ``EstimatorConfig`` is also accepted.
    """
    kind = getattr(kind, "kind", kind)
    acts = np.asarray(action_seqs, dtype=np.float64)
    single = acts.ndim == 1
    acts = np.atleast_2d(acts).reshape(acts.shape[0] if not single else 1, -1, ensemble.action_dim)
    if horizon is not None and acts.shape[1] != horizon:
        raise ValueError(f"action sequences must have length {horizon}")
    use_info = kind is not None and beta != 0
    batch = sample_trajectories(ensemble, start_state, acts, rng, cross=use_info,
                                state_bounds=state_bounds, blowup=blowup)
    extrinsic = batch.rewards.sum(axis=2).mean(axis=0)
    intrinsic = estimate_from_loglik(batch.loglik, InfoKind(kind)) if use_info else np.zeros_like(extrinsic)
    score = extrinsic + beta * intrinsic
    score = np.where(batch.failed | ~np.isfinite(score), WORST_SCORE, score)
    if single:
        score, extrinsic, intrinsic = float(score[0]), float(extrinsic[0]), float(intrinsic[0])
    if return_parts:
        return score, extrinsic, intrinsic
    return score
