"""Probabilistic ensemble of Gaussian dynamics and reward networks.

Each member is one particle of the belief over model parameters. The
dynamics network maps ``(s_{t-1}, a_t)`` to a diagonal Gaussian over
``s_t``; the reward network maps ``(s_t, a_t)`` to a Gaussian over ``r_t``.
Members are stored stacked along a leading axis so that planning and
training run as batched matmuls, but no computation ever mixes members.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from . import nets
from .validation import as_float_array, as_generator, check_dims, check_is_initialized

LOG_2PI = float(np.log(2.0 * np.pi))
CHECKPOINT_VERSION = 1


class ModelBlowUpError(FloatingPointError):
    """A model rollout produced a non-finite state."""


@dataclass
class ModelTrainingConfig:
    """Optimisation settings for :meth:`Ensemble.fit`.

    ``horizon`` is both the longest prediction distance in the multi-step
    loss and the length of the training windows cut from episodes.
    """

    horizon: int = 20
    learning_rate: float = 1e-3
    batch_size: int = 64
    steps_per_transition: int = 20
    max_steps_per_fit: int = 600

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def step_weights(self) -> np.ndarray:
        """Weights of the 1..H step distances; half the mass on m = 1."""
        if self.horizon == 1:
            return np.ones(1)
        w = np.full(self.horizon, 1.0 / (2.0 * (self.horizon - 1)))
        w[0] = 0.5
        return w

    def n_steps(self, n_transitions: int) -> int:
        return int(min(self.steps_per_transition * n_transitions, self.max_steps_per_fit))


@dataclass
class GaussianPrediction:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class AdamState:
    """First/second moment accumulators shaped like the parameters they track."""

    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params, t=0):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, t)


@dataclass
class EnsembleMember:
    """One particle: a dynamics network, a reward network and their optimiser state."""

    dynamics: dict
    reward: dict
    dynamics_opt: AdamState
    reward_opt: AdamState


@dataclass
class FitReport:
    n_steps: int
    losses: np.ndarray = field(repr=False)  # (n_members, n_steps) minibatch losses

    @property
    def final_loss(self) -> np.ndarray:
        if self.n_steps == 0:
            return np.full(self.losses.shape[0], np.nan)
        return self.losses[:, -1]


def gaussian_nll(y, mean, logvar):
    """Elementwise negative log-density of N(y; mean, exp(logvar))."""
    return 0.5 * (logvar + (y - mean) ** 2 * np.exp(-logvar) + LOG_2PI)


def _gaussian_nll_grads(y, mean, logvar):
    inv = np.exp(-logvar)
    diff = mean - y
    return diff * inv, 0.5 * (1.0 - diff * diff * inv)


def _adam_update(params, grads, state: AdamState, t, lr, b1=0.9, b2=0.999, eps=1e-8):
    """In-place Adam step; ``t`` may be a per-member array of step counts."""
    t = np.asarray(t, dtype=np.float64)
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for k, g in grads.items():
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        shape = (-1,) + (1,) * (g.ndim - 1) if t.ndim else ()
        c1 = bc1.reshape(shape) if t.ndim else bc1
        c2 = bc2.reshape(shape) if t.ndim else bc2
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def _as_episode_arrays(buffer):
    if hasattr(buffer, "episode_arrays"):
        buffer = buffer.episode_arrays()
    episodes = []
    for ep in buffer:
        states, actions, rewards = (np.asarray(x, dtype=np.float64) for x in ep[:3])
        if len(actions) == 0:
            continue
        if states.shape[0] != actions.shape[0] + 1 or rewards.shape[0] != actions.shape[0]:
            raise ValueError("episode arrays have inconsistent lengths")
        episodes.append((states, actions, rewards))
    return episodes


class Ensemble(BaseEstimator):
    """Ensemble of probabilistic dynamics + reward networks.

    Parameters
    ----------
    state_dim, action_dim : int
        Observation and action sizes.
    n_members : int
        Number of particles, at least 2.
    dynamics_hidden, reward_hidden : tuple of int
        Hidden widths of the two networks.
    variance_mode : {"fixed", "learned"}
        ``"fixed"`` pins every predicted standard deviation to
        ``sigma_const`` and freezes the variance heads.
    sigma_const : float
        Standard deviation used in fixed mode.
    log_var_min, log_var_max : float
        Clamp range of the learned log-variance heads.
    residual : bool
        Predict the next state as ``s + delta`` instead of directly.
    normalize : bool
        Standardise network inputs (and scale state deltas) with statistics
        refreshed from the data at every :meth:`fit`.
    training : ModelTrainingConfig, optional
    random_state : int, optional
        Seed of the per-member initialisation streams.
    """

    def __init__(self, state_dim, action_dim, n_members=5, dynamics_hidden=(64, 64),
                 reward_hidden=(64,), variance_mode="fixed", sigma_const=1e-3,
                 log_var_min=-10.0, log_var_max=4.0, residual=False, normalize=False,
                 training=None, random_state=None):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.n_members = n_members
        self.dynamics_hidden = dynamics_hidden
        self.reward_hidden = reward_hidden
        self.variance_mode = variance_mode
        self.sigma_const = sigma_const
        self.log_var_min = log_var_min
        self.log_var_max = log_var_max
        self.residual = residual
        self.normalize = normalize
        self.training = training
        self.random_state = random_state

    # ------------------------------------------------------------------ setup
    @property
    def dynamics_spec(self) -> nets.NetworkSpec:
        return nets.NetworkSpec(self.state_dim + self.action_dim, tuple(self.dynamics_hidden), self.state_dim)

    @property
    def reward_spec(self) -> nets.NetworkSpec:
        return nets.NetworkSpec(self.state_dim + self.action_dim, tuple(self.reward_hidden), 1)

    @property
    def training_config(self) -> ModelTrainingConfig:
        return self.training if self.training is not None else ModelTrainingConfig()

    def _check_config(self):
        if self.n_members < 2:
            raise ValueError("an ensemble needs at least 2 members")
        if self.variance_mode not in ("fixed", "learned"):
            raise ValueError(f"unknown variance_mode {self.variance_mode!r}")
        if not self.sigma_const > 0:
            raise ValueError("sigma_const must be positive")
        if self.log_var_min >= self.log_var_max:
            raise ValueError("log_var_min must be below log_var_max")

    def initialize(self):
        """Draw fresh random parameters, one independent seed stream per member."""
        self._check_config()
        seeds = np.random.SeedSequence(self.random_state).spawn(self.n_members)
        dyn, rew = [], []
        for seed in seeds:
            rng = np.random.default_rng(seed)
            dyn.append(nets.init_params(self.dynamics_spec, rng))
            rew.append(nets.init_params(self.reward_spec, rng))
        self._set_stacked(_stack(dyn), _stack(rew))
        return self

    def _set_stacked(self, dyn, rew, opt=None):
        self.dyn_params_ = dyn
        self.rew_params_ = rew
        if opt is None:
            opt = (AdamState.zeros_like(dyn), AdamState.zeros_like(rew), np.zeros(self.n_members, dtype=np.int64))
        self.dyn_opt_, self.rew_opt_, self.opt_steps_ = opt
        n_in = self.state_dim + self.action_dim
        if getattr(self, "in_mean_", None) is None or self.in_mean_.shape != (n_in,):
            self.in_mean_ = np.zeros(n_in)
            self.in_std_ = np.ones(n_in)
            self.delta_scale_ = np.ones(self.state_dim)

    @property
    def is_initialized(self) -> bool:
        return getattr(self, "dyn_params_", None) is not None

    # --------------------------------------------------------------- members
    @property
    def members(self) -> list[EnsembleMember]:
        check_is_initialized(self, "dyn_params_")
        out = []
        for i in range(self.n_members):
            dyn = {k: v[i].copy() for k, v in self.dyn_params_.items()}
            rew = {k: v[i].copy() for k, v in self.rew_params_.items()}
            t = int(self.opt_steps_[i])
            out.append(EnsembleMember(
                dyn, rew,
                AdamState({k: v[i].copy() for k, v in self.dyn_opt_.m.items()},
                          {k: v[i].copy() for k, v in self.dyn_opt_.v.items()}, t),
                AdamState({k: v[i].copy() for k, v in self.rew_opt_.m.items()},
                          {k: v[i].copy() for k, v in self.rew_opt_.v.items()}, t),
            ))
        return out

    def set_members(self, members: list[EnsembleMember]):
        """Replace all members (e.g. after permuting them)."""
        if len(members) != self.n_members:
            raise ValueError(f"expected {self.n_members} members, got {len(members)}")
        for m in members:
            for params, opt in ((m.dynamics, m.dynamics_opt), (m.reward, m.reward_opt)):
                for k in params:
                    if opt.m[k].shape != params[k].shape or opt.v[k].shape != params[k].shape:
                        raise ValueError("optimizer state shape does not match parameters")
        dyn = _stack([m.dynamics for m in members])
        rew = _stack([m.reward for m in members])
        opt = (
            AdamState(_stack([m.dynamics_opt.m for m in members]), _stack([m.dynamics_opt.v for m in members])),
            AdamState(_stack([m.reward_opt.m for m in members]), _stack([m.reward_opt.v for m in members])),
            np.array([m.dynamics_opt.t for m in members], dtype=np.int64),
        )
        self._set_stacked(dyn, rew, opt)
        return self

    # ------------------------------------------------------------ evaluation
    def _inputs(self, s, a):
        return (np.concatenate([s, a], axis=-1) - self.in_mean_) / self.in_std_

    @staticmethod
    def _run(params, x, n_hidden, need_cache):
        # stacked params need (E, rows, d) inputs
        if x.ndim > 3 and params["Wm"].ndim == 3:
            shape = x.shape[:-1]
            mean, lv = nets.forward(params, x.reshape(x.shape[0], -1, x.shape[-1]), n_hidden)
            return mean.reshape(shape + (-1,)), lv.reshape(shape + (-1,))
        return nets.forward(params, x, n_hidden, need_cache)

    def _logvar(self, raw):
        if self.variance_mode == "fixed":
            return np.full(raw.shape, 2.0 * np.log(self.sigma_const))
        return np.clip(raw, self.log_var_min, self.log_var_max)

    def _dynamics(self, params, s, a, need_cache=False):
        res = self._run(params, self._inputs(s, a), len(self.dynamics_hidden), need_cache)
        mean = res[0] * self.delta_scale_
        if self.residual:
            mean = mean + s
        return (mean, self._logvar(res[1])) + tuple(res[1:] if need_cache else ())

    def _reward(self, params, s, a, need_cache=False):
        res = self._run(params, self._inputs(s, a), len(self.reward_hidden), need_cache)
        return (res[0], self._logvar(res[1])) + tuple(res[1:] if need_cache else ())

    def _member_params(self, member):
        if member is None:
            return self.dyn_params_, self.rew_params_
        if not 0 <= member < self.n_members:
            raise IndexError(f"member index {member} out of range")
        return ({k: v[member] for k, v in self.dyn_params_.items()},
                {k: v[member] for k, v in self.rew_params_.items()})

    def predict(self, states, actions, member=None):
        """Gaussian predictions of both networks at ``(states, actions)``.

        The dynamics output is the distribution of the state that follows
        ``states`` under ``actions``; the reward output is the reward
        distribution for taking ``actions`` in ``states``. With
        ``member=None`` a leading member axis is added to the outputs.
        """
        check_is_initialized(self, "dyn_params_")
        s = check_dims(as_float_array(states, "states"), self.state_dim, "states")
        a = check_dims(as_float_array(actions, "actions"), self.action_dim, "actions")
        squeeze = s.ndim == 1
        s2, a2 = np.atleast_2d(s), np.atleast_2d(a)
        dyn, rew = self._member_params(member)
        ds_mean, ds_lv = self._dynamics(dyn, s2, a2)
        r_mean, r_lv = self._reward(rew, s2, a2)
        if squeeze:
            ds_mean, ds_lv, r_mean, r_lv = (x[..., 0, :] for x in (ds_mean, ds_lv, r_mean, r_lv))
        return (GaussianPrediction(ds_mean, self._std(ds_lv)), GaussianPrediction(r_mean, self._std(r_lv)))

    def _std(self, logvar):
        # exp(log sigma^2 / 2) is not bit-exact, so report the constant itself
        if self.variance_mode == "fixed":
            return np.full(logvar.shape, float(self.sigma_const))
        return np.exp(0.5 * logvar)

    def dynamics_dist(self, states, actions):
        """Batched dynamics for all members.

        Inputs are ``(E, B, d)`` (one batch per member) or ``(B, d)`` (shared
        by all members); outputs are ``(E, B, ds)`` mean and log-variance.
        """
        return self._dynamics(self.dyn_params_, states, actions)

    def reward_dist(self, states, actions):
        """Batched rewards for all members, same input layouts as :meth:`dynamics_dist`."""
        mean, lv = self._reward(self.rew_params_, states, actions)
        return mean[..., 0], lv[..., 0]

    def rollout(self, start_state, actions, rng=None, member=None):
        """Sample a state/reward trajectory by iterating the dynamics model.

        Returns ``(states, rewards)`` with shapes ``(T+1, ds)`` and ``(T,)``
        for a single member or with a leading member axis otherwise.
        """
        check_is_initialized(self, "dyn_params_")
        rng = as_generator(rng)
        s0 = check_dims(as_float_array(start_state, "start_state"), self.state_dim, "start_state")
        acts = np.asarray(actions, dtype=np.float64).reshape(-1, self.action_dim)
        if len(acts) > self.training_config.horizon:
            raise ValueError("action sequence longer than the model horizon")
        dyn, rew = self._member_params(member)
        lead = () if member is not None else (self.n_members,)
        s = np.broadcast_to(s0, lead + (1, self.state_dim)).copy()
        states, rewards = [s[..., 0, :]], []
        for a in acts:
            a_b = np.broadcast_to(a, lead + (1, self.action_dim))
            mean, lv = self._dynamics(dyn, s, a_b)
            s = mean + np.exp(0.5 * lv) * rng.standard_normal(mean.shape)
            if not np.all(np.isfinite(s)):
                raise ModelBlowUpError("non-finite state in model rollout")
            r_mean, r_lv = self._reward(rew, s, a_b)
            r = r_mean + np.exp(0.5 * r_lv) * rng.standard_normal(r_mean.shape)
            states.append(s[..., 0, :])
            rewards.append(r[..., 0, 0])
        states = np.stack(states, axis=-2)
        rewards = np.stack(rewards, axis=-1) if rewards else np.zeros(lead + (0,))
        return states, rewards

    # ---------------------------------------------------------------- losses
    def single_step_nll(self, states, actions, rewards, params=None):
        """Summed one-step negative log-likelihood of each member on an episode.

        ``states`` has one more row than ``actions``/``rewards``. Returns one
        value per member.
        """
        check_is_initialized(self, "dyn_params_")
        dyn, rew = params if params is not None else (self.dyn_params_, self.rew_params_)
        s = np.asarray(states, dtype=np.float64)
        a = np.asarray(actions, dtype=np.float64)
        r = np.asarray(rewards, dtype=np.float64)
        mean, lv = self._dynamics(dyn, s[..., :-1, :], a)
        total = gaussian_nll(s[..., 1:, :], mean, lv).sum(axis=(-1, -2))
        r_mean, r_lv = self._reward(rew, s[..., 1:, :], a)
        total = total + gaussian_nll(r[..., None], r_mean, r_lv).sum(axis=(-1, -2))
        return total

    def sample_levels(self, states, actions, mask, rngs, params=None):
        """Draw the multi-step predicted states used by :meth:`multi_step_loss`.

        ``states`` is ``(E, B, L+1, ds)``; level ``m`` (index ``m-1`` of the
        returned list) holds at position ``t`` a state sampled by iterating
        the model ``m-1`` times from the observed ``s_{t-m+1}``. Level 1 is
        the observed data itself.
        """
        dyn = params[0] if params is not None else self.dyn_params_
        H = self.training_config.horizon
        L = actions.shape[-2]
        levels = [states]
        for m in range(1, min(H, L + 1)):
            prev = levels[-1]
            mean, lv = self._dynamics(dyn, prev[..., m - 1:L, :], actions[..., m - 1:L, :])
            noise = np.stack([rngs[e].standard_normal(mean.shape[1:]) for e in range(mean.shape[0])])
            nxt = np.zeros_like(states)
            nxt[..., m:L + 1, :] = mean + np.exp(0.5 * lv) * noise
            # padded (invalid) positions may hold garbage; keep them finite
            nxt = np.where(np.isfinite(nxt), nxt, 0.0)
            levels.append(nxt)
        return levels

    def multi_step_loss(self, states, actions, rewards, mask, rngs=None, params=None, levels=None):
        """Weighted multi-step negative log-likelihood and its gradients.

        Arrays carry a member axis: ``states (E, B, L+1, ds)``,
        ``actions (E, B, L, da)``, ``rewards (E, B, L)``, ``mask (E, B, L)``.
        For every distance ``m`` the dynamics term scores ``s_t`` given the
        ``m``-step predicted ``s_{t-1}`` and the reward term scores ``r_t``
        at the ``m``-step predicted ``s_t``. Predicted states are constants
        for differentiation. Losses are averaged over the ``B`` windows.

        Returns ``(loss (E,), (dyn_grads, rew_grads), levels)``.
        """
        check_is_initialized(self, "dyn_params_")
        dyn, rew = params if params is not None else (self.dyn_params_, self.rew_params_)
        cfg = self.training_config
        if levels is None:
            if rngs is None:
                raise ValueError("rngs are required to sample multi-step predictions")
            levels = self.sample_levels(states, actions, mask, rngs, params)
        weights = cfg.step_weights()
        E, B, L = actions.shape[0], actions.shape[1], actions.shape[2]
        if L < 1:
            raise ValueError("episode windows must contain at least one transition")
        dx, da_, dy, dw = [], [], [], []
        rx, rw = [], []
        for m in range(1, min(cfg.horizon, L) + 1):
            lvl = levels[m - 1]
            w = weights[m - 1] * mask[..., m - 1:L]
            dx.append(lvl[..., m - 1:L, :])
            da_.append(actions[..., m - 1:L, :])
            dy.append(states[..., m:L + 1, :])
            rx.append(lvl[..., m:L + 1, :])
            dw.append(w)
            rw.append((w, rewards[..., m - 1:L]))
        flat = lambda xs, d: np.concatenate([x.reshape(E, -1, d) for x in xs], axis=1)
        x_s, x_a, y_s = flat(dx, self.state_dim), flat(da_, self.action_dim), flat(dy, self.state_dim)
        w_s = np.concatenate([w.reshape(E, -1) for w in dw], axis=1) / B
        xr_s = flat(rx, self.state_dim)
        w_r = np.concatenate([w.reshape(E, -1) for w, _ in rw], axis=1) / B
        y_r = np.concatenate([r.reshape(E, -1) for _, r in rw], axis=1)[..., None]

        dyn_grads, dyn_loss = self._head_loss_grads(dyn, self._dynamics, len(self.dynamics_hidden),
                                                    x_s, x_a, y_s, w_s, scale=self.delta_scale_)
        rew_grads, rew_loss = self._head_loss_grads(rew, self._reward, len(self.reward_hidden),
                                                    xr_s, x_a, y_r, w_r, scale=None)
        return dyn_loss + rew_loss, (dyn_grads, rew_grads), levels

    def _head_loss_grads(self, params, fn, n_hidden, x_s, x_a, y, w, scale):
        mean, lv, raw_lv, cache = fn(params, x_s, x_a, need_cache=True)
        nll = gaussian_nll(y, mean, lv)
        loss = (w[..., None] * nll).sum(axis=(-1, -2))
        g_mean, g_lv = _gaussian_nll_grads(y, mean, lv)
        d_mean = w[..., None] * g_mean
        if scale is not None:
            d_mean = d_mean * scale
        if self.variance_mode == "fixed":
            d_raw_lv = None
        else:
            inside = (raw_lv > self.log_var_min) & (raw_lv < self.log_var_max)
            d_raw_lv = w[..., None] * g_lv * inside
        grads = nets.backward(params, cache, d_mean, d_raw_lv, n_hidden)
        return grads, loss

    # --------------------------------------------------------------- fitting
    def _refresh_normalizers(self, episodes):
        if not self.normalize:
            return
        s = np.concatenate([ep[0][:-1] for ep in episodes])
        a = np.concatenate([ep[1] for ep in episodes])
        x = np.concatenate([s, a], axis=1)
        self.in_mean_ = x.mean(axis=0)
        self.in_std_ = np.maximum(x.std(axis=0), 1e-6)
        if self.residual:
            delta = np.concatenate([ep[0][1:] - ep[0][:-1] for ep in episodes])
            self.delta_scale_ = np.maximum(delta.std(axis=0), 1e-6)

    def _member_rngs(self, rng):
        if isinstance(rng, (list, tuple)):
            if len(rng) != self.n_members:
                raise ValueError("need one rng per member")
            return [as_generator(r) for r in rng]
        # seed children from the generator's own stream (not Generator.spawn, whose
        # counter lives outside the bit-generator state and is lost on checkpoint)
        entropy = as_generator(rng).integers(0, 2**63, size=4)
        return [np.random.default_rng(s) for s in np.random.SeedSequence(entropy).spawn(self.n_members)]

    def fit(self, buffer, rng=None):
        """Train every member on the replay buffer.

        Runs ``min(steps_per_transition * n_transitions, max_steps_per_fit)``
        Adam steps; each member draws its own windows (random episode,
        random start, ``horizon`` transitions truncated at the episode end)
        from its own rng stream.
        """
        if not self.is_initialized:
            self.initialize()
        episodes = _as_episode_arrays(buffer)
        n_transitions = sum(len(ep[1]) for ep in episodes)
        if n_transitions == 0:
            raise ValueError("cannot fit on an empty replay buffer")
        cfg = self.training_config
        rngs = self._member_rngs(rng)
        self._refresh_normalizers(episodes)
        batch = _WindowSampler(episodes, cfg.horizon)
        n_steps = cfg.n_steps(n_transitions)
        losses = np.zeros((self.n_members, n_steps))
        for step in range(n_steps):
            S, A, R, M = batch.sample(rngs, cfg.batch_size)
            loss, (g_dyn, g_rew), _ = self.multi_step_loss(S, A, R, M, rngs)
            self.opt_steps_ += 1
            _adam_update(self.dyn_params_, g_dyn, self.dyn_opt_, self.opt_steps_, cfg.learning_rate)
            _adam_update(self.rew_params_, g_rew, self.rew_opt_, self.opt_steps_, cfg.learning_rate)
            losses[:, step] = loss
        return FitReport(n_steps, losses)

    def dataset_nll(self, buffer) -> np.ndarray:
        """Mean one-step NLL per transition of each member over the whole buffer."""
        episodes = _as_episode_arrays(buffer)
        total = np.zeros(self.n_members)
        count = 0
        for s, a, r in episodes:
            total += self.single_step_nll(np.broadcast_to(s, (self.n_members,) + s.shape),
                                          np.broadcast_to(a, (self.n_members,) + a.shape),
                                          np.broadcast_to(r, (self.n_members,) + r.shape))
            count += len(a)
        return total / max(count, 1)

    # ----------------------------------------------------------- persistence
    def save(self, path):
        """Write parameters, optimiser state and config to ``path`` (.npz)."""
        check_is_initialized(self, "dyn_params_")
        arrays = {"in_mean": self.in_mean_, "in_std": self.in_std_,
                  "delta_scale": self.delta_scale_, "opt_steps": self.opt_steps_}
        for prefix, params, opt in (("dyn", self.dyn_params_, self.dyn_opt_), ("rew", self.rew_params_, self.rew_opt_)):
            for k in params:
                arrays[f"{prefix}/{k}"] = params[k]
                arrays[f"{prefix}_m/{k}"] = opt.m[k]
                arrays[f"{prefix}_v/{k}"] = opt.v[k]
        meta = self.get_params(deep=False)
        meta["training"] = asdict(self.training_config)
        meta["dynamics_hidden"] = list(self.dynamics_hidden)
        meta["reward_hidden"] = list(self.reward_hidden)
        arrays["meta"] = np.frombuffer(json.dumps({"version": CHECKPOINT_VERSION, "params": meta}).encode(), dtype=np.uint8)
        with open(Path(path), "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path):
        with np.load(Path(path)) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            params = meta["params"]
            params["training"] = ModelTrainingConfig(**params["training"])
            params["dynamics_hidden"] = tuple(params["dynamics_hidden"])
            params["reward_hidden"] = tuple(params["reward_hidden"])
            model = cls(**params)
            pick = lambda prefix: {k.split("/", 1)[1]: data[k].copy() for k in data.files if k.startswith(prefix + "/")}
            model.in_mean_ = data["in_mean"].copy()
            model.in_std_ = data["in_std"].copy()
            model.delta_scale_ = data["delta_scale"].copy()
            opt = (AdamState(pick("dyn_m"), pick("dyn_v")), AdamState(pick("rew_m"), pick("rew_v")),
                   data["opt_steps"].copy())
            model._set_stacked(pick("dyn"), pick("rew"), opt)
        return model


class _WindowSampler:
    """Cuts fixed-length, end-truncated windows out of a list of episodes."""

    def __init__(self, episodes, length):
        self.length = length
        self.lengths = np.array([len(ep[1]) for ep in episodes])
        t_max = int(self.lengths.max())
        ds, da = episodes[0][0].shape[1], episodes[0][1].shape[1]
        n = len(episodes)
        self.S = np.zeros((n, t_max + 1, ds))
        self.A = np.zeros((n, t_max, da))
        self.R = np.zeros((n, t_max))
        for i, (s, a, r) in enumerate(episodes):
            self.S[i, :len(s)] = s
            self.A[i, :len(a)] = a
            self.R[i, :len(r)] = r
        self.t_max = t_max

    def sample(self, rngs, batch_size):
        L = self.length
        eps, starts = [], []
        for rng in rngs:
            ep = rng.integers(len(self.lengths), size=batch_size)
            starts.append(rng.integers(self.lengths[ep]))
            eps.append(ep)
        ep = np.stack(eps)[..., None]
        start = np.stack(starts)[..., None]
        pos_a = start + np.arange(L)
        mask = (pos_a < self.lengths[ep]).astype(np.float64)
        pos_s = np.minimum(start + np.arange(L + 1), self.t_max)
        pos_a = np.minimum(pos_a, self.t_max - 1)
        return self.S[ep, pos_s], self.A[ep, pos_a], self.R[ep, pos_a] * mask, mask


def _stack(dicts):
    return {k: np.stack([d[k] for d in dicts]) for k in dicts[0]}
