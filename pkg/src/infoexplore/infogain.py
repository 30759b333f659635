"""Nested Monte-Carlo estimators of expected information gain.

Both estimators work on a matrix of log-likelihoods ``L[..., i, k] =
ln p(x_i | theta_k)`` where sample ``x_i`` was generated by particle
``theta_i``. Every particle doubles as an outer sample and, for all other
rows, as an inner sample:

    MI ~ mean_i [ L_ii - ln mean_{k != i} exp(L_ik) ]
    LI ~ mean_i [ ln mean_{k != i} exp(L_ik) - mean_{j != i} L_ij ]

The module also holds finite discrete generative models with exact
enumeration of both quantities, used to check the estimators, and the
cosine-similarity study comparing estimated and exact information vectors.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .validation import as_float_array, as_generator

DENSITY_FLOOR = 1e-300


class InfoKind(str, Enum):
    MI = "MI"
    LI = "LI"


@dataclass
class EstimatorConfig:
    n_particles: int = 5
    kind: InfoKind = InfoKind.MI
    density_floor: float = DENSITY_FLOOR

    def __post_init__(self):
        self.kind = InfoKind(self.kind)
        if self.n_particles < 2:
            raise ValueError("n_particles must be >= 2")
        if not self.density_floor > 0:
            raise ValueError("density_floor must be positive")


# --------------------------------------------------------------------------
# estimators on log-likelihood matrices


def _masked(loglik):
    """Copy of ``loglik`` with ``-inf`` on the diagonal, plus the diagonal itself."""
    loglik = np.asarray(loglik, dtype=np.float64)
    n = loglik.shape[-1]
    if loglik.shape[-2] != n:
        raise ValueError("log-likelihood matrix must be square in its last two axes")
    if n < 2:
        raise ValueError("need at least 2 particles")
    diag = np.diagonal(loglik, axis1=-2, axis2=-1).copy()
    off = loglik.copy()
    idx = np.arange(n)
    off[..., idx, idx] = -np.inf
    return diag, off


def _log_inner(off):
    """Row max ``ref`` and ``log mean_{j != i} exp(off_ij - ref_i)``; identical rows give exact zeros."""
    n = off.shape[-1]
    ref = off.max(axis=-1, keepdims=True)
    ref = np.where(np.isfinite(ref), ref, 0.0)
    d = off - ref
    return ref[..., 0], d, np.log(np.exp(d).sum(axis=-1) / (n - 1))


def mi_from_loglik(loglik):
    """Sample-reusing NMC estimate of mutual information.

    ``loglik`` has shape ``(..., n, n)``; leading axes are batch axes.
    """
    diag, off = _masked(loglik)
    ref, _, log_inner = _log_inner(off)
    return np.mean((diag - ref) - log_inner, axis=-1)


def li_from_loglik(loglik):
    """Sample-reusing NMC estimate of Lautum information (same layout as MI)."""
    _, off = _masked(loglik)
    n = off.shape[-1]
    _, d, log_inner = _log_inner(off)
    idx = np.arange(n)
    d[..., idx, idx] = 0.0
    return np.mean(log_inner - d.sum(axis=-1) / (n - 1), axis=-1)


def estimate_from_loglik(loglik, kind):
    kind = InfoKind(kind)
    return mi_from_loglik(loglik) if kind is InfoKind.MI else li_from_loglik(loglik)


# --------------------------------------------------------------------------
# trajectory batches drawn from an ensemble


@dataclass
class TrajectoryBatch:
    """One sampled trajectory per ensemble member for each candidate plan.

    ``states`` is ``(n, C, H+1, ds)``, ``rewards`` is ``(n, C, H)`` and
    ``loglik[c, i, k]`` is the log-density of trajectory ``i`` of candidate
    ``c`` under member ``k`` (``None`` when cross terms were skipped).
    ``failed`` flags candidates whose rollout went non-finite.
    """

    start_state: np.ndarray
    actions: np.ndarray
    states: np.ndarray
    rewards: np.ndarray
    loglik: np.ndarray | None
    failed: np.ndarray

    @property
    def n_particles(self) -> int:
        return self.states.shape[0]


def _gauss_logpdf(x, mean, logvar):
    return -0.5 * (logvar + (x - mean) ** 2 * np.exp(-logvar) + np.log(2.0 * np.pi))


def sample_trajectories(ensemble, start_state, action_seqs, rng, cross=True,
                        state_bounds=None, blowup="clamp"):
    """Roll out every candidate under every member (one trajectory each).

    Parameters
    ----------
    action_seqs : array, shape (C, H, da) or (H, da)
    cross : bool
        Also score each trajectory under every other member, which the
        information-gain estimators need.
    state_bounds : (low, high), optional
        Box that sampled states are clipped into.
    blowup : {"clamp", "abort"}
        With ``"abort"`` any candidate that leaves the finite range (or the
        box) is flagged in ``failed``; with ``"clamp"`` only NaNs are.
    """
    rng = as_generator(rng)
    acts = np.asarray(action_seqs, dtype=np.float64)
    single = acts.ndim == 2
    if single:
        acts = acts[None]
    C, H, _ = acts.shape
    E = ensemble.n_members
    ds = ensemble.state_dim
    s0 = np.asarray(start_state, dtype=np.float64)
    x = np.broadcast_to(s0, (E, C, ds)).copy()
    states = np.empty((E, C, H + 1, ds))
    states[:, :, 0] = x
    rewards = np.empty((E, C, H))
    loglik = np.zeros((C, E, E)) if cross else None
    failed = np.zeros(C, dtype=bool)
    idx = np.arange(E)
    for t in range(H):
        a = acts[:, t]
        if cross:
            # one shared (E*C, d) input; every member scores every trajectory
            xin = x.reshape(E * C, ds)
            ain = np.tile(a, (E, 1))
            mean, lv = ensemble.dynamics_dist(xin, ain)
            mean = mean.reshape(E, E, C, ds)  # (k, i, c, d)
            lv = lv.reshape(E, E, C, ds)
            own_mean, own_lv = mean[idx, idx], lv[idx, idx]
        else:
            own_mean, own_lv = ensemble.dynamics_dist(x, np.broadcast_to(a, (E, C, a.shape[-1])))
        x = own_mean + np.exp(0.5 * own_lv) * rng.standard_normal(own_mean.shape)
        x, bad = _guard(x, state_bounds, blowup)
        failed |= bad
        states[:, :, t + 1] = x
        if cross:
            loglik += _gauss_logpdf(x[None], mean, lv).sum(axis=-1).transpose(2, 1, 0)
            r_mean, r_lv = ensemble.reward_dist(x.reshape(E * C, ds), ain)
            r_mean = r_mean.reshape(E, E, C)
            r_lv = r_lv.reshape(E, E, C)
            own_r, own_rlv = r_mean[idx, idx], r_lv[idx, idx]
        else:
            own_r, own_rlv = ensemble.reward_dist(x, np.broadcast_to(a, (E, C, a.shape[-1])))
        r = own_r + np.exp(0.5 * own_rlv) * rng.standard_normal(own_r.shape)
        bad_r = ~np.isfinite(r)
        failed |= bad_r.any(axis=0)
        r = np.where(bad_r, 0.0, r)
        rewards[:, :, t] = r
        if cross:
            loglik += _gauss_logpdf(r[None], r_mean, r_lv).transpose(2, 1, 0)
    if cross:
        bad = ~np.isfinite(loglik).all(axis=(1, 2))
        failed |= bad
        loglik[bad] = 0.0
    return TrajectoryBatch(s0, acts[0] if single else acts, states, rewards, loglik, failed)


def _guard(x, bounds, blowup):
    nan = np.isnan(x).any(axis=(0, 2))
    if blowup == "abort":
        bad = nan | ~np.isfinite(x).all(axis=(0, 2))
        if bounds is not None:
            lo, hi = bounds
            bad |= ((x < lo) | (x > hi)).any(axis=(0, 2))
    elif blowup == "clamp":
        bad = nan
    else:
        raise ValueError(f"unknown blow-up policy {blowup!r}")
    if bounds is not None:
        x = np.clip(x, bounds[0], bounds[1])
    x = np.where(np.isfinite(x), x, 0.0)
    return x, bad


def log_joint_density(ensemble, member, start_state, actions, states, rewards):
    """Log-density of one state/reward trajectory under one member.

    ``states`` holds the ``T`` states after ``start_state``; ``rewards`` the
    ``T`` rewards. Sums the Gaussian log-densities of every transition and
    every reward.
    """
    s0 = as_float_array(start_state, "start_state")
    a = as_float_array(actions, "actions").reshape(-1, ensemble.action_dim)
    s = as_float_array(states, "states").reshape(-1, ensemble.state_dim)
    r = as_float_array(rewards, "rewards").reshape(-1)
    if not (len(a) == len(s) == len(r)):
        raise ValueError("trajectory length does not match the action sequence")
    prev = np.vstack([s0[None], s[:-1]])
    dyn, rew = ensemble._member_params(member)
    mean, lv = ensemble._dynamics(dyn, prev, a)
    r_mean, r_lv = ensemble._reward(rew, s, a)
    total = _gauss_logpdf(s, mean, lv).sum() + _gauss_logpdf(r, r_mean[:, 0], r_lv[:, 0]).sum()
    if not np.isfinite(total):
        raise FloatingPointError("non-finite trajectory log-density")
    return float(total)


def loglik_matrix(batch: TrajectoryBatch):
    if batch.loglik is None:
        raise ValueError("trajectory batch was sampled without cross terms")
    return batch.loglik


def estimate_mi(batch: TrajectoryBatch, cfg: EstimatorConfig | None = None):
    """MI estimate for each candidate in the batch (scalar for a single plan)."""
    if cfg is not None and cfg.kind is not InfoKind.MI:
        raise ValueError("estimator config is not of kind MI")
    out = mi_from_loglik(loglik_matrix(batch))
    return float(out[0]) if batch.actions.ndim == 2 else out


def estimate_li(batch: TrajectoryBatch, cfg: EstimatorConfig | None = None):
    """LI estimate for each candidate in the batch (scalar for a single plan)."""
    if cfg is not None and cfg.kind is not InfoKind.LI:
        raise ValueError("estimator config is not of kind LI")
    out = li_from_loglik(loglik_matrix(batch))
    return float(out[0]) if batch.actions.ndim == 2 else out


# --------------------------------------------------------------------------
# discrete generative models


@dataclass
class DiscreteGenerativeModel:
    """Finite model with prior ``p(theta)`` and likelihood ``p(s | theta, pi)``.

    ``likelihood`` has shape ``(n_policies, n_theta, n_outcomes)``.
    """

    prior: np.ndarray
    likelihood: np.ndarray

    def __post_init__(self):
        self.prior = np.asarray(self.prior, dtype=np.float64)
        self.likelihood = np.asarray(self.likelihood, dtype=np.float64)
        if self.likelihood.ndim != 3 or self.likelihood.shape[1] != self.prior.shape[0]:
            raise ValueError("likelihood must be (n_policies, n_theta, n_outcomes)")
        if (self.prior < 0).any() or (self.likelihood < 0).any():
            raise ValueError("probabilities must be non-negative")
        if abs(self.prior.sum() - 1.0) > 1e-12:
            raise ValueError("prior must sum to 1")
        if np.abs(self.likelihood.sum(axis=-1) - 1.0).max() > 1e-12:
            raise ValueError("likelihood rows must sum to 1")

    @property
    def n_policies(self) -> int:
        return self.likelihood.shape[0]

    @property
    def n_theta(self) -> int:
        return self.likelihood.shape[1]

    @property
    def n_outcomes(self) -> int:
        return self.likelihood.shape[2]


def _xlogy_ratio(p_joint_weights, num, den):
    # sum of w * ln(num/den) over entries with w > 0
    w = p_joint_weights
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(w > 0, w * (np.log(num) - np.log(den)), 0.0)
    return float(terms.sum())


def exact_mi(model: DiscreteGenerativeModel, policy_index: int) -> float:
    """Mutual information between outcome and parameter by enumeration."""
    lik = model.likelihood[policy_index]
    marginal = model.prior @ lik
    joint = model.prior[:, None] * lik
    return max(_xlogy_ratio(joint, lik, np.broadcast_to(marginal, lik.shape)), 0.0)


def exact_li(model: DiscreteGenerativeModel, policy_index: int) -> float:
    """Lautum information, E_s KL[p(theta) || p(theta | s)], by enumeration.

    Outcomes with zero marginal probability contribute nothing. The result
    is infinite if an outcome with positive probability rules out a
    parameter value that has positive prior mass.
    """
    lik = model.likelihood[policy_index]
    marginal = model.prior @ lik
    product = model.prior[:, None] * marginal[None, :]
    with np.errstate(divide="ignore"):
        if ((product > 0) & (lik == 0)).any():
            return float("inf")
    return max(_xlogy_ratio(product, np.broadcast_to(marginal, lik.shape), lik), 0.0)


def random_discrete_model(rng, n_theta=5, n_outcomes=8, n_policies=8) -> DiscreteGenerativeModel:
    """Prior and likelihood rows drawn from a flat Dirichlet."""
    rng = as_generator(rng)
    prior = rng.dirichlet(np.ones(n_theta))
    likelihood = rng.dirichlet(np.ones(n_outcomes), size=(n_policies, n_theta))
    prior /= prior.sum()
    likelihood /= likelihood.sum(axis=-1, keepdims=True)
    return DiscreteGenerativeModel(prior, likelihood)


def discrete_loglik(model, policy_index, thetas, outcomes, floor=DENSITY_FLOOR):
    """``L[i, k] = ln p(s_i | theta_k, pi)`` for sampled index arrays."""
    lik = model.likelihood[policy_index]
    return np.log(np.maximum(lik[np.asarray(thetas)[None, :], np.asarray(outcomes)[:, None]], floor))


def sample_discrete(model, policy_index, n, rng, thetas=None):
    """Draw ``n`` particles from the prior and one outcome per particle."""
    rng = as_generator(rng)
    if thetas is None:
        thetas = rng.choice(model.n_theta, size=n, p=model.prior)
    lik = model.likelihood[policy_index][thetas]
    u = rng.random(len(thetas))[:, None]
    outcomes = np.minimum((np.cumsum(lik, axis=1) < u).sum(axis=1), model.n_outcomes - 1)
    return thetas, outcomes


def estimate_discrete(model, policy_index, n, rng, kind, thetas=None, floor=DENSITY_FLOOR):
    thetas, outcomes = sample_discrete(model, policy_index, n, rng, thetas)
    return float(estimate_from_loglik(discrete_loglik(model, policy_index, thetas, outcomes, floor), kind))


# --------------------------------------------------------------------------
# estimator study


def cosine_similarity(u, v) -> tuple[float, bool]:
    """Cosine similarity; a zero-norm vector gives ``(0.0, True)``."""
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0 or not np.isfinite(nu * nv):
        return 0.0, True
    return float(np.dot(u, v) / (nu * nv)), False


@dataclass
class StudyRow:
    sample_count: int
    kind: str
    mean: float
    std: float
    n_models: int
    n_degenerate: int

    @property
    def sem(self) -> float:
        return self.std / np.sqrt(self.n_models)


def cosine_similarity_study(rng, sample_counts=(16, 32, 64, 128, 256), n_models=1000,
                            kinds=("MI", "LI"), n_theta=5, n_outcomes=8, n_policies=8,
                            models=None, return_samples=False):
    """Compare estimated and exact information vectors over random models.

    For each model and each total budget ``b`` the estimators run with
    ``b // 2`` reused particles (each particle contributes one parameter
    sample and one outcome sample). The parameter particles are shared by
    all policies of a model; MI and LI see the same samples.

    Returns a list of :class:`StudyRow`, ordered by kind then budget.
    """
    if min(sample_counts) < 4:
        raise ValueError("each budget must allow at least 2 particles")
    seed_seq = np.random.SeedSequence(as_generator(rng).integers(2**63))
    model_seeds = seed_seq.spawn(n_models)
    kinds = [InfoKind(k) for k in kinds]
    sims = {(k, b): np.zeros(n_models) for k in kinds for b in sample_counts}
    degenerate = {key: 0 for key in sims}
    for m, seed in enumerate(model_seeds):
        model_rng = np.random.default_rng(seed)
        model = models[m] if models is not None else random_discrete_model(model_rng, n_theta, n_outcomes, n_policies)
        if model.n_policies < 2:
            raise ValueError("the study needs models with at least 2 policies")
        exact = {InfoKind.MI: np.array([exact_mi(model, p) for p in range(model.n_policies)]),
                 InfoKind.LI: np.array([exact_li(model, p) for p in range(model.n_policies)])}
        for b in sample_counts:
            n = b // 2
            thetas = model_rng.choice(model.n_theta, size=n, p=model.prior)
            logliks = []
            for p in range(model.n_policies):
                _, outcomes = sample_discrete(model, p, n, model_rng, thetas)
                logliks.append(discrete_loglik(model, p, thetas, outcomes))
            logliks = np.stack(logliks)
            for k in kinds:
                est = estimate_from_loglik(logliks, k)
                sim, flag = cosine_similarity(est, exact[k])
                sims[(k, b)][m] = sim
                degenerate[(k, b)] += flag
    rows = [StudyRow(b, k.value, float(sims[(k, b)].mean()), float(sims[(k, b)].std()), n_models, degenerate[(k, b)])
            for k in kinds for b in sample_counts]
    if return_samples:
        return rows, {(k.value, b): v for (k, b), v in sims.items()}
    return rows


STUDY_COLUMNS = ("sample_count", "kind", "mean", "std")


def write_study_csv(rows, path, kind=None):
    """Write study rows (optionally only one kind) as ``sample_count,kind,mean,std``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(STUDY_COLUMNS)
        for row in rows:
            if kind is None or row.kind == InfoKind(kind).value:
                writer.writerow([row.sample_count, row.kind, repr(row.mean), repr(row.std)])
