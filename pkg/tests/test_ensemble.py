import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from infoexplore import nets
from infoexplore.ensemble import Ensemble, ModelBlowUpError, ModelTrainingConfig, gaussian_nll
from infoexplore.validation import NotFittedError


def tiny(H=1, mode="learned", residual=True, normalize=False, seed=1, members=2):
    return Ensemble(3, 2, n_members=members, dynamics_hidden=(6, 5), reward_hidden=(4,), variance_mode=mode,
                    residual=residual, normalize=normalize, training=ModelTrainingConfig(horizon=H),
                    random_state=seed).initialize()


def windows(rng, E=2, B=3, L=3, ds=3, da=2):
    S = rng.normal(size=(E, B, L + 1, ds))
    A = rng.normal(size=(E, B, L, da))
    R = rng.normal(size=(E, B, L))
    M = np.ones((E, B, L))
    M[:, 0, -1] = 0.0
    return S, A, R, M


def fd_max_rel_error(ens, loss_fn, grads, eps=1e-5):
    worst = 0.0
    for params, g in zip((ens.dyn_params_, ens.rew_params_), grads):
        for k, arr in params.items():
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + eps
                lp = loss_fn()
                arr[idx] = old - eps
                lm = loss_fn()
                arr[idx] = old
                num = (lp - lm) / (2 * eps)
                ana = g[k][idx]
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    return worst


# ------------------------------------------------------------------ nets

def test_zero_network_gives_zero_mean_unit_std():
    ens = tiny(mode="learned", residual=False)
    ens.dyn_params_ = nets.zero_params(ens.dynamics_spec, 2)
    ens.rew_params_ = nets.zero_params(ens.reward_spec, 2)
    s_pred, r_pred = ens.predict(np.ones(3), np.ones(2))
    np.testing.assert_array_equal(s_pred.mean, 0.0)
    np.testing.assert_array_equal(s_pred.std, 1.0)
    np.testing.assert_array_equal(r_pred.std, 1.0)


def test_one_unit_forward_by_hand():
    spec = nets.NetworkSpec(2, (1,), 1)
    p = {"W0": np.array([[0.5], [-2.0]]), "b0": np.array([0.25]), "Wm": np.array([[3.0]]), "bm": np.array([-1.0]),
         "Wv": np.array([[0.5]]), "bv": np.array([0.1])}
    assert set(p) == set(spec.shapes())
    x = np.array([[1.0, 1.0], [1.0, -1.0]])
    mean, lv = nets.forward(p, x, 1)
    z = np.array([0.5 - 2.0 + 0.25, 0.5 + 2.0 + 0.25])
    h = np.where(z > 0, z, 0.01 * z)
    np.testing.assert_allclose(mean[:, 0], 3.0 * h - 1.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(lv[:, 0], 0.5 * h + 0.1, rtol=0, atol=1e-12)


def test_param_count_and_flatten_roundtrip():
    spec = nets.NetworkSpec(13, (64, 64), 10)
    assert spec.n_params() == 13 * 64 + 64 + 64 * 64 + 64 + 2 * (64 * 10 + 10)
    p = nets.init_params(spec, np.random.default_rng(0))
    q = nets.unflatten(nets.flatten(p), p)
    assert all(np.array_equal(p[k], q[k]) for k in p)


def test_forward_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    spec = nets.NetworkSpec(4, (5, 3), 2)
    p = nets.init_params(spec, rng)
    x = rng.normal(size=(6, 4))
    wm, wv = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))

    def loss():
        m, v = nets.forward(p, x, 2)
        return float((wm * m).sum() + (wv * v).sum())

    _, _, cache = nets.forward(p, x, 2, need_cache=True)
    g = nets.backward(p, cache, wm, wv, 2)
    for k, arr in p.items():
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + 1e-6
            lp = loss()
            arr[idx] = old - 1e-6
            lm = loss()
            arr[idx] = old
            assert g[k][idx] == pytest.approx((lp - lm) / 2e-6, rel=1e-5, abs=1e-8)


# ------------------------------------------------------------ predictions

def test_fixed_mode_std_is_sigma_const():
    ens = Ensemble(3, 2, n_members=3, random_state=0).initialize()
    s_pred, r_pred = ens.predict(np.random.default_rng(0).normal(size=(7, 3)), np.zeros((7, 2)))
    assert s_pred.mean.shape == (3, 7, 3)
    assert np.all(s_pred.std == 1e-3) and np.all(r_pred.std == 1e-3)


@settings(max_examples=30, deadline=None)
@given(st.floats(-50, 50), st.integers(0, 1000))
def test_learned_std_stays_inside_clamp(bias, seed):
    ens = tiny(mode="learned", seed=seed)
    ens.dyn_params_["bv"][:] = bias
    ens.rew_params_["bv"][:] = bias
    s_pred, r_pred = ens.predict(np.random.default_rng(seed).normal(size=(5, 3)) * 10, np.ones((5, 2)))
    lo, hi = np.exp(ens.log_var_min / 2), np.exp(ens.log_var_max / 2)
    for std in (s_pred.std, r_pred.std):
        assert np.all(std >= lo - 1e-15) and np.all(std <= hi + 1e-12)


def test_predict_rejects_bad_inputs():
    ens = tiny()
    with pytest.raises(ValueError):
        ens.predict(np.ones(4), np.ones(2))
    with pytest.raises(ValueError):
        ens.predict(np.array([np.nan, 0, 0]), np.ones(2))
    with pytest.raises(NotFittedError):
        Ensemble(3, 2).predict(np.ones(3), np.ones(2))


def test_needs_two_members():
    with pytest.raises(ValueError):
        Ensemble(3, 2, n_members=1).initialize()


def test_rollout_empty_and_deterministic():
    ens = tiny(H=4)
    s, r = ens.rollout(np.zeros(3), np.zeros((0, 2)), rng=0, member=0)
    assert s.shape == (1, 3) and r.shape == (0,)
    acts = np.random.default_rng(1).normal(size=(4, 2))
    a = ens.rollout(np.ones(3), acts, rng=5, member=1)
    b = ens.rollout(np.ones(3), acts, rng=5, member=1)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_rollout_tiny_variance_composes_means():
    ens = Ensemble(3, 2, n_members=2, dynamics_hidden=(6, 5), reward_hidden=(4,), sigma_const=1e-14,
                   residual=True, random_state=2).initialize()
    acts = np.random.default_rng(0).normal(size=(5, 2))
    s, _ = ens.rollout(np.full(3, 0.3), acts, rng=0, member=0)
    x = np.full(3, 0.3)
    for t in range(5):
        x = ens.predict(x, acts[t], member=0)[0].mean
        np.testing.assert_allclose(s[t + 1], x, atol=1e-9)


def test_rollout_longer_than_horizon_rejected():
    ens = tiny(H=3)
    with pytest.raises(ValueError):
        ens.rollout(np.zeros(3), np.zeros((4, 2)), rng=0, member=0)


def test_rollout_blowup_raises():
    ens = tiny(H=2, residual=False)
    ens.dyn_params_["bm"][:] = np.inf
    with pytest.raises(ModelBlowUpError):
        ens.rollout(np.zeros(3), np.zeros((2, 2)), rng=0, member=0)


# --------------------------------------------------------------- training

@pytest.mark.parametrize("H,expected", [(1, [1.0]), (2, [0.5, 0.5]), (5, [0.5, 0.125, 0.125, 0.125, 0.125])])
def test_step_weights(H, expected):
    w = ModelTrainingConfig(horizon=H).step_weights()
    np.testing.assert_allclose(w, expected, rtol=0, atol=1e-15)
    assert abs(w.sum() - 1.0) < 1e-12


def test_default_step_weights_sum_to_one():
    w = ModelTrainingConfig().step_weights()
    assert len(w) == 20 and w[0] == 0.5 and abs(w.sum() - 1) < 1e-12


@pytest.mark.parametrize("n,steps", [(10, 200), (30, 600), (1000, 600), (1, 20)])
def test_fit_step_count(n, steps):
    assert ModelTrainingConfig().n_steps(n) == steps


def test_fit_runs_exact_step_count_per_member():
    ens = tiny(H=2)
    rng = np.random.default_rng(0)
    ep = (rng.normal(size=(11, 3)), rng.normal(size=(10, 2)), rng.normal(size=10))
    report = ens.fit([ep], rng=0)
    assert report.n_steps == 200 and report.losses.shape == (2, 200)
    np.testing.assert_array_equal(ens.opt_steps_, [200, 200])


@pytest.mark.parametrize("H", [1, 3, 5])
def test_multi_step_gradients_match_finite_differences(H):
    ens = tiny(H=H)
    S, A, R, M = windows(np.random.default_rng(H), L=H + 1)
    _, grads, levels = ens.multi_step_loss(S, A, R, M, [np.random.default_rng(5), np.random.default_rng(6)])
    err = fd_max_rel_error(ens, lambda: ens.multi_step_loss(S, A, R, M, levels=levels)[0].sum(), grads)
    assert err < 1e-4


def test_fixed_mode_freezes_variance_heads():
    ens = tiny(H=2, mode="fixed")
    S, A, R, M = windows(np.random.default_rng(0))
    _, (gd, gr), _ = ens.multi_step_loss(S, A, R, M, [np.random.default_rng(0)] * 2)
    assert not gd["Wv"].any() and not gr["bv"].any()


def test_horizon_one_equals_single_step_nll():
    ens = tiny(H=1)
    rng = np.random.default_rng(4)
    S, A, R, _ = windows(rng, B=1, L=4)
    M = np.ones((2, 1, 4))
    loss, _, _ = ens.multi_step_loss(S, A, R, M, levels=[S])
    single = ens.single_step_nll(S[:, 0], A[:, 0], R[:, 0])
    np.testing.assert_allclose(loss, single, rtol=1e-12, atol=1e-12)


def test_gaussian_nll_value():
    assert gaussian_nll(np.array(1.0), np.array(0.0), np.array(0.0)) == pytest.approx(0.5 * np.log(2 * np.pi) + 0.5)


def test_fit_learns_linear_system():
    rng = np.random.default_rng(0)
    Am = np.array([[0.9, 0.1], [-0.1, 0.9]])
    Bm = np.array([[0.1], [0.05]])
    eps = []
    for _ in range(20):
        s = [rng.uniform(-1, 1, 2)]
        a = rng.uniform(-1, 1, (20, 1))
        for t in range(20):
            s.append(Am @ s[-1] + Bm @ a[t] + 1e-4 * rng.normal(size=2))
        eps.append((np.array(s), a, np.zeros(20)))
    ens = Ensemble(2, 1, n_members=2, dynamics_hidden=(32, 32), reward_hidden=(8,), variance_mode="learned",
                   residual=True, normalize=True,
                   training=ModelTrainingConfig(horizon=1, max_steps_per_fit=3000, steps_per_transition=10),
                   random_state=0)
    ens.fit(eps, rng=1)
    x = rng.uniform(-1, 1, (200, 2))
    u = rng.uniform(-1, 1, (200, 1))
    pred = ens.predict(x, u)[0].mean
    mse = ((pred - (x @ Am.T + u @ Bm.T)) ** 2).mean()
    assert mse < 1e-3


def test_fit_lowers_dataset_nll():
    rng = np.random.default_rng(1)
    eps = [(rng.normal(size=(9, 3)) * 0.1, rng.normal(size=(8, 2)), rng.normal(size=8) * 0.1) for _ in range(3)]
    ens = tiny(H=3)
    before = ens.dataset_nll(eps)
    ens.fit(eps, rng=0)
    assert np.all(ens.dataset_nll(eps) < before)


def test_member_permutation_gives_permuted_results():
    rng = np.random.default_rng(2)
    eps = [(rng.normal(size=(6, 3)), rng.normal(size=(5, 2)), rng.normal(size=5)) for _ in range(2)]
    a = tiny(H=2, members=3, seed=7)
    b = tiny(H=2, members=3, seed=7)
    perm = [2, 0, 1]
    b.set_members([b.members[i] for i in perm])
    seeds = np.random.SeedSequence(11).spawn(3)
    a.fit(eps, rng=[np.random.default_rng(s) for s in seeds])
    b.fit(eps, rng=[np.random.default_rng(seeds[i]) for i in perm])
    for k in a.dyn_params_:
        np.testing.assert_array_equal(a.dyn_params_[k][perm], b.dyn_params_[k])


def test_fit_rejects_empty_buffer():
    with pytest.raises(ValueError):
        tiny().fit([])


# ------------------------------------------------------- estimator plumbing

def test_sklearn_params_and_clone():
    ens = Ensemble(4, 2, n_members=3, variance_mode="learned", random_state=3)
    assert ens.get_params()["n_members"] == 3
    c = clone(ens)
    assert c.get_params() == ens.get_params() and not c.is_initialized


def test_save_load_roundtrip(tmp_path):
    ens = tiny(H=2, normalize=True)
    rng = np.random.default_rng(0)
    ens.fit([(rng.normal(size=(5, 3)), rng.normal(size=(4, 2)), rng.normal(size=4))], rng=0)
    ens.save(tmp_path / "m.npz")
    back = Ensemble.load(tmp_path / "m.npz")
    assert back.get_params(deep=False)["training"] == ens.training
    for k in ens.dyn_params_:
        assert np.array_equal(ens.dyn_params_[k], back.dyn_params_[k])
        assert np.array_equal(ens.dyn_opt_.v[k], back.dyn_opt_.v[k])
    assert np.array_equal(ens.in_std_, back.in_std_)
    x = rng.normal(size=(3, 3))
    assert np.array_equal(ens.predict(x, np.ones((3, 2)))[0].mean, back.predict(x, np.ones((3, 2)))[0].mean)


def test_optimizer_state_matches_params():
    for m in tiny().members:
        for k in m.dynamics:
            assert m.dynamics_opt.m[k].shape == m.dynamics[k].shape
