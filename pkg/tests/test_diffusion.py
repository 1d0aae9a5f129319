import math

import numpy as np
import pytest

from stepdiff.deeponet import DeepONetConfig, train_deeponet
from stepdiff.diffusion import (MODES, Denoiser, DenoiserConfig, IntegrationMode, Normalizer, NoiseSchedule,
                                TrainRunConfig, build_schedule, condition_pack, forward_noise, load_model,
                                resolve_mode, reverse_step, sample, save_model, step_loss, train)
from stepdiff.grid_data import WindowSample
from stepdiff.pde import PdeParams, build_transition
from stepdiff.tensor_core.gradcheck import check_gradients
from stepdiff.tensor_core.tensor import DimensionError, Tensor

L1, L2, X, Y = 3, 3, 3, 3
TINY = dict(channels=8, heads=2, layers=1, ff_dim=8, T=10)


def tiny_windows(n=6, seed=0, const=None):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        if const is None:
            v_co, v_ta = rng.uniform(10, 40, (L1, X, Y)), rng.uniform(10, 40, (L2, X, Y))
        else:
            v_co, v_ta = np.full((L1, X, Y), const), np.full((L2, X, Y), const)
        m_co = rng.random((L1, X, Y)) < 0.7
        m_ta = rng.random((L2, X, Y)) < 0.7
        m_ta[0, 0, 0] = True
        out.append(WindowSample(np.where(m_co, v_co, 0.0), m_co, np.where(m_ta, v_ta, 0.0), m_ta))
    return out


def op3():
    return build_transition(PdeParams(K=5.0, P_x=-0.1), X, Y)


class TestSchedule:
    def test_two_steps(self):
        s = NoiseSchedule.from_betas([0.1, 0.2])
        np.testing.assert_allclose(s.alpha_hat, [0.9, 0.8])
        np.testing.assert_allclose(s.alpha, [0.9, 0.72])
        assert s.beta_tilde[0] == 0.1
        assert s.beta_tilde[1] == pytest.approx(0.1 / 0.28 * 0.2)

    def test_defaults(self):
        s = build_schedule()
        assert s.T == 50 and s.beta[0] == pytest.approx(1e-4) and s.beta[-1] == pytest.approx(0.5)
        assert 0 < s.alpha[-1] < 0.01
        assert s.alpha[-1] == pytest.approx(3.354078875408494e-05, rel=1e-9)
        assert np.all(np.diff(np.sqrt(s.beta)) > 0)
        np.testing.assert_allclose(np.diff(np.sqrt(s.beta), 2), 0, atol=1e-12)

    @pytest.mark.parametrize("args", [(0, 1e-4, 0.5), (50, 0.5, 0.1), (50, 0.0, 0.5), (50, 1e-4, 1.0)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            build_schedule(*args)

    def test_step_range(self):
        s = build_schedule(5)
        with pytest.raises(ValueError):
            s.at(0)
        with pytest.raises(ValueError):
            forward_noise(np.zeros(2), 6, np.zeros(2), s)


class TestForward:
    def setup_method(self):
        self.s = build_schedule()

    def test_zero_noise_and_zero_signal(self):
        v0 = np.arange(5.0)
        a = self.s.alpha[19]
        np.testing.assert_allclose(forward_noise(v0, 20, np.zeros(5), self.s), math.sqrt(a) * v0)
        np.testing.assert_allclose(forward_noise(np.zeros(5), 20, v0, self.s), math.sqrt(1 - a) * v0)

    @pytest.mark.parametrize("t", [1, 25, 50])
    def test_marginal_monte_carlo(self, t):
        n = 100_000
        rng = np.random.default_rng(t)
        v0 = 2.5
        x = forward_noise(np.full(n, v0), t, rng.standard_normal(n), self.s)
        a = self.s.alpha[t - 1]
        sd = math.sqrt(1 - a)
        assert abs(x.mean() - math.sqrt(a) * v0) < 3 * sd / math.sqrt(n)
        # var of a sample variance is ~ 2 sd^4 / n
        assert abs(x.var() - (1 - a)) < 3 * math.sqrt(2 / n) * (1 - a)

    def test_per_batch_steps(self):
        v0 = np.ones((2, 3))
        out = forward_noise(v0, np.array([1, 50]), np.zeros((2, 3)), self.s)
        np.testing.assert_allclose(out[:, 0], np.sqrt(self.s.alpha[[0, 49]]))


class TestReverse:
    def test_single_step_no_noise(self):
        s = NoiseSchedule.from_betas([0.3])
        v1 = np.array([1.0, -2.0])
        np.testing.assert_allclose(reverse_step(v1, np.zeros(2), 1, s), v1 / math.sqrt(0.7))
        # noise is never added at t == 1
        np.testing.assert_allclose(reverse_step(v1, np.zeros(2), 1, s, np.ones(2)), v1 / math.sqrt(0.7))

    def test_exact_noise_recovers_signal(self):
        s = NoiseSchedule.from_betas([0.2])
        v0 = np.array([0.5, 1.5])
        eps = np.array([0.3, -1.1])
        v1 = forward_noise(v0, 1, eps, s)
        np.testing.assert_allclose(reverse_step(v1, eps, 1, s), v0, rtol=1e-12)

    def test_noise_scale(self):
        s = build_schedule(10)
        out = reverse_step(np.zeros(3), np.zeros(3), 5, s, np.ones(3))
        np.testing.assert_allclose(out, math.sqrt(s.beta_tilde[4]))


class TestStepLoss:
    def test_omega_zero_is_masked_mse(self):
        rng = np.random.default_rng(0)
        eps, eh = rng.normal(size=(2, 1, 3, 2, 2))
        m = rng.random((1, 3, 2, 2)) < 0.6
        m[0, 0, 0, 0] = True
        loss, le, _ = step_loss(eps, eh, np.eye(4), 0.0, m)
        assert float(loss.data) == pytest.approx(((eh - eps) ** 2 * m).sum() / m.sum())
        assert le == pytest.approx(float(loss.data))

    def test_consistent_noise_zero_loss(self):
        rng = np.random.default_rng(1)
        B = rng.normal(size=(4, 4)) * 0.5
        e = [rng.normal(size=4)]
        for _ in range(3):
            e.append(B @ e[-1])
        eps = np.stack(e).reshape(4, 2, 2)
        for omega in (0.0, 1.0, 8.0):
            loss, _, lp = step_loss(eps, eps, B, omega, np.ones(eps.shape))
            assert float(loss.data) < 1e-24 and lp < 1e-24

    def test_identity_hand_values(self):
        const = np.ones((2, 1, 1))
        _, _, lp = step_loss(const, const, np.eye(1), 1.0, np.ones((2, 1, 1)))
        assert lp == 0.0
        alt = np.array([1.0, -1.0]).reshape(2, 1, 1)
        loss, le, lp = step_loss(alt, alt, np.eye(1), 1.0, np.ones((2, 1, 1)))
        assert le == 0.0 and lp == 4.0 and float(loss.data) == 4.0

    def test_monotone_in_omega(self):
        rng = np.random.default_rng(2)
        eps, eh = rng.normal(size=(2, 4, 2, 2))
        B = rng.normal(size=(4, 4))
        vals = [float(step_loss(eps, eh, B, w, np.ones(eps.shape))[0].data) for w in (0, 0.25, 1, 4, 16)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_empty_mask(self):
        with pytest.raises(ValueError):
            step_loss(np.zeros((2, 1, 1)), np.zeros((2, 1, 1)), np.eye(1), 1.0, np.zeros((2, 1, 1)))

    def test_gradient(self):
        rng = np.random.default_rng(3)
        eps = rng.normal(size=(2, 3, 2, 2))
        eh = Tensor(rng.normal(size=eps.shape))
        B = rng.normal(size=(4, 4))
        m = (rng.random(eps.shape) < 0.7).astype(float)
        assert check_gradients(lambda: step_loss(eps, eh, B, 2.0, m)[0], [eh]) < 1e-6


class TestDenoiser:
    def cfg(self, **kw):
        return DenoiserConfig(X=X, Y=Y, L1=L1, L2=L2, **{**TINY, **kw})

    def inputs(self, seed=0, Bn=2, extra=0):
        rng = np.random.default_rng(seed)
        return (rng.normal(size=(Bn, L2, X, Y)), rng.integers(1, 11, Bn),
                rng.normal(size=(Bn, L1 + L2, X, Y, 3 + extra)))

    def test_zero_output_projection(self):
        d = Denoiser(self.cfg())
        out = d(*self.inputs())
        assert out.shape == (2, L2, X, Y) and not out.data.any()

    def perturbed(self, seed=0):
        d = Denoiser(self.cfg(seed=seed))
        rng = np.random.default_rng(seed + 100)
        for p in d.store.params.values():
            p.data[...] += 0.1 * rng.normal(size=p.data.shape)
        return d

    def test_pure(self):
        d = self.perturbed()
        a, b = d(*self.inputs()).data, d(*self.inputs()).data
        assert a.tobytes() == b.tobytes() and np.abs(a).max() > 0

    def test_batch_independence(self):
        d = self.perturbed(1)
        v, t, c = self.inputs(Bn=3)
        full = d(v, t, c).data
        np.testing.assert_allclose(d(v[1:2], t[1:2], c[1:2]).data[0], full[1], atol=1e-12)

    def test_padding_mask_hides_positions(self):
        d = self.perturbed(2)
        v, t, c = self.inputs(Bn=1)
        pad = np.ones((1, L1 + L2), bool)
        pad[0, 0] = False
        c2 = c.copy()
        c2[:, 0] += 10.0
        a = d(v, t, c, pad_mask=pad).data
        b = d(v, t, c2, pad_mask=pad).data
        # a padded slot is never an attention key, so target outputs cannot see it
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_shape_errors(self):
        d = Denoiser(self.cfg())
        v, t, c = self.inputs()
        with pytest.raises(DimensionError):
            d(v[:, :2], t, c)
        with pytest.raises(DimensionError):
            d(v, t, c[..., :2])

    def test_gradients(self):
        d = self.perturbed(3)
        v, t, c = self.inputs(Bn=1)
        params = [d.store[k] for k in ("in_proj.W", "block0.time.qkv.W", "out_proj.W", "feature_emb")]
        err = check_gradients(lambda: (d(v, t, c) * d(v, t, c)).sum(), params, n_probe=8)
        assert err < 1e-5


def tiny_cfg(mode="10", **kw):
    return TrainRunConfig(**{"n_iter": 20, "batch_size": 2, **TINY, **kw}).with_mode(mode)


@pytest.fixture(scope="module")
def deeponet():
    return train_deeponet(tiny_windows(8), DeepONetConfig(p=4, hidden=(8,), epochs=2))


class TestTrain:
    def test_zero_iterations_is_init(self, deeponet):
        cfg = tiny_cfg(n_iter=0)
        res = train(tiny_windows(), deeponet, op3(), cfg)
        init = Denoiser(cfg.denoiser_config(X, Y, L1, L2)).records()
        got = res.denoiser.records()
        assert all(got[k].tobytes() == init[k].tobytes() for k in init)
        assert res.curve == []

    def test_deterministic(self, deeponet):
        a = train(tiny_windows(), deeponet, op3(), tiny_cfg()).denoiser.records()
        b = train(tiny_windows(), deeponet, op3(), tiny_cfg()).denoiser.records()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_frozen_deeponet_untouched(self, deeponet):
        before = {k: v.copy() for k, v in deeponet.records().items()}
        train(tiny_windows(), deeponet, op3(), tiny_cfg("1"))
        after = deeponet.records()
        assert all(before[k].tobytes() == after[k].tobytes() for k in before)

    def test_trainable_deeponet_moves(self, deeponet):
        import copy
        don = copy.deepcopy(deeponet)
        before = don.records()
        train(tiny_windows(), don, op3(), tiny_cfg("2"))
        assert any(before[k].tobytes() != v.tobytes() for k, v in don.records().items())

    @pytest.mark.parametrize("pde_role", ["none", "condition", "diff_loss"])
    @pytest.mark.parametrize("don_role", ["none", "frozen_condition", "trainable_condition"])
    def test_role_matrix_smoke(self, deeponet, pde_role, don_role):
        import copy
        cfg = tiny_cfg(IntegrationMode(pde_role, don_role), n_iter=50)
        res = train(tiny_windows(), copy.deepcopy(deeponet) if don_role != "none" else None, op3(), cfg)
        loss = np.array([c[1] for c in res.curve])
        assert len(loss) == 50 and np.isfinite(loss).all()
        if pde_role != "diff_loss":
            assert all(c[1] == c[2] for c in res.curve)

    def test_needs_deeponet(self):
        with pytest.raises(ValueError):
            train(tiny_windows(), None, op3(), tiny_cfg("1"))
        with pytest.raises(ValueError):
            train([], None, op3(), tiny_cfg("5"))

    def test_modes_table(self):
        assert resolve_mode("m10") == MODES["10"] == IntegrationMode("diff_loss", "frozen_condition")
        assert MODES["diff"] == IntegrationMode("none", "none")
        assert {m.pde_fit for m in MODES.values()} == {"known", "fit_train", "fit_external", "random"}
        with pytest.raises(ValueError):
            resolve_mode("11")
        assert tiny_cfg("3").effective_omega == 0.0 and tiny_cfg("5").effective_omega == 1.0

    def test_curve_file(self, deeponet, tmp_path):
        train(tiny_windows(), deeponet, op3(), tiny_cfg(n_iter=3), curve_path=tmp_path / "c.csv")
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == "iter,loss,l_eps,l_pde" and len(lines) == 4


class TestSample:
    def test_roundtrip_and_determinism(self, deeponet, tmp_path):
        cfg = tiny_cfg()
        res = train(tiny_windows(), deeponet, op3(), cfg)
        save_model(tmp_path / "m.stpc", res, op3())
        M = load_model(tmp_path / "m.stpc")
        w = tiny_windows(4, seed=9)
        v_co = np.stack([x.v_co for x in w])
        m_co = np.stack([x.m_co for x in w])
        a = sample(v_co, m_co, res.denoiser, res.deeponet, op3(), cfg.schedule(), cfg, res.norm, seed=3)
        b = sample(v_co, m_co, M.denoiser, M.deeponet, M.op, M.cfg.schedule(), M.cfg, M.norm, seed=3)
        assert a.shape == (4, L2, X, Y) and a.tobytes() == b.tobytes() and a.min() >= 0
        # per-window streams: sampling one window alone gives the same draw
        c = sample(v_co[2], m_co[2], M.denoiser, M.deeponet, M.op, M.cfg.schedule(), M.cfg, M.norm,
                   seed=3, window_ids=[2])
        np.testing.assert_allclose(c, a[2], atol=1e-12)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_model(tmp_path / "nope.stpc")

    @pytest.mark.slow
    def test_constant_field(self):
        data = tiny_windows(12, const=30.0)
        cfg = tiny_cfg("diff", n_iter=600, batch_size=4, lr=3e-3)
        res = train(data, None, op3(), cfg)
        assert res.norm.std == 1.0 and res.norm.mean == 30.0
        v_co = np.stack([w.v_co for w in data[:3]])
        m_co = np.stack([w.m_co for w in data[:3]])
        out = sample(v_co, m_co, res.denoiser, None, op3(), cfg.schedule(), cfg, res.norm)
        assert np.abs(out - 30.0).max() <= 2.0


def test_condition_pack_layout():
    Bn = 2
    z_co = np.ones((Bn, L1, X, Y))
    m_co = np.full((Bn, L1, X, Y), 2.0)
    z_de = np.full((Bn, L2, X, Y), 3.0)
    z_pde = np.full((Bn, L2, X, Y), 4.0)
    c = condition_pack(z_co, m_co, z_de, z_pde)
    assert c.shape == (Bn, L1 + L2, X, Y, 4)
    np.testing.assert_array_equal(c[0, 0, 0, 0], [1, 2, 0, 0])
    np.testing.assert_array_equal(c[0, L1, 0, 0], [0, 0, 3, 4])
    ct = condition_pack(z_co, m_co, Tensor(z_de), z_pde)
    np.testing.assert_array_equal(ct.data, c)


def test_normalizer():
    w = tiny_windows(3)
    n = Normalizer.fit(w)
    obs = np.concatenate([np.concatenate([x.v_co[x.m_co], x.v_ta[x.m_ta]]) for x in w])
    assert n.mean == pytest.approx(obs.mean()) and n.std == pytest.approx(obs.std())
    z = n.apply(w[0].v_ta, w[0].m_ta)
    assert not z[~w[0].m_ta].any()
    np.testing.assert_allclose(n.invert(z)[w[0].m_ta], w[0].v_ta[w[0].m_ta])
