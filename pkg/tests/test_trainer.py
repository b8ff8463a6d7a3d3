import numpy as np
import pytest

from etclab import neuralnet as nn
from etclab import policy as pol
from etclab.envsim import Pendulum
from etclab.trainer import (
    TrainConfig,
    batch_gae,
    clip,
    collect_rollouts,
    gae,
    loss_mu,
    loss_pi,
    loss_q,
    option_advantage,
    train,
)


def brute_force_gae(rewards, values, next_values, ends, terminals,
                    gamma, lam):
    """Direct double-sum definition: adv_t = sum_l (gamma*lam)^l delta_{t+l},
    truncated after the first episode end at or beyond t."""
    n = len(rewards)
    deltas = [rewards[t] + gamma * (0.0 if terminals[t] else next_values[t])
              - values[t] for t in range(n)]
    adv = np.zeros(n)
    for t in range(n):
        total = 0.0
        for l in range(n - t):
            total += (gamma * lam) ** l * deltas[t + l]
            if ends[t + l]:
                break
        adv[t] = total
    return adv


def make_ps(seed=0, obs_dim=3, hidden=(6, 6), semantics=pol.ETC_SEMANTICS):
    rng = np.random.default_rng(seed)
    return pol.make_policy_set(obs_dim, 1, 2.0, rng, hidden=hidden,
                               semantics=semantics)


def constant_logit_ps(z0, z1):
    ps = make_ps()
    for stream, z in zip(ps.mu_streams, (z0, z1)):
        for w in stream.weights:
            w[...] = 0.0
        for b in stream.biases:
            b[...] = 0.0
        stream.biases[-1][...] = z
    return ps


class TestClip:
    def test_examples(self):
        assert clip(5.0, 0.0, 2.0) == 2.0
        assert clip(-1.0, 0.0, 2.0) == 0.0
        assert clip(1.0, 0.0, 2.0) == 1.0

    def test_invalid_interval(self):
        with pytest.raises(ValueError):
            clip(1.0, 2.0, 0.0)


class TestGae:
    def test_matches_brute_force(self):
        # [DERIVED] oracle: direct truncated double sum, lengths 1..12
        rng = np.random.default_rng(0)
        for n in range(1, 13):
            for _ in range(20):
                r = rng.normal(size=n)
                v = rng.normal(size=n)
                nv = rng.normal(size=n)
                ends = rng.uniform(size=n) < 0.3
                terms = ends & (rng.uniform(size=n) < 0.5)
                got = gae(r, v, nv, ends, terms, 0.99, 0.95)
                want = brute_force_gae(r, v, nv, ends, terms, 0.99, 0.95)
                assert np.max(np.abs(got - want)) < 1e-10

    def test_lambda_zero_is_td_error(self):
        rng = np.random.default_rng(1)
        n = 8
        r, v, nv = rng.normal(size=(3, n))
        ends = np.zeros(n, dtype=bool)
        got = gae(r, v, nv, ends, ends, 0.9, 0.0)
        assert np.allclose(got, r + 0.9 * nv - v, atol=1e-12)

    def test_lambda_one_zero_values_is_return_to_go(self):
        rng = np.random.default_rng(2)
        n = 6
        r = rng.normal(size=n)
        zeros = np.zeros(n)
        ends = np.zeros(n, dtype=bool)
        got = gae(r, zeros, zeros, ends, ends, 0.9, 1.0)
        want = [sum(0.9 ** (l - t) * r[l] for l in range(t, n))
                for t in range(n)]
        assert np.allclose(got, want, atol=1e-12)

    def test_episode_end_truncates(self):
        r = np.array([1.0, 1.0])
        zeros = np.zeros(2)
        ends = np.array([True, False])
        got = gae(r, zeros, zeros, ends, np.zeros(2, dtype=bool), 0.9, 0.9)
        assert got[0] == pytest.approx(1.0)  # no leakage from t=1
        assert got[1] == pytest.approx(1.0)

    def test_batch_gae_segments_independent(self):
        rng = np.random.default_rng(3)
        cfg = TrainConfig(num_envs=2, epoch_transitions=8)

        class FakeBatch:
            def __len__(self):
                return self.reward.shape[0]

        fb = FakeBatch()
        fb.reward = rng.normal(size=8)
        fb.value = rng.normal(size=8)
        fb.next_value = rng.normal(size=8)
        fb.episode_end = np.zeros(8, dtype=bool)
        fb.terminal = np.zeros(8, dtype=bool)
        fb.obs = np.zeros((8, 3))
        got = batch_gae(fb, cfg, 2)
        for e in range(2):
            s = slice(4 * e, 4 * e + 4)
            want = gae(fb.reward[s], fb.value[s], fb.next_value[s],
                       fb.episode_end[s], fb.terminal[s],
                       cfg.gamma, cfg.lambda_gae)
            assert np.allclose(got[s], want, atol=1e-12)


class TestOptionAdvantage:
    def test_worked_example(self):
        adv = option_advantage(np.array([[3.0, 5.0]]), np.array([0]))
        assert adv[0] == pytest.approx(-2.0)

    def test_nonpositive_and_zero_iff_greedy(self):
        rng = np.random.default_rng(4)
        q = rng.normal(size=(200, 3))
        o = rng.integers(0, 3, size=200)
        adv = option_advantage(q, o)
        assert np.all(adv <= 0.0)
        greedy = o == np.argmax(q, axis=1)
        assert np.array_equal(adv == 0.0, greedy)


class TestLossExamples:
    def test_ratio_one_surrogate_is_mean_advantage(self):
        ps = constant_logit_ps(0.3, -0.2)
        obs = np.zeros((4, 3))
        options = np.array([0, 1, 0, 1])
        logp = np.log(pol.option_probs(ps, np.zeros(3)))[options]
        adv = np.array([0.5, -1.0, 2.0, 0.25])
        value, _ = loss_mu(ps, obs, options, logp, adv, 0.2, 0.0)
        assert value == pytest.approx(np.mean(adv), abs=1e-10)

    def test_ratio_two_negative_advantage(self):
        # ratio 2, A = -1, eps = 0.2: min(2*-1, 1.2*-1) = -2
        ps = constant_logit_ps(0.0, 0.0)
        logp = np.log(0.5)
        old = logp - np.log(2.0)
        value, _ = loss_mu(ps, np.zeros((1, 3)), [0], [old], [-1.0], 0.2, 0.0)
        assert value == pytest.approx(-2.0, abs=1e-10)

    def test_ratio_clipped_positive_advantage(self):
        # ratio 1.5, A = 1, eps = 0.2: min(1.5, 1.2) = 1.2
        ps = constant_logit_ps(0.0, 0.0)
        logp = np.log(0.5)
        old = logp - np.log(1.5)
        value, _ = loss_mu(ps, np.zeros((1, 3)), [0], [old], [1.0], 0.2, 0.0)
        assert value == pytest.approx(1.2, abs=1e-10)

    def test_pi_surrogate_examples(self):
        ps = make_ps(seed=5)
        pi = ps.pi_net
        obs = np.zeros((1, 3))
        head = nn.forward(pi, np.zeros(3))
        mean, log_std = head[:1], head[1:]
        u = mean.copy()
        logp = pol.gaussian_log_prob(mean, log_std, u)
        # ratio 2, A = -1 -> -2; ratio 1.5, A = 1 -> 1.2
        v1, _ = loss_pi(pi, obs, u[None], [logp - np.log(2.0)], [-1.0], 0.2)
        v2, _ = loss_pi(pi, obs, u[None], [logp - np.log(1.5)], [1.0], 0.2)
        assert v1 == pytest.approx(-2.0, abs=1e-10)
        assert v2 == pytest.approx(1.2, abs=1e-10)

    def test_q_loss_scalar(self):
        ps = make_ps(seed=6)
        obs = np.zeros(3)
        q0 = pol.q_values(ps, obs)[0]
        value, _ = loss_q(ps, obs[None], [0], [q0 - 2.0])
        assert value == pytest.approx(4.0, abs=1e-10)


class TestLossGradients:
    """Finite-difference checks of the analytic loss gradients."""

    H = 1e-6

    def _fd_check(self, nets, tapes, evaluate, rtol=2e-4):
        for net, tape in zip(nets, tapes):
            flat = nn.get_flat_params(net)
            analytic = nn.tape_flat(tape)
            rng = np.random.default_rng(99)
            for i in rng.choice(flat.size, size=min(25, flat.size),
                                replace=False):
                bumped = flat.copy()
                bumped[i] += self.H
                nn.set_flat_params(net, bumped)
                up = evaluate()
                bumped[i] -= 2 * self.H
                nn.set_flat_params(net, bumped)
                down = evaluate()
                nn.set_flat_params(net, flat)
                numeric = (up - down) / (2 * self.H)
                assert analytic[i] == pytest.approx(
                    numeric, abs=1e-6 + rtol * abs(numeric))

    def _mu_setup(self, seed):
        rng = np.random.default_rng(seed)
        ps = make_ps(seed=seed)
        obs = rng.normal(size=(6, 3))
        options = rng.integers(0, 2, size=6)
        logits = pol.option_logits(ps, obs)
        p = pol.option_probs(ps, obs)
        logp = np.log(p[np.arange(6), options])
        # offsets keep every ratio well inside (1-eps, 1+eps) or beyond it,
        # away from the clip kink where the loss is not differentiable
        old = logp - rng.uniform(-0.15, 0.15, size=6)
        adv = rng.normal(size=6) + 0.3
        return ps, obs, options, old, adv

    @pytest.mark.parametrize("mode", ["bonus", "literal"])
    def test_mu_gradient(self, mode):
        for seed in (0, 1, 2):
            ps, obs, options, old, adv = self._mu_setup(seed)
            _, tapes = loss_mu(ps, obs, options, old, adv, 0.2, 0.01, mode)
            self._fd_check(
                ps.mu_streams, tapes,
                lambda: loss_mu(ps, obs, options, old, adv, 0.2, 0.01,
                                mode)[0])

    def test_pi_gradient(self):
        for seed in (3, 4, 5):
            rng = np.random.default_rng(seed)
            ps = make_ps(seed=seed)
            pi = ps.pi_net
            obs = rng.normal(size=(6, 3))
            head = nn.forward(pi, obs)
            u = head[:, :1] + 0.3 * rng.normal(size=(6, 1))
            logp = np.array([pol.gaussian_log_prob(head[i, :1], head[i, 1:],
                                                   u[i]) for i in range(6)])
            old = logp - rng.uniform(-0.15, 0.15, size=6)
            adv = rng.normal(size=6)
            _, tape = loss_pi(pi, obs, u, old, adv, 0.2)
            self._fd_check(
                [pi], [tape],
                lambda: loss_pi(pi, obs, u, old, adv, 0.2)[0])

    def test_q_gradient(self):
        for seed in (6, 7):
            rng = np.random.default_rng(seed)
            ps = make_ps(seed=seed)
            obs = rng.normal(size=(8, 3))
            options = rng.integers(0, 2, size=8)
            targets = rng.normal(size=8)
            _, tapes = loss_q(ps, obs, options, targets)
            self._fd_check(
                ps.q_streams, tapes,
                lambda: loss_q(ps, obs, options, targets)[0])


class TestEntropySchedule:
    def test_decade_steps(self):
        cfg = TrainConfig(tau0=0.01)
        assert cfg.tau_at(1) == pytest.approx(0.01)
        assert cfg.tau_at(1000) == pytest.approx(0.01)
        assert cfg.tau_at(1001) == pytest.approx(0.001)
        assert cfg.tau_at(2001) == pytest.approx(0.0001)


class TestConfigValidation:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            TrainConfig(gamma=0.0)
        with pytest.raises(ValueError):
            TrainConfig(lambda_comm=-0.1)
        with pytest.raises(ValueError):
            TrainConfig(mode="bogus")
        with pytest.raises(ValueError):
            TrainConfig(epoch_transitions=100, num_envs=8)


class TestRollouts:
    def small_cfg(self, **kw):
        base = dict(epoch_transitions=64, num_envs=4, epochs=2,
                    hidden=(6, 6), optimizer_iters=2, batch_size=16)
        base.update(kw)
        return TrainConfig(**base)

    def test_gamma_savings_bookkeeping(self):
        env = Pendulum()
        cfg = self.small_cfg()
        rng = np.random.default_rng(0)
        # always-hold policy: Gamma = 1
        ps = constant_logit_ps(50.0, -50.0)
        batch = collect_rollouts(env, ps, cfg, rng)
        assert np.all(batch.delta == 0)
        # always-communicate policy: Gamma = 0
        ps = constant_logit_ps(-50.0, 50.0)
        batch = collect_rollouts(env, ps, cfg, rng)
        assert np.all(batch.delta == 1)
        assert np.all(batch.has_action)

    def test_reward_composition(self):
        env = Pendulum()
        cfg = self.small_cfg(lambda_comm=0.5)
        rng = np.random.default_rng(1)
        ps = make_ps(seed=1)
        batch = collect_rollouts(env, ps, cfg, rng)
        assert np.allclose(batch.reward, batch.r_ctrl - 0.5 * batch.delta,
                           atol=1e-12)

    def test_periodic_mode_always_communicates(self):
        env = Pendulum()
        cfg = self.small_cfg(mode="periodic")
        rng = np.random.default_rng(2)
        ps = make_ps(seed=2, semantics=pol.PERIODIC_SEMANTICS)
        batch = collect_rollouts(env, ps, cfg, rng)
        assert np.all(batch.delta == 1)
        assert set(np.unique(batch.option)) == {0, 1}

    def test_pi_untouched_on_zoh(self):
        env = Pendulum()
        cfg = self.small_cfg()
        rng = np.random.default_rng(3)
        ps = constant_logit_ps(50.0, -50.0)
        before = ps.pi_eval_count
        collect_rollouts(env, ps, cfg, rng)
        assert ps.pi_eval_count == before


class TestTrainLoop:
    def small_cfg(self, **kw):
        base = dict(epoch_transitions=64, num_envs=4, epochs=2,
                    hidden=(6, 6), optimizer_iters=2, batch_size=16)
        base.update(kw)
        return TrainConfig(**base)

    def test_zero_epochs_returns_initialized(self):
        env = Pendulum(horizon=16)
        res = train(env, self.small_cfg(epochs=0), seed=0)
        assert res.metrics == []
        assert res.policy.option_count == 2

    def test_fixed_seed_bit_identical(self):
        env = Pendulum(horizon=16)
        cfg = self.small_cfg()
        r1 = train(env, cfg, seed=7)
        r2 = train(env, cfg, seed=7)
        assert [m.mean_reward for m in r1.metrics] == \
               [m.mean_reward for m in r2.metrics]
        for a, b in zip(r1.policy.mu_streams, r2.policy.mu_streams):
            assert np.array_equal(nn.get_flat_params(a), nn.get_flat_params(b))
        for a, b in zip(r1.policy.q_streams, r2.policy.q_streams):
            assert np.array_equal(nn.get_flat_params(a), nn.get_flat_params(b))

    def test_best_checkpoint_tracks_batch_reward(self):
        env = Pendulum(horizon=16)
        res = train(env, self.small_cfg(epochs=3), seed=1)
        assert res.best_reward == pytest.approx(
            max(m.mean_reward for m in res.metrics))

    def test_metrics_gamma_in_range(self):
        env = Pendulum(horizon=16)
        res = train(env, self.small_cfg(), seed=2)
        for m in res.metrics:
            assert 0.0 <= m.gamma_savings <= 1.0
            assert sum(m.option_fracs) == pytest.approx(1.0)

    def test_alternating_mode_runs(self):
        env = Pendulum(horizon=16)
        res = train(env, self.small_cfg(mode="alternating", alt_period=1),
                    seed=3)
        assert len(res.metrics) == 2
