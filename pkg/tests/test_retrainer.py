import numpy as np
import pytest

from etclab import neuralnet as nn
from etclab import policy as pol
from etclab.envsim import LinearSystem
from etclab.retrainer import (
    RetrainBatch,
    RetrainConfig,
    RetrainError,
    SobolSampler,
    comm_probability,
    estimate_gamma,
    loss_action_target,
    loss_comm_target,
    refine_policy_et,
    sobol_points,
    supervised_step,
)
from etclab.verifier import BoxRegion, compose
from tests.test_verifier import linear_policy, make_relu_ps


def sobol_oracle_1d(n):
    """Gray-code radical-inverse construction of the first Sobol dimension.

    Direction numbers v_j = 2^-(j+1); x_i = x_{i-1} XOR v_c where c is the
    index of the lowest zero bit of i-1. [DERIVED] oracle, no library calls.
    """
    bits = 30
    v = [1 << (bits - 1 - j) for j in range(bits)]
    out = np.zeros(n)
    x = 0
    for i in range(1, n):
        c = 0
        k = i - 1
        while k & 1:
            k >>= 1
            c += 1
        x ^= v[c]
        out[i] = x / float(1 << bits)
    return out


class TestSobol:
    def test_first_dimension_matches_oracle(self):
        unit = BoxRegion([0.0], [1.0])
        pts = sobol_points(unit, 64)[:, 0]
        assert np.allclose(pts, sobol_oracle_1d(64), atol=1e-12)

    def test_known_prefix(self):
        box = BoxRegion([0.0, 0.0], [1.0, 1.0])
        pts = sobol_points(box, 4)
        want = np.array([[0.0, 0.0], [0.5, 0.5], [0.75, 0.25], [0.25, 0.75]])
        assert np.allclose(pts, want, atol=1e-12)

    def test_skip_one_starts_at_midpoint(self):
        box = BoxRegion([-2.0, 0.0, 1.0], [2.0, 4.0, 3.0])
        pts = sobol_points(box, 1, skip=1)
        assert np.allclose(pts[0], [0.0, 2.0, 2.0], atol=1e-12)

    def test_points_inside_box(self):
        box = BoxRegion([-0.3, -1.0], [0.1, 2.0])
        pts = sobol_points(box, 128, skip=1)
        assert np.all(pts >= box.lower - 1e-12)
        assert np.all(pts <= box.upper + 1e-12)

    def test_quadrant_balance_beats_uniform(self):
        # 256 unscrambled Sobol points put exactly 64 in each quadrant;
        # uniform sampling typically misses that balance
        box = BoxRegion([0.0, 0.0], [1.0, 1.0])
        pts = sobol_points(box, 256)
        counts = [np.sum((pts[:, 0] < 0.5) & (pts[:, 1] < 0.5)),
                  np.sum((pts[:, 0] >= 0.5) & (pts[:, 1] < 0.5)),
                  np.sum((pts[:, 0] < 0.5) & (pts[:, 1] >= 0.5)),
                  np.sum((pts[:, 0] >= 0.5) & (pts[:, 1] >= 0.5))]
        assert counts == [64, 64, 64, 64]
        worse = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            u = rng.uniform(size=(256, 2))
            dev = max(abs(int(np.sum((u[:, 0] < 0.5) & (u[:, 1] < 0.5))) - 64),
                      abs(int(np.sum((u[:, 0] >= 0.5) & (u[:, 1] >= 0.5))) - 64))
            if dev > 0:
                worse += 1
        assert worse >= 18

    def test_sampler_is_resumable(self):
        box = BoxRegion([0.0], [1.0])
        s = SobolSampler(box, skip=1)
        first = s.draw(4)
        second = s.draw(4)
        combined = sobol_points(box, 8, skip=1)
        assert np.allclose(np.vstack([first, second]), combined, atol=1e-12)

    def test_count_validation(self):
        with pytest.raises(ValueError):
            sobol_points(BoxRegion([0.0], [1.0]), 0)


def constant_logit_ps(z0, z1, obs_dim=2):
    ps = make_relu_ps(0, obs_dim=obs_dim)
    for stream, z in zip(ps.mu_streams, (z0, z1)):
        for w in stream.weights:
            w[...] = 0.0
        for b in stream.biases:
            b[...] = 0.0
        stream.biases[-1][...] = z
    return ps


class TestCommProbability:
    def test_logistic_arithmetic(self):
        # zeta = (0, 0): P = 0.5; zeta = (1, 0): P = logistic(-1)
        ps = constant_logit_ps(0.0, 0.0)
        assert comm_probability(ps, np.zeros(2))[0] == pytest.approx(0.5)
        ps = constant_logit_ps(1.0, 0.0)
        want = 1.0 / (1.0 + np.exp(1.0))
        assert comm_probability(ps, np.zeros(2))[0] == pytest.approx(want)

    def test_matches_softmax(self):
        ps = make_relu_ps(3, obs_dim=2)
        rng = np.random.default_rng(3)
        obs = rng.normal(size=(20, 2))
        p = comm_probability(ps, obs)
        assert np.allclose(p, pol.option_probs(ps, obs)[:, 1], atol=1e-12)


class TestSupervisedLosses:
    def test_comm_loss_value(self):
        # p = 0.5 everywhere, target 0.4: loss = 0.01
        ps = constant_logit_ps(0.0, 0.0)
        value, _ = loss_comm_target(ps, np.zeros((3, 2)), 0.4)
        assert value == pytest.approx(0.01, abs=1e-12)

    def test_comm_loss_zero_gradient_at_target(self):
        # p = logistic(0.4...) chosen to hit the target exactly
        target = 0.4
        z = float(np.log((1 - target) / target))  # zeta0 - zeta1
        ps = constant_logit_ps(z, 0.0)
        value, tapes = loss_comm_target(ps, np.zeros((2, 2)), target)
        assert value == pytest.approx(0.0, abs=1e-15)
        for t in tapes:
            assert np.allclose(nn.tape_flat(t), 0.0, atol=1e-12)

    def test_comm_loss_gradient_fd(self):
        h = 1e-6
        for seed in (0, 1):
            rng = np.random.default_rng(seed)
            ps = make_relu_ps(seed + 10, obs_dim=2)
            for m in ps.mu_streams:
                for b in m.biases:
                    b += rng.normal(scale=0.1, size=b.shape)
            obs = rng.normal(size=(5, 2))
            _, tapes = loss_comm_target(ps, obs, 0.4)
            for net, tape in zip(ps.mu_streams, tapes):
                flat = nn.get_flat_params(net)
                analytic = nn.tape_flat(tape)
                for i in rng.choice(flat.size, size=min(15, flat.size),
                                    replace=False):
                    bumped = flat.copy()
                    bumped[i] += h
                    nn.set_flat_params(net, bumped)
                    up = loss_comm_target(ps, obs, 0.4)[0]
                    bumped[i] -= 2 * h
                    nn.set_flat_params(net, bumped)
                    down = loss_comm_target(ps, obs, 0.4)[0]
                    nn.set_flat_params(net, flat)
                    numeric = (up - down) / (2 * h)
                    assert analytic[i] == pytest.approx(
                        numeric, abs=1e-7 + 1e-4 * abs(numeric))

    def test_action_loss_value(self):
        ps = make_relu_ps(20, obs_dim=2)
        pi = ps.pi_net
        obs = np.zeros((1, 2))
        mean = nn.forward(pi, np.zeros(2))[:1]
        value, _ = loss_action_target(pi, obs, mean[None] + 0.3)
        assert value == pytest.approx(0.09, abs=1e-10)

    def test_action_loss_log_std_untouched(self):
        ps = make_relu_ps(21, obs_dim=2)
        pi = ps.pi_net
        rng = np.random.default_rng(21)
        obs = rng.normal(size=(4, 2))
        _, tape = loss_action_target(pi, obs, rng.normal(size=(4, 1)))
        assert np.allclose(tape.d_log_std, 0.0, atol=1e-15)

    def test_action_loss_gradient_fd(self):
        h = 1e-6
        rng = np.random.default_rng(22)
        ps = make_relu_ps(22, obs_dim=2)
        pi = ps.pi_net
        for b in pi.biases:
            b += rng.normal(scale=0.1, size=b.shape)
        obs = rng.normal(size=(5, 2))
        target = rng.normal(size=(5, 1))
        _, tape = loss_action_target(pi, obs, target)
        flat = nn.get_flat_params(pi)
        analytic = nn.tape_flat(tape)
        for i in rng.choice(flat.size, size=min(20, flat.size),
                            replace=False):
            bumped = flat.copy()
            bumped[i] += h
            nn.set_flat_params(pi, bumped)
            up = loss_action_target(pi, obs, target)[0]
            bumped[i] -= 2 * h
            nn.set_flat_params(pi, bumped)
            down = loss_action_target(pi, obs, target)[0]
            nn.set_flat_params(pi, flat)
            numeric = (up - down) / (2 * h)
            assert analytic[i] == pytest.approx(
                numeric, abs=1e-7 + 1e-4 * abs(numeric))

    def test_supervised_step_descends(self):
        rng = np.random.default_rng(23)
        ps = make_relu_ps(23, obs_dim=2)
        cfg = RetrainConfig(lr_mu=1e-2, lr_pi=1e-2)
        batch = RetrainBatch(
            points_crit=rng.normal(size=(6, 2)),
            u_crit=rng.normal(size=(6, 1)),
            points_commsav=rng.normal(size=(6, 2)),
        )
        adam_mu = [nn.Adam(lr=cfg.lr_mu) for _ in ps.mu_streams]
        adam_pi = nn.Adam(lr=cfg.lr_pi)
        before_comm = loss_comm_target(ps, batch.points_commsav,
                                       cfg.target_comm_sav)[0]
        before_act = loss_action_target(ps.pi_net, batch.points_crit,
                                        batch.u_crit)[0]
        for _ in range(150):
            supervised_step(ps, batch, adam_mu, adam_pi, cfg)
        after_comm = loss_comm_target(ps, batch.points_commsav,
                                      cfg.target_comm_sav)[0]
        after_act = loss_action_target(ps.pi_net, batch.points_crit,
                                       batch.u_crit)[0]
        assert after_comm < before_comm
        assert after_act < before_act


class TestRefineLoop:
    def scalar_system(self, a=2.0, b=1.0):
        return LinearSystem([[a]], [[b]], 0.05)

    def test_already_certified_stops_immediately(self):
        # stabilizing always-communicate policy is invariant from the start
        sys = self.scalar_system()
        ps = linear_policy(1, 1, [0.0, 0.0], -1.0, [0.0, 0.0], 0.0,
                           [-2.0, 0.0], 0.0)
        res = refine_policy_et(ps, sys, BoxRegion([-0.4], [0.4]), 1.0,
                               RetrainConfig(max_outer_epochs=3))
        assert res.certified
        assert res.epochs_used == 0
        assert res.history == []

    def test_not_control_invariant_raises(self):
        # x' = 4x + u, |u| <= 1: x = 1 cannot be kept in [-1, 1], and the
        # always-hold zero policy produces such critical points
        sys = self.scalar_system(a=4.0)
        ps = linear_policy(1, 1, [0.0, 0.0], 1.0, [0.0, 0.0], 0.0,
                           [0.0, 0.0], 0.0)
        with pytest.raises(RetrainError):
            refine_policy_et(ps, sys, BoxRegion([-1.0], [1.0]), 1.0,
                             RetrainConfig(max_outer_epochs=2,
                                           sobol_count=32,
                                           steps_per_epoch=10))

    def test_repairs_random_policy(self):
        sys = self.scalar_system(a=1.2, b=0.8)
        M = BoxRegion([-0.5], [0.5])
        ps = make_relu_ps(40, obs_dim=2, hidden=(8, 8))
        cfg = RetrainConfig(max_outer_epochs=20, sobol_count=128,
                            steps_per_epoch=200)
        res = refine_policy_et(ps, sys, M, 1.0, cfg, seed=0)
        assert res.certified
        assert res.epochs_used <= cfg.max_outer_epochs
        # independent re-check of the certificate
        from etclab.verifier import check_stability_et
        points, _ = check_stability_et(res.policy, sys, M, 1.0)
        assert points == []

    def test_determinism(self):
        sys = self.scalar_system(a=1.2, b=0.8)
        M = BoxRegion([-0.5], [0.5])
        cfg = RetrainConfig(max_outer_epochs=4, sobol_count=32,
                            steps_per_epoch=30)
        runs = []
        for _ in range(2):
            ps = make_relu_ps(41, obs_dim=2, hidden=(4,))
            res = refine_policy_et(ps, sys, M, 1.0, cfg, seed=5)
            runs.append((res.certified,
                         [(r.n_crit, r.n_commsav, r.certified,
                           r.gamma_estimate) for r in res.history],
                         [nn.get_flat_params(m).copy()
                          for m in res.policy.mu_streams]))
        assert runs[0][0] == runs[1][0]
        assert runs[0][1] == runs[1][1]
        for p1, p2 in zip(runs[0][2], runs[1][2]):
            assert np.array_equal(p1, p2)


class TestGammaEstimate:
    def test_always_hold_policy(self):
        # Z = +1 everywhere on a marginally stable plant: never communicates
        sys = LinearSystem([[0.9]], [[1.0]], 0.05)
        ps = linear_policy(1, 1, [0.0, 0.0], 1.0, [0.0, 0.0], 0.0,
                           [0.0, 0.0], 0.0)
        rng = np.random.default_rng(0)
        g = estimate_gamma(ps, sys, BoxRegion([-0.5], [0.5]), 1.0, rng,
                           rollouts=3, horizon=50)
        assert g == pytest.approx(1.0)

    def test_always_communicate_policy(self):
        sys = LinearSystem([[0.9]], [[1.0]], 0.05)
        ps = linear_policy(1, 1, [0.0, 0.0], -1.0, [0.0, 0.0], 0.0,
                           [-0.5, 0.0], 0.0)
        rng = np.random.default_rng(0)
        g = estimate_gamma(ps, sys, BoxRegion([-0.5], [0.5]), 1.0, rng,
                           rollouts=3, horizon=50)
        assert g == pytest.approx(0.0)
