import numpy as np
import pytest
from scipy.linalg import solve_discrete_are

from etclab import policy as pol
from etclab.baselines import (
    TRIGGER_KINDS,
    TriggerRule,
    baseline_sweep,
    dare_solve,
    pendulum_lqr,
    random_skip_eval,
    summarize_sweep,
    trigger_decide,
    triggered_rollout,
)
from etclab.envsim import Pendulum, linearize_pendulum


class TestDareSolve:
    def test_scalar_golden_ratio(self):
        # A=B=Q=R=1: P = 1 + P - P^2/(1+P)  =>  P^2 - P - 1 = 0
        # [DERIVED] closed form: P = (1+sqrt(5))/2, K = P/(1+P)
        P, K = dare_solve([[1.0]], [[1.0]], [[1.0]], [[1.0]])
        golden = (1.0 + np.sqrt(5.0)) / 2.0
        assert P[0, 0] == pytest.approx(golden, abs=1e-10)
        assert K[0, 0] == pytest.approx(golden / (1.0 + golden), abs=1e-10)

    def test_zero_dynamics(self):
        # A=0: recursion collapses to P = Q immediately, K = 0
        P, K = dare_solve([[0.0]], [[1.0]], [[2.0]], [[1.0]])
        assert P[0, 0] == pytest.approx(2.0, abs=1e-12)
        assert K[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_pendulum_residual_and_stability(self):
        sys = linearize_pendulum(Pendulum().params)
        Q = np.diag([1.0, 0.1])
        R = np.array([[0.1]])
        P, K = dare_solve(sys.A, sys.B, Q, R)
        btp = sys.B.T @ P
        res = (sys.A.T @ P @ sys.A
               - sys.A.T @ P @ sys.B @ np.linalg.solve(R + btp @ sys.B,
                                                       btp @ sys.A)
               + Q - P)
        assert np.max(np.abs(res)) < 1e-8
        closed = sys.A - sys.B @ K
        assert np.max(np.abs(np.linalg.eigvals(closed))) < 1.0

    def test_random_systems_match_reference(self):
        # [DERIVED] oracle: scipy solve_discrete_are on stabilizable systems
        rng = np.random.default_rng(0)
        checked = 0
        for _ in range(40):
            n = int(rng.integers(1, 4))
            m = int(rng.integers(1, 3))
            A = rng.normal(scale=0.6, size=(n, n))
            B = rng.normal(size=(n, m))
            Q = np.eye(n)
            R = np.eye(m)
            P, K = dare_solve(A, B, Q, R)
            ref = solve_discrete_are(A, B, Q, R)
            assert np.max(np.abs(P - ref)) < 1e-7
            checked += 1
        assert checked == 40


class TestTriggerRules:
    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            TriggerRule(kind="nope")
        with pytest.raises(ValueError):
            TriggerRule(kind="always", xi=-0.1)

    def test_always(self):
        rng = np.random.default_rng(1)
        rule = TriggerRule(kind="always")
        K = np.array([[1.0, 0.5]])
        for _ in range(10):
            assert trigger_decide(rule, rng.normal(size=2), K, rng) == 1

    def test_random_skip_extremes(self):
        rng = np.random.default_rng(2)
        K = np.array([[1.0, 0.5]])
        always = TriggerRule(kind="random_skip", xi=0.0)
        never = TriggerRule(kind="random_skip", xi=1.0)
        for _ in range(50):
            x = rng.normal(size=2)
            assert trigger_decide(always, x, K, rng) == 1
            assert trigger_decide(never, x, K, rng) == 0

    def test_state_norm_threshold(self):
        rng = np.random.default_rng(3)
        K = np.array([[1.0, 0.5]])
        rule = TriggerRule(kind="state_norm", xi=1.0)
        assert trigger_decide(rule, np.array([2.0, 0.0]), K, rng) == 1
        assert trigger_decide(rule, np.array([0.5, 0.0]), K, rng) == 0

    def test_state_diff_worked_example(self):
        # xhat = (1, 0); at x = (1, 0) the difference is 0 -> no trigger;
        # at x = (0.4, 0), |xhat - x| = 0.6 > 0.5 * 0.4 -> trigger
        rng = np.random.default_rng(4)
        K = np.array([[1.0, 0.5]])
        rule = TriggerRule(kind="state_diff", xi=0.5)
        rule.reset(np.array([1.0, 0.0]))
        assert trigger_decide(rule, np.array([1.0, 0.0]), K, rng) == 0
        assert trigger_decide(rule, np.array([0.4, 0.0]), K, rng) == 1
        # triggering moved xhat to (0.4, 0)
        assert np.array_equal(rule.xhat, [0.4, 0.0])

    def test_output_based_worked_example(self):
        # K = [1, 0], xhat = (1, 0), x = (0.9, 5): |K xhat - K x| = 0.1,
        # xi |K x| = 0.2 * 0.9 = 0.18 -> no trigger (state_diff would fire)
        rng = np.random.default_rng(5)
        K = np.array([[1.0, 0.0]])
        rule = TriggerRule(kind="output_based", xi=0.2)
        rule.reset(np.array([1.0, 0.0]))
        assert trigger_decide(rule, np.array([0.9, 5.0]), K, rng) == 0

    def test_xhat_updates_only_on_trigger(self):
        rng = np.random.default_rng(6)
        K = np.array([[1.0, 0.5]])
        rule = TriggerRule(kind="state_norm", xi=1.0)
        rule.reset(np.array([0.1, 0.1]))
        trigger_decide(rule, np.array([0.2, 0.0]), K, rng)  # no trigger
        assert np.array_equal(rule.xhat, [0.1, 0.1])
        trigger_decide(rule, np.array([3.0, 0.0]), K, rng)  # trigger
        assert np.array_equal(rule.xhat, [3.0, 0.0])


class TestRollouts:
    def test_always_gives_zero_savings_and_stabilizes(self):
        env = Pendulum()
        ctrl = pendulum_lqr(env.params)
        rng = np.random.default_rng(0)
        rule = TriggerRule(kind="always")
        _, _, deltas, rewards, stable = triggered_rollout(env, ctrl, rule, rng)
        assert np.mean(deltas) == 1.0
        assert stable

    def test_zoh_bookkeeping(self):
        env = Pendulum()
        ctrl = pendulum_lqr(env.params)
        rng = np.random.default_rng(1)
        rule = TriggerRule(kind="state_diff", xi=0.3)
        _, actions, deltas, _, _ = triggered_rollout(env, ctrl, rule, rng)
        for k in range(1, len(deltas)):
            if deltas[k] == 0:
                assert np.array_equal(actions[k], actions[k - 1])

    def test_sweep_row_count_and_monotone_savings(self):
        env = Pendulum()
        rows = baseline_sweep(env, "random_skip", [0.0, 0.5, 1.0], seed=0,
                              rollouts=4, horizon=50)
        assert len(rows) == 12
        summary = summarize_sweep(rows)
        gammas = [s["gamma_mean"] for s in summary]
        assert gammas[0] == pytest.approx(0.0)
        assert gammas[2] == pytest.approx(1.0)
        assert gammas[0] < gammas[1] < gammas[2]

    def test_sweep_deterministic(self):
        env = Pendulum()
        r1 = baseline_sweep(env, "state_diff", [0.2], seed=5, rollouts=3,
                            horizon=40)
        r2 = baseline_sweep(env, "state_diff", [0.2], seed=5, rollouts=3,
                            horizon=40)
        assert r1 == r2

    def test_all_rules_run(self):
        env = Pendulum()
        for kind in TRIGGER_KINDS:
            rows = baseline_sweep(env, kind, [0.1], seed=2, rollouts=2,
                                  horizon=30)
            assert len(rows) == 2


class TestRandomSkipEval:
    def make_flat_policy(self):
        rng = np.random.default_rng(7)
        return pol.make_policy_set(3, 1, 2.0, rng, hidden=(6, 6),
                                   semantics=pol.PERIODIC_SEMANTICS)

    def test_skip_zero_always_communicates(self):
        env = Pendulum(horizon=40)
        ps = self.make_flat_policy()
        stats = random_skip_eval(env, ps, 0.0, rollouts=3, seed=0)
        assert all(s["gamma"] == 0.0 for s in stats)

    def test_skip_one_never_communicates(self):
        env = Pendulum(horizon=40)
        ps = self.make_flat_policy()
        stats = random_skip_eval(env, ps, 1.0, rollouts=3, seed=0)
        assert all(s["gamma"] == 1.0 for s in stats)

    def test_invalid_probability(self):
        env = Pendulum(horizon=40)
        ps = self.make_flat_policy()
        with pytest.raises(ValueError):
            random_skip_eval(env, ps, 1.5, rollouts=1, seed=0)
