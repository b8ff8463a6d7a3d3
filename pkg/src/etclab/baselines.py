"""Classical ETC comparison suite.

Discrete-time LQR design via fixed-point Riccati iteration, the five trigger
laws (always / random skip / state norm / output based / state diff), the
reward-vs-savings threshold sweep, and the random-skip evaluation wrapper for
a flat always-communicate policy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import policy as pol
from .envsim import Actuator, Pendulum, linearize_pendulum, wrap_angle

TRIGGER_KINDS = ("always", "random_skip", "state_norm", "output_based",
                 "state_diff")


class RiccatiError(RuntimeError):
    pass


def dare_solve(A, B, Q, R, tol: float = 1e-12, max_iter: int = 100_000):
    """Fixed point of the discrete algebraic Riccati recursion.

    Iterates P <- A'PA - A'PB (R + B'PB)^-1 B'PA + Q until the inf-norm change
    drops below `tol`. Returns (P, K) with K = (R + B'PB)^-1 B'PA, so the
    stabilizing feedback is u = -K x.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    P = Q.copy()
    for _ in range(max_iter):
        btp = B.T @ P
        gain = np.linalg.solve(R + btp @ B, btp @ A)
        P_next = A.T @ P @ A - A.T @ P @ B @ gain + Q
        if np.max(np.abs(P_next - P)) < tol:
            P = P_next
            break
        P = P_next
    else:
        raise RiccatiError("Riccati iteration did not converge")
    btp = B.T @ P
    K = np.linalg.solve(R + btp @ B, btp @ A)
    return P, K


@dataclass
class LqrController:
    K: np.ndarray
    Q_lqr: np.ndarray
    R_lqr: np.ndarray

    def act(self, x) -> np.ndarray:
        return -self.K @ np.asarray(x, dtype=float)


def pendulum_lqr(params=None) -> LqrController:
    """LQR for the linearized pendulum with reward-matched weights.

    Q = diag(1, 0.1) and R = [ctrl_weight] mirror the terms of the control
    reward.
    """
    from .envsim import PendulumParams
    params = params or PendulumParams()
    sys = linearize_pendulum(params)
    Q = np.diag([1.0, 0.1])
    R = np.array([[params.ctrl_weight]])
    _, K = dare_solve(sys.A, sys.B, Q, R)
    return LqrController(K=K, Q_lqr=Q, R_lqr=R)


@dataclass
class TriggerRule:
    """Event-trigger law with threshold xi and last-trigger state xhat."""

    kind: str
    xi: float = 0.0
    xhat: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        if self.xi < 0.0:
            raise ValueError("xi must be >= 0")

    def reset(self, x0) -> None:
        self.xhat = np.asarray(x0, dtype=float).copy()


def trigger_decide(rule: TriggerRule, x, K, rng: np.random.Generator) -> int:
    """Evaluate the trigger law at state x; updates xhat on triggering."""
    x = np.asarray(x, dtype=float)
    if rule.xhat is None:
        rule.reset(x)
    if rule.kind == "always":
        delta = 1
    elif rule.kind == "random_skip":
        delta = 1 if rng.uniform() > rule.xi else 0
    elif rule.kind == "state_norm":
        delta = 1 if np.linalg.norm(x) > rule.xi else 0
    elif rule.kind == "output_based":
        lhs = np.linalg.norm(K @ rule.xhat - K @ x)
        delta = 1 if lhs > rule.xi * np.linalg.norm(K @ x) else 0
    else:  # state_diff
        lhs = np.linalg.norm(rule.xhat - x)
        delta = 1 if lhs > rule.xi * np.linalg.norm(x) else 0
    if delta == 1:
        rule.xhat = x.copy()
    return delta


def triggered_rollout(env: Pendulum, ctrl: LqrController, rule: TriggerRule,
                      rng: np.random.Generator, horizon: int | None = None):
    """One nonlinear-pendulum rollout with LQR + trigger under ZOH.

    Returns (states, applied actions, deltas, control rewards, stable flag).
    """
    horizon = horizon or env.horizon
    state = env.reset(rng)
    actuator = Actuator.create(env.action_dim, env.params.max_torque)
    rule.reset(np.array([wrap_angle(state[0]), state[1]]))
    states, actions, deltas, rewards = [], [], [], []
    stable = True
    for _ in range(horizon):
        x = np.array([wrap_angle(state[0]), state[1]])
        delta = trigger_decide(rule, x, ctrl.K, rng)
        if delta == 1:
            u = np.clip(ctrl.act(x), -actuator.action_limit,
                        actuator.action_limit)
            actuator.held_action = u.copy()
        applied = actuator.held_action
        r = env.reward(state, applied)
        states.append(state.copy())
        actions.append(applied.copy())
        deltas.append(delta)
        rewards.append(r)
        state = env.step(state, applied, rng)
        if abs(state[0]) >= np.pi / 2:
            stable = False
    return states, actions, deltas, rewards, stable


def baseline_sweep(env: Pendulum, kind: str, xi_grid, seed: int,
                   rollouts: int = 10, horizon: int | None = None):
    """Sweep trigger thresholds; returns one result row per (xi, rollout).

    Row fields: rule, xi, seed (per-rollout stream index), gamma savings,
    |sum R_ctrl|, stable flag.
    """
    ctrl = pendulum_lqr(env.params)
    rows = []
    ss = np.random.SeedSequence(seed)
    streams = ss.spawn(len(list(xi_grid)) * rollouts)
    idx = 0
    for xi in xi_grid:
        for j in range(rollouts):
            rng = np.random.default_rng(streams[idx])
            idx += 1
            rule = TriggerRule(kind=kind, xi=float(xi))
            _, _, deltas, rewards, stable = triggered_rollout(
                env, ctrl, rule, rng, horizon)
            rows.append({
                "rule": kind,
                "xi": float(xi),
                "seed": j,
                "gamma": 1.0 - float(np.mean(deltas)),
                "r_ctrl_abs": float(abs(np.sum(rewards))),
                "stable": stable,
            })
    return rows


def summarize_sweep(rows):
    """Aggregate sweep rows per xi: gamma/|R_ctrl| mean and std, all-stable."""
    out = []
    xis = sorted({r["xi"] for r in rows})
    for xi in xis:
        grp = [r for r in rows if r["xi"] == xi]
        out.append({
            "xi": xi,
            "gamma_mean": float(np.mean([r["gamma"] for r in grp])),
            "gamma_std": float(np.std([r["gamma"] for r in grp])),
            "r_ctrl_abs_mean": float(np.mean([r["r_ctrl_abs"] for r in grp])),
            "r_ctrl_abs_std": float(np.std([r["r_ctrl_abs"] for r in grp])),
            "stable": all(r["stable"] for r in grp),
        })
    return out


def random_skip_eval(env: Pendulum, ps: pol.PolicySet, skip_prob: float,
                     rollouts: int, seed: int, option: int = 0,
                     horizon: int | None = None):
    """Evaluate a flat policy while Bernoulli-skipping communication.

    The flat policy always computes a fresh action from the given option's
    policy net; a skip reapplies the held action (ZOH). Returns per-rollout
    stats like trainer.evaluate.
    """
    if not 0.0 <= skip_prob <= 1.0:
        raise ValueError("skip probability must be in [0, 1]")
    horizon = horizon or env.horizon
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    stats = []
    for _ in range(rollouts):
        state = env.reset(rng)
        actuator = Actuator.create(env.action_dim, env.params.max_torque)
        deltas, rewards = [], []
        stable = True
        for _ in range(horizon):
            obs = np.concatenate([state, actuator.held_action])
            skip = rng.uniform() < skip_prob
            if not skip:
                u, _ = pol.sample_action(ps, obs, rng, option)
                actuator.held_action = np.clip(
                    u, -actuator.action_limit, actuator.action_limit)
            applied = actuator.held_action
            rewards.append(env.reward(state, applied))
            deltas.append(0 if skip else 1)
            state = env.step(state, applied, rng)
            if abs(state[0]) >= np.pi / 2:
                stable = False
        stats.append({
            "reward": float(np.sum(rewards)),
            "gamma": 1.0 - float(np.mean(deltas)),
            "stable": stable,
        })
    return stats
