"""Joint PPO training of the communication and control policies.

Implements the full epoch loop: rollout collection under ZOH semantics,
generalized advantage estimation for the control policy, the greedy option
advantage for the policy over options, clipped-surrogate updates with entropy
scheduling for both policies, and Q regression against collection-time
targets. Also provides the periodic (two-NN-options) mode and the
alternating-optimization baseline mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import neuralnet as nn
from . import policy as pol
from .envsim import Actuator, Pendulum


class TrainingDiverged(RuntimeError):
    pass


def clip(a: float, b: float, c: float) -> float:
    """clip(a, b, c): a limited to [b, c]; requires c >= b."""
    if c < b:
        raise ValueError("clip requires c >= b")
    if a < b:
        return b
    if a > c:
        return c
    return a


@dataclass
class TrainConfig:
    gamma: float = 0.9
    lambda_comm: float = 0.0
    lambda_gae: float = 0.95
    clip_eps: float = 0.2
    tau0: float = 1.0
    entropy_every: int = 1000
    entropy_factor: float = 10.0
    entropy_mode: str = "bonus"  # "bonus" or "literal"
    epoch_transitions: int = 2048
    epochs: int = 500
    optimizer_iters: int = 10
    batch_size: int = 64
    num_envs: int = 8
    lr_mu: float = 3e-4
    lr_pi: float = 3e-4
    lr_q: float = 1e-3
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    init_log_std: float = -0.5
    normalize_adv: bool = True
    mode: str = "etc"  # "etc" | "periodic" | "alternating"
    alt_period: int = 25

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.lambda_comm < 0.0:
            raise ValueError("lambda_comm must be >= 0")
        if not 0.0 <= self.lambda_gae <= 1.0:
            raise ValueError("lambda_gae must be in [0, 1]")
        if self.clip_eps <= 0.0:
            raise ValueError("clip_eps must be > 0")
        if self.mode not in ("etc", "periodic", "alternating"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.entropy_mode not in ("bonus", "literal"):
            raise ValueError(f"unknown entropy mode {self.entropy_mode!r}")
        if self.epoch_transitions % self.num_envs != 0:
            raise ValueError("epoch_transitions must divide evenly over num_envs")

    def semantics(self) -> tuple[str, ...]:
        return pol.PERIODIC_SEMANTICS if self.mode == "periodic" else pol.ETC_SEMANTICS

    def tau_at(self, epoch: int) -> float:
        """Entropy coefficient in effect during 1-based `epoch`."""
        k = (epoch - 1) // self.entropy_every
        return self.tau0 / (self.entropy_factor ** k)


@dataclass
class RolloutBatch:
    """Collected transitions, flattened env-major from (steps, envs) arrays."""

    obs: np.ndarray          # (N, D)
    option: np.ndarray       # (N,) int
    action: np.ndarray       # (N, m); zeros on no-action steps
    has_action: np.ndarray   # (N,) bool: an action was sampled from pi
    logp_u: np.ndarray       # (N,); 0 where has_action is False
    logp_o: np.ndarray       # (N,)
    reward: np.ndarray       # (N,) composed reward r_ctrl - lambda * delta
    r_ctrl: np.ndarray       # (N,)
    delta: np.ndarray        # (N,) int
    next_obs: np.ndarray     # (N, D)
    episode_end: np.ndarray  # (N,) bool
    terminal: np.ndarray     # (N,) bool (true terminations; unused by pendulum)
    q_snap: np.ndarray       # (N, K) collection-time Q estimates
    value: np.ndarray        # (N,) collection-time V(obs)
    next_value: np.ndarray   # (N,) collection-time V(next_obs)

    def __len__(self) -> int:
        return self.obs.shape[0]


def collect_rollouts(env: Pendulum, ps: pol.PolicySet, cfg: TrainConfig,
                     rng: np.random.Generator) -> RolloutBatch:
    """Sample exactly cfg.epoch_transitions transitions under the current nets."""
    n_envs = cfg.num_envs
    steps = cfg.epoch_transitions // n_envs
    k = ps.option_count
    d = env.state_dim + env.action_dim

    states = [env.reset(rng) for _ in range(n_envs)]
    actuators = [Actuator.create(env.action_dim, env.params.max_torque)
                 for _ in range(n_envs)]
    ep_steps = np.zeros(n_envs, dtype=int)

    shape = (steps, n_envs)
    out = {
        "obs": np.zeros(shape + (d,)), "option": np.zeros(shape, dtype=int),
        "action": np.zeros(shape + (env.action_dim,)),
        "has_action": np.zeros(shape, dtype=bool),
        "logp_u": np.zeros(shape), "logp_o": np.zeros(shape),
        "reward": np.zeros(shape), "r_ctrl": np.zeros(shape),
        "delta": np.zeros(shape, dtype=int),
        "next_obs": np.zeros(shape + (d,)),
        "episode_end": np.zeros(shape, dtype=bool),
        "terminal": np.zeros(shape, dtype=bool),
        "q_snap": np.zeros(shape + (k,)),
        "value": np.zeros(shape), "next_value": np.zeros(shape),
    }

    def observe():
        return np.stack([np.concatenate([states[e], actuators[e].held_action])
                         for e in range(n_envs)])

    obs = observe()
    for t in range(steps):
        probs = pol.option_probs(ps, obs)
        qs = pol.q_values(ps, obs)
        if not (np.all(np.isfinite(probs)) and np.all(np.isfinite(qs))):
            raise TrainingDiverged("non-finite network output during rollout")
        values = np.sum(probs * qs, axis=1)
        options = np.array([rng.choice(k, p=probs[e]) for e in range(n_envs)])
        logp_o = np.log(probs[np.arange(n_envs), options])

        actions = np.zeros((n_envs, env.action_dim))
        has_action = np.zeros(n_envs, dtype=bool)
        logp_u = np.zeros(n_envs)
        # evaluate each pi net only on the envs whose option selected it
        for o in range(k):
            if ps.semantics[o] != "net":
                continue
            idx = np.nonzero(options == o)[0]
            if idx.size == 0:
                continue
            pi = ps.pi_net_for(o)
            ps.pi_eval_count += idx.size
            head = nn.forward(pi, obs[idx])
            m = pi.head_dim
            mean, log_std = head[:, :m], head[:, m:]
            u = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
            z = (u - mean) / np.exp(log_std)
            actions[idx] = u
            has_action[idx] = True
            logp_u[idx] = (-0.5 * np.sum(z * z, axis=1) - np.sum(log_std, axis=1)
                           - 0.5 * pol.LOG_2PI * m)

        for e in range(n_envs):
            o = int(options[e])
            delta, transmit = pol.apply_option(
                ps, obs[e], o, actions[e] if has_action[e] else None)
            if delta == 1:
                actuators[e].held_action = np.asarray(transmit, dtype=float).copy()
            applied = actuators[e].held_action
            r_ctrl = env.reward(states[e], applied)
            if not np.isfinite(r_ctrl):
                raise TrainingDiverged("non-finite state encountered")
            nxt = env.step(states[e], applied, rng)
            ep_steps[e] += 1
            end = ep_steps[e] >= env.horizon

            out["obs"][t, e] = obs[e]
            out["option"][t, e] = o
            out["action"][t, e] = actions[e]
            out["has_action"][t, e] = has_action[e]
            out["logp_u"][t, e] = logp_u[e]
            out["logp_o"][t, e] = logp_o[e]
            out["r_ctrl"][t, e] = r_ctrl
            out["delta"][t, e] = delta
            out["reward"][t, e] = r_ctrl - cfg.lambda_comm * delta
            out["next_obs"][t, e] = np.concatenate([nxt, actuators[e].held_action])
            out["episode_end"][t, e] = end
            out["q_snap"][t, e] = qs[e]
            out["value"][t, e] = values[e]

            if end:
                states[e] = env.reset(rng)
                actuators[e] = Actuator.create(env.action_dim, env.params.max_torque)
                ep_steps[e] = 0
            else:
                states[e] = nxt
        obs = observe()

    next_flat = out["next_obs"].reshape(-1, d)
    nprobs = pol.option_probs(ps, next_flat)
    nqs = pol.q_values(ps, next_flat)
    out["next_value"] = np.sum(nprobs * nqs, axis=1).reshape(steps, n_envs)

    flat = {}
    for key, arr in out.items():
        # env-major flattening keeps each env's trajectory contiguous
        moved = np.moveaxis(arr, 1, 0)
        flat[key] = moved.reshape((steps * n_envs,) + arr.shape[2:])
    return RolloutBatch(**flat)


def gae(rewards, values, next_values, episode_ends, terminals,
        gamma: float, lam: float) -> np.ndarray:
    """GAE advantages over one contiguous trajectory segment.

    delta_t = r_t + gamma * V(next_t) * (not terminal_t) - V_t, accumulated
    with factor gamma*lam and truncated at episode ends.
    """
    rewards = np.asarray(rewards, dtype=float)
    n = rewards.shape[0]
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        boot = 0.0 if terminals[t] else next_values[t]
        delta = rewards[t] + gamma * boot - values[t]
        if episode_ends[t]:
            running = delta
        else:
            running = delta + gamma * lam * running
        adv[t] = running
    return adv


def batch_gae(batch: RolloutBatch, cfg: TrainConfig, n_envs: int) -> np.ndarray:
    """GAE over an env-major flattened batch (each env segment contiguous)."""
    n = len(batch)
    per = n // n_envs
    adv = np.zeros(n)
    for e in range(n_envs):
        s = slice(e * per, (e + 1) * per)
        adv[s] = gae(batch.reward[s], batch.value[s], batch.next_value[s],
                     batch.episode_end[s], batch.terminal[s],
                     cfg.gamma, cfg.lambda_gae)
    return adv


def option_advantage(q_snap: np.ndarray, options: np.ndarray) -> np.ndarray:
    """Greedy option advantage A_mu = Q'(x, o) - max_o Q'(x, o); always <= 0."""
    q_snap = np.asarray(q_snap, dtype=float)
    options = np.asarray(options, dtype=int)
    taken = q_snap[np.arange(q_snap.shape[0]), options]
    return taken - q_snap.max(axis=1)


def _surrogate_terms(ratio: np.ndarray, adv: np.ndarray, eps: float):
    """Selected PPO surrogate values and d(surr)/d(ratio) per sample."""
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
    surr1 = ratio * adv
    surr2 = clipped * adv
    select1 = surr1 <= surr2
    surr = np.where(select1, surr1, surr2)
    inside = (ratio >= 1.0 - eps) & (ratio <= 1.0 + eps)
    dsurr = np.where(select1 | inside, adv, 0.0)
    return surr, dsurr


def loss_mu(ps: pol.PolicySet, obs, options, old_logp_o, adv_mu,
            eps: float, tau: float, entropy_mode: str = "bonus"):
    """Clipped surrogate (ascended) for the policy over options, plus entropy.

    Returns (objective value, per-stream gradient tapes of the objective).
    In "bonus" mode the entropy of mu' is added with coefficient tau; in
    "literal" mode the term tau * log(mu'(o|x)) mu'(o|x) is added verbatim.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    options = np.asarray(options, dtype=int)
    adv_mu = np.asarray(adv_mu, dtype=float)
    old_logp_o = np.asarray(old_logp_o, dtype=float)
    b = obs.shape[0]
    k = ps.option_count
    logits = pol.option_logits(ps, obs)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    logp_all = shifted - np.log(e.sum(axis=1, keepdims=True))
    logp = logp_all[np.arange(b), options]
    ratio = np.exp(logp - old_logp_o)
    if not np.all(np.isfinite(ratio)):
        raise TrainingDiverged("non-finite probability ratio in mu loss")

    surr, dsurr = _surrogate_terms(ratio, adv_mu, eps)
    onehot = np.eye(k)[options]
    # d ratio / d logits = ratio * (onehot - p)
    dlogits = (dsurr * ratio)[:, None] * (onehot - p)

    if entropy_mode == "bonus":
        ent = -np.sum(p * logp_all, axis=1)
        extra = tau * ent
        ent_mean = np.sum(p * logp_all, axis=1, keepdims=True)
        dlogits += tau * (-p * (logp_all - ent_mean))
    else:
        po = p[np.arange(b), options]
        extra = tau * po * logp
        dlogits += (tau * (logp + 1.0) * po)[:, None] * (onehot - p)

    objective = float(np.mean(surr + extra))
    dlogits /= b
    tapes = [nn.backward(m, obs, dlogits[:, [i]])
             for i, m in enumerate(ps.mu_streams)]
    return objective, tapes


def loss_pi(pi: nn.MlpNetwork, obs, actions, old_logp_u, adv, eps: float):
    """Clipped surrogate (ascended) for an intra-option Gaussian policy."""
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    old_logp_u = np.asarray(old_logp_u, dtype=float)
    adv = np.asarray(adv, dtype=float)
    b, m = obs.shape[0], pi.head_dim
    head = nn.forward(pi, obs)
    mean, log_std = head[:, :m], head[:, m:]
    std = np.exp(log_std)
    z = (actions - mean) / std
    logp = (-0.5 * np.sum(z * z, axis=1) - np.sum(log_std, axis=1)
            - 0.5 * pol.LOG_2PI * m)
    ratio = np.exp(logp - old_logp_u)
    if not np.all(np.isfinite(ratio)):
        raise TrainingDiverged("non-finite probability ratio in pi loss")

    surr, dsurr = _surrogate_terms(ratio, adv, eps)
    coeff = (dsurr * ratio)[:, None]
    dmean = coeff * z / std
    dlogstd = coeff * (z * z - 1.0)
    upstream = np.concatenate([dmean, dlogstd], axis=1) / b
    tape = nn.backward(pi, obs, upstream)
    return float(np.mean(surr)), tape


def loss_q(ps: pol.PolicySet, obs, options, targets):
    """Squared-error Q regression against fixed targets (descended)."""
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    options = np.asarray(options, dtype=int)
    targets = np.asarray(targets, dtype=float)
    b = obs.shape[0]
    q = pol.q_values(ps, obs)
    err = q[np.arange(b), options] - targets
    value = float(np.mean(err * err))
    tapes = []
    for i, qnet in enumerate(ps.q_streams):
        mask = options == i
        upstream = np.where(mask, 2.0 * err / b, 0.0)[:, None]
        tapes.append(nn.backward(qnet, obs, upstream))
    return value, tapes


@dataclass
class EpochMetrics:
    epoch: int
    mean_reward: float
    mean_r_ctrl: float
    gamma_savings: float
    option_fracs: tuple[float, ...]
    tau: float


@dataclass
class TrainResult:
    policy: pol.PolicySet
    best_policy: pol.PolicySet
    best_reward: float
    metrics: list[EpochMetrics] = field(default_factory=list)


def train(env: Pendulum, cfg: TrainConfig, seed: int,
          action_limit=None) -> TrainResult:
    """Run the full joint-optimization epoch loop; returns final and best nets."""
    if action_limit is None:
        action_limit = env.params.max_torque
    ss = np.random.SeedSequence(seed)
    init_ss, rollout_ss, shuffle_ss = ss.spawn(3)
    init_rng = np.random.default_rng(init_ss)
    rollout_rng = np.random.default_rng(rollout_ss)
    shuffle_rng = np.random.default_rng(shuffle_ss)

    obs_dim = env.state_dim + env.action_dim
    ps = pol.make_policy_set(obs_dim, env.action_dim, action_limit, init_rng,
                             hidden=cfg.hidden, activation=cfg.activation,
                             semantics=cfg.semantics(),
                             init_log_std=cfg.init_log_std)
    adam_mu = [nn.Adam(lr=cfg.lr_mu) for _ in ps.mu_streams]
    adam_pi = [nn.Adam(lr=cfg.lr_pi) for _ in ps.pi_nets]
    adam_q = [nn.Adam(lr=cfg.lr_q) for _ in ps.q_streams]

    result = TrainResult(policy=ps, best_policy=ps.copy(), best_reward=-np.inf)
    k = ps.option_count
    for epoch in range(1, cfg.epochs + 1):
        tau = cfg.tau_at(epoch)
        try:
            batch = collect_rollouts(env, ps, cfg, rollout_rng)
        except TrainingDiverged:
            result.policy = ps
            raise
        adv_pi = batch_gae(batch, cfg, cfg.num_envs)
        adv_mu = option_advantage(batch.q_snap, batch.option)
        q_targets = (batch.q_snap[np.arange(len(batch)), batch.option] + adv_pi)
        # centering and scaling the control advantages per batch keeps the
        # surrogate well conditioned regardless of the raw return magnitude;
        # the option advantages are only scaled (never centered) so their
        # non-positive greedy structure survives
        if cfg.normalize_adv:
            adv_act = (adv_pi - adv_pi.mean()) / (adv_pi.std() + 1e-8)
            adv_mu = adv_mu / (adv_mu.std() + 1e-8)
        else:
            adv_act = adv_pi

        if cfg.mode == "alternating":
            window = (epoch - 1) // cfg.alt_period
            update_mu = window % 2 == 1
            update_pi = window % 2 == 0
        else:
            update_mu = update_pi = True

        by_option = [np.nonzero(batch.option == o)[0] for o in range(k)]
        for _ in range(cfg.optimizer_iters):
            for o in range(k):
                if by_option[o].size == 0:
                    continue
                perm = shuffle_rng.permutation(by_option[o])
                for start in range(0, perm.size, cfg.batch_size):
                    idx = perm[start:start + cfg.batch_size]
                    if update_mu:
                        _, mu_tapes = loss_mu(ps, batch.obs[idx],
                                              batch.option[idx],
                                              batch.logp_o[idx], adv_mu[idx],
                                              cfg.clip_eps, tau,
                                              cfg.entropy_mode)
                        for a, m, tape in zip(adam_mu, ps.mu_streams,
                                              mu_tapes):
                            a.step(m, tape, maximize=True)
                    if update_pi and ps.semantics[o] == "net":
                        act_idx = idx[batch.has_action[idx]]
                        if act_idx.size:
                            pi = ps.pi_net_for(o)
                            _, pi_tape = loss_pi(pi, batch.obs[act_idx],
                                                 batch.action[act_idx],
                                                 batch.logp_u[act_idx],
                                                 adv_act[act_idx],
                                                 cfg.clip_eps)
                            a = adam_pi[sum(s == "net"
                                            for s in ps.semantics[:o])]
                            a.step(pi, pi_tape, maximize=True)
                    _, q_tapes = loss_q(ps, batch.obs[idx], batch.option[idx],
                                        q_targets[idx])
                    for a, qnet, tape in zip(adam_q, ps.q_streams, q_tapes):
                        a.step(qnet, tape, maximize=False)

        mean_reward = float(np.mean(batch.reward))
        metrics = EpochMetrics(
            epoch=epoch,
            mean_reward=mean_reward,
            mean_r_ctrl=float(np.mean(batch.r_ctrl)),
            gamma_savings=float(1.0 - np.mean(batch.delta)),
            option_fracs=tuple(float(np.mean(batch.option == o))
                               for o in range(k)),
            tau=tau,
        )
        result.metrics.append(metrics)
        if mean_reward > result.best_reward:
            result.best_reward = mean_reward
            result.best_policy = ps.copy()
    result.policy = ps
    return result


def evaluate(env: Pendulum, ps: pol.PolicySet, rollouts: int, seed: int,
             deterministic_actions: bool = False, horizon: int | None = None,
             lambda_comm: float = 0.0):
    """Roll the policy out; returns per-rollout stats and full traces.

    Each rollout reports (total reward, total |R_ctrl|... stored signed,
    communication savings, stability flag |theta| < pi/2 throughout).
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    horizon = horizon or env.horizon
    stats = []
    traces = []
    for _ in range(rollouts):
        state = env.reset(rng)
        actuator = Actuator.create(env.action_dim, env.params.max_torque)
        deltas, r_ctrls, states, actions = [], [], [], []
        stable = True
        for _ in range(horizon):
            obs = np.concatenate([state, actuator.held_action])
            o, _ = pol.sample_option(ps, obs, rng)
            if ps.semantics[o] == "net":
                if deterministic_actions:
                    u = pol.action_mean(ps, obs, o)
                else:
                    u, _ = pol.sample_action(ps, obs, rng, o)
            else:
                u = None
            delta, transmit = pol.apply_option(ps, obs, o, u)
            if delta == 1:
                actuator.held_action = np.asarray(transmit, dtype=float).copy()
            applied = actuator.held_action
            r = env.reward(state, applied)
            states.append(state.copy())
            actions.append(applied.copy())
            deltas.append(delta)
            r_ctrls.append(r)
            state = env.step(state, applied, rng)
            if abs(state[0]) >= np.pi / 2:
                stable = False
        gamma_savings = 1.0 - float(np.mean(deltas))
        total_r = float(np.sum(r_ctrls) - lambda_comm * np.sum(deltas))
        stats.append({
            "reward": total_r,
            "r_ctrl_abs": float(abs(np.sum(r_ctrls))),
            "gamma": gamma_savings,
            "stable": stable,
        })
        traces.append((states, actions, deltas, r_ctrls))
    return stats, traces
