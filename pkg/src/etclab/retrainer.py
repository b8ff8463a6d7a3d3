"""Verify-refine loop for ETC policies.

Alternates stability verification with supervised retraining: counterexample
states (plus Sobol-sampled points classified as unstable or
communication-savable) drive the control mean toward admissible inputs and
the communication probability toward the configured targets, until the
invariant-set check comes back empty.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from . import neuralnet as nn
from . import policy as pol
from . import verifier
from .envsim import LinearSystem
from .verifier import BoxRegion


class RetrainError(RuntimeError):
    pass


@dataclass
class SobolSampler:
    """Deterministic low-discrepancy sequence mapped affinely into a box."""

    box: BoxRegion
    skip: int = 0
    _engine: qmc.Sobol = field(default=None, repr=False)

    def __post_init__(self):
        self._engine = qmc.Sobol(d=self.box.dim, scramble=False)
        if self.skip:
            self._engine.fast_forward(self.skip)

    def draw(self, count: int) -> np.ndarray:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            unit = self._engine.random(count)
        span = self.box.upper - self.box.lower
        return self.box.lower + unit * span


def sobol_points(box: BoxRegion, count: int, skip: int = 0) -> np.ndarray:
    """The `count` Sobol points after `skip`, scaled into the box."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return SobolSampler(box, skip=skip).draw(count)


@dataclass
class RetrainBatch:
    points_crit: np.ndarray    # (Nc, d) states needing forced communication
    u_crit: np.ndarray         # (Nc, m) admissible inputs for them
    points_commsav: np.ndarray  # (Ns, d) states where ZOH is provably safe
    points_fix: np.ndarray = None   # (Nf, d) escaping states whose action
    u_fix: np.ndarray = None        # needs repair without a comm target

    def __post_init__(self):
        if self.points_fix is None:
            self.points_fix = np.zeros((0, self.points_crit.shape[1]))
        if self.u_fix is None:
            self.u_fix = np.zeros((0, max(self.u_crit.shape[1], 1)
                                   if self.u_crit.ndim == 2 else 1))


@dataclass
class RetrainConfig:
    sobol_count: int = 256
    sobol_skip: int = 1
    steps_per_epoch: int = 200
    max_outer_epochs: int = 20
    lr_mu: float = 1e-3
    lr_pi: float = 1e-3
    target_comm_crit: float = 0.6
    target_comm_sav: float = 0.4
    eta: float = 1e-9
    target_backoff: float = 0.1
    hold_backoff: float = 0.1
    snap_width: float = 1e-3
    max_nodes: int = 200_000
    max_lp_calls: int = 2_000_000


def comm_probability(ps: pol.PolicySet, obs) -> np.ndarray:
    """P(delta = 1) = logistic(zeta_1 - zeta_0) = logistic(-Z)."""
    z = pol.option_logits(ps, np.atleast_2d(np.asarray(obs, dtype=float)))
    return 1.0 / (1.0 + np.exp(z[:, 0] - z[:, 1]))


def loss_comm_target(ps: pol.PolicySet, obs, target: float):
    """Mean squared deviation of P(delta=1) from `target` (descended).

    Returns (loss value, gradient tapes for the two mu streams).
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    b = obs.shape[0]
    p = comm_probability(ps, obs)
    err = p - target
    value = float(np.mean(err * err))
    # dp/d zeta_1 = p(1-p), dp/d zeta_0 = -p(1-p)
    base = 2.0 * err * p * (1.0 - p) / b
    tape0 = nn.backward(ps.mu_streams[0], obs, -base[:, None])
    tape1 = nn.backward(ps.mu_streams[1], obs, base[:, None])
    return value, [tape0, tape1]


def loss_action_target(pi: nn.MlpNetwork, obs, u_target):
    """Mean squared deviation of the control mean from u_target (descended)."""
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    u_target = np.atleast_2d(np.asarray(u_target, dtype=float))
    b, m = obs.shape[0], pi.head_dim
    head = nn.forward(pi, obs)
    mean = np.atleast_2d(head)[:, :m]
    err = mean - u_target
    value = float(np.mean(np.sum(err * err, axis=1)))
    upstream = np.concatenate([2.0 * err / b, np.zeros_like(err)], axis=1)
    tape = nn.backward(pi, obs, upstream)
    return value, tape


def supervised_step(ps: pol.PolicySet, batch: RetrainBatch,
                    adam_mu: list[nn.Adam], adam_pi: nn.Adam,
                    cfg: RetrainConfig):
    """One gradient step on the commsav loss and the crit-point losses.

    Follows the paper ordering: communication-saving target first, then the
    critical-point action and communication targets.
    """
    if len(batch.points_commsav):
        _, tapes = loss_comm_target(ps, batch.points_commsav,
                                    cfg.target_comm_sav)
        for a, m, t in zip(adam_mu, ps.mu_streams, tapes):
            a.step(m, t, maximize=False)
    act_pts, act_u = _action_set(batch)
    if len(act_pts):
        _, tape = loss_action_target(ps.pi_net, act_pts, act_u)
        adam_pi.step(ps.pi_net, tape, maximize=False)
    if len(batch.points_crit):
        _, tapes = loss_comm_target(ps, batch.points_crit,
                                    cfg.target_comm_crit)
        for a, m, t in zip(adam_mu, ps.mu_streams, tapes):
            a.step(m, t, maximize=False)


def _action_set(batch: RetrainBatch):
    """All states with an action regression target, and those targets."""
    if len(batch.points_fix) == 0:
        return batch.points_crit, batch.u_crit
    if len(batch.points_crit) == 0:
        return batch.points_fix, batch.u_fix
    return (np.vstack([batch.points_crit, batch.points_fix]),
            np.vstack([batch.u_crit, batch.u_fix]))


def _decouple_action_head(ps: pol.PolicySet, state_dim: int) -> None:
    """Make the control network ignore the held-action observation.

    The admissible-input targets depend on the plant state only, so the held
    action carries no information for the repaired controller; removing its
    influence turns the regression into a pure state-feedback fit and shrinks
    the region the invariance check has to cover.
    """
    ps.pi_net.weights[0][:, state_dim:] = 0.0


def critical_vertices(sys: LinearSystem, M: BoxRegion, u_lim_vec,
                      width: float):
    """Vertices of M whose admissible-input interval is narrower than `width`.

    Only meaningful for single-input systems. Returns (vertices, midpoint
    inputs); raises RetrainError when some vertex admits no input at all,
    since then no policy can make M invariant.
    """
    if sys.input_dim != 1:
        return np.zeros((0, sys.state_dim)), np.zeros((0, sys.input_dim))
    b = sys.B.ravel()
    verts, pins = [], []
    n = sys.state_dim
    for bits in range(2 ** n):
        v = np.where([(bits >> i) & 1 for i in range(n)], M.upper, M.lower)
        ax = sys.A @ v
        lo, hi = -float(u_lim_vec[0]), float(u_lim_vec[0])
        for i in range(n):
            if b[i] > 0:
                lo = max(lo, (M.lower[i] - ax[i]) / b[i])
                hi = min(hi, (M.upper[i] - ax[i]) / b[i])
            elif b[i] < 0:
                lo = max(lo, (M.upper[i] - ax[i]) / b[i])
                hi = min(hi, (M.lower[i] - ax[i]) / b[i])
            elif not (M.lower[i] <= ax[i] <= M.upper[i]):
                lo, hi = 1.0, 0.0
        if hi - lo < -1e-9:
            raise RetrainError(
                f"M is not control invariant at vertex {v}"
                " with the given input limit")
        if hi - lo < width:
            verts.append(v)
            pins.append([(lo + hi) / 2.0])
    return np.array(verts).reshape(-1, n), np.array(pins).reshape(-1, 1)


def pin_action_head(pi: nn.MlpNetwork, obs, targets) -> None:
    """Minimally adjust the output layer so the mean interpolates `targets`.

    Solves the least-norm correction of the last-layer weights and bias
    subject to exact interpolation at the given observations; applied after
    each gradient phase so states whose admissible-input interval has
    (near-)zero width are met to floating-point accuracy rather than to
    regression accuracy.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    _, acts = nn._forward_cached(pi, obs)
    phi = np.hstack([acts[-2], np.ones((obs.shape[0], 1))])  # (k, H+1)
    for _ in range(2):
        head = nn.forward(pi, obs)
        resid = targets - np.atleast_2d(head)[:, :pi.head_dim]
        if np.max(np.abs(resid)) < 1e-12:
            break
        delta, *_ = np.linalg.lstsq(phi, resid, rcond=None)  # (H+1, m)
        pi.weights[-1] += delta[:-1].T
        pi.biases[-1] += delta[-1]


@dataclass
class RetrainEpochRecord:
    epoch: int
    n_crit: int
    n_commsav: int
    certified: bool
    gamma_estimate: float


@dataclass
class RetrainResult:
    policy: pol.PolicySet
    certified: bool
    epochs_used: int
    history: list[RetrainEpochRecord] = field(default_factory=list)


def estimate_gamma(ps: pol.PolicySet, sys: LinearSystem, M: BoxRegion,
                   u_lim, rng: np.random.Generator, rollouts: int = 10,
                   horizon: int = 200) -> float:
    """Fraction of ZOH steps over deterministic linear rollouts from M."""
    net = verifier.compose(ps, sys, u_lim)
    total, comm = 0, 0
    for _ in range(rollouts):
        x = rng.uniform(M.lower, M.upper)
        u_prev = np.zeros(sys.input_dim)
        for _ in range(horizon):
            xt = np.concatenate([x, u_prev])
            _, delta, nxt = deterministic_apply(net, sys, xt, u_lim)
            comm += delta
            total += 1
            x = nxt
            if delta == 1:
                out = net.forward(xt)
                # recover applied (saturated) action from the dynamics output
                u_prev = np.linalg.lstsq(
                    sys.B, out[net.comm_slice] - sys.A @ xt[:sys.state_dim],
                    rcond=None)[0]
    return 1.0 - comm / total


def deterministic_apply(net, sys, x_tilde, u_lim):
    z, delta, nxt = verifier.deterministic_step(net, x_tilde)
    return z, delta, nxt


def refine_policy_et(ps: pol.PolicySet, sys: LinearSystem, M: BoxRegion,
                     u_lim, cfg: RetrainConfig | None = None,
                     seed: int = 0) -> RetrainResult:
    """Alg.-style verify-refine loop; returns the (possibly certified) policy.

    Raises RetrainError when some critical point admits no valid input, i.e.
    M is not control invariant under the given input limit.
    """
    cfg = cfg or RetrainConfig()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    m = sys.input_dim
    u_lim_vec = np.broadcast_to(np.asarray(u_lim, dtype=float), (m,))
    S = M.concat(BoxRegion(-u_lim_vec, u_lim_vec))
    sampler = SobolSampler(S, skip=cfg.sobol_skip)
    adam_mu = [nn.Adam(lr=cfg.lr_mu) for _ in ps.mu_streams]
    adam_pi = nn.Adam(lr=cfg.lr_pi)

    result = RetrainResult(policy=ps, certified=False, epochs_used=0)
    witnesses: list[np.ndarray] = []  # accumulated counterexample corners
    points_crit, _ = check_stability(ps, sys, M, u_lim, cfg)
    if points_crit:
        # retraining regresses toward state-only input targets, so the
        # control network's held-action input is disabled up front; vertices
        # of M with a (near-)degenerate admissible-input interval are met by
        # exact output-layer interpolation instead of gradient descent
        _decouple_action_head(ps, sys.state_dim)
        pin_obs, pin_u = critical_vertices(sys, M, u_lim_vec, cfg.snap_width)
        pin_obs = np.hstack([pin_obs, np.zeros((pin_obs.shape[0], m))])
    for epoch in range(1, cfg.max_outer_epochs + 1):
        if not points_crit:
            result.certified = True
            break
        result.epochs_used = epoch
        sobol = sampler.draw(cfg.sobol_count)
        # extra draws snapped onto the faces of S anchor the trigger surface
        # at the domain boundary, where interior samples leave the regression
        # free to swing and the invariance check probes hardest
        faces = sampler.draw(cfg.sobol_count // 2)
        for i, xt in enumerate(faces):
            d, side = divmod(i % (2 * S.dim), 2)
            xt[d] = S.upper[d] if side else S.lower[d]
        sobol = np.vstack([sobol, faces])
        crit = []
        commsav = []
        # the two communication targets split S along a policy-independent
        # line: holding keeps the next state comfortably inside M (train
        # toward holding) or it does not (train toward communicating). The
        # hold label is buffered by hold_backoff so the learned trigger
        # surface sits strictly inside the provably safe region even under
        # classification error. Stable labels keep successive epochs from
        # undoing each other.
        pad = cfg.hold_backoff * (M.upper - M.lower) / 2.0
        M_hold = BoxRegion(M.lower + pad, M.upper - pad)
        # witnesses are LP vertices and can sit a solver tolerance outside S,
        # where the admissible-input problem may be infeasible; clip them in
        witnesses.extend(np.clip(np.asarray(xt, dtype=float),
                                 S.lower, S.upper) for xt in points_crit)
        for xt in list(witnesses) + list(sobol):
            zoh_next = sys.A @ xt[:sys.state_dim] + sys.B @ xt[sys.state_dim:]
            if M_hold.contains(zoh_next):
                commsav.append(xt)
            else:
                crit.append(xt)
        # regression targets aim as deep inside M as the dynamics allow (up
        # to a relative margin of target_backoff) so the next state stays
        # strictly inside even under imperfect fitting; near the reachable
        # boundary the margin degrades gracefully rather than jumping to
        # zero, which keeps the targets fittable by a small network
        def admissible_input(xt):
            u = verifier.find_margin_input_et(xt, sys, M, u_lim,
                                              margin=cfg.target_backoff)
            if u is None:
                raise RetrainError(
                    f"M is not control invariant at {np.asarray(xt)[:sys.state_dim]}"
                    " with the given input limit")
            return u

        # every point gets an action target: wherever the trigger surface
        # dips into the communicate branch, including pockets deep inside
        # the hold region, the commanded action must still map into M
        u_crit = [admissible_input(xt) for xt in crit]
        u_sav = [admissible_input(xt) for xt in commsav]
        batch = RetrainBatch(
            points_crit=(np.array(crit) if crit else np.zeros((0, S.dim))),
            u_crit=(np.array(u_crit) if u_crit else np.zeros((0, m))),
            points_commsav=(np.array(commsav) if commsav
                            else np.zeros((0, S.dim))),
            points_fix=(np.array(commsav) if commsav
                        else np.zeros((0, S.dim))),
            u_fix=(np.array(u_sav) if u_sav else np.zeros((0, m))),
        )
        # the three targets are descended jointly, one interleaved step per
        # iteration, so neither communication target overwrites the other on
        # the shared option networks; the vertex pins are re-applied every
        # step so the optimizer adapts to the constrained head instead of
        # fighting a once-per-epoch correction
        for _ in range(cfg.steps_per_epoch):
            supervised_step(ps, batch, adam_mu, adam_pi, cfg)
            _decouple_action_head(ps, sys.state_dim)
            if len(pin_obs):
                pin_action_head(ps.pi_net, pin_obs, pin_u)

        points_crit, _ = check_stability(ps, sys, M, u_lim, cfg)
        result.history.append(RetrainEpochRecord(
            epoch=epoch,
            n_crit=len(crit),
            n_commsav=len(commsav),
            certified=not points_crit,
            gamma_estimate=estimate_gamma(ps, sys, M, u_lim, rng),
        ))
    else:
        if not points_crit:
            result.certified = True
    result.policy = ps
    return result


def check_stability(ps, sys, M, u_lim, cfg: RetrainConfig):
    return verifier.check_stability_et(
        ps, sys, M, u_lim, eta=cfg.eta,
        max_nodes=cfg.max_nodes, max_lp_calls=cfg.max_lp_calls)
