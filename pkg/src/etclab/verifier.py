"""Invariant-set verification of deterministic ReLU ETC policies.

The deterministic policy (Z-head option decision plus saturated control mean)
and the linear dynamics are composed into a single piecewise-linear network
with outputs (Z, next state when communicating, next state under ZOH).
Stability queries are decided by branch-and-bound over ReLU activation
phases: exact affine propagation while phases are decided, interval bounds
for pruning, and an LP feasibility check at every leaf. Every SAT answer is
confirmed by exact forward re-evaluation before being reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import lp
from . import policy as pol
from .envsim import LinearSystem


class CompositionError(ValueError):
    pass


class VerificationInconclusive(RuntimeError):
    """Budget exhausted before the query could be decided."""


@dataclass
class BoxRegion:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float).reshape(-1)
        self.upper = np.asarray(self.upper, dtype=float).reshape(-1)
        if self.lower.shape != self.upper.shape:
            raise ValueError("bound dimension mismatch")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float).reshape(-1)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def concat(self, other: "BoxRegion") -> "BoxRegion":
        return BoxRegion(np.concatenate([self.lower, other.lower]),
                         np.concatenate([self.upper, other.upper]))


@dataclass
class Stage:
    """One affine layer; ReLU is applied to the masked output coordinates."""

    W: np.ndarray
    b: np.ndarray
    relu_mask: np.ndarray  # bool per output coordinate


@dataclass
class PiecewiseLinearNet:
    """Composed one-step map: input (x, u_prev) -> (Z, x'_comm, x'_zoh)."""

    stages: list[Stage]
    state_dim: int
    input_dim: int  # action dimension m

    @property
    def in_dim(self) -> int:
        return self.state_dim + self.input_dim

    @property
    def z_index(self) -> int:
        return 0

    @property
    def comm_slice(self) -> slice:
        return slice(1, 1 + self.state_dim)

    @property
    def zoh_slice(self) -> slice:
        return slice(1 + self.state_dim, 1 + 2 * self.state_dim)

    def forward(self, x) -> np.ndarray:
        z = np.asarray(x, dtype=float).reshape(-1)
        for st in self.stages:
            z = st.W @ z + st.b
            z[st.relu_mask] = np.maximum(z[st.relu_mask], 0.0)
        return z

    def relu_units(self) -> list[tuple[int, int]]:
        units = []
        for s, st in enumerate(self.stages):
            for u in np.nonzero(st.relu_mask)[0]:
                units.append((s, int(u)))
        return units


def _require_relu_linear(net, name):
    if net.hidden_activation != "relu":
        raise CompositionError(f"{name} must use ReLU activations")


def compose(ps: pol.PolicySet, sys: LinearSystem, u_lim) -> PiecewiseLinearNet:
    """Build the one-step piecewise-linear map from policy and dynamics.

    The saturation of the control mean to [-u_lim, u_lim] is encoded exactly
    via sat(v) = -u_lim + ReLU(v + u_lim) - ReLU(v - u_lim).
    """
    if ps.semantics != pol.ETC_SEMANTICS:
        raise CompositionError("composition requires the 2-option ETC set")
    mu0, mu1 = ps.mu_streams
    pi = ps.pi_net
    for name, net in (("mu stream 0", mu0), ("mu stream 1", mu1), ("pi", pi)):
        _require_relu_linear(net, name)
    if mu0.output_head != "linear" or mu1.output_head != "linear":
        raise CompositionError("mu streams must have linear heads")
    if pi.output_head not in ("linear", "gaussian"):
        raise CompositionError("pi must expose a linear mean head")
    depth = len(mu0.weights)
    if len(mu1.weights) != depth or len(pi.weights) != depth:
        raise CompositionError("streams must share the same depth")

    n, m = sys.state_dim, sys.input_dim
    if ps.obs_dim != n + m:
        raise CompositionError("observation layout does not match dynamics")
    u_lim = np.broadcast_to(np.asarray(u_lim, dtype=float), (m,)).copy()
    if np.any(u_lim <= 0):
        raise CompositionError("u_lim must be positive")

    d = n + m
    stages: list[Stage] = []
    # hidden stages: carry (x, u_prev) plus one lane per stream
    lane_in = [d, d, d]  # current input width of each stream lane
    prev_width = d
    lane_off = [d, d, d]
    for layer in range(depth - 1):
        ws = [mu0.weights[layer], mu1.weights[layer], pi.weights[layer]]
        bs = [mu0.biases[layer], mu1.biases[layer], pi.biases[layer]]
        widths = [w.shape[0] for w in ws]
        out_dim = d + sum(widths)
        W = np.zeros((out_dim, prev_width))
        b = np.zeros(out_dim)
        mask = np.zeros(out_dim, dtype=bool)
        W[:d, :d] = np.eye(d)
        row = d
        for i, (w, bb) in enumerate(zip(ws, bs)):
            if layer == 0:
                W[row:row + w.shape[0], :d] = w
            else:
                W[row:row + w.shape[0],
                  lane_off[i]:lane_off[i] + lane_in[i]] = w
            b[row:row + w.shape[0]] = bb
            mask[row:row + w.shape[0]] = True
            row += w.shape[0]
        stages.append(Stage(W, b, mask))
        lane_in = widths
        lane_off = [d, d + widths[0], d + widths[0] + widths[1]]
        prev_width = out_dim

    # stream outputs: [x, u_prev, Z, v]
    out_dim = d + 1 + m
    W = np.zeros((out_dim, prev_width))
    b = np.zeros(out_dim)
    W[:d, :d] = np.eye(d)
    w0, w1, wp = mu0.weights[-1], mu1.weights[-1], pi.weights[-1]
    b0, b1, bp = mu0.biases[-1], mu1.biases[-1], pi.biases[-1]
    if depth == 1:
        W[d, :d] = w0[0] - w1[0]
        W[d + 1:, :d] = wp
    else:
        W[d, lane_off[0]:lane_off[0] + lane_in[0]] = w0[0]
        W[d, lane_off[1]:lane_off[1] + lane_in[1]] -= w1[0]
        W[d + 1:, lane_off[2]:lane_off[2] + lane_in[2]] = wp
    b[d] = b0[0] - b1[0]
    b[d + 1:] = bp
    stages.append(Stage(W, b, np.zeros(out_dim, dtype=bool)))

    # saturation pre-activations: [x, u_prev, Z, s1 = relu(v + L), s2 = relu(v - L)]
    prev_width = out_dim
    out_dim = d + 1 + 2 * m
    W = np.zeros((out_dim, prev_width))
    b = np.zeros(out_dim)
    mask = np.zeros(out_dim, dtype=bool)
    W[:d + 1, :d + 1] = np.eye(d + 1)
    for j in range(m):
        W[d + 1 + j, d + 1 + j] = 1.0
        b[d + 1 + j] = u_lim[j]
        W[d + 1 + m + j, d + 1 + j] = 1.0
        b[d + 1 + m + j] = -u_lim[j]
    mask[d + 1:] = True
    stages.append(Stage(W, b, mask))

    # final affine: [Z, A x + B sat(v), A x + B u_prev]
    prev_width = out_dim
    out_dim = 1 + 2 * n
    W = np.zeros((out_dim, prev_width))
    b = np.zeros(out_dim)
    W[0, d] = 1.0
    W[1:1 + n, :n] = sys.A
    W[1:1 + n, d + 1:d + 1 + m] = sys.B
    W[1:1 + n, d + 1 + m:d + 1 + 2 * m] = -sys.B
    b[1:1 + n] = -sys.B @ u_lim
    W[1 + n:, :n] = sys.A
    W[1 + n:, n:d] = sys.B
    stages.append(Stage(W, b, np.zeros(out_dim, dtype=bool)))
    return PiecewiseLinearNet(stages, state_dim=n, input_dim=m)


# --- query machinery -------------------------------------------------------

@dataclass
class VerificationQuery:
    """Does some input in `box` (with the given Z sign) map outside `target`?"""

    box: BoxRegion            # over composed-net inputs (x, u_prev)
    branch: str               # "comm" | "zoh": which next-state output
    target: BoxRegion         # the invariant candidate M (state space)
    z_sign: str | None = None  # "comm": Z <= eta, "zoh": Z >= eta, None: free
    eta: float = 1e-9
    exit_margin: float = 1e-9


@dataclass
class VerificationOutcome:
    status: str  # "UNSAT" | "SAT" | "UNKNOWN"
    witness: np.ndarray | None = None
    witness_next: np.ndarray | None = None
    stats: dict = field(default_factory=dict)


def _affine_interval(rows: np.ndarray, lower: np.ndarray, upper: np.ndarray):
    """Exact interval of affine rows [coef | const] over an input box."""
    coef = rows[:, :-1]
    const = rows[:, -1]
    pos = np.maximum(coef, 0.0)
    neg = np.minimum(coef, 0.0)
    lo = pos @ lower + neg @ upper + const
    hi = pos @ upper + neg @ lower + const
    return lo, hi


class _Budget:
    def __init__(self, max_nodes: int, max_lp_calls: int):
        self.max_nodes = max_nodes
        self.max_lp_calls = max_lp_calls
        self.nodes = 0
        self.lp_calls = 0

    def exhausted(self) -> bool:
        return self.nodes > self.max_nodes or self.lp_calls > self.max_lp_calls


def _propagate(net: PiecewiseLinearNet, phases: dict, box: BoxRegion):
    """Exact affine propagation up to the first stage with undecided ReLUs.

    Returns (complete, output_affine_or_None, frontier, interval_out) where
    frontier lists (stage, unit, affine_row, lb, ub) for undecided units of
    the first incomplete stage and interval_out bounds the network outputs
    via interval propagation past that stage.
    """
    d = net.in_dim
    aff = np.hstack([np.eye(d), np.zeros((d, 1))])
    for s, st in enumerate(net.stages):
        pre = st.W @ aff
        pre[:, -1] += st.b
        masked = np.nonzero(st.relu_mask)[0]
        undecided = []
        lo, hi = _affine_interval(pre, box.lower, box.upper)
        for u in masked:
            ph = phases.get((s, int(u)))
            if ph is None:
                if lo[u] >= 0.0:
                    ph = 1
                elif hi[u] <= 0.0:
                    ph = -1
            if ph is None:
                undecided.append((s, int(u), pre[u].copy(),
                                  float(lo[u]), float(hi[u])))
        if undecided:
            # symbolic affine bound continuation for output pruning: keep
            # per-neuron lower/upper affine rows in the input, relaxing
            # undecided ReLUs by the chord above and zero-or-identity below
            lo_rows = _relax_relu(pre, pre, lo, hi, masked, phases, s, box)
            up_rows = lo_rows[1]
            lo_rows = lo_rows[0]
            for s2 in range(s + 1, len(net.stages)):
                st2 = net.stages[s2]
                pos = np.maximum(st2.W, 0.0)
                neg = np.minimum(st2.W, 0.0)
                nlo = pos @ lo_rows + neg @ up_rows
                nhi = pos @ up_rows + neg @ lo_rows
                nlo[:, -1] += st2.b
                nhi[:, -1] += st2.b
                m2 = np.nonzero(st2.relu_mask)[0]
                l2, _ = _affine_interval(nlo, box.lower, box.upper)
                _, h2 = _affine_interval(nhi, box.lower, box.upper)
                lo_rows, up_rows = _relax_relu(nlo, nhi, l2, h2, m2,
                                               phases, s2, box)
            return False, None, undecided, (lo_rows, up_rows)
        post = pre.copy()
        for u in masked:
            ph = phases.get((s, int(u)))
            if ph is None:
                ph = 1 if lo[u] >= 0.0 else -1
            if ph == -1:
                post[u, :] = 0.0
        aff = post
    return True, aff, [], None


def _relax_relu(lo_rows, up_rows, lo, hi, masked, phases, stage, box):
    """Apply ReLU to symbolic lower/upper affine rows.

    Decided or phase-fixed units get exact identity/zero rows (phase fixes
    are valid on the node's feasible region, which is all pruning needs).
    Undecided units use the chord u(y - l)/(u - l) above and, below, the
    identity when u > -l and zero otherwise.
    """
    nlo = lo_rows.copy()
    nup = up_rows.copy()
    for u in masked:
        ph = phases.get((stage, int(u)))
        if ph is None:
            if lo[u] >= 0.0:
                ph = 1
            elif hi[u] <= 0.0:
                ph = -1
        if ph == 1:
            continue
        if ph == -1:
            nlo[u, :] = 0.0
            nup[u, :] = 0.0
            continue
        slope = hi[u] / (hi[u] - lo[u])
        nup[u] = slope * up_rows[u]
        nup[u, -1] -= slope * lo[u]
        if hi[u] <= -lo[u]:
            nlo[u, :] = 0.0
        # else keep the identity lower row
    return nlo, nup


def _row_leq(coef, bound):
    """Constraint row coef . x <= bound in (G, h) form."""
    return np.asarray(coef, dtype=float), float(bound)


def _node_constraints(box: BoxRegion, split_rows):
    d = box.dim
    G = [np.eye(d), -np.eye(d)]
    h = [box.upper, -box.lower]
    for coef, bound in split_rows:
        G.append(coef[None, :])
        h.append(np.array([bound]))
    return np.vstack(G), np.concatenate(h)


def _output_rows(output_affine, net: PiecewiseLinearNet, query,
                 halfspace) -> list[tuple[np.ndarray, float]]:
    """Affine constraints (z sign + one exit half-space) at a leaf."""
    rows = []
    z_row = output_affine[net.z_index]
    if query.z_sign == "comm":
        rows.append(_row_leq(z_row[:-1], query.eta - z_row[-1]))
    elif query.z_sign == "zoh":
        rows.append(_row_leq(-z_row[:-1], z_row[-1] - query.eta))
    sl = net.comm_slice if query.branch == "comm" else net.zoh_slice
    i, side = halfspace
    out_row = output_affine[sl][i]
    if side == "upper":  # next_i >= target.upper + margin
        bound = query.target.upper[i] + query.exit_margin
        rows.append(_row_leq(-out_row[:-1], out_row[-1] - bound))
    else:  # next_i <= target.lower - margin
        bound = query.target.lower[i] - query.exit_margin
        rows.append(_row_leq(out_row[:-1], bound - out_row[-1]))
    return rows


def _witness_ok(net: PiecewiseLinearNet, query: VerificationQuery, x,
                tol: float = 1e-7) -> bool:
    if not query.box.contains(x, tol=tol):
        return False
    out = net.forward(x)
    z = out[net.z_index]
    # the Z-sign check is exact: ties (Z in [0, eta]) belong to the
    # communicate branch, and a point with Z <= 0 never takes the ZOH branch
    if query.z_sign == "comm" and z > query.eta:
        return False
    if query.z_sign == "zoh" and z <= 0.0:
        return False
    sl = net.comm_slice if query.branch == "comm" else net.zoh_slice
    nxt = out[sl]
    outside = np.any(nxt > query.target.upper + query.exit_margin / 2) or \
        np.any(nxt < query.target.lower - query.exit_margin / 2)
    return bool(outside)


def _row_min(row, box, G, h, budget):
    """Lower bound of an affine row over the node polytope.

    Starts from the free interval bound over the box; if the node carries
    split constraints, an LP sharpens it.
    """
    lo, _ = _affine_interval(row[None, :], box.lower, box.upper)
    best = float(lo[0])
    if G is not None:
        budget.lp_calls += 1
        res = lp.solve_lp(row[:-1], G, h)
        if res.status == "optimal":
            best = max(best, res.objective + row[-1])
    return best


def _symbolic_prunes(net, query, halfspace, rows, box, G, h, budget) -> bool:
    """True when symbolic output bounds rule out any solution below a node.

    `rows` are the (lower, upper) affine output bounds; they are minimized or
    maximized over the node polytope (box plus split half-spaces) by LP.
    """
    lo_rows, up_rows = rows
    zi = net.z_index
    if query.z_sign == "comm":
        # need Z <= eta somewhere; prune when min Z > eta
        if _row_min(lo_rows[zi], box, G, h, budget) > query.eta:
            return True
    elif query.z_sign == "zoh":
        # need Z >= eta somewhere; prune when max Z < eta
        if -_row_min(-up_rows[zi], box, G, h, budget) < query.eta:
            return True
    sl = net.comm_slice if query.branch == "comm" else net.zoh_slice
    i, side = halfspace
    idx = sl.start + i
    if side == "upper":
        bound = query.target.upper[i] + query.exit_margin
        if -_row_min(-up_rows[idx], box, G, h, budget) < bound:
            return True
    else:
        bound = query.target.lower[i] - query.exit_margin
        if _row_min(lo_rows[idx], box, G, h, budget) > bound:
            return True
    return False


def _stage_sensitivity(net: PiecewiseLinearNet) -> list[np.ndarray]:
    """Absolute coefficient bound from each stage's output to the net output.

    ReLU is 1-Lipschitz, so the product of |W| matrices bounds how much a
    unit can move any output; used only as a branching heuristic.
    """
    sens = [None] * len(net.stages)
    C = np.eye(net.stages[-1].W.shape[0])
    sens[-1] = C
    for s in range(len(net.stages) - 2, -1, -1):
        C = C @ np.abs(net.stages[s + 1].W)
        sens[s] = C
    return sens


def _bnb(net: PiecewiseLinearNet, query: VerificationQuery, halfspace,
         budget: _Budget):
    """DFS branch-and-bound for one exit half-space. Returns outcome string
    plus witness."""
    sens = _stage_sensitivity(net)
    sl = net.comm_slice if query.branch == "comm" else net.zoh_slice
    out_idx = sl.start + halfspace[0]
    stack = [({}, [])]  # (phases dict, split constraint rows)
    while stack:
        if budget.exhausted():
            return "UNKNOWN", None
        phases, splits = stack.pop()
        budget.nodes += 1
        G, h = _node_constraints(query.box, splits)
        if splits:
            budget.lp_calls += 1
            if lp.feasible_point(G, h) is None:
                continue
        complete, out_aff, frontier, rows = _propagate(net, phases, query.box)
        if not complete and _symbolic_prunes(
                net, query, halfspace, rows, query.box,
                G if splits else None, h, budget):
            continue
        # LP-based tightening of frontier units under split constraints
        while not complete and splits:
            decided_any = False
            for s, u, row, lb, ub in frontier:
                budget.lp_calls += 2
                res_lo = lp.solve_lp(row[:-1], G, h)
                res_hi = lp.solve_lp(-row[:-1], G, h)
                if res_lo.status != "optimal" or res_hi.status != "optimal":
                    continue
                lo_v = res_lo.objective + row[-1]
                hi_v = -res_hi.objective + row[-1]
                if lo_v >= 0.0:
                    phases[(s, u)] = 1
                    decided_any = True
                elif hi_v <= 0.0:
                    phases[(s, u)] = -1
                    decided_any = True
            if not decided_any:
                break
            complete, out_aff, frontier, rows = _propagate(
                net, phases, query.box)
        if complete:
            rows = _output_rows(out_aff, net, query, halfspace)
            G2 = np.vstack([G] + [r[0][None, :] for r in rows])
            h2 = np.concatenate([h] + [[r[1]] for r in rows])
            budget.lp_calls += 1
            x = lp.feasible_point(G2, h2)
            if x is not None and _witness_ok(net, query, x):
                return "SAT", x
            continue
        # split on the frontier unit with the largest chord-relaxation gap
        # weighted by its influence on the z and exit outputs
        def score(f):
            s, u, _, lb, ub = f
            gap = -lb * ub / (ub - lb)
            w = max(sens[s][net.z_index, u], sens[s][out_idx, u])
            return gap * w
        s, u, row, lb, ub = max(frontier, key=score)
        inactive = dict(phases)
        inactive[(s, u)] = -1
        active = dict(phases)
        active[(s, u)] = 1
        # visit active first (pushed last)
        stack.append((inactive, splits + [_row_leq(row[:-1], -row[-1])]))
        stack.append((active, splits + [_row_leq(-row[:-1], row[-1])]))
    return "UNSAT", None


def solve_query(net: PiecewiseLinearNet, query: VerificationQuery,
                max_nodes: int = 200_000,
                max_lp_calls: int = 2_000_000) -> VerificationOutcome:
    """Complete decision of one exit query via branch-and-bound.

    The complement-of-box target is a disjunction over 2n half-spaces,
    checked in fixed dimension order (lower side first) so witnesses are
    deterministic. Budget exhaustion yields an explicit UNKNOWN.
    """
    budget = _Budget(max_nodes, max_lp_calls)
    any_unknown = False
    for i in range(net.state_dim):
        for side in ("lower", "upper"):
            status, x = _bnb(net, query, (i, side), budget)
            if status == "SAT":
                out = net.forward(x)
                sl = net.comm_slice if query.branch == "comm" else net.zoh_slice
                return VerificationOutcome(
                    "SAT", witness=x, witness_next=out[sl],
                    stats={"branches": budget.nodes,
                           "lp_calls": budget.lp_calls})
            if status == "UNKNOWN":
                any_unknown = True
    status = "UNKNOWN" if any_unknown else "UNSAT"
    return VerificationOutcome(status, stats={"branches": budget.nodes,
                                              "lp_calls": budget.lp_calls})


def deterministic_step(net: PiecewiseLinearNet, x_tilde):
    """Evaluate the deterministic one-step ETC map at a concrete point.

    Returns (z, delta, next_state): ZOH iff Z > 0, ties communicate.
    """
    out = net.forward(x_tilde)
    z = float(out[net.z_index])
    if z > 0.0:
        return z, 0, out[net.zoh_slice]
    return z, 1, out[net.comm_slice]


def check_stability_et(ps: pol.PolicySet, sys: LinearSystem, M: BoxRegion,
                       u_lim, eta: float = 1e-9,
                       max_nodes: int = 200_000,
                       max_lp_calls: int = 2_000_000):
    """Run the two exit queries; empty list means M is positively invariant.

    Raises VerificationInconclusive when either query exhausts its budget.
    Returns (witness list, stats).
    """
    net = compose(ps, sys, u_lim)
    m = sys.input_dim
    u_lim_vec = np.broadcast_to(np.asarray(u_lim, dtype=float), (m,))
    S = M.concat(BoxRegion(-u_lim_vec, u_lim_vec))
    points = []
    stats = {"branches": 0, "lp_calls": 0}
    for branch, z_sign in (("comm", "comm"), ("zoh", "zoh")):
        q = VerificationQuery(box=S, branch=branch, target=M,
                              z_sign=z_sign, eta=eta)
        outcome = solve_query(net, q, max_nodes, max_lp_calls)
        stats["branches"] += outcome.stats.get("branches", 0)
        stats["lp_calls"] += outcome.stats.get("lp_calls", 0)
        if outcome.status == "UNKNOWN":
            raise VerificationInconclusive(
                f"budget exhausted on the {branch} branch query")
        if outcome.status == "SAT":
            points.append(outcome.witness)
    return points, stats


def check_point_et(x_tilde, net: PiecewiseLinearNet, M: BoxRegion) -> bool:
    """True iff the deterministic one-step map leaves M (closed region)."""
    _, _, nxt = deterministic_step(net, x_tilde)
    return not M.contains(nxt)


def comm_saving_possible(x_tilde, net: PiecewiseLinearNet,
                         M: BoxRegion) -> bool:
    """True iff the policy communicates here although ZOH would stay in M."""
    out = net.forward(x_tilde)
    z = float(out[net.z_index])
    if z > 0.0:
        return False
    return M.contains(out[net.zoh_slice])


def find_valid_input_et(x_tilde, sys: LinearSystem, M: BoxRegion,
                        u_lim) -> np.ndarray | None:
    """Minimum-L1-norm input u with A x + B u inside M, or None.

    Since the dynamics are linear and M is a box this is a single LP over
    (u, t) with |u_j| <= t_j.
    """
    n, m = sys.state_dim, sys.input_dim
    x = np.asarray(x_tilde, dtype=float).reshape(-1)[:n]
    u_lim_vec = np.broadcast_to(np.asarray(u_lim, dtype=float), (m,))
    ax = sys.A @ x
    # variables (u, t)
    G, h = [], []
    eye = np.eye(m)
    zero = np.zeros((m, m))
    G.append(np.hstack([eye, -eye]))       # u - t <= 0
    h.append(np.zeros(m))
    G.append(np.hstack([-eye, -eye]))      # -u - t <= 0
    h.append(np.zeros(m))
    G.append(np.hstack([eye, zero]))       # u <= u_lim
    h.append(u_lim_vec)
    G.append(np.hstack([-eye, zero]))      # -u <= u_lim
    h.append(u_lim_vec)
    G.append(np.hstack([sys.B, np.zeros((n, m))]))   # A x + B u <= upper
    h.append(M.upper - ax)
    G.append(np.hstack([-sys.B, np.zeros((n, m))]))  # A x + B u >= lower
    h.append(ax - M.lower)
    c = np.concatenate([np.zeros(m), np.ones(m)])
    res = lp.solve_lp(c, np.vstack(G), np.concatenate(h))
    if res.status != "optimal":
        return None
    u = res.x[:m]
    nxt = sys.A @ x + sys.B @ u
    if not M.contains(nxt, tol=1e-7):
        return None
    return u


def find_margin_input_et(x_tilde, sys: LinearSystem, M: BoxRegion,
                         u_lim, margin: float = 0.1) -> np.ndarray | None:
    """Input u that centers A x + B u inside M, or None if M is unreachable.

    Among all admissible inputs this maximizes the relative interior margin
    t (next state inside M contracted by t times its half-widths), capped at
    `margin`, and breaks ties by minimum L1 norm. Near the boundary of the
    reachable set the margin degrades gracefully instead of jumping to zero,
    which makes the result a much better regression target than the plain
    feasibility LP.
    """
    n, m = sys.state_dim, sys.input_dim
    x = np.asarray(x_tilde, dtype=float).reshape(-1)[:n]
    u_lim_vec = np.broadcast_to(np.asarray(u_lim, dtype=float), (m,))
    ax = sys.A @ x
    half = (M.upper - M.lower) / 2.0
    # variables (u, s, t): |u_j| <= s_j, t = relative interior margin
    eye = np.eye(m)
    zero = np.zeros((m, m))
    zcol = np.zeros((m, 1))
    G, h = [], []
    G.append(np.hstack([eye, -eye, zcol]))     # u - s <= 0
    h.append(np.zeros(m))
    G.append(np.hstack([-eye, -eye, zcol]))    # -u - s <= 0
    h.append(np.zeros(m))
    G.append(np.hstack([eye, zero, zcol]))     # u <= u_lim
    h.append(u_lim_vec)
    G.append(np.hstack([-eye, zero, zcol]))    # -u <= u_lim
    h.append(u_lim_vec)
    G.append(np.hstack([sys.B, np.zeros((n, m)), half[:, None]]))
    h.append(M.upper - ax)                     # A x + B u <= upper - t*half
    G.append(np.hstack([-sys.B, np.zeros((n, m)), half[:, None]]))
    h.append(ax - M.lower)                     # A x + B u >= lower + t*half
    tail = np.zeros((1, 2 * m))
    G.append(np.hstack([tail, [[-1.0]]]))      # t >= 0
    h.append(np.zeros(1))
    G.append(np.hstack([tail, [[1.0]]]))       # t <= margin
    h.append(np.array([margin]))
    G = np.vstack(G)
    h = np.concatenate(h)
    # stage 1: maximize the margin
    c = np.zeros(2 * m + 1)
    c[-1] = -1.0
    res = lp.solve_lp(c, G, h)
    if res.status != "optimal":
        return None
    t_star = res.x[-1]
    # stage 2: minimum L1 norm among (near-)maximizers
    G2 = np.vstack([G, np.hstack([tail, [[-1.0]]])])
    h2 = np.concatenate([h, [-(t_star - 1e-9)]])
    c2 = np.concatenate([np.zeros(m), np.ones(m), [0.0]])
    res2 = lp.solve_lp(c2, G2, h2)
    if res2.status == "optimal":
        u = res2.x[:m]
    else:
        u = res.x[:m]
    if not M.contains(sys.A @ x + sys.B @ u, tol=1e-7):
        return None
    return u
