"""Discrete-time plant simulation.

Nonlinear pendulum dynamics with zero-order-hold (ZOH) actuation, arbitrary
linear systems, exact discretization of the linearized pendulum, and the
control-reward used throughout the lab.

Conventions:
  - pendulum state is (theta, theta_dot) with theta wrapped to (-pi, pi]
  - theta = 0 is the upright equilibrium
  - the actuator reapplies its held action whenever no communication occurs
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm


class DimensionError(ValueError):
    """Raised when vector/matrix dimensions are inconsistent."""


def wrap_angle(theta):
    """Wrap an angle (scalar or array) to the interval (-pi, pi]."""
    wrapped = -(np.mod(-np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi)
    return wrapped


@dataclass
class PendulumParams:
    """Physical constants of the inverted pendulum.

    Defaults follow the standard open-source pendulum environment
    (g=10, m=1, l=1, dt=0.05, torque limit 2) with the control-effort weight
    raised to 0.1.
    """

    gravity: float = 10.0
    mass: float = 1.0
    length: float = 1.0
    dt: float = 0.05
    max_torque: float = 2.0
    max_speed: float = 8.0
    ctrl_weight: float = 0.1

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        for name in ("gravity", "mass", "length", "max_torque"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class Measurement:
    """Sensor reading y = x + noise; identity map with zero noise by default."""

    y: np.ndarray
    noise_w: np.ndarray

    @classmethod
    def identity(cls, state) -> "Measurement":
        x = np.asarray(state, dtype=float)
        return cls(y=x.copy(), noise_w=np.zeros_like(x))


@dataclass
class Actuator:
    """ZOH actuator holding the last transmitted action."""

    held_action: np.ndarray
    action_limit: np.ndarray

    @classmethod
    def create(cls, action_dim: int, action_limit) -> "Actuator":
        limit = np.broadcast_to(np.asarray(action_limit, dtype=float), (action_dim,)).copy()
        if np.any(limit <= 0):
            raise ValueError("action limits must be positive")
        return cls(held_action=np.zeros(action_dim), action_limit=limit)


@dataclass
class LinearSystem:
    """Discrete-time dynamics x[k+1] = A x[k] + B u[k]."""

    A: np.ndarray
    B: np.ndarray
    dt: float

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        if self.A.ndim != 2 or self.A.shape[0] != self.A.shape[1]:
            raise DimensionError("A must be square")
        if self.B.ndim != 2 or self.B.shape[0] != self.A.shape[0]:
            raise DimensionError("B row count must match A")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def input_dim(self) -> int:
        return self.B.shape[1]


def pendulum_accel(theta, theta_dot, u, params: PendulumParams):
    """Angular acceleration of the torque-driven pendulum about the top."""
    g, m, l = params.gravity, params.mass, params.length
    return 3.0 * g / (2.0 * l) * np.sin(theta) + 3.0 / (m * l * l) * u


def pendulum_step(state, u, params: PendulumParams, noise=None):
    """One semi-implicit Euler step (velocity first, matching the reference env).

    `state` is (theta, theta_dot); `u` a scalar or length-1 array. Optional
    additive process noise (same shape as the state) is applied after the
    deterministic update. Returns the next state with wrapped angle.
    """
    state = np.asarray(state, dtype=float)
    if state.shape != (2,):
        raise DimensionError("pendulum state must have shape (2,)")
    u = float(np.asarray(u).reshape(-1)[0])
    u = float(np.clip(u, -params.max_torque, params.max_torque))
    theta, theta_dot = state
    new_theta_dot = theta_dot + pendulum_accel(theta, theta_dot, u, params) * params.dt
    new_theta_dot = float(np.clip(new_theta_dot, -params.max_speed, params.max_speed))
    new_theta = theta + new_theta_dot * params.dt
    nxt = np.array([wrap_angle(new_theta), new_theta_dot])
    if noise is not None:
        noise = np.asarray(noise, dtype=float)
        if noise.shape != (2,):
            raise DimensionError("noise must match the state dimension")
        nxt = nxt + noise
        nxt[0] = wrap_angle(nxt[0])
    return nxt


def control_reward(state, u, params: PendulumParams) -> float:
    """Quadratic control reward -(theta^2 + 0.1 theta_dot^2 + w u^2)."""
    theta = float(wrap_angle(np.asarray(state, dtype=float)[0]))
    theta_dot = float(np.asarray(state, dtype=float)[1])
    u = float(np.asarray(u).reshape(-1)[0])
    return -(theta * theta + 0.1 * theta_dot * theta_dot + params.ctrl_weight * u * u)


def step_zoh(state, actuator: Actuator, delta: int, new_action=None,
             noise=None, params: PendulumParams | None = None,
             sys: LinearSystem | None = None):
    """Advance the plant one step under ZOH actuation.

    On a communication event (delta=1) the actuator latches `new_action`;
    otherwise the held action is reapplied. Exactly one of `params`
    (nonlinear pendulum) or `sys` (linear dynamics) selects the plant.
    Returns (next_state, applied_action).
    """
    if delta not in (0, 1):
        raise ValueError("delta must be 0 or 1")
    if delta == 1:
        if new_action is None:
            raise ValueError("new_action required when delta = 1")
        new_action = np.asarray(new_action, dtype=float).reshape(-1)
        if new_action.shape != actuator.held_action.shape:
            raise DimensionError("new_action dimension mismatch")
        if np.any(np.abs(new_action) > actuator.action_limit + 1e-12):
            raise ValueError("new_action exceeds actuator limits")
        actuator.held_action = new_action.copy()
    elif new_action is not None:
        raise ValueError("new_action must be absent when delta = 0")
    applied = actuator.held_action.copy()
    if (params is None) == (sys is None):
        raise ValueError("provide exactly one of params or sys")
    if params is not None:
        nxt = pendulum_step(state, applied, params, noise=noise)
    else:
        nxt = step_linear(sys, state, applied)
        if noise is not None:
            nxt = nxt + np.asarray(noise, dtype=float)
    return nxt, applied


def step_linear(sys: LinearSystem, x, u):
    """Exact linear step A x + B u."""
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if x.shape[0] != sys.state_dim:
        raise DimensionError("state dimension mismatch")
    if u.shape[0] != sys.input_dim:
        raise DimensionError("input dimension mismatch")
    return sys.A @ x + sys.B @ u


def linearize_pendulum(params: PendulumParams) -> LinearSystem:
    """Linearize the pendulum about the upright equilibrium and discretize.

    The continuous Jacobian A_c = [[0, 1], [3g/2l, 0]], B_c = [0, 3/(m l^2)]^T
    is discretized exactly via the matrix exponential of the augmented block
    [[A_c, B_c], [0, 0]] scaled by dt.
    """
    g, m, l = params.gravity, params.mass, params.length
    a_c = np.array([[0.0, 1.0], [3.0 * g / (2.0 * l), 0.0]])
    b_c = np.array([[0.0], [3.0 / (m * l * l)]])
    n, mdim = 2, 1
    blk = np.zeros((n + mdim, n + mdim))
    blk[:n, :n] = a_c
    blk[:n, n:] = b_c
    disc = expm(blk * params.dt)
    return LinearSystem(A=disc[:n, :n], B=disc[:n, n:], dt=params.dt)


@dataclass
class InitDistribution:
    """Uniform box over (theta, theta_dot) initial states."""

    theta_range: tuple[float, float] = (-0.3, 0.3)
    theta_dot_range: tuple[float, float] = (-0.3, 0.3)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        theta = rng.uniform(*self.theta_range)
        theta_dot = rng.uniform(*self.theta_dot_range)
        return np.array([theta, theta_dot])


@dataclass
class Pendulum:
    """Pendulum plant bundling parameters, reset distribution and noise."""

    params: PendulumParams = field(default_factory=PendulumParams)
    init: InitDistribution = field(default_factory=InitDistribution)
    noise_std: float = 0.0
    horizon: int = 200

    @property
    def state_dim(self) -> int:
        return 2

    @property
    def action_dim(self) -> int:
        return 1

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return self.init.sample(rng)

    def noise(self, rng: np.random.Generator):
        if self.noise_std <= 0.0:
            return None
        return rng.normal(0.0, self.noise_std, size=2)

    def step(self, state, u, rng: np.random.Generator | None = None):
        noise = self.noise(rng) if rng is not None else None
        return pendulum_step(state, u, self.params, noise=noise)

    def reward(self, state, u) -> float:
        return control_reward(state, u, self.params)


def rollout_trace_rows(states, actions, deltas, rewards):
    """Yield CSV rows (k, theta, theta_dot, u, delta, r_ctrl) for a rollout."""
    for k, (x, u, d, r) in enumerate(zip(states, actions, deltas, rewards)):
        yield (k, float(x[0]), float(x[1]), float(np.asarray(u).reshape(-1)[0]),
               int(d), float(r))
