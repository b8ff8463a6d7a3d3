"""The ETC policy set.

A PolicySet bundles the policy over options (per-option logit streams fed to a
softmax), the intra-option Gaussian control policy, and the split-stream Q
estimator. It offers stochastic sampling for training and the deterministic
Z = zeta_0 - zeta_1 decision rule used for verification.

Option semantics:
  "zoh"  - reapply the held action, no communication (delta = 0)
  "net"  - sample/compute a fresh action from the attached policy net (delta = 1)
  "zero" - transmit a zero action (delta = 1)
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import neuralnet as nn

OPTION_ZOH = 0
OPTION_COMPUTE = 1
OPTION_ZERO = 2

ETC_SEMANTICS = ("zoh", "net")
ETC3_SEMANTICS = ("zoh", "net", "zero")
PERIODIC_SEMANTICS = ("net", "net")

LOG_2PI = float(np.log(2.0 * np.pi))


class PolicyError(ValueError):
    pass


@dataclass
class PolicySet:
    """Policy over options, intra-option policy nets, and Q streams."""

    mu_streams: list[nn.MlpNetwork]
    pi_nets: list[nn.MlpNetwork]
    q_streams: list[nn.MlpNetwork]
    semantics: tuple[str, ...]
    action_limit: np.ndarray
    pi_eval_count: int = field(default=0, repr=False)

    def __post_init__(self):
        self.action_limit = np.asarray(self.action_limit, dtype=float).reshape(-1)
        k = len(self.semantics)
        if len(self.mu_streams) != k or len(self.q_streams) != k:
            raise PolicyError("one mu and q stream per option required")
        if len(self.pi_nets) != sum(s == "net" for s in self.semantics):
            raise PolicyError("one pi net per 'net' option required")
        for s in self.semantics:
            if s not in ("zoh", "net", "zero"):
                raise PolicyError(f"unknown option semantic {s!r}")

    @property
    def option_count(self) -> int:
        return len(self.semantics)

    @property
    def obs_dim(self) -> int:
        return self.mu_streams[0].input_dim

    @property
    def action_dim(self) -> int:
        return self.action_limit.shape[0]

    @property
    def pi_net(self) -> nn.MlpNetwork:
        """The intra-option policy of the (last) 'net' option."""
        return self.pi_nets[-1]

    def pi_net_for(self, option: int) -> nn.MlpNetwork:
        if self.semantics[option] != "net":
            raise PolicyError(f"option {option} has no policy net")
        idx = sum(s == "net" for s in self.semantics[:option])
        return self.pi_nets[idx]

    def copy(self) -> "PolicySet":
        return PolicySet(
            mu_streams=[m.copy() for m in self.mu_streams],
            pi_nets=[p.copy() for p in self.pi_nets],
            q_streams=[q.copy() for q in self.q_streams],
            semantics=self.semantics,
            action_limit=self.action_limit.copy(),
        )


def make_policy_set(obs_dim: int, action_dim: int, action_limit,
                    rng: np.random.Generator, hidden=(64, 64),
                    activation: str = "tanh",
                    semantics: tuple[str, ...] = ETC_SEMANTICS,
                    init_log_std: float = -0.5) -> PolicySet:
    """Initialize a fresh PolicySet with the given stream architecture."""
    sizes_scalar = [obs_dim, *hidden, 1]
    sizes_pi = [obs_dim, *hidden, action_dim]
    mu = [nn.init_network(sizes_scalar, activation, "linear", rng)
          for _ in semantics]
    pis = []
    for s in semantics:
        if s == "net":
            pi = nn.init_network(sizes_pi, activation, "gaussian", rng)
            pi.log_std[...] = init_log_std
            pis.append(pi)
    q = [nn.init_network(sizes_scalar, activation, "linear", rng)
         for _ in semantics]
    return PolicySet(mu, pis, q, tuple(semantics), action_limit)


def option_logits(ps: PolicySet, obs) -> np.ndarray:
    """Per-option logits zeta_o (batched: one row per sample)."""
    obs = np.asarray(obs, dtype=float)
    single = obs.ndim == 1
    if single:
        obs = obs[None, :]
    cols = [nn.forward(m, obs)[:, 0] for m in ps.mu_streams]
    z = np.stack(cols, axis=1)
    return z[0] if single else z


def option_probs(ps: PolicySet, obs) -> np.ndarray:
    """Softmax over the option logits."""
    z = option_logits(ps, obs)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    if not np.all(np.isfinite(p)):
        raise PolicyError("non-finite option probabilities")
    return p


def decide_deterministic(ps: PolicySet, obs) -> int:
    """ZOH iff Z = zeta_0 - zeta_1 > 0; ties (Z = 0) communicate."""
    if ps.semantics != ETC_SEMANTICS:
        raise PolicyError("deterministic decision requires the 2-option ETC set")
    if any(m.hidden_activation != "relu" for m in ps.mu_streams):
        raise PolicyError("deterministic decision requires ReLU-mode streams")
    z = option_logits(ps, obs)
    zval = float(z[0] - z[1])
    return OPTION_ZOH if zval > 0.0 else OPTION_COMPUTE


def sample_option(ps: PolicySet, obs, rng: np.random.Generator):
    """Draw an option from mu; returns (option, log_prob)."""
    p = option_probs(ps, obs)
    o = int(rng.choice(ps.option_count, p=p))
    return o, float(np.log(p[o]))


def gaussian_log_prob(mean, log_std, u) -> float:
    mean = np.asarray(mean, dtype=float).reshape(-1)
    log_std = np.asarray(log_std, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    z = (u - mean) / np.exp(log_std)
    return float(-0.5 * np.sum(z * z) - np.sum(log_std)
                 - 0.5 * LOG_2PI * u.shape[0])


def sample_action(ps: PolicySet, obs, rng: np.random.Generator,
                  option: int = OPTION_COMPUTE):
    """Sample an action from the intra-option Gaussian for a 'net' option.

    Returns (unclipped action, log_prob of that action). The evaluation
    counter tracks that pi is never touched on ZOH steps.
    """
    pi = ps.pi_net_for(option)
    ps.pi_eval_count += 1
    out = nn.forward(pi, np.asarray(obs, dtype=float))
    k = pi.head_dim
    mean, log_std = out[:k], out[k:]
    u = mean + np.exp(log_std) * rng.standard_normal(k)
    return u, gaussian_log_prob(mean, log_std, u)


def action_mean(ps: PolicySet, obs, option: int = OPTION_COMPUTE) -> np.ndarray:
    pi = ps.pi_net_for(option)
    ps.pi_eval_count += 1
    out = nn.forward(pi, np.asarray(obs, dtype=float))
    return out[:pi.head_dim]


def apply_option(ps: PolicySet, obs, option: int, sampled_action=None):
    """Map an option choice to (delta, action to transmit or None)."""
    if not 0 <= option < ps.option_count:
        raise PolicyError(f"invalid option {option}")
    semantic = ps.semantics[option]
    if semantic == "zoh":
        return 0, None
    if semantic == "zero":
        return 1, np.zeros(ps.action_dim)
    if sampled_action is None:
        raise PolicyError("sampled action required for a 'net' option")
    u = np.asarray(sampled_action, dtype=float).reshape(-1)
    return 1, np.clip(u, -ps.action_limit, ps.action_limit)


def q_values(ps: PolicySet, obs) -> np.ndarray:
    """One Q estimate per option (batched: one row per sample)."""
    obs = np.asarray(obs, dtype=float)
    single = obs.ndim == 1
    if single:
        obs = obs[None, :]
    cols = [nn.forward(q, obs)[:, 0] for q in ps.q_streams]
    out = np.stack(cols, axis=1)
    if not np.all(np.isfinite(out)):
        raise PolicyError("non-finite Q output")
    return out[0] if single else out


def state_value(ps: PolicySet, obs) -> np.ndarray:
    """V(x) = sum_o mu(o|x) Q(x, o)."""
    p = option_probs(ps, obs)
    q = q_values(ps, obs)
    return np.sum(p * q, axis=-1)


# --- persistence -----------------------------------------------------------

_MANIFEST_VERSION = 1


def save_policy_set(ps: PolicySet, directory: str) -> str:
    """Write the model files plus a manifest; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    files = {}
    for i, m in enumerate(ps.mu_streams):
        files[f"mu_stream_{i}"] = f"mu_stream_{i}.json"
    for i, p in enumerate(ps.pi_nets):
        files[f"pi_net_{i}"] = f"pi_net_{i}.json"
    for i, q in enumerate(ps.q_streams):
        files[f"q_stream_{i}"] = f"q_stream_{i}.json"
    for key, fname in files.items():
        kind, idx = key.rsplit("_", 1)
        net = {"mu_stream": ps.mu_streams, "pi_net": ps.pi_nets,
               "q_stream": ps.q_streams}[kind][int(idx)]
        with open(os.path.join(directory, fname), "w") as fh:
            fh.write(nn.save(net))
    manifest = {
        "manifest_version": _MANIFEST_VERSION,
        "semantics": list(ps.semantics),
        "obs_dim": ps.obs_dim,
        "action_dim": ps.action_dim,
        "action_limit": [float(v) for v in ps.action_limit],
        "files": files,
    }
    path = os.path.join(directory, "policy_manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def load_policy_set(manifest_path: str) -> PolicySet:
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("manifest_version") != _MANIFEST_VERSION:
        raise PolicyError("unsupported policy manifest version")
    directory = os.path.dirname(manifest_path)

    def read(fname):
        with open(os.path.join(directory, fname)) as fh:
            return nn.load(fh.read())

    files = manifest["files"]
    semantics = tuple(manifest["semantics"])
    mu = [read(files[f"mu_stream_{i}"]) for i in range(len(semantics))]
    pis = [read(files[f"pi_net_{i}"])
           for i in range(sum(s == "net" for s in semantics))]
    q = [read(files[f"q_stream_{i}"]) for i in range(len(semantics))]
    ps = PolicySet(mu, pis, q, semantics, np.array(manifest["action_limit"]))
    if ps.obs_dim != manifest["obs_dim"]:
        raise PolicyError("manifest observation layout mismatch")
    return ps
