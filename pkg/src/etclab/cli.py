"""Command-line front door: train / evaluate / baseline-sweep / verify /
retrain / plot.

Every run writes a `resolved_config.json` manifest into the output directory
echoing the fully-resolved configuration (defaults included), so any artifact
can be reproduced from its manifest alone. Exit codes: 0 success, 1 runtime
failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import baselines, config, retrainer, trainer, verifier
from . import policy as pol
from .envsim import linearize_pendulum, rollout_trace_rows


def _write_manifest(out_dir: str, args: argparse.Namespace, resolved: dict):
    payload = {
        "subcommand": args.subcommand,
        "seed": getattr(args, "seed", None),
        "resolved": resolved,
    }
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _write_csv(path: str, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _read_csv(path: str):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return [], []
        rows = [row for row in reader if row]
    return header, rows


def _summary(values) -> tuple[float, float]:
    return float(np.mean(values)), float(np.std(values))


def cmd_train(args) -> int:
    cfg = config.apply_overrides(config.parse_config(args.config), args.set)
    env = config.pendulum_from_config(cfg)
    tc = config.train_config_from(cfg)
    os.makedirs(args.out, exist_ok=True)
    _write_manifest(args.out, args, {
        "plant": config.resolved_dict(env.params),
        "train": config.resolved_dict(tc),
    })
    result = trainer.train(env, tc, args.seed)
    pol.save_policy_set(result.best_policy, os.path.join(args.out, "policy"))
    _write_csv(
        os.path.join(args.out, "metrics.csv"),
        ["epoch", "mean_reward", "mean_r_ctrl", "gamma", "tau"]
        + [f"option{i}_frac" for i in range(result.policy.option_count)],
        [(m.epoch, m.mean_reward, m.mean_r_ctrl, m.gamma_savings, m.tau)
         + m.option_fracs for m in result.metrics],
    )
    print(f"trained {tc.epochs} epochs, best mean reward "
          f"{result.best_reward:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = config.apply_overrides(config.parse_config(args.config), args.set)
    env = config.pendulum_from_config(cfg)
    ps = pol.load_policy_set(args.policy)
    os.makedirs(args.out, exist_ok=True)
    _write_manifest(args.out, args, {
        "plant": config.resolved_dict(env.params),
        "policy": args.policy,
        "rollouts": args.rollouts,
        "deterministic": args.deterministic,
    })
    stats, traces = trainer.evaluate(
        env, ps, args.rollouts, args.seed,
        deterministic_actions=args.deterministic,
        lambda_comm=float(cfg.get("lambda_comm", 0.0)))
    _write_csv(
        os.path.join(args.out, "eval.csv"),
        ["rollout", "reward", "r_ctrl_abs", "gamma", "stable"],
        [(i, s["reward"], s["r_ctrl_abs"], s["gamma"], int(s["stable"]))
         for i, s in enumerate(stats)],
    )
    rows = []
    for i, (states, actions, deltas, rewards) in enumerate(traces):
        for row in rollout_trace_rows(states, actions, deltas, rewards):
            rows.append((i,) + row)
    _write_csv(
        os.path.join(args.out, "traces.csv"),
        ["rollout", "k", "theta", "theta_dot", "u", "delta", "r_ctrl"],
        rows,
    )
    for key in ("reward", "r_ctrl_abs", "gamma"):
        mean, std = _summary([s[key] for s in stats])
        print(f"{key}: mean {mean:.4f} std {std:.4f}")
    print(f"stable: {sum(s['stable'] for s in stats)}/{len(stats)}")
    return 0


def cmd_baseline_sweep(args) -> int:
    cfg = config.apply_overrides(config.parse_config(args.config), args.set)
    env = config.pendulum_from_config(cfg)
    if "xi_values" in cfg:
        v = cfg["xi_values"]
        xi_grid = [float(x) for x in (v if isinstance(v, tuple) else (v,))]
    else:
        xi_grid = list(np.linspace(float(cfg.get("xi_min", 0.0)),
                                   float(cfg.get("xi_max", 1.0)),
                                   int(cfg.get("xi_count", 11))))
    os.makedirs(args.out, exist_ok=True)
    _write_manifest(args.out, args, {
        "plant": config.resolved_dict(env.params),
        "rule": args.rule,
        "xi_grid": xi_grid,
        "rollouts": args.rollouts,
    })
    rows = baselines.baseline_sweep(env, args.rule, xi_grid, args.seed,
                                    rollouts=args.rollouts)
    _write_csv(
        os.path.join(args.out, "sweep.csv"),
        ["rule", "xi", "seed", "gamma", "r_ctrl_abs", "stable"],
        [(r["rule"], r["xi"], r["seed"], r["gamma"], r["r_ctrl_abs"],
          int(r["stable"])) for r in rows],
    )
    for s in baselines.summarize_sweep(rows):
        print(f"xi {s['xi']:.4f}: gamma {s['gamma_mean']:.3f} "
              f"|R_ctrl| {s['r_ctrl_abs_mean']:.3f} "
              f"stable {s['stable']}")
    return 0


def cmd_verify(args) -> int:
    cfg = config.apply_overrides(config.parse_config(args.config), args.set)
    env = config.pendulum_from_config(cfg)
    ps = pol.load_policy_set(args.policy)
    sys_lin = linearize_pendulum(env.params)
    M = config.box_from_config(cfg)
    os.makedirs(args.out, exist_ok=True)
    _write_manifest(args.out, args, {
        "plant": config.resolved_dict(env.params),
        "policy": args.policy,
        "target_lower": M.lower.tolist(),
        "target_upper": M.upper.tolist(),
    })
    points, stats = verifier.check_stability_et(
        ps, sys_lin, M, env.params.max_torque)
    report = {
        "stable": not points,
        "witnesses": [p.tolist() for p in points],
        "stats": stats,
    }
    with open(os.path.join(args.out, "verify.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    if points:
        print(f"SAT: {len(points)} witness(es); target is not invariant")
    else:
        print("UNSAT/stable: target region is positively invariant")
    return 0


def cmd_retrain(args) -> int:
    cfg = config.apply_overrides(config.parse_config(args.config), args.set)
    env = config.pendulum_from_config(cfg)
    ps = pol.load_policy_set(args.policy)
    sys_lin = linearize_pendulum(env.params)
    M = config.box_from_config(cfg)
    rc = retrainer.RetrainConfig()
    for name in vars(rc):
        if name in cfg:
            setattr(rc, name, type(getattr(rc, name))(cfg[name]))
    os.makedirs(args.out, exist_ok=True)
    _write_manifest(args.out, args, {
        "plant": config.resolved_dict(env.params),
        "policy": args.policy,
        "retrain": config.resolved_dict(rc),
        "target_lower": M.lower.tolist(),
        "target_upper": M.upper.tolist(),
    })
    result = retrainer.refine_policy_et(ps, sys_lin, M, env.params.max_torque,
                                        cfg=rc, seed=args.seed)
    pol.save_policy_set(result.policy, os.path.join(args.out, "policy"))
    _write_csv(
        os.path.join(args.out, "retrain_history.csv"),
        ["epoch", "n_crit", "n_commsav", "certified", "gamma_estimate"],
        [(h.epoch, h.n_crit, h.n_commsav, int(h.certified), h.gamma_estimate)
         for h in result.history],
    )
    if result.certified:
        print(f"certified after {result.epochs_used} retraining epoch(s)")
        return 0
    print("not certified within the epoch budget", file=sys.stderr)
    return 1


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    header, rows = _read_csv(args.input)
    if not rows:
        print(f"no data rows in {args.input}", file=sys.stderr)
        return 1
    col = {name: i for i, name in enumerate(header)}
    fig, ax = plt.subplots(figsize=(6, 4))
    if args.kind == "tradeoff":
        gammas = [float(r[col["gamma"]]) for r in rows]
        costs = [float(r[col["r_ctrl_abs"]]) for r in rows]
        ax.scatter(gammas, costs, s=12)
        ax.set_xlabel("communication savings")
        ax.set_ylabel("|R_ctrl|")
    else:
        first = rows[0][col["rollout"]] if "rollout" in col else None
        if first is not None:
            rows = [r for r in rows if r[col["rollout"]] == first]
        ks = [int(r[col["k"]]) for r in rows]
        fig, axes = plt.subplots(4, 1, sharex=True, figsize=(6, 8))
        for axis, name in zip(axes, ("theta", "theta_dot", "u", "delta")):
            vals = [float(r[col[name]]) for r in rows]
            if name == "delta":
                axis.step(ks, vals, where="post")
            else:
                axis.plot(ks, vals)
            axis.set_ylabel(name)
        axes[-1].set_xlabel("step")
    fig.tight_layout()
    fig.savefig(args.out_file, dpi=120)
    plt.close(fig)
    print(f"wrote {args.out_file}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="etclab",
        description="Event-triggered control lab: training, baselines, "
                    "verification, retraining, plotting.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, policy=False):
        p.add_argument("--config", required=True, help="key = value file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry")
        if policy:
            p.add_argument("--policy", required=True,
                           help="policy manifest path")

    p = sub.add_parser("train", help="run the joint-optimization trainer")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="roll a saved policy out")
    common(p, policy=True)
    p.add_argument("--rollouts", type=int, default=10)
    p.add_argument("--deterministic", action="store_true",
                   help="use the control mean instead of sampling")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline-sweep",
                       help="LQR + trigger-law threshold sweep")
    common(p)
    p.add_argument("--rule", required=True, choices=baselines.TRIGGER_KINDS)
    p.add_argument("--rollouts", type=int, default=10)
    p.set_defaults(func=cmd_baseline_sweep)

    p = sub.add_parser("verify", help="invariant-set check of a saved policy")
    common(p, policy=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("retrain", help="verify-refine loop on a saved policy")
    common(p, policy=True)
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("plot", help="render CSVs to image files")
    p.add_argument("--kind", choices=("tradeoff", "trajectory"),
                   default="tradeoff")
    p.add_argument("--input", required=True, help="input CSV path")
    p.add_argument("--out-file", required=True, help="output image path")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (config.ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
