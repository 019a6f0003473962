"""Command-line entry point: ``python -m adload <subcommand> [flags]``.

Exit status is 0 on success, 2 when a validation check fails and 1 on any
error (bad flags, unreadable config, schema mismatch).
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path
from typing import List, Optional, Sequence

from .action_space import ActionConstraints
from .dataset import LogFormatError, read_log, validate_propensities, write_log
from .harness import (
    ConfigError,
    HarnessConfig,
    build_report,
    evaluate,
    fit_rewards,
    load_config,
    non_dominated_rows,
    plot_pareto,
    run_pareto,
    simulate,
    train,
    write_estimates_csv,
    write_pareto_csv,
)
from .policies import ConstraintMismatchError, load_policy, save_policy
from .simulator import FULL_CATALOG, sampler_fixture_log

EXIT_OK, EXIT_ERROR, EXIT_VALIDATION = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 2 is reserved for validation failures
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--out-dir", default=".", help="directory for outputs")
    common.add_argument("--beta", type=float, help="SAT weight of the final reward")
    common.add_argument("--estimator", choices=["IPW", "DR"], help="training objective")
    common.add_argument("--clip", type=float, help="importance-weight clip level")
    common.add_argument("--rounds", type=int, default=1, help="retraining rounds with fresh uniform slices")

    p = _Parser(prog="adload", description="Ad-load policy learning and off-policy evaluation harness")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    s = sub.add_parser("simulate-log", parents=[common], help="generate a log from the simulator")
    s.add_argument("--n", type=int, help="records (decision mode) or users (session mode)")
    s.add_argument("--sampler-fixture", type=float, metavar="BOOST",
                   help="write a single-context fixture log claiming uniform propensities while action 0 is sampled BOOST times too often")
    s.add_argument("--output", default="log.jsonl")
    v = sub.add_parser("validate-propensities", parents=[common], help="run the propensity tests on a log")
    v.add_argument("log")
    f = sub.add_parser("fit-rewards", parents=[common], help="fit scalarization weights and a reward model")
    f.add_argument("log")
    t = sub.add_parser("train-policy", parents=[common], help="train a softmax policy off-policy")
    t.add_argument("log")
    t.add_argument("--output", default="policy.npz")
    e = sub.add_parser("evaluate", parents=[common], help="score one policy with every estimator")
    e.add_argument("policy")
    e.add_argument("log")
    sub.add_parser("pareto", parents=[common], help="beta sweep against the baselines")
    sub.add_parser("report", parents=[common], help="merge outputs into report.csv and redraw the plot")
    return p


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> HarnessConfig:
    return load_config(args.config).with_seed(args.seed)


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _out(args)
    if args.sampler_fixture is not None:
        log = sampler_fixture_log(args.n or 100_000, cfg.seed, boost=args.sampler_fixture)
    else:
        log = simulate(cfg, n=args.n)
    write_log(out / args.output, log)
    print(f"wrote {len(log)} records to {out / args.output}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _config(args)
    log = read_log(args.log)
    report = validate_propensities(log, cfg.experiment.significance, cfg.experiment.tolerance)
    text = report.summary()
    print(text)
    (_out(args) / "propensity_report.txt").write_text(text + "\n")
    return EXIT_OK if report.passed else EXIT_VALIDATION


def cmd_fit_rewards(args) -> int:
    cfg = _config(args)
    log = read_log(args.log)
    rep = fit_rewards(log, cfg, args.beta)
    payload = rep.to_dict()
    (_out(args) / "reward_fit.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(json.dumps(payload, indent=2))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    log = read_log(args.log)
    beta = 0.8 if args.beta is None else args.beta
    policies = train(log, cfg, beta, args.estimator or cfg.experiment.estimator, rounds=max(1, args.rounds))
    out = _out(args)
    for k, pol in enumerate(policies[:-1], start=1):
        save_policy(pol, out / f"round{k}_{args.output}")
    save_policy(policies[-1], out / args.output)
    print(f"saved {policies[-1].name} to {out / args.output}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    log = read_log(args.log)
    policy = load_policy(args.policy, expected_constraints=log.constraints)
    beta = 0.8 if args.beta is None else args.beta
    clip = args.clip if args.clip is not None else cfg.experiment.clip
    ests, truth = evaluate(policy, log, cfg, beta, clip, with_truth=args.config is not None)
    path = _out(args) / "estimates.csv"
    write_estimates_csv(path, policy.name, ests, truth)
    for e in ests:
        print(f"{e.estimator_kind:>10}: {e.value:.6f} +/- {e.std_error:.6f}")
    if truth is not None:
        print(f"{'truth':>10}: {truth.v_total:.6f} ({truth.method})")
    return EXIT_OK


def cmd_pareto(args) -> int:
    cfg = _config(args)
    out = _out(args)
    res = run_pareto(cfg)
    write_pareto_csv(out / "pareto.csv", res.rows + res.estimate_rows)
    plot_pareto(res.rows, out / "pareto.svg")
    front = non_dominated_rows(res.rows)
    for r in res.rows:
        mark = "*" if r.policy_name in front else " "
        print(f"{mark} {r.policy_name:>22}  SAT loss {r.sat_loss_pct:7.2f}%  ads loss {r.ads_loss_pct:7.2f}%")
    return EXIT_OK


def cmd_report(args) -> int:
    path = build_report(_out(args))
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {
    "simulate-log": cmd_simulate,
    "validate-propensities": cmd_validate,
    "fit-rewards": cmd_fit_rewards,
    "train-policy": cmd_train,
    "evaluate": cmd_evaluate,
    "pareto": cmd_pareto,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = _parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
    except (ConfigError, LogFormatError, ConstraintMismatchError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
