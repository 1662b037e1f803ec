"""Command-line entry point.

Subcommands: gen-scenarios, build-db, train, attack, benchmark, defend.
Values may come from a key=value config file via --config; explicit flags
take precedence over the file, which takes precedence over defaults.
Exit codes: 0 success, 2 validation error, 3 backend error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .agent import RemoteBackend, RemoteConfig, SusceptibilityModel
from .attack import execute_attack
from .attackdb import AttackDB, build_db
from .cmdgen import GeneratorPolicy, load_policy, optimize_online, save_policy
from .defenses import apply_defense
from .errors import BackendError, ToolsnareError
from .harness import (
    APPROACHES,
    run_attack_case,
    run_benchmark,
    run_defense_evaluation,
    write_report,
)
from .scenarios import gen_scenarios, load_scenarios, save_scenarios

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_BACKEND = 3


def _parse_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip().strip('"')
    return values


class _ConfigResolver:
    """flag > config file > default."""

    def __init__(self, args: argparse.Namespace, file_values: dict[str, str]):
        self.args = args
        self.file_values = file_values

    def get(self, key: str, default, cast=None):
        flag = getattr(self.args, key, None)
        if flag is not None:
            return flag
        if key in self.file_values:
            raw = self.file_values[key]
            caster = cast or type(default)
            return caster(raw) if caster is not type(None) else raw
        return default

    def get_int(self, key: str, default: int) -> int:
        return int(self.get(key, default, cast=int))


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--seed", type=int, default=None, help="run seed (default 0)")
    parser.add_argument("--jobs", type=int, default=None, help="parallel workers (default 1)")


def _backend_factory_from(args) -> tuple:
    """(factory, kind); the factory builds a backend per scenario, or None for sim."""
    kind = getattr(args, "backend", None) or "sim"
    if kind == "sim":
        return None, "sim"
    url = getattr(args, "remote_url", None)
    if not url:
        raise ValueError("--backend remote requires --remote-url")
    token_env = getattr(args, "remote_token_env", None)
    token = os.environ.get(token_env) if token_env else None
    config = RemoteConfig(url=url, model=getattr(args, "remote_model", None) or "default", auth_token=token)
    return (lambda scenario: RemoteBackend(config)), "remote"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="toolsnare",
        description="Deterministic red-team simulator for tool-side command-injection theft.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenarios", help="generate a seeded synthetic scenario suite")
    _add_common(p)
    p.add_argument("--count", type=int, default=None, help="number of scenarios (default 20)")
    p.add_argument("--min-len", type=int, default=2)
    p.add_argument("--max-len", type=int, default=6)
    p.add_argument("--out", required=True, help="output scenario JSON file")
    p.set_defaults(func=cmd_gen_scenarios)

    p = sub.add_parser("build-db", help="extract attack cases from scenarios into a database")
    _add_common(p)
    p.add_argument("--scenarios", required=True)
    p.add_argument("--attackdb", required=True, help="output JSONL case database")
    p.add_argument("--k", type=int, default=None, help="candidate commands per pair (default 3)")
    p.set_defaults(func=cmd_build_db)

    p = sub.add_parser("train", help="optimise the command generator online")
    _add_common(p)
    p.add_argument("--scenarios", required=True)
    p.add_argument("--attackdb", help="warm-start case database (JSONL)")
    p.add_argument("--attackdb-out", help="write the grown database back to this path")
    p.add_argument("--policy", required=True, help="output policy checkpoint (JSON)")
    p.add_argument("--episodes", type=int, default=None, help="training episodes (default 480)")
    p.add_argument("--batch-size", type=int, default=None, help="episodes per logged iteration (default 32)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default 1e-3)")
    p.add_argument("--no-attackdb", action="store_true", help="disable retrieval and writeback")
    p.add_argument("--no-sentiment", action="store_true", help="drop the sentiment penalty from rewards")
    p.add_argument("--log", help="write the per-iteration training log (JSONL)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="run a single attack case and print the result")
    _add_common(p)
    p.add_argument("--scenarios", required=True)
    p.add_argument("--scenario-id", help="scenario to attack (default: first)")
    p.add_argument("--approach", default="AutoCMD", choices=APPROACHES)
    p.add_argument("--attackdb")
    p.add_argument("--policy")
    p.add_argument("--defense", default="", help="comma list from {infer,param,dast}")
    p.add_argument("--backend", choices=("sim", "remote"), default=None)
    p.add_argument("--remote-url")
    p.add_argument("--remote-model")
    p.add_argument("--remote-token-env", help="environment variable holding the bearer token")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("benchmark", help="compare approaches over a scenario suite")
    _add_common(p)
    p.add_argument("--scenarios", required=True)
    p.add_argument("--approaches", default=",".join(APPROACHES), help="comma list of approaches")
    p.add_argument("--attackdb")
    p.add_argument("--policy", help="trained policy checkpoint for AutoCMD")
    p.add_argument("--train-first", action="store_true", help="train AutoCMD before evaluating")
    p.add_argument("--train-split", type=float, default=None, help="train fraction, e.g. 0.8")
    p.add_argument("--defense", default="", help="comma list from {infer,param,dast}")
    p.add_argument("--pre-learn-params", action="store_true", help="agent pre-learns tool parameter lists")
    p.add_argument("--report-dir", default=None)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("defend", help="evaluate each defense against the armed suite")
    _add_common(p)
    p.add_argument("--scenarios", required=True)
    p.add_argument("--attackdb")
    p.add_argument("--policy", required=True)
    p.add_argument("--defense", default="infer,param,dast")
    p.add_argument("--report-dir", default=None)
    p.set_defaults(func=cmd_defend)

    return parser


def _load_db(path: str | None) -> AttackDB | None:
    if not path:
        return None
    return AttackDB.load(path)


def _split_csv(text: str) -> list[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_scenarios(args, cfg: _ConfigResolver) -> int:
    scenarios = gen_scenarios(
        count=cfg.get_int("count", 20),
        seed=cfg.get_int("seed", 0),
        min_len=args.min_len,
        max_len=args.max_len,
    )
    save_scenarios(scenarios, args.out)
    print(f"wrote {len(scenarios)} scenarios to {args.out}")
    return EXIT_OK


def cmd_build_db(args, cfg: _ConfigResolver) -> int:
    scenarios = load_scenarios(args.scenarios)
    db = build_db(scenarios, k=cfg.get_int("k", 3), seed=cfg.get_int("seed", 0))
    db.save(args.attackdb)
    print(f"extracted {len(db)} cases into {args.attackdb}")
    return EXIT_OK


def cmd_train(args, cfg: _ConfigResolver) -> int:
    scenarios = load_scenarios(args.scenarios)
    db = _load_db(args.attackdb) or AttackDB()
    policy = GeneratorPolicy(learning_rate=float(cfg.get("lr", 1e-3, cast=float)))
    log = optimize_online(
        scenarios,
        policy,
        db,
        episodes=cfg.get_int("episodes", 480),
        batch_size=cfg.get_int("batch_size", 32),
        seed=cfg.get_int("seed", 0),
        use_attackdb=not args.no_attackdb,
        sentiment_penalty=not args.no_sentiment,
    )
    save_policy(policy, args.policy)
    if args.attackdb_out:
        db.save(args.attackdb_out)
    if args.log:
        log.save(args.log)
    final = log.records[-1].mean_reward if log.records else float("nan")
    print(
        f"trained on {len(log.episode_rewards)} episodes over {len(log.records)} "
        f"iterations; final iteration mean reward {final:.3f}; policy -> {args.policy}"
    )
    return EXIT_OK


def cmd_attack(args, cfg: _ConfigResolver) -> int:
    scenarios = load_scenarios(args.scenarios)
    if not scenarios:
        raise ValueError(f"{args.scenarios}: no scenarios")
    if args.scenario_id:
        matches = [s for s in scenarios if s.id == args.scenario_id]
        if not matches:
            raise ValueError(f"scenario id {args.scenario_id!r} not found")
        scenario = matches[0]
    else:
        scenario = scenarios[0]
    backend_factory, _ = _backend_factory_from(args)
    policy = load_policy(args.policy) if args.policy else None
    defenses = _split_csv(args.defense)
    pipeline = apply_defense(execute_attack, defenses) if defenses else execute_attack
    result = run_attack_case(
        scenario,
        args.approach,
        db=_load_db(args.attackdb),
        policy=policy,
        seed=cfg.get_int("seed", 0),
        sample_seed=cfg.get_int("seed", 0) + 7919,
        pipeline=pipeline,
        backend_factory=backend_factory,
    )
    print(
        json.dumps(
            {
                "scenario": scenario.id,
                "approach": args.approach,
                "steal": result.steal_success,
                "exposed": result.exposed,
                "stealthy_theft": result.stealthy_theft,
                "victim": result.victim,
                "stolen": dict(result.stolen),
                "blocked_by": result.blocked_by,
                "findings": [
                    {
                        "defense": f.defense.value,
                        "rule": f.rule.value,
                        "location": f.location,
                        "severity": f.severity.value,
                        "detail": f.detail,
                    }
                    for f in result.findings
                ],
            },
            indent=2,
            sort_keys=True,
        )
    )
    return EXIT_OK


def cmd_benchmark(args, cfg: _ConfigResolver) -> int:
    scenarios = load_scenarios(args.scenarios)
    susceptibility = SusceptibilityModel(pre_learn_params=args.pre_learn_params)
    report = run_benchmark(
        scenarios,
        approaches=_split_csv(args.approaches),
        defenses=_split_csv(args.defense),
        seed=cfg.get_int("seed", 0),
        db=_load_db(args.attackdb),
        policy=load_policy(args.policy) if args.policy else None,
        susceptibility=susceptibility,
        jobs=cfg.get_int("jobs", 1),
        train_first=args.train_first,
        train_split=args.train_split,
    )
    report_dir = cfg.get("report_dir", "reports/benchmark")
    paths = write_report(report, report_dir)
    sys.stdout.write(report.summary_csv())
    print(f"report -> {paths['report']}")
    return EXIT_OK


def cmd_defend(args, cfg: _ConfigResolver) -> int:
    scenarios = load_scenarios(args.scenarios)
    report = run_defense_evaluation(
        scenarios,
        policy=load_policy(args.policy),
        db=_load_db(args.attackdb),
        defenses=_split_csv(args.defense),
        seed=cfg.get_int("seed", 0),
    )
    report_dir = cfg.get("report_dir", "reports/defense")
    paths = write_report(report, report_dir)
    print(f"base asr_theft {report.base.asr_theft:.3f} over {report.base.n} cases")
    for name, stats in report.defended.items():
        print(
            f"{name}: asr_theft {stats['asr_theft']:.3f} "
            f"(relative reduction {stats['relative_reduction']:.1%})"
        )
    print(f"report -> {paths['report']}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    file_values = {}
    if getattr(args, "config", None):
        try:
            file_values = _parse_config_file(args.config)
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
    cfg = _ConfigResolver(args, file_values)
    try:
        return args.func(args, cfg)
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (ToolsnareError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    raise SystemExit(main())
