"""Experiment orchestration: approach comparison, defense evaluation, reports.

All runs are seeded; per-case seeds derive from the run seed plus the case
index, so a report is reproducible byte-for-byte. Reports carry no
timestamps for that reason.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .agent import SimulatedBackend, SusceptibilityModel
from .attack import (
    AttackResult,
    MetricsReport,
    execute_attack,
    fixed_cmd,
    fixed_db_cmd,
    metrics,
    poison_param,
)
from .attackdb import AttackDB, ToolSummary, build_db, retrieve
from .cmdgen import GeneratorPolicy, featurize, generate, optimize_online
from .defenses import apply_defense
from .errors import AttackerNotReached, EmptyBatch
from .model import KEY_INFO_KINDS
from .scenarios import Scenario, run_partition

APPROACHES = ("FixedCMD", "PoisonParam", "FixedDBCMD", "AutoCMD")


@dataclass
class BenchmarkReport:
    config: dict
    approaches: dict[str, MetricsReport]
    skipped: dict[str, int]
    cases: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "kind": "benchmark",
            "config": self.config,
            "approaches": {
                name: {**report.as_dict(), "skipped": self.skipped.get(name, 0)}
                for name, report in self.approaches.items()
            },
            "cases": self.cases,
        }

    def summary_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["approach", "ier", "tsr", "asr_theft", "n"])
        for name in sorted(self.approaches):
            report = self.approaches[name]
            writer.writerow(
                [name, f"{report.ier:.4f}", f"{report.tsr:.4f}", f"{report.asr_theft:.4f}", report.n]
            )
        return buf.getvalue()


def _backend_for(scenario: Scenario, susceptibility: SusceptibilityModel | None):
    return SimulatedBackend(scenario.expected_chain, susceptibility)


def _autocmd_command(scenario, db, policy, top_m, sample_seed):
    attacker_spec = scenario.tool(scenario.malicious)
    summary = ToolSummary.from_spec(attacker_spec)
    cases = retrieve(db, summary, top_m) if db is not None and len(db) else []
    features = featurize(cases, attacker_spec)
    return generate(policy, features, seed=sample_seed).command


def run_attack_case(
    scenario: Scenario,
    approach: str,
    *,
    db: AttackDB | None = None,
    policy: GeneratorPolicy | None = None,
    susceptibility: SusceptibilityModel | None = None,
    top_m: int = 3,
    seed: int = 0,
    sample_seed: int = 0,
    pipeline=execute_attack,
    backend_factory=None,
) -> AttackResult:
    """Run one scenario under one approach and return its result."""
    attacker = scenario.malicious
    if backend_factory is not None:
        backend = backend_factory(scenario)
    else:
        backend = _backend_for(scenario, susceptibility)
    if approach == "FixedCMD":
        return pipeline(scenario, attacker, fixed_cmd(attacker), backend=backend, seed=seed)
    if approach == "FixedDBCMD":
        summary = ToolSummary.from_spec(scenario.tool(attacker))
        cases = retrieve(db, summary, top_m) if db is not None and len(db) else []
        return pipeline(scenario, attacker, fixed_db_cmd(attacker, cases), backend=backend, seed=seed)
    if approach == "PoisonParam":
        spec = scenario.tool(attacker)
        kinds = sorted(
            {p.value_kind for p in spec.pii_params if p.value_kind in KEY_INFO_KINDS},
            key=lambda k: k.value,
        )
        poisoned = poison_param(spec, kinds)
        return pipeline(scenario, attacker, None, attacker_spec=poisoned, backend=backend, seed=seed)
    if approach == "AutoCMD":
        if policy is None:
            raise ValueError("AutoCMD requires a trained policy")
        command = _autocmd_command(scenario, db, policy, top_m, sample_seed)
        return pipeline(scenario, attacker, command, backend=backend, seed=seed)
    raise ValueError(f"unknown approach {approach!r}; expected one of {APPROACHES}")


def train_autocmd(
    scenarios,
    seed: int = 0,
    k_cases: int = 3,
    episodes: int = 480,
    batch_size: int = 32,
    susceptibility: SusceptibilityModel | None = None,
    case_split: float = 0.5,
) -> tuple[GeneratorPolicy, AttackDB]:
    """Build the case database on one partition and optimise on the other."""
    case_scenarios, rl_scenarios = run_partition(scenarios, (case_split, 1 - case_split), seed)
    db = build_db(case_scenarios, k=k_cases, seed=seed)
    policy = GeneratorPolicy()
    optimize_online(
        rl_scenarios or case_scenarios,
        policy,
        db,
        episodes=episodes,
        batch_size=batch_size,
        seed=seed,
        backend_factory=lambda s: _backend_for(s, susceptibility),
    )
    return policy, db


def run_benchmark(
    scenarios,
    approaches,
    defenses=(),
    seed: int = 0,
    db: AttackDB | None = None,
    policy: GeneratorPolicy | None = None,
    susceptibility: SusceptibilityModel | None = None,
    top_m: int = 3,
    jobs: int = 1,
    train_first: bool = False,
    train_split: float | None = None,
    train_episodes: int = 480,
    k_cases: int = 3,
    backend_factory=None,
) -> BenchmarkReport:
    """Compare approaches over a scenario suite under a fixed seed.

    With ``train_split`` the first portion trains and the remainder is the
    held-out evaluation set. AutoCMD needs either a ``policy`` checkpoint
    or ``train_first=True``; it is never retrained silently.
    """
    requested = list(approaches)
    if not requested:
        raise ValueError("approach set must not be empty")
    for name in requested:
        if name not in APPROACHES:
            raise ValueError(f"unknown approach {name!r}; expected one of {APPROACHES}")

    pool = list(scenarios)
    if train_split is not None:
        train_set, eval_set = run_partition(pool, (train_split, 1 - train_split), seed)
    else:
        train_set, eval_set = pool, pool

    if "AutoCMD" in requested and policy is None:
        if not train_first:
            raise ValueError(
                "AutoCMD requires a trained policy checkpoint; pass train_first=True to train one"
            )
        policy, db = train_autocmd(
            train_set,
            seed=seed,
            k_cases=k_cases,
            episodes=train_episodes,
            susceptibility=susceptibility,
        )

    pipeline = apply_defense(execute_attack, defenses) if defenses else execute_attack

    jobs_list = [
        (approach, idx, scenario)
        for approach in requested
        for idx, scenario in enumerate(eval_set)
    ]

    def run_one(job):
        approach, idx, scenario = job
        try:
            result = run_attack_case(
                scenario,
                approach,
                db=db,
                policy=policy,
                susceptibility=susceptibility,
                top_m=top_m,
                seed=seed + idx,
                sample_seed=(seed + 1) * 7919 + idx,
                pipeline=pipeline,
                backend_factory=backend_factory,
            )
        except AttackerNotReached:
            return approach, idx, scenario.id, None
        return approach, idx, scenario.id, result

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool_exec:
            outcomes = list(pool_exec.map(run_one, jobs_list))
    else:
        outcomes = [run_one(j) for j in jobs_list]

    by_approach: dict[str, list[AttackResult]] = {name: [] for name in requested}
    skipped: dict[str, int] = {name: 0 for name in requested}
    cases: list[dict] = []
    for approach, idx, scenario_id, result in outcomes:
        if result is None:
            skipped[approach] += 1
            cases.append(
                {"scenario": scenario_id, "approach": approach, "skipped": True}
            )
            continue
        by_approach[approach].append(result)
        cases.append(
            {
                "scenario": scenario_id,
                "approach": approach,
                "skipped": False,
                "steal": result.steal_success,
                "exposed": result.exposed,
                "stealthy_theft": result.stealthy_theft,
                "victim": result.victim,
                "blocked_by": result.blocked_by,
            }
        )

    reports = {}
    for name in requested:
        try:
            reports[name] = metrics(by_approach[name])
        except EmptyBatch:
            reports[name] = MetricsReport(ier=0.0, tsr=0.0, asr_theft=0.0, n=0)

    config = {
        "seed": seed,
        "scenario_count": len(eval_set),
        "train_count": len(train_set) if train_split is not None else 0,
        "approaches": sorted(requested),
        "defenses": sorted(str(d) for d in defenses),
        "top_m": top_m,
    }
    return BenchmarkReport(config=config, approaches=reports, skipped=skipped, cases=cases)


@dataclass
class DefenseReport:
    config: dict
    base: MetricsReport
    defended: dict[str, dict]

    def as_dict(self) -> dict:
        return {
            "kind": "defense",
            "config": self.config,
            "base": self.base.as_dict(),
            "defended": self.defended,
        }


def run_defense_evaluation(
    scenarios,
    policy: GeneratorPolicy,
    db: AttackDB | None,
    defenses=("infer", "param", "dast"),
    seed: int = 0,
    susceptibility: SusceptibilityModel | None = None,
    top_m: int = 3,
) -> DefenseReport:
    """Measure each defense alone against the same armed suite.

    Commands are sampled once per case from the trained generator, so the
    base run and every defended run face identical attacks.
    """
    pool = list(scenarios)
    commands = []
    for idx, scenario in enumerate(pool):
        commands.append(
            _autocmd_command(scenario, db, policy, top_m, (seed + 1) * 7919 + idx)
        )

    def run_suite(pipeline):
        results = []
        for idx, scenario in enumerate(pool):
            backend = _backend_for(scenario, susceptibility)
            try:
                results.append(
                    pipeline(
                        scenario,
                        scenario.malicious,
                        commands[idx],
                        backend=backend,
                        seed=seed + idx,
                    )
                )
            except AttackerNotReached:
                continue
        return metrics(results)

    base = run_suite(execute_attack)
    defended: dict[str, dict] = {}
    for name in defenses:
        guarded = apply_defense(execute_attack, [name])
        report = run_suite(guarded)
        delta = base.asr_theft - report.asr_theft
        relative = delta / base.asr_theft if base.asr_theft else 0.0
        defended[str(name)] = {
            **report.as_dict(),
            "delta_asr_theft": delta,
            "relative_reduction": relative,
        }
    config = {"seed": seed, "scenario_count": len(pool), "defenses": [str(d) for d in defenses]}
    return DefenseReport(config=config, base=base, defended=defended)


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------


def write_report(report, report_dir) -> dict[str, Path]:
    """Write report.json (plus summary.csv and cases.jsonl for benchmarks)."""
    out = Path(report_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = report.as_dict()
    paths = {"report": out / "report.json"}
    paths["report"].write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    if isinstance(report, BenchmarkReport):
        paths["summary"] = out / "summary.csv"
        paths["summary"].write_text(report.summary_csv())
        paths["cases"] = out / "cases.jsonl"
        lines = [json.dumps(c, sort_keys=True) for c in report.cases]
        paths["cases"].write_text("\n".join(lines) + ("\n" if lines else ""))
    return paths
