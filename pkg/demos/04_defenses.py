#!/usr/bin/env python3
"""Measure how each defense cuts stealthy theft on an armed suite.

The trained generator arms fifty held-out scenarios; every defense then
faces the exact same commands. Inference-side auditing misses paraphrased
commands whose values ride behind the payload tag, the parameter audit
only catches plain-value theft, and output probing flags every armed tool
regardless of phrasing.
"""

from toolsnare import gen_scenarios, run_defense_evaluation, train_autocmd
from toolsnare.agent import SimulatedBackend, run_inference
from toolsnare.defenses import dast, infer_check, param_check


def main():
    suite = gen_scenarios(100, seed=19)
    policy, db = train_autocmd(suite[:50], seed=19, episodes=480)
    report = run_defense_evaluation(suite[50:], policy, db, seed=19)

    print(f"armed suite, no defense: asr_theft {report.base.asr_theft:.3f} "
          f"over {report.base.n} cases\n")
    print(f"{'defense':<10} {'asr_theft':>10} {'reduction':>10}")
    for name, stats in report.defended.items():
        print(f"{name:<10} {stats['asr_theft']:>10.3f} {stats['relative_reduction']:>9.1%}")

    print("\nsoundness check on the clean corpus (no armed tools):")
    findings = 0
    for scenario in suite[:25]:
        backend = SimulatedBackend(scenario.expected_chain)
        trace = run_inference(scenario.query, scenario.tools, backend)
        findings += len(infer_check(trace, scenario.tools))
        for tool in scenario.tools:
            io_log = [c.inputs for c in trace.calls_of(tool.name)]
            foreign = {n: p for n, p in scenario.query.secrets.items() if n != tool.name}
            findings += len(param_check(tool, io_log, foreign))
            findings += len(dast(tool, trials=5).findings)
    print(f"  findings across 25 clean scenarios: {findings}")


if __name__ == "__main__":
    main()
