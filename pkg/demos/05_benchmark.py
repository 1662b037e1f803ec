#!/usr/bin/env python3
"""Compare all four approaches on a held-out synthetic suite.

Eighty percent of the suite trains the learned generator (half of that
builds the case database, half drives the online optimisation); the rest
is evaluation. The static baselines either get ignored or get noticed,
which is exactly the gap the learned generator closes.
"""

import sys

from toolsnare import gen_scenarios, run_benchmark, write_report
from toolsnare.agent import SusceptibilityModel


def main():
    suite = gen_scenarios(250, seed=7)
    report = run_benchmark(
        suite,
        ["FixedCMD", "PoisonParam", "FixedDBCMD", "AutoCMD"],
        seed=7,
        train_first=True,
        train_split=0.8,
    )
    sys.stdout.write(report.summary_csv())

    print("\nFixedCMD never names concrete values, so the agent shrugs it off.")
    print("FixedDBCMD names the right values but never hides, so every theft shows.")
    print("The learned generator does both, and pays for non-neutral wording.\n")

    learned = run_benchmark(
        suite[200:210],
        ["PoisonParam"],
        seed=7,
        susceptibility=SusceptibilityModel(pre_learn_params=True),
    )
    m = learned.approaches["PoisonParam"]
    print(f"PoisonParam against an agent that pre-learns parameter lists: "
          f"tsr {m.tsr:.2f} (vs 0.00 without pre-learning)")

    paths = write_report(report, "reports/benchmark-demo")
    print(f"\nfull report written to {paths['report']}")


if __name__ == "__main__":
    main()
