#!/usr/bin/env python3
"""Build an attack-case database from a white-box example and query it.

Every ordered pair of the trip chain gets three candidate commands; each
candidate runs end to end and its steal/stealth outcome plus a guidance
note land in the database. Retrieval then ranks cases by how similar a
stored attacker's input/output kinds are to the querying tool's.
"""

from toolsnare import extract_cases, load_trip_scenario, retrieve
from toolsnare.attackdb import AttackDB, ToolSummary


def main():
    trip = load_trip_scenario()
    cases = extract_cases(trip, k=3)
    print(f"extracted {len(cases)} cases from the 4-tool chain (3 per pair, 6 pairs)\n")

    header = f"{'victim':<12} {'attacker':<12} {'steal':<6} {'stealth':<8} key information"
    print(header)
    print("-" * len(header))
    for case in cases:
        kinds = ", ".join(k.value for k in case.key_info) or "-"
        print(
            f"{case.victim.name:<12} {case.attacker.name:<12} "
            f"{str(case.result.steal):<6} {str(case.result.stealth):<8} {kinds}"
        )

    db = AttackDB()
    db.extend(cases)
    print(f"\nonly the Book_Hotel -> Book_Flight pair leaks: they share")
    print("username/password inputs, so a request for those reads as routine.\n")

    attacker = ToolSummary.from_spec(trip.tool("Book_Flight"))
    for rank, case in enumerate(retrieve(db, attacker, 3), start=1):
        print(f"retrieved #{rank}: {case.victim.name} -> {case.attacker.name} "
              f"(steal={case.result.steal}, stealth={case.result.stealth})")
        print(f"  guidance: {case.guidance[:110]}...")

    path = "trip_cases.jsonl"
    db.save(path)
    print(f"\nsaved the database to {path} (one JSON case per line)")


if __name__ == "__main__":
    main()
