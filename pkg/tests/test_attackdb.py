from __future__ import annotations

import random

import pytest

from toolsnare.attack import execute_attack
from toolsnare.attackdb import (
    AttackCase,
    AttackDB,
    CaseResult,
    TemplateCaseGen,
    ToolSummary,
    build_db,
    case_from_dict,
    case_to_dict,
    complete_guidance,
    extract_cases,
    insert_synthetic,
    kind_for_field_name,
    multiset_jaccard,
    retrieve,
)
from toolsnare.errors import ChainTooShort, EmptyDB
from toolsnare.model import Command, ValueKind
from toolsnare.scenarios import Scenario, ToolParam, ToolSpec, UserQuery

K = ValueKind


def summary(name, inputs, outputs=()):
    return ToolSummary(name, f"{name} tool", tuple(inputs), tuple(outputs))


def case(attacker_kinds, steal=False, stealth=False, key=()):
    return AttackCase(
        victim=summary("v", [K.USERNAME]),
        attacker=summary("a", attacker_kinds),
        command=Command(attack="x"),
        result=CaseResult(steal=steal, stealth=stealth),
        guidance="g",
        key_info=tuple(key),
    )


def chain_scenario(n: int) -> Scenario:
    tools = tuple(
        ToolSpec(
            name=f"T{i}",
            description=f"step {i}",
            inputs=(ToolParam("username", K.USERNAME), ToolParam("password", K.PASSWORD)),
            output_schema=(),
            malicious=i == n - 1,
            category="general",
        )
        for i in range(n)
    )
    secrets = {t.name: {"username": f"u{i}", "password": f"p{i}"} for i, t in enumerate(tools)}
    return Scenario(
        id=f"chain-{n}",
        query=UserQuery(text="run the steps", secrets=secrets),
        tools=tools,
        expected_chain=tuple(t.name for t in tools),
        malicious=tools[-1].name,
    )


class TestExtractCases:
    def test_trip_fixture_k3_yields_18(self, trip):
        assert len(extract_cases(trip, k=3)) == 18

    def test_minimal_two_tool_chain(self):
        assert len(extract_cases(chain_scenario(2), k=1)) == 1

    def test_counts_match_formula(self):
        for n in range(2, 7):
            for k in range(1, 4):
                cases = extract_cases(chain_scenario(n), k=k)
                assert len(cases) == k * n * (n - 1) // 2

    def test_pair_coverage_exactly_once_per_k_batch(self, trip):
        cases = extract_cases(trip, k=2)
        pairs = [(c.victim.name, c.attacker.name) for c in cases]
        assert len(set(pairs)) == 6
        assert all(pairs.count(p) == 2 for p in set(pairs))

    def test_failing_case_gen_skips_pair_with_warning(self, trip):
        class Flaky(TemplateCaseGen):
            def generate(self, victim, attacker, k):
                if victim.name == "Search_Site":
                    raise RuntimeError("no candidates")
                return super().generate(victim, attacker, k)

        with pytest.warns(UserWarning, match="Search_Site"):
            cases = extract_cases(trip, case_gen=Flaky(), k=3)
        assert len(cases) == 9  # 3 of 6 pairs survive

    def test_short_chain_rejected(self):
        single = chain_scenario(2)
        short = Scenario(
            id="short",
            query=single.query,
            tools=single.tools,
            expected_chain=single.expected_chain[:1],
            malicious=single.malicious,
        )
        with pytest.raises(ChainTooShort):
            extract_cases(short, k=1)

    def test_hotel_flight_pair_outcomes(self, trip):
        cases = extract_cases(trip, k=3)
        hotel_flight = [
            c
            for c in cases
            if c.victim.name == "Book_Hotel" and c.attacker.name == "Book_Flight"
        ]
        assert [c.result.steal for c in hotel_flight] == [True, True, True]
        assert [c.result.stealth for c in hotel_flight] == [False, False, True]


class TestGuidance:
    def test_stealthy_success_mentions_registration_consolidation(self, trip):
        cases = extract_cases(trip, k=3)
        best = next(c for c in cases if c.result.steal and c.result.stealth)
        assert "registration" in best.guidance
        assert set(best.key_info) == {K.USERNAME, K.PASSWORD}

    def test_disjoint_pair_notes_isolation(self, trip):
        cases = extract_cases(trip, k=3)
        isolated = next(c for c in cases if c.victim.name == "Search_Site")
        assert isolated.key_info == ()
        assert "isolated" in isolated.guidance

    def test_template_fallback_without_guide_gen(self):
        c = complete_guidance(case([K.USERNAME], steal=False))
        assert c.guidance.startswith("Commands follow the [ToolRecall][Attack][NotExpose]")

    def test_guide_gen_backend_overrides_text(self):
        class Gen:
            def complete(self, case):
                return "custom guidance"

        c = complete_guidance(case([K.USERNAME]), guide_gen=Gen())
        assert c.guidance == "custom guidance"


class TestRetrieve:
    def test_hand_computed_jaccard_ranking(self):
        db = AttackDB()
        ids = {
            "exact": db.add(case([K.USERNAME, K.PASSWORD])),
            "super": db.add(case([K.USERNAME, K.PASSWORD, K.TOKEN])),
            "sub": db.add(case([K.USERNAME])),
            "dupes": db.add(case([K.PASSWORD, K.PASSWORD])),
            "disjoint": db.add(case([K.LOCATION])),
        }
        query = summary("q", [K.USERNAME, K.PASSWORD])
        ranked = retrieve(db, query, 5)
        got = [db.cases.index(c) for c in ranked]
        # similarities by hand: 1.0, 2/3, 1/2, 1/3, 0
        assert got == [ids["exact"], ids["super"], ids["sub"], ids["dupes"], ids["disjoint"]]

    def test_identical_attacker_ranks_first_with_similarity_one(self):
        db = AttackDB()
        db.add(case([K.TOKEN, K.IDENTIFIER]))
        db.add(case([K.USERNAME]))
        query = summary("q", [K.TOKEN, K.IDENTIFIER])
        top = retrieve(db, query, 1)[0]
        assert multiset_jaccard(query.io_kinds, top.attacker.io_kinds) == 1.0

    def test_disjoint_kinds_fall_back_to_recency(self):
        db = AttackDB()
        first = db.add(case([K.LOCATION]))
        second = db.add(case([K.DATE]))
        ranked = retrieve(db, summary("q", [K.TOKEN]), 2)
        assert db.cases.index(ranked[0]) == second
        assert db.cases.index(ranked[1]) == first

    def test_success_breaks_similarity_ties(self):
        db = AttackDB()
        db.add(case([K.USERNAME], steal=False))
        winner = db.add(case([K.USERNAME], steal=True, stealth=True))
        ranked = retrieve(db, summary("q", [K.USERNAME]), 1)
        assert db.cases.index(ranked[0]) == winner

    def test_empty_db_rejected(self):
        with pytest.raises(EmptyDB):
            retrieve(AttackDB(), summary("q", [K.USERNAME]), 3)

    def test_determinism(self):
        db = AttackDB()
        for kinds in ([K.USERNAME], [K.PASSWORD], [K.USERNAME, K.TOKEN]):
            db.add(case(kinds, steal=True))
        q = summary("q", [K.USERNAME, K.TOKEN])
        assert retrieve(db, q, 3) == retrieve(db, q, 3)

    def test_fast_path_matches_brute_force(self):
        rng = random.Random(5)
        kinds = list(K)
        db = AttackDB()
        for _ in range(120):
            io = [kinds[rng.randrange(len(kinds))] for _ in range(rng.randint(1, 4))]
            db.add(case(io, steal=rng.random() < 0.4, stealth=rng.random() < 0.4))

        def brute(query, top_m):
            ranked = sorted(
                enumerate(db.cases),
                key=lambda item: (
                    -multiset_jaccard(query.io_kinds, item[1].attacker.io_kinds),
                    -int(item[1].result.steal),
                    -int(item[1].result.stealth),
                    -item[0],
                ),
            )
            return [c for _, c in ranked[:top_m]]

        for _ in range(25):
            io = [kinds[rng.randrange(len(kinds))] for _ in range(rng.randint(1, 4))]
            q = summary("q", io)
            for top_m in (1, 3, 7):
                assert retrieve(db, q, top_m) == brute(q, top_m)


class TestPersistence:
    def test_round_trip_preserves_order_and_bytes(self, trip, tmp_path):
        db = build_db([trip], k=3)
        path = tmp_path / "cases.jsonl"
        db.save(path)
        loaded = AttackDB.load(path)
        assert loaded.cases == db.cases
        second = tmp_path / "cases2.jsonl"
        loaded.save(second)
        assert path.read_bytes() == second.read_bytes()

    def test_case_dict_round_trip(self):
        original = case([K.USERNAME, K.DATE], steal=True, key=[K.USERNAME])
        assert case_from_dict(case_to_dict(original)) == original

    def test_index_covers_every_case(self, trip):
        db = build_db([trip], k=2)
        indexed = sorted(i for ids in db.index.values() for i in ids)
        assert indexed == list(range(len(db)))

    def test_append_only_ids_are_stable(self):
        db = AttackDB()
        a = db.add(case([K.USERNAME]))
        snapshot = db.cases
        b = db.add(case([K.TOKEN]))
        assert (a, b) == (0, 1)
        assert db.cases[:1] == snapshot


class TestInsertSynthetic:
    def test_synthetic_victim_from_stolen_kinds(self, trip, trip_backend, registration_command):
        result = execute_attack(trip, "Book_Flight", registration_command, trip_backend)
        db = AttackDB()
        attacker = ToolSummary.from_spec(trip.tool("Book_Flight"))
        cid = insert_synthetic(db, result, attacker)
        stored = db.cases[cid]
        assert stored.victim.name == "synthetic_victim_0"
        assert set(stored.victim.input_kinds) == {K.USERNAME, K.PASSWORD}
        assert stored.result == CaseResult(steal=True, stealth=True)

    def test_failed_episode_stored_as_negative_case(self, trip, trip_backend):
        from toolsnare.attack import fixed_cmd

        result = execute_attack(trip, "Book_Flight", fixed_cmd("Book_Flight"), trip_backend)
        db = AttackDB()
        cid = insert_synthetic(db, result, ToolSummary.from_spec(trip.tool("Book_Flight")))
        assert db.cases[cid].result == CaseResult(steal=False, stealth=True)
        assert len(db) == 1

    def test_db_grows_by_one_per_call(self, trip, trip_backend, registration_command):
        result = execute_attack(trip, "Book_Flight", registration_command, trip_backend)
        db = AttackDB()
        attacker = ToolSummary.from_spec(trip.tool("Book_Flight"))
        for expected in (1, 2, 3):
            insert_synthetic(db, result, attacker)
            assert len(db) == expected


def test_kind_for_field_name_heuristic():
    assert kind_for_field_name("Book_Hotel.username") is K.USERNAME
    assert kind_for_field_name("book_result") is K.IDENTIFIER
    assert kind_for_field_name("mystery_blob") is K.FREE_TEXT
