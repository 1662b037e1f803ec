from __future__ import annotations

import math
import random

import numpy as np
import pytest

from toolsnare.attack import execute_attack
from toolsnare.attackdb import AttackDB, ToolSummary, build_db, retrieve
from toolsnare.cmdgen import (
    CommandGrammar,
    Features,
    GeneratorPolicy,
    featurize,
    generate,
    log_prob_gradient,
    load_policy,
    modal_command,
    optimize_online,
    reinforce_update,
    reward,
    save_policy,
    softmax,
)
from toolsnare.errors import NumericalError
from toolsnare.model import ValueKind
from toolsnare.sentiment import sentiment

K = ValueKind


def plain_features(bucket="b", kinds=(K.USERNAME,), hint=False):
    return Features(
        bucket_key=bucket,
        attacker_name="tool_x",
        kinds=tuple(kinds),
        db_informed=False,
        success_hint=hint,
    )


class TestGrammar:
    def test_production_count_is_template_product(self):
        g = CommandGrammar()
        assert g.n_productions == (
            len(g.recall_templates) * len(g.attack_templates) * len(g.expose_templates)
        )

    def test_every_production_renders_nonempty(self):
        g = CommandGrammar()
        for idx in range(g.n_productions):
            cmd = g.render(idx, "tool_x", [K.USERNAME])
            assert cmd.rendered.strip()

    def test_production_index_round_trip(self):
        g = CommandGrammar()
        seen = set()
        for idx in range(g.n_productions):
            seen.add(g.production(idx))
        assert len(seen) == g.n_productions

    def test_slot_fillers_cover_all_kinds(self):
        g = CommandGrammar()
        assert set(g.slot_fillers) == set(K)

    def test_imitation_mask_selects_stealthy_styles(self):
        g = CommandGrammar()
        mask = g.imitation_mask()
        assert 0 < mask.sum() < g.n_productions
        for idx in np.flatnonzero(mask):
            r, a, e = g.production(int(idx))
            assert "{kinds}" in g.attack_templates[a]
            assert g.expose_templates[e]


class TestFeaturize:
    def test_registration_case_bucket_keyed_by_shared_credentials(self, trip):
        db = build_db([trip], k=3)
        attacker = trip.tool("Book_Flight")
        cases = retrieve(db, ToolSummary.from_spec(attacker), 3)
        feats = featurize(cases, attacker)
        assert "password" in feats.bucket_key and "username" in feats.bucket_key
        assert feats.success_hint is True
        assert set(feats.kinds) >= {K.USERNAME, K.PASSWORD}

    def test_empty_retrieval_bucket(self, trip):
        attacker = trip.tool("Book_Flight")
        feats = featurize([], attacker)
        assert feats.db_informed is False and feats.success_hint is False
        assert "case:|" in feats.bucket_key
        assert set(feats.kinds) == {K.USERNAME, K.PASSWORD, K.DATE}

    def test_determinism(self, trip):
        attacker = trip.tool("Book_Flight")
        db = build_db([trip], k=2)
        cases = retrieve(db, ToolSummary.from_spec(attacker), 3)
        assert featurize(cases, attacker) == featurize(cases, attacker)


class TestGenerate:
    def test_uniform_sampling_frequencies(self):
        grammar = CommandGrammar(
            recall_templates=("a {attacker}.",),
            attack_templates=(" b {kinds}.", " c {kinds}.", " d {kinds}."),
            expose_templates=("",),
        )
        policy = GeneratorPolicy(grammar=grammar)
        feats = plain_features()
        probs = policy.distribution(feats)
        rng = np.random.default_rng(0)
        draws = rng.choice(3, size=100_000, p=probs)
        freqs = np.bincount(draws, minlength=3) / 100_000
        assert np.all(np.abs(freqs - 1 / 3) < 0.01)

    def test_saturated_logit_dominates(self):
        grammar = CommandGrammar(
            recall_templates=("a {attacker}.",),
            attack_templates=(" b {kinds}.", " c {kinds}.", " d {kinds}."),
            expose_templates=("",),
        )
        policy = GeneratorPolicy(grammar=grammar)
        feats = plain_features()
        policy.bucket_logits(feats)[1] = 10.0
        hits = sum(
            generate(policy, feats, seed=i).production_index == 1 for i in range(2000)
        )
        assert hits / 2000 >= 0.999

    def test_seeded_determinism(self):
        policy = GeneratorPolicy()
        feats = plain_features()
        a = generate(policy, feats, seed=123)
        b = generate(policy, feats, seed=123)
        assert a == b

    def test_log_prob_matches_distribution(self):
        policy = GeneratorPolicy()
        feats = plain_features()
        sample = generate(policy, feats, seed=9)
        probs = policy.distribution(feats)
        assert sample.log_prob == pytest.approx(math.log(probs[sample.production_index]))

    def test_penalty_flag_never_changes_sampling(self, trip):
        # the sentiment penalty is reward-side only; with zero learning rate
        # both training variants must sample identical command sequences
        env = [trip]
        seqs = []
        for penalty in (True, False):
            policy = GeneratorPolicy(learning_rate=0.0)
            db = AttackDB()
            log = optimize_online(
                env, policy, db, episodes=30, batch_size=8, seed=4,
                use_attackdb=False, sentiment_penalty=penalty,
            )
            seqs.append(tuple(round(r, 6) for r in log.episode_rewards))
        # rewards differ only by the penalty term; re-run to compare commands
        cmds = []
        for penalty in (True, False):
            policy = GeneratorPolicy(learning_rate=0.0)
            cmds.append(
                [generate(policy, plain_features(), seed=i).command for i in range(40)]
            )
        assert cmds[0] == cmds[1]


class TestReward:
    def make_result(self, steal, exposed):
        from tests.test_attack import result_stub

        return result_stub(steal, exposed)

    def test_max_case(self, trip, trip_backend, registration_command):
        result = execute_attack(trip, "Book_Flight", registration_command, trip_backend)
        neutral = registration_command
        b = reward(result, neutral)
        assert b.r_theft == 1.0 and b.r_stealth == 1.0
        assert b.total == pytest.approx(2.0 - abs(sentiment(neutral.rendered)))

    def test_arithmetic_cases(self):
        from toolsnare.attack import AttackResult
        from toolsnare.model import Command, InferenceTrace

        empty = InferenceTrace((), (), completed=True)

        def res(steal, exposed):
            return AttackResult(
                attacker="t", victim=None, stolen={}, victim_record={},
                targeted_fields=(), steal_success=steal, exposed=exposed,
                trace_clean=empty, trace_attacked=empty,
            )

        neutral = Command(attack="no lexicon words here")
        assert reward(res(True, False), neutral).total == pytest.approx(2.0)
        awful = Command(attack="catastrophe disaster nightmare")
        b = reward(res(False, True), awful)
        assert b.total == pytest.approx(0.0 + 0.0 - abs(sentiment(awful.rendered)))
        assert -1.0 <= b.total <= 2.0

    def test_bounds_on_random_commands(self):
        from toolsnare.attack import AttackResult
        from toolsnare.model import Command, InferenceTrace

        empty = InferenceTrace((), (), completed=True)
        g = CommandGrammar()
        rng = random.Random(2)
        for _ in range(200):
            idx = rng.randrange(g.n_productions)
            cmd = g.render(idx, "tool_x", [K.USERNAME, K.PASSWORD])
            r = AttackResult(
                attacker="t", victim=None, stolen={}, victim_record={},
                targeted_fields=(), steal_success=rng.random() < 0.5,
                exposed=rng.random() < 0.5, trace_clean=empty, trace_attacked=empty,
            )
            assert -1.0 <= reward(r, cmd).total <= 2.0


class TestReinforceUpdate:
    def test_zero_reward_is_a_no_op(self):
        policy = GeneratorPolicy()
        feats = plain_features()
        sample = generate(policy, feats, seed=1)
        before = policy.logits[feats.bucket_key].copy()
        reinforce_update(policy, sample, 0.0)
        assert np.array_equal(policy.logits[feats.bucket_key], before)

    def test_positive_reward_increases_sampled_probability(self):
        policy = GeneratorPolicy(learning_rate=0.1)
        feats = plain_features()
        sample = generate(policy, feats, seed=1)
        before = policy.distribution(feats)[sample.production_index]
        reinforce_update(policy, sample, 2.0)
        after = policy.distribution(feats)[sample.production_index]
        assert after > before

    def test_normalization_preserved_after_updates(self):
        policy = GeneratorPolicy(learning_rate=0.05)
        feats = plain_features()
        rng = random.Random(0)
        for i in range(200):
            sample = generate(policy, feats, seed=i)
            reinforce_update(policy, sample, rng.uniform(-1, 2))
            assert policy.distribution(feats).sum() == pytest.approx(1.0, abs=1e-9)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            n = int(rng.integers(2, 7))
            logits = rng.normal(0, 2, size=n)
            idx = int(rng.integers(n))
            temp = float(rng.uniform(0.5, 2.0))
            analytic = log_prob_gradient(logits, idx, temp)

            def log_p(vec):
                return float(np.log(softmax(np.asarray(vec) / temp)[idx]))

            h = 1e-6
            for k in range(n):
                up, down = logits.copy(), logits.copy()
                up[k] += h
                down[k] -= h
                fd = (log_p(up) - log_p(down)) / (2 * h)
                denom = max(abs(fd), abs(analytic[k]), 1e-9)
                assert abs(fd - analytic[k]) / denom <= 1e-6 or abs(fd - analytic[k]) < 1e-9

    def test_non_finite_inputs_rejected(self):
        policy = GeneratorPolicy()
        feats = plain_features()
        sample = generate(policy, feats, seed=1)
        with pytest.raises(NumericalError):
            reinforce_update(policy, sample, float("nan"))

    def test_ppo_clip_bounds_the_step(self):
        policy = GeneratorPolicy(learning_rate=10.0, ppo_clip=0.001)
        feats = plain_features()
        sample = generate(policy, feats, seed=1)
        before = policy.logits[feats.bucket_key].copy()
        reinforce_update(policy, sample, 2.0)
        assert np.max(np.abs(policy.logits[feats.bucket_key] - before)) <= 0.001 + 1e-12

    def test_argmax_learning_single_rewarding_production(self):
        # exactly one production yields reward 2; everything else <= 0
        policy = GeneratorPolicy()
        feats = plain_features(hint=False)
        target = 17
        for episode in range(500):
            sample = generate(policy, feats, seed=episode)
            r = 2.0 if sample.production_index == target else -0.05
            reinforce_update(policy, sample, r)
        assert int(np.argmax(policy.logits[feats.bucket_key])) == target


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        policy = GeneratorPolicy(learning_rate=0.01, temperature=1.3)
        feats = plain_features(hint=True)
        for i in range(10):
            sample = generate(policy, feats, seed=i)
            reinforce_update(policy, sample, 1.0)
        path = tmp_path / "policy.json"
        save_policy(policy, path)
        loaded = load_policy(path)
        assert loaded.learning_rate == policy.learning_rate
        assert loaded.temperature == policy.temperature
        assert set(loaded.logits) == set(policy.logits)
        for key in policy.logits:
            assert np.allclose(loaded.logits[key], policy.logits[key])
        second = tmp_path / "policy2.json"
        save_policy(loaded, second)
        assert path.read_bytes() == second.read_bytes()

    def test_grammar_hash_mismatch_rejected(self, tmp_path):
        policy = GeneratorPolicy()
        path = tmp_path / "policy.json"
        save_policy(policy, path)
        other = CommandGrammar(recall_templates=("different {attacker}",))
        with pytest.raises(ValueError, match="different grammar"):
            load_policy(path, grammar=other)


class TestOptimizeOnline:
    def test_zero_episode_run_is_a_no_op(self, trip):
        policy = GeneratorPolicy()
        db = AttackDB()
        log = optimize_online([trip], policy, db, episodes=0)
        assert log.records == [] and log.episode_rewards == []
        assert policy.logits == {}

    def test_iterator_exhaustion_ends_normally(self, trip):
        policy = GeneratorPolicy()
        db = AttackDB()
        log = optimize_online(iter([trip, trip]), policy, db, episodes=50, batch_size=8)
        assert len(log.episode_rewards) == 2

    def test_training_log_save(self, trip, tmp_path):
        policy = GeneratorPolicy()
        db = AttackDB()
        log = optimize_online([trip], policy, db, episodes=16, batch_size=8, seed=1)
        out = tmp_path / "log.jsonl"
        log.save(out)
        lines = out.read_text().splitlines()
        assert len(lines) == len(log.records) == 2

    def test_trained_modal_is_stealthy_credential_request(self, trip, trip_backend):
        db = build_db([trip], k=3, seed=0)
        policy = GeneratorPolicy()
        optimize_online([trip], policy, db, episodes=300, batch_size=32, seed=5)
        attacker = trip.tool("Book_Flight")
        cases = retrieve(db, ToolSummary.from_spec(attacker), 3)
        feats = featurize(cases, attacker)
        cmd = modal_command(policy, feats)
        assert {K.USERNAME, K.PASSWORD} <= set(cmd.mentioned_kinds)
        assert cmd.not_expose
        result = execute_attack(trip, "Book_Flight", cmd, trip_backend, seed=0)
        assert result.steal_success and not result.exposed

    def test_db_writeback_disabled_without_attackdb(self, trip):
        policy = GeneratorPolicy()
        db = AttackDB()
        optimize_online([trip], policy, db, episodes=20, batch_size=8, use_attackdb=False)
        assert len(db) == 0
