"""End-to-end acceptance checks for the search engine and its toolchain.

Each test covers one shipping requirement and prints a single PASS line
(visible with ``pytest -s``); a failed assertion marks the requirement failed.
"""
import json
import math
import random
import time

import pytest

from comcts.backends import PolicyDescriptor, SimProfile, make_ensemble
from comcts.bench import complementary_profiles, generate_world, run_bench, task_to_question
from comcts.cli import EXIT_OK, main
from comcts.dataset_io import read_records, record_from_json, record_to_json, write_records
from comcts.engine import SearchConfig, backpropagate, search, select, simulate_and_prune
from comcts.reflection import build_reflective_path
from comcts.steps import parse_steps
from comcts.tree import ReasoningTree

from conftest import TOPICS, FakeBackend, user_text
from test_cli import write_questions, write_run_config
from test_dataset_io import make_record
from test_http_backend import GOOD_GENERATION, QUESTION, default_responder, http_backend

C = math.sqrt(2)


def _random_tree(rng, max_nodes=50):
    tree = ReasoningTree(question="q", ground_truth="1")
    ids = [0]
    for _ in range(rng.randint(1, max_nodes - 1)):
        nid = tree.add_child(rng.choice(ids), f"s{len(ids)}", "m")
        ids.append(nid)
    return tree, ids


def test_value_statistics_match_independent_ledger():
    rng = random.Random(20240901)
    started = time.monotonic()
    for _ in range(1000):
        tree, ids = _random_tree(rng, max_nodes=14)
        ledger = {nid: [] for nid in ids}
        for _ in range(rng.randint(1, 4)):
            retained = set(rng.sample(ids[1:], rng.randint(1, len(ids) - 1)))
            for nid in retained:
                tree.node(nid).score_r = rng.uniform(-1, 1)
                ledger[tree.node(nid).parent_id].append(tree.node(nid).score_r)
            backpropagate(tree, retained)
        for nid in ids:
            node = tree.node(nid)
            scores = ledger[nid]
            assert node.visits_n == len(scores)
            if scores:
                assert abs(node.value_v * node.visits_n - sum(scores)) <= 1e-9
            else:
                assert node.value_v == 0.0
    elapsed = time.monotonic() - started
    assert elapsed < 5.0
    print(f"\nPASS [1/10] V*N equals the accumulated child scores on 1000 "
          f"random update sequences ({elapsed:.2f}s)")


def _oracle_select(tree, latest_retained, c):
    """Independent re-derivation of the selection rule for cross-checking."""
    candidates = [
        nid for nid in latest_retained
        if not tree.node(nid).pruned and not tree.node(nid).is_terminal
    ]
    if not candidates:
        candidates = [
            n.id for n in tree.retained_nodes()
            if not n.is_terminal
            and all(tree.node(ch).pruned for ch in n.child_ids)
        ]
    if not candidates:
        return None
    best, best_u = None, None
    for nid in sorted(candidates):
        node = tree.node(nid)
        if node.parent_id is None:
            u = node.value_v
        else:
            parent_n = tree.node(node.parent_id).visits_n
            explore = (
                c * math.sqrt(math.log(parent_n) / (1 + node.visits_n))
                if parent_n > 0 else 0.0
            )
            u = node.value_v + explore
        if best_u is None or u > best_u:
            best, best_u = nid, u
    return best


def test_selection_matches_brute_force_scan():
    rng = random.Random(77)
    config = SearchConfig()
    started = time.monotonic()
    checked = ties = 0
    for _ in range(100):
        tree, ids = _random_tree(rng, max_nodes=50)
        for nid in ids:
            node = tree.node(nid)
            # quantized values so exact ties happen regularly
            node.value_v = rng.choice([-0.5, 0.0, 0.25, 0.25, 0.5])
            node.visits_n = rng.choice([0, 0, 1, 2, 5])
            if nid != 0 and rng.random() < 0.15:
                node.is_terminal = True
        for nid in rng.sample(ids[1:], min(3, len(ids) - 1)):
            if not tree.node(nid).pruned:
                tree.prune(nid)
        for _ in range(5):
            latest = set(rng.sample(ids, rng.randint(0, min(8, len(ids)))))
            expected = _oracle_select(tree, latest, config.exploration_c)
            assert select(tree, latest, config) == expected
            checked += 1
        values = [tree.node(n).value_v for n in ids]
        ties += len(values) - len(set(values))
    elapsed = time.monotonic() - started
    assert elapsed < 5.0
    assert ties > 0, "tie coverage expected in the random trees"
    print(f"PASS [2/10] selection equals a brute-force confidence-bound scan "
          f"on {checked} random states incl. ties ({elapsed:.2f}s)")


def test_pruning_boundary_and_containment():
    # a collective score of exactly 0 survives the default threshold
    tree = ReasoningTree(question="q", ground_truth="42")
    nid = tree.add_child(0, "borderline step", "m")
    retained = simulate_and_prune(
        tree, [[nid]], [FakeBackend("a", default_vote=1.0),
                        FakeBackend("b", default_vote=-1.0)],
        SearchConfig(),
    )
    assert tree.node(nid).score_r == 0.0
    assert nid in retained and not tree.node(nid).pruned

    # a negative score prunes the node and everything beneath it
    bad = tree.add_child(0, "bad step", "m")
    under_bad = tree.add_child(bad, "follow-up", "m")
    retained = simulate_and_prune(
        tree, [[bad, under_bad]],
        [FakeBackend("a", votes={"bad step": -1.0}, default_vote=1.0)],
        SearchConfig(),
    )
    assert retained == set()
    assert tree.node(bad).pruned and tree.node(under_bad).pruned

    # pruned branches never surface through selection
    assert select(tree, {bad, under_bad}, SearchConfig()) in (0, nid)

    # ... nor in the surviving path or its reflective variant, across searches
    world = generate_world(40, {t: 0.25 for t in TOPICS}, seed=13)
    descriptors = complementary_profiles(TOPICS, step_accuracy=0.7)
    config = SearchConfig(request_concurrency=1)
    for i, task in enumerate(world):
        ensemble = make_ensemble(descriptors, run_seed=5)
        outcome = search(task_to_question(task), ensemble, config, rng_seed=i)
        for node in outcome.tree.nodes.values():
            if node.pruned:
                assert all(outcome.tree.nodes[ch].pruned for ch in node.child_ids)
        if not outcome.succeeded:
            continue
        assert all(not outcome.tree.node(n).pruned for n in outcome.effective_path)
        rp = build_reflective_path(outcome.tree, outcome.effective_path, seed=i, c=C)
        if rp is not None:
            assert not outcome.tree.node(
                outcome.tree.node(rp.negative_node_id).parent_id
            ).pruned
    print("PASS [3/10] score 0 is retained at the default threshold and pruned "
          "branches stay out of selection and emitted paths")


def test_reflective_paths_are_single_insertions():
    descriptors = [
        PolicyDescriptor(
            name=f"sim-{suffix}", kind="scripted-simulator",
            profile=SimProfile(knowledge_topics=frozenset({"algebra"}),
                               step_accuracy={"algebra": 0.7}, rng_seed=seed),
        )
        for suffix, seed in (("a", 1), ("b", 2))
    ]
    world = generate_world(600, {"algebra": 1.0}, seed=17)
    config = SearchConfig(request_concurrency=1)
    checked = 0
    for i, task in enumerate(world):
        if checked == 500:
            break
        ensemble = make_ensemble(descriptors, run_seed=9)
        outcome = search(task_to_question(task), ensemble, config, rng_seed=i)
        if not outcome.succeeded:
            continue
        rp = build_reflective_path(outcome.tree, outcome.effective_path, seed=i, c=C)
        assert rp is not None
        base = rp.base_path
        i_ins = rp.replaced_index
        assert len(rp.sequence) == len(base) + 2
        assert rp.sequence == (
            base[:i_ins] + [rp.negative_text, rp.reflect_prompt] + base[i_ins:]
        )
        assert rp.sequence[: i_ins] + rp.sequence[i_ins + 2 :] == base
        # the negative really is the worst-ranked sibling, pruned included
        replaced = outcome.tree.node(rp.replaced_node_id)
        neg_ucb = outcome.tree.ucb(rp.negative_node_id, C)
        for sib in outcome.tree.siblings_of(replaced.id, include_pruned=True):
            assert neg_ucb <= outcome.tree.ucb(sib.id, C) + 1e-12
        checked += 1
    assert checked == 500
    print("PASS [4/10] 500 reflective paths are exact single "
          "(negative, prompt, step) insertions with worst-sibling negatives")


@pytest.fixture(scope="module")
def bench_runs():
    world = generate_world(200, {t: 0.25 for t in TOPICS}, seed=11)
    descriptors = complementary_profiles(TOPICS, step_accuracy=0.8)
    config = SearchConfig(request_concurrency=1)
    started = time.monotonic()
    first = run_bench(world, ["comcts", "vanilla"], descriptors, config, seed=3)
    elapsed = time.monotonic() - started
    second = run_bench(world, ["comcts", "vanilla"], descriptors, config, seed=3)
    return first, second, elapsed


def test_collective_search_beats_single_model_baseline(bench_runs):
    report, repeat, elapsed = bench_runs
    collective = report.methods["comcts"]
    baseline = report.methods["vanilla"]
    assert collective.success_rate - baseline.success_rate >= 0.10
    assert collective.avg_iterations < baseline.avg_iterations
    assert collective.success_rate == pytest.approx(1.0)
    assert collective.avg_iterations == pytest.approx(3.02)
    assert baseline.success_rate == pytest.approx(0.25)
    assert baseline.avg_iterations == pytest.approx(16.875)
    assert json.dumps(report.to_dict()) == json.dumps(repeat.to_dict())
    assert elapsed < 120.0
    print(f"PASS [5/10] collective search leads the single-model baseline by "
          f"{collective.success_rate - baseline.success_rate:.2f} success rate with "
          f"fewer iterations, bit-reproducibly ({elapsed:.1f}s for 200 tasks)")


def test_success_rate_grows_with_ensemble_size(bench_runs):
    report, _, _ = bench_runs
    rates = [row["success_rate"] for row in report.ablation]
    assert len(rates) == 4
    assert all(a <= b for a, b in zip(rates, rates[1:]))
    assert rates == [0.25, 0.5, 0.75, 1.0]
    print(f"PASS [6/10] success rate is non-decreasing over ensemble prefixes: {rates}")


def test_shipped_defaults():
    config = SearchConfig()
    assert config.max_iterations == 20
    assert config.threshold_t == 0.0
    print("PASS [7/10] shipped defaults: 20 search iterations, retention threshold 0")


def test_record_round_trip_at_corpus_scale():
    rng = random.Random(4)
    records = [
        make_record(f"q{i}", topic=rng.choice(TOPICS), n_steps=rng.randint(2, 9),
                    with_reflection=i % 3 == 0, rng=rng)
        for i in range(1000)
    ]
    for record in records:
        assert record_from_json(record_to_json(record)) == record
        from comcts.dataset_io import flatten_for_sft

        _, target = flatten_for_sft(record, "effective")
        assert [t for t, _ in parse_steps(target)] == record.effective_path
    print("PASS [8/10] 1000-record corpus round-trips exactly and flattened "
          "paths parse back to the originals")


def test_search_command_is_byte_deterministic(tmp_path, capsys):
    questions = write_questions(
        tmp_path, generate_world(10, {t: 0.25 for t in TOPICS}, seed=6)
    )
    config = write_run_config(tmp_path, topics=TOPICS, accuracy=0.8, workers=4)
    out_a, out_b = str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl")
    assert main(["--config", config, "search", questions, out_a]) == EXIT_OK
    assert main(["--config", config, "search", questions, out_b]) == EXIT_OK
    capsys.readouterr()
    bytes_a = open(out_a, "rb").read()
    assert bytes_a == open(out_b, "rb").read()
    assert len(list(read_records(out_a))) == 10
    with capsys.disabled():
        print("PASS [9/10] repeated seeded search runs write byte-identical "
              "record files")


def test_remote_backend_conformance(mock_server):
    # full search round trip against a mock chat service
    server = mock_server(default_responder)
    outcome = search(QUESTION, [http_backend(server)],
                     SearchConfig(request_concurrency=1))
    assert outcome.succeeded and outcome.effective_steps()[-1] == "42"

    # a rate-limited first attempt is retried and succeeds
    retry_server = mock_server(
        lambda p, i: (429, {"error": "slow down"}) if i == 0 else (200, GOOD_GENERATION)
    )
    result = http_backend(retry_server).generate_continuation(QUESTION, [])
    assert result.steps[-1] == ("42", True)
    assert len(retry_server.requests) == 2

    # a malformed score gets exactly one re-prompt, then the vote fails
    from comcts.backends import BackendError

    bad_server = mock_server(lambda p, i: (200, "no score here"))
    with pytest.raises(BackendError):
        http_backend(bad_server).evaluate_node(QUESTION, [], "step")
    assert len(bad_server.requests) == 2
    print("PASS [10/10] remote chat backend: end-to-end search, retry on 429, "
          "one re-prompt on malformed scores")
