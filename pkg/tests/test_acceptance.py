"""Acceptance suite: one test per exit criterion, each printing a PASS/FAIL
line (run with ``pytest tests/test_acceptance.py -s`` to see them).

Everything here runs offline against the deterministic mock backend and the
in-process reference classifier.
"""
import json
import math
import os
import time
from contextlib import contextmanager

import mpmath as mp
import numpy as np
import pytest

from repal import kernels
from repal.classifier import (
    ReferenceBackend,
    TrainSpec,
    bce_loss,
    build_nli_pair,
    entailment_probability,
    score,
    softmax3,
    train,
)
from repal.cli import main
from repal.core import EntitySpan, LabeledPair, RelationDefinition, RelationInstance
from repal.corpus import EvalGroup
from repal.evaluation import (
    aggregate_report,
    evaluate_target_relation,
    monte_carlo_random_guess,
)
from repal.loop import run_tree_hash
from repal.synthesis import parse_instance_item, parse_numbered_items

mp.mp.dps = 60

HERE = os.path.dirname(__file__)


@contextmanager
def criterion(name):
    try:
        yield
    except BaseException:
        print(f"\n[ACCEPTANCE] {name}: FAIL")
        raise
    print(f"\n[ACCEPTANCE] {name}: PASS")


ACCEPT_CONFIG = {
    "training": {"learning_rate": 3.0},
    "run": {"max_iterations": 2, "rng_seed": 7},
}


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    """Bundled dataset plus two identically-seeded CLI loop runs."""
    tmp = tmp_path_factory.mktemp("accept")
    data = tmp / "data"
    assert main(["synthdata", "--out", str(data), "--seed", "0"]) == 0
    config_path = tmp / "config.json"
    config_path.write_text(json.dumps(ACCEPT_CONFIG))

    elapsed = {}
    for name in ("run-a", "run-b"):
        t0 = time.time()
        code = main(
            [
                "loop",
                "run",
                "--config",
                str(config_path),
                "--definitions",
                str(data / "definitions.json"),
                "--corpus",
                str(data / "corpus"),
                "--iterations",
                "2",
                "--out",
                str(tmp / name),
            ]
        )
        elapsed[name] = time.time() - t0
        assert code == 0
    return {"tmp": tmp, "data": data, "elapsed": elapsed}


def test_end_to_end_determinism(e2e):
    with criterion("end-to-end determinism"):
        assert e2e["elapsed"]["run-a"] < 60.0, f"run took {e2e['elapsed']['run-a']:.1f}s"
        hash_a = run_tree_hash(e2e["tmp"] / "run-a")
        hash_b = run_tree_hash(e2e["tmp"] / "run-b")
        assert hash_a == hash_b


def test_accumulation_shape(e2e):
    with criterion("accumulation shape"):
        for rel in ("R-AUTH", "R-EMP", "R-LEAD", "R-LOC"):
            rel_dir = e2e["tmp"] / "run-a" / rel
            train_rows = [
                json.loads(l) for l in open(rel_dir / "iter2" / "trainset.jsonl")
            ]
            dev_rows = [json.loads(l) for l in open(rel_dir / "iter2" / "devset.jsonl")]
            for rows in (train_rows, dev_rows):
                positives = sum(1 for r in rows if r["label"] == 1)
                assert (positives, len(rows) - positives) == (30, 30)
            negdefs = json.load(open(rel_dir / "iter2" / "negdefs.json"))
            assert len(negdefs) == 5
            feedback = json.load(open(rel_dir / "iter2" / "feedback.json"))
            groups = feedback["followup_positive"]
            assert [len(g["instances"]) for g in groups] == [10, 10, 10]
            ids = [row["instance_id"] for g in groups for row in g["instances"]]
            assert len(ids) == len(set(ids))


def _tiny_group(n_relations=5, per_relation=6):
    instances_by_relation = {}
    relations = [f"R{r}" for r in range(n_relations)]
    for r, rel in enumerate(relations):
        block = []
        for i in range(per_relation):
            e0, e1 = f"Head{r}x{i}", f"Tail{r}x{i}"
            sentence = f"{e0} relates plainly to {e1} in text."
            block.append(
                RelationInstance(
                    sentence,
                    head=EntitySpan(e0, 0, len(e0)),
                    tail=EntitySpan(e1, sentence.index(e1), sentence.index(e1) + len(e1)),
                    source="gold-test",
                    relation_id=rel,
                )
            )
        instances_by_relation[rel] = block
    return EvalGroup(relations, instances_by_relation, group_seed=0)


def test_metrics_oracle():
    with criterion("metrics oracle (200 randomized prediction sets)"):
        group = _tiny_group()
        rng = np.random.default_rng(77)
        for trial in range(200):
            rate = rng.uniform(0.05, 0.95)
            predictions = {
                inst.instance_id: bool(rng.random() < rate)
                for inst in group.all_instances()
            }
            target = group.relations[int(rng.integers(len(group.relations)))]
            m = evaluate_target_relation(predictions, target, group)
            # independent recount
            tp = fp = fn = tn = 0
            for rel, instances in group.instances_by_relation.items():
                for inst in instances:
                    predicted = predictions[inst.instance_id]
                    if rel == target:
                        tp += predicted
                        fn += not predicted
                    else:
                        fp += predicted
                        tn += not predicted
            assert (m.tp, m.fp, m.fn, m.tn) == (tp, fp, fn, tn)
            assert m.precision == (tp / (tp + fp) if tp + fp else 0.0)
            assert m.recall == (tp / (tp + fn) if tp + fn else 0.0)
            expected_f1 = (
                2 * m.precision * m.recall / (m.precision + m.recall)
                if m.precision + m.recall
                else 0.0
            )
            assert m.f1 == expected_f1


def test_random_guess_reproduction():
    with criterion("random-guess reproduction (14 relations x 700)"):
        t0 = time.time()
        instances_by_relation = {}
        relations = [f"REL{r:02d}" for r in range(14)]
        for r, rel in enumerate(relations):
            block = []
            for i in range(700):
                e0, e1 = f"Head{r}x{i}", f"Tail{r}x{i}"
                sentence = f"{e0} relates in sample text to {e1} here."
                block.append(
                    RelationInstance(
                        sentence,
                        head=EntitySpan(e0, 0, len(e0)),
                        tail=EntitySpan(
                            e1, sentence.index(e1), sentence.index(e1) + len(e1)
                        ),
                        source="gold-test",
                        relation_id=rel,
                    )
                )
            instances_by_relation[rel] = block
        group = EvalGroup(relations, instances_by_relation, group_seed=0)
        summary = monte_carlo_random_guess(group, n_trials=1000, rng_seed=0)
        elapsed = time.time() - t0
        assert elapsed < 30.0, f"took {elapsed:.1f}s"
        assert abs(summary["precision_mean"] * 100 - 7.14) <= 1.0
        assert abs(summary["recall_mean"] * 100 - 50.77) <= 2.0


def _fixture_examples():
    with open(
        os.path.join(HERE, "fixtures", "generation_examples.json"), encoding="utf-8"
    ) as fh:
        return json.load(fh)


def test_parser_fidelity():
    with criterion("parser fidelity (published examples + fuzz)"):
        examples = _fixture_examples()
        # Nine styled generation examples parse with the right mentions.
        for style in ("brief", "medium", "implicit"):
            data = examples[style]
            items = parse_numbered_items(data["completion"])
            assert len(items) == 3
            for (ordinal, body), (head, tail) in zip(items, data["expected"]):
                item = parse_instance_item(body, ordinal=ordinal)
                assert item.parsed is not None
                assert item.parsed.head.mention == head
                assert item.parsed.tail.mention == tail
        # Six labeled test sentences parse too.
        for entry in examples["tagged_test_sentences"]["items"]:
            item = parse_instance_item(entry["text"])
            assert item.parsed is not None
            assert item.parsed.head.mention == entry["head"]
            assert item.parsed.tail.mention == entry["tail"]
        # Malformed items yield the documented failure reasons.
        malformed = {
            "<ENT0>A</ENT0> fought beside C.": "missing-tag",
            "<ENT0>A</ENT0> и <ENT0>B</ENT0> beside <ENT1>C</ENT1>.": "duplicate-tag",
            "<ENT0> a <ENT1> b </ENT1> c </ENT0>": "overlap",
            "<ENT0> </ENT0> beside <ENT1>C</ENT1>.": "empty-mention",
        }
        for body, reason in malformed.items():
            assert parse_instance_item(body).failure_reason == reason
        # A thousand mutated completions: typed results, never an exception.
        rng = np.random.default_rng(123)
        bases = [examples[s]["completion"] for s in ("brief", "medium", "implicit")]
        tokens = ["<ENT0>", "</ENT0>", "<ENT1>", "</ENT1>", "1.", "\n", '"', "<\\/ENT0>"]
        parsed = failed = 0
        for _ in range(1000):
            text = bases[int(rng.integers(len(bases)))]
            for _ in range(int(rng.integers(1, 5))):
                op = rng.integers(4)
                if op == 0 and text:  # random deletion
                    i = int(rng.integers(len(text)))
                    width = int(rng.integers(1, 12))
                    text = text[:i] + text[i + width :]
                elif op == 1:  # random tag/junk insertion
                    i = int(rng.integers(len(text) + 1))
                    text = text[:i] + tokens[int(rng.integers(len(tokens)))] + text[i:]
                elif op == 2 and text:  # duplication
                    i = int(rng.integers(len(text)))
                    j = min(len(text), i + int(rng.integers(1, 40)))
                    text = text[:i] + text[i:j] + text[i:j] + text[j:]
                else:  # truncation
                    text = text[: int(rng.integers(len(text) + 1))]
            for ordinal, body in parse_numbered_items(text):
                item = parse_instance_item(body, ordinal=ordinal)
                assert (item.parsed is None) != (item.failure_reason is None)
                parsed += item.parsed is not None
                failed += item.parsed is None
        assert parsed and failed  # the fuzz corpus exercised both outcomes


def test_math_checks():
    with criterion("math checks (1e-9 oracles, gradient, softmax)"):
        rng = np.random.default_rng(2024)

        def mp_entail(z):
            exps = [mp.e ** mp.mpf(float(v)) for v in z]
            return exps[0] / sum(exps)

        for _ in range(1000):
            z = rng.uniform(-50, 50, size=3)
            expected = float(mp_entail(z))
            assert abs(entailment_probability(tuple(z)) - expected) < 1e-9
            components = softmax3(tuple(z))
            assert abs(sum(components) - 1.0) < 1e-12

        for _ in range(1000):
            n = int(rng.integers(1, 8))
            p = rng.uniform(1e-6, 1 - 1e-6, size=n)
            y = rng.integers(0, 2, size=n)
            expected = -sum(
                mp.mpf(int(yi)) * mp.log(mp.mpf(float(pi)))
                + (1 - mp.mpf(int(yi))) * mp.log(1 - mp.mpf(float(pi)))
                for pi, yi in zip(p, y)
            ) / n
            assert abs(bce_loss(list(p), list(y)) - float(expected)) < 1e-9

        # analytic gradient vs central differences
        n, d, nnz = 10, 6, 24
        indptr = np.array(
            [0] + sorted(rng.integers(0, nnz, size=n - 1).tolist()) + [nnz], dtype=np.int64
        )
        indices = rng.integers(0, d, size=nnz).astype(np.int64)
        counts = rng.uniform(0.5, 2.0, size=nnz)
        labels = rng.integers(0, 2, size=n).astype(np.float64)
        weights = rng.normal(scale=0.3, size=(d, 3))
        bias = rng.normal(scale=0.3, size=3)
        _, dw, db = kernels.loss_and_grad(indptr, indices, counts, labels, weights, bias)
        h = 1e-6

        def loss_at(w, b):
            return kernels.loss_and_grad(indptr, indices, counts, labels, w, b)[0]

        for i in range(d):
            for j in range(3):
                wp, wm = weights.copy(), weights.copy()
                wp[i, j] += h
                wm[i, j] -= h
                fd = (loss_at(wp, bias) - loss_at(wm, bias)) / (2 * h)
                if abs(fd) > 1e-12:
                    assert abs(dw[i, j] - fd) / max(abs(fd), 1e-12) < 1e-4
        for j in range(3):
            bp, bm = bias.copy(), bias.copy()
            bp[j] += h
            bm[j] -= h
            fd = (loss_at(weights, bp) - loss_at(weights, bm)) / (2 * h)
            assert abs(db[j] - fd) / max(abs(fd), 1e-12) < 1e-4


GOLDEN_NAMES = [
    "initial_pos_brief",
    "initial_pos_medium",
    "initial_pos_implicit",
    "followup_pos",
    "negdef_first",
    "negdef_subsequent",
    "def_derivation",
    "baseline_binary",
    "baseline_qa_binary",
    "baseline_qa_multi",
]


def test_prompt_golden_files():
    with criterion("prompt golden files (byte-for-byte)"):
        from repal.core import parse_tagged_text, read_definitions
        from repal.prompting import (
            render_baseline_prompt,
            render_definition_derivation_prompt,
            render_followup_positive_prompt,
            render_negdef_prompt,
            render_seed_prompt,
        )

        fixtures = os.path.join(HERE, "fixtures")
        defs = {
            d.id: d
            for d in read_definitions(os.path.join(fixtures, "fewrel_definitions.json"))
        }
        examples = _fixture_examples()
        items = examples["tagged_test_sentences"]["items"]
        feedback = [items[0]["text"], items[1]["text"]]
        coppola = parse_tagged_text(items[1]["text"], source="gold-test", relation_id="P26")
        rendered = {
            "initial_pos_brief": render_seed_prompt(defs["P241"], 5, "brief"),
            "initial_pos_medium": render_seed_prompt(defs["P241"], 5, "medium"),
            "initial_pos_implicit": render_seed_prompt(defs["P241"], 5, "implicit"),
            "followup_pos": render_followup_positive_prompt(defs["P40"], 5, feedback),
            "negdef_first": render_negdef_prompt(defs["P40"], feedback, 5),
            "negdef_subsequent": render_negdef_prompt(
                defs["P40"], feedback, 5, previous_negdefs=[defs["P26"], defs["P3373"]]
            ),
            "def_derivation": render_definition_derivation_prompt(
                [items[4]["text"], items[5]["text"]]
            ),
            "baseline_binary": render_baseline_prompt("binary-choice", defs["P40"], coppola),
            "baseline_qa_binary": render_baseline_prompt("qa-binary", defs["P40"], coppola),
            "baseline_qa_multi": render_baseline_prompt(
                "qa-multi", [defs[k] for k in sorted(defs)], coppola
            ),
        }
        assert sorted(rendered) == sorted(GOLDEN_NAMES)
        for name in GOLDEN_NAMES:
            with open(
                os.path.join(HERE, "golden", f"{name}.golden.txt"), "rb"
            ) as fh:
                golden = fh.read()
            assert rendered[name].encode("utf-8") == golden, f"golden drift: {name}"


def _toy_pairs(n, seed, keyword="serves", noise=("visited", "painted", "greeted")):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        positive = i % 2 == 0
        verb = keyword if positive else noise[int(rng.integers(len(noise)))]
        e0, e1 = f"Alpha{i}", f"Beta{i}"
        sentence = f"{e0} {verb} {e1} near the old bridge."
        inst = RelationInstance(
            sentence,
            head=EntitySpan(e0, 0, len(e0)),
            tail=EntitySpan(
                e1, len(e0) + len(verb) + 2, len(e0) + len(verb) + 2 + len(e1)
            ),
            source="llm-generated",
        )
        pairs.append(LabeledPair(inst, 1 if positive else 0))
    return pairs


def test_reference_backend_learning(e2e):
    with criterion("reference-backend learning (toy F1 and iteration gain)"):
        spec = TrainSpec(
            train=_toy_pairs(200, seed=1),
            dev=_toy_pairs(100, seed=2),
            definition=RelationDefinition("TOY", "<ENT1> was/is served by <ENT0> (a person)"),
            epochs=12,
            learning_rate=0.8,
            batch_size=64,
            rng_seed=0,
        )
        backend = ReferenceBackend()
        report = train(backend, spec)
        assert report.epochs[report.selected_epoch - 1]["dev_f1"] >= 0.95

        # Scripted-feedback iteration gain on the bundled world, averaged over
        # relations per the evaluation protocol.
        data = e2e["data"]
        group_payload = json.loads((data / "group.json").read_text())
        group = EvalGroup.from_json(group_payload)
        from repal.core import read_definitions

        definitions = {
            d.id: d for d in read_definitions(data / "definitions.json")
        }
        per_iter = {1: {}, 2: {}}
        for rel in group.relations:
            rel_dir = e2e["tmp"] / "run-a" / rel
            rel_backend = ReferenceBackend(store_dir=str(rel_dir / "models"))
            for k in (1, 2):
                report_k = json.load(open(rel_dir / f"iter{k}" / "report.json"))
                pairs = [
                    build_nli_pair(inst, definitions[rel])
                    for inst in group.all_instances()
                ]
                results = score(rel_backend, report_k["model_handle"], pairs)
                predictions = {
                    inst.instance_id: (r.p_pos > 0.5)
                    for inst, r in zip(group.all_instances(), results)
                }
                per_iter[k][rel] = evaluate_target_relation(predictions, rel, group)
        f1_one = aggregate_report(per_iter[1]).f1
        f1_two = aggregate_report(per_iter[2]).f1
        assert f1_two >= f1_one, f"iteration 2 F1 {f1_two:.4f} < iteration 1 {f1_one:.4f}"
