"""Iteration controller wiring synthesis, training, corpus scoring, and
feedback-driven follow-up rounds, with run-state persistence and resume.

Run directory layout::

    runs/<run>/config.json
    runs/<run>/<relation>/state.json
    runs/<run>/<relation>/journal.jsonl
    runs/<run>/<relation>/threads/*.json
    runs/<run>/<relation>/models/<handle>/...
    runs/<run>/<relation>/iter<k>/{synthesis/records.json, trainset.jsonl,
        devset.jsonl, negdefs.json, feedback.json, scores.jsonl,
        scores.meta.json, report.json}

Each relation runs its own loop and model; training always restarts from the
base model on the full accumulated sets.
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

from .classifier import ReferenceBackend, TrainSpec, WorkerBackend, train
from .core import (
    LabeledPair,
    RelationDefinition,
    canonical_json,
    definition_from_record,
    definition_to_record,
    instance_from_record,
    instance_to_record,
    sha256_hex,
    stable_seed,
)
from .corpus import CorpusStore, sample_negatives
from .feedback import FeedbackSample, ScoreTable, sample_feedback, score_corpus
from .llm import ChatClient, ChatParams, DialogueThread, MockBackend
from .prompting import SEED_STYLES
from .synthdata import ScriptedSynthesizer
from .synthesis import (
    SynthesisConfig,
    SynthesisRecord,
    synthesize_followup_positives,
    synthesize_initial_seeds,
    synthesize_negatives,
)

log = logging.getLogger(__name__)


class LoopError(RuntimeError):
    pass


class ConfigMismatchError(LoopError):
    pass


class ResumeError(LoopError):
    pass


_DEFAULTS = {
    "counts": {
        "k_pos_init": 15,
        "k_neg_init": 15,
        "followup_pos": 15,
        "followup_neg": 15,
        "n_negdefs": 5,
        "feedback_k": 10,
    },
    "thresholds": {"positive_feedback": 0.85, "negdef_feedback": 0.50, "decision": 0.5},
    "training": {
        "epochs": 12,
        "learning_rate": 3e-5,
        "batch_size": 64,
        "checkpoint_metric": "dev_f1",
        "premise_tagging": False,
    },
    "chat": {"model": "mock", "temperature": 0.6, "max_tokens": 4096, "presence_penalty": 0.0},
    "run": {"max_iterations": 2, "rng_seed": 0, "jobs": 1, "top_up_retries": 2},
    "backends": {"llm": "scripted-mock", "classifier": "reference", "worker_cmd": None},
    "paths": {"corpus": None},
}


@dataclass
class RunConfig:
    """Validated merged configuration for a run."""

    data: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        merged = {}
        unknown_sections = set(raw) - set(_DEFAULTS)
        if unknown_sections:
            raise LoopError(f"unknown config sections: {sorted(unknown_sections)}")
        for section, defaults in _DEFAULTS.items():
            provided = raw.get(section, {})
            unknown = set(provided) - set(defaults)
            if unknown:
                raise LoopError(f"unknown keys in [{section}]: {sorted(unknown)}")
            merged[section] = {**defaults, **provided}
        config = cls(merged)
        config.validate()
        return config

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        raw.pop("fingerprint", None)
        return cls.from_dict(raw)

    def validate(self) -> None:
        counts = self.data["counts"]
        for key, value in counts.items():
            if int(value) < 1:
                raise LoopError(f"counts.{key} must be >= 1")
        if int(self.data["run"]["max_iterations"]) < 1:
            raise LoopError("run.max_iterations must be >= 1")

    def __getitem__(self, section: str) -> dict:
        return self.data[section]

    def fingerprint(self) -> str:
        return sha256_hex(canonical_json(self.data))

    def save(self, path) -> None:
        payload = dict(self.data)
        payload["fingerprint"] = self.fingerprint()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(canonical_json(payload))

    def chat_params(self) -> ChatParams:
        chat = self.data["chat"]
        return ChatParams(
            model=chat["model"],
            temperature=chat["temperature"],
            max_tokens=chat["max_tokens"],
            presence_penalty=chat["presence_penalty"],
        )


@dataclass
class Services:
    """Shared corpus plus per-relation factories for the LLM and classifier."""

    corpus: CorpusStore
    make_chat_client: Callable
    make_classifier: Callable


def default_services(config: RunConfig, corpus: CorpusStore) -> Services:
    """Build services from config backend names (offline backends only)."""
    llm_kind = config["backends"]["llm"]
    classifier_kind = config["backends"]["classifier"]

    def make_chat_client(relation_dir):
        journal = os.path.join(relation_dir, "journal.jsonl")
        if llm_kind == "scripted-mock":
            return ChatClient(MockBackend(generator=ScriptedSynthesizer()), journal_path=journal)
        if llm_kind == "mock":
            return ChatClient(MockBackend(), journal_path=journal)
        if llm_kind == "live":
            from .llm import LiveBackend

            return ChatClient(LiveBackend(), journal_path=journal)
        raise LoopError(f"unknown llm backend {llm_kind!r}")

    def make_classifier(relation_dir):
        if classifier_kind == "reference":
            return ReferenceBackend(store_dir=os.path.join(relation_dir, "models"))
        if classifier_kind == "worker":
            cmd = config["backends"]["worker_cmd"]
            if not cmd:
                raise LoopError("backends.worker_cmd required for the worker classifier")
            return WorkerBackend(cmd, os.path.join(relation_dir, "worker"))
        raise LoopError(f"unknown classifier backend {classifier_kind!r}")

    return Services(corpus=corpus, make_chat_client=make_chat_client, make_classifier=make_classifier)


@dataclass
class IterationState:
    """Accumulated run state for one relation."""

    relation_id: str
    iteration: int = 0
    train_pairs: list[LabeledPair] = field(default_factory=list)
    dev_pairs: list[LabeledPair] = field(default_factory=list)
    negdefs: list[RelationDefinition] = field(default_factory=list)
    threads: dict[str, DialogueThread] = field(default_factory=dict)
    model_handle: str | None = None
    score_table: ScoreTable | None = None
    completed: list[str] = field(default_factory=list)

    def dedup_triples(self) -> set:
        return {
            lp.instance.dedup_triple for lp in self.train_pairs + self.dev_pairs
        }

    def used_corpus_ids(self) -> set:
        return {
            lp.instance.instance_id
            for lp in self.train_pairs + self.dev_pairs
            if lp.instance.source == "corpus"
        }

    def step_done(self, iteration: int, step: str) -> bool:
        return f"{iteration}:{step}" in self.completed


class RelationRun:
    """Drives and persists the loop for a single relation."""

    STEPS_FIRST = ("synthesis", "train", "score")
    STEPS_LATER = ("feedback", "followup-pos", "negatives", "train", "score")

    def __init__(
        self,
        definition: RelationDefinition,
        config: RunConfig,
        services: Services,
        run_dir: str,
    ):
        self.definition = definition
        self.config = config
        self.services = services
        self.relation_dir = os.path.join(run_dir, definition.id)
        os.makedirs(os.path.join(self.relation_dir, "threads"), exist_ok=True)
        self.client: ChatClient = services.make_chat_client(self.relation_dir)
        self.backend = services.make_classifier(self.relation_dir)
        self.state = IterationState(relation_id=definition.id)

    # -- persistence --------------------------------------------------------

    def _iter_dir(self, k: int) -> str:
        path = os.path.join(self.relation_dir, f"iter{k}")
        os.makedirs(os.path.join(path, "synthesis"), exist_ok=True)
        return path

    def _save_pairs(self, path, pairs: list[LabeledPair]) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for lp in pairs:
                fh.write(
                    canonical_json(
                        {"label": lp.label, "instance": instance_to_record(lp.instance)}
                    )
                    + "\n"
                )

    @staticmethod
    def _load_pairs(path) -> list[LabeledPair]:
        pairs = []
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    row = json.loads(line)
                    pairs.append(
                        LabeledPair(instance_from_record(row["instance"]), row["label"])
                    )
                except (ValueError, KeyError) as exc:
                    raise ResumeError(f"corrupt checkpoint {path}:{line_no}: {exc}") from exc
        return pairs

    def _save_threads(self) -> None:
        for style, thread in self.state.threads.items():
            path = os.path.join(self.relation_dir, "threads", f"{style}.json")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(canonical_json(thread.to_json()))

    def _save_records(self, k: int, records: list[SynthesisRecord]) -> None:
        path = os.path.join(self._iter_dir(k), "synthesis", "records.json")
        existing = []
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                existing = json.load(fh)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(canonical_json(existing + [r.to_json() for r in records]))

    def _checkpoint(self, k: int, step: str) -> None:
        self.state.iteration = k
        self.state.completed.append(f"{k}:{step}")
        iter_dir = self._iter_dir(k)
        self._save_pairs(os.path.join(iter_dir, "trainset.jsonl"), self.state.train_pairs)
        self._save_pairs(os.path.join(iter_dir, "devset.jsonl"), self.state.dev_pairs)
        with open(os.path.join(iter_dir, "negdefs.json"), "w", encoding="utf-8") as fh:
            fh.write(
                canonical_json([definition_to_record(d) for d in self.state.negdefs])
            )
        self._save_threads()
        with open(os.path.join(self.relation_dir, "usage.json"), "w", encoding="utf-8") as fh:
            fh.write(canonical_json(self.client.ledger.to_json()))
        state_payload = {
            "relation_id": self.state.relation_id,
            "iteration": self.state.iteration,
            "completed": self.state.completed,
            "model_handle": self.state.model_handle,
        }
        with open(os.path.join(self.relation_dir, "state.json"), "w", encoding="utf-8") as fh:
            fh.write(canonical_json(state_payload))

    def load_state(self) -> None:
        state_path = os.path.join(self.relation_dir, "state.json")
        if not os.path.exists(state_path):
            return
        with open(state_path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        k = payload["iteration"]
        iter_dir = os.path.join(self.relation_dir, f"iter{k}")
        try:
            self.state = IterationState(
                relation_id=payload["relation_id"],
                iteration=k,
                train_pairs=self._load_pairs(os.path.join(iter_dir, "trainset.jsonl")),
                dev_pairs=self._load_pairs(os.path.join(iter_dir, "devset.jsonl")),
                completed=list(payload["completed"]),
                model_handle=payload.get("model_handle"),
            )
        except FileNotFoundError as exc:
            raise ResumeError(f"corrupt checkpoint: missing {exc.filename}") from exc
        negdef_path = os.path.join(iter_dir, "negdefs.json")
        if os.path.exists(negdef_path):
            with open(negdef_path, "r", encoding="utf-8") as fh:
                self.state.negdefs = [definition_from_record(r) for r in json.load(fh)]
        threads_dir = os.path.join(self.relation_dir, "threads")
        for style in SEED_STYLES:
            path = os.path.join(threads_dir, f"{style}.json")
            if os.path.exists(path):
                with open(path, "r", encoding="utf-8") as fh:
                    self.state.threads[style] = DialogueThread.from_json(json.load(fh))
        if self.state.step_done(k, "score"):
            self.state.score_table = ScoreTable.load(
                os.path.join(iter_dir, "scores.jsonl"),
                os.path.join(iter_dir, "scores.meta.json"),
            )

    # -- seeds --------------------------------------------------------------

    def _seed(self, k: int, purpose: str) -> int:
        return stable_seed(self.config["run"]["rng_seed"], self.definition.id, k, purpose)

    def _train_spec(self, k: int) -> TrainSpec:
        training = self.config["training"]
        return TrainSpec(
            train=self.state.train_pairs,
            dev=self.state.dev_pairs,
            definition=self.definition,
            epochs=training["epochs"],
            learning_rate=training["learning_rate"],
            batch_size=training["batch_size"],
            rng_seed=self._seed(k, "train"),
            checkpoint_metric=training["checkpoint_metric"],
            premise_tagging=training["premise_tagging"],
            decision_threshold=self.config["thresholds"]["decision"],
        )

    def _synthesis_config(self) -> SynthesisConfig:
        counts = self.config["counts"]
        return SynthesisConfig(
            k_pos=counts["k_pos_init"],
            k_neg=counts["k_neg_init"],
            chat=self.config.chat_params(),
            top_up_retries=self.config["run"]["top_up_retries"],
            rng_seed=self.config["run"]["rng_seed"],
        )

    # -- iteration steps ----------------------------------------------------

    def run_iteration(self, k: int) -> None:
        steps = self.STEPS_FIRST if k == 1 else self.STEPS_LATER
        for step in steps:
            if self.state.step_done(k, step):
                continue
            try:
                getattr(self, "_step_" + step.replace("-", "_"))(k)
            except Exception:
                log.exception(
                    "step %s failed at iteration %d for %s; resume from %s",
                    step,
                    k,
                    self.definition.id,
                    self.relation_dir,
                )
                raise
            self._checkpoint(k, step)

    def _step_synthesis(self, k: int) -> None:
        records: list[SynthesisRecord] = []
        train_set, dev_set, threads = synthesize_initial_seeds(
            self.definition,
            self._synthesis_config(),
            self.services.corpus,
            self.client,
            iteration=k,
            dedup_triples=self.state.dedup_triples(),
            records=records,
        )
        self.state.threads = threads
        self.state.train_pairs += [LabeledPair(i, 1) for i in train_set.positives]
        self.state.train_pairs += [LabeledPair(i, 0) for i in train_set.negatives]
        self.state.dev_pairs += [LabeledPair(i, 1) for i in dev_set.positives]
        self.state.dev_pairs += [LabeledPair(i, 0) for i in dev_set.negatives]
        self._save_records(k, records)

    def _step_feedback(self, k: int) -> None:
        if self.state.score_table is None:
            raise LoopError(f"iteration {k} needs a score table from iteration {k - 1}")
        exclude = self.state.dedup_triples()
        positive = sample_feedback(
            self.state.score_table,
            "followup-positive",
            self.config["counts"]["feedback_k"],
            self._seed(k, "feedback-positive"),
            self.services.corpus,
            exclude_triples=exclude,
        )
        negdef = sample_feedback(
            self.state.score_table,
            "negdef",
            self.config["counts"]["feedback_k"],
            self._seed(k, "feedback-negdef"),
            self.services.corpus,
            exclude_triples=exclude,
        )
        payload = {
            "followup_positive": [
                {
                    "band": list(s.band),
                    "rng_seed": s.rng_seed,
                    "instances": [
                        {"instance_id": inst.instance_id, "p_pos": p}
                        for inst, p in s.instances
                    ],
                }
                for s in positive
            ],
            "negdef": [
                {
                    "band": list(s.band),
                    "rng_seed": s.rng_seed,
                    "instances": [
                        {"instance_id": inst.instance_id, "p_pos": p}
                        for inst, p in s.instances
                    ],
                }
                for s in negdef
            ],
        }
        with open(os.path.join(self._iter_dir(k), "feedback.json"), "w", encoding="utf-8") as fh:
            fh.write(canonical_json(payload))

    def _load_feedback(self, k: int, key: str) -> list[FeedbackSample]:
        with open(os.path.join(self._iter_dir(k), "feedback.json"), "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        purpose = "followup-positive" if key == "followup_positive" else "negdef"
        return [
            FeedbackSample(
                purpose=purpose,
                band=tuple(entry["band"]),
                instances=[
                    (self.services.corpus.get(row["instance_id"]), row["p_pos"])
                    for row in entry["instances"]
                ],
                rng_seed=entry["rng_seed"],
            )
            for entry in payload[key]
        ]

    def _step_followup_pos(self, k: int) -> None:
        groups = [s.tagged_texts() for s in self._load_feedback(k, "followup_positive")]
        records: list[SynthesisRecord] = []
        dedup = self.state.dedup_triples()
        n = self.config["counts"]["followup_pos"]
        # Fork throwaway dev threads before the train turn mutates history.
        dev_threads = {
            style: thread.fork(f"{thread.thread_id}:dev:it{k}")
            for style, thread in self.state.threads.items()
        }
        train_pos = synthesize_followup_positives(
            self.state.threads,
            self.definition,
            groups,
            n,
            self.client,
            self._synthesis_config(),
            k,
            dedup,
            records,
        )
        dev_pos = synthesize_followup_positives(
            dev_threads,
            self.definition,
            groups,
            n,
            self.client,
            self._synthesis_config(),
            k,
            dedup,
            records,
        )
        self.state.train_pairs += [LabeledPair(i, 1) for i in train_pos]
        self.state.dev_pairs += [LabeledPair(i, 1) for i in dev_pos]
        self._save_records(k, records)

    def _step_negatives(self, k: int) -> None:
        feedback_texts = []
        for sample in self._load_feedback(k, "negdef"):
            feedback_texts.extend(sample.tagged_texts())
        records: list[SynthesisRecord] = []
        dedup = self.state.dedup_triples()
        counts = self.config["counts"]
        negdefs, instances = synthesize_negatives(
            self.definition,
            feedback_texts,
            self.state.negdefs,
            counts["n_negdefs"],
            counts["followup_neg"],
            self.client,
            self._synthesis_config(),
            k,
            dedup,
            records,
        )
        dev_negatives = sample_negatives(
            self.services.corpus,
            counts["followup_neg"],
            self._seed(k, "dev-negatives"),
            exclude=self.state.used_corpus_ids(),
        )
        self.state.negdefs += negdefs
        self.state.train_pairs += [LabeledPair(i, 0) for i in instances]
        self.state.dev_pairs += [LabeledPair(i, 0) for i in dev_negatives]
        self._save_records(k, records)

    def _step_train(self, k: int) -> None:
        report = train(self.backend, self._train_spec(k))
        self.state.model_handle = report.model_handle
        with open(os.path.join(self._iter_dir(k), "report.json"), "w", encoding="utf-8") as fh:
            fh.write(canonical_json(report.to_json()))

    def _step_score(self, k: int) -> None:
        table = score_corpus(
            self.state.model_handle,
            self.definition,
            self.services.corpus,
            self.backend,
            premise_tagging=self.config["training"]["premise_tagging"],
            iteration=k,
        )
        iter_dir = self._iter_dir(k)
        table.save(
            os.path.join(iter_dir, "scores.jsonl"),
            os.path.join(iter_dir, "scores.meta.json"),
        )
        self.state.score_table = table

    def run(self, iterations: int) -> IterationState:
        start = 1
        if self.state.completed:
            last = self.state.iteration
            steps = self.STEPS_FIRST if last == 1 else self.STEPS_LATER
            start = last if not all(self.state.step_done(last, s) for s in steps) else last + 1
        for k in range(start, iterations + 1):
            self.run_iteration(k)
        return self.state


def run_loop(
    config: RunConfig,
    services: Services,
    run_dir: str,
    definitions: list[RelationDefinition],
    iterations: int | None = None,
) -> dict[str, IterationState]:
    """Run (or extend) the loop for every relation under one run directory."""
    os.makedirs(run_dir, exist_ok=True)
    config_path = os.path.join(run_dir, "config.json")
    if os.path.exists(config_path):
        existing = RunConfig.load(config_path)
        if existing.fingerprint() != config.fingerprint():
            raise ConfigMismatchError(
                "config does not match the run directory "
                f"({existing.fingerprint()[:12]} != {config.fingerprint()[:12]})"
            )
    else:
        config.save(config_path)
    _save_definitions(run_dir, definitions)
    iterations = iterations or config["run"]["max_iterations"]

    def run_one(definition: RelationDefinition) -> tuple[str, IterationState]:
        run = RelationRun(definition, config, services, run_dir)
        run.load_state()
        return definition.id, run.run(iterations)

    ordered = sorted(definitions, key=lambda d: d.id)
    jobs = int(config["run"]["jobs"])
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = dict(pool.map(run_one, ordered))
    else:
        results = dict(run_one(d) for d in ordered)
    return results


def _save_definitions(run_dir: str, definitions: list[RelationDefinition]) -> None:
    path = os.path.join(run_dir, "definitions.json")
    known: dict[str, dict] = {}
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as fh:
            known = {r["id"]: r for r in json.load(fh)}
    for definition in definitions:
        record = definition_to_record(definition)
        if definition.id in known and known[definition.id] != record:
            raise LoopError(f"definition {definition.id} conflicts with the run's record")
        known[definition.id] = record
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json([known[k] for k in sorted(known)]))


def resume(run_dir: str, services: Services, config: RunConfig | None = None) -> dict[str, IterationState]:
    """Reconstruct the latest consistent state for every relation and continue.

    A finished run resumes as a no-op; a config whose fingerprint differs from
    the persisted one is rejected.
    """
    config_path = os.path.join(run_dir, "config.json")
    if not os.path.exists(config_path):
        raise ResumeError(f"no config.json under {run_dir}")
    persisted = RunConfig.load(config_path)
    if config is not None and config.fingerprint() != persisted.fingerprint():
        raise ConfigMismatchError("provided config does not match the persisted run config")
    definitions_path = os.path.join(run_dir, "definitions.json")
    if not os.path.exists(definitions_path):
        raise ResumeError(f"no definitions.json under {run_dir}")
    with open(definitions_path, "r", encoding="utf-8") as fh:
        definitions = [definition_from_record(r) for r in json.load(fh)]
    return run_loop(persisted, services, run_dir, definitions)


def run_tree_hash(run_dir: str) -> str:
    """Content hash over every file in a run directory (relative paths)."""
    entries = []
    for root, _dirs, files in os.walk(run_dir):
        for name in files:
            path = os.path.join(root, name)
            rel = os.path.relpath(path, run_dir)
            with open(path, "rb") as fh:
                entries.append((rel, sha256_hex(fh.read().hex())))
    entries.sort()
    return sha256_hex(canonical_json(entries))
