"""Unlabeled-corpus ingestion, cleaning, sampling, and evaluation groups.

Cleaning drops records whose mentions overlap, whose mentions are bare
personal pronouns, or that duplicate an already-stored
(sentence, head mention, tail mention) triple. The same rules are applied to
evaluation data.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .core import (
    EntitySpan,
    RelationInstance,
    canonical_json,
    instance_from_record,
    instance_to_record,
    sha256_hex,
    spans_overlap,
)

# Closed-class English personal pronouns; case-insensitive match on the whole
# mention.
PRONOUN_STOPLIST = frozenset(
    ("i", "he", "she", "we", "they", "you", "it", "me", "him", "her", "us", "them")
)

REASON_MALFORMED = "malformed"
REASON_OVERLAP = "overlap"
REASON_PRONOUN = "pronoun-mention"
REASON_DUPLICATE = "duplicate"


class CorpusError(RuntimeError):
    pass


class EmptyCorpusError(CorpusError):
    pass


class InsufficientInstancesError(CorpusError):
    def __init__(self, requested: int, available: int):
        super().__init__(
            f"requested {requested} instances but only {available} available "
            f"(short by {requested - available})"
        )
        self.requested = requested
        self.available = available


def clean_reason(record: Mapping, known_triples: set) -> str | None:
    """Return the rejection reason for a candidate record, or None if clean."""
    try:
        instance_like = {
            "sentence": record["sentence"],
            "head": record["head"],
            "tail": record["tail"],
        }
        head = EntitySpan(
            instance_like["head"]["mention"],
            int(instance_like["head"]["start"]),
            int(instance_like["head"]["end"]),
        )
        tail = EntitySpan(
            instance_like["tail"]["mention"],
            int(instance_like["tail"]["start"]),
            int(instance_like["tail"]["end"]),
        )
        sentence = record["sentence"]
        if not isinstance(sentence, str):
            return REASON_MALFORMED
        for span in (head, tail):
            if span.end > len(sentence) or sentence[span.start : span.end] != span.mention:
                return REASON_MALFORMED
    except (KeyError, TypeError, ValueError):
        return REASON_MALFORMED
    if spans_overlap(head, tail):
        return REASON_OVERLAP
    if (
        head.mention.strip().lower() in PRONOUN_STOPLIST
        or tail.mention.strip().lower() in PRONOUN_STOPLIST
    ):
        return REASON_PRONOUN
    if (sentence, head.mention, tail.mention) in known_triples:
        return REASON_DUPLICATE
    return None


class CorpusStore:
    """Ordered, deduplicated collection of cleaned instances."""

    def __init__(self):
        self.instances: list[RelationInstance] = []
        self.rejected_log: list[tuple[dict, str]] = []
        self._triples: set[tuple[str, str, str]] = set()
        self._by_id: dict[str, RelationInstance] = {}

    def __len__(self) -> int:
        return len(self.instances)

    def __contains__(self, instance_id: str) -> bool:
        return instance_id in self._by_id

    def get(self, instance_id: str) -> RelationInstance:
        return self._by_id[instance_id]

    def add_record(self, record: Mapping) -> bool:
        """Clean and store one raw record; log and return False on rejection."""
        reason = clean_reason(record, self._triples)
        if reason is not None:
            self.rejected_log.append((dict(record), reason))
            return False
        instance = instance_from_record(dict(record))
        self.instances.append(instance)
        self._triples.add(instance.dedup_triple)
        self._by_id[instance.instance_id] = instance
        return True

    def add_instance(self, instance: RelationInstance) -> bool:
        return self.add_record(instance_to_record(instance))

    def fingerprint(self) -> str:
        return sha256_hex("\n".join(i.instance_id for i in self.instances))

    # Persistence: an append-only instance file plus a sidecar index keyed by
    # dedup-triple hash, and the rejection log for auditing.
    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "instances.jsonl"), "w", encoding="utf-8") as fh:
            for instance in self.instances:
                fh.write(canonical_json(instance_to_record(instance)) + "\n")
        index = sorted(sha256_hex(canonical_json(list(t))) for t in self._triples)
        with open(os.path.join(directory, "index.json"), "w", encoding="utf-8") as fh:
            fh.write(canonical_json({"triple_hashes": index}))
        with open(os.path.join(directory, "rejected.jsonl"), "w", encoding="utf-8") as fh:
            for record, reason in self.rejected_log:
                fh.write(canonical_json({"record": record, "reason": reason}) + "\n")

    @classmethod
    def load(cls, directory) -> "CorpusStore":
        store = cls()
        path = os.path.join(directory, "instances.jsonl")
        if not os.path.exists(path):
            raise CorpusError(f"no corpus store at {directory}")
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    store.add_record(json.loads(line))
        return store


def ingest(records: Iterable[Mapping]) -> CorpusStore:
    """Build a cleaned store from raw records; never aborts on a bad record."""
    store = CorpusStore()
    for record in records:
        if not isinstance(record, Mapping):
            store.rejected_log.append(({"raw": repr(record)}, REASON_MALFORMED))
            continue
        store.add_record(record)
    if not store.instances:
        raise EmptyCorpusError("no instances survived cleaning")
    return store


def sample_negatives(
    store: CorpusStore,
    k: int,
    rng_seed: int,
    exclude: frozenset | set = frozenset(),
) -> list[RelationInstance]:
    """Uniform sample without replacement, skipping excluded instance ids."""
    if k == 0:
        return []
    candidates = [i for i in store.instances if i.instance_id not in exclude]
    if len(candidates) < k:
        raise InsufficientInstancesError(k, len(candidates))
    rng = np.random.default_rng(rng_seed)
    picks = rng.choice(len(candidates), size=k, replace=False)
    return [candidates[i] for i in picks]


def downsample(store: CorpusStore, n: int, rng_seed: int) -> CorpusStore:
    """New store of exactly n instances, uniform without replacement."""
    if n > len(store):
        raise InsufficientInstancesError(n, len(store))
    rng = np.random.default_rng(rng_seed)
    picks = sorted(rng.choice(len(store.instances), size=n, replace=False))
    out = CorpusStore()
    for i in picks:
        out.add_instance(store.instances[i])
    return out


@dataclass
class EvalGroup:
    """One test split: a set of relations and their gold instances."""

    relations: list[str]
    instances_by_relation: dict[str, list[RelationInstance]]
    group_seed: int

    def __post_init__(self):
        if len(set(self.relations)) != len(self.relations):
            raise CorpusError("relations must be pairwise distinct")
        for rel, instances in self.instances_by_relation.items():
            if rel not in self.relations:
                raise CorpusError(f"instances for unknown relation {rel}")
            for inst in instances:
                if inst.relation_id != rel:
                    raise CorpusError(
                        f"instance {inst.instance_id} labeled {inst.relation_id}, "
                        f"filed under {rel}"
                    )

    def all_instances(self) -> list[RelationInstance]:
        out = []
        for rel in self.relations:
            out.extend(self.instances_by_relation[rel])
        return out

    def to_json(self) -> dict:
        return {
            "relations": list(self.relations),
            "group_seed": self.group_seed,
            "instances": {
                rel: [instance_to_record(i) for i in insts]
                for rel, insts in self.instances_by_relation.items()
            },
        }

    @classmethod
    def from_json(cls, data: dict) -> "EvalGroup":
        return cls(
            relations=list(data["relations"]),
            instances_by_relation={
                rel: [instance_from_record(r) for r in records]
                for rel, records in data["instances"].items()
            },
            group_seed=int(data["group_seed"]),
        )


def _clean_instances(instances: list[RelationInstance]) -> list[RelationInstance]:
    kept: list[RelationInstance] = []
    triples: set = set()
    for inst in instances:
        record = instance_to_record(inst)
        if clean_reason(record, triples) is not None:
            continue
        triples.add(inst.dedup_triple)
        kept.append(inst)
    return kept


def build_eval_groups(
    labeled: Mapping[str, list[RelationInstance]],
    group_size: int,
    n_groups: int,
    rng_seed: int,
) -> list[EvalGroup]:
    """Sample n_groups groups of group_size relations with their cleaned instances.

    Relations are shuffled once under the seed; when enough relations exist the
    groups are disjoint chunks of the shuffle, otherwise each group is an
    independent draw without replacement.
    """
    relations = sorted(labeled)
    if group_size > len(relations):
        raise CorpusError(
            f"group_size {group_size} exceeds available relations {len(relations)}"
        )
    rng = np.random.default_rng(rng_seed)
    order = [relations[i] for i in rng.permutation(len(relations))]
    groups = []
    for g in range(n_groups):
        if group_size * n_groups <= len(relations):
            members = order[g * group_size : (g + 1) * group_size]
        else:
            picks = rng.choice(len(relations), size=group_size, replace=False)
            members = [relations[i] for i in picks]
        groups.append(
            EvalGroup(
                relations=list(members),
                instances_by_relation={
                    rel: _clean_instances(labeled[rel]) for rel in members
                },
                group_seed=int(rng_seed) * 1000 + g,
            )
        )
    return groups
