"""Domain types shared across the pipeline, plus canonical instance tagging.

Character offsets throughout are Unicode scalar-value offsets (Python string
indices), never bytes. All types here are immutable after construction and
safe to share across threads.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator

ENT0_OPEN = "<ENT0>"
ENT0_CLOSE = "</ENT0>"
ENT1_OPEN = "<ENT1>"
ENT1_CLOSE = "</ENT1>"

# Some model outputs escape the closing slash; both forms are accepted on
# parse, only the unescaped form is ever emitted.
_ENT_REGION = {
    0: re.compile(r"<ENT0>(.*?)(?:</ENT0>|<\\/ENT0>)", re.DOTALL),
    1: re.compile(r"<ENT1>(.*?)(?:</ENT1>|<\\/ENT1>)", re.DOTALL),
}

INSTANCE_SOURCES = ("corpus", "llm-generated", "gold-test")
DEFINITION_POLARITIES = ("positive", "negative")
DEFINITION_ORIGINS = ("given", "derived-from-fewshot", "llm-generated-negative")


class CoreError(ValueError):
    """Invalid domain value."""


class TaggedTextError(CoreError):
    """Tagged text could not be parsed into an instance.

    ``reason`` is one of: missing-tag, duplicate-tag, overlap, empty-mention.
    """

    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason


def canonical_json(value) -> str:
    """Byte-stable JSON encoding: sorted keys, fixed separators, raw unicode."""
    return json.dumps(value, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def sha256_hex(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def stable_seed(*parts) -> int:
    """Derive a reproducible 32-bit seed from arbitrary labelled parts."""
    digest = sha256_hex("\x1f".join(str(p) for p in parts))
    return int(digest[:8], 16)


@dataclass(frozen=True)
class EntitySpan:
    """One entity mention located by a half-open character range."""

    mention: str
    start: int
    end: int

    def __post_init__(self):
        if self.start < 0 or self.start >= self.end:
            raise CoreError(f"bad span [{self.start}, {self.end})")
        if len(self.mention) != self.end - self.start:
            raise CoreError(
                f"mention length {len(self.mention)} != span width {self.end - self.start}"
            )


@dataclass(frozen=True)
class RelationInstance:
    """A sentence with two tagged entity mentions."""

    sentence: str
    head: EntitySpan
    tail: EntitySpan
    source: str = "corpus"
    relation_id: str | None = None
    instance_id: str = ""

    def __post_init__(self):
        if self.source not in INSTANCE_SOURCES:
            raise CoreError(f"unknown source {self.source!r}")
        for name, span in (("head", self.head), ("tail", self.tail)):
            if span.end > len(self.sentence):
                raise CoreError(f"{name} span ends past sentence ({span.end})")
            if self.sentence[span.start : span.end] != span.mention:
                raise CoreError(f"{name} mention does not match sentence slice")
            if not span.mention.strip():
                raise CoreError(f"{name} mention is empty")
        if spans_overlap(self.head, self.tail):
            raise CoreError("head and tail spans overlap")
        if not self.instance_id:
            object.__setattr__(self, "instance_id", make_instance_id(self))

    @property
    def dedup_triple(self) -> tuple[str, str, str]:
        return (self.sentence, self.head.mention, self.tail.mention)


def spans_overlap(a: EntitySpan, b: EntitySpan) -> bool:
    return a.start < b.end and b.start < a.end


def make_instance_id(instance: RelationInstance) -> str:
    key = canonical_json(
        [
            instance.sentence,
            instance.head.mention,
            instance.head.start,
            instance.tail.mention,
            instance.tail.start,
        ]
    )
    return "i" + sha256_hex(key)[:16]


@dataclass(frozen=True)
class RelationDefinition:
    """A one-sentence relation definition with two entity placeholders."""

    id: str
    template: str
    polarity: str = "positive"
    origin: str = "given"

    def __post_init__(self):
        if self.polarity not in DEFINITION_POLARITIES:
            raise CoreError(f"unknown polarity {self.polarity!r}")
        if self.origin not in DEFINITION_ORIGINS:
            raise CoreError(f"unknown origin {self.origin!r}")
        if not self.template.strip():
            raise CoreError("empty definition template")
        # Normally one occurrence each, but published definitions repeat a
        # placeholder inside a parenthetical, so only absence is an error.
        for token in (ENT0_OPEN, ENT1_OPEN):
            if token not in self.template:
                raise CoreError(
                    f"template must contain {token}: {self.template!r}"
                )


@dataclass(frozen=True)
class LabeledPair:
    """A training/dev instance with its binary label (1 positive, 0 negative)."""

    instance: RelationInstance
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise CoreError(f"label must be 0 or 1, got {self.label!r}")


@dataclass
class SeedSet:
    """Positive and negative seed instances for one relation."""

    positives: list[RelationInstance] = field(default_factory=list)
    negatives: list[RelationInstance] = field(default_factory=list)
    target_counts: tuple[int, int] = (0, 0)

    def __post_init__(self):
        for name, group in (("positives", self.positives), ("negatives", self.negatives)):
            triples = [inst.dedup_triple for inst in group]
            if len(triples) != len(set(triples)):
                raise CoreError(f"duplicate instances in seed {name}")


def canonical_tagged_text(instance: RelationInstance) -> str:
    """Render the sentence with ``<ENT0> head </ENT0>`` / ``<ENT1> tail </ENT1>`` tags.

    Everything outside the tagged regions is byte-identical to the sentence.
    """
    first, second = sorted(
        [(instance.head, ENT0_OPEN, ENT0_CLOSE), (instance.tail, ENT1_OPEN, ENT1_CLOSE)],
        key=lambda item: item[0].start,
    )
    s = instance.sentence
    out = [
        s[: first[0].start],
        f"{first[1]} {first[0].mention} {first[2]}",
        s[first[0].end : second[0].start],
        f"{second[1]} {second[0].mention} {second[2]}",
        s[second[0].end :],
    ]
    return "".join(out)


def parse_tagged_text(
    text: str,
    source: str = "llm-generated",
    relation_id: str | None = None,
) -> RelationInstance:
    """Parse a tagged sentence back into an instance.

    Accepts optional whitespace just inside the tags and the escaped closing
    form ``<\\/ENTk>``. Raises :class:`TaggedTextError` with a machine-readable
    reason on malformed input.
    """
    regions = {}
    for k, pattern in _ENT_REGION.items():
        matches = list(pattern.finditer(text))
        opens = text.count(f"<ENT{k}>")
        if len(matches) > 1 or opens > 1:
            raise TaggedTextError("duplicate-tag", f"more than one ENT{k} region")
        if not matches:
            raise TaggedTextError("missing-tag", f"no complete ENT{k} region")
        regions[k] = matches[0]

    m0, m1 = regions[0], regions[1]
    if m0.start() < m1.end() and m1.start() < m0.end():
        raise TaggedTextError("overlap", "tagged regions overlap")

    mentions = {k: m.group(1).strip() for k, m in regions.items()}
    for k, mention in mentions.items():
        if not mention:
            raise TaggedTextError("empty-mention", f"ENT{k} mention is empty")

    # Rebuild the untagged sentence, tracking where each mention lands.
    ordered = sorted(regions.items(), key=lambda kv: kv[1].start())
    out: list[str] = []
    pos = 0
    starts: dict[int, int] = {}
    for k, m in ordered:
        out.append(text[pos : m.start()])
        starts[k] = sum(len(part) for part in out)
        out.append(mentions[k])
        pos = m.end()
    out.append(text[pos:])
    sentence = "".join(out)

    spans = {
        k: EntitySpan(mentions[k], starts[k], starts[k] + len(mentions[k]))
        for k in (0, 1)
    }
    if spans_overlap(spans[0], spans[1]):
        raise TaggedTextError("overlap", "mentions overlap after detagging")
    try:
        return RelationInstance(
            sentence=sentence,
            head=spans[0],
            tail=spans[1],
            source=source,
            relation_id=relation_id,
        )
    except CoreError as exc:
        raise TaggedTextError("empty-mention", str(exc)) from exc


# --- interchange format -----------------------------------------------------
#
# Instances travel as newline-delimited JSON records:
#   {"id", "sentence", "head": {"mention","start","end"}, "tail": {...},
#    "relation": optional, "source"}
# Definitions as JSON records {"id","template","polarity","origin"}.


def instance_to_record(instance: RelationInstance) -> dict:
    record = {
        "id": instance.instance_id,
        "sentence": instance.sentence,
        "head": {
            "mention": instance.head.mention,
            "start": instance.head.start,
            "end": instance.head.end,
        },
        "tail": {
            "mention": instance.tail.mention,
            "start": instance.tail.start,
            "end": instance.tail.end,
        },
        "source": instance.source,
    }
    if instance.relation_id is not None:
        record["relation"] = instance.relation_id
    return record


def instance_from_record(record: dict) -> RelationInstance:
    try:
        head = record["head"]
        tail = record["tail"]
        return RelationInstance(
            sentence=record["sentence"],
            head=EntitySpan(head["mention"], int(head["start"]), int(head["end"])),
            tail=EntitySpan(tail["mention"], int(tail["start"]), int(tail["end"])),
            source=record.get("source", "corpus"),
            relation_id=record.get("relation"),
            instance_id=record.get("id", ""),
        )
    except (KeyError, TypeError) as exc:
        raise CoreError(f"malformed instance record: {exc}") from exc


def definition_to_record(definition: RelationDefinition) -> dict:
    return {
        "id": definition.id,
        "template": definition.template,
        "polarity": definition.polarity,
        "origin": definition.origin,
    }


def definition_from_record(record: dict) -> RelationDefinition:
    try:
        return RelationDefinition(
            id=record["id"],
            template=record["template"],
            polarity=record.get("polarity", "positive"),
            origin=record.get("origin", "given"),
        )
    except (KeyError, TypeError) as exc:
        raise CoreError(f"malformed definition record: {exc}") from exc


def write_instances(path, instances: Iterable[RelationInstance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for instance in instances:
            fh.write(canonical_json(instance_to_record(instance)) + "\n")


def read_instances(path) -> Iterator[RelationInstance]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield instance_from_record(json.loads(line))


def write_definitions(path, definitions: Iterable[RelationDefinition]) -> None:
    records = [definition_to_record(d) for d in definitions]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(records) + "\n")


def read_definitions(path) -> list[RelationDefinition]:
    with open(path, "r", encoding="utf-8") as fh:
        return [definition_from_record(r) for r in json.load(fh)]
