"""Bundled synthetic dataset and a scripted chat generator for offline runs.

The world defines four keyword-separable relations, entity name pools, and
surface patterns shared between the synthetic corpus and the scripted
generator, so an end-to-end run can learn, score, and refine without a live
model. All output is deterministic in the request digest.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .core import (
    RelationDefinition,
    RelationInstance,
    EntitySpan,
    stable_seed,
)
from .corpus import CorpusStore, ingest

FIRST_NAMES = (
    "Ana", "Bram", "Cleo", "Dara", "Edan", "Fern", "Gale", "Hollis", "Iris",
    "Joren", "Kaia", "Lionel", "Mara", "Nils", "Opal", "Petra", "Quinn",
    "Rios", "Sable", "Tomas", "Uma", "Vern", "Wren", "Yael",
)
LAST_NAMES = (
    "Abbott", "Boland", "Calder", "Droste", "Ellison", "Fairn", "Garrod",
    "Halden", "Ingram", "Jessup", "Keating", "Lomax", "Merced", "Norgate",
    "Ostrom", "Paxton", "Quiller", "Rainey", "Seaton", "Tindall", "Ulmer",
    "Vance", "Whitford", "Yarrow",
)
ORG_HEADS = (
    "Helix", "Nordwind", "Cobalt", "Marrow", "Quarry", "Solent", "Tidewater",
    "Umber", "Vantage", "Westerly", "Azimuth", "Birchline",
)
ORG_TAILS = ("Labs", "Group", "Industries", "Holdings", "Partners", "Works")
CITIES = (
    "Arvale", "Brindmoor", "Calexa", "Dunmere", "Eastvale", "Foxden",
    "Gravenport", "Hollowbrook", "Ketterby", "Larkspur", "Midvale", "Northgate",
)
LANDMARKS = (
    "the Alder Gate", "the Basalt Tower", "the Candlewick Hall", "the Drift Museum",
    "the Ember Bridge", "the Foundry Arch", "the Gilded Fountain", "the Harbor Obelisk",
    "the Ivory Pavilion", "the Juniper Library",
)
BOOK_HEADS = (
    "The Silent", "A Winter", "The Last", "An Iron", "The Hollow", "A Distant",
    "The Copper", "A Broken",
)
BOOK_TAILS = ("Harvest", "Meridian", "Orchard", "Compass", "Lantern", "Voyage")

PREFIXES = (
    "",
    "In 2014, ",
    "According to the archive, ",
    "Records show that ",
    "By most accounts, ",
    "Earlier this year, ",
)
SUFFIXES = (
    ".",
    ", according to the registry.",
    ", colleagues recalled.",
    ", the files note.",
)

DISTRACTOR_PATTERNS = (
    ("{e0} met {e1} at a conference", "person", "person"),
    ("{e0} photographed {e1} for a catalogue", "person", "landmark"),
    ("{e0} sold a painting to {e1}", "person", "person"),
    ("{e0} traveled through {e1} by train", "person", "city"),
    ("{e0} reviewed {e1} unfavourably", "person", "book"),
    ("{e0} donated furniture to {e1}", "person", "org"),
    ("{e1} hosted a parade near {e0}", "landmark", "city"),
    ("{e0} borrowed {e1} from a library", "person", "book"),
)


@dataclass(frozen=True)
class SyntheticRelation:
    definition: RelationDefinition
    e0_pool: str
    e1_pool: str
    patterns: tuple[str, ...]
    # Initial generation covers only this many leading patterns; follow-up
    # turns draw from the full list, mirroring feedback-driven coverage gains.
    n_initial_patterns: int = 3
    negdefs: tuple[tuple[str, tuple[str, ...]], ...] = ()

    @property
    def initial_patterns(self) -> tuple[str, ...]:
        return self.patterns[: self.n_initial_patterns]


def build_world() -> dict[str, SyntheticRelation]:
    return {
        "R-EMP": SyntheticRelation(
            definition=RelationDefinition(
                "R-EMP", "<ENT1> was/is the employer of <ENT0> (a person)"
            ),
            e0_pool="person",
            e1_pool="org",
            patterns=(
                "{e0} works for {e1}",
                "{e0} is employed by {e1}",
                "{e1} employs {e0}",
                "{e0} joined the staff of {e1}",
                "{e0} drew a salary from {e1}",
            ),
            negdefs=(
                ("<ENT1> was/is the company founded by <ENT0> (a person)",
                 ("{e0} founded {e1}", "{e1} was founded by {e0}")),
                ("<ENT0> (a person) was/is an investor in <ENT1>",
                 ("{e0} invested heavily in {e1}",)),
                ("<ENT0> (a person) was/is a customer of <ENT1>",
                 ("{e0} shops regularly at {e1}",)),
                ("<ENT1> was/is the company that dismissed <ENT0> (a person)",
                 ("{e1} dismissed {e0} last spring",)),
                ("<ENT0> (a person) was/is a supplier to <ENT1>",
                 ("{e0} supplies timber to {e1}",)),
            ),
        ),
        "R-LOC": SyntheticRelation(
            definition=RelationDefinition(
                "R-LOC", "<ENT1> was/is the city where <ENT0> (a landmark) stands"
            ),
            e0_pool="landmark",
            e1_pool="city",
            patterns=(
                "{e0} is located in {e1}",
                "{e0} stands in the centre of {e1}",
                "{e1} is home to {e0}",
                "visitors reach {e0} through {e1}",
                "{e0} overlooks the rooftops of {e1}",
            ),
            n_initial_patterns=2,
            negdefs=(
                ("<ENT1> was/is the city that demolished <ENT0> (a landmark)",
                 ("{e1} demolished {e0} decades ago",)),
                ("<ENT0> (a landmark) was/is named after <ENT1> (a city)",
                 ("{e0} was named after {e1}",)),
                ("<ENT1> was/is the sister city of the town holding <ENT0>",
                 ("{e1} twinned with the town holding {e0}",)),
                ("<ENT0> (a landmark) was/is a replica of a structure from <ENT1>",
                 ("{e0} replicates a monument from {e1}",)),
                ("<ENT1> was/is the city that auctioned <ENT0> (a landmark)",
                 ("{e1} auctioned {e0} to collectors",)),
            ),
        ),
        "R-AUTH": SyntheticRelation(
            definition=RelationDefinition(
                "R-AUTH", "<ENT1> was/is the author of <ENT0> (a book)"
            ),
            e0_pool="book",
            e1_pool="person",
            patterns=(
                "{e0} was written by {e1}",
                "{e1} wrote {e0}",
                "{e1} is the author of {e0}",
                "{e1} drafted {e0} over two winters",
                "{e0} appeared under {e1}'s name",
            ),
            negdefs=(
                ("<ENT1> was/is the translator of <ENT0> (a book)",
                 ("{e1} translated {e0}",)),
                ("<ENT1> was/is the editor of <ENT0> (a book)",
                 ("{e1} edited {e0}",)),
                ("<ENT1> was/is the illustrator of <ENT0> (a book)",
                 ("{e1} illustrated {e0}",)),
                ("<ENT0> (a book) carries a dedication to <ENT1> (a person)",
                 ("{e0} carries a dedication to {e1}",)),
                ("<ENT1> was/is the critic who reviewed <ENT0> (a book)",
                 ("{e1} reviewed {e0} for the gazette",)),
            ),
        ),
        "R-LEAD": SyntheticRelation(
            definition=RelationDefinition(
                "R-LEAD", "<ENT1> was/is the leader of <ENT0> (an organization)"
            ),
            e0_pool="org",
            e1_pool="person",
            patterns=(
                "{e0} is led by {e1}",
                "{e1} leads {e0}",
                "{e1} chairs {e0}",
                "{e1} heads {e0} as director",
                "{e1} took charge of {e0}",
            ),
            negdefs=(
                ("<ENT1> was/is the spokesperson of <ENT0> (an organization)",
                 ("{e1} speaks for {e0}",)),
                ("<ENT1> was/is the accountant of <ENT0> (an organization)",
                 ("{e1} audits the books of {e0}",)),
                ("<ENT1> was/is the founder of <ENT0> (an organization)",
                 ("{e1} founded {e0}",)),
                ("<ENT1> was/is a client of <ENT0> (an organization)",
                 ("{e1} hired {e0} for a survey",)),
                ("<ENT1> was/is the landlord of <ENT0> (an organization)",
                 ("{e1} rents offices to {e0}",)),
            ),
        ),
    }


def _draw(rng: np.random.Generator, pool: tuple[str, ...]) -> str:
    return pool[int(rng.integers(len(pool)))]


def draw_mention(rng: np.random.Generator, pool_name: str) -> str:
    if pool_name == "person":
        return f"{_draw(rng, FIRST_NAMES)} {_draw(rng, LAST_NAMES)}"
    if pool_name == "org":
        return f"{_draw(rng, ORG_HEADS)} {_draw(rng, ORG_TAILS)}"
    if pool_name == "city":
        return _draw(rng, CITIES)
    if pool_name == "landmark":
        return _draw(rng, LANDMARKS)
    if pool_name == "book":
        return f"{_draw(rng, BOOK_HEADS)} {_draw(rng, BOOK_TAILS)}"
    raise ValueError(f"unknown pool {pool_name}")


_SLOT_SPLIT = re.compile(r"(\{e0\}|\{e1\})")


def realize(pattern: str, e0: str, e1: str, prefix: str, suffix: str):
    """Build (sentence, head span, tail span) from a surface pattern."""
    sentence = prefix
    spans: dict[str, tuple[int, int]] = {}
    for part in _SLOT_SPLIT.split(pattern):
        if part == "{e0}":
            spans["e0"] = (len(sentence), len(sentence) + len(e0))
            sentence += e0
        elif part == "{e1}":
            spans["e1"] = (len(sentence), len(sentence) + len(e1))
            sentence += e1
        else:
            sentence += part
    sentence += suffix
    return sentence, spans["e0"], spans["e1"]


def realize_record(
    rng: np.random.Generator,
    pattern: str,
    e0_pool: str,
    e1_pool: str,
    relation: str | None,
    source: str,
) -> dict:
    e0 = draw_mention(rng, e0_pool)
    e1 = draw_mention(rng, e1_pool)
    prefix = _draw(rng, PREFIXES)
    suffix = _draw(rng, SUFFIXES)
    sentence, (h0, h1), (t0, t1) = realize(pattern, e0, e1, prefix, suffix)
    record = {
        "sentence": sentence,
        "head": {"mention": e0, "start": h0, "end": h1},
        "tail": {"mention": e1, "start": t0, "end": t1},
        "source": source,
    }
    if relation:
        record["relation"] = relation
    return record


def tagged_sentence(rng: np.random.Generator, pattern: str, e0_pool: str, e1_pool: str) -> str:
    e0 = f"<ENT0> {draw_mention(rng, e0_pool)} </ENT0>"
    e1 = f"<ENT1> {draw_mention(rng, e1_pool)} </ENT1>"
    prefix = _draw(rng, PREFIXES)
    suffix = _draw(rng, SUFFIXES)
    return prefix + pattern.format(e0=e0, e1=e1) + suffix


def make_dataset(
    seed: int = 0,
    per_relation: int = 40,
    corpus_size: int = 2000,
    positive_share: float = 0.05,
) -> tuple[dict[str, RelationDefinition], dict[str, list[RelationInstance]], CorpusStore]:
    """Definitions, gold-test instances per relation, and a cleaned corpus."""
    world = build_world()
    rng = np.random.default_rng(seed)
    seen: set[str] = set()

    def unique(producer) -> dict:
        for _ in range(1000):
            record = producer()
            if record["sentence"] not in seen:
                seen.add(record["sentence"])
                return record
        raise RuntimeError("could not generate a unique sentence")

    labeled: dict[str, list[RelationInstance]] = {}
    for rel_id, rel in world.items():
        instances = []
        for _ in range(per_relation):
            record = unique(
                lambda: realize_record(
                    rng,
                    rel.patterns[int(rng.integers(len(rel.patterns)))],
                    rel.e0_pool,
                    rel.e1_pool,
                    rel_id,
                    "gold-test",
                )
            )
            instances.append(
                RelationInstance(
                    sentence=record["sentence"],
                    head=EntitySpan(**record["head"]),
                    tail=EntitySpan(**record["tail"]),
                    source="gold-test",
                    relation_id=rel_id,
                )
            )
        labeled[rel_id] = instances

    corpus_records: list[dict] = []
    per_rel_pos = int(corpus_size * positive_share)
    for rel_id, rel in world.items():
        for _ in range(per_rel_pos):
            corpus_records.append(
                unique(
                    lambda: realize_record(
                        rng,
                        rel.patterns[int(rng.integers(len(rel.patterns)))],
                        rel.e0_pool,
                        rel.e1_pool,
                        None,
                        "corpus",
                    )
                )
            )
    while len(corpus_records) < corpus_size:
        pattern, p0, p1 = DISTRACTOR_PATTERNS[int(rng.integers(len(DISTRACTOR_PATTERNS)))]
        corpus_records.append(
            unique(lambda: realize_record(rng, pattern, p0, p1, None, "corpus"))
        )
    order = rng.permutation(len(corpus_records))
    store = ingest(corpus_records[i] for i in order)

    definitions = {rel_id: rel.definition for rel_id, rel in world.items()}
    return definitions, labeled, store


# --- scripted chat generator --------------------------------------------------

_GEN_RE = re.compile(
    r"generate (\d+) (?:additional |more )?examples \(numbered from 1 to \d+\)",
    re.IGNORECASE,
)
_NEGDEF_RE = re.compile(
    r"generate (\d+) (?:additional )?negative binary relation definitions",
    re.IGNORECASE,
)
_DEF_RES = (
    re.compile(r'defined by:? "(.*?)"', re.DOTALL),
    re.compile(r'pre-defined relation: "(.*?)"', re.DOTALL),
)
_INSTANCE_RES = (
    re.compile(r'Now given an instance: "(.*?)", choose', re.DOTALL),
    re.compile(r"Instance: (.*?)\nQuestion:", re.DOTALL),
)


def _pattern_literal(pattern: str) -> str:
    chunks = [c.strip(" ,.'") for c in _SLOT_SPLIT.split(pattern) if not c.startswith("{")]
    return max(chunks, key=len)


class ScriptedSynthesizer:
    """Deterministic stand-in for the synthesis LLM over the bundled world.

    Knows the world's surface patterns, so generated instances lexically
    resemble corpus instances of the same relation; unknown definitions get a
    generic fallback built from the definition text itself.
    """

    def __init__(self, world: dict[str, SyntheticRelation] | None = None, malform_every: int = 0):
        self.world = world or build_world()
        self.malform_every = malform_every
        self._emitted = 0
        # template -> (e0 pool, e1 pool, initial patterns, follow-up patterns)
        self._by_template: dict[str, tuple[str, str, tuple[str, ...], tuple[str, ...]]] = {}
        self._negdefs_by_template: dict[str, tuple[str, ...]] = {}
        self._literals: dict[str, list[str]] = {}
        for rel in self.world.values():
            self._by_template[rel.definition.template] = (
                rel.e0_pool,
                rel.e1_pool,
                rel.initial_patterns,
                rel.patterns,
            )
            self._literals[rel.definition.template] = [
                _pattern_literal(p) for p in rel.patterns
            ]
            self._negdefs_by_template[rel.definition.template] = tuple(
                t for t, _ in rel.negdefs
            )
            for negdef_template, patterns in rel.negdefs:
                self._by_template[negdef_template] = (
                    rel.e0_pool,
                    rel.e1_pool,
                    patterns,
                    patterns,
                )

    def __call__(self, thread_id: str, messages: list[dict], params) -> str:
        prompt = messages[-1]["content"]
        rng = np.random.default_rng(
            stable_seed(thread_id, *(m["content"] for m in messages))
        )
        if "derive the relation definition" in prompt:
            return self._derive_definition(prompt)
        negdef = _NEGDEF_RE.search(prompt)
        if negdef:
            return self._negdefs(prompt, int(negdef.group(1)))
        gen = _GEN_RE.search(prompt)
        if gen:
            return self._instances(thread_id, messages, prompt, rng, int(gen.group(1)))
        if "choose one option" in prompt:
            return self._baseline_answer(prompt)
        return "1. OK"

    def _find_definition(self, text: str) -> str | None:
        for pattern in _DEF_RES:
            match = pattern.search(text)
            if match:
                return match.group(1)
        return None

    def _lookup(self, messages: list[dict]):
        # The definition appears in the first user turn of the thread; repair
        # turns and follow-ups inherit it from history.
        for message in reversed(messages):
            template = self._find_definition(message["content"])
            if template and template in self._by_template:
                return self._by_template[template]
            if template:
                fallback = template.replace("<ENT0>", "{e0}").replace("<ENT1>", "{e1}")
                generic = (f"it is recorded that {fallback}",)
                return ("person", "org", generic, generic)
        return None

    def _instances(self, thread_id, messages, prompt, rng, n: int) -> str:
        looked_up = self._lookup(messages)
        if looked_up is None:
            generic = ("{e0} relates to {e1}",)
            looked_up = ("person", "org", generic, generic)
        e0_pool, e1_pool, initial_patterns, full_patterns = looked_up
        # Follow-up turns obey the "different and diverse patterns"
        # requirement: they draw from patterns the initial turns did not cover.
        followup = any(
            "additional examples (numbered" in m["content"] for m in messages
        )
        extension = full_patterns[len(initial_patterns):]
        patterns = (extension or full_patterns) if followup else initial_patterns
        lines = []
        for i in range(1, n + 1):
            pattern = patterns[int(rng.integers(len(patterns)))]
            text = tagged_sentence(rng, pattern, e0_pool, e1_pool)
            self._emitted += 1
            if self.malform_every and self._emitted % self.malform_every == 0:
                text = text.replace("</ENT1>", "")
            lines.append(f"{i}. {text}")
        return "\n".join(lines)

    def _negdefs(self, prompt: str, n: int) -> str:
        template = self._find_definition(prompt)
        candidates = self._negdefs_by_template.get(template or "", ())
        if not candidates:
            candidates = tuple(
                f"<ENT1> was/is otherwise associated (variant {chr(97 + i)}) with <ENT0>"
                for i in range(max(n, 1))
            )
        lines = [
            f"{i + 1}. {candidates[i % len(candidates)]}" for i in range(n)
        ]
        return "\n".join(lines)

    def _derive_definition(self, prompt: str) -> str:
        for rel in self.world.values():
            for literal in self._literals[rel.definition.template]:
                if literal in prompt:
                    return rel.definition.template
        return "<ENT1> is related in an unspecified way to <ENT0> (an entity)"

    def _baseline_answer(self, prompt: str) -> str:
        instance_text = None
        for pattern in _INSTANCE_RES:
            match = pattern.search(prompt)
            if match:
                instance_text = match.group(1)
                break
        template = self._find_definition(prompt)
        if instance_text and template in self._literals:
            if any(lit in instance_text for lit in self._literals[template]):
                return "Option 1: Yes"
        return "Option 2: No"
