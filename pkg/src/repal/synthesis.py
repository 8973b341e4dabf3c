"""Parse LLM completions into instances and definitions, and drive the
initial, follow-up positive, and negative generation turns.

Parsing is deterministic and never aborts a batch: each numbered item either
yields an instance or a typed failure reason.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from .core import (
    CoreError,
    RelationDefinition,
    RelationInstance,
    TaggedTextError,
    instance_to_record,
    parse_tagged_text,
    stable_seed,
)
from .corpus import CorpusStore, sample_negatives
from .core import SeedSet
from .llm import ChatClient, ChatParams, DialogueThread
from .prompting import (
    SEED_STYLES,
    UNINFORMATIVE_FEEDBACK,
    render_followup_positive_prompt,
    render_negative_instance_prompt,
    render_negdef_prompt,
    render_seed_prompt,
)

log = logging.getLogger(__name__)

_ORDINAL_RE = re.compile(r"^\s*(\d+)[.)]\s?(.*)$")

FAILURE_REASONS = ("missing-tag", "duplicate-tag", "overlap", "empty-mention", "no-ordinal")

# Repair turn issued when a generation turn under-delivers valid instances.
TOPUP_PROMPT = (
    "Some of the examples were missing or malformed. Generate {n} more examples "
    "(numbered from 1 to {n}) expressing the same relation, in the same tagged "
    "format, each different from all previously generated examples."
)


class SynthesisError(RuntimeError):
    pass


@dataclass
class ParsedItem:
    """One numbered item from a completion: an instance or a failure reason."""

    ordinal: int
    raw: str
    parsed: RelationInstance | None = None
    failure_reason: str | None = None

    def __post_init__(self):
        if (self.parsed is None) == (self.failure_reason is None):
            raise SynthesisError("exactly one of parsed/failure_reason must be set")

    def to_json(self) -> dict:
        return {
            "ordinal": self.ordinal,
            "raw": self.raw,
            "parsed": instance_to_record(self.parsed) if self.parsed else None,
            "failure_reason": self.failure_reason,
        }


@dataclass
class SynthesisRecord:
    """Audit record for one generation turn sequence on one thread."""

    relation_id: str
    iteration: int
    thread_id: str
    prompt_kind: str
    requested: int
    accepted: list[RelationInstance] = field(default_factory=list)
    rejected: list[ParsedItem] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "relation_id": self.relation_id,
            "iteration": self.iteration,
            "thread_id": self.thread_id,
            "prompt_kind": self.prompt_kind,
            "requested": self.requested,
            "accepted": [instance_to_record(i) for i in self.accepted],
            "rejected": [item.to_json() for item in self.rejected],
        }


def parse_numbered_items(completion: str) -> list[tuple[int, str]]:
    """Split a completion into (ordinal, body) items.

    An item starts at a line beginning ``N.`` or ``N)`` and its body runs
    until the next ordinal line or a blank line; preamble and prose between or
    after items is dropped.
    """
    items: list[tuple[int, list[str]]] = []
    open_item = False
    for line in completion.splitlines():
        match = _ORDINAL_RE.match(line)
        if match:
            items.append((int(match.group(1)), [match.group(2)]))
            open_item = True
            continue
        if not line.strip():
            open_item = False
            continue
        if open_item:
            items[-1][1].append(line)
    return [(ordinal, "\n".join(parts).strip()) for ordinal, parts in items]


def parse_instance_item(
    body: str,
    ordinal: int = 0,
    relation_id: str | None = None,
    source: str = "llm-generated",
) -> ParsedItem:
    """Parse one item body into an instance, or record why it failed."""
    try:
        instance = parse_tagged_text(body.strip(), source=source, relation_id=relation_id)
        return ParsedItem(ordinal=ordinal, raw=body, parsed=instance)
    except TaggedTextError as exc:
        return ParsedItem(ordinal=ordinal, raw=body, failure_reason=exc.reason)


def _strip_wrapping_quotes(text: str) -> str:
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1].strip()
    return text


def parse_definition_items(
    completion: str, id_prefix: str
) -> tuple[list[RelationDefinition], list[dict]]:
    """Turn numbered items into negative definitions; log items without both
    placeholders. Raises when nothing parses (the negative branch cannot
    proceed without definitions)."""
    definitions: list[RelationDefinition] = []
    rejects: list[dict] = []
    for ordinal, body in parse_numbered_items(completion):
        text = _strip_wrapping_quotes(body)
        try:
            definitions.append(
                RelationDefinition(
                    id=f"{id_prefix}-{ordinal}",
                    template=text,
                    polarity="negative",
                    origin="llm-generated-negative",
                )
            )
        except CoreError as exc:
            rejects.append({"ordinal": ordinal, "raw": body, "reason": str(exc)})
    if not definitions:
        raise SynthesisError(
            f"no negative definitions parsed ({len(rejects)} items rejected)"
        )
    return definitions, rejects


@dataclass
class SynthesisConfig:
    k_pos: int = 15
    k_neg: int = 15
    chat: ChatParams = field(default_factory=ChatParams)
    top_up_retries: int = 2
    rng_seed: int = 0


def split_across_styles(total: int, n_styles: int = 3) -> list[int]:
    base, extra = divmod(total, n_styles)
    return [base + (1 if i < extra else 0) for i in range(n_styles)]


def _generation_turn(
    client: ChatClient,
    thread: DialogueThread,
    prompt: str,
    want: int,
    config: SynthesisConfig,
    dedup_triples: set,
    relation_id: str,
    record: SynthesisRecord,
) -> list[RelationInstance]:
    """Run one prompt plus bounded repair turns; cap acceptance at ``want``."""
    accepted: list[RelationInstance] = []
    message = prompt
    turns_left = 1 + config.top_up_retries
    while turns_left > 0:
        turns_left -= 1
        completion = client.chat(thread, message, config.chat)
        items = parse_numbered_items(completion)
        if not items:
            record.rejected.append(
                ParsedItem(ordinal=0, raw=completion, failure_reason="no-ordinal")
            )
        for ordinal, body in items:
            item = parse_instance_item(body, ordinal=ordinal, relation_id=relation_id)
            if item.parsed is None:
                record.rejected.append(item)
                continue
            if item.parsed.dedup_triple in dedup_triples:
                continue
            dedup_triples.add(item.parsed.dedup_triple)
            accepted.append(item.parsed)
        shortfall = want - len(accepted)
        if shortfall <= 0:
            break
        if turns_left > 0:
            message = TOPUP_PROMPT.format(n=shortfall)
    if len(accepted) < want:
        log.warning(
            "thread %s delivered %d/%d valid instances after top-ups",
            thread.thread_id,
            len(accepted),
            want,
        )
    final = accepted[:want]
    record.accepted.extend(final)
    return final


def synthesize_initial_seeds(
    definition: RelationDefinition,
    config: SynthesisConfig,
    corpus: CorpusStore,
    client: ChatClient,
    iteration: int = 1,
    dedup_triples: set | None = None,
    records: list[SynthesisRecord] | None = None,
) -> tuple[SeedSet, SeedSet, dict[str, DialogueThread]]:
    """Initial seed construction: three styled threads of positives plus
    corpus-sampled negatives, mirrored by a dev set built from throwaway
    re-prompts and disjoint negative samples."""
    dedup = dedup_triples if dedup_triples is not None else set()
    sink = records if records is not None else []
    counts = split_across_styles(config.k_pos)
    threads: dict[str, DialogueThread] = {}
    train_pos: list[RelationInstance] = []
    dev_pos: list[RelationInstance] = []

    for style, count in zip(SEED_STYLES, counts):
        thread = DialogueThread(f"{definition.id}:{style}", style)
        threads[style] = thread
        if count == 0:
            continue
        prompt = render_seed_prompt(definition, count, style)
        record = SynthesisRecord(
            relation_id=definition.id,
            iteration=iteration,
            thread_id=thread.thread_id,
            prompt_kind=f"initial-pos-{style}",
            requested=count,
        )
        sink.append(record)
        train_pos.extend(
            _generation_turn(client, thread, prompt, count, config, dedup, definition.id, record)
        )

        # Dev mirror: identical prompt on a fresh throwaway thread.
        dev_thread = DialogueThread(f"{definition.id}:{style}:dev:it{iteration}", style)
        dev_record = SynthesisRecord(
            relation_id=definition.id,
            iteration=iteration,
            thread_id=dev_thread.thread_id,
            prompt_kind=f"initial-pos-{style}-dev",
            requested=count,
        )
        sink.append(dev_record)
        dev_pos.extend(
            _generation_turn(
                client, dev_thread, prompt, count, config, dedup, definition.id, dev_record
            )
        )

    neg_seed = stable_seed(config.rng_seed, definition.id, iteration, "train-negatives")
    train_neg = sample_negatives(corpus, config.k_neg, neg_seed)
    dev_neg = sample_negatives(
        corpus,
        config.k_neg,
        stable_seed(config.rng_seed, definition.id, iteration, "dev-negatives"),
        exclude={i.instance_id for i in train_neg},
    )
    train = SeedSet(train_pos, train_neg, (config.k_pos, config.k_neg))
    dev = SeedSet(dev_pos, dev_neg, (config.k_pos, config.k_neg))
    return train, dev, threads


def synthesize_followup_positives(
    threads: dict[str, DialogueThread],
    definition: RelationDefinition,
    feedback_groups: list[list[str]],
    n_total: int,
    client: ChatClient,
    config: SynthesisConfig,
    iteration: int,
    dedup_triples: set,
    records: list[SynthesisRecord] | None = None,
) -> list[RelationInstance]:
    """Follow-up positive generation: each styled thread gets its own feedback
    group and is asked for an equal share of the total.

    Dev mirrors are produced by passing pre-forked throwaway threads here with
    the same feedback groups.
    """
    sink = records if records is not None else []
    groups = list(feedback_groups) + [[]] * (3 - len(feedback_groups))
    counts = split_across_styles(n_total)
    out: list[RelationInstance] = []
    for style, count, group in zip(SEED_STYLES, counts, groups):
        if count == 0:
            continue
        thread = threads[style]
        prompt = render_followup_positive_prompt(
            definition, count, list(group) or [UNINFORMATIVE_FEEDBACK]
        )
        record = SynthesisRecord(
            relation_id=definition.id,
            iteration=iteration,
            thread_id=thread.thread_id,
            prompt_kind="followup-pos",
            requested=count,
        )
        sink.append(record)
        out.extend(
            _generation_turn(client, thread, prompt, count, config, dedup_triples, definition.id, record)
        )
    return out


def synthesize_negatives(
    definition: RelationDefinition,
    feedback: list[str],
    previous_negdefs: list[RelationDefinition],
    n_defs: int,
    n_instances: int,
    client: ChatClient,
    config: SynthesisConfig,
    iteration: int,
    dedup_triples: set | None = None,
    records: list[SynthesisRecord] | None = None,
) -> tuple[list[RelationDefinition], list[RelationInstance]]:
    """Two sub-steps: derive negative definitions from feedback, then generate
    instances for each definition with the medium template, round-robin."""
    dedup = dedup_triples if dedup_triples is not None else set()
    sink = records if records is not None else []
    negdef_thread = DialogueThread(f"{definition.id}:negdef:it{iteration}")
    prompt = render_negdef_prompt(definition, feedback, n_defs, previous_negdefs or None)
    completion = client.chat(negdef_thread, prompt, config.chat)
    negdefs, rejects = parse_definition_items(
        completion, id_prefix=f"{definition.id}-neg-it{iteration}"
    )
    for reject in rejects:
        log.warning("rejected negative definition item: %s", reject)
    negdefs = negdefs[:n_defs]

    base, extra = divmod(n_instances, len(negdefs))
    instances: list[RelationInstance] = []
    for i, negdef in enumerate(negdefs):
        count = base + (1 if i < extra else 0)
        if count == 0:
            continue
        thread = DialogueThread(f"{definition.id}:neg:{negdef.id}")
        record = SynthesisRecord(
            relation_id=definition.id,
            iteration=iteration,
            thread_id=thread.thread_id,
            prompt_kind="neg-instance",
            requested=count,
        )
        sink.append(record)
        instances.extend(
            _generation_turn(
                client,
                thread,
                render_negative_instance_prompt(negdef, count),
                count,
                config,
                dedup,
                negdef.id,
                record,
            )
        )
    return negdefs, instances
