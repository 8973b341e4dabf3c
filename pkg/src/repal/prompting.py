"""Prompt rendering for seed generation, refinement, derivation, and baselines.

Templates live as text assets under ``repal/templates`` with ``{slot}``
markers; rendering fills every marker and refuses to emit text with an
unresolved slot.
"""
from __future__ import annotations

import re
import string
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from .core import ENT0_OPEN, ENT1_OPEN, RelationDefinition, RelationInstance, canonical_tagged_text

PROMPT_KINDS = (
    "initial-pos-brief",
    "initial-pos-medium",
    "initial-pos-implicit",
    "followup-pos",
    "negdef-first",
    "negdef-subsequent",
    "neg-instance",
    "def-derivation",
    "baseline-binary",
    "baseline-qa-binary",
    "baseline-qa-multi",
)

# Negative-instance generation reuses the medium seed template.
_TEMPLATE_FILES = {
    "initial-pos-brief": "initial_pos_brief.txt",
    "initial-pos-medium": "initial_pos_medium.txt",
    "initial-pos-implicit": "initial_pos_implicit.txt",
    "followup-pos": "followup_pos.txt",
    "negdef-first": "negdef_first.txt",
    "negdef-subsequent": "negdef_subsequent.txt",
    "neg-instance": "initial_pos_medium.txt",
    "def-derivation": "def_derivation.txt",
    "baseline-binary": "baseline_binary.txt",
    "baseline-qa-binary": "baseline_qa_binary.txt",
    "baseline-qa-multi": "baseline_qa_multi.txt",
}

_SLOT_RE = re.compile(r"\{([a-z_]+)\}")

# Emitted as the feedback block when corpus inference produced nothing above
# threshold; the follow-up template's requirement 3 handles this case.
UNINFORMATIVE_FEEDBACK = "(no sampled predictions available)"

# Fixed demonstration definitions for few-shot definition derivation.
DERIVATION_DEMO_DEFINITIONS = (
    "<ENT1> is the league in which <ENT0> (team or player) plays or has played in.",
    "<ENT1> is the organization or person responsible for publishing <ENT0> "
    "(books, periodicals, printed music, podcasts, games or software).",
    "<ENT1> is the city, where <ENT0> (an organization)'s headquarters is or has "
    "been situated.",
)

SEED_STYLES = ("brief", "medium", "implicit")


class PromptError(ValueError):
    pass


class EmptyFeedbackError(PromptError):
    pass


@lru_cache(maxsize=None)
def load_template(kind: str) -> str:
    if kind not in _TEMPLATE_FILES:
        raise PromptError(f"unknown prompt kind {kind!r}")
    text = (
        resources.files("repal.templates")
        .joinpath(_TEMPLATE_FILES[kind])
        .read_text(encoding="utf-8")
    )
    return text.removesuffix("\n")


def fill(template: str, slots: dict[str, str]) -> str:
    """Replace every {slot} marker; unresolved or unknown slots are errors."""
    needed = set(_SLOT_RE.findall(template))
    missing = needed - set(slots)
    if missing:
        raise PromptError(f"missing slots: {sorted(missing)}")
    out = _SLOT_RE.sub(lambda m: slots[m.group(1)], template)
    leftover = [m for m in _SLOT_RE.findall(out) if m in slots or m in needed]
    if leftover:
        raise PromptError(f"unresolved slot markers: {leftover}")
    return out


@dataclass(frozen=True)
class PromptRequest:
    """A named template plus the slot values to fill it with."""

    kind: str
    slots: dict

    def render(self) -> str:
        return fill(load_template(self.kind), {k: str(v) for k, v in self.slots.items()})


def numbered_block(texts: list[str], sep: str = "\n") -> str:
    """Render texts as a '1. ...' numbered block.

    A lone uninformative-feedback placeholder is passed through unnumbered.
    """
    if list(texts) == [UNINFORMATIVE_FEEDBACK]:
        return UNINFORMATIVE_FEEDBACK
    return sep.join(f"{i}. {t}" for i, t in enumerate(texts, start=1))


def substitute_definition(
    definition: RelationDefinition, head_mention: str, tail_mention: str
) -> str:
    """Fill every entity placeholder occurrence in a single pass.

    Mentions are inserted verbatim; placeholder-looking text inside a mention
    is never re-substituted.
    """
    template = definition.template
    slots = []
    for token, mention in ((ENT0_OPEN, head_mention), (ENT1_OPEN, tail_mention)):
        start = 0
        while (idx := template.find(token, start)) != -1:
            slots.append((idx, token, mention))
            start = idx + len(token)
    slots.sort()
    out = []
    pos = 0
    for idx, token, mention in slots:
        out.append(template[pos:idx])
        out.append(mention)
        pos = idx + len(token)
    out.append(template[pos:])
    return "".join(out)


def render_seed_prompt(definition: RelationDefinition, n: int, style: str) -> str:
    """Initial positive instance generation prompt (brief / medium / implicit)."""
    if style not in SEED_STYLES:
        raise PromptError(f"unknown seed style {style!r}")
    if n < 1:
        raise PromptError("n must be >= 1")
    return PromptRequest(
        f"initial-pos-{style}",
        {"relation_definition": definition.template, "number_of_examples": n},
    ).render()


def render_negative_instance_prompt(definition: RelationDefinition, n: int) -> str:
    """Instance generation for a negative definition (medium template reuse)."""
    if n < 1:
        raise PromptError("n must be >= 1")
    return PromptRequest(
        "neg-instance",
        {"relation_definition": definition.template, "number_of_examples": n},
    ).render()


def render_followup_positive_prompt(
    definition: RelationDefinition, n: int, feedback: list[str]
) -> str:
    """Follow-up positive generation prompt fed with sampled model predictions."""
    if not feedback:
        raise EmptyFeedbackError(
            "feedback must be non-empty; pass [UNINFORMATIVE_FEEDBACK] when the "
            "sampler returned nothing"
        )
    return PromptRequest(
        "followup-pos",
        {
            "feedback_examples": numbered_block(feedback),
            "number_of_examples": n,
            "relation_definition": definition.template,
        },
    ).render()


def render_negdef_prompt(
    definition: RelationDefinition,
    feedback: list[str],
    n_neg_rels: int,
    previous_negdefs: list[RelationDefinition] | None = None,
) -> str:
    """Negative relation definition generation prompt.

    The first-iteration form is used unless previously generated negative
    definitions are supplied, in which case they are listed and the follow-up
    form is used.
    """
    if n_neg_rels < 1:
        raise PromptError("n_neg_rels must be >= 1")
    block = numbered_block(feedback) if feedback else UNINFORMATIVE_FEEDBACK
    if not previous_negdefs:
        return PromptRequest(
            "negdef-first",
            {
                "positive_relation_definition": definition.template,
                "feedback_examples": block,
                "number_of_negative_relations": n_neg_rels,
            },
        ).render()
    return PromptRequest(
        "negdef-subsequent",
        {
            "positive_relation_definition": definition.template,
            "feedback_examples": block,
            "previously_generated_negative_relation_definitions": numbered_block(
                [d.template for d in previous_negdefs]
            ),
            "number_of_negative_relations": n_neg_rels,
        },
    ).render()


def render_definition_derivation_prompt(
    fewshot: list[str],
    icl_demo_definitions: tuple[str, ...] = DERIVATION_DEMO_DEFINITIONS,
) -> str:
    """Few-shot definition derivation prompt with fixed demonstration definitions."""
    if not fewshot:
        raise PromptError("fewshot instances must be non-empty")
    return PromptRequest(
        "def-derivation",
        {
            "example_definitions": numbered_block(list(icl_demo_definitions), sep="\n\n"),
            "fewshot_instances": numbered_block(list(fewshot), sep="\n\n"),
        },
    ).render()


def _qa_binary_exemplar(
    definition: RelationDefinition, instance: RelationInstance, positive: bool
) -> str:
    statement = substitute_definition(
        definition, instance.head.mention, instance.tail.mention
    )
    return (
        f"Instance: {canonical_tagged_text(instance)}\n"
        f"Question: is the following statement true based on the instance: {statement}\n"
        f"Answer: {'Yes' if positive else 'No'}\n\n"
    )


def render_baseline_prompt(
    kind: str,
    definitions,
    instance: RelationInstance,
    icl_exemplars: list[tuple[RelationInstance, bool]] | None = None,
) -> str:
    """Render an inference prompt for the LLM baselines.

    ``definitions`` is a single definition for the binary kinds and an ordered
    list for ``qa-multi``. Exemplars, when given, precede the query instance.
    """
    tagged = lambda inst: canonical_tagged_text(inst)  # noqa: E731
    if kind == "binary-choice":
        body = PromptRequest(
            "baseline-binary",
            {
                "relation_definition": definitions.template,
                "instance_sentence_with_entities_enclosed_by_tags": tagged(instance),
            },
        ).render()
        if icl_exemplars:
            demos = "".join(
                f'Example instance: "{tagged(ex)}"\nAnswer: '
                f"{'Option 1: Yes' if positive else 'Option 2: No'}\n\n"
                for ex, positive in icl_exemplars
            )
            return demos + body
        return body
    if kind == "qa-binary":
        icl_block = "".join(
            _qa_binary_exemplar(definitions, ex, positive)
            for ex, positive in (icl_exemplars or [])
        )
        return PromptRequest(
            "baseline-qa-binary",
            {
                "relation_definition": definitions.template,
                "icl_block": icl_block,
                "instance_sentence_with_entities_enclosed_by_tags": tagged(instance),
                "relation_definition_filled_with_instance_entities": substitute_definition(
                    definitions, instance.head.mention, instance.tail.mention
                ),
            },
        ).render()
    if kind == "qa-multi":
        defs = list(definitions)
        if len(defs) < 2:
            raise PromptError("qa-multi requires at least 2 definitions")
        if len(defs) > len(string.ascii_uppercase):
            raise PromptError(
                f"qa-multi supports at most 26 definitions, got {len(defs)}"
            )
        letters = string.ascii_uppercase[: len(defs)]
        options = "\n".join(
            f"{letter}. {substitute_definition(d, instance.head.mention, instance.tail.mention)}"
            for letter, d in zip(letters, defs)
        )
        return PromptRequest(
            "baseline-qa-multi",
            {
                "instance_sentence": instance.sentence,
                "options_block": options,
                "last_letter": letters[-1],
            },
        ).render()
    raise PromptError(f"unknown baseline kind {kind!r}")
