import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repal.core import (
    CoreError,
    EntitySpan,
    LabeledPair,
    RelationDefinition,
    RelationInstance,
    SeedSet,
    TaggedTextError,
    canonical_json,
    canonical_tagged_text,
    instance_from_record,
    instance_to_record,
    parse_tagged_text,
)


class TestEntitySpan:
    def test_valid(self):
        span = EntitySpan("abc", 2, 5)
        assert span.mention == "abc"

    @pytest.mark.parametrize("args", [("abc", 5, 2), ("abc", -1, 2), ("ab", 0, 3)])
    def test_invalid(self, args):
        with pytest.raises(CoreError):
            EntitySpan(*args)


class TestRelationInstance:
    def test_mention_must_match_slice(self):
        with pytest.raises(CoreError):
            RelationInstance("A b C", EntitySpan("X", 0, 1), EntitySpan("C", 4, 5))

    def test_span_past_end(self):
        with pytest.raises(CoreError):
            RelationInstance("A b", EntitySpan("A", 0, 1), EntitySpan("b C", 2, 5))

    def test_overlap_rejected(self):
        with pytest.raises(CoreError):
            RelationInstance("abcdef", EntitySpan("abc", 0, 3), EntitySpan("cde", 2, 5))

    def test_unknown_source(self):
        with pytest.raises(CoreError):
            RelationInstance(
                "A b C", EntitySpan("A", 0, 1), EntitySpan("C", 4, 5), source="weird"
            )

    def test_content_addressed_id(self, simple_instance):
        again = RelationInstance(
            "A b C", EntitySpan("A", 0, 1), EntitySpan("C", 4, 5), source="llm-generated"
        )
        assert again.instance_id == simple_instance.instance_id
        assert simple_instance.dedup_triple == ("A b C", "A", "C")


class TestRelationDefinition:
    def test_requires_both_placeholders(self):
        with pytest.raises(CoreError):
            RelationDefinition("X", "<ENT0> only here")
        with pytest.raises(CoreError):
            RelationDefinition("X", "nothing to fill")

    def test_repeated_placeholder_allowed(self):
        # e.g. sibling-style definitions restate both entities parenthetically
        RelationDefinition("X", "<ENT1> and <ENT0> share a parent (<ENT1> is kin to <ENT0>)")

    def test_no_terminal_punctuation_required(self):
        RelationDefinition("X", "<ENT1> was/is the location of <ENT0>")

    def test_polarity_and_origin_checked(self):
        with pytest.raises(CoreError):
            RelationDefinition("X", "<ENT0> x <ENT1>", polarity="maybe")
        with pytest.raises(CoreError):
            RelationDefinition("X", "<ENT0> x <ENT1>", origin="dreamt")


def test_labeled_pair_label_domain(simple_instance):
    LabeledPair(simple_instance, 0)
    LabeledPair(simple_instance, 1)
    with pytest.raises(CoreError):
        LabeledPair(simple_instance, 2)


def test_seed_set_rejects_duplicates(simple_instance):
    with pytest.raises(CoreError):
        SeedSet(positives=[simple_instance, simple_instance])


class TestCanonicalTaggedText:
    def test_simple_wrapping(self, simple_instance):
        assert canonical_tagged_text(simple_instance) == "<ENT0> A </ENT0> b <ENT1> C </ENT1>"

    def test_head_at_sentence_end(self):
        inst = RelationInstance("C saw A", EntitySpan("A", 6, 7), EntitySpan("C", 0, 1))
        tagged = canonical_tagged_text(inst)
        assert tagged.endswith("<ENT0> A </ENT0>")
        assert tagged.startswith("<ENT1> C </ENT1>")

    def test_rest_of_sentence_untouched(self):
        inst = RelationInstance(
            "x  y\tz A q C!", EntitySpan("A", 7, 8), EntitySpan("C", 11, 12)
        )
        tagged = canonical_tagged_text(inst)
        assert tagged == "x  y\tz <ENT0> A </ENT0> q <ENT1> C </ENT1>!"


class TestParseTaggedText:
    def test_paper_style_no_inner_spaces(self):
        text = (
            "During the exercise, <ENT0>the 3rd Battalion</ENT0> served under "
            "<ENT1>the Northern Command</ENT1>, with distinction."
        )
        inst = parse_tagged_text(text)
        assert inst.head.mention == "the 3rd Battalion"
        assert inst.tail.mention == "the Northern Command"
        assert "<ENT" not in inst.sentence
        assert inst.sentence.startswith("During the exercise, the 3rd Battalion served")

    def test_accepts_escaped_closing_tags(self):
        inst = parse_tagged_text("<ENT0>A<\\/ENT0> b <ENT1>C<\\/ENT1>")
        assert inst.head.mention == "A"
        assert inst.tail.mention == "C"

    def test_missing_tag(self):
        with pytest.raises(TaggedTextError) as exc:
            parse_tagged_text("<ENT0> A </ENT0> b C")
        assert exc.value.reason == "missing-tag"

    def test_duplicate_tag(self):
        with pytest.raises(TaggedTextError) as exc:
            parse_tagged_text("<ENT0>A</ENT0> and <ENT0>B</ENT0> plus <ENT1>C</ENT1>")
        assert exc.value.reason == "duplicate-tag"

    def test_nested_regions_overlap(self):
        with pytest.raises(TaggedTextError) as exc:
            parse_tagged_text("<ENT0> a <ENT1> b </ENT1> c </ENT0>")
        assert exc.value.reason == "overlap"

    def test_empty_mention(self):
        with pytest.raises(TaggedTextError) as exc:
            parse_tagged_text("<ENT0>  </ENT0> b <ENT1>C</ENT1>")
        assert exc.value.reason == "empty-mention"


_WORDS = st.text(
    alphabet=st.characters(blacklist_characters="<>{}\\", blacklist_categories=("Cs", "Cc")),
    min_size=1,
    max_size=8,
).filter(lambda s: s.strip() == s and s.strip())


@settings(max_examples=200, deadline=None)
@given(
    head=_WORDS,
    tail=_WORDS,
    before=_WORDS,
    middle=_WORDS,
    after=_WORDS,
    head_first=st.booleans(),
)
def test_roundtrip_property(head, tail, before, middle, after, head_first):
    first, second = (head, tail) if head_first else (tail, head)
    sentence = f"{before} {first} {middle} {second} {after}"
    start1 = len(before) + 1
    start2 = start1 + len(first) + 1 + len(middle) + 1
    head_start = start1 if head_first else start2
    tail_start = start2 if head_first else start1
    head_span = EntitySpan(head, head_start, head_start + len(head))
    tail_span = EntitySpan(tail, tail_start, tail_start + len(tail))
    instance = RelationInstance(
        sentence, head_span, tail_span, source="llm-generated", relation_id="R"
    )
    assert parse_tagged_text(canonical_tagged_text(instance), relation_id="R") == instance


def test_serialization_byte_stable(simple_instance, tmp_path):
    record = instance_to_record(simple_instance)
    assert canonical_json(record) == canonical_json(instance_to_record(simple_instance))
    assert instance_from_record(json.loads(canonical_json(record))) == simple_instance


def test_instance_record_roundtrip(simple_instance):
    record = instance_to_record(simple_instance)
    assert record["head"] == {"mention": "A", "start": 0, "end": 1}
    assert instance_from_record(record) == simple_instance


def test_malformed_record_raises():
    with pytest.raises(CoreError):
        instance_from_record({"sentence": "x"})
