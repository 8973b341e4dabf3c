"""Definition-only zero-shot relation extraction pipeline."""

from .core import (
    EntitySpan,
    LabeledPair,
    RelationDefinition,
    RelationInstance,
    SeedSet,
    canonical_tagged_text,
    parse_tagged_text,
)

__version__ = "0.1.0"

__all__ = [
    "EntitySpan",
    "LabeledPair",
    "RelationDefinition",
    "RelationInstance",
    "SeedSet",
    "canonical_tagged_text",
    "parse_tagged_text",
    "__version__",
]
