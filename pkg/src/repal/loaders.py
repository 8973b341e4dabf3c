"""Convert public relation-extraction dataset formats into interchange records.

Only converters live here; the datasets themselves are not bundled. Both
formats annotate entities as token-index lists over a token sequence; the
converters join tokens with single spaces and derive character offsets.
"""
from __future__ import annotations

import json
from typing import Iterator, Mapping, Sequence


class LoaderError(ValueError):
    pass


def _token_offsets(tokens: Sequence[str]) -> list[int]:
    offsets = []
    pos = 0
    for token in tokens:
        offsets.append(pos)
        pos += len(token) + 1
    return offsets


def _span(tokens: Sequence[str], offsets: Sequence[int], indices: Sequence[int]) -> dict:
    if not indices:
        raise LoaderError("empty token index list for a mention")
    first, last = min(indices), max(indices)
    if last >= len(tokens):
        raise LoaderError(f"token index {last} out of range")
    start = offsets[first]
    end = offsets[last] + len(tokens[last])
    return {
        "mention": " ".join(tokens[first : last + 1]),
        "start": start,
        "end": end,
    }


def fewrel_records(data: Mapping[str, list], source: str = "gold-test") -> Iterator[dict]:
    """Records from the classic few-shot RE json: a map of relation id to
    instances with ``tokens`` and ``h``/``t`` entries ``[name, kb id,
    [[token indices]]]``."""
    for relation in sorted(data):
        for item in data[relation]:
            tokens = item["tokens"]
            offsets = _token_offsets(tokens)
            record = {
                "sentence": " ".join(tokens),
                "head": _span(tokens, offsets, item["h"][2][0]),
                "tail": _span(tokens, offsets, item["t"][2][0]),
                "relation": relation,
                "source": source,
            }
            yield record


def wiki_distant_records(items: Sequence[Mapping], source: str = "corpus") -> Iterator[dict]:
    """Records from distantly supervised Wikipedia dumps: items with
    ``tokens`` and an ``edgeSet`` of ``{"kbID", "left", "right"}`` token-index
    annotations. One record per edge."""
    for item in items:
        tokens = item["tokens"]
        offsets = _token_offsets(tokens)
        for edge in item.get("edgeSet", []):
            yield {
                "sentence": " ".join(tokens),
                "head": _span(tokens, offsets, edge["left"]),
                "tail": _span(tokens, offsets, edge["right"]),
                "relation": edge.get("kbID"),
                "source": source,
            }


def load_records(path: str, fmt: str = "interchange") -> Iterator[dict]:
    """Read raw instance records from ``path`` in the named format."""
    if fmt == "interchange":
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    yield json.loads(line)
    elif fmt == "fewrel":
        with open(path, "r", encoding="utf-8") as fh:
            yield from fewrel_records(json.load(fh))
    elif fmt == "wiki-distant":
        with open(path, "r", encoding="utf-8") as fh:
            head = fh.read(1)
            fh.seek(0)
            if head == "[":
                yield from wiki_distant_records(json.load(fh))
            else:
                items = [json.loads(line) for line in fh if line.strip()]
                yield from wiki_distant_records(items)
    else:
        raise LoaderError(f"unknown format {fmt!r}")
