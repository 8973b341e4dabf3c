"""Corpus-wide inference with a trained model and probability-banded sampling
of feedback instances for the next synthesis turn."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .classifier import build_nli_pair, score
from .core import (
    RelationDefinition,
    RelationInstance,
    canonical_json,
    canonical_tagged_text,
    sha256_hex,
)
from .corpus import CorpusStore

POSITIVE_BAND = (0.85, 1.0)  # follow-up positive sampling: p > 0.85
NEGDEF_BAND = (0.50, 1.0)  # negative-definition sampling: p > 0.50
FOLLOWUP_GROUPS = 3  # one feedback group per dialogue thread


class FeedbackError(RuntimeError):
    pass


@dataclass
class ScoreTable:
    """Positive probability for every corpus instance under one model."""

    relation_id: str
    iteration: int
    rows: list[tuple[str, float]]
    corpus_fingerprint: str

    def __post_init__(self):
        for instance_id, p in self.rows:
            if not (0.0 < p < 1.0):
                raise FeedbackError(f"p_pos out of (0,1) for {instance_id}: {p}")

    def fingerprint(self) -> str:
        return sha256_hex(
            canonical_json([self.relation_id, self.iteration, self.corpus_fingerprint, self.rows])
        )

    def save(self, rows_path, meta_path) -> None:
        with open(rows_path, "w", encoding="utf-8") as fh:
            for instance_id, p in self.rows:
                fh.write(canonical_json({"instance_id": instance_id, "p_pos": p}) + "\n")
        with open(meta_path, "w", encoding="utf-8") as fh:
            fh.write(
                canonical_json(
                    {
                        "relation_id": self.relation_id,
                        "iteration": self.iteration,
                        "corpus_fingerprint": self.corpus_fingerprint,
                        "rows": len(self.rows),
                    }
                )
            )

    @classmethod
    def load(cls, rows_path, meta_path) -> "ScoreTable":
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        rows = []
        with open(rows_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    row = json.loads(line)
                    rows.append((row["instance_id"], float(row["p_pos"])))
        return cls(
            relation_id=meta["relation_id"],
            iteration=meta["iteration"],
            rows=rows,
            corpus_fingerprint=meta["corpus_fingerprint"],
        )


@dataclass
class FeedbackSample:
    """One sampled feedback group with the scores that qualified it."""

    purpose: str  # followup-positive | negdef
    band: tuple[float, float]
    instances: list[tuple[RelationInstance, float]]
    rng_seed: int

    def __post_init__(self):
        low, high = self.band
        for _, p in self.instances:
            if not (low < p <= high):
                raise FeedbackError(f"score {p} outside band ({low}, {high}]")

    def tagged_texts(self) -> list[str]:
        return [canonical_tagged_text(inst) for inst, _ in self.instances]


def score_corpus(
    model_handle: str,
    definition: RelationDefinition,
    corpus: CorpusStore,
    backend,
    premise_tagging: bool = False,
    iteration: int = 0,
) -> ScoreTable:
    """Score every corpus instance against the definition; all-or-nothing."""
    if not len(corpus):
        raise FeedbackError("empty corpus")
    pairs = [
        build_nli_pair(inst, definition, premise_tagging) for inst in corpus.instances
    ]
    results = score(backend, model_handle, pairs)
    if len(results) != len(pairs):
        raise FeedbackError(
            f"backend returned {len(results)} scores for {len(pairs)} pairs"
        )
    rows = [
        (inst.instance_id, float(res.p_pos))
        for inst, res in zip(corpus.instances, results)
    ]
    return ScoreTable(
        relation_id=definition.id,
        iteration=iteration,
        rows=rows,
        corpus_fingerprint=corpus.fingerprint(),
    )


def sample_feedback(
    table: ScoreTable,
    purpose: str,
    k: int,
    rng_seed: int,
    store: CorpusStore,
    exclude_triples: set | frozenset = frozenset(),
) -> list[FeedbackSample]:
    """Uniform in-band sampling without replacement.

    ``followup-positive`` returns up to three pairwise-disjoint groups of k
    (one per dialogue thread), filled greedily when supply runs short;
    ``negdef`` returns a single group. Empty bands yield empty groups.
    """
    if k < 1:
        raise FeedbackError("k must be >= 1")
    if purpose == "followup-positive":
        band = POSITIVE_BAND
        n_groups = FOLLOWUP_GROUPS
    elif purpose == "negdef":
        band = NEGDEF_BAND
        n_groups = 1
    else:
        raise FeedbackError(f"unknown feedback purpose {purpose!r}")

    low, high = band
    in_band = [
        (instance_id, p)
        for instance_id, p in table.rows
        if low < p <= high and store.get(instance_id).dedup_triple not in exclude_triples
    ]
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(len(in_band))

    samples: list[FeedbackSample] = []
    cursor = 0
    for _ in range(n_groups):
        picks = [in_band[i] for i in order[cursor : cursor + k]]
        cursor += len(picks)
        if not picks:
            break  # short supply yields fewer groups, never empty ones
        samples.append(
            FeedbackSample(
                purpose=purpose,
                band=band,
                instances=[(store.get(instance_id), p) for instance_id, p in picks],
                rng_seed=rng_seed,
            )
        )
    return samples
