"""Definition-only zero-shot evaluation: per-relation binary metrics averaged
across test relations, plus the random-guess and LLM inference baselines.

Each test relation is evaluated in turn as the gold positive class with every
other relation's instances as gold negatives.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

import numpy as np

from .corpus import EvalGroup
from .core import RelationDefinition, RelationInstance, stable_seed
from .llm import ChatClient, ChatParams, DialogueThread
from .prompting import render_baseline_prompt

log = logging.getLogger(__name__)


class EvaluationError(RuntimeError):
    pass


class MissingPredictionsError(EvaluationError):
    def __init__(self, missing: list[str]):
        preview = ", ".join(missing[:5])
        super().__init__(f"{len(missing)} instances lack predictions (e.g. {preview})")
        self.missing = missing


@dataclass(frozen=True)
class BinaryMetrics:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int) -> "BinaryMetrics":
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return cls(tp=tp, fp=fp, fn=fn, tn=tn, precision=precision, recall=recall, f1=f1)

    def to_json(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


@dataclass
class ProtocolReport:
    """Per-relation metrics plus unweighted averages across relations."""

    per_relation: dict[str, BinaryMetrics]
    precision: float
    recall: float
    f1: float
    judged_pairs: int
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "per_relation": {rel: m.to_json() for rel, m in self.per_relation.items()},
            "averages": {"precision": self.precision, "recall": self.recall, "f1": self.f1},
            "judged_pairs": self.judged_pairs,
            "metadata": self.metadata,
        }


def _resolve_prediction(value, threshold: float | None) -> bool:
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if threshold is None:
        raise EvaluationError("probability predictions require a threshold")
    return float(value) > threshold


def evaluate_target_relation(
    predictions: dict[str, float | bool],
    target: str,
    group: EvalGroup,
    threshold: float | None = 0.5,
) -> BinaryMetrics:
    """Binary metrics for one target relation over every group instance.

    ``predictions`` maps instance id to a boolean decision or a positive
    probability (cut at ``threshold``).
    """
    if target not in group.relations:
        raise EvaluationError(f"{target} is not in the group")
    missing = [
        inst.instance_id
        for inst in group.all_instances()
        if inst.instance_id not in predictions
    ]
    if missing:
        raise MissingPredictionsError(missing)
    tp = fp = fn = tn = 0
    for inst in group.all_instances():
        predicted = _resolve_prediction(predictions[inst.instance_id], threshold)
        gold = inst.relation_id == target
        if predicted and gold:
            tp += 1
        elif predicted and not gold:
            fp += 1
        elif not predicted and gold:
            fn += 1
        else:
            tn += 1
    return BinaryMetrics.from_counts(tp, fp, fn, tn)


def aggregate_report(
    per_relation: dict[str, BinaryMetrics], judged_pairs: int = 0, metadata: dict | None = None
) -> ProtocolReport:
    """Unweighted arithmetic means across relations."""
    if not per_relation:
        raise EvaluationError("no per-relation metrics to aggregate")
    n = len(per_relation)
    return ProtocolReport(
        per_relation=dict(per_relation),
        precision=sum(m.precision for m in per_relation.values()) / n,
        recall=sum(m.recall for m in per_relation.values()) / n,
        f1=sum(m.f1 for m in per_relation.values()) / n,
        judged_pairs=judged_pairs,
        metadata=metadata or {},
    )


def run_protocol(
    group: EvalGroup,
    predictions_by_target: dict[str, dict[str, float | bool]],
    threshold: float | None = 0.5,
    metadata: dict | None = None,
) -> ProtocolReport:
    per_relation = {}
    judged = 0
    for target in group.relations:
        if target not in predictions_by_target:
            raise EvaluationError(f"no predictions for target {target}")
        per_relation[target] = evaluate_target_relation(
            predictions_by_target[target], target, group, threshold
        )
        judged += len(group.all_instances())
    return aggregate_report(per_relation, judged_pairs=judged, metadata=metadata)


def random_guess_baseline(group: EvalGroup, rng_seed: int) -> ProtocolReport:
    """Predict positive with probability 0.5 independently per judged pair."""
    rng = np.random.default_rng(rng_seed)
    predictions_by_target = {}
    for target in group.relations:
        draws = rng.random(len(group.all_instances())) < 0.5
        predictions_by_target[target] = {
            inst.instance_id: bool(draw)
            for inst, draw in zip(group.all_instances(), draws)
        }
    return run_protocol(
        group, predictions_by_target, threshold=None, metadata={"baseline": "random-guess"}
    )


def monte_carlo_random_guess(
    group: EvalGroup, n_trials: int, rng_seed: int
) -> dict:
    """Mean and standard deviation of the random-guess protocol over trials."""
    instances = group.all_instances()
    gold = {
        target: np.array([inst.relation_id == target for inst in instances])
        for target in group.relations
    }
    rng = np.random.default_rng(rng_seed)
    precisions, recalls, f1s = [], [], []
    for _ in range(n_trials):
        per_relation = {}
        draws = rng.random((len(group.relations), len(instances))) < 0.5
        for row, target in zip(draws, group.relations):
            g = gold[target]
            tp = int(np.sum(row & g))
            fp = int(np.sum(row & ~g))
            fn = int(np.sum(~row & g))
            tn = int(np.sum(~row & ~g))
            per_relation[target] = BinaryMetrics.from_counts(tp, fp, fn, tn)
        report = aggregate_report(per_relation)
        precisions.append(report.precision)
        recalls.append(report.recall)
        f1s.append(report.f1)
    return {
        "trials": n_trials,
        "precision_mean": float(np.mean(precisions)),
        "precision_sd": float(np.std(precisions)),
        "recall_mean": float(np.mean(recalls)),
        "recall_sd": float(np.std(recalls)),
        "f1_mean": float(np.mean(f1s)),
        "f1_sd": float(np.std(f1s)),
    }


_YES_RE = re.compile(r"option\s*1|\byes\b", re.IGNORECASE)
_NO_RE = re.compile(r"option\s*2|\bno\b", re.IGNORECASE)


def normalize_answer(reply: str) -> bool | None:
    """Map a free-text reply to a binary decision; None when ambiguous.

    The earliest yes/no marker wins; ambiguity is the caller's cue to count
    the reply as negative and log it.
    """
    yes = _YES_RE.search(reply)
    no = _NO_RE.search(reply)
    if yes and no:
        return yes.start() < no.start()
    if yes:
        return True
    if no:
        return False
    return None


def llm_binary_baseline(
    group: EvalGroup,
    definitions: dict[str, RelationDefinition],
    client: ChatClient,
    mode: str = "binary-choice",
    params: ChatParams | None = None,
    per_relation_downsample: int | None = 30,
    icl_exemplars: dict[str, list[tuple[RelationInstance, bool]]] | None = None,
    rng_seed: int = 0,
) -> ProtocolReport:
    """Query the LLM per (instance, target definition) and apply the protocol.

    Inference always runs at temperature 0. Down-sampling is seeded and the
    judged instance ids are recorded in the report metadata so reruns judge
    identical subsets.
    """
    if mode not in ("binary-choice", "qa-binary"):
        raise EvaluationError(f"unsupported baseline mode {mode!r}")
    params = (params or ChatParams()).for_baseline()

    instances = group.all_instances()
    if per_relation_downsample is not None:
        sampled: list[RelationInstance] = []
        for rel in group.relations:
            pool = group.instances_by_relation[rel]
            take = min(per_relation_downsample, len(pool))
            rng = np.random.default_rng(stable_seed(rng_seed, rel, "baseline-downsample"))
            picks = sorted(rng.choice(len(pool), size=take, replace=False))
            sampled.extend(pool[i] for i in picks)
        instances = sampled

    subgroup = EvalGroup(
        relations=list(group.relations),
        instances_by_relation={
            rel: [i for i in instances if i.relation_id == rel] for rel in group.relations
        },
        group_seed=group.group_seed,
    )

    unparseable = 0
    predictions_by_target: dict[str, dict[str, bool]] = {}
    for target in group.relations:
        definition = definitions[target]
        exemplars = (icl_exemplars or {}).get(target)
        predictions: dict[str, bool] = {}
        for inst in subgroup.all_instances():
            prompt = render_baseline_prompt(mode, definition, inst, exemplars)
            thread = DialogueThread(f"baseline:{mode}:{target}:{inst.instance_id}")
            reply = client.chat(thread, prompt, params)
            decision = normalize_answer(reply)
            if decision is None:
                unparseable += 1
                log.warning("unparseable baseline reply for %s: %r", inst.instance_id, reply[:80])
                decision = False
            predictions[inst.instance_id] = decision
        predictions_by_target[target] = predictions
    judged_ids = {"all_targets": [i.instance_id for i in subgroup.all_instances()]}

    report = run_protocol(subgroup, predictions_by_target, threshold=None)
    report.metadata.update(
        {
            "baseline": mode,
            "per_relation_downsample": per_relation_downsample,
            "rng_seed": rng_seed,
            "judged_instance_ids": judged_ids,
            "unparseable_replies": unparseable,
        }
    )
    return report
