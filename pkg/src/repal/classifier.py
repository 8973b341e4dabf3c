"""Entailment-style binary classification: pair construction, probability and
loss math, the train/score backend contract, and two backends — an in-process
reference model (sparse linear over lexical features) and a client for the
out-of-process fine-tuning worker.
"""
from __future__ import annotations

import json
import math
import os
import re
import subprocess
from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import (
    LabeledPair,
    RelationDefinition,
    RelationInstance,
    canonical_json,
    canonical_tagged_text,
    sha256_hex,
)
from .prompting import substitute_definition

PLACEHOLDER_TOKENS = ("<ENT0>", "<ENT1>")

_TOKEN_RE = re.compile(r"[a-z0-9']+")

# Function words carry no relation signal but dominate token counts; dropping
# them keeps the linear reference model from riding on article frequencies.
_STOPWORDS = frozenset(
    "a an and are as at be by for from had has have his her in is it its of on "
    "or that the their this to was were which with".split()
)


class ClassifierError(RuntimeError):
    pass


class InvalidSpecError(ClassifierError):
    pass


class DivergedError(ClassifierError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


class UnknownHandleError(ClassifierError):
    pass


@dataclass(frozen=True)
class NliPair:
    """Premise (raw sentence) / hypothesis (substituted definition) pair."""

    premise: str
    hypothesis: str
    pair_id: str

    def __post_init__(self):
        for token in PLACEHOLDER_TOKENS:
            if token in self.hypothesis:
                raise ClassifierError(f"hypothesis still contains {token}")


@dataclass(frozen=True)
class ScoreResult:
    """Three entailment-class logits and the derived positive probability."""

    pair_id: str
    logits: tuple[float, float, float]  # (z_entail, z_neutral, z_contra)
    p_pos: float

    def __post_init__(self):
        expected = entailment_probability(self.logits)
        if abs(self.p_pos - expected) > 1e-9:
            raise ClassifierError(
                f"p_pos {self.p_pos} inconsistent with logits (expected {expected})"
            )


def build_nli_pair(
    instance: RelationInstance,
    definition: RelationDefinition,
    premise_tagging: bool = False,
) -> NliPair:
    """Pair an instance with a definition; the premise is untagged by default."""
    premise = canonical_tagged_text(instance) if premise_tagging else instance.sentence
    hypothesis = substitute_definition(
        definition, instance.head.mention, instance.tail.mention
    )
    return NliPair(
        premise=premise,
        hypothesis=hypothesis,
        pair_id=f"{instance.instance_id}:{definition.id}",
    )


def softmax3(logits) -> tuple[float, float, float]:
    z = [float(v) for v in logits]
    if len(z) != 3 or not all(math.isfinite(v) for v in z):
        raise ClassifierError(f"logits must be 3 finite reals, got {logits!r}")
    m = max(z)
    exps = [math.exp(v - m) for v in z]
    total = sum(exps)
    return tuple(e / total for e in exps)


# Saturated logit gaps round the softmax component to exactly 0.0 or 1.0 in
# float64; probabilities are nudged inside the open interval so downstream
# banded sampling can rely on p in (0, 1).
_P_CLAMP = 1e-12


def entailment_probability(logits) -> float:
    """Normalized entailment component of the 3-way softmax (first logit)."""
    p = softmax3(logits)[0]
    return min(max(p, _P_CLAMP), 1.0 - _P_CLAMP)


def bce_loss(p: list[float], y: list[int], eps: float = kernels.EPS) -> float:
    """Mean binary cross entropy with probabilities clamped to [eps, 1-eps]."""
    if len(p) != len(y):
        raise ClassifierError(f"length mismatch: {len(p)} probabilities, {len(y)} labels")
    if not p:
        raise ClassifierError("empty batch")
    total = 0.0
    for pi, yi in zip(p, y):
        pc = min(max(float(pi), eps), 1.0 - eps)
        total += -(yi * math.log(pc) + (1 - yi) * math.log(1.0 - pc))
    return total / len(p)


@dataclass
class TrainSpec:
    """One training job: labeled instances, the target definition, and knobs."""

    train: list[LabeledPair]
    dev: list[LabeledPair]
    definition: RelationDefinition
    epochs: int = 12
    learning_rate: float = 3e-5
    batch_size: int = 64
    rng_seed: int = 0
    checkpoint_metric: str = "dev_f1"  # or dev_loss
    premise_tagging: bool = False
    decision_threshold: float = 0.5

    def validate(self) -> None:
        if not self.train or not self.dev:
            raise InvalidSpecError("train and dev must be non-empty")
        if self.epochs < 1:
            raise InvalidSpecError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise InvalidSpecError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise InvalidSpecError("batch_size must be >= 1")
        if self.checkpoint_metric not in ("dev_f1", "dev_loss"):
            raise InvalidSpecError(f"unknown checkpoint metric {self.checkpoint_metric}")


@dataclass
class TrainReport:
    """Per-epoch losses/metrics and the selected checkpoint."""

    epochs: list[dict]
    selected_epoch: int
    model_handle: str
    checkpoint_metric: str = "dev_f1"

    def to_json(self) -> dict:
        return {
            "epochs": self.epochs,
            "selected_epoch": self.selected_epoch,
            "model_handle": self.model_handle,
            "checkpoint_metric": self.checkpoint_metric,
        }


def train(backend, spec: TrainSpec) -> TrainReport:
    spec.validate()
    return backend.train(spec)


def score(backend, model_handle: str, pairs: list[NliPair]) -> list[ScoreResult]:
    return backend.score(model_handle, pairs)


def binary_f1(predictions: list[bool], labels: list[int]) -> float:
    tp = sum(1 for p, y in zip(predictions, labels) if p and y == 1)
    fp = sum(1 for p, y in zip(predictions, labels) if p and y == 0)
    fn = sum(1 for p, y in zip(predictions, labels) if not p and y == 1)
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


# --- reference backend -------------------------------------------------------


def pair_features(pair: NliPair) -> list[str]:
    tokens = []
    for prefix, text in (("p:", pair.premise), ("h:", pair.hypothesis)):
        tokens.extend(
            prefix + t
            for t in _TOKEN_RE.findall(text.lower())
            if t not in _STOPWORDS
        )
    return tokens


def _build_csr(pairs: list[NliPair], vocab: dict[str, int]):
    indptr = [0]
    indices: list[int] = []
    counts: list[float] = []
    for pair in pairs:
        row: dict[int, float] = {}
        for feature in pair_features(pair):
            idx = vocab.get(feature)
            if idx is not None:
                row[idx] = row.get(idx, 0.0) + 1.0
        for idx in sorted(row):
            indices.append(idx)
            counts.append(row[idx])
        indptr.append(len(indices))
    return (
        np.asarray(indptr, dtype=np.int64),
        np.asarray(indices, dtype=np.int64),
        np.asarray(counts, dtype=np.float64),
    )


@dataclass
class _RefModel:
    weights: np.ndarray  # (vocab, 3): entail, neutral, contra
    bias: np.ndarray  # (3,)
    vocab: dict[str, int]
    decision_threshold: float


class ReferenceBackend:
    """Trainable linear model over sparse premise+hypothesis lexical features.

    Mini-batch gradient descent on the entailment-softmax BCE; deterministic
    for a fixed seed. Models are kept in memory and optionally persisted under
    ``store_dir`` so a resumed run can rescore without retraining.
    """

    def __init__(self, store_dir=None):
        self.store_dir = store_dir
        self._models: dict[str, _RefModel] = {}

    def untrained_handle(self, decision_threshold: float = 0.5) -> str:
        model = _RefModel(
            weights=np.zeros((0, 3)),
            bias=np.zeros(3),
            vocab={},
            decision_threshold=decision_threshold,
        )
        return self._register(model)

    def train(self, spec: TrainSpec) -> TrainReport:
        spec.validate()
        train_pairs = [
            build_nli_pair(lp.instance, spec.definition, spec.premise_tagging)
            for lp in spec.train
        ]
        dev_pairs = [
            build_nli_pair(lp.instance, spec.definition, spec.premise_tagging)
            for lp in spec.dev
        ]
        y_train = np.asarray([lp.label for lp in spec.train], dtype=np.float64)
        dev_labels = [lp.label for lp in spec.dev]

        vocab: dict[str, int] = {}
        for pair in train_pairs:
            for feature in pair_features(pair):
                if feature not in vocab:
                    vocab[feature] = len(vocab)

        indptr, indices, counts = _build_csr(train_pairs, vocab)
        dev_csr = _build_csr(dev_pairs, vocab)

        weights = np.zeros((len(vocab), 3))
        bias = np.zeros(3)
        rng = np.random.default_rng(spec.rng_seed)
        n = len(train_pairs)

        history: list[dict] = []
        best_value: float | None = None
        best_epoch = 0
        best_state: tuple[np.ndarray, np.ndarray] | None = None

        for epoch in range(1, spec.epochs + 1):
            perm = rng.permutation(n)
            epoch_loss = 0.0
            for start in range(0, n, spec.batch_size):
                rows = perm[start : start + spec.batch_size]
                b_indptr, b_indices, b_counts = _slice_csr(indptr, indices, counts, rows)
                loss, dw, db = kernels.loss_and_grad(
                    b_indptr, b_indices, b_counts, y_train[rows], weights, bias
                )
                if not math.isfinite(loss):
                    raise DivergedError(epoch)
                weights -= spec.learning_rate * dw
                bias -= spec.learning_rate * db
                epoch_loss += loss * len(rows)
            train_loss = epoch_loss / n

            dev_logits = kernels.forward(*dev_csr, weights, bias)
            dev_p = kernels.softmax_rows(dev_logits)[:, 0]
            if spec.checkpoint_metric == "dev_f1":
                value = binary_f1(list(dev_p > spec.decision_threshold), dev_labels)
                better = best_value is None or value > best_value
            else:
                value = bce_loss(list(dev_p), dev_labels)
                better = best_value is None or value < best_value
            history.append(
                {"epoch": epoch, "train_loss": train_loss, spec.checkpoint_metric: value}
            )
            if better:  # ties keep the earliest epoch
                best_value = value
                best_epoch = epoch
                best_state = (weights.copy(), bias.copy())

        model = _RefModel(
            weights=best_state[0],
            bias=best_state[1],
            vocab=vocab,
            decision_threshold=spec.decision_threshold,
        )
        handle = self._register(model)
        return TrainReport(
            epochs=history,
            selected_epoch=best_epoch,
            model_handle=handle,
            checkpoint_metric=spec.checkpoint_metric,
        )

    def score(self, model_handle: str, pairs: list[NliPair]) -> list[ScoreResult]:
        model = self._lookup(model_handle)
        if not pairs:
            return []
        csr = _build_csr(pairs, model.vocab)
        logits = kernels.forward(*csr, model.weights, model.bias)
        results = []
        for pair, row in zip(pairs, logits):
            z = (float(row[0]), float(row[1]), float(row[2]))
            results.append(
                ScoreResult(pair_id=pair.pair_id, logits=z, p_pos=entailment_probability(z))
            )
        return results

    def decision_threshold(self, model_handle: str) -> float:
        return self._lookup(model_handle).decision_threshold

    def _register(self, model: _RefModel) -> str:
        payload = model.weights.tobytes() + model.bias.tobytes() + canonical_json(
            sorted(model.vocab.items(), key=lambda kv: kv[1])
        ).encode("utf-8")
        handle = "ref-" + sha256_hex(payload.hex())[:16]
        self._models[handle] = model
        if self.store_dir:
            directory = os.path.join(self.store_dir, handle)
            os.makedirs(directory, exist_ok=True)
            np.save(os.path.join(directory, "weights.npy"), model.weights)
            np.save(os.path.join(directory, "bias.npy"), model.bias)
            with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8") as fh:
                fh.write(
                    canonical_json(
                        {
                            "vocab": sorted(model.vocab.items(), key=lambda kv: kv[1]),
                            "decision_threshold": model.decision_threshold,
                        }
                    )
                )
        return handle

    def _lookup(self, handle: str) -> _RefModel:
        if handle in self._models:
            return self._models[handle]
        if self.store_dir:
            directory = os.path.join(self.store_dir, handle)
            meta_path = os.path.join(directory, "meta.json")
            if os.path.exists(meta_path):
                with open(meta_path, "r", encoding="utf-8") as fh:
                    meta = json.load(fh)
                model = _RefModel(
                    weights=np.load(os.path.join(directory, "weights.npy")),
                    bias=np.load(os.path.join(directory, "bias.npy")),
                    vocab={token: idx for token, idx in meta["vocab"]},
                    decision_threshold=meta["decision_threshold"],
                )
                self._models[handle] = model
                return model
        raise UnknownHandleError(f"unknown model handle {handle}")


def _slice_csr(indptr, indices, counts, rows):
    lengths = indptr[rows + 1] - indptr[rows]
    out_indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    np.cumsum(lengths, out=out_indptr[1:])
    nnz = int(out_indptr[-1])
    out_indices = np.empty(nnz, dtype=np.int64)
    out_counts = np.empty(nnz, dtype=np.float64)
    pos = 0
    for r in rows:
        a, b = indptr[r], indptr[r + 1]
        width = int(b - a)
        out_indices[pos : pos + width] = indices[a:b]
        out_counts[pos : pos + width] = counts[a:b]
        pos += width
    return out_indptr, out_indices, out_counts


# --- worker backend (wire client) --------------------------------------------
#
# Control messages are single-line JSON over the worker's standard streams:
#   {"cmd":"train","train_path","dev_path","spec",...} -> {"ok","model_handle","report_path"}
#   {"cmd":"score","model_handle","pairs_path","out_path"} -> {"ok"}
# Data travels via newline-delimited JSON files:
#   labeled pairs {"pair_id","premise","hypothesis","label"}; pairs without
#   "label" for scoring; scores {"pair_id","z_e","z_n","z_c","p_pos"}.


class WorkerTransportError(ClassifierError):
    pass


class WorkerJobError(ClassifierError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class WorkerBackend:
    """Classifier backend delegating to a subprocess over the wire contract."""

    def __init__(self, cmd: list[str], workdir):
        self.cmd = list(cmd)
        self.workdir = workdir
        os.makedirs(workdir, exist_ok=True)
        self._proc: subprocess.Popen | None = None
        self._seq = 0

    def _ensure_proc(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(
                    self.cmd,
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                    text=True,
                    bufsize=1,
                )
            except OSError as exc:
                raise WorkerTransportError(f"cannot start worker: {exc}") from exc
        return self._proc

    def _request(self, payload: dict) -> dict:
        proc = self._ensure_proc()
        try:
            proc.stdin.write(json.dumps(payload) + "\n")
            proc.stdin.flush()
            line = proc.stdout.readline()
        except (OSError, ValueError) as exc:
            raise WorkerTransportError(f"worker pipe failure: {exc}") from exc
        if not line:
            raise WorkerTransportError("worker exited without responding")
        try:
            response = json.loads(line)
        except json.JSONDecodeError as exc:
            raise WorkerTransportError(f"bad worker response: {line[:200]}") from exc
        if not response.get("ok"):
            error = response.get("error") or {}
            raise WorkerJobError(
                error.get("code", "unknown"), error.get("message", "worker error")
            )
        return response

    def _write_labeled(self, name: str, pairs, labels) -> str:
        path = os.path.join(self.workdir, name)
        with open(path, "w", encoding="utf-8") as fh:
            for pair, label in zip(pairs, labels):
                record = {
                    "pair_id": pair.pair_id,
                    "premise": pair.premise,
                    "hypothesis": pair.hypothesis,
                }
                if label is not None:
                    record["label"] = label
                fh.write(canonical_json(record) + "\n")
        return path

    def train(self, spec: TrainSpec) -> TrainReport:
        spec.validate()
        self._seq += 1
        seq = self._seq
        train_pairs = [
            build_nli_pair(lp.instance, spec.definition, spec.premise_tagging)
            for lp in spec.train
        ]
        dev_pairs = [
            build_nli_pair(lp.instance, spec.definition, spec.premise_tagging)
            for lp in spec.dev
        ]
        train_path = self._write_labeled(
            f"train-{seq}.jsonl", train_pairs, [lp.label for lp in spec.train]
        )
        dev_path = self._write_labeled(
            f"dev-{seq}.jsonl", dev_pairs, [lp.label for lp in spec.dev]
        )
        response = self._request(
            {
                "cmd": "train",
                "train_path": train_path,
                "dev_path": dev_path,
                "spec": {
                    "epochs": spec.epochs,
                    "learning_rate": spec.learning_rate,
                    "batch_size": spec.batch_size,
                    "rng_seed": spec.rng_seed,
                    "checkpoint_metric": spec.checkpoint_metric,
                    "decision_threshold": spec.decision_threshold,
                },
            }
        )
        with open(response["report_path"], "r", encoding="utf-8") as fh:
            report = json.load(fh)
        return TrainReport(
            epochs=report["epochs"],
            selected_epoch=report["selected_epoch"],
            model_handle=response["model_handle"],
            checkpoint_metric=spec.checkpoint_metric,
        )

    def score(self, model_handle: str, pairs: list[NliPair]) -> list[ScoreResult]:
        if not pairs:
            return []
        self._seq += 1
        seq = self._seq
        pairs_path = self._write_labeled(
            f"pairs-{seq}.jsonl", pairs, [None] * len(pairs)
        )
        out_path = os.path.join(self.workdir, f"scores-{seq}.jsonl")
        self._request(
            {
                "cmd": "score",
                "model_handle": model_handle,
                "pairs_path": pairs_path,
                "out_path": out_path,
            }
        )
        results = []
        with open(out_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                logits = (float(row["z_e"]), float(row["z_n"]), float(row["z_c"]))
                recomputed = entailment_probability(logits)
                if abs(recomputed - float(row["p_pos"])) > 1e-6:
                    raise ClassifierError(
                        f"worker p_pos {row['p_pos']} drifts from logits "
                        f"(recomputed {recomputed}) for pair {row['pair_id']}"
                    )
                results.append(
                    ScoreResult(pair_id=row["pair_id"], logits=logits, p_pos=recomputed)
                )
        if len(results) != len(pairs):
            raise ClassifierError(
                f"worker scored {len(results)} of {len(pairs)} pairs"
            )
        return results

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            try:
                self._proc.stdin.write(json.dumps({"cmd": "shutdown"}) + "\n")
                self._proc.stdin.flush()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                self._proc.terminate()
