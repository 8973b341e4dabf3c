"""Fine-tune a pretrained three-way entailment model as a per-relation binary
classifier and score premise/hypothesis pairs with it.

The positive probability is the softmax component of the ENTAILMENT label;
training backpropagates binary cross entropy through that component, reusing
the pretrained classification head. One training job runs at a time; scoring
never mutates weights. Determinism across hardware is not promised — reports
record seeds, library versions, and the device instead.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
from transformers import AutoModelForSequenceClassification, AutoTokenizer

DEFAULT_BASE = "roberta-large-mnli"
BASE_HANDLE = "base"  # reserved: score with the unmodified checkpoint
MAX_LENGTH = 256
PROB_EPS = 1e-7


class WorkerError(RuntimeError):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class LabeledRow:
    pair_id: str
    premise: str
    hypothesis: str
    label: int | None


def read_pair_file(path: str, require_labels: bool) -> list[LabeledRow]:
    if not os.path.exists(path):
        raise WorkerError("file-missing", f"no such pair file: {path}")
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                label = record.get("label")
                if require_labels and label not in (0, 1):
                    raise KeyError("label")
                rows.append(
                    LabeledRow(
                        pair_id=record["pair_id"],
                        premise=record["premise"],
                        hypothesis=record["hypothesis"],
                        label=label,
                    )
                )
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise WorkerError(
                    "bad-pair-file", f"{path}:{line_no}: {exc}"
                ) from exc
    if not rows:
        raise WorkerError("bad-pair-file", f"{path} contains no pairs")
    return rows


def _label_indices(config) -> tuple[int, int, int]:
    """(entailment, neutral, contradiction) logit indices for a checkpoint."""
    found: dict[str, int] = {}
    for name, idx in (getattr(config, "label2id", None) or {}).items():
        lowered = name.lower()
        for key in ("entail", "neutral", "contra"):
            if key in lowered:
                found[key] = int(idx)
    if len(found) == 3:
        return found["entail"], found["neutral"], found["contra"]
    # MNLI-style checkpoints order labels contradiction/neutral/entailment.
    return 2, 1, 0


class WorkerSession:
    """Holds the base checkpoint and every model trained in this session."""

    def __init__(
        self,
        base: str = DEFAULT_BASE,
        device: str = "cpu",
        models_dir: str = "repal-worker-models",
        amp: bool = False,
    ):
        self.base = base
        self.device = torch.device(device)
        self.amp = amp  # off by default: tiny batch counts are loss-noise prone
        self.models_dir = models_dir
        os.makedirs(models_dir, exist_ok=True)
        try:
            self.tokenizer = AutoTokenizer.from_pretrained(base)
            base_model = AutoModelForSequenceClassification.from_pretrained(base)
        except Exception as exc:
            raise WorkerError("base-checkpoint", f"cannot load {base!r}: {exc}") from exc
        base_model.to(self.device)
        base_model.eval()
        self.indices = _label_indices(base_model.config)
        self._models: dict[str, torch.nn.Module] = {BASE_HANDLE: base_model}
        self._train_count = 0

    # -- scoring ------------------------------------------------------------

    def _batches(self, rows: list[LabeledRow], batch_size: int, order=None):
        order = range(len(rows)) if order is None else order
        chunk: list[int] = []
        for i in order:
            chunk.append(int(i))
            if len(chunk) == batch_size:
                yield chunk
                chunk = []
        if chunk:
            yield chunk

    def _encode(self, rows: list[LabeledRow], picks: list[int]):
        enc = self.tokenizer(
            [rows[i].premise for i in picks],
            [rows[i].hypothesis for i in picks],
            truncation=True,
            padding=True,
            max_length=MAX_LENGTH,
            return_tensors="pt",
        )
        return {k: v.to(self.device) for k, v in enc.items()}

    def _entailment_probs(self, logits: torch.Tensor) -> torch.Tensor:
        return torch.softmax(logits, dim=-1)[:, self.indices[0]]

    @torch.no_grad()
    def _score_rows(self, model, rows: list[LabeledRow], batch_size: int = 32):
        model.eval()
        out = []
        e_idx, n_idx, c_idx = self.indices
        for picks in self._batches(rows, batch_size):
            logits = model(**self._encode(rows, picks)).logits.double().cpu()
            for row_idx, z in zip(picks, logits):
                z_e, z_n, z_c = float(z[e_idx]), float(z[n_idx]), float(z[c_idx])
                m = max(z_e, z_n, z_c)
                exps = [math.exp(v - m) for v in (z_e, z_n, z_c)]
                out.append(
                    {
                        "pair_id": rows[row_idx].pair_id,
                        "z_e": z_e,
                        "z_n": z_n,
                        "z_c": z_c,
                        "p_pos": exps[0] / sum(exps),
                    }
                )
        return out

    def score(self, model_handle: str, pairs_path: str, out_path: str) -> int:
        if model_handle not in self._models:
            raise WorkerError("unknown-handle", f"no model {model_handle!r} in session")
        rows = read_pair_file(pairs_path, require_labels=False)
        results = self._score_rows(self._models[model_handle], rows)
        with open(out_path, "w", encoding="utf-8") as fh:
            for record in results:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        return len(results)

    # -- training -----------------------------------------------------------

    def _dev_metric(self, model, dev_rows, metric: str, threshold: float) -> float:
        results = self._score_rows(model, dev_rows)
        probs = [r["p_pos"] for r in results]
        labels = [row.label for row in dev_rows]
        if metric == "dev_loss":
            total = 0.0
            for p, y in zip(probs, labels):
                pc = min(max(p, PROB_EPS), 1 - PROB_EPS)
                total += -(y * math.log(pc) + (1 - y) * math.log(1 - pc))
            return total / len(probs)
        tp = sum(1 for p, y in zip(probs, labels) if p > threshold and y == 1)
        fp = sum(1 for p, y in zip(probs, labels) if p > threshold and y == 0)
        fn = sum(1 for p, y in zip(probs, labels) if p <= threshold and y == 1)
        if tp == 0:
            return 0.0
        precision, recall = tp / (tp + fp), tp / (tp + fn)
        return 2 * precision * recall / (precision + recall)

    def train(self, train_path: str, dev_path: str, spec: dict) -> dict:
        train_rows = read_pair_file(train_path, require_labels=True)
        dev_rows = read_pair_file(dev_path, require_labels=True)
        epochs = int(spec.get("epochs", 12))
        learning_rate = float(spec.get("learning_rate", 3e-5))
        batch_size = int(spec.get("batch_size", 64))
        rng_seed = int(spec.get("rng_seed", 0))
        metric = spec.get("checkpoint_metric", "dev_f1")
        threshold = float(spec.get("decision_threshold", 0.5))
        if epochs < 1:
            raise WorkerError("bad-spec", "epochs must be >= 1")
        if metric not in ("dev_f1", "dev_loss"):
            raise WorkerError("bad-spec", f"unknown checkpoint metric {metric!r}")

        torch.manual_seed(rng_seed)
        rng = np.random.default_rng(rng_seed)
        model = AutoModelForSequenceClassification.from_pretrained(self.base)
        model.to(self.device)
        optimizer = torch.optim.AdamW(model.parameters(), lr=learning_rate)
        labels = torch.tensor([r.label for r in train_rows], dtype=torch.float64)

        history = []
        best_value = None
        best_epoch = 0
        best_state = None
        try:
            for epoch in range(1, epochs + 1):
                model.train()
                order = rng.permutation(len(train_rows))
                epoch_loss = 0.0
                for picks in self._batches(train_rows, batch_size, order):
                    optimizer.zero_grad()
                    amp_dtype = torch.bfloat16 if self.device.type == "cpu" else torch.float16
                    with torch.autocast(self.device.type, dtype=amp_dtype, enabled=self.amp):
                        logits = model(**self._encode(train_rows, picks)).logits
                    p = self._entailment_probs(logits.float()).clamp(PROB_EPS, 1 - PROB_EPS)
                    y = labels[picks].to(p.dtype).to(self.device)
                    loss = -(y * p.log() + (1 - y) * (1 - p).log()).mean()
                    if not torch.isfinite(loss):
                        raise WorkerError(
                            "non-finite-loss", f"loss diverged at epoch {epoch}"
                        )
                    loss.backward()
                    optimizer.step()
                    epoch_loss += float(loss.detach()) * len(picks)
                value = self._dev_metric(model, dev_rows, metric, threshold)
                history.append(
                    {
                        "epoch": epoch,
                        "train_loss": epoch_loss / len(train_rows),
                        metric: value,
                    }
                )
                better = (
                    best_value is None
                    or (metric == "dev_f1" and value > best_value)
                    or (metric == "dev_loss" and value < best_value)
                )
                if better:  # earliest epoch wins ties
                    best_value = value
                    best_epoch = epoch
                    best_state = {
                        k: v.detach().cpu().clone() for k, v in model.state_dict().items()
                    }
        except torch.cuda.OutOfMemoryError as exc:  # pragma: no cover
            raise WorkerError("out-of-memory", str(exc)) from exc

        model.load_state_dict(best_state)
        model.eval()
        self._train_count += 1
        digest = hashlib.sha256(
            json.dumps([train_path, dev_path, spec], sort_keys=True).encode()
        ).hexdigest()[:8]
        handle = f"m{self._train_count}-{digest}"
        self._models[handle] = model
        model_dir = os.path.join(self.models_dir, handle)
        model.save_pretrained(model_dir)
        self.tokenizer.save_pretrained(model_dir)

        report = {
            "epochs": history,
            "selected_epoch": best_epoch,
            "model_handle": handle,
            "checkpoint_metric": metric,
            "decision_threshold": threshold,
            "seeds": {"torch": rng_seed, "data_order": rng_seed},
            "versions": {
                "torch": torch.__version__,
                "transformers": __import__("transformers").__version__,
            },
            "device": str(self.device),
            "base_checkpoint": self.base,
            "model_dir": model_dir,
        }
        report_path = os.path.join(model_dir, "report.json")
        with open(report_path, "w", encoding="utf-8") as fh:
            json.dump(report, fh, sort_keys=True, indent=2)
        return {"ok": True, "model_handle": handle, "report_path": report_path}
