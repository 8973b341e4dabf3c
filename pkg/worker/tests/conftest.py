import json
import os

import pytest
import torch
from transformers import BertConfig, BertForSequenceClassification, BertTokenizer

NAMES = (
    "arden", "brisa", "cole", "dale", "edda", "finn",
    "gorka", "hale", "ivo", "juna", "kiri", "lowe",
)
POS_VERB = "serves"
NEG_VERBS = ("visited", "painted", "greeted")
FILLER = ("near", "the", "old", "bridge", ".")
HYPOTHESIS_WORDS = ("is", "served", "by", "a", "person")

VOCAB = (
    ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    + list(NAMES)
    + [POS_VERB]
    + list(NEG_VERBS)
    + list(FILLER)
    + list(HYPOTHESIS_WORDS)
)


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    """A small randomly initialized three-way NLI checkpoint, built offline."""
    directory = tmp_path_factory.mktemp("checkpoint")
    vocab_path = directory / "vocab.txt"
    vocab_path.write_text("\n".join(VOCAB))
    tokenizer = BertTokenizer(str(vocab_path))
    config = BertConfig(
        vocab_size=len(VOCAB),
        hidden_size=32,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=64,
        max_position_embeddings=64,
        num_labels=3,
        label2id={"CONTRADICTION": 0, "NEUTRAL": 1, "ENTAILMENT": 2},
        id2label={0: "CONTRADICTION", 1: "NEUTRAL", 2: "ENTAILMENT"},
    )
    torch.manual_seed(1234)
    model = BertForSequenceClassification(config)
    model.save_pretrained(directory)
    tokenizer.save_pretrained(directory)
    return str(directory)


def toy_rows(n_pos, n_neg, seed, id_prefix):
    """Keyword-separable premise/hypothesis rows: positive iff 'serves'."""
    import numpy as np

    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_pos + n_neg):
        positive = i < n_pos
        verb = POS_VERB if positive else NEG_VERBS[int(rng.integers(len(NEG_VERBS)))]
        a = NAMES[int(rng.integers(len(NAMES)))]
        b = NAMES[int(rng.integers(len(NAMES)))]
        rows.append(
            {
                "pair_id": f"{id_prefix}-{i}",
                "premise": f"{a} {verb} {b} near the old bridge .",
                "hypothesis": f"{b} is served by {a}",
                "label": 1 if positive else 0,
            }
        )
    return rows


def write_rows(path, rows, with_labels=True):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            record = dict(row)
            if not with_labels:
                record.pop("label", None)
            fh.write(json.dumps(record) + "\n")
    return str(path)


@pytest.fixture
def toy_files(tmp_path):
    train = write_rows(tmp_path / "train.jsonl", toy_rows(15, 15, seed=1, id_prefix="tr"))
    dev = write_rows(tmp_path / "dev.jsonl", toy_rows(15, 15, seed=2, id_prefix="dv"))
    holdout_rows = toy_rows(10, 20, seed=3, id_prefix="ho")
    holdout = write_rows(tmp_path / "holdout.jsonl", holdout_rows, with_labels=False)
    return {
        "train": train,
        "dev": dev,
        "holdout": holdout,
        "holdout_labels": {r["pair_id"]: r["label"] for r in holdout_rows},
        "dir": tmp_path,
    }


def f1_from_scores(score_path, labels, threshold=0.5):
    tp = fp = fn = 0
    with open(score_path, encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            predicted = row["p_pos"] > threshold
            gold = labels[row["pair_id"]] == 1
            tp += predicted and gold
            fp += predicted and not gold
            fn += (not predicted) and gold
    if tp == 0:
        return 0.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)
