import json
import math
import os

import pytest

from repal_worker.nli import BASE_HANDLE, WorkerError, WorkerSession

from conftest import f1_from_scores, toy_rows, write_rows

SPEC = {
    "epochs": 12,
    "learning_rate": 1e-3,
    "batch_size": 8,
    "rng_seed": 0,
    "checkpoint_metric": "dev_f1",
    "decision_threshold": 0.5,
}


@pytest.fixture(scope="module")
def session(tiny_checkpoint, tmp_path_factory):
    return WorkerSession(
        tiny_checkpoint, device="cpu", models_dir=str(tmp_path_factory.mktemp("models"))
    )


@pytest.fixture(scope="module")
def trained(session, tiny_checkpoint, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("job")
    train = write_rows(tmp / "train.jsonl", toy_rows(15, 15, seed=1, id_prefix="tr"))
    dev = write_rows(tmp / "dev.jsonl", toy_rows(15, 15, seed=2, id_prefix="dv"))
    response = session.train(train, dev, SPEC)
    return {"response": response, "tmp": tmp}


class TestTrain:
    def test_runs_twelve_epochs_and_selects(self, trained):
        report = json.load(open(trained["response"]["report_path"]))
        assert len(report["epochs"]) == 12
        values = [row["dev_f1"] for row in report["epochs"]]
        best = max(values)
        assert values[report["selected_epoch"] - 1] == best
        assert report["selected_epoch"] - 1 == values.index(best)  # earliest tie

    def test_report_records_provenance(self, trained):
        report = json.load(open(trained["response"]["report_path"]))
        assert report["seeds"] == {"torch": 0, "data_order": 0}
        assert set(report["versions"]) == {"torch", "transformers"}
        assert report["device"] == "cpu"

    def test_finetuned_beats_untrained_zero_shot(self, session, trained):
        tmp = trained["tmp"]
        holdout_rows = toy_rows(10, 20, seed=3, id_prefix="ho")
        holdout = write_rows(tmp / "holdout.jsonl", holdout_rows, with_labels=False)
        labels = {r["pair_id"]: r["label"] for r in holdout_rows}

        session.score(BASE_HANDLE, holdout, str(tmp / "base.jsonl"))
        session.score(
            trained["response"]["model_handle"], holdout, str(tmp / "tuned.jsonl")
        )
        base_f1 = f1_from_scores(tmp / "base.jsonl", labels)
        tuned_f1 = f1_from_scores(tmp / "tuned.jsonl", labels)
        print(f"\n[ACCEPTANCE] worker learning: base F1={base_f1:.3f} tuned F1={tuned_f1:.3f}")
        assert tuned_f1 > base_f1

    def test_single_example_train_set_runs(self, session, tmp_path):
        train = write_rows(tmp_path / "one.jsonl", toy_rows(1, 0, seed=5, id_prefix="s"))
        dev = write_rows(tmp_path / "dev.jsonl", toy_rows(2, 2, seed=6, id_prefix="d"))
        response = session.train(train, dev, dict(SPEC, epochs=1))
        assert response["ok"]

    def test_missing_file_is_structured_error(self, session, tmp_path):
        with pytest.raises(WorkerError) as exc:
            session.train(str(tmp_path / "nope.jsonl"), str(tmp_path / "nope2.jsonl"), SPEC)
        assert exc.value.code == "file-missing"

    def test_bad_spec_rejected(self, session, toy_files):
        with pytest.raises(WorkerError) as exc:
            session.train(toy_files["train"], toy_files["dev"], dict(SPEC, epochs=0))
        assert exc.value.code == "bad-spec"


class TestScore:
    def test_order_preserved_and_consistent(self, session, trained, toy_files):
        out = str(toy_files["dir"] / "scores.jsonl")
        n = session.score(trained["response"]["model_handle"], toy_files["holdout"], out)
        rows = [json.loads(l) for l in open(out)]
        assert n == len(rows) == 30
        assert [r["pair_id"] for r in rows] == [f"ho-{i}" for i in range(30)]
        for row in rows:
            z = (row["z_e"], row["z_n"], row["z_c"])
            m = max(z)
            exps = [math.exp(v - m) for v in z]
            assert abs(row["p_pos"] - exps[0] / sum(exps)) < 1e-6

    def test_rescore_identical(self, session, trained, toy_files):
        out_a = str(toy_files["dir"] / "a.jsonl")
        out_b = str(toy_files["dir"] / "b.jsonl")
        session.score(trained["response"]["model_handle"], toy_files["holdout"], out_a)
        session.score(trained["response"]["model_handle"], toy_files["holdout"], out_b)
        assert open(out_a).read() == open(out_b).read()

    def test_unknown_handle(self, session, toy_files):
        with pytest.raises(WorkerError) as exc:
            session.score("m999-deadbeef", toy_files["holdout"], "/dev/null")
        assert exc.value.code == "unknown-handle"


def test_mixed_precision_path_trains(tiny_checkpoint, tmp_path):
    session = WorkerSession(
        tiny_checkpoint, device="cpu", models_dir=str(tmp_path / "models"), amp=True
    )
    train = write_rows(tmp_path / "train.jsonl", toy_rows(4, 4, seed=9, id_prefix="tr"))
    dev = write_rows(tmp_path / "dev.jsonl", toy_rows(2, 2, seed=10, id_prefix="dv"))
    response = session.train(train, dev, dict(SPEC, epochs=1))
    assert response["ok"]
