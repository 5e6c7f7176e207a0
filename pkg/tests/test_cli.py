import csv
import json

import numpy as np
import pytest

from ehrfuse import cli, model, synth, trainer
from ehrfuse.records import load_records, save_records
from ehrfuse.trainer import load_checkpoint


def run(argv):
    return cli.main(argv)


@pytest.fixture(scope="module")
def corpus_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "corpus.jsonl"
    save_records(synth.generate(synth.GeneratorConfig(n_patients=30, seed=3)), path)
    return path


@pytest.fixture(scope="module")
def checkpoint_path(tmp_path_factory, corpus_path):
    out = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    code = run(
        [
            "train", "--data", str(corpus_path), "--checkpoint", str(out),
            "--epochs", "2", "--seed", "1",
        ]
    )
    assert code == 0
    return out


class TestGenerate:
    def test_default_corpus_shape(self, tmp_path):
        out = tmp_path / "corpus.jsonl"
        assert run(["generate", "--n-patients", "12", "--out", str(out), "--seed", "5"]) == 0
        records = load_records(out)
        assert len(records) == 12
        for record in records:
            assert len(record.visits) >= 2
            assert all(len(v.labels) == 10 for v in record.visits)
        stats = (tmp_path / "corpus.jsonl.stats.csv").read_text().splitlines()
        assert len(stats) == 11

    def test_seed_repeat_identical_files(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for out in (a, b):
            assert run(["generate", "--n-patients", "8", "--out", str(out), "--seed", "9"]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_zero_patients_is_validation_error(self, tmp_path, capsys):
        out = tmp_path / "c.jsonl"
        assert run(["generate", "--n-patients", "0", "--out", str(out)]) == 1
        assert "n_patients" in capsys.readouterr().err

    def test_manifest_written(self, tmp_path):
        out = tmp_path / "corpus.jsonl"
        run(["generate", "--n-patients", "5", "--out", str(out)])
        manifest = json.loads((tmp_path / "corpus.jsonl.manifest.json").read_text())
        assert manifest["command"] == "generate"
        assert str(out) in manifest["outputs"]
        assert "created_at" in manifest


class TestTrain:
    def test_artifacts_and_determinism(self, tmp_path, corpus_path):
        logs = []
        for run_dir in ("r1", "r2"):
            d = tmp_path / run_dir
            d.mkdir()
            ckpt = d / "m.ckpt"
            code = run(
                [
                    "train", "--data", str(corpus_path), "--checkpoint", str(ckpt),
                    "--epochs", "2", "--seed", "7",
                    "--cohort", str(d / "cohort.csv"),
                ]
            )
            assert code == 0
            assert ckpt.exists()
            logs.append((d / "m.ckpt.log.csv").read_bytes())
            manifest = json.loads((d / "m.ckpt.manifest.json").read_text())
            assert manifest["resolved_config"]["epochs"] == 2
            cohort = (d / "cohort.csv").read_text().splitlines()
            assert cohort[0] == "n_records,n_included,n_excluded,n_samples"
        assert logs[0] == logs[1]

    def test_log_has_train_and_test_rows(self, checkpoint_path):
        log = (checkpoint_path.parent / "model.ckpt.log.csv").read_text().splitlines()
        assert log[0] == "epoch,split,loss,f1_macro,accuracy"
        splits = {line.split(",")[1] for line in log[1:]}
        assert splits == {"train", "test"}

    def test_heart_failure_task_trains_binary_head(self, tmp_path, corpus_path):
        ckpt = tmp_path / "hf.ckpt"
        code = run(
            [
                "train", "--data", str(corpus_path), "--checkpoint", str(ckpt),
                "--epochs", "1", "--task", "heart-failure",
            ]
        )
        assert code == 0
        trained = load_checkpoint(ckpt)
        assert trained.model_cfg.n_labels == 1
        assert trained.data_cfg.task == "heart_failure"

    def test_config_file_precedence(self, tmp_path, corpus_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("epochs=1\nalpha=0.5\nseed=3\n# comment\n")
        ckpt = tmp_path / "m.ckpt"
        code = run(
            [
                "train", "--data", str(corpus_path), "--checkpoint", str(ckpt),
                "--config", str(cfg), "--alpha", "0.9",
            ]
        )
        assert code == 0
        trained = load_checkpoint(ckpt)
        assert trained.train_cfg.epochs == 1          # from file
        assert trained.train_cfg.loss.alpha == 0.9    # CLI wins
        assert trained.train_cfg.seed == 3            # from file

    def test_missing_data_file_is_runtime_error(self, tmp_path):
        assert (
            run(
                [
                    "train", "--data", str(tmp_path / "nope.jsonl"),
                    "--checkpoint", str(tmp_path / "m.ckpt"),
                ]
            )
            == 2
        )


class TestEval:
    def test_report_files_and_monotone_k(self, tmp_path, corpus_path, checkpoint_path):
        out = tmp_path / "report.csv"
        code = run(
            [
                "eval", "--checkpoint", str(checkpoint_path), "--data", str(corpus_path),
                "--k", "1", "2", "3", "4", "5", "--out", str(out),
            ]
        )
        assert code == 0
        rows = {r["metric"]: float(r["value"]) for r in csv.DictReader(out.open())}
        recalls = [rows[f"recall_at_{k}"] for k in range(1, 6)]
        ndcgs = [rows[f"ndcg_at_{k}"] for k in range(1, 6)]
        assert recalls == sorted(recalls)
        assert ndcgs == sorted(ndcgs)
        parsed = json.loads((tmp_path / "report.csv.json").read_text())
        assert parsed["recall_at_k"]["5"] == rows["recall_at_5"]

    def test_missing_checkpoint_is_runtime_error(self, tmp_path, corpus_path):
        assert (
            run(
                [
                    "eval", "--checkpoint", str(tmp_path / "none.ckpt"),
                    "--data", str(corpus_path), "--out", str(tmp_path / "r.csv"),
                ]
            )
            == 2
        )

    def test_label_mismatch_is_validation_error(self, tmp_path, checkpoint_path):
        from conftest import make_record

        bad_path = tmp_path / "bad.jsonl"
        save_records(
            [make_record(f"b{i}", [(0, 1, (1, 0)), (4, 9, (0, 1))]) for i in range(3)],
            bad_path,
        )
        assert (
            run(
                [
                    "eval", "--checkpoint", str(checkpoint_path), "--data", str(bad_path),
                    "--split", "all", "--out", str(tmp_path / "r.csv"),
                ]
            )
            == 1
        )


class TestPredict:
    def test_row_count_is_samples_times_labels(self, tmp_path, corpus_path, checkpoint_path):
        out = tmp_path / "preds.csv"
        code = run(
            [
                "predict", "--checkpoint", str(checkpoint_path), "--data", str(corpus_path),
                "--split", "all", "--out", str(out),
            ]
        )
        assert code == 0
        records = load_records(corpus_path)
        n_samples = sum(len(r.visits) for r in records)
        rows = list(csv.DictReader(out.open()))
        assert len(rows) == n_samples * 10
        assert set(rows[0]) == {"patient_id", "visit_index", "label", "probability", "bit", "target"}


class TestEmbedExport:
    def test_reexport_identical_and_vectors_match_hidden_oracle(
        self, tmp_path, corpus_path, checkpoint_path
    ):
        out1, out2 = tmp_path / "e1.csv", tmp_path / "e2.csv"
        for out in (out1, out2):
            assert (
                run(
                    [
                        "embed-export", "--checkpoint", str(checkpoint_path),
                        "--data", str(corpus_path), "--split", "test", "--out", str(out),
                    ]
                )
                == 0
            )
        assert out1.read_bytes() == out2.read_bytes()

        # recompute the fusion hidden layer independently for the first row
        trained = load_checkpoint(checkpoint_path)
        records = load_records(corpus_path)
        from ehrfuse.records import patient_level_split

        _, test_records = patient_level_split(
            records, trained.data_cfg.train_fraction, trained.train_cfg.seed
        )
        rows = list(csv.DictReader(out1.open()))
        samples, _ = trainer.build_training_samples(
            test_records, trained.data_cfg, trained.train_cfg.ablation
        )
        prepared = model.prepare_samples(
            samples, trained.vocab, trained.scaler, trained.model_cfg
        )
        first = prepared[0]
        assert rows[0]["patient_id"] == first.patient_id
        _, _, _, cache = model.forward_batch(
            [first], trained.store, trained.model_cfg, trained.pos_table()
        )
        d = trained.model_cfg.d_model
        got = np.asarray([float(rows[0][f"h{i}"]) for i in range(d)])
        np.testing.assert_array_equal(got, cache.hidden[0])

        n_samples = sum(len(r.visits) for r in test_records)
        assert len(rows) == n_samples


class TestAblate:
    def test_three_row_table(self, tmp_path, corpus_path):
        out = tmp_path / "ablation.csv"
        code = run(
            [
                "ablate", "--data", str(corpus_path), "--out", str(out),
                "--epochs", "1", "--seed", "2", "--workdir", str(tmp_path / "work"),
            ]
        )
        assert code == 0
        rows = list(csv.DictReader(out.open()))
        assert [r["model"] for r in rows] == ["full", "no_text", "no_labtext"]
        for r in rows:
            assert 0.0 <= float(r["f1_macro"]) <= 1.0
        assert (tmp_path / "work" / "ablate_full.ckpt").exists()


def test_unknown_command_rejected_by_argparse():
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["frobnicate"])
