import dataclasses

import numpy as np
import pytest

from conftest import make_record

from ehrfuse import losses, metrics, model, synth, textenc, trainer, tst
from ehrfuse.fusion import NumericalError
from ehrfuse.records import ValidationError, patient_level_split

SMALL_TST = tst.TSTConfig(d_model=16, n_heads=2, n_layers=1, d_ff=32)
SMALL_MODEL = model.ModelConfig(
    n_labels=10, text=textenc.TextEncoderConfig(embed_dim=16), tst=SMALL_TST
)
TINY_TST = tst.TSTConfig(d_model=8, n_heads=1, n_layers=1, d_ff=16, dropout=0.0)
TINY_MODEL = model.ModelConfig(
    n_labels=10, text=textenc.TextEncoderConfig(embed_dim=8), tst=TINY_TST
)


def small_corpus(n=24, seed=5):
    return synth.generate(synth.GeneratorConfig(n_patients=n, seed=seed))


def quick_train_cfg(**overrides):
    base = dict(epochs=2, seed=0, batch_size=8)
    base.update(overrides)
    return trainer.TrainConfig(**base)


class TestTrainLoop:
    def test_zero_learning_rate_leaves_parameters_bitwise_unchanged(self):
        corpus = small_corpus()
        trained, _, _ = trainer.train(
            corpus, trainer.DataConfig(), quick_train_cfg(learning_rate=0.0),
            model_cfg=SMALL_MODEL,
        )
        fresh = model.init_parameters(
            SMALL_MODEL, len(trained.vocab_words), np.random.default_rng(0)
        )
        for name in fresh.names():
            np.testing.assert_array_equal(trained.store[name], fresh[name])

    def test_overfit_single_sample(self):
        """One sample, 200 steps: the loss must collapse below 0.05 and trend
        monotonically down after the warm start."""
        record = make_record(
            "p",
            [
                (0, 40, (1, 0, 1, 0, 0, 0, 0, 0, 0, 0), "diabetes glucose insulin"),
                (100, 130, (1, 0, 1, 0, 0, 0, 0, 0, 0, 0), "followup diabetes"),
            ],
        )
        # next-visit targets turn a 2-visit patient into exactly one sample
        cfg = quick_train_cfg(epochs=200, batch_size=1, learning_rate=0.1)
        data_cfg = trainer.DataConfig(target="next-visit")
        tiny = dataclasses.replace(
            TINY_MODEL, text=dataclasses.replace(TINY_MODEL.text, min_count=1)
        )
        trained, history, _ = trainer.train([record], data_cfg, cfg, tiny)
        losses_per_step = [row["loss"] for row in history if row["split"] == "train"]
        assert len(losses_per_step) == 200
        assert losses_per_step[-1] < 0.05
        warm = losses_per_step[20:]
        drops = sum(1 for a, b in zip(warm, warm[1:]) if b <= a + 1e-9)
        assert drops >= 0.95 * (len(warm) - 1)

    def test_same_seed_identical_trajectories(self):
        corpus = small_corpus()
        runs = []
        for _ in range(2):
            trained, history, _ = trainer.train(
                corpus, trainer.DataConfig(), quick_train_cfg(), model_cfg=SMALL_MODEL
            )
            runs.append((trained, history))
        assert runs[0][1] == runs[1][1]
        for name in runs[0][0].store.names():
            np.testing.assert_array_equal(runs[0][0].store[name], runs[1][0].store[name])

    def test_nan_loss_aborts_with_diagnostics(self, monkeypatch):
        corpus = small_corpus(12)
        monkeypatch.setattr(
            trainer.losses_mod, "combined_loss", lambda *a, **k: float("nan")
        )
        with pytest.raises(NumericalError, match=r"epoch 1.*parameter norms"):
            trainer.train(corpus, trainer.DataConfig(), quick_train_cfg(), SMALL_MODEL)

    def test_text_ablation_with_precomputed_rejected(self, tmp_path):
        corpus = small_corpus(8)
        path = tmp_path / "emb.csv"
        textenc.save_precomputed(path, [("P000000", 1, np.zeros(16))])
        table = textenc.PrecomputedEmbeddings.load(path)
        with pytest.raises(ValidationError, match="ablation"):
            trainer.train(
                corpus, trainer.DataConfig(), quick_train_cfg(ablation="no_text"),
                SMALL_MODEL, precomputed=table,
            )

    def test_no_time_ablation_ignores_history(self):
        corpus = small_corpus(16)
        trained, _, _ = trainer.train(
            corpus, trainer.DataConfig(), quick_train_cfg(ablation="no_time"),
            model_cfg=SMALL_MODEL,
        )
        samples, _ = trainer.build_training_samples(corpus[:2], trained.data_cfg, "no_time")
        prepared = model.prepare_samples(
            samples, trained.vocab, trained.scaler, trained.model_cfg
        )
        probs_a, *_ = model.forward_batch(
            prepared, trained.store, trained.model_cfg, trained.pos_table(),
            ablation="no_time",
        )
        for p in prepared:
            p.history = np.zeros_like(p.history)
        probs_b, *_ = model.forward_batch(
            prepared, trained.store, trained.model_cfg, trained.pos_table(),
            ablation="no_time",
        )
        np.testing.assert_array_equal(probs_a, probs_b)

    def test_vocabulary_fitted_on_training_split_only(self):
        train_rec = make_record(
            "tr", [(0, 10, (1, 0), "common words common words"), (20, 30, (1, 0), "common words")]
        )
        eval_rec = make_record(
            "ev", [(0, 10, (1, 0), "zebra zebra zebra"), (20, 30, (1, 0), "zebra")]
        )
        trained, _, _ = trainer.train(
            [train_rec],
            trainer.DataConfig(),
            quick_train_cfg(epochs=1),
            model_cfg=dataclasses.replace(SMALL_MODEL, n_labels=2),
            eval_records=[eval_rec],
        )
        assert "zebra" not in trained.vocab
        assert "common" in trained.vocab

    def test_scaler_clamps_eval_histories(self):
        corpus = small_corpus(10)
        trained, _, _ = trainer.train(
            corpus, trainer.DataConfig(), quick_train_cfg(epochs=1), SMALL_MODEL
        )
        wild = make_record(
            "w",
            [(0, 10_000_000, (1, 0, 0, 0, 0, 0, 0, 0, 0, 0)),
             (10_000_100, 10_000_200, (1, 0, 0, 0, 0, 0, 0, 0, 0, 0))],
        )
        samples, _ = trainer.build_training_samples([wild], trained.data_cfg, "full")
        prepared = model.prepare_samples(
            samples, trained.vocab, trained.scaler, trained.model_cfg
        )
        for p in prepared:
            assert p.history.min() >= 0.0 and p.history.max() <= 1.0


def record_b():
    # companion patient so the split/vocab have more than one source
    return make_record(
        "q",
        [
            (0, 12, (0, 1, 0, 0, 0, 0, 0, 0, 0, 0), "arrhythmia palpitations"),
            (50, 60, (0, 1, 0, 0, 0, 0, 0, 0, 0, 0), "arrhythmia followup"),
        ],
    )


class TestEvaluate:
    def test_recall_at_full_width_is_one(self):
        corpus = small_corpus(20)
        trained, _, _ = trainer.train(
            corpus, trainer.DataConfig(), quick_train_cfg(), SMALL_MODEL
        )
        report = trainer.evaluate(trained, corpus, k_list=[10])
        assert report.recall_at_k[10] == 1.0

    def test_label_count_mismatch_rejected(self):
        corpus = small_corpus(12)
        trained, _, _ = trainer.train(
            corpus, trainer.DataConfig(), quick_train_cfg(), SMALL_MODEL
        )
        bad = [make_record("x", [(0, 1, (1, 0)), (5, 9, (0, 1))])]
        with pytest.raises(ValidationError, match="label"):
            trainer.evaluate(trained, bad)

    def test_frequency_prior_baseline(self):
        samples, _ = trainer.build_training_samples(
            [record_b()], trainer.DataConfig(), "full"
        )
        prior = trainer.frequency_prior_scores(samples)
        np.testing.assert_array_equal(prior, [0, 1, 0, 0, 0, 0, 0, 0, 0, 0])
        ps = trainer.baseline_prediction_set(prior, samples)
        report = metrics.classification_metrics(ps)
        assert report.accuracy == 1.0


class TestCheckpoint:
    def _trained(self, **cfg_overrides):
        corpus = small_corpus(14)
        return trainer.train(
            corpus, trainer.DataConfig(), quick_train_cfg(**cfg_overrides), SMALL_MODEL
        )[0], corpus

    def test_round_trip_preserves_arrays_bitwise(self, tmp_path):
        trained, _ = self._trained()
        path = tmp_path / "model.ckpt"
        trainer.save_checkpoint(trained, path)
        loaded = trainer.load_checkpoint(path)
        assert loaded.store.names() == trained.store.names()
        for name in trained.store.names():
            np.testing.assert_array_equal(loaded.store[name], trained.store[name])
        assert loaded.vocab_words == trained.vocab_words
        assert loaded.scaler == trained.scaler
        assert loaded.train_cfg == trained.train_cfg
        assert loaded.model_cfg == trained.model_cfg
        assert loaded.rng_state == trained.rng_state

    def test_round_trip_evaluation_is_identical(self, tmp_path):
        trained, corpus = self._trained()
        before = trainer.evaluate(trained, corpus)
        path = tmp_path / "model.ckpt"
        trainer.save_checkpoint(trained, path)
        after = trainer.evaluate(trainer.load_checkpoint(path), corpus)
        assert before == after

    def test_junk_file_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ValidationError, match="not a checkpoint"):
            trainer.load_checkpoint(path)

    def test_batch_norm_running_stats_persist(self, tmp_path):
        corpus = small_corpus(10)
        bn_model = dataclasses.replace(
            SMALL_MODEL, tst=dataclasses.replace(SMALL_TST, norm="batch")
        )
        trained, _, _ = trainer.train(
            corpus, trainer.DataConfig(), quick_train_cfg(epochs=1), bn_model
        )
        assert "tst.l0.norm1_rmean" in trained.store
        assert not trained.store.is_trainable("tst.l0.norm1_rmean")
        path = tmp_path / "bn.ckpt"
        trainer.save_checkpoint(trained, path)
        loaded = trainer.load_checkpoint(path)
        assert not loaded.store.is_trainable("tst.l0.norm1_rmean")
        np.testing.assert_array_equal(
            loaded.store["tst.l0.norm1_rmean"], trained.store["tst.l0.norm1_rmean"]
        )


class TestGradientCheck:
    def _prepared(self, n=3):
        corpus = small_corpus(6, seed=9)
        samples, _ = trainer.build_training_samples(corpus, trainer.DataConfig(), "full")
        scaler = trainer.records_mod.fit_minmax_scaler(samples)
        vocab = textenc.build_vocab((s.text for s in samples), 2)
        store = model.init_parameters(TINY_MODEL, len(vocab), np.random.default_rng(1))
        prepared = model.prepare_samples(samples[:n], vocab, scaler, TINY_MODEL)
        return store, prepared

    def test_tiny_config_passes(self):
        store, prepared = self._prepared()
        report = trainer.gradient_check(
            store, prepared, TINY_MODEL, losses.LossConfig(alpha=0.95)
        )
        assert report.passed
        assert report.max_rel_err < 1e-4
        assert report.n_checked > 1000

    def test_infinite_tolerance_always_passes(self):
        store, prepared = self._prepared(n=1)
        report = trainer.gradient_check(
            store, prepared, TINY_MODEL, losses.LossConfig(), tolerance=float("inf")
        )
        assert report.passed

    def test_kink_coordinates_skipped_not_failed(self):
        store, prepared = self._prepared(n=1)
        # park the head exactly on a hinge kink in logit space: out_w = 0 and
        # logits fixed at (1, 0, 0, ...) makes the (0, j) margins exactly 0
        store["fusion.out_w"][...] = 0.0
        store["fusion.out_b"][...] = 0.0
        store["fusion.out_b"][0] = 1.0
        prepared[0].target[...] = 0.0
        prepared[0].target[0] = 1.0
        cfg = losses.LossConfig(alpha=0.0, hinge_scores="logits")
        report = trainer.gradient_check(store, prepared, TINY_MODEL, cfg)
        assert report.skipped, "expected kink coordinates to be reported as skipped"
        assert report.passed

    def test_dropout_must_be_disabled(self):
        store, prepared = self._prepared(n=1)
        with pytest.raises(ValidationError, match="dropout"):
            trainer.gradient_check(store, prepared, SMALL_MODEL, losses.LossConfig())


class TestPrecomputedPath:
    def test_train_and_evaluate_with_external_embeddings(self, tmp_path):
        corpus = small_corpus(10, seed=2)
        samples, _ = trainer.build_training_samples(corpus, trainer.DataConfig(), "full")
        rng = np.random.default_rng(0)
        rows = []
        seen = set()
        for s in samples:
            key = (s.patient_id, s.visit_index)
            if key not in seen:
                seen.add(key)
                rows.append((s.patient_id, s.visit_index, rng.normal(size=16)))
        path = tmp_path / "emb.csv"
        textenc.save_precomputed(path, rows)
        table = textenc.PrecomputedEmbeddings.load(path)
        trained, _, _ = trainer.train(
            corpus, trainer.DataConfig(), quick_train_cfg(), SMALL_MODEL,
            precomputed=table,
        )
        assert trained.text_mode == "precomputed"
        assert "text.emb" not in trained.store
        report = trainer.evaluate(trained, corpus, precomputed=table)
        assert 0.0 <= report.f1_macro <= 1.0

    def test_missing_visit_key_fails_loudly(self, tmp_path):
        corpus = small_corpus(6, seed=3)
        path = tmp_path / "emb.csv"
        textenc.save_precomputed(path, [("P000000", 1, np.zeros(16))])
        table = textenc.PrecomputedEmbeddings.load(path)
        with pytest.raises(ValidationError, match="visit_index"):
            trainer.train(
                corpus, trainer.DataConfig(), quick_train_cfg(), SMALL_MODEL,
                precomputed=table,
            )
