"""Training loop, evaluation, finite-difference gradient checking, and
checkpoint persistence for the fused visit-sequence model."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import losses as losses_mod
from . import metrics as metrics_mod
from . import model as model_mod
from . import records as records_mod
from . import textenc, tst
from .fusion import NumericalError
from .params import ParameterStore
from .records import (
    ABLATION_FULL,
    ABLATIONS,
    DEFAULT_HF_INDEX,
    TARGET_CURRENT,
    TASK_HEART_FAILURE,
    TASK_MULTILABEL,
    ScalerParams,
    ValidationError,
)

OPTIMIZER_ADAM = "adam"
OPTIMIZER_SGD = "sgd"

CHECKPOINT_MAGIC = b"EHRF"
CHECKPOINT_VERSION = 1

DEFAULT_K_LIST = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    ablation: str = ABLATION_FULL
    optimizer: str = OPTIMIZER_ADAM
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: losses_mod.LossConfig = field(default_factory=losses_mod.LossConfig)


@dataclass(frozen=True)
class DataConfig:
    """How VisitSamples are built from records, and the split protocol."""

    task: str = TASK_MULTILABEL
    target: str = TARGET_CURRENT
    hf_index: int = DEFAULT_HF_INDEX
    train_fraction: float = 0.8  # patient-level split ratio (split by the caller)


def validate_train_config(cfg: TrainConfig) -> None:
    if cfg.learning_rate < 0:
        raise ValidationError(f"learning_rate must be >= 0, got {cfg.learning_rate}")
    if cfg.epochs < 0:
        raise ValidationError(f"epochs must be >= 0, got {cfg.epochs}")
    if cfg.batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {cfg.batch_size}")
    if cfg.ablation not in ABLATIONS:
        raise ValidationError(f"unknown ablation {cfg.ablation!r}")
    if cfg.optimizer not in (OPTIMIZER_ADAM, OPTIMIZER_SGD):
        raise ValidationError(f"unknown optimizer {cfg.optimizer!r}")
    losses_mod.validate_loss_config(cfg.loss)


class AdamOptimizer:
    """Adam with bias correction; one slot pair per trainable array."""

    def __init__(self, store: ParameterStore):
        self.m = {n: np.zeros_like(store[n]) for n in store.names(trainable_only=True)}
        self.v = {n: np.zeros_like(store[n]) for n in store.names(trainable_only=True)}
        self.t = 0

    def step(self, store: ParameterStore, cfg: TrainConfig) -> None:
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name in self.m:
            g = store.grad(name)
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            store[name][...] -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


class SGDOptimizer:
    def __init__(self, store: ParameterStore):
        pass

    def step(self, store: ParameterStore, cfg: TrainConfig) -> None:
        for name in store.names(trainable_only=True):
            store[name][...] -= cfg.learning_rate * store.grad(name)


def _make_optimizer(store: ParameterStore, cfg: TrainConfig):
    if cfg.optimizer == OPTIMIZER_ADAM:
        return AdamOptimizer(store)
    return SGDOptimizer(store)


@dataclass
class TrainedModel:
    """Everything needed to reproduce forward passes bit for bit."""

    model_cfg: model_mod.ModelConfig
    train_cfg: TrainConfig
    data_cfg: DataConfig
    store: ParameterStore
    vocab_words: tuple[str, ...]
    scaler: ScalerParams
    rng_state: dict
    epoch: int
    corpus_labels: int  # label width of the raw corpus (pre task narrowing)
    text_mode: str = "builtin"  # "builtin" or "precomputed"

    @property
    def vocab(self) -> dict[str, int] | None:
        if self.text_mode == "precomputed":
            return None
        return textenc.vocab_from_words(self.vocab_words)

    def pos_table(self) -> np.ndarray:
        return tst.sinusoidal_encoding(self.model_cfg.tst.max_len, self.model_cfg.d_model)


def _n_output_labels(task: str, corpus_labels: int) -> int:
    return 1 if task == TASK_HEART_FAILURE else corpus_labels


def build_training_samples(records, data_cfg: DataConfig, ablation: str):
    return records_mod.build_dataset(
        records,
        task=data_cfg.task,
        target=data_cfg.target,
        ablation=ablation,
        hf_index=data_cfg.hf_index,
    )


def train(
    train_records,
    data_cfg: DataConfig = DataConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    model_cfg: model_mod.ModelConfig | None = None,
    eval_records=None,
    precomputed: textenc.PrecomputedEmbeddings | None = None,
):
    """Fit the full pipeline on the training records.

    Fits the scaler and vocabulary on the training split only, then runs
    epochs of shuffled mini-batches with the hybrid objective. Returns
    (TrainedModel, history_rows, CohortReport); history rows carry per-epoch
    loss and metrics for the train split and, when given, the eval split.
    """
    validate_train_config(train_cfg)
    if precomputed is not None and train_cfg.ablation in ("no_text", "no_labtext"):
        raise ValidationError(
            "text ablations cannot be combined with precomputed embeddings"
        )
    train_records = list(train_records)
    if not train_records:
        raise ValidationError("no training records")
    corpus_labels = records_mod.validate_record(train_records[0])
    samples, cohort = build_training_samples(train_records, data_cfg, train_cfg.ablation)
    if not samples:
        raise ValidationError("cohort filtering left no training samples")

    if model_cfg is None:
        model_cfg = model_mod.ModelConfig(
            n_labels=_n_output_labels(data_cfg.task, corpus_labels)
        )
    model_mod.validate_model_config(model_cfg)
    if precomputed is not None:
        model_cfg = replace(
            model_cfg, text=replace(model_cfg.text, embed_dim=precomputed.dim)
        )

    scaler = records_mod.fit_minmax_scaler(samples)
    if precomputed is None:
        vocab = textenc.build_vocab(
            (s.text for s in samples), model_cfg.text.min_count
        )
    else:
        vocab = None
    rng = np.random.default_rng(train_cfg.seed)
    store = model_mod.init_parameters(model_cfg, len(vocab or {}), rng)
    prepared = model_mod.prepare_samples(samples, vocab, scaler, model_cfg, precomputed)
    pos_table = tst.sinusoidal_encoding(model_cfg.tst.max_len, model_cfg.d_model)
    optimizer = _make_optimizer(store, train_cfg)

    eval_prepared = None
    if eval_records is not None:
        eval_samples, _ = build_training_samples(eval_records, data_cfg, train_cfg.ablation)
        eval_prepared = model_mod.prepare_samples(
            eval_samples, vocab, scaler, model_cfg, precomputed
        )

    history = []
    n = len(prepared)
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for b_start in range(0, n, train_cfg.batch_size):
            batch = [prepared[i] for i in order[b_start : b_start + train_cfg.batch_size]]
            targets = model_mod.targets_matrix(batch)
            store.zero_grads()
            probs, _, logits, cache = model_mod.forward_batch(
                batch, store, model_cfg, pos_table,
                ablation=train_cfg.ablation, train_mode=True, rng=rng,
            )
            loss = losses_mod.combined_loss(targets, probs, train_cfg.loss, logits)
            if not np.isfinite(loss):
                norms = ", ".join(
                    f"{k}={v:.3e}" for k, v in sorted(store.value_norms().items())
                )
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch {b_start // train_cfg.batch_size}; "
                    f"parameter norms: {norms}"
                )
            epoch_loss += loss
            d_logits = losses_mod.combined_logit_grad(targets, probs, logits, train_cfg.loss)
            model_mod.backward_batch(d_logits, cache, store, model_cfg, train_cfg.ablation)
            optimizer.step(store, train_cfg)
        history.append(
            _history_row(
                epoch, "train", epoch_loss / n, prepared, store, model_cfg,
                pos_table, train_cfg,
            )
        )
        if eval_prepared is not None:
            eval_loss, report = _eval_pass(
                eval_prepared, store, model_cfg, pos_table, train_cfg
            )
            history.append(
                {
                    "epoch": epoch,
                    "split": "test",
                    "loss": eval_loss,
                    "f1_macro": report.f1_macro,
                    "accuracy": report.accuracy,
                }
            )

    trained = TrainedModel(
        model_cfg=model_cfg,
        train_cfg=train_cfg,
        data_cfg=data_cfg,
        store=store,
        vocab_words=tuple(sorted(vocab, key=vocab.get)) if vocab is not None else (),
        scaler=scaler,
        rng_state=rng.bit_generator.state,
        epoch=train_cfg.epochs,
        corpus_labels=corpus_labels,
        text_mode="precomputed" if precomputed is not None else "builtin",
    )
    return trained, history, cohort


def _history_row(epoch, split, mean_loss, prepared, store, model_cfg, pos_table, train_cfg):
    _, report = _eval_pass(prepared, store, model_cfg, pos_table, train_cfg)
    return {
        "epoch": epoch,
        "split": split,
        "loss": mean_loss,
        "f1_macro": report.f1_macro,
        "accuracy": report.accuracy,
    }


def _eval_pass(prepared, store, model_cfg, pos_table, train_cfg, chunk: int = 64):
    """Dropout-free forward over prepared samples -> (mean loss, MetricReport)."""
    all_probs, all_bits = [], []
    total_loss = 0.0
    for start in range(0, len(prepared), chunk):
        batch = prepared[start : start + chunk]
        targets = model_mod.targets_matrix(batch)
        probs, bits, logits, _ = model_mod.forward_batch(
            batch, store, model_cfg, pos_table,
            ablation=train_cfg.ablation, train_mode=False,
        )
        total_loss += losses_mod.combined_loss(targets, probs, train_cfg.loss, logits)
        all_probs.append(probs)
        all_bits.append(bits)
    pred_set = metrics_mod.PredictionSet(
        targets=model_mod.targets_matrix(prepared),
        scores=np.concatenate(all_probs),
        bits=np.concatenate(all_bits),
    )
    report = metrics_mod.classification_metrics(pred_set)
    return total_loss / len(prepared), report


def predictions(trained: TrainedModel, records, precomputed=None) -> tuple[list, metrics_mod.PredictionSet]:
    """Eval-mode predictions for a corpus -> (samples, PredictionSet)."""
    samples, _ = build_training_samples(records, trained.data_cfg, trained.train_cfg.ablation)
    if not samples:
        raise ValidationError("no samples to predict on")
    got = len(samples[0].target)
    if got != trained.model_cfg.n_labels:
        raise ValidationError(
            f"dataset yields {got} labels per sample, checkpoint expects "
            f"{trained.model_cfg.n_labels}"
        )
    prepared = model_mod.prepare_samples(
        samples, trained.vocab, trained.scaler, trained.model_cfg, precomputed
    )
    pos_table = trained.pos_table()
    all_probs, all_bits = [], []
    for start in range(0, len(prepared), 64):
        batch = prepared[start : start + 64]
        probs, bits, _, _ = model_mod.forward_batch(
            batch, trained.store, trained.model_cfg, pos_table,
            ablation=trained.train_cfg.ablation, train_mode=False,
        )
        all_probs.append(probs)
        all_bits.append(bits)
    pred_set = metrics_mod.PredictionSet(
        targets=model_mod.targets_matrix(prepared),
        scores=np.concatenate(all_probs),
        bits=np.concatenate(all_bits),
    )
    return samples, pred_set


def evaluate(
    trained: TrainedModel,
    records,
    k_list=DEFAULT_K_LIST,
    precomputed=None,
    per_label: bool = False,
    subset_accuracy: bool = False,
) -> metrics_mod.MetricReport:
    """MetricReport over a corpus: classification block, Recall@k/NDCG@k for
    each feasible k, and AUC for the binary task."""
    _, pred_set = predictions(trained, records, precomputed)
    return metrics_mod.evaluate_predictions(
        pred_set,
        k_list=k_list,
        with_auc=trained.model_cfg.n_labels == 1,
        per_label=per_label,
        subset_accuracy=subset_accuracy,
    )


def export_embeddings(trained: TrainedModel, records, precomputed=None) -> list[dict]:
    """Fusion-head hidden vectors per sample, tagged with a dominant label
    (lowest-index positive target; 'none' when the target is all-zero)."""
    samples, _ = build_training_samples(records, trained.data_cfg, trained.train_cfg.ablation)
    if not samples:
        raise ValidationError("no samples to export")
    prepared = model_mod.prepare_samples(
        samples, trained.vocab, trained.scaler, trained.model_cfg, precomputed
    )
    pos_table = trained.pos_table()
    rows = []
    for start in range(0, len(prepared), 64):
        batch = prepared[start : start + 64]
        _, _, _, cache = model_mod.forward_batch(
            batch, trained.store, trained.model_cfg, pos_table,
            ablation=trained.train_cfg.ablation, train_mode=False,
        )
        for i, s in enumerate(batch):
            positives = np.nonzero(s.target == 1)[0]
            rows.append(
                {
                    "patient_id": s.patient_id,
                    "visit_index": s.visit_index,
                    "vector": cache.hidden[i].copy(),
                    "dominant_label": int(positives[0]) if positives.size else "none",
                }
            )
    return rows


def write_embedding_csv(rows: list[dict], path) -> None:
    if not rows:
        raise ValidationError("no embedding rows to write")
    dim = len(rows[0]["vector"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["patient_id", "visit_index"] + [f"h{i}" for i in range(dim)] + ["dominant_label"]
        )
        for row in rows:
            writer.writerow(
                [row["patient_id"], row["visit_index"]]
                + [repr(float(v)) for v in row["vector"]]
                + [row["dominant_label"]]
            )


def frequency_prior_scores(samples) -> np.ndarray:
    """Per-label prevalence over the given samples (the baseline scorer)."""
    targets = np.asarray([s.target for s in samples], dtype=np.float64)
    if targets.size == 0:
        raise ValidationError("no samples for the frequency prior")
    return targets.mean(axis=0)


def baseline_prediction_set(prior: np.ndarray, samples) -> metrics_mod.PredictionSet:
    targets = np.asarray([s.target for s in samples], dtype=np.int64)
    scores = np.tile(prior, (len(samples), 1))
    bits = (scores >= 0.5).astype(np.int64)
    return metrics_mod.PredictionSet(targets=targets, scores=scores, bits=bits)


def write_training_log(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "loss", "f1_macro", "accuracy"])
        for row in history:
            writer.writerow(
                [
                    row["epoch"],
                    row["split"],
                    repr(float(row["loss"])),
                    repr(float(row["f1_macro"])),
                    repr(float(row["accuracy"])),
                ]
            )


# Gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_coordinate: tuple[str, int] | None
    n_checked: int
    skipped: list[tuple[str, int]]
    group_max: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def gradient_check(
    store: ParameterStore,
    prepared_batch,
    model_cfg: model_mod.ModelConfig,
    loss_cfg: losses_mod.LossConfig,
    ablation: str = ABLATION_FULL,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    abs_tol: float = 1e-8,
) -> GradCheckReport:
    """Central finite differences over every trainable coordinate.

    Coordinates whose perturbation changes the loss's piecewise region (hinge
    active pairs or BCE clamps) are reported as skipped rather than failed.
    Differences below abs_tol count as exact: at step h the FD estimate
    carries ~eps*|loss|/h of roundoff, so the relative test is meaningless
    for near-zero gradients (abs_tol sits two orders above that floor).
    Requires dropout disabled so the forward pass is deterministic.
    """
    if model_cfg.tst.dropout != 0.0:
        raise ValidationError("gradient_check requires dropout = 0")
    pos_table = tst.sinusoidal_encoding(model_cfg.tst.max_len, model_cfg.d_model)
    targets = model_mod.targets_matrix(prepared_batch)

    def loss_and_signature():
        probs, _, logits, cache = model_mod.forward_batch(
            prepared_batch, store, model_cfg, pos_table, ablation=ablation, train_mode=False
        )
        loss = losses_mod.combined_loss(targets, probs, loss_cfg, logits)
        sig = losses_mod.activity_signature(targets, probs, logits, loss_cfg)
        return loss, sig, probs, logits, cache

    store.zero_grads()
    _, _, probs, logits, cache = loss_and_signature()
    d_logits = losses_mod.combined_logit_grad(targets, probs, logits, loss_cfg)
    model_mod.backward_batch(d_logits, cache, store, model_cfg, ablation)
    analytic = store.copy_grads()

    names = store.names(trainable_only=True)
    if ablation == "no_time":
        names = [n for n in names if not n.startswith("tst.")]
    max_rel = 0.0
    worst = None
    n_checked = 0
    skipped: list[tuple[str, int]] = []
    group_max: dict[str, float] = {}
    for name in names:
        arr = store[name]
        flat = arr.reshape(-1)
        group_best = 0.0
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            loss_plus, sig_plus, *_ = loss_and_signature()
            flat[idx] = orig - step
            loss_minus, sig_minus, *_ = loss_and_signature()
            flat[idx] = orig
            if sig_plus != sig_minus:
                skipped.append((name, idx))
                continue
            fd = (loss_plus - loss_minus) / (2.0 * step)
            a = analytic[name].reshape(-1)[idx]
            diff = abs(a - fd)
            rel = 0.0 if diff <= abs_tol else diff / max(abs(a), abs(fd))
            n_checked += 1
            if rel > group_best:
                group_best = rel
            if rel > max_rel:
                max_rel = rel
                worst = (name, idx)
        group_max[name] = group_best
    return GradCheckReport(
        max_rel_err=max_rel,
        worst_coordinate=worst,
        n_checked=n_checked,
        skipped=skipped,
        group_max=group_max,
        tolerance=tolerance,
    )


# Checkpoint format, version 1:
#   magic "EHRF" | u32 version | u64 header_len | header JSON (utf-8)
#   u32 n_arrays, then per array:
#   u16 name_len | name utf-8 | u8 trainable | u8 ndim | u64 * ndim dims |
#   float64 little-endian row-major data


def save_checkpoint(trained: TrainedModel, path) -> None:
    header = {
        "model_cfg": {
            "n_labels": trained.model_cfg.n_labels,
            "text": asdict(trained.model_cfg.text),
            "tst": asdict(trained.model_cfg.tst),
            "fusion_depth": trained.model_cfg.fusion_depth,
        },
        "train_cfg": asdict(trained.train_cfg),
        "data_cfg": asdict(trained.data_cfg),
        "vocab": list(trained.vocab_words),
        "scaler": {"mins": list(trained.scaler.mins), "maxs": list(trained.scaler.maxs)},
        "rng_state": trained.rng_state,
        "epoch": trained.epoch,
        "corpus_labels": trained.corpus_labels,
        "text_mode": trained.text_mode,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    names = trained.store.names()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = trained.store[name]
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", 1 if trained.store.is_trainable(name) else 0))
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> TrainedModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValidationError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValidationError(f"{path}: unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        (n_arrays,) = struct.unpack("<I", fh.read(4))
        store = ParameterStore()
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (trainable,) = struct.unpack("<B", fh.read(1))
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape)
            store.add(name, data.astype(np.float64), trainable=bool(trainable))
    model_cfg = model_mod.ModelConfig(
        n_labels=header["model_cfg"]["n_labels"],
        text=textenc.TextEncoderConfig(**header["model_cfg"]["text"]),
        tst=tst.TSTConfig(**header["model_cfg"]["tst"]),
        fusion_depth=header["model_cfg"]["fusion_depth"],
    )
    tc = dict(header["train_cfg"])
    tc["loss"] = losses_mod.LossConfig(**tc["loss"])
    train_cfg = TrainConfig(**tc)
    data_cfg = DataConfig(**header["data_cfg"])
    scaler = ScalerParams(
        mins=tuple(header["scaler"]["mins"]), maxs=tuple(header["scaler"]["maxs"])
    )
    return TrainedModel(
        model_cfg=model_cfg,
        train_cfg=train_cfg,
        data_cfg=data_cfg,
        store=store,
        vocab_words=tuple(header["vocab"]),
        scaler=scaler,
        rng_state=header["rng_state"],
        epoch=header["epoch"],
        corpus_labels=header["corpus_labels"],
        text_mode=header["text_mode"],
    )
