"""End-to-end model assembly: text embedding, temporal encoder, and fusion head
wired into a single forward/backward pass over a batch of prepared samples."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fusion as fusion_mod
from . import textenc, tst
from .params import ParameterStore, uniform_fan_in
from .records import (
    ABLATION_NO_TIME,
    ABLATIONS,
    ValidationError,
    VisitSample,
    apply_scaler,
)


@dataclass(frozen=True)
class ModelConfig:
    n_labels: int
    text: textenc.TextEncoderConfig = field(default_factory=textenc.TextEncoderConfig)
    tst: tst.TSTConfig = field(default_factory=tst.TSTConfig)
    fusion_depth: int = 1

    @property
    def d_model(self) -> int:
        return self.tst.d_model


def validate_model_config(cfg: ModelConfig) -> None:
    if cfg.n_labels < 1:
        raise ValidationError(f"n_labels must be >= 1, got {cfg.n_labels}")
    textenc.validate_text_config(cfg.text)
    tst.validate_tst_config(cfg.tst)
    if cfg.fusion_depth < 1:
        raise ValidationError(f"fusion_depth must be >= 1, got {cfg.fusion_depth}")


def init_parameters(
    cfg: ModelConfig, vocab_size: int, rng: np.random.Generator
) -> ParameterStore:
    """Build the full store. vocab_size 0 means text vectors come precomputed
    and no embedding table is trained."""
    validate_model_config(cfg)
    store = ParameterStore()
    d, d_text = cfg.d_model, cfg.text.embed_dim
    if vocab_size > 0:
        store.add("text.emb", uniform_fan_in(rng, (vocab_size, d_text), d_text))
    store.add("text.proj_w", uniform_fan_in(rng, (d, d_text), d_text))
    store.add("text.proj_b", np.zeros(d))
    tst.init_tst_params(store, cfg.tst, rng)
    fusion_mod.init_fusion_params(store, d, cfg.n_labels, cfg.fusion_depth, rng)
    return store


@dataclass
class PreparedSample:
    patient_id: str
    visit_index: int
    token_ids: np.ndarray | None   # built-in encoder path
    h_text: np.ndarray | None      # precomputed-embedding path
    history: np.ndarray            # (w, 2) scaled, w <= max_len
    target: np.ndarray             # (n_labels,) float64 bits


def prepare_samples(
    samples: list[VisitSample],
    vocab: dict[str, int] | None,
    scaler,
    cfg: ModelConfig,
    precomputed: textenc.PrecomputedEmbeddings | None = None,
) -> list[PreparedSample]:
    """Tokenize/look up text, scale and truncate histories, fix targets."""
    if precomputed is not None and precomputed.dim != cfg.text.embed_dim:
        raise ValidationError(
            f"precomputed embedding dimension {precomputed.dim} does not match "
            f"configured embed_dim {cfg.text.embed_dim}"
        )
    prepared = []
    for s in samples:
        if len(s.target) != cfg.n_labels:
            raise ValidationError(
                f"sample {s.patient_id}/{s.visit_index} has {len(s.target)} target "
                f"labels, model expects {cfg.n_labels}"
            )
        if precomputed is not None:
            token_ids = None
            h_text = precomputed.lookup(s.patient_id, s.visit_index)
        else:
            if vocab is None:
                raise ValidationError("no vocabulary fitted and no precomputed embeddings")
            token_ids = textenc.tokens_to_ids(textenc.tokenize(s.text), vocab)
            h_text = None
        history = apply_scaler(scaler, s.temporal_history)[-cfg.tst.max_len :]
        prepared.append(
            PreparedSample(
                patient_id=s.patient_id,
                visit_index=s.visit_index,
                token_ids=token_ids,
                h_text=h_text,
                history=np.ascontiguousarray(history),
                target=np.asarray(s.target, dtype=np.float64),
            )
        )
    return prepared


def targets_matrix(batch: list[PreparedSample]) -> np.ndarray:
    return np.stack([s.target for s in batch])


@dataclass
class ForwardCache:
    batch: list[PreparedSample]
    h_pooled: np.ndarray
    tst_cache: object | None
    fusion_cache: object
    hidden: np.ndarray


def forward_batch(
    batch: list[PreparedSample],
    store: ParameterStore,
    cfg: ModelConfig,
    pos_table: np.ndarray,
    ablation: str = "full",
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
):
    """Returns (probs, bits, logits, cache) for a batch of prepared samples."""
    if ablation not in ABLATIONS:
        raise ValidationError(f"unknown ablation {ablation!r}")
    n = len(batch)
    h_pooled = np.zeros((n, cfg.text.embed_dim), dtype=np.float64)
    for i, s in enumerate(batch):
        if s.h_text is not None:
            h_pooled[i] = s.h_text
        elif s.token_ids is not None and s.token_ids.size > 0:
            h_pooled[i] = store["text.emb"][s.token_ids].mean(axis=0)
    z_a = textenc.project(h_pooled, store["text.proj_w"], store["text.proj_b"])
    if ablation == ABLATION_NO_TIME:
        z_b = np.zeros((n, cfg.d_model), dtype=np.float64)
        tst_cache = None
    else:
        z_b, tst_cache = tst.tst_forward(
            [s.history for s in batch], store, cfg.tst, pos_table, train_mode, rng
        )
    z_in = fusion_mod.fuse(z_a, z_b)
    hidden, logits, probs, bits, fusion_cache = fusion_mod.fusion_forward(
        z_in, store, cfg.fusion_depth
    )
    cache = ForwardCache(
        batch=batch,
        h_pooled=h_pooled,
        tst_cache=tst_cache,
        fusion_cache=fusion_cache,
        hidden=hidden,
    )
    return probs, bits, logits, cache


def backward_batch(
    d_logits: np.ndarray,
    cache: ForwardCache,
    store: ParameterStore,
    cfg: ModelConfig,
    ablation: str = "full",
) -> None:
    """Accumulate gradients for every trainable group into the store."""
    d_z_in = fusion_mod.fusion_backward(d_logits, cache.fusion_cache, store, cfg.fusion_depth)
    d = cfg.d_model
    d_z_a = d_z_in[:, :d]
    d_z_b = d_z_in[:, d:]
    if ablation != ABLATION_NO_TIME and cache.tst_cache is not None:
        tst.tst_backward(d_z_b, cache.tst_cache, store, cfg.tst)
    d_w, d_b, d_h = textenc.project_backward(cache.h_pooled, store["text.proj_w"], d_z_a)
    store.grad("text.proj_w")[...] += d_w
    store.grad("text.proj_b")[...] += d_b
    if "text.emb" in store:
        d_emb = store.grad("text.emb")
        for i, s in enumerate(cache.batch):
            if s.token_ids is not None:
                textenc.encode_ids_backward(s.token_ids, d_h[i], d_emb)
