"""Text embedding stage: a trainable mean-pooled bag-of-words encoder plus the
affine projection into the shared model width, with a loader for precomputed
per-visit embedding files so an external model can take the encoder's place."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass

import numpy as np

from .records import ValidationError

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class TextEncoderConfig:
    embed_dim: int = 64  # width of the pooled text vector
    min_count: int = 2   # vocabulary admission threshold on the training corpus


def validate_text_config(cfg: TextEncoderConfig) -> None:
    if cfg.embed_dim <= 0:
        raise ValidationError(f"embed_dim must be positive, got {cfg.embed_dim}")
    if cfg.min_count < 1:
        raise ValidationError(f"min_count must be >= 1, got {cfg.min_count}")


def tokenize(text: str) -> list[str]:
    """Lowercase alphanumeric runs; whitespace and punctuation are separators."""
    return _TOKEN_RE.findall(text.lower())


def build_vocab(texts, min_count: int = 2) -> dict[str, int]:
    """Words with >= min_count training occurrences, indexed alphabetically."""
    counts: dict[str, int] = {}
    for text in texts:
        for token in tokenize(text):
            counts[token] = counts.get(token, 0) + 1
    words = sorted(w for w, c in counts.items() if c >= min_count)
    return {w: i for i, w in enumerate(words)}


def vocab_from_words(words) -> dict[str, int]:
    return {w: i for i, w in enumerate(words)}


def tokens_to_ids(tokens, vocab: dict[str, int]) -> np.ndarray:
    """Vocabulary lookups; out-of-vocabulary tokens are skipped."""
    return np.asarray([vocab[t] for t in tokens if t in vocab], dtype=np.int64)


def encode_ids(ids: np.ndarray, emb: np.ndarray) -> np.ndarray:
    """Mean of the embedding rows; empty id list gives the zero vector."""
    if ids.size == 0:
        return np.zeros(emb.shape[1], dtype=np.float64)
    return emb[ids].mean(axis=0)


def encode_ids_backward(ids: np.ndarray, d_h: np.ndarray, d_emb: np.ndarray) -> None:
    if ids.size == 0:
        return
    np.add.at(d_emb, ids, d_h / float(ids.size))


def encode_text(text: str, vocab: dict[str, int] | None, emb: np.ndarray) -> np.ndarray:
    if vocab is None:
        raise ValidationError("text encoder vocabulary has not been fitted")
    return encode_ids(tokens_to_ids(tokenize(text), vocab), emb)


def project(h: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map of the pooled text vector into the shared model width."""
    if w.shape[1] != h.shape[-1] or w.shape[0] != b.shape[0]:
        raise ValidationError(
            f"projection shape mismatch: W {w.shape}, b {b.shape}, h {h.shape}"
        )
    return h @ w.T + b


def project_backward(
    h: np.ndarray, w: np.ndarray, d_z: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dW, db, dh) for z = h W^T + b with batched rows."""
    h2 = np.atleast_2d(h)
    dz2 = np.atleast_2d(d_z)
    d_w = dz2.T @ h2
    d_b = dz2.sum(axis=0)
    d_h = dz2 @ w
    return d_w, d_b, d_h.reshape(np.shape(h))


class PrecomputedEmbeddings:
    """Per-(patient_id, visit_index) float64 vectors loaded from CSV.

    File format: header ``patient_id,visit_index,e0..e{dim-1}``, one row per
    visit, float64 text columns.
    """

    def __init__(self, dim: int, table: dict[tuple[str, int], np.ndarray]):
        self.dim = dim
        self._table = table

    def __len__(self) -> int:
        return len(self._table)

    def __contains__(self, key: tuple[str, int]) -> bool:
        return key in self._table

    def lookup(self, patient_id: str, visit_index: int) -> np.ndarray:
        key = (patient_id, int(visit_index))
        try:
            return self._table[key]
        except KeyError:
            raise ValidationError(
                f"no precomputed embedding for (patient_id={key[0]!r}, "
                f"visit_index={key[1]})"
            ) from None

    @classmethod
    def load(cls, path, expected_dim: int | None = None) -> "PrecomputedEmbeddings":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ValidationError(f"{path}: empty embedding file") from None
            if header[:2] != ["patient_id", "visit_index"]:
                raise ValidationError(
                    f"{path}: header must start with patient_id,visit_index"
                )
            dim = len(header) - 2
            if dim <= 0 or header[2:] != [f"e{i}" for i in range(dim)]:
                raise ValidationError(f"{path}: embedding columns must be e0..e{{dim-1}}")
            if expected_dim is not None and dim != expected_dim:
                raise ValidationError(
                    f"{path}: file declares dimension {dim}, configuration "
                    f"expects {expected_dim}"
                )
            table: dict[tuple[str, int], np.ndarray] = {}
            for row_no, row in enumerate(reader, start=2):
                if len(row) != dim + 2:
                    raise ValidationError(f"{path}: row {row_no} has {len(row)} fields")
                key = (row[0], int(row[1]))
                if key in table:
                    raise ValidationError(f"{path}: duplicate key {key} at row {row_no}")
                table[key] = np.asarray([float(v) for v in row[2:]], dtype=np.float64)
        return cls(dim=dim, table=table)


def save_precomputed(path, rows) -> None:
    """Write (patient_id, visit_index, vector) triples in the loadable format."""
    rows = list(rows)
    if not rows:
        raise ValidationError("refusing to write an empty embedding file")
    dim = len(rows[0][2])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "visit_index"] + [f"e{i}" for i in range(dim)])
        for patient_id, visit_index, vec in rows:
            writer.writerow([patient_id, visit_index] + [repr(float(v)) for v in vec])
