"""Synthetic EHR corpus generator with planted, learnable disease structure.

Each patient draws a set of latent chronic conditions (correlated through a
comorbidity matrix); conditions switch on at some visit and persist forever.
Active conditions leave three footprints the model can learn from: disease
vocabulary in the note text, disease-specific abnormal lab items, and longer
stays with shorter gaps as the condition count grows.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .records import LabResult, PatientRecord, ValidationError, Visit

DEFAULT_LABEL_NAMES = (
    "HTN", "ARRHY", "DM", "VALVE", "CHF",
    "CHRNLUNG", "LYTES", "NEURO", "RENLFAIL", "HTNCX",
)

DEFAULT_BASE_RATES = (0.55, 0.45, 0.42, 0.32, 0.36, 0.28, 0.30, 0.22, 0.26, 0.18)

DEFAULT_DISEASE_VOCAB = (
    ("hypertension", "systolic", "amlodipine", "pressure", "lisinopril", "headache"),
    ("arrhythmia", "palpitations", "afib", "amiodarone", "irregular", "flutter"),
    ("diabetes", "glucose", "metformin", "insulin", "hba1c", "polyuria"),
    ("valve", "murmur", "stenosis", "regurgitation", "echocardiogram", "prolapse"),
    ("congestive", "edema", "dyspnea", "furosemide", "orthopnea", "crackles"),
    ("copd", "wheezing", "inhaler", "emphysema", "bronchitis", "hypoxia"),
    ("sodium", "potassium", "hyponatremia", "electrolyte", "dehydration", "magnesium"),
    ("seizure", "neuropathy", "tremor", "gait", "dizziness", "encephalopathy"),
    ("renal", "creatinine", "dialysis", "oliguria", "nephropathy", "uremia"),
    ("hypertensive", "crisis", "malignant", "urgency", "nephrosclerosis", "retinopathy"),
)

DEFAULT_BACKGROUND_VOCAB = (
    "patient", "admitted", "visit", "stable", "exam", "reports", "denies",
    "followup", "review", "plan", "discharged", "home", "care", "routine",
    "history", "noted", "today", "tolerating", "well", "unremarkable",
)

# one characteristic abnormal lab per disease: (item_id, unit, value choices);
# values come from a small fixed set so value tokens stay frequent enough to
# train instead of scattering into hundreds of near-singleton vocabulary rows
DEFAULT_LAB_ITEMS = (
    ("BPSYS", "mmHg", ("158", "172", "194")),
    ("QTC", "ms", ("471", "495", "512")),
    ("GLUCOSE", "mgdL", ("214", "268", "342")),
    ("EF", "pct", ("23", "29", "35")),
    ("BNP", "pgmL", ("487", "642", "815")),
    ("FEV1", "dL", ("11", "14", "18")),
    ("NA", "mEqL", ("121", "124", "127")),
    ("EEGSPIKES", "perMin", ("4", "6", "8")),
    ("CREATININE", "mgdL", ("21", "38", "56")),
    ("RENIN", "ngmL", ("13", "22", "31")),
)


def _default_comorbidity() -> tuple[tuple[float, ...], ...]:
    m = [[0.0] * 10 for _ in range(10)]
    for (i, j), w in {(0, 4): 0.35, (0, 9): 0.30, (2, 8): 0.25}.items():
        m[i][j] = w
        m[j][i] = w
    return tuple(tuple(row) for row in m)


@dataclass(frozen=True)
class GeneratorConfig:
    n_patients: int
    d: int = 10
    label_names: tuple[str, ...] = DEFAULT_LABEL_NAMES
    visit_count_range: tuple[int, int] = (4, 10)
    base_rates: tuple[float, ...] = DEFAULT_BASE_RATES
    comorbidity_matrix: tuple[tuple[float, ...], ...] = field(
        default_factory=_default_comorbidity
    )
    vocab_per_disease: tuple[tuple[str, ...], ...] = DEFAULT_DISEASE_VOCAB
    background_vocab: tuple[str, ...] = DEFAULT_BACKGROUND_VOCAB
    lab_items: tuple[tuple[str, str, int, int], ...] = DEFAULT_LAB_ITEMS
    onset_first_prob: float = 0.6   # latent condition already active at visit 1
    onset_later_prob: float = 0.3   # per-visit onset chance afterwards
    note_mention_prob: float = 0.8  # active disease shows up in this visit's note
    lab_emit_prob: float = 0.55     # abnormal lab emitted per active disease per visit
    note_silent_diseases: tuple[int, ...] = (3, 6)  # lab-diagnosed only (VALVE, LYTES)
    words_per_note: tuple[int, int] = (10, 15)
    disease_word_frac: float = 0.9
    seed: int = 0


def validate_generator_config(cfg: GeneratorConfig) -> None:
    if cfg.n_patients < 1:
        raise ValidationError(f"n_patients must be >= 1, got {cfg.n_patients}")
    if cfg.d < 1:
        raise ValidationError(f"d must be >= 1, got {cfg.d}")
    for name, seq in (
        ("label_names", cfg.label_names),
        ("base_rates", cfg.base_rates),
        ("vocab_per_disease", cfg.vocab_per_disease),
        ("lab_items", cfg.lab_items),
    ):
        if len(seq) != cfg.d:
            raise ValidationError(f"{name} must have {cfg.d} entries, got {len(seq)}")
    if any(not 0.0 <= r <= 1.0 for r in cfg.base_rates):
        raise ValidationError("base_rates must lie in [0, 1]")
    lo, hi = cfg.visit_count_range
    if lo < 2 or hi < lo:
        raise ValidationError(
            f"visit_count_range must satisfy 2 <= min <= max, got {cfg.visit_count_range}"
        )
    m = cfg.comorbidity_matrix
    if len(m) != cfg.d or any(len(row) != cfg.d for row in m):
        raise ValidationError(f"comorbidity_matrix must be {cfg.d}x{cfg.d}")
    for i in range(cfg.d):
        for j in range(cfg.d):
            if m[i][j] < 0.0:
                raise ValidationError("comorbidity_matrix must be non-negative")
            if m[i][j] != m[j][i]:
                raise ValidationError("comorbidity_matrix must be symmetric")
    for p_name in (
        "onset_first_prob",
        "onset_later_prob",
        "note_mention_prob",
        "lab_emit_prob",
        "disease_word_frac",
    ):
        v = getattr(cfg, p_name)
        if not 0.0 <= v <= 1.0:
            raise ValidationError(f"{p_name} must be in [0, 1], got {v}")
    for item in cfg.lab_items:
        if len(item) != 3 or not item[2]:
            raise ValidationError(
                f"lab_items entries must be (item_id, unit, value choices): {item}"
            )
    if any(not 0 <= j < cfg.d for j in cfg.note_silent_diseases):
        raise ValidationError("note_silent_diseases indices out of range")
    wlo, whi = cfg.words_per_note
    if wlo < 0 or whi < wlo:
        raise ValidationError(f"words_per_note must satisfy 0 <= min <= max, got {cfg.words_per_note}")
    if cfg.seed < 0:
        raise ValidationError(f"seed must be non-negative, got {cfg.seed}")


def _sample_latents(rng: np.random.Generator, cfg: GeneratorConfig) -> list[bool]:
    """Bernoulli draw per disease; earlier active diseases boost later ones
    through the comorbidity weights (p' = p + w * (1 - p))."""
    latent = [False] * cfg.d
    for j in range(cfg.d):
        p = cfg.base_rates[j]
        for i in range(cfg.d):
            if i != j and latent[i]:
                p = p + cfg.comorbidity_matrix[i][j] * (1.0 - p)
        latent[j] = bool(rng.random() < p)
    return latent


def _note_words(rng, cfg, active_idx):
    lo, hi = cfg.words_per_note
    n_words = int(rng.integers(lo, hi + 1))
    words = []
    for _ in range(n_words):
        if active_idx and rng.random() < cfg.disease_word_frac:
            disease = active_idx[int(rng.integers(len(active_idx)))]
            vocab = cfg.vocab_per_disease[disease]
            words.append(vocab[int(rng.integers(len(vocab)))])
        else:
            words.append(cfg.background_vocab[int(rng.integers(len(cfg.background_vocab)))])
    return " ".join(words)


def _generate_patient(index: int, cfg: GeneratorConfig) -> PatientRecord:
    rng = np.random.default_rng([cfg.seed, index])
    latent = _sample_latents(rng, cfg)
    n_visits = int(rng.integers(cfg.visit_count_range[0], cfg.visit_count_range[1] + 1))
    active = [False] * cfg.d
    visits = []
    admission = int(rng.integers(0, 24 * 365))
    for t in range(n_visits):
        onset_p = cfg.onset_first_prob if t == 0 else cfg.onset_later_prob
        for j in range(cfg.d):
            if latent[j] and not active[j] and rng.random() < onset_p:
                active[j] = True
        active_idx = [j for j in range(cfg.d) if active[j]]
        k = len(active_idx)
        # notes and labs each cover a partial, independently drawn subset of
        # the active conditions, so the two text channels complement each other;
        # note-silent diseases surface only through their lab item
        mentioned_idx = [
            j
            for j in active_idx
            if j not in cfg.note_silent_diseases and rng.random() < cfg.note_mention_prob
        ]
        labs = []
        for j in active_idx:
            if rng.random() < cfg.lab_emit_prob:
                item_id, unit, choices = cfg.lab_items[j]
                value = choices[int(rng.integers(len(choices)))]
                labs.append(LabResult(item_id=item_id, value=value, unit=unit))
        # sicker patients stay longer and come back sooner
        duration = int(np.ceil(np.exp(rng.normal(3.1 + 0.22 * k, 0.5))))
        duration = min(max(duration, 1), 24 * 90)
        if t > 0:
            gap = int(np.ceil(np.exp(rng.normal(6.6 - 0.35 * k, 0.6))))
            gap = min(max(gap, 1), 24 * 400)
            admission = visits[-1].discharge + gap
        visits.append(
            Visit(
                admission=admission,
                discharge=admission + duration,
                note_text=_note_words(rng, cfg, mentioned_idx),
                lab_results=tuple(labs),
                labels=tuple(int(a) for a in active),
            )
        )
    return PatientRecord(patient_id=f"P{index:06d}", visits=tuple(visits))


def generate(cfg: GeneratorConfig) -> list[PatientRecord]:
    """Deterministic corpus for a fixed config (per-patient derived seeds)."""
    validate_generator_config(cfg)
    return [_generate_patient(i, cfg) for i in range(cfg.n_patients)]


def prevalence_stats(records, label_names=None) -> list[dict]:
    """Patient- and visit-level counts per label, ordered by label index."""
    records = list(records)
    if not records:
        raise ValidationError("no records to summarize")
    d = len(records[0].visits[0].labels) if records[0].visits else 0
    names = list(label_names) if label_names is not None else [str(i) for i in range(d)]
    if len(names) != d:
        raise ValidationError(f"expected {d} label names, got {len(names)}")
    patient_counts = [0] * d
    visit_counts = [0] * d
    n_visits = 0
    for record in records:
        seen = [False] * d
        for visit in record.visits:
            n_visits += 1
            for j, bit in enumerate(visit.labels):
                if bit:
                    visit_counts[j] += 1
                    seen[j] = True
        for j in range(d):
            if seen[j]:
                patient_counts[j] += 1
    return [
        {
            "label": j,
            "name": names[j],
            "patients": patient_counts[j],
            "visits": visit_counts[j],
            "patient_prevalence": patient_counts[j] / len(records),
            "visit_prevalence": visit_counts[j] / n_visits if n_visits else 0.0,
        }
        for j in range(d)
    ]


def write_stats_csv(stats: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["label", "name", "patients", "visits", "patient_prevalence", "visit_prevalence"]
        )
        for row in stats:
            writer.writerow(
                [
                    row["label"],
                    row["name"],
                    row["patients"],
                    row["visits"],
                    repr(row["patient_prevalence"]),
                    repr(row["visit_prevalence"]),
                ]
            )
