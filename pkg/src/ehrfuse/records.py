"""Patient-visit data model: validation, temporal features, lab-to-text
templating, cohort filtering, patient-level splitting, and min-max scaling."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

TASK_MULTILABEL = "multilabel"
TASK_HEART_FAILURE = "heart_failure"
TASKS = (TASK_MULTILABEL, TASK_HEART_FAILURE)

TARGET_CURRENT = "current"
TARGET_NEXT_VISIT = "next-visit"
TARGETS = (TARGET_CURRENT, TARGET_NEXT_VISIT)

ABLATION_FULL = "full"
ABLATION_NO_TEXT = "no_text"
ABLATION_NO_LABTEXT = "no_labtext"
ABLATION_NO_TIME = "no_time"
ABLATIONS = (ABLATION_FULL, ABLATION_NO_TEXT, ABLATION_NO_LABTEXT, ABLATION_NO_TIME)

DEFAULT_HF_INDEX = 4

N_TEMPORAL_FEATURES = 2  # (duration_hours, gap_hours)

LAB_TEXT_PREFIX = "These are abnormal results recorded: "


class ValidationError(ValueError):
    """An input record, file, or configuration violates its contract."""


@dataclass(frozen=True)
class LabResult:
    item_id: str
    value: str
    unit: str


@dataclass(frozen=True)
class Visit:
    admission: int  # hours since epoch
    discharge: int
    note_text: str
    lab_results: tuple[LabResult, ...]
    labels: tuple[int, ...]


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple[Visit, ...]


@dataclass(frozen=True)
class TemporalFeatures:
    duration_hours: float
    gap_hours: float


@dataclass(frozen=True)
class VisitSample:
    """One training/eval sample: temporal history up to visit t plus the text
    and target of visit t (or of visit t+1 in next-visit mode)."""

    patient_id: str
    visit_index: int  # 1-based position t
    temporal_history: tuple[TemporalFeatures, ...]
    text: str
    target: tuple[int, ...]


def validate_record(record: PatientRecord, n_labels: int | None = None) -> int:
    """Check all PatientRecord invariants.

    Returns the record's label count. Raises ValidationError naming the
    offending visit index on the first violation.
    """
    if not record.patient_id:
        raise ValidationError("record has an empty patient_id")
    d = n_labels
    for i, visit in enumerate(record.visits):
        if visit.discharge < visit.admission:
            raise ValidationError(
                f"patient {record.patient_id} visit {i}: discharge precedes admission"
            )
        if d is None:
            d = len(visit.labels)
        if len(visit.labels) != d:
            raise ValidationError(
                f"patient {record.patient_id} visit {i}: expected {d} labels, "
                f"got {len(visit.labels)}"
            )
        if any(b not in (0, 1) for b in visit.labels):
            raise ValidationError(
                f"patient {record.patient_id} visit {i}: labels must be 0 or 1"
            )
        for lab in visit.lab_results:
            if not lab.item_id:
                raise ValidationError(
                    f"patient {record.patient_id} visit {i}: lab result with empty item_id"
                )
        if i > 0:
            prev = record.visits[i - 1]
            if visit.admission < prev.discharge:
                raise ValidationError(
                    f"patient {record.patient_id} visit {i}: admission overlaps "
                    f"visit {i - 1} (admitted before previous discharge)"
                )
            if visit.admission <= prev.admission:
                raise ValidationError(
                    f"patient {record.patient_id} visit {i}: admissions not strictly increasing"
                )
    return 0 if d is None else d


def derive_temporal_features(record: PatientRecord) -> list[TemporalFeatures]:
    """Per-visit (duration, gap) in hours; the first visit's gap is 0."""
    validate_record(record)
    feats = []
    for i, visit in enumerate(record.visits):
        duration = float(visit.discharge - visit.admission)
        gap = 0.0 if i == 0 else float(visit.admission - record.visits[i - 1].discharge)
        feats.append(TemporalFeatures(duration_hours=duration, gap_hours=gap))
    return feats


def labs_to_text(labs: list[LabResult] | tuple[LabResult, ...]) -> str:
    """Render lab results as one templated sentence; empty input gives ''."""
    if not labs:
        return ""
    parts = [f"ITEMID{lab.item_id}: {lab.value}{lab.unit}" for lab in labs]
    return LAB_TEXT_PREFIX + "; ".join(parts) + ";"


def compose_visit_text(visit: Visit, ablation: str = ABLATION_FULL) -> str:
    """Note text first, then the lab template, separated by one space."""
    note = "" if ablation == ABLATION_NO_TEXT else visit.note_text
    lab_text = "" if ablation == ABLATION_NO_LABTEXT else labs_to_text(visit.lab_results)
    return note + " " + lab_text


def build_samples(
    record: PatientRecord,
    task: str = TASK_MULTILABEL,
    target: str = TARGET_CURRENT,
    ablation: str = ABLATION_FULL,
    hf_index: int = DEFAULT_HF_INDEX,
) -> list[VisitSample]:
    """Expand one patient into per-visit samples.

    Requires the cohort rule (>= 2 visits); use build_dataset to turn the
    violation into an exclusion count instead of an error.
    """
    if task not in TASKS:
        raise ValidationError(f"unknown task {task!r}")
    if target not in TARGETS:
        raise ValidationError(f"unknown target mode {target!r}")
    if ablation not in ABLATIONS:
        raise ValidationError(f"unknown ablation {ablation!r}")
    validate_record(record)
    if len(record.visits) < 2:
        raise ValidationError(
            f"patient {record.patient_id} has {len(record.visits)} visit(s); "
            "cohort rule requires at least 2"
        )
    d = len(record.visits[0].labels)
    if task == TASK_HEART_FAILURE and not 0 <= hf_index < d:
        raise ValidationError(f"hf_index {hf_index} out of range for {d} labels")

    feats = derive_temporal_features(record)
    last_t = len(record.visits) if target == TARGET_CURRENT else len(record.visits) - 1
    samples = []
    for t in range(1, last_t + 1):
        visit = record.visits[t - 1]
        target_visit = visit if target == TARGET_CURRENT else record.visits[t]
        if task == TASK_MULTILABEL:
            target_vec = tuple(target_visit.labels)
        else:
            target_vec = (target_visit.labels[hf_index],)
        samples.append(
            VisitSample(
                patient_id=record.patient_id,
                visit_index=t,
                temporal_history=tuple(feats[:t]),
                text=compose_visit_text(visit, ablation),
                target=target_vec,
            )
        )
    return samples


@dataclass
class CohortReport:
    n_records: int
    n_included: int
    n_excluded: int
    n_samples: int


def build_dataset(records, **build_options) -> tuple[list[VisitSample], CohortReport]:
    """build_samples over a corpus; patients under the cohort rule are counted
    as excluded rather than raising."""
    samples: list[VisitSample] = []
    included = excluded = 0
    for record in records:
        validate_record(record)
        if len(record.visits) < 2:
            excluded += 1
            continue
        samples.extend(build_samples(record, **build_options))
        included += 1
    report = CohortReport(
        n_records=included + excluded,
        n_included=included,
        n_excluded=excluded,
        n_samples=len(samples),
    )
    return samples, report


def write_cohort_csv(report: CohortReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_records", "n_included", "n_excluded", "n_samples"])
        writer.writerow(
            [report.n_records, report.n_included, report.n_excluded, report.n_samples]
        )


def patient_level_split(
    records, train_fraction: float, seed: int
) -> tuple[list[PatientRecord], list[PatientRecord]]:
    """Partition patients (never samples) into train/test, deterministically."""
    records = list(records)
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if len(records) < 2:
        raise ValidationError("patient-level split needs at least 2 patients")
    ids = [r.patient_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate patient_id in corpus")
    order = np.random.default_rng(seed).permutation(len(records))
    n_train = min(max(int(round(train_fraction * len(records))), 1), len(records) - 1)
    train_idx = set(int(i) for i in order[:n_train])
    train = [r for i, r in enumerate(records) if i in train_idx]
    test = [r for i, r in enumerate(records) if i not in train_idx]
    return train, test


@dataclass(frozen=True)
class ScalerParams:
    mins: tuple[float, float]
    maxs: tuple[float, float]


def fit_minmax_scaler(samples) -> ScalerParams:
    """Per-feature min/max over every history row of the training samples."""
    rows = [
        (f.duration_hours, f.gap_hours)
        for sample in samples
        for f in sample.temporal_history
    ]
    if not rows:
        raise ValidationError("cannot fit a scaler on an empty sample set")
    arr = np.asarray(rows, dtype=np.float64)
    return ScalerParams(
        mins=tuple(float(v) for v in arr.min(axis=0)),
        maxs=tuple(float(v) for v in arr.max(axis=0)),
    )


def apply_scaler(params: ScalerParams | None, history) -> np.ndarray:
    """(x - min) / (max - min) per feature, clamped to [0, 1].

    Constant training features map to 0. Returns a (len(history), 2) float64
    matrix ordered (duration, gap).
    """
    if params is None:
        raise ValidationError("scaler has not been fitted")
    x = np.asarray(
        [(f.duration_hours, f.gap_hours) for f in history], dtype=np.float64
    ).reshape(len(history), N_TEMPORAL_FEATURES)
    mins = np.asarray(params.mins, dtype=np.float64)
    span = np.asarray(params.maxs, dtype=np.float64) - mins
    safe_span = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, (x - mins) / safe_span, 0.0)
    return np.clip(scaled, 0.0, 1.0)


# JSONL corpus format: one patient per line.


def record_to_dict(record: PatientRecord) -> dict:
    return {
        "patient_id": record.patient_id,
        "visits": [
            {
                "admission_hours": visit.admission,
                "discharge_hours": visit.discharge,
                "note": visit.note_text,
                "labs": [
                    {"item_id": lab.item_id, "value": lab.value, "unit": lab.unit}
                    for lab in visit.lab_results
                ],
                "labels": list(visit.labels),
            }
            for visit in record.visits
        ],
    }


def record_from_dict(obj: dict) -> PatientRecord:
    try:
        visits = tuple(
            Visit(
                admission=int(v["admission_hours"]),
                discharge=int(v["discharge_hours"]),
                note_text=str(v.get("note", "")),
                lab_results=tuple(
                    LabResult(
                        item_id=str(lab["item_id"]),
                        value=str(lab["value"]),
                        unit=str(lab["unit"]),
                    )
                    for lab in v.get("labs", [])
                ),
                labels=tuple(int(b) for b in v["labels"]),
            )
            for v in obj["visits"]
        )
        return PatientRecord(patient_id=str(obj["patient_id"]), visits=visits)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed record object: {exc}") from exc


def save_records(records, path) -> None:
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record_to_dict(record), sort_keys=True))
            fh.write("\n")


def load_records(path) -> list[PatientRecord]:
    """Parse and validate a JSONL corpus; label counts must agree corpus-wide."""
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: line {line_no} is not valid JSON") from exc
            records.append(record_from_dict(obj))
    n_labels = None
    seen_ids = set()
    for record in records:
        if record.patient_id in seen_ids:
            raise ValidationError(f"duplicate patient_id {record.patient_id!r} in {path}")
        seen_ids.add(record.patient_id)
        got = validate_record(record, n_labels=n_labels)
        if n_labels is None and record.visits:
            n_labels = got
    return records
