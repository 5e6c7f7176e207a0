import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ehrfuse.records import LabResult, PatientRecord, Visit


def make_visit(admission, discharge, labels, note="", labs=()):
    return Visit(
        admission=admission,
        discharge=discharge,
        note_text=note,
        lab_results=tuple(LabResult(*lab) for lab in labs),
        labels=tuple(labels),
    )


def make_record(patient_id, visit_specs):
    """visit_specs: list of (admission, discharge, labels[, note[, labs]])."""
    return PatientRecord(
        patient_id=patient_id,
        visits=tuple(make_visit(*spec) for spec in visit_specs),
    )


@pytest.fixture
def two_visit_record():
    return make_record(
        "p1",
        [
            (0, 72, (1, 0, 0), "chest pain noted", (("Creatinine", "2.1", "mg/dL"),)),
            (100, 130, (1, 1, 0), "followup stable"),
        ],
    )
