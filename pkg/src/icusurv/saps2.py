"""SAPS-II severity scoring: 15 categories, integer points, total in [0, 163].

Numeric bins are half-open and lower-inclusive (a boundary value lands in the
bin that starts there: heart rate exactly 40 scores the 40-69 bin). Two rows
of the published table are implemented in corrected form and documented in
docs/formats.md: temperature scores 3 points at >= 39 C, and BUN uses
28-83 -> 6 with >= 84 -> 10.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SapsMeasurements",
    "SapsScore",
    "CATEGORY_ORDER",
    "CHRONIC_DISEASES",
    "ADMISSION_TYPES",
    "MAX_TOTAL",
    "score_component",
    "score_total",
    "risk_factor_vector",
    "category_point_values",
]

CHRONIC_DISEASES = ("none", "metastatic_cancer", "hematologic_malignancy", "aids")
ADMISSION_TYPES = ("scheduled_surgical", "medical", "unscheduled_surgical")

# numeric categories: (thresholds, points); value < t[0] -> p[0],
# t[k-1] <= value < t[k] -> p[k], value >= t[-1] -> p[-1]
_NUMERIC_BINS = {
    "age": ((40, 60, 70, 75, 80), (0, 7, 12, 15, 16, 18)),
    "heart_rate": ((40, 70, 120, 160), (11, 2, 0, 4, 7)),
    "systolic_bp": ((70, 100, 200), (13, 5, 0, 2)),
    "temperature": ((39,), (0, 3)),
    "pao2_fio2": ((100, 200), (11, 9, 6)),
    "bun": ((28, 84), (0, 6, 10)),
    "urine_output": ((500, 1000), (11, 4, 0)),
    "sodium": ((125, 145), (5, 0, 1)),
    "potassium": ((3.0, 5.0), (3, 0, 3)),
    "bicarbonate": ((15, 20), (6, 3, 0)),
    "bilirubin": ((4.0, 6.0), (0, 4, 9)),
    "wbc": ((1.0, 20.0), (12, 0, 3)),
    "gcs": ((6, 9, 11, 14), (26, 13, 7, 5, 0)),
}

_ENUM_POINTS = {
    "chronic_disease": dict(zip(CHRONIC_DISEASES, (0, 9, 10, 17))),
    "admission_type": dict(zip(ADMISSION_TYPES, (0, 6, 8))),
}

CATEGORY_ORDER = (
    "age",
    "heart_rate",
    "systolic_bp",
    "temperature",
    "pao2_fio2",
    "bun",
    "urine_output",
    "sodium",
    "potassium",
    "bicarbonate",
    "bilirubin",
    "wbc",
    "gcs",
    "chronic_disease",
    "admission_type",
)

MAX_TOTAL = 163


def category_point_values(category: str) -> set:
    """All point values the category can emit."""
    if category in _NUMERIC_BINS:
        return set(_NUMERIC_BINS[category][1])
    if category in _ENUM_POINTS:
        return set(_ENUM_POINTS[category].values())
    if category == "pao2_fio2":
        return set(_NUMERIC_BINS["pao2_fio2"][1]) | {0}
    raise ValueError(f"unknown category {category!r}")


def score_component(category: str, value) -> int:
    """Points for one category. pao2_fio2 takes None to mean no ventilation."""
    if category == "pao2_fio2" and value is None:
        return 0
    if category in _ENUM_POINTS:
        table = _ENUM_POINTS[category]
        if value not in table:
            raise ValueError(
                f"{category}: expected one of {sorted(table)}, got {value!r}"
            )
        return table[value]
    if category not in _NUMERIC_BINS:
        raise ValueError(f"unknown category {category!r}")
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ValueError(f"{category}: value {value!r} is not numeric") from None
    if not np.isfinite(v) or v < 0:
        raise ValueError(f"{category}: value must be finite and >= 0, got {value!r}")
    if category == "gcs" and not (v.is_integer() and 3 <= v <= 15):
        raise ValueError(f"gcs: expected an integer in [3, 15], got {value!r}")
    thresholds, points = _NUMERIC_BINS[category]
    return points[bisect_right(thresholds, v)]


@dataclass(frozen=True)
class SapsMeasurements:
    """Raw inputs for one patient. pao2_fio2 is ignored unless ventilated."""

    age: float
    heart_rate: float
    systolic_bp: float
    temperature: float
    ventilated: bool
    pao2_fio2: float | None
    bun: float
    urine_output: float
    sodium: float
    potassium: float
    bicarbonate: float
    bilirubin: float
    wbc: float
    gcs: int
    chronic_disease: str
    admission_type: str

    def __post_init__(self):
        if self.ventilated and self.pao2_fio2 is None:
            raise ValueError("pao2_fio2: required when ventilated")


@dataclass(frozen=True)
class SapsScore:
    """Total plus the 15 per-category points that sum to it."""

    total: int
    components: dict

    def __post_init__(self):
        if set(self.components) != set(CATEGORY_ORDER):
            raise ValueError("components must cover exactly the 15 categories")
        if self.total != sum(self.components.values()):
            raise ValueError("total must equal the component sum")
        if not 0 <= self.total <= MAX_TOTAL:
            raise ValueError(f"total out of range: {self.total}")


def _component_inputs(m: SapsMeasurements) -> dict:
    vals = {c: getattr(m, c) for c in CATEGORY_ORDER}
    vals["pao2_fio2"] = m.pao2_fio2 if m.ventilated else None
    return vals


def score_total(m: SapsMeasurements) -> SapsScore:
    """Sum the 15 component scores for one patient."""
    inputs = _component_inputs(m)
    components = {c: score_component(c, inputs[c]) for c in CATEGORY_ORDER}
    return SapsScore(total=sum(components.values()), components=components)


def risk_factor_vector(m: SapsMeasurements) -> np.ndarray:
    """The 15 per-category points in CATEGORY_ORDER, as model input."""
    score = score_total(m)
    return np.array([score.components[c] for c in CATEGORY_ORDER], dtype=np.float64)
