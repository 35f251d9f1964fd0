"""Survival-data containers and the Cox partial-likelihood machinery.

Times are hours. A record's observed time is min(death, censor) with the
event flag marking which one fired; death and censoring are mutually
exclusive. Risk sets use >= so tied times include each other, and tied event
times share one denominator (Breslow convention). All functions here are pure
and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SurvivalRecord",
    "Cohort",
    "BaselineSurvival",
    "LikelihoodError",
    "make_record",
    "risk_set",
    "cox_nll",
    "cox_nll_gradient",
    "breslow_baseline",
    "survival_prob",
]


class LikelihoodError(ValueError):
    """The partial likelihood is undefined (no observed events)."""


@dataclass(frozen=True)
class SurvivalRecord:
    """One patient: opaque id, observed time in hours, event indicator."""

    patient_id: str
    observed_time: float
    event: bool

    def __post_init__(self):
        t = self.observed_time
        if not (isinstance(t, (int, float)) and math.isfinite(t)) or t < 0:
            raise ValueError(f"observed_time must be finite and >= 0, got {t!r}")


def make_record(patient_id: str, death_time=None, censor_time=None) -> SurvivalRecord:
    """Collapse raw death/censor times into (observed_time, event).

    Death wins when it happens at or before censoring; a missing censor time
    means follow-up never ended administratively.
    """
    if death_time is None and censor_time is None:
        raise ValueError("need a death time or a censor time")
    for label, t in (("death_time", death_time), ("censor_time", censor_time)):
        if t is not None and t < 0:
            raise ValueError(f"{label} must be >= 0, got {t}")
    if death_time is not None and (censor_time is None or death_time <= censor_time):
        return SurvivalRecord(patient_id, float(death_time), True)
    return SurvivalRecord(patient_id, float(censor_time), False)


class Cohort:
    """Immutable list of survival records with unique patient ids."""

    def __init__(self, records):
        records = tuple(records)
        if not records:
            raise ValueError("a cohort needs at least one record")
        ids = [r.patient_id for r in records]
        if len(set(ids)) != len(ids):
            raise ValueError("patient ids must be unique within a cohort")
        self.records = records
        self.times = np.array([r.observed_time for r in records], dtype=np.float64)
        self.events = np.array([int(r.event) for r in records], dtype=np.int64)
        self.times.setflags(write=False)
        self.events.setflags(write=False)

    @classmethod
    def from_arrays(cls, patient_ids, times, events) -> "Cohort":
        if not (len(patient_ids) == len(times) == len(events)):
            raise ValueError("patient_ids, times and events must have equal length")
        return cls(
            SurvivalRecord(str(p), float(t), bool(e))
            for p, t, e in zip(patient_ids, times, events)
        )

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def num_events(self) -> int:
        return int(self.events.sum())

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __repr__(self) -> str:
        return f"Cohort(n={self.n}, events={self.num_events})"


@dataclass(frozen=True)
class BaselineSurvival:
    """Step estimate of S0: value at each distinct event time, 1 before the first."""

    event_times: np.ndarray
    survival_values: np.ndarray

    def __post_init__(self):
        et = np.asarray(self.event_times, dtype=np.float64)
        sv = np.asarray(self.survival_values, dtype=np.float64)
        if et.ndim != 1 or et.shape != sv.shape or et.size == 0:
            raise ValueError("event_times and survival_values must be equal-length 1-D")
        if not (np.diff(et) > 0).all():
            raise ValueError("event_times must be strictly increasing")
        if not ((sv > 0) & (sv <= 1)).all():
            raise ValueError("survival values must lie in (0, 1]")
        if (np.diff(sv) > 0).any():
            raise ValueError("survival values must be nonincreasing")
        et.setflags(write=False)
        sv.setflags(write=False)
        object.__setattr__(self, "event_times", et)
        object.__setattr__(self, "survival_values", sv)

    def at(self, t: float) -> float:
        """S0(t): right-continuous step lookup, 1 before the first event."""
        if t < 0:
            raise ValueError(f"t must be >= 0, got {t}")
        idx = int(np.searchsorted(self.event_times, t, side="right")) - 1
        if idx < 0:
            return 1.0
        return float(self.survival_values[idx])


def risk_set(cohort: Cohort, index: int) -> set:
    """Indices still at risk when patient `index` leaves: {j : t_j >= t_i}."""
    if not 0 <= index < cohort.n:
        raise IndexError(f"index {index} out of range for cohort of {cohort.n}")
    t_i = cohort.times[index]
    return set(np.flatnonzero(cohort.times >= t_i).tolist())


def _suffix_logsumexp(cohort: Cohort, risks: np.ndarray):
    """Sorted times plus log sum of exp(psi) over every suffix of the sort."""
    order = np.argsort(cohort.times, kind="stable")
    t_sorted = cohort.times[order]
    psi_sorted = risks[order]
    suffix_lse = np.logaddexp.accumulate(psi_sorted[::-1])[::-1]
    return t_sorted, suffix_lse


def _checked_risks(risks, cohort: Cohort) -> np.ndarray:
    arr = np.asarray(risks, dtype=np.float64).reshape(-1)
    if arr.shape[0] != cohort.n:
        raise ValueError(f"got {arr.shape[0]} risks for a cohort of {cohort.n}")
    if not np.isfinite(arr).all():
        raise ValueError("risks must be finite")
    return arr


def cox_nll(risks, cohort: Cohort) -> float:
    """Cox negative log partial likelihood, averaged over events.

    -(1/E) * sum over events of [psi_i - log sum_{j: t_j >= t_i} exp(psi_j)].
    Tied event times share their denominator.
    """
    psi = _checked_risks(risks, cohort)
    if cohort.num_events == 0:
        raise LikelihoodError("partial likelihood undefined: cohort has no events")
    t_sorted, suffix_lse = _suffix_logsumexp(cohort, psi)
    ev = np.flatnonzero(cohort.events == 1)
    starts = np.searchsorted(t_sorted, cohort.times[ev], side="left")
    terms = psi[ev] - suffix_lse[starts]
    return float(-terms.sum() / ev.size)


def cox_nll_gradient(risks, cohort: Cohort) -> np.ndarray:
    """d cox_nll / d psi, same averaging: softmax weights over each risk set."""
    psi = _checked_risks(risks, cohort)
    if cohort.num_events == 0:
        raise LikelihoodError("partial likelihood undefined: cohort has no events")
    ev = np.flatnonzero(cohort.events == 1)
    grad = -cohort.events.astype(np.float64).copy()
    for i in ev:
        in_risk = cohort.times >= cohort.times[i]
        z = psi[in_risk]
        w = np.exp(z - z.max())
        grad[in_risk] += w / w.sum()
    return grad / ev.size


def breslow_baseline(cohort: Cohort, risks) -> BaselineSurvival:
    """Breslow estimate of the baseline survival curve.

    H0(t) = sum over event times t_k <= t of d_k / sum_{j at risk} exp(psi_j),
    then S0 = exp(-H0), reported at each distinct event time.
    """
    psi = _checked_risks(risks, cohort)
    if cohort.num_events == 0:
        raise LikelihoodError("baseline hazard undefined: cohort has no events")
    event_times, counts = np.unique(
        cohort.times[cohort.events == 1], return_counts=True
    )
    t_sorted, suffix_lse = _suffix_logsumexp(cohort, psi)
    starts = np.searchsorted(t_sorted, event_times, side="left")
    increments = np.exp(np.log(counts.astype(np.float64)) - suffix_lse[starts])
    survival = np.exp(-np.cumsum(increments))
    return BaselineSurvival(event_times=event_times, survival_values=survival)


def survival_prob(baseline: BaselineSurvival, risk: float, t: float) -> float:
    """S(t | x) = S0(t) ** exp(psi), per-patient survival at hour t."""
    s0 = baseline.at(t)
    return float(s0 ** math.exp(risk))
