"""Concordance, bootstrap evaluation, and paired model comparison.

The bootstrap protocol resamples the full dataset with replacement, splits
each replicate 70/10/20, trains a model recipe, and scores Harrell's C on the
replicate's test patients. Replicate seeds are counter-based: stream k of
replicate b uses SeedSequence([base_seed, b, k]) with k = 0 for resampling,
1 for the split, 2 for training, so runs are reproducible and replicates are
order-independent.

A model recipe is a callable (train_set, val_set, seed) -> scorer, where the
scorer maps a sequence of FeatureBundles to an array of risk scores.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace

import numpy as np

from .coxph import fit_coxph, significance_stars
from .fusion import FeatureCohort, TrainConfig, train
from .survival import Cohort

__all__ = [
    "CIndexResult",
    "BootstrapSummary",
    "SplitSpec",
    "ComparisonResult",
    "UndefinedMetricError",
    "HarnessError",
    "c_index",
    "split_indices",
    "split",
    "bootstrap_run",
    "compare_models",
    "fusion_recipe",
    "saps_score_recipe",
    "cox_recipe",
    "write_replicates_csv",
    "write_summary_json",
    "write_comparison_csv",
]


class UndefinedMetricError(ValueError):
    """The metric has no defined value on this input (no comparable pairs)."""


class HarnessError(RuntimeError):
    """Too many bootstrap replicates failed to produce a value."""


@dataclass(frozen=True)
class CIndexResult:
    value: float
    concordant: int
    discordant: int
    tied_risk: int
    comparable_pairs: int


def c_index(cohort: Cohort, risks) -> CIndexResult:
    """Harrell's concordance index.

    A pair is comparable iff the patient with the strictly smaller observed
    time had an event; it is concordant iff that patient's risk is strictly
    higher, and risk ties count half.
    """
    psi = np.asarray(risks, dtype=np.float64).reshape(-1)
    if psi.shape[0] != cohort.n:
        raise ValueError(f"got {psi.shape[0]} risks for a cohort of {cohort.n}")
    if not np.isfinite(psi).all():
        raise ValueError("risks must be finite")
    concordant = discordant = tied = 0
    for i in np.flatnonzero(cohort.events == 1):
        later = cohort.times > cohort.times[i]
        if not later.any():
            continue
        r = psi[later]
        concordant += int((psi[i] > r).sum())
        discordant += int((psi[i] < r).sum())
        tied += int((psi[i] == r).sum())
    comparable = concordant + discordant + tied
    if comparable == 0:
        raise UndefinedMetricError("no comparable pairs; concordance undefined")
    return CIndexResult(
        value=(concordant + 0.5 * tied) / comparable,
        concordant=concordant,
        discordant=discordant,
        tied_risk=tied,
        comparable_pairs=comparable,
    )


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {total}")
        if min(self.train_frac, self.val_frac, self.test_frac) <= 0:
            raise ValueError("every split fraction must be positive")


def split_indices(n: int, spec: SplitSpec):
    """Shuffled disjoint index partition; floored val/test, remainder to train."""
    n_val = int(np.floor(spec.val_frac * n))
    n_test = int(np.floor(spec.test_frac * n))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"n={n} is too small to give every split at least 1 patient")
    order = np.random.default_rng(spec.seed).permutation(n)
    return (
        order[:n_train],
        order[n_train : n_train + n_val],
        order[n_train + n_val :],
    )


def split(cohort: Cohort, spec: SplitSpec):
    """The same partition materialized as three cohorts."""
    tr, va, te = split_indices(cohort.n, spec)
    pick = lambda idx: Cohort(cohort.records[i] for i in idx)
    return pick(tr), pick(va), pick(te)


@dataclass(frozen=True)
class BootstrapSummary:
    """Per-replicate C-index values with their percentile 95% interval.

    B counts the replicates that produced a value; failed counts the ones
    that were recorded and excluded.
    """

    replicate_values: np.ndarray
    mean: float
    ci_low: float
    ci_high: float
    seed: int
    B: int
    failed: int = 0

    def __post_init__(self):
        vals = np.asarray(self.replicate_values, dtype=np.float64)
        vals.setflags(write=False)
        object.__setattr__(self, "replicate_values", vals)
        if self.B != vals.shape[0]:
            raise ValueError("B must equal the number of replicate values")


def _stream_seed(base_seed: int, replicate: int, stream: int) -> int:
    return int(np.random.SeedSequence([base_seed, replicate, stream]).generate_state(1)[0])


def bootstrap_run(
    dataset: FeatureCohort,
    recipe,
    B: int = 200,
    base_seed: int = 0,
    split_spec: SplitSpec | None = None,
) -> BootstrapSummary:
    """Resample, split, train, and score B times; summarize with percentile CI.

    Replicates whose training or scoring raises are excluded; if more than
    10% of B fail, the run aborts with HarnessError.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    n = dataset.n
    values = []
    failures = []
    for b in range(B):
        try:
            resample_rng = np.random.default_rng(_stream_seed(base_seed, b, 0))
            sample = dataset.take(resample_rng.integers(0, n, size=n))
            spec = (
                replace(split_spec, seed=_stream_seed(base_seed, b, 1))
                if split_spec is not None
                else SplitSpec(seed=_stream_seed(base_seed, b, 1))
            )
            tr_i, va_i, te_i = split_indices(n, spec)
            scorer = recipe(sample.take(tr_i), sample.take(va_i), _stream_seed(base_seed, b, 2))
            test = sample.take(te_i)
            values.append(c_index(test.cohort, scorer(test.bundles)).value)
        except (ValueError, RuntimeError, ArithmeticError) as exc:
            failures.append((b, f"{type(exc).__name__}: {exc}"))
    if len(failures) > 0.1 * B:
        detail = "; ".join(msg for _, msg in failures[:3])
        raise HarnessError(
            f"{len(failures)} of {B} replicates failed (first: {detail})"
        )
    vals = np.array(values)
    return BootstrapSummary(
        replicate_values=vals,
        mean=float(vals.mean()),
        ci_low=float(np.percentile(vals, 2.5)),
        ci_high=float(np.percentile(vals, 97.5)),
        seed=base_seed,
        B=vals.shape[0],
        failed=len(failures),
    )


@dataclass(frozen=True)
class ComparisonResult:
    p_value: float
    stars: str
    mean_diff: float
    flips: int


def compare_models(
    summary_a: BootstrapSummary,
    summary_b: BootstrapSummary,
    flips: int = 100_000,
) -> ComparisonResult:
    """Two-sided paired sign-flip permutation test on replicate differences.

    Requires summaries built replicate-paired (same base seed and B). The
    Monte Carlo sign flips are seeded from the shared base seed, and the
    p-value uses the add-one estimator (count + 1) / (flips + 1).
    """
    if summary_a.seed != summary_b.seed or summary_a.B != summary_b.B:
        raise ValueError(
            "summaries are not replicate-paired (base seed and B must match)"
        )
    diffs = summary_a.replicate_values - summary_b.replicate_values
    observed = abs(diffs.mean())
    rng = np.random.default_rng([summary_a.seed, 0x5F1D])
    signs = rng.choice([-1.0, 1.0], size=(flips, diffs.shape[0]))
    permuted = np.abs((signs * diffs).mean(axis=1))
    count = int((permuted >= observed - 1e-300).sum())
    p = (count + 1) / (flips + 1)
    p = min(p, 1.0)
    return ComparisonResult(
        p_value=p,
        stars=significance_stars(p),
        mean_diff=float(diffs.mean()),
        flips=flips,
    )


# -- recipes -------------------------------------------------------------------


def fusion_recipe(modalities, config: TrainConfig | None = None, specs=None):
    """Recipe that trains the fusion network per replicate (seed overridden)."""

    def recipe(train_set: FeatureCohort, val_set: FeatureCohort, seed: int):
        cfg = replace(config if config is not None else TrainConfig(), seed=seed)
        net, _ = train(train_set, val_set, modalities, cfg, specs)
        return net.predict_risks

    return recipe


def saps_score_recipe():
    """No training: rank patients by the raw SAPS-II total."""

    def recipe(train_set, val_set, seed):
        return lambda bundles: np.array([float(b.saps.sum()) for b in bundles])

    return recipe


def cox_recipe(feature: str = "saps"):
    """Linear Cox baseline on one bundle field, fit on train plus validation."""

    def recipe(train_set: FeatureCohort, val_set: FeatureCohort, seed: int):
        records = list(train_set.cohort.records) + list(val_set.cohort.records)
        bundles = list(train_set.bundles) + list(val_set.bundles)
        merged = FeatureCohort(cohort=Cohort(records), bundles=tuple(bundles))
        X = np.vstack([b.get(feature) for b in merged.bundles])
        model = fit_coxph(X, merged.cohort)
        return lambda bs: np.vstack([b.get(feature) for b in bs]) @ model.beta

    return recipe


# -- artifact writers -------------------------------------------------------------


def write_replicates_csv(summary: BootstrapSummary, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["replicate", "c_index"])
        for i, v in enumerate(summary.replicate_values):
            writer.writerow([i, f"{v:.10g}"])


def write_summary_json(summary: BootstrapSummary, path, label: str | None = None) -> None:
    payload = {
        "label": label,
        "mean": summary.mean,
        "ci_low": summary.ci_low,
        "ci_high": summary.ci_high,
        "B": summary.B,
        "failed": summary.failed,
        "seed": summary.seed,
        "replicate_values": [float(v) for v in summary.replicate_values],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_comparison_csv(rows, path) -> None:
    """Rows of (model_a, model_b, ComparisonResult)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model_a", "model_b", "p_value", "stars"])
        for name_a, name_b, result in rows:
            writer.writerow([name_a, name_b, f"{result.p_value:.10g}", result.stars])
