"""Concordance index, bootstrap protocol, and paired comparison tests."""

import csv
import json

import numpy as np
import pytest

from icusurv.evaluate import (
    BootstrapSummary,
    HarnessError,
    SplitSpec,
    UndefinedMetricError,
    bootstrap_run,
    c_index,
    compare_models,
    cox_recipe,
    saps_score_recipe,
    split,
    split_indices,
    write_comparison_csv,
    write_replicates_csv,
    write_summary_json,
)
from icusurv.fusion import FeatureBundle, FeatureCohort
from icusurv.survival import Cohort


def make_cohort(times, events):
    ids = [f"p{i}" for i in range(len(times))]
    return Cohort.from_arrays(ids, times, events)


def oracle_c_index(times, events, risks):
    """All ordered pairs, pure Python; the smaller-time patient must be an event."""
    conc = disc = tied = 0
    n = len(times)
    for i in range(n):
        if not events[i]:
            continue
        for j in range(n):
            if times[i] >= times[j]:
                continue
            if risks[i] > risks[j]:
                conc += 1
            elif risks[i] < risks[j]:
                disc += 1
            else:
                tied += 1
    return conc, disc, tied


def saps_dataset(seed, n=160, signal=0.35, censor=0.25):
    """Cohort whose hazard is driven by the SAPS total; bundle holds only saps."""
    rng = np.random.default_rng(seed)
    saps = rng.integers(0, 4, size=(n, 15)).astype(float)
    total = saps.sum(axis=1)
    psi = signal * (total - total.mean())
    times = rng.exponential(np.exp(-psi)) + 0.01
    events = rng.random(n) >= censor
    bundles = tuple(FeatureBundle(saps=saps[i]) for i in range(n))
    return FeatureCohort(cohort=make_cohort(times, events), bundles=bundles)


def latent_risk_dataset(seed, n=150):
    """saps[0] carries the true risk, so a scorer can read it back with noise."""
    rng = np.random.default_rng(seed)
    saps = rng.normal(0.0, 1.0, size=(n, 15))
    times = rng.exponential(np.exp(-saps[:, 0])) + 0.01
    events = rng.random(n) >= 0.25
    bundles = tuple(FeatureBundle(saps=saps[i]) for i in range(n))
    return FeatureCohort(cohort=make_cohort(times, events), bundles=bundles)


def noisy_recipe(noise):
    def recipe(train_set, val_set, seed):
        rng = np.random.default_rng([seed, 17])

        def scorer(bundles):
            base = np.array([b.saps[0] for b in bundles])
            return base + rng.normal(0.0, noise, size=base.shape[0])

        return scorer

    return recipe


def constant_recipe(value=0.0):
    def recipe(train_set, val_set, seed):
        return lambda bundles: np.full(len(bundles), value)

    return recipe


# -- c_index ---------------------------------------------------------------


def test_perfect_ranking_scores_one():
    times = np.arange(1.0, 7.0)
    res = c_index(make_cohort(times, np.ones(6, bool)), -times)
    assert res.value == 1.0
    assert res.concordant == res.comparable_pairs == 15
    assert res.discordant == res.tied_risk == 0


def test_aligned_ranking_scores_zero():
    times = np.arange(1.0, 7.0)
    res = c_index(make_cohort(times, np.ones(6, bool)), times)
    assert res.value == 0.0
    assert res.discordant == 15


def test_constant_risks_give_half():
    res = c_index(make_cohort([1.0, 2.0, 3.0, 4.0], [1, 1, 1, 1]), np.zeros(4))
    assert res.value == 0.5
    assert res.tied_risk == res.comparable_pairs == 6


def test_counts_match_exhaustive_oracle():
    for seed in range(30):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 51))
        times = np.round(rng.exponential(1.0, n), 1)
        events = rng.random(n) < 0.6
        risks = np.round(rng.normal(0, 1, n), 1)
        if not (events & (times < times.max())).any():
            continue
        res = c_index(make_cohort(times, events), risks)
        conc, disc, tied = oracle_c_index(times, events, risks)
        assert (res.concordant, res.discordant, res.tied_risk) == (conc, disc, tied)
        assert res.comparable_pairs == conc + disc + tied
        expected = (conc + 0.5 * tied) / res.comparable_pairs
        assert res.value == pytest.approx(expected, abs=1e-15)


def test_censored_early_patient_is_not_comparable():
    cohort = make_cohort([1.0, 2.0, 3.0], [0, 1, 1])
    res = c_index(cohort, [5.0, 4.0, 3.0])
    assert res.comparable_pairs == 1
    assert res.value == 1.0


def test_equal_times_pairs_excluded():
    with pytest.raises(UndefinedMetricError):
        c_index(make_cohort([1.0, 1.0], [1, 1]), [2.0, 1.0])
    res = c_index(make_cohort([1.0, 1.0, 2.0], [1, 1, 0]), [3.0, 1.0, 2.0])
    assert res.comparable_pairs == 2
    assert res.concordant == 1 and res.discordant == 1


def test_all_censored_is_undefined():
    with pytest.raises(UndefinedMetricError):
        c_index(make_cohort([1.0, 2.0, 3.0], [0, 0, 0]), [1.0, 2.0, 3.0])


def test_event_only_at_latest_time_is_undefined():
    with pytest.raises(UndefinedMetricError):
        c_index(make_cohort([1.0, 2.0, 3.0], [0, 0, 1]), [1.0, 2.0, 3.0])


def test_monotone_transforms_leave_counts():
    rng = np.random.default_rng(3)
    times = np.round(rng.exponential(1.0, 40), 1)
    events = rng.random(40) < 0.7
    risks = np.round(rng.normal(0, 1, 40), 1)
    base = c_index(make_cohort(times, events), risks)
    for transformed in (3.0 * risks + 2.0, np.exp(risks / 4.0)):
        assert c_index(make_cohort(times, events), transformed) == base


def test_negated_risks_complement_to_one():
    rng = np.random.default_rng(11)
    times = rng.exponential(1.0, 30)
    events = rng.random(30) < 0.7
    risks = rng.normal(0, 1, 30)
    forward = c_index(make_cohort(times, events), risks)
    backward = c_index(make_cohort(times, events), -risks)
    assert forward.tied_risk == 0
    assert forward.value + backward.value == pytest.approx(1.0, abs=1e-15)
    assert forward.comparable_pairs == backward.comparable_pairs


def test_c_index_input_validation():
    cohort = make_cohort([1.0, 2.0], [1, 1])
    with pytest.raises(ValueError, match="risks"):
        c_index(cohort, [1.0])
    with pytest.raises(ValueError, match="finite"):
        c_index(cohort, [np.nan, 1.0])


# -- split -----------------------------------------------------------------


def test_exact_fraction_sizes():
    tr, va, te = split_indices(10, SplitSpec(seed=4))
    assert (len(tr), len(va), len(te)) == (7, 1, 2)


def test_large_cohort_remainder_goes_to_train():
    # val and test are floored (992 and 1985 of 9928); train absorbs the rest.
    tr, va, te = split_indices(9928, SplitSpec(seed=0))
    assert (len(tr), len(va), len(te)) == (6951, 992, 1985)


def test_partition_is_disjoint_and_exhaustive():
    tr, va, te = split_indices(137, SplitSpec(seed=9))
    combined = np.sort(np.concatenate([tr, va, te]))
    assert np.array_equal(combined, np.arange(137))


def test_split_determinism_per_seed():
    a = split_indices(50, SplitSpec(seed=5))
    b = split_indices(50, SplitSpec(seed=5))
    c = split_indices(50, SplitSpec(seed=6))
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    assert any(not np.array_equal(x, y) for x, y in zip(a, c))


def test_split_returns_cohorts_partitioning_records():
    rng = np.random.default_rng(2)
    cohort = make_cohort(rng.exponential(1.0, 25), rng.random(25) < 0.7)
    tr, va, te = split(cohort, SplitSpec(seed=1))
    assert (tr.n, va.n, te.n) == (18, 2, 5)
    ids = sorted(r.patient_id for part in (tr, va, te) for r in part.records)
    assert ids == sorted(r.patient_id for r in cohort.records)


def test_too_small_cohort_rejected():
    with pytest.raises(ValueError, match="too small"):
        split_indices(9, SplitSpec(seed=0))


def test_split_spec_validation():
    with pytest.raises(ValueError, match="sum to 1"):
        SplitSpec(train_frac=0.7, val_frac=0.2, test_frac=0.2)
    with pytest.raises(ValueError, match="positive"):
        SplitSpec(train_frac=1.0, val_frac=0.0, test_frac=0.0)
    tr, va, te = split_indices(8, SplitSpec(0.5, 0.25, 0.25, seed=0))
    assert (len(tr), len(va), len(te)) == (4, 2, 2)


# -- bootstrap_run -----------------------------------------------------------


def test_single_replicate_ci_collapses():
    ds = saps_dataset(0, n=60)
    summary = bootstrap_run(ds, saps_score_recipe(), B=1, base_seed=3)
    only = summary.replicate_values[0]
    assert summary.B == 1
    assert summary.mean == summary.ci_low == summary.ci_high == only


def test_constant_risk_recipe_scores_half():
    ds = saps_dataset(1, n=80)
    summary = bootstrap_run(ds, constant_recipe(), B=25, base_seed=0)
    assert np.all(summary.replicate_values == 0.5)
    assert (summary.ci_low, summary.mean, summary.ci_high) == (0.5, 0.5, 0.5)


def test_bootstrap_determinism():
    ds = saps_dataset(2, n=70)
    a = bootstrap_run(ds, saps_score_recipe(), B=15, base_seed=8)
    b = bootstrap_run(ds, saps_score_recipe(), B=15, base_seed=8)
    c = bootstrap_run(ds, saps_score_recipe(), B=15, base_seed=9)
    assert a.replicate_values.tobytes() == b.replicate_values.tobytes()
    assert (a.mean, a.ci_low, a.ci_high) == (b.mean, b.ci_low, b.ci_high)
    assert a.replicate_values.tobytes() != c.replicate_values.tobytes()


def test_mean_sits_inside_percentile_interval():
    ds = latent_risk_dataset(4)
    summary = bootstrap_run(ds, noisy_recipe(0.5), B=40, base_seed=1)
    assert summary.ci_low <= summary.mean <= summary.ci_high
    assert np.all((summary.replicate_values >= 0) & (summary.replicate_values <= 1))


def test_failed_replicates_recorded_and_excluded():
    ds = saps_dataset(5, n=60)
    calls = []

    def recipe(train_set, val_set, seed):
        calls.append(seed)
        if len(calls) in (3, 7):
            raise ValueError("synthetic failure")
        return lambda bundles: np.array([float(b.saps.sum()) for b in bundles])

    summary = bootstrap_run(ds, recipe, B=40, base_seed=2)
    assert summary.failed == 2
    assert summary.B == 38
    assert summary.replicate_values.shape == (38,)


def test_too_many_failures_abort():
    ds = saps_dataset(6, n=60)

    def recipe(train_set, val_set, seed):
        raise RuntimeError("always broken")

    with pytest.raises(HarnessError, match="30 of 30"):
        bootstrap_run(ds, recipe, B=30, base_seed=0)


def test_interval_stability_grows_with_replicates():
    # The 2.5th percentile of 20 values interpolates just above the sample
    # minimum (plotting position ~1/21 > 0.025), so small-B intervals sit
    # slightly inside the large-B ones and wobble far more across seeds.
    ds = saps_dataset(7, n=160)
    recipe = saps_score_recipe()
    w20, w200 = [], []
    for s in range(10):
        small = bootstrap_run(ds, recipe, B=20, base_seed=s)
        big = bootstrap_run(ds, recipe, B=200, base_seed=s)
        w20.append(small.ci_high - small.ci_low)
        w200.append(big.ci_high - big.ci_low)
    assert np.std(w20) > np.std(w200)
    assert np.median(w20) < np.median(w200)


def test_replicate_count_must_be_positive():
    with pytest.raises(ValueError, match="B"):
        bootstrap_run(saps_dataset(8, n=40), saps_score_recipe(), B=0, base_seed=0)


def test_custom_split_spec_reaches_recipe():
    ds = saps_dataset(9, n=40)
    sizes = []

    def recipe(train_set, val_set, seed):
        sizes.append((train_set.n, val_set.n))
        return lambda bundles: np.zeros(len(bundles))

    bootstrap_run(ds, recipe, B=2, base_seed=0, split_spec=SplitSpec(0.5, 0.25, 0.25))
    assert sizes == [(20, 10), (20, 10)]


def test_cox_recipe_recovers_linear_signal():
    ds = latent_risk_dataset(10)
    summary = bootstrap_run(ds, cox_recipe("saps"), B=8, base_seed=4)
    assert summary.failed == 0
    assert summary.mean > 0.7


# -- compare_models ----------------------------------------------------------


def paired_summaries(values_a, values_b, seed=0):
    def wrap(vals):
        vals = np.asarray(vals, float)
        return BootstrapSummary(
            replicate_values=vals,
            mean=float(vals.mean()),
            ci_low=float(np.percentile(vals, 2.5)),
            ci_high=float(np.percentile(vals, 97.5)),
            seed=seed,
            B=vals.shape[0],
        )

    return wrap(values_a), wrap(values_b)


def test_self_comparison_p_is_one():
    ds = saps_dataset(11, n=60)
    summary = bootstrap_run(ds, saps_score_recipe(), B=12, base_seed=1)
    result = compare_models(summary, summary)
    assert result.p_value == 1.0
    assert result.mean_diff == 0.0


def test_uniform_positive_differences_are_significant():
    base = np.linspace(0.6, 0.8, 200)
    a, b = paired_summaries(base + 0.05, base)
    result = compare_models(a, b)
    assert result.p_value < 0.001
    assert result.stars == "***"
    assert result.mean_diff == pytest.approx(0.05)


def test_unpaired_summaries_rejected():
    a, b = paired_summaries(np.linspace(0.5, 0.7, 20), np.linspace(0.5, 0.7, 20))
    mismatched = BootstrapSummary(
        replicate_values=b.replicate_values,
        mean=b.mean,
        ci_low=b.ci_low,
        ci_high=b.ci_high,
        seed=b.seed + 1,
        B=b.B,
    )
    with pytest.raises(ValueError, match="paired"):
        compare_models(a, mismatched)
    shorter = BootstrapSummary(
        replicate_values=b.replicate_values[:10],
        mean=b.mean,
        ci_low=b.ci_low,
        ci_high=b.ci_high,
        seed=b.seed,
        B=10,
    )
    with pytest.raises(ValueError, match="paired"):
        compare_models(a, shorter)


def test_flip_count_sets_p_value_floor():
    base = np.linspace(0.6, 0.8, 20)
    a, b = paired_summaries(base + 0.1, base)
    result = compare_models(a, b, flips=999)
    assert result.p_value == pytest.approx(1 / 1000)
    assert result.flips == 999


def test_sharper_scorer_beats_noisier_one():
    ds = latent_risk_dataset(12, n=180)
    good = bootstrap_run(ds, noisy_recipe(0.05), B=60, base_seed=5)
    bad = bootstrap_run(ds, noisy_recipe(2.0), B=60, base_seed=5)
    assert good.mean > bad.mean
    result = compare_models(good, bad)
    assert result.mean_diff > 0.02
    assert result.p_value <= 0.05


def test_comparison_determinism():
    ds = latent_risk_dataset(13, n=100)
    a = bootstrap_run(ds, noisy_recipe(0.3), B=30, base_seed=2)
    b = bootstrap_run(ds, noisy_recipe(1.0), B=30, base_seed=2)
    first = compare_models(a, b)
    second = compare_models(a, b)
    assert first == second


# -- artifact writers ---------------------------------------------------------


def test_replicate_csv_layout(tmp_path):
    ds = saps_dataset(14, n=50)
    summary = bootstrap_run(ds, saps_score_recipe(), B=6, base_seed=0)
    path = tmp_path / "replicates.csv"
    write_replicates_csv(summary, path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["replicate", "c_index"]
    assert len(rows) == 7
    assert [int(r[0]) for r in rows[1:]] == list(range(6))
    values = np.array([float(r[1]) for r in rows[1:]])
    np.testing.assert_allclose(values, summary.replicate_values, rtol=1e-9)


def test_summary_json_roundtrip(tmp_path):
    ds = saps_dataset(15, n=50)
    summary = bootstrap_run(ds, saps_score_recipe(), B=5, base_seed=7)
    path = tmp_path / "summary.json"
    write_summary_json(summary, path, label="saps")
    payload = json.loads(path.read_text())
    assert payload["label"] == "saps"
    assert payload["B"] == 5
    assert payload["seed"] == 7
    assert payload["mean"] == summary.mean
    assert payload["replicate_values"] == [float(v) for v in summary.replicate_values]


def test_comparison_csv_layout(tmp_path):
    base = np.linspace(0.6, 0.8, 30)
    a, b = paired_summaries(base + 0.04, base)
    result = compare_models(a, b)
    path = tmp_path / "compare.csv"
    write_comparison_csv([("deep", "linear", result)], path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["model_a", "model_b", "p_value", "stars"]
    assert rows[1][:2] == ["deep", "linear"]
    assert float(rows[1][2]) == pytest.approx(result.p_value)


def test_summary_b_must_match_values():
    with pytest.raises(ValueError, match="B"):
        BootstrapSummary(
            replicate_values=np.array([0.5, 0.6]),
            mean=0.55,
            ci_low=0.5,
            ci_high=0.6,
            seed=0,
            B=3,
        )
