"""Command-line surface.

Commands: synth, saps-score, fit-cox, hazard-report, train, evaluate,
bootstrap, compare, gcn-features. Every run is deterministic given its
inputs and --seed; usage errors exit 2, runtime failures exit 1 with the
message on standard error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .coxph import fit_coxph, hazard_report
from .dataio import Dataset, load_dataset, save_dataset
from .evaluate import (
    BootstrapSummary,
    SplitSpec,
    bootstrap_run,
    c_index,
    compare_models,
    fusion_recipe,
    saps_score_recipe,
    split_indices,
    write_comparison_csv,
    write_replicates_csv,
    write_summary_json,
)
from .fusion import (
    DEFAULT_DIMS,
    VARIANTS,
    FeatureCohort,
    TrainConfig,
    load_checkpoint,
    model_variant,
    save_checkpoint,
    train,
)
from .gcn import gcn_features, init_gcn_params, load_graph, sample_graph
from .report import (
    save_bootstrap_figure,
    save_comparison_figure,
    save_forest_figure,
    save_survival_figure,
    save_training_figure,
)
from .saps2 import CATEGORY_ORDER, SapsMeasurements, score_total
from .synth import DEFAULT_BETA, SynthConfig, gen_synthetic

SAPS_CSV_COLUMNS = [
    "patient_id",
    "age",
    "heart_rate",
    "systolic_bp",
    "temperature",
    "ventilated",
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
]

_TRAIN_KEYS = (
    "epochs",
    "batch_size",
    "dropout",
    "learning_rate",
    "early_stop_patience",
    "seed",
)
_SPLIT_KEYS = ("train_frac", "val_frac", "test_frac")


def _read_config_file(path) -> dict:
    with open(path) as fh:
        values = json.load(fh)
    if not isinstance(values, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    unknown = set(values) - set(_TRAIN_KEYS) - set(_SPLIT_KEYS)
    if unknown:
        raise ValueError(f"{path}: unknown config keys: {', '.join(sorted(unknown))}")
    return values


def _file_config(args) -> dict:
    if getattr(args, "config", None):
        return _read_config_file(args.config)
    return {}


def _resolve_seed(args, file_values) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(file_values.get("seed", 0))


def _train_config(args, file_values) -> TrainConfig:
    merged = {k: file_values[k] for k in _TRAIN_KEYS if k in file_values}
    for key in _TRAIN_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    merged["seed"] = _resolve_seed(args, file_values)
    if "early_stop_patience" not in merged and 0 < merged.get("epochs", 250) < 10:
        merged["early_stop_patience"] = merged["epochs"]
    return TrainConfig(**merged)


def _split_spec(args, file_values) -> SplitSpec:
    merged = {k: file_values[k] for k in _SPLIT_KEYS if k in file_values}
    return SplitSpec(seed=_resolve_seed(args, file_values), **merged)


def _parse_bool(text, field):
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"field {field!r}: expected a boolean, got {text!r}")


def _saps_totals(bundles) -> np.ndarray:
    return np.array([float(b.saps.sum()) for b in bundles])


# -- commands ------------------------------------------------------------------


def _cmd_synth(args) -> int:
    beta = DEFAULT_BETA
    if args.beta is not None:
        beta = tuple(float(v) for v in args.beta.split(","))
    config = SynthConfig(
        n=args.n,
        seed=args.seed if args.seed is not None else 0,
        risk_form=args.risk,
        beta=beta,
        baseline_hazard=args.baseline_hazard,
        censoring_rate=args.censoring_rate,
        latent_scale=args.latent_scale,
        interaction_scale=args.interaction_scale,
        signal_coords=args.signal_coords,
        feature_noise=args.feature_noise,
        background_noise=args.background_noise,
    )
    data_path, truth_path = gen_synthetic(config, args.out)
    print(f"wrote {data_path} and {truth_path}")
    return 0


def _cmd_saps_score(args) -> int:
    with open(args.infile, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{args.infile}: empty file")
        missing = set(SAPS_CSV_COLUMNS) - set(reader.fieldnames)
        if missing:
            raise ValueError(
                f"{args.infile}: missing columns: {', '.join(sorted(missing))}"
            )
        totals = []
        for lineno, row in enumerate(reader, start=2):
            try:
                ventilated = _parse_bool(row["ventilated"], "ventilated")
                pao2 = row["pao2_fio2"].strip()
                measurements = SapsMeasurements(
                    age=float(row["age"]),
                    heart_rate=float(row["heart_rate"]),
                    systolic_bp=float(row["systolic_bp"]),
                    temperature=float(row["temperature"]),
                    ventilated=ventilated,
                    pao2_fio2=float(pao2) if pao2 else None,
                    bun=float(row["bun"]),
                    urine_output=float(row["urine_output"]),
                    sodium=float(row["sodium"]),
                    potassium=float(row["potassium"]),
                    bicarbonate=float(row["bicarbonate"]),
                    bilirubin=float(row["bilirubin"]),
                    wbc=float(row["wbc"]),
                    gcs=int(row["gcs"]),
                    chronic_disease=row["chronic_disease"].strip(),
                    admission_type=row["admission_type"].strip(),
                )
                totals.append((row["patient_id"], score_total(measurements).total))
            except ValueError as exc:
                raise ValueError(f"{args.infile}: row {lineno}: {exc}") from None
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "saps_total"])
        writer.writerows(totals)
    print(f"scored {len(totals)} patients -> {args.out}")
    return 0


def _fit_saps_cox(dataset: Dataset):
    X = np.vstack([b.saps for b in dataset.features.bundles])
    return fit_coxph(
        X, dataset.features.cohort, covariate_names=list(CATEGORY_ORDER)
    )


def _cmd_fit_cox(args) -> int:
    dataset = load_dataset(args.data)
    model = _fit_saps_cox(dataset)
    payload = {
        "covariates": list(model.covariate_names),
        "beta": [float(b) for b in model.beta],
        "standard_errors": [float(s) for s in model.standard_errors],
        "converged": model.converged,
        "iterations": model.iterations,
        "log_likelihood": model.log_likelihood_trace[-1],
        "n": dataset.n,
        "events": dataset.features.cohort.num_events,
    }
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"fit {dataset.n} patients in {model.iterations} iterations -> {args.out}")
    return 0


def _cmd_hazard_report(args) -> int:
    dataset = load_dataset(args.data)
    model = _fit_saps_cox(dataset)
    report = hazard_report(model)
    report.write_csv(args.out_csv)
    written = [str(args.out_csv)]
    if args.fig:
        save_forest_figure(report, args.fig)
        written.append(str(args.fig))
    if args.baseline_fig:
        save_survival_figure(model.baseline, args.baseline_fig)
        written.append(str(args.baseline_fig))
    print(f"wrote {', '.join(written)}")
    return 0


def _cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    modalities = model_variant(args.variant)
    if not modalities:
        raise ValueError(
            f"variant {args.variant!r} ranks by the raw score and trains nothing"
        )
    file_values = _file_config(args)
    config = _train_config(args, file_values)
    spec = _split_spec(args, file_values)
    tr_idx, va_idx, _ = split_indices(dataset.n, spec)
    net, log = train(
        dataset.features.take(tr_idx),
        dataset.features.take(va_idx),
        modalities,
        config,
    )
    save_checkpoint(net, args.out)
    written = [str(args.out)]
    if args.curves:
        save_training_figure(log, args.curves)
        written.append(str(args.curves))
    if args.log_csv:
        with open(args.log_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss"])
            for entry in log.epochs:
                writer.writerow(
                    [
                        entry["epoch"],
                        f"{entry['train_loss']:.10g}",
                        f"{entry['val_loss']:.10g}",
                    ]
                )
        written.append(str(args.log_csv))
    print(
        f"trained {args.variant} for {len(log.epochs)} epochs "
        f"(best {log.best_epoch}) -> {', '.join(written)}"
    )
    return 0


def _subset_for_evaluation(dataset: Dataset, args, file_values) -> FeatureCohort:
    features = dataset.features
    if args.split != "all":
        spec = _split_spec(args, file_values)
        tr_idx, va_idx, te_idx = split_indices(dataset.n, spec)
        chosen = {"train": tr_idx, "val": va_idx, "test": te_idx}[args.split]
        features = features.take(chosen)
    if args.subgroup_label is not None:
        k = args.subgroup_label
        if not 0 <= k < DEFAULT_DIMS["labels"]:
            raise ValueError(
                f"--subgroup-label must be in [0, {DEFAULT_DIMS['labels'] - 1}]"
            )
        keep = []
        for i, bundle in enumerate(features.bundles):
            if bundle.labels is None:
                raise ValueError(
                    "--subgroup-label needs the labels modality on every patient"
                )
            if bundle.labels[k] == 1.0:
                keep.append(i)
        if not keep:
            raise ValueError(f"no patients have label {k} set")
        features = features.take(keep)
    return features


def _cmd_evaluate(args) -> int:
    dataset = load_dataset(args.data)
    file_values = _file_config(args)
    features = _subset_for_evaluation(dataset, args, file_values)
    if args.checkpoint:
        net = load_checkpoint(args.checkpoint)
        risks = net.predict_risks(features.bundles)
        model_label = "+".join(net.modalities)
    else:
        risks = _saps_totals(features.bundles)
        model_label = "saps_scores"
    result = c_index(features.cohort, risks)
    payload = {
        "model": model_label,
        "split": args.split,
        "subgroup_label": args.subgroup_label,
        "n": features.n,
        "events": int(features.cohort.num_events),
        "c_index": result.value,
        "concordant": result.concordant,
        "discordant": result.discordant,
        "tied_risk": result.tied_risk,
        "comparable_pairs": result.comparable_pairs,
    }
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"c_index {result.value:.4f} on {features.n} patients -> {args.out}")
    return 0


def _cmd_bootstrap(args) -> int:
    dataset = load_dataset(args.data)
    modalities = model_variant(args.variant)
    file_values = _file_config(args)
    seed = _resolve_seed(args, file_values)
    if modalities:
        config = _train_config(args, file_values)
        recipe = fusion_recipe(modalities, config)
    else:
        recipe = saps_score_recipe()
    summary = bootstrap_run(
        dataset.features,
        recipe,
        B=args.b,
        base_seed=seed,
        split_spec=_split_spec(args, file_values),
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_summary_json(summary, out_dir / "summary.json", label=args.variant)
    write_replicates_csv(summary, out_dir / "replicates.csv")
    save_bootstrap_figure([(args.variant, summary)], out_dir / "replicates.png")
    print(
        f"{args.variant}: B={summary.B} mean={summary.mean:.4f} "
        f"CI=[{summary.ci_low:.4f}, {summary.ci_high:.4f}] "
        f"failed={summary.failed} -> {out_dir}"
    )
    return 0


def _load_summary(path):
    with open(path) as fh:
        payload = json.load(fh)
    try:
        values = np.array([float(v) for v in payload["replicate_values"]])
        summary = BootstrapSummary(
            replicate_values=values,
            mean=payload["mean"],
            ci_low=payload["ci_low"],
            ci_high=payload["ci_high"],
            seed=payload["seed"],
            B=payload["B"],
            failed=payload.get("failed", 0),
        )
    except KeyError as exc:
        raise ValueError(f"{path}: missing summary field {exc}") from None
    label = payload.get("label") or Path(path).stem
    return label, summary


def _cmd_compare(args) -> int:
    label_a, summary_a = _load_summary(args.a)
    label_b, summary_b = _load_summary(args.b)
    if args.label_a:
        label_a = args.label_a
    if args.label_b:
        label_b = args.label_b
    result = compare_models(summary_a, summary_b)
    write_comparison_csv([(label_a, label_b, result)], args.out)
    written = [str(args.out)]
    if args.fig:
        save_comparison_figure(label_a, summary_a, label_b, summary_b, result, args.fig)
        written.append(str(args.fig))
    print(
        f"{label_a} vs {label_b}: p={result.p_value:.3g} ({result.stars}) "
        f"-> {', '.join(written)}"
    )
    return 0


def _cmd_gcn_features(args) -> int:
    dataset = load_dataset(args.data)
    if not dataset.tokens:
        raise ValueError(f"{args.data}: no token matrices to encode")
    graph = load_graph(args.graph) if args.graph else sample_graph()
    n_nodes = len(graph.node_names)
    if n_nodes * args.hidden != DEFAULT_DIMS["gcn"]:
        raise ValueError(
            f"graph nodes x hidden units must equal {DEFAULT_DIMS['gcn']}, "
            f"got {n_nodes} x {args.hidden}"
        )
    seed = args.seed if args.seed is not None else 0
    params = init_gcn_params(
        seed, n_nodes=n_nodes, hidden=args.hidden, kernel_size=args.kernel
    )
    bundles = []
    encoded = 0
    for record, bundle in zip(
        dataset.features.cohort.records, dataset.features.bundles
    ):
        tokens = dataset.tokens.get(record.patient_id)
        if tokens is None:
            bundles.append(bundle)
            continue
        feats = gcn_features(graph.normalized, tokens, params)
        bundles.append(replace(bundle, gcn=feats))
        encoded += 1
    features = FeatureCohort(cohort=dataset.features.cohort, bundles=tuple(bundles))
    save_dataset(Dataset(features=features, tokens=dataset.tokens), args.out)
    print(f"encoded {encoded} of {dataset.n} patients -> {args.out}")
    return 0


# -- parser ---------------------------------------------------------------------


def _add_config_flags(sub, with_train=True):
    sub.add_argument("--config", help="JSON config file; flags override its values")
    sub.add_argument("--seed", type=int, default=None, help="master random seed")
    if with_train:
        sub.add_argument("--epochs", type=int, default=None)
        sub.add_argument("--batch-size", type=int, default=None, dest="batch_size")
        sub.add_argument("--dropout", type=float, default=None)
        sub.add_argument(
            "--learning-rate", type=float, default=None, dest="learning_rate"
        )
        sub.add_argument(
            "--patience", type=int, default=None, dest="early_stop_patience"
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icusurv",
        description="Survival modeling over multimodal ICU features.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="generate a synthetic dataset")
    synth.add_argument("--out", required=True)
    synth.add_argument("--n", type=int, required=True)
    synth.add_argument("--seed", type=int, default=None)
    synth.add_argument(
        "--risk", default="linear", choices=["linear", "latent_interaction"]
    )
    synth.add_argument("--beta", default=None, help="comma-separated 15 values")
    synth.add_argument("--baseline-hazard", type=float, default=0.1)
    synth.add_argument("--censoring-rate", type=float, default=0.02)
    synth.add_argument("--latent-scale", type=float, default=1.0)
    synth.add_argument("--interaction-scale", type=float, default=0.5)
    synth.add_argument("--signal-coords", type=int, default=8)
    synth.add_argument("--feature-noise", type=float, default=0.05)
    synth.add_argument("--background-noise", type=float, default=0.01)
    synth.set_defaults(func=_cmd_synth)

    saps = commands.add_parser("saps-score", help="score raw SAPS-II measurements")
    saps.add_argument("--in", dest="infile", required=True, help="measurement CSV")
    saps.add_argument("--out", required=True, help="totals CSV")
    saps.set_defaults(func=_cmd_saps_score)

    fit = commands.add_parser("fit-cox", help="fit a linear Cox model on saps features")
    fit.add_argument("--data", required=True)
    fit.add_argument("--out", required=True, help="coefficient JSON")
    fit.set_defaults(func=_cmd_fit_cox)

    hazard = commands.add_parser("hazard-report", help="hazard ratios with CIs")
    hazard.add_argument("--data", required=True)
    hazard.add_argument("--out-csv", required=True, dest="out_csv")
    hazard.add_argument("--fig", default=None, help="forest plot PNG")
    hazard.add_argument("--baseline-fig", default=None, dest="baseline_fig")
    hazard.set_defaults(func=_cmd_hazard_report)

    train_cmd = commands.add_parser("train", help="train a fusion variant")
    train_cmd.add_argument("--data", required=True)
    train_cmd.add_argument("--variant", required=True, choices=sorted(VARIANTS))
    train_cmd.add_argument("--out", required=True, help="checkpoint JSON")
    train_cmd.add_argument("--curves", default=None, help="loss-curve PNG")
    train_cmd.add_argument("--log-csv", default=None, dest="log_csv")
    _add_config_flags(train_cmd)
    train_cmd.set_defaults(func=_cmd_train)

    evaluate = commands.add_parser("evaluate", help="C-index of a model on a dataset")
    evaluate.add_argument("--data", required=True)
    evaluate.add_argument("--checkpoint", default=None)
    evaluate.add_argument("--out", required=True, help="metrics JSON")
    evaluate.add_argument(
        "--split", default="all", choices=["all", "train", "val", "test"]
    )
    evaluate.add_argument(
        "--subgroup-label",
        type=int,
        default=None,
        dest="subgroup_label",
        help="keep only patients with this label index set",
    )
    _add_config_flags(evaluate, with_train=False)
    evaluate.set_defaults(func=_cmd_evaluate)

    boot = commands.add_parser("bootstrap", help="bootstrap C-index for a variant")
    boot.add_argument("--data", required=True)
    boot.add_argument("--variant", required=True, choices=sorted(VARIANTS))
    boot.add_argument("--b", type=int, default=200, help="replicates")
    boot.add_argument("--out-dir", required=True, dest="out_dir")
    _add_config_flags(boot)
    boot.set_defaults(func=_cmd_bootstrap)

    compare = commands.add_parser("compare", help="paired test of two summaries")
    compare.add_argument("--a", required=True, help="summary JSON")
    compare.add_argument("--b", required=True, help="summary JSON")
    compare.add_argument("--out", required=True, help="comparison CSV")
    compare.add_argument("--fig", default=None, help="violin PNG")
    compare.add_argument("--label-a", default=None, dest="label_a")
    compare.add_argument("--label-b", default=None, dest="label_b")
    compare.set_defaults(func=_cmd_compare)

    gcn = commands.add_parser("gcn-features", help="encode token matrices")
    gcn.add_argument("--data", required=True)
    gcn.add_argument("--out", required=True, help="dataset with gcn vectors")
    gcn.add_argument("--graph", default=None, help="edge list; default built-in")
    gcn.add_argument("--hidden", type=int, default=16)
    gcn.add_argument("--kernel", type=int, default=3)
    gcn.add_argument("--seed", type=int, default=None)
    gcn.set_defaults(func=_cmd_gcn_features)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
