"""Synthetic survival cohorts with known ground truth.

Two risk forms: "linear" puts a Cox-linear signal on the saps slot alone;
"latent_interaction" adds two latent factors observed through the leading
coordinates of the text and image embeddings, with V-shaped per-factor risk
terms and a product interaction, so a linear model cannot fully recover the
ranking and a single extra modality sees only half of the latent signal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import Dataset, save_dataset
from .fusion import DEFAULT_DIMS, FeatureBundle, FeatureCohort
from .survival import Cohort, make_record

__all__ = [
    "SynthConfig",
    "DEFAULT_BETA",
    "make_synthetic",
    "make_cox_cohort",
    "gen_synthetic",
]

DEFAULT_BETA = (0.8, -0.5, 0.4) + (0.0,) * 12

_RISK_FORMS = ("linear", "latent_interaction")


@dataclass(frozen=True)
class SynthConfig:
    n: int
    seed: int = 0
    risk_form: str = "linear"
    beta: tuple = DEFAULT_BETA
    baseline_hazard: float = 0.1
    censoring_rate: float = 0.02
    latent_scale: float = 1.0
    interaction_scale: float = 0.5
    signal_coords: int = 8
    feature_noise: float = 0.05
    background_noise: float = 0.01

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if self.risk_form not in _RISK_FORMS:
            raise ValueError(
                f"unknown risk_form {self.risk_form!r}; valid: {', '.join(_RISK_FORMS)}"
            )
        beta = tuple(float(b) for b in self.beta)
        if len(beta) != DEFAULT_DIMS["saps"]:
            raise ValueError(f"beta must have {DEFAULT_DIMS['saps']} entries")
        if not np.isfinite(beta).all():
            raise ValueError("beta must be finite")
        object.__setattr__(self, "beta", beta)
        if not self.baseline_hazard > 0:
            raise ValueError("baseline_hazard must be positive")
        if self.censoring_rate < 0:
            raise ValueError("censoring_rate must be >= 0")
        smallest = min(DEFAULT_DIMS["text"], DEFAULT_DIMS["image"])
        if not 1 <= self.signal_coords <= smallest:
            raise ValueError(f"signal_coords must be in [1, {smallest}]")
        if self.feature_noise < 0 or self.background_noise < 0:
            raise ValueError("noise levels must be >= 0")
        if not (np.isfinite(self.latent_scale) and np.isfinite(self.interaction_scale)):
            raise ValueError("risk scales must be finite")


def _exponential_survival_records(rng, risk, config):
    scale = 1.0 / (config.baseline_hazard * np.exp(risk))
    death = rng.exponential(scale)
    if config.censoring_rate > 0:
        censor = rng.exponential(1.0 / config.censoring_rate, size=risk.shape[0])
    else:
        censor = None
    records = []
    for i in range(risk.shape[0]):
        records.append(
            make_record(
                f"p{i:05d}",
                death_time=float(death[i]),
                censor_time=None if censor is None else float(censor[i]),
            )
        )
    return records


def _latent_block(rng, factor, width, config):
    s = config.signal_coords
    weights = rng.normal(1.0, 0.25, size=s)
    block = np.empty((factor.shape[0], width))
    block[:, :s] = factor[:, None] * weights + config.feature_noise * rng.standard_normal(
        (factor.shape[0], s)
    )
    block[:, s:] = config.background_noise * rng.standard_normal(
        (factor.shape[0], width - s)
    )
    return block


def make_synthetic(config: SynthConfig):
    """Generate in memory; returns the dataset and its ground-truth record."""
    rng = np.random.default_rng(config.seed)
    n = config.n
    saps = rng.standard_normal((n, DEFAULT_DIMS["saps"]))
    beta = np.array(config.beta)
    risk = saps @ beta
    truth = {
        "risk_form": config.risk_form,
        "seed": config.seed,
        "baseline_hazard": config.baseline_hazard,
        "censoring_rate": config.censoring_rate,
        "beta": list(config.beta),
    }
    text = image = None
    if config.risk_form == "latent_interaction":
        z = rng.standard_normal((n, 2))
        text = _latent_block(rng, z[:, 0], DEFAULT_DIMS["text"], config)
        image = _latent_block(rng, z[:, 1], DEFAULT_DIMS["image"], config)
        risk = risk + config.latent_scale * (np.abs(z[:, 0]) + np.abs(z[:, 1]))
        risk = risk + config.interaction_scale * z[:, 0] * z[:, 1]
        truth["latents"] = [[float(a), float(b)] for a, b in z]
        truth["latent_scale"] = config.latent_scale
        truth["interaction_scale"] = config.interaction_scale
    truth["risk"] = [float(r) for r in risk]
    records = _exponential_survival_records(rng, risk, config)
    bundles = tuple(
        FeatureBundle(
            saps=saps[i],
            text=None if text is None else text[i],
            image=None if image is None else image[i],
        )
        for i in range(n)
    )
    features = FeatureCohort(cohort=Cohort(records), bundles=bundles)
    return Dataset(features=features), truth


def make_cox_cohort(n, beta, seed, baseline_hazard=0.1, censoring_rate=0.02):
    """Plain Cox design of arbitrary width, for estimator checks."""
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size < 1:
        raise ValueError("beta must be a non-empty 1-D array")
    if n < 2:
        raise ValueError("n must be >= 2")
    if not baseline_hazard > 0 or censoring_rate < 0:
        raise ValueError("baseline_hazard must be > 0 and censoring_rate >= 0")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, beta.size))
    scale = 1.0 / (baseline_hazard * np.exp(X @ beta))
    death = rng.exponential(scale)
    censor = (
        rng.exponential(1.0 / censoring_rate, size=n) if censoring_rate > 0 else None
    )
    records = [
        make_record(
            f"p{i:05d}",
            death_time=float(death[i]),
            censor_time=None if censor is None else float(censor[i]),
        )
        for i in range(n)
    ]
    return X, Cohort(records)


def gen_synthetic(config: SynthConfig, path):
    """Write the dataset and a `<stem>.truth.json` next to it."""
    dataset, truth = make_synthetic(config)
    path = Path(path)
    save_dataset(dataset, path)
    truth_path = path.parent / f"{path.stem}.truth.json"
    with open(truth_path, "w") as fh:
        json.dump(truth, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path, truth_path
