"""Linear Cox proportional hazards: Newton-Raphson fit and Wald inference.

The fit maximizes the Breslow-tie log partial likelihood with step-halving,
so the likelihood never decreases across accepted steps. Standard errors come
from the inverse observed information at the optimum; hazard reports carry
exp(beta) with 95% intervals and two-sided Wald p-values.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .survival import BaselineSurvival, Cohort, LikelihoodError, breslow_baseline

__all__ = [
    "CoxFitConfig",
    "CoxModel",
    "HazardReport",
    "SingularityError",
    "NotConvergedError",
    "fit_coxph",
    "hazard_report",
    "significance_stars",
    "normal_cdf",
]


class SingularityError(ValueError):
    """The information matrix is singular (collinear or constant covariate)."""


class NotConvergedError(RuntimeError):
    """An operation needs a converged model."""


@dataclass(frozen=True)
class CoxFitConfig:
    max_iter: int = 100
    tol: float = 1e-8


@dataclass
class CoxModel:
    beta: np.ndarray
    covariate_names: list[str]
    baseline: BaselineSurvival
    standard_errors: np.ndarray
    converged: bool
    iterations: int
    log_likelihood_trace: list[float] = field(default_factory=list)

    def linear_predictor(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X @ self.beta


@dataclass(frozen=True)
class HazardReport:
    covariate_names: list[str]
    hazard_ratio: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    p_value: np.ndarray

    def rows(self) -> list[dict]:
        out = []
        for i, name in enumerate(self.covariate_names):
            p = float(self.p_value[i])
            out.append(
                {
                    "covariate": name,
                    "hazard_ratio": float(self.hazard_ratio[i]),
                    "ci_low": float(self.ci_low[i]),
                    "ci_high": float(self.ci_high[i]),
                    "p_value": p,
                    "stars": significance_stars(p),
                }
            )
        return out

    def write_csv(self, path) -> None:
        fields = ["covariate", "hazard_ratio", "ci_low", "ci_high", "p_value", "stars"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for row in self.rows():
                writer.writerow(
                    {
                        k: (f"{v:.10g}" if isinstance(v, float) else v)
                        for k, v in row.items()
                    }
                )


def normal_cdf(z: float) -> float:
    """Standard normal CDF through the complementary error function."""
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def _two_sided_p(z: float) -> float:
    return math.erfc(abs(z) / math.sqrt(2.0))


def significance_stars(p_value: float) -> str:
    """Table-footnote style marks; otherwise the p-value to two decimals."""
    if not 0.0 <= p_value <= 1.0:
        raise ValueError(f"p-value must be in [0, 1], got {p_value}")
    if p_value < 0.001:
        return "***"
    if p_value <= 0.01:
        return "**"
    if p_value <= 0.05:
        return "*"
    return f"{p_value:.2f}"


def _loglik_score_info(X, cohort, beta):
    """Breslow-tie partial log likelihood with score vector and information matrix.

    Works on suffix accumulations over the time-sorted cohort, with the max
    linear predictor subtracted before exponentiation.
    """
    n, d = X.shape
    psi = X @ beta
    order = np.argsort(cohort.times, kind="stable")
    t_s = cohort.times[order]
    e_s = cohort.events[order]
    x_s = X[order]
    psi_s = psi[order]

    m = psi_s.max()
    w = np.exp(psi_s - m)
    s0 = np.cumsum(w[::-1])[::-1]
    s1 = np.cumsum((w[:, None] * x_s)[::-1], axis=0)[::-1]
    s2 = np.cumsum((w[:, None, None] * (x_s[:, :, None] * x_s[:, None, :]))[::-1], axis=0)[::-1]

    loglik = 0.0
    score = np.zeros(d)
    info = np.zeros((d, d))
    event_times, counts = np.unique(t_s[e_s == 1], return_counts=True)
    starts = np.searchsorted(t_s, event_times, side="left")
    for t_k, d_k, k in zip(event_times, counts, starts):
        in_group = (t_s == t_k) & (e_s == 1)
        xbar = s1[k] / s0[k]
        loglik += psi_s[in_group].sum() - d_k * (math.log(s0[k]) + m)
        score += x_s[in_group].sum(axis=0) - d_k * xbar
        info += d_k * (s2[k] / s0[k] - np.outer(xbar, xbar))
    return loglik, score, info


def _name_singular_column(info: np.ndarray, names: list[str]) -> str:
    # the eigenvector of the smallest eigenvalue points at the degenerate direction
    _, vecs = np.linalg.eigh(info)
    return names[int(np.argmax(np.abs(vecs[:, 0])))]


def fit_coxph(X, cohort: Cohort, config: CoxFitConfig | None = None, covariate_names=None) -> CoxModel:
    """Newton-Raphson fit of a linear Cox model.

    Convergence requires max |step| < tol or sup-norm of the score < tol. A
    fit that runs out of iterations comes back with converged=False rather
    than raising; a singular information matrix raises SingularityError
    naming the offending covariate.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"X must be 2-D, got shape {X.shape}")
    n, d = X.shape
    if n != cohort.n:
        raise ValueError(f"X has {n} rows for a cohort of {cohort.n}")
    if n < d:
        raise ValueError(f"need at least as many patients as covariates ({n} < {d})")
    if not np.isfinite(X).all():
        raise ValueError("covariates must be finite")
    if cohort.num_events == 0:
        raise LikelihoodError("cannot fit: cohort has no events")
    if config is None:
        config = CoxFitConfig()
    names = list(covariate_names) if covariate_names is not None else [f"x{i}" for i in range(d)]
    if len(names) != d:
        raise ValueError(f"got {len(names)} covariate names for {d} columns")
    spread = X.max(axis=0) - X.min(axis=0)
    for j in np.flatnonzero(spread == 0):
        raise SingularityError(f"covariate {names[j]!r} is constant; drop it before fitting")

    beta = np.zeros(d)
    loglik, score, info = _loglik_score_info(X, cohort, beta)
    trace = [loglik]
    converged = False
    iterations = 0
    for iterations in range(1, config.max_iter + 1):
        if np.abs(score).max() < config.tol:
            converged = True
            iterations -= 1
            break
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise SingularityError(
                f"information matrix is singular at covariate {_name_singular_column(info, names)!r}"
            ) from None
        # halve until the likelihood stops decreasing
        scale = 1.0
        for _ in range(40):
            candidate = beta + scale * step
            new_loglik, new_score, new_info = _loglik_score_info(X, cohort, candidate)
            if new_loglik >= loglik - 1e-12:
                break
            scale *= 0.5
        else:
            break  # no acceptable step; report unconverged
        moved = np.abs(scale * step).max()
        beta, loglik, score, info = candidate, new_loglik, new_score, new_info
        trace.append(loglik)
        if moved < config.tol:
            converged = True
            break

    try:
        covariance = np.linalg.inv(info)
        diag = np.diag(covariance).copy()
        se = np.sqrt(np.maximum(diag, 0.0))
    except np.linalg.LinAlgError:
        raise SingularityError(
            f"information matrix is singular at covariate {_name_singular_column(info, names)!r}"
        ) from None

    baseline = breslow_baseline(cohort, X @ beta)
    return CoxModel(
        beta=beta,
        covariate_names=names,
        baseline=baseline,
        standard_errors=se,
        converged=converged,
        iterations=iterations,
        log_likelihood_trace=trace,
    )


def hazard_report(model: CoxModel) -> HazardReport:
    """Wald summary per covariate: exp(beta), 95% interval, two-sided p."""
    if not model.converged:
        raise NotConvergedError("hazard report needs a converged model")
    beta = model.beta
    se = model.standard_errors
    if (se <= 0).any():
        raise ValueError("standard errors must be positive for Wald inference")
    z = beta / se
    return HazardReport(
        covariate_names=list(model.covariate_names),
        hazard_ratio=np.exp(beta),
        ci_low=np.exp(beta - 1.96 * se),
        ci_high=np.exp(beta + 1.96 * se),
        p_value=np.array([_two_sided_p(v) for v in z]),
    )
