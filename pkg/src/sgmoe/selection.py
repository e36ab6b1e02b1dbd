"""Model-order selection: the dendrogram criterion and sweep baselines.

The dendrogram criterion scores each level kappa of a single fitted
model's aggregation path by

    score(kappa) = -( h(kappa) + epsilon_n * avg_loglik(level kappa) )

and selects the argmin over kappa in [2, K].  Merging distinct experts
costs a large height h while merging near-duplicates is nearly free, so
the score dips exactly where aggregation stops being harmless; no model
of any other size is ever fitted.  The AIC/BIC/ICL baselines fit one
model per candidate size and pick the best penalized likelihood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .dendrogram import Dendrogram
from .errors import InputError, NumericError
from .estimation import FitConfig, FitResult, em_fit, make_init
from .model import Dataset, MixingMeasure, avg_log_likelihood, responsibility_matrix

__all__ = [
    "SelectionReport",
    "dsc_select",
    "param_count",
    "criterion_sweep",
    "sweep_fits",
    "criterion_scores",
]

METHODS = ("dsc", "aic", "bic", "icl")


@dataclass(frozen=True)
class SelectionReport:
    method: str                     # dsc | aic | bic | icl
    per_level: dict[int, float]     # candidate size -> score
    chosen: int
    epsilon_n: float | None = None  # dsc only

    def __post_init__(self):
        if self.method not in METHODS:
            raise InputError(f"unknown selection method {self.method!r}")
        if self.chosen not in self.per_level:
            raise InputError("chosen level must appear in per_level")

    def to_dict(self) -> dict:
        d = {"method": self.method,
             "per_level": {str(k): v for k, v in self.per_level.items()},
             "chosen": self.chosen}
        if self.epsilon_n is not None:
            d["epsilon_n"] = self.epsilon_n
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionReport":
        try:
            return cls(method=d["method"],
                       per_level={int(k): float(v)
                                  for k, v in d["per_level"].items()},
                       chosen=int(d["chosen"]),
                       epsilon_n=d.get("epsilon_n"))
        except KeyError as exc:
            raise InputError(f"selection record missing field {exc}") from exc


def argmin_level(scores: dict[int, float]) -> int:
    # ties resolve to the smallest candidate size
    return min(sorted(scores), key=lambda k: (scores[k], k))


def dsc_select(dg: Dendrogram, data: Dataset,
               epsilon_n: float | None = None) -> SelectionReport:
    """Pick the expert count from one dendrogram; default epsilon_n = log N."""
    k_top = dg.levels[0].n_atoms
    if k_top < 2:
        raise InputError("selection needs a dendrogram with at least 2 atoms")
    if epsilon_n is None:
        epsilon_n = math.log(data.n)
    if not epsilon_n > 0:
        raise InputError(f"epsilon_n must be > 0, got {epsilon_n}")
    scores = {}
    for kappa in range(2, k_top + 1):
        ll = avg_log_likelihood(dg.level(kappa), data)
        scores[kappa] = -(dg.height_at(kappa) + epsilon_n * ll)
    return SelectionReport(method="dsc", per_level=scores,
                           chosen=argmin_level(scores), epsilon_n=epsilon_n)


def param_count(k: int, d: int) -> int:
    """Free parameters of a k-expert model on covariate dimension d.

    Gating contributes (k-1)(d+1) after pinning one atom's gate to zero,
    the expert regressions k(d+1), and the variances k.
    """
    if k < 1 or d < 1:
        raise InputError("k and d must be >= 1")
    return (k - 1) * (d + 1) + k * (d + 1) + k


def sweep_fits(data: Dataset, kmax: int, cfg: FitConfig,
               reference: MixingMeasure | None = None) -> list[FitResult]:
    """Fit candidate sizes 1..kmax, reporting which size failed on error."""
    if kmax < 1:
        raise InputError(f"kmax must be >= 1, got {kmax}")
    fits = []
    for k in range(1, kmax + 1):
        sub = replace(cfg, K=k)
        try:
            fits.append(em_fit(data, sub, make_init(data, sub, reference)))
        except (InputError, NumericError) as exc:
            raise NumericError(f"fit failed at candidate size {k}: {exc}") from exc
    return fits


def criterion_scores(fits: list[FitResult], data: Dataset,
                     method: str) -> dict[int, float]:
    """AIC/BIC/ICL scores (lower is better) for pre-computed fits 1..kmax."""
    if method not in ("aic", "bic", "icl"):
        raise InputError(f"unknown sweep criterion {method!r}")
    n = data.n
    scores = {}
    for fit in fits:
        k = fit.model.n_atoms
        p = param_count(k, data.dim)
        ll = avg_log_likelihood(fit.model, data)
        if method == "aic":
            scores[k] = 2.0 * p - 2.0 * n * ll
        else:
            score = p * math.log(n) - 2.0 * n * ll
            if method == "icl":
                resp = responsibility_matrix(fit.model, data)
                with np.errstate(divide="ignore", invalid="ignore"):
                    plogp = np.where(resp > 0.0, resp * np.log(resp), 0.0)
                score += -2.0 * float(np.sum(plogp))
            scores[k] = score
    return scores


def criterion_sweep(data: Dataset, kmax: int, cfg: FitConfig, method: str,
                    reference: MixingMeasure | None = None) -> SelectionReport:
    """Fit sizes 1..kmax and select by the named penalized criterion."""
    fits = sweep_fits(data, kmax, cfg, reference)
    scores = criterion_scores(fits, data, method)
    return SelectionReport(method=method, per_level=scores,
                           chosen=argmin_level(scores))
