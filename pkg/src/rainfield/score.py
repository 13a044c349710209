"""Probabilistic forecast verification: sample CRPS and MAE of the median."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelError


def crps_sample(samples, obs: float) -> float:
    """CRPS of an ensemble against one observation.

    Computes (1/m) sum|Y_i - y| - (1/2m^2) sum_ij |Y_i - Y_j| through the
    sorted-sample identity for the pairwise term, which matches the double
    sum exactly but runs in O(m log m).
    """
    x = np.asarray(samples, dtype=float).ravel()
    m = x.size
    if m == 0:
        raise ModelError("CRPS needs at least one sample")
    if not (np.all(np.isfinite(x)) and np.isfinite(obs)):
        raise ModelError("CRPS inputs must be finite")
    term1 = float(np.mean(np.abs(x - obs)))
    xs = np.sort(x)
    # sum_{i,j} |x_i - x_j| = 2 * sum_k (2k - m - 1) * x_(k), k 1-based
    coeff = 2.0 * np.arange(1, m + 1) - m - 1.0
    pairwise = 2.0 * float(coeff @ xs)
    return term1 - pairwise / (2.0 * m * m)


def mae_median(samples, obs: float) -> float:
    """Absolute error of the ensemble median (midpoint for even sizes)."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ModelError("median needs at least one sample")
    return float(abs(np.median(x) - obs))


@dataclass(frozen=True)
class ScoreRow:
    lead: int
    target_class: str  # 'station' | 'areal'
    metric: str  # 'CRPS' | 'MAE'
    value: float
    n: int


@dataclass
class ScoreTable:
    rows: list[ScoreRow] = field(default_factory=list)

    def value(self, lead: int, target_class: str, metric: str) -> float:
        for r in self.rows:
            if (r.lead, r.target_class, r.metric) == (lead, target_class, metric):
                return r.value
        raise KeyError((lead, target_class, metric))


@dataclass(frozen=True)
class ForecastCase:
    """One scored target: ensemble vs observation at a given lead."""

    lead: int
    target_class: str
    samples: np.ndarray
    observed: float
    time: int = 0


def score_table(cases: list[ForecastCase], exclude_times=()) -> ScoreTable:
    """Average CRPS and MAE by (lead, target class).

    ``exclude_times`` drops every case whose target time is listed (e.g. to
    remove one calendar day from the evaluation).
    """
    excluded = set(exclude_times)
    groups: dict[tuple[int, str], list[ForecastCase]] = {}
    for case in cases:
        if case.time in excluded:
            continue
        groups.setdefault((case.lead, case.target_class), []).append(case)
    rows = []
    for (lead, cls) in sorted(groups):
        sub = groups[(lead, cls)]
        # sorting before averaging keeps the result exactly invariant under
        # permutations of the scored targets
        crps_vals = sorted(crps_sample(c.samples, c.observed) for c in sub)
        mae_vals = sorted(mae_median(c.samples, c.observed) for c in sub)
        rows.append(ScoreRow(lead, cls, "CRPS", float(np.mean(crps_vals)), len(sub)))
        rows.append(ScoreRow(lead, cls, "MAE", float(np.mean(mae_vals)), len(sub)))
    return ScoreTable(rows=rows)
