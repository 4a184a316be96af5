"""Doubly robust group-time ATETs for staggered adoption.

For a cohort ``g`` and year ``t`` the estimator compares the long difference
``dY = Y_t - Y_b`` of cohort-``g`` units with that of a comparison set,
combining a logistic propensity score for cohort membership with a linear
outcome regression fitted on the comparison units:

    ATT(g,t) = E_w1[dY - m(X)] - E_w0[dY - m(X)],
    w1 = D / E[D],   w0 ∝ p(X)(1-D) / (1-p(X)),

consistent if either the propensity or the outcome model is right. Post
periods use ``b = g-1``; pre periods use ``b = t-1`` (short differences) under
the default base-period policy. Per-unit influence values are kept for
clustered standard errors and for aggregation.
"""

from __future__ import annotations

import enum
import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from ._regression import check_full_rank, logit_irls, logit_tilting, ols
from .core import CohortIndex, CohortPanel
from .errors import (
    CausalPanelError,
    EmptyComparisonSet,
    EmptyTreatedSet,
    EstimationError,
    NoTreatedUnits,
    PropensityOverflow,
)
from .inference import ClusterScheme, InfluenceVector, influence_se, normal_inference

log = logging.getLogger(__name__)


class ControlGroup(str, enum.Enum):
    NOT_YET_TREATED = "not_yet_treated"
    NEVER_TREATED = "never_treated"


class BasePeriod(str, enum.Enum):
    VARYING_PRE = "varying"
    ANCHOR_G_MINUS_1_POST = "universal"


@dataclass(frozen=True)
class DidConfig:
    """Options for the group-time estimator.

    ``base_period_policy``: ``VARYING_PRE`` uses ``t-1`` as base for pre
    periods and ``g-1`` for post periods; ``ANCHOR_G_MINUS_1_POST`` uses ``g-1``
    for every ``t`` (``t = g-1`` itself is then skipped).
    ``improved`` switches to the inverse-probability-tilting propensity with a
    weighted outcome regression. ``on_error="skip"`` turns estimation failures
    in :func:`estimate_all` into skipped cells instead of raising.
    """

    control_group: ControlGroup = ControlGroup.NOT_YET_TREATED
    covariates: tuple[str, ...] = ()
    interact_covariates: bool = False
    base_period_policy: BasePeriod = BasePeriod.VARYING_PRE
    propensity_trim: float = 0.995
    event_window: tuple[int, int] = (-10, 5)
    improved: bool = False
    on_error: str = "raise"

    def __post_init__(self):
        object.__setattr__(self, "control_group", ControlGroup(self.control_group))
        object.__setattr__(self, "base_period_policy", BasePeriod(self.base_period_policy))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "event_window", tuple(int(e) for e in self.event_window))
        if not 0.0 < self.propensity_trim < 1.0:
            raise ValueError("propensity_trim must lie in (0, 1)")
        if self.event_window[0] > self.event_window[1]:
            raise ValueError("event_window lower bound exceeds upper bound")
        if self.on_error not in ("raise", "skip"):
            raise ValueError("on_error must be 'raise' or 'skip'")


@dataclass(frozen=True)
class GroupTimeEffect:
    g: int
    t: int
    estimate: float
    std_error: float
    influence_values: InfluenceVector = field(repr=False)
    n_treated: int
    n_control: int
    base_period: int
    control_group: ControlGroup = ControlGroup.NOT_YET_TREATED

    @property
    def event_time(self) -> int:
        return self.t - self.g

    @property
    def p_value(self) -> float:
        return normal_inference(self.estimate, self.std_error).p_value

    def scaled(self, c: float) -> "GroupTimeEffect":
        iv = self.influence_values
        return replace(self, estimate=c * self.estimate, std_error=abs(c) * self.std_error,
                       influence_values=InfluenceVector(iv.units, c * iv.values, iv.n))


class GroupTimeResults(Sequence):
    """Ordered group-time effects plus the cells that were skipped, with reasons."""

    def __init__(self, effects, skipped=None, n_units=None, year_range=None, cohort=None):
        self.effects = list(effects)
        self.cohort = cohort
        self.skipped = dict(skipped or {})
        self.n_units = n_units
        self.year_range = year_range

    def __getitem__(self, i):
        return self.effects[i]

    def __len__(self):
        return len(self.effects)

    def cell(self, g: int, t: int) -> GroupTimeEffect | None:
        for e in self.effects:
            if e.g == g and e.t == t:
                return e
        return None

    def to_frame(self) -> pd.DataFrame:
        return effects_frame(self.effects)


def effects_frame(effects) -> pd.DataFrame:
    cols = ["g", "t", "event_time", "estimate", "std_error", "p_value", "n_treated", "n_control"]
    rows = [(e.g, e.t, e.event_time, e.estimate, e.std_error, e.p_value, e.n_treated, e.n_control) for e in effects]
    return pd.DataFrame(rows, columns=cols)


# ---------------------------------------------------------------------------
# the doubly robust kernel
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DRFit:
    att: float
    psi: np.ndarray
    pscore: np.ndarray


def dr_att_panel(dy: np.ndarray, d: np.ndarray, X: np.ndarray, trim: float = 0.995, improved: bool = False) -> DRFit:
    """Doubly robust ATT on a long difference with its influence function.

    ``X`` must include an intercept column. ``psi`` is on the cell scale:
    ``att - ATT ≈ mean(psi)`` over the ``len(dy)`` units passed in.
    """
    d = d.astype(np.float64)
    n = len(dy)
    ctrl = d == 0
    check_full_rank(X[ctrl], "outcome regression (comparison units)")
    if improved:
        ps = logit_tilting(X, d)
    else:
        ps = logit_irls(X, d)
    p = ps.fitted
    if np.any(p[ctrl] >= trim):
        worst = float(p[ctrl].max())
        raise PropensityOverflow(
            f"{int(np.sum(p[ctrl] >= trim))} comparison units have propensity >= {trim} (max {worst:.6f})"
        )
    p = np.minimum(p, 1 - 1e-16)
    w1 = d
    w0 = p * (1 - d) / (1 - p)
    if improved:
        beta = ols(X[ctrl], dy[ctrl], w0[ctrl])
    else:
        beta = ols(X[ctrl], dy[ctrl])
    m = X @ beta
    r = dy - m
    mw1, mw0 = w1.mean(), w0.mean()
    eta1 = np.mean(w1 * r) / mw1
    eta0 = np.mean(w0 * r) / mw0
    att = eta1 - eta0

    if improved:
        psi = (w1 * (r - eta1)) / mw1 - (w0 * (r - eta0)) / mw0
        return DRFit(float(att), psi, ps.fitted)

    wols = 1.0 - d
    XpX = (X * wols[:, None]).T @ X / n
    asy_ols = ((wols * r)[:, None] * X) @ np.linalg.inv(XpX)
    W = p * (1 - p)
    H = (X * W[:, None]).T @ X / n
    asy_ps = ((d - p)[:, None] * X) @ np.linalg.inv(H)

    M1 = (w1[:, None] * X).mean(axis=0)
    inf_treat = (w1 * r - w1 * eta1 - asy_ols @ M1) / mw1
    M2 = ((w0 * (r - eta0))[:, None] * X).mean(axis=0)
    M3 = (w0[:, None] * X).mean(axis=0)
    inf_cont = (w0 * r - w0 * eta0 + asy_ps @ M2 - asy_ols @ M3) / mw0
    return DRFit(float(att), inf_treat - inf_cont, ps.fitted)


# ---------------------------------------------------------------------------
# cell assembly
# ---------------------------------------------------------------------------


def base_period(g: int, t: int, policy: BasePeriod) -> int | None:
    """Base year for cell (g, t), or None if the cell is undefined under ``policy``."""
    if t >= g:
        return g - 1
    if policy is BasePeriod.VARYING_PRE:
        return t - 1
    return None if t == g - 1 else g - 1


def interact_columns(X: np.ndarray, names: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    """Append all pairwise products ``x_i * x_j`` (i < j)."""
    cols, labels = [X], list(names)
    k = X.shape[1]
    for i in range(k):
        for j in range(i + 1, k):
            cols.append((X[:, i] * X[:, j])[:, None])
            labels.append(f"{names[i]}*{names[j]}")
    return np.hstack(cols), labels


def design_matrix(panel: CohortPanel, units: np.ndarray, year: int, config: DidConfig) -> np.ndarray:
    """Intercept plus covariates at ``year``; constant and duplicate columns are dropped."""
    n = len(units)
    if not config.covariates:
        return np.ones((n, 1))
    col = year - panel.year_range[0]
    X = np.column_stack([panel.wide(c)[units, col] for c in config.covariates])
    names = list(config.covariates)
    if config.interact_covariates:
        X, names = interact_columns(X, names)
    keep = []
    for j in range(X.shape[1]):
        xj = X[:, j]
        if np.all(xj == xj[0]):
            continue
        if any(np.array_equal(xj, X[:, k]) for k in keep):
            continue
        keep.append(j)
    if len(keep) < X.shape[1]:
        log.debug("dropped %d constant or duplicate covariate columns", X.shape[1] - len(keep))
    return np.column_stack([np.ones(n), X[:, keep]])


@dataclass(frozen=True)
class CellData:
    units: np.ndarray
    d: np.ndarray
    dy: np.ndarray
    X: np.ndarray
    base: int


def cell_data(panel: CohortPanel, g: int, t: int, config: DidConfig) -> CellData:
    """Units, treatment dummy, long difference and base-period design for cell (g, t)."""
    t0, t1 = panel.year_range
    b = base_period(g, t, config.base_period_policy)
    if b is None:
        raise EmptyTreatedSet(f"cell ({g},{t}) is the reference period")
    if b < t0 or t > t1 or t < t0:
        raise EmptyTreatedSet(f"cell ({g},{t}) needs base year {b} outside {t0}..{t1}")
    Y = panel.wide("outcome")
    ok = ~np.isnan(Y[:, t - t0]) & ~np.isnan(Y[:, b - t0])
    for c in config.covariates:
        ok &= ~np.isnan(panel.wide(c)[:, b - t0])
    coh = panel.cohort
    treated = (coh == g) & ok
    if config.control_group is ControlGroup.NEVER_TREATED:
        comp = (coh == 0) & ok
    else:
        comp = ((coh == 0) | (coh > max(t, b))) & (coh != g) & ok
    if not treated.any():
        raise EmptyTreatedSet(f"no cohort-{g} units observed in both {b} and {t}")
    if not comp.any():
        raise EmptyComparisonSet(f"no comparison units observed in both {b} and {t} for cohort {g}")
    units = np.flatnonzero(treated | comp)
    dy = Y[units, t - t0] - Y[units, b - t0]
    X = design_matrix(panel, units, b, config)
    return CellData(units, treated[units], dy, X, b)


def estimate_group_time(
    panel: CohortPanel,
    index: CohortIndex,
    g: int,
    t: int,
    config: DidConfig = DidConfig(),
    scheme: ClusterScheme | None = None,
) -> GroupTimeEffect:
    """ATET(g, t) with a clustered influence-function standard error."""
    if g not in index.groups:
        raise EstimationError(f"{g} is not a treatment cohort")
    cd = cell_data(panel, g, t, config)
    fit = dr_att_panel(cd.dy, cd.d, cd.X, config.propensity_trim, config.improved)
    n_cell = len(cd.units)
    iv = InfluenceVector(cd.units, fit.psi * (panel.n_units / n_cell), panel.n_units)
    se = influence_se(iv, scheme, fit.att).std_error
    return GroupTimeEffect(
        g=int(g), t=int(t), estimate=fit.att, std_error=se, influence_values=iv,
        n_treated=int(cd.d.sum()), n_control=int((~cd.d).sum()), base_period=cd.base,
        control_group=config.control_group,
    )


def enumerate_cells(index: CohortIndex, config: DidConfig) -> list[tuple[int, int]]:
    t0, t1 = index.year_range
    lo, hi = config.event_window
    return [(g, t) for g in index.groups for t in range(t0, t1 + 1) if lo <= t - g <= hi]


_INFEASIBLE = (EmptyTreatedSet, EmptyComparisonSet)


def estimate_all(
    panel: CohortPanel,
    index: CohortIndex,
    config: DidConfig = DidConfig(),
    threads: int = 1,
    scheme: ClusterScheme | None = None,
) -> GroupTimeResults:
    """Every feasible (g, t) cell in the event window, ordered by (g, t).

    Cells without treated or comparison units (or whose base year falls
    outside the panel) are skipped and listed in ``.skipped`` with the reason.
    """
    if not index.groups:
        raise NoTreatedUnits("no treated cohorts in the panel")
    cells = enumerate_cells(index, config)
    # Fill the wide caches once before fanning out to threads.
    panel.wide("outcome")
    for c in config.covariates:
        panel.wide(c)

    def run(cell):
        try:
            return estimate_group_time(panel, index, cell[0], cell[1], config, scheme)
        except _INFEASIBLE as exc:
            return exc
        except CausalPanelError as exc:
            if config.on_error == "skip":
                return exc
            raise

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(run, cells))
    else:
        out = [run(c) for c in cells]
    effects, skipped = [], {}
    for cell, res in zip(cells, out):
        if isinstance(res, Exception):
            skipped[cell] = f"{type(res).__name__}: {res}"
            log.info("skipped cell %s: %s", cell, skipped[cell])
        else:
            effects.append(res)
    return GroupTimeResults(effects, skipped, panel.n_units, panel.year_range, panel.cohort)
