"""Interactive fixed-effects counterfactual imputation.

Untreated potential outcomes follow

    Y_it(0) = X_it' beta + alpha_i + xi_t + lambda_i' f_t + eps_it.

The model is fitted on untreated cells only (never-treated rows and
pre-treatment rows of eventually treated units) by alternating two exact
steps:

(a) given the low-rank part ``L F'``, solve ``beta, alpha, xi`` by least
    squares on the untreated cells (two-way FE through a T x T reduced system,
    ``beta`` by partialling out the fixed effects);
(b) given ``beta, alpha, xi``, fill the cells that are not untreated-observed
    with the current ``L F'`` and take the rank-``r`` eigendecomposition of the
    filled residual Gram matrix (EM for the unbalanced panel).

Both steps weakly lower the untreated sum of squared residuals, which is
recorded per iteration. Treated cells are then imputed from the fit and the
individual effects ``Y - Y_hat(0)`` are averaged by event time.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.linalg import cho_factor, cho_solve

from . import _kernels
from .core import CohortPanel
from .errors import (
    CausalPanelError,
    InsufficientPretreatment,
    MissingFactorYear,
    NoTreatedUnits,
    NonConvergenceWarning,
    RankDeficient,
    SingularDesign,
)
from .eventstudy import EventStudyResult, event_study_from_replicates
from .inference import BootstrapSpec, cluster_bootstrap

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class IfectConfig:
    max_rank: int = 5
    rank: int | None = None
    cv_rounds: int = 5
    cv_holdout: float = 0.10
    em_tolerance: float = 1e-7
    max_iterations: int = 2000
    cv_max_iterations: int = 500
    bootstrap_reps: int = 200
    seed: int = 0
    covariates: tuple[str, ...] = ()
    event_window: tuple[int, int] = (-10, 5)
    stratify_bootstrap: bool = True

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "event_window", tuple(int(e) for e in self.event_window))
        if self.max_rank < 0:
            raise ValueError("max_rank must be >= 0")
        if self.rank is not None and self.rank < 0:
            raise ValueError("rank must be >= 0")
        if self.bootstrap_reps < 0:
            raise ValueError("bootstrap_reps must be >= 0")
        if not 0.0 < self.cv_holdout < 1.0:
            raise ValueError("cv_holdout must lie in (0, 1)")


@dataclass
class FactorModel:
    """Fitted untreated-outcome model on a unit x year grid.

    ``alpha`` is NaN for units without untreated cells; ``xi`` and ``f`` are
    NaN for years without untreated cells. ``lam`` holds the loadings from
    the EM fit (all units); treated units are re-estimated from their
    pre-treatment residuals at imputation.
    """

    beta: np.ndarray
    alpha: np.ndarray
    xi: np.ndarray
    lam: np.ndarray
    f: np.ndarray
    rank: int
    converged: bool
    iterations: int
    tolerance_achieved: float
    covariates: tuple[str, ...]
    years: np.ndarray
    mask: np.ndarray = field(repr=False)
    objective_path: list = field(default_factory=list, repr=False)
    excluded_units: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)

    def base(self, X: np.ndarray | None) -> np.ndarray:
        """``X beta + alpha_i + xi_t`` on the full grid."""
        out = self.alpha[:, None] + self.xi[None, :]
        if X is not None and len(self.beta):
            out = out + np.tensordot(X, self.beta, axes=([2], [0]))
        return out

    def fitted(self, X: np.ndarray | None) -> np.ndarray:
        return self.base(X) + self.lam @ self.f.T if self.rank else self.base(X)


# ---------------------------------------------------------------------------
# panel -> matrices
# ---------------------------------------------------------------------------


def untreated_mask(panel: CohortPanel) -> np.ndarray:
    """Observed, non-missing, untreated cells."""
    Y = panel.wide("outcome")
    years = panel.years
    g = panel.cohort
    treated = (g[:, None] > 0) & (years[None, :] >= g[:, None])
    return panel.observed & ~np.isnan(Y) & ~treated


def _covariate_cube(panel: CohortPanel, covariates) -> np.ndarray | None:
    if not covariates:
        return None
    return np.stack([panel.wide(c) for c in covariates], axis=2)


# ---------------------------------------------------------------------------
# step (a): exact two-way fixed effects (+ beta) on a mask
# ---------------------------------------------------------------------------


class _TwoWaySolver:
    """Least squares ``Z_it ~ alpha_i + xi_t`` over the cells in ``mask``, normalised so sum(xi) = 0.

    Eliminating ``alpha`` leaves the T x T system
    ``(diag(c) - M' diag(1/n) M + 11') xi = colsum - M' (rowsum / n)``;
    the ``11'`` term pins the free constant. Every year must have a cell.
    """

    def __init__(self, mask: np.ndarray):
        M = mask.astype(np.float64)
        n_i = M.sum(axis=1)
        self.row_ok = n_i > 0
        self.inv_n = np.where(self.row_ok, 1.0 / np.maximum(n_i, 1.0), 0.0)
        self.M = M
        A = np.diag(M.sum(axis=0)) - (M * self.inv_n[:, None]).T @ M + 1.0
        try:
            self.factor = cho_factor(A)
        except np.linalg.LinAlgError:
            raise SingularDesign("untreated cells do not connect all units and years") from None

    def from_margins(self, rows: np.ndarray, colsum: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        xi = cho_solve(self.factor, colsum - self.M.T @ (rows * self.inv_n))
        alpha = (rows - self.M @ xi) * self.inv_n
        return alpha, xi

    def solve(self, Z: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.from_margins(*_kernels.masked_margins(Z, mask))


class _FixedPart:
    """Step (a): ``beta`` from FE-residualised covariates (computed once), then ``alpha, xi``."""

    def __init__(self, Y0: np.ndarray, mask: np.ndarray, X: np.ndarray | None):
        self.Y0, self.mask = Y0, mask
        self.tw = _TwoWaySolver(mask)
        self.zero = np.zeros_like(Y0)
        self.K = 0 if X is None else X.shape[2]
        if not self.K:
            return
        self.X0 = np.where(mask[:, :, None], np.nan_to_num(X), 0.0)
        Xt = np.empty_like(self.X0)
        for k in range(self.K):
            a, x = self.tw.solve(self.X0[:, :, k], mask)
            Xt[:, :, k] = np.where(mask, self.X0[:, :, k] - a[:, None] - x[None, :], 0.0)
        G = np.einsum("itk,itl->kl", Xt, Xt)
        s = np.linalg.svd(G, compute_uv=False)
        if s[-1] <= s[0] * 1e-12:
            raise SingularDesign("time-varying covariates are collinear with the fixed effects")
        self.Xt = Xt
        self.G_inv = np.linalg.inv(G)
        self.XtY = np.einsum("itk,it->k", Xt, Y0)

    def solve(self, LF: np.ndarray):
        """Least squares of ``Y - LF`` on covariates and unit/year effects over the mask."""
        if self.K:
            beta = self.G_inv @ (self.XtY - np.einsum("itk,it->k", self.Xt, LF))
            XB = np.tensordot(self.X0, beta, axes=([2], [0]))
        else:
            beta, XB = np.zeros(0), self.zero
        alpha, xi = self.tw.from_margins(*_kernels.masked_margins_diff(self.Y0, self.mask, LF, XB))
        return beta, alpha, xi, XB


# ---------------------------------------------------------------------------
# step (b) and the alternation
# ---------------------------------------------------------------------------


@dataclass
class _State:
    beta: np.ndarray
    alpha: np.ndarray
    xi: np.ndarray
    XB: np.ndarray
    L: np.ndarray
    F: np.ndarray
    LF: np.ndarray
    ssr: float = np.inf


class _EM:
    """One EM map ``LF -> LF'`` (step a then step b) on the year columns that have cells."""

    def __init__(self, Y0, mask, X, rank):
        self.Y0, self.mask, self.rank = Y0, mask, rank
        self.fixed = _FixedPart(Y0, mask, X)
        self.R = np.empty_like(Y0)
        self.T = Y0.shape[1]

    def step(self, LF: np.ndarray) -> _State:
        beta, alpha, xi, XB = self.fixed.solve(LF)
        R = _kernels.em_fill(self.Y0, self.mask, LF, XB, alpha, xi, self.R)
        F = _leading_factors(R.T @ R, self.rank, self.T)
        L = R @ F / self.T
        return _State(beta, alpha, xi, XB, L, F, L @ F.T)

    def stats(self, new: _State, old: _State) -> tuple[float, float]:
        """(SSR of ``new`` on the mask, relative change of the fit from ``old``)."""
        ssr, dfit, fit2 = _kernels.em_stats(self.Y0, self.mask, new.LF, new.XB, new.alpha, new.xi,
                                            old.LF, old.XB, old.alpha, old.xi)
        return float(ssr), float(np.sqrt(dfit / max(fit2, 1e-300)))


def _leading_factors(G: np.ndarray, r: int, T: int) -> np.ndarray:
    """``sqrt(T)`` times the top-``r`` eigenvectors of ``G``, signs fixed so each column sums >= 0."""
    vals, vecs = np.linalg.eigh(G)
    V = vecs[:, ::-1][:, :r]
    V = V * np.where(V.sum(axis=0) < 0, -1.0, 1.0)
    return np.sqrt(T) * V


def fit_factor_model(
    panel: CohortPanel,
    rank: int,
    covariates=(),
    config: IfectConfig = IfectConfig(),
    mask: np.ndarray | None = None,
    init_factors: np.ndarray | None = None,
    accelerate: bool = True,
    warn: bool = True,
) -> FactorModel:
    """Fit the interactive fixed-effects model on untreated cells.

    ``mask`` overrides the untreated-cell set (used for cross-validation).
    Treated units with fewer than ``max(rank, 1)`` untreated periods are
    excluded (counted in ``excluded_units``). ``init_factors`` (years x rank)
    warm-starts the factors, e.g. from the point fit when bootstrapping.

    With ``accelerate`` the EM map is extrapolated SQUAREM-style over the
    low-rank matrix ``L F'``; an extrapolated state is kept only if its
    untreated SSR is no larger than that of the plain EM steps it replaces,
    so the recorded objective stays non-increasing. Convergence is declared
    when one plain EM step changes the fitted untreated cells by less than
    ``em_tolerance`` in relative norm. Hitting ``max_iterations`` emits a
    :class:`NonConvergenceWarning` unless ``warn`` is false (the result's
    ``converged`` flag records it either way).
    """
    covariates = tuple(covariates)
    if rank < 0:
        raise ValueError("rank must be >= 0")
    Y = panel.wide("outcome")
    mask = untreated_mask(panel) if mask is None else mask.copy()
    X = _covariate_cube(panel, covariates)
    if X is not None:
        mask &= ~np.isnan(X).any(axis=2)
        covariates, X = _drop_time_invariant(covariates, X, mask)

    counts = mask.sum(axis=1)
    excluded = np.flatnonzero((panel.cohort > 0) & (counts < max(rank, 1)))
    if len(excluded):
        log.info("excluding %d treated units with fewer than %d pre-treatment periods", len(excluded), max(rank, 1))
        mask[excluded] = False

    cols = np.flatnonzero(mask.any(axis=0))
    T = len(cols)
    units_fit = int(mask.any(axis=1).sum())
    if rank > 0 and (rank > T - 1 or rank > units_fit - 1):
        raise RankDeficient(f"rank {rank} not identified with {T} years and {units_fit} units")

    mc = np.ascontiguousarray(mask[:, cols])
    Y0 = np.ascontiguousarray(np.where(mask, Y, 0.0)[:, cols])
    Xc = None if X is None else np.ascontiguousarray(X[:, cols, :])
    em = _EM(Y0, mc, Xc, rank)
    N = Y.shape[0]

    def finish(st: _State, converged: bool, iters: int, rel: float, path: list) -> FactorModel:
        xi = np.full(len(panel.years), np.nan)
        xi[cols] = st.xi
        F = np.full((len(panel.years), rank), np.nan)
        F[cols] = st.F
        alpha = np.where(em.fixed.tw.row_ok, st.alpha, np.nan)
        return FactorModel(st.beta, alpha, xi, st.L, F, rank, converged, iters, rel, covariates,
                           panel.years, mask, path, excluded)

    zero = np.zeros_like(Y0)
    if rank == 0:
        beta, alpha, xi, XB = em.fixed.solve(zero)
        st = _State(beta, alpha, xi, XB, np.zeros((N, 0)), np.zeros((T, 0)), zero)
        ssr, _ = em.stats(st, st)
        return finish(st, True, 1, 0.0, [ssr])

    if init_factors is not None:
        beta, alpha, xi, XB = em.fixed.solve(zero)
        F0 = np.ascontiguousarray(np.asarray(init_factors, dtype=np.float64)[cols])
        resid = np.where(mc, Y0 - XB - alpha[:, None] - xi[None, :], 0.0)
        L0, _ = _kernels.unit_loadings(resid, mc, F0, 1)
        L0 = np.nan_to_num(L0)
        cur = _State(beta, alpha, xi, XB, L0, F0, L0 @ F0.T)
    else:
        cur = em.step(zero)
    cur.ssr, _ = em.stats(cur, cur)
    path = [cur.ssr]
    iters, rel, converged = 1, np.inf, False
    max_it = config.max_iterations

    def advance(prev: _State) -> tuple[_State, float]:
        nxt = em.step(prev.LF)
        nxt.ssr, r = em.stats(nxt, prev)
        return nxt, r

    while iters < max_it:
        s1, rel = advance(cur)
        iters += 1
        path.append(s1.ssr)
        if rel < config.em_tolerance:
            cur, converged = s1, True
            break
        if not accelerate or iters + 2 > max_it:
            cur = s1
            continue
        s2, rel = advance(s1)
        iters += 1
        path.append(s2.ssr)
        if rel < config.em_tolerance:
            cur, converged = s2, True
            break
        r = s1.LF - cur.LF
        v = s2.LF - s1.LF - r
        nv = np.sqrt(np.sum(v * v))
        if nv == 0.0:
            cur = s2
            continue
        step = min(-1.0, -np.sqrt(np.sum(r * r)) / nv)
        s3 = em.step(cur.LF - 2.0 * step * r + step * step * v)
        iters += 1
        s3.ssr, _ = em.stats(s3, s3)
        if s3.ssr <= s2.ssr:
            path.append(s3.ssr)
            cur = s3
        else:
            cur = s2
    if not converged and warn:
        warnings.warn(
            f"factor model (rank {rank}) stopped after {max_it} iterations, relative change {rel:.3g}",
            NonConvergenceWarning, stacklevel=2,
        )
    return finish(cur, converged, iters, float(rel), path)


def _drop_time_invariant(covariates, X, mask):
    keep = []
    for k, name in enumerate(covariates):
        xk = X[:, :, k]
        hi = np.where(mask, xk, -np.inf).max(axis=1)
        lo = np.where(mask, xk, np.inf).min(axis=1)
        spread = np.where(mask.any(axis=1), hi - lo, 0.0)
        if np.all(spread == 0):
            warnings.warn(f"covariate {name!r} is constant within units and is absorbed by the unit effects; dropped",
                          UserWarning, stacklevel=3)
            continue
        keep.append(k)
    return tuple(covariates[k] for k in keep), (X[:, :, keep] if keep else None)


# ---------------------------------------------------------------------------
# rank selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RankSelection:
    rank: int
    mspe: np.ndarray


def select_rank(panel: CohortPanel, config: IfectConfig = IfectConfig(), threads: int = 1) -> RankSelection:
    """Cross-validated rank: hold out ``cv_holdout`` of untreated cells per round.

    The same held-out sets are used for every candidate rank. Returns the
    argmin of mean squared prediction error, smallest rank on ties. Fits
    inside the cross-validation stop after ``cv_max_iterations``: over-fitted
    ranks converge very slowly while their prediction error has long settled.
    """
    if config.max_rank == 0:
        return RankSelection(0, np.array([np.nan]))
    base_mask = untreated_mask(panel)
    if config.covariates:
        X = _covariate_cube(panel, config.covariates)
        base_mask &= ~np.isnan(X).any(axis=2)
    cells = np.flatnonzero(base_mask.ravel())
    n_out = int(round(config.cv_holdout * len(cells)))
    if n_out < 1:
        raise InsufficientPretreatment("too few untreated cells to hold any out")
    seeds = np.random.SeedSequence([config.seed, 7919]).spawn(config.cv_rounds)
    Y = panel.wide("outcome")
    Xc = _covariate_cube(panel, config.covariates)
    R = config.max_rank + 1
    cv_config = replace(config, max_iterations=min(config.max_iterations, config.cv_max_iterations))

    def round_k(k):
        rng = np.random.default_rng(seeds[k])
        held = rng.choice(cells, size=n_out, replace=False)
        train = base_mask.copy().ravel()
        train[held] = False
        train = train.reshape(base_mask.shape)
        hi, ht = np.unravel_index(held, base_mask.shape)
        out = np.full(R, np.nan)
        for r in range(R):
            try:
                m = fit_factor_model(panel, r, config.covariates, cv_config, mask=train, warn=False)
            except (RankDeficient, SingularDesign) as exc:
                log.info("cv round %d rank %d infeasible: %s", k, r, exc)
                continue
            pred = m.fitted(Xc)[hi, ht]
            ok = ~np.isnan(pred)
            out[r] = float(np.mean((Y[hi, ht][ok] - pred[ok]) ** 2))
        return out

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            res = list(pool.map(round_k, range(config.cv_rounds)))
    else:
        res = [round_k(k) for k in range(config.cv_rounds)]
    mspe = np.mean(np.vstack(res), axis=0)
    if np.all(np.isnan(mspe)):
        raise RankDeficient("no candidate rank could be fitted")
    best = int(np.nanargmin(mspe))
    return RankSelection(best, mspe)


# ---------------------------------------------------------------------------
# imputation
# ---------------------------------------------------------------------------


@dataclass
class Imputation:
    """Per-cell effects for included treated units and their event-time averages."""

    table: pd.DataFrame
    delta: np.ndarray = field(repr=False)
    event: np.ndarray = field(repr=False)
    n_excluded: int = 0


def impute_and_average(
    panel: CohortPanel, model: FactorModel, window: tuple[int, int] = (-10, 5)
) -> Imputation:
    """Impute ``Y(0)`` for treated units and average ``Y - Y_hat(0)`` by event time.

    Post-treatment event times give ATET(e); pre-treatment event times give
    the average in-sample residual of the same units (a fit diagnostic).
    ``n_treated`` counts the cells averaged at each event time.
    """
    Y = panel.wide("outcome")
    g = panel.cohort
    years = panel.years
    X = _covariate_cube(panel, model.covariates)
    treated_units = np.flatnonzero(g > 0)
    if len(treated_units) == 0:
        raise NoTreatedUnits("no treated units to impute")
    keep = np.setdiff1d(treated_units, model.excluded_units)
    if len(keep) == 0:
        raise InsufficientPretreatment("every treated unit lacks enough pre-treatment periods")
    keep = keep[model.mask[keep].any(axis=1)]
    if len(keep) == 0:
        raise InsufficientPretreatment("no treated unit has untreated cells to anchor its unit effect")

    base = model.base(X)[keep]
    if model.rank:
        cols = np.flatnonzero(~np.isnan(model.xi))
        resid = np.where(model.mask[keep], Y[keep] - base, 0.0)
        L, ok = _kernels.unit_loadings(
            np.ascontiguousarray(resid[:, cols]), np.ascontiguousarray(model.mask[keep][:, cols]),
            np.ascontiguousarray(model.f[cols]), model.rank,
        )
        fit = base + L @ model.f.T
    else:
        fit = base
    event = years[None, :] - g[keep][:, None]
    obs = panel.observed[keep] & ~np.isnan(Y[keep])
    post = obs & (event >= 0)
    pre = model.mask[keep]
    if np.any(post & np.isnan(fit)):
        bad = np.unique(np.broadcast_to(years, post.shape)[post & np.isnan(fit)])
        raise MissingFactorYear(f"no untreated cells to estimate year effects for {bad.tolist()}")
    delta = np.where(post | pre, Y[keep] - fit, np.nan)
    lo, hi = window
    rows = []
    for e in range(lo, hi + 1):
        sel = (event == e) & (post if e >= 0 else pre)
        n_e = int(sel.sum())
        if n_e == 0:
            continue
        rows.append((e, float(delta[sel].mean()), n_e))
    table = pd.DataFrame(rows, columns=["event_time", "estimate", "n_treated"])
    return Imputation(table, delta, event, int(len(treated_units) - len(keep)))


# ---------------------------------------------------------------------------
# full estimator: rank selection + fit + imputation + bootstrap
# ---------------------------------------------------------------------------


@dataclass
class IfectResult:
    event_study: EventStudyResult
    model: FactorModel
    rank_selection: RankSelection | None
    imputation: Imputation
    n_failed_replicates: int = 0


def estimate_ifect(panel: CohortPanel, config: IfectConfig = IfectConfig(), threads: int = 1) -> IfectResult:
    """Point estimates with cluster-bootstrap inference at the selected rank.

    The rank is ``config.rank`` when given, otherwise chosen by
    :func:`select_rank`. Replicates refit at that fixed rank, warm-started
    from the point-estimate factors. With ``bootstrap_reps=0`` standard errors
    are NaN.
    """
    sel = None
    if config.rank is None:
        sel = select_rank(panel, config, threads)
        rank = sel.rank
    else:
        rank = config.rank
    model = fit_factor_model(panel, rank, config.covariates, config)
    imp = impute_and_average(panel, model, config.event_window)
    table = imp.table.assign(n_cohorts=0)
    es_list = imp.table["event_time"].tolist()
    n_failed = 0
    if config.bootstrap_reps > 0:
        def statistic(p: CohortPanel) -> np.ndarray:
            m = fit_factor_model(p, rank, config.covariates, config, init_factors=model.f if rank else None,
                                 warn=False)
            t = impute_and_average(p, m, config.event_window).table.set_index("event_time")["estimate"]
            return t.reindex(es_list).to_numpy(dtype=np.float64)

        spec = BootstrapSpec(config.bootstrap_reps, config.seed, config.stratify_bootstrap)
        boot = cluster_bootstrap(statistic, panel, spec=spec, threads=threads,
                                 point=imp.table["estimate"].to_numpy())
        reps, n_failed = boot.replicates, boot.n_failed
    else:
        reps = np.full((1, len(es_list)), np.nan)
    es = event_study_from_replicates(table, reps)
    return IfectResult(es, model, sel, imp, n_failed)
