"""Synthetic staggered-adoption panels with known effects, and a Monte Carlo harness.

Untreated outcomes are built as

    Y_it(0) = base + alpha_i + xi_t + lambda_i' f_t + x_trend * h(x_i) * s_t
              + beta_sales * sales_it + beta_smoking * smoking_it + eps_it

with ``s_t`` a centred linear time index. Cohorts are drawn from a
multinomial logit in ``x_i``, so ``x`` drives selection (``x_selection``) and
may also drive trends (``x_trend``). Loadings are correlated with adoption
timing through ``loading_adoption_correlation``, which makes the factor term a
confounder that breaks parallel trends. Binary outcomes clamp the latent
probability to [0.01, 0.99] and use one uniform draw per cell for both
potential outcomes.
"""

from __future__ import annotations

import enum
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd

from .core import COHORT_COLUMN, CohortPanel, build_cohort_index, validate_panel
from .errors import CausalPanelError, InfeasibleSpec

log = logging.getLogger(__name__)


class OutcomeKind(str, enum.Enum):
    LINEAR = "linear"
    BINARY = "binary"


@dataclass(frozen=True)
class DgpSpec:
    n_units: int = 1000
    years: tuple[int, int] = (1993, 2017)
    cohort_shares: Mapping[int, float] = field(
        default_factory=lambda: {2005: 0.2, 2007: 0.2, 2009: 0.2, 2011: 0.2}
    )
    never_treated_share: float = 0.2
    true_effect: float = -0.05
    effect_path: Mapping[int, float] | None = None
    factor_rank: int = 0
    loading_adoption_correlation: float = 0.0
    factor_strength: float = 0.0
    covariate_effects: Mapping[str, float] = field(default_factory=dict)
    noise_sd: float = 0.05
    outcome_kind: OutcomeKind = OutcomeKind.BINARY
    attrition: str = "none"
    seed: int = 0
    x_selection: float = 0.0
    x_selection_form: str = "linear"
    x_trend: float = 0.0
    x_trend_form: str = "linear"
    unit_effect_sd: float = 0.1
    base_rate: float = 0.3
    n_regions: int = 26

    def __post_init__(self):
        object.__setattr__(self, "outcome_kind", OutcomeKind(self.outcome_kind))
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))
        object.__setattr__(self, "cohort_shares", {int(g): float(s) for g, s in dict(self.cohort_shares).items()})
        if self.effect_path is not None:
            object.__setattr__(self, "effect_path", {int(e): float(v) for e, v in dict(self.effect_path).items()})
        object.__setattr__(self, "covariate_effects", {str(k): float(v) for k, v in dict(self.covariate_effects).items()})

    def effect(self, e: np.ndarray) -> np.ndarray:
        """True effect at event times ``e`` (zero before treatment)."""
        e = np.asarray(e)
        out = np.where(e >= 0, self.true_effect, 0.0)
        if self.effect_path:
            for k, v in self.effect_path.items():
                out = np.where(e == k, v, out)
        return out

    def check(self) -> None:
        t0, t1 = self.years
        if t1 <= t0:
            raise InfeasibleSpec("need at least two years")
        if self.n_units < 2:
            raise InfeasibleSpec("need at least two units")
        total = sum(self.cohort_shares.values()) + self.never_treated_share
        if abs(total - 1.0) > 1e-9:
            raise InfeasibleSpec(f"cohort and never-treated shares sum to {total}, not 1")
        if any(s < 0 for s in self.cohort_shares.values()) or self.never_treated_share < 0:
            raise InfeasibleSpec("shares must be non-negative")
        for g in self.cohort_shares:
            if not t0 < g <= t1:
                raise InfeasibleSpec(f"cohort {g} outside ({t0}, {t1}]")
        if self.noise_sd < 0:
            raise InfeasibleSpec("noise_sd must be >= 0")
        if self.factor_rank not in (0, 1, 2):
            raise InfeasibleSpec("factor_rank must be 0, 1 or 2")
        if not -1.0 <= self.loading_adoption_correlation <= 1.0:
            raise InfeasibleSpec("loading_adoption_correlation must lie in [-1, 1]")
        if self.attrition not in ("none", "waves"):
            raise InfeasibleSpec("attrition must be 'none' or 'waves'")
        if self.x_selection_form not in ("linear", "quadratic") or self.x_trend_form not in ("linear", "quadratic"):
            raise InfeasibleSpec("forms must be 'linear' or 'quadratic'")
        unknown = set(self.covariate_effects) - {"sales_ban", "smoking_ban"}
        if unknown:
            raise InfeasibleSpec(f"unknown covariates {sorted(unknown)}")
        if self.n_regions < 1:
            raise InfeasibleSpec("n_regions must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["outcome_kind"] = self.outcome_kind.value
        d["years"] = list(self.years)
        d["cohort_shares"] = {str(g): s for g, s in self.cohort_shares.items()}
        if self.effect_path is not None:
            d["effect_path"] = {str(e): v for e, v in self.effect_path.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "DgpSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise InfeasibleSpec(f"unknown spec fields {sorted(extra)}")
        return cls(**dict(d))


@dataclass(frozen=True)
class GroundTruth:
    """Exact effects implied by the realized draw.

    ``atet_e``: mean true effect over treated cells at each event time
    (all observed cells, pre-treatment ones are 0). ``atet_gt``: the same per
    (cohort, year). ``n_e``: number of treated cells per event time.
    """

    atet_e: dict
    atet_gt: dict
    n_e: dict
    cohort_sizes: dict

    def cohort_weighted(self, e: int) -> float:
        """Cohort-size-weighted average of ATET(g, g+e), the DiD event-time estimand."""
        cells = [(g, v) for (g, t), v in self.atet_gt.items() if t - g == e]
        if not cells:
            return float("nan")
        w = np.array([self.cohort_sizes[g] for g, _ in cells], dtype=float)
        return float(np.dot(w, [v for _, v in cells]) / w.sum())

    def to_dict(self) -> dict:
        return {
            "atet_e": {str(k): v for k, v in sorted(self.atet_e.items())},
            "n_e": {str(k): v for k, v in sorted(self.n_e.items())},
            "atet_gt": [{"g": g, "t": t, "atet": v} for (g, t), v in sorted(self.atet_gt.items())],
            "cohort_sizes": {str(k): v for k, v in sorted(self.cohort_sizes.items())},
        }


def _h(x: np.ndarray, form: str) -> np.ndarray:
    return x if form == "linear" else x ** 2 - 1.0


def generate(spec: DgpSpec = DgpSpec()) -> tuple[CohortPanel, GroundTruth]:
    spec.check()
    rng = np.random.default_rng(spec.seed)
    t0, t1 = spec.years
    years = np.arange(t0, t1 + 1)
    T, N = len(years), spec.n_units

    # cohorts: multinomial logit in x
    x = rng.standard_normal(N)
    groups = sorted(spec.cohort_shares)
    labels = np.array(groups + [0], dtype=np.int64)
    shares = np.array([spec.cohort_shares[g] for g in groups] + [spec.never_treated_share])
    with np.errstate(divide="ignore"):
        util = np.log(shares)[None, :] + np.outer(_h(x, spec.x_selection_form), [spec.x_selection] * len(groups) + [0.0])
    util -= util.max(axis=1, keepdims=True)
    prob = np.exp(util)
    prob /= prob.sum(axis=1, keepdims=True)
    u = rng.random(N)
    pick = np.minimum((prob.cumsum(axis=1) < u[:, None]).sum(axis=1), len(labels) - 1)
    cohort = labels[pick]

    # unit / time effects
    alpha = spec.unit_effect_sd * rng.standard_normal(N)
    xi = -0.004 * (years - t0) + 0.01 * rng.standard_normal(T)
    s = (years - years.mean()) / max(T - 1, 1)

    # factors with loadings tied to adoption timing
    lam = np.zeros((N, 0))
    f = np.zeros((T, 0))
    if spec.factor_rank:
        timing = np.where(cohort > 0, (t1 + 1 - cohort).astype(float), 0.0)
        score = (timing - timing.mean()) / (timing.std() or 1.0)
        rho = spec.loading_adoption_correlation
        cols_l, cols_f = [], []
        trend = (years - t0) / max(T - 1, 1) - 0.5
        cycle = np.sin(2 * np.pi * (years - t0) / 8.0)
        for k in range(spec.factor_rank):
            z = rng.standard_normal(N)
            lk = rho * score + np.sqrt(1 - rho ** 2) * z if k == 0 else z
            cols_l.append(lk)
            cols_f.append(spec.factor_strength * (trend * 2.0 if k == 0 else cycle))
        lam = np.column_stack(cols_l)
        f = np.column_stack(cols_f)

    # region-level policy covariates (absorbing)
    region = rng.integers(0, spec.n_regions, size=N)
    sales_start = rng.integers(t0 + 1, t1 + 4, size=spec.n_regions)
    smoke_start = rng.integers(t0 + 1, t1 + 4, size=spec.n_regions)
    sales = (years[None, :] >= sales_start[region][:, None]).astype(float)
    smoking = (years[None, :] >= smoke_start[region][:, None]).astype(float)

    y0 = (alpha[:, None] + xi[None, :] + lam @ f.T
          + spec.x_trend * _h(x, spec.x_trend_form)[:, None] * s[None, :]
          + spec.covariate_effects.get("sales_ban", 0.0) * sales
          + spec.covariate_effects.get("smoking_ban", 0.0) * smoking)
    event = years[None, :] - cohort[:, None]
    treated = (cohort[:, None] > 0) & (event >= 0)
    tau = np.where(treated, spec.effect(event), 0.0)
    noise = spec.noise_sd * rng.standard_normal((N, T))

    if spec.outcome_kind is OutcomeKind.BINARY:
        p0 = np.clip(spec.base_rate + y0 + noise, 0.01, 0.99)
        p1 = np.clip(spec.base_rate + y0 + noise + tau, 0.01, 0.99)
        U = rng.random((N, T))
        y = np.where(treated, U < p1, U < p0).astype(float)
        cell_effect = np.where(treated, p1 - p0, 0.0)
    else:
        y = y0 + noise + tau
        cell_effect = tau

    # observation pattern
    observed = np.ones((N, T), dtype=bool)
    age_now = np.full(N, 40)
    if spec.attrition == "waves":
        waves = np.unique(np.linspace(t1, t0 + min(4, T - 1), 5).round().astype(int))
        survey = rng.choice(waves, size=N)
        age_now = rng.integers(15, 81, size=N)
        start = np.maximum(t0, survey - (age_now - 15))
        observed = (years[None, :] >= start[:, None]) & (years[None, :] <= survey[:, None])
        age = age_now[:, None] - (survey[:, None] - years[None, :])
    else:
        age = age_now[:, None] - (t1 - years[None, :])
    gender = rng.integers(0, 2, size=N)

    ui, ti = np.nonzero(observed)
    frame = pd.DataFrame({
        "unit_id": ui.astype(np.int64),
        "region_id": np.char.add("R", region[ui].astype(str)),
        "year": years[ti],
        "outcome": y[ui, ti],
        "treated": treated[ui, ti].astype(np.int8),
        "age": age[ui, ti].astype(np.int64),
        "gender": gender[ui],
        "x": x[ui],
        "sales_ban": sales[ui, ti],
        "smoking_ban": smoking[ui, ti],
        COHORT_COLUMN: np.where(cohort[ui] > 0, cohort[ui], np.nan),
    })
    panel = validate_panel(frame, binary_outcome=spec.outcome_kind is OutcomeKind.BINARY)

    tr_cells = treated & observed
    atet_e, n_e, atet_gt = {}, {}, {}
    for e in np.unique(event[tr_cells]):
        sel = tr_cells & (event == e)
        atet_e[int(e)] = float(cell_effect[sel].mean())
        n_e[int(e)] = int(sel.sum())
    for g in groups:
        for j, t in enumerate(years):
            sel = observed[:, j] & (cohort == g)
            if sel.any():
                atet_gt[(g, int(t))] = float(cell_effect[sel, j].mean())
    sizes = {g: int((cohort == g).sum()) for g in groups}
    return panel, GroundTruth(atet_e, atet_gt, n_e, sizes)


def synthetic_survey(
    n_records: int = 1000,
    waves: Sequence[int] = (1997, 2002, 2007, 2012, 2017),
    seed: int = 0,
    regions: Sequence[str] | None = None,
    unknown_share: float = 0.028,
    range_share: float = 0.1,
) -> pd.DataFrame:
    """Cross-sectional survey records in the reconstruction input layout.

    Respondents are spread evenly over ``waves`` and ``regions`` (the built-in
    policy regions by default). Ages run 15 to 85; initiation ages 12 to 25
    (never above the age at survey). A share ``range_share`` of former smokers
    report a cessation range instead of a point, and ``unknown_share`` of all
    records have unknown status.
    """
    if n_records < 1:
        raise InfeasibleSpec("n_records must be >= 1")
    if regions is None:
        from .policy import load_builtin_events

        regions = sorted({e.region_id for e in load_builtin_events()})
    rng = np.random.default_rng(seed)
    n = n_records
    wave = np.asarray(waves, dtype=np.int64)[np.arange(n) % len(waves)]
    region = np.asarray(regions, dtype=object)[rng.integers(0, len(regions), size=n)]
    age = rng.integers(15, 86, size=n)
    gender = rng.integers(0, 2, size=n)
    status = rng.choice(np.array(["never", "current", "former"]), size=n, p=[0.5, 0.28, 0.22])
    status = np.where(rng.random(n) < unknown_share, "unknown", status)
    init = np.minimum(rng.integers(12, 26, size=n), age).astype(float)
    cess = np.floor(init + rng.random(n) * (age - init + 1)).clip(max=age)
    is_range = (status == "former") & (rng.random(n) < range_share) & (cess < age)
    hi = np.minimum(cess + rng.integers(1, 6, size=n), age)
    smoker = (status == "current") | (status == "former")
    nan = np.full(n, np.nan)
    frame = pd.DataFrame({
        "respondent_id": [f"r{i:06d}" for i in range(n)],
        "survey_year": wave,
        "age": age,
        "gender": gender,
        "region_id": region,
        "status": status,
        "init_age": np.where(smoker, init, nan),
        "cess_age": np.where((status == "former") & ~is_range, cess, nan),
        "cess_lo": np.where(is_range, cess, nan),
        "cess_hi": np.where(is_range, hi, nan),
    })
    for c in ("init_age", "cess_age", "cess_lo", "cess_hi"):
        frame[c] = frame[c].astype("Int64")
    return frame


# ---------------------------------------------------------------------------
# Monte Carlo harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimatorRun:
    """One replicate's event-time output: estimates, SEs, p-values and (optional) rank."""

    table: pd.DataFrame
    rank: int | None = None


EstimatorFn = Callable[[CohortPanel], EstimatorRun]


def did_estimator(config=None, weighting: str = "cohort") -> EstimatorFn:
    from .did import DidConfig, estimate_all
    from .eventstudy import aggregate_event_study

    config = config or DidConfig()

    def run(panel: CohortPanel) -> EstimatorRun:
        index = build_cohort_index(panel)
        res = estimate_all(panel, index, config)
        es = aggregate_event_study(res, index, config.event_window, weighting)
        return EstimatorRun(es.table)

    run.estimand = "cohort"
    return run


def ifect_estimator(config=None) -> EstimatorFn:
    from .ifect import IfectConfig, estimate_ifect

    config = config or IfectConfig()

    def run(panel: CohortPanel) -> EstimatorRun:
        res = estimate_ifect(panel, config)
        return EstimatorRun(res.event_study.table, res.model.rank)

    run.estimand = "cell"
    return run


def replicate_seed(master: int, rep: int) -> int:
    return int(np.random.SeedSequence([int(master), int(rep)]).generate_state(1)[0])


@dataclass
class BenchmarkReport:
    """Per (spec, estimator, event time) Monte Carlo summary; wall-clock kept apart."""

    table: pd.DataFrame
    replicates: pd.DataFrame = field(repr=False)
    timings: pd.DataFrame = field(repr=False)

    def to_csv(self, path) -> None:
        self.table.to_csv(path, index=False, lineterminator="\n", float_format="%.10g")

    def to_json(self) -> str:
        return json.dumps(json.loads(self.table.to_json(orient="records", double_precision=12)), indent=2)


def benchmark(
    specs: Mapping[str, DgpSpec] | Sequence[DgpSpec],
    estimators: Mapping[str, EstimatorFn],
    reps: int,
    threads: int = 1,
) -> BenchmarkReport:
    """Run every estimator on ``reps`` draws of every spec.

    Replicate ``r`` of a spec uses seed ``replicate_seed(spec.seed, r)``; the
    report is a deterministic function of the specs. ``mean_rank`` is filled
    for estimators that select a rank. Failed replicates are counted in
    ``n_failed`` and left out of the averages.
    """
    from concurrent.futures import ThreadPoolExecutor

    if not isinstance(specs, Mapping):
        specs = {f"spec{i}": s for i, s in enumerate(specs)}
    if not specs or not estimators:
        raise ValueError("need at least one spec and one estimator")
    rows, timing_rows = [], []

    for sname, spec in specs.items():
        def one(r):
            panel, truth = generate(replace(spec, seed=replicate_seed(spec.seed, r)))
            out = []
            for ename, est in estimators.items():
                t_start = time.perf_counter()
                try:
                    run = est(panel)
                except CausalPanelError as exc:
                    log.warning("%s/%s rep %d failed: %s", sname, ename, r, exc)
                    out.append((ename, None, truth, time.perf_counter() - t_start))
                    continue
                out.append((ename, run, truth, time.perf_counter() - t_start))
            return r, out

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(one, range(reps)))
        else:
            results = [one(r) for r in range(reps)]
        for r, out in results:
            for ename, run, truth, secs in out:
                timing_rows.append((sname, ename, r, secs))
                if run is None:
                    rows.append((sname, ename, r, np.nan, np.nan, np.nan, np.nan, np.nan, np.nan, np.nan, 1, None))
                    continue
                estimand = getattr(estimators[ename], "estimand", "cell")
                for rec in run.table.itertuples(index=False):
                    e = int(rec.event_time)
                    if e < 0:
                        tv = 0.0
                    elif estimand == "cohort":
                        tv = truth.cohort_weighted(e)
                    else:
                        tv = truth.atet_e.get(e, 0.0)
                    rows.append((sname, ename, r, e, rec.estimate, rec.std_error, rec.p_value,
                                 rec.ci_lo, rec.ci_hi, tv, 0, run.rank))
    rep_cols = ["spec", "estimator", "rep", "event_time", "estimate", "std_error", "p_value",
                "ci_lo", "ci_hi", "truth", "failed", "rank"]
    rep_df = pd.DataFrame(rows, columns=rep_cols)
    summary = summarize_benchmark(rep_df)
    timings = pd.DataFrame(timing_rows, columns=["spec", "estimator", "rep", "seconds"])
    return BenchmarkReport(summary, rep_df, timings)


def summarize_benchmark(rep_df: pd.DataFrame) -> pd.DataFrame:
    ok = rep_df[rep_df["failed"] == 0]
    fails = rep_df[rep_df["failed"] == 1].groupby(["spec", "estimator"]).size()
    out = []
    for (s, e, k), grp in ok.groupby(["spec", "estimator", "event_time"], sort=True):
        err = grp["estimate"] - grp["truth"]
        n = len(grp)
        covered = (grp["ci_lo"] <= grp["truth"]) & (grp["truth"] <= grp["ci_hi"])
        has_se = grp["std_error"].notna()
        out.append({
            "spec": s, "estimator": e, "event_time": int(k), "n_reps": n,
            "truth": float(grp["truth"].mean()),
            "mean_estimate": float(grp["estimate"].mean()),
            "mean_bias": float(err.mean()),
            "mc_se": float(err.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan"),
            "rmse": float(np.sqrt(np.mean(err ** 2))),
            "coverage": float(covered[has_se].mean()) if has_se.any() else float("nan"),
            "rejection_rate": float((grp["p_value"] < 0.05)[has_se].mean()) if has_se.any() else float("nan"),
            "mean_rank": float(pd.to_numeric(grp["rank"], errors="coerce").mean()) if grp["rank"].notna().any() else float("nan"),
            "n_failed": int(fails.get((s, e), 0)),
        })
    return pd.DataFrame(out)
