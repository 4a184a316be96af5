"""Cluster-aware standard errors: influence-function aggregation and cluster bootstrap.

Influence values are stored sparsely as an :class:`InfluenceVector` (unit
codes plus values) on the full-sample scale, so that the estimator is
``theta_hat - theta ~ mean over all n units of psi_i``. Linear aggregates of
estimators are then linear combinations of their vectors.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, NamedTuple

import numpy as np
from scipy.stats import norm

from .core import CohortPanel
from .errors import CausalPanelError, EmptyStratum, InferenceError, SingleCluster, TooManyFailedReplicates

log = logging.getLogger(__name__)

Z95 = float(norm.ppf(0.975))


@dataclass(frozen=True)
class ClusterScheme:
    """Maps each unit (by position in ``panel.unit_ids``) to a cluster code."""

    cluster_of: np.ndarray

    @classmethod
    def by_unit(cls, n_units: int) -> "ClusterScheme":
        return cls(np.arange(n_units))

    @classmethod
    def from_mapping(cls, unit_ids: Iterable, mapping: Mapping) -> "ClusterScheme":
        unit_ids = list(unit_ids)
        missing = [u for u in unit_ids if u not in mapping]
        if missing:
            raise InferenceError(f"cluster map does not cover unit {missing[0]!r}")
        _, codes = np.unique(np.array([str(mapping[u]) for u in unit_ids], dtype=object), return_inverse=True)
        return cls(codes.astype(np.int64))

    @property
    def n_units(self) -> int:
        return len(self.cluster_of)

    @property
    def n_clusters(self) -> int:
        return int(self.cluster_of.max()) + 1 if len(self.cluster_of) else 0


@dataclass(frozen=True)
class InfluenceVector:
    """Sparse per-unit influence contributions; absent units contribute 0."""

    units: np.ndarray
    values: np.ndarray
    n: int

    @classmethod
    def dense(cls, values: np.ndarray) -> "InfluenceVector":
        values = np.asarray(values, dtype=np.float64)
        return cls(np.arange(len(values)), values, len(values))

    @classmethod
    def combine(cls, terms: Iterable[tuple[float, "InfluenceVector"]]) -> "InfluenceVector":
        terms = [(w, v) for w, v in terms]
        if not terms:
            raise InferenceError("nothing to combine")
        n = terms[0][1].n
        if any(v.n != n for _, v in terms):
            raise InferenceError("influence vectors refer to different samples")
        units = np.concatenate([v.units for _, v in terms])
        vals = np.concatenate([w * v.values for w, v in terms])
        uniq, inv = np.unique(units, return_inverse=True)
        return cls(uniq, np.bincount(inv, weights=vals, minlength=len(uniq)), n)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.n)
        np.add.at(out, self.units, self.values)
        return out


class SEResult(NamedTuple):
    std_error: float
    p_value: float
    ci: tuple[float, float]


def normal_inference(estimate: float, se: float, level: float = 0.95) -> SEResult:
    """Two-sided normal p-value and symmetric CI; a zero SE gives a degenerate CI."""
    z = float(norm.ppf(0.5 + level / 2))
    if not np.isfinite(se):
        return SEResult(float("nan"), float("nan"), (float("nan"), float("nan")))
    if se == 0.0:
        p = 1.0 if estimate == 0.0 else 0.0
        return SEResult(0.0, p, (estimate, estimate))
    p = float(2 * norm.sf(abs(estimate) / se))
    return SEResult(float(se), p, (estimate - z * se, estimate + z * se))


def influence_se(
    influence: InfluenceVector | np.ndarray,
    scheme: ClusterScheme | None = None,
    estimate: float = 0.0,
    level: float = 0.95,
) -> SEResult:
    """Cluster-robust SE from influence values.

    ``se = sqrt(C * var(s_c)) / n`` with ``s_c`` the cluster sums over all
    ``C`` clusters (clusters without contributions count as zeros), ``var``
    the unbiased sample variance and ``n`` the number of units.
    """
    if not isinstance(influence, InfluenceVector):
        influence = InfluenceVector.dense(influence)
    if scheme is None:
        scheme = ClusterScheme.by_unit(influence.n)
    if scheme.n_units != influence.n:
        raise InferenceError(f"cluster scheme covers {scheme.n_units} units, influence has {influence.n}")
    C = scheme.n_clusters
    if C < 2:
        raise SingleCluster("need at least two clusters")
    sums = np.bincount(scheme.cluster_of[influence.units], weights=influence.values, minlength=C)
    var = float(np.var(sums, ddof=1))
    se = float(np.sqrt(C * var)) / influence.n
    return normal_inference(estimate, se, level)


def multiplier_bootstrap_se(
    influences: list[InfluenceVector], scheme: ClusterScheme | None = None, reps: int = 999, seed: int = 0
) -> np.ndarray:
    """Rademacher multiplier bootstrap SEs for several statistics sharing a sample.

    Cluster sums are perturbed by one draw per cluster, common to all
    statistics; returns the bootstrap standard deviation for each.
    """
    n = influences[0].n
    scheme = scheme or ClusterScheme.by_unit(n)
    C = scheme.n_clusters
    S = np.stack([np.bincount(scheme.cluster_of[v.units], weights=v.values, minlength=C) for v in influences], 1)
    S = S - S.mean(axis=0)
    rng = np.random.default_rng(seed)
    V = rng.choice(np.array([-1.0, 1.0]), size=(reps, C))
    draws = V @ S / n
    return draws.std(axis=0, ddof=1)


# ---------------------------------------------------------------------------
# cluster bootstrap
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BootstrapSpec:
    reps: int = 200
    seed: int = 0
    stratify_by_treatment: bool = True
    max_fail_share: float = 0.05

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be >= 1")


@dataclass(frozen=True)
class BootstrapResult:
    estimate: np.ndarray
    std_error: np.ndarray
    p_value: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    replicates: np.ndarray
    n_failed: int


def draw_clusters(
    panel: CohortPanel, scheme: ClusterScheme, stratify: bool, rng: np.random.Generator
) -> np.ndarray:
    """Unit codes of one cluster-resampled panel (each drawn cluster brings all its units)."""
    C = scheme.n_clusters
    order = np.argsort(scheme.cluster_of, kind="stable")
    bounds = np.searchsorted(scheme.cluster_of[order], np.arange(C + 1))
    if stratify:
        treated_cluster = np.zeros(C, dtype=bool)
        np.logical_or.at(treated_cluster, scheme.cluster_of, panel.cohort > 0)
        strata = [np.flatnonzero(treated_cluster), np.flatnonzero(~treated_cluster)]
        for s, name in zip(strata, ("ever-treated", "never-treated")):
            if len(s) == 0:
                raise EmptyStratum(f"no {name} clusters to resample")
    else:
        strata = [np.arange(C)]
    picks = np.concatenate([s[rng.integers(0, len(s), size=len(s))] for s in strata])
    if C == scheme.n_units and np.array_equal(scheme.cluster_of, np.arange(C)):
        return picks
    return np.concatenate([order[bounds[c]:bounds[c + 1]] for c in picks])


def cluster_bootstrap(
    estimator: Callable[[CohortPanel], np.ndarray],
    panel: CohortPanel,
    scheme: ClusterScheme | None = None,
    spec: BootstrapSpec = BootstrapSpec(),
    threads: int = 1,
    point: np.ndarray | None = None,
) -> BootstrapResult:
    """Resample clusters with replacement and re-run ``estimator`` on each draw.

    Replicate ``b`` uses the ``b``-th child of ``SeedSequence(spec.seed)`` and
    results are stored by replicate index, so the output does not depend on
    ``threads``. Drawn units get fresh ids, so a unit drawn twice is two units.
    """
    scheme = scheme or ClusterScheme.by_unit(panel.n_units)
    if scheme.n_clusters < 2:
        raise SingleCluster("need at least two clusters")
    if point is None:
        point = np.atleast_1d(np.asarray(estimator(panel), dtype=np.float64))
    k = len(point)
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.reps)
    # Validate strata up front so an empty stratum is reported, not counted as failures.
    draw_clusters(panel, scheme, spec.stratify_by_treatment, np.random.default_rng(0))

    def one(b: int):
        rng = np.random.default_rng(seeds[b])
        codes = draw_clusters(panel, scheme, spec.stratify_by_treatment, rng)
        try:
            out = np.atleast_1d(np.asarray(estimator(panel.take_units(codes)), dtype=np.float64))
        except (CausalPanelError, np.linalg.LinAlgError, FloatingPointError) as exc:
            log.debug("bootstrap replicate %d failed: %s", b, exc)
            return None
        if out.shape != (k,):
            raise InferenceError(f"estimator returned shape {out.shape}, expected ({k},)")
        return out

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(spec.reps)))
    else:
        results = [one(b) for b in range(spec.reps)]
    failed = sum(r is None for r in results)
    if failed > spec.max_fail_share * spec.reps:
        raise TooManyFailedReplicates(f"{failed} of {spec.reps} bootstrap replicates failed")
    reps = np.vstack([np.full(k, np.nan) if r is None else r for r in results])
    return summarize_replicates(point, reps, failed)


def summarize_replicates(point: np.ndarray, reps: np.ndarray, n_failed: int = 0) -> BootstrapResult:
    point = np.asarray(point, dtype=np.float64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        good = np.sum(~np.isnan(reps), axis=0)
        se = np.where(good >= 2, np.nanstd(reps, axis=0, ddof=1), np.nan)
        lo = np.nanpercentile(reps, 2.5, axis=0)
        hi = np.nanpercentile(reps, 97.5, axis=0)
    p = np.array([normal_inference(float(e), float(s)).p_value for e, s in zip(point, se)])
    return BootstrapResult(point, se, p, lo, hi, reps, int(n_failed))

