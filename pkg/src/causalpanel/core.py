"""Panel data model: validated long panels with staggered absorbing treatment.

A :class:`CohortPanel` wraps a long ``(unit_id, year)``-sorted frame and keeps a
per-unit first-treatment year. Estimators work on dense unit-by-year views
(``panel.wide("outcome")``) where absent rows are NaN, so unbalanced panels
need no special casing downstream.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Hashable, Iterable, Iterator, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    DuplicateKey,
    NonAbsorbing,
    NonBinaryOutcome,
    PanelValidationError,
    TreatedInInitialPeriod,
    UnknownUnit,
)

log = logging.getLogger(__name__)

NEVER = None
"""Marker used in ``first_treated`` for units never treated within the panel window."""

BASE_COLUMNS = ("unit_id", "region_id", "year", "outcome", "treated", "age", "gender")
COHORT_COLUMN = "first_treated"


@dataclass(frozen=True)
class PanelObservation:
    unit_id: Hashable
    region_id: Hashable
    year: int
    outcome: float | None
    treated: int
    age: int
    gender: int
    extra_covariates: Mapping[str, float] = field(default_factory=dict)
    cohort: int | None = None


@dataclass(frozen=True, eq=False)
class CohortPanel:
    """Validated long panel. Build with :func:`validate_panel`, not directly.

    ``frame`` is sorted by ``(unit_id, year)``; ``cohort`` holds each unit's
    first-treatment year (0 for never treated) aligned with ``unit_ids``.
    """

    frame: pd.DataFrame
    unit_ids: np.ndarray
    cohort: np.ndarray
    year_range: tuple[int, int]
    covariates: tuple[str, ...]

    # -- basic views -------------------------------------------------------

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    @property
    def n_obs(self) -> int:
        return len(self.frame)

    @property
    def years(self) -> np.ndarray:
        return np.arange(self.year_range[0], self.year_range[1] + 1)

    @property
    def first_treated(self) -> dict:
        return {u: (int(g) if g > 0 else NEVER) for u, g in zip(self.unit_ids, self.cohort)}

    @cached_property
    def unit_code(self) -> np.ndarray:
        """Row -> position of the row's unit in ``unit_ids``."""
        return np.searchsorted(self.unit_ids, self.frame["unit_id"].to_numpy()) if self._sortable_ids else (
            pd.Index(self.unit_ids).get_indexer(self.frame["unit_id"])
        )

    @cached_property
    def _sortable_ids(self) -> bool:
        try:
            return bool(np.all(self.unit_ids[:-1] < self.unit_ids[1:]))
        except TypeError:
            return False

    @cached_property
    def year_code(self) -> np.ndarray:
        return self.frame["year"].to_numpy() - self.year_range[0]

    @cached_property
    def _unit_lookup(self) -> dict:
        return {u: i for i, u in enumerate(self.unit_ids)}

    @cached_property
    def observed(self) -> np.ndarray:
        obs = np.zeros((self.n_units, len(self.years)), dtype=bool)
        obs[self.unit_code, self.year_code] = True
        return obs

    def wide(self, column: str) -> np.ndarray:
        """Unit x year float matrix of ``column``; NaN where the row is absent."""
        cache = self.__dict__.setdefault("_wide_cache", {})
        if column not in cache:
            out = np.full((self.n_units, len(self.years)), np.nan)
            out[self.unit_code, self.year_code] = self.frame[column].to_numpy(dtype=np.float64)
            out.setflags(write=False)
            cache[column] = out
        return cache[column]

    @cached_property
    def unit_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """(start, length) of each unit's block of rows in ``frame``."""
        counts = np.bincount(self.unit_code, minlength=self.n_units)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        return starts, counts

    def code_of(self, unit_id) -> int:
        try:
            return self._unit_lookup[unit_id]
        except KeyError:
            raise UnknownUnit(f"unknown unit {unit_id!r}") from None

    def observations(self) -> Iterator[PanelObservation]:
        extra = list(self.covariates)
        g_row = self.cohort[self.unit_code]
        cols = {c: self.frame[c].to_numpy() for c in BASE_COLUMNS + tuple(extra)}
        for k in range(self.n_obs):
            y = cols["outcome"][k]
            yield PanelObservation(
                unit_id=cols["unit_id"][k],
                region_id=cols["region_id"][k],
                year=int(cols["year"][k]),
                outcome=None if np.isnan(y) else float(y),
                treated=int(cols["treated"][k]),
                age=int(cols["age"][k]),
                gender=int(cols["gender"][k]),
                extra_covariates={c: float(cols[c][k]) for c in extra},
                cohort=int(g_row[k]) if g_row[k] > 0 else None,
            )

    def take_units(self, codes: np.ndarray, relabel: bool = True) -> "CohortPanel":
        """Panel made of the units at positions ``codes`` (repeats allowed).

        With ``relabel`` the drawn units get fresh integer ids ``0..len-1`` so
        duplicates stay distinct, which is what a cluster bootstrap needs. The
        year grid is kept so year-indexed results stay aligned.
        """
        codes = np.asarray(codes, dtype=np.int64)
        starts, counts = self.unit_rows
        lens = counts[codes]
        rows = np.repeat(starts[codes] - np.cumsum(lens) + lens, lens) + np.arange(lens.sum())
        frame = self.frame.iloc[rows].reset_index(drop=True)
        if relabel:
            frame["unit_id"] = np.repeat(np.arange(len(codes)), lens)
            unit_ids = np.arange(len(codes))
            cohort = self.cohort[codes].copy()
        else:
            order = np.argsort(self.unit_ids[codes], kind="stable")
            unit_ids = self.unit_ids[codes][order]
            cohort = self.cohort[codes][order]
            frame = frame.sort_values(["unit_id", "year"], kind="stable").reset_index(drop=True)
        return CohortPanel(frame, unit_ids, cohort, self.year_range, self.covariates)

    @property
    def binary_outcome(self) -> bool:
        """True when every observed outcome is 0 or 1."""
        y = self.frame["outcome"].to_numpy(dtype=np.float64)
        y = y[~np.isnan(y)]
        return bool(np.all((y == 0.0) | (y == 1.0)))

    def filter_rows(self, keep: np.ndarray) -> "CohortPanel":
        """Re-validated panel keeping only rows where ``keep`` is true."""
        frame = self.frame.loc[np.asarray(keep, dtype=bool)].copy()
        frame[COHORT_COLUMN] = self.cohort[self.unit_code[np.asarray(keep, dtype=bool)]]
        frame[COHORT_COLUMN] = frame[COHORT_COLUMN].where(frame[COHORT_COLUMN] > 0)
        return validate_panel(frame, binary_outcome=self.binary_outcome)

    def to_frame(self, with_cohort: bool = False) -> pd.DataFrame:
        out = self.frame.copy()
        if with_cohort:
            g = self.cohort[self.unit_code].astype("float64")
            g[g == 0] = np.nan
            out[COHORT_COLUMN] = pd.array(g, dtype="Int64")
        return out


@dataclass(frozen=True)
class CohortIndex:
    groups: tuple[int, ...]
    members: Mapping[int, frozenset]
    never_treated: frozenset
    year_range: tuple[int, int]

    def size(self, g: int) -> int:
        return len(self.members[g])

    def to_dict(self) -> dict:
        def _key(u):
            return u.item() if isinstance(u, np.generic) else u

        return {
            "year_range": list(self.year_range),
            "groups": list(self.groups),
            "sizes": {str(g): len(self.members[g]) for g in self.groups},
            "members": {str(g): sorted((_key(u) for u in self.members[g]), key=str) for g in self.groups},
            "never_treated": sorted((_key(u) for u in self.never_treated), key=str),
        }

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2, default=str)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


# ---------------------------------------------------------------------------
# construction and validation
# ---------------------------------------------------------------------------


def _frame_from_observations(observations: Sequence[PanelObservation]) -> pd.DataFrame:
    extra_names: list[str] = []
    for ob in observations:
        for k in ob.extra_covariates:
            if k not in extra_names:
                extra_names.append(k)
    data = {
        "unit_id": [o.unit_id for o in observations],
        "region_id": [o.region_id for o in observations],
        "year": [o.year for o in observations],
        "outcome": [np.nan if o.outcome is None else o.outcome for o in observations],
        "treated": [o.treated for o in observations],
        "age": [o.age for o in observations],
        "gender": [o.gender for o in observations],
    }
    for k in extra_names:
        data[k] = [o.extra_covariates.get(k, np.nan) for o in observations]
    if any(o.cohort is not None for o in observations):
        data[COHORT_COLUMN] = [np.nan if o.cohort is None else o.cohort for o in observations]
    return pd.DataFrame(data)


def validate_panel(
    observations: Sequence[PanelObservation] | pd.DataFrame, binary_outcome: bool = True
) -> CohortPanel:
    """Check structural assumptions and derive each unit's first-treatment year.

    Accepts a sequence of :class:`PanelObservation` or a long frame with the
    panel CSV columns. An optional ``first_treated`` column (or ``cohort`` on
    the observations) supplies the first-treatment year explicitly, which is
    needed when a unit enters the panel already treated; it must agree with the
    ``treated`` indicators. ``binary_outcome=False`` admits continuous
    outcomes (used by the linear simulation designs).

    Raises
    ------
    DuplicateKey, NonAbsorbing, NonBinaryOutcome, TreatedInInitialPeriod
    """
    if isinstance(observations, pd.DataFrame):
        frame = observations.copy()
    else:
        if len(observations) == 0:
            raise PanelValidationError("panel is empty")
        frame = _frame_from_observations(list(observations))
    if len(frame) == 0:
        raise PanelValidationError("panel is empty")
    missing = [c for c in BASE_COLUMNS if c not in frame.columns]
    if missing:
        raise PanelValidationError(f"missing columns: {missing}")

    frame["year"] = frame["year"].astype(np.int64)
    frame["outcome"] = pd.to_numeric(frame["outcome"], errors="raise").astype(np.float64)
    y = frame["outcome"].to_numpy()
    bad = ~np.isnan(y) & (y != 0.0) & (y != 1.0)
    if binary_outcome and bad.any():
        raise NonBinaryOutcome(f"{int(bad.sum())} outcome values outside {{0,1}}, e.g. {y[bad][0]!r}")
    tr = frame["treated"].to_numpy()
    if not np.isin(tr, (0, 1)).all():
        raise PanelValidationError("treated must be 0/1")
    frame["treated"] = frame["treated"].astype(np.int8)

    frame = frame.sort_values(["unit_id", "year"], kind="stable").reset_index(drop=True)
    dup = frame.duplicated(["unit_id", "year"]).to_numpy()
    if dup.any():
        row = frame.loc[np.flatnonzero(dup)[0]]
        raise DuplicateKey(f"duplicate (unit, year) = ({row['unit_id']!r}, {row['year']})")

    unit_ids, unit_code = _factorize_sorted(frame["unit_id"])
    n = len(unit_ids)
    tr = frame["treated"].to_numpy()
    same_unit = unit_code[1:] == unit_code[:-1]
    drops = same_unit & (tr[1:] < tr[:-1])
    if drops.any():
        u = unit_ids[unit_code[1:][drops][0]]
        raise NonAbsorbing(f"treatment switches off for unit {u!r}")

    years = frame["year"].to_numpy()
    t_min, t_max = int(years.min()), int(years.max())
    big = np.iinfo(np.int64).max
    first_tr_year = np.full(n, big, dtype=np.int64)
    np.minimum.at(first_tr_year, unit_code[tr == 1], years[tr == 1])
    derived = np.where(first_tr_year == big, 0, first_tr_year)

    if COHORT_COLUMN in frame.columns:
        g_row = pd.to_numeric(frame[COHORT_COLUMN]).to_numpy(dtype=np.float64)
        g_row = np.where(np.isnan(g_row), 0, g_row).astype(np.int64)
        cohort = np.zeros(n, dtype=np.int64)
        cohort[unit_code] = g_row
        if (cohort[unit_code] != g_row).any():
            raise PanelValidationError("first_treated varies within a unit")
        expect = ((cohort[unit_code] > 0) & (years >= cohort[unit_code])).astype(np.int8)
        if (expect != tr).any():
            k = np.flatnonzero(expect != tr)[0]
            raise NonAbsorbing(
                f"treated indicator disagrees with first_treated for unit {frame['unit_id'].iloc[k]!r} "
                f"in {years[k]}"
            )
        frame = frame.drop(columns=[COHORT_COLUMN])
        cohort = np.where(cohort > t_max, 0, cohort)
    else:
        cohort = derived
        starts = np.concatenate([[0], np.flatnonzero(~same_unit) + 1])
        left_censored = (tr[starts] == 1) & (years[starts] > t_min)
        if left_censored.any():
            log.warning(
                "%d units enter the panel already treated; first-treatment year set to their "
                "first observed year (supply a first_treated column to override)",
                int(left_censored.sum()),
            )

    at_start = (years == t_min) & (tr == 1)
    if at_start.any():
        u = frame["unit_id"].iloc[np.flatnonzero(at_start)[0]]
        raise TreatedInInitialPeriod(f"unit {u!r} is treated in the initial period {t_min}")

    covariates = tuple(c for c in frame.columns if c not in BASE_COLUMNS)
    return CohortPanel(frame, unit_ids, cohort, (t_min, t_max), covariates)


def _factorize_sorted(ids: pd.Series) -> tuple[np.ndarray, np.ndarray]:
    arr = ids.to_numpy()
    starts = np.concatenate([[True], arr[1:] != arr[:-1]])
    unit_ids = arr[starts]
    code = np.cumsum(starts) - 1
    return unit_ids, code


def build_cohort_index(panel: CohortPanel) -> CohortIndex:
    groups = sorted(int(g) for g in np.unique(panel.cohort) if g > 0)
    members = {g: frozenset(panel.unit_ids[panel.cohort == g].tolist()) for g in groups}
    never = frozenset(panel.unit_ids[panel.cohort == 0].tolist())
    return CohortIndex(tuple(groups), members, never, panel.year_range)


def event_time(panel: CohortPanel, unit_id, year: int) -> int | None:
    g = panel.cohort[panel.code_of(unit_id)]
    if g == 0:
        return None
    return int(year) - int(g)


# ---------------------------------------------------------------------------
# CSV interface
# ---------------------------------------------------------------------------


def read_panel_csv(path: str | Path, binary_outcome: bool = True) -> CohortPanel:
    """Read the long panel CSV (missing outcome = empty field)."""
    frame = pd.read_csv(path, dtype={"unit_id": str, "region_id": str}, keep_default_na=False, na_values=[""])
    return validate_panel(frame, binary_outcome=binary_outcome)


def write_panel_csv(panel: CohortPanel, path: str | Path, with_cohort: bool = True) -> None:
    out = panel.to_frame(with_cohort=with_cohort)
    if panel.binary_outcome:
        out["outcome"] = out["outcome"].astype("Int64")
    out.to_csv(path, index=False, lineterminator="\n", float_format="%.17g")
