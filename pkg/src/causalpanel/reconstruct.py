"""Annual smoking histories rebuilt from one-shot survey answers.

Each respondent reports current status plus initiation and (for quitters)
cessation ages. Walking back from the interview year gives one row per year,
down to the later of the year the respondent turned ``min_age`` and
``earliest_year`` (optionally capped to the last ``history_cap_years`` years).

Outcome coding per year, with ``a`` the age in that year:

* never smoker: 0
* current smoker: 1 if ``a >= init`` else 0
* former smoker, point cessation ``c``: 1 if ``init <= a <= c`` else 0
* former smoker, cessation range ``[lo, hi]``: 1 if ``init <= a <= lo``,
  missing if ``lo < a <= hi``, 0 otherwise
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from . import _kernels
from .core import COHORT_COLUMN, CohortPanel, PanelObservation, validate_panel
from .errors import InconsistentAges, MissingPolicyYear, ReconstructionError, UnknownStatus
from .policy import PolicyKind, RegionTreatmentTable

log = logging.getLogger(__name__)


class SmokerStatus(str, enum.Enum):
    NEVER = "never"
    CURRENT = "current"
    FORMER = "former"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class SurveyRecord:
    respondent_id: str
    survey_year: int
    age_at_survey: int
    gender: int
    region_id: str
    smoker_status: SmokerStatus
    initiation_age: int | None = None
    cessation_age: int | None = None
    cessation_age_range: tuple[int, int] | None = None


@dataclass(frozen=True)
class ReconstructionConfig:
    min_age: int = 15
    earliest_year: int = 1993
    history_cap_years: int | None = None

    def __post_init__(self):
        if self.min_age < 0:
            raise ValueError("min_age must be >= 0")
        if self.history_cap_years is not None and self.history_cap_years < 1:
            raise ValueError("history_cap_years must be >= 1")


def check_record(rec: SurveyRecord) -> None:
    """Raise if ``rec`` violates the field-presence or age-ordering rules."""
    status = SmokerStatus(rec.smoker_status)
    if status is SmokerStatus.UNKNOWN:
        raise UnknownStatus(f"respondent {rec.respondent_id!r} has unknown smoking status")
    init, cess, rng = rec.initiation_age, rec.cessation_age, rec.cessation_age_range
    rid = rec.respondent_id
    if status is SmokerStatus.NEVER:
        if init is not None or cess is not None or rng is not None:
            raise ReconstructionError(f"never smoker {rid!r} has initiation/cessation ages")
        return
    if init is None:
        raise ReconstructionError(f"{status.value} smoker {rid!r} lacks an initiation age")
    if init > rec.age_at_survey:
        raise InconsistentAges(f"{rid!r}: initiation age {init} after age at survey {rec.age_at_survey}")
    if status is SmokerStatus.CURRENT:
        if cess is not None or rng is not None:
            raise ReconstructionError(f"current smoker {rid!r} has a cessation age")
        return
    if (cess is None) == (rng is None):
        raise ReconstructionError(f"former smoker {rid!r} needs exactly one of cessation age / range")
    lo, hi = (cess, cess) if rng is None else rng
    if not (init <= lo <= hi <= rec.age_at_survey):
        raise InconsistentAges(
            f"{rid!r}: need initiation {init} <= cessation {lo}..{hi} <= age at survey {rec.age_at_survey}"
        )


def start_year(survey_year: int, age_at_survey: int, config: ReconstructionConfig) -> int:
    first = max(survey_year - (age_at_survey - config.min_age), config.earliest_year)
    if config.history_cap_years is not None:
        first = max(first, survey_year - config.history_cap_years + 1)
    return first


def reconstruct_history(record: SurveyRecord, config: ReconstructionConfig = ReconstructionConfig()) -> list[PanelObservation]:
    """One respondent's yearly rows, oldest first (reference implementation)."""
    check_record(record)
    status = SmokerStatus(record.smoker_status)
    out = []
    for year in range(start_year(record.survey_year, record.age_at_survey, config), record.survey_year + 1):
        age = record.age_at_survey - (record.survey_year - year)
        if status is SmokerStatus.NEVER:
            y = 0.0
        elif status is SmokerStatus.CURRENT:
            y = 1.0 if age >= record.initiation_age else 0.0
        elif record.cessation_age_range is None:
            y = 1.0 if record.initiation_age <= age <= record.cessation_age else 0.0
        else:
            lo, hi = record.cessation_age_range
            if record.initiation_age <= age <= lo:
                y = 1.0
            elif lo < age <= hi:
                y = None
            else:
                y = 0.0
        out.append(
            PanelObservation(
                unit_id=record.respondent_id,
                region_id=record.region_id,
                year=year,
                outcome=y,
                treated=0,
                age=age,
                gender=record.gender,
            )
        )
    return out


# ---------------------------------------------------------------------------
# vectorized path
# ---------------------------------------------------------------------------

SURVEY_COLUMNS = ("respondent_id", "survey_year", "age", "gender", "region_id", "status",
                  "init_age", "cess_age", "cess_lo", "cess_hi")
_STATUS_CODE = {"never": 0, "current": 1, "former": 2}


def records_to_frame(records: Sequence[SurveyRecord]) -> pd.DataFrame:
    rows = []
    for r in records:
        rng = r.cessation_age_range
        rows.append((
            str(r.respondent_id), r.survey_year, r.age_at_survey, r.gender, str(r.region_id),
            SmokerStatus(r.smoker_status).value, r.initiation_age, r.cessation_age,
            None if rng is None else rng[0], None if rng is None else rng[1],
        ))
    frame = pd.DataFrame(rows, columns=list(SURVEY_COLUMNS))
    for c in ("init_age", "cess_age", "cess_lo", "cess_hi"):
        frame[c] = frame[c].astype("Float64")
    return frame


def frame_to_records(frame: pd.DataFrame) -> list[SurveyRecord]:
    out = []
    for row in frame.itertuples(index=False):
        def _opt(v):
            return None if pd.isna(v) else int(v)
        lo, hi = _opt(row.cess_lo), _opt(row.cess_hi)
        out.append(SurveyRecord(
            str(row.respondent_id), int(row.survey_year), int(row.age), int(row.gender), str(row.region_id),
            SmokerStatus(str(row.status).strip().lower()), _opt(row.init_age), _opt(row.cess_age),
            None if lo is None and hi is None else (lo, hi),
        ))
    return out


def read_survey_csv(path: str | Path) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype={"respondent_id": str, "region_id": str, "status": str},
                        keep_default_na=False, na_values=[""])
    missing = [c for c in SURVEY_COLUMNS if c not in frame.columns]
    if missing:
        raise ReconstructionError(f"survey CSV missing columns {missing}")
    if len(frame) == 0:
        raise ReconstructionError("survey file has no records")
    return frame


def _check_frame(frame: pd.DataFrame) -> tuple[pd.DataFrame, int]:
    """Drop unknown-status rows and validate the rest; errors cite the CSV line."""
    status = frame["status"].astype(str).str.strip().str.lower()
    bad_label = ~status.isin(["never", "current", "former", "unknown"])
    if bad_label.any():
        k = int(np.flatnonzero(bad_label.to_numpy())[0])
        raise ReconstructionError(f"line {k + 2}: unrecognised status {frame['status'].iloc[k]!r}")
    unknown = (status == "unknown").to_numpy()
    keep = frame.loc[~unknown].copy()
    keep["status"] = status[~unknown].to_numpy()
    lines = np.flatnonzero(~unknown) + 2

    init = keep["init_age"].to_numpy(dtype=float, na_value=np.nan)
    cess = keep["cess_age"].to_numpy(dtype=float, na_value=np.nan)
    lo = keep["cess_lo"].to_numpy(dtype=float, na_value=np.nan)
    hi = keep["cess_hi"].to_numpy(dtype=float, na_value=np.nan)
    age = keep["age"].to_numpy(dtype=float)
    st = keep["status"].to_numpy()
    has_rng = ~np.isnan(lo) | ~np.isnan(hi)
    rng_partial = np.isnan(lo) != np.isnan(hi)

    checks = [
        ((st == "never") & (~np.isnan(init) | ~np.isnan(cess) | has_rng), ReconstructionError,
         "never smoker with initiation/cessation ages"),
        ((st != "never") & np.isnan(init), ReconstructionError, "smoker without initiation age"),
        ((st == "current") & (~np.isnan(cess) | has_rng), ReconstructionError, "current smoker with cessation age"),
        ((st == "former") & (np.isnan(cess) == ~has_rng), ReconstructionError,
         "former smoker needs exactly one of cess_age / cess_lo..cess_hi"),
        (rng_partial, ReconstructionError, "cessation range needs both cess_lo and cess_hi"),
        ((st != "never") & (init > age), InconsistentAges, "initiation age after age at survey"),
    ]
    lo_eff = np.where(np.isnan(cess), lo, cess)
    hi_eff = np.where(np.isnan(cess), hi, cess)
    former = st == "former"
    with np.errstate(invalid="ignore"):
        order_bad = former & ~((init <= lo_eff) & (lo_eff <= hi_eff) & (hi_eff <= age))
    checks.append((order_bad & ~np.isnan(lo_eff), InconsistentAges, "need initiation <= cessation <= age at survey"))
    for mask, exc, msg in checks:
        if mask.any():
            k = int(np.flatnonzero(mask)[0])
            raise exc(f"line {lines[k]} (respondent {keep['respondent_id'].iloc[k]!r}): {msg}")
    if keep["respondent_id"].duplicated().any():
        dup = keep["respondent_id"][keep["respondent_id"].duplicated()].iloc[0]
        raise ReconstructionError(f"respondent id {dup!r} appears twice")
    return keep, int(unknown.sum())


def expand_frame(frame: pd.DataFrame, config: ReconstructionConfig = ReconstructionConfig()) -> pd.DataFrame:
    """Vectorized :func:`reconstruct_history` over a validated survey frame.

    Returns a long frame with columns unit_id, region_id, year, outcome, age,
    gender (no treatment columns).
    """
    sy = frame["survey_year"].to_numpy(dtype=np.int64)
    age = frame["age"].to_numpy(dtype=np.int64)
    start = np.maximum(sy - (age - config.min_age), config.earliest_year)
    if config.history_cap_years is not None:
        start = np.maximum(start, sy - config.history_cap_years + 1)
    st_text = frame["status"].to_numpy()
    cess = frame["cess_age"].to_numpy(dtype=float, na_value=np.nan)
    status = np.array([_STATUS_CODE[s] for s in st_text], dtype=np.int64)
    status[(status == 2) & np.isnan(cess)] = 3

    def _int(col):
        return np.nan_to_num(frame[col].to_numpy(dtype=float, na_value=np.nan), nan=-1).astype(np.int64)

    rec, year, a, out = _kernels.expand_histories(
        start, sy, age, status, _int("init_age"), _int("cess_age"), _int("cess_lo"), _int("cess_hi")
    )
    return pd.DataFrame({
        "unit_id": frame["respondent_id"].astype(str).to_numpy()[rec],
        "region_id": frame["region_id"].astype(str).to_numpy()[rec],
        "year": year,
        "outcome": out,
        "age": a,
        "gender": frame["gender"].to_numpy(dtype=np.int64)[rec],
    })


@dataclass(frozen=True)
class ReconstructionResult:
    panel: CohortPanel
    n_records: int
    n_excluded_unknown: int
    n_rows: int
    n_missing_outcome: int
    treatment_kind: str = "billboard_ban"

    def exclusion_summary(self) -> dict:
        return {
            "records_read": self.n_records,
            "excluded_unknown_status": self.n_excluded_unknown,
            "excluded_share": round(self.n_excluded_unknown / self.n_records, 6) if self.n_records else 0.0,
            "panel_rows": self.n_rows,
            "missing_outcome_rows": self.n_missing_outcome,
            "units": self.panel.n_units,
        }


def reconstruct_panel(
    records: Sequence[SurveyRecord] | pd.DataFrame,
    config: ReconstructionConfig = ReconstructionConfig(),
    policy_panel: RegionTreatmentTable | None = None,
    treatment: PolicyKind = PolicyKind.BILLBOARD_BAN,
) -> ReconstructionResult:
    """Expand all records and attach region-year policy indicators.

    The ``treatment`` policy becomes the unit-level ``treated`` indicator (and
    the unit's cohort is the region's adoption year); the other two policies
    become covariates ``sales_ban`` / ``smoking_ban`` / ``billboard_ban``.
    Unknown-status records are dropped and counted.
    """
    frame = records.copy() if isinstance(records, pd.DataFrame) else records_to_frame(records)
    if len(frame) == 0:
        raise ReconstructionError("no survey records")
    n_records = len(frame)
    valid, n_unknown = _check_frame(frame)
    if n_unknown:
        log.info("excluded %d of %d records with unknown smoking status", n_unknown, n_records)
    if len(valid) and config.earliest_year > int(valid["survey_year"].max()):
        raise ReconstructionError("earliest_year is after the last survey year")
    long = expand_frame(valid, config)
    if len(long) == 0:
        raise ReconstructionError("reconstruction produced no rows")

    if policy_panel is None:
        long["treated"] = 0
    else:
        long = _attach_policies(long, policy_panel, PolicyKind.parse(treatment) if not isinstance(treatment, PolicyKind) else treatment)
    panel = validate_panel(long)
    return ReconstructionResult(
        panel=panel,
        n_records=n_records,
        n_excluded_unknown=n_unknown,
        n_rows=panel.n_obs,
        n_missing_outcome=int(np.isnan(panel.frame["outcome"].to_numpy()).sum()),
        treatment_kind=treatment.value if isinstance(treatment, PolicyKind) else str(treatment),
    )


def _attach_policies(long: pd.DataFrame, table: RegionTreatmentTable, treatment: PolicyKind) -> pd.DataFrame:
    pol = table.frame.rename(columns={k.column: k.value for k in PolicyKind})
    merged = long.merge(pol, on=["region_id", "year"], how="left", validate="many_to_one", indicator=True)
    absent = merged["_merge"] != "both"
    if absent.any():
        r = merged.loc[absent].iloc[0]
        raise MissingPolicyYear(f"no policy row for region {r['region_id']!r} in {int(r['year'])}")
    merged = merged.drop(columns="_merge")
    merged["treated"] = merged.pop(treatment.value).astype(np.int8)
    g = {r: table.first_years.get((r, treatment)) for r in merged["region_id"].unique()}
    merged[COHORT_COLUMN] = merged["region_id"].map(lambda r: g[r] if g[r] is not None else np.nan).astype(float)
    cov = [k.value for k in PolicyKind if k is not treatment]
    order = ["unit_id", "region_id", "year", "outcome", "treated", "age", "gender", *cov, COHORT_COLUMN]
    return merged[order]


# ---------------------------------------------------------------------------
# composition diagnostics
# ---------------------------------------------------------------------------

AGE_BANDS = (("15-24", 15, 24), ("25-44", 25, 44), ("45-64", 45, 64), ("65+", 65, 10**6))


@dataclass(frozen=True)
class CompositionReport:
    """Per survey year: shares and smoking rates, original vs reconstructed.

    ``table`` has one row per (year, view) with view in
    ``original``, ``panel`` and ``diff_pct`` (relative difference, percent).
    Gender is coded 1 = woman.
    """

    table: pd.DataFrame = field(repr=False)

    def view(self, name: str) -> pd.DataFrame:
        return self.table[self.table["view"] == name].drop(columns="view").set_index("year")


def _tabulate(rows: pd.DataFrame) -> dict:
    out = {"n": float(len(rows))}
    g = rows["gender"].to_numpy()
    a = rows["age"].to_numpy()
    y = rows["outcome"].to_numpy(dtype=float)
    out["share_women"] = float((g == 1).mean()) if len(rows) else np.nan
    out["share_men"] = float((g == 0).mean()) if len(rows) else np.nan
    for label, lo, hi in AGE_BANDS:
        out[f"share_age_{label}"] = float(((a >= lo) & (a <= hi)).mean()) if len(rows) else np.nan

    def _rate(m):
        v = y[m & ~np.isnan(y)]
        return float(v.mean()) if len(v) else np.nan

    every = np.ones(len(rows), dtype=bool)
    out["smoking_rate"] = _rate(every)
    out["smoking_rate_women"] = _rate(g == 1)
    out["smoking_rate_men"] = _rate(g == 0)
    for label, lo, hi in AGE_BANDS:
        out[f"smoking_rate_age_{label}"] = _rate((a >= lo) & (a <= hi))
    return out


def _rel_diff(new: float, old: float) -> float:
    if new == old:
        return 0.0
    if old == 0.0 or np.isnan(old) or np.isnan(new):
        return np.nan
    return (new - old) / old * 100.0


def composition_report(records: Sequence[SurveyRecord] | pd.DataFrame, panel: CohortPanel) -> CompositionReport:
    frame = records if isinstance(records, pd.DataFrame) else records_to_frame(records)
    survey_year = dict(zip(frame["respondent_id"].astype(str), frame["survey_year"].astype(int)))
    rows = panel.frame
    unit_sy = rows["unit_id"].astype(str).map(survey_year)
    interview = (rows["year"] == unit_sy).to_numpy()
    out = []
    for y in sorted(set(int(v) for v in frame["survey_year"])):
        in_year = (rows["year"] == y).to_numpy()
        orig = _tabulate(rows.loc[in_year & interview])
        full = _tabulate(rows.loc[in_year])
        diff = {k: _rel_diff(full[k], orig[k]) for k in orig}
        for view, vals in (("original", orig), ("panel", full), ("diff_pct", diff)):
            out.append({"year": y, "view": view, **vals})
    return CompositionReport(pd.DataFrame(out))
