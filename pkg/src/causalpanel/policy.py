"""Dated regional policy adoptions coded into annual region-level indicators."""

from __future__ import annotations

import datetime as dt
import enum
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import DateParseError, DuplicateEvent, PolicyError


class PolicyKind(str, enum.Enum):
    BILLBOARD_BAN = "billboard_ban"
    SALES_BAN = "sales_ban"
    SMOKING_BAN = "smoking_ban"

    @property
    def column(self) -> str:
        return {"billboard_ban": "billboard", "sales_ban": "sales", "smoking_ban": "smoking"}[self.value]

    @classmethod
    def parse(cls, text: str) -> "PolicyKind":
        if isinstance(text, cls):
            return text
        key = str(text).strip().lower()
        for kind in cls:
            if key in (kind.value, kind.name.lower(), kind.column):
                return kind
        raise PolicyError(f"unknown policy kind {text!r}")


class DateRule(str, enum.Enum):
    CALENDAR_YEAR = "calendar_year"
    MID_YEAR = "mid_year"


@dataclass(frozen=True)
class PolicyEvent:
    region_id: str
    policy_kind: PolicyKind
    effective_date: dt.date

    @classmethod
    def from_strings(cls, region_id: str, kind: str, date: str) -> "PolicyEvent":
        return cls(str(region_id), PolicyKind.parse(kind), parse_date(date))


def parse_date(text) -> dt.date:
    if isinstance(text, dt.date):
        return text
    try:
        return dt.date.fromisoformat(str(text).strip())
    except ValueError:
        raise DateParseError(f"cannot parse date {text!r} (expected YYYY-MM-DD)") from None


def first_year(date: dt.date, rule: DateRule = DateRule.CALENDAR_YEAR) -> int:
    """First calendar year counted as exposed for a policy effective on ``date``."""
    rule = DateRule(rule)
    if rule is DateRule.CALENDAR_YEAR:
        return date.year
    return date.year if date < dt.date(date.year, 7, 1) else date.year + 1


INDICATORS = tuple(k.column for k in PolicyKind)


@dataclass(frozen=True)
class RegionTreatmentTable:
    """Annual indicators, one row per (region, year), columns ``billboard, sales, smoking``.

    ``first_years`` maps ``(region, kind)`` to the coded adoption year; regions
    without an event have no entry.
    """

    frame: pd.DataFrame
    year_range: tuple[int, int]
    first_years: dict

    @property
    def regions(self) -> list[str]:
        return sorted(self.frame["region_id"].unique())

    def first_treated(self, kind: PolicyKind = PolicyKind.BILLBOARD_BAN) -> dict:
        kind = PolicyKind.parse(kind) if not isinstance(kind, PolicyKind) else kind
        return {r: self.first_years.get((r, kind)) for r in self.regions}

    def lookup(self, region_id, year) -> dict:
        row = self._index.get((str(region_id), int(year)))
        if row is None:
            raise KeyError((region_id, year))
        return row

    @property
    def _index(self) -> dict:
        cache = self.__dict__.get("_idx")
        if cache is None:
            f = self.frame
            cache = {
                (r, int(y)): {c: int(v) for c, v in zip(INDICATORS, vals)}
                for r, y, *vals in zip(f["region_id"], f["year"], *(f[c] for c in INDICATORS))
            }
            object.__setattr__(self, "_idx", cache)
        return cache

    def to_csv(self, path: str | Path) -> None:
        self.frame.to_csv(path, index=False, lineterminator="\n")


def code_annual_indicators(
    events: Sequence[PolicyEvent],
    year_range: tuple[int, int],
    rule: DateRule = DateRule.CALENDAR_YEAR,
    regions: Iterable[str] | None = None,
) -> RegionTreatmentTable:
    """Expand adoption events into absorbing annual 0/1 indicators.

    Repeated sales-ban events for a region collapse to the earliest (bans with
    different age limits count as one policy). Any other repeated
    ``(region, kind)`` raises :class:`DuplicateEvent`.
    """
    t0, t1 = int(year_range[0]), int(year_range[1])
    if t1 < t0:
        raise PolicyError(f"empty year range {year_range}")
    first: dict = {}
    for ev in events:
        if not isinstance(ev.effective_date, dt.date):
            ev = PolicyEvent(ev.region_id, ev.policy_kind, parse_date(ev.effective_date))
        key = (str(ev.region_id), PolicyKind.parse(ev.policy_kind))
        if key in first:
            if key[1] is not PolicyKind.SALES_BAN:
                raise DuplicateEvent(f"second {key[1].value} event for region {key[0]!r}")
            first[key] = min(first[key], ev.effective_date)
        else:
            first[key] = ev.effective_date
    first_years = {k: first_year(d, rule) for k, d in first.items()}

    all_regions = sorted(set(regions or ()) | {r for r, _ in first})
    years = np.arange(t0, t1 + 1)
    region_col = np.repeat(np.array(all_regions, dtype=object), len(years))
    year_col = np.tile(years, len(all_regions))
    data = {"region_id": region_col, "year": year_col}
    for kind in PolicyKind:
        start = np.array(
            [first_years.get((r, kind), np.iinfo(np.int64).max) for r in all_regions], dtype=np.int64
        )
        data[kind.column] = (year_col >= np.repeat(start, len(years))).astype(np.int64)
    frame = pd.DataFrame(data)
    return RegionTreatmentTable(frame, (t0, t1), first_years)


def adoption_curve(table: RegionTreatmentTable, kind=PolicyKind.BILLBOARD_BAN) -> list[tuple[int, int]]:
    kind = PolicyKind.parse(kind) if not isinstance(kind, PolicyKind) else kind
    counts = table.frame.groupby("year")[kind.column].sum()
    return [(int(y), int(c)) for y, c in counts.items()]


# ---------------------------------------------------------------------------
# IO
# ---------------------------------------------------------------------------


def read_policy_csv(path: str | Path) -> list[PolicyEvent]:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    need = {"region_id", "policy_kind", "effective_date"}
    if not need <= set(frame.columns):
        raise PolicyError(f"policy CSV needs columns {sorted(need)}")
    events = []
    for lineno, (r, k, d) in enumerate(zip(frame["region_id"], frame["policy_kind"], frame["effective_date"]), 2):
        if not d.strip():
            continue
        try:
            events.append(PolicyEvent.from_strings(r, k, d))
        except PolicyError as exc:
            raise type(exc)(f"line {lineno}: {exc}") from None
    return events


def builtin_policy_csv() -> Path:
    """Path of the shipped Swiss cantonal policy dates (26 cantons)."""
    return Path(str(resources.files("causalpanel") / "data" / "table3_policies.csv"))


def load_builtin_events() -> list[PolicyEvent]:
    return read_policy_csv(builtin_policy_csv())


def read_indicator_csv(path: str | Path) -> RegionTreatmentTable:
    """Read the annual indicator CSV written by :meth:`RegionTreatmentTable.to_csv`."""
    frame = pd.read_csv(path, dtype={"region_id": str})
    missing = {"region_id", "year", *INDICATORS} - set(frame.columns)
    if missing:
        raise PolicyError(f"indicator CSV missing columns {sorted(missing)}")
    first_years = {}
    for kind in PolicyKind:
        on = frame[frame[kind.column] == 1]
        for r, y in on.groupby("region_id")["year"].min().items():
            first_years[(r, kind)] = int(y)
    yr = (int(frame["year"].min()), int(frame["year"].max()))
    return RegionTreatmentTable(frame.reset_index(drop=True), yr, first_years)
