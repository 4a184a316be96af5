import datetime as dt

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from causalpanel.errors import DateParseError, DuplicateEvent, PolicyError
from causalpanel.policy import (
    DateRule,
    PolicyEvent,
    PolicyKind,
    adoption_curve,
    code_annual_indicators,
    load_builtin_events,
    parse_date,
    read_indicator_csv,
    read_policy_csv,
)

# First billboard-ban year per canton under the calendar-year rule.
BILLBOARD_YEARS = {
    "BS": 1997, "GE": 2000, "GR": 2006, "SG": 2006, "BL": 2007, "BE": 2007, "SO": 2007, "TG": 2007,
    "VD": 2007, "AR": 2008, "ZH": 2008, "TI": 2009, "UR": 2009, "VS": 2009, "ZG": 2010, "OW": 2016,
}


@pytest.fixture(scope="module")
def builtin():
    return code_annual_indicators(load_builtin_events(), (1993, 2017))


def test_builtin_covers_26_regions(builtin):
    assert len(builtin.regions) == 26
    assert len(builtin.frame) == 26 * 25


def test_builtin_billboard_years(builtin):
    got = {r: g for r, g in builtin.first_treated(PolicyKind.BILLBOARD_BAN).items() if g is not None}
    assert got == BILLBOARD_YEARS


def test_named_cantons(builtin):
    ft = builtin.first_treated()
    assert (ft["BS"], ft["ZH"], ft["OW"]) == (1997, 2008, 2016)
    assert ft["SZ"] is None


def test_zurich_indicator_switches_in_2008(builtin):
    rows = builtin.frame[builtin.frame["region_id"] == "ZH"].set_index("year")["billboard"]
    assert rows.loc[:2007].eq(0).all() and rows.loc[2008:].eq(1).all()


def test_adoption_curve(builtin):
    curve = dict(adoption_curve(builtin))
    assert curve[2017] == 16
    assert curve[1996] == 0
    assert curve[1997] == 1
    counts = [c for _, c in sorted(curve.items())]
    assert counts == sorted(counts)


def test_region_without_event_is_zero():
    ev = [PolicyEvent.from_strings("A", "billboard_ban", "2005-03-01")]
    table = code_annual_indicators(ev, (2000, 2010), regions=["A", "B"])
    assert table.frame.loc[table.frame["region_id"] == "B", ["billboard", "sales", "smoking"]].eq(0).all().all()


def test_single_event_step():
    ev = [PolicyEvent.from_strings("A", "billboard_ban", "2005-03-01")]
    curve = adoption_curve(code_annual_indicators(ev, (2000, 2010)))
    assert [c for _, c in curve] == [0] * 5 + [1] * 6


def test_mid_year_rule():
    assert parse_date("2008-07-01").year == 2008
    ev = [PolicyEvent.from_strings("ZH", "billboard_ban", "2008-07-01"),
          PolicyEvent.from_strings("BS", "billboard_ban", "1997-02-06")]
    t = code_annual_indicators(ev, (1993, 2017), DateRule.MID_YEAR)
    assert t.first_treated() == {"BS": 1997, "ZH": 2009}


def test_sales_duplicates_collapse_to_earliest():
    ev = [PolicyEvent.from_strings("A", "sales_ban", "2009-01-01"),
          PolicyEvent.from_strings("A", "sales_ban", "2006-05-01")]
    t = code_annual_indicators(ev, (2000, 2010))
    assert t.first_treated(PolicyKind.SALES_BAN)["A"] == 2006


def test_duplicate_billboard_rejected():
    ev = [PolicyEvent.from_strings("A", "billboard_ban", "2009-01-01"),
          PolicyEvent.from_strings("A", "billboard_ban", "2006-05-01")]
    with pytest.raises(DuplicateEvent):
        code_annual_indicators(ev, (2000, 2010))


def test_bad_date(tmp_path):
    with pytest.raises(DateParseError):
        parse_date("2008-13-01")
    p = tmp_path / "p.csv"
    p.write_text("region_id,policy_kind,effective_date\nA,billboard_ban,2008-01-01\nB,billboard_ban,08/01/2008\n")
    with pytest.raises(DateParseError, match="line 3"):
        read_policy_csv(p)


def test_unknown_kind():
    with pytest.raises(PolicyError):
        PolicyKind.parse("tax")
    assert PolicyKind.parse(PolicyKind.SALES_BAN) is PolicyKind.SALES_BAN
    assert PolicyKind.parse("billboard") is PolicyKind.BILLBOARD_BAN


def test_indicator_csv_round_trip(builtin, tmp_path):
    path = tmp_path / "ind.csv"
    builtin.to_csv(path)
    again = read_indicator_csv(path)
    assert again.first_treated() == builtin.first_treated()
    assert again.frame.equals(builtin.frame)


dates = st.dates(min_value=dt.date(1990, 1, 1), max_value=dt.date(2020, 12, 31))


@st.composite
def event_sets(draw):
    regions = draw(st.lists(st.sampled_from("ABCDEFG"), min_size=1, max_size=7, unique=True))
    events = []
    for r in regions:
        for kind in draw(st.lists(st.sampled_from(list(PolicyKind)), max_size=3, unique=True)):
            events.append(PolicyEvent(r, kind, draw(dates)))
    return events


@given(event_sets())
def test_indicators_monotone(events):
    t = code_annual_indicators(events, (1993, 2017))
    for _, grp in t.frame.groupby("region_id"):
        for c in ("billboard", "sales", "smoking"):
            assert np.all(np.diff(grp[c].to_numpy()) >= 0)


@given(event_sets())
def test_adoption_curve_is_prefix_count(events):
    t = code_annual_indicators(events, (1993, 2017))
    curve = adoption_curve(t)
    first = [d.year for e in events if e.policy_kind is PolicyKind.BILLBOARD_BAN for d in [e.effective_date]]
    for y, c in curve:
        assert c == sum(1 for fy in first if fy <= y)


@given(event_sets())
def test_mid_year_never_earlier(events):
    cal = code_annual_indicators(events, (1993, 2017), DateRule.CALENDAR_YEAR)
    mid = code_annual_indicators(events, (1993, 2017), DateRule.MID_YEAR)
    for key, y in cal.first_years.items():
        assert mid.first_years[key] >= y
