"""Event-time aggregation of group-time effects and window averages."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .core import CohortIndex
from .errors import MissingCell, WeightDegenerate, WindowOutOfRange
from .inference import ClusterScheme, InfluenceVector, influence_se, normal_inference, summarize_replicates

DEFAULT_HORIZON = (-10, 5)
DEFAULT_WINDOWS: dict[str, tuple[int, int]] = {
    "0-1": (0, 1),
    "0-3": (0, 3),
    "0-5": (0, 5),
    "pre 1": (-1, -1),
    "pre 1-5": (-5, -1),
    "pre 1-10": (-10, -1),
}


def parse_window(text: str) -> tuple[int, int]:
    """``"0-3"`` -> (0, 3); ``"pre 1-5"`` -> (-5, -1); ``"pre 1"`` -> (-1, -1)."""
    m = re.fullmatch(r"(pre\s*)?(\d+)(?:\s*-\s*(\d+))?", text.strip().lower())
    if m is None:
        raise ValueError(f"cannot parse window {text!r}")
    pre = m.group(1) is not None
    lo = int(m.group(2))
    hi = int(m.group(3)) if m.group(3) else lo
    return (-hi, -lo) if pre else (lo, hi)


@dataclass(frozen=True)
class WindowEstimate:
    estimate: float
    std_error: float
    p_value: float
    ci: tuple[float, float]
    event_times: tuple[int, ...]


@dataclass
class EventStudyResult:
    """Event-time estimates with the ingredients needed for window inference.

    Exactly one of ``influence`` (e -> influence vector) and ``replicates``
    (bootstrap draws, one column per event time) is set.
    """

    table: pd.DataFrame
    weights: dict = field(default_factory=dict)
    influence: dict | None = field(default=None, repr=False)
    replicates: np.ndarray | None = field(default=None, repr=False)
    scheme: ClusterScheme | None = field(default=None, repr=False)
    windows: dict = field(default_factory=dict)

    @property
    def event_times(self) -> list[int]:
        return [int(e) for e in self.table["event_time"]]

    def estimate(self, e: int) -> float:
        return float(self.table.set_index("event_time").loc[e, "estimate"])

    def to_csv(self, path) -> None:
        self.table.to_csv(path, index=False, lineterminator="\n", float_format="%.10g")

    def to_json(self, path=None) -> str:
        doc = {
            "event_study": json.loads(self.table.to_json(orient="records", double_precision=15)),
            "weights": [{"g": g, "event_time": e, "weight": w} for (g, e), w in sorted(self.weights.items())],
            "windows": {k: _window_dict(v) for k, v in self.windows.items()},
        }
        text = json.dumps(doc, indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def _window_dict(w: WindowEstimate) -> dict:
    return {"estimate": w.estimate, "std_error": w.std_error, "p_value": w.p_value,
            "ci_lo": w.ci[0], "ci_hi": w.ci[1], "event_times": list(w.event_times)}


EVENT_COLUMNS = ["event_time", "estimate", "std_error", "p_value", "ci_lo", "ci_hi", "n_treated", "n_cohorts"]


def cohort_weights(
    index: CohortIndex, cohorts: Sequence[int], cell_counts: Mapping[int, int] | None = None
) -> dict[int, float]:
    """Share weights over ``cohorts``: cohort sizes by default, cell counts if given."""
    sizes = {g: float(cell_counts[g] if cell_counts is not None else index.size(g)) for g in cohorts}
    total = sum(sizes.values())
    if not total > 0:
        raise WeightDegenerate(f"cohorts {list(cohorts)} have zero total weight")
    return {g: s / total for g, s in sizes.items()}


def aggregate_event_study(
    effects,
    index: CohortIndex,
    horizon: tuple[int, int] = DEFAULT_HORIZON,
    weighting: str = "cohort",
    scheme: ClusterScheme | None = None,
    cohort_of_unit: np.ndarray | None = None,
) -> EventStudyResult:
    """Share-weighted average of ATET(g, g+e) across cohorts, per event time.

    For each ``e`` the cohorts whose year ``g+e`` lies inside the panel
    contribute, weighted by cohort size (``weighting="cohort"``) or by the
    number of treated units in the cell (``"cell"``). A contributing cell that
    is neither present nor listed in ``effects.skipped`` raises
    :class:`MissingCell`. Event times with no contributing cohort are omitted.

    Standard errors combine the cells' influence vectors. With cohort-size
    weights and ``cohort_of_unit`` (or ``effects.cohort``) available, the
    sampling variability of the estimated shares is added.
    """
    if weighting not in ("cohort", "cell"):
        raise ValueError("weighting must be 'cohort' or 'cell'")
    cells = {(e.g, e.t): e for e in effects}
    skipped = getattr(effects, "skipped", {}) or {}
    if cohort_of_unit is None:
        cohort_of_unit = getattr(effects, "cohort", None)
    t0, t1 = index.year_range
    rows, weights, influence = [], {}, {}
    for e in range(horizon[0], horizon[1] + 1):
        contrib = []
        for g in index.groups:
            t = g + e
            if not t0 <= t <= t1:
                continue
            cell = cells.get((g, t))
            if cell is None:
                if (g, t) in skipped:
                    continue
                raise MissingCell(f"no estimate for cohort {g} in {t} (event time {e})")
            contrib.append(cell)
        if not contrib:
            continue
        counts = {c.g: c.n_treated for c in contrib} if weighting == "cell" else None
        w = cohort_weights(index, [c.g for c in contrib], counts)
        est = float(sum(w[c.g] * c.estimate for c in contrib))
        iv = InfluenceVector.combine([(w[c.g], c.influence_values) for c in contrib])
        if weighting == "cohort" and cohort_of_unit is not None:
            iv = InfluenceVector.combine([(1.0, iv), (1.0, _share_influence(contrib, est, cohort_of_unit, iv.n))])
        se = influence_se(iv, scheme, est)
        for c in contrib:
            weights[(c.g, e)] = w[c.g]
        influence[e] = iv
        rows.append((e, est, se.std_error, se.p_value, se.ci[0], se.ci[1],
                     int(sum(c.n_treated for c in contrib)), len(contrib)))
    table = pd.DataFrame(rows, columns=EVENT_COLUMNS)
    return EventStudyResult(table=table, weights=weights, influence=influence, scheme=scheme)


def _share_influence(contrib, est: float, cohort_of_unit: np.ndarray, n: int) -> InfluenceVector:
    """Influence of the estimated cohort shares: 1{G in K} (ATT_G - est) / P(G in K)."""
    att = {c.g: c.estimate for c in contrib}
    members = np.flatnonzero(np.isin(cohort_of_unit, list(att)))
    share = len(members) / n
    vals = np.array([att[g] for g in cohort_of_unit[members]]) - est
    return InfluenceVector(members, vals / share, n)


def event_study_from_replicates(
    table: pd.DataFrame, replicates: np.ndarray, weights: dict | None = None
) -> EventStudyResult:
    """Wrap event-time point estimates whose inference comes from bootstrap draws.

    ``table`` needs ``event_time``, ``estimate`` and ``n_treated``; column ``j``
    of ``replicates`` holds the draws for row ``j``.
    """
    boot = summarize_replicates(table["estimate"].to_numpy(), replicates)
    out = table[["event_time", "estimate"]].copy()
    out["std_error"] = boot.std_error
    out["p_value"] = boot.p_value
    out["ci_lo"] = boot.ci_lo
    out["ci_hi"] = boot.ci_hi
    out["n_treated"] = table["n_treated"].to_numpy()
    out["n_cohorts"] = table["n_cohorts"].to_numpy() if "n_cohorts" in table else 0
    return EventStudyResult(table=out[EVENT_COLUMNS], weights=weights or {}, replicates=replicates)


def window_average(
    result: EventStudyResult,
    windows: Mapping[str, tuple[int, int]] = DEFAULT_WINDOWS,
    strict: bool = True,
) -> dict[str, WindowEstimate]:
    """Simple average of event-time estimates over each window ``(lo, hi)``.

    Inference averages the event-time influence vectors (or bootstrap draws)
    and recomputes the SE, so correlation across event times is respected.
    With ``strict=False`` windows with missing event times are left out
    instead of raising :class:`WindowOutOfRange`.
    """
    pos = {e: j for j, e in enumerate(result.event_times)}
    est_col = result.table["estimate"].to_numpy()
    out = {}
    for label, (lo, hi) in windows.items():
        es = list(range(int(lo), int(hi) + 1))
        missing = [e for e in es if e not in pos]
        if not es or missing:
            if strict:
                raise WindowOutOfRange(f"window {label!r} needs event times {missing} which are not estimated")
            continue
        est = float(np.mean([est_col[pos[e]] for e in es]))
        if result.influence is not None:
            iv = InfluenceVector.combine([(1.0 / len(es), result.influence[e]) for e in es])
            se = influence_se(iv, result.scheme, est)
            ci = se.ci
            res = WindowEstimate(est, se.std_error, se.p_value, ci, tuple(es))
        else:
            draws = result.replicates[:, [pos[e] for e in es]].mean(axis=1)
            b = summarize_replicates(np.array([est]), draws[:, None])
            res = WindowEstimate(est, float(b.std_error[0]), float(b.p_value[0]),
                                 normal_inference(est, float(b.std_error[0])).ci, tuple(es))
        out[label] = res
    result.windows.update(out)
    return out


def windows_frame(windows: Mapping[str, WindowEstimate]) -> pd.DataFrame:
    rows = [(k, w.estimate, w.std_error, w.p_value, w.ci[0], w.ci[1], min(w.event_times), max(w.event_times))
            for k, w in windows.items()]
    return pd.DataFrame(rows, columns=["window", "estimate", "std_error", "p_value", "ci_lo", "ci_hi",
                                       "e_from", "e_to"])


def table4_frame(windows: Mapping[str, WindowEstimate], column: str = "estimate") -> pd.DataFrame:
    """Long layout: one row per window x statistic (ATET, std error, p-value)."""
    rows = []
    for k, w in windows.items():
        rows += [(k, "ATET", w.estimate), (k, "std_error", w.std_error), (k, "p_value", w.p_value)]
    return pd.DataFrame(rows, columns=["window", "statistic", column])
