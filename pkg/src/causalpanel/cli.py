"""Command-line front end: reconstruct, policies, estimate, simulate, benchmark, sweep.

Every subcommand resolves its settings in three layers (dataclass defaults,
then the JSON ``--config`` file, then explicit flags), stages all outputs in
memory and writes them only once everything succeeded, together with a
``manifest.json`` that is enough to rerun it. The exit status is 0 iff all
outputs were written.
"""

from __future__ import annotations

import argparse
import enum
import hashlib
import io
import json
import logging
import os
import platform
import re
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
import pandas as pd

from . import __version__
from ._kernels import BACKEND
from .core import CohortPanel, build_cohort_index, read_panel_csv, validate_panel, write_panel_csv
from .did import DidConfig, estimate_all
from .errors import CausalPanelError
from .eventstudy import (
    DEFAULT_WINDOWS,
    aggregate_event_study,
    parse_window,
    table4_frame,
    window_average,
    windows_frame,
)
from .ifect import IfectConfig, estimate_ifect
from .inference import ClusterScheme
from .policy import (
    DateRule,
    PolicyKind,
    adoption_curve,
    builtin_policy_csv,
    code_annual_indicators,
    read_policy_csv,
)
from .reconstruct import ReconstructionConfig, composition_report, read_survey_csv, reconstruct_panel
from .simulate import DgpSpec, benchmark, did_estimator, generate, ifect_estimator

log = logging.getLogger("causalpanel")

SECTIONS: dict[str, type] = {
    "reconstruction": ReconstructionConfig,
    "did": DidConfig,
    "ifect": IfectConfig,
    "dgp": DgpSpec,
}


class UsageError(Exception):
    """Bad command-line or config-file input."""


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, enum.Enum):
        return obj.value
    if is_dataclass(obj):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _build_section(name: str, *layers: Mapping) -> Any:
    cls = SECTIONS[name]
    known = {f.name for f in fields(cls)}
    merged: dict = {}
    for layer in layers:
        extra = set(layer) - known
        if extra:
            raise UsageError(f"unknown {name} settings: {sorted(extra)}")
        merged.update(layer)
    if cls is DgpSpec:
        return DgpSpec.from_dict(merged)
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {name} settings: {exc}") from exc


@dataclass
class RunConfig:
    """Fully resolved settings of one invocation.

    ``sections`` holds config dataclasses keyed by section name, ``options``
    the remaining scalar settings, ``paths`` the input and output locations.
    ``to_dict``/``from_dict`` round-trip through JSON without loss.
    """

    command: str
    seed: int = 0
    sections: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "seed": self.seed,
            "sections": {k: _jsonable(v) for k, v in sorted(self.sections.items())},
            "options": _jsonable(dict(sorted(self.options.items()))),
            "paths": dict(sorted(self.paths.items())),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        sections = {k: _build_section(k, v) for k, v in d.get("sections", {}).items()}
        return cls(d["command"], int(d.get("seed", 0)), sections, dict(d.get("options", {})), dict(d.get("paths", {})))

    def hash(self) -> str:
        body = self.to_dict()
        body.pop("paths")
        return hashlib.sha256(_canonical(body).encode()).hexdigest()

    def check_paths(self) -> None:
        """Inputs and outputs must be distinct files."""
        ins = {k: Path(v).resolve() for k, v in self.paths.items() if k.startswith("in_") and v}
        outs = {k: Path(v).resolve() for k, v in self.paths.items() if k.startswith("out_") and v}
        for ik, ip in ins.items():
            for ok, op in outs.items():
                if ip == op:
                    raise UsageError(f"output {ok} ({op}) is the input {ik}")


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def load_config_file(path: str | None) -> dict:
    """Read a JSON config; a manifest from an earlier run is accepted too."""
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    if "config" in doc and "config_hash" in doc:
        cfg = doc["config"]
        out = dict(cfg.get("sections", {}))
        out.update(cfg.get("options", {}))
        out["seed"] = cfg.get("seed", 0)
        return out
    return doc


def _flags(ns: argparse.Namespace, mapping: Mapping[str, str]) -> dict:
    """Explicitly given flags, renamed to config fields."""
    return {cfg: getattr(ns, dest) for dest, cfg in mapping.items() if getattr(ns, dest, None) is not None}


# ---------------------------------------------------------------------------
# staged outputs and manifest
# ---------------------------------------------------------------------------


class Outputs:
    """Collects output files in memory and writes them all at the end."""

    def __init__(self, out_dir: str | Path):
        self.out_dir = Path(out_dir)
        self.files: dict[str, bytes] = {}

    def text(self, name: str, text: str) -> None:
        self.files[name] = text.encode()

    def csv(self, name: str, frame: pd.DataFrame, float_format: str = "%.10g") -> None:
        buf = io.StringIO()
        frame.to_csv(buf, index=False, lineterminator="\n", float_format=float_format)
        self.text(name, buf.getvalue())

    def json(self, name: str, obj) -> None:
        self.text(name, json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=True) + "\n")

    def commit(self, run: RunConfig, inputs: Mapping[str, str | Path]) -> None:
        manifest = {
            "command": run.command,
            "seed": run.seed,
            "config": run.to_dict(),
            "config_hash": run.hash(),
            "inputs": {k: {"file": Path(p).name, "sha256": _sha256(Path(p).read_bytes())}
                       for k, p in sorted(inputs.items())},
            "outputs": {k: _sha256(v) for k, v in sorted(self.files.items())},
            "versions": _versions(),
        }
        # Output locations are left out so that a rerun elsewhere gives the same bytes.
        manifest["config"]["paths"] = {k: Path(v).name for k, v in manifest["config"]["paths"].items()
                                       if v and k.startswith("in_")}
        self.json("manifest.json", manifest)
        sources = {Path(p).resolve() for p in inputs.values()}
        clash = [n for n in self.files if (self.out_dir / n).resolve() in sources]
        if clash:
            raise UsageError(f"output {clash[0]} would overwrite an input file")
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for name, data in self.files.items():
            target = self.out_dir / name
            tmp = target.with_name(target.name + ".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, target)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _versions() -> dict:
    import numba
    import scipy

    return {
        "causalpanel": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "kernel_backend": BACKEND,
    }


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

_FILTER_RE = re.compile(r"^\s*([A-Za-z_]\w*)\s*(==|!=|<=|>=|<|>)\s*(.+?)\s*$")
_OPS: dict[str, Callable] = {
    "==": np.equal, "!=": np.not_equal, "<": np.less, "<=": np.less_equal, ">": np.greater, ">=": np.greater_equal,
}


def parse_filter(text: str) -> tuple[str, str, Any]:
    """``"gender == 1"`` -> ("gender", "==", 1.0); non-numeric values stay strings."""
    m = _FILTER_RE.match(text)
    if m is None:
        raise UsageError(f"cannot parse filter {text!r}; expected 'column op value'")
    col, op, raw = m.groups()
    raw = raw.strip("'\"")
    try:
        value: Any = float(raw)
    except ValueError:
        value = raw
    return col, op, value


def apply_filters(panel: CohortPanel, filters) -> CohortPanel:
    """Keep the rows satisfying every predicate."""
    if not filters:
        return panel
    frame = panel.frame
    keep = np.ones(len(frame), dtype=bool)
    for text in filters:
        col, op, value = parse_filter(text)
        if col not in frame.columns:
            raise UsageError(f"filter column {col!r} not in panel")
        values = frame[col].to_numpy()
        if isinstance(value, float):
            values = values.astype(np.float64)
        elif op not in ("==", "!="):
            raise UsageError(f"filter {text!r}: ordering needs a numeric value")
        else:
            values = values.astype(str)
        keep &= _OPS[op](values, value)
    if not keep.any():
        raise UsageError("filters leave no rows")
    return panel.filter_rows(keep)


def _parse_windows(spec: str | None) -> dict:
    if not spec:
        return dict(DEFAULT_WINDOWS)
    out = {}
    for part in spec.split(","):
        part = part.strip()
        try:
            out[part] = parse_window(part)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    return out


def _read_panel(path: str, outcome_kind: str) -> CohortPanel:
    if outcome_kind not in ("binary", "continuous"):
        raise UsageError("outcome kind must be 'binary' or 'continuous'")
    return read_panel_csv(path, binary_outcome=outcome_kind == "binary")


def _cluster_scheme(panel: CohortPanel, column: str | None) -> ClusterScheme | None:
    if not column or column == "unit_id":
        return None
    if column not in panel.frame.columns:
        raise UsageError(f"cluster column {column!r} not in panel")
    firsts = panel.frame.groupby("unit_id", sort=False)[column].first()
    return ClusterScheme.from_mapping(panel.unit_ids, firsts.to_dict())


def _policy_events(path: str | None):
    return read_policy_csv(path or builtin_policy_csv())


@dataclass
class Estimate:
    event_study: pd.DataFrame
    windows: pd.DataFrame
    table4: pd.DataFrame
    extra: dict = field(default_factory=dict)


def run_estimate(panel: CohortPanel, method: str, run: RunConfig, threads: int, label: str = "estimate") -> Estimate:
    """Estimate, aggregate to event time and average over the configured windows."""
    windows = _parse_windows(run.options.get("windows"))
    if method == "did":
        cfg: DidConfig = run.sections["did"]
        missing = [c for c in cfg.covariates if c not in panel.frame.columns]
        if missing:
            raise UsageError(f"covariates not in panel: {missing}")
        scheme = _cluster_scheme(panel, run.options.get("cluster"))
        index = build_cohort_index(panel)
        cells = estimate_all(panel, index, cfg, threads, scheme)
        es = aggregate_event_study(cells, index, cfg.event_window, run.options.get("weighting", "cohort"), scheme)
        extra = {"cells.csv": cells.to_frame(),
                 "skipped_cells.csv": pd.DataFrame(
                     [(g, t, why) for (g, t), why in sorted(cells.skipped.items())], columns=["g", "t", "reason"])}
    elif method == "ifect":
        if run.options.get("cluster") not in (None, "unit_id"):
            raise UsageError("ifect resamples units; --cluster is only available for did")
        cfg_i: IfectConfig = run.sections["ifect"]
        res = estimate_ifect(panel, cfg_i, threads)
        es = res.event_study
        summary = {"rank": res.model.rank, "converged": res.model.converged, "iterations": res.model.iterations,
                   "excluded_units": len(res.model.excluded_units), "failed_replicates": res.n_failed_replicates}
        extra = {"ifect_summary.json": summary}
        if res.rank_selection is not None:
            mspe = res.rank_selection.mspe
            extra["rank_selection.csv"] = pd.DataFrame({"rank": np.arange(len(mspe)), "mspe": mspe})
    else:
        raise UsageError(f"unknown method {method!r}")
    avg = window_average(es, windows, strict=False)
    return Estimate(es.table, windows_frame(avg), table4_frame(avg, label), extra)


def _reconstruct(survey_path: str, run: RunConfig):
    cfg: ReconstructionConfig = run.sections["reconstruction"]
    survey = read_survey_csv(survey_path)
    policy_table = None
    if not run.options.get("no_policies"):
        events = _policy_events(run.paths.get("in_policies"))
        years = pd.to_numeric(survey["survey_year"], errors="coerce")
        if years.isna().all():
            raise UsageError("survey has no valid survey_year")
        regions = sorted({str(r) for r in survey["region_id"].dropna()})
        known = {e.region_id for e in events}
        for r in regions:
            if r not in known:
                log.warning("region %s has no policy events; coded as never treated", r)
        rule = DateRule(run.options.get("date_rule", DateRule.CALENDAR_YEAR.value))
        policy_table = code_annual_indicators(events, (cfg.earliest_year, int(years.max())), rule, regions)
    result = reconstruct_panel(survey, cfg, policy_table, PolicyKind.parse(run.options.get("treatment", "billboard_ban")))
    return survey, result


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

RECON_FLAGS = {"min_age": "min_age", "earliest_year": "earliest_year", "history_cap": "history_cap_years"}
DID_FLAGS = {
    "control_group": "control_group", "base_period": "base_period_policy", "trim": "propensity_trim",
    "improved": "improved", "interact": "interact_covariates", "on_error": "on_error",
}
IFECT_FLAGS = {
    "max_rank": "max_rank", "rank": "rank", "cv_rounds": "cv_rounds", "bootstrap_reps": "bootstrap_reps",
    "em_tolerance": "em_tolerance", "max_iterations": "max_iterations",
}
DGP_FLAGS = {
    "n_units": "n_units", "true_effect": "true_effect", "factor_rank": "factor_rank",
    "loading_correlation": "loading_adoption_correlation", "factor_strength": "factor_strength",
    "noise_sd": "noise_sd", "outcome_kind": "outcome_kind", "attrition": "attrition",
}


def _seed(ns, file_cfg: Mapping) -> int:
    if ns.seed is not None:
        return int(ns.seed)
    return int(file_cfg.get("seed", 0))


def _options(ns, file_cfg: Mapping, names: Mapping[str, Any]) -> dict:
    """Scalar options: flag, else file, else default."""
    out = {}
    for name, default in names.items():
        flag = getattr(ns, name, None)
        out[name] = flag if flag is not None else file_cfg.get(name, default)
    return out


def cmd_reconstruct(ns) -> int:
    file_cfg = load_config_file(ns.config)
    run = RunConfig(
        "reconstruct",
        _seed(ns, file_cfg),
        {"reconstruction": _build_section("reconstruction", file_cfg.get("reconstruction", {}), _flags(ns, RECON_FLAGS))},
        _options(ns, file_cfg, {"date_rule": DateRule.CALENDAR_YEAR.value, "treatment": "billboard_ban",
                                "no_policies": False, "composition": False}),
        {"in_survey": ns.survey, "in_policies": ns.policies, "out_dir": ns.out_dir},
    )
    run.check_paths()
    survey, result = _reconstruct(ns.survey, run)
    out = Outputs(ns.out_dir)
    buf = io.StringIO()
    write_panel_csv(result.panel, buf)
    out.text("panel.csv", buf.getvalue())
    out.json("exclusions.json", result.exclusion_summary())
    if run.options["composition"]:
        out.csv("composition.csv", composition_report(survey, result.panel).table)
    inputs = {"survey": ns.survey}
    if ns.policies:
        inputs["policies"] = ns.policies
    out.commit(run, inputs)
    return 0


def cmd_policies(ns) -> int:
    file_cfg = load_config_file(ns.config)
    opts = _options(ns, file_cfg, {"date_rule": DateRule.CALENDAR_YEAR.value, "years": [1993, 2017]})
    run = RunConfig("policies", _seed(ns, file_cfg), {}, opts, {"in_policies": ns.policies, "out_dir": ns.out_dir})
    run.check_paths()
    events = _policy_events(ns.policies)
    t0, t1 = (int(y) for y in opts["years"])
    table = code_annual_indicators(events, (t0, t1), DateRule(opts["date_rule"]))
    out = Outputs(ns.out_dir)
    out.csv("indicators.csv", table.frame)
    first = sorted((r, k.value, y) for (r, k), y in table.first_years.items())
    out.csv("first_years.csv", pd.DataFrame(first, columns=["region_id", "policy_kind", "first_year"]))
    curves = []
    for kind in PolicyKind:
        curves += [(kind.value, y, c) for y, c in adoption_curve(table, kind)]
    out.csv("adoption.csv", pd.DataFrame(curves, columns=["policy_kind", "year", "regions_treated"]))
    out.commit(run, {"policies": ns.policies} if ns.policies else {})
    return 0


def _estimate_run(ns, file_cfg: Mapping, command: str) -> RunConfig:
    seed = _seed(ns, file_cfg)
    did_flags = _flags(ns, DID_FLAGS)
    if ns.covariates is not None:
        did_flags["covariates"] = [c for c in ns.covariates.split(",") if c]
    ifect_flags = _flags(ns, IFECT_FLAGS)
    if ns.covariates is not None:
        ifect_flags["covariates"] = did_flags["covariates"]
    if ns.window is not None:
        did_flags["event_window"] = ifect_flags["event_window"] = list(ns.window)
    ifect_flags["seed"] = seed
    sections = {
        "did": _build_section("did", file_cfg.get("did", {}), did_flags),
        "ifect": _build_section("ifect", file_cfg.get("ifect", {}), ifect_flags),
    }
    opts = _options(ns, file_cfg, {"method": "did", "weighting": "cohort", "cluster": None, "windows": None,
                                   "outcome_kind": "binary"})
    opts["filters"] = list(ns.filter) if ns.filter else list(file_cfg.get("filters", []))
    return RunConfig(command, seed, sections, opts, {"in_panel": ns.panel, "out_dir": ns.out_dir})


def cmd_estimate(ns) -> int:
    file_cfg = load_config_file(ns.config)
    run = _estimate_run(ns, file_cfg, "estimate")
    run.check_paths()
    panel = apply_filters(_read_panel(ns.panel, run.options["outcome_kind"]), run.options["filters"])
    est = run_estimate(panel, run.options["method"], run, ns.threads)
    out = Outputs(ns.out_dir)
    out.csv("event_study.csv", est.event_study)
    out.csv("windows.csv", est.windows)
    out.csv("table4.csv", est.table4)
    for name, obj in est.extra.items():
        out.csv(name, obj) if isinstance(obj, pd.DataFrame) else out.json(name, obj)
    out.commit(run, {"panel": ns.panel})
    return 0


def _dgp_from(ns, file_cfg: Mapping) -> DgpSpec:
    base = file_cfg.get("dgp", {k: v for k, v in file_cfg.items() if k in DgpSpec.__dataclass_fields__})
    flags = _flags(ns, DGP_FLAGS)
    if ns.seed is not None:
        flags["seed"] = ns.seed
    spec = _build_section("dgp", base, flags)
    spec.check()
    return spec


def cmd_simulate(ns) -> int:
    file_cfg = load_config_file(ns.spec)
    spec = _dgp_from(ns, file_cfg)
    run = RunConfig("simulate", spec.seed, {"dgp": spec}, {}, {"in_spec": ns.spec, "out_dir": ns.out_dir})
    run.check_paths()
    panel, truth = generate(spec)
    out = Outputs(ns.out_dir)
    buf = io.StringIO()
    write_panel_csv(panel, buf)
    out.text("panel.csv", buf.getvalue())
    out.json("truth.json", truth.to_dict())
    out.commit(run, {"spec": ns.spec} if ns.spec else {})
    return 0


def _estimators_from(doc: Mapping) -> dict:
    ests = doc.get("estimators") or {"did": {"method": "did"}}
    out = {}
    for name, cfg in ests.items():
        cfg = dict(cfg)
        method = cfg.pop("method", name)
        if method == "did":
            weighting = cfg.pop("weighting", "cohort")
            dcfg = _build_section("did", cfg.get("did", {}))
            out[name] = (did_estimator(dcfg, weighting), {"method": "did", "weighting": weighting, "did": _jsonable(dcfg)})
        elif method == "ifect":
            icfg = _build_section("ifect", cfg.get("ifect", {}))
            out[name] = (ifect_estimator(icfg), {"method": "ifect", "ifect": _jsonable(icfg)})
        else:
            raise UsageError(f"unknown estimator method {method!r}")
    return out


def cmd_benchmark(ns) -> int:
    doc = load_config_file(ns.spec)
    specs_doc = doc.get("specs") or {"default": doc.get("dgp", {})}
    specs = {}
    for name, d in specs_doc.items():
        d = dict(d)
        if ns.seed is not None:
            d["seed"] = ns.seed
        specs[name] = _build_section("dgp", d)
        specs[name].check()
    reps = int(ns.reps if ns.reps is not None else doc.get("reps", 100))
    estimators = _estimators_from(doc)
    run = RunConfig(
        "benchmark",
        int(ns.seed if ns.seed is not None else doc.get("seed", 0)),
        {},
        {"reps": reps, "specs": {k: _jsonable(v) for k, v in specs.items()},
         "estimators": {k: v[1] for k, v in estimators.items()}},
        {"in_spec": ns.spec, "out_dir": ns.out_dir},
    )
    run.check_paths()
    report = benchmark(specs, {k: v[0] for k, v in estimators.items()}, reps, ns.threads)
    out = Outputs(ns.out_dir)
    out.csv("report.csv", report.table)
    out.csv("replicates.csv", report.replicates)
    if ns.timings:
        out.csv("timings.csv", report.timings)
    out.commit(run, {"spec": ns.spec} if ns.spec else {})
    return 0


def _merge(base: Mapping, over: Mapping) -> dict:
    out = {k: dict(v) if isinstance(v, Mapping) else v for k, v in base.items()}
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    return out


def cmd_sweep(ns) -> int:
    """Run every column of a sweep file and collect the window averages side by side."""
    doc = load_config_file(ns.config)
    columns = doc.get("columns")
    if not columns:
        raise UsageError("sweep config needs a non-empty 'columns' list")
    base_dir = Path(ns.config).resolve().parent
    inputs_doc = doc.get("inputs", {})

    def resolve(flag, key):
        if flag:
            return flag
        p = inputs_doc.get(key)
        return str((base_dir / p).resolve()) if p else None

    survey = resolve(ns.survey, "survey")
    panel_path = resolve(ns.panel, "panel")
    policies = resolve(ns.policies, "policies")
    if bool(survey) == bool(panel_path):
        raise UsageError("sweep needs exactly one of a survey or a panel input")
    seed = _seed(ns, doc)
    base = doc.get("base", {})
    names = [c.get("name") for c in columns]
    if any(not n for n in names) or len(set(names)) != len(names):
        raise UsageError("every sweep column needs a unique 'name'")

    panels: dict[str, CohortPanel] = {}
    runs, inputs = {}, {}
    if survey:
        inputs["survey"] = survey
        if policies:
            inputs["policies"] = policies
    else:
        inputs["panel"] = panel_path
    out = Outputs(ns.out_dir)
    parts = []
    for col in columns:
        name = col["name"]
        cfg = _merge(base, {k: v for k, v in col.items() if k != "name"})
        ifect_cfg = dict(cfg.get("ifect", {}))
        ifect_cfg.setdefault("seed", seed)
        run = RunConfig(
            "sweep",
            seed,
            {"reconstruction": _build_section("reconstruction", cfg.get("reconstruction", {})),
             "did": _build_section("did", cfg.get("did", {})),
             "ifect": _build_section("ifect", ifect_cfg)},
            {"method": cfg.get("method", "did"), "weighting": cfg.get("weighting", "cohort"),
             "cluster": cfg.get("cluster"), "windows": cfg.get("windows"), "filters": list(cfg.get("filters", [])),
             "outcome_kind": cfg.get("outcome_kind", "binary"), "treatment": cfg.get("treatment", "billboard_ban"),
             "date_rule": cfg.get("date_rule", DateRule.CALENDAR_YEAR.value), "no_policies": False},
            {"in_survey": survey, "in_panel": panel_path, "in_policies": policies, "out_dir": ns.out_dir},
        )
        run.check_paths()
        if survey:
            key = _canonical(_jsonable(run.sections["reconstruction"])) + run.options["treatment"] + run.options["date_rule"]
            if key not in panels:
                panels[key] = _reconstruct(survey, run)[1].panel
        else:
            if col.get("reconstruction"):
                raise UsageError(f"column {name}: reconstruction settings need a survey input")
            key = run.options["outcome_kind"]
            if key not in panels:
                panels[key] = _read_panel(panel_path, key)
        panel = apply_filters(panels[key], run.options["filters"])
        log.info("sweep column %s", name)
        est = run_estimate(panel, run.options["method"], run, ns.threads, label=name)
        slug = re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_") or "col"
        out.csv(f"event_study_{slug}.csv", est.event_study)
        parts.append(est.table4.set_index(["window", "statistic"]))
        runs[name] = {k: v for k, v in run.to_dict().items() if k != "paths"}
    keys = list(dict.fromkeys(k for p in parts for k in p.index))
    table = pd.concat([p.reindex(keys) for p in parts], axis=1)
    table.index = pd.MultiIndex.from_tuples(keys, names=["window", "statistic"])
    out.csv("table4.csv", table.reset_index())
    top = RunConfig("sweep", seed, {}, {"columns": runs}, {"in_config": ns.config, "out_dir": ns.out_dir})
    inputs["config"] = ns.config
    out.commit(top, inputs)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    p.add_argument("--out-dir", required=True, help="directory for outputs and manifest.json")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--threads", type=int, default=1, help="worker threads inside estimators")
    if config:
        p.add_argument("--config", help="JSON config file; flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="causalpanel", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", help="survey records -> annual panel")
    _common(p)
    p.add_argument("--survey", required=True)
    p.add_argument("--policies", help="policy event CSV (default: built-in table)")
    p.add_argument("--no-policies", action="store_const", const=True, help="leave treated = 0")
    p.add_argument("--treatment", choices=[k.value for k in PolicyKind])
    p.add_argument("--date-rule", choices=[r.value for r in DateRule])
    p.add_argument("--min-age", type=int)
    p.add_argument("--earliest-year", type=int)
    p.add_argument("--history-cap", type=int)
    p.add_argument("--composition", action="store_const", const=True, help="also write composition.csv")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("policies", help="policy events -> annual indicators")
    _common(p)
    p.add_argument("--policies", help="policy event CSV (default: built-in table)")
    p.add_argument("--years", type=int, nargs=2, metavar=("FIRST", "LAST"))
    p.add_argument("--date-rule", choices=[r.value for r in DateRule])
    p.set_defaults(func=cmd_policies)

    p = sub.add_parser("estimate", help="panel -> event study and window averages")
    _common(p)
    p.add_argument("--panel", required=True)
    p.add_argument("--method", choices=["did", "ifect"])
    p.add_argument("--outcome-kind", choices=["binary", "continuous"])
    p.add_argument("--filter", action="append", help="row predicate 'column op value' (repeatable)")
    p.add_argument("--covariates", help="comma-separated covariate columns")
    p.add_argument("--window", type=int, nargs=2, metavar=("LO", "HI"), help="event-time window")
    p.add_argument("--windows", help="comma-separated averaging windows, e.g. '0-1,0-3,pre 1-5'")
    p.add_argument("--weighting", choices=["cohort", "cell"])
    p.add_argument("--cluster", help="cluster column (default: unit)")
    p.add_argument("--control-group", choices=["not_yet_treated", "never_treated"])
    p.add_argument("--base-period", choices=["varying", "universal"])
    p.add_argument("--trim", type=float)
    p.add_argument("--improved", action="store_const", const=True)
    p.add_argument("--interact", action="store_const", const=True)
    p.add_argument("--on-error", choices=["raise", "skip"])
    p.add_argument("--max-rank", type=int)
    p.add_argument("--rank", type=int)
    p.add_argument("--cv-rounds", type=int)
    p.add_argument("--bootstrap-reps", type=int)
    p.add_argument("--em-tolerance", type=float)
    p.add_argument("--max-iterations", type=int)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="DGP spec -> panel and ground truth")
    _common(p, config=False)
    p.add_argument("--spec", help="JSON DGP spec")
    p.add_argument("--n-units", type=int)
    p.add_argument("--true-effect", type=float)
    p.add_argument("--factor-rank", type=int)
    p.add_argument("--loading-correlation", type=float)
    p.add_argument("--factor-strength", type=float)
    p.add_argument("--noise-sd", type=float)
    p.add_argument("--outcome-kind", choices=["linear", "binary"])
    p.add_argument("--attrition", choices=["none", "waves"])
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("benchmark", help="Monte Carlo report over specs and estimators")
    _common(p, config=False)
    p.add_argument("--spec", required=True, help="JSON with 'specs', 'estimators', 'reps'")
    p.add_argument("--reps", type=int)
    p.add_argument("--timings", action="store_true", help="also write wall-clock timings.csv")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("sweep", help="run a column sweep and tabulate window averages")
    p.add_argument("--config", required=True, help="JSON sweep file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--survey")
    p.add_argument("--panel")
    p.add_argument("--policies")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(ns.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if getattr(ns, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    try:
        return ns.func(ns)
    except (CausalPanelError, UsageError, ValueError, OSError, KeyError) as exc:
        print(f"causalpanel {ns.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
