"""Campaign configuration files and the batch runners behind ``snvanneal simulate`` and ``feedback run``.

A campaign file is JSON validated against the packaged
``campaign.schema.json``.  Unknown keys are rejected, missing optional
keys take their schema defaults, and the fully resolved document is
echoed into every report.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional

import jsonschema
import numpy as np

from .exceptions import ConfigurationError, ReportIOError
from .feedback import Protocol, ever_snv, frozen_snv, run_protocol
from .kinetics import AnnealSegment, RateModel, SiteArray, Species, State, implant, run_segments
from .kinetics.model import deep_merge, resolve_preset
from .kinetics.emission import array_window_intensity
from .reports import emit_report
from .spectra import SpectralWindow, window_from_label


@lru_cache(maxsize=1)
def campaign_schema() -> dict:
    """The published JSON schema for campaign files."""
    return json.loads(resources.files("snvanneal").joinpath("data/campaign.schema.json").read_text())


def _fill_defaults(doc, schema):
    """Insert schema ``default`` values for absent object members, recursively."""
    if not isinstance(doc, dict) or schema.get("type") != "object":
        if isinstance(doc, list) and isinstance(schema.get("items"), dict):
            for item in doc:
                _fill_defaults(item, schema["items"])
        return doc
    for key, sub in schema.get("properties", {}).items():
        if key not in doc and "default" in sub:
            doc[key] = copy.deepcopy(sub["default"])
        if key in doc:
            _fill_defaults(doc[key], sub)
    return doc


def _location(err: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in err.absolute_path)
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        path = ".".join([path, *extra] if path else extra)
    elif err.validator == "required":
        missing = [k for k in err.validator_value if k not in err.instance]
        path = ".".join([path, *missing] if path else missing)
    return path or "<root>"


@dataclass(frozen=True)
class CampaignConfig:
    """Validated campaign settings; ``raw`` is the resolved document."""

    raw: dict

    @property
    def rows(self) -> int:
        return self.raw["array"]["rows"]

    @property
    def cols(self) -> int:
        return self.raw["array"]["cols"]

    @property
    def pitch(self) -> float:
        return float(self.raw["array"]["pitch_um"])

    @property
    def doses(self) -> List[float]:
        return [float(d) for d in self.raw["doses"]]

    @property
    def seeds(self) -> List[int]:
        return list(self.raw["seeds"])

    @property
    def output_dir(self) -> str:
        return self.raw["output_dir"]

    @property
    def segments(self) -> List[AnnealSegment]:
        return [AnnealSegment.from_dict(s) for s in self.raw["segments"]]

    @property
    def windows(self) -> List[SpectralWindow]:
        return [window_from_label(w) for w in self.raw["measurement"]["windows"]]

    def resolved_model(self) -> dict:
        rm = self.raw["rate_model"]
        cfg = resolve_preset(rm["preset"])
        return deep_merge(cfg, {"rates": rm["rates"], "species": rm["species"]})

    def rate_model(self) -> RateModel:
        return RateModel.from_dict(self.resolved_model()["rates"])

    def species(self) -> Species:
        try:
            return Species.from_config(self.resolved_model())
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"species override is incomplete: {exc}", key="rate_model.species") from exc

    def protocol(self, stop_rule: Optional[str] = None) -> Protocol:
        fb = self.raw["feedback"]
        return Protocol(AnnealSegment(fb["pulse_nJ"], fb["duration_s"]), stop_rule=stop_rule or fb["stop_rule"],
                        max_cycles=fb["max_cycles"], targets=fb["targets"], monitor=fb["monitor"],
                        window=SpectralWindow(*self.species().monitor_window), bin_width=fb["bin_s"],
                        threshold_sigma=fb["threshold_sigma"], min_dwell_bins=fb["min_dwell_bins"],
                        acquisition=self.raw["measurement"]["acquisition_s"])

    def with_seed(self, seed: Optional[int]) -> "CampaignConfig":
        if seed is None:
            return self
        return CampaignConfig({**copy.deepcopy(self.raw), "seeds": [int(seed)]})

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def config_from_dict(doc: dict) -> CampaignConfig:
    """Validate ``doc`` and fill defaults.

    Raises
    ------
    ConfigurationError
        With ``key`` set to the dotted location of the first violation,
        for example ``array.pitch_um``.
    """
    schema = campaign_schema()
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        err = errors[0]
        where = _location(err)
        raise ConfigurationError(f"{where}: {err.message}", key=where)
    cfg = CampaignConfig(_fill_defaults(copy.deepcopy(doc), schema))
    # surface model errors (bad overrides) at parse time
    cfg.rate_model()
    cfg.species()
    return cfg


def parse_config(path) -> CampaignConfig:
    """Read and validate a campaign JSON file.

    Raises
    ------
    ReportIOError
        The file cannot be read.
    ConfigurationError
        The file is not JSON or violates the schema.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ReportIOError(f"cannot read {path}: {exc.strerror or exc}", path=str(path)) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON ({exc})", key="<root>") from exc
    return config_from_dict(doc)


# --------------------------------------------------------------------------
# batch runners
# --------------------------------------------------------------------------

def _dose_tag(dose: float) -> str:
    return f"{dose:g}".replace(".", "p")


def _window_rows(arr: SiteArray, cfg: CampaignConfig, sp: Species, seed: int, k: int) -> List[dict]:
    # same noise stream as kinetics.emission.dose_study, so the two agree
    rng = np.random.default_rng([int(seed), k, 2])
    rows = []
    for w in cfg.windows:
        mu = array_window_intensity(arr, w, cfg.raw["measurement"]["acquisition_s"], sp)
        rows.append({"dose": float(arr.mean_dose), "window": w.label,
                     "intensity": float(rng.poisson(mu)) if cfg.raw["measurement"]["noise"] else mu})
    return rows


def _emitter_counts(arr: SiteArray) -> Dict[str, int]:
    counts = arr.counts()
    return {k: counts[k] for k in sorted(counts)}


def run_simulation(cfg: CampaignConfig) -> dict:
    """Implant and anneal one array per (seed, dose).

    Returns
    -------
    dict
        ``runs`` (per seed and dose: state counts, events, window
        intensities) and ``dose_study`` (seed-averaged intensity rows).
    """
    rates, sp = cfg.rate_model(), cfg.species()
    runs = []
    per_dose: Dict[tuple, List[float]] = {}
    for seed in cfg.seeds:
        for k, dose in enumerate(cfg.doses):
            arr0 = implant(cfg.rows, cfg.cols, cfg.pitch, dose, seed, rates)
            arr, events = run_segments(arr0, cfg.segments, rates, sp)
            rows = _window_rows(arr, cfg, sp, seed, k)
            for r in rows:
                per_dose.setdefault((k, r["window"]), []).append(r["intensity"])
            runs.append({"seed": seed, "dose": dose, "counts": _emitter_counts(arr), "n_events": len(events),
                         "total_ions": int(arr.dose.sum()), "intensities": {r["window"]: r["intensity"] for r in rows},
                         "events": events})
    study = [{"dose": cfg.doses[k], "window": w, "intensity": float(np.mean(v))}
             for (k, w), v in per_dose.items()]
    return {"runs": runs, "dose_study": study}


def run_feedback(cfg: CampaignConfig, stop_rule: Optional[str] = None) -> dict:
    """Pre-treat every (seed, dose) array with the configured segments, then run the feedback protocol on it."""
    rates, sp = cfg.rate_model(), cfg.species()
    proto = cfg.protocol(stop_rule)
    runs = []
    for seed in cfg.seeds:
        for dose in cfg.doses:
            arr0 = implant(cfg.rows, cfg.cols, cfg.pitch, dose, seed, rates)
            arr, pre_events = run_segments(arr0, cfg.segments, rates, sp)
            rep = run_protocol(arr, proto, rates, seed, sp)
            body = rep.to_dict()
            runs.append({"seed": seed, "dose": dose, "report": body, "events": pre_events + rep.events,
                         "snv_reached": sorted(ever_snv(rep.events)), "snv_frozen": sorted(frozen_snv(rep))})
    return {"protocol": proto.to_dict(), "runs": runs}


def _write_events(events, path: Path) -> None:
    try:
        with path.open("w") as fh:
            for e in events:
                fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")
    except OSError as exc:
        raise ReportIOError(f"cannot write {path}: {exc.strerror or exc}", path=str(path)) from exc


def write_simulation(result: dict, cfg: CampaignConfig, out_dir, fmt: str = "json",
                     timestamp: Optional[str] = "now") -> List[Path]:
    """Event logs (JSON lines), ``dose_study.csv`` and the summary report.

    With ``fmt="csv"`` the summary is a flat ``report.csv`` (one row per
    seed and dose) and the resolved config goes to ``config.json``.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportIOError(f"cannot create {out}: {exc.strerror or exc}", path=str(out)) from exc
    written = []
    summary = []
    for run in result["runs"]:
        name = f"events_seed{run['seed']}_dose{_dose_tag(run['dose'])}.jsonl"
        _write_events(run["events"], out / name)
        written.append(out / name)
        summary.append({k: v for k, v in run.items() if k != "events"} | {"event_log": name})
    written.append(emit_report(result["dose_study"], out / "dose_study.csv", "csv", timestamp,
                               columns=("dose", "window", "intensity")))
    if fmt == "csv":
        flat = [{"seed": r["seed"], "dose": r["dose"], "total_ions": r["total_ions"], "n_events": r["n_events"],
                 **{f"n_{k}": v for k, v in r["counts"].items()},
                 **{f"intensity_{k}": v for k, v in r["intensities"].items()}, "event_log": r["event_log"]}
                for r in summary]
        written.append(emit_report(flat, out / "report.csv", "csv", timestamp))
        written.append(emit_report({"config": cfg.to_dict()}, out / "config.json", "json", timestamp))
    else:
        written.append(emit_report({"config": cfg.to_dict(), "runs": summary}, out / "report.json", "json",
                                   timestamp))
    return written


def write_feedback(result: dict, cfg: CampaignConfig, out_dir, fmt: str = "json",
                   timestamp: Optional[str] = "now") -> List[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportIOError(f"cannot create {out}: {exc.strerror or exc}", path=str(out)) from exc
    written, summary = [], []
    for run in result["runs"]:
        name = f"feedback_events_seed{run['seed']}_dose{_dose_tag(run['dose'])}.jsonl"
        _write_events(run["events"], out / name)
        written.append(out / name)
        summary.append({k: v for k, v in run.items() if k != "events"} | {"event_log": name})
    if fmt == "csv":
        flat = [{"seed": r["seed"], "dose": r["dose"], "site": s["site"], "final_state": s["final_state"],
                 "cycles": s["cycles"], "stopped_by_rule": s["stopped_by_rule"],
                 "n_feedback_events": len(s["feedback_events"])}
                for r in summary for s in r["report"]["sites"]]
        written.append(emit_report(flat, out / "feedback_report.csv", "csv", timestamp))
        written.append(emit_report({"config": cfg.to_dict(), "protocol": result["protocol"]}, out / "config.json",
                                   "json", timestamp))
    else:
        written.append(emit_report({"config": cfg.to_dict(), "protocol": result["protocol"], "runs": summary},
                                   out / "feedback_report.json", "json", timestamp))
    return written


def full_array_config() -> dict:
    """Seven dose arrays at 0.78 µm pitch, the layout used for dose-scaling studies."""
    return {"array": {"rows": 100, "cols": 100, "pitch_um": 0.78},
            "doses": [1, 5, 10, 50, 100, 500, 1000],
            "segments": [resolve_preset(None)["protocols"]["preliminary"]]}


__all__ = ["CampaignConfig", "campaign_schema", "config_from_dict", "parse_config", "run_simulation",
           "run_feedback", "write_simulation", "write_feedback", "full_array_config", "State"]
