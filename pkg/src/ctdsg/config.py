"""Experiment configuration: YAML/JSON files, presets, CLI overrides, validation.

Agents are labelled ``1..n`` in configuration files and output CSVs.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .analysis import regime_table
from .dynamics import NoiseModel, SimConfig, StepSchedule
from .errors import ConfigError, OutOfRange
from .graph import GraphSchedule, WeightedDigraph, check_delta_tc_connectivity, default_schedule
from .objective import ObjectiveSet, QuadraticObjective, pattern_objectives

KINDS = ("simulate", "sweep", "certify-bounds", "consensus-only", "isometry")
PRESETS = ("reference",)


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    sim: SimConfig
    runs: int
    workers: int
    out: Path
    kind: str
    a_values: tuple[float, ...]
    connectivity: tuple[float, float] | None
    decay_horizon: float
    decay_grid: int
    rate_window: tuple[float, float] | None
    rate_tolerance: float
    plots: bool
    raw: dict
    """Fully resolved configuration; enough to rerun the experiment."""

    @property
    def sha256(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: dict) -> str:
    blob = json.dumps(_replayable(raw), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _replayable(raw: dict) -> dict:
    out = copy.deepcopy(raw)
    out.get("experiment", {}).pop("out", None)
    out.get("ensemble", {}).pop("workers", None)
    return out


def load_raw(source: str | Path) -> dict:
    """Read a YAML or JSON config, a run manifest, or a named preset."""
    if str(source) in PRESETS:
        text = resources.files("ctdsg.presets").joinpath(f"{source}.yaml").read_text()
        raw = yaml.safe_load(text)
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError("--config", f"no such file {path}")
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError("--config", f"cannot parse {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "configuration must be a mapping")
    if "manifest_version" in raw:
        raw = raw["config"]
    return raw


def apply_overrides(raw: dict, **overrides) -> dict:
    """Return a copy of ``raw`` with the scalar CLI overrides applied."""
    raw = copy.deepcopy(raw)
    where = {
        "seed": ("ensemble", "seed"),
        "runs": ("ensemble", "runs"),
        "workers": ("ensemble", "workers"),
        "h": ("dynamics", "h"),
        "horizon": ("dynamics", "horizon"),
        "a": ("dynamics", "a"),
        "beta": ("dynamics", "beta"),
        "out": ("experiment", "out"),
        "experiment": ("experiment", "kind"),
        "a_values": ("experiment", "a_values"),
    }
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "noise_scale":
            raw.setdefault("dynamics", {}).setdefault("noise", {})["scale"] = value
            continue
        section, name = where[key]
        raw.setdefault(section, {})[name] = value
    return raw


def _get(d: dict, path: str, default=...):
    cur: Any = d
    for part in path.split("."):
        if not isinstance(cur, dict) or part not in cur:
            if default is ...:
                raise ConfigError(path, "missing")
            return default
        cur = cur[part]
    return cur


def _num(d: dict, path: str, default=..., kind=float):
    val = _get(d, path, default)
    try:
        return kind(val)
    except (TypeError, ValueError):
        raise ConfigError(path, f"expected {kind.__name__}, got {val!r}") from None


def build_schedule(spec: dict) -> GraphSchedule:
    if spec.get("preset") == "default":
        return default_schedule(float(spec.get("hold", 0.01)))
    n = _num(spec, "agents", kind=int)
    segments = []
    for k, seg in enumerate(_get(spec, "segments")):
        field = f"graph.segments[{k}]"
        edges = []
        for e in seg.get("edges", []):
            if len(e) != 3:
                raise ConfigError(f"{field}.edges", f"edge {e!r} is not [from, to, weight]")
            src, dst, w = int(e[0]), int(e[1]), float(e[2])
            if not (1 <= src <= n and 1 <= dst <= n):
                raise ConfigError(f"{field}.edges", f"agent label outside 1..{n} in {e!r}")
            edges.append((src - 1, dst - 1, w))
        try:
            g = WeightedDigraph.from_edges(n, edges)
            segments.append((_num(seg, "duration"), g))
        except ValueError as exc:
            raise ConfigError(field, str(exc)) from None
    try:
        return GraphSchedule(tuple(segments), periodic=bool(spec.get("periodic", True)))
    except ValueError as exc:
        raise ConfigError("graph.segments", str(exc)) from None


def build_objectives(spec: dict) -> ObjectiveSet:
    try:
        if "pattern" in spec:
            return ObjectiveSet(pattern_objectives(spec["pattern"]["a"], spec["pattern"]["b"]))
        if "quadratics" in spec:
            return ObjectiveSet([QuadraticObjective(q["P"], q["q"], q.get("c", 0.0)) for q in spec["quadratics"]])
    except (KeyError, ValueError) as exc:
        raise ConfigError("objectives", str(exc)) from None
    raise ConfigError("objectives", "expected 'pattern' or 'quadratics'")


def build_noise(spec: dict) -> NoiseModel:
    try:
        vec = spec.get("vector")
        return NoiseModel(
            kind=spec.get("kind", "zero"),
            scale=float(spec.get("scale", 1.0)),
            vector=None if vec is None else tuple(map(tuple, vec)) if isinstance(vec[0], list) else tuple(vec),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError("dynamics.noise", str(exc)) from None


def build(raw: dict) -> ExperimentConfig:
    """Validate ``raw`` and turn it into an ``ExperimentConfig``."""
    kind = _get(raw, "experiment.kind", "simulate")
    if kind not in KINDS:
        raise ConfigError("experiment.kind", f"unknown kind {kind!r}; expected one of {KINDS}")

    schedule = build_schedule(_get(raw, "graph"))
    a1 = _get(raw, "graph.connectivity", None)
    connectivity = None
    if a1 is not None:
        delta, tc = _num(raw, "graph.connectivity.delta"), _num(raw, "graph.connectivity.tc")
        if not schedule.is_balanced():
            raise ConfigError("graph", "strong connectivity is declared but a subgraph is unbalanced")
        verdict = check_delta_tc_connectivity(schedule, delta, tc)
        if not verdict.strongly_connected:
            raise ConfigError("graph.connectivity", f"schedule is not ({delta}, {tc})-strongly connected")
        connectivity = (delta, tc)

    objectives = build_objectives(_get(raw, "objectives"))
    a = _num(raw, "dynamics.a")
    try:
        regime_table(a)
        step = StepSchedule(_num(raw, "dynamics.beta"), a)
    except (OutOfRange, ValueError) as exc:
        raise ConfigError("dynamics.a" if isinstance(exc, OutOfRange) else "dynamics.beta", str(exc)) from None
    a_values = tuple(float(v) for v in _get(raw, "experiment.a_values", [a]))
    for v in a_values:
        try:
            regime_table(v)
        except OutOfRange as exc:
            raise ConfigError("experiment.a_values", str(exc)) from None

    sim = SimConfig(
        schedule=schedule,
        objectives=objectives,
        step=step,
        noise=build_noise(_get(raw, "dynamics.noise", {})),
        h=_num(raw, "dynamics.h"),
        horizon=_num(raw, "dynamics.horizon"),
        x0=_get(raw, "dynamics.x0"),
        seed=_num(raw, "ensemble.seed", 0, int),
        sample_stride=_num(raw, "ensemble.sample_stride", 1, int),
        zero_gradient=bool(_get(raw, "dynamics.zero_gradient", False)),
    )
    runs = _num(raw, "ensemble.runs", 1, int)
    workers = _num(raw, "ensemble.workers", 1, int)
    if runs < 1:
        raise ConfigError("ensemble.runs", "must be at least 1")
    if workers < 1:
        raise ConfigError("ensemble.workers", "must be at least 1")
    window = _get(raw, "analysis.rate_window", None)
    return ExperimentConfig(
        sim=sim,
        runs=runs,
        workers=workers,
        out=Path(_get(raw, "experiment.out", "results")),
        kind=kind,
        a_values=a_values,
        connectivity=connectivity,
        decay_horizon=_num(raw, "analysis.decay_horizon", 1.0),
        decay_grid=_num(raw, "analysis.decay_grid", 400, int),
        rate_window=None if window is None else (float(window[0]), float(window[1])),
        rate_tolerance=_num(raw, "analysis.rate_tolerance", 0.15),
        plots=bool(_get(raw, "experiment.plots", True)),
        raw=raw,
    )


def load(source: str | Path, **overrides) -> ExperimentConfig:
    return build(apply_overrides(load_raw(source), **overrides))
