"""Experiment configuration: one JSON document per experiment.

Example::

    {
      "scenario": {"kind": "multiplicity_one_imbalance", "K": 5, "n1": 40, "n2": 10,
                   "ratio": 0.2, "subset": [3, 4]},
      "ufm": {"d": 5, "lambda_w": 0.005, "lambda_h": 0.005, "replicas": 3,
              "restarts": 10, "seed": 7, "grad_tol": 1e-10},
      "c1": 1.0,
      "c1_grid": [0.25, 0.5, 1, 2, 4],
      "thresholds": {"self_duality": 1e-3},
      "output": {"dir": "out", "format": "both"}
    }

Only ``OUTPUT_DIR`` may override a config value from the environment.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .label_space import LabelDistribution, scenario
from .ufm import UfmConfig

DEFAULT_THRESHOLDS = {
    "centering": 1e-6,
    "collapse": 1e-6,
    "self_duality": 1e-3,
    "generation": 1e-3,
    "two_level": 1e-4,
    "scaling_identity": 1e-6,
    "bound": 1e-9,
}
DEFAULT_C1_GRID = (0.25, 0.5, 1.0, 2.0, 4.0)
FORMATS = ("json", "csv", "both")
_TOP_KEYS = {"scenario", "ufm", "c1", "c1_grid", "thresholds", "output", "verbosity"}


@dataclass(frozen=True)
class ExperimentConfig:
    scenario_kind: str
    scenario_params: dict[str, Any]
    ufm: UfmConfig = field(default_factory=UfmConfig)
    c1: float | dict[int, float] = 1.0
    c1_grid: dict[int, tuple[float, ...]] | tuple[float, ...] = DEFAULT_C1_GRID
    thresholds: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_THRESHOLDS))
    out_dir: str = "out"
    fmt: str = "json"
    verbosity: int = 1

    def distribution(self) -> LabelDistribution:
        return scenario(self.scenario_kind, self.scenario_params)

    def grid_for(self, m: int) -> tuple[float, ...]:
        if isinstance(self.c1_grid, Mapping):
            try:
                return self.c1_grid[m]
            except KeyError:
                raise ConfigError(f"c1_grid: no grid for multiplicity m={m}") from None
        return self.c1_grid

    def with_overrides(self, **kw) -> "ExperimentConfig":
        """Apply CLI flag overrides (``seed``, ``restarts``, ``out_dir``, ``fmt``); ``None`` means keep."""
        ufm_kw = {k: kw.pop(k) for k in ("seed", "restarts") if kw.get(k) is not None}
        kw = {k: v for k, v in kw.items() if v is not None}
        if "fmt" in kw and kw["fmt"] not in FORMATS:
            raise ConfigError(f"format must be one of {FORMATS}")
        out = replace(self, ufm=replace(self.ufm, **ufm_kw), **kw)
        out.ufm.validate(out.distribution().K)
        return out

    def echo(self) -> dict[str, Any]:
        """JSON-ready copy of the effective configuration (no output paths)."""
        from dataclasses import asdict

        grid = (
            {str(m): list(v) for m, v in self.c1_grid.items()}
            if isinstance(self.c1_grid, Mapping)
            else list(self.c1_grid)
        )
        c1 = {str(m): v for m, v in self.c1.items()} if isinstance(self.c1, Mapping) else self.c1
        return {
            "scenario": {"kind": self.scenario_kind, **self.scenario_params},
            "ufm": asdict(self.ufm),
            "c1": c1,
            "c1_grid": grid,
            "thresholds": dict(self.thresholds),
        }


def _line_of(text: str, key: str) -> str:
    if not text:
        return ""
    for i, line in enumerate(text.splitlines(), 1):
        if re.search(rf'"{re.escape(key)}"\s*:', line):
            return f" (line {i})"
    return ""


def _per_m(value: Any, where: str, conv) -> Any:
    if isinstance(value, Mapping):
        out = {}
        for k, v in value.items():
            try:
                out[int(k)] = conv(v)
            except (TypeError, ValueError):
                raise ConfigError(f"{where}.{k}: invalid value {v!r}") from None
        return out
    try:
        return conv(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: invalid value {value!r}") from None


def _positive_float(v: Any) -> float:
    if isinstance(v, bool):
        raise TypeError
    f = float(v)
    if not f > 0:
        raise ValueError
    return f


def _grid(v: Any) -> tuple[float, ...]:
    if isinstance(v, (str, bytes)) or not hasattr(v, "__iter__"):
        raise TypeError
    g = tuple(_positive_float(x) for x in v)
    if not g:
        raise ValueError
    return g


def parse_config(doc: Mapping[str, Any], text: str = "") -> ExperimentConfig:
    """Validate a config document; errors name the offending field (and line, if known)."""

    def fail(field_path: str, msg: str):
        raise ConfigError(f"config.{field_path}{_line_of(text, field_path.split('.')[-1])}: {msg}")

    if not isinstance(doc, Mapping):
        raise ConfigError("config: top level must be a JSON object")
    unknown = sorted(set(doc) - _TOP_KEYS)
    if unknown:
        fail(unknown[0], f"unknown key (allowed: {sorted(_TOP_KEYS)})")
    if "scenario" not in doc:
        raise ConfigError("config: missing required key 'scenario'")
    sc = doc["scenario"]
    if not isinstance(sc, Mapping) or "kind" not in sc:
        fail("scenario", "must be an object with a 'kind'")
    params = {k: v for k, v in sc.items() if k != "kind"}

    try:
        ufm = UfmConfig.from_dict(doc.get("ufm", {}))
    except TypeError as exc:
        fail("ufm", str(exc))
    except ConfigError as exc:
        raise ConfigError(f"config.{exc}") from None

    c1 = _per_m(doc.get("c1", 1.0), "config.c1", _positive_float)
    c1_grid = _per_m(doc.get("c1_grid", list(DEFAULT_C1_GRID)), "config.c1_grid", _grid)

    thresholds = dict(DEFAULT_THRESHOLDS)
    for k, v in dict(doc.get("thresholds", {})).items():
        if k not in DEFAULT_THRESHOLDS:
            fail(f"thresholds.{k}", f"unknown threshold (allowed: {sorted(DEFAULT_THRESHOLDS)})")
        try:
            thresholds[k] = _positive_float(v)
        except (TypeError, ValueError):
            fail(f"thresholds.{k}", f"must be a positive number, got {v!r}")

    output = doc.get("output", {})
    if not isinstance(output, Mapping):
        fail("output", "must be an object")
    fmt = output.get("format", "json")
    if fmt not in FORMATS:
        fail("output.format", f"must be one of {FORMATS}, got {fmt!r}")
    out_dir = os.environ.get("OUTPUT_DIR") or str(output.get("dir", "out"))
    verbosity = doc.get("verbosity", 1)
    if isinstance(verbosity, bool) or not isinstance(verbosity, int):
        fail("verbosity", "must be an integer")

    cfg = ExperimentConfig(
        scenario_kind=str(sc["kind"]),
        scenario_params=params,
        ufm=ufm,
        c1=c1,
        c1_grid=c1_grid,
        thresholds=thresholds,
        out_dir=out_dir,
        fmt=fmt,
        verbosity=verbosity,
    )
    try:
        dist = cfg.distribution()
    except ConfigError as exc:
        msg = str(exc)
        key = msg.split(":")[0].split(".")[-1]
        raise ConfigError(f"config.{msg}{_line_of(text, key)}") from None
    try:
        ufm.validate(dist.K)
    except ConfigError as exc:
        key = str(exc).split(" ")[0].split(".")[-1]
        raise ConfigError(f"config.{exc}{_line_of(text, key)}") from None
    for name, val in (("c1", c1), ("c1_grid", c1_grid)):
        if isinstance(val, Mapping):
            missing = [m for m in dist.multiplicities if m not in val]
            if missing:
                fail(name, f"no entry for multiplicities {missing}")
            extra = sorted(m for m in val if m not in dist.multiplicities)
            if extra:
                fail(name, f"multiplicities {extra} do not occur in the scenario")
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {p}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {p}: line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    return parse_config(doc, text)
