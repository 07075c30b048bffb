"""Experiment configuration: YAML text validated against a small schema.

Errors carry the file name and line of the offending entry, e.g.
``cfg.yaml:14: tightening.epsilon: must lie in (0, 1), got 1.5``.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml


class ConfigError(ValueError):
    """Invalid configuration; the message names the file, line and field."""


DEFAULTS = {
    "system": {"dt": None},
    "design": {"K": None},
    "disturbance": {"truncation_radius_sq": float("inf"), "covariance": None, "table": None},
    "tightening": {"r": None, "r_ratio": None, "validation_samples": 100_000,
                   "validation_seed": None},
    "sweep": {"rho_min": 1.0, "rho_max": 1e6, "n_C": 100, "M": 20, "min_samples": 0,
              "slack_mode": "shared", "g_sum": "through-M", "trace_rhos": [],
              "trace_count": 200, "chunk": 512, "r": None},
    "selection": {"policy": "min-gamma", "threshold": None},
    "output": {"directory": "smpcval-out", "formats": ["json", "csv", "svg"]},
    "fast": {},
}
SECTIONS = tuple(DEFAULTS)
REQUIRED = {
    "system": ("A", "B"),
    "design": ("Q", "R", "N"),
    "disturbance": ("kind",),
    "tightening": ("epsilon", "delta", "seed"),
    "sweep": ("epsilon", "delta", "seed"),
}


class _Lines:
    """Maps a dotted key path to the line where it appears in the source."""

    def __init__(self, text: str, name: str):
        self.name = name
        self.lines: dict[str, int] = {}
        try:
            root = yaml.compose(text)
        except yaml.YAMLError:
            root = None
        if root is not None:
            self._walk(root, "")

    def _walk(self, node, prefix):
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                path = f"{prefix}.{key.value}" if prefix else str(key.value)
                self.lines[path] = key.start_mark.line + 1
                self._walk(value, path)
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                path = f"{prefix}[{i}]"
                self.lines[path] = item.start_mark.line + 1
                self._walk(item, path)

    def where(self, path: str) -> str:
        probe = path
        while probe:
            if probe in self.lines:
                return f"{self.name}:{self.lines[probe]}"
            probe = probe.rsplit(".", 1)[0] if "." in probe else ""
        return f"{self.name}"

    def error(self, path: str, message: str) -> ConfigError:
        return ConfigError(f"{self.where(path)}: {path}: {message}")


@dataclass
class ExperimentConfig:
    data: dict          # validated, defaults filled in
    source: str         # file name used in messages
    base_dir: Path

    def __getitem__(self, key):
        return self.data[key]

    def digest(self, sections=None) -> str:
        """Hash of the sections that influence results (all but ``output`` by default)."""
        if sections is None:
            sections = [k for k in SECTIONS if k not in ("output", "fast")]
        content = {k: self.data[k] for k in sections}
        text = json.dumps(content, sort_keys=True, separators=(",", ":"), default=_jsonable)
        return hashlib.sha256(text.encode()).hexdigest()

    def seeds(self) -> dict:
        return {"tightening": self.data["tightening"]["seed"],
                "validation": self.data["tightening"]["validation_seed"],
                "sweep": self.data["sweep"]["seed"]}

    def with_fast_profile(self) -> "ExperimentConfig":
        """Apply the ``fast`` block on top of the other sections (if present)."""
        data = copy.deepcopy(self.data)
        for section, values in (data.get("fast") or {}).items():
            data[section].update(values)
        return ExperimentConfig(data=data, source=self.source, base_dir=self.base_dir)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        data = copy.deepcopy(self.data)
        data["tightening"]["seed"] = int(seed)
        data["tightening"]["validation_seed"] = int(seed) + 1
        data["sweep"]["seed"] = int(seed) + 2
        return ExperimentConfig(data=data, source=self.source, base_dir=self.base_dir)


def _jsonable(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serialisable: {type(obj)}")


def bundled_config_path(name: str = "paper_example.cfg") -> Path:
    return Path(str(resources.files("smpcval") / "data" / name))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from exc
    return parse_config(text, name=str(path), base_dir=path.parent)


def parse_config(text: str, name: str = "<config>", base_dir=".") -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{name}{line}: not valid YAML: {getattr(exc, 'problem', exc)}") from exc
    lines = _Lines(text, name)
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: top level must be a mapping of sections")
    data = _validate(raw, lines)
    return ExperimentConfig(data=data, source=name, base_dir=Path(base_dir))


# --- field checks -----------------------------------------------------------

def _number(lines, path, value, lo=None, hi=None, open_lo=False, open_hi=False, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                raise lines.error(path, f"expected a number, got {value!r}") from None
        else:
            raise lines.error(path, f"expected a number, got {value!r}")
    if integer:
        if float(value) != int(value):
            raise lines.error(path, f"expected an integer, got {value!r}")
        value = int(value)
    else:
        value = float(value)
    if lo is not None and (value < lo or (open_lo and value == lo)):
        raise lines.error(path, _range_text(lo, hi, open_lo, open_hi, value))
    if hi is not None and (value > hi or (open_hi and value == hi)):
        raise lines.error(path, _range_text(lo, hi, open_lo, open_hi, value))
    return value


def _range_text(lo, hi, open_lo, open_hi, value):
    if hi is None:
        return f"must be {'>' if open_lo else '>='} {lo:g}, got {value:g}"
    left = "(" if open_lo else "["
    right = ")" if open_hi else "]"
    return f"must lie in {left}{lo:g}, {hi:g}{right}, got {value:g}"


def _matrix(lines, path, value, shape=None):
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise lines.error(path, "expected a numeric matrix (list of rows)") from None
    if arr.ndim == 1:
        arr = arr.reshape(1, -1) if shape is None or shape[0] == 1 else arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.size == 0:
        raise lines.error(path, f"expected a 2-d matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise lines.error(path, "entries must be finite")
    if shape is not None:
        want = tuple(s if s is not None else arr.shape[i] for i, s in enumerate(shape))
        if arr.shape != want:
            raise lines.error(path, f"expected shape {want}, got {arr.shape}")
    return arr.tolist()


def _vector(lines, path, value, length=None, positive=False):
    arr = np.atleast_1d(np.array(value, dtype=float)) if not isinstance(value, str) else None
    if arr is None or arr.ndim != 1:
        raise lines.error(path, "expected a list of numbers")
    if length is not None and arr.size != length:
        raise lines.error(path, f"expected {length} entries, got {arr.size}")
    if positive and np.any(arr <= 0):
        raise lines.error(path, "entries must be positive")
    return arr.tolist()


def _choice(lines, path, value, options):
    if value not in options:
        raise lines.error(path, f"must be one of {', '.join(options)}; got {value!r}")
    return value


def _validate(raw: dict, lines: _Lines) -> dict:
    for key in raw:
        if key not in SECTIONS:
            raise lines.error(str(key), f"unknown section; expected one of {', '.join(SECTIONS)}")
    data = {}
    for section in SECTIONS:
        block = raw.get(section, {}) or {}
        if not isinstance(block, dict):
            raise lines.error(section, "section must be a mapping")
        for key in REQUIRED.get(section, ()):
            if key not in block:
                raise lines.error(section, f"missing required field '{key}'")
        merged = copy.deepcopy(DEFAULTS[section])
        merged.update(block)
        data[section] = merged

    sy = data["system"]
    A = _matrix(lines, "system.A", sy["A"])
    n_x = len(A)
    if len(A[0]) != n_x:
        raise lines.error("system.A", f"must be square, got {n_x}x{len(A[0])}")
    sy["A"] = A
    sy["B"] = _matrix(lines, "system.B", sy["B"], (n_x, None))
    n_u = len(sy["B"][0])
    has_box = "state_box" in sy or "input_box" in sy
    has_rows = any(k in sy for k in ("C", "D", "h"))
    if has_box == has_rows:
        raise lines.error("system", "give either state_box/input_box or C, D, h")
    if has_box:
        sy["state_box"] = _vector(lines, "system.state_box", sy.get("state_box"), n_x, positive=True)
        sy["input_box"] = _vector(lines, "system.input_box", sy.get("input_box"), n_u, positive=True)
    else:
        for k in ("C", "D", "h"):
            if k not in sy:
                raise lines.error("system", f"missing required field '{k}'")
        sy["C"] = _matrix(lines, "system.C", sy["C"], (None, n_x))
        sy["D"] = _matrix(lines, "system.D", sy["D"], (len(sy["C"]), n_u))
        sy["h"] = _vector(lines, "system.h", sy["h"], len(sy["C"]), positive=True)
    if sy["dt"] is not None:
        sy["dt"] = _number(lines, "system.dt", sy["dt"], 0, open_lo=True)
    for key in sy:
        if key not in ("A", "B", "C", "D", "h", "state_box", "input_box", "dt"):
            raise lines.error(f"system.{key}", "unknown field")

    de = data["design"]
    de["Q"] = _matrix(lines, "design.Q", de["Q"], (n_x, n_x))
    de["R"] = _matrix(lines, "design.R", de["R"], (n_u, n_u))
    de["N"] = _number(lines, "design.N", de["N"], 1, integer=True)
    if de["K"] is not None:
        de["K"] = _matrix(lines, "design.K", de["K"], (n_u, n_x))
    for key in de:
        if key not in ("Q", "R", "N", "K"):
            raise lines.error(f"design.{key}", "unknown field")

    di = data["disturbance"]
    _choice(lines, "disturbance.kind", di["kind"], ("truncated-gaussian", "uniform-ball", "user-table"))
    if di["truncation_radius_sq"] is not None:
        di["truncation_radius_sq"] = _number(lines, "disturbance.truncation_radius_sq",
                                             di["truncation_radius_sq"], 0)
    if di["kind"] == "truncated-gaussian":
        if di["covariance"] is None:
            raise lines.error("disturbance", "truncated-gaussian needs 'covariance'")
        di["covariance"] = _matrix(lines, "disturbance.covariance", di["covariance"], (n_x, n_x))
        eig = np.linalg.eigvalsh(np.array(di["covariance"]))
        if eig.min() < -1e-12:
            raise lines.error("disturbance.covariance", "must be positive semidefinite")
    elif di["kind"] == "uniform-ball":
        if not np.isfinite(di["truncation_radius_sq"]):
            raise lines.error("disturbance", "uniform-ball needs a finite 'truncation_radius_sq'")
    else:
        if not isinstance(di["table"], str):
            raise lines.error("disturbance", "user-table needs 'table': path to a CSV file")
    for key in di:
        if key not in ("kind", "covariance", "truncation_radius_sq", "table"):
            raise lines.error(f"disturbance.{key}", "unknown field")

    for section in ("tightening", "sweep"):
        blk = data[section]
        blk["epsilon"] = _number(lines, f"{section}.epsilon", blk["epsilon"], 0, 1, True, True)
        blk["delta"] = _number(lines, f"{section}.delta", blk["delta"], 0, 1, True, True)
        blk["seed"] = _number(lines, f"{section}.seed", blk["seed"], 0, integer=True)
        if blk["r"] is not None:
            blk["r"] = _number(lines, f"{section}.r", blk["r"], 1, integer=True)

    ti = data["tightening"]
    if ti["r"] is None and ti["r_ratio"] is None:
        raise lines.error("tightening", "give 'r' or 'r_ratio'")
    if ti["r_ratio"] is not None:
        ti["r_ratio"] = _number(lines, "tightening.r_ratio", ti["r_ratio"], 0, 1, True, True)
    ti["validation_samples"] = _number(lines, "tightening.validation_samples",
                                       ti["validation_samples"], 0, integer=True)
    if ti["validation_seed"] is None:
        ti["validation_seed"] = ti["seed"] + 1
    ti["validation_seed"] = _number(lines, "tightening.validation_seed", ti["validation_seed"], 0,
                                    integer=True)
    if ti["validation_seed"] == ti["seed"]:
        raise lines.error("tightening.validation_seed", "must differ from tightening.seed")
    for key in ti:
        if key not in ("epsilon", "delta", "r", "r_ratio", "seed", "validation_samples",
                       "validation_seed"):
            raise lines.error(f"tightening.{key}", "unknown field")

    sw = data["sweep"]
    if sw["r"] is None:
        raise lines.error("sweep", "missing required field 'r'")
    sw["rho_min"] = _number(lines, "sweep.rho_min", sw["rho_min"], 0, open_lo=True)
    sw["rho_max"] = _number(lines, "sweep.rho_max", sw["rho_max"], 0, open_lo=True)
    if sw["rho_max"] <= sw["rho_min"]:
        raise lines.error("sweep.rho_max", f"must exceed rho_min={sw['rho_min']:g}")
    sw["n_C"] = _number(lines, "sweep.n_C", sw["n_C"], 2, integer=True)
    sw["M"] = _number(lines, "sweep.M", sw["M"], 1, integer=True)
    sw["min_samples"] = _number(lines, "sweep.min_samples", sw["min_samples"], 0, integer=True)
    sw["chunk"] = _number(lines, "sweep.chunk", sw["chunk"], 1, integer=True)
    sw["trace_count"] = _number(lines, "sweep.trace_count", sw["trace_count"], 0, integer=True)
    _choice(lines, "sweep.slack_mode", sw["slack_mode"], ("shared", "per_step"))
    _choice(lines, "sweep.g_sum", sw["g_sum"], ("through-M", "before-M"))
    sw["trace_rhos"] = _vector(lines, "sweep.trace_rhos", sw["trace_rhos"] or [], positive=True) \
        if sw["trace_rhos"] else []
    for key in sw:
        if key not in ("epsilon", "delta", "r", "seed", "rho_min", "rho_max", "n_C", "M",
                       "min_samples", "slack_mode", "g_sum", "trace_rhos", "trace_count", "chunk"):
            raise lines.error(f"sweep.{key}", "unknown field")

    se = data["selection"]
    _choice(lines, "selection.policy", se["policy"], ("min-gamma", "threshold"))
    if se["policy"] == "threshold":
        if se["threshold"] is None:
            raise lines.error("selection", "threshold policy needs 'threshold'")
    if se["threshold"] is not None:
        se["threshold"] = _number(lines, "selection.threshold", se["threshold"], 0)

    ou = data["output"]
    if not isinstance(ou["directory"], str):
        raise lines.error("output.directory", "expected a path string")
    fmts = ou["formats"]
    if not isinstance(fmts, list) or not all(f in ("json", "csv", "svg") for f in fmts):
        raise lines.error("output.formats", "expected a list drawn from json, csv, svg")

    fast = data["fast"]
    for section, values in fast.items():
        if section not in ("tightening", "sweep", "selection"):
            raise lines.error(f"fast.{section}", "only tightening, sweep and selection can be overridden")
        if not isinstance(values, dict):
            raise lines.error(f"fast.{section}", "expected a mapping")
    if fast:
        # validate the overridden sections the same way
        probe = copy.deepcopy(raw)
        for section, values in fast.items():
            probe.setdefault(section, {}).update(values)
        probe.pop("fast")
        _validate(probe, lines)
    return data
