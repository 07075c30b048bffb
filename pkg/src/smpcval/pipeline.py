"""Experiment orchestration: tighten, sweep, select and report.

Each stage reads the serialized output of the previous one from the output
directory, so stages can be run one at a time. Every artifact carries the
config hash; wall-clock timestamps live only in ``MANIFEST.json``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .closedloop import (SweepResult, hull_area, rho_grid, select_rho, statistics, sweep,
                         terminal_hull)
from .config import ExperimentConfig
from .probval import ProbabilisticLevels, discarding_from_ratio, sample_complexity
from .qpcore import BatchSolver, FEASIBILITY_SETTINGS
from .smpc import tightened_template
from .sysmodel import ControllerDesign, LtiSystem, riccati_residual, closed_loop_matrix
from .tightening import TighteningProfile, compute_tightening, validate_tightening
from .uncertainty import DisturbanceModel, ScenarioBatch, draw_disturbance_batch, \
    sample_feasible_initial_states

log = logging.getLogger(__name__)

STAGES = ("tighten", "sweep", "select", "report")
TIGHTEN_SECTIONS = ("system", "design", "disturbance", "tightening")
SWEEP_SECTIONS = TIGHTEN_SECTIONS + ("sweep",)

TIGHTENING_JSON = "tightening.json"
TIGHTENING_CSV = "tightening_q.csv"
SWEEP_JSON = "sweep.json"
SUMMARY_CSV = "summary.csv"
G_VALUES_CSV = "g_values.csv"
TRACE_G_CSV = "trace_g.csv"
SELECTION_JSON = "selection.json"
MANIFEST = "MANIFEST.json"


class MissingArtifact(FileNotFoundError):
    """An upstream artifact is absent or was produced by a different config."""


def rho_tag(rho: float) -> str:
    return f"{rho:g}".replace("+", "")


def traces_name(rho):
    return f"traces_rho_{rho_tag(rho)}.csv"


def terminal_name(rho):
    return f"terminal_rho_{rho_tag(rho)}.csv"


def hull_name(rho):
    return f"hull_rho_{rho_tag(rho)}.csv"


# --- models -----------------------------------------------------------------

def build_system(cfg: ExperimentConfig) -> LtiSystem:
    sy = cfg["system"]
    if "state_box" in sy:
        return LtiSystem.from_boxes(sy["A"], sy["B"], sy["state_box"], sy["input_box"])
    return LtiSystem(A=sy["A"], B=sy["B"], C=sy["C"], D=sy["D"], h=sy["h"])


def build_design(cfg: ExperimentConfig, sys: LtiSystem) -> ControllerDesign:
    de = cfg["design"]
    return ControllerDesign.from_system(sys, de["Q"], de["R"], de["N"], de["K"])


def build_disturbance(cfg: ExperimentConfig, n_x: int) -> DisturbanceModel:
    di = cfg["disturbance"]
    seed = cfg["tightening"]["seed"]
    if di["kind"] == "user-table":
        return DisturbanceModel.from_csv(cfg.base_dir / di["table"], n_x, seed=seed)
    return DisturbanceModel(kind=di["kind"], n_x=n_x, covariance=di["covariance"],
                            truncation_radius_sq=di["truncation_radius_sq"], seed=seed)


def tightening_levels(cfg: ExperimentConfig, sys: LtiSystem) -> ProbabilisticLevels:
    ti = cfg["tightening"]
    mult = sys.n_h * cfg["design"]["N"]
    r = ti["r"]
    if r is None:
        r = discarding_from_ratio(ti["epsilon"], ti["delta"], mult, ti["r_ratio"])
    return ProbabilisticLevels(ti["epsilon"], ti["delta"], r, mult)


def sweep_levels(cfg: ExperimentConfig) -> ProbabilisticLevels:
    sw = cfg["sweep"]
    return ProbabilisticLevels(sw["epsilon"], sw["delta"], sw["r"], sw["n_C"])


def sweep_sample_size(cfg: ExperimentConfig) -> int:
    return max(sample_complexity(sweep_levels(cfg)), cfg["sweep"]["min_samples"])


def state_sampling_box(sys: LtiSystem) -> np.ndarray:
    """Half-widths of a symmetric box containing every admissible state."""
    from scipy.optimize import linprog
    n = sys.n_x + sys.n_u
    G = np.hstack([sys.C, sys.D])
    half = np.zeros(sys.n_x)
    for i in range(sys.n_x):
        ext = 0.0
        for sign in (1.0, -1.0):
            c = np.zeros(n)
            c[i] = -sign
            res = linprog(c, A_ub=G, b_ub=sys.h, bounds=[(None, None)] * n, method="highs")
            if res.status != 0:
                raise ValueError(f"state coordinate {i + 1} is unbounded by the constraints; "
                                 "initial states cannot be sampled")
            ext = max(ext, abs(res.fun))
        half[i] = ext
    return half


def feasibility_oracle(sys, design, profile):
    """Mask of states for which the tightened problem is feasible."""
    tmpl = tightened_template(sys, design, profile)
    solver = BatchSolver(np.zeros_like(tmpl.H), tmpl.G_eq, tmpl.G_in, FEASIBILITY_SETTINGS)

    def is_feasible(X):
        _, b_eq, b_in = tmpl.vectors(np.atleast_2d(X))
        ok, _ = solver.feasible(b_eq, b_in)
        return ok
    return is_feasible


def scenario_batch(cfg: ExperimentConfig, sys, design, profile, model) -> ScenarioBatch:
    """Shared sweep batch: uniform feasible ``x0`` and i.i.d. disturbance sequences."""
    seed = cfg["sweep"]["seed"]
    S = sweep_sample_size(cfg)
    box = state_sampling_box(sys)
    x0, drawn = sample_feasible_initial_states(S, feasibility_oracle(sys, design, profile),
                                               box, seed)
    d = draw_disturbance_batch(model, cfg["sweep"]["M"], S, seed=seed)
    return ScenarioBatch(x0=x0, disturbances=d, batch_seed=seed, candidates_drawn=drawn)


# --- file helpers -----------------------------------------------------------

def _num(x) -> str:
    return format(float(x), ".17g")


def _header(cfg: ExperimentConfig) -> str:
    seeds = ";".join(f"{k}:{v}" for k, v in cfg.seeds().items())
    return f"# config_sha256={cfg.digest()} seeds={seeds}"


def write_csv(path: Path, cfg: ExperimentConfig, columns, rows):
    with open(path, "w", newline="") as fh:
        fh.write(_header(cfg) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([v if isinstance(v, (int, np.integer, str)) else _num(v) for v in row])


def read_csv(path: Path) -> tuple[list[str], np.ndarray, str]:
    """Columns, numeric data and the ``#`` header line of an artifact CSV."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"missing artifact {path}")
    with open(path, newline="") as fh:
        header = fh.readline().rstrip("\n")
        reader = csv.reader(fh)
        columns = next(reader)
        data = np.array([[float(v) for v in row] for row in reader], dtype=float)
    return columns, data.reshape(-1, len(columns)), header


def write_json(path: Path, doc: dict):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")


def read_json(path: Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"missing artifact {path}")
    return json.loads(path.read_text())


def _stamp(cfg: ExperimentConfig) -> dict:
    return {"config_sha256": cfg.digest(), "seeds": cfg.seeds()}


def _require_inputs(doc: dict, expected: str, path: Path):
    if doc.get("inputs_sha256") != expected:
        raise MissingArtifact(f"{path} was produced by a different configuration; "
                              f"rerun the stage that writes it")


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Manifest:
    """Stage status, timestamps and file hashes of one output directory."""

    def __init__(self, out: Path, cfg: ExperimentConfig):
        self.path = out / MANIFEST
        self.doc = json.loads(self.path.read_text()) if self.path.exists() else {}
        self.doc["config_sha256"] = cfg.digest()
        self.doc.setdefault("stages", {})
        self.doc.pop("failed_stage", None)

    def start(self, stage):
        self.doc["stages"][stage] = {"status": "running", "started": _now()}
        self.save()

    def finish(self, stage, files, elapsed):
        entry = self.doc["stages"][stage]
        entry.update(status="ok", finished=_now(), seconds=round(elapsed, 3),
                     files={f.name: file_digest(f) for f in files})
        self.save()

    def fail(self, stage, exc):
        entry = self.doc["stages"].setdefault(stage, {})
        entry.update(status="failed", finished=_now(), error=f"{type(exc).__name__}: {exc}")
        self.doc["failed_stage"] = stage
        self.save()

    def save(self):
        write_json(self.path, self.doc)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# --- stages -----------------------------------------------------------------

def stage_tighten(cfg: ExperimentConfig, out: Path, **_) -> list[Path]:
    sys = build_system(cfg)
    design = build_design(cfg, sys)
    model = build_disturbance(cfg, sys.n_x)
    levels = tightening_levels(cfg, sys)
    profile = compute_tightening(sys, design, model, levels, seed=cfg["tightening"]["seed"])
    files = []
    validation = None
    S_val = cfg["tightening"]["validation_samples"]
    if S_val:
        rep = validate_tightening(profile, sys, design, model, S_val,
                                  cfg["tightening"]["validation_seed"])
        validation = {"S_val": rep.S_val, "seed": rep.seed, "threshold": rep.threshold,
                      "max_frequency": float(rep.frequency.max()),
                      "frequency": rep.frequency.tolist(),
                      "flagged": [list(c) for c in rep.flagged]}
        if rep.flagged:
            log.warning("tightening validation flagged cells %s", rep.flagged)
    A_K = closed_loop_matrix(sys, design.K)
    extra = dict(_stamp(cfg), inputs_sha256=cfg.digest(TIGHTEN_SECTIONS),
                 K=design.K.tolist(), P=design.P.tolist(),
                 riccati_residual=riccati_residual(A_K, design.Q, design.R, design.K, design.P),
                 disturbance=model.to_dict(), validation=validation)
    path = out / TIGHTENING_JSON
    path.write_text(profile.to_json(extra))
    files.append(path)
    rows = [[l] + list(profile.q[l]) for l in range(profile.N)]
    write_csv(out / TIGHTENING_CSV, cfg, ["step"] + [f"q{j + 1}" for j in range(sys.n_h)], rows)
    files.append(out / TIGHTENING_CSV)
    return files


def load_tightening(cfg: ExperimentConfig, out: Path) -> TighteningProfile:
    path = out / TIGHTENING_JSON
    doc = read_json(path)
    _require_inputs(doc, cfg.digest(TIGHTEN_SECTIONS), path)
    return TighteningProfile.from_json(path.read_text())


def _find(grid, rho):
    hit = np.flatnonzero(np.isclose(grid, rho, rtol=1e-9, atol=0.0))
    return int(hit[0]) if hit.size else None


def stage_sweep(cfg: ExperimentConfig, out: Path, threads: int = 1, **_) -> list[Path]:
    sys = build_system(cfg)
    design = build_design(cfg, sys)
    profile = load_tightening(cfg, out)
    model = build_disturbance(cfg, sys.n_x)
    sw = cfg["sweep"]
    batch = scenario_batch(cfg, sys, design, profile, model)
    grid = rho_grid(sw["rho_min"], sw["rho_max"], sw["n_C"])
    trace_rhos = [float(r) for r in sw["trace_rhos"]]
    extra_rhos = [r for r in trace_rhos if _find(grid, r) is None]
    res = sweep(sys, design, profile, batch, grid, sweep_levels(cfg), slack_mode=sw["slack_mode"],
                variant=sw["g_sum"], trace_rhos=extra_rhos, threads=threads, chunk=sw["chunk"])

    def run_for(rho):
        i = _find(grid, rho)
        return res.extra[float(grid[i])] if i is not None else res.extra[rho]

    files = []
    trace_stats = {}
    trace_g_rows = []
    dt = cfg["system"]["dt"]
    for rho in trace_rhos:
        run = run_for(rho)
        g = run.g(sw["g_sum"])
        gamma, g_avg, g_max, xi = statistics(g[:, None], res.levels.r)
        trace_stats[rho_tag(rho)] = {"rho": rho, "gamma": float(gamma[0]), "g_avg": float(g_avg[0]),
                                     "g_max": float(g_max[0]), "xi": float(xi[0])}
        if sys.n_x == 2:
            trace_stats[rho_tag(rho)]["hull_area"] = hull_area(terminal_hull(run.states[:, -1]))
        trace_g_rows += [[i, rho, g[i]] for i in range(len(g))]
        files += _write_traces(cfg, out, run, rho, sw["trace_count"], dt)

    doc = res.to_dict()
    doc.update(_stamp(cfg), inputs_sha256=cfg.digest(SWEEP_SECTIONS),
               tightening_hash=profile.digest(), K=design.K.tolist(), P=design.P.tolist(),
               slack_mode=sw["slack_mode"], M=sw["M"],
               dt=dt, sample_complexity=sample_complexity(res.levels),
               min_samples=sw["min_samples"], candidates_drawn=batch.candidates_drawn,
               trace_stats=trace_stats)
    write_json(out / SWEEP_JSON, doc)
    files.append(out / SWEEP_JSON)
    write_csv(out / SUMMARY_CSV, cfg, ["rho", "gamma", "g_avg", "g_max", "xi"],
              zip(res.rho_grid, res.gamma, res.g_avg, res.g_max, res.xi))
    files.append(out / SUMMARY_CSV)
    S, n_C = res.g.shape
    write_csv(out / G_VALUES_CSV, cfg, ["scenario", "rho_index", "rho", "g"],
              ([i, l, res.rho_grid[l], res.g[i, l]] for i in range(S) for l in range(n_C)))
    files.append(out / G_VALUES_CSV)
    write_csv(out / TRACE_G_CSV, cfg, ["scenario", "rho", "g"], trace_g_rows)
    files.append(out / TRACE_G_CSV)
    return files


def _write_traces(cfg, out, run, rho, count, dt) -> list[Path]:
    S, K1, n_x = run.states.shape
    n_u = run.inputs.shape[2]
    count = min(count, S)
    cols = ["scenario", "k", "t"] + [f"x{i + 1}" for i in range(n_x)] + \
        [f"u{i + 1}" for i in range(n_u)] + ["violation", "stage_cost", "applied"]
    rows = []
    for s in range(count):
        for k in range(K1):
            cost = run.stage_costs[s, k] if k < K1 - 1 else 0.0
            rows.append([s, k, k * (dt or 1.0)] + list(run.states[s, k]) + list(run.inputs[s, k])
                        + [run.violations[s, k], cost, int(k < K1 - 1)])
    write_csv(out / traces_name(rho), cfg, cols, rows)
    terminal = run.states[:, -1]
    write_csv(out / terminal_name(rho), cfg, ["scenario"] + [f"x{i + 1}" for i in range(n_x)],
              ([s] + list(terminal[s]) for s in range(S)))
    files = [out / traces_name(rho), out / terminal_name(rho)]
    if n_x == 2:
        hull = terminal_hull(terminal)
        write_csv(out / hull_name(rho), cfg, ["vertex", "x1", "x2"],
                  ([i] + list(v) for i, v in enumerate(hull)))
        files.append(out / hull_name(rho))
    return files


def load_sweep(cfg: ExperimentConfig, out: Path) -> SweepResult:
    path = out / SWEEP_JSON
    doc = read_json(path)
    _require_inputs(doc, cfg.digest(SWEEP_SECTIONS), path)
    levels = ProbabilisticLevels(**doc["levels"])
    arr = {k: np.array(doc[k], dtype=float) for k in ("rho_grid", "gamma", "g_avg", "g_max", "xi")}
    return SweepResult(g=np.empty((0, len(arr["rho_grid"]))), S_rho=doc["S_rho"], levels=levels,
                       batch_seed=doc["batch_seed"], batch_digest=doc["batch_digest"],
                       variant=doc["g_variant"], **arr)


def stage_select(cfg: ExperimentConfig, out: Path, **_) -> list[Path]:
    res = load_sweep(cfg, out)
    se = cfg["selection"]
    rho = select_rho(res, se["policy"], se["threshold"])
    i = int(np.flatnonzero(res.rho_grid == rho)[0])
    doc = dict(_stamp(cfg), policy=se["policy"], threshold=se["threshold"], selected_rho=rho,
               gamma=float(res.gamma[i]), g_avg=float(res.g_avg[i]), xi=float(res.xi[i]),
               min_gamma_rho=select_rho(res, "min-gamma"), min_gamma=float(res.gamma.min()))
    write_json(out / SELECTION_JSON, doc)
    return [out / SELECTION_JSON]


def stage_report(cfg: ExperimentConfig, out: Path, **_) -> list[Path]:
    # JSON and CSV are always written since later stages read them back;
    # ``formats`` only decides whether figures are drawn
    if "svg" not in cfg["output"]["formats"]:
        return []
    from . import plotting
    return plotting.render_all(cfg, out)


STAGE_FUNCS = {"tighten": stage_tighten, "sweep": stage_sweep, "select": stage_select,
               "report": stage_report}


def run_stages(cfg: ExperimentConfig, out, stages=STAGES, threads: int = 1) -> dict:
    """Run ``stages`` in order; a failing stage is recorded in the manifest and re-raised."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out, cfg)
    for stage in stages:
        manifest.start(stage)
        t0 = time.perf_counter()
        try:
            files = STAGE_FUNCS[stage](cfg, out, threads=threads)
        except Exception as exc:
            manifest.fail(stage, exc)
            raise
        manifest.finish(stage, files, time.perf_counter() - t0)
        log.info("stage %s done in %.1f s", stage, time.perf_counter() - t0)
    return manifest.doc


def run_pipeline(cfg: ExperimentConfig, out, threads: int = 1) -> dict:
    return run_stages(cfg, out, STAGES, threads)
