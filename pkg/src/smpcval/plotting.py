"""SVG figures rendered from the stored CSV artifacts (no recomputation).

fig1: gamma, g_avg and g_max against rho (log x axis).
fig2: closed-loop state trajectories at the traced rho values.
fig3: per-scenario violation index at the traced rho values.
fig4: convex hulls of the terminal states.
"""
from __future__ import annotations

import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .config import ExperimentConfig  # noqa: E402
from .pipeline import (SUMMARY_CSV, TRACE_G_CSV, hull_name, read_csv, terminal_name,  # noqa: E402
                       traces_name)

STYLE = {
    "svg.hashsalt": "smpcval",
    "svg.fonttype": "path",
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.2,
}
COLORS = ["tab:blue", "tab:orange", "tab:green", "tab:red", "tab:purple", "tab:brown"]


def _save(fig, path: Path, header: str):
    meta = {"Date": None, "Creator": "smpcval", "Description": header.lstrip("# ")}
    fig.savefig(path, format="svg", metadata=meta)
    plt.close(fig)


def _traced_rhos(cfg: ExperimentConfig):
    return [float(r) for r in cfg["sweep"]["trace_rhos"]]


def plot_sweep(out: Path) -> Path:
    cols, data, header = read_csv(out / SUMMARY_CSV)
    c = {name: data[:, i] for i, name in enumerate(cols)}
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.semilogx(c["rho"], c["g_avg"], "-o", ms=2.5, label=r"$g_{avg}(\rho)$")
    ax.semilogx(c["rho"], c["g_max"], "-s", ms=2.5, label=r"$g_{max}(\rho)$")
    ax.semilogx(c["rho"], c["gamma"], "-^", ms=2.5, label=r"$\gamma(\rho)$")
    ax.set_xlabel(r"penalty factor $\rho$")
    ax.set_ylabel("violation index")
    ax.legend(loc="upper right")
    fig.tight_layout()
    path = out / "fig1_sweep.svg"
    _save(fig, path, header)
    return path


def _box(ax, cfg):
    box = cfg["system"].get("state_box")
    if box is not None and len(box) == 2:
        bx, by = box
        ax.plot([-bx, bx, bx, -bx, -bx], [-by, -by, by, by, -by], ":", color="tab:green", lw=1.0)


def plot_trajectories(cfg: ExperimentConfig, out: Path) -> Path:
    rhos = _traced_rhos(cfg)
    fig, axes = plt.subplots(1, len(rhos), figsize=(3.2 * len(rhos), 3.2), squeeze=False,
                             sharex=True, sharey=True)
    header = ""
    for ax, rho in zip(axes[0], rhos):
        cols, data, header = read_csv(out / traces_name(rho))
        ix, iy = cols.index("x1"), cols.index("x2")
        scen = data[:, cols.index("scenario")]
        for s in np.unique(scen):
            tr = data[scen == s]
            ax.plot(tr[:, ix], tr[:, iy], "-", color="tab:blue", lw=0.5, alpha=0.5)
            ax.plot(tr[0, ix], tr[0, iy], "o", mfc="none", color="tab:red", ms=3)
            ax.plot(tr[-1, ix], tr[-1, iy], "o", mfc="none", color="tab:green", ms=3)
        _box(ax, cfg)
        ax.set_title(rf"$\rho = {rho:g}$")
        ax.set_xlabel(r"$x_1$")
    axes[0][0].set_ylabel(r"$x_2$")
    fig.tight_layout()
    path = out / "fig2_trajectories.svg"
    _save(fig, path, header)
    return path


def plot_violations(cfg: ExperimentConfig, out: Path) -> Path:
    cols, data, header = read_csv(out / TRACE_G_CSV)
    fig, ax = plt.subplots(figsize=(6.0, 3.4))
    for i, rho in enumerate(_traced_rhos(cfg)):
        sel = np.isclose(data[:, cols.index("rho")], rho, rtol=1e-12, atol=0.0)
        g = data[sel, cols.index("g")]
        xi = float(np.mean(g > 1e-9)) if g.size else 0.0
        ax.plot(data[sel, cols.index("scenario")], g, ".", ms=2, color=COLORS[i % len(COLORS)],
                label=rf"$\rho = {rho:g}$ ($\xi$ = {100 * xi:.1f}%)")
    ax.set_xlabel(r"scenario $i$")
    ax.set_ylabel(r"$g(w^{(i)}, \rho)$")
    ax.legend(loc="upper right", markerscale=4)
    fig.tight_layout()
    path = out / "fig3_violations.svg"
    _save(fig, path, header)
    return path


def plot_hulls(cfg: ExperimentConfig, out: Path) -> Path | None:
    rhos = _traced_rhos(cfg)
    if not rhos or not (out / hull_name(rhos[0])).exists():
        return None
    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    header = ""
    for i, rho in enumerate(rhos):
        color = COLORS[i % len(COLORS)]
        cols, term, header = read_csv(out / terminal_name(rho))
        ax.plot(term[:, cols.index("x1")], term[:, cols.index("x2")], ".", ms=1, color=color,
                alpha=0.3)
        cols, hull, _ = read_csv(out / hull_name(rho))
        v = hull[:, [cols.index("x1"), cols.index("x2")]]
        v = np.vstack([v, v[:1]])
        ax.plot(v[:, 0], v[:, 1], "-", color=color, label=rf"$\rho = {rho:g}$")
    ax.set_xlabel(r"$x_{M,1}$")
    ax.set_ylabel(r"$x_{M,2}$")
    ax.legend(loc="best")
    fig.tight_layout()
    path = out / "fig4_terminal_hulls.svg"
    _save(fig, path, header)
    return path


def render_all(cfg: ExperimentConfig, out) -> list[Path]:
    out = Path(out)
    with plt.rc_context(STYLE):
        paths = [plot_sweep(out)]
        if _traced_rhos(cfg):
            paths += [plot_violations(cfg, out)]
            if cfg["system"].get("state_box") is not None and len(cfg["system"]["state_box"]) == 2:
                paths.append(plot_trajectories(cfg, out))
            hull = plot_hulls(cfg, out)
            if hull is not None:
                paths.append(hull)
    return paths


def svg_description(path) -> str | None:
    """The ``dc:description`` metadata of an SVG written by this module."""
    m = re.search(r"<dc:description>(.*?)</dc:description>", Path(path).read_text(), re.S)
    return m.group(1) if m else None
