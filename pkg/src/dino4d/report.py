"""Figures and tab-delimited tables for evaluation reports and training logs."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

ROW_COARSE = "dino4d (w/o diffusion)"
ROW_FULL = "dino4d (full)"

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 110,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "xtick.direction": "out",
    "ytick.direction": "out",
    "legend.frameon": False,
    "lines.linewidth": 1.3,
}

COLORS = {"coarse": "#4c72b0", "refined": "#dd8452", "total": "#222222",
          "reproj": "#55a868", "geo": "#4c72b0", "sem": "#c44e52", "diff": "#8172b3"}


def load_schema() -> dict:
    return json.loads(resources.files("dino4d").joinpath("report_schema.json").read_text())


def validate_report(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, load_schema())


def _fmt(v, digits: int = 2) -> str:
    return "-" if v is None else f"{v:.{digits}f}"


def apd_header(thresholds) -> list[str]:
    return [f"APD@{t:g}m" for t in thresholds]


def format_row(name: str, apd_values, cd_cm=None) -> str:
    """One tab-delimited table line: APD with one decimal, CD with two."""
    cells = [name] + [_fmt(v, 1) for v in apd_values]
    if cd_cm is not None:
        cells.append(_fmt(cd_cm))
    return "\t".join(cells)


def table_rows(report: dict) -> tuple[list[str], list[list[str]]]:
    """Header and rows in the ablation-table layout (one row per variant)."""
    thresholds = report["thresholds_m"]
    agg = report["aggregate"]
    header = ["method"] + apd_header(thresholds) + ["CD (cm)"]
    apd_vals = [agg["apd"][f"{t:g}"] for t in thresholds]
    rows = [format_row(ROW_COARSE, apd_vals, agg["cd_coarse_cm"])]
    if agg.get("cd_refined_cm") is not None:
        # refinement only touches the reconstruction branch, so tracking APD is shared
        rows.append(format_row(ROW_FULL, apd_vals, agg["cd_refined_cm"]))
    return header, rows


def write_table(report: dict, path: str | Path) -> Path:
    header, rows = table_rows(report)
    lines = ["\t".join(header)] + rows
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def write_scene_table(report: dict, path: str | Path) -> Path:
    thresholds = report["thresholds_m"]
    header = ["scene_id"] + apd_header(thresholds) + ["cd_coarse_cm", "cd_refined_cm", "pairs", "wall_s"]
    lines = ["\t".join(header)]
    for s in report["scenes"]:
        vals = [_fmt(s["apd"][f"{t:g}"], 1) for t in thresholds]
        lines.append("\t".join([s["scene_id"], *vals, _fmt(s["cd_coarse_cm"]), _fmt(s["cd_refined_cm"]),
                                str(s["pairs_executed"]), f"{s['wall_time_s']:.3f}"]))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def plot_apd(report: dict, path: str | Path) -> Path:
    thresholds = report["thresholds_m"]
    scenes = report["scenes"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        width = 0.8 / max(len(scenes), 1)
        x = np.arange(len(thresholds))
        for k, s in enumerate(scenes):
            ax.bar(x + k * width, [s["apd"][f"{t:g}"] for t in thresholds], width, label=s["scene_id"])
        ax.set_xticks(x + width * (len(scenes) - 1) / 2)
        ax.set_xticklabels([f"{t:g} m" for t in thresholds])
        ax.set_ylabel("APD (%)")
        ax.set_ylim(0, 100)
        if len(scenes) <= 8:
            ax.legend(fontsize=7)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_chamfer(report: dict, path: str | Path) -> Path:
    scenes = report["scenes"]
    ids = [s["scene_id"] for s in scenes]
    x = np.arange(len(ids))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(x - 0.2, [s["cd_coarse_cm"] for s in scenes], 0.4, color=COLORS["coarse"], label="coarse")
        if all(s["cd_refined_cm"] is not None for s in scenes):
            ax.bar(x + 0.2, [s["cd_refined_cm"] for s in scenes], 0.4, color=COLORS["refined"], label="refined")
        ax.set_xticks(x)
        ax.set_xticklabels(ids, rotation=30, ha="right", fontsize=7)
        ax.set_ylabel("chamfer distance (cm)")
        ax.legend()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def read_log(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def plot_losses(records: Sequence[dict], path: str | Path) -> Path:
    steps = [r["step"] for r in records]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name in ("reproj", "geo", "sem", "diff"):
            vals = [r.get(f"L_{name}") for r in records]
            if all(v is not None for v in vals):
                ax.plot(steps, vals, color=COLORS[name], label=f"L_{name}", alpha=0.8)
        ax.plot(steps, [r["L_total"] for r in records], color=COLORS["total"], label="L_total")
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(ncol=2, fontsize=7)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def render_report(report: dict, out_dir: str | Path, log_records: Sequence[dict] | None = None) -> list[Path]:
    """Write the summary table, per-scene table and figures; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [write_table(report, out / "table.tsv"), write_scene_table(report, out / "scenes.tsv"),
             plot_apd(report, out / "apd.png"), plot_chamfer(report, out / "chamfer.png")]
    if log_records:
        paths.append(plot_losses(log_records, out / "losses.png"))
    return paths
