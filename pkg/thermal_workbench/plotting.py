"""SVG figures from saved reports; every figure's plotted series is written next to it as CSV."""

import json
import logging
from pathlib import Path
from typing import Callable, Dict, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from .errors import InputError  # noqa: E402

logger = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "thermal-workbench"


def _load_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise InputError(f"{path} is not a JSON report: {e}") from None


def _ablation_series(path: Path, metric: str) -> pd.DataFrame:
    doc = _load_json(path)
    if "cells" not in doc:
        raise InputError(f"{path} is not an ablation report")
    rows = []
    for cell in doc["cells"]:
        if cell.get("error"):
            continue
        value = cell["mae_c"] if metric == "mae" else cell["trv_plus"] + cell["trv_minus"]
        rows.append({"variant": cell["variant"], "days": cell["days"], "seed": cell["seed"], "value": value})
    if not rows:
        raise InputError(f"{path} holds no successful cells")
    return pd.DataFrame(rows, columns=["variant", "days", "seed", "value"])


def _grouped_boxplot(series: pd.DataFrame, ylabel: str, title: str):
    fig, ax = plt.subplots(figsize=(8, 4.5))
    variants = list(dict.fromkeys(series["variant"]))
    days = sorted(series["days"].unique())
    width = 0.8 / max(len(variants), 1)
    for i, variant in enumerate(variants):
        data = [series[(series["variant"] == variant) & (series["days"] == d)]["value"].to_numpy() for d in days]
        positions = [j + (i - (len(variants) - 1) / 2) * width for j in range(len(days))]
        box = ax.boxplot(data, positions=positions, widths=width * 0.9, patch_artist=True)
        for patch in box["boxes"]:
            patch.set_facecolor(f"C{i}")
        ax.plot([], [], color=f"C{i}", linewidth=6, label=variant)
    ax.set_xticks(range(len(days)))
    ax.set_xticklabels([f"{d} d" for d in days])
    ax.set_xlabel("training data")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize="small")
    return fig, series


def plot_mae_vs_days(path: Path):
    return _grouped_boxplot(_ablation_series(path, "mae"), "rolling MAE [C]", "Accuracy vs training size")


def plot_trv_vs_days(path: Path):
    return _grouped_boxplot(_ablation_series(path, "trv"), "TRV [C step]", "Response violation vs training size")


def plot_ri(path: Path):
    doc = _load_json(path)
    rows = [{"prior": r["prior"], "metric": r["metric"], "days": s["days"], "seed": s["seed"], "ri": s["ri"]}
            for r in doc.get("rule_importance", []) for s in r["samples"]]
    if not rows:
        raise InputError(f"{path} holds no rule-importance samples")
    series = pd.DataFrame(rows, columns=["prior", "metric", "days", "seed", "ri"])
    fig, axes = plt.subplots(1, 2, figsize=(9, 4), sharey=False)
    for ax, metric in zip(axes, ("mae", "trv")):
        part = series[series["metric"] == metric]
        priors = list(dict.fromkeys(part["prior"]))
        if priors:
            ax.boxplot([part[part["prior"] == p]["ri"].to_numpy() for p in priors])
            ax.set_xticks(range(1, len(priors) + 1))
            ax.set_xticklabels(priors)
        ax.axhline(0.0, color="grey", linewidth=0.8)
        ax.set_title(f"rule importance on {metric.upper()}")
    axes[0].set_ylabel("RI")
    return fig, series


def plot_loss_decay(path: Path):
    doc = _load_json(path)
    if "epochs" not in doc:
        raise InputError(f"{path} is not a training report")
    series = pd.DataFrame([{"epoch": e["epoch"], "train_total": e["train_total"], "val_total": e["val_total"]}
                           for e in doc["epochs"]], columns=["epoch", "train_total", "val_total"])
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(series["epoch"], series["train_total"], label="training")
    ax.plot(series["epoch"], series["val_total"], label="validation")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    return fig, series


def plot_day_trace(path: Path):
    try:
        series = pd.read_csv(path)
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise InputError(f"{path} is not a trace CSV: {e}") from None
    missing = {"timestamp", "t_zone_c", "lower_c", "upper_c", "q_sup_m3s", "t_sup_c"} - set(series.columns)
    if missing:
        raise InputError(f"trace {path} lacks columns {sorted(missing)}")
    time = pd.to_datetime(series["timestamp"])
    fig, (ax_t, ax_q) = plt.subplots(2, 1, figsize=(9, 6), sharex=True)
    ax_t.plot(time, series["t_zone_c"], label="zone")
    ax_t.step(time, series["lower_c"], where="post", color="grey", linestyle="--", label="comfort band")
    ax_t.step(time, series["upper_c"], where="post", color="grey", linestyle="--")
    ax_t.plot(time, series["t_sup_c"], color="C3", alpha=0.6, label="supply")
    ax_t.set_ylabel("temperature [C]")
    ax_t.legend(fontsize="small")
    ax_q.step(time, series["q_sup_m3s"], where="post", label="supply air")
    if "q_out_m3s" in series:
        ax_q.step(time, series["q_out_m3s"], where="post", label="outdoor air")
    ax_q.set_ylabel("airflow [m3/s]")
    ax_q.legend(fontsize="small")
    fig.autofmt_xdate()
    return fig, series


PLOT_KINDS: Dict[str, Callable[[Path], Tuple[object, pd.DataFrame]]] = {
    "mae-vs-days": plot_mae_vs_days,
    "trv-vs-days": plot_trv_vs_days,
    "ri": plot_ri,
    "loss-decay": plot_loss_decay,
    "day-trace": plot_day_trace,
}


def render(report_path, kind: str, out_dir) -> Tuple[Path, Path]:
    if kind not in PLOT_KINDS:
        raise InputError(f"unknown plot kind {kind!r}; valid kinds: {list(PLOT_KINDS)}")
    report_path = Path(report_path)
    if not report_path.exists():
        raise InputError(f"report not found: {report_path}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    fig, series = PLOT_KINDS[kind](report_path)
    fig.tight_layout()
    svg_path = out_dir / f"{kind}.svg"
    csv_path = out_dir / f"{kind}.csv"
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    series.to_csv(csv_path, index=False)
    logger.info(f"wrote {svg_path} and {csv_path}")
    return svg_path, csv_path
