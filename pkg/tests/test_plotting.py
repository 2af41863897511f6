import json

import pandas as pd
import pytest

from thermal_workbench.control import TRACE_COLUMNS
from thermal_workbench.errors import InputError
from thermal_workbench.plotting import PLOT_KINDS, render


@pytest.fixture
def ablation_report(tmp_path):
    cells = [{"variant": v, "days": d, "seed": s, "mae_c": 0.2 + 0.01 * s, "trv_plus": 0.01 * s,
              "trv_minus": 0.0, "error": None}
             for v in ("PI-ModNN|C", "PI-ModNN") for d in (7, 30) for s in range(3)]
    cells.append({"variant": "LSTM", "days": 7, "seed": 0, "mae_c": None, "trv_plus": None, "trv_minus": None,
                  "error": "DivergenceError: loss became NaN"})
    samples = [{"days": 7, "seed": s, "f_s": 0.1, "f_si": 0.2, "ri": 0.3 + 0.1 * s} for s in range(3)]
    doc = {"schema_version": 1, "cells": cells, "rule_importance": [
        {"prior": "constraints", "rule_set": "PI-ModNN", "candidate": "PI-ModNN|C", "metric": m,
         "epsilon": 1e-6, "samples": samples} for m in ("mae", "trv")]}
    path = tmp_path / "ablation.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


@pytest.fixture
def train_report(tmp_path):
    epochs = [{"epoch": e, "train_total": 1.0 / e, "val_total": 1.2 / e} for e in range(1, 6)]
    path = tmp_path / "train_report.json"
    path.write_text(json.dumps({"schema_version": 1, "epochs": epochs}), encoding="utf-8")
    return path


@pytest.fixture
def trace(tmp_path):
    index = pd.date_range("2024-06-03", periods=8, freq="15min")
    frame = pd.DataFrame({
        "timestamp": index.astype(str), "t_zone_c": 22.0, "lower_c": 21.7, "upper_c": 24.0,
        "q_sup_m3s": 0.1, "q_out_m3s": 0.05, "t_sup_c": 14.0, "coil_kw": 1.5,
    }, columns=TRACE_COLUMNS)
    path = tmp_path / "agent_trace.csv"
    frame.to_csv(path, index=False)
    return path


def test_every_kind_is_covered():
    assert set(PLOT_KINDS) == {"mae-vs-days", "trv-vs-days", "ri", "loss-decay", "day-trace"}


@pytest.mark.parametrize("kind", ["mae-vs-days", "trv-vs-days", "ri"])
def test_ablation_figures(kind, ablation_report, tmp_path):
    svg, csv = render(ablation_report, kind, tmp_path / "figs")
    assert svg.read_text().lstrip().startswith("<?xml")
    series = pd.read_csv(csv)
    if kind == "ri":
        assert len(series) == 6
    else:
        assert len(series) == 12
        assert "LSTM" not in set(series["variant"])


def test_loss_decay(train_report, tmp_path):
    _, csv = render(train_report, "loss-decay", tmp_path)
    assert pd.read_csv(csv)["epoch"].tolist() == [1, 2, 3, 4, 5]


def test_day_trace(trace, tmp_path):
    svg, csv = render(trace, "day-trace", tmp_path / "out")
    assert svg.name == "day-trace.svg"
    assert list(pd.read_csv(csv).columns) == TRACE_COLUMNS


def test_svg_bytes_are_reproducible(ablation_report, tmp_path):
    first, _ = render(ablation_report, "mae-vs-days", tmp_path / "a")
    second, _ = render(ablation_report, "mae-vs-days", tmp_path / "b")
    assert first.read_bytes() == second.read_bytes()


def test_unknown_kind(train_report, tmp_path):
    with pytest.raises(InputError, match="valid kinds"):
        render(train_report, "heatmap", tmp_path)


def test_missing_report(tmp_path):
    with pytest.raises(InputError, match="not found"):
        render(tmp_path / "absent.json", "loss-decay", tmp_path)


def test_wrong_report_type(train_report, tmp_path):
    with pytest.raises(InputError, match="ablation"):
        render(train_report, "mae-vs-days", tmp_path)
