"""
Measurement stack: rolling-horizon MAE, temperature response violation (TRV),
control-gain sign audit, rule importance and the variant x size x seed
ablation grid.
"""

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from .config import RunConfig
from .errors import InputError
from .models import DISTURBANCE_WIDTH, ModelConfig, SequenceModel, WindowBatch, control_gain
from .numerics import DTYPE, as_numpy
from .plant import PlantParams, PlantState, plant_step
from .training import WindowSet, _valid_origins, fit_variant

logger = logging.getLogger(__name__)

DEFAULT_CHECK_LEVELS = (-4.0, -2.0, 0.0, 2.0, 4.0)

# prior -> (rule set s, rule set s + prior)
PRIOR_PAIRS: Dict[str, Tuple[str, str]] = {
    "structure": ("LSTM", "PI-ModNN|LC"),
    "loss": ("PI-ModNN|L", "PI-ModNN"),
    "constraints": ("PI-ModNN|C", "PI-ModNN"),
}


class Predictor(Protocol):
    def forecast(self, batch: WindowBatch) -> np.ndarray:
        ...


class PlantOracle:
    """Uses the ground-truth plant as its own forecaster, starting from the true state at the last history record."""

    def __init__(self, params: PlantParams, states: pd.DataFrame, encoder_len: int):
        self.params = params
        self.t_zone = states["t_zone_true_c"].to_numpy(dtype=float)
        self.t_mass = states["t_mass_c"].to_numpy(dtype=float)
        self.encoder_len = encoder_len

    def forecast(self, batch: WindowBatch) -> np.ndarray:
        if not batch.origins:
            raise InputError("the plant oracle needs window origins to look up the true state")
        u = as_numpy(batch.u_plan)
        w = as_numpy(batch.w_plan)
        out = np.zeros(u.shape)
        for row, origin in enumerate(batch.origins):
            last = origin + self.encoder_len - 1
            state = PlantState(self.t_zone[last], self.t_mass[last])
            for k in range(u.shape[1]):
                state = plant_step(state, float(u[row, k]), float(w[row, k, 0]), float(w[row, k, 1]),
                                   float(w[row, k, 2]), self.params)
                out[row, k] = state.T_z
        return out


def mae(meas, pred) -> float:
    meas = np.asarray(meas, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if meas.shape != pred.shape:
        raise InputError(f"measured {meas.shape} and predicted {pred.shape} differ in shape")
    if meas.size == 0:
        raise InputError("MAE of an empty series is undefined")
    return float(np.mean(np.abs(meas - pred)))


@dataclass
class RollingReport:
    n_evaluations: int
    aggregate_mae: float
    per_horizon_mae: List[float]
    window_mae: List[float]
    window_origins: List[int]

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["schema_version"] = 1
        return doc


def period_window_set(dataset: pd.DataFrame, config: ModelConfig, test_start: int, test_steps: int,
                      stride: int = 1, dt: float = 900.0) -> WindowSet:
    """Windows whose decoder starts at test_start, test_start + stride, ... inside the test period."""
    L, D = config.encoder_len, config.decoder_len
    if test_start < L:
        raise InputError(f"test period starts at step {test_start}; at least {L} history steps are needed before it")
    last_needed = test_start + test_steps - 1 + D
    if last_needed > len(dataset) or test_steps < 1:
        raise InputError(f"test period of {test_steps} steps from {test_start} needs {last_needed} records, "
                         f"dataset has {len(dataset)}")
    valid = set(_valid_origins(dataset, L + D, 1, dt))
    origins = [s - L for s in range(test_start, test_start + test_steps, stride) if s - L in valid]
    if not origins:
        raise InputError("no gap-free windows in the test period")
    return WindowSet(dataset, config, origins)


def rolling_eval(predictor: Predictor, dataset: pd.DataFrame, config: ModelConfig, test_start: Optional[int] = None,
                 test_steps: Optional[int] = None, stride: int = 1, batch_size: int = 256,
                 dt: float = 900.0) -> RollingReport:
    """
    Score a full decoder rollout at every window start of the test period.
    Without test bounds the whole dataset after the first history is scored.
    """
    L, D = config.encoder_len, config.decoder_len
    if test_start is None:
        test_start = L
    if test_steps is None:
        test_steps = len(dataset) - test_start - D + 1
    windows = period_window_set(dataset, config, test_start, test_steps, stride, dt)

    errors = []
    for start in range(0, len(windows), batch_size):
        batch = windows.batch(range(start, min(start + batch_size, len(windows))))
        pred = np.asarray(predictor.forecast(batch), dtype=float)
        errors.append(np.abs(as_numpy(batch.y) - pred))
    err = np.concatenate(errors, axis=0)
    report = RollingReport(
        n_evaluations=int(err.shape[0]),
        aggregate_mae=float(err.mean()),
        per_horizon_mae=err.mean(axis=0).tolist(),
        window_mae=err.mean(axis=1).tolist(),
        window_origins=list(windows.origins),
    )
    logger.info(f"rolling MAE {report.aggregate_mae:.4f} C over {report.n_evaluations} windows")
    return report


@dataclass
class TrvLevel:
    delta_kw: float
    trv_plus: float
    trv_minus: float
    trace: List[float]  # per decoder step, summed over episodes


@dataclass
class TrvReport:
    levels: List[TrvLevel] = field(default_factory=list)
    step_hours: float = 0.25

    @property
    def trv_plus(self) -> float:
        return sum(level.trv_plus for level in self.levels)

    @property
    def trv_minus(self) -> float:
        return sum(level.trv_minus for level in self.levels)

    @property
    def total(self) -> float:
        return self.trv_plus + self.trv_minus

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "levels": [asdict(level) for level in self.levels],
            "trv_plus": self.trv_plus,
            "trv_minus": self.trv_minus,
            "trv_plus_ch": self.trv_plus * self.step_hours,
            "trv_minus_ch": self.trv_minus * self.step_hours,
        }


def trv(predictor: Predictor, episodes: WindowBatch, check_levels: Sequence[float] = DEFAULT_CHECK_LEVELS,
        u_limit_kw: float = 10.0, dt: float = 900.0) -> TrvReport:
    """
    Compare rollouts under the original plan with rollouts under plan + delta.
    More cooling (delta < 0) must not end warmer: positive excess goes to
    trv_plus. More heating (delta > 0) must not end cooler: the shortfall goes
    to trv_minus. delta = 0 must reproduce the reference exactly.
    """
    reference = np.asarray(predictor.forecast(episodes), dtype=float)
    report = TrvReport(step_hours=dt / 3600.0)
    for delta in check_levels:
        check = np.asarray(predictor.forecast(episodes.with_offset(float(delta), u_limit_kw)), dtype=float)
        diff = check - reference
        if delta < 0:
            plus, minus = np.maximum(diff, 0.0), np.zeros_like(diff)
        elif delta > 0:
            plus, minus = np.zeros_like(diff), np.maximum(-diff, 0.0)
        else:
            plus = minus = np.abs(diff)
        per_step = np.maximum(plus, minus).sum(axis=0)
        report.levels.append(TrvLevel(float(delta), float(plus.sum()), float(minus.sum()), per_step.tolist()))
    logger.info(f"TRV+ {report.trv_plus:.6f}, TRV- {report.trv_minus:.6f} C-step over {len(episodes)} episodes")
    return report


@dataclass
class GainAudit:
    n_points: int
    negative_fraction: float
    worst_gain: float
    worst_point: Dict[str, float]

    def to_dict(self) -> dict:
        return asdict(self)


def _random_hidden(model: SequenceModel, n: int, rng: np.random.Generator):
    template = model.init_hidden(n)
    draw = lambda t: torch.as_tensor(rng.uniform(-1.0, 1.0, size=tuple(t.shape)), dtype=DTYPE)
    if isinstance(template, tuple):
        return tuple(draw(t) for t in template)
    return draw(template)


def gain_sign_audit(model: SequenceModel, n_points: int = 1000, seed: int = 0) -> GainAudit:
    """Sample (x, u, w, hidden) and check d x(t+1) / d u(t) >= 0 at every point."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(15.0, 30.0, size=n_points)
    u = rng.uniform(-4.0, 4.0, size=n_points)
    angle = rng.uniform(0.0, 2 * np.pi, size=n_points)
    w = np.stack([
        rng.uniform(0.0, 35.0, size=n_points),
        rng.uniform(0.0, 800.0, size=n_points),
        rng.integers(0, 11, size=n_points).astype(float),
        np.sin(angle),
        np.cos(angle),
    ], axis=1)
    hidden = _random_hidden(model, n_points, rng)
    gains = as_numpy(control_gain(model, x, u, w, hidden)).reshape(-1)
    worst = int(np.argmin(gains))
    return GainAudit(
        n_points=n_points,
        negative_fraction=float(np.mean(gains < 0)),
        worst_gain=float(gains[worst]),
        worst_point={"x": float(x[worst]), "u": float(u[worst]),
                     **{f"w{i}": float(w[worst, i]) for i in range(DISTURBANCE_WIDTH)}},
    )


def rule_importance(f_s: float, f_si: float, epsilon: float = 1e-6) -> float:
    """log10(f(s) + eps) - log10(f(s + i) + eps); positive when adding rule i lowered the metric."""
    if epsilon <= 0:
        raise InputError(f"epsilon must be > 0, got {epsilon}")
    if not (math.isfinite(f_s) and math.isfinite(f_si)) or f_s < 0 or f_si < 0:
        raise InputError(f"rule importance needs finite non-negative metrics, got {f_s} and {f_si}")
    return math.log10(f_s + epsilon) - math.log10(f_si + epsilon)


@dataclass
class RuleImportanceReport:
    prior: str
    rule_set: str
    candidate: str
    metric: str
    epsilon: float
    samples: List[Dict[str, float]] = field(default_factory=list)  # days, seed, f_s, f_si, ri

    @property
    def values(self) -> np.ndarray:
        return np.array([s["ri"] for s in self.samples], dtype=float)

    def summary(self) -> Dict[str, Optional[float]]:
        if not self.samples:
            return {"median": None, "q1": None, "q3": None}
        q1, median, q3 = np.percentile(self.values, [25, 50, 75])
        return {"median": float(median), "q1": float(q1), "q3": float(q3)}

    def to_dict(self) -> dict:
        return {**asdict(self), **self.summary()}


@dataclass
class AblationCell:
    variant: str
    days: int
    seed: int
    mae_c: Optional[float] = None
    trv_plus: Optional[float] = None
    trv_minus: Optional[float] = None
    train_time_s: Optional[float] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class AblationResult:
    cells: List[AblationCell] = field(default_factory=list)
    rule_importance: List[RuleImportanceReport] = field(default_factory=list)

    def cell(self, variant: str, days: int, seed: int) -> Optional[AblationCell]:
        for c in self.cells:
            if (c.variant, c.days, c.seed) == (variant, days, seed):
                return c
        return None

    def to_dict(self, include_timing: bool = False) -> dict:
        cells = []
        for c in self.cells:
            doc = asdict(c)
            if not include_timing:
                doc.pop("train_time_s")
            cells.append(doc)
        return {"schema_version": 1, "cells": cells,
                "rule_importance": [r.to_dict() for r in self.rule_importance]}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    def write_csv(self, path) -> None:
        rows = [{"variant": c.variant, "days": c.days, "seed": c.seed, "mae_c": c.mae_c,
                 "trv_plus": c.trv_plus, "trv_minus": c.trv_minus} for c in self.cells]
        pd.DataFrame(rows, columns=["variant", "days", "seed", "mae_c", "trv_plus", "trv_minus"]).to_csv(
            path, index=False)


@dataclass
class AblationJob:
    variant: str
    days: int
    seed: int
    train_frame: pd.DataFrame
    eval_frame: pd.DataFrame
    test_start: int
    test_steps: int
    run_config: dict


def run_cell(job: AblationJob) -> AblationCell:
    """Train one variant and score it; failures are recorded on the cell."""
    torch.set_num_threads(1)
    cfg = RunConfig.from_dict(job.run_config)
    cell = AblationCell(job.variant, job.days, job.seed)
    try:
        started = time.perf_counter()
        model, _ = fit_variant(job.variant, job.train_frame, cfg.model, cfg.training, job.seed, dt=cfg.plant.dt)
        cell.train_time_s = time.perf_counter() - started
        rolling = rolling_eval(model, job.eval_frame, cfg.model, job.test_start, job.test_steps,
                               stride=cfg.evaluation.rolling_stride, dt=cfg.plant.dt)
        episodes = period_window_set(job.eval_frame, cfg.model, job.test_start, job.test_steps,
                                   stride=cfg.evaluation.trv_stride, dt=cfg.plant.dt).batch()
        report = trv(model, episodes, cfg.evaluation.check_levels, cfg.evaluation.u_limit_kw, dt=cfg.plant.dt)
        cell.mae_c = rolling.aggregate_mae
        cell.trv_plus = report.trv_plus
        cell.trv_minus = report.trv_minus
    except Exception as e:
        logger.error(f"cell {job.variant}/{job.days}d/seed {job.seed} failed: {e}")
        cell.error = f"{type(e).__name__}: {e}"
    return cell


def rule_importance_reports(result: AblationResult, epsilon: float = 1e-6) -> List[RuleImportanceReport]:
    reports = []
    keys = sorted({(c.days, c.seed) for c in result.cells})
    for prior, (rule_set, candidate) in PRIOR_PAIRS.items():
        for metric in ("mae", "trv"):
            report = RuleImportanceReport(prior, rule_set, candidate, metric, epsilon)
            for days, seed in keys:
                base, cand = result.cell(rule_set, days, seed), result.cell(candidate, days, seed)
                if base is None or cand is None or not (base.ok and cand.ok):
                    continue
                if metric == "mae":
                    f_s, f_si = base.mae_c, cand.mae_c
                else:
                    f_s, f_si = base.trv_plus + base.trv_minus, cand.trv_plus + cand.trv_minus
                report.samples.append({"days": days, "seed": seed, "f_s": f_s, "f_si": f_si,
                                       "ri": rule_importance(f_s, f_si, epsilon)})
            if report.samples:
                reports.append(report)
    return reports


def ablation_harness(dataset: pd.DataFrame, run_config, variants: Sequence[str], training_days: Sequence[int],
                     seeds: int, test_days: int, base_seed: int = 0, jobs: int = 1) -> AblationResult:
    """
    Grid over variants x training sizes x seeds. Each size trains on the days
    right before the test period, which starts after the largest size. Seeds
    are base_seed, base_seed + 1, ...
    """
    spd = run_config.plant.params().steps_per_day
    L, D = run_config.model.encoder_len, run_config.model.decoder_len
    test_start = max(training_days) * spd
    test_steps = test_days * spd
    needed = test_start + test_steps + D - 1
    if len(dataset) < needed:
        raise InputError(f"ablation needs {needed} records ({max(training_days)} training days, {test_days} test "
                         f"days and one decoder horizon), dataset has {len(dataset)}")
    if test_start < L:
        raise InputError("the shortest test history is shorter than the encoder")

    eval_frame = dataset.iloc[:needed]
    doc = run_config.to_dict()
    grid = [AblationJob(v, d, base_seed + s, dataset.iloc[test_start - d * spd:test_start], eval_frame, test_start,
                        test_steps, doc)
            for v in variants for d in training_days for s in range(seeds)]
    logger.info(f"ablation grid: {len(grid)} cells on {jobs} worker(s)")

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(run_cell, grid))
    else:
        cells = [run_cell(job) for job in grid]
    for i, c in enumerate(cells, 1):
        status = "failed" if c.error else f"MAE {c.mae_c:.4f}, TRV {c.trv_plus + c.trv_minus:.4f}"
        logger.info(f"[{i}/{len(cells)}] {c.variant} {c.days}d seed {c.seed}: {status}")

    result = AblationResult(cells=cells)
    result.rule_importance = rule_importance_reports(result, run_config.evaluation.epsilon)
    return result
