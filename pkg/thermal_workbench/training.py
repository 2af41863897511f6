"""
Windowing, losses and the two-phase trainer.

Phase "encoder" runs the recurrence over whole windows with a random mix of
measured and predicted states fed back and scores every step. Phase "decoder"
encodes with measured states, decodes closed-loop and scores decoder steps
only. Early stopping watches the closed-loop validation loss and restores the
best weights.
"""

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from .config import TrainingConfig
from .errors import DivergenceError, InputError, PropagationError
from .models import (ModelConfig, NormStats, PiModNn, RecurrentBaseline, SequenceModel, WindowBatch,
                     disturbance_array)
from .numerics import DTYPE, adam_step, backward

logger = logging.getLogger(__name__)

VARIANT_FLAGS: Dict[str, Optional[Dict[str, bool]]] = {
    "LSTM": None,
    "PI-ModNN|LC": {"fluctuation_loss": False, "hard_constraints": False},
    "PI-ModNN|L": {"fluctuation_loss": False, "hard_constraints": True},
    "PI-ModNN|C": {"fluctuation_loss": True, "hard_constraints": False},
    "PI-ModNN": {"fluctuation_loss": True, "hard_constraints": True},
}


def build_variant(name: str, seed: int, base: Optional[ModelConfig] = None) -> SequenceModel:
    if name not in VARIANT_FLAGS:
        raise InputError(f"unknown variant {name!r}; valid names: {list(VARIANT_FLAGS)}")
    base = base or ModelConfig()
    flags = VARIANT_FLAGS[name]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if flags is None:
            model = RecurrentBaseline(replace(base, physics_structure=False, fluctuation_loss=False,
                                              hard_constraints=False))
        else:
            model = PiModNn(replace(base, physics_structure=True, **flags))
    model.variant = name
    return model


@dataclass(frozen=True)
class WindowedSample:
    frame: pd.DataFrame = field(repr=False, compare=False)
    origin: int
    encoder_len: int
    decoder_len: int

    @property
    def encoder(self) -> pd.DataFrame:
        return self.frame.iloc[self.origin:self.origin + self.encoder_len]

    @property
    def decoder(self) -> pd.DataFrame:
        start = self.origin + self.encoder_len
        return self.frame.iloc[start:start + self.decoder_len]


class WindowSet:
    """Window origins over one telemetry frame, with the frame's arrays cached for batching."""

    def __init__(self, frame: pd.DataFrame, config: ModelConfig, origins: Sequence[int]):
        self.frame = frame
        self.config = config
        self.origins = list(origins)
        self.x = frame["t_zone_c"].to_numpy(dtype=float)
        self.u = frame["u_hvac_kw"].to_numpy(dtype=float)
        self.w = disturbance_array(frame)

    def __len__(self) -> int:
        return len(self.origins)

    def samples(self) -> List[WindowedSample]:
        return [WindowedSample(self.frame, o, self.config.encoder_len, self.config.decoder_len) for o in self.origins]

    def batch(self, positions: Optional[Sequence[int]] = None) -> WindowBatch:
        positions = range(len(self.origins)) if positions is None else positions
        L, D = self.config.encoder_len, self.config.decoder_len
        origins = [self.origins[p] for p in positions]
        hist = np.array([np.arange(o, o + L) for o in origins])
        drive = np.array([np.arange(o + L - 1, o + L + D - 1) for o in origins])
        target = drive + 1
        t = lambda a: torch.as_tensor(a, dtype=DTYPE)
        return WindowBatch(
            x_hist=t(self.x[hist]), u_hist=t(self.u[hist]), w_hist=t(self.w[hist]),
            u_plan=t(self.u[drive]), w_plan=t(self.w[drive]), y=t(self.x[target]), origins=origins,
        )


def _valid_origins(frame: pd.DataFrame, need: int, stride: int, dt: float) -> List[int]:
    n = len(frame)
    steps = frame.index.to_series().diff().to_numpy()
    bad = np.zeros(n, dtype=int)
    bad[1:] = steps[1:] != np.timedelta64(int(dt * 1e9), "ns")
    bad |= frame.isna().any(axis=1).to_numpy().astype(int)
    cum_gap = np.concatenate([[0], np.cumsum(bad[1:])])
    cum_nan = np.concatenate([[0], np.cumsum(frame.isna().any(axis=1).to_numpy().astype(int))])
    origins = []
    for s in range(0, n - need + 1, stride):
        e = s + need - 1
        if cum_gap[e] - cum_gap[s] == 0 and cum_nan[e + 1] - cum_nan[s] == 0:
            origins.append(s)
    return origins


def make_windows(dataset: pd.DataFrame, config: ModelConfig, stride: int, dt: float = 900.0) -> List[WindowedSample]:
    """Overlapping encoder+decoder windows at ``stride``; windows touching a time gap are skipped."""
    return window_set(dataset, config, stride, dt).samples()


def window_set(dataset: pd.DataFrame, config: ModelConfig, stride: int, dt: float = 900.0) -> WindowSet:
    need = config.encoder_len + config.decoder_len
    if len(dataset) < need:
        raise InputError(f"dataset has {len(dataset)} steps; at least encoder_len + decoder_len = {need} needed")
    if stride < 1:
        raise InputError(f"stride must be >= 1, got {stride}")
    return WindowSet(dataset, config, _valid_origins(dataset, need, stride, dt))


def split_point(dataset: pd.DataFrame, val_fraction: float) -> int:
    return int(math.floor(len(dataset) * (1.0 - val_fraction)))


def train_val_windows(dataset: pd.DataFrame, config: ModelConfig, tcfg: TrainingConfig,
                      dt: float = 900.0) -> Tuple[WindowSet, WindowSet]:
    """
    Chronological split: the last ``val_fraction`` of the period is validation.
    Validation windows have their decoder inside that tail (their encoder may
    reach back); training windows end before it.
    """
    cut = split_point(dataset, tcfg.val_fraction)
    L, D = config.encoder_len, config.decoder_len
    train = window_set(dataset, config, tcfg.stride, dt)
    train.origins = [o for o in train.origins if o + L + D <= cut]
    val = window_set(dataset, config, tcfg.val_stride, dt)
    val.origins = [o for o in val.origins if o + L >= cut]
    if not train.origins or not val.origins:
        raise InputError(f"dataset of {len(dataset)} steps yields {len(train)} training and {len(val)} validation "
                         f"windows; both must be non-empty (need roughly {L + D} steps beyond the "
                         f"{tcfg.val_fraction:.0%} validation tail)")
    return train, val


def _pair(meas, pred) -> Tuple[torch.Tensor, torch.Tensor]:
    meas = torch.as_tensor(meas, dtype=DTYPE)
    pred = torch.as_tensor(pred, dtype=DTYPE)
    if meas.shape != pred.shape:
        raise InputError(f"measured {tuple(meas.shape)} and predicted {tuple(pred.shape)} series differ in shape")
    if meas.numel() == 0:
        raise InputError("loss of an empty series is undefined")
    return meas, pred


def accuracy_loss(meas, pred) -> torch.Tensor:
    meas, pred = _pair(meas, pred)
    return ((meas - pred) ** 2).mean()


def fluctuation_loss(meas, pred) -> torch.Tensor:
    """Mean absolute mismatch of consecutive differences along the last axis."""
    meas, pred = _pair(meas, pred)
    if meas.shape[-1] < 2:
        raise InputError("fluctuation loss needs at least two steps")
    return (torch.diff(meas, dim=-1) - torch.diff(pred, dim=-1)).abs().mean()


def total_loss(meas, pred, alpha: float) -> torch.Tensor:
    return loss_components(meas, pred, alpha)[0]


def loss_components(meas, pred, alpha: float) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    if alpha < 0:
        raise InputError(f"alpha must be >= 0, got {alpha}")
    acc = accuracy_loss(meas, pred)
    meas, pred = _pair(meas, pred)
    # single-step horizons carry no consecutive differences
    fluct = fluctuation_loss(meas, pred) if meas.shape[-1] >= 2 else torch.zeros((), dtype=DTYPE)
    if alpha == 0:
        return acc, acc, fluct
    return acc + alpha * fluct, acc, fluct


class EarlyStopping:
    """
    Stop when the validation loss has not improved for ``patience`` epochs;
    keeps a copy of the best weights.
    """

    def __init__(self, patience: int = 10, delta: float = 0.0):
        self.patience = patience
        self.delta = delta
        self.counter = 0
        self.best_score: Optional[float] = None
        self.best_epoch: Optional[int] = None
        self.best_state = None
        self.early_stop = False

    def __call__(self, val_loss: float, epoch: int, model: torch.nn.Module) -> bool:
        if self.best_score is None or val_loss < self.best_score - self.delta:
            self.best_score = val_loss
            self.best_epoch = epoch
            self.best_state = copy.deepcopy(model.state_dict())
            self.counter = 0
            return True
        self.counter += 1
        logger.debug(f"EarlyStopping counter: {self.counter} out of {self.patience}")
        if self.counter >= self.patience:
            self.early_stop = True
        return False


@dataclass
class EpochLog:
    epoch: int
    train_total: float
    train_acc: float
    train_fluct: float
    val_total: float
    phase1_total: Optional[float] = None
    min_flagged_weight: Optional[float] = None


@dataclass
class TrainReport:
    variant: str
    seed: int
    epochs: List[EpochLog] = field(default_factory=list)
    stop_epoch: int = 0
    best_epoch: int = 0
    best_val_loss: float = math.inf
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["schema_version"] = 1
        return doc

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    def write_loss_csv(self, path) -> None:
        rows = [{"epoch": e.epoch, "train_total": e.train_total, "train_acc": e.train_acc,
                 "train_fluct": e.train_fluct, "val_total": e.val_total} for e in self.epochs]
        pd.DataFrame(rows, columns=["epoch", "train_total", "train_acc", "train_fluct", "val_total"]).to_csv(
            path, index=False)


def _phases(epoch: int, config: TrainingConfig) -> Tuple[str, ...]:
    if config.schedule == "interleaved":
        return ("encoder", "decoder")
    return ("encoder",) if epoch <= config.phase1_epochs else ("decoder",)


def validation_loss(model: SequenceModel, windows: WindowSet, alpha: float, batch_size: int = 256) -> float:
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(windows), batch_size):
            batch = windows.batch(range(start, min(start + batch_size, len(windows))))
            loss = total_loss(batch.y, model.rollout_batch(batch), alpha)
            total += float(loss) * len(batch)
            count += len(batch)
    return total / count


Validator = Callable[[SequenceModel, int], float]


def train(model: SequenceModel, dataset: pd.DataFrame, config: TrainingConfig, seed: int,
          validator: Optional[Validator] = None, dt: float = 900.0) -> Tuple[SequenceModel, TrainReport]:
    started = time.perf_counter()
    if config.epochs < 1 or config.patience < 1:
        raise InputError(f"training needs epochs >= 1 and patience >= 1, got {config.epochs} and {config.patience}")
    train_set, val_set = train_val_windows(dataset, model.config, config, dt)
    if model.stats is None:
        model.set_stats(NormStats.from_frame(dataset.iloc[:split_point(dataset, config.val_fraction)]))

    generator = torch.Generator().manual_seed(seed)
    params = model.param_set(lr=config.lr)
    alpha = model.config.effective_alpha
    stopper = EarlyStopping(config.patience)
    report = TrainReport(variant=getattr(model, "variant", model.architecture), seed=seed)
    logger.info(f"training {report.variant} on {len(train_set)} windows ({len(val_set)} validation), "
                f"alpha={alpha}, constraints={model.config.hard_constraints}")

    for epoch in range(1, config.epochs + 1):
        order = torch.randperm(len(train_set), generator=generator).tolist()
        sums: Dict[str, np.ndarray] = {}
        for phase in _phases(epoch, config):
            acc_sum = np.zeros(3)
            for b, start in enumerate(range(0, len(order), config.batch_size)):
                batch = train_set.batch(order[start:start + config.batch_size])
                params.zero_grad()
                try:
                    if phase == "encoder":
                        x, u, w = batch.full_sequence()
                        res = model.recur(x, u, w, p_mix=config.p_mix, generator=generator)
                        meas, pred = x[:, 1:], res.predictions
                    else:
                        meas, pred = batch.y, model.rollout_batch(batch)
                except PropagationError as e:
                    raise DivergenceError(f"{phase} phase diverged at epoch {epoch}, batch {b}: {e}") from e
                total, acc, fluct = loss_components(meas, pred, alpha)
                if not torch.isfinite(total):
                    raise DivergenceError(f"non-finite {phase} loss at epoch {epoch}, batch {b}")
                backward(total)
                adam_step(params, config.lr)
                acc_sum += np.array([float(total), float(acc), float(fluct)]) * len(batch)
            sums[phase] = acc_sum / len(order)

        main = sums.get("decoder", sums.get("encoder"))
        val = validator(model, epoch) if validator else validation_loss(model, val_set, alpha)
        flagged = params.min_flagged()
        report.epochs.append(EpochLog(
            epoch=epoch, train_total=float(main[0]), train_acc=float(main[1]), train_fluct=float(main[2]),
            val_total=float(val), phase1_total=float(sums["encoder"][0]) if "encoder" in sums else None,
            min_flagged_weight=None if math.isinf(flagged) else flagged,
        ))
        logger.info(f"epoch {epoch}: train {main[0]:.5f} (acc {main[1]:.5f}, fluct {main[2]:.5f}), val {val:.5f}")
        stopper(float(val), epoch, model)
        if stopper.early_stop:
            logger.info(f"early stop at epoch {epoch}; best epoch {stopper.best_epoch} (val {stopper.best_score:.5f})")
            break

    model.load_state_dict(stopper.best_state)
    report.stop_epoch = report.epochs[-1].epoch
    report.best_epoch = stopper.best_epoch
    report.best_val_loss = stopper.best_score
    report.wall_time_s = time.perf_counter() - started
    return model, report


def fit_variant(name: str, dataset: pd.DataFrame, model_config: ModelConfig, config: TrainingConfig, seed: int,
                dt: float = 900.0) -> Tuple[SequenceModel, TrainReport]:
    model = build_variant(name, seed, model_config)
    return train(model, dataset, config, seed, dt=dt)
