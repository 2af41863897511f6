"""
Zone temperature models: the modular physics-informed time stepper and the
recurrent data-driven comparator.

The time stepper advances the zone temperature with a residual update

    x(t+1) = x(t) + f_NNA( f_NNB(u(t)) + f_NNE(x(t), w(t)) )

where f_NNB sees the HVAC load, f_NNE the state and disturbances, and f_NNA
maps the summed heat flux to a temperature increment (the 1/cM scaling is
learned inside f_NNA). With hard constraints all f_NNA/f_NNB weights stay
non-negative, which makes every step non-decreasing in u.

Encoder and decoder share the same sub-networks; the encoder only differs in
which state is fed back (measured, predicted or a random mix of both).
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from torch import nn

from .errors import InputError, PropagationError
from .numerics import DTYPE, Dense, GruCell, Mlp, ParamSet, as_numpy

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "thermal-workbench/model-v1"
STAT_CHANNELS = ("t_zone_c", "t_out_c", "solar_wm2", "occupancy")
DISTURBANCE_WIDTH = 5  # t_out, solar, occupancy, sin(tod), cos(tod)
VARIANCE_FLOOR = 1e-6

Hidden = Union[torch.Tensor, Tuple[torch.Tensor, torch.Tensor]]


@dataclass
class ModelConfig:
    dims_fnna: Tuple[int, int, int] = (1, 16, 1)
    dims_fnnb: Tuple[int, int, int] = (1, 3, 1)
    dims_fnne: Tuple[int, int, int] = (6, 16, 1)
    encoder_len: int = 96
    decoder_len: int = 96
    window_len: int = 8
    physics_structure: bool = True
    fluctuation_loss: bool = True
    hard_constraints: bool = True
    alpha: float = 1.0
    disturbance: str = "gru"
    u_scale_kw: float = 4.0
    baseline_hidden: int = 16

    def __post_init__(self):
        self.dims_fnna = tuple(self.dims_fnna)
        self.dims_fnnb = tuple(self.dims_fnnb)
        self.dims_fnne = tuple(self.dims_fnne)
        if min(self.encoder_len, self.decoder_len, self.window_len) < 1:
            raise InputError("encoder_len, decoder_len and window_len must be >= 1")
        if self.alpha < 0:
            raise InputError(f"alpha must be >= 0, got {self.alpha}")
        if self.disturbance not in ("gru", "mlp"):
            raise InputError(f"disturbance must be 'gru' or 'mlp', got {self.disturbance!r}")
        if self.dims_fnne[0] != 1 + DISTURBANCE_WIDTH:
            raise InputError(f"f_NNE input width must be {1 + DISTURBANCE_WIDTH}, got {self.dims_fnne[0]}")
        if not (self.dims_fnnb[0] == 1 and self.dims_fnnb[-1] == self.dims_fnne[-1] == self.dims_fnna[0]
                and self.dims_fnna[-1] == 1):
            raise InputError("sub-network widths do not compose: f_NNB(1->k) + f_NNE(6->k) -> f_NNA(k->1)")
        if self.u_scale_kw <= 0:
            raise InputError("u_scale_kw must be > 0")

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.fluctuation_loss else 0.0


@dataclass
class NormStats:
    channels: Tuple[str, ...]
    mean: Tuple[float, ...]
    std: Tuple[float, ...]

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, channels: Sequence[str] = STAT_CHANNELS) -> "NormStats":
        means, stds = [], []
        for ch in channels:
            values = frame[ch].to_numpy(dtype=float)
            std = float(values.std())
            if std < VARIANCE_FLOOR:
                logger.warning(f"channel {ch} has (near) zero variance; std floored at {VARIANCE_FLOOR}")
                std = VARIANCE_FLOOR
            means.append(float(values.mean()))
            stds.append(std)
        return cls(tuple(channels), tuple(means), tuple(stds))

    def of(self, channel: str) -> Tuple[float, float]:
        i = self.channels.index(channel)
        return self.mean[i], self.std[i]

    def to_dict(self) -> dict:
        return {"channels": list(self.channels), "mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, doc: dict) -> "NormStats":
        return cls(tuple(doc["channels"]), tuple(doc["mean"]), tuple(doc["std"]))


def normalize(features, stats: NormStats, channels: Optional[Sequence[str]] = None):
    """z-score the trailing axis, whose columns follow ``channels`` (default: all stat channels)."""
    channels = channels or stats.channels
    mean = [stats.of(ch)[0] for ch in channels]
    std = [stats.of(ch)[1] for ch in channels]
    if isinstance(features, torch.Tensor):
        return (features - torch.tensor(mean, dtype=features.dtype)) / torch.tensor(std, dtype=features.dtype)
    return (np.asarray(features, dtype=float) - np.asarray(mean)) / np.asarray(std)


def denormalize(pred, stats: NormStats, channel: str = "t_zone_c"):
    mean, std = stats.of(channel)
    return pred * std + mean


def time_of_day_features(index: pd.DatetimeIndex) -> np.ndarray:
    seconds = index.hour.to_numpy() * 3600 + index.minute.to_numpy() * 60 + index.second.to_numpy()
    tod = seconds / 86400.0
    return np.stack([np.sin(2 * np.pi * tod), np.cos(2 * np.pi * tod)], axis=-1)


def feature_vector(t_zone: float, t_out: float, solar: float, occupancy: float, timestamp) -> np.ndarray:
    """The six disturbance-model inputs at one instant."""
    sin_cos = time_of_day_features(pd.DatetimeIndex([pd.Timestamp(timestamp)]))[0]
    return np.array([t_zone, t_out, solar, occupancy, sin_cos[0], sin_cos[1]], dtype=float)


def disturbance_array(frame: pd.DataFrame) -> np.ndarray:
    base = frame[["t_out_c", "solar_wm2", "occupancy"]].to_numpy(dtype=float)
    return np.concatenate([base, time_of_day_features(pd.DatetimeIndex(frame.index))], axis=1)


def history_tensors(frame: pd.DataFrame) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(x, u, w) tensors with a leading batch axis of 1 from a telemetry slice."""
    x = torch.tensor(frame["t_zone_c"].to_numpy(dtype=float), dtype=DTYPE).unsqueeze(0)
    u = torch.tensor(frame["u_hvac_kw"].to_numpy(dtype=float), dtype=DTYPE).unsqueeze(0)
    w = torch.tensor(disturbance_array(frame), dtype=DTYPE).unsqueeze(0)
    return x, u, w


@dataclass
class WindowBatch:
    """
    Batched windows. Decoder step k is driven by the controls/disturbances of
    record L-1+k and predicts the measured temperature of decoder record k.
    """
    x_hist: torch.Tensor  # (B, L) measured zone temperature, C
    u_hist: torch.Tensor  # (B, L) kW
    w_hist: torch.Tensor  # (B, L, 5)
    u_plan: torch.Tensor  # (B, D) kW
    w_plan: torch.Tensor  # (B, D, 5)
    y: Optional[torch.Tensor] = None  # (B, D) measured targets, C
    origins: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return self.x_hist.shape[0]

    def full_sequence(self) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Encoder and decoder records joined as one measured sequence of length L + D."""
        if self.y is None:
            raise InputError("full_sequence needs measured decoder targets")
        x = torch.cat([self.x_hist, self.y], dim=1)
        u = torch.cat([self.u_hist, self.u_plan[:, 1:], self.u_plan[:, -1:]], dim=1)
        w = torch.cat([self.w_hist, self.w_plan[:, 1:], self.w_plan[:, -1:]], dim=1)
        return x, u, w

    def with_offset(self, delta_kw: float, limit_kw: Optional[float] = None) -> "WindowBatch":
        u_plan = self.u_plan + delta_kw
        if limit_kw is not None:
            u_plan = u_plan.clamp(-limit_kw, limit_kw)
        return WindowBatch(self.x_hist, self.u_hist, self.w_hist, u_plan, self.w_plan, self.y, self.origins)

    def subset(self, idx: Sequence[int]) -> "WindowBatch":
        idx_t = torch.as_tensor(list(idx), dtype=torch.long)
        return WindowBatch(
            self.x_hist[idx_t], self.u_hist[idx_t], self.w_hist[idx_t], self.u_plan[idx_t], self.w_plan[idx_t],
            None if self.y is None else self.y[idx_t], [self.origins[i] for i in idx] if self.origins else [],
        )


@dataclass
class EncoderResult:
    x_end: torch.Tensor  # (B, 1) C
    hidden: Hidden
    predictions: torch.Tensor  # (B, L-1) one-step predictions inside the history, C


def _mix(measured: torch.Tensor, predicted: torch.Tensor, p_mix: float,
         generator: Optional[torch.Generator]) -> torch.Tensor:
    if p_mix >= 1.0:
        return measured
    if p_mix <= 0.0:
        return predicted
    keep = torch.rand(measured.shape, generator=generator, dtype=measured.dtype) < p_mix
    return torch.where(keep, measured, predicted)


def detach_hidden(hidden: Hidden) -> Hidden:
    if isinstance(hidden, tuple):
        return tuple(h.detach() for h in hidden)
    return hidden.detach()


class SequenceModel(nn.Module):
    """Shared encode/rollout machinery; subclasses provide init_hidden and step."""

    architecture = "base"

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.register_buffer("t_mean", torch.zeros((), dtype=DTYPE))
        self.register_buffer("t_std", torch.ones((), dtype=DTYPE))
        self.register_buffer("w_mean", torch.zeros(3, dtype=DTYPE))
        self.register_buffer("w_std", torch.ones(3, dtype=DTYPE))
        self.stats: Optional[NormStats] = None

    def set_stats(self, stats: NormStats) -> None:
        self.stats = stats
        t_mean, t_std = stats.of("t_zone_c")
        self.t_mean.fill_(t_mean)
        self.t_std.fill_(t_std)
        for i, ch in enumerate(("t_out_c", "solar_wm2", "occupancy")):
            mean, std = stats.of(ch)
            self.w_mean[i] = mean
            self.w_std[i] = std

    def normalized_disturbance(self, w: torch.Tensor) -> torch.Tensor:
        return torch.cat([(w[:, :3] - self.w_mean) / self.w_std, w[:, 3:]], dim=1)

    def nonneg_parameter_names(self) -> List[str]:
        return []

    def param_set(self, lr: float = 0.01) -> ParamSet:
        return ParamSet(self, self.nonneg_parameter_names(), lr=lr)

    def init_hidden(self, batch: int) -> Hidden:
        raise NotImplementedError

    def step(self, x: torch.Tensor, u: torch.Tensor, w: torch.Tensor, hidden: Hidden):
        raise NotImplementedError

    def recur(self, x_meas: torch.Tensor, u: torch.Tensor, w: torch.Tensor, p_mix: float = 1.0,
              generator: Optional[torch.Generator] = None) -> EncoderResult:
        """Run the recurrence over a measured sequence, feeding back measured or predicted states."""
        batch, length = x_meas.shape
        hidden = self.init_hidden(batch)
        state = x_meas[:, 0:1]
        preds = []
        for i in range(length - 1):
            nxt, hidden = self.step(state, u[:, i:i + 1], w[:, i, :], hidden)
            preds.append(nxt)
            state = _mix(x_meas[:, i + 1:i + 2], nxt, p_mix, generator)
        predictions = torch.cat(preds, dim=1) if preds else x_meas[:, :0]
        return EncoderResult(state, hidden, predictions)

    def encode(self, x_hist: torch.Tensor, u_hist: torch.Tensor, w_hist: torch.Tensor, p_mix: float = 1.0,
               generator: Optional[torch.Generator] = None) -> EncoderResult:
        if x_hist.shape[1] != self.config.encoder_len:
            raise InputError(f"history has {x_hist.shape[1]} records, the encoder needs exactly "
                             f"{self.config.encoder_len}")
        return self.recur(x_hist, u_hist, w_hist, p_mix, generator)

    def decode(self, x0: torch.Tensor, hidden: Hidden, u_plan: torch.Tensor, w_plan: torch.Tensor) -> torch.Tensor:
        """Closed-loop decoding: every step consumes the model's own previous prediction."""
        x = x0
        out = []
        for k in range(u_plan.shape[1]):
            x, hidden = self.step(x, u_plan[:, k:k + 1], w_plan[:, k, :], hidden)
            out.append(x)
        return torch.cat(out, dim=1)

    def rollout_batch(self, batch: WindowBatch) -> torch.Tensor:
        if batch.u_plan.shape[1] != self.config.decoder_len or batch.w_plan.shape[1] != self.config.decoder_len:
            raise InputError(f"planned inputs must have {self.config.decoder_len} steps, got "
                             f"{batch.u_plan.shape[1]} controls and {batch.w_plan.shape[1]} disturbances")
        enc = self.encode(batch.x_hist, batch.u_hist, batch.w_hist)
        return self.decode(enc.x_end, enc.hidden, batch.u_plan, batch.w_plan)

    def forecast(self, batch: WindowBatch) -> np.ndarray:
        with torch.no_grad():
            return as_numpy(self.rollout_batch(batch))


class GruDisturbance(nn.Module):
    def __init__(self, dims: Tuple[int, int, int]):
        super().__init__()
        self.cell = GruCell(dims[0], dims[1])
        self.head = Dense(dims[1], dims[2])

    def init_hidden(self, batch: int) -> torch.Tensor:
        return torch.zeros(batch, self.cell.hidden_size, dtype=DTYPE)

    def forward(self, feats: torch.Tensor, hidden: torch.Tensor):
        h = self.cell(feats, hidden)
        return self.head(h), h


class LookbackDisturbance(nn.Module):
    """Fully connected disturbance model over the last ``window`` feature vectors."""

    def __init__(self, dims: Tuple[int, int, int], window: int):
        super().__init__()
        self.width = dims[0]
        self.window = window
        self.mlp = Mlp((dims[0] * window, dims[1], dims[2]))

    def init_hidden(self, batch: int) -> torch.Tensor:
        return torch.zeros(batch, self.window, self.width, dtype=DTYPE)

    def forward(self, feats: torch.Tensor, hidden: torch.Tensor):
        window = torch.cat([hidden[:, 1:], feats.unsqueeze(1)], dim=1)
        return self.mlp(window.reshape(window.shape[0], -1)), window


def _check_finite(name: str, value: torch.Tensor) -> None:
    if not torch.isfinite(value).all():
        raise PropagationError(f"{name} produced a non-finite output")


class PiModNn(SequenceModel):
    architecture = "pimodnn"

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        self.fnna = Mlp(config.dims_fnna)
        self.fnnb = Mlp(config.dims_fnnb)
        if config.disturbance == "gru":
            self.fnne = GruDisturbance(config.dims_fnne)
        else:
            self.fnne = LookbackDisturbance(config.dims_fnne, config.window_len)
        if config.hard_constraints:
            with torch.no_grad():
                for name, p in self.named_parameters():
                    if name in self.nonneg_parameter_names():
                        p.abs_()

    def nonneg_parameter_names(self) -> List[str]:
        if not self.config.hard_constraints:
            return []
        return [name for name, _ in self.named_parameters()
                if name.startswith(("fnna.", "fnnb.")) and name.endswith(".weight")]

    def init_hidden(self, batch: int) -> torch.Tensor:
        return self.fnne.init_hidden(batch)

    def step(self, x: torch.Tensor, u: torch.Tensor, w: torch.Tensor, hidden: torch.Tensor):
        x_n = (x - self.t_mean) / self.t_std
        feats = torch.cat([x_n, self.normalized_disturbance(w)], dim=1)
        e, hidden = self.fnne(feats, hidden)
        _check_finite("f_NNE", e)
        b = self.fnnb(u / self.config.u_scale_kw)
        _check_finite("f_NNB", b)
        dx = self.fnna(b + e)
        _check_finite("f_NNA", dx)
        return x + dx * self.t_std, hidden


class RecurrentBaseline(SequenceModel):
    """LSTM comparator: same encode/decode contract, no constraints, no modular structure."""

    architecture = "lstm"

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        self.cell = nn.LSTMCell(2 + DISTURBANCE_WIDTH, config.baseline_hidden, dtype=DTYPE)
        self.head = Dense(config.baseline_hidden, 1)

    def init_hidden(self, batch: int):
        h = torch.zeros(batch, self.config.baseline_hidden, dtype=DTYPE)
        return h, h.clone()

    def step(self, x: torch.Tensor, u: torch.Tensor, w: torch.Tensor, hidden):
        x_n = (x - self.t_mean) / self.t_std
        inp = torch.cat([x_n, self.normalized_disturbance(w), u / self.config.u_scale_kw], dim=1)
        h, c = self.cell(inp, hidden)
        dx = self.head(h)
        _check_finite("LSTM", dx)
        return x + dx * self.t_std, (h, c)


ARCHITECTURES = {cls.architecture: cls for cls in (PiModNn, RecurrentBaseline)}


# Functional surface over the classes above, taking telemetry frames.

def encode(model: SequenceModel, history: pd.DataFrame) -> EncoderResult:
    x, u, w = history_tensors(history)
    return model.encode(x, u, w)


def decode_step(model: SequenceModel, x_t, u_t, w_t, hidden: Hidden):
    """One decoder step for a single zone; x/u scalars, w the five disturbance values."""
    x = torch.as_tensor(x_t, dtype=DTYPE).reshape(-1, 1)
    u = torch.as_tensor(u_t, dtype=DTYPE).reshape(-1, 1)
    w = torch.as_tensor(w_t, dtype=DTYPE).reshape(x.shape[0], DISTURBANCE_WIDTH)
    return model.step(x, u, w, hidden)


def _plan_tensors(planned_u, future_w) -> Tuple[torch.Tensor, torch.Tensor]:
    u_plan = torch.as_tensor(np.asarray(planned_u, dtype=float), dtype=DTYPE).reshape(1, -1)
    if isinstance(future_w, pd.DataFrame):
        w = disturbance_array(future_w)
    else:
        w = np.asarray(future_w, dtype=float)
    return u_plan, torch.as_tensor(w, dtype=DTYPE).reshape(1, -1, DISTURBANCE_WIDTH)


def rollout(model: SequenceModel, history: pd.DataFrame, planned_u, future_w) -> np.ndarray:
    x, u, w = history_tensors(history)
    u_plan, w_plan = _plan_tensors(planned_u, future_w)
    return model.forecast(WindowBatch(x, u, w, u_plan, w_plan))[0]


def baseline_rollout(model: RecurrentBaseline, history: pd.DataFrame, planned_u, future_w) -> np.ndarray:
    return rollout(model, history, planned_u, future_w)


def control_gain(model: SequenceModel, x, u, w, hidden: Hidden) -> torch.Tensor:
    """d x(t+1) / d u(t) per batch row, via the tape."""
    x = torch.as_tensor(x, dtype=DTYPE).reshape(-1, 1).detach()
    u = torch.as_tensor(u, dtype=DTYPE).reshape(-1, 1).detach().clone().requires_grad_(True)
    w = torch.as_tensor(w, dtype=DTYPE).reshape(x.shape[0], DISTURBANCE_WIDTH).detach()
    with torch.enable_grad():
        x_next, _ = model.step(x, u, w, detach_hidden(hidden))
        (grad,) = torch.autograd.grad(x_next.sum(), u)
    return grad


def save_checkpoint(model: SequenceModel, path, variant: str, extra: Optional[dict] = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "schema_version": 1,
        "variant": variant,
        "architecture": model.architecture,
        "config": asdict(model.config),
        "stats": model.stats.to_dict() if model.stats else None,
        "params": model.param_set().to_dict(),
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2), encoding="utf-8")


def load_checkpoint(path) -> Tuple[SequenceModel, dict]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise InputError(f"{path} is not a model checkpoint (format {doc.get('format')!r})")
    model = ARCHITECTURES[doc["architecture"]](ModelConfig(**doc["config"]))
    if doc.get("stats"):
        model.set_stats(NormStats.from_dict(doc["stats"]))
    model.param_set().load_dict(doc["params"])
    model.variant = doc.get("variant", model.architecture)
    return model, doc
