"""
Dense building blocks on top of torch's reverse-mode tape.

All networks in the workbench are small (tens of units), so everything is kept
in double precision and expressed as row-major 2-D tensors: a batch of B rows
times a feature width. Layers store weights as (in, out) so that a forward pass
reads ``x @ W + b``.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Tuple

import numpy as np
import torch
from torch import nn

from .errors import ContractError, DimensionError, InputError

logger = logging.getLogger(__name__)

DTYPE = torch.float64
FD_STEP = 1e-5
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
PARAMSET_FORMAT = "thermal-workbench/paramset-v1"


def tensor2(data) -> torch.Tensor:
    """Build a finite 2-D double tensor; a flat sequence becomes a single row."""
    t = torch.as_tensor(data, dtype=DTYPE)
    if t.dim() == 0:
        t = t.reshape(1, 1)
    elif t.dim() == 1:
        t = t.unsqueeze(0)
    if t.dim() != 2:
        raise DimensionError(f"expected a 2-D array, got shape {tuple(t.shape)}")
    if not torch.isfinite(t).all():
        raise InputError("tensor entries must be finite")
    return t


def affine(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if x.dim() != 2 or W.dim() != 2:
        raise DimensionError(f"affine expects 2-D x and W, got x{tuple(x.shape)} and W{tuple(W.shape)}")
    if x.shape[1] != W.shape[0]:
        raise DimensionError(f"x{tuple(x.shape)} and W{tuple(W.shape)} do not conform (x cols != W rows)")
    if b.shape[-1] != W.shape[1] or (b.dim() == 2 and b.shape[0] not in (1, x.shape[0])) or b.dim() > 2:
        raise DimensionError(f"b{tuple(b.shape)} cannot broadcast over the rows of x @ W {(x.shape[0], W.shape[1])}")
    return x @ W + b


ACTIVATIONS: Dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    # torch.relu backpropagates 0 at exactly 0
    "relu": torch.relu,
    "tanh": torch.tanh,
    "sigmoid": torch.sigmoid,
}


def activation(x: torch.Tensor, kind: str) -> torch.Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise InputError(f"unknown activation '{kind}', expected one of {sorted(ACTIVATIONS)}") from None
    return fn(x)


def gru_cell(x: torch.Tensor, h: torch.Tensor, params: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """
    One GRU update with gate rows ordered (reset, update, candidate):

        r  = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
        z  = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
        n  = tanh(W_in x + b_in + r * (W_hn h + b_hn))
        h' = (1 - z) * n + z * h

    ``params`` holds weight_ih (3H, in), weight_hh (3H, H), bias_ih (3H,), bias_hh (3H,).
    """
    w_ih, w_hh = params["weight_ih"], params["weight_hh"]
    b_ih, b_hh = params["bias_ih"], params["bias_hh"]
    hidden = w_hh.shape[1]
    if x.shape[-1] != w_ih.shape[1]:
        raise DimensionError(f"GRU input width {x.shape[-1]} != expected {w_ih.shape[1]}")
    if h.shape[-1] != hidden:
        raise DimensionError(f"GRU hidden width {h.shape[-1]} != expected {hidden}")

    gi = affine(x, w_ih.t(), b_ih)
    gh = affine(h, w_hh.t(), b_hh)
    i_r, i_z, i_n = gi.split(hidden, dim=1)
    h_r, h_z, h_n = gh.split(hidden, dim=1)
    r = activation(i_r + h_r, "sigmoid")
    z = activation(i_z + h_z, "sigmoid")
    n = activation(i_n + r * h_n, "tanh")
    return (1.0 - z) * n + z * h


class Dense(nn.Module):
    """Fully connected layer holding W as (in, out)."""

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        bound = 1.0 / math.sqrt(in_features)
        self.weight = nn.Parameter(torch.empty(in_features, out_features, dtype=DTYPE).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(1, out_features, dtype=DTYPE).uniform_(-bound, bound))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return affine(x, self.weight, self.bias)


class Mlp(nn.Module):
    """Dense stack; hidden layers use ``kind``, the last layer stays linear."""

    def __init__(self, dims: Tuple[int, ...], kind: str = "relu"):
        super().__init__()
        if len(dims) < 2:
            raise InputError(f"an MLP needs at least input and output widths, got {dims}")
        self.dims = tuple(dims)
        self.kind = kind
        self.layers = nn.ModuleList(Dense(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = activation(x, self.kind)
        return x


class GruCell(nn.Module):
    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        bound = 1.0 / math.sqrt(hidden_size)
        self.weight_ih = nn.Parameter(torch.empty(3 * hidden_size, input_size, dtype=DTYPE).uniform_(-bound, bound))
        self.weight_hh = nn.Parameter(torch.empty(3 * hidden_size, hidden_size, dtype=DTYPE).uniform_(-bound, bound))
        self.bias_ih = nn.Parameter(torch.empty(3 * hidden_size, dtype=DTYPE).uniform_(-bound, bound))
        self.bias_hh = nn.Parameter(torch.empty(3 * hidden_size, dtype=DTYPE).uniform_(-bound, bound))

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        return gru_cell(x, h, dict(self.named_parameters()))


class ParamSet:
    """
    Named parameters of one module together with their Adam state.

    Parameters listed in ``nonneg_flags`` are clipped to >= 0 after every
    optimizer step. Gradient buffers exist from construction on so that every
    gradient always has the shape of its value.
    """

    def __init__(self, module: nn.Module, nonneg_flags: Iterable[str] = (), lr: float = 0.01):
        self.module = module
        names = dict(module.named_parameters())
        flags = frozenset(nonneg_flags)
        unknown = flags - names.keys()
        if unknown:
            raise InputError(f"non-negativity flags name unknown parameters: {sorted(unknown)}")
        self.nonneg_flags = flags
        for p in names.values():
            if p.grad is None:
                p.grad = torch.zeros_like(p)
        self.optimizer = torch.optim.Adam(module.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)
        self.steps = 0

    def named(self) -> Dict[str, nn.Parameter]:
        return dict(self.module.named_parameters())

    def gradients(self) -> Dict[str, torch.Tensor]:
        return {name: p.grad for name, p in self.named().items()}

    def moments(self, name: str):
        """(first moment, second moment, step) of one parameter; zeros before the first step."""
        p = self.named()[name]
        state = self.optimizer.state.get(p, {})
        if not state:
            return torch.zeros_like(p), torch.zeros_like(p), 0
        return state["exp_avg"], state["exp_avg_sq"], int(state["step"])

    def zero_grad(self) -> None:
        self.optimizer.zero_grad(set_to_none=False)

    def project(self) -> int:
        """Clip flagged parameters to >= 0; returns how many entries were clipped."""
        clipped = 0
        with torch.no_grad():
            for name, p in self.named().items():
                if name in self.nonneg_flags:
                    clipped += int((p < 0).sum())
                    p.clamp_(min=0.0)
        return clipped

    def min_flagged(self) -> float:
        values = [float(p.detach().min()) for name, p in self.named().items() if name in self.nonneg_flags]
        return min(values) if values else math.inf

    def to_dict(self) -> dict:
        return {
            "format": PARAMSET_FORMAT,
            "nonneg_flags": sorted(self.nonneg_flags),
            "params": {
                name: {"shape": list(p.shape), "values": p.detach().reshape(-1).tolist()}
                for name, p in self.named().items()
            },
        }

    def load_dict(self, doc: dict) -> None:
        if doc.get("format") != PARAMSET_FORMAT:
            raise InputError(f"unsupported parameter format {doc.get('format')!r}, expected {PARAMSET_FORMAT!r}")
        named = self.named()
        missing = named.keys() - doc["params"].keys()
        if missing:
            raise InputError(f"parameter document lacks {sorted(missing)}")
        with torch.no_grad():
            for name, p in named.items():
                entry = doc["params"][name]
                if list(p.shape) != list(entry["shape"]):
                    raise DimensionError(f"parameter {name} has shape {list(p.shape)}, document has {entry['shape']}")
                p.copy_(torch.tensor(entry["values"], dtype=DTYPE).reshape(p.shape))
        self.nonneg_flags = frozenset(doc.get("nonneg_flags", ()))


def backward(loss: torch.Tensor) -> None:
    """Populate .grad of every parameter on loss's tape; calls accumulate."""
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        shape = tuple(loss.shape) if isinstance(loss, torch.Tensor) else type(loss).__name__
        raise ContractError(f"backward needs a scalar loss, got {shape}")
    if not loss.requires_grad:
        raise ContractError("loss was not produced by taped operations")
    loss.reshape(()).backward()


def adam_step(params: ParamSet, lr: float) -> ParamSet:
    for group in params.optimizer.param_groups:
        group["lr"] = lr
    params.optimizer.step()
    clipped = params.project()
    if clipped:
        logger.debug(f"projection clipped {clipped} negative entries")
    params.steps += 1
    return params


@dataclass
class GradCheckReport:
    discrepancies: Dict[str, float] = field(default_factory=dict)

    @property
    def max_discrepancy(self) -> float:
        return max(self.discrepancies.values(), default=0.0)

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_discrepancy < tol


def grad_check(model_closure: Callable[[], torch.Tensor], params: ParamSet, step: float = FD_STEP) -> GradCheckReport:
    """
    Compare tape gradients with central finite differences.

    The discrepancy per entry is |analytic - numeric| / max(1, |analytic|, |numeric|),
    and the report keeps the maximum per parameter.
    """
    params.zero_grad()
    backward(model_closure())
    analytic = {name: g.detach().clone().reshape(-1) for name, g in params.gradients().items()}
    params.zero_grad()

    report = GradCheckReport()
    with torch.no_grad():
        for name, p in params.named().items():
            flat = p.detach().view(-1)
            worst = 0.0
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                f_plus = float(model_closure())
                flat[i] = orig - step
                f_minus = float(model_closure())
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                a = float(analytic[name][i])
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
            report.discrepancies[name] = worst
    return report


def as_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()
