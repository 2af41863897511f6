"""
Synthetic ground truth: a 2R2C zone model (air node + envelope mass node) with
weather/occupancy generators and an excitation controller for training data.

Heat balance, explicit Euler with internal sub-stepping:

    C_z dT_z/dt = (T_m - T_z)/R_mz + (T_out - T_z)/R_oz + 1000 u + q_occ occ + a_sol solar + q_extra
    C_m dT_m/dt = (T_z - T_m)/R_mz + (T_out - T_m)/R_om
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .errors import InputError

logger = logging.getLogger(__name__)

RHO_AIR = 1.2  # kg/m3
CP_AIR = 1.005  # kJ/(kg K)
OCCUPANCY_CAP = 10
PLAUSIBLE_RANGE = (-20.0, 60.0)

TELEMETRY_COLUMNS = [
    "timestamp", "t_zone_c", "t_out_c", "solar_wm2", "occupancy",
    "u_hvac_kw", "q_sup_m3s", "q_out_m3s", "t_sup_c",
]
EXOGENOUS_COLUMNS = ["t_out_c", "solar_wm2", "occupancy"]


@dataclass(frozen=True)
class PlantParams:
    C_z: float = 3e6
    C_m: float = 4e7
    R_mz: float = 2e-3
    R_oz: float = 8e-3
    R_om: float = 8e-3
    a_sol: float = 2.0
    q_occ: float = 120.0
    noise_sigma: float = 0.05
    dt: float = 900.0
    q_extra: float = 0.0

    def __post_init__(self):
        for name in ("C_z", "C_m", "R_mz", "R_oz", "R_om", "dt"):
            if not getattr(self, name) > 0:
                raise InputError(f"plant parameter {name} must be > 0, got {getattr(self, name)}")
        if self.noise_sigma < 0:
            raise InputError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    @property
    def steps_per_day(self) -> int:
        return int(round(86400 / self.dt))

    def min_time_constant(self) -> float:
        return min(self.R_mz * self.C_z, self.R_oz * self.C_z, self.R_mz * self.C_m, self.R_om * self.C_m)

    def substeps(self) -> int:
        return max(1, math.ceil(self.dt / (self.min_time_constant() / 10.0)))


@dataclass(frozen=True)
class PlantState:
    T_z: float
    T_m: float

    def check_range(self) -> None:
        lo, hi = PLAUSIBLE_RANGE
        for name, value in (("T_z", self.T_z), ("T_m", self.T_m)):
            if not lo <= value <= hi:
                logger.warning(f"plant {name}={value:.2f} C is outside the plausible range {PLAUSIBLE_RANGE}")


@dataclass(frozen=True)
class HvacAction:
    u_hvac_kw: float
    q_sup_m3s: float
    q_out_m3s: float
    t_sup_c: float


@dataclass(frozen=True)
class TelemetryRecord:
    timestamp: str
    t_zone_c: float
    t_out_c: float
    solar_wm2: float
    occupancy: int
    u_hvac_kw: float
    q_sup_m3s: float
    q_out_m3s: float
    t_sup_c: float

    def __post_init__(self):
        if not 0 <= self.occupancy <= OCCUPANCY_CAP:
            raise InputError(f"occupancy {self.occupancy} outside [0, {OCCUPANCY_CAP}] at {self.timestamp}")
        if self.solar_wm2 < 0:
            raise InputError(f"negative solar {self.solar_wm2} at {self.timestamp}")
        if self.q_out_m3s > self.q_sup_m3s + 1e-12:
            raise InputError(f"q_out {self.q_out_m3s} exceeds q_sup {self.q_sup_m3s} at {self.timestamp}")


def thermal_load_kw(q_sup: float, t_sup: float, t_zone: float) -> float:
    """Sensible load delivered by supply air, positive when heating."""
    return RHO_AIR * CP_AIR * q_sup * (t_sup - t_zone)


def plant_step(state: PlantState, u_hvac: float, T_out: float, solar: float, occupancy: float,
               params: PlantParams) -> PlantState:
    inputs = (state.T_z, state.T_m, u_hvac, T_out, solar, occupancy)
    if not all(math.isfinite(v) for v in inputs):
        raise InputError(f"plant_step received non-finite input {inputs}")

    n = params.substeps()
    h = params.dt / n
    t_z, t_m = state.T_z, state.T_m
    gains = 1000.0 * u_hvac + params.q_occ * occupancy + params.a_sol * solar + params.q_extra
    for _ in range(n):
        q_z = (t_m - t_z) / params.R_mz + (T_out - t_z) / params.R_oz + gains
        q_m = (t_z - t_m) / params.R_mz + (T_out - t_m) / params.R_om
        t_z, t_m = t_z + h * q_z / params.C_z, t_m + h * q_m / params.C_m
    new_state = PlantState(t_z, t_m)
    new_state.check_range()
    return new_state


def generate_weather(days: int, seed: int, start: str = "2024-06-01", dt: float = 900.0) -> pd.DataFrame:
    """Diurnal outdoor temperature with seasonal drift, half-sine solar, weekday occupancy."""
    if days < 1:
        raise InputError(f"days must be >= 1, got {days}")
    steps_per_day = int(round(86400 / dt))
    n = days * steps_per_day
    index = pd.date_range(start=pd.Timestamp(start), periods=n, freq=pd.Timedelta(seconds=dt), name="timestamp")
    rng = np.random.default_rng(seed)

    hours = index.hour.to_numpy() + index.minute.to_numpy() / 60.0
    doy = index.dayofyear.to_numpy()
    day = np.arange(n) // steps_per_day

    daily_offset = rng.normal(0.0, 1.5, size=days)[day]
    seasonal = 20.0 + 3.0 * np.sin(2 * np.pi * (doy - 105) / 365.0)
    diurnal = 5.0 * np.sin(2 * np.pi * (hours - 9.0) / 24.0)
    ar = np.zeros(n)
    shocks = rng.normal(0.0, 0.3, size=n)
    for i in range(1, n):
        ar[i] = 0.9 * ar[i - 1] + shocks[i]
    t_out = seasonal + diurnal + daily_offset + ar

    cloud = rng.uniform(0.4, 1.0, size=days)[day]
    solar = 800.0 * cloud * np.clip(np.sin(np.pi * (hours - 6.0) / 12.0), 0.0, None)
    solar[(hours < 6.0) | (hours >= 18.0)] = 0.0

    weekday = index.dayofweek.to_numpy() < 5
    occupied = weekday & (hours >= 8.0) & (hours < 18.0)
    peak = rng.integers(4, OCCUPANCY_CAP + 1, size=days)[day]
    draw = rng.integers(0, 4, size=n)
    occupancy = np.where(occupied, np.clip(peak - draw, 0, OCCUPANCY_CAP), 0)

    return pd.DataFrame({"t_out_c": t_out, "solar_wm2": solar, "occupancy": occupancy.astype(int)}, index=index)


class ExcitationController:
    """
    Thermostat with seeded setpoint dithering, interleaved with free-float
    blocks and constant random-load blocks so the data spans the sanity-check
    load range. Airflow and supply temperature are back-computed from the load.
    """

    MODES = ("thermostat", "free", "random")
    MODE_PROBS = (0.5, 0.2, 0.3)

    def __init__(self, seed: int, u_max: float = 6.0, q_max: float = 0.5, design_delta_t: float = 10.0,
                 q_min_active: float = 0.05, outdoor_fraction: float = 0.3):
        self.rng = np.random.default_rng(seed)
        self.u_max = u_max
        self.q_max = q_max
        self.design_delta_t = design_delta_t
        self.q_min_active = q_min_active
        self.outdoor_fraction = outdoor_fraction
        self._remaining = 0
        self._mode = "free"
        self._setpoint = 22.5
        self._level = 0.0

    def _new_block(self) -> None:
        self._remaining = int(self.rng.integers(4, 17))
        self._mode = self.MODES[int(self.rng.choice(len(self.MODES), p=self.MODE_PROBS))]
        self._setpoint = 22.5 + float(self.rng.uniform(-2.5, 2.5))
        self._level = float(self.rng.uniform(-self.u_max, self.u_max))

    def __call__(self, t_zone: float, timestamp=None) -> HvacAction:
        if self._remaining <= 0:
            self._new_block()
        self._remaining -= 1

        if self._mode == "free":
            u = 0.0
        elif self._mode == "random":
            u = self._level
        else:
            u = float(np.clip(2.5 * (self._setpoint - t_zone), -self.u_max, self.u_max))
        return self.airflow_for(u, t_zone)

    def airflow_for(self, u: float, t_zone: float) -> HvacAction:
        if u == 0.0:
            return HvacAction(0.0, 0.0, 0.0, t_zone)
        q_sup = float(np.clip(abs(u) / (RHO_AIR * CP_AIR * self.design_delta_t), self.q_min_active, self.q_max))
        t_sup = t_zone + u / (RHO_AIR * CP_AIR * q_sup)
        return HvacAction(u, q_sup, self.outdoor_fraction * q_sup, t_sup)


Policy = Callable[[float, pd.Timestamp], HvacAction]


def _as_exogenous_frame(exogenous: Union[pd.DataFrame, Mapping[str, Sequence]]) -> pd.DataFrame:
    if isinstance(exogenous, pd.DataFrame):
        frame = exogenous
    else:
        lengths = {key: len(values) for key, values in exogenous.items()}
        if len(set(lengths.values())) > 1:
            raise InputError(f"exogenous series lengths differ: {lengths}")
        data = dict(exogenous)
        index = pd.DatetimeIndex(data.pop("timestamp"), name="timestamp")
        frame = pd.DataFrame(data, index=index)
    missing = set(EXOGENOUS_COLUMNS) - set(frame.columns)
    if missing:
        raise InputError(f"exogenous series lacks {sorted(missing)}")
    return frame


def simulate(params: PlantParams, initial: PlantState, exogenous, policy: Policy, seed: int = 0,
             return_states: bool = False):
    """
    Closed-loop run. Each record holds the measured temperature at the start of
    the step together with the action and disturbances applied during it.
    """
    frame = _as_exogenous_frame(exogenous)
    rng = np.random.default_rng(seed)
    state = initial
    records: List[TelemetryRecord] = []
    states: List[PlantState] = []

    for ts, t_out, solar, occ in zip(frame.index, frame["t_out_c"].to_numpy(), frame["solar_wm2"].to_numpy(),
                                     frame["occupancy"].to_numpy()):
        noise = rng.normal(0.0, params.noise_sigma) if params.noise_sigma > 0 else 0.0
        measured = state.T_z + noise
        action = policy(measured, ts)
        records.append(TelemetryRecord(
            timestamp=pd.Timestamp(ts).isoformat(),
            t_zone_c=float(measured),
            t_out_c=float(t_out),
            solar_wm2=float(solar),
            occupancy=int(occ),
            u_hvac_kw=float(action.u_hvac_kw),
            q_sup_m3s=float(action.q_sup_m3s),
            q_out_m3s=float(action.q_out_m3s),
            t_sup_c=float(action.t_sup_c),
        ))
        states.append(state)
        state = plant_step(state, action.u_hvac_kw, float(t_out), float(solar), float(occ), params)

    if return_states:
        return records, states
    return records


def records_to_frame(records: Sequence[TelemetryRecord]) -> pd.DataFrame:
    frame = pd.DataFrame([asdict(r) for r in records], columns=TELEMETRY_COLUMNS)
    frame["timestamp"] = pd.to_datetime(frame["timestamp"])
    return frame.set_index("timestamp")


def states_to_frame(states: Sequence[PlantState], index: pd.DatetimeIndex) -> pd.DataFrame:
    return pd.DataFrame({"t_zone_true_c": [s.T_z for s in states], "t_mass_c": [s.T_m for s in states]},
                        index=index)


def generate_dataset(params: PlantParams, days: int, seed: int, start: str = "2024-06-01",
                     initial: Optional[PlantState] = None, return_states: bool = False):
    """Weather + excitation controller + plant: the standard training telemetry."""
    weather = generate_weather(days, seed, start=start, dt=params.dt)
    controller = ExcitationController(seed + 1)
    initial = initial or PlantState(22.0, 22.0)
    records, states = simulate(params, initial, weather, controller, seed=seed + 2, return_states=True)
    frame = records_to_frame(records)
    logger.info(f"generated {len(frame)} telemetry records over {days} days (seed {seed})")
    if return_states:
        return frame, states_to_frame(states, frame.index)
    return frame


def write_telemetry_csv(frame: pd.DataFrame, path) -> None:
    out = frame.reset_index()
    out["timestamp"] = out["timestamp"].map(lambda ts: pd.Timestamp(ts).isoformat())
    out[TELEMETRY_COLUMNS].to_csv(path, index=False, encoding="utf-8")


def read_telemetry_csv(path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, encoding="utf-8")
    except FileNotFoundError:
        raise InputError(f"telemetry file not found: {path}") from None
    if list(frame.columns) != TELEMETRY_COLUMNS:
        raise InputError(f"unexpected telemetry header {list(frame.columns)}, expected {TELEMETRY_COLUMNS}")
    frame["timestamp"] = pd.to_datetime(frame["timestamp"])
    return frame.set_index("timestamp")
