import numpy as np
import pandas as pd
import pytest

from thermal_workbench.errors import InputError
from thermal_workbench.plant import (OCCUPANCY_CAP, TELEMETRY_COLUMNS, HvacAction, PlantParams, PlantState,
                                     TelemetryRecord, generate_dataset, generate_weather, plant_step,
                                     read_telemetry_csv, simulate, thermal_load_kw, write_telemetry_csv)


def idle(t_zone, ts):
    return HvacAction(0.0, 0.0, 0.0, t_zone)


def constant_weather(n, t_out=25.0):
    index = pd.date_range("2024-06-03", periods=n, freq="15min", name="timestamp")
    return pd.DataFrame({"t_out_c": t_out, "solar_wm2": 0.0, "occupancy": 0}, index=index)


class TestPlantStep:
    def test_fixed_point(self):
        state = plant_step(PlantState(20.0, 20.0), 0.0, 20.0, 0.0, 0.0, PlantParams())
        assert state == PlantState(20.0, 20.0)

    def test_single_step_conduction(self):
        params = PlantParams(C_z=2e6, R_oz=0.005, R_mz=1e9, R_om=1e9, noise_sigma=0.0, dt=900.0)
        assert params.substeps() == 1
        state = plant_step(PlantState(20.0, 20.0), 0.0, 30.0, 0.0, 0.0, params)
        assert state.T_z == pytest.approx(20.9)
        assert state.T_m == pytest.approx(20.0)

    def test_heating_raises_zone(self):
        base = plant_step(PlantState(21.0, 21.0), 0.0, 21.0, 0.0, 0.0, PlantParams())
        heated = plant_step(PlantState(21.0, 21.0), 2.0, 21.0, 0.0, 0.0, PlantParams())
        assert heated.T_z > base.T_z

    def test_non_finite_input(self):
        with pytest.raises(InputError):
            plant_step(PlantState(20.0, 20.0), float("nan"), 20.0, 0.0, 0.0, PlantParams())

    def test_invalid_parameters(self):
        with pytest.raises(InputError):
            PlantParams(C_z=0.0)

    def test_thermal_load_sign(self):
        assert thermal_load_kw(0.5, 30.0, 20.0) == pytest.approx(6.03)
        assert thermal_load_kw(0.5, 15.0, 20.0) < 0


class TestSimulate:
    def test_free_float_converges_monotonically(self):
        params = PlantParams(noise_sigma=0.0)
        records = simulate(params, PlantState(20.0, 20.0), constant_weather(400), idle)
        temps = np.array([r.t_zone_c for r in records])
        assert np.all(np.diff(temps) >= -1e-12)
        assert temps[-1] < 25.0
        assert temps[-1] > temps[0]

    def test_record_count(self):
        frame = generate_dataset(PlantParams(), days=7, seed=1)
        assert len(frame) == 672
        assert list(frame.reset_index().columns) == TELEMETRY_COLUMNS

    def test_seed_determinism(self):
        a = generate_dataset(PlantParams(), days=2, seed=3)
        b = generate_dataset(PlantParams(), days=2, seed=3)
        c = generate_dataset(PlantParams(), days=2, seed=4)
        pd.testing.assert_frame_equal(a, b)
        assert not a["t_zone_c"].equals(c["t_zone_c"])

    def test_returns_true_states(self):
        frame, states = generate_dataset(PlantParams(noise_sigma=0.0), days=1, seed=0, return_states=True)
        np.testing.assert_allclose(frame["t_zone_c"].to_numpy(), states["t_zone_true_c"].to_numpy())

    def test_mismatched_series(self):
        exogenous = {
            "timestamp": pd.date_range("2024-06-03", periods=3, freq="15min"),
            "t_out_c": [20.0, 21.0],
            "solar_wm2": [0.0, 0.0, 0.0],
            "occupancy": [0, 0, 0],
        }
        with pytest.raises(InputError, match="lengths"):
            simulate(PlantParams(), PlantState(20.0, 20.0), exogenous, idle)

    def test_missing_columns(self):
        with pytest.raises(InputError):
            simulate(PlantParams(), PlantState(20.0, 20.0), constant_weather(3).drop(columns="solar_wm2"), idle)


class TestExcitationData:
    @pytest.fixture(scope="class")
    def month(self):
        return generate_dataset(PlantParams(), days=30, seed=0)

    def test_spans_check_levels(self, month):
        assert month["u_hvac_kw"].min() <= -4.0
        assert month["u_hvac_kw"].max() >= 4.0

    def test_airflows_consistent(self, month):
        assert (month["q_out_m3s"] <= month["q_sup_m3s"] + 1e-12).all()
        active = month["u_hvac_kw"] != 0.0
        implied = 1.2 * 1.005 * month["q_sup_m3s"] * (month["t_sup_c"] - month["t_zone_c"])
        np.testing.assert_allclose(implied[active], month["u_hvac_kw"][active], rtol=1e-9, atol=1e-9)

    def test_free_float_rows_have_no_airflow(self, month):
        idle_rows = month[month["u_hvac_kw"] == 0.0]
        assert len(idle_rows) > 0
        assert (idle_rows["q_sup_m3s"] == 0.0).all()
        np.testing.assert_allclose(idle_rows["t_sup_c"], idle_rows["t_zone_c"])


class TestWeather:
    def test_solar_and_occupancy_schedule(self):
        weather = generate_weather(7, seed=0)
        assert (weather.at_time("00:00")["solar_wm2"] == 0.0).all()
        assert (weather.at_time("03:00")["occupancy"] == 0).all()
        assert weather["occupancy"].max() <= OCCUPANCY_CAP
        assert (weather["solar_wm2"] >= 0.0).all()

    def test_weekend_is_empty(self):
        weather = generate_weather(2, seed=0, start="2024-06-01")  # Saturday
        assert (weather["occupancy"] == 0).all()

    def test_rejects_zero_days(self):
        with pytest.raises(InputError):
            generate_weather(0, seed=0)


class TestTelemetryFiles:
    def test_csv_round_trip(self, tmp_path, plant_frame):
        path = tmp_path / "telemetry.csv"
        write_telemetry_csv(plant_frame, path)
        back = read_telemetry_csv(path)
        pd.testing.assert_frame_equal(back, plant_frame, check_freq=False)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("time,temp\n2024-06-01T00:00:00,20\n", encoding="utf-8")
        with pytest.raises(InputError, match="header"):
            read_telemetry_csv(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            read_telemetry_csv(tmp_path / "nope.csv")

    def test_record_validation(self):
        with pytest.raises(InputError):
            TelemetryRecord("2024-06-01T00:00:00", 21.0, 20.0, 0.0, OCCUPANCY_CAP + 1, 0.0, 0.0, 0.0, 21.0)
        with pytest.raises(InputError):
            TelemetryRecord("2024-06-01T00:00:00", 21.0, 20.0, 0.0, 0, 1.0, 0.1, 0.2, 25.0)
