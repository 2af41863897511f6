import numpy as np
import pytest
import torch

from thermal_workbench.errors import ContractError, DimensionError, InputError
from thermal_workbench.models import ModelConfig, NormStats, PiModNn
from thermal_workbench.numerics import (DTYPE, Dense, GruCell, Mlp, ParamSet, activation, adam_step, affine,
                                        backward, grad_check, gru_cell, tensor2)


def t(data):
    return torch.tensor(data, dtype=DTYPE)


class TestAffine:
    @pytest.mark.parametrize("x, W, b, expected", [
        ([[1, 2]], [[1, 0], [0, 1]], [[0, 0]], [[1, 2]]),
        ([[1]], [[0]], [[3]], [[3]]),
        ([[2, 3]], [[1], [1]], [[-1]], [[4]]),
    ])
    def test_examples(self, x, W, b, expected):
        np.testing.assert_allclose(affine(t(x), t(W), t(b)).numpy(), expected)

    def test_mismatch_names_operands(self):
        with pytest.raises(DimensionError, match="x.*W"):
            affine(t([[1.0, 2.0, 3.0]]), t([[1.0], [1.0]]), t([[0.0]]))

    def test_bias_must_broadcast(self):
        with pytest.raises(DimensionError):
            affine(t([[1.0, 2.0]]), t([[1.0], [1.0]]), t([[0.0, 0.0]]))

    def test_tensor2_rejects_non_finite(self):
        with pytest.raises(InputError):
            tensor2([1.0, float("nan")])
        assert tensor2([1.0, 2.0]).shape == (1, 2)


class TestActivations:
    def test_examples(self):
        np.testing.assert_array_equal(activation(t([-1.0, 0.0, 2.0]), "relu").numpy(), [0, 0, 2])
        assert float(activation(t([0.0]), "tanh")) == 0.0
        assert float(activation(t([0.0]), "sigmoid")) == 0.5

    def test_relu_gradient_at_zero_is_zero(self):
        x = t([0.0]).requires_grad_(True)
        activation(x, "relu").sum().backward()
        assert float(x.grad) == 0.0

    def test_unknown_kind(self):
        with pytest.raises(InputError, match="relu"):
            activation(t([0.0]), "gelu")


class TestGru:
    def _zero_params(self, width, hidden):
        return {"weight_ih": torch.zeros(3 * hidden, width, dtype=DTYPE),
                "weight_hh": torch.zeros(3 * hidden, hidden, dtype=DTYPE),
                "bias_ih": torch.zeros(3 * hidden, dtype=DTYPE),
                "bias_hh": torch.zeros(3 * hidden, dtype=DTYPE)}

    def test_zero_parameters_halve_hidden(self):
        h = gru_cell(t([[0.3, -1.0]]), t([[0.8]]), self._zero_params(2, 1))
        np.testing.assert_allclose(h.numpy(), [[0.4]])
        h0 = gru_cell(t([[0.3, -1.0]]), t([[0.0]]), self._zero_params(2, 1))
        np.testing.assert_allclose(h0.numpy(), [[0.0]])

    def test_matches_scalar_gate_equations(self):
        rng = np.random.default_rng(3)
        params = {k: t(rng.normal(0, 0.5, size=v.shape)) for k, v in self._zero_params(2, 1).items()}
        x, h = rng.normal(size=2), 0.3
        sig = lambda v: 1.0 / (1.0 + np.exp(-v))
        W, U = params["weight_ih"].numpy(), params["weight_hh"].numpy()
        bi, bh = params["bias_ih"].numpy(), params["bias_hh"].numpy()
        r = sig(W[0] @ x + bi[0] + U[0, 0] * h + bh[0])
        z = sig(W[1] @ x + bi[1] + U[1, 0] * h + bh[1])
        n = np.tanh(W[2] @ x + bi[2] + r * (U[2, 0] * h + bh[2]))
        expected = (1 - z) * n + z * h
        out = gru_cell(t(x.reshape(1, 2)), t([[h]]), params)
        np.testing.assert_allclose(out.numpy(), [[expected]], rtol=1e-12)

    def test_agrees_with_torch_gru_cell(self):
        torch.manual_seed(1)
        ours = GruCell(6, 5)
        ref = torch.nn.GRUCell(6, 5, dtype=DTYPE)
        with torch.no_grad():
            for name, p in ours.named_parameters():
                getattr(ref, name).copy_(p)
        x, h = torch.randn(4, 6, dtype=DTYPE), torch.randn(4, 5, dtype=DTYPE)
        np.testing.assert_allclose(ours(x, h).detach().numpy(), ref(x, h).detach().numpy(), rtol=1e-12)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            gru_cell(t([[1.0]]), t([[0.0]]), self._zero_params(2, 1))


class TestBackward:
    def test_linear_gradient(self):
        layer = Dense(1, 1)
        with torch.no_grad():
            layer.weight.fill_(0.7)
        backward(layer(t([[3.0]])).sum())
        assert float(layer.weight.grad) == pytest.approx(3.0)

    def test_independent_parameter_has_zero_gradient(self):
        net = Mlp((2, 3, 1))
        params = ParamSet(net)
        backward(net.layers[0](t([[1.0, 2.0]])).sum())
        assert torch.count_nonzero(params.gradients()["layers.1.weight"]) == 0
        assert params.gradients()["layers.1.weight"].shape == net.layers[1].weight.shape

    def test_non_scalar_loss(self):
        net = Mlp((2, 1))
        with pytest.raises(ContractError):
            backward(net(t([[1.0, 2.0], [3.0, 4.0]])))

    def test_untaped_loss(self):
        with pytest.raises(ContractError):
            backward(t(1.0))


class TestAdam:
    def test_zero_gradient_leaves_values(self):
        net = Mlp((2, 2, 1))
        params = ParamSet(net)
        before = {k: v.detach().clone() for k, v in params.named().items()}
        adam_step(params, 0.01)
        for name, p in params.named().items():
            torch.testing.assert_close(p.detach(), before[name])

    def test_projection_of_flagged_parameter(self):
        layer = Dense(2, 1)
        with torch.no_grad():
            layer.weight.copy_(t([[-0.3], [0.2]]))
        params = ParamSet(layer, nonneg_flags=["weight"])
        adam_step(params, 0.01)
        np.testing.assert_allclose(layer.weight.detach().numpy(), [[0.0], [0.2]])
        assert params.min_flagged() == 0.0

    @pytest.mark.parametrize("seed", range(20))
    def test_projection_is_idempotent(self, seed):
        torch.manual_seed(seed)
        net = Mlp((3, 5, 4, 1))
        params = ParamSet(net, nonneg_flags=["layers.0.weight", "layers.1.weight", "layers.1.bias"])
        with torch.no_grad():
            for p in net.parameters():
                p.normal_()
        params.project()
        once = {k: v.detach().clone() for k, v in params.named().items()}
        assert params.project() == 0
        for name, p in params.named().items():
            torch.testing.assert_close(p.detach(), once[name], rtol=0, atol=0)
        assert params.min_flagged() >= 0.0

    def test_first_step_magnitude_equals_lr(self):
        layer = Dense(1, 1)
        with torch.no_grad():
            layer.weight.fill_(1.0)
            layer.bias.fill_(0.0)
        params = ParamSet(layer)
        backward(layer(t([[1.0]])).sum())  # dL/dw = 1
        adam_step(params, 0.01)
        assert float(layer.weight) == pytest.approx(0.99, abs=1e-6)
        m, v, step = params.moments("weight")
        assert step == 1
        assert float(m) == pytest.approx(0.1)

    def test_unknown_flag(self):
        with pytest.raises(InputError):
            ParamSet(Dense(1, 1), nonneg_flags=["nope"])


class TestGradCheck:
    def test_linear_model_is_exact(self):
        torch.manual_seed(0)
        layer = Dense(3, 2)
        x = torch.randn(5, 3, dtype=DTYPE)
        report = grad_check(lambda: (layer(x) ** 1).sum(), ParamSet(layer))
        assert report.max_discrepancy < 1e-8

    def test_mlp_tanh(self):
        torch.manual_seed(2)
        net = Mlp((4, 8, 8, 1), kind="tanh")
        x = torch.randn(6, 4, dtype=DTYPE)
        assert grad_check(lambda: (net(x) ** 2).mean(), ParamSet(net)).ok(1e-4)

    def test_gru_over_eight_steps(self):
        torch.manual_seed(4)
        cell = GruCell(6, 16)
        xs = torch.randn(8, 2, 6, dtype=DTYPE)

        def closure():
            h = torch.zeros(2, 16, dtype=DTYPE)
            for x in xs:
                h = cell(x, h)
            return (h ** 2).sum()

        assert grad_check(closure, ParamSet(cell)).max_discrepancy < 1e-4

    def test_one_step_time_stepper(self):
        torch.manual_seed(5)
        model = PiModNn(ModelConfig())
        x = torch.full((3, 1), 22.0, dtype=DTYPE)
        u = t([[1.5], [-2.0], [0.3]])
        w = torch.randn(3, 5, dtype=DTYPE)

        def closure():
            nxt, _ = model.step(x, u, w, model.init_hidden(3))
            return nxt.sum()

        report = grad_check(closure, model.param_set())
        assert report.max_discrepancy < 1e-4
        assert set(report.discrepancies) == set(model.param_set().named())

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("kind", ["linear", "relu", "tanh", "sigmoid", "gru"])
    def test_random_layers(self, kind, seed):
        torch.manual_seed(seed)
        rng = np.random.default_rng(seed)
        n_in, width, batch = (int(v) for v in rng.integers(1, 7, size=3))
        x = torch.randn(batch, n_in, dtype=DTYPE)
        if kind == "gru":
            module = GruCell(n_in, width)
            xs = torch.randn(int(rng.integers(1, 9)), batch, n_in, dtype=DTYPE)

            def closure():
                h = torch.zeros(batch, width, dtype=DTYPE)
                for step_input in xs:
                    h = module(step_input, h)
                return (h ** 2).sum()
        else:
            module = Dense(n_in, width) if kind == "linear" else Mlp((n_in, width, width, 1), kind=kind)

            def closure():
                return (module(x) ** 2).mean()

        assert grad_check(closure, ParamSet(module)).ok(1e-4)

    @pytest.mark.parametrize("seed", range(50))
    def test_random_one_step_time_steppers(self, seed, plant_frame):
        torch.manual_seed(seed)
        rng = np.random.default_rng(seed)
        a, b, e = (int(v) for v in rng.integers(2, 9, size=3))
        model = PiModNn(ModelConfig(dims_fnna=(1, a, 1), dims_fnnb=(1, b, 1), dims_fnne=(6, e, 1),
                                    hard_constraints=bool(seed % 2)))
        model.set_stats(NormStats.from_frame(plant_frame))
        batch = int(rng.integers(1, 5))
        x = t(rng.uniform(15.0, 30.0, size=(batch, 1)))
        u = t(rng.uniform(-10.0, 10.0, size=(batch, 1)))
        angle = rng.uniform(0.0, 2 * np.pi, size=batch)
        w = t(np.column_stack([rng.uniform(10.0, 35.0, batch), rng.uniform(0.0, 900.0, batch),
                               rng.integers(0, 11, batch), np.sin(angle), np.cos(angle)]))
        hidden = t(rng.uniform(-1.0, 1.0, size=(batch, e)))

        def closure():
            nxt, _ = model.step(x, u, w, hidden)
            return nxt.sum()

        assert grad_check(closure, model.param_set()).ok(1e-4)


class TestParamSetDocument:
    def test_round_trip(self):
        torch.manual_seed(0)
        a, b = Mlp((3, 4, 1)), Mlp((3, 4, 1))
        doc = ParamSet(a, ["layers.0.weight"]).to_dict()
        target = ParamSet(b)
        target.load_dict(doc)
        for name, p in a.named_parameters():
            torch.testing.assert_close(p, dict(b.named_parameters())[name])
        assert target.nonneg_flags == {"layers.0.weight"}

    def test_shape_mismatch(self):
        doc = ParamSet(Mlp((3, 4, 1))).to_dict()
        with pytest.raises(DimensionError):
            ParamSet(Mlp((3, 5, 1))).load_dict(doc)

    def test_wrong_format(self):
        with pytest.raises(InputError):
            ParamSet(Mlp((3, 1))).load_dict({"format": "other", "params": {}})
