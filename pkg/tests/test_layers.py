import math

import numpy as np
import pytest

from qnn.errors import InvalidArgumentError, QuantStateError
from qnn.layers import (
    FcLayer,
    LstmLayer,
    LstmState,
    Model,
    PackedShadow,
    activation,
    fc_forward,
    forward_batch,
    lstm_step,
    model_forward,
    param_count,
    quantize_model,
    quantize_rows,
)
from qnn.qgemm import qgemm
from qnn.quant import quantize_matrix


def bits(a):
    return np.ascontiguousarray(a, dtype=np.float64).view(np.int64)


def small_model(seed=0, layers=2, cells=6, proj=3, input_dim=4, n_classes=5):
    return Model.init_random(seed, input_dim, n_classes, layers, cells, proj)


class TestActivation:
    def test_values(self):
        assert activation("sigmoid", [0.0])[0] == 0.5
        assert activation("tanh", [0.0])[0] == 0.0
        assert activation("softmax", [1.0, 1.0, 1.0, 1.0]).tolist() == [0.25] * 4
        assert activation("identity", [3.0, -2.0]).tolist() == [3.0, -2.0]

    def test_softmax_normalized_and_stable(self):
        x = np.random.default_rng(0).normal(0, 300, (50, 7))
        p = activation("softmax", x)
        assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-12)
        assert np.all(np.isfinite(p))

    def test_sigmoid_matches_logistic(self):
        x = np.linspace(-30, 30, 601)
        assert np.allclose(activation("sigmoid", x), 1 / (1 + np.exp(-x)), rtol=1e-13, atol=1e-15)

    def test_unknown(self):
        with pytest.raises(InvalidArgumentError):
            activation("relu", [0.0])


class TestRowQuantization:
    def test_matches_qgemm_per_row(self):
        rng = np.random.default_rng(1)
        ws = [quantize_matrix(rng.normal(0, s, (5, 7))) for s in (0.3, 1.0, 2.0, 4.0)]
        x = rng.normal(0, 2, (9, 7))
        x[3] = 1.25  # constant row takes the float route
        pack = PackedShadow(ws)
        out = pack.matmul(quantize_rows(x))
        for b in range(x.shape[0]):
            xq = quantize_matrix(x[b][:, None])
            ref = np.concatenate([qgemm(w, xq)[:, 0] for w in ws])
            assert np.array_equal(bits(out[b]), bits(ref))

    def test_degenerate_weights_match_qgemm(self):
        rng = np.random.default_rng(2)
        ws = [quantize_matrix(np.zeros((3, 4))), quantize_matrix(rng.normal(size=(2, 4)))]
        x = rng.normal(size=(3, 4))
        out = PackedShadow(ws).matmul(quantize_rows(x))
        for b in range(3):
            xq = quantize_matrix(x[b][:, None])
            ref = np.concatenate([qgemm(w, xq)[:, 0] for w in ws])
            assert np.array_equal(bits(out[b]), bits(ref))


class TestFcForward:
    def test_zero_weights_give_bias(self):
        layer = FcLayer(np.zeros((3, 4)), np.array([1.0, -2.0, 0.5]), "identity")
        x = np.random.default_rng(3).normal(size=(6, 4))
        assert np.array_equal(fc_forward(layer, x), np.tile(layer.b, (6, 1)))
        layer.quantize()
        assert np.array_equal(fc_forward(layer, x, "quantized"), np.tile(layer.b, (6, 1)))

    def test_constant_input_quantized(self):
        rng = np.random.default_rng(4)
        layer = FcLayer(rng.normal(size=(3, 4)), rng.normal(size=3), "identity")
        layer.quantize()
        x = np.full(4, 0.7)
        w_rec = (layer.w_quant.codes.astype(np.int64) + layer.w_quant.params.offset_code) / layer.w_quant.params.q_factor
        assert np.allclose(fc_forward(layer, x, "quantized"), w_rec @ x + layer.b, rtol=0, atol=1e-14)

    def test_random_layer_within_bound(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            w = rng.uniform(-1, 1, (8, 8))
            layer = FcLayer(w, rng.normal(size=8), "identity")
            layer.quantize()
            x = rng.uniform(-1, 1, 8)
            qa = layer.w_quant.params.q_factor
            qb = 255 / np.ptp(x)
            bound = (0.5 * np.abs(x) / qa + 0.5 * np.abs(w) / qb + 0.25 / (qa * qb)).sum(axis=1)
            err = np.abs(fc_forward(layer, x, "quantized") - fc_forward(layer, x))
            assert np.all(err <= bound)

    def test_missing_shadow(self):
        layer = FcLayer(np.ones((2, 2)), np.zeros(2))
        with pytest.raises(QuantStateError):
            fc_forward(layer, np.ones(2), "quantized")

    def test_bad_width(self):
        with pytest.raises(InvalidArgumentError):
            fc_forward(FcLayer(np.ones((2, 2)), np.zeros(2)), np.ones(3))


def scalar_lstm_step(w, x, c, r):
    """N=1, no projection: every gate from Python floats and the math module."""
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    pre = {g: sum(wx * xv for wx, xv in zip(w["x"][g], x)) + w["r"][g] * r + w["b"][g] for g in "ifco"}
    i, f, o = sig(pre["i"]), sig(pre["f"]), sig(pre["o"])
    g = math.tanh(pre["c"])
    c_new = f * c + i * g
    return o * math.tanh(c_new), c_new


class TestLstmStep:
    def zero_layer(self, cells=4, input_dim=3, proj=2):
        z = lambda *s: np.zeros(s)
        kw = {f"w_{g}x": z(cells, input_dim) for g in "ifco"}
        kw.update({f"w_{g}r": z(cells, proj or cells) for g in "ifco"})
        kw.update({f"b_{g}": z(cells) for g in "ifco"})
        if proj:
            kw["w_rm"] = np.random.default_rng(0).normal(size=(proj, cells))
        return LstmLayer(**kw)

    def test_zero_weights(self):
        layer = self.zero_layer()
        c0 = np.array([1.0, -2.0, 0.5, 0.0])
        r, s = lstm_step(layer, np.ones(3), LstmState(c0, np.zeros(2)))
        assert np.allclose(s.c, 0.5 * c0, rtol=0, atol=1e-15)
        m = 0.5 * np.tanh(0.5 * c0)
        assert np.allclose(r, layer.w_rm @ m, rtol=0, atol=1e-14)

    def test_zero_everything_gives_zero(self):
        layer = self.zero_layer()
        r, s = lstm_step(layer, np.zeros(3), LstmState.zeros(layer))
        assert not r.any() and not s.c.any()
        layer.quantize()
        layer.quantize_enabled = True
        r, s = lstm_step(layer, np.zeros(3), LstmState.zeros(layer), "quantized")
        assert not r.any()

    def test_single_cell_oracle(self):
        rng = np.random.default_rng(6)
        w = {"x": {g: list(rng.normal(size=2)) for g in "ifco"}, "r": {g: rng.normal() for g in "ifco"},
             "b": {g: rng.normal() for g in "ifco"}}
        kw = {f"w_{g}x": np.array([w["x"][g]]) for g in "ifco"}
        kw.update({f"w_{g}r": np.array([[w["r"][g]]]) for g in "ifco"})
        kw.update({f"b_{g}": np.array([w["b"][g]]) for g in "ifco"})
        layer = LstmLayer(**kw)
        state = LstmState.zeros(layer)
        c, r = 0.0, 0.0
        for _ in range(10):
            x = rng.normal(size=2)
            out, state = lstm_step(layer, x, state)
            r, c = scalar_lstm_step(w, x, c, r)
            assert abs(out[0] - r) <= 1e-12 and abs(state.c[0] - c) <= 1e-12

    def test_shape_check(self):
        layer = self.zero_layer()
        with pytest.raises(InvalidArgumentError):
            lstm_step(layer, np.zeros(4), LstmState.zeros(layer))


class TestModelForward:
    def test_uniform_posteriors(self):
        model = Model([], FcLayer(np.zeros((4, 3)), np.zeros(4)), input_dim=3)
        p = model_forward(model, np.random.default_rng(0).normal(size=(5, 3)))
        assert p.tolist() == [[0.25] * 4] * 5

    def test_float_equals_step_composition(self):
        model = small_model()
        xs = np.random.default_rng(7).normal(size=(8, 4))
        states = [LstmState.zeros(l) for l in model.lstm_layers]
        ref = []
        for x in xs:
            h = x
            for k, layer in enumerate(model.lstm_layers):
                h, states[k] = lstm_step(layer, h, states[k])
            ref.append(fc_forward(model.fc, h))
        assert np.allclose(model_forward(model, xs), ref, rtol=0, atol=1e-12)

    def test_quantized_equals_step_composition(self):
        model = quantize_model(small_model(), "quant-all")
        xs = np.random.default_rng(8).normal(size=(8, 4))
        states = [LstmState.zeros(l) for l in model.lstm_layers]
        ref = []
        for x in xs:
            h = x
            for k, layer in enumerate(model.lstm_layers):
                h, states[k] = lstm_step(layer, h, states[k], "quantized")
            ref.append(fc_forward(model.fc, h, "quantized"))
        assert np.allclose(model_forward(model, xs, "quantized"), ref, rtol=0, atol=1e-12)

    def test_unflagged_quantized_is_float(self):
        model = small_model()
        xs = np.random.default_rng(9).normal(size=(3, 10, 4))
        assert np.array_equal(bits(forward_batch(model, xs, "quantized")), bits(forward_batch(model, xs, "float")))

    def test_quant_vs_quant_all_differ_only_in_last_layer(self):
        xs = np.random.default_rng(10).normal(size=(2, 12, 4))
        a = quantize_model(small_model(), "quant")
        b = quantize_model(small_model(), "quant-all")
        pa, ca = forward_batch(a, xs, "quantized", keep=True)
        pb, cb = forward_batch(b, xs, "quantized", keep=True)
        assert np.array_equal(bits(ca["top"]), bits(cb["top"]))
        assert not np.array_equal(pa, pb)
        b.fc.quantize_enabled = False
        assert np.array_equal(bits(forward_batch(b, xs, "quantized")), bits(pa))

    def test_normalized_both_modes(self):
        model = quantize_model(small_model(), "quant-all")
        xs = np.random.default_rng(11).normal(0, 3, (4, 20, 4))
        for mode in ("float", "quantized"):
            assert np.all(np.abs(forward_batch(model, xs, mode).sum(axis=2) - 1) <= 1e-12)

    def test_state_bounds(self):
        model = Model.init_random(1, 4, 3, 1, 5, 0)
        xs = np.random.default_rng(12).normal(0, 5, (2, 50, 4))
        _, cache = forward_batch(model, xs, keep=True)
        lstm = cache["lstm"][0]
        assert np.all(np.abs(lstm["m"]) <= 1)
        t = np.arange(1, 51)[:, None, None]
        assert np.all(np.abs(np.concatenate([lstm["c_prev"][1:], lstm["c_prev"][-1:]])) <= t)

    def test_flagged_without_shadows(self):
        model = small_model()
        model.lstm_layers[0].quantize_enabled = True
        with pytest.raises(QuantStateError):
            model_forward(model, np.zeros((2, 4)), "quantized")

    def test_close_to_float(self):
        model = quantize_model(small_model(), "quant-all")
        xs = np.random.default_rng(13).uniform(-4, 4, (2, 20, 4))
        diff = np.abs(forward_batch(model, xs, "quantized") - forward_batch(model, xs, "float"))
        assert diff.max() < 0.05


class TestQuantizeModel:
    def test_quant_leaves_softmax_float(self):
        model = quantize_model(small_model(), "quant")
        assert all(l.quantize_enabled and l.shadows for l in model.lstm_layers)
        assert not model.fc.quantize_enabled and model.fc.w_quant is None
        assert model.scope() == "quant"

    def test_quant_all_flags_everything(self):
        model = quantize_model(small_model(), "quant-all")
        assert all(l.quantize_enabled for l in model.lstm_layers) and model.fc.quantize_enabled
        assert model.scope() == "quant-all"

    def test_idempotent(self):
        model = quantize_model(small_model(), "quant-all")
        first = {k: v for k, v in model.lstm_layers[1].shadows.items()}
        quantize_model(model, "quant-all")
        assert all(first[k].same_as(v) for k, v in model.lstm_layers[1].shadows.items())

    def test_biases_untouched_and_masters_kept(self):
        model = small_model()
        before = {k: v.copy() for k, v in model.named_params().items()}
        quantize_model(model, "quant-all")
        assert all(np.array_equal(before[k], v) for k, v in model.named_params().items())

    def test_per_gate_params(self):
        model = quantize_model(small_model(), "quant")
        params = {n: s.params for n, s in model.lstm_layers[0].shadows.items()}
        assert len({(p.v_min, p.v_max) for p in params.values()}) == len(params)


def test_param_count_formula():
    for layers, cells, proj in [(1, 3, 2), (2, 8, 0), (3, 5, 4)]:
        model = Model.init_random(0, 7, 4, layers, cells, proj)
        assert model.n_params() == param_count(7, 4, layers, cells, proj)
