import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from qnn.errors import InvalidArgumentError
from qnn.quant import (
    QuantParams,
    QuantizedMatrix,
    compute_params,
    diagnostics,
    quantize_array,
    quantize_matrix,
    quantize_value,
    recover_array,
    recover_matrix,
    recover_value,
    round_half_up,
)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


class TestRoundHalfUp:
    @pytest.mark.parametrize(
        "x, expected",
        [(0.5, 1), (-127.5, -127), (63.75, 64), (-0.5, 0), (2.4999, 2), (-2.5001, -3)],
    )
    def test_examples(self, x, expected):
        assert round_half_up(x) == expected

    def test_just_below_half_is_not_bumped(self):
        # floor(x + 0.5) would give 1 here because x + 0.5 rounds to 1.0
        assert round_half_up(0.49999999999999994) == 0

    @pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
    def test_rejects_non_finite(self, bad):
        with pytest.raises(InvalidArgumentError):
            round_half_up(bad)

    @given(finite, st.integers(-1000, 1000))
    def test_integer_shift(self, x, k):
        assume(float(x + k) - k == x)  # shift exact in floating point
        assert round_half_up(x + k) == round_half_up(x) + k

    @given(finite, finite)
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert round_half_up(lo) <= round_half_up(hi)

    def test_array_matches_scalar(self):
        xs = np.random.default_rng(0).uniform(-300, 300, 1000)
        xs[:10] = np.arange(10) - 4.5
        assert list(round_half_up(xs)) == [round_half_up(float(x)) for x in xs]


class TestComputeParams:
    def test_symmetric_range(self):
        p = compute_params([-1.0, 0.0, 1.0])
        assert (p.v_min, p.v_max, p.q_factor, p.offset_code) == (-1.0, 1.0, 127.5, -127)
        assert not p.degenerate

    def test_constant_is_degenerate(self):
        assert compute_params([3.0, 3.0]).degenerate

    def test_zero_based_range(self):
        p = compute_params([0.0, 1.0])
        assert p.q_factor == 255.0 and p.offset_code == 0

    def test_relative_epsilon(self):
        assert compute_params([1e6, 1e6 + 1e-7]).degenerate
        assert not compute_params([0.0, 1e-10]).degenerate

    @pytest.mark.parametrize("bad", [[], [1.0, math.nan], [math.inf]])
    def test_rejects_bad_input(self, bad):
        with pytest.raises(InvalidArgumentError):
            compute_params(bad)

    def test_rejects_bad_scale(self):
        with pytest.raises(InvalidArgumentError):
            compute_params([0.0, 1.0], scale_s=0)


class TestScalarQuantization:
    P = compute_params([-1.0, 1.0])

    @pytest.mark.parametrize("x, code", [(1.0, 255), (-1.0, 0), (0.5, 191)])
    def test_quantize(self, x, code):
        assert quantize_value(x, self.P) == code

    def test_recover(self):
        assert recover_value(191, self.P) == pytest.approx(64 / 127.5, abs=1e-15)
        assert recover_value(255, self.P) == pytest.approx(128 / 127.5, abs=1e-15)
        assert recover_value(0, compute_params([0.0, 1.0])) == 0.0

    def test_degenerate(self):
        p = compute_params([2.5, 2.5])
        assert quantize_value(2.5, p) == 0
        assert recover_value(0, p) == 2.5

    def test_out_of_range_clamps_and_counts(self):
        diagnostics.reset()
        assert quantize_value(3.0, self.P) == 255
        assert quantize_value(-3.0, self.P) == 0
        assert diagnostics.snapshot()["clamped_inputs"] == 2


class TestMatrixQuantization:
    def test_codes(self):
        qm = quantize_matrix([[-1.0, 0.0, 1.0]])
        assert qm.codes.tolist() == [[0, 127, 255]]
        assert quantize_matrix([[0.0, 1.0]]).codes.tolist() == [[0, 255]]

    def test_zero_matrix(self):
        qm = quantize_matrix(np.zeros((2, 2)))
        assert qm.params.degenerate
        assert qm.codes.tolist() == [[0, 0], [0, 0]]
        assert np.array_equal(recover_matrix(qm), np.zeros((2, 2)))

    def test_recover_endpoints_exact(self):
        assert recover_matrix(quantize_matrix([[0.0, 1.0]])).tolist() == [[0.0, 1.0]]

    def test_round_trip_bound(self):
        m = np.array([[-1.0, 0.0, 1.0]])
        assert np.all(np.abs(recover_matrix(quantize_matrix(m)) - m) <= 2 / 510)

    def test_immutable(self):
        qm = quantize_matrix([[0.0, 1.0]])
        with pytest.raises(ValueError):
            qm.codes[0, 0] = 3
        with pytest.raises(AttributeError):
            qm.params = None

    def test_rejects_wide_scale(self):
        with pytest.raises(InvalidArgumentError):
            QuantizedMatrix(np.zeros((1, 1)), QuantParams.from_range(0, 1, 1023))

    def test_rejects_bad_matrix(self):
        with pytest.raises(InvalidArgumentError):
            quantize_matrix(np.zeros((0, 3)))
        with pytest.raises(InvalidArgumentError):
            quantize_matrix([[0.0, math.nan]])

    def test_deterministic(self):
        m = np.random.default_rng(1).normal(size=(20, 30))
        assert quantize_matrix(m).same_as(quantize_matrix(m.copy()))


ranges = st.tuples(finite, st.floats(1e-3, 1e4)).map(lambda t: (t[0], t[0] + t[1]))


class TestProperties:
    @settings(max_examples=300)
    @given(ranges, st.floats(0, 1), st.integers(1, 255))
    def test_closure_and_bias_free_recovery(self, rng_, frac, scale):
        lo, hi = rng_
        p = QuantParams.from_range(lo, hi, scale)
        assume(not p.degenerate)
        x = min(hi, lo + frac * (hi - lo))
        code = quantize_value(x, p)
        assert 0 <= code <= scale
        # recovery depends only on round(Q x): offsets cancel exactly
        assert (code + p.offset_code) / p.q_factor == round_half_up(p.q_factor * x) / p.q_factor
        assert abs(recover_value(code, p) - x) <= (hi - lo) / (2 * scale) * (1 + 1e-9)

    @settings(max_examples=300)
    @given(ranges, st.integers(1, 255))
    def test_endpoints(self, rng_, scale):
        lo, hi = rng_
        p = QuantParams.from_range(lo, hi, scale)
        assume(not p.degenerate)
        assert quantize_value(lo, p) == 0
        assert quantize_value(hi, p) == scale

    def test_round_trip_bulk(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            lo = rng.normal(0, 10)
            x = lo + rng.uniform(0, rng.uniform(1e-3, 100), 5000)
            p = compute_params(x)
            err = np.abs(recover_array(quantize_array(x, p), p) - x)
            assert err.max() <= p.range / (2 * 255)

