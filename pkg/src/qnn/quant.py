"""Uniform linear 8-bit quantization and recovery.

A set of values with range ``R = v_max - v_min`` is mapped onto ``S`` integer
steps with the factor ``Q = S / R``.  Codes are computed as

    code = round(Q * x) - round(Q * v_min)

and recovered as ``(code + round(Q * v_min)) / Q``.  Both directions use the
same rounded offset, so the recovered value equals ``round(Q * x) / Q`` and the
offset rounding error never turns into a systematic bias.

Float matrices are plain 2-D ``float64`` numpy arrays.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from qnn.errors import InvalidArgumentError

DEFAULT_SCALE = 255
MAX_CODE_SCALE = 255
RANGE_EPS = 1e-12


class _Diagnostics:
    """Process-wide counters that make silent clamping observable."""

    def __init__(self):
        self._lock = threading.Lock()
        self._counts = {"clamped_inputs": 0, "saturated_codes": 0}

    def add(self, key, n=1):
        if n:
            with self._lock:
                self._counts[key] += int(n)

    def snapshot(self):
        with self._lock:
            return dict(self._counts)

    def reset(self):
        with self._lock:
            for key in self._counts:
                self._counts[key] = 0


diagnostics = _Diagnostics()


def round_half_up(x):
    """Round to the nearest integer, ties toward +inf.

    Works on scalars (returns ``int``) and arrays (returns ``int64``).  The
    fractional part is taken as ``x - floor(x)``, which is exact for floats, so
    values just below a half (e.g. 0.49999999999999994) are not bumped up the
    way ``floor(x + 0.5)`` would do after its own rounding.
    """
    if np.ndim(x) == 0:
        xf = float(x)
        if not math.isfinite(xf):
            raise InvalidArgumentError(f"cannot round non-finite value {xf!r}")
        f = math.floor(xf)
        return int(f) + (1 if xf - f >= 0.5 else 0)
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("cannot round non-finite values")
    f = np.floor(arr)
    return (f + (arr - f >= 0.5)).astype(np.int64)


@dataclass(frozen=True)
class QuantParams:
    """Range, scale and derived factors for quantizing one tensor."""

    v_min: float
    v_max: float
    scale_s: int = DEFAULT_SCALE
    q_factor: float = 0.0
    offset_code: int = 0
    degenerate: bool = False

    @classmethod
    def from_range(cls, v_min, v_max, scale_s=DEFAULT_SCALE):
        v_min = float(v_min)
        v_max = float(v_max)
        if not (math.isfinite(v_min) and math.isfinite(v_max)):
            raise InvalidArgumentError("range endpoints must be finite")
        if v_max < v_min:
            raise InvalidArgumentError(f"v_max {v_max} < v_min {v_min}")
        scale_s = _check_scale(scale_s)
        if v_max - v_min < RANGE_EPS * max(1.0, abs(v_max)):
            return cls(v_min, v_max, scale_s, 0.0, 0, True)
        q = scale_s / (v_max - v_min)
        return cls(v_min, v_max, scale_s, q, round_half_up(q * v_min), False)

    @property
    def range(self):
        return self.v_max - self.v_min


def _check_scale(scale_s):
    if isinstance(scale_s, bool) or int(scale_s) != scale_s or scale_s < 1:
        raise InvalidArgumentError(f"scale_s must be a positive integer, got {scale_s!r}")
    return int(scale_s)


def compute_params(values, scale_s=DEFAULT_SCALE):
    """Quantization parameters covering ``values`` (min/max of the whole set)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise InvalidArgumentError("cannot compute quantization params of an empty set")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("values must be finite")
    return QuantParams.from_range(arr.min(), arr.max(), scale_s)


def quantize_array(values, p):
    """Vectorized quantization returning ``int64`` codes in ``[0, S]``.

    Values outside the parameter range are clamped (and counted).  Not limited
    to 8-bit scales, which is what the wide-code accuracy tests rely on.
    """
    arr = np.asarray(values, dtype=np.float64)
    if p.degenerate:
        return np.zeros(arr.shape, dtype=np.int64)
    outside = np.count_nonzero((arr < p.v_min) | (arr > p.v_max))
    if outside:
        diagnostics.add("clamped_inputs", outside)
        arr = np.clip(arr, p.v_min, p.v_max)
    codes = round_half_up(p.q_factor * arr) - p.offset_code
    # Reachable only through float noise in Q * v_max.
    saturated = np.count_nonzero((codes < 0) | (codes > p.scale_s))
    if saturated:
        diagnostics.add("saturated_codes", saturated)
        codes = np.clip(codes, 0, p.scale_s)
    return codes


def recover_array(codes, p):
    codes = np.asarray(codes, dtype=np.int64)
    if p.degenerate:
        return np.full(codes.shape, p.v_min, dtype=np.float64)
    return (codes + p.offset_code) / p.q_factor


def quantize_value(x, p):
    """Code for a single value."""
    x = float(x)
    if not math.isfinite(x):
        raise InvalidArgumentError(f"cannot quantize non-finite value {x!r}")
    return int(quantize_array(x, p))


def recover_value(code, p):
    if p.degenerate:
        return p.v_min
    return (int(code) + p.offset_code) / p.q_factor


@dataclass(frozen=True, eq=False)
class QuantizedMatrix:
    """8-bit codes of a matrix plus the params that produced them.

    ``codes`` is a read-only ``uint8`` array of shape ``(rows, cols)``.
    """

    codes: np.ndarray
    params: QuantParams

    def __post_init__(self):
        codes = np.array(self.codes, dtype=np.uint8, copy=True)
        if codes.ndim != 2 or codes.size == 0:
            raise InvalidArgumentError(f"codes must be a non-empty 2-D array, got shape {codes.shape}")
        if self.params.scale_s > MAX_CODE_SCALE:
            raise InvalidArgumentError(f"scale_s {self.params.scale_s} does not fit 8-bit codes")
        if int(codes.max()) > self.params.scale_s:
            raise InvalidArgumentError("code exceeds scale_s")
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)

    @property
    def rows(self):
        return self.codes.shape[0]

    @property
    def cols(self):
        return self.codes.shape[1]

    @property
    def shape(self):
        return self.codes.shape

    def shifted(self):
        """Integer operands ``code + offset_code`` (``int64``)."""
        return self.codes.astype(np.int64) + self.params.offset_code

    def same_as(self, other):
        return (
            isinstance(other, QuantizedMatrix)
            and self.params == other.params
            and np.array_equal(self.codes, other.codes)
        )


def as_float_matrix(m, name="matrix"):
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise InvalidArgumentError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} has non-finite entries")
    return arr


def quantize_matrix(m, scale_s=DEFAULT_SCALE, params=None):
    """Quantize a float matrix with params computed from its own entries.

    ``params`` overrides the range, for quantizing against a fixed grid.
    """
    arr = as_float_matrix(m)
    if params is None:
        params = compute_params(arr, scale_s)
    return QuantizedMatrix(quantize_array(arr, params), params)


def recover_matrix(qm):
    return recover_array(qm.codes, qm.params)
