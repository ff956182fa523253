"""Products of independently quantized matrices with integer accumulation.

For ``C = A @ B`` with both operands quantized, each output element is

    C[i, j] = sum_k (a_code[i, k] + z_a) * (b_code[k, j] + z_b) / (Q_a * Q_b)

where ``z`` is the rounded offset code.  The sum is exact in 32-bit integers
provided :func:`check_accumulator_bounds` passes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from qnn.errors import AccumulatorOverflowError, InvalidArgumentError
from qnn.quant import as_float_matrix, recover_matrix

INT32_MAX = 2**31 - 1


@dataclass(frozen=True)
class AccumulatorBound:
    k_dim: int
    max_abs_a: int
    max_abs_b: int
    worst_case: int

    @property
    def valid(self):
        return self.worst_case <= INT32_MAX


def gemm_float(a, b):
    """Reference float64 product."""
    a = as_float_matrix(a, "a")
    b = as_float_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise InvalidArgumentError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _max_shifted(p):
    return max(abs(p.offset_code), abs(p.offset_code + p.scale_s))


def check_accumulator_bounds(aq, bq):
    """Worst-case accumulator magnitude for ``aq @ bq`` (Python ints, no overflow)."""
    if aq.cols != bq.rows:
        raise InvalidArgumentError(f"cannot multiply {aq.shape} by {bq.shape}")
    ma = _max_shifted(aq.params)
    mb = _max_shifted(bq.params)
    k = aq.cols
    return AccumulatorBound(k, ma, mb, k * ma * mb)


def _prepare(aq, bq, wide):
    bound = check_accumulator_bounds(aq, bq)
    if not bound.valid and not wide:
        raise AccumulatorOverflowError(
            f"worst-case accumulator {bound.worst_case} exceeds int32 "
            f"(K={bound.k_dim}, |a''|<={bound.max_abs_a}, |b''|<={bound.max_abs_b}); "
            "pass wide=True for 64-bit accumulation"
        )
    return np.int64 if wide else np.int32


def _degenerate_product(aq, bq):
    return gemm_float(recover_matrix(aq), recover_matrix(bq))


def qgemm_accumulator(aq, bq, wide=False):
    """Integer sums ``sum_k a''[i,k] * b''[k,j]``."""
    acc_t = _prepare(aq, bq, wide)
    return np.matmul(aq.shifted().astype(acc_t), bq.shifted().astype(acc_t))


def qgemm_expanded_accumulator(aq, bq, wide=False):
    """Same sums via ``a'b' + z_b rowsum(a') + z_a colsum(b') + K z_a z_b``.

    Only the first term multiplies codes; 8x8-bit products fit in 16 bits.
    The partial terms are summed in 64-bit since individually they can exceed
    the bound that holds for the total.
    """
    acc_t = _prepare(aq, bq, wide)
    za = aq.params.offset_code
    zb = bq.params.offset_code
    k = aq.cols
    a = aq.codes.astype(np.uint16)
    b = bq.codes.astype(np.uint16)
    core = np.matmul(a.astype(np.int64), b.astype(np.int64))
    row_a = a.sum(axis=1, dtype=np.int64)[:, None]
    col_b = b.sum(axis=0, dtype=np.int64)[None, :]
    total = core + zb * row_a + za * col_b + k * za * zb
    return total.astype(acc_t)


def _finish(acc, aq, bq):
    return acc.astype(np.float64) / (aq.params.q_factor * bq.params.q_factor)


def qgemm(aq, bq, wide=False):
    """Float result of the quantized product ``aq @ bq``.

    Degenerate (constant) operands bypass the integer path and multiply the
    recovered matrices in float.
    """
    if aq.cols != bq.rows:
        raise InvalidArgumentError(f"cannot multiply {aq.shape} by {bq.shape}")
    if aq.params.degenerate or bq.params.degenerate:
        return _degenerate_product(aq, bq)
    return _finish(qgemm_accumulator(aq, bq, wide), aq, bq)


def qgemm_expanded(aq, bq, wide=False):
    """Offset-expanded form of :func:`qgemm`; bit-identical output."""
    if aq.cols != bq.rows:
        raise InvalidArgumentError(f"cannot multiply {aq.shape} by {bq.shape}")
    if aq.params.degenerate or bq.params.degenerate:
        return _degenerate_product(aq, bq)
    return _finish(qgemm_expanded_accumulator(aq, bq, wide), aq, bq)

