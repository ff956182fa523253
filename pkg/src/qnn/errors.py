"""Exception types raised across the package."""


class InvalidArgumentError(ValueError):
    """Bad shapes, empty inputs, non-finite values, bad sizes."""


class QuantStateError(RuntimeError):
    """A quantized code path was asked for but the shadows it needs are missing."""


class AccumulatorOverflowError(OverflowError):
    """The worst-case integer accumulator would not fit in 32 bits."""


class TrainingDivergenceError(FloatingPointError):
    """Loss or gradients became non-finite."""


class ModelFormatError(ValueError):
    """A model file could not be parsed."""

    def __init__(self, message, offset=None, tensor_index=None):
        where = []
        if offset is not None:
            where.append(f"offset {offset}")
        if tensor_index is not None:
            where.append(f"tensor {tensor_index}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.offset = offset
        self.tensor_index = tensor_index
