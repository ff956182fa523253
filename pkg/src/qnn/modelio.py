"""Binary model files.

Layout (every integer little-endian, floats IEEE-754 binary32)::

    magic        4 bytes  b"QNN1"
    version      u32      1
    flags        u32      bit 0: float masters stored for quantized tensors
    n_lstm       u32
    has_fc       u32
    input_dim    u32
    n_classes    u32
    scale_s      u32      default scale for re-quantization
    seed         u32
    phase        u32
    per LSTM layer:  cells u32, proj u32 (0 = none), layer flags u32
    if has_fc:       fc flags u32
    tensor records, in order

Layer flags: bit 0 quantize_enabled, bit 1 shadows stored.

Tensor order per LSTM layer: w_ix w_fx w_cx w_ox w_ir w_fr w_cr w_or, then
w_rm if present, then b_i b_f b_c b_o; for the FC layer: w, then b.  A weight
matrix contributes a float record when masters are stored or the layer has no
shadows, followed by a quantized record when shadows are stored.  Biases are
float records of shape (n, 1).

A record is ``tag u8`` (0 float, 1 quantized), ``rows u32``, ``cols u32``
and then either ``rows*cols`` f32 values, or ``v_min f32, v_max f32,
scale_s u32`` followed by ``rows*cols`` code bytes.  Q and the offset code are
recomputed from the stored range on load.

Floats are stored at 32-bit precision; :func:`snap_to_float32` rounds a model
in memory so that a save/load cycle reproduces it exactly.
"""

from __future__ import annotations

import io
import os
import struct

import numpy as np

from qnn.errors import InvalidArgumentError, ModelFormatError
from qnn.layers import BIASES, PROJECTION, R_WEIGHTS, X_WEIGHTS, FcLayer, LstmLayer, Model
from qnn.quant import QuantizedMatrix, QuantParams, quantize_matrix, recover_matrix

MAGIC = b"QNN1"
VERSION = 1

TAG_FLOAT = 0
TAG_QUANT = 1

FLAG_MASTERS = 1
LAYER_QUANTIZE = 1
LAYER_SHADOWS = 2

_U32 = struct.Struct("<I")


def _lstm_weight_order(layer):
    names = X_WEIGHTS + R_WEIGHTS
    return names + (PROJECTION,) if layer.w_rm is not None else names


def _layer_flags(enabled, has_shadows):
    return (LAYER_QUANTIZE if enabled else 0) | (LAYER_SHADOWS if has_shadows else 0)


def _f32_exact(arr):
    return np.array_equal(arr.astype(np.float32).astype(np.float64), arr)


def snap_to_float32(model):
    """Round masters to float32 values and rebuild existing shadows. In place."""
    for name, arr in model.named_params().items():
        arr[...] = arr.astype(np.float32)
    for layer in model.lstm_layers:
        if layer.shadows:
            layer.quantize(next(iter(layer.shadows.values())).params.scale_s)
    if model.fc is not None and model.fc.w_quant is not None:
        model.fc.quantize(model.fc.w_quant.params.scale_s)
    return model


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def u32(self, v):
        if not 0 <= int(v) < 2**32:
            raise InvalidArgumentError(f"value {v} does not fit u32")
        self.buf.write(_U32.pack(int(v)))

    def float_tensor(self, arr):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        if not np.all(np.isfinite(arr)):
            raise InvalidArgumentError("refusing to write non-finite parameters")
        self.buf.write(bytes([TAG_FLOAT]))
        self.u32(arr.shape[0])
        self.u32(arr.shape[1])
        self.buf.write(arr.astype("<f4").tobytes())

    def quant_tensor(self, qm):
        p = qm.params
        if float(np.float32(p.v_min)) != p.v_min or float(np.float32(p.v_max)) != p.v_max:
            raise InvalidArgumentError("quantization range is not representable in float32; snap the model first")
        self.buf.write(bytes([TAG_QUANT]))
        self.u32(qm.rows)
        self.u32(qm.cols)
        self.buf.write(struct.pack("<ff", p.v_min, p.v_max))
        self.u32(p.scale_s)
        self.buf.write(np.ascontiguousarray(qm.codes, dtype=np.uint8).tobytes())


def encode_model(model, store_masters=True):
    """Serialize to bytes.  See the module docstring for the layout."""
    for name, arr in model.named_params().items():
        if not np.all(np.isfinite(arr)):
            raise InvalidArgumentError(f"refusing to write non-finite parameter {name}")
    if store_masters and not model.masters_present:
        store_masters = False
    w = _Writer()
    w.buf.write(MAGIC)
    w.u32(VERSION)
    w.u32(FLAG_MASTERS if store_masters else 0)
    w.u32(len(model.lstm_layers))
    w.u32(model.fc is not None)
    w.u32(model.input_dim)
    w.u32(model.n_classes)
    w.u32(model.scale_s)
    w.u32(model.seed)
    w.u32(model.phase)
    for layer in model.lstm_layers:
        w.u32(layer.cells)
        w.u32(layer.proj_dim)
        w.u32(_layer_flags(layer.quantize_enabled, bool(layer.shadows)))
    if model.fc is not None:
        w.u32(_layer_flags(model.fc.quantize_enabled, model.fc.w_quant is not None))

    for layer in model.lstm_layers:
        shadows = bool(layer.shadows)
        for name in _lstm_weight_order(layer):
            if store_masters or not shadows:
                w.float_tensor(getattr(layer, name))
            if shadows:
                w.quant_tensor(layer.shadows[name])
        for name in BIASES:
            w.float_tensor(getattr(layer, name))
    if model.fc is not None:
        shadows = model.fc.w_quant is not None
        if store_masters or not shadows:
            w.float_tensor(model.fc.w)
        if shadows:
            w.quant_tensor(model.fc.w_quant)
        w.float_tensor(model.fc.b)
    return w.buf.getvalue()


def save_model(model, destination, store_masters=True):
    """Write ``model`` to a path or binary file object; returns the byte count."""
    data = encode_model(model, store_masters)
    if hasattr(destination, "write"):
        destination.write(data)
    else:
        tmp = f"{os.fspath(destination)}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, destination)
    return len(data)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0
        self.tensor_index = None

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise ModelFormatError(f"truncated file while reading {what}", offset=self.pos,
                                   tensor_index=self.tensor_index)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return _U32.unpack(self.take(4, what))[0]

    def record(self, index, expect_tag, shape, what):
        self.tensor_index = index
        start = self.pos
        tag = self.take(1, what)[0]
        if tag != expect_tag:
            raise ModelFormatError(f"expected tag {expect_tag} for {what}, found {tag}", offset=start,
                                   tensor_index=index)
        rows = self.u32(what)
        cols = self.u32(what)
        if (rows, cols) != shape:
            raise ModelFormatError(f"{what} has shape {(rows, cols)}, expected {shape}", offset=start,
                                   tensor_index=index)
        if tag == TAG_FLOAT:
            values = np.frombuffer(self.take(4 * rows * cols, what), dtype="<f4")
            arr = values.astype(np.float64).reshape(rows, cols)
            if not np.all(np.isfinite(arr)):
                raise ModelFormatError(f"non-finite values in {what}", offset=start, tensor_index=index)
            return arr
        v_min, v_max = struct.unpack("<ff", self.take(8, what))
        scale_s = self.u32(what)
        codes = np.frombuffer(self.take(rows * cols, what), dtype=np.uint8).reshape(rows, cols)
        try:
            params = QuantParams.from_range(v_min, v_max, scale_s)
            return QuantizedMatrix(codes, params)
        except InvalidArgumentError as exc:
            raise ModelFormatError(f"bad quantized tensor {what}: {exc}", offset=start, tensor_index=index) from None


def decode_model(data):
    r = _Reader(bytes(data))
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}", offset=0)
    version = r.u32("version")
    if version != VERSION:
        raise ModelFormatError(f"unsupported version {version}", offset=4)
    flags = r.u32("flags")
    masters = bool(flags & FLAG_MASTERS)
    n_lstm = r.u32("layer count")
    has_fc = r.u32("fc flag")
    input_dim = r.u32("input_dim")
    n_classes = r.u32("n_classes")
    scale_s = r.u32("scale_s")
    seed = r.u32("seed")
    phase = r.u32("phase")
    shapes = [(r.u32("cells"), r.u32("proj"), r.u32("layer flags")) for _ in range(n_lstm)]
    fc_flags = r.u32("fc flags") if has_fc else 0

    index = 0
    all_masters = True

    def weight(shape, layer_flags, what):
        nonlocal index, all_masters
        master = shadow = None
        stored_shadow = bool(layer_flags & LAYER_SHADOWS)
        if masters or not stored_shadow:
            master = r.record(index, TAG_FLOAT, shape, what)
            index += 1
        if stored_shadow:
            shadow = r.record(index, TAG_QUANT, shape, what)
            index += 1
        if master is None:
            all_masters = False
            master = recover_matrix(shadow)
        return master, shadow

    def bias(n, what):
        nonlocal index
        arr = r.record(index, TAG_FLOAT, (n, 1), what)[:, 0]
        index += 1
        return arr

    layers = []
    dim = input_dim
    for k, (cells, proj, lflags) in enumerate(shapes):
        rdim = proj or cells
        kw, shadows = {}, {}
        names = X_WEIGHTS + R_WEIGHTS + ((PROJECTION,) if proj else ())
        for name in names:
            shape = (cells, dim) if name in X_WEIGHTS else (cells, rdim) if name in R_WEIGHTS else (proj, cells)
            kw[name], sh = weight(shape, lflags, f"lstm{k}.{name}")
            if sh is not None:
                shadows[name] = sh
        for name in BIASES:
            kw[name] = bias(cells, f"lstm{k}.{name}")
        layer = LstmLayer(**kw, quantize_enabled=bool(lflags & LAYER_QUANTIZE), shadows=shadows)
        layers.append(layer)
        dim = rdim
    fc = None
    if has_fc:
        w, wq = weight((n_classes, dim), fc_flags, "fc.w")
        b = bias(n_classes, "fc.b")
        fc = FcLayer(w, b, "softmax", bool(fc_flags & LAYER_QUANTIZE), wq)
    r.tensor_index = None
    if r.pos != len(r.data):
        raise ModelFormatError(f"{len(r.data) - r.pos} trailing bytes", offset=r.pos)
    try:
        return Model(layers, fc, input_dim=input_dim, n_classes=n_classes, seed=seed, phase=phase,
                     masters_present=all_masters, scale_s=scale_s)
    except InvalidArgumentError as exc:
        raise ModelFormatError(f"inconsistent model: {exc}") from None


def load_model(source):
    """Read a model from a path or binary file object."""
    if hasattr(source, "read"):
        return decode_model(source.read())
    with open(source, "rb") as fh:
        return decode_model(fh.read())


def payload_sizes(model, store_masters=True):
    """Bytes of float and quantized weight payloads, excluding record headers."""
    float_bytes = quant_bytes = 0
    for layer in model.lstm_layers:
        for name in _lstm_weight_order(layer):
            n = getattr(layer, name).size
            if store_masters or not layer.shadows:
                float_bytes += 4 * n
            if layer.shadows:
                quant_bytes += n
    if model.fc is not None:
        n = model.fc.w.size
        if store_masters or model.fc.w_quant is None:
            float_bytes += 4 * n
        if model.fc.w_quant is not None:
            quant_bytes += n
    return float_bytes, quant_bytes
