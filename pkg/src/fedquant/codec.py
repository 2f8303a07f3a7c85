"""Wire format for client updates, uplink bit accounting, and model checkpoints.

Update layout (all integers little-endian)::

    "FQNT" | version u8 | strategy u8 (0 FedAvg, 1 InverseMsqe) | layer_count u16
    per layer:
        bits u8 | count u32 | scale f32 | [msqe f32, InverseMsqe only]
        level indices, `bits` each, packed LSB-first, zero-padded to a byte
    [dataset_size u32, FedAvg only]
    side-band: tensor_count u16, then per tensor
        name_len u8 | name utf-8 | ndim u8 | dims u32 * ndim | values f32

A layer with ``bits == 0`` carries ``count`` raw float32 values instead of
packed indices; the full-precision baseline uses it.
"""

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .errors import CorruptPayload, EncodeError
from .nn import Architecture, Model, quantizable_counts
from .quant import QuantizedTensor

MAGIC = b"FQNT"
VERSION = 1
CHECKPOINT_MAGIC = b"FQCK"
SCALE_BITS = 32
MSQE_BITS = 32


class Strategy(str, Enum):
    FEDAVG = "fedavg"
    INVERSE_MSQE = "msqe"


_STRATEGY_CODE = {Strategy.FEDAVG: 0, Strategy.INVERSE_MSQE: 1}
_CODE_STRATEGY = {v: k for k, v in _STRATEGY_CODE.items()}
_ARCH_CODE = {Architecture.MNIST_CNN: 0, Architecture.CIFAR_CNN: 1}
_CODE_ARCH = {v: k for k, v in _ARCH_CODE.items()}


@dataclass(eq=False)
class RawTensor:
    """Unquantized float32 weights (full-precision uplink)."""

    values: np.ndarray

    bits = 0

    @property
    def count(self):
        return int(self.values.size)

    def __eq__(self, other):
        return isinstance(other, RawTensor) and np.array_equal(self.values, other.values)


@dataclass(eq=False)
class ClientUpdate:
    client_id: int
    strategy: Strategy
    layers: list
    msqe: Optional[list] = None
    dataset_size: Optional[int] = None
    side_band: OrderedDict = field(default_factory=OrderedDict)

    def __eq__(self, other):
        if not isinstance(other, ClientUpdate):
            return NotImplemented
        return (
            self.client_id == other.client_id
            and self.strategy == other.strategy
            and self.layers == other.layers
            and self.msqe == other.msqe
            and self.dataset_size == other.dataset_size
            and list(self.side_band) == list(other.side_band)
            and all(np.array_equal(self.side_band[k], other.side_band[k]) for k in self.side_band)
        )


# ---------------------------------------------------------------------------
# bit packing


def pack_levels(levels, bits) -> bytes:
    levels = np.asarray(levels).astype(np.uint64).ravel()
    if levels.size and int(levels.max()) >= 1 << bits:
        raise EncodeError(f"level index {int(levels.max())} does not fit in {bits} bits")
    shifts = np.arange(bits, dtype=np.uint64)
    bitmat = ((levels[:, None] >> shifts) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bitmat.ravel(), bitorder="little").tobytes()


def unpack_levels(buf, count, bits) -> np.ndarray:
    raw = np.frombuffer(buf, dtype=np.uint8)
    bitmat = np.unpackbits(raw, bitorder="little", count=count * bits).reshape(count, bits)
    shifts = np.arange(bits, dtype=np.uint64)
    return (bitmat.astype(np.uint64) << shifts).sum(axis=1, dtype=np.uint64)


def packed_size(count, bits) -> int:
    return (count * bits + 7) // 8


# ---------------------------------------------------------------------------
# updates


def _check_update(update):
    strategy = Strategy(update.strategy)
    if strategy is Strategy.INVERSE_MSQE:
        if update.dataset_size is not None:
            raise EncodeError("InverseMsqe updates must not carry a dataset size")
        if update.msqe is None or len(update.msqe) != len(update.layers):
            raise EncodeError("InverseMsqe updates need one msqe value per layer")
    else:
        if update.dataset_size is None:
            raise EncodeError("FedAvg updates need a dataset size")
        if update.msqe is not None:
            raise EncodeError("FedAvg updates do not carry msqe values")
    if len(update.layers) > 0xFFFF:
        raise EncodeError("too many layers")
    return strategy


def encode(update: ClientUpdate) -> bytes:
    strategy = _check_update(update)
    out = [MAGIC, struct.pack("<BBH", VERSION, _STRATEGY_CODE[strategy], len(update.layers))]
    for i, layer in enumerate(update.layers):
        if isinstance(layer, RawTensor):
            out.append(struct.pack("<BIf", 0, layer.count, 0.0))
        else:
            if not 1 <= layer.bits <= 32:
                raise EncodeError(f"layer {i}: bits {layer.bits} out of range")
            out.append(struct.pack("<BIf", layer.bits, layer.count, layer.scale))
        if strategy is Strategy.INVERSE_MSQE:
            out.append(struct.pack("<f", update.msqe[i]))
        if isinstance(layer, RawTensor):
            out.append(np.asarray(layer.values, dtype="<f4").tobytes())
        else:
            out.append(pack_levels(layer.levels, layer.bits))
    if strategy is Strategy.FEDAVG:
        out.append(struct.pack("<I", update.dataset_size))
    out.append(struct.pack("<H", len(update.side_band)))
    for name, arr in update.side_band.items():
        key = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack(f"<B{len(key)}sB{arr.ndim}I", len(key), key, arr.ndim, *arr.shape))
        out.append(arr.astype("<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CorruptPayload(f"truncated payload at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes, client_id: int = 0) -> ClientUpdate:
    """Inverse of :func:`encode`.  The client id travels outside the payload."""
    r = _Reader(data)
    if bytes(r.take(4)) != MAGIC:
        raise CorruptPayload("bad magic")
    version, code, n_layers = r.unpack("<BBH")
    if version != VERSION:
        raise CorruptPayload(f"unsupported version {version}")
    if code not in _CODE_STRATEGY:
        raise CorruptPayload(f"unknown strategy code {code}")
    strategy = _CODE_STRATEGY[code]
    layers, msqe = [], [] if strategy is Strategy.INVERSE_MSQE else None
    for _ in range(n_layers):
        bits, count, scale = r.unpack("<BIf")
        if bits > 32:
            raise CorruptPayload(f"bit width {bits} out of range")
        if msqe is not None:
            msqe.append(r.unpack("<f")[0])
        if bits == 0:
            values = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32)
            layers.append(RawTensor(values))
        else:
            levels = unpack_levels(r.take(packed_size(count, bits)), count, bits)
            layers.append(QuantizedTensor(levels=levels, scale=scale, bits=bits))
    dataset_size = r.unpack("<I")[0] if strategy is Strategy.FEDAVG else None
    side_band = OrderedDict()
    (n_side,) = r.unpack("<H")
    for _ in range(n_side):
        (name_len,) = r.unpack("<B")
        name = bytes(r.take(name_len)).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        side_band[name] = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(r.data):
        raise CorruptPayload(f"{len(r.data) - r.pos} trailing bytes")
    return ClientUpdate(client_id, strategy, layers, msqe, dataset_size, side_band)


# ---------------------------------------------------------------------------
# bit accounting


@dataclass(frozen=True)
class BitBudget:
    quantized_bits: int
    full_precision_bits: int

    @property
    def savings_ratio(self) -> float:
        return self.full_precision_bits / self.quantized_bits


def parse_bitwidths(text) -> list:
    """``"4-2-2-4"`` -> ``[4, 2, 2, 4]``."""
    if isinstance(text, (list, tuple)):
        return [int(b) for b in text]
    try:
        return [int(part) for part in str(text).strip().split("-")]
    except ValueError:
        raise ValueError(f"bad bit-width string {text!r}") from None


def bit_budget(architecture, bitwidths, strategy=Strategy.FEDAVG) -> BitBudget:
    """Uplink bits of one client's quantized weights, counted the way the published savings table counts them.

    Only the quantizable weight tensors plus one 32-bit scale per layer (and
    one 32-bit msqe per layer under InverseMsqe) are counted.
    """
    counts = quantizable_counts(architecture)
    bits = parse_bitwidths(bitwidths)
    if len(bits) != len(counts):
        raise ValueError(f"expected {len(counts)} bit widths, got {len(bits)}")
    quantized = sum(c * b for c, b in zip(counts, bits)) + SCALE_BITS * len(counts)
    if Strategy(strategy) is Strategy.INVERSE_MSQE:
        quantized += MSQE_BITS * len(counts)
    return BitBudget(quantized, sum(counts) * 32)


def full_precision_bits(architecture) -> int:
    return sum(quantizable_counts(architecture)) * 32


def payload_size(architecture, bitwidths, strategy=Strategy.FEDAVG) -> int:
    """Byte length of :func:`encode` output for an update with an empty side-band."""
    strategy = Strategy(strategy)
    counts = quantizable_counts(architecture)
    bits = parse_bitwidths(bitwidths)
    per_layer = 1 + 4 + 4 + (4 if strategy is Strategy.INVERSE_MSQE else 0)
    size = len(MAGIC) + 4
    size += sum(per_layer + packed_size(c, b) for c, b in zip(counts, bits))
    size += 4 if strategy is Strategy.FEDAVG else 0
    return size + 2


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Model) -> None:
    out = [CHECKPOINT_MAGIC, struct.pack("<BBH", VERSION, _ARCH_CODE[model.architecture], len(model.state))]
    for name, arr in model.state.items():
        key = name.encode("utf-8")
        out.append(struct.pack(f"<B{len(key)}sB{arr.ndim}I", len(key), key, arr.ndim, *arr.shape))
        out.append(np.asarray(arr).astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(out))


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if bytes(r.take(4)) != CHECKPOINT_MAGIC:
        raise CorruptPayload(f"{path}: not a checkpoint")
    version, arch, n = r.unpack("<BBH")
    if version != VERSION or arch not in _CODE_ARCH:
        raise CorruptPayload(f"{path}: unsupported checkpoint header")
    state = OrderedDict()
    for _ in range(n):
        (name_len,) = r.unpack("<B")
        name = bytes(r.take(name_len)).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float64).reshape(shape)
    return Model(_CODE_ARCH[arch], state)
