"""Federated training with quantized uplinks.

Each round the server ships the full-precision global model to the selected
clients.  A client trains locally with fake-quantized weights and uploads
level indices, per-layer scales and either its dataset size (FedAvg) or its
per-layer mean squared quantization error (inverse-MSQE weighting).
Updates cross the client/server boundary as encoded bytes.
"""

import logging
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import codec
from .codec import ClientUpdate, RawTensor, Strategy
from .data import partition_iid
from .errors import ConfigError, DegenerateTensor, ShapeError
from .nn import (
    QUANTIZABLE,
    Architecture,
    Model,
    SgdConfig,
    batch_slices,
    build_model,
    evaluate,
    loss_and_grads,
    owner_index,
    sgd_step,
)
from .quant import Mode, QuantizedTensor, QuantSpec, ThresholdMode, dequantize, fake_quantize, find_threshold

log = logging.getLogger(__name__)

MSQE_FLOOR = 1e-12
# scale used for an all-zero tensor; its mid-grid levels reconstruct to ~0
DEGENERATE_SCALE = float(np.finfo(np.float32).tiny)


@dataclass
class FederationConfig:
    architecture: Architecture = Architecture.MNIST_CNN
    clients: int = 5
    rounds: int = 15
    client_fraction: float = 1.0
    local_epochs: int = 1
    bitwidths: tuple = (4, 4, 4, 4)
    mode: Mode = Mode.STOCHASTIC
    threshold: ThresholdMode = ThresholdMode.OCTAV
    strategy: Strategy = Strategy.FEDAVG
    full_precision: bool = False
    sgd: SgdConfig = field(default_factory=SgdConfig)
    seed: int = 0
    qat: str = "ste"
    workers: int = 1

    def __post_init__(self):
        self.architecture = Architecture(self.architecture)
        self.mode = Mode(self.mode)
        self.threshold = ThresholdMode(self.threshold)
        self.strategy = Strategy(self.strategy)
        self.bitwidths = tuple(codec.parse_bitwidths(self.bitwidths))
        self.validate()

    def validate(self):
        if self.clients < 1:
            raise ConfigError("clients", "must be >= 1")
        if self.rounds < 0:
            raise ConfigError("rounds", "must be >= 0")
        if not 0 < self.client_fraction <= 1:
            raise ConfigError("client_fraction", "must be in (0, 1]")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs", "must be >= 1")
        if len(self.bitwidths) != len(QUANTIZABLE):
            raise ConfigError("bitwidths", f"need {len(QUANTIZABLE)} entries")
        if any(not 1 <= b <= 32 for b in self.bitwidths):
            raise ConfigError("bitwidths", "each entry must be in [1, 32]")
        if self.qat not in ("projection", "ste"):
            raise ConfigError("qat", "must be 'projection' or 'ste'")
        if self.workers < 1:
            raise ConfigError("workers", "must be >= 1")

    def quant_specs(self):
        if self.full_precision:
            return None
        return [QuantSpec(b, self.mode, self.threshold) for b in self.bitwidths]

    def label(self):
        if self.full_precision:
            return "full_precision"
        bits = "-".join(map(str, self.bitwidths))
        return f"{bits}/{self.threshold.value}/{self.mode.value}"


@dataclass
class RoundMetrics:
    round: int
    strategy: str
    config: str
    train_accuracy: float
    test_accuracy: float
    uplink_bits: int
    wire_bytes: int
    wall_time: float


@dataclass
class FederationResult:
    metrics: list
    model: Model


def client_stream(seed, client_id, round_index):
    """Independent generator for one client in one round."""
    return np.random.default_rng(np.random.SeedSequence([seed, 0, client_id, round_index]))


def _selection_stream(seed, round_index):
    return np.random.default_rng(np.random.SeedSequence([seed, 1, round_index]))


# ---------------------------------------------------------------------------
# client side


def _quantize_layer(w, spec, rng):
    """Project ``w`` onto its grid; returns (values, QuantizedTensor, msqe)."""
    try:
        s = find_threshold(w, spec)
    except DegenerateTensor:
        mid = np.full(w.size, spec.num_levels // 2, dtype=np.uint64)
        qt = QuantizedTensor(levels=mid, scale=DEGENERATE_SCALE, bits=spec.bits)
        return dequantize(qt).reshape(w.shape), qt, 0.0
    # the wire carries a float32 scale; quantize against that exact value
    s = float(np.float32(s))
    values, stats, qt = fake_quantize(w, spec, s, rng)
    return values, qt, stats.msqe


def _project(weights, specs, rng):
    out = []
    for name, spec in zip(QUANTIZABLE, specs):
        out.append(_quantize_layer(weights[name], spec, rng))
    return out


def client_local_train(model, data, sgd, specs, local_epochs=1, rng=None,
                       strategy=Strategy.FEDAVG, client_id=0, qat="ste") -> ClientUpdate:
    """Train a copy of ``model`` on ``data`` and package the uplink update.

    ``specs`` holds one QuantSpec per quantizable layer, or None for a
    full-precision uplink.  ``qat="ste"`` keeps a full-precision master copy,
    runs forward/backward on its quantized image and applies the gradient to
    the master (straight-through).  ``qat="projection"`` instead overwrites
    the weights with their quantized values after every SGD step; with OCTAV
    thresholds this repeatedly re-clips already-quantized weights and
    shrinks them, so it is kept only for comparison.
    """
    strategy = Strategy(strategy)
    rng = np.random.default_rng() if rng is None else rng
    local = model.copy()
    velocity = {}
    master = None
    if specs is not None and qat == "ste":
        master = {name: local.state[name].copy() for name in QUANTIZABLE}
    projected = None
    n = len(data)
    for _ in range(local_epochs):
        order = rng.permutation(n)
        for piece in batch_slices(n, sgd.batch_size):
            idx = order[piece]
            if master is not None:
                for name, (values, _, _) in zip(QUANTIZABLE, _project(master, specs, rng)):
                    local.state[name] = values
            _, grads = loss_and_grads(local, data.images[idx], data.labels[idx])
            if master is not None:
                local.state.update(master)
            sgd_step(local, grads, velocity, sgd)
            if specs is None:
                continue
            if master is not None:
                master = {name: local.state[name] for name in QUANTIZABLE}
            else:
                projected = _project(local.state, specs, rng)
                for name, (values, _, _) in zip(QUANTIZABLE, projected):
                    local.state[name] = values

    if specs is None:
        layers = [RawTensor(local.state[name].astype(np.float32).ravel()) for name in QUANTIZABLE]
        errors = [0.0] * len(layers)
    else:
        if projected is None:
            projected = _project(master if master is not None else local.state, specs, rng)
        layers = [qt for _, qt, _ in projected]
        errors = [float(np.float32(e)) for _, _, e in projected]
    side_band = OrderedDict(
        (k, v.astype(np.float32)) for k, v in local.state.items() if k not in QUANTIZABLE
    )
    if strategy is Strategy.INVERSE_MSQE:
        return ClientUpdate(client_id, strategy, layers, msqe=errors, side_band=side_band)
    return ClientUpdate(client_id, strategy, layers, dataset_size=n, side_band=side_band)


# ---------------------------------------------------------------------------
# server side


def weighted_average(arrays, weights):
    """Sum of ``arrays`` weighted by ``weights / sum(weights)``, in the given order."""
    weights = np.asarray(weights, dtype=np.float64)
    weights = weights / weights.sum()
    out = np.zeros_like(np.asarray(arrays[0], dtype=np.float64))
    for w, a in zip(weights, arrays):
        out += w * np.asarray(a, dtype=np.float64)
    return out


def inverse_msqe_weights(errors, floor=MSQE_FLOOR):
    return 1.0 / np.maximum(np.asarray(errors, dtype=np.float64), floor)


def update_state(update: ClientUpdate, template: Model):
    """Full-precision parameter mapping reconstructed from an update."""
    if len(update.layers) != len(QUANTIZABLE):
        raise ShapeError(f"update has {len(update.layers)} layers, expected {len(QUANTIZABLE)}")
    state = OrderedDict()
    layer_values = {}
    for name, layer in zip(QUANTIZABLE, update.layers):
        shape = template.state[name].shape
        if layer.count != int(np.prod(shape)):
            raise ShapeError(f"{name}: {layer.count} values for shape {shape}")
        if isinstance(layer, RawTensor):
            layer_values[name] = layer.values.astype(np.float64).reshape(shape)
        else:
            layer_values[name] = dequantize(layer).reshape(shape)
    for name, ref in template.state.items():
        if name in layer_values:
            state[name] = layer_values[name]
            continue
        if name not in update.side_band:
            raise ShapeError(f"update lacks parameter {name}")
        value = np.asarray(update.side_band[name], dtype=np.float64)
        if value.shape != ref.shape:
            raise ShapeError(f"{name}: shape {value.shape} != {ref.shape}")
        state[name] = value
    return state


def _ordered(updates):
    return sorted(updates, key=lambda u: u.client_id)


def aggregate_fedavg(updates, template: Model) -> Model:
    """Dataset-size weighted mean of every parameter."""
    updates = _ordered(updates)
    if not updates:
        raise ValueError("no updates to aggregate")
    states = [update_state(u, template) for u in updates]
    sizes = [u.dataset_size for u in updates]
    if any(s is None for s in sizes):
        raise ValueError("FedAvg needs dataset sizes from every client")
    out = OrderedDict((name, weighted_average([s[name] for s in states], sizes)) for name in template.state)
    return Model(template.architecture, out)


def aggregate_inverse_msqe(updates, template: Model, floor=MSQE_FLOOR) -> Model:
    """Per-layer mean weighted by each client's inverse quantization error.

    Biases and BatchNorm tensors use the weights of the quantizable layer
    that owns them (see ``nn.owner_index``).
    """
    updates = _ordered(updates)
    if not updates:
        raise ValueError("no updates to aggregate")
    if any(u.msqe is None for u in updates):
        raise ValueError("inverse-MSQE aggregation needs per-layer errors from every client")
    states = [update_state(u, template) for u in updates]
    per_layer = inverse_msqe_weights([u.msqe for u in updates], floor)  # (clients, layers)
    out = OrderedDict()
    for name in template.state:
        w = per_layer[:, owner_index(name)]
        out[name] = weighted_average([s[name] for s in states], w)
    return Model(template.architecture, out)


def aggregate(updates, template, strategy):
    if Strategy(strategy) is Strategy.INVERSE_MSQE:
        return aggregate_inverse_msqe(updates, template)
    return aggregate_fedavg(updates, template)


def uplink_bits(config: FederationConfig) -> int:
    """Savings-table bits one client uploads per round (weights plus scales)."""
    if config.full_precision:
        return codec.full_precision_bits(config.architecture)
    return codec.bit_budget(config.architecture, config.bitwidths, config.strategy).quantized_bits


# ---------------------------------------------------------------------------
# orchestration


def select_clients(config, round_index):
    k = max(1, int(round(config.client_fraction * config.clients)))
    if k >= config.clients:
        return list(range(config.clients))
    rng = _selection_stream(config.seed, round_index)
    return sorted(int(c) for c in rng.choice(config.clients, size=k, replace=False))


def run_federation(config: FederationConfig, train, test, partition=None, model=None, on_round=None):
    """Run ``config.rounds`` rounds; returns metrics and the final global model."""
    global_model = build_model(config.architecture, config.seed) if model is None else model.copy()
    if partition is None:
        partition = partition_iid(train, config.clients, config.seed)
    if partition.num_clients != config.clients:
        raise ConfigError("clients", f"partition has {partition.num_clients} clients")
    client_data = [train.subset(idx) for idx in partition.client_indices]
    specs = config.quant_specs()
    per_client_bits = uplink_bits(config)
    metrics = []

    def work(cid, round_index, snapshot):
        update = client_local_train(
            snapshot, client_data[cid], config.sgd, specs, config.local_epochs,
            client_stream(config.seed, cid, round_index), config.strategy, cid, config.qat,
        )
        return cid, codec.encode(update)

    for t in range(1, config.rounds + 1):
        t0 = time.perf_counter()
        selected = select_clients(config, t)
        if config.workers > 1:
            with ThreadPoolExecutor(config.workers) as pool:
                payloads = list(pool.map(lambda c: work(c, t, global_model), selected))
        else:
            payloads = [work(c, t, global_model) for c in selected]
        updates = [codec.decode(blob, cid) for cid, blob in payloads]
        global_model = aggregate(updates, global_model, config.strategy)
        m = RoundMetrics(
            round=t,
            strategy=config.strategy.value,
            config=config.label(),
            train_accuracy=evaluate(global_model, train),
            test_accuracy=evaluate(global_model, test),
            uplink_bits=per_client_bits * len(selected),
            wire_bytes=sum(len(blob) for _, blob in payloads),
            wall_time=time.perf_counter() - t0,
        )
        log.info("round %d %s train=%.4f test=%.4f", t, m.config, m.train_accuracy, m.test_accuracy)
        metrics.append(m)
        if on_round is not None:
            on_round(m)
    return FederationResult(metrics, global_model)


CSV_HEADER = "round,strategy,config,train_acc,test_acc,uplink_bits"


def metrics_csv(metrics, comment=None) -> str:
    lines = [f"# {comment}"] if comment else []
    lines.append(CSV_HEADER)
    for m in metrics:
        lines.append(f"{m.round},{m.strategy},{m.config},{m.train_accuracy:.6f},{m.test_accuracy:.6f},{m.uplink_bits}")
    return "\n".join(lines) + "\n"
