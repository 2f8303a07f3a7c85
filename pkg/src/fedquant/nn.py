"""Small numpy CNNs for MNIST and CIFAR-10 with hand-written backprop.

Both architectures are ``conv-bn-relu-pool`` twice followed by
``fc-bn-relu-fc-bn-softmax``.  All arithmetic is float64; the conv stage
runs channels-last internally while inputs and conv weights keep the
usual NCHW / (out, in, kh, kw) layout.  Parameters and
BatchNorm running statistics live together in ``Model.state``, an ordered
name -> array mapping (``"conv1.weight"``, ``"bn1.running_mean"``, ...).
"""

from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import EmptyDataset, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Architecture(str, Enum):
    MNIST_CNN = "mnist_cnn"
    CIFAR_CNN = "cifar_cnn"


_INPUT_SHAPES = {
    Architecture.MNIST_CNN: (1, 28, 28),
    Architecture.CIFAR_CNN: (3, 32, 32),
}

QUANTIZABLE = ("conv1.weight", "conv2.weight", "fc1.weight", "fc2.weight")

# Every non-quantized tensor belongs to the nearest preceding quantizable layer.
_OWNER = {"conv1": 0, "bn1": 0, "conv2": 1, "bn2": 1, "fc1": 2, "bn3": 2, "fc2": 3, "bn4": 3}


def owner_index(name: str) -> int:
    """Index into QUANTIZABLE of the layer that owns parameter ``name``."""
    return _OWNER[name.split(".", 1)[0]]


@dataclass
class SgdConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ---------------------------------------------------------------------------
# layers


class Conv2d:
    """3x3 convolution, stride 1, padding 1, on channels-last input."""

    kind = "Conv2d"

    def __init__(self, name, in_ch, out_ch, k=3):
        self.name, self.in_ch, self.out_ch, self.k = name, in_ch, out_ch, k

    def init(self, state, rng):
        fan_in = self.in_ch * self.k * self.k
        bound = 1.0 / np.sqrt(fan_in)
        state[f"{self.name}.weight"] = rng.uniform(-bound, bound, (self.out_ch, self.in_ch, self.k, self.k))
        state[f"{self.name}.bias"] = np.zeros(self.out_ch)

    def _cols(self, x):
        # (N, H, W, C) -> (N*H*W, k*k*C), column order (i, j, c)
        n, h, w, c = x.shape
        k, p = self.k, self.k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        cols = np.empty((n, h, w, k, k, c))
        for i in range(k):
            for j in range(k):
                cols[:, :, :, i, j, :] = xp[:, i:i + h, j:j + w, :]
        return cols.reshape(n * h * w, k * k * c)

    def forward(self, state, x, train):
        n, h, wd, c = x.shape
        if c != self.in_ch:
            raise ShapeError(f"{self.name}: expected {self.in_ch} channels, got {c}")
        w = state[f"{self.name}.weight"].transpose(0, 2, 3, 1).reshape(self.out_ch, -1)
        cols = self._cols(x)
        out = cols @ w.T + state[f"{self.name}.bias"]
        return out.reshape(n, h, wd, self.out_ch), (x.shape, cols)

    def backward(self, state, cache, dy, need_dx=True):
        (n, h, wd, c), cols = cache
        w = state[f"{self.name}.weight"]
        k = self.k
        dout = dy.reshape(n * h * wd, self.out_ch)
        dw = (dout.T @ cols).reshape(self.out_ch, k, k, c).transpose(0, 3, 1, 2)
        grads = {f"{self.name}.weight": dw, f"{self.name}.bias": dout.sum(axis=0)}
        if not need_dx:
            return None, grads
        # input gradient = same-padded convolution of dy with the flipped,
        # channel-swapped kernel
        w_flip = w[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, -1)
        dx = self._cols(dy) @ w_flip.T
        return dx.reshape(n, h, wd, c), grads


class Linear:
    kind = "Linear"

    def __init__(self, name, in_features, out_features):
        self.name, self.in_features, self.out_features = name, in_features, out_features

    def init(self, state, rng):
        bound = 1.0 / np.sqrt(self.in_features)
        state[f"{self.name}.weight"] = rng.uniform(-bound, bound, (self.out_features, self.in_features))
        state[f"{self.name}.bias"] = np.zeros(self.out_features)

    def forward(self, state, x, train):
        if x.shape[1] != self.in_features:
            raise ShapeError(f"{self.name}: expected {self.in_features} features, got {x.shape[1]}")
        return x @ state[f"{self.name}.weight"].T + state[f"{self.name}.bias"], x

    def backward(self, state, x, dy):
        grads = {f"{self.name}.weight": dy.T @ x, f"{self.name}.bias": dy.sum(axis=0)}
        return dy @ state[f"{self.name}.weight"], grads


class BatchNorm:
    """BatchNorm over the last (channel) axis; statistics pool all other axes."""

    def __init__(self, name, num_features, spatial):
        self.name, self.num_features = name, num_features
        self.kind = "BatchNorm2d" if spatial else "BatchNorm1d"

    def init(self, state, rng):
        f = self.num_features
        state[f"{self.name}.weight"] = np.ones(f)
        state[f"{self.name}.bias"] = np.zeros(f)
        state[f"{self.name}.running_mean"] = np.zeros(f)
        state[f"{self.name}.running_var"] = np.ones(f)

    def forward(self, state, x, train):
        pre = self.name
        gamma, beta = state[f"{pre}.weight"], state[f"{pre}.bias"]
        if not train:
            mean, var = state[f"{pre}.running_mean"], state[f"{pre}.running_var"]
            scale = gamma / np.sqrt(var + BN_EPS)
            return x * scale + (beta - mean * scale), None
        flat = x.reshape(-1, self.num_features)
        m = flat.shape[0]
        mean = flat.mean(axis=0)
        centered = flat - mean
        var = np.einsum("ij,ij->j", centered, centered) / m
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = centered * inv_std
        unbiased = var * m / (m - 1) if m > 1 else var
        state[f"{pre}.running_mean"] = (1 - BN_MOMENTUM) * state[f"{pre}.running_mean"] + BN_MOMENTUM * mean
        state[f"{pre}.running_var"] = (1 - BN_MOMENTUM) * state[f"{pre}.running_var"] + BN_MOMENTUM * unbiased
        y = xhat * gamma + beta
        return y.reshape(x.shape), (xhat, inv_std)

    def backward(self, state, cache, dy):
        xhat, inv_std = cache
        shape = dy.shape
        dy = dy.reshape(-1, self.num_features)
        m = dy.shape[0]
        gamma = state[f"{self.name}.weight"]
        dgamma = np.einsum("ij,ij->j", dy, xhat)
        dbeta = dy.sum(axis=0)
        grads = {f"{self.name}.weight": dgamma, f"{self.name}.bias": dbeta}
        dx = (gamma * inv_std / m) * (m * dy - dbeta - xhat * dgamma)
        return dx.reshape(shape), grads


class ReLU:
    kind = "ReLU"

    def forward(self, state, x, train):
        mask = x > 0
        return x * mask, mask

    def backward(self, state, mask, dy):
        return dy * mask, {}


class MaxPool2d:
    """2x2 max pooling, stride 2, channels-last; ties route to the first max."""

    kind = "MaxPool2d"

    @staticmethod
    def _quads(x):
        return x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2]

    def forward(self, state, x, train):
        a, b, c, d = self._quads(x)
        y = np.maximum(np.maximum(a, b), np.maximum(c, d))
        taken = a == y
        masks = [taken]
        for q in (b, c):
            m = (q == y) & ~taken
            taken = taken | m
            masks.append(m)
        masks.append(~taken)
        return y, (x.shape, masks)

    def backward(self, state, cache, dy):
        shape, masks = cache
        dx = np.zeros(shape)
        for (r, s), m in zip(((0, 0), (0, 1), (1, 0), (1, 1)), masks):
            dx[:, r::2, s::2] = dy * m
        return dx, {}


class Flatten:
    """Channels-last feature map -> (N, C*H*W) in channel-major order."""

    kind = "Flatten"

    def forward(self, state, x, train):
        return x.transpose(0, 3, 1, 2).reshape(x.shape[0], -1), x.shape

    def backward(self, state, shape, dy):
        n, h, w, c = shape
        return dy.reshape(n, c, h, w).transpose(0, 2, 3, 1), {}


def _layer_stack(architecture):
    c, h, _ = _INPUT_SHAPES[architecture]
    flat = 16 * (h // 4) * (h // 4)
    return [
        Conv2d("conv1", c, 16), BatchNorm("bn1", 16, True), ReLU(), MaxPool2d(),
        Conv2d("conv2", 16, 16), BatchNorm("bn2", 16, True), ReLU(), MaxPool2d(),
        Flatten(),
        Linear("fc1", flat, 100), BatchNorm("bn3", 100, False), ReLU(),
        Linear("fc2", 100, 10), BatchNorm("bn4", 10, False),
    ]


# ---------------------------------------------------------------------------
# model


def quantizable_counts(architecture):
    """Element counts of the four quantizable weight tensors."""
    counts = {}
    for layer in _layer_stack(Architecture(architecture)):
        if isinstance(layer, Conv2d):
            counts[layer.name] = layer.out_ch * layer.in_ch * layer.k * layer.k
        elif isinstance(layer, Linear):
            counts[layer.name] = layer.out_features * layer.in_features
    return [counts[name.split(".")[0]] for name in QUANTIZABLE]


class Model:
    def __init__(self, architecture, state=None):
        self.architecture = Architecture(architecture)
        self.layers = _layer_stack(self.architecture)
        self.state = OrderedDict() if state is None else OrderedDict(state)

    @property
    def input_shape(self):
        return _INPUT_SHAPES[self.architecture]

    def trainable_names(self):
        return [k for k in self.state if not k.endswith(("running_mean", "running_var"))]

    def decayed_names(self):
        return [k for k in self.state if k.endswith(".weight") and k.startswith(("conv", "fc"))]

    def copy(self):
        return Model(self.architecture, OrderedDict((k, v.copy()) for k, v in self.state.items()))

    def quantizable_counts(self):
        return [int(self.state[k].size) for k in QUANTIZABLE]


def build_model(architecture, seed=0) -> Model:
    model = Model(architecture)
    rng = np.random.default_rng(seed)
    for layer in model.layers:
        if hasattr(layer, "init"):
            layer.init(model.state, rng)
    return model


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(model: Model, batch, train_mode=False):
    """Return ``(probabilities, cache)``; train mode updates BN running stats."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != model.input_shape:
        raise ShapeError(f"expected batch of shape (N, {', '.join(map(str, model.input_shape))}), got {x.shape}")
    x = x.transpose(0, 2, 3, 1)
    caches = []
    for layer in model.layers:
        x, cache = layer.forward(model.state, x, train_mode)
        caches.append(cache)
    return softmax(x), caches


def cross_entropy(probs, labels) -> float:
    labels = np.asarray(labels)
    p = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(p, 1e-300))))


def backward(model: Model, caches, probs, labels):
    """Gradients of mean cross-entropy w.r.t. every trainable tensor."""
    labels = np.asarray(labels)
    dy = probs.copy()
    dy[np.arange(len(labels)), labels] -= 1.0
    dy /= len(labels)
    grads = {}
    for i in reversed(range(len(model.layers))):
        layer = model.layers[i]
        if i == 0:
            dy, g = layer.backward(model.state, caches[i], dy, need_dx=False)
        else:
            dy, g = layer.backward(model.state, caches[i], dy)
        grads.update(g)
    return grads


def loss_and_grads(model: Model, batch, labels):
    probs, caches = forward(model, batch, train_mode=True)
    return cross_entropy(probs, labels), backward(model, caches, probs, labels)


def sgd_step(model: Model, grads, velocity, config: SgdConfig):
    """One SGD-with-momentum update, in place.

    ``v <- momentum * v + (g + wd * w)``, ``w <- w - lr * v``.  Weight decay
    only touches conv/linear weights.  ``velocity`` is a dict that is filled
    lazily and returned.
    """
    decayed = set(model.decayed_names())
    for name, g in grads.items():
        w = model.state[name]
        if name in decayed and config.weight_decay:
            g = g + config.weight_decay * w
        v = velocity.get(name)
        v = g.copy() if v is None else config.momentum * v + g
        velocity[name] = v
        model.state[name] = w - config.lr * v
    return model, velocity


def batch_slices(n: int, batch_size: int):
    """Minibatch boundaries over ``n`` samples.

    A trailing batch shorter than half ``batch_size`` is merged into the one
    before it; batch-norm statistics over a handful of samples give gradient
    spikes large enough to wreck a client's local model.
    """
    starts = list(range(0, n, batch_size))
    if len(starts) > 1 and n - starts[-1] < batch_size / 2:
        starts.pop()
    return [slice(a, b) for a, b in zip(starts, starts[1:] + [n])]


def predict(model: Model, images, batch_size=500):
    out = []
    for i in range(0, len(images), batch_size):
        probs, _ = forward(model, images[i:i + batch_size], train_mode=False)
        out.append(probs.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model: Model, dataset, batch_size=500) -> float:
    if len(dataset.labels) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    return float(np.mean(predict(model, dataset.images, batch_size) == dataset.labels))


def weight_histogram(model: Model, layer_index: int, num_bins: int):
    """Equal-width histogram of one quantizable weight tensor over [min, max]."""
    if not 0 <= layer_index < len(QUANTIZABLE):
        raise IndexError(f"layer_index must be in [0, {len(QUANTIZABLE) - 1}]")
    w = model.state[QUANTIZABLE[layer_index]].ravel()
    counts, edges = np.histogram(w, bins=num_bins, range=(w.min(), w.max()))
    return edges, counts
