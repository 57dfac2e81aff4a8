"""Small fully connected networks in numpy: init, forward/backward, masked SGD.

Inputs are batches of shape (batch, features). Weights are stored as
(out_dim, in_dim) so a layer computes ``x @ W.T + b``. A layer may carry an
``input_perm`` (set by column-permuted sparsification); its input is then
gathered as ``x[:, input_perm]`` before the product.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from suslab.errors import DimensionError, InvariantError
from suslab.sparsity import GROUP

ACTIVATIONS = ("relu", "none")


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str
    input_perm: Optional[np.ndarray] = None

    @property
    def spec(self) -> LayerSpec:
        return LayerSpec(self.weight.shape[1], self.weight.shape[0], self.activation)


@dataclass
class Network:
    layers: list[Layer]
    # number of trailing layers that form the fully connected head; the
    # fc_only victim sparsifies only these
    fc_head: Optional[int] = None
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.fc_head is None:
            self.fc_head = len(self.layers)
        validate_network(self)

    @property
    def head_indices(self) -> list[int]:
        return list(range(len(self.layers) - self.fc_head, len(self.layers)))

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].weight.shape[1]] + [l.weight.shape[0] for l in self.layers]

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def weights(self) -> list[np.ndarray]:
        return [l.weight for l in self.layers]


def validate_network(net: Network) -> None:
    if not net.layers:
        raise DimensionError("network has no layers")
    if not 1 <= net.fc_head <= len(net.layers):
        raise DimensionError(f"fc_head={net.fc_head} outside 1..{len(net.layers)}")
    for k, layer in enumerate(net.layers):
        out_dim, in_dim = layer.weight.shape
        if in_dim % GROUP:
            raise DimensionError(f"layer {k}: in_dim {in_dim} is not divisible by {GROUP}")
        if layer.bias.shape != (out_dim,):
            raise DimensionError(f"layer {k}: bias shape {layer.bias.shape} != ({out_dim},)")
        if layer.activation not in ACTIVATIONS:
            raise InvariantError(f"layer {k}: unknown activation {layer.activation!r}")
        last = k == len(net.layers) - 1
        if last != (layer.activation == "none"):
            raise InvariantError("hidden layers use relu and the final layer emits raw logits")
        if k and net.layers[k - 1].weight.shape[0] != in_dim:
            raise DimensionError(f"layer {k}: in_dim {in_dim} does not chain from layer {k - 1}")


def init_kaiming_uniform(spec: LayerSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    """Kaiming-uniform weights (ReLU gain, fan-in) in [-b, b], b = sqrt(6 / in_dim); zero bias."""
    gen = np.random.default_rng(rng)
    bound = np.sqrt(6.0 / spec.in_dim)
    weight = gen.uniform(-bound, bound, size=(spec.out_dim, spec.in_dim))
    return weight, np.zeros(spec.out_dim)


def build_network(dims: Sequence[int], seed: int, fc_head: Optional[int] = None) -> Network:
    """MLP with ReLU between layers, e.g. dims=[64, 128, 64, 32, 10] gives four layers."""
    if len(dims) < 2:
        raise DimensionError("need at least input and output dims")
    children = np.random.SeedSequence(seed).spawn(len(dims) - 1)
    layers = []
    for k, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        act = "none" if k == len(dims) - 2 else "relu"
        w, b = init_kaiming_uniform(LayerSpec(d_in, d_out, act), children[k])
        layers.append(Layer(w, b, act))
    return Network(layers, fc_head=fc_head)


def with_weights(net: Network, weights: Sequence[np.ndarray]) -> Network:
    """Shallow clone of ``net`` using the given weight matrices (biases shared)."""
    layers = [Layer(w, l.bias, l.activation, l.input_perm) for w, l in zip(weights, net.layers)]
    return Network(layers, fc_head=net.fc_head)


def masked_view(net: Network, masks: Sequence[Optional[np.ndarray]]) -> Network:
    """Network whose weights are ``W ⊙ M`` (layers with a ``None`` mask stay dense)."""
    ws = [
        l.weight if m is None else np.where(m.astype(bool), l.weight, 0.0)
        for l, m in zip(net.layers, masks)
    ]
    return with_weights(net, ws)


@dataclass
class Cache:
    net: Network
    version: int
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]


def forward(net: Network, x) -> tuple[np.ndarray, Cache]:
    h = np.asarray(x, dtype=np.float64)
    single = h.ndim == 1
    h = np.atleast_2d(h)
    if h.shape[1] != net.layers[0].weight.shape[1]:
        raise DimensionError(f"input width {h.shape[1]} != {net.layers[0].weight.shape[1]}")
    inputs, preacts = [], []
    for layer in net.layers:
        if layer.input_perm is not None:
            h = h[:, layer.input_perm]
        inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        preacts.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
    cache = Cache(net, net.version, inputs, preacts)
    return (h[0] if single else h), cache


def logits(net: Network, x) -> np.ndarray:
    return forward(net, x)[0]


def predict(net: Network, x, batch: int = 4096) -> np.ndarray:
    xs = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = [np.argmax(forward(net, xs[i : i + batch])[0], axis=1) for i in range(0, len(xs), batch)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def loss_ce(logit_vec, label: int) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy for one sample and its gradient ``softmax - onehot``."""
    z = np.asarray(logit_vec, dtype=np.float64)
    logp = _log_softmax(z)
    grad = np.exp(logp)
    grad[label] -= 1.0
    return float(-logp[label]), grad


def loss_ce_batch(z: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch and its gradient w.r.t. the logits."""
    logp = _log_softmax(z)
    idx = np.arange(len(labels))
    grad = np.exp(logp)
    grad[idx, labels] -= 1.0
    return float(-logp[idx, labels].mean()), grad / len(labels)


def backward(net: Network, cache: Cache, dlogits) -> list[tuple[np.ndarray, np.ndarray]]:
    """Reverse-mode gradients ``[(dW, db), ...]`` for the batch cached by ``forward``."""
    if cache.net is not net or cache.version != net.version:
        raise InvariantError("stale cache: network changed since forward")
    g = np.atleast_2d(np.asarray(dlogits, dtype=np.float64))
    grads = [None] * len(net.layers)
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        if layer.activation == "relu":
            g = g * (cache.preacts[k] > 0)
        grads[k] = (g.T @ cache.inputs[k], g.sum(axis=0))
        if k:
            g_in = g @ layer.weight
            if layer.input_perm is not None:
                unperm = np.empty_like(g_in)
                unperm[:, layer.input_perm] = g_in
                g_in = unperm
            g = g_in
    return grads


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.05
    seed: int = 0
    momentum: float = 0.0  # 0 -> plain SGD

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise InvariantError(f"invalid training config {self}")
        if not 0.0 <= self.momentum < 1.0:
            raise InvariantError("momentum must lie in [0, 1)")


def masked_step(
    net: Network,
    grads,
    masks: Sequence[Optional[np.ndarray]],
    cfg: TrainConfig,
    velocity: Optional[list] = None,
    train_bias: Optional[Sequence[bool]] = None,
) -> Network:
    """One SGD(+momentum) step that only writes weights where the mask bit is 1.

    ``None`` in ``masks`` means the whole layer is trainable. Masked-out
    weights are left bit-identical and their momentum stays zero. Biases are
    updated unless ``train_bias[k]`` is False. ``velocity`` is a list of
    ``[vW, vb]`` buffers updated in place.
    """
    lr, mu = cfg.learning_rate, cfg.momentum
    for k, (layer, (gw, gb), m) in enumerate(zip(net.layers, grads, masks)):
        keep = None if m is None else np.asarray(m).astype(bool)
        if keep is not None and keep.shape != layer.weight.shape:
            raise DimensionError(f"layer {k}: mask shape {keep.shape} != {layer.weight.shape}")
        if mu and velocity is not None:
            vw, vb = velocity[k]
            vw = mu * vw + gw
            vb = mu * vb + gb
            if keep is not None:
                vw = np.where(keep, vw, 0.0)
            velocity[k] = [vw, vb]
            gw, gb = vw, vb
        stepped = layer.weight - lr * gw
        layer.weight = stepped if keep is None else np.where(keep, stepped, layer.weight)
        if train_bias is None or train_bias[k]:
            layer.bias = layer.bias - lr * gb
    net.version += 1
    return net


def zero_velocity(net: Network) -> list:
    return [[np.zeros_like(l.weight), np.zeros_like(l.bias)] for l in net.layers]


def fit(
    net: Network,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    update_masks: Optional[Sequence[Optional[np.ndarray]]] = None,
    forward_masks: Optional[Sequence[Optional[np.ndarray]]] = None,
    train_bias: Optional[Sequence[bool]] = None,
    project: Optional[Callable[[Network], None]] = None,
) -> list[float]:
    """Minibatch training in place; returns the mean loss of each epoch.

    ``forward_masks`` makes the loss see ``W ⊙ M`` instead of ``W``;
    ``update_masks`` restricts which weights the optimizer may write;
    ``project`` runs after every optimizer step.
    """
    n_layers = len(net.layers)
    update_masks = list(update_masks) if update_masks is not None else [None] * n_layers
    velocity = zero_velocity(net) if cfg.momentum else None
    rng = np.random.default_rng(cfg.seed)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            view = net if forward_masks is None else masked_view(net, forward_masks)
            z, cache = forward(view, x[idx])
            loss, dz = loss_ce_batch(z, y[idx])
            grads = backward(view, cache, dz)
            masked_step(net, grads, update_masks, cfg, velocity, train_bias)
            if project is not None:
                project(net)
            total += loss * len(idx)
        history.append(total / max(len(x), 1))
    return history


def pad_features(x: np.ndarray, multiple: int = GROUP) -> np.ndarray:
    """Append constant-zero features so the width is a multiple of ``multiple``."""
    arr = np.asarray(x, dtype=np.float64)
    extra = (-arr.shape[1]) % multiple
    if not extra:
        return arr
    return np.concatenate([arr, np.zeros((arr.shape[0], extra))], axis=1)
