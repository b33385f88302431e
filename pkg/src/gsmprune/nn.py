"""Layers with hand-derived forward/backward passes and the softmax-CE loss.

Kernels are stored unfolded: a fully-connected layer holds W with shape
(p, q), a convolution holds W with shape (kh*kw*r, s). The kernel list of a
:class:`ParamSet` is the parameter collection that saliency, masks and
pruning operate on; biases ride along but are never masked or counted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import tensor
from .errors import ConfigError, DimensionError
from .tensor import DTYPE


@dataclass(frozen=True)
class FullyConnected:
    p: int
    q: int


@dataclass(frozen=True)
class Conv2d:
    h: int
    w: int
    r: int
    s: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool2:
    """2x2 max pooling with stride 2."""


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Union[FullyConnected, Conv2d, ReLU, MaxPool2, Flatten]
KERNEL_LAYERS = (FullyConnected, Conv2d)
_KINDS = {"fc": FullyConnected, "conv": Conv2d, "relu": ReLU,
          "maxpool2": MaxPool2, "flatten": Flatten}
_NAMES = {cls: name for name, cls in _KINDS.items()}


def kernel_shape(layer: Layer) -> tuple[int, int]:
    if isinstance(layer, FullyConnected):
        return (layer.p, layer.q)
    return (layer.h * layer.w * layer.r, layer.s)


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    input_shape: tuple
    num_classes: int
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        out = self.output_shapes()[-1]
        if out != (self.num_classes,):
            raise ConfigError(
                f"model output shape {out} does not match {self.num_classes} classes")

    def output_shapes(self) -> list[tuple]:
        """Per-sample output shape after each layer; raises on a mismatch."""
        shape = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, FullyConnected):
                if shape != (layer.p,):
                    raise ConfigError(f"layer {i}: FC expects ({layer.p},), gets {shape}")
                shape = (layer.q,)
            elif isinstance(layer, Conv2d):
                if len(shape) != 3 or shape[0] != layer.r:
                    raise ConfigError(f"layer {i}: conv expects {layer.r} channels, gets {shape}")
                try:
                    oh = tensor.conv_output_size(shape[1], layer.h, layer.stride, layer.pad)
                    ow = tensor.conv_output_size(shape[2], layer.w, layer.stride, layer.pad)
                except DimensionError as exc:
                    raise ConfigError(f"layer {i}: {exc}") from None
                shape = (layer.s, oh, ow)
            elif isinstance(layer, MaxPool2):
                if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                    raise ConfigError(f"layer {i}: maxpool needs even spatial dims, gets {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif isinstance(layer, Flatten):
                shape = (math.prod(shape),)
            shapes.append(shape)
        return shapes

    @property
    def kernel_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, KERNEL_LAYERS)]

    def kernel_shapes(self) -> list[tuple[int, int]]:
        return [kernel_shape(self.layers[i]) for i in self.kernel_layers]

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            entry = {"kind": _NAMES[type(layer)]}
            entry.update(vars(layer))
            layers.append(entry)
        return {"name": self.name, "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "layers": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        layers = []
        for entry in d["layers"]:
            entry = dict(entry)
            layers.append(_KINDS[entry.pop("kind")](**entry))
        return cls(layers, tuple(d["input_shape"]), int(d["num_classes"]), d.get("name", "custom"))


def lenet_300_100() -> ModelSpec:
    return ModelSpec(
        [Flatten(), FullyConnected(784, 300), ReLU(), FullyConnected(300, 100), ReLU(),
         FullyConnected(100, 10)],
        (1, 28, 28), 10, name="lenet-300-100")


def lenet5() -> ModelSpec:
    # Caffe LeNet: no nonlinearity after the convolutions, ReLU after fc1.
    return ModelSpec(
        [Conv2d(5, 5, 1, 20), MaxPool2(), Conv2d(5, 5, 20, 50), MaxPool2(), Flatten(),
         FullyConnected(800, 500), ReLU(), FullyConnected(500, 10)],
        (1, 28, 28), 10, name="lenet-5")


def mlp(dims: list[int], input_shape: tuple | None = None) -> ModelSpec:
    """ReLU MLP with layer widths ``dims`` (input first, classes last)."""
    layers: list = []
    if input_shape is not None and len(input_shape) > 1:
        layers.append(Flatten())
    for i, (p, q) in enumerate(zip(dims[:-1], dims[1:])):
        if i:
            layers.append(ReLU())
        layers.append(FullyConnected(p, q))
    return ModelSpec(layers, input_shape or (dims[0],), dims[-1], name="mlp")


MODELS = {"lenet-300-100": lenet_300_100, "lenet-5": lenet5}


@dataclass
class ParamSet:
    kernels: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    def copy(self) -> "ParamSet":
        return ParamSet([k.copy() for k in self.kernels], [b.copy() for b in self.biases])

    def zeros_like(self) -> "ParamSet":
        return ParamSet([np.zeros_like(k) for k in self.kernels],
                        [np.zeros_like(b) for b in self.biases])

    @property
    def num_kernel_params(self) -> int:
        """|Theta|: kernel entries only."""
        return sum(k.size for k in self.kernels)

    @property
    def num_bias_params(self) -> int:
        return sum(b.size for b in self.biases)

    def flat_kernels(self) -> np.ndarray:
        return np.concatenate([k.ravel() for k in self.kernels])

    def set_flat_kernels(self, flat: np.ndarray) -> None:
        offset = 0
        for k in self.kernels:
            k[...] = flat[offset:offset + k.size].reshape(k.shape)
            offset += k.size

    def tensors(self) -> list[np.ndarray]:
        return [*self.kernels, *self.biases]


def init_params(model: ModelSpec, rng: np.random.Generator) -> ParamSet:
    """Fan-in scaled uniform kernels U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases."""
    kernels, biases = [], []
    for p, q in model.kernel_shapes():
        bound = math.sqrt(6.0 / p)
        kernels.append(rng.uniform(-bound, bound, size=(p, q)).astype(DTYPE))
        biases.append(np.zeros(q, dtype=DTYPE))
    return ParamSet(kernels, biases)


def check_params(model: ModelSpec, params: ParamSet) -> None:
    shapes = model.kernel_shapes()
    if len(params.kernels) != len(shapes) or len(params.biases) != len(shapes):
        raise DimensionError("parameter count does not match the model's kernel layers")
    for i, (k, b, shape) in enumerate(zip(params.kernels, params.biases, shapes)):
        if k.shape != shape or b.shape != (shape[1],):
            raise DimensionError(f"kernel {i}: expected {shape}, got {k.shape} / {b.shape}")


@dataclass
class ForwardCache:
    """Activations kept for the backward pass. Stale once params change."""
    entries: list
    logits: np.ndarray


def _maxpool_forward(x):
    corners = [x[:, :, i::2, j::2] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))
    # route each window's gradient to its first maximal corner only
    taken = np.zeros(out.shape, dtype=bool)
    masks = []
    for c in corners:
        m = (c == out) & ~taken
        taken |= m
        masks.append(m)
    return out, (x.shape, masks)


def _maxpool_backward(dout, saved):
    shape, masks = saved
    grad = np.zeros(shape, dtype=dout.dtype)
    for (i, j), m in zip(((0, 0), (0, 1), (1, 0), (1, 1)), masks):
        grad[:, :, i::2, j::2] = dout * m
    return grad


def forward(model: ModelSpec, params: ParamSet, batch: np.ndarray):
    if tuple(batch.shape[1:]) != model.input_shape:
        raise DimensionError(
            f"batch shape {batch.shape} does not match model input {model.input_shape}")
    x = batch
    entries = []
    ki = 0
    for layer in model.layers:
        if isinstance(layer, FullyConnected):
            entries.append(x)
            x = x @ params.kernels[ki] + params.biases[ki]
            ki += 1
        elif isinstance(layer, Conv2d):
            n, _, h, w = x.shape
            cols = tensor.im2col(x, layer.h, layer.w, layer.stride, layer.pad)
            oh = (h + 2 * layer.pad - layer.h) // layer.stride + 1
            ow = (w + 2 * layer.pad - layer.w) // layer.stride + 1
            entries.append((cols, x.shape))
            out = cols @ params.kernels[ki] + params.biases[ki]
            x = out.reshape(n, oh, ow, layer.s).transpose(0, 3, 1, 2)
            ki += 1
        elif isinstance(layer, ReLU):
            mask = x > 0
            entries.append(mask)
            x = x * mask
        elif isinstance(layer, MaxPool2):
            x, saved = _maxpool_forward(x)
            entries.append(saved)
        elif isinstance(layer, Flatten):
            entries.append(x.shape)
            x = x.reshape(x.shape[0], -1)
    return x, ForwardCache(entries, x)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean CE loss and its gradient w.r.t. the logits."""
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    log_prob = shifted - np.log(total)
    rows = np.arange(n)
    loss = -log_prob[rows, labels].mean(dtype=np.float64)
    dlogits = exp / total
    dlogits[rows, labels] -= 1
    dlogits /= n
    return float(loss), dlogits


def loss_and_backward(model: ModelSpec, params: ParamSet, cache: ForwardCache,
                      labels: np.ndarray):
    loss, dx = softmax_cross_entropy(cache.logits, labels)
    grads = params.zeros_like()
    ki = len(params.kernels)
    for li in range(len(model.layers) - 1, -1, -1):
        layer, saved = model.layers[li], cache.entries[li]
        first = li == 0
        if isinstance(layer, FullyConnected):
            ki -= 1
            grads.kernels[ki] = saved.T @ dx
            grads.biases[ki] = dx.sum(axis=0)
            if not first:
                dx = dx @ params.kernels[ki].T
        elif isinstance(layer, Conv2d):
            ki -= 1
            cols, in_shape = saved
            d = dx.transpose(0, 2, 3, 1).reshape(-1, layer.s)
            grads.kernels[ki] = cols.T @ d
            grads.biases[ki] = d.sum(axis=0)
            if not first:
                dx = tensor.col2im(d @ params.kernels[ki].T, in_shape, layer.h, layer.w,
                                   layer.stride, layer.pad)
        elif isinstance(layer, ReLU):
            dx = dx * saved
        elif isinstance(layer, MaxPool2):
            dx = _maxpool_backward(dx, saved)
        elif isinstance(layer, Flatten):
            dx = dx.reshape(saved)
    return loss, grads


def predict_logits(model: ModelSpec, params: ParamSet, images: np.ndarray,
                   batch_size: int = 1000) -> np.ndarray:
    parts = [forward(model, params, images[i:i + batch_size])[0]
             for i in range(0, len(images), batch_size)]
    return np.concatenate(parts)


def evaluate(model: ModelSpec, params: ParamSet, dataset, batch_size: int = 1000):
    """Top-1 accuracy and mean CE loss over ``dataset`` in its stored order."""
    n = len(dataset.labels)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    loss_sum = 0.0
    for i in range(0, n, batch_size):
        logits, _ = forward(model, params, dataset.images[i:i + batch_size])
        labels = dataset.labels[i:i + batch_size]
        loss, _ = softmax_cross_entropy(logits, labels)
        loss_sum += loss * len(labels)
        correct += int((logits.argmax(axis=1) == labels).sum())
    return correct / n, loss_sum / n
