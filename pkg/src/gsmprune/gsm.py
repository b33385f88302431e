"""Global Sparse Momentum SGD.

Each iteration the Q kernel entries with the largest first-order saliency
``|dL/dw * w|`` (ranked globally across layers) get the ordinary momentum
update; every other entry gets only momentum-accelerated weight decay and so
drifts geometrically towards zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .nn import ParamSet
from .tensor import topk_threshold


@dataclass
class GsmConfig:
    beta: float = 0.99
    eta: float = 5e-4
    lr_schedule: list = field(default_factory=lambda: [(30, 3e-2), (8, 3e-3), (8, 3e-4)])
    q: int | None = None
    batch_size: int = 256

    def __post_init__(self):
        self.lr_schedule = [(int(e), float(a)) for e, a in self.lr_schedule]
        if not 0 <= self.beta < 1:
            raise ConfigError(f"beta must lie in [0, 1), got {self.beta}")
        if self.eta < 0:
            raise ConfigError(f"eta must be non-negative, got {self.eta}")
        if any(e < 0 or a <= 0 for e, a in self.lr_schedule):
            raise ConfigError(f"bad learning-rate schedule {self.lr_schedule}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")

    @property
    def total_epochs(self) -> int:
        return sum(e for e, _ in self.lr_schedule)

    def alpha_at(self, epoch: int) -> float:
        """Piecewise-constant learning rate for a 0-based epoch index."""
        end = 0
        for epochs, alpha in self.lr_schedule:
            end += epochs
            if epoch < end:
                return alpha
        return self.lr_schedule[-1][1]


def q_from_compression(total: int, compression: float) -> int:
    """Active-entry budget for a target ratio; flooring keeps the ratio >= target."""
    if compression < 1:
        raise ConfigError(f"compression ratio must be >= 1, got {compression}")
    return max(1, math.floor(total / compression))


def check_q(q: int, total: int) -> None:
    if not 1 <= q <= total:
        raise ConfigError(f"Q={q} outside [1, |Theta|={total}]")


@dataclass
class OptimizerState:
    momentum: ParamSet
    masks: list | None = None
    iteration: int = 0

    @classmethod
    def zeros(cls, params: ParamSet) -> "OptimizerState":
        return cls(params.zeros_like())


@dataclass
class SaliencySnapshot:
    values: list

    @property
    def size(self) -> int:
        return sum(v.size for v in self.values)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values])

    def threshold(self, q: int) -> float:
        return topk_threshold(self.flat(), q)[0]


def saliency(params: ParamSet, grads: ParamSet) -> SaliencySnapshot:
    values = []
    for w, g in zip(params.kernels, grads.kernels, strict=True):
        if w.shape != g.shape:
            raise DimensionError(f"kernel {w.shape} vs gradient {g.shape}")
        values.append(np.abs(g * w))
    return SaliencySnapshot(values)


def select_active(snapshot: SaliencySnapshot, q: int) -> list[np.ndarray]:
    """Boolean masks with exactly ``q`` True entries across all kernels."""
    flat = snapshot.flat()
    if not 1 <= q <= flat.size:
        raise ValueError(f"q must lie in [1, {flat.size}], got {q}")
    chosen = np.zeros(flat.size, dtype=bool)
    chosen[topk_threshold(flat, q)[1]] = True
    masks, offset = [], 0
    for v in snapshot.values:
        masks.append(chosen[offset:offset + v.size].reshape(v.shape))
        offset += v.size
    return masks


def _update(w, z, g, beta, eta, alpha):
    z *= beta
    if eta:
        z += eta * w
    z += g
    w -= alpha * z


def _check(params, grads, state):
    for a, b, c in zip(params.tensors(), grads.tensors(), state.momentum.tensors(), strict=True):
        if not a.shape == b.shape == c.shape:
            raise DimensionError(f"param {a.shape}, grad {b.shape}, momentum {c.shape}")


def gsm_step(params: ParamSet, grads: ParamSet, state: OptimizerState, config: GsmConfig,
             alpha: float, masks: list | None = None) -> None:
    """One split update in place. ``masks`` defaults to ``state.masks``."""
    masks = state.masks if masks is None else masks
    _check(params, grads, state)
    if masks is None or len(masks) != len(params.kernels):
        raise DimensionError("one mask per kernel is required")
    for w, g, z, m in zip(params.kernels, grads.kernels, state.momentum.kernels, masks):
        if m.shape != w.shape:
            raise DimensionError(f"mask {m.shape} vs kernel {w.shape}")
        _update(w, z, g * m, config.beta, config.eta, alpha)
    for b, g, z in zip(params.biases, grads.biases, state.momentum.biases):
        _update(b, z, g, config.beta, 0.0, alpha)
    state.masks = masks
    state.iteration += 1


def momentum_sgd_step(params: ParamSet, grads: ParamSet, state: OptimizerState,
                      config: GsmConfig, alpha: float) -> None:
    """Plain momentum SGD with weight decay on kernels (biases undecayed)."""
    _check(params, grads, state)
    for w, g, z in zip(params.kernels, grads.kernels, state.momentum.kernels):
        _update(w, z, g, config.beta, config.eta, alpha)
    for b, g, z in zip(params.biases, grads.biases, state.momentum.biases):
        _update(b, z, g, config.beta, 0.0, alpha)
    state.iteration += 1


def passive_decay_curve(alpha: float, eta: float, beta: float, k: int) -> np.ndarray:
    """w(0..k) for a parameter receiving only weight decay, w(0)=1, z(0)=0."""
    out = np.empty(k + 1)
    w, z = 1.0, 0.0
    out[0] = w
    for i in range(1, k + 1):
        z = beta * z + eta * w
        w = w - alpha * z
        out[i] = w
    return out


def exact_passive_decay(alpha: float, eta: float, beta: float, k: int) -> float:
    return float(passive_decay_curve(alpha, eta, beta, k)[-1])


def _decay_factor(alpha, eta, beta):
    if beta >= 1:
        raise ValueError(f"beta must be < 1, got {beta}")
    return 1.0 - alpha * eta / (1.0 - beta)


def approx_passive_decay(alpha, eta, beta, k):
    """(1 - alpha*eta/(1-beta))**k; ``k`` may be an int or an array."""
    f = _decay_factor(alpha, eta, beta)
    if np.ndim(k):
        return f ** np.asarray(k, dtype=np.float64)
    return f ** k


def iterations_to_threshold(alpha: float, eta: float, beta: float, tau: float) -> int:
    """Smallest k with (1 - alpha*eta/(1-beta))**k < tau."""
    if not 0 < tau < 1:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    f = _decay_factor(alpha, eta, beta)
    if not 0 < f < 1:
        raise ValueError(f"decay factor {f} must lie in (0, 1)")
    k = max(0, math.floor(math.log(tau) / math.log(f)) + 1)
    while k > 0 and f ** (k - 1) < tau:
        k -= 1
    while not f ** k < tau:
        k += 1
    return k


def schedule_decay(config: GsmConfig, iters_per_epoch: int) -> float:
    """Approximate passive-decay ratio accumulated over a whole schedule."""
    ratio = 1.0
    for epochs, alpha in config.lr_schedule:
        ratio *= approx_passive_decay(alpha, config.eta, config.beta, epochs * iters_per_epoch)
    return float(ratio)
