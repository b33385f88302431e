"""Global magnitude pruning, compression accounting and layer sensitivity."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GsmError
from .nn import ModelSpec, ParamSet, evaluate
from .tensor import topk_threshold

SENSITIVITY_RATIOS = (0.90, 0.99, 0.995, 0.997)


class UndefinedRatioError(GsmError, ZeroDivisionError):
    """Compression ratio requested for a model with no nonzero kernel entries."""


@dataclass
class PruneReport:
    total_params: int
    remaining: int
    compression_ratio: float
    per_layer_nonzero: list = field(default_factory=list)
    accuracy_before: float | None = None
    accuracy_after: float | None = None

    def summary(self) -> str:
        lines = [
            f"kernel parameters |Theta|: {self.total_params}",
            f"remaining nonzero Q:       {self.remaining}",
            f"compression ratio C:       {self.compression_ratio:.2f}x",
        ]
        if self.accuracy_before is not None:
            lines.append(f"top1 before pruning:       {100 * self.accuracy_before:.2f}%")
        if self.accuracy_after is not None:
            lines.append(f"top1 after pruning:        {100 * self.accuracy_after:.2f}%")
        lines.append("per-layer nonzero fraction:")
        lines += [f"  layer {i}: {frac:.4%}" for i, frac in self.per_layer_nonzero]
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "nonzero_fraction"])
            for i, frac in self.per_layer_nonzero:
                writer.writerow([i, f"{frac:.6g}"])
            writer.writerow([])
            writer.writerow(["total_params", "remaining", "compression_ratio",
                             "accuracy_before", "accuracy_after"])
            writer.writerow([self.total_params, self.remaining, f"{self.compression_ratio:.6g}",
                             "" if self.accuracy_before is None else f"{self.accuracy_before:.6g}",
                             "" if self.accuracy_after is None else f"{self.accuracy_after:.6g}"])


def magnitude_masks(params: ParamSet, q: int) -> list[np.ndarray]:
    """Boolean support of the ``q`` largest-magnitude kernel entries."""
    flat = np.abs(params.flat_kernels())
    if not 1 <= q <= flat.size:
        raise ValueError(f"q must lie in [1, {flat.size}], got {q}")
    keep = np.zeros(flat.size, dtype=bool)
    keep[topk_threshold(flat, q)[1]] = True
    masks, offset = [], 0
    for k in params.kernels:
        masks.append(keep[offset:offset + k.size].reshape(k.shape))
        offset += k.size
    return masks


def apply_masks(params: ParamSet, masks: list) -> ParamSet:
    kernels = [np.where(m, k, np.zeros((), k.dtype)) for k, m in zip(params.kernels, masks)]
    return ParamSet(kernels, [b.copy() for b in params.biases])


def global_magnitude_prune(params: ParamSet, q: int) -> tuple[ParamSet, PruneReport]:
    pruned = apply_masks(params, magnitude_masks(params, q))
    return pruned, make_report(pruned)


def make_report(params: ParamSet, accuracy_before=None, accuracy_after=None) -> PruneReport:
    total = params.num_kernel_params
    nnz = count_nonzero(params)
    return PruneReport(total, nnz, total / nnz if nnz else math.inf, per_layer_nonzero(params),
                       accuracy_before, accuracy_after)


def count_nonzero(params: ParamSet) -> int:
    return sum(int(np.count_nonzero(k)) for k in params.kernels)


def compression_ratio(params: ParamSet) -> float:
    nnz = count_nonzero(params)
    if nnz == 0:
        raise UndefinedRatioError("every kernel entry is zero; compression ratio is undefined")
    return params.num_kernel_params / nnz


def per_layer_nonzero(params: ParamSet) -> list[tuple[int, float]]:
    return [(i, np.count_nonzero(k) / k.size) for i, k in enumerate(params.kernels)]


def small_magnitude_ratio(params: ParamSet, bound: float) -> float:
    """Fraction of kernel entries with |w| < bound."""
    small = sum(int(np.count_nonzero(np.abs(k) < bound)) for k in params.kernels)
    return small / params.num_kernel_params


def prune_layer(kernel: np.ndarray, ratio: float) -> np.ndarray:
    """Copy of ``kernel`` with its smallest-magnitude ``ratio`` fraction zeroed."""
    n_zero = math.floor(ratio * kernel.size + 1e-9)
    if n_zero <= 0:
        return kernel.copy()
    out = np.zeros_like(kernel)
    if n_zero < kernel.size:
        keep = topk_threshold(np.abs(kernel), kernel.size - n_zero)[1]
        out.ravel()[keep] = kernel.ravel()[keep]
    return out


def layer_sensitivity(model: ModelSpec, params: ParamSet, dataset,
                      ratios=SENSITIVITY_RATIOS) -> np.ndarray:
    """Top-1 accuracy after pruning each kernel layer alone.

    Returns an array of shape (num_kernel_layers, len(ratios)). ``params``
    is never modified.
    """
    ratios = list(ratios)
    if any(not 0 < r < 1 for r in ratios):
        raise ValueError(f"pruning ratios must lie in (0, 1), got {ratios}")
    out = np.empty((len(params.kernels), len(ratios)))
    for i in range(len(params.kernels)):
        for j, ratio in enumerate(ratios):
            kernels = list(params.kernels)
            kernels[i] = prune_layer(params.kernels[i], ratio)
            out[i, j] = evaluate(model, ParamSet(kernels, params.biases), dataset)[0]
    return out
