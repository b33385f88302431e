"""Datasets, checkpoints and the metrics CSV."""

from __future__ import annotations

import csv
import dataclasses
import gzip
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, CorruptionError, FormatError, VersionError
from .gsm import OptimizerState
from .nn import ModelSpec, ParamSet, check_params
from .tensor import DTYPE, make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
NORMALIZATION = "divide-by-255"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) == 0:
            raise ConsistencyError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise ConsistencyError(
                f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConsistencyError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def head(self, n: int | None) -> "Dataset":
        if n is None or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.split, self.num_classes)


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    header_len = 4 + 4 * ndim
    if len(raw) < 4:
        raise OSError(f"{path}: truncated IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < header_len:
        raise OSError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = math.prod(dims)
    if len(raw) - header_len < expected:
        raise OSError(f"{path}: truncated payload ({len(raw) - header_len} of {expected} bytes)")
    if len(raw) - header_len > expected:
        raise FormatError(f"{path}: {len(raw) - header_len - expected} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, offset=header_len).reshape(dims)


def load_mnist_idx(images_path, labels_path, split: str = "train") -> Dataset:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise ConsistencyError(
            f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels")
    pixels = (images.astype(DTYPE) / DTYPE(255))[:, None, :, :]
    return Dataset(pixels, labels.astype(np.int64), split)


def default_data_dir() -> Path:
    return Path(os.environ.get("GSM_DATA_DIR", "data/mnist"))


def load_mnist(data_dir=None, split: str = "train") -> Dataset:
    """Load a split from a directory holding the four standard IDX files."""
    data_dir = Path(data_dir) if data_dir is not None else default_data_dir()
    names = []
    for name in MNIST_FILES[split]:
        path = data_dir / name
        if not path.exists() and (data_dir / (name + ".gz")).exists():
            path = data_dir / (name + ".gz")
        names.append(path)
    return load_mnist_idx(*names, split=split)


def synthetic_dataset(seed: int, n: int, classes: int, dims=16, spread: float = 0.05,
                      split: str = "train") -> Dataset:
    """Gaussian blobs in [0, 1]^d, one blob per class.

    ``dims`` is an int (flat feature vector, stored as (n, 1, 1, d)) or an
    (H, W) pair. Class centres are uniform in [0.2, 0.8]^d; each sample is
    its centre plus N(0, spread^2) noise, clipped to [0, 1].
    """
    if n < 1 or classes < 1:
        raise ValueError("n and classes must be at least 1")
    shape = (1, 1, dims) if isinstance(dims, int) else (1, *dims)
    d = math.prod(shape)
    if d < 1:
        raise ValueError("dims must be at least 1")
    rng = make_rng(seed, "data")
    centres = rng.uniform(0.2, 0.8, size=(classes, d))
    labels = rng.integers(0, classes, size=n)
    x = centres[labels] + spread * rng.standard_normal((n, d))
    images = np.clip(x, 0.0, 1.0).astype(DTYPE).reshape(n, *shape)
    return Dataset(images, labels.astype(np.int64), split, classes)


# --- checkpoints -----------------------------------------------------------

CHECKPOINT_MAGIC = b"GSMCKPT\n"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    model: ModelSpec
    params: ParamSet
    state: OptimizerState | None = None
    rng_state: dict | None = None
    iteration: int = 0
    epoch: int = 0
    meta: dict = field(default_factory=dict)


def _tensor_entries(ckpt: Checkpoint):
    entries = [(f"kernel/{i}", k) for i, k in enumerate(ckpt.params.kernels)]
    entries += [(f"bias/{i}", b) for i, b in enumerate(ckpt.params.biases)]
    if ckpt.state is not None:
        entries += [(f"momentum/kernel/{i}", z) for i, z in enumerate(ckpt.state.momentum.kernels)]
        entries += [(f"momentum/bias/{i}", z) for i, z in enumerate(ckpt.state.momentum.biases)]
        if ckpt.state.masks is not None:
            entries += [(f"mask/{i}", m) for i, m in enumerate(ckpt.state.masks)]
    return entries


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write a JSON header line followed by little-endian float32 payloads."""
    entries = _tensor_entries(ckpt)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "normalization": NORMALIZATION,
        "model": ckpt.model.to_dict(),
        "iteration": ckpt.iteration,
        "epoch": ckpt.epoch,
        "optimizer_iteration": None if ckpt.state is None else ckpt.state.iteration,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in entries],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(line)
    except ValueError as exc:
        raise CorruptionError(f"{path}: unreadable header ({exc})") from None
    if not isinstance(header, dict):
        raise CorruptionError(f"{path}: header is not a key-value document")
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: format version {header.get('format_version')!r}, "
                           f"this build reads version {CHECKPOINT_VERSION}")
    try:
        return _parse_checkpoint(header, payload)
    except CorruptionError as exc:
        raise CorruptionError(f"{path}: {exc}") from None
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise CorruptionError(f"{path}: malformed checkpoint ({type(exc).__name__}: {exc})") from None


def _parse_checkpoint(header: dict, payload: bytes) -> Checkpoint:
    model = ModelSpec.from_dict(header["model"])
    specs = header["tensors"]
    shapes = [tuple(int(d) for d in t["shape"]) for t in specs]
    if any(d < 0 for shape in shapes for d in shape):
        raise CorruptionError("negative tensor dimension in header")
    sizes = [math.prod(shape) for shape in shapes]
    if 4 * sum(sizes) != len(payload):
        raise CorruptionError(
            f"header declares {4 * sum(sizes)} payload bytes, file has {len(payload)}")
    tensors, offset = {}, 0
    for spec, shape, size in zip(specs, shapes, sizes):
        arr = np.frombuffer(payload, dtype="<f4", count=size, offset=4 * offset)
        tensors[str(spec["name"])] = arr.astype(DTYPE).reshape(shape)
        offset += size
    n = len(model.kernel_layers)
    params = ParamSet([tensors[f"kernel/{i}"] for i in range(n)],
                      [tensors[f"bias/{i}"] for i in range(n)])
    check_params(model, params)
    state = None
    if header.get("optimizer_iteration") is not None:
        momentum = ParamSet([tensors[f"momentum/kernel/{i}"] for i in range(n)],
                            [tensors[f"momentum/bias/{i}"] for i in range(n)])
        check_params(model, momentum)
        masks = None
        if "mask/0" in tensors:
            masks = [tensors[f"mask/{i}"] != 0 for i in range(n)]
            if [m.shape for m in masks] != [k.shape for k in params.kernels]:
                raise CorruptionError("mask shapes do not match kernels")
        state = OptimizerState(momentum, masks, int(header["optimizer_iteration"]))
    meta = header.get("meta") or {}
    rng = header.get("rng_state")
    if not isinstance(meta, dict) or not (rng is None or isinstance(rng, dict)):
        raise CorruptionError("meta and rng_state must be key-value documents")
    return Checkpoint(model, params, state, rng, int(header["iteration"]),
                      int(header["epoch"]), meta)


# --- metrics CSV -------------------------------------------------------------

@dataclass
class MetricsRow:
    iteration: int
    epoch: int
    train_loss: float
    orig_top1: float
    pruned_top1: float
    ratio_below_1e3: float
    ratio_below_1e4: float
    reactivation_ratio: float
    current_alpha: float


METRICS_FIELDS = [f.name for f in dataclasses.fields(MetricsRow)]


def _fmt(value) -> str:
    return str(value) if isinstance(value, int) else f"{value:.6g}"


def append_metrics(path, row: MetricsRow) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        new = not path.exists() or path.stat().st_size == 0
        with open(path, "a", newline="") as fh:
            writer = csv.writer(fh)
            if new:
                writer.writerow(METRICS_FIELDS)
            writer.writerow([_fmt(getattr(row, name)) for name in METRICS_FIELDS])
    except OSError as exc:
        raise OSError(f"{path}: cannot append metrics ({exc.strerror or exc})") from exc


def read_metrics(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_FIELDS:
            raise FormatError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [MetricsRow(int(r["iteration"]), int(r["epoch"]),
                           *(float(r[name]) for name in METRICS_FIELDS[2:]))
                for r in reader]
