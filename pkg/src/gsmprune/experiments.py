"""Training loops and experiment protocols (base, GSM, ablations, lottery tickets)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .config import RunConfig
from .data import (Checkpoint, Dataset, MetricsRow, append_metrics, load_checkpoint,
                   load_mnist, save_checkpoint, synthetic_dataset)
from .errors import ConfigError, ConsistencyError, DimensionError, NumericalError
from .gsm import (GsmConfig, OptimizerState, check_q, gsm_step, momentum_sgd_step,
                  q_from_compression, saliency, schedule_decay, select_active)
from .nn import ModelSpec, ParamSet
from .pruning import (apply_masks, global_magnitude_prune, magnitude_masks, make_report,
                      small_magnitude_ratio)
from .tensor import make_rng, restore_rng, rng_state

log = logging.getLogger(__name__)

TRAINER_MODES = ("base", "gsm", "frozen", "masked")


def reactivation_ratio(prev_masks, new_masks) -> float:
    """Fraction of all kernel entries that switched from passive to active."""
    if len(prev_masks) != len(new_masks):
        raise DimensionError("mask lists differ in length")
    switched = total = 0
    for p, m in zip(prev_masks, new_masks):
        if p.shape != m.shape:
            raise DimensionError(f"mask {p.shape} vs {m.shape}")
        switched += int(np.count_nonzero(m & ~p))
        total += m.size
    return switched / total


def build_model(name: str) -> ModelSpec:
    """Named LeNet, or ``mlp:784-100-10`` for an MLP on flattened 28x28 input."""
    if name in nn.MODELS:
        return nn.MODELS[name]()
    if name.startswith("mlp:"):
        try:
            dims = [int(x) for x in name[4:].split("-")]
        except ValueError:
            raise ConfigError(f"bad mlp spec {name!r}") from None
        shape = (1, 28, 28) if dims[0] == 784 else (1, 1, dims[0])
        return nn.mlp(dims, shape)
    raise ConfigError(f"unknown model {name!r}")


def load_data(config: RunConfig) -> tuple[Dataset, Dataset]:
    if config.dataset == "mnist":
        train = load_mnist(config.data_dir, "train").head(config.train_size)
        test = load_mnist(config.data_dir, "test").head(config.test_size)
    elif config.dataset == "synthetic":
        model = build_model(config.model)
        dims = model.input_shape[1:] if model.input_shape[1] > 1 else model.input_shape[2]
        train = synthetic_dataset(config.seed, config.train_size or 2000,
                                  model.num_classes, dims, split="train")
        # same blobs (same seed => same centres), fresh samples from the tail
        both = synthetic_dataset(config.seed, (config.train_size or 2000)
                                 + (config.test_size or 500), model.num_classes, dims)
        test = Dataset(both.images[len(train):], both.labels[len(train):], "test",
                       model.num_classes)
    else:
        raise ConfigError(f"unknown dataset {config.dataset!r}")
    return train, test


@dataclass
class Trainer:
    """Owns one training run: parameters, optimizer state and data order.

    ``mode`` is one of ``base`` (momentum SGD), ``gsm`` (selection every
    iteration), ``frozen`` (selection at the first iteration only) and
    ``masked`` (fixed ``masks`` supplied by the caller).
    """

    model: ModelSpec
    params: ParamSet
    train: Dataset
    test: Dataset | None
    config: GsmConfig
    mode: str = "base"
    q: int | None = None
    seed: int = 0
    eval_interval: int = 2000
    masks: list | None = None
    metrics_path: Path | None = None
    checkpoint_path: Path | None = None
    state: OptimizerState | None = None
    metrics: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in TRAINER_MODES:
            raise ConfigError(f"trainer mode must be one of {TRAINER_MODES}")
        nn.check_params(self.model, self.params)
        total = self.params.num_kernel_params
        if self.mode in ("gsm", "frozen"):
            if self.q is None:
                raise ConfigError("GSM training needs Q")
            check_q(self.q, total)
        if self.mode == "masked":
            if self.masks is None:
                raise ConfigError("masked training needs fixed masks")
            self.q = sum(int(m.sum()) for m in self.masks)
        if self.state is None:
            self.state = OptimizerState.zeros(self.params)
            if self.mode == "masked":
                self.state.masks = self.masks
        self.batch = min(self.config.batch_size, len(self.train))
        self.iters_per_epoch = len(self.train) // self.batch
        self.total_iterations = self.config.total_epochs * self.iters_per_epoch
        self.rng = make_rng(self.seed, "shuffle")
        self.epoch_rng_state = rng_state(self.rng)
        self.perm = None
        self.iteration = 0
        self._loss_sum = 0.0
        self._react_sum = 0.0
        self._count = 0

    # -- checkpointing ---------------------------------------------------------

    def checkpoint(self, meta: dict | None = None) -> Checkpoint:
        at_boundary = self.iteration % self.iters_per_epoch == 0
        shuffle_state = rng_state(self.rng) if at_boundary else self.epoch_rng_state
        return Checkpoint(self.model, self.params, self.state, shuffle_state,
                          self.iteration, self.iteration // self.iters_per_epoch,
                          dict(meta or {}, trainer_mode=self.mode, q=self.q))

    def resume(self, ckpt: Checkpoint) -> None:
        """Continue from a checkpoint written by :meth:`checkpoint` at an eval point."""
        self.params = ckpt.params
        self.state = ckpt.state
        self.iteration = ckpt.iteration
        self.rng = restore_rng(ckpt.rng_state)
        self.epoch_rng_state = rng_state(self.rng)
        self.perm = None
        if self.mode == "masked":
            self.masks = self.state.masks

    # -- loop --------------------------------------------------------------------

    def _next_batch(self):
        pos = self.iteration % self.iters_per_epoch
        if self.perm is None or pos == 0:
            # after a mid-epoch resume self.rng sits at the start of this epoch
            if pos == 0:
                self.epoch_rng_state = rng_state(self.rng)
            self.perm = self.rng.permutation(len(self.train))
        idx = self.perm[pos * self.batch:(pos + 1) * self.batch]
        return self.train.images[idx], self.train.labels[idx]

    def step(self) -> float:
        epoch = self.iteration // self.iters_per_epoch
        alpha = self.config.alpha_at(epoch)
        x, y = self._next_batch()
        _, cache = nn.forward(self.model, self.params, x)
        loss, grads = nn.loss_and_backward(self.model, self.params, cache, y)
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite training loss at iteration {self.iteration}")
        if self.mode == "base":
            momentum_sgd_step(self.params, grads, self.state, self.config, alpha)
        else:
            prev = self.state.masks
            if self.mode == "gsm" or (self.mode == "frozen" and prev is None):
                masks = select_active(saliency(self.params, grads), self.q)
            else:
                masks = prev
            if prev is not None:
                self._react_sum += reactivation_ratio(prev, masks)
            gsm_step(self.params, grads, self.state, self.config, alpha, masks)
        self.iteration += 1
        self._loss_sum += loss
        self._count += 1
        return loss

    def log_metrics(self) -> MetricsRow:
        epoch = self.iteration // self.iters_per_epoch
        orig = pruned_acc = math.nan
        if self.test is not None:
            orig = nn.evaluate(self.model, self.params, self.test)[0]
            pruned_acc = orig
            if self.q is not None and self.q < self.params.num_kernel_params:
                pruned, _ = global_magnitude_prune(self.params, self.q)
                pruned_acc = nn.evaluate(self.model, pruned, self.test)[0]
        row = MetricsRow(
            iteration=self.iteration,
            epoch=epoch,
            train_loss=self._loss_sum / max(self._count, 1),
            orig_top1=orig,
            pruned_top1=pruned_acc,
            ratio_below_1e3=small_magnitude_ratio(self.params, 1e-3),
            ratio_below_1e4=small_magnitude_ratio(self.params, 1e-4),
            reactivation_ratio=self._react_sum / max(self._count, 1),
            current_alpha=self.config.alpha_at(max(self.iteration - 1, 0) // self.iters_per_epoch),
        )
        self._loss_sum = self._react_sum = 0.0
        self._count = 0
        self.metrics.append(row)
        if self.metrics_path is not None:
            append_metrics(self.metrics_path, row)
        log.info("iter %d epoch %d loss %.4f top1 %.4f pruned %.4f <1e-4 %.4f",
                 row.iteration, row.epoch, row.train_loss, row.orig_top1, row.pruned_top1,
                 row.ratio_below_1e4)
        if self.checkpoint_path is not None:
            save_checkpoint(self.checkpoint_path, self.checkpoint())
        return row

    def run(self, stop_at: int | None = None) -> "Trainer":
        """Train to the end of the schedule, or until iteration ``stop_at``."""
        end = self.total_iterations if stop_at is None else min(stop_at, self.total_iterations)
        while self.iteration < end:
            self.step()
            if self.iteration % self.eval_interval == 0 or self.iteration == self.total_iterations:
                self.log_metrics()
        return self


@dataclass
class RunResult:
    params: ParamSet
    metrics: list
    top1: float | None = None
    pruned: ParamSet | None = None
    pruned_top1: float | None = None
    q: int | None = None
    report: object = None
    trainer: Trainer | None = None


def _out(config: RunConfig, name: str) -> Path | None:
    if config.output_dir is None:
        return None
    path = Path(config.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path / name


def _fresh(path: Path | None) -> Path | None:
    if path is not None and path.exists():
        path.unlink()
    return path


def resolve_q(config: RunConfig, total: int) -> int:
    q = config.q if config.q is not None else q_from_compression(total, config.compression)
    check_q(q, total)
    return q


def initial_params(config: RunConfig, model: ModelSpec) -> ParamSet:
    return nn.init_params(model, make_rng(config.seed, "init"))


def train_base(config: RunConfig, data=None, params: ParamSet | None = None,
               prefix: str = "base") -> RunResult:
    model = build_model(config.model)
    train, test = data if data is not None else load_data(config)
    params = initial_params(config, model) if params is None else params.copy()
    trainer = Trainer(model, params, train, test, config.base_config(), "base",
                      seed=config.seed, eval_interval=config.eval_interval,
                      metrics_path=_fresh(_out(config, f"{prefix}_metrics.csv")))
    trainer.run()
    top1 = nn.evaluate(model, trainer.params, test)[0]
    ckpt = _out(config, f"{prefix}.ckpt")
    if ckpt is not None:
        save_checkpoint(ckpt, trainer.checkpoint({"top1": top1, "kind": "base"}))
    return RunResult(trainer.params, trainer.metrics, top1, trainer=trainer)


def load_base(config: RunConfig) -> ParamSet:
    if config.base_checkpoint is None:
        raise ConfigError("base_checkpoint is required to start GSM training")
    ckpt = load_checkpoint(config.base_checkpoint)
    if ckpt.model != build_model(config.model):
        raise ConfigError(f"{config.base_checkpoint} holds a different model than {config.model}")
    return ckpt.params


def train_gsm(config: RunConfig, data=None, base_params: ParamSet | None = None,
              reselect: bool = True, prefix: str = "gsm", resume_from=None,
              stop_at: int | None = None) -> RunResult:
    """GSM-train from a base model, then prune globally to Q by magnitude.

    ``resume_from`` continues a run from a checkpoint; ``stop_at`` halts
    early (used to exercise restart safety).
    """
    model = build_model(config.model)
    base_params = load_base(config) if base_params is None else base_params
    q = resolve_q(config, base_params.num_kernel_params)
    train, test = data if data is not None else load_data(config)
    metrics_path = _out(config, f"{prefix}_metrics.csv")
    if resume_from is None:
        _fresh(metrics_path)
    trainer = Trainer(model, base_params.copy(), train, test, config.gsm_config(),
                      "gsm" if reselect else "frozen", q=q, seed=config.seed,
                      eval_interval=config.eval_interval, metrics_path=metrics_path,
                      checkpoint_path=_out(config, f"{prefix}_running.ckpt"))
    if resume_from is not None:
        trainer.resume(load_checkpoint(resume_from) if not isinstance(resume_from, Checkpoint)
                       else resume_from)
    planned = schedule_decay(trainer.config, trainer.iters_per_epoch)
    if planned >= config.tau:
        log.warning("schedule only decays passive weights to %.3g of their value (target %.3g)",
                    planned, config.tau)
    trainer.run(stop_at)
    if trainer.iteration < trainer.total_iterations:
        return RunResult(trainer.params, trainer.metrics, q=q, trainer=trainer)
    top1 = nn.evaluate(model, trainer.params, test)[0]
    pruned, _ = global_magnitude_prune(trainer.params, q)
    pruned_top1 = nn.evaluate(model, pruned, test)[0]
    report = make_report(pruned, top1, pruned_top1)
    if config.output_dir is not None:
        save_checkpoint(_out(config, f"{prefix}.ckpt"),
                        trainer.checkpoint({"top1": top1, "kind": prefix}))
        save_checkpoint(_out(config, f"{prefix}_pruned.ckpt"),
                        Checkpoint(model, pruned, iteration=trainer.iteration,
                                   meta={"top1": pruned_top1, "kind": "pruned", "q": q}))
        _out(config, f"{prefix}_prune_report.txt").write_text(report.summary() + "\n")
        report.write_csv(_out(config, f"{prefix}_prune_report.csv"))
    return RunResult(trainer.params, trainer.metrics, top1, pruned, pruned_top1, q, report,
                     trainer)


def train_gsm_no_reselection(config: RunConfig, data=None,
                             base_params: ParamSet | None = None) -> RunResult:
    return train_gsm(config, data, base_params, reselect=False, prefix="gsm_frozen")


def train_ticket(config: RunConfig, data, ticket: ParamSet, masks: list,
                 prefix: str = "ticket") -> RunResult:
    model = build_model(config.model)
    train, test = data
    trainer = Trainer(model, ticket.copy(), train, test, config.base_config(), "masked",
                      seed=config.seed, eval_interval=config.eval_interval, masks=masks,
                      metrics_path=_fresh(_out(config, f"{prefix}_metrics.csv")))
    trainer.run()
    for k, m in zip(trainer.params.kernels, masks):
        if np.any(k[~m] != 0):
            raise ConsistencyError("a pinned non-ticket entry moved away from zero")
    return RunResult(trainer.params, trainer.metrics, nn.evaluate(model, trainer.params, test)[0],
                     trainer=trainer)


@dataclass
class LotteryResult:
    q: int
    magnitude_top1: float
    gsm_top1: float
    base_top1: float
    gsm_pruned_top1: float
    theta0: ParamSet = field(repr=False)
    masks: dict = field(repr=False, default_factory=dict)

    def table(self) -> dict:
        return {"magnitude": self.magnitude_top1, "gsm": self.gsm_top1}


def make_ticket(theta0: ParamSet, masks: list) -> ParamSet:
    """Surviving entries reset to their initial values, everything else zero."""
    return apply_masks(theta0, masks)


def lottery_experiment(config: RunConfig, data=None, base: RunResult | None = None) -> LotteryResult:
    """Magnitude tickets vs GSM tickets from the same initialization.

    Both ticket sets are retrained with masked momentum SGD on the base
    schedule. ``base`` may supply an already-trained step-2 result.
    """
    model = build_model(config.model)
    data = data if data is not None else load_data(config)
    theta0 = initial_params(config, model)
    if config.output_dir is not None:
        save_checkpoint(_out(config, "theta0.ckpt"), Checkpoint(model, theta0, meta={"kind": "init"}))
    trained = base if base is not None else train_base(config, data, theta0)
    q = resolve_q(config, theta0.num_kernel_params)
    gsm = train_gsm(config, data, trained.params)
    supports = {"magnitude": magnitude_masks(trained.params, q),
                "gsm": magnitude_masks(gsm.params, q)}
    results = {}
    for name, masks in supports.items():
        size = sum(int(m.sum()) for m in masks)
        if size != q:
            raise ConsistencyError(f"{name} ticket has {size} entries, expected {q}")
        ticket = make_ticket(theta0, masks)
        results[name] = train_ticket(config, data, ticket, masks, prefix=f"ticket_{name}").top1
    return LotteryResult(q, results["magnitude"], results["gsm"], trained.top1, gsm.pruned_top1,
                         theta0, supports)


@dataclass
class SensitivityResult:
    ratios: list
    accuracy: np.ndarray
    baseline: float
    nonzero: list | None = None

    @property
    def drop(self) -> np.ndarray:
        return self.baseline - self.accuracy

    def spearman(self, column: int = 0) -> tuple[float, float] | None:
        """Rank correlation of the accuracy drop at ``ratios[column]`` against
        (1 - nonzero fraction) and against the nonzero fraction itself."""
        if self.nonzero is None:
            return None
        from scipy.stats import spearmanr

        drop = self.drop[:, column]
        nz = np.asarray(self.nonzero)
        return (float(spearmanr(drop, 1 - nz).statistic),
                float(spearmanr(drop, nz).statistic))


def sensitivity_experiment(model: ModelSpec, params: ParamSet, test: Dataset,
                           ratios=None, gsm_pruned: ParamSet | None = None) -> SensitivityResult:
    from .pruning import SENSITIVITY_RATIOS, layer_sensitivity, per_layer_nonzero

    ratios = list(SENSITIVITY_RATIOS if ratios is None else ratios)
    accuracy = layer_sensitivity(model, params, test, ratios)
    baseline = nn.evaluate(model, params, test)[0]
    nonzero = None if gsm_pruned is None else [f for _, f in per_layer_nonzero(gsm_pruned)]
    return SensitivityResult(ratios, accuracy, baseline, nonzero)


def momentum_sweep(config: RunConfig, betas, data, base_params: ParamSet) -> dict:
    """GSM runs that differ only in beta."""
    return {beta: train_gsm(config.replace(beta=beta, output_dir=None), data, base_params)
            for beta in betas}


def reselection_ablation(config: RunConfig, seeds, data, base_params: ParamSet) -> list:
    """(seed, re-selecting run, frozen-mask run) for each seed."""
    out = []
    for seed in seeds:
        cfg = config.replace(seed=seed, output_dir=None)
        out.append((seed, train_gsm(cfg, data, base_params),
                    train_gsm_no_reselection(cfg, data, base_params)))
    return out
