"""Single-stage ERA training: loss assembly, SGD, teacher pre-training, distillation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Dataset, batches
from .errors import InputError, NumericError, ParameterError
from .inference import mode_accuracies, top1_accuracy
from .losses import (
    LossWeights,
    cross_entropy,
    feature_mse,
    feature_mse_attached,
    logit_distillation,
    total_era_loss,
)
from .model import EraModel, ResidualState, approximation_error, cascade_forward
from .nn import ClassifierHead, MlpEncoder, Module

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    final_relu: bool = False

    def build(self) -> MlpEncoder:
        return MlpEncoder(self.input_dim, list(self.hidden), self.output_dim,
                          final_relu=self.final_relu)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    learning_rate: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    m: int = 2
    student_hidden: tuple[int, ...] = ()
    branch_width: int | None = None
    branch_hidden: int | None = None
    branch_feed: str = "cascaded"
    head_t_frozen: bool = True
    detach_targets: bool = True
    lr_milestones: tuple[float, ...] = (0.5, 0.75)
    lr_decay: float = 0.1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ParameterError("learning_rate, momentum and weight_decay must be >= 0")
        if self.m < 1:
            raise ParameterError(f"m must be >= 1, got {self.m}")

    @property
    def K(self) -> int:
        return self.weights.K

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def learning_rate_at(cfg: TrainConfig, epoch: int) -> float:
    """Constant rate, multiplied by ``lr_decay`` at each milestone fraction of the run."""
    drops = sum(1 for f in cfg.lr_milestones if epoch >= int(f * cfg.epochs))
    return cfg.learning_rate * cfg.lr_decay ** drops


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay.

    Only parameters whose ``requires_grad`` is set at step time are touched,
    so frozen tensors stay bit-identical.
    """

    def __init__(self, named_params, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.values) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        for name, p in self.params:
            if not p.requires_grad:
                continue
            g = p.grad + self.weight_decay * p.values
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.values -= lr * v
            if not np.isfinite(p.values).all():
                raise NumericError(f"parameter {name} became non-finite after the update", term="update")

    def state(self) -> list[tuple[str, np.ndarray]]:
        return [(f"optim.{name}", v) for name, v in self.velocity.items()]

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name in self.velocity:
            self.velocity[name][...] = arrays[f"optim.{name}"]


# ------------------------------------------------------------------- losses

def metric_keys(K: int) -> list[str]:
    return (["epoch", "loss_total", "loss_kd"] + [f"loss_fd_{k}" for k in range(K + 1)]
            + [f"loss_cls_{k}" for k in range(1, K + 1)]
            + ["approx_error", "acc_s", "acc_t", "acc_st"])


def _term(name, fn, *args):
    try:
        return fn(*args)
    except NumericError as exc:
        raise NumericError(f"non-finite value in loss term {name}: {exc}", term=name) from exc


def era_loss(model: EraModel, x, y, cfg: TrainConfig, epoch_fraction: float = 0.0,
             fixed_targets=None):
    """Total loss and its named components for one batch.

    Returns ``(total, terms, state)`` where ``terms`` maps ``kd``, ``fd_k`` and
    ``cls_k`` to scalar Tensors.
    """
    w = cfg.weights
    state = _term("forward", cascade_forward, model, Tensor(x), cfg.detach_targets, True,
                  fixed_targets)
    terms = {}
    with ad.no_tape():
        logits_t = model.head_t(state.f_t)
    logits_s = _term("kd", model.head_s, state.f_s)
    terms["kd"] = _term("kd", logit_distillation, logits_s, logits_t, y, w)
    mse = feature_mse if cfg.detach_targets else feature_mse_attached
    fd = []
    for k in range(w.K + 1):
        fd.append(_term(f"fd_{k}", mse, state.targets[k], state.projected[k]))
        terms[f"fd_{k}"] = fd[-1]
    cls = []
    for k in range(1, w.K + 1):
        cls.append(_term(f"cls_{k}", _branch_classification, model, state, k, y))
        terms[f"cls_{k}"] = cls[-1]
    total = _term("total", total_era_loss, fd, cls, terms["kd"], w, epoch_fraction)
    return total, terms, state


def _branch_classification(model, state: ResidualState, k, y):
    probs = ad.softmax_with_temperature(model.head_t(state.approximations[k]), 1.0)
    return cross_entropy(probs, y)


def train_step(model: EraModel, optimizer: SGD, batch, cfg: TrainConfig,
               epoch_fraction: float, lr: float) -> dict:
    """One forward/backward/update; returns per-term loss values and approx_error."""
    x, y = batch
    optimizer.zero_grad()
    # overflow surfaces as NumericError from the forward pass; skip numpy's warnings
    with np.errstate(over="ignore", invalid="ignore"):
        with Tape() as tape:
            total, terms, state = era_loss(model, x, y, cfg, epoch_fraction)
        tape.backward(total)
        optimizer.step(lr)
    out = {"loss_total": total.item()}
    out.update({f"loss_{name}": t.item() for name, t in terms.items()})
    out["approx_error"] = state.approx_error
    return out


def evaluate_losses(model: EraModel, dataset: Dataset, cfg: TrainConfig,
                    epoch_fraction: float = 0.0) -> dict:
    """Loss terms over a whole dataset in eval mode, without recording."""
    with ad.no_tape(), model.evaluating():
        total, terms, state = era_loss(model, dataset.features, dataset.labels, cfg, epoch_fraction)
    out = {"loss_total": total.item()}
    out.update({f"loss_{name}": t.item() for name, t in terms.items()})
    out["approx_error"] = state.approx_error
    return out


def heldout_approx_error(model: EraModel, dataset: Dataset) -> float:
    with ad.no_tape(), model.evaluating():
        state = cascade_forward(model, Tensor(dataset.features))
    return approximation_error(state.f_t, state.approximations[-1])


def trainable_parameters(model: Module) -> list[tuple[str, Tensor]]:
    return [(n, p) for n, p in model.named_parameters() if p.requires_grad]


def make_optimizer(model: Module, cfg: TrainConfig) -> SGD:
    return SGD(trainable_parameters(model), cfg.momentum, cfg.weight_decay)


def _epoch_record(model, cfg, epoch, losses, test):
    K = cfg.weights.K
    acc = mode_accuracies(model, test, mu=cfg.weights.mu)
    rec = {"epoch": epoch}
    for key in metric_keys(K)[1:]:
        if key.startswith("loss_"):
            rec[key] = float(losses[key])
    rec["approx_error"] = heldout_approx_error(model, test)
    rec["acc_s"], rec["acc_t"], rec["acc_st"] = acc["s"], acc["t"], acc["st"]
    return rec


def distill(model: EraModel, train: Dataset, test: Dataset, cfg: TrainConfig,
            optimizer: SGD | None = None, start_epoch: int = 0, stop_epoch: int | None = None,
            on_epoch: Callable[[dict, SGD], None] | None = None):
    """Jointly train student, projections and branches against a frozen teacher.

    The history holds one record per epoch (``metric_keys``).  Epoch 0 is
    measured before any update: its losses come from an eval-mode pass over
    the training set.  Later records average the training-step losses.
    ``approx_error`` and the accuracies are always measured on ``test`` in
    eval mode.  ``start_epoch``/``stop_epoch`` allow split runs that resume
    from a checkpoint.
    """
    if len(train) == 0:
        raise InputError("training set is empty")
    if model.K != cfg.weights.K:
        raise ParameterError(f"model has K = {model.K} but the loss weights say K = {cfg.weights.K}")
    optimizer = optimizer or make_optimizer(model, cfg)
    stop = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    history = []
    if start_epoch == 0:
        rec = _epoch_record(model, cfg, 0, evaluate_losses(model, train, cfg), test)
        history.append(rec)
        if on_epoch:
            on_epoch(rec, optimizer)
    steps_per_epoch = -(-len(train) // cfg.batch_size)
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    model.train()
    for epoch in range(start_epoch, stop):
        lr = learning_rate_at(cfg, epoch)
        sums: dict[str, float] = {}
        batch_list = batches(train, cfg.batch_size, cfg.seed, epoch)
        for i, batch in enumerate(batch_list):
            frac = (epoch * steps_per_epoch + i) / total_steps
            metrics = train_step(model, optimizer, batch, cfg, frac, lr)
            for key, v in metrics.items():
                sums[key] = sums.get(key, 0.0) + v
        losses = {key: v / len(batch_list) for key, v in sums.items()}
        rec = _epoch_record(model, cfg, epoch + 1, losses, test)
        model.train()
        history.append(rec)
        log.debug("epoch %d: %s", epoch + 1, rec)
        if on_epoch:
            on_epoch(rec, optimizer)
    return model, history


# --------------------------------------------------------- plain CE training

def classifier_loss(encoder: MlpEncoder, head: ClassifierHead, x, y) -> Tensor:
    probs = ad.softmax_with_temperature(head(encoder(Tensor(x))), 1.0)
    return cross_entropy(probs, y)


def classifier_accuracy(encoder: MlpEncoder, head: ClassifierHead, dataset: Dataset) -> float:
    with ad.no_tape(), encoder.evaluating():
        logits = head(encoder(Tensor(dataset.features)))
    return top1_accuracy(logits, dataset.labels)


class _Pair(Module):
    def __init__(self, encoder, head):
        self.encoder, self.head = encoder, head

    def _children(self):
        return [("encoder", self.encoder), ("head", self.head)]


def train_classifier(encoder: MlpEncoder, head: ClassifierHead, train: Dataset, test: Dataset,
                     cfg: TrainConfig, on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Cross-entropy training of ``head(encoder(x))``; parameters initialised from ``cfg.seed``."""
    if len(train) == 0:
        raise InputError("training set is empty")
    pair = _Pair(encoder, head)
    pair.reset_parameters(np.random.default_rng(cfg.seed))
    optimizer = SGD(pair.named_parameters(), cfg.momentum, cfg.weight_decay)
    history = []
    pair.train()
    for epoch in range(cfg.epochs):
        lr = learning_rate_at(cfg, epoch)
        total = 0.0
        batch_list = batches(train, cfg.batch_size, cfg.seed, epoch)
        for x, y in batch_list:
            optimizer.zero_grad()
            with Tape() as tape:
                loss = _term("ce", classifier_loss, encoder, head, x, y)
            tape.backward(loss)
            optimizer.step(lr)
            total += loss.item()
        rec = {"epoch": epoch + 1, "loss_ce": total / len(batch_list),
               "acc_train": classifier_accuracy(encoder, head, train),
               "acc_test": classifier_accuracy(encoder, head, test)}
        history.append(rec)
        if on_epoch:
            on_epoch(rec)
    pair.eval()
    return history


def train_teacher(encoder_spec: EncoderSpec, num_classes: int, train: Dataset, test: Dataset,
                  cfg: TrainConfig, on_epoch=None):
    """Pre-train a teacher with cross-entropy; returned frozen and in eval mode."""
    encoder = encoder_spec.build()
    head = ClassifierHead(encoder_spec.output_dim, num_classes)
    history = train_classifier(encoder, head, train, test, cfg, on_epoch)
    encoder.freeze()
    head.freeze()
    encoder.eval()
    return encoder, head, history
