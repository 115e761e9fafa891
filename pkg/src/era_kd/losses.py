"""Scalar training objectives and the per-branch weighting schedules."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, InputError, ParameterError

LOG_FLOOR = 1e-12

SCHEDULES = (
    "exp_decay",
    "linear_decay",
    "constant",
    "increasing_linear",
    "increasing_exp",
    "biased_first",
    "linear_fade",
)


@dataclass(frozen=True)
class LossWeights:
    """Loss balancing terms.

    ``alpha``/``beta`` weight cross-entropy and the KL term of the logit loss,
    ``gamma``/``lambda_`` weight the per-branch feature and classification
    losses, ``mu`` is the ST-mode merge coefficient.
    """

    alpha: float = 1.0
    beta: float = 2.0
    gamma: float = 1.0
    lambda_: float = 1.0
    temperature: float = 4.0
    K: int = 4
    schedule: str = "exp_decay"
    mu: float = 0.5

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "lambda_"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")
        if self.K < 0:
            raise ParameterError(f"K must be >= 0, got {self.K}")
        if self.schedule not in SCHEDULES:
            raise ParameterError(f"unknown schedule {self.schedule!r}; expected one of {SCHEDULES}")
        if not 0.0 <= self.mu <= 1.0:
            raise ParameterError(f"mu must lie in [0, 1], got {self.mu}")

    def replace(self, **kw) -> "LossWeights":
        return replace(self, **kw)


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log probs[label]`` with the log clamped at 1e-12."""
    labels = np.asarray(labels, dtype=np.int64)
    if probs.values.ndim != 2 or labels.shape != (probs.shape[0],):
        raise DimensionError(f"cross_entropy: probs {probs.shape} vs labels {labels.shape}")
    M = probs.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= M):
        raise InputError(f"labels must lie in [0, {M}), got range [{labels.min()}, {labels.max()}]")
    picked = ad.pick(probs, labels)
    return ad.scale(ad.mean(ad.log(picked, floor=LOG_FLOOR)), -1.0)


def kl_distillation(logits_t: Tensor, logits_s: Tensor, T: float) -> Tensor:
    """``T**2 * mean_batch KL(softmax(g_t/T) || softmax(g_s/T))``.

    The teacher side is treated as a constant.
    """
    if logits_t.shape != logits_s.shape:
        raise DimensionError(f"kl_distillation: shape mismatch {logits_t.shape} vs {logits_s.shape}")
    teacher = ad.detach(logits_t)
    p_t = ad.softmax_with_temperature(teacher, T)
    log_p_t = ad.log_softmax_with_temperature(teacher, T)
    log_p_s = ad.log_softmax_with_temperature(logits_s, T)
    per_entry = ad.mul(p_t, ad.sub(log_p_t, log_p_s))
    n = logits_s.shape[0]
    return ad.scale(ad.sum(per_entry), T * T / n)


def feature_mse(target: Tensor, pred: Tensor) -> Tensor:
    """Mean over the batch of squared Euclidean distance; gradient to ``pred`` only."""
    if target.shape != pred.shape or pred.values.ndim != 2:
        raise DimensionError(f"feature_mse: shape mismatch {target.shape} vs {pred.shape}")
    diff = ad.sub(pred, ad.detach(target))
    return ad.scale(ad.sum(ad.square(diff)), 1.0 / pred.shape[0])


def feature_mse_attached(target: Tensor, pred: Tensor) -> Tensor:
    """Like :func:`feature_mse` but lets gradient reach ``target`` as well."""
    if target.shape != pred.shape or pred.values.ndim != 2:
        raise DimensionError(f"feature_mse: shape mismatch {target.shape} vs {pred.shape}")
    diff = ad.sub(pred, target)
    return ad.scale(ad.sum(ad.square(diff)), 1.0 / pred.shape[0])


def logit_distillation(logits_s: Tensor, logits_t: Tensor, labels, weights: LossWeights) -> Tensor:
    """``alpha * CE(y, softmax(g_s)) + beta * T**2 * KL``."""
    ce = cross_entropy(ad.softmax_with_temperature(logits_s, 1.0), labels)
    kl = kl_distillation(logits_t, logits_s, weights.temperature)
    return ad.add(ad.scale(ce, weights.alpha), ad.scale(kl, weights.beta))


def schedule_s(k: int, kind: str, epoch_fraction: float = 0.0, K: int | None = None) -> float:
    """Per-branch weight ``s_k``."""
    if k < 0 or (K is not None and k > K):
        raise ParameterError(f"branch index {k} outside [0, {K}]")
    if kind == "exp_decay":
        return 1.0 / 2.0 ** k
    if kind == "linear_decay":
        return 1.0 / (1.0 + k)
    if kind == "constant":
        return 1.0
    if kind == "increasing_linear":
        return float(k)
    if kind == "increasing_exp":
        return 2.0 ** k
    if kind == "biased_first":
        return 1.0 if k == 0 else 1e-6
    if kind == "linear_fade":
        return 1.0 if k == 0 else 1.0 - float(epoch_fraction)
    raise ParameterError(f"unknown schedule {kind!r}; expected one of {SCHEDULES}")


def total_era_loss(fd_losses: Sequence, cls_losses: Sequence, kd_loss,
                   weights: LossWeights, epoch_fraction: float = 0.0) -> Tensor:
    """``L_KD + sum_k s_k * (gamma * L_FD_k + lambda * L_cls_k)``.

    ``fd_losses`` has K+1 entries (k = 0..K); ``cls_losses`` has K entries
    for k = 1..K, the k = 0 classification term being zero by definition.
    Entries may be scalar Tensors or plain floats.
    """
    K = weights.K
    if len(fd_losses) != K + 1:
        raise ContractError(f"expected {K + 1} feature losses, got {len(fd_losses)}")
    if len(cls_losses) != K:
        raise ContractError(f"expected {K} classification losses, got {len(cls_losses)}")
    zero = Tensor(0.0)
    total = ad.as_tensor(kd_loss)
    for k in range(K + 1):
        s = schedule_s(k, weights.schedule, epoch_fraction, K)
        fd = ad.scale(ad.as_tensor(fd_losses[k]), weights.gamma)
        cls = zero if k == 0 else ad.as_tensor(cls_losses[k - 1])
        branch = ad.add(fd, ad.scale(cls, weights.lambda_))
        total = ad.add(total, ad.scale(branch, s))
    return total
