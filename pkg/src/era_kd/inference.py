"""S / T / ST prediction paths, branch truncation and accuracy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InputError, ParameterError
from .model import EraModel, approximate
from .nn import BatchNormLayer, LinearLayer

MODES = ("s", "t", "st")


@dataclass(frozen=True)
class InferenceSpec:
    mode: str = "st"
    mu: float = 0.5
    branches: int | None = None  # None means all K branches

    def __post_init__(self):
        mode = self.mode.lower()
        if mode not in MODES:
            raise ParameterError(f"mode must be one of S, T, ST; got {self.mode!r}")
        object.__setattr__(self, "mode", mode)
        if not 0.0 <= self.mu <= 1.0:
            raise ParameterError(f"mu must lie in [0, 1], got {self.mu}")
        if self.branches is not None and self.branches < 0:
            raise ParameterError(f"branch count must be >= 0, got {self.branches}")


def _student_probs(model, f_s):
    return ad.softmax_with_temperature(model.head_s(f_s), 1.0)


def _teacher_path_probs(model, f_s, j):
    _, _, approx = approximate(model, f_s, j)
    return ad.softmax_with_temperature(model.head_t(approx[-1]), 1.0)


def infer(model: EraModel, x, spec: InferenceSpec = InferenceSpec()) -> Tensor:
    """Class probabilities for ``x`` under the requested mode.

    BN layers are switched to eval mode for the call and restored afterwards.
    """
    j = model.K if spec.branches is None else spec.branches
    if j > model.K:
        raise ParameterError(f"requested {j} branches but the model has K = {model.K}")
    x = ad.as_tensor(x)
    with ad.no_tape(), model.evaluating():
        f_s = model.student(x)
        if spec.mode == "s":
            return _student_probs(model, f_s)
        p_t = _teacher_path_probs(model, f_s, j)
        if spec.mode == "t":
            return p_t
        p_s = _student_probs(model, f_s)
        return ad.add(ad.scale(p_s, spec.mu), ad.scale(p_t, 1.0 - spec.mu))


def top1_accuracy(probs, labels) -> float:
    probs = np.asarray(probs.values if isinstance(probs, Tensor) else probs)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise InputError("cannot score an empty dataset")
    return float((probs.argmax(axis=1) == labels).mean())


def evaluate_accuracy(model: EraModel, dataset, spec: InferenceSpec = InferenceSpec()) -> float:
    if len(dataset) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    return top1_accuracy(infer(model, dataset.features, spec), dataset.labels)


def mode_accuracies(model: EraModel, dataset, mu: float = 0.5, branches: int | None = None) -> dict:
    """S/T/ST accuracies from one shared forward pass."""
    if len(dataset) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    j = model.K if branches is None else branches
    if j > model.K:
        raise ParameterError(f"requested {j} branches but the model has K = {model.K}")
    with ad.no_tape(), model.evaluating():
        f_s = model.student(Tensor(dataset.features))
        p_s = _student_probs(model, f_s)
        p_t = _teacher_path_probs(model, f_s, j)
        p_st = ad.add(ad.scale(p_s, mu), ad.scale(p_t, 1.0 - mu))
    y = dataset.labels
    return {"s": top1_accuracy(p_s, y), "t": top1_accuracy(p_t, y), "st": top1_accuracy(p_st, y)}


# ------------------------------------------------------------ cost accounting

def _linear_cost(layer):
    macs = layer.in_features * layer.out_features
    return layer.num_parameters(), macs


def module_cost(module) -> tuple[int, int]:
    """(parameter count, multiply-accumulates per sample); BN buffers excluded."""
    params = macs = 0
    for m in module.modules():
        if isinstance(m, LinearLayer):
            p, c = _linear_cost(m)
            params += p
            macs += c
        elif isinstance(m, BatchNormLayer):
            params += m.num_parameters()
            macs += m.num_features
    return params, macs


def mode_cost(model: EraModel, mode: str = "st", branches: int | None = None) -> dict:
    """Parameters and MACs per sample used by one inference path.

    ``overhead_*`` counts only the projections and branches that T/ST modes
    add on top of the student (the teacher head is reused, not added).
    """
    mode = InferenceSpec(mode=mode).mode
    parts = [model.student]
    extra = model.mbrnet_modules(branches) if mode in ("t", "st") else []
    if mode in ("s", "st"):
        parts.append(model.head_s)
    if mode in ("t", "st"):
        parts += extra
        parts.append(model.head_t)
    params = macs = 0
    for part in parts:
        p, c = module_cost(part)
        params += p
        macs += c
    over = [module_cost(m) for m in extra]
    return {"params": params, "macs": macs,
            "overhead_params": sum(p for p, _ in over), "overhead_macs": sum(c for _, c in over)}
