"""Finite-difference sweep over every differentiable op, block and loss."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, check_gradients
from .losses import (
    LossWeights,
    cross_entropy,
    feature_mse,
    kl_distillation,
    logit_distillation,
    total_era_loss,
)
from .nn import BatchNormLayer, ClassifierHead, LinearLayer, MlpEncoder, ResMBranch

EPS = 1e-5
TOL = 1e-4
FLOOR = 1e-5


@dataclass
class CaseResult:
    name: str
    covers: str
    max_rel_error: float = 0.0
    worst_seed: int | None = None
    seeds: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOL


@dataclass
class SuiteReport:
    cases: list[CaseResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases)

    @property
    def max_rel_error(self) -> float:
        return max((c.max_rel_error for c in self.cases), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for c in self.cases:
            status = "ok  " if c.passed else "FAIL"
            out.append(f"{status} {c.name:<26} {c.covers:<28} max rel err {c.max_rel_error:.3e}"
                       f" over {c.seeds} seeds (worst seed {c.worst_seed})")
        return out


def _r(rng, *shape, s=1.0):
    return Tensor(rng.standard_normal(shape) * s)


# Each builder maps an rng to (f, inputs) for check_gradients.

def _matmul(rng):
    return (lambda a, b: ad.sum(ad.square(ad.matmul(a, b)))), [_r(rng, 3, 4), _r(rng, 4, 2)]


def _elementwise(rng):
    def f(a, b):
        h = ad.add(ad.mul(a, b), ad.scale(ad.sub(a, b), 0.7))
        return ad.mean(ad.square(h))
    return f, [_r(rng, 4, 3), _r(rng, 4, 3)]


def _relu(rng):
    # linear readout so gradient reaches both sides of the kink; inputs kept off 0
    w = Tensor(rng.standard_normal((5, 4)))
    a = rng.standard_normal((5, 4))
    a += np.sign(a) * 0.05
    return (lambda x: ad.sum(ad.mul(ad.relu(x), w))), [Tensor(a)]


def _log_pick(rng):
    y = rng.integers(0, 3, 5)
    return (lambda a: ad.mean(ad.pick(ad.log(a, 1e-12), y))), [Tensor(rng.uniform(0.5, 2.0, (5, 3)))]


def _softmax(rng):
    w = _r(rng, 4, 3)
    T = float(rng.uniform(0.5, 5.0))
    return (lambda g: ad.sum(ad.mul(ad.softmax_with_temperature(g, T), w))), [_r(rng, 4, 3, s=2.0)]


def _log_softmax(rng):
    w = _r(rng, 4, 3)
    T = float(rng.uniform(0.5, 5.0))
    return (lambda g: ad.sum(ad.mul(ad.log_softmax_with_temperature(g, T), w))), [_r(rng, 4, 3, s=2.0)]


def _linear_op(rng):
    w = _r(rng, 5, 2)
    return (lambda x, W, b: ad.sum(ad.mul(ad.linear(x, W, b), w))), \
        [_r(rng, 5, 3), _r(rng, 2, 3), _r(rng, 2)]


def _batch_norm_op(rng):
    w = _r(rng, 6, 3)
    def f(x, g, b):
        out, _, _ = ad.batch_norm(x, g, b, 1e-5)
        return ad.sum(ad.mul(out, w))
    return f, [_r(rng, 6, 3), Tensor(rng.uniform(0.5, 1.5, 3)), _r(rng, 3)]


def _batch_norm_eval_op(rng):
    w = _r(rng, 4, 3)
    mean, var = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    return (lambda x, g, b: ad.sum(ad.mul(ad.batch_norm_eval(x, mean, var, g, b, 1e-5), w))), \
        [_r(rng, 4, 3), Tensor(rng.uniform(0.5, 1.5, 3)), _r(rng, 3)]


def _randomize(module, rng):
    """He-scaled weights, gammas in [0.5, 1.5], small random shifts.

    Zero-initialised layers get random weights too so their gradients are
    exercised.  Keeping gammas and weight scales away from zero avoids batch
    statistics so degenerate that central differences lose their precision.
    """
    for name, p in module.named_parameters():
        if name.endswith("gamma"):
            p.values[...] = rng.uniform(0.5, 1.5, p.shape)
        elif name.endswith("weight"):
            p.values[...] = rng.standard_normal(p.shape) * np.sqrt(2.0 / p.shape[1])
        else:
            p.values[...] = rng.standard_normal(p.shape) * 0.3
    return module


def _module_check(module, x, w):
    names = [n for n, _ in module.named_parameters()]
    params = [p for _, p in module.named_parameters()]

    def f(xin, *leaves):
        module.bind_parameters(dict(zip(names, leaves)))
        return ad.sum(ad.mul(module(xin), w))
    return f, [x, *params]


def _linear_layer(rng):
    layer = _randomize(LinearLayer(3, 2), rng)
    return _module_check(layer, _r(rng, 4, 3), _r(rng, 4, 2))


def _bn_layer(rng):
    layer = _randomize(BatchNormLayer(3), rng)
    return _module_check(layer, _r(rng, 8, 3), _r(rng, 8, 3))


def _encoder(rng):
    enc = _randomize(MlpEncoder(3, [4], 2), rng)
    return _module_check(enc, _r(rng, 8, 3), _r(rng, 8, 2))


def _head(rng):
    head = _randomize(ClassifierHead(3, 4), rng)
    return _module_check(head, _r(rng, 4, 3), _r(rng, 4, 4))


def _branch(rng):
    br = _randomize(ResMBranch(3, 4, m=2), rng)
    return _module_check(br, _r(rng, 8, 3), _r(rng, 8, 4))


def _cross_entropy(rng):
    y = rng.integers(0, 4, 5)
    return (lambda g: cross_entropy(ad.softmax_with_temperature(g, 1.0), y)), [_r(rng, 5, 4)]


def _kl(rng):
    # teacher logits are constants by contract; differentiate the student side
    T = float(rng.uniform(1.0, 5.0))
    gt = _r(rng, 5, 4, s=2.0)
    return (lambda gs: kl_distillation(gt, gs, T)), [_r(rng, 5, 4, s=2.0)]


def _logit_loss(rng):
    y = rng.integers(0, 4, 5)
    w = LossWeights(alpha=float(rng.uniform(0.2, 2)), beta=float(rng.uniform(0.2, 3)),
                    temperature=float(rng.uniform(1.0, 5.0)))
    gt = _r(rng, 5, 4, s=2.0)
    return (lambda gs: logit_distillation(gs, gt, y, w)), [_r(rng, 5, 4, s=2.0)]


def _feature_loss(rng):
    target = _r(rng, 4, 8)
    return (lambda pred: feature_mse(target, pred)), [_r(rng, 4, 8)]


def _total_components(rng):
    K = 2
    w = LossWeights(gamma=float(rng.uniform(0.2, 2)), lambda_=float(rng.uniform(0.2, 2)), K=K)
    def f(kd, fd0, fd1, fd2, c1, c2):
        return total_era_loss([fd0, fd1, fd2], [c1, c2], kd, w, 0.3)
    return f, [Tensor(rng.uniform(0, 3)) for _ in range(6)]


# ---------------------------------------------------------- ERA model cases

def _toy_era(rng, K=2, m=2):
    """Small fully random model (zero-init layers included)."""
    from .model import EraModel  # avoid an import cycle at module load
    teacher = MlpEncoder(3, [], 3)
    head_t = ClassifierHead(3, 3)
    model = EraModel(MlpEncoder(3, [], 2), teacher, ClassifierHead(2, 3), head_t, K=K, m=m,
                     branch_width=2)
    _randomize(model, rng)
    teacher.freeze()
    head_t.freeze()
    model.train()
    return model


def _multi_check(g, params, eps):
    """check_gradients for every term of dict-valued ``g()`` in one sweep.

    ``params`` are the model's own leaf tensors; they are perturbed in place
    and restored.
    """
    analytic = {}
    with ad.no_tape():
        scale = {k: max(1.0, abs(v.item())) for k, v in g().items()}
    for key in scale:
        for p in params:
            p.grad = None
        with ad.Tape() as tape:
            out = g()[key]
        tape.backward(out)
        analytic[key] = [p.grad.copy() for p in params]
    numeric = {key: [np.zeros_like(p.values) for p in params] for key in analytic}
    with ad.no_tape():
        for i, p in enumerate(params):
            for idx in np.ndindex(*p.shape):
                keep = p.values[idx]
                p.values[idx] = keep + eps
                hi = {k: v.item() for k, v in g().items()}
                p.values[idx] = keep - eps
                lo = {k: v.item() for k, v in g().items()}
                p.values[idx] = keep
                for key in numeric:
                    numeric[key][i][idx] = (hi[key] - lo[key]) / (2.0 * eps)
    return {key: max(float(ad.relative_error(a, n, FLOOR * scale[key]).max())
                     for a, n in zip(analytic[key], numeric[key]))
            for key in analytic}


def era_terms_check(rng, eps: float = EPS, detach: bool = True) -> dict[str, float]:
    """Max relative error of every ERA loss term w.r.t. all trainable parameters.

    With detached targets the loss is checked with targets frozen at the base
    point, which is the function whose gradient the detached graph computes.
    The attached variant (only the total) uses single-block branches to keep
    the sweep short.
    """
    from .distiller import TrainConfig, era_loss
    from .model import cascade_forward
    model = _toy_era(rng, m=2 if detach else 1)
    x, y = rng.standard_normal((8, 3)), rng.integers(0, 3, 8)
    cfg = TrainConfig(weights=LossWeights(K=model.K), detach_targets=detach)
    with ad.no_tape():
        base = cascade_forward(model, x)
    fixed = [t.values.copy() for t in base.targets] if detach else None

    def g():
        total, terms, _ = era_loss(model, x, y, cfg, 0.25, fixed_targets=fixed)
        if not detach:
            return {"total": total}
        out = {k: v for k, v in terms.items() if k != "kd"}
        out["total"] = total
        return out
    return _multi_check(g, [p for p in model.parameters() if p.requires_grad], eps)


CASES: list[tuple[str, str, Callable]] = [
    ("matmul", "op", _matmul),
    ("add/sub/mul/scale/square", "op", _elementwise),
    ("relu", "op", _relu),
    ("log/pick", "op", _log_pick),
    ("softmax_T", "op", _softmax),
    ("log_softmax_T", "op", _log_softmax),
    ("linear", "op", _linear_op),
    ("batch_norm (train)", "op", _batch_norm_op),
    ("batch_norm (eval)", "op", _batch_norm_eval_op),
    ("LinearLayer", "block", _linear_layer),
    ("BatchNormLayer", "block", _bn_layer),
    ("MlpEncoder", "block", _encoder),
    ("ClassifierHead", "block", _head),
    ("ResMBranch", "block", _branch),
    ("cross_entropy", "loss: logit CE", _cross_entropy),
    ("kl_distillation", "loss: logit KL", _kl),
    ("logit_distillation", "loss: logit KD (CE + KL)", _logit_loss),
    ("feature_mse", "loss: feature (FitNet)", _feature_loss),
    ("total_era_loss", "loss: total (components)", _total_components),
]

# term key -> (case name, coverage label)
ERA_TERMS = {
    "fd_0": ("branch FD k=0", "loss: per-branch feature"),
    "fd_1": ("branch FD k=1", "loss: per-branch feature"),
    "fd_2": ("branch FD k=2", "loss: per-branch feature"),
    "cls_1": ("branch cls k=1", "loss: per-branch class"),
    "cls_2": ("branch cls k=2", "loss: per-branch class"),
    "total": ("ERA total (detached)", "loss: total"),
}


def _update(res: CaseResult, err: float, seed: int) -> None:
    res.seeds += 1
    if res.worst_seed is None or err > res.max_rel_error:
        res.max_rel_error, res.worst_seed = err, seed


def run_suite(seeds: int = 100, eps: float = EPS, cases=None, era: bool = True) -> SuiteReport:
    """Run every case on ``seeds`` random instantiations (seeds 0..seeds-1)."""
    start = time.perf_counter()
    report = SuiteReport()
    for idx, (name, covers, builder) in enumerate(CASES if cases is None else cases):
        res = CaseResult(name, covers)
        for seed in range(seeds):
            f, inputs = builder(np.random.default_rng([seed, idx]))
            _update(res, check_gradients(f, inputs, eps=eps, tol=TOL).max_rel_error, seed)
        report.cases.append(res)
    if era:
        detached = {k: CaseResult(*v) for k, v in ERA_TERMS.items()}
        attached = CaseResult("ERA total (attached)", "loss: total")
        for seed in range(seeds):
            for key, err in era_terms_check(np.random.default_rng([seed, 1000]), eps).items():
                _update(detached[key], err, seed)
            errs = era_terms_check(np.random.default_rng([seed, 1001]), eps, detach=False)
            _update(attached, errs["total"], seed)
        report.cases += list(detached.values()) + [attached]
    report.seconds = time.perf_counter() - start
    return report
