"""Parametric layers: linear, batch norm, MLP encoders, heads and ResM branches."""
from __future__ import annotations

from contextlib import contextmanager
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, ParameterError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Module:
    """Minimal parameter container.

    Subclasses list their children in ``_children`` (name, module) order;
    traversal order is fixed so parameter naming and initialisation are
    deterministic.
    """

    def _children(self) -> list[tuple[str, "Module"]]:
        return []

    def _own_parameters(self) -> list[tuple[str, Tensor]]:
        return []

    def _own_buffers(self) -> list[tuple[str, Tensor]]:
        return []

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(prefix + n, t) for n, t in self._own_parameters()]
        for name, child in self._children():
            out.extend(child.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(prefix + n, t) for n, t in self._own_buffers()]
        for name, child in self._children():
            out.extend(child.named_buffers(f"{prefix}{name}."))
        return out

    def named_state(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return self.named_parameters(prefix) + self.named_buffers(prefix)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()], dtype=np.int64))

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def freeze(self) -> None:
        self.set_trainable(False)

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            if isinstance(m, BatchNormLayer):
                m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    @contextmanager
    def evaluating(self):
        """Temporarily switch every batch norm to eval mode."""
        saved = [(m, m.training) for m in self.modules() if isinstance(m, BatchNormLayer)]
        self.eval()
        try:
            yield self
        finally:
            for m, mode in saved:
                m.training = mode

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def reset_parameters(self, rng: np.random.Generator) -> None:
        for _, child in self._children():
            child.reset_parameters(rng)

    def bind_parameters(self, tensors: dict[str, Tensor]) -> None:
        """Rebind parameter objects by name (used to differentiate w.r.t. fresh leaves)."""
        for name, _ in self._own_parameters():
            if name in tensors:
                setattr(self, name, tensors[name])
        for cname, child in self._children():
            prefix = cname + "."
            sub = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
            if sub:
                child.bind_parameters(sub)


def init_parameters(block: Module, seed: int) -> None:
    """Seeded initialisation: He-normal weights, zero biases, identity BN.

    The final linear layer of each :class:`ResMBranch` starts at zero.
    """
    block.reset_parameters(np.random.default_rng(seed))


def _check_width(x: Tensor, width: int, what: str) -> None:
    if x.values.ndim != 2 or x.shape[1] != width:
        raise DimensionError(f"{what}: expected input of width {width}, got shape {x.shape}")


class LinearLayer(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 trainable: bool = True):
        if in_features < 1 or out_features < 1:
            raise ParameterError(f"linear layer needs positive sizes, got {in_features}->{out_features}")
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(np.zeros((out_features, in_features)), requires_grad=trainable)
        self.bias = Tensor(np.zeros(out_features), requires_grad=trainable) if bias else None
        self.zero_init = False

    @property
    def trainable(self) -> bool:
        return self.weight.requires_grad

    def _own_parameters(self):
        params = [("weight", self.weight)]
        if self.bias is not None:
            params.append(("bias", self.bias))
        return params

    def reset_parameters(self, rng):
        std = np.sqrt(2.0 / self.in_features)
        w = rng.standard_normal((self.out_features, self.in_features)) * std
        self.weight.values[...] = 0.0 if self.zero_init else w
        if self.bias is not None:
            self.bias.values[...] = 0.0

    def __call__(self, x: Tensor) -> Tensor:
        _check_width(x, self.in_features, "linear")
        return ad.linear(x, self.weight, self.bias)


class BatchNormLayer(Module):
    def __init__(self, num_features: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        if not 0 < momentum < 1:
            raise ParameterError(f"momentum must lie in (0, 1), got {momentum}")
        if not eps > 0:
            raise ParameterError(f"eps must be > 0, got {eps}")
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = Tensor(np.zeros(num_features))
        self.running_var = Tensor(np.ones(num_features))
        self.training = True

    @property
    def mode(self) -> str:
        return "train" if self.training else "eval"

    def _own_parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def _own_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def reset_parameters(self, rng):
        self.gamma.values[...] = 1.0
        self.beta.values[...] = 0.0
        self.running_mean.values[...] = 0.0
        self.running_var.values[...] = 1.0

    def __call__(self, x: Tensor) -> Tensor:
        _check_width(x, self.num_features, "batch norm")
        if not self.training:
            return ad.batch_norm_eval(x, self.running_mean.values, self.running_var.values,
                                      self.gamma, self.beta, self.eps)
        out, mu, var = ad.batch_norm(x, self.gamma, self.beta, self.eps)
        m = self.momentum
        self.running_mean.values[...] = (1 - m) * self.running_mean.values + m * mu
        self.running_var.values[...] = (1 - m) * self.running_var.values + m * var
        return out


class _BlockStack(Module):
    """Sequence of Linear -> BN -> ReLU blocks."""

    def __init__(self, widths: list[int], batch_norm: bool, final_relu: bool):
        self.widths = list(widths)
        self.linears = [LinearLayer(a, b) for a, b in zip(widths[:-1], widths[1:])]
        self.norms = [BatchNormLayer(b) for b in widths[1:]] if batch_norm else []
        self.final_relu = final_relu

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    def _children(self):
        kids = []
        for i, lin in enumerate(self.linears):
            kids.append((f"{i}.linear", lin))
            if self.norms:
                kids.append((f"{i}.bn", self.norms[i]))
        return kids

    def __call__(self, x: Tensor) -> Tensor:
        _check_width(x, self.input_dim, type(self).__name__)
        last = len(self.linears) - 1
        h = x
        for i, lin in enumerate(self.linears):
            h = lin(h)
            if self.norms:
                h = self.norms[i](h)
            if i < last or self.final_relu:
                h = ad.relu(h)
        return h


class MlpEncoder(_BlockStack):
    """Feature extractor built from Linear -> BN -> ReLU blocks.

    The output block drops its ReLU unless ``final_relu`` is set, so features
    are signed.  ``batch_norm=False`` with no hidden widths gives a plain
    affine map.
    """

    def __init__(self, input_dim: int, hidden: list[int], output_dim: int,
                 batch_norm: bool = True, final_relu: bool = False):
        super().__init__([input_dim, *hidden, output_dim], batch_norm, final_relu)


def forward_encoder(enc: MlpEncoder, x: Tensor) -> Tensor:
    return enc(x)


class ClassifierHead(Module):
    def __init__(self, in_features: int, num_classes: int, frozen: bool = False):
        self.linear = LinearLayer(in_features, num_classes)
        if frozen:
            self.freeze()

    @property
    def num_classes(self) -> int:
        return self.linear.out_features

    def _children(self):
        return [("linear", self.linear)]

    def __call__(self, f: Tensor) -> Tensor:
        _check_width(f, self.linear.in_features, "classifier head")
        return self.linear(f)


def forward_head(head: ClassifierHead, f: Tensor) -> Tensor:
    return head(f)


class ResMBranch(_BlockStack):
    """``m`` Linear -> BN -> ReLU blocks with the last ReLU dropped.

    The last linear layer is zero-initialised, so a fresh branch outputs
    exactly zero.
    """

    def __init__(self, input_dim: int, output_dim: int, m: int = 2, hidden: int | None = None):
        if m < 1:
            raise ParameterError(f"a branch needs m >= 1 blocks, got {m}")
        hidden = input_dim if hidden is None else hidden
        super().__init__([input_dim, *([hidden] * (m - 1)), output_dim],
                         batch_norm=True, final_relu=False)
        self.m = m
        self.linears[-1].zero_init = True


def forward_branch(branch: ResMBranch, h: Tensor) -> Tensor:
    return branch(h)
