"""The multi-branch residual model and its cascaded forward pass."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, ParameterError, StateError
from .nn import ClassifierHead, LinearLayer, MlpEncoder, Module, ResMBranch

BRANCH_FEEDS = ("cascaded", "parallel")


class EraModel(Module):
    """Student encoder, projections P_0..P_K, branches 1..K and both heads.

    ``projections[k]`` maps the k-th branch output (the student features for
    k = 0) to the teacher width.  Branch outputs have ``branch_width``
    channels (teacher width by default); hidden blocks default to the
    branch's input width.  With ``branch_feed="cascaded"`` branch 1
    reads the student features and branch k > 1 reads branch k-1's output;
    with ``"parallel"`` every branch reads the student features.
    """

    def __init__(self, student: MlpEncoder, teacher: MlpEncoder, head_s: ClassifierHead,
                 head_t: ClassifierHead, K: int = 4, m: int = 2,
                 branch_width: int | None = None, branch_feed: str = "cascaded",
                 branch_hidden: int | None = None):
        if K < 0:
            raise ParameterError(f"K must be >= 0, got {K}")
        if branch_feed not in BRANCH_FEEDS:
            raise ParameterError(f"branch_feed must be one of {BRANCH_FEEDS}, got {branch_feed!r}")
        if head_s.linear.in_features != student.output_dim:
            raise DimensionError("student head width does not match student features")
        if head_t.linear.in_features != teacher.output_dim:
            raise DimensionError("teacher head width does not match teacher features")
        if head_s.num_classes != head_t.num_classes:
            raise DimensionError("student and teacher heads disagree on the class count")
        if teacher.input_dim != student.input_dim:
            raise DimensionError("student and teacher take inputs of different width")
        self.student = student
        self.teacher = teacher
        self.head_s = head_s
        self.head_t = head_t
        self.K = K
        self.m = m
        self.branch_feed = branch_feed
        c_s, c_t = student.output_dim, teacher.output_dim
        self.branch_width = c_t if not branch_width else branch_width
        self.branch_hidden = branch_hidden
        w = self.branch_width
        self.branches = []
        for k in range(1, K + 1):
            in_dim = c_s if (k == 1 or branch_feed == "parallel") else w
            self.branches.append(ResMBranch(in_dim, w, m=m, hidden=branch_hidden))
        self.projections = [LinearLayer(c_s, c_t)] + [LinearLayer(w, c_t) for _ in range(K)]

    def _children(self):
        kids = [("student", self.student), ("teacher", self.teacher),
                ("head_s", self.head_s), ("head_t", self.head_t)]
        kids += [(f"proj.{k}", p) for k, p in enumerate(self.projections)]
        kids += [(f"branch.{k + 1}", b) for k, b in enumerate(self.branches)]
        return kids

    def reset_parameters(self, rng):
        # teacher and head_t arrive pre-trained
        self.student.reset_parameters(rng)
        self.head_s.reset_parameters(rng)
        for p in self.projections:
            p.reset_parameters(rng)
        for b in self.branches:
            b.reset_parameters(rng)

    def train(self, mode: bool = True) -> "EraModel":
        super().train(mode)
        self.teacher.eval()
        return self

    @property
    def num_classes(self) -> int:
        return self.head_s.num_classes

    def topology(self) -> dict:
        return {
            "kind": "era",
            "input_dim": self.student.input_dim,
            "student_widths": list(self.student.widths),
            "teacher_widths": list(self.teacher.widths),
            "num_classes": self.num_classes,
            "K": self.K,
            "m": self.m,
            "branch_width": self.branch_width,
            "branch_hidden": self.branch_hidden,
            "branch_feed": self.branch_feed,
        }

    def mbrnet_modules(self, branches: int | None = None) -> list[Module]:
        """Projections P_0..P_j and branches 1..j used by T/ST inference."""
        j = self.K if branches is None else branches
        return self.projections[: j + 1] + self.branches[:j]


@dataclass
class ResidualState:
    f_s: Tensor
    branch_outputs: list[Tensor]
    projected: list[Tensor]
    approximations: list[Tensor]
    f_t: Tensor | None = None
    targets: list[Tensor] = field(default_factory=list)
    approx_error: float | None = None

    @property
    def K(self) -> int:
        return len(self.branch_outputs)


def approximate(model: EraModel, f_s: Tensor, branches: int | None = None):
    """Run MBRNet on student features; returns (branch_outputs, projected, approximations)."""
    j = model.K if branches is None else branches
    if not 0 <= j <= model.K:
        raise ParameterError(f"branch count {j} outside [0, {model.K}]")
    projected = [model.projections[0](f_s)]
    approx = [projected[0]]
    outs = []
    h = f_s
    for k in range(1, j + 1):
        d = model.branches[k - 1](h if model.branch_feed == "cascaded" else f_s)
        outs.append(d)
        h = d
        p = model.projections[k](d)
        projected.append(p)
        approx.append(ad.add(approx[-1], p))
    return outs, projected, approx


def teacher_features(model: EraModel, x: Tensor) -> Tensor:
    return ad.detach(model.teacher(x))


def cascade_forward(model: EraModel, x, detach_targets: bool = True,
                    with_targets: bool = True, fixed_targets=None) -> ResidualState:
    """Student forward, the cumulative approximations, and residual targets.

    ``fixed_targets`` replaces the computed targets by given constants; the
    gradient checker uses it to freeze detached targets at the base point.
    """
    x = ad.as_tensor(x)
    if x.values.ndim != 2 or x.shape[1] != model.student.input_dim:
        raise DimensionError(f"input width {x.shape} does not match student input {model.student.input_dim}")
    f_s = model.student(x)
    outs, projected, approx = approximate(model, f_s)
    state = ResidualState(f_s=f_s, branch_outputs=outs, projected=projected, approximations=approx)
    if with_targets:
        f_t = teacher_features(model, x)
        state.f_t = f_t
        if fixed_targets is None:
            state.targets = residual_targets(f_t, state, detach=detach_targets)
        else:
            if len(fixed_targets) != model.K + 1:
                raise StateError(f"need {model.K + 1} fixed targets, got {len(fixed_targets)}")
            state.targets = [Tensor(np.array(t, dtype=np.float64)) for t in fixed_targets]
        state.approx_error = approximation_error(f_t, approx[-1])
    return state


def approximation_error(f_t: Tensor, approx: Tensor) -> float:
    """Mean over the batch of the Euclidean distance to the teacher features."""
    # a diverging run may overflow to inf here; the next forward reports it
    with np.errstate(over="ignore"):
        return float(np.linalg.norm(f_t.values - approx.values, axis=1).mean())


def residual_targets(f_t: Tensor, state: ResidualState, detach: bool = True) -> list[Tensor]:
    """Targets ``[f_t, f_t - f̂_0, ..., f_t - f̂_{K-1}]`` evaluated directly."""
    K = state.K
    if len(state.approximations) < K:
        raise StateError(f"need approximations 0..{K - 1}, have {len(state.approximations)}")
    targets = [f_t]
    for k in range(1, K + 1):
        prev = state.approximations[k - 1]
        if detach:
            targets.append(Tensor._wrap(f_t.values - prev.values, "residual_target"))
        else:
            targets.append(ad.sub(f_t, prev))
    return targets


def residual_targets_recursive(f_t: np.ndarray, projected: list[np.ndarray]) -> list[np.ndarray]:
    """Same targets through ``Δf_{k+1} = Δf_k - P_k Δf̂_k`` (for cross-checking)."""
    out = [np.asarray(f_t, dtype=np.float64)]
    for p in projected[:-1]:
        out.append(out[-1] - p)
    return out


def build_era_model(teacher: MlpEncoder, head_t: ClassifierHead, student_hidden: list[int],
                    student_dim: int, K: int = 4, m: int = 2, branch_width: int | None = None,
                    branch_feed: str = "cascaded", head_t_frozen: bool = True,
                    seed: int = 0, branch_hidden: int | None = None,
                    student_final_relu: bool = False) -> EraModel:
    """Fresh student/MBRNet around a pre-trained teacher; teacher frozen."""
    student = MlpEncoder(teacher.input_dim, list(student_hidden), student_dim,
                         final_relu=student_final_relu)
    head_s = ClassifierHead(student_dim, head_t.num_classes)
    model = EraModel(student, teacher, head_s, head_t, K=K, m=m,
                     branch_width=branch_width, branch_feed=branch_feed,
                     branch_hidden=branch_hidden)
    model.reset_parameters(np.random.default_rng(seed))
    teacher.freeze()
    teacher.eval()
    head_t.set_trainable(not head_t_frozen)
    return model
