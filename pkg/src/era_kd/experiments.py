"""Run orchestration: datasets, teacher, ERA runs, CE baselines, ablation grids."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .data import Dataset, SyntheticSpec, generate, load_csv, random_means
from .distiller import EncoderSpec, TrainConfig, distill, train_classifier, train_teacher
from .errors import ConfigError, NumericError, TopologyError
from .inference import mode_accuracies
from .losses import SCHEDULES, LossWeights
from .model import EraModel, build_era_model
from .nn import ClassifierHead, MlpEncoder

KM_GRID = ((1, 1), (1, 2), (1, 3), (2, 2), (2, 3), (2, 4), (2, 5), (3, 4))
SUITES = ("schedule", "branches", "km_grid", "frozen_head", "branch_feed", "detach")
ROW_FIELDS = ("suite", "setting", "seed", "status", "acc_s", "acc_t", "acc_st", "approx_error")


# ------------------------------------------------------------ config mapping

def synthetic_spec(cfg: RunConfig) -> SyntheticSpec:
    M, d = cfg["data.num_classes"], cfg["data.input_dim"]
    return SyntheticSpec(M, d, cfg["data.samples_per_class"],
                         random_means(M, d, cfg["data.radius"], cfg["data.seed"]),
                         cluster_scale=cfg["data.cluster_scale"],
                         label_noise=cfg["data.label_noise"], seed=cfg["data.seed"])


def make_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Synthetic train/test split, or the two CSV files when both are given."""
    tr, te = cfg["data.train_csv"], cfg["data.test_csv"]
    if bool(tr) != bool(te):
        raise ConfigError("data.train_csv and data.test_csv must be given together",
                          key="data.test_csv" if tr else "data.train_csv")
    if tr:
        d, M = cfg["data.input_dim"], cfg["data.num_classes"]
        return (load_csv(tr, d, M, split="train"), load_csv(te, d, M, split="test"))
    return generate(synthetic_spec(cfg))


def loss_weights(cfg: RunConfig) -> LossWeights:
    return LossWeights(alpha=cfg["loss.alpha"], beta=cfg["loss.beta"], gamma=cfg["loss.gamma"],
                       lambda_=cfg["loss.lambda"], temperature=cfg["loss.temperature"],
                       K=cfg["era.K"], schedule=cfg["loss.schedule"], mu=cfg["infer.mu"])


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["train.epochs"], batch_size=cfg["train.batch_size"],
        learning_rate=cfg["train.learning_rate"], momentum=cfg["train.momentum"],
        weight_decay=cfg["train.weight_decay"], seed=cfg["seed"], weights=loss_weights(cfg),
        m=cfg["era.m"], student_hidden=tuple(cfg["student.hidden"]),
        branch_width=cfg["era.branch_width"] or None, branch_hidden=cfg["era.branch_hidden"] or None,
        branch_feed=cfg["era.branch_feed"], head_t_frozen=cfg["era.head_t_frozen"],
        detach_targets=cfg["era.detach_targets"],
        lr_milestones=tuple(cfg["train.lr_milestones"]), lr_decay=cfg["train.lr_decay"])


def teacher_train_config(cfg: RunConfig) -> TrainConfig:
    return train_config(cfg).replace(epochs=cfg["teacher.epochs"],
                                     learning_rate=cfg["teacher.learning_rate"])


def teacher_spec(cfg: RunConfig) -> EncoderSpec:
    return EncoderSpec(cfg["data.input_dim"], tuple(cfg["teacher.hidden"]), cfg["teacher.dim"],
                       final_relu=cfg["teacher.final_relu"])


def expected_teacher_topology(cfg: RunConfig) -> dict:
    from .checkpoint import classifier_topology
    enc = teacher_spec(cfg).build()
    return classifier_topology(enc, ClassifierHead(cfg["teacher.dim"], cfg["data.num_classes"]))


# ------------------------------------------------------------------- runs

def run_teacher(cfg: RunConfig, train: Dataset, test: Dataset, on_epoch=None):
    """Cross-entropy teacher, returned frozen: ``(encoder, head, history)``."""
    return train_teacher(teacher_spec(cfg), cfg["data.num_classes"], train, test,
                         teacher_train_config(cfg), on_epoch)


def build_model(cfg: RunConfig, teacher: MlpEncoder, head_t: ClassifierHead) -> EraModel:
    if teacher.input_dim != cfg["data.input_dim"] or head_t.num_classes != cfg["data.num_classes"]:
        raise TopologyError(
            f"teacher takes {teacher.input_dim} inputs and predicts {head_t.num_classes} classes; "
            f"config says {cfg['data.input_dim']} and {cfg['data.num_classes']}")
    return build_era_model(teacher, head_t, list(cfg["student.hidden"]), cfg["student.dim"],
                           K=cfg["era.K"], m=cfg["era.m"], branch_width=cfg["era.branch_width"] or None,
                           branch_feed=cfg["era.branch_feed"], head_t_frozen=cfg["era.head_t_frozen"],
                           seed=cfg["seed"], branch_hidden=cfg["era.branch_hidden"] or None,
                           student_final_relu=cfg["student.final_relu"])


def run_era(cfg: RunConfig, teacher, head_t, train: Dataset, test: Dataset, on_epoch=None):
    """Build a fresh ERA model around the teacher and distill; ``(model, history)``."""
    model = build_model(cfg, teacher, head_t)
    return distill(model, train, test, train_config(cfg), on_epoch=on_epoch)


def run_ce_baseline(cfg: RunConfig, train: Dataset, test: Dataset) -> list[dict]:
    """The student architecture trained with cross-entropy alone (same seed and schedule)."""
    enc = MlpEncoder(cfg["data.input_dim"], list(cfg["student.hidden"]), cfg["student.dim"],
                     final_relu=cfg["student.final_relu"])
    head = ClassifierHead(cfg["student.dim"], cfg["data.num_classes"])
    return train_classifier(enc, head, train, test, train_config(cfg))


# -------------------------------------------------------------- ablations

@dataclass
class Row:
    suite: str
    setting: str
    seed: int
    status: str
    acc_s: float | None = None
    acc_t: float | None = None
    acc_st: float | None = None
    approx_error: float | None = None

    def as_list(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v))
        return [self.suite, self.setting, str(self.seed), self.status,
                fmt(self.acc_s), fmt(self.acc_t), fmt(self.acc_st), fmt(self.approx_error)]


def suite_settings(suite: str) -> list[tuple[str, dict]]:
    """(setting label, config overrides) pairs of a grid."""
    if suite == "schedule":
        return [(s, {"loss.schedule": s}) for s in SCHEDULES]
    if suite == "km_grid":
        return [(f"m={m},K={K}", {"era.m": m, "era.K": K}) for m, K in KM_GRID]
    if suite == "frozen_head":
        return [("frozen", {"era.head_t_frozen": True}), ("learnable", {"era.head_t_frozen": False})]
    if suite == "branch_feed":
        return [(f, {"era.branch_feed": f}) for f in ("cascaded", "parallel")]
    if suite == "detach":
        return [("detached", {"era.detach_targets": True}), ("attached", {"era.detach_targets": False})]
    if suite == "branches":
        return [("reference", {})]
    raise ConfigError(f"unknown ablation suite {suite!r}; expected one of {SUITES}")


class TeacherCache:
    """One teacher per (seed, data) so grid points share it."""

    def __init__(self, train: Dataset, test: Dataset):
        self.train, self.test = train, test
        self._cache: dict[int, tuple] = {}

    def get(self, cfg: RunConfig):
        seed = cfg["seed"]
        if seed not in self._cache:
            enc, head, _ = run_teacher(cfg, self.train, self.test)
            self._cache[seed] = (enc, head)
        return self._cache[seed]


def _fresh_teacher_copy(enc: MlpEncoder, head: ClassifierHead):
    """Independent copy so a learnable-head run cannot leak into later runs."""
    enc2 = MlpEncoder(enc.input_dim, enc.widths[1:-1], enc.output_dim, final_relu=enc.final_relu)
    head2 = ClassifierHead(head.linear.in_features, head.num_classes)
    for (_, a), (_, b) in zip(enc.named_state() + head.named_state(), enc2.named_state() + head2.named_state()):
        b.values[...] = a.values
    enc2.freeze()
    head2.freeze()
    enc2.eval()
    return enc2, head2


def run_ablation(suite: str, cfg: RunConfig, seeds: int | None = None, progress=None) -> list[Row]:
    """Run a grid over seeds ``0..seeds-1``; diverging runs become ``NaN-abort`` rows."""
    settings = suite_settings(suite)
    seeds = cfg["ablate.seeds"] if seeds is None else seeds
    train, test = make_datasets(cfg)
    teachers = TeacherCache(train, test)
    rows = []
    for seed in range(seeds):
        for label, overrides in settings:
            run_cfg = cfg.copy(seed=seed, **{k.replace(".", "__"): v for k, v in overrides.items()})
            enc, head = _fresh_teacher_copy(*teachers.get(run_cfg))
            try:
                model, hist = run_era(run_cfg, enc, head, train, test)
            except NumericError:
                rows.append(Row(suite, label, seed, "NaN-abort"))
                if suite == "branches":
                    rows += [Row(suite, f"j={j}", seed, "NaN-abort") for j in range(run_cfg["era.K"] + 1)]
                continue
            if suite == "branches":
                for j in range(model.K + 1):
                    acc = mode_accuracies(model, test, mu=run_cfg["infer.mu"], branches=j)
                    err = _truncated_error(model, test, j)
                    rows.append(Row(suite, f"j={j}", seed, "ok", acc["s"], acc["t"], acc["st"], err))
            else:
                last = hist[-1]
                rows.append(Row(suite, label, seed, "ok", last["acc_s"], last["acc_t"], last["acc_st"],
                                last["approx_error"]))
            if progress:
                progress(rows[-1])
    return rows


def _truncated_error(model: EraModel, ds: Dataset, j: int) -> float:
    from . import autodiff as ad
    from .model import approximate, approximation_error, teacher_features
    with ad.no_tape(), model.evaluating():
        x = ad.Tensor(ds.features)
        _, _, approx = approximate(model, model.student(x), j)
        return approximation_error(teacher_features(model, x), approx[-1])


def rows_to_csv(rows: list[Row]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_FIELDS)
    for r in rows:
        w.writerow(r.as_list())
    return buf.getvalue()


# ----------------------------------------------------------- efficacy run

@dataclass
class SeedResult:
    seed: int
    teacher_acc: float
    ce_acc: float
    acc_s: float
    acc_t: float
    acc_st: float
    initial_error: float
    final_error: float


def efficacy(cfg: RunConfig, seeds: int = 5, progress=None) -> list[SeedResult]:
    """Teacher, CE-only student and ERA student for each seed on one dataset."""
    train, test = make_datasets(cfg)
    out = []
    for seed in range(seeds):
        run_cfg = cfg.copy(seed=seed)
        enc, head, t_hist = run_teacher(run_cfg, train, test)
        ce_hist = run_ce_baseline(run_cfg, train, test)
        _, hist = run_era(run_cfg, enc, head, train, test)
        res = SeedResult(seed, t_hist[-1]["acc_test"], ce_hist[-1]["acc_test"], hist[-1]["acc_s"],
                         hist[-1]["acc_t"], hist[-1]["acc_st"], hist[0]["approx_error"],
                         hist[-1]["approx_error"])
        out.append(res)
        if progress:
            progress(res)
    return out


def median(values) -> float:
    return float(np.median(np.fromiter(values, dtype=np.float64)))
