"""Text checkpoints with bit-exact float storage.

Layout (UTF-8, ``\\n`` line endings)::

    ERACKPT 1
    topology {"K":4,...}            compact JSON, keys sorted
    epoch 12
    rng 0 12                        run seed, next epoch to run
    section param student.0.linear.weight 2 16
    <hex row 0>
    <hex row 1>
    section buffer student.0.bn.running_mean 2
    <hex>
    ...
    end

Each hex line is one row of the array (the whole array for 1-D) stored as
little-endian IEEE-754 float64 bytes.  Sections appear in model traversal
order, then optimizer state.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataIOError, TopologyError
from .model import EraModel
from .nn import ClassifierHead, MlpEncoder, Module

MAGIC = "ERACKPT 1"
KINDS = ("param", "buffer", "optim")


@dataclass
class Checkpoint:
    topology: dict
    epoch: int = 0
    rng: tuple[int, int] = (0, 0)
    sections: list[tuple[str, str, np.ndarray]] = field(default_factory=list)

    def arrays(self, kind: str | None = None) -> dict[str, np.ndarray]:
        return {name: a for k, name, a in self.sections if kind is None or k == kind}


def topology_line(topology: dict) -> str:
    return json.dumps(topology, sort_keys=True, separators=(",", ":"))


def _encode(arr: np.ndarray) -> list[str]:
    a = np.ascontiguousarray(arr, dtype="<f8")
    rows = a.reshape(1, -1) if a.ndim <= 1 else a.reshape(-1, a.shape[-1])
    return [row.tobytes().hex() for row in rows]


def dumps(ckpt: Checkpoint) -> str:
    lines = [MAGIC, "topology " + topology_line(ckpt.topology), f"epoch {int(ckpt.epoch)}",
             f"rng {int(ckpt.rng[0])} {int(ckpt.rng[1])}"]
    for kind, name, arr in ckpt.sections:
        if kind not in KINDS:
            raise ValueError(f"unknown section kind {kind!r}")
        if " " in name:
            raise ValueError(f"section names may not contain spaces: {name!r}")
        dims = " ".join(str(d) for d in np.shape(arr))
        lines.append(f"section {kind} {name} {dims}".rstrip())
        lines.extend(_encode(arr))
    lines.append("end")
    return "\n".join(lines) + "\n"


def loads(text: str, source: str = "<string>") -> Checkpoint:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()

    def fail(i, msg):
        raise DataIOError(f"{source}:{i + 1}: {msg}", line=i + 1)

    if len(lines) < 5 or lines[0] != MAGIC:
        fail(0, f"not a checkpoint (expected {MAGIC!r})")
    if not lines[1].startswith("topology "):
        fail(1, "missing topology line")
    try:
        topology = json.loads(lines[1][len("topology "):])
    except json.JSONDecodeError as exc:
        fail(1, f"bad topology JSON: {exc}")
    try:
        tag, epoch = lines[2].split(" ")
        assert tag == "epoch"
        tag, seed, nxt = lines[3].split(" ")
        assert tag == "rng"
        ckpt = Checkpoint(topology, int(epoch), (int(seed), int(nxt)))
    except (ValueError, AssertionError):
        fail(2, "malformed epoch/rng header")
    i = 4
    while i < len(lines) and lines[i] != "end":
        parts = lines[i].split(" ")
        if len(parts) < 3 or parts[0] != "section" or parts[1] not in KINDS:
            fail(i, f"expected a section header, got {lines[i][:60]!r}")
        kind, name = parts[1], parts[2]
        try:
            shape = tuple(int(d) for d in parts[3:])
        except ValueError:
            fail(i, "bad section shape")
        n_rows = 1 if len(shape) <= 1 else int(np.prod(shape[:-1]))
        width = int(np.prod(shape)) if len(shape) <= 1 else shape[-1]
        rows = lines[i + 1:i + 1 + n_rows]
        if len(rows) != n_rows:
            fail(i, f"section {name} is truncated")
        try:
            raw = b"".join(bytes.fromhex(r) for r in rows)
        except ValueError:
            fail(i, f"section {name} holds invalid hex")
        if len(raw) != 8 * width * n_rows:
            fail(i, f"section {name} has {len(raw)} bytes, expected {8 * width * n_rows}")
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        ckpt.sections.append((kind, name, arr))
        i += 1 + n_rows
    if i != len(lines) - 1:
        fail(min(i, len(lines) - 1), "missing or misplaced end marker")
    return ckpt


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(dumps(ckpt).encode("utf-8"))


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        text = path.read_bytes().decode("utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(text, str(path))


# ------------------------------------------------------------ model binding

def classifier_topology(encoder: MlpEncoder, head: ClassifierHead) -> dict:
    return {"kind": "classifier", "widths": list(encoder.widths),
            "final_relu": encoder.final_relu, "num_classes": head.num_classes}


class ClassifierPair(Module):
    """Encoder plus head, stored as one checkpoint (the teacher)."""

    def __init__(self, encoder: MlpEncoder, head: ClassifierHead):
        self.encoder, self.head = encoder, head

    def _children(self):
        return [("encoder", self.encoder), ("head", self.head)]

    def topology(self) -> dict:
        return classifier_topology(self.encoder, self.head)


def model_topology(model) -> dict:
    topo = dict(model.topology())
    if isinstance(model, EraModel):
        topo["student_final_relu"] = model.student.final_relu
        topo["teacher_final_relu"] = model.teacher.final_relu
    return topo


def snapshot(model, epoch: int = 0, rng: tuple[int, int] = (0, 0), optimizer=None) -> Checkpoint:
    ckpt = Checkpoint(model_topology(model), epoch, rng)
    ckpt.sections += [("param", n, t.values.copy()) for n, t in model.named_parameters()]
    ckpt.sections += [("buffer", n, t.values.copy()) for n, t in model.named_buffers()]
    if optimizer is not None:
        ckpt.sections += [("optim", n, v.copy()) for n, v in optimizer.state()]
    return ckpt


def save_model(path, model, epoch: int = 0, rng: tuple[int, int] = (0, 0), optimizer=None) -> None:
    save(path, snapshot(model, epoch, rng, optimizer))


def check_topology(expected: dict, found: dict, what: str = "checkpoint") -> None:
    if expected != found:
        raise TopologyError(f"{what} topology mismatch: model {topology_line(expected)} "
                            f"vs checkpoint {topology_line(found)}")


def restore(model, ckpt: Checkpoint, optimizer=None) -> None:
    """Copy checkpoint values into ``model`` (and ``optimizer``) in place."""
    check_topology(model_topology(model), ckpt.topology)
    for kind, named in (("param", model.named_parameters()), ("buffer", model.named_buffers())):
        arrays = ckpt.arrays(kind)
        names = [n for n, _ in named]
        if sorted(arrays) != sorted(names):
            missing = sorted(set(names) - set(arrays))
            extra = sorted(set(arrays) - set(names))
            raise TopologyError(f"{kind} sections disagree with the model: missing {missing}, extra {extra}")
        for n, t in named:
            if arrays[n].shape != t.values.shape:
                raise TopologyError(f"{n}: checkpoint shape {arrays[n].shape} vs model {t.values.shape}")
            t.values[...] = arrays[n]
    if optimizer is not None:
        optim = ckpt.arrays("optim")
        if not optim:
            raise TopologyError("checkpoint carries no optimizer state")
        want = {f"optim.{n}" for n in optimizer.velocity}
        if set(optim) != want:
            raise TopologyError("optimizer sections disagree with the trainable parameter set")
        optimizer.load_state(optim)


def build_classifier(topology: dict) -> ClassifierPair:
    if topology.get("kind") != "classifier":
        raise TopologyError(f"expected a classifier checkpoint, got kind {topology.get('kind')!r}")
    widths = topology["widths"]
    enc = MlpEncoder(widths[0], widths[1:-1], widths[-1], final_relu=topology["final_relu"])
    return ClassifierPair(enc, ClassifierHead(widths[-1], topology["num_classes"]))


def build_era(topology: dict) -> EraModel:
    if topology.get("kind") != "era":
        raise TopologyError(f"expected an ERA checkpoint, got kind {topology.get('kind')!r}")
    sw, tw = topology["student_widths"], topology["teacher_widths"]
    student = MlpEncoder(sw[0], sw[1:-1], sw[-1], final_relu=topology["student_final_relu"])
    teacher = MlpEncoder(tw[0], tw[1:-1], tw[-1], final_relu=topology["teacher_final_relu"])
    M = topology["num_classes"]
    return EraModel(student, teacher, ClassifierHead(sw[-1], M), ClassifierHead(tw[-1], M),
                    K=topology["K"], m=topology["m"], branch_width=topology["branch_width"],
                    branch_feed=topology["branch_feed"], branch_hidden=topology["branch_hidden"])


def load_classifier(path) -> ClassifierPair:
    ckpt = load(path)
    pair = build_classifier(ckpt.topology)
    restore(pair, ckpt)
    return pair


def load_era(path) -> tuple[EraModel, Checkpoint]:
    ckpt = load(path)
    model = build_era(ckpt.topology)
    restore(model, ckpt)
    return model, ckpt
