"""``era`` command line: train-teacher, distill, eval, ablate, gradcheck.

Exit codes: 0 success, 2 bad configuration or arguments, 3 numeric
divergence, 4 missing or mismatched checkpoint topology, 5 gradient check
failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ck
from . import experiments as ex
from .config import load_config, parse_overrides
from .data import load_csv
from .distiller import distill, make_optimizer, metric_keys
from .errors import (
    ConfigError,
    DataIOError,
    InputError,
    NumericError,
    ParameterError,
    SpecError,
    TopologyError,
)
from .inference import InferenceSpec, evaluate_accuracy

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_TOPOLOGY, EXIT_GRADCHECK = 0, 2, 3, 4, 5

log = logging.getLogger("era")


def _jsonl(records, keys=None) -> str:
    out = []
    for rec in records:
        if keys is not None:
            rec = {k: rec[k] for k in keys}
        out.append(json.dumps(rec) + "\n")
    return "".join(out)


def _config(args, extra):
    cfg = load_config(args.config, parse_overrides(extra))
    return cfg


def _read_metrics(path: Path, upto: int) -> list[dict]:
    if not path.exists():
        return []
    recs = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    return [r for r in recs if r["epoch"] <= upto]


# ---------------------------------------------------------------- commands

def cmd_train_teacher(args, extra) -> int:
    cfg = _config(args, extra)
    run_dir = cfg.run_dir
    cfg.write_resolved(run_dir)
    train, test = ex.make_datasets(cfg)
    metrics = run_dir / "teacher_metrics.jsonl"
    metrics.write_text("", encoding="utf-8")

    def on_epoch(rec):
        with metrics.open("a", encoding="utf-8") as fh:
            fh.write(_jsonl([rec]))
        log.info("teacher epoch %d: loss %.4f, test acc %.4f", rec["epoch"], rec["loss_ce"], rec["acc_test"])

    enc, head, hist = ex.run_teacher(cfg, train, test, on_epoch)
    pair = ck.ClassifierPair(enc, head)
    epochs = cfg["teacher.epochs"]
    ck.save_model(run_dir / "teacher.ckpt", pair, epoch=epochs, rng=(cfg["seed"], epochs))
    acc = hist[-1]["acc_test"] if hist else float("nan")
    print(f"teacher test accuracy {acc:.4f}; wrote {run_dir / 'teacher.ckpt'}")
    return EXIT_OK


def cmd_distill(args, extra) -> int:
    cfg = _config(args, extra)
    run_dir = cfg.run_dir
    teacher_path = Path(args.teacher) if args.teacher else run_dir / "teacher.ckpt"
    if not teacher_path.exists():
        print(f"error: teacher checkpoint {teacher_path} not found", file=sys.stderr)
        return EXIT_TOPOLOGY
    teacher_ckpt = ck.load(teacher_path)
    ck.check_topology(ex.expected_teacher_topology(cfg), teacher_ckpt.topology, "teacher")
    pair = ck.build_classifier(teacher_ckpt.topology)
    ck.restore(pair, teacher_ckpt)
    cfg.write_resolved(run_dir)
    train, test = ex.make_datasets(cfg)
    model = ex.build_model(cfg, pair.encoder, pair.head)
    tcfg = ex.train_config(cfg)
    optimizer = make_optimizer(model, tcfg)
    metrics = run_dir / "era_metrics.jsonl"
    start = 0
    prior: list[dict] = []
    if args.resume:
        resume = ck.load(args.resume)
        ck.restore(model, resume, optimizer)
        start = resume.epoch
        prior = _read_metrics(metrics, start)
    keys = metric_keys(model.K)
    metrics.write_text(_jsonl(prior, keys), encoding="utf-8")

    def on_epoch(rec, _opt):
        with metrics.open("a", encoding="utf-8") as fh:
            fh.write(_jsonl([rec], keys))
        log.info("epoch %d: total %.4f, acc s/t/st %.4f/%.4f/%.4f, approx error %.4f", rec["epoch"],
                 rec["loss_total"], rec["acc_s"], rec["acc_t"], rec["acc_st"], rec["approx_error"])

    stop = tcfg.epochs if args.until_epoch is None else min(args.until_epoch, tcfg.epochs)
    if stop < start:
        raise ParameterError(f"--until-epoch {stop} precedes the checkpoint epoch {start}")
    _, hist = distill(model, train, test, tcfg, optimizer=optimizer, start_epoch=start,
                      stop_epoch=stop, on_epoch=on_epoch)
    ck.save_model(run_dir / "era.ckpt", model, epoch=stop, rng=(cfg["seed"], stop), optimizer=optimizer)
    if hist:
        last = hist[-1]
        print(f"epoch {last['epoch']}: acc S {last['acc_s']:.4f}  T {last['acc_t']:.4f}  "
              f"ST {last['acc_st']:.4f}  approx error {last['approx_error']:.4f}")
    print(f"wrote {run_dir / 'era.ckpt'}")
    return EXIT_OK


def cmd_eval(args, extra) -> int:
    cfg = _config(args, extra)
    model, _ = ck.load_era(args.checkpoint)
    if args.data:
        dataset = load_csv(args.data, model.student.input_dim, model.num_classes, split="eval")
        source = str(args.data)
    else:
        dataset = ex.make_datasets(cfg)[1]
        source = "config test split"
    mode = (args.mode or cfg["infer.mode"]).lower()
    mu = cfg["infer.mu"] if args.mu is None else args.mu
    if args.sweep:
        counts = list(range(model.K + 1))
    else:
        j = args.branches if args.branches is not None else cfg["infer.branches"]
        counts = [model.K if j < 0 else j]
    records = []
    for j in counts:
        spec = InferenceSpec(mode=mode, mu=mu, branches=j)
        acc = evaluate_accuracy(model, dataset, spec)
        records.append({"mode": mode, "mu": mu, "branches": j, "accuracy": acc})
        print(f"mode {mode:<2} mu {mu:.3f} branches {j}: top-1 accuracy {acc:.4f}")
    out = Path(args.out) if args.out else cfg.run_dir / "eval.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    report = {"checkpoint": str(args.checkpoint), "dataset": source, "samples": len(dataset),
              "records": records}
    out.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_ablate(args, extra) -> int:
    cfg = _config(args, extra)
    run_dir = cfg.run_dir
    cfg.write_resolved(run_dir)

    def progress(row):
        log.info("%s %s seed %d: %s", row.suite, row.setting, row.seed, row.status)

    rows = ex.run_ablation(args.suite, cfg, args.seeds, progress)
    path = run_dir / f"ablation_{args.suite}.csv"
    path.write_text(ex.rows_to_csv(rows), encoding="utf-8")
    print(ex.rows_to_csv(rows), end="")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(args, extra) -> int:
    from .gradcheck import run_suite
    if extra:
        raise ConfigError(f"gradcheck takes no config overrides, got {extra[0]!r}")
    report = run_suite(seeds=args.seeds)
    for line in report.lines():
        print(line)
    print(f"{len(report.cases)} checks, max relative error {report.max_rel_error:.3e}, "
          f"{report.seconds:.1f} s")
    if not report.passed:
        for c in report.cases:
            if not c.passed:
                print(f"FAILED: {c.name} max relative error {c.max_rel_error:.3e} (seed {c.worst_seed})",
                      file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="era", description=__doc__.split("\n")[0],
                                epilog="Any config key may be overridden with --key value.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="flat key = value config file")
        return sp

    t = with_config(sub.add_parser("train-teacher", help="pre-train the teacher with cross-entropy"))
    t.set_defaults(func=cmd_train_teacher)

    d = with_config(sub.add_parser("distill", help="ERA distillation against a frozen teacher"))
    d.add_argument("--teacher", help="teacher checkpoint (default: <run dir>/teacher.ckpt)")
    d.add_argument("--resume", help="continue from an era.ckpt")
    d.add_argument("--until-epoch", type=int, help="stop after this epoch")
    d.set_defaults(func=cmd_distill)

    e = with_config(sub.add_parser("eval", help="top-1 accuracy of a distilled checkpoint"))
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="CSV file to score (default: the config's test split)")
    e.add_argument("--mode", type=str.lower, choices=("s", "t", "st"))
    e.add_argument("--mu", type=float)
    e.add_argument("--branches", type=int, help="active branches j (default: all)")
    e.add_argument("--sweep", action="store_true", help="report every j = 0..K")
    e.add_argument("--out", help="JSON report path (default: <run dir>/eval.json)")
    e.set_defaults(func=cmd_eval)

    a = with_config(sub.add_parser("ablate", help="run an ablation grid over seeds"))
    a.add_argument("suite", choices=ex.SUITES)
    a.add_argument("--seeds", type=int, help="number of seeds (default: ablate.seeds)")
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op, block and loss")
    g.add_argument("--seeds", type=int, default=100)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParameterError, InputError, SpecError, DataIOError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TopologyError as exc:
        print(f"topology error: {exc}", file=sys.stderr)
        return EXIT_TOPOLOGY


if __name__ == "__main__":
    sys.exit(main())
