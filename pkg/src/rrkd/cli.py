"""Command-line entry point: ``rrkd <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional

from . import checkpoint
from .config import RunConfig
from .data import load_cifar10, subset, synthetic_dataset
from .errors import CheckpointError, ConfigError, DataError, ShapeError
from .gradcheck import format_report, run_gradchecks
from .nn import ArchSpec, count_parameters
from .recurrence import VARIANT_NAMES, make_schedule
from .train import distill_student, evaluate, load_network, standardize, train_teacher

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5

log = logging.getLogger("rrkd")

SYNTHETIC_DEFAULT_TRAIN = 250
SYNTHETIC_DEFAULT_TEST = 100


def prepare_data(cfg: RunConfig):
    """Load (or generate) the train / test splits and standardize with train statistics."""
    if cfg.dataset == "synthetic":
        n_train = cfg.n_train_per_class or SYNTHETIC_DEFAULT_TRAIN
        n_test = cfg.n_test_per_class or SYNTHETIC_DEFAULT_TEST
        train = synthetic_dataset(cfg.seed, n_train, cfg.synthetic_classes, cfg.image_size, cfg.sigma, "train")
        test = synthetic_dataset(cfg.seed + 1, n_test, cfg.synthetic_classes, cfg.image_size, cfg.sigma, "test")
    else:
        train, test = load_cifar10(cfg.data_dir)
        if cfg.classes:
            train = subset(train, cfg.classes, cfg.n_train_per_class or 5000, cfg.seed)
            test = subset(test, cfg.classes, cfg.n_test_per_class or 1000, cfg.seed)
    if cfg.standardize:
        train, test, _, _ = standardize(train, test)
    return train, test


def _write_config(cfg: RunConfig):
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "config.txt"), "w") as fh:
        fh.write(cfg.dumps())


def _overrides(args) -> dict:
    keys = ("seed", "out", "precision", "variant", "recurs", "lam", "teacher", "checkpoint")
    return {k: getattr(args, k, None) for k in keys}


def _resolve(args, checkpoint_path: Optional[str] = None) -> RunConfig:
    path = args.config
    if path is None and checkpoint_path:
        sibling = os.path.join(os.path.dirname(os.path.abspath(checkpoint_path)), "config.txt")
        if os.path.exists(sibling):
            path = sibling
    return RunConfig.load(path, _overrides(args))


def _infer_role(state) -> str:
    return "teacher" if any(".block" in k for k in state) else "student"


# ------------------------------------------------------------------ commands


def cmd_params(args) -> int:
    cfg = _resolve(args)
    arch = cfg.teacher_arch() if args.role == "teacher" else cfg.student_arch()
    report = count_parameters(arch)
    rows = [(r.name, "x".join(map(str, r.shape)), r.count, r.shared_by) for r in report.by_layer]
    if args.markdown:
        print("| layer | shape | count | shared by |")
        print("|---|---|---:|---:|")
        for name, shape, count, shared in rows:
            print(f"| {name} | {shape} | {count} | {shared} |")
        print(f"| **total** | | **{report.total}** | |")
    else:
        width = max(len(r[0]) for r in rows)
        print(f"{'layer':<{width}}  {'shape':<12} {'count':>8}  shared_by")
        for name, shape, count, shared in rows:
            print(f"{name:<{width}}  {shape:<12} {count:>8}  {shared}")
        label = "teacher" if arch.role == "teacher" else f"ReResNet-{arch.variant} n={arch.n}"
        print(f"total ({label}): {report.total}  (conv kernels {report.conv_total}, BN affine {report.bn_total})")
    return EXIT_OK


def cmd_schedule(args) -> int:
    sched = make_schedule(args.variant, args.recurs)
    print(sched.timeline())
    if args.table:
        print(f"# ReResNet-{sched.variant} ({VARIANT_NAMES[sched.variant]}), n={sched.n}, "
              f"{len(sched)} applications")
        for t, (unit, bank) in enumerate(sched.entries, start=1):
            print(f"t={t:<3} unit {unit}  bn bank {bank}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradchecks(args.seed or 0)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_train_teacher(args) -> int:
    cfg = _resolve(args)
    train, test = prepare_data(cfg)
    _write_config(cfg)
    net, metrics = train_teacher(cfg.teacher_arch(), cfg.train_config(), train, test, out_dir=cfg.out)
    print(f"teacher: final test top-1 {metrics.last('test_acc'):.4f}; "
          f"checkpoint {os.path.join(cfg.out, 'teacher.ckpt')}")
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = _resolve(args)
    if not cfg.teacher:
        raise ConfigError("distill needs a teacher checkpoint (--teacher PATH or 'teacher = PATH')")
    teacher = load_network(cfg.teacher_arch(), cfg.teacher, cfg.train_config().dtype)
    train, test = prepare_data(cfg)
    _write_config(cfg)
    net, metrics = distill_student(cfg.student_arch(), cfg.train_config(), teacher, train, test,
                                   out_dir=cfg.out)
    print(f"student ReResNet-{cfg.variant} n={cfg.recurs}: final test top-1 "
          f"{metrics.last('test_acc'):.4f}; checkpoint {os.path.join(cfg.out, 'student.ckpt')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = args.checkpoint
    if not ckpt:
        raise ConfigError("eval needs --checkpoint PATH")
    cfg = _resolve(args, ckpt)
    state = checkpoint.load(ckpt)
    role = args.role or _infer_role(state)
    arch = cfg.teacher_arch() if role == "teacher" else cfg.student_arch()
    net = load_network(arch, state, cfg.train_config().dtype)
    _, test = prepare_data(cfg)
    acc = evaluate(net, test)
    line = f"top1 {acc['top1']:.4f}"
    if "top5" in acc:
        line += f"  top5 {acc['top5']:.4f}"
    print(line)
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rrkd", description="Distill residual teachers into weight-tied "
                                                              "recurrent students.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--precision", choices=["f32", "f64"])
        p.add_argument("--variant", type=int, choices=[1, 2, 3])
        p.add_argument("--recurs", type=int)
        p.add_argument("--lambda", dest="lam", type=float)
        return p

    p = common(sub.add_parser("params", help="parameter table for the teacher or a student"))
    p.add_argument("--role", choices=["student", "teacher"], default="student")
    p.add_argument("--markdown", action="store_true")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("schedule", help="print the tying timeline of a variant")
    p.add_argument("--variant", type=int, choices=[1, 2, 3], default=1)
    p.add_argument("--recurs", type=int, default=3)
    p.add_argument("--table", action="store_true", help="also list timestep, unit and BN bank entry")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("gradcheck", help="finite-difference and tied-gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = common(sub.add_parser("train-teacher", help="train the residual teacher from scratch"))
    p.set_defaults(func=cmd_train_teacher)

    p = common(sub.add_parser("distill", help="train a tied student against a frozen teacher"))
    p.add_argument("--teacher", help="teacher checkpoint")
    p.set_defaults(func=cmd_distill)

    p = common(sub.add_parser("eval", help="top-1 / top-5 accuracy of a checkpoint on the test split"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--role", choices=["student", "teacher"])
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"rrkd: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"rrkd: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CheckpointError, KeyError, ShapeError) as exc:
        print(f"rrkd: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ValueError as exc:
        print(f"rrkd: invalid argument: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
