"""Command-line surface for the full pipeline.

Subcommands: gen-data, train-teacher, gen-records, train-student, eval,
export-features, inspect-records, ablation, sweep.

Every flag has a config-file equivalent: ``--config FILE`` reads a flat
key=value text file whose keys are the flag names (dashes or underscores);
explicit flags win over file values. Exit codes: 0 success, 1 runtime
failure, 2 usage or validation error. Artifact-producing commands write a
manifest (flat key=value) before heavy work begins and append output
checksums when done, so reruns with an identical manifest are
byte-reproducible.
"""

from __future__ import annotations

import argparse
import sys
import zlib
from dataclasses import replace
from pathlib import Path

import numpy as np

from .augment import AugRanges
from .data import generate_synthetic_dataset, load_dataset, save_dataset
from .errors import PcdistillError
from .losses import DistilConfig
from .model import load_model, param_count, save_model, student_config, teacher_config
from .records import open_records, write_records
from .training import MetricsLog, TrainConfig, evaluate, export_features, train_student, train_teacher

ALPHA_GRID = (1.0, 2.0, 3.0, 4.0, 5.0)
BETA_GRID = (-1.0, -0.1, -0.01, 0.01, 0.1, 1.0)

ABLATION_CONFIGS = (
    ("no_distil", 0.0, 0.0),
    ("tea_only", None, 0.0),  # None: take the run's alpha/beta flag value
    ("self_only", 0.0, None),
    ("full", None, None),
)


class CliValidation(Exception):
    """Raised during the validation phase; maps to exit code 2."""


def _crc32(path) -> int:
    with open(path, "rb") as fh:
        return zlib.crc32(fh.read())


class Manifest:
    """Flat key=value run manifest, written before heavy work starts."""

    def __init__(self, path, subcommand, values: dict):
        self.path = Path(path)
        self.lines = [f"subcommand={subcommand}"]
        for key in sorted(values):
            self.lines.append(f"{key}={values[key]}")

    def add_input(self, name, path):
        self.lines.append(f"in.{name}.crc32={_crc32(path):08x}")

    def write(self):
        self.path.write_text("\n".join(self.lines) + "\n")

    def finish(self, outputs: dict):
        for name in sorted(outputs):
            self.lines.append(f"out.{name}.crc32={_crc32(outputs[name]):08x}")
        self.write()


# ---------------------------------------------------------------------------
# argument plumbing: argparse + config-file defaults, flags win
# ---------------------------------------------------------------------------

def _read_config_file(path) -> dict:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise CliValidation(f"cannot read config file: {e}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliValidation(f"config file line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _merge_config(parser: argparse.ArgumentParser, args: argparse.Namespace):
    """Fill unset args from the config file; reject unknown keys."""
    if getattr(args, "config", None) is None:
        return
    file_values = _read_config_file(args.config)
    valid = {a.dest: a for a in parser._actions}
    for key, raw in file_values.items():
        if key in ("config", "help"):
            continue
        if key not in valid:
            raise CliValidation(f"unknown config key: {key}")
        if getattr(args, key) is not None:
            continue  # explicit flag wins
        action = valid[key]
        if isinstance(action, argparse._StoreTrueAction):
            setattr(args, key, raw.lower() in ("1", "true", "yes"))
        else:
            caster = action.type or str
            try:
                setattr(args, key, caster(raw))
            except ValueError:
                raise CliValidation(f"invalid config value for key {key}: {raw!r}") from None


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise CliValidation(f"missing required option: --{name.replace('_', '-')}")


def _defaults(args, **pairs):
    for name, value in pairs.items():
        if getattr(args, name) is None:
            setattr(args, name, value)


def _resolved(args) -> dict:
    skip = {"func", "parser", "config"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


# ---------------------------------------------------------------------------
# shared builders
# ---------------------------------------------------------------------------

def _add_common(sub):
    sub.add_argument("--config", help="flat key=value file providing flag defaults")
    sub.add_argument("--seed", type=int, help="master seed for the run (default 0)")


def _add_train_flags(sub):
    sub.add_argument("--epochs", type=int, help="training epochs (default 100)")
    sub.add_argument("--batch-size", type=int, help="batch size, drop-last (default 32)")
    sub.add_argument("--lr-start", type=float, help="initial learning rate (default 1e-3)")
    sub.add_argument("--lr-end", type=float, help="final learning rate (default 1e-5)")
    sub.add_argument(
        "--schedule", choices=["cosine", "linear", "exponential"],
        help="learning-rate schedule (default cosine)",
    )
    sub.add_argument("--scale-lo", type=float, help="augmentation scale lower bound (default 0.67)")
    sub.add_argument("--scale-hi", type=float, help="augmentation scale upper bound (default 1.5)")
    sub.add_argument(
        "--translate-max", type=float, help="augmentation translation bound (default 0.2)"
    )


def _train_config(args, distil=None) -> TrainConfig:
    _defaults(
        args, seed=0, epochs=100, batch_size=32, lr_start=1e-3, lr_end=1e-5,
        schedule="cosine", scale_lo=0.67, scale_hi=1.5, translate_max=0.2,
    )
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr_start=args.lr_start,
        lr_end=args.lr_end,
        schedule=args.schedule,
        seed=args.seed,
        aug=AugRanges(args.scale_lo, args.scale_hi, args.translate_max),
    )
    if distil is not None:
        cfg = replace(cfg, distil=distil)
    return cfg


def _load_split(data_dir, name):
    path = Path(data_dir) / f"{name}.pvds"
    if not path.exists():
        raise CliValidation(f"dataset file not found: {path}")
    return load_dataset(path, split=name), path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    _require(args, "out")
    _defaults(args, seed=0, num_classes=8, per_class_train=200, per_class_test=50, points=256)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out / "manifest.txt", "gen-data", _resolved(args))
    manifest.write()
    train, test = generate_synthetic_dataset(
        args.num_classes, args.per_class_train, args.per_class_test, args.points, args.seed
    )
    save_dataset(train, out / "train.pvds")
    save_dataset(test, out / "test.pvds")
    manifest.finish({"train": out / "train.pvds", "test": out / "test.pvds"})
    print(f"wrote {len(train)} train / {len(test)} test clouds to {out}")
    return 0


def cmd_train_teacher(args) -> int:
    _require(args, "data_dir", "out")
    train_set, train_path = _load_split(args.data_dir, "train")
    test_set, test_path = _load_split(args.data_dir, "test")
    config = _train_config(args)
    model_cfg = teacher_config(train_set.num_classes, train_set.points_per_cloud)
    model_cfg.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out / "manifest.txt", "train-teacher", _resolved(args))
    manifest.add_input("train", train_path)
    manifest.add_input("test", test_path)
    manifest.write()

    args._heavy_started = True
    log = MetricsLog()
    model = train_teacher(train_set, test_set, model_cfg, config, log=log)
    save_model(model, out / "teacher.pvmd")
    log.write(out / "metrics.csv")
    manifest.finish({"teacher": out / "teacher.pvmd", "metrics": out / "metrics.csv"})
    metrics = evaluate(model, test_set)
    print(f"teacher params={param_count(model_cfg)} OA={metrics['OA']:.2f} mAcc={metrics['mAcc']:.2f}")
    return 0


def cmd_gen_records(args) -> int:
    _require(args, "data_dir", "teacher", "out")
    _defaults(args, seed=0, epochs=100)
    train_set, train_path = _load_split(args.data_dir, "train")
    teacher = load_model(args.teacher)
    if teacher.config.num_classes != train_set.num_classes:
        raise CliValidation(
            f"num_classes mismatch: teacher={teacher.config.num_classes} "
            f"dataset={train_set.num_classes}"
        )
    if teacher.config.points_per_cloud != train_set.points_per_cloud:
        raise CliValidation(
            f"points_per_cloud mismatch: teacher={teacher.config.points_per_cloud} "
            f"dataset={train_set.points_per_cloud}"
        )
    out = Path(args.out)
    if out.suffix != ".pvdr":
        out.mkdir(parents=True, exist_ok=True)
        records_path = out / "records.pvdr"
        manifest_path = out / "manifest.txt"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        records_path = out
        manifest_path = out.parent / "manifest.txt"
    manifest = Manifest(manifest_path, "gen-records", _resolved(args))
    manifest.add_input("train", train_path)
    manifest.add_input("teacher", args.teacher)
    manifest.write()
    _defaults(args, scale_lo=0.67, scale_hi=1.5, translate_max=0.2)
    ranges = AugRanges(args.scale_lo, args.scale_hi, args.translate_max)
    args._heavy_started = True
    summary = write_records(records_path, teacher, train_set, args.epochs, args.seed, ranges)
    manifest.finish({"records": records_path})
    print(
        f"wrote {summary['bytes_written']} bytes: E={summary['num_epochs']} "
        f"S={summary['num_samples']} C={summary['num_classes']}"
    )
    return 0


def _add_distil_flags(sub):
    sub.add_argument("--alpha", type=float, help="teacher-distillation weight (default 2.0)")
    sub.add_argument("--beta", type=float, help="self-distillation weight (default -0.01)")
    sub.add_argument("--t-tea", type=float, help="teacher KL temperature (default 3.0)")
    sub.add_argument("--t-self", type=float, help="self KL temperature (default 3.0)")
    sub.add_argument(
        "--kd-direction", choices=["student-first", "teacher-first"],
        help="direction of the teacher KL term (default student-first)",
    )
    sub.add_argument("--self-kl-cap", type=float, help="optional cap on the self KL value")
    sub.add_argument(
        "--disable-self-loss", action="store_true", default=None,
        help="structurally skip the self-distillation term",
    )


def _distil_config(args) -> DistilConfig:
    _defaults(args, alpha=2.0, beta=-0.01, t_tea=3.0, t_self=3.0, kd_direction="student-first")
    return DistilConfig(
        alpha=args.alpha,
        beta=args.beta,
        t_tea=args.t_tea,
        t_self=args.t_self,
        kd_direction=args.kd_direction,
        self_kl_cap=args.self_kl_cap,
    )


def cmd_train_student(args) -> int:
    _require(args, "data_dir", "records", "out")
    train_set, train_path = _load_split(args.data_dir, "train")
    test_set, test_path = _load_split(args.data_dir, "test")
    records = open_records(args.records)
    distil = _distil_config(args)
    config = _train_config(args, distil=distil)
    if args.disable_self_loss:
        config = replace(config, disable_self_loss=True)
    if records.num_samples != len(train_set) or records.num_classes != train_set.num_classes:
        raise CliValidation(
            f"records (S={records.num_samples}, C={records.num_classes}) do not match "
            f"dataset (S={len(train_set)}, C={train_set.num_classes})"
        )
    model_cfg = student_config(train_set.num_classes, train_set.points_per_cloud)
    model_cfg.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out / "manifest.txt", "train-student", _resolved(args))
    manifest.add_input("train", train_path)
    manifest.add_input("test", test_path)
    manifest.add_input("records", args.records)
    manifest.write()

    args._heavy_started = True
    log = MetricsLog()
    model = train_student(train_set, test_set, records, model_cfg, config, log=log)
    save_model(model, out / "student.pvmd")
    log.write(out / "metrics.csv")
    manifest.finish({"student": out / "student.pvmd", "metrics": out / "metrics.csv"})
    metrics = evaluate(model, test_set)
    print(f"student params={param_count(model_cfg)} OA={metrics['OA']:.2f} mAcc={metrics['mAcc']:.2f}")
    return 0


def cmd_eval(args) -> int:
    _require(args, "model", "data")
    model = load_model(args.model)
    dataset = load_dataset(args.data, split="test")
    metrics = evaluate(model, dataset)
    print(f"OA={metrics['OA']:.1f} mAcc={metrics['mAcc']:.1f}")
    return 0


def cmd_export_features(args) -> int:
    _require(args, "model", "data", "out")
    model = load_model(args.model)
    dataset = load_dataset(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_features(model, dataset, out)
    print(f"wrote {out}")
    return 0


def cmd_inspect_records(args) -> int:
    _require(args, "records")
    rs = open_records(args.records)
    print(
        f"records: E={rs.num_epochs} S={rs.num_samples} C={rs.num_classes} "
        f"schema={rs.aug_schema_id} master_seed={rs.master_seed}"
    )
    for e in range(rs.num_epochs):
        logits = rs.logits[e].astype(np.float64)
        print(
            f"epoch {e}: logits mean={logits.mean():+.4f} std={logits.std():.4f} "
            f"min={logits.min():+.4f} max={logits.max():+.4f}"
        )
    return 0


# ---------------------------------------------------------------------------
# experiment protocols
# ---------------------------------------------------------------------------

def _prepare_experiment_inputs(args, out: Path):
    """Dataset (generated if absent), trained teacher, and records for a protocol run."""
    _defaults(
        args, seed=0, num_classes=8, per_class_train=200, per_class_test=50, points=256,
        record_epochs=None,
    )
    if args.data_dir is None:
        data_dir = out / "data"
        data_dir.mkdir(parents=True, exist_ok=True)
        train, test = generate_synthetic_dataset(
            args.num_classes, args.per_class_train, args.per_class_test, args.points, args.seed
        )
        save_dataset(train, data_dir / "train.pvds")
        save_dataset(test, data_dir / "test.pvds")
    else:
        data_dir = Path(args.data_dir)
    train_set, _ = _load_split(data_dir, "train")
    test_set, _ = _load_split(data_dir, "test")

    config = _train_config(args)
    if args.record_epochs is None:
        args.record_epochs = config.epochs

    if getattr(args, "teacher", None):
        teacher = load_model(args.teacher)
        teacher_path = Path(args.teacher)
    else:
        teacher_cfg = teacher_config(train_set.num_classes, train_set.points_per_cloud)
        teacher = train_teacher(train_set, test_set, teacher_cfg, config)
        teacher_path = out / "teacher.pvmd"
        save_model(teacher, teacher_path)

    if getattr(args, "records", None):
        records = open_records(args.records)
    else:
        records_path = out / "records.pvdr"
        write_records(
            records_path, teacher, train_set, args.record_epochs, args.seed, config.aug
        )
        records = open_records(records_path)
    return train_set, test_set, teacher, records, config


def _student_run(train_set, test_set, records, config, alpha, beta, distil_base):
    distil = replace(distil_base, alpha=alpha, beta=beta)
    cfg = replace(config, distil=distil)
    model_cfg = student_config(train_set.num_classes, train_set.points_per_cloud)
    model = train_student(train_set, test_set, records, model_cfg, cfg)
    return evaluate(model, test_set)


def cmd_ablation(args) -> int:
    _require(args, "out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out / "manifest.txt", "ablation", _resolved(args))
    manifest.write()
    distil_base = _distil_config(args)
    args._heavy_started = True
    train_set, test_set, teacher, records, config = _prepare_experiment_inputs(args, out)
    rows = []
    teacher_metrics = evaluate(teacher, test_set)
    rows.append(("teacher", "", "", teacher_metrics["OA"], teacher_metrics["mAcc"]))
    for name, alpha, beta in ABLATION_CONFIGS:
        a = distil_base.alpha if alpha is None else alpha
        b = distil_base.beta if beta is None else beta
        metrics = _student_run(train_set, test_set, records, config, a, b, distil_base)
        rows.append((name, a, b, metrics["OA"], metrics["mAcc"]))
        print(f"{name}: alpha={a} beta={b} OA={metrics['OA']:.2f} mAcc={metrics['mAcc']:.2f}")
    csv_path = out / "ablation.csv"
    with open(csv_path, "w") as fh:
        fh.write("config,alpha,beta,oa,macc\n")
        for name, a, b, oa, macc in rows:
            fh.write(f"{name},{a},{b},{oa:.6f},{macc:.6f}\n")
    manifest.finish({"ablation": csv_path})
    print(f"wrote {csv_path}")
    return 0


def _sweep_point(payload):
    (train_set, test_set, records, config, alpha, beta, distil_base) = payload
    return _student_run(train_set, test_set, records, config, alpha, beta, distil_base)


def cmd_sweep(args) -> int:
    _require(args, "param", "out")
    _defaults(args, jobs=1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out / "manifest.txt", "sweep", _resolved(args))
    manifest.write()
    distil_base = _distil_config(args)
    args._heavy_started = True
    train_set, test_set, teacher, records, config = _prepare_experiment_inputs(args, out)
    if args.param == "alpha":
        # teacher-weight sweep runs without self-distillation
        points = [(a, 0.0) for a in ALPHA_GRID]
    else:
        points = [(distil_base.alpha, b) for b in BETA_GRID]
    payloads = [
        (train_set, test_set, records, config, a, b, distil_base) for a, b in points
    ]
    if args.jobs > 1:
        import concurrent.futures

        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_point, payloads))
    else:
        results = [_sweep_point(p) for p in payloads]
    csv_path = out / "sweep.csv"
    with open(csv_path, "w") as fh:
        fh.write("param,value,alpha,beta,oa,macc\n")
        for (a, b), metrics in zip(points, results):
            value = a if args.param == "alpha" else b
            fh.write(f"{args.param},{value},{a},{b},{metrics['OA']:.6f},{metrics['mAcc']:.6f}\n")
            print(f"{args.param}={value}: OA={metrics['OA']:.2f} mAcc={metrics['mAcc']:.2f}")
    manifest.finish({"sweep": csv_path})
    print(f"wrote {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcdistill",
        description="Offline distillation pipeline for point-cloud classification",
    )
    subs = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")

    sub = subs.add_parser("gen-data", help="generate the synthetic shape dataset")
    _add_common(sub)
    sub.add_argument("--out", help="output directory for train.pvds/test.pvds")
    sub.add_argument("--num-classes", type=int, help="number of shape classes, 2..8 (default 8)")
    sub.add_argument("--per-class-train", type=int, help="training clouds per class (default 200)")
    sub.add_argument("--per-class-test", type=int, help="test clouds per class (default 50)")
    sub.add_argument("--points", type=int, help="points per cloud (default 256)")
    sub.set_defaults(func=cmd_gen_data, parser=sub)

    sub = subs.add_parser("train-teacher", help="pretrain the teacher with cross-entropy")
    _add_common(sub)
    sub.add_argument("--data-dir", help="directory containing train.pvds and test.pvds")
    sub.add_argument("--out", help="output directory")
    _add_train_flags(sub)
    sub.set_defaults(func=cmd_train_teacher, parser=sub)

    sub = subs.add_parser("gen-records", help="run the frozen teacher and write offline records")
    _add_common(sub)
    sub.add_argument("--data-dir", help="directory containing train.pvds")
    sub.add_argument("--teacher", help="teacher checkpoint (.pvmd)")
    sub.add_argument("--out", help="output .pvdr path or directory")
    sub.add_argument("--epochs", type=int, help="record epochs to generate (default 100)")
    sub.add_argument("--scale-lo", type=float, help="augmentation scale lower bound (default 0.67)")
    sub.add_argument("--scale-hi", type=float, help="augmentation scale upper bound (default 1.5)")
    sub.add_argument("--translate-max", type=float, help="augmentation translation bound (default 0.2)")
    sub.set_defaults(func=cmd_gen_records, parser=sub)

    sub = subs.add_parser("train-student", help="train the student from records, teacher-free")
    _add_common(sub)
    sub.add_argument("--data-dir", help="directory containing train.pvds and test.pvds")
    sub.add_argument("--records", help="record file (.pvdr)")
    sub.add_argument("--out", help="output directory")
    _add_train_flags(sub)
    _add_distil_flags(sub)
    sub.set_defaults(func=cmd_train_student, parser=sub)

    sub = subs.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_common(sub)
    sub.add_argument("--model", help="model checkpoint (.pvmd)")
    sub.add_argument("--data", help="dataset file (.pvds)")
    sub.set_defaults(func=cmd_eval, parser=sub)

    sub = subs.add_parser("export-features", help="export pooled features and logits as CSV")
    _add_common(sub)
    sub.add_argument("--model", help="model checkpoint (.pvmd)")
    sub.add_argument("--data", help="dataset file (.pvds)")
    sub.add_argument("--out", help="output CSV path")
    sub.set_defaults(func=cmd_export_features, parser=sub)

    sub = subs.add_parser("inspect-records", help="print record header and per-epoch stats")
    _add_common(sub)
    sub.add_argument("--records", help="record file (.pvdr)")
    sub.set_defaults(func=cmd_inspect_records, parser=sub)

    for name, helptext in (
        ("ablation", "run the four-configuration distillation ablation"),
        ("sweep", "sweep a distillation weight over its reference grid"),
    ):
        sub = subs.add_parser(name, help=helptext)
        _add_common(sub)
        sub.add_argument("--out", help="output directory")
        sub.add_argument("--data-dir", help="existing dataset directory (else generated)")
        sub.add_argument("--teacher", help="existing teacher checkpoint (else trained)")
        sub.add_argument("--records", help="existing record file (else generated)")
        sub.add_argument("--record-epochs", type=int, help="record epochs (default = --epochs)")
        sub.add_argument("--num-classes", type=int, help="classes when generating data (default 8)")
        sub.add_argument("--per-class-train", type=int, help="train clouds per class (default 200)")
        sub.add_argument("--per-class-test", type=int, help="test clouds per class (default 50)")
        sub.add_argument("--points", type=int, help="points per cloud (default 256)")
        _add_train_flags(sub)
        _add_distil_flags(sub)
        if name == "sweep":
            sub.add_argument("--param", choices=["alpha", "beta"], help="which weight to sweep")
            sub.add_argument("--jobs", type=int, help="parallel worker processes (default 1)")
            sub.set_defaults(func=cmd_sweep, parser=sub)
        else:
            sub.set_defaults(func=cmd_ablation, parser=sub)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "func", None) is None:
        parser.print_help()
        return 2
    try:
        _merge_config(args.parser, args)
        return args.func(args)
    except CliValidation as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except PcdistillError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2 if not getattr(args, "_heavy_started", False) else 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


dispatch = main
