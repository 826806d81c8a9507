"""Command-line experiment surface.

    sqakd <subcommand> --config <path> [--teacher <ckpt>] [--out <dir>]
          [--seed N] [--lambda-list a,b,c] [--quantized]

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence, 5 I/O error. SQAKD_THREADS caps parallel sweep arms.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import checkpoint as CK
from . import oracles as O
from . import training as TR
from .config import ExperimentConfig, load_config
from .errors import ConfigError, DataError, NumericError
from .losses import Mode, ObjectiveSpec


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed).validate()
    return cfg


def _out_dir(args, default_name: str, cfg: ExperimentConfig | None = None) -> Path:
    if args.out:
        out = Path(args.out)
    elif cfg is not None and cfg.out_dir:
        out = Path(cfg.out_dir) / default_name
    else:
        out = Path("runs") / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, cfg: ExperimentConfig | None, payload: dict) -> None:
    doc = {"command": command, "config": cfg.to_dict() if cfg else None, **payload}
    (out / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def _load_teacher(path_str: str):
    path = Path(path_str)
    if not (path / "manifest.json").exists():
        raise OSError(f"teacher checkpoint not found: {path}")
    net, _ = CK.load_checkpoint(path)
    return net


def _require_checkpoint(path_str: str):
    path = Path(path_str)
    if not (path / "manifest.json").exists():
        raise OSError(f"checkpoint not found: {path}")
    return CK.load_checkpoint(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train_fp(args) -> int:
    cfg = _load_cfg(args)
    train, test = cfg.load_datasets()
    if not train.has_labels:
        raise DataError("full-precision pre-training needs a labelled dataset")
    classes = cfg.n_classes(train)
    net = cfg.build_teacher(train.feature_shape, classes)
    plan = cfg.plan(ObjectiveSpec(Mode.CE_ONLY, 0.0, cfg.rho))
    record = TR.train_teacher(net, train, plan, test)

    out = _out_dir(args, "train-fp", cfg)
    ckpt = CK.save_checkpoint(net, out / "checkpoint", seed=cfg.seed, extra={"role": "teacher"})
    record.to_csv(out / "metrics.csv")
    _write_manifest(
        out,
        "train-fp",
        cfg,
        {
            "checkpoint": str(ckpt),
            "final_test_acc": record.final_test_acc,
            "diverged": record.diverged,
            "wall_clock": record.wall_clock,
        },
    )
    print(str(ckpt))
    return 0


def _needs_teacher(cfg: ExperimentConfig) -> bool:
    return cfg.method in ("sqakd", "mixed") or cfg.init == "from_teacher"


def cmd_train_qat(args) -> int:
    cfg = _load_cfg(args)
    teacher = None
    if args.teacher:
        teacher = _load_teacher(args.teacher)
    elif _needs_teacher(cfg):
        raise ConfigError(f"method '{cfg.method}' with init '{cfg.init}' needs --teacher")

    train, test = cfg.load_datasets()
    classes = cfg.n_classes(train)
    student = cfg.build_student(train.feature_shape, classes)
    record = TR.train_sqakd(teacher, student, train, cfg.plan(), test)

    out = _out_dir(args, "train-qat", cfg)
    ckpt = CK.save_checkpoint(student, out / "checkpoint", seed=cfg.seed, extra={"role": "student", "method": cfg.method})
    record.to_csv(out / "metrics.csv")
    _write_manifest(
        out,
        "train-qat",
        cfg,
        {
            "checkpoint": str(ckpt),
            "final_test_acc": record.final_test_acc,
            "final_ce_loss": record.final("ce_loss"),
            "final_kl_loss": record.final("kl_loss"),
            "wall_clock": record.wall_clock,
        },
    )
    print(str(ckpt))
    return 0


def _parse_lambda_list(text: str):
    try:
        lams = [float(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError as e:
        raise ConfigError(f"bad --lambda-list: {e}") from e
    if not lams:
        raise ConfigError("--lambda-list is empty")
    for lam in lams:
        if not 0.0 <= lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    return lams


def cmd_sweep_lambda(args) -> int:
    cfg = _load_cfg(args)
    if not args.teacher:
        raise ConfigError("sweep-lambda needs --teacher (the distillation arms require one)")
    lambdas = _parse_lambda_list(args.lambda_list)
    teacher = _load_teacher(args.teacher)
    train, test = cfg.load_datasets()
    classes = cfg.n_classes(train)
    out = _out_dir(args, "sweep-lambda", cfg)

    def run_arm(lam: float):
        objective = ObjectiveSpec.from_lambda(lam, cfg.rho)
        student = cfg.build_student(train.feature_shape, classes)
        record = TR.train_sqakd(teacher, student, train, cfg.plan(objective), test)
        arm_dir = out / f"lambda_{lam:g}"
        arm_dir.mkdir(parents=True, exist_ok=True)
        record.to_csv(arm_dir / "metrics.csv")
        return lam, record

    workers = max(1, int(os.environ.get("SQAKD_THREADS", "1")))
    if workers == 1:
        results = [run_arm(lam) for lam in lambdas]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_arm, lambdas))

    summary = {
        f"{lam:g}": {
            "final_ce_loss": rec.final("ce_loss"),
            "final_kl_loss": rec.final("kl_loss"),
            "final_test_acc": rec.final_test_acc,
        }
        for lam, rec in results
    }
    _write_manifest(out, "sweep-lambda", cfg, {"lambdas": lambdas, "arms": summary})
    print(str(out))
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    net, _ = _require_checkpoint(args.checkpoint)
    _, test = cfg.load_datasets()
    acc = TR.evaluate(net, args.quantized, test)
    print(f"test_accuracy {acc!r}")
    if args.out:
        out = _out_dir(args, "eval", cfg)
        _write_manifest(out, "eval", cfg, {"checkpoint": args.checkpoint, "quantized": args.quantized, "test_accuracy": acc})
    return 0


def cmd_export_quantized(args) -> int:
    dst = Path(args.out) if args.out else Path(str(args.checkpoint).rstrip("/") + "-quantized")
    if not (Path(args.checkpoint) / "manifest.json").exists():
        raise OSError(f"checkpoint not found: {args.checkpoint}")
    CK.export_quantized(args.checkpoint, dst)
    print(str(dst))
    return 0


def cmd_landscape(args) -> int:
    cfg = _load_cfg(args)
    net, _ = _require_checkpoint(args.checkpoint)
    teacher = _load_teacher(args.teacher) if args.teacher else None
    train, _ = cfg.load_datasets()
    objective = cfg.objective()
    loss_fn, center = O.network_loss_fn(net, train, objective, teacher=teacher, quantized=net.has_quantizers())
    slice_ = O.export_landscape(
        loss_fn, center, extents=args.extents, resolution=args.resolution, seed=args.direction_seed
    )
    out = _out_dir(args, "landscape", cfg)
    O.save_landscape(slice_, out / "landscape.csv", out / "landscape.json")
    _write_manifest(out, "landscape", cfg, {"checkpoint": args.checkpoint, "center_loss": slice_.center_loss})
    print(str(out / "landscape.csv"))
    return 0


# ---------------------------------------------------------------------------
# argument parsing and error mapping


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sqakd", description="Quantization-aware training experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", required=True, help="path to a JSON experiment config")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if checkpoint:
            p.add_argument("checkpoint", help="checkpoint directory")

    p = sub.add_parser("train-fp", help="train the full-precision teacher")
    common(p)
    p.set_defaults(fn=cmd_train_fp)

    p = sub.add_parser("train-qat", help="train a quantized student")
    common(p)
    p.add_argument("--teacher", default=None, help="teacher checkpoint directory")
    p.set_defaults(fn=cmd_train_qat)

    p = sub.add_parser("sweep-lambda", help="run one training arm per lambda")
    common(p)
    p.add_argument("--teacher", default=None, help="teacher checkpoint directory")
    p.add_argument("--lambda-list", required=True, help="comma-separated lambdas, e.g. 0,0.5,1")
    p.set_defaults(fn=cmd_sweep_lambda)

    p = sub.add_parser("eval", help="report test accuracy of a checkpoint")
    common(p, checkpoint=True)
    p.add_argument("--quantized", action="store_true", help="evaluate through the fake-quantized forward")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("export-quantized", help="materialize quantized weights into a new checkpoint")
    p.add_argument("checkpoint", help="source checkpoint directory")
    p.add_argument("--out", default=None, help="destination checkpoint directory")
    p.set_defaults(fn=cmd_export_quantized)

    p = sub.add_parser("landscape", help="export a loss-landscape slice around a checkpoint")
    common(p, checkpoint=True)
    p.add_argument("--teacher", default=None, help="teacher checkpoint (needed for distillation objectives)")
    p.add_argument("--extents", type=float, default=1.0)
    p.add_argument("--resolution", type=int, default=11)
    p.add_argument("--direction-seed", type=int, default=0)
    p.set_defaults(fn=cmd_landscape)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error[config]: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"error[data]: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"error[numeric]: {e}", file=sys.stderr)
        return 4
    except OSError as e:
        print(f"error[io]: {e}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
