"""Command-line orchestration of the experiment lifecycle.

Exit codes: 0 success, 2 unknown subcommand / bad flags (argparse), 3 invalid
config, 4 missing or unreadable checkpoint, 1 any other failure. Errors print
one machine-parseable line on stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import CheckpointError, params_from_checkpoint
from .config import ConfigError, RunConfig, config_to_text, load_config_file, set_key
from .data import ClipDataset, DataError, DatasetParams, generate_dataset, make_regime
from .distill import (
    evaluate_fused,
    evaluate_stream,
    load_frozen_stream,
    read_eval_top1,
    stream_spec_for,
    sweep_bridges,
    train_fusion,
    train_student,
    train_teacher,
    write_eval_csv,
)
from .flow import FlowError
from .network import load_stream
from .optim import DivergenceError
from .tensor import ShapeError


class MissingCheckpointError(RuntimeError):
    pass


SUBCOMMANDS = (
    "gen-data",
    "precompute-flow",
    "train-teacher",
    "train-student",
    "train-fusion",
    "evaluate",
    "sweep",
    "report",
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crosstream",
                                     description="cross-enhanced two-stream 3D ConvNet experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, repeatable, last wins")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory for this run")
        p.add_argument("--parallel", type=int, default=None, help="parallel sweep workers")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        load_config_file(cfg, args.config)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, raw = item.partition("=")
        set_key(cfg, key.strip(), raw)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.parallel is not None:
        cfg.parallel = args.parallel
    cfg.validate()
    return cfg


def _out_dir(cfg: RunConfig, fallback: str = "") -> Path:
    out = cfg.out or fallback
    if not out:
        raise ConfigError("an output directory is required (set out or pass --out)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_resolved(cfg: RunConfig, out: Path) -> None:
    (out / "config.txt").write_text(config_to_text(cfg), encoding="utf-8")


def _dataset(cfg: RunConfig) -> ClipDataset:
    if not cfg.data.dir:
        raise ConfigError("data.dir must point at a generated dataset")
    if not (Path(cfg.data.dir) / "manifest.txt").exists():
        raise ConfigError(f"no dataset manifest under {cfg.data.dir!r} (run gen-data first)")
    return ClipDataset(cfg.data.dir)


def _checkpoint_path(raw: str, what: str) -> Path:
    if not raw:
        raise MissingCheckpointError(f"{what} checkpoint path is not set")
    path = Path(raw)
    if not path.exists():
        raise MissingCheckpointError(f"{what} checkpoint not found: {raw}")
    return path


def _dataset_params(cfg: RunConfig) -> DatasetParams:
    common = dict(
        seed=cfg.seed,
        num_classes=cfg.data.num_classes,
        clips_per_class=cfg.data.clips_per_class,
        clip_t=cfg.data.clip_t,
        clip_h=cfg.data.clip_h,
        clip_w=cfg.data.clip_w,
        train_fraction=cfg.data.train_fraction,
        speed=cfg.data.speed,
    )
    if cfg.data.regime:
        return make_regime(cfg.data.regime, **common)
    return DatasetParams(camera_noise_sigma=cfg.data.camera_noise_sigma,
                         appearance_cue=cfg.data.appearance_cue, **common)


def cmd_gen_data(cfg: RunConfig) -> int:
    out = _out_dir(cfg, fallback=cfg.data.dir)
    if not cfg.data.dir:
        cfg.data.dir = str(out)
    _write_resolved(cfg, out)
    manifest = generate_dataset(_dataset_params(cfg), out)
    n_train = sum(1 for r in manifest.clips if r.split == "train")
    print(f"generated {len(manifest.clips)} clips ({n_train} train / "
          f"{len(manifest.clips) - n_train} test) under {out}")
    return 0


def cmd_precompute_flow(cfg: RunConfig) -> int:
    ds = _dataset(cfg)
    out = _out_dir(cfg, fallback=cfg.data.dir)
    _write_resolved(cfg, out)
    computed = ds.precompute_flow(cfg.flow)
    print(f"flow cache ready: {computed} clips computed, "
          f"{len(ds.manifest.clips) - computed} already cached")
    return 0


def cmd_train_teacher(cfg: RunConfig) -> int:
    ds = _dataset(cfg)
    out = _out_dir(cfg)
    _write_resolved(cfg, out)
    spec = stream_spec_for(ds, cfg.train.stream, cfg.net.block_channels)
    result = train_teacher(ds, spec, cfg.train.epochs, cfg.seed, out_dir=out,
                           optimizer=cfg.optim, batch_size=cfg.train.batch_size, tvl1=cfg.flow)
    write_eval_csv(out / "eval.csv", evaluate_stream(result.net, ds, "test",
                                                     cfg.train.batch_size, cfg.flow))
    print(f"trained {cfg.train.stream} stream for {cfg.train.epochs} epochs; "
          f"checkpoint at {result.checkpoint_path}")
    return 0


def cmd_train_student(cfg: RunConfig) -> int:
    ds = _dataset(cfg)
    out = _out_dir(cfg)
    _write_resolved(cfg, out)
    teacher_path = _checkpoint_path(cfg.paths.teacher_checkpoint, "teacher")
    teacher = load_frozen_stream(teacher_path,
                                 stream_spec_for(ds, cfg.direction.teacher_stream, cfg.net.block_channels))
    result = train_student(ds, teacher, cfg.direction, cfg.bridge, cfg.loss,
                           cfg.train.epochs, cfg.seed, out_dir=out,
                           optimizer=cfg.optim, batch_size=cfg.train.batch_size, tvl1=cfg.flow)
    write_eval_csv(out / "eval.csv", evaluate_stream(result.net, ds, "test",
                                                     cfg.train.batch_size, cfg.flow))
    print(f"trained {cfg.direction.student_stream} student against frozen "
          f"{cfg.direction.teacher_stream} teacher; checkpoint at {result.checkpoint_path}")
    return 0


def _load_stream_pair(cfg: RunConfig, ds: ClipDataset):
    rgb = load_stream(_checkpoint_path(cfg.paths.rgb_checkpoint, "rgb"),
                      stream_spec_for(ds, "rgb", cfg.net.block_channels), frozen=True)
    flow = load_stream(_checkpoint_path(cfg.paths.flow_checkpoint, "flow"),
                       stream_spec_for(ds, "flow", cfg.net.block_channels), frozen=True)
    return rgb, flow


def cmd_train_fusion(cfg: RunConfig) -> int:
    ds = _dataset(cfg)
    out = _out_dir(cfg)
    _write_resolved(cfg, out)
    rgb, flow = _load_stream_pair(cfg, ds)
    result = train_fusion(ds, rgb, flow, cfg.train.epochs, cfg.seed, out_dir=out,
                          optimizer=cfg.optim, batch_size=cfg.train.batch_size, tvl1=cfg.flow)
    write_eval_csv(out / "eval.csv", evaluate_fused(rgb, flow, result.weight, result.bias,
                                                    ds, "test", cfg.train.batch_size, cfg.flow))
    print(f"trained fusion layer; checkpoint at {result.checkpoint_path}")
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    ds = _dataset(cfg)
    out = _out_dir(cfg)
    _write_resolved(cfg, out)
    split = cfg.eval.split
    if cfg.eval.target == "fused":
        rgb, flow = _load_stream_pair(cfg, ds)
        params = {p.name: p for p in params_from_checkpoint(
            _checkpoint_path(cfg.paths.fusion_checkpoint, "fusion"), frozen=True)}
        if "fusion.w" not in params or "fusion.b" not in params:
            raise CheckpointError("fusion checkpoint must contain fusion.w and fusion.b")
        result = evaluate_fused(rgb, flow, params["fusion.w"], params["fusion.b"],
                                ds, split, cfg.train.batch_size, cfg.flow)
    else:
        stream = cfg.eval.target
        path = cfg.paths.rgb_checkpoint if stream == "rgb" else cfg.paths.flow_checkpoint
        net = load_stream(_checkpoint_path(path, stream),
                          stream_spec_for(ds, stream, cfg.net.block_channels), frozen=True)
        result = evaluate_stream(net, ds, split, cfg.train.batch_size, cfg.flow)
    write_eval_csv(out / "eval.csv", result, split=split)
    print(f"{cfg.eval.target} {split} top1 {result.top1:.3f} over {result.n} clips")
    return 0


def cmd_sweep(cfg: RunConfig) -> int:
    ds = _dataset(cfg)
    out = _out_dir(cfg)
    _write_resolved(cfg, out)
    teacher_path = _checkpoint_path(cfg.paths.teacher_checkpoint, "teacher")
    teacher = load_frozen_stream(teacher_path,
                                 stream_spec_for(ds, cfg.direction.teacher_stream, cfg.net.block_channels))
    result = sweep_bridges(ds, teacher, teacher_path, cfg.direction, cfg.loss,
                           cfg.train.epochs, cfg.seed, out_dir=out, optimizer=cfg.optim,
                           batch_size=cfg.train.batch_size, tvl1=cfg.flow,
                           fusion_epochs=cfg.train.fusion_epochs, parallel=cfg.parallel)
    print(f"swept {len(result.rows)} bridges; best "
          f"{result.best.teacher_tap.value}->{result.best.student_tap.value}; "
          f"summary at {result.summary_path}")
    return 0


_REPORT_CELLS = ("rgb", "flow", "fused")
_REPORT_PIPELINES = ("baseline", "enhanced")


def build_report(root: Path) -> tuple[str, str]:
    """(text table, csv) for every `<regime>.<pipeline>.<cell>` run under root."""
    values: dict[tuple[str, str, str], str] = {}
    for d in sorted(root.iterdir()):
        if not d.is_dir():
            continue
        parts = d.name.split(".")
        if len(parts) != 3 or parts[1] not in _REPORT_PIPELINES or parts[2] not in _REPORT_CELLS:
            continue
        top1 = read_eval_top1(d / "eval.csv")
        if top1 is not None:
            values[(parts[0], parts[1], parts[2])] = top1
    regimes = sorted({k[0] for k in values})
    if not regimes:
        raise DataError(f"no evaluated runs found under {root}")
    missing = [
        f"{r}.{p}.{c}"
        for r in regimes
        for p in _REPORT_PIPELINES
        for c in _REPORT_CELLS
        if (r, p, c) not in values
    ]
    if missing:
        raise DataError("missing run data: " + ", ".join(missing))

    csv_lines = ["regime,pipeline,rgb,flow,fused"]
    for r in regimes:
        for p in _REPORT_PIPELINES:
            csv_lines.append(f"{r},{p}," + ",".join(values[(r, p, c)] for c in _REPORT_CELLS))
    csv_text = "\n".join(csv_lines) + "\n"

    name_w = max(len(r) for r in regimes)
    head = f"{'regime':<{name_w}}  {'pipeline':<8}  {'RGB':>6}  {'Flow':>6}  {'RGB+Flow':>8}"
    rows = [head, "-" * len(head)]
    for r in regimes:
        for p in _REPORT_PIPELINES:
            rgb, flow, fused = (values[(r, p, c)] for c in _REPORT_CELLS)
            rows.append(f"{r:<{name_w}}  {p:<8}  {rgb:>6}  {flow:>6}  {fused:>8}")
    return "\n".join(rows) + "\n", csv_text


def cmd_report(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    text, csv_text = build_report(out)
    (out / "report.txt").write_text(text, encoding="utf-8")
    (out / "report.csv").write_text(csv_text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "precompute-flow": cmd_precompute_flow,
    "train-teacher": cmd_train_teacher,
    "train-student": cmd_train_student,
    "train-fusion": cmd_train_fusion,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def _fail(code: int, kind: str, exc: Exception) -> int:
    msg = str(exc).replace("\n", " ")
    sys.stderr.write(f'error code={code} kind={kind} msg="{msg}"\n')
    return code


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        return _fail(3, "invalid-config", exc)
    except MissingCheckpointError as exc:
        return _fail(4, "missing-checkpoint", exc)
    except CheckpointError as exc:
        return _fail(4, "bad-checkpoint", exc)
    except DivergenceError as exc:
        return _fail(1, "diverged", exc)
    except (DataError, FlowError, ShapeError, ValueError, OSError, KeyError) as exc:
        return _fail(1, "failed", exc)


if __name__ == "__main__":
    sys.exit(main())
