"""End-to-end benchmark orchestration.

One call of run_regime covers a full pipeline on one regime and seed: data
generation, flow precompute, both single-stream baselines (the stronger one
doubles as the frozen teacher), the cross-enhanced student, and the two
fusion heads. Run directories follow the `<regime>.<pipeline>.<cell>` naming
the report command consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import file_sha256
from .data import ClipDataset, generate_dataset, make_regime
from .distill import (
    BridgeConfig,
    DistillDirection,
    LossWeights,
    evaluate_fused,
    evaluate_stream,
    load_frozen_stream,
    stream_spec_for,
    train_fusion,
    train_student,
    train_teacher,
    write_eval_csv,
)
from .flow import TvL1Params
from .optim import OptimizerConfig

REGIME_DIRECTION = {
    "motion-favored": DistillDirection.FLOW_TEACHES_RGB,
    "camera-noisy": DistillDirection.RGB_TEACHES_FLOW,
}

REGIMES = tuple(REGIME_DIRECTION)


@dataclass
class BenchmarkSettings:
    clips_per_class: int = 16
    clip_t: int = 8
    clip_h: int = 32
    clip_w: int = 32
    speed: float = 2.0
    teacher_epochs: int = 12
    student_epochs: int = 12
    fusion_epochs: int = 8
    batch_size: int = 6
    block_channels: tuple[int, ...] = (8, 16, 32, 64)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    fusion_optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(learning_rate=0.01))
    weights: LossWeights = field(default_factory=LossWeights)
    bridge: BridgeConfig = field(default_factory=BridgeConfig)
    tvl1: TvL1Params = field(default_factory=TvL1Params)


@dataclass
class RegimeOutcome:
    regime: str
    seed: int
    direction: DistillDirection
    baseline_rgb: float
    baseline_flow: float
    baseline_fused: float
    enhanced_student: float
    enhanced_fused: float
    teacher_hash_before: str
    teacher_hash_after: str
    root: Path

    @property
    def teacher_stream(self) -> str:
        return self.direction.teacher_stream

    @property
    def student_stream(self) -> str:
        return self.direction.student_stream

    @property
    def baseline_student(self) -> float:
        return self.baseline_rgb if self.student_stream == "rgb" else self.baseline_flow

    @property
    def baseline_teacher(self) -> float:
        return self.baseline_flow if self.teacher_stream == "flow" else self.baseline_rgb


def prepare_dataset(regime: str, seed: int, root: Path, settings: BenchmarkSettings) -> ClipDataset:
    data_dir = Path(root) / f"{regime}.data"
    if not (data_dir / "manifest.txt").exists():
        params = make_regime(
            regime,
            seed=seed,
            clips_per_class=settings.clips_per_class,
            clip_t=settings.clip_t,
            clip_h=settings.clip_h,
            clip_w=settings.clip_w,
            speed=settings.speed,
        )
        generate_dataset(params, data_dir)
    ds = ClipDataset(data_dir)
    ds.precompute_flow(settings.tvl1)
    return ds


def run_regime(regime: str, seed: int, root, settings: BenchmarkSettings | None = None) -> RegimeOutcome:
    settings = settings or BenchmarkSettings()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ds = prepare_dataset(regime, seed, root, settings)
    bs, tvl1 = settings.batch_size, settings.tvl1

    base = {}
    for stream in ("rgb", "flow"):
        spec = stream_spec_for(ds, stream, settings.block_channels)
        run_dir = root / f"{regime}.baseline.{stream}"
        base[stream] = train_teacher(ds, spec, settings.teacher_epochs, seed,
                                     out_dir=run_dir, optimizer=settings.optimizer,
                                     batch_size=bs, tvl1=tvl1)
        write_eval_csv(run_dir / "eval.csv", evaluate_stream(base[stream].net, ds, "test", bs, tvl1))

    base_fusion = train_fusion(ds, base["rgb"].net, base["flow"].net, settings.fusion_epochs, seed,
                               out_dir=root / f"{regime}.baseline.fused",
                               optimizer=settings.fusion_optimizer, batch_size=bs, tvl1=tvl1)
    base_fused_eval = evaluate_fused(base["rgb"].net, base["flow"].net,
                                     base_fusion.weight, base_fusion.bias, ds, "test", bs, tvl1)
    write_eval_csv(root / f"{regime}.baseline.fused" / "eval.csv", base_fused_eval)

    direction = REGIME_DIRECTION[regime]
    teacher_base = base[direction.teacher_stream]
    teacher_hash_before = file_sha256(teacher_base.checkpoint_path)
    teacher_net = load_frozen_stream(teacher_base.checkpoint_path,
                                     stream_spec_for(ds, direction.teacher_stream, settings.block_channels))

    student_dir = root / f"{regime}.enhanced.{direction.student_stream}"
    student = train_student(ds, teacher_net, direction, settings.bridge, settings.weights,
                            settings.student_epochs, seed, out_dir=student_dir,
                            optimizer=settings.optimizer, batch_size=bs, tvl1=tvl1)
    student_eval = evaluate_stream(student.net, ds, "test", bs, tvl1)
    write_eval_csv(student_dir / "eval.csv", student_eval)

    teacher_dir = root / f"{regime}.enhanced.{direction.teacher_stream}"
    teacher_dir.mkdir(parents=True, exist_ok=True)
    write_eval_csv(teacher_dir / "eval.csv", evaluate_stream(teacher_net, ds, "test", bs, tvl1))

    rgb_net = student.net if student.net.name == "rgb" else teacher_net
    flow_net = student.net if student.net.name == "flow" else teacher_net
    enh_fusion = train_fusion(ds, rgb_net, flow_net, settings.fusion_epochs, seed,
                              out_dir=root / f"{regime}.enhanced.fused",
                              optimizer=settings.fusion_optimizer, batch_size=bs, tvl1=tvl1)
    enh_fused_eval = evaluate_fused(rgb_net, flow_net, enh_fusion.weight, enh_fusion.bias,
                                    ds, "test", bs, tvl1)
    write_eval_csv(root / f"{regime}.enhanced.fused" / "eval.csv", enh_fused_eval)
    teacher_hash_after = file_sha256(teacher_base.checkpoint_path)

    return RegimeOutcome(
        regime=regime,
        seed=seed,
        direction=direction,
        baseline_rgb=base["rgb"].final_test_acc,
        baseline_flow=base["flow"].final_test_acc,
        baseline_fused=base_fused_eval.top1,
        enhanced_student=student_eval.top1,
        enhanced_fused=enh_fused_eval.top1,
        teacher_hash_before=teacher_hash_before,
        teacher_hash_after=teacher_hash_after,
        root=root,
    )


def run_benchmark(out_dir, seeds, settings: BenchmarkSettings | None = None) -> list[RegimeOutcome]:
    """Both regimes for every seed; one subdirectory per seed."""
    settings = settings or BenchmarkSettings()
    outcomes = []
    for seed in seeds:
        for regime in REGIMES:
            outcomes.append(run_regime(regime, seed, Path(out_dir) / f"seed{seed}", settings))
    return outcomes
