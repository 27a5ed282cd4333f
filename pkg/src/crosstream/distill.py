"""Three-phase cross-stream training.

Phase 1 trains the teacher stream with plain cross-entropy. Phase 2 freezes
it and trains the other stream against a weighted sum of an intermediate
bridge MSE (l1), an output-feature bridge MSE (l2) and cross-entropy (l3).
Phase 3 trains a small fusion layer over both streams' logits. Zero-weight
loss terms are skipped entirely, so an (alpha=0, beta=0) student run follows
the exact parameter trajectory of a plain cross-entropy trainer.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from enum import Enum
from itertools import product
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import file_sha256, params_from_checkpoint, save_checkpoint
from .data import ClipDataset
from .flow import TvL1Params
from .network import (
    INTERMEDIATE_TAPS,
    BridgeAdapter,
    StreamNetwork,
    StreamSpec,
    TapFeatures,
    TapPoint,
    adapt,
    build_adapter,
    build_stream,
    forward,
)
from .optim import DivergenceError, OptimizerConfig, Parameter, SgdOptimizer
from .rng import Stream
from .tensor import Tensor, no_grad


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.alpha == self.beta == self.gamma == 0:
            raise ValueError("at least one loss weight must be nonzero")


class DistillDirection(Enum):
    FLOW_TEACHES_RGB = "flow-teaches-rgb"
    RGB_TEACHES_FLOW = "rgb-teaches-flow"

    @property
    def teacher_stream(self) -> str:
        return "flow" if self is DistillDirection.FLOW_TEACHES_RGB else "rgb"

    @property
    def student_stream(self) -> str:
        return "rgb" if self is DistillDirection.FLOW_TEACHES_RGB else "flow"


@dataclass(frozen=True)
class BridgeConfig:
    teacher_tap: TapPoint = TapPoint.MEDIUM
    student_tap: TapPoint = TapPoint.MEDIUM

    def __post_init__(self):
        for tap in (self.teacher_tap, self.student_tap):
            if tap not in INTERMEDIATE_TAPS:
                raise ValueError(f"bridge taps must be Front/Medium/Rear, got {tap}")


@dataclass
class LossBreakdown:
    l1: float
    l2: float
    l3: float
    total: float


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    l1: float
    l2: float
    l3: float
    total: float
    train_acc: float
    test_acc: float
    seconds: float


@dataclass
class EvalResult:
    top1: float
    per_class: tuple[float, ...]
    n: int


@dataclass
class TrainResult:
    records: list[EpochRecord]
    checkpoint_path: Path
    net: StreamNetwork
    adapter: BridgeAdapter | None = None

    @property
    def final_test_acc(self) -> float:
        return self.records[-1].test_acc if self.records else float("nan")


@dataclass
class FusionResult:
    records: list[EpochRecord]
    checkpoint_path: Path
    weight: Parameter
    bias: Parameter


def fmt6(x: float) -> str:
    return f"{x:.6g}"


METRICS_HEADER = "phase,epoch,l1,l2,l3,total,train_acc,test_acc,seconds"
EVAL_HEADER = "split,metric,value"


def write_eval_csv(path, result: "EvalResult", split: str = "test") -> None:
    """Accuracies with 3 decimals; reports copy these strings verbatim."""
    lines = [EVAL_HEADER, f"{split},top1,{result.top1:.3f}"]
    for k, acc in enumerate(result.per_class):
        lines.append(f"{split},class{k},{acc:.3f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_eval_top1(path, split: str = "test") -> str | None:
    """The stored top-1 accuracy string for a split, or None if absent."""
    p = Path(path)
    if not p.exists():
        return None
    for line in p.read_text(encoding="utf-8").splitlines()[1:]:
        parts = line.split(",")
        if len(parts) == 3 and parts[0] == split and parts[1] == "top1":
            return parts[2]
    return None


def write_metrics_csv(path, records: Sequence[EpochRecord]) -> None:
    lines = [METRICS_HEADER]
    for r in records:
        lines.append(
            f"{r.phase},{r.epoch},{fmt6(r.l1)},{fmt6(r.l2)},{fmt6(r.l3)},"
            f"{fmt6(r.total)},{fmt6(r.train_acc)},{fmt6(r.test_acc)},{fmt6(r.seconds)}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def stream_spec_for(dataset: ClipDataset, stream: str,
                    block_channels: tuple[int, ...] = (8, 16, 32, 64)) -> StreamSpec:
    return StreamSpec(
        in_channels=3 if stream == "rgb" else 2,
        num_classes=dataset.params.num_classes,
        block_channels=tuple(block_channels),
        clip_shape=dataset.params.clip_shape,
    )


def _batch(dataset: ClipDataset, ids, stream: str, tvl1: TvL1Params) -> np.ndarray:
    return dataset.rgb_batch(ids) if stream == "rgb" else dataset.flow_batch(ids, tvl1)


def _batched_ids(ids: list[int], perm: np.ndarray, batch_size: int):
    ordered = [ids[i] for i in perm]
    for start in range(0, len(ordered), batch_size):
        yield ordered[start : start + batch_size]


def top1_accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ValueError("empty split")
    return float((predictions == labels).sum() / len(labels))


def per_class_accuracy(predictions: np.ndarray, labels: np.ndarray, num_classes: int) -> tuple[float, ...]:
    out = []
    for c in range(num_classes):
        mask = labels == c
        out.append(float((predictions[mask] == c).sum() / mask.sum()) if mask.any() else float("nan"))
    return tuple(out)


def _stream_predictions(net: StreamNetwork, dataset: ClipDataset, ids,
                        batch_size: int, tvl1: TvL1Params) -> np.ndarray:
    preds = []
    with no_grad():
        for chunk in _batched_ids(ids, np.arange(len(ids)), batch_size):
            x = Tensor(_batch(dataset, chunk, net.name, tvl1))
            preds.append(np.argmax(forward(net, x).logits.data, axis=1))
    return np.concatenate(preds)


def evaluate_stream(net: StreamNetwork, dataset: ClipDataset, split: str,
                    batch_size: int = 6, tvl1: TvL1Params | None = None) -> EvalResult:
    tvl1 = tvl1 or TvL1Params()
    ids = dataset.ids(split)
    if not ids:
        raise ValueError(f"empty split {split!r}")
    preds = _stream_predictions(net, dataset, ids, batch_size, tvl1)
    labels = dataset.labels(ids)
    return EvalResult(top1_accuracy(preds, labels),
                      per_class_accuracy(preds, labels, dataset.params.num_classes), len(ids))


def _fused_logits_batch(rgb_net: StreamNetwork, flow_net: StreamNetwork,
                        weight: Parameter, bias: Parameter,
                        dataset: ClipDataset, chunk, tvl1: TvL1Params) -> Tensor:
    with no_grad():
        lr = forward(rgb_net, Tensor(dataset.rgb_batch(chunk))).logits
        lf = forward(flow_net, Tensor(dataset.flow_batch(chunk, tvl1))).logits
    stacked = T.concat((lr, lf), axis=1)
    return T.linear(stacked, weight.tensor, bias.tensor)


def evaluate_fused(rgb_net: StreamNetwork, flow_net: StreamNetwork,
                   weight: Parameter, bias: Parameter,
                   dataset: ClipDataset, split: str,
                   batch_size: int = 6, tvl1: TvL1Params | None = None) -> EvalResult:
    tvl1 = tvl1 or TvL1Params()
    ids = dataset.ids(split)
    if not ids:
        raise ValueError(f"empty split {split!r}")
    preds = []
    with no_grad():
        for chunk in _batched_ids(ids, np.arange(len(ids)), batch_size):
            logits = _fused_logits_batch(rgb_net, flow_net, weight, bias, dataset, chunk, tvl1)
            preds.append(np.argmax(logits.data, axis=1))
    preds = np.concatenate(preds)
    labels = dataset.labels(ids)
    return EvalResult(top1_accuracy(preds, labels),
                      per_class_accuracy(preds, labels, dataset.params.num_classes), len(ids))


def freeze(checkpoint_path) -> list[Parameter]:
    """Load a checkpoint as a frozen parameter set (validates the file)."""
    return params_from_checkpoint(checkpoint_path, frozen=True)


def load_frozen_stream(checkpoint_path, spec: StreamSpec) -> StreamNetwork:
    from .network import load_stream

    return load_stream(checkpoint_path, spec, frozen=True)


def _check_finite_loss(value: float, phase: str, epoch: int) -> None:
    if not np.isfinite(value):
        raise DivergenceError(
            f"non-finite loss in {phase} epoch {epoch}; last good checkpoint retained"
        )


def train_teacher(dataset: ClipDataset, spec: StreamSpec, epochs: int, seed: int, *,
                  out_dir, optimizer: OptimizerConfig | None = None, batch_size: int = 6,
                  tvl1: TvL1Params | None = None, phase: str = "teacher") -> TrainResult:
    """Train one stream with cross-entropy only; the result can serve as a
    frozen teacher or as a single-stream baseline."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tvl1 = tvl1 or TvL1Params()
    net = build_stream(spec, seed)
    opt = SgdOptimizer(net.parameters(), optimizer or OptimizerConfig())
    shuffle = Stream(seed, "shuffle")
    ckpt = out / "checkpoint.x3dc"
    net.save(ckpt)
    train_ids = dataset.ids("train")
    records: list[EpochRecord] = []
    write_metrics_csv(out / "metrics.csv", records)
    for epoch in range(epochs):
        t0 = time.perf_counter()
        loss_sum = 0.0
        correct = 0
        perm = shuffle.permutation(len(train_ids))
        for chunk in _batched_ids(train_ids, perm, batch_size):
            labels = dataset.labels(chunk)
            x = Tensor(_batch(dataset, chunk, net.name, tvl1))
            feats = forward(net, x)
            loss, _ = T.softmax_cross_entropy(feats.logits, labels)
            value = loss.item()
            _check_finite_loss(value, phase, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += value * len(chunk)
            correct += int((np.argmax(feats.logits.data, axis=1) == labels).sum())
        train_acc = correct / len(train_ids)
        test_acc = evaluate_stream(net, dataset, "test", batch_size, tvl1).top1
        mean_loss = loss_sum / len(train_ids)
        records.append(EpochRecord(phase, epoch, 0.0, 0.0, mean_loss, mean_loss,
                                   train_acc, test_acc, time.perf_counter() - t0))
        net.save(ckpt)
        write_metrics_csv(out / "metrics.csv", records)
    return TrainResult(records, ckpt, net)


def student_loss(student_taps: TapFeatures, teacher_taps: TapFeatures | None,
                 bridge: BridgeConfig, adapter: BridgeAdapter, weights: LossWeights,
                 labels) -> tuple[LossBreakdown, Tensor]:
    """Weighted bridge + cross-entropy loss. Teacher features are constants;
    terms whose weight is zero are skipped outright (and reported as 0)."""
    terms: list[Tensor] = []
    l1v = l2v = l3v = 0.0
    if weights.alpha != 0.0:
        if teacher_taps is None:
            raise ValueError("alpha != 0 requires teacher features")
        aligned = adapt(adapter, teacher_taps.tap(bridge.teacher_tap).detach())
        l1 = T.mse(student_taps.tap(bridge.student_tap), aligned)
        l1v = l1.item()
        terms.append(T.scale(l1, weights.alpha))
    if weights.beta != 0.0:
        if teacher_taps is None:
            raise ValueError("beta != 0 requires teacher features")
        l2 = T.mse(student_taps.output, teacher_taps.output.detach())
        l2v = l2.item()
        terms.append(T.scale(l2, weights.beta))
    if weights.gamma != 0.0:
        l3, _ = T.softmax_cross_entropy(student_taps.logits, labels)
        l3v = l3.item()
        terms.append(T.scale(l3, weights.gamma))
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return LossBreakdown(l1v, l2v, l3v, total.item()), total


def train_student(dataset: ClipDataset, teacher: StreamNetwork, direction: DistillDirection,
                  bridge: BridgeConfig, weights: LossWeights, epochs: int, seed: int, *,
                  out_dir, optimizer: OptimizerConfig | None = None, batch_size: int = 6,
                  tvl1: TvL1Params | None = None) -> TrainResult:
    """Train the weaker stream against the frozen teacher."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tvl1 = tvl1 or TvL1Params()
    if teacher.name != direction.teacher_stream:
        raise ValueError(f"direction {direction.value} needs a {direction.teacher_stream} teacher, "
                         f"got a {teacher.name} network")
    if not all(p.frozen for p in teacher.parameters()):
        raise ValueError("teacher parameters must be frozen before student training")
    student_spec = StreamSpec(
        in_channels=3 if direction.student_stream == "rgb" else 2,
        num_classes=teacher.spec.num_classes,
        block_channels=teacher.spec.block_channels,
        clip_shape=teacher.spec.clip_shape,
    )
    student = build_stream(student_spec, seed)
    adapter = build_adapter(teacher.spec.tap_shape(bridge.teacher_tap)[0],
                            student_spec.tap_shape(bridge.student_tap), seed)
    needs_teacher = weights.alpha != 0.0 or weights.beta != 0.0
    opt = SgdOptimizer(student.parameters() + adapter.parameters(),
                       optimizer or OptimizerConfig())
    shuffle = Stream(seed, "shuffle")
    ckpt = out / "checkpoint.x3dc"
    save_checkpoint(ckpt, student.parameters() + adapter.parameters())
    train_ids = dataset.ids("train")
    records: list[EpochRecord] = []
    write_metrics_csv(out / "metrics.csv", records)
    for epoch in range(epochs):
        t0 = time.perf_counter()
        sums = np.zeros(4, dtype=np.float64)  # l1, l2, l3, total
        correct = 0
        perm = shuffle.permutation(len(train_ids))
        for chunk in _batched_ids(train_ids, perm, batch_size):
            labels = dataset.labels(chunk)
            sx = Tensor(_batch(dataset, chunk, student.name, tvl1))
            sfeats = forward(student, sx)
            tfeats = None
            if needs_teacher:
                with no_grad():
                    tx = Tensor(_batch(dataset, chunk, teacher.name, tvl1))
                    tfeats = forward(teacher, tx)
            breakdown, total = student_loss(sfeats, tfeats, bridge, adapter, weights, labels)
            _check_finite_loss(breakdown.total, "student", epoch)
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += np.array([breakdown.l1, breakdown.l2, breakdown.l3, breakdown.total]) * len(chunk)
            correct += int((np.argmax(sfeats.logits.data, axis=1) == labels).sum())
        n = len(train_ids)
        test_acc = evaluate_stream(student, dataset, "test", batch_size, tvl1).top1
        records.append(EpochRecord("student", epoch, sums[0] / n, sums[1] / n, sums[2] / n,
                                   sums[3] / n, correct / n, test_acc, time.perf_counter() - t0))
        save_checkpoint(ckpt, student.parameters() + adapter.parameters())
        write_metrics_csv(out / "metrics.csv", records)
    return TrainResult(records, ckpt, student, adapter)


def init_fusion_params(num_classes: int) -> tuple[Parameter, Parameter]:
    """Fusion starts as the exact average of the two streams' logits."""
    eye = np.eye(num_classes, dtype=np.float32)
    weight = Parameter("fusion.w", Tensor(np.hstack([eye, eye]) * np.float32(0.5), requires_grad=True))
    bias = Parameter("fusion.b", Tensor(np.zeros(num_classes, dtype=np.float32), requires_grad=True))
    return weight, bias


def train_fusion(dataset: ClipDataset, rgb_net: StreamNetwork, flow_net: StreamNetwork,
                 epochs: int, seed: int, *, out_dir,
                 optimizer: OptimizerConfig | None = None, batch_size: int = 6,
                 tvl1: TvL1Params | None = None) -> FusionResult:
    """Train the linear fusion layer over both frozen streams' logits."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tvl1 = tvl1 or TvL1Params()
    if rgb_net.spec.num_classes != flow_net.spec.num_classes:
        raise ValueError(f"class-count mismatch between streams: "
                         f"{rgb_net.spec.num_classes} vs {flow_net.spec.num_classes}")
    rgb_net.set_frozen(True)
    flow_net.set_frozen(True)
    weight, bias = init_fusion_params(rgb_net.spec.num_classes)
    opt = SgdOptimizer([weight, bias], optimizer or OptimizerConfig())
    shuffle = Stream(seed, "shuffle")
    ckpt = out / "checkpoint.x3dc"
    save_checkpoint(ckpt, [weight, bias])
    train_ids = dataset.ids("train")
    records: list[EpochRecord] = []
    write_metrics_csv(out / "metrics.csv", records)
    for epoch in range(epochs):
        t0 = time.perf_counter()
        loss_sum = 0.0
        correct = 0
        perm = shuffle.permutation(len(train_ids))
        for chunk in _batched_ids(train_ids, perm, batch_size):
            labels = dataset.labels(chunk)
            logits = _fused_logits_batch(rgb_net, flow_net, weight, bias, dataset, chunk, tvl1)
            loss, _ = T.softmax_cross_entropy(logits, labels)
            value = loss.item()
            _check_finite_loss(value, "fusion", epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += value * len(chunk)
            correct += int((np.argmax(logits.data, axis=1) == labels).sum())
        n = len(train_ids)
        test_acc = evaluate_fused(rgb_net, flow_net, weight, bias, dataset, "test",
                                  batch_size, tvl1).top1
        records.append(EpochRecord("fusion", epoch, 0.0, 0.0, loss_sum / n, loss_sum / n,
                                   correct / n, test_acc, time.perf_counter() - t0))
        save_checkpoint(ckpt, [weight, bias])
        write_metrics_csv(out / "metrics.csv", records)
    return FusionResult(records, ckpt, weight, bias)


@dataclass
class SweepRow:
    teacher_tap: TapPoint
    student_tap: TapPoint
    student_acc: float
    fused_acc: float
    final_total: float
    run_dir: Path
    failed: bool = False


@dataclass
class SweepResult:
    rows: list[SweepRow]
    best: BridgeConfig
    summary_path: Path


SWEEP_HEADER = "teacher_tap,student_tap,student_acc,fused_acc,final_total"


def write_sweep_csv(path, rows: Sequence[SweepRow]) -> None:
    lines = [SWEEP_HEADER]
    for r in rows:
        lines.append(f"{r.teacher_tap.value},{r.student_tap.value},"
                     f"{fmt6(r.student_acc)},{fmt6(r.fused_acc)},{fmt6(r.final_total)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def sweep_bridges(dataset: ClipDataset, teacher: StreamNetwork, teacher_checkpoint,
                  direction: DistillDirection, weights: LossWeights, epochs: int, seed: int, *,
                  out_dir, optimizer: OptimizerConfig | None = None, batch_size: int = 6,
                  tvl1: TvL1Params | None = None, fusion_epochs: int = 0,
                  parallel: int = 1) -> SweepResult:
    """Train one student per (teacher tap, student tap) pair over the three
    intermediate taps; all nine runs share the same frozen teacher and seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tvl1 = tvl1 or TvL1Params()
    teacher_hash = file_sha256(teacher_checkpoint)
    configs = [BridgeConfig(tt, st) for tt, st in product(INTERMEDIATE_TAPS, INTERMEDIATE_TAPS)]

    def run_one(bridge: BridgeConfig) -> SweepRow:
        run_dir = out / f"{bridge.teacher_tap.value}-{bridge.student_tap.value}"
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "teacher.sha256").write_text(teacher_hash + "\n", encoding="utf-8")
        try:
            result = train_student(dataset, teacher, direction, bridge, weights, epochs, seed,
                                   out_dir=run_dir, optimizer=optimizer,
                                   batch_size=batch_size, tvl1=tvl1)
        except DivergenceError:
            return SweepRow(bridge.teacher_tap, bridge.student_tap,
                            float("nan"), float("nan"), float("nan"), run_dir, failed=True)
        student_acc = (result.records[-1].test_acc if result.records
                       else evaluate_stream(result.net, dataset, "test", batch_size, tvl1).top1)
        final_total = result.records[-1].total if result.records else float("inf")
        rgb_net = result.net if result.net.name == "rgb" else teacher
        flow_net = result.net if result.net.name == "flow" else teacher
        fusion = train_fusion(dataset, rgb_net, flow_net, fusion_epochs, seed,
                              out_dir=run_dir / "fusion", optimizer=optimizer,
                              batch_size=batch_size, tvl1=tvl1)
        fused_acc = evaluate_fused(rgb_net, flow_net, fusion.weight, fusion.bias,
                                   dataset, "test", batch_size, tvl1).top1
        return SweepRow(bridge.teacher_tap, bridge.student_tap,
                        student_acc, fused_acc, final_total, run_dir)

    if parallel > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=parallel) as pool:
            rows = list(pool.map(run_one, configs))
    else:
        rows = [run_one(cfg) for cfg in configs]

    summary_path = out / "sweep.csv"
    write_sweep_csv(summary_path, rows)
    tap_order = {tap: i for i, tap in enumerate(INTERMEDIATE_TAPS)}
    candidates = [r for r in rows if not r.failed]
    if not candidates:
        raise DivergenceError("all sweep runs diverged")
    best_row = min(candidates, key=lambda r: (-r.student_acc, r.final_total,
                                              tap_order[r.teacher_tap], tap_order[r.student_tap]))
    return SweepResult(rows, BridgeConfig(best_row.teacher_tap, best_row.student_tap), summary_path)
