"""
Two-stage training of the correspondence network: shared-encoder pre-training on random synthetic
pairs, then fine-tuning with separate encoders against the fixed frontal template.
"""

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from dense_face_alignment.datagen import TrainingPair
from dense_face_alignment.errors import ConfigError, DataError, NumericalFault, TrainingDiverged
from dense_face_alignment.flownet import LossBreakdown, NetworkSpec, Weights, loss_and_gradient

logger = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune")
LOG_COLUMNS = ("step", "stage", "flow_term", "match_term", "total", "wall_ms")


def _reject_unknown(cls, values: Dict[str, Any], section: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"Unknown {section} configuration keys: {', '.join(unknown)}")


@dataclass
class StageSchedule:
    """Hyperparameters of one training stage."""

    steps: int = 200
    learning_rate: float = 1e-4
    lr_drop_at: Optional[int] = None
    batch_size: int = 12
    dataset: str = ""

    @classmethod
    def from_dict(cls, values: Dict[str, Any], section: str = "train stage") -> "StageSchedule":
        _reject_unknown(cls, values, section)
        stage = cls(**values)
        stage.validate()
        return stage

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.lr_drop_at is not None and self.lr_drop_at < 0:
            raise ConfigError("lr_drop_at must be a non-negative step index")

    def learning_rate_at(self, step: int) -> float:
        if self.lr_drop_at is not None and step >= self.lr_drop_at:
            return self.learning_rate / 10.0
        return self.learning_rate


@dataclass
class TrainSchedule:
    """Training configuration (config section ``train``)."""

    pretrain: StageSchedule = field(default_factory=StageSchedule)
    finetune: StageSchedule = field(default_factory=StageSchedule)
    stage: str = "both"
    lambda_match: float = 1.0
    normalize_loss: bool = True
    seed: int = 0
    log_every: int = 10
    init_weights: str = ""

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "TrainSchedule":
        _reject_unknown(cls, values, "train")
        values = dict(values)
        for name in STAGES:
            if isinstance(values.get(name), dict):
                values[name] = StageSchedule.from_dict(values[name], f"train.{name}")
        schedule = cls(**values)
        schedule.validate()
        return schedule

    def validate(self) -> None:
        if self.stage not in STAGES + ("both",):
            raise ConfigError(f"train stage must be pretrain, finetune or both, got {self.stage}")
        if self.lambda_match < 0:
            raise ConfigError("lambda_match must be non-negative")
        if self.log_every < 1:
            raise ConfigError("log_every must be at least 1")
        self.pretrain.validate()
        self.finetune.validate()

    @property
    def stages(self) -> List[str]:
        return list(STAGES) if self.stage == "both" else [self.stage]

    def for_stage(self, name: str) -> StageSchedule:
        return getattr(self, name)


class AdamOptimizer:
    """Adam with bias correction; updates a parameter vector in place."""

    def __init__(self, size: int, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, learning_rate: float) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        params -= learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)


class TrainingLog:
    """Per-step loss rows, written as CSV."""

    def __init__(self):
        self.rows: List[Dict[str, Any]] = []

    def append(self, step: int, stage: str, breakdown: LossBreakdown, wall_ms: float) -> None:
        self.rows.append({
            "step": step,
            "stage": stage,
            "flow_term": breakdown.flow_term,
            "match_term": breakdown.match_term,
            "total": breakdown.total,
            "wall_ms": wall_ms,
        })

    def totals(self, stage: Optional[str] = None) -> List[float]:
        return [row["total"] for row in self.rows if stage is None or row["stage"] == stage]

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=list(LOG_COLUMNS))
            writer.writeheader()
            for row in self.rows:
                formatted = dict(row)
                for key in ("flow_term", "match_term", "total"):
                    formatted[key] = f"{row[key]:.10g}"
                formatted["wall_ms"] = f"{row['wall_ms']:.1f}"
                writer.writerow(formatted)


def _batch_gradient(weights: Weights, batch: Sequence[TrainingPair], schedule: TrainSchedule,
                    executor: Optional[ThreadPoolExecutor]) -> Tuple[LossBreakdown, np.ndarray]:
    def evaluate(pair: TrainingPair):
        return loss_and_gradient(weights, pair.source, pair.target, pair.gt_flow, pair.gt_mask,
                                 schedule.lambda_match, schedule.normalize_loss)

    results = list(executor.map(evaluate, batch)) if executor is not None else [evaluate(p) for p in batch]
    # reduce in batch order so the sum does not depend on the thread count
    grad = np.zeros_like(weights.vector)
    flow_term = match_term = total = 0.0
    for breakdown, g in results:
        grad += g
        flow_term += breakdown.flow_term
        match_term += breakdown.match_term
        total += breakdown.total
    n = len(batch)
    return LossBreakdown(flow_term / n, match_term / n, schedule.lambda_match, total / n), grad / n


def train_stage(weights: Weights, dataset: Sequence[TrainingPair], stage: str, schedule: TrainSchedule,
                log: TrainingLog, threads: int = 1) -> Weights:
    """
    Run one stage of Adam updates on ``weights`` in place and return them.

    Raises:
        DataError: If the dataset is empty
        TrainingDiverged: If the loss or gradient stops being finite; carries the last weights
            whose loss was finite
    """
    if len(dataset) == 0:
        raise DataError(f"No training pairs for stage {stage}")
    stage_schedule = schedule.for_stage(stage)
    rng = np.random.default_rng([schedule.seed, STAGES.index(stage)])
    optimizer = AdamOptimizer(weights.vector.size)
    checkpoint = weights.copy()
    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    logger.info(f"Stage {stage}: {stage_schedule.steps} steps, batch {stage_schedule.batch_size}, "
                f"lr {stage_schedule.learning_rate:g}, {len(dataset)} pairs")
    try:
        for step in range(stage_schedule.steps):
            start = time.perf_counter()
            indices = rng.integers(0, len(dataset), size=stage_schedule.batch_size)
            batch = [dataset[int(i)] for i in indices]
            try:
                breakdown, grad = _batch_gradient(weights, batch, schedule, executor)
            except NumericalFault as e:
                raise TrainingDiverged(f"Training diverged in {stage} at step {step}: {str(e)}",
                                       checkpoint=checkpoint, step=step) from e
            if not np.isfinite(breakdown.total) or not np.all(np.isfinite(grad)):
                raise TrainingDiverged(f"Training diverged in {stage} at step {step}: loss {breakdown.total}",
                                       checkpoint=checkpoint, step=step)
            checkpoint = weights.copy()
            optimizer.step(weights.vector, grad, stage_schedule.learning_rate_at(step))
            wall_ms = 1000.0 * (time.perf_counter() - start)
            log.append(step, stage, breakdown, wall_ms)
            if step % schedule.log_every == 0 or step == stage_schedule.steps - 1:
                logger.info(f"[{stage}] step {step}: total {breakdown.total:.5g} "
                            f"(flow {breakdown.flow_term:.5g}, match {breakdown.match_term:.5g})")
    finally:
        if executor is not None:
            executor.shutdown()
    return weights


def train(spec: NetworkSpec, datasets: Dict[str, Sequence[TrainingPair]], schedule: TrainSchedule,
          weights: Optional[Weights] = None, threads: int = 1) -> Tuple[Weights, TrainingLog]:
    """
    Run the configured stages in order.

    Pre-training uses one encoder for both inputs; fine-tuning starts from a copy of that encoder
    in each branch.

    Args:
        spec: Network architecture
        datasets: stage name -> training pairs
        schedule: Training configuration
        weights: Starting weights, e.g. a pre-training checkpoint; freshly initialized if None
        threads: Worker threads for per-pair gradients

    Returns:
        Final weights and the training log
    """
    log = TrainingLog()
    if weights is None:
        weights = Weights.initialize(spec.with_shared(True), schedule.seed)
    for stage in schedule.stages:
        if stage not in datasets:
            raise DataError(f"No dataset given for stage {stage}")
        if stage == "pretrain":
            if not weights.spec.share_encoders:
                raise ConfigError("pre-training needs shared encoder weights")
        else:
            weights = weights.unshared()
        weights = train_stage(weights, datasets[stage], stage, schedule, log, threads)
    return weights, log
