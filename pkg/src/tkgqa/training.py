"""Training loop: batching, schedule, early stopping, checkpoint selection.

Epoch 0 is an evaluation-only pass over the untouched initial model; its
line in the epoch log is the reference point for determinism checks and
for comparing ablation arms at initialization.  Training epochs are
numbered from 1 and shuffle the training questions with a seeded
generator, so a fixed configuration and seed reproduce every loss bit
for bit.

The early-stopping criterion is validation hits@1, ties broken by lower
validation loss; the returned parameters are a copy taken at the best
epoch, never a later or worse state.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import TrainingConfig
from .encoders import build_store
from .errors import TrainingDiverged
from .evaluation import gold_records, hits_at_k, mean_loss, predictions_from_model
from .kg import BackgroundKG, QuestionInstance
from .model import PreparedQuestion, TimeWeightedRGCN, build_model_for_dataset, prepare_questions
from .optim import make_optimizer, zero_grads

logger = logging.getLogger("tkgqa.training")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    valid_hits1: float
    learning_rate: float

    def log_line(self) -> str:
        return f"{self.epoch}\t{self.train_loss:.10g}\t{self.valid_hits1:.10g}\t{self.learning_rate:.10g}"


@dataclass
class TrainResult:
    model: TimeWeightedRGCN
    history: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_hits1: float = 0.0
    best_valid_loss: float = float("inf")
    stopped_early: bool = False
    skipped_questions: int = 0
    wall_seconds: float = 0.0

    @property
    def epoch0_loss(self) -> float:
        return self.history[0].train_loss

    def epoch_log_text(self) -> str:
        header = "# epoch\ttrain_loss\tvalid_hits1\tlearning_rate\n"
        return header + "".join(stats.log_line() + "\n" for stats in self.history)


def _snapshot(model: TimeWeightedRGCN) -> dict[str, np.ndarray]:
    return {name: tensor.data.copy() for name, tensor in model.parameters().items()}


def _restore(model: TimeWeightedRGCN, snapshot: dict[str, np.ndarray]) -> None:
    for name, tensor in model.parameters().items():
        tensor.data = snapshot[name].copy()


def _valid_metrics(
    model: TimeWeightedRGCN,
    valid: list[PreparedQuestion],
    gold,
    batch_size: int,
) -> tuple[float, float]:
    predictions = []
    for lo in range(0, len(valid), batch_size):
        predictions.extend(predictions_from_model(model, valid[lo : lo + batch_size], k=3))
    hits1, _ = hits_at_k(predictions, gold, k=1)
    return hits1, mean_loss(model, valid, batch_size=batch_size)


def train(
    cfg: TrainingConfig,
    kg: BackgroundKG,
    splits: dict[str, list[QuestionInstance]],
    store=None,
) -> TrainResult:
    """Train a freshly built model on the given splits.

    ``store`` defaults to whatever the config's embedding init produces.
    Raises :class:`TrainingDiverged` on a non-finite loss after restoring
    the best parameters seen so far, so the attached checkpoint stays
    usable.
    """
    started = time.monotonic()
    master = np.random.default_rng(cfg.seed)
    store_seed, model_seed, shuffle_seed = (int(s) for s in master.integers(0, 2**31 - 1, size=3))

    if store is None:
        store = build_store(kg, cfg, store_seed)
    model = build_model_for_dataset(kg, splits["train"], store, cfg, model_seed)
    train_qs = prepare_questions(splits["train"], kg, model.token_vocab)
    valid_qs = prepare_questions(splits["valid"], kg, model.token_vocab)
    valid_gold = gold_records(splits["valid"], kg.entities)

    trainable = model.parameters(trainable_only=True)
    optimizer_step = make_optimizer(cfg.optimizer, trainable)
    shuffler = np.random.default_rng(shuffle_seed)

    result = TrainResult(model=model)

    def record_epoch(epoch: int, train_loss: float, lr: float) -> EpochStats:
        hits1, valid_loss = _valid_metrics(model, valid_qs, valid_gold, cfg.batch_size_valid)
        stats = EpochStats(epoch=epoch, train_loss=train_loss, valid_hits1=hits1, learning_rate=lr)
        result.history.append(stats)
        logger.info("epoch %s", stats.log_line())
        improved = hits1 > result.best_valid_hits1 or (
            hits1 == result.best_valid_hits1 and valid_loss < result.best_valid_loss
        )
        if epoch == 0 or improved:
            result.best_epoch = epoch
            result.best_valid_hits1 = hits1
            result.best_valid_loss = valid_loss
            record_epoch.best_params = _snapshot(model)
        return stats

    record_epoch(0, mean_loss(model, train_qs, cfg.batch_size_train), cfg.learning_rate_for_epoch(1))

    for epoch in range(1, cfg.max_epochs + 1):
        lr = cfg.learning_rate_for_epoch(epoch)
        order = shuffler.permutation(len(train_qs))
        epoch_loss_sum = 0.0
        epoch_loss_count = 0
        for lo in range(0, len(order), cfg.batch_size_train):
            raw_batch = [train_qs[i] for i in order[lo : lo + cfg.batch_size_train]]
            batch = [pq for pq in raw_batch if pq.target_indices.size > 0]
            result.skipped_questions += len(raw_batch) - len(batch)
            if not batch:
                logger.warning("skipping a batch with no reachable gold answers")
                continue
            zero_grads(trainable)
            batch_loss = 0.0
            for pq in batch:
                with ad.Tape() as tape:
                    loss = model.loss(pq)
                if not np.isfinite(loss.data):
                    _restore(model, record_epoch.best_params)
                    raise TrainingDiverged(
                        f"non-finite training loss at epoch {epoch} (question {pq.qid}); "
                        "restored the best checkpoint so far"
                    )
                tape.backward(loss, seed=1.0 / len(batch))
                batch_loss += loss.item()
            optimizer_step(lr)
            epoch_loss_sum += batch_loss / len(batch)
            epoch_loss_count += 1

        record_epoch(epoch, epoch_loss_sum / max(epoch_loss_count, 1), lr)
        if epoch - result.best_epoch >= cfg.patience:
            result.stopped_early = True
            logger.info("early stop at epoch %d (best epoch %d)", epoch, result.best_epoch)
            break

    _restore(model, record_epoch.best_params)
    result.wall_seconds = time.monotonic() - started
    return result


# ---------------------------------------------------------------------------
# Gating ablation


@dataclass
class AblationReport:
    """Paired comparison of the gated model against fixed 0.5 mixing."""

    with_gating: dict
    without_gating: dict
    epoch0_loss_with: float
    epoch0_loss_without: float
    delta_overall_hits1: float

    def to_dict(self) -> dict:
        return {
            "with_gating": self.with_gating,
            "without_gating": self.without_gating,
            "epoch0_loss_with": self.epoch0_loss_with,
            "epoch0_loss_without": self.epoch0_loss_without,
            "epoch0_loss_bit_identical": self.epoch0_loss_with == self.epoch0_loss_without,
            "delta_overall_hits1": self.delta_overall_hits1,
        }

    def format_table(self) -> str:
        rows = [("metric", "with gating", "w/o gating")]
        keys = sorted(set(self.with_gating) | set(self.without_gating))
        for key in keys:
            rows.append((key, f"{self.with_gating.get(key):.4f}", f"{self.without_gating.get(key):.4f}"))
        rows.append(("epoch0 loss", f"{self.epoch0_loss_with:.10g}", f"{self.epoch0_loss_without:.10g}"))
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) for row in rows]
        lines.append(f"delta overall hits@1 (with - without): {self.delta_overall_hits1:+.4f}")
        return "\n".join(lines) + "\n"


def _arm_metrics(result: TrainResult, kg, splits) -> dict:
    test_qs = prepare_questions(splits["test"], kg, result.model.token_vocab)
    gold = gold_records(splits["test"], kg.entities)
    predictions = predictions_from_model(result.model, test_qs, k=3)
    overall, per_category = hits_at_k(predictions, gold, k=1)
    metrics = {"overall_hits1": overall}
    for category, value in per_category.items():
        if value is not None:
            metrics[f"{category}_hits1"] = value
    return metrics


def run_ablation(
    cfg: TrainingConfig,
    kg: BackgroundKG,
    splits: dict[str, list[QuestionInstance]],
) -> tuple[AblationReport, TrainResult, TrainResult]:
    """Train gating-on and gating-off arms under one seed and compare.

    The gate vector starts at zero, so both arms mix evidence identically
    before the first update and their epoch-0 losses must agree bit for
    bit; any divergence afterwards is attributable to the gate.
    """
    cfg_on = dataclasses.replace(cfg, gating_enabled=True).validate()
    cfg_off = dataclasses.replace(cfg, gating_enabled=False).validate()
    result_on = train(cfg_on, kg, splits)
    result_off = train(cfg_off, kg, splits)
    metrics_on = _arm_metrics(result_on, kg, splits)
    metrics_off = _arm_metrics(result_off, kg, splits)
    report = AblationReport(
        with_gating=metrics_on,
        without_gating=metrics_off,
        epoch0_loss_with=result_on.epoch0_loss,
        epoch0_loss_without=result_off.epoch0_loss,
        delta_overall_hits1=metrics_on["overall_hits1"] - metrics_off["overall_hits1"],
    )
    return report, result_on, result_off
