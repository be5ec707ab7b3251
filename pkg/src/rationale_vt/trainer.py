"""Fine-tuning loop: seeded shuffling, length-bucketed batches, warmup/decay.

The loop is deliberately single-process and fully deterministic under a seed:
two runs with the same inputs produce bit-identical checkpoints. A NaN loss
aborts immediately and leaves a diagnostic snapshot (weights plus the exact
batch) in the output directory.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from rationale_vt.feature_store import FeatureStore, LengthLimits, RationaleInstance
from rationale_vt.fusion import VARIANTS, build_sequence
from rationale_vt.model import TransformerLM, collate, save_checkpoint
from rationale_vt.text_codec import Vocabulary
from rationale_vt.validation import ValidationError


class TrainingError(ValidationError):
    pass


@dataclass
class TrainConfig:
    """Defaults follow the reference fine-tuning recipe."""

    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 5e-5
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    eval_every: int = 0
    output_dir: str = "train_out"

    def __post_init__(self):
        if self.epochs < 0:
            raise TrainingError("epochs must be >= 0")
        if self.batch_size <= 0 or self.learning_rate <= 0:
            raise TrainingError("batch_size and learning_rate must be positive")
        if not (0.0 <= self.warmup_fraction < 1.0):
            raise TrainingError("warmup_fraction must be in [0, 1)")
        if self.weight_decay < 0 or self.grad_clip <= 0 or self.eval_every < 0:
            raise TrainingError("weight_decay >= 0, grad_clip > 0, eval_every >= 0 required")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, payload: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise TrainingError(f"unknown train config keys: {unknown}")
        return cls(**payload)


@dataclass
class TrainResult:
    final_checkpoint: Path
    best_checkpoint: Path
    loss_curve: list[float]
    steps: int
    epoch_means: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> Optional[float]:
        return self.loss_curve[-1] if self.loss_curve else None


def linear_warmup_decay(warmup_steps: int, total_steps: int):
    """Learning-rate multiplier: 0→1 over warmup, then 1→0 over the rest."""

    def factor(step: int) -> float:
        if total_steps <= 0:
            return 1.0
        if step < warmup_steps:
            return (step + 1) / max(1, warmup_steps)
        remaining = max(1, total_steps - warmup_steps)
        return max(0.0, (total_steps - step) / remaining)

    return factor


def _bucketed_batches(lengths: list[int], batch_size: int,
                      rng: np.random.Generator) -> list[list[int]]:
    """Shuffle, then stable-sort by length so each batch pads minimally."""
    order = rng.permutation(len(lengths))
    order = sorted(order, key=lambda i: lengths[i])
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    batch_order = rng.permutation(len(batches))
    return [list(batches[i]) for i in batch_order]


def train(
    model: TransformerLM,
    instances: list[RationaleInstance],
    features: Optional[FeatureStore],
    fusion_mode: str,
    source: Optional[str],
    config: TrainConfig,
    vocab: Vocabulary,
    limits: LengthLimits,
) -> TrainResult:
    """Optimize the model on fused sequences; returns checkpoints and the loss curve.

    The text-only baseline never touches the feature store, so a store handed
    in for uniformity keeps a zero read count.
    """
    if (fusion_mode, source) not in VARIANTS:
        raise TrainingError(
            f"unknown variant {(fusion_mode, source)!r}; expected one of {list(VARIANTS)}"
        )
    instances = list(instances)
    if not instances:
        raise TrainingError("training stream is empty")
    if fusion_mode != "baseline" and features is None:
        raise TrainingError(f"fusion mode {fusion_mode!r} needs a feature store")

    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    sequences = []
    for instance in instances:
        feats = None
        if fusion_mode != "baseline":
            feats = features.load_features(instance.image_id)
        sequences.append(
            build_sequence(instance, vocab, limits, fusion_mode, source, features=feats)
        )
    lengths = [len(s) for s in sequences]

    steps_per_epoch = math.ceil(len(sequences) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                                  weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer,
        linear_warmup_decay(int(config.warmup_fraction * total_steps), total_steps),
    )

    loss_curve: list[float] = []
    epoch_means: list[float] = []
    best_mean = math.inf
    best_dir = out_dir / "checkpoint_best"
    final_dir = out_dir / "checkpoint_final"
    vocab_hash = vocab.fingerprint()
    step = 0

    model.train()
    for epoch in range(config.epochs):
        epoch_losses = []
        for batch_members in _bucketed_batches(lengths, config.batch_size, rng):
            batch = collate([sequences[i] for i in batch_members], pad_id=vocab.pad_id,
                            dtype=model.token_emb.weight.dtype)
            loss = model.loss_batch(batch)
            if not torch.isfinite(loss):
                snapshot = _nan_snapshot(out_dir, model, step, epoch, batch_members,
                                         instances, loss_curve, vocab_hash)
                raise TrainingError(
                    f"non-finite loss at step {step}; diagnostic snapshot at {snapshot}"
                )
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            scheduler.step()
            loss_curve.append(float(loss.item()))
            epoch_losses.append(loss_curve[-1])
            step += 1
            if config.eval_every and step % config.eval_every == 0:
                _write_curve(out_dir, loss_curve, epoch_means, done=False)
        mean = float(np.mean(epoch_losses))
        epoch_means.append(mean)
        if mean < best_mean:
            best_mean = mean
            save_checkpoint(best_dir, model, step=step, vocab_hash=vocab_hash,
                            extra={"epoch": epoch, "epoch_mean_loss": mean})

    model.eval()
    save_checkpoint(final_dir, model, step=step, vocab_hash=vocab_hash,
                    extra={"train_config": config.to_json()})
    if not best_dir.exists():
        # epochs=0: the untouched weights are both final and best
        save_checkpoint(best_dir, model, step=step, vocab_hash=vocab_hash)
    _write_curve(out_dir, loss_curve, epoch_means, done=True)
    return TrainResult(
        final_checkpoint=final_dir,
        best_checkpoint=best_dir,
        loss_curve=loss_curve,
        steps=step,
        epoch_means=epoch_means,
    )


def _write_curve(out_dir: Path, losses: list[float], epoch_means: list[float],
                 done: bool) -> None:
    payload = {"losses": losses, "epoch_means": epoch_means, "complete": done}
    (out_dir / "loss_curve.json").write_text(json.dumps(payload))


def _nan_snapshot(out_dir: Path, model: TransformerLM, step: int, epoch: int,
                  batch_members: list[int], instances: list[RationaleInstance],
                  loss_curve: list[float], vocab_hash: str) -> Path:
    snap = out_dir / "nan_diagnostic"
    save_checkpoint(snap, model, step=step, vocab_hash=vocab_hash)
    report = {
        "step": step,
        "epoch": epoch,
        "batch_instance_ids": [instances[i].instance_id for i in batch_members],
        "recent_losses": loss_curve[-20:],
    }
    (snap / "snapshot.json").write_text(json.dumps(report, indent=1))
    return snap


def smoothed(losses: list[float], window: int = 10) -> list[float]:
    """Moving average used to judge curve shape."""
    if window <= 0:
        raise TrainingError("window must be positive")
    if len(losses) < window:
        return [float(np.mean(losses))] if losses else []
    return [float(np.mean(losses[i : i + window])) for i in range(len(losses) - window + 1)]
