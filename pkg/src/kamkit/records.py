"""Shared training/evaluation record types."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class TrainHyper:
    """SGD settings for one training phase."""

    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 10
    batch_size: int = 32


@dataclass(frozen=True)
class LogRecord:
    epoch: int
    split: str                      # "train" | "val" | "test"
    loss: float
    accuracy_whole: float | None = None
    accuracy_parts: tuple = ()


@dataclass
class TrainLog:
    """Per-epoch records, strictly increasing in epoch within each split."""

    records: list = field(default_factory=list)

    def add(self, epoch, split, loss, accuracy_whole=None, accuracy_parts=()):
        self.records.append(LogRecord(epoch, split, float(loss),
                                      None if accuracy_whole is None else float(accuracy_whole),
                                      tuple(float(a) for a in accuracy_parts)))

    def rows(self, split=None):
        if split is None:
            return list(self.records)
        return [r for r in self.records if r.split == split]


@dataclass(frozen=True)
class EvalReport:
    """Whole-task and per-part accuracies plus model size."""

    accuracy_whole: float
    accuracy_per_part: tuple
    param_count: int
