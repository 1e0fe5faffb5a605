"""Mini-batch training loop shared by forward and backward models."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, List, Tuple

import numpy as np

from .nn import Adam, Network, PlateauScheduler


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None, phase: str = ""):
        self.epoch = epoch
        self.phase = phase
        prefix = f"[{phase}] " if phase else ""
        where = f" at epoch {epoch}" if epoch is not None else ""
        super().__init__(f"{prefix}{message}{where}")


@dataclass
class TrainSettings:
    epochs: int = 500
    batch_size: int = 1024
    lr: float = 1e-3
    patience: int = 10
    min_lr: float = 1e-6
    threshold: float = 1e-6

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainRecord:
    best_epoch: int = -1
    best_val: float = float("inf")
    final_train: float = float("nan")
    curve: List[Tuple[int, float, float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"best_epoch": self.best_epoch, "best_val": self.best_val,
                "final_train": self.final_train, "epochs": len(self.curve)}

    def curve_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,lr"]
        for e, tr, va, lr in self.curve:
            lines.append(f"{e},{tr!r},{va!r},{lr!r}")
        return "\n".join(lines) + "\n"


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Shuffled index blocks; a trailing block of one row is folded into its neighbour
    because batch norm cannot normalise a single sample."""
    perm = rng.permutation(n)
    blocks = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(blocks) > 1 and len(blocks[-1]) < 2:
        tail = blocks.pop()
        blocks[-1] = np.concatenate([blocks[-1], tail])
    return blocks


def fit(net: Network, step: Callable[[np.ndarray], Tuple[float, list]], n_train: int,
        validate: Callable[[], float], settings: TrainSettings, rng: np.random.Generator,
        phase: str = "") -> TrainRecord:
    """Train ``net`` in place and leave it holding its best-validation snapshot.

    ``step(idx)`` returns (batch loss, parameter gradients) with ``net`` in
    training mode; ``validate()`` is called with ``net`` in inference mode.
    """
    params = net.parameters()
    adam = Adam(params, lr=settings.lr)
    sched = PlateauScheduler(settings.lr, settings.patience, settings.min_lr, settings.threshold)
    record = TrainRecord()
    best = None
    for epoch in range(settings.epochs):
        net.train()
        total, count = 0.0, 0
        for idx in minibatches(n_train, settings.batch_size, rng):
            try:
                loss, grads = step(idx)
            except FloatingPointError as exc:
                raise TrainingError(f"diverged ({exc})", epoch, phase) from exc
            if not np.isfinite(loss):
                raise TrainingError("diverged (non-finite loss)", epoch, phase)
            adam.step(params, grads)
            total += loss * len(idx)
            count += len(idx)
        net.eval()
        try:
            val = float(validate())
        except FloatingPointError as exc:
            raise TrainingError(f"diverged ({exc})", epoch, phase) from exc
        if not np.isfinite(val):
            raise TrainingError("diverged (non-finite validation loss)", epoch, phase)
        train_loss = total / max(count, 1)
        record.curve.append((epoch, train_loss, val, adam.lr))
        record.final_train = train_loss
        if val < record.best_val:
            record.best_val = val
            record.best_epoch = epoch
            best = net.copy()
        adam.lr = sched.step(val)
    if best is not None:
        net.load_state(best)
    net.eval()
    return record
