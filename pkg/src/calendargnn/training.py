"""Training loop: minibatch Adam, early stopping on validation loss,
best-epoch restoration, multi-seed averaging, and evaluation.

Runs stop at ``max_epochs`` or as soon as the validation loss has been
non-decreasing for ``patience`` consecutive epochs; the parameters from
the best validation epoch are restored before the single test evaluation.
Everything is deterministic given (config, seed).
"""

from __future__ import annotations

import json
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import TrainConfig
from .data import Dataset, DatasetSplit, split_dataset, task_label
from .metrics import (
    MetricReport,
    binary_metrics,
    mean_reports,
    multiclass_metrics,
    regression_metrics,
)
from .model import CalendarModel
from .seeding import substream


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


class EarlyStopper:
    """Stop once the validation loss is non-decreasing for ``patience``
    consecutive epochs (loss[e] >= loss[e-1], counted consecutively)."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be at least 1")
        self.patience = patience
        self.prev: float | None = None
        self.streak = 0

    def update(self, loss: float) -> bool:
        if self.prev is not None and loss >= self.prev:
            self.streak += 1
        else:
            self.streak = 0
        self.prev = loss
        return self.streak >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_metrics: dict[str, float | None]


@dataclass
class RunHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    test: MetricReport | None = None

    def to_jsonl(self) -> str:
        lines = [
            json.dumps({"epoch": e.epoch, "train_loss": e.train_loss,
                        "val_loss": e.val_loss, "val_metrics": e.val_metrics},
                       sort_keys=True)
            for e in self.epochs
        ]
        summary = {"best_epoch": self.best_epoch, "stopped_epoch": self.stopped_epoch}
        if self.test is not None:
            summary["test"] = {"kind": self.test.kind, "values": self.test.values}
        lines.append(json.dumps(summary, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "RunHistory":
        hist = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            if "epoch" in obj:
                hist.epochs.append(EpochRecord(obj["epoch"], obj["train_loss"],
                                               obj["val_loss"], obj["val_metrics"]))
            else:
                hist.best_epoch = obj["best_epoch"]
                hist.stopped_epoch = obj["stopped_epoch"]
                if "test" in obj:
                    hist.test = MetricReport(obj["test"]["kind"], obj["test"]["values"])
        return hist


def metric_report(task: str, probs_or_preds: np.ndarray, labels) -> MetricReport:
    if task == "gender":
        return binary_metrics(probs_or_preds[:, 1], [int(a) for a in labels])
    if task == "income":
        return multiclass_metrics(probs_or_preds.argmax(axis=1),
                                  [int(a) for a in labels], 10)
    return regression_metrics(probs_or_preds, [float(a) for a in labels])


def _batches(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def evaluate_users(model: CalendarModel, compiled, batch_size: int) -> MetricReport:
    """Forward-only metric report over a list of compiled users."""
    outs = []
    labels = []
    for chunk in _batches(compiled, batch_size):
        outs.append(model.predict(chunk))
        labels.extend(model.labels_for(chunk))
    preds = np.concatenate(outs, axis=0)
    return metric_report(model.config.task, preds, labels)


def _mean_loss(model: CalendarModel, compiled, batch_size: int) -> float:
    total = 0.0
    for chunk in _batches(compiled, batch_size):
        loss = model.loss(chunk, model.labels_for(chunk))
        total += float(loss.value) * len(chunk)
    return total / len(compiled)


def train(config: TrainConfig, dataset: Dataset, out_dir: str | None = None,
          split: DatasetSplit | None = None) -> tuple[RunHistory, CalendarModel]:
    """Run the full protocol; optionally persist checkpoint + history."""
    if split is None:
        split = split_dataset(dataset, config.split_seed, config.task)
    model = CalendarModel.build(config, dataset)
    train_users = model.compile(dataset, split.train)
    val_users = model.compile(dataset, split.validation)
    test_users = model.compile(dataset, split.test)
    if not train_users or not val_users or not test_users:
        raise ValueError("empty split; not enough labeled users")

    order_rng = substream(config.seed, "order")
    adam = ad.AdamState(model.params)
    stopper = EarlyStopper(config.patience)
    history = RunHistory()
    best_loss = float("inf")
    best_snapshot = model.snapshot()
    history.best_epoch = 0

    for epoch in range(1, config.max_epochs + 1):
        order = order_rng.permutation(len(train_users))
        epoch_loss = 0.0
        for batch_idx in _batches(list(order), config.batch_size):
            batch = [train_users[i] for i in batch_idx]
            loss = model.loss(batch, model.labels_for(batch))
            if not np.isfinite(loss.value):
                raise TrainingDiverged(epoch)
            tape = ad.backward(loss)
            grads = {name: tape.grad(t) for name, t in model.params.items()}
            ad.adam_step(model.params, grads, adam, config.lr)
            epoch_loss += float(loss.value) * len(batch)
        epoch_loss /= len(train_users)

        val_loss = _mean_loss(model, val_users, config.batch_size)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(epoch)
        val_report = evaluate_users(model, val_users, config.batch_size)
        history.epochs.append(EpochRecord(epoch, epoch_loss, val_loss, dict(val_report.values)))

        if val_loss < best_loss:
            best_loss = val_loss
            best_snapshot = model.snapshot()
            history.best_epoch = epoch
        history.stopped_epoch = epoch
        if stopper.update(val_loss):
            break

    model.restore(best_snapshot)
    history.test = evaluate_users(model, test_users, config.batch_size)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        model.save(out_dir)
        with open(os.path.join(out_dir, "history.jsonl"), "w", encoding="utf-8") as fh:
            fh.write(history.to_jsonl())
    return history, model


def evaluate(checkpoint_path: str, dataset: Dataset, split_name: str,
             config: TrainConfig | None = None) -> MetricReport:
    """Forward-only evaluation of a saved checkpoint on one split."""
    model = CalendarModel.load(checkpoint_path, expect_config=config)
    cfg = model.config
    split = split_dataset(dataset, cfg.split_seed, cfg.task)
    users = {"train": split.train, "validation": split.validation,
             "test": split.test}[split_name]
    compiled = model.compile(dataset, users)
    return evaluate_users(model, compiled, cfg.batch_size)


def _seed_worker(args):
    config, dataset, seed = args
    history, _ = train(config.with_overrides(seed=seed), dataset)
    return seed, history


def run_seeds(config: TrainConfig, dataset: Dataset, n: int | None = None,
              workers: int = 1):
    """Independent runs with seeds seed..seed+n-1; returns the arithmetic
    mean report and the per-seed histories."""
    if n is None:
        n = config.seeds
    if n < 1:
        raise ValueError("need at least one seed")
    seeds = [config.seed + i for i in range(n)]
    jobs = [(config, dataset, s) for s in seeds]
    if workers > 1 and n > 1:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=min(workers, n), mp_context=ctx) as pool:
            results = list(pool.map(_seed_worker, jobs))
    else:
        results = [_seed_worker(job) for job in jobs]
    results.sort(key=lambda pair: pair[0])
    mean = mean_reports([hist.test for _, hist in results])
    return mean, results
