"""Minibatch AdamW training with per-epoch metrics and a final checkpoint."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ..errors import NumericError
from ..model import KgCmiModel
from .checkpoint import save_checkpoint
from .config import RunConfig
from .optim import AdamW
from .tasks import Batch, SyntheticTask, VqaSample, gen_synthetic_task

log = logging.getLogger(__name__)


@dataclass
class MetricsRow:
    epoch: int
    split: str
    L: float
    L_cls: float
    L_vtc: float
    L_aux: float
    accuracy_open: float
    accuracy_closed: float
    accuracy_overall: float
    wall_seconds: float


METRIC_COLUMNS = [f.name for f in fields(MetricsRow)]


@dataclass
class TrainResult:
    model: KgCmiModel
    task: SyntheticTask
    rows: list[MetricsRow]
    steps: int
    metrics_path: Path | None = None
    checkpoint_path: Path | None = None

    def final(self, split: str = "test") -> MetricsRow:
        return [r for r in self.rows if r.split == split][-1]


def _batches(samples: list[VqaSample], size: int, order=None):
    order = range(len(samples)) if order is None else order
    order = list(order)
    for start in range(0, len(order), size):
        yield Batch.from_samples([samples[i] for i in order[start:start + size]])


def evaluate(model: KgCmiModel, samples: list[VqaSample], epoch: int, split: str, wall: float = 0.0) -> MetricsRow:
    """Losses (sample-weighted over eval batches) and open/closed/overall accuracy."""
    sums = dict(L=0.0, L_cls=0.0, L_vtc=0.0, L_aux=0.0)
    correct = {True: 0, False: 0}
    count = {True: 0, False: 0}
    for batch in _batches(samples, model.config.batch_size):
        losses, cache = model.forward(batch)
        for k in sums:
            sums[k] += losses[k] * len(batch)
        pred = np.argmax(cache["logits"], axis=1)
        hit = pred == batch.answer_index
        for is_open in (True, False):
            sel = batch.is_open == is_open
            correct[is_open] += int(hit[sel].sum())
            count[is_open] += int(sel.sum())
    n = len(samples)

    def acc(c, k):
        return c / k if k else float("nan")

    return MetricsRow(
        epoch=epoch, split=split,
        **{k: v / n for k, v in sums.items()},
        accuracy_open=acc(correct[True], count[True]),
        accuracy_closed=acc(correct[False], count[False]),
        accuracy_overall=acc(correct[True] + correct[False], n),
        wall_seconds=wall,
    )


def write_metrics(target, rows: list[MetricsRow], exclusive: bool = True) -> None:
    """Write the metrics CSV to a path (created exclusively by default) or an open text stream."""
    if hasattr(target, "write"):
        _write_rows(target, rows)
        return
    with open(target, "x" if exclusive else "w", newline="") as fh:
        _write_rows(fh, rows)


def _write_rows(fh, rows):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(v) for v in asdict(row).values()])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def train(config: RunConfig, out_dir=None, task: SyntheticTask | None = None, write: bool = True) -> TrainResult:
    """Train on ``config.task``; write ``metrics.csv`` and ``checkpoint.{npz,json}``.

    Output files are created exclusively: an existing metrics file or
    checkpoint in ``out_dir`` is an error.
    """
    task = task or gen_synthetic_task(config)
    model = KgCmiModel(config, task.graph, task.tokenizer)
    opt = AdamW(model.params, config.lr, (config.adam_beta1, config.adam_beta2), config.adam_eps, config.weight_decay)
    rng = np.random.default_rng([config.seed, 0x5F1E])
    start = time.perf_counter()

    def wall():
        return time.perf_counter() - start if config.record_wall_time else 0.0

    rows = [evaluate(model, task.train, 0, "train", wall()), evaluate(model, task.test, 0, "test", wall())]
    step = 0
    done = config.max_steps == 0
    for epoch in range(1, int(config.epochs) + 1):
        if done:
            break
        for batch in _batches(task.train, config.batch_size, rng.permutation(len(task.train))):
            model.params.zero_grads()
            losses = model.loss_and_grad(batch)
            if not all(math.isfinite(v) for v in losses.values()):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}: {losses}")
            opt.step()
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break
        rows.append(evaluate(model, task.train, epoch, "train", wall()))
        rows.append(evaluate(model, task.test, epoch, "test", wall()))
        log.info("epoch %d step %d train acc %.3f test acc %.3f", epoch, step,
                 rows[-2].accuracy_overall, rows[-1].accuracy_overall)

    result = TrainResult(model, task, rows, step)
    if write:
        out = Path(out_dir if out_dir is not None else config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.metrics_path = out / "metrics.csv"
        write_metrics(result.metrics_path, rows)
        result.checkpoint_path = save_checkpoint(out / "checkpoint", model.params, config)
    return result
