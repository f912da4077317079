"""
Pretraining loop: joint MLM + SOP loss, periodic validation, early stopping
on validation loss and a best-validation checkpoint.
"""
import csv
import io
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from clinical_lm.conf import PretrainConfig
from clinical_lm.constants import IGNORE_INDEX
from clinical_lm.errors import ClinicalLMError, ConfigError, EmptyCorpusError, NumericalError
from clinical_lm.model.checkpoint import Checkpoint
from clinical_lm.model.config import ModelConfig
from clinical_lm.model.encoder import build_encoder
from clinical_lm.parallel.data_parallel import check_replicas, sync_gradients
from clinical_lm.parallel.fabric import Fabric
from clinical_lm.pretraining.data import (
    BatchBuilder,
    BatchPrefetcher,
    TokenizedDocument,
    train_batches,
    validation_batches,
)
from clinical_lm.pretraining.heads import (
    PretrainBatch,
    build_pretraining_heads,
    pretraining_loss,
)
from clinical_lm.tensor import Adam, Tape, Tensor, WarmupConstantSchedule, no_grad
from clinical_lm.utils import atomic_write_text

logger = logging.getLogger(__name__)

TASK_PRETRAIN = "pretrain"
TRAIN_LOG_COLUMNS = ("step", "split", "loss", "seconds")
SPLIT_TRAIN = "train"
SPLIT_VAL = "val"

Params = Dict[str, Tensor]


@dataclass
class TrainLogRow:
    step: int
    split: str
    loss: float
    seconds: float


class TrainLog:
    """Per-step training loss and per-eval validation loss."""

    def __init__(self, wall_clock: bool = True):
        self.rows: List[TrainLogRow] = []
        self.wall_clock = wall_clock
        self._start = time.perf_counter()
        self._last_step: Dict[str, int] = {}

    def add(self, step: int, split: str, loss: float) -> None:
        last = self._last_step.get(split)
        if last is not None and step <= last:
            raise ClinicalLMError(
                f"{split} log step {step} does not follow step {last}", error_key="train_log"
            )
        self._last_step[split] = step
        seconds = time.perf_counter() - self._start if self.wall_clock else 0.0
        self.rows.append(TrainLogRow(step, split, float(loss), seconds))

    def losses(self, split: str) -> List[float]:
        return [r.loss for r in self.rows if r.split == split]

    def steps(self, split: str) -> List[int]:
        return [r.step for r in self.rows if r.split == split]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRAIN_LOG_COLUMNS)
        for r in self.rows:
            writer.writerow([r.step, r.split, repr(r.loss), f"{r.seconds:.3f}"])
        return buf.getvalue()

    def write_csv(self, path: str) -> None:
        atomic_write_text(path, self.to_csv())


class EarlyStopping:
    """Stop after ``patience`` consecutive evaluations without an improvement above ``min_delta``."""

    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best: Optional[float] = None
        self.best_step: Optional[int] = None
        self.bad_evals = 0

    def update(self, loss: float, step: int) -> bool:
        """Record one evaluation; True when it is the new best."""
        if self.best is None or loss < self.best - self.min_delta:
            self.best = loss
            self.best_step = step
            self.bad_evals = 0
            return True
        self.bad_evals += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_evals >= self.patience


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    log: TrainLog
    best_step: int
    best_val_loss: float
    initial_val_loss: float
    steps: int
    stopped_early: bool
    interrupted: bool = False
    masked_accuracy: float = 0.0
    extra: Dict[str, float] = field(default_factory=dict)


def evaluate(
    params: Params,
    cfg: ModelConfig,
    batches: Sequence[PretrainBatch],
    ctx=None,
) -> Dict[str, float]:
    """Mean joint loss over batches plus masked-token top-1 accuracy."""
    total, correct, masked = 0.0, 0, 0
    with no_grad():
        for batch in batches:
            out = pretraining_loss(params, cfg, batch, ctx=ctx, training=False)
            total += out.total.item()
            correct += out.masked_correct
            masked += out.masked_total
    n = max(len(batches), 1)
    return {"loss": total / n, "masked_accuracy": correct / masked if masked else 0.0}


def masked_count(batch: PretrainBatch) -> int:
    """Masked positions in a batch. Every replica holds the same global batch."""
    return int((batch.mlm_labels != IGNORE_INDEX).sum())


def _snapshot(params: Params) -> Dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in params.items()}


def pretrain(
    model_cfg: ModelConfig,
    train_docs: Sequence[TokenizedDocument],
    val_docs: Sequence[TokenizedDocument],
    cfg: PretrainConfig,
    params: Optional[Params] = None,
    ctx=None,
    dp_fabric: Optional[Fabric] = None,
    dp_rank: int = 0,
    stop_event: Optional[threading.Event] = None,
    progress: bool = False,
) -> PretrainResult:
    """
    Train until ``max_steps``, early stop or ``stop_event``. Returns the
    best-validation parameters as a Checkpoint (encoder and pretraining
    heads) with the TrainLog.

    With ``dp_fabric`` of size R each replica takes the ``dp_rank``-th
    contiguous slice of every global batch and gradients are averaged; the
    MLM term is normalized by the masked count of the global batch so the
    averaged gradient equals the serial one.
    ``ctx`` is the tensor-parallel context when ``params`` are shards.
    """
    cfg.validate()
    dp_size = dp_fabric.world_size if dp_fabric is not None else 1
    if cfg.batch_size % dp_size:
        raise ConfigError(
            f"batch_size {cfg.batch_size} is not divisible by data_parallel {dp_size}"
        )
    if params is None:
        params = build_encoder(model_cfg, seed=cfg.seed)
        params.update(build_pretraining_heads(model_cfg, seed=cfg.seed))

    builder = BatchBuilder(
        train_docs, model_cfg.max_seq_len, model_cfg.vocab_size,
        cfg.mask_rate, cfg.mask_mode, cfg.sentences_per_segment,
    )
    val_builder = BatchBuilder(
        val_docs, model_cfg.max_seq_len, model_cfg.vocab_size,
        cfg.mask_rate, cfg.mask_mode, cfg.sentences_per_segment,
    )
    if not builder.positions:
        raise EmptyCorpusError("training split has no document with two sentences")
    if not val_builder.positions:
        raise EmptyCorpusError("validation split has no document with two sentences")
    val_batches = validation_batches(val_builder, cfg.batch_size, cfg.seed)
    micro = cfg.batch_size // dp_size
    fabrics = [f for f in (getattr(ctx, "fabric", None), dp_fabric) if f is not None]

    logger.info(
        f"Starting {TASK_PRETRAIN} train_pairs={len(builder.positions)} "
        f"val_pairs={len(val_builder.positions)} batch_size={cfg.batch_size} "
        f"max_steps={cfg.max_steps} seed={cfg.seed}"
    )
    log = TrainLog(wall_clock=cfg.wall_clock)
    optimizer = Adam(params, WarmupConstantSchedule(cfg.lr, cfg.warmup_steps))
    dropout_rng = np.random.default_rng([cfg.seed, 2])
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)

    initial = evaluate(params, model_cfg, val_batches, ctx)
    log.add(0, SPLIT_VAL, initial["loss"])
    stopper.update(initial["loss"], 0)
    best = _snapshot(params)
    best_accuracy = initial["masked_accuracy"]
    logger.info(f"Initial validation step=0 val_loss={initial['loss']:.4f}")

    step = 0
    stopped_early = interrupted = False
    stream = BatchPrefetcher(train_batches(builder, cfg.batch_size, cfg.seed), cfg.prefetch)
    bar = tqdm(total=cfg.max_steps, desc=TASK_PRETRAIN, disable=not progress, leave=False)
    try:
        while step < cfg.max_steps:
            if stop_event is not None and stop_event.is_set():
                interrupted = True
                logger.warning(f"Stop requested; ending {TASK_PRETRAIN} at step={step}")
                break
            batch = next(stream)
            normalizer = None
            if dp_size > 1:
                normalizer = masked_count(batch) / dp_size
                batch = PretrainBatch(*(a[dp_rank * micro:(dp_rank + 1) * micro] for a in batch))
            step += 1
            for fabric in fabrics:
                fabric.step = step
            optimizer.zero_grad()
            with Tape() as tape:
                out = pretraining_loss(
                    params, model_cfg, batch, ctx=ctx, training=True, rng=dropout_rng,
                    mlm_normalizer=normalizer,
                )
            loss = out.total.item()
            if not math.isfinite(loss):
                raise NumericalError("non-finite training loss", step=step)
            tape.backward(out.total)
            if dp_fabric is not None:
                sync_gradients(dp_fabric, params)
            optimizer.step()
            log.add(step, SPLIT_TRAIN, loss)
            bar.update(1)
            if step % cfg.eval_every:
                continue
            if dp_fabric is not None:
                check_replicas(dp_fabric, params)
            metrics = evaluate(params, model_cfg, val_batches, ctx)
            log.add(step, SPLIT_VAL, metrics["loss"])
            if stopper.update(metrics["loss"], step):
                best = _snapshot(params)
                best_accuracy = metrics["masked_accuracy"]
            logger.info(
                f"Evaluated step={step} train_loss={loss:.4f} val_loss={metrics['loss']:.4f} "
                f"best={stopper.best:.4f} bad_evals={stopper.bad_evals}"
            )
            if stopper.should_stop:
                stopped_early = True
                break
    finally:
        bar.close()
        stream.close()

    meta = {
        "kind": "pretrain",
        "seed": cfg.seed,
        "best_step": stopper.best_step,
        "best_val_loss": stopper.best,
        "steps": step,
    }
    best_params = {
        name: Tensor(arr, requires_grad=True, name=name) for name, arr in best.items()
    }
    logger.info(
        f"Finished {TASK_PRETRAIN} steps={step} best_step={stopper.best_step} "
        f"best_val_loss={stopper.best:.4f} initial_val_loss={initial['loss']:.4f} "
        f"stopped_early={stopped_early}"
    )
    return PretrainResult(
        checkpoint=Checkpoint(model_cfg, best_params, meta),
        log=log,
        best_step=stopper.best_step,
        best_val_loss=stopper.best,
        initial_val_loss=initial["loss"],
        steps=step,
        stopped_early=stopped_early,
        interrupted=interrupted,
        masked_accuracy=best_accuracy,
    )
