"""
Shared fine-tuning plumbing: task models on top of the encoder, the
training loop and task checkpoints.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from clinical_lm.conf import FinetuneConfig
from clinical_lm.constants import UNK_TOKEN
from clinical_lm.errors import ConfigError, NumericalError
from clinical_lm.model.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from clinical_lm.model.config import ModelConfig
from clinical_lm.model.encoder import build_encoder, encoder_param_names, forward, init_param
from clinical_lm.model.inputs import Packed, pack_pair, pad_batch
from clinical_lm.tensor import Adam, Tape, Tensor, WarmupConstantSchedule, get_default_dtype
from clinical_lm.tokenizer import Vocabulary

logger = logging.getLogger(__name__)

TASK_FINETUNE = "finetune"
TASKS = ("ner", "re", "sts", "nli", "qa")
CHECKPOINT_KIND = "finetune"

Params = Dict[str, Tensor]
LossFn = Callable[[Params, Sequence[Any], np.random.Generator], Tensor]


@dataclass
class TaskModel:
    """Encoder plus one task head. ``labels`` is the closed output label set."""

    task: str
    config: ModelConfig
    params: Params
    labels: List[str] = field(default_factory=list)
    meta: Dict[str, Any] = field(default_factory=dict)


def encoder_from_checkpoint(checkpoint: Optional[Checkpoint], cfg: Optional[ModelConfig] = None, seed: int = 0) -> Tuple[ModelConfig, Params]:
    """Fresh trainable copies of the encoder tensors, or a new encoder when no checkpoint."""
    if checkpoint is None:
        if cfg is None:
            raise ConfigError("need a checkpoint or a model config to build an encoder")
        return cfg, build_encoder(cfg, seed=seed)
    dtype = get_default_dtype()
    params = {
        name: Tensor(checkpoint.params[name].data.astype(dtype), requires_grad=True, name=name)
        for name in encoder_param_names(checkpoint.params)
    }
    return checkpoint.config, params


def init_linear(prefix: str, in_dim: int, out_dim: int, seed: int) -> Params:
    """``{prefix}.weight`` [in, out] and ``{prefix}.bias`` [out]."""
    rng = np.random.default_rng([seed, 7, in_dim, out_dim])
    dtype = get_default_dtype()
    out = {}
    for name, shape in ((f"{prefix}.weight", (in_dim, out_dim)), (f"{prefix}.bias", (out_dim,))):
        out[name] = Tensor(init_param(name, shape, rng, dtype), requires_grad=True, name=name)
    return out


def finetune_loop(
    params: Params,
    examples: Sequence[Any],
    loss_fn: LossFn,
    cfg: FinetuneConfig,
    task: str = "",
    progress: bool = False,
) -> List[float]:
    """
    ``cfg.steps`` Adam steps over seeded per-epoch permutations of
    ``examples`` in mini-batches of ``cfg.batch_size``. Returns the
    per-step losses.
    """
    if not examples:
        raise ConfigError(f"no {task or 'training'} examples to fine-tune on")
    optimizer = Adam(params, WarmupConstantSchedule(cfg.lr, cfg.warmup_steps))
    rng = np.random.default_rng([cfg.seed, 3])
    batch_size = min(cfg.batch_size, len(examples))
    losses: List[float] = []
    order: List[int] = []
    logger.info(
        f"Starting {TASK_FINETUNE} task={task} examples={len(examples)} "
        f"steps={cfg.steps} batch_size={batch_size} lr={cfg.lr}"
    )
    for step in tqdm(range(1, cfg.steps + 1), desc=f"{TASK_FINETUNE}:{task}", disable=not progress, leave=False):
        if len(order) < batch_size:
            order.extend(rng.permutation(len(examples)).tolist())
        batch = [examples[j] for j in order[:batch_size]]
        del order[:batch_size]
        optimizer.zero_grad()
        with Tape() as tape:
            loss = loss_fn(params, batch, rng)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"non-finite {task} loss", step=step)
        tape.backward(loss)
        optimizer.step()
        losses.append(value)
    logger.info(
        f"Finished {TASK_FINETUNE} task={task} steps={cfg.steps} "
        f"final_loss={losses[-1]:.4f}"
    )
    return losses


def save_task_model(path: str, model: TaskModel, seed: int = 0) -> None:
    meta = dict(model.meta, kind=CHECKPOINT_KIND, task=model.task, labels=list(model.labels), seed=seed)
    save_checkpoint(path, model.config, model.params, meta)


def load_task_model(path: str, task: Optional[str] = None) -> TaskModel:
    ckpt = load_checkpoint(path, dtype=get_default_dtype(), requires_grad=False)
    meta = ckpt.meta
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ConfigError(f"{path} is not a fine-tuned task checkpoint (kind={meta.get('kind')!r})")
    if task is not None and meta.get("task") != task:
        raise ConfigError(f"{path} holds a {meta.get('task')!r} model, not {task!r}")
    return TaskModel(meta["task"], ckpt.config, ckpt.params, list(meta.get("labels") or []), meta)


def encode_words(vocab: Vocabulary, words: Sequence[str]) -> Tuple[List[int], List[int]]:
    """Subword ids for pre-split words and the index of each word's first subword."""
    ids: List[int] = []
    firsts: List[int] = []
    for word in words:
        pieces = vocab.encode(word, skip_whitespace=True).ids or [vocab.special_id(UNK_TOKEN)]
        firsts.append(len(ids))
        ids.extend(pieces)
    return ids, firsts



def encode_text_pair(vocab: Vocabulary, a: str, b: str, max_seq_len: int) -> Packed:
    """[CLS] a [SEP] b [SEP] over whitespace-free subwords."""
    return pack_pair(
        vocab.encode(a, skip_whitespace=True).ids,
        vocab.encode(b, skip_whitespace=True).ids,
        max_seq_len,
    )


def pooled_output(params: Params, cfg: ModelConfig, packed: Sequence[Packed], training: bool = False, rng=None) -> Tensor:
    batch = pad_batch([p.ids for p in packed], [p.segment_ids for p in packed])
    out = forward(params, cfg, batch.ids, batch.segment_ids, batch.attn_mask, training=training, rng=rng)
    return out.pooled
