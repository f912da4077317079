"""Pretraining over P x R workers: tensor-parallel shards, data-parallel replicas."""
import functools
import logging
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence

from clinical_lm.conf import ParallelConfig, PretrainConfig
from clinical_lm.model.checkpoint import Checkpoint
from clinical_lm.model.config import ModelConfig
from clinical_lm.model.encoder import build_encoder
from clinical_lm.parallel.context import TensorParallelContext
from clinical_lm.parallel.fabric import Fabric
from clinical_lm.parallel.launcher import HostList, WorkerEnv, WorkerResult, launch
from clinical_lm.parallel.shard import gather_params, make_plan, shard_for_rank
from clinical_lm.parallel.trace import PHASE_SETUP
from clinical_lm.pretraining.data import TokenizedDocument
from clinical_lm.pretraining.heads import build_pretraining_heads
from clinical_lm.pretraining.trainer import PretrainResult, pretrain
from clinical_lm.tensor import Tensor, set_default_dtype

logger = logging.getLogger(__name__)

TASK_PRETRAIN_PARALLEL = "pretrain_parallel"


@dataclass
class ParallelPretrainJob:
    model_cfg: ModelConfig
    train_docs: Sequence[TokenizedDocument]
    val_docs: Sequence[TokenizedDocument]
    cfg: PretrainConfig
    parallel: ParallelConfig
    dtype: str = "float32"


def pretrain_worker(job: ParallelPretrainJob, env: WorkerEnv, tp: Fabric, dp: Fabric) -> Optional[PretrainResult]:
    """
    One worker: identical seeded init on every rank, keep this rank's shard,
    train, then all_gather the best shards. Only global rank 0 returns the
    result with the unsharded checkpoint.
    """
    set_default_dtype(job.dtype)
    tp.phase = dp.phase = PHASE_SETUP
    plan = make_plan(job.model_cfg, env.tp_size, job.parallel.shard_embeddings)
    full = build_encoder(job.model_cfg, seed=job.cfg.seed)
    full.update(build_pretraining_heads(job.model_cfg, seed=job.cfg.seed))
    local = shard_for_rank(full, plan, env.tp_rank)
    del full
    ctx = TensorParallelContext(tp, plan)
    result = pretrain(
        job.model_cfg, job.train_docs, job.val_docs, job.cfg,
        params=local, ctx=ctx, dp_fabric=dp, dp_rank=env.dp_rank,
    )
    gathered = gather_params(tp, result.checkpoint.params, plan)
    if not env.is_primary:
        return None
    result.checkpoint = Checkpoint(
        job.model_cfg,
        {name: Tensor(gathered[name], requires_grad=True, name=name)
         for name in result.checkpoint.params},
        dict(result.checkpoint.meta, model_parallel=env.tp_size, data_parallel=env.dp_size),
    )
    return result


def write_traces(results: Sequence[WorkerResult], directory: str) -> List[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for r in results:
        if r.trace is None:
            continue
        path = os.path.join(directory, f"rank-{r.rank}.csv")
        r.trace.write_csv(path)
        paths.append(path)
    return paths


def pretrain_parallel(
    job: ParallelPretrainJob,
    hosts: Optional[HostList] = None,
) -> PretrainResult:
    parallel = job.parallel
    make_plan(job.model_cfg, parallel.model_parallel, parallel.shard_embeddings)
    logger.info(
        f"Starting {TASK_PRETRAIN_PARALLEL} model_parallel={parallel.model_parallel} "
        f"data_parallel={parallel.data_parallel} transport={parallel.transport}"
    )
    results = launch(
        functools.partial(pretrain_worker, job), parallel, seed=job.cfg.seed, hosts=hosts
    )
    if parallel.trace:
        paths = write_traces(results, parallel.trace)
        logger.info(f"Wrote collective traces count={len(paths)} dir={parallel.trace}")
    result = results[0].value
    logger.info(f"Finished {TASK_PRETRAIN_PARALLEL} steps={result.steps}")
    return result
