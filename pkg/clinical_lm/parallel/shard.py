"""Partitioning of encoder parameters across P tensor-parallel workers."""
import dataclasses
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from clinical_lm.errors import ConfigError
from clinical_lm.model.config import ModelConfig
from clinical_lm.parallel.fabric import Fabric
from clinical_lm.parallel.trace import PHASE_CHECK
from clinical_lm.tensor import Tensor

Params = Dict[str, Tensor]
Split = Tuple[int, Tuple[int, int]]

_COLUMN_PARALLEL = ("attn.q.weight", "attn.k.weight", "attn.v.weight")
_COLUMN_BIASES = ("attn.q.bias", "attn.k.bias", "attn.v.bias")


@dataclasses.dataclass(frozen=True)
class ShardPlan:
    world_size: int
    num_heads: int
    head_dim: int
    intermediate_size: int
    vocab_size: int
    shard_embeddings: bool = False

    @property
    def heads_per_rank(self) -> int:
        return self.num_heads // self.world_size

    def head_range(self, rank: int) -> Tuple[int, int]:
        return rank * self.heads_per_rank, (rank + 1) * self.heads_per_rank

    def attn_columns(self, rank: int) -> Tuple[int, int]:
        lo, hi = self.head_range(rank)
        return lo * self.head_dim, hi * self.head_dim

    def ffn_columns(self, rank: int) -> Tuple[int, int]:
        width = self.intermediate_size // self.world_size
        return rank * width, (rank + 1) * width

    def vocab_range(self, rank: int) -> Tuple[int, int]:
        """Rows of the word table held by ``rank``; the first V mod P ranks get one extra."""
        base, extra = divmod(self.vocab_size, self.world_size)
        lo = rank * base + min(rank, extra)
        return lo, lo + base + (1 if rank < extra else 0)

    def split_of(self, name: str, rank: int) -> Optional[Split]:
        """(axis, (lo, hi)) for a sharded parameter, None if replicated."""
        if self.world_size == 1:
            return None
        if name.endswith(_COLUMN_PARALLEL):
            return 1, self.attn_columns(rank)
        if name.endswith(_COLUMN_BIASES):
            return 0, self.attn_columns(rank)
        if name.endswith("attn.o.weight"):
            return 0, self.attn_columns(rank)
        if name.endswith("ffn.in.weight"):
            return 1, self.ffn_columns(rank)
        if name.endswith("ffn.in.bias"):
            return 0, self.ffn_columns(rank)
        if name.endswith("ffn.out.weight"):
            return 0, self.ffn_columns(rank)
        if self.shard_embeddings and name == "embeddings.word":
            return 0, self.vocab_range(rank)
        return None


def make_plan(cfg: ModelConfig, world_size: int, shard_embeddings: bool = False) -> ShardPlan:
    if world_size < 1:
        raise ConfigError(f"model_parallel must be >= 1, got {world_size}")
    if cfg.num_heads % world_size:
        raise ConfigError(
            f"num_heads {cfg.num_heads} is not divisible by model_parallel {world_size}"
        )
    if cfg.intermediate_size % world_size:
        raise ConfigError(
            f"intermediate_size {cfg.intermediate_size} is not divisible by "
            f"model_parallel {world_size}"
        )
    if shard_embeddings and cfg.vocab_size < world_size:
        raise ConfigError(
            f"vocab_size {cfg.vocab_size} is smaller than model_parallel {world_size}"
        )
    return ShardPlan(
        world_size=world_size,
        num_heads=cfg.num_heads,
        head_dim=cfg.head_dim,
        intermediate_size=cfg.intermediate_size,
        vocab_size=cfg.vocab_size,
        shard_embeddings=shard_embeddings,
    )


def _take(arr: np.ndarray, split: Optional[Split]) -> np.ndarray:
    if split is None:
        return arr.copy()
    axis, (lo, hi) = split
    index = [slice(None)] * arr.ndim
    index[axis] = slice(lo, hi)
    return np.ascontiguousarray(arr[tuple(index)])


def shard_for_rank(params: Mapping[str, Tensor], plan: ShardPlan, rank: int) -> Params:
    return {
        name: Tensor(_take(t.data, plan.split_of(name, rank)),
                     requires_grad=t.requires_grad, name=name)
        for name, t in params.items()
    }


def shard_params(params: Mapping[str, Tensor], plan: ShardPlan) -> List[Params]:
    """P parameter sets; replicated tensors are copied to every shard."""
    return [shard_for_rank(params, plan, rank) for rank in range(plan.world_size)]


def _join(name: str, pieces: Sequence[np.ndarray], plan: ShardPlan) -> np.ndarray:
    split = plan.split_of(name, 0)
    if split is None:
        return np.array(pieces[0])
    return np.concatenate(pieces, axis=split[0])


def unshard_params(shards: Sequence[Mapping[str, Tensor]], plan: ShardPlan) -> Params:
    """Inverse of ``shard_params``; bit-exact."""
    return {
        name: Tensor(_join(name, [s[name].data for s in shards], plan),
                     requires_grad=shards[0][name].requires_grad, name=name)
        for name in shards[0]
    }


def gather_grads(shards: Sequence[Mapping[str, Tensor]], plan: ShardPlan) -> Dict[str, np.ndarray]:
    """Full-size gradients from per-shard ``.grad``; missing grads count as zero."""
    out = {}
    for name in shards[0]:
        pieces = [
            s[name].grad if s[name].grad is not None else np.zeros_like(s[name].data)
            for s in shards
        ]
        out[name] = _join(name, pieces, plan)
    return out


def gather_params(fabric: Fabric, local: Mapping[str, Tensor], plan: ShardPlan) -> Dict[str, np.ndarray]:
    """Full parameters on every rank of ``fabric``, sharded names all_gathered in sorted order."""
    out = {}
    for name in sorted(local):
        if plan.split_of(name, fabric.rank) is None:
            out[name] = local[name].data.copy()
            continue
        pieces = fabric.all_gather(local[name].data, label=f"gather:{name}", phase=PHASE_CHECK)
        out[name] = _join(name, pieces, plan)
    return out
