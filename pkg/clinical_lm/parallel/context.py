"""
Tensor-parallel hooks for ``model.encoder.forward``.

Column-parallel projections (q/k/v, ffn.in) read their input through
``copy_in``: identity forward, all_reduce of the partial input gradient
backward. Row-parallel projections (attn.o, ffn.out) leave through
``reduce_out``: all_reduce forward, identity backward. That gives two
all_reduces per layer in each direction.
"""
from typing import Optional

import numpy as np

from clinical_lm.errors import ShapeError, VocabularyError
from clinical_lm.parallel.fabric import Fabric
from clinical_lm.parallel.shard import ShardPlan
from clinical_lm.parallel.trace import PHASE_BACKWARD, PHASE_FORWARD
from clinical_lm.tensor import Tensor, embedding_lookup, matmul, transpose
from clinical_lm.tensor.autodiff import _result


class TensorParallelContext:
    def __init__(self, fabric: Fabric, plan: Optional[ShardPlan] = None):
        self.fabric = fabric
        self.plan = plan
        self.layer = -1

    @property
    def rank(self) -> int:
        return self.fabric.rank

    @property
    def world_size(self) -> int:
        return self.fabric.world_size

    @property
    def shard_embeddings(self) -> bool:
        return bool(self.plan and self.plan.shard_embeddings and self.world_size > 1)

    def set_layer(self, layer: int) -> None:
        self.layer = layer

    def copy_in(self, x: Tensor) -> Tensor:
        fabric, layer = self.fabric, self.layer

        def _backward(g):
            return (fabric.all_reduce(g, label="copy_in", layer=layer, phase=PHASE_BACKWARD),)

        return _result(x.data.copy(), (x,), _backward, "copy_in")

    def reduce_out(self, x: Tensor) -> Tensor:
        out = self.fabric.all_reduce(
            x.data, label="reduce_out", layer=self.layer, phase=PHASE_FORWARD
        )
        return _result(np.array(out, dtype=x.dtype), (x,), lambda g: (g,), "reduce_out")

    def embed(self, table: Tensor, ids: np.ndarray) -> Tensor:
        if not self.shard_embeddings:
            return embedding_lookup(table, ids)
        lo, hi = self.plan.vocab_range(self.rank)
        if table.shape[0] != hi - lo:
            raise ShapeError("word embedding shard does not match plan", table.shape, (hi - lo,))
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.plan.vocab_size):
            raise VocabularyError(
                f"token id out of range [0, {self.plan.vocab_size}): "
                f"min={int(ids.min())} max={int(ids.max())}"
            )
        owned = (ids >= lo) & (ids < hi)
        local_ids = np.where(owned, ids - lo, 0)
        keep = owned[..., None].astype(table.dtype)
        partial = table.data[local_ids] * keep
        full = self.fabric.all_reduce(
            partial, label="embed", layer=self.layer, phase=PHASE_FORWARD
        )
        shape, dtype = table.shape, table.dtype

        def _backward(g):
            out = np.zeros(shape, dtype=dtype)
            np.add.at(out, local_ids.reshape(-1), (g * keep).reshape(-1, shape[1]))
            return (out,)

        return _result(np.array(full, dtype=dtype), (table,), _backward, "vocab_parallel_embed")

    def vocab_logits(self, hidden: Tensor, table: Tensor) -> Tensor:
        if not self.shard_embeddings:
            return matmul(hidden, transpose(table))
        local = matmul(self.copy_in(hidden), transpose(table))
        parts = self.fabric.all_gather(
            local.data, label="vocab_logits", layer=self.layer, phase=PHASE_FORWARD
        )
        lo, hi = self.plan.vocab_range(self.rank)

        def _backward(g):
            return (g[..., lo:hi],)

        return _result(
            np.concatenate(parts, axis=-1).astype(local.dtype),
            (local,),
            _backward,
            "vocab_parallel_gather",
        )
