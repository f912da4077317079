"""Replicated training: gradient averaging and replica hash checks."""
import logging
from typing import Any, Callable, Mapping

import numpy as np

from clinical_lm.errors import ReplicaDivergenceError
from clinical_lm.parallel.fabric import Fabric
from clinical_lm.parallel.trace import PHASE_CHECK, PHASE_GRAD_SYNC
from clinical_lm.tensor import Adam, Tape, Tensor
from clinical_lm.utils import sha256_bytes

logger = logging.getLogger(__name__)

LossFn = Callable[[Mapping[str, Tensor], Any], Tensor]


def sync_gradients(fabric: Fabric, params: Mapping[str, Tensor]) -> None:
    """Replace every ``.grad`` by the mean over replicas, in sorted name order."""
    if fabric.world_size == 1:
        return
    for name in sorted(params):
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        total = fabric.all_reduce(g, label=f"grad:{name}", phase=PHASE_GRAD_SYNC)
        p.grad = (total / fabric.world_size).astype(p.dtype, copy=False)


def params_digest(params: Mapping[str, Tensor]) -> str:
    parts = []
    for name in sorted(params):
        arr = params[name].data
        parts.append(name.encode("utf-8"))
        parts.append(str(arr.shape).encode("ascii"))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return sha256_bytes(b"\0".join(parts))


def check_replicas(fabric: Fabric, params: Mapping[str, Tensor]) -> str:
    """All replicas must hold bit-identical parameters."""
    digest = params_digest(params)
    if fabric.world_size == 1:
        return digest
    local = np.frombuffer(bytes.fromhex(digest), dtype=np.uint8)
    gathered = fabric.all_gather(local, label="param_digest", phase=PHASE_CHECK)
    for rank, other in enumerate(gathered):
        if not np.array_equal(other, gathered[0]):
            raise ReplicaDivergenceError(
                f"replica {rank} parameters differ from replica 0 "
                f"at step {fabric.step}"
            )
    return digest


def data_parallel_step(
    params: Mapping[str, Tensor],
    loss_fn: LossFn,
    micro_batch: Any,
    optimizer: Adam,
    fabric: Fabric,
    check: bool = True,
) -> float:
    """
    One replica's share of a synchronous step: local mean loss on
    ``micro_batch``, gradients averaged over the group, identical Adam
    update everywhere. Returns the local loss.
    """
    optimizer.zero_grad()
    with Tape() as tape:
        loss = loss_fn(params, micro_batch)
    tape.backward(loss)
    sync_gradients(fabric, params)
    optimizer.step()
    if check:
        check_replicas(fabric, params)
    return loss.item()
