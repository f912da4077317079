"""Tensor and data parallelism over a message-passing fabric."""
from clinical_lm.parallel.context import TensorParallelContext  # noqa: F401
from clinical_lm.parallel.data_parallel import (  # noqa: F401
    check_replicas,
    data_parallel_step,
    params_digest,
    sync_gradients,
)
from clinical_lm.parallel.fabric import (  # noqa: F401
    Fabric,
    SocketFabric,
    ThreadFabric,
    ThreadGroup,
    tree_sum,
)
from clinical_lm.parallel.launcher import (  # noqa: F401
    WorkerEnv,
    WorkerResult,
    launch,
    load_hosts,
    parse_hosts,
)
from clinical_lm.parallel.shard import (  # noqa: F401
    ShardPlan,
    gather_grads,
    gather_params,
    make_plan,
    shard_for_rank,
    shard_params,
    unshard_params,
)
from clinical_lm.parallel.trace import CollectiveTrace  # noqa: F401
