"""
Start P x R workers, each with a tensor-parallel and a data-parallel fabric.

Global rank = dp_rank * P + tp_rank. Tensor-parallel group ``d`` holds
ranks d*P .. d*P+P-1; data-parallel group ``t`` holds ranks t, t+P, ...
With sockets, each group's hub is its first member's host entry, at the
entry's port for tensor-parallel groups and port + 1 for data-parallel
groups.
"""
import logging
import multiprocessing
import queue as queue_module
import socket
import threading
from dataclasses import dataclass
from typing import Any, Callable, List, Optional, Sequence, Tuple

from clinical_lm import errors
from clinical_lm.conf import ParallelConfig
from clinical_lm.errors import ClinicalLMError, ConfigError, FabricError
from clinical_lm.parallel.fabric import Fabric, SocketFabric, ThreadGroup
from clinical_lm.parallel.trace import CollectiveTrace

logger = logging.getLogger(__name__)

TASK_LAUNCH = "launch_workers"
LOOPBACK = "127.0.0.1"
TP_PORT_OFFSET = 0
DP_PORT_OFFSET = 1

HostList = List[Tuple[str, int]]


@dataclass(frozen=True)
class WorkerEnv:
    tp_rank: int
    dp_rank: int
    tp_size: int
    dp_size: int
    seed: int = 0

    @property
    def rank(self) -> int:
        return self.dp_rank * self.tp_size + self.tp_rank

    @property
    def world_size(self) -> int:
        return self.tp_size * self.dp_size

    @property
    def is_primary(self) -> bool:
        return self.rank == 0


@dataclass
class WorkerResult:
    rank: int
    value: Any
    trace: Optional[CollectiveTrace] = None


WorkerFn = Callable[[WorkerEnv, Fabric, Fabric], Any]


def parse_hosts(text: str, source: str = "<hosts>") -> HostList:
    """One ``host:port`` per line, blank lines and ``#`` comments ignored."""
    hosts: HostList = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        host, sep, port = line.rpartition(":")
        if not sep or not host:
            raise ConfigError(f"{source}:{lineno}: expected host:port, got {line!r}")
        try:
            hosts.append((host, int(port)))
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad port {port!r}")
    return hosts


def load_hosts(path: str) -> HostList:
    with open(path, "r", encoding="utf-8") as f:
        return parse_hosts(f.read(), source=path)


def _port_free(port: int) -> bool:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            s.bind((LOOPBACK, port))
        except OSError:
            return False
    return True


def allocate_loopback_hosts(world_size: int, attempts: int = 64) -> HostList:
    """Loopback entries whose port and port + 1 are both currently free."""
    hosts: HostList = []
    taken = set()
    for _ in range(world_size):
        for _attempt in range(attempts):
            with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
                s.bind((LOOPBACK, 0))
                port = s.getsockname()[1]
            if port + 1 > 65535 or port in taken or port + 1 in taken:
                continue
            if _port_free(port + 1):
                taken.update((port, port + 1))
                hosts.append((LOOPBACK, port))
                break
        else:
            raise FabricError("no free loopback port pair found")
    return hosts


def worker_envs(tp_size: int, dp_size: int, seed: int = 0) -> List[WorkerEnv]:
    return [
        WorkerEnv(tp_rank=t, dp_rank=d, tp_size=tp_size, dp_size=dp_size, seed=seed)
        for d in range(dp_size)
        for t in range(tp_size)
    ]


def socket_fabrics(
    env: WorkerEnv,
    hosts: Sequence[Tuple[str, int]],
    timeout: float,
    trace: Optional[CollectiveTrace] = None,
) -> Tuple[SocketFabric, SocketFabric]:
    tp_hub_host, tp_hub_port = hosts[env.dp_rank * env.tp_size]
    dp_hub_host, dp_hub_port = hosts[env.tp_rank]
    tp = SocketFabric(
        env.tp_rank, env.tp_size, (tp_hub_host, tp_hub_port + TP_PORT_OFFSET),
        timeout=timeout, name="tp", trace=trace,
    )
    try:
        dp = SocketFabric(
            env.dp_rank, env.dp_size, (dp_hub_host, dp_hub_port + DP_PORT_OFFSET),
            timeout=timeout, name="dp", trace=trace,
        )
    except BaseException:
        tp.close()
        raise
    return tp, dp


def _root_cause(failures: List[Tuple[int, BaseException]]) -> BaseException:
    """A peer's FabricError is usually a consequence; prefer any other error."""
    failures = sorted(failures, key=lambda f: f[0])
    for _rank, exc in failures:
        if not isinstance(exc, FabricError):
            return exc
    return failures[0][1]


def _run_threads(
    worker_fn: WorkerFn,
    envs: List[WorkerEnv],
    parallel: ParallelConfig,
    hosts: Optional[HostList],
) -> List[WorkerResult]:
    tp_size, dp_size = parallel.model_parallel, parallel.data_parallel
    timeout = parallel.fabric_timeout
    tp_groups = [ThreadGroup(tp_size, timeout, name="tp") for _ in range(dp_size)]
    dp_groups = [ThreadGroup(dp_size, timeout, name="dp") for _ in range(tp_size)]
    results: List[Optional[WorkerResult]] = [None] * len(envs)
    failures: List[Tuple[int, BaseException]] = []
    lock = threading.Lock()

    def _abort_all():
        for group in tp_groups + dp_groups:
            group.abort()

    def _target(env: WorkerEnv):
        trace = CollectiveTrace() if parallel.trace else None
        fabrics: Tuple[Fabric, ...] = ()
        try:
            if hosts is not None:
                fabrics = socket_fabrics(env, hosts, timeout, trace)
            else:
                fabrics = (
                    tp_groups[env.dp_rank].fabric(env.tp_rank, trace),
                    dp_groups[env.tp_rank].fabric(env.dp_rank, trace),
                )
            value = worker_fn(env, *fabrics)
            results[env.rank] = WorkerResult(env.rank, value, trace)
        except BaseException as exc:
            with lock:
                failures.append((env.rank, exc))
            _abort_all()
            for fabric in fabrics:
                fabric.close()
        else:
            for fabric in fabrics:
                fabric.close()

    threads = [
        threading.Thread(target=_target, args=(env,), name=f"worker-{env.rank}", daemon=True)
        for env in envs
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failures:
        raise _root_cause(failures)
    return results


def _process_entry(worker_fn, env, hosts, timeout, with_trace, out_queue):
    trace = CollectiveTrace() if with_trace else None
    tp = dp = None
    try:
        tp, dp = socket_fabrics(env, hosts, timeout, trace)
        value = worker_fn(env, tp, dp)
        out_queue.put((env.rank, "ok", (value, trace)))
    except BaseException as exc:
        key = errors.classify_exception(exc)
        out_queue.put((env.rank, "error", (type(exc).__name__, key, str(exc))))
    finally:
        for fabric in (tp, dp):
            if fabric is not None:
                fabric.close()


def _rebuild_exception(class_name: str, key: str, message: str) -> BaseException:
    cls = getattr(errors, class_name, None)
    if isinstance(cls, type) and issubclass(cls, ClinicalLMError):
        exc = cls.__new__(cls)
        ClinicalLMError.__init__(exc, message, error_key=key)
        if isinstance(exc, FabricError):
            exc.layer = None
        if isinstance(exc, errors.NumericalError):
            exc.step = None
        return exc
    return ClinicalLMError(f"{class_name}: {message}", error_key=key)


def _run_processes(
    worker_fn: WorkerFn,
    envs: List[WorkerEnv],
    parallel: ParallelConfig,
    hosts: HostList,
) -> List[WorkerResult]:
    ctx = multiprocessing.get_context("spawn")
    out_queue = ctx.Queue()
    procs = [
        ctx.Process(
            target=_process_entry,
            args=(worker_fn, env, hosts, parallel.fabric_timeout, parallel.trace, out_queue),
            name=f"worker-{env.rank}",
        )
        for env in envs
    ]
    for p in procs:
        p.start()
    results: List[Optional[WorkerResult]] = [None] * len(envs)
    failures: List[Tuple[int, BaseException]] = []
    pending = len(procs)
    # Generous bound: each worker runs many collectives, each bounded by fabric_timeout.
    try:
        while pending:
            try:
                rank, status, payload = out_queue.get(timeout=max(parallel.fabric_timeout, 1.0) * 4)
            except queue_module.Empty:
                if not any(p.is_alive() for p in procs):
                    failures.append((-1, FabricError("workers exited without reporting")))
                    break
                continue
            pending -= 1
            if status == "ok":
                value, trace = payload
                results[rank] = WorkerResult(rank, value, trace)
            else:
                failures.append((rank, _rebuild_exception(*payload)))
    finally:
        for p in procs:
            p.join(timeout=parallel.fabric_timeout)
            if p.is_alive():
                p.terminate()
                p.join()
    if failures:
        raise _root_cause(failures)
    return results


def launch(
    worker_fn: WorkerFn,
    parallel: ParallelConfig,
    seed: int = 0,
    hosts: Optional[HostList] = None,
    processes: Optional[bool] = None,
) -> List[WorkerResult]:
    """
    Run ``worker_fn(env, tp_fabric, dp_fabric)`` on every worker and return
    results in global rank order. The thread transport runs workers as
    threads; the socket transport runs them as spawned processes unless
    ``processes`` is False. A failure on any worker aborts the rest and the
    root-cause exception is re-raised.
    """
    envs = worker_envs(parallel.model_parallel, parallel.data_parallel, seed)
    use_sockets = parallel.transport == "sockets"
    if use_sockets:
        hosts = hosts or allocate_loopback_hosts(len(envs))
        if len(hosts) < len(envs):
            raise ConfigError(
                f"hosts list has {len(hosts)} entries; {len(envs)} workers need one each"
            )
    if processes is None:
        processes = use_sockets
    logger.info(
        f"Starting {TASK_LAUNCH} transport={parallel.transport} "
        f"model_parallel={parallel.model_parallel} data_parallel={parallel.data_parallel} "
        f"processes={processes}"
    )
    if processes:
        if not use_sockets:
            raise ConfigError("process workers require the sockets transport")
        results = _run_processes(worker_fn, envs, parallel, hosts)
    else:
        results = _run_threads(worker_fn, envs, parallel, hosts if use_sockets else None)
    logger.info(f"Finished {TASK_LAUNCH} workers={len(results)}")
    return results
